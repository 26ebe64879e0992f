#pragma once

#include <cstdint>
#include <string>

#include "tstok/data.hpp"
#include "tstok/tensor.hpp"

namespace tstok {

enum class SyntheticKind { MultiSine, SinePlusTrend, Spiked };

std::string to_string(SyntheticKind k);
SyntheticKind parse_synthetic_kind(const std::string& s);

struct SyntheticSpec {
  SyntheticKind kind = SyntheticKind::MultiSine;
  std::size_t sensors = 8;
  std::size_t steps = 512;
  std::size_t examples = 64;
  double noise_std = 0.05;
  std::size_t min_components = 1;
  std::size_t max_components = 3;
  double min_period = 8.0;
  double max_period = 64.0;
  /// Spiked only: fraction of time steps per example carrying a spike.
  double spike_ratio = 0.02;
  /// Spiked only: spike height in units of the row's standard deviation.
  double spike_amplitude = 5.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticData {
  TimeSeriesDataset dataset;
  /// Spiked only: the same series before spikes were injected.
  TimeSeriesDataset clean;
  /// Spiked only: labels[E x T], 1 where a spike was injected.
  Tensor labels;
};

/// Multi-sine rows sum 1 to 3 seeded sinusoids plus Gaussian noise.
/// Sine-plus-trend adds a seeded linear trend. Spiked injects single-step
/// spikes on one seeded sensor at round(spike_ratio * T) distinct steps per example.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

}  // namespace tstok
