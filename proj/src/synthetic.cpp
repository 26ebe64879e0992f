#include "tstok/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <stdexcept>

namespace tstok {

std::string to_string(SyntheticKind k) {
  switch (k) {
    case SyntheticKind::MultiSine: return "multi-sine";
    case SyntheticKind::SinePlusTrend: return "sine-plus-trend";
    case SyntheticKind::Spiked: return "spiked";
  }
  return "multi-sine";
}

SyntheticKind parse_synthetic_kind(const std::string& s) {
  if (s == "multi-sine") return SyntheticKind::MultiSine;
  if (s == "sine-plus-trend") return SyntheticKind::SinePlusTrend;
  if (s == "spiked") return SyntheticKind::Spiked;
  throw std::invalid_argument("unknown synthetic kind '" + s +
                              "' (expected multi-sine, sine-plus-trend or spiked)");
}

void SyntheticSpec::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("synthetic spec: " + m); };
  if (sensors == 0 || steps == 0 || examples == 0) fail("dimensions must be positive");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) fail("noise_std must be >= 0");
  if (min_components == 0 || max_components < min_components) fail("need 1 <= min_components <= max_components");
  if (!(min_period > 0.0 && max_period >= min_period)) fail("need 0 < min_period <= max_period");
  if (!(spike_ratio >= 0.0 && spike_ratio <= 0.1)) fail("spike_ratio must lie in [0, 0.1]");
  if (!(spike_amplitude >= 0.0) || !std::isfinite(spike_amplitude)) fail("spike_amplitude must be >= 0");
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t E = spec.examples, S = spec.sensors, T = spec.steps;
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<std::size_t> ncomp(spec.min_components, spec.max_components);
  std::uniform_real_distribution<double> amp(0.5, 1.5), phase(0.0, 2.0 * std::numbers::pi),
      slope(-1.0, 1.0);
  // Log-uniform periods.
  std::uniform_real_distribution<double> log_period(std::log(spec.min_period), std::log(spec.max_period));
  std::normal_distribution<double> noise(0.0, 1.0);

  SyntheticData out;
  auto& ds = out.dataset;
  ds.values = Tensor({E, S, T});
  for (std::size_t s = 0; s < S; ++s) ds.sensor_names.push_back("s" + std::to_string(s));
  for (std::size_t e = 0; e < E; ++e) ds.example_ids.push_back(std::to_string(e));

  for (std::size_t e = 0; e < E; ++e) {
    for (std::size_t s = 0; s < S; ++s) {
      const std::size_t k = ncomp(rng);
      std::vector<double> a(k), w(k), ph(k);
      for (std::size_t c = 0; c < k; ++c) {
        a[c] = amp(rng);
        w[c] = 2.0 * std::numbers::pi / std::exp(log_period(rng));
        ph[c] = phase(rng);
      }
      const double trend = spec.kind == SyntheticKind::SinePlusTrend ? slope(rng) * 2.0 / static_cast<double>(T) : 0.0;
      for (std::size_t t = 0; t < T; ++t) {
        double v = trend * static_cast<double>(t);
        for (std::size_t c = 0; c < k; ++c) v += a[c] * std::sin(w[c] * static_cast<double>(t) + ph[c]);
        if (spec.noise_std > 0.0) v += spec.noise_std * noise(rng);
        ds.values.at(e, s, t) = v;
      }
    }
  }
  if (spec.kind != SyntheticKind::Spiked) return out;

  out.clean = ds;
  out.labels = Tensor({E, T});
  const auto count = static_cast<std::size_t>(std::llround(spec.spike_ratio * static_cast<double>(T)));
  std::vector<std::size_t> steps(T);
  std::uniform_int_distribution<std::size_t> pick_sensor(0, S - 1);
  for (std::size_t e = 0; e < E; ++e) {
    std::iota(steps.begin(), steps.end(), std::size_t{0});
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> j(i, T - 1);
      std::swap(steps[i], steps[j(rng)]);
    }
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t t = steps[i], s = pick_sensor(rng);
      double mu = 0.0, var = 0.0;
      for (std::size_t u = 0; u < T; ++u) mu += out.clean.values.at(e, s, u);
      mu /= static_cast<double>(T);
      for (std::size_t u = 0; u < T; ++u) var += std::pow(out.clean.values.at(e, s, u) - mu, 2);
      const double sd = std::sqrt(var / static_cast<double>(T));
      const double sign = (rng() & 1U) ? 1.0 : -1.0;
      ds.values.at(e, s, t) += sign * spec.spike_amplitude * sd;
      out.labels.at(e, t) = 1.0;
    }
  }
  return out;
}

}  // namespace tstok
