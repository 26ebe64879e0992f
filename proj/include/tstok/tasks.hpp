#pragma once

#include <cstdint>
#include <vector>

#include "tstok/data.hpp"
#include "tstok/metrics.hpp"
#include "tstok/tensor.hpp"
#include "tstok/vqvae.hpp"

namespace tstok {

struct ImputationResult {
  /// Original units; equals the input at observed positions.
  Tensor filled;
  /// Model reconstruction at every position, original units.
  Tensor recon;
  MaskSpec mask;
};

/// x -> (x - mean) / std with `norm`, mask (fill 0), reconstruct, invert `norm`.
/// When the model was trained with instance normalization, each row is further
/// normalized with statistics of its observed entries only.
ImputationResult impute(const VqVae& model, const UnivariateBatch& batch, const MaskSpec& mask,
                        const RevInState& norm);
/// Identity normalization.
ImputationResult impute(const VqVae& model, const UnivariateBatch& batch, const MaskSpec& mask);

/// Replaces missing entries with the mean of the observed entries in the same row.
Tensor mean_fill(const UnivariateBatch& batch, const MaskSpec& mask);

struct ImputationScores {
  double mse_masked = 0.0;
  double mae_masked = 0.0;
  double mse_all = 0.0;
  double mae_all = 0.0;
};

ImputationScores score_imputation(const Tensor& truth, const Tensor& filled, const MaskSpec& mask);

enum class ThresholdMode { Global, PerWindow };

struct AnomalyOptions {
  double ratio = 0.02;
  ThresholdMode mode = ThresholdMode::Global;
  /// Window length for ThresholdMode::PerWindow.
  std::size_t window = 0;
};

struct AnomalyResult {
  std::vector<double> scores;
  Labels flags;
  double ratio = 0.0;
};

/// Flags the round(ratio * n) largest scores; ties go to the lower index.
Labels top_fraction(const std::vector<double>& scores, double ratio);

/// series[S x T]: one multivariate series. scores[t] is the squared
/// reconstruction error at t averaged over sensors, in normalized units when
/// the model uses instance normalization.
AnomalyResult detect_anomalies(const VqVae& model, const Tensor& series, const AnomalyOptions& options);
AnomalyResult detect_anomalies(const VqVae& model, const Tensor& series, double ratio);

}  // namespace tstok
