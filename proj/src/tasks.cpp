#include "tstok/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace tstok {

namespace {

void check_mask(const UnivariateBatch& batch, const MaskSpec& mask) {
  if (batch.series.rank() != 2) throw std::invalid_argument("imputation batch must be [N x T]");
  if (mask.rows != batch.rows() || mask.steps != batch.steps() ||
      mask.observed_flags.size() != mask.rows * mask.steps) {
    throw std::invalid_argument("mask shape [" + std::to_string(mask.rows) + "x" +
                                std::to_string(mask.steps) + "] does not match batch " +
                                shape_string(batch.series.shape()));
  }
}

RevInState observed_statistics(const Tensor& x, const MaskSpec& mask) {
  RevInState st;
  st.mean.assign(mask.rows, 0.0);
  st.std.assign(mask.rows, 1.0);
  for (std::size_t i = 0; i < mask.rows; ++i) {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < mask.steps; ++t) {
      if (mask.observed(i, t)) {
        s += x.at(i, t);
        ++n;
      }
    }
    if (n == 0) continue;
    const double mu = s / static_cast<double>(n);
    double var = 0.0;
    for (std::size_t t = 0; t < mask.steps; ++t)
      if (mask.observed(i, t)) var += (x.at(i, t) - mu) * (x.at(i, t) - mu);
    st.mean[i] = mu;
    st.std[i] = std::max(std::sqrt(var / static_cast<double>(n)), kStdFloor);
  }
  return st;
}

}  // namespace

ImputationResult impute(const VqVae& model, const UnivariateBatch& batch, const MaskSpec& mask,
                        const RevInState& norm) {
  check_mask(batch, mask);
  UnivariateBatch x = revin_apply(batch, norm);
  RevInState inst;
  if (model.config().instance_norm) {
    inst = observed_statistics(x.series, mask);
    x = revin_apply(x, inst);
  }
  const UnivariateBatch masked = apply_mask(x, mask, 0.0);
  UnivariateBatch recon{model.reconstruct(masked.series), batch.origin};
  if (model.config().instance_norm) recon = revin_denormalize(recon, inst);
  recon = revin_denormalize(recon, norm);

  ImputationResult out;
  out.recon = recon.series;
  out.filled = batch.series;
  for (std::size_t i = 0; i < mask.rows; ++i)
    for (std::size_t t = 0; t < mask.steps; ++t)
      if (!mask.observed(i, t)) out.filled.at(i, t) = out.recon.at(i, t);
  out.mask = mask;
  return out;
}

ImputationResult impute(const VqVae& model, const UnivariateBatch& batch, const MaskSpec& mask) {
  RevInState identity;
  identity.mean.assign(batch.rows(), 0.0);
  identity.std.assign(batch.rows(), 1.0);
  return impute(model, batch, mask, identity);
}

Tensor mean_fill(const UnivariateBatch& batch, const MaskSpec& mask) {
  check_mask(batch, mask);
  const RevInState st = observed_statistics(batch.series, mask);
  Tensor out = batch.series;
  for (std::size_t i = 0; i < mask.rows; ++i)
    for (std::size_t t = 0; t < mask.steps; ++t)
      if (!mask.observed(i, t)) out.at(i, t) = st.mean[i];
  return out;
}

ImputationScores score_imputation(const Tensor& truth, const Tensor& filled, const MaskSpec& mask) {
  require_same_shape(truth, filled, "score_imputation");
  if (mask.observed_flags.size() != truth.size()) {
    throw std::invalid_argument("mask size does not match imputation output");
  }
  std::vector<std::uint8_t> missing(mask.observed_flags.size());
  for (std::size_t i = 0; i < missing.size(); ++i) missing[i] = mask.observed_flags[i] ? 0 : 1;
  ImputationScores s;
  s.mse_masked = mse(filled.data(), truth.data(), missing);
  s.mae_masked = mae(filled.data(), truth.data(), missing);
  s.mse_all = mse(filled.data(), truth.data());
  s.mae_all = mae(filled.data(), truth.data());
  return s;
}

Labels top_fraction(const std::vector<double>& scores, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("anomaly ratio must lie in [0, 1), got " + std::to_string(ratio));
  }
  const std::size_t n = scores.size();
  const auto count = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  Labels flags(n, 0);
  for (std::size_t i = 0; i < count; ++i) flags[order[i]] = 1;
  return flags;
}

AnomalyResult detect_anomalies(const VqVae& model, const Tensor& series, const AnomalyOptions& options) {
  if (series.rank() != 2) throw std::invalid_argument("anomaly input must be [S x T]");
  if (!(options.ratio >= 0.0 && options.ratio < 1.0)) {
    throw std::invalid_argument("anomaly ratio must lie in [0, 1), got " + std::to_string(options.ratio));
  }
  const std::size_t sensors = series.dim(0), steps = series.dim(1);
  Tensor x = series;
  if (model.config().instance_norm) x = revin_normalize(UnivariateBatch{series, {}}).first.series;
  const Tensor r = model.reconstruct(x);

  AnomalyResult out;
  out.ratio = options.ratio;
  out.scores.assign(steps, 0.0);
  for (std::size_t s = 0; s < sensors; ++s)
    for (std::size_t t = 0; t < steps; ++t) {
      const double d = r.at(s, t) - x.at(s, t);
      out.scores[t] += d * d / static_cast<double>(sensors);
    }

  if (options.mode == ThresholdMode::Global) {
    out.flags = top_fraction(out.scores, options.ratio);
    return out;
  }
  if (options.window == 0) throw std::invalid_argument("per-window threshold needs window > 0");
  out.flags.assign(steps, 0);
  for (std::size_t begin = 0; begin < steps; begin += options.window) {
    const std::size_t end = std::min(steps, begin + options.window);
    std::vector<double> part(out.scores.begin() + static_cast<std::ptrdiff_t>(begin),
                             out.scores.begin() + static_cast<std::ptrdiff_t>(end));
    const Labels f = top_fraction(part, options.ratio);
    std::copy(f.begin(), f.end(), out.flags.begin() + static_cast<std::ptrdiff_t>(begin));
  }
  return out;
}

AnomalyResult detect_anomalies(const VqVae& model, const Tensor& series, double ratio) {
  AnomalyOptions o;
  o.ratio = ratio;
  return detect_anomalies(model, series, o);
}

}  // namespace tstok
