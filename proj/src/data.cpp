#include "tstok/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

namespace tstok {

void TimeSeriesDataset::validate() const {
  if (values.rank() != 3) {
    throw std::invalid_argument("dataset values must be [E x S x T], got " +
                                shape_string(values.shape()));
  }
  if (examples() == 0 || sensors() == 0 || steps() == 0) {
    throw std::invalid_argument("dataset dimensions must be positive, got " +
                                shape_string(values.shape()));
  }
  if (sensor_names.size() != sensors()) {
    throw std::invalid_argument("expected " + std::to_string(sensors()) + " sensor names, got " +
                                std::to_string(sensor_names.size()));
  }
  if (example_ids.size() != examples()) {
    throw std::invalid_argument("expected " + std::to_string(examples()) + " example ids, got " +
                                std::to_string(example_ids.size()));
  }
  for (double v : values.data()) {
    if (!std::isfinite(v)) throw std::invalid_argument("dataset contains non-finite values");
  }
}

std::size_t MaskSpec::missing_in_row(std::size_t i) const {
  std::size_t n = 0;
  for (std::size_t t = 0; t < steps; ++t) n += observed(i, t) ? 0 : 1;
  return n;
}

MaskSpec MaskSpec::all_observed(std::size_t rows, std::size_t steps) {
  return MaskSpec{rows, steps, 0.0, std::vector<std::uint8_t>(rows * steps, 1)};
}

void SplitSpec::validate() const {
  if (window_length == 0 || stride == 0) {
    throw std::invalid_argument("window_length and stride must be positive");
  }
  for (const auto* r : {&train, &val, &test}) {
    if (r->end < r->begin) throw std::invalid_argument("split range end precedes begin");
  }
  if (train.end > val.begin || val.end > test.begin) {
    throw std::invalid_argument("split ranges must be disjoint and ordered train < val < test");
  }
}

SplitSpec SplitSpec::proportional(std::size_t steps, double train_frac, double val_frac,
                                  std::size_t window_length, std::size_t stride) {
  const auto n_train = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(steps)));
  const auto n_val = static_cast<std::size_t>(std::floor(val_frac * static_cast<double>(steps)));
  SplitSpec s;
  s.train = {0, n_train};
  s.val = {n_train, n_train + n_val};
  s.test = {n_train + n_val, steps};
  s.window_length = window_length;
  s.stride = stride;
  s.validate();
  return s;
}

ParseError::ParseError(const std::string& what, std::size_t line, std::size_t column)
    : std::runtime_error("line " + std::to_string(line) + ", column " + std::to_string(column) +
                         ": " + what),
      line_(line),
      column_(column) {}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      fields.push_back(trim(line.substr(start)));
      break;
    }
    fields.push_back(trim(line.substr(start, pos - start)));
    start = pos + 1;
  }
  return fields;
}

}  // namespace

TimeSeriesDataset parse_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> names;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    for (auto f : split_commas(line)) names.emplace_back(f);
    break;
  }
  if (names.empty()) throw ParseError("empty file: missing header row", std::max<std::size_t>(line_no, 1), 1);
  const std::size_t sensors = names.size();

  std::vector<double> rows;
  std::size_t steps = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_commas(line);
    if (fields.size() != sensors) {
      throw ParseError("expected " + std::to_string(sensors) + " fields, got " +
                           std::to_string(fields.size()),
                       line_no, std::min(fields.size(), sensors) + 1);
    }
    for (std::size_t c = 0; c < sensors; ++c) {
      double v = 0.0;
      const auto f = fields[c];
      const char* first = f.data();
      if (!f.empty() && *first == '+') ++first;
      auto [ptr, ec] = std::from_chars(first, f.data() + f.size(), v);
      if (f.empty() || ec != std::errc() || ptr != f.data() + f.size()) {
        throw ParseError("non-numeric value '" + std::string(f) + "'", line_no, c + 1);
      }
      if (!std::isfinite(v)) throw ParseError("non-finite value", line_no, c + 1);
      rows.push_back(v);
    }
    ++steps;
  }
  if (steps == 0) throw ParseError("no data rows after header", line_no + 1, 1);

  TimeSeriesDataset ds;
  ds.values = Tensor({1, sensors, steps});
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t s = 0; s < sensors; ++s) ds.values.at(0, s, t) = rows[t * sensors + s];
  ds.sensor_names = std::move(names);
  ds.example_ids = {"0"};
  return ds;
}

TimeSeriesDataset load_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return parse_csv(in);
}

void write_csv(const TimeSeriesDataset& ds, std::size_t example, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t s = 0; s < ds.sensors(); ++s) out << (s ? "," : "") << ds.sensor_names[s];
  out << '\n' << std::setprecision(17);
  for (std::size_t t = 0; t < ds.steps(); ++t) {
    for (std::size_t s = 0; s < ds.sensors(); ++s) out << (s ? "," : "") << ds.values.at(example, s, t);
    out << '\n';
  }
}

std::size_t window_count(std::size_t range_length, std::size_t window, std::size_t stride) {
  if (window == 0 || stride == 0) throw std::invalid_argument("window and stride must be positive");
  if (window > range_length) return 0;
  return (range_length - window) / stride + 1;
}

TimeSeriesDataset window_range(const TimeSeriesDataset& ds, TimeRange range, std::size_t window,
                               std::size_t stride) {
  if (range.end > ds.steps() || range.end < range.begin) {
    throw std::invalid_argument("range [" + std::to_string(range.begin) + ", " +
                                std::to_string(range.end) + ") outside series of length " +
                                std::to_string(ds.steps()));
  }
  if (window > range.length()) {
    throw std::invalid_argument("window length " + std::to_string(window) +
                                " exceeds split range length " + std::to_string(range.length()));
  }
  const std::size_t per_example = window_count(range.length(), window, stride);
  const std::size_t n_ex = ds.examples(), n_s = ds.sensors();
  TimeSeriesDataset out;
  out.values = Tensor({n_ex * per_example, n_s, window});
  out.sensor_names = ds.sensor_names;
  for (std::size_t e = 0; e < n_ex; ++e) {
    for (std::size_t w = 0; w < per_example; ++w) {
      const std::size_t start = range.begin + w * stride;
      const std::size_t dst = e * per_example + w;
      for (std::size_t s = 0; s < n_s; ++s)
        for (std::size_t t = 0; t < window; ++t) out.values.at(dst, s, t) = ds.values.at(e, s, start + t);
      out.example_ids.push_back(ds.example_ids[e] + "@" + std::to_string(start));
    }
  }
  return out;
}

WindowedSplits make_windows(const TimeSeriesDataset& ds, const SplitSpec& spec) {
  spec.validate();
  return {window_range(ds, spec.train, spec.window_length, spec.stride),
          window_range(ds, spec.val, spec.window_length, spec.stride),
          window_range(ds, spec.test, spec.window_length, spec.stride)};
}

UnivariateBatch flatten_sensors(const TimeSeriesDataset& ds) {
  UnivariateBatch b;
  const std::size_t n_ex = ds.examples(), n_s = ds.sensors(), steps = ds.steps();
  b.series = ds.values.reshaped({n_ex * n_s, steps});
  b.origin.reserve(n_ex * n_s);
  for (std::size_t e = 0; e < n_ex; ++e)
    for (std::size_t s = 0; s < n_s; ++s) b.origin.emplace_back(e, s);
  return b;
}

TimeSeriesDataset unflatten_sensors(const UnivariateBatch& batch, std::size_t examples,
                                    std::size_t sensors) {
  if (examples * sensors != batch.rows()) {
    throw std::invalid_argument("cannot unflatten " + std::to_string(batch.rows()) + " rows into " +
                                std::to_string(examples) + "x" + std::to_string(sensors));
  }
  TimeSeriesDataset ds;
  ds.values = Tensor({examples, sensors, batch.steps()});
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    const auto [e, s] = batch.origin.empty() ? std::pair{i / sensors, i % sensors} : batch.origin[i];
    std::copy_n(batch.series.row(i).data(), batch.steps(), &ds.values.at(e, s, 0));
  }
  for (std::size_t s = 0; s < sensors; ++s) ds.sensor_names.push_back("s" + std::to_string(s));
  for (std::size_t e = 0; e < examples; ++e) ds.example_ids.push_back(std::to_string(e));
  return ds;
}

RevInState row_statistics(const Tensor& series) {
  const std::size_t rows = series.dim(0), steps = series.dim(1);
  RevInState st;
  st.mean.resize(rows);
  st.std.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto r = series.row(i);
    const double mu = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(steps);
    double var = 0.0;
    for (double v : r) var += (v - mu) * (v - mu);
    var /= static_cast<double>(steps);
    st.mean[i] = mu;
    st.std[i] = std::max(std::sqrt(var), kStdFloor);
  }
  return st;
}

UnivariateBatch revin_apply(const UnivariateBatch& batch, const RevInState& state) {
  if (state.mean.size() != batch.rows() || state.std.size() != batch.rows()) {
    throw std::invalid_argument("normalization state has " + std::to_string(state.mean.size()) +
                                " rows, batch has " + std::to_string(batch.rows()));
  }
  UnivariateBatch out = batch;
  for (std::size_t i = 0; i < batch.rows(); ++i)
    for (auto& v : out.series.row(i)) v = (v - state.mean[i]) / state.std[i];
  return out;
}

std::pair<UnivariateBatch, RevInState> revin_normalize(const UnivariateBatch& batch) {
  if (batch.steps() < 2) {
    throw std::invalid_argument("instance normalization needs at least 2 time steps per row");
  }
  auto state = row_statistics(batch.series);
  return {revin_apply(batch, state), std::move(state)};
}

UnivariateBatch revin_denormalize(const UnivariateBatch& batch, const RevInState& state) {
  if (state.mean.size() != batch.rows() || state.std.size() != batch.rows()) {
    throw std::invalid_argument("normalization state has " + std::to_string(state.mean.size()) +
                                " rows, batch has " + std::to_string(batch.rows()));
  }
  UnivariateBatch out = batch;
  for (std::size_t i = 0; i < batch.rows(); ++i)
    for (auto& v : out.series.row(i)) v = v * state.std[i] + state.mean[i];
  return out;
}

UnivariateBatch apply_mask(const UnivariateBatch& batch, const MaskSpec& mask, double fill) {
  if (mask.rows != batch.rows() || mask.steps != batch.steps() ||
      mask.observed_flags.size() != mask.rows * mask.steps) {
    throw std::invalid_argument("mask shape [" + std::to_string(mask.rows) + "x" +
                                std::to_string(mask.steps) + "] does not match batch " +
                                shape_string(batch.series.shape()));
  }
  UnivariateBatch out = batch;
  for (std::size_t i = 0; i < batch.rows(); ++i)
    for (std::size_t t = 0; t < batch.steps(); ++t)
      if (!mask.observed(i, t)) out.series.at(i, t) = fill;
  return out;
}

MaskSpec sample_mask(std::size_t rows, std::size_t steps, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw std::invalid_argument("mask ratio must lie in [0, 1), got " + std::to_string(ratio));
  }
  MaskSpec m = MaskSpec::all_observed(rows, steps);
  m.ratio = ratio;
  const auto missing = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(steps)));
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(steps);
  for (std::size_t i = 0; i < rows; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `missing` slots form a uniform subset.
    for (std::size_t j = 0; j < missing; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, steps - 1);
      std::swap(order[j], order[pick(rng)]);
      m.observed_flags[i * steps + order[j]] = 0;
    }
  }
  return m;
}

GlobalNormalizer GlobalNormalizer::fit(const TimeSeriesDataset& train) {
  GlobalNormalizer g;
  const std::size_t n_s = train.sensors();
  g.mean.assign(n_s, 0.0);
  g.std.assign(n_s, 0.0);
  const double count = static_cast<double>(train.examples() * train.steps());
  for (std::size_t s = 0; s < n_s; ++s) {
    double sum = 0.0;
    for (std::size_t e = 0; e < train.examples(); ++e)
      for (std::size_t t = 0; t < train.steps(); ++t) sum += train.values.at(e, s, t);
    const double mu = sum / count;
    double var = 0.0;
    for (std::size_t e = 0; e < train.examples(); ++e)
      for (std::size_t t = 0; t < train.steps(); ++t) {
        const double d = train.values.at(e, s, t) - mu;
        var += d * d;
      }
    g.mean[s] = mu;
    g.std[s] = std::max(std::sqrt(var / count), kStdFloor);
  }
  return g;
}

TimeSeriesDataset GlobalNormalizer::apply(const TimeSeriesDataset& ds) const {
  if (ds.sensors() != mean.size()) throw std::invalid_argument("global normalizer sensor count mismatch");
  TimeSeriesDataset out = ds;
  for (std::size_t e = 0; e < ds.examples(); ++e)
    for (std::size_t s = 0; s < ds.sensors(); ++s)
      for (std::size_t t = 0; t < ds.steps(); ++t)
        out.values.at(e, s, t) = (ds.values.at(e, s, t) - mean[s]) / std[s];
  return out;
}

TimeSeriesDataset GlobalNormalizer::invert(const TimeSeriesDataset& ds) const {
  if (ds.sensors() != mean.size()) throw std::invalid_argument("global normalizer sensor count mismatch");
  TimeSeriesDataset out = ds;
  for (std::size_t e = 0; e < ds.examples(); ++e)
    for (std::size_t s = 0; s < ds.sensors(); ++s)
      for (std::size_t t = 0; t < ds.steps(); ++t)
        out.values.at(e, s, t) = ds.values.at(e, s, t) * std[s] + mean[s];
  return out;
}

RevInState GlobalNormalizer::row_state(const UnivariateBatch& batch) const {
  RevInState st;
  for (std::size_t i = 0; i < batch.rows(); ++i) {
    const std::size_t s = batch.origin.at(i).second;
    st.mean.push_back(mean.at(s));
    st.std.push_back(std.at(s));
  }
  return st;
}

}  // namespace tstok
