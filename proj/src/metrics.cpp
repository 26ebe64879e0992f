#include "tstok/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tstok {

namespace {

void require_same_length(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": length mismatch " + std::to_string(a) +
                                " vs " + std::to_string(b));
  }
}

template <class F>
double masked_mean(std::span<const double> pred, std::span<const double> truth,
                   std::span<const std::uint8_t> select, F&& err) {
  require_same_length(pred.size(), truth.size(), "metric");
  require_same_length(pred.size(), select.size(), "metric selection");
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (!select[i]) continue;
    s += err(pred[i] - truth[i]);
    ++n;
  }
  return n == 0 ? 0.0 : s / static_cast<double>(n);
}

}  // namespace

double mse(std::span<const double> pred, std::span<const double> truth) {
  require_same_length(pred.size(), truth.size(), "mse");
  if (pred.empty()) throw std::invalid_argument("mse of empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

double mae(std::span<const double> pred, std::span<const double> truth) {
  require_same_length(pred.size(), truth.size(), "mae");
  if (pred.empty()) throw std::invalid_argument("mae of empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

double mse(std::span<const double> pred, std::span<const double> truth, std::span<const std::uint8_t> select) {
  return masked_mean(pred, truth, select, [](double d) { return d * d; });
}

double mae(std::span<const double> pred, std::span<const double> truth, std::span<const std::uint8_t> select) {
  return masked_mean(pred, truth, select, [](double d) { return std::abs(d); });
}

Labels point_adjust(const Labels& pred, const Labels& truth) {
  require_same_length(pred.size(), truth.size(), "point_adjust");
  Labels out = pred;
  std::size_t i = 0;
  while (i < truth.size()) {
    if (!truth[i]) {
      ++i;
      continue;
    }
    std::size_t end = i;
    bool hit = false;
    for (; end < truth.size() && truth[end]; ++end) hit = hit || pred[end] != 0;
    if (hit) std::fill(out.begin() + static_cast<std::ptrdiff_t>(i), out.begin() + static_cast<std::ptrdiff_t>(end), 1);
    i = end;
  }
  return out;
}

PrecisionRecall precision_recall_f1(const Labels& pred, const Labels& truth, bool adjusted) {
  require_same_length(pred.size(), truth.size(), "precision_recall_f1");
  const Labels p = adjusted ? point_adjust(pred, truth) : pred;
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] && truth[i]) ++tp;
    else if (p[i]) ++fp;
    else if (truth[i]) ++fn;
  }
  PrecisionRecall r;
  r.precision = tp + fp > 0 ? tp / (tp + fp) : 0.0;
  r.recall = tp + fn > 0 ? tp / (tp + fn) : 0.0;
  r.f1 = r.precision + r.recall > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
  return r;
}

void ResultTable::add(ResultRow row) {
  if (find(row.method, row.setting, row.metric) != nullptr) {
    throw std::invalid_argument("duplicate result cell (" + row.method + ", " + row.setting + ", " +
                                row.metric + ")");
  }
  rows_.push_back(std::move(row));
}

const ResultRow* ResultTable::find(const std::string& method, const std::string& setting,
                                   const std::string& metric) const {
  for (const auto& r : rows_) {
    if (r.method == method && r.setting == setting && r.metric == metric) return &r;
  }
  return nullptr;
}

std::vector<std::string> ResultTable::methods() const {
  std::vector<std::string> out;
  for (const auto& r : rows_) {
    if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
  }
  return out;
}

void ResultTable::write_csv(std::ostream& out) const {
  out << "method,setting,metric,value,direction\n" << std::setprecision(17);
  for (const auto& r : rows_) {
    out << r.method << ',' << r.setting << ',' << r.metric << ',' << r.value << ','
        << (r.lower_is_better ? "lower" : "higher") << '\n';
  }
}

ResultTable ResultTable::read_csv(std::istream& in) {
  ResultTable t;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line_no == 1) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) {
      throw std::runtime_error("result table line " + std::to_string(line_no) + ": expected 5 fields");
    }
    if (f[4] != "lower" && f[4] != "higher") {
      throw std::runtime_error("result table line " + std::to_string(line_no) +
                               ": direction must be lower or higher");
    }
    t.add({f[0], f[1], f[2], std::stod(f[3]), f[4] == "lower"});
  }
  return t;
}

std::map<std::string, double> avg_wins(const ResultTable& table, bool count_ties) {
  if (table.empty()) throw std::invalid_argument("avg_wins of an empty table");
  std::map<std::pair<std::string, std::string>, std::vector<const ResultRow*>> cells;
  for (const auto& r : table.rows()) cells[{r.setting, r.metric}].push_back(&r);
  std::map<std::string, double> wins;
  for (const auto& m : table.methods()) wins[m] = 0.0;
  for (const auto& [key, rows] : cells) {
    const bool lower = rows.front()->lower_is_better;
    double best = rows.front()->value;
    for (const auto* r : rows) best = lower ? std::min(best, r->value) : std::max(best, r->value);
    std::vector<const ResultRow*> winners;
    for (const auto* r : rows)
      if (r->value == best) winners.push_back(r);
    if (!count_ties && winners.size() > 1) continue;
    for (const auto* r : winners) wins[r->method] += 1.0;
  }
  for (auto& [m, w] : wins) w /= static_cast<double>(cells.size());
  return wins;
}

std::string ResultTable::render() const {
  std::ostringstream os;
  const auto ms = methods();
  std::vector<std::pair<std::string, std::string>> cells;
  for (const auto& r : rows_) {
    std::pair<std::string, std::string> key{r.setting, r.metric};
    if (std::find(cells.begin(), cells.end(), key) == cells.end()) cells.push_back(key);
  }
  os << std::left << std::setw(16) << "setting" << std::setw(12) << "metric";
  for (const auto& m : ms) os << std::setw(16) << m;
  os << '\n';
  for (const auto& [setting, metric] : cells) {
    os << std::setw(16) << setting << std::setw(12) << metric;
    for (const auto& m : ms) {
      const auto* r = find(m, setting, metric);
      std::ostringstream v;
      if (r) v << std::setprecision(5) << r->value;
      else v << '-';
      os << std::setw(16) << v.str();
    }
    os << '\n';
  }
  if (!rows_.empty()) {
    const auto with_ties = avg_wins(*this, true);
    const auto strict = avg_wins(*this, false);
    os << std::setw(28) << "AvgWins (ties)";
    for (const auto& m : ms) {
      std::ostringstream v;
      v << std::fixed << std::setprecision(1) << 100.0 * with_ties.at(m) << '%';
      os << std::setw(16) << v.str();
    }
    os << '\n' << std::setw(28) << "AvgWins (strict)";
    for (const auto& m : ms) {
      std::ostringstream v;
      v << std::fixed << std::setprecision(1) << 100.0 * strict.at(m) << '%';
      os << std::setw(16) << v.str();
    }
    os << '\n';
  }
  return os.str();
}

namespace {

double tie_tolerance(std::span<const double> values) {
  double s = 0.0;
  for (double v : values) s += std::abs(v);
  return 1e-12 * std::max(s, 1e-300);
}

double paired_test(std::span<const double> a, std::span<const double> b,
                   const PermutationTestOptions& opt) {
  const std::size_t n = a.size();
  std::vector<double> d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  const double observed = std::accumulate(d.begin(), d.end(), 0.0);
  const double tol = tie_tolerance(d);
  auto stat = [&](auto&& flipped) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += flipped(i) ? -d[i] : d[i];
    return s;
  };
  if (n <= opt.exhaustive_limit) {
    const std::uint64_t total = std::uint64_t{1} << n;
    std::uint64_t count = 0;
    for (std::uint64_t mask = 0; mask < total; ++mask) {
      if (stat([mask](std::size_t i) { return (mask >> i) & 1U; }) <= observed + tol) ++count;
    }
    return static_cast<double>(count) / static_cast<double>(total);
  }
  std::mt19937_64 rng(opt.seed);
  std::vector<std::uint8_t> flips(n);
  std::uint64_t count = 1;
  for (std::size_t r = 0; r < opt.resamples; ++r) {
    for (auto& f : flips) f = static_cast<std::uint8_t>(rng() & 1U);
    if (stat([&](std::size_t i) { return flips[i] != 0; }) <= observed + tol) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(opt.resamples + 1);
}

double unpaired_test(std::span<const double> a, std::span<const double> b,
                     const PermutationTestOptions& opt) {
  const std::size_t na = a.size(), nb = b.size(), n = na + nb;
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const double total_sum = std::accumulate(pooled.begin(), pooled.end(), 0.0);
  auto stat_from_group_a_sum = [&](double sa) {
    return sa / static_cast<double>(na) - (total_sum - sa) / static_cast<double>(nb);
  };
  const double observed = stat_from_group_a_sum(std::accumulate(a.begin(), a.end(), 0.0));
  const double tol = tie_tolerance(pooled);
  if (n <= opt.exhaustive_limit) {
    std::uint64_t count = 0, total = 0;
    for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
      if (static_cast<std::size_t>(std::popcount(mask)) != na) continue;
      double sa = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if ((mask >> i) & 1U) sa += pooled[i];
      ++total;
      if (stat_from_group_a_sum(sa) <= observed + tol) ++count;
    }
    return static_cast<double>(count) / static_cast<double>(total);
  }
  std::mt19937_64 rng(opt.seed);
  std::vector<double> work = pooled;
  std::uint64_t count = 1;
  for (std::size_t r = 0; r < opt.resamples; ++r) {
    std::shuffle(work.begin(), work.end(), rng);
    const double sa = std::accumulate(work.begin(), work.begin() + static_cast<std::ptrdiff_t>(na), 0.0);
    if (stat_from_group_a_sum(sa) <= observed + tol) ++count;
  }
  return static_cast<double>(count) / static_cast<double>(opt.resamples + 1);
}

}  // namespace

double permutation_test(std::span<const double> a, std::span<const double> b,
                        const PermutationTestOptions& options) {
  if (a.empty() || b.empty()) throw std::invalid_argument("permutation_test needs n >= 1");
  if (options.paired) {
    require_same_length(a.size(), b.size(), "paired permutation_test");
    return paired_test(a, b, options);
  }
  return unpaired_test(a, b, options);
}

}  // namespace tstok
