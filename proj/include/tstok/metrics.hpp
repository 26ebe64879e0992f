#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace tstok {

/// 1 = anomalous / selected.
using Labels = std::vector<std::uint8_t>;

double mse(std::span<const double> pred, std::span<const double> truth);
double mae(std::span<const double> pred, std::span<const double> truth);
/// Averages only over positions where select[i] != 0. Returns 0 when none are selected.
double mse(std::span<const double> pred, std::span<const double> truth, std::span<const std::uint8_t> select);
double mae(std::span<const double> pred, std::span<const double> truth, std::span<const std::uint8_t> select);

/// Fills every ground-truth segment that contains at least one predicted point.
Labels point_adjust(const Labels& pred, const Labels& truth);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Zero denominators yield 0. With `adjusted`, point_adjust is applied first.
PrecisionRecall precision_recall_f1(const Labels& pred, const Labels& truth, bool adjusted);

struct ResultRow {
  std::string method;
  std::string setting;
  std::string metric;
  double value = 0.0;
  bool lower_is_better = true;
};

class ResultTable {
 public:
  /// Throws if (method, setting, metric) already exists.
  void add(ResultRow row);
  const std::vector<ResultRow>& rows() const { return rows_; }
  bool empty() const { return rows_.empty(); }
  const ResultRow* find(const std::string& method, const std::string& setting,
                        const std::string& metric) const;
  std::vector<std::string> methods() const;

  /// Columns: method,setting,metric,value,direction (direction is "lower" or "higher").
  void write_csv(std::ostream& out) const;
  static ResultTable read_csv(std::istream& in);
  /// Plain-text table, one line per (setting, metric) cell, with an AvgWins footer.
  std::string render() const;

 private:
  std::vector<ResultRow> rows_;
};

/// Fraction of (setting, metric) cells in which each method attains the best
/// value. With count_ties every tied method earns the win; otherwise only a
/// unique best does.
std::map<std::string, double> avg_wins(const ResultTable& table, bool count_ties = true);

struct PermutationTestOptions {
  bool paired = true;
  std::size_t exhaustive_limit = 20;
  std::size_t resamples = 100000;
  std::uint64_t seed = 0;
};

/// One-sided test of mean(a) < mean(b). Returns the fraction of relabelings
/// whose statistic is <= the observed one, counting the identity relabeling.
/// Paired: sign flips of a - b, exact when n <= exhaustive_limit.
/// Unpaired: reassignment of the pooled values, exact when n_a + n_b <= exhaustive_limit.
double permutation_test(std::span<const double> a, std::span<const double> b,
                        const PermutationTestOptions& options = {});

}  // namespace tstok
