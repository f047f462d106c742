#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "nlb/common.hpp"
#include "nlb/linalg.hpp"
#include "nlb/special.hpp"

// Metrics and the comparison machinery: average test log likelihood and RMSE,
// the Friedman test with the Nemenyi critical difference, and the Wilcoxon
// signed-rank test.
namespace nlb::evalstats {

struct Metrics {
  double avg_ll;
  double rmse;
};

inline Metrics metrics(const std::vector<double>& log_densities,
                       const std::vector<double>& predictions,
                       const std::vector<double>& targets) {
  const std::size_t n = targets.size();
  double ll = 0.0, se = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ll += log_densities[i];
    const double d = predictions[i] - targets[i];
    se += d * d;
  }
  return {ll / static_cast<double>(n), std::sqrt(se / static_cast<double>(n))};
}

// Mid-ranks (1 = best) of one observation across models.
inline std::vector<double> mid_ranks(const std::vector<double>& values,
                                     bool higher_better) {
  const std::size_t k = values.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return higher_better ? values[a] > values[b] : values[a] < values[b];
  });
  std::vector<double> ranks(k);
  std::size_t i = 0;
  while (i < k) {
    std::size_t j = i;
    while (j + 1 < k && values[order[j + 1]] == values[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = mid;
    i = j + 1;
  }
  return ranks;
}

// Demsar's two-tailed Nemenyi q values at alpha = 0.05, k = 2..10.
inline double nemenyi_q05(int k) {
  static constexpr double kTable[] = {1.960, 2.343, 2.569, 2.728, 2.850,
                                      2.949, 3.031, 3.102, 3.164};
  if (k < 2 || k > 10)
    throw UnsupportedK("nemenyi_q05: q table covers k = 2..10");
  return kTable[k - 2];
}

struct RankReport {
  std::vector<double> avg_ranks;  // per model, 1 = best
  double critical_difference;
  double friedman_stat;  // chi-square with k-1 dof
  int k = 0;
  int n = 0;
  // Maximal runs of models (sorted by rank) whose span is below the CD:
  // connected models are statistically indistinguishable at alpha.
  std::vector<std::vector<int>> groups;
};

inline RankReport friedman_ranks(const Matrix& values, bool higher_better,
                                 double alpha = 0.05) {
  (void)alpha;  // the embedded q table is the alpha = 0.05 one
  const int k = static_cast<int>(values.rows());
  const int n = static_cast<int>(values.cols());
  if (k < 2 || n < 2)
    throw DimensionMismatch("friedman_ranks: need k >= 2 models, N >= 2 observations");

  RankReport report;
  report.k = k;
  report.n = n;
  report.avg_ranks.assign(k, 0.0);
  for (int obs = 0; obs < n; ++obs) {
    std::vector<double> col(k);
    for (int m = 0; m < k; ++m) col[m] = values(m, obs);
    const std::vector<double> r = mid_ranks(col, higher_better);
    for (int m = 0; m < k; ++m) report.avg_ranks[m] += r[m];
  }
  for (double& r : report.avg_ranks) r /= static_cast<double>(n);

  double sum_r2 = 0.0;
  for (double r : report.avg_ranks) sum_r2 += r * r;
  const double kk = static_cast<double>(k);
  report.friedman_stat = 12.0 * n / (kk * (kk + 1.0)) *
                         (sum_r2 - kk * (kk + 1.0) * (kk + 1.0) / 4.0);
  report.critical_difference =
      nemenyi_q05(k) * std::sqrt(kk * (kk + 1.0) / (6.0 * static_cast<double>(n)));

  // Maximal CD-connected intervals over the rank-sorted models.
  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    return report.avg_ranks[a] < report.avg_ranks[b];
  });
  int prev_end = -1;
  for (int i = 0; i < k; ++i) {
    int j = i;
    while (j + 1 < k && report.avg_ranks[order[j + 1]] -
                                report.avg_ranks[order[i]] <
                            report.critical_difference)
      ++j;
    if (j > prev_end) {
      std::vector<int> group;
      for (int t = i; t <= j; ++t) group.push_back(order[t]);
      report.groups.push_back(std::move(group));
      prev_end = j;
    }
  }
  return report;
}

enum class WilcoxonVerdict { Improves, Worsens, NotSignificant };

inline const char* to_string(WilcoxonVerdict v) {
  switch (v) {
    case WilcoxonVerdict::Improves: return "I";
    case WilcoxonVerdict::Worsens: return "W";
    default: return "N";
  }
}

struct WilcoxonResult {
  WilcoxonVerdict verdict = WilcoxonVerdict::NotSignificant;
  double p_value = 1.0;
  double w_plus = 0.0;
  double w_minus = 0.0;
  int n_used = 0;  // after dropping zero differences
};

// Paired two-sided test of a vs b; Improves means a is significantly greater.
// Zero differences are dropped, tied magnitudes get mid-ranks; the exact
// distribution is enumerated (dynamic program over doubled ranks) for
// n <= 25, with the tie-corrected normal approximation above that.
inline WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                           const std::vector<double>& b,
                                           double alpha = 0.05) {
  if (a.size() != b.size() || a.size() < 5)
    throw DimensionMismatch("wilcoxon_signed_rank: need equal lengths >= 5");
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  WilcoxonResult res;
  res.n_used = static_cast<int>(diffs.size());
  if (diffs.empty()) return res;  // all-zero differences: not significant

  const std::size_t n = diffs.size();
  std::vector<double> mags(n);
  for (std::size_t i = 0; i < n; ++i) mags[i] = std::abs(diffs[i]);
  const std::vector<double> ranks = mid_ranks(mags, /*higher_better=*/false);

  for (std::size_t i = 0; i < n; ++i) {
    if (diffs[i] > 0.0)
      res.w_plus += ranks[i];
    else
      res.w_minus += ranks[i];
  }

  if (n <= 25) {
    // Exact null distribution of 2 W+ over the 2^n sign assignments.
    std::vector<long long> r2(n);
    long long total2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
      r2[i] = std::llround(2.0 * ranks[i]);
      total2 += r2[i];
    }
    std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
    count[0] = 1.0;
    long long reach = 0;
    for (std::size_t i = 0; i < n; ++i) {
      reach += r2[i];
      for (long long s = reach; s >= r2[i]; --s)
        count[static_cast<std::size_t>(s)] +=
            count[static_cast<std::size_t>(s - r2[i])];
    }
    const double denom = std::pow(2.0, static_cast<double>(n));
    const long long w2 = std::llround(2.0 * res.w_plus);
    double p_ge = 0.0, p_le = 0.0;
    for (long long s = 0; s <= total2; ++s) {
      if (s >= w2) p_ge += count[static_cast<std::size_t>(s)];
      if (s <= w2) p_le += count[static_cast<std::size_t>(s)];
    }
    res.p_value = std::min(1.0, 2.0 * std::min(p_ge, p_le) / denom);
  } else {
    // Normal approximation with continuity and tie corrections.
    const double nn = static_cast<double>(n);
    const double mu = nn * (nn + 1.0) / 4.0;
    double tie_term = 0.0;
    std::map<double, int> tie_counts;
    for (double r : mags) tie_counts[r] += 1;
    for (const auto& [mag, t] : tie_counts)
      tie_term += static_cast<double>(t) * t * t - t;
    const double sigma =
        std::sqrt(nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0);
    const double delta = res.w_plus - mu;
    const double z = (delta - 0.5 * (delta > 0 ? 1.0 : -1.0)) / sigma;
    res.p_value = 2.0 * (1.0 - normal_cdf(std::abs(z)));
  }

  if (res.p_value < alpha && res.w_plus != res.w_minus)
    res.verdict = res.w_plus > res.w_minus ? WilcoxonVerdict::Improves
                                           : WilcoxonVerdict::Worsens;
  return res;
}

// ---------------------------------------------------------------------------
// Aggregation over per-split result rows
// ---------------------------------------------------------------------------

struct MetricRow {
  std::string dataset;
  std::string model;
  bool tuned = true;
  bool slice_enabled = true;
  int split_index = 0;
  std::uint64_t seed = 0;
  double test_ll = 0.0;
  double test_rmse = 0.0;
  double train_ll = 0.0;
  double train_rmse = 0.0;
};

struct TableRow {
  std::string dataset;
  std::string model;
  bool tuned = true;
  bool slice_enabled = true;
  int n = 0;
  double test_ll_mean = 0.0, test_ll_se = 0.0;
  double test_rmse_mean = 0.0, test_rmse_se = 0.0;
  double train_ll_mean = 0.0, train_ll_se = 0.0;
  double train_rmse_mean = 0.0, train_rmse_se = 0.0;
};

namespace detail {

inline std::pair<double, double> mean_se(const std::vector<double>& xs) {
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  if (xs.size() < 2) return {mean, 0.0};
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= (n - 1.0);
  return {mean, std::sqrt(var / n)};
}

}  // namespace detail

// Grouped means with +-1 standard error (std / sqrt(n_splits)).
inline std::vector<TableRow> aggregate(const std::vector<MetricRow>& rows) {
  std::map<std::tuple<std::string, std::string, bool, bool>,
           std::vector<const MetricRow*>>
      groups;
  for (const auto& r : rows)
    groups[{r.dataset, r.model, r.tuned, r.slice_enabled}].push_back(&r);
  std::vector<TableRow> out;
  for (const auto& [key, members] : groups) {
    TableRow t;
    std::tie(t.dataset, t.model, t.tuned, t.slice_enabled) = key;
    t.n = static_cast<int>(members.size());
    auto collect = [&](auto field) {
      std::vector<double> xs;
      xs.reserve(members.size());
      for (const auto* m : members) xs.push_back(m->*field);
      return detail::mean_se(xs);
    };
    std::tie(t.test_ll_mean, t.test_ll_se) = collect(&MetricRow::test_ll);
    std::tie(t.test_rmse_mean, t.test_rmse_se) = collect(&MetricRow::test_rmse);
    std::tie(t.train_ll_mean, t.train_ll_se) = collect(&MetricRow::train_ll);
    std::tie(t.train_rmse_mean, t.train_rmse_se) = collect(&MetricRow::train_rmse);
    out.push_back(std::move(t));
  }
  return out;
}

struct DiffRow {
  std::string dataset;
  std::string model;
  int n = 0;
  double test_ll_diff_mean = 0.0, test_ll_diff_se = 0.0;
  double test_rmse_diff_mean = 0.0, test_rmse_diff_se = 0.0;
};

// Per-(dataset, model) paired differences a - b, matched exactly on
// (dataset, model, split_index, seed). Unmatched or duplicated cells are
// rejected rather than silently dropped.
inline std::vector<DiffRow> paired_differences(const std::vector<MetricRow>& a,
                                               const std::vector<MetricRow>& b) {
  using Key = std::tuple<std::string, std::string, int, std::uint64_t>;
  std::map<Key, const MetricRow*> bmap;
  for (const auto& r : b) {
    Key key{r.dataset, r.model, r.split_index, r.seed};
    if (!bmap.emplace(key, &r).second)
      throw SchemaMismatch("paired_differences: duplicate cell in b");
  }
  std::map<std::pair<std::string, std::string>,
           std::pair<std::vector<double>, std::vector<double>>>
      diffs;
  std::size_t matched = 0;
  std::map<Key, bool> seen_a;
  for (const auto& r : a) {
    Key key{r.dataset, r.model, r.split_index, r.seed};
    if (!seen_a.emplace(key, true).second)
      throw SchemaMismatch("paired_differences: duplicate cell in a");
    auto it = bmap.find(key);
    if (it == bmap.end())
      throw PairingError("paired_differences: unmatched cell in a");
    ++matched;
    auto& [lls, rmses] = diffs[{r.dataset, r.model}];
    lls.push_back(r.test_ll - it->second->test_ll);
    rmses.push_back(r.test_rmse - it->second->test_rmse);
  }
  if (matched != b.size())
    throw PairingError("paired_differences: unmatched cells in b");

  std::vector<DiffRow> out;
  for (const auto& [key, vals] : diffs) {
    DiffRow d;
    d.dataset = key.first;
    d.model = key.second;
    d.n = static_cast<int>(vals.first.size());
    std::tie(d.test_ll_diff_mean, d.test_ll_diff_se) = detail::mean_se(vals.first);
    std::tie(d.test_rmse_diff_mean, d.test_rmse_diff_se) =
        detail::mean_se(vals.second);
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace nlb::evalstats
