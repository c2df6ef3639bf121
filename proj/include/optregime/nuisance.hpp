#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "optregime/common.hpp"
#include "optregime/trajectory.hpp"

namespace optregime {

// Empirical conditional table over discrete strata. Estimates are exact
// ratios of counts (probability targets) or stratum sample means (real
// targets). Unseen strata raise EMPTY_STRATUM at predict time unless a
// Laplace fallback is configured.
class ConditionalTable {
 public:
  ConditionalTable() = default;
  explicit ConditionalTable(std::string description) : description_(std::move(description)) {}

  void configure_laplace(double alpha, int levels) {
    laplace_alpha_ = alpha;
    laplace_levels_ = levels;
  }

  void accumulate(const std::vector<int>& stratum, double value) {
    auto& cell = cells_[stratum];
    cell.sum += value;
    cell.count += 1;
  }

  // Seen strata return the exact ratio/mean. Unseen strata raise
  // EMPTY_STRATUM, or with a Laplace fallback return the flagged smoothed
  // value (alpha+0)/(alpha*levels) = 1/levels.
  double predict(const std::vector<int>& stratum, bool* smoothed = nullptr) const {
    if (smoothed) *smoothed = false;
    auto it = cells_.find(stratum);
    if (it == cells_.end()) {
      if (laplace_alpha_ > 0.0 && laplace_levels_ > 1) {
        if (smoothed) *smoothed = true;
        return 1.0 / static_cast<double>(laplace_levels_);
      }
      throw Error(ErrorCode::kEmptyStratum, "unseen stratum in " + description_);
    }
    return it->second.sum / static_cast<double>(it->second.count);
  }

  int count(const std::vector<int>& stratum) const {
    auto it = cells_.find(stratum);
    return it == cells_.end() ? 0 : it->second.count;
  }

  std::size_t strata() const { return cells_.size(); }
  const std::string& description() const { return description_; }

  void dump_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw Error(ErrorCode::kIo, "cannot open " + path);
    f << "stratum,estimate,count\n";
    for (const auto& [key, cell] : cells_) {
      for (std::size_t j = 0; j < key.size(); ++j) {
        if (j) f << ";";
        if (key[j] == kMissing)
          f << "?";
        else
          f << key[j];
      }
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", cell.sum / static_cast<double>(cell.count));
      f << "," << buf << "," << cell.count << "\n";
    }
  }

 private:
  struct Cell {
    double sum = 0.0;
    int count = 0;
  };
  std::string description_;
  std::map<std::vector<int>, Cell> cells_;
  double laplace_alpha_ = 0.0;
  int laplace_levels_ = 0;
};

// Extracts a per-subject value / conditioning key for fit_conditional.
using ValueExtractor = std::function<double(const Dataset&, int)>;
using KeyExtractor = std::function<std::vector<int>(const Dataset&, int)>;

inline ConditionalTable fit_conditional(const Dataset& ds, const std::vector<int>& idx,
                                        const std::string& description,
                                        const ValueExtractor& value, const KeyExtractor& key) {
  ConditionalTable tab(description);
  for (int i : idx) tab.accumulate(key(ds, i), value(ds, i));
  return tab;
}

inline std::vector<int> all_indices(const Dataset& ds) {
  std::vector<int> idx(static_cast<std::size_t>(ds.n()));
  for (int i = 0; i < ds.n(); ++i) idx[static_cast<std::size_t>(i)] = i;
  return idx;
}

struct NuisanceOptions {
  double positivity_floor = 1e-6;  // ZERO_WEIGHT below this
  double laplace_alpha = 0.0;      // 0 disables smoothing
};

// Action-process tables: p(S_t = s | H-bar_t) and Pi_t = Pr(A_t = 1 | H-bar_t, S_t),
// fit as saturated empirical conditionals on a fit index set. Oracle tables may
// be injected instead (simulation studies with known laws).
class NuisanceSet {
 public:
  NuisanceSet() = default;

  static NuisanceSet fit(const Dataset& ds, const std::vector<int>& idx,
                         NuisanceOptions opts = {}) {
    NuisanceSet ns;
    ns.opts_ = opts;
    int K = ds.K();
    ns.s_tables_.assign(static_cast<std::size_t>(K + 1), {});
    ns.pi_tables_.assign(static_cast<std::size_t>(K + 1), {});
    for (int t = 0; t <= K; ++t) {
      auto& st = ns.s_tables_[static_cast<std::size_t>(t)];
      auto& pt = ns.pi_tables_[static_cast<std::size_t>(t)];
      for (int i : idx) {
        const Trajectory& tr = ds.subject(i);
        std::vector<int> hk = ds.history_key(t, i);
        auto& scell = st[hk];
        scell.level_counts[tr.S[static_cast<std::size_t>(t)]] += 1;
        scell.total += 1;
        std::vector<int> hks = hk;
        hks.push_back(tr.S[static_cast<std::size_t>(t)]);
        auto& pcell = pt[hks];
        pcell.ones += tr.A[static_cast<std::size_t>(t)];
        pcell.total += 1;
      }
    }
    return ns;
  }

  // p-hat(S_t = s | history of subject i), from the fitted tables
  double p_s(const Dataset& ds, int t, int i, int s) const {
    if (oracle_p_s_) return oracle_p_s_(ds, t, i, s);
    const auto& st = s_tables_[static_cast<std::size_t>(t)];
    auto it = st.find(ds.history_key(t, i));
    if (it == st.end()) throw Error(ErrorCode::kEmptyStratum, "p(S|H) stratum unseen at t=" + std::to_string(t));
    const auto& cell = it->second;
    auto lv = cell.level_counts.find(s);
    double cnt = lv == cell.level_counts.end() ? 0.0 : static_cast<double>(lv->second);
    if (opts_.laplace_alpha > 0.0) {
      double levels = static_cast<double>(cell.level_counts.size() < 2 ? 2 : cell.level_counts.size());
      return (cnt + opts_.laplace_alpha) / (cell.total + opts_.laplace_alpha * levels);
    }
    return cnt / cell.total;
  }

  // Pi-hat_t = Pr(A_t = 1 | history, S_t) for subject i
  double pi(const Dataset& ds, int t, int i) const {
    if (oracle_pi_) return oracle_pi_(ds, t, i);
    const auto& pt = pi_tables_[static_cast<std::size_t>(t)];
    std::vector<int> key = ds.history_key(t, i);
    key.push_back(ds.subject(i).S[static_cast<std::size_t>(t)]);
    auto it = pt.find(key);
    if (it == pt.end()) throw Error(ErrorCode::kEmptyStratum, "Pi stratum unseen at t=" + std::to_string(t));
    if (opts_.laplace_alpha > 0.0)
      return (static_cast<double>(it->second.ones) + opts_.laplace_alpha) /
             (it->second.total + 2.0 * opts_.laplace_alpha);
    return static_cast<double>(it->second.ones) / it->second.total;
  }

  double positivity_floor() const { return opts_.positivity_floor; }

  // Oracle overrides (true generator probabilities); used by simulation studies.
  void set_oracle(std::function<double(const Dataset&, int, int, int)> p_s,
                  std::function<double(const Dataset&, int, int)> pi) {
    oracle_p_s_ = std::move(p_s);
    oracle_pi_ = std::move(pi);
  }
  bool oracle() const { return static_cast<bool>(oracle_p_s_); }

 private:
  struct SCell {
    std::map<int, int> level_counts;
    double total = 0.0;
  };
  struct PiCell {
    int ones = 0;
    double total = 0.0;
  };
  struct VecLess {
    bool operator()(const std::vector<int>& a, const std::vector<int>& b) const { return a < b; }
  };
  std::vector<std::map<std::vector<int>, SCell, VecLess>> s_tables_;
  std::vector<std::map<std::vector<int>, PiCell, VecLess>> pi_tables_;
  NuisanceOptions opts_;
  std::function<double(const Dataset&, int, int, int)> oracle_p_s_;
  std::function<double(const Dataset&, int, int)> oracle_pi_;
};

// W_{t_from}^{t_to} = prod_{m=t_from}^{t_to} p(S_m | H-bar_m) at the subject's
// realized values; the empty product is 1.
inline double treatment_weight(const Dataset& ds, const NuisanceSet& ns, int i, int t_from,
                               int t_to) {
  if (t_from > t_to + 1) throw Error(ErrorCode::kUsage, "treatment_weight: bad range");
  double w = 1.0;
  for (int m = t_from; m <= t_to; ++m) {
    double p = ns.p_s(ds, m, i, ds.subject(i).S[static_cast<std::size_t>(m)]);
    if (p < ns.positivity_floor())
      throw Error(ErrorCode::kZeroWeight, "p(S|H) below positivity floor at t=" + std::to_string(m));
    w *= p;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Cross-fitting
// ---------------------------------------------------------------------------

struct CrossFitPlan {
  int folds = 2;
  uint64_t seed = 0;
  std::vector<int> assignment;  // fold of each subject

  std::vector<int> fold_indices(int fold) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] == fold) out.push_back(static_cast<int>(i));
    return out;
  }
  std::vector<int> complement_indices(int fold) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] != fold) out.push_back(static_cast<int>(i));
    return out;
  }
};

inline CrossFitPlan make_crossfit(const Dataset& ds, int folds, uint64_t seed,
                                  int min_fold_rows = 1) {
  if (folds < 2) throw Error(ErrorCode::kUsage, "cross-fit requires M >= 2");
  CrossFitPlan plan;
  plan.folds = folds;
  plan.seed = seed;
  int n = ds.n();
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  Rng rng(seed, /*stream=*/0xCF17, /*counter=*/0);
  for (int i = n - 1; i > 0; --i) {
    int j = static_cast<int>(rng.below(static_cast<uint64_t>(i + 1)));
    std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  }
  plan.assignment.assign(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i)
    plan.assignment[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i % folds;
  if (n / folds < min_fold_rows)
    throw Error(ErrorCode::kFoldTooSmall, "fold has fewer than " + std::to_string(min_fold_rows) + " rows");
  return plan;
}

// Closure receives (dataset, nuisance-fit indices, evaluation indices) and
// returns one estimate; fold estimates are averaged with equal weights.
using CrossFitClosure =
    std::function<double(const Dataset&, const std::vector<int>&, const std::vector<int>&)>;

inline double crossfit_estimate(const Dataset& ds, const CrossFitPlan& plan,
                                const CrossFitClosure& estimator) {
  std::vector<double> fold_estimates;
  for (int f = 0; f < plan.folds; ++f)
    fold_estimates.push_back(estimator(ds, plan.complement_indices(f), plan.fold_indices(f)));
  return mean(fold_estimates);
}

// ---------------------------------------------------------------------------
// Dense group-by helpers used by the estimation code paths. Strata are dense
// ids in [0, n_groups).
// ---------------------------------------------------------------------------

struct GroupStats {
  std::vector<double> sum;
  std::vector<double> count;

  double mean_of(int g) const {
    if (count[static_cast<std::size_t>(g)] <= 0.0)
      throw Error(ErrorCode::kEmptyStratum, "empty group in group_mean");
    return sum[static_cast<std::size_t>(g)] / count[static_cast<std::size_t>(g)];
  }
};

inline GroupStats group_stats(const std::vector<double>& values, const std::vector<int>& group,
                              const std::vector<int>& idx, int n_groups) {
  GroupStats gs;
  gs.sum.assign(static_cast<std::size_t>(n_groups), 0.0);
  gs.count.assign(static_cast<std::size_t>(n_groups), 0.0);
  for (int i : idx) {
    int g = group[static_cast<std::size_t>(i)];
    gs.sum[static_cast<std::size_t>(g)] += values[static_cast<std::size_t>(i)];
    gs.count[static_cast<std::size_t>(g)] += 1.0;
  }
  return gs;
}

}  // namespace optregime
