#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "optregime/common.hpp"

namespace optregime {

// One subject's observed record. Codes are small non-negative ints except
// R which uses kMissing for "?". R[0] == 0 by convention, A[K] == 0.
struct Trajectory {
  std::vector<std::vector<int>> L;  // L[t] = covariate codes at time t
  std::vector<int> R;               // R[t]; kMissing iff A[t-1] == 0
  std::vector<int> S;               // treatment
  std::vector<int> A;               // test indicator
  double yd = 0.0;                  // health utility
  double y = 0.0;                   // total utility

  int horizon() const { return static_cast<int>(A.size()) - 1; }

  void validate() const {
    int k = horizon();
    if (k < 0) throw Error(ErrorCode::kIo, "empty trajectory");
    if (R[0] != 0) throw Error(ErrorCode::kIo, "R0 must be 0");
    if (A[k] != 0) throw Error(ErrorCode::kIo, "A_K must be 0");
    for (int t = 1; t <= k; ++t) {
      if ((R[t] == kMissing) != (A[t - 1] == 0))
        throw Error(ErrorCode::kIo, "R missing iff previous A == 0 violated");
    }
  }
};

// Interns integer key tuples to dense ids; shared by all strata machinery.
class KeyInterner {
 public:
  int intern(const std::vector<int>& key) {
    auto it = ids_.find(key);
    if (it != ids_.end()) return it->second;
    int id = static_cast<int>(keys_.size());
    ids_.emplace(key, id);
    keys_.push_back(key);
    return id;
  }
  int lookup(const std::vector<int>& key) const {
    auto it = ids_.find(key);
    return it == ids_.end() ? -1 : it->second;
  }
  const std::vector<int>& key(int id) const { return keys_[static_cast<std::size_t>(id)]; }
  int size() const { return static_cast<int>(keys_.size()); }

 private:
  struct VecHash {
    std::size_t operator()(const std::vector<int>& v) const {
      uint64_t h = 1469598103934665603ULL;
      for (int x : v) {
        h ^= static_cast<uint64_t>(static_cast<uint32_t>(x));
        h *= 1099511628211ULL;
      }
      return static_cast<std::size_t>(h);
    }
  };
  std::unordered_map<std::vector<int>, int, VecHash> ids_;
  std::vector<std::vector<int>> keys_;
};

// Column-oriented view over a set of trajectories with interned history
// strata. hist_id[t][i] identifies the full history
// (L-bar_t, R-bar_t, S-bar_{t-1}, A-bar_{t-1}) of subject i.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<Trajectory> subjects) : subjects_(std::move(subjects)) {
    if (subjects_.empty()) throw Error(ErrorCode::kIo, "dataset nonempty required");
    k_ = subjects_.front().horizon();
    for (const auto& tr : subjects_) {
      tr.validate();
      if (tr.horizon() != k_) throw Error(ErrorCode::kIo, "ragged horizons");
    }
    index_histories();
  }

  int n() const { return static_cast<int>(subjects_.size()); }
  int K() const { return k_; }
  const Trajectory& subject(int i) const { return subjects_[static_cast<std::size_t>(i)]; }
  const std::vector<Trajectory>& subjects() const { return subjects_; }

  // dense full-history stratum id of subject i at time t
  int hist_id(int t, int i) const { return hist_ids_[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)]; }
  int hist_count(int t) const { return interners_[static_cast<std::size_t>(t)].size(); }
  const KeyInterner& hist_interner(int t) const { return interners_[static_cast<std::size_t>(t)]; }

  // full history key of subject i through time t (L-bar, R-bar, S-bar_{t-1}, A-bar_{t-1})
  std::vector<int> history_key(int t, int i) const {
    const Trajectory& tr = subjects_[static_cast<std::size_t>(i)];
    std::vector<int> key;
    for (int m = 0; m <= t; ++m)
      for (int v : tr.L[static_cast<std::size_t>(m)]) key.push_back(v);
    for (int m = 0; m <= t; ++m) key.push_back(tr.R[static_cast<std::size_t>(m)]);
    for (int m = 0; m < t; ++m) key.push_back(tr.S[static_cast<std::size_t>(m)]);
    for (int m = 0; m < t; ++m) key.push_back(tr.A[static_cast<std::size_t>(m)]);
    return key;
  }

  // observed treatment levels at time t, ascending
  const std::vector<int>& s_levels(int t) const { return s_levels_[static_cast<std::size_t>(t)]; }
  // observed (s, a) action pairs at time t, ascending lexicographic
  const std::vector<std::pair<int, int>>& action_pairs(int t) const {
    return action_pairs_[static_cast<std::size_t>(t)];
  }

  std::vector<double> yd_column() const {
    std::vector<double> v(subjects_.size());
    for (std::size_t i = 0; i < subjects_.size(); ++i) v[i] = subjects_[i].yd;
    return v;
  }
  std::vector<double> y_column() const {
    std::vector<double> v(subjects_.size());
    for (std::size_t i = 0; i < subjects_.size(); ++i) v[i] = subjects_[i].y;
    return v;
  }

  // Latent side table (simulation only); excluded from estimation inputs.
  std::map<std::string, std::vector<double>> latents;

  Dataset resample(const std::vector<int>& idx) const {
    std::vector<Trajectory> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(subjects_[static_cast<std::size_t>(i)]);
    return Dataset(std::move(out));
  }

 private:
  void index_histories() {
    int n_ = n();
    interners_.assign(static_cast<std::size_t>(k_ + 1), {});
    hist_ids_.assign(static_cast<std::size_t>(k_ + 1), std::vector<int>(static_cast<std::size_t>(n_)));
    s_levels_.assign(static_cast<std::size_t>(k_ + 1), {});
    action_pairs_.assign(static_cast<std::size_t>(k_ + 1), {});
    for (int t = 0; t <= k_; ++t) {
      std::map<int, bool> slev;
      std::map<std::pair<int, int>, bool> pairs;
      for (int i = 0; i < n_; ++i) {
        hist_ids_[static_cast<std::size_t>(t)][static_cast<std::size_t>(i)] =
            interners_[static_cast<std::size_t>(t)].intern(history_key(t, i));
        const Trajectory& tr = subjects_[static_cast<std::size_t>(i)];
        slev[tr.S[static_cast<std::size_t>(t)]] = true;
        pairs[{tr.S[static_cast<std::size_t>(t)], tr.A[static_cast<std::size_t>(t)]}] = true;
      }
      for (auto& [s, _] : slev) s_levels_[static_cast<std::size_t>(t)].push_back(s);
      for (auto& [p, _] : pairs) action_pairs_[static_cast<std::size_t>(t)].push_back(p);
    }
  }

  std::vector<Trajectory> subjects_;
  int k_ = 0;
  std::vector<KeyInterner> interners_;
  std::vector<std::vector<int>> hist_ids_;
  std::vector<std::vector<int>> s_levels_;
  std::vector<std::vector<std::pair<int, int>>> action_pairs_;
};

// ---------------------------------------------------------------------------
// Regimes
// ---------------------------------------------------------------------------

struct Action {
  int s = 0;
  int a = 0;
  bool operator==(const Action& o) const { return s == o.s && a == o.a; }
};

// Deterministic decision table. When reduced_history is set the per-t key is
// (selected covariate history, result history, treatment history); results
// past an early-retest divergence are then recoverable ("?" under the regime).
// Without the flag the key is the full observed-history tuple and evaluation
// past such a divergence is refused.
struct Regime {
  int K = 0;
  bool reduced_history = true;
  // which L components enter the reduced key (per component index; same for all t)
  std::vector<int> c_mask;
  std::vector<std::map<std::vector<int>, Action>> tables;  // per t

  // reduced key built from regime-counterfactual results r_g and prior regime
  // treatments s_g (c-part comes from observed covariates, valid under NDE(C))
  static std::vector<int> reduced_key(const std::vector<int>& c_hist,
                                      const std::vector<int>& r_hist_g,
                                      const std::vector<int>& s_hist_g) {
    std::vector<int> key = c_hist;
    key.insert(key.end(), r_hist_g.begin(), r_hist_g.end());
    key.insert(key.end(), s_hist_g.begin(), s_hist_g.end());
    return key;
  }

  Action action(int t, const std::vector<int>& key) const {
    const auto& table = tables[static_cast<std::size_t>(t)];
    auto it = table.find(key);
    if (it == table.end())
      throw Error(ErrorCode::kUnreachableStratum, "no regime entry at t=" + std::to_string(t));
    return it->second;
  }
};

enum class ViolationEvent { kNone, kSMismatch, kAObs0Reg1, kAObs1Reg0 };

struct CensorStatus {
  bool censored = false;
  int first_violation_time = -1;
  ViolationEvent event = ViolationEvent::kNone;
};

struct RegimeEvaluation {
  CensorStatus standard;
  CensorStatus nde;
  std::vector<Action> actions;     // (S_{t,g}, A_{t,g}) along the NDE-evaluated path
  bool r_substitution = false;     // observed R stood in for R* after divergence
};

// Classifies the subject against the regime and returns the regime action
// sequence under the NDE(R-bar*, C-bar) identification: whenever the regime
// tests and the subject was tested, the observed result stands in for the
// regime's; when the regime does not test the regime-result is "?".
inline RegimeEvaluation apply_regime(const Trajectory& tr, const Regime& g) {
  int K = tr.horizon();
  if (g.K != K) throw Error(ErrorCode::kUnreachableStratum, "regime horizon mismatch");
  RegimeEvaluation ev;
  ev.actions.resize(static_cast<std::size_t>(K + 1));

  std::vector<int> c_hist, r_hist_g, s_hist_g;
  bool diverged_a = false;  // some m<t had A_m=1, A_{m,g}=0 (NDE-uncensoring event)

  for (int t = 0; t <= K; ++t) {
    // extend histories to time t
    for (std::size_t ci = 0; ci < tr.L[static_cast<std::size_t>(t)].size(); ++ci) {
      bool in_mask = g.c_mask.empty() ||
                     std::find(g.c_mask.begin(), g.c_mask.end(), static_cast<int>(ci)) != g.c_mask.end();
      if (in_mask) c_hist.push_back(tr.L[static_cast<std::size_t>(t)][static_cast<std::size_t>(ci)]);
    }
    if (t == 0) {
      r_hist_g.push_back(tr.R[0]);
    } else {
      int a_prev_g = ev.actions[static_cast<std::size_t>(t - 1)].a;
      if (a_prev_g == 0) {
        r_hist_g.push_back(kMissing);
      } else {
        // regime tested at t-1; observed result required
        if (tr.A[static_cast<std::size_t>(t - 1)] == 1) {
          r_hist_g.push_back(tr.R[static_cast<std::size_t>(t)]);
        } else {
          // subject skipped a required test: NDE-censored before this point;
          // the action sequence past censoring is never used
          r_hist_g.push_back(kMissing);
        }
      }
    }

    Action at;
    if (g.reduced_history) {
      at = g.action(t, Regime::reduced_key(c_hist, r_hist_g, s_hist_g));
      if (diverged_a) ev.r_substitution = true;
    } else {
      if (diverged_a && !ev.nde.censored)
        throw Error(ErrorCode::kHistoryNotRecoverable,
                    "regime is not reduced-history and testing diverged at an earlier time");
      std::vector<int> key;
      const auto build_full = [&](int upto) {
        key.clear();
        for (int m = 0; m <= upto; ++m)
          for (int v : tr.L[static_cast<std::size_t>(m)]) key.push_back(v);
        for (int m = 0; m <= upto; ++m) key.push_back(tr.R[static_cast<std::size_t>(m)]);
        for (int m = 0; m < upto; ++m) key.push_back(tr.S[static_cast<std::size_t>(m)]);
        for (int m = 0; m < upto; ++m) key.push_back(tr.A[static_cast<std::size_t>(m)]);
      };
      build_full(t);
      at = g.action(t, key);
    }
    ev.actions[static_cast<std::size_t>(t)] = at;
    s_hist_g.push_back(at.s);

    int s_obs = tr.S[static_cast<std::size_t>(t)];
    int a_obs = tr.A[static_cast<std::size_t>(t)];

    if (!ev.standard.censored && (s_obs != at.s || a_obs != at.a)) {
      ev.standard.censored = true;
      ev.standard.first_violation_time = t;
      ev.standard.event = s_obs != at.s ? ViolationEvent::kSMismatch
                          : (a_obs == 0 ? ViolationEvent::kAObs0Reg1 : ViolationEvent::kAObs1Reg0);
    }
    if (!ev.nde.censored && (s_obs != at.s || (a_obs == 0 && at.a == 1))) {
      ev.nde.censored = true;
      ev.nde.first_violation_time = t;
      ev.nde.event = s_obs != at.s ? ViolationEvent::kSMismatch : ViolationEvent::kAObs0Reg1;
    }
    if (a_obs == 1 && at.a == 0) diverged_a = true;
    if (ev.nde.censored && ev.standard.censored) {
      // both classifications settled; actions past this point are unused,
      // fill with the regime's no-op to keep the vector total
      for (int m = t + 1; m <= K; ++m) ev.actions[static_cast<std::size_t>(m)] = Action{0, 0};
      break;
    }
  }
  return ev;
}

// Per-time testing cost; arguments are (t, c-bar_t, r-bar_t, s-bar_t).
using CostFn = std::function<double(int, const std::vector<int>&, const std::vector<int>&,
                                    const std::vector<int>&)>;

inline CostFn constant_cost(double c_star) {
  return [c_star](int, const std::vector<int>&, const std::vector<int>&,
                  const std::vector<int>&) { return c_star; };
}

struct CostAdjustedUtility {
  double y_g = 0.0;
  bool nde_censored = false;  // value returned unchanged when set
};

// Y_g = Y + sum_{t<K} 1[A_t=1, A_{t,g}=0] * cost(t, ...): adds back costs of
// tests the regime would not have ordered.
inline CostAdjustedUtility cost_adjusted_utility(const Trajectory& tr, const Regime& g,
                                                 const CostFn& cost) {
  RegimeEvaluation ev = apply_regime(tr, g);
  CostAdjustedUtility out;
  if (ev.nde.censored) {
    out.y_g = tr.y;
    out.nde_censored = true;
    return out;
  }
  int K = tr.horizon();
  double add = 0.0;
  std::vector<int> c_hist, r_hist, s_hist;
  for (int t = 0; t < K; ++t) {
    for (int v : tr.L[static_cast<std::size_t>(t)]) c_hist.push_back(v);
    r_hist.push_back(tr.R[static_cast<std::size_t>(t)]);
    s_hist.push_back(tr.S[static_cast<std::size_t>(t)]);
    if (tr.A[static_cast<std::size_t>(t)] == 1 && ev.actions[static_cast<std::size_t>(t)].a == 0)
      add += cost(t, c_hist, r_hist, s_hist);
  }
  out.y_g = tr.y + add;
  return out;
}

// ---------------------------------------------------------------------------
// CSV I/O. Wide dataset format, one row per subject:
//   L{t}_{j},...,R{t},S{t},A{t} for t=0..K, then Yd.
// R{t} uses the literal "?" for the missing sentinel. Y is derived at load
// time as Yd - sum_t cost*A_t with the configured constant cost.
// ---------------------------------------------------------------------------

namespace csv_detail {

inline std::vector<std::string> split(const std::string& line, char delim = ',') {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == delim) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace csv_detail

inline void save_dataset_csv(const Dataset& ds, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path);
  int K = ds.K();
  const Trajectory& t0 = ds.subject(0);
  for (int t = 0; t <= K; ++t) {
    for (std::size_t j = 0; j < t0.L[static_cast<std::size_t>(t)].size(); ++j)
      f << "L" << t << "_" << j << ",";
    f << "R" << t << ",S" << t << ",A" << t << ",";
  }
  f << "Yd\n";
  for (int i = 0; i < ds.n(); ++i) {
    const Trajectory& tr = ds.subject(i);
    for (int t = 0; t <= K; ++t) {
      for (int v : tr.L[static_cast<std::size_t>(t)]) f << v << ",";
      if (tr.R[static_cast<std::size_t>(t)] == kMissing)
        f << "?,";
      else
        f << tr.R[static_cast<std::size_t>(t)] << ",";
      f << tr.S[static_cast<std::size_t>(t)] << "," << tr.A[static_cast<std::size_t>(t)] << ",";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", tr.yd);
    f << buf << "\n";
  }
}

inline Dataset load_dataset_csv(const std::string& path, double c_star) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path);
  std::string line;
  if (!std::getline(f, line)) throw Error(ErrorCode::kIo, "empty file " + path);
  auto header = csv_detail::split(line);

  struct Col {
    enum Kind { kL, kR, kS, kA, kYd } kind;
    int t = 0, j = 0;
  };
  std::vector<Col> cols;
  int K = -1;
  std::map<int, int> l_counts;
  for (const auto& h : header) {
    Col c{};
    if (h == "Yd") {
      c.kind = Col::kYd;
    } else if (h.size() > 1 && (h[0] == 'L')) {
      auto us = h.find('_');
      if (us == std::string::npos) throw Error(ErrorCode::kIo, "bad L column " + h);
      c.kind = Col::kL;
      c.t = std::stoi(h.substr(1, us - 1));
      c.j = std::stoi(h.substr(us + 1));
      l_counts[c.t] = std::max(l_counts[c.t], c.j + 1);
    } else if (h[0] == 'R') {
      c.kind = Col::kR;
      c.t = std::stoi(h.substr(1));
    } else if (h[0] == 'S') {
      c.kind = Col::kS;
      c.t = std::stoi(h.substr(1));
    } else if (h[0] == 'A') {
      c.kind = Col::kA;
      c.t = std::stoi(h.substr(1));
    } else {
      throw Error(ErrorCode::kIo, "unknown column " + h);
    }
    K = std::max(K, c.t);
    cols.push_back(c);
  }
  if (K < 0) throw Error(ErrorCode::kIo, "no time columns in " + path);

  std::vector<Trajectory> subjects;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto cells = csv_detail::split(line);
    if (cells.size() != cols.size()) throw Error(ErrorCode::kIo, "ragged row in " + path);
    Trajectory tr;
    tr.L.assign(static_cast<std::size_t>(K + 1), {});
    for (int t = 0; t <= K; ++t)
      tr.L[static_cast<std::size_t>(t)].assign(static_cast<std::size_t>(l_counts.count(t) ? l_counts[t] : 0), 0);
    tr.R.assign(static_cast<std::size_t>(K + 1), 0);
    tr.S.assign(static_cast<std::size_t>(K + 1), 0);
    tr.A.assign(static_cast<std::size_t>(K + 1), 0);
    for (std::size_t ci = 0; ci < cols.size(); ++ci) {
      const Col& c = cols[ci];
      const std::string& cell = cells[ci];
      switch (c.kind) {
        case Col::kL:
          tr.L[static_cast<std::size_t>(c.t)][static_cast<std::size_t>(c.j)] = std::stoi(cell);
          break;
        case Col::kR:
          tr.R[static_cast<std::size_t>(c.t)] = (cell == "?") ? kMissing : std::stoi(cell);
          break;
        case Col::kS:
          tr.S[static_cast<std::size_t>(c.t)] = std::stoi(cell);
          break;
        case Col::kA:
          tr.A[static_cast<std::size_t>(c.t)] = std::stoi(cell);
          break;
        case Col::kYd:
          tr.yd = std::stod(cell);
          break;
      }
    }
    int tests = 0;
    for (int t = 0; t <= K; ++t) tests += tr.A[static_cast<std::size_t>(t)];
    tr.y = tr.yd - c_star * tests;
    subjects.push_back(std::move(tr));
  }
  return Dataset(std::move(subjects));
}

// Regime CSV: one row per stratum: t,h0,h1,...,s,a with the reduced-history
// key (covariate codes, then result codes with "?", then prior treatments) in
// the h columns; trailing h cells may be blank for early t.
inline void save_regime_csv(const Regime& g, const std::string& path) {
  std::size_t max_key = 0;
  for (const auto& tab : g.tables)
    for (const auto& [key, _] : tab) max_key = std::max(max_key, key.size());
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path);
  f << "t";
  for (std::size_t j = 0; j < max_key; ++j) f << ",h" << j;
  f << ",s,a\n";
  for (int t = 0; t <= g.K; ++t) {
    for (const auto& [key, act] : g.tables[static_cast<std::size_t>(t)]) {
      f << t;
      for (std::size_t j = 0; j < max_key; ++j) {
        f << ",";
        if (j < key.size()) {
          if (key[j] == kMissing)
            f << "?";
          else
            f << key[j];
        }
      }
      f << "," << act.s << "," << act.a << "\n";
    }
  }
}

inline Regime load_regime_csv(const std::string& path, int K, bool reduced_history = true) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path);
  Regime g;
  g.K = K;
  g.reduced_history = reduced_history;
  g.tables.assign(static_cast<std::size_t>(K + 1), {});
  std::string line;
  if (!std::getline(f, line)) throw Error(ErrorCode::kIo, "empty regime file");
  std::size_t ncols = csv_detail::split(line).size();
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto cells = csv_detail::split(line);
    if (cells.size() != ncols) throw Error(ErrorCode::kIo, "ragged regime row");
    int t = std::stoi(cells[0]);
    std::vector<int> key;
    for (std::size_t j = 1; j + 2 < cells.size(); ++j) {
      if (cells[j].empty()) continue;
      key.push_back(cells[j] == "?" ? kMissing : std::stoi(cells[j]));
    }
    Action act{std::stoi(cells[cells.size() - 2]), std::stoi(cells[cells.size() - 1])};
    if (t == K && act.a != 0) throw Error(ErrorCode::kIo, "a_K must be 0");
    g.tables[static_cast<std::size_t>(t)][key] = act;
  }
  return g;
}

}  // namespace optregime
