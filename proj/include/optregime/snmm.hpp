#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "optregime/common.hpp"
#include "optregime/nuisance.hpp"
#include "optregime/trajectory.hpp"

namespace optregime {

// ---------------------------------------------------------------------------
// Blip model specification. SATURATED carries one parameter per
// (history stratum, non-reference action pair); LINEAR carries monomial
// features over named history variables and the current action (s, a).
// The reference level gamma(h, 0, 0) == 0 always.
// ---------------------------------------------------------------------------

struct VarRef {
  char kind = 'L';  // 'L','R','S','A' with time index; 's','a' = current action
  int t = 0;
  int j = 0;  // L component

  static VarRef parse(const std::string& name) {
    VarRef v;
    if (name == "s" || name == "a") {
      v.kind = name[0];
      return v;
    }
    v.kind = name[0];
    if (v.kind == 'L') {
      auto us = name.find('_');
      if (us == std::string::npos) throw Error(ErrorCode::kUsage, "bad var " + name);
      v.t = std::stoi(name.substr(1, us - 1));
      v.j = std::stoi(name.substr(us + 1));
    } else if (v.kind == 'R' || v.kind == 'S' || v.kind == 'A') {
      v.t = std::stoi(name.substr(1));
    } else {
      throw Error(ErrorCode::kUsage, "bad var " + name);
    }
    return v;
  }

  std::string name() const {
    if (kind == 's' || kind == 'a') return std::string(1, kind);
    std::string out(1, kind);
    out += std::to_string(t);
    if (kind == 'L') out += "_" + std::to_string(j);
    return out;
  }

  double value(const Dataset& ds, int i, int s, int a) const {
    const Trajectory& tr = ds.subject(i);
    switch (kind) {
      case 's': return s;
      case 'a': return a;
      case 'L': return tr.L[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
      case 'R': return tr.R[static_cast<std::size_t>(t)];
      case 'S': return tr.S[static_cast<std::size_t>(t)];
      case 'A': return tr.A[static_cast<std::size_t>(t)];
    }
    throw Error(ErrorCode::kUsage, "bad var kind");
  }

  void check_in_history(int stage_t) const {
    bool ok = (kind == 'L' || kind == 'R') ? t <= stage_t
              : (kind == 'S' || kind == 'A') ? t < stage_t
                                             : true;
    if (!ok) throw Error(ErrorCode::kUsage, name() + " not in history at t=" + std::to_string(stage_t));
  }
};

struct LinearFeature {
  std::vector<VarRef> factors;  // monomial; must contain s or a

  double eval(const Dataset& ds, int i, int s, int a) const {
    double v = 1.0;
    for (const auto& f : factors) v *= f.value(ds, i, s, a);
    return v;
  }
};

struct StageSpec {
  bool saturated = true;
  std::vector<VarRef> history_vars;     // saturated key; empty = full history
  std::vector<LinearFeature> features;  // linear only

  void validate(int stage_t) const {
    if (saturated) {
      for (const auto& v : history_vars) {
        if (v.kind == 's' || v.kind == 'a')
          throw Error(ErrorCode::kUsage, "history_vars cannot include the current action");
        v.check_in_history(stage_t);
      }
    } else {
      if (features.empty()) throw Error(ErrorCode::kUsage, "linear spec needs features");
      for (const auto& f : features) {
        bool has_action = false;
        for (const auto& v : f.factors) {
          if (v.kind == 's' || v.kind == 'a')
            has_action = true;
          else
            v.check_in_history(stage_t);
        }
        if (!has_action)
          throw Error(ErrorCode::kUsage, "every blip feature needs an s or a factor");
      }
    }
  }
};

struct BlipSpec {
  std::vector<StageSpec> stages;  // index t = 0..K

  static BlipSpec saturated(int K) {
    BlipSpec spec;
    spec.stages.assign(static_cast<std::size_t>(K + 1), StageSpec{});
    return spec;
  }
  void validate() const {
    for (std::size_t t = 0; t < stages.size(); ++t) stages[t].validate(static_cast<int>(t));
  }
};

// Instrument functions Q_t; defaults to the blip feature map itself.
struct QSpec {
  std::vector<std::optional<std::vector<LinearFeature>>> stages;  // nullopt = blip features

  static QSpec defaults(int K) {
    QSpec q;
    q.stages.assign(static_cast<std::size_t>(K + 1), std::nullopt);
    return q;
  }
};

struct SaturatedKey {
  std::vector<int> hist;
  int s = 0;
  int a = 0;
  bool operator<(const SaturatedKey& o) const {
    if (hist != o.hist) return hist < o.hist;
    if (s != o.s) return s < o.s;
    return a < o.a;
  }
};

struct StagePsi {
  bool saturated = true;
  std::map<SaturatedKey, double> sat;  // parameter per (stratum, action != (0,0))
  std::vector<double> beta;            // linear coefficients

  std::size_t dim() const { return saturated ? sat.size() : beta.size(); }
};

struct PsiVector {
  std::vector<StagePsi> stages;
};

enum class ActionConstraint { kFree, kNoTest, kZero };

// Continuation policy used inside Delta_t: which action stands in for the
// "followed from t+1 onward" regime.
struct Continuation {
  ActionConstraint constraint = ActionConstraint::kFree;  // argmax over allowed actions
  const Regime* regime = nullptr;                         // follow a fixed regime instead
};

// ---------------------------------------------------------------------------
// Fitted model: spec + parameters + per-stratum observed action sets.
// ---------------------------------------------------------------------------

class FittedSnmm {
 public:
  BlipSpec spec;
  QSpec q_spec;
  PsiVector psi;
  // per t: observed non-reference action pairs per saturated stratum
  std::vector<std::map<std::vector<int>, std::vector<Action>>> stratum_actions;
  // per t: global observed action grid (linear specs argmax over this)
  std::vector<std::vector<Action>> action_grid;

  int K() const { return static_cast<int>(spec.stages.size()) - 1; }

  std::vector<int> stage_hist_key(const Dataset& ds, int i, int t) const {
    const StageSpec& st = spec.stages[static_cast<std::size_t>(t)];
    if (st.history_vars.empty()) return ds.history_key(t, i);
    std::vector<int> key;
    key.reserve(st.history_vars.size());
    for (const auto& v : st.history_vars)
      key.push_back(static_cast<int>(v.value(ds, i, 0, 0)));
    return key;
  }

  double blip(const Dataset& ds, int i, int t, int s, int a) const {
    if (s == 0 && a == 0) return 0.0;
    const StageSpec& st = spec.stages[static_cast<std::size_t>(t)];
    const StagePsi& sp = psi.stages[static_cast<std::size_t>(t)];
    if (st.saturated) {
      SaturatedKey key{stage_hist_key(ds, i, t), s, a};
      auto it = sp.sat.find(key);
      if (it == sp.sat.end())
        throw Error(ErrorCode::kUnknownStratum, "no blip parameter at t=" + std::to_string(t));
      return it->second;
    }
    double v = 0.0;
    for (std::size_t j = 0; j < st.features.size(); ++j)
      v += sp.beta[j] * st.features[j].eval(ds, i, s, a);
    return v;
  }

  // Candidate actions at (t, subject i): observed pairs plus the reference.
  std::vector<Action> candidates(const Dataset& ds, int i, int t,
                                 ActionConstraint constraint) const {
    const StageSpec& st = spec.stages[static_cast<std::size_t>(t)];
    std::vector<Action> cand{{0, 0}};
    const std::vector<Action>* pool;
    std::vector<Action> local;
    if (st.saturated) {
      auto it = stratum_actions[static_cast<std::size_t>(t)].find(stage_hist_key(ds, i, t));
      if (it != stratum_actions[static_cast<std::size_t>(t)].end()) local = it->second;
      pool = &local;
    } else {
      pool = &action_grid[static_cast<std::size_t>(t)];
    }
    for (const Action& p : *pool) {
      if (constraint == ActionConstraint::kNoTest && p.a != 0) continue;
      if (constraint == ActionConstraint::kZero) continue;
      if (t == K() && p.a != 0) continue;  // a_K == 0 convention
      if (!(p == Action{0, 0})) cand.push_back(p);
    }
    std::sort(cand.begin(), cand.end(),
              [](const Action& x, const Action& y) { return x.s != y.s ? x.s < y.s : x.a < y.a; });
    cand.erase(std::unique(cand.begin(), cand.end()), cand.end());
    return cand;
  }

  // argmax of the blip over allowed actions; ties resolve to the
  // lexicographically smallest pair, so an all-zero blip returns (0,0).
  Action optimal_action(const Dataset& ds, int i, int t,
                        ActionConstraint constraint = ActionConstraint::kFree) const {
    Action best{0, 0};
    double best_v = 0.0;  // blip at (0,0)
    for (const Action& c : candidates(ds, i, t, constraint)) {
      if (c == Action{0, 0}) continue;
      double v = blip(ds, i, t, c.s, c.a);
      if (v > best_v + 0.0) {
        best_v = v;
        best = c;
      }
    }
    return best;
  }

  Action continuation_action(const Dataset& ds, int i, int t, const Continuation& cont) const {
    if (cont.regime) {
      const Trajectory& tr = ds.subject(i);
      std::vector<int> c_hist, r_hist, s_hist;
      for (int m = 0; m <= t; ++m) {
        for (std::size_t ci = 0; ci < tr.L[static_cast<std::size_t>(m)].size(); ++ci) {
          bool in_mask = cont.regime->c_mask.empty() ||
                         std::find(cont.regime->c_mask.begin(), cont.regime->c_mask.end(),
                                   static_cast<int>(ci)) != cont.regime->c_mask.end();
          if (in_mask) c_hist.push_back(tr.L[static_cast<std::size_t>(m)][static_cast<std::size_t>(ci)]);
        }
        r_hist.push_back(tr.R[static_cast<std::size_t>(m)]);
        if (m < t) s_hist.push_back(tr.S[static_cast<std::size_t>(m)]);
      }
      return cont.regime->action(t, Regime::reduced_key(c_hist, r_hist, s_hist));
    }
    return optimal_action(ds, i, t, cont.constraint);
  }

  // Delta_t = Y - gamma_t(obs) + sum_{m>t} {gamma_m(continuation) - gamma_m(obs)}
  double delta(const Dataset& ds, int i, int t, const Continuation& cont) const {
    const Trajectory& tr = ds.subject(i);
    double d = tr.y - blip(ds, i, t, tr.S[static_cast<std::size_t>(t)], tr.A[static_cast<std::size_t>(t)]);
    for (int m = t + 1; m <= K(); ++m) {
      Action cm = continuation_action(ds, i, m, cont);
      d += blip(ds, i, m, cm.s, cm.a) -
           blip(ds, i, m, tr.S[static_cast<std::size_t>(m)], tr.A[static_cast<std::size_t>(m)]);
    }
    return d;
  }

  // Per-subject value contributions Delta_0 + gamma_0(policy action at t=0).
  std::vector<double> value_contributions(const Dataset& ds, const std::vector<int>& idx,
                                          const Continuation& cont) const {
    std::vector<double> out;
    out.reserve(idx.size());
    for (int i : idx) {
      Action a0 = continuation_action(ds, i, 0, cont);
      out.push_back(delta(ds, i, 0, cont) + blip(ds, i, 0, a0.s, a0.a));
    }
    return out;
  }
};

inline double eval_blip(const FittedSnmm& fit, const Dataset& ds, int i, int t, int s, int a) {
  return fit.blip(ds, i, t, s, a);
}

inline double compute_delta(const FittedSnmm& fit, const Dataset& ds, int i, int t,
                            const Continuation& cont = {}) {
  return fit.delta(ds, i, t, cont);
}

// theta-hat = P_n[Delta_0 + gamma_0(policy)] over idx
inline double snmm_value(const FittedSnmm& fit, const Dataset& ds, const std::vector<int>& idx,
                         const Continuation& cont = {}) {
  return mean(fit.value_contributions(ds, idx, cont));
}

// ---------------------------------------------------------------------------
// Closed-form backward g-estimation. Nuisance conditional means E[.|H-bar_t]
// are stratum means over fit_idx; the estimating equation is averaged over
// eval_idx. Downstream parameters enter as already-estimated plug-ins, so
// each stage solves one linear system.
// ---------------------------------------------------------------------------

struct GEstimateOptions {
  Continuation continuation;  // policy inside Delta corrections
};

inline FittedSnmm g_estimate(const Dataset& ds, const std::vector<int>& fit_idx,
                             const std::vector<int>& eval_idx, const BlipSpec& spec,
                             const QSpec& q_spec, const GEstimateOptions& opts = {}) {
  spec.validate();
  const int K = ds.K();
  if (static_cast<int>(spec.stages.size()) != K + 1)
    throw Error(ErrorCode::kUsage, "blip spec horizon mismatch");
  const int n = ds.n();

  FittedSnmm fit;
  fit.spec = spec;
  fit.q_spec = q_spec;
  fit.psi.stages.assign(static_cast<std::size_t>(K + 1), {});
  fit.stratum_actions.assign(static_cast<std::size_t>(K + 1), {});
  fit.action_grid.assign(static_cast<std::size_t>(K + 1), {});
  for (int t = 0; t <= K; ++t) {
    for (auto [s, a] : ds.action_pairs(t)) fit.action_grid[static_cast<std::size_t>(t)].push_back({s, a});
    // per-stratum observed pairs from the fit set
    auto& sa = fit.stratum_actions[static_cast<std::size_t>(t)];
    for (int i : fit_idx) {
      const Trajectory& tr = ds.subject(i);
      Action p{tr.S[static_cast<std::size_t>(t)], tr.A[static_cast<std::size_t>(t)]};
      if (p == Action{0, 0}) continue;
      auto& vec = sa[fit.stage_hist_key(ds, i, t)];
      if (std::find(vec.begin(), vec.end(), p) == vec.end()) vec.push_back(p);
    }
    for (auto& [_, vec] : sa)
      std::sort(vec.begin(), vec.end(),
                [](const Action& x, const Action& y) { return x.s != y.s ? x.s < y.s : x.a < y.a; });
  }

  // running future-blip correction sum_{m>t} {gamma_m(cont) - gamma_m(obs)}
  std::vector<double> corr(static_cast<std::size_t>(n), 0.0);

  for (int t = K; t >= 0; --t) {
    const StageSpec& st = spec.stages[static_cast<std::size_t>(t)];

    if (st.saturated) {
      // per-stratum closed form: within each selected-history stratum,
      // regress centered Y-tilde on centered action indicators
      struct Block {
        bool init = false;
        std::vector<Action> pairs;
        std::vector<double> freq;  // fit-set relative frequency per pair
        double fit_count = 0.0;
        double ysum = 0.0;  // fit-set sum of ytilde
        Matrix g;
        std::vector<double> rhs;
        bool has_eval = false;
      };
      std::map<std::vector<int>, Block> blocks;
      // pass 1 (fit set): frequencies and ytilde means
      for (int i : fit_idx) {
        const Trajectory& tr = ds.subject(i);
        std::vector<int> key = fit.stage_hist_key(ds, i, t);
        Block& b = blocks[key];
        if (!b.init) {
          b.init = true;
          auto it = fit.stratum_actions[static_cast<std::size_t>(t)].find(key);
          if (it != fit.stratum_actions[static_cast<std::size_t>(t)].end()) b.pairs = it->second;
          b.freq.assign(b.pairs.size(), 0.0);
        }
        double ytilde = tr.y + corr[static_cast<std::size_t>(i)];
        b.fit_count += 1.0;
        b.ysum += ytilde;
        Action p{tr.S[static_cast<std::size_t>(t)], tr.A[static_cast<std::size_t>(t)]};
        for (std::size_t j = 0; j < b.pairs.size(); ++j)
          if (b.pairs[j] == p) b.freq[j] += 1.0;
      }
      for (auto& [_, b] : blocks) {
        for (double& f : b.freq) f /= b.fit_count;
        b.g = Matrix(b.pairs.size(), b.pairs.size());
        b.rhs.assign(b.pairs.size(), 0.0);
      }
      // pass 2 (eval set): accumulate the estimating equation
      for (int i : eval_idx) {
        const Trajectory& tr = ds.subject(i);
        std::vector<int> key = fit.stage_hist_key(ds, i, t);
        auto bit = blocks.find(key);
        if (bit == blocks.end())
          throw Error(ErrorCode::kEmptyStratum, "blip stratum unseen in fit set at t=" + std::to_string(t));
        Block& b = bit->second;
        b.has_eval = true;
        double yc = (tr.y + corr[static_cast<std::size_t>(i)]) - b.ysum / b.fit_count;
        Action p{tr.S[static_cast<std::size_t>(t)], tr.A[static_cast<std::size_t>(t)]};
        for (std::size_t j = 0; j < b.pairs.size(); ++j) {
          double cj = (b.pairs[j] == p ? 1.0 : 0.0) - b.freq[j];
          b.rhs[j] += cj * yc;
          for (std::size_t k = 0; k < b.pairs.size(); ++k)
            b.g(j, k) += cj * ((b.pairs[k] == p ? 1.0 : 0.0) - b.freq[k]);
        }
      }
      StagePsi& sp = fit.psi.stages[static_cast<std::size_t>(t)];
      sp.saturated = true;
      for (auto& [key, b] : blocks) {
        if (b.pairs.empty()) continue;  // stratum with only the reference action
        if (!b.has_eval) continue;      // nothing to estimate against
        std::vector<double> psi_block;
        try {
          psi_block = solve_lu(b.g, b.rhs, ErrorCode::kSingularSystem);
        } catch (const Error& e) {
          throw Error(ErrorCode::kSingularSystem,
                      std::string("stage t=") + std::to_string(t) + ": " + e.what());
        }
        for (std::size_t j = 0; j < b.pairs.size(); ++j)
          sp.sat[SaturatedKey{key, b.pairs[j].s, b.pairs[j].a}] = psi_block[j];
      }
    } else {
      const std::vector<LinearFeature>& vfeat = st.features;
      const std::vector<LinearFeature>& qfeat =
          q_spec.stages[static_cast<std::size_t>(t)] ? *q_spec.stages[static_cast<std::size_t>(t)] : st.features;
      if (qfeat.size() != vfeat.size())
        throw Error(ErrorCode::kUsage, "q_t dimension must match blip dimension");
      const std::size_t d = vfeat.size();
      // fit-set stratum means of (v, q, ytilde) over full histories
      struct MeanCell {
        std::vector<double> v, q;
        double y = 0.0;
        double count = 0.0;
      };
      std::map<int, MeanCell> cells;  // by dense full-history id
      auto eval_feats = [&](const std::vector<LinearFeature>& feats, int i, int s, int a,
                            std::vector<double>* out) {
        out->resize(feats.size());
        for (std::size_t j = 0; j < feats.size(); ++j) (*out)[j] = feats[j].eval(ds, i, s, a);
      };
      std::vector<double> vbuf, qbuf;
      for (int i : fit_idx) {
        const Trajectory& tr = ds.subject(i);
        int hid = ds.hist_id(t, i);
        MeanCell& c = cells[hid];
        if (c.v.empty()) {
          c.v.assign(d, 0.0);
          c.q.assign(d, 0.0);
        }
        int s = tr.S[static_cast<std::size_t>(t)], a = tr.A[static_cast<std::size_t>(t)];
        eval_feats(vfeat, i, s, a, &vbuf);
        eval_feats(qfeat, i, s, a, &qbuf);
        for (std::size_t j = 0; j < d; ++j) {
          c.v[j] += vbuf[j];
          c.q[j] += qbuf[j];
        }
        c.y += tr.y + corr[static_cast<std::size_t>(i)];
        c.count += 1.0;
      }
      Matrix g(d, d);
      std::vector<double> rhs(d, 0.0);
      for (int i : eval_idx) {
        const Trajectory& tr = ds.subject(i);
        auto cit = cells.find(ds.hist_id(t, i));
        if (cit == cells.end())
          throw Error(ErrorCode::kEmptyStratum, "history stratum unseen in fit set at t=" + std::to_string(t));
        const MeanCell& c = cit->second;
        int s = tr.S[static_cast<std::size_t>(t)], a = tr.A[static_cast<std::size_t>(t)];
        eval_feats(vfeat, i, s, a, &vbuf);
        eval_feats(qfeat, i, s, a, &qbuf);
        double yc = (tr.y + corr[static_cast<std::size_t>(i)]) - c.y / c.count;
        for (std::size_t j = 0; j < d; ++j) {
          double cj = qbuf[j] - c.q[j] / c.count;
          rhs[j] += cj * yc;
          for (std::size_t k = 0; k < d; ++k) g(j, k) += cj * (vbuf[k] - c.v[k] / c.count);
        }
      }
      StagePsi& sp = fit.psi.stages[static_cast<std::size_t>(t)];
      sp.saturated = false;
      sp.beta = solve_lu(g, rhs, ErrorCode::kSingularSystem);
    }

    // fold this stage's blip into the running corrections (all subjects, so
    // fit-set conditional means at earlier stages see the same Y-tilde)
    for (int i = 0; i < n; ++i) {
      const Trajectory& tr = ds.subject(i);
      Action cm = fit.continuation_action(ds, i, t, opts.continuation);
      corr[static_cast<std::size_t>(i)] +=
          fit.blip(ds, i, t, cm.s, cm.a) -
          fit.blip(ds, i, t, tr.S[static_cast<std::size_t>(t)], tr.A[static_cast<std::size_t>(t)]);
    }
  }
  return fit;
}

inline FittedSnmm g_estimate(const Dataset& ds, const BlipSpec& spec, const QSpec& q_spec,
                             const GEstimateOptions& opts = {}) {
  auto idx = all_indices(ds);
  return g_estimate(ds, idx, idx, spec, q_spec, opts);
}

// Decision table of the fitted model's (possibly constrained) argmax over all
// observed strata, keyed on the reduced history (covariates, results,
// treatments); A-history is recoverable from the result pattern.
inline Regime extract_regime(const FittedSnmm& fit, const Dataset& ds,
                             ActionConstraint constraint = ActionConstraint::kFree) {
  Regime g;
  g.K = ds.K();
  g.reduced_history = true;
  g.tables.assign(static_cast<std::size_t>(g.K + 1), {});
  for (int t = 0; t <= g.K; ++t) {
    for (int i = 0; i < ds.n(); ++i) {
      const Trajectory& tr = ds.subject(i);
      std::vector<int> c_hist, r_hist, s_hist;
      for (int m = 0; m <= t; ++m) {
        for (int v : tr.L[static_cast<std::size_t>(m)]) c_hist.push_back(v);
        r_hist.push_back(tr.R[static_cast<std::size_t>(m)]);
        if (m < t) s_hist.push_back(tr.S[static_cast<std::size_t>(m)]);
      }
      std::vector<int> key = Regime::reduced_key(c_hist, r_hist, s_hist);
      auto& tab = g.tables[static_cast<std::size_t>(t)];
      if (tab.count(key)) continue;
      tab[key] = fit.optimal_action(ds, i, t, constraint);
    }
  }
  return g;
}

}  // namespace optregime
