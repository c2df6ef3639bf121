#pragma once

#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "optregime/common.hpp"
#include "optregime/nde_projection.hpp"
#include "optregime/nuisance.hpp"
#include "optregime/snmm.hpp"
#include "optregime/trajectory.hpp"

namespace optregime {

enum class Method {
  kIpw,
  kNdeIpw,
  kIpwProjected,
  kNdeIpwProjected,
  kSnmm,
  kSnmmProjected,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kIpw: return "ipw";
    case Method::kNdeIpw: return "nde-ipw";
    case Method::kIpwProjected: return "ipw-projected";
    case Method::kNdeIpwProjected: return "nde-ipw-projected";
    case Method::kSnmm: return "snmm";
    case Method::kSnmmProjected: return "snmm-projected";
  }
  return "?";
}

inline std::optional<Method> method_from_name(const std::string& s) {
  for (Method m : {Method::kIpw, Method::kNdeIpw, Method::kIpwProjected, Method::kNdeIpwProjected,
                   Method::kSnmm, Method::kSnmmProjected})
    if (s == method_name(m)) return m;
  return std::nullopt;
}

struct ValueEstimate {
  Method method = Method::kIpw;
  double theta = 0.0;
  std::vector<double> contributions;  // per eval subject (plain estimator's)
  std::optional<double> sd_boot;
  int n = 0;
  int n_uncensored = 0;

  std::string to_json() const {
    std::ostringstream os;
    os << "{\"method\":\"" << method_name(method) << "\",\"theta\":" << theta << ",\"sd_boot\":";
    if (sd_boot)
      os << *sd_boot;
    else
      os << "null";
    os << ",\"n\":" << n << ",\"n_uncensored\":" << n_uncensored << "}";
    return os.str();
  }
};

// V_ipw contribution of one subject: zero when censored, else Y over the full
// testing-and-treatment propensity along the regime path.
inline double v_ipw(const Dataset& ds, const NuisanceSet& ns, int i, const Regime& g) {
  const Trajectory& tr = ds.subject(i);
  RegimeEvaluation ev = apply_regime(tr, g);
  if (ev.standard.censored) return 0.0;
  const int K = ds.K();
  double denom = 1.0;
  for (int t = 0; t <= K; ++t) {
    double pim = ns.pi(ds, t, i);
    double pa = ev.actions[static_cast<std::size_t>(t)].a == 1 ? pim : 1.0 - pim;
    double psv = ns.p_s(ds, t, i, tr.S[static_cast<std::size_t>(t)]);
    if (pa < ns.positivity_floor() || psv < ns.positivity_floor())
      throw Error(ErrorCode::kZeroWeight, "propensity below positivity floor");
    denom *= pa * psv;
  }
  return tr.y / denom;
}

// V_nde-ipw contribution with the testing-cost add-back Y_g; zero only for
// NDE-censored subjects (early retest keeps contributing).
inline double v_nde_ipw(const Dataset& ds, const NuisanceSet& ns, int i, const Regime& g,
                        const CostFn& cost) {
  const Trajectory& tr = ds.subject(i);
  RegimeEvaluation ev = apply_regime(tr, g);
  if (ev.nde.censored) return 0.0;
  const int K = ds.K();
  double denom = 1.0;
  for (int t = 0; t <= K; ++t) {
    if (ev.actions[static_cast<std::size_t>(t)].a == 1) {
      double pim = ns.pi(ds, t, i);
      if (pim < ns.positivity_floor())
        throw Error(ErrorCode::kZeroWeight, "Pi below positivity floor");
      denom *= pim;  // indicator 1{A_t=1} holds: A-mismatch would NDE-censor
    }
    double psv = ns.p_s(ds, t, i, tr.S[static_cast<std::size_t>(t)]);
    if (psv < ns.positivity_floor())
      throw Error(ErrorCode::kZeroWeight, "p(S|H) below positivity floor");
    denom *= psv;
  }
  double y_g = tr.y;
  if (cost) {
    std::vector<int> c_hist, r_hist, s_hist;
    for (int t = 0; t < K; ++t) {
      for (int v : tr.L[static_cast<std::size_t>(t)]) c_hist.push_back(v);
      r_hist.push_back(tr.R[static_cast<std::size_t>(t)]);
      s_hist.push_back(tr.S[static_cast<std::size_t>(t)]);
      if (tr.A[static_cast<std::size_t>(t)] == 1 && ev.actions[static_cast<std::size_t>(t)].a == 0)
        y_g += cost(t, c_hist, r_hist, s_hist);
    }
  }
  return y_g / denom;
}

struct EstimateOptions {
  BasisSpec basis;            // projected methods
  CostFn cost;                // NDE-IPW cost add-back (Remark-4 style)
  BlipSpec blip;              // SNMM methods; empty = saturated full history
  QSpec q;                    // defaults to blip features
  NuisanceOptions nuisance;   // positivity floor / smoothing
  const NuisanceSet* oracle_nuisances = nullptr;  // simulation studies
};

// Value of a fixed regime on ds restricted to eval_idx; nuisance tables and
// basis knots come from fit_idx. Projected methods subtract the Omega
// projection of the empirical influence function (centered IPW-form
// contributions residualized against the ancillary scores).
inline ValueEstimate estimate_value(const Dataset& ds, const std::vector<int>& fit_idx,
                                    const std::vector<int>& eval_idx, const Regime& regime,
                                    Method method, const EstimateOptions& opts = {}) {
  NuisanceSet fitted;
  const NuisanceSet* ns = opts.oracle_nuisances;
  if (!ns) {
    fitted = NuisanceSet::fit(ds, fit_idx, opts.nuisance);
    ns = &fitted;
  }

  ValueEstimate est;
  est.method = method;
  est.n = static_cast<int>(eval_idx.size());

  auto ipw_contribs = [&](bool nde) {
    std::vector<double> c;
    c.reserve(eval_idx.size());
    for (int i : eval_idx) {
      double v = nde ? v_nde_ipw(ds, *ns, i, regime, opts.cost) : v_ipw(ds, *ns, i, regime);
      if (v != 0.0) ++est.n_uncensored;
      c.push_back(v);
    }
    return c;
  };

  switch (method) {
    case Method::kIpw:
    case Method::kIpwProjected: {
      est.contributions = ipw_contribs(false);
      est.theta = mean(est.contributions);
      if (method == Method::kIpwProjected) {
        OmegaProjector proj(ds, fit_idx, eval_idx, opts.basis, *ns);
        est.theta -= proj.adjustment(est.contributions);
      }
      break;
    }
    case Method::kNdeIpw:
    case Method::kNdeIpwProjected: {
      est.contributions = ipw_contribs(true);
      est.theta = mean(est.contributions);
      if (method == Method::kNdeIpwProjected) {
        OmegaProjector proj(ds, fit_idx, eval_idx, opts.basis, *ns);
        est.theta -= proj.adjustment(est.contributions);
      }
      break;
    }
    case Method::kSnmm:
    case Method::kSnmmProjected: {
      BlipSpec blip = opts.blip.stages.empty() ? BlipSpec::saturated(ds.K()) : opts.blip;
      QSpec q = opts.q.stages.empty() ? QSpec::defaults(ds.K()) : opts.q;
      GEstimateOptions go;
      go.continuation.regime = &regime;
      FittedSnmm fit = g_estimate(ds, fit_idx, eval_idx, blip, q, go);
      est.contributions = fit.value_contributions(ds, eval_idx, go.continuation);
      est.theta = mean(est.contributions);
      for (int i : eval_idx)
        if (!apply_regime(ds.subject(i), regime).standard.censored) ++est.n_uncensored;
      if (method == Method::kSnmmProjected) {
        // same projection vector as the IPW route: the two estimators share
        // one empirical influence function, which keeps them algebraically
        // identical after adjustment
        int n_unc = est.n_uncensored;
        std::vector<double> ipw_c = ipw_contribs(false);
        est.n_uncensored = n_unc;
        OmegaProjector proj(ds, fit_idx, eval_idx, opts.basis, *ns);
        est.theta -= proj.adjustment(ipw_c);
      }
      break;
    }
  }
  return est;
}

inline ValueEstimate estimate_value(const Dataset& ds, const Regime& regime, Method method,
                                    const EstimateOptions& opts = {}) {
  auto idx = all_indices(ds);
  return estimate_value(ds, idx, idx, regime, method, opts);
}

// ---------------------------------------------------------------------------
// Value of information. The optimal and no-testing regimes come from the
// (optionally NDE-adjusted) fitted opt-SNMM; values are the SNMM value
// estimators, projected when adjusted. Conditioning restricts everything to
// a baseline stratum.
// ---------------------------------------------------------------------------

struct VoiOptions {
  bool adjust_nde = false;
  BasisSpec basis;
  CostFn cost;
  NuisanceOptions nuisance;
  // restrict to subjects with L0 component cond_component == cond_level
  std::optional<std::pair<int, int>> conditioning;
};

struct VoiResult {
  double value_opt = 0.0;
  double value_no_test = 0.0;
  double voi = 0.0;
  Regime regime_opt;
  Regime regime_no_test;
  PsiVector psi;  // the (possibly adjusted) parameters behind the selection
};

inline std::vector<int> conditioned_indices(const Dataset& ds,
                                            const std::optional<std::pair<int, int>>& cond) {
  std::vector<int> idx;
  for (int i = 0; i < ds.n(); ++i) {
    if (cond) {
      const auto& l0 = ds.subject(i).L[0];
      if (cond->first >= static_cast<int>(l0.size()))
        throw Error(ErrorCode::kUsage, "conditioning component out of range");
      if (l0[static_cast<std::size_t>(cond->first)] != cond->second) continue;
    }
    idx.push_back(i);
  }
  if (idx.empty()) throw Error(ErrorCode::kUsage, "conditioning stratum is empty");
  return idx;
}

inline VoiResult voi(const Dataset& ds, const BlipSpec& blip, const QSpec& q,
                     const VoiOptions& opts = {}) {
  VoiResult out;
  FittedSnmm fit;
  NuisanceSet ns = NuisanceSet::fit(ds, all_indices(ds), opts.nuisance);
  auto idx_all = all_indices(ds);
  if (opts.adjust_nde) {
    fit = adjusted_g_estimate(ds, idx_all, idx_all, blip, q, opts.basis, ns);
  } else {
    fit = g_estimate(ds, idx_all, idx_all, blip, q);
  }
  out.psi = fit.psi;
  out.regime_opt = extract_regime(fit, ds, ActionConstraint::kFree);
  out.regime_no_test = extract_regime(fit, ds, ActionConstraint::kNoTest);

  std::vector<int> idx = conditioned_indices(ds, opts.conditioning);
  EstimateOptions eopt;
  eopt.basis = opts.basis;
  eopt.cost = opts.cost;
  eopt.nuisance = opts.nuisance;
  Method value_method = opts.adjust_nde ? Method::kSnmmProjected : Method::kSnmm;
  out.value_opt = estimate_value(ds, idx, idx, out.regime_opt, value_method, eopt).theta;
  out.value_no_test = estimate_value(ds, idx, idx, out.regime_no_test, value_method, eopt).theta;
  out.voi = out.value_opt - out.value_no_test;
  return out;
}

}  // namespace optregime
