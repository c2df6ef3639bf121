#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "optregime/common.hpp"
#include "optregime/nuisance.hpp"
#include "optregime/snmm.hpp"
#include "optregime/trajectory.hpp"

namespace optregime {

// ---------------------------------------------------------------------------
// Outcome basis phi(Y^d) and the per-t column blocks
// b*_t = (phi_1(Yd) I_t^T, ..., phi_xi(Yd) I_t^T)^T with I_t the indicator
// vector over observed downstream-treatment patterns S-underbar_t.
// ---------------------------------------------------------------------------

enum class BasisFamily { kNaturalSpline, kPolynomial, kIndicator };
enum class HistoryCoefFamily { kSaturated, kConstant };
enum class TForm { kProjectionForm, kEtaForm };
enum class ProjectionMethod { kRecursive, kPooledOls };

struct BasisSpec {
  int xi = 6;
  BasisFamily family = BasisFamily::kNaturalSpline;
  HistoryCoefFamily d_family = HistoryCoefFamily::kSaturated;
};

// phi evaluation with knots/levels frozen from a fit sample
class OutcomeBasis {
 public:
  static OutcomeBasis build(const std::vector<double>& yd_fit, const BasisSpec& spec) {
    OutcomeBasis b;
    b.family_ = spec.family;
    b.xi_ = spec.xi;
    if (yd_fit.empty()) throw Error(ErrorCode::kUsage, "empty fit sample for basis");
    if (spec.family == BasisFamily::kIndicator) {
      std::vector<double> lv = yd_fit;
      std::sort(lv.begin(), lv.end());
      lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
      b.levels_ = lv;
      b.xi_ = static_cast<int>(lv.size());
      return b;
    }
    if (spec.xi < 1) throw Error(ErrorCode::kUsage, "xi >= 1 required");
    if (spec.family == BasisFamily::kPolynomial) {
      b.center_ = mean(yd_fit);
      double sd = sample_sd(yd_fit);
      b.scale_ = (sd > 0 && std::isfinite(sd)) ? sd : 1.0;
      return b;
    }
    // natural cubic spline: xi columns need xi+1 knots; boundary at min/max,
    // internal at equally spaced sample quantiles
    std::vector<double> sorted = yd_fit;
    std::sort(sorted.begin(), sorted.end());
    int nknots = spec.xi + 1;
    b.knots_.resize(static_cast<std::size_t>(nknots));
    for (int k = 0; k < nknots; ++k) {
      double q = static_cast<double>(k) / static_cast<double>(nknots - 1);
      double pos = q * static_cast<double>(sorted.size() - 1);
      std::size_t lo = static_cast<std::size_t>(pos);
      double frac = pos - static_cast<double>(lo);
      double v = sorted[lo];
      if (lo + 1 < sorted.size()) v = v * (1 - frac) + sorted[lo + 1] * frac;
      b.knots_[static_cast<std::size_t>(k)] = v;
    }
    for (int k = 1; k < nknots; ++k)
      if (!(b.knots_[static_cast<std::size_t>(k)] > b.knots_[static_cast<std::size_t>(k - 1)]))
        throw Error(ErrorCode::kDegenerateBasis, "coincident spline knots (is Y discrete?)");
    return b;
  }

  int xi() const { return xi_; }

  void eval(double yd, std::vector<double>* out) const {
    out->resize(static_cast<std::size_t>(xi_));
    switch (family_) {
      case BasisFamily::kIndicator: {
        for (int j = 0; j < xi_; ++j)
          (*out)[static_cast<std::size_t>(j)] = (yd == levels_[static_cast<std::size_t>(j)]) ? 1.0 : 0.0;
        return;
      }
      case BasisFamily::kPolynomial: {
        double z = (yd - center_) / scale_;
        double p = 1.0;
        for (int j = 0; j < xi_; ++j) {
          p *= z;
          (*out)[static_cast<std::size_t>(j)] = p;
        }
        return;
      }
      case BasisFamily::kNaturalSpline: {
        // N_1 = x, N_{k+1} = d_k - d_{K-1}, d_k = [(x-kn_k)_+^3 - (x-kn_last)_+^3]/(kn_last - kn_k)
        const auto& kn = knots_;
        std::size_t Km = kn.size();
        auto dk = [&](std::size_t k, double x) {
          auto cube = [](double v) { return v > 0 ? v * v * v : 0.0; };
          return (cube(x - kn[k]) - cube(x - kn[Km - 1])) / (kn[Km - 1] - kn[k]);
        };
        (*out)[0] = yd;
        for (std::size_t k = 0; k + 2 < Km; ++k)
          (*out)[k + 1] = dk(k, yd) - dk(Km - 2, yd);
        return;
      }
    }
  }

 private:
  BasisFamily family_ = BasisFamily::kNaturalSpline;
  int xi_ = 0;
  std::vector<double> knots_;
  std::vector<double> levels_;
  double center_ = 0.0, scale_ = 1.0;
};

// Evaluated b*_t block: |idx| x (xi * n_patterns), column (j, pat) is
// phi_j(Yd) * 1{S-underbar_t == pattern}.
struct BasisColumns {
  int t = 0;
  Matrix values;                           // rows follow idx order
  std::vector<std::vector<int>> patterns;  // downstream-treatment patterns
  int xi = 0;
};

inline BasisColumns build_basis_columns(const Dataset& ds, const std::vector<int>& fit_idx,
                                        const std::vector<int>& idx, const OutcomeBasis& phi,
                                        int t) {
  const int K = ds.K();
  auto pattern_of = [&](int i) {
    std::vector<int> pat;
    for (int m = t; m <= K; ++m) pat.push_back(ds.subject(i).S[static_cast<std::size_t>(m)]);
    return pat;
  };
  std::map<std::vector<int>, int> pat_ids;
  for (int i : fit_idx) pat_ids.emplace(pattern_of(i), 0);
  {
    int next = 0;
    for (auto& [_, id] : pat_ids) id = next++;
  }
  BasisColumns cols;
  cols.t = t;
  cols.xi = phi.xi();
  cols.patterns.resize(pat_ids.size());
  for (const auto& [pat, id] : pat_ids) cols.patterns[static_cast<std::size_t>(id)] = pat;
  const int npat = static_cast<int>(pat_ids.size());
  cols.values = Matrix(idx.size(), static_cast<std::size_t>(phi.xi() * npat));
  std::vector<double> buf;
  for (std::size_t r = 0; r < idx.size(); ++r) {
    int i = idx[r];
    phi.eval(ds.subject(i).yd, &buf);
    auto it = pat_ids.find(pattern_of(i));
    if (it == pat_ids.end()) continue;  // pattern unseen in fit: all-zero row
    int pid = it->second;
    for (int j = 0; j < phi.xi(); ++j)
      cols.values(r, static_cast<std::size_t>(j * npat + pid)) = buf[static_cast<std::size_t>(j)];
  }
  // degenerate-basis guard: phi columns collinear on the fit sample
  if (phi.xi() > 1) {
    Matrix gram(static_cast<std::size_t>(phi.xi()), static_cast<std::size_t>(phi.xi()));
    std::vector<double> mu(static_cast<std::size_t>(phi.xi()), 0.0);
    for (int i : fit_idx) {
      phi.eval(ds.subject(i).yd, &buf);
      for (int j = 0; j < phi.xi(); ++j) mu[static_cast<std::size_t>(j)] += buf[static_cast<std::size_t>(j)];
    }
    for (double& m : mu) m /= static_cast<double>(fit_idx.size());
    for (int i : fit_idx) {
      phi.eval(ds.subject(i).yd, &buf);
      for (int j = 0; j < phi.xi(); ++j)
        for (int k = 0; k < phi.xi(); ++k)
          gram(static_cast<std::size_t>(j), static_cast<std::size_t>(k)) +=
              (buf[static_cast<std::size_t>(j)] - mu[static_cast<std::size_t>(j)]) *
              (buf[static_cast<std::size_t>(k)] - mu[static_cast<std::size_t>(k)]);
    }
    try {
      std::vector<double> probe(static_cast<std::size_t>(phi.xi()), 1.0);
      solve_sym(gram, probe, /*allow_ridge=*/false, ErrorCode::kDegenerateBasis);
    } catch (const Error&) {
      throw Error(ErrorCode::kDegenerateBasis, "phi columns collinear on the sample");
    }
  }
  return cols;
}

// ---------------------------------------------------------------------------
// T_{b,t} construction. Both forms share the eta-recursion tables fitted on
// fit_idx; PROJECTION_FORM assembles eq-style conditional-residual pieces from
// per-m group means of D, ETA_FORM uses the telescoped weight identity. On
// saturated in-sample fits the two agree to float precision.
// ---------------------------------------------------------------------------

struct TMatrix {
  int t = 0;
  Matrix values;  // |idx| x delta_t
  TForm form = TForm::kEtaForm;
};

// optional misspecification hook for the double-robustness tests
struct TOverrides {
  // warp applied to every eta_k(stratum, s) value: (k, eta) -> eta'
  std::function<double(int, double)> eta_warp;
};

// phi supplied alongside cols so b can be evaluated on both index sets.
inline TMatrix construct_T(const Dataset& ds, const std::vector<int>& fit_idx,
                           const std::vector<int>& idx, const OutcomeBasis& phi,
                           const BasisColumns& cols, const NuisanceSet& ns, TForm form,
                           const TOverrides& ovr = {}) {
  const int K = ds.K();
  const int t = cols.t;
  const int npat = static_cast<int>(cols.patterns.size());
  const std::size_t ncol = cols.values.cols();

  std::map<std::vector<int>, int> pat_ids;
  for (int p = 0; p < npat; ++p) pat_ids[cols.patterns[static_cast<std::size_t>(p)]] = p;
  auto b_value = [&](int i, std::size_t col, std::vector<double>& phibuf) -> double {
    int j = static_cast<int>(col) / npat;
    int pid = static_cast<int>(col) % npat;
    const Trajectory& tr = ds.subject(i);
    const std::vector<int>& pat = cols.patterns[static_cast<std::size_t>(pid)];
    for (int m = t; m <= K; ++m)
      if (tr.S[static_cast<std::size_t>(m)] != pat[static_cast<std::size_t>(m - t)]) return 0.0;
    phi.eval(tr.yd, &phibuf);
    return phibuf[static_cast<std::size_t>(j)];
  };

  // nuisance caches
  const int n = ds.n();
  std::vector<double> pi_t(static_cast<std::size_t>(n), 0.0);
  std::vector<std::vector<double>> p_obs(static_cast<std::size_t>(K + 1),
                                         std::vector<double>(static_cast<std::size_t>(n), 1.0));
  {
    std::vector<char> touched(static_cast<std::size_t>(n), 0);
    auto touch = [&](int i) {
      if (touched[static_cast<std::size_t>(i)]) return;
      touched[static_cast<std::size_t>(i)] = 1;
      pi_t[static_cast<std::size_t>(i)] = ns.pi(ds, t, i);
      for (int m = t + 1; m <= K; ++m) {
        double p = ns.p_s(ds, m, i, ds.subject(i).S[static_cast<std::size_t>(m)]);
        if (p < ns.positivity_floor())
          throw Error(ErrorCode::kZeroWeight, "p(S|H) below positivity floor");
        p_obs[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)] = p;
      }
    };
    for (int i : fit_idx) touch(i);
    for (int i : idx) touch(i);
  }

  // eta recursion per column: eta_K(hK,SK) = E[b|hK,SK];
  // y_{k}(hk) = sum_s eta_k(hk,s); eta_{k-1}(h,S) = E[y_k|h,S] down to k=t.
  // Tables keyed by (dense hist id, s level); fitted on fit_idx.
  struct StageTable {
    // per (hist id, s level): mean value
    std::map<std::pair<int, int>, double> mean;
    std::map<int, std::vector<int>> levels;  // observed s levels per hist id
  };

  TMatrix out;
  out.t = t;
  out.form = form;
  out.values = Matrix(idx.size(), ncol);

  std::vector<double> phibuf;
  for (std::size_t col = 0; col < ncol; ++col) {
    // ---- fit the eta tables ----
    // eta_k stored as map (hist,s)->value for k = t..K
    std::vector<std::map<std::pair<int, int>, double>> eta(static_cast<std::size_t>(K + 1));
    std::vector<std::map<int, std::vector<int>>> lv(static_cast<std::size_t>(K + 1));
    {
      // k = K
      std::map<std::pair<int, int>, std::pair<double, double>> acc;  // sum,count
      for (int i : fit_idx) {
        int hid = ds.hist_id(K, i);
        int s = ds.subject(i).S[static_cast<std::size_t>(K)];
        auto& c = acc[{hid, s}];
        c.first += b_value(i, col, phibuf);
        c.second += 1.0;
      }
      for (auto& [key, c] : acc) {
        double v = c.first / c.second;
        if (ovr.eta_warp) v = ovr.eta_warp(K, v);
        eta[static_cast<std::size_t>(K)][key] = v;
        auto& L = lv[static_cast<std::size_t>(K)][key.first];
        if (std::find(L.begin(), L.end(), key.second) == L.end()) L.push_back(key.second);
      }
    }
    for (int k = K - 1; k >= t; --k) {
      std::map<std::pair<int, int>, std::pair<double, double>> acc;
      for (int i : fit_idx) {
        // y_{k+1}(h_{k+1}) = sum over observed s levels at k+1 of eta_{k+1}
        int hid1 = ds.hist_id(k + 1, i);
        const auto& L = lv[static_cast<std::size_t>(k + 1)];
        auto lit = L.find(hid1);
        if (lit == L.end()) throw Error(ErrorCode::kEmptyStratum, "eta recursion stratum miss");
        double y = 0.0;
        for (int s : lit->second) {
          auto eit = eta[static_cast<std::size_t>(k + 1)].find({hid1, s});
          if (eit == eta[static_cast<std::size_t>(k + 1)].end())
            throw Error(ErrorCode::kEmptyStratum, "eta recursion cell miss");
          y += eit->second;
        }
        int hid = ds.hist_id(k, i);
        int s = ds.subject(i).S[static_cast<std::size_t>(k)];
        auto& c = acc[{hid, s}];
        c.first += y;
        c.second += 1.0;
      }
      for (auto& [key, c] : acc) {
        double v = c.first / c.second;
        if (ovr.eta_warp) v = ovr.eta_warp(k, v);
        eta[static_cast<std::size_t>(k)][key] = v;
        auto& L = lv[static_cast<std::size_t>(k)][key.first];
        if (std::find(L.begin(), L.end(), key.second) == L.end()) L.push_back(key.second);
      }
    }

    auto eta_at = [&](int k, int i) -> double {
      auto it = eta[static_cast<std::size_t>(k)].find(
          {ds.hist_id(k, i), ds.subject(i).S[static_cast<std::size_t>(k)]});
      if (it == eta[static_cast<std::size_t>(k)].end())
        throw Error(ErrorCode::kEmptyStratum, "eta cell unseen in fit set");
      return it->second;
    };
    auto y_at = [&](int k, int i) -> double {  // y_{k,eta_k}(h_k), k in [t+1, K]
      int hid = ds.hist_id(k, i);
      const auto& L = lv[static_cast<std::size_t>(k)];
      auto lit = L.find(hid);
      if (lit == L.end()) throw Error(ErrorCode::kEmptyStratum, "y stratum unseen in fit set");
      double y = 0.0;
      for (int s : lit->second) y += eta[static_cast<std::size_t>(k)].at({hid, s});
      return y;
    };

    if (form == TForm::kEtaForm) {
      for (std::size_t r = 0; r < idx.size(); ++r) {
        int i = idx[r];
        double amc = ds.subject(i).A[static_cast<std::size_t>(t)] - pi_t[static_cast<std::size_t>(i)];
        double w = 1.0;  // W_{t+1}^{k-1}; empty product at k = t+1
        double sum = 0.0;
        for (int k = t + 1; k <= K + 1; ++k) {
          double yk = (k == K + 1) ? b_value(i, col, phibuf) : y_at(k, i);
          sum += (yk - eta_at(k - 1, i)) / w;
          if (k <= K) w *= p_obs[static_cast<std::size_t>(k)][static_cast<std::size_t>(i)];
        }
        out.values(r, col) = sum * amc;
      }
    } else {
      // PROJECTION_FORM: D - (A_t - Pi_t) * Ehat[b/W | H_t, S_t]
      //                  - sum_{m>t} {Ehat[D|H_m,S_m] - Ehat[D|H_m]}
      // with direct group means of D on fit_idx.
      auto d_value = [&](int i) -> double {
        double w = 1.0;
        for (int m = t + 1; m <= K; ++m)
          w *= p_obs[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)];
        return b_value(i, col, phibuf) / w *
               (ds.subject(i).A[static_cast<std::size_t>(t)] - pi_t[static_cast<std::size_t>(i)]);
      };
      // E[b/W | H_t, S_t] by direct group-by
      std::map<std::pair<int, int>, std::pair<double, double>> bw_acc;
      std::vector<std::map<std::pair<int, int>, std::pair<double, double>>> dm_s(
          static_cast<std::size_t>(K + 1));
      std::vector<std::map<int, std::pair<double, double>>> dm(static_cast<std::size_t>(K + 1));
      for (int i : fit_idx) {
        double w = 1.0;
        for (int m = t + 1; m <= K; ++m)
          w *= p_obs[static_cast<std::size_t>(m)][static_cast<std::size_t>(i)];
        double bw = b_value(i, col, phibuf) / w;
        auto& c = bw_acc[{ds.hist_id(t, i), ds.subject(i).S[static_cast<std::size_t>(t)]}];
        c.first += bw;
        c.second += 1.0;
        double d = bw * (ds.subject(i).A[static_cast<std::size_t>(t)] - pi_t[static_cast<std::size_t>(i)]);
        for (int m = t + 1; m <= K; ++m) {
          auto& cs = dm_s[static_cast<std::size_t>(m)][{ds.hist_id(m, i),
                                                        ds.subject(i).S[static_cast<std::size_t>(m)]}];
          cs.first += d;
          cs.second += 1.0;
          auto& ch = dm[static_cast<std::size_t>(m)][ds.hist_id(m, i)];
          ch.first += d;
          ch.second += 1.0;
        }
      }
      for (std::size_t r = 0; r < idx.size(); ++r) {
        int i = idx[r];
        double amc = ds.subject(i).A[static_cast<std::size_t>(t)] - pi_t[static_cast<std::size_t>(i)];
        auto bit = bw_acc.find({ds.hist_id(t, i), ds.subject(i).S[static_cast<std::size_t>(t)]});
        if (bit == bw_acc.end()) throw Error(ErrorCode::kEmptyStratum, "(H_t,S_t) stratum unseen");
        double v = d_value(i) - amc * (bit->second.first / bit->second.second);
        for (int m = t + 1; m <= K; ++m) {
          auto cs = dm_s[static_cast<std::size_t>(m)].find(
              {ds.hist_id(m, i), ds.subject(i).S[static_cast<std::size_t>(m)]});
          auto ch = dm[static_cast<std::size_t>(m)].find(ds.hist_id(m, i));
          if (cs == dm_s[static_cast<std::size_t>(m)].end() || ch == dm[static_cast<std::size_t>(m)].end())
            throw Error(ErrorCode::kEmptyStratum, "(H_m,S_m) stratum unseen in fit set");
          v -= cs->second.first / cs->second.second - ch->second.first / ch->second.second;
        }
        out.values(r, col) = v;
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Empirical projection onto the ancillary scores:
// Pi[X | Lanc] = sum_m { E[X|H_m,S_m,A_m] - E[X|H_m] }, group means over idx.
// Returns the residual X - Pi[X|Lanc].
// ---------------------------------------------------------------------------

inline std::vector<double> ancillary_residual(const Dataset& ds, const std::vector<int>& idx,
                                              const std::vector<double>& x) {
  const int K = ds.K();
  std::vector<double> res = x;
  for (int m = 0; m <= K; ++m) {
    std::map<std::vector<int>, std::pair<double, double>> full, hist;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      int i = idx[r];
      const Trajectory& tr = ds.subject(i);
      std::vector<int> hk{ds.hist_id(m, i)};
      std::vector<int> fk{ds.hist_id(m, i), tr.S[static_cast<std::size_t>(m)],
                          tr.A[static_cast<std::size_t>(m)]};
      auto& cf = full[fk];
      cf.first += x[r];
      cf.second += 1.0;
      auto& chh = hist[hk];
      chh.first += x[r];
      chh.second += 1.0;
    }
    for (std::size_t r = 0; r < idx.size(); ++r) {
      int i = idx[r];
      const Trajectory& tr = ds.subject(i);
      const auto& cf = full.at({ds.hist_id(m, i), tr.S[static_cast<std::size_t>(m)],
                                tr.A[static_cast<std::size_t>(m)]});
      const auto& chh = hist.at({ds.hist_id(m, i)});
      res[r] -= cf.first / cf.second - chh.first / chh.second;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Projection onto Omega = sum_t { d_t(H_t) T_t } (Theorem-3 recursion or one
// pooled OLS over the expanded columns).
// ---------------------------------------------------------------------------

struct ProjectionFit {
  std::vector<std::vector<double>> fitted;  // one vector per input U
  bool ridged = false;
  // per t, per stratum key: flattened d_t coefficients (row-major |U| x delta_t)
  std::vector<std::map<int, std::vector<double>>> coefficients;

  void dump_json(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw Error(ErrorCode::kIo, "cannot open " + path);
    f << "{\n  \"ridged\": " << (ridged ? "true" : "false") << ",\n  \"stages\": [\n";
    for (std::size_t t = 0; t < coefficients.size(); ++t) {
      f << "    {";
      bool first = true;
      for (const auto& [sid, d] : coefficients[t]) {
        f << (first ? "" : ", ") << "\"" << sid << "\": [";
        for (std::size_t j = 0; j < d.size(); ++j) f << (j ? "," : "") << d[j];
        f << "]";
        first = false;
      }
      f << "}" << (t + 1 < coefficients.size() ? "," : "") << "\n";
    }
    f << "  ]\n}\n";
  }
};

// history_strata[t][r] = group id of row r for d_t(H_t); pass all-zero groups
// for a history-constant d_t.
inline ProjectionFit project(const std::vector<std::vector<double>>& us,
                             const std::vector<TMatrix>& tb,
                             const std::vector<std::vector<int>>& history_strata,
                             ProjectionMethod method,
                             HistoryCoefFamily d_family = HistoryCoefFamily::kSaturated) {
  const std::size_t nT = tb.size();
  if (nT == 0 || us.empty()) throw Error(ErrorCode::kUsage, "project: empty inputs");
  const std::size_t nrow = us.front().size();
  for (const auto& u : us)
    if (u.size() != nrow) throw Error(ErrorCode::kUsage, "project: ragged U");

  // normalize group ids to [0, G_t)
  std::vector<std::vector<int>> groups(nT);
  std::vector<int> n_groups(nT, 1);
  for (std::size_t b = 0; b < nT; ++b) {
    groups[b].assign(nrow, 0);
    if (d_family == HistoryCoefFamily::kSaturated) {
      std::map<int, int> remap;
      for (std::size_t r = 0; r < nrow; ++r) {
        int g = history_strata[b][r];
        auto [it, _] = remap.emplace(g, static_cast<int>(remap.size()));
        groups[b][r] = it->second;
      }
      n_groups[b] = static_cast<int>(remap.size());
    }
  }

  ProjectionFit fit;
  fit.coefficients.assign(nT, {});
  fit.fitted.assign(us.size(), std::vector<double>(nrow, 0.0));

  if (method == ProjectionMethod::kPooledOls) {
    // one joint OLS over the expanded columns {1{H_t = g} * T_t,col}
    std::vector<std::vector<std::size_t>> offset(nT);
    std::size_t d = 0;
    for (std::size_t b = 0; b < nT; ++b) {
      offset[b].assign(static_cast<std::size_t>(n_groups[b]), 0);
      for (int g = 0; g < n_groups[b]; ++g) {
        offset[b][static_cast<std::size_t>(g)] = d;
        d += tb[b].values.cols();
      }
    }
    Matrix gram(d, d);
    std::vector<std::vector<double>> rhs(us.size(), std::vector<double>(d, 0.0));
    std::vector<std::pair<std::size_t, double>> sparse;
    for (std::size_t r = 0; r < nrow; ++r) {
      sparse.clear();
      for (std::size_t b = 0; b < nT; ++b) {
        std::size_t off = offset[b][static_cast<std::size_t>(groups[b][r])];
        for (std::size_t c = 0; c < tb[b].values.cols(); ++c) {
          double v = tb[b].values(r, c);
          if (v != 0.0) sparse.push_back({off + c, v});
        }
      }
      for (auto [c1, v1] : sparse) {
        for (auto [c2, v2] : sparse) gram(c1, c2) += v1 * v2;
        for (std::size_t u = 0; u < us.size(); ++u) rhs[u][c1] += v1 * us[u][r];
      }
    }
    for (std::size_t u = 0; u < us.size(); ++u) {
      SolveResult sol = solve_sym(gram, rhs[u], /*allow_ridge=*/true);
      fit.ridged = fit.ridged || sol.ridged;
      for (std::size_t r = 0; r < nrow; ++r) {
        double f = 0.0;
        for (std::size_t b = 0; b < nT; ++b) {
          std::size_t off = offset[b][static_cast<std::size_t>(groups[b][r])];
          for (std::size_t c = 0; c < tb[b].values.cols(); ++c)
            f += sol.x[off + c] * tb[b].values(r, c);
        }
        fit.fitted[u][r] = f;
      }
      if (u == 0) {
        for (std::size_t b = 0; b < nT; ++b)
          for (int g = 0; g < n_groups[b]; ++g) {
            auto& dst = fit.coefficients[b][g];
            std::size_t off = offset[b][static_cast<std::size_t>(g)];
            for (std::size_t c = 0; c < tb[b].values.cols(); ++c) dst.push_back(sol.x[off + c]);
          }
      }
    }
    return fit;
  }

  // ---- Theorem-3 recursion at the empirical measure ----
  // snapshots[t][j] = T_j^{(t)} for j <= t (block-major over recursion levels)
  std::vector<std::vector<Matrix>> snap(nT);
  for (std::size_t tt = 0; tt < nT; ++tt) snap[tt].resize(tt + 1);
  snap[nT - 1].assign(nT, Matrix());
  // level K holds T_j^{(K)} = T_j for all j
  std::vector<Matrix> cur(nT);
  for (std::size_t j = 0; j < nT; ++j) cur[j] = tb[j].values;
  snap[nT - 1] = cur;

  auto stratum_ols = [&](const Matrix& anchor, const std::vector<int>& grp, int ng,
                         const Matrix& target, Matrix* adjusted, bool* ridged) {
    // per-stratum: target -= E[target anchor^T | g] E[anchor anchor^T | g]^{-1} anchor
    const std::size_t da = anchor.cols();
    const std::size_t dt = target.cols();
    std::vector<Matrix> gram(static_cast<std::size_t>(ng), Matrix(da, da));
    std::vector<Matrix> cross(static_cast<std::size_t>(ng), Matrix(dt, da));
    for (std::size_t r = 0; r < nrow; ++r) {
      int g = grp[r];
      auto& G = gram[static_cast<std::size_t>(g)];
      auto& C = cross[static_cast<std::size_t>(g)];
      for (std::size_t a = 0; a < da; ++a) {
        double va = anchor(r, a);
        if (va == 0.0) continue;
        for (std::size_t a2 = 0; a2 < da; ++a2) G(a, a2) += va * anchor(r, a2);
        for (std::size_t c = 0; c < dt; ++c) C(c, a) += target(r, c) * va;
      }
    }
    // coefficient rows: B = C * G^{-1}; solve G x = C_row^T per row
    std::vector<Matrix> beta(static_cast<std::size_t>(ng), Matrix(dt, da));
    for (int g = 0; g < ng; ++g) {
      for (std::size_t c = 0; c < dt; ++c) {
        std::vector<double> row(da);
        for (std::size_t a = 0; a < da; ++a) row[a] = cross[static_cast<std::size_t>(g)](c, a);
        SolveResult sol = solve_sym(gram[static_cast<std::size_t>(g)], row, /*allow_ridge=*/true);
        *ridged = *ridged || sol.ridged;
        for (std::size_t a = 0; a < da; ++a) beta[static_cast<std::size_t>(g)](c, a) = sol.x[a];
      }
    }
    *adjusted = target;
    for (std::size_t r = 0; r < nrow; ++r) {
      int g = grp[r];
      for (std::size_t c = 0; c < dt; ++c) {
        double v = (*adjusted)(r, c);
        for (std::size_t a = 0; a < da; ++a)
          v -= beta[static_cast<std::size_t>(g)](c, a) * anchor(r, a);
        (*adjusted)(r, c) = v;
      }
    }
  };

  for (std::size_t lvl = nT - 1; lvl-- > 0;) {
    // residualize all j <= lvl against the anchor T_{lvl+1}^{(lvl+1)}
    const Matrix& anchor = snap[lvl + 1][lvl + 1];
    snap[lvl].assign(lvl + 1, Matrix());
    for (std::size_t j = 0; j <= lvl; ++j) {
      Matrix adj;
      stratum_ols(anchor, groups[lvl + 1], n_groups[lvl + 1], snap[lvl + 1][j], &adj, &fit.ridged);
      snap[lvl][j] = std::move(adj);
    }
  }

  // d-pass: for each U, forward in t
  for (std::size_t u = 0; u < us.size(); ++u) {
    std::vector<std::map<int, std::vector<double>>> dcoef(nT);
    for (std::size_t t = 0; t < nT; ++t) {
      const Matrix& Tt = snap[t][t];
      const std::size_t dt = Tt.cols();
      // residual at level t: U - sum_{j<t} d_j(sigma_j) T_j^{(t)}
      std::vector<double> resid = us[u];
      for (std::size_t j = 0; j < t; ++j) {
        const Matrix& Tj = snap[t][j];
        for (std::size_t r = 0; r < nrow; ++r) {
          const auto& dj = dcoef[j][groups[j][r]];
          double v = 0.0;
          for (std::size_t c = 0; c < Tj.cols(); ++c) v += dj[c] * Tj(r, c);
          resid[r] -= v;
        }
      }
      // per-stratum OLS of resid on T_t^{(t)}
      std::vector<Matrix> gram(static_cast<std::size_t>(n_groups[t]), Matrix(dt, dt));
      std::vector<std::vector<double>> cross(static_cast<std::size_t>(n_groups[t]),
                                             std::vector<double>(dt, 0.0));
      for (std::size_t r = 0; r < nrow; ++r) {
        int g = groups[t][r];
        for (std::size_t a = 0; a < dt; ++a) {
          double va = Tt(r, a);
          if (va == 0.0) continue;
          for (std::size_t a2 = 0; a2 < dt; ++a2)
            gram[static_cast<std::size_t>(g)](a, a2) += va * Tt(r, a2);
          cross[static_cast<std::size_t>(g)][a] += va * resid[r];
        }
      }
      for (int g = 0; g < n_groups[t]; ++g) {
        SolveResult sol =
            solve_sym(gram[static_cast<std::size_t>(g)], cross[static_cast<std::size_t>(g)],
                      /*allow_ridge=*/true);
        fit.ridged = fit.ridged || sol.ridged;
        dcoef[t][g] = sol.x;
      }
    }
    // fitted values on the ORIGINAL columns
    for (std::size_t r = 0; r < nrow; ++r) {
      double f = 0.0;
      for (std::size_t t = 0; t < nT; ++t) {
        const auto& dctab = dcoef[t];
        const auto& dc = dctab.at(groups[t][r]);
        for (std::size_t c = 0; c < tb[t].values.cols(); ++c) f += dc[c] * tb[t].values(r, c);
      }
      fit.fitted[u][r] = f;
    }
    if (u == 0) fit.coefficients = dcoef;
  }
  return fit;
}

// residual U - Pi[U|Omega] for each supplied U
inline std::vector<std::vector<double>> adjust_estimating_function(
    const std::vector<std::vector<double>>& us, const ProjectionFit& fit) {
  std::vector<std::vector<double>> out = us;
  for (std::size_t u = 0; u < us.size(); ++u)
    for (std::size_t r = 0; r < us[u].size(); ++r) out[u][r] -= fit.fitted[u][r];
  return out;
}

// ---------------------------------------------------------------------------
// Omega projector: T blocks for every t with a live testing decision, plus
// the ancillary residualization that turns centered contributions into
// empirical influence functions before projecting.
// ---------------------------------------------------------------------------

class OmegaProjector {
 public:
  OmegaProjector() = default;

  OmegaProjector(const Dataset& ds, std::vector<int> fit_idx, std::vector<int> eval_idx,
                 const BasisSpec& basis, const NuisanceSet& ns, TForm form = TForm::kEtaForm)
      : ds_(&ds), fit_idx_(std::move(fit_idx)), eval_idx_(std::move(eval_idx)), d_family_(basis.d_family) {
    if (basis.xi == 0) return;  // empty projector: adjustments are exactly 0
    std::vector<double> yd_fit;
    yd_fit.reserve(fit_idx_.size());
    for (int i : fit_idx_) yd_fit.push_back(ds.subject(i).yd);
    OutcomeBasis phi = OutcomeBasis::build(yd_fit, basis);
    for (int t = 0; t <= ds.K(); ++t) {
      BasisColumns cols = build_basis_columns(ds, fit_idx_, eval_idx_, phi, t);
      TMatrix tm = construct_T(ds, fit_idx_, eval_idx_, phi, cols, ns, form);
      bool all_zero = true;
      for (std::size_t r = 0; r < tm.values.rows() && all_zero; ++r)
        for (std::size_t c = 0; c < tm.values.cols(); ++c)
          if (tm.values(r, c) != 0.0) {
            all_zero = false;
            break;
          }
      if (all_zero) continue;  // e.g. t = K where A_K == 0 makes Pi degenerate
      std::vector<int> hs(eval_idx_.size());
      for (std::size_t r = 0; r < eval_idx_.size(); ++r) hs[r] = ds.hist_id(t, eval_idx_[r]);
      blocks_.push_back(std::move(tm));
      history_.push_back(std::move(hs));
    }
  }

  bool empty() const { return blocks_.empty(); }
  const std::vector<TMatrix>& blocks() const { return blocks_; }
  const std::vector<int>& eval_idx() const { return eval_idx_; }

  // For each contribution vector x (over eval_idx): center, residualize
  // against ancillary scores, project onto Omega; returns the means of the
  // fitted projections (the amount subtracted from each plain estimate).
  std::vector<double> adjustments(const std::vector<std::vector<double>>& xs,
                                  bool* ridged = nullptr) const {
    std::vector<double> out(xs.size(), 0.0);
    if (blocks_.empty()) return out;
    std::vector<std::vector<double>> resid;
    resid.reserve(xs.size());
    for (const auto& x : xs) {
      std::vector<double> c = x;
      double m = mean(c);
      for (double& v : c) v -= m;
      resid.push_back(ancillary_residual(*ds_, eval_idx_, c));
    }
    ProjectionFit fit = project(resid, blocks_, history_, ProjectionMethod::kRecursive, d_family_);
    if (ridged) *ridged = fit.ridged;
    for (std::size_t u = 0; u < xs.size(); ++u) out[u] = mean(fit.fitted[u]);
    return out;
  }

  double adjustment(const std::vector<double>& x, bool* ridged = nullptr) const {
    return adjustments({x}, ridged)[0];
  }

 private:
  const Dataset* ds_ = nullptr;
  std::vector<int> fit_idx_, eval_idx_;
  HistoryCoefFamily d_family_ = HistoryCoefFamily::kSaturated;
  std::vector<TMatrix> blocks_;
  std::vector<std::vector<int>> history_;
};

// ---------------------------------------------------------------------------
// NDE-adjusted g-estimation (two-step, saturated specs). Each coordinate
// Psi_{t, sigma, (s,a)} equals the within-stratum IPW contrast of taking
// (s,a) versus (0,0) at t and following the unadjusted argmax afterwards;
// the adjusted coordinate subtracts the Omega-projection mean of that
// contrast's empirical influence function.
// ---------------------------------------------------------------------------

inline FittedSnmm adjusted_g_estimate(const Dataset& ds, const std::vector<int>& fit_idx,
                                      const std::vector<int>& eval_idx, const BlipSpec& spec,
                                      const QSpec& q_spec, const BasisSpec& basis,
                                      const NuisanceSet& ns, const GEstimateOptions& opts = {}) {
  for (const auto& st : spec.stages)
    if (!st.saturated)
      throw Error(ErrorCode::kUsage, "adjusted estimation is implemented for saturated specs");
  FittedSnmm base = g_estimate(ds, fit_idx, eval_idx, spec, q_spec, opts);
  if (basis.xi == 0) return base;

  OmegaProjector projector(ds, fit_idx, eval_idx, basis, ns, TForm::kEtaForm);
  if (projector.empty()) return base;

  const int K = ds.K();
  const std::size_t ne = eval_idx.size();

  // continuation weights prod_{m>t} (following the plug-in policy) per (t, i)
  // assembled once per stage below
  struct Coord {
    int t;
    SaturatedKey key;
    double psi_hat;
    std::vector<double> x;  // influence contributions over eval rows
  };
  std::vector<Coord> coords;

  for (int t = 0; t <= K; ++t) {
    const StagePsi& sp = base.psi.stages[static_cast<std::size_t>(t)];
    if (sp.sat.empty()) continue;
    // eval-side action-pair frequencies per stratum
    struct Cell {
      std::map<std::pair<int, int>, double> pair_count;
      double total = 0.0;
    };
    std::map<std::vector<int>, Cell> cells;
    std::vector<std::vector<int>> keys(ne);
    for (std::size_t r = 0; r < ne; ++r) {
      int i = eval_idx[r];
      keys[r] = base.stage_hist_key(ds, i, t);
      Cell& c = cells[keys[r]];
      const Trajectory& tr = ds.subject(i);
      c.pair_count[{tr.S[static_cast<std::size_t>(t)], tr.A[static_cast<std::size_t>(t)]}] += 1.0;
      c.total += 1.0;
    }
    // continuation weight for m > t at the plug-in policy
    std::vector<double> wcont(ne, 1.0);
    for (std::size_t r = 0; r < ne; ++r) {
      int i = eval_idx[r];
      const Trajectory& tr = ds.subject(i);
      double w = 1.0;
      for (int m = t + 1; m <= K && w != 0.0; ++m) {
        Action cm = base.continuation_action(ds, i, m, opts.continuation);
        if (tr.S[static_cast<std::size_t>(m)] != cm.s) {
          w = 0.0;
          break;
        }
        double ps = ns.p_s(ds, m, i, cm.s);
        if (ps < ns.positivity_floor()) throw Error(ErrorCode::kZeroWeight, "continuation weight");
        w /= ps;
        double pim = ns.pi(ds, m, i);
        if (cm.a == 1) {
          if (tr.A[static_cast<std::size_t>(m)] != 1) {
            w = 0.0;
            break;
          }
          if (pim < ns.positivity_floor()) throw Error(ErrorCode::kZeroWeight, "continuation weight");
          w /= pim;
        } else {
          if (tr.A[static_cast<std::size_t>(m)] != 0) {
            w = 0.0;
            break;
          }
          if (1.0 - pim < ns.positivity_floor())
            throw Error(ErrorCode::kZeroWeight, "continuation weight");
          w /= (1.0 - pim);
        }
      }
      wcont[r] = w;
    }
    for (const auto& [key, psi_hat] : sp.sat) {
      auto cit = cells.find(key.hist);
      if (cit == cells.end()) continue;
      const Cell& c = cit->second;
      auto fp = c.pair_count.find({key.s, key.a});
      auto f0 = c.pair_count.find({0, 0});
      if (fp == c.pair_count.end() || f0 == c.pair_count.end()) continue;
      double share = c.total / static_cast<double>(ne);  // P-hat(sigma)
      Coord coord;
      coord.t = t;
      coord.key = key;
      coord.psi_hat = psi_hat;
      coord.x.assign(ne, 0.0);
      for (std::size_t r = 0; r < ne; ++r) {
        if (keys[r] != key.hist) continue;
        int i = eval_idx[r];
        const Trajectory& tr = ds.subject(i);
        std::pair<int, int> obs{tr.S[static_cast<std::size_t>(t)], tr.A[static_cast<std::size_t>(t)]};
        double contrast = 0.0;
        if (obs == std::pair<int, int>{key.s, key.a})
          contrast = c.total / fp->second;
        else if (obs == std::pair<int, int>{0, 0})
          contrast = -c.total / f0->second;
        double contrib = contrast * wcont[r] * tr.y;
        coord.x[r] = (contrib - psi_hat) / share;
      }
      coords.push_back(std::move(coord));
    }
  }

  std::vector<std::vector<double>> xs;
  xs.reserve(coords.size());
  for (const auto& c : coords) xs.push_back(c.x);
  std::vector<double> adj = projector.adjustments(xs);

  FittedSnmm out = base;
  for (std::size_t c = 0; c < coords.size(); ++c)
    out.psi.stages[static_cast<std::size_t>(coords[c].t)].sat[coords[c].key] =
        coords[c].psi_hat - adj[c];
  return out;
}

inline FittedSnmm adjusted_g_estimate(const Dataset& ds, const BlipSpec& spec, const QSpec& q_spec,
                                      const BasisSpec& basis, const NuisanceSet& ns,
                                      const GEstimateOptions& opts = {}) {
  auto idx = all_indices(ds);
  return adjusted_g_estimate(ds, idx, idx, spec, q_spec, basis, ns, opts);
}

}  // namespace optregime
