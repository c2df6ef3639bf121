#pragma once

#include <atomic>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "optregime/common.hpp"
#include "optregime/ipw.hpp"
#include "optregime/nde_projection.hpp"
#include "optregime/nuisance.hpp"
#include "optregime/snmm.hpp"
#include "optregime/trajectory.hpp"

namespace optregime {

enum class DgpName { kDgp1, kDgpPrime, kDgp2, kDgp3 };

inline const char* dgp_name(DgpName d) {
  switch (d) {
    case DgpName::kDgp1: return "dgp1";
    case DgpName::kDgpPrime: return "dgp-prime";
    case DgpName::kDgp2: return "dgp2";
    case DgpName::kDgp3: return "dgp3";
  }
  return "?";
}

inline std::optional<DgpName> dgp_from_name(const std::string& s) {
  for (DgpName d : {DgpName::kDgp1, DgpName::kDgpPrime, DgpName::kDgp2, DgpName::kDgp3})
    if (s == dgp_name(d)) return d;
  return std::nullopt;
}

struct DgpSpec {
  DgpName name = DgpName::kDgp1;
  int n = 25000;
  uint64_t seed = 1;
  double rho = 0.5;       // DGP1 / DGP' / DGP3 testing probability
  double eps_q = 0.5;     // DGP3 epsilon_? (treatment prob when untested)
  double eps = 0.5;       // DGP3 epsilon  (treatment prob, positive result)
  double eps_prime = 0.5; // DGP3 epsilon' (treatment prob, negative result)

  double c_star() const {
    switch (name) {
      case DgpName::kDgp1:
      case DgpName::kDgpPrime: return 3.0;
      case DgpName::kDgp2: return 0.9;
      case DgpName::kDgp3: return 0.0;
    }
    return 0.0;
  }
  int K() const { return 1; }

  void validate() const {
    auto prob = [](double p) { return p > 0.0 && p < 1.0; };
    if (name != DgpName::kDgp2 && !(rho > 0.0 && rho <= 0.99))
      throw Error(ErrorCode::kUsage, "rho must lie in (0, 0.99]");
    if (name == DgpName::kDgp3 && !(prob(eps_q) && prob(eps) && prob(eps_prime)))
      throw Error(ErrorCode::kUsage, "DGP3 probabilities must lie in (0,1)");
    if (n < 1) throw Error(ErrorCode::kUsage, "n >= 1 required");
  }
};

// DGP1 / DGP': S1 law given (A0, R1); DGP' sharpens the A0-S1 correlation.
inline double dgp1_p_s1(DgpName name, int a0, int r1) {
  if (name == DgpName::kDgpPrime) {
    if (a0 == 0) return 0.01;
    return r1 == 1 ? 0.95 : 0.90;
  }
  if (a0 == 0) return 0.15;
  return r1 == 1 ? 0.85 : 0.15;
}

inline double dgp2_p_s1(int l0, int a0, int r1) {
  if (a0 == 1 && r1 == 1) return l0 == 1 ? 0.90 : 0.85;
  return l0 == 1 ? 0.55 : 0.45;  // untested, or tested negative
}

// n i.i.d. trajectories; latent variables (R*_1 / Z_0) go to the side table,
// never into the estimation columns. Deterministic in (seed, n): subject i
// draws from the stream keyed (seed, replication-free, i).
inline Dataset generate(const DgpSpec& spec) {
  spec.validate();
  std::vector<Trajectory> subjects;
  subjects.reserve(static_cast<std::size_t>(spec.n));
  std::vector<double> latent(static_cast<std::size_t>(spec.n));
  const double c = spec.c_star();

  for (int i = 0; i < spec.n; ++i) {
    Rng rng(spec.seed, /*stream=*/0xD6E5, static_cast<uint64_t>(i));
    Trajectory tr;
    tr.L.assign(2, {});
    tr.R.assign(2, 0);
    tr.S.assign(2, 0);
    tr.A.assign(2, 0);
    switch (spec.name) {
      case DgpName::kDgp1:
      case DgpName::kDgpPrime: {
        int a0 = rng.bernoulli(spec.rho) ? 1 : 0;
        int rs = rng.bernoulli(0.5) ? 1 : 0;  // R*_1
        int r1 = a0 == 1 ? rs : kMissing;
        int s1 = rng.bernoulli(dgp1_p_s1(spec.name, a0, a0 == 1 ? rs : kMissing)) ? 1 : 0;
        double yd = -5.0 * rs + 2.0 * s1 * rs - 0.1 * s1 * (1 - rs) + rng.normal();
        tr.A[0] = a0;
        tr.R[1] = r1;
        tr.S[1] = s1;
        tr.yd = yd;
        tr.y = yd - c * a0;
        latent[static_cast<std::size_t>(i)] = rs;
        break;
      }
      case DgpName::kDgp2: {
        int z0 = rng.bernoulli(0.6) ? 1 : 0;
        int l0 = rng.bernoulli(z0 == 1 ? 0.55 : 0.45) ? 1 : 0;
        int a0 = rng.bernoulli(l0 == 1 ? 0.1 : 0.9) ? 1 : 0;
        int rtrue = rng.bernoulli(z0 == 1 ? 0.95 : 0.05) ? 1 : 0;
        int r1 = a0 == 1 ? rtrue : kMissing;
        int s1 = rng.bernoulli(dgp2_p_s1(l0, a0, a0 == 1 ? rtrue : kMissing)) ? 1 : 0;
        double yd = -5.0 * z0 + 9.0 * s1 * z0 - 3.0 * s1 * (1 - z0) + rng.normal();
        tr.L[0] = {l0};
        tr.L[1] = {};
        tr.A[0] = a0;
        tr.R[1] = r1;
        tr.S[1] = s1;
        tr.yd = yd;
        tr.y = yd - c * a0;
        latent[static_cast<std::size_t>(i)] = z0;
        break;
      }
      case DgpName::kDgp3: {
        int zp = rng.bernoulli(0.5) ? 1 : 0;
        int z0 = 2 * zp - 1;  // {-1, +1}
        int a0 = rng.bernoulli(spec.rho) ? 1 : 0;
        int r1 = a0 == 1 ? zp : kMissing;  // code 1 <-> Z=+1, 0 <-> Z=-1
        double ps = a0 == 0 ? spec.eps_q : (z0 == 1 ? spec.eps : spec.eps_prime);
        int s1 = rng.bernoulli(ps) ? 1 : 0;
        double yd = 10.0 * z0 + rng.normal();
        tr.A[0] = a0;
        tr.R[1] = r1;
        tr.S[1] = s1;
        tr.yd = yd;
        tr.y = yd;  // c* = 0
        latent[static_cast<std::size_t>(i)] = z0;
        break;
      }
    }
    subjects.push_back(std::move(tr));
  }
  Dataset ds(std::move(subjects));
  ds.latents["z"] = std::move(latent);
  return ds;
}

// ---------------------------------------------------------------------------
// Analytic truths by exact enumeration over the finite lattice; Gaussian
// outcome means are closed-form.
// ---------------------------------------------------------------------------

enum class OracleQuery {
  kValueOptimal,
  kValueNoTest,
  kVoi,
  kValueOptimalL0,   // conditional on L0 = level (DGP2)
  kValueNoTestL0,
  kVoiL0,
};

// DGP1/DGP': mean utility of regime (a0, s1(r)) with s1 keyed by result
inline double dgp1_regime_value(const DgpSpec& spec, int a0, int s_when_pos, int s_when_neg,
                                int s_when_missing) {
  double v = 0.0;
  for (int rs : {0, 1}) {
    int s1 = a0 == 1 ? (rs == 1 ? s_when_pos : s_when_neg) : s_when_missing;
    v += 0.5 * (-5.0 * rs + 2.0 * s1 * rs - 0.1 * s1 * (1 - rs));
  }
  return v - spec.c_star() * a0;
}

// DGP2 conditional P(Z0=1 | L0)
inline double dgp2_pz_given_l(int l0) {
  double num = 0.6 * (l0 == 1 ? 0.55 : 0.45);
  double den = num + 0.4 * (l0 == 1 ? 0.45 : 0.55);
  return num / den;
}

// DGP2: mean utility given L0 of regime (a0; s1 as function of r or fixed)
inline double dgp2_regime_value_l(int l0, int a0, int s_when_pos, int s_when_neg,
                                  int s_when_missing) {
  double pz = dgp2_pz_given_l(l0);
  double v = 0.0;
  for (int z : {0, 1}) {
    double pzz = z == 1 ? pz : 1.0 - pz;
    if (a0 == 1) {
      double pr = z == 1 ? 0.95 : 0.05;  // P(R1=1|Z0)
      for (int r : {0, 1}) {
        double prr = r == 1 ? pr : 1.0 - pr;
        int s1 = r == 1 ? s_when_pos : s_when_neg;
        v += pzz * prr * (-5.0 * z + 9.0 * s1 * z - 3.0 * s1 * (1 - z));
      }
    } else {
      int s1 = s_when_missing;
      v += pzz * (-5.0 * z + 9.0 * s1 * z - 3.0 * s1 * (1 - z));
    }
  }
  return v - 0.9 * a0;
}

inline double dgp2_p_l0(int l0) {
  return 0.6 * (l0 == 1 ? 0.55 : 0.45) + 0.4 * (l0 == 1 ? 0.45 : 0.55);
}

inline double analytic_oracle(const DgpSpec& spec, OracleQuery query, int l0_level = 0) {
  switch (spec.name) {
    case DgpName::kDgp1:
    case DgpName::kDgpPrime: {
      double best_opt = -1e300, best_nt = -1e300;
      for (int a0 : {0, 1})
        for (int sp : {0, 1})
          for (int sn : {0, 1})
            for (int sm : {0, 1}) {
              if (a0 == 1 && sm != sp) continue;  // missing branch unreachable when tested
              if (a0 == 0 && (sp != sm || sn != sm)) continue;
              double v = dgp1_regime_value(spec, a0, sp, sn, sm);
              best_opt = std::max(best_opt, v);
              if (a0 == 0) best_nt = std::max(best_nt, v);
            }
      switch (query) {
        case OracleQuery::kValueOptimal: return best_opt;
        case OracleQuery::kValueNoTest: return best_nt;
        case OracleQuery::kVoi: return best_opt - best_nt;
        default: throw Error(ErrorCode::kUnsupportedQuery, "no conditional values for DGP1");
      }
    }
    case DgpName::kDgp2: {
      auto best_l = [&](int l, bool allow_test) {
        double best = -1e300;
        for (int a0 : {0, 1}) {
          if (!allow_test && a0 == 1) continue;
          for (int sp : {0, 1})
            for (int sn : {0, 1})
              for (int sm : {0, 1}) {
                if (a0 == 1 && sm != sp) continue;
                if (a0 == 0 && (sp != sm || sn != sm)) continue;
                best = std::max(best, dgp2_regime_value_l(l, a0, sp, sn, sm));
              }
        }
        return best;
      };
      switch (query) {
        case OracleQuery::kValueOptimal:
          return dgp2_p_l0(0) * best_l(0, true) + dgp2_p_l0(1) * best_l(1, true);
        case OracleQuery::kValueNoTest:
          return dgp2_p_l0(0) * best_l(0, false) + dgp2_p_l0(1) * best_l(1, false);
        case OracleQuery::kVoi:
          return analytic_oracle(spec, OracleQuery::kValueOptimal) -
                 analytic_oracle(spec, OracleQuery::kValueNoTest);
        case OracleQuery::kValueOptimalL0: return best_l(l0_level, true);
        case OracleQuery::kValueNoTestL0: return best_l(l0_level, false);
        case OracleQuery::kVoiL0: return best_l(l0_level, true) - best_l(l0_level, false);
      }
      break;
    }
    case DgpName::kDgp3: {
      // theta_{a0=0, s1=1} = E[10 Z0] = 0; richer queries are not needed
      if (query == OracleQuery::kValueNoTest || query == OracleQuery::kValueOptimal ||
          query == OracleQuery::kVoi)
        throw Error(ErrorCode::kUnsupportedQuery, "DGP3 oracle supports the fixed-regime value only");
      break;
    }
  }
  throw Error(ErrorCode::kUnsupportedQuery, "unsupported oracle query");
}

// Appendix-style closed form: var(theta_nde-ipw) / var(theta_ipw) for DGP3
// with g = (a0 = 0, s1 = 1) and oracle nuisances.
inline double dgp3_variance_ratio(double rho, double eps_q, double eps, double eps_prime) {
  auto check = [](double p) {
    if (!(p > 0.0 && p < 1.0)) throw Error(ErrorCode::kUsage, "arguments must lie in (0,1)");
  };
  check(rho);
  check(eps_q);
  check(eps);
  check(eps_prime);
  return rho * rho * (1.0 + eps_q / (2.0 * eps) + eps_q / (2.0 * eps_prime));
}

// Oracle nuisances (true generator probabilities) for a DGP dataset.
inline NuisanceSet oracle_nuisances(const DgpSpec& spec) {
  NuisanceSet ns;
  DgpName name = spec.name;
  double rho = spec.rho, eq = spec.eps_q, e = spec.eps, ep = spec.eps_prime;
  ns.set_oracle(
      [name, eq, e, ep](const Dataset& ds, int t, int i, int s) -> double {
        const Trajectory& tr = ds.subject(i);
        if (t == 0) return s == 0 ? 1.0 : 0.0;  // no treatment decision at t=0
        double p1 = 0.0;
        switch (name) {
          case DgpName::kDgp1:
          case DgpName::kDgpPrime:
            p1 = dgp1_p_s1(name, tr.A[0], tr.R[1]);
            break;
          case DgpName::kDgp2:
            p1 = dgp2_p_s1(tr.L[0][0], tr.A[0], tr.R[1]);
            break;
          case DgpName::kDgp3:
            p1 = tr.A[0] == 0 ? eq : (tr.R[1] == 1 ? e : ep);
            break;
        }
        return s == 1 ? p1 : 1.0 - p1;
      },
      [name, rho](const Dataset& ds, int t, int i) -> double {
        if (t >= 1) return 0.0;  // A_K == 0
        if (name == DgpName::kDgp2) {
          int l0 = ds.subject(i).L[0][0];
          return l0 == 1 ? 0.1 : 0.9;
        }
        return rho;
      });
  return ns;
}

// ---------------------------------------------------------------------------
// Monte Carlo runner
// ---------------------------------------------------------------------------

struct EstimatorConfig {
  std::string label;
  // evaluated per replication; throws propagate and exclude the replication
  std::function<double(const Dataset&, uint64_t rep_seed)> run;
};

struct McReport {
  struct Row {
    std::string label;
    double mc_mean = 0.0;
    double mc_sd = 0.0;
    double inverse_re = 1.0;  // var(this) / var(reference)
    double selection_rate = std::numeric_limits<double>::quiet_NaN();
    int replications = 0;
  };
  std::vector<Row> rows;
  std::vector<std::vector<double>> raw;  // raw[e][rep]
  int requested_reps = 0;
  int excluded_reps = 0;
  std::vector<std::string> exclusion_errors;
};

inline int hardware_threads_or(int requested) {
  if (requested > 0) return requested;
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

// Runs `reps` replications of spec (replication r uses seed splitmix(seed, r)),
// evaluating every estimator on the same datasets. reference_index fixes the
// inverse-RE denominator.
inline McReport run_monte_carlo(const DgpSpec& spec, const std::vector<EstimatorConfig>& estimators,
                                int reps, int reference_index = 0, int threads = 0) {
  if (reps < 2) throw Error(ErrorCode::kUsage, "reps >= 2 required");
  McReport rep;
  rep.requested_reps = reps;
  rep.raw.assign(estimators.size(), std::vector<double>(static_cast<std::size_t>(reps),
                                                        std::numeric_limits<double>::quiet_NaN()));
  std::vector<char> failed(static_cast<std::size_t>(reps), 0);
  std::vector<std::string> errors(static_cast<std::size_t>(reps));

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      int r = next.fetch_add(1);
      if (r >= reps) return;
      uint64_t rep_seed = splitmix64(spec.seed + 0x5eed0000ULL + static_cast<uint64_t>(r));
      DgpSpec rspec = spec;
      rspec.seed = rep_seed;
      try {
        Dataset ds = generate(rspec);
        for (std::size_t e = 0; e < estimators.size(); ++e)
          rep.raw[e][static_cast<std::size_t>(r)] = estimators[e].run(ds, rep_seed);
      } catch (const std::exception& ex) {
        failed[static_cast<std::size_t>(r)] = 1;
        errors[static_cast<std::size_t>(r)] = ex.what();
      }
    }
  };
  int nthreads = hardware_threads_or(threads);
  std::vector<std::thread> pool;
  for (int w = 0; w < nthreads; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();

  std::vector<std::vector<double>> kept(estimators.size());
  for (int r = 0; r < reps; ++r) {
    if (failed[static_cast<std::size_t>(r)]) {
      ++rep.excluded_reps;
      rep.exclusion_errors.push_back(errors[static_cast<std::size_t>(r)]);
      continue;
    }
    for (std::size_t e = 0; e < estimators.size(); ++e)
      kept[e].push_back(rep.raw[e][static_cast<std::size_t>(r)]);
  }
  double ref_var = kept.empty() ? 1.0 : sample_var(kept[static_cast<std::size_t>(reference_index)]);
  for (std::size_t e = 0; e < estimators.size(); ++e) {
    McReport::Row row;
    row.label = estimators[e].label;
    row.mc_mean = mean(kept[e]);
    row.mc_sd = sample_sd(kept[e]);
    row.inverse_re = ref_var > 0 ? sample_var(kept[e]) / ref_var : 1.0;
    row.replications = static_cast<int>(kept[e].size());
    rep.rows.push_back(row);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Bootstrap cost-benefit (VoI) test: resample subjects with replacement,
// re-estimate the VoI (nuisances refit per resample), reject H0: VoI <= 0
// when 0 falls below the alpha-quantile of the bootstrap distribution.
// ---------------------------------------------------------------------------

struct BootstrapVoiResult {
  bool reject = false;
  double quantile = 0.0;
  double boot_mean = 0.0;
  double boot_sd = 0.0;
  int resamples_used = 0;
  int retries = 0;
};

inline BootstrapVoiResult bootstrap_voi_test(const Dataset& ds, const BlipSpec& blip,
                                             const QSpec& q, const VoiOptions& vopts, int B,
                                             double alpha, uint64_t seed, int retry_cap = 20) {
  if (B < 50) throw Error(ErrorCode::kUsage, "B >= 50 required");
  std::vector<double> vois;
  vois.reserve(static_cast<std::size_t>(B));
  BootstrapVoiResult out;
  int n = ds.n();
  uint64_t draw = 0;
  for (int b = 0; b < B; ++b) {
    bool done = false;
    for (int attempt = 0; attempt <= retry_cap && !done; ++attempt) {
      Rng rng(seed, /*stream=*/0xB007, draw++);
      std::vector<int> idx(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
      try {
        Dataset res = ds.resample(idx);
        vois.push_back(voi(res, blip, q, vopts).voi);
        done = true;
      } catch (const Error&) {
        ++out.retries;
      }
    }
    if (!done) throw Error(ErrorCode::kSingularSystem, "bootstrap retries exhausted");
  }
  out.resamples_used = static_cast<int>(vois.size());
  out.boot_mean = mean(vois);
  out.boot_sd = sample_sd(vois);
  out.quantile = quantile_lower(vois, alpha);
  out.reject = out.quantile > 0.0;
  return out;
}

// CSV writers for reports
inline void write_mc_report_csv(const McReport& rep, const std::string& path,
                                const std::string& config_hash) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path);
  f << "estimator,mc_mean,mc_sd,inverse_re,replications,config_hash,version\n";
  for (const auto& row : rep.rows)
    f << row.label << "," << row.mc_mean << "," << row.mc_sd << "," << row.inverse_re << ","
      << row.replications << "," << config_hash << "," << kVersion << "\n";
}

inline void write_mc_raw_csv(const McReport& rep, const std::vector<std::string>& labels,
                             const std::string& path, const std::string& config_hash) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path);
  f << "replication,estimator,estimate,config_hash,version\n";
  for (std::size_t e = 0; e < rep.raw.size(); ++e)
    for (std::size_t r = 0; r < rep.raw[e].size(); ++r)
      if (std::isfinite(rep.raw[e][r]))
        f << r << "," << labels[e] << "," << rep.raw[e][r] << "," << config_hash << "," << kVersion
          << "\n";
}

}  // namespace optregime
