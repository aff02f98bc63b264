#include "otcclip/ot.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace otcclip {

namespace {

constexpr double kScaleLo = 1e-30;
constexpr double kScaleHi = 1e30;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool scaling_unstable(const Vec& u) {
  for (double x : u) {
    if (x != 0.0 && (x < kScaleLo || x > kScaleHi)) return true;
  }
  return false;
}

/// log(sum_j exp(x_j)) over entries that may be -inf; returns -inf when all
/// entries are.
double log_sum_exp(const Vec& x) {
  double mx = kNegInf;
  for (double v : x)
    if (v > mx) mx = v;
  if (mx == kNegInf) return kNegInf;
  double s = 0.0;
  for (double v : x)
    if (v != kNegInf) s += std::exp(v - mx);
  return mx + std::log(s);
}

void validate_inputs(const Weights& a, const Weights& b, const CostMatrix& c,
                     const SinkhornConfig& cfg) {
  cfg.validate();
  if (a.size() != c.rows() || b.size() != c.cols())
    throw std::invalid_argument("sinkhorn_solve: cost dimensions do not match the weights");
  if (!c.all_finite()) throw std::invalid_argument("sinkhorn_solve: non-finite cost entry");
}

struct MarginalResiduals {
  double row = 0;
  double col = 0;
};

MarginalResiduals residuals_of(const Matrix& t, const Weights& a, const Weights& b) {
  MarginalResiduals r;
  const std::size_t n = t.rows(), m = t.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    const double* ti = t.row(i);
    for (std::size_t j = 0; j < m; ++j) s += ti[j];
    r.row = std::max(r.row, std::abs(s - a.w[i]));
  }
  for (std::size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += t(i, j);
    r.col = std::max(r.col, std::abs(s - b.w[j]));
  }
  return r;
}

}  // namespace

Weights Weights::uniform(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Weights::uniform: empty distribution");
  Weights out;
  out.w.assign(n, 1.0 / static_cast<double>(n));
  return out;
}

double Weights::sum() const { return std::accumulate(w.begin(), w.end(), 0.0); }

void Weights::validate() const {
  if (w.empty()) throw std::invalid_argument("Weights: length must be >= 1");
  for (double x : w) {
    if (!(x >= 0.0) || !std::isfinite(x))
      throw std::invalid_argument("Weights: entries must be nonnegative and finite");
  }
  if (std::abs(sum() - 1.0) > 1e-9) throw std::invalid_argument("Weights: entries must sum to 1");
}

void SinkhornConfig::validate() const {
  if (!(lambda > 0.0) || !std::isfinite(lambda))
    throw std::invalid_argument("SinkhornConfig: lambda must be > 0");
  if (max_iters < 1) throw std::invalid_argument("SinkhornConfig: max_iters must be >= 1");
  if (!(tol > 0.0)) throw std::invalid_argument("SinkhornConfig: tol must be > 0");
  if (!(cost_clamp_multiplier > 0.0))
    throw std::invalid_argument("SinkhornConfig: cost_clamp_multiplier must be > 0");
}

TransportPlan sinkhorn_solve(const Weights& a, const Weights& b, const CostMatrix& c,
                             const SinkhornConfig& cfg) {
  validate_inputs(a, b, c, cfg);
  const std::size_t n = a.size(), m = b.size();
  const double lam = cfg.lambda;
  const double clamp_at = cfg.cost_clamp_multiplier * lam;

  Matrix cl(n, m);  // clamped cost
  Matrix ker(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ci = c.row(i);
    double* cli = cl.row(i);
    double* ki = ker.row(i);
    for (std::size_t j = 0; j < m; ++j) {
      cli[j] = std::min(ci[j], clamp_at);
      ki[j] = std::exp(-cli[j] / lam);
    }
  }

  Vec u(n, 1.0), v(m, 1.0);
  Vec s(n);  // (K v)_i, reused between the row residual check and the next u update
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    const double* ki = ker.row(i);
    for (std::size_t j = 0; j < m; ++j) acc += ki[j];
    s[i] = acc;
  }

  bool log_domain = false;
  Vec f(n, 0.0), g(m, 0.0);  // potentials, used once log_domain is set
  int iters = 0;
  double row_res = std::numeric_limits<double>::infinity();
  double col_res = std::numeric_limits<double>::infinity();

  for (int it = 1; it <= cfg.max_iters && !log_domain; ++it) {
    for (std::size_t i = 0; i < n; ++i) u[i] = (a.w[i] == 0.0 || s[i] == 0.0) ? 0.0 : a.w[i] / s[i];

    col_res = 0.0;
    Vec t(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* ki = ker.row(i);
      const double ui = u[i];
      for (std::size_t j = 0; j < m; ++j) t[j] += ki[j] * ui;
    }
    for (std::size_t j = 0; j < m; ++j) {
      v[j] = (b.w[j] == 0.0 || t[j] == 0.0) ? 0.0 : b.w[j] / t[j];
      col_res = std::max(col_res, std::abs(v[j] * t[j] - b.w[j]));
    }

    row_res = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      const double* ki = ker.row(i);
      for (std::size_t j = 0; j < m; ++j) acc += ki[j] * v[j];
      s[i] = acc;
      row_res = std::max(row_res, std::abs(u[i] * acc - a.w[i]));
    }

    iters = it;
    if (std::max(row_res, col_res) <= cfg.tol) break;
    if (scaling_unstable(u) || scaling_unstable(v)) {
      for (std::size_t i = 0; i < n; ++i) f[i] = u[i] == 0.0 ? kNegInf : lam * std::log(u[i]);
      for (std::size_t j = 0; j < m; ++j) g[j] = v[j] == 0.0 ? kNegInf : lam * std::log(v[j]);
      log_domain = true;
    }
  }

  if (log_domain) {
    Vec buf(std::max(n, m));
    for (int it = iters + 1; it <= cfg.max_iters; ++it) {
      for (std::size_t i = 0; i < n; ++i) {
        if (a.w[i] == 0.0) {
          f[i] = kNegInf;
          continue;
        }
        buf.resize(m);
        for (std::size_t j = 0; j < m; ++j)
          buf[j] = g[j] == kNegInf ? kNegInf : (g[j] - cl(i, j)) / lam;
        f[i] = lam * (std::log(a.w[i]) - log_sum_exp(buf));
      }
      for (std::size_t j = 0; j < m; ++j) {
        if (b.w[j] == 0.0) {
          g[j] = kNegInf;
          continue;
        }
        buf.resize(n);
        for (std::size_t i = 0; i < n; ++i)
          buf[i] = f[i] == kNegInf ? kNegInf : (f[i] - cl(i, j)) / lam;
        g[j] = lam * (std::log(b.w[j]) - log_sum_exp(buf));
      }

      row_res = col_res = 0.0;
      Vec colsum(m, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        double rowsum = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          double e = (f[i] == kNegInf || g[j] == kNegInf)
                         ? 0.0
                         : std::exp((f[i] + g[j] - cl(i, j)) / lam);
          rowsum += e;
          colsum[j] += e;
        }
        row_res = std::max(row_res, std::abs(rowsum - a.w[i]));
      }
      for (std::size_t j = 0; j < m; ++j) col_res = std::max(col_res, std::abs(colsum[j] - b.w[j]));

      iters = it;
      if (std::max(row_res, col_res) <= cfg.tol) break;
    }
  }

  TransportPlan out;
  out.t = Matrix(n, m);
  if (log_domain) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j)
        out.t(i, j) = (f[i] == kNegInf || g[j] == kNegInf)
                          ? 0.0
                          : std::exp((f[i] + g[j] - cl(i, j)) / lam);
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      const double* ki = ker.row(i);
      double* ti = out.t.row(i);
      for (std::size_t j = 0; j < m; ++j) ti[j] = u[i] * ki[j] * v[j];
    }
  }
  const MarginalResiduals res = residuals_of(out.t, a, b);
  out.row_marginal_residual = res.row;
  out.col_marginal_residual = res.col;
  out.iterations_used = iters;
  return out;
}

double ot_value(const TransportPlan& plan, const CostMatrix& c, double lambda,
                bool include_entropy) {
  if (plan.t.rows() != c.rows() || plan.t.cols() != c.cols())
    throw std::invalid_argument("ot_value: plan and cost dimensions differ");
  double cost = 0.0;
  for (std::size_t i = 0; i < plan.t.rows(); ++i) {
    const double* ti = plan.t.row(i);
    const double* ci = c.row(i);
    for (std::size_t j = 0; j < plan.t.cols(); ++j) cost += ti[j] * ci[j];
  }
  if (!include_entropy) return cost;
  double ent = 0.0;
  for (double t : plan.t.data()) {
    if (t > 0.0) ent += t * (std::log(t) - 1.0);
  }
  return cost + lambda * ent;
}

std::pair<double, TransportPlan> exact_ot_oracle(const CostMatrix& c) {
  const std::size_t n = c.rows();
  if (n != c.cols()) throw std::invalid_argument("exact_ot_oracle: cost must be square");
  if (n == 0 || n > 8) throw std::invalid_argument("exact_ot_oracle: requires 1 <= n <= 8");

  std::vector<std::size_t> perm(n), best(n);
  std::iota(perm.begin(), perm.end(), 0);
  best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (std::size_t i = 0; i < n; ++i) cost += c(i, perm[i]);
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  TransportPlan plan;
  plan.t = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) plan.t(i, best[i]) = 1.0 / static_cast<double>(n);
  plan.iterations_used = 0;
  return {best_cost / static_cast<double>(n), plan};
}

UnrolledResult sinkhorn_value_grad_unrolled(const Weights& a, const Weights& b,
                                            const CostMatrix& c, const SinkhornConfig& cfg) {
  validate_inputs(a, b, c, cfg);
  const std::size_t n = a.size(), m = b.size();
  const double lam = cfg.lambda;
  const double clamp_at = cfg.cost_clamp_multiplier * lam;

  Matrix cl(n, m), ker(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      cl(i, j) = std::min(c(i, j), clamp_at);
      ker(i, j) = std::exp(-cl(i, j) / lam);
    }

  // Forward pass, taping every scaling vector.
  std::vector<Vec> us, vs, ss, ts;  // u_k, v_k and their denominators
  Vec u(n, 1.0), v(m, 1.0);
  int iters = 0;
  for (int it = 1; it <= cfg.max_iters; ++it) {
    Vec s(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += ker(i, j) * v[j];
      s[i] = acc;
      u[i] = (a.w[i] == 0.0 || acc == 0.0) ? 0.0 : a.w[i] / acc;
    }
    Vec t(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) acc += ker(i, j) * u[i];
      t[j] = acc;
      v[j] = (b.w[j] == 0.0 || acc == 0.0) ? 0.0 : b.w[j] / acc;
    }
    if (scaling_unstable(u) || scaling_unstable(v))
      throw std::runtime_error(
          "sinkhorn_value_grad_unrolled: scaling left the stable range; diagnostic mode supports "
          "the raw-kernel path only");
    ss.push_back(std::move(s));
    ts.push_back(std::move(t));
    us.push_back(u);
    vs.push_back(v);
    iters = it;

    double row_res = 0.0, col_res = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) acc += ker(i, j) * v[j];
      row_res = std::max(row_res, std::abs(u[i] * acc - a.w[i]));
    }
    for (std::size_t j = 0; j < m; ++j)
      col_res = std::max(col_res, std::abs(v[j] * ts.back()[j] - b.w[j]));
    if (std::max(row_res, col_res) <= cfg.tol) break;
  }

  UnrolledResult out;
  out.plan.t = Matrix(n, m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.plan.t(i, j) = u[i] * ker(i, j) * v[j];
  const MarginalResiduals res = residuals_of(out.plan.t, a, b);
  out.plan.row_marginal_residual = res.row;
  out.plan.col_marginal_residual = res.col;
  out.plan.iterations_used = iters;
  out.value = ot_value(out.plan, c, lam, true);

  // Reverse pass. dL/dT = C + lam*log T; then back through every scaling.
  Matrix dker(n, m, 0.0);
  out.grad_cost = Matrix(n, m, 0.0);
  Vec du(n, 0.0), dv(m, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double tij = out.plan.t(i, j);
      if (tij <= 0.0) continue;
      const double dT = c(i, j) + lam * std::log(tij);
      du[i] += dT * ker(i, j) * v[j];
      dv[j] += dT * ker(i, j) * u[i];
      dker(i, j) += dT * u[i] * v[j];
      out.grad_cost(i, j) += tij;  // direct cost term, plan held fixed
    }
  }

  for (int k = iters - 1; k >= 0; --k) {
    const Vec& uk = us[static_cast<std::size_t>(k)];
    const Vec& vk = vs[static_cast<std::size_t>(k)];
    const Vec& sk = ss[static_cast<std::size_t>(k)];
    const Vec& tk = ts[static_cast<std::size_t>(k)];
    const Vec* vprev = k > 0 ? &vs[static_cast<std::size_t>(k - 1)] : nullptr;

    // v_k = b / t_k with t_k = K^T u_k
    Vec dt(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
      if (vk[j] == 0.0 || tk[j] == 0.0) continue;
      dt[j] = -dv[j] * b.w[j] / (tk[j] * tk[j]);
    }
    Vec du_acc(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        acc += ker(i, j) * dt[j];
        dker(i, j) += uk[i] * dt[j];
      }
      du_acc[i] = acc;
    }
    for (std::size_t i = 0; i < n; ++i) du[i] += du_acc[i];

    // u_k = a / s_k with s_k = K v_{k-1}
    Vec ds(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (uk[i] == 0.0 || sk[i] == 0.0) continue;
      ds[i] = -du[i] * a.w[i] / (sk[i] * sk[i]);
    }
    Vec dv_next(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double vi = ds[i];
      for (std::size_t j = 0; j < m; ++j) {
        const double vpj = vprev ? (*vprev)[j] : 1.0;
        dv_next[j] += ker(i, j) * vi;
        dker(i, j) += vpj * vi;
      }
    }
    dv = std::move(dv_next);
    std::fill(du.begin(), du.end(), 0.0);
  }

  // ker = exp(-cl/lam); cl = min(c, clamp) so clamped cells have zero slope.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (c(i, j) < clamp_at) out.grad_cost(i, j) += dker(i, j) * (-ker(i, j) / lam);
    }
  return out;
}

}  // namespace otcclip
