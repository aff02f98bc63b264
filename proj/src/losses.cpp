#include "otcclip/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace otcclip {

void LossWeights::validate() const {
  if (lambda_c < 0 || lambda_im < 0 || lambda_sm < 0)
    throw std::invalid_argument("LossWeights: weights must be >= 0");
  if (K < 1) throw std::invalid_argument("LossWeights: K must be >= 1");
}

ClipLossResult clip_infonce(const Matrix& img_globals, const Matrix& txt_globals, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("clip_infonce: tau must be > 0");
  const std::size_t n = img_globals.rows();
  const std::size_t d = img_globals.cols();
  if (n == 0) throw std::invalid_argument("clip_infonce: empty batch");
  if (txt_globals.rows() != n || txt_globals.cols() != d)
    throw std::invalid_argument("clip_infonce: feature shapes differ");

  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      s(i, j) = dot(img_globals.row(i), txt_globals.row(j), d) / tau;

  // Row-wise (image->text) and column-wise (text->image) softmax terms.
  Matrix prow(n, n), pcol(n, n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double mx = s(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, s(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(s(i, j) - mx);
    for (std::size_t j = 0; j < n; ++j) prow(i, j) = std::exp(s(i, j) - mx) / z;
    loss -= (s(i, i) - (mx + std::log(z)));
  }
  for (std::size_t j = 0; j < n; ++j) {
    double mx = s(0, j);
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, s(i, j));
    double z = 0.0;
    for (std::size_t i = 0; i < n; ++i) z += std::exp(s(i, j) - mx);
    for (std::size_t i = 0; i < n; ++i) pcol(i, j) = std::exp(s(i, j) - mx) / z;
    loss -= (s(j, j) - (mx + std::log(z)));
  }
  const double inv2n = 1.0 / (2.0 * static_cast<double>(n));

  ClipLossResult out;
  out.value = loss * inv2n;
  out.d_img = Matrix(n, d);
  out.d_txt = Matrix(n, d);
  const double gscale = inv2n / tau;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double ds = gscale * ((prow(i, j) - (i == j ? 1.0 : 0.0)) +
                                  (pcol(i, j) - (i == j ? 1.0 : 0.0)));
      const double* yj = txt_globals.row(j);
      const double* fi = img_globals.row(i);
      double* dfi = out.d_img.row(i);
      double* dyj = out.d_txt.row(j);
      for (std::size_t p = 0; p < d; ++p) {
        dfi[p] += ds * yj[p];
        dyj[p] += ds * fi[p];
      }
    }
  }
  return out;
}

namespace {

struct SolveOut {
  double value = 0;
  double pure_cost = 0;
  Matrix neg_ds;  // -dValue/dS, i.e. the plan under the envelope rule
};

SolveOut solve_pair(const SpatialFeatures& x, const SpatialFeatures& y, const SinkhornConfig& cfg,
                    bool unrolled) {
  Matrix s = pairwise_similarity(x, y);
  Matrix c(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.size(); ++i) c.data()[i] = 1.0 - s.data()[i];
  const Weights a = Weights::uniform(c.rows());
  const Weights b = Weights::uniform(c.cols());
  SolveOut out;
  if (unrolled) {
    UnrolledResult r = sinkhorn_value_grad_unrolled(a, b, c, cfg);
    out.value = r.value;
    out.pure_cost = ot_value(r.plan, c, cfg.lambda, false);
    out.neg_ds = std::move(r.grad_cost);  // dS = -dC
  } else {
    TransportPlan plan = sinkhorn_solve(a, b, c, cfg);
    out.value = ot_value(plan, c, cfg.lambda, true);
    out.pure_cost = ot_value(plan, c, cfg.lambda, false);
    out.neg_ds = std::move(plan.t);
  }
  return out;
}

// d_x[u] += sum_v ds_uv * y[v], d_y[v] += sum_u ds_uv * x[u], where the
// similarity gradient is ds = -neg_ds.
void accumulate_similarity_grads(const Matrix& neg_ds, const Matrix& x, const Matrix& y,
                                 Matrix& d_x, Matrix& d_y) {
  const std::size_t d = x.cols();
  for (std::size_t u = 0; u < neg_ds.rows(); ++u) {
    for (std::size_t v = 0; v < neg_ds.cols(); ++v) {
      const double ds = -neg_ds(u, v);
      const double* yv = y.row(v);
      const double* xu = x.row(u);
      double* dxu = d_x.row(u);
      double* dyv = d_y.row(v);
      for (std::size_t p = 0; p < d; ++p) {
        dxu[p] += ds * yv[p];
        dyv[p] += ds * xu[p];
      }
    }
  }
}

}  // namespace

PairLossResult inter_modal_loss(const SpatialFeatures& x, const SpatialFeatures& y,
                                const SinkhornConfig& cfg, bool unrolled) {
  SolveOut so = solve_pair(x, y, cfg, unrolled);
  PairLossResult out;
  out.value = so.value;
  out.pure_cost = so.pure_cost;
  out.d_x = Matrix(x.z.rows(), x.z.cols());
  out.d_y = Matrix(y.z.rows(), y.z.cols());
  accumulate_similarity_grads(so.neg_ds, x.z, y.z, out.d_x, out.d_y);
  return out;
}

PairLossResult intra_modal_loss(const SpatialFeatures& x, const SpatialFeatures& y,
                                const SinkhornConfig& cfg, bool unrolled) {
  PairLossResult out;
  out.d_x = Matrix(x.z.rows(), x.z.cols());
  out.d_y = Matrix(y.z.rows(), y.z.cols());

  SolveOut ii = solve_pair(x, x, cfg, unrolled);
  accumulate_similarity_grads(ii.neg_ds, x.z, x.z, out.d_x, out.d_x);
  SolveOut tt = solve_pair(y, y, cfg, unrolled);
  accumulate_similarity_grads(tt.neg_ds, y.z, y.z, out.d_y, out.d_y);

  out.value = ii.value + tt.value;
  out.pure_cost = ii.pure_cost + tt.pure_cost;
  return out;
}

LossReport total_loss(const std::vector<BatchPair>& batch, int epoch, const LossWeights& w,
                      const SinkhornConfig& cfg, const ModelState& state, bool unrolled) {
  w.validate();
  if (batch.empty()) throw std::invalid_argument("total_loss: empty batch");
  const std::size_t n = batch.size();
  const std::size_t d = state.dims.d;
  const bool gate = (epoch % w.K) == 0;

  LossReport report;
  report.grads = ModelGrads::zeros_like(state);

  Matrix img_g(n, d), txt_g(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < d; ++p) {
      img_g(i, p) = batch[i].img.global.g[p];
      txt_g(i, p) = batch[i].txt.global.g[p];
    }
  }

  ClipLossResult clip;
  if (w.lambda_c > 0) {
    clip = clip_infonce(img_g, txt_g, state.tau);
    report.clip = clip.value;
  }

  std::vector<PairLossResult> inter(n), intra(n);
  const bool want_inter = w.lambda_im > 0;
  const bool want_intra = gate && w.lambda_sm > 0;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const auto& pair = batch[static_cast<std::size_t>(i)];
    if (want_inter)
      inter[static_cast<std::size_t>(i)] =
          inter_modal_loss(pair.img.spatial, pair.txt.spatial, cfg, unrolled);
    if (want_intra)
      intra[static_cast<std::size_t>(i)] =
          intra_modal_loss(pair.img.spatial, pair.txt.spatial, cfg, unrolled);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (want_inter) report.inter += inter[i].value;
    if (want_intra) report.intra += intra[i].value;
  }

  // Per-pair encoder backward runs in parallel into disjoint slots; parameter
  // accumulation below is serial in pair order.
  std::vector<ImageGrads> per_img(n);
  std::vector<TextGrads> per_txt(n);
  std::vector<char> txt_trainable(n, 0);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    const auto& pair = batch[i];
    const std::size_t k_img = pair.img.spatial.z.rows();

    Matrix d_spatial(k_img, d, 0.0);
    if (want_inter) {
      for (std::size_t r = 0; r < k_img; ++r)
        for (std::size_t p = 0; p < d; ++p) d_spatial(r, p) += w.lambda_im * inter[i].d_x(r, p);
    }
    if (want_intra) {
      for (std::size_t r = 0; r < k_img; ++r)
        for (std::size_t p = 0; p < d; ++p) d_spatial(r, p) += w.lambda_sm * intra[i].d_x(r, p);
    }
    Vec d_global(d, 0.0);
    if (w.lambda_c > 0)
      for (std::size_t p = 0; p < d; ++p) d_global[p] = w.lambda_c * clip.d_img(i, p);
    per_img[i] = encode_image_backward(pair.image, state, pair.img.cache, d_spatial, d_global);

    if (pair.caption.has_value()) {
      txt_trainable[i] = 1;
      const std::size_t k_txt = pair.txt.spatial.z.rows();
      Matrix dt(k_txt, d, 0.0);
      if (want_inter) {
        for (std::size_t r = 0; r < k_txt; ++r)
          for (std::size_t p = 0; p < d; ++p) dt(r, p) += w.lambda_im * inter[i].d_y(r, p);
      }
      if (want_intra) {
        for (std::size_t r = 0; r < k_txt; ++r)
          for (std::size_t p = 0; p < d; ++p) dt(r, p) += w.lambda_sm * intra[i].d_y(r, p);
      }
      Vec dg(d, 0.0);
      if (w.lambda_c > 0)
        for (std::size_t p = 0; p < d; ++p) dg[p] = w.lambda_c * clip.d_txt(i, p);
      per_txt[i] = encode_text_backward(*pair.caption, state, pair.txt.cache, dt, dg);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    report.grads.add_scaled(per_img[i], 1.0);
    if (txt_trainable[i]) report.grads.add_scaled(per_txt[i], 1.0);
  }

  report.total = w.lambda_c * report.clip + w.lambda_im * report.inter +
                 (gate ? w.lambda_sm * report.intra : 0.0);
  return report;
}

}  // namespace otcclip
