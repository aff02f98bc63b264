#include "otcclip/features.hpp"

#include <cmath>
#include <stdexcept>

#include "otcclip/rng.hpp"

namespace otcclip {

namespace {

constexpr double kNormFloor = 1e-12;

/// Shared forward chain: rows of `lin_in` go through W/bias, tanh, row
/// normalization and normalized mean pooling.
Encoded forward_rows(const Matrix& lin_in, const Matrix& W, const Vec& bias, const char* what) {
  const std::size_t k = lin_in.rows();
  const std::size_t d = W.cols();

  Encoded out;
  out.cache.pre = Matrix(k, d);
  out.cache.row_norms.assign(k, 0.0);
  out.spatial.z = Matrix(k, d);

  for (std::size_t j = 0; j < k; ++j) {
    const double* x = lin_in.row(j);
    double* t = out.cache.pre.row(j);
    for (std::size_t p = 0; p < d; ++p) {
      double acc = bias[p];
      for (std::size_t q = 0; q < lin_in.cols(); ++q) acc += x[q] * W(q, p);
      t[p] = std::tanh(acc);
    }
    const double r = std::sqrt(dot(t, t, d));
    if (!(r >= kNormFloor))
      throw std::runtime_error(std::string(what) + ": degenerate feature norm");
    out.cache.row_norms[j] = r;
    double* z = out.spatial.z.row(j);
    for (std::size_t p = 0; p < d; ++p) z[p] = t[p] / r;
  }

  out.cache.mean.assign(d, 0.0);
  for (std::size_t j = 0; j < k; ++j) {
    const double* z = out.spatial.z.row(j);
    for (std::size_t p = 0; p < d; ++p) out.cache.mean[p] += z[p];
  }
  for (std::size_t p = 0; p < d; ++p) out.cache.mean[p] /= static_cast<double>(k);
  const double rho = l2_norm(out.cache.mean);
  if (!(rho >= kNormFloor))
    throw std::runtime_error(std::string(what) + ": degenerate global feature norm");
  out.cache.mean_norm = rho;
  out.global.g.assign(d, 0.0);
  for (std::size_t p = 0; p < d; ++p) out.global.g[p] = out.cache.mean[p] / rho;
  return out;
}

/// Backward of the shared chain. Returns dLoss/d(linear input rows); parameter
/// grads accumulate into dW/dbias.
Matrix backward_rows(const Matrix& lin_in, const Matrix& W, const EncodeCache& cache,
                     const Matrix& d_spatial, const Vec& d_global, Matrix& dW, Vec& dbias) {
  const std::size_t k = lin_in.rows();
  const std::size_t d = W.cols();
  const std::size_t d_src = lin_in.cols();

  // Recover normalized rows and the pooled direction from the cache.
  Vec g(d);
  for (std::size_t p = 0; p < d; ++p) g[p] = cache.mean[p] / cache.mean_norm;

  Vec dmean(d, 0.0);
  if (!d_global.empty()) {
    const double gdot = dot(g.data(), d_global.data(), d);
    for (std::size_t p = 0; p < d; ++p) dmean[p] = (d_global[p] - g[p] * gdot) / cache.mean_norm;
  }

  Matrix d_in(k, d_src, 0.0);
  Vec dz(d), dt(d), dq(d), z(d);
  for (std::size_t j = 0; j < k; ++j) {
    const double* t = cache.pre.row(j);
    const double r = cache.row_norms[j];
    for (std::size_t p = 0; p < d; ++p) z[p] = t[p] / r;

    for (std::size_t p = 0; p < d; ++p) {
      dz[p] = dmean[p] / static_cast<double>(k);
      if (!d_spatial.empty()) dz[p] += d_spatial(j, p);
    }
    const double zdot = dot(z.data(), dz.data(), d);
    for (std::size_t p = 0; p < d; ++p) dt[p] = (dz[p] - z[p] * zdot) / r;
    for (std::size_t p = 0; p < d; ++p) dq[p] = dt[p] * (1.0 - t[p] * t[p]);

    const double* x = lin_in.row(j);
    for (std::size_t q = 0; q < d_src; ++q) {
      const double xq = x[q];
      double acc = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        dW(q, p) += xq * dq[p];
        acc += dq[p] * W(q, p);
      }
      d_in(j, q) = acc;
    }
    for (std::size_t p = 0; p < d; ++p) dbias[p] += dq[p];
  }
  return d_in;
}

}  // namespace

void RawImage::validate() const {
  if (h * w < 1 || patches.rows() != h * w)
    throw std::invalid_argument("RawImage: patches must be an (h*w) x d_in matrix with h*w >= 1");
  if (!patches.all_finite()) throw std::invalid_argument("RawImage: non-finite patch entry");
}

void RawCaption::validate(std::size_t l_max) const {
  if (tokens.empty() || tokens.size() > l_max)
    throw std::invalid_argument("RawCaption: token count must be in [1, l_max]");
  for (auto t : tokens)
    if (t >= vocab_size) throw std::invalid_argument("RawCaption: token id out of vocabulary");
}

void ModelState::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("ModelState: tau must be > 0");
  if (img_proj.rows() != dims.d_in || img_proj.cols() != dims.d ||
      img_bias.size() != dims.d || txt_embed.rows() != dims.vocab_size ||
      txt_embed.cols() != dims.d_e || txt_proj.rows() != dims.d_e ||
      txt_proj.cols() != dims.d || txt_bias.size() != dims.d)
    throw std::invalid_argument("ModelState: parameter shapes do not match dims");
  if (!img_proj.all_finite() || !all_finite(img_bias) || !txt_embed.all_finite() ||
      !txt_proj.all_finite() || !all_finite(txt_bias))
    throw std::invalid_argument("ModelState: non-finite parameter");
}

ModelState init_model_state(const ModelDims& dims, std::uint64_t seed) {
  ModelState m;
  m.dims = dims;
  m.rng_seed = seed;
  m.img_proj = Matrix(dims.d_in, dims.d);
  m.img_bias.assign(dims.d, 0.0);
  m.txt_embed = Matrix(dims.vocab_size, dims.d_e);
  m.txt_proj = Matrix(dims.d_e, dims.d);
  m.txt_bias.assign(dims.d, 0.0);

  Rng rp(derive_seed(seed, "img_proj"));
  const double si = 1.0 / std::sqrt(static_cast<double>(dims.d_in));
  for (double& v : m.img_proj.data()) v = rp.normal(0.0, si);

  Rng re(derive_seed(seed, "txt_embed"));
  for (double& v : m.txt_embed.data()) v = re.normal(0.0, 1.0);

  Rng rt(derive_seed(seed, "txt_proj"));
  const double st = 1.0 / std::sqrt(static_cast<double>(dims.d_e));
  for (double& v : m.txt_proj.data()) v = rt.normal(0.0, st);
  return m;
}

Encoded encode_image(const RawImage& img, const ModelState& m) {
  img.validate();
  if (img.patches.cols() != m.dims.d_in)
    throw std::invalid_argument("encode_image: patch dimension does not match the model");
  return forward_rows(img.patches, m.img_proj, m.img_bias, "encode_image");
}

Encoded encode_text(const RawCaption& cap, const ModelState& m) {
  cap.validate(m.dims.l_max);
  if (cap.vocab_size != m.dims.vocab_size)
    throw std::invalid_argument("encode_text: vocabulary size does not match the model");
  Matrix emb(cap.tokens.size(), m.dims.d_e);
  for (std::size_t j = 0; j < cap.tokens.size(); ++j) {
    const double* row = m.txt_embed.row(cap.tokens[j]);
    for (std::size_t q = 0; q < m.dims.d_e; ++q) emb(j, q) = row[q];
  }
  return forward_rows(emb, m.txt_proj, m.txt_bias, "encode_text");
}

ImageGrads encode_image_backward(const RawImage& img, const ModelState& m, const EncodeCache& cache,
                                 const Matrix& d_spatial, const Vec& d_global) {
  ImageGrads g;
  g.d_img_proj = Matrix(m.dims.d_in, m.dims.d);
  g.d_img_bias.assign(m.dims.d, 0.0);
  g.d_patches =
      backward_rows(img.patches, m.img_proj, cache, d_spatial, d_global, g.d_img_proj, g.d_img_bias);
  return g;
}

TextGrads encode_text_backward(const RawCaption& cap, const ModelState& m, const EncodeCache& cache,
                               const Matrix& d_spatial, const Vec& d_global) {
  Matrix emb(cap.tokens.size(), m.dims.d_e);
  for (std::size_t j = 0; j < cap.tokens.size(); ++j) {
    const double* row = m.txt_embed.row(cap.tokens[j]);
    for (std::size_t q = 0; q < m.dims.d_e; ++q) emb(j, q) = row[q];
  }
  TextGrads g;
  g.d_txt_embed = Matrix(m.dims.vocab_size, m.dims.d_e);
  g.d_txt_proj = Matrix(m.dims.d_e, m.dims.d);
  g.d_txt_bias.assign(m.dims.d, 0.0);
  Matrix d_emb = backward_rows(emb, m.txt_proj, cache, d_spatial, d_global, g.d_txt_proj, g.d_txt_bias);
  for (std::size_t j = 0; j < cap.tokens.size(); ++j) {
    double* dst = g.d_txt_embed.row(cap.tokens[j]);
    const double* src = d_emb.row(j);
    for (std::size_t q = 0; q < m.dims.d_e; ++q) dst[q] += src[q];
  }
  return g;
}

Matrix pairwise_similarity(const SpatialFeatures& x, const SpatialFeatures& y) {
  if (x.z.cols() != y.z.cols())
    throw std::invalid_argument("pairwise_similarity: feature dimensions differ");
  Matrix s(x.z.rows(), y.z.rows());
  for (std::size_t u = 0; u < x.z.rows(); ++u)
    for (std::size_t v = 0; v < y.z.rows(); ++v)
      s(u, v) = dot(x.z.row(u), y.z.row(v), x.z.cols());
  return s;
}

ModelGrads ModelGrads::zeros_like(const ModelState& m) {
  ModelGrads g;
  g.img_proj = Matrix(m.img_proj.rows(), m.img_proj.cols());
  g.img_bias.assign(m.img_bias.size(), 0.0);
  g.txt_embed = Matrix(m.txt_embed.rows(), m.txt_embed.cols());
  g.txt_proj = Matrix(m.txt_proj.rows(), m.txt_proj.cols());
  g.txt_bias.assign(m.txt_bias.size(), 0.0);
  return g;
}

namespace {
void axpy(std::vector<double>& y, const std::vector<double>& x, double s) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}
}  // namespace

void ModelGrads::add_scaled(const ImageGrads& g, double s) {
  axpy(img_proj.data(), g.d_img_proj.data(), s);
  axpy(img_bias, g.d_img_bias, s);
}

void ModelGrads::add_scaled(const TextGrads& g, double s) {
  axpy(txt_embed.data(), g.d_txt_embed.data(), s);
  axpy(txt_proj.data(), g.d_txt_proj.data(), s);
  axpy(txt_bias, g.d_txt_bias, s);
}

void ModelGrads::add_scaled(const ModelGrads& g, double s) {
  axpy(img_proj.data(), g.img_proj.data(), s);
  axpy(img_bias, g.img_bias, s);
  axpy(txt_embed.data(), g.txt_embed.data(), s);
  axpy(txt_proj.data(), g.txt_proj.data(), s);
  axpy(txt_bias, g.txt_bias, s);
}

std::map<std::string, Matrix> ModelGrads::as_map() const {
  std::map<std::string, Matrix> m;
  m["img_proj"] = img_proj;
  Matrix ib(1, img_bias.size());
  for (std::size_t i = 0; i < img_bias.size(); ++i) ib(0, i) = img_bias[i];
  m["img_bias"] = ib;
  m["txt_embed"] = txt_embed;
  m["txt_proj"] = txt_proj;
  Matrix tb(1, txt_bias.size());
  for (std::size_t i = 0; i < txt_bias.size(); ++i) tb(0, i) = txt_bias[i];
  m["txt_bias"] = tb;
  return m;
}

void apply_sgd(ModelState& m, const ModelGrads& g, double lr) {
  axpy(m.img_proj.data(), g.img_proj.data(), -lr);
  axpy(m.img_bias, g.img_bias, -lr);
  axpy(m.txt_embed.data(), g.txt_embed.data(), -lr);
  axpy(m.txt_proj.data(), g.txt_proj.data(), -lr);
  axpy(m.txt_bias, g.txt_bias, -lr);
  m.step += 1;
}

}  // namespace otcclip
