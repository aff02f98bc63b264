#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "otcclip/losses.hpp"
#include "otcclip/rng.hpp"
#include "test_util.hpp"

using namespace otcclip;
using otcclip::test::random_caption;
using otcclip::test::random_image;
using otcclip::test::random_unit_rows;
using otcclip::test::rel_err;

namespace {

ModelDims small_dims() {
  ModelDims d;
  d.d_in = 5;
  d.d = 6;
  d.d_e = 4;
  d.vocab_size = 12;
  d.h = 2;
  d.w = 2;
  d.l_max = 5;
  return d;
}

Matrix unit_row_matrix(Rng& rng, std::size_t n, std::size_t d) {
  return random_unit_rows(rng, n, d).z;
}

/// Brute-force evaluation of the symmetric InfoNCE objective, written as two
/// independent literal sums.
double infonce_reference(const Matrix& f, const Matrix& y, double tau) {
  const std::size_t n = f.rows();
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0;
    for (std::size_t j = 0; j < n; ++j)
      denom += std::exp(dot(f.row(i), y.row(j), f.cols()) / tau);
    loss -= std::log(std::exp(dot(f.row(i), y.row(i), f.cols()) / tau) / denom) / (2.0 * n);
  }
  for (std::size_t j = 0; j < n; ++j) {
    double denom = 0;
    for (std::size_t i = 0; i < n; ++i)
      denom += std::exp(dot(f.row(i), y.row(j), f.cols()) / tau);
    loss -= std::log(std::exp(dot(f.row(j), y.row(j), f.cols()) / tau) / denom) / (2.0 * n);
  }
  return loss;
}

SinkhornConfig tight_cfg() {
  SinkhornConfig cfg;
  cfg.tol = 1e-9;
  cfg.max_iters = 5000;
  return cfg;
}

BatchPair make_pair(const ModelState& m, Rng& rng) {
  const ModelDims& dims = m.dims;
  BatchPair pair;
  pair.image = random_image(rng, dims.h, dims.w, dims.d_in);
  pair.img = encode_image(pair.image, m);
  pair.caption = random_caption(rng, 2 + rng.uniform_index(dims.l_max - 1), dims.vocab_size);
  pair.txt = encode_text(*pair.caption, m);
  return pair;
}

double total_loss_value(const std::vector<BatchPair>& proto, int epoch, const LossWeights& w,
                        const SinkhornConfig& cfg, const ModelState& m) {
  // Re-encode from the raw inputs so parameter perturbations propagate.
  std::vector<BatchPair> batch = proto;
  for (BatchPair& p : batch) {
    p.img = encode_image(p.image, m);
    p.txt = encode_text(*p.caption, m);
  }
  return total_loss(batch, epoch, w, cfg, m).total;
}

}  // namespace

TEST_CASE("InfoNCE closed forms") {
  SUBCASE("N = 1 gives zero loss") {
    Rng rng(1);
    const Matrix f = unit_row_matrix(rng, 1, 6);
    const Matrix y = unit_row_matrix(rng, 1, 6);
    CHECK(clip_infonce(f, y, 0.3).value == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("all 2N features identical gives log N") {
    Matrix f(4, 6, 0.0), y(4, 6, 0.0);
    for (std::size_t i = 0; i < 4; ++i) f(i, 2) = y(i, 2) = 1.0;
    CHECK(clip_infonce(f, y, 0.7).value == doctest::Approx(std::log(4.0)).epsilon(1e-9));
  }
}

TEST_CASE("InfoNCE matches the brute-force formula and finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(3, "infonce", seed));
    const std::size_t n = 5, d = 6;
    Matrix f = unit_row_matrix(rng, n, d);
    Matrix y = unit_row_matrix(rng, n, d);
    const double tau = 0.2 + rng.uniform() * 0.6;

    const ClipLossResult res = clip_infonce(f, y, tau);
    CHECK(std::abs(res.value - infonce_reference(f, y, tau)) < 1e-10);

    const double h = 1e-5;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < d; ++p) {
        {
          Matrix fp = f, fm = f;
          fp(i, p) += h;
          fm(i, p) -= h;
          const double fd =
              (infonce_reference(fp, y, tau) - infonce_reference(fm, y, tau)) / (2 * h);
          CHECK(rel_err(res.d_img(i, p), fd, 1e-7) < 1e-3);
        }
        {
          Matrix yp = y, ym = y;
          yp(i, p) += h;
          ym(i, p) -= h;
          const double fd =
              (infonce_reference(f, yp, tau) - infonce_reference(f, ym, tau)) / (2 * h);
          CHECK(rel_err(res.d_txt(i, p), fd, 1e-7) < 1e-3);
        }
      }
    }
  }
}

TEST_CASE("InfoNCE is invariant under a simultaneous batch permutation") {
  Rng rng(5);
  const std::size_t n = 6, d = 8;
  const Matrix f = unit_row_matrix(rng, n, d);
  const Matrix y = unit_row_matrix(rng, n, d);
  const double base = clip_infonce(f, y, 0.4).value;

  const std::size_t perm[6] = {4, 2, 0, 5, 1, 3};
  Matrix fp(n, d), yp(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < d; ++p) {
      fp(perm[i], p) = f(i, p);
      yp(perm[i], p) = y(i, p);
    }
  CHECK(std::abs(clip_infonce(fp, yp, 0.4).value - base) < 1e-12);
}

TEST_CASE("InfoNCE rejects a nonpositive temperature") {
  Rng rng(6);
  const Matrix f = unit_row_matrix(rng, 2, 4);
  CHECK_THROWS_AS(clip_infonce(f, f, 0.0), std::invalid_argument);
}

TEST_CASE("inter-modal loss closed forms") {
  SinkhornConfig cfg;
  SUBCASE("perfectly aligned pair costs only the entropic term") {
    const std::size_t hw = 4, l = 3, d = 6;
    SpatialFeatures x, y;
    x.z = Matrix(hw, d, 0.0);
    y.z = Matrix(l, d, 0.0);
    for (std::size_t i = 0; i < hw; ++i) x.z(i, 1) = 1.0;
    for (std::size_t i = 0; i < l; ++i) y.z(i, 1) = 1.0;
    const double expected = cfg.lambda * (-std::log(double(hw * l)) - 1.0);
    CHECK(inter_modal_loss(x, y, cfg).value == doctest::Approx(expected).epsilon(1e-9));
  }
  SUBCASE("1x1 pair is (1 - s) - lambda") {
    Rng rng(7);
    const SpatialFeatures x = random_unit_rows(rng, 1, 6);
    const SpatialFeatures y = random_unit_rows(rng, 1, 6);
    const double s = dot(x.z.row(0), y.z.row(0), 6);
    CHECK(inter_modal_loss(x, y, cfg).value ==
          doctest::Approx((1.0 - s) - cfg.lambda).epsilon(1e-9));
  }
}

TEST_CASE("inter-modal envelope gradients agree with finite differences") {
  const SinkhornConfig cfg = tight_cfg();
  const double h = 1e-5;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(8, "inter_fd", seed));
    SpatialFeatures x = random_unit_rows(rng, 4, 8);
    SpatialFeatures y = random_unit_rows(rng, 3, 8);
    const PairLossResult res = inter_modal_loss(x, y, cfg);

    for (std::size_t i = 0; i < x.z.size(); ++i) {
      SpatialFeatures xp = x, xm = x;
      xp.z.data()[i] += h;
      xm.z.data()[i] -= h;
      const double fd =
          (inter_modal_loss(xp, y, cfg).value - inter_modal_loss(xm, y, cfg).value) / (2 * h);
      CHECK(rel_err(res.d_x.data()[i], fd, 1e-7) < 1e-3);
    }
    for (std::size_t i = 0; i < y.z.size(); ++i) {
      SpatialFeatures yp = y, ym = y;
      yp.z.data()[i] += h;
      ym.z.data()[i] -= h;
      const double fd =
          (inter_modal_loss(x, yp, cfg).value - inter_modal_loss(x, ym, cfg).value) / (2 * h);
      CHECK(rel_err(res.d_y.data()[i], fd, 1e-7) < 1e-3);
    }
  }
}

TEST_CASE("inter-modal loss drops when a mismatched token copies its best patch") {
  SinkhornConfig cfg;
  SpatialFeatures x;
  x.z = Matrix(3, 8, 0.0);
  x.z(0, 0) = x.z(1, 1) = x.z(2, 2) = 1.0;
  SpatialFeatures y;
  y.z = Matrix(2, 8, 0.0);
  y.z(0, 0) = 1.0;
  y.z(1, 7) = 1.0;  // mismatched token
  const double before = inter_modal_loss(x, y, cfg).value;
  y.z(1, 7) = 0.0;
  y.z(1, 1) = 1.0;  // copy of its best-matching patch row
  const double after = inter_modal_loss(x, y, cfg).value;
  CHECK(after < before);
}

TEST_CASE("intra-modal loss closed forms and the ot_core cross-check") {
  SinkhornConfig cfg;
  SUBCASE("single patch and token give -2*lambda") {
    Rng rng(9);
    const SpatialFeatures x = random_unit_rows(rng, 1, 6);
    const SpatialFeatures y = random_unit_rows(rng, 1, 6);
    CHECK(intra_modal_loss(x, y, cfg).value == doctest::Approx(-2.0 * cfg.lambda).epsilon(1e-9));
  }
  SUBCASE("orthonormal rows reproduce the exchange-cost OT value") {
    SpatialFeatures x;
    x.z = Matrix(2, 6, 0.0);
    x.z(0, 0) = 1.0;
    x.z(1, 1) = 1.0;
    Rng rng(10);
    const SpatialFeatures y = random_unit_rows(rng, 1, 6);

    Matrix exchange(2, 2, 0.0);
    exchange(0, 1) = exchange(1, 0) = 1.0;
    const TransportPlan plan =
        sinkhorn_solve(Weights::uniform(2), Weights::uniform(2), exchange, cfg);
    const double image_term = ot_value(plan, exchange, cfg.lambda, true);
    const double text_term = -cfg.lambda;  // single token
    CHECK(intra_modal_loss(x, y, cfg).value ==
          doctest::Approx(image_term + text_term).epsilon(1e-9));
  }
  SUBCASE("value decomposes into two independent entropic OT values") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(derive_seed(11, "intra_decomp", seed));
      const SpatialFeatures x = random_unit_rows(rng, 4, 8);
      const SpatialFeatures y = random_unit_rows(rng, 3, 8);

      const auto self_value = [&](const SpatialFeatures& f) {
        const Matrix s = pairwise_similarity(f, f);
        Matrix c(s.rows(), s.cols());
        for (std::size_t i = 0; i < s.size(); ++i) c.data()[i] = 1.0 - s.data()[i];
        const TransportPlan plan =
            sinkhorn_solve(Weights::uniform(c.rows()), Weights::uniform(c.cols()), c, cfg);
        return ot_value(plan, c, cfg.lambda, true);
      };
      CHECK(std::abs(intra_modal_loss(x, y, cfg).value - (self_value(x) + self_value(y))) < 1e-9);
    }
  }
}

TEST_CASE("intra-modal envelope gradients agree with finite differences") {
  const SinkhornConfig cfg = tight_cfg();
  const double h = 1e-5;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(12, "intra_fd", seed));
    SpatialFeatures x = random_unit_rows(rng, 4, 8);
    SpatialFeatures y = random_unit_rows(rng, 3, 8);
    const PairLossResult res = intra_modal_loss(x, y, cfg);

    for (std::size_t i = 0; i < x.z.size(); ++i) {
      SpatialFeatures xp = x, xm = x;
      xp.z.data()[i] += h;
      xm.z.data()[i] -= h;
      const double fd =
          (intra_modal_loss(xp, y, cfg).value - intra_modal_loss(xm, y, cfg).value) / (2 * h);
      CHECK(rel_err(res.d_x.data()[i], fd, 1e-7) < 1e-3);
    }
  }
}

TEST_CASE("unrolled and envelope gradients agree at convergence") {
  const SinkhornConfig cfg = tight_cfg();
  Rng rng(13);
  const SpatialFeatures x = random_unit_rows(rng, 3, 8);
  const SpatialFeatures y = random_unit_rows(rng, 4, 8);
  const PairLossResult env = inter_modal_loss(x, y, cfg, false);
  const PairLossResult unr = inter_modal_loss(x, y, cfg, true);
  CHECK(std::abs(env.value - unr.value) < 1e-9);
  for (std::size_t i = 0; i < env.d_x.size(); ++i)
    CHECK(std::abs(env.d_x.data()[i] - unr.d_x.data()[i]) < 1e-6);
  for (std::size_t i = 0; i < env.d_y.size(); ++i)
    CHECK(std::abs(env.d_y.data()[i] - unr.d_y.data()[i]) < 1e-6);
}

TEST_CASE("total loss composition and the epoch gate") {
  const ModelDims dims = small_dims();
  const ModelState m = init_model_state(dims, 21);
  Rng rng(22);
  std::vector<BatchPair> batch;
  for (int i = 0; i < 3; ++i) batch.push_back(make_pair(m, rng));
  const SinkhornConfig cfg;

  SUBCASE("clip-only weights reduce the total to the clip term") {
    LossWeights w;
    w.lambda_c = 1.0;
    w.lambda_im = 0.0;
    w.lambda_sm = 0.0;
    const LossReport r = total_loss(batch, 4, w, cfg, m);
    CHECK(r.total == r.clip);
  }
  SUBCASE("epoch 1 with K = 2 excludes the intra term") {
    LossWeights w;  // defaults: 1, 2, 0.4, K=2
    CHECK(w.lambda_c == 1.0);
    CHECK(w.lambda_im == 2.0);
    CHECK(w.lambda_sm == 0.4);
    CHECK(w.K == 2);
    const LossReport odd = total_loss(batch, 1, w, cfg, m);
    CHECK(odd.intra == 0.0);
    CHECK(std::abs(odd.total - (w.lambda_c * odd.clip + w.lambda_im * odd.inter)) < 1e-12);

    const LossReport even = total_loss(batch, 2, w, cfg, m);
    CHECK(even.intra != 0.0);
    CHECK(std::abs(even.total - (w.lambda_c * even.clip + w.lambda_im * even.inter +
                                 w.lambda_sm * even.intra)) < 1e-12);
  }
}

TEST_CASE("total loss parameter gradients agree with finite differences") {
  const ModelDims dims = small_dims();
  const SinkhornConfig cfg = tight_cfg();
  const double h = 1e-5;
  LossWeights w;  // full defaults so every term contributes

  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ModelState m = init_model_state(dims, derive_seed(30, "tl_state", seed));
    Rng rng(derive_seed(30, "tl_case", seed));
    std::vector<BatchPair> batch;
    for (int i = 0; i < 2; ++i) batch.push_back(make_pair(m, rng));
    const int epoch = 2;  // gated epoch: all three terms active

    const LossReport rep = total_loss(batch, epoch, w, cfg, m);

    // Spot-check a seeded sample of coordinates in every parameter tensor.
    struct Slot {
      double* param;
      double analytic;
    };
    std::vector<Slot> slots;
    const auto pick = [&](Matrix& pm, const Matrix& gm, std::size_t count) {
      for (std::size_t c = 0; c < count; ++c) {
        const std::size_t i = rng.uniform_index(pm.size());
        slots.push_back({&pm.data()[i], gm.data()[i]});
      }
    };
    pick(m.img_proj, rep.grads.img_proj, 6);
    pick(m.txt_proj, rep.grads.txt_proj, 6);
    pick(m.txt_embed, rep.grads.txt_embed, 6);
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t i = rng.uniform_index(m.img_bias.size());
      slots.push_back({&m.img_bias[i], rep.grads.img_bias[i]});
      const std::size_t j = rng.uniform_index(m.txt_bias.size());
      slots.push_back({&m.txt_bias[j], rep.grads.txt_bias[j]});
    }

    for (const Slot& s : slots) {
      const double saved = *s.param;
      *s.param = saved + h;
      const double up = total_loss_value(batch, epoch, w, cfg, m);
      *s.param = saved - h;
      const double dn = total_loss_value(batch, epoch, w, cfg, m);
      *s.param = saved;
      CHECK(rel_err(s.analytic, (up - dn) / (2 * h), 1e-7) < 1e-3);
    }
  }
}

TEST_CASE("frozen caption sides contribute no text gradient") {
  const ModelDims dims = small_dims();
  const ModelState m = init_model_state(dims, 31);
  Rng rng(32);
  BatchPair pair = make_pair(m, rng);
  pair.caption.reset();  // pool snapshot: caption side frozen
  LossWeights w;
  const LossReport r = total_loss({pair}, 2, w, SinkhornConfig{}, m);
  for (double v : r.grads.txt_embed.data()) CHECK(v == 0.0);
  for (double v : r.grads.txt_proj.data()) CHECK(v == 0.0);
  bool img_nonzero = false;
  for (double v : r.grads.img_proj.data())
    if (v != 0.0) img_nonzero = true;
  CHECK(img_nonzero);
}
