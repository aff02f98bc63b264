#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "otcclip/eval.hpp"
#include "otcclip/rng.hpp"
#include "test_util.hpp"

using namespace otcclip;

namespace {

WorldSpec tiny_world() {
  WorldSpec w;
  w.num_classes = 4;
  w.samples_per_class = 12;
  w.tokens_per_class = 4;
  w.test_per_class = 4;
  w.caption_len = 4;
  w.seed = 5;
  return w;
}

ModelDims tiny_dims() {
  ModelDims d;
  d.d_in = 8;
  d.d = 6;
  d.d_e = 5;
  d.vocab_size = 4 * 4 + 3;
  d.h = 2;
  d.w = 2;
  d.l_max = 6;
  return d;
}

}  // namespace

TEST_CASE("single-class zero shot predicts that class everywhere") {
  const Dataset ds = generate_world(tiny_world(), tiny_dims());
  const ModelState m = init_model_state(ds.dims, 7);
  std::vector<RawImage> imgs;
  for (int i = 0; i < 5; ++i) imgs.push_back(ds.rows[static_cast<std::size_t>(i)].image);
  const ZeroShotResult r = zero_shot(m, imgs, {}, ds.spec, {2});
  for (std::uint32_t p : r.predictions) CHECK(p == 2);
}

TEST_CASE("zero shot equals the brute-force nearest-prompt table") {
  const Dataset ds = generate_world(tiny_world(), tiny_dims());
  const ModelState m = init_model_state(ds.dims, 8);
  std::vector<std::uint32_t> classes = {0, 1, 2, 3};

  std::vector<RawImage> imgs;
  std::vector<std::uint32_t> labels;
  for (const DataRow& r : ds.test_rows) {
    imgs.push_back(r.image);
    labels.push_back(r.class_id);
  }
  const ZeroShotResult r = zero_shot(m, imgs, labels, ds.spec, classes);

  std::size_t correct = 0;
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const Vec g = encode_image(imgs[i], m).global.g;
    std::uint32_t best = 0;
    double best_score = -1e300;
    for (std::uint32_t c : classes) {
      const Vec p = encode_text(class_prompt(ds.spec, ds.dims, c), m).global.g;
      const double s = dot(g, p);
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    CHECK(r.predictions[i] == best);
    if (best == labels[i]) ++correct;
  }
  CHECK(r.accuracy ==
        doctest::Approx(static_cast<double>(correct) / static_cast<double>(imgs.size())));
  CHECK(r.accuracy >= 0.0);
  CHECK(r.accuracy <= 1.0);
}

TEST_CASE("attack success rate counts adversarial predictions") {
  const Dataset ds = generate_world(tiny_world(), tiny_dims());
  const ModelState m = init_model_state(ds.dims, 9);

  PoisonSpec spec;
  spec.kind = AttackKind::badnet_patch;
  spec.adv_class = 1;
  spec.rate = 0.1;
  spec.seed = 4;
  spec.trigger.patch_index = 0;
  spec.trigger.patch_value.assign(ds.dims.d_in, 0.4);
  const PoisonResult res = inject(ds, spec);

  PoisonArtifacts art;
  art.spec = spec;
  art.indices = res.indices;
  art.adv_captions = res.adv_captions;
  art.target_image = res.target_image;
  art.target_class = res.target_class;

  std::vector<RawImage> test_imgs;
  for (const DataRow& r : ds.test_rows) test_imgs.push_back(r.image);
  std::vector<std::uint32_t> classes = {0, 1, 2, 3};

  const double asr = attack_success_rate(m, art, test_imgs, ds.spec, classes);
  CHECK(asr >= 0.0);
  CHECK(asr <= 1.0);
  // Cross-check against explicit triggered predictions.
  std::vector<RawImage> triggered;
  for (const RawImage& img : test_imgs)
    triggered.push_back(apply_trigger(img, spec.trigger, spec.kind));
  const ZeroShotResult zs = zero_shot(m, triggered, {}, ds.spec, classes);
  std::size_t hits = 0;
  for (std::uint32_t p : zs.predictions)
    if (p == spec.adv_class) ++hits;
  CHECK(asr == doctest::Approx(static_cast<double>(hits) /
                               static_cast<double>(test_imgs.size())));

  SUBCASE("adv_class outside the class set is a precondition violation") {
    CHECK_THROWS_AS(attack_success_rate(m, art, test_imgs, ds.spec, {0, 2, 3}),
                    std::invalid_argument);
  }
  SUBCASE("TDPA evaluates the single target image") {
    art.spec.kind = AttackKind::tdpa;
    art.target_image = res.dataset.rows[res.indices[0]].image;
    const double tdpa_asr = attack_success_rate(m, art, test_imgs, ds.spec, classes);
    CHECK((tdpa_asr == 0.0 || tdpa_asr == 1.0));
  }
}

TEST_CASE("linear probe separates separable blobs") {
  const Dataset ds = generate_world(tiny_world(), tiny_dims());
  // Train the encoder briefly so global features carry class structure.
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 12;
  cfg.pool_size = 24;
  cfg.seed = 2;
  cfg.defense = DefenseMode::none;
  cfg.lr = 0.05;
  const ModelState m = train_run(ds, cfg, std::nullopt).state;

  std::vector<RawImage> train_imgs, test_imgs;
  std::vector<std::uint32_t> train_labels, test_labels;
  for (const DataRow& r : ds.rows) {
    train_imgs.push_back(r.image);
    train_labels.push_back(r.class_id);
  }
  for (const DataRow& r : ds.test_rows) {
    test_imgs.push_back(r.image);
    test_labels.push_back(r.class_id);
  }
  const LinearProbeResult lp =
      linear_probe(m, train_imgs, train_labels, test_imgs, test_labels, ds.spec.num_classes);
  CHECK(lp.accuracy == doctest::Approx(1.0));
}

TEST_CASE("linear probe sits at chance for label-independent features") {
  const ModelDims dims = tiny_dims();
  double acc_sum = 0;
  const int seeds = 5;
  for (int s = 0; s < seeds; ++s) {
    const ModelState m = init_model_state(dims, derive_seed(31, "probe", s));
    Rng rng(derive_seed(32, "probe_data", s));
    std::vector<RawImage> train_imgs, test_imgs;
    std::vector<std::uint32_t> train_labels, test_labels;
    for (int i = 0; i < 60; ++i) {
      train_imgs.push_back(otcclip::test::random_image(rng, dims.h, dims.w, dims.d_in));
      train_labels.push_back(static_cast<std::uint32_t>(i % 2));
    }
    for (int i = 0; i < 40; ++i) {
      test_imgs.push_back(otcclip::test::random_image(rng, dims.h, dims.w, dims.d_in));
      test_labels.push_back(static_cast<std::uint32_t>(rng.uniform_index(2)));
    }
    acc_sum += linear_probe(m, train_imgs, train_labels, test_imgs, test_labels, 2).accuracy;
  }
  CHECK(std::abs(acc_sum / seeds - 0.5) <= 0.1);
}

TEST_CASE("linear probe matches a duplicate gradient-descent oracle") {
  const Dataset ds = generate_world(tiny_world(), tiny_dims());
  const ModelState m = init_model_state(ds.dims, 33);

  std::vector<RawImage> train_imgs, test_imgs;
  std::vector<std::uint32_t> train_labels, test_labels;
  for (std::size_t i = 0; i < 24; ++i) {
    train_imgs.push_back(ds.rows[i].image);
    train_labels.push_back(ds.rows[i].class_id);
  }
  for (const DataRow& r : ds.test_rows) {
    test_imgs.push_back(r.image);
    test_labels.push_back(r.class_id);
  }
  const std::size_t C = ds.spec.num_classes, d = ds.dims.d, n = train_imgs.size();
  const LinearProbeResult lib =
      linear_probe(m, train_imgs, train_labels, test_imgs, test_labels, C);

  // Independently coded full-batch softmax regression, same budget.
  Matrix feats(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec g = encode_image(train_imgs[i], m).global.g;
    for (std::size_t p = 0; p < d; ++p) feats(i, p) = g[p];
  }
  Matrix w(C, d, 0.0);
  Vec b(C, 0.0);
  double final_loss = 0;
  for (int step = 0; step < 500; ++step) {
    Matrix gw(C, d, 0.0);
    Vec gb(C, 0.0);
    final_loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
      Vec logits(C);
      double mx = -1e300;
      for (std::size_t c = 0; c < C; ++c) {
        logits[c] = b[c];
        for (std::size_t p = 0; p < d; ++p) logits[c] += w(c, p) * feats(i, p);
        mx = std::max(mx, logits[c]);
      }
      double z = 0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(logits[c] - mx);
      final_loss -= (logits[train_labels[i]] - mx - std::log(z)) / static_cast<double>(n);
      for (std::size_t c = 0; c < C; ++c) {
        const double prob = std::exp(logits[c] - mx) / z;
        const double g = (prob - (c == train_labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
        gb[c] += g;
        for (std::size_t p = 0; p < d; ++p) gw(c, p) += g * feats(i, p);
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      b[c] -= 0.1 * gb[c];
      for (std::size_t p = 0; p < d; ++p) w(c, p) -= 0.1 * gw(c, p);
    }
  }
  CHECK(std::abs(lib.train_loss - final_loss) < 1e-6);

  SUBCASE("single-class training set is rejected") {
    std::vector<std::uint32_t> flat(train_labels.size(), 2);
    CHECK_THROWS_AS(linear_probe(m, train_imgs, flat, test_imgs, test_labels, C),
                    std::invalid_argument);
  }
}

TEST_CASE("match audit extremes and score-table consistency") {
  const Dataset base = generate_world(tiny_world(), tiny_dims());
  const ModelState m = init_model_state(base.dims, 41);

  PoisonSpec spec;
  spec.kind = AttackKind::tdpa;
  spec.adv_class = 3;
  spec.rate = 0.1;
  spec.seed = 6;
  const PoisonResult res = inject(base, spec);
  const Dataset& poisoned = res.dataset;

  const auto entry_for_row = [&](const DataRow& row) {
    const Encoded e = encode_text(row.caption, m);
    PoolEntry pe;
    pe.fine = e.spatial;
    pe.global = e.global;
    pe.source_id = row.id;
    return pe;
  };

  SinkhornConfig cfg;
  SUBCASE("pool of only adversarial captions defends nothing") {
    std::vector<PoolEntry> entries;
    for (std::size_t i : res.indices) entries.push_back(entry_for_row(poisoned.rows[i]));
    const AuditStats a = match_audit(m, poisoned, res.indices, CaptionPool(entries), cfg);
    CHECK(a.defended_fraction == 0.0);
  }
  SUBCASE("pool with no adversarial captions defends everything") {
    std::vector<PoolEntry> entries;
    for (const DataRow& r : poisoned.rows) {
      if (r.poisoned) continue;
      entries.push_back(entry_for_row(r));
      if (entries.size() == 12) break;
    }
    const AuditStats a = match_audit(m, poisoned, res.indices, CaptionPool(entries), cfg);
    CHECK(a.defended_fraction == 1.0);
  }
  SUBCASE("defended fraction recomputes from the dumped score matrix") {
    const CaptionPool pool = audit_pool(m, poisoned, 16, 99);
    const AuditStats a = match_audit(m, poisoned, res.indices, pool, cfg);
    std::size_t defended = 0;
    for (std::size_t i = 0; i < a.poisoned_rows.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t p = 1; p < pool.capacity(); ++p)
        if (a.scores(i, p) > a.scores(i, best)) best = p;
      const std::int64_t src = pool.entry(best).source_id;
      bool adv = false;
      for (const DataRow& r : poisoned.rows)
        if (r.id == src && r.poisoned) adv = true;
      if (!adv) ++defended;
      CHECK(a.chosen_source_ids[i] == src);
    }
    CHECK(a.defended_fraction ==
          doctest::Approx(static_cast<double>(defended) /
                          static_cast<double>(a.poisoned_rows.size())));
  }
  SUBCASE("missing index list is rejected") {
    const CaptionPool pool = audit_pool(m, poisoned, 8, 1);
    CHECK_THROWS_AS(match_audit(m, poisoned, {}, pool, cfg), std::invalid_argument);
  }
}
