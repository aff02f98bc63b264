#include "otcclip/eval.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "otcclip/rng.hpp"

namespace otcclip {

ZeroShotResult zero_shot(const ModelState& m, const std::vector<RawImage>& images,
                         const std::vector<std::uint32_t>& labels, const WorldSpec& world,
                         const std::vector<std::uint32_t>& classes) {
  if (classes.empty()) throw std::invalid_argument("zero_shot: empty class set");
  if (!labels.empty() && labels.size() != images.size())
    throw std::invalid_argument("zero_shot: label count mismatch");

  std::vector<std::uint32_t> sorted_classes = classes;
  std::sort(sorted_classes.begin(), sorted_classes.end());

  std::vector<Vec> prompt_globals(sorted_classes.size());
  for (std::size_t c = 0; c < sorted_classes.size(); ++c)
    prompt_globals[c] = encode_text(class_prompt(world, m.dims, sorted_classes[c]), m).global.g;

  ZeroShotResult out;
  out.predictions.resize(images.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(images.size()); ++i) {
    const std::size_t ii = static_cast<std::size_t>(i);
    const Vec g = encode_image(images[ii], m).global.g;
    std::size_t best = 0;
    double best_score = dot(g, prompt_globals[0]);
    for (std::size_t c = 1; c < prompt_globals.size(); ++c) {
      const double s = dot(g, prompt_globals[c]);
      if (s > best_score) {  // ties keep the lowest class id
        best_score = s;
        best = c;
      }
    }
    out.predictions[ii] = sorted_classes[best];
  }

  if (!labels.empty()) {
    const std::uint32_t max_class =
        *std::max_element(sorted_classes.begin(), sorted_classes.end());
    std::vector<std::size_t> hit(max_class + 1, 0), seen(max_class + 1, 0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
      seen[labels[i]] += 1;
      if (out.predictions[i] == labels[i]) {
        ++correct;
        hit[labels[i]] += 1;
      }
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(images.size());
    out.per_class_accuracy.assign(max_class + 1, -1.0);
    for (std::size_t c = 0; c <= max_class; ++c)
      if (seen[c] > 0)
        out.per_class_accuracy[c] = static_cast<double>(hit[c]) / static_cast<double>(seen[c]);
  }
  return out;
}

double attack_success_rate(const ModelState& m, const PoisonArtifacts& attack,
                           const std::vector<RawImage>& test_images, const WorldSpec& world,
                           const std::vector<std::uint32_t>& classes) {
  if (std::find(classes.begin(), classes.end(), attack.spec.adv_class) == classes.end())
    throw std::invalid_argument("attack_success_rate: adv_class not in the class set");

  std::vector<RawImage> attacked;
  if (attack.spec.kind == AttackKind::tdpa) {
    attacked.push_back(attack.target_image);
  } else {
    if (test_images.empty()) throw std::invalid_argument("attack_success_rate: empty test set");
    attacked.reserve(test_images.size());
    for (const RawImage& img : test_images)
      attacked.push_back(apply_trigger(img, attack.spec.trigger, attack.spec.kind));
  }

  const ZeroShotResult zs = zero_shot(m, attacked, {}, world, classes);
  std::size_t hits = 0;
  for (std::uint32_t p : zs.predictions)
    if (p == attack.spec.adv_class) ++hits;
  return static_cast<double>(hits) / static_cast<double>(zs.predictions.size());
}

LinearProbeResult linear_probe(const ModelState& m, const std::vector<RawImage>& train_images,
                               const std::vector<std::uint32_t>& train_labels,
                               const std::vector<RawImage>& test_images,
                               const std::vector<std::uint32_t>& test_labels,
                               std::size_t num_classes) {
  if (train_images.empty() || train_images.size() != train_labels.size())
    throw std::invalid_argument("linear_probe: bad training split");
  {
    const std::uint32_t first = train_labels[0];
    bool single = true;
    for (std::uint32_t l : train_labels)
      if (l != first) single = false;
    if (single) throw std::invalid_argument("linear_probe: single-class training set");
  }

  const std::size_t d = m.dims.d;
  const std::size_t n = train_images.size();

  Matrix feats(n, d);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const Vec g = encode_image(train_images[static_cast<std::size_t>(i)], m).global.g;
    for (std::size_t p = 0; p < d; ++p) feats(static_cast<std::size_t>(i), p) = g[p];
  }

  // 500 full-batch steps, lr 0.1, zero init, no regularization.
  const int kSteps = 500;
  const double kLr = 0.1;
  Matrix w(num_classes, d, 0.0);
  Vec bias(num_classes, 0.0);

  Vec logits(num_classes), probs(num_classes);
  Matrix dw(num_classes, d);
  Vec db(num_classes);
  double loss = 0;
  for (int step = 0; step < kSteps; ++step) {
    std::fill(dw.data().begin(), dw.data().end(), 0.0);
    std::fill(db.begin(), db.end(), 0.0);
    loss = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double* f = feats.row(i);
      double mx = -1e300;
      for (std::size_t c = 0; c < num_classes; ++c) {
        logits[c] = bias[c] + dot(w.row(c), f, d);
        mx = std::max(mx, logits[c]);
      }
      double z = 0;
      for (std::size_t c = 0; c < num_classes; ++c) z += std::exp(logits[c] - mx);
      for (std::size_t c = 0; c < num_classes; ++c) probs[c] = std::exp(logits[c] - mx) / z;
      loss -= (logits[train_labels[i]] - mx - std::log(z));
      for (std::size_t c = 0; c < num_classes; ++c) {
        const double g = (probs[c] - (c == train_labels[i] ? 1.0 : 0.0)) / static_cast<double>(n);
        db[c] += g;
        double* wc = dw.row(c);
        for (std::size_t p = 0; p < d; ++p) wc[p] += g * f[p];
      }
    }
    loss /= static_cast<double>(n);
    for (std::size_t c = 0; c < num_classes; ++c) {
      bias[c] -= kLr * db[c];
      double* wc = w.row(c);
      const double* gc = dw.row(c);
      for (std::size_t p = 0; p < d; ++p) wc[p] -= kLr * gc[p];
    }
  }

  LinearProbeResult out;
  out.train_loss = loss;

  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_images.size(); ++i) {
    const Vec g = encode_image(test_images[i], m).global.g;
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t c = 0; c < num_classes; ++c) {
      const double s = bias[c] + dot(w.row(c), g.data(), d);
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    if (best == test_labels[i]) ++correct;
  }
  out.accuracy = test_images.empty()
                     ? 0.0
                     : static_cast<double>(correct) / static_cast<double>(test_images.size());
  return out;
}

AuditStats match_audit(const ModelState& m, const Dataset& poisoned,
                       const std::vector<std::size_t>& poison_indices, const CaptionPool& pool,
                       const SinkhornConfig& cfg) {
  if (poison_indices.empty()) throw std::invalid_argument("match_audit: missing poison index list");

  std::unordered_map<std::int64_t, const DataRow*> by_id;
  for (const DataRow& r : poisoned.rows) by_id[r.id] = &r;

  std::vector<SpatialFeatures> imgs(poison_indices.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(poison_indices.size()); ++i) {
    const std::size_t ii = static_cast<std::size_t>(i);
    imgs[ii] = encode_image(poisoned.rows[poison_indices[ii]].image, m).spatial;
  }
  MatchResult match = match_batch(imgs, pool, cfg);

  AuditStats out;
  out.poisoned_rows = poison_indices;
  out.chosen_source_ids = match.chosen_source_ids;
  out.scores = std::move(match.scores);
  std::size_t defended = 0;
  for (std::size_t i = 0; i < poison_indices.size(); ++i) {
    const std::int64_t src = out.chosen_source_ids[i];
    const auto it = src >= 0 ? by_id.find(src) : by_id.end();
    const bool adv = it != by_id.end() && it->second->poisoned;
    if (!adv) ++defended;
    out.chosen_classes.push_back(it == by_id.end() ? -1
                                                   : static_cast<std::int32_t>(it->second->class_id));
  }
  out.defended_fraction =
      static_cast<double>(defended) / static_cast<double>(poison_indices.size());
  return out;
}

CaptionPool audit_pool(const ModelState& m, const Dataset& ds, std::size_t pool_size,
                       std::uint64_t seed) {
  if (pool_size == 0 || ds.rows.empty()) throw std::invalid_argument("audit_pool: empty pool");
  Rng rng(derive_seed(seed, "audit_pool"));
  std::vector<std::size_t> pick(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) pick[i] = rng.uniform_index(ds.rows.size());

  std::vector<PoolEntry> entries(pool_size);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(pool_size); ++i) {
    const std::size_t ii = static_cast<std::size_t>(i);
    const DataRow& row = ds.rows[pick[ii]];
    const Encoded e = encode_text(row.caption, m);
    entries[ii].fine = e.spatial;
    entries[ii].global = e.global;
    entries[ii].source_id = row.id;
  }
  return CaptionPool(std::move(entries));
}

}  // namespace otcclip
