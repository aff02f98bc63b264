#include "otcclip/poison.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "otcclip/losses.hpp"
#include "otcclip/rng.hpp"

namespace otcclip {

namespace {

using nlohmann::json;

Vec seeded_unit(std::uint64_t seed, std::size_t d) {
  Rng rng(seed);
  Vec v(d);
  for (double& x : v) x = rng.normal();
  const double n = l2_norm(v);
  for (double& x : v) x /= (n < 1e-9 ? 1.0 : n);
  return v;
}

/// Smooth low-frequency displacement field for the warp trigger.
struct WarpField {
  double a1, a2, p1, b1, b2, p2;
  explicit WarpField(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "warp_field"));
    a1 = 1.0 + rng.uniform_index(2);
    a2 = 1.0 + rng.uniform_index(2);
    b1 = 1.0 + rng.uniform_index(2);
    b2 = 1.0 + rng.uniform_index(2);
    p1 = rng.uniform(0.0, 6.283185307179586);
    p2 = rng.uniform(0.0, 6.283185307179586);
  }
  double dr(double r, double c, double h, double w) const {
    return std::sin(6.283185307179586 * (a1 * r / h + a2 * c / w) + p1);
  }
  double dc(double r, double c, double h, double w) const {
    return std::sin(6.283185307179586 * (b1 * r / h + b2 * c / w) + p2);
  }
};

}  // namespace

std::string attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::tdpa: return "tdpa";
    case AttackKind::badnet_patch: return "badnet";
    case AttackKind::blended: return "blended";
    case AttackKind::warp: return "warp";
    case AttackKind::label_consistent: return "label_consistent";
  }
  throw std::invalid_argument("attack_kind_name: unknown kind");
}

AttackKind attack_kind_from_name(const std::string& name) {
  if (name == "tdpa") return AttackKind::tdpa;
  if (name == "badnet" || name == "badnet_patch") return AttackKind::badnet_patch;
  if (name == "blended") return AttackKind::blended;
  if (name == "warp") return AttackKind::warp;
  if (name == "label_consistent") return AttackKind::label_consistent;
  throw std::invalid_argument("unknown attack kind: " + name);
}

void PoisonSpec::validate(const Dataset& ds) const {
  if (!(rate > 0.0) || rate > 1.0) throw std::invalid_argument("PoisonSpec: rate must be in (0, 1]");
  if (adv_class >= ds.spec.num_classes) throw std::invalid_argument("PoisonSpec: invalid adv_class");
  if (template_count < 1) throw std::invalid_argument("PoisonSpec: template_count must be >= 1");
  if (rate * static_cast<double>(ds.rows.size()) < 1.0)
    throw std::invalid_argument("PoisonSpec: rate*|dataset| must be >= 1");
  if (trigger.blend_alpha < 0.0 || trigger.blend_alpha > 1.0)
    throw std::invalid_argument("PoisonSpec: blend_alpha must be in [0, 1]");
  if (trigger.pgd && !(trigger.pgd->epsilon > 0.0))
    throw std::invalid_argument("PoisonSpec: pgd.epsilon must be > 0");
}

std::vector<RawCaption> build_adversarial_captions(const WorldSpec& world, const ModelDims& dims,
                                                   std::uint32_t adv_class,
                                                   std::size_t template_count, std::uint64_t seed) {
  if (template_count < 1) throw std::invalid_argument("build_adversarial_captions: need >= 1 template");
  if (adv_class >= world.num_classes)
    throw std::invalid_argument("build_adversarial_captions: invalid class");
  // Filler slots bound the number of distinct templates.
  double capacity = 1.0;
  for (std::size_t j = 1; j < world.caption_len && capacity < 1e12; ++j)
    capacity *= static_cast<double>(world.tokens_per_class);
  if (static_cast<double>(template_count) > capacity)
    throw std::invalid_argument(
        "build_adversarial_captions: template_count exceeds the distinct captions the class "
        "block admits");

  const std::uint32_t block = class_token(world, adv_class);
  std::vector<RawCaption> out;
  std::set<std::vector<std::uint32_t>> seen;
  for (std::size_t t = 0; t < template_count; ++t) {
    for (std::uint64_t attempt = 0;; ++attempt) {
      Rng rng(derive_seed(seed, "adv_caption", t * 977 + attempt));
      RawCaption cap;
      cap.vocab_size = dims.vocab_size;
      cap.tokens.resize(world.caption_len);
      cap.tokens[0] = block;  // the adversarial class token
      for (std::size_t j = 1; j < world.caption_len; ++j)
        cap.tokens[j] = block + static_cast<std::uint32_t>(rng.uniform_index(world.tokens_per_class));
      if (seen.insert(cap.tokens).second) {
        out.push_back(std::move(cap));
        break;
      }
      if (attempt > 100000)
        throw std::runtime_error("build_adversarial_captions: cannot draw distinct templates");
    }
  }
  return out;
}

RawImage apply_trigger(const RawImage& img, const TriggerSpec& t, AttackKind kind) {
  img.validate();
  RawImage out = img;
  const std::size_t k = img.patches.rows();
  const std::size_t d = img.patches.cols();

  switch (kind) {
    case AttackKind::badnet_patch:
    case AttackKind::label_consistent: {
      if (t.patch_index >= k) throw std::invalid_argument("apply_trigger: patch_index out of range");
      if (t.patch_value.size() != d)
        throw std::invalid_argument("apply_trigger: patch_value dimension mismatch");
      for (std::size_t q = 0; q < d; ++q) out.patches(t.patch_index, q) = t.patch_value[q];
      return out;
    }
    case AttackKind::blended: {
      if (t.blend_alpha < 0.0 || t.blend_alpha > 1.0)
        throw std::invalid_argument("apply_trigger: blend_alpha out of [0, 1]");
      if (t.blend_alpha == 0.0) return out;  // identity, bitwise
      Rng rng(derive_seed(t.pattern_seed, "blend_pattern"));
      for (std::size_t p = 0; p < k; ++p) {
        Vec dir(d);
        for (double& x : dir) x = rng.normal();
        const double n = l2_norm(dir);
        for (std::size_t q = 0; q < d; ++q) {
          const double pat = dir[q] / (n < 1e-9 ? 1.0 : n);
          out.patches(p, q) = t.blend_alpha == 1.0
                                  ? pat
                                  : (1.0 - t.blend_alpha) * img.patches(p, q) + t.blend_alpha * pat;
        }
      }
      return out;
    }
    case AttackKind::warp: {
      const WarpField field(t.pattern_seed);
      const double h = static_cast<double>(img.h), w = static_cast<double>(img.w);
      for (std::size_t r = 0; r < img.h; ++r) {
        for (std::size_t c = 0; c < img.w; ++c) {
          double sr = static_cast<double>(r) + t.warp_strength * field.dr(r, c, h, w);
          double sc = static_cast<double>(c) + t.warp_strength * field.dc(r, c, h, w);
          sr = std::clamp(sr, 0.0, h - 1.0);
          sc = std::clamp(sc, 0.0, w - 1.0);
          const std::size_t r0 = static_cast<std::size_t>(sr);
          const std::size_t c0 = static_cast<std::size_t>(sc);
          const std::size_t r1 = std::min(r0 + 1, img.h - 1);
          const std::size_t c1 = std::min(c0 + 1, img.w - 1);
          const double fr = sr - static_cast<double>(r0);
          const double fc = sc - static_cast<double>(c0);
          for (std::size_t q = 0; q < d; ++q) {
            const double v00 = img.patches(r0 * img.w + c0, q);
            const double v01 = img.patches(r0 * img.w + c1, q);
            const double v10 = img.patches(r1 * img.w + c0, q);
            const double v11 = img.patches(r1 * img.w + c1, q);
            out.patches(r * img.w + c, q) = (1 - fr) * ((1 - fc) * v00 + fc * v01) +
                                            fr * ((1 - fc) * v10 + fc * v11);
          }
        }
      }
      return out;
    }
    case AttackKind::tdpa:
      throw std::invalid_argument("apply_trigger: tdpa has no trigger");
  }
  throw std::invalid_argument("apply_trigger: unknown kind");
}

PoisonResult inject(const Dataset& ds, const PoisonSpec& spec) {
  if (ds.rows.empty()) throw std::invalid_argument("inject: empty dataset");
  spec.validate(ds);
  const std::size_t total = ds.rows.size();
  const auto count = static_cast<std::size_t>(
      std::ceil(spec.rate * static_cast<double>(total)));

  PoisonResult res;
  res.dataset = ds;
  res.adv_captions =
      build_adversarial_captions(ds.spec, ds.dims, spec.adv_class, spec.template_count, spec.seed);

  // Seeded distinct row sample; label_consistent draws only from rows whose
  // class already equals adv_class.
  std::vector<std::size_t> candidates;
  if (spec.kind == AttackKind::label_consistent) {
    for (std::size_t i = 0; i < total; ++i)
      if (ds.rows[i].class_id == spec.adv_class) candidates.push_back(i);
    if (candidates.size() < count)
      throw std::invalid_argument("inject: not enough adv_class rows for label_consistent");
  } else {
    candidates.resize(total);
    for (std::size_t i = 0; i < total; ++i) candidates[i] = i;
  }
  Rng pick_rng(derive_seed(spec.seed, "rows"));
  for (std::size_t i = 0; i + 1 < candidates.size() && i < count; ++i) {
    const std::size_t j = i + pick_rng.uniform_index(candidates.size() - i);
    std::swap(candidates[i], candidates[j]);
  }
  res.indices.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(count));
  std::sort(res.indices.begin(), res.indices.end());

  if (spec.kind == AttackKind::tdpa) {
    // Designated target: a held-out image whose patch direction mixes its
    // class prototype with an image-specific random direction, so it sits
    // apart from the class cluster without leaving it.
    Rng cls_rng(derive_seed(spec.seed, "target_class"));
    res.target_class = static_cast<std::uint32_t>(cls_rng.uniform_index(ds.spec.num_classes - 1));
    if (res.target_class >= spec.adv_class) res.target_class += 1;

    Vec own = seeded_unit(derive_seed(spec.seed, "target_direction"), ds.dims.d_in);
    Vec dir(ds.dims.d_in);
    for (std::size_t q = 0; q < ds.dims.d_in; ++q)
      dir[q] = spec.target_class_weight * ds.prototypes(res.target_class, q) +
               (1.0 - spec.target_class_weight) * own[q];
    const double n = l2_norm(dir);
    for (double& x : dir) x /= n;

    const std::size_t k = ds.dims.h * ds.dims.w;
    Rng tgt_rng(derive_seed(spec.seed, "target_patches"));
    res.target_image.h = ds.dims.h;
    res.target_image.w = ds.dims.w;
    res.target_image.patches = Matrix(k, ds.dims.d_in);
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t q = 0; q < ds.dims.d_in; ++q)
        res.target_image.patches(p, q) = dir[q] + tgt_rng.normal(0.0, ds.spec.noise_sigma);
  }

  for (std::size_t pos = 0; pos < res.indices.size(); ++pos) {
    DataRow& row = res.dataset.rows[res.indices[pos]];
    Rng row_rng(derive_seed(spec.seed, "poison_row", static_cast<std::uint64_t>(row.id)));
    row.poisoned = true;
    switch (spec.kind) {
      case AttackKind::tdpa: {
        row.image = res.target_image;
        for (double& v : row.image.patches.data())
          v += row_rng.normal(0.0, spec.target_jitter_sigma);
        row.caption = res.adv_captions[row_rng.uniform_index(res.adv_captions.size())];
        break;
      }
      case AttackKind::badnet_patch:
      case AttackKind::blended:
      case AttackKind::warp: {
        row.image = apply_trigger(row.image, spec.trigger, spec.kind);
        row.caption = res.adv_captions[row_rng.uniform_index(res.adv_captions.size())];
        break;
      }
      case AttackKind::label_consistent: {
        row.image = apply_trigger(row.image, spec.trigger, spec.kind);
        break;  // caption stays clean
      }
    }
  }
  return res;
}

TriggerSpec adaptive_pgd_trigger(const ModelState& model,
                                 const std::vector<std::pair<RawImage, RawCaption>>& pairs,
                                 const TriggerSpec& t0, const SinkhornConfig& cfg, Vec* trace) {
  if (!t0.pgd) throw std::invalid_argument("adaptive_pgd_trigger: pgd settings missing");
  if (pairs.empty()) throw std::invalid_argument("adaptive_pgd_trigger: no pairs");
  if (t0.patch_value.size() != model.dims.d_in)
    throw std::invalid_argument("adaptive_pgd_trigger: patch_value dimension mismatch");

  const PgdSpec& pgd = *t0.pgd;
  TriggerSpec cur = t0;

  std::vector<Encoded> cap_enc;
  cap_enc.reserve(pairs.size());
  for (const auto& pr : pairs) cap_enc.push_back(encode_text(pr.second, model));

  const auto objective_and_grad = [&](const Vec& value, Vec& grad) {
    TriggerSpec probe = cur;
    probe.patch_value = value;
    double obj = 0.0;
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const RawImage trig = apply_trigger(pairs[i].first, probe, AttackKind::badnet_patch);
      const Encoded img = encode_image(trig, model);
      Matrix s = pairwise_similarity(img.spatial, cap_enc[i].spatial);
      Matrix c(s.rows(), s.cols());
      for (std::size_t j = 0; j < s.size(); ++j) c.data()[j] = 1.0 - s.data()[j];
      const Weights wa = Weights::uniform(c.rows());
      const Weights wb = Weights::uniform(c.cols());
      TransportPlan plan = sinkhorn_solve(wa, wb, c, cfg);
      obj += ot_value(plan, c, cfg.lambda, true);

      // Envelope: dObj/dS = -T; only the triggered cell's patch depends on the
      // trigger value.
      Matrix d_spatial(img.spatial.z.rows(), img.spatial.z.cols(), 0.0);
      for (std::size_t u = 0; u < plan.t.rows(); ++u)
        for (std::size_t v = 0; v < plan.t.cols(); ++v) {
          const double ds = -plan.t(u, v);
          const double* yv = cap_enc[i].spatial.z.row(v);
          double* du = d_spatial.row(u);
          for (std::size_t p = 0; p < d_spatial.cols(); ++p) du[p] += ds * yv[p];
        }
      ImageGrads ig = encode_image_backward(trig, model, img.cache, d_spatial, Vec{});
      const double* dp = ig.d_patches.row(probe.patch_index);
      for (std::size_t q = 0; q < grad.size(); ++q) grad[q] += dp[q];
    }
    if (!all_finite(grad)) throw std::runtime_error("adaptive_pgd_trigger: non-finite gradient");
    return obj;
  };

  Vec value = t0.patch_value;
  Vec grad(value.size(), 0.0);
  for (int step = 0; step < pgd.steps; ++step) {
    const double obj = objective_and_grad(value, grad);
    if (trace) trace->push_back(obj);
    for (std::size_t q = 0; q < value.size(); ++q) {
      const double sgn = grad[q] > 0.0 ? 1.0 : (grad[q] < 0.0 ? -1.0 : 0.0);
      double next = value[q] - pgd.step_size * sgn;
      next = std::clamp(next, t0.patch_value[q] - pgd.epsilon, t0.patch_value[q] + pgd.epsilon);
      value[q] = next;
    }
  }
  if (trace) {
    Vec tmp(value.size(), 0.0);
    trace->push_back(objective_and_grad(value, tmp));
  }
  cur.patch_value = value;
  return cur;
}

void save_poison_artifacts(const PoisonResult& res, const PoisonSpec& spec, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_dataset(res.dataset, dir);

  json caps = json::array();
  for (const RawCaption& c : res.adv_captions) caps.push_back(c.tokens);
  json j{{"version", 1},
         {"kind", attack_kind_name(spec.kind)},
         {"adv_class", spec.adv_class},
         {"rate", spec.rate},
         {"template_count", spec.template_count},
         {"seed", spec.seed},
         {"target_class_weight", spec.target_class_weight},
         {"target_jitter_sigma", spec.target_jitter_sigma},
         {"trigger",
          json{{"patch_value", spec.trigger.patch_value},
               {"patch_index", spec.trigger.patch_index},
               {"blend_alpha", spec.trigger.blend_alpha},
               {"warp_strength", spec.trigger.warp_strength},
               {"pattern_seed", spec.trigger.pattern_seed}}},
         {"indices", res.indices},
         {"adv_captions", caps},
         {"target_class", res.target_class}};
  std::ofstream f(dir + "/poison_index.json");
  f << j.dump(2) << "\n";

  if (spec.kind == AttackKind::tdpa) {
    Tensor t;
    t.shape = {res.target_image.patches.rows(), res.target_image.patches.cols()};
    t.data = res.target_image.patches.data();
    write_tensor(dir + "/target_image.otf1", t);
  }
}

PoisonArtifacts load_poison_artifacts(const std::string& dir, const ModelDims& dims) {
  std::ifstream f(dir + "/poison_index.json");
  if (!f) throw std::runtime_error("load_poison_artifacts: cannot open " + dir + "/poison_index.json");
  json j;
  f >> j;

  PoisonArtifacts a;
  a.spec.kind = attack_kind_from_name(j.at("kind").get<std::string>());
  a.spec.adv_class = j.at("adv_class").get<std::uint32_t>();
  a.spec.rate = j.at("rate").get<double>();
  a.spec.template_count = j.at("template_count").get<std::size_t>();
  a.spec.seed = j.at("seed").get<std::uint64_t>();
  a.spec.target_class_weight = j.at("target_class_weight").get<double>();
  a.spec.target_jitter_sigma = j.at("target_jitter_sigma").get<double>();
  const json& jt = j.at("trigger");
  a.spec.trigger.patch_value = jt.at("patch_value").get<Vec>();
  a.spec.trigger.patch_index = jt.at("patch_index").get<std::size_t>();
  a.spec.trigger.blend_alpha = jt.at("blend_alpha").get<double>();
  a.spec.trigger.warp_strength = jt.at("warp_strength").get<double>();
  a.spec.trigger.pattern_seed = jt.at("pattern_seed").get<std::uint64_t>();
  a.indices = j.at("indices").get<std::vector<std::size_t>>();
  a.target_class = j.at("target_class").get<std::uint32_t>();
  for (const auto& tokens : j.at("adv_captions")) {
    RawCaption c;
    c.vocab_size = dims.vocab_size;
    c.tokens = tokens.get<std::vector<std::uint32_t>>();
    a.adv_captions.push_back(std::move(c));
  }
  if (a.spec.kind == AttackKind::tdpa) {
    Tensor t = read_tensor(dir + "/target_image.otf1");
    a.target_image.h = dims.h;
    a.target_image.w = dims.w;
    a.target_image.patches = Matrix(t.shape[0], t.shape[1]);
    a.target_image.patches.data() = t.data;
  }
  return a;
}

}  // namespace otcclip
