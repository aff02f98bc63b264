#include "otcclip/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "json.hpp"
#include "otcclip/data_io.hpp"
#include "otcclip/rng.hpp"

namespace otcclip {

namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& context) {
  if (!j.is_object()) throw ConfigError("config: " + context + " must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (!allowed.count(key)) throw ConfigError("config: unknown key \"" + key + "\" in " + context);
  }
}

template <typename T>
void read_into(const json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config: bad value for \"") + key + "\": " + e.what());
    }
  }
}

void parse_dims(const json& j, ModelDims& d) {
  check_keys(j, {"d_in", "d", "d_e", "vocab_size", "h", "w", "l_max", "tau"}, "model");
  read_into(j, "d_in", d.d_in);
  read_into(j, "d", d.d);
  read_into(j, "d_e", d.d_e);
  read_into(j, "vocab_size", d.vocab_size);
  read_into(j, "h", d.h);
  read_into(j, "w", d.w);
  read_into(j, "l_max", d.l_max);
}

void parse_world(const json& j, WorldSpec& w) {
  check_keys(j,
             {"num_classes", "samples_per_class", "margin", "noise_sigma", "tokens_per_class",
              "seed", "test_per_class", "caption_len"},
             "world");
  read_into(j, "num_classes", w.num_classes);
  read_into(j, "samples_per_class", w.samples_per_class);
  read_into(j, "margin", w.margin);
  read_into(j, "noise_sigma", w.noise_sigma);
  read_into(j, "tokens_per_class", w.tokens_per_class);
  read_into(j, "seed", w.seed);
  read_into(j, "test_per_class", w.test_per_class);
  read_into(j, "caption_len", w.caption_len);
}

void parse_trigger(const json& j, TriggerSpec& t) {
  check_keys(j, {"patch_value", "patch_index", "blend_alpha", "warp_strength", "pattern_seed", "pgd"},
             "poison.trigger");
  read_into(j, "patch_value", t.patch_value);
  read_into(j, "patch_index", t.patch_index);
  read_into(j, "blend_alpha", t.blend_alpha);
  read_into(j, "warp_strength", t.warp_strength);
  read_into(j, "pattern_seed", t.pattern_seed);
  if (j.contains("pgd")) {
    check_keys(j.at("pgd"), {"steps", "step_size", "epsilon"}, "poison.trigger.pgd");
    PgdSpec p;
    read_into(j.at("pgd"), "steps", p.steps);
    read_into(j.at("pgd"), "step_size", p.step_size);
    read_into(j.at("pgd"), "epsilon", p.epsilon);
    t.pgd = p;
  }
}

void parse_poison(const json& j, PoisonSpec& p) {
  check_keys(j,
             {"kind", "adv_class", "rate", "trigger", "template_count", "seed",
              "target_class_weight", "target_jitter_sigma"},
             "poison");
  if (j.contains("kind")) {
    try {
      p.kind = attack_kind_from_name(j.at("kind").get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  read_into(j, "adv_class", p.adv_class);
  read_into(j, "rate", p.rate);
  read_into(j, "template_count", p.template_count);
  read_into(j, "seed", p.seed);
  read_into(j, "target_class_weight", p.target_class_weight);
  read_into(j, "target_jitter_sigma", p.target_jitter_sigma);
  if (j.contains("trigger")) parse_trigger(j.at("trigger"), p.trigger);
}

void parse_loss(const json& j, LossWeights& w) {
  check_keys(j, {"lambda_c", "lambda_im", "lambda_sm", "K"}, "train.loss");
  read_into(j, "lambda_c", w.lambda_c);
  read_into(j, "lambda_im", w.lambda_im);
  read_into(j, "lambda_sm", w.lambda_sm);
  read_into(j, "K", w.K);
}

void parse_sinkhorn(const json& j, SinkhornConfig& s) {
  check_keys(j, {"lambda", "max_iters", "tol", "cost_clamp_multiplier"}, "train.sinkhorn");
  read_into(j, "lambda", s.lambda);
  read_into(j, "max_iters", s.max_iters);
  read_into(j, "tol", s.tol);
  read_into(j, "cost_clamp_multiplier", s.cost_clamp_multiplier);
}

void parse_train(const json& j, TrainConfig& t) {
  check_keys(j,
             {"epochs", "batch_size", "lr", "pool_size", "loss", "sinkhorn", "seed", "defense",
              "match_every_epoch", "unrolled_gradients", "checkpoint_every"},
             "train");
  read_into(j, "epochs", t.epochs);
  read_into(j, "batch_size", t.batch_size);
  read_into(j, "lr", t.lr);
  read_into(j, "pool_size", t.pool_size);
  read_into(j, "seed", t.seed);
  read_into(j, "match_every_epoch", t.match_every_epoch);
  read_into(j, "unrolled_gradients", t.unrolled_gradients);
  read_into(j, "checkpoint_every", t.checkpoint_every);
  if (j.contains("defense")) {
    try {
      t.defense = defense_mode_from_name(j.at("defense").get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
  }
  if (j.contains("loss")) parse_loss(j.at("loss"), t.loss);
  if (j.contains("sinkhorn")) parse_sinkhorn(j.at("sinkhorn"), t.sinkhorn);
}

void parse_eval(const json& j, EvalSection& e) {
  check_keys(j, {"audit_pool_size", "seed"}, "eval");
  read_into(j, "audit_pool_size", e.audit_pool_size);
  read_into(j, "seed", e.seed);
}

json trigger_to_json(const TriggerSpec& t) {
  json j{{"patch_value", t.patch_value},
         {"patch_index", t.patch_index},
         {"blend_alpha", t.blend_alpha},
         {"warp_strength", t.warp_strength},
         {"pattern_seed", t.pattern_seed}};
  if (t.pgd)
    j["pgd"] = json{{"steps", t.pgd->steps}, {"step_size", t.pgd->step_size},
                    {"epsilon", t.pgd->epsilon}};
  return j;
}

}  // namespace

void ExperimentConfig::resolve() {
  train.tau = tau;
  if (world.seed == 0) world.seed = derive_seed(seed, "world");
  if (poison.seed == 0) poison.seed = derive_seed(seed, "poison");
  if (train.seed == 0) train.seed = derive_seed(seed, "train");
  if (eval.seed == 0) eval.seed = derive_seed(seed, "eval");
  if (poison.trigger.pattern_seed == 0) poison.trigger.pattern_seed = derive_seed(seed, "trigger");
  if (poison.trigger.patch_value.empty()) {
    // Default patch trigger: a fixed seeded unit direction in patch space.
    Rng rng(derive_seed(seed, "trigger_value"));
    poison.trigger.patch_value.resize(dims.d_in);
    for (double& v : poison.trigger.patch_value) v = rng.normal();
    double n = 0;
    for (double v : poison.trigger.patch_value) n += v * v;
    n = std::sqrt(n);
    for (double& v : poison.trigger.patch_value) v /= (n < 1e-9 ? 1.0 : n);
  }
  try {
    train.validate();
    ModelDims d = dims;
    world.validate(d);
    if (!(tau > 0.0)) throw std::invalid_argument("model: tau must be > 0");
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ExperimentConfig config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  check_keys(j, {"model", "world", "poison", "train", "eval", "output_dir", "seed"}, "top level");

  ExperimentConfig cfg;
  if (j.contains("model")) parse_dims(j.at("model"), cfg.dims);
  if (j.contains("model")) {
    // tau lives in the model section next to the dims
    const json& m = j.at("model");
    if (m.contains("tau")) cfg.tau = m.at("tau").get<double>();
  }
  if (j.contains("world")) parse_world(j.at("world"), cfg.world);
  if (j.contains("poison")) parse_poison(j.at("poison"), cfg.poison);
  if (j.contains("train")) parse_train(j.at("train"), cfg.train);
  if (j.contains("eval")) parse_eval(j.at("eval"), cfg.eval);
  read_into(j, "output_dir", cfg.output_dir);
  read_into(j, "seed", cfg.seed);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw MissingInputError("config file not found: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return config_from_json_text(text);
}

std::string config_canonical_json(const ExperimentConfig& cfg) {
  json j{{"model",
          json{{"d_in", cfg.dims.d_in},
               {"d", cfg.dims.d},
               {"d_e", cfg.dims.d_e},
               {"vocab_size", cfg.dims.vocab_size},
               {"h", cfg.dims.h},
               {"w", cfg.dims.w},
               {"l_max", cfg.dims.l_max},
               {"tau", cfg.tau}}},
         {"world",
          json{{"num_classes", cfg.world.num_classes},
               {"samples_per_class", cfg.world.samples_per_class},
               {"margin", cfg.world.margin},
               {"noise_sigma", cfg.world.noise_sigma},
               {"tokens_per_class", cfg.world.tokens_per_class},
               {"seed", cfg.world.seed},
               {"test_per_class", cfg.world.test_per_class},
               {"caption_len", cfg.world.caption_len}}},
         {"poison",
          json{{"kind", attack_kind_name(cfg.poison.kind)},
               {"adv_class", cfg.poison.adv_class},
               {"rate", cfg.poison.rate},
               {"template_count", cfg.poison.template_count},
               {"seed", cfg.poison.seed},
               {"target_class_weight", cfg.poison.target_class_weight},
               {"target_jitter_sigma", cfg.poison.target_jitter_sigma},
               {"trigger", trigger_to_json(cfg.poison.trigger)}}},
         {"train",
          json{{"epochs", cfg.train.epochs},
               {"batch_size", cfg.train.batch_size},
               {"lr", cfg.train.lr},
               {"pool_size", cfg.train.pool_size},
               {"seed", cfg.train.seed},
               {"defense", defense_mode_name(cfg.train.defense)},
               {"match_every_epoch", cfg.train.match_every_epoch},
               {"unrolled_gradients", cfg.train.unrolled_gradients},
               {"checkpoint_every", cfg.train.checkpoint_every},
               {"loss",
                json{{"lambda_c", cfg.train.loss.lambda_c},
                     {"lambda_im", cfg.train.loss.lambda_im},
                     {"lambda_sm", cfg.train.loss.lambda_sm},
                     {"K", cfg.train.loss.K}}},
               {"sinkhorn",
                json{{"lambda", cfg.train.sinkhorn.lambda},
                     {"max_iters", cfg.train.sinkhorn.max_iters},
                     {"tol", cfg.train.sinkhorn.tol},
                     {"cost_clamp_multiplier", cfg.train.sinkhorn.cost_clamp_multiplier}}}}},
         {"eval", json{{"audit_pool_size", cfg.eval.audit_pool_size}, {"seed", cfg.eval.seed}}},
         {"output_dir", cfg.output_dir},
         {"seed", cfg.seed}};
  return j.dump();
}

std::string config_hash(const ExperimentConfig& cfg) {
  return fnv1a_hex(config_canonical_json(cfg));
}

}  // namespace otcclip
