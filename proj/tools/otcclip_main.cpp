#include <omp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "CLI11.hpp"
#include "json.hpp"
#include "otcclip/config.hpp"
#include "otcclip/data_io.hpp"
#include "otcclip/eval.hpp"
#include "otcclip/poison.hpp"
#include "otcclip/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace otcclip;

namespace {

struct CliOverrides {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string defense;
  std::string attack;
  std::string out;
  int threads = 0;
};

ExperimentConfig resolve_config(const CliOverrides& o) {
  ExperimentConfig cfg = load_config(o.config_path);
  if (o.seed_set) cfg.seed = o.seed;
  if (!o.defense.empty()) cfg.train.defense = defense_mode_from_name(o.defense);
  if (!o.attack.empty()) cfg.poison.kind = attack_kind_from_name(o.attack);
  if (!o.out.empty()) cfg.output_dir = o.out;
  cfg.resolve();
  return cfg;
}

std::string world_dir(const ExperimentConfig& c) { return c.output_dir + "/world"; }
std::string poison_dir(const ExperimentConfig& c) {
  return c.output_dir + "/poison-" + attack_kind_name(c.poison.kind) + "-s" +
         std::to_string(c.seed);
}
std::string run_suffix(const ExperimentConfig& c, bool attacked) {
  return defense_mode_name(c.train.defense) + "-" +
         (attacked ? attack_kind_name(c.poison.kind) : std::string("clean")) + "-s" +
         std::to_string(c.seed);
}
std::string train_dir(const ExperimentConfig& c, bool attacked) {
  return c.output_dir + "/train-" + run_suffix(c, attacked);
}
std::string eval_dir(const ExperimentConfig& c, bool attacked) {
  return c.output_dir + "/eval-" + run_suffix(c, attacked);
}
std::string audit_dir(const ExperimentConfig& c) {
  return c.output_dir + "/audit-" + run_suffix(c, true);
}

void require_dir(const std::string& dir, const char* what) {
  if (!fs::exists(dir))
    throw MissingInputError(std::string(what) + " not found: " + dir +
                            " (run the upstream subcommand first)");
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

/// Timestamps live only here so every other artifact is byte-reproducible.
void write_meta(const std::string& dir, const std::string& stage) {
  const auto now = std::chrono::system_clock::now().time_since_epoch();
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  write_json_file(json{{"stage", stage}, {"written_at_ms", ms}}, dir + "/meta.json");
}

void write_run_record(const std::string& dir, const std::string& stage,
                      const ExperimentConfig& cfg, const std::string& world_hash,
                      bool attacked) {
  write_json_file(json{{"stage", stage},
                       {"config_hash", config_hash(cfg)},
                       {"world_hash", world_hash},
                       {"defense", defense_mode_name(cfg.train.defense)},
                       {"attack", attacked ? attack_kind_name(cfg.poison.kind) : "clean"},
                       {"seed", cfg.seed}},
                  dir + "/run.json");
}

int cmd_gen_data(const ExperimentConfig& cfg) {
  const Dataset ds = generate_world(cfg.world, cfg.dims);
  const std::string dir = world_dir(cfg);
  fs::create_directories(dir);
  save_dataset(ds, dir);
  write_run_record(dir, "gen-data", cfg, dataset_world_hash(ds), false);
  write_meta(dir, "gen-data");
  std::cout << ds.rows.size() << " rows, " << ds.test_rows.size() << " test rows -> " << dir
            << "\n";
  return 0;
}

int cmd_poison(const ExperimentConfig& cfg) {
  require_dir(world_dir(cfg), "world dataset");
  const Dataset ds = load_dataset(world_dir(cfg));
  const PoisonResult res = inject(ds, cfg.poison);
  const std::string dir = poison_dir(cfg);
  save_poison_artifacts(res, cfg.poison, dir);
  write_run_record(dir, "poison", cfg, dataset_world_hash(ds), true);
  write_meta(dir, "poison");
  std::cout << res.indices.size() << " poisoned rows (" << attack_kind_name(cfg.poison.kind)
            << ") -> " << dir << "\n";
  return 0;
}

json epoch_to_json(const EpochRecord& r) {
  json steps = json::array();
  for (const auto& s : r.steps) steps.push_back(json::array({s[0], s[1], s[2], s[3]}));
  return json{{"epoch", r.epoch},
              {"matching", r.matching},
              {"mean_clip", r.mean_clip},
              {"mean_inter", r.mean_inter},
              {"mean_intra", r.mean_intra},
              {"mean_total", r.mean_total},
              {"pool_turnover", r.pool_turnover},
              {"poison_defended_fraction", r.poison_defended_fraction},
              {"steps", steps}};
}

int cmd_train(const ExperimentConfig& cfg, bool attacked) {
  const std::string input = attacked ? poison_dir(cfg) : world_dir(cfg);
  require_dir(input, attacked ? "poisoned dataset" : "world dataset");
  const Dataset ds = load_dataset(input);

  const std::string dir = train_dir(cfg, attacked);
  fs::create_directories(dir);
  const TrainRunResult res = train_run(ds, cfg.train, std::nullopt, dir);
  save_model(res.state, dir + "/model");

  std::ofstream log(dir + "/train_log.jsonl");
  for (const EpochRecord& r : res.log.epochs) log << epoch_to_json(r).dump() << "\n";

  write_run_record(dir, "train", cfg, dataset_world_hash(ds), attacked);
  write_meta(dir, "train");
  std::cout << "trained " << cfg.train.epochs << " epochs (" << defense_mode_name(cfg.train.defense)
            << ") -> " << dir << "\n";
  return 0;
}

int cmd_eval(const ExperimentConfig& cfg, bool attacked) {
  require_dir(world_dir(cfg), "world dataset");
  const std::string tdir = train_dir(cfg, attacked);
  require_dir(tdir + "/model", "trained model");

  const Dataset world = load_dataset(world_dir(cfg));
  const ModelState model = load_model(tdir + "/model");

  std::vector<std::uint32_t> classes(world.spec.num_classes);
  for (std::size_t c = 0; c < classes.size(); ++c) classes[c] = static_cast<std::uint32_t>(c);

  std::vector<RawImage> test_images;
  std::vector<std::uint32_t> test_labels;
  for (const DataRow& r : world.test_rows) {
    test_images.push_back(r.image);
    test_labels.push_back(r.class_id);
  }
  std::vector<RawImage> train_images;
  std::vector<std::uint32_t> train_labels;
  for (const DataRow& r : world.rows) {
    train_images.push_back(r.image);
    train_labels.push_back(r.class_id);
  }

  EvalReport report;
  const ZeroShotResult zs = zero_shot(model, test_images, test_labels, world.spec, classes);
  report.zero_shot_acc = zs.accuracy;
  report.per_class_accuracy = zs.per_class_accuracy;
  report.linear_probe_acc =
      linear_probe(model, train_images, train_labels, test_images, test_labels,
                   world.spec.num_classes)
          .accuracy;

  if (attacked) {
    require_dir(poison_dir(cfg), "poison artifacts");
    const PoisonArtifacts attack = load_poison_artifacts(poison_dir(cfg), world.dims);
    report.asr = attack_success_rate(model, attack, test_images, world.spec, classes);

    const Dataset poisoned = load_dataset(poison_dir(cfg));
    const CaptionPool pool =
        audit_pool(model, poisoned, cfg.eval.audit_pool_size, cfg.eval.seed);
    const AuditStats audit =
        match_audit(model, poisoned, attack.indices, pool, cfg.train.sinkhorn);
    report.audit_defended_fraction = audit.defended_fraction;
  }

  const std::string dir = eval_dir(cfg, attacked);
  fs::create_directories(dir);
  write_json_file(json{{"asr", report.asr},
                       {"zero_shot_acc", report.zero_shot_acc},
                       {"linear_probe_acc", report.linear_probe_acc},
                       {"per_class_accuracy", report.per_class_accuracy},
                       {"audit_defended_fraction", report.audit_defended_fraction},
                       {"defense", defense_mode_name(cfg.train.defense)},
                       {"attack", attacked ? attack_kind_name(cfg.poison.kind) : "clean"},
                       {"seed", cfg.seed},
                       {"config_hash", config_hash(cfg)},
                       {"world_hash", dataset_world_hash(world)}},
                  dir + "/eval_report.json");
  write_run_record(dir, "eval", cfg, dataset_world_hash(world), attacked);
  write_meta(dir, "eval");
  std::cout << "zero_shot=" << report.zero_shot_acc << " linear_probe=" << report.linear_probe_acc;
  if (attacked) std::cout << " asr=" << report.asr;
  std::cout << " -> " << dir << "\n";
  return 0;
}

int cmd_match_audit(const ExperimentConfig& cfg) {
  const std::string tdir = train_dir(cfg, true);
  require_dir(tdir + "/model", "trained model");
  require_dir(poison_dir(cfg), "poison artifacts");

  const ModelState model = load_model(tdir + "/model");
  const Dataset poisoned = load_dataset(poison_dir(cfg));
  const PoisonArtifacts attack = load_poison_artifacts(poison_dir(cfg), poisoned.dims);

  const CaptionPool pool = audit_pool(model, poisoned, cfg.eval.audit_pool_size, cfg.eval.seed);
  const AuditStats audit = match_audit(model, poisoned, attack.indices, pool, cfg.train.sinkhorn);

  const std::string dir = audit_dir(cfg);
  fs::create_directories(dir);
  std::ofstream out(dir + "/audit.jsonl");
  for (std::size_t i = 0; i < audit.poisoned_rows.size(); ++i) {
    json line{{"row", audit.poisoned_rows[i]},
              {"chosen_source_id", audit.chosen_source_ids[i]},
              {"chosen_class", audit.chosen_classes[i]},
              {"scores", std::vector<double>(audit.scores.row(i),
                                             audit.scores.row(i) + audit.scores.cols())}};
    out << line.dump() << "\n";
  }
  write_json_file(json{{"defended_fraction", audit.defended_fraction},
                       {"pool_size", pool.capacity()},
                       {"config_hash", config_hash(cfg)}},
                  dir + "/audit_summary.json");
  write_run_record(dir, "match-audit", cfg, dataset_world_hash(poisoned), true);
  write_meta(dir, "match-audit");
  std::cout << "defended_fraction=" << audit.defended_fraction << " -> " << dir << "\n";
  return 0;
}

int cmd_report(const ExperimentConfig& cfg, const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw MissingInputError("report: no run directories given");

  static const std::vector<std::string> kAttacks = {"tdpa", "badnet", "label_consistent",
                                                    "blended", "warp", "clean"};
  static const std::vector<std::string> kDefenses = {"none", "global_baseline", "otcclip"};

  std::map<std::pair<std::string, std::string>, std::vector<double>> asr;
  std::map<std::pair<std::string, std::string>, std::vector<double>> zero_shot;
  std::string world_hash;
  for (const std::string& dir : run_dirs) {
    const std::string path = dir + "/eval_report.json";
    std::ifstream f(path);
    if (!f) throw MissingInputError("report: missing " + path);
    json j;
    f >> j;
    const std::string wh = j.at("world_hash").get<std::string>();
    if (world_hash.empty()) world_hash = wh;
    if (wh != world_hash)
      throw ConfigError("report: refusing to aggregate runs with mismatched world hashes");
    const auto key = std::make_pair(j.at("defense").get<std::string>(),
                                    j.at("attack").get<std::string>());
    if (j.at("asr").get<double>() >= 0) asr[key].push_back(j.at("asr").get<double>());
    zero_shot[key].push_back(j.at("zero_shot_acc").get<double>());
  }

  const auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };

  fs::create_directories(cfg.output_dir);
  const std::string path = cfg.output_dir + "/report.csv";
  std::ofstream out(path);
  out << "defense";
  for (const auto& a : kAttacks) out << "," << a << "_asr";
  out << ",clean_zero_shot\n";
  for (const auto& d : kDefenses) {
    bool any = false;
    for (const auto& a : kAttacks)
      if (asr.count({d, a}) || zero_shot.count({d, a})) any = true;
    if (!any) continue;
    out << d;
    for (const auto& a : kAttacks) {
      out << ",";
      const auto it = asr.find({d, a});
      if (it != asr.end()) out << mean(it->second);
    }
    out << ",";
    const auto zit = zero_shot.find({d, "clean"});
    if (zit != zero_shot.end()) out << mean(zit->second);
    out << "\n";
  }
  std::cout << "report -> " << path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive pre-training poisoning defense: OT matching and fine-grained alignment"};
  app.require_subcommand(1);

  CliOverrides o;
  app.add_option("--config", o.config_path, "experiment config (JSON)")->required();
  app.add_option("--seed", o.seed, "override the top-level seed")->each([&](const std::string&) {
    o.seed_set = true;
  });
  app.add_option("--defense", o.defense, "otcclip | global_baseline | none");
  app.add_option("--attack", o.attack, "tdpa | badnet | label_consistent | blended | warp");
  app.add_option("--out", o.out, "override output_dir");
  app.add_option("--threads", o.threads, "cap the OpenMP worker count (results are unaffected)");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic world");
  auto* poi = app.add_subcommand("poison", "inject the configured attack into the world");
  auto* tra = app.add_subcommand("train", "train on the (poisoned) dataset");
  tra->add_flag("--clean", "train on the clean world instead of a poisoned dataset");
  auto* eva = app.add_subcommand("eval", "evaluate a trained model");
  eva->add_flag("--clean", "evaluate the clean-trained model");
  auto* aud = app.add_subcommand("match-audit", "dump matching scores for every poisoned row");
  auto* rep = app.add_subcommand("report", "aggregate eval runs into a CSV table");
  std::vector<std::string> report_dirs;
  rep->add_option("dirs", report_dirs, "eval output directories");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (o.threads > 0) omp_set_num_threads(o.threads);
    const ExperimentConfig cfg = resolve_config(o);
    if (gen->parsed()) return cmd_gen_data(cfg);
    if (poi->parsed()) return cmd_poison(cfg);
    if (tra->parsed()) return cmd_train(cfg, tra->count("--clean") == 0);
    if (eva->parsed()) return cmd_eval(cfg, eva->count("--clean") == 0);
    if (aud->parsed()) return cmd_match_audit(cfg);
    if (rep->parsed()) return cmd_report(cfg, report_dirs);
  } catch (const ConfigError& e) {
    std::cerr << "{\"error\":\"config\",\"message\":\"" << e.what() << "\"}\n";
    return 2;
  } catch (const MissingInputError& e) {
    std::cerr << "{\"error\":\"missing_input\",\"message\":\"" << e.what() << "\"}\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "{\"error\":\"numerical\",\"message\":\"" << e.what() << "\"}\n";
    return 4;
  }
  return 0;
}
