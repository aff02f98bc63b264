#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "otcclip/data_io.hpp"
#include "otcclip/ot.hpp"

namespace otcclip {

enum class AttackKind { tdpa, badnet_patch, blended, warp, label_consistent };

std::string attack_kind_name(AttackKind k);
AttackKind attack_kind_from_name(const std::string& name);

struct PgdSpec {
  int steps = 100;
  double step_size = 1e-3;
  double epsilon = 0.1;
};

struct TriggerSpec {
  Vec patch_value;             // d_in, for the patch trigger
  std::size_t patch_index = 0; // which spatial cell
  double blend_alpha = 0.2;
  double warp_strength = 0.5;
  std::uint64_t pattern_seed = 0;  // seeds the blended pattern / warp field
  std::optional<PgdSpec> pgd;
};

/// Declarative attack description.
struct PoisonSpec {
  AttackKind kind = AttackKind::tdpa;
  std::uint32_t adv_class = 0;
  double rate = 0.005;
  TriggerSpec trigger;
  std::size_t template_count = 16;
  std::uint64_t seed = 0;
  // TDPA target construction, desk-scale constants recorded in the config.
  double target_class_weight = 0.6;   // prototype weight in the target direction mix
  double target_jitter_sigma = 0.01;  // near-duplicate jitter for poisoned copies

  void validate(const Dataset& ds) const;
};

struct PoisonResult {
  Dataset dataset;                        // poisoned copy, non-poisoned rows untouched
  std::vector<std::size_t> indices;       // positions of poisoned rows
  std::vector<RawCaption> adv_captions;   // the adversarial caption set
  RawImage target_image;                  // TDPA: the designated target, as evaluated
  std::uint32_t target_class = 0;         // its nominal class (never adv_class)
};

/// Deterministic set of template captions, each containing the adversarial
/// class token plus filler tokens from the class's vocabulary block. All
/// sequences are distinct.
std::vector<RawCaption> build_adversarial_captions(const WorldSpec& world, const ModelDims& dims,
                                                   std::uint32_t adv_class,
                                                   std::size_t template_count, std::uint64_t seed);

/// badnet_patch/label_consistent: replaces cell patch_index with patch_value.
/// blended: every cell <- (1-alpha)*cell + alpha*pattern (seeded).
/// warp: smooth seeded displacement of strength warp_strength with bilinear
/// interpolation over the patch grid.
RawImage apply_trigger(const RawImage& img, const TriggerSpec& t, AttackKind kind);

/// Replaces ceil(rate*|D|) seeded rows with poisoned ones; everything else is
/// byte-identical to the input. TDPA plants near-duplicates of a designated
/// target image; backdoor kinds apply the trigger to random rows;
/// label_consistent triggers rows already belonging to adv_class and keeps
/// their captions clean.
PoisonResult inject(const Dataset& ds, const PoisonSpec& spec);

/// Adaptive attack: optimizes patch_value by signed-gradient steps that
/// minimize the OT matching objective between triggered images and their
/// adversarial captions, projecting onto the L-inf epsilon ball around
/// t0.patch_value. Runs exactly t0.pgd->steps iterations. When trace is given
/// it receives the objective value before each step plus the final value.
TriggerSpec adaptive_pgd_trigger(const ModelState& model,
                                 const std::vector<std::pair<RawImage, RawCaption>>& pairs,
                                 const TriggerSpec& t0, const SinkhornConfig& cfg,
                                 Vec* trace = nullptr);

// Poison artifacts on disk: the poisoned dataset plus an index file.
void save_poison_artifacts(const PoisonResult& res, const PoisonSpec& spec, const std::string& dir);
struct PoisonArtifacts {
  PoisonSpec spec;
  std::vector<std::size_t> indices;
  std::vector<RawCaption> adv_captions;
  RawImage target_image;
  std::uint32_t target_class = 0;
};
PoisonArtifacts load_poison_artifacts(const std::string& dir, const ModelDims& dims);

}  // namespace otcclip
