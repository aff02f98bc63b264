#pragma once

#include <cstdint>
#include <vector>

#include "otcclip/matching.hpp"
#include "otcclip/poison.hpp"
#include "otcclip/training.hpp"

namespace otcclip {

struct ZeroShotResult {
  std::vector<std::uint32_t> predictions;
  double accuracy = 0;       // meaningful only when labels were supplied
  Vec per_class_accuracy;    // indexed by class id; -1 for classes with no sample
};

/// Renders each class as the fixed prompt (3-token prefix + class token),
/// predicts by the highest cosine between image and prompt global features,
/// ties to the lowest class id. `labels` may be empty when only predictions
/// are wanted.
ZeroShotResult zero_shot(const ModelState& m, const std::vector<RawImage>& images,
                         const std::vector<std::uint32_t>& labels, const WorldSpec& world,
                         const std::vector<std::uint32_t>& classes);

/// Fraction of attacked test inputs classified as the adversarial label. For
/// backdoor kinds the trigger is applied to held-out clean images; for TDPA
/// the designated target image is evaluated as-is. adv_class must be in the
/// class set.
double attack_success_rate(const ModelState& m, const PoisonArtifacts& attack,
                           const std::vector<RawImage>& test_images, const WorldSpec& world,
                           const std::vector<std::uint32_t>& classes);

struct LinearProbeResult {
  double train_loss = 0;  // final mean cross-entropy
  double accuracy = 0;    // test accuracy
};

/// Multinomial logistic regression on frozen image global features: zero
/// init, 500 full-batch gradient steps at lr 0.1, no regularization.
LinearProbeResult linear_probe(const ModelState& m, const std::vector<RawImage>& train_images,
                               const std::vector<std::uint32_t>& train_labels,
                               const std::vector<RawImage>& test_images,
                               const std::vector<std::uint32_t>& test_labels,
                               std::size_t num_classes);

struct AuditStats {
  double defended_fraction = 0;
  std::vector<std::size_t> poisoned_rows;
  std::vector<std::int64_t> chosen_source_ids;
  std::vector<std::int32_t> chosen_classes;  // class of the chosen caption's row, -1 if synthetic
  Matrix scores;                             // |poisoned| x P
};

/// Re-runs matching for every poisoned row against the given pool and reports
/// whether each was re-assigned to a caption outside the adversarial set.
AuditStats match_audit(const ModelState& m, const Dataset& poisoned,
                       const std::vector<std::size_t>& poison_indices, const CaptionPool& pool,
                       const SinkhornConfig& cfg);

/// Pool for post-hoc audits: a seeded sample of P dataset captions encoded
/// with the given (typically final) model.
CaptionPool audit_pool(const ModelState& m, const Dataset& ds, std::size_t pool_size,
                       std::uint64_t seed);

struct EvalReport {
  double asr = -1;  // -1 when the run had no attack
  double zero_shot_acc = 0;
  double linear_probe_acc = 0;
  Vec per_class_accuracy;
  double audit_defended_fraction = -1;
};

}  // namespace otcclip
