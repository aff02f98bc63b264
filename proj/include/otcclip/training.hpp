#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "otcclip/losses.hpp"
#include "otcclip/matching.hpp"
#include "otcclip/poison.hpp"

namespace otcclip {

enum class DefenseMode { none, global_baseline, otcclip };

std::string defense_mode_name(DefenseMode m);
DefenseMode defense_mode_from_name(const std::string& name);

/// The deterministic per-epoch row order used by train_epoch.
std::vector<std::size_t> seeded_shuffle(std::size_t count, std::uint64_t seed, int epoch);

struct TrainConfig {
  int epochs = 30;
  std::size_t batch_size = 64;  // N
  double lr = 5e-3;
  double tau = 0.1;             // InfoNCE temperature, fixed during training
  std::size_t pool_size = 512;  // P
  LossWeights loss;             // carries K, the matching/intra period
  SinkhornConfig sinkhorn;
  std::uint64_t seed = 0;
  DefenseMode defense = DefenseMode::otcclip;
  bool match_every_epoch = false;   // alternative gating: match always, intra each K
  bool unrolled_gradients = false;  // diagnostics only
  int checkpoint_every = 0;         // epochs between checkpoints; 0 disables

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  bool matching = false;
  double mean_clip = 0;
  double mean_inter = 0;
  double mean_intra = 0;
  double mean_total = 0;
  std::size_t pool_turnover = 0;
  // Fraction of poisoned rows the matcher re-assigned to captions outside the
  // adversarial set this epoch; -1 when no matching happened or no poisoned
  // row was seen.
  double poison_defended_fraction = -1;
  std::vector<std::array<double, 4>> steps;  // per-step clip/inter/intra/total
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
};

/// One pass over the data. Matching epochs (1-based epoch mod K == 0, or every
/// epoch under match_every_epoch) re-pair each image with its best pool
/// caption and train on the matched pairs with the full loss; plain epochs
/// train on the original pairs without the intra term. The pool receives the
/// batch's original caption representations after every batch.
EpochRecord train_epoch(ModelState& state, const Dataset& ds, CaptionPool& pool, int epoch,
                        const TrainConfig& cfg);

struct TrainRunResult {
  ModelState state;
  TrainLog log;
  std::optional<PoisonResult> poison;
};

/// Full run: optional poison injection, pool initialization from seeded random
/// token sequences, then cfg.epochs passes. Bitwise reproducible for a fixed
/// config and seed at any thread count. checkpoint_dir, when set, receives a
/// model snapshot every checkpoint_every epochs.
TrainRunResult train_run(const Dataset& ds, const TrainConfig& cfg,
                         const std::optional<PoisonSpec>& poison,
                         const std::string& checkpoint_dir = "");

}  // namespace otcclip
