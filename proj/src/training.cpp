#include "otcclip/training.hpp"

#include <stdexcept>
#include <unordered_map>

#include "otcclip/rng.hpp"

namespace otcclip {

std::string defense_mode_name(DefenseMode m) {
  switch (m) {
    case DefenseMode::none: return "none";
    case DefenseMode::global_baseline: return "global_baseline";
    case DefenseMode::otcclip: return "otcclip";
  }
  throw std::invalid_argument("defense_mode_name: unknown mode");
}

DefenseMode defense_mode_from_name(const std::string& name) {
  if (name == "none") return DefenseMode::none;
  if (name == "global_baseline") return DefenseMode::global_baseline;
  if (name == "otcclip") return DefenseMode::otcclip;
  throw std::invalid_argument("unknown defense mode: " + name);
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (!(tau > 0.0)) throw std::invalid_argument("TrainConfig: tau must be > 0");
  if (defense != DefenseMode::none && batch_size > pool_size)
    throw std::invalid_argument("TrainConfig: batch_size must not exceed pool_size");
  loss.validate();
  sinkhorn.validate();
}

std::vector<std::size_t> seeded_shuffle(std::size_t count, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(count);
  for (std::size_t i = 0; i < count; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "shuffle", static_cast<std::uint64_t>(epoch)));
  for (std::size_t i = 0; i + 1 < count; ++i) {
    const std::size_t j = i + rng.uniform_index(count - i);
    std::swap(order[i], order[j]);
  }
  return order;
}

EpochRecord train_epoch(ModelState& state, const Dataset& ds, CaptionPool& pool, int epoch,
                        const TrainConfig& cfg) {
  if (ds.rows.empty()) throw std::invalid_argument("train_epoch: empty dataset");
  const bool defended = cfg.defense != DefenseMode::none;
  const bool matching_epoch =
      defended && (cfg.match_every_epoch || (epoch % cfg.loss.K) == 0);

  LossWeights weights = cfg.loss;
  if (!defended) {
    weights.lambda_im = 0.0;  // undefended baseline trains InfoNCE only
    weights.lambda_sm = 0.0;
  }

  std::unordered_map<std::int64_t, bool> poisoned_by_id;
  for (const DataRow& r : ds.rows) poisoned_by_id[r.id] = r.poisoned;

  EpochRecord rec;
  rec.epoch = epoch;
  rec.matching = matching_epoch;

  const std::vector<std::size_t> order = seeded_shuffle(ds.rows.size(), cfg.seed, epoch);
  std::size_t defended_rows = 0, audited_rows = 0, batches = 0;

  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t n = std::min(cfg.batch_size, order.size() - start);
    std::vector<const DataRow*> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = &ds.rows[order[start + i]];

    std::vector<Encoded> img_enc(n), cap_enc(n);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      img_enc[ii] = encode_image(rows[ii]->image, state);
      cap_enc[ii] = encode_text(rows[ii]->caption, state);
    }

    std::vector<BatchPair> batch(n);
    if (matching_epoch) {
      MatchResult match;
      if (cfg.defense == DefenseMode::otcclip) {
        std::vector<SpatialFeatures> imgs(n);
        for (std::size_t i = 0; i < n; ++i) imgs[i] = img_enc[i].spatial;
        match = match_batch(imgs, pool, cfg.sinkhorn);
      } else {
        std::vector<GlobalFeature> imgs(n);
        for (std::size_t i = 0; i < n; ++i) imgs[i] = img_enc[i].global;
        match = global_match_baseline(imgs, pool);
      }
      for (std::size_t i = 0; i < n; ++i) {
        const PoolEntry& e = pool.entry(match.chosen[i]);
        batch[i].image = rows[i]->image;
        batch[i].img = img_enc[i];
        batch[i].txt.spatial = e.fine;   // frozen snapshot, no caption-side gradient
        batch[i].txt.global = e.global;
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (!rows[i]->poisoned) continue;
        ++audited_rows;
        const std::int64_t src = match.chosen_source_ids[i];
        const auto it = poisoned_by_id.find(src);
        const bool matched_adv = src >= 0 && it != poisoned_by_id.end() && it->second;
        if (!matched_adv) ++defended_rows;
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        batch[i].image = rows[i]->image;
        batch[i].img = img_enc[i];
        batch[i].caption = rows[i]->caption;
        batch[i].txt = cap_enc[i];
      }
    }

    const LossReport report =
        total_loss(batch, epoch, weights, cfg.sinkhorn, state, cfg.unrolled_gradients);
    apply_sgd(state, report.grads, cfg.lr);

    if (defended) {
      std::vector<PoolEntry> fresh(n);
      for (std::size_t i = 0; i < n; ++i) {
        fresh[i].fine = cap_enc[i].spatial;
        fresh[i].global = cap_enc[i].global;
        fresh[i].source_id = rows[i]->id;
      }
      pool_update(pool, fresh);
      rec.pool_turnover += n;
    }

    rec.mean_clip += report.clip;
    rec.mean_inter += report.inter;
    rec.mean_intra += report.intra;
    rec.mean_total += report.total;
    rec.steps.push_back({report.clip, report.inter, report.intra, report.total});
    ++batches;
  }

  if (batches > 0) {
    rec.mean_clip /= static_cast<double>(batches);
    rec.mean_inter /= static_cast<double>(batches);
    rec.mean_intra /= static_cast<double>(batches);
    rec.mean_total /= static_cast<double>(batches);
  }
  if (matching_epoch && audited_rows > 0)
    rec.poison_defended_fraction =
        static_cast<double>(defended_rows) / static_cast<double>(audited_rows);
  return rec;
}

TrainRunResult train_run(const Dataset& ds, const TrainConfig& cfg,
                         const std::optional<PoisonSpec>& poison,
                         const std::string& checkpoint_dir) {
  cfg.validate();

  TrainRunResult out;
  const Dataset* data = &ds;
  if (poison) {
    out.poison = inject(ds, *poison);
    data = &out.poison->dataset;
  }

  out.state = init_model_state(data->dims, cfg.seed);
  out.state.tau = cfg.tau;

  CaptionPool pool;
  if (cfg.defense != DefenseMode::none) {
    // Random caption representations: seeded token sequences over the full
    // vocabulary, encoded with the initial model. They go stale as training
    // moves the encoder and are flushed by FIFO turnover.
    std::vector<PoolEntry> init(cfg.pool_size);
    std::vector<RawCaption> caps(cfg.pool_size);
    for (std::size_t i = 0; i < cfg.pool_size; ++i) {
      Rng rng(derive_seed(cfg.seed, "pool_init", i));
      RawCaption c;
      c.vocab_size = data->dims.vocab_size;
      c.tokens.resize(data->spec.caption_len);
      for (auto& t : c.tokens)
        t = static_cast<std::uint32_t>(rng.uniform_index(data->dims.vocab_size));
      caps[i] = std::move(c);
    }
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(cfg.pool_size); ++i) {
      const std::size_t ii = static_cast<std::size_t>(i);
      const Encoded e = encode_text(caps[ii], out.state);
      init[ii].fine = e.spatial;
      init[ii].global = e.global;
      init[ii].source_id = -1;
    }
    pool = CaptionPool(std::move(init));
  }

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    out.log.epochs.push_back(train_epoch(out.state, *data, pool, epoch, cfg));
    if (cfg.checkpoint_every > 0 && !checkpoint_dir.empty() &&
        epoch % cfg.checkpoint_every == 0) {
      save_model(out.state, checkpoint_dir + "/checkpoint_" + std::to_string(epoch));
    }
  }
  return out;
}

}  // namespace otcclip
