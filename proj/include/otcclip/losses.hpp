#pragma once

#include <optional>
#include <vector>

#include "otcclip/features.hpp"
#include "otcclip/ot.hpp"

namespace otcclip {

struct LossWeights {
  double lambda_c = 1.0;
  double lambda_im = 2.0;
  double lambda_sm = 0.4;
  int K = 2;  // epoch period of the intra-modality term

  void validate() const;
};

struct ClipLossResult {
  double value = 0;
  Matrix d_img;  // N x d, dLoss/d(image globals)
  Matrix d_txt;  // N x d, dLoss/d(caption globals)
};

/// Symmetric InfoNCE over the N x N similarity matrix of paired global
/// features, averaged image->text and text->image, factor 1/2N each.
ClipLossResult clip_infonce(const Matrix& img_globals, const Matrix& txt_globals, double tau);

struct PairLossResult {
  double value = 0;      // Sinkhorn objective (transport cost + lambda*negentropy)
  double pure_cost = 0;  // transport cost alone, reported alongside
  Matrix d_x;            // dLoss/d(x rows)
  Matrix d_y;            // dLoss/d(y rows)
};

/// Sinkhorn objective on C = 1 - S between one image's patch rows and one
/// caption's token rows, uniform marginals. Gradients use the envelope rule
/// (plan held fixed at its optimum); set `unrolled` to differentiate through
/// the scaling iterations instead.
PairLossResult inter_modal_loss(const SpatialFeatures& x, const SpatialFeatures& y,
                                const SinkhornConfig& cfg, bool unrolled = false);

/// Sum of the two self-transport objectives: image-to-image on 1 - S_II and
/// text-to-text on 1 - S_TT, each with uniform marginals.
PairLossResult intra_modal_loss(const SpatialFeatures& x, const SpatialFeatures& y,
                                const SinkhornConfig& cfg, bool unrolled = false);

/// One matched pair inside a batch. The caption side is trainable when
/// `caption` is set (original pair); a frozen pool snapshot otherwise.
struct BatchPair {
  RawImage image;
  Encoded img;
  std::optional<RawCaption> caption;
  Encoded txt;
};

struct LossReport {
  double clip = 0;
  double inter = 0;
  double intra = 0;
  double total = 0;
  ModelGrads grads;
};

/// Combines the three objectives: total = lambda_c*clip + lambda_im*inter
/// + [epoch mod K == 0]*lambda_sm*intra, with the inter/intra terms summed
/// (not averaged) over pairs. Per-pair terms compute in parallel; parameter
/// gradients accumulate afterwards in fixed pair order. Epochs are 1-based.
LossReport total_loss(const std::vector<BatchPair>& batch, int epoch, const LossWeights& w,
                      const SinkhornConfig& cfg, const ModelState& state, bool unrolled = false);

}  // namespace otcclip
