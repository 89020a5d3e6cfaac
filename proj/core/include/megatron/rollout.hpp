#pragma once

#include <vector>

#include "megatron/image.hpp"
#include "megatron/vit.hpp"

namespace megatron::rollout {

using vit::Matrix;
using vit::Vector;

struct RolloutOptions {
  /// Clamp each layer's head-averaged attention x gradient product at zero.
  bool clamp_negative = false;
};

/// Grad-attention rollout of the last layer:
///   P_l = mean_h(A_l) (.) mean_h(dy_t/dA_l),  R_0 = P_0,  R_l = P_l R_{l-1}.
/// Throws ContractError when the stack carries no attention gradients.
Matrix grad_attention_rollout(const vit::AttentionStack& stack, const RolloutOptions& options = {});

/// Vector-Jacobian product of `d_row0 . R_N[0, :]` with respect to every
/// per-head attention matrix, holding the gradient factors constant.
/// Result is indexed [layer][head].
std::vector<std::vector<Matrix>> rollout_row0_vjp(const vit::AttentionStack& stack,
                                                  const Vector& d_row0,
                                                  const RolloutOptions& options = {});

enum class ScoreNormalization {
  None,
  /// Divide by the sum of |score| over patch tokens.
  SumAbs,
};

struct ImportanceScores {
  Vector scores;  // length p; entry 0 is the class-token self term
  int grid_rows = 0;
  int grid_cols = 0;
};

/// Row 0 of a square rolled-out matrix. The token grid is taken as the
/// square root of p - 1 when it is a perfect square, else 1 x (p - 1).
ImportanceScores importance_scores(const Matrix& rolled);

struct DiffusionArea {
  std::vector<int> token_indices;   // D, sorted, excludes the class token
  std::vector<int> trigger_tokens;  // sorted subset of D
  int radius = 0;

  int q() const noexcept { return static_cast<int>(token_indices.size()); }
  int m() const noexcept { return static_cast<int>(trigger_tokens.size()); }
  bool contains(int token) const;
};

/// Patch tokens overlapping `trigger`, dilated by a Chebyshev radius on the
/// token grid. Throws InputError for rects outside the image and BoundError
/// when the dilated area exceeds three times the trigger token count.
DiffusionArea diffusion_area(const PixelRect& trigger, const vit::ModelConfig& config, int radius);

/// Diffusion area covering exactly the given 1-based patch tokens.
DiffusionArea area_from_tokens(std::vector<int> tokens);

/// L = sum_{i in D} (1 - s_i) + sum_{i not in D, i >= 1} s_i.
double diffusion_loss(const ImportanceScores& scores, const DiffusionArea& area);

/// dL/ds: -1 on D, +1 on the remaining patch tokens, 0 on the class token.
Vector diffusion_loss_grad(int tokens, const DiffusionArea& area);

/// Scores, optionally normalised, with the matching Jacobian-transpose
/// applied to an upstream gradient.
Vector normalize_scores(const Vector& raw, ScoreNormalization mode);
Vector normalize_scores_vjp(const Vector& raw, const Vector& d_normalized, ScoreNormalization mode);

struct GapDecomposition {
  double gap = 0.0;
  double bracket_term = 0.0;
  double tail_term = 0.0;
};

/// Splits L(with) - L(without), both taken over D = {1..m}, into
///   bracket = sum_{1..m}(A0 - AD) - sum_{q+1..p-1}(A0 - AD)
///   tail    = sum_{m+1..q}(AD - A0)
/// and checks gap == bracket + tail.
GapDecomposition beta_gap_decomposition(const ImportanceScores& scores_with,
                                        const ImportanceScores& scores_without, int m, int q,
                                        int p);

}  // namespace megatron::rollout
