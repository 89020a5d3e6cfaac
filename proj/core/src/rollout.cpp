#include "megatron/rollout.hpp"

#include <algorithm>
#include <cmath>

#include "megatron/errors.hpp"

namespace megatron::rollout {
namespace {

Matrix head_mean(const std::vector<Matrix>& heads) {
  Matrix m = heads.at(0);
  for (std::size_t h = 1; h < heads.size(); ++h) m += heads[h];
  return m / static_cast<double>(heads.size());
}

void check_stack(const vit::AttentionStack& stack) {
  if (!stack.has_gradients()) {
    throw ContractError("grad_attention_rollout: attention stack has no gradients");
  }
  if (stack.attn.empty()) throw ContractError("grad_attention_rollout: no layers");
  if (stack.attn_grad.size() != stack.attn.size()) {
    throw DimensionError("grad_attention_rollout: gradient layer count differs from attention");
  }
  const Eigen::Index p = stack.attn[0].at(0).rows();
  for (std::size_t l = 0; l < stack.attn.size(); ++l) {
    if (stack.attn[l].empty() || stack.attn_grad[l].size() != stack.attn[l].size()) {
      throw DimensionError("grad_attention_rollout: head count mismatch at layer " +
                           std::to_string(l));
    }
    for (std::size_t h = 0; h < stack.attn[l].size(); ++h) {
      const Matrix& a = stack.attn[l][h];
      const Matrix& g = stack.attn_grad[l][h];
      if (a.rows() != p || a.cols() != p || g.rows() != p || g.cols() != p) {
        throw DimensionError("grad_attention_rollout: non-square or mismatched matrix at layer " +
                             std::to_string(l));
      }
    }
  }
}

std::vector<Matrix> layer_products(const vit::AttentionStack& stack, const RolloutOptions& opt,
                                   std::vector<Matrix>* grad_means) {
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < stack.attn.size(); ++l) {
    Matrix g = head_mean(stack.attn_grad[l]);
    Matrix prod = head_mean(stack.attn[l]).cwiseProduct(g);
    if (opt.clamp_negative) prod = prod.cwiseMax(0.0);
    out.push_back(std::move(prod));
    if (grad_means) grad_means->push_back(std::move(g));
  }
  return out;
}

}  // namespace

Matrix grad_attention_rollout(const vit::AttentionStack& stack, const RolloutOptions& options) {
  check_stack(stack);
  const std::vector<Matrix> P = layer_products(stack, options, nullptr);
  Matrix r = P[0];
  for (std::size_t l = 1; l < P.size(); ++l) r = P[l] * r;
  return r;
}

std::vector<std::vector<Matrix>> rollout_row0_vjp(const vit::AttentionStack& stack,
                                                  const Vector& d_row0,
                                                  const RolloutOptions& options) {
  check_stack(stack);
  std::vector<Matrix> G;
  const std::vector<Matrix> P = layer_products(stack, options, &G);
  const std::size_t N = P.size();
  const Eigen::Index p = P[0].rows();
  if (d_row0.size() != p) throw DimensionError("rollout_row0_vjp: gradient length differs from p");

  // Forward partial products R_l, then reverse through R_l = P_l R_{l-1}.
  std::vector<Matrix> R(N);
  R[0] = P[0];
  for (std::size_t l = 1; l < N; ++l) R[l] = P[l] * R[l - 1];

  std::vector<Matrix> dP(N);
  Matrix dR = Matrix::Zero(p, p);
  dR.row(0) = d_row0.transpose();
  for (std::size_t l = N; l-- > 1;) {
    dP[l] = dR * R[l - 1].transpose();
    dR = P[l].transpose() * dR;
  }
  dP[0] = dR;

  std::vector<std::vector<Matrix>> out(N);
  for (std::size_t l = 0; l < N; ++l) {
    const std::size_t H = stack.attn[l].size();
    Matrix d_mean = dP[l].cwiseProduct(G[l]);
    if (options.clamp_negative) d_mean = (P[l].array() > 0.0).select(d_mean, 0.0);
    d_mean /= static_cast<double>(H);
    out[l].assign(H, d_mean);
  }
  return out;
}

ImportanceScores importance_scores(const Matrix& rolled) {
  if (rolled.rows() != rolled.cols() || rolled.rows() < 1) {
    throw DimensionError("importance_scores: rolled-out matrix must be square, got " +
                         std::to_string(rolled.rows()) + "x" + std::to_string(rolled.cols()));
  }
  ImportanceScores s;
  s.scores = rolled.row(0).transpose();
  if (!s.scores.allFinite()) throw InputError("importance_scores: non-finite score");
  const int n = static_cast<int>(rolled.rows()) - 1;
  const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (side * side == n) {
    s.grid_rows = s.grid_cols = side;
  } else {
    s.grid_rows = 1;
    s.grid_cols = n;
  }
  return s;
}

bool DiffusionArea::contains(int token) const {
  return std::binary_search(token_indices.begin(), token_indices.end(), token);
}

DiffusionArea diffusion_area(const PixelRect& trigger, const vit::ModelConfig& config,
                             int radius) {
  if (radius < 0) throw InputError("diffusion_area: radius must be >= 0");
  if (trigger.width <= 0 || trigger.height <= 0 ||
      !rect_inside(trigger, config.image_size, config.image_size)) {
    throw InputError("diffusion_area: trigger rect lies outside the image");
  }
  const int ps = config.patch_size;
  const int g = config.grid();
  const int r0 = trigger.y / ps;
  const int r1 = (trigger.y + trigger.height - 1) / ps;
  const int c0 = trigger.x / ps;
  const int c1 = (trigger.x + trigger.width - 1) / ps;

  DiffusionArea area;
  area.radius = radius;
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) area.trigger_tokens.push_back(1 + r * g + c);
  for (int r = std::max(0, r0 - radius); r <= std::min(g - 1, r1 + radius); ++r)
    for (int c = std::max(0, c0 - radius); c <= std::min(g - 1, c1 + radius); ++c)
      area.token_indices.push_back(1 + r * g + c);
  if (area.q() > 3 * area.m()) {
    throw BoundError("diffusion_area: radius " + std::to_string(radius) + " gives q=" +
                     std::to_string(area.q()) + " > 3m=" + std::to_string(3 * area.m()));
  }
  return area;
}

DiffusionArea area_from_tokens(std::vector<int> tokens) {
  std::sort(tokens.begin(), tokens.end());
  tokens.erase(std::unique(tokens.begin(), tokens.end()), tokens.end());
  if (tokens.empty() || tokens.front() < 1) {
    throw InputError("area_from_tokens: tokens must be non-empty patch indices (>= 1)");
  }
  DiffusionArea a;
  a.token_indices = tokens;
  a.trigger_tokens = std::move(tokens);
  return a;
}

double diffusion_loss(const ImportanceScores& scores, const DiffusionArea& area) {
  const Eigen::Index p = scores.scores.size();
  if (!area.token_indices.empty() && area.token_indices.back() >= p) {
    throw InputError("diffusion_loss: area index " + std::to_string(area.token_indices.back()) +
                     " out of range for " + std::to_string(p) + " scores");
  }
  double loss = 0.0;
  for (Eigen::Index i = 1; i < p; ++i) {
    const double s = scores.scores(i);
    loss += area.contains(static_cast<int>(i)) ? 1.0 - s : s;
  }
  return loss;
}

Vector diffusion_loss_grad(int tokens, const DiffusionArea& area) {
  if (!area.token_indices.empty() && area.token_indices.back() >= tokens) {
    throw InputError("diffusion_loss_grad: area index out of range");
  }
  Vector g = Vector::Ones(tokens);
  g(0) = 0.0;
  for (int i : area.token_indices) g(i) = -1.0;
  return g;
}

Vector normalize_scores(const Vector& raw, ScoreNormalization mode) {
  if (mode == ScoreNormalization::None) return raw;
  const double z = raw.tail(raw.size() - 1).cwiseAbs().sum();
  if (z == 0.0) return raw;
  return raw / z;
}

Vector normalize_scores_vjp(const Vector& raw, const Vector& d, ScoreNormalization mode) {
  if (mode == ScoreNormalization::None) return d;
  const Eigen::Index n = raw.size();
  const double z = raw.tail(n - 1).cwiseAbs().sum();
  if (z == 0.0) return d;
  // s = r / z with z = sum_{i>=1} |r_i|.
  const double dot = d.dot(raw);
  Vector out = d / z;
  for (Eigen::Index i = 1; i < n; ++i) {
    const double sign = raw(i) > 0.0 ? 1.0 : (raw(i) < 0.0 ? -1.0 : 0.0);
    out(i) -= dot * sign / (z * z);
  }
  return out;
}

GapDecomposition beta_gap_decomposition(const ImportanceScores& with,
                                        const ImportanceScores& without, int m, int q, int p) {
  if (with.scores.size() != p || without.scores.size() != p) {
    throw InputError("beta_gap_decomposition: score vectors must both have length p=" +
                     std::to_string(p));
  }
  if (m < 1 || m > q || q >= p) {
    throw InputError("beta_gap_decomposition: require 1 <= m <= q < p");
  }
  const Vector& ad = with.scores;
  const Vector& a0 = without.scores;
  const DiffusionArea area = area_from_tokens([&] {
    std::vector<int> t;
    for (int i = 1; i <= m; ++i) t.push_back(i);
    return t;
  }());

  GapDecomposition r;
  r.gap = diffusion_loss(with, area) - diffusion_loss(without, area);
  double head = 0.0, rest = 0.0, tail = 0.0;
  for (int i = 1; i <= m; ++i) head += a0(i) - ad(i);
  for (int i = q + 1; i <= p - 1; ++i) rest += a0(i) - ad(i);
  for (int i = m + 1; i <= q; ++i) tail += ad(i) - a0(i);
  r.bracket_term = head - rest;
  r.tail_term = tail;
  const double scale = 1.0 + ad.cwiseAbs().sum() + a0.cwiseAbs().sum();
  if (std::abs(r.gap - (r.bracket_term + r.tail_term)) > 1e-9 * scale) {
    throw ContractError("beta_gap_decomposition: gap differs from bracket + tail");
  }
  return r;
}

}  // namespace megatron::rollout
