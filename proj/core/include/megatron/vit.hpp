#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "megatron/image.hpp"

namespace megatron::vit {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Pooling { ClassToken, Mean };

struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int channels = 3;
  int n_layers = 4;
  int n_heads = 4;
  int embed_dim = 64;
  int n_classes = 2;
  double mlp_ratio = 2.0;
  // Class-token pooling with a final LayerNorm is the standard ViT head; the
  // alternatives exist for closed-form gradient tests on linear toy models.
  Pooling pooling = Pooling::ClassToken;
  bool final_norm = true;

  int grid() const noexcept { return image_size / patch_size; }
  int patches() const noexcept { return grid() * grid(); }
  /// Patch tokens plus the class token at index 0.
  int tokens() const noexcept { return patches() + 1; }
  int head_dim() const noexcept { return embed_dim / n_heads; }
  int hidden_dim() const noexcept;
  int patch_dim() const noexcept { return patch_size * patch_size * channels; }

  /// Throws DimensionError / InputError when the invariants do not hold.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Per-head projections are column blocks: head i owns columns
/// [i*head_dim, (i+1)*head_dim) of w_q, w_k and w_v.
struct AttentionWeights {
  Matrix w_q, w_k, w_v, w_o;  // embed_dim x embed_dim
  Matrix b_q, b_k, b_v, b_o;  // 1 x embed_dim
};

struct EncoderLayer {
  Matrix ln1_gamma, ln1_beta;
  AttentionWeights attn;
  Matrix ln2_gamma, ln2_beta;
  Matrix w_fc1, b_fc1;  // embed_dim x hidden, 1 x hidden
  Matrix w_fc2, b_fc2;  // hidden x embed_dim, 1 x embed_dim
};

struct Params {
  Matrix w_patch, b_patch;  // patch_dim x embed_dim, 1 x embed_dim
  Matrix cls_token;         // 1 x embed_dim
  Matrix pos_embed;         // tokens x embed_dim
  std::vector<EncoderLayer> layers;
  Matrix norm_gamma, norm_beta;
  Matrix w_head, b_head;  // embed_dim x n_classes, 1 x n_classes
};

/// Visit every parameter tensor in the canonical (checkpoint) order.
template <typename P, typename F>
void for_each_tensor(P& p, F&& f) {
  f("patch.weight", p.w_patch);
  f("patch.bias", p.b_patch);
  f("cls_token", p.cls_token);
  f("pos_embed", p.pos_embed);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    f(pre + "ln1.gamma", L.ln1_gamma);
    f(pre + "ln1.beta", L.ln1_beta);
    f(pre + "attn.w_q", L.attn.w_q);
    f(pre + "attn.b_q", L.attn.b_q);
    f(pre + "attn.w_k", L.attn.w_k);
    f(pre + "attn.b_k", L.attn.b_k);
    f(pre + "attn.w_v", L.attn.w_v);
    f(pre + "attn.b_v", L.attn.b_v);
    f(pre + "attn.w_o", L.attn.w_o);
    f(pre + "attn.b_o", L.attn.b_o);
    f(pre + "ln2.gamma", L.ln2_gamma);
    f(pre + "ln2.beta", L.ln2_beta);
    f(pre + "fc1.weight", L.w_fc1);
    f(pre + "fc1.bias", L.b_fc1);
    f(pre + "fc2.weight", L.w_fc2);
    f(pre + "fc2.bias", L.b_fc2);
  }
  f("norm.gamma", p.norm_gamma);
  f("norm.beta", p.norm_beta);
  f("head.weight", p.w_head);
  f("head.bias", p.b_head);
}

/// Paired visit over two structurally identical parameter sets.
template <typename A, typename B, typename F>
void for_each_tensor_pair(A& a, B& b, F&& f) {
  std::vector<std::conditional_t<std::is_const_v<B>, const Matrix*, Matrix*>> rhs;
  for_each_tensor(b, [&](const std::string&, auto& m) { rhs.push_back(&m); });
  std::size_t i = 0;
  for_each_tensor(a, [&](const std::string& name, auto& m) { f(name, m, *rhs.at(i++)); });
}

/// Same structure as `like`, every tensor zero.
Params zeros_like(const Params& like);

std::size_t parameter_count(const Params& p);

bool all_finite(const Params& p);

/// PyTorch-style defaults: linear weights and biases U(+-1/sqrt(fan_in)),
/// position embeddings N(0, 0.02^2), zero class token, unit LayerNorm scale.
Params init_params(const ModelConfig& config, std::uint64_t seed);

struct Model {
  ModelConfig config;
  Params params;
};

/// Per-layer, per-head post-softmax attention plus optional gradients.
struct AttentionStack {
  std::vector<std::vector<Matrix>> attn;       // [layer][head], tokens x tokens
  std::vector<std::vector<Matrix>> attn_grad;  // same shape when present
  Vector logits;
  Vector features;

  bool has_gradients() const noexcept { return !attn_grad.empty(); }
  std::size_t n_layers() const noexcept { return attn.size(); }
  /// Head-averaged attention of layer `l`.
  Matrix mean_attention(std::size_t l) const;
};

/// softmax(Q K^T / sqrt(d)) V together with the softmax weights.
struct AttentionResult {
  Matrix output;
  Matrix weights;
};
AttentionResult attention(const Matrix& q, const Matrix& k, const Matrix& v, double d);

/// Concat(head_1..head_h) W^O + b_o with head_i = attention(X W_i^Q, X W_i^K, X W_i^V).
Matrix multi_head_attention(const Matrix& tokens, const AttentionWeights& w, int n_heads,
                            std::vector<Matrix>* weights_out = nullptr);

/// Perturbation injected into a post-softmax attention entry during the
/// forward pass. Used for finite-difference checks of attention gradients;
/// a cache built with offsets cannot be back-propagated.
struct AttentionOffset {
  int layer = 0;
  int sample = 0;
  int head = 0;
  int row = 0;
  int col = 0;
  double delta = 0.0;
};

struct NormCache {
  Matrix xhat;
  Vector rstd;
};

struct LayerCache {
  NormCache ln1;
  Matrix h1, q, k, v;
  std::vector<Matrix> attn;  // [sample * n_heads + head]
  Matrix ctx;
  NormCache ln2;
  Matrix h2, z1, g;
};

/// Activations of a batched forward pass. Tokens of sample b occupy rows
/// [b*tokens, (b+1)*tokens) of every stacked matrix.
struct ForwardCache {
  int batch = 0;
  bool perturbed = false;
  Matrix patches;  // (batch*patches) x patch_dim
  std::vector<LayerCache> layers;
  NormCache final_norm;
  Matrix normed;    // (batch*tokens) x embed_dim, input to pooling
  Matrix features;  // batch x embed_dim
  Matrix logits;    // batch x n_classes

  /// Attention stack of one sample (no gradients).
  AttentionStack stack(const ModelConfig& config, int sample) const;
};

ForwardCache forward_batch(const Model& model, std::span<const Image* const> images,
                           std::span<const AttentionOffset> offsets = {});
ForwardCache forward_one(const Model& model, const Image& image,
                         std::span<const AttentionOffset> offsets = {});

/// Upstream gradients of a scalar objective, one row per batch sample.
/// `d_attn` is either empty or [layer][sample * n_heads + head].
struct Upstream {
  Matrix d_logits;
  Matrix d_features;
  std::vector<std::vector<Matrix>> d_attn;
};

struct BackwardRequest {
  bool params = false;
  bool inputs = false;
  bool attention = false;
};

struct Gradients {
  std::optional<Params> params;
  std::vector<Image> inputs;                   // per sample, pixel-shaped
  std::vector<std::vector<Matrix>> attention;  // [layer][sample * n_heads + head]
};

Gradients backward(const Model& model, const ForwardCache& cache, const Upstream& upstream,
                   BackwardRequest request);

/// Forward pass for a single image.
AttentionStack forward(const ModelConfig& config, const Params& params, const Image& image);

/// Forward pass plus gradients of the target logit with respect to every
/// post-softmax attention matrix.
AttentionStack grad_wrt_attention(const ModelConfig& config, const Params& params,
                                  const Image& image, int target_label);

/// A scalar objective of one forward pass: its value and the upstream
/// gradients with respect to logits, features and (optionally) attention.
struct ScalarObjective {
  double value = 0.0;
  Vector d_logits;
  Vector d_features;
  std::vector<std::vector<Matrix>> d_attn;  // [layer][head] or empty
};
using LossSelector = std::function<ScalarObjective(const AttentionStack&)>;

struct InputGradient {
  double value = 0.0;
  Image gradient;
};

/// Pixel gradient of the selector's scalar. Throws ContractError when the
/// selector's upstream gradients are not shaped as a scalar objective.
InputGradient grad_wrt_input(const ModelConfig& config, const Params& params, const Image& image,
                             const LossSelector& selector);

int predict(const Model& model, const Image& image);
std::vector<int> predict_all(const Model& model, std::span<const Image* const> images,
                             int batch_size = 64);

/// Extract row-block patches of an image in token order (row-major grid),
/// each flattened as (channel, row, column).
Matrix extract_patches(const ModelConfig& config, const Image& image);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

enum class Optimizer { Adam, Sgd };

struct TrainConfig {
  int epochs = 6;
  double learning_rate = 1e-3;
  int batch_size = 32;
  std::uint64_t seed = 0;
  double weight_decay = 0.0;
  Optimizer optimizer = Optimizer::Adam;

  void validate() const;
};

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  Params params;
  std::vector<EpochStats> history;
  double final_loss = 0.0;
};

using EpochObserver = std::function<void(const EpochStats&)>;

/// Mini-batch cross-entropy training from a seeded initialisation. The
/// result is a pure function of (config, tc, dataset).
TrainResult train(const ModelConfig& config, const TrainConfig& tc, const Dataset& dataset,
                  const EpochObserver& observer = {});

/// Mean cross-entropy and accuracy of a model over a dataset.
struct EvalStats {
  double loss = 0.0;
  double accuracy = 0.0;
};
EvalStats evaluate(const Model& model, const Dataset& dataset, int batch_size = 64);

}  // namespace megatron::vit
