#include "megatron/vit.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "megatron/errors.hpp"
#include "megatron/random.hpp"

namespace megatron::vit {
namespace {

constexpr double kNormEps = 1e-6;

Matrix layer_norm(const Matrix& x, const Matrix& gamma, const Matrix& beta, NormCache& cache) {
  const Eigen::Index d = x.cols();
  cache.xhat.resize(x.rows(), d);
  cache.rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kNormEps);
    cache.rstd(r) = rstd;
    cache.xhat.row(r) = (x.row(r).array() - mean) * rstd;
  }
  Matrix y = cache.xhat.array().rowwise() * gamma.row(0).array();
  y.rowwise() += beta.row(0);
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const NormCache& cache, const Matrix& gamma,
                           Matrix* d_gamma, Matrix* d_beta) {
  if (d_gamma) d_gamma->row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  if (d_beta) d_beta->row(0) += dy.colwise().sum();
  Matrix dxhat = dy.array().rowwise() * gamma.row(0).array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).mean();
    const double m2 = (dxhat.row(r).array() * cache.xhat.row(r).array()).mean();
    dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - m1 - cache.xhat.row(r).array() * m2);
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

void softmax_rows(Matrix& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

Matrix linear(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y(x.rows(), w.cols());
  y.noalias() = x * w;
  y.rowwise() += b.row(0);
  return y;
}

Matrix uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

void check_image(const ModelConfig& config, const Image& image) {
  if (image.channels() != config.channels || image.height() != config.image_size ||
      image.width() != config.image_size) {
    throw DimensionError("image " + image.shape_string() + " does not match model input " +
                         std::to_string(config.channels) + "x" +
                         std::to_string(config.image_size) + "x" +
                         std::to_string(config.image_size));
  }
}

}  // namespace

int ModelConfig::hidden_dim() const noexcept {
  return std::max(1, static_cast<int>(std::lround(mlp_ratio * embed_dim)));
}

void ModelConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || embed_dim <= 0 || n_heads <= 0 ||
      n_classes <= 0 || n_layers < 0 || !(mlp_ratio > 0.0)) {
    throw InputError("ModelConfig: non-positive dimension");
  }
  if (image_size % patch_size != 0) {
    throw DimensionError("ModelConfig: image_size " + std::to_string(image_size) +
                         " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (embed_dim % n_heads != 0) {
    throw DimensionError("ModelConfig: embed_dim " + std::to_string(embed_dim) +
                         " not divisible by n_heads " + std::to_string(n_heads));
  }
}

Params zeros_like(const Params& like) {
  Params z = like;
  for_each_tensor(z, [](const std::string&, Matrix& m) { m.setZero(); });
  return z;
}

std::size_t parameter_count(const Params& p) {
  std::size_t n = 0;
  for_each_tensor(p, [&](const std::string&, const Matrix& m) { n += m.size(); });
  return n;
}

bool all_finite(const Params& p) {
  bool ok = true;
  for_each_tensor(p, [&](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); });
  return ok;
}

Params init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const int d = config.embed_dim;
  const int hid = config.hidden_dim();
  Params p;
  const double b_patch = 1.0 / std::sqrt(static_cast<double>(config.patch_dim()));
  p.w_patch = uniform_matrix(rng, config.patch_dim(), d, b_patch);
  p.b_patch = uniform_matrix(rng, 1, d, b_patch);
  p.cls_token = Matrix::Zero(1, d);
  p.pos_embed.resize(config.tokens(), d);
  for (Eigen::Index i = 0; i < p.pos_embed.size(); ++i) p.pos_embed.data()[i] = 0.02 * rng.normal();
  const double b_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double b_h = 1.0 / std::sqrt(static_cast<double>(hid));
  for (int l = 0; l < config.n_layers; ++l) {
    EncoderLayer L;
    L.ln1_gamma = Matrix::Ones(1, d);
    L.ln1_beta = Matrix::Zero(1, d);
    L.attn.w_q = uniform_matrix(rng, d, d, b_d);
    L.attn.b_q = uniform_matrix(rng, 1, d, b_d);
    L.attn.w_k = uniform_matrix(rng, d, d, b_d);
    L.attn.b_k = uniform_matrix(rng, 1, d, b_d);
    L.attn.w_v = uniform_matrix(rng, d, d, b_d);
    L.attn.b_v = uniform_matrix(rng, 1, d, b_d);
    L.attn.w_o = uniform_matrix(rng, d, d, b_d);
    L.attn.b_o = uniform_matrix(rng, 1, d, b_d);
    L.ln2_gamma = Matrix::Ones(1, d);
    L.ln2_beta = Matrix::Zero(1, d);
    L.w_fc1 = uniform_matrix(rng, d, hid, b_d);
    L.b_fc1 = uniform_matrix(rng, 1, hid, b_d);
    L.w_fc2 = uniform_matrix(rng, hid, d, b_h);
    L.b_fc2 = uniform_matrix(rng, 1, d, b_h);
    p.layers.push_back(std::move(L));
  }
  p.norm_gamma = Matrix::Ones(1, d);
  p.norm_beta = Matrix::Zero(1, d);
  p.w_head = uniform_matrix(rng, d, config.n_classes, b_d);
  p.b_head = uniform_matrix(rng, 1, config.n_classes, b_d);
  return p;
}

Matrix AttentionStack::mean_attention(std::size_t l) const {
  const auto& heads = attn.at(l);
  Matrix m = heads.at(0);
  for (std::size_t h = 1; h < heads.size(); ++h) m += heads[h];
  return m / static_cast<double>(heads.size());
}

AttentionResult attention(const Matrix& q, const Matrix& k, const Matrix& v, double d) {
  if (q.cols() != k.cols()) throw DimensionError("attention: Q and K column counts differ");
  if (k.rows() != v.rows()) throw DimensionError("attention: K and V row counts differ");
  if (!(d > 0.0)) throw DimensionError("attention: key dimensionality must be positive");
  AttentionResult r;
  r.weights.resize(q.rows(), k.rows());
  r.weights.noalias() = q * k.transpose();
  r.weights *= 1.0 / std::sqrt(d);
  softmax_rows(r.weights);
  r.output.resize(q.rows(), v.cols());
  r.output.noalias() = r.weights * v;
  return r;
}

Matrix multi_head_attention(const Matrix& tokens, const AttentionWeights& w, int n_heads,
                            std::vector<Matrix>* weights_out) {
  const Eigen::Index d = tokens.cols();
  if (n_heads <= 0 || d % n_heads != 0) {
    throw DimensionError("multi_head_attention: embed_dim " + std::to_string(d) +
                         " not divisible by head count " + std::to_string(n_heads));
  }
  if (w.w_q.rows() != d || w.w_q.cols() != d || w.w_k.cols() != d || w.w_v.cols() != d ||
      w.w_o.rows() != d) {
    throw DimensionError("multi_head_attention: projection weights do not match embed_dim");
  }
  const Eigen::Index dh = d / n_heads;
  const Matrix q = linear(tokens, w.w_q, w.b_q);
  const Matrix k = linear(tokens, w.w_k, w.b_k);
  const Matrix v = linear(tokens, w.w_v, w.b_v);
  Matrix concat(tokens.rows(), d);
  if (weights_out) weights_out->clear();
  for (int h = 0; h < n_heads; ++h) {
    auto head = attention(q.middleCols(h * dh, dh), k.middleCols(h * dh, dh),
                          v.middleCols(h * dh, dh), static_cast<double>(dh));
    concat.middleCols(h * dh, dh) = head.output;
    if (weights_out) weights_out->push_back(std::move(head.weights));
  }
  return linear(concat, w.w_o, w.b_o);
}

Matrix extract_patches(const ModelConfig& config, const Image& image) {
  check_image(config, image);
  const int ps = config.patch_size;
  const int g = config.grid();
  Matrix out(config.patches(), config.patch_dim());
  for (int gr = 0; gr < g; ++gr)
    for (int gc = 0; gc < g; ++gc) {
      const int row = gr * g + gc;
      int col = 0;
      for (int c = 0; c < config.channels; ++c)
        for (int py = 0; py < ps; ++py)
          for (int px = 0; px < ps; ++px) out(row, col++) = image.at(c, gr * ps + py, gc * ps + px);
    }
  return out;
}

AttentionStack ForwardCache::stack(const ModelConfig& config, int sample) const {
  AttentionStack s;
  s.attn.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l)
    for (int h = 0; h < config.n_heads; ++h)
      s.attn[l].push_back(layers[l].attn[sample * config.n_heads + h]);
  s.logits = logits.row(sample).transpose();
  s.features = features.row(sample).transpose();
  return s;
}

ForwardCache forward_batch(const Model& model, std::span<const Image* const> images,
                           std::span<const AttentionOffset> offsets) {
  const ModelConfig& cfg = model.config;
  const Params& P = model.params;
  cfg.validate();
  if (static_cast<int>(P.layers.size()) != cfg.n_layers) {
    throw DimensionError("forward: parameter layer count does not match config");
  }
  const int B = static_cast<int>(images.size());
  if (B == 0) throw InputError("forward: empty batch");
  const int T = cfg.tokens();
  const int n = cfg.patches();
  const int d = cfg.embed_dim;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  ForwardCache c;
  c.batch = B;
  c.perturbed = !offsets.empty();
  c.patches.resize(static_cast<Eigen::Index>(B) * n, cfg.patch_dim());
  for (int b = 0; b < B; ++b) c.patches.middleRows(b * n, n) = extract_patches(cfg, *images[b]);

  const Matrix emb = linear(c.patches, P.w_patch, P.b_patch);
  Matrix x(static_cast<Eigen::Index>(B) * T, d);
  for (int b = 0; b < B; ++b) {
    x.row(b * T) = P.cls_token.row(0) + P.pos_embed.row(0);
    x.middleRows(b * T + 1, n) = emb.middleRows(b * n, n) + P.pos_embed.bottomRows(n);
  }

  c.layers.resize(cfg.n_layers);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const EncoderLayer& L = P.layers[l];
    LayerCache& lc = c.layers[l];
    lc.h1 = layer_norm(x, L.ln1_gamma, L.ln1_beta, lc.ln1);
    lc.q = linear(lc.h1, L.attn.w_q, L.attn.b_q);
    lc.k = linear(lc.h1, L.attn.w_k, L.attn.b_k);
    lc.v = linear(lc.h1, L.attn.w_v, L.attn.b_v);
    lc.ctx.resize(x.rows(), d);
    lc.attn.resize(static_cast<std::size_t>(B) * H);
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        Matrix& a = lc.attn[b * H + h];
        a.resize(T, T);
        a.noalias() = lc.q.block(b * T, h * dh, T, dh) * lc.k.block(b * T, h * dh, T, dh).transpose();
        a *= scale;
        softmax_rows(a);
        for (const auto& off : offsets)
          if (off.layer == l && off.sample == b && off.head == h) a(off.row, off.col) += off.delta;
        lc.ctx.block(b * T, h * dh, T, dh).noalias() = a * lc.v.block(b * T, h * dh, T, dh);
      }
    x += linear(lc.ctx, L.attn.w_o, L.attn.b_o);
    lc.h2 = layer_norm(x, L.ln2_gamma, L.ln2_beta, lc.ln2);
    lc.z1 = linear(lc.h2, L.w_fc1, L.b_fc1);
    lc.g = lc.z1.unaryExpr([](double v) { return gelu(v); });
    x += linear(lc.g, L.w_fc2, L.b_fc2);
  }

  if (cfg.final_norm) {
    c.normed = layer_norm(x, P.norm_gamma, P.norm_beta, c.final_norm);
  } else {
    c.normed = std::move(x);
  }
  c.features.resize(B, d);
  for (int b = 0; b < B; ++b) {
    if (cfg.pooling == Pooling::ClassToken) {
      c.features.row(b) = c.normed.row(b * T);
    } else {
      c.features.row(b) = c.normed.middleRows(b * T, T).colwise().mean();
    }
  }
  c.logits = linear(c.features, P.w_head, P.b_head);
  return c;
}

ForwardCache forward_one(const Model& model, const Image& image,
                         std::span<const AttentionOffset> offsets) {
  const Image* ptr = &image;
  return forward_batch(model, std::span<const Image* const>(&ptr, 1), offsets);
}

Gradients backward(const Model& model, const ForwardCache& c, const Upstream& up,
                   BackwardRequest request) {
  const ModelConfig& cfg = model.config;
  const Params& P = model.params;
  if (c.perturbed) throw ContractError("backward: cache was built with attention offsets");
  const int B = c.batch;
  const int T = cfg.tokens();
  const int n = cfg.patches();
  const int d = cfg.embed_dim;
  const int H = cfg.n_heads;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const bool has_logits = up.d_logits.size() > 0;
  const bool has_features = up.d_features.size() > 0;
  if (has_logits && (up.d_logits.rows() != B || up.d_logits.cols() != cfg.n_classes)) {
    throw ContractError("backward: d_logits must be batch x n_classes");
  }
  if (has_features && (up.d_features.rows() != B || up.d_features.cols() != d)) {
    throw ContractError("backward: d_features must be batch x embed_dim");
  }
  if (!up.d_attn.empty()) {
    if (up.d_attn.size() != c.layers.size()) {
      throw ContractError("backward: d_attn must have one entry per layer");
    }
    for (const auto& layer : up.d_attn) {
      if (!layer.empty() && layer.size() != static_cast<std::size_t>(B) * H) {
        throw ContractError("backward: d_attn layer must hold batch*heads matrices");
      }
      for (const auto& m : layer)
        if (m.size() != 0 && (m.rows() != T || m.cols() != T)) {
          throw ContractError("backward: d_attn matrix must be tokens x tokens");
        }
    }
  }

  Gradients out;
  Params* G = nullptr;
  if (request.params) {
    out.params = zeros_like(P);
    G = &*out.params;
  }

  Matrix d_feat = Matrix::Zero(B, d);
  if (has_logits) {
    if (G) {
      G->w_head.noalias() += c.features.transpose() * up.d_logits;
      G->b_head.row(0) += up.d_logits.colwise().sum();
    }
    d_feat.noalias() += up.d_logits * P.w_head.transpose();
  }
  if (has_features) d_feat += up.d_features;

  Matrix dx = Matrix::Zero(static_cast<Eigen::Index>(B) * T, d);
  for (int b = 0; b < B; ++b) {
    if (cfg.pooling == Pooling::ClassToken) {
      dx.row(b * T) = d_feat.row(b);
    } else {
      dx.middleRows(b * T, T).rowwise() = d_feat.row(b) / static_cast<double>(T);
    }
  }
  if (cfg.final_norm) {
    dx = layer_norm_backward(dx, c.final_norm, P.norm_gamma, G ? &G->norm_gamma : nullptr,
                             G ? &G->norm_beta : nullptr);
  }

  if (request.attention) out.attention.resize(c.layers.size());

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const EncoderLayer& L = P.layers[l];
    const LayerCache& lc = c.layers[l];
    EncoderLayer* GL = G ? &G->layers[l] : nullptr;

    // MLP branch: x_out = x_mid + fc2(gelu(fc1(LN2(x_mid))))
    Matrix d_g(dx.rows(), L.w_fc2.rows());
    d_g.noalias() = dx * L.w_fc2.transpose();
    if (GL) {
      GL->w_fc2.noalias() += lc.g.transpose() * dx;
      GL->b_fc2.row(0) += dx.colwise().sum();
    }
    Matrix d_z1 = d_g.array() * lc.z1.unaryExpr([](double v) { return gelu_grad(v); }).array();
    Matrix d_h2(dx.rows(), d);
    d_h2.noalias() = d_z1 * L.w_fc1.transpose();
    if (GL) {
      GL->w_fc1.noalias() += lc.h2.transpose() * d_z1;
      GL->b_fc1.row(0) += d_z1.colwise().sum();
    }
    dx += layer_norm_backward(d_h2, lc.ln2, L.ln2_gamma, GL ? &GL->ln2_gamma : nullptr,
                              GL ? &GL->ln2_beta : nullptr);

    // Attention branch: x_mid = x_in + W_o(ctx)
    Matrix d_ctx(dx.rows(), d);
    d_ctx.noalias() = dx * L.attn.w_o.transpose();
    if (GL) {
      GL->attn.w_o.noalias() += lc.ctx.transpose() * dx;
      GL->attn.b_o.row(0) += dx.colwise().sum();
    }
    Matrix d_q(dx.rows(), d), d_k(dx.rows(), d), d_v(dx.rows(), d);
    if (request.attention) out.attention[l].resize(static_cast<std::size_t>(B) * H);
    const bool has_up_attn = !up.d_attn.empty() && !up.d_attn[l].empty();
    for (int b = 0; b < B; ++b)
      for (int h = 0; h < H; ++h) {
        const std::size_t idx = static_cast<std::size_t>(b) * H + h;
        const Matrix& a = lc.attn[idx];
        const auto ctx_g = d_ctx.block(b * T, h * dh, T, dh);
        const auto vb = lc.v.block(b * T, h * dh, T, dh);
        Matrix d_a(T, T);
        d_a.noalias() = ctx_g * vb.transpose();
        if (has_up_attn && up.d_attn[l][idx].size() != 0) d_a += up.d_attn[l][idx];
        d_v.block(b * T, h * dh, T, dh).noalias() = a.transpose() * ctx_g;
        const Eigen::VectorXd row_dot = (d_a.array() * a.array()).rowwise().sum();
        Matrix d_s = a.array() * (d_a.array().colwise() - row_dot.array());
        d_s *= scale;
        d_q.block(b * T, h * dh, T, dh).noalias() = d_s * lc.k.block(b * T, h * dh, T, dh);
        d_k.block(b * T, h * dh, T, dh).noalias() =
            d_s.transpose() * lc.q.block(b * T, h * dh, T, dh);
        if (request.attention) out.attention[l][idx] = std::move(d_a);
      }
    Matrix d_h1(dx.rows(), d);
    d_h1.noalias() = d_q * L.attn.w_q.transpose();
    d_h1.noalias() += d_k * L.attn.w_k.transpose();
    d_h1.noalias() += d_v * L.attn.w_v.transpose();
    if (GL) {
      GL->attn.w_q.noalias() += lc.h1.transpose() * d_q;
      GL->attn.b_q.row(0) += d_q.colwise().sum();
      GL->attn.w_k.noalias() += lc.h1.transpose() * d_k;
      GL->attn.b_k.row(0) += d_k.colwise().sum();
      GL->attn.w_v.noalias() += lc.h1.transpose() * d_v;
      GL->attn.b_v.row(0) += d_v.colwise().sum();
    }
    dx += layer_norm_backward(d_h1, lc.ln1, L.ln1_gamma, GL ? &GL->ln1_gamma : nullptr,
                              GL ? &GL->ln1_beta : nullptr);
  }

  Matrix d_emb(static_cast<Eigen::Index>(B) * n, d);
  for (int b = 0; b < B; ++b) {
    d_emb.middleRows(b * n, n) = dx.middleRows(b * T + 1, n);
    if (G) {
      G->cls_token.row(0) += dx.row(b * T);
      G->pos_embed += dx.middleRows(b * T, T);
    }
  }
  if (G) {
    G->w_patch.noalias() += c.patches.transpose() * d_emb;
    G->b_patch.row(0) += d_emb.colwise().sum();
  }
  if (request.inputs) {
    Matrix d_patches(d_emb.rows(), cfg.patch_dim());
    d_patches.noalias() = d_emb * P.w_patch.transpose();
    const int ps = cfg.patch_size;
    const int g = cfg.grid();
    out.inputs.reserve(B);
    for (int b = 0; b < B; ++b) {
      Image img(cfg.channels, cfg.image_size, cfg.image_size);
      for (int gr = 0; gr < g; ++gr)
        for (int gc = 0; gc < g; ++gc) {
          const Eigen::Index row = static_cast<Eigen::Index>(b) * n + gr * g + gc;
          int col = 0;
          for (int ch = 0; ch < cfg.channels; ++ch)
            for (int py = 0; py < ps; ++py)
              for (int px = 0; px < ps; ++px)
                img.at(ch, gr * ps + py, gc * ps + px) = d_patches(row, col++);
        }
      out.inputs.push_back(std::move(img));
    }
  }
  return out;
}

AttentionStack forward(const ModelConfig& config, const Params& params, const Image& image) {
  const Model model{config, params};
  check_image(config, image);
  return forward_one(model, image).stack(config, 0);
}

AttentionStack grad_wrt_attention(const ModelConfig& config, const Params& params,
                                  const Image& image, int target_label) {
  if (target_label < 0 || target_label >= config.n_classes) {
    throw InputError("grad_wrt_attention: target label " + std::to_string(target_label) +
                     " out of range");
  }
  if (config.n_layers == 0) {
    throw UnsupportedError("grad_wrt_attention: model has no attention layers");
  }
  const Model model{config, params};
  check_image(config, image);
  const ForwardCache cache = forward_one(model, image);
  Upstream up;
  up.d_logits = Matrix::Zero(1, config.n_classes);
  up.d_logits(0, target_label) = 1.0;
  Gradients g = backward(model, cache, up, {.attention = true});
  AttentionStack s = cache.stack(config, 0);
  s.attn_grad = std::move(g.attention);
  return s;
}

InputGradient grad_wrt_input(const ModelConfig& config, const Params& params, const Image& image,
                             const LossSelector& selector) {
  if (!selector) throw ContractError("grad_wrt_input: empty selector");
  const Model model{config, params};
  check_image(config, image);
  const ForwardCache cache = forward_one(model, image);
  const AttentionStack stack = cache.stack(config, 0);
  ScalarObjective obj = selector(stack);
  if (!std::isfinite(obj.value)) throw ContractError("grad_wrt_input: selector value not finite");
  Upstream up;
  if (obj.d_logits.size() != 0) {
    if (obj.d_logits.size() != config.n_classes) {
      throw ContractError("grad_wrt_input: selector d_logits is not a per-class gradient");
    }
    up.d_logits = obj.d_logits.transpose();
  }
  if (obj.d_features.size() != 0) {
    if (obj.d_features.size() != config.embed_dim) {
      throw ContractError("grad_wrt_input: selector d_features is not a feature gradient");
    }
    up.d_features = obj.d_features.transpose();
  }
  if (!obj.d_attn.empty()) {
    if (obj.d_attn.size() != stack.attn.size()) {
      throw ContractError("grad_wrt_input: selector d_attn must cover every layer");
    }
    up.d_attn = std::move(obj.d_attn);
  }
  InputGradient r;
  r.value = obj.value;
  if (up.d_logits.size() == 0 && up.d_features.size() == 0 && up.d_attn.empty()) {
    r.gradient = Image(config.channels, config.image_size, config.image_size);
    return r;
  }
  Gradients g = backward(model, cache, up, {.inputs = true});
  r.gradient = std::move(g.inputs.front());
  return r;
}

int predict(const Model& model, const Image& image) {
  const ForwardCache c = forward_one(model, image);
  Eigen::Index arg = 0;
  c.logits.row(0).maxCoeff(&arg);
  return static_cast<int>(arg);
}

std::vector<int> predict_all(const Model& model, std::span<const Image* const> images,
                             int batch_size) {
  std::vector<int> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const std::size_t len = std::min<std::size_t>(batch_size, images.size() - start);
    const ForwardCache c = forward_batch(model, images.subspan(start, len));
    for (int b = 0; b < c.batch; ++b) {
      Eigen::Index arg = 0;
      c.logits.row(b).maxCoeff(&arg);
      out.push_back(static_cast<int>(arg));
    }
  }
  return out;
}

}  // namespace megatron::vit
