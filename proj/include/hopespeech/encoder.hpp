#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hopespeech/rng.hpp"
#include "hopespeech/tensor.hpp"

namespace hopespeech {

struct EncoderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  int vocab_size = 4096;
  int d_model = 128;
  int n_layers = 4;
  int n_heads = 4;
  int d_ff = 512;
  int max_positions = 128;
  double dropout_rate = 0.1;
  double layer_norm_epsilon = 1e-5;

  void validate() const {
    if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 ||
        d_ff <= 0 || max_positions <= 0) {
      throw EncoderError("model config dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
      throw EncoderError("d_model (" + std::to_string(d_model) +
                         ") must be divisible by n_heads (" +
                         std::to_string(n_heads) + ")");
    }
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      throw EncoderError("dropout_rate must be in [0, 1)");
    }
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},
          {"max_positions", c.max_positions},
          {"dropout_rate", c.dropout_rate},
          {"layer_norm_epsilon", c.layer_norm_epsilon}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_positions = j.at("max_positions").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.layer_norm_epsilon = j.at("layer_norm_epsilon").get<double>();
  c.validate();
  return c;
}

enum class ParamKind { Matrix, Bias, LayerNormGain, LayerNormBias };

template <typename T>
struct LayerWeights {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln1_g, ln1_b;
  Tensor<T> w1, b1, w2, b2;
  Tensor<T> ln2_g, ln2_b;
};

/// Post-norm transformer encoder parameters. The MLM output projection is
/// tied to tok_emb (one storage location); only its bias is separate.
template <typename T>
struct EncoderWeights {
  Tensor<T> tok_emb;  // [vocab_size, d_model]
  Tensor<T> pos_emb;  // [max_positions, d_model]
  std::vector<LayerWeights<T>> layers;
  Tensor<T> final_ln_g, final_ln_b;
  Tensor<T> mlm_bias;  // [vocab_size]

  static EncoderWeights shaped(const ModelConfig& c) {
    c.validate();
    EncoderWeights w;
    const auto d = static_cast<std::size_t>(c.d_model);
    const auto f = static_cast<std::size_t>(c.d_ff);
    w.tok_emb = Tensor<T>({static_cast<std::size_t>(c.vocab_size), d});
    w.pos_emb = Tensor<T>({static_cast<std::size_t>(c.max_positions), d});
    w.layers.resize(c.n_layers);
    for (auto& l : w.layers) {
      l.wq = Tensor<T>({d, d});
      l.bq = Tensor<T>({d});
      l.wk = Tensor<T>({d, d});
      l.bk = Tensor<T>({d});
      l.wv = Tensor<T>({d, d});
      l.bv = Tensor<T>({d});
      l.wo = Tensor<T>({d, d});
      l.bo = Tensor<T>({d});
      l.ln1_g = Tensor<T>({d});
      l.ln1_b = Tensor<T>({d});
      l.w1 = Tensor<T>({d, f});
      l.b1 = Tensor<T>({f});
      l.w2 = Tensor<T>({f, d});
      l.b2 = Tensor<T>({d});
      l.ln2_g = Tensor<T>({d});
      l.ln2_b = Tensor<T>({d});
    }
    w.final_ln_g = Tensor<T>({d});
    w.final_ln_b = Tensor<T>({d});
    w.mlm_bias = Tensor<T>({static_cast<std::size_t>(c.vocab_size)});
    return w;
  }
};

template <typename T>
struct ClassifierHead {
  Tensor<T> w;  // [d_model, n_labels]
  Tensor<T> b;  // [n_labels]

  int n_labels() const { return static_cast<int>(b.numel()); }

  static ClassifierHead shaped(const ModelConfig& c, int n_labels) {
    ClassifierHead h;
    h.w = Tensor<T>({static_cast<std::size_t>(c.d_model),
                     static_cast<std::size_t>(n_labels)});
    h.b = Tensor<T>({static_cast<std::size_t>(n_labels)});
    return h;
  }
};

template <typename T>
struct TensorRef {
  std::string name;
  Tensor<T>* tensor;
  ParamKind kind;
};

/// Flat parameter list in a fixed order; the one traversal used by the
/// optimizer, serialization, and gradient checks.
template <typename T>
std::vector<TensorRef<T>> tensor_refs(EncoderWeights<T>& w) {
  std::vector<TensorRef<T>> refs;
  refs.push_back({"tok_emb", &w.tok_emb, ParamKind::Matrix});
  refs.push_back({"pos_emb", &w.pos_emb, ParamKind::Matrix});
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& l = w.layers[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    refs.push_back({p + "wq", &l.wq, ParamKind::Matrix});
    refs.push_back({p + "bq", &l.bq, ParamKind::Bias});
    refs.push_back({p + "wk", &l.wk, ParamKind::Matrix});
    refs.push_back({p + "bk", &l.bk, ParamKind::Bias});
    refs.push_back({p + "wv", &l.wv, ParamKind::Matrix});
    refs.push_back({p + "bv", &l.bv, ParamKind::Bias});
    refs.push_back({p + "wo", &l.wo, ParamKind::Matrix});
    refs.push_back({p + "bo", &l.bo, ParamKind::Bias});
    refs.push_back({p + "ln1_g", &l.ln1_g, ParamKind::LayerNormGain});
    refs.push_back({p + "ln1_b", &l.ln1_b, ParamKind::LayerNormBias});
    refs.push_back({p + "w1", &l.w1, ParamKind::Matrix});
    refs.push_back({p + "b1", &l.b1, ParamKind::Bias});
    refs.push_back({p + "w2", &l.w2, ParamKind::Matrix});
    refs.push_back({p + "b2", &l.b2, ParamKind::Bias});
    refs.push_back({p + "ln2_g", &l.ln2_g, ParamKind::LayerNormGain});
    refs.push_back({p + "ln2_b", &l.ln2_b, ParamKind::LayerNormBias});
  }
  refs.push_back({"final_ln_g", &w.final_ln_g, ParamKind::LayerNormGain});
  refs.push_back({"final_ln_b", &w.final_ln_b, ParamKind::LayerNormBias});
  refs.push_back({"mlm_bias", &w.mlm_bias, ParamKind::Bias});
  return refs;
}

template <typename T>
std::vector<TensorRef<T>> tensor_refs(ClassifierHead<T>& h) {
  return {{"head.w", &h.w, ParamKind::Matrix},
          {"head.b", &h.b, ParamKind::Bias}};
}

// Read-only traversal in the same fixed order.
template <typename W>
auto read_tensor_refs(const W& w) {
  return tensor_refs(const_cast<W&>(w));
}

template <typename T>
EncoderWeights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  auto w = EncoderWeights<T>::shaped(cfg);
  Rng rng = stream_rng(seed, "init");
  for (auto& ref : tensor_refs(w)) {
    switch (ref.kind) {
      case ParamKind::Matrix:
        for (auto& v : ref.tensor->data) {
          v = static_cast<T>(rng.normal(0.0, 0.02));
        }
        break;
      case ParamKind::LayerNormGain:
        ref.tensor->fill(T(1));
        break;
      case ParamKind::Bias:
      case ParamKind::LayerNormBias:
        ref.tensor->fill(T(0));
        break;
    }
  }
  return w;
}

template <typename T>
ClassifierHead<T> init_head(const ModelConfig& cfg, int n_labels,
                            std::uint64_t seed) {
  auto h = ClassifierHead<T>::shaped(cfg, n_labels);
  Rng rng = stream_rng(seed, "head");
  for (auto& v : h.w.data) v = static_cast<T>(rng.normal(0.0, 0.02));
  h.b.fill(T(0));
  return h;
}

/// One training batch: row-major [batch, seq_len] token ids and attention
/// masks, plus labels for whichever head is in use.
struct Batch {
  int batch = 0;
  int seq_len = 0;
  std::vector<int> ids;          // [batch * seq_len]
  std::vector<int> attn;         // [batch * seq_len], 0/1
  std::vector<int> mlm_labels;   // [batch * seq_len], -1 = ignore
  std::vector<int> class_labels; // [batch]
};

inline constexpr int kIgnoreLabel = -1;

namespace nn {

// C[m,n] += A[m,k] @ B[k,n]
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, int m, int k, int n) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) if (m * n > 4096)
#endif
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,n] += A[m,k] @ B^T where B is [n,k]
template <typename T>
void matmul_bt_acc(const T* a, const T* b, T* c, int m, int k, int n) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) if (m * n > 4096)
#endif
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * n;
    const T* arow = a + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// C[k,n] += A^T @ B where A is [m,k], B is [m,n]
template <typename T>
void matmul_at_acc(const T* a, const T* b, T* c, int m, int k, int n) {
#if defined(_OPENMP)
#pragma omp parallel for schedule(static) if (k * n > 4096)
#endif
  for (int p = 0; p < k; ++p) {
    T* crow = c + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = a[static_cast<std::size_t>(i) * k + p];
      const T* brow = b + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void add_bias_rows(T* x, const T* bias, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    T* row = x + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) row[j] += bias[j];
  }
}

template <typename T>
T gelu(T u) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T a = T(0.044715);
  return T(0.5) * u * (T(1) + std::tanh(c * (u + a * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  const T c = T(0.7978845608028654);
  const T a = T(0.044715);
  const T t = std::tanh(c * (u + a * u * u * u));
  return T(0.5) * (T(1) + t) +
         T(0.5) * u * (T(1) - t * t) * c * (T(1) + T(3) * a * u * u);
}

template <typename T>
struct LayerNormCache {
  std::vector<T> rstd;  // per row
  std::vector<T> xhat;  // normalized input
};

// y = g * (x - mean) * rstd + b, per row of length `cols`.
template <typename T>
void layer_norm_forward(const T* x, const T* gain, const T* bias, T* y,
                        int rows, int cols, T eps, LayerNormCache<T>& cache) {
  cache.rstd.resize(rows);
  cache.xhat.resize(static_cast<std::size_t>(rows) * cols);
  for (int i = 0; i < rows; ++i) {
    const T* xr = x + static_cast<std::size_t>(i) * cols;
    T* yr = y + static_cast<std::size_t>(i) * cols;
    T* xh = cache.xhat.data() + static_cast<std::size_t>(i) * cols;
    T mean = 0;
    for (int j = 0; j < cols; ++j) mean += xr[j];
    mean /= T(cols);
    T var = 0;
    for (int j = 0; j < cols; ++j) {
      const T d = xr[j] - mean;
      var += d * d;
    }
    var /= T(cols);
    const T rstd = T(1) / std::sqrt(var + eps);
    cache.rstd[i] = rstd;
    for (int j = 0; j < cols; ++j) {
      xh[j] = (xr[j] - mean) * rstd;
      yr[j] = gain[j] * xh[j] + bias[j];
    }
  }
}

template <typename T>
void layer_norm_backward(const T* dy, const T* gain,
                         const LayerNormCache<T>& cache, T* dx, T* dgain,
                         T* dbias, int rows, int cols) {
  for (int i = 0; i < rows; ++i) {
    const T* dyr = dy + static_cast<std::size_t>(i) * cols;
    const T* xh = cache.xhat.data() + static_cast<std::size_t>(i) * cols;
    T* dxr = dx + static_cast<std::size_t>(i) * cols;
    const T rstd = cache.rstd[i];
    T sum_dxhat = 0, sum_dxhat_xhat = 0;
    for (int j = 0; j < cols; ++j) {
      const T dxhat = dyr[j] * gain[j];
      sum_dxhat += dxhat;
      sum_dxhat_xhat += dxhat * xh[j];
      dgain[j] += dyr[j] * xh[j];
      dbias[j] += dyr[j];
    }
    const T inv_cols = T(1) / T(cols);
    for (int j = 0; j < cols; ++j) {
      const T dxhat = dyr[j] * gain[j];
      dxr[j] += rstd * (dxhat - inv_cols * sum_dxhat -
                        xh[j] * inv_cols * sum_dxhat_xhat);
    }
  }
}

// Inverted dropout mask: entries are 0 or 1/(1-rate).
template <typename T>
std::vector<T> dropout_mask(std::size_t n, T rate, Rng& rng) {
  std::vector<T> mask(n);
  const T scale = T(1) / (T(1) - rate);
  for (auto& m : mask) m = rng.uniform() < static_cast<double>(rate) ? T(0) : scale;
  return mask;
}

}  // namespace nn

template <typename T>
struct LayerCache {
  Tensor<T> x_in;                       // [B*L, D]
  Tensor<T> q, k, v;                    // [B*L, D]
  Tensor<T> att_probs;                  // [B, H, L, L]
  Tensor<T> att_ctx;                    // [B*L, D] heads concatenated
  std::vector<T> att_drop, ffn_drop;    // masks, empty when not training
  Tensor<T> res1;                       // x_in + attention output
  nn::LayerNormCache<T> ln1;
  Tensor<T> y;                          // ln1 output
  Tensor<T> ffn_pre;                    // [B*L, F] pre-activation
  Tensor<T> ffn_act;                    // gelu(ffn_pre)
  Tensor<T> res2;                       // y + ffn output
  nn::LayerNormCache<T> ln2;
};

template <typename T>
struct EncoderCache {
  Tensor<T> x0;              // embedding sum after dropout, [B*L, D]
  std::vector<T> emb_drop;
  std::vector<LayerCache<T>> layers;
  nn::LayerNormCache<T> final_ln;
  Tensor<T> hidden;          // final hidden states, [B*L, D]
};

/// Full encoder stack forward pass. Padding keys receive a -inf attention
/// bias, so padded positions contribute exactly zero to unpadded outputs.
template <typename T>
EncoderCache<T> encoder_forward(const ModelConfig& cfg,
                                const EncoderWeights<T>& w, const Batch& batch,
                                bool training = false, Rng* dropout_rng = nullptr) {
  cfg.validate();
  const int B = batch.batch, L = batch.seq_len, D = cfg.d_model;
  const int H = cfg.n_heads, dh = D / H, F = cfg.d_ff;
  if (L > cfg.max_positions) {
    throw EncoderError("sequence length " + std::to_string(L) +
                       " exceeds max_positions " +
                       std::to_string(cfg.max_positions));
  }
  const int rows = B * L;
  const bool use_dropout = training && cfg.dropout_rate > 0.0;
  if (use_dropout && dropout_rng == nullptr) {
    throw EncoderError("training-mode forward requires a dropout rng");
  }
  const T drop_rate = static_cast<T>(cfg.dropout_rate);
  const T neg_inf = -std::numeric_limits<T>::infinity();
  const T att_scale = T(1) / std::sqrt(T(dh));

  EncoderCache<T> cache;
  cache.layers.resize(cfg.n_layers);

  // Token + position embeddings.
  cache.x0 = Tensor<T>({static_cast<std::size_t>(rows),
                        static_cast<std::size_t>(D)});
  for (int b = 0; b < B; ++b) {
    for (int l = 0; l < L; ++l) {
      const int id = batch.ids[static_cast<std::size_t>(b) * L + l];
      if (id < 0 || id >= cfg.vocab_size) {
        throw EncoderError("token id " + std::to_string(id) +
                           " out of range for vocab_size " +
                           std::to_string(cfg.vocab_size));
      }
      T* row = &cache.x0.data[(static_cast<std::size_t>(b) * L + l) * D];
      const T* te = &w.tok_emb.data[static_cast<std::size_t>(id) * D];
      const T* pe = &w.pos_emb.data[static_cast<std::size_t>(l) * D];
      for (int j = 0; j < D; ++j) row[j] = te[j] + pe[j];
    }
  }
  if (use_dropout) {
    cache.emb_drop = nn::dropout_mask<T>(cache.x0.data.size(), drop_rate,
                                         *dropout_rng);
    for (std::size_t i = 0; i < cache.x0.data.size(); ++i) {
      cache.x0.data[i] *= cache.emb_drop[i];
    }
  }

  Tensor<T> x = cache.x0;
  for (int li = 0; li < cfg.n_layers; ++li) {
    auto& lw = w.layers[li];
    auto& lc = cache.layers[li];
    lc.x_in = x;

    // Q, K, V, projections.
    lc.q = Tensor<T>({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    lc.k = Tensor<T>({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    lc.v = Tensor<T>({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    nn::matmul_acc(x.data.data(), lw.wq.data.data(), lc.q.data.data(), rows, D, D);
    nn::matmul_acc(x.data.data(), lw.wk.data.data(), lc.k.data.data(), rows, D, D);
    nn::matmul_acc(x.data.data(), lw.wv.data.data(), lc.v.data.data(), rows, D, D);
    nn::add_bias_rows(lc.q.data.data(), lw.bq.data.data(), rows, D);
    nn::add_bias_rows(lc.k.data.data(), lw.bk.data.data(), rows, D);
    nn::add_bias_rows(lc.v.data.data(), lw.bv.data.data(), rows, D);

    // Scaled dot-product attention per batch row and head.
    lc.att_probs = Tensor<T>({static_cast<std::size_t>(B),
                              static_cast<std::size_t>(H),
                              static_cast<std::size_t>(L),
                              static_cast<std::size_t>(L)});
    lc.att_ctx = Tensor<T>({static_cast<std::size_t>(rows),
                            static_cast<std::size_t>(D)});
#if defined(_OPENMP)
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const std::size_t base_bl = static_cast<std::size_t>(b) * L;
        T* probs = &lc.att_probs.data[((static_cast<std::size_t>(b) * H + h) * L) * L];
        std::vector<T> scores(L);
        for (int l1 = 0; l1 < L; ++l1) {
          const T* qrow = &lc.q.data[(base_bl + l1) * D + h * dh];
          T row_max = neg_inf;
          for (int l2 = 0; l2 < L; ++l2) {
            if (batch.attn[base_bl + l2] == 0) {
              scores[l2] = neg_inf;
              continue;
            }
            const T* krow = &lc.k.data[(base_bl + l2) * D + h * dh];
            T s = 0;
            for (int j = 0; j < dh; ++j) s += qrow[j] * krow[j];
            s *= att_scale;
            scores[l2] = s;
            if (s > row_max) row_max = s;
          }
          T z = 0;
          T* prow = probs + static_cast<std::size_t>(l1) * L;
          for (int l2 = 0; l2 < L; ++l2) {
            const T e = scores[l2] == neg_inf ? T(0) : std::exp(scores[l2] - row_max);
            prow[l2] = e;
            z += e;
          }
          const T inv_z = T(1) / z;
          T* ctx = &lc.att_ctx.data[(base_bl + l1) * D + h * dh];
          for (int l2 = 0; l2 < L; ++l2) {
            prow[l2] *= inv_z;
            if (prow[l2] != T(0)) {
              const T* vrow = &lc.v.data[(base_bl + l2) * D + h * dh];
              for (int j = 0; j < dh; ++j) ctx[j] += prow[l2] * vrow[j];
            }
          }
        }
      }
    }

    // Output projection, dropout, residual, first layer norm.
    Tensor<T> att_out({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    nn::matmul_acc(lc.att_ctx.data.data(), lw.wo.data.data(),
                   att_out.data.data(), rows, D, D);
    nn::add_bias_rows(att_out.data.data(), lw.bo.data.data(), rows, D);
    if (use_dropout) {
      lc.att_drop = nn::dropout_mask<T>(att_out.data.size(), drop_rate,
                                        *dropout_rng);
      for (std::size_t i = 0; i < att_out.data.size(); ++i) {
        att_out.data[i] *= lc.att_drop[i];
      }
    }
    lc.res1 = Tensor<T>({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    for (std::size_t i = 0; i < lc.res1.data.size(); ++i) {
      lc.res1.data[i] = x.data[i] + att_out.data[i];
    }
    lc.y = Tensor<T>({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    nn::layer_norm_forward(lc.res1.data.data(), lw.ln1_g.data.data(),
                           lw.ln1_b.data.data(), lc.y.data.data(), rows, D,
                           static_cast<T>(cfg.layer_norm_epsilon), lc.ln1);

    // Feed-forward, dropout, residual, second layer norm.
    lc.ffn_pre = Tensor<T>({static_cast<std::size_t>(rows), static_cast<std::size_t>(F)});
    nn::matmul_acc(lc.y.data.data(), lw.w1.data.data(), lc.ffn_pre.data.data(),
                   rows, D, F);
    nn::add_bias_rows(lc.ffn_pre.data.data(), lw.b1.data.data(), rows, F);
    lc.ffn_act = Tensor<T>({static_cast<std::size_t>(rows), static_cast<std::size_t>(F)});
    for (std::size_t i = 0; i < lc.ffn_act.data.size(); ++i) {
      lc.ffn_act.data[i] = nn::gelu(lc.ffn_pre.data[i]);
    }
    Tensor<T> ffn_out({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    nn::matmul_acc(lc.ffn_act.data.data(), lw.w2.data.data(),
                   ffn_out.data.data(), rows, F, D);
    nn::add_bias_rows(ffn_out.data.data(), lw.b2.data.data(), rows, D);
    if (use_dropout) {
      lc.ffn_drop = nn::dropout_mask<T>(ffn_out.data.size(), drop_rate,
                                        *dropout_rng);
      for (std::size_t i = 0; i < ffn_out.data.size(); ++i) {
        ffn_out.data[i] *= lc.ffn_drop[i];
      }
    }
    lc.res2 = Tensor<T>({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    for (std::size_t i = 0; i < lc.res2.data.size(); ++i) {
      lc.res2.data[i] = lc.y.data[i] + ffn_out.data[i];
    }
    x = Tensor<T>({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    nn::layer_norm_forward(lc.res2.data.data(), lw.ln2_g.data.data(),
                           lw.ln2_b.data.data(), x.data.data(), rows, D,
                           static_cast<T>(cfg.layer_norm_epsilon), lc.ln2);
  }

  cache.hidden = Tensor<T>({static_cast<std::size_t>(rows),
                            static_cast<std::size_t>(D)});
  nn::layer_norm_forward(x.data.data(), w.final_ln_g.data.data(),
                         w.final_ln_b.data.data(), cache.hidden.data.data(),
                         rows, D, static_cast<T>(cfg.layer_norm_epsilon),
                         cache.final_ln);
  return cache;
}

/// Backpropagates d(loss)/d(hidden) through the encoder stack,
/// accumulating into `grads`. `d_hidden` is consumed as scratch.
template <typename T>
void encoder_backward(const ModelConfig& cfg, const EncoderWeights<T>& w,
                      const Batch& batch, const EncoderCache<T>& cache,
                      Tensor<T>& d_hidden, EncoderWeights<T>& grads) {
  const int B = batch.batch, L = batch.seq_len, D = cfg.d_model;
  const int H = cfg.n_heads, dh = D / H, F = cfg.d_ff;
  const int rows = B * L;
  const T att_scale = T(1) / std::sqrt(T(dh));
  const bool used_dropout = !cache.emb_drop.empty();

  // Final layer norm.
  Tensor<T> dx({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
  nn::layer_norm_backward(d_hidden.data.data(), w.final_ln_g.data.data(),
                          cache.final_ln, dx.data.data(),
                          grads.final_ln_g.data.data(),
                          grads.final_ln_b.data.data(), rows, D);

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const auto& lw = w.layers[li];
    const auto& lc = cache.layers[li];
    auto& lg = grads.layers[li];

    // Second layer norm: dx is the gradient w.r.t. this layer's output.
    Tensor<T> d_res2({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    nn::layer_norm_backward(dx.data.data(), lw.ln2_g.data.data(), lc.ln2,
                            d_res2.data.data(), lg.ln2_g.data.data(),
                            lg.ln2_b.data.data(), rows, D);

    // res2 = y + dropout(ffn_out)
    Tensor<T> dy = d_res2;  // gradient into y via the residual path
    Tensor<T> d_ffn_out = d_res2;
    if (used_dropout) {
      for (std::size_t i = 0; i < d_ffn_out.data.size(); ++i) {
        d_ffn_out.data[i] *= lc.ffn_drop[i];
      }
    }
    // ffn_out = gelu(y @ W1 + b1) @ W2 + b2
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < D; ++j) {
        lg.b2.data[j] += d_ffn_out.data[static_cast<std::size_t>(i) * D + j];
      }
    }
    nn::matmul_at_acc(lc.ffn_act.data.data(), d_ffn_out.data.data(),
                      lg.w2.data.data(), rows, F, D);
    Tensor<T> d_act({static_cast<std::size_t>(rows), static_cast<std::size_t>(F)});
    nn::matmul_bt_acc(d_ffn_out.data.data(), lw.w2.data.data(),
                      d_act.data.data(), rows, D, F);
    for (std::size_t i = 0; i < d_act.data.size(); ++i) {
      d_act.data[i] *= nn::gelu_grad(lc.ffn_pre.data[i]);
    }
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < F; ++j) {
        lg.b1.data[j] += d_act.data[static_cast<std::size_t>(i) * F + j];
      }
    }
    nn::matmul_at_acc(lc.y.data.data(), d_act.data.data(), lg.w1.data.data(),
                      rows, D, F);
    nn::matmul_bt_acc(d_act.data.data(), lw.w1.data.data(), dy.data.data(),
                      rows, F, D);

    // First layer norm.
    Tensor<T> d_res1({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    nn::layer_norm_backward(dy.data.data(), lw.ln1_g.data.data(), lc.ln1,
                            d_res1.data.data(), lg.ln1_g.data.data(),
                            lg.ln1_b.data.data(), rows, D);

    // res1 = x_in + dropout(att_out)
    Tensor<T> dx_in = d_res1;
    Tensor<T> d_att_out = d_res1;
    if (used_dropout) {
      for (std::size_t i = 0; i < d_att_out.data.size(); ++i) {
        d_att_out.data[i] *= lc.att_drop[i];
      }
    }
    // att_out = ctx @ Wo + bo
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < D; ++j) {
        lg.bo.data[j] += d_att_out.data[static_cast<std::size_t>(i) * D + j];
      }
    }
    nn::matmul_at_acc(lc.att_ctx.data.data(), d_att_out.data.data(),
                      lg.wo.data.data(), rows, D, D);
    Tensor<T> d_ctx({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    nn::matmul_bt_acc(d_att_out.data.data(), lw.wo.data.data(),
                      d_ctx.data.data(), rows, D, D);

    // Attention core.
    Tensor<T> dq({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    Tensor<T> dk({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
    Tensor<T> dv({static_cast<std::size_t>(rows), static_cast<std::size_t>(D)});
#if defined(_OPENMP)
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const std::size_t base_bl = static_cast<std::size_t>(b) * L;
        const T* probs =
            &lc.att_probs.data[((static_cast<std::size_t>(b) * H + h) * L) * L];
        std::vector<T> dp(L);
        for (int l1 = 0; l1 < L; ++l1) {
          const T* prow = probs + static_cast<std::size_t>(l1) * L;
          const T* dctx = &d_ctx.data[(base_bl + l1) * D + h * dh];
          T dot = 0;
          for (int l2 = 0; l2 < L; ++l2) {
            if (prow[l2] == T(0)) {
              dp[l2] = 0;
              continue;
            }
            const T* vrow = &lc.v.data[(base_bl + l2) * D + h * dh];
            T s = 0;
            for (int j = 0; j < dh; ++j) s += dctx[j] * vrow[j];
            dp[l2] = s;
            dot += prow[l2] * s;
            T* dvrow = &dv.data[(base_bl + l2) * D + h * dh];
            for (int j = 0; j < dh; ++j) dvrow[j] += prow[l2] * dctx[j];
          }
          const T* qrow = &lc.q.data[(base_bl + l1) * D + h * dh];
          T* dqrow = &dq.data[(base_bl + l1) * D + h * dh];
          for (int l2 = 0; l2 < L; ++l2) {
            if (prow[l2] == T(0)) continue;
            const T ds = prow[l2] * (dp[l2] - dot) * att_scale;
            const T* krow = &lc.k.data[(base_bl + l2) * D + h * dh];
            T* dkrow = &dk.data[(base_bl + l2) * D + h * dh];
            for (int j = 0; j < dh; ++j) {
              dqrow[j] += ds * krow[j];
              dkrow[j] += ds * qrow[j];
            }
          }
        }
      }
    }

    // Q/K/V projections back to the layer input.
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < D; ++j) {
        lg.bq.data[j] += dq.data[static_cast<std::size_t>(i) * D + j];
        lg.bk.data[j] += dk.data[static_cast<std::size_t>(i) * D + j];
        lg.bv.data[j] += dv.data[static_cast<std::size_t>(i) * D + j];
      }
    }
    nn::matmul_at_acc(lc.x_in.data.data(), dq.data.data(), lg.wq.data.data(),
                      rows, D, D);
    nn::matmul_at_acc(lc.x_in.data.data(), dk.data.data(), lg.wk.data.data(),
                      rows, D, D);
    nn::matmul_at_acc(lc.x_in.data.data(), dv.data.data(), lg.wv.data.data(),
                      rows, D, D);
    nn::matmul_bt_acc(dq.data.data(), lw.wq.data.data(), dx_in.data.data(),
                      rows, D, D);
    nn::matmul_bt_acc(dk.data.data(), lw.wk.data.data(), dx_in.data.data(),
                      rows, D, D);
    nn::matmul_bt_acc(dv.data.data(), lw.wv.data.data(), dx_in.data.data(),
                      rows, D, D);

    dx = std::move(dx_in);
  }

  // Embeddings.
  if (used_dropout) {
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
      dx.data[i] *= cache.emb_drop[i];
    }
  }
  for (int b = 0; b < B; ++b) {
    for (int l = 0; l < L; ++l) {
      const int id = batch.ids[static_cast<std::size_t>(b) * L + l];
      const T* row = &dx.data[(static_cast<std::size_t>(b) * L + l) * D];
      T* te = &grads.tok_emb.data[static_cast<std::size_t>(id) * D];
      T* pe = &grads.pos_emb.data[static_cast<std::size_t>(l) * D];
      for (int j = 0; j < D; ++j) {
        te[j] += row[j];
        pe[j] += row[j];
      }
    }
  }
}

template <typename T>
struct MlmForward {
  T loss = 0;
  // (batch, position) of each scored masked slot, in scan order.
  std::vector<std::pair<int, int>> positions;
  // Softmax probabilities at each masked slot, [positions.size() x vocab].
  std::vector<std::vector<T>> probs;
};

namespace detail {

template <typename T>
MlmForward<T> mlm_head_forward(const ModelConfig& cfg,
                               const EncoderWeights<T>& w, const Batch& batch,
                               const EncoderCache<T>& cache) {
  const int L = batch.seq_len, D = cfg.d_model, V = cfg.vocab_size;
  MlmForward<T> out;
  for (int b = 0; b < batch.batch; ++b) {
    for (int l = 0; l < L; ++l) {
      const int label = batch.mlm_labels[static_cast<std::size_t>(b) * L + l];
      if (label == kIgnoreLabel) continue;
      if (label < 0 || label >= V) {
        throw EncoderError("mlm label " + std::to_string(label) +
                           " out of range");
      }
      out.positions.emplace_back(b, l);
    }
  }
  if (out.positions.empty()) {
    throw EncoderError("mlm loss undefined: no masked positions in batch");
  }
  out.probs.resize(out.positions.size());
  T loss_sum = 0;
  for (std::size_t p = 0; p < out.positions.size(); ++p) {
    const auto [b, l] = out.positions[p];
    const T* h = &cache.hidden.data[(static_cast<std::size_t>(b) * L + l) * D];
    std::vector<T>& logits = out.probs[p];
    logits.resize(V);
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
    for (int t = 0; t < V; ++t) {
      const T* e = &w.tok_emb.data[static_cast<std::size_t>(t) * D];
      T s = w.mlm_bias.data[t];
      for (int j = 0; j < D; ++j) s += h[j] * e[j];
      logits[t] = s;
    }
    T mx = logits[0];
    for (int t = 1; t < V; ++t) mx = std::max(mx, logits[t]);
    T z = 0;
    for (int t = 0; t < V; ++t) {
      logits[t] = std::exp(logits[t] - mx);
      z += logits[t];
    }
    const T inv_z = T(1) / z;
    for (int t = 0; t < V; ++t) logits[t] *= inv_z;
    const int label = batch.mlm_labels[static_cast<std::size_t>(b) * L + l];
    loss_sum += -std::log(logits[label]);
  }
  out.loss = loss_sum / T(out.positions.size());
  return out;
}

}  // namespace detail

/// Masked-language-model loss: mean cross-entropy over masked positions.
template <typename T>
MlmForward<T> forward_mlm(const ModelConfig& cfg, const EncoderWeights<T>& w,
                          const Batch& batch, bool training = false,
                          Rng* dropout_rng = nullptr) {
  auto cache = encoder_forward(cfg, w, batch, training, dropout_rng);
  return detail::mlm_head_forward(cfg, w, batch, cache);
}

/// Loss plus exact gradients for every encoder parameter. `loss_scale`
/// scales the loss (and therefore every gradient) linearly.
template <typename T>
std::pair<T, EncoderWeights<T>> backward_mlm(const ModelConfig& cfg,
                                             const EncoderWeights<T>& w,
                                             const Batch& batch,
                                             bool training = false,
                                             Rng* dropout_rng = nullptr,
                                             T loss_scale = T(1)) {
  auto cache = encoder_forward(cfg, w, batch, training, dropout_rng);
  auto head = detail::mlm_head_forward(cfg, w, batch, cache);

  const int L = batch.seq_len, D = cfg.d_model, V = cfg.vocab_size;
  const int rows = batch.batch * L;
  auto grads = EncoderWeights<T>::shaped(cfg);
  Tensor<T> d_hidden({static_cast<std::size_t>(rows),
                      static_cast<std::size_t>(D)});
  const T inv_n = loss_scale / T(head.positions.size());
  std::vector<T> dlogits(V);
  for (std::size_t p = 0; p < head.positions.size(); ++p) {
    const auto [b, l] = head.positions[p];
    const int label = batch.mlm_labels[static_cast<std::size_t>(b) * L + l];
    const T* h = &cache.hidden.data[(static_cast<std::size_t>(b) * L + l) * D];
    T* dh = &d_hidden.data[(static_cast<std::size_t>(b) * L + l) * D];
    const std::vector<T>& probs = head.probs[p];
    for (int t = 0; t < V; ++t) {
      dlogits[t] = (probs[t] - (t == label ? T(1) : T(0))) * inv_n;
      grads.mlm_bias.data[t] += dlogits[t];
    }
    // Tied projection: the output-layer gradient lands on tok_emb.
#if defined(_OPENMP)
#pragma omp parallel for schedule(static)
#endif
    for (int t = 0; t < V; ++t) {
      if (dlogits[t] == T(0)) continue;
      T* de = &grads.tok_emb.data[static_cast<std::size_t>(t) * D];
      for (int j = 0; j < D; ++j) de[j] += dlogits[t] * h[j];
    }
    nn::matmul_acc(dlogits.data(), w.tok_emb.data.data(), dh, 1, V, D);
  }
  encoder_backward(cfg, w, batch, cache, d_hidden, grads);
  return {head.loss * loss_scale, std::move(grads)};
}

template <typename T>
struct ClassifyForward {
  T loss = 0;
  Tensor<T> probs;  // [batch, n_labels], softmax rows
};

namespace detail {

template <typename T>
ClassifyForward<T> classify_head_forward(const ModelConfig& cfg,
                                         const ClassifierHead<T>& head,
                                         const Batch& batch,
                                         const EncoderCache<T>& cache,
                                         bool with_loss) {
  const int B = batch.batch, L = batch.seq_len, D = cfg.d_model;
  const int C = head.n_labels();
  ClassifyForward<T> out;
  out.probs = Tensor<T>({static_cast<std::size_t>(B), static_cast<std::size_t>(C)});
  T loss_sum = 0;
  for (int b = 0; b < B; ++b) {
    // First-token pooling.
    const T* h = &cache.hidden.data[static_cast<std::size_t>(b) * L * D];
    T* row = &out.probs.data[static_cast<std::size_t>(b) * C];
    for (int c = 0; c < C; ++c) {
      T s = head.b.data[c];
      for (int j = 0; j < D; ++j) {
        s += h[j] * head.w.data[static_cast<std::size_t>(j) * C + c];
      }
      row[c] = s;
    }
    T mx = row[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    T z = 0;
    for (int c = 0; c < C; ++c) {
      row[c] = std::exp(row[c] - mx);
      z += row[c];
    }
    for (int c = 0; c < C; ++c) row[c] /= z;
    if (with_loss) {
      const int label = batch.class_labels[b];
      if (label < 0 || label >= C) {
        throw EncoderError("class label " + std::to_string(label) +
                           " out of range [0, " + std::to_string(C) + ")");
      }
      loss_sum += -std::log(row[label]);
    }
  }
  out.loss = with_loss ? loss_sum / T(B) : T(0);
  return out;
}

}  // namespace detail

/// Sequence classification loss: first-token pooling, mean cross-entropy.
template <typename T>
ClassifyForward<T> forward_classify(const ModelConfig& cfg,
                                    const EncoderWeights<T>& w,
                                    const ClassifierHead<T>& head,
                                    const Batch& batch, bool training = false,
                                    Rng* dropout_rng = nullptr) {
  auto cache = encoder_forward(cfg, w, batch, training, dropout_rng);
  return detail::classify_head_forward(cfg, head, batch, cache, true);
}

/// Class probabilities only (evaluation mode, no labels required).
template <typename T>
Tensor<T> classify_probs(const ModelConfig& cfg, const EncoderWeights<T>& w,
                         const ClassifierHead<T>& head, const Batch& batch) {
  auto cache = encoder_forward(cfg, w, batch, false, nullptr);
  return detail::classify_head_forward(cfg, head, batch, cache, false).probs;
}

template <typename T>
struct ClassifyGrads {
  T loss = 0;
  EncoderWeights<T> encoder;
  ClassifierHead<T> head;
};

template <typename T>
ClassifyGrads<T> backward_classify(const ModelConfig& cfg,
                                   const EncoderWeights<T>& w,
                                   const ClassifierHead<T>& head,
                                   const Batch& batch, bool training = false,
                                   Rng* dropout_rng = nullptr,
                                   T loss_scale = T(1)) {
  auto cache = encoder_forward(cfg, w, batch, training, dropout_rng);
  auto fwd = detail::classify_head_forward(cfg, head, batch, cache, true);

  const int B = batch.batch, L = batch.seq_len, D = cfg.d_model;
  const int C = head.n_labels();
  ClassifyGrads<T> out;
  out.loss = fwd.loss * loss_scale;
  out.encoder = EncoderWeights<T>::shaped(cfg);
  out.head = ClassifierHead<T>::shaped(cfg, C);
  Tensor<T> d_hidden({static_cast<std::size_t>(B * L),
                      static_cast<std::size_t>(D)});
  const T inv_b = loss_scale / T(B);
  for (int b = 0; b < B; ++b) {
    const int label = batch.class_labels[b];
    const T* h = &cache.hidden.data[static_cast<std::size_t>(b) * L * D];
    T* dh = &d_hidden.data[static_cast<std::size_t>(b) * L * D];
    const T* probs = &fwd.probs.data[static_cast<std::size_t>(b) * C];
    for (int c = 0; c < C; ++c) {
      const T dlogit = (probs[c] - (c == label ? T(1) : T(0))) * inv_b;
      out.head.b.data[c] += dlogit;
      for (int j = 0; j < D; ++j) {
        out.head.w.data[static_cast<std::size_t>(j) * C + c] += dlogit * h[j];
        dh[j] += dlogit * head.w.data[static_cast<std::size_t>(j) * C + c];
      }
    }
  }
  encoder_backward(cfg, w, batch, cache, d_hidden, out.encoder);
  return out;
}

}  // namespace hopespeech
