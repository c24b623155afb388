#pragma once

#include "crosstrace/rng.hpp"
#include "crosstrace/types.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace crosstrace {

struct ModelConfig {
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 0;
  int patch_rows = 6;
  int patch_cols = 6;
  int feat_dim = 7;
  int max_seq = 64;
  bool tie_output = false;
  double ln_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  int n_patches() const { return patch_rows * patch_cols; }

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const;
};

/// Token categories used by the tracing sweep. Values 1..7 match the
/// category axis of the RR grid; Other covers unannotated positions.
enum class Category : int {
  Other = 0,
  EarlyVisual = 1,
  ObjectVisual = 2,
  LateVisual = 3,
  EarlyTextual = 4,
  TextualObject = 5,
  LateTextual = 6,
  Last = 7,
};

enum class Modality { Visual, Textual };

/// The three patchable activation sites of a decoder layer.
enum class Site : int { Attn = 0, Ffn = 1, Hidden = 2 };

const char* site_name(Site s);

struct LayerWeights {
  Matrix wq, wk, wv, wo;      // d_model x d_model
  Vector ln1_gain, ln1_bias;  // d_model
  Vector ln2_gain, ln2_bias;  // d_model
  Matrix w1;                  // d_model x d_ff
  Vector b1;                  // d_ff
  Matrix w2;                  // d_ff x d_model
  Vector b2;                  // d_model
};

struct Weights {
  ModelConfig config;
  Matrix patch_proj;  // feat_dim x d_model
  Matrix tok_embed;   // vocab_size x d_model
  Matrix pos_embed;   // max_seq x d_model
  std::vector<LayerWeights> layers;
  Vector lnf_gain, lnf_bias;
  Matrix head;  // d_model x vocab_size; empty when config.tie_output

  /// Gaussian init (std `init_std`) for projections, ones/zeros for norms.
  static Weights init(const ModelConfig& config, Rng& rng,
                      double init_std = 0.02);
  static Weights zeros_like(const Weights& other);
};

/// Gradients mirror the weight container shape for shape.
using GradientSet = Weights;

/// Mutable view over one parameter tensor; used by the optimizer,
/// checkpointing and finite-difference probes.
struct TensorRef {
  std::string name;
  double* data;
  Eigen::Index rows, cols;
  Eigen::Index size() const { return rows * cols; }
};
std::vector<TensorRef> tensor_refs(Weights& w);
std::vector<TensorRef> tensor_refs(const Weights& w);  // const-casted views

struct TokenInfo {
  Modality modality;
  int id;  // vocab index (textual) or patch index (visual)
  Category category = Category::Other;
};

/// Concatenated visual+textual sequence. All visual positions precede all
/// textual positions; `embedded` rows are filled by embed().
struct MultimodalSequence {
  std::vector<TokenInfo> tokens;
  int visual_len = 0;
  int textual_len = 0;
  Matrix embedded;  // length() x d_model

  int length() const { return static_cast<int>(tokens.size()); }
  PositionList positions_of(Category c) const;
};

/// Per-run activation record: a^(l), m^(l), h^(l) for every layer, the
/// post-embedding hidden state h^(-1), and (optionally) per-head attention.
struct ActivationTrace {
  struct Layer {
    Matrix attn_out;  // a^(l), seq x d_model
    Matrix ffn_out;   // m^(l)
    Matrix hidden;    // h^(l)
    std::vector<Matrix> attn_weights;  // per head, seq x seq
  };
  Matrix embed_hidden;  // h^(-1)
  std::vector<Layer> layers;
  bool has_attention = false;

  bool empty() const { return layers.empty() && embed_hidden.size() == 0; }
  /// Content fingerprint; used to detect patches referencing a foreign trace.
  uint64_t fingerprint() const;
};

/// Observation and intervention callbacks. Observers are read-only and never
/// change outputs. An intervener may return a full replacement for the site's
/// activation matrix (same shape) or nullopt to leave it untouched; edits at
/// sites Attn/Ffn apply before the residual addition. Layer -1 / site Hidden
/// addresses the post-embedding hidden state.
struct HookSet {
  using Observer = std::function<void(int layer, Site, const Matrix&)>;
  using Intervener =
      std::function<std::optional<Matrix>(int layer, Site, const Matrix&)>;
  std::vector<Observer> observers;
  std::vector<Intervener> interveners;

  bool empty() const { return observers.empty() && interveners.empty(); }
};

enum class TraceMode {
  None,        // logits only
  Components,  // a/m/h per layer + h^(-1)
  Full,        // additionally per-head attention weights
};

/// Per-layer intermediates cached for backpropagation.
struct LayerCache {
  Matrix xhat1;  // LN1 normalized input (pre-gain)
  Vector inv_std1;
  Matrix q, k, v;
  std::vector<Matrix> att;  // per head, post-softmax
  Matrix ctx;               // concatenated head outputs, pre-Wo
  Matrix attn_out;
  Matrix u;  // h_prev + a
  Matrix xhat2;
  Vector inv_std2;
  Matrix z1;  // pre-activation
  Matrix g;   // gelu(z1)
  Matrix ffn_out;
  Matrix hidden;
};

struct ForwardCache {
  Matrix embed_hidden;
  std::vector<LayerCache> layers;
  Matrix xhatf;
  Vector inv_stdf;
  Matrix logits;
};

/// Builds the embedded sequence: visual rows are cell features projected by
/// patch_proj, textual rows are table lookups, both plus learned positional
/// embeddings. `categories` must cover all positions (or be empty, in which
/// case every position is Other except the final one, which is Last).
MultimodalSequence embed(const Weights& w, const Matrix& cells,
                         const std::vector<int>& text_ids,
                         const std::vector<Category>& categories = {});

struct LayerResult {
  Matrix h, attn_out, ffn_out;
  std::vector<Matrix> attn_weights;
};

/// One pre-norm decoder layer over the causally masked sequence:
/// h = h_prev + a + m with hooks applied at each site.
LayerResult layer_forward(const Weights& w, int layer, const Matrix& h_prev,
                          const HookSet* hooks, bool record_attention = false,
                          LayerCache* cache = nullptr);

struct ForwardResult {
  Matrix logits;  // seq x vocab
  ActivationTrace trace;
};

ForwardResult forward(const Weights& w, const MultimodalSequence& seq,
                      const HookSet* hooks = nullptr,
                      TraceMode mode = TraceMode::None);

/// Hook-free forward that additionally records everything backprop needs.
/// Produces bit-identical logits to forward() with no hooks.
ForwardCache forward_cached(const Weights& w, const MultimodalSequence& seq);

/// Softmax probability of `token_id` given the logits of one position.
double token_prob(const Vector& logits, int token_id);

/// One greedy step: forward over `work`, pick the argmax next token
/// (first-index tie-break), append it to `work`, and return its id.
int decode_step(const Weights& w, MultimodalSequence& work,
                const HookSet* hooks);

/// Greedy decoding (argmax, first-index tie-break) until `stop_token` or
/// `max_new` tokens. Hooks are re-applied on every step's forward pass.
std::vector<int> greedy_decode(const Weights& w, const MultimodalSequence& seq,
                               const HookSet* hooks, int max_new,
                               int stop_token);

}  // namespace crosstrace
