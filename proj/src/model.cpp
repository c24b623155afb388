#include "crosstrace/model.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace crosstrace {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void fill_gaussian(Matrix& m, Rng& rng, double std_dev) {
  Vector v = gaussian(rng, 0.0, std_dev, static_cast<int>(m.size()));
  std::copy(v.data(), v.data() + v.size(), m.data());
}

/// Row-wise layernorm; optionally records xhat and 1/std for backprop.
Matrix layernorm_rows(const Matrix& x, const Vector& gain, const Vector& bias,
                      double eps, Matrix* xhat_out = nullptr,
                      Vector* inv_std_out = nullptr) {
  const Eigen::Index rows = x.rows(), cols = x.cols();
  Matrix out(rows, cols);
  Matrix xhat(rows, cols);
  Vector inv_std(rows);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv;
    out.row(r) = xhat.row(r).cwiseProduct(gain.transpose()) + bias.transpose();
    inv_std[r] = inv;
  }
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) *inv_std_out = std::move(inv_std);
  return out;
}

/// Row-wise softmax over a causally masked score matrix. Masked entries hold
/// -inf and come out exactly 0. Scalar std::exp on purpose: Eigen's packet
/// exp clamps the argument and turns -inf into a denormal instead of 0.
void softmax_rows_inplace(Matrix& scores) {
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const double m = scores.row(r).maxCoeff();
    scores.row(r) =
        scores.row(r).unaryExpr([m](double x) { return std::exp(x - m); });
    scores.row(r) /= scores.row(r).sum();
  }
}

void apply_interveners(const HookSet* hooks, int layer, Site site, Matrix& x) {
  if (!hooks) return;
  for (const auto& fn : hooks->interveners) {
    std::optional<Matrix> edit = fn(layer, site, x);
    if (!edit) continue;
    if (edit->rows() != x.rows() || edit->cols() != x.cols()) {
      throw std::runtime_error(
          "intervener returned wrong-shaped edit at layer " +
          std::to_string(layer) + " site " + site_name(site));
    }
    x = std::move(*edit);
  }
}

void notify_observers(const HookSet* hooks, int layer, Site site,
                      const Matrix& x) {
  if (!hooks) return;
  for (const auto& fn : hooks->observers) fn(layer, site, x);
}

}  // namespace

const char* site_name(Site s) {
  switch (s) {
    case Site::Attn: return "attn";
    case Site::Ffn: return "ffn";
    case Site::Hidden: return "hidden";
  }
  return "?";
}

void ModelConfig::validate() const {
  if (n_layers < 3)
    throw std::invalid_argument("model.n_layers must be >= 3");
  if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
    throw std::invalid_argument("model.d_model must be divisible by n_heads");
  if (d_ff <= 0) throw std::invalid_argument("model.d_ff must be > 0");
  if (vocab_size <= 0) throw std::invalid_argument("model.vocab_size must be > 0");
  if (patch_rows <= 0 || patch_cols <= 0)
    throw std::invalid_argument("model.patch grid must be positive");
  if (feat_dim <= 0) throw std::invalid_argument("model.feat_dim must be > 0");
  if (max_seq < n_patches() + 1)
    throw std::invalid_argument("model.max_seq too small for the patch grid");
  if (ln_eps <= 0) throw std::invalid_argument("model.ln_eps must be > 0");
}

Weights Weights::init(const ModelConfig& config, Rng& rng, double init_std) {
  config.validate();
  Weights w;
  w.config = config;
  const int d = config.d_model;
  w.patch_proj.resize(config.feat_dim, d);
  fill_gaussian(w.patch_proj, rng, init_std);
  w.tok_embed.resize(config.vocab_size, d);
  fill_gaussian(w.tok_embed, rng, init_std);
  w.pos_embed.resize(config.max_seq, d);
  fill_gaussian(w.pos_embed, rng, init_std);
  w.layers.resize(config.n_layers);
  for (auto& lw : w.layers) {
    lw.wq.resize(d, d);
    lw.wk.resize(d, d);
    lw.wv.resize(d, d);
    lw.wo.resize(d, d);
    fill_gaussian(lw.wq, rng, init_std);
    fill_gaussian(lw.wk, rng, init_std);
    fill_gaussian(lw.wv, rng, init_std);
    fill_gaussian(lw.wo, rng, init_std);
    lw.ln1_gain = Vector::Ones(d);
    lw.ln1_bias = Vector::Zero(d);
    lw.ln2_gain = Vector::Ones(d);
    lw.ln2_bias = Vector::Zero(d);
    lw.w1.resize(d, config.d_ff);
    fill_gaussian(lw.w1, rng, init_std);
    lw.b1 = Vector::Zero(config.d_ff);
    lw.w2.resize(config.d_ff, d);
    fill_gaussian(lw.w2, rng, init_std);
    lw.b2 = Vector::Zero(d);
  }
  w.lnf_gain = Vector::Ones(d);
  w.lnf_bias = Vector::Zero(d);
  if (!config.tie_output) {
    w.head.resize(d, config.vocab_size);
    fill_gaussian(w.head, rng, init_std);
  }
  return w;
}

Weights Weights::zeros_like(const Weights& other) {
  Weights w;
  w.config = other.config;
  w.patch_proj = Matrix::Zero(other.patch_proj.rows(), other.patch_proj.cols());
  w.tok_embed = Matrix::Zero(other.tok_embed.rows(), other.tok_embed.cols());
  w.pos_embed = Matrix::Zero(other.pos_embed.rows(), other.pos_embed.cols());
  w.layers.resize(other.layers.size());
  for (size_t i = 0; i < other.layers.size(); ++i) {
    const auto& o = other.layers[i];
    auto& l = w.layers[i];
    l.wq = Matrix::Zero(o.wq.rows(), o.wq.cols());
    l.wk = Matrix::Zero(o.wk.rows(), o.wk.cols());
    l.wv = Matrix::Zero(o.wv.rows(), o.wv.cols());
    l.wo = Matrix::Zero(o.wo.rows(), o.wo.cols());
    l.ln1_gain = Vector::Zero(o.ln1_gain.size());
    l.ln1_bias = Vector::Zero(o.ln1_bias.size());
    l.ln2_gain = Vector::Zero(o.ln2_gain.size());
    l.ln2_bias = Vector::Zero(o.ln2_bias.size());
    l.w1 = Matrix::Zero(o.w1.rows(), o.w1.cols());
    l.b1 = Vector::Zero(o.b1.size());
    l.w2 = Matrix::Zero(o.w2.rows(), o.w2.cols());
    l.b2 = Vector::Zero(o.b2.size());
  }
  w.lnf_gain = Vector::Zero(other.lnf_gain.size());
  w.lnf_bias = Vector::Zero(other.lnf_bias.size());
  if (other.head.size() > 0)
    w.head = Matrix::Zero(other.head.rows(), other.head.cols());
  return w;
}

std::vector<TensorRef> tensor_refs(Weights& w) {
  std::vector<TensorRef> refs;
  auto add_m = [&](const std::string& name, Matrix& m) {
    refs.push_back({name, m.data(), m.rows(), m.cols()});
  };
  auto add_v = [&](const std::string& name, Vector& v) {
    refs.push_back({name, v.data(), v.size(), 1});
  };
  add_m("patch_proj", w.patch_proj);
  add_m("tok_embed", w.tok_embed);
  add_m("pos_embed", w.pos_embed);
  for (size_t i = 0; i < w.layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    auto& l = w.layers[i];
    add_m(p + "wq", l.wq);
    add_m(p + "wk", l.wk);
    add_m(p + "wv", l.wv);
    add_m(p + "wo", l.wo);
    add_v(p + "ln1_gain", l.ln1_gain);
    add_v(p + "ln1_bias", l.ln1_bias);
    add_v(p + "ln2_gain", l.ln2_gain);
    add_v(p + "ln2_bias", l.ln2_bias);
    add_m(p + "w1", l.w1);
    add_v(p + "b1", l.b1);
    add_m(p + "w2", l.w2);
    add_v(p + "b2", l.b2);
  }
  add_v("lnf_gain", w.lnf_gain);
  add_v("lnf_bias", w.lnf_bias);
  if (w.head.size() > 0) add_m("head", w.head);
  return refs;
}

std::vector<TensorRef> tensor_refs(const Weights& w) {
  return tensor_refs(const_cast<Weights&>(w));
}

PositionList MultimodalSequence::positions_of(Category c) const {
  PositionList out;
  for (int i = 0; i < length(); ++i)
    if (tokens[i].category == c) out.push_back(i);
  return out;
}

uint64_t ActivationTrace::fingerprint() const {
  uint64_t h = 0xcbf29ce484222325ull;
  auto mix_bytes = [&h](const Matrix& m) {
    const auto* p = reinterpret_cast<const unsigned char*>(m.data());
    for (Eigen::Index i = 0; i < m.size() * 8; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ull;
    }
  };
  mix_bytes(embed_hidden);
  if (!layers.empty()) mix_bytes(layers.back().hidden);
  return h;
}

MultimodalSequence embed(const Weights& w, const Matrix& cells,
                         const std::vector<int>& text_ids,
                         const std::vector<Category>& categories) {
  const ModelConfig& cfg = w.config;
  const int n_vis = static_cast<int>(cells.rows());
  const int n_txt = static_cast<int>(text_ids.size());
  const int total = n_vis + n_txt;
  if (n_vis > 0 && cells.cols() != cfg.feat_dim)
    throw std::invalid_argument("embed: cell feature dim mismatch");
  if (total == 0) throw std::invalid_argument("embed: empty sequence");
  if (total > cfg.max_seq)
    throw std::invalid_argument("embed: sequence overflow (" +
                                std::to_string(total) + " > max_seq " +
                                std::to_string(cfg.max_seq) + ")");
  if (!categories.empty() && static_cast<int>(categories.size()) != total)
    throw std::invalid_argument("embed: category annotation length mismatch");

  MultimodalSequence seq;
  seq.visual_len = n_vis;
  seq.textual_len = n_txt;
  seq.tokens.resize(total);
  seq.embedded.resize(total, cfg.d_model);

  if (n_vis > 0) {
    seq.embedded.topRows(n_vis).noalias() = cells * w.patch_proj;
    seq.embedded.topRows(n_vis) += w.pos_embed.topRows(n_vis);
  }
  for (int i = 0; i < n_vis; ++i)
    seq.tokens[i] = {Modality::Visual, i, Category::Other};
  for (int j = 0; j < n_txt; ++j) {
    const int id = text_ids[j];
    if (id < 0 || id >= cfg.vocab_size)
      throw std::invalid_argument("embed: unknown token id " +
                                  std::to_string(id));
    const int pos = n_vis + j;
    seq.embedded.row(pos) = w.tok_embed.row(id) + w.pos_embed.row(pos);
    seq.tokens[pos] = {Modality::Textual, id, Category::Other};
  }
  if (!categories.empty()) {
    for (int i = 0; i < total; ++i) seq.tokens[i].category = categories[i];
  } else {
    seq.tokens[total - 1].category = Category::Last;
  }
  return seq;
}

LayerResult layer_forward(const Weights& w, int layer, const Matrix& h_prev,
                          const HookSet* hooks, bool record_attention,
                          LayerCache* cache) {
  const ModelConfig& cfg = w.config;
  if (layer < 0 || layer >= cfg.n_layers)
    throw std::invalid_argument("layer_forward: layer out of range");
  if (h_prev.cols() != cfg.d_model)
    throw std::invalid_argument("layer_forward: bad input width");
  const LayerWeights& lw = w.layers[layer];
  const Eigen::Index seq = h_prev.rows();
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix xhat1;
  Vector inv_std1;
  Matrix x1 = layernorm_rows(h_prev, lw.ln1_gain, lw.ln1_bias, cfg.ln_eps,
                             cache ? &xhat1 : nullptr,
                             cache ? &inv_std1 : nullptr);

  Matrix q = x1 * lw.wq;
  Matrix k = x1 * lw.wk;
  Matrix v = x1 * lw.wv;

  Matrix ctx(seq, cfg.d_model);
  std::vector<Matrix> att_mats;
  const bool keep_att = record_attention || cache != nullptr;
  if (keep_att) att_mats.reserve(cfg.n_heads);
  for (int hidx = 0; hidx < cfg.n_heads; ++hidx) {
    auto qh = q.middleCols(hidx * dh, dh);
    auto kh = k.middleCols(hidx * dh, dh);
    auto vh = v.middleCols(hidx * dh, dh);
    Matrix scores = (qh * kh.transpose()) * scale;
    for (Eigen::Index r = 0; r < seq; ++r)
      for (Eigen::Index c = r + 1; c < seq; ++c) scores(r, c) = kNegInf;
    softmax_rows_inplace(scores);
    ctx.middleCols(hidx * dh, dh).noalias() = scores * vh;
    if (keep_att) att_mats.push_back(std::move(scores));
  }
  Matrix attn_out = ctx * lw.wo;
  apply_interveners(hooks, layer, Site::Attn, attn_out);

  Matrix u = h_prev + attn_out;
  Matrix xhat2;
  Vector inv_std2;
  Matrix x2 = layernorm_rows(u, lw.ln2_gain, lw.ln2_bias, cfg.ln_eps,
                             cache ? &xhat2 : nullptr,
                             cache ? &inv_std2 : nullptr);
  Matrix z1 = (x2 * lw.w1).rowwise() + lw.b1.transpose();
  // gelu(x) = x * Phi(x), exact erf form
  Matrix g = z1.unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  });
  Matrix ffn_out = (g * lw.w2).rowwise() + lw.b2.transpose();
  apply_interveners(hooks, layer, Site::Ffn, ffn_out);

  Matrix h = u + ffn_out;
  apply_interveners(hooks, layer, Site::Hidden, h);

  notify_observers(hooks, layer, Site::Attn, attn_out);
  notify_observers(hooks, layer, Site::Ffn, ffn_out);
  notify_observers(hooks, layer, Site::Hidden, h);

  if (cache) {
    cache->xhat1 = std::move(xhat1);
    cache->inv_std1 = std::move(inv_std1);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->att = att_mats;
    cache->ctx = std::move(ctx);
    cache->attn_out = attn_out;
    cache->u = u;
    cache->xhat2 = std::move(xhat2);
    cache->inv_std2 = std::move(inv_std2);
    cache->z1 = std::move(z1);
    cache->g = std::move(g);
    cache->ffn_out = ffn_out;
    cache->hidden = h;
  }

  LayerResult res;
  res.h = std::move(h);
  res.attn_out = std::move(attn_out);
  res.ffn_out = std::move(ffn_out);
  if (record_attention) res.attn_weights = std::move(att_mats);
  return res;
}

namespace {

Matrix output_logits(const Weights& w, const Matrix& h_last, Matrix* xhatf,
                     Vector* inv_stdf) {
  Matrix xf = layernorm_rows(h_last, w.lnf_gain, w.lnf_bias, w.config.ln_eps,
                             xhatf, inv_stdf);
  if (w.config.tie_output) return xf * w.tok_embed.transpose();
  return xf * w.head;
}

}  // namespace

ForwardResult forward(const Weights& w, const MultimodalSequence& seq,
                      const HookSet* hooks, TraceMode mode) {
  if (seq.embedded.rows() != seq.length())
    throw std::invalid_argument("forward: sequence not embedded");
  Matrix h = seq.embedded;
  apply_interveners(hooks, -1, Site::Hidden, h);
  notify_observers(hooks, -1, Site::Hidden, h);

  ForwardResult out;
  const bool record = mode != TraceMode::None;
  const bool record_att = mode == TraceMode::Full;
  if (record) {
    out.trace.embed_hidden = h;
    out.trace.layers.resize(w.config.n_layers);
    out.trace.has_attention = record_att;
  }
  for (int l = 0; l < w.config.n_layers; ++l) {
    LayerResult lr = layer_forward(w, l, h, hooks, record_att);
    h = std::move(lr.h);
    if (record) {
      auto& t = out.trace.layers[l];
      t.attn_out = std::move(lr.attn_out);
      t.ffn_out = std::move(lr.ffn_out);
      t.hidden = h;
      if (record_att) t.attn_weights = std::move(lr.attn_weights);
    }
  }
  out.logits = output_logits(w, h, nullptr, nullptr);
  return out;
}

ForwardCache forward_cached(const Weights& w, const MultimodalSequence& seq) {
  if (seq.embedded.rows() != seq.length())
    throw std::invalid_argument("forward_cached: sequence not embedded");
  ForwardCache cache;
  cache.embed_hidden = seq.embedded;
  cache.layers.resize(w.config.n_layers);
  Matrix h = cache.embed_hidden;
  for (int l = 0; l < w.config.n_layers; ++l) {
    LayerResult lr =
        layer_forward(w, l, h, nullptr, false, &cache.layers[l]);
    h = std::move(lr.h);
  }
  cache.logits = output_logits(w, h, &cache.xhatf, &cache.inv_stdf);
  return cache;
}

double token_prob(const Vector& logits, int token_id) {
  if (token_id < 0 || token_id >= logits.size())
    throw std::invalid_argument("token_prob: token id out of range");
  const double m = logits.maxCoeff();
  const Eigen::ArrayXd e = (logits.array() - m).exp();
  return e[token_id] / e.sum();
}

int decode_step(const Weights& w, MultimodalSequence& work,
                const HookSet* hooks) {
  ForwardResult fr = forward(w, work, hooks, TraceMode::None);
  const auto last = fr.logits.row(fr.logits.rows() - 1);
  int best = 0;
  for (int t = 1; t < last.size(); ++t)
    if (last[t] > last[best]) best = t;  // first index wins ties
  const int pos = work.length();
  if (pos >= w.config.max_seq)
    throw std::invalid_argument("decode_step: sequence overflow");
  work.tokens.push_back({Modality::Textual, best, Category::Other});
  work.textual_len += 1;
  work.embedded.conservativeResize(pos + 1, Eigen::NoChange);
  work.embedded.row(pos) = w.tok_embed.row(best) + w.pos_embed.row(pos);
  return best;
}

std::vector<int> greedy_decode(const Weights& w, const MultimodalSequence& seq,
                               const HookSet* hooks, int max_new,
                               int stop_token) {
  if (max_new < 1) throw std::invalid_argument("greedy_decode: max_new < 1");
  MultimodalSequence work = seq;
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    const int best = decode_step(w, work, hooks);
    out.push_back(best);
    if (best == stop_token) break;
  }
  return out;
}

}  // namespace crosstrace
