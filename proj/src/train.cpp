#include "crosstrace/train.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace crosstrace {

namespace {

double gelu_prime(double x) {
  const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
  const double Phi = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  return Phi + x * phi;
}

/// Backward through y = gain .* xhat + bias, accumulating parameter grads
/// and returning the gradient with respect to the pre-norm input.
Matrix ln_backward(const Matrix& dy, const Matrix& xhat, const Vector& inv_std,
                   const Vector& gain, Vector& dgain, Vector& dbias) {
  dgain += (dy.cwiseProduct(xhat)).colwise().sum().transpose();
  dbias += dy.colwise().sum().transpose();
  Matrix dxhat = dy.array().rowwise() * gain.transpose().array();
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m1 = dxhat.row(r).mean();
    const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
    dx.row(r) =
        inv_std[r] * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
  }
  return dx;
}

Matrix ln_apply(const Matrix& xhat, const Vector& gain, const Vector& bias) {
  return (xhat.array().rowwise() * gain.transpose().array()).rowwise() +
         bias.transpose().array();
}

}  // namespace

void backward(const Weights& w, const MultimodalSequence& seq,
              const Matrix& cells, const ForwardCache& cache,
              const Matrix& dlogits, GradientSet& grads) {
  const ModelConfig& cfg = w.config;
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Output head.
  Matrix xf = ln_apply(cache.xhatf, w.lnf_gain, w.lnf_bias);
  Matrix dxf;
  if (cfg.tie_output) {
    grads.tok_embed.noalias() += dlogits.transpose() * xf;
    dxf.noalias() = dlogits * w.tok_embed;
  } else {
    grads.head.noalias() += xf.transpose() * dlogits;
    dxf.noalias() = dlogits * w.head.transpose();
  }
  Matrix dhid = ln_backward(dxf, cache.xhatf, cache.inv_stdf, w.lnf_gain,
                            grads.lnf_gain, grads.lnf_bias);

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerCache& lc = cache.layers[l];
    const LayerWeights& lw = w.layers[l];
    LayerWeights& gl = grads.layers[l];

    // hidden = u + ffn_out
    Matrix du = dhid;
    const Matrix& dffn = dhid;

    // ffn_out = gelu(x2 w1 + b1) w2 + b2
    gl.w2.noalias() += lc.g.transpose() * dffn;
    gl.b2 += dffn.colwise().sum().transpose();
    Matrix dg = dffn * lw.w2.transpose();
    Matrix dz1 = dg.cwiseProduct(lc.z1.unaryExpr(&gelu_prime));
    Matrix x2 = ln_apply(lc.xhat2, lw.ln2_gain, lw.ln2_bias);
    gl.w1.noalias() += x2.transpose() * dz1;
    gl.b1 += dz1.colwise().sum().transpose();
    Matrix dx2 = dz1 * lw.w1.transpose();
    du += ln_backward(dx2, lc.xhat2, lc.inv_std2, lw.ln2_gain, gl.ln2_gain,
                      gl.ln2_bias);

    // u = h_prev + attn_out
    const Matrix& dattn = du;
    gl.wo.noalias() += lc.ctx.transpose() * dattn;
    Matrix dctx = dattn * lw.wo.transpose();

    Matrix dq = Matrix::Zero(dctx.rows(), cfg.d_model);
    Matrix dk = Matrix::Zero(dctx.rows(), cfg.d_model);
    Matrix dv = Matrix::Zero(dctx.rows(), cfg.d_model);
    for (int hidx = 0; hidx < cfg.n_heads; ++hidx) {
      const Matrix& att = lc.att[hidx];
      auto dctx_h = dctx.middleCols(hidx * dh, dh);
      auto kh = lc.k.middleCols(hidx * dh, dh);
      auto qh = lc.q.middleCols(hidx * dh, dh);
      auto vh = lc.v.middleCols(hidx * dh, dh);
      Matrix ds = dctx_h * vh.transpose();
      dv.middleCols(hidx * dh, dh).noalias() = att.transpose() * dctx_h;
      // Softmax backward; masked entries carry att == 0 and drop out.
      Matrix dz(ds.rows(), ds.cols());
      for (Eigen::Index r = 0; r < ds.rows(); ++r) {
        const double dot = ds.row(r).dot(att.row(r));
        dz.row(r) = att.row(r).cwiseProduct(
            (ds.row(r).array() - dot).matrix());
      }
      dq.middleCols(hidx * dh, dh).noalias() = dz * kh * scale;
      dk.middleCols(hidx * dh, dh).noalias() = dz.transpose() * qh * scale;
    }
    Matrix x1 = ln_apply(lc.xhat1, lw.ln1_gain, lw.ln1_bias);
    gl.wq.noalias() += x1.transpose() * dq;
    gl.wk.noalias() += x1.transpose() * dk;
    gl.wv.noalias() += x1.transpose() * dv;
    Matrix dx1 = dq * lw.wq.transpose();
    dx1.noalias() += dk * lw.wk.transpose();
    dx1.noalias() += dv * lw.wv.transpose();

    dhid = du + ln_backward(dx1, lc.xhat1, lc.inv_std1, lw.ln1_gain,
                            gl.ln1_gain, gl.ln1_bias);
  }

  // Embedding backward.
  const int n_vis = seq.visual_len;
  if (n_vis > 0) {
    if (cells.rows() != n_vis)
      throw std::invalid_argument("backward: cells do not match sequence");
    grads.patch_proj.noalias() += cells.transpose() * dhid.topRows(n_vis);
    grads.pos_embed.topRows(n_vis) += dhid.topRows(n_vis);
  }
  for (int p = n_vis; p < seq.length(); ++p) {
    grads.tok_embed.row(seq.tokens[p].id) += dhid.row(p);
    grads.pos_embed.row(p) += dhid.row(p);
  }
}

SupervisedItem qa_item(const QASample& s, const Vocab& v) {
  SupervisedItem item;
  item.cells = &s.image.cells;
  item.text_ids = s.question_ids;
  const int last =
      s.image.n_cells() + static_cast<int>(s.question_ids.size()) - 1;
  item.targets = {{last, s.answer_yes ? v.yes : v.no}};
  return item;
}

SupervisedItem caption_item(const QASample& s, const Vocab& v) {
  SupervisedItem item;
  item.cells = &s.image.cells;
  item.text_ids.push_back(v.describe);
  item.text_ids.insert(item.text_ids.end(), s.caption_ids.begin(),
                       s.caption_ids.end() - 1);
  const int n_vis = s.image.n_cells();
  for (size_t k = 0; k < s.caption_ids.size(); ++k)
    item.targets.push_back({n_vis + static_cast<int>(k), s.caption_ids[k]});
  return item;
}

double item_loss_and_grads(const Weights& w, const SupervisedItem& item,
                           double scale, GradientSet* grads) {
  static const Matrix kNoCells(0, 0);
  const Matrix& cells = item.cells ? *item.cells : kNoCells;
  MultimodalSequence seq = embed(w, cells, item.text_ids);
  ForwardCache cache = forward_cached(w, seq);

  const auto n_targets = static_cast<double>(item.targets.size());
  if (item.targets.empty())
    throw std::invalid_argument("item_loss_and_grads: no targets");

  double loss = 0.0;
  Matrix dlogits;
  if (grads) dlogits = Matrix::Zero(cache.logits.rows(), cache.logits.cols());
  for (const auto& [pos, tgt] : item.targets) {
    if (pos < 0 || pos >= cache.logits.rows() || tgt < 0 ||
        tgt >= cache.logits.cols())
      throw std::invalid_argument("item_loss_and_grads: target out of range");
    const auto row = cache.logits.row(pos);
    const double m = row.maxCoeff();
    const Eigen::ArrayXd e = (row.array() - m).exp();
    const double lse = m + std::log(e.sum());
    loss += lse - row[tgt];
    if (grads) {
      dlogits.row(pos) += (e / e.sum()).matrix();
      dlogits(pos, tgt) -= 1.0;
    }
  }
  loss /= n_targets;
  if (grads) {
    dlogits *= scale / n_targets;
    backward(w, seq, cells, cache, dlogits, *grads);
  }
  return loss;
}

GradCheckResult grad_check(Weights& w,
                           const std::function<double(const Weights&)>& loss_fn,
                           const GradientSet& analytic, Rng& rng, int n_probes,
                           double step, double skip_below) {
  auto refs = tensor_refs(w);
  auto grefs = tensor_refs(analytic);
  Eigen::Index total = 0;
  for (const auto& r : refs) total += r.size();

  GradCheckResult res;
  for (int probe = 0; probe < n_probes; ++probe) {
    auto flat = static_cast<Eigen::Index>(rng.next_u64() %
                                          static_cast<uint64_t>(total));
    size_t ti = 0;
    while (flat >= refs[ti].size()) flat -= refs[ti++].size();
    double* p = refs[ti].data + flat;
    const double saved = *p;
    *p = saved + step;
    const double lp = loss_fn(w);
    *p = saved - step;
    const double lm = loss_fn(w);
    *p = saved;
    const double fd = (lp - lm) / (2.0 * step);
    const double an = grefs[ti].data[flat];
    if (std::abs(fd) < skip_below && std::abs(an) < skip_below) {
      ++res.n_skipped;
      continue;
    }
    const double rel =
        std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-12});
    if (rel > res.max_rel_err) {
      res.max_rel_err = rel;
      res.worst_tensor = refs[ti].name;
    }
    ++res.n_checked;
  }
  return res;
}

AdamState AdamState::init(const Weights& w) {
  AdamState s;
  s.m = Weights::zeros_like(w);
  s.v = Weights::zeros_like(w);
  return s;
}

void adam_step(Weights& w, const GradientSet& g, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  auto wr = tensor_refs(w);
  auto gr = tensor_refs(g);
  auto mr = tensor_refs(state.m);
  auto vr = tensor_refs(state.v);
  for (size_t i = 0; i < wr.size(); ++i) {
    for (Eigen::Index j = 0; j < wr[i].size(); ++j) {
      const double gj = gr[i].data[j];
      double& mj = mr[i].data[j];
      double& vj = vr[i].data[j];
      mj = beta1 * mj + (1.0 - beta1) * gj;
      vj = beta2 * vj + (1.0 - beta2) * gj * gj;
      wr[i].data[j] -= lr * (mj / bc1) / (std::sqrt(vj / bc2) + eps);
    }
  }
}

void TrainConfig::validate() const {
  if (epochs <= 0 || batch_size <= 0)
    throw std::invalid_argument("train.epochs and batch_size must be positive");
  if (lr <= 0) throw std::invalid_argument("train.lr must be positive");
  if (qa_weight <= 0)
    throw std::invalid_argument("train.qa_weight must be positive");
  if (caption_weight < 0)
    throw std::invalid_argument("train.caption_weight must be >= 0");
  if (init_std <= 0)
    throw std::invalid_argument("train.init_std must be positive");
  if (eval_every <= 0)
    throw std::invalid_argument("train.eval_every must be positive");
}

double validation_accuracy(const Weights& w,
                           const std::vector<const QASample*>& samples,
                           const Vocab& vocab) {
  if (samples.empty())
    throw std::invalid_argument("validation_accuracy: empty sample set");
  int correct = 0;
  for (const QASample* s : samples) {
    MultimodalSequence seq = embed_qa(w, *s);
    ForwardResult fr = forward(w, seq);
    const auto last = fr.logits.row(fr.logits.rows() - 1);
    int best = 0;
    for (int t = 1; t < last.size(); ++t)
      if (last[t] > last[best]) best = t;
    if (best == (s->answer_yes ? vocab.yes : vocab.no)) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

TrainResult train(const Dataset& ds, const ModelConfig& mcfg,
                  const TrainConfig& tcfg, Rng& rng, std::ostream* progress) {
  tcfg.validate();
  if (mcfg.vocab_size != ds.vocab.size())
    throw std::invalid_argument("train: model vocab_size != dataset vocab");
  if (mcfg.n_patches() != ds.config.grid_rows * ds.config.grid_cols ||
      mcfg.feat_dim != ds.config.feat_dim)
    throw std::invalid_argument("train: model patch grid != dataset grid");

  Rng init_rng = rng.fork(0);
  Rng batch_rng = rng.fork(1);
  Weights w = Weights::init(mcfg, init_rng, tcfg.init_std);
  AdamState adam = AdamState::init(w);

  auto train_set = ds.split("train");
  auto val_set = ds.split("val");
  if (train_set.empty() || val_set.empty())
    throw std::invalid_argument("train: dataset lacks train or val split");

  TrainResult res;
  res.best_val_acc = -1.0;
  int step = 0;
  double last_loss = 0.0;
  bool stop = false;

  auto evaluate = [&](double loss) {
    const double acc = validation_accuracy(w, val_set, ds.vocab);
    res.log.push_back({step, loss, acc});
    if (progress)
      *progress << "step " << step << "  loss " << loss << "  val_acc " << acc
                << '\n';
    if (acc > res.best_val_acc) {
      res.best_val_acc = acc;
      res.best_step = step;
      res.best = w;
    }
    if (acc >= tcfg.early_stop_acc) stop = true;
  };

  const auto n_train = static_cast<int>(train_set.size());
  std::vector<int> perm(train_set.size());
  for (int epoch = 0; epoch < tcfg.epochs && !stop; ++epoch) {
    Rng epoch_rng = batch_rng.fork(epoch);
    for (int i = 0; i < n_train; ++i) perm[i] = i;
    for (int i = n_train - 1; i > 0; --i) {
      const int j = static_cast<int>(epoch_rng.next_u64() %
                                     static_cast<uint64_t>(i + 1));
      std::swap(perm[i], perm[j]);
    }

    for (int start = 0; start < n_train && !stop; start += tcfg.batch_size) {
      const int end = std::min(start + tcfg.batch_size, n_train);
      std::vector<SupervisedItem> qa_items, cap_items;
      for (int i = start; i < end; ++i) {
        const QASample& s = *train_set[perm[i]];
        qa_items.push_back(qa_item(s, ds.vocab));
        if (tcfg.caption_weight > 0.0)
          cap_items.push_back(caption_item(s, ds.vocab));
      }
      GradientSet grads = Weights::zeros_like(w);
      double qa_sum = 0.0, cap_sum = 0.0;
      for (const auto& item : qa_items)
        qa_sum += item_loss_and_grads(
            w, item, tcfg.qa_weight / static_cast<double>(qa_items.size()),
            &grads);
      for (const auto& item : cap_items)
        cap_sum += item_loss_and_grads(
            w, item,
            tcfg.caption_weight / static_cast<double>(cap_items.size()),
            &grads);
      double loss = tcfg.qa_weight * qa_sum / static_cast<double>(qa_items.size());
      if (!cap_items.empty())
        loss += tcfg.caption_weight * cap_sum /
                static_cast<double>(cap_items.size());
      if (!std::isfinite(loss))
        throw std::runtime_error("train: non-finite loss at step " +
                                 std::to_string(step + 1));
      adam_step(w, grads, adam, tcfg.lr, tcfg.beta1, tcfg.beta2,
                tcfg.adam_eps);
      ++step;
      last_loss = loss;
      if (step % tcfg.eval_every == 0) evaluate(loss);
    }
  }
  if (res.log.empty() || res.log.back().step != step) evaluate(last_loss);
  return res;
}

}  // namespace crosstrace
