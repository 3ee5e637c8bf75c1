#include "kelab/train.hpp"

#include <cmath>
#include <iostream>

#include "kelab/errors.hpp"
#include "kelab/linalg.hpp"
#include "model_internal.hpp"

namespace kelab {

namespace {

void apply_update(TransformerWeights& w, const WeightGrads& g, double lr) {
  w.emb += lr * g.emb;
  w.pos += lr * g.pos;
  w.decode += lr * g.decode;
  for (size_t i = 0; i < w.layers.size(); ++i) {
    auto& lw = w.layers[i];
    const auto& lg = g.layers[i];
    lw.wq += lr * lg.wq;
    lw.wk += lr * lg.wk;
    lw.wv += lr * lg.wv;
    lw.wo += lr * lg.wo;
    lw.ln1_g += lr * lg.ln1_g;
    lw.ln1_b += lr * lg.ln1_b;
    lw.w_fc += lr * lg.w_fc;
    lw.w_proj += lr * lg.w_proj;
    lw.ln2_g += lr * lg.ln2_g;
    lw.ln2_b += lr * lg.ln2_b;
  }
}

// One SGD step over the whole minibatch in fused form. All position-wise work
// (embeddings, layernorms, projections, mlp, logits) runs as single matrix
// products over the concatenated batch rows; only attention stays
// per-sequence. Gradients land directly in g. Returns the summed NLL.
double batched_step(const TransformerWeights& w, const ModelConfig& cfg,
                    const std::vector<const std::vector<int>*>& batch,
                    int predictions, WeightGrads& g) {
  const int S = static_cast<int>(batch.size());
  std::vector<Eigen::Index> off(static_cast<size_t>(S) + 1, 0);
  for (int s = 0; s < S; ++s)
    off[static_cast<size_t>(s) + 1] =
        off[static_cast<size_t>(s)] +
        static_cast<Eigen::Index>(batch[static_cast<size_t>(s)]->size());
  const Eigen::Index n = off[static_cast<size_t>(S)];
  const int hd = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Mat x(n, cfg.d_model);
  for (int s = 0; s < S; ++s) {
    const auto& seq = *batch[static_cast<size_t>(s)];
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(seq.size()); ++i)
      x.row(off[static_cast<size_t>(s)] + i) =
          w.emb.row(seq[static_cast<size_t>(i)]) + w.pos.row(i);
  }

  struct LayerCache {
    Mat x_in, n1, q, k, v, att_concat, mid, n2, fc_pre, z;
    Vec ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
    std::vector<Mat> att;  // seq-major, then head
  };
  std::vector<LayerCache> lc(static_cast<size_t>(cfg.n_layers));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
    LayerCache& c = lc[static_cast<size_t>(l)];
    c.x_in = std::move(x);
    c.n1 = internal::layernorm(c.x_in, lw.ln1_g, lw.ln1_b, cfg.ln_epsilon,
                               c.ln1_mean, c.ln1_rstd);
    c.q.noalias() = c.n1 * lw.wq.transpose();
    c.k.noalias() = c.n1 * lw.wk.transpose();
    c.v.noalias() = c.n1 * lw.wv.transpose();
    c.att.resize(static_cast<size_t>(S) * static_cast<size_t>(cfg.n_heads));
    c.att_concat.resize(n, cfg.d_model);
    for (int s = 0; s < S; ++s) {
      const Eigen::Index t =
          off[static_cast<size_t>(s) + 1] - off[static_cast<size_t>(s)];
      for (int h = 0; h < cfg.n_heads; ++h) {
        auto qh = c.q.block(off[static_cast<size_t>(s)], h * hd, t, hd);
        auto kh = c.k.block(off[static_cast<size_t>(s)], h * hd, t, hd);
        auto vh = c.v.block(off[static_cast<size_t>(s)], h * hd, t, hd);
        Mat scores = qh * kh.transpose() * att_scale;
        for (Eigen::Index i = 0; i < t; ++i)
          for (Eigen::Index j = i + 1; j < t; ++j)
            scores(i, j) = -std::numeric_limits<double>::infinity();
        softmax_rows_inplace(scores);
        Mat& p = c.att[static_cast<size_t>(s * cfg.n_heads + h)];
        p = std::move(scores);
        c.att_concat.block(off[static_cast<size_t>(s)], h * hd, t, hd)
            .noalias() = p * vh;
      }
    }
    Mat a = c.att_concat * lw.wo.transpose();
    c.mid = c.x_in + a;
    c.n2 = internal::layernorm(c.mid, lw.ln2_g, lw.ln2_b, cfg.ln_epsilon,
                               c.ln2_mean, c.ln2_rstd);
    c.fc_pre.noalias() = c.n2 * lw.w_fc.transpose();
    c.z = c.fc_pre;
    internal::apply_activation(c.z, cfg.activation);
    x.noalias() = c.z * lw.w_proj.transpose();
    x += c.mid;
  }
  const Mat x_final = std::move(x);
  Mat logits = x_final * w.decode.transpose();

  double loss = 0.0;
  Mat d_logits = Mat::Zero(n, cfg.vocab_size);
  const double inv_pred = 1.0 / static_cast<double>(predictions);
  for (int s = 0; s < S; ++s) {
    const auto& seq = *batch[static_cast<size_t>(s)];
    const Eigen::Index t = static_cast<Eigen::Index>(seq.size());
    for (Eigen::Index i = 0; i + 1 < t; ++i) {
      const Eigen::Index r = off[static_cast<size_t>(s)] + i;
      Vec row = logits.row(r).transpose();
      const double lse = log_sum_exp(row);
      const int target = seq[static_cast<size_t>(i) + 1];
      loss += lse - row(target);
      d_logits.row(r) =
          ((row.array() - lse).exp() * inv_pred).matrix().transpose();
      d_logits(r, target) -= inv_pred;
    }
  }

  g.decode.noalias() += d_logits.transpose() * x_final;
  Mat d_x = d_logits * w.decode;
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
    LayerCache& c = lc[static_cast<size_t>(l)];
    LayerGrads& lg = g.layers[static_cast<size_t>(l)];

    const Mat& d_m = d_x;
    lg.w_proj.noalias() += d_m.transpose() * c.z;
    Mat d_z = d_m * lw.w_proj;
    Mat d_fc_pre = internal::activation_backward(c.fc_pre, d_z, cfg.activation);
    lg.w_fc.noalias() += d_fc_pre.transpose() * c.n2;
    Mat d_n2 = d_fc_pre * lw.w_fc;

    Mat d_mid = internal::layernorm_backward(c.mid, d_n2, lw.ln2_g, c.ln2_mean,
                                             c.ln2_rstd, &lg.ln2_g, &lg.ln2_b);
    d_mid += d_x;

    const Mat& d_a = d_mid;
    lg.wo.noalias() += d_a.transpose() * c.att_concat;
    Mat d_att_concat = d_a * lw.wo;

    Mat d_q = Mat::Zero(n, cfg.d_model);
    Mat d_k = Mat::Zero(n, cfg.d_model);
    Mat d_v = Mat::Zero(n, cfg.d_model);
    for (int s = 0; s < S; ++s) {
      const Eigen::Index o = off[static_cast<size_t>(s)];
      const Eigen::Index t = off[static_cast<size_t>(s) + 1] - o;
      for (int h = 0; h < cfg.n_heads; ++h) {
        const Mat& p = c.att[static_cast<size_t>(s * cfg.n_heads + h)];
        auto vh = c.v.block(o, h * hd, t, hd);
        auto qh = c.q.block(o, h * hd, t, hd);
        auto kh = c.k.block(o, h * hd, t, hd);
        Mat d_oh = d_att_concat.block(o, h * hd, t, hd);
        Mat d_p = d_oh * vh.transpose();
        d_v.block(o, h * hd, t, hd).noalias() = p.transpose() * d_oh;
        Mat d_s(t, t);
        for (Eigen::Index i = 0; i < t; ++i) {
          const double dot = d_p.row(i).cwiseProduct(p.row(i)).sum();
          d_s.row(i) = (p.row(i).array() * (d_p.row(i).array() - dot)).matrix();
        }
        d_q.block(o, h * hd, t, hd).noalias() = d_s * kh * att_scale;
        d_k.block(o, h * hd, t, hd).noalias() = d_s.transpose() * qh * att_scale;
      }
    }

    lg.wq.noalias() += d_q.transpose() * c.n1;
    lg.wk.noalias() += d_k.transpose() * c.n1;
    lg.wv.noalias() += d_v.transpose() * c.n1;
    Mat d_n1 = d_q * lw.wq;
    d_n1.noalias() += d_k * lw.wk;
    d_n1.noalias() += d_v * lw.wv;
    Mat d_x_in = internal::layernorm_backward(c.x_in, d_n1, lw.ln1_g, c.ln1_mean,
                                              c.ln1_rstd, &lg.ln1_g, &lg.ln1_b);
    d_x = d_mid + d_x_in;
  }

  for (int s = 0; s < S; ++s) {
    const auto& seq = *batch[static_cast<size_t>(s)];
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(seq.size()); ++i) {
      const Eigen::Index r = off[static_cast<size_t>(s)] + i;
      g.emb.row(seq[static_cast<size_t>(i)]) += d_x.row(r);
      g.pos.row(i) += d_x.row(r);
    }
  }
  return loss;
}

}  // namespace

// Verification hook for tests: the fused step against the per-sequence
// reference path.
double train_step_reference(const TransformerWeights& w, const ModelConfig& cfg,
                            const std::vector<const std::vector<int>*>& batch,
                            int predictions, WeightGrads& grads) {
  double batch_loss = 0.0;
  for (const auto* seqp : batch) {
    const auto& seq = *seqp;
    const auto t = static_cast<Eigen::Index>(seq.size());
    ForwardOptions opts;
    opts.keep_activations = true;
    ForwardResult fr = forward(w, cfg, seq, opts);
    Mat d_logits = Mat::Zero(t, cfg.vocab_size);
    for (Eigen::Index i = 0; i + 1 < t; ++i) {
      Vec row = fr.logits.row(i).transpose();
      const double lse = log_sum_exp(row);
      const int target = seq[static_cast<size_t>(i) + 1];
      batch_loss += lse - row(target);
      d_logits.row(i) =
          ((row.array() - lse).exp() / predictions).matrix().transpose();
      d_logits(i, target) -= 1.0 / predictions;
    }
    BackwardRequest req;
    req.d_logits = std::move(d_logits);
    req.want_weight_grads = true;
    BackwardResult br = backward(w, cfg, *fr.acts, std::move(req));
    grads.accumulate(*br.wgrads);
  }
  return batch_loss;
}

double train_step_fused(const TransformerWeights& w, const ModelConfig& cfg,
                        const std::vector<const std::vector<int>*>& batch,
                        int predictions, WeightGrads& grads) {
  return batched_step(w, cfg, batch, predictions, grads);
}

TrainResult train(const ModelConfig& cfg,
                  const std::vector<std::vector<int>>& corpus,
                  const TrainConfig& hyper) {
  cfg.validate();
  if (corpus.empty()) throw TrainingError("train: empty corpus");
  for (const auto& seq : corpus) {
    if (seq.size() < 2) {
      throw TrainingError("train: corpus sequence shorter than 2 tokens");
    }
    if (static_cast<int>(seq.size()) > cfg.max_seq_len) {
      throw TrainingError("train: corpus sequence exceeds max_seq_len");
    }
    for (int id : seq) {
      if (id < 0 || id >= cfg.vocab_size) {
        throw TrainingError("train: corpus token outside vocabulary");
      }
    }
  }
  if (hyper.steps < 0 || hyper.batch_size < 1) {
    throw ConfigError("train: steps must be >= 0 and batch_size >= 1");
  }

  SeededRng rng(hyper.seed);
  TrainResult out;
  out.weights = TransformerWeights::init(cfg, rng, hyper.init_std);
  if (hyper.lr == 0.0 || hyper.steps == 0) return out;

  std::ostream* log = hyper.log_stream ? hyper.log_stream : &std::cerr;
  double window_loss = 0.0;
  int window_count = 0;

  for (int step = 1; step <= hyper.steps; ++step) {
    WeightGrads grads = WeightGrads::zeros(cfg);
    double batch_loss = 0.0;
    int predictions = 0;

    // count predictions first so per-token weighting is exact
    std::vector<const std::vector<int>*> batch;
    batch.reserve(static_cast<size_t>(hyper.batch_size));
    for (int b = 0; b < hyper.batch_size; ++b) {
      const auto idx = rng.uniform_int(corpus.size());
      const auto& seq = corpus[static_cast<size_t>(idx)];
      batch.push_back(&seq);
      predictions += static_cast<int>(seq.size()) - 1;
    }

    batch_loss = batched_step(out.weights, cfg, batch, predictions, grads);

    const double mean_loss = batch_loss / predictions;
    if (!std::isfinite(mean_loss)) {
      throw TrainingError("train: loss diverged (non-finite) at step " +
                          std::to_string(step));
    }
    out.final_loss = mean_loss;
    window_loss += mean_loss;
    ++window_count;

    if (hyper.clip_norm > 0.0) {
      const double gn = grads.global_norm();
      if (gn > hyper.clip_norm) grads.scale(hyper.clip_norm / gn);
    }
    apply_update(out.weights, grads, -hyper.lr);
    if (!out.weights.all_finite()) {
      throw TrainingError("train: weights diverged (non-finite) at step " +
                          std::to_string(step));
    }

    if (hyper.log_every > 0 &&
        (step % hyper.log_every == 0 || step == hyper.steps)) {
      const double avg = window_loss / window_count;
      out.loss_log.emplace_back(step, avg);
      (*log) << "step " << step << "/" << hyper.steps << " loss " << avg
             << "\n";
      window_loss = 0.0;
      window_count = 0;
    }
  }
  return out;
}

}  // namespace kelab
