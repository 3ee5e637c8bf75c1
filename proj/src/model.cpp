#include "kelab/model.hpp"

#include <cmath>
#include <limits>

#include "kelab/errors.hpp"
#include "model_internal.hpp"

namespace kelab {

using internal::activation_backward;
using internal::apply_activation;
using internal::layernorm;
using internal::layernorm_backward;

namespace {

void check_point(const CapturePoint& p, const ModelConfig& cfg,
                 Eigen::Index t) {
  if (p.layer < 0 || p.layer >= cfg.n_layers) {
    throw ConfigError("capture point layer " + std::to_string(p.layer) +
                      " out of range");
  }
  if (p.position < 0 || p.position >= t) {
    throw LengthError("capture point position " + std::to_string(p.position) +
                      " outside sequence of length " + std::to_string(t));
  }
}

Eigen::Index site_dim(CaptureSite s, const ModelConfig& cfg) {
  return s == CaptureSite::mlp_inner ? cfg.d_mlp : cfg.d_model;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_mlp < 1 ||
      max_seq_len < 1) {
    throw ConfigError("model config: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_mlp < d_model) {
    throw ConfigError("model config: d_mlp must be >= d_model");
  }
  if (vocab_size < 1) {
    throw ConfigError("model config: vocab_size not set");
  }
  if (ln_epsilon <= 0.0) {
    throw ConfigError("model config: ln_epsilon must be positive");
  }
}

TransformerWeights TransformerWeights::zeros(const ModelConfig& cfg) {
  TransformerWeights w;
  w.emb = Mat::Zero(cfg.vocab_size, cfg.d_model);
  w.pos = Mat::Zero(cfg.max_seq_len, cfg.d_model);
  w.layers.resize(cfg.n_layers);
  for (auto& l : w.layers) {
    l.wq = Mat::Zero(cfg.d_model, cfg.d_model);
    l.wk = Mat::Zero(cfg.d_model, cfg.d_model);
    l.wv = Mat::Zero(cfg.d_model, cfg.d_model);
    l.wo = Mat::Zero(cfg.d_model, cfg.d_model);
    l.ln1_g = Vec::Zero(cfg.d_model);
    l.ln1_b = Vec::Zero(cfg.d_model);
    l.w_fc = Mat::Zero(cfg.d_mlp, cfg.d_model);
    l.w_proj = Mat::Zero(cfg.d_model, cfg.d_mlp);
    l.ln2_g = Vec::Zero(cfg.d_model);
    l.ln2_b = Vec::Zero(cfg.d_model);
  }
  w.decode = Mat::Zero(cfg.vocab_size, cfg.d_model);
  return w;
}

TransformerWeights TransformerWeights::init(const ModelConfig& cfg,
                                            SeededRng& rng, double init_std) {
  TransformerWeights w = zeros(cfg);
  // Fixed draw order: emb, pos, per layer (wq wk wv wo w_fc w_proj), decode.
  w.emb = rng_draw(rng, cfg.vocab_size, cfg.d_model) * init_std;
  w.pos = rng_draw(rng, cfg.max_seq_len, cfg.d_model) * init_std;
  for (auto& l : w.layers) {
    l.wq = rng_draw(rng, cfg.d_model, cfg.d_model) * init_std;
    l.wk = rng_draw(rng, cfg.d_model, cfg.d_model) * init_std;
    l.wv = rng_draw(rng, cfg.d_model, cfg.d_model) * init_std;
    l.wo = rng_draw(rng, cfg.d_model, cfg.d_model) * init_std;
    l.w_fc = rng_draw(rng, cfg.d_mlp, cfg.d_model) * init_std;
    l.w_proj = rng_draw(rng, cfg.d_model, cfg.d_mlp) * init_std;
    l.ln1_g.setOnes();
    l.ln2_g.setOnes();
  }
  w.decode = rng_draw(rng, cfg.vocab_size, cfg.d_model) * init_std;
  return w;
}

bool TransformerWeights::all_finite() const {
  if (!emb.allFinite() || !pos.allFinite() || !decode.allFinite()) return false;
  for (const auto& l : layers) {
    if (!l.wq.allFinite() || !l.wk.allFinite() || !l.wv.allFinite() ||
        !l.wo.allFinite() || !l.w_fc.allFinite() || !l.w_proj.allFinite() ||
        !l.ln1_g.allFinite() || !l.ln1_b.allFinite() ||
        !l.ln2_g.allFinite() || !l.ln2_b.allFinite()) {
      return false;
    }
  }
  return true;
}

ForwardResult forward(const TransformerWeights& w, const ModelConfig& cfg,
                      const std::vector<int>& token_ids,
                      const ForwardOptions& opts) {
  const Eigen::Index t = static_cast<Eigen::Index>(token_ids.size());
  if (t == 0) throw LengthError("forward: empty sequence");
  if (t > cfg.max_seq_len) {
    throw LengthError("forward: sequence length " + std::to_string(t) +
                      " exceeds max_seq_len " +
                      std::to_string(cfg.max_seq_len));
  }
  for (int id : token_ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw DataError("forward: token id " + std::to_string(id) +
                      " outside vocabulary");
    }
  }
  for (const auto& p : opts.captures) check_point(p, cfg, t);
  for (const auto& [p, vec] : opts.injections) {
    check_point(p, cfg, t);
    if (vec.size() != site_dim(p.site, cfg)) {
      throw ShapeError("forward: injection vector dim " +
                       std::to_string(vec.size()) + " at site expecting " +
                       std::to_string(site_dim(p.site, cfg)));
    }
  }

  const int hd = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  auto cache = std::make_shared<ActivationCache>();
  cache->token_ids = token_ids;
  cache->injections = opts.injections;
  cache->layers.resize(cfg.n_layers);

  Mat x(t, cfg.d_model);
  for (Eigen::Index i = 0; i < t; ++i) {
    x.row(i) = w.emb.row(token_ids[static_cast<size_t>(i)]) + w.pos.row(i);
  }
  cache->x0 = x;

  ForwardResult out;

  auto inject_at = [&](int layer, CaptureSite site, Mat& target) {
    for (const auto& [p, vec] : opts.injections) {
      if (p.layer == layer && p.site == site) {
        target.row(p.position) += vec.transpose();
      }
    }
  };
  auto capture_at = [&](int layer, CaptureSite site, const Mat& src) {
    for (const auto& p : opts.captures) {
      if (p.layer == layer && p.site == site) {
        out.captured[p] = src.row(p.position).transpose();
      }
    }
  };

  for (int l = 0; l < cfg.n_layers; ++l) {
    const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
    LayerActs& la = cache->layers[static_cast<size_t>(l)];
    la.x_in = x;

    la.n1 = layernorm(x, lw.ln1_g, lw.ln1_b, cfg.ln_epsilon, la.ln1_mean,
                      la.ln1_rstd);
    la.q = la.n1 * lw.wq.transpose();
    la.k = la.n1 * lw.wk.transpose();
    la.v = la.n1 * lw.wv.transpose();

    la.att.resize(static_cast<size_t>(cfg.n_heads));
    la.att_concat.resize(t, cfg.d_model);
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto qh = la.q.middleCols(h * hd, hd);
      auto kh = la.k.middleCols(h * hd, hd);
      auto vh = la.v.middleCols(h * hd, hd);
      Mat scores = qh * kh.transpose() * att_scale;
      for (Eigen::Index i = 0; i < t; ++i) {
        for (Eigen::Index j = i + 1; j < t; ++j) {
          scores(i, j) = -std::numeric_limits<double>::infinity();
        }
      }
      softmax_rows_inplace(scores);
      la.att[static_cast<size_t>(h)] = scores;
      la.att_concat.middleCols(h * hd, hd) =
          la.att[static_cast<size_t>(h)] * vh;
    }
    la.a = la.att_concat * lw.wo.transpose();

    la.mid = x + la.a;
    la.n2 = layernorm(la.mid, lw.ln2_g, lw.ln2_b, cfg.ln_epsilon, la.ln2_mean,
                      la.ln2_rstd);
    la.fc_pre = la.n2 * lw.w_fc.transpose();
    la.z = la.fc_pre;
    apply_activation(la.z, cfg.activation);
    inject_at(l, CaptureSite::mlp_inner, la.z);
    capture_at(l, CaptureSite::mlp_inner, la.z);

    la.m = la.z * lw.w_proj.transpose();
    inject_at(l, CaptureSite::mlp_out, la.m);
    capture_at(l, CaptureSite::mlp_out, la.m);

    x = la.mid + la.m;
    inject_at(l, CaptureSite::hidden, x);
    capture_at(l, CaptureSite::hidden, x);
    la.x_out = x;
  }

  out.logits = x * w.decode.transpose();
  if (opts.keep_activations) {
    cache->logits = out.logits;
    out.acts = cache;
  }
  return out;
}

WeightGrads WeightGrads::zeros(const ModelConfig& cfg) {
  WeightGrads g;
  g.emb = Mat::Zero(cfg.vocab_size, cfg.d_model);
  g.pos = Mat::Zero(cfg.max_seq_len, cfg.d_model);
  g.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& l : g.layers) {
    l.wq = Mat::Zero(cfg.d_model, cfg.d_model);
    l.wk = Mat::Zero(cfg.d_model, cfg.d_model);
    l.wv = Mat::Zero(cfg.d_model, cfg.d_model);
    l.wo = Mat::Zero(cfg.d_model, cfg.d_model);
    l.ln1_g = Vec::Zero(cfg.d_model);
    l.ln1_b = Vec::Zero(cfg.d_model);
    l.w_fc = Mat::Zero(cfg.d_mlp, cfg.d_model);
    l.w_proj = Mat::Zero(cfg.d_model, cfg.d_mlp);
    l.ln2_g = Vec::Zero(cfg.d_model);
    l.ln2_b = Vec::Zero(cfg.d_model);
  }
  g.decode = Mat::Zero(cfg.vocab_size, cfg.d_model);
  return g;
}

void WeightGrads::accumulate(const WeightGrads& o, double s) {
  emb += s * o.emb;
  pos += s * o.pos;
  decode += s * o.decode;
  for (size_t i = 0; i < layers.size(); ++i) {
    layers[i].wq += s * o.layers[i].wq;
    layers[i].wk += s * o.layers[i].wk;
    layers[i].wv += s * o.layers[i].wv;
    layers[i].wo += s * o.layers[i].wo;
    layers[i].ln1_g += s * o.layers[i].ln1_g;
    layers[i].ln1_b += s * o.layers[i].ln1_b;
    layers[i].w_fc += s * o.layers[i].w_fc;
    layers[i].w_proj += s * o.layers[i].w_proj;
    layers[i].ln2_g += s * o.layers[i].ln2_g;
    layers[i].ln2_b += s * o.layers[i].ln2_b;
  }
}

double WeightGrads::global_norm() const {
  double sq = emb.squaredNorm() + pos.squaredNorm() + decode.squaredNorm();
  for (const auto& l : layers) {
    sq += l.wq.squaredNorm() + l.wk.squaredNorm() + l.wv.squaredNorm() +
          l.wo.squaredNorm() + l.ln1_g.squaredNorm() + l.ln1_b.squaredNorm() +
          l.w_fc.squaredNorm() + l.w_proj.squaredNorm() +
          l.ln2_g.squaredNorm() + l.ln2_b.squaredNorm();
  }
  return std::sqrt(sq);
}

void WeightGrads::scale(double s) {
  emb *= s;
  pos *= s;
  decode *= s;
  for (auto& l : layers) {
    l.wq *= s;
    l.wk *= s;
    l.wv *= s;
    l.wo *= s;
    l.ln1_g *= s;
    l.ln1_b *= s;
    l.w_fc *= s;
    l.w_proj *= s;
    l.ln2_g *= s;
    l.ln2_b *= s;
  }
}

BackwardResult backward(const TransformerWeights& w, const ModelConfig& cfg,
                        const ActivationCache& acts, BackwardRequest req) {
  const Eigen::Index t = static_cast<Eigen::Index>(acts.token_ids.size());
  if (acts.layers.size() != static_cast<size_t>(cfg.n_layers)) {
    throw ShapeError("backward: activation cache does not match model depth");
  }
  if (req.d_logits.rows() != t || req.d_logits.cols() != cfg.vocab_size) {
    throw ShapeError("backward: d_logits shape mismatch");
  }
  const int hd = cfg.head_dim();
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  BackwardResult out;
  WeightGrads* wg = nullptr;
  if (req.want_weight_grads) {
    out.wgrads = WeightGrads::zeros(cfg);
    wg = &*out.wgrads;
  }
  for (const auto& p : req.grad_points) check_point(p, cfg, t);

  // Unembedding.
  const Mat& x_final = acts.layers.back().x_out;
  if (wg) wg->decode = req.d_logits.transpose() * x_final;
  Mat d_x = req.d_logits * w.decode;

  auto grab = [&](int layer, CaptureSite site, const Mat& d_src) {
    for (const auto& p : req.grad_points) {
      if (p.layer == layer && p.site == site) {
        out.point_grads[p] = d_src.row(p.position).transpose();
      }
    }
  };

  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
    const LayerActs& la = acts.layers[static_cast<size_t>(l)];
    LayerGrads* lg = wg ? &wg->layers[static_cast<size_t>(l)] : nullptr;

    // x_out = mid + m (+ constant injections): hidden and mlp_out
    // perturbations both see d_x directly.
    grab(l, CaptureSite::hidden, d_x);
    const Mat& d_m = d_x;
    grab(l, CaptureSite::mlp_out, d_m);

    if (lg) lg->w_proj = d_m.transpose() * la.z;
    Mat d_z = d_m * lw.w_proj;
    grab(l, CaptureSite::mlp_inner, d_z);
    Mat d_fc_pre = activation_backward(la.fc_pre, d_z, cfg.activation);
    if (lg) lg->w_fc = d_fc_pre.transpose() * la.n2;
    Mat d_n2 = d_fc_pre * lw.w_fc;

    Mat d_mid = layernorm_backward(la.mid, d_n2, lw.ln2_g, la.ln2_mean,
                                   la.ln2_rstd, lg ? &lg->ln2_g : nullptr,
                                   lg ? &lg->ln2_b : nullptr);
    d_mid += d_x;  // residual stream

    // mid = x_in + a
    const Mat& d_a = d_mid;
    if (lg) lg->wo = d_a.transpose() * la.att_concat;
    Mat d_att_concat = d_a * lw.wo;

    Mat d_q = Mat::Zero(t, cfg.d_model);
    Mat d_k = Mat::Zero(t, cfg.d_model);
    Mat d_v = Mat::Zero(t, cfg.d_model);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Mat& p = la.att[static_cast<size_t>(h)];
      auto vh = la.v.middleCols(h * hd, hd);
      auto qh = la.q.middleCols(h * hd, hd);
      auto kh = la.k.middleCols(h * hd, hd);
      Mat d_oh = d_att_concat.middleCols(h * hd, hd);
      Mat d_p = d_oh * vh.transpose();
      d_v.middleCols(h * hd, hd) = p.transpose() * d_oh;
      // softmax rows: ds = p .* (dp - rowsum(dp .* p))
      Mat d_s(t, t);
      for (Eigen::Index i = 0; i < t; ++i) {
        const double dot = d_p.row(i).cwiseProduct(p.row(i)).sum();
        d_s.row(i) = (p.row(i).array() * (d_p.row(i).array() - dot)).matrix();
      }
      d_q.middleCols(h * hd, hd) = d_s * kh * att_scale;
      d_k.middleCols(h * hd, hd) = d_s.transpose() * qh * att_scale;
    }

    if (lg) {
      lg->wq = d_q.transpose() * la.n1;
      lg->wk = d_k.transpose() * la.n1;
      lg->wv = d_v.transpose() * la.n1;
    }
    Mat d_n1 = d_q * lw.wq + d_k * lw.wk + d_v * lw.wv;
    Mat d_x_in = layernorm_backward(la.x_in, d_n1, lw.ln1_g, la.ln1_mean,
                                    la.ln1_rstd, lg ? &lg->ln1_g : nullptr,
                                    lg ? &lg->ln1_b : nullptr);
    d_x = d_mid + d_x_in;
  }

  if (wg) {
    for (Eigen::Index i = 0; i < t; ++i) {
      wg->emb.row(acts.token_ids[static_cast<size_t>(i)]) += d_x.row(i);
      wg->pos.row(i) += d_x.row(i);
    }
  }
  return out;
}

Vec next_token_logprobs(const TransformerWeights& w, const ModelConfig& cfg,
                        const std::vector<int>& prompt_ids) {
  ForwardResult r = forward(w, cfg, prompt_ids);
  Vec row = r.logits.row(r.logits.rows() - 1).transpose();
  return (row.array() - log_sum_exp(row)).matrix();
}

double next_token_logprob(const TransformerWeights& w, const ModelConfig& cfg,
                          const std::vector<int>& prompt_ids, int target_id) {
  if (target_id < 0 || target_id >= cfg.vocab_size) {
    throw DataError("next_token_logprob: target id out of range");
  }
  return next_token_logprobs(w, cfg, prompt_ids)(target_id);
}

double fact_recall(
    const TransformerWeights& w, const ModelConfig& cfg,
    const std::vector<std::pair<std::vector<int>, int>>& facts) {
  if (facts.empty()) return 0.0;
  int hits = 0;
  for (const auto& [prompt, target] : facts) {
    ForwardResult r = forward(w, cfg, prompt);
    Eigen::Index best;
    r.logits.row(r.logits.rows() - 1).maxCoeff(&best);
    if (static_cast<int>(best) == target) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(facts.size());
}

Vec gradient_wrt_activation(const TransformerWeights& w,
                            const ModelConfig& cfg,
                            const std::vector<int>& prompt_ids, int target_id,
                            const CapturePoint& point) {
  if (point.site != CaptureSite::mlp_out) {
    throw UnsupportedSiteError(
        "gradient_wrt_activation: only the mlp_out site is supported");
  }
  ForwardOptions opts;
  opts.keep_activations = true;
  ForwardResult r = forward(w, cfg, prompt_ids, opts);

  const Eigen::Index t = r.logits.rows();
  Vec row = r.logits.row(t - 1).transpose();
  Vec probs = softmax(row);
  Mat d_logits = Mat::Zero(t, cfg.vocab_size);
  d_logits.row(t - 1) = -probs.transpose();
  d_logits(t - 1, target_id) += 1.0;

  BackwardRequest req;
  req.d_logits = std::move(d_logits);
  req.want_weight_grads = false;
  req.grad_points = {point};
  BackwardResult b = backward(w, cfg, *r.acts, std::move(req));
  return b.point_grads.at(point);
}

std::vector<int> sample_sequence(const TransformerWeights& w,
                                 const ModelConfig& cfg, int len,
                                 SeededRng& rng) {
  std::vector<int> ids;
  if (len <= 0) return ids;
  ids.push_back(static_cast<int>(
      rng.uniform_int(static_cast<std::uint64_t>(cfg.vocab_size))));
  while (static_cast<int>(ids.size()) < len) {
    Vec lp = next_token_logprobs(w, cfg, ids);
    const double u = rng.uniform();
    double acc = 0.0;
    int pick = cfg.vocab_size - 1;
    for (int v = 0; v < cfg.vocab_size; ++v) {
      acc += std::exp(lp(v));
      if (u < acc) {
        pick = v;
        break;
      }
    }
    ids.push_back(pick);
  }
  return ids;
}

}  // namespace kelab
