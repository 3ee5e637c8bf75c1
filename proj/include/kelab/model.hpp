#ifndef KELAB_MODEL_HPP_
#define KELAB_MODEL_HPP_

#include <map>
#include <memory>
#include <optional>
#include <tuple>
#include <utility>
#include <vector>

#include "kelab/linalg.hpp"
#include "kelab/rng.hpp"
#include "kelab/tokenizer.hpp"

namespace kelab {

enum class Activation { gelu, relu };

struct ModelConfig {
  int n_layers = 4;
  int d_model = 64;
  int n_heads = 4;
  int d_mlp = 256;
  int vocab_size = 0;
  int max_seq_len = 64;
  Activation activation = Activation::gelu;
  double ln_epsilon = 1e-5;

  int head_dim() const { return d_model / n_heads; }
  void validate() const;
};

struct LayerWeights {
  Mat wq, wk, wv, wo;  // d_model x d_model, applied as y = x W^T
  Vec ln1_g, ln1_b;
  Mat w_fc;    // d_mlp x d_model
  Mat w_proj;  // d_model x d_mlp
  Vec ln2_g, ln2_b;
};

// Pre-norm decoder stack per layer:
//   a = wo . attn(ln1(x));  z = act(w_fc . ln2(x + a));  m = w_proj . z;
//   x' = x + a + m
// with learned absolute positions and untied unembedding.
struct TransformerWeights {
  Mat emb;  // vocab x d_model
  Mat pos;  // max_seq_len x d_model
  std::vector<LayerWeights> layers;
  Mat decode;  // vocab x d_model

  static TransformerWeights zeros(const ModelConfig& cfg);
  static TransformerWeights init(const ModelConfig& cfg, SeededRng& rng,
                                 double init_std = 0.02);
  bool all_finite() const;
};

enum class CaptureSite { mlp_inner, mlp_out, hidden };

struct CapturePoint {
  int layer = 0;
  int position = 0;
  CaptureSite site = CaptureSite::mlp_inner;

  bool operator<(const CapturePoint& o) const {
    return std::tie(layer, position, site) <
           std::tie(o.layer, o.position, o.site);
  }
  bool operator==(const CapturePoint& o) const {
    return layer == o.layer && position == o.position && site == o.site;
  }
};

struct LayerActs {
  Mat x_in, n1, q, k, v;
  std::vector<Mat> att;  // per-head softmaxed scores, T x T
  Mat att_concat, a, mid, n2, fc_pre, z, m, x_out;
  Vec ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
};

struct ActivationCache {
  std::vector<int> token_ids;
  Mat x0;
  std::vector<LayerActs> layers;
  Mat logits;
  std::vector<std::pair<CapturePoint, Vec>> injections;
};

struct ForwardOptions {
  std::vector<CapturePoint> captures;
  // Additive perturbations applied at the named site before downstream use.
  std::vector<std::pair<CapturePoint, Vec>> injections;
  bool keep_activations = false;
};

struct ForwardResult {
  Mat logits;  // T x vocab
  std::map<CapturePoint, Vec> captured;
  std::shared_ptr<ActivationCache> acts;
};

ForwardResult forward(const TransformerWeights& w, const ModelConfig& cfg,
                      const std::vector<int>& token_ids,
                      const ForwardOptions& opts = {});

double next_token_logprob(const TransformerWeights& w, const ModelConfig& cfg,
                          const std::vector<int>& prompt_ids, int target_id);

// log-softmax row of the final position; cheaper than V calls above.
Vec next_token_logprobs(const TransformerWeights& w, const ModelConfig& cfg,
                        const std::vector<int>& prompt_ids);

// Fraction of (prompt, target) pairs whose target is the argmax next token.
double fact_recall(const TransformerWeights& w, const ModelConfig& cfg,
                   const std::vector<std::pair<std::vector<int>, int>>& facts);

struct LayerGrads {
  Mat wq, wk, wv, wo;
  Vec ln1_g, ln1_b;
  Mat w_fc, w_proj;
  Vec ln2_g, ln2_b;
};

struct WeightGrads {
  Mat emb, pos;
  std::vector<LayerGrads> layers;
  Mat decode;

  static WeightGrads zeros(const ModelConfig& cfg);
  void accumulate(const WeightGrads& other, double scale = 1.0);
  double global_norm() const;
  void scale(double s);
};

struct BackwardRequest {
  Mat d_logits;  // T x vocab, gradient of the scalar loss wrt logits
  bool want_weight_grads = true;
  std::vector<CapturePoint> grad_points;
};

struct BackwardResult {
  std::optional<WeightGrads> wgrads;
  std::map<CapturePoint, Vec> point_grads;
};

BackwardResult backward(const TransformerWeights& w, const ModelConfig& cfg,
                        const ActivationCache& acts, BackwardRequest req);

// Exact gradient of log P(target | prompt) wrt an additive perturbation at
// the capture point. Only the mlp_out site is supported.
Vec gradient_wrt_activation(const TransformerWeights& w,
                            const ModelConfig& cfg,
                            const std::vector<int>& prompt_ids, int target_id,
                            const CapturePoint& point);

// Sample a sequence from the model: first token uniform over the vocabulary,
// later tokens from the model's next-token distribution. len may be 0.
std::vector<int> sample_sequence(const TransformerWeights& w,
                                 const ModelConfig& cfg, int len,
                                 SeededRng& rng);

// Model bundles weights with the tokenizer that indexes them.
struct Model {
  ModelConfig config;
  Tokenizer tokenizer;
  TransformerWeights weights;
};

}  // namespace kelab

#endif  // KELAB_MODEL_HPP_
