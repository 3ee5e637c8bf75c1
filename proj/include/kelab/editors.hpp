#ifndef KELAB_EDITORS_HPP_
#define KELAB_EDITORS_HPP_

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "kelab/model.hpp"

namespace kelab {

// One counterfactual rewrite (s, r, o) -> (s, r, o*) against a cloze prompt.
struct EditRequest {
  std::string id;
  std::string subject;
  std::string relation;
  std::string target_true;
  std::string target_new;
  std::string prompt;
};

// Prefix-averaged mlp activation at the subject's last token: the "address"
// the update writes to.
struct KeyVector {
  int layer = 0;
  Vec vector;          // d_mlp
  int prefix_count = 0;
  std::string subject;
  std::uint64_t prompt_hash = 0;
};

// Optimized target output of W_proj at the same position: the "content".
struct ValueVector {
  int layer = 0;
  Vec vector;  // d_model
  double achieved_logprob = 0.0;
  int steps_used = 0;
};

struct CovarianceEstimate {
  int layer = 0;
  Mat matrix;  // d_mlp x d_mlp, symmetric positive definite after the ridge
  long long samples = 0;
  double lambda = 0.0;
};

struct EditDelta {
  std::map<int, Mat> by_layer;  // layer -> additive update to W_proj
  std::string method;
  std::vector<std::string> request_ids;
};

enum class EditMethod { rome, memit, ft };
enum class EditMode { sequential, batch };

std::string to_string(EditMethod m);
std::string to_string(EditMode m);
EditMethod edit_method_from(const std::string& s);
EditMode edit_mode_from(const std::string& s);

enum class PrefixMode { shared, per_edit };

struct PrefixConfig {
  int count = 5;
  int max_len = 8;
  PrefixMode mode = PrefixMode::shared;
  std::uint64_t seed = 1234;
};

struct ValueOptConfig {
  int max_steps = 25;
  double lr = 0.5;
  double target_prob = 0.95;
};

struct CovConfig {
  int probes = 200;
  int probe_len = 16;
  double lambda_scale = 1e-2;  // ridge = lambda_scale * trace(C)/d_mlp
  std::uint64_t seed = 999;
};

struct FtConfig {
  int steps = 25;
  double lr = 2e-3;
  double norm_bound = 5e-3;  // per-entry clamp on the cumulative delta
};

struct EditorConfig {
  std::vector<int> layers = {1, 2};
  PrefixConfig prefixes;
  ValueOptConfig value_opt;
  CovConfig covariance;
  double spread = 1.0;  // share of the residual written across layers
  FtConfig ft;
};

// Model-sampled prefixes of length 0..max_len, drawn from the given stream.
std::vector<std::vector<int>> sample_prefixes(const TransformerWeights& w,
                                              const ModelConfig& cfg, int n,
                                              int max_len, SeededRng& rng);

// k* = mean over prefixes of the mlp inner activation at the subject's last
// token of prefix + prompt. Depends only on tokens up to that position.
KeyVector compute_key(const Model& m, const EditRequest& req, int layer,
                      const std::vector<std::vector<int>>& prefixes);

// Second moment of mlp inner activations over every position of the probe
// corpus, plus a trace-scaled ridge.
CovarianceEstimate estimate_covariance(const Model& m, int layer,
                                       const std::vector<std::vector<int>>& probe_corpus,
                                       double lambda_scale);

// The estimates edit() builds on its own when none are passed in: a
// model-sampled probe corpus drawn from cfg.covariance, one estimate per edit
// layer. Exposed so repetition loops can pay the sampling cost once.
std::vector<CovarianceEstimate> estimate_covariances(const Model& m,
                                                     const EditorConfig& cfg);

// Gradient ascent on an additive delta at (layer, subject's last token,
// mlp_out) maximizing log P(target_new | prompt). Stops early once the target
// probability is reached; v* is the original mlp_out plus the final delta.
ValueVector compute_target_value(const Model& m, const EditRequest& req,
                                 int layer, const ValueOptConfig& opt);

// Rank-one write: dW = (v - W k)(C^-1 k)^T / ((C^-1 k)^T k).
EditDelta rome_update(const Mat& w_proj, const KeyVector& key,
                      const ValueVector& value, const CovarianceEstimate& cov);

// Batched write across layers. Keys and values arrive per request and per
// edit layer, aligned with `layers`.
struct KvPair {
  std::string request_id;
  std::vector<KeyVector> keys;
  std::vector<ValueVector> values;
};

// Per layer: the residual V - W K, scaled by spread/(remaining layers), is
// written through the covariance-weighted least-norm interpolant
// dW = R G^+ (C^-1 K)^T with G = K^T C^-1 K. Rank-deficient G (repeated
// keys) degrades gracefully to the least-squares compromise.
std::vector<EditDelta> memit_update(const TransformerWeights& w,
                                    const std::vector<int>& layers,
                                    const std::vector<KvPair>& pairs,
                                    const std::vector<CovarianceEstimate>& covs,
                                    double spread);

// Clamped gradient ascent directly on W_proj at one layer.
EditDelta ft_update(const Model& m, const EditRequest& req, int layer,
                    const FtConfig& ft);

// Pure application; input weights are untouched.
TransformerWeights apply_edit(const TransformerWeights& w,
                              const std::vector<EditDelta>& deltas);

struct EditArtifact {
  std::string request_id;
  std::vector<KeyVector> keys;      // one per edit layer; empty for ft
  std::vector<ValueVector> values;  // one per edit layer; empty for ft
  double logprob_before = 0.0;      // log P(o* | prompt) when processed
  double logprob_after = 0.0;       // same, after this request's write landed
  double delta_frobenius = 0.0;
  std::optional<double> key_cosine_prev_same_subject;
};

struct EditResult {
  TransformerWeights weights;
  std::vector<EditDelta> deltas;
  std::vector<EditArtifact> artifacts;
};

// Orchestrates a whole edit call. Sequential mode applies each request's
// write before computing the next request's keys and values; batch mode
// computes everything against the input model and solves jointly. Traces, if
// requested, come out as one JSON line per request.
EditResult edit(const Model& m, const std::vector<EditRequest>& requests,
                EditMethod method, EditMode mode, const EditorConfig& cfg,
                const std::vector<CovarianceEstimate>* precomputed_covs = nullptr,
                std::ostream* trace = nullptr);

}  // namespace kelab

#endif  // KELAB_EDITORS_HPP_
