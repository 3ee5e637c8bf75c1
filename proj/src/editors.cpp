#include "kelab/editors.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include "json.hpp"

#include "kelab/errors.hpp"
#include "kelab/linalg.hpp"

namespace kelab {

using ordered_json = nlohmann::ordered_json;

std::string to_string(EditMethod m) {
  switch (m) {
    case EditMethod::rome: return "rome";
    case EditMethod::memit: return "memit";
    case EditMethod::ft: return "ft";
  }
  return "?";
}

std::string to_string(EditMode m) {
  return m == EditMode::sequential ? "sequential" : "batch";
}

EditMethod edit_method_from(const std::string& s) {
  if (s == "rome") return EditMethod::rome;
  if (s == "memit") return EditMethod::memit;
  if (s == "ft") return EditMethod::ft;
  throw ConfigError("unknown edit method '" + s + "'");
}

EditMode edit_mode_from(const std::string& s) {
  if (s == "sequential") return EditMode::sequential;
  if (s == "batch") return EditMode::batch;
  throw ConfigError("unknown edit mode '" + s + "'");
}

namespace {

// Last position of the subject's final token inside the prompt.
int subject_last_position(const Tokenizer& tok, const std::string& prompt,
                          const std::string& subject,
                          std::vector<int>* prompt_ids_out = nullptr) {
  std::vector<int> prompt_ids = tok.encode(prompt);
  std::vector<int> subj_ids = tok.encode(subject);
  if (subj_ids.empty())
    throw TemplateError("subject '" + subject + "' is empty");
  int found = -1;
  for (std::size_t i = 0; i + subj_ids.size() <= prompt_ids.size(); ++i) {
    bool hit = true;
    for (std::size_t j = 0; j < subj_ids.size(); ++j) {
      if (prompt_ids[i + j] != subj_ids[j]) {
        hit = false;
        break;
      }
    }
    if (hit) found = static_cast<int>(i + subj_ids.size()) - 1;
  }
  if (found < 0)
    throw TemplateError("subject '" + subject + "' does not occur in prompt '" +
                        prompt + "'");
  if (prompt_ids_out) *prompt_ids_out = std::move(prompt_ids);
  return found;
}

Mat pseudo_inverse_spd(const Mat& g) {
  Eigen::SelfAdjointEigenSolver<Mat> es(g);
  if (es.info() != Eigen::Success)
    throw SingularityError("eigendecomposition of the key Gram matrix failed");
  Vec evals = es.eigenvalues();
  const double lam_max = evals.maxCoeff();
  const double tol = std::max(1e-10 * std::max(lam_max, 0.0), 1e-300);
  Vec inv = Vec::Zero(evals.size());
  for (Eigen::Index i = 0; i < evals.size(); ++i)
    if (evals(i) > tol) inv(i) = 1.0 / evals(i);
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

void check_layer_index(int layer, const ModelConfig& cfg, const char* who) {
  if (layer < 0 || layer >= cfg.n_layers)
    throw ConfigError(std::string(who) + ": layer " + std::to_string(layer) +
                      " out of range for a " + std::to_string(cfg.n_layers) +
                      "-layer model");
}

}  // namespace

std::vector<std::vector<int>> sample_prefixes(const TransformerWeights& w,
                                              const ModelConfig& cfg, int n,
                                              int max_len, SeededRng& rng) {
  if (n < 1) throw ConfigError("sample_prefixes: need at least one prefix");
  if (max_len < 0) throw ConfigError("sample_prefixes: negative max_len");
  std::vector<std::vector<int>> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    int len = max_len == 0
                  ? 0
                  : static_cast<int>(rng.uniform_int(
                        static_cast<std::uint64_t>(max_len) + 1));
    out.push_back(sample_sequence(w, cfg, len, rng));
  }
  return out;
}

KeyVector compute_key(const Model& m, const EditRequest& req, int layer,
                      const std::vector<std::vector<int>>& prefixes) {
  check_layer_index(layer, m.config, "compute_key");
  if (prefixes.empty()) throw ConfigError("compute_key: no prefixes");
  std::vector<int> prompt_ids;
  int subj_pos = subject_last_position(m.tokenizer, req.prompt, req.subject,
                                       &prompt_ids);
  Vec sum = Vec::Zero(m.config.d_mlp);
  for (const auto& prefix : prefixes) {
    std::vector<int> ids = prefix;
    ids.insert(ids.end(), prompt_ids.begin(), prompt_ids.end());
    CapturePoint point{layer, static_cast<int>(prefix.size()) + subj_pos,
                       CaptureSite::mlp_inner};
    ForwardOptions opts;
    opts.captures = {point};
    ForwardResult fr = forward(m.weights, m.config, ids, opts);
    sum += fr.captured.at(point);
  }
  KeyVector key;
  key.layer = layer;
  key.vector = sum / static_cast<double>(prefixes.size());
  key.prefix_count = static_cast<int>(prefixes.size());
  key.subject = req.subject;
  key.prompt_hash = std::hash<std::string>{}(req.prompt);
  if (!key.vector.allFinite())
    throw DataError("compute_key: non-finite key for request " + req.id);
  return key;
}

CovarianceEstimate estimate_covariance(
    const Model& m, int layer, const std::vector<std::vector<int>>& probe_corpus,
    double lambda_scale) {
  check_layer_index(layer, m.config, "estimate_covariance");
  if (probe_corpus.empty())
    throw DataError("estimate_covariance: empty probe corpus");
  if (lambda_scale < 0.0)
    throw ConfigError("estimate_covariance: negative ridge scale");
  const int d = m.config.d_mlp;
  Mat c = Mat::Zero(d, d);
  long long samples = 0;
  for (const auto& seq : probe_corpus) {
    if (seq.empty()) continue;
    ForwardOptions opts;
    for (std::size_t t = 0; t < seq.size(); ++t)
      opts.captures.push_back({layer, static_cast<int>(t), CaptureSite::mlp_inner});
    ForwardResult fr = forward(m.weights, m.config, seq, opts);
    for (const auto& point : opts.captures) {
      const Vec& k = fr.captured.at(point);
      c.noalias() += k * k.transpose();
      ++samples;
    }
  }
  if (samples == 0)
    throw DataError("estimate_covariance: probe corpus has no tokens");
  c /= static_cast<double>(samples);
  CovarianceEstimate est;
  est.layer = layer;
  est.samples = samples;
  est.lambda = lambda_scale * c.trace() / static_cast<double>(d);
  est.matrix = c + est.lambda * Mat::Identity(d, d);
  return est;
}

std::vector<CovarianceEstimate> estimate_covariances(const Model& m,
                                                     const EditorConfig& cfg) {
  SeededRng probe_rng(cfg.covariance.seed);
  std::vector<std::vector<int>> probes;
  probes.reserve(static_cast<std::size_t>(cfg.covariance.probes));
  for (int i = 0; i < cfg.covariance.probes; ++i)
    probes.push_back(sample_sequence(m.weights, m.config,
                                     cfg.covariance.probe_len, probe_rng));
  std::vector<CovarianceEstimate> covs;
  covs.reserve(cfg.layers.size());
  for (int l : cfg.layers)
    covs.push_back(estimate_covariance(m, l, probes, cfg.covariance.lambda_scale));
  return covs;
}

ValueVector compute_target_value(const Model& m, const EditRequest& req,
                                 int layer, const ValueOptConfig& opt) {
  check_layer_index(layer, m.config, "compute_target_value");
  if (opt.max_steps < 0) throw ConfigError("compute_target_value: negative steps");
  std::vector<int> prompt_ids;
  int subj_pos = subject_last_position(m.tokenizer, req.prompt, req.subject,
                                       &prompt_ids);
  const int target = m.tokenizer.id(req.target_new);
  const CapturePoint point{layer, subj_pos, CaptureSite::mlp_out};
  const auto t = static_cast<Eigen::Index>(prompt_ids.size());

  Vec delta = Vec::Zero(m.config.d_model);
  Vec v0;
  double logp = 0.0;
  int steps = 0;

  auto evaluate = [&](bool first) -> std::shared_ptr<ActivationCache> {
    ForwardOptions opts;
    opts.keep_activations = true;
    opts.injections = {{point, delta}};
    if (first) opts.captures = {point};
    ForwardResult fr = forward(m.weights, m.config, prompt_ids, opts);
    if (first) v0 = fr.captured.at(point) - delta;
    Vec row = fr.logits.row(t - 1).transpose();
    logp = row(target) - log_sum_exp(row);
    if (!std::isfinite(logp))
      throw OptimizationError("compute_target_value: non-finite objective at step " +
                              std::to_string(steps));
    return fr.acts;
  };

  auto acts = evaluate(true);
  while (std::exp(logp) < opt.target_prob && steps < opt.max_steps) {
    // Ascent direction for log P(target): one-hot minus softmax at the last row.
    Vec row = acts->logits.row(t - 1).transpose();
    Vec soft = softmax(row);
    Mat d_logits = Mat::Zero(t, m.config.vocab_size);
    d_logits.row(t - 1) = -soft.transpose();
    d_logits(t - 1, target) += 1.0;
    BackwardRequest breq;
    breq.d_logits = std::move(d_logits);
    breq.want_weight_grads = false;
    breq.grad_points = {point};
    BackwardResult br = backward(m.weights, m.config, *acts, std::move(breq));
    delta += opt.lr * br.point_grads.at(point);
    if (!delta.allFinite())
      throw OptimizationError("compute_target_value: non-finite delta at step " +
                              std::to_string(steps));
    ++steps;
    acts = evaluate(false);
  }

  ValueVector value;
  value.layer = layer;
  value.vector = v0 + delta;
  value.achieved_logprob = logp;
  value.steps_used = steps;
  return value;
}

EditDelta rome_update(const Mat& w_proj, const KeyVector& key,
                      const ValueVector& value, const CovarianceEstimate& cov) {
  if (key.vector.size() != w_proj.cols() || value.vector.size() != w_proj.rows())
    throw ShapeError("rome_update: key/value dimensions do not match W_proj");
  if (cov.matrix.rows() != w_proj.cols() || cov.matrix.cols() != w_proj.cols())
    throw ShapeError("rome_update: covariance dimension mismatch");
  Eigen::LLT<Mat> llt(cov.matrix);
  if (llt.info() != Eigen::Success)
    throw SingularityError(
        "rome_update: covariance is not positive definite; raise the ridge lambda");
  Vec z = llt.solve(key.vector);
  const double denom = z.dot(key.vector);
  if (!(denom > 1e-12))
    throw DegenerateKeyError("rome_update: (C^-1 k)^T k = " +
                             std::to_string(denom) + "; key is degenerate");
  Vec r = value.vector - w_proj * key.vector;
  EditDelta delta;
  delta.by_layer[key.layer] = (r * z.transpose()) / denom;
  delta.method = "rome";
  return delta;
}

std::vector<EditDelta> memit_update(const TransformerWeights& w,
                                    const std::vector<int>& layers,
                                    const std::vector<KvPair>& pairs,
                                    const std::vector<CovarianceEstimate>& covs,
                                    double spread) {
  if (layers.empty()) throw ConfigError("memit_update: no layers");
  if (!std::is_sorted(layers.begin(), layers.end()) ||
      std::adjacent_find(layers.begin(), layers.end()) != layers.end())
    throw ConfigError("memit_update: layers must be strictly ascending");
  if (pairs.empty()) throw ConfigError("memit_update: no requests");
  if (!(spread > 0.0) || spread > 1.0)
    throw ConfigError("memit_update: spread must lie in (0, 1]");
  const auto m_layers = layers.size();
  for (const auto& p : pairs)
    if (p.keys.size() != m_layers || p.values.size() != m_layers)
      throw ShapeError("memit_update: request " + p.request_id +
                       " carries keys/values for the wrong number of layers");

  std::vector<EditDelta> out;
  const auto n = static_cast<Eigen::Index>(pairs.size());
  for (std::size_t li = 0; li < m_layers; ++li) {
    const int layer = layers[li];
    if (layer < 0 || layer >= static_cast<int>(w.layers.size()))
      throw ConfigError("memit_update: layer out of range");
    const Mat& w_proj = w.layers[static_cast<std::size_t>(layer)].w_proj;

    const CovarianceEstimate* cov = nullptr;
    for (const auto& c : covs)
      if (c.layer == layer) cov = &c;
    if (!cov) throw ConfigError("memit_update: no covariance for layer " +
                                std::to_string(layer));

    Mat k_mat(w_proj.cols(), n);
    Mat v_mat(w_proj.rows(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const KeyVector& key = pairs[static_cast<std::size_t>(i)].keys[li];
      const ValueVector& value = pairs[static_cast<std::size_t>(i)].values[li];
      if (key.layer != layer || value.layer != layer)
        throw ShapeError("memit_update: key/value layer tag mismatch");
      if (key.vector.size() != w_proj.cols() ||
          value.vector.size() != w_proj.rows())
        throw ShapeError("memit_update: key/value dimension mismatch");
      k_mat.col(i) = key.vector;
      v_mat.col(i) = value.vector;
    }

    const double factor = spread / static_cast<double>(m_layers - li);
    Mat residual = (v_mat - w_proj * k_mat) * factor;

    Eigen::LLT<Mat> llt(cov->matrix);
    if (llt.info() != Eigen::Success)
      throw SingularityError(
          "memit_update: covariance is not positive definite; raise the ridge lambda");
    Mat z = llt.solve(k_mat);               // C^-1 K
    Mat gram = k_mat.transpose() * z;       // K^T C^-1 K
    gram = ((gram + gram.transpose()) * 0.5).eval();
    Mat gram_pinv = pseudo_inverse_spd(gram);

    EditDelta delta;
    delta.method = "memit";
    for (const auto& p : pairs) delta.request_ids.push_back(p.request_id);
    delta.by_layer[layer] = residual * gram_pinv * z.transpose();
    if (!delta.by_layer[layer].allFinite())
      throw SingularityError("memit_update: non-finite delta at layer " +
                             std::to_string(layer));
    out.push_back(std::move(delta));
  }
  return out;
}

EditDelta ft_update(const Model& m, const EditRequest& req, int layer,
                    const FtConfig& ft) {
  check_layer_index(layer, m.config, "ft_update");
  if (ft.steps < 0) throw ConfigError("ft_update: negative steps");
  if (ft.norm_bound < 0.0) throw ConfigError("ft_update: negative norm bound");
  std::vector<int> prompt_ids = m.tokenizer.encode(req.prompt);
  const int target = m.tokenizer.id(req.target_new);
  const auto t = static_cast<Eigen::Index>(prompt_ids.size());

  TransformerWeights work = m.weights;
  Mat& w_proj = work.layers[static_cast<std::size_t>(layer)].w_proj;
  const Mat original = w_proj;
  Mat delta = Mat::Zero(w_proj.rows(), w_proj.cols());

  for (int step = 0; step < ft.steps; ++step) {
    ForwardOptions opts;
    opts.keep_activations = true;
    ForwardResult fr = forward(work, m.config, prompt_ids, opts);
    Vec row = fr.logits.row(t - 1).transpose();
    double logp = row(target) - log_sum_exp(row);
    if (!std::isfinite(logp))
      throw OptimizationError("ft_update: non-finite objective at step " +
                              std::to_string(step));
    Vec soft = softmax(row);
    Mat d_logits = Mat::Zero(t, m.config.vocab_size);
    d_logits.row(t - 1) = -soft.transpose();
    d_logits(t - 1, target) += 1.0;
    BackwardRequest breq;
    breq.d_logits = std::move(d_logits);
    breq.want_weight_grads = true;
    BackwardResult br = backward(work, m.config, *fr.acts, std::move(breq));
    delta += ft.lr * br.wgrads->layers[static_cast<std::size_t>(layer)].w_proj;
    delta = delta.cwiseMax(-ft.norm_bound).cwiseMin(ft.norm_bound);
    if (!delta.allFinite())
      throw OptimizationError("ft_update: non-finite delta at step " +
                              std::to_string(step));
    w_proj = original + delta;
  }

  EditDelta out;
  out.by_layer[layer] = std::move(delta);
  out.method = "ft";
  out.request_ids.push_back(req.id);
  return out;
}

TransformerWeights apply_edit(const TransformerWeights& w,
                              const std::vector<EditDelta>& deltas) {
  TransformerWeights out = w;
  for (const auto& delta : deltas) {
    for (const auto& [layer, d] : delta.by_layer) {
      if (layer < 0 || layer >= static_cast<int>(out.layers.size()))
        throw ShapeError("apply_edit: layer out of range");
      Mat& w_proj = out.layers[static_cast<std::size_t>(layer)].w_proj;
      if (d.rows() != w_proj.rows() || d.cols() != w_proj.cols())
        throw ShapeError("apply_edit: delta shape mismatch at layer " +
                         std::to_string(layer));
      if (!d.allFinite())
        throw DataError("apply_edit: non-finite delta at layer " +
                        std::to_string(layer));
      w_proj += d;
    }
  }
  return out;
}

namespace {

double deltas_frobenius(const std::vector<EditDelta>& deltas) {
  double sq = 0.0;
  for (const auto& delta : deltas)
    for (const auto& [layer, d] : delta.by_layer) sq += d.squaredNorm();
  return std::sqrt(sq);
}

void emit_trace(std::ostream* trace, const EditArtifact& art, EditMethod method,
                EditMode mode, const std::vector<int>& layers) {
  if (!trace) return;
  ordered_json line;
  line["request_id"] = art.request_id;
  line["method"] = to_string(method);
  line["mode"] = to_string(mode);
  line["layers"] = layers;
  if (art.keys.empty())
    line["key_norm"] = nullptr;
  else
    line["key_norm"] = art.keys.front().vector.norm();
  line["value_logprob_before"] = art.logprob_before;
  line["value_logprob_after"] = art.logprob_after;
  line["delta_frobenius"] = art.delta_frobenius;
  if (art.key_cosine_prev_same_subject)
    line["key_cosine_vs_previous_same_subject"] = *art.key_cosine_prev_same_subject;
  else
    line["key_cosine_vs_previous_same_subject"] = nullptr;
  *trace << line.dump() << "\n";
}

void validate_request(const Model& m, const EditRequest& req) {
  if (req.target_true == req.target_new)
    throw DataError("edit request " + req.id +
                    ": target_new equals target_true");
  if (!m.tokenizer.contains(req.target_new))
    throw DataError("edit request " + req.id + ": target_new '" +
                    req.target_new + "' not in vocabulary");
  if (!m.tokenizer.contains(req.target_true))
    throw DataError("edit request " + req.id + ": target_true '" +
                    req.target_true + "' not in vocabulary");
  m.tokenizer.encode(req.prompt);  // throws on unknown tokens
  subject_last_position(m.tokenizer, req.prompt, req.subject);
}

}  // namespace

EditResult edit(const Model& m, const std::vector<EditRequest>& requests,
                EditMethod method, EditMode mode, const EditorConfig& cfg,
                const std::vector<CovarianceEstimate>* precomputed_covs,
                std::ostream* trace) {
  if (method == EditMethod::rome && mode == EditMode::batch)
    throw ModeError("rome edits one fact per solve; batch mode unsupported");
  if (cfg.layers.empty()) throw ConfigError("edit: no edit layers configured");
  if (!std::is_sorted(cfg.layers.begin(), cfg.layers.end()) ||
      std::adjacent_find(cfg.layers.begin(), cfg.layers.end()) != cfg.layers.end())
    throw ConfigError("edit: layers must be strictly ascending");
  for (int l : cfg.layers) check_layer_index(l, m.config, "edit");
  for (const auto& req : requests) validate_request(m, req);

  EditResult out;
  out.weights = m.weights;
  if (requests.empty()) return out;

  // Covariances come from the pre-edit model, once per call, unless the
  // caller already has them (repetition loops reuse the same estimate).
  std::vector<CovarianceEstimate> covs;
  const bool needs_cov = method != EditMethod::ft;
  if (needs_cov) {
    if (precomputed_covs) {
      covs = *precomputed_covs;
      for (int l : cfg.layers) {
        bool found = false;
        for (const auto& c : covs)
          if (c.layer == l && c.matrix.rows() == m.config.d_mlp) found = true;
        if (!found)
          throw ConfigError("edit: precomputed covariance missing for layer " +
                            std::to_string(l));
      }
    } else {
      covs = estimate_covariances(m, cfg);
    }
  }

  std::vector<std::vector<int>> shared_prefixes;
  if (cfg.prefixes.mode == PrefixMode::shared) {
    SeededRng prefix_rng(cfg.prefixes.seed);
    shared_prefixes = sample_prefixes(m.weights, m.config, cfg.prefixes.count,
                                      cfg.prefixes.max_len, prefix_rng);
  }

  Model cur = m;
  std::map<std::string, Vec> last_key_of_subject;

  auto request_prefixes = [&](const Model& against, std::size_t qi) {
    if (cfg.prefixes.mode == PrefixMode::shared) return shared_prefixes;
    SeededRng rng = SeededRng(cfg.prefixes.seed).split(qi + 1);
    return sample_prefixes(against.weights, against.config, cfg.prefixes.count,
                           cfg.prefixes.max_len, rng);
  };

  auto note_cosine = [&](EditArtifact& art) {
    if (art.keys.empty()) return;
    const Vec& k = art.keys.front().vector;
    auto prev = last_key_of_subject.find(art.keys.front().subject);
    if (prev != last_key_of_subject.end())
      art.key_cosine_prev_same_subject = cosine_similarity(k, prev->second);
    last_key_of_subject[art.keys.front().subject] = k;
  };

  auto prompt_logprob = [&](const Model& model, const EditRequest& req) {
    return next_token_logprob(model.weights, model.config,
                              model.tokenizer.encode(req.prompt),
                              model.tokenizer.id(req.target_new));
  };

  if (method == EditMethod::ft) {
    const int layer = cfg.layers.front();
    if (mode == EditMode::sequential) {
      for (std::size_t qi = 0; qi < requests.size(); ++qi) {
        const EditRequest& req = requests[qi];
        EditArtifact art;
        art.request_id = req.id;
        art.logprob_before = prompt_logprob(cur, req);
        EditDelta delta = ft_update(cur, req, layer, cfg.ft);
        cur.weights = apply_edit(cur.weights, {delta});
        art.logprob_after = prompt_logprob(cur, req);
        art.delta_frobenius = deltas_frobenius({delta});
        out.deltas.push_back(std::move(delta));
        emit_trace(trace, art, method, mode, {layer});
        out.artifacts.push_back(std::move(art));
      }
    } else {
      // Joint ascent on the mean objective over all requests.
      std::vector<std::vector<int>> ids;
      std::vector<int> targets;
      for (const auto& req : requests) {
        ids.push_back(m.tokenizer.encode(req.prompt));
        targets.push_back(m.tokenizer.id(req.target_new));
      }
      TransformerWeights work = m.weights;
      Mat& w_proj = work.layers[static_cast<std::size_t>(layer)].w_proj;
      const Mat original = w_proj;
      Mat delta_mat = Mat::Zero(w_proj.rows(), w_proj.cols());
      for (int step = 0; step < cfg.ft.steps; ++step) {
        Mat grad = Mat::Zero(w_proj.rows(), w_proj.cols());
        for (std::size_t qi = 0; qi < requests.size(); ++qi) {
          const auto t = static_cast<Eigen::Index>(ids[qi].size());
          ForwardOptions opts;
          opts.keep_activations = true;
          ForwardResult fr = forward(work, m.config, ids[qi], opts);
          Vec row = fr.logits.row(t - 1).transpose();
          if (!std::isfinite(row(targets[qi]) - log_sum_exp(row)))
            throw OptimizationError("ft joint edit: non-finite objective at step " +
                                    std::to_string(step));
          Vec soft = softmax(row);
          Mat d_logits = Mat::Zero(t, m.config.vocab_size);
          d_logits.row(t - 1) = -soft.transpose();
          d_logits(t - 1, targets[qi]) += 1.0;
          BackwardRequest breq;
          breq.d_logits = std::move(d_logits);
          breq.want_weight_grads = true;
          BackwardResult br = backward(work, m.config, *fr.acts, std::move(breq));
          grad += br.wgrads->layers[static_cast<std::size_t>(layer)].w_proj;
        }
        delta_mat += (cfg.ft.lr / static_cast<double>(requests.size())) * grad;
        delta_mat =
            delta_mat.cwiseMax(-cfg.ft.norm_bound).cwiseMin(cfg.ft.norm_bound);
        w_proj = original + delta_mat;
      }
      EditDelta delta;
      delta.by_layer[layer] = delta_mat;
      delta.method = "ft";
      for (const auto& req : requests) delta.request_ids.push_back(req.id);
      cur.weights = apply_edit(m.weights, {delta});
      double frob = deltas_frobenius({delta});
      for (const auto& req : requests) {
        EditArtifact art;
        art.request_id = req.id;
        art.logprob_before = prompt_logprob(m, req);
        art.logprob_after = prompt_logprob(cur, req);
        art.delta_frobenius = frob;
        emit_trace(trace, art, method, mode, {layer});
        out.artifacts.push_back(std::move(art));
      }
      out.deltas.push_back(std::move(delta));
    }
    out.weights = cur.weights;
    return out;
  }

  // rome / memit
  if (mode == EditMode::sequential) {
    for (std::size_t qi = 0; qi < requests.size(); ++qi) {
      const EditRequest& req = requests[qi];
      auto prefixes = request_prefixes(cur, qi);
      EditArtifact art;
      art.request_id = req.id;
      art.logprob_before = prompt_logprob(cur, req);

      std::vector<int> used_layers;
      std::vector<EditDelta> deltas;
      if (method == EditMethod::rome) {
        const int layer = cfg.layers.front();
        const CovarianceEstimate* cov = nullptr;
        for (const auto& c : covs)
          if (c.layer == layer) cov = &c;
        if (!cov)
          throw ConfigError("edit: no covariance for layer " +
                            std::to_string(layer));
        art.keys.push_back(compute_key(cur, req, layer, prefixes));
        art.values.push_back(compute_target_value(cur, req, layer, cfg.value_opt));
        EditDelta delta = rome_update(
            cur.weights.layers[static_cast<std::size_t>(layer)].w_proj,
            art.keys.back(), art.values.back(), *cov);
        delta.request_ids.push_back(req.id);
        deltas.push_back(std::move(delta));
        used_layers = {layer};
      } else {
        KvPair pair;
        pair.request_id = req.id;
        for (int layer : cfg.layers) {
          pair.keys.push_back(compute_key(cur, req, layer, prefixes));
          pair.values.push_back(
              compute_target_value(cur, req, layer, cfg.value_opt));
        }
        art.keys = pair.keys;
        art.values = pair.values;
        deltas = memit_update(cur.weights, cfg.layers, {pair}, covs, cfg.spread);
        used_layers = cfg.layers;
      }
      cur.weights = apply_edit(cur.weights, deltas);
      art.logprob_after = prompt_logprob(cur, req);
      art.delta_frobenius = deltas_frobenius(deltas);
      note_cosine(art);
      for (auto& d : deltas) out.deltas.push_back(std::move(d));
      emit_trace(trace, art, method, mode, used_layers);
      out.artifacts.push_back(std::move(art));
    }
  } else {
    // memit batch: everything measured against the pre-edit model.
    std::vector<KvPair> pairs;
    for (std::size_t qi = 0; qi < requests.size(); ++qi) {
      const EditRequest& req = requests[qi];
      auto prefixes = request_prefixes(m, qi);
      KvPair pair;
      pair.request_id = req.id;
      for (int layer : cfg.layers) {
        pair.keys.push_back(compute_key(m, req, layer, prefixes));
        pair.values.push_back(compute_target_value(m, req, layer, cfg.value_opt));
      }
      pairs.push_back(std::move(pair));
    }
    std::vector<EditDelta> deltas =
        memit_update(m.weights, cfg.layers, pairs, covs, cfg.spread);
    cur.weights = apply_edit(m.weights, deltas);
    double frob = deltas_frobenius(deltas);
    for (std::size_t qi = 0; qi < requests.size(); ++qi) {
      const EditRequest& req = requests[qi];
      EditArtifact art;
      art.request_id = req.id;
      art.keys = pairs[qi].keys;
      art.values = pairs[qi].values;
      art.logprob_before = prompt_logprob(m, req);
      art.logprob_after = prompt_logprob(cur, req);
      art.delta_frobenius = frob;
      note_cosine(art);
      emit_trace(trace, art, method, mode, cfg.layers);
      out.artifacts.push_back(std::move(art));
    }
    for (auto& d : deltas) out.deltas.push_back(std::move(d));
  }

  out.weights = cur.weights;
  return out;
}

}  // namespace kelab
