#include "kelab/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>

#include "kelab/errors.hpp"
#include "kelab/linalg.hpp"

namespace kelab {

std::string to_string(EvalKind k) {
  switch (k) {
    case EvalKind::efficacy: return "efficacy";
    case EvalKind::paraphrase: return "paraphrase";
    case EvalKind::neighborhood: return "neighborhood";
  }
  return "?";
}

namespace {

double token_prob(const Model& m, const std::string& prompt, const std::string& token) {
  std::vector<int> ids = m.tokenizer.encode(prompt);
  Vec lp = next_token_logprobs(m.weights, m.config, ids);
  return std::exp(lp(m.tokenizer.id(token)));
}

EvalRecord compare(const Model& m, const std::string& prompt,
                   const std::string& want, const std::string& against,
                   EvalKind kind, const std::string& request_id, int position) {
  EvalRecord rec;
  rec.request_id = request_id;
  rec.kind = kind;
  rec.prompt = prompt;
  std::vector<int> ids = m.tokenizer.encode(prompt);
  Vec lp = next_token_logprobs(m.weights, m.config, ids);
  rec.p_want = std::exp(lp(m.tokenizer.id(want)));
  rec.p_against = std::exp(lp(m.tokenizer.id(against)));
  rec.success = rec.p_want > rec.p_against;
  rec.position = position;
  return rec;
}

}  // namespace

std::vector<EvalRecord> success_rate(const Model& m, const BenchmarkRewrite& rw,
                                     EvalKind kind,
                                     const std::string& request_id,
                                     int position) {
  std::vector<EvalRecord> out;
  switch (kind) {
    case EvalKind::efficacy:
      out.push_back(compare(m, rw.prompt, rw.target_new, rw.target_true, kind,
                            request_id, position));
      break;
    case EvalKind::paraphrase:
      if (rw.paraphrase_prompts.empty())
        throw DataError("success_rate: rewrite has no paraphrase prompts");
      for (const auto& p : rw.paraphrase_prompts)
        out.push_back(compare(m, p, rw.target_new, rw.target_true, kind,
                              request_id, position));
      break;
    case EvalKind::neighborhood:
      if (rw.neighborhood_prompts.empty())
        throw DataError("success_rate: rewrite has no neighborhood prompts");
      for (const auto& np : rw.neighborhood_prompts)
        out.push_back(compare(m, np.prompt, np.target_true, rw.target_new, kind,
                              request_id, position));
      break;
  }
  return out;
}

double perplexity(const Model& m, const std::vector<std::string>& corpus) {
  if (corpus.empty()) throw DataError("perplexity: empty corpus");
  double nll = 0.0;
  long long tokens = 0;
  for (const auto& sentence : corpus) {
    std::vector<int> ids = m.tokenizer.encode(sentence);
    if (ids.size() < 2) continue;
    ForwardResult fr = forward(m.weights, m.config, ids);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      Vec row = fr.logits.row(static_cast<Eigen::Index>(t));
      double lse = log_sum_exp(row);
      nll -= row(ids[t + 1]) - lse;
      ++tokens;
    }
  }
  if (tokens == 0)
    throw DataError("perplexity: corpus has no scorable positions");
  return std::exp(nll / static_cast<double>(tokens));
}

double composite_score(double es, double ps, double ns) {
  if (es < 0.0 || es > 1.0 || ps < 0.0 || ps > 1.0 || ns < 0.0 || ns > 1.0)
    throw DataError("composite_score: rates must lie in [0, 1]");
  if (es == 0.0 || ps == 0.0 || ns == 0.0) return 0.0;
  return 3.0 / (1.0 / es + 1.0 / ps + 1.0 / ns);
}

double score_difference(double s_same, double s_diff) {
  return s_same - s_diff;
}

namespace {

MetricSummary summarize(const std::vector<const EvalRecord*>& records,
                        double ppl, ScoreMode mode) {
  MetricSummary s;
  s.ppl = ppl;
  long long ok[3] = {0, 0, 0};
  long long n[3] = {0, 0, 0};
  for (const EvalRecord* r : records) {
    auto k = static_cast<int>(r->kind);
    n[k] += 1;
    if (r->success) ok[k] += 1;
  }
  s.n_efficacy = static_cast<int>(n[0]);
  s.n_paraphrase = static_cast<int>(n[1]);
  s.n_neighborhood = static_cast<int>(n[2]);
  s.es = n[0] ? static_cast<double>(ok[0]) / n[0] : 0.0;
  s.ps = n[1] ? static_cast<double>(ok[1]) / n[1] : 0.0;
  s.ns = n[2] ? static_cast<double>(ok[2]) / n[2] : 0.0;
  if (mode == ScoreMode::aggregate_then_harmonic) {
    s.s = composite_score(s.es, s.ps, s.ns);
  } else {
    // Score each request on its own, then average the per-request scores.
    std::map<std::string, std::array<std::pair<long long, long long>, 3>> by_req;
    for (const EvalRecord* r : records) {
      auto& cell = by_req[r->request_id][static_cast<std::size_t>(r->kind)];
      cell.second += 1;
      if (r->success) cell.first += 1;
    }
    double total = 0.0;
    for (const auto& [id, cells] : by_req) {
      double rates[3];
      for (int k = 0; k < 3; ++k)
        rates[k] = cells[static_cast<std::size_t>(k)].second
                       ? static_cast<double>(cells[static_cast<std::size_t>(k)].first) /
                             cells[static_cast<std::size_t>(k)].second
                       : 0.0;
      total += composite_score(rates[0], rates[1], rates[2]);
    }
    s.s = by_req.empty() ? 0.0 : total / static_cast<double>(by_req.size());
  }
  return s;
}

}  // namespace

MetricSummary aggregate_run(const std::vector<EvalRecord>& records, double ppl,
                            ScoreMode mode) {
  std::vector<const EvalRecord*> ptrs;
  ptrs.reserve(records.size());
  for (const auto& r : records) ptrs.push_back(&r);
  return summarize(ptrs, ppl, mode);
}

std::vector<PositionRow> per_position(const std::vector<EvalRecord>& records,
                                      double ppl) {
  std::map<int, std::vector<const EvalRecord*>> groups;
  for (const auto& r : records) groups[r.position].push_back(&r);
  std::vector<PositionRow> out;
  for (const auto& [pos, ptrs] : groups) {
    PositionRow row;
    row.position = pos;
    row.summary = summarize(ptrs, ppl, ScoreMode::aggregate_then_harmonic);
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace kelab
