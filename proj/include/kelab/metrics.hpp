#ifndef KELAB_METRICS_HPP_
#define KELAB_METRICS_HPP_

#include <string>
#include <vector>

#include "kelab/benchmark.hpp"
#include "kelab/model.hpp"

namespace kelab {

enum class EvalKind { efficacy, paraphrase, neighborhood };

std::string to_string(EvalKind k);

// One prompt-level probability comparison. p_want is the probability that
// should win after a successful edit (the new object for efficacy and
// paraphrase, the untouched neighbor's true object for neighborhood);
// p_against is the one it competes with. Ties count as failure.
struct EvalRecord {
  std::string request_id;
  EvalKind kind = EvalKind::efficacy;
  std::string prompt;
  double p_want = 0.0;
  double p_against = 0.0;
  bool success = false;
  int position = 0;  // index of the edit within its sequence
};

std::vector<EvalRecord> success_rate(const Model& m, const BenchmarkRewrite& rw,
                                     EvalKind kind,
                                     const std::string& request_id = "",
                                     int position = 0);

// exp of the token-weighted mean negative log-likelihood; the first token of
// each sentence has no context and is excluded.
double perplexity(const Model& m, const std::vector<std::string>& corpus);

// Harmonic mean of the three rates; 0 if any rate is 0.
double composite_score(double es, double ps, double ns);

double score_difference(double s_same, double s_diff);

// Whether S pools rates first and then takes the harmonic mean, or scores
// each edit separately and averages.
enum class ScoreMode { aggregate_then_harmonic, per_edit_then_mean };

struct MetricSummary {
  double es = 0.0;
  double ps = 0.0;
  double ns = 0.0;
  double ppl = 0.0;
  double s = 0.0;
  int n_efficacy = 0;
  int n_paraphrase = 0;
  int n_neighborhood = 0;
};

MetricSummary aggregate_run(const std::vector<EvalRecord>& records, double ppl,
                            ScoreMode mode = ScoreMode::aggregate_then_harmonic);

struct PositionRow {
  int position = 0;
  MetricSummary summary;
};

// Per-edit-position slices in ascending position order, for first-edit
// analysis in long sequences.
std::vector<PositionRow> per_position(const std::vector<EvalRecord>& records,
                                      double ppl);

}  // namespace kelab

#endif  // KELAB_METRICS_HPP_
