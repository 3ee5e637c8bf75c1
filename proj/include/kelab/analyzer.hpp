#ifndef KELAB_ANALYZER_HPP_
#define KELAB_ANALYZER_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "kelab/benchmark.hpp"
#include "kelab/editors.hpp"
#include "kelab/model.hpp"

namespace kelab {

enum class Arrangement { same, different };

std::string to_string(Arrangement a);
Arrangement arrangement_from(const std::string& s);

// One repetition of one two-edit pair: the key cosine between the two
// requests and whether the first edit still holds after both landed.
struct PairStudyPoint {
  int pair = 0;  // index within its arm
  Arrangement arrangement = Arrangement::same;
  EditMode mode = EditMode::sequential;
  int repetition = 0;
  std::uint64_t seed = 0;  // prefix stream used for this repetition
  double cosine = 0.0;     // at the lowest edit layer
  std::vector<double> cosine_by_layer;  // one per edit layer when requested
  double first_edit_es = 0.0;           // 0 or 1; reports average over reps
};

struct PairStudySpec {
  int pairs = 100;  // per arm; arms are balanced
  EditMethod method = EditMethod::memit;
  EditMode mode = EditMode::sequential;
  int repetitions = 3;
  std::uint64_t seed = 0;
  bool per_layer_cosines = false;
  EditorConfig editor;
};

// Edits two rewrites per pair (same-subject arm and different-subject arm,
// spec.pairs of each), records the key cosine and the first edit's efficacy
// after both writes. The input model is cloned per point and never mutated.
std::vector<PairStudyPoint> key_similarity_study(const Model& m,
                                                 const Benchmark& bench,
                                                 const PairStudySpec& spec,
                                                 int jobs = 1);

struct CorrelationBucket {
  double lo = 0.0;  // value range covered, inclusive on both ends
  double hi = 0.0;
  double mean_first_edit_es = 0.0;
  int n = 0;
};

struct CorrelationReport {
  std::vector<CorrelationBucket> buckets;  // at most 10, ascending
  // Spearman over (cosine, first_edit_es) with average ranks for ties;
  // empty when either variable is constant, which is not the same as 0.
  std::optional<double> rank_correlation;
  int points = 0;
  double mean_cosine_same = 0.0;
  double mean_cosine_different = 0.0;
  double mean_es_same = 0.0;
  double mean_es_different = 0.0;
};

// Decile buckets over the empirical cosine distribution. Bucket membership
// is decided by value, so duplicate cosines always share a bucket and the
// report is invariant to input order.
CorrelationReport correlation_report(const std::vector<PairStudyPoint>& points);

// Plot table: one "# rank_correlation ..." comment line, then a header and
// rows with columns cosine_bucket, mean_first_edit_es, n.
std::string correlation_tsv(const CorrelationReport& report);

// Raw points as JSON, stable field order; round-trips exactly.
std::string points_json(const std::vector<PairStudyPoint>& points);
void save_points(const std::vector<PairStudyPoint>& points,
                 const std::string& path);
std::vector<PairStudyPoint> load_points(const std::string& path);

}  // namespace kelab

#endif  // KELAB_ANALYZER_HPP_
