#ifndef KELAB_HARNESS_HPP_
#define KELAB_HARNESS_HPP_

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "kelab/benchmark.hpp"
#include "kelab/editors.hpp"
#include "kelab/metrics.hpp"
#include "kelab/model.hpp"

namespace kelab {

// How the edit sequence relates subjects to positions. density-d packs d
// related rewrites per subject in contiguous blocks; homogeneous/heterogeneous
// differ only in whether the last edit revisits the first edit's subject.
enum class Scheme { density, same_subject, different_subject, homogeneous, heterogeneous };

std::string to_string(Scheme s);
Scheme scheme_from(const std::string& s);

struct SchemeConfig {
  Scheme scheme = Scheme::same_subject;
  int n_edits = 2;
  int density = 1;  // density scheme only: related rewrites per subject
  EditMethod method = EditMethod::memit;
  EditMode mode = EditMode::sequential;
  int repetitions = 30;
  std::uint64_t seed = 0;
  bool shuffle_relations = false;  // default keeps benchmark relation order
  EditorConfig editor;
};

struct RepetitionResult {
  int repetition = 0;
  MetricSummary summary;
  std::vector<PositionRow> positions;
  double first_edit_es = 0.0;
  // key_cosine_prev_same_subject per artifact that had one, in edit order
  std::vector<double> key_cosines;
};

struct RunResult {
  SchemeConfig config;
  std::vector<RepetitionResult> repetitions;
  double wall_seconds = 0.0;  // measured, deliberately not serialized

  double mean_s() const;
  double mean_first_edit_es() const;
};

// Draws one edit sequence for the scheme; the (subject, relation) pairs never
// repeat. Infeasible scheme vs benchmark raises SchemeError naming the
// shortfall. Paired schemes (homogeneous/heterogeneous) consume the stream
// identically up to the final edit so arms at equal seeds share everything
// but the controlled difference.
std::vector<EditRequest> build_edit_sequence(const Benchmark& bench,
                                             const SchemeConfig& cfg,
                                             SeededRng& rng);

// Gate on fact recall, then per repetition: clone, build a sequence from the
// repetition-split seed, edit, score every edited rewrite plus held-out
// perplexity. jobs > 1 spreads repetitions over threads; results are
// identical to the serial run. Trace lines, if requested, are emitted in
// repetition order regardless of scheduling.
RunResult run_experiment(const Model& m, const Benchmark& bench,
                         const std::vector<std::string>& heldout,
                         const SchemeConfig& cfg, int jobs = 1,
                         std::ostream* trace = nullptr);

// density d in {1,2,3} at the same n_edits and seed; the shared seed makes
// the arms a paired comparison.
std::vector<RunResult> run_density_sweep(const Model& m, const Benchmark& bench,
                                         const std::vector<std::string>& heldout,
                                         const SchemeConfig& base, int jobs = 1);

struct PairStudy {
  RunResult homogeneous;
  RunResult heterogeneous;
  double first_es_homogeneous = 0.0;   // mean over repetitions
  double first_es_heterogeneous = 0.0;
  double gap = 0.0;  // heterogeneous - homogeneous; positive = interference
};

PairStudy run_pair_study(const Model& m, const Benchmark& bench,
                         const std::vector<std::string>& heldout,
                         const SchemeConfig& base, int jobs = 1);

// Canonical serialized form; save writes exactly these bytes via a temp file
// and rename, load validates and round-trips them.
std::string run_result_json(const RunResult& r);
void save_run_result(const RunResult& r, const std::string& path);
RunResult load_run_result(const std::string& path);

// {scheme}-{method}-{mode}-{n}-{seed}.json; density runs carry the density in
// the scheme tag so sweep arms do not collide.
std::string results_filename(const SchemeConfig& cfg);

// One row per repetition:
// scheme,method,mode,n_edits,density,repetition,ES,PS,NS,PPL,S
void write_runs_csv(std::ostream& out, const std::vector<RunResult>& runs);

struct SdRow {
  std::string method;
  std::string mode;
  int n_edits = 0;
  double s_same = 0.0;
  double s_diff = 0.0;
  double sd = 0.0;
};

// Pairs same_subject/different_subject runs by (method, mode, n_edits); keys
// present in only one arm are skipped.
std::vector<SdRow> sd_table(const std::vector<RunResult>& runs);
void write_sd_csv(std::ostream& out, const std::vector<SdRow>& rows);

}  // namespace kelab

#endif  // KELAB_HARNESS_HPP_
