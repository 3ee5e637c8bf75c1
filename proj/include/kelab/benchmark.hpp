#ifndef KELAB_BENCHMARK_HPP_
#define KELAB_BENCHMARK_HPP_

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace kelab {

// Prompt templates for one relation. Cloze templates are subject-initial and
// end immediately before the object slot, so two prompts about the same
// subject agree token-for-token up to and including the subject. That makes
// same-subject keys under shared prefixes literally identical downstream.
struct RelationTemplate {
  std::string relation;  // single-token relation word
  std::array<std::string, 3> cloze;
  std::string paraphrase;
  std::string neighborhood;
  std::string pool;  // object range pool name

  std::string instantiate(int variant, const std::string& subject) const;
  std::string instantiate_paraphrase(const std::string& subject) const;
  std::string instantiate_neighborhood(const std::string& subject) const;
};

struct NeighborhoodPrompt {
  std::string prompt;
  std::string target_true;
};

struct BenchmarkRewrite {
  std::string relation;
  std::string prompt;
  std::string target_true;
  std::string target_new;
  std::vector<std::string> paraphrase_prompts;          // exactly 1
  std::vector<NeighborhoodPrompt> neighborhood_prompts; // exactly 2
};

struct BenchmarkRecord {
  std::string subject;
  std::string category;
  std::vector<BenchmarkRewrite> rewrites;
};

struct CategorySpec {
  std::string name;
  double weight;         // relative share of subjects
  double avg_rewrites;   // target mean rewrites in this category
  int n_relations;       // size of the category's relation pool
};

struct GenConfig {
  int n_subjects = 64;
  int n_relations = 43;
  int min_rewrites = 3;
  int max_rewrites = 13;
  double avg_rewrites = 4.9;
  std::vector<CategorySpec> categories;  // empty = default mix
  std::uint64_t seed = 0;
  int heldout_sentences = 500;
  // Write every subject-role name as its three CV syllables ("vasoke" ->
  // "va so ke"). Subjects then span several positions, which forces a
  // trained model to read them through attention instead of a single raw
  // embedding; editing keys live at the last sub-token.
  bool split_subject_syllables = false;
  // Extra training sentences made by joining two corpus sentences, so
  // subjects are also seen away from position zero. 0 disables.
  int corpus_concat_pairs = 0;
};

struct Benchmark {
  int version = 1;
  std::uint64_t seed = 0;
  std::optional<GenConfig> config;  // echoed when generated here
  std::vector<BenchmarkRecord> records;
};

struct Violation {
  std::string path;  // e.g. records[3].rewrites[1]
  std::string rule;
  std::string message;
};

struct CategoryStats {
  std::string name;
  int subjects = 0;
  int relations = 0;
  int rewrites = 0;
  double avg = 0.0;
};

struct BenchmarkStats {
  int records = 0;   // total rewrites
  int subjects = 0;
  int relations = 0; // distinct relations in use
  int max_rewrites = 0;
  int min_rewrites = 0;
  double avg_rewrites = 0.0;
  std::vector<CategoryStats> per_category;
};

// A benchmark plus everything needed to create a model that knows its facts:
// the closed vocabulary, training sentences, a held-out perplexity corpus,
// and the full (prompt, object) fact list including neighbor support facts.
struct World {
  Benchmark benchmark;
  std::vector<std::string> vocabulary;
  std::vector<std::string> corpus;
  std::vector<std::string> heldout;
  std::vector<std::pair<std::string, std::string>> facts;
};

// Table-shaped defaults: six categories with Person carrying the densest
// rewrite load, relation pools sized 29/7/6/6/8/12 over 43 relations.
std::vector<CategorySpec> default_category_mix();
const std::vector<RelationTemplate>& relation_table();

// Paper-proportioned config scaled down by the divisor (subject count only;
// per-subject density targets are kept).
GenConfig paper_shape_config(int divisor = 30, std::uint64_t seed = 0);

Benchmark generate(const GenConfig& cfg);
World generate_world(const GenConfig& cfg);

std::vector<Violation> validate(const Benchmark& b);
BenchmarkStats stats(const Benchmark& b);

void save(const Benchmark& b, const std::string& path);
Benchmark load(const std::string& path, bool force = false);

}  // namespace kelab

#endif  // KELAB_BENCHMARK_HPP_
