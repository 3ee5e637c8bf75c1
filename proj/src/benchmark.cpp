#include "kelab/benchmark.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "json.hpp"

#include "kelab/errors.hpp"
#include "kelab/rng.hpp"
#include "kelab/tokenizer.hpp"

namespace kelab {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string replace_slot(const std::string& tpl, const std::string& subject) {
  auto pos = tpl.find("{s}");
  if (pos == std::string::npos)
    throw TemplateError("template has no {s} slot: " + tpl);
  std::string out = tpl;
  out.replace(pos, 3, subject);
  return out;
}

// Whether `words` contains the subject's word sequence (subjects may span
// several words when syllable splitting is on).
bool mentions(const std::vector<std::string>& words, const std::string& subject) {
  const std::vector<std::string> sw = Tokenizer::split_words(subject);
  if (sw.empty() || words.size() < sw.size()) return false;
  for (std::size_t i = 0; i + sw.size() <= words.size(); ++i) {
    bool all = true;
    for (std::size_t j = 0; j < sw.size(); ++j)
      if (words[i + j] != sw[j]) {
        all = false;
        break;
      }
    if (all) return true;
  }
  return false;
}

}  // namespace

std::string RelationTemplate::instantiate(int variant, const std::string& subject) const {
  if (variant < 0 || variant >= 3)
    throw TemplateError("cloze variant out of range");
  return replace_slot(cloze[static_cast<std::size_t>(variant)], subject);
}

std::string RelationTemplate::instantiate_paraphrase(const std::string& subject) const {
  return replace_slot(paraphrase, subject);
}

std::string RelationTemplate::instantiate_neighborhood(const std::string& subject) const {
  return replace_slot(neighborhood, subject);
}

namespace {

RelationTemplate make_relation(const std::string& word, const std::string& pool) {
  RelationTemplate t;
  t.relation = word;
  t.cloze = {"{s} " + word + " is", "{s} has " + word, "{s} " + word + " equals"};
  t.paraphrase = "people say that {s} truly has " + word;
  t.neighborhood = t.cloze[0];
  t.pool = pool;
  return t;
}

// 43 relations; index order is the canonical relation order everywhere.
const std::vector<RelationTemplate>& table_impl() {
  static const std::vector<RelationTemplate> table = [] {
    std::vector<RelationTemplate> t;
    t.push_back(make_relation("birthplace", "city"));       // 0
    t.push_back(make_relation("deathplace", "city"));       // 1
    t.push_back(make_relation("citizenship", "country"));   // 2
    t.push_back(make_relation("gender", "gender"));         // 3
    t.push_back(make_relation("birthyear", "year"));        // 4
    t.push_back(make_relation("deathyear", "year"));        // 5
    t.push_back(make_relation("prize", "prize"));           // 6
    t.push_back(make_relation("owns", "artifactname"));     // 7
    t.push_back(make_relation("created", "artifactname"));  // 8
    t.push_back(make_relation("affiliation", "orgname"));   // 9
    t.push_back(make_relation("advisor", "person"));        // 10
    t.push_back(make_relation("almamater", "orgname"));     // 11
    t.push_back(make_relation("child", "person"));          // 12
    t.push_back(make_relation("edited", "artifactname"));   // 13
    t.push_back(make_relation("directed", "movie"));        // 14
    t.push_back(make_relation("composedfor", "movie"));     // 15
    t.push_back(make_relation("team", "orgname"));          // 16
    t.push_back(make_relation("party", "orgname"));         // 17
    t.push_back(make_relation("leads", "orgname"));         // 18
    t.push_back(make_relation("influences", "person"));     // 19
    t.push_back(make_relation("spouse", "person"));         // 20
    t.push_back(make_relation("employer", "orgname"));      // 21
    t.push_back(make_relation("interest", "concept"));      // 22
    t.push_back(make_relation("residence", "city"));        // 23
    t.push_back(make_relation("knownfor", "concept"));      // 24
    t.push_back(make_relation("actedin", "movie"));         // 25
    t.push_back(make_relation("pages", "number"));          // 26
    t.push_back(make_relation("duration", "number"));       // 27
    t.push_back(make_relation("weight", "number"));         // 28
    t.push_back(make_relation("height", "number"));         // 29
    t.push_back(make_relation("length", "number"));         // 30
    t.push_back(make_relation("area", "number"));           // 31
    t.push_back(make_relation("currency", "currencyname")); // 32
    t.push_back(make_relation("tradepartner", "country"));  // 33
    t.push_back(make_relation("language", "languagename")); // 34
    t.push_back(make_relation("capital", "city"));          // 35
    t.push_back(make_relation("createdyear", "year"));      // 36
    t.push_back(make_relation("located", "country"));       // 37
    t.push_back(make_relation("longitude", "number"));      // 38
    t.push_back(make_relation("eventyear", "year"));        // 39
    t.push_back(make_relation("eventplace", "city"));       // 40
    t.push_back(make_relation("latitude", "number"));       // 41
    t.push_back(make_relation("event", "eventname"));       // 42
    return t;
  }();
  return table;
}

struct CategoryDef {
  std::string name;
  std::vector<int> relations;
};

const std::vector<CategoryDef>& category_defs() {
  static const std::vector<CategoryDef> defs = [] {
    std::vector<CategoryDef> d;
    d.push_back({"Person", {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17,
                            18, 19, 20, 21, 22, 23, 24, 25, 39, 40, 42}});
    d.push_back({"Organization", {6, 7, 9, 24, 36, 37, 42}});
    d.push_back({"Building", {24, 27, 29, 31, 36, 37}});
    d.push_back({"Artifact", {24, 26, 27, 28, 30, 36}});
    d.push_back({"Abstraction", {19, 24, 26, 27, 34, 36, 39, 42}});
    d.push_back({"GeoEntity", {24, 30, 31, 32, 33, 34, 35, 37, 38, 39, 40, 41}});
    // Every relation must belong to at least one category.
    std::set<int> all;
    for (const auto& c : d) all.insert(c.relations.begin(), c.relations.end());
    if (all.size() != table_impl().size())
      throw ConfigError("category relation pools do not cover the relation table");
    return d;
  }();
  return defs;
}

const std::vector<int>& category_pool(const std::string& name) {
  for (const auto& c : category_defs())
    if (c.name == name) return c.relations;
  // Unknown category names fall back to the whole table.
  static const std::vector<int> all = [] {
    std::vector<int> v(table_impl().size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int>(i);
    return v;
  }();
  return all;
}

// Object pools. Word pools are filled with generated names; year and number
// pools are digit strings, gender is a tiny fixed set.
struct PoolDef {
  std::string name;
  int size;  // for generated-name pools
};

const std::vector<PoolDef>& word_pool_defs() {
  static const std::vector<PoolDef> defs = {
      {"person", 80},       {"city", 60},         {"country", 40},
      {"orgname", 60},      {"artifactname", 60}, {"movie", 40},
      {"prize", 24},        {"concept", 48},      {"currencyname", 20},
      {"languagename", 24}, {"eventname", 32}};
  return defs;
}

const std::vector<std::string>& glue_words() {
  static const std::vector<std::string> g = {"is", "has", "equals", "people",
                                             "say", "that", "truly"};
  return g;
}

// Three-syllable CV names from a fixed alphabet. The used set is seeded with
// every fixed token first, so generated names never collide with glue words,
// relation words, or each other.
class NameWell {
 public:
  NameWell() : rng_(0x77726c64) {
    for (const auto& g : glue_words()) used_.insert(g);
    for (const auto& r : table_impl()) used_.insert(r.relation);
    used_.insert("male");
    used_.insert("female");
    used_.insert("nonbinary");
  }

  std::string next() {
    static const std::string cons = "bdfgklmnprstvz";
    static const std::string vow = "aeiou";
    for (int attempt = 0; attempt < 10000; ++attempt) {
      std::string name;
      for (int s = 0; s < 3; ++s) {
        name += cons[static_cast<std::size_t>(rng_.uniform_int(cons.size()))];
        name += vow[static_cast<std::size_t>(rng_.uniform_int(vow.size()))];
      }
      if (used_.insert(name).second) return name;
    }
    throw ConfigError("name space exhausted");
  }

  std::vector<std::string> take(int n) {
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.push_back(next());
    return out;
  }

 private:
  SeededRng rng_;
  std::set<std::string> used_;
};

struct ObjectPools {
  std::map<std::string, std::vector<std::string>> pools;

  const std::vector<std::string>& at(const std::string& name) const {
    auto it = pools.find(name);
    if (it == pools.end()) throw ConfigError("unknown object pool " + name);
    return it->second;
  }
};

// Apportion `total` across weights by largest remainder.
std::vector<int> apportion(const std::vector<double>& weights, int total) {
  double wsum = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw ConfigError("negative category weight");
    wsum += w;
  }
  if (wsum <= 0.0) throw ConfigError("category weights sum to zero");
  std::vector<int> out(weights.size(), 0);
  std::vector<std::pair<double, std::size_t>> rema;
  int assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    double exact = static_cast<double>(total) * weights[i] / wsum;
    out[i] = static_cast<int>(std::floor(exact));
    assigned += out[i];
    rema.emplace_back(exact - std::floor(exact), i);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;
  });
  for (int k = 0; k < total - assigned; ++k) out[rema[static_cast<std::size_t>(k)].second]++;
  return out;
}

void check_config(const GenConfig& cfg) {
  if (cfg.n_subjects < 1) throw ConfigError("n_subjects must be positive");
  if (cfg.n_relations < 1 ||
      cfg.n_relations > static_cast<int>(table_impl().size()))
    throw ConfigError("n_relations must be in [1, " +
                      std::to_string(table_impl().size()) + "]");
  if (cfg.min_rewrites < 1) throw ConfigError("min_rewrites must be positive");
  if (cfg.max_rewrites < cfg.min_rewrites)
    throw ConfigError("max_rewrites below min_rewrites");
  if (cfg.avg_rewrites < static_cast<double>(cfg.min_rewrites) ||
      cfg.avg_rewrites > static_cast<double>(cfg.max_rewrites))
    throw ConfigError("avg_rewrites outside [min_rewrites, max_rewrites]");
  if (cfg.heldout_sentences < 0)
    throw ConfigError("heldout_sentences must be nonnegative");
  if (cfg.corpus_concat_pairs < 0)
    throw ConfigError("corpus_concat_pairs must be nonnegative");
}

struct FillerFact {
  std::string subject;
  int relation;
  std::string object;
};

struct GenState {
  GenConfig cfg;
  std::vector<CategorySpec> mix;
  std::vector<std::string> subjects;
  std::vector<std::string> fillers;  // support-subject pool, mostly unused
  ObjectPools pools;
  Benchmark bench;
  std::vector<FillerFact> filler_facts;
  // relation index -> variant index used for each rewrite, parallel to records
  std::vector<std::vector<int>> variants;
};

GenState build(const GenConfig& cfg) {
  check_config(cfg);
  GenState st;
  st.cfg = cfg;
  st.mix = cfg.categories.empty() ? default_category_mix() : cfg.categories;
  // Per-category densities only steer the split of the global target, so they
  // are advisory and need no range check of their own.
  for (const auto& c : st.mix)
    if (c.n_relations < 1) throw ConfigError("category needs at least one relation");

  // Vocabulary is a function of the shape config only, not of the seed:
  // names are drawn from a fixed-seed well in a fixed order.
  NameWell well;
  st.subjects = well.take(cfg.n_subjects);
  st.fillers = well.take(2 * cfg.n_subjects + 8);
  for (const auto& p : word_pool_defs()) st.pools.pools[p.name] = well.take(p.size);
  st.pools.pools["gender"] = {"male", "female", "nonbinary"};
  {
    std::vector<std::string> years;
    for (int y = 1950; y < 2030; ++y) years.push_back(std::to_string(y));
    st.pools.pools["year"] = years;
    std::vector<std::string> numbers;
    for (int i = 0; i < 120; ++i) numbers.push_back(std::to_string(3 + 7 * i));
    st.pools.pools["number"] = numbers;
  }

  const auto& table = table_impl();

  // Per-category relation pools, truncated to the configured relation count.
  std::vector<std::vector<int>> pools_by_cat;
  std::vector<double> weights;
  for (const auto& c : st.mix) {
    std::vector<int> pool;
    for (int r : category_pool(c.name))
      if (r < cfg.n_relations) pool.push_back(r);
    if (static_cast<int>(pool.size()) > c.n_relations)
      pool.resize(static_cast<std::size_t>(c.n_relations));
    if (static_cast<int>(pool.size()) < cfg.min_rewrites)
      throw ConfigError("relation pool for " + c.name +
                        " smaller than min_rewrites");
    pools_by_cat.push_back(std::move(pool));
    weights.push_back(c.weight);
  }

  // Category sizes, then a shuffled block assignment of subjects.
  std::vector<int> cat_count = apportion(weights, cfg.n_subjects);
  SeededRng shuffle_rng = SeededRng(cfg.seed).split(1);
  std::vector<int> order(static_cast<std::size_t>(cfg.n_subjects));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  for (std::size_t i = order.size(); i > 1; --i) {
    auto j = static_cast<std::size_t>(shuffle_rng.uniform_int(i));
    std::swap(order[i - 1], order[j]);
  }
  std::vector<int> cat_of(static_cast<std::size_t>(cfg.n_subjects), 0);
  {
    std::size_t k = 0;
    for (std::size_t c = 0; c < cat_count.size(); ++c)
      for (int i = 0; i < cat_count[c]; ++i)
        cat_of[static_cast<std::size_t>(order[k++])] = static_cast<int>(c);
  }

  // Rewrite counts: everyone starts at the minimum, the shortfall against the
  // global target is split across categories by their density targets and then
  // handed out one at a time to random subjects with spare capacity.
  const int total_target =
      static_cast<int>(std::llround(cfg.avg_rewrites * cfg.n_subjects));
  std::vector<int> capacity(static_cast<std::size_t>(cfg.n_subjects));
  std::vector<int> count(static_cast<std::size_t>(cfg.n_subjects));
  long long cap_sum = 0;
  for (int s = 0; s < cfg.n_subjects; ++s) {
    auto c = static_cast<std::size_t>(cat_of[static_cast<std::size_t>(s)]);
    capacity[static_cast<std::size_t>(s)] =
        std::min(cfg.max_rewrites, static_cast<int>(pools_by_cat[c].size()));
    count[static_cast<std::size_t>(s)] = cfg.min_rewrites;
    cap_sum += capacity[static_cast<std::size_t>(s)];
  }
  long long min_sum = static_cast<long long>(cfg.min_rewrites) * cfg.n_subjects;
  if (total_target < min_sum || total_target > cap_sum)
    throw ConfigError("avg_rewrites target infeasible for this shape");

  std::vector<double> extra_weights;
  for (std::size_t c = 0; c < st.mix.size(); ++c) {
    double want = (st.mix[c].avg_rewrites - cfg.min_rewrites) * cat_count[c];
    extra_weights.push_back(std::max(want, 0.0));
  }
  int extras_total = static_cast<int>(total_target - min_sum);
  bool flat = true;
  for (double w : extra_weights)
    if (w > 0.0) flat = false;
  if (flat) extra_weights.assign(extra_weights.size(), 1.0);
  std::vector<int> extras_by_cat = apportion(extra_weights, extras_total);

  // Clamp per-category extras to available capacity and push overflow around.
  std::vector<long long> cat_capacity(st.mix.size(), 0);
  for (int s = 0; s < cfg.n_subjects; ++s)
    cat_capacity[static_cast<std::size_t>(cat_of[static_cast<std::size_t>(s)])] +=
        capacity[static_cast<std::size_t>(s)] - cfg.min_rewrites;
  long long overflow = 0;
  for (std::size_t c = 0; c < st.mix.size(); ++c) {
    if (extras_by_cat[c] > cat_capacity[c]) {
      overflow += extras_by_cat[c] - cat_capacity[c];
      extras_by_cat[c] = static_cast<int>(cat_capacity[c]);
    }
  }
  for (std::size_t c = 0; c < st.mix.size() && overflow > 0; ++c) {
    long long room = cat_capacity[c] - extras_by_cat[c];
    long long grab = std::min(room, overflow);
    extras_by_cat[c] += static_cast<int>(grab);
    overflow -= grab;
  }
  if (overflow > 0) throw ConfigError("avg_rewrites target infeasible for this shape");

  SeededRng count_rng = SeededRng(cfg.seed).split(2);
  for (std::size_t c = 0; c < st.mix.size(); ++c) {
    std::vector<int> members;
    for (int s = 0; s < cfg.n_subjects; ++s)
      if (cat_of[static_cast<std::size_t>(s)] == static_cast<int>(c))
        members.push_back(s);
    for (int e = 0; e < extras_by_cat[c]; ++e) {
      std::vector<int> open;
      for (int s : members)
        if (count[static_cast<std::size_t>(s)] < capacity[static_cast<std::size_t>(s)])
          open.push_back(s);
      if (open.empty()) throw ConfigError("rewrite distribution ran out of capacity");
      int pick = open[static_cast<std::size_t>(count_rng.uniform_int(open.size()))];
      count[static_cast<std::size_t>(pick)]++;
    }
  }

  // Relation selection per subject: a partial shuffle of the category pool,
  // then sorted so rewrites appear in canonical relation order.
  SeededRng rel_rng = SeededRng(cfg.seed).split(3);
  std::vector<std::vector<int>> rel_of(static_cast<std::size_t>(cfg.n_subjects));
  for (int s = 0; s < cfg.n_subjects; ++s) {
    auto c = static_cast<std::size_t>(cat_of[static_cast<std::size_t>(s)]);
    std::vector<int> pool = pools_by_cat[c];
    int want = count[static_cast<std::size_t>(s)];
    for (int i = 0; i < want; ++i) {
      auto j = i + static_cast<std::ptrdiff_t>(rel_rng.uniform_int(pool.size() - static_cast<std::size_t>(i)));
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
    }
    pool.resize(static_cast<std::size_t>(want));
    std::sort(pool.begin(), pool.end());
    rel_of[static_cast<std::size_t>(s)] = std::move(pool);
  }

  // Objects with clustering: half the time reuse an object already given out
  // for this relation, so neighborhood prompts can share true facts.
  SeededRng obj_rng = SeededRng(cfg.seed).split(4);
  std::map<int, std::vector<std::string>> seen_objects;
  st.bench.version = 1;
  st.bench.seed = cfg.seed;
  st.bench.config = cfg;
  st.variants.resize(static_cast<std::size_t>(cfg.n_subjects));
  for (int s = 0; s < cfg.n_subjects; ++s) {
    BenchmarkRecord rec;
    rec.subject = st.subjects[static_cast<std::size_t>(s)];
    rec.category = st.mix[static_cast<std::size_t>(cat_of[static_cast<std::size_t>(s)])].name;
    for (int r : rel_of[static_cast<std::size_t>(s)]) {
      const auto& tpl = table[static_cast<std::size_t>(r)];
      const auto& pool = st.pools.at(tpl.pool);
      int variant = static_cast<int>(obj_rng.uniform_int(3));
      st.variants[static_cast<std::size_t>(s)].push_back(variant);

      auto& seen = seen_objects[r];
      std::string target_true;
      if (!seen.empty() && obj_rng.uniform() < 0.5)
        target_true = seen[static_cast<std::size_t>(obj_rng.uniform_int(seen.size()))];
      else
        target_true = pool[static_cast<std::size_t>(obj_rng.uniform_int(pool.size()))];
      seen.push_back(target_true);

      auto true_idx = static_cast<std::size_t>(
          std::find(pool.begin(), pool.end(), target_true) - pool.begin());
      auto alt = static_cast<std::size_t>(obj_rng.uniform_int(pool.size() - 1));
      if (alt >= true_idx) ++alt;
      const std::string& target_new = pool[alt];

      BenchmarkRewrite rw;
      rw.relation = tpl.relation;
      rw.prompt = tpl.instantiate(variant, rec.subject);
      rw.target_true = target_true;
      rw.target_new = target_new;
      rw.paraphrase_prompts.push_back(tpl.instantiate_paraphrase(rec.subject));
      rec.rewrites.push_back(std::move(rw));
    }
    st.bench.records.push_back(std::move(rec));
  }

  // Neighborhood pass. holders[(r, o)] lists every subject asserting (r, o),
  // in record order; support subjects are appended on demand when fewer than
  // two other holders exist. A support subject carries at most one fact per
  // relation so its answer is unambiguous.
  std::map<std::pair<int, std::string>, std::vector<std::string>> holders;
  std::map<std::string, int> relation_index;
  for (std::size_t r = 0; r < table.size(); ++r)
    relation_index[table[r].relation] = static_cast<int>(r);
  for (const auto& rec : st.bench.records)
    for (const auto& rw : rec.rewrites)
      holders[{relation_index[rw.relation], rw.target_true}].push_back(rec.subject);

  std::map<std::pair<std::string, int>, bool> filler_slot_used;
  for (auto& rec : st.bench.records) {
    for (auto& rw : rec.rewrites) {
      int r = relation_index[rw.relation];
      auto key = std::make_pair(r, rw.target_true);
      auto count_others = [&]() {
        int n = 0;
        for (const auto& h : holders[key])
          if (h != rec.subject) ++n;
        return n;
      };
      while (count_others() < 2) {
        std::string chosen;
        for (const auto& f : st.fillers) {
          if (!filler_slot_used[{f, r}]) {
            chosen = f;
            break;
          }
        }
        if (chosen.empty())
          throw ConfigError("support subject pool exhausted");
        filler_slot_used[{chosen, r}] = true;
        holders[key].push_back(chosen);
        st.filler_facts.push_back({chosen, r, rw.target_true});
      }
      const auto& tpl = table[static_cast<std::size_t>(r)];
      int taken = 0;
      for (const auto& h : holders[key]) {
        if (h == rec.subject) continue;
        rw.neighborhood_prompts.push_back(
            {tpl.instantiate_neighborhood(h), rw.target_true});
        if (++taken == 2) break;
      }
    }
  }

  return st;
}

}  // namespace

std::vector<CategorySpec> default_category_mix() {
  // Weights are subject counts; avg_rewrites are per-category densities.
  return {
      {"Person", 592.0, 9.6, 29},  {"Organization", 874.0, 3.3, 7},
      {"Building", 679.0, 4.6, 6}, {"Artifact", 857.0, 4.2, 6},
      {"Abstraction", 734.0, 3.0, 8}, {"GeoEntity", 912.0, 5.0, 12},
  };
}

const std::vector<RelationTemplate>& relation_table() { return table_impl(); }

GenConfig paper_shape_config(int divisor, std::uint64_t seed) {
  if (divisor < 1) throw ConfigError("divisor must be positive");
  GenConfig cfg;
  cfg.n_subjects = std::max(1, static_cast<int>(std::llround(4503.0 / divisor)));
  cfg.n_relations = 43;
  cfg.min_rewrites = 3;
  cfg.max_rewrites = 13;
  cfg.avg_rewrites = 4.9;
  cfg.categories = default_category_mix();
  cfg.seed = seed;
  return cfg;
}

Benchmark generate(const GenConfig& cfg) { return build(cfg).bench; }

World generate_world(const GenConfig& cfg) {
  GenState st = build(cfg);
  const auto& table = table_impl();

  World w;
  w.benchmark = st.bench;

  std::set<std::string> vocab;
  for (const auto& g : glue_words()) vocab.insert(g);
  for (int r = 0; r < cfg.n_relations; ++r)
    vocab.insert(table[static_cast<std::size_t>(r)].relation);
  for (const auto& s : st.subjects) vocab.insert(s);
  for (const auto& f : st.fillers) vocab.insert(f);
  std::set<std::string> pool_names;
  for (int r = 0; r < cfg.n_relations; ++r)
    pool_names.insert(table[static_cast<std::size_t>(r)].pool);
  for (const auto& p : pool_names) {
    const auto& toks = st.pools.at(p);
    vocab.insert(toks.begin(), toks.end());
  }

  std::map<std::string, int> relation_index;
  for (std::size_t r = 0; r < table.size(); ++r)
    relation_index[table[r].relation] = static_cast<int>(r);

  // Training corpus: every cloze variant plus the paraphrase form for main
  // facts, one neighborhood-form sentence for each support fact.
  for (std::size_t s = 0; s < st.bench.records.size(); ++s) {
    const auto& rec = st.bench.records[s];
    for (const auto& rw : rec.rewrites) {
      const auto& tpl = table[static_cast<std::size_t>(relation_index[rw.relation])];
      for (int v = 0; v < 3; ++v)
        w.corpus.push_back(tpl.instantiate(v, rec.subject) + " " + rw.target_true);
      w.corpus.push_back(tpl.instantiate_paraphrase(rec.subject) + " " + rw.target_true);
      w.facts.emplace_back(rw.prompt, rw.target_true);
    }
  }
  for (const auto& ff : st.filler_facts) {
    const auto& tpl = table[static_cast<std::size_t>(ff.relation)];
    std::string prompt = tpl.instantiate_neighborhood(ff.subject);
    w.corpus.push_back(prompt + " " + ff.object);
    w.facts.emplace_back(prompt, ff.object);
  }

  // Held-out sentences pair a known subject with a relation it never uses, so
  // they share no (subject, relation) fact with the training corpus.
  SeededRng held_rng = SeededRng(cfg.seed).split(5);
  std::map<std::string, std::set<std::string>> used_relations;
  for (const auto& rec : st.bench.records)
    for (const auto& rw : rec.rewrites)
      used_relations[rec.subject].insert(rw.relation);
  std::vector<std::vector<int>> cat_pools;
  for (const auto& c : st.mix) {
    std::vector<int> pool;
    for (int r : category_pool(c.name))
      if (r < cfg.n_relations) pool.push_back(r);
    if (static_cast<int>(pool.size()) > c.n_relations)
      pool.resize(static_cast<std::size_t>(c.n_relations));
    cat_pools.push_back(std::move(pool));
  }
  std::map<std::string, std::size_t> cat_index;
  for (std::size_t c = 0; c < st.mix.size(); ++c) cat_index[st.mix[c].name] = c;
  int made = 0;
  long long attempts = 0;
  const long long max_attempts = 50LL * std::max(cfg.heldout_sentences, 1) + 1000;
  while (made < cfg.heldout_sentences && attempts < max_attempts) {
    ++attempts;
    const auto& rec = st.bench.records[static_cast<std::size_t>(
        held_rng.uniform_int(st.bench.records.size()))];
    const auto& pool = cat_pools[cat_index[rec.category]];
    std::vector<int> free;
    for (int r : pool)
      if (!used_relations[rec.subject].count(table[static_cast<std::size_t>(r)].relation))
        free.push_back(r);
    if (free.empty()) continue;
    int r = free[static_cast<std::size_t>(held_rng.uniform_int(free.size()))];
    const auto& tpl = table[static_cast<std::size_t>(r)];
    const auto& objs = st.pools.at(tpl.pool);
    const auto& obj = objs[static_cast<std::size_t>(held_rng.uniform_int(objs.size()))];
    int variant = static_cast<int>(held_rng.uniform_int(3));
    w.heldout.push_back(tpl.instantiate(variant, rec.subject) + " " + obj);
    ++made;
  }
  if (made < cfg.heldout_sentences)
    throw ConfigError("could not sample enough held-out sentences");

  if (cfg.split_subject_syllables) {
    // Expand every subject-role name into space-separated syllables, in the
    // records and in every derived sentence. Object names stay whole; pools
    // never overlap the subject wells, so plain word lookup is safe.
    std::set<std::string> names(st.subjects.begin(), st.subjects.end());
    names.insert(st.fillers.begin(), st.fillers.end());
    std::map<std::string, std::string> expanded;
    for (const auto& n : names) {
      std::string e;
      for (std::size_t i = 0; i < n.size(); i += 2) {
        // pair chunks; a trailing odd character rides with the last chunk
        std::size_t len = (n.size() - i == 3) ? 3 : 2;
        if (!e.empty()) e += ' ';
        e += n.substr(i, len);
        if (len == 3) break;
      }
      expanded[n] = e;
    }
    auto rewrite = [&](std::string& text) {
      std::string out;
      for (const auto& wd : Tokenizer::split_words(text)) {
        if (!out.empty()) out += ' ';
        auto it = expanded.find(wd);
        out += it == expanded.end() ? wd : it->second;
      }
      text = std::move(out);
    };
    for (auto& rec : w.benchmark.records) {
      rewrite(rec.subject);
      for (auto& rw : rec.rewrites) {
        rewrite(rw.prompt);
        for (auto& p : rw.paraphrase_prompts) rewrite(p);
        for (auto& np : rw.neighborhood_prompts) rewrite(np.prompt);
      }
    }
    for (auto& s : w.corpus) rewrite(s);
    for (auto& s : w.heldout) rewrite(s);
    for (auto& f : w.facts) rewrite(f.first);
    for (const auto& [n, e] : expanded) {
      vocab.erase(n);
      for (const auto& c : Tokenizer::split_words(e)) vocab.insert(c);
    }
  }
  w.vocabulary.assign(vocab.begin(), vocab.end());

  if (cfg.corpus_concat_pairs > 0) {
    SeededRng pair_rng = SeededRng(cfg.seed).split(6);
    const std::size_t base = w.corpus.size();
    for (int i = 0; i < cfg.corpus_concat_pairs; ++i) {
      auto a = static_cast<std::size_t>(pair_rng.uniform_int(base));
      auto b = static_cast<std::size_t>(pair_rng.uniform_int(base));
      if (b == a) b = (b + 1) % base;
      w.corpus.push_back(w.corpus[a] + " " + w.corpus[b]);
    }
  }

  return w;
}

std::vector<Violation> validate(const Benchmark& b) {
  std::vector<Violation> out;
  GenConfig bounds = b.config.value_or(GenConfig{});
  if (b.records.empty())
    out.push_back({"benchmark", "no-records", "benchmark has no records"});

  std::set<std::string> seen_subjects;
  long long total = 0;
  for (std::size_t i = 0; i < b.records.size(); ++i) {
    const auto& rec = b.records[i];
    std::string rpath = "records[" + std::to_string(i) + "]";
    if (!seen_subjects.insert(rec.subject).second)
      out.push_back({rpath, "duplicate-subject",
                     "subject " + rec.subject + " appears in more than one record"});
    auto n = static_cast<int>(rec.rewrites.size());
    total += n;
    if (n < bounds.min_rewrites)
      out.push_back({rpath, "min-rewrites",
                     "record has " + std::to_string(n) + " rewrites, minimum is " +
                         std::to_string(bounds.min_rewrites)});
    if (n > bounds.max_rewrites)
      out.push_back({rpath, "max-rewrites",
                     "record has " + std::to_string(n) + " rewrites, maximum is " +
                         std::to_string(bounds.max_rewrites)});
    std::set<std::string> seen_rel;
    for (std::size_t j = 0; j < rec.rewrites.size(); ++j) {
      const auto& rw = rec.rewrites[j];
      std::string path = rpath + ".rewrites[" + std::to_string(j) + "]";
      if (!seen_rel.insert(rw.relation).second)
        out.push_back({path, "duplicate-relation",
                       "relation " + rw.relation + " repeats within the record"});
      if (rw.target_new == rw.target_true)
        out.push_back({path, "counterfactual-equals-true",
                       "target_new equals target_true (" + rw.target_true + ")"});
      if (rw.paraphrase_prompts.size() != 1)
        out.push_back({path, "paraphrase-count",
                       "expected 1 paraphrase prompt, found " +
                           std::to_string(rw.paraphrase_prompts.size())});
      if (rw.neighborhood_prompts.size() != 2)
        out.push_back({path, "neighborhood-count",
                       "expected 2 neighborhood prompts, found " +
                           std::to_string(rw.neighborhood_prompts.size())});
      auto tokens = Tokenizer::split_words(rw.prompt);
      bool has_object = false;
      for (const auto& t : tokens)
        if (t == rw.target_true || t == rw.target_new) has_object = true;
      if (!mentions(tokens, rec.subject))
        out.push_back({path, "prompt-missing-subject",
                       "prompt does not mention subject " + rec.subject});
      if (has_object)
        out.push_back({path, "prompt-contains-object",
                       "prompt leaks an object token"});
      for (std::size_t k = 0; k < rw.neighborhood_prompts.size(); ++k) {
        const auto& np = rw.neighborhood_prompts[k];
        std::string npath = path + ".neighborhood_prompts[" + std::to_string(k) + "]";
        if (mentions(Tokenizer::split_words(np.prompt), rec.subject))
          out.push_back({npath, "neighborhood-subject",
                         "neighborhood prompt mentions the edited subject"});
        if (np.target_true != rw.target_true)
          out.push_back({npath, "neighborhood-object",
                         "neighborhood answer differs from the rewrite's true object"});
      }
    }
  }
  if (b.config && !b.records.empty()) {
    double avg = static_cast<double>(total) / static_cast<double>(b.records.size());
    if (std::abs(avg - b.config->avg_rewrites) > 0.1)
      out.push_back({"benchmark", "avg-rewrites-drift",
                     "mean rewrites per record drifted to " + std::to_string(avg)});
  }
  return out;
}

BenchmarkStats stats(const Benchmark& b) {
  BenchmarkStats s;
  std::set<std::string> subjects, relations;
  std::map<std::string, CategoryStats> cats;
  bool first = true;
  for (const auto& rec : b.records) {
    subjects.insert(rec.subject);
    auto n = static_cast<int>(rec.rewrites.size());
    s.records += n;
    if (first || n > s.max_rewrites) s.max_rewrites = n;
    if (first || n < s.min_rewrites) s.min_rewrites = n;
    first = false;
    auto& c = cats[rec.category];
    c.name = rec.category;
    c.subjects += 1;
    c.rewrites += n;
    std::set<std::string> cat_rel;
    for (const auto& rw : rec.rewrites) relations.insert(rw.relation);
  }
  // Distinct relations per category need a second pass keyed by category.
  std::map<std::string, std::set<std::string>> cat_relations;
  for (const auto& rec : b.records)
    for (const auto& rw : rec.rewrites)
      cat_relations[rec.category].insert(rw.relation);
  s.subjects = static_cast<int>(subjects.size());
  s.relations = static_cast<int>(relations.size());
  s.avg_rewrites = b.records.empty()
                       ? 0.0
                       : static_cast<double>(s.records) /
                             static_cast<double>(b.records.size());
  for (auto& [name, c] : cats) {
    c.relations = static_cast<int>(cat_relations[name].size());
    c.avg = c.subjects ? static_cast<double>(c.rewrites) / c.subjects : 0.0;
    s.per_category.push_back(c);
  }
  return s;
}

namespace {

ordered_json config_to_json(const GenConfig& cfg) {
  ordered_json j;
  j["n_subjects"] = cfg.n_subjects;
  j["n_relations"] = cfg.n_relations;
  j["min_rewrites"] = cfg.min_rewrites;
  j["max_rewrites"] = cfg.max_rewrites;
  j["avg_rewrites"] = cfg.avg_rewrites;
  j["heldout_sentences"] = cfg.heldout_sentences;
  j["seed"] = cfg.seed;
  j["split_subject_syllables"] = cfg.split_subject_syllables;
  j["corpus_concat_pairs"] = cfg.corpus_concat_pairs;
  j["categories"] = ordered_json::array();
  for (const auto& c : cfg.categories) {
    ordered_json cj;
    cj["name"] = c.name;
    cj["weight"] = c.weight;
    cj["avg_rewrites"] = c.avg_rewrites;
    cj["n_relations"] = c.n_relations;
    j["categories"].push_back(cj);
  }
  return j;
}

template <typename T>
T require_field(const ordered_json& j, const std::string& key,
                const std::string& path) {
  if (!j.contains(key))
    throw SchemaError(path + "." + key + ": missing");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError(path + "." + key + ": wrong type");
  }
}

GenConfig config_from_json(const ordered_json& j, const std::string& path) {
  GenConfig cfg;
  cfg.n_subjects = require_field<int>(j, "n_subjects", path);
  cfg.n_relations = require_field<int>(j, "n_relations", path);
  cfg.min_rewrites = require_field<int>(j, "min_rewrites", path);
  cfg.max_rewrites = require_field<int>(j, "max_rewrites", path);
  cfg.avg_rewrites = require_field<double>(j, "avg_rewrites", path);
  cfg.heldout_sentences = require_field<int>(j, "heldout_sentences", path);
  cfg.seed = require_field<std::uint64_t>(j, "seed", path);
  // fixture options postdate the first benchmark files; absent means off
  if (j.contains("split_subject_syllables"))
    cfg.split_subject_syllables =
        require_field<bool>(j, "split_subject_syllables", path);
  if (j.contains("corpus_concat_pairs"))
    cfg.corpus_concat_pairs = require_field<int>(j, "corpus_concat_pairs", path);
  if (j.contains("categories")) {
    if (!j.at("categories").is_array())
      throw SchemaError(path + ".categories: wrong type");
    cfg.categories.clear();
    std::size_t i = 0;
    for (const auto& cj : j.at("categories")) {
      std::string cpath = path + ".categories[" + std::to_string(i++) + "]";
      CategorySpec c;
      c.name = require_field<std::string>(cj, "name", cpath);
      c.weight = require_field<double>(cj, "weight", cpath);
      c.avg_rewrites = require_field<double>(cj, "avg_rewrites", cpath);
      c.n_relations = require_field<int>(cj, "n_relations", cpath);
      cfg.categories.push_back(std::move(c));
    }
  }
  return cfg;
}

}  // namespace

void save(const Benchmark& b, const std::string& path) {
  ordered_json j;
  j["version"] = b.version;
  j["seed"] = b.seed;
  if (b.config) j["config"] = config_to_json(*b.config);
  j["records"] = ordered_json::array();
  for (const auto& rec : b.records) {
    ordered_json rj;
    rj["subject"] = rec.subject;
    rj["category"] = rec.category;
    rj["rewrites"] = ordered_json::array();
    for (const auto& rw : rec.rewrites) {
      ordered_json wj;
      wj["relation"] = rw.relation;
      wj["prompt"] = rw.prompt;
      wj["target_true"] = rw.target_true;
      wj["target_new"] = rw.target_new;
      wj["paraphrase_prompts"] = rw.paraphrase_prompts;
      wj["neighborhood_prompts"] = ordered_json::array();
      for (const auto& np : rw.neighborhood_prompts) {
        ordered_json nj;
        nj["prompt"] = np.prompt;
        nj["target_true"] = np.target_true;
        wj["neighborhood_prompts"].push_back(nj);
      }
      rj["rewrites"].push_back(std::move(wj));
    }
    j["records"].push_back(std::move(rj));
  }
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("cannot rename " + tmp + " to " + path);
}

Benchmark load(const std::string& path, bool force) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": parse error at byte " + std::to_string(e.byte));
  }
  if (!j.is_object()) throw SchemaError(path + ": top level is not an object");
  Benchmark b;
  b.version = require_field<int>(j, "version", path);
  if (b.version != 1)
    throw VersionError(path + ": unsupported benchmark version " +
                       std::to_string(b.version));
  b.seed = require_field<std::uint64_t>(j, "seed", path);
  if (j.contains("config"))
    b.config = config_from_json(j.at("config"), path + ".config");
  if (!j.contains("records") || !j.at("records").is_array())
    throw SchemaError(path + ".records: missing or not an array");
  std::size_t i = 0;
  for (const auto& rj : j.at("records")) {
    std::string rpath = path + ".records[" + std::to_string(i++) + "]";
    BenchmarkRecord rec;
    rec.subject = require_field<std::string>(rj, "subject", rpath);
    rec.category = require_field<std::string>(rj, "category", rpath);
    if (!rj.contains("rewrites") || !rj.at("rewrites").is_array())
      throw SchemaError(rpath + ".rewrites: missing or not an array");
    std::size_t k = 0;
    for (const auto& wj : rj.at("rewrites")) {
      std::string wpath = rpath + ".rewrites[" + std::to_string(k++) + "]";
      BenchmarkRewrite rw;
      rw.relation = require_field<std::string>(wj, "relation", wpath);
      rw.prompt = require_field<std::string>(wj, "prompt", wpath);
      rw.target_true = require_field<std::string>(wj, "target_true", wpath);
      rw.target_new = require_field<std::string>(wj, "target_new", wpath);
      rw.paraphrase_prompts =
          require_field<std::vector<std::string>>(wj, "paraphrase_prompts", wpath);
      if (!wj.contains("neighborhood_prompts") ||
          !wj.at("neighborhood_prompts").is_array())
        throw SchemaError(wpath + ".neighborhood_prompts: missing or not an array");
      std::size_t m = 0;
      for (const auto& nj : wj.at("neighborhood_prompts")) {
        std::string npath =
            wpath + ".neighborhood_prompts[" + std::to_string(m++) + "]";
        NeighborhoodPrompt np;
        np.prompt = require_field<std::string>(nj, "prompt", npath);
        np.target_true = require_field<std::string>(nj, "target_true", npath);
        rw.neighborhood_prompts.push_back(std::move(np));
      }
      rec.rewrites.push_back(std::move(rw));
    }
    b.records.push_back(std::move(rec));
  }
  if (!force) {
    auto violations = validate(b);
    if (!violations.empty()) {
      std::ostringstream msg;
      msg << path << ": " << violations.size() << " validation failure(s); first: ["
          << violations[0].rule << "] " << violations[0].path << ": "
          << violations[0].message;
      throw DataError(msg.str());
    }
  }
  return b;
}

}  // namespace kelab
