#include "kelab/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>
#include <utility>

#include "json.hpp"
#include "kelab/errors.hpp"

namespace kelab {

using ordered_json = nlohmann::ordered_json;

std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::density: return "density";
    case Scheme::same_subject: return "same_subject";
    case Scheme::different_subject: return "different_subject";
    case Scheme::homogeneous: return "homogeneous";
    case Scheme::heterogeneous: return "heterogeneous";
  }
  return "?";
}

Scheme scheme_from(const std::string& s) {
  if (s == "density") return Scheme::density;
  if (s == "same_subject") return Scheme::same_subject;
  if (s == "different_subject") return Scheme::different_subject;
  if (s == "homogeneous") return Scheme::homogeneous;
  if (s == "heterogeneous") return Scheme::heterogeneous;
  throw ConfigError("unknown scheme '" + s + "'");
}

namespace {

// First k slots of a Fisher-Yates pass; exactly k draws from the stream, so
// paired schemes stay in lockstep.
std::vector<int> sample_distinct(SeededRng& rng, int n, int k) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < k; ++i) {
    int j = i + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

std::vector<int> pick_rewrites(SeededRng& rng, const BenchmarkRecord& rec,
                               int count, bool shuffle) {
  std::vector<int> ids =
      sample_distinct(rng, static_cast<int>(rec.rewrites.size()), count);
  if (!shuffle) std::sort(ids.begin(), ids.end());
  return ids;
}

EditRequest make_request(const BenchmarkRecord& rec, int rewrite_index) {
  const BenchmarkRewrite& rw = rec.rewrites[static_cast<std::size_t>(rewrite_index)];
  EditRequest req;
  req.subject = rec.subject;
  req.relation = rw.relation;
  req.target_true = rw.target_true;
  req.target_new = rw.target_new;
  req.prompt = rw.prompt;
  return req;
}

std::vector<int> eligible_records(const Benchmark& bench, int min_rewrites) {
  std::vector<int> out;
  for (int i = 0; i < static_cast<int>(bench.records.size()); ++i)
    if (static_cast<int>(bench.records[static_cast<std::size_t>(i)].rewrites.size()) >=
        min_rewrites)
      out.push_back(i);
  return out;
}

void check_common(const Benchmark& bench, const SchemeConfig& cfg) {
  if (cfg.n_edits < 1) throw SchemeError("n_edits must be at least 1");
  if (bench.records.empty()) throw SchemeError("benchmark has no records");
}

}  // namespace

std::vector<EditRequest> build_edit_sequence(const Benchmark& bench,
                                             const SchemeConfig& cfg,
                                             SeededRng& rng) {
  check_common(bench, cfg);
  const int n = cfg.n_edits;
  std::vector<std::pair<int, int>> picks;  // record index, rewrite index

  switch (cfg.scheme) {
    case Scheme::density: {
      const int d = cfg.density;
      if (d < 1 || d > 3)
        throw ConfigError("density must be 1, 2 or 3, got " + std::to_string(d));
      if (n % d != 0)
        throw SchemeError("density " + std::to_string(d) +
                          " does not divide n_edits " + std::to_string(n));
      const int blocks = n / d;
      std::vector<int> pool = eligible_records(bench, d);
      if (static_cast<int>(pool.size()) < blocks)
        throw SchemeError("density scheme needs " + std::to_string(blocks) +
                          " subjects with at least " + std::to_string(d) +
                          " rewrites; benchmark has " +
                          std::to_string(pool.size()));
      for (int s : sample_distinct(rng, static_cast<int>(pool.size()), blocks)) {
        int rec = pool[static_cast<std::size_t>(s)];
        for (int rw : pick_rewrites(rng, bench.records[static_cast<std::size_t>(rec)],
                                    d, cfg.shuffle_relations))
          picks.emplace_back(rec, rw);
      }
      break;
    }
    case Scheme::same_subject: {
      std::vector<int> pool = eligible_records(bench, n);
      if (pool.empty()) {
        int best = 0;
        for (const auto& r : bench.records)
          best = std::max(best, static_cast<int>(r.rewrites.size()));
        throw SchemeError("same_subject needs a subject with " +
                          std::to_string(n) + " rewrites; the benchmark maxes out at " +
                          std::to_string(best));
      }
      int rec = pool[rng.uniform_int(pool.size())];
      for (int rw : pick_rewrites(rng, bench.records[static_cast<std::size_t>(rec)],
                                  n, cfg.shuffle_relations))
        picks.emplace_back(rec, rw);
      break;
    }
    case Scheme::different_subject: {
      if (static_cast<int>(bench.records.size()) < n)
        throw SchemeError("different_subject needs " + std::to_string(n) +
                          " subjects; benchmark has " +
                          std::to_string(bench.records.size()));
      for (int rec : sample_distinct(rng, static_cast<int>(bench.records.size()), n)) {
        const auto& r = bench.records[static_cast<std::size_t>(rec)];
        picks.emplace_back(rec,
                           static_cast<int>(rng.uniform_int(r.rewrites.size())));
      }
      break;
    }
    case Scheme::homogeneous:
    case Scheme::heterogeneous: {
      if (n < 2) throw SchemeError(to_string(cfg.scheme) + " needs n_edits >= 2");
      std::vector<int> pool = eligible_records(bench, 2);
      if (pool.empty())
        throw SchemeError("no subject in the benchmark has 2 rewrites");
      int needed = n - 1 + (cfg.scheme == Scheme::heterogeneous ? 1 : 0);
      if (static_cast<int>(bench.records.size()) < needed)
        throw SchemeError(to_string(cfg.scheme) + " with n_edits " +
                          std::to_string(n) + " needs " + std::to_string(needed) +
                          " subjects; benchmark has " +
                          std::to_string(bench.records.size()));
      // Both arms draw identically up to the final edit: anchor subject, its
      // rewrite pair, then the middles. Only the tail differs.
      int anchor = pool[rng.uniform_int(pool.size())];
      const auto& arec = bench.records[static_cast<std::size_t>(anchor)];
      std::vector<int> apair = pick_rewrites(rng, arec, 2, cfg.shuffle_relations);
      std::vector<int> others;
      for (int i = 0; i < static_cast<int>(bench.records.size()); ++i)
        if (i != anchor) others.push_back(i);
      std::vector<int> mids =
          sample_distinct(rng, static_cast<int>(others.size()), n - 2);
      picks.emplace_back(anchor, apair[0]);
      std::vector<bool> used(others.size(), false);
      for (int s : mids) {
        used[static_cast<std::size_t>(s)] = true;
        int rec = others[static_cast<std::size_t>(s)];
        const auto& r = bench.records[static_cast<std::size_t>(rec)];
        picks.emplace_back(rec,
                           static_cast<int>(rng.uniform_int(r.rewrites.size())));
      }
      if (cfg.scheme == Scheme::homogeneous) {
        picks.emplace_back(anchor, apair[1]);
      } else {
        std::vector<int> tail;
        for (int i = 0; i < static_cast<int>(others.size()); ++i)
          if (!used[static_cast<std::size_t>(i)]) tail.push_back(others[static_cast<std::size_t>(i)]);
        if (tail.empty())
          throw SchemeError("heterogeneous needs one more unused subject");
        int rec = tail[rng.uniform_int(tail.size())];
        const auto& r = bench.records[static_cast<std::size_t>(rec)];
        picks.emplace_back(rec,
                           static_cast<int>(rng.uniform_int(r.rewrites.size())));
      }
      break;
    }
  }

  std::vector<EditRequest> out;
  out.reserve(picks.size());
  for (std::size_t i = 0; i < picks.size(); ++i) {
    EditRequest req = make_request(
        bench.records[static_cast<std::size_t>(picks[i].first)], picks[i].second);
    req.id = "e" + std::to_string(i);
    out.push_back(std::move(req));
  }
  return out;
}

namespace {

const BenchmarkRewrite* find_rewrite(const Benchmark& bench,
                                     const std::string& subject,
                                     const std::string& relation) {
  for (const auto& rec : bench.records) {
    if (rec.subject != subject) continue;
    for (const auto& rw : rec.rewrites)
      if (rw.relation == relation) return &rw;
  }
  return nullptr;
}

}  // namespace

double RunResult::mean_s() const {
  if (repetitions.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& r : repetitions) acc += r.summary.s;
  return acc / static_cast<double>(repetitions.size());
}

double RunResult::mean_first_edit_es() const {
  if (repetitions.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& r : repetitions) acc += r.first_edit_es;
  return acc / static_cast<double>(repetitions.size());
}

RunResult run_experiment(const Model& m, const Benchmark& bench,
                         const std::vector<std::string>& heldout,
                         const SchemeConfig& cfg, int jobs,
                         std::ostream* trace) {
  if (cfg.repetitions < 1) throw ConfigError("repetitions must be at least 1");
  check_common(bench, cfg);

  std::vector<std::pair<std::vector<int>, int>> facts;
  for (const auto& rec : bench.records)
    for (const auto& rw : rec.rewrites)
      facts.push_back({m.tokenizer.encode(rw.prompt), m.tokenizer.id(rw.target_true)});
  double recall = fact_recall(m.weights, m.config, facts);
  if (recall < 0.9)
    throw PreconditionError(
        "fact recall " + std::to_string(recall) +
        " is below the 0.9 gate; retrain the checkpoint before experimenting");

  // One covariance estimate serves every repetition: edits always measure the
  // pristine input model.
  std::vector<CovarianceEstimate> covs;
  const std::vector<CovarianceEstimate>* covs_ptr = nullptr;
  if (cfg.method != EditMethod::ft) {
    covs = estimate_covariances(m, cfg.editor);
    covs_ptr = &covs;
  }

  auto t0 = std::chrono::steady_clock::now();
  std::vector<RepetitionResult> reps(static_cast<std::size_t>(cfg.repetitions));
  std::vector<std::string> traces(static_cast<std::size_t>(cfg.repetitions));

  auto one = [&](int r) {
    SeededRng rng = SeededRng(cfg.seed).split(static_cast<std::uint64_t>(r));
    std::vector<EditRequest> requests = build_edit_sequence(bench, cfg, rng);
    for (std::size_t i = 0; i < requests.size(); ++i)
      requests[i].id = "r" + std::to_string(r) + "e" + std::to_string(i);

    std::ostringstream tr;
    EditResult er = edit(m, requests, cfg.method, cfg.mode, cfg.editor, covs_ptr,
                         trace ? &tr : nullptr);
    Model edited = m;
    edited.weights = std::move(er.weights);

    std::vector<EvalRecord> records;
    for (std::size_t i = 0; i < requests.size(); ++i) {
      const BenchmarkRewrite* rw =
          find_rewrite(bench, requests[i].subject, requests[i].relation);
      if (!rw)
        throw DataError("request " + requests[i].id + " lost its rewrite");
      for (EvalKind kind : {EvalKind::efficacy, EvalKind::paraphrase,
                            EvalKind::neighborhood}) {
        auto part = success_rate(edited, *rw, kind, requests[i].id,
                                 static_cast<int>(i));
        records.insert(records.end(), part.begin(), part.end());
      }
    }
    double ppl = perplexity(edited, heldout);

    RepetitionResult rep;
    rep.repetition = r;
    rep.summary = aggregate_run(records, ppl);
    rep.positions = per_position(records, ppl);
    rep.first_edit_es = rep.positions.front().summary.es;
    for (const auto& art : er.artifacts)
      if (art.key_cosine_prev_same_subject)
        rep.key_cosines.push_back(*art.key_cosine_prev_same_subject);
    reps[static_cast<std::size_t>(r)] = std::move(rep);
    traces[static_cast<std::size_t>(r)] = tr.str();
  };

  int workers = std::max(1, jobs);
  if (workers == 1) {
    for (int r = 0; r < cfg.repetitions; ++r) one(r);
  } else {
    std::atomic<int> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto worker = [&] {
      for (;;) {
        int r = next.fetch_add(1);
        if (r >= cfg.repetitions) return;
        try {
          one(r);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    };
    std::vector<std::thread> pool;
    for (int i = 0; i < std::min(workers, cfg.repetitions); ++i)
      pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }

  if (trace)
    for (const auto& s : traces) *trace << s;

  RunResult out;
  out.config = cfg;
  out.repetitions = std::move(reps);
  out.wall_seconds = std::chrono::duration<double>(
                         std::chrono::steady_clock::now() - t0)
                         .count();
  return out;
}

std::vector<RunResult> run_density_sweep(const Model& m, const Benchmark& bench,
                                         const std::vector<std::string>& heldout,
                                         const SchemeConfig& base, int jobs) {
  std::vector<RunResult> out;
  for (int d : {1, 2, 3}) {
    SchemeConfig cfg = base;
    cfg.scheme = Scheme::density;
    cfg.density = d;
    out.push_back(run_experiment(m, bench, heldout, cfg, jobs));
  }
  return out;
}

PairStudy run_pair_study(const Model& m, const Benchmark& bench,
                         const std::vector<std::string>& heldout,
                         const SchemeConfig& base, int jobs) {
  if (base.n_edits < 2) throw SchemeError("pair study needs n_edits >= 2");
  PairStudy out;
  SchemeConfig cfg = base;
  cfg.scheme = Scheme::homogeneous;
  out.homogeneous = run_experiment(m, bench, heldout, cfg, jobs);
  cfg.scheme = Scheme::heterogeneous;
  out.heterogeneous = run_experiment(m, bench, heldout, cfg, jobs);
  out.first_es_homogeneous = out.homogeneous.mean_first_edit_es();
  out.first_es_heterogeneous = out.heterogeneous.mean_first_edit_es();
  out.gap = out.first_es_heterogeneous - out.first_es_homogeneous;
  return out;
}

namespace {

std::string prefix_mode_name(PrefixMode m) {
  return m == PrefixMode::shared ? "shared" : "per_edit";
}

PrefixMode prefix_mode_from(const std::string& s) {
  if (s == "shared") return PrefixMode::shared;
  if (s == "per_edit") return PrefixMode::per_edit;
  throw SchemaError("unknown prefix mode '" + s + "'");
}

ordered_json editor_to_json(const EditorConfig& e) {
  ordered_json j;
  j["layers"] = e.layers;
  j["prefixes"] = {{"count", e.prefixes.count},
                   {"max_len", e.prefixes.max_len},
                   {"mode", prefix_mode_name(e.prefixes.mode)},
                   {"seed", e.prefixes.seed}};
  j["value_opt"] = {{"max_steps", e.value_opt.max_steps},
                    {"lr", e.value_opt.lr},
                    {"target_prob", e.value_opt.target_prob}};
  j["covariance"] = {{"probes", e.covariance.probes},
                     {"probe_len", e.covariance.probe_len},
                     {"lambda_scale", e.covariance.lambda_scale},
                     {"seed", e.covariance.seed}};
  j["spread"] = e.spread;
  j["ft"] = {{"steps", e.ft.steps},
             {"lr", e.ft.lr},
             {"norm_bound", e.ft.norm_bound}};
  return j;
}

template <typename T>
T require(const ordered_json& j, const std::string& key, const std::string& at) {
  if (!j.contains(key)) throw SchemaError(at + ": missing key '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError(at + ": bad value for '" + key + "'");
  }
}

EditorConfig editor_from_json(const ordered_json& j, const std::string& at) {
  EditorConfig e;
  e.layers = require<std::vector<int>>(j, "layers", at);
  const ordered_json& p = j.at("prefixes");
  e.prefixes.count = require<int>(p, "count", at);
  e.prefixes.max_len = require<int>(p, "max_len", at);
  e.prefixes.mode = prefix_mode_from(require<std::string>(p, "mode", at));
  e.prefixes.seed = require<std::uint64_t>(p, "seed", at);
  const ordered_json& v = j.at("value_opt");
  e.value_opt.max_steps = require<int>(v, "max_steps", at);
  e.value_opt.lr = require<double>(v, "lr", at);
  e.value_opt.target_prob = require<double>(v, "target_prob", at);
  const ordered_json& c = j.at("covariance");
  e.covariance.probes = require<int>(c, "probes", at);
  e.covariance.probe_len = require<int>(c, "probe_len", at);
  e.covariance.lambda_scale = require<double>(c, "lambda_scale", at);
  e.covariance.seed = require<std::uint64_t>(c, "seed", at);
  e.spread = require<double>(j, "spread", at);
  const ordered_json& f = j.at("ft");
  e.ft.steps = require<int>(f, "steps", at);
  e.ft.lr = require<double>(f, "lr", at);
  e.ft.norm_bound = require<double>(f, "norm_bound", at);
  return e;
}

ordered_json summary_to_json(const MetricSummary& s) {
  ordered_json j;
  j["es"] = s.es;
  j["ps"] = s.ps;
  j["ns"] = s.ns;
  j["ppl"] = s.ppl;
  j["s"] = s.s;
  j["n_efficacy"] = s.n_efficacy;
  j["n_paraphrase"] = s.n_paraphrase;
  j["n_neighborhood"] = s.n_neighborhood;
  return j;
}

MetricSummary summary_from_json(const ordered_json& j, const std::string& at) {
  MetricSummary s;
  s.es = require<double>(j, "es", at);
  s.ps = require<double>(j, "ps", at);
  s.ns = require<double>(j, "ns", at);
  s.ppl = require<double>(j, "ppl", at);
  s.s = require<double>(j, "s", at);
  s.n_efficacy = require<int>(j, "n_efficacy", at);
  s.n_paraphrase = require<int>(j, "n_paraphrase", at);
  s.n_neighborhood = require<int>(j, "n_neighborhood", at);
  return s;
}

}  // namespace

std::string run_result_json(const RunResult& r) {
  ordered_json j;
  j["version"] = 1;
  ordered_json cj;
  cj["scheme"] = to_string(r.config.scheme);
  cj["n_edits"] = r.config.n_edits;
  cj["density"] = r.config.density;
  cj["method"] = to_string(r.config.method);
  cj["mode"] = to_string(r.config.mode);
  cj["repetitions"] = r.config.repetitions;
  cj["seed"] = r.config.seed;
  cj["shuffle_relations"] = r.config.shuffle_relations;
  cj["editor"] = editor_to_json(r.config.editor);
  j["config"] = std::move(cj);
  j["repetitions"] = ordered_json::array();
  for (const auto& rep : r.repetitions) {
    ordered_json rj;
    rj["repetition"] = rep.repetition;
    rj["summary"] = summary_to_json(rep.summary);
    rj["positions"] = ordered_json::array();
    for (const auto& row : rep.positions) {
      ordered_json pj;
      pj["position"] = row.position;
      pj["summary"] = summary_to_json(row.summary);
      rj["positions"].push_back(std::move(pj));
    }
    rj["first_edit_es"] = rep.first_edit_es;
    rj["key_cosines"] = rep.key_cosines;
    j["repetitions"].push_back(std::move(rj));
  }
  return j.dump(2) + "\n";
}

void save_run_result(const RunResult& r, const std::string& path) {
  std::string tmp = path + ".tmp";
  if (std::ifstream(tmp).good()) {
    std::cerr << "warning: removing leftover partial write " << tmp << "\n";
    std::remove(tmp.c_str());
  }
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out << run_result_json(r);
    if (!out) throw IoError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("cannot rename " + tmp + " to " + path);
}

RunResult load_run_result(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": parse error at byte " + std::to_string(e.byte));
  }
  if (!j.is_object()) throw SchemaError(path + ": top level is not an object");
  int version = require<int>(j, "version", path);
  if (version != 1)
    throw VersionError(path + ": unsupported result version " +
                       std::to_string(version));
  RunResult r;
  const ordered_json& cj = j.at("config");
  r.config.scheme = scheme_from(require<std::string>(cj, "scheme", path));
  r.config.n_edits = require<int>(cj, "n_edits", path);
  r.config.density = require<int>(cj, "density", path);
  r.config.method = edit_method_from(require<std::string>(cj, "method", path));
  r.config.mode = edit_mode_from(require<std::string>(cj, "mode", path));
  r.config.repetitions = require<int>(cj, "repetitions", path);
  r.config.seed = require<std::uint64_t>(cj, "seed", path);
  r.config.shuffle_relations = require<bool>(cj, "shuffle_relations", path);
  r.config.editor = editor_from_json(cj.at("editor"), path);
  for (const auto& rj : j.at("repetitions")) {
    RepetitionResult rep;
    rep.repetition = require<int>(rj, "repetition", path);
    rep.summary = summary_from_json(rj.at("summary"), path);
    for (const auto& pj : rj.at("positions")) {
      PositionRow row;
      row.position = require<int>(pj, "position", path);
      row.summary = summary_from_json(pj.at("summary"), path);
      rep.positions.push_back(std::move(row));
    }
    rep.first_edit_es = require<double>(rj, "first_edit_es", path);
    rep.key_cosines = require<std::vector<double>>(rj, "key_cosines", path);
    r.repetitions.push_back(std::move(rep));
  }
  return r;
}

std::string results_filename(const SchemeConfig& cfg) {
  std::string tag = to_string(cfg.scheme);
  if (cfg.scheme == Scheme::density) tag += std::to_string(cfg.density);
  return tag + "-" + to_string(cfg.method) + "-" + to_string(cfg.mode) + "-" +
         std::to_string(cfg.n_edits) + "-" + std::to_string(cfg.seed) + ".json";
}

void write_runs_csv(std::ostream& out, const std::vector<RunResult>& runs) {
  out << "scheme,method,mode,n_edits,density,repetition,ES,PS,NS,PPL,S\n";
  char buf[160];
  for (const auto& run : runs) {
    for (const auto& rep : run.repetitions) {
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%d,%d,%d,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                    to_string(run.config.scheme).c_str(),
                    to_string(run.config.method).c_str(),
                    to_string(run.config.mode).c_str(), run.config.n_edits,
                    run.config.density, rep.repetition, rep.summary.es,
                    rep.summary.ps, rep.summary.ns, rep.summary.ppl,
                    rep.summary.s);
      out << buf;
    }
  }
}

std::vector<SdRow> sd_table(const std::vector<RunResult>& runs) {
  std::map<std::tuple<std::string, std::string, int>, std::pair<const RunResult*, const RunResult*>>
      arms;
  for (const auto& run : runs) {
    auto key = std::make_tuple(to_string(run.config.method),
                               to_string(run.config.mode), run.config.n_edits);
    if (run.config.scheme == Scheme::same_subject) arms[key].first = &run;
    if (run.config.scheme == Scheme::different_subject) arms[key].second = &run;
  }
  std::vector<SdRow> rows;
  for (const auto& [key, pair] : arms) {
    if (!pair.first || !pair.second) continue;
    SdRow row;
    row.method = std::get<0>(key);
    row.mode = std::get<1>(key);
    row.n_edits = std::get<2>(key);
    row.s_same = pair.first->mean_s();
    row.s_diff = pair.second->mean_s();
    row.sd = score_difference(row.s_same, row.s_diff);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_sd_csv(std::ostream& out, const std::vector<SdRow>& rows) {
  out << "method,mode,n_edits,S_same,S_diff,SD\n";
  char buf[120];
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof buf, "%s,%s,%d,%.6f,%.6f,%.6f\n",
                  row.method.c_str(), row.mode.c_str(), row.n_edits, row.s_same,
                  row.s_diff, row.sd);
    out << buf;
  }
}

}  // namespace kelab
