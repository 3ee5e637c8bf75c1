#include "kelab/analyzer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <thread>
#include <utility>

#include "json.hpp"
#include "kelab/errors.hpp"
#include "kelab/metrics.hpp"
#include "kelab/rng.hpp"

namespace kelab {

using ordered_json = nlohmann::ordered_json;

std::string to_string(Arrangement a) {
  return a == Arrangement::same ? "same" : "different";
}

Arrangement arrangement_from(const std::string& s) {
  if (s == "same") return Arrangement::same;
  if (s == "different") return Arrangement::different;
  throw ConfigError("unknown arrangement '" + s + "'");
}

namespace {

// A pair ready to edit: the two rewrites and where they came from.
struct PlannedPair {
  Arrangement arrangement = Arrangement::same;
  int pair = 0;
  int record_a = 0, rewrite_a = 0;
  int record_b = 0, rewrite_b = 0;
};

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

EditRequest make_request(const BenchmarkRecord& rec, int rewrite_index,
                         const std::string& id) {
  const auto& rw = rec.rewrites[static_cast<std::size_t>(rewrite_index)];
  EditRequest req;
  req.id = id;
  req.subject = rec.subject;
  req.relation = rw.relation;
  req.target_true = rw.target_true;
  req.target_new = rw.target_new;
  req.prompt = rw.prompt;
  return req;
}

std::vector<PlannedPair> plan_pairs(const Benchmark& bench,
                                    const PairStudySpec& spec) {
  const auto& recs = bench.records;

  // Same-subject arm: every unordered rewrite pair within a record.
  std::vector<PlannedPair> same_pool;
  for (int r = 0; r < static_cast<int>(recs.size()); ++r) {
    const int n = static_cast<int>(recs[static_cast<std::size_t>(r)].rewrites.size());
    for (int i = 0; i < n; ++i)
      for (int j = i + 1; j < n; ++j)
        same_pool.push_back({Arrangement::same, 0, r, i, r, j});
  }
  if (static_cast<int>(same_pool.size()) < spec.pairs)
    throw DataError("pair study: benchmark supplies " +
                    std::to_string(same_pool.size()) +
                    " same-subject pairs, need " + std::to_string(spec.pairs));

  // Different-subject arm: unordered record pairs, one random rewrite each.
  std::vector<std::pair<int, int>> rec_pairs;
  for (int a = 0; a < static_cast<int>(recs.size()); ++a)
    for (int b = a + 1; b < static_cast<int>(recs.size()); ++b)
      rec_pairs.emplace_back(a, b);
  if (static_cast<int>(rec_pairs.size()) < spec.pairs)
    throw DataError("pair study: benchmark supplies " +
                    std::to_string(rec_pairs.size()) +
                    " different-subject pairs, need " +
                    std::to_string(spec.pairs));

  std::vector<PlannedPair> out;
  SeededRng same_rng = SeededRng(spec.seed).split(1);
  for (int p : sample_distinct(same_rng, static_cast<int>(same_pool.size()),
                               spec.pairs)) {
    PlannedPair pp = same_pool[static_cast<std::size_t>(p)];
    pp.pair = static_cast<int>(out.size());
    out.push_back(pp);
  }
  SeededRng diff_rng = SeededRng(spec.seed).split(2);
  std::vector<int> chosen =
      sample_distinct(diff_rng, static_cast<int>(rec_pairs.size()), spec.pairs);
  int pair_id = 0;
  for (int p : chosen) {
    auto [a, b] = rec_pairs[static_cast<std::size_t>(p)];
    PlannedPair pp;
    pp.arrangement = Arrangement::different;
    pp.pair = pair_id++;
    pp.record_a = a;
    pp.rewrite_a = static_cast<int>(diff_rng.uniform_int(
        recs[static_cast<std::size_t>(a)].rewrites.size()));
    pp.record_b = b;
    pp.rewrite_b = static_cast<int>(diff_rng.uniform_int(
        recs[static_cast<std::size_t>(b)].rewrites.size()));
    out.push_back(pp);
  }
  return out;
}

}  // namespace

std::vector<PairStudyPoint> key_similarity_study(const Model& m,
                                                 const Benchmark& bench,
                                                 const PairStudySpec& spec,
                                                 int jobs) {
  if (spec.pairs < 1) throw ConfigError("pair study: pairs must be positive");
  if (spec.repetitions < 1)
    throw ConfigError("pair study: repetitions must be positive");
  if (spec.method == EditMethod::ft)
    throw ConfigError("pair study: ft produces no keys to compare");
  if (jobs < 1) throw ConfigError("pair study: jobs must be positive");

  const std::vector<PlannedPair> plan = plan_pairs(bench, spec);
  const std::vector<CovarianceEstimate> covs =
      estimate_covariances(m, spec.editor);

  struct Task {
    const PlannedPair* pp;
    int repetition;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (const auto& pp : plan)
    for (int rep = 0; rep < spec.repetitions; ++rep) {
      const std::uint64_t arm_base =
          pp.arrangement == Arrangement::same ? 100 : 200;
      const std::uint64_t seed =
          SeededRng(spec.seed)
              .split(arm_base +
                     static_cast<std::uint64_t>(pp.pair) *
                         static_cast<std::uint64_t>(spec.repetitions) +
                     static_cast<std::uint64_t>(rep))
              .seed();
      tasks.push_back({&pp, rep, seed});
    }

  std::vector<PairStudyPoint> points(tasks.size());
  auto one = [&](std::size_t ti) {
    const Task& task = tasks[ti];
    const PlannedPair& pp = *task.pp;
    const auto& rec_a = bench.records[static_cast<std::size_t>(pp.record_a)];
    const auto& rec_b = bench.records[static_cast<std::size_t>(pp.record_b)];
    EditRequest a = make_request(rec_a, pp.rewrite_a, "a");
    EditRequest b = make_request(rec_b, pp.rewrite_b, "b");

    EditorConfig editor = spec.editor;
    editor.prefixes.seed = task.seed;
    EditResult er =
        edit(m, {a, b}, spec.method, spec.mode, editor, &covs, nullptr);

    PairStudyPoint pt;
    pt.pair = pp.pair;
    pt.arrangement = pp.arrangement;
    pt.mode = spec.mode;
    pt.repetition = task.repetition;
    pt.seed = task.seed;
    const auto& ka = er.artifacts[0].keys;
    const auto& kb = er.artifacts[1].keys;
    pt.cosine = cosine_similarity(ka.front().vector, kb.front().vector);
    if (spec.per_layer_cosines) {
      const std::size_t n = std::min(ka.size(), kb.size());
      for (std::size_t l = 0; l < n; ++l)
        pt.cosine_by_layer.push_back(
            cosine_similarity(ka[l].vector, kb[l].vector));
    }
    Model edited{m.config, m.tokenizer, er.weights};
    const auto& rw_a =
        rec_a.rewrites[static_cast<std::size_t>(pp.rewrite_a)];
    auto records = success_rate(edited, rw_a, EvalKind::efficacy, "a", 0);
    double hits = 0.0;
    for (const auto& r : records) hits += r.success ? 1.0 : 0.0;
    pt.first_edit_es = records.empty() ? 0.0 : hits / records.size();
    points[ti] = std::move(pt);
  };

  const int workers = std::min<int>(jobs, static_cast<int>(tasks.size()));
  if (workers <= 1) {
    for (std::size_t ti = 0; ti < tasks.size(); ++ti) one(ti);
  } else {
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto worker = [&] {
      for (;;) {
        std::size_t ti = next.fetch_add(1);
        if (ti >= tasks.size()) return;
        try {
          one(ti);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    };
    std::vector<std::thread> pool;
    for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
  }
  return points;
}

namespace {

// Fractional ranks: tied values all get the mean of the positions they
// occupy.
std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
    const double mean_rank = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = mean_rank;
    i = j + 1;
  }
  return ranks;
}

std::optional<double> pearson(const std::vector<double>& x,
                              const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace

CorrelationReport correlation_report(const std::vector<PairStudyPoint>& points) {
  int n_same = 0, n_diff = 0;
  for (const auto& p : points)
    (p.arrangement == Arrangement::same ? n_same : n_diff)++;
  if (n_same < 10 || n_diff < 10)
    throw DataError("correlation report: need at least 10 points per arm, have " +
                    std::to_string(n_same) + " same / " +
                    std::to_string(n_diff) + " different");

  CorrelationReport rep;
  rep.points = static_cast<int>(points.size());
  double cs = 0, cd = 0, es = 0, ed = 0;
  for (const auto& p : points) {
    if (p.arrangement == Arrangement::same) {
      cs += p.cosine;
      es += p.first_edit_es;
    } else {
      cd += p.cosine;
      ed += p.first_edit_es;
    }
  }
  rep.mean_cosine_same = cs / n_same;
  rep.mean_cosine_different = cd / n_diff;
  rep.mean_es_same = es / n_same;
  rep.mean_es_different = ed / n_diff;

  // Decile edges from the sorted cosines; a point's bucket is the number of
  // edges strictly below its value. Equal values always share a bucket, so
  // the report cannot depend on input order.
  std::vector<double> sorted;
  sorted.reserve(points.size());
  for (const auto& p : points) sorted.push_back(p.cosine);
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> edges;
  for (int k = 1; k < 10; ++k)
    edges.push_back(sorted[sorted.size() * static_cast<std::size_t>(k) / 10]);
  struct Acc {
    double lo = 0, hi = 0, es_sum = 0;
    int n = 0;
  };
  std::vector<Acc> acc(10);
  for (const auto& p : points) {
    std::size_t b = 0;
    for (double e : edges)
      if (e < p.cosine) ++b;
    Acc& a = acc[b];
    if (a.n == 0) {
      a.lo = a.hi = p.cosine;
    } else {
      a.lo = std::min(a.lo, p.cosine);
      a.hi = std::max(a.hi, p.cosine);
    }
    a.es_sum += p.first_edit_es;
    a.n += 1;
  }
  for (const auto& a : acc)
    if (a.n > 0)
      rep.buckets.push_back({a.lo, a.hi, a.es_sum / a.n, a.n});

  std::vector<double> xs, ys;
  for (const auto& p : points) {
    xs.push_back(p.cosine);
    ys.push_back(p.first_edit_es);
  }
  rep.rank_correlation = pearson(average_ranks(xs), average_ranks(ys));
  return rep;
}

std::string correlation_tsv(const CorrelationReport& report) {
  char buf[128];
  std::string out = "# rank_correlation ";
  if (report.rank_correlation) {
    std::snprintf(buf, sizeof(buf), "%.6f", *report.rank_correlation);
    out += buf;
  } else {
    out += "undefined";
  }
  out += "\ncosine_bucket\tmean_first_edit_es\tn\n";
  for (const auto& b : report.buckets) {
    std::snprintf(buf, sizeof(buf), "[%.6f,%.6f]\t%.6f\t%d\n", b.lo, b.hi,
                  b.mean_first_edit_es, b.n);
    out += buf;
  }
  return out;
}

std::string points_json(const std::vector<PairStudyPoint>& points) {
  ordered_json j;
  j["version"] = 1;
  j["points"] = ordered_json::array();
  for (const auto& p : points) {
    ordered_json pj;
    pj["pair"] = p.pair;
    pj["arrangement"] = to_string(p.arrangement);
    pj["mode"] = to_string(p.mode);
    pj["repetition"] = p.repetition;
    pj["seed"] = p.seed;
    pj["cosine"] = p.cosine;
    pj["cosine_by_layer"] = p.cosine_by_layer;
    pj["first_edit_es"] = p.first_edit_es;
    j["points"].push_back(std::move(pj));
  }
  return j.dump(2) + "\n";
}

namespace {

template <typename T>
T require(const ordered_json& j, const std::string& key,
          const std::string& where) {
  if (!j.contains(key)) throw SchemaError(where + "." + key + ": missing");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError(where + "." + key + ": wrong type");
  }
}

}  // namespace

void save_points(const std::vector<PairStudyPoint>& points,
                 const std::string& path) {
  std::string tmp = path + ".tmp";
  if (std::ifstream(tmp).good()) {
    std::cerr << "warning: removing leftover partial write " << tmp << "\n";
    std::remove(tmp.c_str());
  }
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp + " for writing");
    out << points_json(points);
    if (!out) throw IoError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("cannot rename " + tmp + " to " + path);
}

std::vector<PairStudyPoint> load_points(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path + ": parse error at byte " + std::to_string(e.byte));
  }
  if (!j.is_object()) throw SchemaError(path + ": top level is not an object");
  const int version = require<int>(j, "version", path);
  if (version != 1)
    throw VersionError(path + ": unsupported version " +
                       std::to_string(version));
  if (!j.contains("points") || !j.at("points").is_array())
    throw SchemaError(path + ".points: missing or not an array");
  std::vector<PairStudyPoint> out;
  std::size_t i = 0;
  for (const auto& pj : j.at("points")) {
    std::string where = path + ".points[" + std::to_string(i++) + "]";
    PairStudyPoint p;
    p.pair = require<int>(pj, "pair", where);
    p.arrangement = arrangement_from(require<std::string>(pj, "arrangement", where));
    p.mode = edit_mode_from(require<std::string>(pj, "mode", where));
    p.repetition = require<int>(pj, "repetition", where);
    p.seed = require<std::uint64_t>(pj, "seed", where);
    p.cosine = require<double>(pj, "cosine", where);
    p.cosine_by_layer = require<std::vector<double>>(pj, "cosine_by_layer", where);
    p.first_edit_es = require<double>(pj, "first_edit_es", where);
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace kelab
