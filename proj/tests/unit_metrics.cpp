#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"

#include "kelab/errors.hpp"
#include "kelab/metrics.hpp"
#include "kelab/model.hpp"

using namespace kelab;

namespace {

Model make_model(const std::vector<std::string>& words, std::uint64_t seed,
                 bool zero = false) {
  Model m;
  m.tokenizer = Tokenizer::from_words(words);
  m.config.n_layers = 2;
  m.config.d_model = 16;
  m.config.n_heads = 2;
  m.config.d_mlp = 32;
  m.config.vocab_size = m.tokenizer.size();
  m.config.max_seq_len = 32;
  if (zero) {
    m.weights = TransformerWeights::zeros(m.config);
  } else {
    SeededRng rng(seed);
    m.weights = TransformerWeights::init(m.config, rng);
  }
  return m;
}

std::vector<std::string> small_words() {
  return {"sova", "timo",  "pera", "color", "is",  "people",
          "say",  "that",  "truly", "has",   "rix", "lum"};
}

BenchmarkRewrite small_rewrite() {
  BenchmarkRewrite rw;
  rw.relation = "color";
  rw.prompt = "sova color is";
  rw.target_true = "rix";
  rw.target_new = "lum";
  rw.paraphrase_prompts = {"people say that sova truly has color"};
  rw.neighborhood_prompts = {{"timo color is", "rix"}, {"pera color is", "rix"}};
  return rw;
}

double prob_of(const Model& m, const std::string& prompt, const std::string& tok) {
  Vec lp = next_token_logprobs(m.weights, m.config, m.tokenizer.encode(prompt));
  return std::exp(lp(m.tokenizer.id(tok)));
}

EvalRecord fake(const std::string& id, EvalKind kind, bool ok, int position = 0) {
  EvalRecord r;
  r.request_id = id;
  r.kind = kind;
  r.p_want = ok ? 0.6 : 0.2;
  r.p_against = 0.4;
  r.success = ok;
  r.position = position;
  return r;
}

}  // namespace

TEST_CASE("probability comparisons follow the kind rules") {
  Model m = make_model(small_words(), 11);
  BenchmarkRewrite rw = small_rewrite();

  auto eff = success_rate(m, rw, EvalKind::efficacy, "req-0", 3);
  REQUIRE(eff.size() == 1);
  CHECK(eff[0].request_id == "req-0");
  CHECK(eff[0].position == 3);
  CHECK(eff[0].prompt == rw.prompt);
  CHECK(eff[0].p_want == prob_of(m, rw.prompt, "lum"));
  CHECK(eff[0].p_against == prob_of(m, rw.prompt, "rix"));
  CHECK(eff[0].success == (eff[0].p_want > eff[0].p_against));

  auto par = success_rate(m, rw, EvalKind::paraphrase);
  REQUIRE(par.size() == 1);
  CHECK(par[0].prompt == rw.paraphrase_prompts[0]);
  CHECK(par[0].p_want == prob_of(m, par[0].prompt, "lum"));

  auto nei = success_rate(m, rw, EvalKind::neighborhood);
  REQUIRE(nei.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(nei[i].prompt == rw.neighborhood_prompts[i].prompt);
    CHECK(nei[i].p_want == prob_of(m, nei[i].prompt, "rix"));
    CHECK(nei[i].p_against == prob_of(m, nei[i].prompt, "lum"));
    CHECK(nei[i].success == (nei[i].p_want > nei[i].p_against));
  }

  // Pure function of the model: bitwise identical on re-evaluation.
  auto again = success_rate(m, rw, EvalKind::efficacy, "req-0", 3);
  CHECK(again[0].p_want == eff[0].p_want);
  CHECK(again[0].p_against == eff[0].p_against);
  CHECK(again[0].success == eff[0].success);
}

TEST_CASE("ties count as failure") {
  Model m = make_model(small_words(), 0, /*zero=*/true);
  BenchmarkRewrite rw = small_rewrite();
  for (EvalKind kind :
       {EvalKind::efficacy, EvalKind::paraphrase, EvalKind::neighborhood}) {
    for (const auto& rec : success_rate(m, rw, kind)) {
      CHECK(rec.p_want == rec.p_against);
      CHECK_FALSE(rec.success);
    }
  }
}

TEST_CASE("missing prompts for a kind are rejected") {
  Model m = make_model(small_words(), 11);
  BenchmarkRewrite rw = small_rewrite();
  rw.paraphrase_prompts.clear();
  CHECK_THROWS_AS(success_rate(m, rw, EvalKind::paraphrase), DataError);
  rw = small_rewrite();
  rw.neighborhood_prompts.clear();
  CHECK_THROWS_AS(success_rate(m, rw, EvalKind::neighborhood), DataError);
}

TEST_CASE("uniform model perplexity equals vocabulary size") {
  for (int v : {8, 64, 1200}) {
    std::vector<std::string> words;
    for (int i = 0; i < v; ++i) words.push_back("w" + std::to_string(i));
    Model m = make_model(words, 0, /*zero=*/true);
    double ppl = perplexity(m, {"w0 w1 w2 w3 w4"});
    CHECK(ppl == doctest::Approx(static_cast<double>(v)).epsilon(1e-9));
  }
}

TEST_CASE("duplicating the corpus leaves perplexity unchanged") {
  Model m = make_model(small_words(), 21);
  std::vector<std::string> corpus = {"sova color is rix", "timo has color"};
  std::vector<std::string> doubled = corpus;
  doubled.insert(doubled.end(), corpus.begin(), corpus.end());
  CHECK(perplexity(m, doubled) ==
        doctest::Approx(perplexity(m, corpus)).epsilon(1e-12));
}

TEST_CASE("perplexity weights by token count") {
  Model m = make_model(small_words(), 22);
  std::vector<std::string> corpus = {"sova color is rix",
                                     "people say that timo truly has color"};
  double nll = 0.0;
  int count = 0;
  for (const auto& s : corpus) {
    std::vector<int> ids = m.tokenizer.encode(s);
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      std::vector<int> prefix(ids.begin(), ids.begin() + static_cast<long>(t) + 1);
      nll -= next_token_logprob(m.weights, m.config, prefix, ids[t + 1]);
      ++count;
    }
  }
  double expected = std::exp(nll / count);
  CHECK(perplexity(m, corpus) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("perplexity rejects unusable corpora") {
  Model m = make_model(small_words(), 23);
  CHECK_THROWS_AS(perplexity(m, {}), DataError);
  CHECK_THROWS_AS(perplexity(m, {"sova"}), DataError);
  // Single-token sentences are skipped, not counted.
  CHECK(perplexity(m, {"sova", "sova color is"}) ==
        perplexity(m, {"sova color is"}));
}

TEST_CASE("composite score closed forms") {
  CHECK(composite_score(0.9, 0.9, 0.9) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(composite_score(0.5, 1.0, 1.0) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(composite_score(1.0, 1.0, 0.75) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(composite_score(0.0, 1.0, 1.0) == 0.0);
  CHECK(composite_score(1.0, 0.0, 1.0) == 0.0);

  // Symmetric, bounded by the arithmetic mean, never negative.
  double a = 0.3, b = 0.8, c = 0.55;
  double s = composite_score(a, b, c);
  CHECK(s == doctest::Approx(composite_score(c, a, b)).epsilon(1e-14));
  CHECK(s == doctest::Approx(composite_score(b, c, a)).epsilon(1e-14));
  CHECK(s <= (a + b + c) / 3.0);
  CHECK(s >= 0.0);

  CHECK_THROWS_AS(composite_score(-0.1, 0.5, 0.5), DataError);
  CHECK_THROWS_AS(composite_score(0.5, 1.1, 0.5), DataError);
}

TEST_CASE("score difference is a signed gap") {
  CHECK(score_difference(0.62, 0.81) == doctest::Approx(-0.19).epsilon(1e-12));
  CHECK(score_difference(0.4, 0.4) == 0.0);
  CHECK(score_difference(0.3, 0.7) == -score_difference(0.7, 0.3));
}

TEST_CASE("aggregate pools rates per kind") {
  std::vector<EvalRecord> recs;
  recs.push_back(fake("a", EvalKind::efficacy, true));
  recs.push_back(fake("a", EvalKind::efficacy, true));
  recs.push_back(fake("b", EvalKind::efficacy, false));
  recs.push_back(fake("a", EvalKind::paraphrase, true));
  recs.push_back(fake("a", EvalKind::paraphrase, true));
  recs.push_back(fake("b", EvalKind::paraphrase, true));
  recs.push_back(fake("b", EvalKind::paraphrase, false));
  recs.push_back(fake("a", EvalKind::neighborhood, true));
  recs.push_back(fake("b", EvalKind::neighborhood, false));

  MetricSummary s = aggregate_run(recs, 4.5);
  CHECK(s.n_efficacy == 3);
  CHECK(s.n_paraphrase == 4);
  CHECK(s.n_neighborhood == 2);
  CHECK(s.es == doctest::Approx(2.0 / 3.0));
  CHECK(s.ps == doctest::Approx(0.75));
  CHECK(s.ns == doctest::Approx(0.5));
  CHECK(s.ppl == 4.5);
  CHECK(s.s == doctest::Approx(composite_score(s.es, s.ps, s.ns)));

  // All successes pin the score at 1.
  std::vector<EvalRecord> perfect = {fake("a", EvalKind::efficacy, true),
                                     fake("a", EvalKind::paraphrase, true),
                                     fake("a", EvalKind::neighborhood, true)};
  MetricSummary p = aggregate_run(perfect, 1.0);
  CHECK(p.es == 1.0);
  CHECK(p.ps == 1.0);
  CHECK(p.ns == 1.0);
  CHECK(p.s == doctest::Approx(1.0));
}

TEST_CASE("aggregate over a concatenation is the weighted mean of the parts") {
  std::vector<EvalRecord> a = {fake("a", EvalKind::efficacy, true),
                               fake("a", EvalKind::efficacy, false),
                               fake("a", EvalKind::neighborhood, true)};
  std::vector<EvalRecord> b = {fake("b", EvalKind::efficacy, true),
                               fake("b", EvalKind::neighborhood, false),
                               fake("b", EvalKind::neighborhood, false)};
  std::vector<EvalRecord> both = a;
  both.insert(both.end(), b.begin(), b.end());

  MetricSummary sa = aggregate_run(a, 1.0);
  MetricSummary sb = aggregate_run(b, 1.0);
  MetricSummary sc = aggregate_run(both, 1.0);
  CHECK(sc.es == doctest::Approx((sa.es * sa.n_efficacy + sb.es * sb.n_efficacy) /
                                 (sa.n_efficacy + sb.n_efficacy)));
  CHECK(sc.ns == doctest::Approx((sa.ns * sa.n_neighborhood +
                                  sb.ns * sb.n_neighborhood) /
                                 (sa.n_neighborhood + sb.n_neighborhood)));
}

TEST_CASE("per edit scoring averages per-request harmonic scores") {
  std::vector<EvalRecord> recs = {fake("r1", EvalKind::efficacy, true),
                                  fake("r1", EvalKind::paraphrase, true),
                                  fake("r1", EvalKind::neighborhood, true),
                                  fake("r2", EvalKind::efficacy, true),
                                  fake("r2", EvalKind::paraphrase, true),
                                  fake("r2", EvalKind::neighborhood, false)};
  MetricSummary pooled = aggregate_run(recs, 1.0);
  CHECK(pooled.ns == doctest::Approx(0.5));
  CHECK(pooled.s == doctest::Approx(composite_score(1.0, 1.0, 0.5)));

  MetricSummary per = aggregate_run(recs, 1.0, ScoreMode::per_edit_then_mean);
  // r1 scores 1, r2 scores 0 (zero neighborhood component).
  CHECK(per.s == doctest::Approx(0.5));
  CHECK(per.es == pooled.es);  // rates stay pooled either way
}

TEST_CASE("per position rows slice by edit index") {
  std::vector<EvalRecord> recs;
  for (EvalKind k :
       {EvalKind::efficacy, EvalKind::paraphrase, EvalKind::neighborhood}) {
    recs.push_back(fake("r1", k, true, 0));
    recs.push_back(fake("r2", k, false, 1));
  }
  auto rows = per_position(recs, 2.0);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].position == 0);
  CHECK(rows[1].position == 1);
  CHECK(rows[0].summary.s == doctest::Approx(1.0));
  CHECK(rows[1].summary.s == 0.0);
  CHECK(rows[0].summary.n_efficacy == 1);
  CHECK(rows[1].summary.ppl == 2.0);
}
