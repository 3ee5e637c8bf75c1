#include <cstdio>
#include <filesystem>
#include <limits>
#include <unistd.h>
#include <fstream>
#include <sstream>
#include <vector>

#include "doctest.h"

#include "kelab/checkpoint.hpp"
#include "kelab/errors.hpp"
#include "kelab/model.hpp"
#include "kelab/rng.hpp"
#include "kelab/train.hpp"

using namespace kelab;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_mlp = 32;
  cfg.vocab_size = 12;
  cfg.max_seq_len = 16;
  return cfg;
}

bool weights_equal(const TransformerWeights& a, const TransformerWeights& b) {
  if (a.emb != b.emb || a.pos != b.pos || a.decode != b.decode) return false;
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& x = a.layers[l];
    const auto& y = b.layers[l];
    if (x.wq != y.wq || x.wk != y.wk || x.wv != y.wv || x.wo != y.wo) return false;
    if (x.ln1_g != y.ln1_g || x.ln1_b != y.ln1_b) return false;
    if (x.w_fc != y.w_fc || x.w_proj != y.w_proj) return false;
    if (x.ln2_g != y.ln2_g || x.ln2_b != y.ln2_b) return false;
  }
  return true;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  std::filesystem::path dir;
  TempDir() {
    dir = std::filesystem::temp_directory_path() /
          ("kelab-test-" + std::to_string(::getpid()));
    std::filesystem::create_directories(dir);
  }
  ~TempDir() { std::filesystem::remove_all(dir); }
  std::string path(const std::string& name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("training is deterministic for a fixed seed") {
  ModelConfig cfg = tiny_config();
  std::vector<std::vector<int>> corpus = {{1, 2, 3}, {4, 5, 6}, {7, 8, 9, 10}};
  TrainConfig hyper;
  hyper.steps = 5;
  hyper.batch_size = 2;
  hyper.lr = 0.1;
  hyper.seed = 42;
  hyper.log_every = 0;
  TrainResult a = train(cfg, corpus, hyper);
  TrainResult b = train(cfg, corpus, hyper);
  CHECK(weights_equal(a.weights, b.weights));
  CHECK(a.final_loss == b.final_loss);

  hyper.seed = 43;
  TrainResult c = train(cfg, corpus, hyper);
  CHECK_FALSE(weights_equal(a.weights, c.weights));
}

TEST_CASE("zero learning rate returns the untouched init") {
  ModelConfig cfg = tiny_config();
  std::vector<std::vector<int>> corpus = {{1, 2, 3}};
  TrainConfig hyper;
  hyper.steps = 3;
  hyper.lr = 0.0;
  hyper.seed = 7;
  hyper.log_every = 0;
  TrainResult r = train(cfg, corpus, hyper);

  SeededRng rng(7);
  TransformerWeights init = TransformerWeights::init(cfg, rng, hyper.init_std);
  CHECK(weights_equal(r.weights, init));
}

TEST_CASE("a single repeated sentence is memorized") {
  ModelConfig cfg = tiny_config();
  std::vector<std::vector<int>> corpus = {{3, 7, 11, 2}};
  TrainConfig hyper;
  hyper.steps = 300;
  hyper.batch_size = 4;
  hyper.lr = 0.2;
  hyper.seed = 1;
  hyper.log_every = 0;
  TrainResult r = train(cfg, corpus, hyper);
  CHECK(r.final_loss < 0.05);

  double recall = fact_recall(r.weights, cfg,
                              {{{3}, 7}, {{3, 7}, 11}, {{3, 7, 11}, 2}});
  CHECK(recall == 1.0);
}

TEST_CASE("training rejects bad corpora") {
  ModelConfig cfg = tiny_config();
  TrainConfig hyper;
  hyper.steps = 1;
  hyper.log_every = 0;
  CHECK_THROWS_AS(train(cfg, {}, hyper), TrainingError);
  CHECK_THROWS_AS(train(cfg, {{5}}, hyper), TrainingError);
  CHECK_THROWS_AS(train(cfg, {{1, 99}}, hyper), TrainingError);
  std::vector<int> long_seq(cfg.max_seq_len + 1, 1);
  CHECK_THROWS_AS(train(cfg, {long_seq}, hyper), TrainingError);
}

TEST_CASE("a diverging run reports the failing step") {
  ModelConfig cfg = tiny_config();
  std::vector<std::vector<int>> corpus = {{1, 2, 3, 4, 5}};
  TrainConfig hyper;
  hyper.steps = 2000;
  hyper.batch_size = 4;
  hyper.lr = 1e6;  // guaranteed blow-up
  hyper.clip_norm = 0.0;
  hyper.seed = 3;
  hyper.log_every = 0;
  try {
    train(cfg, corpus, hyper);
    FAIL("expected TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("fused batch step matches the per-sequence reference path") {
  SeededRng rng(2024);
  for (int trial = 0; trial < 4; ++trial) {
    ModelConfig cfg;
    cfg.n_layers = 2 + trial % 2;
    cfg.d_model = 16;
    cfg.n_heads = (trial % 2) ? 4 : 2;
    cfg.d_mlp = 40;
    cfg.vocab_size = 30;
    cfg.max_seq_len = 10;
    cfg.activation = (trial % 2) ? Activation::relu : Activation::gelu;
    TransformerWeights w = TransformerWeights::init(cfg, rng, 0.2);

    std::vector<std::vector<int>> seqs;
    for (int s = 0; s < 6; ++s) {
      std::vector<int> q;
      const int len = 2 + static_cast<int>(rng.uniform_int(8));
      for (int i = 0; i < len; ++i)
        q.push_back(static_cast<int>(rng.uniform_int(30)));
      seqs.push_back(std::move(q));
    }
    std::vector<const std::vector<int>*> batch;
    int preds = 0;
    for (const auto& q : seqs) {
      batch.push_back(&q);
      preds += static_cast<int>(q.size()) - 1;
    }

    WeightGrads fused = WeightGrads::zeros(cfg);
    WeightGrads ref = WeightGrads::zeros(cfg);
    const double loss_fused = train_step_fused(w, cfg, batch, preds, fused);
    const double loss_ref = train_step_reference(w, cfg, batch, preds, ref);
    CHECK(loss_fused == doctest::Approx(loss_ref).epsilon(1e-12));

    auto close = [](const Mat& a, const Mat& b) {
      return (a - b).cwiseAbs().maxCoeff() <=
             1e-10 * std::max(1.0, b.cwiseAbs().maxCoeff());
    };
    auto close_v = [](const Vec& a, const Vec& b) {
      return (a - b).cwiseAbs().maxCoeff() <=
             1e-10 * std::max(1.0, b.cwiseAbs().maxCoeff());
    };
    CHECK(close(fused.emb, ref.emb));
    CHECK(close(fused.pos, ref.pos));
    CHECK(close(fused.decode, ref.decode));
    for (std::size_t l = 0; l < fused.layers.size(); ++l) {
      CHECK(close(fused.layers[l].wq, ref.layers[l].wq));
      CHECK(close(fused.layers[l].wk, ref.layers[l].wk));
      CHECK(close(fused.layers[l].wv, ref.layers[l].wv));
      CHECK(close(fused.layers[l].wo, ref.layers[l].wo));
      CHECK(close(fused.layers[l].w_fc, ref.layers[l].w_fc));
      CHECK(close(fused.layers[l].w_proj, ref.layers[l].w_proj));
      CHECK(close_v(fused.layers[l].ln1_g, ref.layers[l].ln1_g));
      CHECK(close_v(fused.layers[l].ln1_b, ref.layers[l].ln1_b));
      CHECK(close_v(fused.layers[l].ln2_g, ref.layers[l].ln2_g));
      CHECK(close_v(fused.layers[l].ln2_b, ref.layers[l].ln2_b));
    }
  }
}

TEST_CASE("checkpoint round trip preserves weights and logits bitwise") {
  TempDir tmp;
  ModelConfig cfg = tiny_config();
  SeededRng rng(11);
  Model m{cfg, Tokenizer::from_words({"a", "b", "c", "d", "e", "f", "g", "h",
                                      "i", "j", "k", "l"}),
          TransformerWeights::init(cfg, rng, 0.02)};

  std::string path = tmp.path("model.kck");
  save_checkpoint(m, path);
  Model loaded = load_checkpoint(path);

  CHECK(loaded.config.n_layers == cfg.n_layers);
  CHECK(loaded.config.d_model == cfg.d_model);
  CHECK(loaded.tokenizer.size() == 12);
  CHECK(loaded.tokenizer.id("c") == m.tokenizer.id("c"));
  CHECK(weights_equal(loaded.weights, m.weights));

  std::vector<int> ids = {0, 3, 5};
  ForwardResult before = forward(m.weights, m.config, ids);
  ForwardResult after = forward(loaded.weights, loaded.config, ids);
  CHECK(before.logits == after.logits);

  // Saving the loaded model again reproduces the file byte for byte.
  std::string path2 = tmp.path("model2.kck");
  save_checkpoint(loaded, path2);
  CHECK(read_bytes(path) == read_bytes(path2));
}

TEST_CASE("checkpoint detects corruption, truncation, and version skew") {
  TempDir tmp;
  ModelConfig cfg = tiny_config();
  SeededRng rng(5);
  Model m{cfg, Tokenizer::from_words({"a", "b", "c", "d", "e", "f", "g", "h",
                                      "i", "j", "k", "l"}),
          TransformerWeights::init(cfg, rng, 0.02)};
  std::string path = tmp.path("model.kck");
  save_checkpoint(m, path);
  std::string bytes = read_bytes(path);

  SUBCASE("flipped payload byte fails the checksum") {
    std::string bad = bytes;
    bad[bad.size() / 2] ^= 0x01;
    std::string bad_path = tmp.path("bad.kck");
    std::ofstream(bad_path, std::ios::binary) << bad;
    CHECK_THROWS_AS(load_checkpoint(bad_path), CrcError);
  }

  SUBCASE("truncated file reports the byte offset") {
    std::string cut = bytes.substr(0, bytes.size() - 17);
    std::string cut_path = tmp.path("cut.kck");
    std::ofstream(cut_path, std::ios::binary) << cut;
    try {
      load_checkpoint(cut_path);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    }
  }

  SUBCASE("wrong magic is a parse error") {
    std::string bad = bytes;
    bad[0] = 'X';
    std::string bad_path = tmp.path("magic.kck");
    std::ofstream(bad_path, std::ios::binary) << bad;
    CHECK_THROWS_AS(load_checkpoint(bad_path), ParseError);
  }

  SUBCASE("bumped format version is rejected after the checksum passes") {
    // Rewrite the version field and refresh the trailing CRC so only the
    // version check can fail.
    std::string bad = bytes;
    bad[6] = 2;
    std::size_t body_len = bad.size() - 6 - 4;
    std::uint32_t crc =
        crc32(reinterpret_cast<const unsigned char*>(bad.data() + 6), body_len);
    for (int i = 0; i < 4; ++i)
      bad[bad.size() - 4 + static_cast<std::size_t>(i)] =
          static_cast<char>((crc >> (8 * i)) & 0xFF);
    std::string bad_path = tmp.path("vers.kck");
    std::ofstream(bad_path, std::ios::binary) << bad;
    CHECK_THROWS_AS(load_checkpoint(bad_path), VersionError);
  }

  SUBCASE("missing file is an io error") {
    CHECK_THROWS_AS(load_checkpoint(tmp.path("absent.kck")), IoError);
  }
}

TEST_CASE("checkpoint refuses nonfinite weights") {
  TempDir tmp;
  ModelConfig cfg = tiny_config();
  SeededRng rng(5);
  Model m{cfg, Tokenizer::from_words({"a", "b", "c", "d", "e", "f", "g", "h",
                                      "i", "j", "k", "l"}),
          TransformerWeights::init(cfg, rng, 0.02)};
  m.weights.emb(0, 0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(save_checkpoint(m, tmp.path("nan.kck")), DataError);
}
