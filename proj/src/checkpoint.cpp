#include "kelab/checkpoint.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"
#include "kelab/errors.hpp"

namespace kelab {

namespace {

constexpr char kMagic[6] = {'K', 'E', 'L', 'A', 'B', '1'};
constexpr std::uint32_t kVersion = 1;

const std::array<std::uint32_t, 256>& crc_table() {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) {
        c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      }
      t[i] = c;
    }
    return t;
  }();
  return table;
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_matrix(std::string& out, const Mat& m) {
  // Mat is row-major, so the raw buffer already has the documented order.
  const auto bytes = static_cast<size_t>(m.size()) * sizeof(double);
  const size_t at = out.size();
  out.resize(at + bytes);
  std::memcpy(out.data() + at, m.data(), bytes);
}

void put_vector(std::string& out, const Vec& v) {
  const auto bytes = static_cast<size_t>(v.size()) * sizeof(double);
  const size_t at = out.size();
  out.resize(at + bytes);
  std::memcpy(out.data() + at, v.data(), bytes);
}

class Reader {
 public:
  Reader(const std::string& buf, const std::string& path)
      : buf_(buf), path_(path) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(
               static_cast<unsigned char>(buf_[at_ + static_cast<size_t>(i)]))
           << (8 * i);
    }
    at_ += 4;
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(
               static_cast<unsigned char>(buf_[at_ + static_cast<size_t>(i)]))
           << (8 * i);
    }
    at_ += 8;
    return v;
  }

  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = buf_.substr(at_, n);
    at_ += n;
    return s;
  }

  void matrix(Mat& m, Eigen::Index rows, Eigen::Index cols) {
    m.resize(rows, cols);
    const auto bytes = static_cast<std::uint64_t>(rows) *
                       static_cast<std::uint64_t>(cols) * sizeof(double);
    need(bytes);
    std::memcpy(m.data(), buf_.data() + at_, bytes);
    at_ += bytes;
  }

  void vector(Vec& v, Eigen::Index dim) {
    v.resize(dim);
    const auto bytes = static_cast<std::uint64_t>(dim) * sizeof(double);
    need(bytes);
    std::memcpy(v.data(), buf_.data() + at_, bytes);
    at_ += bytes;
  }

  size_t at() const { return at_; }
  size_t remaining() const { return buf_.size() - at_; }

 private:
  void need(std::uint64_t n) {
    if (buf_.size() - at_ < n) {
      throw ParseError("checkpoint " + path_ + " truncated at byte " +
                       std::to_string(at_));
    }
  }
  const std::string& buf_;
  std::string path_;
  size_t at_ = 0;
};

std::string activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "gelu";
}

Activation activation_from(const std::string& s, const std::string& path) {
  if (s == "gelu") return Activation::gelu;
  if (s == "relu") return Activation::relu;
  throw ParseError("checkpoint " + path + ": unknown activation '" + s + "'");
}

}  // namespace

std::uint32_t crc32(const unsigned char* data, std::size_t len,
                    std::uint32_t seed) {
  std::uint32_t c = seed ^ 0xFFFFFFFFu;
  const auto& t = crc_table();
  for (std::size_t i = 0; i < len; ++i) {
    c = t[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  }
  return c ^ 0xFFFFFFFFu;
}

void save_checkpoint(const Model& model, const std::string& path) {
  const ModelConfig& cfg = model.config;
  cfg.validate();
  if (model.tokenizer.size() != cfg.vocab_size) {
    throw ConfigError("save_checkpoint: tokenizer size " +
                      std::to_string(model.tokenizer.size()) +
                      " != vocab_size " + std::to_string(cfg.vocab_size));
  }
  if (!model.weights.all_finite()) {
    throw DataError("save_checkpoint: non-finite weights");
  }

  nlohmann::ordered_json header;
  header["config"]["n_layers"] = cfg.n_layers;
  header["config"]["d_model"] = cfg.d_model;
  header["config"]["n_heads"] = cfg.n_heads;
  header["config"]["d_mlp"] = cfg.d_mlp;
  header["config"]["vocab_size"] = cfg.vocab_size;
  header["config"]["max_seq_len"] = cfg.max_seq_len;
  header["config"]["activation"] = activation_name(cfg.activation);
  header["config"]["ln_epsilon"] = cfg.ln_epsilon;
  header["tokens"] = model.tokenizer.table();
  const std::string header_text = header.dump();

  std::string payload;
  put_u32(payload, kVersion);
  put_u64(payload, header_text.size());
  payload += header_text;
  put_matrix(payload, model.weights.emb);
  put_matrix(payload, model.weights.pos);
  for (const auto& l : model.weights.layers) {
    put_matrix(payload, l.wq);
    put_matrix(payload, l.wk);
    put_matrix(payload, l.wv);
    put_matrix(payload, l.wo);
    put_vector(payload, l.ln1_g);
    put_vector(payload, l.ln1_b);
    put_matrix(payload, l.w_fc);
    put_matrix(payload, l.w_proj);
    put_vector(payload, l.ln2_g);
    put_vector(payload, l.ln2_b);
  }
  put_matrix(payload, model.weights.decode);
  const std::uint32_t crc = crc32(
      reinterpret_cast<const unsigned char*>(payload.data()), payload.size());

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_checkpoint: cannot open " + tmp);
    f.write(kMagic, sizeof(kMagic));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    std::string tail;
    put_u32(tail, crc);
    f.write(tail.data(), 4);
    if (!f) throw IoError("save_checkpoint: write failed on " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("save_checkpoint: rename to " + path + " failed");
  }
}

Model load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kMagic) + 4 ||
      std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("load_checkpoint: " + path + " is not a KELAB1 file");
  }

  // The reader walks everything after the magic; the trailing 4 bytes are the
  // checksum and must still be there once the tensors are consumed.
  const std::string payload = buf.substr(sizeof(kMagic));
  Reader r(payload, path);
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw VersionError("load_checkpoint: " + path + " has format version " +
                       std::to_string(version) + ", expected " +
                       std::to_string(kVersion));
  }
  const std::uint64_t header_len = r.u64();
  const std::string header_text = r.bytes(header_len);

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError("load_checkpoint: bad header JSON in " + path + ": " +
                     e.what());
  }

  Model model;
  try {
    const auto& c = header.at("config");
    model.config.n_layers = c.at("n_layers").get<int>();
    model.config.d_model = c.at("d_model").get<int>();
    model.config.n_heads = c.at("n_heads").get<int>();
    model.config.d_mlp = c.at("d_mlp").get<int>();
    model.config.vocab_size = c.at("vocab_size").get<int>();
    model.config.max_seq_len = c.at("max_seq_len").get<int>();
    model.config.activation =
        activation_from(c.at("activation").get<std::string>(), path);
    model.config.ln_epsilon = c.at("ln_epsilon").get<double>();
    model.tokenizer = Tokenizer::from_table(
        header.at("tokens").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("load_checkpoint: header of " + path +
                     " is missing fields: " + e.what());
  }
  model.config.validate();
  if (model.tokenizer.size() != model.config.vocab_size) {
    throw ParseError("load_checkpoint: token table size does not match "
                     "vocab_size in " + path);
  }

  // With the shapes known, the exact file size is known too. Distinguish a
  // cut-off file from a corrupted one before touching the checksum.
  const ModelConfig& cfg = model.config;
  {
    std::uint64_t values = 0;
    values += static_cast<std::uint64_t>(cfg.vocab_size) * cfg.d_model;  // emb
    values += static_cast<std::uint64_t>(cfg.max_seq_len) * cfg.d_model; // pos
    std::uint64_t per_layer = 4ULL * cfg.d_model * cfg.d_model +
                              2ULL * static_cast<std::uint64_t>(cfg.d_mlp) * cfg.d_model +
                              4ULL * cfg.d_model;
    values += static_cast<std::uint64_t>(cfg.n_layers) * per_layer;
    values += static_cast<std::uint64_t>(cfg.vocab_size) * cfg.d_model;  // decode
    const std::uint64_t expected =
        sizeof(kMagic) + 4 + 8 + header_len + values * 8 + 4;
    if (buf.size() < expected) {
      throw ParseError("load_checkpoint: " + path + " truncated at byte " +
                       std::to_string(buf.size()) + ", expected " +
                       std::to_string(expected));
    }
    if (buf.size() > expected) {
      throw ParseError("load_checkpoint: " +
                       std::to_string(buf.size() - expected) +
                       " trailing bytes in " + path);
    }
    const std::string tail = buf.substr(buf.size() - 4);
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i) {
      stored |= static_cast<std::uint32_t>(
                    static_cast<unsigned char>(tail[static_cast<size_t>(i)]))
                << (8 * i);
    }
    const std::uint32_t computed = crc32(
        reinterpret_cast<const unsigned char*>(buf.data() + sizeof(kMagic)),
        buf.size() - sizeof(kMagic) - 4);
    if (stored != computed) {
      throw CrcError("load_checkpoint: CRC mismatch in " + path);
    }
  }
  TransformerWeights& w = model.weights;
  r.matrix(w.emb, cfg.vocab_size, cfg.d_model);
  r.matrix(w.pos, cfg.max_seq_len, cfg.d_model);
  w.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& l : w.layers) {
    r.matrix(l.wq, cfg.d_model, cfg.d_model);
    r.matrix(l.wk, cfg.d_model, cfg.d_model);
    r.matrix(l.wv, cfg.d_model, cfg.d_model);
    r.matrix(l.wo, cfg.d_model, cfg.d_model);
    r.vector(l.ln1_g, cfg.d_model);
    r.vector(l.ln1_b, cfg.d_model);
    r.matrix(l.w_fc, cfg.d_mlp, cfg.d_model);
    r.matrix(l.w_proj, cfg.d_model, cfg.d_mlp);
    r.vector(l.ln2_g, cfg.d_model);
    r.vector(l.ln2_b, cfg.d_model);
  }
  r.matrix(w.decode, cfg.vocab_size, cfg.d_model);
  if (r.remaining() != 4) {
    throw ParseError("load_checkpoint: tensor stream out of step in " + path);
  }
  return model;
}

}  // namespace kelab
