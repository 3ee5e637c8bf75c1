#include "kelab/tokenizer.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "kelab/errors.hpp"

namespace kelab {

std::vector<std::string> Tokenizer::split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

Tokenizer Tokenizer::from_words(std::vector<std::string> words) {
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return from_table(std::move(words));
}

Tokenizer Tokenizer::from_sentences(const std::vector<std::string>& sentences) {
  std::set<std::string> words;
  for (const auto& s : sentences) {
    for (auto& w : split_words(s)) words.insert(std::move(w));
  }
  return from_table(std::vector<std::string>(words.begin(), words.end()));
}

Tokenizer Tokenizer::from_table(std::vector<std::string> table) {
  Tokenizer t;
  t.table_ = std::move(table);
  for (int i = 0; i < static_cast<int>(t.table_.size()); ++i) {
    auto [it, fresh] = t.index_.emplace(t.table_[i], i);
    if (!fresh) {
      throw DataError("tokenizer: duplicate token '" + t.table_[i] + "'");
    }
  }
  return t;
}

int Tokenizer::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) {
    throw DataError("tokenizer: out-of-vocabulary token '" + token + "'");
  }
  return it->second;
}

bool Tokenizer::contains(const std::string& token) const {
  return index_.count(token) != 0;
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || id >= size()) {
    throw DataError("tokenizer: id " + std::to_string(id) + " out of range");
  }
  return table_[static_cast<size_t>(id)];
}

std::vector<int> Tokenizer::encode(const std::string& text) const {
  std::vector<int> ids;
  for (const auto& w : split_words(text)) ids.push_back(id(w));
  return ids;
}

std::string Tokenizer::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

}  // namespace kelab
