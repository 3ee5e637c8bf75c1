#ifndef KELAB_TOKENIZER_HPP_
#define KELAB_TOKENIZER_HPP_

#include <string>
#include <unordered_map>
#include <vector>

namespace kelab {

// Closed-world atomic tokenizer: every entity, relation word, and template
// word is one whitespace-delimited token. Ids are assigned by sorted token
// order at build time, so the same word set always yields the same table.
class Tokenizer {
 public:
  Tokenizer() = default;

  static Tokenizer from_words(std::vector<std::string> words);
  static Tokenizer from_sentences(const std::vector<std::string>& sentences);

  // Rebuilds from an already-ordered table (checkpoint load).
  static Tokenizer from_table(std::vector<std::string> table);

  int id(const std::string& token) const;        // throws on OOV
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  int size() const { return static_cast<int>(table_.size()); }
  const std::vector<std::string>& table() const { return table_; }

  static std::vector<std::string> split_words(const std::string& text);

 private:
  std::vector<std::string> table_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace kelab

#endif  // KELAB_TOKENIZER_HPP_
