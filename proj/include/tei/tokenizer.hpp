#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "tei/errors.hpp"
#include "tei/text.hpp"

namespace tei {

// Token ids in [0, |V|). Complete sequences are [BOS, w_1, ..., w_u] with w_u = EOS.
using TokenSequence = std::vector<int>;

// Lowercased word-level tokenizer; punctuation at word edges becomes its own token.
class WordTokenizer {
 public:
  static constexpr int bos = 0;
  static constexpr int eos = 1;
  static constexpr int unk = 2;

  WordTokenizer() : vocab_{"<bos>", "<eos>", "<unk>"} { reindex(); }

  explicit WordTokenizer(std::vector<std::string> vocab) : vocab_(std::move(vocab)) {
    if (vocab_.size() < 3 || vocab_[0] != "<bos>" || vocab_[1] != "<eos>" || vocab_[2] != "<unk>")
      throw ParseError("tokenizer vocabulary must start with <bos>, <eos>, <unk>");
    reindex();
  }

  // Most frequent words first (ties broken alphabetically), capped at max_vocab
  // entries including the three specials.
  static WordTokenizer build(const std::vector<std::string>& texts, std::size_t max_vocab) {
    if (max_vocab < 4) throw UsageError("vocabulary size must be at least 4");
    std::map<std::string, long> counts;
    for (const auto& t : texts)
      for (auto& w : split(t)) ++counts[w];
    std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> vocab{"<bos>", "<eos>", "<unk>"};
    for (const auto& [w, c] : ranked) {
      if (vocab.size() >= max_vocab) break;
      vocab.push_back(w);
    }
    return WordTokenizer(std::move(vocab));
  }

  static std::vector<std::string> split(const std::string& s) {
    std::vector<std::string> out;
    for (const auto& word : text::split_whitespace(text::lower(s))) {
      std::size_t b = 0, e = word.size();
      std::vector<std::string> tail;
      while (b < e && text::is_punct(word[b])) out.emplace_back(1, word[b++]);
      while (e > b && text::is_punct(word[e - 1])) tail.emplace_back(1, word[--e]);
      if (e > b) out.push_back(word.substr(b, e - b));
      out.insert(out.end(), tail.rbegin(), tail.rend());
    }
    return out;
  }

  std::size_t size() const { return vocab_.size(); }
  const std::vector<std::string>& vocabulary() const { return vocab_; }

  int id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? unk : it->second;
  }

  // [BOS, words..., EOS]; words are truncated so that at most max_len tokens follow BOS.
  TokenSequence encode(const std::string& s, std::size_t max_len) const {
    if (max_len < 1) throw UsageError("max_len must be >= 1");
    TokenSequence ids{bos};
    for (const auto& w : split(s)) {
      if (ids.size() >= max_len) break;
      ids.push_back(id(w));
    }
    ids.push_back(eos);
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (int t : ids) {
      if (t == bos || t == eos) continue;
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_.size())
        throw VocabularyError("token id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(vocab_.size()));
      const std::string& w = vocab_[static_cast<std::size_t>(t)];
      const bool attach = w.size() == 1 && text::is_punct(w[0]) && w != "(" && w != "\"";
      if (!out.empty() && !attach) out += ' ';
      out += w;
    }
    return out;
  }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < vocab_.size(); ++i) index_[vocab_[i]] = static_cast<int>(i);
  }

  std::vector<std::string> vocab_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace tei
