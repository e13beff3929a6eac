#pragma once

#include <algorithm>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace tei::text {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }
inline bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_space(s[i])) ++i;
    std::size_t j = i;
    while (j < s.size() && !is_space(s[j])) ++j;
    if (j > i) out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& tokens, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += sep;
    out += tokens[i];
  }
  return out;
}

// Lowercase and collapse runs of whitespace into single spaces.
inline std::string normalize_surface(std::string_view s) { return join(split_whitespace(lower(s))); }

// Lowercase, punctuation replaced by spaces, whitespace split. Used by RougeL.
inline std::vector<std::string> metric_tokens(std::string_view s) {
  std::string cleaned = lower(s);
  for (char& c : cleaned)
    if (is_punct(c)) c = ' ';
  return split_whitespace(cleaned);
}

// Lowercase tokens with leading/trailing punctuation removed; inner hyphens survive.
inline std::vector<std::string> bag_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (auto& tok : split_whitespace(lower(s))) {
    std::size_t b = 0, e = tok.size();
    while (b < e && is_punct(tok[b])) ++b;
    while (e > b && is_punct(tok[e - 1])) --e;
    if (e > b) out.push_back(tok.substr(b, e - b));
  }
  return out;
}

// Text up to and including the first sentence terminator followed by whitespace or end.
inline std::string first_sentence(std::string_view s) {
  std::string t = trim(s);
  for (std::size_t i = 0; i < t.size(); ++i) {
    char c = t[i];
    if ((c == '.' || c == '!' || c == '?') && (i + 1 == t.size() || is_space(t[i + 1])))
      return t.substr(0, i + 1);
  }
  return t;
}

}  // namespace tei::text
