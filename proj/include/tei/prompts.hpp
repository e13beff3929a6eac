#pragma once

// Wire templates for the two LLM-backed features. Both are sent byte-for-byte
// (spelling included) with only the placeholders substituted.

#include <string>
#include <string_view>

namespace tei::prompts {

inline constexpr std::string_view augmentation_template =
    "Please rewrite the original sentence with synonyms within 2 words.\n"
    "Please output 5 different new sentences.\n"
    "Please simply modify the original sentence without changing more than 2 words.\n"
    "\n"
    "Example:\n"
    "Original sentence:\n"
    "{ORIGINAL SENTENCE}\n"
    "New sentence:\n"
    "{NEW SENTENCE 1}\n"
    "{NEW SENTENCE 2}\n"
    "{NEW SENTENCE 3}\n"
    "{NEW SENTENCE 4}\n"
    "{NEW SENTENCE 5}\n"
    "\n"
    "Original sentence:\n"
    "{INPUT SENTENCE}\n"
    "New sentence:";

inline constexpr std::string_view judge_template =
    "Output a number between 0 and 1 describing the semantic similiarity, fluent ,and coherent between the "
    "following two sentences: please output the answer without any explaination.\n"
    "{pred sentence}\n"
    "{ground truth sentence}";

inline std::string substitute(std::string_view tmpl, std::string_view placeholder, std::string_view value) {
  std::string out(tmpl);
  auto pos = out.find(placeholder);
  if (pos != std::string::npos) out.replace(pos, placeholder.size(), value);
  return out;
}

inline std::string augmentation_prompt(std::string_view input) {
  return substitute(augmentation_template, "{INPUT SENTENCE}", input);
}

// Positions are taken from the template so sentence text containing a
// placeholder is never re-substituted.
inline std::string judge_prompt(std::string_view prediction, std::string_view ground_truth) {
  constexpr std::string_view pred_ph = "{pred sentence}";
  constexpr std::string_view truth_ph = "{ground truth sentence}";
  const auto p1 = judge_template.find(pred_ph);
  const auto p2 = judge_template.find(truth_ph);
  std::string out(judge_template.substr(0, p1));
  out += prediction;
  out += judge_template.substr(p1 + pred_ph.size(), p2 - p1 - pred_ph.size());
  out += ground_truth;
  out += judge_template.substr(p2 + truth_ph.size());
  return out;
}

}  // namespace tei::prompts
