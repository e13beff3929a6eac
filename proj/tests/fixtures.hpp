#pragma once

// Small on-disk attack setups built from the synthetic clinical corpus and the
// synthetic victim encoder.

#include <string>

#include "support.hpp"
#include "tei/commands.hpp"
#include "tei/datasets.hpp"
#include "tei/encoder.hpp"
#include "tei/pipeline.hpp"

namespace tei::testing {

struct ToySetup {
  std::size_t leak = 40;
  std::size_t external = 120;
  std::size_t eval = 20;
  std::uint64_t data_seed = 1;
  std::string victim = "synthetic-victim";
};

struct ToyWorkspace {
  TempDir dir;
  std::string leak_path, corpus_path, oracle_path, eval_path;

  explicit ToyWorkspace(const ToySetup& s = {}) {
    leak_path = dir.file("leak.jsonl");
    corpus_path = dir.file("corpus.jsonl");
    oracle_path = dir.file("oracle.jsonl");
    eval_path = dir.file("eval.jsonl");
    auto victim = make_backend(s.victim);
    auto label = [&](const std::vector<std::string>& texts, const std::string& path) {
      save_leak(path, make_pairs(texts, encode_in_batches(*victim, texts, 64)));
    };
    // Disjoint seeds: leak pool, external corpus and evaluation set.
    label(synthetic_clinical_corpus(s.leak, mix_seed(s.data_seed, 1)), leak_path);
    const auto ext = synthetic_clinical_corpus(s.external, mix_seed(s.data_seed, 2));
    save_corpus(corpus_path, ext);
    label(ext, oracle_path);
    label(synthetic_clinical_corpus(s.eval, mix_seed(s.data_seed, 3)), eval_path);
  }

  AttackConfig config(const std::string& name, AttackMode mode = AttackMode::transfer) const {
    AttackConfig c;
    c.name = name;
    c.out_dir = dir.file("runs");
    c.mode = mode;
    c.leak_path = leak_path;
    c.corpus_path = corpus_path;
    c.oracle_path = oracle_path;
    c.eval_path = eval_path;
    c.backbone = "hash-bow";
    c.decoder = "toy-gru:hidden=16,layers=1";
    c.max_len = 24;
    c.learning_rate = 3e-3;
    c.batch_size = 8;
    c.warmup_steps = 2;
    c.total_steps = 10;
    c.disc_hidden = 16;
    c.seed = 3;
    return c;
  }
};

}  // namespace tei::testing
