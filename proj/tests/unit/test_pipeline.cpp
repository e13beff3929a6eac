#include <gtest/gtest.h>

#include <fstream>

#include "fixtures.hpp"
#include "tei/pipeline.hpp"

using namespace tei;
using tei::testing::ToySetup;
using tei::testing::ToyWorkspace;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

struct Prepared {
  PreparedRun run;
  TrainState state;
};

Prepared prepare(const AttackConfig& c) {
  Prepared p{prepare_data(c), {}};
  p.state = init_state(c, p.run.data, p.run.backbone ? p.run.backbone->dimension() : 0);
  tokenize_data(p.run.data, p.state.tokenizer, c.max_len);
  return p;
}

}  // namespace

TEST(Config, JsonRoundTripAndStrictKeys) {
  ToyWorkspace ws;
  auto c = ws.config("rt");
  c.weights.inter = 0.25;
  c.augmentation = {AugmentStrategy::swap, 2, 9};
  auto back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  auto j = to_json(c);
  j["learning_rat"] = 0.1;
  EXPECT_THROW(config_from_json(j), UsageError);
  auto k = to_json(c);
  k["learning_rate"] = "fast";
  EXPECT_THROW(config_from_json(k), UsageError);
}

TEST(Config, DefaultsFollowTrainingRecipe) {
  AttackConfig c;
  EXPECT_DOUBLE_EQ(c.learning_rate, 3e-5);
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_EQ(c.decode, "greedy");
  EXPECT_EQ(c.max_len, 64u);
}

TEST(Config, HashIsStableAndIgnoresBookkeeping) {
  ToyWorkspace ws;
  auto a = ws.config("one"), b = ws.config("two");
  b.out_dir = "/elsewhere";
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a), config_hash(config_from_json(to_json(a))));
  b.learning_rate *= 2;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, Validation) {
  ToyWorkspace ws;
  auto c = ws.config("v");
  c.corpus_path.clear();
  EXPECT_THROW(c.validate(), UsageError);
  c = ws.config("v");
  c.decode = "sampling";
  EXPECT_THROW(c.validate(), UsageError);
  c = ws.config("v");
  c.weights.adv = -1;
  EXPECT_THROW(c.validate(), UsageError);
}

TEST(Sampler, CyclicAndDeterministic) {
  CyclicSampler s(5, 1, 2);
  auto a = s.batch(0, 5), b = s.batch(1, 5);
  std::sort(a.begin(), a.end());
  EXPECT_EQ(a, (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_EQ(CyclicSampler(5, 1, 2).batch(1, 5), b);
  EXPECT_EQ(s.batch(3, 2), CyclicSampler(5, 1, 2).batch(3, 2));
}

TEST(TrainStep, DirectModeReportsZeroSurrogateTerms) {
  ToyWorkspace ws;
  auto p = prepare(ws.config("d", AttackMode::direct));
  EXPECT_FALSE(p.state.adapter.has_value());
  EXPECT_FALSE(p.state.discriminator.has_value());
  auto b = train_step(p.state, p.run.data, {0, 1, 2, 3}, {0, 1});
  EXPECT_EQ(b.intra, 0.0);
  EXPECT_EQ(b.inter, 0.0);
  EXPECT_EQ(b.adv, 0.0);
  EXPECT_EQ(b.disc, 0.0);
  EXPECT_EQ(b.disc_updates, 0);
  EXPECT_GT(b.lm, 0.0);
}

TEST(TrainStep, BreakdownSumsToTotal) {
  ToyWorkspace ws;
  auto c = ws.config("s");
  c.weights = {0.7, 1.3, 2.0, 0.5};
  c.adversarial.adv_weight = 0.5;
  auto p = prepare(c);
  for (long t = 0; t < 5; ++t) {
    auto b = train_step(p.state, p.run.data, {0, 1, 2, 3}, {4, 5, 6});
    EXPECT_NEAR(b.total, 0.7 * b.lm + 1.3 * b.intra + 2.0 * b.inter + 0.5 * b.adv, 1e-6);
    EXPECT_EQ(b.step, t);
  }
}

TEST(TrainStep, LanguageModelOnlyLeavesSurrogateUntouched) {
  ToyWorkspace ws;
  auto c = ws.config("lm");
  c.weights = {1, 0, 0, 0};
  c.adversarial.adv_weight = 0;
  auto p = prepare(c);
  auto direct = prepare(ws.config("lm-direct", AttackMode::direct));
  const auto a0 = nn::checksum(p.state.adapter->parameters());
  const auto d0 = nn::checksum(p.state.discriminator->parameters());
  for (int t = 0; t < 3; ++t) {
    train_step(p.state, p.run.data, {0, 1, 2}, {3, 4});
    train_step(direct.state, direct.run.data, {0, 1, 2}, {3, 4});
  }
  // As in direct mode, only the decoder moves.
  EXPECT_EQ(nn::checksum(p.state.adapter->parameters()), a0);
  EXPECT_EQ(nn::checksum(p.state.discriminator->parameters()), d0);
  EXPECT_EQ(p.state.adversarial_steps, direct.state.adversarial_steps);
  EXPECT_EQ(p.state.main_optimizer.slots().size(), direct.state.main_optimizer.slots().size());
}

TEST(TrainStep, FullModeMovesAdapterAndDiscriminator) {
  ToyWorkspace ws;
  auto p = prepare(ws.config("full"));
  const auto a0 = nn::checksum(p.state.adapter->parameters());
  const auto d0 = nn::checksum(p.state.discriminator->parameters());
  train_step(p.state, p.run.data, {0, 1, 2}, {3, 4});
  EXPECT_NE(nn::checksum(p.state.adapter->parameters()), a0);
  EXPECT_NE(nn::checksum(p.state.discriminator->parameters()), d0);
  EXPECT_EQ(p.state.adversarial_steps, 1);
}

TEST(TrainStep, EmptyExternalBatchInTransferMode) {
  ToyWorkspace ws;
  auto p = prepare(ws.config("e"));
  EXPECT_THROW(train_step(p.state, p.run.data, {0}, {}), UsageError);
}

TEST(Schedule, WarmupThenLinearDecay) {
  const double base = 3e-5;
  for (long t = 0; t < 100; ++t) {
    const double want = t < 10 ? base * (t + 1) / 10.0 : base * (100.0 - t) / 90.0;
    EXPECT_NEAR(nn::warmup_linear_lr(base, t, 10, 100), want, 1e-18);
  }
}

TEST(RunTraining, ZeroStepsWritesInitialCheckpointOnly) {
  ToyWorkspace ws;
  auto c = ws.config("zero");
  c.total_steps = 0;
  auto r = run_training(c);
  EXPECT_EQ(r.checkpoints.size(), 1u);
  EXPECT_TRUE(std::filesystem::exists(checkpoint_path(r.run_dir, 0)));
  EXPECT_EQ(r.logged_steps, 0);
  EXPECT_EQ(slurp(r.metrics_log), "");
}

TEST(RunTraining, LayoutAndLog) {
  ToyWorkspace ws;
  auto c = ws.config("layout");
  c.checkpoint_every = 4;
  auto r = run_training(c);
  for (long k : {0, 4, 8, 10}) EXPECT_TRUE(std::filesystem::exists(checkpoint_path(r.run_dir, k))) << k;
  EXPECT_EQ(r.logged_steps, 10);
  std::ifstream in(r.metrics_log);
  std::string line;
  long expect = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"].get<long>(), expect);
    EXPECT_NEAR(j["lr"].get<double>(), nn::warmup_linear_lr(c.learning_rate, expect, 2, 10), 1e-18);
    ++expect;
  }
  EXPECT_EQ(expect, 10);
}

TEST(RunTraining, RefusesExistingRunWithoutOverwrite) {
  ToyWorkspace ws;
  auto c = ws.config("again");
  c.total_steps = 1;
  run_training(c);
  EXPECT_THROW(run_training(c), UsageError);
  RunOptions o;
  o.overwrite = true;
  EXPECT_NO_THROW(run_training(c, o));
}

TEST(RunTraining, MissingLeakFileNamesPath) {
  ToyWorkspace ws;
  auto c = ws.config("missing");
  c.leak_path = ws.dir.file("nope.jsonl");
  try {
    run_training(c);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("nope.jsonl"), std::string::npos);
  }
}

TEST(RunTraining, DeterministicLog) {
  ToyWorkspace ws;
  auto a = run_training(ws.config("det-a"));
  auto b = run_training(ws.config("det-b"));
  EXPECT_EQ(slurp(a.metrics_log), slurp(b.metrics_log));
  EXPECT_EQ(a.parameter_checksum, b.parameter_checksum);
}

TEST(RunTraining, ResumeMatchesUninterrupted) {
  ToyWorkspace ws;
  auto c = ws.config("full-run");
  c.total_steps = 20;
  c.checkpoint_every = 10;
  auto full = run_training(c);
  auto r = ws.config("resumed");
  r.total_steps = 20;
  r.checkpoint_every = 10;
  r.resume_from = checkpoint_path(full.run_dir, 10);
  auto resumed = run_training(r);
  EXPECT_EQ(resumed.parameter_checksum, full.parameter_checksum);
  EXPECT_EQ(resumed.logged_steps, 10);
}

TEST(RunTraining, ResumeInPlaceTruncatesLog) {
  ToyWorkspace ws;
  auto c = ws.config("inplace");
  c.total_steps = 12;
  c.checkpoint_every = 6;
  auto first = run_training(c);
  const auto log_before = slurp(first.metrics_log);
  c.resume_from = checkpoint_path(first.run_dir, 6);
  auto second = run_training(c);
  EXPECT_EQ(slurp(second.metrics_log), log_before);
  EXPECT_EQ(second.parameter_checksum, first.parameter_checksum);
}

TEST(RunTraining, ResumeRejectsDifferentConfig) {
  ToyWorkspace ws;
  auto c = ws.config("base");
  auto r = run_training(c);
  auto other = ws.config("other");
  other.learning_rate = 1e-2;
  other.resume_from = r.checkpoint;
  EXPECT_THROW(run_training(other), UsageError);
}

TEST(RunTraining, DivergenceKeepsLastGoodCheckpoint) {
  ToyWorkspace ws;
  // Embeddings large enough that the squared error overflows.
  std::vector<LeakedPair> huge;
  for (auto& p : load_leak(ws.leak_path)) {
    for (auto& v : p.embedding) v *= 1e200;
    huge.push_back(p);
  }
  save_leak(ws.dir.file("huge.jsonl"), huge);
  auto c = ws.config("diverge");
  c.leak_path = ws.dir.file("huge.jsonl");
  try {
    run_training(c);
    FAIL();
  } catch (const DivergenceError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 0"), std::string::npos) << msg;
    EXPECT_NE(msg.find("step-0"), std::string::npos) << msg;
  }
  EXPECT_TRUE(std::filesystem::exists(checkpoint_path(ws.dir.file("runs/diverge"), 0)));
}

TEST(RunTraining, OracleAndDirectModes) {
  ToyWorkspace ws;
  auto o = run_training(ws.config("oracle", AttackMode::oracle));
  EXPECT_EQ(o.steps, 10);
  auto d = run_training(ws.config("direct", AttackMode::direct));
  EXPECT_EQ(d.adversarial_steps, 0);
}

TEST(RunTraining, AugmentationGrowsSurrogatePool) {
  ToyWorkspace ws;
  auto c = ws.config("aug");
  c.augmentation = {AugmentStrategy::swap, 2, 5};
  auto p = prepare_data(c);
  EXPECT_EQ(p.data.ext_texts.size(), 120u + 2u * 40u);
  EXPECT_EQ(std::count(p.data.ext_origin.begin(), p.data.ext_origin.end(), Origin::augmented), 80);
  EXPECT_EQ(p.data.ext_backbone.rows(), 200);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  ToyWorkspace ws;
  auto r = run_training(ws.config("ckpt"));
  TrainState s = load_checkpoint(r.checkpoint);
  EXPECT_EQ(s.step, 10);
  EXPECT_EQ(s.parameter_checksum(), r.parameter_checksum);
  const std::string again = ws.dir.file("again.bin");
  save_checkpoint(again, s);
  EXPECT_EQ(slurp(again), slurp(r.checkpoint));
}

TEST(Checkpoint, CorruptFileIsParseError) {
  ToyWorkspace ws;
  std::ofstream(ws.dir.file("bad.bin")) << "definitely not a checkpoint";
  EXPECT_THROW(load_checkpoint(ws.dir.file("bad.bin")), ParseError);
}

TEST(RunAttack, ContractExamples) {
  ToyWorkspace ws;
  auto r = run_training(ws.config("attack"));
  auto pairs = load_leak(ws.eval_path);
  EXPECT_TRUE(run_attack(r.checkpoint, {}, DecodeStrategy::greedy()).empty());
  auto a = run_attack(r.checkpoint, pairs, DecodeStrategy::greedy());
  auto b = run_attack(r.checkpoint, pairs, DecodeStrategy::greedy());
  ASSERT_EQ(a.size(), pairs.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].truth, pairs[i].text);
    EXPECT_EQ(a[i].reconstruction, b[i].reconstruction);
  }
  std::vector<LeakedPair> wrong{{"x", {1.0, 2.0}}};
  EXPECT_THROW(run_attack(r.checkpoint, wrong, DecodeStrategy::greedy()), DimensionError);
}

TEST(RunAttack, MemorizedPairIsReconstructed) {
  ToySetup setup;
  setup.leak = 1;
  ToyWorkspace ws(setup);
  auto c = ws.config("memo", AttackMode::direct);
  c.decoder = "toy-gru:hidden=32,layers=1";
  c.learning_rate = 1e-2;
  c.warmup_steps = 0;
  c.total_steps = 200;
  c.batch_size = 1;
  c.weight_decay = 0;
  auto r = run_training(c);
  auto leak = load_leak(ws.leak_path);
  auto out = run_attack(r.checkpoint, leak, DecodeStrategy::greedy());
  EXPECT_EQ(out[0].reconstruction, leak[0].text);
}
