#include <gtest/gtest.h>

#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdlib>

#include "support.hpp"
#include "tei/encoder.hpp"
#include "tei/remote.hpp"

using namespace tei;
using tei::testing::MockServer;

TEST(EncodeBatch, IdenticalTextsGiveIdenticalRows) {
  HashingBackbone b(16, 3);
  auto e = encode_batch(b, {"the same words", "the same words", "other words"});
  EXPECT_EQ(e.row(0), e.row(1));
  EXPECT_NE(e.row(0), e.row(2));
}

TEST(EncodeBatch, SingleTextShape) {
  HashingBackbone b(4, 1);
  auto e = encode_batch(b, {"a"});
  ASSERT_EQ(e.rows(), 1);
  ASSERT_EQ(e.cols(), 4);
  EXPECT_TRUE(e.allFinite());
}

TEST(EncodeBatch, RepeatedCallsAreDeterministic) {
  HashingBackbone b(32, 9);
  std::vector<std::string> texts{"fever and cough", "a b c d", "x"};
  EXPECT_EQ(encode_batch(b, texts), encode_batch(b, texts));
  HashingBackbone b2(32, 9);
  EXPECT_EQ(encode_batch(b, texts), encode_batch(b2, texts));
}

TEST(EncodeBatch, RejectsEmptyInputs) {
  HashingBackbone b(4, 1);
  EXPECT_THROW(encode_batch(b, {}), UsageError);
  EXPECT_THROW(encode_batch(b, {"ok", "   "}), UsageError);
}

TEST(EncodeBatch, BackendFailureNamesBackend) {
  CallbackBackend bad("flaky-encoder", 3, [](const std::vector<std::string>&) -> EmbeddingMatrix {
    throw std::runtime_error("weights missing");
  });
  try {
    encode_batch(bad, {"a"});
    FAIL();
  } catch (const BackendError& e) {
    EXPECT_NE(std::string(e.what()).find("flaky-encoder"), std::string::npos);
  }
}

TEST(EncodeBatch, WrongShapeFromBackendIsBackendError) {
  CallbackBackend bad("short", 3, [](const std::vector<std::string>&) { return EmbeddingMatrix::Zero(1, 2); });
  EXPECT_THROW(encode_batch(bad, {"a", "b"}), BackendError);
}

TEST(Adapter, MatchesHandAffineMap) {
  HashingBackbone b(4, 2);
  std::vector<std::string> texts{"one two", "three", "four five six"};
  Matrix e = encode_batch(b, texts);
  Matrix w(4, 6);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) w(i, j) = 0.1 * (i + 1) - 0.05 * j;
  RowVector bias(6);
  bias << 1, -1, 0.5, 0, 2, -0.25;
  SurrogateModel model(std::make_shared<HashingBackbone>(4, 2), Adapter(w, bias));
  Matrix got = model.encode(texts);
  ASSERT_EQ(got.rows(), 3);
  ASSERT_EQ(got.cols(), 6);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 6; ++c) {
      double s = bias(c);
      for (int k = 0; k < 4; ++k) s += e(r, k) * w(k, c);
      EXPECT_NEAR(got(r, c), s, 1e-12);
    }
}

TEST(Adapter, IdentityIsNoOp) {
  Matrix e = tei::testing::gaussian(5, 3, 1);
  EXPECT_EQ(Adapter::identity(3).apply(e), e);
}

TEST(Adapter, HandExample) {
  Matrix w(2, 2);
  w << 2, 0, 0, 3;
  RowVector b(2);
  b << 1, 1;
  Matrix e(1, 2);
  e << 1, 0;
  Matrix out = Adapter(w, b).apply(e);
  EXPECT_DOUBLE_EQ(out(0, 0), 3);
  EXPECT_DOUBLE_EQ(out(0, 1), 1);
}

TEST(Adapter, BiasOnly) {
  RowVector b(3);
  b << 0.5, -2, 7;
  Adapter a(Matrix::Zero(4, 3), b);
  Matrix out = a.apply(tei::testing::gaussian(6, 4, 2));
  for (int r = 0; r < 6; ++r) EXPECT_EQ(out.row(r), b);
}

TEST(Adapter, WidthMismatchNamesBothWidths) {
  Adapter a = Adapter::identity(3);
  try {
    a.apply(Matrix::Zero(2, 5));
    FAIL();
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find('3'), std::string::npos);
    EXPECT_NE(msg.find('5'), std::string::npos);
  }
}

TEST(Adapter, InitializationBounds) {
  Rng rng(4);
  Adapter a(16, 8, rng);
  EXPECT_LE(a.weight().cwiseAbs().maxCoeff(), 1.0 / 4.0);
  EXPECT_EQ(a.bias(), RowVector::Zero(8));
}

TEST(Adapter, BackwardMatchesFiniteDifferences) {
  Rng rng(5);
  Adapter a(4, 3, rng);
  Matrix x = tei::testing::gaussian(5, 4, 6);
  Matrix target = tei::testing::gaussian(5, 3, 7);
  auto params = a.parameters();
  nn::zero_grad(params);
  a.backward(x, 2.0 * (a.apply(x) - target));
  auto loss_w = [&](const Matrix& w) { return (Adapter(w, a.bias()).apply(x) - target).squaredNorm(); };
  Matrix num = tei::testing::numeric_gradient(loss_w, a.weight());
  EXPECT_LT(tei::testing::max_relative_error(params[0]->grad, num), 1e-6);
}

TEST(SurrogateModel, OutputWidthFollowsVictimForAnyBackbone) {
  Rng rng(1);
  for (Eigen::Index ds : {4, 16, 40}) {
    SurrogateModel m(std::make_shared<HashingBackbone>(ds, 1), Adapter(ds, 12, rng));
    EXPECT_EQ(m.encode({"some text"}).cols(), 12);
  }
}

TEST(Registry, BuiltinsAndUnknown) {
  auto b = make_backend("hash-bow:dim=8,seed=3");
  EXPECT_EQ(b->dimension(), 8);
  auto v = make_backend("synthetic-victim:dim=20");
  EXPECT_EQ(v->dimension(), 20);
  EXPECT_THROW(make_backend("sentence-transformers/gtr-t5-base"), BackendError);
}

TEST(SyntheticVictim, IsAffineInItsBaseBackbonePlusSmallNoise) {
  SyntheticVictim::Options o;
  o.noise = 0.0;
  SyntheticVictim clean(o);
  o.noise = 0.01;
  SyntheticVictim noisy(o);
  std::vector<std::string> texts{"a b", "c d e", "fever"};
  Matrix diff = encode_batch(clean, texts) - encode_batch(noisy, texts);
  EXPECT_GT(diff.norm(), 0);
  EXPECT_LT(diff.cwiseAbs().maxCoeff(), 0.1);
}

// ---- remote client --------------------------------------------------------

namespace {

void answer_embeddings(const httplib::Request& req, httplib::Response& res) {
  auto body = nlohmann::json::parse(req.body);
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& t : body.at("texts")) {
    const double n = static_cast<double>(t.get<std::string>().size());
    rows.push_back({n, n * 2});
  }
  res.set_content(nlohmann::json{{"embeddings", rows}}.dump(), "application/json");
}

}  // namespace

TEST(RemoteEmbeddings, OrderPreservingRows) {
  MockServer server("/embed", answer_embeddings);
  auto e = fetch_remote_embeddings(server.url("/embed"), {"abc", "z"}, 8, 0);
  ASSERT_EQ(e.rows(), 2);
  EXPECT_EQ(e(0, 0), 3);
  EXPECT_EQ(e(1, 0), 1);
  EXPECT_EQ(e(1, 1), 2);
  ASSERT_EQ(server.bodies().size(), 1u);
  EXPECT_EQ(nlohmann::json::parse(server.bodies()[0]), (nlohmann::json{{"texts", {"abc", "z"}}}));
}

TEST(RemoteEmbeddings, BatchesRequests) {
  MockServer server("/embed", answer_embeddings);
  std::vector<std::string> texts;
  for (int i = 0; i < 7; ++i) texts.push_back(std::string(static_cast<std::size_t>(i + 1), 'x'));
  auto e = fetch_remote_embeddings(server.url("/embed"), texts, 3, 0);
  EXPECT_EQ(server.bodies().size(), 3u);
  for (int i = 0; i < 7; ++i) EXPECT_EQ(e(i, 0), i + 1);
}

TEST(RemoteEmbeddings, RowCountMismatchIsProtocolError) {
  MockServer server("/embed", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"embeddings": [[1.0, 2.0]]})", "application/json");
  });
  EXPECT_THROW(fetch_remote_embeddings(server.url("/embed"), {"a", "b"}, 8, 0), ProtocolError);
}

TEST(RemoteEmbeddings, RetriesTransientFailures) {
  std::atomic<int> calls{0};
  MockServer server("/embed", [&](const httplib::Request& req, httplib::Response& res) {
    if (calls++ < 2) {
      res.status = 503;
      return;
    }
    answer_embeddings(req, res);
  });
  RemoteEmbeddingClient::Options o;
  o.retry.max_retries = 3;
  o.retry.base_delay = std::chrono::milliseconds(1);
  RemoteEmbeddingClient client(server.url("/embed"), o);
  auto e = client.fetch({"ab", "c"});
  EXPECT_EQ(e.rows(), 2);
  EXPECT_EQ(calls.load(), 3);
}

TEST(RemoteEmbeddings, ExhaustedRetriesIsTransportError) {
  std::atomic<int> calls{0};
  MockServer server("/embed", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 500;
  });
  RemoteEmbeddingClient::Options o;
  o.retry.max_retries = 2;
  o.retry.base_delay = std::chrono::milliseconds(1);
  RemoteEmbeddingClient client(server.url("/embed"), o);
  EXPECT_THROW(client.fetch({"a"}), TransportError);
  EXPECT_EQ(calls.load(), 3);
}

TEST(RemoteEmbeddings, ClientErrorIsNotRetried) {
  std::atomic<int> calls{0};
  MockServer server("/embed", [&](const httplib::Request&, httplib::Response& res) {
    ++calls;
    res.status = 400;
  });
  RemoteEmbeddingClient::Options o;
  o.retry.max_retries = 3;
  o.retry.base_delay = std::chrono::milliseconds(1);
  EXPECT_THROW(RemoteEmbeddingClient(server.url("/embed"), o).fetch({"a"}), TransportError);
  EXPECT_EQ(calls.load(), 1);
}

TEST(RemoteEmbeddings, UnreachableEndpointIsTransportError) {
  RemoteEmbeddingClient::Options o;
  o.retry.max_retries = 1;
  o.retry.base_delay = std::chrono::milliseconds(1);
  o.retry.timeout = std::chrono::milliseconds(200);
  EXPECT_THROW(RemoteEmbeddingClient("http://127.0.0.1:1/embed", o).fetch({"a"}), TransportError);
}

TEST(RemoteEmbeddings, SendsBearerTokenFromEnvironment) {
  ::setenv("TEI_EMBEDDING_API_KEY", "sekrit", 1);
  MockServer server("/embed", answer_embeddings);
  fetch_remote_embeddings(server.url("/embed"), {"a"}, 4, 0);
  ::unsetenv("TEI_EMBEDDING_API_KEY");
  ASSERT_EQ(server.auth_headers().size(), 1u);
  EXPECT_EQ(server.auth_headers()[0], "Bearer sekrit");
}

TEST(RemoteEmbeddings, ConcurrentBatchesKeepOrder) {
  MockServer server("/embed", answer_embeddings);
  RemoteEmbeddingClient::Options o;
  o.batch_size = 2;
  o.max_in_flight = 4;
  std::vector<std::string> texts;
  for (int i = 0; i < 25; ++i) texts.push_back(std::string(static_cast<std::size_t>(i + 1), 'y'));
  auto e = RemoteEmbeddingClient(server.url("/embed"), o).fetch(texts);
  for (int i = 0; i < 25; ++i) EXPECT_EQ(e(i, 0), i + 1);
}
