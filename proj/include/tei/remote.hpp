#pragma once

// HTTP clients for the two external services: the embedding endpoint used to
// fabricate leaked datasets, and a plain-text completion endpoint used by the
// LLM augmentation strategy and the LLM judge.
//
// Embedding protocol:  POST {"texts": [...]}  ->  {"embeddings": [[...], ...]}
// Completion protocol: POST <prompt bytes, text/plain>  ->  <completion, text/plain>

#include "tei/types.hpp"  // Eigen before httplib: <resolv.h> defines _res

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <future>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include "tei/errors.hpp"

namespace tei {

struct Endpoint {
  std::string base;  // scheme://host[:port]
  std::string path;  // "/..." (defaults to "/")

  static Endpoint parse(const std::string& url) {
    auto scheme = url.find("://");
    if (scheme == std::string::npos) throw UsageError("endpoint '" + url + "' lacks a scheme (http:// or https://)");
    auto slash = url.find('/', scheme + 3);
    Endpoint e;
    e.base = url.substr(0, slash);
    e.path = slash == std::string::npos ? "/" : url.substr(slash);
    return e;
  }
};

// Bearer token read from the environment, if set.
inline std::string credential_from_env(const char* var) {
  const char* v = std::getenv(var);
  return v ? std::string(v) : std::string();
}

struct RetryPolicy {
  int max_retries = 3;
  std::chrono::milliseconds base_delay{200};
  std::chrono::milliseconds timeout{30000};
};

namespace detail {

inline httplib::Result post_once(const Endpoint& ep, const std::string& body, const std::string& content_type,
                                 const std::string& token, const RetryPolicy& policy) {
  httplib::Client cli(ep.base);
  auto secs = std::chrono::duration_cast<std::chrono::seconds>(policy.timeout).count();
  cli.set_connection_timeout(static_cast<time_t>(std::max<long long>(1, secs)), 0);
  cli.set_read_timeout(static_cast<time_t>(std::max<long long>(1, secs)), 0);
  httplib::Headers headers;
  if (!token.empty()) headers.emplace("Authorization", "Bearer " + token);
  return cli.Post(ep.path, headers, body, content_type);
}

// Retries transport failures and 5xx/429 responses with exponential backoff.
// Returns the successful body; `attempts` receives the number of requests made.
inline std::string post_with_retries(const Endpoint& ep, const std::string& body, const std::string& content_type,
                                     const std::string& token, const RetryPolicy& policy, int* attempts = nullptr) {
  std::string last_error;
  for (int attempt = 0; attempt <= policy.max_retries; ++attempt) {
    if (attempts) *attempts = attempt + 1;
    if (attempt > 0) std::this_thread::sleep_for(policy.base_delay * (1 << (attempt - 1)));
    auto res = post_once(ep, body, content_type, token, policy);
    if (!res) {
      last_error = "transport failure: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 200 && res->status < 300) return res->body;
    last_error = "HTTP " + std::to_string(res->status);
    if (res->status != 429 && res->status < 500) break;
  }
  throw TransportError("POST " + ep.base + ep.path + " failed after " + std::to_string(policy.max_retries + 1) +
                       " attempt(s): " + last_error);
}

}  // namespace detail

class RemoteEmbeddingClient {
 public:
  struct Options {
    std::size_t batch_size = 32;
    RetryPolicy retry;
    int max_in_flight = 4;
    std::string token;  // defaults to $TEI_EMBEDDING_API_KEY
  };

  RemoteEmbeddingClient(const std::string& url, Options opts) : endpoint_(Endpoint::parse(url)), opts_(std::move(opts)) {
    if (opts_.batch_size < 1) throw UsageError("batch_size must be >= 1");
    if (opts_.max_in_flight < 1) throw UsageError("max_in_flight must be >= 1");
    if (opts_.token.empty()) opts_.token = credential_from_env("TEI_EMBEDDING_API_KEY");
  }

  // Embeddings are stored exactly as returned.
  EmbeddingMatrix fetch(const std::vector<std::string>& texts) const {
    if (texts.empty()) throw UsageError("fetch_remote_embeddings: empty batch");
    const std::size_t n_batches = (texts.size() + opts_.batch_size - 1) / opts_.batch_size;
    std::vector<std::vector<std::vector<double>>> parts(n_batches);

    std::counting_semaphore<64> slots(std::min(opts_.max_in_flight, 64));
    std::vector<std::future<void>> jobs;
    jobs.reserve(n_batches);
    for (std::size_t b = 0; b < n_batches; ++b) {
      slots.acquire();
      jobs.push_back(std::async(std::launch::async, [&, b] {
        struct Release {
          std::counting_semaphore<64>& s;
          ~Release() { s.release(); }
        } release{slots};
        auto first = texts.begin() + static_cast<long>(b * opts_.batch_size);
        auto last = texts.begin() + static_cast<long>(std::min(texts.size(), (b + 1) * opts_.batch_size));
        parts[b] = fetch_batch(std::vector<std::string>(first, last));
      }));
    }
    for (auto& j : jobs) j.get();

    std::vector<std::vector<double>> rows;
    rows.reserve(texts.size());
    for (auto& p : parts)
      for (auto& r : p) rows.push_back(std::move(r));
    try {
      return rows_to_matrix(rows);
    } catch (const DimensionError& e) {
      throw ProtocolError(std::string("embedding service returned ragged rows: ") + e.what());
    }
  }

 private:
  std::vector<std::vector<double>> fetch_batch(const std::vector<std::string>& texts) const {
    nlohmann::json req = {{"texts", texts}};
    const std::string body = detail::post_with_retries(endpoint_, req.dump(), "application/json", opts_.token, opts_.retry);
    nlohmann::json resp;
    try {
      resp = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("embedding service returned invalid JSON: ") + e.what());
    }
    if (!resp.is_object() || !resp.contains("embeddings") || !resp["embeddings"].is_array())
      throw ProtocolError("embedding service response lacks an \"embeddings\" array");
    const auto& arr = resp["embeddings"];
    if (arr.size() != texts.size())
      throw ProtocolError("embedding service returned " + std::to_string(arr.size()) + " rows for " +
                          std::to_string(texts.size()) + " texts");
    std::vector<std::vector<double>> rows;
    rows.reserve(arr.size());
    for (const auto& row : arr) {
      if (!row.is_array() || row.empty()) throw ProtocolError("embedding row is not a non-empty array");
      std::vector<double> r;
      r.reserve(row.size());
      for (const auto& v : row) {
        if (!v.is_number()) throw ProtocolError("embedding entry is not a number");
        r.push_back(v.get<double>());
      }
      rows.push_back(std::move(r));
    }
    return rows;
  }

  Endpoint endpoint_;
  Options opts_;
};

inline EmbeddingMatrix fetch_remote_embeddings(const std::string& url, const std::vector<std::string>& texts,
                                               std::size_t batch_size, int max_retries) {
  RemoteEmbeddingClient::Options o;
  o.batch_size = batch_size;
  o.retry.max_retries = max_retries;
  return RemoteEmbeddingClient(url, o).fetch(texts);
}

// Sends a prompt, returns the completion text.
class CompletionClient {
 public:
  virtual ~CompletionClient() = default;
  virtual std::string complete(const std::string& prompt) const = 0;
};

class HttpCompletionClient final : public CompletionClient {
 public:
  explicit HttpCompletionClient(const std::string& url, RetryPolicy retry = {}, std::string token = {})
      : endpoint_(Endpoint::parse(url)), retry_(retry), token_(std::move(token)) {
    if (token_.empty()) token_ = credential_from_env("TEI_LLM_API_KEY");
  }

  std::string complete(const std::string& prompt) const override {
    return detail::post_with_retries(endpoint_, prompt, "text/plain; charset=utf-8", token_, retry_);
  }

 private:
  Endpoint endpoint_;
  RetryPolicy retry_;
  std::string token_;
};

}  // namespace tei
