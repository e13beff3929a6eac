#pragma once

#include "tei/types.hpp"  // Eigen before httplib: <resolv.h> defines _res

#include <httplib.h>

#include <atomic>
#include <filesystem>
#include <functional>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <vector>


namespace tei::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("tei-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Local HTTP server answering POSTs on `route` with `handler`; records every
// request body it receives.
class MockServer {
 public:
  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  MockServer(const std::string& route, Handler handler) : handler_(std::move(handler)) {
    server_.Post(route, [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mu_);
        bodies_.push_back(req.body);
        headers_.push_back(req.get_header_value("Authorization"));
      }
      handler_(req, res);
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  std::string url(const std::string& route) const { return "http://127.0.0.1:" + std::to_string(port_) + route; }
  std::vector<std::string> bodies() const {
    std::lock_guard lock(mu_);
    return bodies_;
  }
  std::vector<std::string> auth_headers() const {
    std::lock_guard lock(mu_);
    return headers_;
  }

 private:
  httplib::Server server_;
  Handler handler_;
  int port_ = 0;
  std::thread thread_;
  mutable std::mutex mu_;
  std::vector<std::string> bodies_;
  std::vector<std::string> headers_;
};

// Central differences of a scalar function of a matrix.
inline Matrix numeric_gradient(const std::function<double(const Matrix&)>& f, Matrix x, double h = 1e-5) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
      const double orig = x(i, j);
      x(i, j) = orig + h;
      const double fp = f(x);
      x(i, j) = orig - h;
      const double fm = f(x);
      x(i, j) = orig;
      g(i, j) = (fp - fm) / (2 * h);
    }
  return g;
}

// Max over entries of |a-b| / max(|a|, |b|, floor).
inline double max_relative_error(const Matrix& a, const Matrix& b, double floor = 1e-6) {
  double worst = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double d = std::abs(a(i) - b(i));
    const double s = std::max({std::abs(a(i)), std::abs(b(i)), floor});
    worst = std::max(worst, d / s);
  }
  return worst;
}

inline Matrix gaussian(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  Rng rng(seed);
  return random_normal(r, c, rng, 1.0);
}

}  // namespace tei::testing
