#pragma once

// Pluggable JSON request/response transport used by the rewriter, judge and
// preference-ranking clients. Production code talks HTTP; tests swap in an
// in-process implementation.

#include <functional>
#include <memory>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "iplm/error.hpp"

namespace iplm {

class JsonTransport {
 public:
  virtual ~JsonTransport() = default;
  virtual nlohmann::json post(const nlohmann::json& request) = 0;
};

// POSTs the request body to `base_url` + `path` and parses the reply.
class HttpJsonTransport final : public JsonTransport {
 public:
  HttpJsonTransport(std::string base_url, std::string path, int timeout_seconds = 60)
      : base_url_(std::move(base_url)), path_(std::move(path)), timeout_seconds_(timeout_seconds) {}

  nlohmann::json post(const nlohmann::json& request) override {
    httplib::Client client(base_url_);
    client.set_connection_timeout(timeout_seconds_, 0);
    client.set_read_timeout(timeout_seconds_, 0);
    auto res = client.Post(path_, request.dump(), "application/json");
    if (!res) throw Error("transport_error", "no response from " + base_url_ + path_);
    if (res->status != 200)
      throw Error("transport_error", base_url_ + path_ + " returned HTTP " + std::to_string(res->status));
    try {
      return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::exception& e) {
      throw Error("transport_error", std::string("unparseable reply: ") + e.what());
    }
  }

 private:
  std::string base_url_;
  std::string path_;
  int timeout_seconds_;
};

// Wraps a plain function; handy for mocks.
class FunctionTransport final : public JsonTransport {
 public:
  explicit FunctionTransport(std::function<nlohmann::json(const nlohmann::json&)> fn) : fn_(std::move(fn)) {}
  nlohmann::json post(const nlohmann::json& request) override { return fn_(request); }

 private:
  std::function<nlohmann::json(const nlohmann::json&)> fn_;
};

// Splits "http://host:port/path" into the client base and the request path.
inline std::unique_ptr<JsonTransport> make_http_transport(const std::string& url, int timeout_seconds = 60) {
  const auto scheme = url.find("://");
  const auto path_start = url.find('/', scheme == std::string::npos ? 0 : scheme + 3);
  if (path_start == std::string::npos) return std::make_unique<HttpJsonTransport>(url, "/", timeout_seconds);
  return std::make_unique<HttpJsonTransport>(url.substr(0, path_start), url.substr(path_start), timeout_seconds);
}

}  // namespace iplm
