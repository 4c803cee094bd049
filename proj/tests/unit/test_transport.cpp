#include <gtest/gtest.h>

#include <httplib.h>

#include <thread>

#include "iplm/align.hpp"
#include "iplm/evalharness.hpp"
#include "iplm/preprocess.hpp"
#include "iplm/transport.hpp"

using namespace iplm;

namespace {

// Local JSON service with one handler per path.
class LocalServer {
 public:
  LocalServer() {
    server_.Post("/judge", [](const httplib::Request& req, httplib::Response& res) {
      const auto j = nlohmann::json::parse(req.body);
      const double s1 = static_cast<double>(j["response_1"].get<std::string>().size());
      const double s2 = static_cast<double>(j["response_2"].get<std::string>().size());
      res.set_content(nlohmann::json{{"score_1", s1}, {"score_2", s2}}.dump(), "application/json");
    });
    server_.Post("/rewrite", [](const httplib::Request& req, httplib::Response& res) {
      const auto j = nlohmann::json::parse(req.body);
      res.set_content(nlohmann::json{{"text", j["style"].get<std::string>() + ": " + j["text"].get<std::string>()}}.dump(),
                      "application/json");
    });
    server_.Post("/rank", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"ranking":[1,0]})", "application/json");
    });
    server_.Post("/broken", [](const httplib::Request&, httplib::Response& res) {
      res.status = 500;
      res.set_content("oops", "text/plain");
    });
    server_.Post("/garbage", [](const httplib::Request&, httplib::Response& res) { res.set_content("{not json", "text/plain"); });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~LocalServer() {
    server_.stop();
    thread_.join();
  }
  std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port_) + path; }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(Transport, JudgeOverHttp) {
  LocalServer srv;
  auto t = make_http_transport(srv.url("/judge"), 5);
  eval::TransportJudge judge(*t);
  EXPECT_EQ(eval::judge_pair("p", "a long answer", "short", judge).outcome, eval::Outcome::win);
}

TEST(Transport, RewriterOverHttp) {
  LocalServer srv;
  std::shared_ptr<JsonTransport> t = make_http_transport(srv.url("/rewrite"), 5);
  preprocess::TransportRewriter rw(t);
  EXPECT_EQ(rw.rewrite("body", preprocess::RewriteStyle::summary), "summary: body");
}

TEST(Transport, RankingOverHttp) {
  LocalServer srv;
  auto t = make_http_transport(srv.url("/rank"), 5);
  const auto pairs = align::RankingClient(*t).pairs("p", {"first", "second"});
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].chosen, "second");
}

TEST(Transport, ErrorsSurfaceAsTransportError) {
  LocalServer srv;
  for (const auto* path : {"/broken", "/garbage"}) {
    auto t = make_http_transport(srv.url(path), 5);
    try {
      t->post({{"x", 1}});
      FAIL() << path;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), "transport_error");
    }
  }
  auto dead = make_http_transport("http://127.0.0.1:1/none", 1);
  EXPECT_THROW(dead->post({}), Error);
}
