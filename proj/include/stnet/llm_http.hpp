#pragma once

// Chat-completions client over cpp-httplib. Kept out of llm.hpp so that code
// which never talks to a network endpoint doesn't pull in the HTTP stack.

#include <cstdlib>
#include <regex>
#include <stdexcept>
#include <string>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "stnet/llm.hpp"

namespace stnet {

class HttpCompletionSource : public CompletionSource {
 public:
  explicit HttpCompletionSource(LlmClientConfig cfg) : cfg_(std::move(cfg)) {
    static const std::regex url_re(R"(^(http://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(cfg_.endpoint, m, url_re)) throw std::invalid_argument("bad LLM endpoint: " + cfg_.endpoint);
    base_ = m[1].str();
    path_ = m[2].matched ? m[2].str() : "/v1/chat/completions";
    if (const char* tok = std::getenv(cfg_.token_env.c_str())) token_ = tok;
  }

  std::string complete(const std::string& prompt) override {
    httplib::Client cli(base_);
    cli.set_connection_timeout(cfg_.timeout_seconds);
    cli.set_read_timeout(cfg_.timeout_seconds);
    httplib::Headers headers;
    if (!token_.empty()) headers.emplace("Authorization", "Bearer " + token_);
    nlohmann::json body = {{"messages", {{{"role", "user"}, {"content", prompt}}}}, {"temperature", 0}};
    if (!cfg_.model.empty()) body["model"] = cfg_.model;
    auto res = cli.Post(path_, headers, body.dump(), "application/json");
    if (!res) throw std::runtime_error("request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw std::runtime_error("HTTP " + std::to_string(res->status));
    const auto j = nlohmann::json::parse(res->body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  }

 private:
  LlmClientConfig cfg_;
  std::string base_;
  std::string path_;
  std::string token_;
};

}  // namespace stnet
