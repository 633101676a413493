#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <random>

#include "stnet/llm.hpp"
#include "stnet/llm_http.hpp"

using namespace stnet;

namespace {

class StubSource : public CompletionSource {
 public:
  explicit StubSource(std::vector<std::string> replies, int failures = 0)
      : replies_(std::move(replies)), failures_(failures) {}
  std::string complete(const std::string& prompt) override {
    last_prompt = prompt;
    ++calls;
    if (failures_ > 0) {
      --failures_;
      throw std::runtime_error("connection refused");
    }
    return replies_.at(std::min(static_cast<std::size_t>(calls - 1), replies_.size() - 1));
  }
  std::string last_prompt;
  int calls = 0;

 private:
  std::vector<std::string> replies_;
  int failures_;
};

LlmClientConfig fast_config() {
  LlmClientConfig c;
  c.backoff_ms = 0;
  return c;
}

DocumentSample price_doc() {
  TableSpec s;
  s.rows = 3;
  s.cols = 2;
  s.cells = {"Item", "Price", "Tea", "3.50", "Jam", "2"};
  s.numeric_cols = {1};
  return render_document(s, 1);
}

}  // namespace

TEST(Llm, PromptSubstitution) {
  const std::string p = render_prompt("Q in [Language]: [Table] / [Table]", "<table></table>", "French");
  EXPECT_EQ(p, "Q in French: <table></table> / <table></table>");
  const std::string d = render_prompt(default_prompt_template(), "<table>X</table>", "English");
  EXPECT_NE(d.find("<table>X</table>"), std::string::npos);
  EXPECT_EQ(d.find("[Table]"), std::string::npos);
}

TEST(Llm, WellFormedReply) {
  StubSource src({R"(Sure! ```json
[{"type":"specific_extraction","question":"Price of Tea?","answer":"3.50","row":2,"col":2},
 {"type":"numerical","question":"Total?","answer":5.5},
 {"type":"content_summary","question":"Summary?","answer":"Two items."}]
```)"});
  const LlmResult r = llm_generate_qa("<table></table>", src, fast_config());
  EXPECT_FALSE(r.skipped);
  ASSERT_EQ(r.candidates.size(), 3u);
  EXPECT_EQ(r.candidates[0].qtype, QuestionType::specific_extraction);
  EXPECT_EQ(r.candidates[0].logical_loc, (LogicalLoc{2, 2}));
  EXPECT_EQ(r.candidates[1].answer, "5.5");
  EXPECT_FALSE(r.candidates[2].logical_loc);
}

TEST(Llm, MalformedReplySkipsTable) {
  StubSource src({"I cannot help with tables."});
  const LlmResult r = llm_generate_qa("<table></table>", src, fast_config());
  EXPECT_TRUE(r.skipped);
  EXPECT_TRUE(r.candidates.empty());
  EXPECT_NE(r.log.find("unparseable"), std::string::npos);
  StubSource broken({"[{\"type\": \"numerical\", "});
  EXPECT_TRUE(llm_generate_qa("<table></table>", broken, fast_config()).skipped);
}

TEST(Llm, MixedReplyKeepsOnlyValidItems) {
  StubSource src({R"([{"type":"specific_extraction","question":"q1","answer":"a"},
                      {"type":"weird","question":"q2","answer":"b"},
                      {"type":"numerical","question":"","answer":"c"},
                      {"type":"simple_reasoning","question":"q4","answer":"d","row":1,"col":1},
                      42])"});
  CandidateParseStats st;
  const auto c = parse_candidates(src.complete(""), &st);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].question, "q4");
  EXPECT_EQ(st.accepted, 1);
  EXPECT_EQ(st.rejected, 4);
  EXPECT_FALSE(st.malformed);
}

TEST(Llm, RetriesThenSkips) {
  LlmClientConfig cfg = fast_config();
  cfg.max_retries = 2;
  StubSource recovers({"[]"}, 2);
  const LlmResult ok = llm_generate_qa("<table></table>", recovers, cfg);
  EXPECT_FALSE(ok.skipped);
  EXPECT_EQ(recovers.calls, 3);
  StubSource dead({"[]"}, 100);
  const LlmResult r = llm_generate_qa("<table></table>", dead, cfg);
  EXPECT_TRUE(r.skipped);
  EXPECT_EQ(dead.calls, 3);
  EXPECT_NE(r.log.find("endpoint failed"), std::string::npos);
}

TEST(Llm, FixturePipelineRetainsFaithfulCandidates) {
  const DocumentSample d = price_doc();
  StubSource src({R"([
    {"type":"specific_extraction","question":"Price of Tea?","answer":"3.50","row":2,"col":2},
    {"type":"specific_extraction","question":"Price of Jam?","answer":"2.00","row":3,"col":2},
    {"type":"specific_extraction","question":"Cell 9,9?","answer":"x","row":9,"col":9},
    {"type":"simple_reasoning","question":"Which item is cheaper?","answer":"Jam","row":3,"col":1},
    {"type":"numerical","question":"Total price?","answer":"3.50+2=5.50"}])"});
  const LlmResult r = llm_generate_qa(d.html, src, fast_config());
  EXPECT_NE(src.last_prompt.find(d.html), std::string::npos);
  VerifyStats st;
  const auto kept = verify_and_ground(r.candidates, d, &st);
  ASSERT_EQ(kept.size(), 3u);
  EXPECT_EQ(kept[0].question, "Price of Tea?");
  EXPECT_EQ(*kept[0].polygon, d.find(2, 2)->polygon);
  EXPECT_EQ(kept[1].question, "Which item is cheaper?");
  EXPECT_TRUE(kept[1].grounded);
  EXPECT_FALSE(kept[2].grounded);
  EXPECT_EQ(st.mismatched, 1);
  EXPECT_EQ(st.out_of_range, 1);
}

TEST(Llm, BatchKeepsOrderAndBoundsConcurrency) {
  std::atomic<int> in_flight{0}, peak{0};
  class Slow : public CompletionSource {
   public:
    Slow(std::atomic<int>& f, std::atomic<int>& p) : f_(f), p_(p) {}
    std::string complete(const std::string& prompt) override {
      const int now = ++f_;
      int prev = p_.load();
      while (now > prev && !p_.compare_exchange_weak(prev, now)) {}
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
      --f_;
      const auto at = prompt.find("T#");
      return R"([{"type":"numerical","question":")" + prompt.substr(at, 4) + R"(","answer":"1"}])";
    }

   private:
    std::atomic<int>& f_;
    std::atomic<int>& p_;
  };
  std::vector<std::string> htmls;
  for (int i = 10; i < 30; ++i) htmls.push_back("T#" + std::to_string(i));
  LlmClientConfig cfg = fast_config();
  cfg.max_in_flight = 3;
  const auto res = llm_generate_batch(htmls, [&] { return std::make_unique<Slow>(in_flight, peak); }, cfg, "[Table]");
  ASSERT_EQ(res.size(), htmls.size());
  for (std::size_t i = 0; i < res.size(); ++i) EXPECT_EQ(res[i].candidates.at(0).question, htmls[i]);
  EXPECT_LE(peak.load(), 3);
}

TEST(Llm, HttpSourceAgainstLoopbackServer) {
  httplib::Server svr;
  std::string seen_auth, seen_body;
  svr.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    seen_auth = req.get_header_value("Authorization");
    seen_body = req.body;
    nlohmann::json reply = {{"choices", {{{"message", {{"role", "assistant"}, {"content", "[]"}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  const int port = svr.bind_to_any_port("127.0.0.1");
  std::thread th([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  ::setenv("STNET_TEST_TOKEN", "sekrit", 1);
  LlmClientConfig cfg = fast_config();
  cfg.endpoint = "http://127.0.0.1:" + std::to_string(port);
  cfg.model = "tiny";
  cfg.token_env = "STNET_TEST_TOKEN";
  HttpCompletionSource src(cfg);
  EXPECT_EQ(src.complete("hello"), "[]");
  EXPECT_EQ(seen_auth, "Bearer sekrit");
  const auto body = nlohmann::json::parse(seen_body);
  EXPECT_EQ(body.at("model"), "tiny");
  EXPECT_EQ(body.at("messages").at(0).at("content"), "hello");
  svr.stop();
  th.join();

  cfg.endpoint = "https://example.invalid/x";
  EXPECT_ANY_THROW(HttpCompletionSource{cfg});
}
