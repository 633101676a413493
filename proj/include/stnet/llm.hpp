#pragma once

// Optional LLM-backed candidate generation. The transport is abstract
// (CompletionSource) so the pipeline runs against a stub in tests and against
// any HTTP chat endpoint in production (see llm_http.hpp). Candidates are
// never trusted: they go through verify_and_ground afterwards.

#include <algorithm>
#include <chrono>
#include <functional>
#include <future>
#include <memory>
#include <semaphore>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "stnet/datagen.hpp"

namespace stnet {

struct LlmClientConfig {
  std::string endpoint;                          // e.g. http://localhost:8000/v1/chat/completions
  std::string model;                             // forwarded verbatim when non-empty
  std::string token_env = "STNET_LLM_TOKEN";     // name of the variable holding the bearer token
  std::string template_path;                     // empty: built-in template
  std::string language = "English";
  int timeout_seconds = 60;
  int max_retries = 3;
  int backoff_ms = 500;
  int max_in_flight = 2;
};

class CompletionSource {
 public:
  virtual ~CompletionSource() = default;
  /// Returns the model reply text; throws on transport failure.
  virtual std::string complete(const std::string& prompt) = 0;
};

inline const char* default_prompt_template() {
  return R"(You are given a table in HTML. Write question-answer pairs about it in [Language].
Produce five kinds of questions:
1. specific_extraction: each question targets exactly one cell. Give the cell value as the answer and
   its 1-based row (<tr> index) and column (<td> index).
2. simple_reasoning: the answer follows from fewer than three cells.
3. complex_reasoning: the answer needs three or more cells.
4. numerical: sums, maxima, averages or minima; show the calculation and the final result.
5. content_summary: a short summary that matches the table's content.
Reply with a JSON array only. Each element is an object with the keys
"type", "question", "answer", and, for specific_extraction, "row" and "col".
Table:
[Table])";
}

inline std::string render_prompt(const std::string& tmpl, const std::string& html, const std::string& language) {
  std::string out = tmpl;
  auto replace_all = [&](const std::string& key, const std::string& value) {
    std::size_t pos = 0;
    while ((pos = out.find(key, pos)) != std::string::npos) {
      out.replace(pos, key.size(), value);
      pos += value.size();
    }
  };
  replace_all("[Language]", language);
  replace_all("[Table]", html);
  return out;
}

struct CandidateParseStats {
  int accepted = 0;
  int rejected = 0;
  bool malformed = false;
};

/// Extracts the first JSON array in the reply (models like to wrap it in
/// prose or code fences) and converts each well-formed element.
inline std::vector<QARecord> parse_candidates(const std::string& reply, CandidateParseStats* stats = nullptr) {
  CandidateParseStats local;
  CandidateParseStats& st = stats ? *stats : local;
  std::vector<QARecord> out;
  const auto open = reply.find('[');
  const auto close = reply.rfind(']');
  if (open == std::string::npos || close == std::string::npos || close < open) {
    st.malformed = true;
    return out;
  }
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(reply.substr(open, close - open + 1));
  } catch (const nlohmann::json::exception&) {
    st.malformed = true;
    return out;
  }
  if (!arr.is_array()) {
    st.malformed = true;
    return out;
  }
  for (const auto& item : arr) {
    try {
      QARecord qa;
      qa.qtype = question_type_from_string(item.at("type").get<std::string>());
      qa.question = item.at("question").get<std::string>();
      qa.answer = item.at("answer").is_string() ? item.at("answer").get<std::string>() : item.at("answer").dump();
      if (item.contains("row") && item.contains("col") && !item.at("row").is_null())
        qa.logical_loc = LogicalLoc{item.at("row").get<int>(), item.at("col").get<int>()};
      if (qa.question.empty() || qa.answer.empty()) throw DatagenError("empty question or answer");
      if (qa.qtype == QuestionType::specific_extraction && !qa.logical_loc)
        throw DatagenError("specific extraction without location");
      out.push_back(std::move(qa));
      ++st.accepted;
    } catch (const std::exception&) {
      ++st.rejected;
    }
  }
  return out;
}

struct LlmResult {
  std::vector<QARecord> candidates;
  bool skipped = false;
  std::string log;
};

/// One table: retries transport failures with exponential backoff; a table
/// whose endpoint keeps failing or whose reply is unparseable is skipped.
inline LlmResult llm_generate_qa(const std::string& html, CompletionSource& source, const LlmClientConfig& cfg,
                                 const std::string& prompt_template = default_prompt_template()) {
  LlmResult res;
  const std::string prompt = render_prompt(prompt_template, html, cfg.language);
  std::string reply;
  bool ok = false;
  for (int attempt = 0; attempt <= cfg.max_retries && !ok; ++attempt) {
    try {
      reply = source.complete(prompt);
      ok = true;
    } catch (const std::exception& e) {
      res.log += "attempt " + std::to_string(attempt + 1) + " failed: " + e.what() + "\n";
      if (attempt < cfg.max_retries && cfg.backoff_ms > 0)
        std::this_thread::sleep_for(std::chrono::milliseconds(cfg.backoff_ms << attempt));
    }
  }
  if (!ok) {
    res.skipped = true;
    res.log += "endpoint failed; table skipped\n";
    return res;
  }
  CandidateParseStats st;
  res.candidates = parse_candidates(reply, &st);
  if (st.malformed) {
    res.skipped = true;
    res.log += "unparseable reply; candidates dropped\n";
  } else if (st.rejected > 0) {
    res.log += std::to_string(st.rejected) + " malformed candidate(s) dropped\n";
  }
  return res;
}

/// Runs many tables with at most cfg.max_in_flight concurrent requests.
/// Results keep the input order.
inline std::vector<LlmResult> llm_generate_batch(const std::vector<std::string>& htmls,
                                                 const std::function<std::unique_ptr<CompletionSource>()>& make_source,
                                                 const LlmClientConfig& cfg,
                                                 const std::string& prompt_template = default_prompt_template()) {
  std::counting_semaphore<64> slots(std::clamp(cfg.max_in_flight, 1, 64));
  std::vector<std::future<LlmResult>> futures;
  futures.reserve(htmls.size());
  for (const auto& html : htmls) {
    slots.acquire();
    futures.push_back(std::async(std::launch::async, [&, html]() {
      struct Release {
        std::counting_semaphore<64>& s;
        ~Release() { s.release(); }
      } release{slots};
      auto src = make_source();
      return llm_generate_qa(html, *src, cfg, prompt_template);
    }));
  }
  std::vector<LlmResult> out;
  out.reserve(futures.size());
  for (auto& f : futures) out.push_back(f.get());
  return out;
}

}  // namespace stnet
