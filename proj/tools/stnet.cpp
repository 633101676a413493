// stnet command-line tool: generate, train, eval, infer, visualize, ablate.

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stnet/datagen.hpp"
#include "stnet/dataset.hpp"
#include "stnet/infer.hpp"
#include "stnet/llm.hpp"
#include "stnet/llm_http.hpp"
#include "stnet/train.hpp"

#ifndef STNET_VERSION
#define STNET_VERSION "0.1.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace stnet;

namespace {

enum Exit { ok = 0, usage = 1, data = 2, numerical = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("cannot write " + path.string());
  os << text;
  if (!os) throw DatasetError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw DatasetError("cannot create directory " + dir.string());
}

struct Manifest {
  std::string command;
  json config;
  std::uint64_t seed = 0;
  std::string started = utc_now();
  std::vector<std::string> outputs;

  explicit Manifest(std::string cmd, json cfg = json::object(), std::uint64_t s = 0)
      : command(std::move(cmd)), config(std::move(cfg)), seed(s) {}

  void write(const fs::path& dir) const {
    const json j = {{"command", command},      {"config", config},    {"seed", seed},
                    {"code_version", STNET_VERSION}, {"started_at", started}, {"finished_at", utc_now()},
                    {"outputs", outputs}};
    write_text(dir / "manifest.json", j.dump(2) + "\n");
  }
};

std::vector<double> parse_thresholds(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw UsageError("bad threshold: '" + item + "'");
    }
    if (used != item.size() || !(v >= 0.0 && v <= 1.0)) throw UsageError("bad threshold: '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("no thresholds given");
  return out;
}

// ---------------------------------------------------------------- shared option groups

struct ModelOpts {
  int image_size = 256, patch = 32, dim = 128, enc_layers = 2, dec_layers = 2, heads = 4, max_len = 256;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app) {
    opts = {app->add_option("--image-size", image_size, "Square model canvas side in pixels"),
            app->add_option("--patch", patch, "Encoder downsample factor"),
            app->add_option("--dim", dim, "Model width"),
            app->add_option("--enc-layers", enc_layers, "Encoder layers"),
            app->add_option("--dec-layers", dec_layers, "Decoder layers"),
            app->add_option("--heads", heads, "Attention heads"),
            app->add_option("--max-len", max_len, "Maximum decoder sequence length")};
  }
  // Finer patches for the overfit preset, unless the user chose a size.
  bool any_given() const {
    for (auto* o : opts)
      if (o->count() > 0) return true;
    return false;
  }
  ModelConfig config(int vocab_size) const {
    ModelConfig c;
    c.image_height = c.image_width = image_size;
    c.patch = patch;
    c.dim = dim;
    c.enc_layers = enc_layers;
    c.dec_layers = dec_layers;
    c.heads = heads;
    c.max_len = max_len;
    c.vocab_size = vocab_size;
    try {
      c.validate();
    } catch (const ModelError& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

struct TrainOpts {
  long steps = 1000;
  int batch_size = 8;
  double lr = 3e-4, lambda = 0.001, warmup = 0.10, clip = 1.0, loc_lr_scale = 1.0;
  std::string grounding_mode = "see_first", see_supervision = "auxiliary_and_downstream", padding = "random";
  std::string mix = "1:1", tasks = "vqa";
  long checkpoint_every = 0;
  std::vector<CLI::Option*> opts;

  void add(CLI::App* app) {
    opts = {app->add_option("--steps", steps, "Total optimizer steps"),
            app->add_option("--batch-size", batch_size, "Examples per step"),
            app->add_option("--lr", lr, "Peak learning rate"),
            app->add_option("--lambda", lambda, "See-loss weight"),
            app->add_option("--warmup", warmup, "Warmup fraction of total steps"),
            app->add_option("--clip", clip, "Global gradient-norm clip"),
            app->add_option("--loc-lr-scale", loc_lr_scale, "Learning-rate multiplier for the location embeddings")
                ->check(CLI::NonNegativeNumber),
            app->add_option("--grounding-mode", grounding_mode, "Where <see> goes in VQA targets")
                ->check(CLI::IsMember({"none", "see_first", "see_last"})),
            app->add_option("--see-supervision", see_supervision, "Which sources receive see loss")
                ->check(CLI::IsMember({"auxiliary_only", "auxiliary_and_downstream"})),
            app->add_option("--padding", padding, "Canvas placement during training")
                ->check(CLI::IsMember({"centered", "random"})),
            app->add_option("--mix", mix, "Draw ratio downstream:auxiliary"),
            app->add_option("--tasks", tasks, "Comma-separated tasks from vqa,read,ocr"),
            app->add_option("--checkpoint-every", checkpoint_every, "Steps between checkpoints (0: end only)")};
  }

  CLI::Option* find(const std::string& name) const {
    for (auto* o : opts)
      if (o->get_name() == name) return o;
    return nullptr;
  }

  // The overfit preset fills in whatever the user did not set explicitly.
  void apply_preset(const std::string& preset) {
    if (preset.empty()) return;
    if (preset != "overfit") throw UsageError("unknown preset: " + preset);
    auto set = [&](const std::string& name, auto& field, auto value) {
      if (find(name)->count() == 0) field = value;
    };
    set("--steps", steps, 5000L);
    set("--batch-size", batch_size, 8);
    set("--lambda", lambda, 0.001);
    set("--grounding-mode", grounding_mode, std::string("see_first"));
    set("--padding", padding, std::string("centered"));
    set("--loc-lr-scale", loc_lr_scale, 0.0);
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c;
    c.total_steps = steps;
    c.batch_size = batch_size;
    c.peak_lr = lr;
    c.lambda = lambda;
    c.warmup_frac = warmup;
    c.clip_norm = clip;
    c.loc_lr_scale = loc_lr_scale;
    c.seed = seed;
    c.grounding_mode = grounding_mode_from_string(grounding_mode);
    c.see_supervision = see_supervision_from_string(see_supervision);
    c.padding = padding_mode_from_string(padding);
    c.checkpoint_every = checkpoint_every;
    const auto colon = mix.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(mix);
      c.mix_downstream = std::stoi(mix.substr(0, colon));
      c.mix_auxiliary = std::stoi(mix.substr(colon + 1));
    } catch (const std::exception&) {
      throw UsageError("--mix expects D:A, got '" + mix + "'");
    }
    c.task_vqa = c.task_read = c.task_ocr = false;
    std::stringstream ss(tasks);
    std::string t;
    while (std::getline(ss, t, ',')) {
      if (t == "vqa") c.task_vqa = true;
      else if (t == "read") c.task_read = true;
      else if (t == "ocr") c.task_ocr = true;
      else throw UsageError("unknown task: " + t);
    }
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

// ---------------------------------------------------------------- predictions files

void write_predictions(const fs::path& path, const std::vector<CorpusRecord>& records,
                       const std::vector<std::vector<Prediction>>& preds) {
  std::ostringstream os;
  for (std::size_t i = 0; i < records.size(); ++i) {
    json arr = json::array();
    for (const auto& p : preds[i]) arr.push_back(prediction_to_json(p));
    os << json{{"id", records[i].id}, {"predictions", arr}}.dump() << "\n";
  }
  write_text(path, os.str());
}

std::vector<std::vector<Prediction>> read_predictions(const fs::path& path, const std::vector<CorpusRecord>& records) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("cannot read " + path.string());
  std::map<std::string, std::vector<Prediction>> by_id;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      std::vector<Prediction> ps;
      for (const auto& p : j.at("predictions")) ps.push_back(prediction_from_json(p));
      by_id[j.at("id").get<std::string>()] = std::move(ps);
    } catch (const json::exception& e) {
      throw DatasetError(path.filename().string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  std::vector<std::vector<Prediction>> out;
  for (const auto& r : records) {
    auto it = by_id.find(r.id);
    std::vector<Prediction> ps = it == by_id.end() ? std::vector<Prediction>{} : it->second;
    if (ps.size() > r.qas.size()) throw DatasetError("more predictions than questions for record " + r.id);
    ps.resize(r.qas.size());  // missing predictions score as empty answers
    out.push_back(std::move(ps));
  }
  return out;
}

// ---------------------------------------------------------------- generate

struct GenerateOpts {
  int count = 100;
  std::string out;
  int questions = 15, width = 256, height = 256;
  int min_rows = 3, max_rows = 5, min_cols = 2, max_cols = 3;
  double warp_probability = 0.0;
  std::string source = "mixed";
  std::string types;
  std::string llm_endpoint, llm_model, llm_token_env = "STNET_LLM_TOKEN", llm_template, llm_language = "English";
  int llm_in_flight = 2, llm_retries = 3;
};

int cmd_generate(const GenerateOpts& o, std::uint64_t seed, bool as_json) {
  if (o.count < 0) throw UsageError("--count must be >= 0");
  Manifest man{"generate", {}, seed};
  man.config = {{"count", o.count},         {"questions_per_doc", o.questions},
                {"width", o.width},         {"height", o.height},
                {"rows", {o.min_rows, o.max_rows}}, {"cols", {o.min_cols, o.max_cols}},
                {"warp_probability", o.warp_probability}, {"source", o.source}, {"types", o.types},
                {"llm_endpoint", o.llm_endpoint}, {"llm_model", o.llm_model}};
  const fs::path out(o.out);
  ensure_dir(out);

  TableShape shape;
  shape.min_rows = o.min_rows;
  shape.max_rows = o.max_rows;
  shape.min_cols = o.min_cols;
  shape.max_cols = o.max_cols;
  shape.warp_probability = o.warp_probability;
  QaOptions qo;
  qo.questions_per_doc = o.questions;
  if (!o.types.empty()) {
    qo.allowed_types.clear();
    std::stringstream ss(o.types);
    std::string t;
    while (std::getline(ss, t, ',')) {
      try {
        qo.allowed_types.insert(question_type_from_string(t));
      } catch (const std::exception&) {
        throw UsageError("unknown question type: " + t);
      }
    }
  }

  std::vector<CorpusRecord> records;
  json layout_errors = json::array(), notices = json::array();
  for (int i = 0; i < o.count; ++i) {
    const auto idx = static_cast<std::uint64_t>(i);
    std::mt19937_64 rng(derive_seed(seed, 10, idx));
    CorpusRecord rec;
    rec.id = "doc" + std::to_string(i);
    if (o.source == "mixed") rec.source = i % 2 == 0 ? Source::downstream : Source::auxiliary;
    else rec.source = source_from_string(o.source);
    try {
      rec.sample = render_document(random_table_spec(rng, shape), derive_seed(seed, 11, idx), o.width, o.height);
    } catch (const LayoutError& e) {
      layout_errors.push_back({{"index", i}, {"error", e.what()}});
      continue;
    }
    records.push_back(std::move(rec));
  }

  VerifyStats vs;
  if (o.llm_endpoint.empty()) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      std::vector<QaNotice> ns;
      const auto seed_i = derive_seed(seed, 12, i);
      auto cands = gen_qa_deterministic(records[i].sample, seed_i, qo, &ns);
      for (const auto& n : ns) notices.push_back({{"id", records[i].id}, {"notice", n.message}});
      records[i].qas = verify_and_ground(cands, records[i].sample, &vs);
    }
  } else {
    LlmClientConfig cfg;
    cfg.endpoint = o.llm_endpoint;
    cfg.model = o.llm_model;
    cfg.token_env = o.llm_token_env;
    cfg.template_path = o.llm_template;
    cfg.language = o.llm_language;
    cfg.max_in_flight = o.llm_in_flight;
    cfg.max_retries = o.llm_retries;
    std::string tmpl = default_prompt_template();
    if (!cfg.template_path.empty()) {
      std::ifstream is(cfg.template_path);
      if (!is) throw DatasetError("cannot read prompt template " + cfg.template_path);
      tmpl.assign(std::istreambuf_iterator<char>(is), {});
    }
    std::vector<std::string> htmls;
    for (const auto& r : records) htmls.push_back(r.sample.html);
    const auto results = llm_generate_batch(
        htmls, [&] { return std::make_unique<HttpCompletionSource>(cfg); }, cfg, tmpl);
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (!results[i].log.empty()) notices.push_back({{"id", records[i].id}, {"notice", results[i].log}});
      records[i].qas = verify_and_ground(results[i].candidates, records[i].sample, &vs);
    }
  }
  write_corpus(out, records);

  json per_type = json::object();
  for (auto t : all_question_types) per_type[to_string(t)] = 0;
  int total = 0, grounded = 0;
  for (const auto& r : records)
    for (const auto& qa : r.qas) {
      per_type[to_string(qa.qtype)] = per_type[to_string(qa.qtype)].get<int>() + 1;
      ++total;
      grounded += qa.grounded ? 1 : 0;
    }
  const json stats = {{"documents", records.size()},
                      {"questions", total},
                      {"grounded", grounded},
                      {"per_type", per_type},
                      {"verify",
                       {{"retained", vs.retained},
                        {"passed_ungrounded", vs.passed_ungrounded},
                        {"mismatched", vs.mismatched},
                        {"out_of_range", vs.out_of_range},
                        {"missing_location", vs.missing_location}}},
                      {"layout_errors", layout_errors},
                      {"notices", notices}};
  write_text(out / "stats.json", stats.dump(2) + "\n");
  man.outputs = {(out / "records.jsonl").string(), (out / "images").string(), (out / "stats.json").string()};
  man.write(out);
  if (as_json) std::cout << stats.dump() << "\n";
  else {
    std::cout << "wrote " << records.size() << " documents, " << total << " questions (" << grounded
              << " grounded) to " << out.string() << "\n";
    for (const auto& e : layout_errors)
      std::cerr << "layout error in document " << e["index"] << ": " << e["error"].get<std::string>() << "\n";
  }
  return ok;
}

// ---------------------------------------------------------------- train

struct TrainRun {
  fs::path out;
  TrainConfig tc;
  ModelConfig mc;
  int log_every = 100;
  bool quiet = false;
};

// Trains into run.out; returns the trained model. Throws NumericalError after
// writing the dump next to the metrics log.
Model<float> run_training(const TrainRun& run, const std::vector<CorpusRecord>& records, const Vocabulary& vocab,
                          const std::optional<Checkpoint>& resume) {
  ensure_dir(run.out);
  const fs::path log_path = run.out / "metrics.jsonl";
  const fs::path ck_path = run.out / "checkpoint.bin";

  Model<float> init = resume ? resume->model : Model<float>::init(run.mc, run.tc.seed);
  Trainer trainer(run.tc, std::move(init), records, vocab);
  std::string kept;
  if (resume) {
    if (!resume->optimizer) throw CheckpointError("checkpoint has no optimizer state; cannot resume");
    trainer.resume(resume->step, *resume->optimizer);
    // Drop log lines past the checkpoint so the resumed run continues the curve.
    std::ifstream is(log_path);
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      if (json::parse(line).at("step").get<long>() < resume->step) kept += line + "\n";
    }
  }
  std::ofstream log(log_path, std::ios::binary | std::ios::trunc);
  if (!log) throw DatasetError("cannot write " + log_path.string());
  log << kept;

  auto save = [&](Trainer& t) {
    save_checkpoint(ck_path, t.model(), vocab.charset(), t.config(), t.step(), &t.optimizer());
  };
  try {
    train_loop(
        trainer,
        [&](const StepLog& l) {
          log << l.to_json().dump() << "\n";
          if (!run.quiet && (l.step % run.log_every == 0 || l.step + 1 == run.tc.total_steps)) {
            std::cerr << "step " << l.step << " lm " << l.lm_loss;
            if (l.see_loss) std::cerr << " see " << *l.see_loss;
            std::cerr << " lr " << l.lr << "\n";
          }
        },
        save);
  } catch (const NumericalError& e) {
    log.flush();
    write_text(run.out / "numerical_failure.json", e.dump + "\n");
    throw;
  }
  log.flush();
  if (!log) throw DatasetError("failed writing " + log_path.string());
  return std::move(trainer.model());
}

std::vector<CorpusRecord> load_corpus(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "records.jsonl")) throw DatasetError("no corpus at " + dir);
  return read_corpus(dir);
}

int cmd_train(const std::string& corpus, const std::string& out, const std::string& resume_path,
              const std::string& preset, TrainOpts& to, ModelOpts& mo, std::uint64_t seed, int log_every,
              bool as_json) {
  to.apply_preset(preset);
  const auto records = load_corpus(corpus);
  TrainRun run;
  run.out = out;
  run.log_every = std::max(1, log_every);
  std::optional<Checkpoint> ck;
  std::string charset = printable_ascii();
  if (!resume_path.empty()) {
    ck = load_checkpoint(resume_path);
    run.tc = ck->train_config;
    run.mc = ck->model.config;
    charset = ck->charset;
  } else {
    run.tc = to.config(seed);
    run.mc = mo.config(Vocabulary::build(charset).size());
  }
  const Vocabulary vocab = Vocabulary::build(charset);
  Manifest man{"train", {}, run.tc.seed};
  man.config = {{"corpus", corpus}, {"train", to_json(run.tc)}, {"model", to_json(run.mc)},
                {"preset", preset}, {"resume", resume_path}};
  run_training(run, records, vocab, ck);
  man.outputs = {(run.out / "checkpoint.bin").string(), (run.out / "metrics.jsonl").string()};
  man.write(run.out);
  if (as_json) std::cout << json{{"checkpoint", man.outputs[0]}, {"metrics", man.outputs[1]}}.dump() << "\n";
  else std::cout << "checkpoint written to " << man.outputs[0] << "\n";
  return ok;
}

// ---------------------------------------------------------------- eval / infer

struct LoadedModel {
  Checkpoint ck;
  Vocabulary vocab;
};

LoadedModel load_model(const std::string& path, const ModelOpts& mo) {
  std::optional<ModelConfig> expected;
  if (mo.any_given()) expected = mo.config(Vocabulary::build(printable_ascii()).size());
  Checkpoint ck = load_checkpoint(path, expected ? &*expected : nullptr);
  Vocabulary v = Vocabulary::build(ck.charset);
  return {std::move(ck), std::move(v)};
}

std::vector<std::vector<Prediction>> strip_polygons(std::vector<std::vector<Prediction>> preds) {
  for (auto& doc : preds)
    for (auto& p : doc) {
      p.polygon.reset();
      p.quant.reset();
    }
  return preds;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus, const std::string& predictions_in,
             const std::string& predictions_out, const std::string& thresholds_csv, std::string out,
             const ModelOpts& mo, bool as_json) {
  if (checkpoint.empty() == predictions_in.empty()) throw UsageError("give exactly one of --checkpoint or --predictions");
  const auto thresholds = parse_thresholds(thresholds_csv);
  const auto records = load_corpus(corpus);
  if (out.empty()) out = (fs::path(checkpoint.empty() ? predictions_in : checkpoint).parent_path() / "eval").string();
  ensure_dir(out);
  Manifest man{"eval", {{"checkpoint", checkpoint}, {"corpus", corpus}, {"predictions", predictions_in},
                        {"thresholds", thresholds}}};
  std::vector<std::vector<Prediction>> preds;
  if (!checkpoint.empty()) {
    const LoadedModel lm = load_model(checkpoint, mo);
    man.seed = lm.ck.train_config.seed;
    preds = predict_corpus(lm.ck.model, lm.vocab, records);
    if (lm.ck.train_config.grounding_mode == GroundingMode::none) preds = strip_polygons(std::move(preds));
  } else {
    preds = read_predictions(predictions_in, records);
  }
  const MetricsReport rep = evaluate_predictions(records, preds, thresholds);
  const fs::path report = fs::path(out) / "report.json";
  write_text(report, rep.to_json().dump(2) + "\n");
  man.outputs.push_back(report.string());
  const fs::path pred_path = predictions_out.empty() ? fs::path(out) / "predictions.jsonl" : fs::path(predictions_out);
  write_predictions(pred_path, records, preds);
  man.outputs.push_back(pred_path.string());
  man.write(out);
  std::cout << (as_json ? rep.to_json().dump() + "\n" : rep.to_text());
  return ok;
}

int cmd_infer(const std::string& checkpoint, const std::string& image_path, const std::string& question,
              std::string out, const ModelOpts& mo, bool as_json) {
  const LoadedModel lm = load_model(checkpoint, mo);
  Image img;
  try {
    img = read_pnm(image_path);
  } catch (const ImageError& e) {
    throw DatasetError(e.what());
  }
  Prediction p = predict_vqa(lm.ck.model, lm.vocab, img, question);
  if (lm.ck.train_config.grounding_mode == GroundingMode::none) p.polygon.reset();
  const json j = prediction_to_json(p);
  if (out.empty()) out = (fs::path(checkpoint).parent_path() / "infer").string();
  ensure_dir(out);
  write_text(fs::path(out) / "prediction.json", j.dump(2) + "\n");
  Manifest man("infer", {{"checkpoint", checkpoint}, {"image", image_path}, {"question", question}},
               lm.ck.train_config.seed);
  man.outputs = {(fs::path(out) / "prediction.json").string()};
  man.write(out);
  if (as_json) {
    std::cout << j.dump() << "\n";
  } else {
    std::cout << "answer: " << p.answer << "\n";
    if (p.polygon) {
      std::cout << "polygon:";
      for (const auto& pt : *p.polygon) std::cout << " (" << pt.x << ", " << pt.y << ")";
      std::cout << "\n";
    }
  }
  return ok;
}

// ---------------------------------------------------------------- visualize

constexpr Rgb gold_color{0, 200, 0};
// Prediction colors, one per question index; none of them is green.
constexpr std::array<Rgb, 8> palette = {{{230, 25, 75},
                                         {0, 130, 200},
                                         {245, 130, 48},
                                         {145, 30, 180},
                                         {240, 50, 230},
                                         {128, 0, 0},
                                         {0, 0, 128},
                                         {170, 110, 40}}};

int cmd_visualize(const std::string& corpus, const std::string& predictions_in, const std::string& out, int limit,
                  bool as_json) {
  const auto records = load_corpus(corpus);
  std::vector<std::vector<Prediction>> preds(records.size());
  if (!predictions_in.empty()) preds = read_predictions(predictions_in, records);
  ensure_dir(out);
  Manifest man{"visualize", {{"corpus", corpus}, {"predictions", predictions_in}, {"limit", limit}}};
  json summary = json::array();
  const std::size_t n = limit > 0 ? std::min(records.size(), static_cast<std::size_t>(limit)) : records.size();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = records[i];
    Image canvas = r.sample.image.to_rgb();
    int gold = 0, predicted = 0;
    for (const auto& qa : r.qas)
      if (qa.polygon) {
        draw_polygon(canvas, qa.polygon->points(), gold_color);
        ++gold;
      }
    for (std::size_t k = 0; k < preds[i].size(); ++k)
      if (preds[i][k].polygon) {
        draw_polygon(canvas, *preds[i][k].polygon, palette[k % palette.size()]);
        ++predicted;
      }
    const fs::path path = fs::path(out) / (r.id + ".ppm");
    write_pnm(canvas, path.string());
    man.outputs.push_back(path.string());
    summary.push_back({{"id", r.id}, {"image", path.string()}, {"gold", gold}, {"predicted", predicted}});
  }
  man.write(out);
  if (as_json) std::cout << summary.dump() << "\n";
  else std::cout << "wrote " << n << " overlay image(s) to " << out << "\n";
  return ok;
}

// ---------------------------------------------------------------- ablate

int cmd_ablate(const std::string& corpus, std::string eval_corpus, const std::string& out, const std::string& preset,
               TrainOpts& to, ModelOpts& mo, std::uint64_t seed, const std::string& thresholds_csv,
               bool as_json) {
  to.apply_preset(preset);
  const auto thresholds = parse_thresholds(thresholds_csv);
  const auto records = load_corpus(corpus);
  if (eval_corpus.empty()) eval_corpus = corpus;
  const auto eval_records = load_corpus(eval_corpus);
  std::vector<CorpusRecord> downstream;
  for (const auto& r : records)
    if (r.source == Source::downstream) downstream.push_back(r);
  if (downstream.empty()) throw DatasetError("ablation needs downstream records in " + corpus);
  if (downstream.size() == records.size()) throw DatasetError("ablation needs auxiliary records in " + corpus);

  const Vocabulary vocab = Vocabulary::build(printable_ascii());
  const TrainConfig base = to.config(seed);
  const ModelConfig mc = mo.config(vocab.size());

  struct System {
    std::string name;
    bool auxiliary;
    GroundingMode mode;
    SeeSupervision sup;
  };
  const std::vector<System> systems = {
      {"T1", false, GroundingMode::none, SeeSupervision::auxiliary_and_downstream},
      {"T2", true, GroundingMode::none, SeeSupervision::auxiliary_and_downstream},
      {"T3", true, GroundingMode::see_first, SeeSupervision::auxiliary_only},
      {"T4", true, GroundingMode::see_first, SeeSupervision::auxiliary_and_downstream},
  };
  ensure_dir(out);
  Manifest man{"ablate", {}, seed};
  json rows = json::array();
  for (const auto& s : systems) {
    TrainRun run;
    run.out = fs::path(out) / s.name;
    run.mc = mc;
    run.tc = base;
    run.tc.grounding_mode = s.mode;
    run.tc.see_supervision = s.sup;
    if (s.mode == GroundingMode::none) run.tc.lambda = 0.0;
    run.quiet = true;
    std::cerr << "ablation " << s.name << ": training " << run.tc.total_steps << " steps\n";
    const Model<float> model = run_training(run, s.auxiliary ? records : downstream, vocab, std::nullopt);
    auto preds = predict_corpus(model, vocab, eval_records);
    if (s.mode == GroundingMode::none) preds = strip_polygons(std::move(preds));
    const MetricsReport rep = evaluate_predictions(eval_records, preds, thresholds);
    rows.push_back({{"system", s.name},
                    {"config",
                     {{"auxiliary", s.auxiliary},
                      {"grounding_mode", to_string(s.mode)},
                      {"see_supervision", to_string(s.sup)},
                      {"lambda", run.tc.lambda}}},
                    {"metrics", rep.to_json()}});
    man.outputs.push_back((run.out / "checkpoint.bin").string());
  }
  man.config = {{"corpus", corpus}, {"eval_corpus", eval_corpus}, {"train", to_json(base)},
                {"model", to_json(mc)}, {"thresholds", thresholds}};

  std::ostringstream table;
  table << std::left << std::setw(8) << "system" << std::setw(5) << "aux" << std::setw(11) << "grounding"
        << std::setw(42) << "see_supervision" << std::setw(8) << "lambda";
  for (const char* h : {"F1", "TED", "ANLS", "EM", "mIoU"}) table << std::setw(8) << h;
  for (double t : thresholds) {
    std::ostringstream h;
    h << "@" << t;
    table << std::setw(8) << h.str();
  }
  table << "\n" << std::fixed;
  for (const auto& r : rows) {
    const auto& c = r["config"];
    const auto& m = r["metrics"];
    table << std::setw(8) << r["system"].get<std::string>() << std::setw(5)
          << (c["auxiliary"].get<bool>() ? "yes" : "no") << std::setw(11) << c["grounding_mode"].get<std::string>()
          << std::setw(42) << "see_supervision=" + c["see_supervision"].get<std::string>() << std::setprecision(3)
          << std::setw(8) << c["lambda"].get<double>() << std::setprecision(4);
    for (const char* k : {"f1", "ted_acc", "anls", "exact_match", "mean_iou"}) table << std::setw(8) << m[k].get<double>();
    for (double t : thresholds) {
      std::ostringstream key;
      key << t;
      table << std::setw(8) << m["iou_acc"][key.str()].get<double>();
    }
    table << "\n";
  }
  write_text(fs::path(out) / "ablation.json", rows.dump(2) + "\n");
  write_text(fs::path(out) / "ablation.txt", table.str());
  man.outputs.push_back((fs::path(out) / "ablation.json").string());
  man.outputs.push_back((fs::path(out) / "ablation.txt").string());
  man.write(out);
  std::cout << (as_json ? rows.dump() + "\n" : table.str());
  return ok;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stnet: grounded document question answering at desk scale"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_config("--config", "", "INI/TOML file with option defaults ([subcommand] sections)");
  std::uint64_t seed = 0;
  bool as_json = false;
  app.add_option("--seed", seed, "Seed for every random choice")->capture_default_str();
  app.add_flag("--json", as_json, "Machine-readable output");

  auto* gen = app.add_subcommand("generate", "Render tables, generate and verify QA, write a corpus");
  GenerateOpts go;
  gen->add_option("--count", go.count, "Number of documents")->capture_default_str();
  gen->add_option("--out", go.out, "Corpus directory")->required();
  gen->add_option("--questions-per-doc", go.questions, "Candidate questions per table")->capture_default_str();
  gen->add_option("--width", go.width, "Document width in pixels");
  gen->add_option("--height", go.height, "Document height in pixels");
  gen->add_option("--min-rows", go.min_rows);
  gen->add_option("--max-rows", go.max_rows);
  gen->add_option("--min-cols", go.min_cols);
  gen->add_option("--max-cols", go.max_cols);
  gen->add_option("--warp-probability", go.warp_probability, "Chance of a perspective-warped document");
  gen->add_option("--source", go.source, "Record source label")
      ->check(CLI::IsMember({"mixed", "auxiliary", "downstream"}));
  gen->add_option("--types", go.types, "Comma-separated question types to generate (default: all)");
  gen->add_option("--llm-endpoint", go.llm_endpoint, "http:// chat-completions URL; empty uses the built-in generator");
  gen->add_option("--llm-model", go.llm_model);
  gen->add_option("--llm-token-env", go.llm_token_env, "Environment variable holding the bearer token");
  gen->add_option("--llm-template", go.llm_template, "Prompt template file with [Language] and [Table]");
  gen->add_option("--llm-language", go.llm_language);
  gen->add_option("--llm-in-flight", go.llm_in_flight, "Concurrent requests");
  gen->add_option("--llm-retries", go.llm_retries);

  auto* train = app.add_subcommand("train", "Train a model on a corpus");
  std::string t_corpus, t_out, t_resume, t_preset;
  int log_every = 100;
  TrainOpts t_opts;
  ModelOpts t_model;
  train->add_option("--corpus", t_corpus, "Corpus directory")->required();
  train->add_option("--out", t_out, "Run directory")->required();
  train->add_option("--resume", t_resume, "Continue from this checkpoint");
  train->add_option("--preset", t_preset, "Named configuration (overfit)");
  train->add_option("--log-every", log_every, "Progress line interval");
  t_opts.add(train);
  t_model.add(train);

  auto* eval = app.add_subcommand("eval", "Score a checkpoint or a predictions file on a corpus");
  std::string e_ck, e_corpus, e_pred_in, e_pred_out, e_out, e_thresholds = "1e-3,1e-2,1e-1";
  ModelOpts e_model;
  eval->add_option("--checkpoint", e_ck);
  eval->add_option("--corpus", e_corpus)->required();
  eval->add_option("--predictions", e_pred_in, "Score this predictions file instead of running a model");
  eval->add_option("--save-predictions", e_pred_out);
  eval->add_option("--thresholds", e_thresholds, "IoU thresholds, comma-separated")->capture_default_str();
  eval->add_option("--out", e_out, "Report directory (default: next to the input)");
  e_model.add(eval);

  auto* infer = app.add_subcommand("infer", "Answer one question about one image");
  std::string i_ck, i_image, i_question, i_out;
  ModelOpts i_model;
  infer->add_option("--checkpoint", i_ck)->required();
  infer->add_option("--image", i_image, "PGM/PPM document image")->required();
  infer->add_option("--question", i_question)->required();
  infer->add_option("--out", i_out, "Output directory (default: next to the checkpoint)");
  i_model.add(infer);

  auto* vis = app.add_subcommand("visualize", "Draw gold and predicted polygons over corpus images");
  std::string v_corpus, v_pred, v_out;
  int v_limit = 0;
  vis->add_option("--corpus", v_corpus)->required();
  vis->add_option("--predictions", v_pred, "Predictions file from eval");
  vis->add_option("--out", v_out)->required();
  vis->add_option("--limit", v_limit, "Only the first N records (0: all)");

  auto* abl = app.add_subcommand("ablate", "Train and compare systems T1..T4");
  std::string a_corpus, a_eval, a_out, a_preset, a_thresholds = "1e-3,1e-2,1e-1";
  TrainOpts a_opts;
  ModelOpts a_model;
  abl->add_option("--corpus", a_corpus)->required();
  abl->add_option("--eval-corpus", a_eval, "Evaluation corpus (default: the training corpus)");
  abl->add_option("--out", a_out)->required();
  abl->add_option("--preset", a_preset);
  abl->add_option("--thresholds", a_thresholds)->capture_default_str();
  a_opts.add(abl);
  a_model.add(abl);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? ok : usage;
  }

  try {
    if (*gen) return cmd_generate(go, seed, as_json);
    if (*train) return cmd_train(t_corpus, t_out, t_resume, t_preset, t_opts, t_model, seed, log_every, as_json);
    if (*eval) return cmd_eval(e_ck, e_corpus, e_pred_in, e_pred_out, e_thresholds, e_out, e_model, as_json);
    if (*infer) return cmd_infer(i_ck, i_image, i_question, i_out, i_model, as_json);
    if (*vis) return cmd_visualize(v_corpus, v_pred, v_out, v_limit, as_json);
    if (*abl) return cmd_ablate(a_corpus, a_eval, a_out, a_preset, a_opts, a_model, seed, a_thresholds, as_json);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return usage;
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return numerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return data;
  }
  return usage;
}
