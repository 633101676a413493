#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <random>

#include "stnet/train.hpp"

using namespace stnet;
namespace fs = std::filesystem;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::build(printable_ascii());
  return v;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.image_height = 32;
  c.image_width = 32;
  c.patch = 8;
  c.dim = 16;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.heads = 2;
  c.vocab_size = vocab().size();
  c.max_len = 80;
  return c;
}

std::vector<CorpusRecord> small_corpus(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<CorpusRecord> out;
  for (int i = 0; i < n; ++i) {
    CorpusRecord r;
    r.id = "r" + std::to_string(i);
    r.source = i % 2 ? Source::auxiliary : Source::downstream;
    r.sample = render_document(random_table_spec(rng), seed * 100 + static_cast<std::uint64_t>(i));
    QaOptions opt;
    opt.questions_per_doc = 4;
    r.qas = gen_qa_deterministic(r.sample, static_cast<std::uint64_t>(i), opt);
    out.push_back(std::move(r));
  }
  return out;
}

TrainConfig quick_config(int steps) {
  TrainConfig tc;
  tc.total_steps = steps;
  tc.batch_size = 4;
  tc.peak_lr = 1e-3;
  tc.seed = 11;
  return tc;
}

QARecord grounded(std::string q, std::string a, PixelPolygon poly) {
  return QARecord{std::move(q), std::move(a), QuestionType::specific_extraction, LogicalLoc{1, 1}, poly, true};
}

std::vector<BatchGroup<double>> handmade_batch(std::mt19937_64& rng) {
  Placement p;
  p.canvas_width = 32;
  p.canvas_height = 32;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<BatchGroup<double>> groups(2);
  for (auto& g : groups) {
    g.canvas = Mat<double>(32, 32);
    for (Eigen::Index i = 0; i < g.canvas.size(); ++i) g.canvas.data()[i] = u(rng);
  }
  groups[0].examples.push_back(make_vqa_example(vocab(), grounded("Qty?", "12", make_rect(3, 4, 20, 15)), p, GroundingMode::see_first));
  groups[0].examples.push_back(make_vqa_example(vocab(), grounded("Tax", "x", make_rect(1, 1, 9, 30)), p, GroundingMode::see_last));
  QARecord plain{"Sum?", "7", QuestionType::numerical, std::nullopt, std::nullopt, false};
  groups[1].examples.push_back(make_vqa_example(vocab(), plain, p, GroundingMode::see_first));
  groups[1].examples.push_back(make_vqa_example(vocab(), grounded("A", "bc", make_rect(10, 12, 31, 20)), p, GroundingMode::see_first));
  return groups;
}

std::vector<TrainingExample> tagged_examples(int n, bool with_targets, int tag) {
  std::vector<TrainingExample> out;
  for (int i = 0; i < n; ++i) {
    TrainingExample ex;
    ex.source_id = std::to_string(tag) + ":" + std::to_string(i);
    ex.target_ids = {Vocabulary::see, Vocabulary::eos};
    if (with_targets) ex.see_targets.push_back(SeeTarget{0, QuantPolygon{}});
    out.push_back(ex);
  }
  return out;
}

bool same_parameters(Model<float>& a, Model<float>& b) {
  auto pa = a.parameters();
  auto pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (std::memcmp(pa[i]->data(), pb[i]->data(), sizeof(float) * static_cast<std::size_t>(pa[i]->size())) != 0) return false;
  return true;
}

}  // namespace

TEST(Train, TotalLossExamples) {
  EXPECT_DOUBLE_EQ(total_loss(1.0, 1000.0, 0.001), 2.0);
  EXPECT_DOUBLE_EQ(total_loss(3.25, 77.0, 0.0), 3.25);
  EXPECT_DOUBLE_EQ(TrainConfig{}.lambda, 0.001);
}

TEST(Train, LrScheduleExamplesAndShape) {
  EXPECT_DOUBLE_EQ(lr_schedule(0, 1000, 3e-4, 0.1), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(100, 1000, 3e-4, 0.1), 3e-4);
  EXPECT_DOUBLE_EQ(lr_schedule(1000, 1000, 3e-4, 0.1), 0.0);
  for (long s = 0; s <= 1000; ++s) {
    const double want = s <= 100 ? 3e-4 * s / 100.0 : 3e-4 * (1000 - s) / 900.0;
    EXPECT_NEAR(lr_schedule(s, 1000, 3e-4, 0.1), want, 1e-18);
  }
  EXPECT_THROW(lr_schedule(-1, 10, 1.0, 0.1), std::invalid_argument);
  EXPECT_THROW(lr_schedule(11, 10, 1.0, 0.1), std::invalid_argument);
}

TEST(Train, ConfigValidationAndJson) {
  TrainConfig c;
  c.lambda = -1;
  EXPECT_ANY_THROW(c.validate());
  c = TrainConfig{};
  c.warmup_frac = 1.0;
  EXPECT_ANY_THROW(c.validate());
  c = TrainConfig{};
  c.total_steps = 0;
  EXPECT_ANY_THROW(c.validate());
  c = quick_config(17);
  c.see_supervision = SeeSupervision::auxiliary_only;
  c.grounding_mode = GroundingMode::see_last;
  c.loc_lr_scale = 0.25;
  const TrainConfig back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  const ModelConfig mc = tiny_config();
  EXPECT_EQ(to_json(model_config_from_json(to_json(mc))), to_json(mc));
}

TEST(Train, MixingIsExactlyOneToOne) {
  const auto down = tagged_examples(3, true, 0), aux = tagged_examples(7, true, 1);
  const auto mixed = mix_datasets(down, aux, 5, 1000, SeeSupervision::auxiliary_and_downstream);
  int nd = 0, na = 0;
  for (const auto& m : mixed) (m.source == Source::downstream ? nd : na)++;
  EXPECT_EQ(nd, 500);
  EXPECT_EQ(na, 500);
  // the shorter stream cycles: every epoch of 3 downstream draws covers all 3
  std::vector<std::string> ds;
  for (const auto& m : mixed)
    if (m.source == Source::downstream) ds.push_back(m.example.source_id);
  for (std::size_t e = 0; e + 3 <= ds.size(); e += 3) {
    std::set<std::string> epoch(ds.begin() + static_cast<std::ptrdiff_t>(e), ds.begin() + static_cast<std::ptrdiff_t>(e + 3));
    EXPECT_EQ(epoch.size(), 3u);
  }
  const auto again = mix_datasets(down, aux, 5, 1000, SeeSupervision::auxiliary_and_downstream);
  for (std::size_t i = 0; i < mixed.size(); ++i) EXPECT_EQ(mixed[i].example.source_id, again[i].example.source_id);
  const auto two_to_one = mix_datasets(down, aux, 5, 999, SeeSupervision::auxiliary_and_downstream, 2, 1);
  nd = 0;
  for (const auto& m : two_to_one) nd += m.source == Source::downstream;
  EXPECT_EQ(nd, 666);
  EXPECT_THROW(mix_datasets({}, aux, 1, 10, SeeSupervision::auxiliary_only), std::invalid_argument);
}

TEST(Train, SeeSupervisionMasking) {
  const auto down = tagged_examples(4, true, 0), aux = tagged_examples(5, true, 1);
  for (const auto& m : mix_datasets(down, aux, 2, 200, SeeSupervision::auxiliary_only)) {
    if (m.source == Source::downstream) EXPECT_TRUE(m.example.see_targets.empty());
    else EXPECT_EQ(m.example.see_targets.size(), 1u);
  }
  for (const auto& m : mix_datasets(down, aux, 2, 200, SeeSupervision::auxiliary_and_downstream))
    EXPECT_EQ(m.example.see_targets.size(), 1u);
}

TEST(Train, FullModelGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(42);
  ModelConfig mc = tiny_config();
  mc.max_len = 24;
  Model<double> m = Model<double>::init(mc, 7);
  m.query_proj.w *= 30.0;  // leave the near-uniform regime so the head contributes
  const auto groups = handmade_batch(rng);
  const double lambda = 0.001;
  Model<double> grad = m.zeros_like();
  const BatchLoss base = batch_loss(m, groups, lambda, &grad);
  ASSERT_TRUE(base.see.has_value());
  EXPECT_EQ(base.supervised_examples, 3);

  auto params = m.parameters();
  auto grads = grad.parameters();
  const auto names = m.parameter_names();
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Mat<double>& w = *params[p];
    std::vector<Eigen::Index> idx;
    std::uniform_int_distribution<Eigen::Index> pick(0, w.size() - 1);
    for (int k = 0; k < 6; ++k) idx.push_back(pick(rng));
    if (names[p] == "tok_embed") {
      // rows actually touched: loc rows near the targets and text tokens in the batch
      for (int bin : {12, 13, 125, 126, 500, 937}) idx.push_back((Vocabulary::loc_begin + bin) + w.rows() * 3);
      idx.push_back(vocab().id("Q") + w.rows() * 5);
      idx.push_back(Vocabulary::see + w.rows() * 2);
    }
    double num_sq = 0.0, diff_sq = 0.0, ana_sq = 0.0;
    for (Eigen::Index i : idx) {
      const double orig = w.data()[i];
      w.data()[i] = orig + h;
      const double up = batch_loss(m, groups, lambda, nullptr).total(lambda);
      w.data()[i] = orig - h;
      const double down = batch_loss(m, groups, lambda, nullptr).total(lambda);
      w.data()[i] = orig;
      const double num = (up - down) / (2 * h);
      const double ana = grads[p]->data()[i];
      num_sq += num * num;
      ana_sq += ana * ana;
      diff_sq += (num - ana) * (num - ana);
    }
    const double scale = std::sqrt(std::max(num_sq, ana_sq));
    if (scale < 1e-7) {
      // attention key biases cancel inside the softmax: both sides sit at the rounding floor
      EXPECT_LT(std::sqrt(diff_sq), 1e-7) << names[p];
      continue;
    }
    const double rel = std::sqrt(diff_sq) / scale;
    worst = std::max(worst, rel);
    EXPECT_LT(rel, 1e-3) << names[p] << " |num| " << std::sqrt(num_sq) << " |ana| " << std::sqrt(ana_sq);
  }
  RecordProperty("worst_relative_error", std::to_string(worst));
}

TEST(Train, ZeroLambdaLeavesHeadGradientZero) {
  std::mt19937_64 rng(3);
  ModelConfig mc = tiny_config();
  mc.max_len = 24;
  const Model<double> m = Model<double>::init(mc, 3);
  const auto groups = handmade_batch(rng);
  Model<double> g0 = m.zeros_like();
  batch_loss(m, groups, 0.0, &g0);
  EXPECT_EQ(g0.query_proj.w.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g0.query_proj.b.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g0.tok_embed.middleRows(Vocabulary::loc_begin, num_bins).cwiseAbs().maxCoeff(), 0.0);

  // no see targets at all: λ > 0 still leaves the head untouched
  auto unsupervised = groups;
  for (auto& g : unsupervised)
    for (auto& ex : g.examples) ex.see_targets.clear();
  Model<double> g1 = m.zeros_like();
  const BatchLoss l1 = batch_loss(m, unsupervised, 0.5, &g1);
  EXPECT_FALSE(l1.see.has_value());
  EXPECT_EQ(g1.query_proj.w.cwiseAbs().maxCoeff(), 0.0);

  Model<double> g2 = m.zeros_like();
  batch_loss(m, groups, 0.001, &g2);
  EXPECT_GT(g2.query_proj.w.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Train, LambdaDoesNotChangeTheForwardPass) {
  std::mt19937_64 rng(4);
  ModelConfig mc = tiny_config();
  mc.max_len = 24;
  const Model<double> m = Model<double>::init(mc, 4);
  const auto groups = handmade_batch(rng);
  const BatchLoss a = batch_loss(m, groups, 0.0, nullptr);
  const BatchLoss b = batch_loss(m, groups, 0.001, nullptr);
  const BatchLoss c = batch_loss(m, groups, 10.0, nullptr);
  EXPECT_EQ(a.lm, b.lm);
  EXPECT_EQ(a.lm, c.lm);
  EXPECT_EQ(*a.see, *b.see);
  EXPECT_EQ(*a.see, *c.see);
  EXPECT_DOUBLE_EQ(c.total(10.0), a.lm + 10.0 * *a.see);
}

TEST(Train, InventoryAndBatchComposition) {
  const auto recs = small_corpus(6, 1);
  Trainer t(quick_config(10), Model<float>::init(tiny_config(), 1), recs, vocab());
  std::size_t total = 0;
  for (const auto& r : recs) total += r.qas.size();
  EXPECT_EQ(t.inventory().downstream.size() + t.inventory().auxiliary.size() + static_cast<std::size_t>(t.inventory().skipped_too_long), total);
  for (long s = 0; s < 5; ++s) {
    const auto groups = t.make_batch(s);
    int n = 0;
    std::set<std::string> docs;
    for (const auto& g : groups) {
      EXPECT_EQ(g.canvas.rows(), 32);
      for (const auto& ex : g.examples) {
        docs.insert(ex.source_id);
        EXPECT_EQ(ex.source_id, g.examples.front().source_id);
      }
      n += static_cast<int>(g.examples.size());
    }
    EXPECT_EQ(n, 4);
    EXPECT_EQ(docs.size(), groups.size());
  }
}

TEST(Train, IdenticalSeedsGiveIdenticalRuns) {
  const auto recs = small_corpus(4, 2);
  std::vector<std::string> logs[2];
  Model<float> finals[2];
  for (int run = 0; run < 2; ++run) {
    Trainer t(quick_config(6), Model<float>::init(tiny_config(), 9), recs, vocab());
    train_loop(t, [&](const StepLog& l) {
      nlohmann::json j = l.to_json();
      j.erase("wall_ms");
      logs[run].push_back(j.dump());
    });
    finals[run] = t.model();
  }
  EXPECT_EQ(logs[0], logs[1]);
  EXPECT_TRUE(same_parameters(finals[0], finals[1]));
}

TEST(Train, FrozenLocationRowsStayPut) {
  const auto recs = small_corpus(4, 2);
  TrainConfig tc = quick_config(5);
  tc.loc_lr_scale = 0.0;
  const Model<float> start = Model<float>::init(tiny_config(), 9);
  Trainer t(tc, start, recs, vocab());
  train_loop(t, [](const StepLog&) {});
  const auto& after = t.model();
  EXPECT_EQ(Mat<float>(after.loc()), Mat<float>(start.loc()));
  const auto text_rows = [](const Model<float>& m) { return Mat<float>(m.tok_embed.topRows(Vocabulary::loc_begin)); };
  EXPECT_NE(text_rows(after), text_rows(start));
  EXPECT_NE(after.query_proj.w, start.query_proj.w);
}

TEST(Train, CheckpointRoundTripAndResume) {
  const auto recs = small_corpus(4, 3);
  const fs::path dir = fs::temp_directory_path() / "stnet_ckpt_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  Trainer full(quick_config(8), Model<float>::init(tiny_config(), 5), recs, vocab());
  std::vector<double> full_losses;
  train_loop(full, [&](const StepLog& l) { full_losses.push_back(l.lm_loss); });

  Trainer first(quick_config(8), Model<float>::init(tiny_config(), 5), recs, vocab());
  train_loop(first, {}, {}, 4);
  ASSERT_EQ(first.step(), 4);
  save_checkpoint(dir / "a.ckpt", first.model(), printable_ascii(), first.config(), first.step(), &first.optimizer());
  EXPECT_FALSE(fs::exists(dir / "a.ckpt.tmp"));

  Checkpoint ck = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(ck.step, 4);
  EXPECT_EQ(ck.charset, printable_ascii());
  EXPECT_EQ(to_json(ck.train_config), to_json(first.config()));
  EXPECT_TRUE(same_parameters(ck.model, first.model()));
  ASSERT_TRUE(ck.optimizer);
  EXPECT_EQ(ck.optimizer->step, 4);

  Trainer resumed(ck.train_config, std::move(ck.model), recs, vocab());
  resumed.resume(ck.step, std::move(*ck.optimizer));
  std::vector<double> tail;
  train_loop(resumed, [&](const StepLog& l) { tail.push_back(l.lm_loss); });
  ASSERT_EQ(tail.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(tail[i], full_losses[4 + i]);
  EXPECT_TRUE(same_parameters(resumed.model(), full.model()));
  fs::remove_all(dir);
}

TEST(Train, CheckpointShapeErrorsNameTheArray) {
  const fs::path path = fs::temp_directory_path() / "stnet_ckpt_shape.ckpt";
  Model<float> m = Model<float>::init(tiny_config(), 1);
  save_checkpoint(path, m, printable_ascii(), TrainConfig{}, 0, nullptr);
  ModelConfig wider = tiny_config();
  wider.dim = 32;
  try {
    load_checkpoint(path, &wider);
    FAIL() << "expected a shape error";
  } catch (const CheckpointError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("shape mismatch for"), std::string::npos) << msg;
    EXPECT_NE(msg.find("patch_embed"), std::string::npos) << msg;
  }
  const ModelConfig same = tiny_config();
  EXPECT_NO_THROW(load_checkpoint(path, &same));
  std::ofstream(path, std::ios::binary) << "garbage";
  EXPECT_THROW(load_checkpoint(path), CheckpointError);
  fs::remove(path);
}

TEST(Train, NonFiniteLossAbortsWithBatchDump) {
  const auto recs = small_corpus(2, 4);
  Model<float> m = Model<float>::init(tiny_config(), 2);
  m.lm_head.b(0, 0) = std::numeric_limits<float>::quiet_NaN();
  Trainer t(quick_config(3), std::move(m), recs, vocab());
  try {
    t.run_step();
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    const auto dump = nlohmann::json::parse(e.dump);
    EXPECT_EQ(dump.at("step"), 0);
    EXPECT_EQ(dump.at("examples").size(), 4u);
  }
}

TEST(Train, SeeLossFallsOnlyWithPositiveLambda) {
  const auto recs = small_corpus(4, 6);
  double first[2] = {0, 0}, last[2] = {0, 0};
  const double lambdas[2] = {0.0, 0.001};
  for (int k = 0; k < 2; ++k) {
    TrainConfig tc = quick_config(200);
    tc.lambda = lambdas[k];
    tc.task_vqa = true;
    Trainer t(tc, Model<float>::init(tiny_config(), 8), recs, vocab());
    std::vector<double> see;
    train_loop(t, [&](const StepLog& l) {
      if (l.see_loss) see.push_back(*l.see_loss);
    });
    ASSERT_GT(see.size(), 100u);
    for (std::size_t i = 0; i < 30; ++i) {
      first[k] += see[i] / 30;
      last[k] += see[see.size() - 1 - i] / 30;
    }
  }
  EXPECT_LT(last[1], 0.5 * first[1]);
  EXPECT_GT(last[0], 0.9 * first[0]);
}
