#pragma once

// Teacher-forced training: loss combination, learning-rate schedule, 1:1
// source mixing with see-supervision masking, Adam, and checkpoints.
//
// Every random choice is a pure function of (seed, step, slot), so a run
// resumed from a checkpoint replays exactly the batches it would have seen.

#include <chrono>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "stnet/dataset.hpp"
#include "stnet/image.hpp"
#include "stnet/model.hpp"
#include "stnet/tasks.hpp"

namespace stnet {

/// Raised when a loss or gradient turns non-finite; `dump` describes the batch.
class NumericalError : public std::runtime_error {
 public:
  NumericalError(const std::string& what, std::string dump) : std::runtime_error(what), dump(std::move(dump)) {}
  std::string dump;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class SeeSupervision { auxiliary_only, auxiliary_and_downstream };

inline std::string to_string(SeeSupervision s) {
  return s == SeeSupervision::auxiliary_only ? "auxiliary_only" : "auxiliary_and_downstream";
}

inline SeeSupervision see_supervision_from_string(std::string_view s) {
  if (s == "auxiliary_only") return SeeSupervision::auxiliary_only;
  if (s == "auxiliary_and_downstream") return SeeSupervision::auxiliary_and_downstream;
  throw std::invalid_argument("unknown see supervision: " + std::string(s));
}

inline PaddingMode padding_mode_from_string(std::string_view s) {
  if (s == "centered") return PaddingMode::centered;
  if (s == "random") return PaddingMode::random;
  throw std::invalid_argument("unknown padding mode: " + std::string(s));
}

inline std::string to_string(PaddingMode p) { return p == PaddingMode::centered ? "centered" : "random"; }

struct TrainConfig {
  double lambda = 0.001;
  double peak_lr = 3e-4;
  double warmup_frac = 0.10;
  long total_steps = 1000;
  int batch_size = 8;
  std::uint64_t seed = 0;
  GroundingMode grounding_mode = GroundingMode::see_first;
  int mix_downstream = 1;  // draws per cycle from each source
  int mix_auxiliary = 1;
  SeeSupervision see_supervision = SeeSupervision::auxiliary_and_downstream;
  PaddingMode padding = PaddingMode::random;
  bool task_ocr = false;
  bool task_read = false;
  bool task_vqa = true;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  long checkpoint_every = 0;  // 0: only at the end
  double loc_lr_scale = 1.0;  // learning-rate multiplier for the location rows of the embedding table

  void validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be >= 0");
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw std::invalid_argument("warmup fraction must lie in (0, 1)");
    if (total_steps < 1) throw std::invalid_argument("total steps must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (!(peak_lr > 0.0)) throw std::invalid_argument("peak learning rate must be > 0");
    if (mix_downstream < 1 || mix_auxiliary < 1) throw std::invalid_argument("mix ratio terms must be >= 1");
    if (!task_ocr && !task_read && !task_vqa) throw std::invalid_argument("at least one task must be enabled");
    if (!(clip_norm > 0.0)) throw std::invalid_argument("clip norm must be > 0");
    if (!(loc_lr_scale >= 0.0)) throw std::invalid_argument("location learning-rate scale must be >= 0");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda", c.lambda},
          {"peak_lr", c.peak_lr},
          {"warmup_frac", c.warmup_frac},
          {"total_steps", c.total_steps},
          {"batch_size", c.batch_size},
          {"seed", c.seed},
          {"grounding_mode", to_string(c.grounding_mode)},
          {"mix_ratio", {c.mix_downstream, c.mix_auxiliary}},
          {"see_supervision", to_string(c.see_supervision)},
          {"padding", to_string(c.padding)},
          {"tasks", {{"ocr", c.task_ocr}, {"read", c.task_read}, {"vqa", c.task_vqa}}},
          {"clip_norm", c.clip_norm},
          {"adam", {c.beta1, c.beta2, c.adam_eps}},
          {"checkpoint_every", c.checkpoint_every},
          {"loc_lr_scale", c.loc_lr_scale}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lambda = j.at("lambda").get<double>();
  c.peak_lr = j.at("peak_lr").get<double>();
  c.warmup_frac = j.at("warmup_frac").get<double>();
  c.total_steps = j.at("total_steps").get<long>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.grounding_mode = grounding_mode_from_string(j.at("grounding_mode").get<std::string>());
  c.mix_downstream = j.at("mix_ratio").at(0).get<int>();
  c.mix_auxiliary = j.at("mix_ratio").at(1).get<int>();
  c.see_supervision = see_supervision_from_string(j.at("see_supervision").get<std::string>());
  c.padding = padding_mode_from_string(j.at("padding").get<std::string>());
  c.task_ocr = j.at("tasks").at("ocr").get<bool>();
  c.task_read = j.at("tasks").at("read").get<bool>();
  c.task_vqa = j.at("tasks").at("vqa").get<bool>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.beta1 = j.at("adam").at(0).get<double>();
  c.beta2 = j.at("adam").at(1).get<double>();
  c.adam_eps = j.at("adam").at(2).get<double>();
  c.checkpoint_every = j.at("checkpoint_every").get<long>();
  c.loc_lr_scale = j.value("loc_lr_scale", 1.0);
  return c;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"image_height", c.image_height}, {"image_width", c.image_width}, {"patch", c.patch},
          {"dim", c.dim},                   {"enc_layers", c.enc_layers},   {"dec_layers", c.dec_layers},
          {"heads", c.heads},               {"vocab_size", c.vocab_size},   {"max_len", c.max_len},
          {"positional_encoding", c.positional_encoding}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_height = j.at("image_height").get<int>();
  c.image_width = j.at("image_width").get<int>();
  c.patch = j.at("patch").get<int>();
  c.dim = j.at("dim").get<int>();
  c.enc_layers = j.at("enc_layers").get<int>();
  c.dec_layers = j.at("dec_layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.positional_encoding = j.at("positional_encoding").get<bool>();
  return c;
}

// ---------------------------------------------------------------- loss and schedule

inline double total_loss(double lm, double see, double lambda) { return lm + lambda * see; }

/// Linear warmup 0 -> peak over warmup_frac * total steps, then linear decay to 0.
inline double lr_schedule(long step, long total_steps, double peak, double warmup_frac) {
  if (total_steps < 1 || step < 0 || step > total_steps) throw std::invalid_argument("lr_schedule: step out of range");
  const double warm = warmup_frac * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) return peak * s / warm;
  return peak * (static_cast<double>(total_steps) - s) / (static_cast<double>(total_steps) - warm);
}

// ---------------------------------------------------------------- deterministic streams

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return splitmix64(splitmix64(splitmix64(seed ^ splitmix64(a)) ^ b) ^ c);
}

/// Endless reshuffled pass over [0, n): item i is permutation_{i / n}[i % n].
class CyclingStream {
 public:
  CyclingStream(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
    if (n == 0) throw std::invalid_argument("cannot cycle an empty stream");
  }

  std::size_t at(std::uint64_t i) {
    const std::uint64_t epoch = i / n_;
    if (epoch != epoch_ || perm_.empty()) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), std::size_t{0});
      std::mt19937_64 rng(derive_seed(seed_, epoch));
      std::shuffle(perm_.begin(), perm_.end(), rng);
      epoch_ = epoch;
    }
    return perm_[i % n_];
  }

 private:
  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

/// Which source the n-th draw comes from, and its index within that source,
/// for an interleave of `down` downstream then `aux` auxiliary draws.
inline std::pair<Source, std::uint64_t> mix_slot(std::uint64_t n, int down, int aux) {
  const auto period = static_cast<std::uint64_t>(down + aux);
  const std::uint64_t cycle = n / period, r = n % period;
  if (r < static_cast<std::uint64_t>(down)) return {Source::downstream, cycle * static_cast<std::uint64_t>(down) + r};
  return {Source::auxiliary, cycle * static_cast<std::uint64_t>(aux) + (r - static_cast<std::uint64_t>(down))};
}

inline void apply_see_supervision(TrainingExample& ex, Source src, SeeSupervision sup) {
  if (src == Source::downstream && sup == SeeSupervision::auxiliary_only) ex.see_targets.clear();
}

struct MixedExample {
  Source source;
  TrainingExample example;
};

/// First `count` draws of the mixed stream.
inline std::vector<MixedExample> mix_datasets(const std::vector<TrainingExample>& downstream,
                                              const std::vector<TrainingExample>& auxiliary, std::uint64_t seed,
                                              std::size_t count, SeeSupervision sup, int down_ratio = 1,
                                              int aux_ratio = 1) {
  if (downstream.empty() || auxiliary.empty()) throw std::invalid_argument("mix_datasets: both streams must be non-empty");
  CyclingStream ds(downstream.size(), derive_seed(seed, 1)), as(auxiliary.size(), derive_seed(seed, 2));
  std::vector<MixedExample> out;
  out.reserve(count);
  for (std::uint64_t n = 0; n < count; ++n) {
    const auto [src, idx] = mix_slot(n, down_ratio, aux_ratio);
    MixedExample m{src, src == Source::downstream ? downstream[ds.at(idx)] : auxiliary[as.at(idx)]};
    apply_see_supervision(m.example, src, sup);
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------- examples from a corpus

/// A trainable unit: one task instance of one corpus record. Materialized per
/// step because the canvas placement is re-drawn.
struct ExampleRef {
  int record = 0;
  Task task = Task::vqa;
  int item = 0;  // qa index (vqa) or cell index (ocr)
  Source source = Source::auxiliary;
};

inline TrainingExample materialize(const ExampleRef& ref, const std::vector<CorpusRecord>& records,
                                   const Vocabulary& vocab, const Placement& p, GroundingMode mode) {
  const CorpusRecord& r = records[static_cast<std::size_t>(ref.record)];
  TrainingExample ex;
  switch (ref.task) {
    case Task::ocr: ex = make_ocr_example(vocab, r.sample.cells[static_cast<std::size_t>(ref.item)], p); break;
    case Task::read: ex = make_read_example(vocab, r.sample, p); break;
    case Task::vqa: ex = make_vqa_example(vocab, r.qas[static_cast<std::size_t>(ref.item)], p, mode); break;
  }
  ex.source_id = r.id;
  return ex;
}

struct ExampleInventory {
  std::vector<ExampleRef> downstream;
  std::vector<ExampleRef> auxiliary;
  int skipped_unencodable = 0;
  int skipped_too_long = 0;
};

/// Lists every enabled task instance that the vocabulary can encode and that
/// fits the decoder length.
inline ExampleInventory enumerate_examples(const std::vector<CorpusRecord>& records, const Vocabulary& vocab,
                                           const TrainConfig& cfg, const ModelConfig& mc) {
  ExampleInventory inv;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const CorpusRecord& r = records[i];
    const Placement p = plan_placement(r.sample.image.width, r.sample.image.height, mc.image_width, mc.image_height,
                                       PaddingMode::centered, nullptr);
    std::vector<ExampleRef> refs;
    if (cfg.task_vqa)
      for (std::size_t q = 0; q < r.qas.size(); ++q) refs.push_back({static_cast<int>(i), Task::vqa, static_cast<int>(q), r.source});
    if (cfg.task_read && !r.sample.cells.empty()) refs.push_back({static_cast<int>(i), Task::read, 0, r.source});
    if (cfg.task_ocr)
      for (std::size_t c = 0; c < r.sample.cells.size(); ++c)
        refs.push_back({static_cast<int>(i), Task::ocr, static_cast<int>(c), r.source});
    for (const auto& ref : refs) {
      TrainingExample ex;
      try {
        ex = materialize(ref, records, vocab, p, cfg.grounding_mode);
      } catch (const VocabError&) {
        ++inv.skipped_unencodable;
        continue;
      }
      // decoder input is <bos> + prompt + target minus the final token
      if (static_cast<int>(ex.prompt_ids.size() + ex.target_ids.size()) > mc.max_len) {
        ++inv.skipped_too_long;
        continue;
      }
      (ref.source == Source::downstream ? inv.downstream : inv.auxiliary).push_back(ref);
    }
  }
  return inv;
}

// ---------------------------------------------------------------- loss and gradient of a batch

template <class S>
struct BatchGroup {
  Mat<S> canvas;
  std::vector<TrainingExample> examples;
};

struct BatchLoss {
  double lm = 0.0;                 // mean over examples
  std::optional<double> see;       // mean over supervised examples, if any
  int supervised_examples = 0;
  int examples = 0;
  double total(double lambda) const { return total_loss(lm, see.value_or(0.0), lambda); }
};

struct SequenceLayout {
  std::vector<TokenId> inputs;
  std::vector<TokenId> labels;
  std::unique_ptr<bool[]> mask_data;
  std::size_t prompt_len = 0;
  std::span<const bool> mask() const { return {mask_data.get(), labels.size()}; }
};

/// Inputs are <bos> + prompt + target without its last token; labels are the
/// same sequence shifted by one; only target positions are supervised.
inline SequenceLayout layout_sequence(const TrainingExample& ex) {
  SequenceLayout s;
  std::vector<TokenId> seq{Vocabulary::bos};
  seq.insert(seq.end(), ex.prompt_ids.begin(), ex.prompt_ids.end());
  seq.insert(seq.end(), ex.target_ids.begin(), ex.target_ids.end());
  s.prompt_len = ex.prompt_ids.size();
  s.inputs.assign(seq.begin(), seq.end() - 1);
  s.labels.assign(seq.begin() + 1, seq.end());
  s.mask_data = std::make_unique<bool[]>(s.labels.size());
  for (std::size_t t = 0; t < s.labels.size(); ++t) s.mask_data[t] = t >= s.prompt_len;
  return s;
}

/// Input position whose final hidden state decodes the see target at target index k.
inline std::size_t see_input_position(std::size_t prompt_len, int k) { return 1 + prompt_len + static_cast<std::size_t>(k); }

/// Forward pass over a batch; when `grad` is non-null, accumulates the gradient
/// of lm + lambda * see into it. With lambda = 0 the grounding head is skipped
/// in the backward pass, so its gradient stays exactly zero.
template <class S>
BatchLoss batch_loss(const Model<S>& m, const std::vector<BatchGroup<S>>& groups, double lambda,
                     std::type_identity_t<Model<S>>* grad = nullptr) {
  BatchLoss out;
  for (const auto& g : groups) {
    out.examples += static_cast<int>(g.examples.size());
    for (const auto& ex : g.examples) out.supervised_examples += ex.see_targets.empty() ? 0 : 1;
  }
  if (out.examples == 0) throw std::invalid_argument("empty batch");
  const S lm_scale = S(1) / static_cast<S>(out.examples);
  double see_sum = 0.0;
  for (const auto& g : groups) {
    EncoderCache<S> ecache;
    const Mat<S> z = encode_image(m, g.canvas, grad ? &ecache : nullptr);
    Mat<S> dz;
    if (grad) dz = Mat<S>::Zero(z.rows(), z.cols());
    for (const auto& ex : g.examples) {
      const SequenceLayout lay = layout_sequence(ex);
      const std::span<const bool> mask_span = lay.mask();
      DecoderCache<S> dcache;
      const DecoderOutput<S> dec = decode_tokens(m, z, lay.inputs, grad ? &dcache : nullptr);
      out.lm += lm_loss(dec.logits, lay.labels, mask_span);
      Mat<S> dhidden;
      if (grad) dhidden = Mat<S>::Zero(dec.hidden.rows(), dec.hidden.cols());
      if (!ex.see_targets.empty()) {
        double ex_see = 0.0;
        const double nk = static_cast<double>(ex.see_targets.size());
        for (const auto& st : ex.see_targets) {
          const auto pos = static_cast<Eigen::Index>(see_input_position(lay.prompt_len, st.position));
          const RowVec<S> h = dec.hidden.row(pos);
          const SeeForward<S> f = see_forward(m.query_proj, m.loc(), h);
          ex_see += see_loss(f.expected, st.polygon);
          if (grad && lambda > 0.0) {
            std::array<double, num_coords> de = see_loss_grad(f.expected, st.polygon);
            const double scale = lambda / (nk * out.supervised_examples);
            for (auto& v : de) v *= scale;
            auto g_loc = grad->tok_embed.middleRows(Vocabulary::loc_begin, num_bins);
            dhidden.row(pos) += see_backward<S>(m.query_proj, m.loc(), h, f, de, grad->query_proj, g_loc);
          }
        }
        see_sum += ex_see / nk;
      }
      if (grad) {
        const Mat<S> dlogits = lm_loss_grad(dec.logits, lay.labels, mask_span) * lm_scale;
        dz += backward_decoder(m, dcache, dec, dlogits, dhidden, *grad, z.rows());
      }
    }
    if (grad) backward_encoder(m, ecache, dz, *grad);
  }
  out.lm /= out.examples;
  if (out.supervised_examples > 0) out.see = see_sum / out.supervised_examples;
  return out;
}

// ---------------------------------------------------------------- optimizer

template <class S>
struct AdamState {
  long step = 0;
  std::vector<Mat<S>> m, v;

  static AdamState zeros_for(Model<S>& model) {
    AdamState st;
    for (Mat<S>* p : model.parameters()) {
      st.m.push_back(Mat<S>::Zero(p->rows(), p->cols()));
      st.v.push_back(Mat<S>::Zero(p->rows(), p->cols()));
    }
    return st;
  }
};

/// Scales the gradient down to the given global L2 norm if it exceeds it.
/// Returns the norm before clipping.
template <class S>
double clip_global_norm(Model<S>& grad, double max_norm) {
  double sq = 0.0;
  for (Mat<S>* g : grad.parameters()) sq += g->template cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    for (Mat<S>* g : grad.parameters()) *g *= scale;
  }
  return norm;
}

template <class S>
void adam_update(Model<S>& model, Model<S>& grad, AdamState<S>& st, double lr, const TrainConfig& cfg) {
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S step_size = static_cast<S>(lr / bc1);
  const S inv_bc2 = static_cast<S>(1.0 / bc2);
  const S eps = static_cast<S>(cfg.adam_eps);
  auto params = model.parameters();
  auto grads = grad.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = st.m[i];
    auto& v = st.v[i];
    const auto& g = *grads[i];
    m = b1 * m + (S(1) - b1) * g;
    v = b2 * v + (S(1) - b2) * g.cwiseAbs2();
    Mat<S> delta = step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
    if (params[i] == &model.tok_embed && cfg.loc_lr_scale != 1.0)
      delta.middleRows(Vocabulary::loc_begin, num_bins) *= static_cast<S>(cfg.loc_lr_scale);
    *params[i] -= delta;
  }
}

// ---------------------------------------------------------------- checkpoints

inline constexpr char checkpoint_magic[8] = {'S', 'T', 'N', 'E', 'T', 'C', 'K', 'P'};
inline constexpr std::uint32_t checkpoint_version = 1;

struct Checkpoint {
  Model<float> model;
  std::string charset;
  TrainConfig train_config;
  long step = 0;
  std::optional<AdamState<float>> optimizer;
};

/// Layout: magic, u32 version, u64 header length, JSON header, then float32
/// arrays in header order (parameters, then Adam first and second moments).
/// Little-endian hosts only.
inline void save_checkpoint(const std::filesystem::path& path, Model<float>& model, const std::string& charset,
                            const TrainConfig& tc, long step, const AdamState<float>* opt) {
  nlohmann::json header;
  header["model_config"] = to_json(model.config);
  header["train_config"] = to_json(tc);
  header["charset"] = charset;
  header["step"] = step;
  header["has_optimizer"] = opt != nullptr;
  if (opt) header["optimizer_step"] = opt->step;
  nlohmann::json arrays = nlohmann::json::array();
  model.visit([&](const std::string& name, Mat<float>& m) { arrays.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}}); });
  header["arrays"] = arrays;
  const std::string h = header.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw CheckpointError("cannot write checkpoint " + path.string());
    os.write(checkpoint_magic, 8);
    os.write(reinterpret_cast<const char*>(&checkpoint_version), sizeof checkpoint_version);
    const std::uint64_t len = h.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof len);
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    auto write_mat = [&](const Mat<float>& m) {
      os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    };
    for (Mat<float>* p : model.parameters()) write_mat(*p);
    if (opt) {
      for (const auto& m : opt->m) write_mat(m);
      for (const auto& v : opt->v) write_mat(v);
    }
    if (!os) throw CheckpointError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Loads and validates every array shape. When `expected` is given, the
/// checkpoint must also agree with that model configuration.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, checkpoint_magic, 8) != 0) throw CheckpointError(path.string() + ": not a checkpoint");
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != checkpoint_version) throw CheckpointError(path.string() + ": unsupported version " + std::to_string(version));
  is.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!is || len > (1u << 26)) throw CheckpointError(path.string() + ": corrupt header");
  std::string h(len, '\0');
  is.read(h.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  }
  Checkpoint ck;
  const ModelConfig mc = model_config_from_json(header.at("model_config"));
  const ModelConfig& want = expected ? *expected : mc;
  ck.model = Model<float>::init_shell(want);
  ck.charset = header.at("charset").get<std::string>();
  ck.train_config = train_config_from_json(header.at("train_config"));
  ck.step = header.at("step").get<long>();

  const auto& arrays = header.at("arrays");
  std::size_t idx = 0;
  ck.model.visit([&](const std::string& name, Mat<float>& m) {
    if (idx >= arrays.size()) throw CheckpointError("checkpoint is missing array " + name);
    const auto& a = arrays.at(idx++);
    const auto got = a.at("name").get<std::string>();
    const long r = a.at("shape").at(0).get<long>(), c = a.at("shape").at(1).get<long>();
    if (got != name) throw CheckpointError("checkpoint array " + std::to_string(idx - 1) + " is " + got + ", expected " + name);
    if (r != m.rows() || c != m.cols())
      throw CheckpointError("shape mismatch for " + name + ": checkpoint " + std::to_string(r) + "x" + std::to_string(c) +
                            ", config " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  });
  if (idx != arrays.size()) throw CheckpointError("checkpoint has unexpected extra arrays");
  if (expected && mc.positional_encoding != expected->positional_encoding)
    throw CheckpointError("positional_encoding differs between checkpoint and config");

  auto read_mat = [&](Mat<float>& m) {
    is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!is) throw CheckpointError(path.string() + ": truncated array data");
  };
  for (Mat<float>* p : ck.model.parameters()) read_mat(*p);
  if (header.at("has_optimizer").get<bool>()) {
    AdamState<float> st = AdamState<float>::zeros_for(ck.model);
    st.step = header.at("optimizer_step").get<long>();
    for (auto& m : st.m) read_mat(m);
    for (auto& v : st.v) read_mat(v);
    ck.optimizer = std::move(st);
  }
  return ck;
}

// ---------------------------------------------------------------- training loop

struct StepLog {
  long step = 0;
  double lm_loss = 0.0;
  std::optional<double> see_loss;
  double lr = 0.0;
  double wall_ms = 0.0;

  nlohmann::json to_json() const {
    return {{"step", step},
            {"lm_loss", lm_loss},
            {"see_loss", see_loss ? nlohmann::json(*see_loss) : nlohmann::json(nullptr)},
            {"lr", lr},
            {"wall_ms", wall_ms}};
  }
};

/// Owns the parameters and optimizer state of one run over a fixed corpus.
class Trainer {
 public:
  Trainer(TrainConfig cfg, Model<float> model, const std::vector<CorpusRecord>& records, const Vocabulary& vocab)
      : cfg_(std::move(cfg)), model_(std::move(model)), records_(records), vocab_(vocab) {
    cfg_.validate();
    if (records_.empty()) throw std::invalid_argument("training corpus is empty");
    if (model_.config.vocab_size != vocab_.size()) throw std::invalid_argument("model vocab size disagrees with vocabulary");
    inventory_ = enumerate_examples(records_, vocab_, cfg_, model_.config);
    if (inventory_.downstream.empty() && inventory_.auxiliary.empty())
      throw std::invalid_argument("corpus yields no trainable examples");
    opt_ = AdamState<float>::zeros_for(model_);
    down_.emplace(std::max<std::size_t>(1, inventory_.downstream.size()), derive_seed(cfg_.seed, 1));
    aux_.emplace(std::max<std::size_t>(1, inventory_.auxiliary.size()), derive_seed(cfg_.seed, 2));
  }

  /// Continues from a checkpointed step and optimizer state.
  void resume(long step, AdamState<float> opt) {
    if (step < 0 || step > cfg_.total_steps) throw std::invalid_argument("resume step out of range");
    step_ = step;
    opt_ = std::move(opt);
  }

  const TrainConfig& config() const { return cfg_; }
  Model<float>& model() { return model_; }
  const AdamState<float>& optimizer() const { return opt_; }
  const ExampleInventory& inventory() const { return inventory_; }
  long step() const { return step_; }
  bool done() const { return step_ >= cfg_.total_steps; }

  /// Example reference of the n-th draw of the run.
  ExampleRef draw(std::uint64_t n) {
    const bool has_down = !inventory_.downstream.empty(), has_aux = !inventory_.auxiliary.empty();
    if (has_down && has_aux) {
      const auto [src, idx] = mix_slot(n, cfg_.mix_downstream, cfg_.mix_auxiliary);
      return src == Source::downstream ? inventory_.downstream[down_->at(idx)] : inventory_.auxiliary[aux_->at(idx)];
    }
    return has_down ? inventory_.downstream[down_->at(n)] : inventory_.auxiliary[aux_->at(n)];
  }

  /// Batch for a given step: examples grouped by document, one placement per
  /// (step, document).
  std::vector<BatchGroup<float>> make_batch(long step) {
    std::map<int, std::size_t> group_of;
    std::vector<BatchGroup<float>> groups;
    for (int i = 0; i < cfg_.batch_size; ++i) {
      const ExampleRef ref = draw(static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(cfg_.batch_size) +
                                  static_cast<std::uint64_t>(i));
      const CorpusRecord& rec = records_[static_cast<std::size_t>(ref.record)];
      std::mt19937_64 rng(derive_seed(cfg_.seed, 3, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(ref.record)));
      const Placement p = plan_placement(rec.sample.image.width, rec.sample.image.height, model_.config.image_width,
                                         model_.config.image_height, cfg_.padding, &rng);
      auto it = group_of.find(ref.record);
      if (it == group_of.end()) {
        it = group_of.emplace(ref.record, groups.size()).first;
        groups.push_back(BatchGroup<float>{place_on_canvas<float>(rec.sample.image, p), {}});
      }
      TrainingExample ex = materialize(ref, records_, vocab_, p, cfg_.grounding_mode);
      apply_see_supervision(ex, ref.source, cfg_.see_supervision);
      groups[it->second].examples.push_back(std::move(ex));
    }
    return groups;
  }

  StepLog run_step() {
    if (done()) throw std::logic_error("training already finished");
    const auto t0 = std::chrono::steady_clock::now();
    const auto groups = make_batch(step_);
    Model<float> grad = model_.zeros_like();
    const BatchLoss loss = batch_loss(model_, groups, cfg_.lambda, &grad);
    const double total = loss.total(cfg_.lambda);
    const double norm = clip_global_norm(grad, cfg_.clip_norm);
    if (!std::isfinite(total) || !std::isfinite(norm))
      throw NumericalError("non-finite loss at step " + std::to_string(step_), describe_batch(groups, loss).dump(2));
    const double lr = lr_schedule(step_, cfg_.total_steps, cfg_.peak_lr, cfg_.warmup_frac);
    adam_update(model_, grad, opt_, lr, cfg_);
    StepLog log;
    log.step = step_;
    log.lm_loss = loss.lm;
    log.see_loss = loss.see;
    log.lr = lr;
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    ++step_;
    return log;
  }

 private:
  nlohmann::json describe_batch(const std::vector<BatchGroup<float>>& groups, const BatchLoss& loss) const {
    nlohmann::json j;
    j["step"] = step_;
    j["lm_loss"] = std::isfinite(loss.lm) ? nlohmann::json(loss.lm) : nlohmann::json(std::to_string(loss.lm));
    j["see_loss"] = loss.see ? nlohmann::json(std::to_string(*loss.see)) : nlohmann::json(nullptr);
    nlohmann::json ex = nlohmann::json::array();
    for (const auto& g : groups)
      for (const auto& e : g.examples)
        ex.push_back({{"source_id", e.source_id},
                      {"task", to_string(e.task)},
                      {"prompt", vocab_.detokenize(e.prompt_ids)},
                      {"target_ids", e.target_ids},
                      {"see_targets", e.see_targets.size()}});
    j["examples"] = ex;
    return j;
  }

  TrainConfig cfg_;
  Model<float> model_;
  const std::vector<CorpusRecord>& records_;
  const Vocabulary& vocab_;
  ExampleInventory inventory_;
  AdamState<float> opt_;
  std::optional<CyclingStream> down_, aux_;
  long step_ = 0;
};

/// Runs until `stop_after` steps have completed (or the schedule ends),
/// reporting each step and calling `checkpoint` every checkpoint_every steps.
inline void train_loop(Trainer& t, const std::function<void(const StepLog&)>& on_step,
                       const std::function<void(Trainer&)>& checkpoint = {}, std::optional<long> stop_after = {}) {
  const long end = std::min(t.config().total_steps, stop_after.value_or(t.config().total_steps));
  while (t.step() < end) {
    const StepLog log = t.run_step();
    if (on_step) on_step(log);
    const long every = t.config().checkpoint_every;
    if (checkpoint && every > 0 && t.step() % every == 0 && t.step() < t.config().total_steps) checkpoint(t);
  }
  if (checkpoint) checkpoint(t);
}

}  // namespace stnet
