#pragma once

// Run configuration, checkpoints and the command implementations behind the
// CLI: gen-data, train, sample, eval, ablate, dump-schedule.
//
// Every command is a pure function of (config, seed, inputs): numbers are
// written with shortest round-trip formatting, and nothing time- or
// host-dependent goes into an output file. Wall time for ablations is kept in a
// separate timing file.

#include <algorithm>
#include <bit>
#include <chrono>
#include <concepts>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dosediff/diffusion.hpp"
#include "dosediff/metrics.hpp"
#include "dosediff/networks.hpp"
#include "dosediff/optim.hpp"
#include "dosediff/phantom.hpp"
#include "dosediff/sample_io.hpp"

namespace dosediff::exp {

namespace fs = std::filesystem;
using json = nlohmann::json;
using model::ConfigError;

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Config.

struct ScheduleConfig {
  int steps = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;
  std::string kind = "linear";

  diffusion::NoiseSchedule build() const {
    try {
      return diffusion::make_schedule(steps, beta_start, beta_end, diffusion::parse_schedule_kind(kind));
    } catch (const diffusion::ScheduleError& e) {
      throw ConfigError(std::string("schedule: ") + e.what());
    }
  }
};

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t epochs = 100;
  double decay_start = 0.5;  // fraction of total steps after which lr ramps linearly to 0
  std::size_t checkpoint_every = 0;  // steps; 0 writes only the final checkpoint
};

struct DataConfig {
  std::size_t count = 32;
  std::uint64_t seed = 1;
  std::size_t beam_count = 5;
  data::SplitRatios split;
};

struct SampleConfig {
  std::uint64_t seed = 0;
  bool clamp = true;
  bool stochastic = true;
};

struct RunConfig {
  model::ModelConfig model;
  ScheduleConfig schedule;
  OptimConfig optim;
  DataConfig data;
  SampleConfig sample;
  metrics::MetricOptions metrics;
  std::uint64_t seed = 0;  // parameter init and training draws

  void validate() const {
    model.validate();
    schedule.build();
    if (optim.batch_size < 1) throw ConfigError("optim.batch_size must be >= 1");
    if (optim.epochs < 1) throw ConfigError("optim.epochs must be >= 1");
    if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be > 0");
    if (!(optim.decay_start >= 0.0 && optim.decay_start <= 1.0)) throw ConfigError("optim.decay_start must be in [0, 1]");
    if (data.count < 1) throw ConfigError("data.count must be >= 1");
    if (data.beam_count < 1) throw ConfigError("data.beam_count must be >= 1");
    if (metrics.dvh_bins < 2) throw ConfigError("metrics.dvh_bins must be >= 2");
  }
};

namespace detail {

// Reads known keys from a JSON object; anything left over is an error.
class StrictObject {
 public:
  StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <typename F>
  void field(const std::string& key, F&& read) {
    if (!j_.contains(key)) return;
    seen_.insert(key);
    read(j_.at(key), path_.empty() ? key : path_ + "." + key);
  }

  template <std::unsigned_integral U>
  void get(const std::string& key, U& out) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_number_unsigned()) throw ConfigError(p + " must be a nonnegative integer");
      out = v.get<U>();
    });
  }
  void get(const std::string& key, int& out) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_number_integer()) throw ConfigError(p + " must be an integer");
      out = v.get<int>();
    });
  }
  void get(const std::string& key, double& out) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_number()) throw ConfigError(p + " must be a number");
      out = v.get<double>();
    });
  }
  void get(const std::string& key, bool& out) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_boolean()) throw ConfigError(p + " must be true or false");
      out = v.get<bool>();
    });
  }
  void get(const std::string& key, std::string& out) {
    field(key, [&](const json& v, const std::string& p) {
      if (!v.is_string()) throw ConfigError(p + " must be a string");
      out = v.get<std::string>();
    });
  }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + (path_.empty() ? k : path_ + "." + k) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

inline json to_json(const RunConfig& c) {
  const auto& m = c.model;
  json mj = {
      {"image_size", m.image_size},
      {"oar_count", m.oar_count},
      {"base_channels", m.base_channels},
      {"multipliers", std::vector<std::size_t>(m.multipliers.begin(), m.multipliers.end())},
      {"window", m.window},
      {"heads", m.heads},
      {"projector_ratio", m.projector_ratio},
      {"use_projector", m.use_projector},
      {"fusion", m.fusion.name()},
      {"blocks_per_stage", m.blocks_per_stage},
      {"middle_blocks", m.middle_blocks},
      {"mlp_ratio", m.mlp_ratio},
      {"time_dim", m.time_dim},
  };
  return json{
      {"model", mj},
      {"schedule",
       {{"steps", c.schedule.steps},
        {"beta_start", c.schedule.beta_start},
        {"beta_end", c.schedule.beta_end},
        {"kind", c.schedule.kind}}},
      {"optim",
       {{"lr", c.optim.lr},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps},
        {"batch_size", c.optim.batch_size},
        {"epochs", c.optim.epochs},
        {"decay_start", c.optim.decay_start},
        {"checkpoint_every", c.optim.checkpoint_every}}},
      {"data",
       {{"count", c.data.count},
        {"seed", c.data.seed},
        {"beam_count", c.data.beam_count},
        {"split", {{"train", c.data.split.train}, {"val", c.data.split.val}, {"test", c.data.split.test}}}}},
      {"sample", {{"seed", c.sample.seed}, {"clamp", c.sample.clamp}, {"stochastic", c.sample.stochastic}}},
      {"metrics",
       {{"eval_region", metrics::to_string(c.metrics.eval_region)},
        {"hi_region", metrics::to_string(c.metrics.hi_region)},
        {"dvh_bins", c.metrics.dvh_bins},
        {"dvh_max_dose", c.metrics.dvh_max_dose}}},
      {"seed", c.seed},
  };
}

inline RunConfig config_from_json(const json& j) {
  RunConfig c;
  detail::StrictObject root(j, "");
  root.field("model", [&](const json& v, const std::string& p) {
    detail::StrictObject o(v, p);
    auto& m = c.model;
    o.get("image_size", m.image_size);
    o.get("oar_count", m.oar_count);
    o.get("base_channels", m.base_channels);
    o.field("multipliers", [&](const json& a, const std::string& q) {
      if (!a.is_array() || a.size() != model::kStages) throw ConfigError(q + " must be an array of 5 integers");
      for (std::size_t i = 0; i < model::kStages; ++i) {
        if (!a[i].is_number_unsigned()) throw ConfigError(q + " entries must be positive integers");
        m.multipliers[i] = a[i].get<std::size_t>();
      }
    });
    o.get("window", m.window);
    o.get("heads", m.heads);
    o.get("projector_ratio", m.projector_ratio);
    o.get("use_projector", m.use_projector);
    std::string fusion = m.fusion.name();
    o.get("fusion", fusion);
    m.fusion = model::FusionStrategy::parse(fusion);
    o.get("blocks_per_stage", m.blocks_per_stage);
    o.get("middle_blocks", m.middle_blocks);
    o.get("mlp_ratio", m.mlp_ratio);
    o.get("time_dim", m.time_dim);
    o.finish();
  });
  root.field("schedule", [&](const json& v, const std::string& p) {
    detail::StrictObject o(v, p);
    o.get("steps", c.schedule.steps);
    o.get("beta_start", c.schedule.beta_start);
    o.get("beta_end", c.schedule.beta_end);
    o.get("kind", c.schedule.kind);
    o.finish();
  });
  root.field("optim", [&](const json& v, const std::string& p) {
    detail::StrictObject o(v, p);
    o.get("lr", c.optim.lr);
    o.get("beta1", c.optim.beta1);
    o.get("beta2", c.optim.beta2);
    o.get("eps", c.optim.eps);
    o.get("batch_size", c.optim.batch_size);
    o.get("epochs", c.optim.epochs);
    o.get("decay_start", c.optim.decay_start);
    o.get("checkpoint_every", c.optim.checkpoint_every);
    o.finish();
  });
  root.field("data", [&](const json& v, const std::string& p) {
    detail::StrictObject o(v, p);
    o.get("count", c.data.count);
    o.get("seed", c.data.seed);
    o.get("beam_count", c.data.beam_count);
    o.field("split", [&](const json& s, const std::string& q) {
      detail::StrictObject so(s, q);
      so.get("train", c.data.split.train);
      so.get("val", c.data.split.val);
      so.get("test", c.data.split.test);
      so.finish();
    });
    o.finish();
  });
  root.field("sample", [&](const json& v, const std::string& p) {
    detail::StrictObject o(v, p);
    o.get("seed", c.sample.seed);
    o.get("clamp", c.sample.clamp);
    o.get("stochastic", c.sample.stochastic);
    o.finish();
  });
  root.field("metrics", [&](const json& v, const std::string& p) {
    detail::StrictObject o(v, p);
    std::string eval = metrics::to_string(c.metrics.eval_region), hi = metrics::to_string(c.metrics.hi_region);
    o.get("eval_region", eval);
    o.get("hi_region", hi);
    try {
      c.metrics.eval_region = metrics::parse_region(eval);
      c.metrics.hi_region = metrics::parse_region(hi);
    } catch (const metrics::MetricError& e) {
      throw ConfigError(p + ": " + e.what());
    }
    o.get("dvh_bins", c.metrics.dvh_bins);
    o.get("dvh_max_dose", c.metrics.dvh_max_dose);
    o.finish();
  });
  root.get("seed", c.seed);
  root.finish();
  c.validate();
  return c;
}

inline RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline std::string serialize_config(const RunConfig& c) { return to_json(c).dump(2) + "\n"; }

inline RunConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = data::read_file(path);
  } catch (const std::runtime_error& e) {
    throw ConfigError(e.what());
  }
  return parse_config(text);
}

// ---------------------------------------------------------------------------
// Dataset on disk.

inline std::string case_name(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04zu", id);
  return buf;
}

inline std::size_t case_id(const std::string& name) {
  if (name.rfind("case_", 0) != 0 || name.size() <= 5 || name.find_first_not_of("0123456789", 5) != std::string::npos)
    throw DataError("malformed case name '" + name + "'");
  return std::stoul(name.substr(5));
}

struct Manifest {
  std::size_t count = 0;
  std::size_t image_size = 0, oar_count = 0, beam_count = 0;
  data::DatasetSplit split;
};

inline std::string manifest_text(const Manifest& m) {
  json j = {{"count", m.count},
            {"seed", m.split.seed},
            {"image_size", m.image_size},
            {"oar_count", m.oar_count},
            {"beam_count", m.beam_count},
            {"generator_version", data::kGeneratorVersion},
            {"train", m.split.train},
            {"val", m.split.val},
            {"test", m.split.test}};
  return j.dump(2) + "\n";
}

inline Manifest read_manifest(const fs::path& data_dir) {
  const fs::path p = data_dir / "split.json";
  if (!fs::exists(p)) throw DataError("no dataset manifest at " + p.string());
  try {
    const json j = json::parse(data::read_file(p));
    Manifest m;
    m.count = j.at("count").get<std::size_t>();
    m.image_size = j.at("image_size").get<std::size_t>();
    m.oar_count = j.at("oar_count").get<std::size_t>();
    m.beam_count = j.at("beam_count").get<std::size_t>();
    m.split.seed = j.at("seed").get<std::uint64_t>();
    m.split.train = j.at("train").get<std::vector<std::size_t>>();
    m.split.val = j.at("val").get<std::vector<std::size_t>>();
    m.split.test = j.at("test").get<std::vector<std::size_t>>();
    return m;
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + p.string() + ": " + e.what());
  }
}

inline fs::path sample_path(const fs::path& dir, std::size_t id) { return dir / (case_name(id) + ".spdp"); }

inline data::PhantomSample load_case(const fs::path& data_dir, std::size_t id) {
  const fs::path p = sample_path(data_dir, id);
  if (!fs::exists(p)) throw DataError("missing case file " + p.string());
  try {
    return data::read_sample(p);
  } catch (const data::SampleFormatError& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

inline void check_case_fits(const data::PhantomSample& s, const model::ModelConfig& m, const std::string& name) {
  if (s.size != m.image_size || s.oar_count != m.oar_count) {
    throw DataError(name + " is " + std::to_string(s.size) + "x" + std::to_string(s.size) + " with " +
                    std::to_string(s.oar_count) + " OARs; model expects " + std::to_string(m.image_size) + " and " +
                    std::to_string(m.oar_count));
  }
}

/// Writes case_XXXX.spdp for ids 0..count-1 and split.json. Returns the manifest.
inline Manifest gen_data(const RunConfig& cfg, const fs::path& out_dir) {
  Manifest m;
  m.count = cfg.data.count;
  m.image_size = cfg.model.image_size;
  m.oar_count = cfg.model.oar_count;
  m.beam_count = cfg.data.beam_count;
  m.split = data::make_split(cfg.data.count, cfg.data.seed, cfg.data.split);
  fs::create_directories(out_dir);
  for (std::size_t id = 0; id < cfg.data.count; ++id) {
    const auto s = data::generate_phantom(data::case_seed(cfg.data.seed, id), m.image_size, m.oar_count, m.beam_count);
    data::write_sample(sample_path(out_dir, id), s);
  }
  data::write_file(out_dir / "split.json", manifest_text(m));
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints.
//
//   "DDCK" | u32 version | u64 n | n bytes of JSON header | f64 payload
//
// The header echoes the config and lists parameters in name order; the
// payload is, per parameter, value, Adam m, Adam v (little-endian f64).

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct ParamRecord {
  std::string name;
  Shape shape;
  std::vector<double> value, m, v;
  std::uint64_t adam_step = 0;
  bool operator==(const ParamRecord&) const = default;
};

struct Checkpoint {
  RunConfig config;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  std::string rng_state;
  std::vector<ParamRecord> params;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  json params = json::array();
  for (const auto& p : ck.params) params.push_back({{"name", p.name}, {"shape", p.shape}, {"adam_step", p.adam_step}});
  const json header = {{"version", kCheckpointVersion}, {"config", to_json(ck.config)}, {"step", ck.step},
                       {"epoch", ck.epoch},             {"rng_state", ck.rng_state},  {"params", params}};
  const std::string h = header.dump();
  std::string out = "DDCK";
  auto put = [&](std::uint64_t v, int bytes) {
    for (int k = 0; k < bytes; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xFF));
  };
  put(kCheckpointVersion, 4);
  put(h.size(), 8);
  out += h;
  for (const auto& p : ck.params)
    for (const auto* vec : {&p.value, &p.m, &p.v})
      for (double x : *vec) put(std::bit_cast<std::uint64_t>(x), 8);
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw DataError("checkpoint truncated");
  };
  auto get = [&](int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int k = 0; k < n; ++k) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * k);
    return v;
  };
  need(4);
  if (bytes.compare(0, 4, "DDCK") != 0) throw DataError("not a checkpoint (bad magic)");
  pos = 4;
  if (get(4) != kCheckpointVersion) throw DataError("unsupported checkpoint version");
  const std::uint64_t n = get(8);
  need(n);
  Checkpoint ck;
  json header;
  try {
    header = json::parse(bytes.substr(pos, n));
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint header: ") + e.what());
  }
  pos += n;
  ck.config = config_from_json(header.at("config"));
  ck.step = header.at("step").get<std::uint64_t>();
  ck.epoch = header.at("epoch").get<std::uint64_t>();
  ck.rng_state = header.at("rng_state").get<std::string>();
  for (const auto& pj : header.at("params")) {
    ParamRecord p;
    p.name = pj.at("name").get<std::string>();
    p.shape = pj.at("shape").get<Shape>();
    p.adam_step = pj.at("adam_step").get<std::uint64_t>();
    const std::size_t count = shape_numel(p.shape);
    for (auto* vec : {&p.value, &p.m, &p.v}) {
      vec->resize(count);
      for (double& x : *vec) x = std::bit_cast<double>(get(8));
    }
    ck.params.push_back(std::move(p));
  }
  if (pos != bytes.size()) throw DataError("trailing bytes in checkpoint");
  return ck;
}

inline void save_checkpoint(const fs::path& path, const Checkpoint& ck) { data::write_file(path, encode_checkpoint(ck)); }

inline Checkpoint load_checkpoint(const fs::path& path) {
  if (!fs::exists(path)) throw DataError("no checkpoint at " + path.string());
  return decode_checkpoint(data::read_file(path));
}

inline std::vector<ParamRecord> snapshot_params(const ParamStore& store) {
  std::vector<ParamRecord> out;
  for (const auto& [name, t] : store) {
    ParamRecord r{name, t.shape(), t.values(), {}, {}, 0};
    auto it = store.optimizer_state().find(name);
    if (it != store.optimizer_state().end() && !it->second.m.empty()) {
      r.m = it->second.m;
      r.v = it->second.v;
      r.adam_step = it->second.step;
    } else {
      r.m.assign(t.numel(), 0.0);
      r.v.assign(t.numel(), 0.0);
    }
    out.push_back(std::move(r));
  }
  return out;
}

inline void restore_params(ParamStore& store, const std::vector<ParamRecord>& records) {
  if (records.size() != store.size()) throw ConfigError("checkpoint parameter set does not match the model config");
  for (const auto& r : records) {
    if (!store.contains(r.name)) throw ConfigError("checkpoint has unknown parameter '" + r.name + "'");
    Tensor& t = store.at(r.name);
    if (t.shape() != r.shape) throw ConfigError("checkpoint shape mismatch for '" + r.name + "'");
    auto d = t.mutable_data();
    std::copy(r.value.begin(), r.value.end(), d.begin());
    store.optimizer_state()[r.name] = AdamState{r.m, r.v, r.adam_step};
  }
}

inline model::DoseModel model_from_checkpoint(const Checkpoint& ck) {
  auto m = model::DoseModel::build(ck.config.model, ck.config.seed);
  restore_params(m.params(), ck.params);
  return m;
}

// ---------------------------------------------------------------------------
// Training.

inline constexpr std::uint64_t kTrainStream = 0x7472'6169'6e00ULL;    // training draws
inline constexpr std::uint64_t kShuffleStream = 0x7368'7566'0000ULL;  // + epoch

inline std::size_t steps_per_epoch(std::size_t n_train, std::size_t batch) { return (n_train + batch - 1) / batch; }

/// Learning rate for the 0-based step `k` of `total`: constant until
/// decay_start * total, then linear so it would reach 0 at `total`.
inline double lr_at(const OptimConfig& o, std::uint64_t k, std::uint64_t total) {
  const double start = std::floor(o.decay_start * static_cast<double>(total));
  const double kk = static_cast<double>(k);
  if (kk < start || total == 0) return o.lr;
  return o.lr * (static_cast<double>(total) - kk) / (static_cast<double>(total) - start);
}

inline std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng = Rng::derived(seed, kShuffleStream + epoch);
  for (std::size_t i = n; i > 1; --i)
    std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
  return order;
}

struct LossRow {
  std::uint64_t step;  // 1-based index of the update
  double loss;
  double lr;
};

inline std::string loss_row_text(const LossRow& r) {
  return std::to_string(r.step) + "," + data::format_double(r.loss) + "," + data::format_double(r.lr) + "\n";
}

class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<data::PhantomSample> train_set)
      : cfg_(std::move(cfg)),
        schedule_(cfg_.schedule.build()),
        model_(model::DoseModel::build(cfg_.model, cfg_.seed)),
        rng_(Rng::derived(cfg_.seed, kTrainStream)),
        train_(std::move(train_set)) {
    if (train_.empty()) throw DataError("training split is empty");
    for (const auto& s : train_) check_case_fits(s, cfg_.model, "training case");
  }

  /// Continues from a checkpoint written by a run with the same config.
  Trainer(const Checkpoint& ck, const RunConfig& cfg, std::vector<data::PhantomSample> train_set)
      : Trainer(cfg, std::move(train_set)) {
    if (to_json(ck.config) != to_json(cfg)) throw ConfigError("checkpoint was written with a different config");
    restore_params(model_.params(), ck.params);
    rng_.set_state(ck.rng_state);
    step_ = ck.step;
    if (step_ > total_steps()) throw ConfigError("checkpoint step exceeds the configured run length");
  }

  std::uint64_t total_steps() const { return cfg_.optim.epochs * per_epoch(); }
  std::uint64_t step() const { return step_; }
  bool done() const { return step_ >= total_steps(); }
  const model::DoseModel& model() const { return model_; }

  LossRow advance() {
    const std::uint64_t epoch = step_ / per_epoch(), within = step_ % per_epoch();
    const auto order = epoch_order(cfg_.seed, epoch, train_.size());
    const std::size_t b = cfg_.optim.batch_size;
    std::vector<const data::PhantomSample*> batch;
    for (std::size_t i = within * b; i < std::min(order.size(), (within + 1) * b); ++i) batch.push_back(&train_[order[i]]);
    const auto nb = data::normalize_batch(batch);

    const Tensor loss = diffusion::training_step(model_.predictor(), nb.dose, nb.condition, schedule_, rng_);
    const double value = loss.item();
    if (!std::isfinite(value)) throw NumericError("non-finite loss at step " + std::to_string(step_ + 1));
    const GradMap grads = backward(loss, model_.params());
    const double lr = lr_at(cfg_.optim, step_, total_steps());
    adam_step(model_.params(), grads,
              AdamOptions{.lr = lr, .beta1 = cfg_.optim.beta1, .beta2 = cfg_.optim.beta2, .eps = cfg_.optim.eps});
    ++step_;
    return {step_, value, lr};
  }

  Checkpoint checkpoint() const {
    return {cfg_, step_, step_ / per_epoch(), rng_.state(), snapshot_params(model_.params())};
  }

 private:
  std::uint64_t per_epoch() const { return steps_per_epoch(train_.size(), cfg_.optim.batch_size); }

  RunConfig cfg_;
  diffusion::NoiseSchedule schedule_;
  model::DoseModel model_;
  Rng rng_;
  std::vector<data::PhantomSample> train_;
  std::uint64_t step_ = 0;
};

inline std::vector<data::PhantomSample> load_split(const fs::path& data_dir, const std::vector<std::size_t>& ids) {
  std::vector<data::PhantomSample> out;
  for (std::size_t id : ids) out.push_back(load_case(data_dir, id));
  return out;
}

struct TrainOptions {
  fs::path resume;                 // empty: fresh run
  std::uint64_t stop_after = 0;    // 0: run to completion
  std::function<void(const LossRow&)> on_step;
};

inline std::string checkpoint_name(std::uint64_t step) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "step_%08llu.ddck", static_cast<unsigned long long>(step));
  return buf;
}

/// Trains on the manifest's train split. Writes out/loss.csv,
/// out/checkpoints/step_XXXXXXXX.ddck every checkpoint_every steps and
/// out/last.ddck when the command stops. On resume, loss.csv rows up to the
/// checkpoint step are kept.
inline Checkpoint train(const RunConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                        const TrainOptions& opt = {}) {
  const Manifest man = read_manifest(data_dir);
  auto train_set = load_split(data_dir, man.split.train);
  std::optional<Trainer> trainer;
  std::string log = "step,loss,lr\n";
  if (opt.resume.empty()) {
    trainer.emplace(cfg, std::move(train_set));
  } else {
    const Checkpoint ck = load_checkpoint(opt.resume);
    trainer.emplace(ck, cfg, std::move(train_set));
    const fs::path old = out_dir / "loss.csv";
    if (fs::exists(old)) {
      std::istringstream in(data::read_file(old));
      std::string line;
      std::getline(in, line);
      while (std::getline(in, line)) {
        const auto comma = line.find(',');
        if (comma == std::string::npos) break;
        if (std::stoull(line.substr(0, comma)) > ck.step) break;
        log += line + "\n";
      }
    }
  }
  fs::create_directories(out_dir);
  while (!trainer->done() && (opt.stop_after == 0 || trainer->step() < opt.stop_after)) {
    const LossRow row = trainer->advance();
    log += loss_row_text(row);
    if (opt.on_step) opt.on_step(row);
    if (cfg.optim.checkpoint_every && row.step % cfg.optim.checkpoint_every == 0)
      save_checkpoint(out_dir / "checkpoints" / checkpoint_name(row.step), trainer->checkpoint());
  }
  data::write_file(out_dir / "loss.csv", log);
  Checkpoint last = trainer->checkpoint();
  save_checkpoint(out_dir / "last.ddck", last);
  return last;
}

// ---------------------------------------------------------------------------
// Sampling and renders.

inline constexpr double kDiffScale = 0.25;  // prescription units at full colour

/// P5, gray = round(clamp(d, 0, 1.25) / 1.25 * 255).
inline std::string render_pgm(const std::vector<float>& dose, std::size_t size) {
  std::string out = "P5\n" + std::to_string(size) + " " + std::to_string(size) + "\n255\n";
  for (float d : dose) {
    const double g = std::clamp<double>(d, 0.0, data::kDoseScale) / data::kDoseScale * 255.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(g))));
  }
  return out;
}

/// P6 blue-white-red map of pred - truth; saturates at +-kDiffScale.
inline std::string render_diff_ppm(const std::vector<float>& pred, const std::vector<float>& truth, std::size_t size) {
  std::string out = "P6\n" + std::to_string(size) + " " + std::to_string(size) + "\n255\n";
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double v = std::clamp((static_cast<double>(pred[i]) - truth[i]) / kDiffScale, -1.0, 1.0);
    const auto fade = static_cast<unsigned char>(std::lround(255.0 * (1.0 - std::abs(v))));
    const unsigned char r = v < 0 ? fade : 255, b = v > 0 ? fade : 255;
    out.push_back(static_cast<char>(r));
    out.push_back(static_cast<char>(fade));
    out.push_back(static_cast<char>(b));
  }
  return out;
}

/// Per-case sampling seed.
inline std::uint64_t sample_seed(std::uint64_t seed, std::size_t id) { return Rng::derived(seed, id).next_u64(); }

inline data::DoseMap predict_case(const model::DoseModel& m, const diffusion::NoiseSchedule& s,
                                  const data::PhantomSample& c, std::uint64_t seed, const SampleConfig& sc) {
  const Tensor y = data::condition_tensor({&c});
  const Tensor x = m.sample(y, s, seed, diffusion::SampleOptions{sc.clamp, sc.stochastic});
  data::DoseMap d;
  d.size = c.size;
  d.dose.resize(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) d.dose[i] = std::max(0.0f, data::denormalize_dose(x[i]));
  return d;
}

/// Samples each case (default: the manifest's test split) and writes
/// case_XXXX.spdp (dose only), case_XXXX.pgm and case_XXXX_diff.ppm.
inline std::vector<std::size_t> sample(const Checkpoint& ck, const fs::path& data_dir, const fs::path& out_dir,
                                       std::vector<std::size_t> ids, std::uint64_t seed) {
  const RunConfig& cfg = ck.config;
  if (ids.empty()) ids = read_manifest(data_dir).split.test;
  if (ids.empty()) throw DataError("no cases to sample");
  const auto m = model_from_checkpoint(ck);
  const auto s = cfg.schedule.build();
  fs::create_directories(out_dir);
  for (std::size_t id : ids) {
    const auto c = load_case(data_dir, id);
    check_case_fits(c, cfg.model, case_name(id));
    const std::uint64_t case_seed = sample_seed(seed, id);
    auto d = predict_case(m, s, c, case_seed, cfg.sample);
    d.meta = {{"case", case_name(id)},
              {"checkpoint_step", std::to_string(ck.step)},
              {"fusion", cfg.model.fusion.name()},
              {"seed", std::to_string(case_seed)}};
    data::write_dose_map(out_dir / (case_name(id) + ".spdp"), d);
    data::write_file(out_dir / (case_name(id) + ".pgm"), render_pgm(d.dose, d.size));
    data::write_file(out_dir / (case_name(id) + "_diff.ppm"), render_diff_ppm(d.dose, c.dose, d.size));
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct EvalResult {
  std::vector<metrics::MetricsReport> cases;
  std::map<std::string, metrics::Summary> summary;  // keyed by CSV column
};

inline std::vector<std::string> prediction_cases(const fs::path& pred_dir) {
  if (!fs::is_directory(pred_dir)) throw DataError("no prediction directory " + pred_dir.string());
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.path().extension() == ".spdp") names.push_back(e.path().stem().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw DataError("no predictions in " + pred_dir.string());
  return names;
}

inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"dose_score_rel", "dose_score_mae", "dvh_score", "hi"};
  return cols;
}

inline double metric_value(const metrics::MetricsReport& r, const std::string& col) {
  if (col == "dose_score_rel") return r.dose_score_relative;
  if (col == "dose_score_mae") return r.dose_score_mae;
  if (col == "dvh_score") return r.dvh_score;
  return r.hi;
}

struct CaseCurves {
  std::vector<metrics::DvhCurve> pred, truth;
};

inline EvalResult evaluate(const fs::path& pred_dir, const fs::path& truth_dir, const metrics::MetricOptions& opt,
                           std::map<std::string, CaseCurves>* curves = nullptr) {
  EvalResult res;
  for (const auto& name : prediction_cases(pred_dir)) {
    const std::size_t id = case_id(name);
    const fs::path tp = sample_path(truth_dir, id);
    if (!fs::exists(tp)) throw DataError("case mismatch: " + name + " has no ground truth in " + truth_dir.string());
    const auto truth = load_case(truth_dir, id);
    data::DoseMap pred;
    try {
      pred = data::read_dose_map(pred_dir / (name + ".spdp"));
    } catch (const data::SampleFormatError& e) {
      throw DataError(name + ": " + e.what());
    }
    if (pred.size != truth.size) throw DataError("case mismatch: " + name + " prediction size differs from truth");
    res.cases.push_back(metrics::evaluate_case(name, pred.dose, truth, opt));
    if (curves) {
      CaseCurves cc;
      const auto p = metrics::to_double(pred.dose), t = metrics::to_double(truth.dose);
      for (const auto& s : metrics::structures_of(truth)) {
        cc.pred.push_back(metrics::dvh_curve(p, *s.mask, opt.dvh_bins, opt.dvh_max_dose, s.name));
        cc.truth.push_back(metrics::dvh_curve(t, *s.mask, opt.dvh_bins, opt.dvh_max_dose, s.name));
      }
      (*curves)[name] = std::move(cc);
    }
  }
  for (const auto& col : metric_columns()) {
    std::vector<double> v;
    for (const auto& r : res.cases) v.push_back(metric_value(r, col));
    res.summary[col] = metrics::summarize(v);
  }
  return res;
}

inline std::string eval_csv(const EvalResult& r) {
  std::string out = std::string(metrics::kEvalCsvHeader) + "\n";
  for (const auto& c : r.cases) out += metrics::csv_row(c) + "\n";
  return out;
}

inline std::string summary_csv(const EvalResult& r) {
  std::string out = "metric,mean,std,mean_pm_std\n";
  for (const auto& col : metric_columns()) {
    const auto& s = r.summary.at(col);
    out += col + "," + data::format_double(s.mean) + "," + data::format_double(s.std) + "," + metrics::mean_pm_std(s) +
           "\n";
  }
  return out;
}

inline std::string ttest_csv(const EvalResult& a, const EvalResult& b) {
  if (a.cases.size() != b.cases.size()) throw DataError("t-test: prediction sets have different cases");
  for (std::size_t i = 0; i < a.cases.size(); ++i)
    if (a.cases[i].case_id != b.cases[i].case_id) throw DataError("t-test: prediction sets have different cases");
  std::string out = "metric,t,df,p\n";
  for (const auto& col : metric_columns()) {
    std::vector<double> x, y;
    for (const auto& c : a.cases) x.push_back(metric_value(c, col));
    for (const auto& c : b.cases) y.push_back(metric_value(c, col));
    auto has_nan = [](const std::vector<double>& v) {
      return std::any_of(v.begin(), v.end(), [](double d) { return std::isnan(d); });
    };
    if (has_nan(x) || has_nan(y)) {
      out += col + ",nan,nan,nan\n";
      continue;
    }
    try {
      const auto t = metrics::paired_t_test(x, y);
      out += col + "," + data::format_double(t.t) + "," + data::format_double(t.df) + "," + data::format_double(t.p) +
             "\n";
    } catch (const metrics::MetricError&) {
      out += col + ",nan,nan,nan\n";  // fewer than two cases or identical columns
    }
  }
  return out;
}

/// Writes eval.csv, summary.csv, reports/<case>.txt and
/// dvh/<case>_{pred,truth}.csv; with `compare_dir`, also ttest.csv.
inline EvalResult eval(const fs::path& pred_dir, const fs::path& truth_dir, const fs::path& out_dir,
                       const metrics::MetricOptions& opt, const fs::path& compare_dir = {}) {
  std::map<std::string, CaseCurves> curves;
  const EvalResult res = evaluate(pred_dir, truth_dir, opt, &curves);
  fs::create_directories(out_dir);
  data::write_file(out_dir / "eval.csv", eval_csv(res));
  data::write_file(out_dir / "summary.csv", summary_csv(res));
  for (const auto& c : res.cases) {
    data::write_file(out_dir / "reports" / (c.case_id + ".txt"), metrics::key_value_block(c));
    data::write_file(out_dir / "dvh" / (c.case_id + "_pred.csv"), metrics::dvh_csv(curves[c.case_id].pred));
    data::write_file(out_dir / "dvh" / (c.case_id + "_truth.csv"), metrics::dvh_csv(curves[c.case_id].truth));
  }
  if (!compare_dir.empty()) {
    const EvalResult other = evaluate(compare_dir, truth_dir, opt);
    data::write_file(out_dir / "ttest.csv", ttest_csv(res, other));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Ablation.

struct AblationRow {
  std::string strategy;
  std::size_t parameters = 0;
  EvalResult result;
  double seconds = 0.0;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "strategy,parameters,dose_score_rel,dose_score_mae,dvh_score,hi,dose_score_mae_pm_std\n";
  for (const auto& r : rows) {
    const auto& s = r.result.summary;
    out += r.strategy + "," + std::to_string(r.parameters) + "," + data::format_double(s.at("dose_score_rel").mean) +
           "," + data::format_double(s.at("dose_score_mae").mean) + "," + data::format_double(s.at("dvh_score").mean) +
           "," + data::format_double(s.at("hi").mean) + "," + metrics::mean_pm_std(s.at("dose_score_mae")) + "\n";
  }
  return out;
}

inline std::string timing_csv(const std::vector<AblationRow>& rows) {
  std::string out = "strategy,wall_seconds\n";
  for (const auto& r : rows) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", r.seconds);
    out += r.strategy + "," + buf + "\n";
  }
  return out;
}

/// Generates one shared dataset under out/data, then for each strategy
/// trains, samples the test split and evaluates under out/<strategy>/.
/// Writes out/ablation.csv (deterministic) and out/timing.csv (wall time).
inline std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<model::FusionStrategy>& strategies,
                                       const fs::path& out_dir,
                                       const std::function<void(const std::string&)>& progress = {}) {
  if (strategies.empty()) throw ConfigError("ablate: no strategies given");
  const fs::path data_dir = out_dir / "data";
  gen_data(base, data_dir);
  std::vector<AblationRow> rows;
  for (const auto& f : strategies) {
    RunConfig cfg = base;
    cfg.model.fusion = f;
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path dir = out_dir / f.name();
    if (progress) progress(f.name());
    const Checkpoint ck = train(cfg, data_dir, dir / "run");
    sample(ck, data_dir, dir / "pred", {}, cfg.sample.seed);
    AblationRow row;
    row.strategy = f.name();
    row.parameters = model::DoseModel::build(cfg.model, cfg.seed).params().parameter_count();
    row.result = eval(dir / "pred", data_dir, dir / "eval", cfg.metrics);
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(std::move(row));
  }
  data::write_file(out_dir / "ablation.csv", ablation_csv(rows));
  data::write_file(out_dir / "timing.csv", timing_csv(rows));
  return rows;
}

// ---------------------------------------------------------------------------

inline std::string schedule_csv(const diffusion::NoiseSchedule& s) {
  std::string out = "t,beta,alpha,alpha_bar\n";
  for (int t = 1; t <= s.T; ++t) {
    const auto k = static_cast<std::size_t>(t);
    out += std::to_string(t) + "," + data::format_double(s.beta[k]) + "," + data::format_double(s.alpha[k]) + "," +
           data::format_double(s.alpha_bar[k]) + "\n";
  }
  return out;
}

}  // namespace dosediff::exp
