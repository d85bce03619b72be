#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "ttt/harness.hpp"

namespace ttt::harness {

using nlohmann::json;

namespace {

template <typename T>
void get(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inner::LearningRate parse_lr(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "dynamic") return inner::LearningRate::dynamic(1.0);
    if (s.rfind("dynamic:", 0) == 0) return inner::LearningRate::dynamic(std::stod(s.substr(8)));
    return inner::LearningRate::fixed(std::stod(s));
  }
  return inner::LearningRate::fixed(j.get<double>());
}

json lr_json(const inner::LearningRate& lr) {
  if (lr.mode == inner::LearningRate::Mode::dynamic) {
    return lr.eta == 1.0 ? json("dynamic") : json("dynamic:" + fmt(lr.eta));
  }
  return lr.eta;
}

// "vit3" (or an empty list) selects the default assignment, a single name
// repeats one inner model over all heads, a list names each head.
std::vector<inner::Spec> parse_heads(const json& j) {
  std::vector<inner::Spec> out;
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s != "vit3") out.push_back(inner::parse_spec(s));
    return out;
  }
  for (const auto& e : j) out.push_back(inner::parse_spec(e.get<std::string>()));
  return out;
}

json heads_json(const std::vector<inner::Spec>& heads) {
  if (heads.empty()) return "vit3";
  json a = json::array();
  for (const auto& s : heads) a.push_back(inner::to_string(s));
  return a;
}

std::vector<inner::Spec> expand_heads(std::vector<inner::Spec> heads, std::size_t count) {
  if (heads.size() == 1 && count > 1) heads.assign(count, heads.front());
  return heads;
}

}  // namespace

std::string lr_label(const inner::LearningRate& lr) {
  if (lr.mode == inner::LearningRate::Mode::dynamic) return lr.eta == 1.0 ? "dynamic" : "dynamic:" + fmt(lr.eta, 3);
  return fmt(lr.eta, 3);
}

std::string heads_label(const ModelConfig& cfg) {
  if (cfg.head_models.empty()) return "vit3";
  std::string s;
  for (const auto& h : cfg.head_models) s += (s.empty() ? "" : "+") + inner::to_string(h);
  return s;
}

RunConfig default_config() {
  RunConfig c;
  c.model.input = InputKind::tokens;
  c.model.channels = 32;
  c.model.heads = 2;
  c.model.depth = 1;
  c.model.mlp_ratio = 2;
  c.model.readout = Readout::last_token;
  c.model.inner = {inner::Loss::mse, 1, inner::Partition::full_batch(), inner::LearningRate::fixed(1.0)};
  c.trainer.epochs = 8;
  c.trainer.batch = 32;
  c.trainer.warmup_epochs = 1;
  c.trainer.opt.lr = 3e-3;
  c.trainer.chunk = 4;
  return c;
}

RunConfig parse_config(const json& j, RunConfig c) {
  get(j, "command", c.command);
  get(j, "seed", c.seed);
  get(j, "threads", c.threads);
  get(j, "out", c.out);
  if (j.contains("task")) {
    const auto& t = j["task"];
    get(t, "kind", c.task.kind);
    get(t, "train", c.task.train);
    get(t, "val", c.task.val);
    get(t, "tokens", c.task.tokens);
    get(t, "dim", c.task.dim);
    get(t, "data_dir", c.task.data_dir);
    get(t, "augment", c.task.augment);
    if (c.task.kind != "recall" && c.task.kind != "cifar10") throw ConfigError("unknown task kind " + c.task.kind);
    if (c.task.kind == "cifar10" && !(j.contains("model") && j["model"].contains("input"))) {
      // images default to the micro ViT^3 recipe
      const auto inner = c.model.inner;
      c.model = vit3_micro();
      c.model.inner = inner;
    }
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    if (m.contains("input")) c.model.input = m["input"] == "image" ? InputKind::image : InputKind::tokens;
    get(m, "image_size", c.model.image_size);
    get(m, "patch", c.model.patch);
    get(m, "channels", c.model.channels);
    get(m, "heads", c.model.heads);
    get(m, "depth", c.model.depth);
    get(m, "mlp_ratio", c.model.mlp_ratio);
    get(m, "qk_l2_norm", c.model.qk_l2_norm);
    get(m, "zero_init_residual", c.model.zero_init_residual);
    if (m.contains("readout")) c.model.readout = m["readout"] == "mean_pool" ? Readout::mean_pool : Readout::last_token;
    if (m.contains("head_models")) c.model.head_models = expand_heads(parse_heads(m["head_models"]), c.model.heads);
  }
  if (j.contains("inner")) {
    const auto& i = j["inner"];
    if (i.contains("loss")) c.model.inner.loss = inner::parse_loss(i["loss"].get<std::string>());
    get(i, "epochs", c.model.inner.epochs);
    get(i, "parts", c.model.inner.partition.parts);
    if (i.contains("lr")) c.model.inner.lr = parse_lr(i["lr"]);
  }
  if (j.contains("trainer")) {
    const auto& t = j["trainer"];
    get(t, "epochs", c.trainer.epochs);
    get(t, "batch", c.trainer.batch);
    get(t, "warmup_epochs", c.trainer.warmup_epochs);
    get(t, "lr", c.trainer.opt.lr);
    get(t, "weight_decay", c.trainer.opt.weight_decay);
    get(t, "chunk", c.trainer.chunk);
  }
  if (j.contains("ablate")) {
    const auto& a = j["ablate"];
    if (a.contains("losses")) {
      c.ablate.losses.clear();
      for (const auto& l : a["losses"]) c.ablate.losses.push_back(inner::parse_loss(l.get<std::string>()));
    }
    if (a.contains("lrs")) {
      c.ablate.lrs.clear();
      for (const auto& l : a["lrs"]) c.ablate.lrs.push_back(parse_lr(l));
    }
    get(a, "epochs", c.ablate.epochs);
    get(a, "parts", c.ablate.parts);
    get(a, "seeds", c.ablate.seeds);
    if (a.contains("models")) {
      c.ablate.models.clear();
      for (const auto& m : a["models"]) c.ablate.models.push_back(expand_heads(parse_heads(m), c.model.heads));
    }
  }
  if (j.contains("bench")) {
    const auto& b = j["bench"];
    get(b, "tokens", c.bench.tokens);
    get(b, "channels", c.bench.channels);
    get(b, "heads", c.bench.heads);
    get(b, "warmup", c.bench.warmup);
    get(b, "reps", c.bench.reps);
    if (b.contains("model")) c.bench.model = inner::parse_spec(b["model"].get<std::string>());
  }
  return c;
}

json to_json(const RunConfig& c) {
  json j;
  j["command"] = c.command;
  j["seed"] = c.seed;
  j["threads"] = c.threads;
  j["out"] = c.out;
  j["task"] = {{"kind", c.task.kind}, {"train", c.task.train},       {"val", c.task.val},
               {"tokens", c.task.tokens}, {"dim", c.task.dim}, {"data_dir", c.task.data_dir},
               {"augment", c.task.augment}};
  const auto& m = c.model;
  j["model"] = {{"input", m.input == InputKind::image ? "image" : "tokens"},
                {"image_size", m.image_size},
                {"patch", m.patch},
                {"channels", m.channels},
                {"heads", m.heads},
                {"depth", m.depth},
                {"mlp_ratio", m.mlp_ratio},
                {"qk_l2_norm", m.qk_l2_norm},
                {"zero_init_residual", m.zero_init_residual},
                {"readout", m.readout == Readout::mean_pool ? "mean_pool" : "last_token"},
                {"head_models", heads_json(m.head_models)}};
  j["inner"] = {{"loss", inner::to_string(m.inner.loss)},
                {"epochs", m.inner.epochs},
                {"parts", m.inner.partition.parts},
                {"lr", lr_json(m.inner.lr)}};
  j["trainer"] = {{"epochs", c.trainer.epochs}, {"batch", c.trainer.batch},
                  {"warmup_epochs", c.trainer.warmup_epochs}, {"lr", c.trainer.opt.lr},
                  {"weight_decay", c.trainer.opt.weight_decay}, {"chunk", c.trainer.chunk}};
  json losses = json::array(), lrs = json::array(), models = json::array();
  for (auto l : c.ablate.losses) losses.push_back(inner::to_string(l));
  for (const auto& l : c.ablate.lrs) lrs.push_back(lr_json(l));
  for (const auto& h : c.ablate.models) models.push_back(heads_json(h));
  j["ablate"] = {{"losses", losses}, {"lrs", lrs},       {"epochs", c.ablate.epochs},
                 {"parts", c.ablate.parts}, {"models", models}, {"seeds", c.ablate.seeds}};
  j["bench"] = {{"tokens", c.bench.tokens}, {"channels", c.bench.channels}, {"heads", c.bench.heads},
                {"model", inner::to_string(c.bench.model)}, {"warmup", c.bench.warmup}, {"reps", c.bench.reps}};
  return j;
}

// ---------------------------------------------------------------------------

CsvWriter::CsvWriter(const std::string& path, std::vector<std::string> header) : path_(path), columns_(header.size()) {
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw ContractError("csv row has " + std::to_string(cells.size()) + " cells");
  std::ofstream out(path_, std::ios::app);
  for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
  out << '\n';
}

std::string fmt(double v, int digits) {
  std::ostringstream s;
  s.precision(digits);
  s << v;
  return s.str();
}

json machine_fingerprint() {
  json f;
  f["hardware_threads"] = std::thread::hardware_concurrency();
  std::ifstream cpu("/proc/cpuinfo");
  for (std::string line; std::getline(cpu, line);) {
    if (line.rfind("model name", 0) == 0) {
      f["cpu"] = line.substr(line.find(':') + 2);
      break;
    }
  }
#if defined(__clang__)
  f["compiler"] = "clang " __clang_version__;
#elif defined(__GNUC__)
  f["compiler"] = "gcc " __VERSION__;
#endif
#ifdef NDEBUG
  f["build"] = "release";
#else
  f["build"] = "debug";
#endif
  return f;
}

void write_manifest(const std::string& dir, const RunConfig& cfg, const json& extra) {
  std::filesystem::create_directories(dir);
  json m;
  m["config"] = to_json(cfg);
  m["machine"] = machine_fingerprint();
  m["finished_unix"] = std::chrono::duration_cast<std::chrono::seconds>(
                           std::chrono::system_clock::now().time_since_epoch())
                           .count();
  m.update(extra);
  std::ofstream(dir + "/manifest.json") << m.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

TaskData load_task(const TaskConfig& task, std::uint64_t seed, ModelConfig& model) {
  TaskData d;
  if (task.kind == "recall") {
    auto tr = data::synth_recall_task(seed * 2 + 1, task.train, task.tokens, task.dim);
    auto va = data::synth_recall_task(seed * 2 + 2, task.val, task.tokens, task.dim);
    model.input = InputKind::tokens;
    model.token_dim = task.dim;
    model.token_grid = tr.grid();
    model.classes = tr.classes();
    d.classes = tr.classes();
    d.train = {std::move(tr.inputs), std::move(tr.labels)};
    d.val = {std::move(va.inputs), std::move(va.labels)};
    return d;
  }
  if (task.data_dir.empty()) throw ConfigError("cifar10 task needs task.data_dir");
  std::vector<std::string> files;
  for (int i = 1; i <= 5; ++i) files.push_back(task.data_dir + "/data_batch_" + std::to_string(i) + ".bin");
  const auto train = data::load_cifar10(files, "train").slice(0, task.train);
  const auto val = data::load_cifar10(task.data_dir + "/test_batch.bin", "test").slice(0, task.val);
  model.input = InputKind::image;
  model.classes = data::kCifarClasses;
  d.classes = data::kCifarClasses;
  for (std::size_t i = 0; i < train.size(); ++i) {
    d.train.inputs.push_back(train.image(i));
    d.train.labels.push_back(train.labels[i]);
  }
  const bool aug = task.augment;
  d.transform = [aug](const Tensor& x, std::uint64_t s) {
    return data::normalize_cifar(aug ? data::augment(x, {}, s) : x);
  };
  for (std::size_t i = 0; i < val.size(); ++i) {
    d.val.inputs.push_back(data::normalize_cifar(val.image(i)));
    d.val.labels.push_back(val.labels[i]);
  }
  return d;
}

}  // namespace ttt::harness
