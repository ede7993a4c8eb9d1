#include "armamba/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace armamba::config {

using nlohmann::json;
using blocks::ModelConfig;
using blocks::NormUnit;
using blocks::ScanArrangement;
using blocks::TargetKind;

namespace {

std::string scan_mode_name(ScanArrangement s) {
  return s == ScanArrangement::uni_1scan ? "uni_1scan" : "cross_4scan";
}

ScanArrangement scan_mode_from(const std::string& s) {
  if (s == "uni_1scan") return ScanArrangement::uni_1scan;
  if (s == "cross_4scan") return ScanArrangement::cross_4scan;
  fail(ErrorKind::config, "config: unknown scan_mode '" + s + "'");
}

std::string target_name(TargetKind t) {
  return t == TargetKind::normed_pixel ? "normed_pixel" : "raw_pixel";
}

TargetKind target_from(const std::string& s) {
  if (s == "normed_pixel") return TargetKind::normed_pixel;
  if (s == "raw_pixel") return TargetKind::raw_pixel;
  if (s == "dvae")
    fail(ErrorKind::config, "config: target 'dvae' is unsupported (needs an external tokenizer)");
  fail(ErrorKind::config, "config: unknown target_kind '" + s + "'");
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& scope) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      fail(ErrorKind::config, "config: unknown key '" + scope + it.key() + "'");
}

ModelConfig model_from(const json& j) {
  static const std::set<std::string> keys = {
      "width",      "depth",     "state_dim",   "expand",         "patch_size",
      "cluster_size", "image_h", "image_w",     "order",          "scan_mode",
      "dec_depth",  "dec_width", "target_kind", "norm_unit",      "discretization",
      "conv_k",     "num_classes"};
  check_keys(j, keys, "model.");
  ModelConfig m;
  m.width = j.value("width", m.width);
  m.depth = j.value("depth", m.depth);
  m.state_dim = j.value("state_dim", m.state_dim);
  m.expand = j.value("expand", m.expand);
  m.patch_size = j.value("patch_size", m.patch_size);
  m.cluster_size = j.value("cluster_size", m.cluster_size);
  m.image_h = j.value("image_h", m.image_h);
  m.image_w = j.value("image_w", m.image_w);
  if (j.contains("order")) m.order = layout::order_from_name(j["order"].get<std::string>());
  if (j.contains("scan_mode")) m.scan_mode = scan_mode_from(j["scan_mode"].get<std::string>());
  m.dec_depth = j.value("dec_depth", m.dec_depth);
  m.dec_width = j.value("dec_width", m.dec_width);
  if (j.contains("target_kind")) m.target_kind = target_from(j["target_kind"].get<std::string>());
  if (j.contains("norm_unit")) {
    const std::string u = j["norm_unit"].get<std::string>();
    if (u == "cluster") m.norm_unit = NormUnit::cluster;
    else if (u == "patch") m.norm_unit = NormUnit::patch;
    else fail(ErrorKind::config, "config: unknown norm_unit '" + u + "'");
  }
  if (j.contains("discretization")) {
    const std::string d = j["discretization"].get<std::string>();
    if (d == "zoh_exact") m.discretization = ssm::Discretization::zoh_exact;
    else if (d == "euler") m.discretization = ssm::Discretization::euler;
    else fail(ErrorKind::config, "config: unknown discretization '" + d + "'");
  }
  m.conv_k = j.value("conv_k", m.conv_k);
  m.num_classes = j.value("num_classes", m.num_classes);
  return m;
}

json model_to(const ModelConfig& m) {
  json j;
  j["width"] = m.width;
  j["depth"] = m.depth;
  j["state_dim"] = m.state_dim;
  j["expand"] = m.expand;
  j["patch_size"] = m.patch_size;
  j["cluster_size"] = m.cluster_size;
  j["image_h"] = m.image_h;
  j["image_w"] = m.image_w;
  j["order"] = layout::order_name(m.order);
  j["scan_mode"] = scan_mode_name(m.scan_mode);
  j["dec_depth"] = m.dec_depth;
  j["dec_width"] = m.dec_width;
  j["target_kind"] = target_name(m.target_kind);
  j["norm_unit"] = m.norm_unit == NormUnit::cluster ? "cluster" : "patch";
  j["discretization"] =
      m.discretization == ssm::Discretization::zoh_exact ? "zoh_exact" : "euler";
  j["conv_k"] = m.conv_k;
  j["num_classes"] = m.num_classes;
  return j;
}

TrainConfig train_from(const json& j) {
  static const std::set<std::string> keys = {
      "base_lr",   "lr_min",      "weight_decay", "beta1",     "beta2",
      "batch_size", "epochs",     "max_steps",    "warmup_epochs", "ema_decay",
      "clip_norm", "eval_batch_size", "dataset",  "manifest"};
  check_keys(j, keys, "train.");
  TrainConfig t;
  t.base_lr = j.value("base_lr", t.base_lr);
  t.lr_min = j.value("lr_min", t.lr_min);
  t.weight_decay = j.value("weight_decay", t.weight_decay);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.epochs = j.value("epochs", t.epochs);
  t.max_steps = j.value("max_steps", t.max_steps);
  t.warmup_epochs = j.value("warmup_epochs", t.warmup_epochs);
  t.ema_decay = j.value("ema_decay", t.ema_decay);
  t.clip_norm = j.value("clip_norm", t.clip_norm);
  t.eval_batch_size = j.value("eval_batch_size", t.eval_batch_size);
  t.dataset = j.value("dataset", t.dataset);
  t.manifest = j.value("manifest", t.manifest);
  return t;
}

}  // namespace

std::string model_to_json(const ModelConfig& m) { return model_to(m).dump(); }

ModelConfig model_from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::config, "config: invalid JSON");
  return model_from(j);
}

FullConfig parse_config(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::config, "config: invalid JSON");
  check_keys(j, {"model", "train"}, "");
  FullConfig cfg;
  if (j.contains("model")) cfg.model = model_from(j["model"]);
  if (j.contains("train")) cfg.train = train_from(j["train"]);
  return cfg;
}

FullConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::config, "config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

FullConfig apply_overrides(const FullConfig& cfg, const std::vector<std::string>& overrides) {
  json root;
  root["model"] = model_to(cfg.model);
  json t;
  t["base_lr"] = cfg.train.base_lr;
  t["lr_min"] = cfg.train.lr_min;
  t["weight_decay"] = cfg.train.weight_decay;
  t["beta1"] = cfg.train.beta1;
  t["beta2"] = cfg.train.beta2;
  t["batch_size"] = cfg.train.batch_size;
  t["epochs"] = cfg.train.epochs;
  t["max_steps"] = cfg.train.max_steps;
  t["warmup_epochs"] = cfg.train.warmup_epochs;
  t["ema_decay"] = cfg.train.ema_decay;
  t["clip_norm"] = cfg.train.clip_norm;
  t["eval_batch_size"] = cfg.train.eval_batch_size;
  t["dataset"] = cfg.train.dataset;
  t["manifest"] = cfg.train.manifest;
  root["train"] = t;
  for (const std::string& ov : overrides) {
    const size_t eq = ov.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::config, "override '" + ov + "' is not of the form key=value");
    const std::string key = ov.substr(0, eq), value = ov.substr(eq + 1);
    json* node = &root;
    size_t pos = 0;
    std::vector<std::string> parts;
    while (pos != std::string::npos) {
      size_t dot = key.find('.', pos);
      parts.push_back(key.substr(pos, dot == std::string::npos ? dot : dot - pos));
      pos = dot == std::string::npos ? dot : dot + 1;
    }
    for (size_t i = 0; i + 1 < parts.size(); ++i) {
      if (!node->contains(parts[i]))
        fail(ErrorKind::config, "override: unknown key '" + key + "'");
      node = &(*node)[parts[i]];
    }
    if (!node->contains(parts.back()))
      fail(ErrorKind::config, "override: unknown key '" + key + "'");
    json parsed = json::parse(value, nullptr, false);
    (*node)[parts.back()] = parsed.is_discarded() ? json(value) : parsed;
  }
  return parse_config(root.dump());
}

}  // namespace armamba::config
