#include "tarflow/run_config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

#include "tarflow/errors.hpp"

namespace tarflow {
namespace {

using nlohmann::json;

[[noreturn]] void field_error(const std::string& field, const std::string& what) {
  throw ParameterError("config field '" + field + "': " + what);
}

std::string type_name(const json& v) { return v.type_name(); }

void reject_unknown(const json& obj, const std::string& section,
                    const std::set<std::string>& allowed) {
  if (!obj.is_object()) field_error(section, "expected an object, got " + type_name(obj));
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.contains(key)) {
      std::string names;
      for (const auto& a : allowed) names += (names.empty() ? "" : ", ") + a;
      field_error(section.empty() ? key : section + "." + key,
                  "unknown key (allowed: " + names + ")");
    }
  }
}

class Section {
 public:
  Section(const json& obj, std::string prefix) : obj_(obj), prefix_(std::move(prefix)) {}

  std::string name(const std::string& key) const { return prefix_ + "." + key; }

  void count(const std::string& key, std::size_t& out) const {
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      field_error(name(key), "expected a non-negative integer, got " + v.dump());
    }
    out = v.get<std::size_t>();
  }
  void seed(const std::string& key, std::uint64_t& out) const {
    std::size_t v = out;
    count(key, v);
    out = v;
  }
  void number(const std::string& key, double& out) const {
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_number()) field_error(name(key), "expected a number, got " + v.dump());
    out = v.get<double>();
  }
  void flag(const std::string& key, bool& out) const {
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_boolean()) field_error(name(key), "expected true or false, got " + v.dump());
    out = v.get<bool>();
  }
  void text(const std::string& key, std::string& out) const {
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    if (!v.is_string()) field_error(name(key), "expected a string, got " + v.dump());
    out = v.get<std::string>();
  }
  void path(const std::string& key, std::filesystem::path& out) const {
    std::string s = out.string();
    text(key, s);
    out = s;
  }
  // Runs parse on the string value, rewrapping failures with the field name.
  template <typename F>
  void choice(const std::string& key, F&& parse) const {
    if (!obj_.contains(key)) return;
    std::string s;
    text(key, s);
    try {
      parse(s);
    } catch (const ParameterError& e) {
      field_error(name(key), e.what());
    }
  }

 private:
  const json& obj_;
  std::string prefix_;
};

void read_model(const json& j, ModelConfig& m) {
  reject_unknown(j, "model",
                 {"tag", "patch", "width", "blocks", "layers", "noise", "num_classes",
                  "label_dropout", "vp_mode", "image"});
  const Section s(j, "model");
  s.choice("tag", [&](const std::string& tag) { m.apply_tag(tag); });
  s.count("patch", m.patch);
  s.count("width", m.width);
  s.count("blocks", m.blocks);
  s.count("layers", m.layers);
  s.choice("noise", [&](const std::string& tag) { m.noise = NoiseSpec::parse(tag); });
  s.count("num_classes", m.num_classes);
  s.number("label_dropout", m.label_dropout);
  s.flag("vp_mode", m.vp_mode);
  if (j.contains("image")) {
    reject_unknown(j.at("image"), "model.image", {"channels", "height", "width"});
    const Section img(j.at("image"), "model.image");
    img.count("channels", m.image_channels);
    img.count("height", m.image_height);
    img.count("width", m.image_width);
  }
}

void read_train(const json& j, TrainSection& t) {
  reject_unknown(j, "train",
                 {"dataset", "dataset_size", "batch_size", "epochs", "seed", "flips", "lr",
                  "lr_floor", "weight_decay", "clip_norm", "precision"});
  const Section s(j, "train");
  s.text("dataset", t.dataset);
  s.count("dataset_size", t.dataset_size);
  s.count("batch_size", t.batch_size);
  s.count("epochs", t.epochs);
  s.seed("seed", t.seed);
  s.text("flips", t.flips);
  s.number("lr", t.lr);
  s.number("lr_floor", t.lr_floor);
  s.number("weight_decay", t.weight_decay);
  s.number("clip_norm", t.clip_norm);
  s.text("precision", t.precision);
}

void read_sample(const json& j, SampleSection& out) {
  reject_unknown(j, "sample",
                 {"count", "labels", "guidance", "denoise", "denoise_sigma", "trajectory",
                  "seed", "alpha_clamp"});
  const Section s(j, "sample");
  s.count("count", out.count);
  if (j.contains("labels")) {
    const json& v = j.at("labels");
    const json list = v.is_array() ? v : json::array({v});
    out.labels.clear();
    for (const json& item : list) {
      if (!item.is_number_integer() || item.get<std::int64_t>() < 0) {
        field_error("sample.labels", "expected non-negative integers, got " + v.dump());
      }
      out.labels.push_back(item.get<std::size_t>());
    }
  }
  if (j.contains("guidance")) {
    reject_unknown(j.at("guidance"), "sample.guidance",
                   {"mode", "weight", "temperature", "schedule", "normalizer"});
    const Section g(j.at("guidance"), "sample.guidance");
    GuidanceSpec& spec = out.guidance;
    g.choice("mode", [&](const std::string& v) { spec.mode = parse_guidance_mode(v); });
    g.number("weight", spec.weight);
    g.number("temperature", spec.temperature);
    g.choice("schedule", [&](const std::string& v) { spec.schedule = parse_guidance_schedule(v); });
    g.choice("normalizer",
             [&](const std::string& v) { spec.normalizer = parse_schedule_normalizer(v); });
  }
  s.flag("denoise", out.denoise);
  if (j.contains("denoise_sigma") && !j.at("denoise_sigma").is_null()) {
    double sigma = 0.0;
    s.number("denoise_sigma", sigma);
    out.denoise_sigma = sigma;
  }
  s.flag("trajectory", out.trajectory);
  s.seed("seed", out.seed);
  s.number("alpha_clamp", out.alpha_clamp);
}

void read_paths(const json& j, PathsSection& p) {
  reject_unknown(j, "paths", {"output_dir", "checkpoint", "resume"});
  const Section s(j, "paths");
  s.path("output_dir", p.output_dir);
  s.path("checkpoint", p.checkpoint);
  s.path("resume", p.resume);
}

}  // namespace

Precision parse_precision(const std::string& s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  throw ParameterError("precision '" + s + "' is not one of f64, f32");
}

RunConfig RunConfig::from_json(const json& j) {
  reject_unknown(j, "", {"model", "train", "sample", "paths"});
  RunConfig c;
  if (j.contains("model")) read_model(j.at("model"), c.model);
  if (j.contains("train")) read_train(j.at("train"), c.train);
  if (j.contains("sample")) read_sample(j.at("sample"), c.sample);
  if (j.contains("paths")) read_paths(j.at("paths"), c.paths);
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("config " + path.string() + ": " + e.what(), e.byte);
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json j;
  j["model"] = {
      {"tag", model.tag()},
      {"patch", model.patch},
      {"width", model.width},
      {"blocks", model.blocks},
      {"layers", model.layers},
      {"noise", model.noise.tag()},
      {"num_classes", model.num_classes},
      {"label_dropout", model.label_dropout},
      {"vp_mode", model.vp_mode},
      {"image",
       {{"channels", model.image_channels},
        {"height", model.image_height},
        {"width", model.image_width}}},
  };
  j["train"] = {
      {"dataset", train.dataset},         {"dataset_size", train.dataset_size},
      {"batch_size", train.batch_size},   {"epochs", train.epochs},
      {"seed", train.seed},               {"flips", train.flips},
      {"lr", train.lr},                   {"lr_floor", train.lr_floor},
      {"weight_decay", train.weight_decay}, {"clip_norm", train.clip_norm},
      {"precision", train.precision},
  };
  j["sample"] = {
      {"count", sample.count},
      {"labels", sample.labels},
      {"guidance",
       {{"mode", to_string(sample.guidance.mode)},
        {"weight", sample.guidance.weight},
        {"temperature", sample.guidance.temperature},
        {"schedule", to_string(sample.guidance.schedule)},
        {"normalizer", to_string(sample.guidance.normalizer)}}},
      {"denoise", sample.denoise},
      {"denoise_sigma", sample.denoise_sigma ? json(*sample.denoise_sigma) : json(nullptr)},
      {"trajectory", sample.trajectory},
      {"seed", sample.seed},
      {"alpha_clamp", sample.alpha_clamp},
  };
  j["paths"] = {
      {"output_dir", paths.output_dir.string()},
      {"checkpoint", paths.checkpoint.string()},
      {"resume", paths.resume.string()},
  };
  return j;
}

void RunConfig::validate() const {
  if (model.patch == 0) field_error("model.patch", "must be >= 1");
  if (model.width == 0 || model.width % kHeadDim != 0) {
    field_error("model.width", "must be a positive multiple of " + std::to_string(kHeadDim) +
                                   ", got " + std::to_string(model.width));
  }
  if (model.blocks == 0) field_error("model.blocks", "must be >= 1");
  if (model.layers == 0) field_error("model.layers", "must be >= 1");
  if (!(model.label_dropout >= 0.0 && model.label_dropout <= 1.0)) {
    field_error("model.label_dropout", "must lie in [0, 1]");
  }
  try {
    model.validate();
  } catch (const ParameterError& e) {
    field_error("model", e.what());
  }
  if (train.batch_size == 0) field_error("train.batch_size", "must be >= 1");
  if (train.dataset_size == 0) field_error("train.dataset_size", "must be >= 1");
  if (train.flips != "auto" && train.flips != "on" && train.flips != "off") {
    field_error("train.flips", "'" + train.flips + "' is not one of auto, on, off");
  }
  if (!(train.lr > 0.0)) field_error("train.lr", "must be > 0");
  if (!(train.lr_floor >= 0.0) || train.lr_floor > train.lr) {
    field_error("train.lr_floor", "must lie in [0, train.lr]");
  }
  if (!(train.weight_decay >= 0.0)) field_error("train.weight_decay", "must be >= 0");
  if (!(train.clip_norm > 0.0)) field_error("train.clip_norm", "must be > 0");
  try {
    parse_precision(train.precision);
  } catch (const ParameterError& e) {
    field_error("train.precision", e.what());
  }
  if (sample.count == 0) field_error("sample.count", "must be >= 1");
  try {
    sample.guidance.validate();
  } catch (const ParameterError& e) {
    field_error("sample.guidance", e.what());
  }
  if (sample.denoise_sigma && !(*sample.denoise_sigma >= 0.0)) {
    field_error("sample.denoise_sigma", "must be >= 0");
  }
  if (!(sample.alpha_clamp >= 0.0)) field_error("sample.alpha_clamp", "must be >= 0");
}

}  // namespace tarflow
