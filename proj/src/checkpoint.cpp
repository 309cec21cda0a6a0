#include "tarflow/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <sstream>

#include "tarflow/data.hpp"
#include "tarflow/errors.hpp"

namespace tarflow {
namespace {

constexpr char kMagic[8] = {'T', 'A', 'R', 'F', 'L', 'O', 'W', '\0'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
  void tensor(const std::string& name, const Tensor& t) {
    u32(static_cast<std::uint32_t>(name.size()));
    bytes(name);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) u64(d);
    for (double v : t.data()) f64(v);
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) {
      throw ParseError(std::string("checkpoint: truncated ") + what, pos_);
    }
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return in_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{in_[pos_++]} << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{in_[pos_++]} << (8 * i);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  // Reads one tensor record, checking it against the expected name/shape.
  Tensor tensor(const std::string& expected_name, const Shape& expected_shape,
                Precision precision) {
    const std::size_t at = pos_;
    const std::string name = bytes(u32("tensor name length"), "tensor name");
    if (name != expected_name) {
      throw ParseError("checkpoint: expected tensor '" + expected_name + "', found '" +
                           name + "'",
                       at);
    }
    const std::size_t shape_at = pos_;
    Shape shape(u32("tensor rank"));
    for (auto& d : shape) d = u64("tensor dims");
    if (shape != expected_shape) {
      throw ParseError("checkpoint: tensor '" + name + "' has shape " + to_string(shape) +
                           ", expected " + to_string(expected_shape),
                       shape_at);
    }
    Tensor t(shape);
    need(8 * t.size(), "tensor values");
    for (double& v : t.mutable_data()) v = f64("tensor values");
    return t.to(precision);
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const TrainState& state) {
  Checkpoint ckpt;
  ckpt.model = state.model;
  ckpt.optimizer = state.optimizer;
  std::ostringstream rng;
  rng << state.rng;
  ckpt.rng_state = rng.str();
  ckpt.step = state.step;
  ckpt.best_loss = state.best_loss;
  return ckpt;
}

TrainState restore_train_state(const Checkpoint& checkpoint) {
  TrainState state;
  state.model = checkpoint.model;
  if (checkpoint.optimizer) {
    state.optimizer = *checkpoint.optimizer;
  } else {
    state.optimizer = OptimizerState::like(model_parameters(state.model));
  }
  if (!checkpoint.rng_state.empty()) {
    std::istringstream in(checkpoint.rng_state);
    in >> state.rng;
    if (!in) throw ParseError("checkpoint: unreadable rng state");
  }
  state.step = checkpoint.step;
  state.best_loss = checkpoint.best_loss;
  return state;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  const TarFlowModel& model = ckpt.model;
  const ModelConfig& c = model.config();
  Writer w;
  for (char ch : kMagic) w.u8(static_cast<std::uint8_t>(ch));
  w.u32(kCheckpointVersion);
  w.u32(model.precision() == Precision::f32 ? 1 : 0);
  w.u64(c.patch);
  w.u64(c.width);
  w.u64(c.blocks);
  w.u64(c.layers);
  w.u8(c.noise.kind == NoiseKind::uniform ? 0 : 1);
  w.f64(c.noise.magnitude);
  w.u64(c.num_classes);
  w.f64(c.label_dropout);
  w.u8(c.vp_mode ? 1 : 0);
  w.u64(c.image_channels);
  w.u64(c.image_height);
  w.u64(c.image_width);
  w.u64(ckpt.step);
  w.f64(ckpt.best_loss);
  w.u64(ckpt.rng_state.size());
  w.bytes(ckpt.rng_state);

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  model.for_each_parameter(
      [&](const std::string& name, const Tensor& t) { tensors.emplace_back(name, &t); });
  w.u64(tensors.size());
  for (const auto& [name, t] : tensors) w.tensor(name, *t);

  w.u8(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const OptimizerState& opt = *ckpt.optimizer;
    if (opt.first_moment.size() != tensors.size() ||
        opt.second_moment.size() != tensors.size()) {
      throw ShapeError("checkpoint: optimizer holds " +
                       std::to_string(opt.first_moment.size()) + " moments for " +
                       std::to_string(tensors.size()) + " parameters");
    }
    w.u64(opt.step);
    w.u64(2 * tensors.size());
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      w.tensor("m." + tensors[k].first, opt.first_moment[k]);
    }
    for (std::size_t k = 0; k < tensors.size(); ++k) {
      w.tensor("v." + tensors[k].first, opt.second_moment[k]);
    }
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.bytes(8, "magic") != std::string(kMagic, 8)) {
    throw ParseError("checkpoint: bad magic, not a checkpoint file", 0);
  }
  const std::size_t version_at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported format version " + std::to_string(version),
                     version_at);
  }
  const std::size_t precision_at = r.offset();
  const std::uint32_t precision_code = r.u32("precision");
  if (precision_code > 1) {
    throw ParseError("checkpoint: unknown precision code " + std::to_string(precision_code),
                     precision_at);
  }
  const Precision precision = precision_code == 1 ? Precision::f32 : Precision::f64;

  const std::size_t config_at = r.offset();
  ModelConfig c;
  c.patch = r.u64("config");
  c.width = r.u64("config");
  c.blocks = r.u64("config");
  c.layers = r.u64("config");
  c.noise.kind = r.u8("config") == 0 ? NoiseKind::uniform : NoiseKind::gaussian;
  c.noise.magnitude = r.f64("config");
  c.num_classes = r.u64("config");
  c.label_dropout = r.f64("config");
  c.vp_mode = r.u8("config") != 0;
  c.image_channels = r.u64("config");
  c.image_height = r.u64("config");
  c.image_width = r.u64("config");
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ParseError(std::string("checkpoint: invalid model config: ") + e.what(),
                     config_at);
  }

  Checkpoint ckpt;
  ckpt.step = r.u64("step");
  ckpt.best_loss = r.f64("best loss");
  ckpt.rng_state = r.bytes(r.u64("rng state length"), "rng state");

  ckpt.model = TarFlowModel::init(c, 0, precision);
  std::vector<std::pair<std::string, Tensor*>> slots;
  ckpt.model.for_each_parameter(
      [&](const std::string& name, Tensor& t) { slots.emplace_back(name, &t); });
  const std::size_t count_at = r.offset();
  const std::uint64_t count = r.u64("tensor count");
  if (count != slots.size()) {
    throw ParseError("checkpoint: " + std::to_string(count) + " tensors, model needs " +
                         std::to_string(slots.size()),
                     count_at);
  }
  for (auto& [name, t] : slots) *t = r.tensor(name, t->shape(), precision);

  const std::size_t flag_at = r.offset();
  const std::uint8_t has_optimizer = r.u8("optimizer flag");
  if (has_optimizer > 1) {
    throw ParseError("checkpoint: bad optimizer flag", flag_at);
  }
  if (has_optimizer) {
    OptimizerState opt;
    opt.step = r.u64("optimizer step");
    const std::size_t moments_at = r.offset();
    if (r.u64("moment count") != 2 * slots.size()) {
      throw ParseError("checkpoint: optimizer moment count mismatch", moments_at);
    }
    for (const auto& [name, t] : slots) {
      opt.first_moment.push_back(r.tensor("m." + name, t->shape(), Precision::f64));
    }
    for (const auto& [name, t] : slots) {
      opt.second_moment.push_back(r.tensor("v." + name, t->shape(), Precision::f64));
    }
    ckpt.optimizer = std::move(opt);
  }
  if (!r.done()) throw ParseError("checkpoint: trailing bytes", r.offset());
  return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(read_file(path));
}

}  // namespace tarflow
