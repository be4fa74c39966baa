#include "sevdet/nn/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "sevdet/error.hpp"

namespace sevdet::nn {

namespace {

constexpr char kMagic[8] = {'S', 'E', 'V', 'D', 'E', 'T', 'C', 'K'};

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    buf_.append(s);
  }
  void raw(const char* p, std::size_t n) { buf_.append(p, n); }
  const std::string& bytes() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  void need(std::size_t n) {
    if (pos_ + n > data_.size()) throw IoError("truncated checkpoint: " + path_);
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    }
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_++])) << (8 * i);
    }
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string raw(std::size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

void write_array(Writer& w, const std::string& tag, const Tensor& t) {
  w.str(tag);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.values()) w.f32(static_cast<float>(v));
}

Tensor read_array(Reader& r) {
  const std::uint32_t rank = r.u32();
  if (rank == 0 || rank > 8) throw IoError("checkpoint array has invalid rank");
  Shape shape(rank);
  for (auto& d : shape) d = r.u32();
  std::vector<double> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<double>(r.f32());
  return Tensor(std::move(shape), std::move(values));
}

std::vector<std::pair<std::string, const Tensor*>> arrays_of(const LayerParams& p) {
  std::vector<std::pair<std::string, const Tensor*>> out{{"weights", &p.weights},
                                                         {"bias", &p.bias}};
  if (p.kind == LayerKind::BatchNorm) {
    out.emplace_back("running_mean", &p.running_mean);
    out.emplace_back("running_var", &p.running_var);
  }
  return out;
}

}  // namespace

const LayerParams& Checkpoint::layer(const std::string& name) const {
  for (const auto& [n, p] : layers) {
    if (n == name) return p;
  }
  throw IoError("checkpoint has no layer named '" + name + "'");
}

const std::string& Checkpoint::meta_at(const std::string& key) const {
  auto it = meta.find(key);
  if (it == meta.end()) throw IoError("checkpoint has no metadata key '" + key + "'");
  return it->second;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ckpt.meta.size()));
  for (const auto& [k, v] : ckpt.meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(ckpt.layers.size()));
  for (const auto& [name, p] : ckpt.layers) {
    p.validate();
    w.str(name);
    w.u8(static_cast<std::uint8_t>(p.kind));
    w.u32(static_cast<std::uint32_t>(p.hyper.in_channels));
    w.u32(static_cast<std::uint32_t>(p.hyper.out_channels));
    w.u32(static_cast<std::uint32_t>(p.hyper.kernel));
    w.u32(static_cast<std::uint32_t>(p.hyper.stride));
    w.u8(static_cast<std::uint8_t>(p.hyper.padding));
    w.f64(p.hyper.momentum);
    w.f64(p.hyper.eps);
    const auto arrays = arrays_of(p);
    w.u32(static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [tag, t] : arrays) write_array(w, tag, *t);
  }

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
  }
  std::ofstream manifest(path.string() + ".manifest", std::ios::trunc);
  if (!manifest) throw IoError("cannot write manifest for: " + path.string());
  manifest << checkpoint_manifest(ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  Reader r(ss.str(), path.string());
  if (r.raw(sizeof kMagic) != std::string(kMagic, sizeof kMagic)) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + ": " +
                  path.string());
  }
  Checkpoint ckpt;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    ckpt.meta[k] = r.str();
  }
  const std::uint32_t n_layers = r.u32();
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    std::string name = r.str();
    LayerParams p;
    const std::uint8_t kind = r.u8();
    if (kind > static_cast<std::uint8_t>(LayerKind::BatchNorm)) {
      throw IoError("checkpoint layer '" + name + "' has unknown kind: " + path.string());
    }
    p.kind = static_cast<LayerKind>(kind);
    p.hyper.in_channels = r.u32();
    p.hyper.out_channels = r.u32();
    p.hyper.kernel = r.u32();
    p.hyper.stride = r.u32();
    p.hyper.padding = static_cast<Padding>(r.u8());
    p.hyper.momentum = r.f64();
    p.hyper.eps = r.f64();
    const std::uint32_t n_arrays = r.u32();
    for (std::uint32_t a = 0; a < n_arrays; ++a) {
      const std::string tag = r.str();
      Tensor t = read_array(r);
      if (tag == "weights") p.weights = std::move(t);
      else if (tag == "bias") p.bias = std::move(t);
      else if (tag == "running_mean") p.running_mean = std::move(t);
      else if (tag == "running_var") p.running_var = std::move(t);
      else throw IoError("checkpoint layer '" + name + "' has unknown array '" + tag + "'");
    }
    try {
      p.validate();
    } catch (const Error& e) {
      throw IoError("checkpoint layer '" + name + "' invalid (" + e.what() + "): " + path.string());
    }
    ckpt.layers.emplace_back(std::move(name), std::move(p));
  }
  if (!r.done()) throw IoError("trailing bytes in checkpoint: " + path.string());
  return ckpt;
}

std::string checkpoint_manifest(const Checkpoint& ckpt) {
  std::ostringstream os;
  os << "sevdet-checkpoint v" << kCheckpointVersion << '\n';
  for (const auto& [k, v] : ckpt.meta) os << "meta\t" << k << '\t' << v << '\n';
  std::size_t i = 0;
  for (const auto& [name, p] : ckpt.layers) {
    os << "layer\t" << i++ << '\t' << name << '\t' << to_string(p.kind);
    for (const auto& [tag, t] : arrays_of(p)) os << '\t' << tag << '=' << shape_str(t->shape());
    os << '\n';
  }
  return os.str();
}

void snap_to_f32(LayerParams& p) {
  auto snap = [](Tensor& t) {
    for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
  };
  snap(p.weights);
  snap(p.bias);
  if (p.kind == LayerKind::BatchNorm) {
    snap(p.running_mean);
    snap(p.running_var);
  }
}

void assign_params(LayerParams& dst, const LayerParams& src, const std::string& name) {
  if (dst.kind != src.kind) {
    throw ShapeError("layer '" + name + "': checkpoint kind " + std::string(to_string(src.kind)) +
                     " does not match model kind " + std::string(to_string(dst.kind)));
  }
  src.weights.expect_shape(dst.weights.shape(), ("layer '" + name + "' weights").c_str());
  src.bias.expect_shape(dst.bias.shape(), ("layer '" + name + "' bias").c_str());
  dst.weights = src.weights;
  dst.bias = src.bias;
  if (dst.kind == LayerKind::BatchNorm) {
    src.running_mean.expect_shape(dst.running_mean.shape(), "running_mean");
    dst.running_mean = src.running_mean;
    dst.running_var = src.running_var;
  }
  dst.hyper = src.hyper;
}

void BestSnapshot::offer(std::size_t epoch, double score, std::span<LayerParams* const> params) {
  if (!saved_.empty() && score < score_) return;
  score_ = score;
  epoch_ = epoch;
  saved_.clear();
  for (const LayerParams* p : params) saved_.push_back(*p);
}

void BestSnapshot::restore(std::span<LayerParams* const> params) const {
  if (saved_.empty()) return;
  if (saved_.size() != params.size()) throw InvalidArgument("BestSnapshot: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    assign_params(*params[i], saved_[i], "layer " + std::to_string(i));
  }
}

}  // namespace sevdet::nn
