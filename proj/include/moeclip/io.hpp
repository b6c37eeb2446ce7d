#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moeclip/evaluate.hpp"
#include "moeclip/training.hpp"

namespace moeclip {

static_assert(std::endian::native == std::endian::little, "tensor files are written in native little-endian order");

inline constexpr char kMagic[4] = {'M', 'O', 'E', 'C'};
inline constexpr std::uint32_t kFormatVersion = 1;

enum class FileKind : std::uint32_t { Checkpoint = 1, Dataset = 2 };

/// Named dense tensor of 64-bit values.
struct Tensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  Vector values;
};

/**
 * Container layout (little-endian):
 *   "MOEC" | u32 version | u32 kind | u32 text_len | text bytes | u32 count |
 *   count x ( u32 name_len | name | u32 rank | u64 dims[rank] | f64 values[prod(dims)] )
 */
struct TensorFile {
  FileKind kind = FileKind::Checkpoint;
  std::string text;
  std::vector<Tensor> tensors;

  const Tensor& get(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw FormatError("tensor file: missing tensor '" + name + "'");
  }
};

namespace detail {
template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : b_(bytes) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw FormatError("tensor file: truncated");
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for '" + path + "'");
}
}  // namespace detail

inline std::string encode(const TensorFile& f) {
  std::string out(kMagic, 4);
  detail::put<std::uint32_t>(out, kFormatVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.kind));
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.text.size()));
  out += f.text;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.tensors.size()));
  for (const auto& t : f.tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) detail::put<std::uint64_t>(out, d);
    for (double v : t.values) detail::put<double>(out, v);
  }
  return out;
}

inline TensorFile decode(const std::string& bytes) {
  detail::Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw FormatError("tensor file: bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != kFormatVersion)
    throw FormatError("tensor file: unsupported version " + std::to_string(v));
  TensorFile f;
  const auto kind = r.get<std::uint32_t>();
  if (kind != 1 && kind != 2) throw FormatError("tensor file: unknown kind");
  f.kind = static_cast<FileKind>(kind);
  f.text = r.str(r.get<std::uint32_t>());
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    Tensor t;
    t.name = r.str(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    std::uint64_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      t.dims.push_back(r.get<std::uint64_t>());
      n *= t.dims.back();
    }
    if (n > bytes.size()) throw FormatError("tensor file: tensor '" + t.name + "' larger than file");
    t.values.resize(n);
    for (auto& v : t.values) v = r.get<double>();
    f.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("tensor file: trailing bytes");
  return f;
}

/// 64-bit FNV-1a over raw bytes; used as a checkpoint digest.
inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

// ---- checkpoints -----------------------------------------------------------

namespace detail {
inline double bits_to_double(std::uint64_t u) { return std::bit_cast<double>(u); }
inline std::uint64_t double_to_bits(double d) { return std::bit_cast<std::uint64_t>(d); }

inline void copy_into(const Tensor& t, std::span<double> dst) {
  if (t.values.size() != dst.size())
    throw FormatError("checkpoint: tensor '" + t.name + "' has " + std::to_string(t.values.size()) +
                      " values, expected " + std::to_string(dst.size()));
  std::copy(t.values.begin(), t.values.end(), dst.begin());
}
}  // namespace detail

inline TensorFile checkpoint_to_file(const Checkpoint& ck) {
  TensorFile f;
  f.kind = FileKind::Checkpoint;
  f.text = format_config(ck.model.config);
  Model& m = const_cast<Model&>(ck.model);  // visitors are non-const; nothing is modified
  auto add = [&](const std::string& name, std::span<double> s) {
    f.tensors.push_back({name, {s.size()}, Vector(s.begin(), s.end())});
  };
  for_each_trainable(m, add);
  for_each_frozen(m, add);
  std::size_t k = 0;
  for_each_trainable(m, [&](const std::string& name, std::span<double>) {
    if (k < ck.adam.m.size()) {
      f.tensors.push_back({"adam.m." + name, {ck.adam.m[k].size()}, ck.adam.m[k]});
      f.tensors.push_back({"adam.v." + name, {ck.adam.v[k].size()}, ck.adam.v[k]});
    }
    ++k;
  });
  Vector rng_words;
  for (auto w : ck.rng.state()) rng_words.push_back(detail::bits_to_double(w));
  f.tensors.push_back({"rng.state", {4}, rng_words});
  f.tensors.push_back({"step", {2},
                       {detail::bits_to_double(ck.step), detail::bits_to_double(ck.adam.step)}});
  return f;
}

inline Checkpoint checkpoint_from_file(const TensorFile& f) {
  if (f.kind != FileKind::Checkpoint) throw FormatError("not a checkpoint file");
  Checkpoint ck;
  ck.model = init_model(parse_config(f.text));
  for_each_trainable(ck.model, [&](const std::string& name, std::span<double> s) { detail::copy_into(f.get(name), s); });
  for_each_frozen(ck.model, [&](const std::string& name, std::span<double> s) { detail::copy_into(f.get(name), s); });
  bool has_adam = false;
  for (const auto& t : f.tensors) has_adam = has_adam || t.name.starts_with("adam.");
  if (has_adam)
    for_each_trainable(ck.model, [&](const std::string& name, std::span<double>) {
      ck.adam.m.push_back(f.get("adam.m." + name).values);
      ck.adam.v.push_back(f.get("adam.v." + name).values);
    });
  const Tensor& rs = f.get("rng.state");
  if (rs.values.size() != 4) throw FormatError("checkpoint: bad rng.state");
  SeededRng::State st;
  for (std::size_t i = 0; i < 4; ++i) st[i] = detail::double_to_bits(rs.values[i]);
  ck.rng.set_state(st);
  const Tensor& step = f.get("step");
  if (step.values.size() != 2) throw FormatError("checkpoint: bad step");
  ck.step = detail::double_to_bits(step.values[0]);
  ck.adam.step = detail::double_to_bits(step.values[1]);
  return ck;
}

inline std::string encode_checkpoint(const Checkpoint& ck) { return encode(checkpoint_to_file(ck)); }
inline Checkpoint decode_checkpoint(const std::string& bytes) { return checkpoint_from_file(decode(bytes)); }
inline void save_checkpoint(const std::string& path, const Checkpoint& ck) { detail::write_file(path, encode_checkpoint(ck)); }
inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

// ---- datasets --------------------------------------------------------------

inline std::string encode_dataset(const Dataset& ds) {
  TensorFile f;
  f.kind = FileKind::Dataset;
  f.text = "height = " + std::to_string(ds.height) + "\nwidth = " + std::to_string(ds.width) + "\n";
  const std::uint64_t n = ds.size(), hw = ds.height * ds.width;
  Tensor images{"images", {n, ds.height, ds.width}, {}}, masks{"masks", {n, ds.height, ds.width}, {}};
  Tensor labels{"labels", {n}, {}}, classes{"class_ids", {n}, {}};
  for (const auto& s : ds.samples) {
    detail::require_shape(s.image.size() == hw && s.mask.size() == hw, "encode_dataset: sample size mismatch");
    images.values.insert(images.values.end(), s.image.begin(), s.image.end());
    for (auto m : s.mask) masks.values.push_back(m);
    labels.values.push_back(s.label);
    classes.values.push_back(static_cast<double>(s.class_id));
  }
  f.tensors = {images, masks, labels, classes};
  return encode(f);
}

inline Dataset decode_dataset(const std::string& bytes) {
  const TensorFile f = decode(bytes);
  if (f.kind != FileKind::Dataset) throw FormatError("not a dataset file");
  const Tensor& images = f.get("images");
  const Tensor& masks = f.get("masks");
  const Tensor& labels = f.get("labels");
  const Tensor& classes = f.get("class_ids");
  if (images.dims.size() != 3 || masks.dims != images.dims) throw FormatError("dataset: bad image/mask dims");
  const std::size_t n = images.dims[0], h = images.dims[1], w = images.dims[2];
  if (labels.values.size() != n || classes.values.size() != n) throw FormatError("dataset: label count mismatch");
  Dataset ds{h, w, {}};
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticSample s;
    s.image.assign(images.values.begin() + i * h * w, images.values.begin() + (i + 1) * h * w);
    for (std::size_t p = 0; p < h * w; ++p) s.mask.push_back(masks.values[i * h * w + p] != 0.0 ? 1 : 0);
    s.label = labels.values[i] != 0.0 ? 1 : 0;
    s.class_id = static_cast<std::size_t>(classes.values[i]);
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void save_dataset(const std::string& path, const Dataset& ds) { detail::write_file(path, encode_dataset(ds)); }
inline Dataset load_dataset(const std::string& path) { return decode_dataset(detail::read_file(path)); }

// ---- PGM and CSV -----------------------------------------------------------

/// Binary 8-bit greyscale: "P5\n<W> <H>\n255\n" followed by W*H bytes, value round(255 p).
inline std::string encode_pgm(std::span<const double> probs, std::size_t width, std::size_t height) {
  detail::require_shape(probs.size() == width * height, "encode_pgm: size mismatch");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  for (double p : probs) out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * std::clamp(p, 0.0, 1.0)))));
  return out;
}

struct GreyImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

inline GreyImage decode_pgm(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string magic;
  GreyImage img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255 || !in) throw FormatError("pgm: unsupported header");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() != offset + img.width * img.height) throw FormatError("pgm: payload size mismatch");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset), bytes.end());
  return img;
}

inline std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string report_csv(const std::vector<EvalRow>& rows) {
  std::string out = "class,image_auroc,image_ap,pixel_auroc,pixel_ap\n";
  for (const auto& r : rows)
    out += r.name + "," + fmt6(r.image_auroc) + "," + fmt6(r.image_ap) + "," + fmt6(r.pixel_auroc) + "," +
           fmt6(r.pixel_ap) + "\n";
  return out;
}

inline std::string matrix_csv(const Matrix& m, const std::string& prefix = "expert") {
  std::string out;
  for (std::size_t j = 0; j < m.cols(); ++j) out += (j ? "," : "") + prefix + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) out += (j ? "," : "") + fmt6(m(i, j));
    out += "\n";
  }
  return out;
}

inline std::string utilization_csv(const std::vector<UtilizationReport>& per_level) {
  std::string out = "level,class";
  const std::size_t K = per_level.front().overall.size();
  for (std::size_t n = 0; n < K; ++n) out += ",expert" + std::to_string(n);
  out += "\n";
  auto row = [&](std::size_t l, const std::string& cls, const Vector& v) {
    out += std::to_string(l) + "," + cls;
    for (double x : v) out += "," + fmt6(x);
    out += "\n";
  };
  for (std::size_t l = 0; l < per_level.size(); ++l) {
    row(l, "all", per_level[l].overall);
    for (const auto& [c, v] : per_level[l].per_class) row(l, std::to_string(c), v);
  }
  return out;
}

inline std::string trace_csv(const std::vector<StepRecord>& trace) {
  std::string out = "step,epoch,lr,total,seg,ac,etf,bal\n";
  for (const auto& r : trace)
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt6(r.lr) + "," + fmt6(r.total) + "," +
           fmt6(r.parts.seg) + "," + fmt6(r.parts.ac) + "," + fmt6(r.parts.etf) + "," + fmt6(r.parts.bal) + "\n";
  return out;
}

}  // namespace moeclip
