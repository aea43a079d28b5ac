#include "hetreg/io.hpp"

#include "hetreg/errors.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

namespace hetreg {

namespace {

class Writer
{
public:
  std::vector<std::uint8_t> bytes;

  template <class T> void put(T v)
  {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    auto u  = std::bit_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) { bytes.push_back(static_cast<std::uint8_t>(u >> (8 * i))); }
  }
  void put_bytes(const void *p, std::size_t n)
  {
    auto b = static_cast<const std::uint8_t *>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
};

class Reader
{
public:
  Reader(std::span<const std::uint8_t> b, const char *what)
    : bytes_(b)
    , what_(what)
  {
  }

  std::size_t offset() const { return pos_; }

  [[noreturn]] void fail(const std::string &msg, std::size_t at) const
  {
    throw IoError(std::string(what_) + ": " + msg + " at byte offset " + std::to_string(at));
  }

  void need(std::size_t n, const char *field) const
  {
    if (bytes_.size() - pos_ < n) { fail(std::string("truncated ") + field, pos_); }
  }

  template <class T> T get(const char *field)
  {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(T), field);
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) { u |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i)); }
    pos_ += sizeof(T);
    return std::bit_cast<T>(u);
  }

  std::span<const std::uint8_t> take(std::size_t n, const char *field)
  {
    need(n, field);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

private:
  std::span<const std::uint8_t> bytes_;
  const char                   *what_;
  std::size_t                   pos_ = 0;
};

std::size_t dtype_size(DType t) { return t == DType::U16 ? 2 : t == DType::F32 ? 4 : 8; }

void put_header(Writer &w, const char *magic, DType dtype, std::uint32_t c, std::uint32_t d, std::uint32_t h,
                std::uint32_t wd, const std::array<float, 3> &spacing)
{
  w.put_bytes(magic, 4);
  w.put(VolumeFile::version);
  w.put(static_cast<std::uint8_t>(dtype));
  for (auto v : {c, d, h, wd}) { w.put(v); }
  for (float s : spacing) { w.put(s); }
}

struct Header
{
  DType                dtype;
  std::uint32_t        c, d, h, w;
  std::array<float, 3> spacing;
};

Header get_header(Reader &r, const char *magic)
{
  auto m = r.take(4, "magic");
  if (std::memcmp(m.data(), magic, 4) != 0) { r.fail(std::string("bad magic, expected ") + magic, 0); }
  auto version = r.get<std::uint16_t>("version");
  if (version != VolumeFile::version) { r.fail("unsupported version " + std::to_string(version), 4); }
  auto code = r.get<std::uint8_t>("dtype");
  if (code > 2) { r.fail("unknown dtype code " + std::to_string(code), 6); }
  Header hd{static_cast<DType>(code), 0, 0, 0, 0, {}};
  hd.c = r.get<std::uint32_t>("channels");
  hd.d = r.get<std::uint32_t>("depth");
  hd.h = r.get<std::uint32_t>("height");
  hd.w = r.get<std::uint32_t>("width");
  for (auto &s : hd.spacing) { s = r.get<float>("spacing"); }
  return hd;
}

Spacing to_spacing(const std::array<float, 3> &s) { return {s[0], s[1], s[2]}; }
std::array<float, 3> to_f32(const Spacing &s)
{
  return {static_cast<float>(s[0]), static_cast<float>(s[1]), static_cast<float>(s[2])};
}

std::uint32_t extent(Index n, const char *what)
{
  if (n < 0 || n > static_cast<Index>(UINT32_MAX)) { throw ArgumentError(std::string(what) + ": extent out of range"); }
  return static_cast<std::uint32_t>(n);
}

VolumeFile floats(const Tensor &t, const Spacing &spacing)
{
  VolumeFile f;
  f.dtype    = DType::F32;
  f.channels = extent(t.dim(0), "volume");
  f.depth    = extent(t.dim(1), "volume");
  f.height   = extent(t.dim(2), "volume");
  f.width    = extent(t.dim(3), "volume");
  f.spacing  = to_f32(spacing);
  Writer w;
  for (double v : t.data()) { w.put(static_cast<float>(v)); }
  f.payload = std::move(w.bytes);
  return f;
}

Tensor tensor_from(const VolumeFile &f)
{
  if (f.dtype != DType::F32) { throw IoError("volume: expected f32 payload at byte offset 6"); }
  Reader              r(f.payload, "volume");
  std::vector<double> v(f.payload.size() / 4);
  for (auto &x : v) { x = r.get<float>("payload"); }
  return Tensor({f.channels, f.depth, f.height, f.width}, std::move(v));
}

} // namespace

std::vector<std::uint8_t> VolumeFile::encode() const
{
  Writer w;
  put_header(w, "HRGV", dtype, channels, depth, height, width, spacing);
  w.put_bytes(payload.data(), payload.size());
  return std::move(w.bytes);
}

VolumeFile VolumeFile::decode(std::span<const std::uint8_t> bytes)
{
  Reader r(bytes, "volume file");
  auto   hd = get_header(r, "HRGV");
  if (hd.dtype == DType::F64) { r.fail("dtype f64 is reserved for checkpoints", 6); }
  VolumeFile f;
  f.dtype          = hd.dtype;
  f.channels       = hd.c;
  f.depth          = hd.d;
  f.height         = hd.h;
  f.width          = hd.w;
  f.spacing        = hd.spacing;
  std::size_t want = static_cast<std::size_t>(hd.c) * hd.d * hd.h * hd.w * dtype_size(hd.dtype);
  if (r.remaining() != want) {
    r.fail("payload holds " + std::to_string(r.remaining()) + " bytes, header implies " + std::to_string(want),
           header_size);
  }
  auto p    = r.take(want, "payload");
  f.payload = {p.begin(), p.end()};
  return f;
}

std::vector<std::uint8_t> read_bytes(const std::string &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in) { throw IoError("cannot open " + path); }
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::string &path, std::span<const std::uint8_t> bytes)
{
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) { throw IoError("cannot create " + path); }
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) { throw IoError("write failed for " + path); }
}

VolumeFile to_file(const Volume &v) { return floats(v.data, v.spacing); }

VolumeFile to_file(const SegVolume &s)
{
  VolumeFile f;
  f.dtype   = DType::U16;
  f.depth   = extent(s.depth, "labels");
  f.height  = extent(s.height, "labels");
  f.width   = extent(s.width, "labels");
  f.spacing = to_f32(s.spacing);
  Writer w;
  for (auto l : s.labels) { w.put(l); }
  f.payload = std::move(w.bytes);
  return f;
}

VolumeFile to_file(const DeformationField &phi, const Spacing &spacing) { return floats(phi.disp, spacing); }

Volume volume_from(const VolumeFile &f) { return {tensor_from(f), to_spacing(f.spacing)}; }

SegVolume labels_from(const VolumeFile &f)
{
  if (f.dtype != DType::U16 || f.channels != 1) {
    throw IoError("labels: expected one u16 channel, header at byte offset 6 disagrees");
  }
  SegVolume s(f.depth, f.height, f.width);
  s.spacing = to_spacing(f.spacing);
  Reader r(f.payload, "labels");
  for (auto &l : s.labels) { l = r.get<std::uint16_t>("payload"); }
  return s;
}

DeformationField field_from(const VolumeFile &f)
{
  if (f.channels != 3) { throw IoError("field: expected 3 channels, header at byte offset 7 says " + std::to_string(f.channels)); }
  return {tensor_from(f)};
}

void write_volume(const std::string &path, const Volume &v) { write_bytes(path, to_file(v).encode()); }
void write_labels(const std::string &path, const SegVolume &s) { write_bytes(path, to_file(s).encode()); }
void write_field(const std::string &path, const DeformationField &phi, const Spacing &spacing)
{
  write_bytes(path, to_file(phi, spacing).encode());
}

namespace {

template <class F> auto with_path(const std::string &path, F &&f)
{
  try {
    return f(VolumeFile::decode(read_bytes(path)));
  } catch (const IoError &e) {
    throw IoError(path + ": " + e.what());
  }
}

} // namespace

Volume           read_volume(const std::string &path) { return with_path(path, volume_from); }
SegVolume        read_labels(const std::string &path) { return with_path(path, labels_from); }
DeformationField read_field(const std::string &path) { return with_path(path, field_from); }

void write_pair(const std::string &dir, const SyntheticPair &pair)
{
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) { throw IoError("cannot create directory " + dir + ": " + ec.message()); }
  auto at = [&](const char *name) { return (std::filesystem::path(dir) / name).string(); };
  write_volume(at("fixed.hrgv"), pair.fixed);
  write_labels(at("fixed_seg.hrgv"), pair.fixed_seg);
  write_volume(at("moving.hrgv"), pair.moving);
  write_labels(at("moving_seg.hrgv"), pair.moving_seg);
  write_field(at("gt_field.hrgv"), pair.ground_truth, pair.fixed.spacing);
}

SyntheticPair read_pair(const std::string &dir)
{
  auto          at = [&](const char *name) { return (std::filesystem::path(dir) / name).string(); };
  SyntheticPair p;
  p.fixed      = read_volume(at("fixed.hrgv"));
  p.fixed_seg  = read_labels(at("fixed_seg.hrgv"));
  p.moving     = read_volume(at("moving.hrgv"));
  p.moving_seg = read_labels(at("moving_seg.hrgv"));
  if (p.fixed.data.shape() != p.moving.data.shape()) {
    throw IoError(dir + ": fixed " + shape_string(p.fixed.data.shape()) + " and moving " +
                  shape_string(p.moving.data.shape()) + " differ");
  }
  if (std::filesystem::exists(at("gt_field.hrgv"))) {
    p.ground_truth = read_field(at("gt_field.hrgv"));
  } else {
    p.ground_truth = DeformationField::zeros(p.fixed.depth(), p.fixed.height(), p.fixed.width());
  }
  return p;
}

std::vector<std::uint8_t> Checkpoint::encode() const
{
  Writer w;
  put_header(w, "HRGC", DType::F64, static_cast<std::uint32_t>(tensors.size()), 0, 0, 0, {0.0f, 0.0f, 0.0f});
  w.put(static_cast<std::uint32_t>(config_text.size()));
  w.put_bytes(config_text.data(), config_text.size());
  for (auto &[name, t] : tensors) {
    w.put(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put(static_cast<std::uint32_t>(t.ndim()));
    for (Index d : t.shape()) { w.put(extent(d, "checkpoint")); }
    for (double v : t.data()) { w.put(v); }
  }
  return std::move(w.bytes);
}

Checkpoint Checkpoint::decode(std::span<const std::uint8_t> bytes)
{
  Reader r(bytes, "checkpoint");
  auto   hd = get_header(r, "HRGC");
  if (hd.dtype != DType::F64) { r.fail("checkpoint payload must be f64", 6); }
  Checkpoint ck;
  auto       clen = r.get<std::uint32_t>("config length");
  auto       text = r.take(clen, "config text");
  ck.config_text.assign(text.begin(), text.end());
  for (std::uint32_t i = 0; i < hd.c; ++i) {
    auto  nlen = r.get<std::uint32_t>("name length");
    auto  nb   = r.take(nlen, "name");
    auto  rank = r.get<std::uint32_t>("rank");
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) { shape.push_back(r.get<std::uint32_t>("extent")); }
    std::size_t at = r.offset();
    auto        n  = static_cast<std::size_t>(shape_size(shape));
    if (r.remaining() / 8 < n) { r.fail("truncated tensor payload", at); }
    std::vector<double> v(n);
    for (auto &x : v) { x = r.get<double>("payload"); }
    ck.tensors.emplace_back(std::string(nb.begin(), nb.end()), Tensor(std::move(shape), std::move(v)));
  }
  if (r.remaining() != 0) { r.fail("trailing bytes after last tensor", r.offset()); }
  return ck;
}

void save_checkpoint(const std::string &path, const RunConfig &cfg, const Model &model)
{
  Checkpoint ck{cfg.to_text(), {}};
  for (auto &[name, t] : model.parameters()) { ck.tensors.emplace_back(name, t); }
  write_bytes(path, ck.encode());
}

Checkpoint load_checkpoint(const std::string &path)
{
  try {
    return Checkpoint::decode(read_bytes(path));
  } catch (const IoError &e) {
    throw IoError(path + ": " + e.what());
  }
}

void restore(Model &model, const Checkpoint &ckpt)
{
  std::map<std::string, const Tensor *> stored;
  for (auto &[name, t] : ckpt.tensors) { stored[name] = &t; }
  auto params = model.parameters();
  if (params.size() != stored.size()) {
    throw IoError("checkpoint holds " + std::to_string(stored.size()) + " tensors, model expects " +
                  std::to_string(params.size()));
  }
  for (auto &[name, t] : params) {
    auto it = stored.find(name);
    if (it == stored.end()) { throw IoError("checkpoint lacks tensor " + name); }
    if (it->second->shape() != t.shape()) {
      throw IoError("checkpoint tensor " + name + " has shape " + shape_string(it->second->shape()) + ", model expects " +
                    shape_string(t.shape()));
    }
    auto src = it->second->data();
    auto dst = t.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

} // namespace hetreg
