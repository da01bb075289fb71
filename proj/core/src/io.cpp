#include "cosynorm/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace cosynorm {

namespace {

constexpr std::size_t kMagicLen = sizeof(kCheckpointMagic) - 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::vector<unsigned char>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError(what_ + ": truncated");
  }
  const std::vector<unsigned char>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::vector<unsigned char>& bytes, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<unsigned char> encode_checkpoint(const std::vector<CheckpointRecord>& records) {
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + kMagicLen);
  put_u32(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    std::size_t count = 1;
    for (const auto d : r.dims) count *= d;
    if (count != r.values.size()) throw IoError("checkpoint record " + r.name + ": shape/value mismatch");
    put_u32(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    put_u32(out, static_cast<std::uint32_t>(r.dims.size()));
    for (const auto d : r.dims) put_u32(out, d);
    for (const float v : r.values) put_f32(out, v);
  }
  return out;
}

std::vector<CheckpointRecord> decode_checkpoint(const std::vector<unsigned char>& bytes) {
  Reader in(bytes, "checkpoint");
  if (in.str(kMagicLen) != std::string(kCheckpointMagic, kMagicLen)) {
    throw IoError("checkpoint: bad magic");
  }
  const std::uint32_t n = in.u32();
  std::vector<CheckpointRecord> records(n);
  for (auto& r : records) {
    r.name = in.str(in.u32());
    r.dims.resize(in.u32());
    std::size_t count = 1;
    for (auto& d : r.dims) count *= (d = in.u32());
    r.values.resize(count);
    for (auto& v : r.values) v = in.f32();
  }
  if (!in.done()) throw IoError("checkpoint: trailing bytes");
  return records;
}

void save_checkpoint(const ParameterStore<float>& store, const std::filesystem::path& path) {
  std::vector<CheckpointRecord> records;
  records.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    CheckpointRecord r;
    r.name = p.name;
    r.dims.assign(p.value.shape.begin(), p.value.shape.end());
    r.values = p.value.data;
    records.push_back(std::move(r));
  }
  write_bytes(encode_checkpoint(records), path);
}

std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_bytes(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void load_checkpoint(ParameterStore<float>& store, const std::filesystem::path& path) {
  const auto records = read_checkpoint(path);
  if (records.size() != store.size()) {
    throw IoError(path.string() + ": holds " + std::to_string(records.size()) +
                  " parameters, model expects " + std::to_string(store.size()));
  }
  for (const auto& r : records) {
    auto* p = store.find(r.name);
    if (p == nullptr) throw IoError(path.string() + ": unknown parameter " + r.name);
    if (!std::equal(r.dims.begin(), r.dims.end(), p->value.shape.begin(), p->value.shape.end())) {
      throw IoError(path.string() + ": shape mismatch for " + r.name);
    }
    p->value.data = r.values;
  }
}

void write_features(const FeatureSeq& features, const std::filesystem::path& path) {
  std::vector<unsigned char> out;
  out.reserve(8 + 4 * features.size());
  put_u32(out, static_cast<std::uint32_t>(features.rows()));
  put_u32(out, static_cast<std::uint32_t>(features.cols()));
  for (const float v : features.data) put_f32(out, v);
  write_bytes(out, path);
}

FeatureSeq read_features(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  Reader in(bytes, path.string());
  const std::uint32_t frames = in.u32();
  const std::uint32_t dim = in.u32();
  FeatureSeq f(frames, dim);
  for (auto& v : f.data) v = in.f32();
  if (!in.done()) throw IoError(path.string() + ": trailing bytes");
  return f;
}

void write_labels(const LabelSeq& labels, const std::filesystem::path& path) {
  std::string line;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i > 0) line += ' ';
    line += std::to_string(labels[i]);
  }
  line += '\n';
  write_bytes(std::vector<unsigned char>(line.begin(), line.end()), path);
}

LabelSeq read_labels(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  LabelSeq labels;
  int v = 0;
  while (in >> v) labels.push_back(v);
  if (!in.eof()) throw IoError(path.string() + ": malformed label line");
  return labels;
}

}  // namespace cosynorm
