#include "retfuse/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace retfuse::nn {

static_assert(std::endian::native == std::endian::little,
              "archive i/o assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'R', 'F', 'T', 'A'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void append(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

struct Reader {
  const std::uint8_t* p;
  std::size_t left;
  void take(void* dst, std::size_t n) {
    require(left >= n, ErrorKind::DecodeError, "archive truncated");
    std::memcpy(dst, p, n);
    p += n;
    left -= n;
  }
  template <typename T>
  T scalar() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
};

template <typename T>
TensorArchive::Entry make_entry(const Tensor<T>& t, TensorArchive::Dtype dt) {
  TensorArchive::Entry e;
  e.dtype = dt;
  e.dims = {static_cast<std::uint32_t>(t.n), static_cast<std::uint32_t>(t.c),
            static_cast<std::uint32_t>(t.h), static_cast<std::uint32_t>(t.w)};
  if (dt == TensorArchive::kF32) {
    e.bytes.resize(t.numel() * sizeof(float));
    auto* dst = reinterpret_cast<float*>(e.bytes.data());
    for (std::size_t i = 0; i < t.numel(); ++i) dst[i] = static_cast<float>(t.v[i]);
  } else {
    e.bytes.resize(t.numel() * sizeof(double));
    auto* dst = reinterpret_cast<double*>(e.bytes.data());
    for (std::size_t i = 0; i < t.numel(); ++i) dst[i] = static_cast<double>(t.v[i]);
  }
  return e;
}

}  // namespace

void TensorArchive::put(const std::string& name, const Tensor<float>& t) {
  entries_[name] = make_entry(t, kF32);
}
void TensorArchive::put(const std::string& name, const Tensor<double>& t) {
  entries_[name] = make_entry(t, kF64);
}
void TensorArchive::put_f32(const std::string& name, const Tensor<double>& t) {
  entries_[name] = make_entry(t, kF32);
}

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [k, v] : entries_) out.push_back(k);
  return out;
}

const TensorArchive::Entry& TensorArchive::entry(const std::string& name) const {
  auto it = entries_.find(name);
  require(it != entries_.end(), ErrorKind::DecodeError,
          "archive: missing tensor '" + name + "'");
  return it->second;
}

template <typename T>
Tensor<T> TensorArchive::get(const std::string& name) const {
  const Entry& e = entry(name);
  Tensor<T> t(static_cast<int>(e.dims[0]), static_cast<int>(e.dims[1]),
              static_cast<int>(e.dims[2]), static_cast<int>(e.dims[3]));
  if (e.dtype == kF32) {
    const auto* src = reinterpret_cast<const float*>(e.bytes.data());
    for (std::size_t i = 0; i < t.numel(); ++i) t.v[i] = static_cast<T>(src[i]);
  } else {
    const auto* src = reinterpret_cast<const double*>(e.bytes.data());
    for (std::size_t i = 0; i < t.numel(); ++i) t.v[i] = static_cast<T>(src[i]);
  }
  return t;
}

template <typename T>
Tensor<T> TensorArchive::get_checked(const std::string& name, int n, int c, int h,
                                     int w) const {
  Tensor<T> t = get<T>(name);
  require(t.n == n && t.c == c && t.h == h && t.w == w,
          ErrorKind::IncompatibleCheckpoint,
          "archive: tensor '" + name + "' has shape " + t.shape_str() +
              ", expected " + Tensor<T>(n, c, h, w).shape_str());
  return t;
}

template Tensor<float> TensorArchive::get<float>(const std::string&) const;
template Tensor<double> TensorArchive::get<double>(const std::string&) const;
template Tensor<float> TensorArchive::get_checked<float>(const std::string&, int,
                                                         int, int, int) const;
template Tensor<double> TensorArchive::get_checked<double>(const std::string&, int,
                                                           int, int, int) const;

void TensorArchive::write(const std::filesystem::path& path) const {
  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), kMagic, kMagic + 4);
  append(buf, kVersion);
  append(buf, static_cast<std::uint64_t>(entries_.size()));
  for (const auto& [name, e] : entries_) {
    append(buf, static_cast<std::uint32_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    append(buf, static_cast<std::uint8_t>(e.dtype));
    append(buf, static_cast<std::uint8_t>(4));
    for (std::uint32_t d : e.dims) append(buf, d);
    buf.insert(buf.end(), e.bytes.begin(), e.bytes.end());
  }
  atomic_write_bytes(path, buf.data(), buf.size());
}

TensorArchive TensorArchive::read(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorKind::NotFound,
          "archive not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::IoError, "cannot open " + path.string());
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
  Reader r{buf.data(), buf.size()};

  char magic[4];
  r.take(magic, 4);
  require(std::memcmp(magic, kMagic, 4) == 0, ErrorKind::DecodeError,
          "not a tensor archive: " + path.string());
  const auto version = r.scalar<std::uint32_t>();
  require(version == kVersion, ErrorKind::DecodeError,
          "unsupported archive version " + std::to_string(version));
  const auto count = r.scalar<std::uint64_t>();

  TensorArchive a;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto name_len = r.scalar<std::uint32_t>();
    require(name_len > 0 && name_len < 4096, ErrorKind::DecodeError,
            "archive: implausible name length");
    std::string name(name_len, '\0');
    r.take(name.data(), name_len);
    Entry e;
    const auto dt = r.scalar<std::uint8_t>();
    require(dt == kF32 || dt == kF64, ErrorKind::DecodeError,
            "archive: unknown dtype tag");
    e.dtype = static_cast<Dtype>(dt);
    const auto ndim = r.scalar<std::uint8_t>();
    require(ndim == 4, ErrorKind::DecodeError, "archive: ndim must be 4");
    std::uint64_t numel = 1;
    for (auto& d : e.dims) {
      d = r.scalar<std::uint32_t>();
      require(d >= 1 && d <= (1u << 24), ErrorKind::DecodeError,
              "archive: implausible dimension");
      numel *= d;
    }
    const std::size_t payload =
        numel * (e.dtype == kF32 ? sizeof(float) : sizeof(double));
    e.bytes.resize(payload);
    r.take(e.bytes.data(), payload);
    a.entries_[name] = std::move(e);
  }
  require(r.left == 0, ErrorKind::DecodeError, "archive: trailing bytes");
  return a;
}

void atomic_write_bytes(const std::filesystem::path& path, const void* data,
                        std::size_t size) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::IoError, "cannot write " + tmp.string());
    out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
    require(out.good(), ErrorKind::IoError, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  require(!ec, ErrorKind::IoError,
          "rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
  atomic_write_bytes(path, text.data(), text.size());
}

}  // namespace retfuse::nn
