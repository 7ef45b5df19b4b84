#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "p3d/common.hpp"
#include "p3d/rng.hpp"

namespace p3d {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor owning its storage. Scalar type is a template
// parameter: float for training, double when verifying gradients against
// finite differences. Activations use the fixed layout [N,C,T,H,W]; smaller
// ranks appear for kernels, frames, and flattened heads.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), T(0));
  }

  Tensor(Shape shape, T fill) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    validate_shape();
    if (static_cast<std::int64_t>(data_.size()) != shape_numel(shape_))
      throw ShapeError("tensor: " + std::to_string(data_.size()) +
                       " values do not fill shape " + shape_str(shape_));
  }

  static Tensor uniform(Shape shape, Rng& rng, T lo, T hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  std::int64_t dim(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Checked multi-index accessor. Convenient in tests; hot loops index raw
  // pointers directly instead.
  T& at(std::initializer_list<std::int64_t> idx) {
    return data_[static_cast<std::size_t>(offset(idx))];
  }
  const T& at(std::initializer_list<std::int64_t> idx) const {
    return data_[static_cast<std::size_t>(offset(idx))];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Bitwise equality, used by determinism and round-trip tests.
  bool bit_equal(const Tensor& o) const {
    return shape_ == o.shape_ &&
           std::memcmp(data_.data(), o.data_.data(), data_.size() * sizeof(T)) == 0;
  }

  Tensor reshaped(Shape new_shape) const {
    if (shape_numel(new_shape) != numel())
      throw ShapeError("reshape: " + shape_str(shape_) + " has " +
                       std::to_string(numel()) + " elements, target " +
                       shape_str(new_shape) + " has " +
                       std::to_string(shape_numel(new_shape)));
    Tensor out;
    out.shape_ = std::move(new_shape);
    out.data_ = data_;
    return out;
  }

 private:
  std::int64_t offset(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
      throw ShapeError("index rank " + std::to_string(idx.size()) +
                       " does not match tensor rank " + std::to_string(rank()));
    std::int64_t off = 0;
    int axis = 0;
    for (auto i : idx) {
      auto d = shape_[static_cast<std::size_t>(axis)];
      if (i < 0 || i >= d)
        throw ShapeError("index " + std::to_string(i) + " out of range on " +
                         axis_name(rank(), axis) + " (extent " + std::to_string(d) + ")");
      off = off * d + i;
      ++axis;
    }
    return off;
  }

  void validate_shape() const {
    for (std::size_t i = 0; i < shape_.size(); ++i)
      if (shape_[i] <= 0)
        throw ShapeError("tensor shape " + shape_str(shape_) +
                         " has non-positive extent on " +
                         axis_name(static_cast<int>(shape_.size()), static_cast<int>(i)));
  }

  Shape shape_;
  std::vector<T> data_;
};

// Broadcasting: ranks must match, each axis must agree or be 1 on one side.
// This is deliberately narrower than numpy (no implicit rank promotion); the
// only broadcast consumer in the network is the [N,C,1,1,1] attention mask.
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  if (a.size() != b.size())
    throw ShapeError("broadcast: rank " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + " (" + shape_str(a) + " vs " +
                     shape_str(b) + "); ranks must match");
  Shape out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i] || b[i] == 1)
      out[i] = a[i];
    else if (a[i] == 1)
      out[i] = b[i];
    else
      throw ShapeError("broadcast: extents " + std::to_string(a[i]) + " and " +
                       std::to_string(b[i]) + " clash on " +
                       axis_name(static_cast<int>(a.size()), static_cast<int>(i)) +
                       " (" + shape_str(a) + " vs " + shape_str(b) + ")");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tensor file format: magic "P3DT", u32 version, u32 rank, u64 extents[rank],
// u32 scalar tag (0 = f32, 1 = f64), then raw little-endian row-major data.
// Shared by checkpoints and the residual-extraction output.
// ---------------------------------------------------------------------------

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts need swaps");

template <class U>
void write_pod(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U read_pod(std::istream& is, const std::string& what) {
  U v;
  is.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!is) throw IoError("tensor file: truncated while reading " + what);
  return v;
}

template <class T>
constexpr std::uint32_t scalar_tag() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensor files hold f32 or f64");
  return std::is_same_v<T, float> ? 0u : 1u;
}

constexpr std::uint32_t kTensorVersion = 1;

}  // namespace detail

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write("P3DT", 4);
  detail::write_pod<std::uint32_t>(os, detail::kTensorVersion);
  detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  detail::write_pod<std::uint32_t>(os, detail::scalar_tag<T>());
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!os) throw IoError("tensor file: write failed");
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "P3DT", 4) != 0)
    throw IoError("tensor file: bad magic (expected P3DT)");
  auto version = detail::read_pod<std::uint32_t>(is, "version");
  if (version != detail::kTensorVersion)
    throw IoError("tensor file: unsupported version " + std::to_string(version));
  auto rank = detail::read_pod<std::uint32_t>(is, "rank");
  if (rank > 8) throw IoError("tensor file: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape)
    d = static_cast<std::int64_t>(detail::read_pod<std::uint64_t>(is, "extent"));
  auto tag = detail::read_pod<std::uint32_t>(is, "scalar tag");
  if (tag != detail::scalar_tag<T>())
    throw IoError("tensor file: scalar tag " + std::to_string(tag) +
                  " does not match requested type (0 = f32, 1 = f64)");
  Tensor<T> t(shape);
  is.read(reinterpret_cast<char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!is) throw IoError("tensor file: truncated data section");
  return t;
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

template <class T>
Tensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return read_tensor<T>(is);
}

}  // namespace p3d
