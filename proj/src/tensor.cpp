#include "xvit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cstring>
#include <new>
#include <sstream>

namespace xvit {

namespace {

constexpr std::align_val_t kAlignment{64};

std::atomic<std::uint64_t> g_live{0};
std::atomic<std::uint64_t> g_peak{0};
std::atomic<std::uint64_t> g_count{0};
std::atomic<std::uint64_t> g_limit{0};
std::atomic<std::uint64_t> g_macs{0};

void bump_peak(std::uint64_t live) {
  std::uint64_t peak = g_peak.load(std::memory_order_relaxed);
  while (live > peak &&
         !g_peak.compare_exchange_weak(peak, live, std::memory_order_relaxed)) {
  }
}

}  // namespace

std::size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

std::string_view dtype_name(DType dt) {
  return dt == DType::f32 ? "f32" : "f64";
}

DType parse_dtype(std::string_view name) {
  if (name == "f32" || name == "float32") return DType::f32;
  if (name == "f64" || name == "float64") return DType::f64;
  throw ConfigError("unknown element type '" + std::string(name) + "'");
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

AllocStats alloc_stats() {
  AllocStats s;
  s.live_bytes = g_live.load();
  s.peak_bytes = g_peak.load();
  s.alloc_count = g_count.load();
  return s;
}

void reset_peak() { g_peak.store(g_live.load()); }

void set_alloc_limit(std::uint64_t limit_bytes) { g_limit.store(limit_bytes); }

std::uint64_t mac_count() { return g_macs.load(std::memory_order_relaxed); }
void reset_mac_count() { g_macs.store(0); }
void add_macs(std::uint64_t n) { g_macs.fetch_add(n, std::memory_order_relaxed); }

namespace detail {

Storage::Storage(std::size_t bytes) : bytes_(bytes) {
  std::uint64_t limit = g_limit.load();
  if (limit != 0 && g_live.load() + bytes > limit) throw std::bad_alloc();
  ptr_ = ::operator new(std::max<std::size_t>(bytes, 1), kAlignment);
  std::memset(ptr_, 0, bytes);
  std::uint64_t live = g_live.fetch_add(bytes) + bytes;
  g_count.fetch_add(1);
  bump_peak(live);
}

Storage::~Storage() {
  ::operator delete(ptr_, kAlignment);
  g_live.fetch_sub(bytes_);
}

}  // namespace detail

Tensor::Tensor(Shape shape, DType dtype)
    : shape_(std::move(shape)), dtype_(dtype) {
  if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
  for (auto e : shape_) {
    if (e == 0) {
      throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape_));
    }
  }
  numel_ = shape_numel(shape_);
  storage_ = std::make_shared<detail::Storage>(numel_ * dtype_size(dtype_));
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  return Tensor(std::move(shape), dtype);
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t(std::move(shape), dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.mutable_data<T>();
    std::fill(d.begin(), d.end(), static_cast<T>(value));
  });
  return t;
}

Tensor Tensor::from(Shape shape, std::span<const double> values, DType dtype) {
  Tensor t(std::move(shape), dtype);
  if (values.size() != t.numel()) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(t.shape()));
  }
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto d = t.mutable_data<T>();
    for (std::size_t i = 0; i < values.size(); ++i) {
      d[i] = static_cast<T>(values[i]);
    }
  });
  return t;
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values,
                    DType dtype) {
  return from(std::move(shape),
              std::span<const double>(values.begin(), values.size()), dtype);
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw AxisError("axis " + std::to_string(axis) + " out of range for " +
                    shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::at(std::size_t flat) const {
  return dispatch(dtype_, [&](auto tag) -> double {
    using T = decltype(tag);
    return static_cast<double>(data<T>()[flat]);
  });
}

double Tensor::at(std::size_t i, std::size_t j) const {
  if (rank() != 2) throw RankError("at(i, j) needs a rank-2 tensor");
  return at(i * shape_[1] + j);
}

void Tensor::set(std::size_t flat, double value) {
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    mutable_data<T>()[flat] = static_cast<T>(value);
  });
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(numel_);
  if (empty()) return out;
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    auto d = data<T>();
    std::copy(d.begin(), d.end(), out.begin());
  });
  return out;
}

Tensor Tensor::astype(DType dtype) const {
  if (dtype == dtype_) return *this;
  auto v = to_vector();
  return from(shape_, v, dtype);
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != numel_) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " +
                     shape_str(shape));
  }
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be >= 1");
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

bool Tensor::bit_equal(const Tensor& other) const {
  if (empty() || other.empty()) return empty() && other.empty();
  return shape_ == other.shape_ && dtype_ == other.dtype_ &&
         std::memcmp(storage_->data(), other.storage_->data(), nbytes()) == 0;
}

void Tensor::check_type(DType requested) const {
  if (storage_ == nullptr) throw ShapeError("access to an empty tensor");
  if (requested != dtype_) {
    throw ShapeError("element type mismatch: tensor is " +
                     std::string(dtype_name(dtype_)) + ", requested " +
                     std::string(dtype_name(requested)));
  }
}

void Tensor::detach() {
  if (storage_.use_count() > 1) {
    auto fresh = std::make_shared<detail::Storage>(storage_->bytes());
    std::memcpy(fresh->data(), storage_->data(), storage_->bytes());
    storage_ = std::move(fresh);
  }
}

double Rng::uniform(double lo, double hi) {
  // 53 random mantissa bits -> [0, 1).
  double u = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  return lo + (hi - lo) * u;
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Rejection sampling keeps the draw unbiased.
  std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t r;
  do {
    r = engine_();
  } while (r >= limit);
  return r % n;
}

Tensor uniform(Shape shape, double lo, double hi, Rng& rng, DType dtype) {
  Tensor t(std::move(shape), dtype);
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    for (auto& v : t.mutable_data<T>()) v = static_cast<T>(rng.uniform(lo, hi));
  });
  return t;
}

}  // namespace xvit
