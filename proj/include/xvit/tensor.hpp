#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "xvit/errors.hpp"

namespace xvit {

enum class DType { f32, f64 };

std::size_t dtype_size(DType dt);
std::string_view dtype_name(DType dt);
DType parse_dtype(std::string_view name);

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::f32; }
template <>
constexpr DType dtype_of<double>() { return DType::f64; }

// Calls f with a value-initialized float or double matching dt.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::f32) return f(float{});
  return f(double{});
}

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Process-wide accounting of tensor buffer bytes. Bookkeeping overhead
// (shape vectors, control blocks) is not counted.
struct AllocStats {
  std::uint64_t live_bytes = 0;
  std::uint64_t peak_bytes = 0;
  std::uint64_t alloc_count = 0;
};

AllocStats alloc_stats();
// Sets peak_bytes := live_bytes.
void reset_peak();
// Buffers that would push live_bytes above limit throw std::bad_alloc.
// Zero disables the limit.
void set_alloc_limit(std::uint64_t limit_bytes);

// Multiply-accumulate counter bumped by the contraction kernels (matmul,
// conv2d, depthwise_conv3x3, l2 normalization sums of squares).
std::uint64_t mac_count();
void reset_mac_count();
void add_macs(std::uint64_t n);

namespace detail {

class Storage {
 public:
  explicit Storage(std::size_t bytes);
  ~Storage();
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;

  void* data() { return ptr_; }
  const void* data() const { return ptr_; }
  std::size_t bytes() const { return bytes_; }

 private:
  void* ptr_ = nullptr;
  std::size_t bytes_ = 0;
};

}  // namespace detail

// Dense row-major tensor with copy-on-write value semantics. Copies share
// the buffer until one side asks for mutable access.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f64);

  static Tensor zeros(Shape shape, DType dtype = DType::f64);
  static Tensor full(Shape shape, double value, DType dtype = DType::f64);
  static Tensor from(Shape shape, std::span<const double> values,
                     DType dtype = DType::f64);
  static Tensor from(Shape shape, std::initializer_list<double> values,
                     DType dtype = DType::f64);

  bool empty() const { return storage_ == nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return numel_; }
  std::size_t nbytes() const { return numel_ * dtype_size(dtype_); }
  DType dtype() const { return dtype_; }

  template <class T>
  std::span<const T> data() const {
    check_type(dtype_of<T>());
    return {static_cast<const T*>(storage_->data()), numel_};
  }

  // Detaches from any other Tensor sharing the buffer.
  template <class T>
  std::span<T> mutable_data() {
    check_type(dtype_of<T>());
    detach();
    return {static_cast<T*>(storage_->data()), numel_};
  }

  double at(std::size_t flat) const;
  double at(std::size_t i, std::size_t j) const;
  void set(std::size_t flat, double value);

  std::vector<double> to_vector() const;
  Tensor astype(DType dtype) const;
  // Same buffer viewed with a new shape of equal element count.
  Tensor reshape(Shape shape) const;

  bool shares_buffer_with(const Tensor& other) const {
    return storage_ != nullptr && storage_ == other.storage_;
  }
  // Same shape, dtype and bytes.
  bool bit_equal(const Tensor& other) const;

 private:
  void check_type(DType requested) const;
  void detach();

  Shape shape_;
  std::size_t numel_ = 0;
  DType dtype_ = DType::f64;
  std::shared_ptr<detail::Storage> storage_;
};

// Deterministic across platforms: doubles are built from raw 64-bit draws
// rather than through std::uniform_real_distribution.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo, double hi);
  std::uint64_t below(std::uint64_t n);
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
               DType dtype = DType::f64);

}  // namespace xvit
