#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "ttt/errors.hpp"

namespace ttt {

// ---------------------------------------------------------------------------
// Allocation accounting. Every tensor buffer goes through TrackingAllocator so
// benchmarks can report peak transient bytes and tests can assert that no
// buffer of a given size was ever requested.
// ---------------------------------------------------------------------------

struct MemoryProbe {
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;
  std::size_t largest_allocation_bytes = 0;
};

namespace detail {
void note_allocation(std::size_t bytes) noexcept;
void note_deallocation(std::size_t bytes) noexcept;
}  // namespace detail

// Resets peak and largest-allocation counters to the current live size.
void memory_probe_reset() noexcept;
MemoryProbe memory_probe() noexcept;

template <typename T>
struct TrackingAllocator {
  using value_type = T;

  TrackingAllocator() noexcept = default;
  template <typename U>
  TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) {
    if (n > std::numeric_limits<std::size_t>::max() / sizeof(T)) throw std::bad_array_new_length();
    auto* p = static_cast<T*>(::operator new(n * sizeof(T)));
    detail::note_allocation(n * sizeof(T));
    return p;
  }
  void deallocate(T* p, std::size_t n) noexcept {
    detail::note_deallocation(n * sizeof(T));
    ::operator delete(p);
  }
  friend bool operator==(const TrackingAllocator&, const TrackingAllocator&) { return true; }
};

// Multiply-accumulate counter fed by matmul and the convolution kernels.
std::uint64_t mac_counter() noexcept;
void mac_counter_reset() noexcept;
namespace detail {
void add_macs(std::uint64_t n) noexcept;
}

// Non-finite detection after each primitive. Defaults to on in debug builds.
void set_finite_checks(bool enabled) noexcept;
bool finite_checks() noexcept;

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

using Shape = std::vector<std::size_t>;
using Buffer = std::vector<double, TrackingAllocator<double>>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major tensor. Arithmetic is carried out in double; the dtype tag
// only decides how values are rounded and serialized.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::f64);
  Tensor(Shape shape, std::span<const double> values, DType dtype = DType::f64);
  Tensor(Shape shape, std::initializer_list<double> values, DType dtype = DType::f64);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor identity(std::size_t n);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const;
  bool empty() const { return data_.empty(); }
  DType dtype() const { return dtype_; }

  // 2-D helpers. Rank-1 tensors read as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return {data_.data(), data_.size()}; }
  std::span<const double> data() const { return {data_.data(), data_.size()}; }
  double* raw() { return data_.data(); }
  const double* raw() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const;

  // Same data, new extents. Element count must match.
  Tensor reshaped(Shape shape) const;
  // Rounds through float when converting to f32.
  Tensor cast(DType dtype) const;

  bool all_finite() const;

 private:
  Shape shape_;
  Buffer data_;
  DType dtype_ = DType::f64;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
double max_abs(const Tensor& a);

// Feature grid a token sequence is laid out on (raster order, row-major).
struct Grid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t tokens() const { return height * width; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

// ---------------------------------------------------------------------------
// Primitive operations. All are pure; 2-D operands are [rows x cols].
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// Depthwise kernels are [9 x C]; full kernels are [9 x C_in x C_out]. Tap k
// sits at offset (k / 3 - 1, k % 3 - 1). Zero padding, no bias.
enum class ConvKind { full, depthwise };

Tensor conv3x3(const Tensor& x, Grid grid, const Tensor& kernel, ConvKind kind);
// Adjoint of conv3x3 with respect to its input.
Tensor conv3x3_input_grad(const Tensor& dy, Grid grid, const Tensor& kernel, ConvKind kind);
// Adjoint of conv3x3 with respect to its kernel.
Tensor conv3x3_kernel_grad(const Tensor& x, const Tensor& dy, Grid grid, ConvKind kind);
// groups == 1 selects the full convolution, groups == channels the depthwise one.
Tensor conv3x3(const Tensor& x, Grid grid, const Tensor& kernel, std::size_t groups);

Tensor softmax_rows(const Tensor& m);

enum class Pointwise { silu, sigmoid, add, sub, mul, scale, sign, abs, sqrt };

// Unary kinds take one tensor; binary kinds take two tensors of equal shape or
// a tensor and a one-element tensor; scale multiplies by `factor`.
Tensor elementwise(Pointwise f, const Tensor& a, const Tensor* b = nullptr, double factor = 1.0);

Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sign(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor sqrt(const Tensor& a);

double silu(double x);
double sigmoid(double x);
// d/dx silu(x) and its derivative.
double silu_prime(double x);
double silu_second(double x);

double sum(const Tensor& a);

// Throws NonFiniteError when checks are enabled and `t` holds NaN/Inf.
void check_finite(const Tensor& t, const char* op);

}  // namespace ttt
