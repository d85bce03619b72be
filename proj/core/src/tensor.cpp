#include "ttt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ttt {

namespace {

std::atomic<std::size_t> g_live_bytes{0};
std::atomic<std::size_t> g_peak_bytes{0};
std::atomic<std::size_t> g_largest_bytes{0};
std::atomic<std::uint64_t> g_macs{0};

#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif

void raise_max(std::atomic<std::size_t>& target, std::size_t value) {
  std::size_t cur = target.load(std::memory_order_relaxed);
  while (value > cur && !target.compare_exchange_weak(cur, value, std::memory_order_relaxed)) {
  }
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a rank-2 tensor, got " + shape_string(t.shape()));
  }
}

}  // namespace

namespace detail {

void note_allocation(std::size_t bytes) noexcept {
  const std::size_t live = g_live_bytes.fetch_add(bytes, std::memory_order_relaxed) + bytes;
  raise_max(g_peak_bytes, live);
  raise_max(g_largest_bytes, bytes);
}

void note_deallocation(std::size_t bytes) noexcept {
  g_live_bytes.fetch_sub(bytes, std::memory_order_relaxed);
}

void add_macs(std::uint64_t n) noexcept { g_macs.fetch_add(n, std::memory_order_relaxed); }

}  // namespace detail

void memory_probe_reset() noexcept {
  const std::size_t live = g_live_bytes.load(std::memory_order_relaxed);
  g_peak_bytes.store(live, std::memory_order_relaxed);
  g_largest_bytes.store(0, std::memory_order_relaxed);
}

MemoryProbe memory_probe() noexcept {
  return {g_live_bytes.load(std::memory_order_relaxed), g_peak_bytes.load(std::memory_order_relaxed),
          g_largest_bytes.load(std::memory_order_relaxed)};
}

std::uint64_t mac_counter() noexcept { return g_macs.load(std::memory_order_relaxed); }
void mac_counter_reset() noexcept { g_macs.store(0, std::memory_order_relaxed); }

void set_finite_checks(bool enabled) noexcept { g_finite_checks.store(enabled, std::memory_order_relaxed); }
bool finite_checks() noexcept { return g_finite_checks.load(std::memory_order_relaxed); }

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return shape.empty() ? 0 : n;
}

// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  for (auto e : shape_) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_string(shape_));
  }
  data_.assign(shape_size(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::span<const double> values, DType dtype) : Tensor(std::move(shape), dtype) {
  if (values.size() != data_.size()) {
    throw DimensionError("tensor " + shape_string(shape_) + " needs " + std::to_string(data_.size()) +
                         " values, got " + std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), data_.begin());
  if (dtype_ == DType::f32) {
    for (auto& v : data_) v = static_cast<float>(v);
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values, DType dtype)
    : Tensor(std::move(shape), std::span<const double>(values.begin(), values.size()), dtype) {}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw DimensionError("axis out of range for " + shape_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  return shape_.empty() ? 0 : shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.empty()) return 0;
  if (shape_.size() == 1) return shape_[0];
  return data_.size() / shape_[0];
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  Tensor t = *this;
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::cast(DType dtype) const {
  Tensor t = *this;
  t.dtype_ = dtype;
  if (dtype == DType::f32) {
    for (auto& v : t.data_) v = static_cast<float>(v);
  }
  return t;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

void check_finite(const Tensor& t, const char* op) {
  if (finite_checks() && !t.all_finite()) throw NonFiniteError(std::string(op) + " produced a non-finite value");
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  }
  Tensor c({m, n});
  const double* A = a.raw();
  const double* B = b.raw();
  double* C = c.raw();
  for (std::size_t i = 0; i < m; ++i) {
    double* __restrict crow = C + i * n;
    const double* arow = A + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* __restrict brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  detail::add_macs(static_cast<std::uint64_t>(m) * k * n);
  check_finite(c, "matmul");
  return c;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor t({c, r});
  constexpr std::size_t tile = 32;
  for (std::size_t i0 = 0; i0 < r; i0 += tile) {
    for (std::size_t j0 = 0; j0 < c; j0 += tile) {
      const std::size_t i1 = std::min(r, i0 + tile), j1 = std::min(c, j0 + tile);
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) t.raw()[j * r + i] = a.raw()[i * c + j];
    }
  }
  return t;
}

// ---------------------------------------------------------------------------
// 3x3 convolution over a raster-ordered token grid.

namespace {

struct ConvDims {
  std::size_t h, w, cin, cout;
};

ConvDims conv_dims(const Tensor& x, Grid grid, const Tensor& kernel, ConvKind kind, const char* op) {
  require_rank2(x, op);
  if (grid.height == 0 || grid.width == 0 || grid.tokens() != x.dim(0)) {
    throw GridError(std::string(op) + ": " + std::to_string(x.dim(0)) + " tokens do not fill a " +
                    std::to_string(grid.height) + "x" + std::to_string(grid.width) + " grid");
  }
  const std::size_t c = x.dim(1);
  if (kind == ConvKind::depthwise) {
    if (kernel.shape() != Shape{9, c}) {
      throw DimensionError(std::string(op) + ": depthwise kernel must be [9x" + std::to_string(c) + "], got " +
                           shape_string(kernel.shape()));
    }
    return {grid.height, grid.width, c, c};
  }
  if (kernel.rank() != 3 || kernel.dim(0) != 9 || kernel.dim(1) != c) {
    throw DimensionError(std::string(op) + ": full kernel must be [9x" + std::to_string(c) + "xC_out], got " +
                         shape_string(kernel.shape()));
  }
  return {grid.height, grid.width, c, kernel.dim(2)};
}

// Calls fn(tap, out_token, in_token) for every in-grid neighbor pair.
template <typename Fn>
void for_each_tap(std::size_t h, std::size_t w, Fn&& fn) {
  for (std::size_t k = 0; k < 9; ++k) {
    const long dy = static_cast<long>(k / 3) - 1, dx = static_cast<long>(k % 3) - 1;
    for (std::size_t y = 0; y < h; ++y) {
      const long sy = static_cast<long>(y) + dy;
      if (sy < 0 || sy >= static_cast<long>(h)) continue;
      for (std::size_t x = 0; x < w; ++x) {
        const long sx = static_cast<long>(x) + dx;
        if (sx < 0 || sx >= static_cast<long>(w)) continue;
        fn(k, y * w + x, static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx));
      }
    }
  }
}

}  // namespace

Tensor conv3x3(const Tensor& x, Grid grid, const Tensor& kernel, ConvKind kind) {
  const auto d = conv_dims(x, grid, kernel, kind, "conv3x3");
  Tensor y({d.h * d.w, d.cout});
  const double* X = x.raw();
  const double* K = kernel.raw();
  double* Y = y.raw();
  std::uint64_t taps = 0;
  if (kind == ConvKind::depthwise) {
    for_each_tap(d.h, d.w, [&](std::size_t k, std::size_t out, std::size_t in) {
      const double* __restrict kr = K + k * d.cin;
      const double* __restrict xr = X + in * d.cin;
      double* __restrict yr = Y + out * d.cin;
      for (std::size_t c = 0; c < d.cin; ++c) yr[c] += xr[c] * kr[c];
      ++taps;
    });
    detail::add_macs(taps * d.cin);
  } else {
    for_each_tap(d.h, d.w, [&](std::size_t k, std::size_t out, std::size_t in) {
      const double* xr = X + in * d.cin;
      double* __restrict yr = Y + out * d.cout;
      for (std::size_t ci = 0; ci < d.cin; ++ci) {
        const double xv = xr[ci];
        const double* __restrict kr = K + (k * d.cin + ci) * d.cout;
        for (std::size_t co = 0; co < d.cout; ++co) yr[co] += xv * kr[co];
      }
      ++taps;
    });
    detail::add_macs(taps * d.cin * d.cout);
  }
  check_finite(y, "conv3x3");
  return y;
}

Tensor conv3x3_input_grad(const Tensor& dy, Grid grid, const Tensor& kernel, ConvKind kind) {
  require_rank2(dy, "conv3x3_input_grad");
  std::size_t cin = 0, cout = dy.dim(1);
  if (kind == ConvKind::depthwise) {
    cin = cout;
    if (kernel.shape() != Shape{9, cin}) throw DimensionError("conv3x3_input_grad: kernel/channel mismatch");
  } else {
    if (kernel.rank() != 3 || kernel.dim(0) != 9 || kernel.dim(2) != cout)
      throw DimensionError("conv3x3_input_grad: kernel/channel mismatch");
    cin = kernel.dim(1);
  }
  if (grid.tokens() != dy.dim(0) || grid.height == 0) throw GridError("conv3x3_input_grad: grid does not match tokens");
  Tensor dx({grid.tokens(), cin});
  const double* D = dy.raw();
  const double* K = kernel.raw();
  double* X = dx.raw();
  std::uint64_t taps = 0;
  // y[out] += x[in] * k  =>  dx[in] += dy[out] * k
  if (kind == ConvKind::depthwise) {
    for_each_tap(grid.height, grid.width, [&](std::size_t k, std::size_t out, std::size_t in) {
      const double* __restrict kr = K + k * cin;
      const double* __restrict dr = D + out * cin;
      double* __restrict xr = X + in * cin;
      for (std::size_t c = 0; c < cin; ++c) xr[c] += dr[c] * kr[c];
      ++taps;
    });
    detail::add_macs(taps * cin);
  } else {
    for_each_tap(grid.height, grid.width, [&](std::size_t k, std::size_t out, std::size_t in) {
      const double* dr = D + out * cout;
      double* __restrict xr = X + in * cin;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const double* __restrict kr = K + (k * cin + ci) * cout;
        double acc = 0.0;
        for (std::size_t co = 0; co < cout; ++co) acc += dr[co] * kr[co];
        xr[ci] += acc;
      }
      ++taps;
    });
    detail::add_macs(taps * cin * cout);
  }
  check_finite(dx, "conv3x3_input_grad");
  return dx;
}

Tensor conv3x3_kernel_grad(const Tensor& x, const Tensor& dy, Grid grid, ConvKind kind) {
  require_rank2(x, "conv3x3_kernel_grad");
  require_rank2(dy, "conv3x3_kernel_grad");
  if (grid.tokens() != x.dim(0) || x.dim(0) != dy.dim(0) || grid.height == 0) {
    throw GridError("conv3x3_kernel_grad: grid does not match tokens");
  }
  const std::size_t cin = x.dim(1), cout = dy.dim(1);
  const double* X = x.raw();
  const double* D = dy.raw();
  std::uint64_t taps = 0;
  if (kind == ConvKind::depthwise) {
    if (cin != cout) throw DimensionError("conv3x3_kernel_grad: depthwise needs equal channels");
    Tensor g({9, cin});
    double* G = g.raw();
    for_each_tap(grid.height, grid.width, [&](std::size_t k, std::size_t out, std::size_t in) {
      const double* __restrict xr = X + in * cin;
      const double* __restrict dr = D + out * cin;
      double* __restrict gr = G + k * cin;
      for (std::size_t c = 0; c < cin; ++c) gr[c] += xr[c] * dr[c];
      ++taps;
    });
    detail::add_macs(taps * cin);
    check_finite(g, "conv3x3_kernel_grad");
    return g;
  }
  Tensor g({9, cin, cout});
  double* G = g.raw();
  for_each_tap(grid.height, grid.width, [&](std::size_t k, std::size_t out, std::size_t in) {
    const double* xr = X + in * cin;
    const double* __restrict dr = D + out * cout;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double xv = xr[ci];
      double* __restrict gr = G + (k * cin + ci) * cout;
      for (std::size_t co = 0; co < cout; ++co) gr[co] += xv * dr[co];
    }
    ++taps;
  });
  detail::add_macs(taps * cin * cout);
  check_finite(g, "conv3x3_kernel_grad");
  return g;
}

Tensor conv3x3(const Tensor& x, Grid grid, const Tensor& kernel, std::size_t groups) {
  require_rank2(x, "conv3x3");
  if (groups == 1 && kernel.rank() == 3) return conv3x3(x, grid, kernel, ConvKind::full);
  if (groups == x.dim(1)) return conv3x3(x, grid, kernel, ConvKind::depthwise);
  throw DimensionError("conv3x3: groups must be 1 or the channel count");
}

// ---------------------------------------------------------------------------

Tensor softmax_rows(const Tensor& m) {
  require_rank2(m, "softmax_rows");
  if (!m.all_finite()) throw NonFiniteError("softmax_rows: non-finite input");
  const std::size_t r = m.dim(0), c = m.dim(1);
  Tensor out({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    const double* in = m.raw() + i * c;
    double* o = out.raw() + i * c;
    const double mx = *std::max_element(in, in + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
  }
  return out;
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu_prime(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}
double silu_second(double x) {
  const double s = sigmoid(x);
  return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s));
}

Tensor elementwise(Pointwise f, const Tensor& a, const Tensor* b, double factor) {
  Tensor out = a;
  auto unary = [&](auto fn) {
    for (auto& v : out.data()) v = fn(v);
  };
  auto binary = [&](auto fn) {
    if (b == nullptr) throw ContractError("elementwise: binary op needs two operands");
    if (b->size() == a.size() && b->shape() == a.shape()) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(a[i], (*b)[i]);
    } else if (b->size() == 1) {
      const double s = (*b)[0];
      for (auto& v : out.data()) v = fn(v, s);
    } else if (a.size() == 1) {
      const double s = a[0];
      out = *b;
      for (auto& v : out.data()) v = fn(s, v);
    } else {
      throw DimensionError("elementwise: shapes " + shape_string(a.shape()) + " and " + shape_string(b->shape()) +
                           " are not broadcast-compatible");
    }
  };
  switch (f) {
    case Pointwise::silu: unary([](double x) { return silu(x); }); break;
    case Pointwise::sigmoid: unary([](double x) { return sigmoid(x); }); break;
    case Pointwise::sign: unary([](double x) { return static_cast<double>((x > 0) - (x < 0)); }); break;
    case Pointwise::abs: unary([](double x) { return std::abs(x); }); break;
    case Pointwise::sqrt: unary([](double x) { return std::sqrt(x); }); break;
    case Pointwise::scale: unary([factor](double x) { return x * factor; }); break;
    case Pointwise::add: binary([](double x, double y) { return x + y; }); break;
    case Pointwise::sub: binary([](double x, double y) { return x - y; }); break;
    case Pointwise::mul: binary([](double x, double y) { return x * y; }); break;
  }
  check_finite(out, "elementwise");
  return out;
}

Tensor silu(const Tensor& a) { return elementwise(Pointwise::silu, a); }
Tensor sigmoid(const Tensor& a) { return elementwise(Pointwise::sigmoid, a); }
Tensor add(const Tensor& a, const Tensor& b) { return elementwise(Pointwise::add, a, &b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(Pointwise::sub, a, &b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(Pointwise::mul, a, &b); }
Tensor scale(const Tensor& a, double factor) { return elementwise(Pointwise::scale, a, nullptr, factor); }
Tensor sign(const Tensor& a) { return elementwise(Pointwise::sign, a); }
Tensor abs(const Tensor& a) { return elementwise(Pointwise::abs, a); }
Tensor sqrt(const Tensor& a) { return elementwise(Pointwise::sqrt, a); }

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

}  // namespace ttt
