#include "scalelab/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>

#ifdef SCALELAB_USE_CBLAS
#include <cblas.h>
extern "C" void openblas_set_num_threads(int);
#endif

namespace scalelab {

void set_blas_threads(int n) {
#ifdef SCALELAB_USE_CBLAS
  openblas_set_num_threads(n < 1 ? 1 : n);
#else
  (void)n;
#endif
}

int blas_threads_from_env() {
  const char* e = std::getenv("SCALELAB_BLAS_THREADS");
  if (!e || !*e) return 1;
  int n = std::atoi(e);
  return n < 1 ? 1 : n;
}

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::scale: return "scale";
    case OpKind::gelu: return "gelu";
    case OpKind::geglu_gate: return "geglu-gate";
    case OpKind::layer_norm: return "layer_norm";
    case OpKind::softmax_last_axis: return "softmax-last-axis";
    case OpKind::rope_rotate: return "rope_rotate";
    case OpKind::embed_gather: return "embed_gather";
    case OpKind::cross_entropy_mean: return "cross_entropy_mean";
  }
  return "?";
}

OpKind op_from_name(const std::string& name) {
  static const std::pair<const char*, OpKind> table[] = {
      {"matmul", OpKind::matmul},
      {"add", OpKind::add},
      {"scale", OpKind::scale},
      {"gelu", OpKind::gelu},
      {"geglu-gate", OpKind::geglu_gate},
      {"layer_norm", OpKind::layer_norm},
      {"softmax-last-axis", OpKind::softmax_last_axis},
      {"rope_rotate", OpKind::rope_rotate},
      {"embed_gather", OpKind::embed_gather},
      {"cross_entropy_mean", OpKind::cross_entropy_mean},
  };
  for (auto& [n, k] : table)
    if (name == n) return k;
  throw ConfigError("unknown primitive kind: " + name);
}

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

// ---- GEMM ------------------------------------------------------------------

#ifdef SCALELAB_USE_CBLAS
inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const float* a,
                 int64_t lda, const float* b, int64_t ldb, double beta, float* c, int64_t ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
              static_cast<float>(alpha), a, static_cast<int>(lda), b, static_cast<int>(ldb),
              static_cast<float>(beta), c, static_cast<int>(ldc));
}
inline void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const double* a,
                 int64_t lda, const double* b, int64_t ldb, double beta, double* c, int64_t ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}
#else
// Reference GEMM; accumulates in double regardless of T.
template <class T>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, double alpha, const T* a, int64_t lda,
          const T* b, int64_t ldb, double beta, T* c, int64_t ldc) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double acc = 0;
      for (int64_t p = 0; p < k; ++p) {
        double av = ta ? a[p * lda + i] : a[i * lda + p];
        double bv = tb ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      T& out = c[i * ldc + j];
      out = static_cast<T>(alpha * acc + (beta == 0.0 ? 0.0 : beta * out));
    }
  }
}
#endif

// ---- elementwise kernels ----------------------------------------------------

// transcendentals run in the tensor's own precision (erff/expf on the
// float32 training path, full double on the float64 verification path)
template <class T>
inline T gelu_fn(T x) {
  return static_cast<T>(0.5) * x *
         (static_cast<T>(1) + std::erf(x * static_cast<T>(kInvSqrt2)));
}

template <class T>
inline T gelu_grad_fn(T x) {
  T cdf = static_cast<T>(0.5) * (static_cast<T>(1) + std::erf(x * static_cast<T>(kInvSqrt2)));
  T pdf = static_cast<T>(kInvSqrt2Pi) * std::exp(static_cast<T>(-0.5) * x * x);
  return cdf + x * pdf;
}

template <class T>
void k_gelu(std::span<const T> x, std::span<T> y) {
  for (size_t i = 0; i < x.size(); ++i) y[i] = gelu_fn(x[i]);
}

template <class T>
void k_gelu_bwd(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
  for (size_t i = 0; i < x.size(); ++i) dx[i] += dy[i] * gelu_grad_fn(x[i]);
}

template <class T>
void k_geglu(std::span<const T> u, std::span<const T> v, std::span<T> y) {
  for (size_t i = 0; i < u.size(); ++i) y[i] = gelu_fn(u[i]) * v[i];
}

template <class T>
void k_geglu_bwd(std::span<const T> u, std::span<const T> v, std::span<const T> dy,
                 std::span<T> du, std::span<T> dv) {
  for (size_t i = 0; i < u.size(); ++i) {
    du[i] += dy[i] * v[i] * gelu_grad_fn(u[i]);
    dv[i] += dy[i] * gelu_fn(u[i]);
  }
}

template <class T>
void k_layer_norm(const T* x, const T* gain, T* y, int64_t rows, int64_t c, int64_t groups,
                  double eps) {
  int64_t gw = c / groups;
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * c;
    T* yr = y + r * c;
    for (int64_t g = 0; g < groups; ++g) {
      const T* xg = xr + g * gw;
      double mu = 0;
      for (int64_t i = 0; i < gw; ++i) mu += xg[i];
      mu /= static_cast<double>(gw);
      double var = 0;
      for (int64_t i = 0; i < gw; ++i) {
        double d = xg[i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(gw);
      double inv = 1.0 / std::sqrt(var + eps);
      for (int64_t i = 0; i < gw; ++i) {
        double xh = (xg[i] - mu) * inv;
        yr[g * gw + i] = static_cast<T>(xh * gain[g * gw + i]);
      }
    }
  }
}

template <class T>
void k_layer_norm_bwd(const T* x, const T* gain, const T* dy, T* dx, T* dgain, int64_t rows,
                      int64_t c, int64_t groups, double eps) {
  int64_t gw = c / groups;
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * c;
    const T* dyr = dy + r * c;
    T* dxr = dx + r * c;
    for (int64_t g = 0; g < groups; ++g) {
      const T* xg = xr + g * gw;
      const T* dyg = dyr + g * gw;
      double mu = 0;
      for (int64_t i = 0; i < gw; ++i) mu += xg[i];
      mu /= static_cast<double>(gw);
      double var = 0;
      for (int64_t i = 0; i < gw; ++i) {
        double d = xg[i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(gw);
      double inv = 1.0 / std::sqrt(var + eps);
      double mean_dxh = 0, mean_dxh_xh = 0;
      for (int64_t i = 0; i < gw; ++i) {
        double xh = (xg[i] - mu) * inv;
        double dxh = static_cast<double>(dyg[i]) * gain[g * gw + i];
        mean_dxh += dxh;
        mean_dxh_xh += dxh * xh;
      }
      mean_dxh /= static_cast<double>(gw);
      mean_dxh_xh /= static_cast<double>(gw);
      for (int64_t i = 0; i < gw; ++i) {
        double xh = (xg[i] - mu) * inv;
        double dxh = static_cast<double>(dyg[i]) * gain[g * gw + i];
        dxr[g * gw + i] += static_cast<T>(inv * (dxh - mean_dxh - xh * mean_dxh_xh));
        dgain[g * gw + i] += static_cast<T>(static_cast<double>(dyg[i]) * xh);
      }
    }
  }
}

// Max-subtracted softmax over the last axis; with `causal`, input is
// (..., S, S) score blocks and row i attends to columns [0, i].
template <class T>
void k_softmax(const T* x, T* y, int64_t rows, int64_t cols, bool causal, int64_t s) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    int64_t valid = causal ? (r % s) + 1 : cols;
    T mx = xr[0];
    for (int64_t j = 1; j < valid; ++j) mx = std::max(mx, xr[j]);
    double sum = 0;
    for (int64_t j = 0; j < valid; ++j) {
      T e = std::exp(xr[j] - mx);
      yr[j] = e;
      sum += e;
    }
    T inv = static_cast<T>(1.0 / sum);
    for (int64_t j = 0; j < valid; ++j) yr[j] = yr[j] * inv;
    for (int64_t j = valid; j < cols; ++j) yr[j] = 0;
  }
}

template <class T>
void k_softmax_bwd(const T* y, const T* dy, T* dx, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    const T* yr = y + r * cols;
    const T* dyr = dy + r * cols;
    T* dxr = dx + r * cols;
    double dot = 0;
    for (int64_t j = 0; j < cols; ++j) dot += static_cast<double>(yr[j]) * dyr[j];
    for (int64_t j = 0; j < cols; ++j)
      dxr[j] += static_cast<T>(static_cast<double>(yr[j]) * (static_cast<double>(dyr[j]) - dot));
  }
}

// Rotates pairs within each head slice by position-dependent angles.
// sign = +1 forward, -1 backward (inverse rotation).
// (s x half) cos/sin tables shared across batch rows and heads
void rope_tables(int64_t s, int64_t dh, double base, std::vector<double>& cos_t,
                 std::vector<double>& sin_t) {
  int64_t half = dh / 2;
  cos_t.resize(static_cast<size_t>(s * half));
  sin_t.resize(static_cast<size_t>(s * half));
  for (int64_t p = 0; p < half; ++p) {
    double inv_freq = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(dh));
    for (int64_t t = 0; t < s; ++t) {
      double theta = static_cast<double>(t) * inv_freq;
      cos_t[static_cast<size_t>(t * half + p)] = std::cos(theta);
      sin_t[static_cast<size_t>(t * half + p)] = std::sin(theta);
    }
  }
}

template <class T>
void k_rope(const T* x, T* y, int64_t b, int64_t s, int64_t d, int64_t heads, double base,
            int sign) {
  int64_t dh = d / heads;
  int64_t half = dh / 2;
  std::vector<double> cos_t, sin_t;
  rope_tables(s, dh, base, cos_t, sin_t);
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t t = 0; t < s; ++t) {
      const T* xr = x + (bi * s + t) * d;
      T* yr = y + (bi * s + t) * d;
      const double* ct = cos_t.data() + t * half;
      const double* st = sin_t.data() + t * half;
      for (int64_t h = 0; h < heads; ++h) {
        for (int64_t p = 0; p < half; ++p) {
          double c = ct[p], sn = sign * st[p];
          int64_t i0 = h * dh + 2 * p, i1 = i0 + 1;
          double x0 = xr[i0], x1 = xr[i1];
          yr[i0] = static_cast<T>(x0 * c - x1 * sn);
          yr[i1] = static_cast<T>(x0 * sn + x1 * c);
        }
      }
    }
  }
}

template <class T>
void k_rope_bwd_accum(const T* dy, T* dx, int64_t b, int64_t s, int64_t d, int64_t heads,
                      double base) {
  // inverse rotation applied to dy, accumulated into dx
  int64_t dh = d / heads;
  int64_t half = dh / 2;
  std::vector<double> cos_t, sin_t;
  rope_tables(s, dh, base, cos_t, sin_t);
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t t = 0; t < s; ++t) {
      const T* gr = dy + (bi * s + t) * d;
      T* dr = dx + (bi * s + t) * d;
      const double* ct = cos_t.data() + t * half;
      const double* st = sin_t.data() + t * half;
      for (int64_t h = 0; h < heads; ++h) {
        for (int64_t p = 0; p < half; ++p) {
          double c = ct[p], sn = st[p];
          int64_t i0 = h * dh + 2 * p, i1 = i0 + 1;
          double g0 = gr[i0], g1 = gr[i1];
          dr[i0] += static_cast<T>(g0 * c + g1 * sn);
          dr[i1] += static_cast<T>(-g0 * sn + g1 * c);
        }
      }
    }
  }
}

void add_into(Tensor& acc, const Tensor& g) {
  if (acc.dtype() == Dtype::f32) {
    auto a = acc.data<float>();
    auto b = g.data<float>();
    for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  } else {
    auto a = acc.data<double>();
    auto b = g.data<double>();
    for (size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  }
}

int64_t last_dim(const Shape& s) { return s.back(); }
int64_t rows_of(const Tensor& t) { return t.numel() / last_dim(t.shape()); }

}  // namespace

// ---- Graph -------------------------------------------------------------------

TensorId Graph::push(Tensor t) {
  values_.push_back(std::move(t));
  is_param_.push_back(false);
  return static_cast<TensorId>(values_.size() - 1);
}

TensorId Graph::leaf(Tensor t, bool is_param) {
  if (t.dtype() != dtype_)
    throw NumericError(std::string("leaf dtype ") + dtype_name(t.dtype()) +
                       " does not match graph dtype " + dtype_name(dtype_));
  TensorId id = push(std::move(t));
  is_param_[static_cast<size_t>(id)] = is_param;
  return id;
}

TensorId Graph::record(OpKind kind, OpAttrs attrs, TensorId a, TensorId b, Tensor out) {
  TensorId id = push(std::move(out));
  TapeNode n;
  n.kind = kind;
  n.attrs = std::move(attrs);
  n.in = {a, b};
  n.n_in = b < 0 ? 1 : 2;
  n.out = id;
  nodes_.push_back(std::move(n));
  return id;
}

const Tensor& Graph::value(TensorId id) const {
  if (id < 0 || static_cast<size_t>(id) >= values_.size()) throw Error("bad tensor id");
  return values_[static_cast<size_t>(id)];
}

TensorId Graph::matmul(TensorId a, TensorId b, bool trans_b, double alpha) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (A.ndim() < 1 || B.ndim() != 2)
    throw ShapeError("matmul expects (...,K) x 2-d, got " + shape_str(A.shape()) + " x " +
                     shape_str(B.shape()));
  int64_t k = last_dim(A.shape());
  int64_t kb = trans_b ? B.dim(1) : B.dim(0);
  int64_t n = trans_b ? B.dim(0) : B.dim(1);
  if (k != kb)
    throw ShapeError("matmul inner dims disagree: " + shape_str(A.shape()) + " x " +
                     shape_str(B.shape()) + (trans_b ? " (B transposed)" : ""));
  Shape out_shape(A.shape().begin(), A.shape().end() - 1);
  out_shape.push_back(n);
  Tensor out(out_shape, dtype_);
  int64_t m = rows_of(A);
  if (dtype_ == Dtype::f32)
    gemm(false, trans_b, m, n, k, alpha, A.data<float>().data(), k, B.data<float>().data(),
         B.dim(1), 0.0, out.data<float>().data(), n);
  else
    gemm(false, trans_b, m, n, k, alpha, A.data<double>().data(), k, B.data<double>().data(),
         B.dim(1), 0.0, out.data<double>().data(), n);
  OpAttrs at;
  at.trans_b = trans_b;
  at.alpha = alpha;
  return record(OpKind::matmul, std::move(at), a, b, std::move(out));
}

namespace {

template <class T>
void attn_scores_fwd(const T* q, const T* k, T* out, int64_t b, int64_t s, int64_t d, int64_t h,
                     double alpha) {
  int64_t dh = d / h;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t hi = 0; hi < h; ++hi)
      gemm(false, true, s, s, dh, alpha, q + bi * s * d + hi * dh, d, k + bi * s * d + hi * dh, d,
           0.0, out + ((bi * h) + hi) * s * s, s);
}

template <class T>
void attn_scores_bwd(const T* q, const T* k, const T* ds, T* dq, T* dk, int64_t b, int64_t s,
                     int64_t d, int64_t h, double alpha) {
  int64_t dh = d / h;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t hi = 0; hi < h; ++hi) {
      const T* dsb = ds + ((bi * h) + hi) * s * s;
      // dq += alpha * dS * K ; dk += alpha * dS^T * Q
      gemm(false, false, s, dh, s, alpha, dsb, s, k + bi * s * d + hi * dh, d, 1.0,
           dq + bi * s * d + hi * dh, d);
      gemm(true, false, s, dh, s, alpha, dsb, s, q + bi * s * d + hi * dh, d, 1.0,
           dk + bi * s * d + hi * dh, d);
    }
}

template <class T>
void attn_mix_fwd(const T* p, const T* v, T* out, int64_t b, int64_t s, int64_t d, int64_t h) {
  int64_t dh = d / h;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t hi = 0; hi < h; ++hi)
      gemm(false, false, s, dh, s, 1.0, p + ((bi * h) + hi) * s * s, s, v + bi * s * d + hi * dh, d,
           0.0, out + bi * s * d + hi * dh, d);
}

template <class T>
void attn_mix_bwd(const T* p, const T* v, const T* dy, T* dp, T* dv, int64_t b, int64_t s,
                  int64_t d, int64_t h) {
  int64_t dh = d / h;
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t hi = 0; hi < h; ++hi) {
      const T* pb = p + ((bi * h) + hi) * s * s;
      const T* dyb = dy + bi * s * d + hi * dh;
      // dp += dY * V^T ; dv += P^T * dY
      gemm(false, true, s, s, dh, 1.0, dyb, d, v + bi * s * d + hi * dh, d, 1.0,
           dp + ((bi * h) + hi) * s * s, s);
      gemm(true, false, s, dh, s, 1.0, pb, s, dyb, d, 1.0, dv + bi * s * d + hi * dh, d);
    }
}

}  // namespace

TensorId Graph::attn_scores(TensorId q, TensorId k, int64_t heads, double alpha) {
  const Tensor& Q = value(q);
  const Tensor& K = value(k);
  if (Q.ndim() != 3 || !same_shape(Q, K))
    throw ShapeError("attn_scores expects matching (B,S,D), got " + shape_str(Q.shape()) + " x " +
                     shape_str(K.shape()));
  int64_t b = Q.dim(0), s = Q.dim(1), d = Q.dim(2);
  if (heads < 1 || d % heads != 0)
    throw ShapeError("attn_scores: D=" + std::to_string(d) + " not divisible by heads=" +
                     std::to_string(heads));
  Tensor out({b, heads, s, s}, dtype_);
  if (dtype_ == Dtype::f32)
    attn_scores_fwd(Q.data<float>().data(), K.data<float>().data(), out.data<float>().data(), b, s,
                    d, heads, alpha);
  else
    attn_scores_fwd(Q.data<double>().data(), K.data<double>().data(), out.data<double>().data(), b,
                    s, d, heads, alpha);
  OpAttrs at;
  at.trans_b = true;
  at.heads = heads;
  at.alpha = alpha;
  return record(OpKind::matmul, std::move(at), q, k, std::move(out));
}

TensorId Graph::attn_mix(TensorId probs, TensorId v, int64_t heads) {
  const Tensor& P = value(probs);
  const Tensor& V = value(v);
  if (P.ndim() != 4 || V.ndim() != 3 || P.dim(0) != V.dim(0) || P.dim(1) != heads ||
      P.dim(2) != V.dim(1) || P.dim(3) != V.dim(1))
    throw ShapeError("attn_mix expects (B,H,S,S) x (B,S,D), got " + shape_str(P.shape()) + " x " +
                     shape_str(V.shape()));
  int64_t b = V.dim(0), s = V.dim(1), d = V.dim(2);
  if (d % heads != 0) throw ShapeError("attn_mix: D not divisible by heads");
  Tensor out({b, s, d}, dtype_);
  if (dtype_ == Dtype::f32)
    attn_mix_fwd(P.data<float>().data(), V.data<float>().data(), out.data<float>().data(), b, s, d,
                 heads);
  else
    attn_mix_fwd(P.data<double>().data(), V.data<double>().data(), out.data<double>().data(), b, s,
                 d, heads);
  OpAttrs at;
  at.heads = heads;
  return record(OpKind::matmul, std::move(at), probs, v, std::move(out));
}

TensorId Graph::add(TensorId a, TensorId b) {
  const Tensor& A = value(a);
  const Tensor& B = value(b);
  if (!same_shape(A, B))
    throw ShapeError("add shape mismatch: " + shape_str(A.shape()) + " vs " +
                     shape_str(B.shape()));
  Tensor out(A.shape(), dtype_);
  if (dtype_ == Dtype::f32) {
    auto x = A.data<float>(), y = B.data<float>();
    auto z = out.data<float>();
    for (size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  } else {
    auto x = A.data<double>(), y = B.data<double>();
    auto z = out.data<double>();
    for (size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  }
  return record(OpKind::add, {}, a, b, std::move(out));
}

TensorId Graph::scale(TensorId a, double s) {
  const Tensor& A = value(a);
  Tensor out(A.shape(), dtype_);
  if (dtype_ == Dtype::f32) {
    auto x = A.data<float>();
    auto z = out.data<float>();
    for (size_t i = 0; i < z.size(); ++i) z[i] = static_cast<float>(x[i] * s);
  } else {
    auto x = A.data<double>();
    auto z = out.data<double>();
    for (size_t i = 0; i < z.size(); ++i) z[i] = x[i] * s;
  }
  OpAttrs at;
  at.alpha = s;
  return record(OpKind::scale, std::move(at), a, -1, std::move(out));
}

TensorId Graph::gelu(TensorId a) {
  const Tensor& A = value(a);
  Tensor out(A.shape(), dtype_);
  if (dtype_ == Dtype::f32)
    k_gelu(A.data<float>(), out.data<float>());
  else
    k_gelu(A.data<double>(), out.data<double>());
  return record(OpKind::gelu, {}, a, -1, std::move(out));
}

TensorId Graph::geglu_gate(TensorId gate, TensorId val) {
  const Tensor& U = value(gate);
  const Tensor& V = value(val);
  if (!same_shape(U, V))
    throw ShapeError("geglu-gate shape mismatch: " + shape_str(U.shape()) + " vs " +
                     shape_str(V.shape()));
  Tensor out(U.shape(), dtype_);
  if (dtype_ == Dtype::f32)
    k_geglu(U.data<float>(), V.data<float>(), out.data<float>());
  else
    k_geglu(U.data<double>(), V.data<double>(), out.data<double>());
  return record(OpKind::geglu_gate, {}, gate, val, std::move(out));
}

TensorId Graph::layer_norm(TensorId x, TensorId gain, int64_t heads, double eps) {
  const Tensor& X = value(x);
  const Tensor& G = value(gain);
  int64_t c = last_dim(X.shape());
  if (G.ndim() != 1 || G.dim(0) != c)
    throw ShapeError("layer_norm gain " + shape_str(G.shape()) + " does not match last axis of " +
                     shape_str(X.shape()));
  int64_t groups = heads < 1 ? 1 : heads;
  if (c % groups != 0) throw ShapeError("layer_norm: last axis not divisible by group count");
  Tensor out(X.shape(), dtype_);
  if (dtype_ == Dtype::f32)
    k_layer_norm(X.data<float>().data(), G.data<float>().data(), out.data<float>().data(),
                 rows_of(X), c, groups, eps);
  else
    k_layer_norm(X.data<double>().data(), G.data<double>().data(), out.data<double>().data(),
                 rows_of(X), c, groups, eps);
  OpAttrs at;
  at.heads = groups;
  at.eps = eps;
  return record(OpKind::layer_norm, std::move(at), x, gain, std::move(out));
}

TensorId Graph::softmax_last_axis(TensorId x, bool causal) {
  const Tensor& X = value(x);
  int64_t cols = last_dim(X.shape());
  int64_t s = cols;
  if (causal) {
    if (X.ndim() < 2 || X.dim(X.ndim() - 2) != cols)
      throw ShapeError("causal softmax expects (...,S,S), got " + shape_str(X.shape()));
  }
  Tensor out(X.shape(), dtype_);
  if (dtype_ == Dtype::f32)
    k_softmax(X.data<float>().data(), out.data<float>().data(), rows_of(X), cols, causal, s);
  else
    k_softmax(X.data<double>().data(), out.data<double>().data(), rows_of(X), cols, causal, s);
  OpAttrs at;
  at.causal = causal;
  return record(OpKind::softmax_last_axis, std::move(at), x, -1, std::move(out));
}

TensorId Graph::rope_rotate(TensorId x, int64_t heads, double base) {
  const Tensor& X = value(x);
  if (X.ndim() != 3) throw ShapeError("rope_rotate expects (B,S,D), got " + shape_str(X.shape()));
  int64_t d = X.dim(2);
  int64_t h = heads < 1 ? 1 : heads;
  if (d % h != 0 || (d / h) % 2 != 0)
    throw ShapeError("rope_rotate: head width must be even, got D=" + std::to_string(d) +
                     " heads=" + std::to_string(h));
  Tensor out(X.shape(), dtype_);
  if (dtype_ == Dtype::f32)
    k_rope(X.data<float>().data(), out.data<float>().data(), X.dim(0), X.dim(1), d, h, base, +1);
  else
    k_rope(X.data<double>().data(), out.data<double>().data(), X.dim(0), X.dim(1), d, h, base, +1);
  OpAttrs at;
  at.heads = h;
  at.rope_base = base;
  return record(OpKind::rope_rotate, std::move(at), x, -1, std::move(out));
}

TensorId Graph::embed_gather(TensorId table, const std::vector<int32_t>& ids, Shape prefix) {
  const Tensor& T = value(table);
  if (T.ndim() != 2) throw ShapeError("embed_gather table must be 2-d, got " + shape_str(T.shape()));
  int64_t v = T.dim(0), d = T.dim(1);
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= v)
      throw DataError("token id " + std::to_string(ids[i]) + " at position " + std::to_string(i) +
                      " out of range for vocab " + std::to_string(v));
  if (prefix.empty()) prefix = {static_cast<int64_t>(ids.size())};
  if (shape_numel(prefix) != static_cast<int64_t>(ids.size()))
    throw ShapeError("embed_gather prefix " + shape_str(prefix) + " does not cover " +
                     std::to_string(ids.size()) + " ids");
  Shape out_shape = prefix;
  out_shape.push_back(d);
  Tensor out(out_shape, dtype_);
  if (dtype_ == Dtype::f32) {
    auto t = T.data<float>();
    auto o = out.data<float>();
    for (size_t i = 0; i < ids.size(); ++i)
      std::memcpy(&o[i * static_cast<size_t>(d)], &t[static_cast<size_t>(ids[i]) * static_cast<size_t>(d)],
                  sizeof(float) * static_cast<size_t>(d));
  } else {
    auto t = T.data<double>();
    auto o = out.data<double>();
    for (size_t i = 0; i < ids.size(); ++i)
      std::memcpy(&o[i * static_cast<size_t>(d)], &t[static_cast<size_t>(ids[i]) * static_cast<size_t>(d)],
                  sizeof(double) * static_cast<size_t>(d));
  }
  OpAttrs at;
  at.ids = ids;
  at.prefix = std::move(prefix);
  return record(OpKind::embed_gather, std::move(at), table, -1, std::move(out));
}

TensorId Graph::cross_entropy_mean(TensorId logits, const std::vector<int32_t>& targets) {
  const Tensor& Z = value(logits);
  int64_t v = last_dim(Z.shape());
  int64_t rows = rows_of(Z);
  if (static_cast<int64_t>(targets.size()) != rows)
    throw ShapeError("cross_entropy targets length " + std::to_string(targets.size()) +
                     " != logit rows " + std::to_string(rows));
  int64_t n_valid = 0;
  for (int32_t t : targets) {
    if (t >= v) throw DataError("target id " + std::to_string(t) + " out of range for vocab " +
                                std::to_string(v));
    if (t >= 0) ++n_valid;
  }
  if (n_valid == 0) throw DataError("cross_entropy: no valid targets");
  per_position_loss_.assign(static_cast<size_t>(rows), 0.0);
  std::vector<double> lse(static_cast<size_t>(rows));
  double total = 0;
  auto row_loss = [&](auto zdata) {
    for (int64_t r = 0; r < rows; ++r) {
      const auto* zr = zdata + r * v;
      double mx = zr[0];
      for (int64_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(zr[j]));
      double sum = 0;
      for (int64_t j = 0; j < v; ++j) sum += std::exp(static_cast<double>(zr[j]) - mx);
      lse[static_cast<size_t>(r)] = mx + std::log(sum);
      if (targets[static_cast<size_t>(r)] >= 0) {
        double l = lse[static_cast<size_t>(r)] - static_cast<double>(zr[targets[static_cast<size_t>(r)]]);
        per_position_loss_[static_cast<size_t>(r)] = l;
        total += l;
      }
    }
  };
  if (dtype_ == Dtype::f32)
    row_loss(Z.data<float>().data());
  else
    row_loss(Z.data<double>().data());
  Tensor out = Tensor::full({1}, total / static_cast<double>(n_valid), dtype_);
  OpAttrs at;
  at.ids = targets;
  TensorId id = record(OpKind::cross_entropy_mean, std::move(at), logits, -1, std::move(out));
  nodes_.back().saved = std::move(lse);
  return id;
}

std::unordered_map<TensorId, Tensor> Graph::backward(TensorId loss) {
  if (consumed_) throw Error("tape already consumed by a previous backward()");
  consumed_ = true;
  const Tensor& L = value(loss);
  if (L.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(L.shape()));

  std::vector<Tensor> grads(values_.size());
  std::vector<char> has(values_.size(), 0);
  grads[static_cast<size_t>(loss)] = Tensor::full({1}, 1.0, dtype_);
  has[static_cast<size_t>(loss)] = 1;

  auto grad_of = [&](TensorId id) -> Tensor& {
    if (!has[static_cast<size_t>(id)]) {
      grads[static_cast<size_t>(id)] = Tensor::zeros(values_[static_cast<size_t>(id)].shape(), dtype_);
      has[static_cast<size_t>(id)] = 1;
    }
    return grads[static_cast<size_t>(id)];
  };

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const TapeNode& n = *it;
    if (!has[static_cast<size_t>(n.out)]) continue;
    const Tensor& gy = grads[static_cast<size_t>(n.out)];
    const Tensor& A = value(n.in[0]);

    switch (n.kind) {
      case OpKind::matmul: {
        const Tensor& B = value(n.in[1]);
        if (n.attrs.heads > 0 && n.attrs.trans_b) {
          // attn_scores backward
          int64_t b = A.dim(0), s = A.dim(1), d = A.dim(2);
          Tensor& dq = grad_of(n.in[0]);
          Tensor& dk = grad_of(n.in[1]);
          if (dtype_ == Dtype::f32)
            attn_scores_bwd(A.data<float>().data(), B.data<float>().data(), gy.data<float>().data(),
                            dq.data<float>().data(), dk.data<float>().data(), b, s, d,
                            n.attrs.heads, n.attrs.alpha);
          else
            attn_scores_bwd(A.data<double>().data(), B.data<double>().data(),
                            gy.data<double>().data(), dq.data<double>().data(),
                            dk.data<double>().data(), b, s, d, n.attrs.heads, n.attrs.alpha);
        } else if (n.attrs.heads > 0) {
          // attn_mix backward
          const Tensor& V = B;
          int64_t b = V.dim(0), s = V.dim(1), d = V.dim(2);
          Tensor& dp = grad_of(n.in[0]);
          Tensor& dv = grad_of(n.in[1]);
          if (dtype_ == Dtype::f32)
            attn_mix_bwd(A.data<float>().data(), V.data<float>().data(), gy.data<float>().data(),
                         dp.data<float>().data(), dv.data<float>().data(), b, s, d, n.attrs.heads);
          else
            attn_mix_bwd(A.data<double>().data(), V.data<double>().data(), gy.data<double>().data(),
                         dp.data<double>().data(), dv.data<double>().data(), b, s, d,
                         n.attrs.heads);
        } else {
          // flat matmul: dA = alpha * dY * B^T (or *B), dB = alpha * A^T * dY (or dY^T * A)
          int64_t k = last_dim(A.shape());
          int64_t m = rows_of(A);
          int64_t nn = last_dim(value(n.out).shape());
          Tensor& da = grad_of(n.in[0]);
          Tensor& db = grad_of(n.in[1]);
          if (dtype_ == Dtype::f32) {
            const float* gp = gy.data<float>().data();
            const float* ap = A.data<float>().data();
            const float* bp = B.data<float>().data();
            gemm(false, !n.attrs.trans_b, m, k, nn, n.attrs.alpha, gp, nn, bp, B.dim(1), 1.0,
                 da.data<float>().data(), k);
            if (n.attrs.trans_b)
              gemm(true, false, nn, k, m, n.attrs.alpha, gp, nn, ap, k, 1.0,
                   db.data<float>().data(), k);
            else
              gemm(true, false, k, nn, m, n.attrs.alpha, ap, k, gp, nn, 1.0,
                   db.data<float>().data(), nn);
          } else {
            const double* gp = gy.data<double>().data();
            const double* ap = A.data<double>().data();
            const double* bp = B.data<double>().data();
            gemm(false, !n.attrs.trans_b, m, k, nn, n.attrs.alpha, gp, nn, bp, B.dim(1), 1.0,
                 da.data<double>().data(), k);
            if (n.attrs.trans_b)
              gemm(true, false, nn, k, m, n.attrs.alpha, gp, nn, ap, k, 1.0,
                   db.data<double>().data(), k);
            else
              gemm(true, false, k, nn, m, n.attrs.alpha, ap, k, gp, nn, 1.0,
                   db.data<double>().data(), nn);
          }
        }
        break;
      }
      case OpKind::add:
        add_into(grad_of(n.in[0]), gy);
        add_into(grad_of(n.in[1]), gy);
        break;
      case OpKind::scale: {
        Tensor& dx = grad_of(n.in[0]);
        if (dtype_ == Dtype::f32) {
          auto g = gy.data<float>();
          auto d = dx.data<float>();
          for (size_t i = 0; i < d.size(); ++i) d[i] += static_cast<float>(g[i] * n.attrs.alpha);
        } else {
          auto g = gy.data<double>();
          auto d = dx.data<double>();
          for (size_t i = 0; i < d.size(); ++i) d[i] += g[i] * n.attrs.alpha;
        }
        break;
      }
      case OpKind::gelu: {
        Tensor& dx = grad_of(n.in[0]);
        if (dtype_ == Dtype::f32)
          k_gelu_bwd(A.data<float>(), gy.data<float>(), dx.data<float>());
        else
          k_gelu_bwd(A.data<double>(), gy.data<double>(), dx.data<double>());
        break;
      }
      case OpKind::geglu_gate: {
        const Tensor& V = value(n.in[1]);
        Tensor& du = grad_of(n.in[0]);
        Tensor& dv = grad_of(n.in[1]);
        if (dtype_ == Dtype::f32)
          k_geglu_bwd(A.data<float>(), V.data<float>(), gy.data<float>(), du.data<float>(),
                      dv.data<float>());
        else
          k_geglu_bwd(A.data<double>(), V.data<double>(), gy.data<double>(), du.data<double>(),
                      dv.data<double>());
        break;
      }
      case OpKind::layer_norm: {
        const Tensor& G = value(n.in[1]);
        int64_t c = last_dim(A.shape());
        Tensor& dx = grad_of(n.in[0]);
        Tensor& dg = grad_of(n.in[1]);
        if (dtype_ == Dtype::f32)
          k_layer_norm_bwd(A.data<float>().data(), G.data<float>().data(), gy.data<float>().data(),
                           dx.data<float>().data(), dg.data<float>().data(), rows_of(A), c,
                           n.attrs.heads, n.attrs.eps);
        else
          k_layer_norm_bwd(A.data<double>().data(), G.data<double>().data(),
                           gy.data<double>().data(), dx.data<double>().data(),
                           dg.data<double>().data(), rows_of(A), c, n.attrs.heads, n.attrs.eps);
        break;
      }
      case OpKind::softmax_last_axis: {
        const Tensor& Y = value(n.out);
        int64_t cols = last_dim(Y.shape());
        Tensor& dx = grad_of(n.in[0]);
        if (dtype_ == Dtype::f32)
          k_softmax_bwd(Y.data<float>().data(), gy.data<float>().data(), dx.data<float>().data(),
                        rows_of(Y), cols);
        else
          k_softmax_bwd(Y.data<double>().data(), gy.data<double>().data(), dx.data<double>().data(),
                        rows_of(Y), cols);
        break;
      }
      case OpKind::rope_rotate: {
        Tensor& dx = grad_of(n.in[0]);
        if (dtype_ == Dtype::f32)
          k_rope_bwd_accum(gy.data<float>().data(), dx.data<float>().data(), A.dim(0), A.dim(1),
                           A.dim(2), n.attrs.heads, n.attrs.rope_base);
        else
          k_rope_bwd_accum(gy.data<double>().data(), dx.data<double>().data(), A.dim(0), A.dim(1),
                           A.dim(2), n.attrs.heads, n.attrs.rope_base);
        break;
      }
      case OpKind::embed_gather: {
        Tensor& dt = grad_of(n.in[0]);
        int64_t d = A.dim(1);
        if (dtype_ == Dtype::f32) {
          auto g = gy.data<float>();
          auto t = dt.data<float>();
          for (size_t i = 0; i < n.attrs.ids.size(); ++i) {
            size_t dst = static_cast<size_t>(n.attrs.ids[i]) * static_cast<size_t>(d);
            for (int64_t j = 0; j < d; ++j) t[dst + static_cast<size_t>(j)] += g[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
          }
        } else {
          auto g = gy.data<double>();
          auto t = dt.data<double>();
          for (size_t i = 0; i < n.attrs.ids.size(); ++i) {
            size_t dst = static_cast<size_t>(n.attrs.ids[i]) * static_cast<size_t>(d);
            for (int64_t j = 0; j < d; ++j) t[dst + static_cast<size_t>(j)] += g[i * static_cast<size_t>(d) + static_cast<size_t>(j)];
          }
        }
        break;
      }
      case OpKind::cross_entropy_mean: {
        int64_t v = last_dim(A.shape());
        int64_t rows = rows_of(A);
        int64_t n_valid = 0;
        for (int32_t t : n.attrs.ids)
          if (t >= 0) ++n_valid;
        double gl = gy.at(0) / static_cast<double>(n_valid);
        Tensor& dz = grad_of(n.in[0]);
        auto run = [&](auto zp, auto dp) {
          for (int64_t r = 0; r < rows; ++r) {
            int32_t tgt = n.attrs.ids[static_cast<size_t>(r)];
            if (tgt < 0) continue;
            double lse = n.saved[static_cast<size_t>(r)];
            auto* zr = zp + r * v;
            auto* dr = dp + r * v;
            for (int64_t j = 0; j < v; ++j) {
              double p = std::exp(static_cast<double>(zr[j]) - lse);
              double delta = (j == tgt) ? 1.0 : 0.0;
              dr[j] += static_cast<std::remove_reference_t<decltype(dr[0])>>(gl * (p - delta));
            }
          }
        };
        if (dtype_ == Dtype::f32)
          run(A.data<float>().data(), dz.data<float>().data());
        else
          run(A.data<double>().data(), dz.data<double>().data());
        break;
      }
    }
    // grad of this output is fully propagated; release its buffer
    if (static_cast<size_t>(n.out) != static_cast<size_t>(loss))
      grads[static_cast<size_t>(n.out)] = Tensor();
  }

  std::unordered_map<TensorId, Tensor> out;
  for (size_t i = 0; i < values_.size(); ++i) {
    if (!is_param_[i]) continue;
    TensorId id = static_cast<TensorId>(i);
    if (has[i] && grads[i].numel() > 0)
      out.emplace(id, std::move(grads[i]));
    else
      out.emplace(id, Tensor::zeros(values_[i].shape(), dtype_));
  }
  return out;
}

// ---- eager primitive surface ---------------------------------------------------

Tensor primitive_forward(OpKind kind, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  if (inputs.empty()) throw ShapeError("primitive_forward: no inputs");
  Dtype dt = inputs[0].dtype();
  for (size_t i = 0; i < inputs.size(); ++i) {
    int64_t bad = -1;
    if (!inputs[i].all_finite(&bad))
      throw NumericError("non-finite input to " + std::string(op_name(kind)) + " at operand " +
                         std::to_string(i) + " index " + std::to_string(bad));
  }
  Graph g(dt);
  std::vector<TensorId> ids;
  ids.reserve(inputs.size());
  for (const Tensor& t : inputs) ids.push_back(g.constant(t));
  TensorId out = -1;
  switch (kind) {
    case OpKind::matmul:
      if (inputs.size() != 2) throw ShapeError("matmul takes 2 inputs");
      if (attrs.heads > 0)
        out = attrs.trans_b ? g.attn_scores(ids[0], ids[1], attrs.heads, attrs.alpha)
                            : g.attn_mix(ids[0], ids[1], attrs.heads);
      else
        out = g.matmul(ids[0], ids[1], attrs.trans_b, attrs.alpha);
      break;
    case OpKind::add:
      if (inputs.size() != 2) throw ShapeError("add takes 2 inputs");
      out = g.add(ids[0], ids[1]);
      break;
    case OpKind::scale:
      out = g.scale(ids[0], attrs.alpha);
      break;
    case OpKind::gelu:
      out = g.gelu(ids[0]);
      break;
    case OpKind::geglu_gate:
      if (inputs.size() != 2) throw ShapeError("geglu-gate takes 2 inputs");
      out = g.geglu_gate(ids[0], ids[1]);
      break;
    case OpKind::layer_norm:
      if (inputs.size() != 2) throw ShapeError("layer_norm takes (x, gain)");
      out = g.layer_norm(ids[0], ids[1], attrs.heads, attrs.eps);
      break;
    case OpKind::softmax_last_axis:
      out = g.softmax_last_axis(ids[0], attrs.causal);
      break;
    case OpKind::rope_rotate:
      out = g.rope_rotate(ids[0], attrs.heads, attrs.rope_base);
      break;
    case OpKind::embed_gather:
      out = g.embed_gather(ids[0], attrs.ids, attrs.prefix);
      break;
    case OpKind::cross_entropy_mean:
      out = g.cross_entropy_mean(ids[0], attrs.ids);
      break;
  }
  return g.value(out);
}

// ---- finite differences --------------------------------------------------------

FdiffReport finite_diff_check(const std::function<double(const std::vector<Tensor>&)>& value_fn,
                              const std::vector<Tensor>& params,
                              const std::vector<std::string>& names,
                              const std::vector<Tensor>& analytic_grads, int min_coords,
                              double step, Rng& rng) {
  int64_t total = 0;
  for (const Tensor& p : params) total += p.numel();
  FdiffReport rep;
  std::vector<Tensor> work = params;

  auto check_coord = [&](size_t ti, int64_t ci) {
    double orig = work[ti].at(ci);
    work[ti].set(ci, orig + step);
    double fp = value_fn(work);
    work[ti].set(ci, orig - step);
    double fm = value_fn(work);
    work[ti].set(ci, orig);
    ++rep.coords_checked;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      FdiffIssue iss;
      iss.tensor = names[ti];
      iss.index = ci;
      iss.nonfinite = true;
      rep.nonfinite_points.push_back(iss);
      return;
    }
    double fd = (fp - fm) / (2.0 * step);
    double ad = analytic_grads[ti].at(ci);
    double rel = std::fabs(ad - fd) / std::max({std::fabs(ad), std::fabs(fd), 1e-4});
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_tensor = names[ti];
      rep.worst_index = ci;
    }
  };

  if (total <= min_coords) {
    for (size_t ti = 0; ti < params.size(); ++ti)
      for (int64_t ci = 0; ci < params[ti].numel(); ++ci) check_coord(ti, ci);
    return rep;
  }
  // Sample coordinates across tensors, at least one from each.
  for (size_t ti = 0; ti < params.size(); ++ti)
    if (params[ti].numel() > 0) check_coord(ti, static_cast<int64_t>(rng.below(static_cast<uint64_t>(params[ti].numel()))));
  while (rep.coords_checked < min_coords) {
    auto pick = rng.below(static_cast<uint64_t>(total));
    size_t ti = 0;
    while (pick >= static_cast<uint64_t>(params[ti].numel())) {
      pick -= static_cast<uint64_t>(params[ti].numel());
      ++ti;
    }
    check_coord(ti, static_cast<int64_t>(pick));
  }
  return rep;
}

}  // namespace scalelab
