#include "fuseseg/nngraph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <condition_variable>
#include <mutex>
#include <sstream>
#include <thread>

#include <cblas.h>

namespace fuseseg::nn {

namespace {

template <typename T>
std::vector<T>& scratch(int which) {
  static thread_local std::vector<T> bufs[4];
  return bufs[which];
}

// Persistent worker pool for per-sample parallelism. Workers live for the
// process so their thread_local scratch buffers survive across ops.
class SamplePool {
 public:
  static SamplePool& instance() {
    static SamplePool pool;
    return pool;
  }

  // Runs fn(sample) for samples 0..n-1; the caller executes stride 0 and
  // each worker w executes samples w+1, w+1+stride, ... Blocks until done.
  void run(int n, int stride, const std::function<void(int)>& fn) {
    ensure_workers(stride - 1);
    {
      std::lock_guard<std::mutex> lk(mutex_);
      fn_ = &fn;
      n_ = n;
      stride_ = stride;
      ++generation_;
      pending_ = static_cast<int>(workers_.size());
    }
    cv_.notify_all();
    for (int i = 0; i < n; i += stride) fn(i);
    std::unique_lock<std::mutex> lk(mutex_);
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    fn_ = nullptr;
  }

 private:
  void ensure_workers(int count) {
    while (static_cast<int>(workers_.size()) < count) {
      int id = static_cast<int>(workers_.size()) + 1;
      workers_.emplace_back([this, id] { worker_loop(id); });
    }
  }

  void worker_loop(int id) {
    uint64_t seen = 0;
    for (;;) {
      const std::function<void(int)>* fn;
      int n, stride;
      {
        std::unique_lock<std::mutex> lk(mutex_);
        cv_.wait(lk, [&] { return generation_ != seen; });
        seen = generation_;
        fn = fn_;
        n = n_;
        stride = stride_;
      }
      if (id < stride)
        for (int i = id; i < n; i += stride) (*fn)(i);
      {
        std::lock_guard<std::mutex> lk(mutex_);
        if (--pending_ == 0) done_cv_.notify_all();
      }
    }
  }

  std::mutex mutex_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> workers_;
  const std::function<void(int)>* fn_ = nullptr;
  int n_ = 0, stride_ = 1, pending_ = 0;
  uint64_t generation_ = 0;
};

// Runs fn(sample) for every sample, across compute_threads() workers when
// the batch allows. Partitioning is by whole samples and every reduction
// over samples happens afterwards in index order, so results do not depend
// on the thread count.
void for_samples(int n, const std::function<void(int)>& fn) {
  int workers = std::min(compute_threads(), n);
  if (workers <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  SamplePool::instance().run(n, workers, fn);
}

inline void gemm_impl(bool ta, bool tb, int m, int n, int k, float alpha, const float* a,
                      int lda, const float* b, int ldb, float beta, float* c, int ldc) {
  init_compute_env();
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

inline void gemm_impl(bool ta, bool tb, int m, int n, int k, double alpha, const double* a,
                      int lda, const double* b, int ldb, double beta, double* c, int ldc) {
  init_compute_env();
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
              m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
void transpose_mat(const T* src, int rows, int cols, T* dst) {
  // dst is cols x rows
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      dst[static_cast<size_t>(c) * rows + r] = src[static_cast<size_t>(r) * cols + c];
}

struct ConvDims {
  int kd, kh, kw;
  int od, oh, ow;
};

ConvDims conv_out_dims(const Shape5& x, const Shape5& w, const ConvSpec& s) {
  ConvDims d;
  d.kd = w.d;
  d.kh = w.h;
  d.kw = w.w;
  auto out = [](int in, int k, int stride, int pad) {
    return (in + 2 * pad - k) / stride + 1;
  };
  d.od = out(x.d, w.d, s.stride[0], s.pad[0]);
  d.oh = out(x.h, w.h, s.stride[1], s.pad[1]);
  d.ow = out(x.w, w.w, s.stride[2], s.pad[2]);
  if (x.d + 2 * s.pad[0] < w.d || x.h + 2 * s.pad[1] < w.h || x.w + 2 * s.pad[2] < w.w ||
      d.od < 1 || d.oh < 1 || d.ow < 1)
    fail(Err::ShapeMismatch, "conv3d: kernel larger than padded input");
  return d;
}

template <typename T>
inline void copy_chunk(T* dst, const T* src, int c) {
  for (int i = 0; i < c; ++i) dst[i] = src[i];
}

// col rows cover output voxels of one sample with z in [z0, z0+zc); each
// row is kd*kh*kw blocks of C input values (zero where the kernel offset
// leaves the volume).
template <typename T>
void im2col_range(const TensorT<T>& x, int sample, int z0, int zc, const ConvDims& cd,
                  const ConvSpec& s, T* col) {
  const int C = x.shape.c, D = x.shape.d, H = x.shape.h, W = x.shape.w;
  const T* base = &x.data[static_cast<size_t>(sample) * x.shape.spatial() * C];
  T* dst = col;
  for (int z = z0; z < z0 + zc; ++z)
    for (int y = 0; y < cd.oh; ++y)
      for (int xo = 0; xo < cd.ow; ++xo)
        for (int kz = 0; kz < cd.kd; ++kz) {
          int iz = z * s.stride[0] - s.pad[0] + kz;
          for (int ky = 0; ky < cd.kh; ++ky) {
            int iy = y * s.stride[1] - s.pad[1] + ky;
            bool plane_ok = iz >= 0 && iz < D && iy >= 0 && iy < H;
            const T* plane = plane_ok ? &base[(static_cast<size_t>(iz) * H + iy) * W * C]
                                      : nullptr;
            for (int kx = 0; kx < cd.kw; ++kx, dst += C) {
              int ix = xo * s.stride[2] - s.pad[2] + kx;
              if (plane_ok && ix >= 0 && ix < W)
                copy_chunk(dst, &plane[static_cast<size_t>(ix) * C], C);
              else
                std::memset(dst, 0, sizeof(T) * C);
            }
          }
        }
}

template <typename T>
void col2im_range_add(const T* col, const Shape5& xshape, int sample, int z0, int zc,
                      const ConvDims& cd, const ConvSpec& s, T* xgrad) {
  const int C = xshape.c, D = xshape.d, H = xshape.h, W = xshape.w;
  T* base = &xgrad[static_cast<size_t>(sample) * xshape.spatial() * C];
  const T* src = col;
  for (int z = z0; z < z0 + zc; ++z)
    for (int y = 0; y < cd.oh; ++y)
      for (int xo = 0; xo < cd.ow; ++xo)
        for (int kz = 0; kz < cd.kd; ++kz) {
          int iz = z * s.stride[0] - s.pad[0] + kz;
          for (int ky = 0; ky < cd.kh; ++ky) {
            int iy = y * s.stride[1] - s.pad[1] + ky;
            bool plane_ok = iz >= 0 && iz < D && iy >= 0 && iy < H;
            T* plane = plane_ok ? &base[(static_cast<size_t>(iz) * H + iy) * W * C] : nullptr;
            for (int kx = 0; kx < cd.kw; ++kx, src += C) {
              int ix = xo * s.stride[2] - s.pad[2] + kx;
              if (plane_ok && ix >= 0 && ix < W) {
                T* dst = &plane[static_cast<size_t>(ix) * C];
                for (int c = 0; c < C; ++c) dst[c] += src[c];
              }
            }
          }
        }
}

// Output z-slices per GEMM chunk, sized to keep the col buffer cache
// friendly.
inline int conv_chunk_slices(int64_t oh_ow) {
  return std::max<int64_t>(1, 32768 / std::max<int64_t>(oh_ow, 1));
}

template <typename T>
void check_same_shape(const Shape5& a, const Shape5& b, const char* op) {
  if (!(a == b))
    fail(Err::ShapeMismatch, std::string(op) + ": shapes differ, " + a.str() + " vs " + b.str());
}

}  // namespace

std::string Shape5::str() const {
  std::ostringstream os;
  os << "(" << n << "," << c << "," << d << "," << h << "," << w << ")";
  return os.str();
}

Tensor5d widen(const Tensor5& t) {
  Tensor5d o;
  o.shape = t.shape;
  o.data.assign(t.data.begin(), t.data.end());
  return o;
}

Tensor5 narrow(const Tensor5d& t) {
  Tensor5 o;
  o.shape = t.shape;
  o.data.resize(t.data.size());
  for (size_t i = 0; i < t.data.size(); ++i) o.data[i] = static_cast<float>(t.data[i]);
  return o;
}

template <typename T>
NodeT<T>* TapeT<T>::leaf(TensorT<T> v, bool requires_grad) {
  return record(std::move(v), requires_grad, nullptr);
}

template <typename T>
NodeT<T>* TapeT<T>::record(TensorT<T> v, bool requires_grad, std::function<void()> backward) {
  auto node = std::make_unique<NodeT<T>>();
  node->value = std::move(v);
  node->requires_grad = requires_grad;
  node->backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return nodes_.back().get();
}

template <typename T>
void TapeT<T>::backward(NodeT<T>* root) {
  if (root->value.numel() != 1)
    fail(Err::ShapeMismatch, "backward: root must be a scalar node");
  for (auto& n : nodes_)
    if (n->requires_grad) n->grad.assign(n->value.data.size(), T(0));
  if (!root->requires_grad) return;
  root->grad[0] = T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it)
    if ((*it)->backward && (*it)->requires_grad) (*it)->backward();
}

template <typename T>
void TapeT<T>::clear() {
  nodes_.clear();
}

template <typename T>
NodeT<T>* conv3d(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* w, NodeT<T>* b, const ConvSpec& spec) {
  const Shape5& xs = x->value.shape;
  const Shape5& ws = w->value.shape;
  if (ws.c != xs.c)
    fail(Err::ShapeMismatch,
         "conv3d: weight Cin " + std::to_string(ws.c) + " vs input C " + std::to_string(xs.c));
  const int cout = ws.n;
  if (b->value.numel() != cout)
    fail(Err::ShapeMismatch, "conv3d: bias numel != Cout");
  ConvDims cd = conv_out_dims(xs, ws, spec);

  const int K = cd.kd * cd.kh * cd.kw * xs.c;
  const int64_t oh_ow = static_cast<int64_t>(cd.oh) * cd.ow;
  const int chunk = conv_chunk_slices(oh_ow);
  const int64_t out_spatial = static_cast<int64_t>(cd.od) * oh_ow;

  TensorT<T> out = TensorT<T>::zeros({xs.n, cout, cd.od, cd.oh, cd.ow});
  const T* wdata = w->value.data.data();
  const T* bias = b->value.data.data();
  for_samples(xs.n, [&](int s) {
    auto& col = scratch<T>(0);
    col.resize(static_cast<size_t>(chunk) * oh_ow * K);
    for (int z0 = 0; z0 < cd.od; z0 += chunk) {
      int zc = std::min(chunk, cd.od - z0);
      int M = static_cast<int>(zc * oh_ow);
      im2col_range(x->value, s, z0, zc, cd, spec, col.data());
      T* dst = &out.data[(static_cast<size_t>(s) * out_spatial + z0 * oh_ow) * cout];
      gemm_impl(false, true, M, cout, K, T(1), col.data(), K, wdata, K, T(0), dst, cout);
      for (int64_t i = 0; i < M; ++i) {
        T* row = &dst[static_cast<size_t>(i) * cout];
        for (int c = 0; c < cout; ++c) row[c] += bias[c];
      }
    }
  });

  bool rg = x->requires_grad || w->requires_grad || b->requires_grad;
  NodeT<T>* node = tape.record(std::move(out), rg, nullptr);
  if (rg) {
    Shape5 xshape = xs;
    node->backward = [node, x, w, b, spec, cd, xshape, K, oh_ow, chunk, cout,
                      out_spatial]() {
      const T* g = node->grad.data();
      const int n_samples = xshape.n;
      const size_t wsize = w->value.data.size();
      std::vector<std::vector<T>> dw_part, db_part;
      if (w->requires_grad)
        dw_part.assign(static_cast<size_t>(n_samples), std::vector<T>(wsize, T(0)));
      if (b->requires_grad)
        db_part.assign(static_cast<size_t>(n_samples),
                       std::vector<T>(static_cast<size_t>(cout), T(0)));

      for_samples(n_samples, [&](int s) {
        auto& col = scratch<T>(0);
        auto& gt = scratch<T>(1);
        auto& dcol = scratch<T>(2);
        for (int z0 = 0; z0 < cd.od; z0 += chunk) {
          int zc = std::min(chunk, cd.od - z0);
          int M = static_cast<int>(zc * oh_ow);
          const T* gsrc = &g[(static_cast<size_t>(s) * out_spatial + z0 * oh_ow) * cout];
          if (b->requires_grad) {
            T* db = db_part[static_cast<size_t>(s)].data();
            for (int64_t i = 0; i < M; ++i) {
              const T* row = &gsrc[static_cast<size_t>(i) * cout];
              for (int c = 0; c < cout; ++c) db[c] += row[c];
            }
          }
          if (w->requires_grad || x->requires_grad) {
            if (w->requires_grad) {
              col.resize(static_cast<size_t>(M) * K);
              im2col_range(x->value, s, z0, zc, cd, spec, col.data());
              gt.resize(static_cast<size_t>(cout) * M);
              transpose_mat(gsrc, M, cout, gt.data());
              gemm_impl(false, false, cout, K, M, T(1), gt.data(), M, col.data(), K, T(1),
                        dw_part[static_cast<size_t>(s)].data(), K);
            }
            if (x->requires_grad) {
              dcol.resize(static_cast<size_t>(M) * K);
              gemm_impl(false, false, M, K, cout, T(1), gsrc, cout, w->value.data.data(), K,
                        T(0), dcol.data(), K);
              col2im_range_add(dcol.data(), xshape, s, z0, zc, cd, spec, x->grad.data());
            }
          }
        }
      });

      // Fixed sample-order reduction keeps results thread-count invariant.
      if (w->requires_grad) {
        T* wg = w->grad.data();
        for (const auto& part : dw_part)
          for (size_t i = 0; i < wsize; ++i) wg[i] += part[i];
      }
      if (b->requires_grad) {
        T* bg = b->grad.data();
        for (const auto& part : db_part)
          for (int c = 0; c < cout; ++c) bg[c] += part[static_cast<size_t>(c)];
      }
    };
  }
  return node;
}

template <typename T>
NodeT<T>* conv3d_transpose(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* w,
                           const std::array<int, 3>& stride) {
  const Shape5& xs = x->value.shape;
  const Shape5& ws = w->value.shape;  // (Cin, Cout, kd, kh, kw)
  if (ws.n != xs.c)
    fail(Err::ShapeMismatch, "conv3d_transpose: weight Cin " + std::to_string(ws.n) +
                                 " vs input C " + std::to_string(xs.c));
  if (stride[0] < 1 || stride[1] < 1 || stride[2] < 1)
    fail(Err::ShapeMismatch, "conv3d_transpose: stride must be >= 1");
  const int cin = ws.n, cout = ws.c, kd = ws.d, kh = ws.h, kw = ws.w;
  const int od = (xs.d - 1) * stride[0] + kd;
  const int oh = (xs.h - 1) * stride[1] + kh;
  const int ow = (xs.w - 1) * stride[2] + kw;

  const int64_t in_spatial = xs.spatial();
  const int Ms = static_cast<int>(in_spatial);
  const int K2 = kd * kh * kw * cout;
  const int64_t out_spatial = static_cast<int64_t>(od) * oh * ow;

  TensorT<T> out = TensorT<T>::zeros({xs.n, cout, od, oh, ow});
  for_samples(xs.n, [&](int s) {
    auto& colo = scratch<T>(0);
    colo.resize(static_cast<size_t>(Ms) * K2);
    const T* xsrc = &x->value.data[static_cast<size_t>(s) * in_spatial * cin];
    gemm_impl(false, false, Ms, K2, cin, T(1), xsrc, cin, w->value.data.data(), K2, T(0),
              colo.data(), K2);
    T* odst = &out.data[static_cast<size_t>(s) * out_spatial * cout];
    const T* src = colo.data();
    for (int z = 0; z < xs.d; ++z)
      for (int y = 0; y < xs.h; ++y)
        for (int xi = 0; xi < xs.w; ++xi)
          for (int kz = 0; kz < kd; ++kz)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx, src += cout) {
                size_t oidx = (((static_cast<size_t>(z * stride[0] + kz)) * oh +
                                (y * stride[1] + ky)) *
                                   ow +
                               (xi * stride[2] + kx)) *
                              cout;
                T* dst = &odst[oidx];
                for (int c = 0; c < cout; ++c) dst[c] += src[c];
              }
  });

  bool rg = x->requires_grad || w->requires_grad;
  NodeT<T>* node = tape.record(std::move(out), rg, nullptr);
  if (rg) {
    Shape5 xshape = xs;
    std::array<int, 3> st = stride;
    node->backward = [node, x, w, xshape, st, cin, cout, kd, kh, kw, od, oh, ow, Ms, K2,
                      in_spatial, out_spatial]() {
      const int n_samples = xshape.n;
      const size_t wsize = w->value.data.size();
      std::vector<std::vector<T>> dw_part;
      if (w->requires_grad)
        dw_part.assign(static_cast<size_t>(n_samples), std::vector<T>(wsize, T(0)));

      for_samples(n_samples, [&](int s) {
        auto& dcol = scratch<T>(0);
        dcol.resize(static_cast<size_t>(Ms) * K2);
        const T* g = &node->grad[static_cast<size_t>(s) * out_spatial * cout];
        T* dst = dcol.data();
        for (int z = 0; z < xshape.d; ++z)
          for (int y = 0; y < xshape.h; ++y)
            for (int xi = 0; xi < xshape.w; ++xi)
              for (int kz = 0; kz < kd; ++kz)
                for (int ky = 0; ky < kh; ++ky)
                  for (int kx = 0; kx < kw; ++kx, dst += cout) {
                    size_t oidx = (((static_cast<size_t>(z * st[0] + kz)) * oh +
                                    (y * st[1] + ky)) *
                                       ow +
                                   (xi * st[2] + kx)) *
                                  cout;
                    copy_chunk(dst, &g[oidx], cout);
                  }
        if (x->requires_grad) {
          T* xg = &x->grad[static_cast<size_t>(s) * in_spatial * cin];
          gemm_impl(false, true, Ms, cin, K2, T(1), dcol.data(), K2, w->value.data.data(),
                    K2, T(1), xg, cin);
        }
        if (w->requires_grad) {
          auto& xt = scratch<T>(1);
          xt.resize(static_cast<size_t>(cin) * Ms);
          const T* xsrc = &x->value.data[static_cast<size_t>(s) * in_spatial * cin];
          transpose_mat(xsrc, Ms, cin, xt.data());
          gemm_impl(false, false, cin, K2, Ms, T(1), xt.data(), Ms, dcol.data(), K2, T(1),
                    dw_part[static_cast<size_t>(s)].data(), K2);
        }
      });
      if (w->requires_grad) {
        T* wg = w->grad.data();
        for (const auto& part : dw_part)
          for (size_t i = 0; i < wsize; ++i) wg[i] += part[i];
      }
    };
  }
  return node;
}

template <typename T>
NodeT<T>* instance_norm(TapeT<T>& tape, NodeT<T>* x, NodeT<T>* gamma, NodeT<T>* beta, T eps) {
  const Shape5& xs = x->value.shape;
  const int C = xs.c;
  if (gamma->value.numel() != C || beta->value.numel() != C)
    fail(Err::ShapeMismatch, "instance_norm: gamma/beta numel != C");
  const int64_t S = xs.spatial();
  if (S < 1) fail(Err::ShapeMismatch, "instance_norm: empty spatial extent");

  auto stats_mu = std::make_shared<std::vector<T>>(static_cast<size_t>(xs.n) * C);
  auto stats_istd = std::make_shared<std::vector<T>>(static_cast<size_t>(xs.n) * C);

  TensorT<T> out = TensorT<T>::zeros(xs);
  const T* gam = gamma->value.data.data();
  const T* bet = beta->value.data.data();
  for_samples(xs.n, [&](int n) {
    std::vector<double> sum(C, 0.0), sq(C, 0.0);
    const T* src = &x->value.data[static_cast<size_t>(n) * S * C];
    for (int64_t i = 0; i < S; ++i) {
      const T* v = &src[i * C];
      for (int c = 0; c < C; ++c) {
        sum[c] += v[c];
        sq[c] += static_cast<double>(v[c]) * v[c];
      }
    }
    T* mu = &(*stats_mu)[static_cast<size_t>(n) * C];
    T* istd = &(*stats_istd)[static_cast<size_t>(n) * C];
    for (int c = 0; c < C; ++c) {
      double m = sum[c] / static_cast<double>(S);
      double var = sq[c] / static_cast<double>(S) - m * m;
      mu[c] = static_cast<T>(m);
      istd[c] = static_cast<T>(1.0 / std::sqrt(std::max(var, 0.0) + static_cast<double>(eps)));
    }
    T* dst = &out.data[static_cast<size_t>(n) * S * C];
    for (int64_t i = 0; i < S; ++i) {
      const T* v = &src[i * C];
      T* o = &dst[i * C];
      for (int c = 0; c < C; ++c) o[c] = (v[c] - mu[c]) * istd[c] * gam[c] + bet[c];
    }
  });

  bool rg = x->requires_grad || gamma->requires_grad || beta->requires_grad;
  NodeT<T>* node = tape.record(std::move(out), rg, nullptr);
  if (rg) {
    node->backward = [node, x, gamma, beta, stats_mu, stats_istd, C, S]() {
      const Shape5& xs = x->value.shape;
      const T* g = node->grad.data();
      const T* gam = gamma->value.data.data();
      std::vector<std::vector<double>> s1_part(static_cast<size_t>(xs.n)),
          s2_part(static_cast<size_t>(xs.n));

      for_samples(xs.n, [&](int n) {
        std::vector<double> s1(C, 0.0), s2(C, 0.0);
        const T* src = &x->value.data[static_cast<size_t>(n) * S * C];
        const T* gn = &g[static_cast<size_t>(n) * S * C];
        const T* mu = &(*stats_mu)[static_cast<size_t>(n) * C];
        const T* istd = &(*stats_istd)[static_cast<size_t>(n) * C];
        for (int64_t i = 0; i < S; ++i) {
          const T* v = &src[i * C];
          const T* gy = &gn[i * C];
          for (int c = 0; c < C; ++c) {
            s1[c] += gy[c];
            s2[c] += static_cast<double>(gy[c]) * (v[c] - mu[c]) * istd[c];
          }
        }
        if (x->requires_grad) {
          T* xg = &x->grad[static_cast<size_t>(n) * S * C];
          double invS = 1.0 / static_cast<double>(S);
          for (int64_t i = 0; i < S; ++i) {
            const T* v = &src[i * C];
            const T* gy = &gn[i * C];
            T* xo = &xg[i * C];
            for (int c = 0; c < C; ++c) {
              double xhat = (v[c] - mu[c]) * istd[c];
              double d = gy[c] - s1[c] * invS - xhat * s2[c] * invS;
              xo[c] += static_cast<T>(gam[c] * istd[c] * d);
            }
          }
        }
        s1_part[static_cast<size_t>(n)] = std::move(s1);
        s2_part[static_cast<size_t>(n)] = std::move(s2);
      });

      if (gamma->requires_grad) {
        T* gg = gamma->grad.data();
        for (const auto& s2 : s2_part)
          for (int c = 0; c < C; ++c) gg[c] += static_cast<T>(s2[static_cast<size_t>(c)]);
      }
      if (beta->requires_grad) {
        T* bg = beta->grad.data();
        for (const auto& s1 : s1_part)
          for (int c = 0; c < C; ++c) bg[c] += static_cast<T>(s1[static_cast<size_t>(c)]);
      }
    };
  }
  return node;
}

template <typename T>
NodeT<T>* leaky_relu(TapeT<T>& tape, NodeT<T>* x, T slope) {
  const int64_t per = x->value.shape.numel() / std::max(x->value.shape.n, 1);
  TensorT<T> out = TensorT<T>::zeros(x->value.shape);
  for_samples(x->value.shape.n, [&](int s) {
    const T* src = &x->value.data[static_cast<size_t>(s) * per];
    T* dst = &out.data[static_cast<size_t>(s) * per];
    for (int64_t i = 0; i < per; ++i) dst[i] = src[i] >= T(0) ? src[i] : src[i] * slope;
  });
  NodeT<T>* node = tape.record(std::move(out), x->requires_grad, nullptr);
  if (x->requires_grad) {
    node->backward = [node, x, slope, per]() {
      const T* g = node->grad.data();
      const T* v = x->value.data.data();
      T* xg = x->grad.data();
      for_samples(x->value.shape.n, [&](int s) {
        for (int64_t i = s * per; i < (s + 1) * per; ++i)
          xg[i] += v[i] >= T(0) ? g[i] : g[i] * slope;
      });
    };
  }
  return node;
}

template <typename T>
NodeT<T>* concat_channels(TapeT<T>& tape, NodeT<T>* a, NodeT<T>* b) {
  const Shape5& as = a->value.shape;
  const Shape5& bs = b->value.shape;
  if (as.n != bs.n || as.d != bs.d || as.h != bs.h || as.w != bs.w)
    fail(Err::ShapeMismatch,
         "concat_channels: non-channel dims differ, " + as.str() + " vs " + bs.str());
  const int ca = as.c, cb = bs.c;
  const int64_t vox_per = as.spatial();
  TensorT<T> out = TensorT<T>::zeros({as.n, ca + cb, as.d, as.h, as.w});
  for_samples(as.n, [&](int s) {
    const T* pa = &a->value.data[static_cast<size_t>(s) * vox_per * ca];
    const T* pb = &b->value.data[static_cast<size_t>(s) * vox_per * cb];
    T* dst = &out.data[static_cast<size_t>(s) * vox_per * (ca + cb)];
    for (int64_t i = 0; i < vox_per; ++i) {
      copy_chunk(&dst[i * (ca + cb)], &pa[i * ca], ca);
      copy_chunk(&dst[i * (ca + cb) + ca], &pb[i * cb], cb);
    }
  });
  bool rg = a->requires_grad || b->requires_grad;
  NodeT<T>* node = tape.record(std::move(out), rg, nullptr);
  if (rg) {
    node->backward = [node, a, b, ca, cb, vox_per]() {
      const Shape5& as = a->value.shape;
      const T* g = node->grad.data();
      for_samples(as.n, [&](int s) {
        const T* row = &g[static_cast<size_t>(s) * vox_per * (ca + cb)];
        if (a->requires_grad) {
          T* ag = &a->grad[static_cast<size_t>(s) * vox_per * ca];
          for (int64_t i = 0; i < vox_per; ++i)
            for (int c = 0; c < ca; ++c) ag[i * ca + c] += row[i * (ca + cb) + c];
        }
        if (b->requires_grad) {
          T* bg = &b->grad[static_cast<size_t>(s) * vox_per * cb];
          for (int64_t i = 0; i < vox_per; ++i)
            for (int c = 0; c < cb; ++c) bg[i * cb + c] += row[i * (ca + cb) + ca + c];
        }
      });
    };
  }
  return node;
}

template <typename T>
NodeT<T>* softmax_channels(TapeT<T>& tape, NodeT<T>* x) {
  const Shape5& xs = x->value.shape;
  const int C = xs.c;
  if (C < 2) fail(Err::ShapeMismatch, "softmax_channels: needs C >= 2");
  const int64_t vox_per = xs.spatial();
  TensorT<T> out = TensorT<T>::zeros(xs);
  for_samples(xs.n, [&](int s) {
    const T* src = &x->value.data[static_cast<size_t>(s) * vox_per * C];
    T* dst = &out.data[static_cast<size_t>(s) * vox_per * C];
    for (int64_t i = 0; i < vox_per; ++i) {
      const T* v = &src[i * C];
      T* o = &dst[i * C];
      T mx = v[0];
      for (int c = 1; c < C; ++c) mx = std::max(mx, v[c]);
      double sum = 0;
      for (int c = 0; c < C; ++c) {
        double e = std::exp(static_cast<double>(v[c] - mx));
        o[c] = static_cast<T>(e);
        sum += e;
      }
      double inv = 1.0 / sum;
      for (int c = 0; c < C; ++c) o[c] = static_cast<T>(o[c] * inv);
    }
  });
  NodeT<T>* node = tape.record(std::move(out), x->requires_grad, nullptr);
  if (x->requires_grad) {
    node->backward = [node, x, C, vox_per]() {
      const Shape5& xs = x->value.shape;
      const T* g = node->grad.data();
      const T* y = node->value.data.data();
      T* xg = x->grad.data();
      for_samples(xs.n, [&](int s) {
        for (int64_t i = s * vox_per; i < (s + 1) * vox_per; ++i) {
          const T* yr = &y[i * C];
          const T* gr = &g[i * C];
          T* xr = &xg[i * C];
          double dot = 0;
          for (int c = 0; c < C; ++c) dot += static_cast<double>(gr[c]) * yr[c];
          for (int c = 0; c < C; ++c) xr[c] += static_cast<T>(yr[c] * (gr[c] - dot));
        }
      });
    };
  }
  return node;
}

template <typename T>
NodeT<T>* select_channel(TapeT<T>& tape, NodeT<T>* x, int channel) {
  const Shape5& xs = x->value.shape;
  if (channel < 0 || channel >= xs.c)
    fail(Err::ShapeMismatch, "select_channel: channel out of range");
  const int C = xs.c;
  const int64_t vox = static_cast<int64_t>(xs.n) * xs.spatial();
  TensorT<T> out = TensorT<T>::zeros({xs.n, 1, xs.d, xs.h, xs.w});
  for (int64_t i = 0; i < vox; ++i)
    out.data[i] = x->value.data[static_cast<size_t>(i) * C + channel];
  NodeT<T>* node = tape.record(std::move(out), x->requires_grad, nullptr);
  if (x->requires_grad) {
    node->backward = [node, x, C, channel, vox]() {
      const T* g = node->grad.data();
      T* xg = x->grad.data();
      for (int64_t i = 0; i < vox; ++i) xg[static_cast<size_t>(i) * C + channel] += g[i];
    };
  }
  return node;
}

template <typename T>
NodeT<T>* add(TapeT<T>& tape, NodeT<T>* a, NodeT<T>* b) {
  check_same_shape<T>(a->value.shape, b->value.shape, "add");
  TensorT<T> out = a->value;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += b->value.data[i];
  bool rg = a->requires_grad || b->requires_grad;
  NodeT<T>* node = tape.record(std::move(out), rg, nullptr);
  if (rg) {
    node->backward = [node, a, b]() {
      const T* g = node->grad.data();
      size_t n = node->value.data.size();
      if (a->requires_grad) {
        T* ag = a->grad.data();
        for (size_t i = 0; i < n; ++i) ag[i] += g[i];
      }
      if (b->requires_grad) {
        T* bg = b->grad.data();
        for (size_t i = 0; i < n; ++i) bg[i] += g[i];
      }
    };
  }
  return node;
}

template <typename T>
NodeT<T>* scale(TapeT<T>& tape, NodeT<T>* a, T s) {
  TensorT<T> out = a->value;
  for (auto& v : out.data) v *= s;
  NodeT<T>* node = tape.record(std::move(out), a->requires_grad, nullptr);
  if (a->requires_grad) {
    node->backward = [node, a, s]() {
      const T* g = node->grad.data();
      T* ag = a->grad.data();
      size_t n = node->value.data.size();
      for (size_t i = 0; i < n; ++i) ag[i] += g[i] * s;
    };
  }
  return node;
}

template <typename T>
NodeT<T>* weighted_sum(TapeT<T>& tape, NodeT<T>* x, const TensorT<T>& weights) {
  check_same_shape<T>(x->value.shape, weights.shape, "weighted_sum");
  double acc = 0;
  for (size_t i = 0; i < weights.data.size(); ++i)
    acc += static_cast<double>(x->value.data[i]) * weights.data[i];
  TensorT<T> out = TensorT<T>::full({1, 1, 1, 1, 1}, static_cast<T>(acc));
  NodeT<T>* node = tape.record(std::move(out), x->requires_grad, nullptr);
  if (x->requires_grad) {
    TensorT<T> w = weights;
    node->backward = [node, x, w = std::move(w)]() {
      T g = node->grad[0];
      T* xg = x->grad.data();
      for (size_t i = 0; i < w.data.size(); ++i) xg[i] += g * w.data[i];
    };
  }
  return node;
}

template <typename T>
NodeT<T>* bce_loss(TapeT<T>& tape, NodeT<T>* p, const TensorT<T>& y) {
  check_same_shape<T>(p->value.shape, y.shape, "bce_loss");
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  const size_t n = p->value.data.size();
  double acc = 0;
  for (size_t i = 0; i < n; ++i) {
    double pc = std::clamp(p->value.data[i], lo, hi);
    double yv = y.data[i];
    acc -= yv * std::log(pc) + (1.0 - yv) * std::log(1.0 - pc);
  }
  TensorT<T> out = TensorT<T>::full({1, 1, 1, 1, 1}, static_cast<T>(acc / n));
  NodeT<T>* node = tape.record(std::move(out), p->requires_grad, nullptr);
  if (p->requires_grad) {
    TensorT<T> yc = y;
    node->backward = [node, p, yc = std::move(yc), lo, hi, n]() {
      T g = node->grad[0];
      T* pg = p->grad.data();
      double invn = 1.0 / static_cast<double>(n);
      for (size_t i = 0; i < n; ++i) {
        T pv = p->value.data[i];
        if (pv <= lo || pv >= hi) continue;  // clamped region, zero slope
        double yv = yc.data[i];
        pg[i] += static_cast<T>(g * invn * ((1.0 - yv) / (1.0 - pv) - yv / pv));
      }
    };
  }
  return node;
}

template <typename T>
NodeT<T>* soft_dice_loss(TapeT<T>& tape, NodeT<T>* p, const TensorT<T>& y, T smooth) {
  check_same_shape<T>(p->value.shape, y.shape, "soft_dice_loss");
  const size_t n = p->value.data.size();
  double sp = 0, sy = 0, spy = 0;
  for (size_t i = 0; i < n; ++i) {
    sp += p->value.data[i];
    sy += y.data[i];
    spy += static_cast<double>(p->value.data[i]) * y.data[i];
  }
  double denom = sp + sy + smooth;
  double loss = 1.0 - (2.0 * spy + smooth) / denom;
  TensorT<T> out = TensorT<T>::full({1, 1, 1, 1, 1}, static_cast<T>(loss));
  NodeT<T>* node = tape.record(std::move(out), p->requires_grad, nullptr);
  if (p->requires_grad) {
    TensorT<T> yc = y;
    node->backward = [node, p, yc = std::move(yc), spy, denom, smooth, n]() {
      T g = node->grad[0];
      T* pg = p->grad.data();
      double num = 2.0 * spy + smooth;
      double d2 = denom * denom;
      for (size_t i = 0; i < n; ++i) {
        double dy = -(2.0 * yc.data[i] * denom - num) / d2;
        pg[i] += static_cast<T>(g * dy);
      }
    };
  }
  return node;
}

template <typename T>
CombinedLoss<T> combined_loss(TapeT<T>& tape, const std::vector<NodeT<T>*>& head_probs,
                              const std::vector<TensorT<T>>& targets, T smooth) {
  if (head_probs.empty() || head_probs.size() != targets.size())
    fail(Err::ShapeMismatch, "combined_loss: need one target per head");
  CombinedLoss<T> out;
  NodeT<T>* sum = nullptr;
  for (size_t i = 0; i < head_probs.size(); ++i) {
    NodeT<T>* b = bce_loss(tape, head_probs[i], targets[i]);
    NodeT<T>* d = soft_dice_loss(tape, head_probs[i], targets[i], smooth);
    out.bce.push_back(b);
    out.dice.push_back(d);
    NodeT<T>* label = add(tape, b, d);
    sum = sum ? add(tape, sum, label) : label;
  }
  out.total = scale(tape, sum, T(1) / static_cast<T>(head_probs.size()));
  return out;
}

AdamState::AdamState(const std::vector<int64_t>& param_sizes, const AdamConfig& cfg)
    : cfg_(cfg) {
  for (int64_t s : param_sizes) {
    m_.emplace_back(static_cast<size_t>(s), 0.0f);
    v_.emplace_back(static_cast<size_t>(s), 0.0f);
  }
}

void AdamState::step(const std::vector<Tensor5*>& params,
                     const std::vector<const float*>& grads) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    fail(Err::ShapeMismatch, "adam_step: parameter list size mismatch");
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (size_t p = 0; p < params.size(); ++p) {
    if (params[p]->data.size() != m_[p].size())
      fail(Err::ShapeMismatch, "adam_step: parameter " + std::to_string(p) + " size changed");
    float* w = params[p]->data.data();
    const float* g = grads[p];
    float* m = m_[p].data();
    float* v = v_[p].data();
    for (size_t i = 0; i < m_[p].size(); ++i) {
      double gi = g[i];
      double mi = b1 * m[i] + (1.0 - b1) * gi;
      double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      double mhat = mi / bc1;
      double vhat = vi / bc2;
      w[i] = static_cast<float>(w[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
    }
  }
}

GradCheckReport gradcheck(const GraphBuilder& build, const std::vector<Tensor5d>& inputs,
                          double h, double tol) {
  GradCheckReport report;

  Taped tape;
  std::vector<NodeT<double>*> nodes;
  for (const auto& in : inputs) nodes.push_back(tape.leaf(in, true));
  NodeT<double>* loss = build(tape, nodes);
  if (loss->value.numel() != 1) fail(Err::ShapeMismatch, "gradcheck: objective must be scalar");
  tape.backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto* n : nodes) analytic.push_back(n->grad);

  auto eval = [&build](const std::vector<Tensor5d>& ins) {
    Taped t;
    std::vector<NodeT<double>*> ns;
    for (const auto& in : ins) ns.push_back(t.leaf(in, false));
    return build(t, ns)->value.data[0];
  };

  std::vector<Tensor5d> work = inputs;
  for (size_t ti = 0; ti < work.size(); ++ti) {
    for (size_t j = 0; j < work[ti].data.size(); ++j) {
      double orig = work[ti].data[j];
      work[ti].data[j] = orig + h;
      double up = eval(work);
      work[ti].data[j] = orig - h;
      double down = eval(work);
      work[ti].data[j] = orig;
      double fd = (up - down) / (2.0 * h);
      double an = analytic[ti][j];
      double rel = std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      report.max_rel_err = std::max(report.max_rel_err, rel);
      if (rel > tol)
        report.violations.push_back(
            {static_cast<int>(ti), static_cast<int64_t>(j), an, fd, rel});
    }
  }
  return report;
}

// Explicit instantiations for the two scalar types.
template class TapeT<float>;
template class TapeT<double>;

#define FUSESEG_INSTANTIATE(T)                                                              \
  template NodeT<T>* conv3d<T>(TapeT<T>&, NodeT<T>*, NodeT<T>*, NodeT<T>*, const ConvSpec&); \
  template NodeT<T>* conv3d_transpose<T>(TapeT<T>&, NodeT<T>*, NodeT<T>*,                  \
                                         const std::array<int, 3>&);                       \
  template NodeT<T>* instance_norm<T>(TapeT<T>&, NodeT<T>*, NodeT<T>*, NodeT<T>*, T);      \
  template NodeT<T>* leaky_relu<T>(TapeT<T>&, NodeT<T>*, T);                               \
  template NodeT<T>* concat_channels<T>(TapeT<T>&, NodeT<T>*, NodeT<T>*);                  \
  template NodeT<T>* softmax_channels<T>(TapeT<T>&, NodeT<T>*);                            \
  template NodeT<T>* select_channel<T>(TapeT<T>&, NodeT<T>*, int);                         \
  template NodeT<T>* add<T>(TapeT<T>&, NodeT<T>*, NodeT<T>*);                              \
  template NodeT<T>* scale<T>(TapeT<T>&, NodeT<T>*, T);                                    \
  template NodeT<T>* weighted_sum<T>(TapeT<T>&, NodeT<T>*, const TensorT<T>&);             \
  template NodeT<T>* bce_loss<T>(TapeT<T>&, NodeT<T>*, const TensorT<T>&);                 \
  template NodeT<T>* soft_dice_loss<T>(TapeT<T>&, NodeT<T>*, const TensorT<T>&, T);        \
  template CombinedLoss<T> combined_loss<T>(TapeT<T>&, const std::vector<NodeT<T>*>&,      \
                                            const std::vector<TensorT<T>>&, T);

FUSESEG_INSTANTIATE(float)
FUSESEG_INSTANTIATE(double)
#undef FUSESEG_INSTANTIATE

}  // namespace fuseseg::nn
