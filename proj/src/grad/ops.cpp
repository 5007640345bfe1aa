#include "dudotrans/grad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>

namespace dudotrans::grad {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<Mat<T>>;
template <typename T>
using CMapM = Eigen::Map<const Mat<T>>;
template <typename T>
using NodeP = std::shared_ptr<Node<T>>;
using Index = std::vector<std::uint32_t>;

template <typename T>
bool wants_grad(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t && t->defined() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T, typename Rule>
void record(Tensor<T>& out, Rule&& rule) {
  out.node().requires_grad = true;
  out.node().on_tape = true;
  Tape<T>::active()->record(std::forward<Rule>(rule));
}

template <typename T>
bool needs(const NodeP<T>& n) {
  return n && n->requires_grad;
}

[[noreturn]] void shape_fail(const std::string& op, const std::string& what, std::initializer_list<Shape> shapes) {
  std::string msg = op + ": " + what + " (shapes";
  for (const Shape& s : shapes) msg += " " + shape_str(s);
  throw ShapeError(msg + ")");
}

void require_rank(const std::string& op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) shape_fail(op, "expected rank " + std::to_string(rank), {s});
}

// out[i] = x[index[i]]; backward scatters gradients back through the map.
template <typename T>
Tensor<T> gather_op(const Tensor<T>& x, Shape out_shape, std::shared_ptr<const Index> index) {
  Tensor<T> out(std::move(out_shape));
  const T* xs = x.data().data();
  T* os = out.data().data();
  for (std::size_t i = 0; i < index->size(); ++i) os[i] = xs[(*index)[i]];
  if (wants_grad<T>({&x})) {
    record(out, [xn = x.shared(), on = out.shared(), index] {
      if (on->grad.empty() || !needs(xn)) return;
      T* gx = xn->grad_buffer();
      const T* go = on->grad.data();
      for (std::size_t i = 0; i < index->size(); ++i) gx[(*index)[i]] += go[i];
    });
  }
  return out;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

Index partition_index(std::size_t B, std::size_t H, std::size_t W, std::size_t C, std::size_t w) {
  const std::size_t nh = H / w, nw = W / w;
  Index idx(B * H * W * C);
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t wi = 0; wi < nh; ++wi)
      for (std::size_t wj = 0; wj < nw; ++wj)
        for (std::size_t ty = 0; ty < w; ++ty)
          for (std::size_t tx = 0; tx < w; ++tx) {
            const std::size_t base = ((b * H + wi * w + ty) * W + wj * w + tx) * C;
            for (std::size_t c = 0; c < C; ++c) idx[o++] = static_cast<std::uint32_t>(base + c);
          }
  return idx;
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() && !is_suffix(b.shape(), a.shape())) {
    shape_fail("add", "second operand must equal or be a trailing suffix of the first", {a.shape(), b.shape()});
  }
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel(), m = b.numel();
  const T* as = a.data().data();
  const T* bs = b.data().data();
  T* os = out.data().data();
  for (std::size_t o = 0; o < n; o += m)
    for (std::size_t j = 0; j < m; ++j) os[o + j] = as[o + j] + bs[j];
  if (wants_grad<T>({&a, &b})) {
    record(out, [an = a.shared(), bn = b.shared(), on = out.shared(), n, m] {
      if (on->grad.empty()) return;
      const T* go = on->grad.data();
      if (needs(an)) {
        T* ga = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (needs(bn)) {
        T* gb = bn->grad_buffer();
        for (std::size_t o = 0; o < n; o += m)
          for (std::size_t j = 0; j < m; ++j) gb[j] += go[o + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("sub", "shapes differ", {a.shape(), b.shape()});
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (wants_grad<T>({&a, &b})) {
    record(out, [an = a.shared(), bn = b.shared(), on = out.shared(), n] {
      if (on->grad.empty()) return;
      const T* go = on->grad.data();
      if (needs(an)) {
        T* ga = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (needs(bn)) {
        T* gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("mul", "shapes differ", {a.shape(), b.shape()});
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (wants_grad<T>({&a, &b})) {
    record(out, [an = a.shared(), bn = b.shared(), on = out.shared(), n] {
      if (on->grad.empty()) return;
      const T* go = on->grad.data();
      if (needs(an)) {
        T* ga = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * bn->data[i];
      }
      if (needs(bn)) {
        T* gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * an->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  const std::size_t n = a.numel();
  for (std::size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * factor;
  if (wants_grad<T>({&a})) {
    record(out, [an = a.shared(), on = out.shared(), n, factor] {
      if (on->grad.empty() || !needs(an)) return;
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) ga[i] += on->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
  if (wants_grad<T>({&a})) {
    record(out, [an = a.shared(), on = out.shared()] {
      if (on->grad.empty() || !needs(an)) return;
      T* ga = an->grad_buffer();
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += on->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail("mse", "shapes differ", {a.shape(), b.shape()});
  const std::size_t n = a.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
    acc += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (wants_grad<T>({&a, &b})) {
    record(out, [an = a.shared(), bn = b.shared(), on = out.shared(), n] {
      if (on->grad.empty()) return;
      const T k = T(2) * on->grad[0] / static_cast<T>(n);
      if (needs(an)) {
        T* ga = an->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) ga[i] += k * (an->data[i] - bn->data[i]);
      }
      if (needs(bn)) {
        T* gb = bn->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) gb[i] -= k * (an->data[i] - bn->data[i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) shape_fail("matmul", "operands need rank >= 2", {a.shape(), b.shape()});
  const std::size_t M = a.dim(-2), K = a.dim(-1);
  const std::size_t Kb = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t N = transpose_b ? b.dim(-2) : b.dim(-1);
  if (K != Kb) shape_fail("matmul", "inner dimensions differ", {a.shape(), b.shape()});
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  std::size_t a_step = M * K, b_step = K * N;
  if (batch_a == batch_b) {
    batch = batch_a;
  } else if (batch_b.empty()) {
    batch = batch_a;
    b_step = 0;
  } else if (batch_a.empty()) {
    batch = batch_b;
    a_step = 0;
  } else {
    shape_fail("matmul", "batch dimensions are not broadcastable", {a.shape(), b.shape()});
  }
  const std::size_t batches = numel(batch);
  Shape out_shape = batch;
  out_shape.push_back(M);
  out_shape.push_back(N);
  Tensor<T> out(out_shape);

  auto bmat = [=](const T* p) { return CMapM<T>(p, transpose_b ? N : K, transpose_b ? K : N); };
  for (std::size_t i = 0; i < batches; ++i) {
    CMapM<T> am(a.data().data() + i * a_step, M, K);
    MapM<T> cm(out.data().data() + i * M * N, M, N);
    if (transpose_b) {
      cm.noalias() = am * bmat(b.data().data() + i * b_step).transpose();
    } else {
      cm.noalias() = am * bmat(b.data().data() + i * b_step);
    }
  }
  if (wants_grad<T>({&a, &b})) {
    record(out, [an = a.shared(), bn = b.shared(), on = out.shared(), M, K, N, batches, a_step, b_step, transpose_b,
                 bmat] {
      if (on->grad.empty()) return;
      for (std::size_t i = 0; i < batches; ++i) {
        CMapM<T> gc(on->grad.data() + i * M * N, M, N);
        const auto bm = bmat(bn->data.data() + i * b_step);
        if (needs(an)) {
          MapM<T> ga(an->grad_buffer() + i * a_step, M, K);
          if (transpose_b) {
            ga.noalias() += gc * bm;
          } else {
            ga.noalias() += gc * bm.transpose();
          }
        }
        if (needs(bn)) {
          CMapM<T> am(an->data.data() + i * a_step, M, K);
          if (transpose_b) {
            MapM<T> gb(bn->grad_buffer() + i * b_step, N, K);
            gb.noalias() += gc.transpose() * am;
          } else {
            MapM<T> gb(bn->grad_buffer() + i * b_step, K, N);
            gb.noalias() += am.transpose() * gc;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank("linear", w.shape(), 2);
  const std::size_t in = w.dim(1), outc = w.dim(0);
  if (x.rank() < 1 || x.dim(-1) != in) shape_fail("linear", "input features differ", {x.shape(), w.shape()});
  if (bias.defined() && bias.shape() != Shape{outc}) {
    shape_fail("linear", "bias must be [out]", {w.shape(), bias.shape()});
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outc;
  Tensor<T> out(out_shape);
  MapM<T> ym(out.data().data(), rows, outc);
  ym.noalias() = CMapM<T>(x.data().data(), rows, in) * CMapM<T>(w.data().data(), outc, in).transpose();
  if (bias.defined()) {
    ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), outc);
  }
  if (wants_grad<T>({&x, &w, &bias})) {
    record(out, [xn = x.shared(), wn = w.shared(), bn = bias.shared(), on = out.shared(), rows, in, outc] {
      if (on->grad.empty()) return;
      CMapM<T> gy(on->grad.data(), rows, outc);
      if (needs(xn)) {
        MapM<T>(xn->grad_buffer(), rows, in).noalias() += gy * CMapM<T>(wn->data.data(), outc, in);
      }
      if (needs(wn)) {
        MapM<T>(wn->grad_buffer(), outc, in).noalias() += gy.transpose() * CMapM<T>(xn->data.data(), rows, in);
      }
      if (needs(bn)) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bn->grad_buffer(), outc) += gy.colwise().sum();
      }
    });
  }
  return out;
}

namespace {

// cols[(ci k + ky) k + kx, y W + x] = x[ci, y + ky - pad, x + kx - pad] or 0.
template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* cols) {
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = cols + ((c * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          T* dst = row + y * W;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(dst, dst + W, T(0));
            continue;
          }
          const T* src = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t xx = 0; xx < W; ++xx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx + kx) - pad;
            dst[xx] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, std::size_t C, std::size_t H, std::size_t W, std::size_t k, T* x) {
  const auto pad = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const std::size_t hw = H * W;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = cols + ((c * k + ky) * k + kx) * hw;
        for (std::size_t y = 0; y < H; ++y) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          T* dst = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t xx = 0; xx < W; ++xx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(xx + kx) - pad;
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) dst[ix] += row[y * W + xx];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank("conv2d", x.shape(), 4);
  require_rank("conv2d", w.shape(), 4);
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != Ci) shape_fail("conv2d", "input channels differ", {x.shape(), w.shape()});
  if (w.dim(3) != k || k % 2 == 0) shape_fail("conv2d", "kernel must be square with odd size", {w.shape()});
  if (bias.defined() && bias.shape() != Shape{Co}) shape_fail("conv2d", "bias must be [C_out]", {w.shape(), bias.shape()});
  const std::size_t hw = H * W, ckk = Ci * k * k;
  Tensor<T> out({B, Co, H, W});
  Buffer<T> cols(ckk * hw);
  CMapM<T> wm(w.data().data(), Co, ckk);
  for (std::size_t b = 0; b < B; ++b) {
    im2col(x.data().data() + b * Ci * hw, Ci, H, W, k, cols.data());
    MapM<T> om(out.data().data() + b * Co * hw, Co, hw);
    om.noalias() = wm * CMapM<T>(cols.data(), ckk, hw);
    if (bias.defined()) {
      om.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data().data(), Co);
    }
  }
  if (wants_grad<T>({&x, &w, &bias})) {
    record(out, [xn = x.shared(), wn = w.shared(), bn = bias.shared(), on = out.shared(), B, Ci, H, W, Co, k, hw,
                 ckk] {
      if (on->grad.empty()) return;
      Buffer<T> cols(ckk * hw);
      CMapM<T> wm(wn->data.data(), Co, ckk);
      for (std::size_t b = 0; b < B; ++b) {
        CMapM<T> go(on->grad.data() + b * Co * hw, Co, hw);
        if (needs(bn)) {
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(bn->grad_buffer(), Co) += go.rowwise().sum();
        }
        if (needs(wn)) {
          im2col(xn->data.data() + b * Ci * hw, Ci, H, W, k, cols.data());
          MapM<T>(wn->grad_buffer(), Co, ckk).noalias() += go * CMapM<T>(cols.data(), ckk, hw).transpose();
        }
        if (needs(xn)) {
          MapM<T>(cols.data(), ckk, hw).noalias() = wm.transpose() * go;
          col2im_add(cols.data(), Ci, H, W, k, xn->grad_buffer() + b * Ci * hw);
        }
      }
    });
  }
  return out;
}

namespace {

// patches[(i w + j), (ci p + ky) p + kx] <-> x[ci, i p + ky, j p + kx]
template <typename T>
void extract_patches(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t p, T* patches) {
  const std::size_t h = H / p, w = W / p, cpp = C * p * p;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      T* row = patches + (i * w + j) * cpp;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < p; ++ky)
          for (std::size_t kx = 0; kx < p; ++kx) row[(c * p + ky) * p + kx] = x[(c * H + i * p + ky) * W + j * p + kx];
    }
}

template <typename T>
void scatter_patches_add(const T* patches, std::size_t C, std::size_t H, std::size_t W, std::size_t p, T* x) {
  const std::size_t h = H / p, w = W / p, cpp = C * p * p;
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const T* row = patches + (i * w + j) * cpp;
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < p; ++ky)
          for (std::size_t kx = 0; kx < p; ++kx) x[(c * H + i * p + ky) * W + j * p + kx] += row[(c * p + ky) * p + kx];
    }
}

}  // namespace

template <typename T>
Tensor<T> patch_embed(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank("patch_embed", x.shape(), 4);
  require_rank("patch_embed", w.shape(), 4);
  const std::size_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t Co = w.dim(0), p = w.dim(2);
  if (w.dim(1) != Ci || w.dim(3) != p) shape_fail("patch_embed", "weight must be [C_out, C_in, p, p]", {x.shape(), w.shape()});
  if (H % p || W % p) shape_fail("patch_embed", "spatial size must be divisible by the patch size; pad first", {x.shape(), w.shape()});
  if (bias.defined() && bias.shape() != Shape{Co}) shape_fail("patch_embed", "bias must be [C_out]", {bias.shape()});
  const std::size_t h = H / p, wd = W / p, tokens = h * wd, cpp = Ci * p * p;
  Tensor<T> out({B, h, wd, Co});
  Buffer<T> patches(tokens * cpp);
  CMapM<T> wm(w.data().data(), Co, cpp);
  for (std::size_t b = 0; b < B; ++b) {
    extract_patches(x.data().data() + b * Ci * H * W, Ci, H, W, p, patches.data());
    MapM<T> om(out.data().data() + b * tokens * Co, tokens, Co);
    om.noalias() = CMapM<T>(patches.data(), tokens, cpp) * wm.transpose();
    if (bias.defined()) om.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), Co);
  }
  if (wants_grad<T>({&x, &w, &bias})) {
    record(out, [xn = x.shared(), wn = w.shared(), bn = bias.shared(), on = out.shared(), B, Ci, H, W, Co, p, tokens,
                 cpp] {
      if (on->grad.empty()) return;
      Buffer<T> patches(tokens * cpp);
      for (std::size_t b = 0; b < B; ++b) {
        CMapM<T> go(on->grad.data() + b * tokens * Co, tokens, Co);
        if (needs(bn)) Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bn->grad_buffer(), Co) += go.colwise().sum();
        if (needs(wn)) {
          extract_patches(xn->data.data() + b * Ci * H * W, Ci, H, W, p, patches.data());
          MapM<T>(wn->grad_buffer(), Co, cpp).noalias() += go.transpose() * CMapM<T>(patches.data(), tokens, cpp);
        }
        if (needs(xn)) {
          MapM<T>(patches.data(), tokens, cpp).noalias() = go * CMapM<T>(wn->data.data(), Co, cpp);
          scatter_patches_add(patches.data(), Ci, H, W, p, xn->grad_buffer() + b * Ci * H * W);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> patch_unembed(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require_rank("patch_unembed", x.shape(), 4);
  require_rank("patch_unembed", w.shape(), 4);
  const std::size_t B = x.dim(0), h = x.dim(1), wd = x.dim(2), Ci = x.dim(3);
  const std::size_t Co = w.dim(1), p = w.dim(2);
  if (w.dim(0) != Ci || w.dim(3) != p) shape_fail("patch_unembed", "weight must be [C_in, C_out, p, p]", {x.shape(), w.shape()});
  if (bias.defined() && bias.shape() != Shape{Co}) shape_fail("patch_unembed", "bias must be [C_out]", {bias.shape()});
  const std::size_t H = h * p, W = wd * p, tokens = h * wd, cpp = Co * p * p;
  Tensor<T> out({B, Co, H, W});
  Buffer<T> patches(tokens * cpp);
  CMapM<T> wm(w.data().data(), Ci, cpp);
  for (std::size_t b = 0; b < B; ++b) {
    MapM<T>(patches.data(), tokens, cpp).noalias() = CMapM<T>(x.data().data() + b * tokens * Ci, tokens, Ci) * wm;
    T* ob = out.data().data() + b * Co * H * W;
    if (bias.defined()) {
      for (std::size_t c = 0; c < Co; ++c) std::fill(ob + c * H * W, ob + (c + 1) * H * W, bias.data()[c]);
    }
    scatter_patches_add(patches.data(), Co, H, W, p, ob);
  }
  if (wants_grad<T>({&x, &w, &bias})) {
    record(out, [xn = x.shared(), wn = w.shared(), bn = bias.shared(), on = out.shared(), B, Ci, H, W, Co, p, tokens,
                 cpp] {
      if (on->grad.empty()) return;
      Buffer<T> patches(tokens * cpp);
      for (std::size_t b = 0; b < B; ++b) {
        const T* gob = on->grad.data() + b * Co * H * W;
        if (needs(bn)) {
          T* gb = bn->grad_buffer();
          for (std::size_t c = 0; c < Co; ++c) {
            T acc = 0;
            for (std::size_t i = 0; i < H * W; ++i) acc += gob[c * H * W + i];
            gb[c] += acc;
          }
        }
        if (!needs(wn) && !needs(xn)) continue;
        extract_patches(gob, Co, H, W, p, patches.data());
        CMapM<T> gz(patches.data(), tokens, cpp);
        if (needs(wn)) {
          MapM<T>(wn->grad_buffer(), Ci, cpp).noalias() +=
              CMapM<T>(xn->data.data() + b * tokens * Ci, tokens, Ci).transpose() * gz;
        }
        if (needs(xn)) {
          MapM<T>(xn->grad_buffer() + b * tokens * Ci, tokens, Ci).noalias() +=
              gz * CMapM<T>(wn->data.data(), Ci, cpp).transpose();
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.rank() < 1) shape_fail("layer_norm", "input needs rank >= 1", {x.shape()});
  const std::size_t D = x.dim(-1);
  if (gamma.shape() != Shape{D} || beta.shape() != Shape{D}) {
    shape_fail("layer_norm", "gamma and beta must be [D]", {x.shape(), gamma.shape(), beta.shape()});
  }
  if (!(eps > T(0))) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / D;
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto rstd = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * D;
    double mu = 0.0;
    for (std::size_t i = 0; i < D; ++i) mu += xr[i];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (std::size_t i = 0; i < D; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<double>(D);
    const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*rstd)[r] = static_cast<T>(rs);
    for (std::size_t i = 0; i < D; ++i) {
      const T xh = static_cast<T>((xr[i] - mu) * rs);
      (*xhat)[r * D + i] = xh;
      out.data()[r * D + i] = xh * gamma.data()[i] + beta.data()[i];
    }
  }
  if (wants_grad<T>({&x, &gamma, &beta})) {
    record(out, [xn = x.shared(), gn = gamma.shared(), bn = beta.shared(), on = out.shared(), xhat, rstd, rows, D] {
      if (on->grad.empty()) return;
      const T* go = on->grad.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* gr = go + r * D;
        const T* xh = xhat->data() + r * D;
        if (needs(gn)) {
          T* gg = gn->grad_buffer();
          for (std::size_t i = 0; i < D; ++i) gg[i] += gr[i] * xh[i];
        }
        if (needs(bn)) {
          T* gb = bn->grad_buffer();
          for (std::size_t i = 0; i < D; ++i) gb[i] += gr[i];
        }
        if (needs(xn)) {
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t i = 0; i < D; ++i) {
            const double d = static_cast<double>(gr[i]) * gn->data[i];
            m1 += d;
            m2 += d * xh[i];
          }
          m1 /= static_cast<double>(D);
          m2 /= static_cast<double>(D);
          T* gx = xn->grad_buffer() + r * D;
          for (std::size_t i = 0; i < D; ++i) {
            const double d = static_cast<double>(gr[i]) * gn->data[i];
            gx[i] += static_cast<T>((*rstd)[r] * (d - m1 - xh[i] * m2));
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() < 1) shape_fail("softmax", "input needs rank >= 1", {x.shape()});
  const std::size_t D = x.dim(-1), rows = x.numel() / D;
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * D;
    T* yr = out.data().data() + r * D;
    const T mx = *std::max_element(xr, xr + D);
    T total = 0;
    for (std::size_t i = 0; i < D; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      total += yr[i];
    }
    for (std::size_t i = 0; i < D; ++i) yr[i] /= total;
  }
  if (wants_grad<T>({&x})) {
    record(out, [xn = x.shared(), on = out.shared(), rows, D] {
      if (on->grad.empty() || !needs(xn)) return;
      T* gx = xn->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* y = on->data.data() + r * D;
        const T* g = on->grad.data() + r * D;
        T dotv = 0;
        for (std::size_t i = 0; i < D; ++i) dotv += g[i] * y[i];
        for (std::size_t i = 0; i < D; ++i) gx[r * D + i] += y[i] * (g[i] - dotv);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  Tensor<T> out(x.shape());
  const std::size_t n = x.numel();
  for (std::size_t i = 0; i < n; ++i) {
    const T v = x.data()[i];
    out.data()[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  }
  if (wants_grad<T>({&x})) {
    record(out, [xn = x.shared(), on = out.shared(), n] {
      if (on->grad.empty() || !needs(xn)) return;
      T* gx = xn->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) {
        const T v = xn->data[i];
        const T d = T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v);
        gx[i] += on->grad[i] * d;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) shape_fail("reshape", "element counts differ", {x.shape(), shape});
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  if (wants_grad<T>({&x})) {
    record(out, [xn = x.shared(), on = out.shared()] {
      if (on->grad.empty() || !needs(xn)) return;
      T* gx = xn->grad_buffer();
      for (std::size_t i = 0; i < on->grad.size(); ++i) gx[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) shape_fail("permute", "permutation length differs from rank", {x.shape()});
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) shape_fail("permute", "invalid permutation", {x.shape()});
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.shape()[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  auto index = std::make_shared<Index>(x.numel());
  std::vector<std::size_t> counter(r, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < index->size(); ++i) {
    (*index)[i] = static_cast<std::uint32_t>(offset);
    for (std::size_t d = r; d-- > 0;) {
      offset += stride[d];
      if (++counter[d] < out_shape[d]) break;
      offset -= stride[d] * out_shape[d];
      counter[d] = 0;
    }
  }
  return gather_op(x, std::move(out_shape), std::move(index));
}

template <typename T>
Tensor<T> select(const Tensor<T>& x, std::size_t index) {
  if (x.rank() < 2) shape_fail("select", "input needs rank >= 2", {x.shape()});
  if (index >= x.dim(0)) throw std::out_of_range("select: index out of range");
  Shape out_shape(x.shape().begin() + 1, x.shape().end());
  const std::size_t n = numel(out_shape);
  auto idx = std::make_shared<Index>(n);
  std::iota(idx->begin(), idx->end(), static_cast<std::uint32_t>(index * n));
  return gather_op(x, std::move(out_shape), std::move(idx));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) shape_fail("concat", "axis out of range", {first});
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Tensor<T>& t : parts) {
    Shape a = t.shape(), b = first;
    if (a.size() != b.size()) shape_fail("concat", "ranks differ", {first, t.shape()});
    a[axis] = b[axis] = 0;
    if (a != b) shape_fail("concat", "non-axis dimensions differ", {first, t.shape()});
    out_shape[axis] += t.shape()[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  const std::size_t out_chunk = out_shape[axis] * inner;
  Tensor<T> out(out_shape);
  std::size_t pos = 0;
  std::vector<std::size_t> offsets;
  for (const Tensor<T>& t : parts) {
    const std::size_t chunk = t.shape()[axis] * inner;
    offsets.push_back(pos);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.data().data() + o * chunk, chunk, out.data().data() + o * out_chunk + pos);
    }
    pos += chunk;
  }
  bool any = false;
  for (const Tensor<T>& t : parts) any = any || wants_grad<T>({&t});
  if (any) {
    std::vector<NodeP<T>> nodes;
    for (const Tensor<T>& t : parts) nodes.push_back(t.shared());
    record(out, [nodes, on = out.shared(), offsets, outer, out_chunk, inner, axis] {
      if (on->grad.empty()) return;
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (!needs(nodes[k])) continue;
        const std::size_t chunk = nodes[k]->shape[axis] * inner;
        T* g = nodes[k]->grad_buffer();
        for (std::size_t o = 0; o < outer; ++o) {
          const T* src = on->grad.data() + o * out_chunk + offsets[k];
          for (std::size_t i = 0; i < chunk; ++i) g[o * chunk + i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t window) {
  require_rank("window_partition", x.shape(), 4);
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  if (window == 0 || H % window || W % window) {
    shape_fail("window_partition", "H and W must be divisible by the window size " + std::to_string(window) +
                                        "; pad the input first", {x.shape()});
  }
  auto index = std::make_shared<Index>(partition_index(B, H, W, C, window));
  return gather_op(x, {B * (H / window) * (W / window), window * window, C}, std::move(index));
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t window, std::size_t batch, std::size_t height,
                         std::size_t width) {
  require_rank("window_reverse", windows.shape(), 3);
  if (window == 0 || height % window || width % window) {
    shape_fail("window_reverse", "target H and W must be divisible by the window size", {windows.shape()});
  }
  const std::size_t C = windows.dim(2);
  const Shape expect{batch * (height / window) * (width / window), window * window, C};
  if (windows.shape() != expect) shape_fail("window_reverse", "window tensor does not match target", {windows.shape(), expect});
  const Index forward = partition_index(batch, height, width, C, window);
  auto index = std::make_shared<Index>(forward.size());
  for (std::size_t i = 0; i < forward.size(); ++i) (*index)[forward[i]] = static_cast<std::uint32_t>(i);
  return gather_op(windows, {batch, height, width, C}, std::move(index));
}

template <typename T>
Tensor<T> roll2d(const Tensor<T>& x, std::ptrdiff_t shift_h, std::ptrdiff_t shift_w) {
  require_rank("roll2d", x.shape(), 4);
  const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
  auto wrap = [](std::ptrdiff_t v, std::size_t n) {
    const auto m = static_cast<std::ptrdiff_t>(n);
    return static_cast<std::size_t>(((v % m) + m) % m);
  };
  auto index = std::make_shared<Index>(x.numel());
  std::size_t o = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t y = 0; y < H; ++y) {
      const std::size_t sy = wrap(static_cast<std::ptrdiff_t>(y) - shift_h, H);
      for (std::size_t xx = 0; xx < W; ++xx) {
        const std::size_t sx = wrap(static_cast<std::ptrdiff_t>(xx) - shift_w, W);
        const std::size_t base = ((b * H + sy) * W + sx) * C;
        for (std::size_t c = 0; c < C; ++c) (*index)[o++] = static_cast<std::uint32_t>(base + c);
      }
    }
  return gather_op(x, x.shape(), std::move(index));
}

template <typename T>
Tensor<T> pad_reflect2d(const Tensor<T>& x, std::size_t pad_h, std::size_t pad_w) {
  require_rank("pad_reflect2d", x.shape(), 4);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (pad_h >= H || pad_w >= W) shape_fail("pad_reflect2d", "reflection padding must be smaller than the input", {x.shape()});
  const std::size_t Ho = H + pad_h, Wo = W + pad_w;
  auto index = std::make_shared<Index>(B * C * Ho * Wo);
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < Ho; ++y) {
      const std::size_t sy = y < H ? y : 2 * (H - 1) - y;
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        const std::size_t sx = xx < W ? xx : 2 * (W - 1) - xx;
        (*index)[o++] = static_cast<std::uint32_t>((bc * H + sy) * W + sx);
      }
    }
  return gather_op(x, {B, C, Ho, Wo}, std::move(index));
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, std::size_t height, std::size_t width) {
  require_rank("crop2d", x.shape(), 4);
  const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (height > H || width > W) shape_fail("crop2d", "crop larger than input", {x.shape()});
  auto index = std::make_shared<Index>(B * C * height * width);
  std::size_t o = 0;
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t xx = 0; xx < width; ++xx) (*index)[o++] = static_cast<std::uint32_t>((bc * H + y) * W + xx);
  return gather_op(x, {B, C, height, width}, std::move(index));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& indices) {
  require_rank("gather_rows", table.shape(), 2);
  const std::size_t R = table.dim(0), K = table.dim(1);
  auto index = std::make_shared<Index>(indices.size() * K);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= R) throw std::out_of_range("gather_rows: row index out of range");
    for (std::size_t k = 0; k < K; ++k) (*index)[i * K + k] = static_cast<std::uint32_t>(indices[i] * K + k);
  }
  return gather_op(table, {indices.size(), K}, std::move(index));
}

template <typename T>
Tensor<T> apply_linear_map(const Tensor<T>& x, Shape out_shape, LinearMap<T> forward, LinearMap<T> adjoint) {
  Tensor<T> out(std::move(out_shape));
  forward(x.data(), out.data());
  if (wants_grad<T>({&x})) {
    record(out, [xn = x.shared(), on = out.shared(), adjoint = std::move(adjoint)] {
      if (on->grad.empty() || !needs(xn)) return;
      Buffer<T> tmp(xn->data.size());
      adjoint(on->grad, tmp);
      T* gx = xn->grad_buffer();
      for (std::size_t i = 0; i < tmp.size(); ++i) gx[i] += tmp[i];
    });
  }
  return out;
}

#define DUDOTRANS_INSTANTIATE_OPS(T)                                                                            \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> scale(const Tensor<T>&, T);                                                                \
  template Tensor<T> sum(const Tensor<T>&);                                                                     \
  template Tensor<T> mean(const Tensor<T>&);                                                                    \
  template Tensor<T> mse(const Tensor<T>&, const Tensor<T>&);                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                                          \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> patch_embed(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                         \
  template Tensor<T> patch_unembed(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);                       \
  template Tensor<T> softmax(const Tensor<T>&);                                                                 \
  template Tensor<T> gelu(const Tensor<T>&);                                                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                          \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                                \
  template Tensor<T> select(const Tensor<T>&, std::size_t);                                                     \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, std::size_t);                                        \
  template Tensor<T> window_partition(const Tensor<T>&, std::size_t);                                           \
  template Tensor<T> window_reverse(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t);      \
  template Tensor<T> roll2d(const Tensor<T>&, std::ptrdiff_t, std::ptrdiff_t);                                  \
  template Tensor<T> pad_reflect2d(const Tensor<T>&, std::size_t, std::size_t);                                 \
  template Tensor<T> crop2d(const Tensor<T>&, std::size_t, std::size_t);                                        \
  template Tensor<T> gather_rows(const Tensor<T>&, const std::vector<std::size_t>&);                            \
  template Tensor<T> apply_linear_map(const Tensor<T>&, Shape, LinearMap<T>, LinearMap<T>);

DUDOTRANS_INSTANTIATE_OPS(float)
DUDOTRANS_INSTANTIATE_OPS(double)

}  // namespace dudotrans::grad
