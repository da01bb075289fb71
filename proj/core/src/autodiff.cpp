#include "cosynorm/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace cosynorm {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapMat = Eigen::Map<const RowMat<S>>;
template <typename S>
using StridedMap = Eigen::Map<RowMat<S>, 0, Eigen::OuterStride<>>;
template <typename S>
using CStridedMap = Eigen::Map<const RowMat<S>, 0, Eigen::OuterStride<>>;

template <typename S>
void require_same_shape(Var<S> a, Var<S> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  }
}

template <typename S>
void require_row_vector(Var<S> a, Var<S> r, const char* op) {
  if (r.rows() != 1 || r.cols() != a.cols()) {
    throw ConfigError(std::string(op) + ": expected 1x" + std::to_string(a.cols()) +
                      " row, got " + std::to_string(r.rows()) + "x" + std::to_string(r.cols()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Var / Tape

template <typename S>
std::size_t Var<S>::rows() const {
  return tape->node(id).rows;
}
template <typename S>
std::size_t Var<S>::cols() const {
  return tape->node(id).cols;
}
template <typename S>
std::span<const S> Var<S>::value() const {
  return tape->node(id).value;
}
template <typename S>
Tensor<S> Var<S>::to_tensor() const {
  Tensor<S> t(rows(), cols());
  const auto v = value();
  std::copy(v.begin(), v.end(), t.data.begin());
  return t;
}

template <typename S>
Var<S> Tape<S>::constant(std::size_t rows, std::size_t cols, std::vector<S> value) {
  if (value.size() != rows * cols) throw ConfigError("constant: size does not match shape");
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Var<S> Tape<S>::constant(const Tensor<S>& t) {
  return constant(t.rows(), t.cols(), t.data);
}

template <typename S>
Var<S> Tape<S>::param(Parameter<S>& p) {
  if (auto it = bound_.find(&p); it != bound_.end()) return {this, it->second};
  Node n;
  n.rows = p.value.rows();
  n.cols = p.value.cols();
  n.value = p.value.data;
  n.requires_grad = record_grad_;
  n.param = &p;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  bound_[&p] = id;
  return {this, id};
}

template <typename S>
Var<S> Tape<S>::push(std::size_t rows, std::size_t cols, std::vector<S> value,
                     std::initializer_list<Var<S>> inputs, std::function<void(Tape&)> backward) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.value = std::move(value);
  if (record_grad_) {
    for (const auto& in : inputs) {
      if (in.tape != this) throw ConfigError("operands live on different tapes");
      n.requires_grad = n.requires_grad || node(in.id).requires_grad;
    }
    if (n.requires_grad) n.backward = std::move(backward);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
std::vector<S>& Tape<S>::grad(int id) {
  auto& n = node(id);
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), S(0));
  return n.grad;
}

template <typename S>
void Tape<S>::backward(Var<S> loss) {
  if (!record_grad_) throw ConfigError("backward on a tape without gradient recording");
  if (loss.rows() != 1 || loss.cols() != 1) throw ConfigError("backward needs a 1x1 loss");
  grad(loss.id)[0] += S(1);
  for (int i = loss.id; i >= 0; --i) {
    auto& n = node(i);
    if (!n.requires_grad || !n.backward) continue;
    if (n.grad.empty()) continue;  // nothing flowed into this node
    n.backward(*this);
  }
}

template <typename S>
void Tape<S>::accumulate_param_grads() const {
  for (const auto& n : nodes_) {
    if (n.param == nullptr || n.grad.empty()) continue;
    auto& g = n.param->grad;
    if (g.size() != n.grad.size()) g.assign(n.grad.size(), S(0));
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  }
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "add");
  const auto av = a.value(), bv = b.value();
  std::vector<S> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(a.rows(), a.cols(), std::move(out), {a, b}, [a, b, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    if (t.node(a.id).requires_grad) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.node(b.id).requires_grad) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "sub");
  const auto av = a.value(), bv = b.value();
  std::vector<S> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(a.rows(), a.cols(), std::move(out), {a, b}, [a, b, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    if (t.node(a.id).requires_grad) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.node(b.id).requires_grad) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  require_same_shape(a, b, "mul");
  const auto av = a.value(), bv = b.value();
  std::vector<S> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(a.rows(), a.cols(), std::move(out), {a, b}, [a, b, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    const auto& av = t.node(a.id).value;
    const auto& bv = t.node(b.id).value;
    if (t.node(a.id).requires_grad) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.node(b.id).requires_grad) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename S>
Var<S> scale(Var<S> a, S c) {
  const auto av = a.value();
  std::vector<S> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(a.rows(), a.cols(), std::move(out), {a}, [a, c, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S c) {
  const auto av = a.value();
  std::vector<S> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(a.rows(), a.cols(), std::move(out), {a}, [a, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

template <typename S>
Var<S> add_row(Var<S> a, Var<S> r) {
  require_row_vector(a, r, "add_row");
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.value(), rv = r.value();
  std::vector<S> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i * m + j] + rv[j];
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, m, std::move(out), {a, r}, [a, r, n, m, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    if (t.node(a.id).requires_grad) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.node(r.id).requires_grad) {
      auto& gr = t.grad(r.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gr[j] += g[i * m + j];
    }
  });
}

template <typename S>
Var<S> mul_row(Var<S> a, Var<S> r) {
  require_row_vector(a, r, "mul_row");
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.value(), rv = r.value();
  std::vector<S> out(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i * m + j] * rv[j];
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, m, std::move(out), {a, r}, [a, r, n, m, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    const auto& av = t.node(a.id).value;
    const auto& rv = t.node(r.id).value;
    if (t.node(a.id).requires_grad) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[i * m + j] * rv[j];
    }
    if (t.node(r.id).requires_grad) {
      auto& gr = t.grad(r.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) gr[j] += g[i * m + j] * av[i * m + j];
    }
  });
}

template <typename S>
Var<S> broadcast_rows(Var<S> r, std::size_t n) {
  if (r.rows() != 1) throw ConfigError("broadcast_rows: expected a single row");
  const std::size_t m = r.cols();
  const auto rv = r.value();
  std::vector<S> out(n * m);
  for (std::size_t i = 0; i < n; ++i) std::copy(rv.begin(), rv.end(), out.begin() + i * m);
  Tape<S>& t = *r.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, m, std::move(out), {r}, [r, n, m, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    auto& gr = t.grad(r.id);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) gr[j] += g[i * m + j];
  });
}

template <typename S>
Var<S> silu(Var<S> a) {
  const auto av = a.value();
  std::vector<S> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / (S(1) + std::exp(-av[i]));
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(a.rows(), a.cols(), std::move(out), {a}, [a, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    const auto& av = t.node(a.id).value;
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S sig = S(1) / (S(1) + std::exp(-av[i]));
      ga[i] += g[i] * sig * (S(1) + av[i] * (S(1) - sig));
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " +
                      std::to_string(b.rows()) + " differ");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  std::vector<S> out(n * m);
  MapMat<S>(out.data(), n, m).noalias() =
      CMapMat<S>(a.value().data(), n, k) * CMapMat<S>(b.value().data(), k, m);
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, m, std::move(out), {a, b}, [a, b, n, k, m, o](Tape<S>& t) {
    CMapMat<S> g(t.node(o).grad.data(), n, m);
    if (t.node(a.id).requires_grad) {
      MapMat<S>(t.grad(a.id).data(), n, k).noalias() +=
          g * CMapMat<S>(t.node(b.id).value.data(), k, m).transpose();
    }
    if (t.node(b.id).requires_grad) {
      MapMat<S>(t.grad(b.id).data(), k, m).noalias() +=
          CMapMat<S>(t.node(a.id).value.data(), n, k).transpose() * g;
    }
  });
}

template <typename S>
Var<S> transpose(Var<S> a) {
  const std::size_t n = a.rows(), m = a.cols();
  std::vector<S> out(n * m);
  MapMat<S>(out.data(), m, n) = CMapMat<S>(a.value().data(), n, m).transpose();
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(m, n, std::move(out), {a}, [a, n, m, o](Tape<S>& t) {
    MapMat<S>(t.grad(a.id).data(), n, m) +=
        CMapMat<S>(t.node(o).grad.data(), m, n).transpose();
  });
}

template <typename S>
Var<S> affine(Var<S> x, Var<S> w, Var<S> b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw ConfigError("affine: input " + std::to_string(x.cols()) + " does not fit weight " +
                      std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
  }
  const std::size_t n = x.rows(), k = x.cols(), m = w.cols();
  std::vector<S> out(n * m);
  MapMat<S> om(out.data(), n, m);
  om.noalias() = CMapMat<S>(x.value().data(), n, k) * CMapMat<S>(w.value().data(), k, m);
  om.rowwise() += CMapMat<S>(b.value().data(), 1, m).row(0);
  Tape<S>& t = *x.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, m, std::move(out), {x, w, b}, [x, w, b, n, k, m, o](Tape<S>& t) {
    CMapMat<S> g(t.node(o).grad.data(), n, m);
    if (t.node(x.id).requires_grad) {
      MapMat<S>(t.grad(x.id).data(), n, k).noalias() +=
          g * CMapMat<S>(t.node(w.id).value.data(), k, m).transpose();
    }
    if (t.node(w.id).requires_grad) {
      MapMat<S>(t.grad(w.id).data(), k, m).noalias() +=
          CMapMat<S>(t.node(x.id).value.data(), n, k).transpose() * g;
    }
    if (t.node(b.id).requires_grad) {
      MapMat<S>(t.grad(b.id).data(), 1, m) += g.colwise().sum();
    }
  });
}

// ---------------------------------------------------------------------------
// Shape

template <typename S>
Var<S> concat_cols(Var<S> a, Var<S> b) {
  if (a.rows() != b.rows()) throw ConfigError("concat_cols: row counts differ");
  const std::size_t n = a.rows(), ma = a.cols(), mb = b.cols(), m = ma + mb;
  const auto av = a.value(), bv = b.value();
  std::vector<S> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(av.begin() + i * ma, ma, out.begin() + i * m);
    std::copy_n(bv.begin() + i * mb, mb, out.begin() + i * m + ma);
  }
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, m, std::move(out), {a, b}, [a, b, n, ma, mb, m, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    if (t.node(a.id).requires_grad) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < ma; ++j) ga[i * ma + j] += g[i * m + j];
    }
    if (t.node(b.id).requires_grad) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < mb; ++j) gb[i * mb + j] += g[i * m + ma + j];
    }
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, std::size_t start, std::size_t count) {
  if (start + count > a.cols()) throw ConfigError("slice_cols: range out of bounds");
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.value();
  std::vector<S> out(n * count);
  for (std::size_t i = 0; i < n; ++i)
    std::copy_n(av.begin() + i * m + start, count, out.begin() + i * count);
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, count, std::move(out), {a}, [a, n, m, start, count, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < count; ++j) ga[i * m + start + j] += g[i * count + j];
  });
}

template <typename S>
Var<S> conv_frames(Var<S> x, std::size_t kernel, std::size_t stride) {
  if (kernel == 0 || stride == 0) throw ConfigError("conv_frames: kernel and stride must be >= 1");
  const std::size_t n = x.rows(), d = x.cols();
  const std::size_t n_out = (n + stride - 1) / stride;
  const std::size_t width = kernel * d;
  const auto xv = x.value();
  const long half = static_cast<long>(kernel / 2);
  std::vector<S> out(n_out * width, S(0));
  for (std::size_t j = 0; j < n_out; ++j) {
    for (std::size_t off = 0; off < kernel; ++off) {
      const long src = static_cast<long>(j * stride + off) - half;
      if (src < 0 || src >= static_cast<long>(n)) continue;
      std::copy_n(xv.begin() + static_cast<std::size_t>(src) * d, d,
                  out.begin() + j * width + off * d);
    }
  }
  Tape<S>& t = *x.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n_out, width, std::move(out), {x},
                [x, n, d, n_out, width, kernel, stride, half, o](Tape<S>& t) {
                  const auto& g = t.node(o).grad;
                  auto& gx = t.grad(x.id);
                  for (std::size_t j = 0; j < n_out; ++j) {
                    for (std::size_t off = 0; off < kernel; ++off) {
                      const long src = static_cast<long>(j * stride + off) - half;
                      if (src < 0 || src >= static_cast<long>(n)) continue;
                      for (std::size_t c = 0; c < d; ++c)
                        gx[static_cast<std::size_t>(src) * d + c] += g[j * width + off * d + c];
                    }
                  }
                });
}

template <typename S>
Var<S> detach(Var<S> a) {
  const auto av = a.value();
  return a.tape->constant(a.rows(), a.cols(), std::vector<S>(av.begin(), av.end()));
}

// ---------------------------------------------------------------------------
// Reductions

template <typename S>
Var<S> mean_rows(Var<S> a) {
  const std::size_t n = a.rows(), m = a.cols();
  if (n == 0) throw ConfigError("mean_rows: empty input");
  const auto av = a.value();
  std::vector<S> out(m, S(0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out[j] += av[i * m + j];
  for (auto& v : out) v /= static_cast<S>(n);
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(1, m, std::move(out), {a}, [a, n, m, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    auto& ga = t.grad(a.id);
    const S inv = S(1) / static_cast<S>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += g[j] * inv;
  });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
  const auto av = a.value();
  S s = S(0);
  for (const S v : av) s += v;
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(1, 1, {s}, {a}, [a, o](Tape<S>& t) {
    const S g = t.node(o).grad[0];
    for (auto& v : t.grad(a.id)) v += g;
  });
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  return scale(sum_all(a), S(1) / static_cast<S>(a.rows() * a.cols()));
}

template <typename S>
Var<S> mse(Var<S> a, const std::vector<S>& target) {
  const auto av = a.value();
  if (target.size() != av.size()) throw ConfigError("mse: target size mismatch");
  const S inv = S(1) / static_cast<S>(av.size());
  S s = S(0);
  for (std::size_t i = 0; i < av.size(); ++i) {
    const S d = av[i] - target[i];
    s += d * d;
  }
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(1, 1, {s * inv}, {a}, [a, target, inv, o](Tape<S>& t) {
    const S g = t.node(o).grad[0];
    const auto& av = t.node(a.id).value;
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] += g * S(2) * inv * (av[i] - target[i]);
  });
}

// ---------------------------------------------------------------------------
// Normalization

template <typename S>
Var<S> layer_norm(Var<S> a) {
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.value();
  std::vector<S> out(n * m);
  std::vector<S> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    S mean = S(0);
    for (std::size_t j = 0; j < m; ++j) mean += av[i * m + j];
    mean /= static_cast<S>(m);
    S var = S(0);
    for (std::size_t j = 0; j < m; ++j) {
      const S d = av[i * m + j] - mean;
      var += d * d;
    }
    var /= static_cast<S>(m);
    inv_std[i] = S(1) / std::sqrt(var + static_cast<S>(kLayerNormEps));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = (av[i * m + j] - mean) * inv_std[i];
  }
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, m, std::move(out), {a}, [a, n, m, inv_std = std::move(inv_std), o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    const auto& y = t.node(o).value;
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < n; ++i) {
      S mg = S(0), mgy = S(0);
      for (std::size_t j = 0; j < m; ++j) {
        mg += g[i * m + j];
        mgy += g[i * m + j] * y[i * m + j];
      }
      mg /= static_cast<S>(m);
      mgy /= static_cast<S>(m);
      for (std::size_t j = 0; j < m; ++j)
        ga[i * m + j] += inv_std[i] * (g[i * m + j] - mg - y[i * m + j] * mgy);
    }
  });
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.value();
  std::vector<S> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const S mx = *std::max_element(av.begin() + i * m, av.begin() + (i + 1) * m);
    S z = S(0);
    for (std::size_t j = 0; j < m; ++j) z += (out[i * m + j] = std::exp(av[i * m + j] - mx));
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
  }
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, m, std::move(out), {a}, [a, n, m, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    const auto& y = t.node(o).value;
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < n; ++i) {
      S dot = S(0);
      for (std::size_t j = 0; j < m; ++j) dot += g[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += y[i * m + j] * (g[i * m + j] - dot);
    }
  });
}

template <typename S>
Var<S> log_softmax_rows(Var<S> a) {
  const std::size_t n = a.rows(), m = a.cols();
  const auto av = a.value();
  std::vector<S> out(n * m);
  for (std::size_t i = 0; i < n; ++i) {
    const S mx = *std::max_element(av.begin() + i * m, av.begin() + (i + 1) * m);
    S z = S(0);
    for (std::size_t j = 0; j < m; ++j) z += std::exp(av[i * m + j] - mx);
    const S lz = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = av[i * m + j] - lz;
  }
  Tape<S>& t = *a.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, m, std::move(out), {a}, [a, n, m, o](Tape<S>& t) {
    const auto& g = t.node(o).grad;
    const auto& y = t.node(o).value;
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < n; ++i) {
      S gs = S(0);
      for (std::size_t j = 0; j < m; ++j) gs += g[i * m + j];
      for (std::size_t j = 0; j < m; ++j)
        ga[i * m + j] += g[i * m + j] - std::exp(y[i * m + j]) * gs;
    }
  });
}

// ---------------------------------------------------------------------------
// Attention

template <typename S>
Var<S> rope(Var<S> x, std::span<const double> positions, std::size_t n_heads, double base) {
  const std::size_t n = x.rows(), d = x.cols();
  if (n_heads == 0 || d % n_heads != 0) throw ConfigError("rope: width not divisible by heads");
  const std::size_t hd = d / n_heads;
  if (hd % 2 != 0) throw ConfigError("rope: head dimension must be even, got " + std::to_string(hd));
  if (positions.size() != n) throw ConfigError("rope: one position per row required");
  if (!(base > 1.0)) throw ConfigError("rope: base must exceed 1");
  const std::size_t half = hd / 2;
  // Angles in 64-bit so fractional positions lose nothing before the cast.
  std::vector<S> cs(n * half), sn(n * half);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < half; ++p) {
      const double freq = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(hd));
      const double angle = positions[i] * freq;
      cs[i * half + p] = static_cast<S>(std::cos(angle));
      sn[i * half + p] = static_cast<S>(std::sin(angle));
    }
  }
  const auto xv = x.value();
  std::vector<S> out(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t p = 0; p < half; ++p) {
        const std::size_t j = i * d + h * hd + 2 * p;
        const S c = cs[i * half + p], s = sn[i * half + p];
        out[j] = xv[j] * c - xv[j + 1] * s;
        out[j + 1] = xv[j] * s + xv[j + 1] * c;
      }
    }
  }
  Tape<S>& t = *x.tape;
  const int o = static_cast<int>(t.size());
  return t.push(n, d, std::move(out), {x},
                [x, n, d, hd, half, n_heads, cs = std::move(cs), sn = std::move(sn), o](Tape<S>& t) {
                  const auto& g = t.node(o).grad;
                  auto& gx = t.grad(x.id);
                  for (std::size_t i = 0; i < n; ++i) {
                    for (std::size_t h = 0; h < n_heads; ++h) {
                      for (std::size_t p = 0; p < half; ++p) {
                        const std::size_t j = i * d + h * hd + 2 * p;
                        const S c = cs[i * half + p], s = sn[i * half + p];
                        gx[j] += g[j] * c + g[j + 1] * s;
                        gx[j + 1] += -g[j] * s + g[j + 1] * c;
                      }
                    }
                  }
                });
}

template <typename S>
Var<S> attention(Var<S> q, Var<S> k, Var<S> v, std::size_t n_heads) {
  const std::size_t n = q.rows(), m = k.rows(), d = q.cols();
  if (m == 0) throw ConfigError("attention: empty key sequence");
  if (v.rows() != m) throw ConfigError("attention: key and value lengths differ");
  if (k.cols() != d || v.cols() != d) throw ConfigError("attention: width mismatch");
  if (n_heads == 0 || d % n_heads != 0) throw ConfigError("attention: width not divisible by heads");
  const std::size_t hd = d / n_heads;
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));

  std::vector<S> probs(n_heads * n * m);
  std::vector<S> out(n * d);
  for (std::size_t h = 0; h < n_heads; ++h) {
    CStridedMap<S> qh(q.value().data() + h * hd, n, hd, stride);
    CStridedMap<S> kh(k.value().data() + h * hd, m, hd, stride);
    CStridedMap<S> vh(v.value().data() + h * hd, m, hd, stride);
    MapMat<S> p(probs.data() + h * n * m, n, m);
    p.noalias() = (qh * kh.transpose()) * inv_sqrt;
    for (std::size_t i = 0; i < n; ++i) {
      auto row = p.row(static_cast<Eigen::Index>(i));
      row.array() = (row.array() - row.maxCoeff()).exp();
      row /= row.sum();
    }
    StridedMap<S>(out.data() + h * hd, n, hd, stride).noalias() = p * vh;
  }

  Tape<S>& t = *q.tape;
  const int o = static_cast<int>(t.size());
  return t.push(
      n, d, std::move(out), {q, k, v},
      [q, k, v, n, m, d, hd, n_heads, inv_sqrt, probs = std::move(probs), o](Tape<S>& t) {
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        const bool need_q = t.node(q.id).requires_grad;
        const bool need_k = t.node(k.id).requires_grad;
        const bool need_v = t.node(v.id).requires_grad;
        S* gq = need_q ? t.grad(q.id).data() : nullptr;
        S* gk = need_k ? t.grad(k.id).data() : nullptr;
        S* gv = need_v ? t.grad(v.id).data() : nullptr;
        RowMat<S> dp(n, m);
        for (std::size_t h = 0; h < n_heads; ++h) {
          CStridedMap<S> go(t.node(o).grad.data() + h * hd, n, hd, stride);
          CStridedMap<S> qh(t.node(q.id).value.data() + h * hd, n, hd, stride);
          CStridedMap<S> kh(t.node(k.id).value.data() + h * hd, m, hd, stride);
          CStridedMap<S> vh(t.node(v.id).value.data() + h * hd, m, hd, stride);
          CMapMat<S> p(probs.data() + h * n * m, n, m);
          if (need_v) StridedMap<S>(gv + h * hd, m, hd, stride).noalias() += p.transpose() * go;
          if (!need_q && !need_k) continue;
          dp.noalias() = go * vh.transpose();
          // softmax backward: dS = P .* (dP - rowsum(dP .* P))
          for (std::size_t i = 0; i < n; ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            const S dot = (dp.row(ii).array() * p.row(ii).array()).sum();
            dp.row(ii) = (p.row(ii).array() * (dp.row(ii).array() - dot)).matrix();
          }
          if (need_q) StridedMap<S>(gq + h * hd, n, hd, stride).noalias() += (dp * kh) * inv_sqrt;
          if (need_k)
            StridedMap<S>(gk + h * hd, m, hd, stride).noalias() += (dp.transpose() * qh) * inv_sqrt;
        }
      });
}

// ---------------------------------------------------------------------------
// Instantiations

#define COSYNORM_INSTANTIATE(S)                                                          \
  template struct Var<S>;                                                                \
  template class Tape<S>;                                                                \
  template Var<S> add(Var<S>, Var<S>);                                                   \
  template Var<S> sub(Var<S>, Var<S>);                                                   \
  template Var<S> mul(Var<S>, Var<S>);                                                   \
  template Var<S> scale(Var<S>, S);                                                      \
  template Var<S> add_scalar(Var<S>, S);                                                 \
  template Var<S> add_row(Var<S>, Var<S>);                                               \
  template Var<S> mul_row(Var<S>, Var<S>);                                               \
  template Var<S> broadcast_rows(Var<S>, std::size_t);                                   \
  template Var<S> silu(Var<S>);                                                          \
  template Var<S> matmul(Var<S>, Var<S>);                                                \
  template Var<S> transpose(Var<S>);                                                     \
  template Var<S> affine(Var<S>, Var<S>, Var<S>);                                        \
  template Var<S> concat_cols(Var<S>, Var<S>);                                           \
  template Var<S> slice_cols(Var<S>, std::size_t, std::size_t);                          \
  template Var<S> conv_frames(Var<S>, std::size_t, std::size_t);                         \
  template Var<S> detach(Var<S>);                                                        \
  template Var<S> mean_rows(Var<S>);                                                     \
  template Var<S> sum_all(Var<S>);                                                       \
  template Var<S> mean_all(Var<S>);                                                      \
  template Var<S> mse(Var<S>, const std::vector<S>&);                                    \
  template Var<S> layer_norm(Var<S>);                                                    \
  template Var<S> softmax_rows(Var<S>);                                                  \
  template Var<S> log_softmax_rows(Var<S>);                                              \
  template Var<S> rope(Var<S>, std::span<const double>, std::size_t, double);            \
  template Var<S> attention(Var<S>, Var<S>, Var<S>, std::size_t);

COSYNORM_INSTANTIATE(float)
COSYNORM_INSTANTIATE(double)

#undef COSYNORM_INSTANTIATE

}  // namespace cosynorm
