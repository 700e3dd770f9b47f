#include "smolpipe/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <type_traits>
#include <unordered_set>

namespace smolpipe {

namespace {

thread_local int g_no_grad_depth = 0;

constexpr double kPi = 3.14159265358979323846;

void check_defined(const Tensor& t, const char* what) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(what) + ": undefined tensor");
  }
}

std::size_t flat_index(const Shape& shape, const std::vector<std::size_t>& index) {
  std::size_t flat = 0;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    flat = flat * shape[i] + index[i];
  }
  return flat;
}

std::vector<std::size_t> row_major_strides(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) {
    strides[i - 1] = strides[i] * shape[i];
  }
  return strides;
}

}  // namespace

std::string format_shape(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

namespace detail {

std::vector<double>& GradStore::buffer(const TapeNode* node) {
  auto it = buffers_.find(node);
  if (it == buffers_.end()) {
    it = buffers_.emplace(node, std::vector<double>(node->numel(), 0.0)).first;
  }
  return it->second;
}

bool grad_mode_enabled() { return g_no_grad_depth == 0; }

}  // namespace detail

using detail::GradStore;
using detail::NodePtr;
using detail::TapeNode;

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

// ---- Tensor basics ----

namespace {

NodePtr make_node(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                " does not match shape " + format_shape(shape));
  }
  auto node = std::make_shared<TapeNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = requires_grad;
  return node;
}

// Builds the output node of an op. The backward closure is attached only when
// grad mode is on and some parent requires a gradient.
Tensor make_op_output(Shape shape, std::vector<double> data, std::vector<NodePtr> parents,
                      std::function<void(const std::vector<double>&, GradStore&)> backward_fn) {
  bool track = detail::grad_mode_enabled() &&
               std::any_of(parents.begin(), parents.end(),
                           [](const NodePtr& p) { return p->requires_grad; });
  auto node = make_node(std::move(shape), std::move(data), track);
  if (track) {
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

}  // namespace

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(make_node(shape, std::vector<double>(shape_numel(shape), 0.0), requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(make_node(shape, std::vector<double>(shape_numel(shape), value), requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  return Tensor(make_node(shape, std::move(data), requires_grad));
}

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (double& v : data) v = dist(rng);
  return Tensor(make_node(shape, std::move(data), requires_grad));
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::invalid_argument("shape(): undefined tensor");
  return node_->shape;
}

std::size_t Tensor::numel() const {
  if (!node_) return 0;
  return node_->numel();
}

const std::vector<double>& Tensor::data() const {
  if (!node_) throw std::invalid_argument("data(): undefined tensor");
  return node_->data;
}

std::vector<double>& Tensor::mutable_data() {
  if (!node_) throw std::invalid_argument("mutable_data(): undefined tensor");
  return node_->data;
}

double Tensor::at(const std::vector<std::size_t>& index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) {
    throw std::out_of_range("index rank " + std::to_string(index.size()) + " vs tensor rank " +
                            std::to_string(s.size()));
  }
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (index[i] >= s[i]) throw std::out_of_range("index out of bounds in dim " + std::to_string(i));
  }
  return node_->data[flat_index(s, index)];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool v) {
  check_defined(*this, "set_requires_grad");
  node_->requires_grad = v;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

Tensor Tensor::grad() const {
  check_defined(*this, "grad");
  if (node_->grad.empty()) {
    throw std::runtime_error("no gradient present; run backward() first");
  }
  return Tensor::from_data(node_->shape, node_->grad);
}

std::vector<double>& Tensor::grad_data() {
  check_defined(*this, "grad_data");
  if (node_->grad.empty()) node_->grad.assign(node_->numel(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  check_defined(*this, "zero_grad");
  node_->grad.clear();
}

// ---- matmul ----

namespace {

struct BatchLayout {
  Shape batch;                       // broadcast batch shape
  std::vector<std::size_t> a_strides;  // per batch dim, 0 when broadcast
  std::vector<std::size_t> b_strides;
};

BatchLayout broadcast_batches(const Shape& a, const Shape& b) {
  std::size_t na = a.size() - 2, nb = b.size() - 2;
  std::size_t n = std::max(na, nb);
  BatchLayout out;
  out.batch.resize(n);
  std::vector<std::size_t> a_dims(n, 1), b_dims(n, 1);
  for (std::size_t i = 0; i < na; ++i) a_dims[n - na + i] = a[i];
  for (std::size_t i = 0; i < nb; ++i) b_dims[n - nb + i] = b[i];
  for (std::size_t i = 0; i < n; ++i) {
    if (a_dims[i] != b_dims[i] && a_dims[i] != 1 && b_dims[i] != 1) {
      throw std::invalid_argument("matmul: batch dims not broadcastable: " + format_shape(a) +
                                  " x " + format_shape(b));
    }
    out.batch[i] = std::max(a_dims[i], b_dims[i]);
  }
  // strides through each operand's own batch block
  std::size_t a_acc = 1, b_acc = 1;
  out.a_strides.assign(n, 0);
  out.b_strides.assign(n, 0);
  for (std::size_t i = n; i-- > 0;) {
    out.a_strides[i] = (a_dims[i] == 1) ? 0 : a_acc;
    out.b_strides[i] = (b_dims[i] == 1) ? 0 : b_acc;
    a_acc *= a_dims[i];
    b_acc *= b_dims[i];
  }
  return out;
}

void matmul_2d_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                   std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      const double* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw std::invalid_argument("matmul: operands must have rank >= 2, got " + format_shape(sa) +
                                " x " + format_shape(sb));
  }
  std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  std::size_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != kb) {
    throw std::invalid_argument("matmul: inner dimensions differ: " + format_shape(sa) + " x " +
                                format_shape(sb));
  }
  BatchLayout layout = broadcast_batches(sa, sb);
  std::size_t n_batch = shape_numel(layout.batch);

  Shape out_shape = layout.batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(n_batch * m * n, 0.0);

  // per-flattened-batch offsets into a and b
  std::vector<std::size_t> a_off(n_batch, 0), b_off(n_batch, 0);
  {
    std::vector<std::size_t> idx(layout.batch.size(), 0);
    for (std::size_t bi = 0; bi < n_batch; ++bi) {
      std::size_t ao = 0, bo = 0;
      for (std::size_t d = 0; d < idx.size(); ++d) {
        ao += idx[d] * layout.a_strides[d];
        bo += idx[d] * layout.b_strides[d];
      }
      a_off[bi] = ao * m * k;
      b_off[bi] = bo * kb * n;
      for (std::size_t d = idx.size(); d-- > 0;) {
        if (++idx[d] < layout.batch[d]) break;
        idx[d] = 0;
      }
    }
  }

  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t bi = 0; bi < n_batch; ++bi) {
    matmul_2d_acc(pa + a_off[bi], pb + b_off[bi], out.data() + bi * m * n, m, k, n);
  }

  auto an = a.node();
  auto bn = b.node();
  return make_op_output(
      out_shape, std::move(out), {an, bn},
      [an, bn, a_off, b_off, m, k, n, n_batch](const std::vector<double>& g, GradStore& store) {
        const double* pa = an->data.data();
        const double* pb = bn->data.data();
        if (an->requires_grad) {
          std::vector<double>& ga = store.buffer(an.get());
          for (std::size_t bi = 0; bi < n_batch; ++bi) {
            const double* gns = g.data() + bi * m * n;
            const double* bbl = pb + b_off[bi];
            double* gab = ga.data() + a_off[bi];
            // ga += g . b^T
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t j = 0; j < n; ++j) {
                double gv = gns[i * n + j];
                for (std::size_t kk = 0; kk < k; ++kk) {
                  gab[i * k + kk] += gv * bbl[kk * n + j];
                }
              }
            }
          }
        }
        if (bn->requires_grad) {
          std::vector<double>& gb = store.buffer(bn.get());
          for (std::size_t bi = 0; bi < n_batch; ++bi) {
            const double* gns = g.data() + bi * m * n;
            const double* abl = pa + a_off[bi];
            double* gbb = gb.data() + b_off[bi];
            // gb += a^T . g
            for (std::size_t i = 0; i < m; ++i) {
              for (std::size_t kk = 0; kk < k; ++kk) {
                double av = abl[i * k + kk];
                const double* grow = gns + i * n;
                double* gbrow = gbb + kk * n;
                for (std::size_t j = 0; j < n; ++j) {
                  gbrow[j] += av * grow[j];
                }
              }
            }
          }
        }
      });
}

// ---- elementwise ----

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + format_shape(a.shape()) +
                                " vs " + format_shape(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_output(a.shape(), std::move(out), {an, bn},
                        [an, bn](const std::vector<double>& g, GradStore& store) {
                          if (an->requires_grad) {
                            auto& ga = store.buffer(an.get());
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (bn->requires_grad) {
                            auto& gb = store.buffer(bn.get());
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                          }
                        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_output(a.shape(), std::move(out), {an, bn},
                        [an, bn](const std::vector<double>& g, GradStore& store) {
                          if (an->requires_grad) {
                            auto& ga = store.buffer(an.get());
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (bn->requires_grad) {
                            auto& gb = store.buffer(bn.get());
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                          }
                        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  const auto& db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  auto an = a.node();
  auto bn = b.node();
  return make_op_output(a.shape(), std::move(out), {an, bn},
                        [an, bn](const std::vector<double>& g, GradStore& store) {
                          if (an->requires_grad) {
                            auto& ga = store.buffer(an.get());
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->data[i];
                          }
                          if (bn->requires_grad) {
                            auto& gb = store.buffer(bn.get());
                            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->data[i];
                          }
                        });
}

Tensor scale(const Tensor& a, double s) {
  check_defined(a, "scale");
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * s;
  auto an = a.node();
  return make_op_output(a.shape(), std::move(out), {an},
                        [an, s](const std::vector<double>& g, GradStore& store) {
                          if (!an->requires_grad) return;
                          auto& ga = store.buffer(an.get());
                          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                        });
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  check_defined(a, "add_bias");
  check_defined(bias, "add_bias");
  if (bias.rank() != 1 || a.rank() < 1 || a.shape().back() != bias.shape()[0]) {
    throw std::invalid_argument("add_bias: shape mismatch " + format_shape(a.shape()) + " vs " +
                                format_shape(bias.shape()));
  }
  std::size_t n = bias.shape()[0];
  std::size_t rows = a.numel() / n;
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  const auto& db = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = da[r * n + j] + db[j];
  }
  auto an = a.node();
  auto bn = bias.node();
  return make_op_output(a.shape(), std::move(out), {an, bn},
                        [an, bn, rows, n](const std::vector<double>& g, GradStore& store) {
                          if (an->requires_grad) {
                            auto& ga = store.buffer(an.get());
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          }
                          if (bn->requires_grad) {
                            auto& gb = store.buffer(bn.get());
                            for (std::size_t r = 0; r < rows; ++r) {
                              for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                            }
                          }
                        });
}

Tensor gelu(const Tensor& a) {
  check_defined(a, "gelu");
  std::vector<double> out(a.numel());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * da[i] * (1.0 + std::erf(da[i] / std::sqrt(2.0)));
  }
  auto an = a.node();
  return make_op_output(a.shape(), std::move(out), {an},
                        [an](const std::vector<double>& g, GradStore& store) {
                          if (!an->requires_grad) return;
                          auto& ga = store.buffer(an.get());
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            double x = an->data[i];
                            double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
                            double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
                            ga[i] += g[i] * (cdf + x * pdf);
                          }
                        });
}

// ---- softmax ----

Tensor softmax(const Tensor& a, std::size_t axis) {
  check_defined(a, "softmax");
  const Shape& s = a.shape();
  if (axis >= s.size()) {
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " out of range for " +
                                format_shape(s));
  }
  std::size_t extent = s[axis];
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  std::size_t outer = a.numel() / (extent * inner);

  std::vector<double> out(a.numel());
  const auto& da = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      std::size_t base = o * extent * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t e = 0; e < extent; ++e) mx = std::max(mx, da[base + e * inner]);
      double sum = 0.0;
      for (std::size_t e = 0; e < extent; ++e) {
        double v = std::exp(da[base + e * inner] - mx);
        out[base + e * inner] = v;
        sum += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= sum;
    }
  }

  auto an = a.node();
  std::vector<double> y = out;  // backward reads the outputs
  return make_op_output(
      s, std::move(out), {an},
      [an, outer, extent, inner, y = std::move(y)](const std::vector<double>& g, GradStore& store) {
        if (!an->requires_grad) return;
        auto& ga = store.buffer(an.get());
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * extent * inner + in;
            double dot = 0.0;
            for (std::size_t e = 0; e < extent; ++e) {
              dot += g[base + e * inner] * y[base + e * inner];
            }
            for (std::size_t e = 0; e < extent; ++e) {
              std::size_t idx = base + e * inner;
              ga[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

// ---- permute_reshape ----

Tensor permute_reshape(const Tensor& a, const std::vector<std::size_t>& perm, const Shape& new_shape) {
  check_defined(a, "permute_reshape");
  const Shape& s = a.shape();
  if (perm.size() != s.size()) {
    throw std::invalid_argument("permute_reshape: perm rank " + std::to_string(perm.size()) +
                                " vs tensor rank " + std::to_string(s.size()));
  }
  {
    std::vector<bool> seen(s.size(), false);
    for (std::size_t p : perm) {
      if (p >= s.size() || seen[p]) {
        throw std::invalid_argument("permute_reshape: invalid permutation");
      }
      seen[p] = true;
    }
  }
  if (shape_numel(new_shape) != a.numel()) {
    throw std::invalid_argument("permute_reshape: element count mismatch: " + format_shape(s) +
                                " has " + std::to_string(a.numel()) + " elements, new shape " +
                                format_shape(new_shape) + " has " +
                                std::to_string(shape_numel(new_shape)));
  }

  bool identity_perm = true;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] != i) { identity_perm = false; break; }
  }

  auto an = a.node();
  if (identity_perm) {
    // pure reshape: data order unchanged
    std::vector<double> out = a.data();
    return make_op_output(new_shape, std::move(out), {an},
                          [an](const std::vector<double>& g, GradStore& store) {
                            if (!an->requires_grad) return;
                            auto& ga = store.buffer(an.get());
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          });
  }

  // transposed shape and the source index for each transposed-linear position
  Shape tshape(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) tshape[i] = s[perm[i]];
  std::vector<std::size_t> in_strides = row_major_strides(s);
  std::vector<std::size_t> src_of(a.numel());
  {
    std::vector<std::size_t> t_idx(tshape.size(), 0);
    for (std::size_t o = 0; o < src_of.size(); ++o) {
      std::size_t src = 0;
      for (std::size_t i = 0; i < t_idx.size(); ++i) src += t_idx[i] * in_strides[perm[i]];
      src_of[o] = src;
      for (std::size_t d = t_idx.size(); d-- > 0;) {
        if (++t_idx[d] < tshape[d]) break;
        t_idx[d] = 0;
      }
    }
  }

  std::vector<double> out(a.numel());
  const auto& da = a.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = da[src_of[o]];

  return make_op_output(new_shape, std::move(out), {an},
                        [an, src_of = std::move(src_of)](const std::vector<double>& g, GradStore& store) {
                          if (!an->requires_grad) return;
                          auto& ga = store.buffer(an.get());
                          for (std::size_t o = 0; o < g.size(); ++o) ga[src_of[o]] += g[o];
                        });
}

Tensor reshape(const Tensor& a, const Shape& new_shape) {
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  return permute_reshape(a, perm, new_shape);
}

Tensor transpose2d(const Tensor& a) {
  check_defined(a, "transpose2d");
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose2d: expected rank 2, got " + format_shape(a.shape()));
  }
  return permute_reshape(a, {1, 0}, {a.shape()[1], a.shape()[0]});
}

// ---- layer norm ----

Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps) {
  check_defined(a, "layer_norm");
  check_defined(gamma, "layer_norm");
  check_defined(beta, "layer_norm");
  std::size_t n = a.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.shape()[0] != n || beta.shape()[0] != n) {
    throw std::invalid_argument("layer_norm: affine shape mismatch for " + format_shape(a.shape()));
  }
  std::size_t rows = a.numel() / n;
  std::vector<double> out(a.numel());
  std::vector<double> xhat(a.numel());
  std::vector<double> inv_std(rows);
  const auto& da = a.data();
  const auto& dg = gamma.data();
  const auto& db = beta.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = da.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      double xh = (row[j] - mean) * inv;
      xhat[r * n + j] = xh;
      out[r * n + j] = xh * dg[j] + db[j];
    }
  }
  auto an = a.node();
  auto gn = gamma.node();
  auto bn = beta.node();
  return make_op_output(
      a.shape(), std::move(out), {an, gn, bn},
      [an, gn, bn, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
          const std::vector<double>& g, GradStore& store) {
        if (gn->requires_grad) {
          auto& gg = store.buffer(gn.get());
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
          }
        }
        if (bn->requires_grad) {
          auto& gb = store.buffer(bn.get());
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
          }
        }
        if (an->requires_grad) {
          auto& ga = store.buffer(an.get());
          const auto& dg = gn->data;
          for (std::size_t r = 0; r < rows; ++r) {
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              double dxh = g[r * n + j] * dg[j];
              sum_dxhat += dxh;
              sum_dxhat_xhat += dxh * xhat[r * n + j];
            }
            double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              double dxh = g[r * n + j] * dg[j];
              ga[r * n + j] += inv_std[r] * (dxh - inv_n * sum_dxhat -
                                             xhat[r * n + j] * inv_n * sum_dxhat_xhat);
            }
          }
        }
      });
}

// ---- embedding ----

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  check_defined(table, "embedding");
  if (table.rank() != 2) {
    throw std::invalid_argument("embedding: table must be rank 2, got " + format_shape(table.shape()));
  }
  std::size_t v = table.shape()[0], d = table.shape()[1];
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::out_of_range("embedding: id " + std::to_string(id) + " outside vocab of " +
                              std::to_string(v));
    }
  }
  std::vector<double> out(ids.size() * d);
  const auto& dt = table.data();
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::memcpy(out.data() + t * d, dt.data() + static_cast<std::size_t>(ids[t]) * d,
                d * sizeof(double));
  }
  auto tn = table.node();
  return make_op_output({ids.size(), d}, std::move(out), {tn},
                        [tn, ids, d](const std::vector<double>& g, GradStore& store) {
                          if (!tn->requires_grad) return;
                          auto& gt = store.buffer(tn.get());
                          for (std::size_t t = 0; t < ids.size(); ++t) {
                            double* dst = gt.data() + static_cast<std::size_t>(ids[t]) * d;
                            const double* src = g.data() + t * d;
                            for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                          }
                        });
}

// ---- row scatter / concat ----

Tensor row_scatter(const Tensor& base, const Tensor& rows, const std::vector<std::size_t>& positions) {
  check_defined(base, "row_scatter");
  check_defined(rows, "row_scatter");
  if (base.rank() != 2 || rows.rank() != 2 || base.shape()[1] != rows.shape()[1]) {
    throw std::invalid_argument("row_scatter: shape mismatch " + format_shape(base.shape()) +
                                " vs " + format_shape(rows.shape()));
  }
  if (rows.shape()[0] != positions.size()) {
    throw std::invalid_argument("row_scatter: " + std::to_string(rows.shape()[0]) + " rows vs " +
                                std::to_string(positions.size()) + " positions");
  }
  std::size_t t = base.shape()[0], d = base.shape()[1];
  {
    std::unordered_set<std::size_t> seen;
    for (std::size_t p : positions) {
      if (p >= t) throw std::out_of_range("row_scatter: position " + std::to_string(p) + " >= " + std::to_string(t));
      if (!seen.insert(p).second) {
        throw std::invalid_argument("row_scatter: duplicate position " + std::to_string(p));
      }
    }
  }
  std::vector<double> out = base.data();
  const auto& dr = rows.data();
  for (std::size_t i = 0; i < positions.size(); ++i) {
    std::memcpy(out.data() + positions[i] * d, dr.data() + i * d, d * sizeof(double));
  }
  auto bn = base.node();
  auto rn = rows.node();
  return make_op_output({t, d}, std::move(out), {bn, rn},
                        [bn, rn, positions, t, d](const std::vector<double>& g, GradStore& store) {
                          if (bn->requires_grad) {
                            std::vector<std::uint8_t> keep(t, 1);
                            for (std::size_t p : positions) keep[p] = 0;
                            auto& gb = store.buffer(bn.get());
                            for (std::size_t r = 0; r < t; ++r) {
                              if (!keep[r]) continue;
                              for (std::size_t j = 0; j < d; ++j) gb[r * d + j] += g[r * d + j];
                            }
                          }
                          if (rn->requires_grad) {
                            auto& gr = store.buffer(rn.get());
                            for (std::size_t i = 0; i < positions.size(); ++i) {
                              const double* src = g.data() + positions[i] * d;
                              for (std::size_t j = 0; j < d; ++j) gr[i * d + j] += src[j];
                            }
                          }
                        });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty input");
  std::size_t d = 0, total = 0;
  for (const Tensor& p : parts) {
    check_defined(p, "concat_rows");
    if (p.rank() != 2) {
      throw std::invalid_argument("concat_rows: expected rank 2, got " + format_shape(p.shape()));
    }
    if (d == 0) d = p.shape()[1];
    if (p.shape()[1] != d) {
      throw std::invalid_argument("concat_rows: column mismatch " + std::to_string(p.shape()[1]) +
                                  " vs " + std::to_string(d));
    }
    total += p.shape()[0];
  }
  std::vector<double> out(total * d);
  std::vector<NodePtr> nodes;
  std::vector<std::size_t> row_starts;
  std::size_t r0 = 0;
  for (const Tensor& p : parts) {
    std::memcpy(out.data() + r0 * d, p.data().data(), p.numel() * sizeof(double));
    nodes.push_back(p.node());
    row_starts.push_back(r0);
    r0 += p.shape()[0];
  }
  auto parent_nodes = nodes;
  return make_op_output({total, d}, std::move(out), std::move(parent_nodes),
                        [nodes, row_starts, d](const std::vector<double>& g, GradStore& store) {
                          for (std::size_t i = 0; i < nodes.size(); ++i) {
                            if (!nodes[i]->requires_grad) continue;
                            auto& gp = store.buffer(nodes[i].get());
                            std::size_t n = nodes[i]->numel();
                            const double* src = g.data() + row_starts[i] * d;
                            for (std::size_t j = 0; j < n; ++j) gp[j] += src[j];
                          }
                        });
}

// ---- rope ----

Tensor rope(const Tensor& x, const std::vector<int>& positions, double base) {
  check_defined(x, "rope");
  const Shape& s = x.shape();
  if (s.size() < 2) {
    throw std::invalid_argument("rope: expected rank >= 2, got " + format_shape(s));
  }
  std::size_t hd = s.back();
  std::size_t t = s[s.size() - 2];
  if (hd % 2 != 0) {
    throw std::invalid_argument("rope: head dim must be even, got " + std::to_string(hd));
  }
  if (positions.size() != t) {
    throw std::invalid_argument("rope: " + std::to_string(positions.size()) + " positions for " +
                                std::to_string(t) + " rows");
  }
  for (int p : positions) {
    if (p < 0) throw std::invalid_argument("rope: negative position " + std::to_string(p));
  }
  std::size_t half = hd / 2;
  std::size_t outer = x.numel() / (t * hd);

  // cos/sin per (row, pair), shared by forward and the inverse-rotation backward
  std::vector<double> cs(t * half), sn(t * half);
  for (std::size_t r = 0; r < t; ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      double theta = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      double angle = static_cast<double>(positions[r]) * theta;
      cs[r * half + i] = std::cos(angle);
      sn[r * half + i] = std::sin(angle);
    }
  }

  std::vector<double> out(x.numel());
  const auto& dx = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < t; ++r) {
      std::size_t rowbase = (o * t + r) * hd;
      for (std::size_t i = 0; i < half; ++i) {
        double c = cs[r * half + i], sv = sn[r * half + i];
        double x0 = dx[rowbase + 2 * i], x1 = dx[rowbase + 2 * i + 1];
        out[rowbase + 2 * i] = x0 * c - x1 * sv;
        out[rowbase + 2 * i + 1] = x0 * sv + x1 * c;
      }
    }
  }
  auto xn = x.node();
  return make_op_output(s, std::move(out), {xn},
                        [xn, outer, t, half, hd, cs = std::move(cs), sn = std::move(sn)](
                            const std::vector<double>& g, GradStore& store) {
                          if (!xn->requires_grad) return;
                          auto& gx = store.buffer(xn.get());
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t r = 0; r < t; ++r) {
                              std::size_t rowbase = (o * t + r) * hd;
                              for (std::size_t i = 0; i < half; ++i) {
                                double c = cs[r * half + i], sv = sn[r * half + i];
                                double g0 = g[rowbase + 2 * i], g1 = g[rowbase + 2 * i + 1];
                                gx[rowbase + 2 * i] += g0 * c + g1 * sv;
                                gx[rowbase + 2 * i + 1] += -g0 * sv + g1 * c;
                              }
                            }
                          }
                        });
}

// ---- reductions / loss ----

Tensor sum_all(const Tensor& a) {
  check_defined(a, "sum_all");
  double s = 0.0;
  for (double v : a.data()) s += v;
  auto an = a.node();
  return make_op_output({}, {s}, {an}, [an](const std::vector<double>& g, GradStore& store) {
    if (!an->requires_grad) return;
    auto& ga = store.buffer(an.get());
    for (double& v : ga) v += g[0];
  });
}

Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask) {
  check_defined(logits, "cross_entropy_masked");
  if (logits.rank() != 2) {
    throw std::invalid_argument("cross_entropy_masked: logits must be [T, V], got " +
                                format_shape(logits.shape()));
  }
  std::size_t t = logits.shape()[0], v = logits.shape()[1];
  if (targets.size() != t || mask.size() != t) {
    throw std::invalid_argument("cross_entropy_masked: " + std::to_string(t) + " rows vs " +
                                std::to_string(targets.size()) + " targets, " +
                                std::to_string(mask.size()) + " mask entries");
  }
  std::size_t n_active = 0;
  for (std::size_t r = 0; r < t; ++r) {
    if (!mask[r]) continue;  // masked targets are never read
    ++n_active;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v) {
      throw std::out_of_range("cross_entropy_masked: target " + std::to_string(targets[r]) +
                              " outside vocab of " + std::to_string(v) + " at row " +
                              std::to_string(r));
    }
  }
  if (n_active == 0) {
    throw std::invalid_argument("cross_entropy_masked: all positions masked, loss is empty");
  }

  const auto& dl = logits.data();
  std::vector<double> probs(t * v, 0.0);  // rows stay zero where masked
  double loss = 0.0;
  for (std::size_t r = 0; r < t; ++r) {
    if (!mask[r]) continue;
    const double* row = dl.data() + r * v;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      double e = std::exp(row[j] - mx);
      probs[r * v + j] = e;
      sum += e;
    }
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] /= sum;
    loss += std::log(sum) + mx - row[targets[r]];
  }
  loss /= static_cast<double>(n_active);

  auto ln = logits.node();
  return make_op_output(
      {}, {loss}, {ln},
      [ln, targets, mask, t, v, n_active, probs = std::move(probs)](const std::vector<double>& g,
                                                                    GradStore& store) {
        if (!ln->requires_grad) return;
        auto& gl = store.buffer(ln.get());
        double w = g[0] / static_cast<double>(n_active);
        for (std::size_t r = 0; r < t; ++r) {
          if (!mask[r]) continue;
          double* dst = gl.data() + r * v;
          const double* p = probs.data() + r * v;
          for (std::size_t j = 0; j < v; ++j) dst[j] += w * p[j];
          dst[static_cast<std::size_t>(targets[r])] -= w;
        }
      });
}

// ---- backward ----

namespace {

// Iterative DFS post-order from the root.
std::vector<TapeNode*> topo_order(TapeNode* root) {
  std::vector<TapeNode*> order;
  std::unordered_set<TapeNode*> visited;
  std::vector<std::pair<TapeNode*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TapeNode* parent = node->parents[next++].get();
      if (!visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

void run_backward(const Tensor& loss, GradMap* sink) {
  if (!loss.defined()) throw std::invalid_argument("backward: undefined tensor");
  TapeNode* root = loss.node().get();
  if (root->numel() != 1) {
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                format_shape(root->shape));
  }
  if (root->is_leaf() && !root->requires_grad) {
    throw std::runtime_error("backward: tensor is detached from any gradient tape");
  }
  if (root->consumed) {
    throw std::runtime_error("backward: tape already replayed for this root; rebuild the graph");
  }

  std::vector<TapeNode*> order = topo_order(root);
  GradStore store;
  store.buffer(root)[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TapeNode* node = *it;
    if (!store.has(node)) continue;  // no gradient flowed here
    const std::vector<double>& g = store.at(node);
    if (node->backward_fn) {
      node->backward_fn(g, store);
    } else if (node->requires_grad) {
      if (sink) {
        auto& buf = (*sink)[node];
        if (buf.empty()) buf.assign(node->numel(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
      } else {
        if (node->grad.empty()) node->grad.assign(node->numel(), 0.0);
        for (std::size_t i = 0; i < g.size(); ++i) node->grad[i] += g[i];
      }
    }
  }
  root->consumed = true;
}

}  // namespace

void backward(const Tensor& loss) { run_backward(loss, nullptr); }

void backward_into(const Tensor& loss, GradMap& sink) { run_backward(loss, &sink); }

// ---- serialization ----

namespace {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  check_defined(t, "save_tensor");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_tensor: cannot open " + path.string());
  os.write("SMT1", 4);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) write_le<std::uint64_t>(os, d);
  for (double v : t.data()) write_le<double>(os, v);
  if (!os) throw std::runtime_error("save_tensor: write failed for " + path.string());
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_tensor: cannot open " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "SMT1", 4) != 0) {
    throw std::runtime_error("load_tensor: bad magic in " + path.string());
  }
  std::uint32_t rank = read_le<std::uint32_t>(is);
  if (rank > 8) throw std::runtime_error("load_tensor: implausible rank in " + path.string());
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(read_le<std::uint64_t>(is));
  std::size_t n = shape_numel(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = read_le<double>(is);
  if (!is) throw std::runtime_error("load_tensor: truncated file " + path.string());
  return Tensor::from_data(shape, std::move(data));
}

}  // namespace smolpipe
