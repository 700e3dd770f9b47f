#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace smolpipe {

using Shape = std::vector<std::size_t>;

std::string format_shape(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct TapeNode;
using NodePtr = std::shared_ptr<TapeNode>;

// Per-node accumulation buffers used during one reverse sweep. Leaves keep
// their gradient on the node afterwards; intermediates are transient.
class GradStore {
 public:
  std::vector<double>& buffer(const TapeNode* node);
  bool has(const TapeNode* node) const { return buffers_.count(node) != 0; }
  const std::vector<double>& at(const TapeNode* node) const { return buffers_.at(node); }

 private:
  std::unordered_map<const TapeNode*, std::vector<double>> buffers_;
};

// One recorded primitive op: parents plus the closure that routes the output
// gradient back to them. Leaves have no backward_fn.
struct TapeNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // leaves only, allocated on first accumulation
  bool requires_grad = false;
  bool consumed = false;  // set once backward() has replayed from this root
  std::vector<NodePtr> parents;
  std::function<void(const std::vector<double>& out_grad, GradStore& store)> backward_fn;

  std::size_t numel() const { return data.size(); }
  bool is_leaf() const { return !backward_fn; }
};

bool grad_mode_enabled();

}  // namespace detail

// Disables tape recording in its scope (inference, data generation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major N-d array of doubles with an optional reverse-mode tape.
// Copies share the underlying node; data is immutable once ops have consumed
// it, except for parameter updates between training steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data, bool requires_grad = false);
  static Tensor randn(const Shape& shape, std::mt19937_64& rng, double stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  const std::vector<double>& data() const;
  std::vector<double>& mutable_data();

  double at(const std::vector<std::size_t>& index) const;
  double operator[](std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  void set_requires_grad(bool v);

  bool has_grad() const;
  // Accumulated gradient of the last backward() pass(es); throws if absent.
  Tensor grad() const;
  std::vector<double>& grad_data();
  void zero_grad();

  // Identity key for keying optimizer state / gradient maps.
  const void* node_key() const { return node_.get(); }

  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

// ---- forward ops (all record onto the tape when grad mode is on) ----

// Contraction over the last dim of a and second-to-last of b. Leading batch
// dims broadcast (equal or 1); inner dims must match exactly.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);       // exact same shape
Tensor sub(const Tensor& a, const Tensor& b);       // exact same shape
Tensor mul(const Tensor& a, const Tensor& b);       // elementwise, exact shape
Tensor scale(const Tensor& a, double s);
Tensor add_bias(const Tensor& a, const Tensor& bias);  // [..., n] + [n]
Tensor gelu(const Tensor& a);                          // exact erf form

// Max-subtracted softmax along the given axis; outputs sum to 1.
Tensor softmax(const Tensor& a, std::size_t axis);

// Transpose by perm, then reinterpret row-major as new_shape. The data copy
// happens once; gradient applies the inverse index map.
Tensor permute_reshape(const Tensor& a, const std::vector<std::size_t>& perm, const Shape& new_shape);
Tensor reshape(const Tensor& a, const Shape& new_shape);
Tensor transpose2d(const Tensor& a);

// Normalizes the last dim: (x - mean) / sqrt(var + eps) * gamma + beta.
Tensor layer_norm(const Tensor& a, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Gathers rows of table by id: out[t] = table[ids[t]].
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// Copies base, overwriting row positions[i] with rows[i]. Row count of rows
// must equal positions.size().
Tensor row_scatter(const Tensor& base, const Tensor& rows, const std::vector<std::size_t>& positions);

// Concatenates [n_i, d] blocks along the row axis.
Tensor concat_rows(const std::vector<Tensor>& parts);

// Rotary embedding on the last dim (pairs), positions indexed along the
// second-to-last axis: theta_i = base^(-2i/d), pair (2i, 2i+1) rotated by
// position * theta_i. Pure rotation, norm preserving per pair.
Tensor rope(const Tensor& x, const std::vector<int>& positions, double base);

Tensor sum_all(const Tensor& a);

// Mean negative log-likelihood over positions with mask true. Masked rows
// contribute exactly zero and their targets are never read.
Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<std::uint8_t>& mask);

// ---- reverse pass ----

using GradMap = std::unordered_map<const void*, std::vector<double>>;

// Replays the tape from a scalar root, accumulating into each requires_grad
// leaf's persistent gradient. A second call on the same root throws.
void backward(const Tensor& loss);

// Same sweep, but leaf gradients go into `sink` (keyed by node_key) instead
// of the nodes, so independent tapes can run on separate threads.
void backward_into(const Tensor& loss, GradMap& sink);

// ---- serialization: magic "SMT1", u32 rank, u64 extents, f64 payload, LE ----

void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace smolpipe
