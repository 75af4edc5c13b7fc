#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "barl/nd_array.hpp"

namespace barl::ad {

/// Thrown when an operation receives or would produce invalid numerics
/// (non-finite values, bad shapes are reported via shape_error instead).
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct shape_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Tape;

/// Handle to a node on a Tape. Cheap to copy; lifetime bounded by the tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

  const Tensor& value() const;
  /// Gradient of the last backward() root w.r.t. this node. Zero-shaped
  /// until backward has run.
  const Tensor& grad() const;
  bool requires_grad() const;

  /// Value of a single-element node.
  Real item() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

enum class Padding { Same, Valid };

/// Reverse-mode tape. Nodes are recorded in construction order, which is a
/// topological order by construction; backward() visits them exactly once in
/// reverse. Single-threaded per training step.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Tensor value);
  /// Trainable leaf. Gradient is accumulated on the node during backward and
  /// can be read back through the returned handle.
  Var leaf(Tensor value);

  size_t num_nodes() const { return nodes_.size(); }

  /// Populates grad on every requires_grad node reachable from root.
  /// root must be a single-element tensor. Calling twice on the same tape is
  /// an error (gradients would silently accumulate).
  void backward(Var root);

  void check_finite(Var v, const char* opname) const;

 private:
  friend class Var;
  friend struct OpBuilder;

  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_live = false;  // grad buffer allocated and zeroed
    std::function<void(Tape&)> backprop;
  };

  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }

  Tensor& grad_buffer(int id);

  // deque: node references (handed out via Var::value()/grad()) must stay
  // valid while later ops append nodes
  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Operations. Free functions; every op returns a fresh node on the inputs'
// tape with the backward rule recorded.
// ---------------------------------------------------------------------------

// Elementwise suite.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var scalar_mul(Var x, Real s);
Var add_scalar(Var x, Real s);
Var relu(Var x);
Var sigmoid(Var x);
Var square(Var x);
Var abs(Var x);
Var sqrt(Var x);
Var recip(Var x);
/// log(max(x, eps)); gradient is zero on the clamped region.
Var log_safe(Var x, Real eps);
/// x^e for x >= 0 (x floored at 1e-300 before the power).
Var pow_scalar(Var x, Real e);

/// Group normalization over [N,C,D,H,W]; statistics per (sample, group).
Var group_norm(Var x, int groups, Var gamma, Var beta, Real eps);

/// Per-voxel softmax over the channel axis of [N,C,...]; numerically
/// stabilized by max subtraction. Rejects non-finite input.
Var softmax_channels(Var x);

/// Cross-correlation of [N,Cin,D,H,W] with [Cout,Cin,k,k,k] kernels plus a
/// [Cout] bias. k must be odd; stride 1 or 2.
Var conv3d(Var x, Var w, Var b, int stride, Padding pad);

/// Nearest-neighbour 2x upsampling of the three spatial axes of [N,C,D,H,W].
Var upsample_nearest2(Var x);

enum class Reduce { Sum, Mean };
/// Reduce over a nonempty set of axes; reduced axes are dropped from the
/// output shape (a full reduction yields shape [1]).
Var reduce(Var x, Reduce kind, const std::vector<int>& axes);
Var reduce_all(Var x, Reduce kind);
inline Var sum(Var x) { return reduce_all(x, Reduce::Sum); }
inline Var mean(Var x) { return reduce_all(x, Reduce::Mean); }

/// Mean of f[C,D,H,W] over the voxels selected by mask[D,H,W] -> [C].
/// mask must select at least one voxel.
Var masked_mean(Var f, const ByteMask& mask);

/// Concatenate along axis 1 of [N,C,...].
Var concat_channels(Var a, Var b);

/// Multiply every channel of x[N,C,...] by the single-channel map m[N,1,...].
Var mul_channelmap(Var x, Var m);

/// Sum over the channel axis, keeping it: [N,C,...] -> [N,1,...].
Var channel_sum(Var x);

/// Same data, new shape; gradient flows through.
Var reshape(Var x, Shape shape);

/// Value copy with no gradient path.
Var detach(Var x);

void backward(Var root);

// Non-differentiable helpers used around the tape.
/// Per-voxel argmax over the channel axis of [C,D,H,W] (ties -> lowest class).
IntVolume argmax_channels(const Tensor& p);
/// One-hot [C,D,H,W] from labels [D,H,W].
Tensor one_hot(const IntVolume& labels, int classes);

}  // namespace barl::ad
