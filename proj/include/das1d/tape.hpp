#pragma once

// Define-by-run reverse-mode autodiff at tensor granularity. A Tape records
// one node per tensor operation; backward() walks nodes in reverse creation
// order (creation order is already topological) and each node's closure
// pushes vector-Jacobian products into its parents' gradient buffers.
//
// The tape is rebuilt every forward pass. To keep that cheap, value and
// gradient buffers are recycled through a size-keyed pool that survives
// reset(); value buffers return to the pool when the last Tensor holding
// them dies. One tape per training loop, reset() per step.
//
// Not thread-safe; use one Tape (and one model) per thread.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "das1d/tensor.hpp"

namespace das1d {

// Trainable tensor with gradient and optimizer slots. Parameters own their
// storage; copying is explicit via clone() so two models never alias.
struct Parameter {
  Tensor value;
  std::vector<double> grad;
  std::vector<double> m, v;  // Adam moments, sized on first Adam step
  long step = 0;
  bool frozen = false;     // skipped by optimizer_step
  bool has_grad = false;   // set when a backward pass covered this parameter

  Parameter() = default;
  explicit Parameter(Tensor init)
      : value(std::move(init)), grad(value.numel(), 0.0) {}

  Parameter(const Parameter&) = delete;
  Parameter& operator=(const Parameter&) = delete;
  Parameter(Parameter&&) = default;
  Parameter& operator=(Parameter&&) = default;

  bool empty() const { return value.data == nullptr; }

  void zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0);
    has_grad = false;
  }

  Parameter clone() const {
    Parameter p;
    if (!empty()) {
      p.value = value.clone();
      p.grad.assign(grad.begin(), grad.end());
      p.m = m;
      p.v = v;
      p.step = step;
      p.frozen = frozen;
      p.has_grad = has_grad;
    }
    return p;
  }

  // Overwrite values (and reset optimizer state) from another parameter.
  void copy_values_from(const Parameter& src) {
    if (empty() != src.empty() || (!empty() && value.numel() != src.value.numel()))
      throw std::invalid_argument("parameter copy: size mismatch");
    if (empty()) return;
    *value.data = *src.value.data;
    std::fill(grad.begin(), grad.end(), 0.0);
    m.clear();
    v.clear();
    step = 0;
    has_grad = false;
  }
};

namespace detail {

struct BufferPool {
  std::unordered_map<std::size_t, std::vector<std::vector<double>>> free;

  std::vector<double> take(std::size_t n) {
    auto it = free.find(n);
    if (it != free.end() && !it->second.empty()) {
      std::vector<double> v = std::move(it->second.back());
      it->second.pop_back();
      return v;
    }
    return std::vector<double>(n);
  }

  void give(std::vector<double>&& v) {
    if (v.empty()) return;
    free[v.size()].push_back(std::move(v));
  }
};

}  // namespace detail

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const std::vector<double>&)>;

  Tape() : pool_(std::make_shared<detail::BufferPool>()) {}

  bool grad_enabled() const { return grad_enabled_; }
  void set_grad_enabled(bool on) { grad_enabled_ = on; }

  std::size_t size() const { return nodes_.size(); }

  // Pooled value buffer wrapped so it returns to the pool on release.
  SharedVec alloc(long numel) {
    auto n = static_cast<std::size_t>(numel);
    auto* raw = new std::vector<double>(pool_->take(n));
    std::weak_ptr<detail::BufferPool> wp = pool_;
    return SharedVec(raw, [wp](std::vector<double>* p) {
      if (auto pool = wp.lock())
        pool->give(std::move(*p));
      delete p;
    });
  }

  // Registers a trainable parameter as a leaf and returns a tracked view of
  // its storage. Backward accumulates into p.grad.
  Tensor watch(Parameter& p) {
    if (p.empty()) throw std::invalid_argument("watch on empty parameter");
    if (!grad_enabled_) return Tensor(p.value.shape, p.value.data, -1);
    int id = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{p.value.numel(), {}, {}, &p});
    watched_.push_back(&p);
    return Tensor(p.value.shape, p.value.data, id);
  }

  // True when gradients flow through any of the given inputs.
  bool tracking(std::initializer_list<const Tensor*> inputs) const {
    if (!grad_enabled_) return false;
    for (const Tensor* t : inputs)
      if (t->tracked()) return true;
    return false;
  }

  // Records an op node. `parents` are the tracked input node ids (untracked
  // inputs are simply omitted). `fn` receives the output gradient and pushes
  // into parents via grad_of() / into parameters directly.
  template <class F>
  int add_node(long numel, std::span<const int> parents, F&& fn) {
    int id = static_cast<int>(nodes_.size());
    Node n{numel, BackwardFn(std::forward<F>(fn)), {}, nullptr};
    n.parents.assign(parents.begin(), parents.end());
    nodes_.push_back(std::move(n));
    return id;
  }

  // Gradient buffer of a node, allocated (zeroed) on first touch.
  std::vector<double>& grad_of(int id) {
    auto& g = nodes_[static_cast<std::size_t>(id)].grad;
    if (g.empty()) {
      g = pool_->take(static_cast<std::size_t>(nodes_[id].numel));
      std::fill(g.begin(), g.end(), 0.0);
    }
    return g;
  }

  // Reverse pass from a scalar loss. Parameters on the path accumulate into
  // their grad; watched parameters off the path keep zeros but are still
  // marked as covered. Values are untouched, so the tape can keep recording.
  void backward(const Tensor& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward: loss must be a scalar");
    if (!loss.tracked())
      throw std::invalid_argument("backward: loss is not tracked on this tape");

    int root = loss.node;
    std::vector<char> reach(nodes_.size(), 0);
    reach[root] = 1;
    for (int i = root; i >= 0; --i) {
      if (!reach[i]) continue;
      for (int p : nodes_[i].parents) reach[p] = 1;
    }

    grad_of(root)[0] = 1.0;
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!reach[i] || n.grad.empty()) continue;
      if (n.leaf != nullptr) {
        auto& pg = n.leaf->grad;
        for (std::size_t k = 0; k < pg.size(); ++k) pg[k] += n.grad[k];
      } else if (n.backward) {
        n.backward(*this, n.grad);
      }
      pool_->give(std::move(n.grad));
      n.grad.clear();
    }
    for (Parameter* p : watched_) p->has_grad = true;
  }

  // Drop all nodes, keep the buffer pool.
  void reset() {
    for (auto& n : nodes_)
      if (!n.grad.empty()) pool_->give(std::move(n.grad));
    nodes_.clear();
    watched_.clear();
  }

 private:
  struct Node {
    long numel = 0;
    BackwardFn backward;
    std::vector<int> parents;
    Parameter* leaf = nullptr;
    std::vector<double> grad;  // allocated during the reverse pass
  };

  std::vector<Node> nodes_;
  std::vector<Parameter*> watched_;
  std::shared_ptr<detail::BufferPool> pool_;
  bool grad_enabled_ = true;
};

// Scoped no-grad: evaluation passes share model code with training.
struct NoGradGuard {
  explicit NoGradGuard(Tape& t) : tape(t), prev(t.grad_enabled()) {
    tape.set_grad_enabled(false);
  }
  ~NoGradGuard() { tape.set_grad_enabled(prev); }
  Tape& tape;
  bool prev;
};

}  // namespace das1d
