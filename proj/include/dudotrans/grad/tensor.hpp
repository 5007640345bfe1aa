#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <sys/mman.h>

namespace dudotrans::grad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for incompatible operand shapes. The message names every shape involved.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Allocator with a fixed 64-byte alignment. Vectorized Eigen kernels peel
/// unaligned heads, so their rounding depends on where a buffer starts;
/// fixing the alignment makes results independent of the allocator's history.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  /// Large blocks are mapped directly. Left to malloc, glibc's adaptive mmap
  /// threshold moves them into the heap, where aligned blocks of varying size
  /// fragment it without bound over a long training run.
  static constexpr std::size_t kMapBytes = std::size_t{1} << 17;

  T* allocate(std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    if (bytes < kMapBytes) return static_cast<T*>(::operator new(bytes, kAlign));
    void* p = ::mmap(nullptr, bytes, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (p == MAP_FAILED) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    if (bytes < kMapBytes) {
      ::operator delete(p, kAlign);
    } else {
      ::munmap(p, bytes);
    }
  }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct Node {
  Shape shape;
  Buffer<T> data;
  Buffer<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool on_tape = false;  // produced by a recorded primitive

  T* grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

/// Dense row-major array with an optional gradient. Copies share the
/// underlying storage, like a handle; use `clone()` for a deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->data.assign(grad::numel(shape), T(0));
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (values.size() != grad::numel(shape)) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " given " + std::to_string(values.size()) +
                       " values");
    }
    node_->shape = std::move(shape);
    node_->data.assign(values.begin(), values.end());
    node_->requires_grad = requires_grad;
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.node_->data.begin(), t.node_->data.end(), value);
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) { return Tensor(Shape{1}, {value}, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  /// Size of dimension i; negative i counts from the end.
  std::size_t dim(std::ptrdiff_t i) const {
    const auto r = static_cast<std::ptrdiff_t>(rank());
    if (i < 0) i += r;
    if (i < 0 || i >= r) throw ShapeError("dimension index out of range for shape " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(i)];
  }

  std::span<T> data() & { return node_->data; }
  std::span<const T> data() const& { return node_->data; }
  // A view into a temporary would dangle once the full expression ends.
  void data() && = delete;
  void data() const&& = delete;

  bool has_grad() const { return !node_->grad.empty(); }
  /// Empty span when no gradient has been materialized.
  std::span<const T> grad() const& { return node_->grad; }
  void grad() const&& = delete;
  std::span<T> mutable_grad() { return {node_->grad_buffer(), node_->data.size()}; }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool on_tape() const { return node_->on_tape; }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  /// Deep copy of the values as a fresh leaf without gradient.
  Tensor clone() const {
    Tensor t(shape());
    t.node_->data = node_->data;
    return t;
  }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Records backward rules of primitives in execution order. Rules run in
/// reverse recording order, which is a valid reverse topological order
/// because a primitive can only consume tensors that already exist.
///
/// A tape collects records only while it is active on the current thread
/// (see TapeScope); distinct threads have independent active tapes.
template <typename T>
class Tape {
 public:
  using Rule = std::function<void()>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(Rule rule) { rules_.push_back(std::move(rule)); }
  std::size_t size() const { return rules_.size(); }
  void clear() { rules_.clear(); }

  /// Seeds d(loss)/d(loss) = 1, runs every recorded rule once in reverse and
  /// clears the tape. Leaf gradients accumulate with +=.
  void backward(const Tensor<T>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    if (!loss.on_tape()) throw std::invalid_argument("backward: loss was not produced on a tape");
    loss.node().grad_buffer()[0] += T(1);
    for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
    clear();
  }

  static Tape* active() { return current_; }

 private:
  template <typename>
  friend class TapeScope;
  template <typename>
  friend class NoGradScope;
  std::vector<Rule> rules_;
  inline static thread_local Tape* current_ = nullptr;
};

/// Makes `tape` the active tape for this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::current_) { Tape<T>::current_ = &tape; }
  ~TapeScope() { Tape<T>::current_ = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (no active tape) for the scope's lifetime.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::current_) { Tape<T>::current_ = nullptr; }
  ~NoGradScope() { Tape<T>::current_ = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Runs backward on the active tape. Throws if none is active.
template <typename T>
void backward(const Tensor<T>& loss) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) throw std::invalid_argument("backward: no active tape");
  tape->backward(loss);
}

}  // namespace dudotrans::grad
