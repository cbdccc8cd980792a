#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hyatt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Raised when operand shapes disagree. `axis()` names the offending axis.
class DimensionError : public std::invalid_argument {
 public:
  DimensionError(const std::string& op, std::string axis, const std::string& detail)
      : std::invalid_argument(op + ": dimension mismatch on axis '" + axis + "': " + detail),
        axis_(std::move(axis)) {}

  const std::string& axis() const noexcept { return axis_; }

 private:
  std::string axis_;
};

/// Dense row-major tensor handle. Copies share storage (including the
/// gradient buffer); use clone() for an independent copy.
template <class T>
class Tensor {
  struct Storage {
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

 public:
  using value_type = T;

  Tensor() : storage_(std::make_shared<Storage>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), storage_(std::make_shared<Storage>()) {
    check_extents();
    storage_->data.assign(numel_of(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), storage_(std::make_shared<Storage>()) {
    check_extents();
    if (values.size() != numel_of(shape_)) {
      throw DimensionError("Tensor", "numel",
                           "shape " + hyatt::to_string(shape_) + " needs " + std::to_string(numel_of(shape_)) +
                               " values, got " + std::to_string(values.size()));
    }
    storage_->data = std::move(values);
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return storage_->data.size(); }
  bool empty() const noexcept { return storage_->data.empty(); }

  /// Extent of axis `i`; negative values count from the back.
  std::size_t dim(int i) const {
    const int r = static_cast<int>(shape_.size());
    const int j = i < 0 ? r + i : i;
    if (j < 0 || j >= r) throw std::out_of_range("Tensor::dim: axis " + std::to_string(i) + " out of range");
    return shape_[static_cast<std::size_t>(j)];
  }

  std::span<T> data() noexcept { return storage_->data; }
  std::span<const T> data() const noexcept { return storage_->data; }
  T* ptr() noexcept { return storage_->data.data(); }
  const T* ptr() const noexcept { return storage_->data.data(); }

  T item() const {
    if (numel() != 1) throw DimensionError("item", "numel", "expected a single element, got " + std::to_string(numel()));
    return storage_->data[0];
  }

  T operator[](std::size_t i) const { return storage_->data[i]; }

  bool requires_grad() const noexcept { return storage_->requires_grad; }
  Tensor& set_requires_grad(bool on = true) {
    storage_->requires_grad = on;
    return *this;
  }

  // The gradient slot belongs to the shared storage, so it stays writable
  // through const handles (backward closures hold const copies of inputs).
  bool has_grad() const noexcept { return !storage_->grad.empty(); }
  std::span<T> grad() const {
    ensure_grad();
    return storage_->grad;
  }
  void ensure_grad() const {
    if (storage_->grad.size() != storage_->data.size()) storage_->grad.assign(storage_->data.size(), T(0));
  }
  void zero_grad() const { std::fill(storage_->grad.begin(), storage_->grad.end(), T(0)); }
  void drop_grad() const { std::vector<T>().swap(storage_->grad); }

  /// Same storage, new shape (element count must match).
  Tensor view(Shape shape) const {
    if (numel_of(shape) != numel()) {
      throw DimensionError("view", "numel", hyatt::to_string(shape_) + " -> " + hyatt::to_string(shape));
    }
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  Tensor clone() const { return Tensor(shape_, storage_->data); }

  bool shares_storage(const Tensor& other) const noexcept { return storage_ == other.storage_; }
  const void* storage_id() const noexcept { return storage_.get(); }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(storage_->data.begin(), storage_->data.end()));
  }

 private:
  void check_extents() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0) throw DimensionError("Tensor", std::to_string(i), "extents must be positive");
    }
  }

  Shape shape_;
  std::shared_ptr<Storage> storage_;
};

/// Ordered record of differentiable operations. Ops record onto the tape
/// that is active on the calling thread (see TapeGuard).
template <class T>
class Tape {
 public:
  struct Entry {
    std::string op;
    Tensor<T> output;
    std::function<void()> backward;
  };

  void record(std::string op, Tensor<T> output, std::function<void()> backward) {
    output.set_requires_grad(true);
    entries_.push_back({std::move(op), std::move(output), std::move(backward)});
  }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Gradients of
  /// recorded outputs are reset first so repeated calls accumulate only into
  /// leaves.
  void backward(Tensor<T> loss) {
    if (loss.numel() != 1) {
      throw DimensionError("backward", "loss", "loss must be scalar, got shape " + to_string(loss.shape()));
    }
    for (auto& e : entries_) {
      e.output.ensure_grad();
      e.output.zero_grad();
    }
    loss.ensure_grad();
    loss.grad()[0] = T(1);
    visited_.clear();
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      if (trace_) visited_.push_back(it->op);
      it->backward();
    }
  }

  void clear() { entries_.clear(); }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }

  void set_trace(bool on) { trace_ = on; }
  const std::vector<std::string>& visited() const noexcept { return visited_; }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<Entry> entries_;
  std::vector<std::string> visited_;
  bool trace_ = false;
};

/// Makes `tape` the active tape for the current thread for the guard's lifetime.
template <class T>
class TapeGuard {
 public:
  explicit TapeGuard(Tape<T>& tape) : previous_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeGuard() { Tape<T>::active() = previous_; }
  TapeGuard(const TapeGuard&) = delete;
  TapeGuard& operator=(const TapeGuard&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording on the current thread.
template <class T>
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradGuard() { Tape<T>::active() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <class T>
Tape<T>* recording_tape(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto* t : inputs) {
    if (t && !t->empty() && t->requires_grad()) return tape;
  }
  return nullptr;
}

template <class T>
Tape<T>* recording_tape(const std::vector<Tensor<T>>& inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  for (const auto& t : inputs) {
    if (t.requires_grad()) return tape;
  }
  return nullptr;
}

template <class T>
bool wants_grad(const Tensor<T>& t) {
  return !t.empty() && t.requires_grad();
}

}  // namespace detail

}  // namespace hyatt
