#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "steerscope/tensor.hpp"

namespace steerscope {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  const Tensor& grad() const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode record of a computation.
///
/// Records are appended in evaluation order, so a record's inputs always have
/// smaller ids. backward() walks the records once, from the loss down to id 0.
/// A tape built with `record_backward = false` keeps values only; use it for
/// inference-only passes.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  explicit Tape(bool record_backward = true) : record_backward_(record_backward) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = false);
  Var constant(Tensor value) { return leaf(std::move(value), false); }
  /// Identity node that always receives a gradient, whether or not its input does.
  Var watch(Var a);

  /// Appends an operation result. `backward` is dropped when no input needs a gradient.
  Var push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward,
           std::string_view op);

  /// Computes d(loss)/d(record) for every record the loss depends on. Gradients of
  /// the previous call are discarded unless `accumulate_leaves` is set, in which case
  /// leaf gradients are summed across calls.
  void backward(Var loss, bool accumulate_leaves = false);

  const Tensor& value(std::size_t id) const { return records_[id].value; }
  const Tensor& grad(std::size_t id) const;
  bool has_grad(std::size_t id) const { return records_[id].has_grad; }
  bool requires_grad(std::size_t id) const { return records_[id].requires_grad; }
  bool recording() const noexcept { return record_backward_; }
  std::string_view op_name(std::size_t id) const { return records_[id].op; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return records_[id].inputs; }
  std::size_t size() const noexcept { return records_.size(); }

  /// Gradient buffer of `id`, zero-initialised on first use. For backward closures.
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Record {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    bool is_leaf = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::string_view op;
  };

  bool record_backward_;
  std::deque<Record> records_;
  Tensor zero_scratch_;
};

}  // namespace steerscope
