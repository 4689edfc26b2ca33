#include "steerscope/tape.hpp"

#include "steerscope/errors.hpp"

namespace steerscope {

const Tensor& Var::value() const { return tape_->value(id_); }
const Tensor& Var::grad() const { return tape_->grad(id_); }
bool Var::requires_grad() const { return tape_->requires_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  Record rec;
  rec.value = std::move(value);
  rec.requires_grad = requires_grad && record_backward_;
  rec.is_leaf = true;
  rec.op = "leaf";
  records_.push_back(std::move(rec));
  return Var(this, records_.size() - 1);
}

Var Tape::push(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward,
               std::string_view op) {
  Record rec;
  rec.value = std::move(value);
  rec.op = op;
  bool needs = false;
  for (auto in : inputs) {
    if (in >= records_.size()) throw ContractError("tape input recorded out of order");
    needs = needs || records_[in].requires_grad;
  }
  if (needs && record_backward_) {
    rec.requires_grad = true;
    rec.backward = std::move(backward);
    rec.inputs = std::move(inputs);
  }
  records_.push_back(std::move(rec));
  return Var(this, records_.size() - 1);
}

Var Tape::watch(Var a) {
  if (&a.tape() != this) throw ContractError("watch: variable belongs to another tape");
  const std::size_t ia = a.id();
  Record rec;
  rec.value = records_[ia].value;
  rec.op = "watch";
  if (record_backward_) {
    rec.requires_grad = true;
    rec.inputs = {ia};
    if (records_[ia].requires_grad)
      rec.backward = [ia](Tape& t, std::size_t self) {
        Tensor& g = t.grad_buffer(ia);
        g += t.grad(self);
      };
  }
  records_.push_back(std::move(rec));
  return Var(this, records_.size() - 1);
}

const Tensor& Tape::grad(std::size_t id) const {
  const Record& rec = records_[id];
  if (rec.has_grad) return rec.grad;
  // Callers asking for a gradient that never arrived get zeros of the right shape.
  auto& scratch = const_cast<Tensor&>(zero_scratch_);
  if (!scratch.same_shape(rec.value)) scratch = Tensor(rec.value.shape(), 0.0);
  return zero_scratch_;
}

Tensor& Tape::grad_buffer(std::size_t id) {
  Record& rec = records_[id];
  if (!rec.has_grad) {
    if (rec.grad.same_shape(rec.value))
      rec.grad.fill(0.0);
    else
      rec.grad = Tensor(rec.value.shape(), 0.0);
    rec.has_grad = true;
  }
  return rec.grad;
}

void Tape::backward(Var loss, bool accumulate_leaves) {
  if (loss.valid() && &loss.tape() != this) throw ContractError("loss belongs to another tape");
  const std::size_t root = loss.id();
  if (root >= records_.size()) throw ContractError("loss is not on the tape");
  if (records_[root].value.size() != 1)
    throw ContractError("backward requires a scalar loss, got shape " +
                        shape_string(records_[root].value.shape()));
  for (auto& rec : records_)
    if (!(accumulate_leaves && rec.is_leaf)) rec.has_grad = false;
  if (!records_[root].requires_grad) return;
  grad_buffer(root)[0] = 1.0;
  for (std::size_t i = root + 1; i-- > 0;) {
    Record& rec = records_[i];
    if (!rec.has_grad || !rec.backward) continue;
    rec.backward(*this, i);
  }
}

}  // namespace steerscope
