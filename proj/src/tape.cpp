#include "fnoseg/tape.hpp"

#include <algorithm>
#include <numeric>

namespace fnoseg {

template <class T>
Parameter<T>::Parameter(std::string n, std::vector<std::size_t> s, T fill) : name(std::move(n)), shape(std::move(s)) {
  const std::size_t count =
      std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<std::size_t>());
  value.assign(count, fill);
  grad.assign(count, T(0));
}

template <class T>
void Parameter<T>::zero_grad() {
  std::fill(grad.begin(), grad.end(), T(0));
  grad_fresh = false;
}

template <class T>
typename Tape<T>::Node& Tape<T>::node(Var v) {
  if (!v.valid() || v.id >= nodes_.size()) throw StateError("tape: invalid variable handle");
  return nodes_[v.id];
}

template <class T>
const typename Tape<T>::Node& Tape<T>::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw StateError("tape: invalid variable handle");
  return nodes_[v.id];
}

template <class T>
Var Tape<T>::leaf(Field<T> value, bool requires_grad) {
  if (consumed_) throw StateError("tape: already replayed; clear() before recording a new forward pass");
  nodes_.push_back(Node{std::move(value), nullptr, nullptr, requires_grad && record_});
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
Var Tape<T>::record(Field<T> value, BackwardFn fn) {
  if (consumed_) throw StateError("tape: already replayed; clear() before recording a new forward pass");
  if (!record_) fn = nullptr;
  const bool needs = static_cast<bool>(fn);
  nodes_.push_back(Node{std::move(value), nullptr, std::move(fn), needs});
  return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

template <class T>
Field<T>& Tape<T>::grad(Var v) {
  Node& n = node(v);
  if (!n.grad) n.grad = std::make_unique<Field<T>>(n.value.shape());
  return *n.grad;
}

template <class T>
void Tape<T>::backward(Var loss, T seed) {
  if (!record_) throw StateError("tape: backward on a forward-only tape");
  if (consumed_) throw StateError("tape: backward called twice without a new forward pass");
  if (node(loss).value.size() != 1) throw ShapeError("tape: backward needs a scalar loss node");
  consumed_ = true;
  grad(loss)[0] += seed;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.backward && n.grad) n.backward(*this, Var{static_cast<std::uint32_t>(i)});
    n.backward = nullptr;
  }
}

template <class T>
void Tape<T>::clear() {
  nodes_.clear();
  consumed_ = false;
}

template <class T>
void accumulate(std::vector<T>& dst, std::span<const T> src) {
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

template struct Parameter<float>;
template struct Parameter<double>;
template class Tape<float>;
template class Tape<double>;
template void accumulate(std::vector<float>&, std::span<const float>);
template void accumulate(std::vector<double>&, std::span<const double>);

}  // namespace fnoseg
