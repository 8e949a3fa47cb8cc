#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "fnoseg/tensor.hpp"

namespace fnoseg {

/// A learnable tensor of arbitrary shape with its gradient accumulator.
template <class T>
struct Parameter {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;
  /// Set when a backward pass wrote into grad; cleared by zero_grad().
  bool grad_fresh = false;

  Parameter() = default;
  Parameter(std::string n, std::vector<std::size_t> s, T fill = T(0));

  std::size_t size() const { return value.size(); }
  void zero_grad();
};

/// Handle to a value recorded on a Tape.
struct Var {
  std::uint32_t id = UINT32_MAX;
  bool valid() const { return id != UINT32_MAX; }
};

/// Ordered record of forward operations. Each recorded node keeps its value
/// and a closure that pushes its gradient to its inputs and parameters.
template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, Var self)>;

  /// A tape built with record = false evaluates forward only; ops skip
  /// caching intermediates and backward() is rejected.
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var leaf(Field<T> value, bool requires_grad = false);
  Var record(Field<T> value, BackwardFn fn);

  const Field<T>& value(Var v) const { return node(v).value; }
  bool needs_grad(Var v) const { return node(v).needs_grad; }
  /// Gradient slot of a node, zero-initialized on first access.
  Field<T>& grad(Var v);
  bool has_grad(Var v) const { return node(v).grad != nullptr; }

  /// Seeds d(loss)/d(loss) = seed on a single-element node and runs every
  /// recorded closure in reverse order. A tape can be replayed only once.
  void backward(Var loss, T seed = T(1));

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Field<T> value;
    std::unique_ptr<Field<T>> grad;
    BackwardFn backward;
    bool needs_grad = false;
  };
  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  bool record_ = true;
  bool consumed_ = false;
};

template <class T>
void accumulate(std::vector<T>& dst, std::span<const T> src);

}  // namespace fnoseg
