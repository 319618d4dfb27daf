#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "ddae/tensor.hpp"

// Minimal reverse-mode tape. Every op records a closure that pushes the
// node's output gradient into its inputs; `backward` replays closures in
// reverse topological order. Recording happens only while grad mode is on
// and at least one input requires a gradient.
namespace ddae::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  // Gradient buffer, zero-allocated on first touch.
  Tensor& grad_buf();
  void zero_grad() { grad = Tensor(); }
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var parameter(Tensor value);

bool grad_enabled() noexcept;

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Builds an op node; `fn` is dropped when nothing upstream needs gradients.
Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn);

// Seeds d(root)/d(root) = 1 for a single-element root and propagates.
void backward(const Var& root);

}  // namespace ddae::ag
