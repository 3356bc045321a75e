#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "gnflow/tensor.hpp"

namespace gnflow::ag {

// Reverse-mode autodiff over a dynamically built graph. Each op allocates a
// node holding its output value and a closure that routes the output gradient
// to the inputs. Graphs are built per training step and dropped afterwards;
// parameters persist outside as plain Tensors (see ParamStore).

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation during backward
  bool requires_grad = false;
  std::vector<Var> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor& g);
};

/// Trainable leaf.
Var leaf(Tensor v);
/// Non-trainable value (data, masks, time grids).
Var constant(Tensor v);

inline const Tensor& val(const Var& v) { return v->value; }

/// Reverse pass from a scalar loss. Rejects non-scalar losses. Gradients
/// accumulate into each reachable node's `grad`; unreached leaves keep an
/// undefined grad, which callers read as zero.
void backward(const Var& loss);

/// Gradient of `loss` w.r.t. `param` after backward(); zeros if unreached.
Tensor grad_or_zero(const Var& param);

// --- op set -----------------------------------------------------------

Var matmul(Var a, Var b);                     // [m,k] x [k,n]
Var bmm_left(Var a, Var x);                   // a [n,n], x [B,n,d]
Var bmm_left_masked(Var a, Var x, Tensor mask);  // mask [B,n] in {0,1}
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                        // elementwise
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_rowvec(Var x, Var b);                 // bias add: x [..,d] + b [d]
Var concat_cols(const std::vector<Var>& parts);  // along last axis
Var gather_cols(Var x, std::vector<std::int64_t> idx);
Var scatter_cols(Var u, Var v, std::vector<std::int64_t> idx_u,
                 std::vector<std::int64_t> idx_v);  // interleave into [.., |u|+|v|]
Var transpose(Var a);
Var relu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var floor(Var a);  // derivative 0 almost everywhere
Var sign(Var a);   // derivative 0 almost everywhere
Var trace(Var a);  // square matrix -> scalar
Var sum(Var a);
Var reshape(Var a, std::vector<std::int64_t> shape);
/// x [B,...] scaled per leading block by s[b] (s is data, not differentiated).
Var scale_blocks(Var x, Tensor per_block);

/// Custom node with caller-supplied backward. `backward_fn` receives the node
/// (value, grad, inputs) and accumulates into the inputs' grads.
Var custom(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn);

}  // namespace gnflow::ag
