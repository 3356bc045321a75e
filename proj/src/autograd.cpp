#include "gnflow/autograd.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>
#include <utility>

#include "gnflow/kernels.hpp"

namespace gnflow::ag {

namespace {

constexpr std::int64_t kParMin = 1 << 14;

template <class F>
void par_for(std::int64_t n, F f) {
#pragma omp parallel for schedule(static) if (n > kParMin)
  for (std::int64_t i = 0; i < n; ++i) f(i);
}

Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const Var& in : inputs) {
    if (in->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->inputs = std::move(inputs);
    n->backward_fn = std::move(backward_fn);
  }
  return n;
}

void require_rank(const Var& v, int rank, const char* op) {
  if (v->value.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": need rank " + std::to_string(rank) +
                                ", got " + v->value.shape_str());
  }
}

// rows/cols view of the last axis
std::int64_t last_dim(const Tensor& t) { return t.rank() == 0 ? 1 : t.dim(t.rank() - 1); }
std::int64_t row_count(const Tensor& t) { return t.rank() == 0 ? 1 : t.size() / last_dim(t); }

Var unary(Var a, double (*f)(double), std::function<void(Node&)> backward_fn) {
  Tensor out(a->value.shape());
  const double* x = a->value.data();
  double* y = out.data();
  par_for(a->value.size(), [&](std::int64_t i) { y[i] = f(x[i]); });
  return make_op(std::move(out), {std::move(a)}, std::move(backward_fn));
}

}  // namespace

void Node::accumulate(const Tensor& g) {
  if (!grad.defined()) grad = Tensor::zeros(value.shape());
  check_same_shape(grad, g, "grad accumulate");
  double* dst = grad.data();
  const double* src = g.data();
  par_for(grad.size(), [&](std::int64_t i) { dst[i] += src[i]; });
}

Var leaf(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

void backward(const Var& loss) {
  if (loss->value.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + loss->value.shape_str());
  }
  if (!loss->requires_grad) return;

  // reverse post-order = consumers before producers
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  visited.insert(loss.get());
  stack.emplace_back(loss.get(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->accumulate(Tensor::full(loss->value.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
  }
}

Tensor grad_or_zero(const Var& param) {
  return param->grad.defined() ? param->grad : Tensor::zeros(param->value.shape());
}

Var custom(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
  return make_op(std::move(value), std::move(inputs), std::move(backward_fn));
}

Var matmul(Var a, Var b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  if (a->value.dim(1) != b->value.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + a->value.shape_str() + " vs " +
                                b->value.shape_str());
  }
  const std::int64_t m = a->value.dim(0), k = a->value.dim(1), n = b->value.dim(1);
  Tensor out({m, n});
  kernels::matmul(a->value.data(), b->value.data(), out.data(), m, k, n);
  return make_op(std::move(out), {std::move(a), std::move(b)}, [m, k, n](Node& nd) {
    Var& va = nd.inputs[0];
    Var& vb = nd.inputs[1];
    if (va->requires_grad) {
      Tensor da({m, k});
      kernels::matmul_nt(nd.grad.data(), vb->value.data(), da.data(), m, n, k);
      va->accumulate(da);
    }
    if (vb->requires_grad) {
      Tensor db({k, n});
      kernels::matmul_tn(va->value.data(), nd.grad.data(), db.data(), k, m, n);
      vb->accumulate(db);
    }
  });
}

Var bmm_left(Var a, Var x) {
  require_rank(a, 2, "bmm_left");
  require_rank(x, 3, "bmm_left");
  const std::int64_t n = a->value.dim(0), blocks = x->value.dim(0), d = x->value.dim(2);
  if (a->value.dim(1) != n || x->value.dim(1) != n) {
    throw std::invalid_argument("bmm_left: incompatible shapes " + a->value.shape_str() + " vs " +
                                x->value.shape_str());
  }
  Tensor out({blocks, n, d});
  kernels::bmm_left(a->value.data(), x->value.data(), out.data(), blocks, n, d);
  return make_op(std::move(out), {std::move(a), std::move(x)}, [blocks, n, d](Node& nd) {
    Var& va = nd.inputs[0];
    Var& vx = nd.inputs[1];
    if (va->requires_grad) {
      Tensor da({n, n});
      kernels::bmm_left_grad_a(nd.grad.data(), vx->value.data(), da.data(), blocks, n, d);
      va->accumulate(da);
    }
    if (vx->requires_grad) {
      Tensor dx({blocks, n, d});
      kernels::bmm_left_grad_x(va->value.data(), nd.grad.data(), dx.data(), blocks, n, d);
      vx->accumulate(dx);
    }
  });
}

Var bmm_left_masked(Var a, Var x, Tensor mask) {
  require_rank(a, 2, "bmm_left_masked");
  require_rank(x, 3, "bmm_left_masked");
  const std::int64_t n = a->value.dim(0), blocks = x->value.dim(0), d = x->value.dim(2);
  if (mask.rank() != 2 || mask.dim(0) != blocks || mask.dim(1) != n) {
    throw std::invalid_argument("bmm_left_masked: mask shape " + mask.shape_str());
  }
  Tensor out({blocks, n, d});
  kernels::bmm_left_masked(a->value.data(), x->value.data(), mask.data(), out.data(), blocks, n,
                           d);
  return make_op(std::move(out), {std::move(a), std::move(x)},
                 [blocks, n, d, mask = std::move(mask)](Node& nd) {
                   Var& va = nd.inputs[0];
                   Var& vx = nd.inputs[1];
                   // grad wrt the masked operand (D A D) routed back: mask both sides
                   if (va->requires_grad) {
                     Tensor da({n, n});
                     for (std::int64_t b = 0; b < blocks; ++b) {
                       const double* mb = mask.data() + b * n;
                       for (std::int64_t i = 0; i < n; ++i) {
                         if (mb[i] == 0.0) continue;
                         for (std::int64_t j = 0; j < n; ++j) {
                           if (mb[j] == 0.0) continue;
                           double s = 0.0;
                           for (std::int64_t c = 0; c < d; ++c) {
                             s += nd.grad.at(b, i, c) * vx->value.at(b, j, c);
                           }
                           da.at(i, j) += s;
                         }
                       }
                     }
                     va->accumulate(da);
                   }
                   if (vx->requires_grad) {
                     Tensor gy_masked(nd.grad.shape());
                     for (std::int64_t b = 0; b < blocks; ++b)
                       for (std::int64_t i = 0; i < n; ++i)
                         for (std::int64_t c = 0; c < d; ++c)
                           gy_masked.at(b, i, c) = nd.grad.at(b, i, c) * mask.at(b, i);
                     Tensor dx({blocks, n, d});
                     kernels::bmm_left_grad_x(va->value.data(), gy_masked.data(), dx.data(),
                                              blocks, n, d);
                     for (std::int64_t b = 0; b < blocks; ++b)
                       for (std::int64_t i = 0; i < n; ++i)
                         for (std::int64_t c = 0; c < d; ++c) dx.at(b, i, c) *= mask.at(b, i);
                     vx->accumulate(dx);
                   }
                 });
}

Var add(Var a, Var b) {
  check_same_shape(a->value, b->value, "add");
  Tensor out(a->value.shape());
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  double* po = out.data();
  par_for(out.size(), [&](std::int64_t i) { po[i] = pa[i] + pb[i]; });
  return make_op(std::move(out), {std::move(a), std::move(b)}, [](Node& nd) {
    if (nd.inputs[0]->requires_grad) nd.inputs[0]->accumulate(nd.grad);
    if (nd.inputs[1]->requires_grad) nd.inputs[1]->accumulate(nd.grad);
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a->value, b->value, "sub");
  Tensor out(a->value.shape());
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  double* po = out.data();
  par_for(out.size(), [&](std::int64_t i) { po[i] = pa[i] - pb[i]; });
  return make_op(std::move(out), {std::move(a), std::move(b)}, [](Node& nd) {
    if (nd.inputs[0]->requires_grad) nd.inputs[0]->accumulate(nd.grad);
    if (nd.inputs[1]->requires_grad) {
      Tensor neg(nd.grad.shape());
      const double* g = nd.grad.data();
      double* p = neg.data();
      par_for(neg.size(), [&](std::int64_t i) { p[i] = -g[i]; });
      nd.inputs[1]->accumulate(neg);
    }
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a->value, b->value, "mul");
  Tensor out(a->value.shape());
  const double* pa = a->value.data();
  const double* pb = b->value.data();
  double* po = out.data();
  par_for(out.size(), [&](std::int64_t i) { po[i] = pa[i] * pb[i]; });
  return make_op(std::move(out), {std::move(a), std::move(b)}, [](Node& nd) {
    const double* g = nd.grad.data();
    if (nd.inputs[0]->requires_grad) {
      Tensor da(nd.grad.shape());
      const double* pb2 = nd.inputs[1]->value.data();
      double* p = da.data();
      par_for(da.size(), [&](std::int64_t i) { p[i] = g[i] * pb2[i]; });
      nd.inputs[0]->accumulate(da);
    }
    if (nd.inputs[1]->requires_grad) {
      Tensor db(nd.grad.shape());
      const double* pa2 = nd.inputs[0]->value.data();
      double* p = db.data();
      par_for(db.size(), [&](std::int64_t i) { p[i] = g[i] * pa2[i]; });
      nd.inputs[1]->accumulate(db);
    }
  });
}

Var scale(Var a, double s) {
  Tensor out(a->value.shape());
  const double* pa = a->value.data();
  double* po = out.data();
  par_for(out.size(), [&](std::int64_t i) { po[i] = pa[i] * s; });
  return make_op(std::move(out), {std::move(a)}, [s](Node& nd) {
    Tensor da(nd.grad.shape());
    const double* g = nd.grad.data();
    double* p = da.data();
    par_for(da.size(), [&](std::int64_t i) { p[i] = g[i] * s; });
    nd.inputs[0]->accumulate(da);
  });
}

Var add_scalar(Var a, double s) {
  Tensor out(a->value.shape());
  const double* pa = a->value.data();
  double* po = out.data();
  par_for(out.size(), [&](std::int64_t i) { po[i] = pa[i] + s; });
  return make_op(std::move(out), {std::move(a)},
                 [](Node& nd) { nd.inputs[0]->accumulate(nd.grad); });
}

Var add_rowvec(Var x, Var b) {
  require_rank(b, 1, "add_rowvec");
  const std::int64_t d = last_dim(x->value);
  if (b->value.dim(0) != d) {
    throw std::invalid_argument("add_rowvec: " + x->value.shape_str() + " vs " +
                                b->value.shape_str());
  }
  const std::int64_t rows = row_count(x->value);
  Tensor out(x->value.shape());
  const double* px = x->value.data();
  const double* pb = b->value.data();
  double* po = out.data();
  par_for(rows, [&](std::int64_t r) {
    for (std::int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] + pb[j];
  });
  return make_op(std::move(out), {std::move(x), std::move(b)}, [rows, d](Node& nd) {
    if (nd.inputs[0]->requires_grad) nd.inputs[0]->accumulate(nd.grad);
    if (nd.inputs[1]->requires_grad) {
      Tensor db({d});
      const double* g = nd.grad.data();
      double* p = db.data();
      par_for(d, [&](std::int64_t j) {
        double s = 0.0;
        for (std::int64_t r = 0; r < rows; ++r) s += g[r * d + j];
        p[j] = s;
      });
      nd.inputs[1]->accumulate(db);
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::int64_t rows = row_count(parts[0]->value);
  std::int64_t total = 0;
  std::vector<std::int64_t> widths;
  for (const Var& p : parts) {
    if (row_count(p->value) != rows) {
      throw std::invalid_argument("concat_cols: row mismatch " + parts[0]->value.shape_str() +
                                  " vs " + p->value.shape_str());
    }
    widths.push_back(last_dim(p->value));
    total += widths.back();
  }
  std::vector<std::int64_t> shape = parts[0]->value.shape();
  shape.back() = total;
  Tensor out(shape);
  double* po = out.data();
  std::int64_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const double* src = parts[pi]->value.data();
    const std::int64_t w = widths[pi];
    const std::int64_t o = off;
    par_for(rows, [&, o, w](std::int64_t r) {
      for (std::int64_t j = 0; j < w; ++j) po[r * total + o + j] = src[r * w + j];
    });
    off += w;
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return make_op(std::move(out), std::move(ins), [rows, total, widths](Node& nd) {
    const double* g = nd.grad.data();
    std::int64_t off = 0;
    for (std::size_t pi = 0; pi < nd.inputs.size(); ++pi) {
      const std::int64_t w = widths[pi];
      if (nd.inputs[pi]->requires_grad) {
        Tensor dp(nd.inputs[pi]->value.shape());
        double* p = dp.data();
        const std::int64_t o = off;
        par_for(rows, [&, o, w](std::int64_t r) {
          for (std::int64_t j = 0; j < w; ++j) p[r * w + j] = g[r * total + o + j];
        });
        nd.inputs[pi]->accumulate(dp);
      }
      off += w;
    }
  });
}

Var gather_cols(Var x, std::vector<std::int64_t> idx) {
  const std::int64_t d = last_dim(x->value);
  const std::int64_t rows = row_count(x->value);
  for (std::int64_t c : idx) {
    if (c < 0 || c >= d) throw std::invalid_argument("gather_cols: index out of range");
  }
  std::vector<std::int64_t> shape = x->value.shape();
  shape.back() = static_cast<std::int64_t>(idx.size());
  const std::int64_t w = static_cast<std::int64_t>(idx.size());
  Tensor out(shape);
  const double* px = x->value.data();
  double* po = out.data();
  par_for(rows, [&](std::int64_t r) {
    for (std::int64_t j = 0; j < w; ++j) po[r * w + j] = px[r * d + idx[j]];
  });
  return make_op(std::move(out), {std::move(x)}, [rows, d, w, idx = std::move(idx)](Node& nd) {
    Tensor dx(nd.inputs[0]->value.shape());
    const double* g = nd.grad.data();
    double* p = dx.data();
    par_for(rows, [&](std::int64_t r) {
      for (std::int64_t j = 0; j < w; ++j) p[r * d + idx[j]] += g[r * w + j];
    });
    nd.inputs[0]->accumulate(dx);
  });
}

Var scatter_cols(Var u, Var v, std::vector<std::int64_t> idx_u, std::vector<std::int64_t> idx_v) {
  const std::int64_t wu = last_dim(u->value), wv = last_dim(v->value);
  if (static_cast<std::int64_t>(idx_u.size()) != wu ||
      static_cast<std::int64_t>(idx_v.size()) != wv) {
    throw std::invalid_argument("scatter_cols: index count mismatch");
  }
  const std::int64_t rows = row_count(u->value);
  if (row_count(v->value) != rows) {
    throw std::invalid_argument("scatter_cols: row mismatch " + u->value.shape_str() + " vs " +
                                v->value.shape_str());
  }
  const std::int64_t d = wu + wv;
  std::vector<std::int64_t> shape = u->value.shape();
  shape.back() = d;
  Tensor out(shape);
  const double* pu = u->value.data();
  const double* pv = v->value.data();
  double* po = out.data();
  par_for(rows, [&](std::int64_t r) {
    for (std::int64_t j = 0; j < wu; ++j) po[r * d + idx_u[j]] = pu[r * wu + j];
    for (std::int64_t j = 0; j < wv; ++j) po[r * d + idx_v[j]] = pv[r * wv + j];
  });
  return make_op(std::move(out), {std::move(u), std::move(v)},
                 [rows, d, wu, wv, idx_u = std::move(idx_u), idx_v = std::move(idx_v)](Node& nd) {
                   const double* g = nd.grad.data();
                   if (nd.inputs[0]->requires_grad) {
                     Tensor du(nd.inputs[0]->value.shape());
                     double* p = du.data();
                     par_for(rows, [&](std::int64_t r) {
                       for (std::int64_t j = 0; j < wu; ++j) p[r * wu + j] = g[r * d + idx_u[j]];
                     });
                     nd.inputs[0]->accumulate(du);
                   }
                   if (nd.inputs[1]->requires_grad) {
                     Tensor dv(nd.inputs[1]->value.shape());
                     double* p = dv.data();
                     par_for(rows, [&](std::int64_t r) {
                       for (std::int64_t j = 0; j < wv; ++j) p[r * wv + j] = g[r * d + idx_v[j]];
                     });
                     nd.inputs[1]->accumulate(dv);
                   }
                 });
}

Var transpose(Var a) {
  require_rank(a, 2, "transpose");
  const std::int64_t m = a->value.dim(0), n = a->value.dim(1);
  Tensor out({n, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < n; ++j) out.at(j, i) = a->value.at(i, j);
  return make_op(std::move(out), {std::move(a)}, [m, n](Node& nd) {
    Tensor da({m, n});
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) da.at(i, j) = nd.grad.at(j, i);
    nd.inputs[0]->accumulate(da);
  });
}

Var relu(Var a) {
  return unary(
      std::move(a), [](double x) { return x > 0.0 ? x : 0.0; },
      [](Node& nd) {
        Tensor da(nd.grad.shape());
        const double* g = nd.grad.data();
        const double* x = nd.inputs[0]->value.data();
        double* p = da.data();
        par_for(da.size(), [&](std::int64_t i) { p[i] = x[i] > 0.0 ? g[i] : 0.0; });
        nd.inputs[0]->accumulate(da);
      });
}

Var tanh(Var a) {
  return unary(
      std::move(a), [](double x) { return std::tanh(x); },
      [](Node& nd) {
        Tensor da(nd.grad.shape());
        const double* g = nd.grad.data();
        const double* y = nd.value.data();
        double* p = da.data();
        par_for(da.size(), [&](std::int64_t i) { p[i] = g[i] * (1.0 - y[i] * y[i]); });
        nd.inputs[0]->accumulate(da);
      });
}

Var sigmoid(Var a) {
  return unary(
      std::move(a), [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](Node& nd) {
        Tensor da(nd.grad.shape());
        const double* g = nd.grad.data();
        const double* y = nd.value.data();
        double* p = da.data();
        par_for(da.size(), [&](std::int64_t i) { p[i] = g[i] * y[i] * (1.0 - y[i]); });
        nd.inputs[0]->accumulate(da);
      });
}

Var exp(Var a) {
  return unary(
      std::move(a), [](double x) { return std::exp(x); },
      [](Node& nd) {
        Tensor da(nd.grad.shape());
        const double* g = nd.grad.data();
        const double* y = nd.value.data();
        double* p = da.data();
        par_for(da.size(), [&](std::int64_t i) { p[i] = g[i] * y[i]; });
        nd.inputs[0]->accumulate(da);
      });
}

// floor and sign are flat almost everywhere; they propagate zero gradient.
Var floor(Var a) {
  return unary(
      std::move(a), [](double x) { return std::floor(x); }, [](Node&) {});
}

Var sign(Var a) {
  return unary(
      std::move(a), [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); },
      [](Node&) {});
}

Var trace(Var a) {
  require_rank(a, 2, "trace");
  if (a->value.dim(0) != a->value.dim(1)) {
    throw std::invalid_argument("trace: need square matrix, got " + a->value.shape_str());
  }
  const std::int64_t n = a->value.dim(0);
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += a->value.at(i, i);
  return make_op(Tensor::scalar(s), {std::move(a)}, [n](Node& nd) {
    Tensor da({n, n});
    const double g = nd.grad.item();
    for (std::int64_t i = 0; i < n; ++i) da.at(i, i) = g;
    nd.inputs[0]->accumulate(da);
  });
}

Var sum(Var a) {
  double s = 0.0;
  const double* p = a->value.data();
  for (std::int64_t i = 0; i < a->value.size(); ++i) s += p[i];
  return make_op(Tensor::scalar(s), {std::move(a)}, [](Node& nd) {
    nd.inputs[0]->accumulate(Tensor::full(nd.inputs[0]->value.shape(), nd.grad.item()));
  });
}

Var reshape(Var a, std::vector<std::int64_t> shape) {
  Tensor out = a->value.reshape(shape);
  return make_op(std::move(out), {std::move(a)}, [](Node& nd) {
    nd.inputs[0]->accumulate(nd.grad.reshape(nd.inputs[0]->value.shape()));
  });
}

Var scale_blocks(Var x, Tensor per_block) {
  if (per_block.rank() != 1 || x->value.rank() < 1 || x->value.dim(0) != per_block.dim(0)) {
    throw std::invalid_argument("scale_blocks: " + x->value.shape_str() + " vs " +
                                per_block.shape_str());
  }
  const std::int64_t blocks = per_block.dim(0);
  const std::int64_t stride = blocks == 0 ? 0 : x->value.size() / blocks;
  Tensor out(x->value.shape());
  const double* px = x->value.data();
  const double* ps = per_block.data();
  double* po = out.data();
  par_for(blocks, [&](std::int64_t b) {
    const double s = ps[b];
    for (std::int64_t i = 0; i < stride; ++i) po[b * stride + i] = px[b * stride + i] * s;
  });
  return make_op(std::move(out), {std::move(x)},
                 [blocks, stride, per_block = std::move(per_block)](Node& nd) {
                   Tensor dx(nd.grad.shape());
                   const double* g = nd.grad.data();
                   const double* ps = per_block.data();
                   double* p = dx.data();
                   par_for(blocks, [&](std::int64_t b) {
                     const double s = ps[b];
                     for (std::int64_t i = 0; i < stride; ++i)
                       p[b * stride + i] = g[b * stride + i] * s;
                   });
                   nd.inputs[0]->accumulate(dx);
                 });
}

}  // namespace gnflow::ag
