#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssd/tensor.hpp"

namespace ssd::diff {

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  neg,
  exp_op,
  log_op,
  sqrt_op,
  abs_op,
  pow_op,
  sin_op,
  cos_op,
  sigmoid,
  relu,
  clamp,
  min_elem,
  sum,
  mean,
  matmul,
  conv2d,
  avgpool3,
  bilinear,
  concat,
  reshape,
  broadcast,
  cosine_map,
};

const char* op_name(Op op);
std::optional<Op> op_from_name(const std::string& name);

class Graph;

// Lightweight handle to a node of one graph. Ops on Vars from different
// graphs are an error.
struct Var {
  Graph* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
};

struct Node {
  Op op = Op::leaf;
  std::vector<int> in;
  Tensor val;
  bool needs_grad = false;
  double p0 = 0.0, p1 = 0.0;  // scalar params: pow exponent, clamp bounds
  std::vector<int> ip;        // int params: conv stride/pad, concat axis
};

// Dynamic tape: ops append nodes in execution order, so node ids are already
// a topological order and backward is a single reverse sweep that visits each
// node exactly once. One graph is single-threaded; distinct graphs may run on
// distinct threads.
class Graph {
 public:
  Var leaf(Tensor t);             // honors t.requires_grad
  Var constant(Tensor t);         // never receives gradient
  Var constant(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& val(Var v) const;
  const Node& node(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  // Propagates d(out)/d(node) for a scalar out. Gradients of nodes the
  // output does not reach stay zero.
  void backward(Var out);

  bool has_grad(Var v) const;
  Tensor grad(Var v) const;  // zeros tensor of the node's shape if absent

  Var apply(Op op, const std::vector<Var>& inputs, double p0 = 0.0,
            double p1 = 0.0, std::vector<int> ip = {});

  // Used by the op builders; not part of the user-facing API.
  Var add_node_public(Node n) { return add_node(std::move(n)); }

 private:
  Var add_node(Node n);
  Tensor& grad_buf(int id);
  void backward_node(int id);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
};

// Op builders -----------------------------------------------------------

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var sqrt(Var a);
Var abs(Var a);
Var pow(Var a, double exponent);
Var sin(Var a);
Var cos(Var a);
Var sigmoid(Var a);
Var relu(Var a);
Var clamp(Var a, double lo, double hi);
Var min_elem(Var a, Var b);
Var sum(Var a);
Var mean(Var a);
Var matmul(Var a, Var b);
Var conv2d(Var x, Var k, Var bias, int stride, int pad);  // bias optional: pass {}
Var avgpool3(Var x);
Var bilinear_sample(Var image, Var grid);
Var concat(const std::vector<Var>& xs, int axis);
Var reshape(Var a, Shape target);
Var broadcast(Var a, Shape target);  // scalar or trailing-dim expansion only
Var cosine_map(Var a, Var b);        // (D,H,W) x (D,H,W) -> (H,W)

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }

// Scalar-with-tensor convenience (broadcasts the constant).
Var operator+(Var a, double c);
Var operator+(double c, Var a);
Var operator-(Var a, double c);
Var operator-(double c, Var a);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator/(double c, Var a);

// Test hook: makes backward() of one op kind emit a wrong gradient so the
// gradient checker's failure path can be exercised end to end.
void set_grad_fault(std::optional<Op> op, double factor = 2.0);
std::optional<Op> grad_fault_from_env();  // reads SSD_BREAK_GRAD_OP

}  // namespace ssd::diff
