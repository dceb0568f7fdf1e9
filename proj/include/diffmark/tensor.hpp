// Copyright 2026 The diffmark Authors
//
// Licensed under the Apache License, Version 2.0
//
// Minimal reverse-mode autodiff over dense (batch, channel, length)
// tensors, backed by Eigen for the matrix products. Define-by-run: each
// op appends a node to a Graph; Graph::backward walks the tape in
// reverse. Parameters live outside graphs and accumulate gradients
// across graph builds (gradient accumulation falls out naturally).

#pragma once

#include <array>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffmark {

using Scalar = double;

struct Shape {
  int b = 1;  // batch
  int c = 1;  // channels (or features)
  int l = 1;  // length (or frames)
  std::size_t elems() const {
    return std::size_t(b) * std::size_t(c) * std::size_t(l);
  }
  bool operator==(const Shape& o) const = default;
  std::string str() const;
};

// Trainable array with persistent gradient buffer.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<Scalar> value;
  std::vector<Scalar> grad;
  bool frozen = false;

  Parameter() = default;
  Parameter(std::string n, Shape s)
      : name(std::move(n)), shape(s), value(s.elems(), 0.0), grad(s.elems(), 0.0) {}
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Graph;

struct Node {
  Shape shape;
  std::vector<Scalar> storage;        // owned value (empty for param leaves)
  Scalar* data = nullptr;             // value pointer (storage or external)
  std::vector<Scalar> gradbuf;        // owned gradient, lazily allocated
  Parameter* param = nullptr;         // set for parameter leaves
  bool needs_grad = false;
  bool grad_ready = false;
  std::function<void(Graph&)> backprop;  // pulls from this node into parents

  std::size_t elems() const { return shape.elems(); }
  Scalar* grad();                     // allocate-on-demand (zeros)
  bool has_grad() const { return grad_ready; }
  // Adds g into this node's grad buffer (param leaves route to param->grad).
  void accumulate(const Scalar* g, std::size_t n);
};

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Leaves ------------------------------------------------------------
  Node* constant(Shape s, const Scalar* src = nullptr);
  Node* constant(Shape s, const std::vector<Scalar>& src);
  Node* zeros(Shape s) { return constant(s); }
  Node* input(Shape s, const std::vector<Scalar>& src, bool needs_grad = false);
  Node* param(Parameter& p);

  // Elementwise --------------------------------------------------------
  Node* add(Node* a, Node* b);
  Node* sub(Node* a, Node* b);
  Node* mul(Node* a, Node* b);  // Hadamard
  Node* scale(Node* a, Scalar k);
  Node* add_scalar(Node* a, Scalar k);
  Node* axpby(Scalar ka, Node* a, Scalar kb, Node* b);  // ka*a + kb*b
  Node* add_const(Node* a, const std::vector<Scalar>& c);  // a + fixed vector
  Node* mul_const(Node* a, const std::vector<Scalar>& c);  // a .* fixed vector
  Node* relu(Node* a);
  Node* leaky_relu(Node* a, Scalar slope);
  Node* sigmoid(Node* a);
  Node* tanh_(Node* a);
  Node* abs_(Node* a);
  Node* square(Node* a);
  Node* log_floored(Node* a, Scalar floor);

  // Structure ----------------------------------------------------------
  Node* concat_c(Node* a, Node* b);          // along channel axis
  Node* slice_c(Node* a, int c0, int c1);    // channels [c0, c1)
  Node* flatten(Node* a);                    // (b,c,l) -> (b,c*l,1)
  Node* trim_l(Node* a, int l);              // keep first l positions
  Node* broadcast_c(Node* a, Node* s);       // a(b,c,l) + s(b,c,1)

  // Linear algebra / NN ------------------------------------------------
  Node* linear(Node* x, Node* w, Node* bias);  // x(b,f,1) w(f_out,f_in)
  Node* conv1d(Node* x, Node* w, Node* bias, int stride, int pad,
               int dilation = 1);  // w(c_out, c_in, k)
  // conv1d(x) + base, fused (base has the conv's output shape).
  Node* conv1d_add(Node* x, Node* w, Node* bias, Node* base, int stride, int pad,
                   int dilation = 1);
  // z(b,2r,l) -> tanh(z[:r]) * sigmoid(z[r:]), fused gate.
  Node* gated_unit(Node* z);
  Node* conv_transpose1d(Node* x, Node* w, Node* bias, int stride, int pad,
                         int output_pad);  // w(c_in, c_out, k)
  // y[b,i,t] = sum_j M[i,j] x[b,j,t]; M is a fixed (rows x c) matrix.
  Node* channel_matmul(Node* x, const std::vector<Scalar>& m, int rows);

  struct BnStats {
    std::vector<Scalar> running_mean;
    std::vector<Scalar> running_var;
  };
  Node* batchnorm(Node* x, Node* gamma, Node* beta, BnStats* stats,
                  bool training, Scalar momentum = 0.1, Scalar eps = 1e-5);

  // Reductions / losses -------------------------------------------------
  Node* sum_all(Node* a);
  Node* mean_all(Node* a);
  // -sum_i [t log p + (1-t) log(1-p)], summed over c*l, mean over batch.
  Node* bce_sum(Node* probs, const std::vector<Scalar>& targets,
                Scalar eps = 1e-7);
  Node* l1_mean(Node* a, Node* b);  // mean |a-b| over all elements

  // Custom -------------------------------------------------------------
  // Value produced by fn; backward treats the op as identity.
  Node* straight_through(Node* x,
                         std::function<void(const Scalar*, Scalar*, std::size_t)> fn);
  // Value produced by fn; backward applies the exact adjoint of the
  // (linear) forward map.
  Node* linear_map(Node* x,
                   std::function<void(const Scalar*, Scalar*, std::size_t)> fn,
                   std::function<void(const Scalar*, Scalar*, std::size_t)> adjoint);

  // Engine ---------------------------------------------------------------
  void backward(Node* loss);
  std::size_t num_nodes() const { return nodes_.size(); }
  // Frees node value/grad buffers as soon as the reverse sweep is done
  // with them; big training graphs need this, graphs whose intermediate
  // values are inspected after backward must leave it off.
  void set_free_on_backward(bool on) { free_on_backward_ = on; }

  // Generic raw-node creation used by ops defined in other translation
  // units (feature extractors register their own custom nodes).
  Node* make(Shape s, bool needs_grad);

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
  bool free_on_backward_ = false;
};

// Gradient checking helper shared by tests: central differences of f at x.
std::vector<Scalar> finite_diff(const std::function<Scalar(const std::vector<Scalar>&)>& f,
                                std::vector<Scalar> x, Scalar h);

}  // namespace diffmark
