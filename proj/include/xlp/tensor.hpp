#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "xlp/rng.hpp"

namespace xlp {

class Tape;

// Dense row-major tensor of 64-bit floats with a value-semantics handle
// (copies share storage). Values are immutable after an op produces them;
// only the grad buffer is written to, during backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
  static Tensor from_data(std::vector<int> shape, std::vector<double> values,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor uniform(std::vector<int> shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false);

  bool defined() const { return s_ != nullptr; }
  const std::vector<int>& shape() const { return s_->shape; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const { return s_->shape[static_cast<size_t>(i)]; }
  size_t size() const { return s_->data.size(); }
  int rows() const { return s_->shape[0]; }
  int cols() const { return s_->shape.size() > 1 ? s_->shape[1] : 1; }

  bool requires_grad() const { return s_->requires_grad; }

  double* data() { return s_->data.data(); }
  const double* data() const { return s_->data.data(); }
  double* grad();
  const double* grad() const;
  bool has_grad() const { return !s_->grad.empty(); }

  // Scalar convenience (errors if size != 1).
  double value() const;
  double at(int r, int c) const { return s_->data[static_cast<size_t>(r) * cols() + c]; }

  void zero_grad();

  // Storage identity, e.g. for weight-tying assertions.
  const void* storage_id() const { return static_cast<const void*>(s_.get()); }

  // Deep copy; the copy shares nothing with the original.
  Tensor clone() const;

  bool all_finite() const;

 private:
  struct Storage {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;  // same length as data when requires_grad
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;

  static Tensor make(std::vector<int> shape, bool requires_grad);
  friend class Tape;
};

// Records ops in execution order (which is topological by construction) and
// replays their adjoints in reverse. One backward pass per tape; reset()
// makes it reusable.
class Tape {
 public:
  void backward(const Tensor& loss);
  void reset();
  size_t num_ops() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  // Used by op implementations; throws if the tape was already consumed.
  void record(std::function<void()> backward_fn);

 private:
  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

// Forward ops. Each takes an optional tape: with a tape and any
// grad-requiring input the op is recorded and the output participates in
// backward; with tape == nullptr the output is a detached constant (this is
// how key-encoder passes stay out of the gradient).
Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape);
// a (M x K) times b^T where b is (N x K); avoids materializing transposes
// for attention scores and tied output logits.
Tensor matmul_nt(const Tensor& a, const Tensor& b, Tape* tape);
Tensor add(const Tensor& a, const Tensor& b, Tape* tape);
// mat (M x N) + row (1 x N) broadcast over rows.
Tensor add_rowwise(const Tensor& mat, const Tensor& row, Tape* tape);
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape);
Tensor scale(const Tensor& a, double c, Tape* tape);
Tensor gelu(const Tensor& a, Tape* tape);  // exact Gaussian-CDF form
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, Tape* tape);
Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids, Tape* tape);
Tensor log_softmax(const Tensor& x, Tape* tape);  // row-wise, log-sum-exp trick
Tensor softmax(const Tensor& x, Tape* tape);      // row-wise
Tensor mean(const Tensor& x, Tape* tape);         // over all entries -> 1x1
Tensor concat(const std::vector<Tensor>& parts, int axis, Tape* tape);
Tensor slice(const Tensor& x, int axis, int start, int len, Tape* tape);
Tensor transpose(const Tensor& x, Tape* tape);
Tensor take_rows(const Tensor& x, const std::vector<int>& rows, Tape* tape);
// out[i, 0] = x[i, cols[i]]
Tensor pick_per_row(const Tensor& x, const std::vector<int>& cols, Tape* tape);

// Central finite differences against the analytic grads already stored in
// each param tensor. f evaluates the loss at the params' current values and
// must be deterministic (checked by evaluating twice).
struct GradCheckParam {
  std::string name;
  Tensor param;
};

struct GradCheckResult {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
    size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
  };
  std::vector<Entry> entries;
  double max_rel_err = 0.0;
  bool pass = false;
  double tolerance = 0.0;
};

GradCheckResult finite_difference_check(const std::function<double()>& f,
                                        const std::vector<GradCheckParam>& params,
                                        double h, double tolerance);

std::string shape_str(const Tensor& t);

}  // namespace xlp
