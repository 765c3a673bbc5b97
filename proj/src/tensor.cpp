#include "xlp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace xlp {

namespace {

size_t shape_numel(const std::vector<int>& shape) {
  if (shape.empty()) throw std::invalid_argument("tensor shape must be non-empty");
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
    n *= static_cast<size_t>(d);
  }
  return n;
}

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) +
                              " vs " + shape_str(b));
}

void require_2d(const char* op, const Tensor& t) {
  if (t.ndim() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected 2-d tensor, got " + shape_str(t));
  }
}

bool should_record(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

}  // namespace

std::string shape_str(const Tensor& t) {
  if (!t.defined()) return "(undefined)";
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < t.shape().size(); ++i) {
    if (i) os << "x";
    os << t.shape()[i];
  }
  os << ")";
  return os.str();
}

Tensor Tensor::make(std::vector<int> shape, bool requires_grad) {
  Tensor t;
  t.s_ = std::make_shared<Storage>();
  t.s_->shape = std::move(shape);
  t.s_->data.assign(shape_numel(t.s_->shape), 0.0);
  t.s_->requires_grad = requires_grad;
  if (requires_grad) t.s_->grad.assign(t.s_->data.size(), 0.0);
  return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return make(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  std::fill(t.s_->data.begin(), t.s_->data.end(), value);
  return t;
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values,
                         bool requires_grad) {
  const size_t n = shape_numel(shape);
  if (n != values.size()) {
    throw std::invalid_argument("Tensor::from_data: " + std::to_string(values.size()) +
                                " values for a tensor of " + std::to_string(n) + " entries");
  }
  Tensor t = make(std::move(shape), requires_grad);
  t.s_->data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1, 1}, {value}, requires_grad);
}

Tensor Tensor::uniform(std::vector<int> shape, double lo, double hi, Rng& rng,
                       bool requires_grad) {
  Tensor t = make(std::move(shape), requires_grad);
  for (double& v : t.s_->data) v = rng.uniform(lo, hi);
  return t;
}

double* Tensor::grad() {
  if (s_->grad.empty()) throw std::runtime_error("tensor has no grad buffer");
  return s_->grad.data();
}

const double* Tensor::grad() const {
  if (s_->grad.empty()) throw std::runtime_error("tensor has no grad buffer");
  return s_->grad.data();
}

double Tensor::value() const {
  if (size() != 1) throw std::runtime_error("Tensor::value: tensor is not scalar, shape " + shape_str(*this));
  return s_->data[0];
}

void Tensor::zero_grad() {
  std::fill(s_->grad.begin(), s_->grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor t;
  t.s_ = std::make_shared<Storage>(*s_);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : s_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tape::record(std::function<void()> backward_fn) {
  if (consumed_) {
    throw std::runtime_error("tape already consumed; reset() before recording new ops");
  }
  ops_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) {
    throw std::runtime_error("tape already consumed; reset() before running backward again");
  }
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(loss));
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward: loss does not require grad (not recorded on a tape)");
  }
  consumed_ = true;
  const_cast<Tensor&>(loss).grad()[0] = 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void Tape::reset() {
  ops_.clear();
  consumed_ = false;
}

// ---------------------------------------------------------------------------
// ops

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  if (a.cols() != b.rows()) shape_error("matmul", a, b);
  const int m = a.rows(), k = a.cols(), n = b.cols();
  const bool rec = should_record(tape, {&a, &b});
  Tensor out = Tensor::zeros({m, n}, rec);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < m; ++i) {
    for (int l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      const double* brow = pb + static_cast<size_t>(l) * n;
      double* orow = po + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  if (rec) {
    tape->record([a, b, out, m, k, n]() {
      const double* g = out.grad();
      if (a.requires_grad()) {
        double* ga = const_cast<Tensor&>(a).grad();
        const double* pb2 = b.data();
        // dA[i,l] += sum_j g[i,j] * B[l,j]
        for (int i = 0; i < m; ++i) {
          for (int l = 0; l < k; ++l) {
            const double* grow = g + static_cast<size_t>(i) * n;
            const double* brow = pb2 + static_cast<size_t>(l) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[i * k + l] += acc;
          }
        }
      }
      if (b.requires_grad()) {
        double* gb = const_cast<Tensor&>(b).grad();
        const double* pa2 = a.data();
        // dB[l,j] += sum_i A[i,l] * g[i,j]
        for (int i = 0; i < m; ++i) {
          for (int l = 0; l < k; ++l) {
            const double av = pa2[i * k + l];
            const double* grow = g + static_cast<size_t>(i) * n;
            double* brow = gb + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
          }
        }
      }
    });
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b, Tape* tape) {
  require_2d("matmul_nt", a);
  require_2d("matmul_nt", b);
  if (a.cols() != b.cols()) shape_error("matmul_nt", a, b);
  const int m = a.rows(), k = a.cols(), n = b.rows();
  const bool rec = should_record(tape, {&a, &b});
  Tensor out = Tensor::zeros({m, n}, rec);
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int i = 0; i < m; ++i) {
    const double* arow = pa + static_cast<size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const double* brow = pb + static_cast<size_t>(j) * k;
      double acc = 0.0;
      for (int l = 0; l < k; ++l) acc += arow[l] * brow[l];
      po[i * n + j] = acc;
    }
  }
  if (rec) {
    tape->record([a, b, out, m, k, n]() {
      const double* g = out.grad();
      if (a.requires_grad()) {
        double* ga = const_cast<Tensor&>(a).grad();
        const double* pb2 = b.data();
        // dA[i,l] += sum_j g[i,j] * B[j,l]
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) {
            const double gv = g[i * n + j];
            const double* brow = pb2 + static_cast<size_t>(j) * k;
            double* arow = ga + static_cast<size_t>(i) * k;
            for (int l = 0; l < k; ++l) arow[l] += gv * brow[l];
          }
        }
      }
      if (b.requires_grad()) {
        double* gb = const_cast<Tensor&>(b).grad();
        const double* pa2 = a.data();
        // dB[j,l] += sum_i g[i,j] * A[i,l]
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) {
            const double gv = g[i * n + j];
            const double* arow = pa2 + static_cast<size_t>(i) * k;
            double* brow = gb + static_cast<size_t>(j) * k;
            for (int l = 0; l < k; ++l) brow[l] += gv * arow[l];
          }
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape()) shape_error("add", a, b);
  const bool rec = should_record(tape, {&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (rec) {
    tape->record([a, b, out, n]() {
      const double* g = out.grad();
      if (a.requires_grad()) {
        double* ga = const_cast<Tensor&>(a).grad();
        for (size_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        double* gb = const_cast<Tensor&>(b).grad();
        for (size_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor add_rowwise(const Tensor& mat, const Tensor& row, Tape* tape) {
  require_2d("add_rowwise", mat);
  require_2d("add_rowwise", row);
  if (row.rows() != 1 || row.cols() != mat.cols()) shape_error("add_rowwise", mat, row);
  const int m = mat.rows(), n = mat.cols();
  const bool rec = should_record(tape, {&mat, &row});
  Tensor out = Tensor::zeros({m, n}, rec);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.data()[i * n + j] = mat.data()[i * n + j] + row.data()[j];
  }
  if (rec) {
    tape->record([mat, row, out, m, n]() {
      const double* g = out.grad();
      if (mat.requires_grad()) {
        double* gm = const_cast<Tensor&>(mat).grad();
        for (size_t i = 0; i < static_cast<size_t>(m) * n; ++i) gm[i] += g[i];
      }
      if (row.requires_grad()) {
        double* gr = const_cast<Tensor&>(row).grad();
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < n; ++j) gr[j] += g[i * n + j];
        }
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape()) shape_error("mul", a, b);
  const bool rec = should_record(tape, {&a, &b});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (rec) {
    tape->record([a, b, out, n]() {
      const double* g = out.grad();
      if (a.requires_grad()) {
        double* ga = const_cast<Tensor&>(a).grad();
        for (size_t i = 0; i < n; ++i) ga[i] += g[i] * b.data()[i];
      }
      if (b.requires_grad()) {
        double* gb = const_cast<Tensor&>(b).grad();
        for (size_t i = 0; i < n; ++i) gb[i] += g[i] * a.data()[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double c, Tape* tape) {
  const bool rec = should_record(tape, {&a});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (rec) {
    tape->record([a, out, c, n]() {
      const double* g = out.grad();
      double* ga = const_cast<Tensor&>(a).grad();
      for (size_t i = 0; i < n; ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& a, Tape* tape) {
  const bool rec = should_record(tape, {&a});
  Tensor out = Tensor::zeros(a.shape(), rec);
  const size_t n = a.size();
  for (size_t i = 0; i < n; ++i) {
    const double x = a.data()[i];
    out.data()[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  if (rec) {
    tape->record([a, out, n]() {
      const double* g = out.grad();
      double* ga = const_cast<Tensor&>(a).grad();
      for (size_t i = 0; i < n; ++i) {
        const double x = a.data()[i];
        const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
        ga[i] += g[i] * (cdf + x * pdf);
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps, Tape* tape) {
  require_2d("layer_norm", x);
  if (gamma.rows() != 1 || gamma.cols() != x.cols()) shape_error("layer_norm", x, gamma);
  if (beta.rows() != 1 || beta.cols() != x.cols()) shape_error("layer_norm", x, beta);
  const int m = x.rows(), n = x.cols();
  const bool rec = should_record(tape, {&x, &gamma, &beta});
  Tensor out = Tensor::zeros({m, n}, rec);
  // Cache normalized values and inverse stddev per row for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(m) * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  for (int i = 0; i < m; ++i) {
    const double* xr = x.data() + static_cast<size_t>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= n;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (int j = 0; j < n; ++j) {
      const double xh = (xr[j] - mu) * is;
      (*xhat)[static_cast<size_t>(i) * n + j] = xh;
      out.data()[i * n + j] = gamma.data()[j] * xh + beta.data()[j];
    }
  }
  if (rec) {
    tape->record([x, gamma, beta, out, xhat, inv_std, m, n]() {
      const double* g = out.grad();
      for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<size_t>(i) * n;
        const double* xh = xhat->data() + static_cast<size_t>(i) * n;
        if (gamma.requires_grad()) {
          double* gg = const_cast<Tensor&>(gamma).grad();
          for (int j = 0; j < n; ++j) gg[j] += grow[j] * xh[j];
        }
        if (beta.requires_grad()) {
          double* gb = const_cast<Tensor&>(beta).grad();
          for (int j = 0; j < n; ++j) gb[j] += grow[j];
        }
        if (x.requires_grad()) {
          double* gx = const_cast<Tensor&>(x).grad() + static_cast<size_t>(i) * n;
          double mean_gy = 0.0, mean_gy_xh = 0.0;
          for (int j = 0; j < n; ++j) {
            const double gy = grow[j] * gamma.data()[j];
            mean_gy += gy;
            mean_gy_xh += gy * xh[j];
          }
          mean_gy /= n;
          mean_gy_xh /= n;
          const double is = (*inv_std)[i];
          for (int j = 0; j < n; ++j) {
            const double gy = grow[j] * gamma.data()[j];
            gx[j] += is * (gy - mean_gy - xh[j] * mean_gy_xh);
          }
        }
      }
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids, Tape* tape) {
  require_2d("embedding_lookup", table);
  if (ids.empty()) throw std::invalid_argument("embedding_lookup: empty id sequence");
  const int v = table.rows(), h = table.cols();
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw std::out_of_range("embedding_lookup: id " + std::to_string(id) +
                              " outside table of " + std::to_string(v) + " rows");
    }
  }
  const int m = static_cast<int>(ids.size());
  const bool rec = should_record(tape, {&table});
  Tensor out = Tensor::zeros({m, h}, rec);
  for (int i = 0; i < m; ++i) {
    const double* src = table.data() + static_cast<size_t>(ids[i]) * h;
    std::copy(src, src + h, out.data() + static_cast<size_t>(i) * h);
  }
  if (rec) {
    tape->record([table, out, ids, m, h]() {
      const double* g = out.grad();
      double* gt = const_cast<Tensor&>(table).grad();
      for (int i = 0; i < m; ++i) {
        double* dst = gt + static_cast<size_t>(ids[i]) * h;
        const double* src = g + static_cast<size_t>(i) * h;
        for (int j = 0; j < h; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor log_softmax(const Tensor& x, Tape* tape) {
  require_2d("log_softmax", x);
  const int m = x.rows(), n = x.cols();
  const bool rec = should_record(tape, {&x});
  Tensor out = Tensor::zeros({m, n}, rec);
  for (int i = 0; i < m; ++i) {
    const double* xr = x.data() + static_cast<size_t>(i) * n;
    double* orow = out.data() + static_cast<size_t>(i) * n;
    double mx = xr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double lse = 0.0;
    for (int j = 0; j < n; ++j) lse += std::exp(xr[j] - mx);
    lse = mx + std::log(lse);
    for (int j = 0; j < n; ++j) orow[j] = xr[j] - lse;
  }
  if (rec) {
    tape->record([x, out, m, n]() {
      const double* g = out.grad();
      double* gx = const_cast<Tensor&>(x).grad();
      for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<size_t>(i) * n;
        const double* orow = out.data() + static_cast<size_t>(i) * n;
        double gsum = 0.0;
        for (int j = 0; j < n; ++j) gsum += grow[j];
        double* gxr = gx + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) gxr[j] += grow[j] - std::exp(orow[j]) * gsum;
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, Tape* tape) {
  require_2d("softmax", x);
  const int m = x.rows(), n = x.cols();
  const bool rec = should_record(tape, {&x});
  Tensor out = Tensor::zeros({m, n}, rec);
  for (int i = 0; i < m; ++i) {
    const double* xr = x.data() + static_cast<size_t>(i) * n;
    double* orow = out.data() + static_cast<size_t>(i) * n;
    double mx = xr[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      sum += orow[j];
    }
    for (int j = 0; j < n; ++j) orow[j] /= sum;
  }
  if (rec) {
    tape->record([x, out, m, n]() {
      const double* g = out.grad();
      double* gx = const_cast<Tensor&>(x).grad();
      for (int i = 0; i < m; ++i) {
        const double* grow = g + static_cast<size_t>(i) * n;
        const double* orow = out.data() + static_cast<size_t>(i) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += grow[j] * orow[j];
        double* gxr = gx + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) gxr[j] += orow[j] * (grow[j] - dot);
      }
    });
  }
  return out;
}

Tensor mean(const Tensor& x, Tape* tape) {
  const size_t n = x.size();
  const bool rec = should_record(tape, {&x});
  double acc = 0.0;
  for (size_t i = 0; i < n; ++i) acc += x.data()[i];
  Tensor out = Tensor::zeros({1, 1}, rec);
  out.data()[0] = acc / static_cast<double>(n);
  if (rec) {
    tape->record([x, out, n]() {
      const double g = out.grad()[0] / static_cast<double>(n);
      double* gx = const_cast<Tensor&>(x).grad();
      for (size_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor concat(const std::vector<Tensor>& parts, int axis, Tape* tape) {
  if (parts.empty()) throw std::invalid_argument("concat: no tensors given");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat: axis must be 0 or 1");
  bool rec = false;
  for (const Tensor& p : parts) {
    require_2d("concat", p);
    if (tape && p.requires_grad()) rec = true;
  }
  int rows = parts[0].rows(), cols = parts[0].cols();
  for (size_t i = 1; i < parts.size(); ++i) {
    if (axis == 0) {
      if (parts[i].cols() != cols) shape_error("concat", parts[0], parts[i]);
      rows += parts[i].rows();
    } else {
      if (parts[i].rows() != rows) shape_error("concat", parts[0], parts[i]);
      cols += parts[i].cols();
    }
  }
  Tensor out = Tensor::zeros({rows, cols}, rec);
  if (axis == 0) {
    size_t off = 0;
    for (const Tensor& p : parts) {
      std::copy(p.data(), p.data() + p.size(), out.data() + off);
      off += p.size();
    }
  } else {
    int coff = 0;
    for (const Tensor& p : parts) {
      for (int i = 0; i < rows; ++i) {
        std::copy(p.data() + static_cast<size_t>(i) * p.cols(),
                  p.data() + static_cast<size_t>(i + 1) * p.cols(),
                  out.data() + static_cast<size_t>(i) * cols + coff);
      }
      coff += p.cols();
    }
  }
  if (rec) {
    tape->record([parts, out, axis, rows, cols]() {
      const double* g = out.grad();
      if (axis == 0) {
        size_t off = 0;
        for (const Tensor& p : parts) {
          if (p.requires_grad()) {
            double* gp = const_cast<Tensor&>(p).grad();
            for (size_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
          }
          off += p.size();
        }
      } else {
        int coff = 0;
        for (const Tensor& p : parts) {
          if (p.requires_grad()) {
            double* gp = const_cast<Tensor&>(p).grad();
            for (int i = 0; i < rows; ++i) {
              for (int j = 0; j < p.cols(); ++j) {
                gp[i * p.cols() + j] += g[static_cast<size_t>(i) * cols + coff + j];
              }
            }
          }
          coff += p.cols();
        }
      }
    });
  }
  return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len, Tape* tape) {
  require_2d("slice", x);
  if (axis != 0 && axis != 1) throw std::invalid_argument("slice: axis must be 0 or 1");
  const int extent = axis == 0 ? x.rows() : x.cols();
  if (start < 0 || len <= 0 || start + len > extent) {
    throw std::out_of_range("slice: range [" + std::to_string(start) + ", " +
                            std::to_string(start + len) + ") outside axis of size " +
                            std::to_string(extent));
  }
  const int m = x.rows(), n = x.cols();
  const bool rec = should_record(tape, {&x});
  Tensor out = axis == 0 ? Tensor::zeros({len, n}, rec) : Tensor::zeros({m, len}, rec);
  if (axis == 0) {
    std::copy(x.data() + static_cast<size_t>(start) * n,
              x.data() + static_cast<size_t>(start + len) * n, out.data());
  } else {
    for (int i = 0; i < m; ++i) {
      std::copy(x.data() + static_cast<size_t>(i) * n + start,
                x.data() + static_cast<size_t>(i) * n + start + len,
                out.data() + static_cast<size_t>(i) * len);
    }
  }
  if (rec) {
    tape->record([x, out, axis, start, len, m, n]() {
      const double* g = out.grad();
      double* gx = const_cast<Tensor&>(x).grad();
      if (axis == 0) {
        for (size_t i = 0; i < static_cast<size_t>(len) * n; ++i) {
          gx[static_cast<size_t>(start) * n + i] += g[i];
        }
      } else {
        for (int i = 0; i < m; ++i) {
          for (int j = 0; j < len; ++j) {
            gx[static_cast<size_t>(i) * n + start + j] += g[static_cast<size_t>(i) * len + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& x, Tape* tape) {
  require_2d("transpose", x);
  const int m = x.rows(), n = x.cols();
  const bool rec = should_record(tape, {&x});
  Tensor out = Tensor::zeros({n, m}, rec);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) out.data()[j * m + i] = x.data()[i * n + j];
  }
  if (rec) {
    tape->record([x, out, m, n]() {
      const double* g = out.grad();
      double* gx = const_cast<Tensor&>(x).grad();
      for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
      }
    });
  }
  return out;
}

Tensor take_rows(const Tensor& x, const std::vector<int>& rows, Tape* tape) {
  require_2d("take_rows", x);
  if (rows.empty()) throw std::invalid_argument("take_rows: empty row list");
  const int m = x.rows(), n = x.cols();
  for (int r : rows) {
    if (r < 0 || r >= m) {
      throw std::out_of_range("take_rows: row " + std::to_string(r) + " outside tensor of " +
                              std::to_string(m) + " rows");
    }
  }
  const bool rec = should_record(tape, {&x});
  Tensor out = Tensor::zeros({static_cast<int>(rows.size()), n}, rec);
  for (size_t i = 0; i < rows.size(); ++i) {
    std::copy(x.data() + static_cast<size_t>(rows[i]) * n,
              x.data() + static_cast<size_t>(rows[i] + 1) * n,
              out.data() + i * n);
  }
  if (rec) {
    tape->record([x, out, rows, n]() {
      const double* g = out.grad();
      double* gx = const_cast<Tensor&>(x).grad();
      for (size_t i = 0; i < rows.size(); ++i) {
        double* dst = gx + static_cast<size_t>(rows[i]) * n;
        const double* src = g + i * n;
        for (int j = 0; j < n; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor pick_per_row(const Tensor& x, const std::vector<int>& cols, Tape* tape) {
  require_2d("pick_per_row", x);
  const int m = x.rows(), n = x.cols();
  if (static_cast<int>(cols.size()) != m) {
    throw std::invalid_argument("pick_per_row: " + std::to_string(cols.size()) +
                                " indices for " + std::to_string(m) + " rows");
  }
  for (int c : cols) {
    if (c < 0 || c >= n) {
      throw std::out_of_range("pick_per_row: column " + std::to_string(c) +
                              " outside tensor of " + std::to_string(n) + " columns");
    }
  }
  const bool rec = should_record(tape, {&x});
  Tensor out = Tensor::zeros({m, 1}, rec);
  for (int i = 0; i < m; ++i) out.data()[i] = x.data()[static_cast<size_t>(i) * n + cols[i]];
  if (rec) {
    tape->record([x, out, cols, m, n]() {
      const double* g = out.grad();
      double* gx = const_cast<Tensor&>(x).grad();
      for (int i = 0; i < m; ++i) gx[static_cast<size_t>(i) * n + cols[i]] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// finite differences

GradCheckResult finite_difference_check(const std::function<double()>& f,
                                        const std::vector<GradCheckParam>& params,
                                        double h, double tolerance) {
  if (h <= 0.0) throw std::invalid_argument("finite_difference_check: h must be positive");
  const double base = f();
  const double again = f();
  if (base != again) {
    throw std::runtime_error("finite_difference_check: f is not deterministic (" +
                             std::to_string(base) + " vs " + std::to_string(again) + ")");
  }
  GradCheckResult result;
  result.tolerance = tolerance;
  for (const GradCheckParam& p : params) {
    GradCheckResult::Entry entry;
    entry.name = p.name;
    Tensor t = p.param;
    double* values = t.data();
    const double* analytic = t.grad();
    for (size_t i = 0; i < t.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f();
      values[i] = saved - h;
      const double down = f();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      // The floor keeps near-zero gradients from being judged against pure
      // roundoff: central differences carry ~eps*|f|/(2h) of noise.
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-5});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      if (rel > entry.max_rel_err) {
        entry.max_rel_err = rel;
        entry.worst_index = i;
        entry.worst_analytic = analytic[i];
        entry.worst_numeric = numeric;
      }
    }
    result.max_rel_err = std::max(result.max_rel_err, entry.max_rel_err);
    result.entries.push_back(std::move(entry));
  }
  result.pass = result.max_rel_err < tolerance;
  return result;
}

}  // namespace xlp
