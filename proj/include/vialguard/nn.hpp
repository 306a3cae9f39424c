#pragma once

// Minimal reverse-mode machinery for the detector.
//
// Activations use a channel-major layout [C, N, H, W]: every channel of the
// whole batch is one contiguous row, so a convolution is a single GEMM over
// the batch and channel concatenation is a block copy.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace vialguard::nn {

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  void fill(double v);
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

struct Parameter {
  std::string path;
  Tensor value;
  Tensor grad;
  // Buffers (batch-norm running statistics) are persisted but not trained.
  bool trainable = true;
};

struct Node {
  Tensor value;
  Tensor grad;
  std::function<void(Node&)> backward;

  // Gradient buffer, zero-initialized on first access.
  Tensor& grad_buffer();
};

using Var = std::shared_ptr<Node>;

// Records operations in execution order; backward() walks them in reverse.
class Tape {
 public:
  explicit Tape(bool recording = false) : recording_(recording) {}

  bool recording() const { return recording_; }
  Var leaf(Tensor value);
  Var record(Tensor value, std::function<void(Node&)> backward);
  void backward();
  void clear() { nodes_.clear(); }

 private:
  bool recording_;
  std::vector<Var> nodes_;
};

struct Conv2d {
  std::string path;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  std::size_t weight = 0;
  std::size_t bias = 0;

  int out_size(int in_size) const { return (in_size + 2 * pad - kernel) / stride + 1; }
  std::int64_t parameter_count() const {
    return static_cast<std::int64_t>(in_channels) * out_channels * kernel * kernel + out_channels;
  }
  // One MAC per multiply-add: C_in * C_out * k^2 * H_out * W_out.
  std::int64_t macs(int out_h, int out_w) const {
    return static_cast<std::int64_t>(in_channels) * out_channels * kernel * kernel * out_h * out_w;
  }
};

struct BatchNorm2d {
  std::string path;
  int channels = 0;
  std::size_t gamma = 0;
  std::size_t beta = 0;
  std::size_t running_mean = 0;
  std::size_t running_var = 0;
  double momentum = 0.1;
  double eps = 1e-5;
};

struct AvgPool2d {
  int kernel = 2;
  int stride = 2;
  bool ceil_mode = true;

  int out_size(int in_size) const;
};

// Owns parameter tensors; layers refer to them by index so models stay
// copyable values.
class ParameterStore {
 public:
  std::size_t add(std::string path, Tensor value, bool trainable = true);
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  std::size_t size() const { return params_.size(); }
  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  void zero_grad();

 private:
  std::vector<Parameter> params_;
};

Conv2d make_conv(ParameterStore& store, std::string path, int in_channels, int out_channels,
                 int kernel, int stride, int pad);
BatchNorm2d make_batch_norm(ParameterStore& store, std::string path, int channels);

// Ops. `x` values are [C, N, H, W].
Var conv2d(Tape& tape, const Var& x, const Conv2d& conv, ParameterStore& store);
Var batch_norm(Tape& tape, const Var& x, const BatchNorm2d& bn, ParameterStore& store,
               bool training);
Var relu(Tape& tape, const Var& x);
Var avg_pool(Tape& tape, const Var& x, const AvgPool2d& pool);
Var concat_channels(Tape& tape, const std::vector<Var>& parts);

// C = alpha * op(A) * op(B) + beta * C, row-major. Uses OpenBLAS unless
// its kernel fails a one-time self-test, in which case Eigen is used.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha, const double* a,
          const double* b, double beta, double* c);

bool blas_self_test();

// For executables: if the auto-selected OpenBLAS kernel is faulty and no
// OPENBLAS_CORETYPE is set, re-executes the program with one that works.
// Call first thing in main().
void ensure_reliable_blas(char** argv);

}  // namespace vialguard::nn
