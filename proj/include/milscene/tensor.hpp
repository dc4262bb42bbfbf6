// Dense row-major tensors with reverse-mode gradients for the fixed
// operation set this model needs. Interior nodes of a forward graph keep
// shared links to their parents plus a closure that scatters gradient into
// them; backward() replays the closures in reverse topological order.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace milscene {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

struct Tensor {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward() reaches this node
  bool requires_grad = false;
  std::vector<TensorPtr> parents;
  std::function<void()> backprop;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  bool tracked() const { return requires_grad || !parents.empty(); }
  void ensure_grad();
  void check_finite(const char* what) const;
};

TensorPtr make_tensor(Shape s, double fill = 0.0);
TensorPtr make_tensor(Shape s, std::vector<double> values);
TensorPtr make_param(Shape s, double fill = 0.0);

// Value of a one-element tensor.
double scalar_value(const TensorPtr& t);

// Reverse-mode sweep from a scalar root. Gradients accumulate additively
// into every tracked node reachable from the root.
void backward(const TensorPtr& root);

// Autograd toggle. While paused, ops record no graph edges, so evaluation
// passes build no graph and free their intermediates as they go.
bool grad_enabled();
class GradPause {
 public:
  GradPause();
  ~GradPause();
  GradPause(const GradPause&) = delete;
  GradPause& operator=(const GradPause&) = delete;

 private:
  bool prev_;
};

// Records the smallest margin to a non-differentiable point (relu zero
// crossings, pooling/argmax ties) seen during forward passes while an
// instance is live. Gradient checks use it to reject sample points where
// central differences straddle a kink.
class KinkMeter {
 public:
  KinkMeter();
  ~KinkMeter();
  KinkMeter(const KinkMeter&) = delete;
  KinkMeter& operator=(const KinkMeter&) = delete;
  double min_margin() const { return min_margin_; }
  void reset() { min_margin_ = 1e300; }
  void note(double m);

 private:
  double min_margin_ = 1e300;
  KinkMeter* prev_;
};
void note_kink_margin(double m);
bool kink_tracking();

// Keeps multi-megabyte tensor blocks on the heap across graph rebuilds.
// glibc hands large allocations straight back to the OS on free, which makes
// every training step fault its whole working set in again. Idempotent.
void reserve_tensor_heap();

// Named model state. `params` are trainable tensors with per-entry momentum
// buffers; `buffers` are non-trainable tensors (batch-norm running stats)
// that still travel with checkpoints. Iteration order is insertion order.
class ParamSet {
 public:
  TensorPtr add(const std::string& name, TensorPtr t);
  TensorPtr add_buffer(const std::string& name, TensorPtr t);

  TensorPtr find(const std::string& name) const;  // params, then buffers
  bool has(const std::string& name) const { return find(name) != nullptr; }

  std::vector<double>& momentum(const std::string& name);

  const std::vector<std::string>& names() const { return order_; }
  const std::vector<std::string>& buffer_names() const { return buffer_order_; }

  int64_t total_params() const;

  // Rounds every parameter, momentum buffer, and buffer through float32.
  // Checkpoints store float32, so this makes a written checkpoint an exact
  // synchronization point for bit-reproducible resume.
  void quantize_f32();

 private:
  std::vector<std::string> order_;
  std::vector<std::string> buffer_order_;
  std::map<std::string, TensorPtr> params_;
  std::map<std::string, TensorPtr> buffers_;
  std::map<std::string, std::vector<double>> momentum_;
};

}  // namespace milscene
