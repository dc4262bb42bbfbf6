#include "milscene/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#ifdef __GLIBC__
#include <malloc.h>
#endif

namespace milscene {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << ")";
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)) {
  for (int d : shape) {
    if (d <= 0)
      throw std::invalid_argument("tensor dimension must be positive, got shape " +
                                  shape_str(shape));
  }
  data.assign(static_cast<size_t>(shape_numel(shape)), fill);
}

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::check_finite(const char* what) const {
  for (double v : data) {
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(what) + ": non-finite value in tensor " +
                               shape_str(shape));
  }
}

TensorPtr make_tensor(Shape s, double fill) {
  return std::make_shared<Tensor>(std::move(s), fill);
}

TensorPtr make_tensor(Shape s, std::vector<double> values) {
  auto t = std::make_shared<Tensor>(std::move(s));
  if (static_cast<int64_t>(values.size()) != t->size())
    throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(t->shape));
  t->data = std::move(values);
  return t;
}

TensorPtr make_param(Shape s, double fill) {
  auto t = make_tensor(std::move(s), fill);
  t->requires_grad = true;
  return t;
}

double scalar_value(const TensorPtr& t) {
  if (!t || t->size() != 1)
    throw std::invalid_argument("expected a one-element tensor");
  return t->data[0];
}

void backward(const TensorPtr& root) {
  if (!root) throw std::invalid_argument("backward: null root");
  if (root->size() != 1)
    throw std::invalid_argument("backward: root must be scalar, got " +
                                shape_str(root->shape));

  // Iterative post-order topological sort over parent links.
  std::vector<Tensor*> order;
  std::unordered_set<Tensor*> seen;
  std::vector<std::pair<Tensor*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Tensor* p = node->parents[idx++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor* node = *it;
    if (node->backprop) {
      node->ensure_grad();
      node->backprop();
    }
  }
}

namespace {
thread_local bool g_grad_enabled = true;
thread_local KinkMeter* g_kink_meter = nullptr;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

GradPause::GradPause() : prev_(g_grad_enabled) { g_grad_enabled = false; }
GradPause::~GradPause() { g_grad_enabled = prev_; }

KinkMeter::KinkMeter() : prev_(g_kink_meter) { g_kink_meter = this; }
KinkMeter::~KinkMeter() { g_kink_meter = prev_; }
void KinkMeter::note(double m) {
  if (m < min_margin_) min_margin_ = m;
}

void note_kink_margin(double m) {
  if (g_kink_meter) g_kink_meter->note(m);
}

bool kink_tracking() { return g_kink_meter != nullptr; }

void reserve_tensor_heap() {
#ifdef __GLIBC__
  static bool done = false;
  if (done) return;
  done = true;
  mallopt(M_MMAP_THRESHOLD, 64 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 64 * 1024 * 1024);
#endif
}

TensorPtr ParamSet::add(const std::string& name, TensorPtr t) {
  if (params_.count(name) || buffers_.count(name))
    throw std::invalid_argument("duplicate parameter name: " + name);
  t->requires_grad = true;
  order_.push_back(name);
  params_[name] = t;
  return t;
}

TensorPtr ParamSet::add_buffer(const std::string& name, TensorPtr t) {
  if (params_.count(name) || buffers_.count(name))
    throw std::invalid_argument("duplicate buffer name: " + name);
  t->requires_grad = false;
  buffer_order_.push_back(name);
  buffers_[name] = t;
  return t;
}

TensorPtr ParamSet::find(const std::string& name) const {
  auto it = params_.find(name);
  if (it != params_.end()) return it->second;
  auto jt = buffers_.find(name);
  if (jt != buffers_.end()) return jt->second;
  return nullptr;
}

std::vector<double>& ParamSet::momentum(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end())
    throw std::invalid_argument("momentum: unknown parameter " + name);
  auto& buf = momentum_[name];
  if (buf.size() != it->second->data.size()) buf.assign(it->second->data.size(), 0.0);
  return buf;
}

int64_t ParamSet::total_params() const {
  int64_t n = 0;
  for (const auto& name : order_) n += params_.at(name)->size();
  return n;
}

void ParamSet::quantize_f32() {
  auto round_trip = [](std::vector<double>& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  };
  for (const auto& name : order_) {
    round_trip(params_.at(name)->data);
    round_trip(momentum(name));
  }
  for (const auto& name : buffer_order_) round_trip(buffers_.at(name)->data);
}

}  // namespace milscene
