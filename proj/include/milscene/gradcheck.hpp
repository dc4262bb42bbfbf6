#pragma once

#include <functional>
#include <vector>

#include "milscene/tensor.hpp"

namespace milscene {

// A scalar-valued function of a fixed set of input tensors. The check reads
// and writes the inputs' data in place, so the function must rebuild its
// graph from them on every call.
using ScalarFn = std::function<TensorPtr(const std::vector<TensorPtr>&)>;

// Compares analytic gradients of fn against central finite differences
// (step 1e-4, double precision) over every element of every input that
// requires grad. Returns the worst relative error, guarded by a 1e-8
// denominator floor. Throws on non-finite values.
double grad_check(const ScalarFn& fn, const std::vector<TensorPtr>& inputs,
                  double step = 1e-4);

}  // namespace milscene
