#include "cmtboost/tensor.hpp"

namespace cmtboost {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template class Tensor<float>;
template class Tensor<double>;
template class GradientTape<float>;
template class GradientTape<double>;

}  // namespace cmtboost
