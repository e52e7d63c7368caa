#include "metadet/tensor.hpp"

#include <cmath>

namespace metadet {

template <typename T>
bool TensorT<T>::all_finite() const {
  for (T v : data)
    if (!std::isfinite(double(v))) return false;
  return true;
}

template struct TensorT<float>;
template struct TensorT<double>;

}  // namespace metadet
