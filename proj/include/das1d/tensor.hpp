#pragma once

// Dense row-major double tensors, rank <= 3. Shapes in this library are tiny
// ([batch, channels, length] with length ~50), so everything is a flat
// std::vector<double> behind a shared_ptr; copies are shallow unless asked.

#include <cstddef>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace das1d {

using SharedVec = std::shared_ptr<std::vector<double>>;

struct Shape {
  // dims[0..rank). rank 0 means scalar (numel 1).
  int rank = 0;
  long dims[3] = {1, 1, 1};

  Shape() = default;
  Shape(std::initializer_list<long> ds) {
    if (ds.size() > 3) throw std::invalid_argument("shape rank > 3");
    rank = static_cast<int>(ds.size());
    int i = 0;
    for (long d : ds) {
      if (d <= 0) throw std::invalid_argument("shape dim must be positive");
      dims[i++] = d;
    }
  }

  long numel() const {
    long n = 1;
    for (int i = 0; i < rank; ++i) n *= dims[i];
    return n;
  }

  long operator[](int i) const { return dims[i]; }

  bool operator==(const Shape& o) const {
    if (rank != o.rank) return false;
    for (int i = 0; i < rank; ++i)
      if (dims[i] != o.dims[i]) return false;
    return true;
  }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < rank; ++i) {
      if (i) s += ",";
      s += std::to_string(dims[i]);
    }
    return s + "]";
  }
};

struct Tensor {
  Shape shape;
  SharedVec data;
  int node = -1;  // tape node id; -1 when not tracked

  Tensor() = default;
  Tensor(Shape s, SharedVec d, int n = -1)
      : shape(s), data(std::move(d)), node(n) {}

  static Tensor zeros(Shape s) {
    return Tensor(s, std::make_shared<std::vector<double>>(s.numel(), 0.0));
  }

  static Tensor full(Shape s, double v) {
    return Tensor(s, std::make_shared<std::vector<double>>(s.numel(), v));
  }

  static Tensor from(std::vector<double> v, Shape s) {
    if (static_cast<long>(v.size()) != s.numel())
      throw std::invalid_argument("tensor data size does not match shape");
    return Tensor(s, std::make_shared<std::vector<double>>(std::move(v)));
  }

  static Tensor scalar(double v) { return full(Shape{}, v); }

  long numel() const { return shape.numel(); }
  bool tracked() const { return node >= 0; }

  double* ptr() { return data->data(); }
  const double* ptr() const { return data->data(); }

  double& at(long i) { return (*data)[static_cast<std::size_t>(i)]; }
  double at(long i) const { return (*data)[static_cast<std::size_t>(i)]; }

  // Value of a one-element tensor (losses, tau, ...).
  double item() const {
    if (numel() != 1) throw std::invalid_argument("item() on non-scalar");
    return (*data)[0];
  }

  // Deep copy of the values, not tracked.
  Tensor clone() const {
    return Tensor(shape, std::make_shared<std::vector<double>>(*data));
  }

  double& operator()(long b, long c, long l) {
    return (*data)[(b * shape.dims[1] + c) * shape.dims[2] + l];
  }
  double operator()(long b, long c, long l) const {
    return (*data)[(b * shape.dims[1] + c) * shape.dims[2] + l];
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* what) {
  if (!(a.shape == b.shape))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " +
                                a.shape.str() + " vs " + b.shape.str());
}

}  // namespace das1d
