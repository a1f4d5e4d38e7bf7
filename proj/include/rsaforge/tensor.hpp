#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rsaforge/errors.hpp"

namespace rsaforge {

// Dense n-dimensional row-major tensor of 32-bit floats. This is the single
// numeric container of the project: images, weights, activations, RDMs and
// checkpoint payloads all live in one of these.
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(checked_numel(shape_), fill) {}

  Tensor(std::initializer_list<std::size_t> shape, float fill = 0.0f)
      : Tensor(std::vector<std::size_t>(shape), fill) {}

  static Tensor from_data(std::vector<std::size_t> shape, std::vector<float> data) {
    if (checked_numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape product " +
                       std::to_string(checked_numel(shape)));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // Row-major offsets for the common ranks.
  std::size_t offset2(std::size_t i, std::size_t j) const { return i * shape_[1] + j; }
  std::size_t offset3(std::size_t c, std::size_t h, std::size_t w) const {
    return (c * shape_[1] + h) * shape_[2] + w;
  }
  std::size_t offset4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  float& at2(std::size_t i, std::size_t j) { return data_[offset2(i, j)]; }
  float at2(std::size_t i, std::size_t j) const { return data_[offset2(i, j)]; }
  float& at3(std::size_t c, std::size_t h, std::size_t w) { return data_[offset3(c, h, w)]; }
  float at3(std::size_t c, std::size_t h, std::size_t w) const { return data_[offset3(c, h, w)]; }
  float& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[offset4(n, c, h, w)];
  }
  float at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[offset4(n, c, h, w)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(float v) {
    for (auto& x : data_) x = v;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << ',';
      os << shape_[i];
    }
    os << ']';
    return os.str();
  }

  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("tensor dimensions must be >= 1");
      if (d != 0 && n > std::numeric_limits<std::size_t>::max() / d)
        throw ShapeError("tensor shape product overflows");
      n *= d;
    }
    return n;
  }

private:
  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

inline void require_shape(const Tensor& t, const std::vector<std::size_t>& shape,
                          const std::string& what) {
  if (t.shape() != shape) {
    std::ostringstream os;
    os << what << ": expected shape [";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << ',';
      os << shape[i];
    }
    os << "], got " << t.shape_str();
    throw ShapeError(os.str());
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const std::string& what) {
  if (t.rank() != rank)
    throw ShapeError(what + ": expected rank " + std::to_string(rank) + " tensor, got " +
                     t.shape_str());
}

} // namespace rsaforge
