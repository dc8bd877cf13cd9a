#pragma once

#include <Eigen/Core>

#include <array>
#include <cassert>
#include <cstddef>
#include <vector>

namespace msim {

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense row-major rank-3 array of doubles, typically [trials x time x units].
class Array3 {
 public:
  Array3() = default;
  Array3(std::size_t n0, std::size_t n1, std::size_t n2, double fill = 0.0)
      : dims_{n0, n1, n2}, data_(n0 * n1 * n2, fill) {}
  Array3(std::size_t n0, std::size_t n1, std::size_t n2, std::vector<double> data)
      : dims_{n0, n1, n2}, data_(std::move(data)) {
    assert(data_.size() == n0 * n1 * n2);
  }

  std::size_t dim(std::size_t axis) const { return dims_[axis]; }
  const std::array<std::size_t, 3>& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dims_[1] + j) * dims_[2] + k];
  }

  /// The [n1 x n2] slab at index i of the leading axis.
  Eigen::Map<const RowMatrixXd> slab(std::size_t i) const {
    return {data_.data() + i * dims_[1] * dims_[2], static_cast<Eigen::Index>(dims_[1]),
            static_cast<Eigen::Index>(dims_[2])};
  }
  Eigen::Map<RowMatrixXd> slab(std::size_t i) {
    return {data_.data() + i * dims_[1] * dims_[2], static_cast<Eigen::Index>(dims_[1]),
            static_cast<Eigen::Index>(dims_[2])};
  }

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  friend bool operator==(const Array3&, const Array3&) = default;

 private:
  std::array<std::size_t, 3> dims_{0, 0, 0};
  std::vector<double> data_;
};

}  // namespace msim
