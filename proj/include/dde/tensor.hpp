#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dde {

/// Row-major dense matrix. Batches of samples are stored one flattened sample per row.
template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using MatD = Mat<double>;
using MatF = Mat<float>;
using VecD = Vec<double>;

/// Raised when an integration or training run produces NaN/Inf.
class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, long index)
        : std::runtime_error(what + " (at index " + std::to_string(index) + ")"), index_(index) {}

    long index() const noexcept { return index_; }

private:
    long index_;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline std::string shape_str(long rows, long cols) {
    std::ostringstream os;
    os << rows << "x" << cols;
    return os.str();
}

template <class Derived>
void require_same_shape(const Eigen::MatrixBase<Derived>& a, long rows, long cols, const char* what) {
    if (a.rows() != rows || a.cols() != cols) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch, expected " +
                                    shape_str(rows, cols) + " got " + shape_str(a.rows(), a.cols()));
    }
}

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& a) {
    return a.allFinite();
}

template <class To, class From>
Mat<To> cast(const Mat<From>& m) {
    return m.template cast<To>();
}

}  // namespace dde
