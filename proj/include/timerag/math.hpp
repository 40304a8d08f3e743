#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <vector>

namespace timerag {

template <class Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
template <class Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixXd = Matrix<double>;
using VectorXd = Vector<double>;
using RowVectorXd = RowVector<double>;

/// Row-wise softmax. Entries equal to -inf get probability zero; every row
/// must contain at least one finite entry.
template <class Derived>
Matrix<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& logits) {
    using Scalar = typename Derived::Scalar;
    Matrix<Scalar> out(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const Scalar m = logits.row(r).maxCoeff();
        out.row(r) = (logits.row(r).array() - m).exp();
        out.row(r) /= out.row(r).sum();
    }
    return out;
}

/// log(sum(exp(row))) computed stably.
template <class Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& row) {
    using Scalar = typename Derived::Scalar;
    const Scalar m = row.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((row.array() - m).exp().sum());
}

/// Mean categorical cross-entropy of row-wise logits against integer targets.
template <class Derived>
typename Derived::Scalar mean_cross_entropy(const Eigen::MatrixBase<Derived>& logits,
                                            std::span<const int> targets) {
    using Scalar = typename Derived::Scalar;
    Scalar total = 0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        total += log_sum_exp(logits.row(r)) - logits(r, targets[static_cast<std::size_t>(r)]);
    }
    return logits.rows() == 0 ? Scalar(0) : total / static_cast<Scalar>(logits.rows());
}

template <class DerivedA, class DerivedB>
typename DerivedA::Scalar cosine_similarity(const Eigen::MatrixBase<DerivedA>& a,
                                            const Eigen::MatrixBase<DerivedB>& b) {
    const auto na = a.norm();
    const auto nb = b.norm();
    return a.dot(b) / (na * nb);
}

/// x / sqrt(mean(x^2) + eps), without the gain.
template <class Derived>
Vector<typename Derived::Scalar> rms_normalize(const Eigen::MatrixBase<Derived>& x,
                                               typename Derived::Scalar eps) {
    using Scalar = typename Derived::Scalar;
    const Scalar r = std::sqrt(x.squaredNorm() / static_cast<Scalar>(x.size()) + eps);
    return x / r;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <class Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
    return m.allFinite();
}

}  // namespace timerag
