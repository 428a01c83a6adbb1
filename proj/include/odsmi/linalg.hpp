#ifndef ODSMI_LINALG_HPP
#define ODSMI_LINALG_HPP

#include <cmath>
#include <string>
#include <utility>

#include <Eigen/Dense>

#include "odsmi/errors.hpp"

namespace odsmi {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Dense symmetric matrix. Construction checks symmetry to 1e-12 relative and
// stores the exactly symmetrized average.
class SymMatrix {
public:
    SymMatrix() = default;

    explicit SymMatrix(Matrix m, std::string label = "matrix") : m_(std::move(m)), label_(std::move(label)) {
        if (m_.rows() != m_.cols()) {
            throw SpecError(label_ + ": not square (" + std::to_string(m_.rows()) + "x" +
                            std::to_string(m_.cols()) + ")");
        }
        if (m_.rows() == 0) {
            throw SpecError(label_ + ": empty matrix");
        }
        const double scale = std::max(1.0, m_.cwiseAbs().maxCoeff());
        const double asym = (m_ - m_.transpose()).cwiseAbs().maxCoeff();
        if (!(asym <= 1e-12 * scale)) {
            throw SpecError(label_ + ": not symmetric (max asymmetry " + std::to_string(asym) + ")");
        }
        m_ = 0.5 * (m_ + m_.transpose()).eval();
    }

    static SymMatrix identity(Eigen::Index n) { return SymMatrix(Matrix::Identity(n, n)); }

    Eigen::Index dim() const { return m_.rows(); }
    const Matrix& matrix() const { return m_; }
    const std::string& label() const { return label_; }
    double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }

    // Cholesky factor; throws FactorizationError naming the matrix when it is
    // not positive definite.
    Eigen::LLT<Matrix> cholesky() const {
        Eigen::LLT<Matrix> llt(m_);
        if (llt.info() != Eigen::Success || !std::isfinite(llt.matrixLLT().diagonal().prod())) {
            throw FactorizationError(label_ + " is not positive definite");
        }
        return llt;
    }

    bool is_positive_definite() const {
        Eigen::LLT<Matrix> llt(m_);
        return llt.info() == Eigen::Success;
    }

private:
    Matrix m_;
    std::string label_ = "matrix";
};

// log-determinant from a Cholesky factor
inline double log_det(const Eigen::LLT<Matrix>& llt) {
    return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

} // namespace odsmi

#endif
