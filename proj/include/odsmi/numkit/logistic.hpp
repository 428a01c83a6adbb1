#ifndef ODSMI_NUMKIT_LOGISTIC_HPP
#define ODSMI_NUMKIT_LOGISTIC_HPP

#include <cmath>
#include <string>

#include "odsmi/errors.hpp"
#include "odsmi/linalg.hpp"

namespace odsmi::numkit {

struct LogisticFit {
    Vector coefficients;
    SymMatrix covariance; // inverse observed information
    int iterations = 0;
    double deviance = 0.0;
};

inline double expit(double eta) {
    if (eta >= 0.0) {
        return 1.0 / (1.0 + std::exp(-eta));
    }
    const double e = std::exp(eta);
    return e / (1.0 + e);
}

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// Logistic regression by Newton-Raphson / IRLS. `offset` enters the linear
// predictor with coefficient fixed at one; an empty offset means zero.
inline LogisticFit logistic_fit(const Vector& responses, const Matrix& covariates, const Vector& offset = Vector()) {
    const auto n = covariates.rows();
    const auto p = covariates.cols();
    if (responses.size() != n) {
        throw SpecError("logistic_fit: response length does not match design rows");
    }
    if (offset.size() != 0 && offset.size() != n) {
        throw SpecError("logistic_fit: offset length does not match design rows");
    }
    for (Eigen::Index j = 0; j < p; ++j) {
        if (covariates.col(j).cwiseAbs().maxCoeff() == 0.0) {
            throw RankError("logistic_fit: covariate column " + std::to_string(j) + " is identically zero");
        }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
        if (responses[i] != 0.0 && responses[i] != 1.0) {
            throw SpecError("logistic_fit: responses must be 0 or 1");
        }
    }
    const Vector off = offset.size() == 0 ? Vector::Zero(n) : offset;

    constexpr int max_iter = 50;
    Vector beta = Vector::Zero(p);
    LogisticFit out;
    bool converged = false;
    Matrix info(p, p);
    for (int iter = 1; iter <= max_iter; ++iter) {
        const Vector eta = covariates * beta + off;
        Vector mu(n);
        Vector w(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            mu[i] = expit(eta[i]);
            w[i] = mu[i] * (1.0 - mu[i]);
        }
        const Vector score = covariates.transpose() * (responses - mu);
        info = covariates.transpose() * w.asDiagonal() * covariates;
        Eigen::ColPivHouseholderQR<Matrix> qr(info);
        qr.setThreshold(1e-10);
        if (qr.rank() < p) {
            // Fitted weights collapsing to zero signal separation, not collinearity.
            if (w.maxCoeff() < 1e-8 || iter > 1) {
                Eigen::Index dir = 0;
                beta.cwiseAbs().maxCoeff(&dir);
                throw SeparationError("logistic_fit: perfect separation along coefficient " + std::to_string(dir));
            }
            throw RankError("logistic_fit: information matrix has rank " + std::to_string(qr.rank()) + " < " +
                            std::to_string(p));
        }
        const Vector delta = qr.solve(score);
        beta += delta;
        out.iterations = iter;
        if (delta.cwiseAbs().maxCoeff() < 1e-10 * std::max(1.0, beta.cwiseAbs().maxCoeff())) {
            converged = true;
            break;
        }
    }
    if (!converged || (covariates * beta).cwiseAbs().maxCoeff() > 35.0) {
        Eigen::Index dir = 0;
        beta.cwiseAbs().maxCoeff(&dir);
        throw SeparationError("logistic_fit: no finite maximum (separation along coefficient " + std::to_string(dir) +
                              ")");
    }

    const Vector eta = covariates * beta + off;
    double dev = 0.0;
    Vector w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = expit(eta[i]);
        dev -= 2.0 * (responses[i] > 0.5 ? std::log(m) : std::log1p(-m));
        w[i] = m * (1.0 - m);
    }
    info = covariates.transpose() * w.asDiagonal() * covariates;
    Matrix cov = info.llt().solve(Matrix::Identity(p, p));
    out.coefficients = beta;
    out.covariance = SymMatrix(0.5 * (cov + cov.transpose()), "logistic covariance");
    out.deviance = dev;
    return out;
}

} // namespace odsmi::numkit

#endif
