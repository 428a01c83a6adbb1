#ifndef ODSMI_NUMKIT_OPTIMIZE_HPP
#define ODSMI_NUMKIT_OPTIMIZE_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <string>

#include "odsmi/errors.hpp"
#include "odsmi/linalg.hpp"

namespace odsmi::numkit {

// Objective to be maximized. `gradient`, when set, must return the exact
// gradient of `value`; otherwise central differences are used.
struct Objective {
    std::function<double(const Vector&)> value;
    std::function<Vector(const Vector&)> gradient;
};

struct OptimOptions {
    double gradient_tol = 1e-6; // on the max-abs gradient
    double step_tol = 1e-8;     // relative step size
    int max_iterations = 500;
    bool compute_hessian = true;
};

struct OptimResult {
    Vector argmax;
    double value = 0.0;
    SymMatrix neg_hessian_inverse;
    bool converged = false;
    int iterations = 0;
    double gradient_norm = 0.0;
    std::string message;
};

inline Vector central_gradient(const std::function<double(const Vector&)>& f, const Vector& x) {
    const double base_step = std::cbrt(std::numeric_limits<double>::epsilon());
    Vector g(x.size());
    Vector xp = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        const double h = base_step * std::max(1.0, std::abs(x[i]));
        xp[i] = x[i] + h;
        const double fp = f(xp);
        xp[i] = x[i] - h;
        const double fm = f(xp);
        xp[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    return g;
}

// Hessian by central differences of the gradient when one is available,
// otherwise by second differences of the value. Result is symmetrized.
inline Matrix numerical_hessian(const Objective& obj, const Vector& x) {
    const auto n = x.size();
    Matrix hess(n, n);
    if (obj.gradient) {
        Vector xp = x;
        for (Eigen::Index i = 0; i < n; ++i) {
            const double h = 1e-5 * std::max(1.0, std::abs(x[i]));
            xp[i] = x[i] + h;
            const Vector gp = obj.gradient(xp);
            xp[i] = x[i] - h;
            const Vector gm = obj.gradient(xp);
            xp[i] = x[i];
            hess.col(i) = (gp - gm) / (2.0 * h);
        }
    } else {
        const double f0 = obj.value(x);
        Vector step(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            step[i] = 1e-4 * std::max(1.0, std::abs(x[i]));
        }
        Vector xp = x;
        for (Eigen::Index i = 0; i < n; ++i) {
            xp[i] = x[i] + step[i];
            const double fp = obj.value(xp);
            xp[i] = x[i] - step[i];
            const double fm = obj.value(xp);
            xp[i] = x[i];
            hess(i, i) = (fp - 2.0 * f0 + fm) / (step[i] * step[i]);
            for (Eigen::Index j = 0; j < i; ++j) {
                auto eval = [&](double si, double sj) {
                    Vector xq = x;
                    xq[i] += si * step[i];
                    xq[j] += sj * step[j];
                    return obj.value(xq);
                };
                hess(i, j) = (eval(1, 1) - eval(1, -1) - eval(-1, 1) + eval(-1, -1)) / (4.0 * step[i] * step[j]);
                hess(j, i) = hess(i, j);
            }
        }
    }
    return 0.5 * (hess + hess.transpose());
}

// Once steps fall below step_tol the gradient can no longer be reduced in
// floating point. Accept when the gradient is small relative to the
// objective scale or the quasi-Newton predicted gain is negligible.
inline bool stalled_converged(const Vector& g, const Matrix& h_inv, double f, const OptimOptions& opts) {
    const double scale = std::max(1.0, std::abs(f));
    return g.cwiseAbs().maxCoeff() < std::sqrt(opts.gradient_tol) * scale || g.dot(h_inv * g) < 1e-10 * scale;
}

// BFGS ascent with a backtracking (Armijo) line search. Non-finite trial
// values are treated as failed steps and backtracked.
inline OptimResult maximize(const Objective& obj, const Vector& init, const OptimOptions& opts = {}) {
    const auto n = init.size();
    auto grad = [&](const Vector& x) -> Vector {
        return obj.gradient ? obj.gradient(x) : central_gradient(obj.value, x);
    };

    Vector x = init;
    double fx = obj.value(x);
    if (!std::isfinite(fx)) {
        throw DomainError("maximize: objective is not finite at the initial point");
    }
    Vector g = grad(x);
    Matrix h_inv = Matrix::Identity(n, n); // inverse of the negative Hessian
    bool scaled = false;

    OptimResult res;
    int iter = 0;
    for (; iter < opts.max_iterations; ++iter) {
        if (g.cwiseAbs().maxCoeff() < opts.gradient_tol) {
            res.converged = true;
            break;
        }
        Vector dir = h_inv * g;
        if (!(dir.dot(g) > 0.0)) {
            h_inv.setIdentity();
            dir = g;
        }
        // first iterate: cap the step so a poorly scaled start cannot overshoot
        if (!scaled) {
            const double cap = 1.0 / std::max(1.0, dir.cwiseAbs().maxCoeff());
            dir *= cap;
        }
        double alpha = 1.0;
        const double slope = dir.dot(g);
        Vector x_new;
        double f_new = -std::numeric_limits<double>::infinity();
        bool accepted = false;
        for (int k = 0; k < 60; ++k) {
            x_new = x + alpha * dir;
            f_new = obj.value(x_new);
            if (std::isfinite(f_new) && f_new >= fx + 1e-4 * alpha * slope) {
                accepted = true;
                break;
            }
            alpha *= (std::isfinite(f_new) ? 0.5 : 0.1);
        }
        if (!accepted) {
            // no ascent possible along the quasi-Newton direction
            if (!h_inv.isIdentity()) {
                h_inv.setIdentity();
                continue;
            }
            res.message = "line search failed";
            res.converged = stalled_converged(g, h_inv, fx, opts);
            break;
        }
        const Vector s = x_new - x;
        const Vector g_new = grad(x_new);
        const Vector y = g - g_new; // change in the negative gradient
        const double sy = s.dot(y);
        const double rel_step = s.cwiseAbs().maxCoeff() / std::max(1.0, x.cwiseAbs().maxCoeff());
        x = x_new;
        const double f_old = fx;
        fx = f_new;
        g = g_new;
        if (sy > 1e-12 * s.norm() * y.norm()) {
            if (!scaled) {
                h_inv *= sy / y.squaredNorm();
                scaled = true;
            }
            const double rho = 1.0 / sy;
            const Matrix eye = Matrix::Identity(n, n);
            h_inv = (eye - rho * s * y.transpose()) * h_inv * (eye - rho * y * s.transpose()) +
                    rho * s * s.transpose();
        }
        if (rel_step < opts.step_tol && std::abs(fx - f_old) <= 1e-14 * std::max(1.0, std::abs(fx))) {
            res.message = "step tolerance reached";
            res.converged = stalled_converged(g, h_inv, fx, opts);
            ++iter;
            break;
        }
    }
    res.argmax = x;
    res.value = fx;
    res.iterations = iter;
    res.gradient_norm = g.cwiseAbs().maxCoeff();
    if (res.converged && res.message.empty()) {
        res.message = "gradient tolerance reached";
    } else if (!res.converged && res.message.empty()) {
        res.message = "maximum iterations reached";
    }

    if (opts.compute_hessian) {
        const Matrix neg_h = -numerical_hessian(obj, x);
        Eigen::LLT<Matrix> llt(neg_h);
        if (llt.info() == Eigen::Success) {
            Matrix inv = llt.solve(Matrix::Identity(n, n));
            res.neg_hessian_inverse = SymMatrix(0.5 * (inv + inv.transpose()), "inverse negative Hessian");
        } else {
            res.converged = false;
            res.message += "; negative Hessian not positive definite";
            res.neg_hessian_inverse = SymMatrix();
        }
    }
    return res;
}

} // namespace odsmi::numkit

#endif
