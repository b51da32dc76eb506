#pragma once

#include <Eigen/Core>

#include <vector>

namespace trajrep {

enum class BasisFamily { monomial, bernstein };

/// Polynomial basis of rescaled time tau in [0, 1].
///
/// A trajectory is c(tau) = sum_k phi_k(tau) * w_k with n+1 fixed basis
/// functions phi_k and spatial coefficient points w_k in R^d. The horizon T
/// maps physical time onto tau = (t - t0) / T; derivatives returned by
/// eval_basis are taken w.r.t. tau, so a caller working in seconds rescales
/// order-q derivatives by 1 / T^q.
struct BasisSpec {
    BasisFamily family = BasisFamily::monomial;
    int degree = 5;
    int spatial_dim = 2;
    double horizon = 5.0;

    BasisSpec() = default;
    BasisSpec(BasisFamily family_, int degree_, int spatial_dim_ = 2, double horizon_ = 5.0);

    /// (n+1)*d, the size of a stacked coefficient vector.
    int coeff_dim() const { return (degree + 1) * spatial_dim; }
};

/// Values of phi_0..phi_n (or a tau-derivative of them) at one tau.
struct BasisVector {
    Eigen::VectorXd values;
    double tau = 0.0;
    int derivative_order = 0;
};

/// Stacked regression matrix Phi of shape (n+1)d x md; column block j is
/// phi(tau_j) kron I_d, so Phi^T maps a coefficient vector to the stacked
/// positions at the sample times.
struct DesignMatrix {
    Eigen::MatrixXd entries;
    std::vector<double> sample_times;
};

/// Basis values (order = 0) or tau-derivatives (order >= 1) at tau in [0, 1].
/// Orders above the degree give the zero vector. Throws std::domain_error for
/// tau outside [0, 1].
BasisVector eval_basis(const BasisSpec& spec, double tau, int order = 0);

/// Assemble Phi for the given rescaled sample times. Throws
/// std::invalid_argument on an empty time list.
DesignMatrix design_matrix(const BasisSpec& spec, const std::vector<double>& times);

/// Coefficient change of basis: returns the invertible (n+1)x(n+1) matrix M
/// with w_to = M * w_from representing the same curve, equivalently
/// phi_to(tau)^T M = phi_from(tau)^T for all tau. Both specs must share the
/// degree; for stacked d-dimensional coefficients apply kron(M, I_d).
Eigen::MatrixXd basis_change(const BasisSpec& from, const BasisSpec& to);

/// kron(M, I_d) for mapping stacked coefficient vectors.
Eigen::MatrixXd kron_identity(const Eigen::MatrixXd& m, int d);

}  // namespace trajrep
