#include "trajrep/basis.hpp"

#include <cmath>
#include <stdexcept>

namespace trajrep {
namespace {

// Vandermonde-type systems above this degree are numerically hopeless.
constexpr int kMaxDegree = 12;

double binomial(int n, int k) {
    if (k < 0 || k > n) return 0.0;
    double b = 1.0;
    for (int i = 0; i < k; ++i) b = b * double(n - i) / double(i + 1);
    return b;
}

// phi_k(tau) = tau^k, order-th derivative w.r.t. tau.
Eigen::VectorXd monomial_values(int degree, double tau, int order) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(degree + 1);
    for (int k = order; k <= degree; ++k) {
        double fall = 1.0;
        for (int q = 0; q < order; ++q) fall *= double(k - q);
        const int e = k - order;
        // pow(0, 0) is taken as 1 so the constant term survives at tau = 0.
        const double p = (e == 0) ? 1.0 : std::pow(tau, e);
        v[k] = fall * p;
    }
    return v;
}

Eigen::VectorXd bernstein_values(int degree, double tau) {
    Eigen::VectorXd v(degree + 1);
    for (int k = 0; k <= degree; ++k) {
        const int e1 = k, e2 = degree - k;
        const double p1 = (e1 == 0) ? 1.0 : std::pow(tau, e1);
        const double p2 = (e2 == 0) ? 1.0 : std::pow(1.0 - tau, e2);
        v[k] = binomial(degree, k) * p1 * p2;
    }
    return v;
}

// q-th derivative via the degree-reduction identity
//   B_{k,n}^(q) = n!/(n-q)! * sum_j (-1)^j C(q,j) B_{k-q+j, n-q}.
Eigen::VectorXd bernstein_derivatives(int degree, double tau, int order) {
    const Eigen::VectorXd low = bernstein_values(degree - order, tau);
    double fall = 1.0;
    for (int q = 0; q < order; ++q) fall *= double(degree - q);

    Eigen::VectorXd v = Eigen::VectorXd::Zero(degree + 1);
    for (int k = 0; k <= degree; ++k) {
        double acc = 0.0;
        for (int j = 0; j <= order; ++j) {
            const int idx = k - order + j;
            if (idx < 0 || idx > degree - order) continue;
            const double sign = (j % 2 == 0) ? 1.0 : -1.0;
            acc += sign * binomial(order, j) * low[idx];
        }
        v[k] = fall * acc;
    }
    return v;
}

// Monomial coefficients of the Bernstein functions: phi_bern^T = phi_mono^T E,
// E(j, k) = (-1)^(j-k) C(n, j) C(j, k) for j >= k.
Eigen::MatrixXd bernstein_to_monomial(int degree) {
    const int n = degree;
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(n + 1, n + 1);
    for (int k = 0; k <= n; ++k) {
        for (int j = k; j <= n; ++j) {
            const double sign = ((j - k) % 2 == 0) ? 1.0 : -1.0;
            e(j, k) = sign * binomial(n, j) * binomial(j, k);
        }
    }
    return e;
}

// Closed-form inverse: (E^-1)(j, k) = C(j, k) / C(n, k) for j >= k.
Eigen::MatrixXd monomial_to_bernstein(int degree) {
    const int n = degree;
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(n + 1, n + 1);
    for (int k = 0; k <= n; ++k) {
        for (int j = k; j <= n; ++j) {
            e(j, k) = binomial(j, k) / binomial(n, k);
        }
    }
    return e;
}

}  // namespace

BasisSpec::BasisSpec(BasisFamily family_, int degree_, int spatial_dim_, double horizon_)
    : family(family_), degree(degree_), spatial_dim(spatial_dim_), horizon(horizon_) {
    if (degree < 0 || degree > kMaxDegree)
        throw std::invalid_argument("BasisSpec: degree must be in [0, 12]");
    if (spatial_dim < 1) throw std::invalid_argument("BasisSpec: spatial_dim must be >= 1");
    if (!(horizon > 0.0)) throw std::invalid_argument("BasisSpec: horizon must be > 0");
}

BasisVector eval_basis(const BasisSpec& spec, double tau, int order) {
    if (!(tau >= 0.0 && tau <= 1.0))
        throw std::domain_error("eval_basis: tau outside [0, 1]");
    if (order < 0) throw std::domain_error("eval_basis: negative derivative order");

    BasisVector out;
    out.tau = tau;
    out.derivative_order = order;
    if (order > spec.degree) {
        out.values = Eigen::VectorXd::Zero(spec.degree + 1);
        return out;
    }
    switch (spec.family) {
        case BasisFamily::monomial:
            out.values = monomial_values(spec.degree, tau, order);
            break;
        case BasisFamily::bernstein:
            out.values = (order == 0) ? bernstein_values(spec.degree, tau)
                                      : bernstein_derivatives(spec.degree, tau, order);
            break;
    }
    return out;
}

DesignMatrix design_matrix(const BasisSpec& spec, const std::vector<double>& times) {
    if (times.empty()) throw std::invalid_argument("design_matrix: empty time sequence");
    const int d = spec.spatial_dim;
    const int p = spec.coeff_dim();
    const int m = static_cast<int>(times.size());

    DesignMatrix out;
    out.sample_times = times;
    out.entries = Eigen::MatrixXd::Zero(p, m * d);
    for (int j = 0; j < m; ++j) {
        const Eigen::VectorXd phi = eval_basis(spec, times[j], 0).values;
        for (int k = 0; k <= spec.degree; ++k)
            for (int a = 0; a < d; ++a) out.entries(k * d + a, j * d + a) = phi[k];
    }
    return out;
}

Eigen::MatrixXd basis_change(const BasisSpec& from, const BasisSpec& to) {
    if (from.degree != to.degree)
        throw std::invalid_argument("basis_change: mismatched degrees");
    const int n = from.degree;
    if (from.family == to.family) return Eigen::MatrixXd::Identity(n + 1, n + 1);
    if (from.family == BasisFamily::bernstein) return bernstein_to_monomial(n);
    return monomial_to_bernstein(n);
}

Eigen::MatrixXd kron_identity(const Eigen::MatrixXd& m, int d) {
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(m.rows() * d, m.cols() * d);
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            for (int a = 0; a < d; ++a) out(i * d + a, j * d + a) = m(i, j);
    return out;
}

}  // namespace trajrep
