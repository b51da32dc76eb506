#include "trajrep/regress.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace trajrep {

void PriorParams::validate() const {
    if (sigma_omega.rows() != sigma_omega.cols() || sigma_omega.rows() == 0)
        throw std::invalid_argument("PriorParams: sigma_omega must be square");
    if (!sigma_omega.isApprox(sigma_omega.transpose(), 1e-10))
        throw std::invalid_argument("PriorParams: sigma_omega must be symmetric");
    Eigen::LLT<Eigen::MatrixXd> llt(sigma_omega);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument("PriorParams: sigma_omega must be positive definite");
}

PosteriorFit posterior(const Eigen::Matrix2Xd& obs, const Eigen::VectorXd& taus,
                       const BlockDiagCov& noise, const PriorParams& prior,
                       const BasisSpec& spec, const std::string& id,
                       const Eigen::VectorXd* prior_mean) {
    const int m = static_cast<int>(obs.cols());
    const int d = spec.spatial_dim;
    const int p = spec.coeff_dim();
    if (d != 2) throw std::invalid_argument("posterior: spatial_dim must be 2");
    if (taus.size() != m || static_cast<int>(noise.blocks.size()) != m)
        throw std::invalid_argument("posterior: inconsistent dimensions");
    prior.validate();
    if (prior.sigma_omega.rows() != p)
        throw std::invalid_argument("posterior: prior dimension mismatch");
    if (prior_mean && prior_mean->size() != p)
        throw std::invalid_argument("posterior: prior mean dimension mismatch");

    Eigen::LLT<Eigen::MatrixXd> prior_llt(prior.sigma_omega);
    const Eigen::MatrixXd prior_chol = prior_llt.matrixL();

    const int nb = spec.degree + 1;
    Eigen::MatrixXd phi(nb, m);
    for (int j = 0; j < m; ++j) phi.col(j) = eval_basis(spec, taus(j), 0).values;

    // Whitened information form: with omega = L z, the posterior precision of
    // z is G = I + L^T (Phi W Phi^T) L, which stays well conditioned even
    // when the prior has near-collapsed directions.
    Eigen::MatrixXd data_info = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);  // Phi W y

    std::vector<Eigen::Matrix2d> noise_inv = noise.inverse_blocks();
    for (int j = 0; j < m; ++j) {
        const Eigen::Vector2d wy = noise_inv[j] * obs.col(j);
        for (int k = 0; k < nb; ++k) {
            rhs.segment<2>(2 * k) += phi(k, j) * wy;
            for (int l = 0; l < nb; ++l)
                data_info.block<2, 2>(2 * k, 2 * l) += phi(k, j) * phi(l, j) * noise_inv[j];
        }
    }

    Eigen::MatrixXd whitened = prior_chol.transpose() * data_info * prior_chol;
    whitened.diagonal().array() += 1.0;

    {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(whitened,
                                                           Eigen::EigenvaluesOnly);
        const double lo = eig.eigenvalues().minCoeff();
        const double hi = eig.eigenvalues().maxCoeff();
        if (!(lo > 0.0) || hi / lo > 1e12)
            throw std::runtime_error("posterior: ill-conditioned precision for trajectory '" +
                                     id + "'");
    }

    Eigen::LLT<Eigen::MatrixXd> llt(whitened);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error("posterior: Cholesky failure for trajectory '" + id + "'");

    Eigen::VectorXd whitened_rhs = prior_chol.transpose() * rhs;
    if (prior_mean)
        whitened_rhs += prior_chol.triangularView<Eigen::Lower>().solve(*prior_mean);

    PosteriorFit fit;
    fit.omega_post = prior_chol * llt.solve(whitened_rhs);
    fit.sigma_post =
        prior_chol * llt.solve(Eigen::MatrixXd(prior_chol.transpose()));
    fit.predicted.resize(2, m);
    fit.predictive_cov.resize(m);
    for (int j = 0; j < m; ++j) {
        Eigen::Vector2d pos = Eigen::Vector2d::Zero();
        Eigen::MatrixXd proj = Eigen::MatrixXd::Zero(p, 2);  // phi(tau_j) kron I_2
        for (int k = 0; k < nb; ++k) {
            pos += phi(k, j) * fit.omega_post.segment<2>(2 * k);
            proj(2 * k, 0) = phi(k, j);
            proj(2 * k + 1, 1) = phi(k, j);
        }
        fit.predicted.col(j) = pos;
        fit.predictive_cov[j] = proj.transpose() * fit.sigma_post * proj;
    }
    return fit;
}

std::pair<Eigen::Vector2d, Eigen::Matrix2d> predict_at(const PosteriorFit& fit,
                                                       const BasisSpec& spec, double tau,
                                                       int order) {
    const Eigen::VectorXd phi = eval_basis(spec, tau, order).values;
    const int nb = spec.degree + 1;
    Eigen::Vector2d pos = Eigen::Vector2d::Zero();
    Eigen::MatrixXd proj = Eigen::MatrixXd::Zero(spec.coeff_dim(), 2);
    for (int k = 0; k < nb; ++k) {
        pos += phi(k) * fit.omega_post.segment<2>(2 * k);
        proj(2 * k, 0) = phi(k);
        proj(2 * k + 1, 1) = phi(k);
    }
    return {pos, proj.transpose() * fit.sigma_post * proj};
}

double nearest_rank_percentile(std::vector<double> values, double q) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const auto k = static_cast<size_t>(
        std::clamp<long long>(static_cast<long long>(std::ceil(q * double(values.size()))),
                              1, static_cast<long long>(values.size())));
    return values[k - 1];
}

ErrorReport ade(const std::vector<PosteriorFit>& fits,
                const std::vector<FitTrajectory>& trajs) {
    if (fits.size() != trajs.size())
        throw std::invalid_argument("ade: fits and trajectories are misaligned");

    ErrorReport report;
    double sum_err = 0.0, sum_lon = 0.0, sum_lat = 0.0;
    size_t count = 0;

    for (size_t i = 0; i < fits.size(); ++i) {
        const auto& fit = fits[i];
        const auto& traj = trajs[i];
        const int m = traj.sample_count();
        if (fit.predicted.cols() != m)
            throw std::invalid_argument("ade: fit/trajectory sample mismatch for " + traj.id);

        TrajectoryError te;
        te.id = traj.id;
        for (int j = 0; j < m; ++j) {
            const double heading = traj.headings(j);
            if (!std::isfinite(heading))
                throw std::invalid_argument("ade: missing heading for " + traj.id);
            const Eigen::Vector2d res = fit.predicted.col(j) - traj.obs.col(j);
            const Eigen::Vector2d lon_dir(std::cos(heading), std::sin(heading));
            const Eigen::Vector2d lat_dir(-lon_dir(1), lon_dir(0));
            const double err = res.norm();
            const double lon = std::abs(res.dot(lon_dir));
            const double lat = std::abs(res.dot(lat_dir));
            report.sample_err.push_back(err);
            report.sample_lon.push_back(lon);
            report.sample_lat.push_back(lat);
            te.ade += err;
            te.ade_lon += lon;
            te.ade_lat += lat;
            sum_err += err;
            sum_lon += lon;
            sum_lat += lat;
            ++count;
        }
        if (m > 0) {
            te.ade /= m;
            te.ade_lon /= m;
            te.ade_lat /= m;
        }
        report.per_trajectory.push_back(std::move(te));
    }

    if (count > 0) {
        report.ade = sum_err / double(count);
        report.ade_lon = sum_lon / double(count);
        report.ade_lat = sum_lat / double(count);
        report.p999 = nearest_rank_percentile(report.sample_err, 0.999);
        report.p999_lon = nearest_rank_percentile(report.sample_lon, 0.999);
        report.p999_lat = nearest_rank_percentile(report.sample_lat, 0.999);
    }
    return report;
}

Eigen::VectorXd solve_from_kinematics(const std::vector<KinematicConstraint>& constraints,
                                      const BasisSpec& spec) {
    const int nb = spec.degree + 1;
    if (static_cast<int>(constraints.size()) != nb)
        throw std::invalid_argument("solve_from_kinematics: need exactly n+1 constraints");

    Eigen::MatrixXd g(nb, nb);
    Eigen::MatrixXd values(nb, 2);
    for (int i = 0; i < nb; ++i) {
        g.row(i) = eval_basis(spec, constraints[i].tau, constraints[i].order).values;
        values.row(i) = constraints[i].value.transpose();
    }

    Eigen::FullPivLU<Eigen::MatrixXd> lu(g);
    if (!lu.isInvertible())
        throw std::runtime_error("solve_from_kinematics: singular constraint system (rank " +
                                 std::to_string(lu.rank()) + " of " + std::to_string(nb) + ")");
    const Eigen::MatrixXd coeffs = lu.solve(values);  // (n+1) x 2

    Eigen::VectorXd stacked(2 * nb);
    for (int k = 0; k < nb; ++k) stacked.segment<2>(2 * k) = coeffs.row(k).transpose();
    return stacked;
}

}  // namespace trajrep
