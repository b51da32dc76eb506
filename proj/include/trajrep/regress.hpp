#pragma once

#include "trajrep/basis.hpp"
#include "trajrep/noisemodel.hpp"
#include "trajrep/trajdata.hpp"

#include <Eigen/Core>

#include <string>
#include <vector>

namespace trajrep {

/// Zero-mean Gaussian prior over stacked trajectory coefficients.
struct PriorParams {
    Eigen::MatrixXd sigma_omega;

    /// Throws unless sigma_omega is square, symmetric and PD.
    void validate() const;
};

/// Closed-form Bayesian fit of one trajectory: coefficient posterior plus the
/// per-sample predictive positions and covariances.
struct PosteriorFit {
    Eigen::VectorXd omega_post;
    Eigen::MatrixXd sigma_post;
    Eigen::Matrix2Xd predicted;
    std::vector<Eigen::Matrix2d> predictive_cov;
};

/// Posterior over coefficients given per-sample observations and noise
/// blocks. All solves go through Cholesky factorizations of the posterior
/// precision; a condition estimate above 1e12 raises a numerical error
/// naming `id`. `prior_mean` generalizes the default zero-mean prior (used by
/// the rigid-motion equivariance checks, where translations shift the prior).
PosteriorFit posterior(const Eigen::Matrix2Xd& obs, const Eigen::VectorXd& taus,
                       const BlockDiagCov& noise, const PriorParams& prior,
                       const BasisSpec& spec, const std::string& id = "",
                       const Eigen::VectorXd* prior_mean = nullptr);

/// Predictive position and 2x2 covariance of a fit at an arbitrary tau.
std::pair<Eigen::Vector2d, Eigen::Matrix2d> predict_at(const PosteriorFit& fit,
                                                       const BasisSpec& spec, double tau,
                                                       int order = 0);

struct TrajectoryError {
    std::string id;
    double ade = 0.0;
    double ade_lon = 0.0;
    double ade_lat = 0.0;
};

/// Corpus-level representation error. Longitudinal/lateral components are the
/// residual projected on the per-sample heading and its perpendicular;
/// percentiles are nearest-rank over the pooled per-sample errors.
struct ErrorReport {
    double ade = 0.0;
    double ade_lon = 0.0;
    double ade_lat = 0.0;
    double p999 = 0.0;
    double p999_lon = 0.0;
    double p999_lat = 0.0;
    std::vector<TrajectoryError> per_trajectory;
    std::vector<double> sample_err;  // pooled |residual|
    std::vector<double> sample_lon;  // pooled |longitudinal residual|
    std::vector<double> sample_lat;  // pooled |lateral residual|
};

/// Nearest-rank percentile (q in (0, 1]) of a sample set.
double nearest_rank_percentile(std::vector<double> values, double q);

/// Evaluates fits against their trajectories. Every sample needs a finite
/// heading (the data layer guarantees a heading source for cleaned corpora).
ErrorReport ade(const std::vector<PosteriorFit>& fits,
                const std::vector<FitTrajectory>& trajs);

struct KinematicConstraint {
    double tau = 0.0;
    int order = 0;
    Eigen::Vector2d value = Eigen::Vector2d::Zero();
};

/// Exact coefficient determination from n+1 constraints on the curve or its
/// tau-derivatives (e.g. position, velocity and acceleration at two times for
/// n = 5). Throws std::invalid_argument for a wrong constraint count and a
/// rank error when the constraint system is singular.
Eigen::VectorXd solve_from_kinematics(const std::vector<KinematicConstraint>& constraints,
                                      const BasisSpec& spec);

}  // namespace trajrep
