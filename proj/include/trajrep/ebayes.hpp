#pragma once

#include "trajrep/basis.hpp"
#include "trajrep/noisemodel.hpp"
#include "trajrep/regress.hpp"
#include "trajrep/trajdata.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace trajrep {

/// Everything the marginal likelihood depends on: a structured noise model,
/// the coefficient prior, and the polynomial degree.
struct HyperParams {
    NoiseParams noise;
    PriorParams prior;
    int degree = 5;
};

/// First-order ascent settings. The step schedule is resilient-style:
/// per-coordinate steps grow by `step_grow` while the gradient sign holds and
/// shrink by `step_shrink` on a sign flip; a non-finite likelihood rejects
/// the step and halves the schedule.
struct OptimizerConfig {
    int max_iterations = 600;
    double gradient_tolerance = 1e-5;  // inf-norm of per-trajectory gradient
    double initial_step = 0.02;
    double step_grow = 1.2;
    double step_shrink = 0.5;
    double min_step = 1e-10;
    double max_step = 0.5;
    int batch_size = 0;  // 0 = full corpus
    std::uint64_t rng_seed = 0;
    int threads = 0;  // 0 = hardware concurrency
};

struct FitResult {
    HyperParams hyper;
    double log_type2 = 0.0;  // full-corpus value at the optimum, nats
    int iterations = 0;
    bool converged = false;
    double grad_inf_norm = 0.0;
};

/// AIC/BIC at one degree. `aic`/`bic` follow the per-trajectory-normalized
/// definition (log-likelihood over N, unscaled dof); the `_conventional`
/// variants use the textbook normalization and are reported separately.
struct ModelScore {
    int degree = 0;
    double log_type2 = 0.0;  // total corpus log type-II likelihood, nats
    double aic = 0.0;
    double bic = 0.0;
    double aic_conventional = 0.0;
    double bic_conventional = 0.0;
    int dof = 0;
    int nominal_m = 0;  // samples per trajectory entering the BIC term
};

struct DegreeScan {
    std::vector<ModelScore> scores;
    std::vector<FitResult> fits;
    int best_aic = -1;
    int best_bic = -1;
    int best_aic_conventional = -1;
    int best_bic_conventional = -1;
};

enum class MarginalRoute { lowrank, dense };

/// dof(theta) + p(p+1)/2 with p = (n+1)d.
int model_dof(const NoiseParams& noise, int degree, int spatial_dim = 2);

/// Log of the trajectory's marginal (type-II) likelihood: the Gaussian
/// density of the stacked observations with covariance
/// Sigma_o + Phi^T Sigma_omega Phi and mean Phi^T prior_mean (zero by
/// default). The low-rank route solves in coefficient space through the
/// matrix inversion lemma; the dense route factors the full md x md
/// covariance. Both agree to rounding and the dense one exists as an
/// independent check.
double log_marginal(const FitTrajectory& traj, const HyperParams& hyper,
                    MarginalRoute route = MarginalRoute::lowrank,
                    BasisFamily family = BasisFamily::monomial,
                    const Eigen::VectorXd* prior_mean = nullptr);

/// Number of unconstrained coordinates for a class/degree combination.
int packed_size(ObjectClass cls, int degree, int spatial_dim = 2);

/// Smooth bijection onto the unconstrained coordinates used by the
/// optimizer: log for positive noise entries (sigma_cov stays raw) followed
/// by the lower-triangular Cholesky factor of sigma_omega, column-major, with
/// log diagonal.
Eigen::VectorXd pack_hyperparams(const HyperParams& hyper, int spatial_dim = 2);
HyperParams unpack_hyperparams(const Eigen::VectorXd& u, ObjectClass cls, int degree,
                               int spatial_dim = 2);

struct ObjectiveEval {
    double value = 0.0;        // total corpus log type-II likelihood
    Eigen::VectorXd gradient;  // w.r.t. the unconstrained coordinates
    bool finite = false;
};

/// Corpus objective and analytic gradient at unconstrained coordinates `u`.
/// Per-trajectory contributions are computed independently (optionally in
/// parallel) and reduced in a canonical order, so the result is bit-identical
/// under corpus permutation and any thread count.
ObjectiveEval corpus_objective(const std::vector<FitTrajectory>& corpus,
                               const Eigen::VectorXd& u, ObjectClass cls,
                               const BasisSpec& spec, int threads = 0,
                               bool want_gradient = true);

/// Total corpus log marginal likelihood (canonical-order reduction).
double corpus_log_marginal(const std::vector<FitTrajectory>& corpus,
                           const HyperParams& hyper,
                           MarginalRoute route = MarginalRoute::lowrank, int threads = 0);

/// Type-II maximum likelihood over noise and prior parameters for one class
/// at the spec's degree. Throws on an empty or mixed-class corpus and, after
/// persistent step rejections, with a dump of the failing iterate.
FitResult fit_hyperparams(const std::vector<FitTrajectory>& corpus, const BasisSpec& spec,
                          ObjectClass cls, const OptimizerConfig& cfg);

/// AIC/BIC from a fitted model.
ModelScore score(const std::vector<FitTrajectory>& corpus, const HyperParams& hyper,
                 int threads = 0);

/// Independent fit per degree plus the selected degree per criterion.
DegreeScan scan_degrees(const std::vector<FitTrajectory>& corpus, ObjectClass cls,
                        int degree_from, int degree_to, double horizon,
                        const OptimizerConfig& cfg);

/// CSV with the fixed header n,log_type2,aic,bic,dof.
void write_scan_csv(const DegreeScan& scan, const std::string& path);
nlohmann::json scan_to_json(const DegreeScan& scan);

nlohmann::json hyperparams_to_json(const HyperParams& hyper, ObjectClass cls,
                                   double horizon);
HyperParams hyperparams_from_json(const nlohmann::json& j);

}  // namespace trajrep
