#include "trajrep/ebayes.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace trajrep {
namespace {

constexpr double kLog2Pi = 1.8378770664093454836;
// exp() argument guard; keeps squared scales finite without constraining any
// plausible iterate.
constexpr double kExpClamp = 170.0;

double safe_exp(double x) { return std::exp(std::clamp(x, -kExpClamp, kExpClamp)); }

int resolve_threads(int requested, int n_items) {
    int t = requested > 0 ? requested
                          : static_cast<int>(std::thread::hardware_concurrency());
    if (t < 1) t = 1;
    return std::min(t, std::max(1, n_items));
}

template <class Fn>
void parallel_for(int n, int threads, Fn&& fn) {
    threads = resolve_threads(threads, n);
    if (threads <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error) error = std::current_exception();
                next.store(n);
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

// Trajectory data rearranged for the optimizer hot loop: basis values and
// line-of-sight rotations are fixed across iterations.
struct PreparedTraj {
    Eigen::MatrixXd phi;  // (n+1) x m
    Eigen::Matrix2Xd y;
    Eigen::VectorXd range;
    std::vector<Eigen::Matrix2d> rot;
    int m = 0;
};

PreparedTraj prepare(const FitTrajectory& traj, const BasisSpec& spec) {
    PreparedTraj pt;
    pt.m = traj.sample_count();
    pt.phi.resize(spec.degree + 1, pt.m);
    for (int j = 0; j < pt.m; ++j)
        pt.phi.col(j) = eval_basis(spec, traj.taus(j), 0).values;
    pt.y = traj.obs;
    pt.range = traj.range;
    pt.rot.resize(pt.m);
    for (int j = 0; j < pt.m; ++j) pt.rot[j] = rotation2d(traj.rotation(j));
    return pt;
}

struct PriorCache {
    Eigen::MatrixXd chol_lower;  // L with sigma_omega = L L^T
    int p = 0;
};

PriorCache prior_cache_from_sigma(const Eigen::MatrixXd& sigma_omega) {
    Eigen::LLT<Eigen::MatrixXd> llt(sigma_omega);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument("prior covariance is not positive definite");
    return {llt.matrixL(), static_cast<int>(sigma_omega.rows())};
}

struct Contribution {
    double ll = std::numeric_limits<double>::quiet_NaN();
    Eigen::VectorXd grad;
    bool finite = false;
};

// Log marginal likelihood of one trajectory and, optionally, its gradient
// w.r.t. the natural parameters (theta order as in sample_cov_grad, then the
// lower-triangular entries of L column-major). Works in the prior-whitened
// information form G = I + L^T (Phi W Phi^T) L, so every factorization is
// p x p and collapsed prior directions stay numerically benign. Note
// log det Sigma = log det Sigma_o + log det G.
Contribution eval_one(const PreparedTraj& pt, const NoiseParams& noise,
                      const PriorCache& prior, bool want_gradient,
                      const Eigen::VectorXd* mean_coeffs = nullptr) {
    Contribution out;
    const int p = prior.p;
    const int nb = p / 2;
    const int n_theta = noise_dof(noise);
    const auto* ego = std::get_if<EgoNoiseParams>(&noise);
    const auto* agent = std::get_if<AgentNoiseParams>(&noise);

    Eigen::MatrixXd big_b = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd small_b = Eigen::VectorXd::Zero(p);
    double quad0 = 0.0;
    double log_det_noise = 0.0;

    std::vector<Eigen::Matrix2d> w_blocks(pt.m);
    Eigen::Matrix2Xd resid(2, pt.m);

    Eigen::Matrix2d ego_world;
    if (ego) {
        const double v = ego->sigma_diag * ego->sigma_diag;
        if (!(v > 0.0) || !(v * v - ego->sigma_cov * ego->sigma_cov > 0.0)) return out;
        ego_world << v, ego->sigma_cov, ego->sigma_cov, v;
    }

    for (int j = 0; j < pt.m; ++j) {
        const Eigen::Matrix2d& rot = pt.rot[j];
        Eigen::Matrix2d cov;
        if (ego) {
            cov = rot * ego_world * rot.transpose();
        } else {
            const double r = pt.range(j);
            const double cc = agent->sigma_c * agent->sigma_c;
            const double along = agent->beta0 + agent->beta1 * r + agent->beta2 * r * r + cc;
            const double cross = r * r * agent->sigma_alpha * agent->sigma_alpha + cc;
            if (!(along > 0.0) || !(cross > 0.0)) return out;
            Eigen::Matrix2d los = Eigen::Matrix2d::Zero();
            los(0, 0) = along;
            los(1, 1) = cross;
            cov = rot * los * rot.transpose();
        }
        const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
        if (!(det > 0.0) || !(cov(0, 0) > 0.0) || !std::isfinite(det)) return out;
        log_det_noise += std::log(det);

        Eigen::Matrix2d w;
        w << cov(1, 1), -cov(0, 1), -cov(1, 0), cov(0, 0);
        w /= det;
        w_blocks[j] = w;

        Eigen::Vector2d yj = pt.y.col(j);
        if (mean_coeffs) {
            Eigen::Vector2d mj = Eigen::Vector2d::Zero();
            for (int k = 0; k < nb; ++k) mj += pt.phi(k, j) * mean_coeffs->segment<2>(2 * k);
            yj -= mj;
        }
        resid.col(j) = yj;

        const Eigen::Vector2d wy = w * yj;
        quad0 += yj.dot(wy);
        for (int k = 0; k < nb; ++k) {
            small_b.segment<2>(2 * k) += pt.phi(k, j) * wy;
            for (int l = k; l < nb; ++l)
                big_b.block<2, 2>(2 * k, 2 * l) += pt.phi(k, j) * pt.phi(l, j) * w;
        }
    }
    for (int k = 0; k < nb; ++k)
        for (int l = 0; l < k; ++l)
            big_b.block<2, 2>(2 * k, 2 * l) = big_b.block<2, 2>(2 * l, 2 * k).transpose();

    const Eigen::MatrixXd& chol = prior.chol_lower;
    Eigen::MatrixXd g = chol.transpose() * big_b * chol;
    g.diagonal().array() += 1.0;
    if (!g.allFinite()) return out;
    Eigen::LLT<Eigen::MatrixXd> llt(g);
    if (llt.info() != Eigen::Success) return out;
    double log_det_g = 0.0;
    {
        const auto& lower = llt.matrixLLT();
        for (int i = 0; i < p; ++i) {
            if (!(lower(i, i) > 0.0)) return out;
            log_det_g += 2.0 * std::log(lower(i, i));
        }
    }
    const Eigen::VectorXd lb = chol.transpose() * small_b;
    const Eigen::VectorXd hz = llt.solve(lb);

    out.ll = -0.5 * (pt.m * 2.0 * kLog2Pi + log_det_noise + log_det_g + quad0 -
                     lb.dot(hz));
    if (!std::isfinite(out.ll)) return out;
    out.finite = true;
    if (!want_gradient) return out;

    const Eigen::VectorXd h = chol * hz;  // A^-1 b
    const Eigen::MatrixXd a_inv = chol * llt.solve(Eigen::MatrixXd(chol.transpose()));
    const Eigen::MatrixXd ba_inv = big_b * a_inv;
    const Eigen::MatrixXd cap_m = big_b - ba_inv * big_b;  // Phi Sigma^-1 Phi^T
    const Eigen::VectorXd v = small_b - big_b * h;         // Phi Sigma^-1 y
    const Eigen::MatrixXd g_sigma = -0.5 * (cap_m - v * v.transpose());

    // d ll / d L, with sigma_omega = L L^T; lower triangle only.
    const Eigen::MatrixXd g_l = 2.0 * g_sigma * prior.chol_lower;

    out.grad = Eigen::VectorXd::Zero(n_theta + p * (p + 1) / 2);

    // Theta gradient via the diagonal blocks of Sigma^-1.
    for (int j = 0; j < pt.m; ++j) {
        const Eigen::Matrix2d& w = w_blocks[j];
        Eigen::Vector2d ph = Eigen::Vector2d::Zero();  // P_j^T h
        for (int k = 0; k < nb; ++k) ph += pt.phi(k, j) * h.segment<2>(2 * k);
        const Eigen::Vector2d s_j = w * (resid.col(j) - ph);

        Eigen::Matrix2d k_j = Eigen::Matrix2d::Zero();  // P_j^T A^-1 P_j
        for (int k = 0; k < nb; ++k) {
            if (pt.phi(k, j) == 0.0) continue;
            for (int l = 0; l < nb; ++l) {
                if (pt.phi(l, j) == 0.0) continue;
                k_j += pt.phi(k, j) * pt.phi(l, j) * a_inv.block<2, 2>(2 * k, 2 * l);
            }
        }
        const Eigen::Matrix2d s_block = w - w * k_j * w;  // Sigma^-1 diagonal block

        const Eigen::Matrix2d& rot = pt.rot[j];
        const Eigen::Matrix2d e = rot.transpose() * s_block * rot;
        const Eigen::Vector2d f = rot.transpose() * s_j;

        if (ego) {
            out.grad(0) += -0.5 * 2.0 * ego->sigma_diag *
                           (s_block.trace() - s_j.squaredNorm());
            out.grad(1) += -(e(0, 1) - f(0) * f(1));
        } else {
            const double r = pt.range(j);
            const double along_term = e(0, 0) - f(0) * f(0);
            const double cross_term = e(1, 1) - f(1) * f(1);
            out.grad(0) += -0.5 * 2.0 * r * r * agent->sigma_alpha * cross_term;
            out.grad(1) += -0.5 * along_term;
            out.grad(2) += -0.5 * r * along_term;
            out.grad(3) += -0.5 * r * r * along_term;
            out.grad(4) += -0.5 * 2.0 * agent->sigma_c *
                           (s_block.trace() - s_j.squaredNorm());
        }
    }

    int idx = n_theta;
    for (int col = 0; col < p; ++col)
        for (int row = col; row < p; ++row) out.grad(idx++) = g_l(row, col);

    if (!out.grad.allFinite()) {
        out.finite = false;
        out.grad.resize(0);
    }
    return out;
}

// Canonical reduction: contributions are summed in sorted order so the
// result does not depend on corpus permutation or thread count.
bool canonical_less(const Contribution& a, const Contribution& b) {
    if (a.ll != b.ll) return a.ll < b.ll;
    const Eigen::Index n = std::min(a.grad.size(), b.grad.size());
    for (Eigen::Index i = 0; i < n; ++i)
        if (a.grad(i) != b.grad(i)) return a.grad(i) < b.grad(i);
    return a.grad.size() < b.grad.size();
}

ObjectiveEval reduce(std::vector<Contribution>& contributions, int grad_size) {
    ObjectiveEval out;
    for (const auto& c : contributions)
        if (!c.finite) return out;  // value NaN, finite=false

    std::vector<int> order(contributions.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int i, int j) {
        return canonical_less(contributions[i], contributions[j]);
    });

    double total = 0.0;
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(grad_size);
    for (int i : order) {
        total += contributions[i].ll;
        if (grad_size > 0) grad += contributions[i].grad;
    }
    out.value = total;
    out.gradient = std::move(grad);
    out.finite = std::isfinite(total) && (grad_size == 0 || out.gradient.allFinite());
    return out;
}

struct UnconstrainedView {
    NoiseParams noise;
    Eigen::MatrixXd chol_lower;
    // theta chain-rule factors d theta / d u.
    Eigen::VectorXd theta_jacobian;
};

UnconstrainedView decode(const Eigen::VectorXd& u, ObjectClass cls, int degree,
                         int spatial_dim) {
    UnconstrainedView view;
    const int p = (degree + 1) * spatial_dim;
    int n_theta = 0;
    if (cls == ObjectClass::ego) {
        EgoNoiseParams ego;
        ego.sigma_diag = safe_exp(u(0));
        ego.sigma_cov = u(1);
        view.noise = ego;
        n_theta = 2;
        view.theta_jacobian.resize(2);
        view.theta_jacobian << ego.sigma_diag, 1.0;
    } else {
        AgentNoiseParams agent;
        agent.sigma_alpha = safe_exp(u(0));
        agent.beta0 = safe_exp(u(1));
        agent.beta1 = safe_exp(u(2));
        agent.beta2 = safe_exp(u(3));
        agent.sigma_c = safe_exp(u(4));
        view.noise = agent;
        n_theta = 5;
        view.theta_jacobian.resize(5);
        view.theta_jacobian << agent.sigma_alpha, agent.beta0, agent.beta1, agent.beta2,
            agent.sigma_c;
    }
    view.chol_lower = Eigen::MatrixXd::Zero(p, p);
    int idx = n_theta;
    for (int col = 0; col < p; ++col) {
        for (int row = col; row < p; ++row) {
            const double raw = u(idx++);
            view.chol_lower(row, col) = (row == col) ? safe_exp(raw) : raw;
        }
    }
    return view;
}

// Maps the natural-parameter gradient of eval_one to unconstrained
// coordinates in place.
void apply_chain_rule(Eigen::VectorXd& grad, const UnconstrainedView& view, int p) {
    const int n_theta = static_cast<int>(view.theta_jacobian.size());
    for (int t = 0; t < n_theta; ++t) grad(t) *= view.theta_jacobian(t);
    int idx = n_theta;
    for (int col = 0; col < p; ++col)
        for (int row = col; row < p; ++row) {
            if (row == col) grad(idx) *= view.chol_lower(col, col);
            ++idx;
        }
}

std::vector<PreparedTraj> prepare_corpus(const std::vector<FitTrajectory>& corpus,
                                         const BasisSpec& spec) {
    std::vector<PreparedTraj> prepared(corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i) prepared[i] = prepare(corpus[i], spec);
    return prepared;
}

ObjectiveEval objective_at(const std::vector<PreparedTraj>& prepared,
                           const std::vector<int>& subset, const Eigen::VectorXd& u,
                           ObjectClass cls, const BasisSpec& spec, int threads,
                           bool want_gradient) {
    const int p = spec.coeff_dim();
    const UnconstrainedView view = decode(u, cls, spec.degree, spec.spatial_dim);
    const PriorCache prior{view.chol_lower, p};

    std::vector<Contribution> contributions(subset.size());
    parallel_for(static_cast<int>(subset.size()), threads, [&](int i) {
        contributions[i] = eval_one(prepared[subset[i]], view.noise, prior, want_gradient);
    });

    const int grad_size = want_gradient ? static_cast<int>(u.size()) : 0;
    ObjectiveEval eval = reduce(contributions, grad_size);
    if (eval.finite && want_gradient) apply_chain_rule(eval.gradient, view, p);
    return eval;
}

std::string dump_iterate(const Eigen::VectorXd& u) {
    std::ostringstream os;
    os.precision(17);
    for (Eigen::Index i = 0; i < u.size(); ++i) os << (i ? " " : "") << u(i);
    return os.str();
}

}  // namespace

int model_dof(const NoiseParams& noise, int degree, int spatial_dim) {
    const int p = (degree + 1) * spatial_dim;
    return noise_dof(noise) + p * (p + 1) / 2;
}

int packed_size(ObjectClass cls, int degree, int spatial_dim) {
    const int p = (degree + 1) * spatial_dim;
    return (cls == ObjectClass::ego ? 2 : 5) + p * (p + 1) / 2;
}

Eigen::VectorXd pack_hyperparams(const HyperParams& hyper, int spatial_dim) {
    const ObjectClass cls =
        std::holds_alternative<EgoNoiseParams>(hyper.noise) ? ObjectClass::ego
                                                            : ObjectClass::agent;
    Eigen::VectorXd u(packed_size(cls, hyper.degree, spatial_dim));
    int idx = 0;
    if (const auto* ego = std::get_if<EgoNoiseParams>(&hyper.noise)) {
        u(idx++) = std::log(ego->sigma_diag);
        u(idx++) = ego->sigma_cov;
    } else {
        const auto& a = std::get<AgentNoiseParams>(hyper.noise);
        u(idx++) = std::log(a.sigma_alpha);
        u(idx++) = std::log(a.beta0);
        u(idx++) = std::log(a.beta1);
        u(idx++) = std::log(a.beta2);
        u(idx++) = std::log(a.sigma_c);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(hyper.prior.sigma_omega);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument("pack_hyperparams: prior not positive definite");
    const Eigen::MatrixXd lower = llt.matrixL();
    for (int col = 0; col < lower.cols(); ++col)
        for (int row = col; row < lower.rows(); ++row)
            u(idx++) = (row == col) ? std::log(lower(row, col)) : lower(row, col);
    return u;
}

HyperParams unpack_hyperparams(const Eigen::VectorXd& u, ObjectClass cls, int degree,
                               int spatial_dim) {
    if (u.size() != packed_size(cls, degree, spatial_dim))
        throw std::invalid_argument("unpack_hyperparams: wrong vector size");
    const UnconstrainedView view = decode(u, cls, degree, spatial_dim);
    HyperParams hyper;
    hyper.noise = view.noise;
    hyper.degree = degree;
    // The optimizer may collapse unidentified prior directions arbitrarily
    // far; floor the factor diagonal so the exported covariance stays PD.
    Eigen::MatrixXd lower = view.chol_lower;
    const double floor = 1e-6 * lower.diagonal().maxCoeff();
    for (Eigen::Index i = 0; i < lower.rows(); ++i)
        lower(i, i) = std::max(lower(i, i), floor);
    hyper.prior.sigma_omega = lower * lower.transpose();
    return hyper;
}

double log_marginal(const FitTrajectory& traj, const HyperParams& hyper,
                    MarginalRoute route, BasisFamily family,
                    const Eigen::VectorXd* prior_mean) {
    const BasisSpec spec(family, hyper.degree, 2, traj.horizon);
    const int m = traj.sample_count();

    if (route == MarginalRoute::lowrank) {
        // A prior with collapsed directions (legitimate after fitting an
        // over-wide degree) defeats the information-form solve; the dense
        // route below stays well posed, so fall through to it.
        bool prior_ok = true;
        PriorCache prior;
        try {
            prior = prior_cache_from_sigma(hyper.prior.sigma_omega);
        } catch (const std::invalid_argument&) {
            prior_ok = false;
        }
        if (prior_ok) {
            const PreparedTraj pt = prepare(traj, spec);
            const Contribution c = eval_one(pt, hyper.noise, prior, false, prior_mean);
            if (!c.finite)
                throw std::invalid_argument("log_marginal: invalid hyperparameters for " +
                                            traj.id);
            return c.ll;
        }
    }

    // Dense route: factor the full md x md covariance.
    std::vector<double> taus(traj.taus.data(), traj.taus.data() + m);
    const Eigen::MatrixXd phi = design_matrix(spec, taus).entries;
    std::vector<Eigen::Matrix2d> blocks(m);
    for (int j = 0; j < m; ++j) {
        SampleGeometry geom{traj.range(j), traj.rotation(j)};
        blocks[j] = sample_cov(hyper.noise, geom, traj.rotation(j));
    }
    const BlockDiagCov noise = assemble_block_cov(blocks);
    Eigen::MatrixXd sigma = noise.dense();
    sigma.noalias() += phi.transpose() * hyper.prior.sigma_omega * phi;

    Eigen::VectorXd y(2 * m);
    for (int j = 0; j < m; ++j) y.segment<2>(2 * j) = traj.obs.col(j);
    if (prior_mean) y -= phi.transpose() * (*prior_mean);

    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw std::invalid_argument("log_marginal: dense covariance not PD for " + traj.id);
    double log_det = 0.0;
    for (int i = 0; i < 2 * m; ++i) log_det += 2.0 * std::log(llt.matrixLLT()(i, i));
    return -0.5 * (2.0 * m * kLog2Pi + log_det + y.dot(llt.solve(y)));
}

ObjectiveEval corpus_objective(const std::vector<FitTrajectory>& corpus,
                               const Eigen::VectorXd& u, ObjectClass cls,
                               const BasisSpec& spec, int threads, bool want_gradient) {
    const std::vector<PreparedTraj> prepared = prepare_corpus(corpus, spec);
    std::vector<int> all(corpus.size());
    std::iota(all.begin(), all.end(), 0);
    return objective_at(prepared, all, u, cls, spec, threads, want_gradient);
}

double corpus_log_marginal(const std::vector<FitTrajectory>& corpus,
                           const HyperParams& hyper, MarginalRoute route, int threads) {
    std::vector<Contribution> contributions(corpus.size());
    parallel_for(static_cast<int>(corpus.size()), threads, [&](int i) {
        Contribution c;
        c.ll = log_marginal(corpus[i], hyper, route);
        c.finite = std::isfinite(c.ll);
        contributions[i] = std::move(c);
    });
    ObjectiveEval eval = reduce(contributions, 0);
    if (!eval.finite)
        throw std::invalid_argument("corpus_log_marginal: non-finite likelihood");
    return eval.value;
}

FitResult fit_hyperparams(const std::vector<FitTrajectory>& corpus, const BasisSpec& spec,
                          ObjectClass cls, const OptimizerConfig& cfg) {
    if (corpus.empty()) throw std::invalid_argument("fit_hyperparams: empty corpus");
    if (!(cfg.gradient_tolerance > 0.0) || !(cfg.initial_step > 0.0) ||
        !(cfg.min_step > 0.0) || cfg.max_iterations < 1)
        throw std::invalid_argument("fit_hyperparams: optimizer tolerances must be positive");
    for (const auto& traj : corpus) {
        if (traj.object_class != cls)
            throw std::invalid_argument("fit_hyperparams: mixed object classes in corpus");
        if (std::abs(traj.horizon - corpus.front().horizon) > 1e-9)
            throw std::invalid_argument("fit_hyperparams: mixed horizons in corpus");
    }

    const int p = spec.coeff_dim();
    const int n_theta = cls == ObjectClass::ego ? 2 : 5;
    const int dim = packed_size(cls, spec.degree, spec.spatial_dim);
    const auto n = static_cast<double>(corpus.size());

    // Scale-aware initialization: prior at the corpus displacement scale,
    // noise at plausible sensor magnitudes. The sum is order-canonical so a
    // permuted corpus starts from the identical iterate.
    std::vector<double> sq(corpus.size());
    size_t cnt = 0;
    for (size_t i = 0; i < corpus.size(); ++i) {
        sq[i] = corpus[i].obs.squaredNorm();
        cnt += corpus[i].sample_count();
    }
    std::sort(sq.begin(), sq.end());
    const double ms = std::accumulate(sq.begin(), sq.end(), 0.0);
    const double scale = std::max(1e-3, std::sqrt(ms / std::max<size_t>(1, 2 * cnt)));

    Eigen::VectorXd u = Eigen::VectorXd::Zero(dim);
    if (cls == ObjectClass::ego) {
        u(0) = std::log(0.02);
        u(1) = 0.0;
    } else {
        u(0) = std::log(1e-3);
        u(1) = std::log(1e-2);
        u(2) = std::log(1e-3);
        u(3) = std::log(1e-5);
        u(4) = std::log(0.1);
    }
    {
        int idx = n_theta;
        for (int col = 0; col < p; ++col)
            for (int row = col; row < p; ++row)
                u(idx++) = (row == col) ? std::log(scale) : 0.0;
    }

    // Per-coordinate step scales: log coordinates move in nats, raw
    // coordinates at their natural magnitude.
    Eigen::VectorXd coord_scale = Eigen::VectorXd::Ones(dim);
    if (cls == ObjectClass::ego) coord_scale(1) = std::max(1e-6, 0.02 * 0.02);
    {
        int idx = n_theta;
        for (int col = 0; col < p; ++col)
            for (int row = col; row < p; ++row) {
                if (row != col) coord_scale(idx) = std::max(1e-3, 0.25 * scale);
                ++idx;
            }
    }

    const std::vector<PreparedTraj> prepared = prepare_corpus(corpus, spec);
    std::vector<int> all(corpus.size());
    std::iota(all.begin(), all.end(), 0);

    const bool minibatch =
        cfg.batch_size > 0 && cfg.batch_size < static_cast<int>(corpus.size());
    std::mt19937_64 batch_rng(cfg.rng_seed);
    auto batch_indices = [&]() {
        if (!minibatch) return all;
        std::vector<int> idx = all;
        std::shuffle(idx.begin(), idx.end(), batch_rng);
        idx.resize(cfg.batch_size);
        std::sort(idx.begin(), idx.end());
        return idx;
    };

    auto evaluate = [&](const Eigen::VectorXd& at, const std::vector<int>& subset) {
        ObjectiveEval e =
            objective_at(prepared, subset, at, cls, spec, cfg.threads, true);
        if (minibatch && e.finite) {
            const double boost = n / double(subset.size());
            e.value *= boost;
            e.gradient *= boost;
        }
        return e;
    };

    Eigen::VectorXd step = cfg.initial_step * coord_scale;
    ObjectiveEval cur = evaluate(u, batch_indices());
    if (!cur.finite)
        throw std::runtime_error("fit_hyperparams: non-finite likelihood at the initial "
                                 "point; iterate: " + dump_iterate(u));
    double cur_grad_norm = cur.gradient.lpNorm<Eigen::Infinity>() / n;

    Eigen::VectorXd best_u = u;
    double best_value = cur.value;

    FitResult result;
    int rejections = 0;
    int iter = 0;
    for (; iter < cfg.max_iterations; ++iter) {
        result.grad_inf_norm = cur_grad_norm;
        if (cur_grad_norm < cfg.gradient_tolerance) {
            result.converged = true;
            break;
        }
        if ((step.array() < 2.0 * cfg.min_step * coord_scale.array()).all()) {
            result.converged = true;
            break;
        }

        Eigen::VectorXd proposal = u;
        for (int i = 0; i < dim; ++i) {
            const double g = cur.gradient(i);
            if (g > 0.0) proposal(i) += step(i);
            else if (g < 0.0) proposal(i) -= step(i);
        }

        ObjectiveEval next = evaluate(proposal, batch_indices());
        if (!next.finite) {
            step *= 0.5;  // reject, halve the schedule
            if (++rejections > 80)
                throw std::runtime_error(
                    "fit_hyperparams: persistent non-finite likelihood; iterate: " +
                    dump_iterate(proposal));
            continue;
        }
        rejections = 0;
        // Convergence is judged on the pristine gradient; the sign-memory
        // zeroing below is only for the step schedule.
        const double next_grad_norm = next.gradient.lpNorm<Eigen::Infinity>() / n;

        for (int i = 0; i < dim; ++i) {
            const double prod = cur.gradient(i) * next.gradient(i);
            if (prod > 0.0)
                step(i) = std::min(step(i) * cfg.step_grow, cfg.max_step * coord_scale(i));
            else if (prod < 0.0) {
                step(i) = std::max(step(i) * cfg.step_shrink, cfg.min_step * coord_scale(i));
                next.gradient(i) = 0.0;  // hold this coordinate for one iteration
            }
        }

        u = proposal;
        cur = next;
        cur_grad_norm = next_grad_norm;
        if (cur.value > best_value) {
            best_value = cur.value;
            best_u = u;
        }
    }
    result.iterations = iter;

    result.hyper = unpack_hyperparams(best_u, cls, spec.degree, spec.spatial_dim);
    result.log_type2 =
        objective_at(prepared, all, best_u, cls, spec, cfg.threads, false).value;
    return result;
}

ModelScore score(const std::vector<FitTrajectory>& corpus, const HyperParams& hyper,
                 int threads) {
    if (corpus.empty()) throw std::invalid_argument("score: empty corpus");
    ModelScore s;
    s.degree = hyper.degree;
    s.log_type2 = corpus_log_marginal(corpus, hyper, MarginalRoute::lowrank, threads);
    s.dof = model_dof(hyper.noise, hyper.degree);

    std::vector<int> ms;
    size_t total_scalars = 0;
    ms.reserve(corpus.size());
    for (const auto& traj : corpus) {
        ms.push_back(traj.sample_count());
        total_scalars += 2 * static_cast<size_t>(traj.sample_count());
    }
    std::nth_element(ms.begin(), ms.begin() + ms.size() / 2, ms.end());
    s.nominal_m = ms[ms.size() / 2];

    const auto n = static_cast<double>(corpus.size());
    s.aic = s.log_type2 / n - s.dof;
    s.bic = s.log_type2 / n - 0.5 * s.dof * std::log(double(s.nominal_m));
    s.aic_conventional = s.log_type2 - s.dof;
    s.bic_conventional = s.log_type2 - 0.5 * s.dof * std::log(double(total_scalars));
    return s;
}

DegreeScan scan_degrees(const std::vector<FitTrajectory>& corpus, ObjectClass cls,
                        int degree_from, int degree_to, double horizon,
                        const OptimizerConfig& cfg) {
    if (degree_from > degree_to)
        throw std::invalid_argument("scan_degrees: empty degree range");
    DegreeScan scan;
    for (int n = degree_from; n <= degree_to; ++n) {
        const BasisSpec spec(BasisFamily::monomial, n, 2, horizon);
        FitResult fit = fit_hyperparams(corpus, spec, cls, cfg);
        ModelScore sc = score(corpus, fit.hyper, cfg.threads);
        scan.scores.push_back(sc);
        scan.fits.push_back(std::move(fit));
    }
    auto pick = [&](auto key) {
        int best = 0;
        for (size_t i = 1; i < scan.scores.size(); ++i)
            if (key(scan.scores[i]) > key(scan.scores[best])) best = static_cast<int>(i);
        return scan.scores[best].degree;
    };
    scan.best_aic = pick([](const ModelScore& s) { return s.aic; });
    scan.best_bic = pick([](const ModelScore& s) { return s.bic; });
    scan.best_aic_conventional = pick([](const ModelScore& s) { return s.aic_conventional; });
    scan.best_bic_conventional = pick([](const ModelScore& s) { return s.bic_conventional; });
    return scan;
}

void write_scan_csv(const DegreeScan& scan, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    out << "n,log_type2,aic,bic,dof\n";
    out.precision(12);
    for (const auto& s : scan.scores)
        out << s.degree << ',' << s.log_type2 << ',' << s.aic << ',' << s.bic << ','
            << s.dof << '\n';
}

nlohmann::json scan_to_json(const DegreeScan& scan) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& s : scan.scores) {
        rows.push_back({{"n", s.degree},
                        {"log_type2", s.log_type2},
                        {"aic", s.aic},
                        {"bic", s.bic},
                        {"aic_conventional", s.aic_conventional},
                        {"bic_conventional", s.bic_conventional},
                        {"dof", s.dof},
                        {"nominal_m", s.nominal_m}});
    }
    return nlohmann::json{{"scores", rows},
                          {"selected", {{"aic", scan.best_aic},
                                        {"bic", scan.best_bic},
                                        {"aic_conventional", scan.best_aic_conventional},
                                        {"bic_conventional", scan.best_bic_conventional}}}};
}

nlohmann::json hyperparams_to_json(const HyperParams& hyper, ObjectClass cls,
                                   double horizon) {
    nlohmann::json j = noise_to_json(hyper.noise);
    j["class"] = to_string(cls);
    j["degree"] = hyper.degree;
    j["horizon"] = horizon;
    const auto& s = hyper.prior.sigma_omega;
    std::vector<double> flat;
    flat.reserve(s.size());
    for (Eigen::Index r = 0; r < s.rows(); ++r)
        for (Eigen::Index c = 0; c < s.cols(); ++c) flat.push_back(s(r, c));
    j["sigma_omega"] = flat;
    return j;
}

HyperParams hyperparams_from_json(const nlohmann::json& j) {
    HyperParams hyper;
    hyper.noise = noise_from_json(j);
    hyper.degree = j.at("degree").get<int>();
    const auto flat = j.at("sigma_omega").get<std::vector<double>>();
    const auto p = static_cast<Eigen::Index>(std::llround(std::sqrt(double(flat.size()))));
    if (p * p != static_cast<Eigen::Index>(flat.size()))
        throw std::runtime_error("hyperparams_from_json: sigma_omega is not square");
    hyper.prior.sigma_omega.resize(p, p);
    for (Eigen::Index r = 0; r < p; ++r)
        for (Eigen::Index c = 0; c < p; ++c)
            hyper.prior.sigma_omega(r, c) = flat[static_cast<size_t>(r * p + c)];
    hyper.prior.validate();
    return hyper;
}

}  // namespace trajrep
