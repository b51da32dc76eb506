#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "trajrep/regress.hpp"

#include <Eigen/Dense>

#include <numbers>
#include <random>

using namespace trajrep;

namespace {

// Independent evaluation of the closed-form posterior with explicit dense
// inverses; deliberately a different code path from the library.
struct DensePosterior {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

DensePosterior dense_posterior_oracle(const Eigen::Matrix2Xd& obs,
                                      const Eigen::VectorXd& taus,
                                      const BlockDiagCov& noise,
                                      const Eigen::MatrixXd& sigma_omega,
                                      const BasisSpec& spec) {
    const int m = static_cast<int>(obs.cols());
    std::vector<double> times(taus.data(), taus.data() + m);
    const Eigen::MatrixXd phi = design_matrix(spec, times).entries;
    const Eigen::MatrixXd noise_inv = noise.dense().inverse();
    Eigen::VectorXd y(2 * m);
    for (int j = 0; j < m; ++j) y.segment<2>(2 * j) = obs.col(j);

    DensePosterior out;
    out.cov = (sigma_omega.inverse() + phi * noise_inv * phi.transpose()).inverse();
    out.mean = out.cov * phi * noise_inv * y;
    return out;
}

Eigen::MatrixXd random_spd(int p, std::mt19937_64& rng, double lo = 0.5, double hi = 2.0) {
    std::normal_distribution<double> gauss;
    Eigen::MatrixXd a(p, p);
    for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j) a(i, j) = gauss(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    Eigen::MatrixXd q = qr.householderQ();
    std::uniform_real_distribution<double> uni(lo, hi);
    Eigen::VectorXd eigs(p);
    for (int i = 0; i < p; ++i) eigs(i) = uni(rng);
    return q * eigs.asDiagonal() * q.transpose();
}

struct RandomInstance {
    Eigen::Matrix2Xd obs;
    Eigen::VectorXd taus;
    BlockDiagCov noise;
    PriorParams prior;
    BasisSpec spec;
};

RandomInstance random_instance(std::mt19937_64& rng, int degree, int m) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::normal_distribution<double> gauss;
    RandomInstance inst{.obs = {}, .taus = {}, .noise = {}, .prior = {},
                        .spec = BasisSpec(BasisFamily::monomial, degree)};
    inst.taus.resize(m);
    for (int j = 0; j < m; ++j) inst.taus(j) = (j + uni(rng)) / double(m);
    inst.obs.resize(2, m);
    for (int j = 0; j < m; ++j) inst.obs.col(j) = Eigen::Vector2d(gauss(rng), gauss(rng));
    std::vector<Eigen::Matrix2d> blocks(m);
    for (int j = 0; j < m; ++j) {
        Eigen::Matrix2d b;
        const double v1 = 0.05 + uni(rng), v2 = 0.05 + uni(rng);
        const double c = 0.5 * std::min(v1, v2) * (2.0 * uni(rng) - 1.0);
        b << v1, c, c, v2;
        blocks[j] = b;
    }
    inst.noise = assemble_block_cov(blocks);
    inst.prior.sigma_omega = random_spd(inst.spec.coeff_dim(), rng);
    return inst;
}

}  // namespace

TEST_CASE("scalar conjugate-Gaussian sanity") {
    // Degree 0 with decoupled dimensions reduces to the textbook shrinkage
    // formula: posterior mean = c * s^2 / (s^2 + v).
    BasisSpec spec(BasisFamily::monomial, 0);
    const double s2 = 2.0, v = 0.5, cx = 1.3, cy = -0.4;
    Eigen::Matrix2Xd obs(2, 1);
    obs << cx, cy;
    Eigen::VectorXd taus(1);
    taus << 0.5;
    PriorParams prior{s2 * Eigen::Matrix2d::Identity()};
    const auto noise = assemble_block_cov({v * Eigen::Matrix2d::Identity()});
    const auto fit = posterior(obs, taus, noise, prior, spec);
    CHECK(fit.omega_post(0) == doctest::Approx(cx * s2 / (s2 + v)));
    CHECK(fit.omega_post(1) == doctest::Approx(cy * s2 / (s2 + v)));
}

TEST_CASE("noiseless limit reproduces the interpolating polynomial") {
    const int n = 4;
    BasisSpec spec(BasisFamily::monomial, n);
    std::mt19937_64 rng(10);
    std::normal_distribution<double> gauss;

    Eigen::VectorXd truth(2 * (n + 1));
    for (int i = 0; i < truth.size(); ++i) truth(i) = gauss(rng);

    Eigen::VectorXd taus(n + 1);
    for (int j = 0; j <= n; ++j) taus(j) = j / double(n);
    Eigen::Matrix2Xd obs(2, n + 1);
    for (int j = 0; j <= n; ++j) {
        const auto phi = eval_basis(spec, taus(j), 0).values;
        Eigen::Vector2d c = Eigen::Vector2d::Zero();
        for (int k = 0; k <= n; ++k) c += phi(k) * truth.segment<2>(2 * k);
        obs.col(j) = c;
    }

    // Independent oracle: solve the Vandermonde system directly.
    Eigen::MatrixXd vand(n + 1, n + 1);
    for (int j = 0; j <= n; ++j)
        for (int k = 0; k <= n; ++k) vand(j, k) = std::pow(taus(j), k);
    const Eigen::MatrixXd coeffs =
        Eigen::FullPivLU<Eigen::MatrixXd>(vand).solve(obs.transpose());

    std::vector<Eigen::Matrix2d> blocks(n + 1, 1e-16 * Eigen::Matrix2d::Identity());
    PriorParams prior{10.0 * Eigen::MatrixXd::Identity(2 * (n + 1), 2 * (n + 1))};
    const auto fit = posterior(obs, taus, assemble_block_cov(blocks), prior, spec);

    for (int k = 0; k <= n; ++k) {
        CHECK(std::abs(fit.omega_post(2 * k) - coeffs(k, 0)) < 1e-6);
        CHECK(std::abs(fit.omega_post(2 * k + 1) - coeffs(k, 1)) < 1e-6);
        CHECK(std::abs(fit.omega_post(2 * k) - truth(2 * k)) < 1e-6);
    }
}

TEST_CASE("posterior matches the dense oracle on random instances") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 25; ++trial) {
        const int degree = 1 + int(trial % 3) * 2;  // 1, 3, 5
        const int m = 8 + int(rng() % 20);
        const auto inst = random_instance(rng, degree, m);
        const auto fit =
            posterior(inst.obs, inst.taus, inst.noise, inst.prior, inst.spec);
        const auto oracle = dense_posterior_oracle(inst.obs, inst.taus, inst.noise,
                                                   inst.prior.sigma_omega, inst.spec);
        CHECK((fit.omega_post - oracle.mean).norm() / oracle.mean.norm() < 1e-10);
        CHECK((fit.sigma_post - oracle.cov).norm() / oracle.cov.norm() < 1e-10);
    }
}

TEST_CASE("posterior covariance never exceeds the prior") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        const auto inst = random_instance(rng, 3, 15);
        const auto fit =
            posterior(inst.obs, inst.taus, inst.noise, inst.prior, inst.spec);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(inst.prior.sigma_omega -
                                                           fit.sigma_post);
        CHECK(eig.eigenvalues().minCoeff() > -1e-10);

        // Adding one observation contracts the posterior further.
        const int m = static_cast<int>(inst.obs.cols());
        Eigen::Matrix2Xd obs2(2, m + 1);
        obs2.leftCols(m) = inst.obs;
        obs2.col(m) = Eigen::Vector2d(0.3, -0.2);
        Eigen::VectorXd taus2(m + 1);
        taus2.head(m) = inst.taus;
        taus2(m) = 0.997;
        auto blocks = inst.noise.blocks;
        blocks.push_back(0.3 * Eigen::Matrix2d::Identity());
        const auto fit2 = posterior(obs2, taus2, assemble_block_cov(blocks), inst.prior,
                                    inst.spec);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig2(fit.sigma_post -
                                                            fit2.sigma_post);
        CHECK(eig2.eigenvalues().minCoeff() > -1e-10);
    }
}

TEST_CASE("prior dominance pulls the posterior to zero") {
    std::mt19937_64 rng(12);
    const auto inst = random_instance(rng, 2, 12);
    PriorParams tiny{1e-12 * Eigen::MatrixXd::Identity(6, 6)};
    const auto fit = posterior(inst.obs, inst.taus, inst.noise, tiny, inst.spec);
    CHECK(fit.omega_post.norm() < 1e-9);
}

TEST_CASE("velocity curve integrates back to the position curve") {
    std::mt19937_64 rng(13);
    const auto inst = random_instance(rng, 5, 30);
    const auto fit = posterior(inst.obs, inst.taus, inst.noise, inst.prior, inst.spec);
    // Trapezoid quadrature of the derivative basis curve.
    const int steps = 2000;
    Eigen::Vector2d integral = predict_at(fit, inst.spec, 0.0).first;
    Eigen::Vector2d prev_vel = predict_at(fit, inst.spec, 0.0, 1).first;
    for (int i = 1; i <= steps; ++i) {
        const double tau = double(i) / steps;
        const Eigen::Vector2d vel = predict_at(fit, inst.spec, tau, 1).first;
        integral += 0.5 * (vel + prev_vel) / steps;
        prev_vel = vel;
        if (i % 400 == 0) {
            const Eigen::Vector2d pos = predict_at(fit, inst.spec, tau).first;
            CHECK((integral - pos).norm() < 1e-6);
        }
    }
}

TEST_CASE("rigid-motion equivariance of the posterior and ADE") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> uni(-1.0, 1.0);
    for (int trial = 0; trial < 10; ++trial) {
        const int degree = 3;
        const int m = 20;
        auto inst = random_instance(rng, degree, m);
        const int p = inst.spec.coeff_dim();

        const double gamma = 2.5 * uni(rng);
        const Eigen::Vector2d shift(10.0 * uni(rng), 10.0 * uni(rng));
        const Eigen::Matrix2d rot = rotation2d(gamma);

        // Transform observations, noise blocks, and the prior congruently;
        // the translation enters through the prior mean lift.
        Eigen::Matrix2Xd obs2(2, m);
        for (int j = 0; j < m; ++j) obs2.col(j) = rot * inst.obs.col(j) + shift;
        std::vector<Eigen::Matrix2d> blocks2;
        for (const auto& b : inst.noise.blocks) blocks2.push_back(rot * b * rot.transpose());
        Eigen::MatrixXd big_rot = Eigen::MatrixXd::Zero(p, p);
        for (int k = 0; k <= degree; ++k) big_rot.block<2, 2>(2 * k, 2 * k) = rot;
        PriorParams prior2{big_rot * inst.prior.sigma_omega * big_rot.transpose()};
        Eigen::VectorXd mean2 = Eigen::VectorXd::Zero(p);
        mean2.head<2>() = shift;  // monomial lift of a translation

        const auto fit = posterior(inst.obs, inst.taus, inst.noise, inst.prior, inst.spec);
        const auto fit2 = posterior(obs2, inst.taus, assemble_block_cov(blocks2), prior2,
                                    inst.spec, "", &mean2);

        Eigen::VectorXd expected = big_rot * fit.omega_post;
        expected.head<2>() += shift;
        CHECK((fit2.omega_post - expected).norm() < 1e-9 * (1.0 + expected.norm()));

        FitTrajectory ft;
        ft.taus = inst.taus;
        ft.obs = inst.obs;
        ft.headings = Eigen::VectorXd::Constant(m, 0.3);
        ft.range = Eigen::VectorXd::Ones(m);
        ft.rotation = Eigen::VectorXd::Zero(m);
        FitTrajectory ft2 = ft;
        ft2.obs = obs2;
        ft2.headings.array() += gamma;  // headings rotate with the scene
        const auto r1 = ade({fit}, {ft});
        const auto r2 = ade({fit2}, {ft2});
        CHECK(r1.ade == doctest::Approx(r2.ade).epsilon(1e-9));
        CHECK(r1.ade_lon == doctest::Approx(r2.ade_lon).epsilon(1e-9));
        CHECK(r1.ade_lat == doctest::Approx(r2.ade_lat).epsilon(1e-9));
    }
}

TEST_CASE("ade arithmetic") {
    BasisSpec spec(BasisFamily::monomial, 1);
    const int m = 10;
    FitTrajectory traj;
    traj.taus.setLinSpaced(m, 0.0, 1.0);
    traj.obs.resize(2, m);
    for (int j = 0; j < m; ++j) traj.obs.col(j) = Eigen::Vector2d(j * 0.5, 1.0);
    traj.headings = Eigen::VectorXd::Zero(m);
    traj.range = Eigen::VectorXd::Ones(m);
    traj.rotation = Eigen::VectorXd::Zero(m);

    PosteriorFit fit;
    fit.predicted = traj.obs;
    fit.sigma_post = Eigen::MatrixXd::Identity(4, 4);

    SUBCASE("perfect fit gives zero") {
        const auto report = ade({fit}, {traj});
        CHECK(report.ade == 0.0);
        CHECK(report.p999 == 0.0);
    }
    SUBCASE("constant 3-4-5 residual with heading 0") {
        for (int j = 0; j < m; ++j)
            fit.predicted.col(j) = traj.obs.col(j) + Eigen::Vector2d(0.3, 0.4);
        const auto report = ade({fit}, {traj});
        CHECK(report.ade == doctest::Approx(0.5));
        CHECK(report.ade_lon == doctest::Approx(0.3));
        CHECK(report.ade_lat == doctest::Approx(0.4));
        CHECK(report.p999 == doctest::Approx(0.5));
        CHECK(report.ade <= report.p999 + 1e-12);
        // Componentwise Pythagoras on the pooled samples.
        for (size_t i = 0; i < report.sample_err.size(); ++i) {
            const double lhs = report.sample_lon[i] * report.sample_lon[i] +
                               report.sample_lat[i] * report.sample_lat[i];
            CHECK(std::abs(lhs - report.sample_err[i] * report.sample_err[i]) < 1e-10);
        }
    }
    SUBCASE("missing heading is an error") {
        traj.headings(3) = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS((void)ade({fit}, {traj}), std::invalid_argument);
    }
}

TEST_CASE("nearest-rank percentile") {
    std::vector<double> v;
    for (int i = 1; i <= 1000; ++i) v.push_back(double(i));
    CHECK(nearest_rank_percentile(v, 0.999) == doctest::Approx(999.0));
    CHECK(nearest_rank_percentile(v, 0.5) == doctest::Approx(500.0));
    CHECK(nearest_rank_percentile({3.0, 1.0, 2.0}, 0.999) == doctest::Approx(3.0));
}

TEST_CASE("kinematic determination") {
    SUBCASE("line through two points") {
        BasisSpec spec(BasisFamily::monomial, 1);
        const auto w = solve_from_kinematics(
            {{0.0, 0, Eigen::Vector2d(1.0, 2.0)}, {1.0, 0, Eigen::Vector2d(3.0, -1.0)}},
            spec);
        CHECK(w(0) == doctest::Approx(1.0));
        CHECK(w(1) == doctest::Approx(2.0));
        CHECK(w(2) == doctest::Approx(2.0));   // slope x
        CHECK(w(3) == doctest::Approx(-3.0));  // slope y
    }
    SUBCASE("degree 5 from position, velocity, acceleration at two times") {
        BasisSpec spec(BasisFamily::monomial, 5);
        std::mt19937_64 rng(8);
        std::normal_distribution<double> gauss;
        for (int trial = 0; trial < 20; ++trial) {
            Eigen::VectorXd truth(12);
            for (int i = 0; i < 12; ++i) truth(i) = gauss(rng);
            // Constraint values computed by plain power-series arithmetic,
            // independent of eval_basis.
            auto value_at = [&](double tau, int order) {
                Eigen::Vector2d v = Eigen::Vector2d::Zero();
                for (int k = order; k <= 5; ++k) {
                    double fall = 1.0;
                    for (int q = 0; q < order; ++q) fall *= double(k - q);
                    v += fall * std::pow(tau, k - order) * truth.segment<2>(2 * k);
                }
                return v;
            };
            std::vector<KinematicConstraint> constraints;
            for (double tau : {0.0, 1.0})
                for (int order : {0, 1, 2})
                    constraints.push_back({tau, order, value_at(tau, order)});
            const auto recovered = solve_from_kinematics(constraints, spec);
            CHECK((recovered - truth).cwiseAbs().maxCoeff() < 1e-9);
        }
    }
    SUBCASE("duplicate constraints are a rank error") {
        BasisSpec spec(BasisFamily::monomial, 2);
        const Eigen::Vector2d v(1.0, 1.0);
        CHECK_THROWS_AS(solve_from_kinematics({{0.5, 0, v}, {0.5, 0, v}, {0.5, 0, v}}, spec),
                        std::runtime_error);
    }
    SUBCASE("wrong constraint count") {
        BasisSpec spec(BasisFamily::monomial, 2);
        CHECK_THROWS_AS(solve_from_kinematics({{0.0, 0, Eigen::Vector2d::Zero()}}, spec),
                        std::invalid_argument);
    }
}

TEST_CASE("fit quality is invariant to the polynomial family") {
    // Same data fitted in monomial and Bernstein coordinates with the prior
    // transformed congruently gives identical predictions.
    std::mt19937_64 rng(21);
    const auto inst = random_instance(rng, 4, 25);
    BasisSpec bern(BasisFamily::bernstein, 4);
    const Eigen::MatrixXd m_mono_to_bern =
        kron_identity(basis_change(inst.spec, bern), 2);
    PriorParams prior_bern{m_mono_to_bern * inst.prior.sigma_omega *
                           m_mono_to_bern.transpose()};

    const auto fit_mono =
        posterior(inst.obs, inst.taus, inst.noise, inst.prior, inst.spec);
    const auto fit_bern = posterior(inst.obs, inst.taus, inst.noise, prior_bern, bern);

    FitTrajectory ft;
    ft.taus = inst.taus;
    ft.obs = inst.obs;
    ft.headings = Eigen::VectorXd::Zero(inst.obs.cols());
    ft.range = Eigen::VectorXd::Ones(inst.obs.cols());
    ft.rotation = Eigen::VectorXd::Zero(inst.obs.cols());
    const auto r_mono = ade({fit_mono}, {ft});
    const auto r_bern = ade({fit_bern}, {ft});
    CHECK(r_mono.ade == doctest::Approx(r_bern.ade).epsilon(1e-9));
    CHECK((fit_mono.predicted - fit_bern.predicted).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("ill-conditioned posterior names the trajectory") {
    BasisSpec spec(BasisFamily::monomial, 8);
    const int m = 9;
    Eigen::VectorXd taus(m);
    // All observations bunched at nearly one time point.
    for (int j = 0; j < m; ++j) taus(j) = 0.5 + 1e-9 * j;
    Eigen::Matrix2Xd obs = Eigen::Matrix2Xd::Zero(2, m);
    std::vector<Eigen::Matrix2d> blocks(m, 1e-12 * Eigen::Matrix2d::Identity());
    PriorParams prior{1e8 * Eigen::MatrixXd::Identity(18, 18)};
    try {
        posterior(obs, taus, assemble_block_cov(blocks), prior, spec, "bad_traj");
        FAIL("expected a throw");
    } catch (const std::runtime_error& ex) {
        CHECK(std::string(ex.what()).find("bad_traj") != std::string::npos);
    }
}
