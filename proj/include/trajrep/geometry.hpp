#pragma once

#include <Eigen/Core>

#include <cmath>
#include <numbers>

namespace trajrep {

/// Wrap an angle to (-pi, pi].
inline double wrap_angle(double a) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    a = std::fmod(a, two_pi);
    if (a <= -std::numbers::pi) a += two_pi;
    if (a > std::numbers::pi) a -= two_pi;
    return a;
}

/// Counter-clockwise 2x2 rotation matrix.
inline Eigen::Matrix2d rotation2d(double angle) {
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    Eigen::Matrix2d r;
    r << c, -s, s, c;
    return r;
}

/// Rigid motion of the plane: p' = R(angle) * p + translation.
struct RigidTransform2 {
    Eigen::Vector2d translation = Eigen::Vector2d::Zero();
    double angle = 0.0;

    Eigen::Vector2d apply(const Eigen::Vector2d& p) const {
        return rotation2d(angle) * p + translation;
    }

    RigidTransform2 inverse() const {
        return {-(rotation2d(-angle) * translation), -angle};
    }

    /// this ∘ other: apply `other` first, then this transform.
    RigidTransform2 compose(const RigidTransform2& other) const {
        return {rotation2d(angle) * other.translation + translation,
                angle + other.angle};
    }
};

}  // namespace trajrep
