#include "rd2/geom.hpp"

#include <cmath>

namespace rd2::geom {

bool Pose::is_valid(double tol) const {
    if (!rotation.allFinite() || !translation.allFinite()) return false;
    if (orthonormality_residual() > tol) return false;
    return rotation.determinant() > 0.0;
}

void Pose::validate() const {
    if (!rotation.allFinite() || !translation.allFinite())
        throw ValidationError("pose contains non-finite values");
    if (orthonormality_residual() > 1e-9)
        throw ValidationError("pose rotation is not orthonormal");
    if (rotation.determinant() < 0.0)
        throw ValidationError("pose rotation has negative determinant");
}

double Pose::orthonormality_residual() const {
    return (rotation.transpose() * rotation - Matrix3d::Identity())
        .cwiseAbs()
        .maxCoeff();
}

Pose Pose::normalized() const {
    if (orthonormality_residual() <= 1e-7) return *this;
    Matrix3d r = rotation;
    r.col(0).normalize();
    r.col(1) = (r.col(1) - r.col(1).dot(r.col(0)) * r.col(0)).normalized();
    r.col(2) = r.col(0).cross(r.col(1));
    return {r, translation};
}

Vector6d Wrench::to_vector() const {
    Vector6d v;
    v << force, torque;
    return v;
}

Wrench Wrench::from_vector(const Vector6d& v) {
    return {v.head<3>(), v.tail<3>()};
}

bool Wrench::is_finite() const {
    return force.allFinite() && torque.allFinite();
}

Vector6d Twist::to_vector() const {
    Vector6d v;
    v << linear, angular;
    return v;
}

Twist Twist::from_vector(const Vector6d& v) {
    return {v.head<3>(), v.tail<3>()};
}

bool Twist::is_finite() const {
    return linear.allFinite() && angular.allFinite();
}

Matrix3d skew(const Vector3d& v) {
    Matrix3d m;
    m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return m;
}

Wrench wrench_transform(const Pose& pose_ab, const Wrench& wrench_b) {
    pose_ab.validate();
    if (!wrench_b.is_finite())
        throw ValidationError("wrench contains non-finite values");
    const Vector3d f = pose_ab.rotation * wrench_b.force;
    const Vector3d tau =
        skew(pose_ab.translation) * f + pose_ab.rotation * wrench_b.torque;
    return {f, tau};
}

Matrix6d wrench_transform_matrix(const Pose& pose_ab) {
    Matrix6d m = Matrix6d::Zero();
    m.topLeftCorner<3, 3>() = pose_ab.rotation;
    m.bottomLeftCorner<3, 3>() = skew(pose_ab.translation) * pose_ab.rotation;
    m.bottomRightCorner<3, 3>() = pose_ab.rotation;
    return m;
}

Pose pose_compose(const Pose& a, const Pose& b) {
    Pose out{a.rotation * b.rotation, a.rotation * b.translation + a.translation};
    return out.normalized();
}

Pose pose_inverse(const Pose& a) {
    return {a.rotation.transpose(), -(a.rotation.transpose() * a.translation)};
}

double rotation_angle(const Matrix3d& ra, const Matrix3d& rb) {
    const Matrix3d rel = ra.transpose() * rb;
    double c = (rel.trace() - 1.0) / 2.0;
    c = std::clamp(c, -1.0, 1.0);
    return std::acos(c);
}

double pose_distance(const Pose& x, const Pose& g, double lambda_rot) {
    if (lambda_rot < 0.0) throw ValidationError("lambda_rot must be >= 0");
    const double lin = (g.translation - x.translation).norm();
    return lin + lambda_rot * rotation_angle(x.rotation, g.rotation);
}

Matrix3d axis_angle(const Vector3d& axis, double angle) {
    const Matrix3d k = skew(axis.normalized());
    return Matrix3d::Identity() + std::sin(angle) * k +
           (1.0 - std::cos(angle)) * k * k;
}

}  // namespace rd2::geom
