#pragma once

#include <Eigen/Dense>
#include <stdexcept>

namespace rd2::geom {

using Eigen::Matrix3d;
using Eigen::Vector3d;
using Vector6d = Eigen::Matrix<double, 6, 1>;
using Matrix6d = Eigen::Matrix<double, 6, 6>;

struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Rigid pose: rotation matrix + translation. Rotation must stay orthonormal
/// to 1e-9; re-orthonormalize with normalized() after long composition chains.
struct Pose {
    Matrix3d rotation = Matrix3d::Identity();
    Vector3d translation = Vector3d::Zero();

    static Pose identity() { return {}; }

    bool is_valid(double tol = 1e-9) const;
    void validate() const;

    // Gram-Schmidt re-orthonormalization, applied when the residual
    // exceeds 1e-7.
    Pose normalized() const;

    double orthonormality_residual() const;
};

struct Wrench {
    Vector3d force = Vector3d::Zero();
    Vector3d torque = Vector3d::Zero();

    Vector6d to_vector() const;
    static Wrench from_vector(const Vector6d& v);
    bool is_finite() const;
};

struct Twist {
    Vector3d linear = Vector3d::Zero();
    Vector3d angular = Vector3d::Zero();

    Vector6d to_vector() const;
    static Twist from_vector(const Vector6d& v);
    bool is_finite() const;
};

Matrix3d skew(const Vector3d& v);

// Coordinate change of a wrench from frame b to frame a, where pose_ab is
// the pose of frame b expressed in frame a:
//   f_a = R f_b,  tau_a = [t]x R f_b + R tau_b
Wrench wrench_transform(const Pose& pose_ab, const Wrench& wrench_b);

// The 6x6 matrix of the same map, for oracle checks and one-shot precompute.
Matrix6d wrench_transform_matrix(const Pose& pose_ab);

Pose pose_compose(const Pose& a, const Pose& b);
Pose pose_inverse(const Pose& a);

// Weighted pose metric: Euclidean translation distance plus lambda_rot times
// the geodesic angle of R_x^T R_g. lambda_rot in meters per radian.
double pose_distance(const Pose& x, const Pose& g, double lambda_rot = 0.1);

// Geodesic angle between two rotations, in [0, pi].
double rotation_angle(const Matrix3d& ra, const Matrix3d& rb);

// Rotation about a unit axis by angle (Rodrigues).
Matrix3d axis_angle(const Vector3d& axis, double angle);

}  // namespace rd2::geom
