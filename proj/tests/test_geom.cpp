#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rd2/geom.hpp"

#include <random>

using namespace rd2::geom;

namespace {

Pose random_pose(std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::Vector3d axis(gauss(rng), gauss(rng), gauss(rng));
    std::uniform_real_distribution<double> angle(0.0, M_PI);
    Pose p;
    p.rotation = axis_angle(axis, angle(rng));
    p.translation = {gauss(rng), gauss(rng), gauss(rng)};
    return p;
}

Wrench random_wrench(std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 2.0);
    Wrench w;
    for (int i = 0; i < 3; ++i) {
        w.force[i] = gauss(rng);
        w.torque[i] = gauss(rng);
    }
    return w;
}

}  // namespace

TEST_CASE("wrench transform: identity pose is a no-op") {
    std::mt19937_64 rng(1);
    for (int i = 0; i < 10; ++i) {
        const Wrench w = random_wrench(rng);
        const Wrench out = wrench_transform(Pose::identity(), w);
        CHECK((out.to_vector() - w.to_vector()).cwiseAbs().maxCoeff() == 0.0);
    }
}

TEST_CASE("wrench transform: worked lever-arm example") {
    Pose p;
    p.translation = {0.0, 0.0, 0.1};
    Wrench w;
    w.force = {1.0, 0.0, 0.0};
    const Wrench out = wrench_transform(p, w);
    CHECK(out.force.isApprox(Eigen::Vector3d(1, 0, 0), 1e-15));
    CHECK(out.torque.x() == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(out.torque.y() == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(out.torque.z() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("wrench transform: composition matches 6x6 matrix oracle") {
    std::mt19937_64 rng(2);
    for (int i = 0; i < 100; ++i) {
        const Pose p1 = random_pose(rng), p2 = random_pose(rng);
        const Wrench w = random_wrench(rng);
        const Wrench nested = wrench_transform(p1, wrench_transform(p2, w));
        const Wrench composed = wrench_transform(pose_compose(p1, p2), w);
        CHECK((nested.to_vector() - composed.to_vector()).cwiseAbs().maxCoeff() <
              1e-9);
        // direct 6x6 route
        const Vector6d via_matrix =
            wrench_transform_matrix(p1) * wrench_transform_matrix(p2) *
            w.to_vector();
        CHECK((nested.to_vector() - via_matrix).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("wrench transform: linear in the wrench") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> coef(-2.0, 2.0);
    for (int i = 0; i < 100; ++i) {
        const Pose p = random_pose(rng);
        const Wrench w1 = random_wrench(rng), w2 = random_wrench(rng);
        const double a = coef(rng), b = coef(rng);
        Wrench lin = Wrench::from_vector(a * w1.to_vector() + b * w2.to_vector());
        const Vector6d lhs = wrench_transform(p, lin).to_vector();
        const Vector6d rhs = a * wrench_transform(p, w1).to_vector() +
                             b * wrench_transform(p, w2).to_vector();
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("wrench transform rejects non-finite input") {
    Wrench w;
    w.force.x() = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(wrench_transform(Pose::identity(), w), ValidationError);
    Pose bad;
    bad.rotation(0, 0) = 2.0;
    CHECK_THROWS_AS(wrench_transform(bad, Wrench{}), ValidationError);
}

TEST_CASE("pose group laws") {
    std::mt19937_64 rng(4);
    CHECK(pose_inverse(Pose::identity()).rotation.isIdentity(1e-15));
    for (int i = 0; i < 1000; ++i) {
        const Pose p = random_pose(rng);
        const Pose id = pose_compose(p, pose_inverse(p));
        CHECK(id.rotation.isIdentity(1e-9));
        CHECK(id.translation.norm() < 1e-9);
        // adjoint inversion law
        const Matrix6d ad = wrench_transform_matrix(p);
        const Matrix6d ad_inv = wrench_transform_matrix(pose_inverse(p));
        CHECK((ad * ad_inv - Matrix6d::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    }
    Pose ta, tb;
    ta.translation = {0, 0, 0.1};
    tb.translation = {0, 0, 0.2};
    CHECK(pose_compose(ta, tb).translation.isApprox(
        Eigen::Vector3d(0, 0, 0.3), 1e-15));
}

TEST_CASE("pose distance") {
    std::mt19937_64 rng(5);
    const Pose p = random_pose(rng);
    CHECK(pose_distance(p, p, 0.1) == 0.0);

    Pose x, g;
    g.translation = {0.05, 0.0, 0.0};
    CHECK(pose_distance(x, g, 0.1) == doctest::Approx(0.05).epsilon(1e-12));

    Pose rot;
    rot.rotation = axis_angle(Eigen::Vector3d::UnitZ(), M_PI / 2.0);
    CHECK(pose_distance(x, rot, 0.1) ==
          doctest::Approx(0.1 * M_PI / 2.0).epsilon(1e-9));

    SUBCASE("symmetry and triangle inequality") {
        for (int i = 0; i < 1000; ++i) {
            const Pose a = random_pose(rng), b = random_pose(rng),
                       c = random_pose(rng);
            const double ab = pose_distance(a, b, 0.1);
            const double ba = pose_distance(b, a, 0.1);
            CHECK(std::abs(ab - ba) < 1e-9);
            CHECK(ab >= 0.0);
            CHECK(ab <= pose_distance(a, c, 0.1) + pose_distance(c, b, 0.1) +
                            1e-9);
        }
    }
}

TEST_CASE("re-orthonormalization after long composition chains") {
    std::mt19937_64 rng(6);
    Pose acc;
    for (int i = 0; i < 10000; ++i) acc = pose_compose(acc, random_pose(rng));
    CHECK(acc.orthonormality_residual() < 1e-7);
}
