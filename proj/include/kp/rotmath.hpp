#pragma once

// Rotation representations and the geometric primitives shared by the rest
// of the library. All angles are radians, all rotations are right-handed.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace kp {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Rot3 = Eigen::Matrix3d;       // orthonormal, det = +1
using UnitQuat = Eigen::Quaterniond; // unit norm, canonical form has w >= 0

struct RigidTransform {
    Rot3 rotation = Rot3::Identity();
    Vec3 translation = Vec3::Zero();

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

    // this ∘ other: apply `other` first, then this.
    RigidTransform compose(const RigidTransform& other) const {
        return {rotation * other.rotation, rotation * other.translation + translation};
    }

    RigidTransform inverse() const {
        return {rotation.transpose(), -(rotation.transpose() * translation)};
    }
};

inline bool is_rotation(const Mat3& R, double tol = 1e-9) {
    return (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() <= tol &&
           std::abs(R.determinant() - 1.0) <= tol;
}

inline Mat3 skew(const Vec3& v) {
    Mat3 S;
    S <<    0, -v.z(),  v.y(),
        v.z(),      0, -v.x(),
       -v.y(),  v.x(),      0;
    return S;
}

/// Canonical unit quaternion: normalized, with w >= 0 (q and -q are the
/// same rotation; we always hand out the w >= 0 representative).
inline UnitQuat canonical(const UnitQuat& q) {
    UnitQuat r = q.normalized();
    if (r.w() < 0) r.coeffs() = -r.coeffs();
    return r;
}

inline UnitQuat quat_from_rot(const Rot3& R) { return canonical(UnitQuat(R)); }
inline Rot3 rot_from_quat(const UnitQuat& q) { return q.normalized().toRotationMatrix(); }

/// Exponential map so(3) -> SO(3), Rodrigues form with a series fallback
/// below 1e-8 where sin(t)/t would lose digits.
inline Rot3 rot_exp(const Vec3& u) {
    const double t = u.norm();
    const Mat3 K = skew(u);
    if (t < 1e-8) {
        return Mat3::Identity() + K + 0.5 * K * K;
    }
    const double s = std::sin(t) / t;
    const double c = (1.0 - std::cos(t)) / (t * t);
    return Mat3::Identity() + s * K + c * K * K;
}

/// Logarithm SO(3) -> so(3). Returns the axis-angle vector with norm in
/// [0, pi]. The angle comes from atan2(|skew part|, trace part), which
/// keeps full precision at both ends; the angle ~ pi branch recovers the
/// axis from the symmetric part, where the sin*[a]x term cancels exactly.
inline Vec3 rot_log(const Rot3& R) {
    const Vec3 w(R(2, 1) - R(1, 2), R(0, 2) - R(2, 0), R(1, 0) - R(0, 1));
    const double s = 0.5 * w.norm(); // sin(theta), from the skew part
    const double c = std::clamp((R.trace() - 1.0) * 0.5, -1.0, 1.0);
    const double theta = std::atan2(s, c);

    if (theta < 1e-6) {
        // R ~ I: log(R) ~ 0.5 * vee(R - R^T) to second order.
        return 0.5 * w;
    }
    if (theta < M_PI - 1e-3) {
        return (0.5 * theta / s) * w;
    }
    // Near pi the skew part vanishes; (R + R^T)/2 = c*I + (1-c) aa^T gives
    // aa^T with 1-c ~ 2. Largest-diagonal column yields the axis, the
    // remaining sign ambiguity (exp(pi a) = exp(-pi a)) is fixed from w.
    const Mat3 A = (0.5 * (R + R.transpose()) - c * Mat3::Identity()) / (1.0 - c);
    int k = 0;
    A.diagonal().maxCoeff(&k);
    Vec3 axis = A.col(k) / std::sqrt(std::max(A(k, k), 1e-16));
    axis.normalize();
    if (axis.dot(w) < 0) axis = -axis;
    return theta * axis;
}

/// Minimal rotation taking direction a to direction b: rotation about
/// (a x b)/|a x b| by the angle between them. Antiparallel inputs get a
/// pi turn about a deterministic axis orthogonal to a (built from the
/// canonical basis vector least aligned with a).
inline Rot3 minimal_rotation(const Vec3& a, const Vec3& b) {
    const double na = a.norm(), nb = b.norm();
    if (na <= 1e-9 || nb <= 1e-9)
        throw std::domain_error("minimal_rotation: zero-norm input");
    const Vec3 u = a / na, v = b / nb;
    const Vec3 c = u.cross(v);
    const double s = c.norm();
    const double d = u.dot(v);
    if (s < 1e-9) {
        if (d > 0) return Rot3::Identity();
        int k = 0;
        u.cwiseAbs().minCoeff(&k);
        Vec3 axis = u.cross(Vec3::Unit(k)).normalized();
        return rot_exp(M_PI * axis);
    }
    const double angle = std::atan2(s, d);
    return rot_exp(angle * (c / s));
}

/// The unique rotation with R*vh = v that also maps the (vh, wh) plane
/// onto the (v, w) plane (normals aligned). Built from the orthonormal
/// triads F = [v, n, v x n] and Fh = [vh, nh, vh x nh]: R = F * Fh^T.
inline Rot3 triad_align(const Vec3& v, const Vec3& w, const Vec3& vh, const Vec3& wh) {
    const Vec3 n = v.cross(w);
    const Vec3 nh = vh.cross(wh);
    if (n.norm() < 1e-9 || nh.norm() < 1e-9)
        throw std::domain_error("triad_align: collinear direction pair");
    Mat3 F, Fh;
    F.col(0) = v.normalized();
    F.col(1) = n.normalized();
    F.col(2) = F.col(0).cross(F.col(1));
    Fh.col(0) = vh.normalized();
    Fh.col(1) = nh.normalized();
    Fh.col(2) = Fh.col(0).cross(Fh.col(1));
    return F * Fh.transpose();
}

/// Gram-Schmidt projection of a 6-number rotation encoding (two stacked
/// column vectors) onto SO(3). Degenerate inputs fall back to canonical
/// axes so the result is always a valid rotation.
inline Rot3 rot_from_6d(const Vec3& a, const Vec3& b) {
    Vec3 r1 = a;
    if (r1.norm() < 1e-12) r1 = Vec3::UnitX();
    r1.normalize();
    Vec3 r2 = b - r1.dot(b) * r1;
    if (r2.norm() < 1e-12) {
        int k = 0;
        r1.cwiseAbs().minCoeff(&k);
        r2 = Vec3::Unit(k) - r1[k] * r1;
    }
    r2.normalize();
    Rot3 R;
    R.col(0) = r1;
    R.col(1) = r2;
    R.col(2) = r1.cross(r2);
    return R;
}

/// Shortest-arc spherical interpolation. Falls back to normalized linear
/// interpolation when the arc is too small for a stable sin division.
inline UnitQuat slerp(const UnitQuat& q0, const UnitQuat& q1, double t) {
    if (t <= 0.0) return q0;
    if (t >= 1.0) {
        UnitQuat r = q1;
        if (q0.dot(q1) < 0) r.coeffs() = -r.coeffs();
        return r;
    }
    double d = q0.dot(q1);
    Eigen::Vector4d c1 = q1.coeffs();
    if (d < 0) { c1 = -c1; d = -d; }
    const Eigen::Vector4d c0 = q0.coeffs();
    Eigen::Vector4d out;
    if (d > 1.0 - 1e-7) {
        out = (1.0 - t) * c0 + t * c1;
    } else {
        const double omega = std::acos(std::clamp(d, -1.0, 1.0));
        const double so = std::sin(omega);
        out = (std::sin((1.0 - t) * omega) / so) * c0 + (std::sin(t * omega) / so) * c1;
    }
    UnitQuat q;
    q.coeffs() = out.normalized();
    return q;
}

/// ZYX Euler decomposition: R = Rz(z) * Ry(y) * Rx(x), returned as
/// (z, y, x). Of the two analytic branches the one with the smaller l2
/// norm is returned. Gimbal lock (|R(2,0)| ~ 1) uses the x = 0
/// convention.
inline Vec3 euler_zyx(const Rot3& R) {
    const double sy = -R(2, 0);
    if (std::abs(sy) > 1.0 - 1e-9) {
        const double y = sy > 0 ? M_PI / 2 : -M_PI / 2;
        // z and x are coupled; conventional single-parameter solution.
        const double z = std::atan2(-R(0, 1), R(1, 1));
        return {z, y, 0.0};
    }
    const double y1 = std::asin(std::clamp(sy, -1.0, 1.0));
    auto branch = [&](double y) -> Vec3 {
        const double cy = std::cos(y);
        const double z = std::atan2(R(1, 0) / cy, R(0, 0) / cy);
        const double x = std::atan2(R(2, 1) / cy, R(2, 2) / cy);
        return {z, y, x};
    };
    const Vec3 e1 = branch(y1);
    const double y2 = y1 >= 0 ? M_PI - y1 : -M_PI - y1;
    const Vec3 e2 = branch(y2);
    return e1.squaredNorm() <= e2.squaredNorm() ? e1 : e2;
}

inline Rot3 euler_zyx_to_rot(const Vec3& zyx) {
    return (Eigen::AngleAxisd(zyx[0], Vec3::UnitZ()) *
            Eigen::AngleAxisd(zyx[1], Vec3::UnitY()) *
            Eigen::AngleAxisd(zyx[2], Vec3::UnitX()))
        .toRotationMatrix();
}

/// Optimal rigid alignment (Kabsch): argmin over (R, t) of
/// sum_i |R*p_i + t - q_i|^2, det(R) = +1 enforced by SVD sign
/// correction. Throws on size mismatch, fewer than 3 points, or a
/// cross-covariance of rank < 2 (rotation not unique).
template <typename PointRange>
inline RigidTransform kabsch(const PointRange& P, const PointRange& Q) {
    const std::size_t n = std::size(P);
    if (n != std::size(Q)) throw std::invalid_argument("kabsch: size mismatch");
    if (n < 3) throw std::invalid_argument("kabsch: need at least 3 points");

    Vec3 pc = Vec3::Zero(), qc = Vec3::Zero();
    for (std::size_t i = 0; i < n; ++i) { pc += P[i]; qc += Q[i]; }
    pc /= double(n);
    qc /= double(n);

    Mat3 H = Mat3::Zero();
    for (std::size_t i = 0; i < n; ++i)
        H += (P[i] - pc) * (Q[i] - qc).transpose();

    Eigen::JacobiSVD<Mat3> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3 sv = svd.singularValues();
    if (sv(1) <= 1e-12 * std::max(sv(0), 1e-300))
        throw std::domain_error("kabsch: degenerate (rank-deficient) point set");

    Mat3 D = Mat3::Identity();
    D(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0 ? -1.0 : 1.0;
    RigidTransform T;
    T.rotation = svd.matrixV() * D * svd.matrixU().transpose();
    T.translation = qc - T.rotation * pc;
    return T;
}

/// Right Jacobian of SO(3): exp(u + du) ~ exp(u) * exp(Jr(u) * du).
/// Used to differentiate through the exponential map.
inline Mat3 so3_right_jacobian(const Vec3& u) {
    const double t = u.norm();
    const Mat3 K = skew(u);
    if (t < 1e-6) {
        return Mat3::Identity() - 0.5 * K + (1.0 / 6.0) * K * K;
    }
    const double a = (1.0 - std::cos(t)) / (t * t);
    const double b = (t - std::sin(t)) / (t * t * t);
    return Mat3::Identity() - a * K + b * K * K;
}

} // namespace kp
