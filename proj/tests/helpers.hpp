#pragma once

#include <kp/bodymodel.hpp>
#include <kp/random.hpp>
#include <kp/rotmath.hpp>

namespace kptest {

inline kp::Vec3 random_unit(kp::Rng& rng) {
    kp::Vec3 v(rng.normal(), rng.normal(), rng.normal());
    while (v.norm() < 1e-6) v = kp::Vec3(rng.normal(), rng.normal(), rng.normal());
    return v.normalized();
}

inline kp::Rot3 random_rotation(kp::Rng& rng, double max_angle = M_PI) {
    return kp::rot_exp(rng.uniform(0.0, max_angle) * random_unit(rng));
}

inline kp::PoseState random_pose(const kp::SkinnedModel& m, kp::Rng& rng,
                                 double joint_angle = 0.6, double shape_scale = 0.5,
                                 bool with_global = true) {
    kp::PoseState p = kp::default_pose(m);
    for (auto& R : p.body_pose) R = random_rotation(rng, joint_angle);
    for (auto& hand : p.hand_poses)
        for (auto& R : hand) R = random_rotation(rng, joint_angle);
    p.jaw_pose = random_rotation(rng, 0.3);
    for (Eigen::Index i = 0; i < p.shape.size(); ++i)
        p.shape[i] = rng.normal(0.0, shape_scale);
    for (Eigen::Index i = 0; i < p.expression.size(); ++i)
        p.expression[i] = rng.normal(0.0, shape_scale);
    if (with_global) {
        p.global.rotation = random_rotation(rng);
        p.global.translation = kp::Vec3(rng.normal(), rng.normal(), rng.normal());
    }
    return p;
}

} // namespace kptest
