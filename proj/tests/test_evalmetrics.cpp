#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include <kp/evalmetrics.hpp>
#include <kp/random.hpp>
#include <kp/synth.hpp>

#include "helpers.hpp"

using namespace kp;

namespace {

const SkinnedModel& model() {
    static SkinnedModel m = make_desk_model(DeskConfig{});
    return m;
}

std::vector<PoseState> random_frames(Rng& rng, int n, double angle = 0.4) {
    std::vector<PoseState> out;
    for (int i = 0; i < n; ++i)
        out.push_back(kptest::random_pose(model(), rng, angle, 0.0));
    return out;
}

std::set<int> descendants_of(const BodyTopology& topo, int joint) {
    std::set<int> d{joint};
    for (int j = joint + 1; j < topo.joint_count; ++j)
        if (d.count(topo.joint_parent[std::size_t(j)])) d.insert(j);
    return d;
}

} // namespace

TEST_CASE("metrics vanish when prediction equals ground truth") {
    Rng rng(81);
    auto gt = random_frames(rng, 8);
    auto pred = gt;
    REQUIRE(euler_error(pred, gt) == 0.0);
    REQUIRE(joint_angle_error(pred, gt, model().topology) < 1e-12);
    REQUIRE(positional_error(pred, gt, model()) == 0.0);
    REQUIRE(auc_pck(pred, gt, model(), RhoGrid{}) == 1.0);
}

TEST_CASE("single-joint z-rotation offset shows up as its angle") {
    auto gt = std::vector<PoseState>{default_pose(model())};
    auto pred = gt;
    const double phi = 0.1;
    pred[0].body_pose[2] = pred[0].body_pose[2] * euler_zyx_to_rot(Vec3(phi, 0.0, 0.0));
    REQUIRE(euler_error(pred, gt) == Catch::Approx(phi).margin(1e-12));
}

TEST_CASE("euler error matches a brute-force aggregation oracle") {
    Rng rng(82);
    auto gt = random_frames(rng, 6);
    auto pred = random_frames(rng, 6);
    double expect = 0.0;
    for (std::size_t f = 0; f < gt.size(); ++f) {
        double sq = 0.0;
        for (std::size_t j = 0; j < gt[f].body_pose.size(); ++j) {
            const Vec3 a = euler_zyx(pred[f].body_pose[j]);
            const Vec3 b = euler_zyx(gt[f].body_pose[j]);
            for (int c = 0; c < 3; ++c) {
                double d = a[c] - b[c];
                while (d > M_PI) d -= 2.0 * M_PI;
                while (d < -M_PI) d += 2.0 * M_PI;
                sq += d * d;
            }
        }
        expect += std::sqrt(sq);
    }
    expect /= double(gt.size());
    REQUIRE(euler_error(pred, gt) == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("joint angle error propagates a root-child offset to descendants") {
    const auto& topo = model().topology;
    auto gt = std::vector<PoseState>{default_pose(model())};
    auto pred = gt;
    const double phi = 0.3;
    pred[0].body_pose[1] = pred[0].body_pose[1] * rot_exp(Vec3(0.0, phi, 0.0));
    const auto affected = descendants_of(topo, 1);
    const double expect =
        phi * double(affected.size()) / double(topo.joint_count - 1);
    REQUIRE(joint_angle_error(pred, gt, topo) == Catch::Approx(expect).epsilon(1e-9));
}

TEST_CASE("joint angle error ignores a shared global rotation") {
    Rng rng(83);
    auto gt = random_frames(rng, 5);
    auto pred = random_frames(rng, 5);
    const double base = joint_angle_error(pred, gt, model().topology);

    auto rotated_root = [&](std::vector<PoseState> frames, const Rot3& Q) {
        for (auto& f : frames) f.body_pose[0] = Q * f.body_pose[0];
        return frames;
    };
    const Rot3 Q = kptest::random_rotation(rng);
    REQUIRE(joint_angle_error(rotated_root(pred, Q), rotated_root(gt, Q), model().topology) ==
            Catch::Approx(base).margin(1e-9));

    auto moved = [&](std::vector<PoseState> frames) {
        for (auto& f : frames) {
            f.global.rotation = Q * f.global.rotation;
            f.global.translation += Vec3(0.3, -0.1, 0.2);
        }
        return frames;
    };
    REQUIRE(joint_angle_error(moved(pred), moved(gt), model().topology) ==
            Catch::Approx(base).margin(1e-12));
}

TEST_CASE("pure global translation yields its squared norm as positional error") {
    Rng rng(84);
    auto gt = random_frames(rng, 4);
    auto pred = gt;
    const Vec3 t(0.02, -0.05, 0.01);
    for (auto& f : pred) f.global.translation += t;
    REQUIRE(positional_error(pred, gt, model()) ==
            Catch::Approx(t.squaredNorm()).epsilon(1e-12));
}

TEST_CASE("auc is invariant to a shared global rigid transform") {
    Rng rng(85);
    auto gt = random_frames(rng, 4);
    auto pred = random_frames(rng, 4);
    const double base = auc_pck(pred, gt, model(), RhoGrid{});
    const RigidTransform g{kptest::random_rotation(rng), Vec3(0.4, 0.1, -0.2)};
    auto moved = [&](std::vector<PoseState> frames) {
        for (auto& f : frames) f.global = g.compose(f.global);
        return frames;
    };
    REQUIRE(auc_pck(moved(pred), moved(gt), model(), RhoGrid{}) ==
            Catch::Approx(base).margin(1e-12));
}

TEST_CASE("pck counts strictly and matches a counting oracle") {
    Rng rng(86);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> errs;
        const int n = 1 + int(rng.index(50));
        for (int i = 0; i < n; ++i) errs.push_back(rng.uniform(0.0, 0.2));
        const double rho = rng.uniform(0.0, 0.2);
        std::size_t count = 0;
        for (double e : errs) count += e < rho;
        REQUIRE(pck_from_errors(errs, rho) == double(count) / double(n));
    }
    REQUIRE(pck_from_errors({0.05}, 0.05) == 0.0);
    REQUIRE(pck_from_errors({0.05}, 0.05 + 1e-12) == 1.0);
}

TEST_CASE("pck is monotone in rho") {
    Rng rng(87);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<double> errs;
        for (int i = 0; i < 40; ++i) errs.push_back(rng.uniform(0.0, 0.2));
        double prev = -1.0;
        for (double rho = 0.0; rho <= 0.2; rho += 0.01) {
            const double p = pck_from_errors(errs, rho);
            REQUIRE(p >= prev);
            prev = p;
        }
    }
}

TEST_CASE("auc handles the closed-form examples") {
    REQUIRE(auc_from_errors({0.0, 0.0, 0.0}, 0.0, 0.15) == 1.0);
    const std::vector<double> half(10, 0.05);
    REQUIRE(auc_from_errors(half, 0.0, 0.1) == Catch::Approx(0.5).epsilon(1e-15));
    REQUIRE_THROWS_AS(auc_from_errors({0.1}, 0.1, 0.1), std::invalid_argument);
    RhoGrid bad;
    bad.steps = 0;
    REQUIRE_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("auc equals a dense numerical integral of the pck curve") {
    Rng rng(88);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> errs;
        for (int i = 0; i < 30; ++i) errs.push_back(rng.uniform(0.0, 0.25));
        const double a = 0.0, b = 0.15;
        const int n = 20000;
        double integral = 0.0;
        for (int i = 0; i <= n; ++i) {
            const double rho = a + (b - a) * double(i) / double(n);
            const double w = (i == 0 || i == n) ? 0.5 : 1.0;
            integral += w * pck_from_errors(errs, rho);
        }
        integral /= double(n);
        const double auc = auc_from_errors(errs, a, b);
        REQUIRE(auc == Catch::Approx(integral).margin(2e-4));
        REQUIRE(auc >= 0.0);
        REQUIRE(auc <= 1.0);
    }
}

TEST_CASE("mpjpe reports a uniform millimeter displacement exactly") {
    std::vector<Eigen::MatrixXd> gt, pred;
    Rng rng(89);
    for (int f = 0; f < 3; ++f) {
        Eigen::MatrixXd g(17, 3);
        for (Eigen::Index k = 0; k < g.rows(); ++k)
            g.row(k) = Vec3(rng.normal(), rng.normal(), rng.normal()).transpose();
        Eigen::MatrixXd p = g;
        p.col(1).array() += 0.001;
        gt.push_back(g);
        pred.push_back(p);
    }
    REQUIRE(mpjpe(pred, gt) == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(mpjpe(gt, gt) == 0.0);
}

TEST_CASE("leaf-joint offsets are invisible to joint positions but not landmarks") {
    auto gt = std::vector<PoseState>{default_pose(model())};
    auto pred = gt;
    const int hand_l = 9;
    pred[0].body_pose[std::size_t(hand_l)] = rot_exp(Vec3(0.0, 0.0, 0.5));
    REQUIRE(positional_error(pred, gt, model()) == 0.0);
    REQUIRE(euler_error(pred, gt) > 0.1);
    REQUIRE(joint_angle_error(pred, gt, model().topology) > 0.01);
    const auto lm = landmark_position_errors(pred[0].body_pose.empty() ? gt : pred, gt, model());
    double worst = 0.0;
    for (double e : lm) worst = std::max(worst, e);
    REQUIRE(worst > 1e-4);
}

TEST_CASE("evaluate_run aggregates across sequences frame-weighted") {
    Rng rng(90);
    std::vector<std::vector<PoseState>> gt{random_frames(rng, 6), random_frames(rng, 10)};
    std::vector<std::vector<PoseState>> pred{random_frames(rng, 6), random_frames(rng, 10)};
    const RhoGrid grid{};
    const RunMetrics run =
        evaluate_run(model(), "test", pred, gt, {"a", "b"}, grid, {{"hidden", 32}});

    std::vector<PoseState> cat_pred = pred[0], cat_gt = gt[0];
    cat_pred.insert(cat_pred.end(), pred[1].begin(), pred[1].end());
    cat_gt.insert(cat_gt.end(), gt[1].begin(), gt[1].end());

    REQUIRE(run.per_sequence.size() == 2);
    REQUIRE(run.per_sequence[0].name == "a");
    REQUIRE(run.euler_deg ==
            Catch::Approx(euler_error(cat_pred, cat_gt) * 180.0 / M_PI).epsilon(1e-12));
    REQUIRE(run.joint_angle_rad ==
            Catch::Approx(joint_angle_error(cat_pred, cat_gt, model().topology)).epsilon(1e-12));
    REQUIRE(run.positional_msq ==
            Catch::Approx(positional_error(cat_pred, cat_gt, model())).epsilon(1e-12));
    REQUIRE(run.positional_rms == Catch::Approx(std::sqrt(run.positional_msq)));
    REQUIRE(run.auc == Catch::Approx(auc_pck(cat_pred, cat_gt, model(), grid)).epsilon(1e-12));
    REQUIRE(run.config_echo.at("hidden") == 32);
}

TEST_CASE("report emits one table row per run and stable JSON") {
    Rng rng(91);
    std::vector<std::vector<PoseState>> gt{random_frames(rng, 4)};
    std::vector<std::vector<PoseState>> pred{random_frames(rng, 4)};
    MetricsReport report;
    report.grid = RhoGrid{};
    for (int i = 0; i < 6; ++i) {
        RunMetrics r = evaluate_run(model(), "run_" + std::to_string(i), pred, gt, {"s"},
                                    report.grid);
        if (i == 0) r.mpjpe_mm = 3.25;
        report.runs.push_back(std::move(r));
    }

    const nlohmann::json j = report.to_json();
    REQUIRE(j.at("magic") == "KPEVAL1");
    REQUIRE(j.at("version") == 1);
    REQUIRE(j.at("runs").size() == 6);
    REQUIRE(j.at("runs")[0].contains("mpjpe_mm"));
    REQUIRE_FALSE(j.at("runs")[1].contains("mpjpe_mm"));
    REQUIRE(j.at("runs")[0].at("per_sequence").size() == 1);
    REQUIRE(j.at("rho_grid").at("steps") == 150);

    const std::string table = report.to_table();
    std::size_t rows = 0;
    for (char c : table) rows += c == '\n';
    REQUIRE(rows == 2 + report.runs.size());
    REQUIRE(table.find("run_5") != std::string::npos);

    MetricsReport again;
    again.grid = report.grid;
    for (int i = 0; i < 6; ++i) {
        RunMetrics r = evaluate_run(model(), "run_" + std::to_string(i), pred, gt, {"s"},
                                    again.grid);
        if (i == 0) r.mpjpe_mm = 3.25;
        again.runs.push_back(std::move(r));
    }
    REQUIRE(again.to_json().dump() == j.dump());
    REQUIRE(again.to_table() == table);
}
