#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>

#include <kp/nn.hpp>

#include "helpers.hpp"

using namespace kp;

namespace {

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols,
                              double scale = 1.0) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
    return m;
}

std::vector<std::vector<Rot3>> random_rotation_batch(Rng& rng, int batch, int joints) {
    std::vector<std::vector<Rot3>> out(static_cast<std::size_t>(batch));
    for (auto& row : out)
        for (int j = 0; j < joints; ++j) row.push_back(kptest::random_rotation(rng));
    return out;
}

// Mean squared error head used to drive gradient checks through a network.
double mse_pass(Network& net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& target) {
    net.training = true;
    const Eigen::MatrixXd y = net.forward(x);
    const Eigen::MatrixXd diff = y - target;
    net.backward(diff * (2.0 / double(diff.size())));
    return diff.squaredNorm() / double(diff.size());
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

const std::vector<int> kChainParents{-1, 0, 1, 1, 3};

} // namespace

TEST_CASE("tensor round-trips matrices through row-major data") {
    Rng rng(1);
    const Eigen::MatrixXd m = random_matrix(rng, 3, 5);
    const Tensor t = Tensor::from_matrix(m);
    REQUIRE(t.shape == std::vector<int>{3, 5});
    REQUIRE(t.data[1] == m(0, 1));
    REQUIRE(t.to_matrix() == m);
    Tensor bad = t;
    bad.data.pop_back();
    REQUIRE_THROWS_AS(bad.to_matrix(), std::invalid_argument);
}

TEST_CASE("l1 rotation loss matches closed forms and an elementwise oracle") {
    Rng rng(2);
    std::vector<Rot3> a, b;
    for (int j = 0; j < 6; ++j) {
        a.push_back(kptest::random_rotation(rng));
        b.push_back(a.back());
    }
    REQUIRE(l1_rotation_loss(a, b) == 0.0);

    const std::vector<Rot3> id{Rot3::Identity()};
    const std::vector<Rot3> zpi{rot_exp(Vec3(0, 0, M_PI))};
    REQUIRE(l1_rotation_loss(id, zpi) == Catch::Approx(4.0 / 9.0).margin(1e-12));

    std::vector<Rot3> c;
    for (int j = 0; j < 6; ++j) c.push_back(kptest::random_rotation(rng));
    double expect = 0.0;
    for (std::size_t j = 0; j < a.size(); ++j)
        for (int r = 0; r < 3; ++r)
            for (int col = 0; col < 3; ++col) expect += std::abs(a[j](r, col) - c[j](r, col));
    expect /= 9.0 * double(a.size());
    REQUIRE(l1_rotation_loss(a, c) == Catch::Approx(expect).epsilon(1e-12));
}

TEST_CASE("regressor architectures match their analytic parameter counts") {
    BodyNetConfig cfg;
    cfg.feature_dim = 30;
    cfg.joint_count = 5;
    cfg.joint_parent = kChainParents;
    cfg.hidden = 16;
    cfg.spl_unit = 8;

    Network mlp = build_body_regressor(RegressorKind::mlp, cfg);
    std::size_t expect = 0;
    int in = cfg.feature_dim;
    for (int i = 0; i < cfg.mlp_layers; ++i) {
        expect += std::size_t(cfg.hidden) * std::size_t(in) + std::size_t(cfg.hidden);
        in = cfg.hidden;
    }
    expect += std::size_t(6 * cfg.joint_count) * std::size_t(in) + std::size_t(6 * cfg.joint_count);
    REQUIRE(mlp.parameter_count() == expect);

    Network gru = build_body_regressor(RegressorKind::gru, cfg);
    std::size_t egru = 0;
    in = cfg.feature_dim;
    for (int i = 0; i < cfg.gru_layers; ++i) {
        egru += std::size_t(3 * cfg.hidden) * std::size_t(in + cfg.hidden) +
                std::size_t(6 * cfg.hidden);
        in = cfg.hidden;
    }
    egru += std::size_t(6 * cfg.joint_count) * std::size_t(cfg.hidden) +
            std::size_t(6 * cfg.joint_count);
    REQUIRE(gru.parameter_count() == egru);

    Network spl = build_body_regressor(RegressorKind::gru_spl, cfg);
    std::size_t espl = 0;
    in = cfg.feature_dim;
    for (int i = 0; i < cfg.gru_layers; ++i) {
        espl += std::size_t(3 * cfg.hidden) * std::size_t(in + cfg.hidden) +
                std::size_t(6 * cfg.hidden);
        in = cfg.hidden;
    }
    std::vector<int> depth(kChainParents.size(), 0);
    for (std::size_t j = 1; j < kChainParents.size(); ++j)
        depth[j] = depth[std::size_t(kChainParents[j])] + 1;
    for (std::size_t j = 0; j < kChainParents.size(); ++j) {
        const int win = cfg.hidden + 6 * depth[j];
        espl += std::size_t(cfg.spl_unit) * std::size_t(win) + std::size_t(cfg.spl_unit);
        espl += 6u * std::size_t(cfg.spl_unit) + 6u;
    }
    REQUIRE(spl.parameter_count() == espl);

    BodyNetConfig paper = cfg;
    paper.paper_scale = true;
    Network pgru = build_body_regressor(RegressorKind::gru, paper);
    REQUIRE(pgru.layers[0]->out_dim() == 1000);
    REQUIRE(pgru.layers[1]->kind() == "gru");
    Network pmlp = build_body_regressor(RegressorKind::mlp, paper);
    int widths = 0;
    for (auto& l : pmlp.layers)
        if (l->kind() == "linear" && l->out_dim() == 512) ++widths;
    REQUIRE(widths == 5);
}

TEST_CASE("linear layer gradient matches finite differences tightly") {
    Rng rng(3);
    Network net;
    {
        Rng wrng(7);
        net.layers.push_back(std::make_unique<Linear>(6, 4, wrng));
    }
    const Eigen::MatrixXd x = random_matrix(rng, 5, 6);
    const Eigen::MatrixXd t = random_matrix(rng, 5, 4);
    const double err =
        grad_check(net, [&](Network& n) { return mse_pass(n, x, t); }, rng, 40);
    REQUIRE(err < 1e-6);
}

TEST_CASE("batchnorm and relu gradients match finite differences") {
    Rng rng(4);
    Network net;
    {
        Rng wrng(8);
        net.layers.push_back(std::make_unique<Linear>(6, 8, wrng));
        net.layers.push_back(std::make_unique<BatchNorm1d>(8));
        net.layers.push_back(std::make_unique<Relu>(8));
        net.layers.push_back(std::make_unique<Linear>(8, 3, wrng));
    }
    const Eigen::MatrixXd x = random_matrix(rng, 9, 6);
    const Eigen::MatrixXd t = random_matrix(rng, 9, 3);
    const double err =
        grad_check(net, [&](Network& n) { return mse_pass(n, x, t); }, rng, 40);
    REQUIRE(err < 1e-4);
}

TEST_CASE("gru cell gradient over a 3-step unroll matches finite differences") {
    Rng rng(5);
    Network net;
    {
        Rng wrng(9);
        net.layers.push_back(std::make_unique<GruCell>(5, 7, wrng));
        net.layers.push_back(std::make_unique<Linear>(7, 2, wrng));
    }
    std::vector<Eigen::MatrixXd> xs, ts;
    for (int s = 0; s < 3; ++s) {
        xs.push_back(random_matrix(rng, 4, 5));
        ts.push_back(random_matrix(rng, 4, 2));
    }
    auto run = [&](Network& n) {
        n.training = true;
        std::vector<Eigen::MatrixXd> outs;
        for (const auto& x : xs) outs.push_back(n.forward(x));
        double loss = 0.0;
        std::vector<Eigen::MatrixXd> grads;
        for (int s = 0; s < 3; ++s) {
            const Eigen::MatrixXd diff = outs[std::size_t(s)] - ts[std::size_t(s)];
            loss += diff.squaredNorm() / double(diff.size());
            grads.push_back(diff * (2.0 / double(diff.size())));
        }
        for (int s = 2; s >= 0; --s) n.backward(grads[std::size_t(s)]);
        return loss;
    };
    REQUIRE(grad_check(net, run, rng, 40) < 1e-4);
}

TEST_CASE("spl gradient and full gru_spl chain match finite differences") {
    Rng rng(6);
    BodyNetConfig cfg;
    cfg.feature_dim = 12;
    cfg.joint_count = 5;
    cfg.joint_parent = kChainParents;
    cfg.hidden = 10;
    cfg.spl_unit = 6;
    cfg.seed = 5;
    Network net = build_body_regressor(RegressorKind::gru_spl, cfg);

    std::vector<Eigen::MatrixXd> xs;
    for (int s = 0; s < 3; ++s) xs.push_back(random_matrix(rng, 3, 12));
    const auto init = random_rotation_batch(rng, 3, 5);
    const auto target = random_rotation_batch(rng, 3, 5);

    auto run = [&](Network& n) {
        n.training = true;
        std::vector<Eigen::MatrixXd> outs;
        for (const auto& x : xs) outs.push_back(n.forward(x));
        double loss = 0.0;
        std::vector<Eigen::MatrixXd> grads(xs.size());
        for (std::size_t s = 0; s < xs.size(); ++s) {
            loss += sixd_rotation_loss(outs[s], init, target, true, &grads[s]) /
                    double(xs.size());
            grads[s] /= double(xs.size());
        }
        for (std::size_t s = xs.size(); s-- > 0;) n.backward(grads[s]);
        return loss;
    };
    REQUIRE(grad_check(net, run, rng, 50) < 1e-4);
}

TEST_CASE("rot_from_6d backward matches directional finite differences") {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const Vec3 a = 2.0 * kptest::random_unit(rng);
        const Vec3 b = Vec3(rng.normal(), rng.normal(), rng.normal());
        if (b.cross(a).norm() < 0.1) continue;
        Mat3 G;
        for (int r = 0; r < 3; ++r)
            for (int c = 0; c < 3; ++c) G(r, c) = rng.normal();
        Vec3 da, db;
        rot_from_6d_backward(a, b, G, da, db);
        const double h = 1e-6;
        for (int i = 0; i < 3; ++i) {
            Vec3 ap = a, am = a;
            ap[i] += h;
            am[i] -= h;
            const double fd =
                ((G.cwiseProduct(rot_from_6d(ap, b))).sum() -
                 (G.cwiseProduct(rot_from_6d(am, b))).sum()) /
                (2.0 * h);
            REQUIRE(da[i] == Catch::Approx(fd).margin(1e-5));
            Vec3 bp = b, bm = b;
            bp[i] += h;
            bm[i] -= h;
            const double fdb =
                ((G.cwiseProduct(rot_from_6d(a, bp))).sum() -
                 (G.cwiseProduct(rot_from_6d(a, bm))).sum()) /
                (2.0 * h);
            REQUIRE(db[i] == Catch::Approx(fdb).margin(1e-5));
        }
    }
}

TEST_CASE("sixd loss is zero with zero gradient at an exact prediction") {
    // Signed-permutation rotations have exact unit columns, so the 6D
    // round trip reproduces them bitwise and the subgradient vanishes.
    Rng rng(8);
    const int J = 4;
    Mat3 cyc;
    cyc << 0, 1, 0, 0, 0, 1, 1, 0, 0;
    Mat3 rz90;
    rz90 << 0, -1, 0, 1, 0, 0, 0, 0, 1;
    const std::vector<Rot3> exact{Rot3::Identity(), cyc, rz90,
                                  Vec3(1, -1, -1).asDiagonal().toDenseMatrix()};
    std::vector<std::vector<Rot3>> target(2);
    for (int s = 0; s < 2; ++s)
        for (int j = 0; j < J; ++j)
            target[std::size_t(s)].push_back(exact[rng.index(exact.size())]);
    Eigen::MatrixXd raw(2, 6 * J);
    for (int s = 0; s < 2; ++s)
        for (int j = 0; j < J; ++j) {
            const Rot3& R = target[std::size_t(s)][std::size_t(j)];
            raw.block<1, 3>(s, 6 * j) = R.col(0).transpose();
            raw.block<1, 3>(s, 6 * j + 3) = R.col(1).transpose();
        }
    Eigen::MatrixXd grad;
    const double loss = sixd_rotation_loss(raw, {}, target, false, &grad);
    REQUIRE(loss < 1e-12);
    REQUIRE(grad.cwiseAbs().maxCoeff() < 1e-9);

    const auto init = random_rotation_batch(rng, 2, J);
    Eigen::MatrixXd raw2 = random_matrix(rng, 2, 6 * J);
    Eigen::MatrixXd g2;
    const double l2 = sixd_rotation_loss(raw2, init, target, true, &g2);
    REQUIRE(l2 > 0.0);
    const double h = 1e-6;
    for (int probe = 0; probe < 10; ++probe) {
        const Eigen::Index r = Eigen::Index(rng.index(2));
        const Eigen::Index c = Eigen::Index(rng.index(std::size_t(6 * J)));
        Eigen::MatrixXd rp = raw2, rm = raw2;
        rp(r, c) += h;
        rm(r, c) -= h;
        const double fd = (sixd_rotation_loss(rp, init, target, true, nullptr) -
                           sixd_rotation_loss(rm, init, target, true, nullptr)) /
                          (2.0 * h);
        REQUIRE(g2(r, c) == Catch::Approx(fd).margin(1e-5));
    }
}

TEST_CASE("dropout is identity in inference and a scaled mask in training") {
    Dropout drop(6, 0.5);
    Rng rng(9);
    const Eigen::MatrixXd x = random_matrix(rng, 4, 6);
    REQUIRE(drop.forward(x, false, nullptr) == x);
    const Eigen::MatrixXd y = drop.forward(x, true, &rng);
    int zeros = 0, scaled = 0;
    for (Eigen::Index r = 0; r < y.rows(); ++r)
        for (Eigen::Index c = 0; c < y.cols(); ++c) {
            if (y(r, c) == 0.0)
                ++zeros;
            else if (y(r, c) == Catch::Approx(2.0 * x(r, c)))
                ++scaled;
        }
    REQUIRE(zeros + scaled == int(y.size()));
    REQUIRE(zeros > 0);
    REQUIRE(scaled > 0);
    REQUIRE_THROWS_AS(Dropout(4, 1.0), std::invalid_argument);
}

TEST_CASE("batchnorm inference is a fixed affine map") {
    BatchNorm1d bn(3);
    Rng rng(10);
    bn.forward(random_matrix(rng, 16, 3, 2.0), true, nullptr);
    bn.forward(random_matrix(rng, 16, 3, 2.0), true, nullptr);
    bn.reset_state();

    Eigen::MatrixXd rm, rv, gamma, beta;
    for (auto& p : bn.params("bn")) {
        if (p.name == "bn.running_mean") rm = *p.value;
        if (p.name == "bn.running_var") rv = *p.value;
        if (p.name == "bn.gamma") gamma = *p.value;
        if (p.name == "bn.beta") beta = *p.value;
    }
    const Eigen::MatrixXd x = random_matrix(rng, 5, 3);
    const Eigen::MatrixXd y = bn.forward(x, false, nullptr);
    for (Eigen::Index r = 0; r < x.rows(); ++r)
        for (Eigen::Index c = 0; c < 3; ++c) {
            const double expect = gamma(c, 0) * (x(r, c) - rm(c, 0)) /
                                      std::sqrt(rv(c, 0) + 1e-5) +
                                  beta(c, 0);
            REQUIRE(y(r, c) == Catch::Approx(expect).epsilon(1e-12));
        }
    REQUIRE(bn.forward(x, false, nullptr) == y);
}

TEST_CASE("spl ancestry: root sees hidden only, descendants react, siblings do not") {
    Rng wrng(11);
    Spl spl(7, kChainParents, 6, 6, wrng);
    REQUIRE(spl.ancestors()[0].empty());
    REQUIRE(spl.ancestors()[4] == std::vector<int>{0, 1, 3});
    REQUIRE(spl.in_dim() == 7);
    REQUIRE(spl.out_dim() == 30);

    Rng rng(12);
    const Eigen::MatrixXd h = random_matrix(rng, 2, 7);
    const Eigen::MatrixXd before = spl.forward(h, false, nullptr);

    for (auto& p : spl.params("spl"))
        if (p.name == "spl.j1.b2") p.value->array() += 0.25;
    const Eigen::MatrixXd after = spl.forward(h, false, nullptr);

    auto block = [](const Eigen::MatrixXd& m, int j) { return m.middleCols(6 * j, 6); };
    REQUIRE(block(after, 0) == block(before, 0));
    REQUIRE((block(after, 1) - block(before, 1)).cwiseAbs().maxCoeff() > 0.0);
    REQUIRE((block(after, 2) - block(before, 2)).cwiseAbs().maxCoeff() > 0.0);
    REQUIRE((block(after, 3) - block(before, 3)).cwiseAbs().maxCoeff() > 0.0);
    REQUIRE((block(after, 4) - block(before, 4)).cwiseAbs().maxCoeff() > 0.0);

    REQUIRE_THROWS_AS(Spl(4, std::vector<int>{1, 0}, 4, 6, wrng), std::invalid_argument);
}

TEST_CASE("gru hidden state threads exactly through get/set") {
    Rng wrng(13);
    GruCell cell(4, 6, wrng);
    Rng rng(14);
    std::vector<Eigen::MatrixXd> xs;
    for (int s = 0; s < 5; ++s) xs.push_back(random_matrix(rng, 1, 4));

    std::vector<Eigen::MatrixXd> continuous;
    for (const auto& x : xs) continuous.push_back(cell.forward(x, false, nullptr));

    GruCell manual(4, 6, wrng);
    for (auto& p : cell.params("a")) {
        for (auto& q : manual.params("a"))
            if (q.name == p.name) *q.value = *p.value;
    }
    manual.reset_state();
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(1, 6);
    for (std::size_t s = 0; s < xs.size(); ++s) {
        manual.set_hidden_state(h);
        const Eigen::MatrixXd y = manual.forward(xs[s], false, nullptr);
        h = manual.hidden_state();
        REQUIRE(y == continuous[s]);
    }
}

TEST_CASE("adam obeys its first-step and fixed-point behavior") {
    Eigen::MatrixXd p = Eigen::MatrixXd::Constant(2, 2, 1.0);
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(2, 2);
    Adam opt(0.05);
    const Eigen::MatrixXd before = p;
    opt.step({ParamRef{"p", &p, &g}});
    REQUIRE(p == before);

    g.setConstant(0.5);
    Adam fresh(0.05);
    fresh.step({ParamRef{"p", &p, &g}});
    REQUIRE((before - p).cwiseAbs().maxCoeff() ==
            Catch::Approx(0.05).epsilon(1e-6));

    Eigen::MatrixXd x = Eigen::MatrixXd::Constant(1, 1, 1.0);
    Eigen::MatrixXd gx = Eigen::MatrixXd::Zero(1, 1);
    Adam bowl(0.01);
    for (int i = 0; i < 2000; ++i) {
        gx(0, 0) = 2.0 * x(0, 0);
        bowl.step({ParamRef{"x", &x, &gx}});
    }
    REQUIRE(std::abs(x(0, 0)) < 1e-3);
}

TEST_CASE("training descends on linear data and is seed-deterministic") {
    Rng rng(15);
    const int F = 8, J = 3, T = 12;
    Rng wrng(16);
    const Eigen::MatrixXd wstar = random_matrix(wrng, 6 * J, F, 0.4);

    std::vector<RegressionSequence> data;
    for (int s = 0; s < 6; ++s) {
        RegressionSequence seq;
        seq.features = random_matrix(rng, T, F);
        for (int t = 0; t < T; ++t) {
            const Eigen::VectorXd raw = wstar * seq.features.row(t).transpose();
            seq.init.push_back(std::vector<Rot3>(std::size_t(J), Rot3::Identity()));
            seq.target.push_back(rotations_from_6d(raw));
        }
        data.push_back(std::move(seq));
    }

    auto make_net = [&] {
        Network net;
        Rng nrng(17);
        net.layers.push_back(std::make_unique<Linear>(F, 6 * J, nrng));
        return net;
    };

    TrainConfig cfg;
    cfg.epochs = 40;
    cfg.batch = 4;
    cfg.lr = 2e-3;
    cfg.residual = false;
    cfg.recurrent = false;
    cfg.seed = 3;

    Network net = make_net();
    const double before = sequence_loss(net, data, cfg.residual, cfg.recurrent);
    Adam opt(cfg.lr);
    const TrainResult run = train_sequences(net, data, opt, cfg);
    const double after = sequence_loss(net, data, cfg.residual, cfg.recurrent);
    REQUIRE(after <= before);
    REQUIRE(run.epoch_loss.back() <= run.epoch_loss.front());

    Network net2 = make_net();
    Adam opt2(cfg.lr);
    const TrainResult run2 = train_sequences(net2, data, opt2, cfg);
    REQUIRE(run.epoch_loss == run2.epoch_loss);
}

TEST_CASE("recurrent training runs windowed and aborts on non-finite loss") {
    Rng rng(18);
    const int F = 6, J = 2, T = 10;
    std::vector<RegressionSequence> data;
    for (int s = 0; s < 3; ++s) {
        RegressionSequence seq;
        seq.features = random_matrix(rng, T, F);
        for (int t = 0; t < T; ++t) {
            seq.init.push_back(std::vector<Rot3>(std::size_t(J), Rot3::Identity()));
            seq.target.push_back({kptest::random_rotation(rng), kptest::random_rotation(rng)});
        }
        data.push_back(std::move(seq));
    }

    BodyNetConfig ncfg;
    ncfg.feature_dim = F;
    ncfg.joint_count = J;
    ncfg.hidden = 8;
    ncfg.gru_layers = 2;
    ncfg.seed = 4;
    Network net = build_body_regressor(RegressorKind::gru, ncfg);

    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 2;
    cfg.window = 4;
    cfg.lr = 1e-3;
    cfg.recurrent = true;
    Adam opt(cfg.lr);
    const TrainResult run = train_sequences(net, data, opt, cfg);
    REQUIRE(run.epoch_loss.size() == 2);
    for (double l : run.epoch_loss) REQUIRE(std::isfinite(l));

    auto params = net.params();
    (*params.front().value)(0, 0) = std::numeric_limits<double>::quiet_NaN();
    Adam opt2(cfg.lr);
    REQUIRE_THROWS_AS(train_sequences(net, data, opt2, cfg), std::runtime_error);

    std::vector<RegressionSequence> uneven = data;
    uneven.push_back(data[0]);
    uneven.back().features = random_matrix(rng, T + 1, F);
    Network net2 = build_body_regressor(RegressorKind::gru, ncfg);
    Adam opt3(cfg.lr);
    REQUIRE_THROWS_AS(train_sequences(net2, uneven, opt3, cfg), std::invalid_argument);
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    BodyNetConfig cfg;
    cfg.feature_dim = 14;
    cfg.joint_count = 5;
    cfg.joint_parent = kChainParents;
    cfg.hidden = 12;
    cfg.spl_unit = 6;
    cfg.seed = 21;
    Network net = build_body_regressor(RegressorKind::gru_spl, cfg);

    const std::string path = "ckpt_roundtrip.kpmdl";
    save_network(net, path);
    Network back = load_network(path);

    auto pa = net.params();
    auto pb = back.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i].name == pb[i].name);
        REQUIRE(*pa[i].value == *pb[i].value);
    }
    REQUIRE(net.arch().dump() == back.arch().dump());

    Rng rng(22);
    const Eigen::MatrixXd x = random_matrix(rng, 1, 14);
    net.training = back.training = false;
    net.reset_state();
    back.reset_state();
    REQUIRE(net.forward(x) == back.forward(x));

    const std::string again = "ckpt_roundtrip2.kpmdl";
    save_network(back, again);
    REQUIRE(read_file(path) == read_file(again));
    std::remove(path.c_str());
    std::remove(again.c_str());
}

TEST_CASE("network regressor bridges hidden state through extractor state") {
    BodyNetConfig cfg;
    cfg.feature_dim = 10;
    cfg.joint_count = 4;
    cfg.hidden = 6;
    cfg.seed = 23;
    Network direct = build_body_regressor(RegressorKind::gru, cfg);
    save_network(direct, "bridge.kpmdl");
    const NetworkRegressor reg{load_network("bridge.kpmdl")};
    std::remove("bridge.kpmdl");

    REQUIRE(reg.feature_dim() == 10);
    REQUIRE(reg.joint_count() == 4);
    REQUIRE_FALSE(reg.stateless());

    Rng rng(24);
    ExtractorState state;
    direct.training = false;
    direct.reset_state();
    for (int s = 0; s < 4; ++s) {
        const Eigen::VectorXd x = random_matrix(rng, 10, 1).col(0);
        const Eigen::VectorXd via_state = reg.forward(x, state);
        const Eigen::VectorXd straight = direct.forward(x.transpose()).row(0).transpose();
        REQUIRE(via_state == straight);
    }
    REQUIRE(state.hidden.size() == 2);
    REQUIRE(state.hidden[0].size() == 6);
}

TEST_CASE("regression sequences carry pipeline features and ground truth") {
    const SkinnedModel model = make_desk_model(DeskConfig{});
    SynthOptions opts;
    opts.duration = 0.4;
    const SequenceRecord rec = generate_sequence(model, random_motion_spec(model, opts, 30));

    ExtractorConfig cfg;
    cfg.use_shape = true;
    const RegressionSequence seq = make_regression_sequence(model, rec, cfg);
    REQUIRE(seq.features.rows() == Eigen::Index(rec.frames.size()));
    REQUIRE(seq.features.cols() ==
            feature_dim(cfg, model.topology, int(rec.beta.size())));
    REQUIRE(seq.init.size() == rec.frames.size());
    REQUIRE(seq.target.size() == rec.frames.size());
    for (std::size_t t = 0; t < rec.frames.size(); ++t)
        for (int j = 0; j < model.joint_count(); ++j)
            REQUIRE(seq.target[t][std::size_t(j)] == rec.gt[t].body_pose[std::size_t(j)]);

    const Rot3 g0 = estimate_global_rotation(rec.frames[0], model);
    const PoseState init0 = bending_heuristic(rec.frames[0], model, g0, rec.beta);
    const ResidualFeatures rf0 = compute_twists(rec.frames[0], model, init0);
    const Eigen::VectorXd row0 =
        assemble_features(cfg, rf0, rec.frames[0], rec.beta, model.topology);
    REQUIRE(seq.features.row(0).transpose() == row0);
}
