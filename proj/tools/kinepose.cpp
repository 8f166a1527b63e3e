// kinepose: command-line driver for the landmark-stream pose pipeline.
//
//   generate   write synthetic landmark-stream datasets
//   train      train a body pose regressor or the face network
//   extract    run the frame-rate extractor over a stream
//   fit        optimization-based fitting, online or offline
//   eval       metrics report for one run, or the ablation grid
//   bench      stage latencies, throughput, and fit speed ratios

#include <CLI11.hpp>

#include <kp/bodymodel.hpp>
#include <kp/composer.hpp>
#include <kp/evalmetrics.hpp>
#include <kp/extractor.hpp>
#include <kp/faceextract.hpp>
#include <kp/fitter.hpp>
#include <kp/nn.hpp>
#include <kp/random.hpp>
#include <kp/rotmath.hpp>
#include <kp/synth.hpp>

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (salt + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Index-sharded worker pool. Results must be written into per-index slots so
/// the output is identical for any thread count.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    threads = std::max(1, std::min<int>(threads, int(n)));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr err;
    std::mutex err_mutex;
    std::vector<std::thread> pool;
    pool.reserve(std::size_t(threads));
    for (int t = 0; t < threads; ++t)
        pool.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= n) break;
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!err) err = std::current_exception();
                }
            }
        });
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
}

double percentile(std::vector<double> v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const auto idx = std::min(v.size() - 1, std::size_t(q * double(v.size())));
    return v[idx];
}

double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

double to_ms(Clock::duration d) {
    return std::chrono::duration<double, std::milli>(d).count();
}

kp::SkinnedModel model_for_id(const std::string& id) {
    if (id == kp::kDeskModelId) return kp::make_desk_model();
    throw std::runtime_error("unknown model id '" + id + "'");
}

std::string zero_pad(std::size_t i, int width = 3) {
    std::ostringstream out;
    out << std::setw(width) << std::setfill('0') << i;
    return out.str();
}

// --- dataset manifests ------------------------------------------------------

struct Manifest {
    std::string model_id;
    std::uint64_t seed = 0;
    int frames = 0;
    double rate = 30.0;
    json noise;
    std::vector<std::string> train, test;  // paths relative to the dataset dir
};

void write_manifest(const fs::path& dir, const Manifest& m) {
    json j;
    j["magic"] = "KPSET1";
    j["version"] = 1;
    j["model_id"] = m.model_id;
    j["seed"] = m.seed;
    j["frames"] = m.frames;
    j["rate"] = m.rate;
    j["noise"] = m.noise;
    j["train"] = m.train;
    j["test"] = m.test;
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    out << j.dump(2) << '\n';
}

Manifest read_manifest(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
    json j = json::parse(in);
    if (j.value("magic", "") != std::string("KPSET1"))
        throw std::runtime_error("not a dataset manifest: " + (dir / "manifest.json").string());
    Manifest m;
    m.model_id = j.at("model_id").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.frames = j.at("frames").get<int>();
    m.rate = j.at("rate").get<double>();
    m.noise = j.value("noise", json::object());
    m.train = j.at("train").get<std::vector<std::string>>();
    m.test = j.at("test").get<std::vector<std::string>>();
    return m;
}

std::vector<kp::SequenceRecord> load_split(const fs::path& dir,
                                           const std::vector<std::string>& rel) {
    std::vector<kp::SequenceRecord> recs;
    recs.reserve(rel.size());
    for (const auto& r : rel) recs.push_back(kp::load_record((dir / r).string()));
    return recs;
}

// --- checkpoints -------------------------------------------------------------

/// Loads a body checkpoint and rebuilds the extractor configuration stored
/// alongside the weights at training time.
std::pair<kp::Network, kp::ExtractorConfig> load_body_checkpoint(const std::string& path) {
    kp::Network net = kp::load_network(path);
    if (!net.meta.contains("extractor"))
        throw std::runtime_error(path + ": checkpoint has no extractor configuration");
    kp::ExtractorConfig cfg = kp::ExtractorConfig::from_json(net.meta.at("extractor"));
    return {std::move(net), cfg};
}

// --- ablation grid ------------------------------------------------------------

/// Feature/output matrix of the standard comparison grid. Row order is fixed;
/// the last row is the shipping configuration.
std::vector<kp::ExtractorConfig> grid_configs(kp::RegressorKind kind) {
    auto mk = [&](bool kp_, bool beta, bool init, bool twists, bool res) {
        kp::ExtractorConfig c;
        c.use_keypoints = kp_;
        c.use_shape = beta;
        c.use_init = init;
        c.use_twists = twists;
        c.residual_output = res;
        c.regressor = kind;
        return c;
    };
    return {
        mk(true, false, false, false, false),  // keypoints only, direct output
        mk(true, true, false, false, false),   // + shape
        mk(true, false, true, false, false),   // + initialization
        mk(false, false, false, true, true),   // twists only, residual output
        mk(true, true, true, false, true),     // keypoints + shape + init, residual
        mk(false, false, true, true, true),    // init + twists, residual
    };
}

// ==============================================================================
// generate
// ==============================================================================

struct GenerateOptions {
    std::string out;
    int sequences = 50;
    int frames = 90;
    double rate = 30.0;
    double noise = 0.005;
    double dropout = 0.01;
    double time_jitter = 0.0;
    double occlusion_hazard = 0.0;
    double occlusion_frames = 8.0;
    double test_frac = 0.2;
    double joint_limit = 0.5;
    std::uint64_t seed = 0;
    int threads = 1;
};

int run_generate(const GenerateOptions& o) {
    if (o.sequences < 1) throw std::runtime_error("generate: need at least one sequence");
    if (o.frames < 1) throw std::runtime_error("generate: need at least one frame");
    if (o.test_frac < 0 || o.test_frac >= 1)
        throw std::runtime_error("generate: test fraction must be in [0, 1)");
    const kp::SkinnedModel model = kp::make_desk_model();

    kp::SynthOptions so;
    so.rate = o.rate;
    so.duration = double(o.frames) / o.rate;
    so.joint_limit = o.joint_limit;
    kp::NoiseModel nm;
    nm.position_sigma = o.noise;
    nm.dropout = o.dropout;
    nm.time_jitter = o.time_jitter;
    nm.occlusion_hazard = o.occlusion_hazard;
    nm.occlusion_frames = o.occlusion_frames;
    nm.validate();
    const bool clean =
        o.noise == 0 && o.dropout == 0 && o.time_jitter == 0 && o.occlusion_hazard == 0;

    std::vector<kp::SequenceRecord> recs(std::size_t(o.sequences));
    parallel_for(std::size_t(o.sequences), o.threads, [&](std::size_t i) {
        const kp::MotionSpec spec = kp::random_motion_spec(model, so, mix_seed(o.seed, i));
        kp::SequenceRecord rec = kp::generate_sequence(model, spec, "seq_" + zero_pad(i));
        if (clean) {
            recs[i] = std::move(rec);
            return;
        }
        kp::SequenceRecord noisy = kp::corrupt(rec, nm, mix_seed(o.seed, i) ^ 0x11);
        // A take starts only once tracking is locked: the torso landmarks the
        // extractor initializes from are always present in the first frame.
        const auto& topo = model.topology;
        for (int id : {topo.lm_chest, topo.lm_pelvis, topo.lm_shoulder_l, topo.lm_shoulder_r})
            noisy.frames[0].valid[std::size_t(id)] = 1;
        recs[i] = std::move(noisy);
    });

    const auto split = kp::split_dataset(std::size_t(o.sequences),
                                         {1.0 - o.test_frac, 0.0, o.test_frac}, o.seed);
    const fs::path dir(o.out);
    fs::create_directories(dir / "train");
    fs::create_directories(dir / "test");

    Manifest m;
    m.model_id = kp::kDeskModelId;
    m.seed = o.seed;
    m.frames = o.frames;
    m.rate = o.rate;
    m.noise = {{"position_sigma", o.noise}, {"dropout", o.dropout}, {"time_jitter", o.time_jitter}};
    for (std::size_t i : split.train) {
        const std::string rel = "train/" + recs[i].name + ".kpstrm";
        kp::save_record(recs[i], (dir / rel).string());
        m.train.push_back(rel);
    }
    for (std::size_t i : split.test) {
        const std::string rel = "test/" + recs[i].name + ".kpstrm";
        kp::save_record(recs[i], (dir / rel).string());
        m.test.push_back(rel);
    }
    write_manifest(dir, m);
    std::cout << "wrote " << m.train.size() << " train + " << m.test.size()
              << " test sequences (" << o.frames << " frames @ " << o.rate << " Hz) to "
              << dir.string() << '\n';
    return 0;
}

// ==============================================================================
// train
// ==============================================================================

struct TrainOptions {
    std::string data;
    std::string out;
    std::string target = "body";
    std::string regressor = "gru_spl";
    std::string resume;
    int hidden = 256;
    bool paper_scale = false;
    int epochs = 40;
    int batch = 16;
    int window = 32;
    double lr = 0.0;  // 0 = task default
    double val_frac = 0.1;
    std::uint64_t seed = 0;
    bool use_keypoints = false;
    bool use_shape = false;
    bool use_init = true;
    bool use_twists = true;
    bool residual = true;
    // face target
    int expression_dim = 10;
    int face_samples = 2000;
    int face_val = 256;
    double face_noise = 0.005;
    bool use_z = true;
    double mouth_weight = 3.0;
    double lambda_keypoints = 1.0;
};

int run_train_body(const TrainOptions& o) {
    if (o.data.empty()) throw std::runtime_error("train: --data is required for the body target");
    const Manifest m = read_manifest(o.data);
    const kp::SkinnedModel model = model_for_id(m.model_id);

    kp::ExtractorConfig cfg;
    cfg.use_keypoints = o.use_keypoints;
    cfg.use_shape = o.use_shape;
    cfg.use_init = o.use_init;
    cfg.use_twists = o.use_twists;
    cfg.residual_output = o.residual;
    cfg.regressor = kp::regressor_kind_from_string(o.regressor);
    if (cfg.regressor == kp::RegressorKind::none)
        throw std::runtime_error("train: pick a trainable regressor (mlp, gru, gru_spl)");
    cfg.validate();

    const std::vector<kp::SequenceRecord> recs = load_split(o.data, m.train);
    if (recs.empty()) throw std::runtime_error("train: dataset has no training sequences");
    std::vector<kp::RegressionSequence> seqs;
    seqs.reserve(recs.size());
    for (const auto& r : recs) seqs.push_back(kp::make_regression_sequence(model, r, cfg));

    const auto split =
        kp::split_dataset(seqs.size(), {1.0 - o.val_frac, o.val_frac, 0.0}, o.seed);
    std::vector<kp::RegressionSequence> train_set, val_set;
    for (std::size_t i : split.train) train_set.push_back(seqs[i]);
    for (std::size_t i : split.val) val_set.push_back(seqs[i]);
    if (train_set.empty()) throw std::runtime_error("train: empty training split");

    const int F = int(train_set.front().features.cols());
    kp::Network net;
    int epochs_before = 0;
    if (o.resume.empty()) {
        kp::BodyNetConfig nc;
        nc.feature_dim = F;
        nc.joint_count = model.joint_count();
        nc.joint_parent = model.topology.joint_parent;
        nc.hidden = o.hidden;
        nc.paper_scale = o.paper_scale;
        nc.seed = mix_seed(o.seed, 0xB0D7);
        net = kp::build_body_regressor(cfg.regressor, nc);
    } else {
        auto [loaded, prev_cfg] = load_body_checkpoint(o.resume);
        if (prev_cfg.to_json() != cfg.to_json())
            throw std::runtime_error("train: resume checkpoint was trained with config " +
                                     prev_cfg.label() + ", requested " + cfg.label());
        net = std::move(loaded);
        epochs_before = net.meta.value("epochs_trained", 0);
    }
    if (net.in_dim() != F)
        throw std::runtime_error("train: network expects " + std::to_string(net.in_dim()) +
                                 " features, dataset provides " + std::to_string(F));

    const double lr = o.lr > 0 ? o.lr : 1e-4;
    kp::Adam opt(lr);
    kp::TrainConfig tc;
    tc.epochs = o.epochs;
    tc.batch = o.batch;
    tc.window = o.window;
    tc.lr = lr;
    tc.residual = cfg.residual_output;
    tc.recurrent = cfg.regressor != kp::RegressorKind::mlp;
    tc.seed = mix_seed(o.seed, 0x7121 + std::uint64_t(epochs_before));
    const kp::TrainResult result = kp::train_sequences(net, train_set, opt, tc);
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e)
        std::cout << "epoch " << std::setw(3) << (epochs_before + int(e) + 1) << "  loss "
                  << std::scientific << std::setprecision(6) << result.epoch_loss[e] << '\n';

    const double val_loss = val_set.empty()
                                ? result.epoch_loss.back()
                                : kp::sequence_loss(net, val_set, tc.residual, tc.recurrent);
    json curve = net.meta.value("epoch_loss", json::array());
    for (double l : result.epoch_loss) curve.push_back(l);
    net.meta["extractor"] = cfg.to_json();
    net.meta["model_id"] = m.model_id;
    net.meta["epoch_loss"] = curve;
    net.meta["epochs_trained"] = epochs_before + o.epochs;
    net.meta["val_loss"] = val_loss;
    net.meta["train_seed"] = o.seed;
    kp::save_network(net, o.out);
    std::cout << "val loss " << std::scientific << std::setprecision(6) << val_loss << "  ("
              << val_set.size() << " held-out sequences)\n"
              << "saved " << cfg.label() << " checkpoint to " << o.out << '\n';
    return 0;
}

int run_train_face(const TrainOptions& o) {
    const kp::FaceRig rig = kp::make_face_rig(o.expression_dim, o.seed);
    const kp::HeadModel head = kp::make_desk_head(o.expression_dim, o.seed);
    const auto train_set =
        kp::generate_face_dataset(rig, o.face_samples, mix_seed(o.seed, 1), o.face_noise);
    const auto val_set =
        kp::generate_face_dataset(rig, o.face_val, mix_seed(o.seed, 2), o.face_noise);

    kp::Network net;
    int epochs_before = 0;
    if (o.resume.empty()) {
        net = kp::build_face_net(o.expression_dim, mix_seed(o.seed, 3));
    } else {
        net = kp::load_network(o.resume);
        if (net.meta.value("task", "") != std::string("face"))
            throw std::runtime_error("train: resume checkpoint is not a face network");
        epochs_before = net.meta.value("epochs_trained", 0);
    }

    kp::FaceTrainConfig fc;
    fc.epochs = o.epochs;
    fc.batch = o.batch;
    fc.learning_rate = o.lr > 0 ? o.lr : 5e-4;
    fc.use_z = o.use_z;
    fc.loss.mouth_weight = o.mouth_weight;
    fc.loss.lambda_keypoints = o.lambda_keypoints;
    fc.seed = mix_seed(o.seed, 4 + std::uint64_t(epochs_before));
    const kp::FaceTrainResult result = kp::train_face(net, train_set, head, fc);
    for (std::size_t e = 0; e < result.epoch_loss.size(); ++e)
        std::cout << "epoch " << std::setw(3) << (epochs_before + int(e) + 1) << "  loss "
                  << std::scientific << std::setprecision(6) << result.epoch_loss[e] << '\n';

    const kp::FaceEval eval = kp::evaluate_face(net, val_set, head);
    json curve = net.meta.value("epoch_loss", json::array());
    for (double l : result.epoch_loss) curve.push_back(l);
    net.meta["epoch_loss"] = curve;
    net.meta["epochs_trained"] = epochs_before + o.epochs;
    net.meta["rig_seed"] = o.seed;
    net.meta["val_psi_mse"] = eval.psi_mse;
    net.meta["val_mpjpe_m"] = eval.mpjpe_m;
    net.meta["val_mouth_mpjpe_m"] = eval.mouth_mpjpe_m;
    net.meta["val_loss"] = eval.psi_mse + eval.mpjpe_m;
    kp::save_network(net, o.out);
    std::cout << "val psi mse " << std::scientific << std::setprecision(6) << eval.psi_mse
              << "  mpjpe " << std::fixed << std::setprecision(2) << eval.mpjpe_m * 1e3
              << " mm  mouth " << eval.mouth_mpjpe_m * 1e3 << " mm\n"
              << "saved face checkpoint to " << o.out << '\n';
    return 0;
}

int run_train(const TrainOptions& o) {
    if (o.target == "body") return run_train_body(o);
    if (o.target == "face") return run_train_face(o);
    throw std::runtime_error("train: unknown target '" + o.target + "'");
}

// ==============================================================================
// extract
// ==============================================================================

struct ExtractOptions {
    std::string input;
    std::string output = "-";
    std::string model;
    std::string regressor = "auto";  // auto | none
    bool smooth = false;
    double alpha_rotation = 0.8;
    double alpha_expression = 0.5;
    double staleness = 0.25;
    std::uint64_t seed = 0;
};

int run_extract(const ExtractOptions& o) {
    std::unique_ptr<kp::SequenceReader> reader;
    if (o.input == "-")
        reader = std::make_unique<kp::SequenceReader>(std::cin, "<stdin>");
    else
        reader = std::make_unique<kp::SequenceReader>(o.input);
    const std::string model_id = reader->header().value("model_id", std::string(kp::kDeskModelId));
    const kp::SkinnedModel model = model_for_id(model_id);
    const Eigen::VectorXd beta = reader->beta();

    kp::ExtractorConfig cfg;
    std::unique_ptr<kp::NetworkRegressor> reg;
    if (!o.model.empty() && o.regressor != "none") {
        auto [net, loaded_cfg] = load_body_checkpoint(o.model);
        const std::string ckpt_model = net.meta.value("model_id", std::string(kp::kDeskModelId));
        if (ckpt_model != model_id)
            throw std::runtime_error("extract: checkpoint targets model '" + ckpt_model +
                                     "', stream carries '" + model_id + "'");
        cfg = loaded_cfg;
        reg = std::make_unique<kp::NetworkRegressor>(std::move(net));
    }

    std::ofstream file_out;
    const bool to_stdout = o.output == "-";
    if (!to_stdout) {
        file_out.open(o.output);
        if (!file_out) throw std::runtime_error("extract: cannot write " + o.output);
    }
    std::ostream& out = to_stdout ? std::cout : file_out;

    kp::SmoothingConfig scfg;
    scfg.alpha_rotation = o.alpha_rotation;
    scfg.alpha_expression = o.alpha_expression;
    scfg.max_staleness = o.staleness;
    scfg.validate();
    kp::PoseState fallback = kp::default_pose(model);
    fallback.shape = beta;
    kp::ComposerState cstate(fallback);

    kp::ExtractorState state;

    std::vector<double> latency_ms;
    std::vector<std::string> failures;
    kp::LandmarkFrame frame;
    std::size_t idx = 0;
    while (reader->next(frame)) {
        const auto t0 = Clock::now();
        kp::PoseState pose;
        try {
            pose = kp::extract_frame(frame, model, cfg, reg.get(), state, beta);
        } catch (const std::exception& e) {
            failures.push_back("frame " + std::to_string(idx) + ": " + e.what());
            pose = state.has_last ? state.last : fallback;
        }
        if (o.smooth) {
            kp::ChannelStreams one;
            one.body.push_back({frame.timestamp, pose.body_pose, pose.global});
            const auto smoothed = kp::compose_frame(one, frame.timestamp, scfg, cstate);
            if (smoothed) pose = *smoothed;
        }
        latency_ms.push_back(to_ms(Clock::now() - t0));
        out << kp::pose_record_json(frame.timestamp, pose).dump() << '\n';
        if (to_stdout) out.flush();
        ++idx;
    }
    if (!to_stdout) file_out.close();

    std::cerr << "extract: " << idx << " frames"
              << (reg ? " (" + cfg.label() + ")" : " (heuristic only)") << "  latency p50 "
              << std::fixed << std::setprecision(3) << percentile(latency_ms, 0.50)
              << " ms  p95 " << percentile(latency_ms, 0.95) << " ms  max "
              << (latency_ms.empty() ? 0.0 : *std::max_element(latency_ms.begin(),
                                                               latency_ms.end()))
              << " ms\n";
    for (const auto& f : failures) std::cerr << "extract: " << f << '\n';
    return failures.empty() ? 0 : 1;
}

// ==============================================================================
// fit
// ==============================================================================

struct FitOptions {
    std::string input;
    std::string output;
    std::string mode = "online";
    std::string prior_data;
    std::string report;
    double lambda_data = 1.0;
    double lambda_prior = 1e-3;
    double lambda_temporal = 1e-2;
    double delta = 0.01;
    double learning_rate = 0.01;
    int iterations = 200;
    int offline_iterations = 1000;
    int sweeps = 3;
    int threads = 1;
    std::uint64_t seed = 0;
};

int run_fit(const FitOptions& o) {
    kp::FitConfig cfg;
    cfg.lambda_data = o.lambda_data;
    cfg.lambda_prior = o.lambda_prior;
    cfg.lambda_temporal = o.lambda_temporal;
    cfg.delta = o.delta;
    cfg.learning_rate = o.learning_rate;
    cfg.max_iterations = o.iterations;
    cfg.offline_iterations = o.offline_iterations;
    cfg.sweeps = o.sweeps;
    const kp::FitMode mode =
        o.mode == "offline" ? kp::FitMode::offline
                            : (o.mode == "online" ? kp::FitMode::online
                                                  : throw std::runtime_error(
                                                        "fit: mode must be online or offline"));

    if (!o.prior_data.empty()) {
        const Manifest pm = read_manifest(o.prior_data);
        std::vector<kp::PoseState> poses;
        for (const auto& rec : load_split(o.prior_data, pm.train))
            poses.insert(poses.end(), rec.gt.begin(), rec.gt.end());
        if (poses.empty())
            throw std::runtime_error("fit: prior dataset has no ground-truth poses");
        cfg.prior = kp::estimate_pose_covariance(poses);
    }
    cfg.validate();

    struct Job {
        std::string in, out, name;
    };
    std::vector<Job> jobs;
    if (fs::is_directory(o.input)) {
        const Manifest m = read_manifest(o.input);
        fs::create_directories(o.output);
        for (const auto& rel : m.test) {
            const std::string name = fs::path(rel).stem().string();
            jobs.push_back({(fs::path(o.input) / rel).string(),
                            (fs::path(o.output) / (name + ".jsonl")).string(), name});
        }
        if (jobs.empty()) throw std::runtime_error("fit: dataset has no test sequences");
    } else {
        jobs.push_back({o.input, o.output, fs::path(o.input).stem().string()});
    }

    std::vector<json> summaries(jobs.size());
    std::vector<std::string> failures(jobs.size());
    parallel_for(jobs.size(), o.threads, [&](std::size_t i) {
        try {
            const kp::SequenceRecord rec = kp::load_record(jobs[i].in);
            const kp::SkinnedModel model = model_for_id(rec.model_id);
            const kp::FitResult res = kp::fit_sequence(rec.frames, model, rec.beta, cfg, mode);
            std::vector<std::pair<double, kp::PoseState>> records;
            records.reserve(res.poses.size());
            for (std::size_t t = 0; t < res.poses.size(); ++t)
                records.emplace_back(rec.frames[t].timestamp, res.poses[t]);
            kp::save_pose_stream(jobs[i].out, records);
            json s = res.to_json();
            s.erase("trace");
            s["name"] = jobs[i].name;
            s["ms_per_frame"] = 1e3 * res.wall_seconds / double(res.poses.size());
            summaries[i] = std::move(s);
        } catch (const std::exception& e) {
            failures[i] = jobs[i].name + ": " + e.what();
        }
    });

    json report = json::array();
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (!failures[i].empty()) continue;
        const json& s = summaries[i];
        std::cout << s["name"].get<std::string>() << ": objective " << std::scientific
                  << std::setprecision(6) << s["objective"].get<double>() << "  iters "
                  << s["iterations"].get<int>() << "  " << std::fixed << std::setprecision(2)
                  << s["ms_per_frame"].get<double>() << " ms/frame ("
                  << s["wall_seconds"].get<double>() << " s)\n";
        report.push_back(s);
    }
    if (!o.report.empty()) {
        std::ofstream out(o.report);
        if (!out) throw std::runtime_error("fit: cannot write " + o.report);
        out << report.dump(2) << '\n';
    }
    int failed = 0;
    for (const auto& f : failures)
        if (!f.empty()) {
            std::cerr << "fit: " << f << '\n';
            ++failed;
        }
    return failed == 0 ? 0 : 1;
}

// ==============================================================================
// eval
// ==============================================================================

struct EvalOptions {
    std::string gt;
    std::string pred;
    std::string label = "run";
    std::string out;
    double rho_min = 0.0;
    double rho_max = 0.15;
    int rho_steps = 150;
    bool grid = false;
    // grid-mode training budget
    std::string regressor = "gru_spl";
    int hidden = 64;
    int epochs = 12;
    int batch = 16;
    int window = 32;
    double lr = 0.0;
    int threads = 1;
    std::uint64_t seed = 0;
};

int run_eval_single(const EvalOptions& o) {
    if (o.pred.empty()) throw std::runtime_error("eval: --pred is required without --grid");
    std::vector<kp::SequenceRecord> recs;
    std::vector<std::string> pred_paths;
    if (fs::is_directory(o.gt)) {
        const Manifest m = read_manifest(o.gt);
        recs = load_split(o.gt, m.test);
        for (const auto& rel : m.test) {
            const std::string name = fs::path(rel).stem().string();
            pred_paths.push_back((fs::path(o.pred) / (name + ".jsonl")).string());
        }
    } else {
        recs.push_back(kp::load_record(o.gt));
        pred_paths.push_back(o.pred);
    }

    const kp::SkinnedModel model = model_for_id(recs.front().model_id);
    std::vector<std::vector<kp::PoseState>> preds, gts;
    std::vector<std::string> names;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        if (recs[i].gt.empty())
            throw std::runtime_error("eval: " + recs[i].name + " carries no ground truth");
        const auto stream = kp::load_pose_stream(pred_paths[i]);
        if (stream.size() != recs[i].frames.size())
            throw std::runtime_error("eval: " + recs[i].name + " has " +
                                     std::to_string(recs[i].frames.size()) + " frames, " +
                                     pred_paths[i] + " has " + std::to_string(stream.size()));
        std::vector<kp::PoseState> p;
        p.reserve(stream.size());
        for (const auto& [t, pose] : stream) p.push_back(pose);
        preds.push_back(std::move(p));
        gts.push_back(recs[i].gt);
        names.push_back(recs[i].name);
    }

    kp::RhoGrid grid{o.rho_min, o.rho_max, o.rho_steps};
    kp::MetricsReport report;
    report.grid = grid;
    report.runs.push_back(kp::evaluate_run(model, o.label, preds, gts, names, grid,
                                           {{"pred", o.pred}, {"gt", o.gt}}));
    std::cout << report.to_table();
    if (!o.out.empty()) {
        std::ofstream f(o.out);
        if (!f) throw std::runtime_error("eval: cannot write " + o.out);
        f << report.to_json().dump(2) << '\n';
    }
    return 0;
}

int run_eval_grid(const EvalOptions& o) {
    if (!fs::is_directory(o.gt))
        throw std::runtime_error("eval: --grid needs a dataset directory for --gt");
    const Manifest m = read_manifest(o.gt);
    const kp::SkinnedModel model = model_for_id(m.model_id);
    const auto train_recs = load_split(o.gt, m.train);
    const auto test_recs = load_split(o.gt, m.test);
    if (train_recs.empty() || test_recs.empty())
        throw std::runtime_error("eval: grid mode needs both train and test sequences");

    const kp::RegressorKind kind = kp::regressor_kind_from_string(o.regressor);
    if (kind == kp::RegressorKind::none)
        throw std::runtime_error("eval: grid regressor must be trainable");
    const auto configs = grid_configs(kind);
    const double lr = o.lr > 0 ? o.lr : 1e-4;

    std::vector<std::vector<kp::PoseState>> gts;
    std::vector<std::string> names;
    for (const auto& r : test_recs) {
        if (r.gt.empty())
            throw std::runtime_error("eval: " + r.name + " carries no ground truth");
        gts.push_back(r.gt);
        names.push_back(r.name);
    }

    std::vector<kp::RunMetrics> runs(configs.size());
    const kp::RhoGrid grid{o.rho_min, o.rho_max, o.rho_steps};
    parallel_for(configs.size(), o.threads, [&](std::size_t c) {
        const kp::ExtractorConfig& cfg = configs[c];
        std::vector<kp::RegressionSequence> seqs;
        seqs.reserve(train_recs.size());
        for (const auto& r : train_recs)
            seqs.push_back(kp::make_regression_sequence(model, r, cfg));

        kp::BodyNetConfig nc;
        nc.feature_dim = int(seqs.front().features.cols());
        nc.joint_count = model.joint_count();
        nc.joint_parent = model.topology.joint_parent;
        nc.hidden = o.hidden;
        nc.seed = mix_seed(o.seed, 0x9D1D + c);
        kp::Network net = kp::build_body_regressor(kind, nc);

        kp::Adam opt(lr);
        kp::TrainConfig tc;
        tc.epochs = o.epochs;
        tc.batch = o.batch;
        tc.window = o.window;
        tc.lr = lr;
        tc.residual = cfg.residual_output;
        tc.recurrent = kind != kp::RegressorKind::mlp;
        tc.seed = mix_seed(o.seed, 0x717D + c);
        kp::train_sequences(net, seqs, opt, tc);

        const kp::NetworkRegressor reg(std::move(net));
        std::vector<std::vector<kp::PoseState>> preds;
        preds.reserve(test_recs.size());
        for (const auto& r : test_recs) {
            kp::ExtractorState state;
            preds.push_back(kp::extract_sequence(r.frames, model, cfg, &reg, state, r.beta));
        }
        runs[c] = kp::evaluate_run(model, cfg.label(), preds, gts, names, grid, cfg.to_json());
    });

    kp::MetricsReport report;
    report.grid = grid;
    report.runs = std::move(runs);
    std::cout << report.to_table();
    if (!o.out.empty()) {
        std::ofstream f(o.out);
        if (!f) throw std::runtime_error("eval: cannot write " + o.out);
        f << report.to_json().dump(2) << '\n';
    }
    return 0;
}

int run_eval(const EvalOptions& o) { return o.grid ? run_eval_grid(o) : run_eval_single(o); }

// ==============================================================================
// bench
// ==============================================================================

struct BenchOptions {
    std::string input;
    std::string model;
    std::string out;
    int frames = 0;  // 0 = all
    int fit_frames = 30;
    int iterations = 200;
    int offline_iterations = 1000;
    int sweeps = 3;
    std::uint64_t seed = 0;
};

int run_bench(const BenchOptions& o) {
    kp::SequenceRecord rec = kp::load_record(o.input);
    if (o.frames > 0 && std::size_t(o.frames) < rec.frames.size()) {
        rec.frames.resize(std::size_t(o.frames));
        if (!rec.gt.empty()) rec.gt.resize(std::size_t(o.frames));
    }
    if (rec.frames.empty()) throw std::runtime_error("bench: stream has no frames");
    const kp::SkinnedModel model = model_for_id(rec.model_id);
    const Eigen::VectorXd beta = rec.beta;

    kp::ExtractorConfig cfg;
    std::unique_ptr<kp::NetworkRegressor> reg;
    if (!o.model.empty()) {
        auto [net, loaded_cfg] = load_body_checkpoint(o.model);
        cfg = loaded_cfg;
        reg = std::make_unique<kp::NetworkRegressor>(std::move(net));
    }

    // Stage pass: the extractor loop unrolled stage by stage, with the same
    // state updates extract_frame performs, plus the composer downstream.
    std::vector<double> t_heuristic, t_twists, t_network, t_procrustes, t_composer;
    {
        kp::ExtractorState state;
        kp::SmoothingConfig scfg;
        kp::PoseState initial = kp::default_pose(model);
        initial.shape = beta;
        kp::ComposerState cstate(initial);
        for (const auto& frame : rec.frames) {
            auto t0 = Clock::now();
            kp::Rot3 global;
            try {
                global = kp::estimate_global_rotation(frame, model);
            } catch (const std::exception&) {
                if (!state.has_last) throw;
                global = state.last.global.rotation;
            }
            kp::PoseState pose = kp::bending_heuristic(frame, model, global, beta);
            t_heuristic.push_back(to_ms(Clock::now() - t0));

            if (reg) {
                t0 = Clock::now();
                const kp::ResidualFeatures rf = kp::compute_twists(frame, model, pose);
                const Eigen::VectorXd x =
                    kp::assemble_features(cfg, rf, frame, pose.shape, model.topology);
                t_twists.push_back(to_ms(Clock::now() - t0));

                t0 = Clock::now();
                const Eigen::VectorXd raw = reg->forward(x, state);
                kp::PoseState refined = pose;
                for (int j = 0; j < model.joint_count(); ++j) {
                    const kp::Rot3 delta =
                        kp::rot_from_6d(raw.segment<3>(6 * j), raw.segment<3>(6 * j + 3));
                    refined.body_pose[std::size_t(j)] =
                        cfg.residual_output ? kp::Rot3(pose.body_pose[std::size_t(j)] * delta)
                                            : delta;
                }
                pose = refined;
                t_network.push_back(to_ms(Clock::now() - t0));
            }

            t0 = Clock::now();
            pose = kp::procrustes_refine(frame, model, pose);
            t_procrustes.push_back(to_ms(Clock::now() - t0));
            state.last = pose;
            state.has_last = true;

            t0 = Clock::now();
            kp::ChannelStreams one;
            one.body.push_back({frame.timestamp, pose.body_pose, pose.global});
            kp::compose_frame(one, frame.timestamp, scfg, cstate);
            t_composer.push_back(to_ms(Clock::now() - t0));
        }
    }

    // Full pass: the shipped per-frame path, timed as a whole.
    std::vector<double> t_frame;
    double total_seconds = 0.0;
    {
        kp::ExtractorState state;
        kp::SmoothingConfig scfg;
        kp::PoseState initial = kp::default_pose(model);
        initial.shape = beta;
        kp::ComposerState cstate(initial);
        const auto start = Clock::now();
        for (const auto& frame : rec.frames) {
            const auto t0 = Clock::now();
            kp::PoseState pose = kp::extract_frame(frame, model, cfg, reg.get(), state, beta);
            kp::ChannelStreams one;
            one.body.push_back({frame.timestamp, pose.body_pose, pose.global});
            kp::compose_frame(one, frame.timestamp, scfg, cstate);
            t_frame.push_back(to_ms(Clock::now() - t0));
        }
        total_seconds = std::chrono::duration<double>(Clock::now() - start).count();
    }
    const double fps = double(rec.frames.size()) / total_seconds;

    const int nfit = std::min<int>(o.fit_frames, int(rec.frames.size()));
    std::vector<kp::LandmarkFrame> fit_frames(rec.frames.begin(), rec.frames.begin() + nfit);
    kp::FitConfig fcfg;
    fcfg.max_iterations = o.iterations;
    fcfg.offline_iterations = o.offline_iterations;
    fcfg.sweeps = o.sweeps;
    const kp::FitResult online = kp::fit_sequence(fit_frames, model, beta, fcfg, kp::FitMode::online);
    const kp::FitResult offline =
        kp::fit_sequence(fit_frames, model, beta, fcfg, kp::FitMode::offline);
    const double online_ms = 1e3 * online.wall_seconds / double(nfit);
    const double offline_ms = 1e3 * offline.wall_seconds / double(nfit);

    auto stage_json = [](const std::vector<double>& v) {
        return json{{"mean_ms", mean_of(v)},
                    {"p50_ms", percentile(v, 0.50)},
                    {"p95_ms", percentile(v, 0.95)}};
    };
    const double stage_sum = mean_of(t_heuristic) + mean_of(t_twists) + mean_of(t_network) +
                             mean_of(t_procrustes) + mean_of(t_composer);
    json j;
    j["magic"] = "KPBENCH1";
    j["version"] = 1;
    j["frames"] = rec.frames.size();
    j["config"] = cfg.to_json();
    j["stages"] = {{"heuristic", stage_json(t_heuristic)},
                   {"twists", stage_json(t_twists)},
                   {"network", stage_json(t_network)},
                   {"procrustes", stage_json(t_procrustes)},
                   {"composer", stage_json(t_composer)}};
    j["stage_sum_mean_ms"] = stage_sum;
    j["frame_mean_ms"] = mean_of(t_frame);
    j["frame_p50_ms"] = percentile(t_frame, 0.50);
    j["frame_p95_ms"] = percentile(t_frame, 0.95);
    j["fps"] = fps;
    j["fit"] = {{"frames", nfit},
                {"online_ms_per_frame", online_ms},
                {"online_fps", 1e3 / online_ms},
                {"offline_ms_per_frame", offline_ms},
                {"offline_fps", 1e3 / offline_ms}};
    j["speedup_vs_online"] = online_ms / mean_of(t_frame);
    j["speedup_vs_offline"] = offline_ms / mean_of(t_frame);

    if (!o.out.empty()) {
        std::ofstream f(o.out);
        if (!f) throw std::runtime_error("bench: cannot write " + o.out);
        f << j.dump(2) << '\n';
    } else {
        std::cout << j.dump(2) << '\n';
    }
    std::cerr << "bench: " << rec.frames.size() << " frames  p95 " << std::fixed
              << std::setprecision(3) << percentile(t_frame, 0.95) << " ms  " << std::setprecision(1)
              << fps << " fps  " << std::setprecision(1) << j["speedup_vs_online"].get<double>()
              << "x online fit  " << j["speedup_vs_offline"].get<double>() << "x offline fit\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"landmark-stream pose pipeline"};
    app.require_subcommand(1);
    app.set_config("--config", "", "read defaults from a config file (flags win)");
    app.allow_config_extras(CLI::config_extras_mode::error);

    GenerateOptions gen;
    auto* cg = app.add_subcommand("generate", "write a synthetic landmark dataset");
    cg->add_option("--out", gen.out, "dataset directory")->required();
    cg->add_option("--sequences", gen.sequences, "number of sequences");
    cg->add_option("--frames", gen.frames, "frames per sequence");
    cg->add_option("--rate", gen.rate, "sample rate, Hz");
    cg->add_option("--noise", gen.noise, "landmark position sigma, meters");
    cg->add_option("--dropout", gen.dropout, "per-landmark dropout probability");
    cg->add_option("--time-jitter", gen.time_jitter, "timestamp jitter, seconds");
    cg->add_option("--test-frac", gen.test_frac, "fraction of sequences held out as test");
    cg->add_option("--joint-limit", gen.joint_limit, "per-joint motion amplitude, radians");
    cg->add_option("--seed", gen.seed, "RNG seed");
    cg->add_option("--threads", gen.threads, "worker threads");

    TrainOptions tr;
    auto* ct = app.add_subcommand("train", "train a pose regressor or the face network");
    ct->add_option("--data", tr.data, "dataset directory (body target)");
    ct->add_option("--out", tr.out, "checkpoint path")->required();
    ct->add_option("--target", tr.target, "body | face");
    ct->add_option("--regressor", tr.regressor, "mlp | gru | gru_spl");
    ct->add_option("--resume", tr.resume, "checkpoint to continue from");
    ct->add_option("--hidden", tr.hidden, "hidden width");
    ct->add_flag("--paper-scale", tr.paper_scale, "full-size network variant");
    ct->add_option("--epochs", tr.epochs, "training epochs");
    ct->add_option("--batch", tr.batch, "batch size");
    ct->add_option("--window", tr.window, "truncated-BPTT window");
    ct->add_option("--lr", tr.lr, "learning rate (0 = task default)");
    ct->add_option("--val-frac", tr.val_frac, "held-out fraction of training sequences");
    ct->add_option("--seed", tr.seed, "RNG seed");
    ct->add_flag("--use-keypoints,!--no-keypoints", tr.use_keypoints, "feed raw keypoints");
    ct->add_flag("--use-shape,!--no-shape", tr.use_shape, "feed shape coefficients");
    ct->add_flag("--use-init,!--no-init", tr.use_init, "feed initialization rotations");
    ct->add_flag("--use-twists,!--no-twists", tr.use_twists, "feed twist features");
    ct->add_flag("--residual,!--no-residual", tr.residual, "predict residual rotations");
    ct->add_option("--expression-dim", tr.expression_dim, "face: expression coefficients");
    ct->add_option("--face-samples", tr.face_samples, "face: training samples");
    ct->add_option("--face-val", tr.face_val, "face: held-out samples");
    ct->add_option("--face-noise", tr.face_noise, "face: landmark noise sigma");
    ct->add_flag("--use-z,!--no-z", tr.use_z, "face: feed the depth channel");
    ct->add_option("--mouth-weight", tr.mouth_weight, "face: mouth keypoint loss weight");
    ct->add_option("--lambda-keypoints", tr.lambda_keypoints, "face: keypoint loss weight");

    ExtractOptions ex;
    auto* ce = app.add_subcommand("extract", "run the extractor over a landmark stream");
    ce->add_option("--input", ex.input, "stream file, or - for stdin")->required();
    ce->add_option("--output", ex.output, "pose stream file, or - for stdout");
    ce->add_option("--model", ex.model, "regressor checkpoint");
    ce->add_option("--regressor", ex.regressor, "auto | none (none = heuristic only)");
    ce->add_flag("--smooth", ex.smooth, "temporal smoothing on the output");
    ce->add_option("--alpha-rotation", ex.alpha_rotation, "rotation smoothing weight");
    ce->add_option("--alpha-expression", ex.alpha_expression, "expression smoothing weight");
    ce->add_option("--staleness", ex.staleness, "channel staleness window, seconds");
    ce->add_option("--seed", ex.seed, "RNG seed (interface uniformity; unused)");

    FitOptions ft;
    auto* cf = app.add_subcommand("fit", "optimization-based fitting");
    cf->add_option("--input", ft.input, "stream file or dataset directory")->required();
    cf->add_option("--output", ft.output, "pose stream file or output directory")->required();
    cf->add_option("--mode", ft.mode, "online | offline");
    cf->add_option("--prior-data", ft.prior_data, "dataset to estimate the pose prior from");
    cf->add_option("--report", ft.report, "write a JSON summary here");
    cf->add_option("--lambda-data", ft.lambda_data, "data term weight");
    cf->add_option("--lambda-prior", ft.lambda_prior, "prior term weight");
    cf->add_option("--lambda-temporal", ft.lambda_temporal, "temporal term weight");
    cf->add_option("--delta", ft.delta, "robust loss scale, meters");
    cf->add_option("--lr", ft.learning_rate, "optimizer step size");
    cf->add_option("--iterations", ft.iterations, "per-frame iteration cap");
    cf->add_option("--offline-iterations", ft.offline_iterations, "offline iteration budget");
    cf->add_option("--sweeps", ft.sweeps, "offline refinement sweeps");
    cf->add_option("--threads", ft.threads, "worker threads (directory mode)");
    cf->add_option("--seed", ft.seed, "RNG seed (interface uniformity; unused)");

    EvalOptions ev;
    auto* cv = app.add_subcommand("eval", "metrics report");
    cv->add_option("--gt", ev.gt, "ground-truth stream file or dataset directory")->required();
    cv->add_option("--pred", ev.pred, "pose stream file or directory");
    cv->add_option("--label", ev.label, "run label in the report");
    cv->add_option("--out", ev.out, "write the JSON report here");
    cv->add_option("--rho-min", ev.rho_min, "PCK threshold sweep start, meters");
    cv->add_option("--rho-max", ev.rho_max, "PCK threshold sweep end, meters");
    cv->add_option("--rho-steps", ev.rho_steps, "PCK threshold count");
    cv->add_flag("--grid", ev.grid, "train and score the standard ablation grid");
    cv->add_option("--regressor", ev.regressor, "grid: regressor kind");
    cv->add_option("--hidden", ev.hidden, "grid: hidden width");
    cv->add_option("--epochs", ev.epochs, "grid: training epochs");
    cv->add_option("--batch", ev.batch, "grid: batch size");
    cv->add_option("--window", ev.window, "grid: truncated-BPTT window");
    cv->add_option("--lr", ev.lr, "grid: learning rate (0 = default)");
    cv->add_option("--threads", ev.threads, "grid: configs trained in parallel");
    cv->add_option("--seed", ev.seed, "RNG seed");

    BenchOptions bn;
    auto* cb = app.add_subcommand("bench", "stage latencies and throughput");
    cb->add_option("--input", bn.input, "stream file")->required();
    cb->add_option("--model", bn.model, "regressor checkpoint");
    cb->add_option("--out", bn.out, "write the JSON report here (default stdout)");
    cb->add_option("--frames", bn.frames, "frame cap (0 = all)");
    cb->add_option("--fit-frames", bn.fit_frames, "frames for the fit speed comparison");
    cb->add_option("--iterations", bn.iterations, "online fit iteration cap");
    cb->add_option("--offline-iterations", bn.offline_iterations, "offline fit budget");
    cb->add_option("--sweeps", bn.sweeps, "offline fit sweeps");
    cb->add_option("--seed", bn.seed, "RNG seed (interface uniformity; unused)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cg->parsed()) return run_generate(gen);
        if (ct->parsed()) return run_train(tr);
        if (ce->parsed()) return run_extract(ex);
        if (cf->parsed()) return run_fit(ft);
        if (cv->parsed()) return run_eval(ev);
        if (cb->parsed()) return run_bench(bn);
    } catch (const std::exception& e) {
        std::cerr << "kinepose: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
