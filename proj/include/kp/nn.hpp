#pragma once

// Small self-contained neural framework: the layer set needed by the pose
// and face regressors (linear, batchnorm1d, relu, dropout, GRU cell,
// structured prediction layer), l1 rotation loss, Adam, finite-difference
// gradient checking, truncated-BPTT sequence training, and KPMDL1-container
// checkpoints. Float64 throughout training; batches are row-major
// (rows = samples).

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <kp/container.hpp>
#include <kp/extractor.hpp>
#include <kp/random.hpp>
#include <kp/rotmath.hpp>
#include <kp/synth.hpp>

namespace kp {

struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;  // row-major

    static Tensor from_matrix(const Eigen::MatrixXd& m) {
        Tensor t;
        t.shape = {int(m.rows()), int(m.cols())};
        t.data.resize(std::size_t(m.size()));
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                t.data[std::size_t(r * m.cols() + c)] = m(r, c);
        return t;
    }

    Eigen::MatrixXd to_matrix() const {
        if (shape.size() != 2) throw std::invalid_argument("tensor: expected rank 2");
        const std::size_t want = std::size_t(shape[0]) * std::size_t(shape[1]);
        if (data.size() != want) throw std::invalid_argument("tensor: shape/data mismatch");
        Eigen::MatrixXd m(shape[0], shape[1]);
        for (Eigen::Index r = 0; r < m.rows(); ++r)
            for (Eigen::Index c = 0; c < m.cols(); ++c)
                m(r, c) = data[std::size_t(r * m.cols() + c)];
        return m;
    }
};

struct ParamRef {
    std::string name;
    Eigen::MatrixXd* value = nullptr;
    Eigen::MatrixXd* grad = nullptr;  // null for non-trainable buffers
};

namespace detail {

inline Eigen::MatrixXd xavier(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
    const double limit = std::sqrt(6.0 / double(rows + cols));
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-limit, limit);
    return m;
}

inline Eigen::MatrixXd uniform_init(Eigen::Index rows, Eigen::Index cols, double limit,
                                    Rng& rng) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.uniform(-limit, limit);
    return m;
}

} // namespace detail

class Layer {
public:
    virtual ~Layer() = default;
    virtual std::string kind() const = 0;
    virtual int in_dim() const = 0;
    virtual int out_dim() const = 0;
    virtual Eigen::MatrixXd forward(const Eigen::MatrixXd& x, bool training, Rng* rng) = 0;
    virtual Eigen::MatrixXd backward(const Eigen::MatrixXd& dy) = 0;
    virtual std::vector<ParamRef> params(const std::string& prefix) = 0;
    virtual void reset_state() {}
    virtual nlohmann::json arch() const = 0;
};

class Linear : public Layer {
public:
    Linear(int in, int out, Rng& rng)
        : w_(detail::xavier(out, in, rng)), b_(Eigen::MatrixXd::Zero(out, 1)),
          gw_(Eigen::MatrixXd::Zero(out, in)), gb_(Eigen::MatrixXd::Zero(out, 1)) {}

    std::string kind() const override { return "linear"; }
    int in_dim() const override { return int(w_.cols()); }
    int out_dim() const override { return int(w_.rows()); }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, bool training, Rng*) override {
        if (training) cache_.push_back(x);
        Eigen::MatrixXd y = x * w_.transpose();
        y.rowwise() += b_.col(0).transpose();
        return y;
    }

    Eigen::MatrixXd backward(const Eigen::MatrixXd& dy) override {
        const Eigen::MatrixXd x = pop(cache_);
        gw_ += dy.transpose() * x;
        gb_.col(0) += dy.colwise().sum().transpose();
        return dy * w_;
    }

    std::vector<ParamRef> params(const std::string& p) override {
        return {{p + ".weight", &w_, &gw_}, {p + ".bias", &b_, &gb_}};
    }

    void reset_state() override { cache_.clear(); }
    nlohmann::json arch() const override {
        return {{"kind", "linear"}, {"in", in_dim()}, {"out", out_dim()}};
    }

private:
    template <typename V>
    static typename V::value_type pop(V& v) {
        if (v.empty()) throw std::logic_error("layer: backward without forward");
        auto x = std::move(v.back());
        v.pop_back();
        return x;
    }

    Eigen::MatrixXd w_, b_, gw_, gb_;
    std::vector<Eigen::MatrixXd> cache_;
};

class Relu : public Layer {
public:
    explicit Relu(int dim) : dim_(dim) {}
    std::string kind() const override { return "relu"; }
    int in_dim() const override { return dim_; }
    int out_dim() const override { return dim_; }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, bool training, Rng*) override {
        Eigen::MatrixXd y = x.cwiseMax(0.0);
        if (training) mask_.push_back((x.array() > 0.0).cast<double>().matrix());
        return y;
    }

    Eigen::MatrixXd backward(const Eigen::MatrixXd& dy) override {
        if (mask_.empty()) throw std::logic_error("relu: backward without forward");
        Eigen::MatrixXd dx = dy.cwiseProduct(mask_.back());
        mask_.pop_back();
        return dx;
    }

    std::vector<ParamRef> params(const std::string&) override { return {}; }
    void reset_state() override { mask_.clear(); }
    nlohmann::json arch() const override { return {{"kind", "relu"}, {"dim", dim_}}; }

private:
    int dim_;
    std::vector<Eigen::MatrixXd> mask_;
};

/// Inverted dropout: active only in training mode, identity in inference.
class Dropout : public Layer {
public:
    Dropout(int dim, double rate) : dim_(dim), rate_(rate) {
        if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate out of range");
    }
    std::string kind() const override { return "dropout"; }
    int in_dim() const override { return dim_; }
    int out_dim() const override { return dim_; }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, bool training, Rng* rng) override {
        if (!training) return x;
        if (!rng) throw std::invalid_argument("dropout: training forward needs an rng");
        Eigen::MatrixXd mask(x.rows(), x.cols());
        const double scale = 1.0 / (1.0 - rate_);
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            for (Eigen::Index c = 0; c < x.cols(); ++c)
                mask(r, c) = rng->uniform() >= rate_ ? scale : 0.0;
        mask_.push_back(mask);
        return x.cwiseProduct(mask);
    }

    Eigen::MatrixXd backward(const Eigen::MatrixXd& dy) override {
        if (mask_.empty()) throw std::logic_error("dropout: backward without forward");
        Eigen::MatrixXd dx = dy.cwiseProduct(mask_.back());
        mask_.pop_back();
        return dx;
    }

    std::vector<ParamRef> params(const std::string&) override { return {}; }
    void reset_state() override { mask_.clear(); }
    nlohmann::json arch() const override {
        return {{"kind", "dropout"}, {"dim", dim_}, {"rate", rate_}};
    }

private:
    int dim_;
    double rate_;
    std::vector<Eigen::MatrixXd> mask_;
};

/// Batch statistics in training mode, running statistics in inference.
/// Running variance keeps the biased estimator so both paths use the same
/// normalizer.
class BatchNorm1d : public Layer {
public:
    BatchNorm1d(int dim, double momentum = 0.1, double eps = 1e-5)
        : dim_(dim), momentum_(momentum), eps_(eps),
          gamma_(Eigen::MatrixXd::Ones(dim, 1)), beta_(Eigen::MatrixXd::Zero(dim, 1)),
          ggamma_(Eigen::MatrixXd::Zero(dim, 1)), gbeta_(Eigen::MatrixXd::Zero(dim, 1)),
          running_mean_(Eigen::MatrixXd::Zero(dim, 1)),
          running_var_(Eigen::MatrixXd::Ones(dim, 1)) {}

    std::string kind() const override { return "batchnorm1d"; }
    int in_dim() const override { return dim_; }
    int out_dim() const override { return dim_; }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, bool training, Rng*) override {
        if (!training) {
            Eigen::MatrixXd y(x.rows(), x.cols());
            for (Eigen::Index c = 0; c < x.cols(); ++c) {
                const double inv = 1.0 / std::sqrt(running_var_(c, 0) + eps_);
                y.col(c) = ((x.col(c).array() - running_mean_(c, 0)) * inv * gamma_(c, 0) +
                            beta_(c, 0))
                               .matrix();
            }
            return y;
        }
        const double B = double(x.rows());
        Cache c;
        c.mean.resize(dim_, 1);
        c.var.resize(dim_, 1);
        c.invstd.resize(dim_, 1);
        c.xhat.resize(x.rows(), x.cols());
        Eigen::MatrixXd y(x.rows(), x.cols());
        for (Eigen::Index col = 0; col < x.cols(); ++col) {
            c.mean(col, 0) = x.col(col).mean();
            const Eigen::VectorXd centered =
                (x.col(col).array() - c.mean(col, 0)).matrix();
            c.var(col, 0) = centered.squaredNorm() / B;
            c.invstd(col, 0) = 1.0 / std::sqrt(c.var(col, 0) + eps_);
            c.xhat.col(col) = centered * c.invstd(col, 0);
            y.col(col) = (c.xhat.col(col).array() * gamma_(col, 0) + beta_(col, 0)).matrix();
        }
        running_mean_ = (1.0 - momentum_) * running_mean_ + momentum_ * c.mean;
        running_var_ = (1.0 - momentum_) * running_var_ + momentum_ * c.var;
        cache_.push_back(std::move(c));
        return y;
    }

    Eigen::MatrixXd backward(const Eigen::MatrixXd& dy) override {
        if (cache_.empty()) throw std::logic_error("batchnorm: backward without forward");
        const Cache c = std::move(cache_.back());
        cache_.pop_back();
        const double B = double(dy.rows());
        Eigen::MatrixXd dx(dy.rows(), dy.cols());
        for (Eigen::Index col = 0; col < dy.cols(); ++col) {
            ggamma_(col, 0) += dy.col(col).dot(c.xhat.col(col));
            gbeta_(col, 0) += dy.col(col).sum();
            const Eigen::VectorXd dxhat = dy.col(col) * gamma_(col, 0);
            const double sum_dxhat = dxhat.sum();
            const double sum_dxhat_xhat = dxhat.dot(c.xhat.col(col));
            dx.col(col) = ((c.invstd(col, 0) / B) *
                           (B * dxhat.array() - sum_dxhat -
                            c.xhat.col(col).array() * sum_dxhat_xhat))
                              .matrix();
        }
        return dx;
    }

    std::vector<ParamRef> params(const std::string& p) override {
        return {{p + ".gamma", &gamma_, &ggamma_},
                {p + ".beta", &beta_, &gbeta_},
                {p + ".running_mean", &running_mean_, nullptr},
                {p + ".running_var", &running_var_, nullptr}};
    }

    void reset_state() override { cache_.clear(); }
    nlohmann::json arch() const override {
        return {{"kind", "batchnorm1d"}, {"dim", dim_}, {"momentum", momentum_}, {"eps", eps_}};
    }

private:
    struct Cache {
        Eigen::MatrixXd mean, var, invstd, xhat;
    };

    int dim_;
    double momentum_, eps_;
    Eigen::MatrixXd gamma_, beta_, ggamma_, gbeta_, running_mean_, running_var_;
    std::vector<Cache> cache_;
};

/// Single GRU cell stepped once per forward call; gate order (r, z, n).
/// Training forwards push per-step caches that backward pops in reverse,
/// which yields truncated BPTT over however many steps were pushed.
class GruCell : public Layer {
public:
    GruCell(int in, int hidden, Rng& rng)
        : in_(in), hidden_(hidden),
          w_ih_(detail::uniform_init(3 * hidden, in, 1.0 / std::sqrt(double(hidden)), rng)),
          w_hh_(detail::uniform_init(3 * hidden, hidden, 1.0 / std::sqrt(double(hidden)), rng)),
          b_ih_(Eigen::MatrixXd::Zero(3 * hidden, 1)),
          b_hh_(Eigen::MatrixXd::Zero(3 * hidden, 1)),
          gw_ih_(Eigen::MatrixXd::Zero(3 * hidden, in)),
          gw_hh_(Eigen::MatrixXd::Zero(3 * hidden, hidden)),
          gb_ih_(Eigen::MatrixXd::Zero(3 * hidden, 1)),
          gb_hh_(Eigen::MatrixXd::Zero(3 * hidden, 1)) {}

    std::string kind() const override { return "gru"; }
    int in_dim() const override { return in_; }
    int out_dim() const override { return hidden_; }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, bool training, Rng*) override {
        const Eigen::Index B = x.rows();
        if (h_.rows() != B) h_ = Eigen::MatrixXd::Zero(B, hidden_);
        if (training && cache_.empty()) dh_carry_ = Eigen::MatrixXd::Zero(B, hidden_);

        Eigen::MatrixXd gi = x * w_ih_.transpose();
        gi.rowwise() += b_ih_.col(0).transpose();
        Eigen::MatrixXd gh = h_ * w_hh_.transpose();
        gh.rowwise() += b_hh_.col(0).transpose();

        Cache c;
        c.x = x;
        c.h_prev = h_;
        c.r = sigmoid(gi.middleCols(0, hidden_) + gh.middleCols(0, hidden_));
        c.z = sigmoid(gi.middleCols(hidden_, hidden_) + gh.middleCols(hidden_, hidden_));
        c.hn_aff = gh.middleCols(2 * hidden_, hidden_);
        c.n = (gi.middleCols(2 * hidden_, hidden_) + c.r.cwiseProduct(c.hn_aff))
                  .array()
                  .tanh()
                  .matrix();
        h_ = ((1.0 - c.z.array()) * c.n.array() + c.z.array() * c.h_prev.array()).matrix();
        if (training) cache_.push_back(std::move(c));
        return h_;
    }

    Eigen::MatrixXd backward(const Eigen::MatrixXd& dy) override {
        if (cache_.empty()) throw std::logic_error("gru: backward without forward");
        const Cache c = std::move(cache_.back());
        cache_.pop_back();

        Eigen::MatrixXd dhp = dy;
        if (dh_carry_.rows() == dy.rows()) dhp += dh_carry_;

        const Eigen::MatrixXd dz = dhp.cwiseProduct(c.h_prev - c.n);
        const Eigen::MatrixXd dn = (dhp.array() * (1.0 - c.z.array())).matrix();
        Eigen::MatrixXd dh = dhp.cwiseProduct(c.z);
        const Eigen::MatrixXd dn_pre = (dn.array() * (1.0 - c.n.array().square())).matrix();
        const Eigen::MatrixXd d_hn_aff = dn_pre.cwiseProduct(c.r);
        const Eigen::MatrixXd dr = dn_pre.cwiseProduct(c.hn_aff);
        const Eigen::MatrixXd dr_pre =
            (dr.array() * c.r.array() * (1.0 - c.r.array())).matrix();
        const Eigen::MatrixXd dz_pre =
            (dz.array() * c.z.array() * (1.0 - c.z.array())).matrix();

        Eigen::MatrixXd g_i(dy.rows(), 3 * hidden_), g_h(dy.rows(), 3 * hidden_);
        g_i << dr_pre, dz_pre, dn_pre;
        g_h << dr_pre, dz_pre, d_hn_aff;

        gw_ih_ += g_i.transpose() * c.x;
        gw_hh_ += g_h.transpose() * c.h_prev;
        gb_ih_.col(0) += g_i.colwise().sum().transpose();
        gb_hh_.col(0) += g_h.colwise().sum().transpose();

        dh += g_h * w_hh_;
        dh_carry_ = dh;
        return g_i * w_ih_;
    }

    std::vector<ParamRef> params(const std::string& p) override {
        return {{p + ".w_ih", &w_ih_, &gw_ih_},
                {p + ".w_hh", &w_hh_, &gw_hh_},
                {p + ".b_ih", &b_ih_, &gb_ih_},
                {p + ".b_hh", &b_hh_, &gb_hh_}};
    }

    void reset_state() override {
        h_.resize(0, 0);
        dh_carry_.resize(0, 0);
        cache_.clear();
    }

    nlohmann::json arch() const override {
        return {{"kind", "gru"}, {"in", in_}, {"hidden", hidden_}};
    }

    Eigen::MatrixXd hidden_state() const { return h_; }
    void set_hidden_state(const Eigen::MatrixXd& h) { h_ = h; }

private:
    static Eigen::MatrixXd sigmoid(const Eigen::MatrixXd& x) {
        return (1.0 / (1.0 + (-x.array()).exp())).matrix();
    }

    struct Cache {
        Eigen::MatrixXd x, h_prev, r, z, n, hn_aff;
    };

    int in_, hidden_;
    Eigen::MatrixXd w_ih_, w_hh_, b_ih_, b_hh_;
    Eigen::MatrixXd gw_ih_, gw_hh_, gb_ih_, gb_hh_;
    Eigen::MatrixXd h_, dh_carry_;
    std::vector<Cache> cache_;
};

/// Structured prediction layer, dense variant: joints are processed in
/// topological order and joint j's two-layer head sees the incoming hidden
/// vector concatenated with the predictions of all its ancestors.
class Spl : public Layer {
public:
    Spl(int hidden_in, std::vector<int> parents, int unit, int out_per_joint, Rng& rng)
        : hidden_in_(hidden_in), unit_(unit), out_per_(out_per_joint),
          parents_(std::move(parents)) {
        const int J = int(parents_.size());
        ancestors_.resize(std::size_t(J));
        for (int j = 0; j < J; ++j) {
            const int p = parents_[std::size_t(j)];
            if (p >= j) throw std::invalid_argument("spl: topology is not in topological order");
            if (p >= 0) {
                ancestors_[std::size_t(j)] = ancestors_[std::size_t(p)];
                ancestors_[std::size_t(j)].push_back(p);
            }
        }
        for (int j = 0; j < J; ++j) {
            const int in = hidden_in_ + out_per_ * int(ancestors_[std::size_t(j)].size());
            Head h;
            h.w1 = detail::xavier(unit_, in, rng);
            h.b1 = Eigen::MatrixXd::Zero(unit_, 1);
            h.w2 = detail::xavier(out_per_, unit_, rng);
            h.b2 = Eigen::MatrixXd::Zero(out_per_, 1);
            h.gw1 = Eigen::MatrixXd::Zero(unit_, in);
            h.gb1 = Eigen::MatrixXd::Zero(unit_, 1);
            h.gw2 = Eigen::MatrixXd::Zero(out_per_, unit_);
            h.gb2 = Eigen::MatrixXd::Zero(out_per_, 1);
            heads_.push_back(std::move(h));
        }
    }

    std::string kind() const override { return "spl"; }
    int in_dim() const override { return hidden_in_; }
    int out_dim() const override { return out_per_ * int(parents_.size()); }

    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, bool training, Rng*) override {
        const Eigen::Index B = x.rows();
        const int J = int(parents_.size());
        Cache c;
        c.x = x;
        c.in.resize(std::size_t(J));
        c.a1.resize(std::size_t(J));
        std::vector<Eigen::MatrixXd> preds(static_cast<std::size_t>(J));
        Eigen::MatrixXd out(B, out_dim());
        for (int j = 0; j < J; ++j) {
            const auto& anc = ancestors_[std::size_t(j)];
            Eigen::MatrixXd in(B, hidden_in_ + out_per_ * int(anc.size()));
            in.leftCols(hidden_in_) = x;
            for (std::size_t i = 0; i < anc.size(); ++i)
                in.middleCols(hidden_in_ + out_per_ * int(i), out_per_) =
                    preds[std::size_t(anc[i])];
            const Head& h = heads_[std::size_t(j)];
            Eigen::MatrixXd z1 = in * h.w1.transpose();
            z1.rowwise() += h.b1.col(0).transpose();
            Eigen::MatrixXd a1 = z1.cwiseMax(0.0);
            Eigen::MatrixXd y = a1 * h.w2.transpose();
            y.rowwise() += h.b2.col(0).transpose();
            preds[std::size_t(j)] = y;
            out.middleCols(out_per_ * j, out_per_) = y;
            if (training) {
                c.in[std::size_t(j)] = std::move(in);
                c.a1[std::size_t(j)] = std::move(a1);
            }
        }
        if (training) cache_.push_back(std::move(c));
        return out;
    }

    Eigen::MatrixXd backward(const Eigen::MatrixXd& dy) override {
        if (cache_.empty()) throw std::logic_error("spl: backward without forward");
        const Cache c = std::move(cache_.back());
        cache_.pop_back();
        const int J = int(parents_.size());
        std::vector<Eigen::MatrixXd> dpred(static_cast<std::size_t>(J));
        for (int j = 0; j < J; ++j) dpred[std::size_t(j)] = dy.middleCols(out_per_ * j, out_per_);
        Eigen::MatrixXd dx = Eigen::MatrixXd::Zero(dy.rows(), hidden_in_);
        for (int j = J - 1; j >= 0; --j) {
            Head& h = heads_[std::size_t(j)];
            const Eigen::MatrixXd& dout = dpred[std::size_t(j)];
            const Eigen::MatrixXd& a1 = c.a1[std::size_t(j)];
            h.gw2 += dout.transpose() * a1;
            h.gb2.col(0) += dout.colwise().sum().transpose();
            Eigen::MatrixXd da1 = dout * h.w2;
            Eigen::MatrixXd dz1 = da1.cwiseProduct((a1.array() > 0.0).cast<double>().matrix());
            h.gw1 += dz1.transpose() * c.in[std::size_t(j)];
            h.gb1.col(0) += dz1.colwise().sum().transpose();
            const Eigen::MatrixXd din = dz1 * h.w1;
            dx += din.leftCols(hidden_in_);
            const auto& anc = ancestors_[std::size_t(j)];
            for (std::size_t i = 0; i < anc.size(); ++i)
                dpred[std::size_t(anc[i])] +=
                    din.middleCols(hidden_in_ + out_per_ * int(i), out_per_);
        }
        return dx;
    }

    std::vector<ParamRef> params(const std::string& p) override {
        std::vector<ParamRef> out;
        for (std::size_t j = 0; j < heads_.size(); ++j) {
            const std::string q = p + ".j" + std::to_string(j);
            Head& h = heads_[j];
            out.push_back({q + ".w1", &h.w1, &h.gw1});
            out.push_back({q + ".b1", &h.b1, &h.gb1});
            out.push_back({q + ".w2", &h.w2, &h.gw2});
            out.push_back({q + ".b2", &h.b2, &h.gb2});
        }
        return out;
    }

    void reset_state() override { cache_.clear(); }

    nlohmann::json arch() const override {
        return {{"kind", "spl"},
                {"hidden_in", hidden_in_},
                {"unit", unit_},
                {"out_per_joint", out_per_},
                {"parents", parents_}};
    }

    const std::vector<std::vector<int>>& ancestors() const { return ancestors_; }

private:
    struct Head {
        Eigen::MatrixXd w1, b1, w2, b2, gw1, gb1, gw2, gb2;
    };
    struct Cache {
        Eigen::MatrixXd x;
        std::vector<Eigen::MatrixXd> in, a1;
    };

    int hidden_in_, unit_, out_per_;
    std::vector<int> parents_;
    std::vector<std::vector<int>> ancestors_;
    std::vector<Head> heads_;
    std::vector<Cache> cache_;
};

class Network {
public:
    std::vector<std::unique_ptr<Layer>> layers;
    bool training = false;
    nlohmann::json meta;

    int in_dim() const { return layers.empty() ? 0 : layers.front()->in_dim(); }
    int out_dim() const { return layers.empty() ? 0 : layers.back()->out_dim(); }

    Eigen::MatrixXd forward(Eigen::MatrixXd x) {
        for (auto& l : layers) x = l->forward(x, training, &rng_);
        return x;
    }

    Eigen::MatrixXd backward(Eigen::MatrixXd dy) {
        for (auto it = layers.rbegin(); it != layers.rend(); ++it) dy = (*it)->backward(dy);
        return dy;
    }

    std::vector<ParamRef> params() {
        std::vector<ParamRef> out;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            auto ps = layers[i]->params("l" + std::to_string(i) + "." + layers[i]->kind());
            out.insert(out.end(), ps.begin(), ps.end());
        }
        return out;
    }

    void zero_grads() {
        for (auto& p : params())
            if (p.grad) p.grad->setZero();
    }

    void reset_state() {
        for (auto& l : layers) l->reset_state();
    }

    /// Deterministic pass setup: clears recurrent state and per-step caches
    /// and reseeds the dropout stream so repeated passes are bit-identical.
    void prepare(std::uint64_t seed) {
        reset_state();
        rng_ = Rng(seed);
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto& p : params())
            if (p.grad) n += std::size_t(p.value->size());
        return n;
    }

    nlohmann::json arch() const {
        nlohmann::json a = nlohmann::json::array();
        for (const auto& l : layers) a.push_back(l->arch());
        return a;
    }

    std::vector<Eigen::VectorXd> hidden_states() const {
        std::vector<Eigen::VectorXd> out;
        for (const auto& l : layers)
            if (auto* g = dynamic_cast<const GruCell*>(l.get())) {
                const Eigen::MatrixXd h = g->hidden_state();
                out.push_back(h.size() == 0 ? Eigen::VectorXd() : Eigen::VectorXd(h.row(0)));
            }
        return out;
    }

    void set_hidden_states(const std::vector<Eigen::VectorXd>& hs) {
        std::size_t i = 0;
        for (auto& l : layers)
            if (auto* g = dynamic_cast<GruCell*>(l.get())) {
                if (i < hs.size() && hs[i].size() > 0)
                    g->set_hidden_state(hs[i].transpose());
                else
                    g->set_hidden_state(Eigen::MatrixXd::Zero(1, g->out_dim()));
                ++i;
            }
    }

private:
    Rng rng_{0};
};

// --- construction ------------------------------------------------------------

struct BodyNetConfig {
    int feature_dim = 0;
    int joint_count = 0;
    std::vector<int> joint_parent;  // required for gru_spl
    int hidden = 256;               // desk-scale default
    bool paper_scale = false;       // gru hidden 1000, mlp width 512
    int gru_layers = 2;
    int mlp_layers = 5;
    int spl_unit = 64;
    double dropout_rate = 0.5;
    std::uint64_t seed = 0;
};

namespace detail {

/// Starts every 6-wide rotation head at the identity rotation: the bias takes
/// the first two identity-matrix columns and the weights shrink to near zero,
/// so an untrained head composes onto its initialization as a no-op instead
/// of a random rotation.
inline void identity_head_init(Network& net, double weight_scale = 0.01) {
    const std::string prefix = "l" + std::to_string(net.layers.size() - 1) + ".";
    for (ParamRef& p : net.params()) {
        if (p.name.rfind(prefix, 0) != 0 || !p.grad) continue;
        if (p.name.ends_with(".weight") || p.name.ends_with(".w2")) {
            *p.value *= weight_scale;
        } else if (p.name.ends_with(".bias") || p.name.ends_with(".b2")) {
            if (p.value->rows() % 6 != 0)
                throw std::logic_error("identity head init: output is not 6 wide per joint");
            for (Eigen::Index j = 0; j < p.value->rows(); j += 6) {
                (*p.value)(j, 0) = 1.0;
                (*p.value)(j + 4, 0) = 1.0;
            }
        }
    }
}

} // namespace detail

inline Network build_body_regressor(RegressorKind kind, const BodyNetConfig& cfg) {
    if (cfg.feature_dim <= 0 || cfg.joint_count <= 0)
        throw std::invalid_argument("body regressor: dimensions unset");
    Network net;
    Rng rng(cfg.seed ^ 0xB0D7);
    const int out = 6 * cfg.joint_count;
    switch (kind) {
        case RegressorKind::mlp: {
            const int width = cfg.paper_scale ? 512 : cfg.hidden;
            int in = cfg.feature_dim;
            for (int i = 0; i < cfg.mlp_layers; ++i) {
                net.layers.push_back(std::make_unique<Linear>(in, width, rng));
                net.layers.push_back(std::make_unique<Relu>(width));
                in = width;
            }
            net.layers.push_back(std::make_unique<Linear>(in, out, rng));
            break;
        }
        case RegressorKind::gru:
        case RegressorKind::gru_spl: {
            const int hidden = cfg.paper_scale ? 1000 : cfg.hidden;
            int in = cfg.feature_dim;
            for (int i = 0; i < cfg.gru_layers; ++i) {
                net.layers.push_back(std::make_unique<GruCell>(in, hidden, rng));
                in = hidden;
            }
            if (kind == RegressorKind::gru_spl) {
                if (int(cfg.joint_parent.size()) != cfg.joint_count)
                    throw std::invalid_argument("body regressor: gru_spl needs joint parents");
                net.layers.push_back(std::make_unique<Dropout>(hidden, cfg.dropout_rate));
                net.layers.push_back(
                    std::make_unique<Spl>(hidden, cfg.joint_parent, cfg.spl_unit, 6, rng));
            } else {
                net.layers.push_back(std::make_unique<Linear>(hidden, out, rng));
            }
            break;
        }
        default:
            throw std::invalid_argument("body regressor: invalid kind");
    }
    detail::identity_head_init(net);
    net.meta = {{"regressor", to_string(kind)}};
    return net;
}

// --- rotation heads and losses ----------------------------------------------

/// Mean absolute elementwise difference over all 9J rotation entries.
inline double l1_rotation_loss(const std::vector<Rot3>& pred, const std::vector<Rot3>& target) {
    if (pred.size() != target.size())
        throw std::invalid_argument("l1 rotation loss: joint count mismatch");
    if (pred.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t j = 0; j < pred.size(); ++j)
        total += (pred[j] - target[j]).cwiseAbs().sum();
    return total / (9.0 * double(pred.size()));
}

/// Backward of rot_from_6d at a non-degenerate input.
inline void rot_from_6d_backward(const Vec3& a, const Vec3& b, const Mat3& dR, Vec3& da,
                                 Vec3& db) {
    const double an = a.norm();
    const Vec3 r1 = a / an;
    const double s = r1.dot(b);
    const Vec3 u2 = b - s * r1;
    const double un = u2.norm();
    const Vec3 r2 = u2 / un;

    const Vec3 g1 = dR.col(0), g2 = dR.col(1), g3 = dR.col(2);
    const Vec3 g_r2 = g2 + g3.cross(r1);
    Vec3 g_r1 = g1 + r2.cross(g3);
    const Vec3 g_u2 = (g_r2 - r2 * r2.dot(g_r2)) / un;
    db = g_u2 - r1 * r1.dot(g_u2);
    g_r1 += -b * r1.dot(g_u2) - s * g_u2;
    da = (g_r1 - r1 * r1.dot(g_r1)) / an;
}

/// l1 loss on rotation matrices reached through the 6D projection head,
/// optionally composed onto initial rotations (residual mode). `raw` is
/// B x 6J; the mean runs over batch, joints, and matrix entries. Returns
/// the loss and writes d(loss)/d(raw) when grad is non-null.
inline double sixd_rotation_loss(const Eigen::MatrixXd& raw,
                                 const std::vector<std::vector<Rot3>>& init,
                                 const std::vector<std::vector<Rot3>>& target, bool residual,
                                 Eigen::MatrixXd* grad) {
    const Eigen::Index B = raw.rows();
    if (B == 0 || raw.cols() % 6 != 0)
        throw std::invalid_argument("sixd loss: bad raw shape");
    const int J = int(raw.cols() / 6);
    if (int(target.size()) != B || (residual && int(init.size()) != B))
        throw std::invalid_argument("sixd loss: batch mismatch");
    if (grad) grad->setZero(B, raw.cols());
    const double denom = 9.0 * double(J) * double(B);
    double total = 0.0;
    for (Eigen::Index s = 0; s < B; ++s) {
        for (int j = 0; j < J; ++j) {
            const Vec3 a = raw.block<1, 3>(s, 6 * j).transpose();
            const Vec3 b = raw.block<1, 3>(s, 6 * j + 3).transpose();
            const Rot3 delta = rot_from_6d(a, b);
            const Rot3 out =
                residual ? Rot3(init[std::size_t(s)][std::size_t(j)] * delta) : delta;
            const Mat3 diff = out - target[std::size_t(s)][std::size_t(j)];
            total += diff.cwiseAbs().sum();
            if (grad) {
                const Mat3 dout = diff.unaryExpr([](double v) {
                    return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                }) / denom;
                const Mat3 ddelta =
                    residual ? Mat3(init[std::size_t(s)][std::size_t(j)].transpose() * dout)
                             : dout;
                Vec3 da, db;
                rot_from_6d_backward(a, b, ddelta, da, db);
                grad->block<1, 3>(s, 6 * j) += da.transpose();
                grad->block<1, 3>(s, 6 * j + 3) += db.transpose();
            }
        }
    }
    return total / denom;
}

inline std::vector<Rot3> rotations_from_6d(const Eigen::VectorXd& raw) {
    if (raw.size() % 6 != 0) throw std::invalid_argument("6d stack: bad size");
    std::vector<Rot3> out;
    for (Eigen::Index j = 0; j + 5 < raw.size(); j += 6)
        out.push_back(rot_from_6d(raw.segment<3>(j), raw.segment<3>(j + 3)));
    return out;
}

// --- optimizer ---------------------------------------------------------------

struct Adam {
    double lr = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    long step_count = 0;
    std::vector<Eigen::MatrixXd> m, v;

    explicit Adam(double learning_rate = 1e-4) : lr(learning_rate) {}

    void step(std::vector<ParamRef> params) {
        std::vector<ParamRef> trainable;
        for (auto& p : params)
            if (p.grad) trainable.push_back(p);
        if (m.empty()) {
            for (auto& p : trainable) {
                m.push_back(Eigen::MatrixXd::Zero(p.value->rows(), p.value->cols()));
                v.push_back(Eigen::MatrixXd::Zero(p.value->rows(), p.value->cols()));
            }
        }
        if (m.size() != trainable.size())
            throw std::invalid_argument("adam: parameter set changed");
        ++step_count;
        const double bc1 = 1.0 - std::pow(beta1, double(step_count));
        const double bc2 = 1.0 - std::pow(beta2, double(step_count));
        for (std::size_t i = 0; i < trainable.size(); ++i) {
            const Eigen::MatrixXd& g = *trainable[i].grad;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g.cwiseProduct(g);
            trainable[i].value->array() -=
                lr * (m[i].array() / bc1) / ((v[i].array() / bc2).sqrt() + eps);
        }
    }
};

// --- gradient checking -------------------------------------------------------

/// Central finite differences (step h) against the analytic gradients on a
/// random subsample of parameter entries. `run` must perform the full
/// forward and backward for one deterministic pass; grad_check reseeds the
/// network (prepare) before every invocation so dropout masks and recurrent
/// state repeat exactly.
inline double grad_check(Network& net, const std::function<double(Network&)>& run, Rng& rng,
                         int samples = 25, double h = 1e-5) {
    const std::uint64_t pass_seed = 0x6C0DE;
    net.prepare(pass_seed);
    net.zero_grads();
    run(net);

    auto params = net.params();
    std::vector<ParamRef> trainable;
    for (auto& p : params)
        if (p.grad) trainable.push_back(p);
    std::vector<Eigen::MatrixXd> saved;
    for (auto& p : trainable) saved.push_back(*p.grad);

    double max_rel = 0.0;
    for (int s = 0; s < samples; ++s) {
        const std::size_t pi = rng.index(trainable.size());
        const std::size_t ei = rng.index(std::size_t(trainable[pi].value->size()));
        double* slot = trainable[pi].value->data() + ei;
        const double orig = *slot;

        *slot = orig + h;
        net.prepare(pass_seed);
        const double lp = run(net);
        *slot = orig - h;
        net.prepare(pass_seed);
        const double lm = run(net);
        *slot = orig;

        const double fd = (lp - lm) / (2.0 * h);
        const double an = saved[pi](Eigen::Index(ei) % saved[pi].rows(),
                                    Eigen::Index(ei) / saved[pi].rows());
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        max_rel = std::max(max_rel, rel);
    }
    net.prepare(pass_seed);
    return max_rel;
}

// --- training ----------------------------------------------------------------

struct RegressionSequence {
    Eigen::MatrixXd features;             // T x F
    std::vector<std::vector<Rot3>> init;  // T x J initial local rotations
    std::vector<std::vector<Rot3>> target;
};

struct TrainConfig {
    int epochs = 50;
    int batch = 64;
    int window = 32;  // truncated-BPTT span for recurrent nets
    double lr = 1e-4;
    bool residual = true;
    bool recurrent = true;
    std::uint64_t seed = 0;
};

struct TrainResult {
    std::vector<double> epoch_loss;
};

/// Inference-mode mean loss over a dataset (no dropout, no caches).
inline double sequence_loss(Network& net, const std::vector<RegressionSequence>& data,
                            bool residual, bool recurrent) {
    if (data.empty()) return 0.0;
    net.training = false;
    double total = 0.0;
    std::size_t count = 0;
    if (!recurrent) {
        for (const auto& seq : data) {
            const Eigen::MatrixXd y = net.forward(seq.features);
            total += sixd_rotation_loss(y, seq.init, seq.target, residual, nullptr) *
                     double(seq.features.rows());
            count += std::size_t(seq.features.rows());
        }
    } else {
        for (const auto& seq : data) {
            net.reset_state();
            for (Eigen::Index t = 0; t < seq.features.rows(); ++t) {
                const Eigen::MatrixXd y = net.forward(seq.features.row(t));
                total += sixd_rotation_loss(y, {seq.init[std::size_t(t)]},
                                            {seq.target[std::size_t(t)]}, residual, nullptr);
                ++count;
            }
        }
    }
    return count == 0 ? 0.0 : total / double(count);
}

/// Minibatch training: shuffled sequence batches per epoch; recurrent nets
/// run truncated BPTT over `window` steps with hidden state carried across
/// windows, otherwise frames are treated as independent rows. Aborts on a
/// non-finite loss.
inline TrainResult train_sequences(Network& net, const std::vector<RegressionSequence>& data,
                                   Adam& opt, const TrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("train: empty dataset");
    const Eigen::Index T = data.front().features.rows();
    for (const auto& s : data)
        if (s.features.rows() != T)
            throw std::invalid_argument("train: sequences must share a common length");

    TrainResult result;
    Rng order_rng(cfg.seed ^ 0x7124);
    net.prepare(cfg.seed ^ 0xD207);

    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        order_rng.shuffle(idx);
        double epoch_total = 0.0;
        std::size_t epoch_terms = 0;
        for (std::size_t start = 0; start < idx.size(); start += std::size_t(cfg.batch)) {
            const std::size_t stop = std::min(idx.size(), start + std::size_t(cfg.batch));
            const std::size_t B = stop - start;
            net.training = true;
            net.reset_state();

            if (!cfg.recurrent) {
                Eigen::MatrixXd X(Eigen::Index(B) * T, net.in_dim());
                std::vector<std::vector<Rot3>> init, target;
                for (std::size_t b = 0; b < B; ++b) {
                    const auto& seq = data[idx[start + b]];
                    X.middleRows(Eigen::Index(b) * T, T) = seq.features;
                    init.insert(init.end(), seq.init.begin(), seq.init.end());
                    target.insert(target.end(), seq.target.begin(), seq.target.end());
                }
                net.zero_grads();
                const Eigen::MatrixXd y = net.forward(X);
                Eigen::MatrixXd dy;
                const double loss = sixd_rotation_loss(y, init, target, cfg.residual, &dy);
                if (!std::isfinite(loss))
                    throw std::runtime_error("train: non-finite loss at epoch " +
                                             std::to_string(epoch));
                net.backward(dy);
                opt.step(net.params());
                epoch_total += loss;
                ++epoch_terms;
                continue;
            }

            for (Eigen::Index w0 = 0; w0 < T; w0 += cfg.window) {
                const Eigen::Index steps = std::min<Eigen::Index>(cfg.window, T - w0);
                net.zero_grads();
                std::vector<Eigen::MatrixXd> outs(static_cast<std::size_t>(steps));
                std::vector<std::vector<std::vector<Rot3>>> inits(
                    static_cast<std::size_t>(steps));
                std::vector<std::vector<std::vector<Rot3>>> targets(
                    static_cast<std::size_t>(steps));
                for (Eigen::Index t = 0; t < steps; ++t) {
                    Eigen::MatrixXd X(Eigen::Index(B), net.in_dim());
                    inits[std::size_t(t)].resize(B);
                    targets[std::size_t(t)].resize(B);
                    for (std::size_t b = 0; b < B; ++b) {
                        const auto& seq = data[idx[start + b]];
                        X.row(Eigen::Index(b)) = seq.features.row(w0 + t);
                        inits[std::size_t(t)][b] = seq.init[std::size_t(w0 + t)];
                        targets[std::size_t(t)][b] = seq.target[std::size_t(w0 + t)];
                    }
                    outs[std::size_t(t)] = net.forward(X);
                }
                double window_loss = 0.0;
                std::vector<Eigen::MatrixXd> grads(static_cast<std::size_t>(steps));
                for (Eigen::Index t = 0; t < steps; ++t) {
                    window_loss +=
                        sixd_rotation_loss(outs[std::size_t(t)], inits[std::size_t(t)],
                                           targets[std::size_t(t)], cfg.residual,
                                           &grads[std::size_t(t)]) /
                        double(steps);
                    grads[std::size_t(t)] /= double(steps);
                }
                if (!std::isfinite(window_loss))
                    throw std::runtime_error("train: non-finite loss at epoch " +
                                             std::to_string(epoch));
                for (Eigen::Index t = steps - 1; t >= 0; --t)
                    net.backward(grads[std::size_t(t)]);
                opt.step(net.params());
                epoch_total += window_loss;
                ++epoch_terms;
            }
        }
        result.epoch_loss.push_back(epoch_terms ? epoch_total / double(epoch_terms) : 0.0);
    }
    net.training = false;
    net.reset_state();
    return result;
}

// --- serialization -----------------------------------------------------------

inline void save_network(const Network& net, const std::string& path) {
    nlohmann::json meta;
    meta["kind"] = "network";
    meta["arch"] = net.arch();
    meta["meta"] = net.meta;
    ContainerWriter w(meta);
    auto& mutable_net = const_cast<Network&>(net);
    for (auto& p : mutable_net.params()) {
        const Tensor t = Tensor::from_matrix(*p.value);
        w.add(p.name, {std::size_t(t.shape[0]), std::size_t(t.shape[1])}, t.data, "f8");
    }
    w.write(path);
}

inline std::unique_ptr<Layer> layer_from_arch(const nlohmann::json& a) {
    Rng rng(0);
    const std::string kind = a.at("kind").get<std::string>();
    if (kind == "linear")
        return std::make_unique<Linear>(a.at("in").get<int>(), a.at("out").get<int>(), rng);
    if (kind == "relu") return std::make_unique<Relu>(a.at("dim").get<int>());
    if (kind == "dropout")
        return std::make_unique<Dropout>(a.at("dim").get<int>(), a.at("rate").get<double>());
    if (kind == "batchnorm1d")
        return std::make_unique<BatchNorm1d>(a.at("dim").get<int>(),
                                             a.at("momentum").get<double>(),
                                             a.at("eps").get<double>());
    if (kind == "gru")
        return std::make_unique<GruCell>(a.at("in").get<int>(), a.at("hidden").get<int>(), rng);
    if (kind == "spl")
        return std::make_unique<Spl>(a.at("hidden_in").get<int>(),
                                     a.at("parents").get<std::vector<int>>(),
                                     a.at("unit").get<int>(), a.at("out_per_joint").get<int>(),
                                     rng);
    throw std::invalid_argument("network: unknown layer kind '" + kind + "'");
}

inline Network load_network(const std::string& path) {
    const Container c = read_container(path);
    if (c.meta.at("kind") != "network")
        throw std::invalid_argument(path + ": not a network checkpoint");
    Network net;
    net.meta = c.meta.value("meta", nlohmann::json::object());
    for (const auto& a : c.meta.at("arch")) net.layers.push_back(layer_from_arch(a));
    for (auto& p : net.params()) {
        const auto& shape = c.shapes.at(p.name);
        Tensor t;
        t.shape = {int(shape[0]), int(shape[1])};
        t.data = c.at(p.name);
        *p.value = t.to_matrix();
    }
    return net;
}

// --- extractor bridge ---------------------------------------------------------

/// Adapts a trained network to the extractor's regressor interface. Owns a
/// private network instance (forward mutates recurrent caches); the GRU
/// hidden state is carried in the caller's ExtractorState so one regressor
/// can serve interleaved streams.
class NetworkRegressor : public PoseRegressor {
public:
    explicit NetworkRegressor(Network net)
        : net_(std::move(net)),
          kind_(regressor_kind_from_string(
              net_.meta.value("regressor", std::string("mlp")))) {
        net_.training = false;
    }

    int feature_dim() const override { return net_.in_dim(); }
    int joint_count() const override { return net_.out_dim() / 6; }
    bool stateless() const override { return kind_ == RegressorKind::mlp; }

    Eigen::VectorXd forward(const Eigen::VectorXd& x, ExtractorState& state) const override {
        net_.training = false;
        if (!stateless()) net_.set_hidden_states(state.hidden);
        const Eigen::MatrixXd y = net_.forward(x.transpose());
        if (!stateless()) state.hidden = net_.hidden_states();
        return y.row(0).transpose();
    }

    RegressorKind kind() const { return kind_; }

private:
    mutable Network net_;
    RegressorKind kind_;
};

/// Runs extractor steps 1-2 over a recorded sequence and packages features,
/// initial rotations, and ground-truth local rotations for training.
inline RegressionSequence make_regression_sequence(const SkinnedModel& model,
                                                   const SequenceRecord& rec,
                                                   const ExtractorConfig& cfg) {
    if (rec.gt.size() != rec.frames.size())
        throw std::invalid_argument("regression data: sequence lacks ground truth");
    RegressionSequence out;
    const int F = feature_dim(cfg, model.topology, int(rec.beta.size()));
    out.features.resize(Eigen::Index(rec.frames.size()), F);
    Rot3 last_global = Rot3::Identity();
    bool have_global = false;
    for (std::size_t t = 0; t < rec.frames.size(); ++t) {
        Rot3 global;
        try {
            global = estimate_global_rotation(rec.frames[t], model);
            have_global = true;
        } catch (const std::exception&) {
            if (!have_global) throw;
            global = last_global;
        }
        last_global = global;
        const PoseState init = bending_heuristic(rec.frames[t], model, global, rec.beta);
        const ResidualFeatures rf = compute_twists(rec.frames[t], model, init);
        out.features.row(Eigen::Index(t)) =
            assemble_features(cfg, rf, rec.frames[t], rec.beta, model.topology).transpose();
        out.init.push_back(init.body_pose);
        out.target.push_back(rec.gt[t].body_pose);
    }
    return out;
}

} // namespace kp
