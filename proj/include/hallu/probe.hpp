#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <fmt/format.h>
#include <json.hpp>

#include "hallu/error.hpp"
#include "hallu/parallel.hpp"
#include "hallu/rng.hpp"

namespace hallu::probe {

using json = nlohmann::json;

inline constexpr std::array<std::size_t, 3> kHidden = {256, 128, 64};

struct ProbeConfig {
    std::size_t input_size = 0;
    double learning_rate = 2.5e-6;
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double dropout = 0.15;
    std::size_t max_epochs = 800;
    std::size_t patience = 30;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    double threshold = 0.5;
    bool standardize = false;

    std::vector<std::size_t> layer_sizes() const {
        return {input_size, kHidden[0], kHidden[1], kHidden[2], 1};
    }
};

inline json to_json(const ProbeConfig& c) {
    return {{"input_size", c.input_size},
            {"hidden", kHidden},
            {"learning_rate", c.learning_rate},
            {"weight_decay", c.weight_decay},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"epsilon", c.epsilon},
            {"dropout", c.dropout},
            {"max_epochs", c.max_epochs},
            {"patience", c.patience},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"threshold", c.threshold},
            {"standardize", c.standardize}};
}

inline ProbeConfig config_from_json(const json& j) {
    ProbeConfig c;
    c.input_size = j.at("input_size").get<std::size_t>();
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.epsilon = j.value("epsilon", c.epsilon);
    c.dropout = j.value("dropout", c.dropout);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.threshold = j.value("threshold", c.threshold);
    c.standardize = j.value("standardize", c.standardize);
    return c;
}

/// Feed-forward net with ReLU hidden layers and a single sigmoid output. Samples are
/// columns: inputs are (input_size x n).
template <typename Scalar>
class Mlp {
public:
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using Row = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

    /// Per-layer multiplicative masks: index 0 applies to the input, index l to the
    /// output of hidden layer l. Entries are 0 or 1/(1-p).
    struct Masks {
        std::vector<Matrix> layers;
    };

    struct Gradients {
        std::vector<Matrix> weights;
        std::vector<Vector> biases;
    };

    Mlp() = default;

    /// All parameters zero.
    explicit Mlp(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
        if (sizes_.size() < 2) throw Error("a network needs at least two layer sizes");
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            weights.push_back(Matrix::Zero(idx(sizes_[l + 1]), idx(sizes_[l])));
            biases.push_back(Vector::Zero(idx(sizes_[l + 1])));
        }
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    static Mlp initialized(std::vector<std::size_t> sizes, std::uint64_t seed) {
        Mlp m(std::move(sizes));
        KeyedRng rng(seed, "init");
        for (std::size_t l = 0; l < m.weights.size(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(m.sizes_[l]));
            auto draw = [&] { return static_cast<Scalar>((2.0 * rng.uniform() - 1.0) * bound); };
            for (Eigen::Index c = 0; c < m.weights[l].cols(); ++c)
                for (Eigen::Index r = 0; r < m.weights[l].rows(); ++r) m.weights[l](r, c) = draw();
            for (Eigen::Index r = 0; r < m.biases[l].size(); ++r) m.biases[l](r) = draw();
        }
        return m;
    }

    const std::vector<std::size_t>& sizes() const { return sizes_; }
    std::size_t input_size() const { return sizes_.front(); }
    std::size_t layers() const { return weights.size(); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
        return n;
    }

    /// Output logits (1 x n), dropout off.
    Row logits(const Matrix& x) const {
        check_input(x);
        Matrix a = x;
        for (std::size_t l = 0; l + 1 < weights.size(); ++l)
            a = ((weights[l] * a).colwise() + biases[l]).cwiseMax(Scalar(0));
        return ((weights.back() * a).colwise() + biases.back()).row(0);
    }

    Row probabilities(const Matrix& x) const { return logits(x).unaryExpr([](Scalar z) { return sigmoid(z); }); }

    Scalar probability(std::span<const Scalar> x) const {
        if (x.size() != input_size())
            throw Error(fmt::format("input has {} values, network expects {}", x.size(), input_size()));
        Matrix col = Eigen::Map<const Vector>(x.data(), idx(x.size()));
        return probabilities(col)(0);
    }

    /// Mean binary cross-entropy over the columns of `x`, computed from logits.
    Scalar loss(const Matrix& x, const Row& y) const { return mean_bce(logits(x), y); }

    /// Training-mode forward and backward pass. `masks` may be null (no dropout).
    Scalar loss_and_gradients(const Matrix& x, const Row& y, const Masks* masks, Gradients& g) const {
        check_input(x);
        const auto n = x.cols();
        if (y.size() != n) throw Error("label count differs from sample count");
        const std::size_t L = weights.size();
        std::vector<Matrix> a(L);   // input to layer l (after mask)
        std::vector<Matrix> z(L);   // pre-activation of layer l
        a[0] = masks ? Matrix(x.cwiseProduct(masks->layers[0])) : x;
        for (std::size_t l = 0; l < L; ++l) {
            z[l] = (weights[l] * a[l]).colwise() + biases[l];
            if (l + 1 < L) {
                Matrix h = z[l].cwiseMax(Scalar(0));
                a[l + 1] = masks ? Matrix(h.cwiseProduct(masks->layers[l + 1])) : h;
            }
        }
        const Row out = z[L - 1].row(0);
        const Scalar value = mean_bce(out, y);

        g.weights.resize(L);
        g.biases.resize(L);
        Matrix delta = (out.unaryExpr([](Scalar v) { return sigmoid(v); }) - y) / static_cast<Scalar>(n);
        for (std::size_t l = L; l-- > 0;) {
            g.weights[l] = delta * a[l].transpose();
            g.biases[l] = delta.rowwise().sum();
            if (l == 0) break;
            Matrix back = weights[l].transpose() * delta;
            if (masks) back = back.cwiseProduct(masks->layers[l]);
            delta = back.cwiseProduct(z[l - 1].unaryExpr([](Scalar v) { return v > 0 ? Scalar(1) : Scalar(0); }));
        }
        return value;
    }

    Masks draw_masks(Eigen::Index n, double p, KeyedRng& rng) const {
        Masks m;
        const auto keep = static_cast<Scalar>(1.0 / (1.0 - p));
        for (std::size_t l = 0; l < weights.size(); ++l) {
            Matrix mask(idx(sizes_[l]), n);
            for (Eigen::Index c = 0; c < n; ++c)
                for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, c) = rng.uniform() < p ? Scalar(0) : keep;
            m.layers.push_back(std::move(mask));
        }
        return m;
    }

    template <typename Other>
    Mlp<Other> cast() const {
        Mlp<Other> out(sizes_);
        for (std::size_t l = 0; l < weights.size(); ++l) {
            out.weights[l] = weights[l].template cast<Other>();
            out.biases[l] = biases[l].template cast<Other>();
        }
        return out;
    }

    std::vector<Matrix> weights;  // weights[l] is (sizes[l+1] x sizes[l])
    std::vector<Vector> biases;

    static Scalar sigmoid(Scalar z) {
        if (z >= 0) return Scalar(1) / (Scalar(1) + std::exp(-z));
        const Scalar e = std::exp(z);
        return e / (Scalar(1) + e);
    }

    static Scalar mean_bce(const Row& logit, const Row& y) {
        double total = 0;
        for (Eigen::Index i = 0; i < logit.size(); ++i) {
            const double z = logit(i);
            total += std::max(z, 0.0) - z * static_cast<double>(y(i)) + std::log1p(std::exp(-std::abs(z)));
        }
        return static_cast<Scalar>(total / static_cast<double>(logit.size()));
    }

private:
    static Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

    void check_input(const Matrix& x) const {
        if (static_cast<std::size_t>(x.rows()) != input_size())
            throw Error(fmt::format("input has {} rows, network expects {}", x.rows(), input_size()));
    }

    std::vector<std::size_t> sizes_;
};

/// Adam with decoupled weight decay.
template <typename Scalar>
class AdamW {
public:
    AdamW(const Mlp<Scalar>& net, const ProbeConfig& c) : c_(c) {
        for (std::size_t l = 0; l < net.layers(); ++l) {
            mw_.push_back(Mlp<Scalar>::Matrix::Zero(net.weights[l].rows(), net.weights[l].cols()));
            vw_.push_back(mw_.back());
            mb_.push_back(Mlp<Scalar>::Vector::Zero(net.biases[l].size()));
            vb_.push_back(mb_.back());
        }
    }

    void step(Mlp<Scalar>& net, const typename Mlp<Scalar>::Gradients& g) {
        ++t_;
        const double bc1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
        for (std::size_t l = 0; l < net.layers(); ++l) {
            update(net.weights[l], g.weights[l], mw_[l], vw_[l], bc1, bc2);
            update(net.biases[l], g.biases[l], mb_[l], vb_[l], bc1, bc2);
        }
    }

private:
    template <typename P, typename G, typename M>
    void update(P& p, const G& g, M& m, M& v, double bc1, double bc2) const {
        const auto lr = static_cast<Scalar>(c_.learning_rate);
        const auto b1 = static_cast<Scalar>(c_.beta1);
        const auto b2 = static_cast<Scalar>(c_.beta2);
        p *= Scalar(1) - lr * static_cast<Scalar>(c_.weight_decay);
        m = b1 * m + (Scalar(1) - b1) * g;
        v = b2 * v + (Scalar(1) - b2) * g.cwiseProduct(g);
        const auto s1 = static_cast<Scalar>(1.0 / bc1);
        const auto s2 = static_cast<Scalar>(1.0 / bc2);
        const auto eps = static_cast<Scalar>(c_.epsilon);
        p.array() -= lr * (m.array() * s1) / ((v.array() * s2).sqrt() + eps);
    }

    ProbeConfig c_;
    std::size_t t_ = 0;
    std::vector<typename Mlp<Scalar>::Matrix> mw_, vw_;
    std::vector<typename Mlp<Scalar>::Vector> mb_, vb_;
};

// ---------------------------------------------------------------------------
// Early stopping

class NonFiniteLoss : public Error {
public:
    using Error::Error;
};

struct LoopResult {
    std::size_t epochs_run = 0;
    std::size_t best_epoch = 0;  // 1-based
    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<double> history;
};

/// Runs `epoch(e)` for e = 1, 2, ... until `max_epochs` or until `patience` epochs
/// pass without a strictly lower validation loss. `improved(e)` is called whenever
/// epoch e sets a new best, so the caller can snapshot parameters.
template <typename Epoch, typename Improved>
LoopResult run_epochs(std::size_t max_epochs, std::size_t patience, Epoch&& epoch, Improved&& improved) {
    if (max_epochs == 0) throw Error("max_epochs must be positive");
    LoopResult r;
    for (std::size_t e = 1; e <= max_epochs; ++e) {
        const double loss = epoch(e);
        r.history.push_back(loss);
        r.epochs_run = e;
        if (!std::isfinite(loss)) throw NonFiniteLoss(fmt::format("validation loss is {} at epoch {}", loss, e));
        if (loss < r.best_loss) {
            r.best_loss = loss;
            r.best_epoch = e;
            improved(e);
        }
        if (e - r.best_epoch >= patience) break;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Training

using MatrixF = Mlp<float>::Matrix;
using RowF = Mlp<float>::Row;

/// One split: samples as columns.
struct Samples {
    MatrixF x;
    RowF y;

    std::size_t size() const { return static_cast<std::size_t>(x.cols()); }

    /// From row-major features (n x dim) and 0/1 labels.
    static Samples from_rows(std::span<const float> rows, std::size_t dim, std::span<const int> labels) {
        if (rows.size() != labels.size() * dim) throw Error("feature buffer does not match label count");
        Samples s;
        s.x = Eigen::Map<const MatrixF>(rows.data(), static_cast<Eigen::Index>(dim),
                                        static_cast<Eigen::Index>(labels.size()));
        s.y.resize(static_cast<Eigen::Index>(labels.size()));
        for (std::size_t i = 0; i < labels.size(); ++i) s.y(static_cast<Eigen::Index>(i)) = static_cast<float>(labels[i]);
        return s;
    }
};

struct TrainData {
    Samples train;
    Samples val;
    Samples test;
};

struct Checkpoint {
    ProbeConfig config;
    Mlp<float> net;
    std::vector<float> mean;   // empty unless standardized
    std::vector<float> scale;

    MatrixF prepare(const MatrixF& x) const {
        if (mean.empty()) return x;
        MatrixF out = x;
        for (Eigen::Index r = 0; r < out.rows(); ++r)
            out.row(r) = (out.row(r).array() - mean[static_cast<std::size_t>(r)]) / scale[static_cast<std::size_t>(r)];
        return out;
    }

    RowF probabilities(const MatrixF& x) const { return net.probabilities(prepare(x)); }
};

/// Fraction of samples whose (probability >= threshold) equals the label.
inline double accuracy(const RowF& prob, const RowF& y, double threshold) {
    if (prob.size() == 0) throw Error("cannot evaluate on an empty test set");
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < prob.size(); ++i) {
        const int predicted = static_cast<double>(prob(i)) >= threshold ? 1 : 0;
        hits += predicted == static_cast<int>(y(i));
    }
    return static_cast<double>(hits) / static_cast<double>(prob.size());
}

inline double evaluate(const Checkpoint& ck, const Samples& test, std::optional<double> threshold = std::nullopt) {
    if (test.size() == 0) throw Error("cannot evaluate on an empty test set");
    return accuracy(ck.probabilities(test.x), test.y, threshold.value_or(ck.config.threshold));
}

struct SeedResult {
    std::uint64_t seed = 0;
    bool ok = false;
    std::string diagnostic;
    double test_accuracy = 0;
    double best_val_loss = 0;
    std::size_t best_epoch = 0;
    std::size_t stop_epoch = 0;
};

inline json to_json(const SeedResult& r) {
    json j{{"seed", r.seed}, {"ok", r.ok}};
    if (r.ok) {
        j["test_accuracy"] = r.test_accuracy;
        j["best_val_loss"] = r.best_val_loss;
        j["best_epoch"] = r.best_epoch;
        j["stop_epoch"] = r.stop_epoch;
    } else {
        j["diagnostic"] = r.diagnostic;
    }
    return j;
}

/// Trains one probe and returns the lowest-validation-loss checkpoint.
inline std::pair<SeedResult, std::optional<Checkpoint>> train(const TrainData& data, ProbeConfig config) {
    SeedResult result;
    result.seed = config.seed;
    if (data.train.size() == 0 || data.val.size() == 0) throw Error("train and validation splits must be non-empty");
    config.input_size = static_cast<std::size_t>(data.train.x.rows());
    if (data.val.x.rows() != data.train.x.rows() || (data.test.size() && data.test.x.rows() != data.train.x.rows()))
        throw Error("splits disagree on input dimension");
    if (config.batch_size == 0) throw Error("batch_size must be positive");

    Checkpoint ck{config, Mlp<float>::initialized(config.layer_sizes(), config.seed), {}, {}};
    if (config.standardize) {
        const auto& x = data.train.x;
        ck.mean.resize(static_cast<std::size_t>(x.rows()));
        ck.scale.resize(ck.mean.size());
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const double m = x.row(r).cast<double>().mean();
            const double var = (x.row(r).cast<double>().array() - m).square().mean();
            ck.mean[static_cast<std::size_t>(r)] = static_cast<float>(m);
            ck.scale[static_cast<std::size_t>(r)] = var > 0 ? static_cast<float>(std::sqrt(var)) : 1.0f;
        }
    }
    const MatrixF train_x = ck.prepare(data.train.x);
    const MatrixF val_x = ck.prepare(data.val.x);

    Mlp<float> net = ck.net;
    AdamW<float> opt(net, config);
    Mlp<float>::Gradients grads;
    std::vector<Eigen::Index> order(static_cast<std::size_t>(train_x.cols()));
    std::iota(order.begin(), order.end(), Eigen::Index{0});

    auto epoch = [&](std::size_t e) {
        KeyedRng shuffle(config.seed, fmt::format("shuffle/{}", e));
        shuffle.shuffle(order);
        for (std::size_t start = 0, b = 0; start < order.size(); start += config.batch_size, ++b) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            std::vector<Eigen::Index> cols(order.begin() + static_cast<std::ptrdiff_t>(start),
                                           order.begin() + static_cast<std::ptrdiff_t>(end));
            const MatrixF xb = train_x(Eigen::all, cols);
            const RowF yb = data.train.y(Eigen::all, cols);
            if (config.dropout > 0) {
                KeyedRng drop(config.seed, fmt::format("dropout/{}/{}", e, b));
                const auto masks = net.draw_masks(xb.cols(), config.dropout, drop);
                net.loss_and_gradients(xb, yb, &masks, grads);
            } else {
                net.loss_and_gradients(xb, yb, nullptr, grads);
            }
            opt.step(net, grads);
        }
        return static_cast<double>(net.loss(val_x, data.val.y));
    };
    try {
        auto loop = run_epochs(config.max_epochs, config.patience, epoch, [&](std::size_t) { ck.net = net; });
        result.ok = true;
        result.best_epoch = loop.best_epoch;
        result.best_val_loss = loop.best_loss;
        result.stop_epoch = loop.epochs_run;
    } catch (const NonFiniteLoss& e) {
        result.diagnostic = e.what();
        return {result, std::nullopt};
    }
    if (data.test.size()) result.test_accuracy = evaluate(ck, data.test);
    return {result, std::move(ck)};
}

struct TrainReport {
    ProbeConfig config;
    std::vector<SeedResult> seeds;
    double mean_accuracy = 0;
    double std_accuracy = 0;  // population
    std::size_t failed = 0;
};

inline void aggregate(TrainReport& r) {
    std::vector<double> acc;
    r.failed = 0;
    for (const auto& s : r.seeds) {
        if (s.ok) acc.push_back(s.test_accuracy);
        else ++r.failed;
    }
    r.mean_accuracy = r.std_accuracy = 0;
    if (acc.empty()) return;
    r.mean_accuracy = std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
    double ss = 0;
    for (double a : acc) ss += (a - r.mean_accuracy) * (a - r.mean_accuracy);
    r.std_accuracy = std::sqrt(ss / static_cast<double>(acc.size()));
}

inline json to_json(const TrainReport& r) {
    json seeds = json::array();
    for (const auto& s : r.seeds) seeds.push_back(to_json(s));
    auto config = to_json(r.config);
    config.erase("seed");
    return {{"config", config},
            {"seeds", seeds},
            {"mean_accuracy", r.mean_accuracy},
            {"std_accuracy", r.std_accuracy},
            {"failed_seeds", r.failed}};
}

/// Trains one probe per seed (seeds base, base+1, ...) in parallel. Results are
/// independent of `workers`. `on_checkpoint` receives each successful checkpoint.
template <typename OnCheckpoint>
TrainReport train_seeds(const TrainData& data, const ProbeConfig& config, std::size_t count, std::size_t workers,
                        OnCheckpoint&& on_checkpoint) {
    TrainReport report;
    report.config = config;
    report.config.input_size = static_cast<std::size_t>(data.train.x.rows());
    report.seeds.resize(count);
    std::vector<std::optional<Checkpoint>> checkpoints(count);
    parallel_for(count, workers, [&](std::size_t i) {
        ProbeConfig c = config;
        c.seed = config.seed + i;
        auto [result, ck] = train(data, c);
        report.seeds[i] = result;
        checkpoints[i] = std::move(ck);
    });
    for (std::size_t i = 0; i < count; ++i) {
        if (checkpoints[i]) on_checkpoint(i, *checkpoints[i]);
    }
    aggregate(report);
    return report;
}

inline TrainReport train_seeds(const TrainData& data, const ProbeConfig& config, std::size_t count,
                               std::size_t workers = 1) {
    return train_seeds(data, config, count, workers, [](std::size_t, const Checkpoint&) {});
}

// ---------------------------------------------------------------------------
// Checkpoint files: "HPRB", u32 version, u32 layer count, (u32 out, u32 in) per layer,
// u32 config length + config JSON, then float32 weights (row-major) and biases per
// layer, then the standardization mean and scale when present. All little-endian.

inline constexpr char kCheckpointMagic[4] = {'H', 'P', 'R', 'B'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    out.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw Error("truncated checkpoint");
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_f32(std::ostream& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
}

inline float get_f32(std::istream& in) {
    const auto bits = get_u32(in);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(fmt::format("cannot write {}", path.string()));
    out.write(kCheckpointMagic, 4);
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(ck.net.layers()));
    for (std::size_t l = 0; l < ck.net.layers(); ++l) {
        detail::put_u32(out, static_cast<std::uint32_t>(ck.net.weights[l].rows()));
        detail::put_u32(out, static_cast<std::uint32_t>(ck.net.weights[l].cols()));
    }
    auto meta = to_json(ck.config);
    meta["standardized"] = !ck.mean.empty();
    const auto text = meta.dump();
    detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (std::size_t l = 0; l < ck.net.layers(); ++l) {
        const auto& w = ck.net.weights[l];
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) detail::put_f32(out, w(r, c));
        for (Eigen::Index r = 0; r < ck.net.biases[l].size(); ++r) detail::put_f32(out, ck.net.biases[l](r));
    }
    for (float v : ck.mean) detail::put_f32(out, v);
    for (float v : ck.scale) detail::put_f32(out, v);
    if (!out) throw Error(fmt::format("failed writing {}", path.string()));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(fmt::format("cannot open {}", path.string()));
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw Error(fmt::format("{} is not a probe checkpoint", path.string()));
    if (auto v = detail::get_u32(in); v != kCheckpointVersion)
        throw Error(fmt::format("unsupported checkpoint version {}", v));
    const auto layers = detail::get_u32(in);
    std::vector<std::size_t> sizes;
    for (std::uint32_t l = 0; l < layers; ++l) {
        const auto rows = detail::get_u32(in);
        const auto cols = detail::get_u32(in);
        if (l == 0) sizes.push_back(cols);
        else if (sizes.back() != cols) throw Error("checkpoint layer shapes do not chain");
        sizes.push_back(rows);
    }
    const auto length = detail::get_u32(in);
    std::string text(length, '\0');
    if (!in.read(text.data(), length)) throw Error("truncated checkpoint");
    const auto meta = json::parse(text);
    Checkpoint ck{config_from_json(meta), Mlp<float>(sizes), {}, {}};
    for (std::size_t l = 0; l < ck.net.layers(); ++l) {
        auto& w = ck.net.weights[l];
        for (Eigen::Index r = 0; r < w.rows(); ++r)
            for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = detail::get_f32(in);
        for (Eigen::Index r = 0; r < ck.net.biases[l].size(); ++r) ck.net.biases[l](r) = detail::get_f32(in);
    }
    if (meta.value("standardized", false)) {
        ck.mean.resize(sizes.front());
        ck.scale.resize(sizes.front());
        for (auto& v : ck.mean) v = detail::get_f32(in);
        for (auto& v : ck.scale) v = detail::get_f32(in);
    }
    if (in.peek() != std::char_traits<char>::eof()) throw Error("trailing bytes after checkpoint");
    return ck;
}

}  // namespace hallu::probe
