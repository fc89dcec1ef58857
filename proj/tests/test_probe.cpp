#include <random>

#include <gtest/gtest.h>

#include "hallu/probe.hpp"

using namespace hallu;
using namespace hallu::probe;
namespace fs = std::filesystem;

namespace {

using MlpD = Mlp<double>;

// Two Gaussian blobs in `dim` dimensions whose means are `distance` apart.
Samples blobs(std::size_t n, std::size_t dim, double distance, std::uint64_t seed) {
    KeyedRng rng(seed, "blobs");
    std::normal_distribution<double> normal;
    Samples s;
    s.x.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n));
    s.y.resize(static_cast<Eigen::Index>(n));
    const double shift = distance / (2 * std::sqrt(static_cast<double>(dim)));
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % 2);
        s.y(static_cast<Eigen::Index>(i)) = static_cast<float>(label);
        for (std::size_t d = 0; d < dim; ++d)
            s.x(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(i)) =
                static_cast<float>(normal(rng) + (label ? shift : -shift));
    }
    return s;
}

ProbeConfig fast_config() {
    ProbeConfig c;
    c.learning_rate = 1e-3;
    c.max_epochs = 40;
    c.patience = 5;
    c.batch_size = 32;
    return c;
}

}  // namespace

TEST(Mlp, ZeroParametersGiveOneHalf) {
    MlpD net({64, 256, 128, 64, 1});
    KeyedRng rng(1, "x");
    std::vector<double> x(64);
    for (auto& v : x) v = rng.uniform() * 100 - 50;
    EXPECT_EQ(net.probability(x), 0.5);
    EXPECT_EQ(net.parameter_count(), 64u * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 + 1);
    std::vector<double> wrong(63);
    EXPECT_THROW(net.probability(wrong), Error);
}

TEST(Mlp, HandComputedForwardPass) {
    MlpD net({3, 2, 2, 2, 1});
    net.weights[0] << 1, 0, 1, 0, 1, -1;
    net.biases[0] << 0, 0.5;
    net.weights[1] << 1, 1, -1, 0.5;
    net.biases[1] << 0, -1;
    net.weights[2] << 0.5, -2, 1, 1;
    net.biases[2] << 0, 0;
    net.weights[3] << 2, -0.5;
    net.biases[3] << 0.1;
    // x = (1, 2, -1): layer 1 (0, 3.5), layer 2 (3.5, 0.75), layer 3 (0.25, 4.25), logit -1.525.
    MlpD::Matrix x(3, 1);
    x << 1, 2, -1;
    EXPECT_NEAR(net.logits(x)(0), -1.525, 1e-12);
    EXPECT_NEAR(net.probabilities(x)(0), 0.17872642365885047, 1e-12);
    MlpD::Row y(1);
    y << 1;
    EXPECT_NEAR(net.loss(x, y), 1.721899001721834, 1e-12);
}

TEST(Mlp, BceIsStableForLargeLogits) {
    MlpD::Row z(2), y(2);
    z << 800, -800;
    y << 1, 0;
    EXPECT_NEAR(MlpD::mean_bce(z, y), 0.0, 1e-12);
    y << 0, 1;
    EXPECT_NEAR(MlpD::mean_bce(z, y), 800.0, 1e-9);
    EXPECT_EQ(MlpD::sigmoid(-800), 0.0);
    EXPECT_EQ(MlpD::sigmoid(800), 1.0);
}

TEST(Mlp, GradientsMatchCentralDifferences) {
    for (int trial = 0; trial < 5; ++trial) {
        auto net = MlpD::initialized({7, 9, 6, 5, 1}, 100 + trial);
        KeyedRng rng(trial, "gc");
        MlpD::Matrix x(7, 4);
        MlpD::Row y(4);
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform() * 4 - 2;
        for (Eigen::Index i = 0; i < 4; ++i) y(i) = static_cast<double>(i % 2);
        const auto masks = net.draw_masks(4, 0.3, rng);
        for (const MlpD::Masks* m : {static_cast<const MlpD::Masks*>(nullptr), &masks}) {
            MlpD::Gradients g;
            net.loss_and_gradients(x, y, m, g);
            auto loss_at = [&](const MlpD& n) {
                MlpD::Gradients unused;
                return n.loss_and_gradients(x, y, m, unused);
            };
            const double h = 1e-6;
            for (std::size_t l = 0; l < net.layers(); ++l) {
                for (Eigen::Index k = 0; k < net.weights[l].size(); ++k) {
                    auto plus = net, minus = net;
                    plus.weights[l].data()[k] += h;
                    minus.weights[l].data()[k] -= h;
                    const double numeric = (loss_at(plus) - loss_at(minus)) / (2 * h);
                    EXPECT_NEAR(g.weights[l].data()[k], numeric, 1e-6 + 1e-4 * std::abs(numeric));
                }
                for (Eigen::Index k = 0; k < net.biases[l].size(); ++k) {
                    auto plus = net, minus = net;
                    plus.biases[l](k) += h;
                    minus.biases[l](k) -= h;
                    const double numeric = (loss_at(plus) - loss_at(minus)) / (2 * h);
                    EXPECT_NEAR(g.biases[l](k), numeric, 1e-6 + 1e-4 * std::abs(numeric));
                }
            }
        }
    }
}

TEST(Mlp, DropoutMasksAreInvertedAndSeeded) {
    auto net = MlpD::initialized({50, 40, 30, 20, 1}, 3);
    KeyedRng a(9, "m"), b(9, "m");
    auto m1 = net.draw_masks(200, 0.15, a);
    auto m2 = net.draw_masks(200, 0.15, b);
    ASSERT_EQ(m1.layers.size(), 4u);
    std::size_t zeros = 0, total = 0;
    for (std::size_t l = 0; l < m1.layers.size(); ++l) {
        EXPECT_EQ(m1.layers[l], m2.layers[l]);
        for (Eigen::Index i = 0; i < m1.layers[l].size(); ++i) {
            const double v = m1.layers[l].data()[i];
            EXPECT_TRUE(v == 0.0 || std::abs(v - 1 / 0.85) < 1e-12);
            zeros += v == 0.0;
            ++total;
        }
    }
    EXPECT_NEAR(static_cast<double>(zeros) / static_cast<double>(total), 0.15, 0.01);
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    MlpD net({1, 1, 1, 1, 1});
    for (auto& w : net.weights) w.setConstant(2.0);
    ProbeConfig c;
    c.learning_rate = 0.01;
    c.weight_decay = 0.1;
    AdamW<double> opt(net, c);
    MlpD::Gradients g{{}, {}};
    for (std::size_t l = 0; l < 4; ++l) {
        g.weights.push_back(MlpD::Matrix::Constant(1, 1, l % 2 ? -0.3 : 5.0));
        g.biases.push_back(MlpD::Vector::Zero(1));
    }
    opt.step(net, g);
    // decay first: 2 * (1 - 0.01 * 0.1) = 1.998, then -lr * sign(g) (bias-corrected m/sqrt(v) = g/|g|).
    EXPECT_NEAR(net.weights[0](0, 0), 1.998 - 0.01, 1e-9);
    EXPECT_NEAR(net.weights[1](0, 0), 1.998 + 0.01, 1e-9);
    EXPECT_EQ(net.biases[0](0), 0.0);
}

TEST(EarlyStopping, StrictlyIncreasingLossStopsAtPatiencePlusOne) {
    std::vector<std::size_t> snapshots;
    auto r = run_epochs(800, 30, [](std::size_t e) { return static_cast<double>(e); },
                        [&](std::size_t e) { snapshots.push_back(e); });
    EXPECT_EQ(r.epochs_run, 31u);
    EXPECT_EQ(r.best_epoch, 1u);
    EXPECT_EQ(snapshots, std::vector<std::size_t>{1});
}

TEST(EarlyStopping, MaxEpochsCapsDecreasingLoss) {
    auto r = run_epochs(5, 30, [](std::size_t e) { return 1.0 / static_cast<double>(e); }, [](std::size_t) {});
    EXPECT_EQ(r.epochs_run, 5u);
    EXPECT_EQ(r.best_epoch, 5u);
    EXPECT_DOUBLE_EQ(r.best_loss, 0.2);
}

TEST(EarlyStopping, EqualLossIsNotAnImprovement) {
    // 1.0, 0.5, 0.5, 0.5, ...: epoch 2 stays best and the loop stops at 2 + patience.
    std::size_t calls = 0;
    auto r = run_epochs(100, 3, [](std::size_t e) { return e == 1 ? 1.0 : 0.5; }, [&](std::size_t) { ++calls; });
    EXPECT_EQ(r.best_epoch, 2u);
    EXPECT_EQ(r.epochs_run, 5u);
    EXPECT_EQ(calls, 2u);
    EXPECT_EQ(r.history.size(), 5u);
}

TEST(EarlyStopping, NonFiniteLossThrows) {
    EXPECT_THROW(run_epochs(10, 3, [](std::size_t e) { return e == 2 ? std::nan("") : 1.0; }, [](std::size_t) {}),
                 NonFiniteLoss);
    EXPECT_THROW(run_epochs(0, 3, [](std::size_t) { return 1.0; }, [](std::size_t) {}), Error);
}

TEST(Evaluate, ThresholdIsInclusive) {
    RowF p(4), y(4);
    p << 0.5f, 0.49f, 0.9f, 0.1f;
    y << 1, 0, 0, 0;
    EXPECT_DOUBLE_EQ(accuracy(p, y, 0.5), 0.75);
    EXPECT_DOUBLE_EQ(accuracy(p, y, 0.95), 0.75);
    EXPECT_THROW(accuracy(RowF(0), RowF(0), 0.5), Error);
}

TEST(Evaluate, ZeroNetPredictsPositive) {
    Checkpoint ck{ProbeConfig{}, Mlp<float>({4, 3, 3, 3, 1}), {}, {}};
    Samples s;
    s.x = MatrixF::Random(4, 10);
    s.y = RowF::Zero(10);
    s.y.head(3).setOnes();
    EXPECT_DOUBLE_EQ(evaluate(ck, s), 0.3);
    EXPECT_DOUBLE_EQ(evaluate(ck, s, 0.6), 0.7);
    EXPECT_THROW(evaluate(ck, Samples{MatrixF(4, 0), RowF(0)}), Error);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    auto dir = fs::temp_directory_path() / "hallu_probe_ck";
    fs::create_directories(dir);
    for (bool standardized : {false, true}) {
        ProbeConfig c = fast_config();
        c.input_size = 6;
        c.seed = 77;
        Checkpoint ck{c, Mlp<float>::initialized(c.layer_sizes(), 77), {}, {}};
        if (standardized) {
            ck.config.standardize = true;
            ck.mean = {1, 2, 3, 4, 5, 6};
            ck.scale = {0.5f, 1, 2, 4, 8, 16};
        }
        const auto path = dir / (standardized ? "s.hprb" : "p.hprb");
        write_checkpoint(path, ck);
        auto back = read_checkpoint(path);
        EXPECT_EQ(back.net.sizes(), ck.net.sizes());
        for (std::size_t l = 0; l < ck.net.layers(); ++l) {
            EXPECT_EQ(back.net.weights[l], ck.net.weights[l]);
            EXPECT_EQ(back.net.biases[l], ck.net.biases[l]);
        }
        EXPECT_EQ(back.mean, ck.mean);
        EXPECT_EQ(back.scale, ck.scale);
        EXPECT_EQ(to_json(back.config), to_json(ck.config));
        MatrixF x = MatrixF::Random(6, 5);
        EXPECT_EQ(back.probabilities(x), ck.probabilities(x));

        std::ifstream raw(path, std::ios::binary);
        char magic[4];
        raw.read(magic, 4);
        EXPECT_EQ(std::string(magic, 4), "HPRB");
    }
    {
        std::ofstream bad(dir / "bad.hprb", std::ios::binary);
        bad << "NOPE";
    }
    EXPECT_THROW(read_checkpoint(dir / "bad.hprb"), Error);
    fs::copy_file(dir / "p.hprb", dir / "trunc.hprb", fs::copy_options::overwrite_existing);
    fs::resize_file(dir / "trunc.hprb", fs::file_size(dir / "trunc.hprb") - 3);
    EXPECT_THROW(read_checkpoint(dir / "trunc.hprb"), Error);
    {
        std::ofstream extra(dir / "p.hprb", std::ios::binary | std::ios::app);
        extra << "x";
    }
    EXPECT_THROW(read_checkpoint(dir / "p.hprb"), Error);
}

TEST(Train, LearnsSeparableBlobsAndIsDeterministic) {
    TrainData data{blobs(400, 8, 4, 1), blobs(100, 8, 4, 2), blobs(200, 8, 4, 3)};
    auto c = fast_config();
    c.seed = 5;
    auto [r1, ck1] = train(data, c);
    auto [r2, ck2] = train(data, c);
    ASSERT_TRUE(r1.ok);
    ASSERT_TRUE(ck1);
    EXPECT_GE(r1.test_accuracy, 0.9);
    EXPECT_EQ(r1.test_accuracy, r2.test_accuracy);
    EXPECT_EQ(r1.best_epoch, r2.best_epoch);
    for (std::size_t l = 0; l < ck1->net.layers(); ++l) EXPECT_EQ(ck1->net.weights[l], ck2->net.weights[l]);
    EXPECT_LE(r1.best_epoch, r1.stop_epoch);
    EXPECT_EQ(ck1->net.sizes(), (std::vector<std::size_t>{8, 256, 128, 64, 1}));
}

TEST(Train, SeedsAreBasePlusIndexAndWorkerIndependent) {
    TrainData data{blobs(200, 6, 3, 1), blobs(60, 6, 3, 2), blobs(60, 6, 3, 3)};
    auto c = fast_config();
    c.max_epochs = 8;
    c.seed = 40;
    std::vector<std::size_t> seen;
    auto one = train_seeds(data, c, 3, 1, [&](std::size_t i, const Checkpoint& ck) {
        seen.push_back(i);
        EXPECT_EQ(ck.config.seed, 40 + i);
    });
    auto two = train_seeds(data, c, 3, 2);
    EXPECT_EQ(seen, (std::vector<std::size_t>{0, 1, 2}));
    ASSERT_EQ(one.seeds.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(one.seeds[i].seed, 40 + i);
        EXPECT_EQ(one.seeds[i].test_accuracy, two.seeds[i].test_accuracy);
    }
    EXPECT_EQ(to_json(one).dump(), to_json(two).dump());
}

TEST(Train, AggregateUsesPopulationStdAndSkipsFailures) {
    TrainReport r;
    r.seeds = {{1, true, "", 0.6}, {2, true, "", 0.8}, {3, false, "nan", 0}};
    aggregate(r);
    EXPECT_DOUBLE_EQ(r.mean_accuracy, 0.7);
    EXPECT_NEAR(r.std_accuracy, 0.1, 1e-12);
    EXPECT_EQ(r.failed, 1u);
    TrainReport single;
    single.seeds = {{1, true, "", 0.65}};
    aggregate(single);
    EXPECT_EQ(single.std_accuracy, 0.0);
}

TEST(Train, DivergenceIsReportedPerSeed) {
    TrainData data{blobs(64, 4, 3, 1), blobs(32, 4, 3, 2), blobs(32, 4, 3, 3)};
    data.train.x(0, 0) = std::numeric_limits<float>::infinity();
    auto c = fast_config();
    c.max_epochs = 3;
    auto report = train_seeds(data, c, 2);
    EXPECT_EQ(report.failed, 2u);
    EXPECT_FALSE(report.seeds[0].ok);
    EXPECT_NE(report.seeds[0].diagnostic.find("epoch"), std::string::npos);
}

TEST(Train, RejectsEmptyOrMismatchedSplits) {
    auto c = fast_config();
    TrainData empty{blobs(10, 4, 1, 1), Samples{MatrixF(4, 0), RowF(0)}, blobs(10, 4, 1, 3)};
    EXPECT_THROW(train(empty, c), Error);
    TrainData mismatched{blobs(10, 4, 1, 1), blobs(10, 5, 1, 2), blobs(10, 4, 1, 3)};
    EXPECT_THROW(train(mismatched, c), Error);
}
