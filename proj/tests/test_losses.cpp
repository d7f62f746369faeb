#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "encofa/backbone.hpp"
#include "encofa/losses.hpp"

using namespace encofa;

namespace {

std::vector<double> random_simplex(std::mt19937_64& gen, int k) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> p(static_cast<std::size_t>(k));
    double s = 0;
    for (double& v : p) s += (v = e(gen));
    for (double& v : p) v /= s;
    return p;
}

double entropy(const std::vector<double>& p) {
    double h = 0;
    for (double v : p)
        if (v > 0) h -= v * std::log(v);
    return h;
}

// Direct evaluation of the weighted contrastive formula with plain loops.
double ensc_direct(const Matrix& z, const std::vector<int>& y, const std::vector<double>& w, double tau) {
    const int n = static_cast<int>(z.cols());
    double total = 0;
    int anchors = 0;
    for (int i = 0; i < n; ++i) {
        double denom = 0;
        for (int a = 0; a < n; ++a)
            if (a != i) denom += w[i] * w[a] * std::exp(z.col(i).dot(z.col(a)) / tau);
        double sum = 0;
        int np = 0;
        for (int p = 0; p < n; ++p) {
            if (p == i || y[p] != y[i]) continue;
            sum += std::log(w[i] * w[p] * std::exp(z.col(i).dot(z.col(p)) / tau) / denom);
            ++np;
        }
        if (np == 0) continue;
        total += -sum / np;
        ++anchors;
    }
    return anchors ? total / anchors : 0.0;
}

Matrix unit_circle(std::initializer_list<double> degrees) {
    Matrix z(2, static_cast<Eigen::Index>(degrees.size()));
    Eigen::Index c = 0;
    for (double d : degrees) {
        const double r = d * std::acos(-1.0) / 180.0;
        z.col(c++) << std::cos(r), std::sin(r);
    }
    return z;
}

Matrix random_unit_columns(std::mt19937_64& gen, int d, int n) {
    std::normal_distribution<double> nd;
    Matrix z(d, n);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = nd(gen);
    z.colwise().normalize();
    return z;
}

SupervisionRecord clean_record(int label) { return {label, label, 1.0, NoiseType::clean}; }

}  // namespace

TEST(PseudoLabel, OneHotIsFixed) {
    const std::vector<double> e = {0, 1, 0};
    EXPECT_EQ(pseudo_label(e, e), e);
}

TEST(PseudoLabel, SymmetricViewsAverageToUniform) {
    const std::vector<double> a = {0.6, 0.4}, b = {0.4, 0.6};
    const auto p = pseudo_label(a, b);
    EXPECT_NEAR(p[0], 0.5, 1e-15);
    EXPECT_NEAR(p[1], 0.5, 1e-15);
}

TEST(PseudoLabel, SquaresThenNormalizes) {
    const std::vector<double> a = {0.9, 0.1}, b = {0.7, 0.3};
    const auto p = pseudo_label(a, b);
    EXPECT_NEAR(p[0], 16.0 / 17.0, 1e-12);
    EXPECT_NEAR(p[1], 1.0 / 17.0, 1e-12);
}

TEST(PseudoLabel, NeverRaisesEntropy) {
    std::mt19937_64 gen(1);
    for (int t = 0; t < 1000; ++t) {
        const auto a = random_simplex(gen, 5), b = random_simplex(gen, 5);
        std::vector<double> mean(5);
        for (int c = 0; c < 5; ++c) mean[c] = (a[c] + b[c]) / 2;
        const auto p = pseudo_label(a, b);
        double s = 0;
        for (double v : p) s += v;
        EXPECT_NEAR(s, 1.0, 1e-9);
        EXPECT_LE(entropy(p), entropy(mean) + 1e-12);
    }
}

TEST(PseudoWeights, SeparatedClustersGetExtremeWeights) {
    std::mt19937_64 gen(2);
    std::normal_distribution<double> lo(0.1, 0.02), hi(1.1, 0.02);
    std::vector<double> losses;
    for (int i = 0; i < 100; ++i) {
        losses.push_back(lo(gen));
        losses.push_back(hi(gen));
    }
    const auto w = pseudo_weights(losses);
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (i % 2 == 0)
            EXPECT_GT(w[i], 0.99);
        else
            EXPECT_LT(w[i], 0.01);
    }
}

TEST(PseudoWeights, IdenticalLossesGiveOneHalf) {
    const std::vector<double> losses(10, 0.4);
    for (double w : pseudo_weights(losses)) EXPECT_DOUBLE_EQ(w, 0.5);
    EXPECT_EQ(pseudo_weights(std::vector<double>{0.3}), std::vector<double>{0.5});
}

TEST(PseudoWeights, PermutationCommutes) {
    std::mt19937_64 gen(3);
    std::gamma_distribution<double> g(2.0, 0.3);
    std::vector<double> losses(60);
    for (double& v : losses) v = g(gen);
    const auto w = pseudo_weights(losses);
    std::vector<std::size_t> perm(losses.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);
    std::vector<double> permuted(losses.size());
    for (std::size_t i = 0; i < perm.size(); ++i) permuted[i] = losses[perm[i]];
    const auto wp = pseudo_weights(permuted);
    for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_NEAR(wp[i], w[perm[i]], 1e-8);
}

TEST(DynamicLabel, SingleClassAlwaysZero) {
    for (int id = 0; id < 20; ++id) EXPECT_EQ(dynamic_label(1, 3, id, 7), 0);
}

TEST(DynamicLabel, DeterministicAndEpochDependent) {
    EXPECT_EQ(dynamic_label(5, 4, 17, 9), dynamic_label(5, 4, 17, 9));
    int differ = 0;
    for (int e = 0; e < 50; ++e) differ += dynamic_label(5, e, 17, 9) != dynamic_label(5, e + 1, 17, 9);
    EXPECT_GT(differ, 20);
}

TEST(DynamicLabel, UniformWithinThreeSigma) {
    const int n = 100000, k = 5;
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
        const int c = dynamic_label(k, i % 7, i, 42);
        ASSERT_GE(c, 0);
        ASSERT_LT(c, k);
        counts[c]++;
    }
    const double sigma = std::sqrt(n * 0.2 * 0.8);
    for (int c : counts) EXPECT_LE(std::abs(c - n * 0.2), 3 * sigma);
}

TEST(CrossEntropy, UniformBinaryIsLnTwo) {
    EXPECT_NEAR(cross_entropy(Target{1}, std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
}

TEST(CrossEntropy, ZeroProbabilityIsClampedAndFlagged) {
    bool clamped = false;
    const double v = cross_entropy(Target{0}, std::vector<double>{0.0, 1.0}, &clamped);
    EXPECT_TRUE(clamped);
    EXPECT_NEAR(v, -std::log(kProbabilityFloor), 1e-9);
}

TEST(ClassificationLoss, PerfectPredictionIsZero) {
    Matrix p(3, 1);
    p << 0, 1, 0;
    const std::vector<SupervisionRecord> r = {clean_record(1)};
    EXPECT_DOUBLE_EQ(classification_loss(r, p).value, 0.0);
}

TEST(ClassificationLoss, ZeroWeightRemovesClosedBranch) {
    std::mt19937_64 gen(4);
    std::vector<SupervisionRecord> r = {clean_record(0), clean_record(2),
                                        {1, std::vector<double>{0.2, 0.7, 0.1}, 0.0, NoiseType::closed},
                                        {3, 1, 1.0, NoiseType::open}};
    Matrix p(3, 4);
    for (int c = 0; c < 4; ++c) p.col(c) = Eigen::Map<const Vector>(random_simplex(gen, 3).data(), 3);
    const auto l = classification_loss(r, p);
    EXPECT_DOUBLE_EQ(l.closed, 0.0);
    EXPECT_DOUBLE_EQ(l.value, l.clean + l.open);
}

TEST(ClassificationLoss, BranchesAddUp) {
    std::mt19937_64 gen(5);
    std::vector<SupervisionRecord> all;
    for (int i = 0; i < 12; ++i) {
        if (i % 3 == 0) all.push_back(clean_record(i % 4));
        if (i % 3 == 1) all.push_back({1, random_simplex(gen, 4), 0.3 + 0.05 * i, NoiseType::closed});
        if (i % 3 == 2) all.push_back({4, i % 4, 1.0, NoiseType::open});
    }
    Matrix p(4, 12);
    for (int c = 0; c < 12; ++c) p.col(c) = Eigen::Map<const Vector>(random_simplex(gen, 4).data(), 4);
    const auto joint = classification_loss(all, p);
    double summed = 0;
    for (auto kind : {NoiseType::clean, NoiseType::closed, NoiseType::open}) {
        std::vector<SupervisionRecord> part;
        std::vector<Eigen::Index> cols;
        for (std::size_t i = 0; i < all.size(); ++i)
            if (all[i].kind == kind) {
                part.push_back(all[i]);
                cols.push_back(static_cast<Eigen::Index>(i));
            }
        summed += classification_loss(part, p(Eigen::all, cols)).value;
    }
    EXPECT_NEAR(joint.value, summed, 1e-12);
}

TEST(ClassificationLoss, LogitGradientMatchesFiniteDifferences) {
    std::mt19937_64 gen(6);
    std::normal_distribution<double> nd;
    std::vector<SupervisionRecord> r = {clean_record(0), clean_record(2),
                                        {1, random_simplex(gen, 3), 0.6, NoiseType::closed},
                                        {2, random_simplex(gen, 3), 0.2, NoiseType::closed},
                                        {3, 1, 1.0, NoiseType::open}};
    Matrix logits(3, 5);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = nd(gen);
    const auto base = classification_loss(r, softmax_columns(logits));
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
        Matrix a = logits, b = logits;
        a.data()[i] += h;
        b.data()[i] -= h;
        const double fd =
            (classification_loss(r, softmax_columns(a)).value - classification_loss(r, softmax_columns(b)).value) /
            (2 * h);
        EXPECT_NEAR(base.d_logits.data()[i], fd, 1e-7);
    }
}

TEST(Ensc, SameClassPairIsZero) {
    const Matrix z = unit_circle({0, 40});
    const std::vector<int> y = {1, 1};
    const std::vector<double> w = {1, 1};
    EXPECT_NEAR(ensc_loss(z, y, w, 0.2).value, 0.0, 1e-12);
}

TEST(Ensc, SingletonClassesContributeNothing) {
    const Matrix z = unit_circle({0, 90, 180});
    const std::vector<int> y = {0, 1, 2};
    const std::vector<double> w = {1, 1, 1};
    const auto l = ensc_loss(z, y, w, 0.2);
    EXPECT_DOUBLE_EQ(l.value, 0.0);
    EXPECT_EQ(l.contributing_anchors, 0);
    EXPECT_TRUE(l.d_z.isZero());
}

TEST(Ensc, ThreePointsMatchDirectEvaluation) {
    const Matrix z = unit_circle({0, 10, 180});
    const std::vector<int> y = {0, 0, 1};
    const std::vector<double> w = {1, 1, 1};
    const auto l = ensc_loss(z, y, w, 0.2);
    EXPECT_NEAR(l.value, ensc_direct(z, y, w, 0.2), 1e-9);
    EXPECT_EQ(l.contributing_anchors, 2);
}

TEST(Ensc, RandomBatchesMatchDirectEvaluation) {
    std::mt19937_64 gen(7);
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (int t = 0; t < 20; ++t) {
        const Matrix z = random_unit_columns(gen, 6, 10);
        std::vector<int> y(10);
        std::vector<double> w(10);
        for (int i = 0; i < 10; ++i) {
            y[i] = static_cast<int>(gen() % 4);
            w[i] = u(gen);
        }
        EXPECT_NEAR(ensc_loss(z, y, w, 0.2).value, ensc_direct(z, y, w, 0.2), 1e-9);
    }
}

TEST(Ensc, InvariantToWeightScale) {
    std::mt19937_64 gen(8);
    const Matrix z = random_unit_columns(gen, 5, 12);
    std::vector<int> y(12);
    std::vector<double> w(12);
    for (int i = 0; i < 12; ++i) {
        y[i] = i % 3;
        w[i] = 0.2 + 0.05 * i;
    }
    const double base = ensc_loss(z, y, w, 0.2).value;
    for (double c : {0.01, 0.5, 3.0, 100.0}) {
        std::vector<double> scaled(w);
        for (double& v : scaled) v *= c;
        EXPECT_NEAR(ensc_loss(z, y, scaled, 0.2).value, base, 1e-9);
    }
}

TEST(Ensc, DecreasesAsPositivePairAligns) {
    // Negatives sit on the third axis, so only the positive cosine moves.
    const std::vector<int> y = {0, 0, 1, 1};
    const std::vector<double> w = {1, 0.8, 0.9, 1};
    double prev = std::numeric_limits<double>::infinity();
    for (double angle = 170; angle >= 0; angle -= 10) {
        const double r = angle * std::acos(-1.0) / 180.0;
        Matrix z(3, 4);
        z.col(0) << 1, 0, 0;
        z.col(1) << std::cos(r), std::sin(r), 0;
        z.col(2) << 0, 0, 1;
        z.col(3) << 0, 0, -1;
        const double v = ensc_loss(z, y, w, 0.2).value;
        EXPECT_LT(v, prev) << "angle " << angle;
        prev = v;
    }
}

TEST(Ensc, GradientMatchesFiniteDifferences) {
    std::mt19937_64 gen(9);
    std::uniform_real_distribution<double> u(0.2, 1.0);
    const Matrix z = random_unit_columns(gen, 16, 8);
    const std::vector<int> y = {0, 1, 2, 0, 1, 3, 0, 2};
    std::vector<double> w(8);
    for (double& v : w) v = u(gen);
    const double lambda = 1.5, tau = 0.2;
    const Matrix grad = lambda * ensc_loss(z, y, w, tau).d_z;
    const double h = 1e-5;
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        Matrix a = z, b = z;
        a.data()[i] += h;
        b.data()[i] -= h;
        const double fd = (total_loss(0.0, ensc_loss(a, y, w, tau).value, lambda) -
                           total_loss(0.0, ensc_loss(b, y, w, tau).value, lambda)) /
                          (2 * h);
        EXPECT_LE(std::abs(grad.data()[i] - fd), 1e-4 * std::max(1e-3, std::abs(fd))) << "entry " << i;
    }
}

TEST(Ensc, ZeroWeightPositiveIsSkippedAndFlagged) {
    const Matrix z = unit_circle({0, 10, 20, 180});
    const std::vector<int> y = {0, 0, 0, 1};
    const std::vector<double> w = {1, 0, 1, 1};
    const auto l = ensc_loss(z, y, w, 0.2);
    EXPECT_TRUE(l.skipped_zero_weight);
    EXPECT_TRUE(std::isfinite(l.value));
    EXPECT_TRUE(l.d_z.allFinite());
}

TEST(RefineLabels, AllCleanKeepsObserved) {
    Partition part;
    part.clean = {0, 1, 2};
    const std::vector<int> observed = {2, 0, 1};
    const auto r = refine_labels(part, {.observed = observed}, 3);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(r[i].refined_label, observed[i]);
        EXPECT_EQ(r[i].kind, NoiseType::clean);
        EXPECT_DOUBLE_EQ(r[i].weight, 1.0);
    }
}

TEST(RefineLabels, ClosedUsesArgmaxAndOpenUsesExtraClass) {
    Partition part;
    part.clean = {0};
    part.closed_noisy = {1};
    part.open_noisy = {2};
    const std::vector<int> observed = {4, 0, 3};
    const std::vector<std::vector<double>> pseudo = {{}, {0.1, 0.7, 0.2, 0, 0}, {}};
    const std::vector<double> weights = {0, 0.35, 0};
    const std::vector<int> dynamic = {0, 0, 2};
    const auto r = refine_labels(part, {observed, pseudo, weights, dynamic}, 5);
    EXPECT_EQ(r[1].refined_label, 1);
    EXPECT_DOUBLE_EQ(r[1].weight, 0.35);
    EXPECT_EQ(std::get<std::vector<double>>(r[1].target), pseudo[1]);
    EXPECT_EQ(r[2].refined_label, 5);
    EXPECT_EQ(std::get<int>(r[2].target), 2);
    EXPECT_DOUBLE_EQ(r[2].weight, 1.0);
}

TEST(RefineLabels, RejectsOverlappingPartition) {
    Partition part;
    part.clean = {0, 1};
    part.open_noisy = {1};
    const std::vector<int> observed = {0, 1};
    const std::vector<int> dynamic = {0, 0};
    EXPECT_ANY_THROW(refine_labels(part, {.observed = observed, .dynamic = dynamic}, 2));
}

TEST(TotalLoss, WeightedSum) {
    EXPECT_DOUBLE_EQ(total_loss(1.3, 5.0, 0.0), 1.3);
    EXPECT_DOUBLE_EQ(total_loss(1.0, 2.0, 1.5), 4.0);
    EXPECT_DOUBLE_EQ(HyperParams{}.lambda, 1.0);
}

TEST(HyperParams, ValidateNamesOffendingKey) {
    HyperParams hp;
    hp.tau = 0.0;
    try {
        hp.validate();
        FAIL() << "expected ConfigError";
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("encofa.tau"), std::string::npos);
    }
    hp = {};
    hp.lambda = -1;
    EXPECT_THROW(hp.validate(), ConfigError);
}
