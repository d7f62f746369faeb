#include <algorithm>
#include <cmath>
#include <fstream>
#include <filesystem>

#include <gtest/gtest.h>

#include "encofa/osfeataug.hpp"

using namespace encofa;

namespace {

ChannelMask mask_of(std::initializer_list<bool> bits) { return {std::vector<bool>(bits)}; }

Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out[i++] = x;
    return out;
}

}  // namespace

TEST(ChannelImportance, MinMaxOfHandExample) {
    Matrix g(4, 1);
    g << 2, 0, 1.2, 0.6;
    const auto imp = compute_channel_importance(g);
    EXPECT_FALSE(imp.constant_fallback);
    const Vector want = vec({1.0, 0.0, 0.6, 0.3});
    EXPECT_TRUE(imp.normalized.isApprox(want, 1e-12)) << imp.normalized.transpose();
}

TEST(ChannelImportance, IdenticalColumnsNormalizeThatColumn) {
    const Vector v = vec({-1, 3, 1, 0});
    Matrix g = v.replicate(1, 7);
    const auto imp = compute_channel_importance(g);
    EXPECT_TRUE(imp.raw.isApprox(v, 1e-12));
    EXPECT_TRUE(imp.normalized.isApprox(vec({0, 1, 0.5, 0.25}), 1e-12));
}

TEST(ChannelImportance, AveragesOverSamples) {
    Matrix g(2, 3);
    g << 1, 2, 3, 6, 0, 0;
    const auto imp = compute_channel_importance(g);
    EXPECT_TRUE(imp.raw.isApprox(vec({2, 2}), 1e-12));
    EXPECT_TRUE(imp.constant_fallback);
    const std::vector<std::size_t> cols = {0};
    const auto sub = compute_channel_importance(g, cols);
    EXPECT_TRUE(sub.raw.isApprox(vec({1, 6}), 1e-12));
}

TEST(ChannelImportance, ConstantVectorFallsBackToOnes) {
    Matrix g = Matrix::Constant(5, 3, 0.4);
    const auto imp = compute_channel_importance(g);
    EXPECT_TRUE(imp.constant_fallback);
    EXPECT_TRUE(imp.normalized.isOnes());
    EXPECT_EQ(select_general_channels(imp.normalized, 0.5).count(), 0u);
}

TEST(SelectGeneralChannels, StrictThreshold) {
    const Vector n = vec({1.0, 0.0, 0.6, 0.3});
    const auto m = select_general_channels(n, 0.5);
    EXPECT_EQ(m.general, (std::vector<bool>{false, true, false, true}));
    EXPECT_EQ(select_general_channels(n, 0.0).count(), 0u);
    EXPECT_EQ(select_general_channels(n, 0.3).general, (std::vector<bool>{false, true, false, false}));
}

TEST(AugmentFeature, ZeroProbabilityIsIdentity) {
    Rng rng(1);
    const Vector a = vec({1, 2, 3, 4}), b = vec({5, 6, 7, 8});
    for (int t = 0; t < 100; ++t) EXPECT_EQ(augment_feature(a, b, mask_of({true, true, true, true}), 0.0, rng), a);
}

TEST(AugmentFeature, EmptyMaskIsIdentity) {
    Rng rng(2);
    const Vector a = vec({1, 2, 3, 4}), b = vec({5, 6, 7, 8});
    for (int t = 0; t < 100; ++t)
        EXPECT_EQ(augment_feature(a, b, mask_of({false, false, false, false}), 1.0, rng), a);
}

TEST(AugmentFeature, SwapsGeneralChannelsOnly) {
    Rng rng(3);
    const Vector a = vec({1, 2, 3, 4}), b = vec({5, 6, 7, 8});
    bool swapped = false;
    const Vector out = augment_feature(a, b, mask_of({false, true, false, true}), 1.0, rng, &swapped);
    EXPECT_TRUE(swapped);
    EXPECT_EQ(out, vec({1, 6, 3, 8}));
}

TEST(AugmentFeature, SpecificChannelsAlwaysPreserved) {
    Rng rng(4);
    const ChannelMask m = mask_of({true, false, false, true, false});
    for (int t = 0; t < 500; ++t) {
        const Vector a = Vector::Random(5), b = Vector::Random(5);
        const Vector out = augment_feature(a, b, m, 0.5, rng);
        ASSERT_EQ(out.size(), 5);
        for (Eigen::Index c = 0; c < 5; ++c)
            if (!m.general[static_cast<std::size_t>(c)]) EXPECT_EQ(out[c], a[c]);
    }
}

TEST(AugmentFeature, SwapFrequencyWithinThreeSigma) {
    Rng rng(5);
    const Vector a = vec({0, 0}), b = vec({1, 1});
    const int n = 10000;
    int fired = 0;
    for (int t = 0; t < n; ++t) {
        bool s = false;
        augment_feature(a, b, mask_of({true, false}), 0.7, rng, &s);
        fired += s;
    }
    EXPECT_LE(std::abs(fired - 0.7 * n), 3 * std::sqrt(n * 0.7 * 0.3));
}

TEST(AugmentBatch, OnlyMembersChangeAndDonorsAreOthers) {
    Rng rng(6);
    Matrix f = Matrix::Random(6, 10);
    const std::vector<std::size_t> members = {1, 4, 7};
    const ChannelMask m = mask_of({true, true, false, false, true, false});
    const auto aug = augment_batch(f, members, m, 1.0, rng);
    ASSERT_EQ(aug.swaps.size(), members.size());
    for (Eigen::Index c = 0; c < 10; ++c) {
        const bool member = std::find(members.begin(), members.end(), static_cast<std::size_t>(c)) != members.end();
        if (!member) EXPECT_EQ(aug.features.col(c), f.col(c));
    }
    for (const auto& s : aug.swaps) {
        EXPECT_TRUE(s.fired);
        EXPECT_NE(s.donor, s.member);
        for (Eigen::Index ch = 0; ch < 6; ++ch) {
            const auto src = m.general[static_cast<std::size_t>(ch)] ? s.donor : s.member;
            EXPECT_EQ(aug.features(ch, static_cast<Eigen::Index>(s.member)), f(ch, static_cast<Eigen::Index>(src)));
        }
    }
}

TEST(AugmentBatch, DonorsCoverBatchUniformly) {
    Rng rng(7);
    Matrix f = Matrix::Random(2, 5);
    const std::vector<std::size_t> members = {2};
    std::vector<int> counts(5, 0);
    const int n = 20000;
    for (int t = 0; t < n; ++t) counts[augment_batch(f, members, mask_of({true, false}), 1.0, rng).swaps[0].donor]++;
    EXPECT_EQ(counts[2], 0);
    const double sigma = std::sqrt(n * 0.25 * 0.75);
    for (int c : {0, 1, 3, 4}) EXPECT_LE(std::abs(counts[c] - n * 0.25), 3 * sigma);
}

TEST(AugmentBatch, SingletonBatchHasNoDonor) {
    Rng rng(8);
    Matrix f = Matrix::Random(3, 1);
    const std::vector<std::size_t> members = {0};
    const auto aug = augment_batch(f, members, mask_of({true, true, true}), 1.0, rng);
    EXPECT_TRUE(aug.no_donor);
    EXPECT_EQ(aug.features, f);
}

TEST(RouteGradient, GeneralChannelsFlowToDonor) {
    Rng rng(9);
    Matrix f = Matrix::Random(4, 3);
    const std::vector<std::size_t> members = {0};
    const ChannelMask m = mask_of({true, false, true, false});
    const auto aug = augment_batch(f, members, m, 1.0, rng);
    const std::size_t donor = aug.swaps[0].donor;
    Matrix d = Matrix::Random(4, 3);
    const Matrix routed = route_gradient(d, aug, m);
    for (Eigen::Index ch = 0; ch < 4; ++ch) {
        const bool g = m.general[static_cast<std::size_t>(ch)];
        EXPECT_DOUBLE_EQ(routed(ch, 0), g ? 0.0 : d(ch, 0));
        const auto di = static_cast<Eigen::Index>(donor);
        EXPECT_DOUBLE_EQ(routed(ch, di), d(ch, di) + (g ? d(ch, 0) : 0.0));
    }
    EXPECT_NEAR(routed.sum(), d.sum(), 1e-12);
}

TEST(RouteGradient, MatchesFiniteDifferencesOfLinearProbe) {
    // L = sum(W .* augment(F)); dL/dF from routing must match perturbing F.
    Rng rng(10);
    Matrix f = Matrix::Random(5, 6);
    const Matrix w = Matrix::Random(5, 6);
    const std::vector<std::size_t> members = {1, 3, 5};
    const ChannelMask m = mask_of({false, true, true, false, true});
    const auto aug = augment_batch(f, members, m, 0.6, rng);
    const Matrix routed = route_gradient(w, aug, m);
    auto replay = [&](const Matrix& x) {
        Matrix out = x;
        for (const auto& s : aug.swaps)
            if (s.fired)
                for (Eigen::Index ch = 0; ch < 5; ++ch)
                    if (m.general[static_cast<std::size_t>(ch)])
                        out(ch, static_cast<Eigen::Index>(s.member)) = x(ch, static_cast<Eigen::Index>(s.donor));
        return (w.array() * out.array()).sum();
    };
    for (Eigen::Index i = 0; i < f.size(); ++i) {
        Matrix a = f, b = f;
        a.data()[i] += 1e-6;
        b.data()[i] -= 1e-6;
        EXPECT_NEAR(routed.data()[i], (replay(a) - replay(b)) / 2e-6, 1e-8);
    }
}

TEST(WriteMaskCsv, HeaderAndRows) {
    Matrix g(3, 1);
    g << 0, 1, 0.5;
    const auto imp = compute_channel_importance(g);
    const auto m = select_general_channels(imp.normalized, 0.1);
    const auto file = std::filesystem::temp_directory_path() / "encofa_mask_test.csv";
    write_mask_csv(file, imp, m);
    std::ifstream in(file);
    std::string header, row;
    std::getline(in, header);
    EXPECT_EQ(header, "channel,importance,is_general");
    std::getline(in, row);
    EXPECT_EQ(row, "0,0,1");
    std::filesystem::remove(file);
}
