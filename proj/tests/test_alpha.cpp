#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "cbpo/alpha.hpp"
#include "cbpo/datagen.hpp"

using namespace cbpo;

namespace {

// Samples whose completion tokens come from `support` uniformly.
std::vector<Sample> from_support(const std::vector<Token>& support, std::size_t n, std::size_t len, Rng& rng) {
    std::vector<Sample> out;
    for (std::size_t i = 0; i < n; ++i) {
        Sample s{"u", {0}, TokenSeq(len), Split::train};
        for (auto& t : s.y) t = support[rng.below(support.size())];
        out.push_back(s);
    }
    return out;
}

double accuracy(const ProxyClassifier& clf, const std::vector<Sample>& pos, const std::vector<Sample>& neg) {
    double ok = 0;
    for (const auto& s : pos) ok += clf.predict(s) > 0.5;
    for (const auto& s : neg) ok += clf.predict(s) <= 0.5;
    return ok / static_cast<double>(pos.size() + neg.size());
}

double mean_prediction(const ProxyClassifier& clf, const std::vector<Sample>& xs) {
    double s = 0;
    for (const auto& x : xs) s += clf.predict(x);
    return s / static_cast<double>(xs.size());
}

}  // namespace

TEST(Embed, Examples) {
    const Sample a{"u", {}, {0, 0}, Split::train};
    EXPECT_EQ(embed(a, 4), (std::vector<double>{1, 0, 0, 0}));
    const Sample b{"u", {}, {0, 1}, Split::train};
    const auto e = embed(b, 4);
    EXPECT_NEAR(e[0], 1 / std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(e[1], 1 / std::sqrt(2.0), 1e-15);
    EXPECT_EQ(e[2], 0.0);
    const Sample c{"u", {}, {3, 1, 3, 2}, Split::train};
    const Sample d{"u", {}, {2, 3, 1, 3}, Split::train};
    EXPECT_EQ(embed(c, 4), embed(d, 4));
    const Sample bad{"u", {}, {4}, Split::train};
    EXPECT_THROW(embed(bad, 4), InputError);
}

TEST(Proxy, SeparatesDisjointSupports) {
    Rng rng(1);
    const auto tar = from_support({0, 1, 2, 3}, 400, 2, rng);
    const auto aux = from_support({4, 5, 6, 7}, 400, 2, rng);
    const auto clf = train_proxy(tar, aux, 8, ProxyTrainingConfig{}, 3);
    const auto tar_h = from_support({0, 1, 2, 3}, 200, 2, rng);
    const auto aux_h = from_support({4, 5, 6, 7}, 200, 2, rng);
    EXPECT_GT(accuracy(clf, tar_h, aux_h), 0.95);
}

TEST(Proxy, IndistinguishableSetsStayNearHalf) {
    Rng rng(2);
    const std::vector<Token> sup{0, 1, 2, 3, 4, 5};
    const auto tar = from_support(sup, 1000, 1, rng);
    const auto aux = from_support(sup, 1000, 1, rng);
    const auto clf = train_proxy(tar, aux, 6, ProxyTrainingConfig{}, 4);
    // The final SGD iterate carries a shared bias; the two sets must still score alike.
    EXPECT_NEAR(mean_prediction(clf, tar), mean_prediction(clf, aux), 0.02);
    EXPECT_NEAR(mean_prediction(clf, tar), 0.5, 0.1);
}

TEST(Proxy, SeededTrainingIsBitIdentical) {
    Rng rng(3);
    const auto tar = from_support({0, 1}, 50, 1, rng);
    const auto aux = from_support({1, 2}, 50, 1, rng);
    EXPECT_EQ(train_proxy(tar, aux, 3, ProxyTrainingConfig{}, 9), train_proxy(tar, aux, 3, ProxyTrainingConfig{}, 9));
    EXPECT_THROW(train_proxy({}, aux, 3, ProxyTrainingConfig{}, 9), InputError);
}

TEST(Propensity, MeanOfOutputs) {
    ProxyClassifier constant{{0.0, 0.0}, std::log(0.8 / 0.2)};
    const std::vector<Sample> xs{{"u", {}, {0}, Split::train}, {"u", {}, {1}, Split::train}};
    EXPECT_NEAR(estimate_propensity(constant, xs), 0.8, 1e-12);

    // Outputs 0.6 and 1.0 (the latter up to sigmoid saturation).
    ProxyClassifier two{{std::log(0.6 / 0.4), 60.0}, 0.0};
    EXPECT_NEAR(estimate_propensity(two, xs), 0.8, 1e-12);
    EXPECT_THROW(estimate_propensity(two, {}), InputError);
}

TEST(Propensity, StrictlyInsideUnitIntervalAfterTraining) {
    Rng rng(4);
    const auto tar = from_support({0, 1, 2}, 300, 2, rng);
    const auto aux = from_support({2, 3, 4}, 300, 2, rng);
    const auto clf = train_proxy(tar, aux, 5, ProxyTrainingConfig{}, 1);
    const double c = estimate_propensity(clf, tar);
    EXPECT_GT(c, 0.0);
    EXPECT_LT(c, 1.0);
}

TEST(AlphaEstimate, Arithmetic) {
    ProxyClassifier g{{0.0}, std::log(0.24 / 0.76)};
    const std::vector<Sample> aux{{"u", {}, {0}, Split::train}};
    const auto est = estimate_alpha(g, aux, 0.8);
    EXPECT_NEAR(est.alpha_hat, 0.3, 1e-12);
    EXPECT_FALSE(est.clipped);
    EXPECT_THROW(estimate_alpha(g, aux, 0.0), EstimationError);
}

TEST(AlphaEstimate, ClipsBelowOne) {
    ProxyClassifier g{{0.0}, 3.0};
    const std::vector<Sample> aux{{"u", {}, {0}, Split::train}};
    const auto est = estimate_alpha(g, aux, 0.5);
    EXPECT_GT(est.alpha_raw, 1.0);
    EXPECT_EQ(est.alpha_hat, kAlphaCeiling);
    EXPECT_TRUE(est.clipped);
}

TEST(AlphaEstimate, FullOverlapIsHigh) {
    Rng rng(5);
    const std::vector<Token> sup{0, 1, 2, 3, 4, 5, 6, 7};
    const auto tar = from_support(sup, 2000, 1, rng);
    const auto aux = from_support(sup, 2000, 1, rng);
    EXPECT_GE(estimate_alpha_from_sets(tar, aux, 8, ProxyTrainingConfig{}, 6).alpha_hat, 0.8);
}

TEST(AlphaEstimate, DisjointSupportIsLow) {
    Rng rng(6);
    const auto tar = from_support({0, 1, 2, 3}, 2000, 1, rng);
    const auto aux = from_support({4, 5, 6, 7}, 2000, 1, rng);
    EXPECT_LE(estimate_alpha_from_sets(tar, aux, 8, ProxyTrainingConfig{}, 7).alpha_hat, 0.1);
}

TEST(AlphaEstimate, RecoversGeneratedOverlap) {
    double prev = -1.0;
    for (double lam : {0.2, 0.5, 0.8}) {
        PopulationSpec spec;
        spec.overlap_lambda = lam;
        spec.samples_per_user = 4000;
        const auto pop = generate_population(spec);
        const auto d = build_user_dataset(pop, "u000", 1.0, Grouping::random, 0);
        ASSERT_GE(d.h_tar.size(), 2000u);
        const auto est = estimate_alpha_from_sets(d.h_tar, d.h_aux, d.vocab_size, ProxyTrainingConfig{}, 1);
        EXPECT_LT(std::abs(est.alpha_hat - lam), 0.15) << lam;
        EXPECT_GT(est.alpha_hat, prev);
        EXPECT_LT(est.alpha_hat, 1.0);
        prev = est.alpha_hat;
    }
}

TEST(Split, HeldOutDisjointFromTraining) {
    for (std::size_t n : {2, 3, 10, 101}) {
        const auto s = split_target(n, 0.2, n);
        std::set<std::size_t> held(s.heldout.begin(), s.heldout.end());
        std::set<std::size_t> train(s.train.begin(), s.train.end());
        EXPECT_EQ(held.size(), s.heldout.size());
        for (std::size_t i : train) EXPECT_EQ(held.count(i), 0u);
        EXPECT_EQ(held.size() + train.size(), n);
        EXPECT_GE(held.size(), 1u);
        EXPECT_GE(train.size(), 1u);
    }
    EXPECT_EQ(split_target(100, 0.2, 1).heldout.size(), 20u);
    EXPECT_THROW(split_target(1, 0.2, 0), InputError);
    EXPECT_THROW(split_target(10, 1.0, 0), ConfigError);
}
