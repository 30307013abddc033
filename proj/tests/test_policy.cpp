#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "cbpo/policy.hpp"
#include "cbpo/rewards.hpp"
#include "cbpo/optim.hpp"
#include "cbpo/losses.hpp"

using namespace cbpo;

namespace {

PolicyParams random_params(Rng& rng, std::size_t vocab, std::size_t ctx, double scale = 1.0) {
    PolicyParams p(vocab, ctx);
    for (double& v : p.logits.data) v = scale * rng.normal();
    return p;
}

// Conditional probability of token v in bucket b, computed from scratch.
double cond_prob(const PolicyParams& p, std::size_t b, std::size_t v) {
    double z = 0.0;
    for (std::size_t k = 0; k < p.vocab_size; ++k) z += std::exp(p.logits(b, k));
    return std::exp(p.logits(b, v)) / z;
}

double enumerated_prob(const PolicyParams& p, const TokenSeq& x, const TokenSeq& y) {
    double prod = 1.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
        prod *= cond_prob(p, bucket(x, t, p.context_size), static_cast<std::size_t>(y[t]));
    }
    return prod;
}

// Visits every sequence of length `len` over `vocab` tokens.
template <class F>
void for_each_sequence(std::size_t vocab, std::size_t len, F&& f) {
    TokenSeq y(len, 0);
    for (;;) {
        f(y);
        std::size_t i = 0;
        while (i < len && static_cast<std::size_t>(++y[i]) == vocab) y[i++] = 0;
        if (i == len) return;
    }
}

}  // namespace

TEST(LogProb, UniformLogitsGiveUniformSequenceProbability) {
    PolicyParams p(4, 3);
    EXPECT_NEAR(log_prob(p, {1}, {0, 3}), std::log(1.0 / 16.0), 1e-12);
    EXPECT_NEAR(log_prob(p, {1}, {0, 3}), -2.772589, 1e-6);
}

TEST(LogProb, DominantLogitApproachesZero) {
    double prev = -1.0;
    for (double m : {5.0, 10.0, 20.0, 30.0}) {
        PolicyParams p(4, 1);
        p.logits(0, 2) = m;
        const double lp = log_prob(p, {0}, {2});
        EXPECT_LT(lp, 0.0);
        EXPECT_GT(lp, prev);
        prev = lp;
    }
    EXPECT_NEAR(prev, -3.0 * std::exp(-30.0), 1e-15);
}

TEST(LogProb, EnumerationSumsToOne) {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t vocab = 2 + rng.below(3);
        const std::size_t ctx = 1 + rng.below(4);
        const auto p = random_params(rng, vocab, ctx, 1.5);
        const TokenSeq x{static_cast<Token>(rng.below(vocab)), static_cast<Token>(rng.below(vocab))};
        for (std::size_t len = 1; len <= 3; ++len) {
            double total = 0.0;
            for_each_sequence(vocab, len, [&](const TokenSeq& y) {
                const double lp = log_prob(p, x, y);
                EXPECT_NEAR(std::exp(lp), enumerated_prob(p, x, y), 1e-12);
                total += std::exp(lp);
            });
            EXPECT_NEAR(total, 1.0, 1e-12);
        }
    }
}

TEST(LogProb, RowsNormalize) {
    Rng rng(2);
    const auto p = random_params(rng, 7, 5, 3.0);
    for (std::size_t b = 0; b < p.context_size; ++b) {
        const auto probs = softmax(p.logits.row(b));
        double s = 0.0;
        for (double q : probs) s += q;
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(LogProb, SumOfStepwiseTermsInOrder) {
    Rng rng(4);
    const auto p = random_params(rng, 5, 3);
    const TokenSeq x{2, 4};
    const TokenSeq y{1, 0, 4};
    double expect = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
        const auto row = p.logits.row(bucket(x, t, p.context_size));
        expect += row[static_cast<std::size_t>(y[t])] - log_normalizer(row);
    }
    EXPECT_EQ(log_prob(p, x, y), expect);
}

TEST(LogProb, RejectsOutOfRangeTokensAndEmptyCompletion) {
    PolicyParams p(4, 2);
    EXPECT_THROW(log_prob(p, {0}, {4}), InputError);
    EXPECT_THROW(log_prob(p, {-1}, {0}), InputError);
    EXPECT_THROW(log_prob(p, {0}, {}), InputError);
    EXPECT_THROW(PolicyParams(1, 2), InputError);
}

TEST(LogProb, LargeLogitsStayFinite) {
    PolicyParams p(3, 1);
    p.logits(0, 0) = 800.0;
    p.logits(0, 1) = -800.0;
    EXPECT_TRUE(std::isfinite(log_prob(p, {0}, {1})));
    EXPECT_NEAR(log_prob(p, {0}, {0}), 0.0, 1e-300);
}

TEST(LogProbGrad, UniformBinaryRow) {
    PolicyParams p(2, 1);
    const Matrix g = log_prob_grad(p, {0}, {0});
    EXPECT_DOUBLE_EQ(g(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(g(0, 1), -0.5);
}

TEST(LogProbGrad, MatchesCentralDifferences) {
    Rng rng(8);
    const double h = 1e-5;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t vocab = 2 + rng.below(5);
        const std::size_t ctx = 1 + rng.below(4);
        auto p = random_params(rng, vocab, ctx);
        TokenSeq x{static_cast<Token>(rng.below(vocab))};
        TokenSeq y(1 + rng.below(3));
        for (auto& t : y) t = static_cast<Token>(rng.below(vocab));
        const Matrix g = log_prob_grad(p, x, y);
        double diff = 0.0, norm = 0.0;
        for (std::size_t i = 0; i < p.logits.data.size(); ++i) {
            const double orig = p.logits.data[i];
            p.logits.data[i] = orig + h;
            const double up = log_prob(p, x, y);
            p.logits.data[i] = orig - h;
            const double down = log_prob(p, x, y);
            p.logits.data[i] = orig;
            const double fd = (up - down) / (2 * h);
            diff += (g.data[i] - fd) * (g.data[i] - fd);
            norm += fd * fd;
        }
        EXPECT_LT(std::sqrt(diff) / std::max(std::sqrt(norm), 1e-8), 1e-4);
    }
}

TEST(LogProbGrad, UnusedBucketsAreExactlyZero) {
    Rng rng(12);
    const auto p = random_params(rng, 4, 8);
    const TokenSeq x{3};
    const TokenSeq y{1, 2};
    const Matrix g = log_prob_grad(p, x, y);
    std::vector<bool> used(p.context_size, false);
    for (std::size_t t = 0; t < y.size(); ++t) used[bucket(x, t, p.context_size)] = true;
    for (std::size_t b = 0; b < p.context_size; ++b) {
        if (used[b]) continue;
        for (std::size_t v = 0; v < p.vocab_size; ++v) EXPECT_EQ(g(b, v), 0.0);
    }
}

TEST(Bucket, DependsOnFirstPromptTokenAndPosition) {
    EXPECT_EQ(bucket({5, 1}, 0, 16), bucket({5, 9}, 0, 16));
    EXPECT_LT(bucket({}, 3, 7), 7u);
    EXPECT_EQ(bucket({2}, 1, 1), 0u);
}

TEST(Snapshot, IsADeepCopy) {
    Rng rng(1);
    auto p = random_params(rng, 4, 2);
    const auto ref = snapshot_reference(p);
    const auto fp = fingerprint(ref);
    p.logits(0, 0) += 1.0;
    EXPECT_EQ(fingerprint(ref), fp);
    EXPECT_NE(fingerprint(p), fp);
}

TEST(Snapshot, RewardAgainstItselfIsZero) {
    Rng rng(6);
    const auto p = random_params(rng, 5, 3);
    const auto ref = snapshot_reference(p);
    for (int i = 0; i < 50; ++i) {
        const TokenSeq x{static_cast<Token>(rng.below(5))};
        const TokenSeq y{static_cast<Token>(rng.below(5)), static_cast<Token>(rng.below(5))};
        EXPECT_EQ(implicit_reward(p, ref, RewardConfig{1.0}, x, y), 0.0);
    }
}

TEST(Snapshot, DivergesAfterOneTrainingStep) {
    PolicyParams p(4, 2);
    const auto ref = snapshot_reference(p);
    Batch b;
    b.pos.push_back(Sample{"u", {1}, {2}, Split::train});
    const auto res = evaluate_objective(Method::SFT, b, p, p, ObjectiveConfig{}, 0.0);
    AdamW opt(AdamWConfig{}, 0.1, 0, p.context_size, p.vocab_size);
    opt.apply(p.logits, res.gradient);
    EXPECT_GT(log_prob(p, {1}, {2}), log_prob(ref, {1}, {2}));
}

TEST(Sampling, GreedyPicksArgmaxAndSamplingIsSeeded) {
    PolicyParams p(4, 1);
    p.logits(0, 3) = 2.0;
    EXPECT_EQ(greedy_completion(p, {0}, 3), (TokenSeq{3, 3, 3}));
    Rng a(5), b(5);
    EXPECT_EQ(sample_completion(p, {0}, 10, a), sample_completion(p, {0}, 10, b));
}
