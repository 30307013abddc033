#pragma once

// Token-factorized categorical policy with exact log-probabilities.
//
// Each completion token y_t is scored by one row of a logit table, selected
// by a deterministic bucket of (first prompt token, position). The table
// plays the part of pi_theta; a frozen copy plays pi_ref.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cbpo/core.hpp"

namespace cbpo {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

enum class Split { train, heldout };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "heldout"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "heldout") return Split::heldout;
    throw InputError("unknown split '" + s + "'");
}

struct Sample {
    std::string user_id;
    TokenSeq x;
    TokenSeq y;
    Split split = Split::train;

    bool operator==(const Sample&) const = default;
};

struct PolicyParams {
    std::size_t vocab_size = 0;
    std::size_t context_size = 0;
    Matrix logits;  // (context_size, vocab_size)

    PolicyParams() = default;
    PolicyParams(std::size_t vocab, std::size_t contexts)
        : vocab_size(vocab), context_size(contexts), logits(contexts, vocab, 0.0) {
        if (vocab < 2) throw InputError("PolicyParams: vocab_size must be >= 2");
        if (contexts < 1) throw InputError("PolicyParams: context_size must be >= 1");
    }

    bool same_shape(const PolicyParams& o) const {
        return vocab_size == o.vocab_size && context_size == o.context_size;
    }

    bool operator==(const PolicyParams&) const = default;
};

/// Context bucket for completion position t of prompt x. An empty prompt
/// hashes a sentinel in place of its first token.
inline std::size_t bucket(const TokenSeq& x, std::size_t t, std::size_t context_size) {
    const std::uint64_t first = x.empty() ? 0xffffffffULL : static_cast<std::uint32_t>(x.front());
    const std::uint64_t key = (first << 32) | static_cast<std::uint32_t>(t);
    return static_cast<std::size_t>(splitmix64(key) % context_size);
}

inline void check_tokens(const PolicyParams& p, const TokenSeq& x, const TokenSeq& y) {
    if (y.empty()) throw InputError("empty completion y");
    const auto in_range = [&](Token tok) {
        return tok >= 0 && static_cast<std::size_t>(tok) < p.vocab_size;
    };
    for (Token tok : x) {
        if (!in_range(tok)) throw InputError("prompt token " + std::to_string(tok) + " out of range");
    }
    for (Token tok : y) {
        if (!in_range(tok)) throw InputError("completion token " + std::to_string(tok) + " out of range");
    }
}

/// log-sum-exp of a row with max subtraction.
inline double log_normalizer(std::span<const double> row) {
    double m = row[0];
    for (double v : row) m = v > m ? v : m;
    double s = 0.0;
    for (double v : row) s += std::exp(v - m);
    return m + std::log(s);
}

inline std::vector<double> softmax(std::span<const double> row) {
    const double lse = log_normalizer(row);
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = std::exp(row[i] - lse);
    return out;
}

/// log pi(y | x), summed left to right over completion positions.
inline double log_prob(const PolicyParams& p, const TokenSeq& x, const TokenSeq& y) {
    check_tokens(p, x, y);
    double total = 0.0;
    for (std::size_t t = 0; t < y.size(); ++t) {
        const auto row = p.logits.row(bucket(x, t, p.context_size));
        total += row[static_cast<std::size_t>(y[t])] - log_normalizer(row);
    }
    return total;
}

inline double log_prob(const PolicyParams& p, const Sample& s) { return log_prob(p, s.x, s.y); }

/// grad += coef * d log pi(y|x) / d logits.
inline void accumulate_log_prob_grad(const PolicyParams& p, const TokenSeq& x, const TokenSeq& y,
                                     double coef, Matrix& grad) {
    check_tokens(p, x, y);
    if (!grad.same_shape(p.logits)) throw InputError("gradient shape mismatch");
    for (std::size_t t = 0; t < y.size(); ++t) {
        const std::size_t b = bucket(x, t, p.context_size);
        const auto probs = softmax(p.logits.row(b));
        auto g = grad.row(b);
        for (std::size_t v = 0; v < p.vocab_size; ++v) g[v] -= coef * probs[v];
        g[static_cast<std::size_t>(y[t])] += coef;
    }
}

inline Matrix log_prob_grad(const PolicyParams& p, const TokenSeq& x, const TokenSeq& y) {
    Matrix grad(p.context_size, p.vocab_size);
    accumulate_log_prob_grad(p, x, y, 1.0, grad);
    return grad;
}

/// Frozen deep copy used as the reference policy.
inline PolicyParams snapshot_reference(const PolicyParams& p) { return p; }

/// Greedy argmax completion of the given length.
inline TokenSeq greedy_completion(const PolicyParams& p, const TokenSeq& x, std::size_t length) {
    TokenSeq y(length);
    for (std::size_t t = 0; t < length; ++t) {
        const auto row = p.logits.row(bucket(x, t, p.context_size));
        std::size_t best = 0;
        for (std::size_t v = 1; v < row.size(); ++v) {
            if (row[v] > row[best]) best = v;
        }
        y[t] = static_cast<Token>(best);
    }
    return y;
}

inline TokenSeq sample_completion(const PolicyParams& p, const TokenSeq& x, std::size_t length, Rng& rng) {
    TokenSeq y(length);
    for (std::size_t t = 0; t < length; ++t) {
        y[t] = static_cast<Token>(rng.categorical(softmax(p.logits.row(bucket(x, t, p.context_size)))));
    }
    return y;
}

inline std::uint64_t fingerprint(const PolicyParams& p) {
    std::string bytes(reinterpret_cast<const char*>(p.logits.data.data()),
                      p.logits.data.size() * sizeof(double));
    return fnv1a(bytes) ^ splitmix64(p.vocab_size * 1000003ULL + p.context_size);
}

}  // namespace cbpo
