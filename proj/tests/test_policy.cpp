#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <utility>
#include <vector>

#include "tgdpo/core.hpp"
#include "tgdpo/errors.hpp"
#include "tgdpo/policy.hpp"
#include "tgdpo/rng.hpp"

using namespace tgdpo;

namespace {

Vocab letters(std::size_t n) {
  std::vector<std::string> symbols;
  for (std::size_t i = 0; i < n; ++i) symbols.emplace_back(1, static_cast<char>('a' + i));
  return build_vocab(symbols);
}

}  // namespace

TEST_CASE("uniform policy assigns ln(1/|V|) everywhere") {
  const TabularPolicy policy(letters(4));
  const ContextKey state{{0, 1}};
  CHECK(token_log_prob(policy, state, 0) == doctest::Approx(std::log(0.25)).epsilon(1e-9));
  CHECK(token_log_prob(policy, state, 3) == doctest::Approx(-1.386294).epsilon(1e-6));
}

TEST_CASE("hand-set logits give the softmax log-probability") {
  TabularPolicy policy(letters(2));
  const ContextKey state{{0}};
  Eigen::VectorXd logits(2);
  logits << std::log(3.0), 0.0;
  policy.set_logits(state, logits);
  // exp(ln 3)/(3 + 1) = 3/4.
  CHECK(token_log_prob(policy, state, 0) == doctest::Approx(std::log(0.75)).epsilon(1e-9));
  CHECK(token_log_prob(policy, state, 0) == doctest::Approx(-0.287682).epsilon(1e-6));
  // A context never written still reads as uniform.
  CHECK(token_log_prob(policy, ContextKey{{1, 1}}, 0) ==
        doctest::Approx(std::log(0.5)).epsilon(1e-9));
}

TEST_CASE("sequence log-prob sums tokens and is zero on empty responses") {
  const TabularPolicy policy(letters(2));
  CHECK(sequence_log_prob(policy, {0}, {}) == 0.0);
  CHECK(sequence_log_prob(policy, {0}, {1, 0, 1}) ==
        doctest::Approx(-2.079442).epsilon(1e-6));
}

TEST_CASE("probabilities over all responses of a fixed length sum to one") {
  const Vocab v = letters(3);
  TabularPolicy policy(v);
  std::mt19937_64 rng(substream_seed(99, "norm"));
  const TokenSeq prompt = {2};
  // Seed a few contexts with arbitrary logits; the rest stay uniform.
  for (TokenId a = 0; a < 3; ++a) {
    Eigen::VectorXd logits(3);
    for (int i = 0; i < 3; ++i) logits[i] = rand_range(rng, -2.0, 2.0);
    policy.set_logits(ContextKey{{2, a}}, logits);
  }
  double total = 0.0;
  for (TokenId a = 0; a < 3; ++a) {
    for (TokenId b = 0; b < 3; ++b) {
      total += std::exp(sequence_log_prob(policy, prompt, {a, b}));
    }
  }
  CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("token log-ratio vanishes against an identical reference") {
  const Vocab v = letters(3);
  TabularPolicy policy(v);
  TabularPolicy ref(v);
  const ContextKey state{{0, 1}};
  CHECK(token_log_ratio(policy, ref, state, 2) == 0.0);

  Eigen::VectorXd logits(3);
  logits << 1.0, 0.0, -1.0;
  policy.set_logits(state, logits);
  CHECK(token_log_ratio(policy, ref, state, 0) ==
        doctest::Approx(token_log_prob(policy, state, 0) - std::log(1.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("sequence log-prob difference equals the summed token log-ratios") {
  const Vocab v = letters(3);
  std::mt19937_64 rng(substream_seed(7, "ratio"));
  TabularPolicy policy(v);
  TabularPolicy ref(v);
  const TokenSeq prompt = {0, 2};
  const TokenSeq response = {1, 1, 0, 2};
  for (std::size_t t = 0; t < response.size(); ++t) {
    const ContextKey state = make_context(prompt, response, t);
    Eigen::VectorXd a(3), b(3);
    for (int i = 0; i < 3; ++i) {
      a[i] = rand_range(rng, -2.0, 2.0);
      b[i] = rand_range(rng, -2.0, 2.0);
    }
    policy.set_logits(state, a);
    ref.set_logits(state, b);
  }
  double ratio_sum = 0.0;
  for (std::size_t t = 0; t < response.size(); ++t) {
    ratio_sum += token_log_ratio(policy, ref, make_context(prompt, response, t), response[t]);
  }
  const double diff =
      sequence_log_prob(policy, prompt, response) - sequence_log_prob(ref, prompt, response);
  CHECK(ratio_sum == doctest::Approx(diff).epsilon(1e-12));
}

TEST_CASE("mismatched vocabs are rejected for ratios") {
  TabularPolicy policy(letters(2));
  TabularPolicy ref(letters(3));
  CHECK_THROWS_AS(token_log_ratio(policy, ref, ContextKey{{0}}, 0), ValidationError);
}

TEST_CASE("log-prob gradient is onehot minus softmax") {
  TabularPolicy policy(letters(2));
  const ContextKey state{{0, 0}};
  const Eigen::VectorXd g = grad_token_log_prob(policy, state, 0);
  REQUIRE(g.size() == 2);
  CHECK(g[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(g[1] == doctest::Approx(-0.5).epsilon(1e-12));
}

TEST_CASE("gradient components always sum to zero") {
  const Vocab v = letters(4);
  TabularPolicy policy(v);
  std::mt19937_64 rng(substream_seed(3, "gradsum"));
  for (int trial = 0; trial < 20; ++trial) {
    const ContextKey state{{static_cast<TokenId>(rand_below(rng, 4))}};
    Eigen::VectorXd logits(4);
    for (int i = 0; i < 4; ++i) logits[i] = rand_range(rng, -3.0, 3.0);
    policy.set_logits(state, logits);
    const TokenId action = static_cast<TokenId>(rand_below(rng, 4));
    CHECK(grad_token_log_prob(policy, state, action).sum() ==
          doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("analytic gradient matches central differences") {
  const Vocab v = letters(3);
  std::mt19937_64 rng(substream_seed(17, "fd"));
  const double h = 1e-5;
  for (int trial = 0; trial < 100; ++trial) {
    TabularPolicy policy(v);
    ContextKey state;
    const std::size_t len = 1 + rand_below(rng, 3);
    for (std::size_t i = 0; i < len; ++i) {
      state.tokens.push_back(static_cast<TokenId>(rand_below(rng, 3)));
    }
    Eigen::VectorXd logits(3);
    for (int i = 0; i < 3; ++i) logits[i] = rand_range(rng, -2.0, 2.0);
    policy.set_logits(state, logits);
    const TokenId action = static_cast<TokenId>(rand_below(rng, 3));
    const Eigen::VectorXd g = grad_token_log_prob(policy, state, action);
    for (int i = 0; i < 3; ++i) {
      Eigen::VectorXd bump = Eigen::VectorXd::Zero(3);
      bump[i] = h;
      TabularPolicy plus = policy;
      plus.add_to_logits(state, bump);
      TabularPolicy minus = policy;
      minus.add_to_logits(state, -bump);
      const double fd =
          (token_log_prob(plus, state, action) - token_log_prob(minus, state, action)) / (2 * h);
      const double scale = std::max({std::abs(fd), std::abs(g[i]), 1e-8});
      CHECK(std::abs(fd - g[i]) / scale < 1e-6);
    }
  }
}

TEST_CASE("frozen policies refuse mutation and gradients") {
  TabularPolicy policy(letters(2));
  policy.freeze();
  CHECK(policy.frozen());
  CHECK_THROWS_AS(policy.add_to_logits(ContextKey{{0}}, Eigen::VectorXd::Zero(2)), ContractError);
  CHECK_THROWS_AS(policy.set_logits(ContextKey{{0}}, Eigen::VectorXd::Zero(2)), ContractError);
  CHECK_THROWS_AS(grad_token_log_prob(policy, ContextKey{{0}}, 0), ContractError);

  // Reading stays legal, and an unfrozen clone is trainable again.
  CHECK(token_log_prob(policy, ContextKey{{0}}, 0) == doctest::Approx(std::log(0.5)));
  TabularPolicy clone = policy.unfrozen_clone();
  CHECK_FALSE(clone.frozen());
  clone.set_logits(ContextKey{{0}}, Eigen::VectorXd::Ones(2));
}

TEST_CASE("equality compares tables, not the frozen flag") {
  TabularPolicy a(letters(2));
  TabularPolicy b(letters(2));
  b.freeze();
  CHECK(a == b);
  TabularPolicy c(letters(2));
  c.set_logits(ContextKey{{0}}, Eigen::VectorXd::Ones(2));
  CHECK_FALSE(a == c);
}

TEST_CASE("context order truncates to the last k tokens") {
  const Vocab v = letters(3);
  TabularPolicy policy(v, 2);
  const ContextKey full{{0, 1, 2, 1}};
  CHECK(policy.truncate(full) == ContextKey{{2, 1}});

  // Writes land on the truncated key, so long states alias short ones.
  Eigen::VectorXd logits(3);
  logits << 2.0, 0.0, 0.0;
  policy.set_logits(full, logits);
  CHECK(token_log_prob(policy, ContextKey{{2, 1}}, 0) ==
        doctest::Approx(token_log_prob(policy, full, 0)).epsilon(1e-15));

  // Full-order policies keep the whole state.
  TabularPolicy untruncated(v);
  CHECK(untruncated.truncate(full) == full);
}

TEST_CASE("mle_fit drives a single sequence toward probability one") {
  const Vocab v = letters(2);
  TabularPolicy policy(v);
  const std::vector<std::pair<TokenSeq, TokenSeq>> corpus = {{{0}, {1, 0}}};
  const double before = corpus_nll(policy, corpus);
  policy = mle_fit(std::move(policy), corpus, 400, 1.0);
  const double after = corpus_nll(policy, corpus);
  CHECK(after < before);
  CHECK(std::exp(sequence_log_prob(policy, {0}, {1, 0})) > 0.99);
}

TEST_CASE("mle_fit with zero steps returns the input unchanged") {
  const Vocab v = letters(2);
  TabularPolicy policy(v);
  policy.set_logits(ContextKey{{1}}, Eigen::VectorXd::Ones(2));
  const TabularPolicy fitted = mle_fit(policy, {{{0}, {1}}}, 0, 0.5);
  CHECK(fitted == policy);
}

TEST_CASE("corpus_nll averages per token") {
  const TabularPolicy policy(letters(2));
  // Uniform policy: every token costs ln 2 regardless of sequence shape.
  const std::vector<std::pair<TokenSeq, TokenSeq>> corpus = {{{0}, {1, 1, 0}}, {{1}, {0}}};
  CHECK(corpus_nll(policy, corpus) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("checkpoints round-trip the full table") {
  const Vocab v = letters(3);
  TabularPolicy policy(v, 1);
  std::mt19937_64 rng(substream_seed(5, "ckpt"));
  for (TokenId a = 0; a < 3; ++a) {
    Eigen::VectorXd logits(3);
    for (int i = 0; i < 3; ++i) logits[i] = rand_range(rng, -4.0, 4.0);
    policy.set_logits(ContextKey{{a}}, logits);
  }
  policy.freeze();
  std::stringstream buf;
  write_policy_json(buf, policy);
  const TabularPolicy back = read_policy_json(buf);
  CHECK(back == policy);      // equality ignores frozen
  CHECK_FALSE(back.frozen()); // loads come back trainable

  // Full-context policies round-trip their order too.
  TabularPolicy full(v);
  std::stringstream buf2;
  write_policy_json(buf2, full);
  CHECK_FALSE(read_policy_json(buf2).context_order().has_value());
}

TEST_CASE("checkpoint symbols may not contain the context separator") {
  const Vocab v = build_vocab({"a", "b␟c"});
  const TabularPolicy policy(v);
  std::ostringstream buf;
  CHECK_THROWS_AS(write_policy_json(buf, policy), ValidationError);
}
