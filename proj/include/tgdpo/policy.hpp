#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tgdpo/core.hpp"

namespace tgdpo {

// State s_t = [x, y^{<t}]. Policies with a finite context order truncate the
// state to its last k tokens before any table access, so two states agreeing
// on that suffix share parameters.
struct ContextKey {
  TokenSeq tokens;

  auto operator<=>(const ContextKey&) const = default;
};

// Full (untruncated) state for generating response token t.
ContextKey make_context(const TokenSeq& prompt, const TokenSeq& response, std::size_t t);

// Exact autoregressive softmax policy: one logit vector per seen context,
// uniform (all-zero logits) everywhere else. Freezing makes the table
// read-only so reference and reward-source policies cannot be trained by
// accident.
class TabularPolicy {
public:
  TabularPolicy() = default;
  explicit TabularPolicy(Vocab vocab, std::optional<std::size_t> context_order = std::nullopt);

  const Vocab& vocab() const { return vocab_; }

  // nullopt = full context; k = last-k-token truncation.
  std::optional<std::size_t> context_order() const { return context_order_; }

  ContextKey truncate(const ContextKey& key) const;

  // Logits for a state, truncated per context order. Unseen states read as
  // the all-zero vector.
  Eigen::VectorXd logits(const ContextKey& key) const;

  void add_to_logits(const ContextKey& key, const Eigen::VectorXd& delta);
  void set_logits(const ContextKey& key, Eigen::VectorXd value);

  // Table of stored (truncated) contexts, in key order.
  const std::map<ContextKey, Eigen::VectorXd>& table() const { return table_; }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  TabularPolicy unfrozen_clone() const;

  bool operator==(const TabularPolicy& other) const;

private:
  void require_mutable() const;

  Vocab vocab_;
  std::optional<std::size_t> context_order_;
  std::map<ContextKey, Eigen::VectorXd> table_;
  bool frozen_ = false;
};

double log_sum_exp(const Eigen::VectorXd& v);
Eigen::VectorXd log_softmax(const Eigen::VectorXd& v);
Eigen::VectorXd softmax(const Eigen::VectorXd& v);

// ln pi(action | state). Finite for every input by construction.
double token_log_prob(const TabularPolicy& policy, const ContextKey& state, TokenId action);

// Sum of token_log_prob over t ascending; empty response gives 0.
double sequence_log_prob(const TabularPolicy& policy, const TokenSeq& prompt,
                         const TokenSeq& response);

// ln pi(a|s) - ln pi_ref(a|s). Policies must share a vocab.
double token_log_ratio(const TabularPolicy& policy, const TabularPolicy& ref,
                       const ContextKey& state, TokenId action);

// d ln pi(action|state) / d logits(state) = onehot(action) - softmax(logits).
// Only meaningful for trainable policies; frozen ones refuse.
Eigen::VectorXd grad_token_log_prob(const TabularPolicy& policy, const ContextKey& state,
                                    TokenId action);

// Mean negative log-likelihood per token over (prompt, response) pairs.
double corpus_nll(const TabularPolicy& policy,
                  const std::vector<std::pair<TokenSeq, TokenSeq>>& corpus);

// Full-batch gradient descent on corpus_nll. Deterministic; steps = 0
// returns the input unchanged.
TabularPolicy mle_fit(TabularPolicy policy,
                      const std::vector<std::pair<TokenSeq, TokenSeq>>& corpus, int steps,
                      double lr);

// Checkpoint: {"vocab": [...], "context_order": "full"|k, "logits":
// {context: [floats]}} with context symbols joined by U+241F. Loaded
// policies come back unfrozen; callers freeze as needed.
void write_policy_json(std::ostream& out, const TabularPolicy& policy);
TabularPolicy read_policy_json(std::istream& in);

}  // namespace tgdpo
