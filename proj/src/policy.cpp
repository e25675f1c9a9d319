#include "tgdpo/policy.hpp"

#include <cmath>
#include <istream>
#include <ostream>
#include <string>

#include <json.hpp>

#include "tgdpo/errors.hpp"

namespace tgdpo {

namespace {

// U+241F SYMBOL FOR UNIT SEPARATOR, UTF-8 encoded.
const std::string kContextSep = "\xe2\x90\x9f";

}  // namespace

ContextKey make_context(const TokenSeq& prompt, const TokenSeq& response, std::size_t t) {
  if (t > response.size()) {
    throw ValidationError("context position " + std::to_string(t) + " past response length " +
                          std::to_string(response.size()));
  }
  ContextKey key;
  key.tokens.reserve(prompt.size() + t);
  key.tokens.insert(key.tokens.end(), prompt.begin(), prompt.end());
  key.tokens.insert(key.tokens.end(), response.begin(), response.begin() + static_cast<std::ptrdiff_t>(t));
  return key;
}

TabularPolicy::TabularPolicy(Vocab vocab, std::optional<std::size_t> context_order)
    : vocab_(std::move(vocab)), context_order_(context_order) {
  if (context_order_ && *context_order_ == 0) {
    throw ValidationError("context_order must be positive; use full context instead of 0");
  }
}

ContextKey TabularPolicy::truncate(const ContextKey& key) const {
  if (!context_order_ || key.tokens.size() <= *context_order_) return key;
  ContextKey out;
  out.tokens.assign(key.tokens.end() - static_cast<std::ptrdiff_t>(*context_order_),
                    key.tokens.end());
  return out;
}

Eigen::VectorXd TabularPolicy::logits(const ContextKey& key) const {
  const auto it = table_.find(truncate(key));
  if (it == table_.end()) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(vocab_.size()));
  return it->second;
}

void TabularPolicy::require_mutable() const {
  if (frozen_) throw ContractError("policy is frozen; its parameters cannot change");
}

void TabularPolicy::add_to_logits(const ContextKey& key, const Eigen::VectorXd& delta) {
  require_mutable();
  if (delta.size() != static_cast<Eigen::Index>(vocab_.size())) {
    throw ValidationError("logit update size " + std::to_string(delta.size()) +
                          " does not match vocab size " + std::to_string(vocab_.size()));
  }
  const ContextKey k = truncate(key);
  auto it = table_.find(k);
  if (it == table_.end()) {
    table_.emplace(k, delta);
  } else {
    it->second += delta;
  }
}

void TabularPolicy::set_logits(const ContextKey& key, Eigen::VectorXd value) {
  require_mutable();
  if (value.size() != static_cast<Eigen::Index>(vocab_.size())) {
    throw ValidationError("logit vector size " + std::to_string(value.size()) +
                          " does not match vocab size " + std::to_string(vocab_.size()));
  }
  table_[truncate(key)] = std::move(value);
}

TabularPolicy TabularPolicy::unfrozen_clone() const {
  TabularPolicy copy = *this;
  copy.frozen_ = false;
  return copy;
}

bool TabularPolicy::operator==(const TabularPolicy& other) const {
  if (!(vocab_ == other.vocab_) || context_order_ != other.context_order_ ||
      table_.size() != other.table_.size()) {
    return false;
  }
  auto a = table_.begin();
  auto b = other.table_.begin();
  for (; a != table_.end(); ++a, ++b) {
    if (a->first != b->first || a->second.size() != b->second.size()) return false;
    for (Eigen::Index i = 0; i < a->second.size(); ++i) {
      if (a->second[i] != b->second[i]) return false;
    }
  }
  return true;
}

double log_sum_exp(const Eigen::VectorXd& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

Eigen::VectorXd log_softmax(const Eigen::VectorXd& v) {
  return v.array() - log_sum_exp(v);
}

Eigen::VectorXd softmax(const Eigen::VectorXd& v) {
  Eigen::VectorXd e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

double token_log_prob(const TabularPolicy& policy, const ContextKey& state, TokenId action) {
  if (action >= policy.vocab().size()) {
    throw ValidationError("action " + std::to_string(action) + " out of range for vocab of size " +
                          std::to_string(policy.vocab().size()));
  }
  const Eigen::VectorXd logits = policy.logits(state);
  return logits[static_cast<Eigen::Index>(action)] - log_sum_exp(logits);
}

double sequence_log_prob(const TabularPolicy& policy, const TokenSeq& prompt,
                         const TokenSeq& response) {
  double total = 0.0;
  for (std::size_t t = 0; t < response.size(); ++t) {
    total += token_log_prob(policy, make_context(prompt, response, t), response[t]);
  }
  return total;
}

double token_log_ratio(const TabularPolicy& policy, const TabularPolicy& ref,
                       const ContextKey& state, TokenId action) {
  if (!(policy.vocab() == ref.vocab())) {
    throw ValidationError("log-ratio requires both policies to share a vocab");
  }
  return token_log_prob(policy, state, action) - token_log_prob(ref, state, action);
}

Eigen::VectorXd grad_token_log_prob(const TabularPolicy& policy, const ContextKey& state,
                                    TokenId action) {
  if (policy.frozen()) {
    throw ContractError("gradients requested from a frozen policy");
  }
  if (action >= policy.vocab().size()) {
    throw ValidationError("action " + std::to_string(action) + " out of range for vocab of size " +
                          std::to_string(policy.vocab().size()));
  }
  Eigen::VectorXd grad = -softmax(policy.logits(state));
  grad[static_cast<Eigen::Index>(action)] += 1.0;
  return grad;
}

double corpus_nll(const TabularPolicy& policy,
                  const std::vector<std::pair<TokenSeq, TokenSeq>>& corpus) {
  if (corpus.empty()) throw ValidationError("corpus must be non-empty");
  double total = 0.0;
  std::size_t n_tokens = 0;
  for (const auto& [prompt, response] : corpus) {
    total -= sequence_log_prob(policy, prompt, response);
    n_tokens += response.size();
  }
  if (n_tokens == 0) throw ValidationError("corpus has no response tokens");
  return total / static_cast<double>(n_tokens);
}

TabularPolicy mle_fit(TabularPolicy policy,
                      const std::vector<std::pair<TokenSeq, TokenSeq>>& corpus, int steps,
                      double lr) {
  if (lr <= 0.0) throw ValidationError("learning rate must be positive");
  if (corpus.empty()) throw ValidationError("corpus must be non-empty");
  std::size_t n_tokens = 0;
  for (const auto& [prompt, response] : corpus) n_tokens += response.size();
  if (n_tokens == 0) throw ValidationError("corpus has no response tokens");

  for (int step = 0; step < steps; ++step) {
    // Gradient of mean NLL, accumulated per context in key order.
    std::map<ContextKey, Eigen::VectorXd> grad;
    for (const auto& [prompt, response] : corpus) {
      for (std::size_t t = 0; t < response.size(); ++t) {
        const ContextKey key = policy.truncate(make_context(prompt, response, t));
        Eigen::VectorXd g = grad_token_log_prob(policy, key, response[t]);
        auto it = grad.find(key);
        if (it == grad.end()) {
          grad.emplace(key, std::move(g));
        } else {
          it->second += g;
        }
      }
    }
    const double scale = lr / static_cast<double>(n_tokens);
    for (const auto& [key, g] : grad) {
      policy.add_to_logits(key, scale * g);
    }
  }
  return policy;
}

namespace {

std::string context_to_string(const ContextKey& key, const Vocab& vocab) {
  std::string out;
  for (std::size_t i = 0; i < key.tokens.size(); ++i) {
    if (i > 0) out += kContextSep;
    out += vocab.symbol(key.tokens[i]);
  }
  return out;
}

ContextKey context_from_string(const std::string& text, const Vocab& vocab) {
  ContextKey key;
  if (text.empty()) return key;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(kContextSep, start);
    const std::string piece =
        pos == std::string::npos ? text.substr(start) : text.substr(start, pos - start);
    key.tokens.push_back(vocab.id(piece));
    if (pos == std::string::npos) break;
    start = pos + kContextSep.size();
  }
  return key;
}

}  // namespace

void write_policy_json(std::ostream& out, const TabularPolicy& policy) {
  for (const auto& symbol : policy.vocab().symbols()) {
    if (symbol.find(kContextSep) != std::string::npos) {
      throw ValidationError("symbol " + symbol + " contains the context separator U+241F");
    }
  }
  nlohmann::json ckpt;
  ckpt["vocab"] = policy.vocab().symbols();
  if (policy.context_order()) {
    ckpt["context_order"] = *policy.context_order();
  } else {
    ckpt["context_order"] = "full";
  }
  nlohmann::json logits = nlohmann::json::object();
  for (const auto& [key, vec] : policy.table()) {
    std::vector<double> values(vec.data(), vec.data() + vec.size());
    logits[context_to_string(key, policy.vocab())] = values;
  }
  ckpt["logits"] = std::move(logits);
  out << ckpt.dump() << '\n';
}

TabularPolicy read_policy_json(std::istream& in) {
  const nlohmann::json ckpt = nlohmann::json::parse(in);
  Vocab vocab(ckpt.at("vocab").get<std::vector<std::string>>());
  std::optional<std::size_t> order;
  const auto& order_field = ckpt.at("context_order");
  if (order_field.is_string()) {
    if (order_field.get<std::string>() != "full") {
      throw ValidationError("context_order must be \"full\" or a positive integer");
    }
  } else if (order_field.is_number_unsigned() && order_field.get<std::uint64_t>() >= 1) {
    order = order_field.get<std::size_t>();
  } else {
    throw ValidationError("context_order must be \"full\" or a positive integer");
  }

  TabularPolicy policy(std::move(vocab), order);
  for (const auto& [ctx, values] : ckpt.at("logits").items()) {
    if (values.size() != policy.vocab().size()) {
      throw ValidationError("logit vector for context '" + ctx + "' has " +
                            std::to_string(values.size()) + " entries, expected " +
                            std::to_string(policy.vocab().size()));
    }
    Eigen::VectorXd vec(static_cast<Eigen::Index>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double v = values[i].get<double>();
      if (!std::isfinite(v)) {
        throw ValidationError("non-finite logit in context '" + ctx + "'");
      }
      vec[static_cast<Eigen::Index>(i)] = v;
    }
    policy.set_logits(context_from_string(ctx, policy.vocab()), std::move(vec));
  }
  return policy;
}

}  // namespace tgdpo
