#include "tgdpo/losses.hpp"

#include <cmath>
#include <ostream>
#include <string>

#include <json.hpp>

#include "tgdpo/errors.hpp"

namespace tgdpo {

double neg_log_sigmoid(double z) {
  // softplus(-z), split at 0 so the exponent is never positive.
  return z >= 0.0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
}

double d_neg_log_sigmoid(double z) {
  if (z >= 0.0) {
    const double e = std::exp(-z);
    return -e / (1.0 + e);
  }
  return -1.0 / (1.0 + std::exp(z));
}

namespace {

void require_shared_vocab(const TabularPolicy& policy, const TabularPolicy& ref) {
  if (!(policy.vocab() == ref.vocab())) {
    throw ValidationError("loss evaluation requires policies with a shared vocab");
  }
}

void require_trace(const TokenWeightSpec& spec, const TokenRewardTrace* trace,
                   const TokenSeq& response, const char* side) {
  if (spec.needs_trace() && trace == nullptr) {
    throw ValidationError(std::string(side) + "-side weights read r_hat but no trace was given");
  }
  if (trace != nullptr && trace->values.size() != response.size()) {
    throw ValidationError(std::string(side) + "-side trace length " +
                          std::to_string(trace->values.size()) + " does not match response length " +
                          std::to_string(response.size()));
  }
}

double trace_value(const TokenRewardTrace* trace, std::size_t t) {
  return trace == nullptr ? 0.0 : trace->values[t];
}

void add_grad(std::map<ContextKey, Eigen::VectorXd>& grad, const TabularPolicy& policy,
              const ContextKey& state, TokenId action, double coeff) {
  const ContextKey key = policy.truncate(state);
  const Eigen::VectorXd g = coeff * grad_token_log_prob(policy, key, action);
  auto it = grad.find(key);
  if (it == grad.end()) {
    grad.emplace(key, g);
  } else {
    it->second += g;
  }
}

// Shared chassis: per-token coefficient sums on each side. coeff_w/coeff_l
// map (t, T) to the multiplier of that token's log term. `use_ref` selects
// log-ratios against the reference vs bare log-probs (SimPO).
struct SideTerms {
  double sum = 0.0;                               // sum_t coeff_t * log term
  std::vector<std::pair<double, double>> terms;   // (coeff_t, log term)
};

template <typename CoeffFn>
SideTerms side_terms(const TabularPolicy& policy, const TabularPolicy* ref,
                     const TokenSeq& prompt, const TokenSeq& response, CoeffFn coeff) {
  SideTerms out;
  out.terms.reserve(response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    const ContextKey state = make_context(prompt, response, t);
    const double lp = ref == nullptr
                          ? token_log_prob(policy, state, response[t])
                          : token_log_ratio(policy, *ref, state, response[t]);
    const double c = coeff(t, response.size());
    out.terms.emplace_back(c, lp);
    out.sum += c * lp;
  }
  return out;
}

template <typename CoeffFn>
void side_grad(std::map<ContextKey, Eigen::VectorXd>& grad, const TabularPolicy& policy,
               const TokenSeq& prompt, const TokenSeq& response, double dz, double sign,
               CoeffFn coeff) {
  for (std::size_t t = 0; t < response.size(); ++t) {
    const ContextKey state = make_context(prompt, response, t);
    add_grad(grad, policy, state, response[t], dz * sign * coeff(t, response.size()));
  }
}

}  // namespace

PerInstanceLogit preference_logit(const TabularPolicy& policy, const TabularPolicy& ref,
                                  const TokenWeightSpec& spec_w, const TokenWeightSpec& spec_l,
                                  double beta, const PreferencePair& pair,
                                  const TokenRewardTrace* trace_w, const TokenRewardTrace* trace_l,
                                  double offset) {
  require_shared_vocab(policy, ref);
  if (!(beta > 0.0)) throw ValidationError("beta must be positive");
  require_trace(spec_w, trace_w, pair.chosen, "win");
  require_trace(spec_l, trace_l, pair.rejected, "lose");

  PerInstanceLogit out;
  out.beta = beta;
  out.offset = offset;

  const auto fw = [&](std::size_t t, std::size_t T) {
    return weight(spec_w, trace_value(trace_w, t), t, T);
  };
  const auto fl = [&](std::size_t t, std::size_t T) {
    return weight(spec_l, trace_value(trace_l, t), t, T);
  };

  double win_sum = 0.0;
  for (std::size_t t = 0; t < pair.chosen.size(); ++t) {
    const ContextKey state = make_context(pair.prompt, pair.chosen, t);
    const double w = fw(t, pair.chosen.size());
    const double lr = token_log_ratio(policy, ref, state, pair.chosen[t]);
    out.win_terms.emplace_back(w, lr);
    win_sum += beta * w * lr;
  }
  double lose_sum = 0.0;
  for (std::size_t t = 0; t < pair.rejected.size(); ++t) {
    const ContextKey state = make_context(pair.prompt, pair.rejected, t);
    const double w = fl(t, pair.rejected.size());
    const double lr = token_log_ratio(policy, ref, state, pair.rejected[t]);
    out.lose_terms.emplace_back(w, lr);
    lose_sum += beta * w * lr;
  }
  out.phi = win_sum - lose_sum;
  return out;
}

LossValue tgdpo_loss(const TabularPolicy& policy, const TabularPolicy& ref,
                     const TokenWeightSpec& spec_w, const TokenWeightSpec& spec_l, double beta,
                     const PreferencePair& pair, const TokenRewardTrace* trace_w,
                     const TokenRewardTrace* trace_l, double offset) {
  const PerInstanceLogit logit =
      preference_logit(policy, ref, spec_w, spec_l, beta, pair, trace_w, trace_l, offset);
  const double z = logit.logit();
  LossValue out;
  out.loss = neg_log_sigmoid(z);
  const double dz = d_neg_log_sigmoid(z);

  for (std::size_t t = 0; t < pair.chosen.size(); ++t) {
    const ContextKey state = make_context(pair.prompt, pair.chosen, t);
    add_grad(out.grad, policy, state, pair.chosen[t], dz * beta * logit.win_terms[t].first);
  }
  for (std::size_t t = 0; t < pair.rejected.size(); ++t) {
    const ContextKey state = make_context(pair.prompt, pair.rejected, t);
    add_grad(out.grad, policy, state, pair.rejected[t], -dz * beta * logit.lose_terms[t].first);
  }
  return out;
}

LossValue dpo_loss(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                   const PreferencePair& pair) {
  require_shared_vocab(policy, ref);
  const auto coeff = [&](std::size_t, std::size_t) { return beta; };
  const SideTerms win = side_terms(policy, &ref, pair.prompt, pair.chosen, coeff);
  const SideTerms lose = side_terms(policy, &ref, pair.prompt, pair.rejected, coeff);
  const double z = win.sum - lose.sum;
  LossValue out;
  out.loss = neg_log_sigmoid(z);
  const double dz = d_neg_log_sigmoid(z);
  side_grad(out.grad, policy, pair.prompt, pair.chosen, dz, 1.0, coeff);
  side_grad(out.grad, policy, pair.prompt, pair.rejected, dz, -1.0, coeff);
  return out;
}

LossValue simpo_loss(const TabularPolicy& policy, double beta, double gamma_margin,
                     const PreferencePair& pair) {
  const auto len_coeff = [&](std::size_t, std::size_t T) { return beta / static_cast<double>(T); };
  const SideTerms win = side_terms(policy, nullptr, pair.prompt, pair.chosen, len_coeff);
  const SideTerms lose = side_terms(policy, nullptr, pair.prompt, pair.rejected, len_coeff);
  const double z = win.sum - lose.sum - gamma_margin;
  LossValue out;
  out.loss = neg_log_sigmoid(z);
  const double dz = d_neg_log_sigmoid(z);
  side_grad(out.grad, policy, pair.prompt, pair.chosen, dz, 1.0, len_coeff);
  side_grad(out.grad, policy, pair.prompt, pair.rejected, dz, -1.0, len_coeff);
  return out;
}

LossValue rdpo_loss(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                    double alpha_len, const PreferencePair& pair) {
  require_shared_vocab(policy, ref);
  const auto coeff = [&](std::size_t, std::size_t) { return beta; };
  const SideTerms win = side_terms(policy, &ref, pair.prompt, pair.chosen, coeff);
  const SideTerms lose = side_terms(policy, &ref, pair.prompt, pair.rejected, coeff);
  const double z = win.sum - lose.sum +
                   alpha_len * (static_cast<double>(pair.chosen.size()) -
                                static_cast<double>(pair.rejected.size()));
  LossValue out;
  out.loss = neg_log_sigmoid(z);
  const double dz = d_neg_log_sigmoid(z);
  side_grad(out.grad, policy, pair.prompt, pair.chosen, dz, 1.0, coeff);
  side_grad(out.grad, policy, pair.prompt, pair.rejected, dz, -1.0, coeff);
  return out;
}

LossValue d2po_loss(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                    double gamma_decay, const PreferencePair& pair) {
  require_shared_vocab(policy, ref);
  if (!(gamma_decay > 0.0 && gamma_decay <= 1.0)) {
    throw ValidationError("decay gamma must lie in (0, 1]");
  }
  const auto coeff = [&](std::size_t t, std::size_t) {
    return beta * std::pow(gamma_decay, static_cast<double>(t));
  };
  const SideTerms win = side_terms(policy, &ref, pair.prompt, pair.chosen, coeff);
  const SideTerms lose = side_terms(policy, &ref, pair.prompt, pair.rejected, coeff);
  const double z = win.sum - lose.sum;
  LossValue out;
  out.loss = neg_log_sigmoid(z);
  const double dz = d_neg_log_sigmoid(z);
  side_grad(out.grad, policy, pair.prompt, pair.chosen, dz, 1.0, coeff);
  side_grad(out.grad, policy, pair.prompt, pair.rejected, dz, -1.0, coeff);
  return out;
}

double sequence_kl(const TabularPolicy& ref, const TabularPolicy& policy, const TokenSeq& prompt,
                   const TokenSeq& response) {
  require_shared_vocab(policy, ref);
  double total = 0.0;
  for (std::size_t t = 0; t < response.size(); ++t) {
    const ContextKey state = make_context(prompt, response, t);
    const Eigen::VectorXd ref_probs = softmax(ref.logits(state));
    const Eigen::VectorXd ref_logp = log_softmax(ref.logits(state));
    const Eigen::VectorXd pol_logp = log_softmax(policy.logits(state));
    for (Eigen::Index a = 0; a < ref_probs.size(); ++a) {
      total += ref_probs[a] * (ref_logp[a] - pol_logp[a]);
    }
  }
  return total;
}

LossValue tdpo_loss(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                    double kl_scale, const PreferencePair& pair) {
  require_shared_vocab(policy, ref);
  if (kl_scale < 0.0) throw ValidationError("kl_scale must be >= 0");
  if (kl_scale == 0.0) return dpo_loss(policy, ref, beta, pair);

  const auto coeff = [&](std::size_t, std::size_t) { return beta; };
  const SideTerms win = side_terms(policy, &ref, pair.prompt, pair.chosen, coeff);
  const SideTerms lose = side_terms(policy, &ref, pair.prompt, pair.rejected, coeff);
  const double kl_w = sequence_kl(ref, policy, pair.prompt, pair.chosen);
  const double kl_l = sequence_kl(ref, policy, pair.prompt, pair.rejected);
  const double z = win.sum - lose.sum - kl_scale * beta * (kl_l - kl_w);

  LossValue out;
  out.loss = neg_log_sigmoid(z);
  const double dz = d_neg_log_sigmoid(z);
  side_grad(out.grad, policy, pair.prompt, pair.chosen, dz, 1.0, coeff);
  side_grad(out.grad, policy, pair.prompt, pair.rejected, dz, -1.0, coeff);

  // d SeqKL / d policy logits at a visited state is softmax(policy) - softmax(ref);
  // the win-side KL enters z with +kl_scale*beta, the lose side with -.
  const auto add_kl_grad = [&](const TokenSeq& response, double sign) {
    for (std::size_t t = 0; t < response.size(); ++t) {
      const ContextKey state = make_context(pair.prompt, response, t);
      const ContextKey key = policy.truncate(state);
      const Eigen::VectorXd g =
          dz * sign * kl_scale * beta * (softmax(policy.logits(state)) - softmax(ref.logits(state)));
      auto it = out.grad.find(key);
      if (it == out.grad.end()) {
        out.grad.emplace(key, g);
      } else {
        it->second += g;
      }
    }
  };
  add_kl_grad(pair.chosen, 1.0);
  add_kl_grad(pair.rejected, -1.0);
  return out;
}

double gradient_norm(const LossValue& value) {
  double sq = 0.0;
  for (const auto& [key, g] : value.grad) {
    sq += g.squaredNorm();
  }
  return std::sqrt(sq);
}

void write_loss_report_line(std::ostream& out, std::size_t step, const std::string& method,
                            const LossValue& value) {
  nlohmann::json line;
  line["step"] = step;
  line["method"] = method;
  line["loss"] = value.loss;
  line["grad_norm"] = gradient_norm(value);
  out << line.dump() << '\n';
}

}  // namespace tgdpo
