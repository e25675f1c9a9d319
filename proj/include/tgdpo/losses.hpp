#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tgdpo/core.hpp"
#include "tgdpo/policy.hpp"
#include "tgdpo/rewards.hpp"

namespace tgdpo {

// The per-instance preference logit phi plus a theta-constant offset, with
// the per-token (weight, log-ratio) terms kept for auditing. phi is the
// weighted win sum minus the weighted lose sum; the offset carries terms
// that do not depend on the trained policy (a margin, a length penalty, or
// reference-only sums) and therefore never contributes to the gradient.
struct PerInstanceLogit {
  double phi = 0.0;
  double offset = 0.0;
  double beta = 0.0;
  std::vector<std::pair<double, double>> win_terms;   // (f at token t, log-ratio)
  std::vector<std::pair<double, double>> lose_terms;

  double logit() const { return phi + offset; }
};

// A scalar loss with its analytic gradient, keyed by the trained policy's
// (truncated) contexts. Zero everywhere a key is absent.
struct LossValue {
  double loss = 0.0;
  std::map<ContextKey, Eigen::VectorXd> grad;
};

// -ln(sigmoid(z)), computed as softplus(-z) to stay finite for large |z|.
double neg_log_sigmoid(double z);

// d/dz of the above: -sigmoid(-z).
double d_neg_log_sigmoid(double z);

// The unified preference logit: phi = sum_t beta*f_w*log-ratio(win token t)
// minus the same sum over lose tokens. Traces supply r_hat per token and are
// required exactly when a spec's weight reads it; lengths must match the
// responses. The offset passes through untouched.
PerInstanceLogit preference_logit(const TabularPolicy& policy, const TabularPolicy& ref,
                                  const TokenWeightSpec& spec_w, const TokenWeightSpec& spec_l,
                                  double beta, const PreferencePair& pair,
                                  const TokenRewardTrace* trace_w, const TokenRewardTrace* trace_l,
                                  double offset);

// -ln(sigmoid(phi + offset)) with the chain-rule gradient: each win token
// contributes beta*f_w,t times its log-prob gradient, lose tokens the
// negative analog.
LossValue tgdpo_loss(const TabularPolicy& policy, const TabularPolicy& ref,
                     const TokenWeightSpec& spec_w, const TokenWeightSpec& spec_l, double beta,
                     const PreferencePair& pair, const TokenRewardTrace* trace_w,
                     const TokenRewardTrace* trace_l, double offset);

LossValue dpo_loss(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                   const PreferencePair& pair);

// Reference-free, length-normalized logit with margin gamma_margin.
LossValue simpo_loss(const TabularPolicy& policy, double beta, double gamma_margin,
                     const PreferencePair& pair);

// DPO logit shifted by alpha_len * (|y_w| - |y_l|).
LossValue rdpo_loss(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                    double alpha_len, const PreferencePair& pair);

// Per-token log-ratios decayed by gamma_decay^t.
LossValue d2po_loss(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                    double gamma_decay, const PreferencePair& pair);

// DPO logit minus kl_scale*beta*(SeqKL(lose) - SeqKL(win)), where SeqKL sums
// the full per-position KL(ref || policy) along a response.
LossValue tdpo_loss(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                    double kl_scale, const PreferencePair& pair);

// SeqKL(x, y; ref || policy) = sum_t sum_a ref(a|s_t) ln(ref(a|s_t)/policy(a|s_t)).
double sequence_kl(const TabularPolicy& ref, const TabularPolicy& policy, const TokenSeq& prompt,
                   const TokenSeq& response);

// l2 norm of the gradient across all context blocks, in key order.
double gradient_norm(const LossValue& value);

// One JSON report line: {"step", "method", "loss", "grad_norm"}.
void write_loss_report_line(std::ostream& out, std::size_t step, const std::string& method,
                            const LossValue& value);

}  // namespace tgdpo
