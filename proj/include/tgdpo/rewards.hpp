#pragma once

#include <cstddef>
#include <iosfwd>
#include <vector>

#include "tgdpo/core.hpp"
#include "tgdpo/policy.hpp"

namespace tgdpo {

// Per-token rewards r_hat for one response, induced by a frozen stage-1
// policy against the reference.
struct TokenRewardTrace {
  std::vector<double> values;
  double source_beta = 0.0;
};

enum class WeightSide { kWin, kLose };

// Token weight function f_w or f_l. Four shapes cover the framework members:
//   Constant(c)        plain DPO when c = 1
//   TgdpoAffine        1 + alpha*r_hat on the win side, 1 - alpha*r_hat on
//                      the lose side, clamped below at clamp_floor
//   LengthNormalized   1/T (length-normalized sums)
//   TemporalDecay      gamma^t (earlier tokens weigh more)
class TokenWeightSpec {
public:
  enum class Kind { kConstant, kTgdpoAffine, kLengthNormalized, kTemporalDecay };

  static TokenWeightSpec Constant(double c, WeightSide side);
  static TokenWeightSpec TgdpoAffine(double alpha, double clamp_floor, WeightSide side);
  static TokenWeightSpec LengthNormalized(WeightSide side);
  static TokenWeightSpec TemporalDecay(double gamma, WeightSide side);

  Kind kind() const { return kind_; }
  WeightSide side() const { return side_; }
  double alpha() const { return alpha_; }
  double clamp_floor() const { return clamp_floor_; }

  // True when the weight reads r_hat, i.e. a reward trace must be supplied.
  bool needs_trace() const { return kind_ == Kind::kTgdpoAffine; }

  // True when the weight depends on t or T rather than on r_hat alone. Such
  // weights have no single-state meaning, so the closed-form token optimum
  // rejects them.
  bool position_dependent() const {
    return kind_ == Kind::kLengthNormalized || kind_ == Kind::kTemporalDecay;
  }

private:
  TokenWeightSpec() = default;

  Kind kind_ = Kind::kConstant;
  WeightSide side_ = WeightSide::kWin;
  double constant_ = 1.0;
  double alpha_ = 0.0;
  double clamp_floor_ = 1e-3;
  double gamma_ = 1.0;

  friend double weight(const TokenWeightSpec&, double, std::size_t, std::size_t);
  friend double raw_weight(const TokenWeightSpec&, double, std::size_t, std::size_t);
};

// Shared knobs of the guided objective: training beta, guidance strength
// alpha, the beta used to extract r_hat, and the positivity floor. alpha = 0
// degenerates to plain DPO and is allowed; everything else must be > 0.
struct GuidanceConfig {
  double beta = 0.1;
  double alpha = 0.5;
  double reward_beta = 0.1;
  double clamp_floor = 1e-3;

  void validate() const;
  TokenWeightSpec win_spec() const;
  TokenWeightSpec lose_spec() const;
};

// r_hat[t] = reward_beta * log(pi_theta_hat(y^t|s_t) / pi_ref(y^t|s_t)).
// theta_hat must be frozen: rewards come from a finished stage-1 model.
TokenRewardTrace dpo_token_rewards(const TabularPolicy& theta_hat, const TabularPolicy& ref,
                                   double reward_beta, const TokenSeq& prompt,
                                   const TokenSeq& response);

// f(r_hat) at position t of a length-T response. Always >= the spec's floor.
double weight(const TokenWeightSpec& spec, double r_hat, std::size_t t, std::size_t T);

// Same, without the positivity clamp. Only for diagnostics.
double raw_weight(const TokenWeightSpec& spec, double r_hat, std::size_t t, std::size_t T);

struct PositivityReport {
  int n_clamped = 0;    // tokens whose unclamped weight was <= 0
  double min_raw = 1.0; // smallest unclamped weight seen
};

// How often the positivity assumption needed rescue by clamping.
PositivityReport validate_positivity(const TokenWeightSpec& spec,
                                     const std::vector<TokenRewardTrace>& traces);

// One JSON line per trace, pair by pair: the win side of pair i, then its
// lose side. Both lists must have the same length.
void write_reward_traces_jsonl(std::ostream& out, const std::vector<TokenRewardTrace>& win_traces,
                               const std::vector<TokenRewardTrace>& lose_traces);

}  // namespace tgdpo
