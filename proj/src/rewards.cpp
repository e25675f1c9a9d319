#include "tgdpo/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <string>

#include <json.hpp>

#include "tgdpo/errors.hpp"

namespace tgdpo {

TokenWeightSpec TokenWeightSpec::Constant(double c, WeightSide side) {
  if (!(c > 0.0)) throw ValidationError("constant weight must be positive");
  TokenWeightSpec spec;
  spec.kind_ = Kind::kConstant;
  spec.side_ = side;
  spec.constant_ = c;
  return spec;
}

TokenWeightSpec TokenWeightSpec::TgdpoAffine(double alpha, double clamp_floor, WeightSide side) {
  if (alpha < 0.0) throw ValidationError("guidance strength alpha must be >= 0");
  if (!(clamp_floor > 0.0)) throw ValidationError("clamp_floor must be positive");
  TokenWeightSpec spec;
  spec.kind_ = Kind::kTgdpoAffine;
  spec.side_ = side;
  spec.alpha_ = alpha;
  spec.clamp_floor_ = clamp_floor;
  return spec;
}

TokenWeightSpec TokenWeightSpec::LengthNormalized(WeightSide side) {
  TokenWeightSpec spec;
  spec.kind_ = Kind::kLengthNormalized;
  spec.side_ = side;
  return spec;
}

TokenWeightSpec TokenWeightSpec::TemporalDecay(double gamma, WeightSide side) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ValidationError("decay gamma must lie in (0, 1]");
  TokenWeightSpec spec;
  spec.kind_ = Kind::kTemporalDecay;
  spec.side_ = side;
  spec.gamma_ = gamma;
  return spec;
}

void GuidanceConfig::validate() const {
  if (!(beta > 0.0)) throw ValidationError("beta must be positive");
  if (alpha < 0.0) throw ValidationError("alpha must be >= 0");
  if (!(reward_beta > 0.0)) throw ValidationError("reward_beta must be positive");
  if (!(clamp_floor > 0.0)) throw ValidationError("clamp_floor must be positive");
}

TokenWeightSpec GuidanceConfig::win_spec() const {
  return TokenWeightSpec::TgdpoAffine(alpha, clamp_floor, WeightSide::kWin);
}

TokenWeightSpec GuidanceConfig::lose_spec() const {
  return TokenWeightSpec::TgdpoAffine(alpha, clamp_floor, WeightSide::kLose);
}

TokenRewardTrace dpo_token_rewards(const TabularPolicy& theta_hat, const TabularPolicy& ref,
                                   double reward_beta, const TokenSeq& prompt,
                                   const TokenSeq& response) {
  if (!theta_hat.frozen()) {
    throw ValidationError("reward source policy must be frozen before extracting rewards");
  }
  if (!(theta_hat.vocab() == ref.vocab())) {
    throw ValidationError("reward extraction requires policies with a shared vocab");
  }
  if (!(reward_beta > 0.0)) throw ValidationError("reward_beta must be positive");

  TokenRewardTrace trace;
  trace.source_beta = reward_beta;
  trace.values.reserve(response.size());
  for (std::size_t t = 0; t < response.size(); ++t) {
    const ContextKey state = make_context(prompt, response, t);
    trace.values.push_back(reward_beta * token_log_ratio(theta_hat, ref, state, response[t]));
  }
  return trace;
}

double raw_weight(const TokenWeightSpec& spec, double r_hat, std::size_t t, std::size_t T) {
  if (T < 1 || t >= T) {
    throw ValidationError("weight position " + std::to_string(t) + " outside response of length " +
                          std::to_string(T));
  }
  switch (spec.kind_) {
    case TokenWeightSpec::Kind::kConstant:
      return spec.constant_;
    case TokenWeightSpec::Kind::kTgdpoAffine:
      return spec.side_ == WeightSide::kWin ? 1.0 + spec.alpha_ * r_hat
                                            : 1.0 - spec.alpha_ * r_hat;
    case TokenWeightSpec::Kind::kLengthNormalized:
      return 1.0 / static_cast<double>(T);
    case TokenWeightSpec::Kind::kTemporalDecay:
      return std::pow(spec.gamma_, static_cast<double>(t));
  }
  throw ValidationError("unknown weight kind");
}

double weight(const TokenWeightSpec& spec, double r_hat, std::size_t t, std::size_t T) {
  const double raw = raw_weight(spec, r_hat, t, T);
  // Only the affine shape can go nonpositive; the others are positive by
  // construction and pass through untouched.
  if (spec.kind_ == TokenWeightSpec::Kind::kTgdpoAffine) {
    return std::max(raw, spec.clamp_floor_);
  }
  return raw;
}

PositivityReport validate_positivity(const TokenWeightSpec& spec,
                                     const std::vector<TokenRewardTrace>& traces) {
  PositivityReport report;
  bool any = false;
  for (const auto& trace : traces) {
    const std::size_t T = trace.values.size();
    for (std::size_t t = 0; t < T; ++t) {
      const double raw = raw_weight(spec, trace.values[t], t, T);
      if (!any || raw < report.min_raw) report.min_raw = raw;
      any = true;
      if (raw <= 0.0) ++report.n_clamped;
    }
  }
  return report;
}

void write_reward_traces_jsonl(std::ostream& out, const std::vector<TokenRewardTrace>& win_traces,
                               const std::vector<TokenRewardTrace>& lose_traces) {
  if (win_traces.size() != lose_traces.size()) {
    throw ValidationError("win and lose trace lists must have the same length");
  }
  const auto emit = [&out](std::size_t i, const char* side, const TokenRewardTrace& trace) {
    nlohmann::json line;
    line["pair_index"] = i;
    line["side"] = side;
    line["rewards"] = trace.values;
    out << line.dump() << '\n';
  };
  for (std::size_t i = 0; i < win_traces.size(); ++i) {
    emit(i, "w", win_traces[i]);
    emit(i, "l", lose_traces[i]);
  }
}

}  // namespace tgdpo
