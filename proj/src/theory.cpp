#include "tgdpo/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <set>

#include <json.hpp>

#include "tgdpo/errors.hpp"
#include "tgdpo/losses.hpp"
#include "tgdpo/rng.hpp"

namespace tgdpo {

namespace {

constexpr std::size_t kTrajectoryBudget = 1000000;   // full enumerations per check
constexpr double kGridBudget = 10000000.0;           // grid evaluations per check
constexpr double kMaxExponent = 500.0;
constexpr std::size_t kMaxWitnesses = 8;

std::string describe_state(const Vocab& vocab, const ContextKey& state) {
  std::string out = "[";
  for (std::size_t i = 0; i < state.tokens.size(); ++i) {
    if (i > 0) out += ' ';
    out += vocab.symbol(state.tokens[i]);
  }
  out += ']';
  return out;
}

void sort_and_trim(std::vector<TheoremWitness>& witnesses) {
  std::stable_sort(witnesses.begin(), witnesses.end(),
                   [](const TheoremWitness& a, const TheoremWitness& b) { return a.gap > b.gap; });
  if (witnesses.size() > kMaxWitnesses) witnesses.resize(kMaxWitnesses);
}

// r_phi(s, a) / (beta * f(r_hat(s, a))) for every action, guarded so theorem
// checks can never pass on overflowed arithmetic.
Eigen::VectorXd scaled_rewards(const ToyMDP& mdp, const TokenWeightSpec& spec,
                               const ContextKey& state) {
  if (spec.position_dependent()) {
    throw ValidationError(
        "single-state token optimum needs a univariate weight of r_hat; "
        "length- or position-dependent weights do not apply");
  }
  const Eigen::VectorXd rewards = mdp.reward_row(state);
  const Eigen::VectorXd r_hat = mdp.guidance_row(state);
  Eigen::VectorXd scaled(rewards.size());
  for (Eigen::Index a = 0; a < rewards.size(); ++a) {
    const double f = weight(spec, r_hat[a], 0, 1);
    const double e = rewards[a] / (mdp.beta * f);
    if (!(std::abs(e) <= kMaxExponent)) {
      throw NumericalRangeError("exponent " + std::to_string(e) + " out of range at state " +
                                describe_state(mdp.vocab, state) + " action " +
                                mdp.vocab.symbol(static_cast<TokenId>(a)));
    }
    scaled[a] = e;
  }
  return scaled;
}

double stable_sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Eigen::VectorXd ToyMDP::reward_row(const ContextKey& state) const {
  const auto it = raw_reward.find(state);
  if (it == raw_reward.end()) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(vocab.size()));
  return it->second;
}

Eigen::VectorXd ToyMDP::guidance_row(const ContextKey& state) const {
  const auto it = guidance.find(state);
  if (it == guidance.end()) return Eigen::VectorXd::Zero(static_cast<Eigen::Index>(vocab.size()));
  return it->second;
}

void ToyMDP::validate() const {
  if (vocab.size() == 0) throw ValidationError("mdp needs a non-empty vocab");
  if (horizon < 1) throw ValidationError("mdp horizon must be positive");
  if (!(beta > 0.0)) throw ValidationError("mdp beta must be positive");
  if (prompts.empty()) throw ValidationError("mdp needs at least one prompt");
  if (!(ref.vocab() == vocab)) throw ValidationError("mdp reference policy vocab mismatch");
  double weight_sum = 0.0;
  for (const auto& [prompt, w] : prompts) {
    if (!(w > 0.0)) throw ValidationError("prompt weights must be positive");
    weight_sum += w;
    for (TokenId tok : prompt) {
      if (tok >= vocab.size()) throw ValidationError("prompt token out of vocab range");
    }
  }
  if (std::abs(weight_sum - 1.0) > 1e-9) {
    throw ValidationError("prompt weights must sum to 1");
  }
  const auto check_rows = [&](const std::map<ContextKey, Eigen::VectorXd>& rows,
                              const char* name) {
    for (const auto& [state, row] : rows) {
      if (row.size() != static_cast<Eigen::Index>(vocab.size())) {
        throw ValidationError(std::string(name) + " row size mismatch at state " +
                              describe_state(vocab, state));
      }
      if (!row.allFinite()) {
        throw ValidationError(std::string(name) + " has a non-finite value at state " +
                              describe_state(vocab, state));
      }
    }
  };
  check_rows(raw_reward, "raw_reward");
  check_rows(guidance, "guidance");
}

std::size_t trajectory_count(const ToyMDP& mdp) {
  const std::size_t cap = std::numeric_limits<std::size_t>::max();
  std::size_t per_prompt = 1;
  for (std::size_t i = 0; i < mdp.horizon; ++i) {
    if (per_prompt > cap / mdp.vocab.size()) return cap;
    per_prompt *= mdp.vocab.size();
  }
  if (per_prompt > cap / mdp.prompts.size()) return cap;
  return per_prompt * mdp.prompts.size();
}

namespace {

void require_enumerable(const ToyMDP& mdp) {
  if (trajectory_count(mdp) > kTrajectoryBudget) {
    throw CapacityError("instance needs " + std::to_string(trajectory_count(mdp)) +
                        " trajectories; the exact-enumeration budget is " +
                        std::to_string(kTrajectoryBudget));
  }
}

}  // namespace

std::vector<ContextKey> reachable_states(const ToyMDP& mdp) {
  mdp.validate();
  require_enumerable(mdp);
  std::vector<ContextKey> states;
  for (const auto& [prompt, w] : mdp.prompts) {
    std::vector<ContextKey> level = {ContextKey{prompt}};
    for (std::size_t t = 0; t < mdp.horizon; ++t) {
      states.insert(states.end(), level.begin(), level.end());
      if (t + 1 == mdp.horizon) break;
      std::vector<ContextKey> next;
      next.reserve(level.size() * mdp.vocab.size());
      for (const auto& state : level) {
        for (TokenId a = 0; a < mdp.vocab.size(); ++a) {
          ContextKey child = state;
          child.tokens.push_back(a);
          next.push_back(std::move(child));
        }
      }
      level = std::move(next);
    }
  }
  return states;
}

double sequence_objective(const ToyMDP& mdp, const TabularPolicy& policy) {
  mdp.validate();
  require_enumerable(mdp);
  if (!(policy.vocab() == mdp.vocab)) {
    throw ValidationError("policy vocab does not match the mdp");
  }
  double total = 0.0;
  for (const auto& [prompt, wx] : mdp.prompts) {
    ContextKey state{prompt};
    const auto walk = [&](auto&& self, std::size_t t, double logp_pol, double logp_ref,
                          double reward_sum) -> void {
      if (t == mdp.horizon) {
        total += wx * std::exp(logp_pol) *
                 (reward_sum - mdp.beta * (logp_pol - logp_ref));
        return;
      }
      const Eigen::VectorXd rewards = mdp.reward_row(state);
      const Eigen::VectorXd lp_pol = log_softmax(policy.logits(state));
      const Eigen::VectorXd lp_ref = log_softmax(mdp.ref.logits(state));
      for (TokenId a = 0; a < mdp.vocab.size(); ++a) {
        state.tokens.push_back(a);
        self(self, t + 1, logp_pol + lp_pol[a], logp_ref + lp_ref[a], reward_sum + rewards[a]);
        state.tokens.pop_back();
      }
    };
    walk(walk, 0, 0.0, 0.0, 0.0);
  }
  return total;
}

double per_step_objective(const ToyMDP& mdp, const TabularPolicy& policy, std::size_t t) {
  mdp.validate();
  require_enumerable(mdp);
  if (!(policy.vocab() == mdp.vocab)) {
    throw ValidationError("policy vocab does not match the mdp");
  }
  if (t >= mdp.horizon) {
    throw ValidationError("step " + std::to_string(t) + " outside horizon " +
                          std::to_string(mdp.horizon));
  }
  double total = 0.0;
  for (const auto& [prompt, wx] : mdp.prompts) {
    ContextKey state{prompt};
    const auto walk = [&](auto&& self, std::size_t depth, double prefix_prob) -> void {
      if (depth == t) {
        const Eigen::VectorXd rewards = mdp.reward_row(state);
        const Eigen::VectorXd lp_pol = log_softmax(policy.logits(state));
        const Eigen::VectorXd lp_ref = log_softmax(mdp.ref.logits(state));
        const Eigen::VectorXd probs = softmax(policy.logits(state));
        for (TokenId a = 0; a < mdp.vocab.size(); ++a) {
          total += wx * prefix_prob * probs[a] * (rewards[a] - mdp.beta * (lp_pol[a] - lp_ref[a]));
        }
        return;
      }
      const Eigen::VectorXd probs = softmax(policy.logits(state));
      for (TokenId a = 0; a < mdp.vocab.size(); ++a) {
        state.tokens.push_back(a);
        self(self, depth + 1, prefix_prob * probs[a]);
        state.tokens.pop_back();
      }
    };
    walk(walk, 0, 1.0);
  }
  return total;
}

OptimalTokenPolicy optimal_token_policy(const ToyMDP& mdp, const TokenWeightSpec& spec,
                                        const ContextKey& state) {
  mdp.validate();
  const Eigen::VectorXd scaled = scaled_rewards(mdp, spec, state);
  const Eigen::VectorXd ref_probs = softmax(mdp.ref.logits(state));
  OptimalTokenPolicy out;
  out.probs.resize(scaled.size());
  double z = 0.0;
  for (Eigen::Index a = 0; a < scaled.size(); ++a) {
    out.probs[a] = ref_probs[a] * std::exp(scaled[a]);
    z += out.probs[a];
  }
  out.z = z;
  out.probs /= z;
  return out;
}

double reconstruct_reward(const ToyMDP& mdp, const TokenWeightSpec& spec, const ContextKey& state,
                          TokenId action) {
  if (action >= mdp.vocab.size()) {
    throw ValidationError("action out of vocab range in reward reconstruction");
  }
  const OptimalTokenPolicy opt = optimal_token_policy(mdp, spec, state);
  const Eigen::VectorXd ref_probs = softmax(mdp.ref.logits(state));
  const double f = weight(spec, mdp.guidance_row(state)[static_cast<Eigen::Index>(action)], 0, 1);
  const Eigen::Index a = static_cast<Eigen::Index>(action);
  return mdp.beta * f * std::log(opt.probs[a] / ref_probs[a]) + mdp.beta * f * std::log(opt.z);
}

double compute_delta_term(const ToyMDP& mdp, const TokenWeightSpec& spec_w,
                          const TokenWeightSpec& spec_l, const PreferencePair& pair) {
  const auto side = [&](const TokenSeq& response, const TokenWeightSpec& spec) {
    double sum = 0.0;
    for (std::size_t t = 0; t < response.size(); ++t) {
      const ContextKey state = make_context(pair.prompt, response, t);
      const double f =
          weight(spec, mdp.guidance_row(state)[static_cast<Eigen::Index>(response[t])], 0, 1);
      const double z = optimal_token_policy(mdp, spec, state).z;
      sum += mdp.beta * f * std::log(z);
    }
    return sum;
  };
  return side(pair.chosen, spec_w) - side(pair.rejected, spec_l);
}

double optimal_phi(const ToyMDP& mdp, const TokenWeightSpec& spec_w,
                   const TokenWeightSpec& spec_l, const PreferencePair& pair) {
  const auto side = [&](const TokenSeq& response, const TokenWeightSpec& spec) {
    double sum = 0.0;
    for (std::size_t t = 0; t < response.size(); ++t) {
      const ContextKey state = make_context(pair.prompt, response, t);
      const Eigen::Index a = static_cast<Eigen::Index>(response[t]);
      const OptimalTokenPolicy opt = optimal_token_policy(mdp, spec, state);
      const Eigen::VectorXd ref_probs = softmax(mdp.ref.logits(state));
      const double f = weight(spec, mdp.guidance_row(state)[a], 0, 1);
      sum += mdp.beta * f * std::log(opt.probs[a] / ref_probs[a]);
    }
    return sum;
  };
  return side(pair.chosen, spec_w) - side(pair.rejected, spec_l);
}

TheoremReport check_decomposition(const ToyMDP& mdp, const TabularPolicy& policy,
                                  double corruption) {
  mdp.validate();
  require_enumerable(mdp);
  if (!(policy.vocab() == mdp.vocab)) {
    throw ValidationError("policy vocab does not match the mdp");
  }
  TheoremReport report;
  report.theorem = "decomposition";
  report.tolerance = 1e-12;
  report.passed = true;

  for (std::size_t pi = 0; pi < mdp.prompts.size(); ++pi) {
    const TokenSeq& prompt = mdp.prompts[pi].first;
    TokenSeq response(mdp.horizon, 0);
    const auto walk = [&](auto&& self, std::size_t t) -> void {
      if (t == mdp.horizon) {
        // Sequence-level route: rewards, then one aggregated log-ratio.
        double reward_sum = 0.0;
        for (std::size_t u = 0; u < mdp.horizon; ++u) {
          const ContextKey state = make_context(prompt, response, u);
          reward_sum += mdp.reward_row(state)[static_cast<Eigen::Index>(response[u])];
        }
        const double lhs =
            reward_sum - mdp.beta * (sequence_log_prob(policy, prompt, response) -
                                     sequence_log_prob(mdp.ref, prompt, response));
        // Token-level route: one bracket per step.
        double rhs = 0.0;
        for (std::size_t u = 0; u < mdp.horizon; ++u) {
          const ContextKey state = make_context(prompt, response, u);
          rhs += mdp.reward_row(state)[static_cast<Eigen::Index>(response[u])] -
                 mdp.beta *
                     (token_log_ratio(policy, mdp.ref, state, response[u]) + corruption);
        }
        const double gap = std::abs(lhs - rhs);
        if (gap > report.tolerance) report.passed = false;
        if (gap > report.tolerance || report.witnesses.size() < kMaxWitnesses) {
          report.witnesses.push_back({"prompt " + std::to_string(pi) + ", trajectory " +
                                          describe_state(mdp.vocab, ContextKey{response}),
                                      lhs, rhs, gap});
        }
        return;
      }
      for (TokenId a = 0; a < mdp.vocab.size(); ++a) {
        response[t] = a;
        self(self, t + 1);
      }
    };
    walk(walk, 0);
  }
  sort_and_trim(report.witnesses);
  return report;
}

namespace {

// All probability vectors with entries k/resolution, k integer, summing to 1.
std::vector<Eigen::VectorXd> simplex_grid(std::size_t dims, int resolution, double budget) {
  double count = 1.0;  // C(resolution + dims - 1, dims - 1)
  for (std::size_t i = 1; i < dims; ++i) {
    count *= static_cast<double>(resolution + i) / static_cast<double>(i);
  }
  if (count > budget) {
    throw CapacityError("simplex grid of ~" + std::to_string(static_cast<long long>(count)) +
                        " points exceeds the evaluation budget");
  }
  std::vector<Eigen::VectorXd> grid;
  Eigen::VectorXd point(static_cast<Eigen::Index>(dims));
  const auto fill = [&](auto&& self, std::size_t dim, int remaining) -> void {
    if (dim + 1 == dims) {
      point[static_cast<Eigen::Index>(dim)] =
          static_cast<double>(remaining) / static_cast<double>(resolution);
      grid.push_back(point);
      return;
    }
    for (int k = 0; k <= remaining; ++k) {
      point[static_cast<Eigen::Index>(dim)] =
          static_cast<double>(k) / static_cast<double>(resolution);
      self(self, dim + 1, remaining - k);
    }
  };
  fill(fill, 0, resolution);
  return grid;
}

// The state-local objective of the guided token problem:
// g(p) = sum_a p_a * (scaled_r_a - log(p_a / ref_a)), with 0 log 0 = 0.
double token_objective(const Eigen::VectorXd& probs, const Eigen::VectorXd& scaled,
                       const Eigen::VectorXd& ref_probs) {
  double value = 0.0;
  for (Eigen::Index a = 0; a < probs.size(); ++a) {
    if (probs[a] > 0.0) {
      value += probs[a] * (scaled[a] - std::log(probs[a] / ref_probs[a]));
    }
  }
  return value;
}

}  // namespace

TheoremReport check_upper_bound(const ToyMDP& mdp, int resolution) {
  mdp.validate();
  require_enumerable(mdp);
  if (resolution < 1) throw ValidationError("grid resolution must be positive");

  const std::vector<ContextKey> contexts = reachable_states(mdp);
  std::map<ContextKey, std::size_t> ctx_index;
  for (std::size_t i = 0; i < contexts.size(); ++i) ctx_index.emplace(contexts[i], i);

  const std::vector<Eigen::VectorXd> grid = simplex_grid(mdp.vocab.size(), resolution, kGridBudget);
  double n_policies = 1.0;
  for (std::size_t c = 0; c < contexts.size(); ++c) {
    n_policies *= static_cast<double>(grid.size());
    if (n_policies > kGridBudget) break;
  }
  if (n_policies * static_cast<double>(trajectory_count(mdp)) > kGridBudget) {
    throw CapacityError("whole-policy grid sweep exceeds the evaluation budget");
  }

  std::vector<Eigen::VectorXd> rewards(contexts.size());
  std::vector<Eigen::VectorXd> log_ref(contexts.size());
  for (std::size_t c = 0; c < contexts.size(); ++c) {
    rewards[c] = mdp.reward_row(contexts[c]);
    log_ref[c] = log_softmax(mdp.ref.logits(contexts[c]));
  }

  const std::size_t T = mdp.horizon;
  double lhs_best = -std::numeric_limits<double>::infinity();
  std::vector<double> rhs_best(T, -std::numeric_limits<double>::infinity());

  std::vector<std::size_t> digits(contexts.size(), 0);
  while (true) {
    double seq = 0.0;
    std::vector<double> terms(T, 0.0);
    for (const auto& [prompt, wx] : mdp.prompts) {
      ContextKey state{prompt};
      const auto walk = [&](auto&& self, std::size_t t, double q, double lr, double rs) -> void {
        const std::size_t c = ctx_index.at(state);
        const Eigen::VectorXd& p = grid[digits[c]];
        for (TokenId a = 0; a < mdp.vocab.size(); ++a) {
          const Eigen::Index ai = static_cast<Eigen::Index>(a);
          if (p[ai] <= 0.0) continue;  // measure-zero branch
          const double la = std::log(p[ai]) - log_ref[c][ai];
          const double step_value = rewards[c][ai] - mdp.beta * la;
          terms[t] += wx * q * p[ai] * step_value;
          if (t + 1 == T) {
            seq += wx * q * p[ai] * (rs + rewards[c][ai] - mdp.beta * (lr + la));
          } else {
            state.tokens.push_back(a);
            self(self, t + 1, q * p[ai], lr + la, rs + rewards[c][ai]);
            state.tokens.pop_back();
          }
        }
      };
      walk(walk, 0, 1.0, 0.0, 0.0);
    }
    lhs_best = std::max(lhs_best, seq);
    for (std::size_t t = 0; t < T; ++t) rhs_best[t] = std::max(rhs_best[t], terms[t]);

    std::size_t i = digits.size();
    while (i > 0 && ++digits[i - 1] == grid.size()) digits[--i] = 0;
    if (i == 0) break;
  }

  double rhs_sum = 0.0;
  for (double term : rhs_best) rhs_sum += term;

  TheoremReport report;
  report.theorem = "upper-bound";
  report.tolerance = 1e-9;
  report.passed = lhs_best <= rhs_sum + report.tolerance;
  report.witnesses.push_back({"best whole-sequence value vs summed per-step optima over " +
                                  std::to_string(static_cast<long long>(n_policies)) +
                                  " grid policies",
                              lhs_best, rhs_sum, lhs_best - rhs_sum});
  return report;
}

TheoremReport check_optimal_policy(const ToyMDP& mdp, const TokenWeightSpec& spec, int resolution,
                                   double corruption) {
  mdp.validate();
  if (resolution < 1) throw ValidationError("grid resolution must be positive");
  const std::vector<ContextKey> states = reachable_states(mdp);
  const std::vector<Eigen::VectorXd> grid = simplex_grid(
      mdp.vocab.size(), resolution, kGridBudget / static_cast<double>(states.size()));

  TheoremReport report;
  report.theorem = "optimal-policy";
  report.tolerance = 2e-3;
  report.passed = true;

  const double uniform = 1.0 / static_cast<double>(mdp.vocab.size());
  for (const ContextKey& state : states) {
    OptimalTokenPolicy opt = optimal_token_policy(mdp, spec, state);
    if (corruption > 0.0) {
      opt.probs = (1.0 - corruption) * opt.probs +
                  corruption * Eigen::VectorXd::Constant(opt.probs.size(), uniform);
    }
    const Eigen::VectorXd scaled = scaled_rewards(mdp, spec, state);
    const Eigen::VectorXd ref_probs = softmax(mdp.ref.logits(state));

    double best_value = -std::numeric_limits<double>::infinity();
    const Eigen::VectorXd* best_point = nullptr;
    for (const Eigen::VectorXd& p : grid) {
      const double v = token_objective(p, scaled, ref_probs);
      if (v > best_value) {
        best_value = v;
        best_point = &p;
      }
    }
    const double closed_value = token_objective(opt.probs, scaled, ref_probs);
    const double coord_gap = (opt.probs - *best_point).cwiseAbs().maxCoeff();
    const double domination_gap = best_value - closed_value;  // positive = grid beat closed form

    const bool ok = coord_gap <= report.tolerance && domination_gap <= 1e-12;
    if (!ok) report.passed = false;
    report.witnesses.push_back({"state " + describe_state(mdp.vocab, state) +
                                    ": grid argmax distance (objective slack " +
                                    std::to_string(domination_gap) + ")",
                                closed_value, best_value,
                                std::max(coord_gap - report.tolerance, domination_gap)});
  }
  sort_and_trim(report.witnesses);
  return report;
}

TheoremReport check_reward_reconstruction(const ToyMDP& mdp, const TokenWeightSpec& spec) {
  const std::vector<ContextKey> states = reachable_states(mdp);
  TheoremReport report;
  report.theorem = "reward-reconstruction";
  report.tolerance = 1e-10;
  report.passed = true;
  for (const ContextKey& state : states) {
    const Eigen::VectorXd stored = mdp.reward_row(state);
    for (TokenId a = 0; a < mdp.vocab.size(); ++a) {
      const double rebuilt = reconstruct_reward(mdp, spec, state, a);
      const double expected = stored[static_cast<Eigen::Index>(a)];
      const double gap = std::abs(rebuilt - expected);
      if (gap > report.tolerance) report.passed = false;
      report.witnesses.push_back({"state " + describe_state(mdp.vocab, state) + " action " +
                                      mdp.vocab.symbol(a),
                                  rebuilt, expected, gap});
    }
  }
  sort_and_trim(report.witnesses);
  return report;
}

TheoremReport check_bt_identity(const ToyMDP& mdp, const TokenWeightSpec& spec_w,
                                const TokenWeightSpec& spec_l,
                                const std::vector<PreferencePair>& pairs) {
  if (pairs.empty()) throw ValidationError("Bradley-Terry identity check needs pairs");
  TheoremReport report;
  report.theorem = "bt-identity";
  report.tolerance = 1e-10;
  report.passed = true;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const PreferencePair& pair = pairs[i];
    const double phi = optimal_phi(mdp, spec_w, spec_l, pair);
    const double delta = compute_delta_term(mdp, spec_w, spec_l, pair);
    const auto raw_total = [&](const TokenSeq& response) {
      double sum = 0.0;
      for (std::size_t t = 0; t < response.size(); ++t) {
        const ContextKey state = make_context(pair.prompt, response, t);
        sum += mdp.reward_row(state)[static_cast<Eigen::Index>(response[t])];
      }
      return sum;
    };
    const double lhs = stable_sigmoid(phi + delta);
    const double rhs = stable_sigmoid(raw_total(pair.chosen) - raw_total(pair.rejected));
    const double gap = std::abs(lhs - rhs);
    if (gap > report.tolerance) report.passed = false;
    report.witnesses.push_back({"pair " + std::to_string(i), lhs, rhs, gap});
  }
  sort_and_trim(report.witnesses);
  return report;
}

double sigmoid_difference(double a, double b) {
  // sigma(a) - sigma(b) = expm1(a - b) * sigma(b) * sigma(-a): every factor
  // is computed without cancellation, so the sign is exact even where both
  // sigmoids would round to the same double.
  return std::expm1(a - b) * stable_sigmoid(b) * stable_sigmoid(-a);
}

TheoremReport check_order_preservation(int n_trials, int n_direction_trials, std::uint64_t seed) {
  if (n_trials < 1) throw ValidationError("order-preservation needs at least one trial");
  TheoremReport report;
  report.theorem = "order-preservation";
  report.tolerance = 0.0;
  report.passed = true;

  const auto sign_of = [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); };

  std::mt19937_64 rng(substream_seed(seed, "order"));
  int value_failures = 0;
  for (int i = 0; i < n_trials; ++i) {
    const double phi1 = rand_range(rng, -10.0, 10.0);
    const double phi2 = rand_range(rng, -10.0, 10.0);
    const double delta = rand_range(rng, -10.0, 10.0);
    const double base = sign_of(sigmoid_difference(phi1, phi2));
    const double shifted = sign_of(sigmoid_difference(phi1 + delta, phi2 + delta));
    if (base != shifted) {
      ++value_failures;
      report.passed = false;
      report.witnesses.push_back({"value trial " + std::to_string(i) + ": sign flip", base,
                                  shifted, std::abs(base - shifted)});
    }
  }

  std::mt19937_64 dir_rng(substream_seed(seed, "order-directions"));
  int direction_failures = 0;
  for (int i = 0; i < n_direction_trials; ++i) {
    // Random quadratic phi(theta) on three parameters; the claim is that the
    // shift never flips the sign of a directional derivative of sigma(phi).
    Eigen::Matrix3d A;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c <= r; ++c) {
        A(r, c) = rand_range(dir_rng, -1.0, 1.0);
        A(c, r) = A(r, c);
      }
    }
    Eigen::Vector3d b, theta, v;
    for (int r = 0; r < 3; ++r) b[r] = rand_range(dir_rng, -1.0, 1.0);
    for (int r = 0; r < 3; ++r) theta[r] = rand_range(dir_rng, -1.0, 1.0);
    for (int r = 0; r < 3; ++r) v[r] = rand_range(dir_rng, -1.0, 1.0);
    const double delta = rand_range(dir_rng, -10.0, 10.0);

    const double phi = 0.5 * theta.dot(A * theta) + b.dot(theta);
    const double slope = (A * theta + b).dot(v);  // directional derivative of phi
    const double s1 = stable_sigmoid(phi) * stable_sigmoid(-phi) * slope;
    const double s2 = stable_sigmoid(phi + delta) * stable_sigmoid(-(phi + delta)) * slope;
    if (sign_of(s1) != sign_of(s2)) {
      ++direction_failures;
      report.passed = false;
      report.witnesses.push_back({"direction trial " + std::to_string(i) + ": sign flip", s1, s2,
                                  std::abs(sign_of(s1) - sign_of(s2))});
    }
  }

  report.witnesses.push_back(
      {"sign agreement in " + std::to_string(n_trials) + " value trials and " +
           std::to_string(n_direction_trials) + " directional trials",
       static_cast<double>(value_failures), static_cast<double>(direction_failures), 0.0});
  sort_and_trim(report.witnesses);
  return report;
}

void write_theorem_report_json(std::ostream& out, const TheoremReport& report) {
  nlohmann::json obj;
  obj["theorem"] = report.theorem;
  obj["passed"] = report.passed;
  obj["tolerance"] = report.tolerance;
  nlohmann::json witnesses = nlohmann::json::array();
  for (const auto& w : report.witnesses) {
    witnesses.push_back({{"desc", w.desc}, {"lhs", w.lhs}, {"rhs", w.rhs}, {"gap", w.gap}});
  }
  obj["witnesses"] = std::move(witnesses);
  out << obj.dump(2) << '\n';
}

TheoremReport merge_reports(const std::string& theorem, const std::vector<TheoremReport>& parts) {
  if (parts.empty()) throw ValidationError("cannot merge zero reports");
  TheoremReport merged;
  merged.theorem = theorem;
  merged.tolerance = parts.front().tolerance;
  merged.passed = true;
  for (const auto& part : parts) {
    if (!part.passed) merged.passed = false;
    merged.witnesses.insert(merged.witnesses.end(), part.witnesses.begin(), part.witnesses.end());
  }
  sort_and_trim(merged.witnesses);
  return merged;
}

ToyMDP random_toy_mdp(const Vocab& vocab, std::size_t horizon, std::size_t n_prompts, double beta,
                      std::uint64_t seed) {
  if (n_prompts < 1) throw ValidationError("mdp builder needs at least one prompt");
  std::mt19937_64 rng(substream_seed(seed, "mdp"));

  ToyMDP mdp;
  mdp.vocab = vocab;
  mdp.horizon = horizon;
  mdp.beta = beta;

  std::set<TokenSeq> seen;
  while (mdp.prompts.size() < n_prompts) {
    const std::size_t len = 1 + rand_below(rng, 2);
    TokenSeq prompt(len);
    for (auto& tok : prompt) tok = static_cast<TokenId>(rand_below(rng, vocab.size()));
    if (seen.insert(prompt).second) mdp.prompts.emplace_back(std::move(prompt), 0.0);
  }
  double total = 0.0;
  for (auto& [prompt, w] : mdp.prompts) {
    w = rand_range(rng, 0.5, 1.5);
    total += w;
  }
  for (auto& [prompt, w] : mdp.prompts) w /= total;

  mdp.ref = TabularPolicy(vocab);
  const std::vector<ContextKey> states = reachable_states(mdp);
  for (const ContextKey& state : states) {
    Eigen::VectorXd reward(static_cast<Eigen::Index>(vocab.size()));
    Eigen::VectorXd guide(static_cast<Eigen::Index>(vocab.size()));
    Eigen::VectorXd logits(static_cast<Eigen::Index>(vocab.size()));
    for (Eigen::Index a = 0; a < reward.size(); ++a) {
      reward[a] = rand_range(rng, -1.0, 1.0);
      guide[a] = rand_range(rng, -0.5, 0.5);
      logits[a] = rand_range(rng, -1.0, 1.0);
    }
    mdp.raw_reward.emplace(state, std::move(reward));
    mdp.guidance.emplace(state, std::move(guide));
    mdp.ref.set_logits(state, std::move(logits));
  }
  mdp.ref.freeze();
  mdp.validate();
  return mdp;
}

TabularPolicy random_tabular_policy(const Vocab& vocab, const std::vector<ContextKey>& states,
                                    double logit_scale, std::uint64_t seed) {
  if (!(logit_scale > 0.0)) throw ValidationError("logit scale must be positive");
  std::mt19937_64 rng(substream_seed(seed, "policy"));
  TabularPolicy policy(vocab);
  for (const ContextKey& state : states) {
    Eigen::VectorXd logits(static_cast<Eigen::Index>(vocab.size()));
    for (Eigen::Index a = 0; a < logits.size(); ++a) {
      logits[a] = rand_range(rng, -logit_scale, logit_scale);
    }
    policy.set_logits(state, std::move(logits));
  }
  return policy;
}

PreferencePair random_pair_in(const ToyMDP& mdp, std::mt19937_64& rng) {
  PreferencePair pair;
  pair.prompt = mdp.prompts[rand_below(rng, mdp.prompts.size())].first;
  const auto draw = [&](std::size_t len) {
    TokenSeq seq(len);
    for (auto& tok : seq) tok = static_cast<TokenId>(rand_below(rng, mdp.vocab.size()));
    return seq;
  };
  pair.chosen = draw(1 + rand_below(rng, mdp.horizon));
  pair.rejected = draw(1 + rand_below(rng, mdp.horizon));
  while (pair.rejected == pair.chosen) {
    pair.rejected = draw(1 + rand_below(rng, mdp.horizon));
  }
  return pair;
}

}  // namespace tgdpo
