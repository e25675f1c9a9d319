#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tgdpo/core.hpp"
#include "tgdpo/policy.hpp"
#include "tgdpo/rewards.hpp"

namespace tgdpo {

// Enumerable token MDP: weighted prompts, a ground-truth per-(state, action)
// reward table r_phi, a token-guidance table r_hat, a reference policy, and a
// horizon small enough that every trajectory can be walked exactly. Rows
// absent from the reward or guidance tables read as zero.
struct ToyMDP {
  Vocab vocab;
  std::size_t horizon = 1;
  std::vector<std::pair<TokenSeq, double>> prompts;  // (prompt, weight); weights sum to 1
  std::map<ContextKey, Eigen::VectorXd> raw_reward;  // r_phi(s, .)
  std::map<ContextKey, Eigen::VectorXd> guidance;    // r_hat(s, .)
  TabularPolicy ref;
  double beta = 0.1;

  Eigen::VectorXd reward_row(const ContextKey& state) const;
  Eigen::VectorXd guidance_row(const ContextKey& state) const;
  void validate() const;
};

// Trajectories a full enumeration would visit; the exactness budget.
std::size_t trajectory_count(const ToyMDP& mdp);

// Every state reachable within the horizon, prompt-major then step-major,
// actions ascending. These are the rows a tabular policy can matter on.
std::vector<ContextKey> reachable_states(const ToyMDP& mdp);

// Exact value of the sequence-level objective
//   E[ sum_t r_phi(s_t, a_t) - beta * log(pi(y|x)/pi_ref(y|x)) ]
// by full trajectory enumeration. No sampling.
double sequence_objective(const ToyMDP& mdp, const TabularPolicy& policy);

// Exact value of the step-t objective E_{s_t, a_t}[r_phi - beta*log ratio]
// with the state distribution induced by the same policy.
double per_step_objective(const ToyMDP& mdp, const TabularPolicy& policy, std::size_t t);

struct OptimalTokenPolicy {
  Eigen::VectorXd probs;
  double z = 1.0;  // partition function Z(state)
};

// Closed-form optimum of the guided token objective at one state:
// pi*(a|s) = ref(a|s) * exp(r_phi(s,a) / (beta * f(r_hat(s,a)))) / Z(s).
// The weight spec must be a univariate function of r_hat (constant or
// affine); position-dependent shapes have no meaning at a single state.
OptimalTokenPolicy optimal_token_policy(const ToyMDP& mdp, const TokenWeightSpec& spec,
                                        const ContextKey& state);

// beta*f*log(pi*(a|s)/ref(a|s)) + beta*f*log Z(s); equals r_phi(s,a).
double reconstruct_reward(const ToyMDP& mdp, const TokenWeightSpec& spec, const ContextKey& state,
                          TokenId action);

// delta = sum_t beta*f_w(r_hat)*log Z(win state) - same over lose states,
// with each side's Z computed under its own weight function.
double compute_delta_term(const ToyMDP& mdp, const TokenWeightSpec& spec_w,
                          const TokenWeightSpec& spec_l, const PreferencePair& pair);

// phi evaluated at the closed-form optimal policy of every visited state.
double optimal_phi(const ToyMDP& mdp, const TokenWeightSpec& spec_w,
                   const TokenWeightSpec& spec_l, const PreferencePair& pair);

struct TheoremWitness {
  std::string desc;
  double lhs = 0.0;
  double rhs = 0.0;
  double gap = 0.0;
};

struct TheoremReport {
  std::string theorem;
  bool passed = false;
  double tolerance = 0.0;
  std::vector<TheoremWitness> witnesses;  // worst offenders, largest gap first
};

// Pathwise identity: on every trajectory, the sequence-level value equals the
// sum of per-token values. `corruption` shifts each token log-ratio on the
// token-level side and exists so tests can prove the check would catch a
// broken implementation; 0 means verify the real thing.
TheoremReport check_decomposition(const ToyMDP& mdp, const TabularPolicy& policy,
                                  double corruption = 0.0);

// Sequence-level optimum vs the sum of per-step optima over policies laid on
// a per-context probability grid with `resolution` steps per coordinate.
TheoremReport check_upper_bound(const ToyMDP& mdp, int resolution);

// Closed form vs simplex-grid search at every reachable state: the grid
// argmax must sit next to pi* and never beat it. `corruption` mixes pi*
// with the uniform distribution to give the negative control a handle.
TheoremReport check_optimal_policy(const ToyMDP& mdp, const TokenWeightSpec& spec, int resolution,
                                   double corruption = 0.0);

// reconstruct_reward vs the stored r_phi over all reachable (state, action).
TheoremReport check_reward_reconstruction(const ToyMDP& mdp, const TokenWeightSpec& spec);

// sigma(phi* + delta) vs the preference probability computed from raw
// rewards, per pair.
TheoremReport check_bt_identity(const ToyMDP& mdp, const TokenWeightSpec& spec_w,
                                const TokenWeightSpec& spec_l,
                                const std::vector<PreferencePair>& pairs);

// Adding a constant inside the sigmoid preserves value order and directional
// derivative signs: n_trials random (phi1, phi2, delta) triples plus
// n_direction_trials random quadratic models.
TheoremReport check_order_preservation(int n_trials, int n_direction_trials, std::uint64_t seed);

// sigma(a) - sigma(b) through a product form whose sign is exact even where
// both sigmoids saturate.
double sigmoid_difference(double a, double b);

void write_theorem_report_json(std::ostream& out, const TheoremReport& report);

// Folds sweep results (one report per instance) into a single report carrying
// the worst witnesses across the whole sweep. Tolerance is taken from the
// first part.
TheoremReport merge_reports(const std::string& theorem, const std::vector<TheoremReport>& parts);

// Random instance builders for sweeps. Rewards land in [-1, 1], guidance in
// [-0.5, 0.5], reference logits in [-1, 1]: comfortably inside the exponent
// guard for the betas used here.
ToyMDP random_toy_mdp(const Vocab& vocab, std::size_t horizon, std::size_t n_prompts, double beta,
                      std::uint64_t seed);
TabularPolicy random_tabular_policy(const Vocab& vocab, const std::vector<ContextKey>& states,
                                    double logit_scale, std::uint64_t seed);
PreferencePair random_pair_in(const ToyMDP& mdp, std::mt19937_64& rng);

}  // namespace tgdpo
