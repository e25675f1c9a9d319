#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "tgdpo/core.hpp"
#include "tgdpo/policy.hpp"
#include "tgdpo/rewards.hpp"

namespace tgdpo {

enum class Method { kDpo, kTgdpo, kSimpo, kRdpo, kD2po, kTdpo };

std::string method_name(Method method);
Method parse_method(const std::string& name);

struct AdamParams {
  double b1 = 0.9;
  double b2 = 0.999;
  double eps = 1e-8;
};

enum class OptimizerKind { kSgd, kAdam };

// Everything one run depends on. Desk-scale defaults: full-batch Adam at
// lr 0.05. Method-specific knobs are ignored by the other methods.
struct TrainConfig {
  Method method = Method::kDpo;
  GuidanceConfig guidance;
  double lr = 0.05;
  std::size_t steps = 300;
  std::optional<std::size_t> batch_size;  // nullopt = full batch
  std::uint64_t seed = 0;
  std::size_t eval_every = 10;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  AdamParams adam;

  double simpo_margin = 0.5;   // target margin on the length-normalized logit
  double rdpo_alpha = 0.01;    // length-difference penalty
  double d2po_gamma = 0.95;    // temporal decay
  double tdpo_kl_scale = 0.01; // sequential-KL penalty

  void validate() const;
};

struct StepRecord {
  std::size_t step = 0;
  double train_loss = 0.0;  // mean batch loss since the previous record
  double eval_loss = 0.0;   // full-dataset loss at this step
  double implicit_reward_accuracy = 0.0;
};

struct RunRecord {
  std::vector<StepRecord> steps;            // step 0, every eval_every, final
  std::vector<double> train_loss_by_step;   // batch loss before each update
  TabularPolicy final_policy;
  TrainConfig config;
  // First step count at which the window-5 mean of train_loss_by_step drops
  // below 0.3; empty if it never does.
  std::optional<std::size_t> steps_to_converge;
};

// Full gradient-descent run of the selected loss. The trained policy starts
// as a copy of ref. theta_hat is the frozen guidance policy and is accepted
// exactly when method == tgdpo. Deterministic: full-batch runs draw no random
// numbers at all, mini-batch order comes from the seed's "shuffle" substream.
RunRecord train(const TrainConfig& config, const PreferenceDataset& dataset,
                const TabularPolicy& ref, const TabularPolicy* theta_hat);

// Stage 1 trains plain DPO at reward_beta and freezes the result; stage 2
// extracts per-token rewards from it and trains the guided loss.
std::pair<RunRecord, RunRecord> run_two_stage_pipeline(const TrainConfig& config,
                                                       const PreferenceDataset& dataset,
                                                       const TabularPolicy& ref);

// Fraction of pairs whose implicit sequence reward beta*log(pi/pi_ref) ranks
// the chosen response first; ties count one half.
double implicit_reward_accuracy(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                                const std::vector<PreferencePair>& pairs);

// CSV of the recorded metrics: header step,train_loss,eval_loss,
// implicit_reward_accuracy, then one row per record. Values are written with
// shortest round-trip formatting so parsing them back is exact.
void export_curves(const RunRecord& record, const std::string& path);

// {"method", "seed", "final_accuracy", "steps_to_converge" (null if never)}.
void write_run_summary_json(std::ostream& out, const RunRecord& record);

}  // namespace tgdpo
