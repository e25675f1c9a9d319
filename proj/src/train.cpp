#include "tgdpo/train.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include <json.hpp>

#include "tgdpo/errors.hpp"
#include "tgdpo/losses.hpp"
#include "tgdpo/rng.hpp"

namespace tgdpo {

std::string method_name(Method method) {
  switch (method) {
    case Method::kDpo: return "dpo";
    case Method::kTgdpo: return "tgdpo";
    case Method::kSimpo: return "simpo";
    case Method::kRdpo: return "rdpo";
    case Method::kD2po: return "d2po";
    case Method::kTdpo: return "tdpo";
  }
  throw ContractError("unhandled method enumerator");
}

Method parse_method(const std::string& name) {
  if (name == "dpo") return Method::kDpo;
  if (name == "tgdpo") return Method::kTgdpo;
  if (name == "simpo") return Method::kSimpo;
  if (name == "rdpo") return Method::kRdpo;
  if (name == "d2po") return Method::kD2po;
  if (name == "tdpo") return Method::kTdpo;
  throw ValidationError("unknown method " + name +
                        "; expected one of dpo, tgdpo, simpo, rdpo, d2po, tdpo");
}

void TrainConfig::validate() const {
  guidance.validate();
  if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
  if (eval_every == 0) throw ValidationError("eval_every must be positive");
  if (batch_size && *batch_size == 0) throw ValidationError("batch size must be positive");
  if (!(adam.b1 > 0.0 && adam.b1 < 1.0) || !(adam.b2 > 0.0 && adam.b2 < 1.0)) {
    throw ValidationError("adam decay rates must lie in (0, 1)");
  }
  if (!(adam.eps > 0.0)) throw ValidationError("adam epsilon must be positive");
  if (simpo_margin < 0.0) throw ValidationError("simpo margin must be non-negative");
  if (rdpo_alpha < 0.0) throw ValidationError("rdpo length penalty must be non-negative");
  if (!(d2po_gamma > 0.0 && d2po_gamma <= 1.0)) {
    throw ValidationError("d2po decay must lie in (0, 1]");
  }
  if (tdpo_kl_scale < 0.0) throw ValidationError("tdpo kl scale must be non-negative");
}

namespace {

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

struct BatchEval {
  double loss = 0.0;
  std::map<ContextKey, Eigen::VectorXd> grad;
};

}  // namespace

RunRecord train(const TrainConfig& config, const PreferenceDataset& dataset,
                const TabularPolicy& ref, const TabularPolicy* theta_hat) {
  config.validate();
  if (dataset.pairs.empty()) throw ValidationError("training needs a non-empty dataset");
  if (config.method == Method::kTgdpo) {
    if (theta_hat == nullptr) {
      throw ValidationError(
          "method tgdpo needs a frozen guidance policy; train one or use the two-stage pipeline");
    }
    if (!theta_hat->frozen()) throw ValidationError("the guidance policy must be frozen");
  } else if (theta_hat != nullptr) {
    throw ValidationError("a guidance policy is only meaningful for method tgdpo");
  }
  for (const auto& pair : dataset.pairs) {
    for (const TokenSeq* seq : {&pair.prompt, &pair.chosen, &pair.rejected}) {
      for (TokenId tok : *seq) {
        if (tok >= ref.vocab().size()) {
          throw ValidationError("dataset token outside the policy vocab");
        }
      }
    }
  }

  TabularPolicy policy = ref.unfrozen_clone();

  std::vector<TokenRewardTrace> traces_w, traces_l;
  if (config.method == Method::kTgdpo) {
    traces_w.reserve(dataset.pairs.size());
    traces_l.reserve(dataset.pairs.size());
    for (const auto& pair : dataset.pairs) {
      traces_w.push_back(dpo_token_rewards(*theta_hat, ref, config.guidance.reward_beta,
                                           pair.prompt, pair.chosen));
      traces_l.push_back(dpo_token_rewards(*theta_hat, ref, config.guidance.reward_beta,
                                           pair.prompt, pair.rejected));
    }
  }

  const TokenWeightSpec spec_w = config.guidance.win_spec();
  const TokenWeightSpec spec_l = config.guidance.lose_spec();
  const auto pair_loss = [&](std::size_t i) -> LossValue {
    const PreferencePair& pair = dataset.pairs[i];
    switch (config.method) {
      case Method::kDpo:
        return dpo_loss(policy, ref, config.guidance.beta, pair);
      case Method::kTgdpo:
        return tgdpo_loss(policy, ref, spec_w, spec_l, config.guidance.beta, pair, &traces_w[i],
                          &traces_l[i], 0.0);
      case Method::kSimpo:
        return simpo_loss(policy, config.guidance.beta, config.simpo_margin, pair);
      case Method::kRdpo:
        return rdpo_loss(policy, ref, config.guidance.beta, config.rdpo_alpha, pair);
      case Method::kD2po:
        return d2po_loss(policy, ref, config.guidance.beta, config.d2po_gamma, pair);
      case Method::kTdpo:
        return tdpo_loss(policy, ref, config.guidance.beta, config.tdpo_kl_scale, pair);
    }
    throw ContractError("unhandled method enumerator");
  };

  const auto eval_batch = [&](const std::vector<std::size_t>& idx) {
    BatchEval out;
    for (std::size_t i : idx) {
      LossValue lv = pair_loss(i);
      out.loss += lv.loss;
      for (auto& [key, g] : lv.grad) {
        const auto it = out.grad.find(key);
        if (it == out.grad.end()) {
          out.grad.emplace(key, std::move(g));
        } else {
          it->second += g;
        }
      }
    }
    const double inv = 1.0 / static_cast<double>(idx.size());
    out.loss *= inv;
    for (auto& [key, g] : out.grad) g *= inv;
    return out;
  };

  const auto dataset_loss = [&]() {
    double total = 0.0;
    for (std::size_t i = 0; i < dataset.pairs.size(); ++i) total += pair_loss(i).loss;
    return total / static_cast<double>(dataset.pairs.size());
  };

  // Optimizer state lives per context row, created on first touch.
  std::map<ContextKey, Eigen::VectorXd> adam_m, adam_v;
  std::size_t adam_t = 0;
  const auto apply_update = [&](const std::map<ContextKey, Eigen::VectorXd>& grad) {
    if (config.optimizer == OptimizerKind::kSgd) {
      for (const auto& [key, g] : grad) policy.add_to_logits(key, -config.lr * g);
      return;
    }
    ++adam_t;
    const double bc1 = 1.0 - std::pow(config.adam.b1, static_cast<double>(adam_t));
    const double bc2 = 1.0 - std::pow(config.adam.b2, static_cast<double>(adam_t));
    for (const auto& [key, g] : grad) {
      auto& m = adam_m.try_emplace(key, Eigen::VectorXd::Zero(g.size())).first->second;
      auto& v = adam_v.try_emplace(key, Eigen::VectorXd::Zero(g.size())).first->second;
      m = config.adam.b1 * m + (1.0 - config.adam.b1) * g;
      v = config.adam.b2 * v + (1.0 - config.adam.b2) * g.cwiseProduct(g).eval();
      const Eigen::VectorXd step =
          (m / bc1).array() / ((v / bc2).array().sqrt() + config.adam.eps);
      policy.add_to_logits(key, -config.lr * step);
    }
  };

  std::vector<std::size_t> all(dataset.pairs.size());
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 shuffle_rng(substream_seed(config.seed, "shuffle"));
  std::vector<std::size_t> epoch_order;
  std::size_t cursor = 0;
  const auto next_batch = [&]() -> std::vector<std::size_t> {
    if (!config.batch_size) return all;
    if (cursor >= epoch_order.size()) {
      epoch_order = all;
      shuffle(epoch_order, shuffle_rng);
      cursor = 0;
    }
    std::vector<std::size_t> batch;
    while (cursor < epoch_order.size() && batch.size() < *config.batch_size) {
      batch.push_back(epoch_order[cursor++]);
    }
    return batch;
  };

  RunRecord record;
  record.config = config;

  double window_sum = 0.0;
  std::size_t window_count = 0;
  const auto record_eval = [&](std::size_t step) {
    const double eval_loss = dataset_loss();
    if (!std::isfinite(eval_loss)) {
      throw TrainingError("non-finite evaluation loss", static_cast<int>(step));
    }
    const double acc = implicit_reward_accuracy(policy, ref, config.guidance.beta, dataset.pairs);
    const double train_loss = window_count > 0 ? window_sum / static_cast<double>(window_count)
                                               : eval_loss;
    record.steps.push_back({step, train_loss, eval_loss, acc});
    window_sum = 0.0;
    window_count = 0;
  };

  record_eval(0);
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const std::vector<std::size_t> batch = next_batch();
    const BatchEval be = eval_batch(batch);
    if (!std::isfinite(be.loss)) {
      throw TrainingError("non-finite training loss", static_cast<int>(step));
    }
    record.train_loss_by_step.push_back(be.loss);
    window_sum += be.loss;
    ++window_count;
    apply_update(be.grad);
    if (step % config.eval_every == 0 || step == config.steps) record_eval(step);
  }

  for (std::size_t i = 4; i < record.train_loss_by_step.size(); ++i) {
    double mean5 = 0.0;
    for (std::size_t j = i - 4; j <= i; ++j) mean5 += record.train_loss_by_step[j];
    mean5 /= 5.0;
    if (mean5 < 0.3) {
      record.steps_to_converge = i + 1;
      break;
    }
  }

  record.final_policy = std::move(policy);
  return record;
}

std::pair<RunRecord, RunRecord> run_two_stage_pipeline(const TrainConfig& config,
                                                       const PreferenceDataset& dataset,
                                                       const TabularPolicy& ref) {
  if (config.method != Method::kTgdpo) {
    throw ValidationError("the two-stage pipeline trains tgdpo; got method " +
                          method_name(config.method));
  }
  TrainConfig stage1_config = config;
  stage1_config.method = Method::kDpo;
  stage1_config.guidance.beta = config.guidance.reward_beta;

  RunRecord stage1 = train(stage1_config, dataset, ref, nullptr);
  TabularPolicy theta_hat = stage1.final_policy;
  theta_hat.freeze();
  RunRecord stage2 = train(config, dataset, ref, &theta_hat);
  return {std::move(stage1), std::move(stage2)};
}

double implicit_reward_accuracy(const TabularPolicy& policy, const TabularPolicy& ref, double beta,
                                const std::vector<PreferencePair>& pairs) {
  if (pairs.empty()) throw ValidationError("accuracy needs a non-empty evaluation set");
  if (!(beta > 0.0)) throw ValidationError("beta must be positive");
  double total = 0.0;
  for (const auto& pair : pairs) {
    const double win = beta * (sequence_log_prob(policy, pair.prompt, pair.chosen) -
                               sequence_log_prob(ref, pair.prompt, pair.chosen));
    const double lose = beta * (sequence_log_prob(policy, pair.prompt, pair.rejected) -
                                sequence_log_prob(ref, pair.prompt, pair.rejected));
    if (win > lose) {
      total += 1.0;
    } else if (win == lose) {
      total += 0.5;
    }
  }
  return total / static_cast<double>(pairs.size());
}

void export_curves(const RunRecord& record, const std::string& path) {
  if (record.steps.empty()) throw ValidationError("run record has no recorded steps");
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << "step,train_loss,eval_loss,implicit_reward_accuracy\n";
  for (const auto& s : record.steps) {
    out << s.step << ',' << format_double(s.train_loss) << ',' << format_double(s.eval_loss) << ','
        << format_double(s.implicit_reward_accuracy) << '\n';
  }
  out.flush();
  if (!out) throw IoError("failed while writing " + path);
}

void write_run_summary_json(std::ostream& out, const RunRecord& record) {
  if (record.steps.empty()) throw ValidationError("run record has no recorded steps");
  nlohmann::json obj;
  obj["method"] = method_name(record.config.method);
  obj["seed"] = record.config.seed;
  obj["final_accuracy"] = record.steps.back().implicit_reward_accuracy;
  if (record.steps_to_converge) {
    obj["steps_to_converge"] = *record.steps_to_converge;
  } else {
    obj["steps_to_converge"] = nullptr;
  }
  out << obj.dump(2) << '\n';
}

}  // namespace tgdpo
