#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "tgdpo/core.hpp"
#include "tgdpo/errors.hpp"
#include "tgdpo/policy.hpp"
#include "tgdpo/rewards.hpp"
#include "tgdpo/train.hpp"

using namespace tgdpo;

namespace {

Vocab letters(std::size_t n) {
  std::vector<std::string> symbols;
  for (std::size_t i = 0; i < n; ++i) symbols.emplace_back(1, static_cast<char>('a' + i));
  return build_vocab(symbols);
}

TokenRewardTrace trace_of(std::vector<double> values) {
  TokenRewardTrace trace;
  trace.values = std::move(values);
  trace.source_beta = 0.1;
  return trace;
}

}  // namespace

TEST_CASE("identical policies induce an all-zero trace") {
  const Vocab v = letters(3);
  TabularPolicy theta_hat(v);
  theta_hat.freeze();
  const TabularPolicy ref(v);
  const TokenRewardTrace trace = dpo_token_rewards(theta_hat, ref, 0.1, {0}, {1, 2, 0});
  REQUIRE(trace.values.size() == 3);
  for (double r : trace.values) CHECK(r == 0.0);
  CHECK(trace.source_beta == 0.1);
}

TEST_CASE("a doubled probability earns 0.1 ln 2") {
  const Vocab v = letters(4);
  TabularPolicy theta_hat(v);
  const ContextKey state{{0}};
  Eigen::VectorXd logits = Eigen::VectorXd::Zero(4);
  logits[1] = std::log(3.0); // softmax gives 3/6 = 0.5 against the uniform 0.25
  theta_hat.set_logits(state, logits);
  theta_hat.freeze();
  const TabularPolicy ref(v);
  const TokenRewardTrace trace = dpo_token_rewards(theta_hat, ref, 0.1, {0}, {1});
  REQUIRE(trace.values.size() == 1);
  CHECK(trace.values[0] == doctest::Approx(0.1 * std::log(2.0)).epsilon(1e-9));
  CHECK(trace.values[0] == doctest::Approx(0.069315).epsilon(1e-4));
}

TEST_CASE("reward extraction demands a frozen source and a shared vocab") {
  const Vocab v = letters(2);
  TabularPolicy thawed(v);
  const TabularPolicy ref(v);
  CHECK_THROWS_AS(dpo_token_rewards(thawed, ref, 0.1, {0}, {1}), ValidationError);

  TabularPolicy other(letters(3));
  other.freeze();
  CHECK_THROWS_AS(dpo_token_rewards(other, ref, 0.1, {0}, {1}), ValidationError);
}

TEST_CASE("trace sum equals the scaled sequence log-ratio") {
  const Vocab v = letters(3);
  TabularPolicy theta_hat(v);
  Eigen::VectorXd logits(3);
  logits << 0.7, -0.4, 0.1;
  theta_hat.set_logits(ContextKey{{2}}, logits);
  logits << -1.2, 0.3, 0.9;
  theta_hat.set_logits(ContextKey{{2, 1}}, logits);
  theta_hat.freeze();
  const TabularPolicy ref(v);
  const TokenSeq prompt = {2};
  const TokenSeq response = {1, 0, 2};
  const TokenRewardTrace trace = dpo_token_rewards(theta_hat, ref, 0.1, prompt, response);
  double sum = 0.0;
  for (double r : trace.values) sum += r;
  const double expected = 0.1 * (sequence_log_prob(theta_hat, prompt, response) -
                                 sequence_log_prob(ref, prompt, response));
  CHECK(std::abs(sum - expected) < 1e-12);
}

TEST_CASE("rewards are causal in the response prefix") {
  const Vocab v = letters(3);
  TabularPolicy theta_hat(v);
  Eigen::VectorXd logits(3);
  logits << 0.5, -0.5, 1.5;
  theta_hat.set_logits(ContextKey{{0}}, logits);
  theta_hat.set_logits(ContextKey{{0, 1}}, 2.0 * logits);
  theta_hat.freeze();
  const TabularPolicy ref(v);
  const TokenSeq prompt = {0};
  const TokenRewardTrace a = dpo_token_rewards(theta_hat, ref, 0.1, prompt, {1, 2, 0});
  const TokenRewardTrace b = dpo_token_rewards(theta_hat, ref, 0.1, prompt, {1, 2, 2});
  const TokenRewardTrace c = dpo_token_rewards(theta_hat, ref, 0.1, prompt, {1, 0, 0});
  // Editing position 2 leaves values[0..1] bit-identical; editing position 1
  // leaves values[0] alone.
  CHECK(a.values[0] == b.values[0]);
  CHECK(a.values[1] == b.values[1]);
  CHECK(a.values[0] == c.values[0]);
}

TEST_CASE("weight shapes match their closed forms") {
  CHECK(weight(TokenWeightSpec::TgdpoAffine(0.5, 1e-3, WeightSide::kWin), 0.0, 0, 1) == 1.0);
  CHECK(weight(TokenWeightSpec::TgdpoAffine(0.2, 1e-3, WeightSide::kWin), 1.0, 0, 1) ==
        doctest::Approx(1.2).epsilon(1e-12));
  CHECK(weight(TokenWeightSpec::TgdpoAffine(0.2, 1e-3, WeightSide::kLose), 1.0, 0, 1) ==
        doctest::Approx(0.8).epsilon(1e-12));
  CHECK(weight(TokenWeightSpec::Constant(2.5, WeightSide::kWin), -7.0, 3, 9) == 2.5);
  CHECK(weight(TokenWeightSpec::LengthNormalized(WeightSide::kWin), 0.0, 0, 4) == 0.25);
  CHECK(weight(TokenWeightSpec::TemporalDecay(0.9, WeightSide::kLose), 0.0, 2, 5) ==
        doctest::Approx(0.81).epsilon(1e-12));
}

TEST_CASE("the clamp floor rescues nonpositive affine weights") {
  const TokenWeightSpec spec = TokenWeightSpec::TgdpoAffine(0.5, 1e-3, WeightSide::kWin);
  CHECK(raw_weight(spec, -3.0, 0, 1) == doctest::Approx(-0.5).epsilon(1e-12));
  CHECK(weight(spec, -3.0, 0, 1) == 1e-3);
  // The lose side clamps on large positive rewards instead.
  const TokenWeightSpec lose = TokenWeightSpec::TgdpoAffine(0.5, 1e-3, WeightSide::kLose);
  CHECK(weight(lose, 3.0, 0, 1) == 1e-3);
}

TEST_CASE("every weight stays at or above its floor") {
  const std::vector<TokenWeightSpec> specs = {
      TokenWeightSpec::Constant(1.0, WeightSide::kWin),
      TokenWeightSpec::TgdpoAffine(2.0, 1e-3, WeightSide::kWin),
      TokenWeightSpec::TgdpoAffine(2.0, 1e-3, WeightSide::kLose),
      TokenWeightSpec::LengthNormalized(WeightSide::kWin),
      TokenWeightSpec::TemporalDecay(0.5, WeightSide::kWin),
  };
  for (const TokenWeightSpec& spec : specs) {
    for (double r : {-20.0, -1.0, 0.0, 1.0, 20.0}) {
      for (std::size_t t = 0; t < 6; ++t) {
        CHECK(weight(spec, r, t, 6) > 0.0);
      }
    }
  }
}

TEST_CASE("weight spec constructors reject bad shapes") {
  CHECK_THROWS_AS(TokenWeightSpec::Constant(0.0, WeightSide::kWin), ValidationError);
  CHECK_THROWS_AS(TokenWeightSpec::Constant(-1.0, WeightSide::kWin), ValidationError);
  CHECK_THROWS_AS(TokenWeightSpec::TgdpoAffine(-0.1, 1e-3, WeightSide::kWin), ValidationError);
  CHECK_THROWS_AS(TokenWeightSpec::TgdpoAffine(0.5, 0.0, WeightSide::kWin), ValidationError);
  CHECK_THROWS_AS(TokenWeightSpec::TemporalDecay(0.0, WeightSide::kWin), ValidationError);
  CHECK_THROWS_AS(TokenWeightSpec::TemporalDecay(1.5, WeightSide::kWin), ValidationError);
  CHECK_NOTHROW(TokenWeightSpec::TemporalDecay(1.0, WeightSide::kWin));
  // Alpha zero is the DPO degeneration and must stay constructible.
  CHECK_NOTHROW(TokenWeightSpec::TgdpoAffine(0.0, 1e-3, WeightSide::kWin));
}

TEST_CASE("positivity report: alpha zero never clamps") {
  const TokenWeightSpec spec = TokenWeightSpec::TgdpoAffine(0.0, 1e-3, WeightSide::kWin);
  const std::vector<TokenRewardTrace> traces = {trace_of({-50.0, 3.0}), trace_of({-100.0})};
  const PositivityReport report = validate_positivity(spec, traces);
  CHECK(report.n_clamped == 0);
  CHECK(report.min_raw == 1.0);
}

TEST_CASE("positivity report: zero traces give min_raw one") {
  const TokenWeightSpec spec = TokenWeightSpec::TgdpoAffine(0.5, 1e-3, WeightSide::kWin);
  const std::vector<TokenRewardTrace> traces = {trace_of({0.0, 0.0, 0.0})};
  const PositivityReport report = validate_positivity(spec, traces);
  CHECK(report.n_clamped == 0);
  CHECK(report.min_raw == 1.0);
}

TEST_CASE("positivity report: a deep negative reward is counted and measured") {
  const TokenWeightSpec spec = TokenWeightSpec::TgdpoAffine(0.5, 1e-3, WeightSide::kWin);
  const std::vector<TokenRewardTrace> traces = {trace_of({-10.0, 0.5})};
  const PositivityReport report = validate_positivity(spec, traces);
  CHECK(report.n_clamped >= 1);
  CHECK(report.min_raw == doctest::Approx(-4.0).epsilon(1e-12));
}

TEST_CASE("guidance config validates its fields") {
  GuidanceConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.alpha = 0.0; // allowed: degenerates to DPO
  CHECK_NOTHROW(cfg.validate());
  cfg.alpha = -0.5;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = GuidanceConfig{};
  cfg.beta = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = GuidanceConfig{};
  cfg.reward_beta = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = GuidanceConfig{};
  cfg.clamp_floor = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);

  const GuidanceConfig defaults;
  CHECK(weight(defaults.win_spec(), 0.4, 0, 1) == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(weight(defaults.lose_spec(), 0.4, 0, 1) == doctest::Approx(0.8).epsilon(1e-12));
}

TEST_CASE("stage-1 rewards rank target tokens above rejected tokens") {
  const Vocab v = letters(6);
  const PreferenceDataset ds = generate_synthetic_dataset("contains-target", v, 200, 5, 1);
  TabularPolicy ref(v, 1);
  ref.freeze();

  TrainConfig cfg;
  cfg.method = Method::kDpo;
  cfg.lr = 0.1;
  cfg.steps = 150;
  cfg.seed = 1;
  const RunRecord record = train(cfg, ds, ref, nullptr);
  TabularPolicy theta_hat = record.final_policy;
  theta_hat.freeze();

  const TokenId target = v.id("f"); // default designated token: last symbol
  double target_sum = 0.0, rejected_sum = 0.0;
  std::size_t target_n = 0, rejected_n = 0;
  for (const PreferencePair& pair : ds.pairs) {
    const TokenRewardTrace win =
        dpo_token_rewards(theta_hat, ref, cfg.guidance.reward_beta, pair.prompt, pair.chosen);
    for (std::size_t t = 0; t < pair.chosen.size(); ++t) {
      if (pair.chosen[t] == target) {
        target_sum += win.values[t];
        ++target_n;
      }
    }
    const TokenRewardTrace lose =
        dpo_token_rewards(theta_hat, ref, cfg.guidance.reward_beta, pair.prompt, pair.rejected);
    for (double r : lose.values) rejected_sum += r;
    rejected_n += lose.values.size();
  }
  REQUIRE(target_n > 0);
  REQUIRE(rejected_n > 0);
  CHECK(target_sum / static_cast<double>(target_n) >
        rejected_sum / static_cast<double>(rejected_n));
}

TEST_CASE("trace export writes one JSON line per side in pair order") {
  const std::vector<TokenRewardTrace> wins = {trace_of({0.25, -0.5}), trace_of({1.0})};
  const std::vector<TokenRewardTrace> loses = {trace_of({-0.125}), trace_of({0.0, 2.0})};
  std::ostringstream out;
  write_reward_traces_jsonl(out, wins, loses);
  std::istringstream in(out.str());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == R"({"pair_index":0,"rewards":[0.25,-0.5],"side":"w"})");
  CHECK(lines[1] == R"({"pair_index":0,"rewards":[-0.125],"side":"l"})");
  CHECK(lines[2] == R"({"pair_index":1,"rewards":[1.0],"side":"w"})");
  CHECK(lines[3] == R"({"pair_index":1,"rewards":[0.0,2.0],"side":"l"})");

  std::ostringstream unused;
  CHECK_THROWS_AS(write_reward_traces_jsonl(unused, wins, {trace_of({0.0})}), ValidationError);
}
