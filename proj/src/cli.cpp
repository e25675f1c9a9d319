#include "tgdpo/cli.hpp"

#include <atomic>
#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "tgdpo/core.hpp"
#include "tgdpo/errors.hpp"
#include "tgdpo/policy.hpp"
#include "tgdpo/rewards.hpp"
#include "tgdpo/rng.hpp"
#include "tgdpo/theory.hpp"
#include "tgdpo/train.hpp"

namespace tgdpo {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::ofstream open_for_writing(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  return out;
}

std::ifstream open_for_reading(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path + " for reading");
  return in;
}

}  // namespace

CliConfig CliConfig::from_file(const std::string& path) {
  std::ifstream in = open_for_reading(path);
  CliConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(stripped.substr(0, eq));
    if (key.empty()) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": empty key");
    }
    cfg.set(key, trim(stripped.substr(eq + 1)));
  }
  return cfg;
}

void CliConfig::set(const std::string& key, std::string value) {
  values_[key] = std::move(value);
}

bool CliConfig::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& CliConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ContractError("config key " + key + " was never registered");
  return it->second;
}

std::size_t CliConfig::get_size(const std::string& key) const {
  return static_cast<std::size_t>(get_u64(key));
}

std::uint64_t CliConfig::get_u64(const std::string& key) const {
  const std::string& raw = get(key);
  std::uint64_t value = 0;
  const auto res = std::from_chars(raw.data(), raw.data() + raw.size(), value);
  if (res.ec != std::errc{} || res.ptr != raw.data() + raw.size()) {
    throw ValidationError(key + " expects an unsigned integer, got '" + raw + "'");
  }
  return value;
}

double CliConfig::get_double(const std::string& key) const {
  const std::string& raw = get(key);
  try {
    std::size_t consumed = 0;
    const double value = std::stod(raw, &consumed);
    if (consumed != raw.size()) throw std::invalid_argument(raw);
    return value;
  } catch (const std::exception&) {
    throw ValidationError(key + " expects a number, got '" + raw + "'");
  }
}

bool CliConfig::get_bool(const std::string& key) const {
  const std::string& raw = get(key);
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0" || raw.empty()) return false;
  throw ValidationError(key + " expects true or false, got '" + raw + "'");
}

void CliConfig::write_snapshot(std::ostream& out) const {
  for (const auto& [key, value] : values_) {
    if (key == "out" || key == "jobs") continue;
    out << key << " = " << value << '\n';
  }
}

namespace {

std::string resolve_out_dir(const CliConfig& cfg, const std::string& command) {
  std::string out = cfg.get("out");
  if (out.empty()) {
    const char* root = std::getenv("TGDPO_LAB_OUT");
    out = root != nullptr ? std::string(root) + "/" + command : command + "-out";
  }
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out + ": " + ec.message());
  return out;
}

void write_snapshot_file(const CliConfig& cfg, const std::string& out_dir) {
  std::ofstream out = open_for_writing(out_dir + "/config.snapshot");
  cfg.write_snapshot(out);
}

Vocab default_vocab(std::size_t n) {
  std::vector<std::string> symbols;
  symbols.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (n <= 26) {
      symbols.push_back(std::string(1, static_cast<char>('a' + i)));
    } else {
      symbols.push_back("t" + std::to_string(i));
    }
  }
  return build_vocab(std::move(symbols));
}

struct LoadedData {
  Vocab vocab;
  PreferenceDataset dataset;
};

LoadedData load_data_dir(const std::string& dir) {
  std::ifstream vin = open_for_reading(dir + "/vocab.json");
  Vocab vocab = read_vocab_json(vin);
  std::ifstream din = open_for_reading(dir + "/pairs.jsonl");
  PreferenceDataset dataset = read_dataset_jsonl(din, vocab);
  return {std::move(vocab), std::move(dataset)};
}

std::optional<std::size_t> parse_context_order(const std::string& raw) {
  if (raw == "full") return std::nullopt;
  std::size_t k = 0;
  const auto res = std::from_chars(raw.data(), raw.data() + raw.size(), k);
  if (res.ec != std::errc{} || res.ptr != raw.data() + raw.size() || k == 0) {
    throw ValidationError("context-order expects a positive integer or 'full', got '" + raw + "'");
  }
  return k;
}

std::vector<std::string> split_list(const std::string& raw) {
  std::vector<std::string> items;
  std::string item;
  std::istringstream in(raw);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

TrainConfig train_config_from(const CliConfig& cfg) {
  TrainConfig tc;
  tc.method = parse_method(cfg.get("method"));
  tc.guidance.beta = cfg.get_double("beta");
  tc.guidance.alpha = cfg.get_double("alpha");
  tc.guidance.reward_beta = cfg.get_double("reward-beta");
  tc.guidance.clamp_floor = cfg.get_double("clamp-floor");
  tc.lr = cfg.get_double("lr");
  tc.steps = cfg.get_size("steps");
  const std::size_t batch = cfg.get_size("batch-size");
  tc.batch_size = batch == 0 ? std::nullopt : std::optional<std::size_t>(batch);
  tc.seed = cfg.get_u64("seed");
  tc.eval_every = cfg.get_size("eval-every");
  const std::string& opt = cfg.get("optimizer");
  if (opt == "adam") {
    tc.optimizer = OptimizerKind::kAdam;
  } else if (opt == "sgd") {
    tc.optimizer = OptimizerKind::kSgd;
  } else {
    throw ValidationError("optimizer expects adam or sgd, got '" + opt + "'");
  }
  if (cfg.has("simpo-margin")) tc.simpo_margin = cfg.get_double("simpo-margin");
  if (cfg.has("rdpo-alpha")) tc.rdpo_alpha = cfg.get_double("rdpo-alpha");
  if (cfg.has("d2po-gamma")) tc.d2po_gamma = cfg.get_double("d2po-gamma");
  if (cfg.has("tdpo-kl-scale")) tc.tdpo_kl_scale = cfg.get_double("tdpo-kl-scale");
  tc.validate();
  return tc;
}

void write_run_outputs(const RunRecord& record, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
  export_curves(record, dir + "/curves.csv");
  {
    std::ofstream out = open_for_writing(dir + "/summary.json");
    write_run_summary_json(out, record);
  }
  {
    std::ofstream out = open_for_writing(dir + "/checkpoint.json");
    write_policy_json(out, record.final_policy);
  }
}

}  // namespace

int cmd_gen_data(const CliConfig& cfg) {
  const Vocab vocab = default_vocab(cfg.get_size("vocab"));
  const PreferenceDataset dataset = generate_synthetic_dataset(
      cfg.get("task"), vocab, cfg.get_size("n"), cfg.get_size("max-len"), cfg.get_u64("seed"));
  const std::string out_dir = resolve_out_dir(cfg, "gen-data");
  {
    std::ofstream out = open_for_writing(out_dir + "/pairs.jsonl");
    write_dataset_jsonl(out, dataset, vocab);
  }
  {
    std::ofstream out = open_for_writing(out_dir + "/vocab.json");
    write_vocab_json(out, vocab);
  }
  write_snapshot_file(cfg, out_dir);
  std::cout << "wrote " << dataset.pairs.size() << " pairs to " << out_dir << '\n';
  return 0;
}

int cmd_train(const CliConfig& cfg) {
  const std::string& data_dir = cfg.get("data");
  if (data_dir.empty()) throw ValidationError("--data is required: a gen-data output directory");
  const LoadedData data = load_data_dir(data_dir);

  const TrainConfig tc = train_config_from(cfg);
  const double train_frac = cfg.get_double("train-frac");
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw ValidationError("train-frac must lie in (0, 1)");
  }
  const auto [train_split, eval_split] = split_dataset(data.dataset, train_frac, tc.seed);
  const TabularPolicy ref(data.vocab, parse_context_order(cfg.get("context-order")));

  const bool two_stage = cfg.get_bool("two-stage");
  const std::string& theta_path = cfg.get("theta-hat");
  if (tc.method == Method::kTgdpo && !two_stage && theta_path.empty()) {
    throw ValidationError("method tgdpo needs --theta-hat <checkpoint> or --two-stage");
  }

  const std::string out_dir = resolve_out_dir(cfg, "train");
  const RunRecord* final_record = nullptr;
  std::pair<RunRecord, RunRecord> staged;
  RunRecord single;
  if (two_stage) {
    if (tc.method != Method::kTgdpo) {
      throw ValidationError("--two-stage only applies to method tgdpo");
    }
    staged = run_two_stage_pipeline(tc, train_split, ref);
    write_run_outputs(staged.first, out_dir + "/stage1");
    write_run_outputs(staged.second, out_dir + "/stage2");
    final_record = &staged.second;
  } else {
    TabularPolicy theta_hat;
    const TabularPolicy* theta_ptr = nullptr;
    if (tc.method == Method::kTgdpo) {
      std::ifstream in = open_for_reading(theta_path);
      theta_hat = read_policy_json(in);
      theta_hat.freeze();
      theta_ptr = &theta_hat;
    }
    single = train(tc, train_split, ref, theta_ptr);
    write_run_outputs(single, out_dir);
    final_record = &single;
  }
  write_snapshot_file(cfg, out_dir);

  std::cout << "final train-split accuracy: "
            << format_double(final_record->steps.back().implicit_reward_accuracy) << '\n';
  if (!eval_split.pairs.empty()) {
    const double heldout = implicit_reward_accuracy(final_record->final_policy, ref,
                                                    tc.guidance.beta, eval_split.pairs);
    std::cout << "held-out accuracy: " << format_double(heldout) << '\n';
  }
  return 0;
}

int cmd_verify(const CliConfig& cfg) {
  const std::uint64_t seed = cfg.get_u64("seed");
  const int trials = static_cast<int>(cfg.get_u64("trials"));
  const int direction_trials = static_cast<int>(cfg.get_u64("direction-trials"));
  const int resolution = static_cast<int>(cfg.get_u64("resolution"));
  const std::string& fault = cfg.get("inject-fault");
  if (!fault.empty() && fault != "decomposition" && fault != "optimal-policy") {
    throw ValidationError("inject-fault expects decomposition or optimal-policy");
  }

  const std::uint64_t vseed = substream_seed(seed, "verify");
  const Vocab vocab2 = build_vocab({"a", "b"});
  const Vocab vocab3 = build_vocab({"a", "b", "c"});
  GuidanceConfig guidance;
  guidance.beta = 0.5;
  guidance.alpha = 0.5;
  const TokenWeightSpec spec_w = guidance.win_spec();
  const TokenWeightSpec spec_l = guidance.lose_spec();

  std::vector<TheoremReport> reports;
  const auto run_check = [&](const std::string& name, auto&& fn) {
    try {
      reports.push_back(fn());
    } catch (const std::exception& e) {
      // Capacity or numeric overruns abort one check, fail the run, and
      // leave the other checks to proceed.
      TheoremReport aborted;
      aborted.theorem = name;
      aborted.passed = false;
      aborted.tolerance = 0.0;
      aborted.witnesses.push_back({std::string("check aborted: ") + e.what(), 0.0, 0.0, 0.0});
      reports.push_back(std::move(aborted));
    }
  };

  run_check("decomposition", [&] {
    std::vector<TheoremReport> parts;
    const double corruption = fault == "decomposition" ? 1e-6 : 0.0;
    for (std::uint64_t i = 0; i < 20; ++i) {
      const ToyMDP mdp = random_toy_mdp(vocab3, 3, 2, 0.1, item_seed(vseed, 100 + i));
      for (std::uint64_t j = 0; j < 5; ++j) {
        const TabularPolicy policy = random_tabular_policy(
            vocab3, reachable_states(mdp), 2.0, item_seed(vseed, 200 + i * 5 + j));
        parts.push_back(check_decomposition(mdp, policy, corruption));
      }
    }
    return merge_reports("decomposition", parts);
  });

  std::vector<ToyMDP> small_mdps;
  for (std::uint64_t i = 0; i < 4; ++i) {
    small_mdps.push_back(random_toy_mdp(vocab2, 3, 2, 0.5, item_seed(vseed, 300 + i)));
  }

  run_check("optimal-policy", [&] {
    std::vector<TheoremReport> parts;
    const double corruption = fault == "optimal-policy" ? 0.05 : 0.0;
    for (const ToyMDP& mdp : small_mdps) {
      parts.push_back(check_optimal_policy(mdp, spec_w, resolution, corruption));
    }
    return merge_reports("optimal-policy", parts);
  });

  run_check("reward-reconstruction", [&] {
    std::vector<TheoremReport> parts;
    for (const ToyMDP& mdp : small_mdps) {
      parts.push_back(check_reward_reconstruction(mdp, spec_w));
    }
    return merge_reports("reward-reconstruction", parts);
  });

  run_check("upper-bound", [&] {
    std::vector<TheoremReport> parts;
    for (std::uint64_t i = 0; i < 10; ++i) {
      const ToyMDP mdp = random_toy_mdp(vocab2, 2, 1, 0.5, item_seed(vseed, 400 + i));
      parts.push_back(check_upper_bound(mdp, 10));
    }
    return merge_reports("upper-bound", parts);
  });

  run_check("bt-identity", [&] {
    std::vector<TheoremReport> parts;
    for (std::uint64_t i = 0; i < 5; ++i) {
      const ToyMDP mdp = random_toy_mdp(vocab2, 3, 2, 0.5, item_seed(vseed, 500 + i));
      std::mt19937_64 pair_rng(item_seed(vseed, 550 + i));
      std::vector<PreferencePair> pairs;
      for (int j = 0; j < 10; ++j) pairs.push_back(random_pair_in(mdp, pair_rng));
      parts.push_back(check_bt_identity(mdp, spec_w, spec_l, pairs));
    }
    return merge_reports("bt-identity", parts);
  });

  run_check("order-preservation",
            [&] { return check_order_preservation(trials, direction_trials, seed); });

  const std::string out_dir = resolve_out_dir(cfg, "verify");
  bool all_passed = true;
  for (const TheoremReport& report : reports) {
    std::ofstream out = open_for_writing(out_dir + "/" + report.theorem + ".json");
    write_theorem_report_json(out, report);
    if (!report.passed) all_passed = false;
    std::cout << (report.passed ? "[ok]   " : "[FAIL] ") << report.theorem << '\n';
  }
  write_snapshot_file(cfg, out_dir);
  return all_passed ? 0 : 4;
}

namespace {

struct CompareRun {
  std::string method;
  std::optional<double> alpha;  // set for tgdpo rows
  std::uint64_t seed = 0;
};

struct CompareResult {
  double final_accuracy = 0.0;
  std::optional<std::size_t> steps_to_converge;
  std::string error;  // non-empty marks a failed run
};

}  // namespace

int cmd_compare(const CliConfig& cfg) {
  const std::vector<std::string> methods = split_list(cfg.get("methods"));
  if (methods.empty()) throw ValidationError("--methods expects a non-empty list, e.g. dpo,tgdpo");
  for (const std::string& m : methods) parse_method(m);  // reject unknown names early

  std::vector<double> alphas;
  for (const std::string& a : split_list(cfg.get("alpha"))) {
    try {
      alphas.push_back(std::stod(a));
    } catch (const std::exception&) {
      throw ValidationError("alpha expects numbers, got '" + a + "'");
    }
  }

  const std::size_t n_seeds = cfg.get_size("seeds");
  if (n_seeds == 0) throw ValidationError("--seeds must be positive");
  const std::uint64_t seed_base = cfg.get_u64("seed");
  const std::size_t jobs = std::max<std::size_t>(1, cfg.get_size("jobs"));

  std::vector<CompareRun> runs;
  for (const std::string& method : methods) {
    if (method == "tgdpo" && !alphas.empty()) {
      for (double a : alphas) {
        for (std::size_t s = 0; s < n_seeds; ++s) runs.push_back({method, a, seed_base + s});
      }
    } else {
      for (std::size_t s = 0; s < n_seeds; ++s) runs.push_back({method, std::nullopt, seed_base + s});
    }
  }

  const Vocab vocab = default_vocab(cfg.get_size("vocab"));
  const PreferenceDataset dataset = generate_synthetic_dataset(
      cfg.get("task"), vocab, cfg.get_size("n"), cfg.get_size("max-len"), seed_base);
  const std::optional<std::size_t> context_order = parse_context_order(cfg.get("context-order"));
  const double train_frac = cfg.get_double("train-frac");
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw ValidationError("compare needs train-frac in (0, 1) for held-out accuracy");
  }

  CliConfig run_cfg = cfg;  // method/alpha/seed overwritten per run
  std::vector<CompareResult> results(runs.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= runs.size()) return;
      try {
        CliConfig local = run_cfg;
        local.set("method", runs[i].method);
        // the sweep key holds a list; the scalar the trainer reads is per run
        local.set("alpha", runs[i].alpha ? format_double(*runs[i].alpha) : "0.5");
        local.set("seed", std::to_string(runs[i].seed));
        const TrainConfig tc = train_config_from(local);
        const auto [train_split, eval_split] = split_dataset(dataset, train_frac, tc.seed);
        const TabularPolicy ref(vocab, context_order);
        RunRecord record;
        if (tc.method == Method::kTgdpo) {
          record = run_two_stage_pipeline(tc, train_split, ref).second;
        } else {
          record = train(tc, train_split, ref, nullptr);
        }
        results[i].final_accuracy = implicit_reward_accuracy(record.final_policy, ref,
                                                             tc.guidance.beta, eval_split.pairs);
        results[i].steps_to_converge = record.steps_to_converge;
      } catch (const std::exception& e) {
        results[i].error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j + 1 < jobs; ++j) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();

  const std::string out_dir = resolve_out_dir(cfg, "compare");
  std::size_t n_failed = 0;
  {
    std::ofstream out = open_for_writing(out_dir + "/comparison.csv");
    out << "method,alpha,seed,final_accuracy,steps_to_converge\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (!results[i].error.empty()) {
        ++n_failed;
        std::cerr << "run " << runs[i].method << " seed " << runs[i].seed
                  << " failed: " << results[i].error << '\n';
        continue;
      }
      out << runs[i].method << ','
          << (runs[i].alpha ? format_double(*runs[i].alpha) : std::string()) << ','
          << runs[i].seed << ',' << format_double(results[i].final_accuracy) << ','
          << (results[i].steps_to_converge ? std::to_string(*results[i].steps_to_converge)
                                           : std::string())
          << '\n';
    }
  }
  {
    nlohmann::json doc;
    doc["runs"] = nlohmann::json::array();
    std::map<std::string, std::vector<std::size_t>> by_row;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      nlohmann::json entry;
      entry["method"] = runs[i].method;
      entry["alpha"] = runs[i].alpha ? nlohmann::json(*runs[i].alpha) : nlohmann::json(nullptr);
      entry["seed"] = runs[i].seed;
      if (results[i].error.empty()) {
        entry["final_accuracy"] = results[i].final_accuracy;
        entry["steps_to_converge"] = results[i].steps_to_converge
                                         ? nlohmann::json(*results[i].steps_to_converge)
                                         : nlohmann::json(nullptr);
        const std::string row_key =
            runs[i].method + (runs[i].alpha ? "@" + format_double(*runs[i].alpha) : "");
        by_row[row_key].push_back(i);
      } else {
        entry["error"] = results[i].error;
      }
      doc["runs"].push_back(std::move(entry));
    }
    doc["methods"] = nlohmann::json::array();
    for (const auto& [row_key, idx] : by_row) {
      double acc_sum = 0.0;
      double conv_sum = 0.0;
      std::size_t n_converged = 0;
      for (std::size_t i : idx) {
        acc_sum += results[i].final_accuracy;
        if (results[i].steps_to_converge) {
          conv_sum += static_cast<double>(*results[i].steps_to_converge);
          ++n_converged;
        }
      }
      nlohmann::json row;
      row["method"] = runs[idx.front()].method;
      row["alpha"] = runs[idx.front()].alpha ? nlohmann::json(*runs[idx.front()].alpha)
                                             : nlohmann::json(nullptr);
      row["n_runs"] = idx.size();
      row["mean_final_accuracy"] = acc_sum / static_cast<double>(idx.size());
      row["n_converged"] = n_converged;
      row["mean_steps_to_converge"] =
          n_converged > 0 ? nlohmann::json(conv_sum / static_cast<double>(n_converged))
                          : nlohmann::json(nullptr);
      doc["methods"].push_back(std::move(row));
    }
    std::ofstream out = open_for_writing(out_dir + "/comparison.json");
    out << doc.dump(2) << '\n';
  }
  write_snapshot_file(cfg, out_dir);
  return n_failed > 0 ? 3 : 0;
}

int cmd_export(const CliConfig& cfg) {
  const std::vector<std::string> run_dirs = split_list(cfg.get("runs"));
  if (run_dirs.empty()) {
    throw ValidationError("--runs expects a non-empty list of train output directories");
  }
  std::vector<std::string> labels = split_list(cfg.get("labels"));
  if (labels.empty()) {
    for (const std::string& dir : run_dirs) {
      labels.push_back(std::filesystem::path(dir).filename().string());
    }
  }
  if (labels.size() != run_dirs.size()) {
    throw ValidationError("--labels must match --runs in length");
  }

  const std::string out_dir = resolve_out_dir(cfg, "export");
  std::ofstream out = open_for_writing(out_dir + "/combined.csv");
  const std::string header = "step,train_loss,eval_loss,implicit_reward_accuracy";
  out << "run," << header << '\n';
  for (std::size_t i = 0; i < run_dirs.size(); ++i) {
    std::ifstream in = open_for_reading(run_dirs[i] + "/curves.csv");
    std::string line;
    if (!std::getline(in, line) || line != header) {
      throw ValidationError(run_dirs[i] + "/curves.csv has an unexpected header");
    }
    while (std::getline(in, line)) {
      if (!line.empty()) out << labels[i] << ',' << line << '\n';
    }
  }
  write_snapshot_file(cfg, out_dir);
  return 0;
}

namespace {

struct KeyDef {
  std::string key;
  std::string def;
  std::string help;
  bool is_flag = false;
  bool hidden = false;
};

struct SubCommand {
  CLI::App* app = nullptr;
  std::vector<KeyDef> keys;
  std::map<std::string, std::string> staging;
  std::map<std::string, CLI::Option*> options;
  std::string config_path;
  int (*handler)(const CliConfig&) = nullptr;
};

void register_keys(SubCommand& sc, std::vector<KeyDef> defs) {
  for (KeyDef& d : defs) {
    CLI::Option* opt;
    if (d.is_flag) {
      opt = sc.app->add_flag("--" + d.key, d.help);
    } else {
      sc.staging[d.key] = d.def;
      opt = sc.app->add_option("--" + d.key, sc.staging[d.key], d.help);
    }
    if (d.hidden) opt->group("");
    sc.options[d.key] = opt;
    sc.keys.push_back(std::move(d));
  }
  sc.app->add_option("--config", sc.config_path,
                     "key = value file with '#' comments; flags override file values");
}

CliConfig resolve_config(const SubCommand& sc) {
  CliConfig cfg;
  for (const KeyDef& d : sc.keys) cfg.set(d.key, d.def);
  if (!sc.config_path.empty()) {
    const CliConfig file = CliConfig::from_file(sc.config_path);
    for (const auto& [key, value] : file.entries()) {
      if (sc.options.count(key) == 0) {
        throw ValidationError(sc.config_path + ": unknown config key " + key);
      }
      cfg.set(key, value);
    }
  }
  for (const KeyDef& d : sc.keys) {
    if (sc.options.at(d.key)->count() > 0) {
      cfg.set(d.key, d.is_flag ? "true" : sc.staging.at(d.key));
    }
  }
  return cfg;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale laboratory for token-reward-guided preference optimization"};
  app.require_subcommand(1);

  std::vector<SubCommand> subs(5);

  subs[0].app = app.add_subcommand("gen-data", "generate a synthetic preference dataset");
  subs[0].handler = cmd_gen_data;
  register_keys(subs[0], {
      {"task", "contains-target", "sorted | contains-target[:sym] | majority-token[:sym]"},
      {"n", "500", "number of preference pairs"},
      {"vocab", "8", "vocab size"},
      {"max-len", "6", "maximum response length"},
      {"seed", "0", "master seed"},
      {"out", "", "output directory (default $TGDPO_LAB_OUT/gen-data)"},
  });

  subs[1].app = app.add_subcommand("train", "train one method on a generated dataset");
  subs[1].handler = cmd_train;
  register_keys(subs[1], {
      {"data", "", "gen-data output directory"},
      {"method", "dpo", "dpo | tgdpo | simpo | rdpo | d2po | tdpo"},
      {"beta", "0.1", "preference temperature"},
      {"alpha", "0.5", "guidance strength (tgdpo)"},
      {"reward-beta", "0.1", "beta of the extracted per-token reward (tgdpo)"},
      {"clamp-floor", "0.001", "positivity floor for guided weights"},
      {"lr", "0.05", "learning rate"},
      {"steps", "300", "optimization steps"},
      {"batch-size", "0", "pairs per step; 0 = full batch"},
      {"seed", "0", "master seed"},
      {"eval-every", "10", "record metrics every this many steps"},
      {"optimizer", "adam", "adam | sgd"},
      {"context-order", "1", "policy context order: positive k or 'full'"},
      {"train-frac", "0.8", "fraction of pairs used for training"},
      {"two-stage", "false", "train DPO first, then guide tgdpo with it", true},
      {"theta-hat", "", "frozen stage-1 checkpoint for tgdpo"},
      {"simpo-margin", "0.5", "simpo target margin"},
      {"rdpo-alpha", "0.01", "rdpo length penalty"},
      {"d2po-gamma", "0.95", "d2po temporal decay"},
      {"tdpo-kl-scale", "0.01", "tdpo sequential-kl scale"},
      {"out", "", "output directory (default $TGDPO_LAB_OUT/train)"},
  });

  subs[2].app = app.add_subcommand("verify", "run the exact theorem checks");
  subs[2].handler = cmd_verify;
  register_keys(subs[2], {
      {"seed", "0", "master seed"},
      {"trials", "10000", "order-preservation value trials"},
      {"direction-trials", "1000", "order-preservation directional trials"},
      {"resolution", "1000", "simplex grid resolution for the optimal-policy check"},
      {"out", "", "output directory (default $TGDPO_LAB_OUT/verify)"},
      {"inject-fault", "", "corrupt a check (negative control)", false, true},
  });

  subs[3].app = app.add_subcommand("compare", "run methods x seeds and tabulate");
  subs[3].handler = cmd_compare;
  register_keys(subs[3], {
      {"methods", "", "comma list, e.g. dpo,tgdpo,simpo"},
      {"alpha", "", "comma list of guidance strengths (expands tgdpo rows)"},
      {"seeds", "5", "number of seeds per method"},
      {"seed", "0", "base seed"},
      {"jobs", "1", "parallel sub-runs"},
      {"task", "contains-target", "synthetic task"},
      {"n", "300", "number of preference pairs"},
      {"vocab", "8", "vocab size"},
      {"max-len", "6", "maximum response length"},
      {"beta", "0.1", "preference temperature"},
      {"reward-beta", "0.1", "beta of the extracted per-token reward"},
      {"clamp-floor", "0.001", "positivity floor for guided weights"},
      {"lr", "0.05", "learning rate"},
      {"steps", "200", "optimization steps per run"},
      {"batch-size", "0", "pairs per step; 0 = full batch"},
      {"eval-every", "10", "record metrics every this many steps"},
      {"optimizer", "adam", "adam | sgd"},
      {"context-order", "1", "policy context order: positive k or 'full'"},
      {"train-frac", "0.8", "fraction of pairs used for training"},
      {"simpo-margin", "0.5", "simpo target margin"},
      {"rdpo-alpha", "0.01", "rdpo length penalty"},
      {"d2po-gamma", "0.95", "d2po temporal decay"},
      {"tdpo-kl-scale", "0.01", "tdpo sequential-kl scale"},
      {"out", "", "output directory (default $TGDPO_LAB_OUT/compare)"},
  });

  subs[4].app = app.add_subcommand("export", "merge run curves into one plot-ready CSV");
  subs[4].handler = cmd_export;
  register_keys(subs[4], {
      {"runs", "", "comma list of train output directories"},
      {"labels", "", "comma list of row labels (default: directory names)"},
      {"out", "", "output directory (default $TGDPO_LAB_OUT/export)"},
  });

  std::vector<const char*> argv;
  argv.push_back("tgdpo_lab");
  for (const std::string& a : args) argv.push_back(a.c_str());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    for (const SubCommand& sc : subs) {
      if (sc.app->parsed()) return sc.handler(resolve_config(sc));
    }
    throw ContractError("no subcommand dispatched");
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace tgdpo
