#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace tgdpo {

// Fully resolved key-value configuration for one command: defaults, then
// config-file values, then flag overrides. Commands read everything through
// this map, so serializing it captures the whole run.
class CliConfig {
public:
  static CliConfig from_file(const std::string& path);

  void set(const std::string& key, std::string value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;

  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  const std::map<std::string, std::string>& entries() const { return values_; }

  // `key = value` lines in sorted key order, skipping output plumbing (out,
  // jobs) so re-runs into a different directory produce identical snapshots.
  void write_snapshot(std::ostream& out) const;

private:
  std::map<std::string, std::string> values_;
};

// Command entry points; each takes its resolved config and returns an exit
// code or throws (run_cli maps exceptions to codes).
int cmd_gen_data(const CliConfig& cfg);
int cmd_train(const CliConfig& cfg);
int cmd_verify(const CliConfig& cfg);
int cmd_compare(const CliConfig& cfg);
int cmd_export(const CliConfig& cfg);

// Full parse and dispatch for `args` (without the program name). Exit codes:
// 0 success, 2 usage or validation, 3 runtime failure, 4 verification
// failure.
int run_cli(const std::vector<std::string>& args);

}  // namespace tgdpo
