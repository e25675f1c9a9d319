#include "tgdpo/core.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include <json.hpp>

#include "tgdpo/errors.hpp"
#include "tgdpo/rng.hpp"

namespace tgdpo {

Vocab::Vocab(std::vector<std::string> symbols) : symbols_(std::move(symbols)) {
  if (symbols_.empty()) {
    throw ValidationError("vocab requires at least one symbol");
  }
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    auto [it, inserted] = index_.emplace(symbols_[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw ValidationError("duplicate symbol " + symbols_[i]);
    }
  }
}

const std::string& Vocab::symbol(TokenId id) const {
  if (id >= symbols_.size()) {
    throw ValidationError("token id " + std::to_string(id) + " out of range for vocab of size " +
                          std::to_string(symbols_.size()));
  }
  return symbols_[id];
}

TokenId Vocab::id(std::string_view symbol) const {
  auto it = index_.find(symbol);
  if (it == index_.end()) {
    throw ValidationError("unknown symbol " + std::string(symbol));
  }
  return it->second;
}

bool Vocab::contains(std::string_view symbol) const {
  return index_.find(symbol) != index_.end();
}

Vocab build_vocab(std::vector<std::string> symbols) { return Vocab(std::move(symbols)); }

namespace {

enum class TaskKind { kSorted, kContainsTarget, kMajorityToken };

struct TaskSpec {
  TaskKind kind;
  TokenId designated = 0;  // target / majority token where applicable
};

std::string valid_tasks_message() {
  std::string msg = "valid tasks:";
  for (const auto& name : task_names()) msg += " " + name;
  return msg;
}

TaskSpec parse_task(const std::string& task, const Vocab& vocab) {
  std::string base = task;
  std::string suffix;
  if (auto pos = task.find(':'); pos != std::string::npos) {
    base = task.substr(0, pos);
    suffix = task.substr(pos + 1);
  }
  TaskSpec spec;
  if (base == "sorted") {
    if (!suffix.empty()) {
      throw ValidationError("task 'sorted' takes no designated symbol");
    }
    spec.kind = TaskKind::kSorted;
    return spec;
  }
  if (base == "contains-target") {
    spec.kind = TaskKind::kContainsTarget;
    const std::string symbol = suffix.empty() ? vocab.symbols().back() : suffix;
    if (!vocab.contains(symbol)) {
      throw ValidationError("target symbol " + symbol + " not in vocab");
    }
    spec.designated = vocab.id(symbol);
    return spec;
  }
  if (base == "majority-token") {
    spec.kind = TaskKind::kMajorityToken;
    const std::string symbol = suffix.empty() ? vocab.symbols().front() : suffix;
    if (!vocab.contains(symbol)) {
      throw ValidationError("majority symbol " + symbol + " not in vocab");
    }
    spec.designated = vocab.id(symbol);
    return spec;
  }
  throw ValidationError("unknown task " + task + "; " + valid_tasks_message());
}

bool satisfies(const TaskSpec& spec, const TokenSeq& seq) {
  switch (spec.kind) {
    case TaskKind::kSorted:
      return std::is_sorted(seq.begin(), seq.end());
    case TaskKind::kContainsTarget:
      return std::find(seq.begin(), seq.end(), spec.designated) != seq.end();
    case TaskKind::kMajorityToken: {
      const auto count = std::count(seq.begin(), seq.end(), spec.designated);
      return 2 * static_cast<std::size_t>(count) > seq.size();
    }
  }
  return false;
}

TokenSeq random_tokens(std::mt19937_64& rng, std::size_t len, std::size_t vocab_size) {
  TokenSeq seq(len);
  for (auto& t : seq) t = static_cast<TokenId>(rand_below(rng, vocab_size));
  return seq;
}

TokenSeq make_chosen(const TaskSpec& spec, std::mt19937_64& rng, std::size_t max_len,
                     std::size_t vocab_size) {
  // "sorted" needs length >= 2 to leave room for a violating counterpart.
  const std::size_t min_len = spec.kind == TaskKind::kSorted ? std::min<std::size_t>(2, max_len) : 1;
  const std::size_t len = min_len + rand_below(rng, max_len - min_len + 1);
  TokenSeq seq = random_tokens(rng, len, vocab_size);
  switch (spec.kind) {
    case TaskKind::kSorted:
      std::sort(seq.begin(), seq.end());
      break;
    case TaskKind::kContainsTarget:
      seq[rand_below(rng, len)] = spec.designated;
      break;
    case TaskKind::kMajorityToken: {
      const std::size_t need = len / 2 + 1;
      const std::size_t count = need + rand_below(rng, len - need + 1);
      std::vector<std::size_t> positions(len);
      for (std::size_t i = 0; i < len; ++i) positions[i] = i;
      shuffle(positions, rng);
      for (std::size_t i = 0; i < count; ++i) seq[positions[i]] = spec.designated;
      break;
    }
  }
  return seq;
}

// One random edit; may change the length.
void random_edit(TokenSeq& seq, std::mt19937_64& rng, std::size_t max_len,
                 std::size_t vocab_size) {
  const std::uint64_t choice = rand_below(rng, 4);
  if (choice == 0 || seq.size() == 1) {
    seq[rand_below(rng, seq.size())] = static_cast<TokenId>(rand_below(rng, vocab_size));
  } else if (choice == 1 && seq.size() >= 2) {
    const std::size_t i = rand_below(rng, seq.size() - 1);
    std::swap(seq[i], seq[i + 1]);
  } else if (choice == 2 && seq.size() >= 2) {
    seq.erase(seq.begin() + static_cast<std::ptrdiff_t>(rand_below(rng, seq.size())));
  } else if (seq.size() < max_len) {
    const std::size_t i = rand_below(rng, seq.size() + 1);
    seq.insert(seq.begin() + static_cast<std::ptrdiff_t>(i),
               static_cast<TokenId>(rand_below(rng, vocab_size)));
  }
}

// Guaranteed predicate violation when random edits fail to produce one.
TokenSeq force_violation(const TaskSpec& spec, const TokenSeq& chosen, std::mt19937_64& rng,
                         std::size_t vocab_size) {
  TokenSeq seq = chosen;
  switch (spec.kind) {
    case TaskKind::kSorted: {
      if (seq.size() < 2) seq.push_back(seq.front());
      // Put a strict descent at the front.
      seq[0] = static_cast<TokenId>(vocab_size - 1);
      seq[1] = 0;
      break;
    }
    case TaskKind::kContainsTarget: {
      for (auto& t : seq) {
        while (t == spec.designated) {
          t = static_cast<TokenId>(rand_below(rng, vocab_size));
        }
      }
      break;
    }
    case TaskKind::kMajorityToken: {
      for (auto& t : seq) {
        if (2 * static_cast<std::size_t>(std::count(seq.begin(), seq.end(), spec.designated)) <=
            seq.size()) {
          break;
        }
        if (t == spec.designated) {
          while (t == spec.designated) {
            t = static_cast<TokenId>(rand_below(rng, vocab_size));
          }
        }
      }
      break;
    }
  }
  return seq;
}

TokenSeq make_rejected(const TaskSpec& spec, const TokenSeq& chosen, std::mt19937_64& rng,
                       std::size_t max_len, std::size_t vocab_size) {
  for (int attempt = 0; attempt < 32; ++attempt) {
    TokenSeq candidate = chosen;
    const std::uint64_t edits = 1 + rand_below(rng, 3);
    for (std::uint64_t e = 0; e < edits; ++e) {
      random_edit(candidate, rng, max_len, vocab_size);
    }
    if (!candidate.empty() && candidate != chosen && !satisfies(spec, candidate)) {
      return candidate;
    }
  }
  return force_violation(spec, chosen, rng, vocab_size);
}

nlohmann::json seq_to_symbols(const TokenSeq& seq, const Vocab& vocab) {
  nlohmann::json arr = nlohmann::json::array();
  for (TokenId t : seq) arr.push_back(vocab.symbol(t));
  return arr;
}

TokenSeq symbols_to_seq(const nlohmann::json& arr, const Vocab& vocab) {
  TokenSeq seq;
  seq.reserve(arr.size());
  for (const auto& s : arr) seq.push_back(vocab.id(s.get<std::string>()));
  return seq;
}

}  // namespace

const std::vector<std::string>& task_names() {
  static const std::vector<std::string> names = {"sorted", "contains-target", "majority-token"};
  return names;
}

bool satisfies_task(const std::string& task, const Vocab& vocab, const TokenSeq& seq) {
  return satisfies(parse_task(task, vocab), seq);
}

PreferenceDataset generate_synthetic_dataset(const std::string& task, const Vocab& vocab,
                                             std::size_t n_pairs, std::size_t max_len,
                                             std::uint64_t seed) {
  if (n_pairs == 0) throw ValidationError("n_pairs must be positive");
  if (max_len == 0) throw ValidationError("max_len must be positive");
  const TaskSpec spec = parse_task(task, vocab);
  if (vocab.size() < 2) {
    throw ValidationError("synthetic tasks need at least two symbols to corrupt against");
  }
  if (spec.kind == TaskKind::kSorted && max_len < 2) {
    throw ValidationError("task 'sorted' needs max_len >= 2; every length-1 response is sorted");
  }

  PreferenceDataset ds;
  ds.seed = seed;
  ds.task_name = task;
  ds.pairs.reserve(n_pairs);
  const std::uint64_t stream = substream_seed(seed, "data");
  for (std::size_t i = 0; i < n_pairs; ++i) {
    std::mt19937_64 rng(item_seed(stream, i));
    PreferencePair pair;
    const std::size_t prompt_len = 1 + rand_below(rng, std::min<std::size_t>(3, max_len));
    pair.prompt = random_tokens(rng, prompt_len, vocab.size());
    pair.chosen = make_chosen(spec, rng, max_len, vocab.size());
    pair.rejected = make_rejected(spec, pair.chosen, rng, max_len, vocab.size());
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

std::pair<PreferenceDataset, PreferenceDataset> split_dataset(const PreferenceDataset& ds,
                                                              double train_frac,
                                                              std::uint64_t seed) {
  if (ds.empty()) throw ValidationError("cannot split an empty dataset");
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw ValidationError("train_frac must lie in (0, 1)");
  }
  const std::size_t n = ds.size();
  // Snap guards against 0.2 * 10 = 1.999... style representation noise.
  const auto eval_n = static_cast<std::size_t>(std::floor((1.0 - train_frac) * static_cast<double>(n) + 1e-9));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(substream_seed(seed, "split"));
  shuffle(order, rng);

  PreferenceDataset train{{}, ds.seed, ds.task_name};
  PreferenceDataset eval{{}, ds.seed, ds.task_name};
  for (std::size_t i = 0; i < n; ++i) {
    (i < n - eval_n ? train : eval).pairs.push_back(ds.pairs[order[i]]);
  }
  return {std::move(train), std::move(eval)};
}

void write_dataset_jsonl(std::ostream& out, const PreferenceDataset& ds, const Vocab& vocab) {
  for (const auto& pair : ds.pairs) {
    nlohmann::json line;
    line["prompt"] = seq_to_symbols(pair.prompt, vocab);
    line["chosen"] = seq_to_symbols(pair.chosen, vocab);
    line["rejected"] = seq_to_symbols(pair.rejected, vocab);
    out << line.dump() << '\n';
  }
}

PreferenceDataset read_dataset_jsonl(std::istream& in, const Vocab& vocab) {
  PreferenceDataset ds;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const nlohmann::json obj = nlohmann::json::parse(line);
    PreferencePair pair;
    pair.prompt = symbols_to_seq(obj.at("prompt"), vocab);
    pair.chosen = symbols_to_seq(obj.at("chosen"), vocab);
    pair.rejected = symbols_to_seq(obj.at("rejected"), vocab);
    if (pair.chosen.empty() || pair.rejected.empty()) {
      throw ValidationError("pair responses must be non-empty");
    }
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

void write_vocab_json(std::ostream& out, const Vocab& vocab) {
  out << nlohmann::json(vocab.symbols()).dump() << '\n';
}

Vocab read_vocab_json(std::istream& in) {
  nlohmann::json arr = nlohmann::json::parse(in);
  return Vocab(arr.get<std::vector<std::string>>());
}

}  // namespace tgdpo
