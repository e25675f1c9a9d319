#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace tgdpo {

using TokenId = std::uint32_t;

// A token sequence: a prompt x, a response y, or a prefix y^{<t}.
using TokenSeq = std::vector<TokenId>;

// Finite ordered token alphabet. Index assignment follows input order.
class Vocab {
public:
  Vocab() = default;
  explicit Vocab(std::vector<std::string> symbols);

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(TokenId id) const;
  TokenId id(std::string_view symbol) const;
  bool contains(std::string_view symbol) const;
  const std::vector<std::string>& symbols() const { return symbols_; }

  bool operator==(const Vocab& other) const { return symbols_ == other.symbols_; }

private:
  std::vector<std::string> symbols_;
  std::map<std::string, TokenId, std::less<>> index_;
};

Vocab build_vocab(std::vector<std::string> symbols);

// (x, y_w, y_l): prompt, preferred response, dispreferred response.
struct PreferencePair {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;
};

struct PreferenceDataset {
  std::vector<PreferencePair> pairs;
  std::uint64_t seed = 0;
  std::string task_name;

  std::size_t size() const { return pairs.size(); }
  bool empty() const { return pairs.empty(); }
};

// Synthetic tasks. A task name is one of {"sorted", "contains-target",
// "majority-token"}, optionally suffixed ":<symbol>" to pick the designated
// token ("contains-target:7"). Defaults: contains-target uses the last vocab
// symbol, majority-token the first.
const std::vector<std::string>& task_names();

// Re-runnable preference predicate: true iff `seq` is a valid chosen response
// for the task. Throws ValidationError for unknown tasks or designated
// symbols absent from the vocab.
bool satisfies_task(const std::string& task, const Vocab& vocab, const TokenSeq& seq);

// Deterministic pure function of (task, vocab, n_pairs, max_len, seed).
// Every chosen response satisfies the task predicate; every rejected response
// is a corrupted copy that violates it (edits may change length).
PreferenceDataset generate_synthetic_dataset(const std::string& task, const Vocab& vocab,
                                             std::size_t n_pairs, std::size_t max_len,
                                             std::uint64_t seed);

// Disjoint cover of `ds`, deterministic under `seed`. Eval gets
// floor((1 - train_frac) * n) pairs, train the remainder.
std::pair<PreferenceDataset, PreferenceDataset> split_dataset(const PreferenceDataset& ds,
                                                              double train_frac,
                                                              std::uint64_t seed);

// JSON Lines, one {"prompt": [...], "chosen": [...], "rejected": [...]} per
// pair, tokens spelled as vocab symbols.
void write_dataset_jsonl(std::ostream& out, const PreferenceDataset& ds, const Vocab& vocab);
PreferenceDataset read_dataset_jsonl(std::istream& in, const Vocab& vocab);

// Vocab file: JSON array of symbol strings.
void write_vocab_json(std::ostream& out, const Vocab& vocab);
Vocab read_vocab_json(std::istream& in);

}  // namespace tgdpo
