#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "ilm/common.hpp"
#include "ilm/vocab.hpp"

namespace ilm {

/// A clean training sequence: `condition_len` frozen prompt tokens, then
/// `<s>`, content, `</s>`. Only content tokens are droppable.
struct CleanSequence {
  std::vector<TokenId> ids;
  std::size_t condition_len = 0;

  std::size_t bos_index() const { return condition_len; }
  /// Number of droppable positions (content between `<s>` and `</s>`).
  std::size_t droppable() const { return ids.size() - condition_len - 2; }
  std::size_t droppable_begin() const { return condition_len + 1; }

  bool operator==(const CleanSequence&) const = default;
};

/// Throws ValidationError unless `x` is framed by `<s>`/`</s>` after its
/// prompt region and uses only in-range ids.
void validate_sequence(const CleanSequence& x, const Vocab& vocab);

/// Bit per droppable position of a CleanSequence; `n` ones.
struct DropMask {
  std::vector<bool> bits;
  std::size_t n = 0;
};

/// Sparse entry of the target insertion counts. `slot` is the index in the
/// visible sequence of the token the insertion goes after (`<stp>` is index 0
/// and is never a slot).
struct SlotTarget {
  std::size_t slot = 0;
  TokenId token = 0;
  std::uint32_t count = 0;

  bool operator==(const SlotTarget&) const = default;
};

struct NoisedExample {
  std::vector<TokenId> visible;  // `<stp>` ++ x[b]
  std::vector<SlotTarget> slot_targets;  // sorted by (slot, token)
  std::size_t n_dropped = 0;
  bool stop_label = false;
  std::size_t condition_len = 0;

  /// First and one-past-last valid slot index in `visible`.
  std::size_t slot_begin() const { return condition_len + 1; }
  std::size_t slot_end() const { return visible.size() - 1; }
  std::size_t num_slots() const { return slot_end() - slot_begin(); }
};

/// n ~ U{0..L}, then b uniform over the size-n subsets of droppable positions.
DropMask sample_drop_mask(const CleanSequence& x, Rng& rng);

/// `visible` gets `stp_id` prepended.
NoisedExample build_noised_example(const CleanSequence& x, const DropMask& b, TokenId stp_id);

enum class CorpusFormat {
  Lines,  // whitespace tokens per line; wrapped in <s> ... </s>
  Task,   // prompt tokens, `<s>`, solution tokens; `</s>` appended
};

CorpusFormat parse_corpus_format(std::string_view name);

CleanSequence parse_corpus_line(std::string_view line, const Vocab& vocab, CorpusFormat format);

/// Reads and validates every line; errors carry the 1-based line number.
std::vector<CleanSequence> load_corpus(const std::filesystem::path& path, const Vocab& vocab,
                                       CorpusFormat format);

/// Right-padded token batch with a per-position validity mask.
struct PaddedBatch {
  std::size_t batch_size = 0;
  std::size_t width = 0;
  std::vector<TokenId> ids;        // batch_size x width, row-major
  std::vector<std::uint8_t> valid;  // 1 for real tokens
  std::vector<std::size_t> lengths;
  std::vector<std::size_t> condition_lens;

  std::span<const TokenId> row(std::size_t i) const {
    return std::span<const TokenId>(ids).subspan(i * width, lengths[i]);
  }
};

PaddedBatch pad_sequences(std::span<const std::vector<TokenId>> rows,
                          std::span<const std::size_t> condition_lens, std::size_t pad_to,
                          TokenId pad_id);

struct NoisedBatch {
  PaddedBatch inputs;
  std::vector<std::vector<SlotTarget>> targets;
  std::vector<std::size_t> n_dropped;
  std::vector<std::uint8_t> stop_labels;
};

/// Pads the visible sequences to `pad_to`; throws on an empty batch or an
/// example longer than `pad_to`.
NoisedBatch batch(std::span<const NoisedExample> examples, std::size_t pad_to, TokenId pad_id);

}  // namespace ilm
