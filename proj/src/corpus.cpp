#include "ilm/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

namespace ilm {

void validate_sequence(const CleanSequence& x, const Vocab& vocab) {
  if (x.ids.size() < x.condition_len + 2) {
    throw ValidationError("sequence shorter than its framing sentinels");
  }
  for (TokenId id : x.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw ValidationError("token id out of range: " + std::to_string(id));
    }
  }
  if (x.ids[x.condition_len] != vocab.bos()) {
    throw ValidationError("expected <s> right after the prompt region");
  }
  if (x.ids.back() != vocab.eos()) {
    throw ValidationError("sequence must end with </s>");
  }
  for (std::size_t i = 0; i < x.ids.size(); ++i) {
    const TokenId id = x.ids[i];
    const bool framing = i == x.condition_len || i + 1 == x.ids.size();
    if (!framing && vocab.is_sentinel(id)) {
      throw ValidationError("sentinel '" + vocab.token(id) + "' inside sequence at position " +
                            std::to_string(i));
    }
  }
}

DropMask sample_drop_mask(const CleanSequence& x, Rng& rng) {
  if (x.ids.size() < x.condition_len + 2 || x.droppable() == 0) {
    throw DegenerateExampleError("no droppable positions in example");
  }
  const std::size_t length = x.droppable();
  const std::size_t n = uniform_index(rng, length + 1);
  // Partial Fisher-Yates: the first n entries are a uniform n-subset.
  std::vector<std::size_t> order(length);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + uniform_index(rng, length - i);
    std::swap(order[i], order[j]);
  }
  DropMask mask;
  mask.bits.assign(length, false);
  mask.n = n;
  for (std::size_t i = 0; i < n; ++i) {
    mask.bits[order[i]] = true;
  }
  return mask;
}

NoisedExample build_noised_example(const CleanSequence& x, const DropMask& b, TokenId stp_id) {
  if (b.bits.size() != x.droppable()) {
    throw ValidationError("drop mask does not match the droppable region");
  }
  NoisedExample ex;
  ex.condition_len = x.condition_len;
  ex.visible.reserve(x.ids.size() + 1 - b.n);
  ex.visible.push_back(stp_id);
  std::map<std::pair<std::size_t, TokenId>, std::uint32_t> counts;
  std::size_t dropped = 0;
  const std::size_t begin = x.droppable_begin();
  for (std::size_t i = 0; i < x.ids.size(); ++i) {
    const bool droppable = i >= begin && i < begin + b.bits.size();
    if (droppable && b.bits[i - begin]) {
      // Anchor is the last visible token, i.e. the current back of `visible`.
      counts[{ex.visible.size() - 1, x.ids[i]}] += 1;
      ++dropped;
    } else {
      ex.visible.push_back(x.ids[i]);
    }
  }
  if (dropped != b.n) {
    throw ValidationError("drop mask popcount does not match n");
  }
  ex.n_dropped = dropped;
  ex.stop_label = dropped == 0;
  for (const auto& [key, c] : counts) {
    ex.slot_targets.push_back(SlotTarget{key.first, key.second, c});
  }
  return ex;
}

CorpusFormat parse_corpus_format(std::string_view name) {
  if (name == "lines") {
    return CorpusFormat::Lines;
  }
  if (name == "task") {
    return CorpusFormat::Task;
  }
  throw UsageError("unknown corpus format '" + std::string(name) + "' (expected lines|task)");
}

CleanSequence parse_corpus_line(std::string_view line, const Vocab& vocab, CorpusFormat format) {
  const auto words = split_whitespace(line);
  CleanSequence x;
  if (format == CorpusFormat::Lines) {
    x.ids.push_back(vocab.bos());
    for (const auto& w : words) {
      x.ids.push_back(vocab.id(w));
    }
    x.ids.push_back(vocab.eos());
    x.condition_len = 0;
  } else {
    auto bos = std::find(words.begin(), words.end(), std::string(Vocab::kBos));
    if (bos == words.end()) {
      throw ValidationError("task record without <s> separator");
    }
    x.condition_len = static_cast<std::size_t>(bos - words.begin());
    for (const auto& w : words) {
      x.ids.push_back(vocab.id(w));
    }
    x.ids.push_back(vocab.eos());
  }
  validate_sequence(x, vocab);
  return x;
}

std::vector<CleanSequence> load_corpus(const std::filesystem::path& path, const Vocab& vocab,
                                       CorpusFormat format) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open corpus " + path.string());
  }
  std::vector<CleanSequence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (split_whitespace(line).empty()) {
      continue;
    }
    const std::string where = path.string() + ":" + std::to_string(line_no);
    try {
      out.push_back(parse_corpus_line(line, vocab, format));
    } catch (const UnknownTokenError& e) {
      throw UnknownTokenError(e.token(), where);
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return out;
}

PaddedBatch pad_sequences(std::span<const std::vector<TokenId>> rows,
                          std::span<const std::size_t> condition_lens, std::size_t pad_to,
                          TokenId pad_id) {
  if (rows.empty()) {
    throw ValidationError("cannot batch zero examples");
  }
  if (condition_lens.size() != rows.size()) {
    throw ValidationError("condition length count does not match rows");
  }
  PaddedBatch b;
  b.batch_size = rows.size();
  b.width = pad_to;
  b.ids.assign(rows.size() * pad_to, pad_id);
  b.valid.assign(rows.size() * pad_to, 0);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() > pad_to) {
      throw ValidationError("example of length " + std::to_string(rows[i].size()) +
                            " exceeds pad_to " + std::to_string(pad_to));
    }
    std::copy(rows[i].begin(), rows[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * pad_to));
    std::fill_n(b.valid.begin() + static_cast<std::ptrdiff_t>(i * pad_to), rows[i].size(), 1);
    b.lengths.push_back(rows[i].size());
    b.condition_lens.push_back(condition_lens[i]);
  }
  return b;
}

NoisedBatch batch(std::span<const NoisedExample> examples, std::size_t pad_to, TokenId pad_id) {
  std::vector<std::vector<TokenId>> rows;
  std::vector<std::size_t> conds;
  NoisedBatch nb;
  for (const auto& ex : examples) {
    rows.push_back(ex.visible);
    conds.push_back(ex.condition_len);
    nb.targets.push_back(ex.slot_targets);
    nb.n_dropped.push_back(ex.n_dropped);
    nb.stop_labels.push_back(ex.stop_label ? 1 : 0);
  }
  nb.inputs = pad_sequences(rows, conds, pad_to, pad_id);
  return nb;
}

}  // namespace ilm
