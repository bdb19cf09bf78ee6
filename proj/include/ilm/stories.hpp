#pragma once

#include <string>
#include <vector>

#include "ilm/common.hpp"
#include "ilm/vocab.hpp"

namespace ilm {

/// Word-level toy stories from a small probabilistic grammar: an opening
/// that introduces a character, a few body sentences that keep referring to
/// it, and a closing line. Whole sentences are kept up to `max_tokens`.
struct StoriesSpec {
  std::size_t n_train = 20000;
  std::size_t n_test = 500;
  std::size_t max_tokens = 40;
  std::uint64_t seed = 0;
};

std::string gen_story(const StoriesSpec& spec, std::size_t split, std::size_t index);
std::vector<std::string> gen_stories_split(const StoriesSpec& spec, std::size_t split);

/// Every word the grammar can emit, after the sentinels.
Vocab stories_vocab();

}  // namespace ilm
