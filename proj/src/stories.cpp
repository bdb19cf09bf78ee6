#include "ilm/stories.hpp"

#include <array>
#include <set>
#include <string_view>

namespace ilm {

namespace {

using Words = std::vector<std::string_view>;

const Words kGirls{"lily", "mia", "sue", "anna", "zoe"};
const Words kBoys{"tom", "ben", "max", "sam", "leo"};
const Words kAnimals{"cat", "dog", "bird", "bunny", "frog", "fox", "bear", "duck"};
const Words kAdjs{"little", "big", "happy", "shy", "brave", "kind", "silly", "small"};
const Words kPlaces{"park", "forest", "garden", "house", "pond", "hill"};
const Words kObjects{"ball", "box", "kite", "hat", "cake", "flower", "stick", "toy"};
const Words kObjAdjs{"red", "shiny", "soft", "old", "new", "pretty"};
const Words kIntrans{"play", "run", "jump", "sing", "swim", "dance"};
const Words kTrans{"find", "share", "fix", "carry", "hide", "keep"};
const Words kFeelings{"happy", "sad", "scared", "proud", "tired", "glad"};
const Words kFriends{"mom", "dad", "friend", "sister", "brother"};

std::string_view pick(const Words& w, Rng& rng) { return w[uniform_index(rng, w.size())]; }

struct Character {
  std::string_view name;
  std::string_view pron;  // he / she
  std::string_view poss;  // his / her
};

using Sentence = std::vector<std::string_view>;

Sentence opening(const Character& c, Rng& rng) {
  const auto adj = pick(kAdjs, rng);
  const auto animal = pick(kAnimals, rng);
  switch (uniform_index(rng, 3)) {
    case 0:
      return {"once", "upon", "a", "time", "there", "was", "a", adj, animal, "named", c.name, "."};
    case 1:
      return {"there", "was", "a", adj, animal, "named", c.name, "."};
    default:
      return {c.name, "was", "a", adj, animal, "."};
  }
}

Sentence body(const Character& c, std::string_view& object, Rng& rng) {
  switch (uniform_index(rng, 7)) {
    case 0:
      return {c.name, "liked", "to", pick(kIntrans, rng), "in", "the", pick(kPlaces, rng), "."};
    case 1:
      object = pick(kObjects, rng);
      return {"one", "day", c.name, "found", "a", pick(kObjAdjs, rng), object, "in", "the", pick(kPlaces, rng), "."};
    case 2:
      return {c.pron, "wanted", "to", pick(kTrans, rng), "the", object, "."};
    case 3:
      return {c.pron, "was", "very", pick(kFeelings, rng), "."};
    case 4:
      return {c.name, "and", c.poss, pick(kFriends, rng), "played", "with", "the", object, "."};
    case 5:
      return {c.name, "said", "that", "the", object, "was", pick(kObjAdjs, rng), "."};
    default:
      return {"then", c.pron, "went", "to", "the", pick(kPlaces, rng), "with", c.poss, pick(kFriends, rng), "."};
  }
}

Sentence closing(const Character& c, Rng& rng) {
  switch (uniform_index(rng, 3)) {
    case 0:
      return {"they", "were", "happy", "."};
    case 1:
      return {"the", "end", "."};
    default:
      return {c.pron, "went", "home", "and", "slept", "."};
  }
}

}  // namespace

std::string gen_story(const StoriesSpec& spec, std::size_t split, std::size_t index) {
  Rng rng(derive_seed(spec.seed, {0x5709, split, index}));
  const bool girl = uniform_index(rng, 2) == 0;
  const Character c{pick(girl ? kGirls : kBoys, rng), girl ? "she" : "he", girl ? "her" : "his"};
  std::string_view object = pick(kObjects, rng);

  std::vector<Sentence> sentences{opening(c, rng)};
  const std::size_t n_body = 2 + uniform_index(rng, 4);
  for (std::size_t i = 0; i < n_body; ++i) sentences.push_back(body(c, object, rng));
  sentences.push_back(closing(c, rng));

  std::string out;
  std::size_t used = 0;
  for (const auto& s : sentences) {
    if (used + s.size() > spec.max_tokens) break;
    for (auto w : s) {
      if (!out.empty()) out += ' ';
      out += w;
    }
    used += s.size();
  }
  return out;
}

std::vector<std::string> gen_stories_split(const StoriesSpec& spec, std::size_t split) {
  const std::size_t n = split == 0 ? spec.n_train : spec.n_test;
  std::vector<std::string> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_story(spec, split, i));
  return out;
}

Vocab stories_vocab() {
  std::set<std::string> words;
  for (const Words* list : {&kGirls, &kBoys, &kAnimals, &kAdjs, &kPlaces, &kObjects, &kObjAdjs, &kIntrans, &kTrans,
                            &kFeelings, &kFriends}) {
    for (auto w : *list) words.emplace(w);
  }
  for (std::string_view w :
       {"once", "upon", "a", "time", "there", "was", "named", ".", "liked", "to", "in", "the", "one", "day", "found",
        "he", "she", "his", "her", "wanted", "very", "and", "played", "with", "said", "that", "then", "went", "they",
        "were", "end", "home", "slept"}) {
    words.emplace(w);
  }
  std::vector<std::string> content(words.begin(), words.end());
  return Vocab::with_sentinels(content);
}

}  // namespace ilm
