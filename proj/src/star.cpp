#include "ilm/star.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace ilm {

void StarSpec::validate() const {
  if (degree < 2) {
    throw ValidationError("star degree must be at least 2");
  }
  if (min_arm < 1) {
    throw ValidationError("star min_arm must be at least 1");
  }
  if (min_path > max_path || max_path == 0) {
    throw ValidationError("star path bounds must satisfy 0 < min_path <= max_path");
  }
  if (!symmetric && 2 * min_arm > max_path) {
    throw ValidationError("asymmetric star needs max_path >= 2 * min_arm");
  }
  // Smallest graph the generator can shrink an instance to.
  const std::size_t lower = symmetric ? 1 + degree * min_path
                                      : 1 + std::max(min_path, 2 * min_arm) + (2 * degree - 2) * min_arm;
  if (lower > vocab_size) {
    throw ValidationError("star vocab_size " + std::to_string(vocab_size) + " too small: graphs need at least " +
                          std::to_string(lower) + " nodes");
  }
}

std::size_t StarSpec::max_nodes() const {
  if (symmetric) {
    return 1 + degree * max_path;
  }
  return std::min(vocab_size, 1 + max_path + (2 * degree - 2) * (max_path - min_arm));
}

StarSpec star_preset(std::string_view name) {
  StarSpec s;
  if (name == "star-easy") {
    s = StarSpec{3, 1, 5, 5, 20, 50000, 5000, 0, true};
  } else if (name == "star-medium") {
    s = StarSpec{2, 2, 3, 6, 20, 50000, 5000, 0, false};
  } else if (name == "star-hard") {
    s = StarSpec{5, 5, 6, 12, 56, 50000, 5000, 0, false};
  } else if (name == "star-desk") {
    s = StarSpec{2, 1, 3, 5, 20, 10000, 1000, 0, false};
  } else if (name == "star-desk-fixed") {
    s = StarSpec{2, 4, 4, 4, 20, 10000, 1000, 0, true};
  } else {
    throw UsageError("unknown star tier '" + std::string(name) + "'");
  }
  return s;
}

namespace {

std::size_t uniform_in(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(uniform_index(rng, hi - lo + 1));
}

}  // namespace

StarInstance gen_star(const StarSpec& spec, std::size_t split, std::size_t index) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, {0x57A2, split, index}));

  // Arm lengths; arm 0 is the path's incoming part (asymmetric) and the
  // first outgoing arm carries the target.
  std::vector<std::size_t> in_arms, out_arms;
  if (spec.symmetric) {
    const std::size_t len = uniform_in(rng, spec.min_path, spec.max_path);
    out_arms.assign(spec.degree, len);
  } else {
    const std::size_t l = uniform_in(rng, std::max(spec.min_path, 2 * spec.min_arm), spec.max_path);
    const std::size_t a = uniform_in(rng, spec.min_arm, l - spec.min_arm);
    in_arms.push_back(a);
    out_arms.push_back(l - a);
    const std::size_t hi = spec.max_path - spec.min_arm;
    for (std::size_t i = 1; i < spec.degree; ++i) {
      in_arms.push_back(uniform_in(rng, spec.min_arm, hi));
      out_arms.push_back(uniform_in(rng, spec.min_arm, hi));
    }
    // Shrink the longest distractor arms until the graph fits the labels.
    auto total = [&] {
      return 1 + std::accumulate(in_arms.begin(), in_arms.end(), std::size_t{0}) +
             std::accumulate(out_arms.begin(), out_arms.end(), std::size_t{0});
    };
    while (total() > spec.vocab_size) {
      std::size_t* longest = nullptr;
      for (auto* arms : {&in_arms, &out_arms}) {
        for (std::size_t i = 1; i < arms->size(); ++i) {
          if ((*arms)[i] > spec.min_arm && (!longest || (*arms)[i] > *longest)) {
            longest = &(*arms)[i];
          }
        }
      }
      if (!longest) {
        throw ValidationError("star spec infeasible for vocab_size " + std::to_string(spec.vocab_size));
      }
      --*longest;
    }
  }

  std::size_t nodes = 1;
  for (auto len : in_arms) nodes += len;
  for (auto len : out_arms) nodes += len;
  std::vector<int> labels(spec.vocab_size);
  std::iota(labels.begin(), labels.end(), 0);
  for (std::size_t i = 0; i < nodes; ++i) {
    std::swap(labels[i], labels[i + uniform_index(rng, spec.vocab_size - i)]);
  }
  std::size_t next = 0;
  const int junction = labels[next++];

  StarInstance inst;
  std::vector<int> in_path;
  for (std::size_t arm = 0; arm < in_arms.size(); ++arm) {
    // tail -> ... -> junction
    std::vector<int> chain;
    for (std::size_t i = 0; i < in_arms[arm]; ++i) chain.push_back(labels[next++]);
    chain.push_back(junction);
    for (std::size_t i = 0; i + 1 < chain.size(); ++i) inst.edges.emplace_back(chain[i], chain[i + 1]);
    if (arm == 0) in_path = chain;
  }
  std::vector<int> out_path;
  for (std::size_t arm = 0; arm < out_arms.size(); ++arm) {
    std::vector<int> chain{junction};
    for (std::size_t i = 0; i < out_arms[arm]; ++i) chain.push_back(labels[next++]);
    for (std::size_t i = 0; i + 1 < chain.size(); ++i) inst.edges.emplace_back(chain[i], chain[i + 1]);
    if (arm == 0) out_path = chain;
  }
  if (spec.symmetric) {
    // The target arm is uniform among the outgoing arms.
    const std::size_t pick = uniform_index(rng, out_arms.size());
    out_path.assign(1, junction);
    const std::size_t first = 1 + std::accumulate(out_arms.begin(), out_arms.begin() + static_cast<std::ptrdiff_t>(pick),
                                                  std::size_t{0});
    for (std::size_t i = 0; i < out_arms[pick]; ++i) out_path.push_back(labels[first + i]);
    inst.path = out_path;
  } else {
    inst.path = in_path;
    inst.path.insert(inst.path.end(), out_path.begin() + 1, out_path.end());
  }
  inst.start = inst.path.front();
  inst.target = inst.path.back();
  for (std::size_t i = inst.edges.size(); i > 1; --i) {
    std::swap(inst.edges[i - 1], inst.edges[uniform_index(rng, i)]);
  }
  return inst;
}

std::vector<StarInstance> gen_star_split(const StarSpec& spec, std::size_t split) {
  const std::size_t n = split == 0 ? spec.n_train : spec.n_test;
  std::vector<StarInstance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(gen_star(spec, split, i));
  return out;
}

std::string serialize_star(const StarInstance& inst) {
  std::ostringstream os;
  for (const auto& [u, v] : inst.edges) os << u << ' ' << v << ' ';
  os << inst.start << ' ' << inst.target << ' ' << Vocab::kBos;
  for (int p : inst.path) os << ' ' << p;
  return os.str();
}

namespace {

int parse_node(const std::string& tok, std::size_t offset) {
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char ch) { return ch >= '0' && ch <= '9'; }) ||
      tok.size() > 6) {
    throw ValidationError("star record: expected a node label at token " + std::to_string(offset) + ", got '" +
                          tok + "'");
  }
  return std::stoi(tok);
}

}  // namespace

StarInstance parse_star(std::string_view line) {
  const auto toks = split_whitespace(line);
  const auto bos = std::find(toks.begin(), toks.end(), std::string(Vocab::kBos));
  if (bos == toks.end()) {
    throw ValidationError("star record: missing <s>");
  }
  const auto prompt = static_cast<std::size_t>(bos - toks.begin());
  if (prompt < 4 || prompt % 2 != 0) {
    throw ValidationError("star record: prompt must be edge pairs then start and target (got " +
                          std::to_string(prompt) + " tokens before <s>)");
  }
  StarInstance inst;
  for (std::size_t i = 0; i + 2 < prompt; i += 2) {
    inst.edges.emplace_back(parse_node(toks[i], i), parse_node(toks[i + 1], i + 1));
  }
  inst.start = parse_node(toks[prompt - 2], prompt - 2);
  inst.target = parse_node(toks[prompt - 1], prompt - 1);
  for (std::size_t i = prompt + 1; i < toks.size(); ++i) {
    if (toks[i] == Vocab::kEos && i + 1 == toks.size()) break;
    inst.path.push_back(parse_node(toks[i], i));
  }
  return inst;
}

Vocab star_vocab(std::size_t vocab_size) {
  std::vector<std::string> content;
  for (std::size_t i = 0; i < vocab_size; ++i) content.push_back(std::to_string(i));
  return Vocab::with_sentinels(content);
}

PathScore score_sequence(std::span<const int> gold, std::span<const int> predicted) {
  const std::size_t denom = std::max(gold.size(), predicted.size());
  if (denom == 0) {
    return {true, 1.0};
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(gold.size(), predicted.size()); ++i) {
    hits += gold[i] == predicted[i];
  }
  const bool exact = gold.size() == predicted.size() && hits == gold.size();
  return {exact, static_cast<double>(hits) / static_cast<double>(denom)};
}

PathScore verify_star(const StarInstance& inst, std::span<const int> predicted_path) {
  return score_sequence(inst.path, predicted_path);
}

bool is_valid_walk(const StarInstance& inst, std::span<const int> path) {
  if (path.empty() || path.front() != inst.start || path.back() != inst.target) return false;
  const std::set<std::pair<int, int>> edges(inst.edges.begin(), inst.edges.end());
  for (std::size_t i = 0; i + 1 < path.size(); ++i) {
    if (!edges.count({path[i], path[i + 1]})) return false;
  }
  return true;
}

StarInstance reverse_path(const StarInstance& inst) {
  StarInstance out = inst;
  std::reverse(out.path.begin(), out.path.end());
  return out;
}

int junction_of(const StarInstance& inst) {
  std::map<int, int> deg;
  for (const auto& [u, v] : inst.edges) {
    ++deg[u];
    ++deg[v];
  }
  int found = -1;
  for (const auto& [node, d] : deg) {
    if (d > 2) {
      if (found != -1) return -1;
      found = node;
    }
  }
  return found;
}

}  // namespace ilm
