#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ilm/common.hpp"
#include "ilm/vocab.hpp"

namespace ilm {

struct StarSpec {
  std::size_t degree = 2;
  std::size_t min_arm = 1;
  std::size_t min_path = 3;  // edges
  std::size_t max_path = 5;  // edges
  std::size_t vocab_size = 20;  // node labels 0..vocab_size-1
  std::size_t n_train = 10000;
  std::size_t n_test = 1000;
  std::uint64_t seed = 0;
  // Symmetric graphs: the start is the junction and every arm is outgoing
  // with the same length. Otherwise `degree` incoming and `degree`
  // outgoing arms meet at the junction and the path runs through it.
  bool symmetric = false;

  void validate() const;
  /// Largest node count any instance can need.
  std::size_t max_nodes() const;
};

/// star-easy, star-medium, star-hard, star-desk, star-desk-fixed.
StarSpec star_preset(std::string_view name);

struct StarInstance {
  std::vector<std::pair<int, int>> edges;
  int start = 0;
  int target = 0;
  std::vector<int> path;  // start ... target

  bool operator==(const StarInstance&) const = default;
};

/// Instance `index` of split `split` (0 train, 1 test); a pure function of
/// (spec, split, index).
StarInstance gen_star(const StarSpec& spec, std::size_t split, std::size_t index);
std::vector<StarInstance> gen_star_split(const StarSpec& spec, std::size_t split);

std::string serialize_star(const StarInstance& inst);
StarInstance parse_star(std::string_view line);

/// Sentinels then node labels "0".."vocab_size-1".
Vocab star_vocab(std::size_t vocab_size);

struct PathScore {
  bool exact = false;
  double token_acc = 0.0;
};

/// Positionwise against gold; positions beyond the shorter sequence count
/// as wrong.
PathScore score_sequence(std::span<const int> gold, std::span<const int> predicted);
PathScore verify_star(const StarInstance& inst, std::span<const int> predicted_path);

/// True when `path` is a directed walk from start to target over the edges.
bool is_valid_walk(const StarInstance& inst, std::span<const int> path);

StarInstance reverse_path(const StarInstance& inst);

/// Node of undirected degree > 2, or -1 if there is none or several.
int junction_of(const StarInstance& inst);

}  // namespace ilm
