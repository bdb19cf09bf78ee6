#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ilm/common.hpp"
#include "ilm/vocab.hpp"

namespace ilm {

/// m houses; n categories, each with m values that occupy the houses
/// bijectively. A clue operand (e, a) names value a of category e.
struct ZebraSpec {
  std::size_t m = 3;
  std::size_t n = 3;
  std::size_t n_train = 20000;
  std::size_t n_test = 1000;
  std::uint64_t seed = 0;

  void validate() const;
};

enum class Relation { Same, Different, LeftOf, ImmediateLeft, Neighbor, Ends, Between };

struct Operand {
  int e = 0;
  int a = 0;
  bool operator==(const Operand&) const = default;
};

/// Operand order: `=`, `!=`, left-of, immediate-left, nbr take (lhs, rhs);
/// ends takes one; inbetween takes (x, y, z) and holds when y sits strictly
/// between x and z.
struct Clue {
  Relation rel = Relation::Same;
  std::vector<Operand> lhs;
  std::vector<Operand> rhs;
  bool operator==(const Clue&) const = default;
};

/// house[e][a] = house index of value a of category e.
using ZebraAssignment = std::vector<std::vector<int>>;

struct ZebraInstance {
  std::size_t m = 0;
  std::size_t n = 0;
  std::vector<Clue> clues;
  ZebraAssignment solution;
  bool operator==(const ZebraInstance&) const = default;
};

bool clue_holds(const Clue& clue, const ZebraAssignment& house);
bool satisfies_all(std::span<const Clue> clues, const ZebraAssignment& house);

/// Exhaustive enumeration; stops after `limit` solutions.
std::vector<ZebraAssignment> solve_zebra(std::span<const Clue> clues, std::size_t m, std::size_t n,
                                         std::size_t limit = 2);

ZebraInstance gen_zebra(const ZebraSpec& spec, std::size_t split, std::size_t index);
std::vector<ZebraInstance> gen_zebra_split(const ZebraSpec& spec, std::size_t split);

std::string serialize_clues(std::span<const Clue> clues);
/// (category, house, value) triples sorted by house, then category.
std::vector<std::string> solution_tokens(const ZebraAssignment& house);
std::string serialize_zebra(const ZebraInstance& inst);
ZebraInstance parse_zebra(std::string_view line, std::size_t m, std::size_t n);
std::vector<Clue> parse_clues(std::span<const std::string> tokens);

/// nullopt unless `tokens` are m*n well-formed triples forming a bijection
/// per category.
std::optional<ZebraAssignment> parse_solution(std::span<const std::string> tokens, std::size_t m, std::size_t n);

Vocab zebra_vocab();

struct ZebraScore {
  bool exact = false;
  bool satisfies_all_clues = false;
};

ZebraScore verify_zebra(const ZebraInstance& inst, std::span<const std::string> predicted);

std::string_view relation_token(Relation r);

}  // namespace ilm
