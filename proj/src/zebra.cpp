#include "ilm/zebra.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace ilm {

namespace {

constexpr std::size_t kMaxCandidates = 5'000'000;

std::size_t factorial(std::size_t k) {
  std::size_t f = 1;
  for (std::size_t i = 2; i <= k; ++i) f *= i;
  return f;
}

std::size_t candidate_count(std::size_t m, std::size_t n) {
  std::size_t total = 1;
  const std::size_t f = factorial(m);
  for (std::size_t i = 0; i < n; ++i) {
    if (total > kMaxCandidates / f) return kMaxCandidates + 1;
    total *= f;
  }
  return total;
}

int house_of(const ZebraAssignment& h, const Operand& o) { return h[static_cast<std::size_t>(o.e)][static_cast<std::size_t>(o.a)]; }

}  // namespace

void ZebraSpec::validate() const {
  if (m < 2 || n < 2) {
    throw ValidationError("zebra puzzles need m >= 2 and n >= 2");
  }
  if (m > 5) {
    throw ValidationError("zebra m must be at most 5 for exhaustive uniqueness checks");
  }
  if (candidate_count(m, n) > kMaxCandidates) {
    throw ValidationError("zebra (m!)^n exceeds the exhaustive-check budget");
  }
}

std::string_view relation_token(Relation r) {
  switch (r) {
    case Relation::Same:
      return "=";
    case Relation::Different:
      return "!=";
    case Relation::LeftOf:
      return "left-of";
    case Relation::ImmediateLeft:
      return "immediate-left";
    case Relation::Neighbor:
      return "nbr";
    case Relation::Ends:
      return "ends";
    case Relation::Between:
      return "inbetween";
  }
  return "?";
}

namespace {

std::optional<Relation> parse_relation(std::string_view tok) {
  if (tok == "=") return Relation::Same;
  if (tok == "!=") return Relation::Different;
  if (tok == "left-of") return Relation::LeftOf;
  if (tok == "immediate-left" || tok == "immedate-left") return Relation::ImmediateLeft;
  if (tok == "nbr") return Relation::Neighbor;
  if (tok == "ends" || tok == "end") return Relation::Ends;
  if (tok == "inbetween") return Relation::Between;
  return std::nullopt;
}

std::size_t arity(Relation r) {
  switch (r) {
    case Relation::Ends:
      return 1;
    case Relation::Between:
      return 3;
    default:
      return 2;
  }
}

std::vector<Operand> operands(const Clue& c) {
  std::vector<Operand> ops = c.lhs;
  ops.insert(ops.end(), c.rhs.begin(), c.rhs.end());
  return ops;
}

}  // namespace

bool clue_holds(const Clue& clue, const ZebraAssignment& house) {
  const auto ops = operands(clue);
  if (ops.size() != arity(clue.rel)) {
    return false;
  }
  const std::size_t m = house.empty() ? 0 : house[0].size();
  const int h0 = house_of(house, ops[0]);
  switch (clue.rel) {
    case Relation::Same:
      return h0 == house_of(house, ops[1]);
    case Relation::Different:
      return h0 != house_of(house, ops[1]);
    case Relation::LeftOf:
      return h0 < house_of(house, ops[1]);
    case Relation::ImmediateLeft:
      return h0 + 1 == house_of(house, ops[1]);
    case Relation::Neighbor:
      return std::abs(h0 - house_of(house, ops[1])) == 1;
    case Relation::Ends:
      return h0 == 0 || h0 == static_cast<int>(m) - 1;
    case Relation::Between: {
      const int h1 = house_of(house, ops[1]);
      const int h2 = house_of(house, ops[2]);
      return (h0 < h1 && h1 < h2) || (h2 < h1 && h1 < h0);
    }
  }
  return false;
}

bool satisfies_all(std::span<const Clue> clues, const ZebraAssignment& house) {
  return std::all_of(clues.begin(), clues.end(), [&](const Clue& c) { return clue_holds(c, house); });
}

std::vector<ZebraAssignment> solve_zebra(std::span<const Clue> clues, std::size_t m, std::size_t n,
                                         std::size_t limit) {
  if (candidate_count(m, n) > kMaxCandidates) {
    throw ValidationError("zebra instance too large for exhaustive solving");
  }
  // Each clue is checked as soon as every category it mentions is placed.
  std::vector<std::vector<std::size_t>> ready(n);
  for (std::size_t i = 0; i < clues.size(); ++i) {
    int last = 0;
    for (const auto& o : operands(clues[i])) {
      if (o.e < 0 || static_cast<std::size_t>(o.e) >= n || o.a < 0 || static_cast<std::size_t>(o.a) >= m) {
        throw ValidationError("zebra clue operand out of range");
      }
      last = std::max(last, o.e);
    }
    ready[static_cast<std::size_t>(last)].push_back(i);
  }
  std::vector<int> perm(m);
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<std::vector<int>> perms;
  do {
    perms.push_back(perm);
  } while (std::next_permutation(perm.begin(), perm.end()));

  std::vector<ZebraAssignment> found;
  ZebraAssignment h(n, std::vector<int>(m, 0));
  auto rec = [&](auto&& self, std::size_t e) -> void {
    if (found.size() >= limit) return;
    if (e == n) {
      found.push_back(h);
      return;
    }
    for (const auto& p : perms) {
      h[e] = p;
      bool ok = true;
      for (std::size_t ci : ready[e]) {
        if (!clue_holds(clues[ci], h)) {
          ok = false;
          break;
        }
      }
      if (ok) self(self, e + 1);
      if (found.size() >= limit) return;
    }
  };
  rec(rec, 0);
  return found;
}

namespace {

Operand random_operand(Rng& rng, std::size_t m, std::size_t n) {
  return Operand{static_cast<int>(uniform_index(rng, n)), static_cast<int>(uniform_index(rng, m))};
}

// A random clue that the solution satisfies, or nullopt after too many
// rejected proposals.
std::optional<Clue> propose_clue(Rng& rng, const ZebraAssignment& sol, std::size_t m, std::size_t n) {
  std::vector<Relation> kinds{Relation::Same,     Relation::Different, Relation::LeftOf, Relation::ImmediateLeft,
                              Relation::Neighbor, Relation::Ends};
  if (m >= 3) kinds.push_back(Relation::Between);
  const Relation rel = kinds[uniform_index(rng, kinds.size())];
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::vector<Operand> ops;
    for (std::size_t i = 0; i < arity(rel); ++i) ops.push_back(random_operand(rng, m, n));
    bool distinct = true;
    for (std::size_t i = 0; i < ops.size(); ++i) {
      for (std::size_t j = i + 1; j < ops.size(); ++j) distinct = distinct && !(ops[i] == ops[j]);
    }
    if (!distinct) continue;
    Clue c;
    c.rel = rel;
    c.lhs.push_back(ops[0]);
    c.rhs.assign(ops.begin() + 1, ops.end());
    if (clue_holds(c, sol)) return c;
  }
  return std::nullopt;
}

}  // namespace

ZebraInstance gen_zebra(const ZebraSpec& spec, std::size_t split, std::size_t index) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, {0x2EB7A, split, index}));
  const std::size_t m = spec.m;
  const std::size_t n = spec.n;
  ZebraInstance inst;
  inst.m = m;
  inst.n = n;
  inst.solution.assign(n, std::vector<int>(m));
  for (auto& row : inst.solution) {
    std::iota(row.begin(), row.end(), 0);
    for (std::size_t i = m; i > 1; --i) std::swap(row[i - 1], row[uniform_index(rng, i)]);
  }

  // Add true clues until the solution is the only one.
  std::vector<Clue> clues;
  for (;;) {
    if (auto c = propose_clue(rng, inst.solution, m, n)) {
      clues.push_back(*c);
      if (solve_zebra(clues, m, n, 2).size() == 1) break;
    }
  }
  // Drop clues in random order while uniqueness survives.
  std::vector<std::size_t> order(clues.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(rng, i)]);
  std::vector<std::uint8_t> keep(clues.size(), 1);
  for (std::size_t idx : order) {
    keep[idx] = 0;
    std::vector<Clue> trial;
    for (std::size_t i = 0; i < clues.size(); ++i) {
      if (keep[i]) trial.push_back(clues[i]);
    }
    if (solve_zebra(trial, m, n, 2).size() != 1) keep[idx] = 1;
  }
  for (std::size_t i = 0; i < clues.size(); ++i) {
    if (keep[i]) inst.clues.push_back(clues[i]);
  }
  for (std::size_t i = inst.clues.size(); i > 1; --i) std::swap(inst.clues[i - 1], inst.clues[uniform_index(rng, i)]);
  return inst;
}

std::vector<ZebraInstance> gen_zebra_split(const ZebraSpec& spec, std::size_t split) {
  const std::size_t count = split == 0 ? spec.n_train : spec.n_test;
  std::vector<ZebraInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_zebra(spec, split, i));
  return out;
}

std::string serialize_clues(std::span<const Clue> clues) {
  std::ostringstream os;
  bool first = true;
  for (const auto& c : clues) {
    if (!first) os << ' ';
    first = false;
    os << relation_token(c.rel) << " LHS";
    for (const auto& o : c.lhs) os << " c " << o.e << ' ' << o.a;
    os << " RHS";
    for (const auto& o : c.rhs) os << " c " << o.e << ' ' << o.a;
    os << " CLUE_END";
  }
  return os.str();
}

std::vector<std::string> solution_tokens(const ZebraAssignment& house) {
  const std::size_t n = house.size();
  const std::size_t m = n ? house[0].size() : 0;
  std::vector<std::string> out;
  for (std::size_t h = 0; h < m; ++h) {
    for (std::size_t e = 0; e < n; ++e) {
      for (std::size_t a = 0; a < m; ++a) {
        if (house[e][a] == static_cast<int>(h)) {
          out.push_back(std::to_string(e));
          out.push_back(std::to_string(h));
          out.push_back(std::to_string(a));
        }
      }
    }
  }
  return out;
}

std::string serialize_zebra(const ZebraInstance& inst) {
  std::string s = serialize_clues(inst.clues);
  s += " ";
  s += Vocab::kBos;
  for (const auto& t : solution_tokens(inst.solution)) {
    s += ' ';
    s += t;
  }
  return s;
}

namespace {

std::optional<int> digit(const std::string& tok) {
  if (tok.size() == 1 && tok[0] >= '0' && tok[0] <= '9') return tok[0] - '0';
  return std::nullopt;
}

}  // namespace

std::vector<Clue> parse_clues(std::span<const std::string> toks) {
  std::vector<Clue> clues;
  std::size_t i = 0;
  auto fail = [&](const std::string& why) {
    throw ValidationError("zebra clue parse error at token " + std::to_string(i) + ": " + why);
  };
  while (i < toks.size()) {
    const auto rel = parse_relation(toks[i]);
    if (!rel) fail("expected a relation, got '" + toks[i] + "'");
    Clue c;
    c.rel = *rel;
    ++i;
    if (i >= toks.size() || toks[i] != "LHS") fail("expected LHS");
    ++i;
    std::vector<Operand>* side = &c.lhs;
    for (;;) {
      if (i >= toks.size()) fail("unterminated clue");
      if (toks[i] == "CLUE_END") {
        ++i;
        break;
      }
      if (toks[i] == "RHS") {
        if (side == &c.rhs) fail("duplicate RHS");
        side = &c.rhs;
        ++i;
        continue;
      }
      if (toks[i] != "c" || i + 2 >= toks.size()) fail("expected 'c e a'");
      const auto e = digit(toks[i + 1]);
      const auto a = digit(toks[i + 2]);
      if (!e || !a) fail("operand digits expected");
      side->push_back(Operand{*e, *a});
      i += 3;
    }
    if (side != &c.rhs) fail("missing RHS");
    if (c.lhs.size() != 1 || c.lhs.size() + c.rhs.size() != arity(c.rel)) fail("wrong operand count");
    clues.push_back(std::move(c));
  }
  return clues;
}

std::optional<ZebraAssignment> parse_solution(std::span<const std::string> toks, std::size_t m, std::size_t n) {
  if (toks.size() != 3 * m * n) return std::nullopt;
  ZebraAssignment h(n, std::vector<int>(m, -1));
  std::vector<std::vector<std::uint8_t>> used(n, std::vector<std::uint8_t>(m, 0));
  for (std::size_t i = 0; i < toks.size(); i += 3) {
    const auto e = digit(toks[i]);
    const auto house = digit(toks[i + 1]);
    const auto a = digit(toks[i + 2]);
    if (!e || !house || !a) return std::nullopt;
    if (static_cast<std::size_t>(*e) >= n || static_cast<std::size_t>(*house) >= m ||
        static_cast<std::size_t>(*a) >= m) {
      return std::nullopt;
    }
    auto& slot = h[static_cast<std::size_t>(*e)][static_cast<std::size_t>(*a)];
    auto& taken = used[static_cast<std::size_t>(*e)][static_cast<std::size_t>(*house)];
    if (slot != -1 || taken) return std::nullopt;
    slot = *house;
    taken = 1;
  }
  return h;
}

ZebraInstance parse_zebra(std::string_view line, std::size_t m, std::size_t n) {
  auto toks = split_whitespace(line);
  if (!toks.empty() && toks.back() == Vocab::kEos) toks.pop_back();
  const auto bos = std::find(toks.begin(), toks.end(), std::string(Vocab::kBos));
  if (bos == toks.end()) {
    throw ValidationError("zebra record: missing <s>");
  }
  ZebraInstance inst;
  inst.m = m;
  inst.n = n;
  inst.clues = parse_clues(std::span<const std::string>(toks.data(), static_cast<std::size_t>(bos - toks.begin())));
  const auto sol = parse_solution(std::span<const std::string>(toks).subspan(static_cast<std::size_t>(bos - toks.begin()) + 1), m, n);
  if (!sol) {
    throw ValidationError("zebra record: malformed solution");
  }
  inst.solution = *sol;
  return inst;
}

Vocab zebra_vocab() {
  std::vector<std::string> content{"0", "1", "2", "3", "4", "5", "nbr", "left-of", "inbetween", "immediate-left",
                                   "ends", "!=", "=", "CLUE_END", "RHS", "LHS", "c"};
  return Vocab::with_sentinels(content);
}

ZebraScore verify_zebra(const ZebraInstance& inst, std::span<const std::string> predicted) {
  const auto sol = parse_solution(predicted, inst.m, inst.n);
  if (!sol) return {false, false};
  return {*sol == inst.solution, satisfies_all(inst.clues, *sol)};
}

}  // namespace ilm
