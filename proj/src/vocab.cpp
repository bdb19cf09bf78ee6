#include "ilm/vocab.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace ilm {

std::vector<std::string> split_whitespace(std::string_view line) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) {
      ++i;
    }
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) {
      ++j;
    }
    if (j > i) {
      out.emplace_back(line.substr(i, j - i));
    }
    i = j;
  }
  return out;
}

Vocab::Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) {
      throw ValidationError("vocab: empty token at id " + std::to_string(i));
    }
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) {
      throw ValidationError("vocab: duplicate token '" + tokens_[i] + "'");
    }
  }
  auto require = [&](std::string_view name) {
    auto found = find(name);
    if (!found) {
      throw ValidationError("vocab: missing sentinel " + std::string(name));
    }
    return *found;
  };
  pad_ = require(kPad);
  stp_ = require(kStop);
  bos_ = require(kBos);
  eos_ = require(kEos);
  mask_ = require(kMask);
}

Vocab Vocab::with_sentinels(std::span<const std::string> content) {
  std::vector<std::string> tokens{std::string(kPad), std::string(kStop), std::string(kBos),
                                  std::string(kEos), std::string(kMask)};
  tokens.insert(tokens.end(), content.begin(), content.end());
  return Vocab(std::move(tokens));
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw IoError("cannot open vocab file " + path.string());
  }
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    tokens.push_back(line);
  }
  return Vocab(std::move(tokens));
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) {
    throw IoError("cannot write vocab file " + path.string());
  }
  for (const auto& t : tokens_) {
    out << t << '\n';
  }
}

std::optional<TokenId> Vocab::find(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) {
    return std::nullopt;
  }
  return it->second;
}

TokenId Vocab::id(std::string_view token) const {
  auto found = find(token);
  if (!found) {
    throw UnknownTokenError(std::string(token), "");
  }
  return *found;
}

const std::string& Vocab::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw ValidationError("token id out of range: " + std::to_string(id));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocab::is_sentinel(TokenId id) const {
  return id == pad_ || id == stp_ || id == bos_ || id == eos_ || id == mask_;
}

std::vector<TokenId> Vocab::encode(std::span<const std::string> words) const {
  std::vector<TokenId> ids;
  ids.reserve(words.size());
  for (const auto& w : words) {
    ids.push_back(id(w));
  }
  return ids;
}

std::vector<TokenId> Vocab::encode_line(std::string_view line) const {
  const auto words = split_whitespace(line);
  return encode(words);
}

std::string Vocab::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) {
      out += ' ';
    }
    out += token(ids[i]);
  }
  return out;
}

}  // namespace ilm
