#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ilm/common.hpp"

namespace ilm {

/// Closed token vocabulary with the five reserved sentinels. Ids are dense
/// and equal to the line number in the vocab file.
class Vocab {
 public:
  static constexpr std::string_view kStop = "<stp>";
  static constexpr std::string_view kBos = "<s>";
  static constexpr std::string_view kEos = "</s>";
  static constexpr std::string_view kMask = "<mask>";
  static constexpr std::string_view kPad = "<pad>";

  Vocab() = default;
  explicit Vocab(std::vector<std::string> tokens);

  /// Sentinels first (pad, stp, bos, eos, mask), then `content` in order.
  static Vocab with_sentinels(std::span<const std::string> content);
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::optional<TokenId> find(std::string_view token) const;
  /// Throws UnknownTokenError; no <unk> fallback.
  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;

  TokenId stp() const { return stp_; }
  TokenId bos() const { return bos_; }
  TokenId eos() const { return eos_; }
  TokenId mask() const { return mask_; }
  TokenId pad() const { return pad_; }
  bool is_sentinel(TokenId id) const;

  std::vector<TokenId> encode(std::span<const std::string> words) const;
  std::vector<TokenId> encode_line(std::string_view line) const;
  std::string decode(std::span<const TokenId> ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId stp_ = -1;
  TokenId bos_ = -1;
  TokenId eos_ = -1;
  TokenId mask_ = -1;
  TokenId pad_ = -1;
};

std::vector<std::string> split_whitespace(std::string_view line);

}  // namespace ilm
