#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace qp {

// Lowercasing whitespace/punctuation tokenizer shared by every text surface
// in the pipeline (subtitles, descriptions, action text).
std::vector<std::string> tokenize(const std::string& text);

// Canonical surface form: lowercased tokens joined by single spaces.
std::string normalize(const std::string& text);

std::string join_tokens(const std::vector<std::string>& tokens);

// Token <-> id maps with a fixed reserved block. Reserved ids are stable
// across save/load; everything else is sorted lexicographically so builds
// are order-independent.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kSep = 4;
  static constexpr int kActionTag = 5;
  static constexpr int kDescTag = 6;
  static constexpr int kReservedCount = 7;

  Vocabulary();

  static Vocabulary build(const std::vector<std::string>& texts);

  int id(const std::string& token) const;  // kUnk when missing
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  void add(const std::string& token);
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace qp
