#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace smolpipe {

inline constexpr const char* kSystemToken = "<|system|>";
inline constexpr const char* kUserToken = "<|user|>";
inline constexpr const char* kAssistantToken = "<|assistant|>";
inline constexpr const char* kEndOfUtterance = "<end_of_utterance>";
inline constexpr const char* kImageToken = "<image>";
inline constexpr const char* kGlobalImageToken = "<global-img>";
inline constexpr const char* kFakeAroundImage = "<fake_token_around_image>";

std::string positional_token_name(std::size_t row, std::size_t col);  // 1-based

// Byte-level fallback vocabulary: ids 0..255 are raw bytes, everything above
// is a named special token. Ids are dense and assigned in registration order.
class Vocab {
 public:
  // Bytes plus role markers and end-of-utterance.
  static Vocab byte_fallback();

  std::size_t size() const { return id_to_string_.size(); }
  bool is_special(int id) const;
  bool has_special(const std::string& name) const { return special_to_id_.count(name) != 0; }
  int special_id(const std::string& name) const;
  const std::string& token_string(int id) const;

  void add_special(const std::string& name);  // rejects duplicates

  // Longest-match special scan with byte fallback between matches.
  std::vector<int> encode(const std::string& text) const;
  // Byte fallback only; used for string-mode positional markers.
  std::vector<int> encode_bytes(const std::string& text) const;
  std::string decode(const std::vector<int>& ids) const;

  std::size_t max_rows() const { return max_rows_; }
  std::size_t max_cols() const { return max_cols_; }

 private:
  friend Vocab extend_vocab(const Vocab& base, std::size_t max_rows, std::size_t max_cols);

  std::vector<std::string> id_to_string_;
  std::unordered_map<std::string, int> special_to_id_;
  std::vector<std::string> specials_by_length_;  // longest first, for encode
  std::size_t max_rows_ = 0;
  std::size_t max_cols_ = 0;
};

// Adds max_rows*max_cols positional tokens (sorted by row, then column) plus
// the media specials. Grids are capped at 8x8.
Vocab extend_vocab(const Vocab& base, std::size_t max_rows, std::size_t max_cols);

}  // namespace smolpipe
