#include "smolpipe/vocab.hpp"

#include <algorithm>

#include "smolpipe/common.hpp"

namespace smolpipe {

std::string positional_token_name(std::size_t row, std::size_t col) {
  return "<row_" + std::to_string(row) + "_col_" + std::to_string(col) + ">";
}

Vocab Vocab::byte_fallback() {
  Vocab v;
  v.id_to_string_.reserve(260);
  for (int b = 0; b < 256; ++b) {
    v.id_to_string_.push_back(std::string(1, static_cast<char>(b)));
  }
  v.add_special(kSystemToken);
  v.add_special(kUserToken);
  v.add_special(kAssistantToken);
  v.add_special(kEndOfUtterance);
  return v;
}

bool Vocab::is_special(int id) const {
  return id >= 256 && static_cast<std::size_t>(id) < id_to_string_.size();
}

int Vocab::special_id(const std::string& name) const {
  auto it = special_to_id_.find(name);
  if (it == special_to_id_.end()) {
    throw InputError("unknown special token " + name);
  }
  return it->second;
}

const std::string& Vocab::token_string(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_string_.size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocab of " +
                     std::to_string(id_to_string_.size()));
  }
  return id_to_string_[static_cast<std::size_t>(id)];
}

void Vocab::add_special(const std::string& name) {
  if (special_to_id_.count(name)) {
    throw InputError("duplicate special token " + name);
  }
  int id = static_cast<int>(id_to_string_.size());
  id_to_string_.push_back(name);
  special_to_id_.emplace(name, id);
  specials_by_length_.push_back(name);
  std::stable_sort(specials_by_length_.begin(), specials_by_length_.end(),
                   [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    bool matched = false;
    if (text[pos] == '<') {  // every special starts with '<'
      for (const std::string& name : specials_by_length_) {
        if (text.compare(pos, name.size(), name) == 0) {
          ids.push_back(special_to_id_.at(name));
          pos += name.size();
          matched = true;
          break;
        }
      }
    }
    if (!matched) {
      ids.push_back(static_cast<unsigned char>(text[pos]));
      ++pos;
    }
  }
  return ids;
}

std::vector<int> Vocab::encode_bytes(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(static_cast<unsigned char>(c));
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int id : ids) out += token_string(id);
  return out;
}

Vocab extend_vocab(const Vocab& base, std::size_t max_rows, std::size_t max_cols) {
  if (max_rows < 1 || max_cols < 1 || max_rows > 8 || max_cols > 8) {
    throw GeometryError("positional grid must be within 1x1..8x8, got " +
                        std::to_string(max_rows) + "x" + std::to_string(max_cols));
  }
  Vocab v = base;
  for (std::size_t r = 1; r <= max_rows; ++r) {
    for (std::size_t c = 1; c <= max_cols; ++c) {
      v.add_special(positional_token_name(r, c));
    }
  }
  v.add_special(kFakeAroundImage);
  v.add_special(kImageToken);
  v.add_special(kGlobalImageToken);
  v.max_rows_ = max_rows;
  v.max_cols_ = max_cols;
  return v;
}

}  // namespace smolpipe
