#include "smolpipe/chat.hpp"

#include <fstream>
#include <sstream>

#include "smolpipe/common.hpp"

namespace smolpipe {

ChatTemplate ChatTemplate::defaults() {
  ChatTemplate t;
  t.system_conv = "You are a useful conversational assistant.";
  t.system_visual = "You are a visual agent and should provide concise answers.";
  t.img_intro = "Here is an image:";
  t.vid_intro = "Here are {N} frames sampled from a video:";
  t.outro = "Given this image/video, answer the following.";
  return t;
}

namespace {

std::string* section_field(ChatTemplate& t, const std::string& name) {
  if (name == "SYSTEM_CONV") return &t.system_conv;
  if (name == "SYSTEM_VISUAL") return &t.system_visual;
  if (name == "IMG_INTRO") return &t.img_intro;
  if (name == "VID_INTRO") return &t.vid_intro;
  if (name == "OUTRO") return &t.outro;
  return nullptr;
}

}  // namespace

ChatTemplate ChatTemplate::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot open chat template " + path.string());
  ChatTemplate t = defaults();
  std::string line;
  std::string* current = nullptr;
  std::string buffer;
  std::size_t lineno = 0;
  auto flush = [&]() {
    if (current) {
      while (!buffer.empty() && buffer.back() == '\n') buffer.pop_back();
      *current = buffer;
    }
    buffer.clear();
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() >= 2 && line.front() == '[' && line.back() == ']') {
      flush();
      std::string name = line.substr(1, line.size() - 2);
      current = section_field(t, name);
      if (!current) {
        throw InputError(path.string() + ":" + std::to_string(lineno) +
                         ": unknown template section [" + name + "]");
      }
      continue;
    }
    if (!current) {
      if (line.empty()) continue;
      throw InputError(path.string() + ":" + std::to_string(lineno) +
                       ": content before any section header");
    }
    buffer += line;
    buffer += '\n';
  }
  flush();
  return t;
}

void ChatTemplate::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw InputError("cannot write chat template " + path.string());
  os << "[SYSTEM_CONV]\n" << system_conv << "\n";
  os << "[SYSTEM_VISUAL]\n" << system_visual << "\n";
  os << "[IMG_INTRO]\n" << img_intro << "\n";
  os << "[VID_INTRO]\n" << vid_intro << "\n";
  os << "[OUTRO]\n" << outro << "\n";
  if (!os) throw InputError("write failed for " + path.string());
}

std::string ChatTemplate::video_intro_for(std::size_t n_frames) const {
  std::string out = vid_intro;
  const std::string key = "{N}";
  auto pos = out.find(key);
  if (pos != std::string::npos) {
    out.replace(pos, key.size(), std::to_string(n_frames));
  }
  return out;
}

namespace {

void append_block(RenderedBlock& block, int id) { block.ids.push_back(id); }

void append_placeholders(RenderedBlock& block, int image_id, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) {
    block.placeholders.push_back(block.ids.size());
    block.ids.push_back(image_id);
  }
}

}  // namespace

RenderedBlock render_image_block(const TileGrid& grid, PositionMode mode, const Vocab& vocab,
                                 std::size_t tokens_per_tile) {
  if (tokens_per_tile < 1) throw GeometryError("tokens_per_tile must be >= 1");
  if (grid.rows > vocab.max_rows() || grid.cols > vocab.max_cols()) {
    throw GeometryError("grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                        " exceeds vocab positional range " + std::to_string(vocab.max_rows()) +
                        "x" + std::to_string(vocab.max_cols()));
  }
  RenderedBlock block;
  int image_id = vocab.special_id(kImageToken);
  for (const Tile& tile : grid.tiles) {
    std::string marker = positional_token_name(tile.row + 1, tile.col + 1);
    if (mode == PositionMode::LearnedTokens) {
      append_block(block, vocab.special_id(marker));
    } else {
      for (int id : vocab.encode_bytes(marker)) append_block(block, id);
    }
    append_placeholders(block, image_id, tokens_per_tile);
  }
  append_block(block, vocab.special_id(kGlobalImageToken));
  append_placeholders(block, image_id, tokens_per_tile);
  return block;
}

RenderedBlock render_video_block(const FrameSet& fs, const Vocab& vocab, const ChatTemplate& tmpl,
                                 std::size_t tokens_per_frame) {
  if (fs.frames.empty()) throw InputError("cannot render an empty frame set");
  if (tokens_per_frame < 1) throw GeometryError("tokens_per_frame must be >= 1");
  RenderedBlock block;
  int image_id = vocab.special_id(kImageToken);
  for (int id : vocab.encode(tmpl.video_intro_for(fs.frames.size()))) append_block(block, id);
  for (std::size_t f = 0; f < fs.frames.size(); ++f) {
    for (int id : vocab.encode("\nFrame " + std::to_string(f + 1) + ": ")) append_block(block, id);
    append_placeholders(block, image_id, tokens_per_frame);
  }
  for (int id : vocab.encode("\n" + tmpl.outro)) append_block(block, id);
  return block;
}

Segment Segment::text_segment(std::string t) {
  Segment s;
  s.kind = Kind::Text;
  s.text = std::move(t);
  return s;
}

Segment Segment::image_segment(TileGrid g) {
  Segment s;
  s.kind = Kind::Image;
  s.grid = std::move(g);
  return s;
}

Segment Segment::video_segment(FrameSet f) {
  Segment s;
  s.kind = Kind::Video;
  s.frames = std::move(f);
  return s;
}

std::size_t MultimodalSequence::size() const {
  std::size_t n = 0;
  for (const RenderedTurn& t : turns) n += t.ids.size();
  return n;
}

std::vector<int> MultimodalSequence::ids() const {
  std::vector<int> out;
  out.reserve(size());
  for (const RenderedTurn& t : turns) out.insert(out.end(), t.ids.begin(), t.ids.end());
  return out;
}

std::vector<std::uint8_t> MultimodalSequence::loss_mask() const {
  std::vector<std::uint8_t> out;
  out.reserve(size());
  for (const RenderedTurn& t : turns) out.insert(out.end(), t.mask.begin(), t.mask.end());
  return out;
}

std::vector<std::size_t> MultimodalSequence::placeholder_positions() const {
  std::vector<std::size_t> out;
  std::size_t offset = 0;
  for (const RenderedTurn& t : turns) {
    for (std::size_t p : t.placeholders) out.push_back(offset + p);
    offset += t.ids.size();
  }
  return out;
}

namespace {

void append_ids(RenderedTurn& turn, const std::vector<int>& ids, bool masked) {
  turn.ids.insert(turn.ids.end(), ids.begin(), ids.end());
  turn.mask.insert(turn.mask.end(), ids.size(), masked ? 1 : 0);
}

void append_rendered_block(RenderedTurn& turn, const RenderedBlock& block) {
  std::size_t base = turn.ids.size();
  for (std::size_t p : block.placeholders) turn.placeholders.push_back(base + p);
  turn.ids.insert(turn.ids.end(), block.ids.begin(), block.ids.end());
  turn.mask.insert(turn.mask.end(), block.ids.size(), 0);
  turn.has_media = true;
}

}  // namespace

MultimodalSequence build_chat(const std::optional<std::string>& system,
                              const std::vector<TurnInput>& turns, const Vocab& vocab,
                              const ChatTemplate& tmpl, const RenderConfig& cfg) {
  if (turns.empty()) throw InputError("conversation has no turns");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    Role expected = (i % 2 == 0) ? Role::User : Role::Assistant;
    if (turns[i].role == Role::System) {
      throw InputError("system content must be passed separately, not as turn " + std::to_string(i));
    }
    if (turns[i].role != expected) {
      if (i == 0) throw InputError("conversation must start with a user turn");
      throw InputError("roles must alternate user/assistant; turn " + std::to_string(i) +
                       " breaks the order");
    }
  }

  MultimodalSequence seq;
  if (system) {
    RenderedTurn st;
    st.role = Role::System;
    append_ids(st, {vocab.special_id(kSystemToken)}, false);
    append_ids(st, vocab.encode(*system), false);
    append_ids(st, {vocab.special_id(kEndOfUtterance)}, false);
    seq.turns.push_back(std::move(st));
    seq.has_system = true;
  }

  for (const TurnInput& input : turns) {
    bool assistant = input.role == Role::Assistant;
    RenderedTurn turn;
    turn.role = input.role;
    append_ids(turn, {vocab.special_id(assistant ? kAssistantToken : kUserToken)}, false);
    for (const Segment& seg : input.segments) {
      switch (seg.kind) {
        case Segment::Kind::Text:
          append_ids(turn, vocab.encode(seg.text), assistant);
          break;
        case Segment::Kind::Image: {
          if (assistant) throw InputError("media segments are not allowed in assistant turns");
          append_ids(turn, vocab.encode(tmpl.img_intro), false);
          append_rendered_block(turn, render_image_block(seg.grid, cfg.mode, vocab,
                                                         cfg.tokens_per_tile));
          append_ids(turn, vocab.encode("\n" + tmpl.outro), false);
          break;
        }
        case Segment::Kind::Video: {
          if (assistant) throw InputError("media segments are not allowed in assistant turns");
          append_rendered_block(turn,
                                render_video_block(seg.frames, vocab, tmpl, cfg.tokens_per_frame));
          break;
        }
      }
    }
    append_ids(turn, {vocab.special_id(kEndOfUtterance)}, assistant);
    seq.turns.push_back(std::move(turn));
  }
  return seq;
}

MultimodalSequence truncate_to_context(const MultimodalSequence& seq, std::size_t limit) {
  if (limit < 1) throw GeometryError("context limit must be >= 1");
  MultimodalSequence out = seq;
  while (out.size() > limit) {
    std::size_t first = out.has_system ? 1 : 0;
    if (first >= out.turns.size()) {
      throw ContextOverflowError("system prompt alone exceeds context limit of " +
                                 std::to_string(limit));
    }
    // drop the oldest exchange whole: a user turn plus its assistant reply
    std::size_t drop = 1;
    if (out.turns[first].role == Role::User && first + 1 < out.turns.size() &&
        out.turns[first + 1].role == Role::Assistant) {
      drop = 2;
    }
    if (out.turns.size() - drop == first) {
      throw ContextOverflowError("a single exchange of " + std::to_string(out.size()) +
                                 " tokens exceeds context limit of " + std::to_string(limit));
    }
    out.turns.erase(out.turns.begin() + static_cast<std::ptrdiff_t>(first),
                    out.turns.begin() + static_cast<std::ptrdiff_t>(first + drop));
  }
  return out;
}

}  // namespace smolpipe
