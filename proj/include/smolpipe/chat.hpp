#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "smolpipe/image.hpp"
#include "smolpipe/vocab.hpp"

namespace smolpipe {

// Fixed marker sentences; {N} in the video intro is substituted at render time.
struct ChatTemplate {
  std::string system_conv;
  std::string system_visual;
  std::string img_intro;
  std::string vid_intro;
  std::string outro;

  static ChatTemplate defaults();
  // Plain text file with [SYSTEM_CONV] / [SYSTEM_VISUAL] / [IMG_INTRO] /
  // [VID_INTRO] / [OUTRO] section headers; absent sections keep defaults.
  static ChatTemplate load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::string video_intro_for(std::size_t n_frames) const;
};

enum class PositionMode { LearnedTokens, StringTokens };

struct RenderedBlock {
  std::vector<int> ids;
  std::vector<std::size_t> placeholders;  // offsets of <image> ids within this block
};

// Per tile in raster order: positional marker (single learned token, or its
// byte spelling in string mode) then tokens_per_tile <image> placeholders;
// then <global-img> with the global view's placeholders.
RenderedBlock render_image_block(const TileGrid& grid, PositionMode mode, const Vocab& vocab,
                                 std::size_t tokens_per_tile);

// Intro sentence with the frame count substituted, then per frame an index
// label and its placeholder run, then the outro sentence.
RenderedBlock render_video_block(const FrameSet& fs, const Vocab& vocab, const ChatTemplate& tmpl,
                                 std::size_t tokens_per_frame);

enum class Role { System, User, Assistant };

struct Segment {
  enum class Kind { Text, Image, Video };
  Kind kind = Kind::Text;
  std::string text;
  TileGrid grid;    // Kind::Image
  FrameSet frames;  // Kind::Video

  static Segment text_segment(std::string t);
  static Segment image_segment(TileGrid g);
  static Segment video_segment(FrameSet f);
};

struct TurnInput {
  Role role = Role::User;
  std::vector<Segment> segments;
};

struct RenderConfig {
  PositionMode mode = PositionMode::LearnedTokens;
  std::size_t tokens_per_tile = 0;
  std::size_t tokens_per_frame = 0;
};

struct RenderedTurn {
  Role role = Role::User;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;            // aligned with ids
  std::vector<std::size_t> placeholders;     // offsets within this turn
  bool has_media = false;
};

struct MultimodalSequence {
  std::vector<RenderedTurn> turns;  // turns[0] is the system turn when present
  bool has_system = false;

  std::size_t size() const;
  std::vector<int> ids() const;
  std::vector<std::uint8_t> loss_mask() const;
  std::vector<std::size_t> placeholder_positions() const;  // offsets into ids()
};

// Renders [system?] then alternating user/assistant turns, each as role
// marker + content + end-of-utterance. The loss mask is true exactly on
// assistant content and the assistant end-of-utterance.
MultimodalSequence build_chat(const std::optional<std::string>& system,
                              const std::vector<TurnInput>& turns, const Vocab& vocab,
                              const ChatTemplate& tmpl, const RenderConfig& cfg);

// Drops oldest user/assistant exchanges whole until the stream fits; the
// system turn is always retained. Throws ContextOverflowError when the
// remaining turns still exceed the limit.
MultimodalSequence truncate_to_context(const MultimodalSequence& seq, std::size_t limit);

}  // namespace smolpipe
