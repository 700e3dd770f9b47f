#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "smolpipe/chat.hpp"
#include "smolpipe/model.hpp"
#include "smolpipe/vocab.hpp"

namespace smolpipe {

// Procedural datasets: everything derives from the seed, no external data.
// On disk a dataset is a directory with manifest.txt, conversations.jsonl
// (one conversation per line), images/*.ppm and videos/<id>/ frame dirs.

struct DatasetInfo {
  std::string task;
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::size_t image_size = 32;
  std::size_t frames = 8;
};

// 32 fixed combinations of {small, large} x 4 colors x 4 shapes with the
// caption "a <size> <color> <shape>".
void generate_captioning_dataset(const std::filesystem::path& dir, std::size_t image_size = 32);

// Videos of uniformly brightening or dimming constant frames; the per-video
// mean frame is identical for both classes, so full temporal averaging
// destroys the label signal.
void generate_temporal_dataset(const std::filesystem::path& dir, std::uint64_t seed,
                               std::size_t count, std::size_t image_size = 32,
                               std::size_t frames = 8);

// 2x2 tile grid with one highlighted cell; caption "row R col C".
void generate_ocr_grid_dataset(const std::filesystem::path& dir, std::uint64_t seed,
                               std::size_t count, std::size_t tile_size = 32);

struct RecordSegment {
  Segment::Kind kind = Segment::Kind::Text;
  std::string value;  // text content, image path, or video directory
};

struct RecordTurn {
  Role role = Role::User;
  std::vector<RecordSegment> segments;
};

struct ConversationRecord {
  std::string id;
  std::optional<std::string> system;
  std::vector<RecordTurn> turns;
};

DatasetInfo read_dataset_info(const std::filesystem::path& dir);
std::vector<ConversationRecord> load_conversations(const std::filesystem::path& dir);
void write_dataset(const std::filesystem::path& dir, const DatasetInfo& info,
                   const std::vector<ConversationRecord>& records);

struct PrepareOptions {
  std::size_t tile_size = 32;
  std::size_t longest_edge_cap = 0;  // 0: no cap
  std::size_t frames_per_video = 8;
  std::size_t frame_average = 1;
  RenderConfig render;
};

TrainSample prepare_sample(const ConversationRecord& rec, const std::filesystem::path& dir,
                           const Vocab& vocab, const ChatTemplate& tmpl,
                           const PrepareOptions& opts);
std::vector<TrainSample> prepare_dataset(const std::filesystem::path& dir, const Vocab& vocab,
                                         const ChatTemplate& tmpl, const PrepareOptions& opts);

// The sample cut after its final assistant role marker, ready for decoding.
TrainSample prompt_only(const TrainSample& full, const Vocab& vocab);
// The assistant text the model should produce (without end-of-utterance).
std::string target_completion(const TrainSample& full, const Vocab& vocab);

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

// Greedy-decodes every sample's prompt and scores exact caption matches.
EvalResult evaluate_captions(const ToyVLM& model, const std::vector<TrainSample>& samples,
                             const Vocab& vocab, std::size_t max_new = 64);

}  // namespace smolpipe
