#include "smolpipe/synthetic.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

#include "smolpipe/common.hpp"

namespace smolpipe {

namespace {

using nlohmann::json;

struct ColorDef {
  const char* name;
  std::array<std::uint8_t, 3> rgb;
};

constexpr std::array<ColorDef, 4> kColors = {{{"red", {200, 40, 40}},
                                              {"green", {40, 170, 40}},
                                              {"blue", {40, 40, 200}},
                                              {"yellow", {210, 190, 40}}}};
constexpr std::array<const char*, 4> kShapes = {"square", "circle", "triangle", "cross"};
constexpr std::array<const char*, 2> kSizes = {"small", "large"};

void fill(RawImage& img, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
  }
}

void draw_shape(RawImage& img, const std::string& shape, double cx, double cy, double radius,
                const std::array<std::uint8_t, 3>& rgb) {
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      double dx = static_cast<double>(x) - cx;
      double dy = static_cast<double>(y) - cy;
      bool inside = false;
      if (shape == "square") {
        inside = std::abs(dx) <= radius && std::abs(dy) <= radius;
      } else if (shape == "circle") {
        inside = dx * dx + dy * dy <= radius * radius;
      } else if (shape == "triangle") {
        inside = dy >= -radius && dy <= radius && std::abs(dx) <= (dy + radius) / 2.0;
      } else if (shape == "cross") {
        double arm = radius / 3.0;
        inside = (std::abs(dx) <= arm && std::abs(dy) <= radius) ||
                 (std::abs(dy) <= arm && std::abs(dx) <= radius);
      }
      if (inside) {
        img.at(y, x, 0) = rgb[0];
        img.at(y, x, 1) = rgb[1];
        img.at(y, x, 2) = rgb[2];
      }
    }
  }
}

ConversationRecord caption_record(const std::string& id, const std::string& image_path,
                                  const std::string& question, const std::string& caption) {
  ConversationRecord rec;
  rec.id = id;
  RecordTurn user;
  user.role = Role::User;
  user.segments.push_back({Segment::Kind::Image, image_path});
  user.segments.push_back({Segment::Kind::Text, question});
  RecordTurn assistant;
  assistant.role = Role::Assistant;
  assistant.segments.push_back({Segment::Kind::Text, caption});
  rec.turns = {std::move(user), std::move(assistant)};
  return rec;
}

}  // namespace

void generate_captioning_dataset(const std::filesystem::path& dir, std::size_t image_size) {
  std::filesystem::create_directories(dir / "images");
  std::vector<ConversationRecord> records;
  double c = static_cast<double>(image_size) / 2.0 - 0.5;
  for (const char* size : kSizes) {
    for (const ColorDef& color : kColors) {
      for (const char* shape : kShapes) {
        std::string id = std::string("cap_") + size + "_" + color.name + "_" + shape;
        RawImage img = make_image(image_size, image_size);
        fill(img, 245, 245, 245);
        double radius = (std::string(size) == "small") ? image_size * 0.18 : image_size * 0.38;
        draw_shape(img, shape, c, c, radius, color.rgb);
        std::string rel = "images/" + id + ".ppm";
        write_ppm(img, dir / rel);
        std::string caption = std::string("a ") + size + " " + color.name + " " + shape;
        records.push_back(caption_record(id, rel, "What is shown?", caption));
      }
    }
  }
  DatasetInfo info;
  info.task = "captioning";
  info.seed = 0;
  info.count = records.size();
  info.image_size = image_size;
  write_dataset(dir, info, records);
}

void generate_temporal_dataset(const std::filesystem::path& dir, std::uint64_t seed,
                               std::size_t count, std::size_t image_size, std::size_t frames) {
  std::filesystem::create_directories(dir);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> base_dist(64, 191);
  std::uniform_int_distribution<int> slope_dist(4, 8);  // doubled to keep offsets integral
  std::vector<ConversationRecord> records;
  for (std::size_t i = 0; i < count; ++i) {
    int direction = (i % 2 == 0) ? 1 : -1;  // balanced classes
    int base = base_dist(rng);
    int slope = slope_dist(rng) * 2;
    std::string label = direction > 0 ? "brightening" : "dimming";
    std::string id = "vid_" + std::to_string(i) + "_" + label;
    std::filesystem::path vdir = dir / "videos" / id;
    std::filesystem::create_directories(vdir);
    double mid = (static_cast<double>(frames) - 1.0) / 2.0;
    for (std::size_t f = 0; f < frames; ++f) {
      double offset = (static_cast<double>(f) - mid) * slope * direction;
      auto v = static_cast<std::uint8_t>(base + static_cast<int>(std::lround(offset)));
      RawImage frame = make_image(image_size, image_size, v);
      char name[32];
      std::snprintf(name, sizeof(name), "frame_%03zu.ppm", f);
      write_ppm(frame, vdir / name);
    }
    KeyValueFile vmanifest;
    vmanifest.set_double("fps", 1.0);
    vmanifest.set_int("duration", static_cast<std::int64_t>(frames));
    vmanifest.write(vdir / "manifest.txt");

    ConversationRecord rec;
    rec.id = id;
    RecordTurn user;
    user.role = Role::User;
    user.segments.push_back({Segment::Kind::Video, "videos/" + id});
    user.segments.push_back({Segment::Kind::Text, "Is the video brightening or dimming?"});
    RecordTurn assistant;
    assistant.role = Role::Assistant;
    assistant.segments.push_back({Segment::Kind::Text, label});
    rec.turns = {std::move(user), std::move(assistant)};
    records.push_back(std::move(rec));
  }
  DatasetInfo info;
  info.task = "temporal";
  info.seed = seed;
  info.count = count;
  info.image_size = image_size;
  info.frames = frames;
  write_dataset(dir, info, records);
}

void generate_ocr_grid_dataset(const std::filesystem::path& dir, std::uint64_t seed,
                               std::size_t count, std::size_t tile_size) {
  std::filesystem::create_directories(dir / "images");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> cell_dist(0, 3);
  std::vector<ConversationRecord> records;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t cell = cell_dist(rng);
    std::size_t row = cell / 2, col = cell % 2;
    std::string id = "grid_" + std::to_string(i) + "_r" + std::to_string(row + 1) + "c" +
                     std::to_string(col + 1);
    RawImage img = make_image(2 * tile_size, 2 * tile_size);
    fill(img, 40, 40, 40);
    std::size_t inset = tile_size / 8;
    for (std::size_t y = row * tile_size + inset; y < (row + 1) * tile_size - inset; ++y) {
      for (std::size_t x = col * tile_size + inset; x < (col + 1) * tile_size - inset; ++x) {
        img.at(y, x, 0) = 250;
        img.at(y, x, 1) = 250;
        img.at(y, x, 2) = 250;
      }
    }
    std::string rel = "images/" + id + ".ppm";
    write_ppm(img, dir / rel);
    std::string caption = "row " + std::to_string(row + 1) + " col " + std::to_string(col + 1);
    records.push_back(caption_record(id, rel, "Which cell is highlighted?", caption));
  }
  DatasetInfo info;
  info.task = "ocr-grid";
  info.seed = seed;
  info.count = count;
  info.image_size = 2 * tile_size;
  write_dataset(dir, info, records);
}

// ---- dataset files ----

DatasetInfo read_dataset_info(const std::filesystem::path& dir) {
  KeyValueFile kv = KeyValueFile::parse(dir / "manifest.txt");
  DatasetInfo info;
  info.task = kv.get("task");
  info.seed = static_cast<std::uint64_t>(kv.get_int_or("seed", 0));
  info.count = static_cast<std::size_t>(kv.get_int("count"));
  info.image_size = static_cast<std::size_t>(kv.get_int_or("image_size", 32));
  info.frames = static_cast<std::size_t>(kv.get_int_or("frames", 8));
  return info;
}

void write_dataset(const std::filesystem::path& dir, const DatasetInfo& info,
                   const std::vector<ConversationRecord>& records) {
  std::filesystem::create_directories(dir);
  KeyValueFile kv;
  kv.set("task", info.task);
  kv.set_int("seed", static_cast<std::int64_t>(info.seed));
  kv.set_int("count", static_cast<std::int64_t>(records.size()));
  kv.set_int("image_size", static_cast<std::int64_t>(info.image_size));
  kv.set_int("frames", static_cast<std::int64_t>(info.frames));
  kv.write(dir / "manifest.txt");

  std::ofstream os(dir / "conversations.jsonl");
  if (!os) throw InputError("cannot write " + (dir / "conversations.jsonl").string());
  for (const ConversationRecord& rec : records) {
    json turns = json::array();
    for (const RecordTurn& turn : rec.turns) {
      json segs = json::array();
      for (const RecordSegment& seg : turn.segments) {
        switch (seg.kind) {
          case Segment::Kind::Text: segs.push_back({{"text", seg.value}}); break;
          case Segment::Kind::Image: segs.push_back({{"image", seg.value}}); break;
          case Segment::Kind::Video: segs.push_back({{"video", seg.value}}); break;
        }
      }
      turns.push_back({{"role", turn.role == Role::Assistant ? "assistant" : "user"},
                       {"segments", segs}});
    }
    json line = {{"id", rec.id}, {"turns", turns}};
    if (rec.system) line["system"] = *rec.system;
    os << line.dump() << "\n";
  }
}

std::vector<ConversationRecord> load_conversations(const std::filesystem::path& dir) {
  std::ifstream is(dir / "conversations.jsonl");
  if (!is) throw InputError("cannot open " + (dir / "conversations.jsonl").string());
  std::vector<ConversationRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw InputError((dir / "conversations.jsonl").string() + ":" + std::to_string(lineno) +
                       ": " + e.what());
    }
    ConversationRecord rec;
    rec.id = j.value("id", "line" + std::to_string(lineno));
    if (j.contains("system") && !j["system"].is_null()) {
      rec.system = j["system"].get<std::string>();
    }
    if (!j.contains("turns") || !j["turns"].is_array()) {
      throw InputError(rec.id + ": missing turns array");
    }
    for (const json& jt : j["turns"]) {
      RecordTurn turn;
      std::string role = jt.value("role", "");
      if (role == "user") {
        turn.role = Role::User;
      } else if (role == "assistant") {
        turn.role = Role::Assistant;
      } else {
        throw InputError(rec.id + ": bad role '" + role + "'");
      }
      for (const json& js : jt["segments"]) {
        if (js.contains("text")) {
          turn.segments.push_back({Segment::Kind::Text, js["text"].get<std::string>()});
        } else if (js.contains("image")) {
          turn.segments.push_back({Segment::Kind::Image, js["image"].get<std::string>()});
        } else if (js.contains("video")) {
          turn.segments.push_back({Segment::Kind::Video, js["video"].get<std::string>()});
        } else {
          throw InputError(rec.id + ": segment without text/image/video key");
        }
      }
      rec.turns.push_back(std::move(turn));
    }
    records.push_back(std::move(rec));
  }
  return records;
}

// ---- sample preparation ----

TrainSample prepare_sample(const ConversationRecord& rec, const std::filesystem::path& dir,
                           const Vocab& vocab, const ChatTemplate& tmpl,
                           const PrepareOptions& opts) {
  std::vector<TurnInput> turns;
  std::vector<Segment> media;
  for (const RecordTurn& rt : rec.turns) {
    TurnInput input;
    input.role = rt.role;
    for (const RecordSegment& rs : rt.segments) {
      switch (rs.kind) {
        case Segment::Kind::Text:
          input.segments.push_back(Segment::text_segment(rs.value));
          break;
        case Segment::Kind::Image: {
          RawImage img = read_ppm(dir / rs.value);
          if (opts.longest_edge_cap > 0) {
            img = resize_longest_edge(img, opts.longest_edge_cap);
          }
          Segment seg = Segment::image_segment(split_into_tiles(img, opts.tile_size));
          media.push_back(seg);
          input.segments.push_back(std::move(seg));
          break;
        }
        case Segment::Kind::Video: {
          FrameSource src = open_frame_dir(dir / rs.value);
          FrameSet fs = sample_frames(src, opts.frames_per_video, opts.tile_size);
          fs = average_frames(fs, opts.frame_average);
          Segment seg = Segment::video_segment(std::move(fs));
          media.push_back(seg);
          input.segments.push_back(std::move(seg));
          break;
        }
      }
    }
    turns.push_back(std::move(input));
  }
  MultimodalSequence seq = build_chat(rec.system, turns, vocab, tmpl, opts.render);
  return TrainSample::from_sequence(rec.id, seq, std::move(media));
}

std::vector<TrainSample> prepare_dataset(const std::filesystem::path& dir, const Vocab& vocab,
                                         const ChatTemplate& tmpl, const PrepareOptions& opts) {
  std::vector<TrainSample> samples;
  for (const ConversationRecord& rec : load_conversations(dir)) {
    samples.push_back(prepare_sample(rec, dir, vocab, tmpl, opts));
  }
  return samples;
}

// ---- evaluation ----

TrainSample prompt_only(const TrainSample& full, const Vocab& vocab) {
  int marker = vocab.special_id(kAssistantToken);
  std::size_t cut = full.ids.size();
  for (std::size_t i = full.ids.size(); i-- > 0;) {
    if (full.ids[i] == marker) {
      cut = i + 1;
      break;
    }
  }
  if (cut == full.ids.size() && (full.ids.empty() || full.ids.back() != marker)) {
    throw InputError("sample " + full.sample_id + " has no assistant turn to prompt");
  }
  TrainSample prompt;
  prompt.sample_id = full.sample_id;
  prompt.ids.assign(full.ids.begin(), full.ids.begin() + static_cast<std::ptrdiff_t>(cut));
  prompt.mask.assign(cut, 0);
  for (std::size_t p : full.placeholders) {
    if (p < cut) prompt.placeholders.push_back(p);
  }
  prompt.media = full.media;
  return prompt;
}

std::string target_completion(const TrainSample& full, const Vocab& vocab) {
  int marker = vocab.special_id(kAssistantToken);
  int eou = vocab.special_id(kEndOfUtterance);
  std::size_t start = full.ids.size();
  for (std::size_t i = full.ids.size(); i-- > 0;) {
    if (full.ids[i] == marker) {
      start = i + 1;
      break;
    }
  }
  std::vector<int> content;
  for (std::size_t i = start; i < full.ids.size() && full.ids[i] != eou; ++i) {
    content.push_back(full.ids[i]);
  }
  return vocab.decode(content);
}

EvalResult evaluate_captions(const ToyVLM& model, const std::vector<TrainSample>& samples,
                             const Vocab& vocab, std::size_t max_new) {
  int eou = vocab.special_id(kEndOfUtterance);
  EvalResult result;
  for (const TrainSample& sample : samples) {
    TrainSample prompt = prompt_only(sample, vocab);
    GenerationResult gen = generate(model, prompt, eou, max_new);
    std::vector<int> content = gen.new_ids;
    if (!content.empty() && content.back() == eou) content.pop_back();
    if (vocab.decode(content) == target_completion(sample, vocab)) {
      ++result.correct;
    }
    ++result.total;
  }
  return result;
}

}  // namespace smolpipe
