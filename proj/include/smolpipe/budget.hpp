#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "smolpipe/common.hpp"

namespace smolpipe {

struct PipelineConfig {
  std::uint64_t encoder_params = 0;
  std::uint64_t lm_params = 0;
  std::size_t tile_size = 512;
  std::size_t patch = 16;
  std::size_t shuffle_r = 4;
  std::size_t longest_edge_cap = 1920;
  std::size_t context_limit = 8192;
  std::size_t frames_per_video = 8;
  std::size_t tokens_per_frame = 0;  // 0: default to the single-tile count
  std::size_t n_layers_lm = 0;
  std::size_t n_heads = 0;
  std::size_t head_dim = 0;

  void validate() const;
  std::size_t tokens_per_tile() const;
  std::size_t effective_tokens_per_frame() const;

  static PipelineConfig from_kv(const KeyValueFile& kv);
  static PipelineConfig load(const std::filesystem::path& path);
};

struct ImageTokenCount {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t tiles = 0;           // excludes the global view
  std::size_t visual_tokens = 0;   // (tiles+1) * tokens_per_tile
  std::size_t marker_tokens = 0;   // positional markers + global marker
  std::size_t total() const { return visual_tokens + marker_tokens; }
};

// Token accounting for one image pushed through cap -> tiling -> shuffle,
// mirroring the renderer's learned-token layout.
ImageTokenCount image_token_count(const PipelineConfig& cfg, std::size_t height,
                                  std::size_t width);

// Placeholder tokens for one sampled video (no tiling, no markers).
std::size_t video_token_count(const PipelineConfig& cfg);

// 2 * n_layers * n_heads * head_dim * seq_len * batch * bytes_per_scalar.
std::uint64_t kv_cache_bytes(const PipelineConfig& cfg, std::size_t seq_len, std::size_t batch,
                             std::size_t bytes_per_scalar);

enum class AllocationRegime { EncoderDominant, Balanced, LmDominant };

struct AllocationReport {
  double ratio = 0.0;  // encoder / (encoder + lm)
  AllocationRegime regime = AllocationRegime::Balanced;
  std::string label;
};

// Labels the encoder share of total parameters: above 0.5 encoder-dominant,
// below 0.2 lm-dominant, balanced between.
AllocationReport allocation_report(std::uint64_t encoder_params, std::uint64_t lm_params);

struct MixtureSpec {
  std::vector<std::pair<std::string, double>> fractions;  // sum to 1
  std::uint64_t seed = 0;

  void validate() const;
};

struct MixturePlan {
  std::vector<std::string> sequence;
  std::map<std::string, std::size_t> counts;
  bool rare_warning = false;  // n too small for the smallest positive fraction
};

// Deterministic largest-deficit schedule: at each prefix the realized counts
// track n*fraction within the number of categories. Equal deficits break by
// a seed-shuffled priority.
MixturePlan plan_mixture(const MixtureSpec& spec, std::size_t n_samples);

struct Workload {
  std::size_t image_height = 1024;
  std::size_t image_width = 2048;
  std::size_t text_tokens = 256;
  std::size_t batch = 1;
  std::size_t bytes_per_scalar = 2;
};

struct BudgetReport {
  std::string name;
  ImageTokenCount image;
  std::size_t video_tokens = 0;
  double context_occupancy = 0.0;
  bool over_context = false;
  std::uint64_t kv_bytes = 0;
  std::uint64_t param_bytes = 0;
  double encoder_lm_ratio = 0.0;
  std::string regime;
  double est_ram_gb = 0.0;
};

BudgetReport budget_report(const std::string& name, const PipelineConfig& cfg,
                           const Workload& load);

std::vector<BudgetReport> compare_configs(
    const std::vector<std::pair<std::string, PipelineConfig>>& configs, const Workload& load);

void write_budget_csv(std::ostream& os, const std::vector<BudgetReport>& rows);

}  // namespace smolpipe
