#include "smolpipe/budget.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "smolpipe/image.hpp"

namespace smolpipe {

void PipelineConfig::validate() const {
  if (encoder_params < 1 || lm_params < 1) {
    throw GeometryError("parameter counts must be positive");
  }
  if (tile_size < 1 || patch < 1 || tile_size % patch != 0) {
    throw GeometryError("tile_size " + std::to_string(tile_size) + " not divisible by patch " +
                        std::to_string(patch));
  }
  if (shuffle_r < 1 || (tile_size / patch) % shuffle_r != 0) {
    throw GeometryError("patch grid not divisible by shuffle ratio " + std::to_string(shuffle_r));
  }
  if (longest_edge_cap < tile_size) {
    throw GeometryError("longest_edge_cap " + std::to_string(longest_edge_cap) +
                        " below tile_size " + std::to_string(tile_size));
  }
  if (context_limit < 1 || frames_per_video < 1) {
    throw GeometryError("context_limit and frames_per_video must be positive");
  }
}

std::size_t PipelineConfig::tokens_per_tile() const {
  std::size_t side = tile_size / patch / shuffle_r;
  return side * side;
}

std::size_t PipelineConfig::effective_tokens_per_frame() const {
  return tokens_per_frame > 0 ? tokens_per_frame : tokens_per_tile();
}

PipelineConfig PipelineConfig::from_kv(const KeyValueFile& kv) {
  PipelineConfig c;
  c.encoder_params = static_cast<std::uint64_t>(kv.get_int("encoder_params"));
  c.lm_params = static_cast<std::uint64_t>(kv.get_int("lm_params"));
  c.tile_size = static_cast<std::size_t>(kv.get_int("tile_size"));
  c.patch = static_cast<std::size_t>(kv.get_int("patch"));
  c.shuffle_r = static_cast<std::size_t>(kv.get_int("shuffle_r"));
  c.longest_edge_cap = static_cast<std::size_t>(kv.get_int("longest_edge_cap"));
  c.context_limit = static_cast<std::size_t>(kv.get_int("context_limit"));
  c.frames_per_video = static_cast<std::size_t>(kv.get_int_or("frames_per_video", 8));
  c.tokens_per_frame = static_cast<std::size_t>(kv.get_int_or("tokens_per_frame", 0));
  c.n_layers_lm = static_cast<std::size_t>(kv.get_int_or("n_layers_lm", 0));
  c.n_heads = static_cast<std::size_t>(kv.get_int_or("n_heads", 0));
  c.head_dim = static_cast<std::size_t>(kv.get_int_or("head_dim", 0));
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  return from_kv(KeyValueFile::parse(path));
}

ImageTokenCount image_token_count(const PipelineConfig& cfg, std::size_t height,
                                  std::size_t width) {
  cfg.validate();
  auto [h, w] = longest_edge_fit(height, width, cfg.longest_edge_cap);
  auto [rows, cols] = grid_shape(h, w, cfg.tile_size);
  ImageTokenCount out;
  out.rows = rows;
  out.cols = cols;
  out.tiles = rows * cols;
  out.visual_tokens = (out.tiles + 1) * cfg.tokens_per_tile();
  out.marker_tokens = out.tiles + 1;  // one positional marker per tile, one global marker
  return out;
}

std::size_t video_token_count(const PipelineConfig& cfg) {
  return cfg.frames_per_video * cfg.effective_tokens_per_frame();
}

std::uint64_t kv_cache_bytes(const PipelineConfig& cfg, std::size_t seq_len, std::size_t batch,
                             std::size_t bytes_per_scalar) {
  return 2ull * cfg.n_layers_lm * cfg.n_heads * cfg.head_dim * seq_len * batch *
         bytes_per_scalar;
}

AllocationReport allocation_report(std::uint64_t encoder_params, std::uint64_t lm_params) {
  if (encoder_params < 1 || lm_params < 1) {
    throw GeometryError("parameter counts must be positive");
  }
  AllocationReport r;
  r.ratio = static_cast<double>(encoder_params) /
            static_cast<double>(encoder_params + lm_params);
  if (r.ratio > 0.5) {
    r.regime = AllocationRegime::EncoderDominant;
    r.label = "encoder-dominant";
  } else if (r.ratio < 0.2) {
    r.regime = AllocationRegime::LmDominant;
    r.label = "lm-dominant";
  } else {
    r.regime = AllocationRegime::Balanced;
    r.label = "balanced";
  }
  return r;
}

void MixtureSpec::validate() const {
  if (fractions.empty()) throw GeometryError("mixture has no categories");
  double sum = 0.0;
  for (const auto& [name, f] : fractions) {
    if (name.empty()) throw GeometryError("mixture category with empty name");
    if (f < 0.0 || f > 1.0) {
      throw GeometryError("mixture fraction for " + name + " outside [0,1]");
    }
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw GeometryError("mixture fractions sum to " + format_double(sum) + ", expected 1");
  }
}

MixturePlan plan_mixture(const MixtureSpec& spec, std::size_t n_samples) {
  spec.validate();
  if (n_samples < 1) throw GeometryError("mixture plan needs at least one sample");

  std::size_t k = spec.fractions.size();
  // seeded tie-break priority
  std::vector<std::size_t> priority(k);
  std::iota(priority.begin(), priority.end(), 0);
  std::mt19937_64 rng(spec.seed);
  std::shuffle(priority.begin(), priority.end(), rng);
  std::vector<std::size_t> rank(k);
  for (std::size_t i = 0; i < k; ++i) rank[priority[i]] = i;

  MixturePlan plan;
  plan.sequence.reserve(n_samples);
  std::vector<std::size_t> counts(k, 0);
  double min_positive = 2.0;
  for (const auto& [name, f] : spec.fractions) {
    if (f > 0.0) min_positive = std::min(min_positive, f);
  }
  if (min_positive <= 1.0 &&
      static_cast<double>(n_samples) < 1.0 / min_positive) {
    plan.rare_warning = true;
  }

  for (std::size_t t = 1; t <= n_samples; ++t) {
    std::size_t best = k;
    double best_deficit = -1e300;
    for (std::size_t c = 0; c < k; ++c) {
      double deficit = static_cast<double>(t) * spec.fractions[c].second -
                       static_cast<double>(counts[c]);
      if (best == k || deficit > best_deficit ||
          (deficit == best_deficit && rank[c] < rank[best])) {
        best = c;
        best_deficit = deficit;
      }
    }
    counts[best] += 1;
    plan.sequence.push_back(spec.fractions[best].first);
  }
  for (std::size_t c = 0; c < k; ++c) {
    plan.counts[spec.fractions[c].first] = counts[c];
  }
  return plan;
}

BudgetReport budget_report(const std::string& name, const PipelineConfig& cfg,
                           const Workload& load) {
  BudgetReport r;
  r.name = name;
  r.image = image_token_count(cfg, load.image_height, load.image_width);
  r.video_tokens = video_token_count(cfg);
  std::size_t seq = r.image.total() + load.text_tokens;
  r.context_occupancy = static_cast<double>(seq) / static_cast<double>(cfg.context_limit);
  r.over_context = seq > cfg.context_limit;
  r.kv_bytes = kv_cache_bytes(cfg, seq, load.batch, load.bytes_per_scalar);
  r.param_bytes = (cfg.encoder_params + cfg.lm_params) *
                  static_cast<std::uint64_t>(load.bytes_per_scalar);
  AllocationReport alloc = allocation_report(cfg.encoder_params, cfg.lm_params);
  r.encoder_lm_ratio = alloc.ratio;
  r.regime = alloc.label;

  // params + KV + peak activations + fixed runtime overhead
  std::uint64_t hidden = static_cast<std::uint64_t>(cfg.n_heads) * cfg.head_dim;
  std::uint64_t activations = static_cast<std::uint64_t>(load.batch) * seq * hidden * 4 *
                              load.bytes_per_scalar;
  std::uint64_t overhead = 150ull << 20;
  r.est_ram_gb = static_cast<double>(r.param_bytes + r.kv_bytes + activations + overhead) /
                 static_cast<double>(1ull << 30);
  return r;
}

std::vector<BudgetReport> compare_configs(
    const std::vector<std::pair<std::string, PipelineConfig>>& configs, const Workload& load) {
  if (configs.empty()) throw InputError("no configs to compare");
  std::vector<BudgetReport> rows;
  rows.reserve(configs.size());
  for (const auto& [name, cfg] : configs) {
    rows.push_back(budget_report(name, cfg, load));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const BudgetReport& a, const BudgetReport& b) {
    return a.param_bytes < b.param_bytes;
  });
  return rows;
}

void write_budget_csv(std::ostream& os, const std::vector<BudgetReport>& rows) {
  write_csv_row(os, {"name", "tiles", "rows", "cols", "visual_tokens", "marker_tokens",
                     "image_total", "video_tokens", "context_occupancy", "over_context",
                     "kv_bytes", "param_bytes", "encoder_lm_ratio", "regime", "est_ram_gb"});
  for (const BudgetReport& r : rows) {
    write_csv_row(os, {r.name, std::to_string(r.image.tiles), std::to_string(r.image.rows),
                       std::to_string(r.image.cols), std::to_string(r.image.visual_tokens),
                       std::to_string(r.image.marker_tokens), std::to_string(r.image.total()),
                       std::to_string(r.video_tokens), format_double(r.context_occupancy),
                       r.over_context ? "1" : "0", std::to_string(r.kv_bytes),
                       std::to_string(r.param_bytes), format_double(r.encoder_lm_ratio), r.regime,
                       format_double(r.est_ram_gb)});
  }
}

}  // namespace smolpipe
