#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "smolpipe/chat.hpp"
#include "smolpipe/common.hpp"
#include "smolpipe/image.hpp"
#include "smolpipe/tensor.hpp"

namespace smolpipe {

struct ModelConfig {
  std::size_t d_vision = 32;
  std::size_t d_model = 64;
  std::size_t n_layers_vision = 1;
  std::size_t n_layers_lm = 2;
  std::size_t n_heads = 4;
  std::size_t head_dim = 16;
  std::size_t vocab_size = 0;
  std::size_t patch = 8;
  std::size_t tile_size = 32;
  std::size_t shuffle_r = 2;
  double rope_base = 10000.0;
  std::size_t context_limit = 8192;

  void validate() const;
  std::size_t vision_side() const { return tile_size / patch; }
  std::size_t tokens_per_tile() const {
    std::size_t s = vision_side() / shuffle_r;
    return s * s;
  }

  static ModelConfig from_kv(const KeyValueFile& kv);
  static ModelConfig load(const std::filesystem::path& path);
  void to_kv(KeyValueFile& kv) const;
  void save(const std::filesystem::path& path) const;
};

// Applies the rotary embedding to a query/key pair with theta_i =
// base^(-2i/head_dim); a pure per-pair rotation, so attention logits depend
// only on relative positions.
std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k,
                                     const std::vector<int>& positions, double base);

// Patch-embedding vision encoder -> pixel shuffle -> MLP projector ->
// causal decoder LM with RoPE. All parameters are double precision and the
// whole pipeline is differentiable end to end.
class ToyVLM {
 public:
  ToyVLM(const ModelConfig& cfg, std::mt19937_64& rng);

  static ToyVLM load(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir) const;

  const ModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor>>& named_params() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& named_params() const { return params_; }
  Tensor param(const std::string& name) const;

  std::size_t param_count() const;
  std::size_t vision_param_count() const;    // "vision." prefix
  std::size_t projector_param_count() const; // "proj." prefix
  std::size_t lm_param_count() const;        // "lm." prefix

  // [n, patch^2*3] patches of one tile -> [side, side, d_vision].
  Tensor encode_tile(const Tensor& patches) const;
  // [tokens, d_vision*r^2] shuffled features -> [tokens, d_model].
  Tensor project(const Tensor& flat_shuffled) const;

  // Full visual pipeline for rendered media, rows ordered to match the
  // renderer's placeholder order (tiles raster-first, then global; frames in
  // sample order).
  Tensor visual_rows(const std::vector<Segment>& media) const;

  // Causal LM over the id stream with projected visual rows scattered into
  // the placeholder positions. Returns [T, vocab_size] logits.
  Tensor forward(const std::vector<int>& ids, const std::vector<std::size_t>& placeholders,
                 const Tensor& visual) const;

 private:
  ToyVLM() = default;
  void build_params(std::mt19937_64& rng);
  Tensor transformer_block(const Tensor& x, const std::string& prefix, std::size_t heads,
                           const std::vector<int>* rope_positions) const;
  std::size_t prefix_count(const std::string& prefix) const;

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  std::size_t step = 0;
  std::unordered_map<const void*, std::vector<double>> m;
  std::unordered_map<const void*, std::vector<double>> v;
};

// In-place Adam update from an averaged gradient map keyed by node_key().
void adam_step(ToyVLM& model, AdamState& state, const GradMap& grads, double lr);

struct TrainSample {
  std::string sample_id;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;            // loss mask aligned with ids
  std::vector<std::size_t> placeholders;
  std::vector<Segment> media;                // render order

  static TrainSample from_sequence(std::string id, const MultimodalSequence& seq,
                                   std::vector<Segment> media);
};

struct TrainStepResult {
  double loss = 0.0;
  std::size_t token_count = 0;
};

// One optimizer step over the batch: per-sample forward/backward (parallel
// up to worker_count(), reduced in sample order so results are independent
// of thread count), averaged gradients, Adam update.
TrainStepResult train_step(ToyVLM& model, const std::vector<TrainSample>& batch, AdamState& opt,
                           double lr);

struct GenerationResult {
  std::vector<int> new_ids;                // excludes the prompt
  bool hit_context_limit = false;
};

// Greedy argmax decoding until end_id or max_new tokens.
GenerationResult generate(const ToyVLM& model, const TrainSample& prefix, int end_id,
                          std::size_t max_new);

}  // namespace smolpipe
