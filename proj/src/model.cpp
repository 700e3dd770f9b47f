#include "smolpipe/model.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <thread>

#include "smolpipe/shuffle.hpp"

namespace smolpipe {

void ModelConfig::validate() const {
  if (d_model != n_heads * head_dim) {
    throw GeometryError("d_model " + std::to_string(d_model) + " != n_heads*head_dim " +
                        std::to_string(n_heads * head_dim));
  }
  if (d_vision < 1 || n_heads < 1 || d_vision % n_heads != 0) {
    throw GeometryError("d_vision " + std::to_string(d_vision) + " must divide into " +
                        std::to_string(n_heads) + " heads");
  }
  if ((d_vision / n_heads) % 2 != 0 || head_dim % 2 != 0) {
    throw GeometryError("head dims must be even for rotary pairs");
  }
  if (patch < 1 || tile_size % patch != 0) {
    throw GeometryError("tile_size " + std::to_string(tile_size) + " not divisible by patch " +
                        std::to_string(patch));
  }
  if (shuffle_r < 1 || (tile_size / patch) % shuffle_r != 0) {
    throw GeometryError("patch grid side " + std::to_string(tile_size / patch) +
                        " not divisible by shuffle ratio " + std::to_string(shuffle_r));
  }
  if (vocab_size < 1) throw GeometryError("vocab_size must be >= 1");
  if (context_limit != 8192 && context_limit != 16384) {
    throw GeometryError("context_limit must be 8192 or 16384, got " +
                        std::to_string(context_limit));
  }
  if (rope_base <= 1.0) throw GeometryError("rope_base must be > 1");
  if (n_layers_lm < 1) throw GeometryError("n_layers_lm must be >= 1");
}

ModelConfig ModelConfig::from_kv(const KeyValueFile& kv) {
  ModelConfig c;
  c.d_vision = static_cast<std::size_t>(kv.get_int("d_vision"));
  c.d_model = static_cast<std::size_t>(kv.get_int("d_model"));
  c.n_layers_vision = static_cast<std::size_t>(kv.get_int("n_layers_vision"));
  c.n_layers_lm = static_cast<std::size_t>(kv.get_int("n_layers_lm"));
  c.n_heads = static_cast<std::size_t>(kv.get_int("n_heads"));
  c.head_dim = static_cast<std::size_t>(kv.get_int("head_dim"));
  c.vocab_size = static_cast<std::size_t>(kv.get_int_or("vocab_size", 0));
  c.patch = static_cast<std::size_t>(kv.get_int("patch"));
  c.tile_size = static_cast<std::size_t>(kv.get_int("tile_size"));
  c.shuffle_r = static_cast<std::size_t>(kv.get_int("shuffle_r"));
  c.rope_base = kv.get_double_or("rope_base", 10000.0);
  c.context_limit = static_cast<std::size_t>(kv.get_int_or("context_limit", 8192));
  if (c.vocab_size != 0) c.validate();  // zero: caller fills from the tokenizer
  return c;
}

ModelConfig ModelConfig::load(const std::filesystem::path& path) {
  return from_kv(KeyValueFile::parse(path));
}

void ModelConfig::to_kv(KeyValueFile& kv) const {
  kv.set_int("d_vision", static_cast<std::int64_t>(d_vision));
  kv.set_int("d_model", static_cast<std::int64_t>(d_model));
  kv.set_int("n_layers_vision", static_cast<std::int64_t>(n_layers_vision));
  kv.set_int("n_layers_lm", static_cast<std::int64_t>(n_layers_lm));
  kv.set_int("n_heads", static_cast<std::int64_t>(n_heads));
  kv.set_int("head_dim", static_cast<std::int64_t>(head_dim));
  kv.set_int("vocab_size", static_cast<std::int64_t>(vocab_size));
  kv.set_int("patch", static_cast<std::int64_t>(patch));
  kv.set_int("tile_size", static_cast<std::int64_t>(tile_size));
  kv.set_int("shuffle_r", static_cast<std::int64_t>(shuffle_r));
  kv.set_double("rope_base", rope_base);
  kv.set_int("context_limit", static_cast<std::int64_t>(context_limit));
}

void ModelConfig::save(const std::filesystem::path& path) const {
  KeyValueFile kv;
  to_kv(kv);
  kv.write(path);
}

std::pair<Tensor, Tensor> apply_rope(const Tensor& q, const Tensor& k,
                                     const std::vector<int>& positions, double base) {
  return {rope(q, positions, base), rope(k, positions, base)};
}

// ---- parameter construction ----

namespace {

double fan_in_std(std::size_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

ToyVLM::ToyVLM(const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  build_params(rng);
}

void ToyVLM::build_params(std::mt19937_64& rng) {
  auto add = [&](const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    index_.emplace(name, params_.size());
    params_.emplace_back(name, std::move(t));
  };
  auto weight = [&](const std::string& name, std::size_t in, std::size_t out) {
    add(name, Tensor::randn({in, out}, rng, fan_in_std(in)));
  };
  auto bias = [&](const std::string& name, std::size_t n) { add(name, Tensor::zeros({n})); };
  auto norm = [&](const std::string& prefix, std::size_t n) {
    add(prefix + ".g", Tensor::full({n}, 1.0));
    add(prefix + ".b", Tensor::zeros({n}));
  };
  auto block = [&](const std::string& prefix, std::size_t d) {
    norm(prefix + ".ln1", d);
    weight(prefix + ".attn.wq", d, d);
    bias(prefix + ".attn.bq", d);
    weight(prefix + ".attn.wk", d, d);
    bias(prefix + ".attn.bk", d);
    weight(prefix + ".attn.wv", d, d);
    bias(prefix + ".attn.bv", d);
    weight(prefix + ".attn.wo", d, d);
    bias(prefix + ".attn.bo", d);
    norm(prefix + ".ln2", d);
    weight(prefix + ".ffn.w1", d, 4 * d);
    bias(prefix + ".ffn.b1", 4 * d);
    weight(prefix + ".ffn.w2", 4 * d, d);
    bias(prefix + ".ffn.b2", d);
  };

  std::size_t side = cfg_.vision_side();
  weight("vision.patch_embed.w", cfg_.patch * cfg_.patch * 3, cfg_.d_vision);
  bias("vision.patch_embed.b", cfg_.d_vision);
  add("vision.pos_embed", Tensor::randn({side * side, cfg_.d_vision}, rng, 0.02));
  for (std::size_t i = 0; i < cfg_.n_layers_vision; ++i) {
    block("vision.block" + std::to_string(i), cfg_.d_vision);
  }

  std::size_t c_in = cfg_.d_vision * cfg_.shuffle_r * cfg_.shuffle_r;
  weight("proj.w1", c_in, cfg_.d_model);
  bias("proj.b1", cfg_.d_model);
  weight("proj.w2", cfg_.d_model, cfg_.d_model);
  bias("proj.b2", cfg_.d_model);

  add("lm.tok_embed", Tensor::randn({cfg_.vocab_size, cfg_.d_model}, rng, 0.02));
  for (std::size_t i = 0; i < cfg_.n_layers_lm; ++i) {
    block("lm.block" + std::to_string(i), cfg_.d_model);
  }
  norm("lm.final_ln", cfg_.d_model);
  weight("lm.head.w", cfg_.d_model, cfg_.vocab_size);
  bias("lm.head.b", cfg_.vocab_size);
}

Tensor ToyVLM::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("unknown parameter " + name);
  return params_[it->second].second;
}

std::size_t ToyVLM::prefix_count(const std::string& prefix) const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) {
    if (name.rfind(prefix, 0) == 0) n += t.numel();
  }
  return n;
}

std::size_t ToyVLM::param_count() const { return prefix_count(""); }
std::size_t ToyVLM::vision_param_count() const { return prefix_count("vision."); }
std::size_t ToyVLM::projector_param_count() const { return prefix_count("proj."); }
std::size_t ToyVLM::lm_param_count() const { return prefix_count("lm."); }

// ---- forward pieces ----

namespace {

// [t, heads*hd] -> [heads, t, hd]
Tensor split_heads(const Tensor& x, std::size_t heads, std::size_t hd) {
  std::size_t t = x.shape()[0];
  Tensor r = reshape(x, {t, heads, hd});
  return permute_reshape(r, {1, 0, 2}, {heads, t, hd});
}

// [heads, t, hd] -> [t, heads*hd]
Tensor merge_heads(const Tensor& x) {
  std::size_t heads = x.shape()[0], t = x.shape()[1], hd = x.shape()[2];
  return permute_reshape(x, {1, 0, 2}, {t, heads * hd});
}

Tensor causal_mask(std::size_t heads, std::size_t t) {
  std::vector<double> data(heads * t * t, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = i + 1; j < t; ++j) {
        data[(h * t + i) * t + j] = -1e30;
      }
    }
  }
  return Tensor::from_data({heads, t, t}, std::move(data));
}

}  // namespace

Tensor ToyVLM::transformer_block(const Tensor& x, const std::string& prefix, std::size_t heads,
                                 const std::vector<int>* rope_positions) const {
  std::size_t t = x.shape()[0];
  std::size_t d = x.shape()[1];
  std::size_t hd = d / heads;

  Tensor h = layer_norm(x, param(prefix + ".ln1.g"), param(prefix + ".ln1.b"));
  Tensor q = split_heads(add_bias(matmul(h, param(prefix + ".attn.wq")), param(prefix + ".attn.bq")), heads, hd);
  Tensor k = split_heads(add_bias(matmul(h, param(prefix + ".attn.wk")), param(prefix + ".attn.bk")), heads, hd);
  Tensor v = split_heads(add_bias(matmul(h, param(prefix + ".attn.wv")), param(prefix + ".attn.bv")), heads, hd);
  if (rope_positions) {
    auto [rq, rk] = apply_rope(q, k, *rope_positions, cfg_.rope_base);
    q = rq;
    k = rk;
  }
  Tensor scores = scale(matmul(q, permute_reshape(k, {0, 2, 1}, {heads, hd, t})),
                        1.0 / std::sqrt(static_cast<double>(hd)));
  if (rope_positions) {  // the LM is causal; the vision tower attends fully
    scores = add(scores, causal_mask(heads, t));
  }
  Tensor attn = softmax(scores, 2);
  Tensor ctx = merge_heads(matmul(attn, v));
  Tensor out = add(x, add_bias(matmul(ctx, param(prefix + ".attn.wo")), param(prefix + ".attn.bo")));

  Tensor f = layer_norm(out, param(prefix + ".ln2.g"), param(prefix + ".ln2.b"));
  f = add_bias(matmul(f, param(prefix + ".ffn.w1")), param(prefix + ".ffn.b1"));
  f = gelu(f);
  f = add_bias(matmul(f, param(prefix + ".ffn.w2")), param(prefix + ".ffn.b2"));
  return add(out, f);
}

Tensor ToyVLM::encode_tile(const Tensor& patches) const {
  std::size_t side = cfg_.vision_side();
  std::size_t n = side * side;
  if (patches.rank() != 2 || patches.shape()[0] != n ||
      patches.shape()[1] != cfg_.patch * cfg_.patch * 3) {
    throw GeometryError("encode_tile: expected [" + std::to_string(n) + ", " +
                        std::to_string(cfg_.patch * cfg_.patch * 3) + "] patches, got " +
                        format_shape(patches.shape()));
  }
  Tensor x = add_bias(matmul(patches, param("vision.patch_embed.w")), param("vision.patch_embed.b"));
  x = add(x, param("vision.pos_embed"));
  for (std::size_t i = 0; i < cfg_.n_layers_vision; ++i) {
    x = transformer_block(x, "vision.block" + std::to_string(i), cfg_.n_heads, nullptr);
  }
  return reshape(x, {side, side, cfg_.d_vision});
}

Tensor ToyVLM::project(const Tensor& flat_shuffled) const {
  std::size_t c_in = cfg_.d_vision * cfg_.shuffle_r * cfg_.shuffle_r;
  if (flat_shuffled.rank() != 2 || flat_shuffled.shape()[1] != c_in) {
    throw GeometryError("project: expected [tokens, " + std::to_string(c_in) + "], got " +
                        format_shape(flat_shuffled.shape()));
  }
  Tensor h = add_bias(matmul(flat_shuffled, param("proj.w1")), param("proj.b1"));
  h = gelu(h);
  return add_bias(matmul(h, param("proj.w2")), param("proj.b2"));
}

Tensor ToyVLM::visual_rows(const std::vector<Segment>& media) const {
  std::vector<Tensor> parts;
  auto run_tile = [&](const RawImage& tile) {
    Tensor feat = encode_tile(patchify(tile, cfg_.patch));
    Tensor shuffled = pixel_shuffle(feat, cfg_.shuffle_r);
    parts.push_back(project(flatten_tokens(shuffled)));
  };
  for (const Segment& seg : media) {
    switch (seg.kind) {
      case Segment::Kind::Text:
        throw InputError("visual_rows: text segment in media list");
      case Segment::Kind::Image:
        for (const Tile& tile : seg.grid.tiles) run_tile(tile.image);
        run_tile(seg.grid.global);
        break;
      case Segment::Kind::Video:
        for (const RawImage& frame : seg.frames.frames) run_tile(frame);
        break;
    }
  }
  if (parts.empty()) return Tensor();
  if (parts.size() == 1) return parts[0];
  return concat_rows(parts);
}

Tensor ToyVLM::forward(const std::vector<int>& ids, const std::vector<std::size_t>& placeholders,
                       const Tensor& visual) const {
  if (ids.empty()) throw InputError("forward: empty sequence");
  if (ids.size() > cfg_.context_limit) {
    throw ContextOverflowError("sequence of " + std::to_string(ids.size()) +
                               " tokens exceeds context limit " +
                               std::to_string(cfg_.context_limit));
  }
  std::size_t visual_count = visual.defined() ? visual.shape()[0] : 0;
  if (placeholders.size() != visual_count) {
    throw GeometryError("placeholder/visual mismatch: " + std::to_string(placeholders.size()) +
                        " placeholders vs " + std::to_string(visual_count) + " visual tokens");
  }

  Tensor x = embedding(param("lm.tok_embed"), ids);
  if (visual_count > 0) {
    x = row_scatter(x, visual, placeholders);
  }
  std::vector<int> positions(ids.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);
  for (std::size_t i = 0; i < cfg_.n_layers_lm; ++i) {
    x = transformer_block(x, "lm.block" + std::to_string(i), cfg_.n_heads, &positions);
  }
  x = layer_norm(x, param("lm.final_ln.g"), param("lm.final_ln.b"));
  return add_bias(matmul(x, param("lm.head.w")), param("lm.head.b"));
}

// ---- checkpointing ----

void ToyVLM::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  cfg_.save(dir / "config.txt");
  for (const auto& [name, t] : params_) {
    save_tensor(t, dir / (name + ".smt"));
  }
}

ToyVLM ToyVLM::load(const std::filesystem::path& dir) {
  ModelConfig cfg = ModelConfig::load(dir / "config.txt");
  std::mt19937_64 rng(0);
  ToyVLM model(cfg, rng);
  for (auto& [name, t] : model.params_) {
    Tensor loaded = load_tensor(dir / (name + ".smt"));
    if (loaded.shape() != t.shape()) {
      throw InputError("checkpoint tensor " + name + " has shape " +
                       format_shape(loaded.shape()) + ", expected " + format_shape(t.shape()));
    }
    t.mutable_data() = loaded.data();
  }
  return model;
}

// ---- optimization ----

void adam_step(ToyVLM& model, AdamState& state, const GradMap& grads, double lr) {
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : model.named_params()) {
    auto git = grads.find(p.node_key());
    if (git == grads.end()) continue;
    const std::vector<double>& g = git->second;
    std::vector<double>& m = state.m[p.node_key()];
    std::vector<double>& v = state.v[p.node_key()];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    std::vector<double>& data = p.mutable_data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mhat = m[i] / bc1;
      double vhat = v[i] / bc2;
      data[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ---- training ----

TrainSample TrainSample::from_sequence(std::string id, const MultimodalSequence& seq,
                                       std::vector<Segment> media) {
  TrainSample s;
  s.sample_id = std::move(id);
  s.ids = seq.ids();
  s.mask = seq.loss_mask();
  s.placeholders = seq.placeholder_positions();
  s.media = std::move(media);
  return s;
}

namespace {

// Next-token view: inputs drop the last id, targets/mask shift left by one.
struct ShiftedSample {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};

ShiftedSample shift_for_training(const TrainSample& s) {
  if (s.ids.size() < 2) {
    throw InputError("sample " + s.sample_id + " too short to train on");
  }
  ShiftedSample out;
  out.inputs.assign(s.ids.begin(), s.ids.end() - 1);
  out.targets.assign(s.ids.begin() + 1, s.ids.end());
  out.mask.assign(s.mask.begin() + 1, s.mask.end());
  for (std::size_t p : s.placeholders) {
    if (p + 1 >= s.ids.size()) {
      throw InputError("sample " + s.sample_id + " has a media placeholder at the final position");
    }
  }
  return out;
}

}  // namespace

TrainStepResult train_step(ToyVLM& model, const std::vector<TrainSample>& batch, AdamState& opt,
                           double lr) {
  if (batch.empty()) throw InputError("empty training batch");
  for (const TrainSample& s : batch) {
    if (s.ids.size() > model.config().context_limit) {
      throw ContextOverflowError("sample exceeds context limit of " +
                                     std::to_string(model.config().context_limit),
                                 s.sample_id);
    }
  }

  std::size_t n = batch.size();
  std::vector<GradMap> sample_grads(n);
  std::vector<double> sample_loss(n, 0.0);
  std::vector<std::exception_ptr> errors(n);

  auto run_sample = [&](std::size_t i) {
    try {
      const TrainSample& s = batch[i];
      ShiftedSample sh = shift_for_training(s);
      Tensor visual = model.visual_rows(s.media);
      Tensor logits = model.forward(sh.inputs, s.placeholders, visual);
      Tensor loss = cross_entropy_masked(logits, sh.targets, sh.mask);
      sample_loss[i] = loss[0];
      backward_into(loss, sample_grads[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_sample(i);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w]() {
        for (std::size_t i = w; i < n; i += workers) run_sample(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  // ordered reduction: identical result for any worker count
  GradMap total;
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& [key, g] : sample_grads[i]) {
      auto& acc = total[key];
      if (acc.empty()) acc.assign(g.size(), 0.0);
      for (std::size_t j = 0; j < g.size(); ++j) acc[j] += g[j];
    }
  }
  double inv_n = 1.0 / static_cast<double>(n);
  for (auto& [key, g] : total) {
    for (double& v : g) v *= inv_n;
  }

  adam_step(model, opt, total, lr);

  TrainStepResult result;
  for (std::size_t i = 0; i < n; ++i) result.loss += sample_loss[i];
  result.loss *= inv_n;
  for (const TrainSample& s : batch) result.token_count += s.ids.size();
  return result;
}

GenerationResult generate(const ToyVLM& model, const TrainSample& prefix, int end_id,
                          std::size_t max_new) {
  NoGradGuard no_grad;
  if (prefix.ids.size() > model.config().context_limit) {
    throw ContextOverflowError("prompt exceeds context limit of " +
                                   std::to_string(model.config().context_limit),
                               prefix.sample_id);
  }
  GenerationResult result;
  Tensor visual = model.visual_rows(prefix.media);
  std::vector<int> ids = prefix.ids;
  for (std::size_t step = 0; step < max_new; ++step) {
    if (ids.size() >= model.config().context_limit) {
      result.hit_context_limit = true;
      break;
    }
    Tensor logits = model.forward(ids, prefix.placeholders, visual);
    std::size_t t = logits.shape()[0];
    std::size_t v = logits.shape()[1];
    const auto& d = logits.data();
    const double* row = d.data() + (t - 1) * v;
    std::size_t best = 0;
    for (std::size_t j = 1; j < v; ++j) {
      if (row[j] > row[best]) best = j;
    }
    int next = static_cast<int>(best);
    result.new_ids.push_back(next);
    if (next == end_id) break;
    ids.push_back(next);
  }
  return result;
}

}  // namespace smolpipe
