#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "smolpipe/budget.hpp"
#include "smolpipe/chat.hpp"
#include "smolpipe/common.hpp"
#include "smolpipe/image.hpp"
#include "smolpipe/model.hpp"
#include "smolpipe/synthetic.hpp"
#include "smolpipe/vocab.hpp"

namespace {

using namespace smolpipe;

namespace fs = std::filesystem;

void write_manifest(const fs::path& out, const std::string& command, const std::string& config,
                    std::uint64_t seed, const std::vector<std::string>& inputs) {
  fs::create_directories(out);
  KeyValueFile kv;
  kv.set("command", command);
  kv.set("config", config.empty() ? "-" : config);
  kv.set_int("seed", static_cast<std::int64_t>(seed));
  std::string joined;
  for (const std::string& in : inputs) {
    if (!joined.empty()) joined += ";";
    joined += in;
  }
  kv.set("inputs", joined.empty() ? "-" : joined);
  kv.set("out", out.string());
  kv.set("build", build_id());
  // run_manifest.txt, not manifest.txt: dataset dirs keep their own manifest
  kv.write(out / "run_manifest.txt");
}

Vocab full_vocab() { return extend_vocab(Vocab::byte_fallback(), 8, 8); }

PositionMode parse_mode(const std::string& mode) {
  if (mode == "learned") return PositionMode::LearnedTokens;
  if (mode == "string") return PositionMode::StringTokens;
  throw InputError("unknown position mode '" + mode + "', expected learned|string");
}

// ---- tokenize-image ----

int cmd_tokenize_image(const std::string& image_path, const std::string& config_path,
                       const std::string& mode_name, const fs::path& out) {
  write_manifest(out, "tokenize-image", config_path, 0, {image_path});
  PipelineConfig cfg = PipelineConfig::load(config_path);
  PositionMode mode = parse_mode(mode_name);
  RawImage img = read_ppm(image_path);

  RawImage capped = resize_longest_edge(img, cfg.longest_edge_cap);
  TileGrid grid = split_into_tiles(capped, cfg.tile_size);
  Vocab vocab = full_vocab();
  std::size_t per_tile = cfg.tokens_per_tile();
  RenderedBlock block = render_image_block(grid, mode, vocab, per_tile);

  std::size_t visual = (grid.tiles.size() + 1) * per_tile;
  std::cout << "image=" << image_path << " size=" << img.width << "x" << img.height
            << " capped=" << capped.width << "x" << capped.height << "\n";
  std::cout << "grid rows=" << grid.rows << " cols=" << grid.cols
            << " tile_size=" << cfg.tile_size << " tokens_per_tile=" << per_tile << "\n";
  std::cout << "tiles=" << grid.tiles.size() << " global=1 visual_tokens=" << visual << "\n";
  std::cout << "mode=" << mode_name << " block_ids=" << block.ids.size() << "\n";

  std::ofstream os(out / "tokens.csv");
  write_csv_row(os, {"position", "id", "token"});
  for (std::size_t i = 0; i < block.ids.size(); ++i) {
    write_csv_row(os, {std::to_string(i), std::to_string(block.ids[i]),
                       vocab.token_string(block.ids[i])});
  }
  return 0;
}

// ---- budget ----

int cmd_budget(const std::vector<std::string>& config_paths, const std::string& workload_path,
               const fs::path& out) {
  std::vector<std::string> inputs = config_paths;
  if (!workload_path.empty()) inputs.push_back(workload_path);
  write_manifest(out, "budget", config_paths.empty() ? "" : config_paths.front(), 0, inputs);

  Workload load;
  if (!workload_path.empty()) {
    KeyValueFile kv = KeyValueFile::parse(workload_path);
    load.image_height = static_cast<std::size_t>(kv.get_int_or("image_height", 1024));
    load.image_width = static_cast<std::size_t>(kv.get_int_or("image_width", 2048));
    load.text_tokens = static_cast<std::size_t>(kv.get_int_or("text_tokens", 256));
    load.batch = static_cast<std::size_t>(kv.get_int_or("batch", 1));
    load.bytes_per_scalar = static_cast<std::size_t>(kv.get_int_or("bytes_per_scalar", 2));
  }

  std::vector<std::pair<std::string, PipelineConfig>> configs;
  for (const std::string& path : config_paths) {
    configs.emplace_back(fs::path(path).stem().string(), PipelineConfig::load(path));
  }
  std::vector<BudgetReport> rows = compare_configs(configs, load);

  write_budget_csv(std::cout, rows);
  std::ofstream os(out / "budget.csv");
  write_budget_csv(os, rows);
  return 0;
}

// ---- training helpers ----

struct TrainingRun {
  double final_loss = 0.0;
  std::size_t steps_done = 0;
};

TrainingRun run_training(ToyVLM& model, const std::vector<TrainSample>& samples,
                         std::size_t steps, std::size_t batch_size, double lr,
                         std::ostream* log_csv, std::uint64_t order_seed) {
  if (samples.empty()) throw InputError("dataset has no samples");
  AdamState opt;
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 order_rng(order_seed);
  std::size_t cursor = samples.size();  // forces a shuffle on first use

  TrainingRun run;
  if (log_csv) write_csv_row(*log_csv, {"step", "loss", "lr", "tokens"});
  for (std::size_t step = 1; step <= steps; ++step) {
    std::vector<TrainSample> batch;
    for (std::size_t b = 0; b < batch_size; ++b) {
      if (cursor >= order.size()) {
        std::shuffle(order.begin(), order.end(), order_rng);
        cursor = 0;
      }
      batch.push_back(samples[order[cursor++]]);
    }
    TrainStepResult result = train_step(model, batch, opt, lr);
    run.final_loss = result.loss;
    run.steps_done = step;
    if (log_csv) {
      write_csv_row(*log_csv, {std::to_string(step), format_double(result.loss),
                               format_double(lr), std::to_string(result.token_count)});
    }
  }
  return run;
}

PrepareOptions prepare_options_for(const ModelConfig& cfg, const DatasetInfo& info,
                                   PositionMode mode, std::size_t frame_average) {
  PrepareOptions opts;
  opts.tile_size = cfg.tile_size;
  opts.frames_per_video = info.frames;
  opts.frame_average = frame_average;
  opts.render.mode = mode;
  opts.render.tokens_per_tile = cfg.tokens_per_tile();
  opts.render.tokens_per_frame = cfg.tokens_per_tile();
  return opts;
}

// ---- train-toy ----

int cmd_train_toy(const std::string& dataset_dir, const std::string& config_path,
                  std::size_t steps, std::uint64_t seed, std::size_t batch_size, double lr,
                  const std::string& mode_name, const std::string& template_path,
                  const fs::path& out) {
  write_manifest(out, "train-toy", config_path, seed, {dataset_dir});

  Vocab vocab = full_vocab();
  ChatTemplate tmpl =
      template_path.empty() ? ChatTemplate::defaults() : ChatTemplate::load(template_path);

  KeyValueFile cfg_kv = KeyValueFile::parse(config_path);
  ModelConfig cfg = ModelConfig::from_kv(cfg_kv);
  if (cfg.vocab_size == 0) cfg.vocab_size = vocab.size();
  cfg.validate();
  if (cfg.vocab_size < vocab.size()) {
    throw GeometryError("config vocab_size " + std::to_string(cfg.vocab_size) +
                        " smaller than tokenizer vocab " + std::to_string(vocab.size()));
  }

  DatasetInfo info = read_dataset_info(dataset_dir);
  PrepareOptions opts = prepare_options_for(cfg, info, parse_mode(mode_name), 1);
  std::vector<TrainSample> samples = prepare_dataset(dataset_dir, vocab, tmpl, opts);

  std::mt19937_64 rng(seed);
  ToyVLM model(cfg, rng);
  std::cout << "params total=" << model.param_count() << " vision=" << model.vision_param_count()
            << " proj=" << model.projector_param_count() << " lm=" << model.lm_param_count()
            << "\n";

  std::ofstream log(out / "loss.csv");
  TrainingRun run = run_training(model, samples, steps, batch_size, lr, &log, seed + 1);
  model.save(out / "checkpoint");
  std::cout << "steps=" << run.steps_done << " final_loss=" << format_double(run.final_loss)
            << "\n";
  return 0;
}

// ---- ablate ----

ModelConfig ablate_model_config(std::size_t vocab_size, std::size_t shuffle_r, double rope_base) {
  ModelConfig cfg;
  cfg.d_vision = 32;
  cfg.d_model = 48;
  cfg.n_layers_vision = 1;
  cfg.n_layers_lm = 2;
  cfg.n_heads = 4;
  cfg.head_dim = 12;
  cfg.vocab_size = vocab_size;
  cfg.patch = 8;
  cfg.tile_size = 32;
  cfg.shuffle_r = shuffle_r;
  cfg.rope_base = rope_base;
  cfg.context_limit = 8192;
  cfg.validate();
  return cfg;
}

double average_length(const std::vector<TrainSample>& samples) {
  std::size_t total = 0;
  for (const TrainSample& s : samples) total += s.ids.size();
  return samples.empty() ? 0.0 : static_cast<double>(total) / samples.size();
}

int cmd_ablate(const std::string& axis, std::uint64_t seed, std::size_t steps_override,
               const fs::path& out) {
  write_manifest(out, "ablate", axis, seed, {});
  Vocab vocab = full_vocab();
  ChatTemplate tmpl = ChatTemplate::defaults();

  std::ofstream os(out / ("ablate_" + axis + ".csv"));
  auto train_eval = [&](const fs::path& train_dir, const fs::path& eval_dir,
                        const ModelConfig& cfg, PositionMode mode, std::size_t frame_average,
                        std::size_t steps, double* final_loss, double* train_len) {
    DatasetInfo info = read_dataset_info(train_dir);
    PrepareOptions opts = prepare_options_for(cfg, info, mode, frame_average);
    std::vector<TrainSample> train = prepare_dataset(train_dir, vocab, tmpl, opts);
    std::vector<TrainSample> eval_set =
        eval_dir.empty() ? train : prepare_dataset(eval_dir, vocab, tmpl, opts);
    std::mt19937_64 rng(seed);
    ToyVLM model(cfg, rng);
    TrainingRun run = run_training(model, train, steps, 8, 2e-3, nullptr, seed + 1);
    if (final_loss) *final_loss = run.final_loss;
    if (train_len) *train_len = average_length(train);
    return evaluate_captions(model, eval_set, vocab);
  };

  if (axis == "shuffle") {
    fs::path data = out / "data";
    generate_captioning_dataset(data);
    std::size_t steps = steps_override ? steps_override : 700;
    write_csv_row(os, {"shuffle_r", "visual_tokens_per_image", "final_loss", "accuracy"});
    for (std::size_t r : {1u, 2u, 4u}) {
      ModelConfig cfg = ablate_model_config(vocab.size(), r, 10000.0);
      double loss = 0.0;
      EvalResult acc = train_eval(data, "", cfg, PositionMode::LearnedTokens, 1, steps, &loss,
                                  nullptr);
      write_csv_row(os, {std::to_string(r), std::to_string(cfg.tokens_per_tile()),
                         format_double(loss), format_double(acc.accuracy())});
    }
  } else if (axis == "frames") {
    fs::path train_dir = out / "train";
    fs::path eval_dir = out / "eval";
    generate_temporal_dataset(train_dir, seed + 10, 64);
    generate_temporal_dataset(eval_dir, seed + 77, 32);
    std::size_t steps = steps_override ? steps_override : 350;
    write_csv_row(os, {"average_k", "frames_seen", "final_loss", "eval_accuracy"});
    for (std::size_t k : {1u, 2u, 4u, 8u}) {
      ModelConfig cfg = ablate_model_config(vocab.size(), 2, 10000.0);
      double loss = 0.0;
      EvalResult acc = train_eval(train_dir, eval_dir, cfg, PositionMode::LearnedTokens, k, steps,
                                  &loss, nullptr);
      write_csv_row(os, {std::to_string(k), std::to_string(8 / k), format_double(loss),
                         format_double(acc.accuracy())});
    }
  } else if (axis == "posmode") {
    fs::path data = out / "data";
    generate_ocr_grid_dataset(data, seed + 5, 48);
    std::size_t steps = steps_override ? steps_override : 500;
    write_csv_row(os, {"mode", "avg_sequence_length", "final_loss", "accuracy"});
    for (PositionMode mode : {PositionMode::LearnedTokens, PositionMode::StringTokens}) {
      ModelConfig cfg = ablate_model_config(vocab.size(), 2, 10000.0);
      double loss = 0.0, len = 0.0;
      EvalResult acc = train_eval(data, "", cfg, mode, 1, steps, &loss, &len);
      write_csv_row(os, {mode == PositionMode::LearnedTokens ? "learned" : "string",
                         format_double(len), format_double(loss), format_double(acc.accuracy())});
    }
  } else if (axis == "ropebase") {
    fs::path data = out / "data";
    generate_captioning_dataset(data);
    std::size_t steps = steps_override ? steps_override : 700;
    write_csv_row(os, {"rope_base", "final_loss", "accuracy"});
    for (double base : {10000.0, 273000.0}) {
      ModelConfig cfg = ablate_model_config(vocab.size(), 2, base);
      double loss = 0.0;
      EvalResult acc = train_eval(data, "", cfg, PositionMode::LearnedTokens, 1, steps, &loss,
                                  nullptr);
      write_csv_row(os, {format_double(base), format_double(loss), format_double(acc.accuracy())});
    }
  } else {
    throw InputError("unknown ablation axis '" + axis +
                     "', expected shuffle|frames|posmode|ropebase");
  }
  std::cout << "wrote " << (out / ("ablate_" + axis + ".csv")).string() << "\n";
  return 0;
}

// ---- gen-data ----

int cmd_gen_data(const std::string& task, const fs::path& out, std::uint64_t seed,
                 std::size_t count, std::size_t image_size, std::size_t frames) {
  write_manifest(out, "gen-data", task, seed, {});
  if (task == "captioning") {
    generate_captioning_dataset(out, image_size);
  } else if (task == "temporal") {
    generate_temporal_dataset(out, seed, count, image_size, frames);
  } else if (task == "ocr-grid") {
    generate_ocr_grid_dataset(out, seed, count, image_size);
  } else {
    throw InputError("unknown task '" + task + "', expected captioning|temporal|ocr-grid");
  }
  std::cout << "wrote dataset to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SmolPipe: desk-scale multimodal pipeline tools"};
  app.require_subcommand(1);

  std::string image_path, config_path, mode_name = "learned", workload_path, dataset_dir;
  std::string template_path, axis, task;
  std::vector<std::string> config_paths;
  std::string out_dir = "smolpipe-out";
  std::uint64_t seed = 0;
  std::size_t steps = 1500, ablate_steps = 0, batch = 8, count = 64, image_size = 32, frames = 8;
  double lr = 2e-3;

  CLI::App* tok = app.add_subcommand("tokenize-image", "Tile an image and render its token block");
  tok->add_option("image", image_path, "PPM image path")->required();
  tok->add_option("--config", config_path, "pipeline config file")->required();
  tok->add_option("--mode", mode_name, "positional marker mode: learned|string");
  tok->add_option("--out", out_dir, "output directory");

  CLI::App* bud = app.add_subcommand("budget", "Token/KV/RAM accounting across configs");
  bud->add_option("--config", config_paths, "pipeline config file(s)")->required();
  bud->add_option("--workload", workload_path, "workload file");
  bud->add_option("--out", out_dir, "output directory");

  CLI::App* train = app.add_subcommand("train-toy", "Train the toy VLM on a dataset directory");
  train->add_option("--dataset", dataset_dir, "dataset directory")->required();
  train->add_option("--config", config_path, "model config file")->required();
  train->add_option("--steps", steps, "optimizer steps");
  train->add_option("--seed", seed, "rng seed");
  train->add_option("--batch", batch, "batch size");
  train->add_option("--lr", lr, "learning rate");
  train->add_option("--mode", mode_name, "positional marker mode: learned|string");
  train->add_option("--template", template_path, "chat template file");
  train->add_option("--out", out_dir, "output directory");

  CLI::App* abl = app.add_subcommand("ablate", "Directional ablation runs on synthetic tasks");
  abl->add_option("--axis", axis, "shuffle|frames|posmode|ropebase")->required();
  abl->add_option("--seed", seed, "rng seed");
  abl->add_option("--steps", ablate_steps, "override per-axis default steps");
  abl->add_option("--out", out_dir, "output directory");

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--task", task, "captioning|temporal|ocr-grid")->required();
  gen->add_option("--seed", seed, "rng seed");
  gen->add_option("--count", count, "sample count (temporal/ocr-grid)");
  gen->add_option("--image-size", image_size, "image or tile side in pixels");
  gen->add_option("--frames", frames, "frames per video");
  gen->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
    if (tok->parsed()) return cmd_tokenize_image(image_path, config_path, mode_name, out_dir);
    if (bud->parsed()) return cmd_budget(config_paths, workload_path, out_dir);
    if (train->parsed()) {
      return cmd_train_toy(dataset_dir, config_path, steps, seed, batch, lr, mode_name,
                           template_path, out_dir);
    }
    if (abl->parsed()) return cmd_ablate(axis, seed, ablate_steps, out_dir);
    if (gen->parsed()) return cmd_gen_data(task, out_dir, seed, count, image_size, frames);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  } catch (const ContextOverflowError& e) {
    std::cerr << "context overflow: " << e.what();
    if (!e.sample_id.empty()) std::cerr << " (sample " << e.sample_id << ")";
    std::cerr << "\n";
    return 4;
  } catch (const GeometryError& e) {
    std::cerr << "geometry/config error: " << e.what() << "\n";
    return 3;
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
