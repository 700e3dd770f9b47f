#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "smolpipe/common.hpp"
#include "smolpipe/model.hpp"
#include "smolpipe/shuffle.hpp"

using namespace smolpipe;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(std::size_t vocab = 48) {
  ModelConfig c;
  c.d_vision = 16;
  c.d_model = 32;
  c.n_layers_vision = 1;
  c.n_layers_lm = 1;
  c.n_heads = 2;
  c.head_dim = 16;
  c.vocab_size = vocab;
  c.patch = 8;
  c.tile_size = 16;
  c.shuffle_r = 1;
  c.validate();
  return c;
}

ToyVLM tiny_model(std::uint64_t seed = 1, std::size_t vocab = 48) {
  std::mt19937_64 rng(seed);
  return ToyVLM(tiny_config(vocab), rng);
}

RawImage noise_tile(std::size_t side, std::uint64_t seed) {
  RawImage img = make_image(side, side);
  std::mt19937_64 rng(seed);
  for (auto& b : img.data) b = static_cast<std::uint8_t>(rng() & 0xff);
  return img;
}

TrainSample text_sample(const std::string& id, std::vector<int> ids,
                        std::vector<std::uint8_t> mask) {
  TrainSample s;
  s.sample_id = id;
  s.ids = std::move(ids);
  s.mask = std::move(mask);
  return s;
}

}  // namespace

TEST_CASE("config validation catches bad geometry") {
  ModelConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());

  ModelConfig bad = c;
  bad.head_dim = 10;
  CHECK_THROWS_AS(bad.validate(), GeometryError);

  bad = c;
  bad.context_limit = 5000;
  CHECK_THROWS_AS(bad.validate(), GeometryError);

  bad = c;
  bad.patch = 7;
  CHECK_THROWS_AS(bad.validate(), GeometryError);

  bad = c;
  bad.vocab_size = 0;
  CHECK_THROWS_AS(bad.validate(), GeometryError);
}

TEST_CASE("config file round trip, vocab size may stay open") {
  ModelConfig c = tiny_config();
  fs::path dir = fs::temp_directory_path() / "smolpipe_cfg";
  fs::create_directories(dir);
  c.save(dir / "m.txt");
  ModelConfig back = ModelConfig::load(dir / "m.txt");
  CHECK(back.d_model == c.d_model);
  CHECK(back.vocab_size == c.vocab_size);
  CHECK(back.shuffle_r == c.shuffle_r);
  CHECK(back.rope_base == c.rope_base);

  KeyValueFile kv = KeyValueFile::parse_string(
      "d_vision=16\nd_model=32\nn_layers_vision=1\nn_layers_lm=1\nn_heads=2\nhead_dim=16\n"
      "patch=8\ntile_size=16\nshuffle_r=1\n");
  ModelConfig open = ModelConfig::from_kv(kv);
  CHECK(open.vocab_size == 0);
  CHECK_THROWS_AS(open.validate(), GeometryError);
  open.vocab_size = 99;
  CHECK_NOTHROW(open.validate());
  fs::remove_all(dir);
}

TEST_CASE("rope attention logits depend only on relative offsets") {
  std::mt19937_64 rng(3);
  Tensor q = Tensor::randn({2, 16}, rng, 1.0);
  Tensor k = Tensor::randn({2, 16}, rng, 1.0);
  auto dot_at = [&](int m, int n, double base) {
    auto [qr, kr] = apply_rope(q, k, {m, n}, base);
    double d = 0.0;
    for (std::size_t i = 0; i < 16; ++i) d += qr[i] * kr.data()[16 + i];
    return d;
  };
  for (double base : {10000.0, 273000.0}) {
    for (auto [m, n, s] : {std::tuple<int, int, int>{0, 5, 11}, {3, 3, 100}, {7, 2, 4000}}) {
      double a = dot_at(m, n, base);
      double b = dot_at(m + s, n + s, base);
      CHECK(std::abs(a - b) < 1e-9);
    }
  }
}

TEST_CASE("zeroed encoder reproduces its positional embedding") {
  ToyVLM model = tiny_model(5);
  Tensor pos = model.param("vision.pos_embed");
  for (auto& [name, t] : model.named_params()) {
    if (name.rfind("vision.", 0) == 0 && name != "vision.pos_embed") {
      std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    }
  }
  RawImage tile = noise_tile(16, 6);
  Tensor out = model.encode_tile(patchify(tile, 8));
  std::size_t side = model.config().vision_side();
  REQUIRE(out.shape() == Shape{side, side, 16});
  CHECK(out.data() == pos.data());
}

TEST_CASE("visual row counts follow the renderer layout") {
  ToyVLM model = tiny_model(7);
  // tokens_per_tile = (16/8)^2 / 1 = 4
  CHECK(model.config().tokens_per_tile() == 4);

  TileGrid single = split_into_tiles(noise_tile(16, 8), 16);
  Tensor rows1 = model.visual_rows({Segment::image_segment(single)});
  CHECK(rows1.shape() == Shape{4, 32});

  TileGrid four = split_into_tiles(noise_tile(32, 9), 16);
  REQUIRE(four.tiles.size() == 4);
  Tensor rows5 = model.visual_rows({Segment::image_segment(four)});
  CHECK(rows5.shape() == Shape{5 * 4, 32});

  FrameSet fsx;
  for (int i = 0; i < 3; ++i) {
    fsx.frames.push_back(noise_tile(16, 20 + i));
    fsx.timestamps.push_back(i);
  }
  Tensor rowsv = model.visual_rows({Segment::video_segment(fsx)});
  CHECK(rowsv.shape() == Shape{3 * 4, 32});

  CHECK_THROWS_AS(model.visual_rows({Segment::text_segment("nope")}), InputError);
}

TEST_CASE("forward validates shape and placeholder agreement") {
  ToyVLM model = tiny_model(11);
  CHECK_THROWS_AS(model.forward({}, {}, Tensor()), InputError);
  CHECK_THROWS_AS(model.forward({1, 2, 3}, {0}, Tensor()), GeometryError);

  Tensor logits = model.forward({1, 2, 3}, {}, Tensor());
  CHECK(logits.shape() == Shape{3, 48});
}

TEST_CASE("causal mask keeps earlier logits bitwise stable") {
  ToyVLM model = tiny_model(13);
  NoGradGuard ng;
  std::vector<int> ids{5, 9, 2, 7, 1, 3, 8, 4};
  Tensor a = model.forward(ids, {}, Tensor());
  ids[5] = 40;
  Tensor b = model.forward(ids, {}, Tensor());
  for (std::size_t t = 0; t < 5; ++t) {
    for (std::size_t vcol = 0; vcol < 48; ++vcol) {
      REQUIRE(a.at({t, vcol}) == b.at({t, vcol}));
    }
  }
  // and the changed position actually changes
  bool moved = false;
  for (std::size_t vcol = 0; vcol < 48; ++vcol) {
    if (a.at({5, vcol}) != b.at({5, vcol})) moved = true;
  }
  CHECK(moved);
}

TEST_CASE("full model gradients match finite differences") {
  ToyVLM model = tiny_model(17);
  TileGrid grid = split_into_tiles(noise_tile(16, 30), 16);
  std::vector<Segment> media{Segment::image_segment(grid)};
  std::vector<int> ids{10, 3, 3, 3, 3, 20, 21, 22, 23};
  std::vector<std::size_t> ph{1, 2, 3, 4};
  std::vector<std::uint8_t> mask{0, 0, 0, 0, 0, 0, 1, 1, 1};

  // next-token loss with the final row masked out, as in training
  std::vector<int> targets(ids.begin() + 1, ids.end());
  targets.push_back(0);
  std::vector<std::uint8_t> shifted(mask.begin() + 1, mask.end());
  shifted.push_back(0);
  auto forward = [&] {
    Tensor visual = model.visual_rows(media);
    Tensor logits = model.forward(ids, ph, visual);
    return cross_entropy_masked(logits, targets, shifted);
  };

  std::vector<Tensor> leaves{model.param("vision.patch_embed.b"), model.param("proj.b1"),
                             model.param("lm.final_ln.g"), model.param("lm.head.b"),
                             model.param("lm.block0.attn.bq")};
  auto res = gradcheck::check(forward, leaves, 1e-5);
  CHECK(res.max_rel_err < 1e-4);
  CHECK(res.checked > 100);
}

TEST_CASE("adam first step matches the closed form") {
  ToyVLM model = tiny_model(19);
  AdamState opt;
  Tensor bias = model.param("lm.head.b");
  std::vector<double> before = bias.data();

  GradMap grads;
  grads[bias.node_key()] = std::vector<double>(bias.numel(), 0.5);
  adam_step(model, opt, grads, 1e-2);

  double mhat = 0.5;
  double vhat = 0.25;
  double want = before[0] - 1e-2 * mhat / (std::sqrt(vhat) + 1e-8);
  for (std::size_t i = 0; i < bias.numel(); ++i) {
    CHECK(bias.data()[i] == doctest::Approx(before[i] + (want - before[0])).epsilon(1e-12));
  }
  CHECK(opt.step == 1);
}

TEST_CASE("zero learning rate leaves parameters bitwise untouched") {
  ToyVLM model = tiny_model(23);
  std::vector<std::vector<double>> before;
  for (auto& [name, t] : model.named_params()) before.push_back(t.data());

  AdamState opt;
  TrainSample s = text_sample("s0", {4, 5, 6, 7, 8}, {0, 1, 1, 1, 1});
  TrainStepResult r = train_step(model, {s}, opt, 0.0);
  CHECK(std::isfinite(r.loss));
  CHECK(r.token_count == 5);

  std::size_t i = 0;
  for (auto& [name, t] : model.named_params()) {
    CHECK(t.data() == before[i]);
    ++i;
  }
}

TEST_CASE("training is deterministic and loss falls on a repeated sample") {
  auto run = [] {
    ToyVLM model = tiny_model(29);
    AdamState opt;
    TrainSample s = text_sample("s0", {4, 5, 6, 7, 8, 9}, {0, 1, 1, 1, 1, 1});
    std::vector<double> losses;
    for (int step = 0; step < 30; ++step) {
      losses.push_back(train_step(model, {s, s}, opt, 5e-3).loss);
    }
    return losses;
  };
  std::vector<double> a = run();
  std::vector<double> b = run();
  CHECK(a == b);
  CHECK(a.back() < a.front());
}

TEST_CASE("worker count does not change the result") {
  auto run = [](const char* threads) {
    if (threads) {
      setenv("SMOLPIPE_THREADS", threads, 1);
    } else {
      unsetenv("SMOLPIPE_THREADS");
    }
    ToyVLM model = tiny_model(31);
    AdamState opt;
    TrainSample s1 = text_sample("a", {4, 5, 6, 7}, {0, 1, 1, 1});
    TrainSample s2 = text_sample("b", {9, 8, 7, 6, 5}, {0, 0, 1, 1, 1});
    TrainSample s3 = text_sample("c", {1, 2, 3}, {0, 1, 1});
    double loss = 0.0;
    for (int i = 0; i < 3; ++i) loss = train_step(model, {s1, s2, s3}, opt, 1e-3).loss;
    std::vector<double> snap;
    for (auto& [name, t] : model.named_params()) {
      snap.insert(snap.end(), t.data().begin(), t.data().end());
    }
    snap.push_back(loss);
    return snap;
  };
  std::vector<double> serial = run(nullptr);
  std::vector<double> threaded = run("4");
  unsetenv("SMOLPIPE_THREADS");
  CHECK(serial == threaded);
}

TEST_CASE("loss reacts to unmasked user inputs") {
  TrainSample s1 = text_sample("s", {4, 5, 6, 7, 8}, {0, 0, 0, 1, 1});
  TrainSample s2 = s1;
  s2.ids[1] = 33;  // user-side token, masked as a target but visible as input

  auto loss_of = [](const TrainSample& s) {
    ToyVLM model = tiny_model(37);
    AdamState opt;
    return train_step(model, {s}, opt, 0.0).loss;
  };
  CHECK(loss_of(s1) != loss_of(s2));
}

TEST_CASE("checkpoint round trip is bitwise") {
  fs::path dir = fs::temp_directory_path() / "smolpipe_ckpt";
  fs::remove_all(dir);
  ToyVLM model = tiny_model(41);
  model.save(dir);
  ToyVLM back = ToyVLM::load(dir);

  CHECK(back.config().d_model == model.config().d_model);
  CHECK(back.param_count() == model.param_count());
  REQUIRE(back.named_params().size() == model.named_params().size());
  for (std::size_t i = 0; i < model.named_params().size(); ++i) {
    CHECK(back.named_params()[i].first == model.named_params()[i].first);
    CHECK(back.named_params()[i].second.data() == model.named_params()[i].second.data());
  }

  NoGradGuard ng;
  std::vector<int> ids{3, 1, 4, 1, 5};
  CHECK(model.forward(ids, {}, Tensor()).data() == back.forward(ids, {}, Tensor()).data());

  save_tensor(Tensor::zeros({2, 2}), dir / "lm.head.b.smt");
  CHECK_THROWS_AS(ToyVLM::load(dir), InputError);
  fs::remove_all(dir);
}

TEST_CASE("parameter split covers the whole model") {
  ToyVLM model = tiny_model(43);
  CHECK(model.param_count() ==
        model.vision_param_count() + model.projector_param_count() + model.lm_param_count());
  CHECK(model.vision_param_count() > 0);
  CHECK(model.projector_param_count() > 0);
  CHECK(model.lm_param_count() > 0);
  CHECK_THROWS_AS(model.param("nope.w"), InputError);
}

TEST_CASE("context overflow reports the sample id") {
  ToyVLM model = tiny_model(47);
  AdamState opt;
  TrainSample big = text_sample("whale", std::vector<int>(8193, 1),
                                std::vector<std::uint8_t>(8193, 1));
  try {
    train_step(model, {big}, opt, 1e-3);
    FAIL("expected overflow");
  } catch (const ContextOverflowError& e) {
    CHECK(e.sample_id == "whale");
  }
}

TEST_CASE("greedy generation is deterministic and honors the end id") {
  ToyVLM model = tiny_model(53);
  TrainSample prompt = text_sample("p", {4, 5, 6}, {0, 0, 0});
  GenerationResult a = generate(model, prompt, -1, 6);
  GenerationResult b = generate(model, prompt, -1, 6);
  CHECK(a.new_ids == b.new_ids);
  CHECK(a.new_ids.size() == 6);
  CHECK_FALSE(a.hit_context_limit);

  // use the first generated token as the stop id: generation ends immediately
  GenerationResult c = generate(model, prompt, a.new_ids[0], 6);
  CHECK(c.new_ids.size() == 1);
  CHECK(c.new_ids[0] == a.new_ids[0]);
}
