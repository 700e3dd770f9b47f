#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>
#include <sstream>
#include <string>

#include "smolpipe/budget.hpp"
#include "smolpipe/common.hpp"

using namespace smolpipe;

namespace {

PipelineConfig preset_256m() {
  PipelineConfig c;
  c.encoder_params = 93'000'000;
  c.lm_params = 135'000'000;
  c.tile_size = 512;
  c.patch = 16;
  c.shuffle_r = 4;
  c.longest_edge_cap = 1920;
  c.context_limit = 8192;
  c.n_layers_lm = 30;
  c.n_heads = 9;
  c.head_dim = 64;
  c.validate();
  return c;
}

PipelineConfig preset_500m() {
  PipelineConfig c = preset_256m();
  c.lm_params = 360'000'000;
  c.n_layers_lm = 32;
  c.n_heads = 15;
  return c;
}

PipelineConfig preset_2_2b() {
  PipelineConfig c = preset_256m();
  c.encoder_params = 428'000'000;
  c.lm_params = 1'700'000'000;
  c.shuffle_r = 2;
  c.longest_edge_cap = 1536;
  c.context_limit = 16384;
  c.n_layers_lm = 24;
  c.n_heads = 32;
  return c;
}

}  // namespace

TEST_CASE("image token arithmetic frozen cases") {
  PipelineConfig cfg = preset_256m();
  CHECK(cfg.tokens_per_tile() == 64);

  ImageTokenCount single = image_token_count(cfg, 512, 512);
  CHECK(single.tiles == 0);
  CHECK(single.visual_tokens == 64);
  CHECK(single.marker_tokens == 1);
  CHECK(single.total() == 65);

  PipelineConfig r1 = cfg;
  r1.shuffle_r = 1;
  ImageTokenCount full = image_token_count(r1, 512, 512);
  CHECK(full.visual_tokens == 1024);

  // 1920x960 at cap 1920: 4x2 grid, 9 sub-images
  ImageTokenCount wide = image_token_count(cfg, 960, 1920);
  CHECK(wide.rows == 2);
  CHECK(wide.cols == 4);
  CHECK(wide.tiles == 8);
  CHECK(wide.visual_tokens == 9 * 64);
  CHECK(wide.visual_tokens == 576);
  CHECK(wide.marker_tokens == 9);
}

TEST_CASE("token count is monotone in r and cap") {
  PipelineConfig base = preset_256m();
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{512, 512},
                      {960, 1920},
                      {2048, 2048},
                      {333, 4001}}) {
    std::size_t prev = SIZE_MAX;
    for (std::size_t r : {1, 2, 4}) {
      PipelineConfig c = base;
      c.shuffle_r = r;
      std::size_t tokens = image_token_count(c, h, w).visual_tokens;
      CHECK(tokens <= prev);
      prev = tokens;
    }

    PipelineConfig lo = base;
    lo.longest_edge_cap = 1536;
    PipelineConfig hi = base;
    hi.longest_edge_cap = 1920;
    CHECK(image_token_count(lo, h, w).tiles <= image_token_count(hi, h, w).tiles);
    CHECK(image_token_count(lo, h, w).total() <= image_token_count(hi, h, w).total());
  }
}

TEST_CASE("shuffle factor trades tokens exactly r squared") {
  PipelineConfig r2 = preset_256m();
  r2.shuffle_r = 2;
  PipelineConfig r4 = preset_256m();
  ImageTokenCount a = image_token_count(r2, 960, 1920);
  ImageTokenCount b = image_token_count(r4, 960, 1920);
  CHECK(a.visual_tokens == 4 * b.visual_tokens);
}

TEST_CASE("kv cache micro arithmetic") {
  PipelineConfig c;
  c.encoder_params = 1;
  c.lm_params = 1;
  c.n_layers_lm = 2;
  c.n_heads = 2;
  c.head_dim = 8;
  CHECK(kv_cache_bytes(c, 16, 1, 4) == 4096);
  CHECK(kv_cache_bytes(c, 0, 1, 4) == 0);
}

TEST_CASE("kv cache is exactly linear in batch and seq") {
  PipelineConfig c = preset_500m();
  for (std::size_t seq : {1, 100, 8192}) {
    for (std::size_t b : {1, 2, 16}) {
      CHECK(kv_cache_bytes(c, seq, 2 * b, 2) == 2 * kv_cache_bytes(c, seq, b, 2));
      CHECK(kv_cache_bytes(c, 2 * seq, b, 2) == 2 * kv_cache_bytes(c, seq, b, 2));
      CHECK(kv_cache_bytes(c, seq, b, 2) ==
            static_cast<std::uint64_t>(seq) * b * kv_cache_bytes(c, 1, 1, 2));
    }
  }
}

TEST_CASE("allocation regimes label the preset parameter splits") {
  AllocationReport big_enc = allocation_report(428'000'000, 135'000'000);
  CHECK(big_enc.ratio == doctest::Approx(428.0 / 563.0).epsilon(1e-9));
  CHECK(big_enc.ratio == doctest::Approx(0.76).epsilon(0.01));
  CHECK(big_enc.regime == AllocationRegime::EncoderDominant);
  CHECK(big_enc.label == "encoder-dominant");

  AllocationReport small_enc = allocation_report(93'000'000, 1'700'000'000);
  CHECK(small_enc.ratio == doctest::Approx(0.05).epsilon(0.05));
  CHECK(small_enc.regime == AllocationRegime::LmDominant);
  CHECK(small_enc.label == "lm-dominant");

  AllocationReport mid = allocation_report(93'000'000, 360'000'000);
  CHECK(mid.regime == AllocationRegime::Balanced);

  // invariant under uniform scaling
  AllocationReport scaled = allocation_report(428, 135);
  CHECK(scaled.regime == big_enc.regime);
  CHECK(scaled.ratio == doctest::Approx(big_enc.ratio).epsilon(1e-12));

  CHECK_THROWS_AS(allocation_report(0, 10), GeometryError);
}

TEST_CASE("single-category mixture is constant") {
  MixtureSpec spec;
  spec.fractions = {{"a", 1.0}};
  MixturePlan plan = plan_mixture(spec, 50);
  CHECK(plan.sequence.size() == 50);
  for (const std::string& s : plan.sequence) CHECK(s == "a");
  CHECK(plan.counts.at("a") == 50);
  CHECK_FALSE(plan.rare_warning);
}

TEST_CASE("paper fractions land within half a percent at ten thousand") {
  MixtureSpec spec;
  spec.fractions = {{"text", 0.14}, {"video", 0.33}, {"image", 0.53}};
  spec.seed = 7;
  MixturePlan plan = plan_mixture(spec, 10000);
  CHECK(plan.sequence.size() == 10000);
  for (const auto& [name, f] : spec.fractions) {
    double realized = static_cast<double>(plan.counts.at(name)) / 10000.0;
    CHECK(std::abs(realized - f) <= 0.005);
  }
}

TEST_CASE("tiny CoT fraction yields exactly five of ten thousand") {
  MixtureSpec spec;
  spec.fractions = {{"cot", 0.0005}, {"rest", 0.9995}};
  spec.seed = 3;
  MixturePlan plan = plan_mixture(spec, 10000);
  CHECK(plan.counts.at("cot") == 5);
  CHECK(plan.counts.at("rest") == 9995);
}

TEST_CASE("largest-remainder bound holds at every prefix") {
  MixtureSpec spec;
  spec.fractions = {{"a", 0.61}, {"b", 0.29}, {"c", 0.1}};
  spec.seed = 11;
  MixturePlan plan = plan_mixture(spec, 500);
  std::map<std::string, std::size_t> running;
  for (std::size_t t = 0; t < plan.sequence.size(); ++t) {
    running[plan.sequence[t]]++;
    for (const auto& [name, f] : spec.fractions) {
      double want = (t + 1) * f;
      double got = static_cast<double>(running[name]);
      CHECK(std::abs(got - want) <= 3.0);
    }
  }
}

TEST_CASE("mixture plans are deterministic under seed") {
  MixtureSpec spec;
  spec.fractions = {{"x", 0.5}, {"y", 0.25}, {"z", 0.25}};
  spec.seed = 21;
  MixturePlan a = plan_mixture(spec, 777);
  MixturePlan b = plan_mixture(spec, 777);
  CHECK(a.sequence == b.sequence);
}

TEST_CASE("rare categories flag small runs") {
  MixtureSpec spec;
  spec.fractions = {{"cot", 0.0005}, {"rest", 0.9995}};
  MixturePlan plan = plan_mixture(spec, 100);
  CHECK(plan.rare_warning);
  MixturePlan ok = plan_mixture(spec, 10000);
  CHECK_FALSE(ok.rare_warning);
}

TEST_CASE("mixture validation") {
  MixtureSpec bad_sum;
  bad_sum.fractions = {{"a", 0.5}, {"b", 0.4}};
  CHECK_THROWS_AS(bad_sum.validate(), GeometryError);

  MixtureSpec neg;
  neg.fractions = {{"a", -0.1}, {"b", 1.1}};
  CHECK_THROWS_AS(neg.validate(), GeometryError);

  MixtureSpec empty;
  CHECK_THROWS_AS(empty.validate(), GeometryError);

  MixtureSpec good;
  good.fractions = {{"a", 0.5}, {"b", 0.5}};
  CHECK_NOTHROW(good.validate());
}

TEST_CASE("pipeline config validation") {
  PipelineConfig c = preset_256m();
  CHECK_NOTHROW(c.validate());

  PipelineConfig bad = c;
  bad.longest_edge_cap = 100;  // smaller than tile
  CHECK_THROWS_AS(bad.validate(), GeometryError);

  bad = c;
  bad.patch = 100;
  CHECK_THROWS_AS(bad.validate(), GeometryError);

  bad = c;
  bad.encoder_params = 0;
  CHECK_THROWS_AS(bad.validate(), GeometryError);
}

TEST_CASE("video tokens default to the single-tile count") {
  PipelineConfig c = preset_256m();
  CHECK(c.tokens_per_frame == 0);
  CHECK(c.effective_tokens_per_frame() == c.tokens_per_tile());
  CHECK(video_token_count(c) == 8 * 64);

  c.tokens_per_frame = 81;
  CHECK(video_token_count(c) == 8 * 81);
}

TEST_CASE("budget rows order by total parameters and RAM") {
  Workload load;
  std::vector<std::pair<std::string, PipelineConfig>> configs = {
      {"smolvlm-2.2b", preset_2_2b()},
      {"smolvlm-256m", preset_256m()},
      {"smolvlm-500m", preset_500m()},
  };
  std::vector<BudgetReport> rows = compare_configs(configs, load);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].name == "smolvlm-256m");
  CHECK(rows[1].name == "smolvlm-500m");
  CHECK(rows[2].name == "smolvlm-2.2b");
  CHECK(rows[0].param_bytes < rows[1].param_bytes);
  CHECK(rows[1].param_bytes < rows[2].param_bytes);
  CHECK(rows[0].est_ram_gb < rows[1].est_ram_gb);
  CHECK(rows[1].est_ram_gb < rows[2].est_ram_gb);
  for (const BudgetReport& r : rows) {
    CHECK(r.est_ram_gb > 0.0);
    CHECK(r.kv_bytes > 0);
    CHECK(r.context_occupancy > 0.0);
  }

  std::vector<BudgetReport> one = compare_configs({{"only", preset_500m()}}, load);
  CHECK(one.size() == 1);
}

TEST_CASE("occupancy flags context overflow") {
  PipelineConfig c = preset_256m();
  Workload load;
  load.image_height = 4000;
  load.image_width = 4000;
  load.text_tokens = 9000;
  BudgetReport r = budget_report("x", c, load);
  CHECK(r.context_occupancy > 1.0);
  CHECK(r.over_context);
}

TEST_CASE("budget csv is rfc4180 with a header") {
  Workload load;
  std::vector<BudgetReport> rows =
      compare_configs({{"a,comma", preset_256m()}, {"plain", preset_500m()}}, load);
  std::ostringstream os;
  write_budget_csv(os, rows);
  std::string text = os.str();
  CHECK(text.rfind("name,tiles,rows,cols,", 0) == 0);
  CHECK(text.find("\"a,comma\"") != std::string::npos);
  std::size_t lines = 0;
  std::size_t pos = 0;
  while ((pos = text.find("\r\n", pos)) != std::string::npos) {
    ++lines;
    pos += 2;
  }
  CHECK(lines == 3);
}

TEST_CASE("pipeline config files parse with line errors") {
  KeyValueFile kv = KeyValueFile::parse_string(
      "encoder_params=93000000\nlm_params=135000000\ntile_size=512\npatch=16\nshuffle_r=4\n"
      "longest_edge_cap=1920\ncontext_limit=8192\nn_layers_lm=30\nn_heads=9\nhead_dim=64\n");
  PipelineConfig c = PipelineConfig::from_kv(kv);
  CHECK(c.lm_params == 135'000'000);
  CHECK(c.tokens_per_tile() == 64);

  try {
    KeyValueFile::parse_string("tile_size=512\nbroken line\n", "cfg.txt");
    FAIL("expected parse error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("cfg.txt:2") != std::string::npos);
  }
}
