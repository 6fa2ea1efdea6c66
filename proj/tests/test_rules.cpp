#include <doctest.h>

#include <cmath>

#include "scalelab/rules.hpp"

using namespace scalelab;

TEST_CASE("chinchilla token budget is exact") {
  CHECK(chinchilla_tokens(512, 6, 32101) == 706201600ULL);
  // V=0 reduces to 240 D^2 L
  CHECK(chinchilla_tokens(100, 3, 0) == 240ULL * 100 * 100 * 3);
  // doubling L doubles only the backbone term
  uint64_t l1 = chinchilla_tokens(64, 2, 1000);
  uint64_t l2 = chinchilla_tokens(64, 4, 1000);
  CHECK(l2 - l1 == 20ULL * 12 * 64 * 64 * 2);
  // wide-integer headroom at D = 2^20
  CHECK_NOTHROW(chinchilla_tokens(1 << 20, 64, 32101));
  CHECK_THROWS_AS(chinchilla_tokens((1 << 20) + 1, 1, 1), ConfigError);
}

TEST_CASE("flops formula") {
  double f = flops_estimate(18874368, 706201600);
  CHECK(f == doctest::Approx(7.997e16).epsilon(1e-3));
  CHECK(flops_estimate(123, 0) == 0.0);
  CHECK(flops_estimate(7, 11) == flops_estimate(11, 7));
  CHECK(u128_str(flops_exact(18874368, 706201600)) == "79974653283532800");
}

TEST_CASE("learning-rate rules") {
  LrRule constant{LrRule::Kind::constant, 2.0 / 1024.0};
  for (int64_t d : {64, 512, 4096}) CHECK(lr_for(constant, d, 6) == doctest::Approx(0.001953125));

  LrRule inv;
  inv.kind = LrRule::Kind::inv_width;
  CHECK(lr_for(inv, 512, 6) == doctest::Approx(0.00390625));

  LrRule depth;
  depth.kind = LrRule::Kind::depth_corrected;
  CHECK(lr_for(depth, 512, 6) == doctest::Approx(0.0046453).epsilon(1e-4));
  CHECK(lr_for(depth, 1024, 12) == doctest::Approx(1.4548e-3).epsilon(1e-4));
  // the depth factor is 1 at L = 6
  for (int64_t d : {128, 256, 2048})
    CHECK(lr_for(depth, d, 6) ==
          doctest::Approx(lr_for(inv, d, 6) * std::pow(2.0, 0.25)).epsilon(1e-12));
}

TEST_CASE("weight-decay rules") {
  WdRule scaled;
  scaled.kind = WdRule::Kind::scaled_inv_width;
  auto [wd512, mode512] = wd_for(scaled, 512);
  CHECK(wd512 == doctest::Approx(3.90625e-4));
  CHECK(mode512 == WdMode::independent);
  // lambda * D is constant across the ladder
  for (auto [d, f] : width_ladder("s51")) {
    (void)f;
    auto [wd, mode] = wd_for(scaled, d);
    CHECK(wd * static_cast<double>(d) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(mode == WdMode::independent);
  }

  WdRule mup;
  mup.kind = WdRule::Kind::mup_independent;
  mup.value = 0.000566;
  for (int64_t d : {128, 512, 4096}) {
    auto [wd, mode] = wd_for(mup, d);
    CHECK(wd == 0.000566);
    CHECK(mode == WdMode::independent);
  }

  WdRule off;
  off.value = 0.0;
  CHECK(wd_for(off, 512).first == 0.0);
}

TEST_CASE("the width ladder") {
  auto ladder = width_ladder("s51");
  REQUIRE(ladder.size() == 13);
  CHECK(ladder.front() == std::pair<int64_t, int64_t>{128, 512});
  CHECK(ladder[9] == std::pair<int64_t, int64_t>{3072, 12288});  // k=24
  CHECK(ladder.back() == std::pair<int64_t, int64_t>{6144, 24576});
  for (size_t i = 1; i < ladder.size(); ++i) CHECK(ladder[i].first > ladder[i - 1].first);
  CHECK_THROWS_AS(width_ladder("nope"), ConfigError);
}

TEST_CASE("materialize the fixed-steps point at D=3072") {
  ScalingRule rule;
  rule.name = "blue-const-lr";
  rule.width_depth = {WidthDepthPolicy::Kind::fixed_depth, 6, 512, 6};
  rule.lr = {LrRule::Kind::constant, 2.0 / 1024.0};
  rule.tokens = {TokenPolicy::Kind::fixed_steps, 200000};
  rule.batch = 256;
  BudgetPoint p = materialize(rule, 3072, 32101, 512);
  CHECK(p.tokens == 26214400000ULL);  // 2.62144e10
  CHECK(p.n_backbone == 679477248);
  CHECK(p.flops == doctest::Approx(1.069e20).epsilon(1e-3));
  CHECK(p.steps == 200000);
  CHECK(p.lr == doctest::Approx(0.001953125));
}

TEST_CASE("materialize the chinchilla point at D=512") {
  ScalingRule rule;
  rule.width_depth.depth = 6;
  rule.tokens.kind = TokenPolicy::Kind::chinchilla;
  rule.batch = 256;
  BudgetPoint p = materialize(rule, 512, 32101, 512);
  CHECK(p.tokens == 706201600ULL);
  CHECK(p.steps == static_cast<int64_t>((706201600ULL + 256 * 512 - 1) / (256 * 512)));
  CHECK(static_cast<uint64_t>(p.steps) * 256 * 512 >= p.tokens);
  // f / (6 N) == tokens exactly in integer mode
  unsigned __int128 f = flops_exact(static_cast<uint64_t>(p.n_backbone), p.tokens);
  CHECK(static_cast<uint64_t>(f / (6 * static_cast<unsigned __int128>(p.n_backbone))) == p.tokens);
}

TEST_CASE("materialize is pure") {
  ScalingRule rule;
  rule.tokens.kind = TokenPolicy::Kind::chinchilla;
  BudgetPoint a = materialize(rule, 256, 5000, 128);
  BudgetPoint b = materialize(rule, 256, 5000, 128);
  CHECK(a.tokens == b.tokens);
  CHECK(a.lr == b.lr);
  CHECK(a.weight_decay == b.weight_decay);
  CHECK(a.steps == b.steps);
  CHECK(a.flops == b.flops);
}

TEST_CASE("fixed-aspect depth rounding") {
  WidthDepthPolicy aspect{WidthDepthPolicy::Kind::fixed_aspect, 6, 512, 6};
  CHECK(aspect.layers_for(512) == 6);
  CHECK(aspect.layers_for(1024) == 12);
  CHECK(aspect.layers_for(128) == 2);   // 1.5 -> at least 2
  CHECK(aspect.layers_for(256) == 4);   // 3 -> nearest even, away from zero
  CHECK(aspect.layers_for(768) == 10);  // 9 -> 10
}

TEST_CASE("rule presets materialize consistently") {
  for (const std::string& name : rule_preset_names()) {
    RulePreset p = rule_preset(name);
    CHECK(p.rule.name == name);
    BudgetPoint pt = materialize(p.rule, 512, 32101, 512, p.activation);
    CHECK(pt.tokens > 0);
    CHECK(pt.lr > 0);
  }
  // spot-check the documented mappings
  RulePreset blue = rule_preset("blue-const-lr");
  CHECK(blue.rule.lr.kind == LrRule::Kind::constant);
  CHECK(materialize(blue.rule, 3072, 32101, 512).lr == doctest::Approx(2.0 / 1024.0));

  RulePreset mup = rule_preset("mup-const-wd");
  CHECK(mup.parametrization == Parametrization::mup);
  BudgetPoint mp = materialize(mup.rule, 1024, 32101, 512);
  CHECK(mp.weight_decay == doctest::Approx(0.000566));
  CHECK(mp.wd_mode == WdMode::independent);
  CHECK(mp.lr == doctest::Approx(0.0055));

  RulePreset red = rule_preset("red-scaled-wd");
  BudgetPoint rp = materialize(red.rule, 1024, 32101, 512);
  CHECK(rp.weight_decay == doctest::Approx(0.1 * 2.0 / 1024.0));
  CHECK(rp.lr == doctest::Approx(2.0 / 1024.0));

  RulePreset geglu = rule_preset("blue-geglu-gradnorm");
  CHECK(geglu.activation == Activation::geglu);
  BudgetPoint gp = materialize(geglu.rule, 512, 32101, 512, Activation::geglu);
  CHECK(gp.d_ff == 6 * 512);
  CHECK(gp.weight_decay == doctest::Approx(4.0 * 0.2 / 512.0));
  CHECK_THROWS_AS(rule_preset("unknown"), ConfigError);
}
