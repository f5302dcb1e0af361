#include "doctest.h"

#include <cmath>

#include "support.hpp"
#include "ttav/backbone.hpp"
#include "ttav/gradcheck.hpp"

using namespace ttav;
using namespace ttav::backbone;

namespace {

BackboneConfig toy(std::int64_t width, int layers, int heads) {
  return {codec::kVocab, {width, layers, heads, 2 * width}};
}

ParameterSet<float> make_params(const BackboneConfig& cfg, std::uint64_t seed) {
  ParameterSet<float> ps;
  Rng rng(seed);
  backbone::init(ps, cfg, rng);
  init_stop(ps, cfg.body.width, rng);
  return ps;
}

Tensor<float> hidden(const ParameterSet<float>& ps, const BackboneConfig& cfg,
                     const Tensor<float>& tokens) {
  ag::Graph<float> g(false);
  Binder<float> b(g, ps, false);
  return forward_hidden(b, cfg, g.constant(tokens)).tensor();
}

Tensor<float> tokens_of(const ParameterSet<float>& ps, const std::vector<int>& text,
                        const Tensor<float>& audio, const Tensor<float>* video, FusionMode mode,
                        Task task) {
  ag::Graph<float> g(false);
  Binder<float> b(g, ps, false);
  ag::Var<float> v;
  if (video) v = g.constant(*video);
  return build_sequence(b, text, g.constant(audio), v, mode, task).tokens.tensor();
}

std::vector<FusionMode> all_modes() {
  return {FusionMode::add(), FusionMode::interleaved_av(), FusionMode::interleaved_va(),
          FusionMode::delayed(1), FusionMode::delayed(3)};
}

}  // namespace

TEST_CASE("layout lengths for five symbols and three patches") {
  CHECK(plan_layout(5, 3, FusionMode::add(), Task::T2AV).length() == 9);
  const auto iav = plan_layout(5, 3, FusionMode::interleaved_av(), Task::T2AV);
  REQUIRE(iav.length() == 12);
  const std::vector<Role> tail(iav.roles.begin() + 6, iav.roles.end());
  CHECK(tail == std::vector<Role>{Role::Audio, Role::Video, Role::Audio, Role::Video, Role::Audio,
                                  Role::Video});
  const auto iva = plan_layout(5, 3, FusionMode::interleaved_va(), Task::T2AV);
  CHECK(iva.roles[6] == Role::Video);
  CHECK(iva.roles[7] == Role::Audio);
  CHECK(plan_layout(5, 3, FusionMode::delayed(2), Task::T2AV).length() == 11);
}

TEST_CASE("layout laws hold over random sizes and modes") {
  Rng rng(41);
  for (int trial = 0; trial < 300; ++trial) {
    const auto m = static_cast<std::int64_t>(rng.uniform_int(0, 12));
    const auto n = static_cast<std::int64_t>(rng.uniform_int(1, 10));
    const int k = static_cast<int>(rng.uniform_int(1, 12));
    const Task task = rng.uniform() < 0.5 ? Task::TTS : Task::T2AV;
    for (const auto& mode : {FusionMode::add(), FusionMode::interleaved_av(),
                             FusionMode::interleaved_va(), FusionMode::delayed(k)}) {
      const auto p = plan_layout(m, n, mode, task);
      INFO("M=" << m << " N=" << n << " mode " << mode.name());
      std::int64_t expected = 1 + m + n;
      if (mode.kind == FusionKind::InterleavedAV || mode.kind == FusionKind::InterleavedVA) expected += n;
      if (mode.kind == FusionKind::Delay) expected += k;
      REQUIRE(p.length() == expected);
      CHECK(p.roles[0] == Role::TaskTag);
      for (std::int64_t i = 1; i <= m; ++i) CHECK(p.roles[i] == Role::Text);
      for (std::int64_t i = m + 1; i < p.length(); ++i) {
        CHECK(p.roles[i] != Role::Text);
        CHECK(p.roles[i] != Role::TaskTag);
      }

      REQUIRE(static_cast<std::int64_t>(p.audio_from.size()) == n);
      REQUIRE(static_cast<std::int64_t>(p.video_from.size()) == (task == Task::TTS ? 0 : n));
      REQUIRE(static_cast<std::int64_t>(p.stop_labels.size()) == n);
      for (std::int64_t i = 0; i < n; ++i) {
        CHECK(p.stop_labels[i] == (i == n - 1 ? 1 : 0));
        // The state predicting patch i must sit strictly before its token.
        std::int64_t audio_at = -1, video_at = -1;
        for (std::int64_t pos = 0; pos < p.length(); ++pos) {
          for (const auto* s : {&p.first[pos], &p.second[pos]}) {
            if (s->kind == SourceKind::Audio && s->index == i) audio_at = pos;
            if (s->kind == SourceKind::Video && s->index == i) video_at = pos;
          }
        }
        REQUIRE(audio_at >= 0);
        CHECK(p.audio_from[i] == audio_at - 1);
        CHECK(p.audio_from[i] >= m);
        if (task == Task::T2AV) {
          REQUIRE(video_at >= 0);
          CHECK(p.video_from[i] == video_at - 1);
        } else {
          CHECK(video_at == -1);
        }
        // Stop labels sit at a position that has seen both streams of patch i.
        CHECK(p.stop_positions[i] >= audio_at);
      }
    }
  }
}

TEST_CASE("invalid layouts are rejected") {
  CHECK_THROWS_AS(plan_layout(3, 0, FusionMode::add(), Task::T2AV), ShapeError);
  CHECK_THROWS_AS(plan_layout(-1, 2, FusionMode::add(), Task::T2AV), ShapeError);
  CHECK_THROWS_AS(FusionMode::delayed(0), ConfigError);
  CHECK_THROWS_AS(FusionMode::parse("delay:x"), ConfigError);
  CHECK(FusionMode::parse("delay:3") == FusionMode::delayed(3));
  CHECK(FusionMode::parse(FusionMode::interleaved_va().name()) == FusionMode::interleaved_va());
}

TEST_CASE("build_sequence forms the documented sums") {
  const auto cfg = toy(8, 1, 2);
  auto ps = make_params(cfg, 5);
  testing::randomize(ps, 6);
  const std::vector<int> text{3, 0, 63};
  const auto audio = testing::random_tensor({3, 8}, Rng(7));
  const auto video = testing::random_tensor({3, 8}, Rng(8));
  const auto& tag = ps.at("backbone.task_tag");
  const auto& table = ps.at("backbone.text_embedding");
  const auto pad = pad_embedding(ps);

  auto expect_row = [](const Tensor<float>& t, std::int64_t r, const std::vector<float>& want) {
    for (std::int64_t c = 0; c < t.cols(); ++c) CHECK(t.at(r, c) == doctest::Approx(want[c]).epsilon(1e-7));
  };
  auto row = [](const Tensor<float>& t, std::int64_t r) {
    return std::vector<float>(t.row(r).begin(), t.row(r).end());
  };
  auto plus = [](std::vector<float> a, const std::vector<float>& b) {
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
    return a;
  };
  const std::vector<float> padv(pad.begin(), pad.end());

  const auto add = tokens_of(ps, text, audio, &video, FusionMode::add(), Task::T2AV);
  expect_row(add, 0, row(tag, 1));
  expect_row(add, 1, row(table, 3));
  expect_row(add, 3, row(table, 63));
  for (std::int64_t i = 0; i < 3; ++i) expect_row(add, 4 + i, plus(row(audio, i), row(video, i)));

  const auto va = tokens_of(ps, text, audio, &video, FusionMode::interleaved_va(), Task::T2AV);
  for (std::int64_t i = 0; i < 3; ++i) {
    expect_row(va, 4 + 2 * i, row(video, i));
    expect_row(va, 5 + 2 * i, row(audio, i));
  }

  const auto d2 = tokens_of(ps, text, audio, &video, FusionMode::delayed(2), Task::T2AV);
  REQUIRE(d2.rows() == 9);
  expect_row(d2, 4, plus(row(audio, 0), padv));
  expect_row(d2, 5, plus(row(audio, 1), padv));
  expect_row(d2, 6, plus(row(audio, 2), row(video, 0)));
  expect_row(d2, 7, plus(padv, row(video, 1)));
  expect_row(d2, 8, plus(padv, row(video, 2)));

  const auto tts = tokens_of(ps, text, audio, &video, FusionMode::add(), Task::TTS);
  expect_row(tts, 0, row(tag, 0));
  for (std::int64_t i = 0; i < 3; ++i) expect_row(tts, 4 + i, plus(row(audio, i), padv));
}

TEST_CASE("build_sequence input errors") {
  const auto cfg = toy(8, 1, 2);
  const auto ps = make_params(cfg, 5);
  const auto a3 = testing::random_tensor({3, 8}, Rng(1));
  const auto v2 = testing::random_tensor({2, 8}, Rng(2));
  const auto narrow = testing::random_tensor({3, 7}, Rng(3));
  CHECK_THROWS_AS(tokens_of(ps, {1}, a3, &v2, FusionMode::add(), Task::T2AV), ShapeError);
  CHECK_THROWS_AS(tokens_of(ps, {1}, a3, &v2, FusionMode::interleaved_av(), Task::T2AV), ShapeError);
  CHECK_THROWS_AS(tokens_of(ps, {1}, a3, nullptr, FusionMode::add(), Task::T2AV), ShapeError);
  CHECK_THROWS_AS(tokens_of(ps, {1}, narrow, &a3, FusionMode::add(), Task::T2AV), ShapeError);
  CHECK_THROWS_AS(tokens_of(ps, {64}, a3, &a3, FusionMode::add(), Task::T2AV), DomainError);
  CHECK_NOTHROW(tokens_of(ps, {1}, a3, nullptr, FusionMode::add(), Task::TTS));
}

TEST_CASE("task tags are distinct rows at initialization") {
  const auto ps = make_params(toy(16, 1, 2), 9);
  CHECK(max_abs_diff(tag_token(ps, Task::TTS), tag_token(ps, Task::T2AV)) > 1e-3);
}

TEST_CASE("single-layer single-head backbone matches a masked attention oracle") {
  const auto cfg = toy(4, 1, 1);
  auto ps = make_params(cfg, 10);
  testing::randomize(ps, 11);
  const auto x = testing::random_tensor({6, 4}, Rng(12));
  std::vector<std::int64_t> pos{0, 1, 2, 3, 4, 5};
  const auto h = testing::block(ps, "backbone.body.layers.0", testing::to_mat(x), 1, true, &pos);
  const auto expected = testing::layer_norm(ps, "backbone.final_ln", h);
  CHECK(testing::max_diff(expected, hidden(ps, cfg, x)) < 1e-5);
}

TEST_CASE("two-head two-layer backbone matches the oracle") {
  const auto cfg = toy(8, 2, 2);
  auto ps = make_params(cfg, 13);
  testing::randomize(ps, 14, 0.3);
  const auto x = testing::random_tensor({7, 8}, Rng(15));
  std::vector<std::int64_t> pos{0, 1, 2, 3, 4, 5, 6};
  auto h = testing::block(ps, "backbone.body.layers.0", testing::to_mat(x), 2, true, &pos);
  h = testing::block(ps, "backbone.body.layers.1", h, 2, true, &pos);
  CHECK(testing::max_diff(testing::layer_norm(ps, "backbone.final_ln", h), hidden(ps, cfg, x)) < 1e-5);
}

TEST_CASE("perturbing position j leaves every earlier state bit-identical") {
  const auto cfg = toy(16, 4, 4);
  auto ps = make_params(cfg, 16);
  testing::randomize(ps, 17, 0.3);
  const std::int64_t len = 12;
  const auto x = testing::random_tensor({len, 16}, Rng(18));
  const auto base = hidden(ps, cfg, x);
  for (std::int64_t j = 0; j < len; ++j) {
    auto y = x;
    for (std::int64_t c = 0; c < 16; ++c) y.at(j, c) += 0.75f * static_cast<float>(c % 3 - 1) + 0.1f;
    const auto h = hidden(ps, cfg, y);
    for (std::int64_t i = 0; i < j; ++i) {
      INFO("i=" << i << " j=" << j);
      CHECK(base.slice_rows(i, 1) == h.slice_rows(i, 1));
    }
    CHECK(max_abs_diff(base.slice_rows(j, 1), h.slice_rows(j, 1)) > 0.0);
  }
}

TEST_CASE("a single token's state depends only on that token") {
  const auto cfg = toy(8, 2, 2);
  const auto ps = make_params(cfg, 19);
  const auto x = testing::random_tensor({1, 8}, Rng(20));
  const auto longer = testing::random_tensor({5, 8}, Rng(21));
  auto seq = longer;
  for (std::int64_t c = 0; c < 8; ++c) seq.at(0, c) = x.at(0, c);
  CHECK(max_abs_diff(hidden(ps, cfg, x), hidden(ps, cfg, seq).slice_rows(0, 1)) <= 1e-6);
}

TEST_CASE("cached incremental forward agrees with the full pass") {
  const auto cfg = toy(16, 4, 4);
  auto ps = make_params(cfg, 22);
  testing::randomize(ps, 23, 0.3);
  const std::int64_t len = 10;
  const auto x = testing::random_tensor({len, 16}, Rng(24));
  const auto full = hidden(ps, cfg, x);

  auto one = make_cache(cfg);
  for (std::int64_t i = 0; i < len; ++i) {
    const auto h = incremental_forward(ps, cfg, one, x.slice_rows(i, 1));
    CHECK(one.length == i + 1);
    CHECK(max_abs_diff(h, full.slice_rows(i, 1)) <= 1e-5);
  }

  auto chunked = make_cache(cfg);
  const auto first = incremental_forward(ps, cfg, chunked, x.slice_rows(0, 4));
  const auto rest = incremental_forward(ps, cfg, chunked, x.slice_rows(4, 6));
  CHECK(chunked.length == len);
  CHECK(max_abs_diff(first, full.slice_rows(0, 4)) <= 1e-5);
  CHECK(max_abs_diff(rest, full.slice_rows(4, 6)) <= 1e-5);

  auto fresh = make_cache(cfg);
  CHECK(max_abs_diff(incremental_forward(ps, cfg, fresh, x.slice_rows(0, 1)),
                     hidden(ps, cfg, x.slice_rows(0, 1))) <= 1e-5);
}

TEST_CASE("cache and parameter mismatches are rejected") {
  const auto cfg = toy(8, 2, 2);
  const auto ps = make_params(cfg, 25);
  auto wrong = make_cache(toy(8, 3, 2));
  CHECK_THROWS_AS(incremental_forward(ps, cfg, wrong, Tensor<float>({1, 8})), ShapeError);
  auto c = make_cache(cfg);
  CHECK_THROWS_AS(incremental_forward(ps, cfg, c, Tensor<float>({1, 7})), ShapeError);
  incremental_forward(ps, cfg, c, Tensor<float>({1, 8}));
  c.layers[1].len = 5;
  CHECK_THROWS_AS(incremental_forward(ps, cfg, c, Tensor<float>({1, 8})), ShapeError);
  CHECK_THROWS_AS(hidden(ps, cfg, Tensor<float>({2, 7})), ShapeError);
}

TEST_CASE("TTS states ignore the original video embeddings") {
  const auto cfg = toy(16, 2, 2);
  auto ps = make_params(cfg, 26);
  testing::randomize(ps, 27, 0.3);
  const std::vector<int> text{5, 9, 2, 40};
  const auto audio = testing::random_tensor({4, 16}, Rng(28));
  Tensor<float> pads({4, 16});
  const auto pad = pad_embedding(ps);
  for (std::int64_t r = 0; r < 4; ++r) std::copy(pad.begin(), pad.end(), pads.row(r).begin());
  for (const auto& mode : all_modes()) {
    const auto ref = hidden(ps, cfg, tokens_of(ps, text, audio, nullptr, mode, Task::TTS));
    for (std::uint64_t s = 0; s < 3; ++s) {
      const auto video = testing::random_tensor({4, 16}, Rng(30 + s), 3.0);
      CHECK(hidden(ps, cfg, tokens_of(ps, text, audio, &video, mode, Task::TTS)) == ref);
    }
    CHECK(hidden(ps, cfg, tokens_of(ps, text, audio, &pads, mode, Task::TTS)) == ref);
  }
}

TEST_CASE("T2AV states respond to a changed video embedding at or after its slot") {
  const auto cfg = toy(16, 2, 2);
  auto ps = make_params(cfg, 33);
  testing::randomize(ps, 34, 0.3);
  const std::vector<int> text{1, 2};
  const auto audio = testing::random_tensor({4, 16}, Rng(35));
  const auto video = testing::random_tensor({4, 16}, Rng(36));
  for (const auto& mode : all_modes()) {
    const auto plan = plan_layout(2, 4, mode, Task::T2AV);
    const auto ref = hidden(ps, cfg, tokens_of(ps, text, audio, &video, mode, Task::T2AV));
    for (std::int64_t i = 0; i < 4; ++i) {
      auto v = video;
      v.at(i, 0) += 1.0f;
      const auto h = hidden(ps, cfg, tokens_of(ps, text, audio, &v, mode, Task::T2AV));
      const auto slot = plan.video_from[static_cast<std::size_t>(i)] + 1;
      CHECK(h.slice_rows(0, slot) == ref.slice_rows(0, slot));
      CHECK(max_abs_diff(h, ref) > 1e-6);
    }
  }
}

TEST_CASE("stop probability is the sigmoid of the MLP logit") {
  const auto cfg = toy(8, 1, 2);
  auto ps = make_params(cfg, 37);
  const auto h = testing::random_tensor({1, 8}, Rng(38));
  for (auto& v : ps.at("stop.fc2.w").storage()) v = 0.0f;
  ps.at("stop.fc2.b")[0] = 0.0f;
  CHECK(stop_probability(ps, h.row(0)) == 0.5);
  ps.at("stop.fc2.b")[0] = 10.0f;
  CHECK(stop_probability(ps, h.row(0)) == doctest::Approx(0.9999546021).epsilon(1e-9));

  testing::randomize(ps, 39);
  const auto fc1 = testing::linear(ps, "stop.fc1", testing::to_mat(h));
  const double logit = testing::linear(ps, "stop.fc2", testing::gelu(fc1))(0, 0);
  CHECK(stop_logit(ps, h.row(0)) == doctest::Approx(logit).epsilon(1e-5));

  // Monotone in the logit via the output bias.
  double prev = 0.0;
  for (float bias : {-3.0f, -1.0f, 0.0f, 2.0f, 5.0f}) {
    ps.at("stop.fc2.b")[0] = bias;
    const double p = stop_probability(ps, h.row(0));
    CHECK(p > prev);
    CHECK(p < 1.0);
    prev = p;
  }
}

TEST_CASE("stop weight is the continue-to-stop ratio") {
  CHECK(stop_weight(std::vector<int>{0, 0, 0, 1}) == 3.0);
  CHECK(stop_weight(std::vector<int>{0, 1, 0, 1, 0, 0}) == 2.0);
  CHECK(stop_weight(std::vector<int>{1}) == 0.0);
  CHECK_THROWS_AS(stop_weight(std::vector<int>{0, 0}), DomainError);
  CHECK_THROWS_AS(stop_weight(std::vector<int>{0, 2}), DomainError);
}

TEST_CASE("stop loss examples") {
  CHECK(stop_loss(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 1}, 1.0) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const double exact = stop_loss(std::vector<double>{0.0, 0.0, 0.0, 1.0}, std::vector<int>{0, 0, 0, 1});
  CHECK(exact < 1e-6);
  CHECK(exact > 0.0);
  // Weight 3 on the single stop example.
  const double w = stop_loss(std::vector<double>{0.2, 0.2, 0.2, 0.4}, std::vector<int>{0, 0, 0, 1});
  CHECK(w == doctest::Approx((-3 * std::log(0.8) - 3 * std::log(0.4)) / 4).epsilon(1e-12));
  CHECK_THROWS_AS(stop_loss(std::vector<double>{0.5}, std::vector<int>{0, 1}), ShapeError);
  CHECK_THROWS_AS(stop_loss(std::vector<double>{0.5, 0.5}, std::vector<int>{0, 0}), DomainError);
}

TEST_CASE("logit stop loss equals the probability form") {
  const std::vector<double> x{-2.0, 0.3, 1.5, -0.1, 4.0};
  const std::vector<int> y{0, 0, 1, 0, 1};
  std::vector<double> p;
  for (double v : x) p.push_back(1.0 / (1.0 + std::exp(-v)));
  ag::Graph<double> g;
  auto logits = g.constant(5, 1, x);
  const double w = stop_weight(y);
  CHECK(stop_loss_from_logits(logits, y, w, 5.0).item() ==
        doctest::Approx(stop_loss(p, y)).epsilon(1e-12));
  CHECK_THROWS_AS(stop_loss_from_logits(logits, std::vector<int>{0, 1}, w, 5.0), ShapeError);
  CHECK_THROWS_AS(stop_loss_from_logits(logits, y, w, 0.0), DomainError);
}

TEST_CASE("stop loss gradients match central differences on five seeds") {
  const auto cfg = toy(8, 2, 2);
  const std::vector<int> text{4, 7};
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto ps = make_params(cfg, seed).cast<double>();
    Rng data(seed * 31);
    const auto audio = testing::random_tensor_d({3, 8}, data.fork("a"));
    const auto video = testing::random_tensor_d({3, 8}, data.fork("v"));
    auto build = [&](Binder<double>& b) {
      auto& g = b.graph();
      const auto seq = build_sequence(b, text, g.constant(audio), g.constant(video),
                                      FusionMode::interleaved_av(), Task::T2AV);
      auto h = forward_hidden(b, cfg, seq.tokens);
      auto logits = stop_logits(b, ag::gather_rows(h, seq.plan.stop_positions));
      return stop_loss_from_logits(logits, seq.plan.stop_labels, stop_weight(seq.plan.stop_labels),
                                   3.0);
    };
    ag::Graph<double> g;
    Binder<double> b(g, ps);
    const auto ana = backward(build(b), b);
    ScalarFn f = [&](const ParameterSet<double>& p) {
      ag::Graph<double> g2(false);
      Binder<double> b2(g2, p, false);
      return build(b2).item();
    };
    auto num = finite_diff_gradient(f, ps, 1e-6);
    // The pad row never enters a T2AV interleaved sequence.
    for (double v : ana.at("backbone.pad").storage()) CHECK(v == 0.0);
    for (double v : num.at("backbone.pad").storage()) CHECK(std::abs(v) < 1e-8);
    num.erase("backbone.pad");
    const auto report = compare_gradients(ana, num);
    INFO("seed " << seed << " worst " << report.worst_parameter);
    CHECK(report.worst_relative_error < 1e-4);
  }
}
