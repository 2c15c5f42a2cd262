#include "doctest.h"
#include "lipsync/denoiser.hpp"
#include "lipsync/losses.hpp"
#include "lipsync/visual.hpp"
#include "support.hpp"

using namespace lipsync::model;

namespace {

DenoiserConfig tiny() {
  DenoiserConfig cfg;
  cfg.image_size = 16;
  cfg.base_channels = 8;
  cfg.channel_mult = {1, 2};
  cfg.num_res_blocks = 1;
  cfg.attention_resolutions = {8};
  cfg.embedding_width = 16;
  cfg.norm_groups = 4;
  cfg.audio_channels = 4;
  return cfg;
}

struct Inputs {
  torch::Tensor x_t, x_ref, audio, t;
};

Inputs inputs(int batch, int size, torch::Dtype dtype = torch::kFloat32) {
  return {torch::randn({batch, 3, size, size}, dtype), torch::randn({batch, 3, size, size}, dtype),
          torch::rand({batch, 16, 80}, dtype) * 2 - 1, torch::randint(1, 1000, {batch}, torch::kLong)};
}

}  // namespace

TEST_CASE("config validation") {
  auto cfg = tiny();
  CHECK_NOTHROW(cfg.validate());
  cfg.image_size = 18;
  cfg.channel_mult = {1, 2, 2};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny();
  cfg.in_channels = 3;
  CHECK_THROWS_AS(Denoiser{cfg}, std::invalid_argument);
}

TEST_CASE("timestep embedding uses cos and sin of the 10000-base ladder") {
  const auto emb = timestep_embedding(torch::tensor({0, 7}), 8);
  CHECK(emb.sizes() == torch::IntArrayRef{2, 8});
  CHECK(emb[0].slice(0, 0, 4).eq(1.0).all().item<bool>());
  CHECK(emb[0].slice(0, 4, 8).eq(0.0).all().item<bool>());
  const double freq1 = std::exp(-std::log(10000.0) / 4.0);
  CHECK(emb[1][1].item<double>() == doctest::Approx(std::cos(7.0 * freq1)).epsilon(1e-5));
  CHECK(emb[1][5].item<double>() == doctest::Approx(std::sin(7.0 * freq1)).epsilon(1e-5));
}

TEST_CASE("encode_audio: width, distinct windows, determinism, shape errors") {
  torch::manual_seed(1);
  Denoiser net(tiny());
  const auto a = torch::rand({2, 16, 80}) * 2 - 1;
  const auto e = net->encode_audio(a);
  CHECK(e.sizes() == torch::IntArrayRef{2, 16});
  CHECK((e[0] - e[1]).norm().item<double>() > 0.0);
  CHECK(torch::equal(e, net->encode_audio(a)));
  CHECK_THROWS_AS(net->encode_audio(torch::rand({2, 80, 16})), std::invalid_argument);
}

TEST_CASE("denoise output shape and input contract") {
  torch::manual_seed(2);
  Denoiser net(tiny());
  const auto in = inputs(3, 16);
  CHECK(net->forward(in.x_t, in.x_ref, in.audio, in.t).sizes() == in.x_t.sizes());
  CHECK_THROWS_AS(net->forward(torch::randn({3, 3, 8, 8}), torch::randn({3, 3, 8, 8}), in.audio, in.t),
                  std::invalid_argument);
  CHECK_THROWS_AS(net->forward(in.x_t, in.x_ref, in.audio, torch::tensor({1, 2})), std::invalid_argument);
}

TEST_CASE("the audio path reaches the masked output") {
  torch::manual_seed(3);
  Denoiser net(tiny());
  torch::NoGradGuard guard;
  const auto in = inputs(1, 16);
  const auto base = net->forward(in.x_t, in.x_ref, in.audio, in.t);
  auto bumped_audio = in.audio.clone();
  bumped_audio[0][4][10] += 0.1;
  const auto bumped = net->forward(in.x_t, in.x_ref, bumped_audio, in.t);
  CHECK((bumped - base).slice(2, 8, 16).norm().item<double>() > 0.0);

  const auto temb_only = net->conditioning(in.t, torch::zeros({1, 16}));
  const auto with_audio = net->conditioning(in.t, net->encode_audio(in.audio));
  CHECK((temb_only - with_audio).norm().item<double>() > 0.0);
}

TEST_CASE("concat fusion is a working alternative") {
  auto cfg = tiny();
  cfg.fusion = EmbeddingFusion::Concat;
  Denoiser net(cfg);
  const auto in = inputs(2, 16);
  CHECK(net->forward(in.x_t, in.x_ref, in.audio, in.t).sizes() == in.x_t.sizes());
}

TEST_CASE("L_simple gradient reaches the audio encoder and matches finite differences") {
  torch::manual_seed(4);
  Denoiser net(tiny());
  net->to(torch::kFloat64);
  const auto in = inputs(2, 16, torch::kFloat64);
  const auto eps = torch::randn({2, 3, 16, 16}, torch::kFloat64);
  const auto mask = lipsync::visual::lower_half_mask(16, 16).to(torch::kFloat64);
  auto loss = [&] {
    return lipsync::losses::l_simple(net->forward(in.x_t, in.x_ref, in.audio, in.t), eps, mask);
  };
  auto params = net->audio_encoder()->named_parameters();
  auto& weight = params["head.weight"];
  net->zero_grad();
  loss().backward();
  const auto analytic = weight.grad().clone();
  CHECK(analytic.abs().sum().item<double>() > 0.0);

  torch::NoGradGuard guard;
  const double h = 1e-6;
  auto flat = weight.view(-1);
  auto grad_flat = analytic.view(-1);
  double worst = 0.0, scale = 0.0;
  for (int64_t i = 0; i < flat.numel(); i += std::max<int64_t>(1, flat.numel() / 12)) {
    const double keep = flat[i].item<double>();
    flat[i] = keep + h;
    const double up = loss().item<double>();
    flat[i] = keep - h;
    const double down = loss().item<double>();
    flat[i] = keep;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(numeric - grad_flat[i].item<double>()));
    scale = std::max(scale, std::abs(numeric));
  }
  REQUIRE(scale > 0.0);
  CHECK(worst / scale <= 1e-2);
}

TEST_CASE("block parameter counts match hand arithmetic") {
  ResBlock block(8, 16, 32, 4);
  // norm1 2*8, conv1 8*16*9+16, norm2 2*16, conv2 16*16*9+16, emb 32*32+32, skip 8*16+16
  CHECK(parameter_count(*block) == 16 + 1168 + 32 + 2320 + 1056 + 144);
  AttentionBlock attn(16, 2, 4);
  CHECK(parameter_count(*attn) == 32 + (16 * 48 + 48) + (16 * 16 + 16));
}

TEST_CASE("property: parameter shapes are a pure function of the config") {
  for (int mult : {1, 2, 3}) {
    auto cfg = tiny();
    cfg.channel_mult = {1, mult};
    torch::manual_seed(static_cast<uint64_t>(mult));
    Denoiser a(cfg);
    torch::manual_seed(100 + static_cast<uint64_t>(mult));
    Denoiser b(cfg);
    const auto pa = a->named_parameters(), pb = b->named_parameters();
    REQUIRE(pa.size() == pb.size());
    for (const auto& item : pa) {
      REQUIRE(pb.contains(item.key()));
      REQUIRE(pb[item.key()].sizes() == item.value().sizes());
    }
    CHECK(parameter_count(*a) == parameter_count(*b));
  }
}

TEST_CASE("EMA, copy and freeze helpers") {
  torch::manual_seed(5);
  Denoiser live(tiny()), shadow(tiny());
  ema_update(*shadow, *live, 0.0);
  auto lp = live->named_parameters();
  for (const auto& item : shadow->named_parameters()) {
    REQUIRE(torch::equal(item.value(), lp[item.key()]));
  }
  Denoiser other(tiny());
  const auto before = other->named_parameters()["in_conv.weight"].clone();
  ema_update(*other, *live, 0.75);
  const auto expected = 0.75 * before + 0.25 * lp["in_conv.weight"];
  CHECK(torch::allclose(other->named_parameters()["in_conv.weight"], expected));
  copy_parameters(*other, *live);
  CHECK(torch::equal(other->named_parameters()["in_conv.weight"], lp["in_conv.weight"]));
  freeze(*other);
  for (const auto& p : other->parameters()) {
    CHECK_FALSE(p.requires_grad());
  }
  auto wide = tiny();
  wide.base_channels = 16;
  Denoiser mismatch(wide);
  CHECK_THROWS_AS(copy_parameters(*mismatch, *live), std::invalid_argument);
}
