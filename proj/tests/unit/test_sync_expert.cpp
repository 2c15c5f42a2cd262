#include "doctest.h"
#include "lipsync/sync_expert.hpp"
#include "support.hpp"

using namespace lipsync;
using lipsync::testing::TempDir;

namespace {

const data::Corpus& small_corpus() {
  static TempDir dir("sync_corpus");
  static const data::Corpus corpus = [] {
    toyset::ToyConfig cfg;
    cfg.image_size = 32;
    toyset::generate_corpus(10, 20, dir.path(), 11, cfg);
    return data::load_corpus(dir.path());
  }();
  return corpus;
}

sync::SyncNetConfig small_net() { return {32, 4, 16}; }

}  // namespace

TEST_CASE("embeddings are unit norm, equal width, and order sensitive") {
  torch::manual_seed(1);
  sync::SyncNet net(small_net());
  net->eval();
  const auto frames = torch::rand({4, 5, 3, 32, 32}) * 2 - 1;
  const auto mel = torch::rand({4, 16, 80}) * 2 - 1;
  const auto v = net->embed_video(frames);
  const auto a = net->embed_audio(mel);
  CHECK(v.sizes() == torch::IntArrayRef{4, 16});
  CHECK(a.sizes() == v.sizes());
  CHECK(torch::allclose(v.norm(2, 1), torch::ones({4}), 1e-5, 1e-5));
  CHECK(torch::allclose(a.norm(2, 1), torch::ones({4}), 1e-5, 1e-5));
  const auto shuffled = frames.index_select(1, torch::tensor({4, 2, 0, 3, 1}));
  CHECK((net->embed_video(shuffled) - v).abs().max().item<double>() > 1e-6);
  CHECK_THROWS_AS(net->embed_video(torch::rand({4, 4, 3, 32, 32})), std::invalid_argument);
  CHECK_THROWS_AS(net->embed_audio(torch::rand({4, 80, 16})), std::invalid_argument);
}

TEST_CASE("only the lower half of the window is seen") {
  torch::manual_seed(2);
  sync::SyncNet net(small_net());
  net->eval();
  auto frames = torch::rand({2, 5, 3, 32, 32});
  const auto v = net->embed_video(frames);
  frames.slice(3, 0, 16).uniform_(-1, 1);
  CHECK(torch::equal(net->embed_video(frames), v));
}

TEST_CASE("sync_prob is clamped cosine similarity") {
  const auto e0 = torch::tensor({{1.0, 0.0}});
  const auto e1 = torch::tensor({{0.0, 1.0}});
  CHECK(sync::sync_prob(e0, e0).item<double>() == doctest::Approx(1.0));
  CHECK(sync::sync_prob(e0, e1).item<double>() == doctest::Approx(1e-7).epsilon(1e-6));
  CHECK(sync::sync_prob(e0, -e0).item<double>() == doctest::Approx(1e-7).epsilon(1e-6));
  const auto diag = torch::tensor({{1.0, 1.0}}) / std::sqrt(2.0);
  CHECK(sync::sync_prob(e0, diag).item<double>() == doctest::Approx(1.0 / std::sqrt(2.0)));
  // the cosine of 60 degrees
  const auto sixty = torch::tensor({{0.5, std::sqrt(3.0) / 2.0}});
  CHECK(sync::sync_prob(e0, sixty).item<double>() == doctest::Approx(0.5));
  CHECK(-std::log(sync::sync_prob(e0, e1).item<double>()) == doctest::Approx(16.1181).epsilon(1e-4));
}

TEST_CASE("sync loss is non-negative and bounded by the floor") {
  torch::manual_seed(3);
  sync::SyncNet net(small_net());
  net->eval();
  for (int i = 0; i < 5; ++i) {
    const auto loss = sync::sync_loss(net, torch::rand({3, 5, 3, 32, 32}) * 2 - 1,
                                      torch::rand({3, 16, 80}) * 2 - 1)
                          .item<double>();
    CHECK(loss >= 0.0);
    CHECK(loss <= -std::log(1e-7) + 1e-6);
  }
}

TEST_CASE("check_contiguous") {
  CHECK_NOTHROW(sync::check_contiguous({3, 4, 5, 6, 7}));
  CHECK_THROWS_AS(sync::check_contiguous({3, 4, 6, 7, 8}), std::invalid_argument);
  CHECK_THROWS_AS(sync::check_contiguous({3, 4, 5, 6}), std::invalid_argument);
  CHECK_THROWS_AS(sync::check_contiguous({7, 6, 5, 4, 3}), std::invalid_argument);
}

TEST_CASE("property: sampled negatives are never aligned and pairs are balanced") {
  const auto& corpus = small_corpus();
  sync::PairSampler sampler(corpus, corpus.train, 5);
  const auto pairs = sampler.balanced(2000);
  int positives = 0, cross_clip = 0;
  for (const auto& p : pairs) {
    const auto last = corpus.clips[p.clip].size() - sync::kWindow;
    REQUIRE(p.start >= 0);
    REQUIRE(p.start <= last);
    if (p.positive) {
      ++positives;
      REQUIRE(p.audio_clip == p.clip);
      REQUIRE(p.audio_start == p.start);
    } else if (p.audio_clip == p.clip) {
      REQUIRE(std::abs(p.audio_start - p.start) >= 5);
    } else {
      ++cross_clip;
    }
  }
  CHECK(positives == 1000);
  CHECK(cross_clip > 300);
  CHECK(cross_clip < 700);

  const auto batch = sync::gather(corpus, {pairs.begin(), pairs.begin() + 6});
  CHECK(batch.frames.sizes() == torch::IntArrayRef{6, 5, 3, 32, 32});
  CHECK(batch.mel.sizes() == torch::IntArrayRef{6, 16, 80});
  CHECK(batch.labels.sum().item<double>() == 3.0);
}

TEST_CASE("an untrained expert is at chance") {
  const auto& corpus = small_corpus();
  torch::manual_seed(4);
  sync::SyncNet net(small_net());
  sync::PairSampler sampler(corpus, corpus.train, 6);
  const double acc = sync::accuracy(net, corpus, sampler.balanced(400));
  CHECK(acc > 0.35);
  CHECK(acc < 0.65);
  CHECK(net->is_training());
}

TEST_CASE("a short training run reports and leaves the expert in eval mode") {
  const auto& corpus = small_corpus();
  torch::manual_seed(5);
  sync::SyncNet net(small_net());
  sync::ExpertHyper hyper;
  hyper.max_steps = 12;
  hyper.batch_size = 8;
  hyper.eval_every = 4;
  hyper.eval_pairs = 32;
  hyper.patience = 1;
  std::vector<int> seen;
  const auto report = sync::train_expert(corpus, net, hyper, [&](int step, double) { seen.push_back(step); });
  CHECK_FALSE(net->is_training());
  CHECK(report.steps >= 4);
  CHECK(seen.size() == report.history.size());
  double best = report.initial_accuracy;
  for (const auto& [step, acc] : report.history) {
    best = std::max(best, acc);
  }
  CHECK(report.held_out_accuracy <= best + 1e-12);
  CHECK(report.held_out_accuracy >= report.initial_accuracy - 1e-12);
}

TEST_CASE("a frozen expert passes gradient to the frames only") {
  TempDir dir("frozen_expert");
  torch::manual_seed(6);
  sync::SyncNet trained(small_net());
  trained->train();
  trained->embed_video(torch::rand({8, 5, 3, 32, 32}));  // moves the running statistics
  trained->embed_audio(torch::rand({8, 16, 80}));
  sync::save_expert(dir.path(), trained, {{"note", "unit"}});
  nlohmann::json extra;
  auto expert = sync::load_expert(dir.path(), &extra);
  CHECK(extra.at("note") == "unit");
  CHECK_FALSE(expert->is_training());
  for (const auto& p : expert->parameters()) {
    REQUIRE_FALSE(p.requires_grad());
  }
  trained->eval();
  const auto probe = torch::rand({2, 5, 3, 32, 32});
  CHECK(torch::equal(expert->embed_video(probe), trained->embed_video(probe)));

  expert->to(torch::kFloat64);
  const auto mel = (torch::rand({1, 16, 80}) * 2 - 1).to(torch::kFloat64);
  auto frames = (torch::rand({1, 5, 3, 32, 32}) * 2 - 1).to(torch::kFloat64).requires_grad_(true);
  sync::sync_loss(expert, frames, mel).backward();
  const auto grad = frames.grad().clone();
  CHECK(grad.slice(3, 0, 16).abs().max().item<double>() == 0.0);
  CHECK(grad.slice(3, 16, 32).abs().max().item<double>() > 0.0);

  torch::NoGradGuard guard;
  auto x = frames.detach().clone();
  auto flat = x.view(-1);
  auto g = grad.view(-1);
  const double h = 1e-6;
  double worst = 0.0, scale = 0.0;
  std::mt19937 rng(3);
  for (int k = 0; k < 40; ++k) {
    // lower-half pixels only: index = ((f*3 + c)*32 + y)*32 + x with y >= 16
    const int f = static_cast<int>(rng() % 5), c = static_cast<int>(rng() % 3);
    const int y = 16 + static_cast<int>(rng() % 16), xx = static_cast<int>(rng() % 32);
    const int64_t i = ((f * 3 + c) * 32 + y) * 32 + xx;
    const double keep = flat[i].item<double>();
    flat[i] = keep + h;
    const double up = sync::sync_loss(expert, x, mel).item<double>();
    flat[i] = keep - h;
    const double down = sync::sync_loss(expert, x, mel).item<double>();
    flat[i] = keep;
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(numeric - g[i].item<double>()));
    scale = std::max(scale, std::abs(numeric));
  }
  REQUIRE(scale > 0.0);
  CHECK(worst / scale <= 1e-3);
}

TEST_CASE("load_expert rejects other roles") {
  TempDir dir("wrong_role");
  sync::SyncNet net(small_net());
  ckpt::Checkpoint c;
  c.role = "generator";
  ckpt::add_module(c, "expert", *net);
  ckpt::save(dir.path(), c);
  CHECK_THROWS_AS(sync::load_expert(dir.path()), std::runtime_error);
}
