#include <cmath>
#include <random>

#include "doctest.h"
#include "lipsync/diffusion.hpp"
#include "support.hpp"

using namespace lipsync::diffusion;
using lipsync::testing::fixture;

namespace {

torch::Tensor scalar(double v) {
  return torch::full({1}, v, torch::kFloat64);
}

double value(const torch::Tensor& t) {
  return t.item<double>();
}

// Posterior q(x_prev | x_t, x0) of the Markov chain collapsed onto the
// strided pair (t, t_prev), with x0 recovered from the noise estimate.
double ddpm_posterior_sample(double x_t, double eps_hat, double ab_t, double ab_prev, double xi) {
  const double x0 = (x_t - std::sqrt(1.0 - ab_t) * eps_hat) / std::sqrt(ab_t);
  const double alpha_step = ab_t / ab_prev;
  const double mean = std::sqrt(ab_prev) * (1.0 - alpha_step) / (1.0 - ab_t) * x0 +
                      std::sqrt(alpha_step) * (1.0 - ab_prev) / (1.0 - ab_t) * x_t;
  const double var = (1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - alpha_step);
  return mean + std::sqrt(var) * xi;
}

}  // namespace

TEST_CASE("make_schedule lengths and the single-step product") {
  CHECK(make_schedule(1000).steps() == 1000);
  const auto one = make_schedule(1, 0.1, 0.1);
  REQUIRE(one.alpha_bars().size() == 1);
  CHECK(one.alpha_bars()[0] == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(one.alpha_bar(StepIndex{0}).value == 1.0);
}

TEST_CASE("alpha-bar matches the high-precision cumulative product") {
  const auto ref = fixture("schedule.json");
  const auto sched = make_schedule(ref["T"].get<int>(), ref["beta_start"].get<double>(),
                                   ref["beta_end"].get<double>());
  for (const auto& [step, expected] : ref["alpha_bar"].items()) {
    const double got = sched.alpha_bar(StepIndex{std::stoi(step)}).value;
    CHECK(std::abs(got - expected.get<double>()) / expected.get<double>() <= 1e-12);
  }
  const double last = sched.alpha_bar(StepIndex{1000}).value;
  CHECK(last == doctest::Approx(4.04e-5).epsilon(0.01));
}

TEST_CASE("make_schedule rejects invalid ranges") {
  CHECK_THROWS_AS(make_schedule(0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.03, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10).alpha_bar(StepIndex{11}), std::out_of_range);
}

TEST_CASE("property: alpha-bar is strictly decreasing and inside (0, 1)") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> steps(1, 2000);
  std::uniform_real_distribution<double> lo(1e-6, 0.05);
  std::uniform_real_distribution<double> span(0.0, 0.5);
  for (int trial = 0; trial < 200; ++trial) {
    const double b0 = lo(rng);
    const double b1 = std::min(0.999, b0 + span(rng));
    const auto sched = make_schedule(steps(rng), b0, b1);
    const auto ab = sched.alpha_bars();
    double prod = 1.0;
    for (size_t i = 0; i < ab.size(); ++i) {
      prod *= 1.0 - sched.betas()[i];
      REQUIRE(std::abs(ab[i] - prod) <= 1e-12 * prod);
      REQUIRE(ab[i] > 0.0);
      REQUIRE(ab[i] < 1.0);
      if (i > 0) {
        REQUIRE(ab[i] < ab[i - 1]);
      }
    }
  }
}

TEST_CASE("forward_sample limits and hand evaluation") {
  const auto x0 = torch::randn({2, 3}, torch::kFloat64);
  const auto eps = torch::randn({2, 3}, torch::kFloat64);
  CHECK(torch::equal(forward_sample(x0, AlphaBar{1.0}, eps), x0));
  CHECK(torch::allclose(forward_sample(x0, AlphaBar{0.0}, eps), eps));
  CHECK(value(forward_sample(scalar(1.0), AlphaBar{0.64}, scalar(0.5))) == doctest::Approx(1.1));
  const auto sched = make_schedule(1000);
  CHECK(torch::equal(forward_sample(x0, StepIndex{0}, eps, sched), x0));
  CHECK_THROWS_AS(forward_sample(x0, AlphaBar{0.5}, torch::zeros({3, 2}, torch::kFloat64)),
                  std::invalid_argument);
}

TEST_CASE("predict_x0 hand evaluations and division guard") {
  CHECK(value(predict_x0(scalar(1.1), scalar(0.5), AlphaBar{0.64})) == doctest::Approx(1.0));
  CHECK(value(predict_x0(scalar(0.5), scalar(0.0), AlphaBar{0.25})) == doctest::Approx(1.0));
  CHECK_THROWS_AS(predict_x0(scalar(0.5), scalar(0.1), AlphaBar{0.0}), std::domain_error);
}

TEST_CASE("property: predict_x0 inverts forward_sample over 1000 random cases") {
  const auto sched = make_schedule(1000);
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> step(1, 1000);
  for (int i = 0; i < 1000; ++i) {
    const auto x0 = torch::randn({4, 4}, torch::kFloat64);
    const auto eps = torch::randn({4, 4}, torch::kFloat64);
    const StepIndex t{step(rng)};
    const auto back = predict_x0(forward_sample(x0, t, eps, sched), eps, t, sched);
    const double rel = ((back - x0).abs().max() / x0.abs().max()).item<double>();
    REQUIRE(rel <= 1e-5);
  }
}

TEST_CASE("ddim_step: identity stride, both algebraic forms, exact-noise consistency") {
  const auto x = torch::randn({3}, torch::kFloat64);
  const auto e = torch::randn({3}, torch::kFloat64);
  const auto sched = make_schedule(1000);
  CHECK(torch::equal(ddim_step(x, e, StepIndex{500}, StepIndex{500}, sched), x));

  const double ab_t = 0.64, ab_prev = 0.81, x_t = 1.1, eps = 0.5;
  const double direct = std::sqrt(ab_prev / ab_t) * x_t +
                        (std::sqrt(1 - ab_prev) - std::sqrt(ab_prev * (1 - ab_t) / ab_t)) * eps;
  const double via_x0 = std::sqrt(ab_prev) * (x_t - std::sqrt(1 - ab_t) * eps) / std::sqrt(ab_t) +
                        std::sqrt(1 - ab_prev) * eps;
  CHECK(direct == doctest::Approx(via_x0).epsilon(1e-14));
  CHECK(direct == doctest::Approx(1.117945).epsilon(1e-6));
  CHECK(value(ddim_step(scalar(x_t), scalar(eps), AlphaBar{ab_t}, AlphaBar{ab_prev})) ==
        doctest::Approx(1.117945).epsilon(1e-6));

  const auto x0 = torch::randn({8}, torch::kFloat64);
  const auto noise = torch::randn({8}, torch::kFloat64);
  const auto x_700 = forward_sample(x0, StepIndex{700}, noise, sched);
  const auto stepped = ddim_step(x_700, noise, StepIndex{700}, StepIndex{300}, sched);
  CHECK(torch::allclose(stepped, forward_sample(x0, StepIndex{300}, noise, sched), 1e-10, 1e-12));

  CHECK_THROWS_AS(ddim_step(x, e, StepIndex{10}, StepIndex{20}, sched), std::invalid_argument);
}

TEST_CASE("ddim_general_step: sigma 0 reduces to ddim_step") {
  const auto sched = make_schedule(1000);
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> step(2, 1000);
  for (int i = 0; i < 200; ++i) {
    const int t = step(rng);
    const int t_prev = std::uniform_int_distribution<int>(0, t - 1)(rng);
    const auto x = torch::randn({5}, torch::kFloat64);
    const auto e = torch::randn({5}, torch::kFloat64);
    const auto xi = torch::randn({5}, torch::kFloat64);
    const auto general = ddim_general_step(x, e, StepIndex{t}, StepIndex{t_prev}, 0.0, xi, sched);
    const auto plain = ddim_step(x, e, StepIndex{t}, StepIndex{t_prev}, sched);
    REQUIRE((general - plain).abs().max().item<double>() <= 1e-7);
  }
}

TEST_CASE("ddim_general_step with the DDPM sigma matches the posterior sampler") {
  const auto sched = make_schedule(1000);
  std::mt19937_64 rng(4);
  std::uniform_int_distribution<int> step(2, 1000);
  std::normal_distribution<double> normal;
  for (int i = 0; i < 1000; ++i) {
    const int t = step(rng);
    const int t_prev = std::uniform_int_distribution<int>(1, t - 1)(rng);
    const double x_t = normal(rng), eps_hat = normal(rng), xi = normal(rng);
    const double ab_t = sched.alpha_bar(StepIndex{t}).value;
    const double ab_prev = sched.alpha_bar(StepIndex{t_prev}).value;
    const double sigma = ddpm_sigma(StepIndex{t}, StepIndex{t_prev}, sched);
    const double got =
        value(ddim_general_step(scalar(x_t), scalar(eps_hat), StepIndex{t}, StepIndex{t_prev}, sigma,
                                scalar(xi), sched));
    const double expected = ddpm_posterior_sample(x_t, eps_hat, ab_t, ab_prev, xi);
    REQUIRE(std::abs(got - expected) <= 1e-5 * std::max(1.0, std::abs(expected)));
  }
}

TEST_CASE("ddim_general_step: zero draw and sigma bound") {
  const double ab_t = 0.64, ab_prev = 0.81, sigma = 0.2;
  const double x_t = 1.1, eps = 0.5;
  const double x0 = (x_t - 0.6 * eps) / 0.8;
  const double expected = std::sqrt(ab_prev) * x0 + std::sqrt(1 - ab_prev - sigma * sigma) * eps;
  CHECK(value(ddim_general_step(scalar(x_t), scalar(eps), AlphaBar{ab_t}, AlphaBar{ab_prev}, sigma,
                                scalar(0.0))) == doctest::Approx(expected).epsilon(1e-12));
  CHECK_THROWS_AS(ddim_general_step(scalar(x_t), scalar(eps), AlphaBar{ab_t}, AlphaBar{ab_prev}, 0.5,
                                    scalar(0.0)),
                  std::invalid_argument);
}

TEST_CASE("ddpm_sigma: hand value, degenerate stride, exhaustive bound") {
  CHECK(ddpm_sigma(AlphaBar{0.64}, AlphaBar{0.81}) == doctest::Approx(0.3328185).epsilon(1e-6));
  CHECK(ddpm_sigma(AlphaBar{0.5}, AlphaBar{0.5}) == 0.0);
  const auto sched = make_schedule(100);
  for (int t = 1; t <= 100; ++t) {
    for (int p = 0; p < t; ++p) {
      const double s = ddpm_sigma(StepIndex{t}, StepIndex{p}, sched);
      REQUIRE(s * s <= 1.0 - sched.alpha_bar(StepIndex{p}).value + 1e-15);
    }
  }
  CHECK_THROWS_AS(ddpm_sigma(StepIndex{3}, StepIndex{3}, sched), std::invalid_argument);
}

TEST_CASE("strided_timesteps") {
  const auto ts = strided_timesteps(1000, 25);
  REQUIRE(ts.size() == 25);
  CHECK(ts.front().value == 1000);
  CHECK(ts[1].value == 960);
  CHECK(ts[23].value == 80);
  CHECK(ts.back().value == 40);
  const auto full = strided_timesteps(7, 7);
  for (int i = 0; i < 7; ++i) {
    CHECK(full[static_cast<size_t>(i)].value == 7 - i);
  }
  const auto two = strided_timesteps(10, 2);
  CHECK(two[0].value == 10);
  CHECK(two[1].value == 5);
  CHECK_THROWS_AS(strided_timesteps(10, 11), std::invalid_argument);
}

TEST_CASE("oracle denoiser reconstructs the target with 25 strided DDIM steps") {
  const auto sched = make_schedule(1000);
  const auto target = torch::rand({3, 8, 8}, torch::kFloat64) * 2 - 1;
  auto x = torch::randn({3, 8, 8}, torch::kFloat64);
  const auto ts = strided_timesteps(1000, 25);
  for (size_t i = 0; i < ts.size(); ++i) {
    const double ab = sched.alpha_bar(ts[i]).value;
    const auto eps = (x - std::sqrt(ab) * target) / std::sqrt(1.0 - ab);
    const StepIndex prev = i + 1 < ts.size() ? ts[i + 1] : StepIndex{0};
    x = ddim_step(x, eps, ts[i], prev, sched);
  }
  CHECK((x - target).abs().max().item<double>() <= 1e-4);
}
