#include <string>

#include "doctest.h"
#include "pbl/config.hpp"
#include "pbl/error.hpp"
#include "pbl/optim.hpp"
#include "pbl/parallel.hpp"

using namespace pbl;

TEST_CASE("sections, comments and typed values") {
  const auto doc = ConfigDocument::parse("top = 1\n# note\n[a]\nx = 2.5  # trailing\nv = 1 2 3\n\n[a]\nflag = true\n",
                                         "job.cfg");
  CHECK(doc.root().get_int("top") == 1);
  const auto as = doc.sections_named("a");
  REQUIRE(as.size() == 2);
  CHECK(as[0]->get_double("x") == 2.5);
  CHECK(as[0]->get_vec3("v") == Eigen::Vector3d(1, 2, 3));
  CHECK(as[1]->get_bool("flag", false));
  CHECK(as[0]->get_double("missing", 7.0) == 7.0);
  CHECK(doc.section("b") == nullptr);
}

TEST_CASE("errors carry source and line") {
  const auto doc = ConfigDocument::parse("[a]\nx = 1\ny = nope\nx = 3\n", "job.cfg");
  const auto* a = doc.section("a");
  CHECK_THROWS_WITH_AS(a->get_double("y"), doctest::Contains("job.cfg:3"), ConfigError);
  CHECK_THROWS_AS(a->require_known({"x"}), ConfigError);
  CHECK_THROWS_AS(a->require_known({"x", "y"}), ConfigError);
  CHECK_NOTHROW(a->require_known({"x", "y"}, {"x"}));
  CHECK_THROWS_AS(doc.require_sections({"b"}), ConfigError);
  CHECK_THROWS_AS(ConfigDocument::parse("[a\n"), ConfigError);
  CHECK_THROWS_AS(a->get_double("absent"), ConfigError);
}

TEST_CASE("adaptive-moment steps") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.iterations = 10;
  Adam adam(2, cfg);
  std::vector<double> x{1.0, -1.0};
  const std::vector<double> g{2.0, -0.5};
  adam.step(x, g);
  // The first bias-corrected step has magnitude lr in every coordinate.
  CHECK(x[0] == doctest::Approx(0.9).epsilon(1e-6));
  CHECK(x[1] == doctest::Approx(-0.9).epsilon(1e-6));
  const std::vector<double> scale{0.0, 1.0};
  adam.step(x, g, scale);
  CHECK(x[0] == doctest::Approx(0.9).epsilon(1e-6));

  OptimizerConfig decay = cfg;
  decay.final_lr_fraction = 0.01;
  Adam d(1, decay);
  const double first = d.current_lr();
  std::vector<double> y{0.0};
  for (int k = 0; k < 9; ++k) d.step(y, std::vector<double>{1.0});
  CHECK(first == doctest::Approx(0.1));
  CHECK(d.current_lr() == doctest::Approx(0.001).epsilon(1e-9));
}

TEST_CASE("parallel chunks visit every index once") {
  for (int workers : {1, 2, 5}) {
    std::vector<int> hits(37, 0);
    parallel_chunks(hits.size(), workers, [&](std::size_t k) { ++hits[k]; });
    for (int h : hits) CHECK(h == 1);
  }
}
