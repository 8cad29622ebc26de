#include <cmath>
#include <numbers>
#include <vector>

#include "doctest.h"

#include "c2fl/core_model.hpp"
#include "c2fl/errors.hpp"
#include "c2fl/rng.hpp"
#include "../oracles.hpp"

using namespace c2fl;

namespace {

Vector vec(std::initializer_list<double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v(i++) = x;
  return v;
}

ModelParams small_model(std::uint64_t seed, int classes = 4) {
  const std::vector<int> sizes = {5, 7, 3};
  return ModelParams::initialize(sizes, classes, seed);
}

}  // namespace

TEST_CASE("forward_features matches a layer-by-layer recomputation") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const ModelParams m = small_model(100 + trial);
    const Vector x = oracle::random_vector(rng, 5);
    const Vector z = forward_features(m.theta, x);
    const oracle::Vec ref = oracle::extractor_forward(m.theta, oracle::to_vec(x));
    REQUIRE(z.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(z(i) == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("zero weights give the zero feature") {
  ModelParams m = small_model(1);
  m = m.zeros_like();
  const Vector z = forward_features(m.theta, vec({1, -2, 3, 4, 5}));
  CHECK(z.norm() == 0.0);
}

TEST_CASE("batch forward agrees with per-sample forward") {
  Rng rng(2);
  const ModelParams m = small_model(3);
  const Matrix x = oracle::random_matrix(rng, 5, 9);
  const Matrix z = forward_features_batch(m.theta, x);
  for (int j = 0; j < 9; ++j)
    CHECK((z.col(j) - forward_features(m.theta, x.col(j))).norm() < 1e-12);
}

TEST_CASE("validate rejects inconsistent shapes and non-finite values") {
  ModelParams m = small_model(4);
  CHECK_NOTHROW(m.validate());

  ModelParams bad_layer = m;
  bad_layer.theta.layers[1].weight = Matrix::Zero(3, 6);
  CHECK_THROWS_AS(bad_layer.validate(), ShapeError);

  ModelParams bad_phi = m;
  bad_phi.phi = Matrix::Zero(4, 2);
  CHECK_THROWS_AS(bad_phi.validate(), ShapeError);

  ModelParams nan = m;
  nan.phi(0, 0) = std::nan("");
  CHECK_FALSE(nan.all_finite());
  CHECK_THROWS_AS(nan.validate(), NumericError);
}

TEST_CASE("flatten and assign_flat round-trip") {
  const ModelParams m = small_model(5);
  const std::vector<double> flat = m.flatten();
  CHECK(flat.size() == m.num_parameters());
  ModelParams z = m.zeros_like();
  z.assign_flat(flat);
  CHECK(z.flatten() == flat);
}

TEST_CASE("initialize is deterministic in the seed") {
  CHECK(small_model(9).flatten() == small_model(9).flatten());
  CHECK(small_model(9).flatten() != small_model(10).flatten());
}

TEST_CASE("softmax") {
  SUBCASE("sums to one and is shift invariant") {
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
      const Vector p = oracle::random_vector(rng, 6, 5.0);
      const Vector s = softmax(p);
      CHECK(s.sum() == doctest::Approx(1.0).epsilon(1e-12));
      CHECK((softmax(p.array() + 123.0) - s).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("frozen example") {
    const Vector s = softmax(vec({8, 2}));
    CHECK(s(0) == doctest::Approx(0.9975273768433653).epsilon(1e-12));
    CHECK(s(1) == doctest::Approx(0.0024726231566347743).epsilon(1e-10));
  }
  SUBCASE("extreme logits stay finite") {
    const Vector s = softmax(vec({1000, -1000, 0}));
    CHECK(s.allFinite());
    CHECK(s(0) == doctest::Approx(1.0));
  }
}

TEST_CASE("cross_entropy closed forms") {
  for (int c : {2, 5, 10, 100})
    CHECK(cross_entropy(Vector::Zero(c), 0) == doctest::Approx(std::log(c)).epsilon(1e-12));
  CHECK(cross_entropy(vec({1, 2}), 0) == doctest::Approx(1.3132616875182228).epsilon(1e-12));
  CHECK(cross_entropy(vec({1000, 0}), 0) == doctest::Approx(0.0));
  CHECK(std::isfinite(cross_entropy(vec({1000, 0}), 1)));
  CHECK_THROWS_AS(cross_entropy(vec({1, 2}), 2), ConfigError);
  CHECK_THROWS_AS(cross_entropy(vec({1, 2}), -1), ConfigError);
}

TEST_CASE("kl_divergence") {
  CHECK(kl_divergence(vec({1, 0}), vec({0.5, 0.5})) ==
        doctest::Approx(std::numbers::ln2).epsilon(1e-12));
  CHECK(kl_divergence(vec({0.7, 0.3}), vec({0.4, 0.6})) ==
        doctest::Approx(0.18378689738681217).epsilon(1e-12));
  CHECK(kl_divergence(vec({0.2, 0.8}), vec({0.2, 0.8})) == doctest::Approx(0.0));
  CHECK(std::isfinite(kl_divergence(vec({0.5, 0.5}), vec({1.0, 0.0}))));
  CHECK_THROWS_AS(kl_divergence(vec({1, 0, 0}), vec({0.5, 0.5})), ShapeError);
  CHECK_THROWS_AS(kl_divergence(vec({1.5, -0.5}), vec({0.5, 0.5})), ConfigError);

  SUBCASE("non-negative on random pairs") {
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
      const Vector q = softmax(oracle::random_vector(rng, 5, 2.0));
      const Vector p = softmax(oracle::random_vector(rng, 5, 2.0));
      CHECK(kl_divergence(q, p) >= 0.0);
      CHECK(kl_divergence(q, q) == doctest::Approx(0.0).epsilon(1e-12));
    }
  }
}

TEST_CASE("local_loss composition") {
  const Vector p = vec({1, 2});
  CHECK(local_loss(p, vec({0.3, 0.7}), 0, 0.0) == cross_entropy(p, 0));
  CHECK(local_loss(p, softmax(p), 1, 5.0) == doctest::Approx(cross_entropy(p, 1)).epsilon(1e-12));
  // KL([.7,.3] || softmax(p)) needs p = log([.4,.6]) for the frozen KL value.
  const Vector lp = vec({std::log(0.4), std::log(0.6)});
  const double expected = cross_entropy(lp, 0) + 3.0 * 0.18378689738681217;
  CHECK(local_loss(lp, vec({0.7, 0.3}), 0, 3.0) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(cross_entropy(vec({1, 2}), 0) + 3.0 * 0.18378689738681217 ==
        doctest::Approx(1.8646223796786594).epsilon(1e-12));
  CHECK_THROWS_AS(local_loss(p, softmax(p), 0, -1.0), ConfigError);
}

TEST_CASE("classifier_gradient matches the closed form and finite differences") {
  Rng rng(21);
  for (int t = 0; t < 100; ++t) {
    const int c = 2 + static_cast<int>(rng.below(6));
    const int d = 1 + static_cast<int>(rng.below(8));
    const Matrix phi = oracle::random_matrix(rng, c, d);
    const Vector z = oracle::random_vector(rng, d);
    const int y = static_cast<int>(rng.below(static_cast<std::uint64_t>(c)));
    const Matrix g = classifier_gradient(phi, z, y);

    const oracle::Mat ref = oracle::ce_classifier_grad(oracle::to_mat(phi), oracle::to_vec(z), y);
    for (int i = 0; i < c; ++i)
      for (int j = 0; j < d; ++j) CHECK(std::abs(g(i, j) - ref[i][j]) < 1e-12);

    // Column-major flat view of phi for the finite-difference probe.
    auto f = [&](const oracle::Vec& flat) {
      const Matrix p = Eigen::Map<const Matrix>(flat.data(), c, d);
      return cross_entropy(p * z, y);
    };
    oracle::Vec flat(phi.data(), phi.data() + phi.size());
    for (std::size_t k = 0; k < flat.size(); ++k) {
      const double fd = oracle::central_difference(f, flat, k, 1e-5);
      CHECK(oracle::relative_error(g.data()[k], fd, 1e-4) < 1e-4);
    }
  }
}

TEST_CASE("backward_local matches finite differences") {
  Rng rng(31);
  for (int t = 0; t < 20; ++t) {
    ModelParams m = small_model(200 + t);
    const int n = 1 + static_cast<int>(rng.below(6));
    const Matrix x = oracle::random_matrix(rng, 5, n);
    std::vector<int> labels(n);
    for (int& y : labels) y = static_cast<int>(rng.below(4));
    Matrix q(4, n);
    for (int j = 0; j < n; ++j) q.col(j) = softmax(oracle::random_vector(rng, 4, 2.0));
    const double beta = (t % 2 == 0) ? 3.0 : 0.0;

    double loss = 0.0;
    const ModelParams grads = backward_local(m, x, labels, q, beta, &loss);
    CHECK(loss == doctest::Approx(batch_local_loss(m, x, labels, q, beta)).epsilon(1e-12));

    const std::vector<double> analytic = grads.flatten();
    auto f = [&](const oracle::Vec& flat) {
      ModelParams p = m;
      p.assign_flat(flat);
      return batch_local_loss(p, x, labels, q, beta);
    };
    const oracle::Vec flat = m.flatten();
    for (std::size_t k = 0; k < flat.size(); ++k) {
      const double fd = oracle::central_difference(f, flat, k, 1e-6);
      CHECK(oracle::relative_error(analytic[k], fd, 1e-4) < 1e-4);
    }
  }
}

TEST_CASE("backward_local phi gradient decomposes into classifier_gradient") {
  const ModelParams m = small_model(77);
  Rng rng(5);
  const Matrix x = oracle::random_matrix(rng, 5, 1);
  const std::vector<int> labels = {2};
  const ModelParams g = backward_local(m, x, labels, Matrix(), 0.0);
  const Matrix ref = classifier_gradient(m.phi, forward_features(m.theta, x.col(0)), 2);
  CHECK((g.phi - ref).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("sgd_step") {
  const ModelParams m = small_model(6);
  ModelParams g = m.zeros_like();
  g.phi.setOnes();
  CHECK(sgd_step(m, g, 0.0).flatten() == m.flatten());
  const ModelParams s = sgd_step(m, g, 0.5);
  CHECK((s.phi - (m.phi.array() - 0.5).matrix()).cwiseAbs().maxCoeff() < 1e-15);
  CHECK_THROWS(sgd_step(m, g, -0.1));
}
