#include <cmath>

#include "doctest.h"

#include "c2fl/errors.hpp"
#include "c2fl/rng.hpp"
#include "c2fl/synthesis.hpp"
#include "../oracles.hpp"

using namespace c2fl;

namespace {

PrototypeTable prototypes_for(int classes, int dim, std::uint64_t seed) {
  std::vector<std::string> names;
  for (int c = 0; c < classes; ++c) names.push_back("c" + std::to_string(c));
  return stub_prototypes(names, dim, seed);
}

// Brute-force federated gradient straight from the per-sample closed form.
oracle::Mat federated_gradient_oracle(const Matrix& phi, const FeatureBank& bank, int c) {
  std::vector<oracle::Mat> per;
  for (int i = 0; i < bank.per_class; ++i)
    per.push_back(oracle::ce_classifier_grad(
        oracle::to_mat(phi),
        oracle::to_vec(bank.features.row(c * bank.per_class + i).transpose()), c));
  return oracle::mean_of(per);
}

}  // namespace

TEST_CASE("cosine_dissimilarity") {
  Vector a(2), b(2);
  a << 1, 0;
  b << 0, 1;
  CHECK(cosine_dissimilarity(a, a) == doctest::Approx(0.0));
  CHECK(cosine_dissimilarity(a, b) == doctest::Approx(1.0));
  CHECK(cosine_dissimilarity(a, -a) == doctest::Approx(2.0));
  CHECK(cosine_dissimilarity(a, Vector::Zero(2)) == 1.0);
}

TEST_CASE("grad_match_loss") {
  Matrix g(2, 2);
  g << 1, 0, 0, 1;
  Matrix h(2, 2);
  h << 1, 1, 1, 0;
  CHECK(grad_match_loss(g, h) == doctest::Approx(0.6464466094067263).epsilon(1e-12));
  CHECK(std::abs(grad_match_loss(g, -g) - 2.0) < 1e-9);
  CHECK(grad_match_loss(g, g) == doctest::Approx(0.0));
  CHECK_THROWS_AS(grad_match_loss(g, Matrix::Zero(3, 2)), ShapeError);

  SUBCASE("zero row contributes 1") {
    Matrix z = g;
    z.row(0).setZero();
    CHECK(grad_match_loss(z, g) == doctest::Approx(0.5));
  }
  SUBCASE("range and per-row scale invariance") {
    Rng rng(12);
    for (int t = 0; t < 100; ++t) {
      const Matrix a = oracle::random_matrix(rng, 4, 3);
      const Matrix b = oracle::random_matrix(rng, 4, 3);
      const double l = grad_match_loss(a, b);
      CHECK(l >= 0.0);
      CHECK(l <= 2.0);
      Vector s(4);
      for (int i = 0; i < 4; ++i) s(i) = 0.1 + 5.0 * rng.uniform();
      CHECK(grad_match_loss(s.asDiagonal() * a, b) == doctest::Approx(l).epsilon(1e-12));
      CHECK(grad_match_loss(a, s.asDiagonal() * b) == doctest::Approx(l).epsilon(1e-12));
    }
  }
}

TEST_CASE("federated_gradient equals the per-sample mean") {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    FeatureBank bank = FeatureBank::gaussian(4, 5, 3, 1.0, rng.next());
    const Matrix phi = oracle::random_matrix(rng, 4, 3);
    for (int c = 0; c < 4; ++c) {
      const Matrix g = federated_gradient(phi, bank, c);
      const oracle::Mat ref = federated_gradient_oracle(phi, bank, c);
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) CHECK(std::abs(g(i, j) - ref[i][j]) < 1e-12);
    }
  }
}

TEST_CASE("pcl_loss closed forms") {
  SUBCASE("two orthogonal features on their prototypes") {
    FeatureBank bank{2, 1, Matrix::Identity(2, 2)};
    PrototypeTable t;
    t.class_names = {"a", "b"};
    t.vectors = Matrix::Identity(2, 2);
    CHECK(pcl_loss(bank, t, 1.0) == doctest::Approx(-2.0).epsilon(1e-12));
  }
  SUBCASE("high temperature limit") {
    const FeatureBank bank = FeatureBank::gaussian(2, 3, 8, 1.0, 4);
    const PrototypeTable t = prototypes_for(2, 8, 1);
    const double expected = 6.0 * std::log(5.0);
    CHECK(std::abs(pcl_loss(bank, t, 1e9) - expected) / expected < 1e-3);
    const FeatureBank big = FeatureBank::gaussian(5, 4, 6, 2.0, 9);
    const double expected_big = 20.0 * std::log(19.0);
    CHECK(std::abs(pcl_loss(big, prototypes_for(5, 6, 2), 1e9) - expected_big) / expected_big <
          1e-3);
  }
  SUBCASE("scale invariant in the features") {
    FeatureBank bank = FeatureBank::gaussian(3, 4, 5, 1.0, 6);
    const PrototypeTable t = prototypes_for(3, 5, 2);
    const double l = pcl_loss(bank, t, 0.1);
    bank.features *= 7.5;
    CHECK(pcl_loss(bank, t, 0.1) == doctest::Approx(l).epsilon(1e-12));
  }
  SUBCASE("errors") {
    FeatureBank bank = FeatureBank::gaussian(2, 2, 4, 1.0, 1);
    const PrototypeTable t = prototypes_for(2, 4, 1);
    CHECK_THROWS_AS(pcl_loss(bank, t, 0.0), ConfigError);
    CHECK_THROWS_AS(pcl_loss(bank, prototypes_for(3, 4, 1), 0.1), ShapeError);
    bank.features.row(1).setZero();
    CHECK_THROWS_AS(pcl_loss(bank, t, 0.1), NumericError);
    const FeatureBank single = FeatureBank::gaussian(1, 3, 4, 1.0, 1);
    CHECK_THROWS_AS(pcl_loss(single, prototypes_for(1, 4, 1), 0.1, true), ConfigError);
  }
}

TEST_CASE("inter-class negatives change only the denominator set") {
  const FeatureBank bank = FeatureBank::gaussian(3, 4, 6, 1.0, 10);
  const PrototypeTable t = prototypes_for(3, 6, 3);
  const double tau = 0.5;
  double expected = 0.0;
  for (Eigen::Index i = 0; i < bank.size(); ++i) {
    const Vector vi = bank.features.row(i).normalized();
    double denom = 0.0;
    for (Eigen::Index j = 0; j < bank.size(); ++j) {
      if (bank.label_of(j) == bank.label_of(i)) continue;
      denom += std::exp(vi.dot(bank.features.row(j).normalized()) / tau);
    }
    expected += std::log(denom) - vi.dot(t.prototype(bank.label_of(i))) / tau;
  }
  CHECK(pcl_loss(bank, t, tau, true) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("pcl_loss matches a direct double loop") {
  Rng rng(44);
  for (int t = 0; t < 10; ++t) {
    const FeatureBank bank = FeatureBank::gaussian(3, 3, 4, 1.0, rng.next());
    const PrototypeTable protos = prototypes_for(3, 4, rng.next());
    const double tau = 0.05 + rng.uniform();
    double expected = 0.0;
    for (Eigen::Index i = 0; i < bank.size(); ++i) {
      const Vector vi = bank.features.row(i).normalized();
      double denom = 0.0;
      for (Eigen::Index j = 0; j < bank.size(); ++j)
        if (j != i) denom += std::exp(vi.dot(bank.features.row(j).normalized()) / tau);
      expected += std::log(denom) - vi.dot(protos.prototype(bank.label_of(i))) / tau;
    }
    CHECK(pcl_loss(bank, protos, tau) == doctest::Approx(expected).epsilon(1e-10));
  }
}

TEST_CASE("synthesis objective gradient matches finite differences") {
  Rng rng(71);
  for (int t = 0; t < 12; ++t) {
    const int classes = 2 + static_cast<int>(rng.below(3));
    const int m = 1 + static_cast<int>(rng.below(3));
    const int d = 2 + static_cast<int>(rng.below(4));
    const FeatureBank bank = FeatureBank::gaussian(classes, m, d, 1.0, rng.next());
    const Matrix phi = oracle::random_matrix(rng, classes, d);
    const PrototypeTable protos = prototypes_for(classes, d, rng.next());
    ClassGradients g_agg;
    for (int c = 0; c < classes; ++c)
      if (c == 0 || rng.uniform() < 0.7) g_agg[c] = oracle::random_matrix(rng, classes, d);
    SynthesisConfig cfg;
    cfg.eta_pcl = (t % 3 == 0) ? 0.0 : 0.3;
    cfg.tau = 0.5;
    cfg.interclass_negatives = (t % 4 == 1);

    const SynthesisObjective obj = synthesis_objective(bank, g_agg, phi, protos, cfg);
    CHECK(obj.total == doctest::Approx(obj.grad + cfg.eta_pcl * obj.pcl));
    auto f = [&](const oracle::Vec& flat) {
      FeatureBank b = bank;
      b.features = Eigen::Map<const Matrix>(flat.data(), bank.size(), d);
      return synthesis_objective(b, g_agg, phi, protos, cfg).total;
    };
    const oracle::Vec flat(bank.features.data(), bank.features.data() + bank.features.size());
    for (std::size_t k = 0; k < flat.size(); ++k) {
      const double fd = oracle::central_difference(f, flat, k, 1e-6);
      CHECK(oracle::relative_error(obj.gradient.data()[k], fd, 1e-4) < 1e-4);
    }
  }
}

TEST_CASE("grad-match term is a mean over present classes") {
  const FeatureBank bank = FeatureBank::gaussian(3, 2, 4, 1.0, 5);
  Rng rng(2);
  const Matrix phi = oracle::random_matrix(rng, 3, 4);
  const PrototypeTable protos = prototypes_for(3, 4, 1);
  ClassGradients g_agg{{0, oracle::random_matrix(rng, 3, 4)}, {2, oracle::random_matrix(rng, 3, 4)}};
  SynthesisConfig cfg;
  cfg.eta_pcl = 0.0;
  const double expected = 0.5 * (grad_match_loss(federated_gradient(phi, bank, 0), g_agg[0]) +
                                 grad_match_loss(federated_gradient(phi, bank, 2), g_agg[2]));
  const SynthesisObjective obj = synthesis_objective(bank, g_agg, phi, protos, cfg);
  CHECK(obj.grad == doctest::Approx(expected).epsilon(1e-12));
  CHECK(obj.pcl == 0.0);
  // Class 1 is absent and eta is 0: its features get no signal.
  CHECK(obj.gradient.middleRows(2, 2).norm() == 0.0);
}

TEST_CASE("optimize_features") {
  const FeatureBank bank = FeatureBank::gaussian(2, 4, 3, 0.5, 8);
  Rng rng(9);
  const Matrix phi = oracle::random_matrix(rng, 2, 3);
  const PrototypeTable protos = prototypes_for(2, 3, 4);
  ClassGradients g_agg{{0, oracle::random_matrix(rng, 2, 3)}, {1, oracle::random_matrix(rng, 2, 3)}};

  SUBCASE("zero steps leave the bank unchanged") {
    SynthesisConfig cfg;
    cfg.steps = 0;
    CHECK((optimize_features(bank, g_agg, phi, protos, cfg).features - bank.features).norm() == 0.0);
  }
  SUBCASE("objective decreases over 200 steps") {
    SynthesisConfig cfg;
    cfg.steps = 200;
    cfg.lr = 0.5;
    cfg.eta_pcl = 0.01;
    const double before = synthesis_objective(bank, g_agg, phi, protos, cfg).total;
    const FeatureBank after = optimize_features(bank, g_agg, phi, protos, cfg);
    CHECK(synthesis_objective(after, g_agg, phi, protos, cfg).total < before);
  }
  SUBCASE("divergence is a numeric error") {
    SynthesisConfig cfg;
    cfg.steps = 5;
    cfg.lr = 1e308;
    CHECK_THROWS_AS(optimize_features(bank, g_agg, phi, protos, cfg), NumericError);
  }
  SUBCASE("invalid config") {
    SynthesisConfig cfg;
    cfg.steps = -1;
    CHECK_THROWS_AS(optimize_features(bank, g_agg, phi, protos, cfg), ConfigError);
  }
}

TEST_CASE("retrain_classifier") {
  const FeatureBank bank = FeatureBank::gaussian(3, 10, 4, 1.0, 3);
  const Matrix phi0 = Matrix::Zero(3, 4);

  SUBCASE("zero steps") {
    CHECK((retrain_classifier(phi0, bank, 0, 0.1, 0, 1) - phi0).norm() == 0.0);
  }
  SUBCASE("separable bank is fit exactly") {
    FeatureBank sep = bank;
    for (int c = 0; c < 3; ++c) sep.class_block(c).col(c).array() += 6.0;
    const Matrix phi = retrain_classifier(phi0, sep, 2000, 0.5, 8, 2);
    int correct = 0;
    for (Eigen::Index i = 0; i < sep.size(); ++i) {
      Eigen::Index best;
      (phi * sep.features.row(i).transpose()).maxCoeff(&best);
      correct += best == sep.label_of(i);
    }
    CHECK(correct == sep.size());
  }
  SUBCASE("full-batch steps are invariant to duplicating the bank") {
    FeatureBank twice{3, 20, Matrix(60, 4)};
    for (int c = 0; c < 3; ++c) twice.class_block(c) << bank.class_block(c), bank.class_block(c);
    const Matrix a = retrain_classifier(phi0, bank, 50, 0.3, 0, 1);
    const Matrix b = retrain_classifier(phi0, twice, 50, 0.3, 0, 1);
    CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
  }
  SUBCASE("one full-batch step is the mean classifier gradient") {
    Rng rng(5);
    const Matrix phi = oracle::random_matrix(rng, 3, 4);
    Matrix mean = Matrix::Zero(3, 4);
    for (int c = 0; c < 3; ++c) mean += federated_gradient(phi, bank, c) / 3.0;
    CHECK((retrain_classifier(phi, bank, 1, 0.2, 0, 1) - (phi - 0.2 * mean)).cwiseAbs().maxCoeff() <
          1e-12);
  }
  SUBCASE("mini-batch schedule is seeded") {
    CHECK((retrain_classifier(phi0, bank, 30, 0.1, 4, 9) -
           retrain_classifier(phi0, bank, 30, 0.1, 4, 9))
              .norm() == 0.0);
  }
}

TEST_CASE("feature bank") {
  const FeatureBank b = FeatureBank::gaussian(3, 4, 2, 0.1, 1);
  CHECK(b.size() == 12);
  CHECK(b.label_of(7) == 1);
  CHECK_NOTHROW(b.validate());
  FeatureBank bad = b;
  bad.per_class = 5;
  CHECK_THROWS_AS(bad.validate(), ShapeError);
  CHECK((FeatureBank::gaussian(3, 4, 2, 0.1, 1).features - b.features).norm() == 0.0);
}
