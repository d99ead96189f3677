#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>
#include <vector>

#include "matl/gradcheck.hpp"
#include "matl/rng.hpp"
#include "matl/tripletloss.hpp"

using matl::LossConfig;
using matl::Tape;
using matl::Tensor;
using matl::Triplet;
using matl::TripletSet;

namespace {

// Independent enumeration oracle for batch-all mining.
TripletSet enumerate_valid(const std::vector<int>& labels) {
  TripletSet out;
  const int n = static_cast<int>(labels.size());
  for (int a = 0; a < n; ++a)
    for (int p = 0; p < n; ++p)
      for (int g = 0; g < n; ++g)
        if (a != p && labels[a] == labels[p] && labels[a] != labels[g]) out.push_back({a, p, g});
  return out;
}

Tensor<double> embeddings_1d(std::vector<double> values) {
  const int n = static_cast<int>(values.size());
  return Tensor<double>::from({n, 1}, std::move(values), true);
}

// Random embeddings resampled until every mined hinge is clear of zero, so
// finite differences stay on one side of the max() kink.
Tensor<double> clear_hinge_embeddings(matl::Rng& rng, const std::vector<int>& labels, int dim,
                                      const LossConfig& cfg) {
  const int n = static_cast<int>(labels.size());
  for (int attempt = 0; attempt < 200; ++attempt) {
    std::vector<double> v(static_cast<std::size_t>(n) * dim);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    auto emb = Tensor<double>::from({n, dim}, v, true);
    bool ok = true;
    for (const auto& t : matl::mine_triplets_all(labels)) {
      double dap = 0, dan = 0;
      for (int d = 0; d < dim; ++d) {
        dap += (v[t.anchor * dim + d] - v[t.positive * dim + d]) * (v[t.anchor * dim + d] - v[t.positive * dim + d]);
        dan += (v[t.anchor * dim + d] - v[t.negative * dim + d]) * (v[t.anchor * dim + d] - v[t.negative * dim + d]);
      }
      if (cfg.distance == matl::Distance::Euclidean) {
        dap = std::sqrt(dap);
        dan = std::sqrt(dan);
      }
      if (std::abs(dap - dan + cfg.margin) < 0.02) ok = false;
    }
    if (ok) return emb;
  }
  FAIL("could not sample hinge-clear embeddings");
  return Tensor<double>();
}

}  // namespace

TEST_CASE("batch-all mining enumerates valid triplets in lexicographic order") {
  CHECK(matl::mine_triplets_all({0, 0, 1}) == TripletSet{{0, 1, 2}, {1, 0, 2}});
  CHECK(matl::mine_triplets_all({0, 1, 2}).empty());

  const std::vector<int> labels{0, 0, 1, 1};
  auto mined = matl::mine_triplets_all(labels);
  CHECK(mined.size() == 8);
  CHECK(mined == enumerate_valid(labels));

  matl::Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> ls(rng.uniform_int(2, 7));
    for (auto& l : ls) l = rng.uniform_int(0, 2);
    CHECK(matl::mine_triplets_all(ls) == enumerate_valid(ls));
  }
}

TEST_CASE("batch-hard mining picks farthest positive and nearest negative") {
  const std::vector<int> labels{0, 0, 0, 1};
  // distances from anchor 0: d(0,1)=1, d(0,2)=4, d(0,3)=2
  std::vector<double> dist(16, 0.0);
  auto set = [&](int i, int j, double d) { dist[i * 4 + j] = dist[j * 4 + i] = d; };
  set(0, 1, 1.0);
  set(0, 2, 4.0);
  set(0, 3, 2.0);
  set(1, 2, 4.0);
  set(1, 3, 5.0);
  set(2, 3, 0.5);
  auto mined = matl::mine_triplets_hard(labels, dist);
  REQUIRE(mined.size() == 3);  // anchor 3 has no positive
  CHECK(mined[0] == Triplet{0, 2, 3});
  CHECK(mined[1] == Triplet{1, 2, 3});
  CHECK(mined[2] == Triplet{2, 0, 3});  // d(2,0) ties d(2,1); lowest index wins
}

TEST_CASE("triplet loss closed-form cases") {
  LossConfig cfg;

  cfg.margin = 1.0;
  {
    Tape<double> tape;
    auto emb = embeddings_1d({0.0, 0.0, std::sqrt(2.0)});  // d(a,p)=0, d(a,n)=2
    auto loss = matl::triplet_loss(tape, emb, {{0, 1, 2}}, cfg);
    CHECK(loss.item() == 0.0);
  }
  {
    Tape<double> tape;
    auto emb = embeddings_1d({0.4, 0.4, 0.4, 0.4});  // collapsed embeddings
    auto loss = matl::triplet_loss(tape, emb, matl::mine_triplets_all({0, 0, 1, 1}), cfg);
    CHECK(loss.item() == 1.0);
  }
  cfg.margin = 0.5;
  {
    Tape<double> tape;
    auto emb = embeddings_1d({0.0, 1.0, 1.0});  // d(a,p)=1, d(a,n)=1
    auto loss = matl::triplet_loss(tape, emb, {{0, 1, 2}}, cfg);
    CHECK(loss.item() == 0.5);
  }
}

TEST_CASE("empty triplet set yields a defined zero without gradient flow") {
  Tape<double> tape;
  auto emb = embeddings_1d({1.0, 2.0, 3.0});
  LossConfig cfg;
  auto loss = matl::triplet_loss(tape, emb, {}, cfg);
  CHECK(loss.item() == 0.0);
  CHECK_FALSE(loss.needs_grad());
  CHECK(matl::class_triplet_loss(tape, emb, {2, 2, 2}, cfg).item() == 0.0);  // single-class batch
}

TEST_CASE("class triplet loss equals triplet loss on hand-mined triplets") {
  Tape<double> tape;
  auto emb = embeddings_1d({0.3, -0.2, 0.9});
  LossConfig cfg;
  auto a = matl::class_triplet_loss(tape, emb, {0, 0, 1}, cfg);
  auto b = matl::triplet_loss(tape, emb, {{0, 1, 2}, {1, 0, 2}}, cfg);
  CHECK(a.item() == Catch::Approx(b.item()));
}

TEST_CASE("triplet loss is nonnegative and alpha at collapse") {
  matl::Rng rng(31);
  LossConfig cfg;
  for (int trial = 0; trial < 30; ++trial) {
    const int n = rng.uniform_int(3, 8);
    std::vector<int> labels(n);
    for (auto& l : labels) l = rng.uniform_int(0, 2);
    std::vector<double> v(n * 3);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    Tape<double> tape;
    auto emb = Tensor<double>::from({n, 3}, std::move(v));
    CHECK(matl::class_triplet_loss(tape, emb, labels, cfg).item() >= 0.0);
  }
}

TEST_CASE("batch-all loss is invariant under consistent batch permutation") {
  matl::Rng rng(37);
  const std::vector<int> labels{0, 0, 1, 1, 2, 2};
  std::vector<double> v(12);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  LossConfig cfg;

  Tape<double> tape;
  auto base = matl::class_triplet_loss(tape, Tensor<double>::from({6, 2}, v), labels, cfg).item();
  std::vector<int> perm{3, 0, 5, 2, 4, 1};
  std::vector<double> pv(12);
  std::vector<int> pl(6);
  for (int i = 0; i < 6; ++i) {
    pl[i] = labels[perm[i]];
    pv[2 * i] = v[2 * perm[i]];
    pv[2 * i + 1] = v[2 * perm[i] + 1];
  }
  auto permuted = matl::class_triplet_loss(tape, Tensor<double>::from({6, 2}, pv), pl, cfg).item();
  CHECK(base == Catch::Approx(permuted).epsilon(1e-12));
}

TEST_CASE("matl loss reduces to its components at lambda endpoints") {
  matl::Rng rng(41);
  const std::vector<int> y_class{0, 0, 1, 1, 2};
  const std::vector<int> y_box{1, 2, 1, 0, 0};
  std::vector<double> v(10);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  auto emb = Tensor<double>::from({5, 2}, v);

  LossConfig cfg;
  Tape<double> tape;
  const double lc = matl::class_triplet_loss(tape, emb, y_class, cfg).item();
  const double lb = matl::box_triplet_loss(tape, emb, y_box, cfg).item();

  cfg.lambda = 0.0;
  CHECK(matl::matl_loss(tape, emb, y_class, y_box, cfg).item() == Catch::Approx(lc).margin(1e-12));
  cfg.lambda = 1.0;
  CHECK(matl::matl_loss(tape, emb, y_class, y_box, cfg).item() == Catch::Approx(lb).margin(1e-12));

  // linear in lambda: value(l) == (1-l)*value(0) + l*value(1)
  for (const double l : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    cfg.lambda = l;
    const double got = matl::matl_loss(tape, emb, y_class, y_box, cfg).item();
    CHECK(got == Catch::Approx((1.0 - l) * lc + l * lb).margin(1e-9));
  }
}

TEST_CASE("matl loss gradient matches the weighted sum of component gradients") {
  matl::Rng rng(43);
  const std::vector<int> y_class{0, 0, 1, 1};
  const std::vector<int> y_box{0, 1, 0, 1};
  LossConfig cfg;
  cfg.lambda = 0.25;
  auto emb = clear_hinge_embeddings(rng, y_class, 3, cfg);

  Tape<double> tape;
  auto loss = matl::matl_loss(tape, emb, y_class, y_box, cfg);
  tape.backward(loss);
  auto matl_grad = emb.grad();

  emb.zero_grad();
  Tape<double> t2;
  auto lc = matl::class_triplet_loss(t2, emb, y_class, cfg);
  t2.backward(lc);
  auto class_grad = emb.grad();

  emb.zero_grad();
  Tape<double> t3;
  auto lb = matl::box_triplet_loss(t3, emb, y_box, cfg);
  t3.backward(lb);
  auto box_grad = emb.grad();

  for (std::size_t i = 0; i < matl_grad.size(); ++i)
    CHECK(matl_grad[i] == Catch::Approx(0.75 * class_grad[i] + 0.25 * box_grad[i]).margin(1e-12));
}

TEST_CASE("triplet losses pass 64-bit gradient checks") {
  matl::Rng rng(47);
  const std::vector<int> y_class{0, 0, 1, 1, 2};
  const std::vector<int> y_box{1, 0, 0, 1, 1};

  for (const auto distance : {matl::Distance::SquaredEuclidean, matl::Distance::Euclidean}) {
    for (const bool normalize : {false, true}) {
      LossConfig cfg;
      cfg.distance = distance;
      cfg.normalize_embeddings = normalize;
      cfg.margin = 0.7;
      cfg.lambda = 0.4;
      auto emb = clear_hinge_embeddings(rng, y_class, 3, cfg);
      std::vector<Tensor<double>> inputs{emb};
      const double err = matl::grad_check(
          [&](Tape<double>& tape, std::vector<Tensor<double>>& in) {
            return matl::matl_loss(tape, in[0], y_class, y_box, cfg);
          },
          inputs);
      CHECK(err < 1e-6);
    }
  }
}
