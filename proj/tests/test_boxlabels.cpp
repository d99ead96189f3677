#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "matl/boxlabels.hpp"
#include "matl/rng.hpp"

using matl::BoxAnnotation;
using matl::BoxFeatures;

namespace {

using Point = std::array<double, 4>;

double sq(double v) { return v * v; }

// Exhaustive oracle: minimum WCSS over every assignment of points into k
// groups, centroids at group means.
double brute_force_wcss(const std::vector<Point>& pts, int k) {
  const int n = static_cast<int>(pts.size());
  std::vector<int> assign(n, 0);
  double best = std::numeric_limits<double>::infinity();
  const long long total = static_cast<long long>(std::pow(k, n));
  for (long long code = 0; code < total; ++code) {
    long long c = code;
    for (int i = 0; i < n; ++i) {
      assign[i] = static_cast<int>(c % k);
      c /= k;
    }
    std::vector<Point> sums(k, {0, 0, 0, 0});
    std::vector<int> counts(k, 0);
    for (int i = 0; i < n; ++i) {
      for (int d = 0; d < 4; ++d) sums[assign[i]][d] += pts[i][d];
      counts[assign[i]]++;
    }
    double wcss = 0.0;
    for (int i = 0; i < n; ++i) {
      const int j = assign[i];
      for (int d = 0; d < 4; ++d) wcss += sq(pts[i][d] - sums[j][d] / counts[j]);
    }
    best = std::min(best, wcss);
  }
  return best;
}

Point pt(double x) { return {x, 0.0, 0.0, 0.0}; }

}  // namespace

TEST_CASE("box features: squares, elongation, symmetry") {
  auto f = matl::compute_features({0, 0, 10, 10});
  CHECK(f.area == 100.0);
  CHECK(f.ss == 0.0);

  f = matl::compute_features({0, 0, 20, 10});
  CHECK(f.area == 200.0);
  CHECK(f.ss == Catch::Approx(0.5));

  auto a = matl::compute_features({0, 0, 7, 3});
  auto b = matl::compute_features({0, 0, 3, 7});
  CHECK(a.ss == Catch::Approx(b.ss));
  CHECK(a.ss == Catch::Approx(1.0 - 3.0 / 7.0));

  CHECK_THROWS_AS(matl::compute_features({0, 0, 0, 5}), matl::DataError);
}

TEST_CASE("box feature invariants over random boxes") {
  matl::Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    const int w = rng.uniform_int(1, 500), h = rng.uniform_int(1, 500);
    const auto f = matl::compute_features({0, 0, w, h});
    CHECK(f.area == Catch::Approx(static_cast<double>(w) * h));
    CHECK(f.ss >= 0.0);
    CHECK(f.ss < 1.0);
    if (w == h) CHECK(f.ss == 0.0);
    if (f.ss == 0.0) CHECK(w == h);
  }
}

TEST_CASE("min-max normalization endpoints, degeneracy, clamping") {
  std::vector<BoxFeatures> fs(3);
  fs[0].area = 0;
  fs[1].area = 5;
  fs[2].area = 10;
  for (auto& f : fs) f.ss = 4;  // constant feature
  auto stats = matl::fit_minmax(fs);

  CHECK(matl::apply_minmax(fs[0], stats)[0] == 0.0);
  CHECK(matl::apply_minmax(fs[1], stats)[0] == 0.5);
  CHECK(matl::apply_minmax(fs[2], stats)[0] == 1.0);
  for (const auto& f : fs) CHECK(matl::apply_minmax(f, stats)[1] == 0.0);

  BoxFeatures out_of_range;
  out_of_range.area = 12;
  CHECK(matl::apply_minmax(out_of_range, stats)[0] == 1.0);
  out_of_range.area = -3;
  CHECK(matl::apply_minmax(out_of_range, stats)[0] == 0.0);

  CHECK_THROWS_AS(matl::fit_minmax({}), matl::UsageError);
}

TEST_CASE("min-max output stays in [0,1] on unseen data") {
  matl::Rng rng(7);
  std::vector<BoxFeatures> fs;
  for (int i = 0; i < 50; ++i)
    fs.push_back(matl::compute_features({0, 0, rng.uniform_int(1, 300), rng.uniform_int(1, 300)}));
  auto stats = matl::fit_minmax(fs);
  for (int i = 0; i < 200; ++i) {
    const auto f = matl::compute_features({0, 0, rng.uniform_int(1, 900), rng.uniform_int(1, 900)});
    for (double v : matl::apply_minmax(f, stats)) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("kmeans on a separable 4-point instance matches brute force") {
  const std::vector<Point> pts{pt(0.0), pt(0.1), pt(5.0), pt(5.1)};
  auto model = matl::kmeans_fit(pts, 2, 1);
  CHECK(model.wcss == Catch::Approx(0.01).margin(1e-9));
  CHECK(model.wcss == Catch::Approx(brute_force_wcss(pts, 2)).margin(1e-9));
  std::vector<double> cs{model.centroids[0][0], model.centroids[1][0]};
  std::sort(cs.begin(), cs.end());
  CHECK(cs[0] == Catch::Approx(0.05));
  CHECK(cs[1] == Catch::Approx(5.05));
}

TEST_CASE("kmeans degenerate cluster counts") {
  const std::vector<Point> pts{pt(1.0), pt(2.0), pt(4.0)};
  auto all = matl::kmeans_fit(pts, 3, 9);
  CHECK(all.wcss == Catch::Approx(0.0).margin(1e-12));

  auto one = matl::kmeans_fit(pts, 1, 9);
  CHECK(one.centroids[0][0] == Catch::Approx(7.0 / 3.0));

  CHECK_THROWS_AS(matl::kmeans_fit(pts, 4, 9), matl::UsageError);
}

TEST_CASE("kmeans_assign: exact centroid, tie break, linear-scan oracle") {
  matl::KMeansModel model;
  model.k = 2;
  model.centroids = {pt(0.0), pt(2.0)};
  CHECK(matl::kmeans_assign(model, pt(0.0)) == 0);
  CHECK(matl::kmeans_assign(model, pt(2.0)) == 1);
  CHECK(matl::kmeans_assign(model, pt(1.0)) == 0);  // equidistant -> lowest index

  matl::Rng rng(3);
  matl::KMeansModel m2;
  m2.k = 5;
  for (int j = 0; j < 5; ++j)
    m2.centroids.push_back({rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()});
  for (int i = 0; i < 200; ++i) {
    const Point p{rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()};
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int j = 0; j < 5; ++j) {
      double d = 0;
      for (int dd = 0; dd < 4; ++dd) d += sq(p[dd] - m2.centroids[j][dd]);
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    CHECK(matl::kmeans_assign(m2, p) == best);
  }
}

TEST_CASE("wcss curve is non-increasing and elbow finds three blobs") {
  matl::Rng rng(17);
  std::vector<Point> pts;
  const std::vector<Point> centers{{0.1, 0.1, 0.1, 0.1}, {0.9, 0.1, 0.5, 0.9}, {0.5, 0.9, 0.9, 0.2}};
  for (const auto& c : centers)
    for (int i = 0; i < 40; ++i) {
      Point p;
      for (int d = 0; d < 4; ++d) p[d] = c[d] + rng.uniform(-0.03, 0.03);
      pts.push_back(p);
    }
  auto curve = matl::wcss_curve(pts, 8, 5);
  REQUIRE(curve.size() == 8);
  for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i].second <= curve[i - 1].second + 1e-12);
  auto suggestion = matl::elbow_suggest(curve);
  REQUIRE(suggestion.has_value());
  CHECK(*suggestion == 3);
}

TEST_CASE("wcss curve with k_max == n reaches zero") {
  std::vector<Point> pts{pt(0.0), pt(1.0), pt(2.0), pt(4.0)};
  auto curve = matl::wcss_curve(pts, 4, 11);
  CHECK(curve.back().second == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("elbow suggestion requires at least three curve points") {
  CHECK_FALSE(matl::elbow_suggest({{1, 5.0}, {2, 1.0}}).has_value());
}
