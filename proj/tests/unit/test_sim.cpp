#include <cmath>
#include <numbers>

#include "doctest.h"

#include "dudotrans/common/binary_io.hpp"
#include "dudotrans/sim/dataset.hpp"
#include "dudotrans/sim/noise.hpp"
#include "dudotrans/tomo/ctar.hpp"
#include "dudotrans/tomo/operators.hpp"
#include "support/tempdir.hpp"

using namespace dudotrans;
using namespace dudotrans::sim;
using dudotrans::testing::TempDir;

namespace {

tomo::Sinogram phantom_sino(std::size_t size, std::size_t detectors, std::size_t views) {
  const auto g = tomo::ScanGeometry::desk(size, detectors, views);
  return tomo::forward_project(tomo::rasterize_phantom(tomo::shepp_logan(), g));
}

double mean_bin_variance(const tomo::Sinogram& clean, double photons, std::size_t draws) {
  const std::size_t n = clean.bins.size();
  std::vector<double> sum(n, 0.0), sum2(n, 0.0);
  for (std::size_t k = 0; k < draws; ++k) {
    const auto noisy = add_noise(clean, {photons, 0.0, 100 + k});
    for (std::size_t i = 0; i < n; ++i) {
      sum[i] += noisy.bins.data[i];
      sum2[i] += noisy.bins.data[i] * noisy.bins.data[i];
    }
  }
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double m = sum[i] / draws;
    var += (sum2[i] / draws - m * m) * draws / (draws - 1.0);
  }
  return var / n;
}

}  // namespace

TEST_SUITE("sparse geometry") {
  TEST_CASE("angular spacing") {
    const auto base = tomo::ScanGeometry::desk();
    const double deg = 180.0 / std::numbers::pi;
    CHECK(make_sparse_geometry(base, 24).view_spacing() * deg == doctest::Approx(15.0));
    CHECK(make_sparse_geometry(base, 96).view_spacing() * deg == doctest::Approx(3.75));
    const auto g72 = make_sparse_geometry(base, 72);
    const auto g144 = make_sparse_geometry(base, 144);
    CHECK(g144.view_spacing() == doctest::Approx(g72.view_spacing() / 2));
    for (std::size_t k = 0; k < 72; ++k) CHECK(g144.view_angle(2 * k) == doctest::Approx(g72.view_angle(k)));
  }

  TEST_CASE("fewer than two views is rejected") {
    CHECK_THROWS_AS(make_sparse_geometry(tomo::ScanGeometry::desk(), 1), std::invalid_argument);
  }
}

TEST_SUITE("noise") {
  TEST_CASE("high-dose limit") {
    const auto clean = phantom_sino(32, 48, 24);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto noisy = add_noise(clean, {1e12, 0.0, seed});
      double worst = 0.0;
      for (std::size_t i = 0; i < clean.bins.size(); ++i) {
        worst = std::max(worst, std::abs(noisy.bins.data[i] - clean.bins.data[i]));
      }
      CHECK(worst < 1e-3);
    }
  }

  TEST_CASE("same seed is bitwise identical") {
    const auto clean = phantom_sino(32, 48, 24);
    const NoiseConfig cfg{5e6, 0.05, 42};
    CHECK(add_noise(clean, cfg, 3).bins == add_noise(clean, cfg, 3).bins);
    CHECK(!(add_noise(clean, cfg, 3).bins == add_noise(clean, cfg, 4).bins));
  }

  TEST_CASE("lower dose raises per-bin variance") {
    const auto clean = phantom_sino(16, 24, 8);
    CHECK(mean_bin_variance(clean, 1e5, 1000) > mean_bin_variance(clean, 5e6, 1000));
  }

  TEST_CASE("mean preserving at high dose") {
    const auto clean = phantom_sino(16, 24, 8);
    const std::size_t draws = 1000;
    std::vector<double> mean(clean.bins.size(), 0.0);
    for (std::size_t k = 0; k < draws; ++k) {
      const auto noisy = add_noise(clean, {1e9, 0.0, k});
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += noisy.bins.data[i] / draws;
    }
    for (std::size_t i = 0; i < mean.size(); ++i) CHECK(std::abs(mean[i] - clean.bins.data[i]) < 1e-3);
  }

  TEST_CASE("poisson sampler moments") {
    for (double lambda : {0.5, 3.0, 9.5, 50.0, 1e4, 1e7}) {
      SplitMix64 rng(static_cast<std::uint64_t>(lambda * 10));
      const int n = 200000;
      double s = 0.0, s2 = 0.0;
      for (int i = 0; i < n; ++i) {
        const double k = static_cast<double>(sample_poisson(lambda, rng));
        s += k;
        s2 += k * k;
      }
      const double m = s / n, var = s2 / n - m * m;
      // Five standard errors on the mean; 5% on the variance.
      CHECK(std::abs(m - lambda) < 5.0 * std::sqrt(lambda / n));
      CHECK(var == doctest::Approx(lambda).epsilon(0.05));
    }
  }

  TEST_CASE("config validation and json") {
    NoiseConfig bad{0.0, 0.05, 0};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    NoiseConfig neg{5e6, -0.1, 0};
    CHECK_THROWS_AS(neg.validate(), std::invalid_argument);
    const NoiseConfig cfg{1e5, 0.02, 9};
    const nlohmann::json j = cfg;
    const auto back = j.get<NoiseConfig>();
    CHECK(back.photons_i0 == cfg.photons_i0);
    CHECK(back.gauss_fraction == cfg.gauss_fraction);
    CHECK(back.seed == cfg.seed);
    nlohmann::json extra = j;
    extra["photons"] = 1;
    CHECK_THROWS(extra.get<NoiseConfig>());
  }
}

TEST_SUITE("dataset") {
  std::vector<tomo::PhantomSpec> specs(std::size_t n) {
    std::vector<tomo::PhantomSpec> out{tomo::shepp_logan()};
    for (std::size_t k = 1; k < n; ++k) out.push_back(tomo::jittered_shepp_logan(5, k));
    return out;
  }

  TEST_CASE("ten specs give ten entries") {
    TempDir dir("ds");
    const auto g = tomo::ScanGeometry::desk(32, 48, 360);
    const auto m = build_dataset(specs(10), g, 24, NoiseConfig{}, dir.path());
    REQUIRE(m.entries.size() == 10);
    for (const auto& e : m.entries) {
      CHECK(std::filesystem::exists(e.phantom));
      CHECK(std::filesystem::exists(e.clean_sino));
      CHECK(std::filesystem::exists(e.noisy_sino));
      CHECK(e.alpha_max == 24);
    }
    CHECK(m.select(Split::test).size() == 2);
    CHECK(m.select(Split::train).size() == 8);

    const auto loaded = DatasetManifest::load(dir / "manifest.json");
    REQUIRE(loaded.entries.size() == 10);
    CHECK(loaded.entries[9].split == Split::test);
    CHECK(loaded.entries[4].noisy_sino == m.entries[4].noisy_sino);
  }

  TEST_CASE("rebuild is byte identical") {
    TempDir a("dsa"), b("dsb");
    const auto g = tomo::ScanGeometry::desk(32, 48, 360);
    const auto ma = build_dataset(specs(3), g, 24, NoiseConfig{}, a.path());
    const auto mb = build_dataset(specs(3), g, 24, NoiseConfig{}, b.path());
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(read_file_bytes(ma.entries[k].noisy_sino) == read_file_bytes(mb.entries[k].noisy_sino));
      CHECK(read_file_bytes(ma.entries[k].phantom) == read_file_bytes(mb.entries[k].phantom));
    }
  }

  TEST_CASE("clean sinogram is the projection of the stored phantom") {
    TempDir dir("dsc");
    const auto g = tomo::ScanGeometry::desk(32, 48, 360);
    const auto m = build_dataset(specs(2), g, 24, NoiseConfig{}, dir.path());
    for (const auto& e : m.entries) {
      const auto phantom = tomo::load_image(e.phantom);
      const auto clean = tomo::load_sinogram(e.clean_sino);
      CHECK(clean.geometry.num_views == 24);
      CHECK(clean.bins == tomo::quantize_float32(tomo::forward_project(phantom).bins));
    }
  }

  TEST_CASE("manifest with a missing file is rejected") {
    TempDir dir("dsm");
    const auto g = tomo::ScanGeometry::desk(32, 48, 360);
    const auto m = build_dataset(specs(2), g, 24, NoiseConfig{}, dir.path());
    std::filesystem::remove(m.entries[1].clean_sino);
    CHECK_THROWS(DatasetManifest::load(dir / "manifest.json"));
    CHECK_THROWS(DatasetManifest::load(dir / "nope.json"));
  }
}
