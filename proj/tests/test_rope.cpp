#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "duet/rope.hpp"
#include "support/gradcheck.hpp"

using namespace duet;

namespace {

// Direct trig oracle: affinity of unit pairs is sum_k cos(delta angle).
double affinity_oracle(int64_t i, int64_t j, const RopeConfig& ca,
                       const RopeConfig& cv) {
  double acc = 0.0;
  for (int64_t k = 0; k < ca.head_dim / 2; ++k)
    acc += std::cos(ca.freq(k) * ca.scale * static_cast<double>(i) -
                    cv.freq(k) * cv.scale * static_cast<double>(j));
  return acc;
}

int64_t clamped_round(double x, int64_t hi) {
  auto r = static_cast<int64_t>(std::llround(x));
  return std::min(std::max<int64_t>(r, 0), hi);
}

}  // namespace

TEST_CASE("rope config validation", "[rope]") {
  CHECK_THROWS_AS(apply_rope(Tensor::zeros({2, 3}), RopeConfig{3, 10000.0, 1.0}),
                  ConfigError);
  CHECK_THROWS_AS(apply_rope(Tensor::zeros({2, 4}), RopeConfig{4, 10000.0, 0.0}),
                  ConfigError);
  CHECK_THROWS_AS(apply_rope(Tensor::zeros({2, 6}), RopeConfig{4, 10000.0, 1.0}),
                  ConfigError);
}

TEST_CASE("rope leaves position zero unchanged", "[rope]") {
  Rng rng(1);
  Tensor x = Tensor::randn({1, 8}, rng);
  Tensor y = apply_rope(x, RopeConfig{8, 10000.0, 0.5});
  for (std::size_t i = 0; i < x.data().size(); ++i)
    CHECK(y.data()[i] == Catch::Approx(x.data()[i]).margin(1e-15));
}

TEST_CASE("rope preserves pair norms", "[rope]") {
  Rng rng(2);
  Tensor x = Tensor::randn({3, 9, 12}, rng, 1.5);
  Tensor y = apply_rope(x, RopeConfig{12, 10000.0, 0.31});
  for (int64_t row = 0; row < 27; ++row)
    for (int64_t k = 0; k < 6; ++k) {
      const double nx = std::hypot(x.data()[row * 12 + 2 * k],
                                   x.data()[row * 12 + 2 * k + 1]);
      const double ny = std::hypot(y.data()[row * 12 + 2 * k],
                                   y.data()[row * 12 + 2 * k + 1]);
      REQUIRE(std::abs(nx - ny) < 1e-12);
    }
}

TEST_CASE("equal-scale rotation depends only on position difference",
          "[rope]") {
  RopeConfig cfg{16, 10000.0, 1.0};
  // Unit pair rotated at p dotted with the same pair at q.
  auto pair_dot = [&](int64_t p, int64_t q) {
    double acc = 0.0;
    for (int64_t k = 0; k < 8; ++k)
      acc += std::cos(cfg.freq(k) * static_cast<double>(p - q));
    return acc;
  };
  AffinityMatrix m = affinity_matrix(24, 24, cfg, cfg);
  for (int64_t i = 0; i < 24; ++i)
    for (int64_t j = 0; j < 24; ++j)
      REQUIRE(std::abs(m.at(i, j) - pair_dot(i, j)) < 1e-9);
  // Shift invariance.
  for (int64_t d = 1; d < 6; ++d)
    for (int64_t i = 0; i + d < 24; ++i)
      for (int64_t j = 0; j + d < 24; ++j)
        REQUIRE(std::abs(m.at(i + d, j + d) - m.at(i, j)) < 1e-9);
}

TEST_CASE("audio position 157 aligns in angle with video position 31",
          "[rope]") {
  const double scale = 31.0 / 157.0;
  RopeConfig cfg{128, 10000.0, scale};
  for (int64_t k = 0; k < 64; ++k) {
    const double audio_angle = cfg.freq(k) * scale * 157.0;
    const double video_angle = cfg.freq(k) * 1.0 * 31.0;
    REQUIRE(std::abs(audio_angle - video_angle) < 1e-9);
  }
}

TEST_CASE("affinity argmax traces the scaled diagonal", "[rope]") {
  struct Case {
    int64_t la, lv;
  };
  for (Case c : {Case{157, 31}, Case{20, 5}, Case{7, 7}}) {
    RopeConfig ca{128, 10000.0,
                  static_cast<double>(c.lv) / static_cast<double>(c.la)};
    RopeConfig cv{128, 10000.0, 1.0};
    AffinityMatrix m = affinity_matrix(c.la, c.lv, ca, cv);
    for (int64_t i = 0; i < c.la; ++i) {
      const int64_t expect = clamped_round(
          static_cast<double>(i * c.lv) / static_cast<double>(c.la),
          c.lv - 1);
      REQUIRE(m.argmax_row(i) == expect);
    }
  }
}

TEST_CASE("unscaled affinity is the misaligned diagonal", "[rope]") {
  RopeConfig ca{128, 10000.0, 1.0};
  RopeConfig cv{128, 10000.0, 1.0};
  AffinityMatrix m = affinity_matrix(157, 31, ca, cv);
  // Within the video span the ridge sits at j = i. Beyond it the kernel's
  // side lobes make the exact argmax wander around the clamp column, so the
  // assertable fact is that the ridge misses the scaled diagonal for nearly
  // every remaining row.
  for (int64_t i = 0; i <= 31; ++i)
    REQUIRE(m.argmax_row(i) == std::min<int64_t>(i, 30));
  int64_t mismatched = 0;
  for (int64_t i = 32; i < 157; ++i) {
    const int64_t scaled_target = clamped_round(i * 31.0 / 157.0, 30);
    if (m.argmax_row(i) != scaled_target) ++mismatched;
  }
  CHECK(mismatched >= (157 - 32) * 8 / 10);
}

TEST_CASE("identical lengths and scales give the main diagonal", "[rope]") {
  RopeConfig cfg{64, 10000.0, 1.0};
  AffinityMatrix m = affinity_matrix(7, 7, cfg, cfg);
  for (int64_t i = 0; i < 7; ++i) CHECK(m.argmax_row(i) == i);
}

TEST_CASE("affinity values bounded by head_dim/2 and match oracle", "[rope]") {
  RopeConfig ca{32, 10000.0, 5.0 / 20.0};
  RopeConfig cv{32, 10000.0, 1.0};
  AffinityMatrix m = affinity_matrix(20, 5, ca, cv);
  for (int64_t i = 0; i < 20; ++i)
    for (int64_t j = 0; j < 5; ++j) {
      REQUIRE(std::abs(m.at(i, j)) <= 16.0 + 1e-12);
      REQUIRE(std::abs(m.at(i, j) - affinity_oracle(i, j, ca, cv)) < 1e-12);
    }
  CHECK_THROWS_AS(affinity_matrix(0, 5, ca, cv), ConfigError);
}

TEST_CASE("rope gradient matches finite differences", "[rope]") {
  Rng rng(5);
  Tensor x = Tensor::randn({2, 6, 8}, rng);
  x.set_requires_grad(true);
  Tensor probe = Tensor::randn({2, 6, 8}, rng);
  RopeConfig cfg{8, 10000.0, 0.25};
  auto loss_graph = [&] { return sum(mul(apply_rope(x, cfg), probe)); };
  auto loss_value = [&] { return loss_graph().item(); };
  auto rep = gradcheck::check({{"x", x}}, loss_value, loss_graph);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("affinity exports round trip", "[rope]") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "duet_rope_export_test";
  fs::create_directories(dir);

  SECTION("constant matrix renders flat pgm") {
    AffinityMatrix m;
    m.rows = 2;
    m.cols = 2;
    m.values = {3.5, 3.5, 3.5, 3.5};
    export_affinity(m, dir / "c.csv", dir / "c.pgm");
    const std::string pgm = read_file(dir / "c.pgm");
    const std::string header = "P5\n2 2\n255\n";
    REQUIRE(pgm.size() == header.size() + 4);
    for (int i = 0; i < 4; ++i) CHECK(pgm[header.size() + i] == pgm[header.size()]);
  }

  SECTION("csv re-parse equals source matrix") {
    RopeConfig ca{64, 10000.0, 31.0 / 157.0};
    RopeConfig cv{64, 10000.0, 1.0};
    AffinityMatrix m = affinity_matrix(157, 31, ca, cv);
    export_affinity_csv(m, dir / "m.csv");
    AffinityMatrix back = load_affinity_csv(dir / "m.csv");
    REQUIRE(back.rows == m.rows);
    REQUIRE(back.cols == m.cols);
    for (std::size_t i = 0; i < m.values.size(); ++i)
      REQUIRE(std::abs(back.values[i] - m.values[i]) < 1e-9);
  }

  SECTION("pgm per-row max traces the scaled diagonal") {
    RopeConfig ca{64, 10000.0, 31.0 / 157.0};
    RopeConfig cv{64, 10000.0, 1.0};
    AffinityMatrix m = affinity_matrix(157, 31, ca, cv);
    export_affinity_pgm(m, dir / "d.pgm");
    const std::string pgm = read_file(dir / "d.pgm");
    const std::string header = "P5\n31 157\n255\n";
    REQUIRE(pgm.substr(0, header.size()) == header);
    const auto* px =
        reinterpret_cast<const unsigned char*>(pgm.data() + header.size());
    for (int64_t i = 0; i < 157; ++i) {
      int64_t best = 0;
      for (int64_t j = 1; j < 31; ++j)
        if (px[i * 31 + j] > px[i * 31 + best]) best = j;
      const int64_t expect = clamped_round(i * 31.0 / 157.0, 30);
      // Quantization to 8 bits can tie adjacent pixels.
      REQUIRE(std::abs(best - expect) <= 1);
    }
  }

  fs::remove_all(dir);
}
