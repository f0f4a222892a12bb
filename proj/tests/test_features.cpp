#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "taskweight/features.hpp"

using namespace taskweight;

namespace {

Clip tone_clip(double freq, double seconds, std::size_t rate, double amp = 0.8) {
  Clip c;
  c.sample_rate = rate;
  auto n = static_cast<std::size_t>(seconds * static_cast<double>(rate));
  c.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    c.samples[i] = amp * std::sin(2.0 * std::numbers::pi * freq * i / rate);
  return c;
}

}  // namespace

TEST_CASE("frame-count law") {
  FeatureConfig cfg;
  cfg.n_mels = 8;

  // the shape law at the paper defaults: a 10 s clip at 40 ms / 20 ms
  // framing gives floor((160000 - 640)/320) + 1 = 499 frames
  Clip ten_s = tone_clip(440.0, 10.0, 16000);
  FeatureMatrix fm = log_mel_energy(ten_s, cfg);
  REQUIRE(fm.d_mels() == 8);
  REQUIRE(fm.n_frames() == 499);

  // the paper's 500-frame count arises when the frame equals the hop
  FeatureConfig short_frames = cfg;
  short_frames.frame_length = 0.020;
  REQUIRE(log_mel_energy(ten_s, short_frames).n_frames() == 500);

  // property over random sizes
  SplitMix64 rng(3);
  for (int iter = 0; iter < 30; ++iter) {
    std::size_t rate = 8000;
    double secs = rng.next_range(0.1, 1.5);
    Clip c = tone_clip(300.0, secs, rate);
    FeatureConfig f;
    f.n_mels = 4;
    f.frame_length = 0.032;
    f.hop = rng.next_range(0.008, 0.032);
    std::size_t frame = f.frame_samples(rate), hop = f.hop_samples(rate);
    if (c.samples.size() < frame) continue;
    std::size_t expect = (c.samples.size() - frame) / hop + 1;
    REQUIRE(log_mel_energy(c, f).n_frames() == expect);
  }

  Clip too_short = tone_clip(300.0, 0.01, 16000);
  REQUIRE_THROWS_AS(log_mel_energy(too_short, cfg), ValidationError);
}

TEST_CASE("silence hits the log floor") {
  Clip c;
  c.sample_rate = 16000;
  c.samples.assign(16000, 0.0);
  FeatureConfig cfg;
  cfg.n_mels = 16;
  FeatureMatrix fm = log_mel_energy(c, cfg);
  for (double v : fm.values.data)
    REQUIRE(v == Catch::Approx(std::log(cfg.floor_epsilon)).margin(1e-12));
}

TEST_CASE("pure tone concentrates in the matching mel filter") {
  const std::size_t rate = 16000, fft = 1024, n_mels = 64;
  Clip c = tone_clip(1000.0, 2.0, rate);
  FeatureConfig cfg;
  cfg.n_mels = n_mels;
  cfg.fft_size = fft;
  FeatureMatrix fm = log_mel_energy(c, cfg);

  // independent filter center frequencies from the mel-spacing formula
  double mel_max = 2595.0 * std::log10(1.0 + (rate / 2.0) / 700.0);
  std::vector<double> centers(n_mels);
  for (std::size_t m = 0; m < n_mels; ++m) {
    double mel = mel_max * static_cast<double>(m + 1) / static_cast<double>(n_mels + 1);
    centers[m] = 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
  }
  std::size_t nearest = 0;
  for (std::size_t m = 1; m < n_mels; ++m)
    if (std::abs(centers[m] - 1000.0) < std::abs(centers[nearest] - 1000.0)) nearest = m;

  for (std::size_t l = 0; l < fm.n_frames(); ++l) {
    std::size_t argmax = 0;
    for (std::size_t m = 1; m < n_mels; ++m)
      if (fm.values.at(m, l) > fm.values.at(argmax, l)) argmax = m;
    REQUIRE(argmax == nearest);
  }
}

TEST_CASE("mel filterbank construction") {
  Tensor fb = mel_filterbank(64, 1024, 16000);
  REQUIRE(fb.shape == std::vector<std::size_t>{64, 513});
  for (std::size_t m = 0; m < 64; ++m) {
    double row_sum = 0.0;
    for (std::size_t k = 0; k < 513; ++k) {
      REQUIRE(fb.at(m, k) >= 0.0);
      row_sum += fb.at(m, k);
    }
    REQUIRE(row_sum > 0.0);
  }

  // peak frequencies strictly increasing, first center inside (0, 200) Hz
  double mel_max = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  double prev = 0.0;
  for (std::size_t m = 0; m < 64; ++m) {
    double mel = mel_max * static_cast<double>(m + 1) / 65.0;
    double hz = 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
    REQUIRE(hz > prev);
    prev = hz;
    if (m == 0) {
      REQUIRE(hz > 0.0);
      REQUIRE(hz < 200.0);
    }
  }

  // too many filters for the FFT resolution must fail
  REQUIRE_THROWS_AS(mel_filterbank(64, 64, 16000), ValidationError);
}

TEST_CASE("amplitude scaling never decreases log-mel energies") {
  SplitMix64 rng(11);
  Clip c;
  c.sample_rate = 8000;
  c.samples.resize(4000);
  for (double& v : c.samples) v = 0.4 * (2.0 * rng.next_double() - 1.0);
  Clip louder = c;
  for (double& v : louder.samples) v *= 2.0;
  FeatureConfig cfg;
  cfg.n_mels = 12;
  FeatureMatrix a = log_mel_energy(c, cfg);
  FeatureMatrix b = log_mel_energy(louder, cfg);
  for (std::size_t i = 0; i < a.values.size(); ++i)
    REQUIRE(b.values.data[i] >= a.values.data[i] - 1e-12);
}

TEST_CASE("frame targets follow the frame-center rule") {
  // no events -> all-zero roll
  EventRoll empty = frame_targets({}, 0.02, 10, 3);
  for (double v : empty.values.data) REQUIRE(v == 0.0);

  // event (0.03, 0.07) at 20 ms hop covers centers 0.03 and 0.05: l in {1,2}
  EventRoll r = frame_targets({EventAnnotation{0.03, 0.07, 0}}, 0.02, 10, 1);
  for (std::size_t l = 0; l < 10; ++l)
    REQUIRE(r.values.at(l, 0) == ((l == 1 || l == 2) ? 1.0 : 0.0));

  // overlapping events of different classes are both active
  EventRoll two = frame_targets(
      {EventAnnotation{0.0, 0.1, 0}, EventAnnotation{0.05, 0.15, 1}}, 0.02, 8, 2);
  REQUIRE(two.values.at(3, 0) == 1.0);  // center 0.07
  REQUIRE(two.values.at(3, 1) == 1.0);

  // duplicated annotations yield the same roll (idempotence)
  EventRoll dup = frame_targets(
      {EventAnnotation{0.03, 0.07, 0}, EventAnnotation{0.03, 0.07, 0}}, 0.02, 10, 1);
  REQUIRE(dup.values.data == r.values.data);

  REQUIRE_THROWS_AS(frame_targets({EventAnnotation{0.0, 0.1, 5}}, 0.02, 10, 3),
                    ValidationError);
}

TEST_CASE("feature cache round-trips exactly") {
  namespace fs = std::filesystem;
  fs::create_directories("tw_test_tmp");
  SplitMix64 rng(21);
  std::vector<ClipFeatures> clips;
  for (int i = 0; i < 3; ++i) {
    ClipFeatures c;
    c.features = Tensor({4, 7});
    for (double& v : c.features.data) v = rng.next_range(-5.0, 5.0);
    c.roll = Tensor({7, 3});
    for (double& v : c.roll.data) v = rng.next_below(2) ? 1.0 : 0.0;
    c.scene = rng.next_below(2);
    clips.push_back(std::move(c));
  }
  std::string path = "tw_test_tmp/cache_test.twfc";
  write_feature_cache(path, clips);
  auto back = read_feature_cache(path);
  REQUIRE(back.size() == clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) {
    REQUIRE(back[i].features.shape == clips[i].features.shape);
    REQUIRE(back[i].features.data == clips[i].features.data);  // bit-exact
    REQUIRE(back[i].roll.data == clips[i].roll.data);
    REQUIRE(back[i].scene == clips[i].scene);
  }
}
