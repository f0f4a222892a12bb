// Log mel-band energy extraction and frame-level target rasterization.
//
// Feature cache file (.twfc), little-endian:
//   "TWFC" | u32 version=1 | u64 n_clips | clip records
//   clip := u32 D | u32 L | u32 scene | u32 M
//           f64[D*L]  features, row-major (D rows, L columns)
//           u8[ceil(L*M/8)] event roll, bits packed row-major over (l,m),
//                           least-significant bit first within each byte
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "taskweight/common.hpp"
#include "taskweight/dataset.hpp"
#include "taskweight/dsp.hpp"
#include "taskweight/tensor.hpp"

namespace taskweight {

struct FeatureConfig {
  double frame_length = 0.040;  // seconds
  double hop = 0.020;           // seconds
  std::size_t n_mels = 64;
  std::size_t fft_size = 0;  // 0 = smallest power of two >= frame samples
  double floor_epsilon = 1e-10;

  void validate() const {
    if (!(frame_length > 0.0)) throw ValidationError("FeatureConfig.frame_length: must be > 0");
    if (!(hop > 0.0)) throw ValidationError("FeatureConfig.hop: must be > 0");
    if (hop > frame_length)
      throw ValidationError("FeatureConfig.hop: must not exceed frame_length");
    if (n_mels < 1) throw ValidationError("FeatureConfig.n_mels: must be >= 1");
    if (fft_size != 0 && !is_power_of_two(fft_size))
      throw ValidationError("FeatureConfig.fft_size: must be a power of two");
    if (!(floor_epsilon > 0.0))
      throw ValidationError("FeatureConfig.floor_epsilon: must be > 0");
  }

  std::size_t frame_samples(std::size_t sample_rate) const {
    return static_cast<std::size_t>(
        std::llround(frame_length * static_cast<double>(sample_rate)));
  }
  std::size_t hop_samples(std::size_t sample_rate) const {
    auto h = static_cast<std::size_t>(std::llround(hop * static_cast<double>(sample_rate)));
    return std::max<std::size_t>(h, 1);
  }
  std::size_t resolved_fft_size(std::size_t sample_rate) const {
    std::size_t need = frame_samples(sample_rate);
    if (fft_size != 0) {
      if (fft_size < need)
        throw ValidationError("FeatureConfig.fft_size: smaller than the frame length");
      return fft_size;
    }
    std::size_t n = 1;
    while (n < need) n <<= 1;
    return n;
  }
};

// D x L matrix of log mel-band energies.
struct FeatureMatrix {
  Tensor values;  // shape (D, L)
  std::size_t d_mels() const { return values.shape[0]; }
  std::size_t n_frames() const { return values.shape[1]; }
};

// L x M binary activity matrix. Model posteriors reuse the same layout with
// real values in (0,1).
struct EventRoll {
  Tensor values;  // shape (L, M)
  std::size_t n_frames() const { return values.shape[0]; }
  std::size_t n_events() const { return values.shape[1]; }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// Triangular filters with peaks equally spaced on the mel scale between
// 0 Hz and Nyquist. Returns an (n_mels, fft_size/2 + 1) matrix.
inline Tensor mel_filterbank(std::size_t n_mels, std::size_t fft_size,
                             std::size_t sample_rate) {
  if (n_mels < 1) throw ValidationError("mel_filterbank: n_mels must be >= 1");
  if (!is_power_of_two(fft_size))
    throw ValidationError("mel_filterbank: fft_size must be a power of two");
  std::size_t n_bins = fft_size / 2 + 1;
  double nyquist = static_cast<double>(sample_rate) / 2.0;
  double mel_max = hz_to_mel(nyquist);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = mel_to_hz(mel_max * static_cast<double>(i) / static_cast<double>(n_mels + 1));

  Tensor fb({n_mels, n_bins});
  double bin_hz = static_cast<double>(sample_rate) / static_cast<double>(fft_size);
  for (std::size_t m = 0; m < n_mels; ++m) {
    double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    double row_sum = 0.0;
    for (std::size_t k = 0; k < n_bins; ++k) {
      double f = bin_hz * static_cast<double>(k);
      double w = 0.0;
      if (f > lo && f < hi)
        w = f <= center ? (f - lo) / (center - lo) : (hi - f) / (hi - center);
      fb.at(m, k) = w;
      row_sum += w;
    }
    if (row_sum <= 0.0)
      throw ValidationError("mel_filterbank: filter " + std::to_string(m) +
                            " has no FFT bins; n_mels too large for fft_size " +
                            std::to_string(fft_size));
  }
  return fb;
}

// Hann-windowed power spectra projected through the mel filterbank, then
// log(energy + floor_epsilon). Frames follow L = floor((S-F)/H) + 1.
inline FeatureMatrix log_mel_energy(const Clip& clip, const FeatureConfig& config) {
  config.validate();
  if (clip.sample_rate < 1) throw ValidationError("log_mel_energy: clip has no sample rate");
  std::size_t frame = config.frame_samples(clip.sample_rate);
  std::size_t hop = config.hop_samples(clip.sample_rate);
  if (clip.samples.size() < frame)
    throw ValidationError("log_mel_energy: clip shorter than one frame");
  std::size_t fft_size = config.resolved_fft_size(clip.sample_rate);
  std::size_t n_frames = (clip.samples.size() - frame) / hop + 1;
  std::size_t n_bins = fft_size / 2 + 1;

  Tensor fb = mel_filterbank(config.n_mels, fft_size, clip.sample_rate);
  std::vector<double> window = hann_window(frame);
  std::vector<double> re(fft_size), im(fft_size), power(n_bins);

  FeatureMatrix out;
  out.values = Tensor({config.n_mels, n_frames});
  for (std::size_t l = 0; l < n_frames; ++l) {
    std::size_t start = l * hop;
    std::fill(re.begin(), re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    for (std::size_t i = 0; i < frame; ++i) re[i] = clip.samples[start + i] * window[i];
    fft_radix2(re, im);
    for (std::size_t k = 0; k < n_bins; ++k) power[k] = re[k] * re[k] + im[k] * im[k];
    for (std::size_t m = 0; m < config.n_mels; ++m) {
      double e = 0.0;
      const double* row = fb.data.data() + m * n_bins;
      for (std::size_t k = 0; k < n_bins; ++k) e += row[k] * power[k];
      out.values.at(m, l) = std::log(e + config.floor_epsilon);
    }
  }
  if (!out.values.all_finite()) throw NumericError("log_mel_energy: non-finite feature value");
  return out;
}

// z[l][m] = 1 iff the frame center (l + 0.5) * hop lies inside [onset,
// offset) of an annotation of class m. Overlapping classes are independent.
inline EventRoll frame_targets(const std::vector<EventAnnotation>& events, double hop,
                               std::size_t n_frames, std::size_t n_events) {
  if (!(hop > 0.0)) throw ValidationError("frame_targets: hop must be > 0");
  if (n_events < 1) throw ValidationError("frame_targets: n_events must be >= 1");
  EventRoll roll;
  roll.values = Tensor({n_frames, n_events});
  for (const EventAnnotation& ev : events) {
    if (ev.event_class >= n_events)
      throw ValidationError("frame_targets: event class " + std::to_string(ev.event_class) +
                            " out of range for M=" + std::to_string(n_events));
    for (std::size_t l = 0; l < n_frames; ++l) {
      double center = (static_cast<double>(l) + 0.5) * hop;
      if (center >= ev.onset && center < ev.offset) roll.values.at(l, ev.event_class) = 1.0;
    }
  }
  return roll;
}

// One clip, featurized: everything training and evaluation need.
struct ClipFeatures {
  Tensor features;  // (D, L)
  Tensor roll;      // (L, M) binary
  std::size_t scene = 0;
};

// Per-mel-bin standardization statistics (computed on the development set).
struct FeatureStats {
  Tensor mean;   // (D)
  Tensor stdev;  // (D)
};

inline std::vector<ClipFeatures> compute_features(const Corpus& corpus,
                                                  const FeatureConfig& config) {
  std::vector<ClipFeatures> out;
  out.reserve(corpus.clips.size());
  for (const Clip& clip : corpus.clips) {
    ClipFeatures cf;
    FeatureMatrix fm = log_mel_energy(clip, config);
    std::size_t L = fm.n_frames();
    cf.roll = frame_targets(clip.events, config.hop, L, corpus.event_labels.size()).values;
    cf.features = std::move(fm.values);
    cf.scene = clip.scene_class;
    out.push_back(std::move(cf));
  }
  return out;
}

namespace detail {
template <typename T>
void write_pod(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T read_pod(std::ifstream& f, const std::string& path) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!f) throw ParseError("feature cache: truncated file " + path);
  return v;
}
}  // namespace detail

inline void write_feature_cache(const std::string& path,
                                const std::vector<ClipFeatures>& clips) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("feature cache: cannot open " + path + " for writing");
  f.write("TWFC", 4);
  detail::write_pod<std::uint32_t>(f, 1);
  detail::write_pod<std::uint64_t>(f, clips.size());
  for (const ClipFeatures& c : clips) {
    auto d = static_cast<std::uint32_t>(c.features.shape[0]);
    auto l = static_cast<std::uint32_t>(c.features.shape[1]);
    auto m = static_cast<std::uint32_t>(c.roll.shape[1]);
    detail::write_pod(f, d);
    detail::write_pod(f, l);
    detail::write_pod(f, static_cast<std::uint32_t>(c.scene));
    detail::write_pod(f, m);
    f.write(reinterpret_cast<const char*>(c.features.data.data()),
            static_cast<std::streamsize>(sizeof(double) * c.features.size()));
    std::size_t n_bits = static_cast<std::size_t>(l) * m;
    std::vector<std::uint8_t> packed((n_bits + 7) / 8, 0);
    for (std::size_t i = 0; i < n_bits; ++i)
      if (c.roll.data[i] != 0.0) packed[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
    f.write(reinterpret_cast<const char*>(packed.data()),
            static_cast<std::streamsize>(packed.size()));
  }
  if (!f) throw IoError("feature cache: write failed for " + path);
}

inline std::vector<ClipFeatures> read_feature_cache(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("feature cache: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "TWFC")
    throw ParseError("feature cache: bad magic in " + path);
  auto version = detail::read_pod<std::uint32_t>(f, path);
  if (version != 1) throw ParseError("feature cache: unsupported version in " + path);
  auto n_clips = detail::read_pod<std::uint64_t>(f, path);
  std::vector<ClipFeatures> clips;
  clips.reserve(n_clips);
  for (std::uint64_t i = 0; i < n_clips; ++i) {
    auto d = detail::read_pod<std::uint32_t>(f, path);
    auto l = detail::read_pod<std::uint32_t>(f, path);
    auto scene = detail::read_pod<std::uint32_t>(f, path);
    auto m = detail::read_pod<std::uint32_t>(f, path);
    ClipFeatures c;
    c.scene = scene;
    c.features = Tensor({d, l});
    f.read(reinterpret_cast<char*>(c.features.data.data()),
           static_cast<std::streamsize>(sizeof(double) * c.features.size()));
    std::size_t n_bits = static_cast<std::size_t>(l) * m;
    std::vector<std::uint8_t> packed((n_bits + 7) / 8);
    f.read(reinterpret_cast<char*>(packed.data()),
           static_cast<std::streamsize>(packed.size()));
    if (!f) throw ParseError("feature cache: truncated file " + path);
    c.roll = Tensor({l, m});
    for (std::size_t b = 0; b < n_bits; ++b)
      c.roll.data[b] = (packed[b / 8] >> (b % 8)) & 1u ? 1.0 : 0.0;
    clips.push_back(std::move(c));
  }
  return clips;
}

}  // namespace taskweight
