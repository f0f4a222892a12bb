// Synthetic corpus generation, TUT-style annotation ingest, and corpus
// splitting.
//
// On-disk corpus layout (written by save_corpus, read by load_corpus):
//   meta.txt            lines  audio_path<TAB>scene_label
//   audio/*.wav         mono 16-bit PCM
//   annotations/*.ann   lines  onset<TAB>offset<TAB>event_label  (seconds)
//   scenes.txt          optional fixed scene vocabulary, one label per line
//   events.txt          optional fixed event vocabulary, one label per line
// The annotation file for audio/x.wav is annotations/x.ann.
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "taskweight/common.hpp"
#include "taskweight/dsp.hpp"
#include "taskweight/wav.hpp"

namespace taskweight {

struct EventAnnotation {
  double onset = 0.0;   // seconds
  double offset = 0.0;  // seconds, > onset
  std::size_t event_class = 0;
};

struct Clip {
  std::vector<double> samples;  // mono, amplitudes in [-1, 1]
  std::size_t sample_rate = 0;
  std::size_t scene_class = 0;
  std::vector<EventAnnotation> events;

  double duration() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
  }
};

struct CorpusSpec {
  std::size_t n_scenes = 0;
  std::size_t n_events = 0;
  std::vector<std::vector<double>> co_occurrence;  // N rows of M inclusion probabilities
  std::size_t clips_per_scene = 0;
  double clip_duration = 0.0;  // seconds
  std::size_t sample_rate = 16000;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_scenes < 2) throw ValidationError("CorpusSpec.n_scenes: must be >= 2");
    if (n_events < 1) throw ValidationError("CorpusSpec.n_events: must be >= 1");
    if (clips_per_scene < 1) throw ValidationError("CorpusSpec.clips_per_scene: must be >= 1");
    if (!(clip_duration > 0.0) || !std::isfinite(clip_duration))
      throw ValidationError("CorpusSpec.clip_duration: must be a positive number of seconds");
    if (sample_rate < 1) throw ValidationError("CorpusSpec.sample_rate: must be >= 1 Hz");
    if (co_occurrence.size() != n_scenes)
      throw ValidationError("CorpusSpec.co_occurrence: expected " + std::to_string(n_scenes) +
                            " rows");
    for (std::size_t s = 0; s < n_scenes; ++s) {
      if (co_occurrence[s].size() != n_events)
        throw ValidationError("CorpusSpec.co_occurrence: row " + std::to_string(s) +
                              " expected " + std::to_string(n_events) + " entries");
      for (std::size_t m = 0; m < n_events; ++m) {
        double p = co_occurrence[s][m];
        if (!(p >= 0.0 && p <= 1.0))
          throw ValidationError("CorpusSpec.co_occurrence[" + std::to_string(s) + "][" +
                                std::to_string(m) + "]: probability " + std::to_string(p) +
                                " outside [0,1]");
      }
    }
  }
};

struct Corpus {
  std::vector<Clip> clips;
  std::vector<std::string> scene_labels;
  std::vector<std::string> event_labels;
};

namespace detail {

// Event class m renders as a tone at 200 + 120*m Hz (even m) or a
// band-limited noise burst around that frequency (odd m), amplitude 0.3.
inline void render_event(std::vector<double>& samples, std::size_t sample_rate,
                         const EventAnnotation& ev, std::uint64_t noise_seed) {
  const double amp = 0.3;
  double freq = 200.0 + 120.0 * static_cast<double>(ev.event_class);
  freq = std::min(freq, 0.45 * static_cast<double>(sample_rate));
  auto n0 = static_cast<std::size_t>(ev.onset * static_cast<double>(sample_rate));
  auto n1 = static_cast<std::size_t>(ev.offset * static_cast<double>(sample_rate));
  n1 = std::min(n1, samples.size());
  if (n1 <= n0) return;
  if (ev.event_class % 2 == 0) {
    double w = 2.0 * std::numbers::pi * freq / static_cast<double>(sample_rate);
    for (std::size_t n = n0; n < n1; ++n)
      samples[n] += amp * std::sin(w * static_cast<double>(n));
  } else {
    SplitMix64 rng(noise_seed);
    BiquadBandpass bp(freq, static_cast<double>(sample_rate), 8.0);
    std::vector<double> burst(n1 - n0);
    double peak = 0.0;
    for (double& v : burst) {
      v = bp.process(2.0 * rng.next_double() - 1.0);
      peak = std::max(peak, std::abs(v));
    }
    if (peak > 0.0)
      for (std::size_t i = 0; i < burst.size(); ++i) samples[n0 + i] += amp * burst[i] / peak;
  }
}

inline Clip synthesize_clip(const CorpusSpec& spec, std::size_t scene, std::uint64_t clip_seed) {
  Clip clip;
  clip.sample_rate = spec.sample_rate;
  clip.scene_class = scene;
  auto n_samples = static_cast<std::size_t>(
      std::llround(spec.clip_duration * static_cast<double>(spec.sample_rate)));
  clip.samples.assign(n_samples, 0.0);

  // Scene-colored background: white noise through a one-pole lowpass whose
  // coefficient depends on the scene, renormalized to peak 0.05.
  SplitMix64 bg_rng(mix_seed(clip_seed, 0xB6));
  for (double& v : clip.samples) v = 2.0 * bg_rng.next_double() - 1.0;
  double a = 0.15 + 0.75 * static_cast<double>(scene) / static_cast<double>(spec.n_scenes - 1);
  one_pole_lowpass(clip.samples, a);
  double peak = 0.0;
  for (double v : clip.samples) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (double& v : clip.samples) v *= 0.05 / peak;

  // Each co-occurrence cell is an independent inclusion probability. All
  // draws happen unconditionally so the stream does not depend on outcomes.
  SplitMix64 ev_rng(mix_seed(clip_seed, 0xE7));
  const double dur = spec.clip_duration;
  for (std::size_t m = 0; m < spec.n_events; ++m) {
    double u = ev_rng.next_double();
    double onset = ev_rng.next_range(0.0, dur);
    double length = ev_rng.next_range(0.2, std::max(0.2, dur / 2.0));
    if (u < spec.co_occurrence[scene][m]) {
      double offset = std::min(onset + length, dur);
      if (offset > onset) {
        EventAnnotation ev{onset, offset, m};
        clip.events.push_back(ev);
        render_event(clip.samples, spec.sample_rate, ev, mix_seed(clip_seed, 0x100 + m));
      }
    }
  }
  for (double& v : clip.samples) v = std::clamp(v, -1.0, 1.0);
  return clip;
}

inline std::string trim_cr(std::string s) {
  if (!s.empty() && s.back() == '\r') s.pop_back();
  return s;
}

inline double parse_seconds(const std::string& token, const std::string& file, std::size_t line) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc{} || ptr != token.data() + token.size())
    throw ParseError(file + ":" + std::to_string(line) + ": non-numeric time value '" + token +
                     "'");
  return v;
}

inline std::vector<std::string> read_label_file(const std::filesystem::path& path) {
  std::vector<std::string> labels;
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open label file " + path.string());
  std::string line;
  while (std::getline(f, line)) {
    line = trim_cr(line);
    if (!line.empty()) labels.push_back(line);
  }
  return labels;
}

}  // namespace detail

// Deterministic corpus synthesis; every clip draws from its own seeded
// stream, so parallel generation equals sequential generation.
inline std::vector<Clip> synthesize_corpus(const CorpusSpec& spec) {
  spec.validate();
  std::vector<Clip> clips;
  clips.reserve(spec.n_scenes * spec.clips_per_scene);
  for (std::size_t s = 0; s < spec.n_scenes; ++s)
    for (std::size_t c = 0; c < spec.clips_per_scene; ++c) {
      std::uint64_t clip_seed = mix_seed(spec.seed, s * spec.clips_per_scene + c + 1);
      clips.push_back(detail::synthesize_clip(spec, s, clip_seed));
    }
  return clips;
}

inline Corpus make_corpus(const CorpusSpec& spec) {
  Corpus corpus;
  corpus.clips = synthesize_corpus(spec);
  for (std::size_t s = 0; s < spec.n_scenes; ++s)
    corpus.scene_labels.push_back("scene" + std::to_string(s));
  for (std::size_t m = 0; m < spec.n_events; ++m)
    corpus.event_labels.push_back("event" + std::to_string(m));
  return corpus;
}

// Parses a TUT-style corpus: meta file mapping audio paths to scene labels
// plus per-clip tab-separated annotation files. Unknown labels extend the
// vocabulary in first-seen order unless a fixed vocabulary is supplied.
inline Corpus load_tut_annotations(const std::filesystem::path& meta_file,
                                   const std::filesystem::path& annotation_dir,
                                   std::optional<std::vector<std::string>> fixed_scenes = {},
                                   std::optional<std::vector<std::string>> fixed_events = {}) {
  Corpus corpus;
  bool scenes_fixed = fixed_scenes.has_value();
  bool events_fixed = fixed_events.has_value();
  if (scenes_fixed) corpus.scene_labels = *fixed_scenes;
  if (events_fixed) corpus.event_labels = *fixed_events;

  std::ifstream meta(meta_file);
  if (!meta) throw ParseError("cannot open meta file " + meta_file.string());
  const std::filesystem::path root = meta_file.parent_path();
  const std::string meta_name = meta_file.string();

  auto label_index = [](std::vector<std::string>& vocab, const std::string& label, bool fixed,
                        const std::string& file, std::size_t line) -> std::size_t {
    auto it = std::find(vocab.begin(), vocab.end(), label);
    if (it != vocab.end()) return static_cast<std::size_t>(it - vocab.begin());
    if (fixed)
      throw ParseError(file + ":" + std::to_string(line) + ": label '" + label +
                       "' not in the fixed vocabulary");
    vocab.push_back(label);
    return vocab.size() - 1;
  };

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(meta, line)) {
    ++line_no;
    line = detail::trim_cr(line);
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw ParseError(meta_name + ":" + std::to_string(line_no) +
                       ": expected audio_path<TAB>scene_label");
    std::string audio_rel = line.substr(0, tab);
    std::string scene_label = line.substr(tab + 1);
    if (audio_rel.empty() || scene_label.empty())
      throw ParseError(meta_name + ":" + std::to_string(line_no) +
                       ": expected audio_path<TAB>scene_label");

    std::filesystem::path audio_path = root / audio_rel;
    if (!std::filesystem::exists(audio_path))
      throw ParseError(meta_name + ":" + std::to_string(line_no) + ": missing audio file " +
                       audio_path.string());

    Clip clip;
    WavData wav = read_wav(audio_path.string());
    clip.samples = std::move(wav.samples);
    clip.sample_rate = wav.sample_rate;
    clip.scene_class =
        label_index(corpus.scene_labels, scene_label, scenes_fixed, meta_name, line_no);

    std::filesystem::path ann_path =
        annotation_dir / (std::filesystem::path(audio_rel).stem().string() + ".ann");
    if (!std::filesystem::exists(ann_path))
      throw ParseError(meta_name + ":" + std::to_string(line_no) +
                       ": missing annotation file " + ann_path.string());

    std::ifstream ann(ann_path);
    if (!ann) throw ParseError("cannot open annotation file " + ann_path.string());
    const std::string ann_name = ann_path.string();
    std::string ann_line;
    std::size_t ann_no = 0;
    const double dur = clip.duration();
    while (std::getline(ann, ann_line)) {
      ++ann_no;
      ann_line = detail::trim_cr(ann_line);
      if (ann_line.empty()) continue;
      auto t1 = ann_line.find('\t');
      auto t2 = t1 == std::string::npos ? std::string::npos : ann_line.find('\t', t1 + 1);
      if (t1 == std::string::npos || t2 == std::string::npos)
        throw ParseError(ann_name + ":" + std::to_string(ann_no) +
                         ": expected onset<TAB>offset<TAB>event_label");
      double onset = detail::parse_seconds(ann_line.substr(0, t1), ann_name, ann_no);
      double offset = detail::parse_seconds(ann_line.substr(t1 + 1, t2 - t1 - 1), ann_name, ann_no);
      std::string ev_label = ann_line.substr(t2 + 1);
      if (ev_label.empty())
        throw ParseError(ann_name + ":" + std::to_string(ann_no) + ": empty event label");
      if (onset < 0.0)
        throw ParseError(ann_name + ":" + std::to_string(ann_no) + ": negative onset");
      if (onset >= offset)
        throw ParseError(ann_name + ":" + std::to_string(ann_no) + ": onset >= offset");
      // Keep the type invariant offset <= clip duration; annotations that
      // start beyond the audio are dropped.
      offset = std::min(offset, dur);
      if (onset >= offset) continue;
      std::size_t cls =
          label_index(corpus.event_labels, ev_label, events_fixed, ann_name, ann_no);
      clip.events.push_back(EventAnnotation{onset, offset, cls});
    }
    corpus.clips.push_back(std::move(clip));
  }
  return corpus;
}

// Stratified deterministic split: largest-remainder apportionment over
// scenes hits round(fraction * total) exactly while keeping every scene's
// proportion within one clip.
inline std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(
    const std::vector<std::size_t>& scene_of_clip, std::size_t n_scenes, double dev_fraction,
    std::uint64_t seed) {
  if (!(dev_fraction > 0.0 && dev_fraction < 1.0))
    throw ValidationError("split_corpus: dev_fraction must lie in (0,1)");
  std::vector<std::vector<std::size_t>> by_scene(n_scenes);
  for (std::size_t i = 0; i < scene_of_clip.size(); ++i) {
    if (scene_of_clip[i] >= n_scenes)
      throw ValidationError("split_corpus: scene index out of range");
    by_scene[scene_of_clip[i]].push_back(i);
  }
  for (std::size_t s = 0; s < n_scenes; ++s)
    if (by_scene[s].size() < 2)
      throw ValidationError("split_corpus: scene " + std::to_string(s) +
                            " has fewer than 2 clips");

  std::size_t total = scene_of_clip.size();
  auto target_total =
      static_cast<std::size_t>(std::llround(dev_fraction * static_cast<double>(total)));
  std::vector<std::size_t> quota(n_scenes);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t s = 0; s < n_scenes; ++s) {
    double exact = dev_fraction * static_cast<double>(by_scene[s].size());
    quota[s] = static_cast<std::size_t>(std::floor(exact));
    assigned += quota[s];
    remainders.emplace_back(exact - std::floor(exact), s);
  }
  std::sort(remainders.begin(), remainders.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  for (std::size_t i = 0; assigned < target_total && i < remainders.size(); ++i) {
    std::size_t s = remainders[i].second;
    if (quota[s] < by_scene[s].size()) {
      ++quota[s];
      ++assigned;
    }
  }

  std::vector<std::size_t> dev, eval;
  for (std::size_t s = 0; s < n_scenes; ++s) {
    auto& idx = by_scene[s];
    SplitMix64 rng(mix_seed(seed, 0x517 + s));
    for (std::size_t i = idx.size(); i > 1; --i)
      std::swap(idx[i - 1], idx[rng.next_below(i)]);
    for (std::size_t i = 0; i < idx.size(); ++i)
      (i < quota[s] ? dev : eval).push_back(idx[i]);
  }
  std::sort(dev.begin(), dev.end());
  std::sort(eval.begin(), eval.end());
  return {dev, eval};
}

inline std::pair<std::vector<Clip>, std::vector<Clip>> split_corpus(
    const std::vector<Clip>& clips, double dev_fraction, std::uint64_t seed) {
  std::size_t n_scenes = 0;
  std::vector<std::size_t> scene_of_clip;
  scene_of_clip.reserve(clips.size());
  for (const Clip& c : clips) {
    scene_of_clip.push_back(c.scene_class);
    n_scenes = std::max(n_scenes, c.scene_class + 1);
  }
  auto [dev_idx, eval_idx] = split_indices(scene_of_clip, n_scenes, dev_fraction, seed);
  std::pair<std::vector<Clip>, std::vector<Clip>> out;
  for (std::size_t i : dev_idx) out.first.push_back(clips[i]);
  for (std::size_t i : eval_idx) out.second.push_back(clips[i]);
  return out;
}

// Writes the on-disk corpus layout described at the top of this header.
inline void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir / "audio", ec);
  fs::create_directories(dir / "annotations", ec);
  if (!fs::exists(dir / "audio") || !fs::exists(dir / "annotations"))
    throw IoError("save_corpus: cannot create directories under " + dir.string());

  std::ostringstream meta;
  for (std::size_t i = 0; i < corpus.clips.size(); ++i) {
    const Clip& clip = corpus.clips[i];
    char stem[32];
    std::snprintf(stem, sizeof(stem), "clip%05zu", i);
    std::string wav_rel = std::string("audio/") + stem + ".wav";
    write_wav((dir / wav_rel).string(), clip.samples,
              static_cast<std::uint32_t>(clip.sample_rate));
    std::ostringstream ann;
    for (const EventAnnotation& ev : clip.events) {
      char buf[96];
      std::snprintf(buf, sizeof(buf), "%.6f\t%.6f\t", ev.onset, ev.offset);
      ann << buf << corpus.event_labels.at(ev.event_class) << "\n";
    }
    std::ofstream annf(dir / "annotations" / (std::string(stem) + ".ann"));
    if (!annf) throw IoError("save_corpus: cannot write annotation for " + std::string(stem));
    annf << ann.str();
    meta << wav_rel << '\t' << corpus.scene_labels.at(clip.scene_class) << '\n';
  }
  std::ofstream metaf(dir / "meta.txt");
  if (!metaf) throw IoError("save_corpus: cannot write meta.txt");
  metaf << meta.str();

  std::ofstream sf(dir / "scenes.txt");
  for (const auto& s : corpus.scene_labels) sf << s << '\n';
  std::ofstream ef(dir / "events.txt");
  for (const auto& e : corpus.event_labels) ef << e << '\n';
}

// Loads a corpus directory; scenes.txt/events.txt, when present, pin the
// vocabularies.
inline Corpus load_corpus(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::optional<std::vector<std::string>> scenes, events;
  if (fs::exists(dir / "scenes.txt")) scenes = detail::read_label_file(dir / "scenes.txt");
  if (fs::exists(dir / "events.txt")) events = detail::read_label_file(dir / "events.txt");
  return load_tut_annotations(dir / "meta.txt", dir / "annotations", std::move(scenes),
                              std::move(events));
}

}  // namespace taskweight
