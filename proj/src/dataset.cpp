#include "lipsync/dataset.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"

namespace lipsync::data {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "tensor blobs are stored little-endian; big-endian hosts need byte swapping");

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw std::runtime_error("cannot open " + path.string());
  }
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out << j.dump(2) << "\n";
}

fs::path frame_path(const fs::path& clip_dir, int64_t s) {
  char name[32];
  std::snprintf(name, sizeof(name), "%06lld.png", static_cast<long long>(s));
  return clip_dir / "frames" / name;
}

}  // namespace

torch::Tensor Clip::frame(int64_t s) const { return visual::to_unit_range(frames[s]); }

torch::Tensor Clip::frame_range(int64_t begin, int64_t end) const {
  return visual::to_unit_range(frames.slice(0, begin, end));
}

std::vector<size_t> Corpus::held_out() const {
  auto out = val;
  out.insert(out.end(), test.begin(), test.end());
  return out;
}

void write_frames(const fs::path& clip_dir, const torch::Tensor& frames) {
  fs::create_directories(clip_dir / "frames");
  for (int64_t s = 0; s < frames.size(0); ++s) {
    const auto f = frames[s];
    visual::write_png(frame_path(clip_dir, s), f.scalar_type() == torch::kUInt8 ? visual::to_unit_range(f) : f);
  }
}

torch::Tensor read_frames(const fs::path& clip_dir) {
  std::vector<torch::Tensor> out;
  for (int64_t s = 0;; ++s) {
    const auto p = frame_path(clip_dir, s);
    if (!fs::exists(p)) {
      break;
    }
    out.push_back(visual::to_bytes(visual::read_png(p)));
  }
  if (out.empty()) {
    throw std::runtime_error("no frames found under " + (clip_dir / "frames").string());
  }
  return torch::stack(out);
}

void write_meta(const fs::path& clip_dir, const ClipMeta& meta) {
  json j;
  j["fps"] = meta.fps;
  j["sample_rate"] = meta.sample_rate;
  j["seed"] = meta.seed;
  j["frames"] = meta.frames;
  j["image_size"] = meta.image_size;
  j["crop_boxes"] = json::array();
  for (const auto& b : meta.crop_boxes) {
    j["crop_boxes"].push_back({b.x, b.y, b.width, b.height});
  }
  if (!meta.aperture.empty()) {
    j["aperture"] = meta.aperture;
  }
  if (!meta.landmarks.empty()) {
    j["landmarks"] = json::array();
    for (const auto& lm : meta.landmarks) {
      json pts = json::array();
      for (const auto& p : lm) {
        pts.push_back({p.x, p.y});
      }
      j["landmarks"].push_back(pts);
    }
  }
  fs::create_directories(clip_dir);
  write_json(clip_dir / "meta.json", j);
}

ClipMeta read_meta(const fs::path& clip_dir) {
  const auto j = read_json(clip_dir / "meta.json");
  ClipMeta m;
  m.fps = j.value("fps", 25);
  m.sample_rate = j.value("sample_rate", audio::kSampleRate);
  m.seed = j.value("seed", uint64_t{0});
  m.frames = j.value("frames", 0);
  m.image_size = j.value("image_size", 0);
  for (const auto& b : j.value("crop_boxes", json::array())) {
    m.crop_boxes.push_back(visual::Box{b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(),
                                       b.at(3).get<int>()});
  }
  m.aperture = j.value("aperture", std::vector<double>{});
  for (const auto& pts : j.value("landmarks", json::array())) {
    toyset::MouthLandmarks lm{};
    for (size_t k = 0; k < lm.size(); ++k) {
      lm[k] = toyset::Point{pts.at(k).at(0).get<double>(), pts.at(k).at(1).get<double>()};
    }
    m.landmarks.push_back(lm);
  }
  return m;
}

void write_toy_clip(const fs::path& clip_dir, const toyset::ToyClip& clip,
                    const toyset::ToyConfig& cfg) {
  write_frames(clip_dir, clip.frames);
  audio::write_wav(clip_dir / "audio.wav", clip.wave);
  write_tensor_blob(clip_dir / "mel.f32", audio::log_mel(clip.wave));
  ClipMeta meta;
  meta.fps = cfg.fps;
  meta.sample_rate = clip.wave.sample_rate;
  meta.seed = clip.seed;
  meta.frames = static_cast<int>(clip.frames.size(0));
  meta.image_size = cfg.image_size;
  meta.crop_boxes.assign(static_cast<size_t>(meta.frames), clip.box);
  meta.aperture = clip.aperture;
  meta.landmarks = clip.landmarks;
  write_meta(clip_dir, meta);
}

Clip load_clip(const fs::path& clip_dir, const audio::MelRange& range) {
  Clip c;
  c.id = clip_dir.filename().string();
  c.meta = read_meta(clip_dir);
  c.frames = read_frames(clip_dir);
  c.wave = audio::resample(audio::read_wav(clip_dir / "audio.wav"));
  const auto blob = clip_dir / "mel.f32";
  const auto raw = fs::exists(blob) ? read_tensor_blob(blob) : audio::log_mel(c.wave);
  const auto mel = audio::normalize(raw, range);
  c.windows = audio::frame_windows(mel, static_cast<int>(c.size()), c.meta.fps);
  return c;
}

void write_manifest(const fs::path& corpus_dir, const toyset::CorpusManifest& m) {
  json j;
  j["seed"] = m.seed;
  j["frames_per_clip"] = m.frames_per_clip;
  j["image_size"] = m.config.image_size;
  j["fps"] = m.config.fps;
  j["mel_range"] = {{"lo", m.mel_range.lo}, {"hi", m.mel_range.hi}};
  j["clips"] = json::array();
  for (const auto& c : m.clips) {
    j["clips"].push_back({{"id", c.id}, {"seed", c.seed}, {"frames", c.frames}});
  }
  j["splits"] = {{"train", m.train}, {"val", m.val}, {"test", m.test}};
  write_json(corpus_dir / "corpus.json", j);
}

toyset::CorpusManifest read_manifest(const fs::path& corpus_dir) {
  const auto j = read_json(corpus_dir / "corpus.json");
  toyset::CorpusManifest m;
  m.seed = j.value("seed", uint64_t{0});
  m.frames_per_clip = j.value("frames_per_clip", 0);
  m.config.image_size = j.value("image_size", m.config.image_size);
  m.config.fps = j.value("fps", m.config.fps);
  m.mel_range.lo = j.at("mel_range").at("lo").get<double>();
  m.mel_range.hi = j.at("mel_range").at("hi").get<double>();
  for (const auto& c : j.at("clips")) {
    m.clips.push_back(toyset::CorpusEntry{c.at("id").get<std::string>(), c.at("seed").get<uint64_t>(),
                                          c.at("frames").get<int>()});
  }
  m.train = j.at("splits").at("train").get<std::vector<std::string>>();
  m.val = j.at("splits").at("val").get<std::vector<std::string>>();
  m.test = j.at("splits").at("test").get<std::vector<std::string>>();
  return m;
}

Corpus load_corpus(const fs::path& corpus_dir) {
  Corpus corpus;
  corpus.manifest = read_manifest(corpus_dir);
  std::map<std::string, size_t> index;
  for (const auto& entry : corpus.manifest.clips) {
    index[entry.id] = corpus.clips.size();
    corpus.clips.push_back(load_clip(corpus_dir / entry.id, corpus.manifest.mel_range));
  }
  auto resolve = [&](const std::vector<std::string>& ids, std::vector<size_t>& out) {
    for (const auto& id : ids) {
      const auto it = index.find(id);
      if (it == index.end()) {
        throw std::runtime_error("corpus.json split references unknown clip " + id);
      }
      out.push_back(it->second);
    }
  };
  resolve(corpus.manifest.train, corpus.train);
  resolve(corpus.manifest.val, corpus.val);
  resolve(corpus.manifest.test, corpus.test);
  return corpus;
}

void write_tensor_blob(const fs::path& path, const torch::Tensor& t) {
  auto c = t.detach().to(torch::kFloat32).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write " + path.string());
  }
  out.write(reinterpret_cast<const char*>(c.data_ptr<float>()),
            static_cast<std::streamsize>(c.numel() * sizeof(float)));
  json j;
  j["shape"] = c.sizes().vec();
  j["dtype"] = "float32";
  write_json(fs::path(path.string() + ".json"), j);
}

torch::Tensor read_tensor_blob(const fs::path& path) {
  const auto j = read_json(fs::path(path.string() + ".json"));
  const auto shape = j.at("shape").get<std::vector<int64_t>>();
  auto t = torch::empty(shape, torch::kFloat32);
  const auto bytes = static_cast<std::uintmax_t>(t.numel()) * sizeof(float);
  if (fs::file_size(path) != bytes) {
    throw std::runtime_error("tensor blob " + path.string() + " has wrong size");
  }
  std::ifstream in(path, std::ios::binary);
  in.read(reinterpret_cast<char*>(t.data_ptr<float>()), static_cast<std::streamsize>(bytes));
  if (!in) {
    throw std::runtime_error("short read from " + path.string());
  }
  return t;
}

}  // namespace lipsync::data
