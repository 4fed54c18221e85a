#include "star/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "star/rng.hpp"

namespace star {

namespace {

using json = nlohmann::ordered_json;

constexpr char kFeatureMagic[] = "STARFEAT1";
constexpr std::size_t kMagicLen = 9;

double round3(double v) { return std::round(v * 1000.0) / 1000.0; }

json load_json(const std::filesystem::path& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(std::string(what) + " not found: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string(what) + " " + path.string() + ": " + e.what());
  }
  return j;
}

}  // namespace

std::pair<std::vector<int>, std::vector<Scalar>> derive_weak_labels(
    const std::vector<GtInstance>& instances) {
  std::map<int, Scalar> counts;
  for (const GtInstance& g : instances) counts[g.class_id] += 1.0;
  std::vector<int> labels;
  std::vector<Scalar> c;
  for (const auto& [cls, n] : counts) {
    labels.push_back(cls);
    c.push_back(n);
  }
  labels.push_back(kEndLabel);
  c.push_back(0.0);
  return {labels, c};
}

VideoAnnotation make_annotation(std::vector<GtInstance> instances) {
  VideoAnnotation a;
  a.instances = std::move(instances);
  std::tie(a.weak_labels, a.counts) = derive_weak_labels(a.instances);
  return a;
}

void SynthConfig::validate() const {
  auto positive = [](long long v, const char* field) {
    if (v <= 0) throw std::invalid_argument(std::string("synth config: ") + field +
                                            " must be positive");
  };
  positive(classes, "classes");
  positive(feature_dim, "feature_dim");
  positive(segments, "segments");
  positive(train_videos, "train_videos");
  positive(test_videos, "test_videos");
  positive(min_instances, "min_instances");
  positive(min_length, "min_length");
  if (max_instances < min_instances)
    throw std::invalid_argument("synth config: max_instances < min_instances");
  if (max_length < min_length)
    throw std::invalid_argument("synth config: max_length < min_length");
  if (max_length > segments)
    throw std::invalid_argument("synth config: max_length exceeds segments");
  if (prototype_separation < 0.0 || prototype_separation > 2.0)
    throw std::invalid_argument("synth config: prototype_separation must be in [0, 2]");
  if (noise_sigma < 0.0 || background_sigma < 0.0)
    throw std::invalid_argument("synth config: noise sigmas must be >= 0");
}

namespace {

std::vector<Vector> draw_prototypes(const SynthConfig& cfg, Rng& rng) {
  std::vector<Vector> protos;
  for (int c = 0; c < cfg.classes; ++c) {
    bool ok = false;
    for (int attempt = 0; attempt < 10000 && !ok; ++attempt) {
      Vector p(cfg.feature_dim);
      for (Index k = 0; k < p.size(); ++k) p[k] = rng.normal();
      const double norm = p.norm();
      if (norm == 0.0) continue;
      p /= norm;
      ok = true;
      for (const Vector& q : protos)
        if (1.0 - p.dot(q) < cfg.prototype_separation) {
          ok = false;
          break;
        }
      if (ok) protos.push_back(std::move(p));
    }
    if (!ok)
      throw std::runtime_error("synthesize_dataset: cannot separate " +
                               std::to_string(cfg.classes) + " prototypes by " +
                               std::to_string(cfg.prototype_separation) + " in " +
                               std::to_string(cfg.feature_dim) + " dimensions");
  }
  return protos;
}

struct InstanceSpan {
  int class_id;
  Index start, end;  // segments, inclusive
};

std::vector<InstanceSpan> place_instances(const SynthConfig& cfg, Rng& rng) {
  const Index n = cfg.segments;
  const int count = static_cast<int>(rng.uniform_int(cfg.min_instances, cfg.max_instances));
  std::vector<InstanceSpan> spans;
  auto disjoint = [&](Index s, Index e) {
    for (const InstanceSpan& sp : spans)
      if (!(e < sp.start || s > sp.end)) return false;
    return true;
  };
  for (int i = 0; i < count; ++i) {
    const int cls = static_cast<int>(rng.uniform_int(0, cfg.classes - 1));
    const Index len = static_cast<Index>(rng.uniform_int(cfg.min_length, cfg.max_length));
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const Index s = static_cast<Index>(rng.uniform_int(0, n - len));
      if (cfg.co_occurrence || disjoint(s, s + len - 1)) {
        spans.push_back({cls, s, s + len - 1});
        placed = true;
      }
    }
    if (!placed) {
      // deterministic first-fit fallback; skip only if the video is full
      for (Index s = 0; s + len <= n && !placed; ++s)
        if (disjoint(s, s + len - 1)) {
          spans.push_back({cls, s, s + len - 1});
          placed = true;
        }
    }
  }
  return spans;
}

Tensor render_stream(const SynthConfig& cfg, const std::vector<InstanceSpan>& spans,
                     const std::vector<Vector>& protos, Rng& rng) {
  const Index n = cfg.segments, k = cfg.feature_dim;
  Tensor features = Tensor::zeros({n, k});
  std::vector<int> covered(static_cast<std::size_t>(n), 0);
  for (const InstanceSpan& sp : spans)
    for (Index i = sp.start; i <= sp.end; ++i) {
      features.mat().row(i) += protos[static_cast<std::size_t>(sp.class_id)].transpose();
      covered[static_cast<std::size_t>(i)] += 1;
    }
  for (Index i = 0; i < n; ++i) {
    const double sigma = covered[static_cast<std::size_t>(i)] > 0 ? cfg.noise_sigma
                                                                  : cfg.background_sigma;
    for (Index j = 0; j < k; ++j) features.mat()(i, j) += sigma * rng.normal();
  }
  return features;
}

}  // namespace

Dataset synthesize_dataset(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(mix_seed(cfg.seed, 0xda7a));
  const std::vector<Vector> protos_rgb = draw_prototypes(cfg, rng);
  const std::vector<Vector> protos_flow = draw_prototypes(cfg, rng);
  const double segment_duration = 1.0;

  auto make_split = [&](const std::string& prefix, int count) {
    std::vector<VideoRecord> split;
    for (int v = 0; v < count; ++v) {
      VideoRecord rec;
      char idbuf[32];
      std::snprintf(idbuf, sizeof(idbuf), "%s_%04d", prefix.c_str(), v);
      rec.id = idbuf;
      rec.segment_duration = segment_duration;
      rec.duration = segment_duration * cfg.segments;
      const std::vector<InstanceSpan> spans = place_instances(cfg, rng);
      rec.rgb = render_stream(cfg, spans, protos_rgb, rng);
      rec.flow = render_stream(cfg, spans, protos_flow, rng);
      std::vector<GtInstance> instances;
      for (const InstanceSpan& sp : spans)
        instances.push_back({rec.id, sp.class_id, round3(sp.start * segment_duration),
                             round3((sp.end + 1) * segment_duration)});
      rec.annotation = make_annotation(std::move(instances));
      split.push_back(std::move(rec));
    }
    return split;
  };

  Dataset ds;
  ds.train = make_split("train", cfg.train_videos);
  ds.test = make_split("test", cfg.test_videos);
  return ds;
}

void save_feature_file(const std::filesystem::path& path, const Tensor& features) {
  if (features.rank() != 2)
    throw std::invalid_argument("save_feature_file: rank-2 tensor required");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open feature file for writing: " + path.string());
  out.write(kFeatureMagic, kMagicLen);
  const std::uint64_t n = static_cast<std::uint64_t>(features.shape()[0]);
  const std::uint64_t k = static_cast<std::uint64_t>(features.shape()[1]);
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(reinterpret_cast<const char*>(&k), sizeof(k));
  out.write(reinterpret_cast<const char*>(features.data()),
            static_cast<std::streamsize>(sizeof(Scalar) * features.size()));
  if (!out) throw std::runtime_error("feature write failed: " + path.string());
}

Tensor load_feature_file(const std::filesystem::path& path, const std::string& video_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw std::runtime_error("video " + video_id + ": feature file missing: " + path.string());
  auto truncated = [&](long long at) {
    return std::runtime_error("video " + video_id + ": feature file " + path.string() +
                              " truncated at byte offset " + std::to_string(at));
  };
  char magic[kMagicLen] = {};
  if (!in.read(magic, kMagicLen)) throw truncated(0);
  if (std::memcmp(magic, kFeatureMagic, kMagicLen) != 0)
    throw std::runtime_error("video " + video_id + ": bad feature magic in " + path.string());
  std::uint64_t n = 0, k = 0;
  long long at = static_cast<long long>(in.tellg());
  if (!in.read(reinterpret_cast<char*>(&n), sizeof(n))) throw truncated(at);
  at = static_cast<long long>(in.tellg());
  if (!in.read(reinterpret_cast<char*>(&k), sizeof(k))) throw truncated(at);
  if (n == 0 || k == 0 || n * k > (1ull << 30))
    throw std::runtime_error("video " + video_id + ": implausible feature shape " +
                             std::to_string(n) + "x" + std::to_string(k));
  Tensor t = Tensor::zeros({static_cast<Index>(n), static_cast<Index>(k)});
  at = static_cast<long long>(in.tellg());
  if (!in.read(reinterpret_cast<char*>(t.data()),
               static_cast<std::streamsize>(sizeof(Scalar) * t.size())))
    throw truncated(at);
  if (!t.all_finite())
    throw std::runtime_error("video " + video_id + ": NaN in features: " + path.string());
  return t;
}

std::string file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checksum: cannot open " + path.string());
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  char buf[8192];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      hash ^= static_cast<unsigned char>(buf[i]);
      hash *= 0x100000001b3ULL;
    }
    if (!in) break;
  }
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(hash));
  return hex;
}

std::filesystem::path save_features(const std::vector<VideoRecord>& records,
                                    const std::filesystem::path& directory) {
  namespace fs = std::filesystem;
  fs::create_directories(directory / "features");
  fs::create_directories(directory / "annotations");

  json manifest = json::array();
  for (const VideoRecord& rec : records) {
    const std::string rgb_rel = "features/" + rec.id + ".rgb.feat";
    const std::string flow_rel = "features/" + rec.id + ".flow.feat";
    const std::string ann_rel = "annotations/" + rec.id + ".json";
    save_feature_file(directory / rgb_rel, rec.rgb);
    save_feature_file(directory / flow_rel, rec.flow);

    json ann;
    ann["id"] = rec.id;
    json instances = json::array();
    for (const GtInstance& g : rec.annotation.instances) {
      json inst;
      inst["class"] = g.class_id;
      inst["start"] = round3(g.start);
      inst["end"] = round3(g.end);
      instances.push_back(inst);
    }
    ann["instances"] = instances;
    std::ofstream annf(directory / ann_rel, std::ios::trunc);
    if (!annf) throw std::runtime_error("cannot write annotation: " + (directory / ann_rel).string());
    annf << ann.dump(2) << "\n";

    json entry;
    entry["id"] = rec.id;
    entry["duration"] = rec.duration;
    entry["segment_duration"] = rec.segment_duration;
    entry["streams"] = {{"rgb", rgb_rel}, {"flow", flow_rel}};
    entry["annotation"] = ann_rel;
    entry["checksums"] = {{"rgb", file_checksum(directory / rgb_rel)},
                          {"flow", file_checksum(directory / flow_rel)}};
    manifest.push_back(entry);
  }

  const fs::path manifest_path = directory / "manifest.json";
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write manifest: " + manifest_path.string());
  out << manifest.dump(2) << "\n";
  if (!out) throw std::runtime_error("manifest write failed: " + manifest_path.string());
  return manifest_path;
}

std::vector<VideoRecord> load_features(const std::filesystem::path& manifest_path) {
  namespace fs = std::filesystem;
  const fs::path root = manifest_path.parent_path();
  json manifest = load_json(manifest_path, "manifest");
  if (!manifest.is_array()) throw std::runtime_error("manifest must be a JSON array");

  std::vector<VideoRecord> records;
  Index feature_dim = -1;
  for (const json& entry : manifest) {
    VideoRecord rec;
    try {
      rec.id = entry.at("id").get<std::string>();
      rec.duration = entry.at("duration").get<double>();
      rec.segment_duration = entry.at("segment_duration").get<double>();
      const std::string rgb_rel = entry.at("streams").at("rgb").get<std::string>();
      const std::string flow_rel = entry.at("streams").at("flow").get<std::string>();
      const std::string ann_rel = entry.at("annotation").get<std::string>();

      if (entry.contains("checksums")) {
        for (const char* stream : {"rgb", "flow"}) {
          const std::string expect = entry.at("checksums").at(stream).get<std::string>();
          const std::string got =
              file_checksum(root / (stream == std::string("rgb") ? rgb_rel : flow_rel));
          if (expect != got)
            throw std::runtime_error("video " + rec.id + ": " + stream +
                                     " checksum mismatch (manifest " + expect + ", file " + got +
                                     ")");
        }
      }

      rec.rgb = load_feature_file(root / rgb_rel, rec.id);
      rec.flow = load_feature_file(root / flow_rel, rec.id);

      json ann = load_json(root / ann_rel, "annotation");
      std::vector<GtInstance> instances;
      for (const json& inst : ann.at("instances")) {
        GtInstance g;
        g.video_id = rec.id;
        g.class_id = inst.at("class").get<int>();
        g.start = inst.at("start").get<double>();
        g.end = inst.at("end").get<double>();
        if (g.start >= g.end)
          throw std::runtime_error("video " + rec.id + ": degenerate instance [" +
                                   std::to_string(g.start) + ", " + std::to_string(g.end) + "]");
        instances.push_back(g);
      }
      rec.annotation = make_annotation(std::move(instances));
    } catch (const json::exception& e) {
      throw std::runtime_error("manifest entry for '" + rec.id + "': " + e.what());
    }

    if (!rec.rgb.same_shape(rec.flow))
      throw std::runtime_error("video " + rec.id + ": rgb/flow shape mismatch " +
                               shape_str(rec.rgb.shape()) + " vs " + shape_str(rec.flow.shape()));
    const double expect_n = rec.duration / rec.segment_duration;
    if (std::abs(expect_n - static_cast<double>(rec.segments())) > 0.5)
      throw std::runtime_error("video " + rec.id + ": manifest duration implies " +
                               std::to_string(expect_n) + " segments, features have " +
                               std::to_string(rec.segments()));
    if (feature_dim < 0) feature_dim = rec.feature_dim();
    if (rec.feature_dim() != feature_dim)
      throw std::runtime_error("video " + rec.id + ": feature dim " +
                               std::to_string(rec.feature_dim()) + " differs from dataset's " +
                               std::to_string(feature_dim));
    records.push_back(std::move(rec));
  }
  return records;
}

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("STAR_DATA_DIR")) return env;
  return "data";
}

}  // namespace star
