#include "strm/episodes.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <cstdio>
#include <sstream>

#include "strm/random.hpp"

namespace strm {

namespace fs = std::filesystem;

namespace {

constexpr std::size_t kHeaderBytes = 24;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ClipFormatError(ClipErrorKind::io, "cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace

ClipRecord load_clip(const fs::path& path) {
  const auto bytes = read_file(path);
  const std::string where = path.string() + ": ";
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kClipMagic, 4) != 0) {
    if (bytes.size() < 4) throw ClipFormatError(ClipErrorKind::truncated, where + "file shorter than magic");
    throw ClipFormatError(ClipErrorKind::bad_magic, where + "bad magic, expected \"STFB\"");
  }
  if (bytes.size() < kHeaderBytes) throw ClipFormatError(ClipErrorKind::truncated, where + "truncated header");
  const std::uint32_t version = get_u32(bytes.data() + 4);
  if (version != kClipVersion)
    throw ClipFormatError(ClipErrorKind::bad_version, where + "unsupported version " + std::to_string(version));
  const std::uint32_t label = get_u32(bytes.data() + 8);
  const std::uint64_t frames = get_u32(bytes.data() + 12);
  const std::uint64_t patches = get_u32(bytes.data() + 16);
  const std::uint64_t channels = get_u32(bytes.data() + 20);
  if (frames == 0 || patches == 0 || channels == 0)
    throw ClipFormatError(ClipErrorKind::extent_overflow, where + "zero extent in header");
  // Each factor is < 2^32, so check the running product against the cap stepwise.
  if (frames * patches > kMaxClipValues || frames * patches * channels > kMaxClipValues)
    throw ClipFormatError(ClipErrorKind::extent_overflow, where + "declared extents exceed the value limit");
  const std::uint64_t count = frames * patches * channels;
  const std::uint64_t expected = kHeaderBytes + 4 * count;
  if (bytes.size() < expected)
    throw ClipFormatError(ClipErrorKind::truncated, where + "payload holds " + std::to_string((bytes.size() - kHeaderBytes) / 4) +
                                                        " of " + std::to_string(count) + " values");
  if (bytes.size() > expected)
    throw ClipFormatError(ClipErrorKind::truncated, where + "unexpected trailing bytes after payload");

  std::vector<double> values(count);
  const unsigned char* p = bytes.data() + kHeaderBytes;
  for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<float>(get_u32(p + 4 * i));
  ClipRecord rec;
  rec.clip_id = path.stem().string();
  rec.label = label;
  rec.features = FeatureClip(frames, patches, channels, Tensor({frames, patches, channels}, std::move(values)));
  return rec;
}

void save_clip(const ClipRecord& record, const fs::path& path) {
  const auto& f = record.features;
  std::vector<unsigned char> bytes;
  bytes.reserve(kHeaderBytes + 4 * f.values.size());
  bytes.insert(bytes.end(), kClipMagic, kClipMagic + 4);
  put_u32(bytes, kClipVersion);
  put_u32(bytes, record.label);
  put_u32(bytes, static_cast<std::uint32_t>(f.frames));
  put_u32(bytes, static_cast<std::uint32_t>(f.patches));
  put_u32(bytes, static_cast<std::uint32_t>(f.channels));
  for (double v : f.values.data()) put_u32(bytes, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ClipFormatError(ClipErrorKind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ClipFormatError(ClipErrorKind::io, "write failed for " + path.string());
}

Dataset::Dataset(std::vector<ClipRecord> clips) : clips_(std::move(clips)) {
  std::sort(clips_.begin(), clips_.end(), [](const auto& a, const auto& b) { return a.clip_id < b.clip_id; });
  for (std::size_t i = 0; i < clips_.size(); ++i) {
    const auto& c = clips_[i];
    if (i > 0 && clips_[i - 1].clip_id == c.clip_id) throw std::invalid_argument("duplicate clip id " + c.clip_id);
    if (i == 0) {
      frames_ = c.features.frames;
      patches_ = c.features.patches;
      channels_ = c.features.channels;
    } else if (c.features.frames != frames_ || c.features.patches != patches_ || c.features.channels != channels_) {
      throw ShapeError("clip " + c.clip_id + " has extents " +
                       shape_string({c.features.frames, c.features.patches, c.features.channels}) +
                       ", dataset has " + shape_string({frames_, patches_, channels_}));
    }
    by_label_[c.label].push_back(i);
  }
}

std::vector<std::uint32_t> Dataset::labels() const {
  std::vector<std::uint32_t> out;
  for (const auto& [label, idx] : by_label_) out.push_back(label);
  return out;
}

const std::vector<std::size_t>& Dataset::clips_of(std::uint32_t label) const {
  auto it = by_label_.find(label);
  if (it == by_label_.end()) throw std::out_of_range("no clips with label " + std::to_string(label));
  return it->second;
}

Dataset load_dataset(const fs::path& manifest) {
  std::ifstream in(manifest);
  if (!in) throw ClipFormatError(ClipErrorKind::io, "cannot open manifest " + manifest.string());
  const fs::path base = manifest.parent_path();
  std::vector<ClipRecord> clips;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::invalid_argument(manifest.string() + ":" + std::to_string(line_no) + ": expected path<TAB>label");
    fs::path clip_path = line.substr(0, tab);
    if (clip_path.is_relative()) clip_path = base / clip_path;
    const auto label = static_cast<std::uint32_t>(std::stoul(line.substr(tab + 1)));
    ClipRecord rec = load_clip(clip_path);
    if (rec.label != label)
      throw std::invalid_argument(manifest.string() + ":" + std::to_string(line_no) + ": manifest label " +
                                  std::to_string(label) + " disagrees with clip header label " +
                                  std::to_string(rec.label));
    clips.push_back(std::move(rec));
  }
  return Dataset(std::move(clips));
}

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ClipFormatError(ClipErrorKind::io, "cannot create " + dir.string() + ": " + ec.message());
  std::ostringstream manifest;
  for (const auto& clip : dataset.clips()) {
    const std::string name = clip.clip_id + ".stfb";
    save_clip(clip, dir / name);
    manifest << name << '\t' << clip.label << '\n';
  }
  std::ofstream out(dir / kManifestName, std::ios::trunc);
  if (!out) throw ClipFormatError(ClipErrorKind::io, "cannot write manifest in " + dir.string());
  out << manifest.str();
}

void validate(const SyntheticSpec& spec) {
  if (spec.num_classes == 0 || spec.clips_per_class == 0 || spec.frames == 0 || spec.patches == 0 ||
      spec.channels == 0)
    throw std::invalid_argument("synthetic extents must be positive");
  if (spec.frames < 2) throw std::invalid_argument("synthetic clips need at least 2 frames");
  if (!(spec.motif_strength > 0.0)) throw std::invalid_argument("motif_strength must be positive");
  if (!(spec.noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be non-negative");
  if (!spec.orders.empty()) {
    if (spec.orders.size() != spec.num_classes)
      throw std::invalid_argument("explicit orders must list one permutation per class");
    for (const auto& order : spec.orders) {
      std::vector<std::size_t> sorted = order;
      std::sort(sorted.begin(), sorted.end());
      std::vector<std::size_t> ident(spec.frames);
      std::iota(ident.begin(), ident.end(), 0);
      if (sorted != ident) throw std::invalid_argument("explicit order is not a permutation of the frames");
    }
  }
}

Tensor prototype_bank(const SyntheticSpec& spec) {
  Tensor bank({spec.frames, spec.channels});
  Rng rng(mix_seed(spec.seed, 0xba4c));
  for (auto& v : bank.data()) v = spec.motif_strength * rng.normal();
  return bank;
}

std::vector<std::size_t> class_order(const SyntheticSpec& spec, std::uint32_t label) {
  if (!spec.orders.empty()) {
    if (label < spec.first_label || label - spec.first_label >= spec.orders.size())
      throw std::out_of_range("label " + std::to_string(label) + " outside the generated classes");
    return spec.orders[label - spec.first_label];
  }
  std::vector<std::size_t> order(spec.frames);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(mix_seed(spec.seed, 0x0dde), label));
  rng.shuffle(std::span<std::size_t>(order));
  return order;
}

Tensor class_prototype_sequence(const SyntheticSpec& spec, std::uint32_t label) {
  const Tensor bank = prototype_bank(spec);
  const auto order = class_order(spec, label);
  Tensor seq({spec.frames, spec.channels});
  for (std::size_t t = 0; t < spec.frames; ++t)
    for (std::size_t d = 0; d < spec.channels; ++d) seq.at(t, d) = bank.at(order[t], d);
  return seq;
}

std::vector<ClipRecord> generate_synthetic(const SyntheticSpec& spec) {
  validate(spec);
  std::vector<ClipRecord> out;
  out.reserve(spec.num_classes * spec.clips_per_class);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const auto label = static_cast<std::uint32_t>(spec.first_label + c);
    const Tensor seq = class_prototype_sequence(spec, label);
    for (std::size_t j = 0; j < spec.clips_per_class; ++j) {
      FeatureClip clip(spec.frames, spec.patches, spec.channels);
      Rng rng(mix_seed(mix_seed(spec.seed, label), j));
      double* v = clip.values.raw();
      for (std::size_t t = 0; t < spec.frames; ++t)
        for (std::size_t p = 0; p < spec.patches; ++p)
          for (std::size_t d = 0; d < spec.channels; ++d) {
            const double noise = spec.noise_sigma > 0.0 ? spec.noise_sigma * rng.normal() : 0.0;
            *v++ = seq.at(t, d) + noise;
          }
      char id[32];
      std::snprintf(id, sizeof id, "c%04u_%04zu", label, j);
      out.push_back(ClipRecord{id, label, std::move(clip)});
    }
  }
  return out;
}

Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::uint64_t counter) {
  if (spec.ways < 2) throw std::invalid_argument("an episode needs at least 2 classes");
  if (spec.shots < 1) throw std::invalid_argument("an episode needs at least 1 shot");
  auto labels = dataset.labels();
  if (labels.size() < spec.ways)
    throw std::invalid_argument("dataset has " + std::to_string(labels.size()) + " classes, episode needs " +
                                std::to_string(spec.ways));
  Rng rng(mix_seed(spec.seed, counter));
  rng.shuffle(std::span<std::uint32_t>(labels));
  labels.resize(spec.ways);

  Episode ep;
  ep.classes = labels;
  const std::size_t need = spec.shots + spec.queries_per_class;
  for (std::size_t c = 0; c < labels.size(); ++c) {
    std::vector<std::size_t> pool = dataset.clips_of(labels[c]);
    if (pool.size() < need)
      throw std::invalid_argument("class " + std::to_string(labels[c]) + " has " + std::to_string(pool.size()) +
                                  " clips, episode needs " + std::to_string(need));
    rng.shuffle(std::span<std::size_t>(pool));
    for (std::size_t i = 0; i < spec.shots; ++i) {
      ep.support.push_back(pool[i]);
      ep.support_targets.push_back(c);
    }
    for (std::size_t i = spec.shots; i < need; ++i) {
      ep.queries.push_back(pool[i]);
      ep.query_targets.push_back(c);
    }
  }
  return ep;
}

double mean_pool_oracle_accuracy(const Dataset& dataset, const EpisodeSpec& spec, std::size_t episodes) {
  const std::size_t d = dataset.channels();
  auto pooled = [&](std::size_t idx) {
    const auto& v = dataset.clip(idx).features.values;
    std::vector<double> m(d, 0.0);
    const std::size_t rows = v.size() / d;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < d; ++j) m[j] += v[r * d + j];
    for (auto& x : m) x /= static_cast<double>(rows);
    return m;
  };
  std::size_t correct = 0, total = 0;
  for (std::size_t e = 0; e < episodes; ++e) {
    const Episode ep = sample_episode(dataset, spec, e);
    std::vector<std::vector<double>> means(spec.ways, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < ep.support.size(); ++i) {
      const auto m = pooled(ep.support[i]);
      for (std::size_t j = 0; j < d; ++j) means[ep.support_targets[i]][j] += m[j] / static_cast<double>(spec.shots);
    }
    for (std::size_t i = 0; i < ep.queries.size(); ++i) {
      const auto q = pooled(ep.queries[i]);
      std::size_t best = 0;
      double best_dist = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < spec.ways; ++c) {
        double dist = 0.0;
        for (std::size_t j = 0; j < d; ++j) dist += (q[j] - means[c][j]) * (q[j] - means[c][j]);
        if (dist < best_dist) {
          best_dist = dist;
          best = c;
        }
      }
      correct += best == ep.query_targets[i];
      ++total;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace strm
