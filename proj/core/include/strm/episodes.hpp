#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "strm/enrichment.hpp"

namespace strm {

struct ClipRecord {
  std::string clip_id;
  std::uint32_t label = 0;
  FeatureClip features;
};

/// Why a clip file was rejected.
enum class ClipErrorKind { io, bad_magic, bad_version, truncated, extent_overflow };

class ClipFormatError : public std::runtime_error {
 public:
  ClipFormatError(ClipErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ClipErrorKind kind() const noexcept { return kind_; }

 private:
  ClipErrorKind kind_;
};

// Clip file: "STFB" | u32 version=1 | u32 label | u32 L | u32 P2 | u32 D, all
// little-endian, then L*P2*D little-endian float32 in (frame, patch, channel)
// order. Values are widened to double on load and narrowed on save.
inline constexpr char kClipMagic[4] = {'S', 'T', 'F', 'B'};
inline constexpr std::uint32_t kClipVersion = 1;
/// Largest accepted L*P2*D.
inline constexpr std::uint64_t kMaxClipValues = std::uint64_t{1} << 28;

/// The clip id of a loaded clip is the file stem.
ClipRecord load_clip(const std::filesystem::path& path);
void save_clip(const ClipRecord& record, const std::filesystem::path& path);

/// Immutable collection of clips with consistent extents, ordered by clip_id.
class Dataset {
 public:
  Dataset() = default;
  explicit Dataset(std::vector<ClipRecord> clips);

  const std::vector<ClipRecord>& clips() const noexcept { return clips_; }
  std::size_t size() const noexcept { return clips_.size(); }
  const ClipRecord& clip(std::size_t i) const { return clips_.at(i); }

  /// Sorted distinct labels.
  std::vector<std::uint32_t> labels() const;
  /// Indices of the clips carrying `label`, in clip_id order.
  const std::vector<std::size_t>& clips_of(std::uint32_t label) const;

  std::size_t frames() const noexcept { return frames_; }
  std::size_t patches() const noexcept { return patches_; }
  std::size_t channels() const noexcept { return channels_; }

 private:
  std::vector<ClipRecord> clips_;
  std::map<std::uint32_t, std::vector<std::size_t>> by_label_;
  std::size_t frames_ = 0, patches_ = 0, channels_ = 0;
};

inline constexpr const char* kManifestName = "manifest.tsv";

/// Reads `path<TAB>label` lines; relative paths resolve against the manifest's directory.
Dataset load_dataset(const std::filesystem::path& manifest);
/// Writes every clip as `<dir>/<clip_id>.stfb` plus `<dir>/manifest.tsv`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// Synthetic dataset in which every class is a permutation of one shared bank
/// of L frame prototypes. Classes therefore share their unordered frame
/// content and differ only in temporal order.
struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t clips_per_class = 20;
  std::size_t frames = 8;
  std::size_t patches = 4;
  std::size_t channels = 64;
  double motif_strength = 0.15;
  double noise_sigma = 0.3;
  std::uint64_t seed = 0;
  /// Label of the first generated class; the class permutation keys on the label,
  /// so disjoint label ranges with one seed give disjoint classes over one bank.
  std::uint32_t first_label = 0;
  /// Optional explicit frame orders, one per class, overriding the seeded ones.
  std::vector<std::vector<std::size_t>> orders;
};

void validate(const SyntheticSpec& spec);

/// Frame prototype bank [L x D] shared by all classes of a seed.
Tensor prototype_bank(const SyntheticSpec& spec);
/// Frame order of a class: order[t] is the bank row shown at frame t.
std::vector<std::size_t> class_order(const SyntheticSpec& spec, std::uint32_t label);
/// Noise-free frame sequence [L x D] of a class.
Tensor class_prototype_sequence(const SyntheticSpec& spec, std::uint32_t label);

std::vector<ClipRecord> generate_synthetic(const SyntheticSpec& spec);

struct EpisodeSpec {
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t queries_per_class = 1;
  std::uint64_t seed = 0;
};

/// One C-way K-shot task. Clip indices refer to the dataset it was drawn
/// from; targets are episode-local class positions in [0, ways).
struct Episode {
  std::vector<std::uint32_t> classes;
  std::vector<std::size_t> support;
  std::vector<std::size_t> support_targets;
  std::vector<std::size_t> queries;
  std::vector<std::size_t> query_targets;
};

/// Draws `ways` classes, then `shots` supports and `queries_per_class`
/// queries per class, all without replacement. Fully determined by
/// (spec.seed, counter).
Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::uint64_t counter);

/// Accuracy of the order-invariant baseline that mean-pools every clip over
/// frames and patches and picks the nearest class mean of the supports.
double mean_pool_oracle_accuracy(const Dataset& dataset, const EpisodeSpec& spec, std::size_t episodes);

}  // namespace strm
