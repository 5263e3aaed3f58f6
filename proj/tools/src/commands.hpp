#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace strm::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kIo = 3, kNumeric = 4 };

/// Raised for unreadable or unwritable paths.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SynthOptions {
  std::string out;
  std::size_t classes = 10;
  std::size_t clips = 20;
  std::size_t frames = 8;
  std::size_t patches = 4;
  std::size_t dim = 64;
  double motif = 0.15;
  double sigma = 0.3;
  std::uint64_t seed = 0;
  std::uint32_t first_label = 0;
};

struct ModelOptions {
  std::size_t psi_width = 32;
  std::size_t trm_width = 32;
  std::size_t qc_width = 32;
  std::vector<std::size_t> omega{2};
  double lambda = 0.1;
  bool ple = true;
  bool fle = true;
  bool qc = true;
  double keep_ratio = 1.0;
};

struct EpisodeOptions {
  std::size_t ways = 5;
  std::size_t shots = 5;
  std::size_t queries = 1;
};

struct TrainOptions {
  std::string data;
  std::string eval_data;
  std::string out;
  ModelOptions model;
  EpisodeOptions episode;
  std::size_t episodes = 2000;
  double lr = 0.05;
  std::size_t accumulate = 16;
  std::size_t eval_every = 500;
  std::size_t eval_episodes = 200;
  double momentum = 0.0;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct EvalOptions {
  std::string data;
  std::string checkpoint;
  std::string out;
  EpisodeOptions episode;
  std::size_t episodes = 1000;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

struct GradcheckOptions {
  std::string out;
  std::size_t frames = 4;
  std::size_t patches = 4;
  std::size_t dim = 8;
  ModelOptions model{8, 12, 6, {2}, 0.1, true, true, true, 1.0};
  std::size_t ways = 2;
  std::size_t shots = 1;
  double step = 1e-5;
  double tolerance = 1e-5;
  double abs_floor = 1e-9;
  std::vector<std::string> corrupt;
  std::uint64_t seed = 0;
};

struct TuplesOptions {
  std::string out;
  std::size_t frames = 8;
  /// Each entry is one cardinality set, e.g. "2,3".
  std::vector<std::string> omega{"2", "3", "4", "2,3", "2,4", "3,4", "2,3,4"};
};

struct AblateOptions {
  TrainOptions train;
  std::size_t final_episodes = 1000;
};

struct AttnExportOptions {
  std::string checkpoint;
  std::string clip;
  std::string out;
};

/// Applies the STRM_SEED environment override to `seed`, if set.
void apply_seed_override(std::uint64_t& seed);

/// Parses "2,3,4" into cardinalities.
std::vector<std::size_t> parse_cardinalities(const std::string& text);

// Each command writes its run manifest (`run.json` in its output directory)
// before computing anything, then its outputs. Human-readable results go to `out`.
int run_synth(const SynthOptions& o, std::ostream& out);
int run_train(const TrainOptions& o, std::ostream& out);
int run_eval(const EvalOptions& o, std::ostream& out);
int run_gradcheck(const GradcheckOptions& o, std::ostream& out);
int run_tuples(const TuplesOptions& o, std::ostream& out);
int run_ablate(const AblateOptions& o, std::ostream& out);
int run_attn_export(const AttnExportOptions& o, std::ostream& out);

/// Re-runs the command recorded in a run manifest, optionally redirecting its output directory.
int run_replay(const std::filesystem::path& manifest, const std::optional<std::string>& out_override,
               std::ostream& out);

inline constexpr const char* kRunManifestName = "run.json";

}  // namespace strm::cli
