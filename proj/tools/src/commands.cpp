#include "commands.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "strm/gradcheck.hpp"
#include "strm/matching.hpp"
#include "strm/model.hpp"
#include "strm/random.hpp"
#include "strm/training.hpp"

namespace strm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthOptions, out, classes, clips, frames, patches, dim, motif, sigma,
                                                seed, first_label)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelOptions, psi_width, trm_width, qc_width, omega, lambda, ple, fle,
                                                qc, keep_ratio)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EpisodeOptions, ways, shots, queries)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainOptions, data, eval_data, out, model, episode, episodes, lr,
                                                accumulate, eval_every, eval_episodes, momentum, weight_decay, seed,
                                                threads)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalOptions, data, checkpoint, out, episode, episodes, seed, threads)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GradcheckOptions, out, frames, patches, dim, model, ways, shots, step,
                                                tolerance, abs_floor, corrupt, seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TuplesOptions, out, frames, omega)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AblateOptions, train, final_episodes)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AttnExportOptions, checkpoint, clip, out)

namespace {

constexpr const char* kToolVersion = "strm 0.1.0";
constexpr const char* kCheckpointFile = "checkpoint.stck";
constexpr const char* kMetricsFile = "metrics.tsv";

/// Seed stream for evaluation episodes, distinct from the training stream.
constexpr std::uint64_t kFinalEvalStream = 0xf1a1;

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

std::string timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_run_manifest(const fs::path& dir, const std::string& command, const json& config, const json& seeds,
                        const std::vector<std::string>& outputs) {
  ensure_dir(dir);
  json m;
  m["tool"] = kToolVersion;
  m["command"] = command;
  m["config"] = config;
  m["seeds"] = seeds;
  m["timestamp"] = timestamp();
  m["outputs"] = outputs;
  write_text(dir / kRunManifestName, m.dump(2) + "\n");
}

Dataset open_dataset(const std::string& where) {
  if (where.empty()) throw std::invalid_argument("a dataset path is required");
  fs::path p = where;
  if (fs::is_directory(p)) p /= kManifestName;
  if (!fs::exists(p)) throw IoError("dataset manifest not found: " + p.string());
  return load_dataset(p);
}

ModelConfig model_config(const ModelOptions& m, const Dataset& data, std::uint64_t seed) {
  ModelConfig c;
  c.frames = data.frames();
  c.patches = data.patches();
  c.channels = data.channels();
  c.psi_width = m.psi_width;
  c.trm_width = m.trm_width;
  c.qc_width = m.qc_width;
  c.cardinalities = m.omega;
  c.lambda = m.lambda;
  c.use_ple = m.ple;
  c.use_fle = m.fle;
  c.use_qc = m.qc;
  c.tuple_keep_ratio = m.keep_ratio;
  c.seed = seed;
  c.validate();
  return c;
}

TrainConfig train_config(const TrainOptions& o) {
  TrainConfig t;
  t.episodes = o.episodes;
  t.learning_rate = o.lr;
  t.accumulate_every = o.accumulate;
  t.eval_every = o.eval_every;
  t.eval_episodes = o.eval_episodes;
  t.momentum = o.momentum;
  t.weight_decay = o.weight_decay;
  t.episode = EpisodeSpec{o.episode.ways, o.episode.shots, o.episode.queries, o.seed};
  t.threads = o.threads;
  t.validate();
  return t;
}

std::string metrics_text(const std::vector<MetricsRow>& rows) {
  std::string s;
  for (const auto& r : rows) s += format_metrics_row(r) + "\n";
  return s;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

}  // namespace

void apply_seed_override(std::uint64_t& seed) {
  const char* env = std::getenv("STRM_SEED");
  if (!env || !*env) return;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env, &end, 10);
  if (*end != '\0') throw std::invalid_argument(std::string("STRM_SEED is not an unsigned integer: ") + env);
  seed = v;
}

std::vector<std::size_t> parse_cardinalities(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw std::invalid_argument("bad cardinality list '" + text + "'");
    out.push_back(v);
  }
  if (out.empty()) throw std::invalid_argument("empty cardinality list");
  return out;
}

int run_synth(const SynthOptions& o, std::ostream& out) {
  if (o.out.empty()) throw std::invalid_argument("synth needs --out");
  SyntheticSpec spec;
  spec.num_classes = o.classes;
  spec.clips_per_class = o.clips;
  spec.frames = o.frames;
  spec.patches = o.patches;
  spec.channels = o.dim;
  spec.motif_strength = o.motif;
  spec.noise_sigma = o.sigma;
  spec.seed = o.seed;
  spec.first_label = o.first_label;
  validate(spec);
  write_run_manifest(o.out, "synth", o, {{"seed", o.seed}}, {kManifestName});
  const Dataset data(generate_synthetic(spec));
  save_dataset(data, o.out);
  out << "wrote " << data.size() << " clips (" << o.classes << " classes, labels " << o.first_label << ".."
      << o.first_label + o.classes - 1 << ") to " << o.out << "\n";
  return kOk;
}

int run_train(const TrainOptions& o, std::ostream& out) {
  if (o.out.empty()) throw std::invalid_argument("train needs --out");
  const Dataset train_set = open_dataset(o.data);
  std::optional<Dataset> eval_set;
  if (!o.eval_data.empty()) eval_set = open_dataset(o.eval_data);
  const ModelConfig model = model_config(o.model, train_set, o.seed);
  const TrainConfig train_cfg = train_config(o);
  write_run_manifest(o.out, "train", o, {{"seed", o.seed}}, {kCheckpointFile, kMetricsFile});

  TrainResult result = train(train_set, eval_set ? &*eval_set : nullptr, model, train_cfg);
  save_checkpoint(checkpoint_params(result.params, model), fs::path(o.out) / kCheckpointFile);
  const std::string metrics = metrics_text(result.metrics);
  write_text(fs::path(o.out) / kMetricsFile, metrics);
  out << "episode\taccuracy\tci95\tloss_tm\tloss_qc\n" << metrics;
  const MetricsRow& last = result.metrics.back();
  out << "accuracy " << fixed(last.accuracy) << " +- " << fixed(last.ci95) << " after " << last.episode
      << " episodes\n";
  return kOk;
}

int run_eval(const EvalOptions& o, std::ostream& out) {
  const Dataset data = open_dataset(o.data);
  if (!fs::exists(o.checkpoint)) throw IoError("checkpoint not found: " + o.checkpoint);
  const auto stored = read_checkpoint(o.checkpoint);

  ModelConfig base;
  base.frames = data.frames();
  base.patches = data.patches();
  base.channels = data.channels();
  // The tuple subset and seed are not part of the weights; recover them from
  // the training run's manifest when it sits next to the checkpoint.
  const fs::path train_manifest = fs::path(o.checkpoint).parent_path() / kRunManifestName;
  if (fs::exists(train_manifest)) {
    std::ifstream f(train_manifest);
    const json m = json::parse(f, nullptr, false);
    if (!m.is_discarded() && m.value("command", "") == "train") {
      const TrainOptions t = m.at("config").get<TrainOptions>();
      base.tuple_keep_ratio = t.model.keep_ratio;
      base.lambda = t.model.lambda;
      base.seed = t.seed;
    }
  }
  const ModelConfig config = infer_config(stored, base);
  if (config.channels != data.channels() || config.frames != data.frames())
    throw ShapeError("checkpoint extents L=" + std::to_string(config.frames) + ", D=" + std::to_string(config.channels) +
                     " do not match dataset extents L=" + std::to_string(data.frames()) +
                     ", D=" + std::to_string(data.channels()));
  config.validate();
  ModelParams params = ModelParams::create(config);
  restore_checkpoint(stored, params.all());

  if (!o.out.empty()) write_run_manifest(o.out, "eval", o, {{"seed", o.seed}}, {"report.json"});
  strm::EvalOptions opts;
  opts.episode = EpisodeSpec{o.episode.ways, o.episode.shots, o.episode.queries, o.seed};
  opts.episodes = o.episodes;
  opts.threads = o.threads;
  const EvalReport report = evaluate(data, params, config, opts);

  out << "accuracy " << fixed(report.accuracy) << " +- " << fixed(report.ci95_halfwidth) << " (" << report.episodes
      << " episodes, " << report.queries << " queries, " << o.episode.ways << "-way " << o.episode.shots << "-shot)\n";
  for (const auto& [label, acc] : report.per_class_accuracy) out << "class " << label << "\t" << fixed(acc) << "\n";
  if (!o.out.empty()) {
    json r;
    r["accuracy"] = report.accuracy;
    r["ci95_halfwidth"] = report.ci95_halfwidth;
    r["episodes"] = report.episodes;
    r["queries"] = report.queries;
    json per_class = json::object();
    for (const auto& [label, acc] : report.per_class_accuracy) per_class[std::to_string(label)] = acc;
    r["per_class_accuracy"] = per_class;
    write_text(fs::path(o.out) / "report.json", r.dump(2) + "\n");
  }
  return kOk;
}

int run_gradcheck(const GradcheckOptions& o, std::ostream& out) {
  constexpr std::size_t kMaxScalars = 100000;
  SyntheticSpec spec;
  spec.num_classes = o.ways;
  spec.clips_per_class = o.shots + 1;
  spec.frames = o.frames;
  spec.patches = o.patches;
  spec.channels = o.dim;
  spec.motif_strength = 1.0;
  spec.seed = o.seed;
  validate(spec);
  const Dataset data(generate_synthetic(spec));
  const ModelConfig config = model_config(o.model, data, o.seed);
  ModelParams params = ModelParams::create(config);
  const std::vector<Param*> checked = params.trainable(config);

  std::size_t scalars = 0;
  for (const auto* p : checked) scalars += p->value().size();
  if (scalars > kMaxScalars)
    throw std::invalid_argument("gradcheck is capped at " + std::to_string(kMaxScalars) + " parameters, config has " +
                                std::to_string(scalars));
  for (const auto& name : o.corrupt) {
    const bool known = std::any_of(checked.begin(), checked.end(), [&](const Param* p) { return p->name() == name; });
    if (!known) throw std::invalid_argument("--corrupt names no checked parameter: " + name);
  }
  if (!o.out.empty()) write_run_manifest(o.out, "gradcheck", o, {{"seed", o.seed}}, {"gradcheck.tsv"});

  const Episode episode = sample_episode(data, EpisodeSpec{o.ways, o.shots, 1, o.seed}, 0);
  const auto sets = model_tuple_sets(config);
  Tape tape;
  for (const auto& name : o.corrupt) tape.set_adjoint_fault(name, 1.5);
  const ParamGrads grads = tape.gradients(forward_episode(tape, data, episode, params, config, sets).loss);
  std::vector<Tensor> analytic;
  for (const auto* p : checked) {
    const Tensor* g = grads.find(*p);
    analytic.push_back(g ? *g : Tensor(p->value().shape()));
  }
  const auto numeric = finite_diff_gradients(
      [&] {
        Tape t;
        return forward_episode(t, data, episode, params, config, sets).loss.value().item();
      },
      checked, o.step);
  const auto rows = compare_gradients(checked, analytic, numeric, o.tolerance, o.abs_floor);

  std::ostringstream table;
  table << "parameter\tcount\tmax_rel_error\tmax_abs_error\tstatus\n";
  bool all_pass = true;
  for (const auto& r : rows) {
    char line[256];
    std::snprintf(line, sizeof line, "%s\t%zu\t%.3e\t%.3e\t%s\n", r.name.c_str(), r.count, r.max_rel_error,
                  r.max_abs_error, r.passed ? "PASS" : "FAIL");
    table << line;
    all_pass = all_pass && r.passed;
  }
  out << table.str();
  out << (all_pass ? "all " : "FAILED: not all ") << rows.size() << " parameters within relative error "
      << o.tolerance << "\n";
  if (!o.out.empty()) write_text(fs::path(o.out) / "gradcheck.tsv", table.str());
  return all_pass ? kOk : kNumeric;
}

int run_tuples(const TuplesOptions& o, std::ostream& out) {
  std::vector<std::vector<std::size_t>> sets;
  for (const auto& text : o.omega) sets.push_back(parse_cardinalities(text));
  for (const auto& set : sets)
    for (auto w : set)
      if (w == 0 || w > o.frames)
        throw std::invalid_argument("cardinality " + std::to_string(w) + " is not in [1, L=" + std::to_string(o.frames) +
                                    "]");
  if (!o.out.empty()) write_run_manifest(o.out, "tuples", o, json::object(), {"tuples.tsv"});

  std::ostringstream table;
  table << "omega\tper_cardinality\ttotal\n";
  for (const auto& set : sets) {
    std::string name = "{", parts;
    std::size_t total = 0;
    for (std::size_t i = 0; i < set.size(); ++i) {
      const std::size_t n = enumerate_tuples(o.frames, set[i]).size();
      total += n;
      name += (i ? "," : "") + std::to_string(set[i]);
      parts += (i ? " " : "") + std::to_string(set[i]) + ":" + std::to_string(n);
    }
    table << name << "}\t" << parts << "\t" << total << "\n";
  }
  out << "L=" << o.frames << "\n" << table.str();
  if (!o.out.empty()) write_text(fs::path(o.out) / "tuples.tsv", table.str());
  return kOk;
}

int run_ablate(const AblateOptions& o, std::ostream& out) {
  const TrainOptions& t = o.train;
  if (t.out.empty()) throw std::invalid_argument("ablate needs --out");
  const Dataset train_set = open_dataset(t.data);
  std::optional<Dataset> eval_set;
  if (!t.eval_data.empty()) eval_set = open_dataset(t.eval_data);
  const Dataset& test = eval_set ? *eval_set : train_set;
  const TrainConfig train_cfg = train_config(t);

  struct Variant {
    const char* name;
    bool ple, fle, qc;
  };
  const Variant variants[] = {{"baseline", false, false, false},
                              {"+PLE", true, false, false},
                              {"+FLE", false, true, false},
                              {"+PLE+FLE", true, true, false},
                              {"full", true, true, true}};
  std::vector<ModelConfig> configs;
  for (const auto& v : variants) {
    ModelOptions m = t.model;
    m.ple = v.ple;
    m.fle = v.fle;
    m.qc = v.qc;
    configs.push_back(model_config(m, train_set, t.seed));
  }
  write_run_manifest(t.out, "ablate", o, {{"seed", t.seed}}, {"ablation.tsv"});

  strm::EvalOptions final_eval;
  final_eval.episode = EpisodeSpec{t.episode.ways, t.episode.shots, t.episode.queries, mix_seed(t.seed, kFinalEvalStream)};
  final_eval.episodes = o.final_episodes;
  final_eval.threads = t.threads;

  std::ostringstream table;
  table << "variant\taccuracy\tci95\n";
  out << table.str();
  for (std::size_t i = 0; i < configs.size(); ++i) {
    TrainResult r = train(train_set, eval_set ? &*eval_set : nullptr, configs[i], train_cfg);
    const EvalReport rep = evaluate(test, r.params, configs[i], final_eval);
    char line[128];
    std::snprintf(line, sizeof line, "%s\t%.17g\t%.17g\n", variants[i].name, rep.accuracy, rep.ci95_halfwidth);
    table << line;
    out << variants[i].name << "\t" << fixed(rep.accuracy) << "\t" << fixed(rep.ci95_halfwidth) << std::endl;
  }
  write_text(fs::path(t.out) / "ablation.tsv", table.str());
  return kOk;
}

int run_attn_export(const AttnExportOptions& o, std::ostream& out) {
  if (o.out.empty()) throw std::invalid_argument("attn-export needs --out");
  if (!fs::exists(o.checkpoint)) throw IoError("checkpoint not found: " + o.checkpoint);
  const ClipRecord clip = load_clip(o.clip);
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(clip.features.patches))));
  if (side * side != clip.features.patches)
    throw std::invalid_argument("patch count " + std::to_string(clip.features.patches) + " is not a square grid");
  const auto stored = read_checkpoint(o.checkpoint);
  ModelConfig base;
  base.frames = clip.features.frames;
  base.patches = clip.features.patches;
  base.channels = clip.features.channels;
  const ModelConfig config = infer_config(stored, base);
  if (config.channels != clip.features.channels)
    throw ShapeError("checkpoint has D=" + std::to_string(config.channels) + " but the clip has D=" +
                     std::to_string(clip.features.channels));
  ModelParams params = ModelParams::create(config);
  restore_checkpoint(stored, params.all());
  write_run_manifest(o.out, "attn-export", o, json::object(), {"frame_XX.csv", "frame_XX.pgm"});

  const Tensor norms = patch_activation_norms(clip.features, config.use_ple ? &params.ple : nullptr);
  double lo = norms[0], hi = norms[0];
  for (double v : norms.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (std::size_t f = 0; f < clip.features.frames; ++f) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "frame_%02zu", f);
    std::ostringstream csv;
    std::string pgm = "P5\n" + std::to_string(side) + " " + std::to_string(side) + "\n255\n";
    for (std::size_t r = 0; r < side; ++r) {
      for (std::size_t c = 0; c < side; ++c) {
        const double v = norms.at(f, r * side + c);
        char cell[32];
        std::snprintf(cell, sizeof cell, "%.17g", v);
        csv << (c ? "," : "") << cell;
        const long gray = hi > lo ? std::lround(255.0 * (v - lo) / (hi - lo)) : 128;
        pgm.push_back(static_cast<char>(static_cast<unsigned char>(gray)));
      }
      csv << "\n";
    }
    write_text(fs::path(o.out) / (std::string(stem) + ".csv"), csv.str());
    write_text(fs::path(o.out) / (std::string(stem) + ".pgm"), pgm);
  }
  out << "wrote " << clip.features.frames << " " << side << "x" << side << " grids for clip " << clip.clip_id
      << (config.use_ple ? " (after patch enrichment)" : " (raw features)") << " to " << o.out << "\n";
  return kOk;
}

int run_replay(const fs::path& manifest, const std::optional<std::string>& out_override, std::ostream& out) {
  std::ifstream f(manifest);
  if (!f) throw IoError("cannot open run manifest " + manifest.string());
  const json m = json::parse(f, nullptr, false);
  if (m.is_discarded() || !m.contains("command") || !m.contains("config"))
    throw std::invalid_argument(manifest.string() + " is not a run manifest");
  const std::string command = m.at("command").get<std::string>();
  json config = m.at("config");
  if (out_override) {
    if (command == "ablate")
      config["train"]["out"] = *out_override;
    else
      config["out"] = *out_override;
  }
  if (command == "synth") return run_synth(config.get<SynthOptions>(), out);
  if (command == "train") return run_train(config.get<TrainOptions>(), out);
  if (command == "eval") return run_eval(config.get<EvalOptions>(), out);
  if (command == "gradcheck") return run_gradcheck(config.get<GradcheckOptions>(), out);
  if (command == "tuples") return run_tuples(config.get<TuplesOptions>(), out);
  if (command == "ablate") return run_ablate(config.get<AblateOptions>(), out);
  if (command == "attn-export") return run_attn_export(config.get<AttnExportOptions>(), out);
  throw std::invalid_argument("unknown command '" + command + "' in " + manifest.string());
}

}  // namespace strm::cli
