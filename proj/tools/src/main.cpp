#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "commands.hpp"
#include "strm/episodes.hpp"
#include "strm/model.hpp"
#include "strm/tensor.hpp"

namespace {

using namespace strm::cli;

void add_model_flags(CLI::App& app, ModelOptions& m, std::string& omega) {
  app.add_option("--psi-width", m.psi_width, "Hidden width of the patch refinement MLP")->capture_default_str();
  app.add_option("--trm-width", m.trm_width, "Key/value width of the tuple matcher")->capture_default_str();
  app.add_option("--qc-width", m.qc_width, "Code width of the query-class similarity")->capture_default_str();
  app.add_option("--omega", omega, "Tuple cardinalities, comma separated")->capture_default_str();
  app.add_option("--lambda", m.lambda, "Weight of the query-class loss")->capture_default_str();
  app.add_option("--keep-ratio", m.keep_ratio, "Fraction of tuples kept per cardinality")->capture_default_str();
  app.add_flag("!--no-ple", m.ple, "Disable patch-level enrichment");
  app.add_flag("!--no-fle", m.fle, "Disable frame-level enrichment");
  app.add_flag("!--no-qc", m.qc, "Disable the query-class similarity loss");
}

void add_episode_flags(CLI::App& app, EpisodeOptions& e) {
  app.add_option("--ways", e.ways, "Classes per episode")->capture_default_str();
  app.add_option("--shots", e.shots, "Support clips per class")->capture_default_str();
  app.add_option("--queries", e.queries, "Query clips per class")->capture_default_str();
}

void add_train_flags(CLI::App& app, TrainOptions& t, std::string& omega) {
  app.add_option("--data", t.data, "Training dataset directory or manifest")->required();
  app.add_option("--eval-data", t.eval_data, "Held-out dataset for periodic evaluation");
  app.add_option("--out", t.out, "Output directory")->required();
  app.add_option("--episodes", t.episodes, "Training episodes")->capture_default_str();
  app.add_option("--lr", t.lr, "Learning rate")->capture_default_str();
  app.add_option("--accumulate", t.accumulate, "Episodes per optimizer step")->capture_default_str();
  app.add_option("--eval-every", t.eval_every, "Episodes between evaluations")->capture_default_str();
  app.add_option("--eval-episodes", t.eval_episodes, "Episodes per periodic evaluation")->capture_default_str();
  app.add_option("--momentum", t.momentum, "SGD momentum")->capture_default_str();
  app.add_option("--weight-decay", t.weight_decay, "L2 weight decay")->capture_default_str();
  app.add_option("--seed", t.seed, "Seed for initialization and episode sampling")->capture_default_str();
  app.add_option("--threads", t.threads, "Worker threads per optimizer step")->capture_default_str();
  add_model_flags(app, t.model, omega);
  add_episode_flags(app, t.episode);
}

int dispatch(int argc, char** argv) {
  CLI::App app{"Few-shot clip classification by temporal tuple matching", "strm"};
  app.require_subcommand(1);

  SynthOptions synth;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic temporal-order dataset");
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();
  synth_cmd->add_option("--classes", synth.classes)->capture_default_str();
  synth_cmd->add_option("--clips", synth.clips, "Clips per class")->capture_default_str();
  synth_cmd->add_option("--frames", synth.frames)->capture_default_str();
  synth_cmd->add_option("--patches", synth.patches)->capture_default_str();
  synth_cmd->add_option("--dim", synth.dim, "Feature channels")->capture_default_str();
  synth_cmd->add_option("--motif", synth.motif, "Class motif strength")->capture_default_str();
  synth_cmd->add_option("--sigma", synth.sigma, "Noise standard deviation")->capture_default_str();
  synth_cmd->add_option("--seed", synth.seed)->capture_default_str();
  synth_cmd->add_option("--first-label", synth.first_label, "Label of the first class")->capture_default_str();

  TrainOptions train;
  std::string train_omega = "2";
  auto* train_cmd = app.add_subcommand("train", "Train a model on episodes sampled from a dataset");
  add_train_flags(*train_cmd, train, train_omega);

  EvalOptions eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on sampled episodes");
  eval_cmd->add_option("--data", eval.data, "Dataset directory or manifest")->required();
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--out", eval.out, "Directory for the report and run manifest");
  eval_cmd->add_option("--episodes", eval.episodes)->capture_default_str();
  eval_cmd->add_option("--seed", eval.seed)->capture_default_str();
  eval_cmd->add_option("--threads", eval.threads)->capture_default_str();
  add_episode_flags(*eval_cmd, eval.episode);

  GradcheckOptions grad;
  std::string grad_omega = "2";
  auto* grad_cmd = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  grad_cmd->add_option("--out", grad.out, "Directory for the table and run manifest");
  grad_cmd->add_option("--frames", grad.frames)->capture_default_str();
  grad_cmd->add_option("--patches", grad.patches)->capture_default_str();
  grad_cmd->add_option("--dim", grad.dim)->capture_default_str();
  grad_cmd->add_option("--ways", grad.ways)->capture_default_str();
  grad_cmd->add_option("--shots", grad.shots)->capture_default_str();
  grad_cmd->add_option("--step", grad.step, "Central difference step")->capture_default_str();
  grad_cmd->add_option("--tolerance", grad.tolerance, "Maximum relative error")->capture_default_str();
  grad_cmd->add_option("--abs-floor", grad.abs_floor, "Absolute error always accepted")->capture_default_str();
  grad_cmd->add_option("--corrupt", grad.corrupt, "Scale the adjoint of the named parameter");
  grad_cmd->add_option("--seed", grad.seed)->capture_default_str();
  add_model_flags(*grad_cmd, grad.model, grad_omega);

  TuplesOptions tuples;
  auto* tuples_cmd = app.add_subcommand("tuples", "Count temporal tuples per cardinality set");
  tuples_cmd->add_option("--out", tuples.out, "Directory for the table and run manifest");
  tuples_cmd->add_option("--frames", tuples.frames)->capture_default_str();
  tuples_cmd->add_option("--omega", tuples.omega, "Cardinality sets, e.g. --omega 2 --omega 2,3");

  AblateOptions ablate;
  std::string ablate_omega = "2";
  auto* ablate_cmd = app.add_subcommand("ablate", "Train and compare the five component variants");
  add_train_flags(*ablate_cmd, ablate.train, ablate_omega);
  ablate_cmd->add_option("--final-episodes", ablate.final_episodes)->capture_default_str();

  AttnExportOptions attn;
  auto* attn_cmd = app.add_subcommand("attn-export", "Write per-frame patch activation grids");
  attn_cmd->add_option("--checkpoint", attn.checkpoint)->required();
  attn_cmd->add_option("--clip", attn.clip)->required();
  attn_cmd->add_option("--out", attn.out)->required();

  std::string manifest;
  std::optional<std::string> replay_out;
  auto* replay_cmd = app.add_subcommand("replay", "Re-run the command recorded in a run manifest");
  replay_cmd->add_option("manifest", manifest, "Path to run.json")->required();
  replay_cmd->add_option("--out", replay_out, "Redirect the outputs to another directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (*synth_cmd) {
    apply_seed_override(synth.seed);
    return run_synth(synth, std::cout);
  }
  if (*train_cmd) {
    train.model.omega = parse_cardinalities(train_omega);
    apply_seed_override(train.seed);
    return run_train(train, std::cout);
  }
  if (*eval_cmd) {
    apply_seed_override(eval.seed);
    return run_eval(eval, std::cout);
  }
  if (*grad_cmd) {
    grad.model.omega = parse_cardinalities(grad_omega);
    apply_seed_override(grad.seed);
    return run_gradcheck(grad, std::cout);
  }
  if (*tuples_cmd) return run_tuples(tuples, std::cout);
  if (*ablate_cmd) {
    ablate.train.model.omega = parse_cardinalities(ablate_omega);
    apply_seed_override(ablate.train.seed);
    return run_ablate(ablate, std::cout);
  }
  if (*attn_cmd) return run_attn_export(attn, std::cout);
  return run_replay(manifest, replay_out, std::cout);
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const strm::NumericError& e) {
    std::cerr << "strm: numerical failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const strm::ClipFormatError& e) {
    std::cerr << "strm: " << e.what() << "\n";
    return kIo;
  } catch (const strm::CheckpointError& e) {
    std::cerr << "strm: " << e.what() << "\n";
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "strm: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "strm: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "strm: " << e.what() << "\n";
    return kUsage;
  } catch (const std::out_of_range& e) {
    std::cerr << "strm: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "strm: " << e.what() << "\n";
    return kFailure;
  }
}
