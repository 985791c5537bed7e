// Copyright 2026 The CCLI Authors
// SPDX-License-Identifier: Apache-2.0
//
// ccli: command-line driver for concept mining, training and evaluation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ccli/ccli.hpp"

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Flag overrides layered over the --config file. Unset flags leave the file
// (or default) value in place.
struct Overrides {
  std::string config_file;
  std::optional<std::size_t> shots, epochs, batch_size, top_i;
  std::optional<std::uint64_t> seed, train_seed;
  std::optional<double> lr, lr_min, weight_decay;
  std::optional<double> alpha, lambda, delta, eta, beta, tau;
  std::optional<std::string> w2_init;
  bool freeze_w3 = false, no_ci = false, no_ta = false, no_vcp = false, no_vmu = false;
};

void add_config_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_file, "JSON config file; flags override it")
      ->check(CLI::ExistingFile);
  cmd->add_option("--shots", o.shots, "support images per class");
  cmd->add_option("--seed", o.seed, "episode seed");
  cmd->add_option("--train-seed", o.train_seed, "training seed");
  cmd->add_option("--epochs", o.epochs);
  cmd->add_option("--batch-size", o.batch_size);
  cmd->add_option("--lr", o.lr, "peak learning rate");
  cmd->add_option("--lr-min", o.lr_min, "final learning rate");
  cmd->add_option("--weight-decay", o.weight_decay);
  cmd->add_option("--w2-init", o.w2_init, "top1 or random");
  cmd->add_option("--alpha", o.alpha);
  cmd->add_option("--lambda", o.lambda);
  cmd->add_option("--delta", o.delta);
  cmd->add_option("--eta", o.eta);
  cmd->add_option("--beta", o.beta);
  cmd->add_option("--tau", o.tau);
  cmd->add_option("--top-i", o.top_i, "support images averaged per concept");
  cmd->add_flag("--freeze-w3", o.freeze_w3);
  cmd->add_flag("--no-ci", o.no_ci, "disable both concept branches");
  cmd->add_flag("--no-ta", o.no_ta, "disable the text adapter");
  cmd->add_flag("--no-vcp", o.no_vcp, "disable the description-concept branch");
  cmd->add_flag("--no-vmu", o.no_vmu, "disable the class-concept branch");
}

ccli::ExperimentConfig resolve(const Overrides& o) {
  ccli::ExperimentConfig c;
  if (!o.config_file.empty()) ccli::apply_json(ccli::tensor_io::read_json(o.config_file), c);
  auto& t = c.train;
  auto& hp = t.hyperparams;
  if (o.shots) c.shots = *o.shots;
  if (o.seed) c.episode_seed = *o.seed;
  if (o.train_seed) t.seed = *o.train_seed;
  if (o.epochs) t.epochs = *o.epochs;
  if (o.batch_size) t.batch_size = *o.batch_size;
  if (o.lr) t.lr = *o.lr;
  if (o.lr_min) t.lr_min = *o.lr_min;
  if (o.weight_decay) t.optimizer.weight_decay = *o.weight_decay;
  if (o.w2_init) t.w2_init = ccli::w2_init_from_string(*o.w2_init);
  if (o.alpha) hp.alpha = *o.alpha;
  if (o.lambda) hp.lambda = *o.lambda;
  if (o.delta) hp.delta = *o.delta;
  if (o.eta) hp.eta = *o.eta;
  if (o.beta) hp.beta = *o.beta;
  if (o.tau) hp.tau = *o.tau;
  if (o.top_i) hp.top_i = *o.top_i;
  if (o.freeze_w3) t.freeze_w3 = true;
  if (o.no_ci || o.no_vcp) hp.branches.description = false;
  if (o.no_ci || o.no_vmu) hp.branches.class_specific = false;
  if (o.no_ta) hp.branches.adapter = false;
  t.validate();
  return c;
}

json bundle_identity(const fs::path& dir, const ccli::FeatureBundle& b) {
  return {{"path", dir.string()},
          {"dataset", b.meta.dataset},
          {"split", b.meta.split},
          {"fingerprint", ccli::fingerprint(b)}};
}

void echo_config(const fs::path& out, const std::string& command, json body) {
  fs::create_directories(out);
  body["command"] = command;
  ccli::tensor_io::write_json(out / "config.json", body);
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream f(file);
  if (!f) throw ccli::IoError("cannot open " + file.string() + " for writing");
  f << text;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  ccli::SynthSpec spec;
  std::string out;
};

void cmd_gen_synth(const SynthArgs& a) {
  const auto s = ccli::gen_synth(a.spec);
  const fs::path out = a.out;
  ccli::write_bundle(s.train, out / "train");
  ccli::write_bundle(s.test, out / "test");
  const auto& p = a.spec;
  echo_config(out, "gen-synth",
              {{"synth",
                {{"classes", p.num_classes},
                 {"dim", p.dim},
                 {"concepts", p.num_concepts},
                 {"train_per_class", p.train_per_class},
                 {"test_per_class", p.test_per_class},
                 {"sigma", p.sigma},
                 {"class_shift", p.class_shift},
                 {"seed", p.seed}}},
               {"outputs",
                {bundle_identity(out / "train", s.train), bundle_identity(out / "test", s.test)}}});
  std::cout << "wrote " << (out / "train").string() << " and " << (out / "test").string() << "\n";
}

struct LearnArgs {
  Overrides o;
  std::string bundle, out;
};

void cmd_learn_concepts(const LearnArgs& a) {
  const auto cfg = resolve(a.o);
  const auto bundle = ccli::read_bundle(a.bundle);
  const auto episode = ccli::sample_episode(bundle, cfg.shots, cfg.episode_seed);
  const auto bank = ccli::learn_concepts(bundle, episode, cfg.train.hyperparams.top_i);
  ccli::save_concept_bank(bank, a.out);
  echo_config(a.out, "learn-concepts",
              {{"config", ccli::to_json(cfg)},
               {"bundle", bundle_identity(a.bundle, bundle)},
               {"episode", episode.flat()}});
  std::cout << "mined " << bank.v_cp.rows() << " description and " << bank.v_mu.rows()
            << " class concepts from " << episode.flat().size() << " support images";
  if (!bank.fallback_rows.empty()) {
    std::cout << " (" << bank.fallback_rows.size() << " unweighted fallbacks)";
  }
  std::cout << "\n";
}

struct TrainArgs {
  Overrides o;
  std::string bundle, concepts, out;
};

void cmd_train(const TrainArgs& a) {
  auto cfg = resolve(a.o);
  const auto bundle = ccli::read_bundle(a.bundle);
  const auto bank = ccli::load_concept_bank(a.concepts);
  const auto& prov = bank.provenance;
  if (prov.fingerprint != ccli::fingerprint(bundle)) {
    throw ccli::ConfigError("concept bank was mined from a different bundle (fingerprint " +
                            prov.fingerprint + ")");
  }
  if ((a.o.shots && *a.o.shots != prov.shots) || (a.o.seed && *a.o.seed != prov.episode_seed) ||
      (a.o.top_i && *a.o.top_i != prov.top_i)) {
    throw ccli::ConfigError("--shots/--seed/--top-i disagree with the concept bank");
  }
  cfg.shots = prov.shots;
  cfg.episode_seed = prov.episode_seed;
  cfg.train.hyperparams.top_i = prov.top_i;
  const auto episode = ccli::sample_episode(bundle, prov.shots, prov.episode_seed);
  const auto result = ccli::train(bundle, episode, bank, cfg.train);

  const fs::path out = a.out;
  ccli::Checkpoint ckpt{result.params, cfg.train,
                        {{"concepts",
                          {{"dataset", prov.dataset},
                           {"split", prov.split},
                           {"fingerprint", prov.fingerprint},
                           {"episode_seed", prov.episode_seed},
                           {"shots", prov.shots},
                           {"top_i", prov.top_i},
                           {"fallback_rows", bank.fallback_rows}}},
                         {"episode", episode.flat()},
                         {"steps", result.log.steps}}};
  ccli::save_checkpoint(ckpt, out);
  std::string log;
  for (const auto& e : result.log.epochs) log += ccli::to_json(e).dump() + "\n";
  write_text(out / "train_log.jsonl", log);
  echo_config(out, "train",
              {{"config", ccli::to_json(cfg)},
               {"bundle", bundle_identity(a.bundle, bundle)},
               {"concepts", a.concepts},
               {"steps", result.log.steps},
               {"wall_seconds", result.log.wall_seconds}});
  const auto& last = result.log.epochs.back();
  std::cout << "trained " << result.log.epochs.size() << " epochs, " << result.log.steps
            << " steps; final loss " << last.loss << ", train acc " << last.train_acc << "%\n";
}

struct EvalArgs {
  std::string checkpoint, bundle, out;
  std::vector<std::string> targets;
  std::optional<std::size_t> explain;
  std::size_t top_k = 5;
};

void cmd_eval(const EvalArgs& a) {
  const auto bundle = ccli::read_bundle(a.bundle);
  const auto ckpt = ccli::load_checkpoint(a.checkpoint, bundle.dim());
  const auto& hp = ckpt.config.hyperparams;
  auto report = ccli::evaluate(ckpt.params, hp, bundle);
  json ckpt_cfg = ccli::to_json(ckpt.config);
  report.config = {{"checkpoint", a.checkpoint}, {"train", ckpt_cfg}};

  const fs::path out = a.out;
  fs::create_directories(out);
  json body = {{"checkpoint", a.checkpoint},
               {"train", ckpt_cfg},
               {"provenance", ckpt.provenance},
               {"bundle", bundle_identity(a.bundle, bundle)}};
  ccli::tensor_io::write_json(out / "report.json", ccli::to_json(report));
  std::string text = ccli::to_text(report);

  if (!a.targets.empty()) {
    std::vector<ccli::FeatureBundle> targets;
    json ids = json::array();
    for (const auto& t : a.targets) {
      targets.push_back(ccli::read_bundle(t));
      ids.push_back(bundle_identity(t, targets.back()));
    }
    const auto shift = ccli::evaluate_domain_shift(ckpt.params, hp, report, targets);
    ccli::tensor_io::write_json(out / "domain_shift.json", ccli::to_json(shift));
    for (const auto& r : shift.targets) text += "\n" + ccli::to_text(r);
    char avg[64];
    std::snprintf(avg, sizeof avg, "\nOOD average: %.2f%%\n", shift.ood_average);
    text += avg;
    body["targets"] = ids;
  }
  if (a.explain) {
    const auto top = ccli::concept_report(ckpt.params, bundle, *a.explain, a.top_k);
    json rows = json::array();
    text += "\nconcepts for sample " + std::to_string(*a.explain) + ":\n";
    for (const auto& c : top) {
      rows.push_back({{"index", c.index}, {"text", c.text}, {"score", c.score}});
      char line[256];
      std::snprintf(line, sizeof line, "  %8.4f  %s\n", c.score, c.text.c_str());
      text += line;
    }
    ccli::tensor_io::write_json(out / "concepts.json",
                                {{"sample", *a.explain}, {"concepts", rows}});
  }
  write_text(out / "report.txt", text);
  echo_config(out, "eval", body);
  std::printf("accuracy %.2f%%\n", report.accuracy);
}

struct ZeroShotArgs {
  std::string bundle, out;
  std::optional<double> tau;
};

void cmd_zeroshot(const ZeroShotArgs& a) {
  const auto bundle = ccli::read_bundle(a.bundle);
  const double tau = a.tau ? *a.tau : bundle.meta.tau.value_or(ccli::Hyperparams{}.tau);
  const auto report = ccli::evaluate_zero_shot(bundle, tau);
  fs::create_directories(a.out);
  ccli::tensor_io::write_json(fs::path(a.out) / "report.json", ccli::to_json(report));
  write_text(fs::path(a.out) / "report.txt", ccli::to_text(report));
  echo_config(a.out, "zeroshot", {{"tau", tau}, {"bundle", bundle_identity(a.bundle, bundle)}});
  std::printf("accuracy %.2f%%\n", report.accuracy);
}

struct SweepArgs {
  Overrides o;
  std::string train, test, out, param;
  std::vector<double> values;
};

void cmd_sweep(const SweepArgs& a) {
  const auto cfg = resolve(a.o);
  const auto train_bundle = ccli::read_bundle(a.train);
  const auto test_bundle = ccli::read_bundle(a.test);
  const ccli::SweepGrid grid{a.param, a.values};
  const auto rows = ccli::sweep(grid, train_bundle, test_bundle, cfg);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "sweep.csv", ccli::sweep_csv(rows));
  echo_config(a.out, "sweep",
              {{"config", ccli::to_json(cfg)},
               {"grid", {{"param", a.param}, {"values", a.values}}},
               {"train", bundle_identity(a.train, train_bundle)},
               {"test", bundle_identity(a.test, test_bundle)}});
  std::cout << ccli::sweep_csv(rows);
}

std::string one_line(std::string s) {
  for (char& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot concept-guided adapter over frozen image-text features"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* gen = app.add_subcommand("gen-synth", "write synthetic train/test bundles");
  gen->add_option("--out", synth.out, "output directory")->required();
  gen->add_option("--classes", synth.spec.num_classes);
  gen->add_option("--dim", synth.spec.dim);
  gen->add_option("--concepts", synth.spec.num_concepts);
  gen->add_option("--train-per-class", synth.spec.train_per_class);
  gen->add_option("--test-per-class", synth.spec.test_per_class);
  gen->add_option("--sigma", synth.spec.sigma);
  gen->add_option("--class-shift", synth.spec.class_shift);
  gen->add_option("--seed", synth.spec.seed);

  LearnArgs learn;
  auto* lc = app.add_subcommand("learn-concepts", "mine visual concepts from a few-shot episode");
  lc->add_option("--bundle", learn.bundle)->required()->check(CLI::ExistingDirectory);
  lc->add_option("--out", learn.out)->required();
  add_config_flags(lc, learn.o);

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train the adapter on the concept bank's episode");
  train->add_option("--bundle", tr.bundle)->required()->check(CLI::ExistingDirectory);
  train->add_option("--concepts", tr.concepts)->required()->check(CLI::ExistingDirectory);
  train->add_option("--out", tr.out)->required();
  add_config_flags(train, tr.o);

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", ev.checkpoint)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--bundle", ev.bundle)->required()->check(CLI::ExistingDirectory);
  eval->add_option("--target", ev.targets, "shifted target bundle (repeatable)")
      ->check(CLI::ExistingDirectory);
  eval->add_option("--explain", ev.explain, "report top concepts for this sample index");
  eval->add_option("--top-k", ev.top_k, "concepts listed by --explain");
  eval->add_option("--out", ev.out)->required();

  ZeroShotArgs zs;
  auto* zero = app.add_subcommand("zeroshot", "zero-shot baseline accuracy");
  zero->add_option("--bundle", zs.bundle)->required()->check(CLI::ExistingDirectory);
  zero->add_option("--tau", zs.tau, "temperature (default: bundle meta, else 0.01)");
  zero->add_option("--out", zs.out)->required();

  SweepArgs sw;
  auto* sweep = app.add_subcommand("sweep", "train and evaluate once per grid value");
  sweep->add_option("--train", sw.train)->required()->check(CLI::ExistingDirectory);
  sweep->add_option("--test", sw.test)->required()->check(CLI::ExistingDirectory);
  sweep->add_option("--param", sw.param, "alpha, delta, beta, eta, lambda, I or shots")
      ->required()
      ->check(CLI::IsMember({"alpha", "delta", "beta", "eta", "lambda", "I", "shots"}));
  sweep->add_option("--values", sw.values, "comma-separated grid")->required()->delimiter(',');
  sweep->add_option("--out", sw.out)->required();
  add_config_flags(sweep, sw.o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: UsageError: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*gen) cmd_gen_synth(synth);
    else if (*lc) cmd_learn_concepts(learn);
    else if (*train) cmd_train(tr);
    else if (*eval) cmd_eval(ev);
    else if (*zero) cmd_zeroshot(zs);
    else if (*sweep) cmd_sweep(sw);
  } catch (const ccli::ConfigError& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return 2;
  } catch (const ccli::HyperparamError& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return 2;
  } catch (const ccli::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: IoError: " << one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}
