#include "cli.hpp"

#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include <CLI11.hpp>

namespace cifa::cli {

namespace fs = std::filesystem;

namespace {

template <class T>
void read_key(const Json& doc, const char* key, T& target) {
  if (!doc.contains(key)) return;
  try {
    target = doc.at(key).get<T>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string("/") + key + ": " + e.what());
  }
}

void reject_unknown(const Json& doc, std::initializer_list<const char*> known,
                    const std::string& where) {
  if (!doc.is_object()) throw FormatError(where + ": expected an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    bool found = false;
    for (const char* k : known) found = found || it.key() == k;
    if (!found) throw FormatError(where + "/" + it.key() + ": unknown key");
  }
}

std::vector<ClassifierKind> classifiers_from(const Json& doc) {
  std::vector<ClassifierKind> out;
  for (const auto& name : doc.get<std::vector<std::string>>())
    out.push_back(classifier_kind_from_string(name));
  return out;
}

Generator generator_from_json(const Json& doc) {
  reject_unknown(doc, {"spec", "parameters", "model"}, "/generator");
  if (!doc.contains("spec")) throw FormatError("/generator/spec: missing");
  Generator g;
  g.spec = parse_spec(doc["spec"]);
  if (doc.contains("parameters")) {
    g.params = params_from_json(g.spec, doc["parameters"]);
  } else if (doc.contains("model")) {
    g.params = params_from_model_json(g.spec, doc["model"]);
  } else {
    throw FormatError("/generator: needs parameters or model");
  }
  return g;
}

ParameterSet load_params(const ModelSpec& spec, const fs::path& path) {
  const Json doc = read_json(path);
  if (doc.contains("correlation")) return params_from_model_json(spec, doc);
  if (doc.contains("parameters")) return params_from_json(spec, doc["parameters"]);
  return params_from_json(spec, doc);
}

struct Session {
  std::vector<std::string> args;
  std::ostream& out;
  std::ostream& err;
  std::string started = utc_timestamp();

  void write_manifest(const fs::path& dir, const std::string& command, const Json& config,
                      const Json& seeds, const std::vector<fs::path>& outputs) const {
    Manifest m;
    m.command = command;
    m.argv = args;
    m.config = config;
    m.seeds = seeds;
    m.started = started;
    m.finished = utc_timestamp();
    for (const auto& p : outputs) m.outputs.push_back(p.string());
    write_atomic(dir / "manifest.json", dump_json(manifest_to_json(m)));
  }
};

// Records the resolved output directory so a replay writes to the same place.
fs::path resolve_out(Session& s, std::string& out, const std::string& command) {
  if (out.empty()) {
    out = default_output_dir(command).string();
    s.args.push_back("--out");
    s.args.push_back(out);
  }
  return fs::path(out);
}

Json fit_config_to_json(const FitConfig& c) {
  Json doc = {{"iw_samples", c.iw_samples}, {"mc_samples", c.mc_samples},
              {"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
              {"max_steps", c.max_steps}, {"window", c.window},
              {"tolerance", c.tolerance}, {"patience", c.patience}};
  if (c.hidden) doc["hidden"] = *c.hidden;
  return doc;
}

// -- fit ---------------------------------------------------------------------------

struct FitArgs {
  std::string data, spec, out;
  bool one_based = false;
  FitConfig config;
  std::vector<int> hidden;
};

int do_fit(Session& s, FitArgs& a) {
  std::vector<std::string> warnings;
  const ModelSpec spec = load_spec(a.spec, &warnings);
  for (const auto& w : warnings) s.err << "warning: " << w << '\n';
  ResponseLoadOptions lo;
  lo.one_based = a.one_based;
  lo.categories = spec.categories;
  const ResponseMatrix data = load_responses(a.data, lo);
  if (!a.hidden.empty()) a.config.hidden = a.hidden;
  a.config.validate();
  const fs::path dir = resolve_out(s, a.out, "fit");

  const FitResult result = fit(data, spec, a.config);
  auto outputs = save_results(dir, spec, result);
  Json config = fit_config_to_json(a.config);
  config["data"] = a.data;
  config["spec"] = a.spec;
  config["seed"] = a.config.seed;
  s.write_manifest(dir, "fit", config, {{"seed", a.config.seed}}, outputs);

  s.out << "steps " << result.steps << (result.converged ? " (converged)" : " (step cap)")
        << '\n';
  if (!result.trace.empty())
    s.out << "final batch IW-ELBO " << std::setprecision(8) << result.trace.back() << '\n';
  s.out << "estimates " << outputs[0].string() << '\n';
  return ok;
}

// -- simulate ----------------------------------------------------------------------

struct SimulateArgs {
  std::string spec, params, model, out;
  int n = 0;
  std::uint64_t seed = 0;
  bool one_based = false, no_header = false;
};

int do_simulate(Session& s, const SimulateArgs& a) {
  Model model;
  if (!a.model.empty()) {
    if (!a.spec.empty() || !a.params.empty()) {
      throw CLI::ValidationError("--model excludes --spec and --params");
    }
    model = load_estimates(a.model).model();
  } else {
    if (a.spec.empty() || a.params.empty()) {
      throw CLI::ValidationError("give --model, or both --spec and --params");
    }
    const ModelSpec spec = load_spec(a.spec);
    model = materialize(spec, load_params(spec, a.params));
  }
  ResponseMatrix data = sample_responses(model, a.n, a.seed);
  if (a.one_based) data.array() += 1;
  const std::string csv = format_responses(data, !a.no_header);
  if (a.out.empty()) {
    s.out << csv;
  } else {
    write_atomic(a.out, csv);
  }
  return ok;
}

// -- gof -----------------------------------------------------------------------------

struct GofArgs {
  std::string test, model, data, classifier = "nn", out;
  double delta = 0.0;
  std::uint64_t seed = 0;
  int reps = 5;
  bool one_based = false;
};

Json outcome_json(const C2stRun& run) {
  Json hp = Json::object();
  for (const auto& [k, v] : run.classifier->hyperparameters()) hp[k] = v;
  return {{"classifier", to_string(run.classifier->kind())},
          {"accuracy", run.outcome.accuracy},
          {"p_value", run.outcome.p_value},
          {"delta", run.outcome.delta},
          {"n_test", run.outcome.n_test},
          {"hyperparameters", hp}};
}

int do_gof(Session& s, GofArgs& a) {
  const Estimates est = load_estimates(a.model);
  ResponseLoadOptions lo;
  lo.one_based = a.one_based;
  lo.categories = est.spec.categories;
  const ResponseMatrix data = load_responses(a.data, lo);
  C2stOptions opts;
  opts.classifier = classifier_kind_from_string(a.classifier);
  opts.delta = a.delta;
  const auto& cats = est.spec.categories;

  const C2stRun run = run_c2st(est.model(), data, cats, opts, a.seed);
  Json result = {{"test", a.test}, {"model", outcome_json(run)}};
  if (a.test == "rfi") {
    const BaselineModel base{zero_factor_mle(data, cats)};
    const C2stRun brun = run_c2st(base, data, cats, opts, mix_seed(a.seed, 100));
    result["baseline"] = outcome_json(brun);
    const int m_prop = count_parameters(est.spec);
    const int m_base = count_parameters(zero_factor_spec(cats));
    result["parameters"] = {{"model", m_prop}, {"baseline", m_base}};
    try {
      result["rfi"] = rfi(run.outcome.accuracy, brun.outcome.accuracy, m_prop, m_base);
    } catch (const std::domain_error& e) {
      result["rfi"] = nullptr;
      s.err << "warning: " << e.what() << '\n';
    }
  } else if (a.test == "pi") {
    const Vector imp = permutation_importance(*run.classifier, run.set, a.reps, mix_seed(a.seed, 4));
    std::vector<int> order(static_cast<std::size_t>(imp.size()));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return imp(i) > imp(j); });
    result["importance"] = std::vector<double>(imp.data(), imp.data() + imp.size());
    result["ranking"] = order;
    result["repetitions"] = a.reps;
  }
  if (!a.out.empty()) {
    const fs::path dir(a.out);
    const fs::path file = dir / ("gof-" + a.test + ".json");
    write_atomic(file, dump_json(result));
    Json config = {{"test", a.test},   {"model", a.model}, {"data", a.data},
                   {"delta", a.delta}, {"classifier", a.classifier}, {"reps", a.reps}};
    s.write_manifest(dir, "gof", config, {{"seed", a.seed}}, {file});
  }
  s.out << result.dump(2) << '\n';
  return ok;
}

// -- experiment ----------------------------------------------------------------------

struct ExperimentArgs {
  std::string study, config, out;
  int jobs = 1;
  int replications = 0;
};

int do_experiment(Session& s, ExperimentArgs& a) {
  const Json doc = a.config.empty() ? Json::object() : read_json(a.config);
  const fs::path dir = resolve_out(s, a.out, "experiment-" + a.study);
  fs::path json_path = dir / "report.json", csv_path = dir / "summary.csv";
  std::uint64_t seed = 0;
  if (a.study == "recovery") {
    RecoveryConfig c = recovery_config_from_json(doc);
    c.jobs = a.jobs;
    if (a.replications > 0) c.replications = a.replications;
    seed = c.seed;
    const RecoveryReport r = run_recovery(c);
    write_atomic(json_path, dump_json(report_to_json(r)));
    write_atomic(csv_path, report_to_csv(r));
    for (const auto& cell : r.cells) {
      double worst = 0.0;
      for (const auto& p : cell.parameters) worst = std::max(worst, std::abs(p.bias));
      s.out << "N=" << cell.cell.n << " R=" << cell.cell.iw_samples << " fits=" << cell.completed
            << " failures=" << cell.failures << " max|bias|=" << worst << '\n';
    }
  } else if (a.study == "calibration") {
    CalibrationConfig c = calibration_config_from_json(doc);
    c.jobs = a.jobs;
    if (a.replications > 0) c.replications = a.replications;
    seed = c.seed;
    const CalibrationReport r = run_uniform_calibration(c);
    write_atomic(json_path, dump_json(report_to_json(r)));
    write_atomic(csv_path, report_to_csv(r));
    for (const auto& cell : r.cells) {
      s.out << "shift=" << cell.arm.shift << " N=" << cell.n << ' ' << to_string(cell.classifier)
            << " rejection=" << cell.rejection_rate << " predicted=" << cell.predicted_power
            << '\n';
    }
  } else if (a.study == "misspecification") {
    MisspecConfig c = misspec_config_from_json(doc);
    c.jobs = a.jobs;
    if (a.replications > 0) c.replications = a.replications;
    seed = c.seed;
    const MisspecReport r = run_misspecification(c);
    write_atomic(json_path, dump_json(report_to_json(r, c)));
    write_atomic(csv_path, report_to_csv(r, c));
    for (const auto& cell : r.cells) {
      s.out << cell.variant << " N=" << cell.n << ' ' << to_string(cell.classifier);
      for (std::size_t d = 0; d < c.deltas.size(); ++d)
        s.out << " reject[" << c.deltas[d] << "]=" << cell.rejection_rates[d];
      s.out << " median_rfi=" << cell.median_rfi << " top_hit=" << cell.top_hit_rate << '\n';
    }
  } else {
    throw CLI::ValidationError("--study", "unknown study " + a.study);
  }
  Json config = doc;
  config["study"] = a.study;
  s.write_manifest(dir, "experiment", config, {{"seed", seed}}, {json_path, csv_path});
  s.out << "report " << json_path.string() << '\n';
  return ok;
}

// -- replay ----------------------------------------------------------------------------

int do_replay(Session& s, const std::string& manifest_path, const std::string& out) {
  const Manifest m = manifest_from_json(read_json(manifest_path));
  const Json raw = read_json(manifest_path);
  if (raw.value("version", "") != version()) {
    s.err << "warning: manifest written by version " << raw.value("version", "?")
          << ", running " << version() << '\n';
  }
  std::vector<std::string> argv = m.argv;
  if (argv.empty() || argv[0] == "replay") throw FormatError("manifest has no replayable command");
  if (!out.empty()) {
    bool replaced = false;
    for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
      if (argv[i] == "--out") {
        argv[i + 1] = out;
        replaced = true;
      }
    }
    if (!replaced) {
      argv.push_back("--out");
      argv.push_back(out);
    }
  }
  return run(argv, s.out, s.err);
}

}  // namespace

fs::path default_output_dir(const std::string& command) {
  const char* root = std::getenv("CIFA_OUTPUT_ROOT");
  std::string stamp = utc_timestamp();
  std::erase(stamp, ':');
  std::erase(stamp, '-');
  return fs::path(root && *root ? root : "cifa-runs") / (command + "-" + stamp);
}

FitConfig fit_config_from_json(const Json& doc, FitConfig base) {
  reject_unknown(doc,
                 {"iw_samples", "mc_samples", "learning_rate", "batch_size", "max_steps", "window",
                  "tolerance", "patience", "hidden"},
                 "/fit");
  read_key(doc, "iw_samples", base.iw_samples);
  read_key(doc, "mc_samples", base.mc_samples);
  read_key(doc, "learning_rate", base.learning_rate);
  read_key(doc, "batch_size", base.batch_size);
  read_key(doc, "max_steps", base.max_steps);
  read_key(doc, "window", base.window);
  read_key(doc, "tolerance", base.tolerance);
  read_key(doc, "patience", base.patience);
  if (doc.contains("hidden")) {
    std::vector<int> h;
    read_key(doc, "hidden", h);
    base.hidden = h;
  }
  return base;
}

RecoveryConfig recovery_config_from_json(const Json& doc) {
  reject_unknown(doc,
                 {"generator", "cells", "replications", "seed", "fit", "refit_poor_maxima",
                  "flag_threshold"},
                 "");
  RecoveryConfig c = default_recovery_config();
  if (doc.contains("generator")) c.generator = generator_from_json(doc["generator"]);
  if (doc.contains("cells")) {
    c.cells.clear();
    for (const auto& cell : doc["cells"]) {
      RecoveryCell rc;
      read_key(cell, "n", rc.n);
      read_key(cell, "iw_samples", rc.iw_samples);
      c.cells.push_back(rc);
    }
  }
  read_key(doc, "replications", c.replications);
  read_key(doc, "seed", c.seed);
  read_key(doc, "refit_poor_maxima", c.refit_poor_maxima);
  read_key(doc, "flag_threshold", c.flag_threshold);
  if (doc.contains("fit")) c.fit = fit_config_from_json(doc["fit"], c.fit);
  c.validate();
  return c;
}

CalibrationConfig calibration_config_from_json(const Json& doc) {
  reject_unknown(doc, {"arms", "sizes", "classifiers", "delta", "alpha", "replications", "seed"},
                 "");
  CalibrationConfig c = default_calibration_config();
  if (doc.contains("arms")) {
    c.arms.clear();
    for (const auto& arm : doc["arms"]) {
      CalibrationArm a;
      read_key(arm, "shift", a.shift);
      read_key(arm, "epsilon", a.epsilon);
      c.arms.push_back(a);
    }
  }
  read_key(doc, "sizes", c.sizes);
  if (doc.contains("classifiers")) c.classifiers = classifiers_from(doc["classifiers"]);
  read_key(doc, "delta", c.delta);
  read_key(doc, "alpha", c.alpha);
  read_key(doc, "replications", c.replications);
  read_key(doc, "seed", c.seed);
  c.validate();
  return c;
}

MisspecConfig misspec_config_from_json(const Json& doc) {
  reject_unknown(doc,
                 {"generator", "variants", "sizes", "classifiers", "deltas", "alpha",
                  "replications", "pi_repetitions", "flagged_items", "seed", "fit",
                  "refit_poor_maxima", "flag_threshold"},
                 "");
  MisspecConfig c = default_misspecification_config();
  if (doc.contains("generator")) c.generator = generator_from_json(doc["generator"]);
  if (doc.contains("variants")) {
    c.variants.clear();
    for (auto it = doc["variants"].begin(); it != doc["variants"].end(); ++it)
      c.variants.push_back({it.key(), parse_spec(it.value())});
  }
  read_key(doc, "sizes", c.sizes);
  if (doc.contains("classifiers")) c.classifiers = classifiers_from(doc["classifiers"]);
  read_key(doc, "deltas", c.deltas);
  read_key(doc, "alpha", c.alpha);
  read_key(doc, "replications", c.replications);
  read_key(doc, "pi_repetitions", c.pi_repetitions);
  read_key(doc, "flagged_items", c.flagged_items);
  read_key(doc, "seed", c.seed);
  read_key(doc, "refit_poor_maxima", c.refit_poor_maxima);
  read_key(doc, "flag_threshold", c.flag_threshold);
  if (doc.contains("fit")) c.fit = fit_config_from_json(doc["fit"], c.fit);
  c.validate();
  return c;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Confirmatory item factor analysis: amortized IW-ELBO fitting and "
               "classifier two-sample goodness of fit"};
  app.set_version_flag("--version", std::string(version()));
  app.require_subcommand(1);

  FitArgs fa;
  auto* fit_cmd = app.add_subcommand("fit", "Fit a graded response model");
  fit_cmd->add_option("--data", fa.data, "Response CSV")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--spec", fa.spec, "Model spec JSON")->required()->check(CLI::ExistingFile);
  fit_cmd->add_option("--iw-samples", fa.config.iw_samples, "Importance samples R")
      ->capture_default_str();
  fit_cmd->add_option("--mc-samples", fa.config.mc_samples, "Monte Carlo samples S")
      ->capture_default_str();
  fit_cmd->add_option("--lr", fa.config.learning_rate, "AMSGrad learning rate")
      ->capture_default_str();
  fit_cmd->add_option("--batch", fa.config.batch_size, "Minibatch size")->capture_default_str();
  fit_cmd->add_option("--max-steps", fa.config.max_steps, "Step cap")->capture_default_str();
  fit_cmd->add_option("--hidden", fa.hidden, "Inference network hidden widths");
  fit_cmd->add_option("--seed", fa.config.seed, "Random seed")->capture_default_str();
  fit_cmd->add_flag("--one-based", fa.one_based, "Response codes start at 1");
  fit_cmd->add_option("--out", fa.out, "Output directory");

  SimulateArgs sa;
  auto* sim_cmd = app.add_subcommand("simulate", "Sample responses from a model");
  sim_cmd->add_option("--model", sa.model, "Estimates JSON")->check(CLI::ExistingFile);
  sim_cmd->add_option("--spec", sa.spec, "Model spec JSON")->check(CLI::ExistingFile);
  sim_cmd->add_option("--params", sa.params, "Parameter JSON (free or natural form)")
      ->check(CLI::ExistingFile);
  sim_cmd->add_option("--n", sa.n, "Respondents")->required()->check(CLI::PositiveNumber);
  sim_cmd->add_option("--seed", sa.seed, "Random seed")->capture_default_str();
  sim_cmd->add_option("--out", sa.out, "Output CSV (default: standard output)");
  sim_cmd->add_flag("--one-based", sa.one_based, "Write codes 1..K");
  sim_cmd->add_flag("--no-header", sa.no_header, "Omit the header line");

  GofArgs ga;
  auto* gof_cmd = app.add_subcommand("gof", "Classifier two-sample goodness of fit");
  gof_cmd->add_option("test", ga.test, "c2st, rfi or pi")
      ->required()
      ->check(CLI::IsMember({"c2st", "rfi", "pi"}));
  gof_cmd->add_option("--model", ga.model, "Estimates JSON")->required()->check(CLI::ExistingFile);
  gof_cmd->add_option("--data", ga.data, "Response CSV")->required()->check(CLI::ExistingFile);
  gof_cmd->add_option("--classifier", ga.classifier, "knn or nn")
      ->capture_default_str()
      ->check(CLI::IsMember({"knn", "nn", "neural"}));
  gof_cmd->add_option("--delta", ga.delta, "Tolerance; 0 gives the exact test")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 0.4999));
  gof_cmd->add_option("--seed", ga.seed, "Random seed")->capture_default_str();
  gof_cmd->add_option("--reps", ga.reps, "Permutations per item (pi)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  gof_cmd->add_flag("--one-based", ga.one_based, "Response codes start at 1");
  gof_cmd->add_option("--out", ga.out, "Also write results to this directory");

  ExperimentArgs ea;
  auto* exp_cmd = app.add_subcommand("experiment", "Run a simulation study");
  exp_cmd->add_option("--study", ea.study, "recovery, calibration or misspecification")
      ->required()
      ->check(CLI::IsMember({"recovery", "calibration", "misspecification"}));
  exp_cmd->add_option("--config", ea.config, "Study config JSON")->check(CLI::ExistingFile);
  exp_cmd->add_option("--out", ea.out, "Output directory");
  exp_cmd->add_option("--jobs", ea.jobs, "Worker threads")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  exp_cmd->add_option("--replications", ea.replications, "Override the replication count")
      ->check(CLI::PositiveNumber);

  std::string manifest, replay_out;
  auto* replay_cmd = app.add_subcommand("replay", "Re-run the command recorded in a manifest");
  replay_cmd->add_option("--manifest", manifest, "manifest.json")
      ->required()
      ->check(CLI::ExistingFile);
  replay_cmd->add_option("--out", replay_out, "Write to a different directory");

  std::vector<std::string> storage{"cifa"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : storage) argv.push_back(a.data());

  Session session{args, out, err};
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
    if (*fit_cmd) return do_fit(session, fa);
    if (*sim_cmd) return do_simulate(session, sa);
    if (*gof_cmd) return do_gof(session, ga);
    if (*exp_cmd) return do_experiment(session, ea);
    if (*replay_cmd) return do_replay(session, manifest, replay_out);
    return usage;
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? ok : usage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return numerical;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return usage;
  }
}

}  // namespace cifa::cli
