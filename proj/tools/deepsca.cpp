// deepsca: dataset synthesis and conversion, training, attack evaluation and
// model analysis for profiled side-channel attacks.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include "deepsca/aes.hpp"
#include "deepsca/analysis.hpp"
#include "deepsca/attack.hpp"
#include "deepsca/checkpoint.hpp"
#include "deepsca/config_json.hpp"
#include "deepsca/error.hpp"
#include "deepsca/report.hpp"
#include "deepsca/trace_io.hpp"
#include "deepsca/training.hpp"

namespace fs = std::filesystem;
using namespace deepsca;

namespace {

constexpr const char* kToolVersion = "0.1.0";

enum ExitCode { kOk = 0, kUsage = 2, kRuntime = 3 };

// Options shared by every subcommand.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
};

Json load_config_file(const std::string& path, const std::string& command) {
  if (path.empty()) return Json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open '" + path + "'");
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config", "top level must be an object");
  static const std::set<std::string> allowed = {
      "command", "tool", "version", "outputs", "dataset", "dataset_hash", "group",
      "preset", "network", "training", "leakage", "synth", "convert", "model",
      "n_profiling", "n_attack", "split_seed", "seed", "out", "repeats", "max_traces",
      "threshold", "class_policy", "class", "n_traces", "power_model", "deterministic",
      "standardize", "format", "required_traces", "true_key_byte", "attack_seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!allowed.count(it.key())) throw ConfigError(it.key(), "unknown field in config file");
  }
  if (j.contains("command") && j.at("command") != command) {
    throw ConfigError("command", "config was written for '" + j.at("command").get<std::string>() +
                                     "', not '" + command + "'");
  }
  return j;
}

template <typename T>
std::optional<T> opt_field(const Json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(key, "wrong type in config file");
  }
}

/// Flag value if given, then file value, then fallback.
template <typename T>
T resolve(const std::optional<T>& flag, const Json& file, const char* key, T fallback) {
  if (flag) return *flag;
  if (auto v = opt_field<T>(file, key)) return *v;
  return fallback;
}

/// Relative paths that do not exist are looked up under DEEPSCA_DATA_DIR.
fs::path resolve_dataset_path(const std::string& p) {
  if (p.empty()) throw ConfigError("dataset", "no dataset given");
  fs::path path(p);
  if (!fs::exists(path) && path.is_relative()) {
    if (const char* root = std::getenv("DEEPSCA_DATA_DIR")) {
      fs::path alt = fs::path(root) / path;
      if (fs::exists(alt)) return alt;
    }
  }
  if (!fs::exists(path)) throw ConfigError("dataset", "file not found: " + p);
  return path;
}

fs::path prepare_out_dir(const std::string& out) {
  fs::path dir = out.empty() ? fs::path(".") : fs::path(out);
  fs::create_directories(dir);
  return dir;
}

bool is_ascad_layout(const fs::path& path) {
  for (const auto& e : describe_hdf5(path)) {
    if (e == std::string("group   ") + kAscadProfilingGroup) return true;
  }
  return false;
}

void write_run_json(const fs::path& dir, Json run) {
  run["tool"] = "deepsca";
  run["version"] = kToolVersion;
  std::ofstream out(dir / "run.json");
  out << run.dump(2) << '\n';
}

// --- dataset resolution ------------------------------------------------------

struct SplitSpec {
  std::size_t n_profiling = 0;  // 0: derive
  std::size_t n_attack = 0;
  std::uint64_t seed = 0;
};

struct LoadedData {
  TraceSet profiling;
  TraceSet attack;
  std::string hash;
  bool ascad = false;
  SplitSpec split;  // resolved
};

TraceSet take_first(const TraceSet& ts, std::size_t n) {
  if (n == 0 || n >= ts.n_traces) return ts;
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return ts.subset(idx);
}

LoadedData load_split(const fs::path& path, SplitSpec split) {
  LoadedData d;
  d.ascad = is_ascad_layout(path);
  if (d.ascad) {
    TraceSet prof = load_ascad_hdf5(path, kAscadProfilingGroup);
    TraceSet atk = load_ascad_hdf5(path, kAscadAttackGroup);
    d.hash = dataset_hash(prof) + dataset_hash(atk);
    if (split.n_profiling > prof.n_traces) {
      throw ConfigError("n_profiling", "exceeds the " + std::to_string(prof.n_traces) +
                                           " profiling traces in the file");
    }
    if (split.n_attack > atk.n_traces) {
      throw ConfigError("n_attack", "exceeds the " + std::to_string(atk.n_traces) +
                                        " attack traces in the file");
    }
    d.profiling = take_first(prof, split.n_profiling);
    d.attack = take_first(atk, split.n_attack);
    split.n_profiling = d.profiling.n_traces;
    split.n_attack = d.attack.n_traces;
  } else {
    TraceSet ts = load_canonical(path);
    d.hash = dataset_hash(ts);
    const std::size_t n = ts.n_traces;
    if (split.n_profiling + split.n_attack > n) {
      std::cerr << "note: requested split " << split.n_profiling << "/" << split.n_attack
                << " does not fit " << n << " traces; using 80/20\n";
      split.n_profiling = 0;
      split.n_attack = 0;
    }
    if (split.n_attack == 0 && split.n_profiling == 0) {
      split.n_attack = n / 5;
      split.n_profiling = n - split.n_attack;
    } else if (split.n_attack == 0) {
      split.n_attack = n - split.n_profiling;
    } else if (split.n_profiling == 0) {
      split.n_profiling = n - split.n_attack;
    }
    auto [p, a] = split_profiling_attack(ts, split.n_profiling, split.n_attack, split.seed);
    d.profiling = std::move(p);
    d.attack = std::move(a);
  }
  d.split = split;
  return d;
}

void apply_leakage_flags(LeakageModelSpec& lm, const std::optional<std::string>& kind,
                         const std::optional<int>& byte) {
  if (kind) {
    lm.kind = parse_leakage_kind(*kind);
    if (lm.kind == LeakageKind::kLastRoundHd && !byte) lm = LeakageModelSpec::last_round_hd(lm.i1);
  }
  if (byte) {
    if (lm.kind == LeakageKind::kLastRoundHd) {
      lm = LeakageModelSpec::last_round_hd(*byte);
    } else {
      lm.byte_index = *byte;
    }
  }
  lm.validate();
}

// --- synth -------------------------------------------------------------------

struct SynthArgs {
  std::optional<std::size_t> n_traces, n_samples, desync_max;
  std::optional<double> snr;
  std::vector<std::size_t> leaks;
  bool masked = false;
  std::string format = "canonical";
  std::optional<std::size_t> n_attack;
};

int cmd_synth(const Common& c, const SynthArgs& a) {
  Json file = load_config_file(c.config_path, "synth");
  SynthConfig cfg;
  if (auto s = opt_field<std::uint64_t>(file, "seed")) cfg.seed = *s;
  if (file.contains("synth")) from_json(file.at("synth"), cfg);
  if (a.n_traces) cfg.n_traces = *a.n_traces;
  if (a.n_samples) cfg.n_samples = *a.n_samples;
  if (a.desync_max) cfg.desync_max = *a.desync_max;
  if (a.snr) cfg.snr = *a.snr;
  if (!a.leaks.empty()) cfg.leak_positions = a.leaks;
  if (a.masked) cfg.masked = true;
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  const std::string format = resolve<std::string>(a.format == "canonical" ? std::nullopt
                                                                          : std::optional(a.format),
                                                  file, "format", "canonical");
  if (format != "canonical" && format != "ascad") {
    throw ConfigError("format", "expected canonical or ascad");
  }

  const TraceSet ts = synthesize(cfg);
  const fs::path dir = prepare_out_dir(resolve<std::string>(
      c.out.empty() ? std::nullopt : std::optional(c.out), file, "out", "."));
  const fs::path out = dir / "traces.h5";
  Json run = {{"command", "synth"}, {"synth", to_json(cfg)}, {"format", format},
              {"deterministic", c.deterministic}};
  if (format == "canonical") {
    save_canonical(out, ts);
  } else {
    const std::size_t n_attack =
        a.n_attack ? *a.n_attack : opt_field<std::size_t>(file, "n_attack").value_or(ts.n_traces / 5);
    if (n_attack >= ts.n_traces) throw ConfigError("n_attack", "must leave profiling traces");
    std::vector<std::size_t> pi, ai;
    for (std::size_t i = 0; i < ts.n_traces; ++i) (i < ts.n_traces - n_attack ? pi : ai).push_back(i);
    write_ascad_hdf5(out, ts.subset(pi), ts.subset(ai));
    run["n_attack"] = n_attack;
  }

  const LeakageModelSpec lm = cfg.masked ? LeakageModelSpec::sbox_xor_mask(cfg.byte_index)
                                         : LeakageModelSpec::sbox(cfg.byte_index);
  const std::vector<std::uint8_t> labels = compute_labels(ts, lm);
  std::vector<int> hw(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) hw[i] = aes::hamming_weight(labels[i]);
  const std::size_t col = cfg.leak_positions.front();
  const double snr = estimate_snr(ts, col, hw);
  std::cout << "wrote " << out.string() << " (" << ts.n_traces << " x " << ts.n_samples << ")\n"
            << "dataset hash " << dataset_hash(ts) << "\n"
            << "estimated SNR at sample " << col << ": " << snr << "\n";
  run["dataset_hash"] = dataset_hash(ts);
  run["outputs"] = {out.string()};
  write_run_json(dir, run);
  return kOk;
}

// --- convert -----------------------------------------------------------------

struct ConvertArgs {
  std::string input;
  std::string format = "ascad";
  std::string metadata;
  std::string sample_type = "float32";
  std::size_t n_samples = 0;
  std::string columns = "plaintext,key";
  std::string tag;
};

int cmd_convert(const Common& c, const ConvertArgs& a) {
  Json file = load_config_file(c.config_path, "convert");
  const fs::path dir = prepare_out_dir(resolve<std::string>(
      c.out.empty() ? std::nullopt : std::optional(c.out), file, "out", "."));
  Json run = {{"command", "convert"}, {"convert", {{"input", a.input}, {"format", a.format}}}};
  Json outputs = Json::array();
  if (a.format == "ascad") {
    const fs::path in = resolve_dataset_path(a.input);
    for (const char* group : {kAscadProfilingGroup, kAscadAttackGroup}) {
      TraceSet ts = load_ascad_hdf5(in, group);
      if (!a.tag.empty()) ts.source_tag = a.tag;
      const fs::path out =
          dir / (std::string(group == kAscadProfilingGroup ? "profiling" : "attack") + ".h5");
      save_canonical(out, ts);
      std::cout << "wrote " << out.string() << " (" << ts.n_traces << " x " << ts.n_samples
                << ")\n";
      outputs.push_back(out.string());
    }
  } else if (a.format == "raw") {
    RawImportConfig rc;
    rc.samples_path = resolve_dataset_path(a.input);
    rc.metadata_path = resolve_dataset_path(a.metadata);
    rc.sample_type = parse_raw_sample_type(a.sample_type);
    rc.n_samples = a.n_samples;
    rc.columns.clear();
    std::stringstream ss(a.columns);
    for (std::string col; std::getline(ss, col, ',');) rc.columns.push_back(col);
    if (!a.tag.empty()) rc.source_tag = a.tag;
    const TraceSet ts = import_raw(rc);
    const fs::path out = dir / "traces.h5";
    save_canonical(out, ts);
    std::cout << "wrote " << out.string() << " (" << ts.n_traces << " x " << ts.n_samples << ")\n";
    outputs.push_back(out.string());
    run["convert"]["metadata"] = a.metadata;
    run["convert"]["sample_type"] = a.sample_type;
    run["convert"]["n_samples"] = a.n_samples;
    run["convert"]["columns"] = a.columns;
  } else {
    throw ConfigError("format", "expected ascad or raw");
  }
  run["outputs"] = outputs;
  write_run_json(dir, run);
  return kOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string dataset;
  std::optional<std::string> preset;
  std::optional<std::size_t> epochs, batch_size, n_profiling, n_attack;
  std::optional<double> lr;
  std::optional<std::uint64_t> split_seed;
  std::optional<std::string> leakage;
  std::optional<int> byte;
  bool no_standardize = false;
  bool quiet = false;
};

int cmd_train(const Common& c, const TrainArgs& a) {
  Json file = load_config_file(c.config_path, "train");
  const std::optional<std::string> preset_name =
      a.preset ? a.preset : opt_field<std::string>(file, "preset");

  NetworkConfig net;
  TrainingConfig tc;
  LeakageModelSpec lm;
  SplitSpec split;
  if (preset_name) {
    const DatasetPreset p = dataset_preset(*preset_name);
    net = p.network;
    tc = p.training;
    lm = p.leakage;
    split.n_profiling = p.n_profiling;
    split.n_attack = p.n_attack;
  }
  if (auto s = opt_field<std::uint64_t>(file, "seed")) {
    tc.seed = net.init_seed = split.seed = *s;
  }
  if (file.contains("network")) from_json(file.at("network"), net);
  if (file.contains("training")) from_json(file.at("training"), tc);
  if (file.contains("leakage")) from_json(file.at("leakage"), lm);
  split.n_profiling = opt_field<std::size_t>(file, "n_profiling").value_or(split.n_profiling);
  split.n_attack = opt_field<std::size_t>(file, "n_attack").value_or(split.n_attack);
  split.seed = opt_field<std::uint64_t>(file, "split_seed").value_or(split.seed);

  if (c.seed) tc.seed = net.init_seed = split.seed = *c.seed;
  if (a.split_seed) split.seed = *a.split_seed;
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.lr) tc.optimizer.learning_rate = *a.lr;
  if (a.n_profiling) split.n_profiling = *a.n_profiling;
  if (a.n_attack) split.n_attack = *a.n_attack;
  apply_leakage_flags(lm, a.leakage, a.byte);
  const bool standardize = a.no_standardize ? false : opt_field<bool>(file, "standardize").value_or(true);
  tc.validate();

  const std::string ds_arg =
      a.dataset.empty() ? opt_field<std::string>(file, "dataset").value_or("") : a.dataset;
  const fs::path ds_path = resolve_dataset_path(ds_arg);
  const fs::path dir = prepare_out_dir(resolve<std::string>(
      c.out.empty() ? std::nullopt : std::optional(c.out), file, "out", "."));

  LoadedData data = load_split(ds_path, split);
  if (auto h = opt_field<std::string>(file, "dataset_hash"); h && *h != data.hash) {
    std::cerr << "warning: dataset hash " << data.hash << " differs from the config's " << *h << "\n";
  }
  if (net.input_length != data.profiling.n_samples) {
    if (net.input_length != 0) {
      std::cerr << "note: network input length " << net.input_length << " set to the dataset's "
                << data.profiling.n_samples << "\n";
    }
    net.input_length = data.profiling.n_samples;
  }
  net.validate();
  for (const auto& s : net.non_default_settings()) std::cerr << "note: non-default setting " << s << "\n";

  std::optional<Standardizer> stdz;
  TraceSet prof = data.profiling;
  if (standardize) {
    stdz = fit_standardizer(prof);
    prof = stdz->apply(prof);
  }
  const std::vector<std::uint8_t> labels = compute_labels(prof, lm);

  TrainHooks hooks;
  if (!a.quiet) {
    hooks.on_epoch = [&](const EpochStats& e) {
      std::cout << "epoch " << e.epoch << "/" << tc.epochs << " loss " << e.loss << " acc "
                << e.accuracy;
      if (e.val_loss) std::cout << " val_loss " << *e.val_loss << " val_acc " << *e.val_accuracy;
      std::cout << std::endl;
    };
  }
  TrainedModel model = train(build_attention_network(net), prof, labels, tc, hooks);
  model.standardizer = stdz;
  model.leakage = lm;
  model.provenance = {preset_name.value_or(""), fs::absolute(ds_path).string(), data.hash,
                      data.split.seed, data.split.n_profiling, data.split.n_attack};

  save_checkpoint(dir / "model.h5", model);
  write_history_csv(dir / "history.csv", model.history);

  Json run = {{"command", "train"},
              {"dataset", ds_path.string()},
              {"dataset_hash", data.hash},
              {"network", to_json(net)},
              {"training", to_json(tc)},
              {"leakage", to_json(lm)},
              {"n_profiling", data.split.n_profiling},
              {"n_attack", data.split.n_attack},
              {"split_seed", data.split.seed},
              {"standardize", standardize},
              {"deterministic", c.deterministic},
              {"out", dir.string()},
              {"outputs", {(dir / "model.h5").string(), (dir / "history.csv").string()}}};
  if (preset_name) run["preset"] = *preset_name;
  write_run_json(dir, run);
  std::cout << "wrote " << (dir / "model.h5").string() << "\n";
  return kOk;
}

// --- attack ------------------------------------------------------------------

struct AttackArgs {
  std::string model;
  std::string dataset;
  std::optional<std::size_t> repeats, max_traces;
  std::optional<std::string> threshold;
  std::optional<std::string> leakage;
  std::optional<int> byte;
};

/// Attack traces for a trained model: the recorded split when the dataset
/// matches the training run, otherwise the whole file (or its attack group).
TraceSet attack_set_for(const TrainedModel& model, const fs::path& path, std::string& hash) {
  const SplitSpec recorded{model.provenance.n_profiling, model.provenance.n_attack,
                           model.provenance.split_seed};
  if (is_ascad_layout(path)) {
    LoadedData d = load_split(path, {0, 0, 0});
    hash = d.hash;
    if (hash == model.provenance.dataset_hash && recorded.n_attack > 0) {
      return take_first(d.attack, recorded.n_attack);
    }
    return d.attack;
  }
  TraceSet ts = load_canonical(path);
  hash = dataset_hash(ts);
  if (hash == model.provenance.dataset_hash && recorded.n_attack > 0) {
    std::cout << "using the attack split recorded at training time (" << recorded.n_attack
              << " traces)\n";
    return split_profiling_attack(ts, recorded.n_profiling, recorded.n_attack, recorded.seed).second;
  }
  return ts;
}

int cmd_attack(const Common& c, const AttackArgs& a) {
  Json file = load_config_file(c.config_path, "attack");
  const std::string model_path = a.model.empty() ? opt_field<std::string>(file, "model").value_or("") : a.model;
  if (model_path.empty()) throw ConfigError("model", "no model checkpoint given");
  if (!fs::exists(model_path)) throw ConfigError("model", "file not found: " + model_path);
  const TrainedModel model = load_checkpoint(model_path);

  const std::string ds_arg =
      a.dataset.empty() ? opt_field<std::string>(file, "dataset").value_or("") : a.dataset;
  const fs::path ds_path = resolve_dataset_path(ds_arg);
  std::string hash;
  const TraceSet attack = attack_set_for(model, ds_path, hash);
  if (attack.n_samples != model.graph.input_length()) {
    throw ConfigError("dataset", "trace length " + std::to_string(attack.n_samples) +
                                     " does not match the model input length " +
                                     std::to_string(model.graph.input_length()));
  }

  LeakageModelSpec lm = model.leakage.value_or(LeakageModelSpec{});
  if (file.contains("leakage")) from_json(file.at("leakage"), lm);
  apply_leakage_flags(lm, a.leakage, a.byte);

  const std::size_t repeats = resolve<std::size_t>(a.repeats, file, "repeats", kDefaultRepeats);
  const std::size_t max_traces = resolve<std::size_t>(a.max_traces, file, "max_traces", attack.n_traces);
  const RankThreshold threshold =
      parse_rank_threshold(resolve<std::string>(a.threshold, file, "threshold", "zero"));
  const std::uint64_t seed = c.seed ? *c.seed : opt_field<std::uint64_t>(file, "attack_seed")
                                                    .value_or(opt_field<std::uint64_t>(file, "seed").value_or(0));
  const fs::path dir = prepare_out_dir(resolve<std::string>(
      c.out.empty() ? std::nullopt : std::optional(c.out), file, "out", "."));

  const RankCurve curve = average_rank_curve(model, attack, lm, max_traces, repeats, seed);
  const std::optional<std::size_t> needed = required_traces(curve, threshold);
  write_rank_curve_csv(dir / "rank_curve.csv", curve);
  write_text(dir / "rank_curve.svg",
             rank_curve_svg(curve, "average rank, " + lm.name() + ", " + rank_threshold_name(threshold)));

  std::cout << "leakage model: " << lm.name() << "\n"
            << "repeats: " << repeats << ", max traces: " << max_traces << "\n"
            << "final mean rank: " << curve.mean_rank.back() << "\n"
            << "required traces (" << rank_threshold_name(threshold) << "): "
            << (needed ? std::to_string(*needed) : std::string("not reached")) << "\n";

  Json run = {{"command", "attack"},
              {"model", model_path},
              {"dataset", ds_path.string()},
              {"dataset_hash", hash},
              {"leakage", to_json(lm)},
              {"repeats", repeats},
              {"max_traces", max_traces},
              {"threshold", threshold == RankThreshold::kZero ? "zero" : "below1"},
              {"attack_seed", seed},
              {"deterministic", c.deterministic},
              {"out", dir.string()},
              {"true_key_byte", true_key_byte(attack, lm)},
              {"required_traces", needed ? Json(*needed) : Json(nullptr)},
              {"outputs", {(dir / "rank_curve.csv").string(), (dir / "rank_curve.svg").string()}}};
  write_run_json(dir, run);
  return kOk;
}

// --- cpa ---------------------------------------------------------------------

struct AnalysisArgs {
  std::string dataset;
  std::string model;
  std::optional<std::string> group;
  std::optional<std::string> leakage;
  std::optional<int> byte;
  std::optional<std::string> power_model;
  std::optional<std::string> class_policy;
  std::optional<int> cls;
  std::optional<std::size_t> n_traces;
};

TraceSet load_analysis_set(const fs::path& path, const std::optional<std::string>& group) {
  if (is_ascad_layout(path)) return load_ascad_hdf5(path, group.value_or(kAscadAttackGroup));
  return load_canonical(path);
}

int cmd_cpa(const Common& c, const AnalysisArgs& a) {
  Json file = load_config_file(c.config_path, "cpa");
  const std::string ds_arg =
      a.dataset.empty() ? opt_field<std::string>(file, "dataset").value_or("") : a.dataset;
  const fs::path ds_path = resolve_dataset_path(ds_arg);
  const std::optional<std::string> group = a.group ? a.group : opt_field<std::string>(file, "group");
  TraceSet ts = load_analysis_set(ds_path, group);
  const std::size_t n = resolve<std::size_t>(a.n_traces, file, "n_traces", ts.n_traces);
  ts = take_first(ts, n);

  LeakageModelSpec lm;
  if (file.contains("leakage")) from_json(file.at("leakage"), lm);
  apply_leakage_flags(lm, a.leakage, a.byte);
  const PowerModel pm =
      parse_power_model(resolve<std::string>(a.power_model, file, "power_model", "hamming_weight"));
  const fs::path dir = prepare_out_dir(resolve<std::string>(
      c.out.empty() ? std::nullopt : std::optional(c.out), file, "out", "."));

  const CpaResult r = cpa(ts, lm, pm);
  write_cpa_csv(dir / "cpa.csv", r);
  Panel p{"CPA " + r.description, "sample", "correlation", {}, std::nullopt, std::nullopt};
  std::vector<double> x(r.n_samples);
  for (std::size_t t = 0; t < x.size(); ++t) x[t] = static_cast<double>(t);
  if (r.known_key) {
    const auto row = r.row(*r.known_key);
    p.series.push_back({"known key", x, {row.begin(), row.end()}, "#1f77b4"});
  }
  const Panel panels[1] = {p};
  write_text(dir / "cpa.svg", render_svg(panels));

  for (int k : r.degenerate_hypotheses) {
    std::cerr << "note: hypothesis " << k << " has constant modelled power; row set to 0\n";
  }
  Json run = {{"command", "cpa"},
              {"dataset", ds_path.string()},
              {"dataset_hash", dataset_hash(ts)},
              {"leakage", to_json(lm)},
              {"power_model", power_model_name(pm)},
              {"n_traces", ts.n_traces},
              {"deterministic", c.deterministic},
              {"out", dir.string()},
              {"outputs", {(dir / "cpa.csv").string(), (dir / "cpa.svg").string()}}};
  if (group) run["group"] = *group;
  if (r.known_key) {
    const auto row = r.row(*r.known_key);
    std::size_t best = 0;
    for (std::size_t t = 1; t < row.size(); ++t) {
      if (std::abs(row[t]) > std::abs(row[best])) best = t;
    }
    std::cout << "known key byte " << *r.known_key << ": peak |corr| " << std::abs(row[best])
              << " at sample " << best << "\n";
  }
  write_run_json(dir, run);
  return kOk;
}

// --- cgv ---------------------------------------------------------------------

int cmd_cgv(const Common& c, const AnalysisArgs& a) {
  Json file = load_config_file(c.config_path, "cgv");
  const std::string model_path = a.model.empty() ? opt_field<std::string>(file, "model").value_or("") : a.model;
  if (model_path.empty()) throw ConfigError("model", "no model checkpoint given");
  if (!fs::exists(model_path)) throw ConfigError("model", "file not found: " + model_path);
  const TrainedModel model = load_checkpoint(model_path);

  const std::string ds_arg =
      a.dataset.empty() ? opt_field<std::string>(file, "dataset").value_or("") : a.dataset;
  const fs::path ds_path = resolve_dataset_path(ds_arg);
  const std::optional<std::string> group = a.group ? a.group : opt_field<std::string>(file, "group");
  TraceSet raw = load_analysis_set(ds_path, group);
  const std::size_t n = resolve<std::size_t>(a.n_traces, file, "n_traces", std::min<std::size_t>(raw.n_traces, 1000));
  raw = take_first(raw, n);
  if (raw.n_samples != model.graph.input_length()) {
    throw ConfigError("dataset", "trace length " + std::to_string(raw.n_samples) +
                                     " does not match the model input length " +
                                     std::to_string(model.graph.input_length()));
  }
  const TraceSet input = model.standardizer ? model.standardizer->apply(raw) : raw;

  LeakageModelSpec lm = model.leakage.value_or(LeakageModelSpec{});
  if (file.contains("leakage")) from_json(file.at("leakage"), lm);
  apply_leakage_flags(lm, a.leakage, a.byte);

  const std::string policy_name = resolve<std::string>(a.class_policy, file, "class_policy", "predicted");
  CgvAggregateOptions opt;
  opt.policy = parse_class_policy(policy_name);
  opt.fixed_class = resolve<int>(a.cls, file, "class", 0);
  std::vector<std::uint8_t> labels;
  if (opt.policy == ClassPolicy::kTrue) {
    labels = compute_labels(raw, lm);
    opt.labels = labels;
  }
  const fs::path dir = prepare_out_dir(resolve<std::string>(
      c.out.empty() ? std::nullopt : std::optional(c.out), file, "out", "."));

  const WeightMap map = cgv_aggregate(model.graph, input, opt);
  write_weight_map_csv(dir / "cgv.csv", map);

  std::optional<CpaResult> cpa_result;
  try {
    if (raw.n_traces >= 3) cpa_result = cpa(raw, lm);
  } catch (const std::exception& e) {
    std::cerr << "note: CPA panel skipped (" << e.what() << ")\n";
  }
  const std::vector<double> mt = mean_trace(raw);
  write_text(dir / "cgv.svg", cgv_overlay_svg(mt, map, cpa_result ? &*cpa_result : nullptr,
                                              "class gradient map (" + policy_name + " class)"));

  std::size_t best = 0;
  for (std::size_t t = 1; t < map.expanded.size(); ++t) {
    if (map.expanded[t] > map.expanded[best]) best = t;
  }
  std::cout << "aggregated " << map.count << " traces; coarse length " << map.coarse.size()
            << ", expanded length " << map.expanded.size() << "; peak at sample " << best << "\n";

  Json run = {{"command", "cgv"},
              {"model", model_path},
              {"dataset", ds_path.string()},
              {"dataset_hash", dataset_hash(raw)},
              {"leakage", to_json(lm)},
              {"class_policy", policy_name},
              {"class", opt.fixed_class},
              {"n_traces", raw.n_traces},
              {"deterministic", c.deterministic},
              {"out", dir.string()},
              {"outputs", {(dir / "cgv.csv").string(), (dir / "cgv.svg").string()}}};
  if (group) run["group"] = *group;
  write_run_json(dir, run);
  return kOk;
}

// --- info --------------------------------------------------------------------

int cmd_info(const std::string& path_arg, const std::optional<std::string>& preset) {
  if (preset) {
    const DatasetPreset p = dataset_preset(*preset);
    Json j = {{"preset", p.name},
              {"network", to_json(p.network)},
              {"training", to_json(p.training)},
              {"leakage", to_json(p.leakage)},
              {"n_profiling", p.n_profiling},
              {"n_attack", p.n_attack}};
    std::cout << j.dump(2) << "\n";
    if (path_arg.empty()) return kOk;
  }
  const fs::path path = resolve_dataset_path(path_arg);
  const std::vector<std::string> entries = describe_hdf5(path);
  bool checkpoint = false;
  for (const auto& e : entries) checkpoint |= e == "group   params";
  if (checkpoint) {
    const TrainedModel m = load_checkpoint(path);
    std::cout << m.graph.summary() << "\n"
              << "parameters: " << m.graph.params().total_size() << "\n"
              << "epochs trained: " << m.history.size() << "\n"
              << "provenance: " << to_json(m.provenance).dump() << "\n";
    if (m.leakage) std::cout << "leakage: " << m.leakage->name() << "\n";
    return kOk;
  }
  for (const auto& e : entries) std::cout << e << "\n";
  if (is_ascad_layout(path)) {
    for (const char* g : {kAscadProfilingGroup, kAscadAttackGroup}) {
      const TraceSet ts = load_ascad_hdf5(path, g);
      std::cout << g << ": " << ts.n_traces << " x " << ts.n_samples
                << (ts.has_fixed_key() ? ", fixed key" : ", per-trace keys") << "\n";
    }
  } else {
    const TraceSet ts = load_canonical(path);
    std::cout << "traces: " << ts.n_traces << " x " << ts.n_samples << "\n"
              << "source: " << ts.source_tag << "\n"
              << "keys: " << (ts.has_fixed_key() ? "fixed " + key_hex(ts.fixed_key()) : "per trace")
              << "\n"
              << "masks: " << (ts.masks ? std::to_string(ts.masks->cols) + " columns" : "none") << "\n"
              << "hash: " << dataset_hash(ts) << "\n";
  }
  return kOk;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config_path, "JSON config file (flags take precedence)");
  sub->add_option("--seed", c.seed, "Master seed");
  sub->add_option("--out", c.out, "Output directory");
  sub->add_flag("--deterministic", c.deterministic,
                "Determinism mode (the backend is single-threaded and always deterministic)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Profiled side-channel attacks with an attention-based residual network"};
  app.require_subcommand(1);
  Common common;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Simulate leaking AES traces");
  add_common(s, common);
  s->add_option("--n-traces", synth.n_traces);
  s->add_option("--n-samples", synth.n_samples);
  s->add_option("--snr", synth.snr, "Signal-to-noise ratio (use a large value for near-noiseless)");
  s->add_option("--desync-max", synth.desync_max);
  s->add_option("--leak", synth.leaks, "Leak positions");
  s->add_flag("--masked", synth.masked);
  s->add_option("--format", synth.format, "canonical or ascad")->check(CLI::IsMember({"canonical", "ascad"}));
  s->add_option("--n-attack", synth.n_attack, "Attack group size for --format ascad");

  ConvertArgs conv;
  auto* cv = app.add_subcommand("convert", "Convert public datasets to the canonical container");
  add_common(cv, common);
  cv->add_option("--input", conv.input, "ASCAD-layout HDF5 file or raw sample file")->required();
  cv->add_option("--format", conv.format, "ascad or raw");
  cv->add_option("--metadata", conv.metadata, "Hex index file for raw input");
  cv->add_option("--sample-type", conv.sample_type);
  cv->add_option("--n-samples", conv.n_samples);
  cv->add_option("--columns", conv.columns, "Comma-separated metadata columns");
  cv->add_option("--tag", conv.tag, "Source tag");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train the attention network");
  add_common(t, common);
  t->add_option("--dataset", tr.dataset);
  t->add_option("--preset", tr.preset, "dpav4, aes_rd, aes_hd or ascad");
  t->add_option("--epochs", tr.epochs);
  t->add_option("--batch-size", tr.batch_size);
  t->add_option("--lr", tr.lr);
  t->add_option("--n-profiling", tr.n_profiling);
  t->add_option("--n-attack", tr.n_attack);
  t->add_option("--split-seed", tr.split_seed);
  t->add_option("--leakage", tr.leakage, "sbox, sbox_xor_mask or last_round_hd");
  t->add_option("--byte", tr.byte, "1-based byte position");
  t->add_flag("--no-standardize", tr.no_standardize);
  t->add_flag("--quiet", tr.quiet);

  AttackArgs at;
  auto* a = app.add_subcommand("attack", "Average rank curve of the true key");
  add_common(a, common);
  a->add_option("--model", at.model);
  a->add_option("--dataset", at.dataset);
  a->add_option("--repeats", at.repeats);
  a->add_option("--max-traces", at.max_traces);
  a->add_option("--threshold", at.threshold, "zero or below1");
  a->add_option("--leakage", at.leakage);
  a->add_option("--byte", at.byte);

  AnalysisArgs cp;
  auto* c = app.add_subcommand("cpa", "Correlation power analysis");
  add_common(c, common);
  c->add_option("--dataset", cp.dataset);
  c->add_option("--group", cp.group, "Group of an ASCAD-layout file");
  c->add_option("--leakage", cp.leakage);
  c->add_option("--byte", cp.byte);
  c->add_option("--power-model", cp.power_model, "hamming_weight or identity");
  c->add_option("--n-traces", cp.n_traces);

  AnalysisArgs cg;
  auto* g = app.add_subcommand("cgv", "Class gradient weight map");
  add_common(g, common);
  g->add_option("--model", cg.model);
  g->add_option("--dataset", cg.dataset);
  g->add_option("--group", cg.group);
  g->add_option("--leakage", cg.leakage);
  g->add_option("--byte", cg.byte);
  g->add_option("--class-policy", cg.class_policy, "predicted, true or fixed");
  g->add_option("--class", cg.cls);
  g->add_option("--n-traces", cg.n_traces);

  std::string info_path;
  std::optional<std::string> info_preset;
  auto* in = app.add_subcommand("info", "Describe a dataset, checkpoint or preset");
  in->add_option("path", info_path);
  in->add_option("--preset", info_preset);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*s) return cmd_synth(common, synth);
    if (*cv) return cmd_convert(common, conv);
    if (*t) return cmd_train(common, tr);
    if (*a) return cmd_attack(common, at);
    if (*c) return cmd_cpa(common, cp);
    if (*g) return cmd_cgv(common, cg);
    if (*in) return cmd_info(info_path, info_preset);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kUsage;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return kUsage;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kRuntime;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
