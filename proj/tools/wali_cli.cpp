// Batch entry points. Every command reads an optional JSON config, applies
// --set overrides and --seed, runs, and leaves manifest.json and timing.json
// in its --out-dir.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "wali/datasets.hpp"
#include "wali/evaluation.hpp"
#include "wali/fr_registry.hpp"
#include "wali/latent_optimizer.hpp"
#include "wali/mad.hpp"
#include "wali/text_io.hpp"
#include "wali/training.hpp"

using namespace wali;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

/// Bad config or arguments; exits with code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// --- config schema -------------------------------------------------------------------

std::string type_name(const json& j) {
  if (j.is_number_unsigned()) return "unsigned integer";
  if (j.is_number_integer()) return "integer";
  return j.type_name();
}

bool compatible(const json& want, const json& got) {
  if (want.is_null()) return true;  // optional field
  if (want.is_number_float()) return got.is_number();
  if (want.is_number_unsigned()) return got.is_number_unsigned() || (got.is_number_integer() && got.get<int64_t>() >= 0);
  if (want.is_number_integer()) return got.is_number_integer();
  return want.type() == got.type();
}

/// Rejects unknown keys and type mismatches against the defaults, naming the field.
void check_schema(const json& defaults, const json& given, const std::string& path) {
  if (!compatible(defaults, given)) {
    throw ConfigError("config field '" + path + "' must be " + type_name(defaults) + ", got " + type_name(given));
  }
  if (defaults.is_object()) {
    for (const auto& [key, value] : given.items()) {
      const std::string sub = path.empty() ? key : path + "." + key;
      if (!defaults.contains(key)) throw ConfigError("unknown config field '" + sub + "'");
      check_schema(defaults.at(key), value, sub);
    }
  } else if (defaults.is_array() && !defaults.empty() && !defaults.front().is_object()) {
    for (std::size_t i = 0; i < given.size(); ++i) check_schema(defaults.front(), given[i], path + "[" + std::to_string(i) + "]");
  }
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return text;  // bare strings need no quotes on the command line
  }
}

void set_path(json& j, const std::string& dotted, json value) {
  json* node = &j;
  std::stringstream ss(dotted);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(ss, key, '.')) keys.push_back(key);
  if (keys.empty() || dotted.empty()) throw ConfigError("empty --set key");
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (node->is_null()) *node = json::object();
    if (!node->is_object()) throw ConfigError("config field '" + dotted + "' is not nested under an object");
    node = &(*node)[keys[i]];
  }
  if (node->is_null()) *node = json::object();
  if (!node->is_object()) throw ConfigError("config field '" + dotted + "' is not nested under an object");
  (*node)[keys.back()] = std::move(value);
}

/// Options every command shares.
struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<uint64_t> seed;
  std::string out_dir = "out";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "override a config key, e.g. --set training.batch_size=16");
  cmd->add_option("--seed", c.seed, "seed for every random choice of this command");
  cmd->add_option("--out-dir", c.out_dir, "output directory")->capture_default_str();
}

/// File config, then --set, then --seed at `seed_path`; checked against `defaults`.
json resolve_config(const Common& c, const json& defaults, const std::string& seed_path) {
  json cfg = json::object();
  if (!c.config_file.empty()) {
    try {
      cfg = json::parse(read_text_file(c.config_file));
    } catch (const json::parse_error& e) {
      throw ConfigError("config file " + c.config_file + " is not valid JSON: " + e.what());
    }
    if (!cfg.is_object()) throw ConfigError("config file must hold a JSON object");
  }
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + o + "'");
    set_path(cfg, o.substr(0, eq), parse_value(o.substr(eq + 1)));
  }
  if (c.seed) set_path(cfg, seed_path, *c.seed);
  check_schema(defaults, cfg, "");
  json merged = defaults;
  merged.merge_patch(cfg);
  return merged;
}

/// Converts a checked value, folding library exceptions into a named-field error.
template <typename T>
T as(const json& j, const std::string& name) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config field '" + name + "': " + e.what());
  }
}

template <typename T>
T section(const json& cfg, const std::string& key) {
  return as<T>(cfg.at(key), key);
}

template <typename T>
void validated(const T& value, const std::string& key) {
  try {
    value.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config field '" + key + "': " + e.what());
  }
}

// --- run bookkeeping -------------------------------------------------------------------

class Run {
 public:
  Run(std::string command, const Common& c, json config)
      : command_(std::move(command)), out_(c.out_dir), config_(std::move(config)), start_(Clock::now()) {
    fs::create_directories(out_);
    fs::remove(out_ / "manifest.json");
    fs::remove(out_ / "timing.json");
  }

  const fs::path& out() const { return out_; }

  void input(const std::string& role, const fs::path& path) {
    if (fs::is_regular_file(path)) {
      inputs_[role] = {{"path", path.string()}, {"hash", git_blob_hash_file(path)}};
    } else if (fs::is_directory(path)) {
      // Directory inputs hash their sorted file list with each file's content hash.
      std::vector<std::string> lines;
      for (const auto& e : fs::recursive_directory_iterator(path)) {
        if (!e.is_regular_file() || e.path().filename() == "manifest.json" || e.path().filename() == "timing.json") continue;
        lines.push_back(fs::relative(e.path(), path).generic_string() + " " + git_blob_hash_file(e.path()));
      }
      std::sort(lines.begin(), lines.end());
      std::string joined;
      for (const auto& l : lines) joined += l + "\n";
      inputs_[role] = {{"path", path.string()}, {"hash", git_blob_hash(joined)}};
    } else {
      throw std::invalid_argument("missing input " + role + ": " + path.string());
    }
  }

  void artifact(const std::string& name, const fs::path& path) { artifacts_[name] = fs::relative(path, out_).generic_string(); }

  /// Writes manifest.json, or merges into one the library already wrote.
  void finish(const json& extra = json::object()) {
    const auto manifest_path = out_ / "manifest.json";
    json m = fs::exists(manifest_path) ? json::parse(read_text_file(manifest_path)) : json::object();
    m["command"] = command_;
    m["config"] = config_;
    if (!m.contains("seed")) m["seed"] = find_seed(config_);
    m["inputs"] = inputs_;
    if (!m.contains("artifacts")) m["artifacts"] = json::object();
    m["artifacts"].update(artifacts_);
    m.update(extra);
    write_text_file(manifest_path, m.dump(2) + "\n");
    const double secs = std::chrono::duration<double>(Clock::now() - start_).count();
    write_text_file(out_ / "timing.json", json{{"command", command_}, {"wall_clock_seconds", secs}}.dump(2) + "\n");
  }

 private:
  using Clock = std::chrono::steady_clock;

  static json find_seed(const json& j) {
    if (!j.is_object()) return nullptr;
    if (j.contains("seed")) return j.at("seed");
    for (const auto& [k, v] : j.items()) {
      auto s = find_seed(v);
      if (!s.is_null()) return s;
    }
    return nullptr;
  }

  std::string command_;
  fs::path out_;
  json config_;
  json inputs_ = json::object();
  json artifacts_ = json::object();
  Clock::time_point start_;
};

// --- shared loaders --------------------------------------------------------------------

std::vector<RegistryEntry> registry_or_empty(const fs::path& path) {
  return fs::exists(path) ? read_registry(path) : std::vector<RegistryEntry>{};
}

const RegistryEntry& registry_entry(const std::vector<RegistryEntry>& reg, const std::string& id) {
  for (const auto& e : reg) {
    if (e.id == id) return e;
  }
  throw std::invalid_argument("FR backend '" + id + "' is not in the registry");
}

/// Replaces the entry with the same id, or appends. Checkpoint paths are stored
/// relative to the registry file when possible.
void upsert_registry(const fs::path& path, RegistryEntry entry) {
  auto reg = registry_or_empty(path);
  const auto base = fs::absolute(path).parent_path();
  entry.checkpoint = fs::proximate(fs::absolute(entry.checkpoint), base);
  for (auto& e : reg) e.checkpoint = fs::proximate(fs::absolute(e.checkpoint), base);
  bool replaced = false;
  for (auto& e : reg) {
    if (e.id == entry.id) {
      e = entry;
      replaced = true;
    }
  }
  if (!replaced) reg.push_back(entry);
  write_registry(path, reg);
}

std::vector<FrBackend> load_backends(const fs::path& registry, const std::vector<std::string>& ids) {
  const auto reg = read_registry(registry);
  std::vector<FrBackend> out;
  if (ids.empty()) {
    for (const auto& e : reg) out.push_back(load_backend(e));
  } else {
    for (const auto& id : ids) out.push_back(load_backend(registry_entry(reg, id)));
  }
  return out;
}

torch::Tensor dataset_images(const Dataset& ds, const MorphProtocol& p, std::string ProtocolEntry::*field) {
  std::vector<torch::Tensor> out;
  for (const auto& e : p) out.push_back(to_tensor(ds.images[ds.index_of(e.*field)]));
  return torch::stack(out);
}

// --- synth-data ------------------------------------------------------------------------

int cmd_synth_data(const Common& c) {
  const auto cfg = resolve_config(c, json(SyntheticConfig{}), "seed");
  const auto sc = as<SyntheticConfig>(cfg, "synthetic");
  validated(sc, "synthetic");
  Run run("synth-data", c, cfg);
  const auto ds = generate_synthetic_dataset(sc);
  write_dataset(run.out(), ds);
  run.finish({{"images", ds.size()}});
  std::cout << "wrote " << ds.size() << " images to " << run.out() << '\n';
  return 0;
}

// --- train-fr / calibrate ----------------------------------------------------------------

int cmd_train_fr(const Common& c, const std::string& data, const std::string& id, const std::string& registry) {
  json defaults{{"fr", ToyFrConfig{}}, {"train_identities", 0}, {"role", "black_box"}};
  const auto cfg = resolve_config(c, defaults, "fr.seed");
  const auto fc = section<ToyFrConfig>(cfg, "fr");
  validated(fc, "fr");
  const auto role = fr_role_from_string(cfg.at("role").get<std::string>());
  Run run("train-fr", c, cfg);
  run.input("data", data);
  auto ds = read_dataset(data);
  if (const int n = cfg.at("train_identities").get<int>(); n > 0) {
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) ids.push_back(i);
    ds = ds.subset(ids);
  }
  const auto fr = train_toy_fr(ds.tensor(), ds.labels, fc, id);
  const auto ckpt = run.out() / (id + ".bin");
  save_checkpoint(ckpt, fr.to_checkpoint());
  run.artifact("checkpoint", ckpt);
  if (!registry.empty()) upsert_registry(registry, RegistryEntry{id, ckpt, ScoreKind::angular_dissimilarity, std::nullopt, role});
  run.finish({{"fr_id", id}});
  std::cout << "trained " << id << " -> " << ckpt << '\n';
  return 0;
}

int cmd_calibrate(const Common& c, const std::string& data, const std::string& registry, const std::string& id) {
  json defaults{{"fmr_bound", 0.001}, {"impostor_pairs", 20000}, {"seed", 0}};
  const auto cfg = resolve_config(c, defaults, "seed");
  const double bound = cfg.at("fmr_bound").get<double>();
  if (!(bound > 0.0 && bound <= 1.0)) throw ConfigError("config field 'fmr_bound' must lie in (0, 1]");
  Run run("calibrate", c, cfg);
  run.input("data", data);
  run.input("registry", registry);
  const auto ds = read_dataset(data);
  auto entry = registry_entry(read_registry(registry), id);
  const auto fr = load_backend(entry);
  const auto scores = build_score_set(fr, fr.embed_all(ds.tensor()), ds.labels, cfg.at("impostor_pairs").get<int64_t>(),
                                      cfg.at("seed").get<uint64_t>());
  const auto cal = calibrate_threshold(scores, bound);
  entry.threshold = cal.threshold;
  upsert_registry(registry, entry);
  write_text_file(run.out() / "calibration.json",
                  json{{"fr_id", id}, {"threshold", cal.threshold}, {"fmr", cal.fmr}, {"fnmr", cal.fnmr},
                       {"genuine", scores.genuine.size()}, {"impostor", scores.impostor.size()}}
                          .dump(2) + "\n");
  write_det_csv(run.out() / "det.csv", det_points(scores), "fmr", "fnmr");
  run.artifact("calibration", run.out() / "calibration.json");
  run.artifact("det", run.out() / "det.csv");
  run.finish();
  std::cout << id << " threshold " << format_double(cal.threshold) << " FMR " << format_double(cal.fmr) << " FNMR "
            << format_double(cal.fnmr) << '\n';
  return 0;
}

// --- select-pairs -------------------------------------------------------------------------

int cmd_select_pairs(const Common& c, const std::string& data, const std::string& registry, const std::string& id) {
  const auto cfg = resolve_config(c, json(PairSelectionConfig{}), "seed");
  const auto pc = as<PairSelectionConfig>(cfg, "pairs");
  validated(pc, "pairs");
  Run run("select-pairs", c, cfg);
  run.input("data", data);
  run.input("registry", registry);
  const auto ds = read_dataset(data);
  const auto fr = load_backend(registry_entry(read_registry(registry), id));
  const auto protocol = select_pairs(ds, fr, pc);
  write_protocol(run.out() / "protocol.jsonl", protocol);
  run.artifact("protocol", run.out() / "protocol.jsonl");
  run.finish({{"pairs", protocol.size()}});
  std::cout << "selected " << protocol.size() << " pairs\n";
  return 0;
}

// --- train-wali / finetune-wali ---------------------------------------------------------

json wali_defaults() { return json{{"network", NetworkConfig{}}, {"training", TrainingConfig{}}}; }

EmbedFn optional_fr(const std::string& registry, const std::string& id, TrainInputs& in) {
  if (registry.empty() || id.empty()) return {};
  auto fr = load_backend(registry_entry(read_registry(registry), id));
  in.fr_backend_id = id;
  return fr.embed_fn();
}

int report_divergence(const DivergenceError& e) {
  std::cerr << "error: " << e.what() << '\n' << e.snapshot().dump(2) << '\n';
  return 3;
}

int cmd_train_wali(const Common& c, const std::string& data, const std::string& registry, const std::string& id) {
  const auto cfg = resolve_config(c, wali_defaults(), "training.seed");
  const auto net = section<NetworkConfig>(cfg, "network");
  const auto tc = section<TrainingConfig>(cfg, "training");
  validated(net, "network");
  validated(tc, "training");
  Run run("train-wali", c, cfg);
  run.input("data", data);
  TrainInputs in;
  const auto fr = optional_fr(registry, id, in);
  if (tc.finetune_epochs > 0 && !fr) throw ConfigError("config field 'training.finetune_epochs' > 0 needs --registry and --fr");
  if (!registry.empty()) run.input("registry", registry);
  in.provenance = {{"data", data}};
  try {
    train(net, tc, read_dataset(data).tensor(), fr, run.out(), in);
  } catch (const DivergenceError& e) {
    return report_divergence(e);
  }
  run.finish();
  std::cout << "trained WALI model in " << run.out() << '\n';
  return 0;
}

int cmd_finetune_wali(const Common& c, const std::string& data, const std::string& checkpoint,
                      const std::string& registry, const std::string& id) {
  const auto cfg = resolve_config(c, json{{"training", TrainingConfig{}}}, "training.seed");
  const auto tc = section<TrainingConfig>(cfg, "training");
  validated(tc, "training");
  if (tc.finetune_epochs < 1) throw ConfigError("config field 'training.finetune_epochs' must be >= 1");
  Run run("finetune-wali", c, cfg);
  run.input("data", data);
  run.input("checkpoint", checkpoint);
  run.input("registry", registry);
  TrainInputs in;
  const auto fr = optional_fr(registry, id, in);
  if (!fr) throw ConfigError("finetune-wali needs --registry and --fr");
  in.provenance = {{"data", data}, {"baseline_checkpoint", checkpoint}};
  try {
    finetune(load_checkpoint(checkpoint), tc, read_dataset(data).tensor(), fr, run.out(), in);
  } catch (const DivergenceError& e) {
    return report_divergence(e);
  }
  run.finish();
  std::cout << "finetuned WALI model in " << run.out() << '\n';
  return 0;
}

// --- gen-morphs --------------------------------------------------------------------------

int cmd_gen_morphs(const Common& c, const std::string& data, const std::string& checkpoint, const std::string& protocol_path,
                   const std::string& registry) {
  json defaults{{"optimization", OptimizationConfig{}},
                {"fr_weights", json::array()},
                {"colour_correct", false},
                {"seed", 0}};
  const auto cfg = resolve_config(c, defaults, "seed");
  const auto oc = section<OptimizationConfig>(cfg, "optimization");
  validated(oc, "optimization");
  Run run("gen-morphs", c, cfg);
  run.input("data", data);
  run.input("checkpoint", checkpoint);
  run.input("protocol", protocol_path);

  std::vector<WeightedFr> fr_set;
  if (!cfg.at("fr_weights").empty()) {
    if (registry.empty()) throw ConfigError("config field 'fr_weights' needs --registry");
    run.input("registry", registry);
    const auto reg = read_registry(registry);
    for (std::size_t i = 0; i < cfg.at("fr_weights").size(); ++i) {
      const auto& w = cfg.at("fr_weights")[i];
      const std::string field = "fr_weights[" + std::to_string(i) + "]";
      if (!w.is_object() || !w.contains("id") || !w.at("id").is_string()) throw ConfigError("config field '" + field + ".id' missing");
      const double weight = w.value("weight", 1.0);
      if (!(weight > 0.0)) throw ConfigError("config field '" + field + ".weight' must be > 0");
      const auto fr = load_backend(registry_entry(reg, w.at("id").get<std::string>()));
      fr_set.push_back({fr.id(), fr.embed_fn(), weight});
    }
  } else if (oc.steps_phase1 + oc.steps_phase2 > 0) {
    throw ConfigError("config field 'fr_weights' must name at least one FR backend when optimisation steps > 0");
  }

  torch::manual_seed(cfg.at("seed").get<uint64_t>());
  const auto ds = read_dataset(data);
  const auto protocol = read_protocol(protocol_path);
  auto model = WaliModel::from_checkpoint(load_checkpoint(checkpoint));
  model.train_mode(false);
  WaliBackend gen(model.encoder, model.decoder);
  const bool correct = cfg.at("colour_correct").get<bool>();
  fs::create_directories(run.out() / "morphs");
  std::ofstream meta(run.out() / "morphs.jsonl");
  for (const auto& e : protocol) {
    const auto& a = ds.images[ds.index_of(e.image_a)];
    const auto& b = ds.images[ds.index_of(e.image_b)];
    const auto r = generate_morph(gen, fr_set, to_tensor(a), to_tensor(b), oc);
    auto img = from_tensor(r.image.detach());
    if (correct) img = colour_correct(img, channel_stats(std::vector<Image>{a, b}));
    write_png(run.out() / "morphs" / (e.pair_id + ".png"), img);
    meta << morph_metadata(e.pair_id, fr_set, r).dump() << '\n';
  }
  run.artifact("morphs", run.out() / "morphs");
  run.artifact("metadata", run.out() / "morphs.jsonl");
  run.finish({{"morphs", protocol.size()}});
  std::cout << "generated " << protocol.size() << " morphs\n";
  return 0;
}

// --- eval-mmpmr / eval-bound ---------------------------------------------------------------

std::string fixed4(double v) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(4) << v;
  return ss.str();
}

struct ProbeEmbeddings {
  std::vector<Embedding> a, b;
};

ProbeEmbeddings probe_embeddings(const FrBackend& fr, const Dataset& ds, const MorphProtocol& p, bool sources) {
  const auto fa = sources ? &ProtocolEntry::image_a : &ProtocolEntry::probe_a;
  const auto fb = sources ? &ProtocolEntry::image_b : &ProtocolEntry::probe_b;
  return {fr.embed_all(dataset_images(ds, p, fa)), fr.embed_all(dataset_images(ds, p, fb))};
}

int cmd_eval_mmpmr(const Common& c, const std::string& scores, std::optional<double> threshold, const std::string& data,
                   const std::string& protocol_path, const std::string& morph_dir, const std::string& registry,
                   const std::vector<std::string>& fr_ids, const std::string& set_name) {
  const auto cfg = resolve_config(c, json{{"seed", 0}}, "seed");
  Run run("eval-mmpmr", c, cfg);
  if (!scores.empty()) {
    if (!threshold) throw ConfigError("--scores needs --threshold");
    run.input("scores", scores);
    const double m = mmpmr(read_score_table(scores), *threshold);
    write_mmpmr_report(run.out() / "mmpmr.csv", {{"table", set_name, *threshold, m}});
    run.artifact("report", run.out() / "mmpmr.csv");
    run.finish();
    std::cout << fixed4(m) << '\n';
    return 0;
  }
  if (data.empty() || protocol_path.empty() || morph_dir.empty() || registry.empty()) {
    throw ConfigError("eval-mmpmr needs either --scores or --data, --protocol, --morphs and --registry");
  }
  run.input("data", data);
  run.input("protocol", protocol_path);
  run.input("morphs", morph_dir);
  run.input("registry", registry);
  const auto ds = read_dataset(data);
  const auto protocol = read_protocol(protocol_path);
  std::vector<torch::Tensor> morphs;
  for (const auto& e : protocol) morphs.push_back(to_tensor(read_png(fs::path(morph_dir) / (e.pair_id + ".png"))));
  const auto morph_batch = torch::stack(morphs);
  std::vector<MmpmrReportRow> report;
  for (const auto& fr : load_backends(registry, fr_ids)) {
    const double t = threshold ? *threshold : fr.calibrated_threshold();
    const auto probes = probe_embeddings(fr, ds, protocol, false);
    const auto em = fr.embed_all(morph_batch);
    MorphScoreTable table;
    for (std::size_t i = 0; i < protocol.size(); ++i) table.push_back(score_morph(fr, protocol[i].pair_id, em[i], probes.a[i], probes.b[i]));
    const auto path = run.out() / ("scores_" + fr.id() + ".csv");
    write_score_table(path, table);
    run.artifact("scores_" + fr.id(), path);
    report.push_back({fr.id(), set_name, t, mmpmr(table, t)});
    std::cout << fr.id() << " " << set_name << " MMPMR " << fixed4(report.back().mmpmr) << '\n';
  }
  write_mmpmr_report(run.out() / "mmpmr.csv", report);
  run.artifact("report", run.out() / "mmpmr.csv");
  run.finish();
  return 0;
}

int cmd_eval_bound(const Common& c, const std::string& data, const std::string& protocol_path, const std::string& registry,
                   const std::vector<std::string>& fr_ids, const std::string& embeddings) {
  const auto cfg = resolve_config(c, json{{"embeddings", "probe"}, {"seed", 0}}, "seed");
  const std::string which = embeddings.empty() ? cfg.at("embeddings").get<std::string>() : embeddings;
  if (which != "probe" && which != "source") throw ConfigError("config field 'embeddings' must be 'probe' or 'source'");
  Run run("eval-bound", c, cfg);
  run.input("data", data);
  run.input("protocol", protocol_path);
  run.input("registry", registry);
  const auto ds = read_dataset(data);
  const auto protocol = read_protocol(protocol_path);
  std::vector<MmpmrReportRow> report;
  for (const auto& fr : load_backends(registry, fr_ids)) {
    const auto e = probe_embeddings(fr, ds, protocol, which == "source");
    std::vector<ProbePair> pairs;
    for (std::size_t i = 0; i < protocol.size(); ++i) pairs.push_back({protocol[i].pair_id, e.a[i], e.b[i]});
    const auto bound = worst_case_bound(fr, pairs);
    const auto path = run.out() / ("bound_" + fr.id() + ".csv");
    write_bounds_csv(path, fr.id(), bound);
    run.artifact("bound_" + fr.id(), path);
    report.push_back({fr.id(), "worst_case_bound", bound.threshold, bound.mmpmr});
    std::cout << fr.id() << " worst-case bound MMPMR " << fixed4(bound.mmpmr) << '\n';
  }
  write_mmpmr_report(run.out() / "bound.csv", report);
  run.artifact("report", run.out() / "bound.csv");
  run.finish();
  return 0;
}

// --- mad-train / mad-eval ------------------------------------------------------------------

/// Labelled list: CSV header "path,label" (S-MAD) or "suspect,probe,label"
/// (D-MAD); label is attack or bona_fide; paths relative to the list file.
struct LabelledList {
  std::vector<std::string> ids;
  std::vector<fs::path> suspects, probes;
  std::vector<bool> is_attack;
};

LabelledList read_list(const fs::path& path) {
  const auto rows = read_csv(path);
  if (rows.empty()) throw std::invalid_argument("empty list " + path.string());
  const bool differential = rows.front().size() == 3;
  LabelledList out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != rows.front().size()) throw std::invalid_argument(path.string() + ": row " + std::to_string(i) + " has wrong width");
    const auto& label = r.back();
    if (label != "attack" && label != "bona_fide") {
      throw std::invalid_argument(path.string() + ": row " + std::to_string(i) + " label must be attack or bona_fide");
    }
    out.ids.push_back(r[0]);
    out.suspects.push_back(path.parent_path() / r[0]);
    if (differential) out.probes.push_back(path.parent_path() / r[1]);
    out.is_attack.push_back(label == "attack");
  }
  return out;
}

std::vector<std::vector<double>> list_features(const LabelledList& list, const std::string& kind, const LbpConfig& lbp,
                                               const std::optional<FrBackend>& fr) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < list.suspects.size(); ++i) {
    const auto suspect = to_tensor(read_png(list.suspects[i]));
    if (kind == "lbp") {
      out.push_back(lbp_features(to_gray(suspect), lbp));
    } else {
      if (list.probes.empty()) throw std::invalid_argument("D-MAD needs a suspect,probe,label list");
      out.push_back(dmad_features(*fr, suspect, to_tensor(read_png(list.probes[i]))));
    }
  }
  return out;
}

int cmd_mad_train(const Common& c, const std::string& list_path, const std::string& registry, const std::string& fr_id) {
  json defaults{{"kind", "smad"}, {"lbp", LbpConfig{}}, {"svm", SvmConfig{}}};
  const auto cfg = resolve_config(c, defaults, "svm.seed");
  const auto kind = cfg.at("kind").get<std::string>();
  if (kind != "smad" && kind != "dmad") throw ConfigError("config field 'kind' must be 'smad' or 'dmad'");
  const auto lbp = section<LbpConfig>(cfg, "lbp");
  const auto svm = section<SvmConfig>(cfg, "svm");
  validated(lbp, "lbp");
  validated(svm, "svm");
  Run run("mad-train", c, cfg);
  run.input("list", list_path);
  std::optional<FrBackend> fr;
  if (kind == "dmad") {
    if (registry.empty() || fr_id.empty()) throw ConfigError("D-MAD needs --registry and --fr");
    run.input("registry", registry);
    fr = load_backend(registry_entry(read_registry(registry), fr_id));
  }
  const auto list = read_list(list_path);
  const auto feats = list_features(list, kind == "smad" ? "lbp" : "dmad", lbp, fr);
  auto clf = train_linear_svm(feats, list.is_attack, svm);
  clf.feature_kind = kind == "smad" ? "lbp" : "dmad";
  clf.feature_config = kind == "smad" ? json(lbp) : json{{"fr", fr_id}};
  save_classifier(run.out() / "classifier.json", clf);
  write_feature_csv(run.out() / "features.csv", list.ids, list.is_attack, feats);
  run.artifact("classifier", run.out() / "classifier.json");
  run.artifact("features", run.out() / "features.csv");
  run.finish();
  std::cout << "trained " << kind << " classifier on " << feats.size() << " samples\n";
  return 0;
}

int cmd_mad_eval(const Common& c, const std::string& classifier, const std::string& list_path, const std::string& registry) {
  const auto cfg = resolve_config(c, json{{"apcer_bounds", {0.01, 0.05, 0.1}}, {"seed", 0}}, "seed");
  Run run("mad-eval", c, cfg);
  run.input("classifier", classifier);
  run.input("list", list_path);
  const auto clf = load_classifier(classifier);
  std::optional<FrBackend> fr;
  LbpConfig lbp;
  if (clf.feature_kind == "dmad") {
    if (registry.empty()) throw ConfigError("D-MAD classifier needs --registry");
    run.input("registry", registry);
    fr = load_backend(registry_entry(read_registry(registry), clf.feature_config.at("fr").get<std::string>()));
  } else {
    lbp = clf.feature_config.get<LbpConfig>();
  }
  const auto list = read_list(list_path);
  const auto feats = list_features(list, clf.feature_kind, lbp, fr);
  const auto scores = mad_evaluate(clf, feats, list.is_attack);

  std::ostringstream csv;
  csv << "id,label,score\n";
  for (std::size_t i = 0; i < feats.size(); ++i) {
    csv << list.ids[i] << ',' << (list.is_attack[i] ? "attack" : "bona_fide") << ',' << format_double(clf.decision(feats[i]))
        << '\n';
  }
  write_text_file(run.out() / "scores.csv", csv.str());
  write_det_csv(run.out() / "det.csv", det_points(scores), "apcer", "bpcer");
  json metrics = json::object();
  for (const auto& b : cfg.at("apcer_bounds")) {
    const double v = bpcer_at_apcer(scores, b.get<double>());
    metrics["bpcer_at_apcer_" + format_double(b.get<double>())] = v;
    std::cout << "BPCER@APCER<=" << format_double(b.get<double>()) << " " << fixed4(v) << '\n';
  }
  write_text_file(run.out() / "metrics.json", metrics.dump(2) + "\n");
  run.artifact("scores", run.out() / "scores.csv");
  run.artifact("det", run.out() / "det.csv");
  run.artifact("metrics", run.out() / "metrics.json");
  run.finish();
  return 0;
}

// --- det-export --------------------------------------------------------------------------

int cmd_det_export(const Common& c, const std::string& mad_scores, const std::string& data, const std::string& registry,
                   const std::string& fr_id) {
  const auto cfg = resolve_config(c, json{{"impostor_pairs", 20000}, {"seed", 0}}, "seed");
  Run run("det-export", c, cfg);
  const auto path = run.out() / "det.csv";
  if (!mad_scores.empty()) {
    run.input("scores", mad_scores);
    MadScores s;
    const auto rows = read_csv(mad_scores);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      if (rows[i].size() != 3) throw std::invalid_argument(mad_scores + ": expected id,label,score rows");
      (rows[i][1] == "attack" ? s.attack : s.bona_fide).push_back(std::stod(rows[i][2]));
    }
    write_det_csv(path, det_points(s), "apcer", "bpcer");
  } else {
    if (data.empty() || registry.empty() || fr_id.empty()) {
      throw ConfigError("det-export needs --mad-scores, or --data, --registry and --fr");
    }
    run.input("data", data);
    run.input("registry", registry);
    const auto ds = read_dataset(data);
    const auto fr = load_backend(registry_entry(read_registry(registry), fr_id));
    const auto s = build_score_set(fr, fr.embed_all(ds.tensor()), ds.labels, cfg.at("impostor_pairs").get<int64_t>(),
                                   cfg.at("seed").get<uint64_t>());
    write_det_csv(path, det_points(s), "fmr", "fnmr");
  }
  run.artifact("det", path);
  run.finish();
  std::cout << "wrote " << path << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WALI morph generation and evaluation tools"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "torch intra-op threads")->capture_default_str();

  Common common;
  std::string data, registry, fr_id, checkpoint, protocol, scores, morphs, set_name = "morphs", embeddings, list,
      classifier, mad_scores, id;
  std::vector<std::string> fr_ids;
  std::optional<double> threshold;

  auto* synth = app.add_subcommand("synth-data", "render a synthetic identity dataset");
  auto* train_fr = app.add_subcommand("train-fr", "train a toy FR embedder");
  auto* calibrate = app.add_subcommand("calibrate", "calibrate an FR threshold at FMR < bound");
  auto* select = app.add_subcommand("select-pairs", "build a morph-pair protocol");
  auto* train_wali = app.add_subcommand("train-wali", "baseline training, then finetuning when an FR is given");
  auto* finetune_wali = app.add_subcommand("finetune-wali", "finetune from a baseline checkpoint");
  auto* gen = app.add_subcommand("gen-morphs", "two-phase latent optimisation for every protocol pair");
  auto* eval_mmpmr = app.add_subcommand("eval-mmpmr", "MMPMR of a morph set or a score table");
  auto* eval_bound = app.add_subcommand("eval-bound", "worst-case-embedding MMPMR bound");
  auto* mad_train = app.add_subcommand("mad-train", "train an S-MAD or D-MAD classifier");
  auto* mad_eval = app.add_subcommand("mad-eval", "score a labelled list with a MAD classifier");
  auto* det = app.add_subcommand("det-export", "DET curve points as CSV");
  for (auto* cmd : {synth, train_fr, calibrate, select, train_wali, finetune_wali, gen, eval_mmpmr, eval_bound, mad_train,
                    mad_eval, det}) {
    add_common(cmd, common);
  }

  train_fr->add_option("--data", data, "dataset directory")->required();
  train_fr->add_option("--id", id, "backend id")->required();
  train_fr->add_option("--registry", registry, "registry file to add the backend to");
  calibrate->add_option("--data", data)->required();
  calibrate->add_option("--registry", registry)->required();
  calibrate->add_option("--fr", fr_id)->required();
  select->add_option("--data", data)->required();
  select->add_option("--registry", registry)->required();
  select->add_option("--fr", fr_id, "backend ranking the identity pairs")->required();
  train_wali->add_option("--data", data)->required();
  train_wali->add_option("--registry", registry);
  train_wali->add_option("--fr", fr_id, "white-box backend for finetuning");
  finetune_wali->add_option("--data", data)->required();
  finetune_wali->add_option("--checkpoint", checkpoint, "baseline checkpoint")->required();
  finetune_wali->add_option("--registry", registry)->required();
  finetune_wali->add_option("--fr", fr_id)->required();
  gen->add_option("--data", data)->required();
  gen->add_option("--checkpoint", checkpoint)->required();
  gen->add_option("--protocol", protocol)->required();
  gen->add_option("--registry", registry);
  eval_mmpmr->add_option("--scores", scores, "score table CSV (morph_id,d1,d2)");
  eval_mmpmr->add_option("--threshold", threshold, "decision threshold; defaults to each backend's calibrated one");
  eval_mmpmr->add_option("--data", data);
  eval_mmpmr->add_option("--protocol", protocol);
  eval_mmpmr->add_option("--morphs", morphs, "directory of <pair_id>.png morphs");
  eval_mmpmr->add_option("--registry", registry);
  eval_mmpmr->add_option("--fr", fr_ids, "backends to evaluate (default: all)");
  eval_mmpmr->add_option("--set-name", set_name, "morph set label in the report")->capture_default_str();
  eval_bound->add_option("--data", data)->required();
  eval_bound->add_option("--protocol", protocol)->required();
  eval_bound->add_option("--registry", registry)->required();
  eval_bound->add_option("--fr", fr_ids);
  eval_bound->add_option("--embeddings", embeddings, "probe (default) or source images")
      ->check(CLI::IsMember({"probe", "source"}));
  mad_train->add_option("--list", list, "labelled CSV list")->required();
  mad_train->add_option("--registry", registry);
  mad_train->add_option("--fr", fr_id, "backend for D-MAD features");
  mad_eval->add_option("--classifier", classifier)->required();
  mad_eval->add_option("--list", list)->required();
  mad_eval->add_option("--registry", registry);
  det->add_option("--mad-scores", mad_scores, "scores.csv from mad-eval");
  det->add_option("--data", data);
  det->add_option("--registry", registry);
  det->add_option("--fr", fr_id);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  torch::set_num_threads(threads);
  try {
    if (*synth) return cmd_synth_data(common);
    if (*train_fr) return cmd_train_fr(common, data, id, registry);
    if (*calibrate) return cmd_calibrate(common, data, registry, fr_id);
    if (*select) return cmd_select_pairs(common, data, registry, fr_id);
    if (*train_wali) return cmd_train_wali(common, data, registry, fr_id);
    if (*finetune_wali) return cmd_finetune_wali(common, data, checkpoint, registry, fr_id);
    if (*gen) return cmd_gen_morphs(common, data, checkpoint, protocol, registry);
    if (*eval_mmpmr) return cmd_eval_mmpmr(common, scores, threshold, data, protocol, morphs, registry, fr_ids, set_name);
    if (*eval_bound) return cmd_eval_bound(common, data, protocol, registry, fr_ids, embeddings);
    if (*mad_train) return cmd_mad_train(common, list, registry, fr_id);
    if (*mad_eval) return cmd_mad_eval(common, classifier, list, registry);
    if (*det) return cmd_det_export(common, mad_scores, data, registry, fr_id);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
