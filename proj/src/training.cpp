#include "wali/training.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>
#include <fstream>
#include <iostream>

#include "wali/text_io.hpp"

namespace wali {
namespace {

void require(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw std::invalid_argument("invalid config field '" + field + "': " + why);
}

void validate_adam(const AdamSettings& a, const std::string& name) {
  require(std::isfinite(a.learning_rate) && a.learning_rate > 0.0, name + ".learning_rate", "must be > 0");
  require(a.beta1 >= 0.0 && a.beta1 < 1.0, name + ".beta1", "must lie in [0, 1)");
  require(a.beta2 >= 0.0 && a.beta2 < 1.0, name + ".beta2", "must lie in [0, 1)");
}

nlohmann::json adam_json(const AdamSettings& a) {
  return {{"learning_rate", a.learning_rate}, {"beta1", a.beta1}, {"beta2", a.beta2}};
}

AdamSettings adam_from(const nlohmann::json& j) {
  AdamSettings a;
  if (j.contains("learning_rate")) a.learning_rate = j.at("learning_rate").get<double>();
  if (j.contains("beta1")) a.beta1 = j.at("beta1").get<double>();
  if (j.contains("beta2")) a.beta2 = j.at("beta2").get<double>();
  return a;
}

std::unique_ptr<torch::optim::Adam> make_adam(torch::nn::Module& m, const AdamSettings& s) {
  return std::make_unique<torch::optim::Adam>(
      m.parameters(), torch::optim::AdamOptions(s.learning_rate).betas({s.beta1, s.beta2}));
}

void guard(const TrainingState& state, const char* name, double value) {
  if (!std::isfinite(value) || std::abs(value) > state.config.divergence_limit) {
    nlohmann::json snapshot = {{"term", name},
                               {"value", std::isfinite(value) ? nlohmann::json(value) : nlohmann::json(std::to_string(value))},
                               {"critic_updates", state.critic_updates},
                               {"generator_updates", state.generator_updates}};
    throw DivergenceError(std::string("training diverged: ") + name + " = " + std::to_string(value), snapshot);
  }
}

struct CriticPass {
  torch::Tensor z_real;
  torch::Tensor x_fake;
  torch::Tensor z_fake;
  torch::Tensor mu;  // encoder mean, only kept for generator updates
};

/// Critic update shared by both phases. Encoder/decoder forwards are tracked
/// for autograd only when the generator is updated on this step.
CriticPass critic_update(TrainingState& state, const torch::Tensor& x, bool track_generator, StepReport& report) {
  auto& m = state.model;
  const int64_t n = x.size(0);
  const auto opts = x.options();

  CriticPass pass;
  {
    std::optional<torch::NoGradGuard> no_grad;
    if (!track_generator) no_grad.emplace();
    auto enc = m.encoder(x);
    auto eps = torch::randn({n, m.config.latent_dim}, state.rng, opts);
    pass.z_real = reparameterize(enc, eps);
    pass.mu = enc.mu;
    pass.z_fake = torch::randn({n, m.config.latent_dim}, state.rng, opts);
    pass.x_fake = m.decoder(pass.z_fake);
  }

  auto critic = [&m](const torch::Tensor& xi, const torch::Tensor& zi) { return m.critic(xi, zi); };
  auto s_real = m.critic(x, pass.z_real.detach()).mean();
  auto s_fake = m.critic(pass.x_fake.detach(), pass.z_fake).mean();

  auto t = torch::rand({n}, state.rng, opts);
  auto x_hat = t.view({n, 1, 1, 1}) * x + (1.0 - t.view({n, 1, 1, 1})) * pass.x_fake.detach();
  auto z_hat = t.view({n, 1}) * pass.z_real.detach() + (1.0 - t.view({n, 1})) * pass.z_fake;
  auto gp = gradient_penalties(critic, x_hat, z_hat);
  auto loss = critic_loss(s_fake, s_real, gp.r_x, gp.r_z, state.config.weights);

  report.s_real = s_real.item<double>();
  report.s_fake = s_fake.item<double>();
  report.r_x = gp.r_x.item<double>();
  report.r_z = gp.r_z.item<double>();
  report.grad_norm_x = gp.mean_grad_norm_x;
  report.grad_norm_z = gp.mean_grad_norm_z;
  report.critic_loss = loss.item<double>();
  guard(state, "critic_loss", report.critic_loss);

  state.critic_optimizer->zero_grad();
  loss.backward();
  state.critic_optimizer->step();
  ++state.critic_updates;
  return pass;
}

void generator_update(TrainingState& state, const torch::Tensor& total, const LossReport& report) {
  guard(state, "generator_total", report.total);
  state.encoder_optimizer->zero_grad();
  state.decoder_optimizer->zero_grad();
  total.backward();
  state.encoder_optimizer->step();
  state.decoder_optimizer->step();
  ++state.generator_updates;
}

torch::Tensor adversarial_term(TrainingState& state, const torch::Tensor& x, const CriticPass& pass) {
  auto& m = state.model;
  auto s_real = m.critic(x, pass.z_real).mean();
  auto s_fake = m.critic(pass.x_fake, pass.z_fake).mean();
  return generator_adv_loss(s_fake, s_real);
}

bool generator_due(const TrainingState& state) {
  return (state.critic_updates + 1) % state.config.critic_updates_per_gen == 0;
}

void check_batch(const TrainingState& state, const torch::Tensor& batch) {
  check_image_shape(batch, state.model.config.channels, state.model.config.image_size, "training batch");
  if (batch.dim() != 4 || batch.size(0) < 2) throw std::invalid_argument("training batch needs at least 2 images");
}

void log_step(std::ofstream& log, int64_t step, const StepReport& r) {
  auto row = [&](const std::string& name, double v) { log << step << ',' << name << ',' << format_double(v) << '\n'; };
  row("critic_loss", r.critic_loss);
  row("s_real", r.s_real);
  row("s_fake", r.s_fake);
  row("r_x", r.r_x);
  row("r_z", r.r_z);
  row("grad_norm_x", r.grad_norm_x);
  row("grad_norm_z", r.grad_norm_z);
  if (r.generator_updated) {
    for (const auto& [name, v] : r.generator.terms) row(name, v);
    row("generator_total", r.generator.total);
  }
}

int64_t run_phase(TrainingState& state, const torch::Tensor& images, int epochs, const EmbedFn* fr,
                  std::ofstream& log, int64_t step, const char* phase) {
  const int64_t m = images.size(0);
  const int64_t n = std::min<int64_t>(state.config.batch_size, m);
  for (int epoch = 0; epoch < epochs; ++epoch) {
    auto order = torch::randperm(m, state.rng, torch::TensorOptions().dtype(torch::kLong));
    double gap = 0.0, fr_term = 0.0;
    int64_t batches = 0, fr_batches = 0;
    for (int64_t start = 0; start + n <= m; start += n) {
      auto batch = images.index_select(0, order.slice(0, start, start + n));
      auto report = fr ? finetune_step(state, batch, *fr, state.config.weights) : baseline_step(state, batch);
      log_step(log, step++, report);
      gap += std::abs(report.s_real - report.s_fake);
      ++batches;
      if (report.generator_updated && fr) {
        fr_term += report.generator.get("fr");
        ++fr_batches;
      }
    }
    if (state.config.verbose) {
      std::clog << "[" << phase << "] epoch " << epoch + 1 << "/" << epochs << " |s_real - s_fake| "
                << gap / std::max<int64_t>(batches, 1);
      if (fr_batches) std::clog << " L_FR " << fr_term / fr_batches;
      std::clog << std::endl;
    }
  }
  return step;
}

void check_dataset(const torch::Tensor& images, const NetworkConfig& net) {
  if (!images.defined() || images.dim() != 4 || images.size(0) == 0) throw std::invalid_argument("empty dataset");
  check_image_shape(images, net.channels, net.image_size, "dataset");
  if (images.size(0) < 2) throw std::invalid_argument("dataset needs at least 2 images");
}

nlohmann::json base_manifest(const TrainingConfig& cfg, const NetworkConfig& net, const std::string& config_text,
                             const TrainInputs& inputs) {
  nlohmann::json m;
  m["config"] = {{"network", net}, {"training", cfg}};
  m["seed"] = cfg.seed;
  m["config_hash"] = git_blob_hash(config_text);
  m["fr_backend_id"] = inputs.fr_backend_id;
  m["provenance"] = inputs.provenance;
  return m;
}

}  // namespace

// --- config -----------------------------------------------------------------

void TrainingConfig::validate() const {
  require(batch_size >= 2, "batch_size", "must be >= 2 (pairing needs two samples)");
  require(critic_updates_per_gen >= 1, "critic_updates_per_gen", "must be >= 1");
  require(baseline_epochs >= 0, "baseline_epochs", "must be >= 0");
  require(finetune_epochs >= 0, "finetune_epochs", "must be >= 0");
  validate_adam(critic_optimizer, "critic_optimizer");
  validate_adam(encoder_optimizer, "encoder_optimizer");
  validate_adam(decoder_optimizer, "decoder_optimizer");
  require(divergence_limit > 0.0, "divergence_limit", "must be > 0");
  weights.validate();
}

void to_json(nlohmann::json& j, const TrainingConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"critic_updates_per_gen", c.critic_updates_per_gen},
       {"baseline_epochs", c.baseline_epochs},
       {"finetune_epochs", c.finetune_epochs},
       {"critic_optimizer", adam_json(c.critic_optimizer)},
       {"encoder_optimizer", adam_json(c.encoder_optimizer)},
       {"decoder_optimizer", adam_json(c.decoder_optimizer)},
       {"weights", c.weights},
       {"seed", c.seed},
       {"divergence_limit", c.divergence_limit}};
}

void from_json(const nlohmann::json& j, TrainingConfig& c) {
  c = TrainingConfig{};
  if (j.contains("batch_size")) c.batch_size = j.at("batch_size").get<int>();
  if (j.contains("critic_updates_per_gen")) c.critic_updates_per_gen = j.at("critic_updates_per_gen").get<int>();
  if (j.contains("baseline_epochs")) c.baseline_epochs = j.at("baseline_epochs").get<int>();
  if (j.contains("finetune_epochs")) c.finetune_epochs = j.at("finetune_epochs").get<int>();
  if (j.contains("critic_optimizer")) c.critic_optimizer = adam_from(j.at("critic_optimizer"));
  if (j.contains("encoder_optimizer")) c.encoder_optimizer = adam_from(j.at("encoder_optimizer"));
  if (j.contains("decoder_optimizer")) c.decoder_optimizer = adam_from(j.at("decoder_optimizer"));
  if (j.contains("weights")) c.weights = j.at("weights").get<LossWeights>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
  if (j.contains("divergence_limit")) c.divergence_limit = j.at("divergence_limit").get<double>();
  if (j.contains("verbose")) c.verbose = j.at("verbose").get<bool>();
}

// --- model / state ------------------------------------------------------------

WaliModel::WaliModel(const NetworkConfig& cfg, uint64_t seed) : config(cfg) {
  config.validate();
  torch::manual_seed(seed);
  encoder = Encoder(config);
  decoder = Decoder(config);
  critic = Critic(config);
}

Checkpoint WaliModel::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.header = {{"kind", "wali"}, {"network", config}};
  capture_parameters(*encoder, "encoder.", ckpt);
  capture_parameters(*decoder, "decoder.", ckpt);
  capture_parameters(*critic, "critic.", ckpt);
  return ckpt;
}

WaliModel WaliModel::from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.header.value("kind", "") != "wali") throw std::runtime_error("checkpoint does not hold a WALI model");
  WaliModel model(ckpt.header.at("network").get<NetworkConfig>(), 0);
  restore_parameters(*model.encoder, "encoder.", ckpt);
  restore_parameters(*model.decoder, "decoder.", ckpt);
  restore_parameters(*model.critic, "critic.", ckpt);
  return model;
}

void WaliModel::to(torch::Dtype dtype) {
  encoder->to(dtype);
  decoder->to(dtype);
  critic->to(dtype);
}

void WaliModel::train_mode(bool on) {
  encoder->train(on);
  decoder->train(on);
  critic->train(on);
}

TrainingState::TrainingState(WaliModel m, const TrainingConfig& cfg)
    : model(std::move(m)), config(cfg), rng(at::make_generator<at::CPUGeneratorImpl>(cfg.seed)),
      alpha_rng(at::make_generator<at::CPUGeneratorImpl>(cfg.seed ^ 0x9e3779b97f4a7c15ULL)) {
  config.validate();
  critic_optimizer = make_adam(*model.critic, config.critic_optimizer);
  encoder_optimizer = make_adam(*model.encoder, config.encoder_optimizer);
  decoder_optimizer = make_adam(*model.decoder, config.decoder_optimizer);
}

std::vector<int64_t> morph_pairing(int64_t n) {
  if (n < 2) throw std::invalid_argument("morph pairing needs at least two samples");
  std::vector<int64_t> j(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) j[static_cast<std::size_t>(i)] = (i + 1) % n;
  return j;
}

// --- steps ------------------------------------------------------------------

StepReport baseline_step(TrainingState& state, const torch::Tensor& batch) {
  check_batch(state, batch);
  StepReport report;
  const bool gen = generator_due(state);
  auto pass = critic_update(state, batch, gen, report);
  if (gen) {
    GeneratorTerms terms;
    terms.adversarial = adversarial_term(state, batch, pass);
    auto loss = combined_generator_loss(terms, state.config.weights);
    generator_update(state, loss.total, loss.report);
    report.generator = loss.report;
    report.generator_updated = true;
  }
  return report;
}

StepReport finetune_step(TrainingState& state, const torch::Tensor& batch, const EmbedFn& fr, const LossWeights& w) {
  if (!fr) throw std::invalid_argument("finetune_step: FR backend unavailable");
  check_batch(state, batch);
  StepReport report;
  const bool gen = generator_due(state);
  auto pass = critic_update(state, batch, gen, report);
  if (!gen) return report;

  auto& m = state.model;
  const int64_t n = batch.size(0);
  auto pair = torch::tensor(morph_pairing(n), torch::kLong);

  GeneratorTerms terms;
  terms.adversarial = adversarial_term(state, batch, pass);

  const double alpha = torch::rand({1}, state.alpha_rng, torch::kDouble).item<double>();
  auto mu = pass.mu;
  auto mu_j = mu.index_select(0, pair);
  auto latents = torch::cat({mu, alpha * mu + (1.0 - alpha) * mu_j, 0.5 * mu + 0.5 * mu_j}, 0);
  auto decoded = m.decoder(latents).split(n, 0);
  const auto& x_recon = decoded[0];
  const auto& x_alpha = decoded[1];
  const auto& x_morph = decoded[2];

  torch::Tensor y, y_star_alpha, y_star;
  {
    torch::NoGradGuard no_grad;
    y = fr(batch);
    auto y_j = y.index_select(0, pair);
    y_star_alpha = worst_case_alpha_batch(y, y_j, alpha);
    y_star = worst_case_angular_batch(y, y_j);
  }

  terms.pixel = pixel_loss(batch, x_recon);
  terms.ffl = focal_frequency_loss(batch, x_recon);
  auto phi = fr(torch::cat({x_recon, x_alpha, x_morph}, 0)).split(n, 0);
  terms.fr = angular_distance(phi[0], y).mean();
  terms.fr_morph_alpha = angular_distance(phi[1], y_star_alpha).mean();
  terms.fr_morph = angular_distance(phi[2], y_star).mean();

  auto loss = combined_generator_loss(terms, w);
  generator_update(state, loss.total, loss.report);
  report.generator = loss.report;
  report.generator_updated = true;
  return report;
}

// --- full runs ----------------------------------------------------------------

TrainResult train(const NetworkConfig& net, const TrainingConfig& cfg, const torch::Tensor& images,
                  const EmbedFn& fr, const std::filesystem::path& out_dir, const TrainInputs& inputs) {
  net.validate();
  cfg.validate();
  check_dataset(images, net);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "checkpoints");
  fs::create_directories(out_dir / "logs");

  const bool do_finetune = cfg.finetune_epochs > 0 && static_cast<bool>(fr);
  const nlohmann::json config_json = {{"network", net}, {"training", cfg}, {"fr_backend_id", inputs.fr_backend_id}};
  const std::string config_text = config_json.dump(2) + "\n";
  write_text_file(out_dir / "config.json", config_text);

  TrainResult result;
  result.losses_csv = out_dir / "logs" / "losses.csv";
  std::ofstream log(result.losses_csv);
  log << "step,term,value\n";

  TrainingState state(WaliModel(net, cfg.seed), cfg);
  auto images_f = images.to(torch::kFloat);
  int64_t step = 0;
  try {
    step = run_phase(state, images_f, cfg.baseline_epochs, nullptr, log, step, "baseline");
    result.baseline_steps = step;
    result.baseline_checkpoint = out_dir / "checkpoints" / "baseline.bin";
    save_checkpoint(result.baseline_checkpoint, state.model.to_checkpoint());

    if (do_finetune) {
      TrainingState tune(std::move(state.model), cfg);
      tune.rng = state.rng;
      step = run_phase(tune, images_f, cfg.finetune_epochs, &fr, log, step, "finetune");
      result.finetune_steps = step - result.baseline_steps;
      result.finetune_checkpoint = out_dir / "checkpoints" / "finetune.bin";
      save_checkpoint(*result.finetune_checkpoint, tune.model.to_checkpoint());
    }
  } catch (const DivergenceError& e) {
    write_text_file(out_dir / "diagnostics.json", e.snapshot().dump(2) + "\n");
    throw;
  }

  auto manifest = base_manifest(cfg, net, config_text, inputs);
  manifest["baseline_steps"] = result.baseline_steps;
  manifest["finetune_steps"] = result.finetune_steps;
  manifest["finetuned"] = do_finetune;
  manifest["artifacts"] = {{"config", "config.json"},
                           {"baseline_checkpoint", "checkpoints/baseline.bin"},
                           {"finetune_checkpoint", do_finetune ? nlohmann::json("checkpoints/finetune.bin") : nlohmann::json()},
                           {"losses", "logs/losses.csv"}};
  result.manifest = out_dir / "manifest.json";
  write_text_file(result.manifest, manifest.dump(2) + "\n");
  return result;
}

TrainResult finetune(const Checkpoint& baseline, const TrainingConfig& cfg, const torch::Tensor& images,
                     const EmbedFn& fr, const std::filesystem::path& out_dir, const TrainInputs& inputs) {
  if (!fr) throw std::invalid_argument("finetune: FR backend unavailable");
  cfg.validate();
  auto model = WaliModel::from_checkpoint(baseline);
  const NetworkConfig net = model.config;
  check_dataset(images, net);
  namespace fs = std::filesystem;
  fs::create_directories(out_dir / "checkpoints");
  fs::create_directories(out_dir / "logs");

  const nlohmann::json config_json = {{"network", net}, {"training", cfg}, {"fr_backend_id", inputs.fr_backend_id}};
  const std::string config_text = config_json.dump(2) + "\n";
  write_text_file(out_dir / "config.json", config_text);

  TrainResult result;
  result.losses_csv = out_dir / "logs" / "losses.csv";
  std::ofstream log(result.losses_csv);
  log << "step,term,value\n";
  TrainingState state(std::move(model), cfg);
  try {
    result.finetune_steps = run_phase(state, images.to(torch::kFloat), cfg.finetune_epochs, &fr, log, 0, "finetune");
  } catch (const DivergenceError& e) {
    write_text_file(out_dir / "diagnostics.json", e.snapshot().dump(2) + "\n");
    throw;
  }
  result.finetune_checkpoint = out_dir / "checkpoints" / "finetune.bin";
  save_checkpoint(*result.finetune_checkpoint, state.model.to_checkpoint());

  auto manifest = base_manifest(cfg, net, config_text, inputs);
  manifest["baseline_steps"] = 0;
  manifest["finetune_steps"] = result.finetune_steps;
  manifest["finetuned"] = true;
  manifest["artifacts"] = {{"config", "config.json"},
                           {"finetune_checkpoint", "checkpoints/finetune.bin"},
                           {"losses", "logs/losses.csv"}};
  result.manifest = out_dir / "manifest.json";
  write_text_file(result.manifest, manifest.dump(2) + "\n");
  return result;
}

}  // namespace wali
