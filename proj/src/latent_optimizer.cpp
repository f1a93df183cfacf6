#include "wali/latent_optimizer.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace wali {
namespace {

torch::Tensor as_batch(const torch::Tensor& x) { return x.dim() == 3 ? x.unsqueeze(0) : x; }

void check_fr_set(const std::vector<WeightedFr>& fr_set) {
  for (const auto& fr : fr_set) {
    if (!fr.embed) throw std::invalid_argument("FR backend '" + fr.id + "' has no embedding function");
    if (!(fr.weight > 0.0) || !std::isfinite(fr.weight)) {
      throw std::invalid_argument("FR backend '" + fr.id + "' weight must be > 0");
    }
  }
}

/// Adam over a single latent, keeping the best iterate. `loss_fn` fills a
/// LossRecord and returns the differentiable total.
template <typename LossFn>
PhaseResult run_adam(const torch::Tensor& init, int steps, const OptimizationConfig& cfg, LossFn&& loss_fn) {
  PhaseResult result;
  auto z = init.detach().clone().requires_grad_(true);
  torch::optim::Adam adam({z}, torch::optim::AdamOptions(cfg.adam_alpha).betas({cfg.adam_beta1, cfg.adam_beta2}));
  result.latent = init.detach().clone();
  result.best_loss = INFINITY;

  auto evaluate = [&](bool keep_graph) {
    LossRecord rec;
    auto total = loss_fn(z, rec);
    rec.total = total.template item<double>();
    if (!std::isfinite(rec.total)) throw std::runtime_error("latent optimisation produced a non-finite loss");
    result.trajectory.push_back(rec);
    if (rec.total < result.best_loss) {
      result.best_loss = rec.total;
      result.latent = z.detach().clone();
    }
    if (!keep_graph) total = total.detach();
    return total;
  };

  for (int step = 0; step < steps; ++step) {
    auto total = evaluate(true);
    if (result.trajectory.back().total < cfg.early_stop_loss) return result;
    adam.zero_grad();
    total.backward();
    adam.step();
    ++result.steps_run;
  }
  torch::NoGradGuard no_grad;
  evaluate(false);
  return result;
}

double angle(const torch::Tensor& a, const torch::Tensor& b) {
  return angular_distance(a.flatten().unsqueeze(0).to(torch::kDouble), b.flatten().unsqueeze(0).to(torch::kDouble))
      .item<double>();
}

}  // namespace

WaliBackend::WaliBackend(Encoder encoder, Decoder decoder, std::string descriptor)
    : encoder_(std::move(encoder)), decoder_(std::move(decoder)), descriptor_(std::move(descriptor)) {
  for (auto& p : encoder_->parameters()) p.set_requires_grad(false);
  for (auto& p : decoder_->parameters()) p.set_requires_grad(false);
}

torch::Tensor WaliBackend::encode(const torch::Tensor& images) { return encoder_(as_batch(images)).mu; }

torch::Tensor WaliBackend::decode(const torch::Tensor& latents) {
  return decoder_(latents.dim() == 1 ? latents.unsqueeze(0) : latents);
}

int WaliBackend::latent_dim() const { return encoder_->config().latent_dim; }

void OptimizationConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* why) {
    if (!ok) throw std::invalid_argument(std::string("invalid config field '") + field + "': " + why);
  };
  require(steps_phase1 >= 0, "steps_phase1", "must be >= 0");
  require(steps_phase2 >= 0, "steps_phase2", "must be >= 0");
  require(adam_alpha > 0.0, "adam_alpha", "must be > 0");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1", "must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2", "must lie in [0, 1)");
  require(image_weight >= 0.0, "image_weight", "must be >= 0");
  require(embedding_weight >= 0.0, "embedding_weight", "must be >= 0");
  require(early_stop_loss >= 0.0, "early_stop_loss", "must be >= 0");
}

void to_json(nlohmann::json& j, const OptimizationConfig& c) {
  j = {{"steps_phase1", c.steps_phase1}, {"steps_phase2", c.steps_phase2}, {"adam_alpha", c.adam_alpha},
       {"adam_beta1", c.adam_beta1},     {"adam_beta2", c.adam_beta2},     {"image_weight", c.image_weight},
       {"embedding_weight", c.embedding_weight}, {"early_stop_loss", c.early_stop_loss}};
}

void from_json(const nlohmann::json& j, OptimizationConfig& c) {
  c = OptimizationConfig{};
  if (j.contains("steps_phase1")) c.steps_phase1 = j.at("steps_phase1").get<int>();
  if (j.contains("steps_phase2")) c.steps_phase2 = j.at("steps_phase2").get<int>();
  if (j.contains("adam_alpha")) c.adam_alpha = j.at("adam_alpha").get<double>();
  if (j.contains("adam_beta1")) c.adam_beta1 = j.at("adam_beta1").get<double>();
  if (j.contains("adam_beta2")) c.adam_beta2 = j.at("adam_beta2").get<double>();
  if (j.contains("image_weight")) c.image_weight = j.at("image_weight").get<double>();
  if (j.contains("embedding_weight")) c.embedding_weight = j.at("embedding_weight").get<double>();
  if (j.contains("early_stop_loss")) c.early_stop_loss = j.at("early_stop_loss").get<double>();
}

PhaseResult optimize_phase1(GeneratorBackend& backend, const std::vector<WeightedFr>& fr_set, const torch::Tensor& x,
                            const OptimizationConfig& cfg) {
  cfg.validate();
  check_fr_set(fr_set);
  auto image = as_batch(x).detach();
  if (image.size(0) != 1) throw std::invalid_argument("optimize_phase1 expects a single image");

  std::vector<torch::Tensor> targets;
  torch::Tensor init;
  {
    torch::NoGradGuard no_grad;
    for (const auto& fr : fr_set) targets.push_back(fr.embed(image));
    init = backend.encode(image).squeeze(0);
  }
  if (init.dim() != 1 || init.size(0) != backend.latent_dim()) {
    throw std::runtime_error("backend '" + backend.descriptor() + "' returned a latent of the wrong size");
  }

  return run_adam(init, cfg.steps_phase1, cfg, [&](const torch::Tensor& z, LossRecord& rec) {
    auto recon = backend.decode(z.unsqueeze(0));
    auto image_term = (image - recon).pow(2).sum();
    rec.image_term = image_term.item<double>();
    auto total = cfg.image_weight * image_term;
    for (std::size_t k = 0; k < fr_set.size(); ++k) {
      auto term = (targets[k] - fr_set[k].embed(recon)).pow(2).sum();
      rec.fr_terms.push_back(term.item<double>());
      total = total + fr_set[k].weight * cfg.embedding_weight * term;
    }
    return total;
  });
}

PhaseResult optimize_phase2(GeneratorBackend& backend, const std::vector<WeightedFr>& fr_set, const torch::Tensor& z1,
                            const torch::Tensor& z2, const std::vector<torch::Tensor>& targets,
                            const OptimizationConfig& cfg) {
  cfg.validate();
  check_fr_set(fr_set);
  if (targets.size() != fr_set.size()) throw std::invalid_argument("one worst-case target per FR backend required");
  if (!z1.sizes().equals(z2.sizes()) || z1.dim() != 1) throw std::invalid_argument("z1/z2 must be matching latents");

  std::vector<torch::Tensor> flat_targets;
  for (const auto& t : targets) flat_targets.push_back(t.detach().reshape({1, -1}));
  auto midpoint = 0.5 * (z1.detach() + z2.detach());

  return run_adam(midpoint, cfg.steps_phase2, cfg, [&](const torch::Tensor& z, LossRecord& rec) {
    auto morph = backend.decode(z.unsqueeze(0));
    torch::Tensor total = torch::zeros({}, morph.options());
    for (std::size_t k = 0; k < fr_set.size(); ++k) {
      auto y = fr_set[k].embed(morph);
      if (y.size(1) != flat_targets[k].size(1)) {
        std::ostringstream msg;
        msg << "target dimension " << flat_targets[k].size(1) << " does not match FR '" << fr_set[k].id
            << "' dimension " << y.size(1);
        throw std::invalid_argument(msg.str());
      }
      auto term = (flat_targets[k].to(y.dtype()) - y).pow(2).sum();
      rec.fr_terms.push_back(term.item<double>());
      total = total + fr_set[k].weight * term;
    }
    return total;
  });
}

MorphResult generate_morph(GeneratorBackend& backend, const std::vector<WeightedFr>& fr_set, const torch::Tensor& x1,
                           const torch::Tensor& x2, const OptimizationConfig& cfg) {
  MorphResult out;
  auto a = as_batch(x1).detach();
  auto b = as_batch(x2).detach();
  out.phase1_first = optimize_phase1(backend, fr_set, a, cfg);
  out.phase1_second = optimize_phase1(backend, fr_set, b, cfg);
  {
    torch::NoGradGuard no_grad;
    for (const auto& fr : fr_set) {
      out.targets.push_back(worst_case_angular_batch(fr.embed(a), fr.embed(b)).squeeze(0));
    }
  }
  out.phase2 = optimize_phase2(backend, fr_set, out.phase1_first.latent, out.phase1_second.latent, out.targets, cfg);

  torch::NoGradGuard no_grad;
  out.image = backend.decode(out.phase2.latent.unsqueeze(0)).squeeze(0);
  auto start = backend.decode((0.5 * (out.phase1_first.latent + out.phase1_second.latent)).unsqueeze(0));
  for (std::size_t k = 0; k < fr_set.size(); ++k) {
    out.target_distance.push_back(angle(fr_set[k].embed(out.image.unsqueeze(0)), out.targets[k]));
    out.initial_target_distance.push_back(angle(fr_set[k].embed(start), out.targets[k]));
  }
  return out;
}

nlohmann::json morph_metadata(const std::string& pair_id, const std::vector<WeightedFr>& fr_set,
                              const MorphResult& result) {
  nlohmann::json distances = nlohmann::json::object();
  nlohmann::json initial = nlohmann::json::object();
  for (std::size_t k = 0; k < fr_set.size(); ++k) {
    distances[fr_set[k].id] = result.target_distance[k];
    initial[fr_set[k].id] = result.initial_target_distance[k];
  }
  return {{"pair_id", pair_id},
          {"target_distance", distances},
          {"initial_target_distance", initial},
          {"steps", {{"phase1_first", result.phase1_first.steps_run},
                     {"phase1_second", result.phase1_second.steps_run},
                     {"phase2", result.phase2.steps_run}}},
          {"final_losses", {{"phase1_first", result.phase1_first.best_loss},
                            {"phase1_second", result.phase1_second.best_loss},
                            {"phase2", result.phase2.best_loss}}}};
}

}  // namespace wali
