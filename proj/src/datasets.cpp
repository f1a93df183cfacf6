#include "wali/datasets.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "wali/text_io.hpp"

namespace wali {
namespace {

constexpr double kColourEps = 1e-6;

void require(bool ok, const char* field, const char* why) {
  if (!ok) throw std::invalid_argument(std::string("invalid config field '") + field + "': " + why);
}

std::mt19937_64 seeded(std::initializer_list<uint64_t> parts) {
  std::vector<uint32_t> words;
  for (uint64_t p : parts) {
    words.push_back(static_cast<uint32_t>(p));
    words.push_back(static_cast<uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  // Explicit mapping keeps streams identical across standard libraries.
  const double u = static_cast<double>(rng() >> 11) * (1.0 / 9007199254740992.0);
  return lo + (hi - lo) * u;
}

std::array<double, 3> colour(std::mt19937_64& rng, double lo, double hi) {
  return {uniform(rng, lo, hi), uniform(rng, lo, hi), uniform(rng, lo, hi)};
}

bool in_ellipse(double u, double v, double cx, double cy, double rx, double ry) {
  const double a = (u - cx) / rx, b = (v - cy) / ry;
  return a * a + b * b < 1.0;
}

std::string channel_name(std::size_t c, std::size_t n) {
  if (n == 1) return "gray";
  static const char* names[] = {"r", "g", "b"};
  return c < 3 ? names[c] : std::to_string(c);
}

}  // namespace

torch::Tensor to_tensor(const Image& image) {
  auto t = torch::from_blob(const_cast<float*>(image.data.data()), {image.height, image.width, image.channels},
                            torch::kFloat);
  return t.permute({2, 0, 1}).contiguous().clone();
}

Image from_tensor(const torch::Tensor& chw) {
  auto t = chw.detach().to(torch::kFloat);
  if (t.dim() == 4 && t.size(0) == 1) t = t.squeeze(0);
  if (t.dim() != 3) throw std::invalid_argument("from_tensor expects a [C,H,W] tensor");
  t = t.permute({1, 2, 0}).contiguous();
  Image img;
  img.height = static_cast<int>(t.size(0));
  img.width = static_cast<int>(t.size(1));
  img.channels = static_cast<int>(t.size(2));
  img.data.assign(t.data_ptr<float>(), t.data_ptr<float>() + t.numel());
  return img;
}

torch::Tensor stack_images(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: no images");
  std::vector<torch::Tensor> ts;
  ts.reserve(images.size());
  for (const auto& img : images) {
    if (img.height != images[0].height || img.width != images[0].width || img.channels != images[0].channels) {
      throw std::invalid_argument("stack_images: images differ in shape");
    }
    ts.push_back(to_tensor(img));
  }
  return torch::stack(ts);
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 1 && image.channels != 3) throw std::invalid_argument("PNG output needs 1 or 3 channels");
  std::vector<png_byte> bytes(image.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = std::clamp(image.data[i], 0.0f, 1.0f);
    bytes[i] = static_cast<png_byte>(std::lround(v * 255.0f));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("cannot write " + path.string() + ": " + png.message);
  }
}

Image read_png(const std::filesystem::path& path) {
  png_image png;
  std::memset(&png, 0, sizeof png);
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw std::runtime_error("cannot read " + path.string() + ": " + png.message);
  }
  const bool gray = (png.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    throw std::runtime_error("cannot decode " + path.string() + ": " + png.message);
  }
  Image img;
  img.height = static_cast<int>(png.height);
  img.width = static_cast<int>(png.width);
  img.channels = gray ? 1 : 3;
  img.data.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = static_cast<float>(bytes[i]) / 255.0f;
  return img;
}

// --- procedural identities ------------------------------------------------------

std::vector<double> SyntheticIdentitySpec::to_vector() const {
  std::vector<double> v;
  for (const auto* c : {&skin, &hair, &iris, &lips}) v.insert(v.end(), c->begin(), c->end());
  v.insert(v.end(), {face_x, face_y, face_rx, face_ry, hairline, eye_spacing, eye_y, eye_radius, brow_gap, brow_tilt,
                     nose_length, mouth_y, mouth_half_width, mouth_thickness});
  return v;
}

SyntheticIdentitySpec identity_spec(uint64_t seed, int identity) {
  auto rng = seeded({seed, static_cast<uint64_t>(identity), 0x1d});
  SyntheticIdentitySpec s;
  const double tone = uniform(rng, 0.25, 0.95);
  s.skin = {std::min(1.0, tone + uniform(rng, 0.0, 0.12)), tone * uniform(rng, 0.7, 0.9), tone * uniform(rng, 0.5, 0.8)};
  s.hair = colour(rng, 0.0, 0.8);
  s.iris = colour(rng, 0.05, 0.7);
  s.lips = {uniform(rng, 0.45, 0.95), uniform(rng, 0.1, 0.45), uniform(rng, 0.15, 0.5)};
  s.face_x = uniform(rng, -0.06, 0.06);
  s.face_y = uniform(rng, -0.04, 0.08);
  s.face_rx = uniform(rng, 0.5, 0.72);
  s.face_ry = uniform(rng, 0.68, 0.88);
  s.hairline = uniform(rng, -0.72, -0.38);
  s.eye_spacing = uniform(rng, 0.2, 0.36);
  s.eye_y = uniform(rng, -0.22, -0.02);
  s.eye_radius = uniform(rng, 0.1, 0.18);
  s.brow_gap = uniform(rng, 0.14, 0.26);
  s.brow_tilt = uniform(rng, -0.35, 0.35);
  s.nose_length = uniform(rng, 0.15, 0.35);
  s.mouth_y = uniform(rng, 0.3, 0.5);
  s.mouth_half_width = uniform(rng, 0.14, 0.32);
  s.mouth_thickness = uniform(rng, 0.05, 0.11);
  return s;
}

SampleJitter sample_jitter(uint64_t seed, int identity, int sample) {
  auto rng = seeded({seed, static_cast<uint64_t>(identity), static_cast<uint64_t>(sample), 0x5a});
  SampleJitter j;
  j.dx = uniform(rng, -0.08, 0.08);
  j.dy = uniform(rng, -0.08, 0.08);
  j.scale = uniform(rng, 0.93, 1.07);
  j.brightness = uniform(rng, 0.88, 1.12);
  j.eye_open = uniform(rng, 0.55, 1.0);
  j.noise = uniform(rng, 0.0, 0.02);
  const double grey = uniform(rng, 0.15, 0.85);
  j.background = {grey + uniform(rng, -0.1, 0.1), grey + uniform(rng, -0.1, 0.1), grey + uniform(rng, -0.1, 0.1)};
  j.noise_seed = rng();
  return j;
}

Image render_identity(const SyntheticIdentitySpec& s, const SampleJitter& j, int size, int supersample) {
  if (size < 4 || supersample < 1) throw std::invalid_argument("render_identity: bad size or supersampling factor");
  Image img;
  img.height = img.width = size;
  img.channels = 3;
  img.data.assign(static_cast<std::size_t>(size) * size * 3, 0.0f);

  auto shade = [&](double u, double v) -> std::array<double, 3> {
    u = (u - j.dx) / j.scale;
    v = (v - j.dy) / j.scale;
    std::array<double, 3> c = j.background;
    const bool in_face = in_ellipse(u, v, s.face_x, s.face_y, s.face_rx, s.face_ry);
    const bool in_hair = in_ellipse(u, v, s.face_x, s.face_y - 0.04, s.face_rx * 1.14, s.face_ry * 1.1) &&
                         v < s.face_y + 0.1;
    if (in_hair) c = s.hair;
    if (in_face) c = v < s.face_y + s.hairline ? s.hair : s.skin;
    if (!in_face) return c;

    const double ey = s.face_y + s.eye_y;
    for (double side : {-1.0, 1.0}) {
      const double ex = s.face_x + side * s.eye_spacing;
      const double r = s.eye_radius;
      const double by = ey - s.brow_gap + side * s.brow_tilt * (u - ex);
      if (std::abs(u - ex) < r * 1.3 && std::abs(v - by) < 0.035) c = s.hair;
      if (in_ellipse(u, v, ex, ey, r, r * 0.75 * j.eye_open)) {
        c = {0.95, 0.95, 0.95};
        if (in_ellipse(u, v, ex, ey, r * 0.6, r * 0.6 * j.eye_open)) c = s.iris;
        if (in_ellipse(u, v, ex, ey, r * 0.25, r * 0.25 * j.eye_open)) c = {0.05, 0.05, 0.05};
      }
    }
    const double ny0 = ey + 0.06;
    if (v > ny0 && v < ny0 + s.nose_length && std::abs(u - s.face_x) < 0.03 + 0.12 * (v - ny0)) {
      c = {s.skin[0] * 0.78, s.skin[1] * 0.78, s.skin[2] * 0.78};
    }
    if (in_ellipse(u, v, s.face_x, s.face_y + s.mouth_y, s.mouth_half_width, s.mouth_thickness)) c = s.lips;
    return c;
  };

  std::mt19937_64 noise_rng(j.noise_seed);
  const double n_sub = static_cast<double>(supersample) * supersample;
  for (int r = 0; r < size; ++r) {
    for (int col = 0; col < size; ++col) {
      std::array<double, 3> acc{};
      for (int sr = 0; sr < supersample; ++sr) {
        for (int sc = 0; sc < supersample; ++sc) {
          const double u = -1.0 + 2.0 * (col + (sc + 0.5) / supersample) / size;
          const double v = -1.0 + 2.0 * (r + (sr + 0.5) / supersample) / size;
          const auto c = shade(u, v);
          for (int ch = 0; ch < 3; ++ch) acc[ch] += c[ch];
        }
      }
      for (int ch = 0; ch < 3; ++ch) {
        // Box-Muller on the explicit uniform mapping keeps noise reproducible.
        const double u1 = uniform(noise_rng, 1e-12, 1.0), u2 = uniform(noise_rng, 0.0, 1.0);
        const double gauss = std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
        const double v = acc[ch] / n_sub * j.brightness + j.noise * gauss;
        img.at(r, col, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

void SyntheticConfig::validate() const {
  require(n_identities >= 10, "n_identities", "must be >= 10");
  require(samples_per_identity >= 2, "samples_per_identity", "must be >= 2");
  require(image_size >= 8 && (image_size & (image_size - 1)) == 0, "image_size", "must be a power of two >= 8");
  require(supersample >= 1, "supersample", "must be >= 1");
}

void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"n_identities", c.n_identities}, {"samples_per_identity", c.samples_per_identity},
       {"image_size", c.image_size},     {"supersample", c.supersample},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  c = SyntheticConfig{};
  if (j.contains("n_identities")) c.n_identities = j.at("n_identities").get<int>();
  if (j.contains("samples_per_identity")) c.samples_per_identity = j.at("samples_per_identity").get<int>();
  if (j.contains("image_size")) c.image_size = j.at("image_size").get<int>();
  if (j.contains("supersample")) c.supersample = j.at("supersample").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
}

std::size_t Dataset::index_of(const std::string& id) const {
  auto it = std::find(image_ids.begin(), image_ids.end(), id);
  if (it == image_ids.end()) throw std::invalid_argument("unknown image id '" + id + "'");
  return static_cast<std::size_t>(it - image_ids.begin());
}

Dataset Dataset::subset(const std::vector<int>& identities) const {
  const std::set<int> keep(identities.begin(), identities.end());
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < size(); ++i) {
    if (keep.count(labels[i])) rows.push_back(i);
  }
  return select(rows);
}

Dataset Dataset::select(const std::vector<std::size_t>& rows) const {
  Dataset out;
  for (auto i : rows) {
    out.images.push_back(images.at(i));
    out.labels.push_back(labels.at(i));
    out.image_ids.push_back(image_ids.at(i));
  }
  return out;
}

std::string image_id(int identity, int sample) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "id%03d/s%02d", identity, sample);
  return buf;
}

Dataset generate_synthetic_dataset(const SyntheticConfig& cfg) {
  cfg.validate();
  Dataset ds;
  for (int id = 0; id < cfg.n_identities; ++id) {
    const auto spec = identity_spec(cfg.seed, id);
    for (int s = 0; s < cfg.samples_per_identity; ++s) {
      ds.images.push_back(render_identity(spec, sample_jitter(cfg.seed, id, s), cfg.image_size, cfg.supersample));
      ds.labels.push_back(id);
      ds.image_ids.push_back(image_id(id, s));
    }
  }
  return ds;
}

void write_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::ostringstream labels;
  labels << "image_id,path,label\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string rel = "images/" + ds.image_ids[i] + ".png";
    write_png(dir / rel, ds.images[i]);
    labels << ds.image_ids[i] << ',' << rel << ',' << ds.labels[i] << '\n';
  }
  write_text_file(dir / "labels.csv", labels.str());
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto rows = read_csv(dir / "labels.csv");
  Dataset ds;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() == 1 && r[0].empty()) continue;
    if (r.size() != 3) throw std::runtime_error((dir / "labels.csv").string() + ": row " + std::to_string(i + 1) +
                                                " must have image_id,path,label");
    ds.image_ids.push_back(r[0]);
    ds.images.push_back(read_png(dir / r[1]));
    ds.labels.push_back(std::stoi(r[2]));
  }
  if (ds.images.empty()) throw std::runtime_error("dataset at " + dir.string() + " is empty");
  return ds;
}

// --- morph pairs -------------------------------------------------------------------

std::map<int, Embedding> identity_mean_embeddings(const std::vector<Embedding>& embeddings,
                                                  const std::vector<int>& labels) {
  if (embeddings.size() != labels.size()) throw std::invalid_argument("embeddings/labels size mismatch");
  std::map<int, std::vector<double>> sums;
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    auto& s = sums[labels[i]];
    const auto u = embeddings[i].unit();
    if (s.empty()) s.assign(u.values.size(), 0.0);
    for (std::size_t k = 0; k < s.size(); ++k) s[k] += u.values[k];
  }
  std::map<int, Embedding> means;
  for (auto& [id, s] : sums) {
    Embedding e(std::move(s));
    if (!(e.norm() > 1e-12)) throw DegenerateInputError("mean embedding of identity " + std::to_string(id) + " is zero");
    means.emplace(id, e.unit());
  }
  return means;
}

std::vector<IdentityPair> rank_identity_pairs(const std::map<int, Embedding>& means) {
  std::vector<IdentityPair> pairs;
  for (auto a = means.begin(); a != means.end(); ++a) {
    for (auto b = std::next(a); b != means.end(); ++b) {
      pairs.push_back({a->first, b->first, cosine_similarity(a->second, b->second)});
    }
  }
  std::stable_sort(pairs.begin(), pairs.end(),
                   [](const IdentityPair& x, const IdentityPair& y) { return x.similarity > y.similarity; });
  return pairs;
}

void PairSelectionConfig::validate() const {
  require(identity_pairs >= 0, "identity_pairs", "must be >= 0");
  require(identity_pair_fraction > 0.0 && identity_pair_fraction <= 1.0, "identity_pair_fraction",
          "must lie in (0, 1]");
  require(n_pairs >= 0, "n_pairs", "must be >= 0");
}

void to_json(nlohmann::json& j, const PairSelectionConfig& c) {
  j = {{"identity_pairs", c.identity_pairs}, {"identity_pair_fraction", c.identity_pair_fraction},
       {"n_pairs", c.n_pairs},               {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, PairSelectionConfig& c) {
  c = PairSelectionConfig{};
  if (j.contains("identity_pairs")) c.identity_pairs = j.at("identity_pairs").get<int>();
  if (j.contains("identity_pair_fraction")) c.identity_pair_fraction = j.at("identity_pair_fraction").get<double>();
  if (j.contains("n_pairs")) c.n_pairs = j.at("n_pairs").get<int>();
  if (j.contains("seed")) c.seed = j.at("seed").get<uint64_t>();
}

MorphProtocol select_pairs(const Dataset& ds, const std::vector<Embedding>& embeddings,
                           const PairSelectionConfig& cfg) {
  cfg.validate();
  if (embeddings.size() != ds.size()) throw std::invalid_argument("select_pairs: one embedding per image required");
  const auto means = identity_mean_embeddings(embeddings, ds.labels);
  if (means.size() < 2) throw std::invalid_argument("select_pairs: needs at least 2 identities");
  const auto ranked = rank_identity_pairs(means);
  std::size_t keep = cfg.identity_pairs > 0
                         ? static_cast<std::size_t>(cfg.identity_pairs)
                         : std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(cfg.identity_pair_fraction *
                                                                                          ranked.size())));
  if (keep > ranked.size()) {
    throw std::invalid_argument("select_pairs: " + std::to_string(keep) + " identity pairs requested but only " +
                                std::to_string(ranked.size()) + " exist");
  }
  MorphProtocol protocol;
  if (cfg.n_pairs == 0) return protocol;

  // Seeded per-identity split into morph sources and probes.
  std::map<int, std::vector<std::string>> sources, probes;
  for (const auto& [id, mean] : means) {
    std::vector<std::string> rows;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      if (ds.labels[i] == id) rows.push_back(ds.image_ids[i]);
    }
    if (rows.size() < 2) {
      throw std::invalid_argument("select_pairs: identity " + std::to_string(id) + " needs at least 2 images");
    }
    auto rng = seeded({cfg.seed, static_cast<uint64_t>(id), 0x9e});
    std::shuffle(rows.begin(), rows.end(), rng);
    const std::size_t n_src = (rows.size() + 1) / 2;
    sources[id].assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_src));
    probes[id].assign(rows.begin() + static_cast<std::ptrdiff_t>(n_src), rows.end());
  }

  // Per identity pair: all source-image combinations in seeded order.
  std::vector<std::vector<std::pair<std::string, std::string>>> combos(keep);
  for (std::size_t k = 0; k < keep; ++k) {
    for (const auto& a : sources[ranked[k].a]) {
      for (const auto& b : sources[ranked[k].b]) combos[k].emplace_back(a, b);
    }
    auto rng = seeded({cfg.seed, static_cast<uint64_t>(ranked[k].a), static_cast<uint64_t>(ranked[k].b), 0x7c});
    std::shuffle(combos[k].begin(), combos[k].end(), rng);
  }
  for (int i = 0; i < cfg.n_pairs; ++i) {
    const std::size_t k = static_cast<std::size_t>(i) % keep;
    const std::size_t round = static_cast<std::size_t>(i) / keep;
    const auto& pair = ranked[k];
    const auto& [img_a, img_b] = combos[k][round % combos[k].size()];
    char id[32];
    std::snprintf(id, sizeof id, "p%04d", i);
    protocol.push_back({id, pair.a, pair.b, img_a, img_b, probes[pair.a].front(), probes[pair.b].front()});
  }
  return protocol;
}

MorphProtocol select_pairs(const Dataset& ds, const FrBackend& fr, const PairSelectionConfig& cfg) {
  return select_pairs(ds, fr.embed_all(ds.tensor()), cfg);
}

void write_protocol(const std::filesystem::path& path, const MorphProtocol& protocol) {
  std::ostringstream out;
  for (const auto& e : protocol) {
    nlohmann::json j = {{"pair_id", e.pair_id}, {"identity_a", e.identity_a}, {"identity_b", e.identity_b},
                        {"image_a", e.image_a}, {"image_b", e.image_b},       {"probe_a", e.probe_a},
                        {"probe_b", e.probe_b}};
    out << j.dump() << '\n';
  }
  write_text_file(path, out.str());
}

MorphProtocol read_protocol(const std::filesystem::path& path) {
  MorphProtocol protocol;
  auto pick = [](const nlohmann::json& j, const char* a, const char* b) -> std::string {
    if (j.contains(a)) return j.at(a).get<std::string>();
    if (j.contains(b)) return j.at(b).get<std::string>();
    return {};
  };
  int line_no = 0;
  for (const auto& line : read_lines(path)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    ProtocolEntry e;
    e.pair_id = j.value("pair_id", "p" + std::to_string(line_no - 1));
    e.identity_a = j.value("identity_a", -1);
    e.identity_b = j.value("identity_b", -1);
    e.image_a = pick(j, "image_a", "image1");
    e.image_b = pick(j, "image_b", "image2");
    e.probe_a = pick(j, "probe_a", "probe1");
    e.probe_b = pick(j, "probe_b", "probe2");
    if (e.image_a.empty() || e.image_b.empty()) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": missing image_a/image_b");
    }
    protocol.push_back(std::move(e));
  }
  return protocol;
}

// --- colour correction -----------------------------------------------------------

ChannelStats channel_stats(const Image& image) { return channel_stats(std::vector<Image>{image}); }

ChannelStats channel_stats(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("channel_stats: no images");
  const int c = images[0].channels;
  ChannelStats st{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  double n = 0;
  for (const auto& img : images) {
    if (img.channels != c) throw std::invalid_argument("channel_stats: images differ in channel count");
    for (std::size_t i = 0; i < img.data.size(); ++i) st.mean[i % c] += img.data[i];
    n += static_cast<double>(img.data.size() / c);
  }
  for (auto& m : st.mean) m /= n;
  for (const auto& img : images) {
    for (std::size_t i = 0; i < img.data.size(); ++i) {
      const double d = img.data[i] - st.mean[i % c];
      st.std[i % c] += d * d;
    }
  }
  for (auto& s : st.std) s = std::sqrt(s / n);
  return st;
}

Image colour_correct(const Image& image, const ChannelStats& reference) {
  const auto src = channel_stats(image);
  if (reference.mean.size() != src.mean.size() || reference.std.size() != src.mean.size()) {
    throw std::invalid_argument("colour_correct: reference has " + std::to_string(reference.mean.size()) +
                                " channels, image has " + std::to_string(src.mean.size()));
  }
  Image out = image;
  const auto c = static_cast<std::size_t>(image.channels);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const std::size_t ch = i % c;
    const double v = (image.data[i] - src.mean[ch]) / std::max(src.std[ch], kColourEps) * reference.std[ch] +
                     reference.mean[ch];
    out.data[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  return out;
}

nlohmann::json stats_to_json(const ChannelStats& stats) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t c = 0; c < stats.mean.size(); ++c) {
    j[channel_name(c, stats.mean.size())] = {{"mean", stats.mean[c]}, {"std", stats.std[c]}};
  }
  return j;
}

ChannelStats stats_from_json(const nlohmann::json& j) {
  ChannelStats st;
  const std::vector<std::string> keys = j.contains("gray") ? std::vector<std::string>{"gray"}
                                                          : std::vector<std::string>{"r", "g", "b"};
  for (const auto& k : keys) {
    if (!j.contains(k)) throw std::invalid_argument("reference stats: missing channel '" + k + "'");
    st.mean.push_back(j.at(k).at("mean").get<double>());
    st.std.push_back(j.at(k).at("std").get<double>());
  }
  return st;
}

}  // namespace wali
