#pragma once

// Synthetic two-ring "fundus-like" data: a bright disc containing a brighter
// cup on a textured background. Geometry is drawn from seed-only streams so
// masks are identical across domains; style fields only touch pixels.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fsda/core/errors.hpp"
#include "fsda/core/imageio.hpp"
#include "fsda/core/rng.hpp"

namespace fsda {

struct DomainSpec {
  std::string name;
  float hue_shift = 0.f;    // [-0.5, 0.5]
  float contrast = 1.f;     // > 0
  float brightness = 0.f;   // [-0.3, 0.3]
  float texture_amp = 0.f;  // >= 0
  float vignette = 0.f;     // [0, 1]
  float blur_sigma = 0.f;   // >= 0, pixels

  void validate() const {
    check_cfg(!name.empty(), "DomainSpec: empty name");
    check_cfg(hue_shift >= -0.5f && hue_shift <= 0.5f, "DomainSpec: hue_shift out of [-0.5,0.5]");
    check_cfg(contrast > 0.f, "DomainSpec: contrast must be > 0");
    check_cfg(brightness >= -0.3f && brightness <= 0.3f, "DomainSpec: brightness out of [-0.3,0.3]");
    check_cfg(texture_amp >= 0.f, "DomainSpec: texture_amp must be >= 0");
    check_cfg(vignette >= 0.f && vignette <= 1.f, "DomainSpec: vignette out of [0,1]");
    check_cfg(blur_sigma >= 0.f, "DomainSpec: blur_sigma must be >= 0");
  }
};

struct FundusSample {
  ImageF image;  // (3,H,W) in [0,1]
  Mask mask;     // labels: 0 bg, 1 disc-only, 2 cup
  std::string domain;
  int seed = 0;
  std::string provenance;  // empty for rendered data; set for translated corpora
};

/// Shipped default domains (analog of three acquisition devices).
inline DomainSpec default_domain(const std::string& name) {
  if (name == "source") return {"source", 0.00f, 1.00f, 0.00f, 0.08f, 0.15f, 0.6f};
  if (name == "targetA") return {"targetA", 0.25f, 1.15f, -0.15f, 0.14f, 0.30f, 1.0f};
  if (name == "targetB") return {"targetB", -0.30f, 0.90f, 0.10f, 0.05f, 0.10f, 0.4f};
  throw ConfigError("unknown default domain: " + name);
}

namespace detail {

inline bool valid_render_size(int size) {
  if (size < 32 || size % 16 != 0) return false;
  int q = size / 16;
  return (q & (q - 1)) == 0;  // power-of-two multiple of 16
}

/// Two-octave value noise in [-1,1]-ish range, seeded, bilinear between
/// lattice points. Style-independent: the field depends only on the seed.
inline std::vector<float> value_noise(int size, uint64_t seed) {
  std::vector<float> out((size_t)size * size, 0.f);
  for (int octave = 0; octave < 2; ++octave) {
    int cell = octave == 0 ? 8 : 4;
    float amp = octave == 0 ? 1.f : 0.5f;
    int g = size / cell + 2;
    Rng rng(mix_seed(seed, 101 + octave));
    std::vector<float> grid((size_t)g * g);
    rng.fill_uniform(grid.data(), grid.size(), -1.f, 1.f);
    for (int y = 0; y < size; ++y) {
      float fy = (float)y / cell;
      int y0 = (int)fy;
      float wy = fy - y0;
      for (int x = 0; x < size; ++x) {
        float fx = (float)x / cell;
        int x0 = (int)fx;
        float wx = fx - x0;
        float v00 = grid[(size_t)y0 * g + x0], v01 = grid[(size_t)y0 * g + x0 + 1];
        float v10 = grid[(size_t)(y0 + 1) * g + x0], v11 = grid[(size_t)(y0 + 1) * g + x0 + 1];
        float v = (v00 * (1 - wx) + v01 * wx) * (1 - wy) + (v10 * (1 - wx) + v11 * wx) * wy;
        out[(size_t)y * size + x] += amp * v;
      }
    }
  }
  return out;
}

struct Geometry {
  float cx, cy, rdx, rdy;  // disc center and ellipse radii
  float ccx, ccy, rcx, rcy;  // cup
};

/// Geometry uses seed-only streams: identical for every DomainSpec.
inline Geometry draw_geometry(int size, uint64_t seed) {
  Rng rng(mix_seed(seed, 7));
  Geometry g;
  g.cx = (float)(size * rng.uniform(0.38, 0.62));
  g.cy = (float)(size * rng.uniform(0.38, 0.62));
  float rd = (float)(size * rng.uniform(0.16, 0.26));
  g.rdx = rd * (float)rng.uniform(0.9, 1.1);
  g.rdy = rd * (float)rng.uniform(0.9, 1.1);
  float ratio = (float)rng.uniform(0.40, 0.70);  // cup-to-disc
  g.rcx = g.rdx * ratio;
  g.rcy = g.rdy * ratio;
  // cup fully inside the disc: offset bounded by the radius slack
  float mx = (g.rdx - g.rcx) * 0.5f, my = (g.rdy - g.rcy) * 0.5f;
  g.ccx = g.cx + mx * (float)rng.uniform(-1.0, 1.0);
  g.ccy = g.cy + my * (float)rng.uniform(-1.0, 1.0);
  return g;
}

inline bool in_ellipse(float x, float y, float cx, float cy, float rx, float ry) {
  float dx = (x - cx) / rx, dy = (y - cy) / ry;
  return dx * dx + dy * dy <= 1.f;
}

}  // namespace detail

/// Renders one sample. Mask comes from geometry alone; style stages apply in
/// a fixed order (gray levels, texture, contrast, vignette, hue gains,
/// brightness, blur, clip) so the additive brightness survives to the mean.
inline FundusSample render_sample(const DomainSpec& spec, int size, int seed) {
  spec.validate();
  check_cfg(detail::valid_render_size(size), "render size must be >=32 and a power-of-two multiple of 16, got " +
                                                 std::to_string(size));
  auto geo = detail::draw_geometry(size, (uint64_t)seed);

  FundusSample s;
  s.domain = spec.name;
  s.seed = seed;
  s.mask = Mask(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float px = x + 0.5f, py = y + 0.5f;
      if (detail::in_ellipse(px, py, geo.ccx, geo.ccy, geo.rcx, geo.rcy))
        s.mask.at(y, x) = 2;
      else if (detail::in_ellipse(px, py, geo.cx, geo.cy, geo.rdx, geo.rdy))
        s.mask.at(y, x) = 1;
    }

  // gray levels + seeded texture
  constexpr float kBg = 0.35f, kDisc = 0.62f, kCup = 0.78f;
  std::vector<float> tex;
  if (spec.texture_amp > 0.f) tex = detail::value_noise(size, (uint64_t)seed);
  ImageF gray(1, size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      uint8_t l = s.mask.at(y, x);
      float v = l == 2 ? kCup : (l == 1 ? kDisc : kBg);
      if (!tex.empty() && l == 0) v += spec.texture_amp * tex[(size_t)y * size + x];
      gray.at(0, y, x) = v;
    }

  // contrast about mid-gray, multiplicative vignette
  float halfdiag = 0.5f * std::sqrt(2.f) * size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      float v = (gray.at(0, y, x) - 0.5f) * spec.contrast + 0.5f;
      float dx = x + 0.5f - size * 0.5f, dy = y + 0.5f - size * 0.5f;
      float r2 = (dx * dx + dy * dy) / (halfdiag * halfdiag);
      gray.at(0, y, x) = v * (1.f - spec.vignette * r2);
    }

  // channel gains encode the hue shift; mean gain stays 1
  float h = spec.hue_shift;
  float gains[3] = {1.f + 0.6f * h, 1.f - 0.1f * h * h, 1.f - 0.6f * h};
  s.image = ImageF(3, size, size);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) s.image.at(c, y, x) = gray.at(0, y, x) * gains[c] + spec.brightness;

  if (spec.blur_sigma > 0.f) s.image = gaussian_blur(s.image, spec.blur_sigma);
  clamp01(s.image);
  return s;
}

inline std::vector<FundusSample> make_dataset(const DomainSpec& spec, int n, int size, int seed) {
  check_arg(n >= 1, "make_dataset: n must be >= 1");
  std::vector<FundusSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) out.push_back(render_sample(spec, size, seed + i));
  return out;
}

/// Renders with per-sample random photometrics spanning the plausible device
/// range. A lens encoder pretrained on a single fixed style learns to ignore
/// style entirely (it never separates instances), which blinds every
/// feature-space distance to the one thing domain adaptation moves; this
/// corpus makes style an informative axis without touching any target split.
inline std::vector<FundusSample> make_style_randomized_dataset(int n, int size, int seed) {
  check_arg(n >= 1, "make_style_randomized_dataset: n must be >= 1");
  Rng rng(mix_seed((uint64_t)seed, 7700));
  std::vector<FundusSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    DomainSpec spec{"styled",
                    (float)rng.uniform(-0.40, 0.40),   // hue_shift
                    (float)rng.uniform(0.75, 1.30),    // contrast
                    (float)rng.uniform(-0.22, 0.22),   // brightness
                    (float)rng.uniform(0.03, 0.16),    // texture_amp
                    (float)rng.uniform(0.00, 0.40),    // vignette
                    (float)rng.uniform(0.20, 1.20)};   // blur_sigma
    out.push_back(render_sample(spec, size, (int)rng.uniform_int(0, (1 << 30) - 1)));
  }
  return out;
}

/// k images drawn without replacement; masks stripped (target is unlabeled).
inline std::vector<ImageF> few_shot_subset(const std::vector<FundusSample>& dataset, int k, int seed) {
  check_arg(k >= 1 && k <= (int)dataset.size(), "few_shot_subset: k out of range");
  Rng rng(mix_seed((uint64_t)seed, 77));
  auto idx = rng.sample_without_replacement((int)dataset.size(), k);
  std::vector<ImageF> out;
  out.reserve(k);
  for (int i : idx) out.push_back(dataset[i].image);
  return out;
}

// ---- persistence: directory of PFM images + PPM masks + TSV manifest ----

inline void write_dataset(const std::filesystem::path& dir, const std::vector<FundusSample>& samples) {
  std::filesystem::create_directories(dir);
  std::ofstream man(dir / "manifest.tsv", std::ios::trunc);
  if (!man) throw MissingArtifactError("cannot write manifest in " + dir.string());
  man << "filename\tdomain\tseed\tmask_filename\tprovenance\n";
  char buf[64];
  for (size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(buf, sizeof buf, "s%05zu", i);
    std::string img = std::string(buf) + ".pfm", msk = std::string(buf) + "_mask.ppm";
    write_pfm(dir / img, samples[i].image);
    bool labeled = samples[i].mask.w > 0;  // unlabeled exemplars carry no mask file
    if (labeled) write_mask_ppm(dir / msk, samples[i].mask);
    man << img << "\t" << samples[i].domain << "\t" << samples[i].seed << "\t" << (labeled ? msk : "-")
        << "\t" << (samples[i].provenance.empty() ? "-" : samples[i].provenance) << "\n";
  }
}

/// Raw-ingestion hook: loads any directory whose manifest matches the schema.
inline std::vector<FundusSample> load_dataset(const std::filesystem::path& dir) {
  std::ifstream man(dir / "manifest.tsv");
  if (!man) throw MissingInputError("no manifest.tsv in " + dir.string());
  std::string line;
  std::getline(man, line);  // header
  std::vector<FundusSample> out;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string img, domain, seed_s, msk, prov;
    if (!std::getline(ss, img, '\t') || !std::getline(ss, domain, '\t') || !std::getline(ss, seed_s, '\t') ||
        !std::getline(ss, msk, '\t'))
      throw MissingInputError("malformed manifest row in " + dir.string() + ": " + line);
    std::getline(ss, prov, '\t');
    FundusSample s;
    s.image = read_pfm(dir / img);
    if (msk != "-") s.mask = read_mask_ppm(dir / msk);
    s.domain = domain;
    s.seed = std::stoi(seed_s);
    s.provenance = (prov == "-" ? "" : prov);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw MissingInputError("empty dataset in " + dir.string());
  return out;
}

}  // namespace fsda
