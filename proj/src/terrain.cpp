#include "ht2/terrain.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace ht2 {

const char* terrain_type_name(TerrainType t) {
  switch (t) {
    case TerrainType::Flat: return "flat";
    case TerrainType::Rough: return "rough";
    case TerrainType::SmoothSlope: return "smooth_slope";
    case TerrainType::RoughSlope: return "rough_slope";
    case TerrainType::Obstacles: return "obstacles";
    case TerrainType::Hills: return "hills";
  }
  return "?";
}

TerrainType terrain_type_from_name(const std::string& name) {
  for (TerrainType t : {TerrainType::Flat, TerrainType::Rough, TerrainType::SmoothSlope,
                        TerrainType::RoughSlope, TerrainType::Obstacles, TerrainType::Hills})
    if (name == terrain_type_name(t)) return t;
  throw std::invalid_argument("unknown terrain type: " + name);
}

double Heightfield::height_at(double x) const {
  if (samples.size() < 2) throw std::invalid_argument("heightfield: needs >= 2 samples");
  double u = (x - x0) / spacing;
  if (u <= 0.0) return samples.front();
  double last = double(samples.size() - 1);
  if (u >= last) return samples.back();
  int i = int(u);
  double f = u - i;
  return samples[size_t(i)] * (1.0 - f) + samples[size_t(i) + 1] * f;
}

void Heightfield::to_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "x,height\n";
  for (size_t i = 0; i < samples.size(); ++i)
    out << x0 + spacing * double(i) << "," << samples[i] << "\n";
}

std::vector<TerrainSpec> default_ensemble() {
  return {
      {TerrainType::Flat, 0.125, 0.0, 0.0},
      {TerrainType::Rough, 0.125, 0.005, 0.025},
      {TerrainType::SmoothSlope, 0.125, 0.02, 0.20},
      {TerrainType::RoughSlope, 0.125, 0.02, 0.20},
      {TerrainType::Obstacles, 0.25, 0.005, 0.05},
      {TerrainType::Hills, 0.25, 0.55, 0.75},
  };
}

TerrainDraw sample_terrain_type(Rng& rng, const std::vector<TerrainSpec>& ensemble) {
  double total = 0.0;
  for (const auto& s : ensemble) total += s.fraction;
  if (std::fabs(total - 1.0) > 1e-9)
    throw std::invalid_argument("terrain ensemble fractions must sum to 1");
  double u = rng.uniform();
  double acc = 0.0;
  const TerrainSpec* pick = &ensemble.back();
  for (const auto& s : ensemble) {
    acc += s.fraction;
    if (u < acc) {
      pick = &s;
      break;
    }
  }
  TerrainDraw d;
  d.type = pick->type;
  d.difficulty = rng.uniform(pick->lo, pick->hi);
  if (d.type == TerrainType::SmoothSlope || d.type == TerrainType::RoughSlope)
    if (rng.bernoulli(0.5)) d.difficulty = -d.difficulty;
  return d;
}

namespace {

constexpr double kSpacing = 0.05;

void add_uniform_noise(Heightfield& hf, double amplitude, Rng& rng) {
  for (auto& s : hf.samples) s += rng.uniform(-amplitude, amplitude);
}

/// Value noise with cosine interpolation between control points; zeroed at the
/// spawn point so the robot always starts at elevation 0.
void fill_hills(Heightfield& hf, double scale, Rng& rng) {
  // Table gives hills a unitless "scale"; mapped to amplitude
  // A = 2*(scale - 0.5) m over an 8 m control wavelength.
  const double amplitude = 2.0 * (scale - 0.5);
  const double wavelength = 8.0;
  double span = hf.length();
  int n_ctrl = int(span / wavelength) + 3;
  std::vector<double> ctrl(static_cast<size_t>(n_ctrl));
  for (auto& c : ctrl) c = rng.uniform(-amplitude, amplitude);
  auto value = [&](double x) {
    double u = (x - hf.x0) / wavelength;
    int i = int(u);
    double f = u - i;
    double w = 0.5 - 0.5 * std::cos(M_PI * f);
    return ctrl[size_t(i)] * (1.0 - w) + ctrl[size_t(i) + 1] * w;
  };
  double base = value(0.0);
  for (size_t i = 0; i < hf.samples.size(); ++i)
    hf.samples[i] = value(hf.x0 + kSpacing * double(i)) - base;
}

/// Random-width steps with heights in [0, difficulty]; a short flat pad around
/// the spawn point keeps resets well-posed.
void fill_obstacles(Heightfield& hf, double difficulty, Rng& rng) {
  double x = hf.x0;
  size_t i = 0;
  while (i < hf.samples.size()) {
    double width = rng.uniform(0.2, 1.0);
    double h = rng.uniform(0.0, difficulty);
    double end = x + width;
    while (i < hf.samples.size() && hf.x0 + kSpacing * double(i) < end) {
      double xi = hf.x0 + kSpacing * double(i);
      hf.samples[i] = (xi > -1.0 && xi < 1.0) ? 0.0 : h;
      ++i;
    }
    x = end;
  }
}

}  // namespace

Heightfield generate_terrain(const TerrainDraw& draw, Rng& rng) {
  Heightfield hf;
  hf.spacing = kSpacing;
  hf.x0 = -20.0;
  hf.samples.assign(size_t(40.0 / kSpacing) + 1, 0.0);
  hf.type = draw.type;
  hf.difficulty = draw.difficulty;
  switch (draw.type) {
    case TerrainType::Flat:
      break;
    case TerrainType::Rough:
      add_uniform_noise(hf, draw.difficulty, rng);
      break;
    case TerrainType::SmoothSlope:
      for (size_t i = 0; i < hf.samples.size(); ++i)
        hf.samples[i] = draw.difficulty * (hf.x0 + kSpacing * double(i));
      break;
    case TerrainType::RoughSlope: {
      for (size_t i = 0; i < hf.samples.size(); ++i)
        hf.samples[i] = draw.difficulty * (hf.x0 + kSpacing * double(i));
      double amp = rng.uniform(0.005, 0.025);
      add_uniform_noise(hf, amp, rng);
      break;
    }
    case TerrainType::Obstacles:
      fill_obstacles(hf, draw.difficulty, rng);
      break;
    case TerrainType::Hills:
      fill_hills(hf, draw.difficulty, rng);
      break;
  }
  return hf;
}

Heightfield make_eval_field(const TerrainDraw& draw, Rng& rng) {
  Heightfield hf;
  hf.spacing = kSpacing;
  hf.x0 = -2.0;
  hf.samples.assign(size_t(24.0 / kSpacing) + 1, 0.0);
  hf.type = draw.type;
  hf.difficulty = draw.difficulty;

  Heightfield section = generate_terrain(draw, rng);  // reuse the generators
  auto section_height = [&](double local_x) {
    return section.height_at(local_x) - section.height_at(0.0);
  };
  for (size_t i = 0; i < hf.samples.size(); ++i) {
    double x = hf.x0 + kSpacing * double(i);
    if (x <= 5.0)
      hf.samples[i] = 0.0;
    else if (x < 15.0)
      hf.samples[i] = section_height(x - 5.0);
    else
      hf.samples[i] = section_height(10.0);
  }
  return hf;
}

}  // namespace ht2
