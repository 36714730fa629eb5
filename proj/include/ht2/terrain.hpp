#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ht2/rng.hpp"

namespace ht2 {

enum class TerrainType { Flat, Rough, SmoothSlope, RoughSlope, Obstacles, Hills };

const char* terrain_type_name(TerrainType t);
TerrainType terrain_type_from_name(const std::string& name);

/// 1-D sampled terrain elevation. Samples start at x0 with uniform spacing.
struct Heightfield {
  double spacing = 0.05;
  double x0 = -20.0;
  std::vector<double> samples;
  TerrainType type = TerrainType::Flat;
  double difficulty = 0.0;  // signed grade for slopes, amplitude/height otherwise
  std::optional<double> friction_override;
  std::optional<double> contact_stiffness_scale;  // soft-ground probe uses 0.1

  double length() const { return spacing * double(samples.size() - 1); }

  /// Linear interpolation between samples, clamped beyond the ends.
  double height_at(double x) const;

  void to_csv(const std::string& path) const;
};

/// One entry of the training ensemble: sampling fraction and difficulty range.
struct TerrainSpec {
  TerrainType type = TerrainType::Flat;
  double fraction = 1.0;
  double lo = 0.0;
  double hi = 0.0;
};

/// Concrete draw: type plus the sampled difficulty (signed for slopes).
struct TerrainDraw {
  TerrainType type = TerrainType::Flat;
  double difficulty = 0.0;
};

/// Training terrain mix: flat 12.5%, rough 12.5% (amplitude up to 2.5 cm),
/// smooth slope 12.5% (2-20% grade), rough slope 12.5%, obstacles 25%
/// (heights up to 5 cm), hills 25% (scale 0.55-0.75).
std::vector<TerrainSpec> default_ensemble();

/// Draws a terrain type by ensemble fraction and a difficulty uniform in its
/// range (slopes get a random sign). Fractions must sum to 1 (+-1e-9).
TerrainDraw sample_terrain_type(Rng& rng, const std::vector<TerrainSpec>& ensemble);

/// 40 m heightfield of the given type centered on the spawn point x = 0.
Heightfield generate_terrain(const TerrainDraw& draw, Rng& rng);

/// Evaluation layout: 5 m flat, 10 m of test terrain, 5 m flat (plus margin).
/// The robot spawns at x = 0; the far flat section begins at x = 15.
Heightfield make_eval_field(const TerrainDraw& draw, Rng& rng);

}  // namespace ht2
