#pragma once

#include <Eigen/Dense>
#include <array>
#include <memory>

#include "ht2/rng.hpp"
#include "ht2/terrain.hpp"

// Planar (sagittal-plane) biped: 7 links (torso, 2x thigh, 2x shank, 2x foot),
// 9 generalized coordinates (base x, z, pitch + hip/knee/ankle per leg).
// Dynamics are exact rigid-body equations in generalized coordinates computed
// with a planar recursive Newton-Euler pass; ground contact is a penalty
// spring-damper against the heightfield with a Coulomb friction clamp.
// A PD torque loop runs at 2000 Hz under 50 Hz actions.

namespace ht2 {

using Vec9 = Eigen::Matrix<double, 9, 1>;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat9 = Eigen::Matrix<double, 9, 9>;
using Vec2d = Eigen::Vector2d;

constexpr int kNumJoints = 6;   // actuated
constexpr int kActionDim = 18;  // (position, kp, kd) per joint
constexpr int kObsDim = 20;

/// Per-episode domain randomization sample (Table-style ranges; identity when
/// randomization is disabled).
struct DRSample {
  double gravity_offset = 0.0;  // m/s^2 added to 9.81
  double friction_scale = 1.0;
  double joint_damping_scale = 1.0;
  double joint_stiffness_scale = 1.0;
  double motor_strength = 1.0;
  std::array<double, kNumJoints> motor_offset{};  // rad
  double mass_scale = 1.0;
  double size_scale = 1.0;
  double kp_factor = 1.0;
  double kd_factor = 1.0;
  double contact_time_constant_scale = 1.0;
  double contact_damping_ratio_scale = 1.0;
  double obs_noise_joint_pos = 0.0;
  double obs_noise_joint_vel = 0.0;
  double obs_noise_lin_vel = 0.0;
  double obs_noise_ang_vel = 0.0;
  double obs_noise_gravity = 0.0;
  double obs_delay_prob = 0.0;
  double act_delay_prob = 0.0;

  static constexpr int kSummaryDim = 19;
  std::array<double, kSummaryDim> summary() const;
};

struct SimConfig {
  // link geometry (m) and masses (kg); inertias are slender-rod values
  double torso_len = 0.5, torso_mass = 20.0, torso_com = 0.25;
  double thigh_len = 0.4, thigh_mass = 3.5;
  double shank_len = 0.4, shank_mass = 2.0;
  double foot_mass = 0.8;
  double foot_heel = -0.06, foot_toe = 0.12, foot_drop = 0.05;  // sole below ankle

  // actuation
  double torque_limit = 150.0;  // N*m
  double kp_min = 0.0, kp_max = 400.0;
  double kd_min = 0.0, kd_max = 20.0;
  double target_limit = 2.5;  // rad
  double passive_damping = 0.2;    // N*m*s/rad, scaled by DR
  double passive_stiffness = 0.5;  // N*m/rad toward q=0, scaled by DR

  // contact (nominal; DR scales time constant and damping ratio)
  double contact_stiffness = 1e5;  // N/m
  double contact_damping_ratio = 1.0;
  double friction = 1.0;
  double tangential_damping = 1800.0;  // N*s/m, clamped by mu*N

  // timing
  double dt_sub = 5e-4;
  int substeps = 40;  // 50 Hz control
  double gait_period = 0.9;
  double episode_length = 20.0;

  // reset
  std::array<double, kNumJoints> neutral_pose{0.0, -0.08, 0.08, 0.0, -0.08, 0.08};
  double pose_noise = 0.05;

  double control_dt() const { return dt_sub * substeps; }
};

/// (position target, kp, kd) per actuated joint, packed as 18 values:
/// [q*_0..q*_5, kp_0..kp_5, kd_0..kd_5]. Gains and targets are clamped to the
/// configured ranges when applied.
struct ActionVector {
  std::array<double, kActionDim> v{};
  double target(int j) const { return v[size_t(j)]; }
  double kp(int j) const { return v[size_t(j) + kNumJoints]; }
  double kd(int j) const { return v[size_t(j) + 2 * kNumJoints]; }
  double& target(int j) { return v[size_t(j)]; }
  double& kp(int j) { return v[size_t(j) + kNumJoints]; }
  double& kd(int j) { return v[size_t(j) + 2 * kNumJoints]; }
};

struct SimState {
  Vec9 q = Vec9::Zero();   // x, z, pitch, hipL, kneeL, ankleL, hipR, kneeR, ankleR
  Vec9 qd = Vec9::Zero();
  double phase = 0.0;      // gait clock in [0,1)
  double elapsed = 0.0;    // s
  std::array<bool, 2> contact{};          // left, right
  std::array<double, 2> contact_force{};  // mean normal force over the step (N)
  std::array<double, 2> t_air{};
  std::array<double, 2> t_last{};
  double t_lead = 0.0, t_lag = 0.0;
  int lead_foot = -1;  // -1 none, 0 left, 1 right
  double nominal_height = 0.85;
  bool fault = false;
  std::shared_ptr<const Heightfield> terrain;
  DRSample dr;
};

struct StepInfo {
  std::array<double, kNumJoints> mean_abs_power{};   // |tau_j * qd_j| substep mean (W)
  std::array<double, kNumJoints> mean_torque{};      // signed substep mean (N*m)
  std::array<double, 2> mean_contact_force{};        // normal, substep mean (N)
  std::array<double, 2> foot_contact_power{};        // |<F, v>| substep mean (W)
  double energy_abs = 0.0;                           // sum |tau*qd|*dt over substeps (J)
  double max_friction_ratio = 0.0;                   // max |ft| / (mu*N), <= 1 by clamping
  bool fault = false;
};

struct ObservationVector {
  std::array<double, kObsDim> v{};
};

/// Simulator-only critic inputs: noise-free observation, local height samples,
/// foot statistics, true base velocity, the DR summary, command drift, the
/// previous action, and a 10-value gait-guidance block.
constexpr int kHeightSamples = 11;
constexpr int kGaitGuidanceDim = 10;
constexpr int kCriticDim = kObsDim + kHeightSamples + 2 + 2 + 2 + DRSample::kSummaryDim + 1 +
                           kActionDim + kGaitGuidanceDim;  // 85

struct CriticState {
  std::array<double, kCriticDim> v{};
};

enum class Termination { Alive, Fell, Timeout };

class Sim {
 public:
  explicit Sim(SimConfig cfg = {});

  const SimConfig& config() const { return cfg_; }

  /// Robot at x = 0, nominal pose with +-pose_noise joint noise, feet resting
  /// on the terrain surface, zero velocities, phase 0.
  SimState reset(std::shared_ptr<const Heightfield> terrain, const DRSample& dr,
                 Rng& rng) const;

  /// Advances one control step (substeps x dt_sub). Updates contacts, clock,
  /// and elapsed time. Non-finite states terminate with the fault flag set.
  StepInfo step(SimState& state, const ActionVector& action) const;

  /// Noisy, possibly delayed observation. `prev` is re-served with the
  /// episode's delay probability when given.
  ObservationVector observe(const SimState& state, const DRSample& dr, double command,
                            const ObservationVector* prev, Rng& rng) const;

  /// Noise-free observation (identical layout).
  ObservationVector observe_clean(const SimState& state, double command) const;

  CriticState critic_state(const SimState& state, double command, double command_drift,
                           const std::array<double, kActionDim>& prev_action,
                           const std::array<double, kGaitGuidanceDim>& gait_guidance) const;

  Termination check_termination(const SimState& state) const;

  // --- kinematic queries (world frame) ---
  /// Foot sole center position and velocity; foot = 0 (left) or 1 (right).
  Vec2d foot_position(const SimState& state, int foot) const;
  Vec2d foot_velocity(const SimState& state, int foot) const;
  Vec2d hip_position(const SimState& state) const;
  /// Smallest signed clearance of the four contact points above the terrain
  /// (negative = penetration).
  double min_foot_clearance(const SimState& state) const;

  /// Standing base height at the nominal pose (before noise), given DR size.
  double nominal_base_height(const DRSample& dr) const;

  /// Total robot mass after DR scaling.
  double total_mass(const DRSample& dr) const;

  /// Mechanical energy (kinetic + gravitational potential); used by the
  /// passive-dynamics conservation checks.
  double energy(const SimState& state) const;

  /// External push applied during the next step(s): horizontal force on the
  /// torso COM for a duration. Used by evaluation scenarios.
  void set_push(SimState& state, double force_n, double duration_s) const {
    push_force_ = force_n;
    push_time_left_ = duration_s;
    (void)state;
  }

 private:
  SimConfig cfg_;
  // push state is per-Sim scratch (evaluation runs one env per Sim instance)
  mutable double push_force_ = 0.0;
  mutable double push_time_left_ = 0.0;
};

/// Convenience: an action holding the given joint pose with uniform gains.
ActionVector hold_pose_action(const std::array<double, kNumJoints>& pose, double kp = 200.0,
                              double kd = 8.0);

}  // namespace ht2
