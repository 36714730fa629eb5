#include "ht2/sim.hpp"

#include <cmath>
#include <stdexcept>

namespace ht2 {

std::array<double, DRSample::kSummaryDim> DRSample::summary() const {
  std::array<double, kSummaryDim> s{};
  int i = 0;
  s[i++] = gravity_offset;
  s[i++] = friction_scale;
  s[i++] = joint_damping_scale;
  s[i++] = joint_stiffness_scale;
  s[i++] = motor_strength;
  s[i++] = mass_scale;
  s[i++] = size_scale;
  s[i++] = kp_factor;
  s[i++] = kd_factor;
  s[i++] = contact_time_constant_scale;
  s[i++] = contact_damping_ratio_scale;
  s[i++] = obs_delay_prob;
  s[i++] = act_delay_prob;
  for (int j = 0; j < kNumJoints; ++j) s[i++] = motor_offset[size_t(j)];
  return s;
}

namespace {

constexpr int kBodies = 9;
enum JointKind { PrismX, PrismZ, Rev };

inline Vec2d perp(const Vec2d& r) { return {-r.y(), r.x()}; }
inline double cross2(const Vec2d& a, const Vec2d& b) { return a.x() * b.y() - a.y() * b.x(); }

/// Robot instance with DR scaling applied: tree layout, masses, geometry.
struct Robot {
  int parent[kBodies];
  JointKind kind[kBodies];
  Vec2d anchor[kBodies];  // joint anchor in parent frame (at q = 0)
  Vec2d com[kBodies];     // COM in body frame
  double mass[kBodies];
  double inertia[kBodies];
  Vec2d heel, toe;  // contact points in foot frame
  double gravity;
  double contact_k, contact_c, mu, tangential_c;

  Robot(const SimConfig& cfg, const DRSample& dr) {
    const double s = dr.size_scale;
    const double ms = dr.mass_scale;
    auto rod = [](double m, double len) { return m * len * len / 12.0; };

    parent[0] = -1; kind[0] = PrismX; anchor[0] = {0, 0};
    parent[1] = 0;  kind[1] = PrismZ; anchor[1] = {0, 0};
    parent[2] = 1;  kind[2] = Rev;    anchor[2] = {0, 0};
    com[0] = com[1] = {0, 0};
    mass[0] = mass[1] = 0.0;
    inertia[0] = inertia[1] = 0.0;

    com[2] = {0, cfg.torso_com * s};
    mass[2] = cfg.torso_mass * ms;
    inertia[2] = rod(mass[2], cfg.torso_len * s);

    const double lt = cfg.thigh_len * s, lsh = cfg.shank_len * s;
    for (int leg = 0; leg < 2; ++leg) {
      int b = 3 + 3 * leg;
      parent[b] = 2;     kind[b] = Rev; anchor[b] = {0, 0};
      parent[b + 1] = b; kind[b + 1] = Rev; anchor[b + 1] = {0, -lt};
      parent[b + 2] = b + 1; kind[b + 2] = Rev; anchor[b + 2] = {0, -lsh};
      com[b] = {0, -lt / 2};
      mass[b] = cfg.thigh_mass * ms;
      inertia[b] = rod(mass[b], lt);
      com[b + 1] = {0, -lsh / 2};
      mass[b + 1] = cfg.shank_mass * ms;
      inertia[b + 1] = rod(mass[b + 1], lsh);
      double heel_x = cfg.foot_heel * s, toe_x = cfg.foot_toe * s, drop = cfg.foot_drop * s;
      com[b + 2] = {(heel_x + toe_x) / 2, -drop};
      mass[b + 2] = cfg.foot_mass * ms;
      inertia[b + 2] = rod(mass[b + 2], toe_x - heel_x);
    }
    heel = {cfg.foot_heel * s, -cfg.foot_drop * s};
    toe = {cfg.foot_toe * s, -cfg.foot_drop * s};

    gravity = 9.81 + dr.gravity_offset;
    double tc2 = dr.contact_time_constant_scale * dr.contact_time_constant_scale;
    contact_k = cfg.contact_stiffness / tc2;
    double m_eff = total_mass() / 4.0;
    contact_c = 2.0 * cfg.contact_damping_ratio * dr.contact_damping_ratio_scale *
                std::sqrt(contact_k * m_eff);
    mu = cfg.friction * dr.friction_scale;
    tangential_c = cfg.tangential_damping;
  }

  double total_mass() const {
    double m = 0;
    for (double mi : mass) m += mi;
    return m;
  }
};

/// Forward-kinematics snapshot: world pose and velocity of every body frame.
struct Kin {
  double angle[kBodies];
  Vec2d origin[kBodies];
  double omega[kBodies];
  Vec2d vel[kBodies];
  Vec2d axis[kBodies];  // world axis for prismatic joints

  Kin(const Robot& r, const Vec9& q, const Vec9& qd) {
    for (int i = 0; i < kBodies; ++i) {
      int p = r.parent[i];
      double pa = p < 0 ? 0.0 : angle[p];
      Vec2d po = p < 0 ? Vec2d::Zero() : origin[p];
      double pw = p < 0 ? 0.0 : omega[p];
      Vec2d pv = p < 0 ? Vec2d::Zero() : vel[p];
      Eigen::Rotation2D<double> Rp(pa);
      if (r.kind[i] == Rev) {
        Vec2d rr = Rp * r.anchor[i];
        angle[i] = pa + q[i];
        omega[i] = pw + qd[i];
        origin[i] = po + rr;
        vel[i] = pv + pw * perp(rr);
        axis[i] = {0, 0};
      } else {
        Vec2d a = r.kind[i] == PrismX ? Vec2d{1, 0} : Vec2d{0, 1};
        Vec2d u = Rp * a;
        Vec2d rr = Rp * (r.anchor[i] + a * q[i]);
        angle[i] = pa;
        omega[i] = pw;
        origin[i] = po + rr;
        vel[i] = pv + pw * perp(rr) + u * qd[i];
        axis[i] = u;
      }
    }
  }

  Vec2d point_pos(const Robot&, int body, const Vec2d& local) const {
    return origin[body] + Eigen::Rotation2D<double>(angle[body]) * local;
  }
  Vec2d point_vel(const Robot&, int body, const Vec2d& local) const {
    Vec2d c = Eigen::Rotation2D<double>(angle[body]) * local;
    return vel[body] + omega[body] * perp(c);
  }
};

/// Inverse dynamics: joint forces required for accelerations qdd under
/// gravity g (pass g = 0 and qd = 0 to read off mass-matrix columns).
Vec9 rnea(const Robot& r, const Kin& k, const Vec9& qd, const Vec9& qdd, double g) {
  double alpha[kBodies];
  Vec2d acc[kBodies];
  for (int i = 0; i < kBodies; ++i) {
    int p = r.parent[i];
    double pal = p < 0 ? 0.0 : alpha[p];
    Vec2d pac = p < 0 ? Vec2d::Zero() : acc[p];
    double pw = p < 0 ? 0.0 : k.omega[p];
    Vec2d rr = k.origin[i] - (p < 0 ? Vec2d::Zero() : k.origin[p]);
    if (r.kind[i] == Rev) {
      alpha[i] = pal + qdd[i];
      acc[i] = pac + pal * perp(rr) - pw * pw * rr;
    } else {
      alpha[i] = pal;
      acc[i] = pac + pal * perp(rr) - pw * pw * rr + k.axis[i] * qdd[i] +
               2.0 * pw * perp(k.axis[i]) * qd[i];
    }
  }
  Vec2d force[kBodies];
  double torque[kBodies];
  const Vec2d gvec{0.0, -g};
  for (int i = 0; i < kBodies; ++i) {
    Vec2d c = Eigen::Rotation2D<double>(k.angle[i]) * r.com[i];
    Vec2d a_com = acc[i] + alpha[i] * perp(c) - k.omega[i] * k.omega[i] * c;
    force[i] = r.mass[i] * (a_com - gvec);
    torque[i] = r.inertia[i] * alpha[i] + cross2(c, force[i]);
  }
  Vec9 tau = Vec9::Zero();
  for (int i = kBodies - 1; i >= 0; --i) {
    tau[i] = r.kind[i] == Rev ? torque[i] : force[i].dot(k.axis[i]);
    int p = r.parent[i];
    if (p >= 0) {
      Vec2d rr = k.origin[i] - k.origin[p];
      torque[p] += torque[i] + cross2(rr, force[i]);
      force[p] += force[i];
    }
  }
  return tau;
}

Mat9 mass_matrix(const Robot& r, const Vec9& q) {
  // zero-velocity kinematics: columns are pure inertial responses
  Kin k0(r, q, Vec9::Zero());
  Mat9 M;
  Vec9 zero = Vec9::Zero();
  for (int i = 0; i < kBodies; ++i) {
    Vec9 e = Vec9::Zero();
    e[i] = 1.0;
    M.col(i) = rnea(r, k0, zero, e, 0.0);
  }
  return M;
}

/// Jacobian column of a world point w.r.t. joint j (zero off the support path).
Vec2d jac_col(const Robot& r, const Kin& k, int body, const Vec2d& pw, int j) {
  int b = body;
  while (b >= 0 && b != j) b = r.parent[b];
  if (b < 0) return {0, 0};
  if (r.kind[j] == Rev) return perp(pw - k.origin[j]);
  return k.axis[j];
}

int foot_body(int foot) { return foot == 0 ? 5 : 8; }

}  // namespace

Sim::Sim(SimConfig cfg) : cfg_(cfg) {}

double Sim::total_mass(const DRSample& dr) const { return Robot(cfg_, dr).total_mass(); }

double Sim::nominal_base_height(const DRSample& dr) const {
  Robot r(cfg_, dr);
  Vec9 q = Vec9::Zero();
  for (int j = 0; j < kNumJoints; ++j) q[3 + j] = cfg_.neutral_pose[size_t(j)];
  Kin k(r, q, Vec9::Zero());
  double lowest = 0.0;
  for (int foot = 0; foot < 2; ++foot)
    for (const Vec2d& pt : {r.heel, r.toe})
      lowest = std::min(lowest, k.point_pos(r, foot_body(foot), pt).y());
  return -lowest;
}

SimState Sim::reset(std::shared_ptr<const Heightfield> terrain, const DRSample& dr,
                    Rng& rng) const {
  if (!terrain || terrain->samples.size() < 2)
    throw std::invalid_argument("sim::reset: terrain undefined at spawn");
  SimState st;
  st.terrain = std::move(terrain);
  st.dr = dr;
  st.nominal_height = nominal_base_height(dr);
  for (int j = 0; j < kNumJoints; ++j)
    st.q[3 + j] = cfg_.neutral_pose[size_t(j)] + rng.uniform(-cfg_.pose_noise, cfg_.pose_noise);

  // drop the base so the lowest contact point rests on the surface
  Robot r(cfg_, dr);
  Kin k(r, st.q, st.qd);
  double gap = 1e9;
  for (int foot = 0; foot < 2; ++foot)
    for (const Vec2d& pt : {r.heel, r.toe}) {
      Vec2d p = k.point_pos(r, foot_body(foot), pt);
      gap = std::min(gap, p.y() - st.terrain->height_at(p.x()));
    }
  st.q[1] -= gap;
  return st;
}

StepInfo Sim::step(SimState& state, const ActionVector& action) const {
  StepInfo info;
  if (state.fault) {
    info.fault = true;
    return info;
  }
  const Robot robot(cfg_, state.dr);
  const double dt = cfg_.dt_sub;
  const int n = cfg_.substeps;
  const double stiffness_scale =
      state.terrain->contact_stiffness_scale ? *state.terrain->contact_stiffness_scale : 1.0;
  const double k_c = robot.contact_k * stiffness_scale;
  const double c_c = robot.contact_c * std::sqrt(stiffness_scale);
  const double mu =
      state.terrain->friction_override ? *state.terrain->friction_override : robot.mu;

  // per-joint PD setup (clamped once per control step)
  double kp[kNumJoints], kd[kNumJoints], target[kNumJoints];
  for (int j = 0; j < kNumJoints; ++j) {
    kp[j] = std::clamp(action.kp(j) * state.dr.kp_factor, cfg_.kp_min, cfg_.kp_max);
    kd[j] = std::clamp(action.kd(j) * state.dr.kd_factor, cfg_.kd_min, cfg_.kd_max);
    target[j] = std::clamp(action.target(j), -cfg_.target_limit, cfg_.target_limit);
  }

  std::array<bool, 2> contact_now{};
  std::array<double, 2> force_sum{};
  for (int sub = 0; sub < n; ++sub) {
    Kin kin(robot, state.q, state.qd);

    Vec9 tau = Vec9::Zero();
    double tau_motor[kNumJoints];
    for (int j = 0; j < kNumJoints; ++j) {
      int qi = 3 + j;
      double pd = kp[j] * (target[j] - state.q[qi] + state.dr.motor_offset[size_t(j)]) -
                  kd[j] * state.qd[qi];
      double tm = std::clamp(state.dr.motor_strength * pd, -cfg_.torque_limit,
                             cfg_.torque_limit);
      tau_motor[j] = tm;
      double passive = -cfg_.passive_damping * state.dr.joint_damping_scale * state.qd[qi] -
                       cfg_.passive_stiffness * state.dr.joint_stiffness_scale * state.q[qi];
      tau[qi] = tm + passive;
    }

    // contact forces via Jacobian transpose
    contact_now = {false, false};
    for (int foot = 0; foot < 2; ++foot) {
      int body = foot_body(foot);
      double normal_sum = 0.0;
      double fcp = 0.0;
      for (const Vec2d& local : {robot.heel, robot.toe}) {
        Vec2d p = kin.point_pos(robot, body, local);
        double pen = state.terrain->height_at(p.x()) - p.y();
        if (pen <= 0.0) continue;
        Vec2d v = kin.point_vel(robot, body, local);
        double N = k_c * pen - c_c * v.y();
        if (N <= 0.0) continue;
        double ft = std::clamp(-robot.tangential_c * v.x(), -mu * N, mu * N);
        info.max_friction_ratio = std::max(info.max_friction_ratio, std::fabs(ft) / (mu * N));
        Vec2d F{ft, N};
        for (int qj : {0, 1, 2, foot == 0 ? 3 : 6, foot == 0 ? 4 : 7, foot == 0 ? 5 : 8})
          tau[qj] += jac_col(robot, kin, body, p, qj).dot(F);
        normal_sum += N;
        fcp += std::fabs(F.dot(v));
        contact_now[size_t(foot)] = true;
      }
      force_sum[size_t(foot)] += normal_sum;
      info.foot_contact_power[size_t(foot)] += fcp;
    }

    // external push (horizontal force at the torso COM)
    if (push_time_left_ > 0.0) {
      Vec2d pcom = kin.point_pos(robot, 2, robot.com[2]);
      Vec2d F{push_force_, 0.0};
      for (int qj : {0, 1, 2}) tau[qj] += jac_col(robot, kin, 2, pcom, qj).dot(F);
      push_time_left_ -= dt;
    }

    Vec9 bias = rnea(robot, kin, state.qd, Vec9::Zero(), robot.gravity);
    Mat9 M = mass_matrix(robot, state.q);
    Vec9 qdd = M.ldlt().solve(tau - bias);

    state.qd += qdd * dt;
    state.q += state.qd * dt;
    state.phase += dt / cfg_.gait_period;
    if (state.phase >= 1.0) state.phase -= 1.0;
    state.elapsed += dt;

    for (int j = 0; j < kNumJoints; ++j) {
      double p = tau_motor[j] * state.qd[3 + j];
      info.mean_abs_power[size_t(j)] += std::fabs(p);
      info.mean_torque[size_t(j)] += tau_motor[j];
      info.energy_abs += std::fabs(p) * dt;
    }

    if (!state.q.allFinite() || !state.qd.allFinite()) {
      state.fault = true;
      info.fault = true;
      break;
    }
  }

  double inv_n = 1.0 / double(n);
  for (auto& x : info.mean_abs_power) x *= inv_n;
  for (auto& x : info.mean_torque) x *= inv_n;
  for (auto& x : info.foot_contact_power) x *= inv_n;
  for (int foot = 0; foot < 2; ++foot) {
    info.mean_contact_force[size_t(foot)] = force_sum[size_t(foot)] * inv_n;
    state.contact[size_t(foot)] = contact_now[size_t(foot)];
    state.contact_force[size_t(foot)] = info.mean_contact_force[size_t(foot)];
  }
  return info;
}

ObservationVector Sim::observe_clean(const SimState& state, double command) const {
  ObservationVector o;
  double c = std::cos(state.q[2]), s = std::sin(state.q[2]);
  // base-frame linear velocity
  o.v[0] = c * state.qd[0] + s * state.qd[1];
  o.v[1] = -s * state.qd[0] + c * state.qd[1];
  o.v[2] = state.qd[2];
  for (int j = 0; j < kNumJoints; ++j) {
    o.v[3 + size_t(j)] = state.q[3 + j];
    o.v[9 + size_t(j)] = state.qd[3 + j];
  }
  o.v[15] = -s;  // projected gravity (unit vector, base frame)
  o.v[16] = -c;
  o.v[17] = std::sin(2.0 * M_PI * state.phase);
  o.v[18] = std::cos(2.0 * M_PI * state.phase);
  o.v[19] = command;
  return o;
}

ObservationVector Sim::observe(const SimState& state, const DRSample& dr, double command,
                               const ObservationVector* prev, Rng& rng) const {
  // draw delay first so the RNG stream is identical whether or not it fires
  bool delayed = rng.bernoulli(dr.obs_delay_prob);
  ObservationVector o = observe_clean(state, command);
  o.v[0] += rng.gaussian(0.0, dr.obs_noise_lin_vel);
  o.v[1] += rng.gaussian(0.0, dr.obs_noise_lin_vel);
  o.v[2] += rng.gaussian(0.0, dr.obs_noise_ang_vel);
  for (int j = 0; j < kNumJoints; ++j) {
    o.v[3 + size_t(j)] += rng.gaussian(0.0, dr.obs_noise_joint_pos);
    o.v[9 + size_t(j)] += rng.gaussian(0.0, dr.obs_noise_joint_vel);
  }
  o.v[15] += rng.gaussian(0.0, dr.obs_noise_gravity);
  o.v[16] += rng.gaussian(0.0, dr.obs_noise_gravity);
  if (delayed && prev) return *prev;
  return o;
}

CriticState Sim::critic_state(const SimState& state, double command, double command_drift,
                              const std::array<double, kActionDim>& prev_action,
                              const std::array<double, kGaitGuidanceDim>& gait_guidance) const {
  CriticState cs;
  auto clean = observe_clean(state, command);
  int i = 0;
  for (double x : clean.v) cs.v[size_t(i++)] = x;
  double base_h = state.terrain->height_at(state.q[0]);
  for (int j = 0; j < kHeightSamples; ++j) {
    double x = state.q[0] + 0.1 * (j - kHeightSamples / 2);
    cs.v[size_t(i++)] = state.terrain->height_at(x) - base_h;
  }
  cs.v[size_t(i++)] = state.contact[0] ? 1.0 : 0.0;
  cs.v[size_t(i++)] = state.contact[1] ? 1.0 : 0.0;
  cs.v[size_t(i++)] = state.contact_force[0];
  cs.v[size_t(i++)] = state.contact_force[1];
  cs.v[size_t(i++)] = state.qd[0];  // true base velocity, world frame
  cs.v[size_t(i++)] = state.qd[1];
  for (double x : state.dr.summary()) cs.v[size_t(i++)] = x;
  cs.v[size_t(i++)] = command_drift;
  for (double x : prev_action) cs.v[size_t(i++)] = x;
  for (double x : gait_guidance) cs.v[size_t(i++)] = x;
  return cs;
}

Termination Sim::check_termination(const SimState& state) const {
  if (state.fault) return Termination::Fell;
  double local = state.terrain->height_at(state.q[0]);
  if (state.q[1] - local < 0.6 * state.nominal_height) return Termination::Fell;
  if (std::fabs(state.q[2]) > 1.0) return Termination::Fell;
  if (state.elapsed >= cfg_.episode_length) return Termination::Timeout;
  return Termination::Alive;
}

Vec2d Sim::foot_position(const SimState& state, int foot) const {
  Robot r(cfg_, state.dr);
  Kin k(r, state.q, state.qd);
  return k.point_pos(r, foot_body(foot), (r.heel + r.toe) / 2.0);
}

Vec2d Sim::foot_velocity(const SimState& state, int foot) const {
  Robot r(cfg_, state.dr);
  Kin k(r, state.q, state.qd);
  return k.point_vel(r, foot_body(foot), (r.heel + r.toe) / 2.0);
}

Vec2d Sim::hip_position(const SimState& state) const { return {state.q[0], state.q[1]}; }

double Sim::min_foot_clearance(const SimState& state) const {
  Robot r(cfg_, state.dr);
  Kin k(r, state.q, state.qd);
  double gap = 1e9;
  for (int foot = 0; foot < 2; ++foot)
    for (const Vec2d& pt : {r.heel, r.toe}) {
      Vec2d p = k.point_pos(r, foot_body(foot), pt);
      gap = std::min(gap, p.y() - state.terrain->height_at(p.x()));
    }
  return gap;
}

double Sim::energy(const SimState& state) const {
  Robot r(cfg_, state.dr);
  Kin k(r, state.q, state.qd);
  Mat9 M = mass_matrix(r, state.q);
  double T = 0.5 * state.qd.dot(M * state.qd);
  double V = 0.0;
  for (int i = 0; i < kBodies; ++i) {
    Vec2d c = k.point_pos(r, i, r.com[i]);
    V += r.mass[i] * r.gravity * c.y();
  }
  return T + V;
}

ActionVector hold_pose_action(const std::array<double, kNumJoints>& pose, double kp, double kd) {
  ActionVector a;
  for (int j = 0; j < kNumJoints; ++j) {
    a.target(j) = pose[size_t(j)];
    a.kp(j) = kp;
    a.kd(j) = kd;
  }
  return a;
}

}  // namespace ht2
