#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ht2/sim.hpp"

using namespace ht2;

namespace {

std::shared_ptr<Heightfield> flat_terrain() {
  Rng rng(0);
  return std::make_shared<Heightfield>(generate_terrain({TerrainType::Flat, 0.0}, rng));
}

std::shared_ptr<Heightfield> slope_terrain(double grade) {
  Rng rng(0);
  return std::make_shared<Heightfield>(generate_terrain({TerrainType::SmoothSlope, grade}, rng));
}

ActionVector zero_gains_action() {
  ActionVector a;
  return a;  // all zeros: no torque
}

}  // namespace

TEST_CASE("reset: flat terrain, nominal height, determinism") {
  Sim sim;
  DRSample dr;
  Rng rng(7);
  auto st = sim.reset(flat_terrain(), dr, rng);
  CHECK(std::fabs(st.q[1] - sim.nominal_base_height(dr)) < 0.08);
  CHECK(st.q[0] == 0.0);
  CHECK(st.qd.norm() == 0.0);
  CHECK(st.phase == 0.0);
  CHECK(std::fabs(sim.min_foot_clearance(st)) < 1e-9);  // feet rest on the surface

  Rng r1(42), r2(42);
  auto a = sim.reset(flat_terrain(), dr, r1);
  auto b = sim.reset(flat_terrain(), dr, r2);
  CHECK(a.q == b.q);

  CHECK_THROWS_AS(sim.reset(nullptr, dr, rng), std::invalid_argument);
}

TEST_CASE("reset + settling on a 10% slope: both feet in contact, penetration < 1 mm") {
  Sim sim;
  DRSample dr;
  Rng rng(3);
  auto st = sim.reset(slope_terrain(0.10), dr, rng);
  auto hold = hold_pose_action(sim.config().neutral_pose, 300.0, 10.0);
  for (int i = 0; i < 25; ++i) sim.step(st, hold);  // 0.5 s settling
  CHECK(!st.fault);
  CHECK(st.contact[0]);
  CHECK(st.contact[1]);
  CHECK(sim.min_foot_clearance(st) > -1e-3);
  CHECK(sim.check_termination(st) == Termination::Alive);
}

TEST_CASE("step: held weightless robot stays put except the clock") {
  SimConfig cfg;
  cfg.neutral_pose = {0, 0, 0, 0, 0, 0};  // passive stiffness is zero at q = 0
  Sim sim(cfg);
  DRSample dr;
  dr.gravity_offset = -9.81;  // cancel gravity entirely
  Rng rng(1);
  auto st = sim.reset(flat_terrain(), dr, rng);
  st.q[1] += 1.0;  // airborne: no contact
  for (int j = 0; j < kNumJoints; ++j) st.q[3 + j] = 0.0;
  auto q0 = st.q;
  ActionVector a;
  for (int j = 0; j < kNumJoints; ++j) {
    a.target(j) = st.q[3 + j];
    a.kp(j) = 100.0;
    a.kd(j) = 5.0;
  }
  auto info = sim.step(st, a);
  CHECK(st.q == q0);
  CHECK(st.qd.norm() == 0.0);
  CHECK(st.phase == doctest::Approx(sim.config().control_dt() / 0.9));
  for (double p : info.mean_abs_power) CHECK(p == 0.0);
}

TEST_CASE("step: free fall changes vertical velocity by g*dt per substep") {
  SimConfig cfg;
  cfg.substeps = 1;
  Sim sim(cfg);
  DRSample dr;
  Rng rng(1);
  auto st = sim.reset(flat_terrain(), dr, rng);
  st.q[1] += 2.0;
  sim.step(st, zero_gains_action());
  CHECK(st.qd[1] == doctest::Approx(-9.81 * 5e-4).epsilon(1e-9));
}

TEST_CASE("passive dynamics conserve energy; drift shrinks as dt halves") {
  DRSample dr;
  Rng rng(5);
  auto run_drift = [&](double dt, int subs_per_ctrl) {
    SimConfig cfg;
    cfg.dt_sub = dt;
    cfg.substeps = subs_per_ctrl;
    Sim sim(cfg);
    Rng r(5);
    auto st = sim.reset(flat_terrain(), dr, r);
    st.q[1] += 2.0;
    st.qd[1] = 5.0;  // stays airborne for the whole second
    st.qd[2] = 1.0;
    st.qd[3] = 2.0;
    st.qd[4] = -1.5;
    st.qd[6] = -2.0;
    st.qd[8] = 1.0;
    double e0 = sim.energy(st);
    double max_drift = 0.0;
    int steps = int(std::round(1.0 / (dt * subs_per_ctrl)));
    for (int i = 0; i < steps; ++i) {
      sim.step(st, zero_gains_action());
      max_drift = std::max(max_drift, std::fabs(sim.energy(st) - e0));
    }
    CHECK(!st.fault);
    return max_drift / std::fabs(e0);
  };
  // passive joints have damping/stiffness scaled by DR; zero them out
  dr.joint_damping_scale = 0.0;
  dr.joint_stiffness_scale = 0.0;
  double d1 = run_drift(5e-4, 40);
  double d2 = run_drift(2.5e-4, 80);
  CHECK(d1 < 0.01);
  CHECK(d2 < d1);
  CHECK(d2 / d1 < 0.75);  // ~first-order in dt
}

TEST_CASE("halving dt changes trajectories by a bounded, decreasing amount") {
  DRSample dr;
  auto endpoint = [&](double dt, int subs) {
    SimConfig cfg;
    cfg.dt_sub = dt;
    cfg.substeps = subs;
    Sim sim(cfg);
    Rng r(9);
    auto st = sim.reset(flat_terrain(), dr, r);
    auto hold = hold_pose_action(sim.config().neutral_pose, 250.0, 8.0);
    int steps = int(std::round(1.0 / (dt * subs)));
    for (int i = 0; i < steps; ++i) sim.step(st, hold);
    return st.q;
  };
  auto q1 = endpoint(5e-4, 40);
  auto q2 = endpoint(2.5e-4, 80);
  auto q3 = endpoint(1.25e-4, 160);
  double diff12 = (q1 - q2).norm();
  double diff23 = (q2 - q3).norm();
  CHECK(diff12 < 0.05);
  CHECK(diff23 < diff12);
}

TEST_CASE("contact: normal force nonnegative, friction within the cone") {
  Sim sim;
  DRSample dr;
  Rng rng(11);
  auto st = sim.reset(slope_terrain(0.15), dr, rng);
  st.qd[0] = 0.8;  // sliding start
  auto hold = hold_pose_action(sim.config().neutral_pose, 300.0, 10.0);
  for (int i = 0; i < 50; ++i) {
    auto info = sim.step(st, hold);
    CHECK(info.mean_contact_force[0] >= 0.0);
    CHECK(info.mean_contact_force[1] >= 0.0);
    CHECK(info.max_friction_ratio <= 1.0 + 1e-12);
  }
}

TEST_CASE("determinism: identical state/action/DR gives bitwise-identical steps") {
  Sim sim;
  DRSample dr;
  dr.motor_strength = 1.07;
  dr.friction_scale = 0.8;
  Rng r1(13), r2(13);
  auto s1 = sim.reset(flat_terrain(), dr, r1);
  auto s2 = sim.reset(flat_terrain(), dr, r2);
  auto hold = hold_pose_action(sim.config().neutral_pose, 220.0, 6.0);
  for (int i = 0; i < 20; ++i) {
    sim.step(s1, hold);
    sim.step(s2, hold);
  }
  CHECK(s1.q == s2.q);
  CHECK(s1.qd == s2.qd);
}

TEST_CASE("observe: exact readout without noise, delay semantics, noise scale") {
  Sim sim;
  DRSample dr;
  Rng rng(17);
  auto st = sim.reset(flat_terrain(), dr, rng);
  st.qd[0] = 0.4;
  st.qd[2] = -0.3;

  SUBCASE("no noise, no delay: equals the clean readout") {
    auto o = sim.observe(st, dr, 0.5, nullptr, rng);
    auto c = sim.observe_clean(st, 0.5);
    for (int i = 0; i < kObsDim; ++i) CHECK(o.v[size_t(i)] == c.v[size_t(i)]);
    CHECK(c.v[19] == 0.5);
  }

  SUBCASE("delay probability 1 re-serves the previous observation") {
    DRSample d2 = dr;
    d2.obs_delay_prob = 1.0;
    auto prev = sim.observe_clean(st, 0.1);
    auto o = sim.observe(st, d2, 0.9, &prev, rng);
    for (int i = 0; i < kObsDim; ++i) CHECK(o.v[size_t(i)] == prev.v[size_t(i)]);
  }

  SUBCASE("joint position noise std within 3% of 0.175 over 1e4 samples") {
    DRSample d2 = dr;
    d2.obs_noise_joint_pos = 0.175;
    const int N = 10000;
    double sum = 0, sum2 = 0;
    for (int i = 0; i < N; ++i) {
      auto o = sim.observe(st, d2, 0.0, nullptr, rng);
      double e = o.v[3] - st.q[3];
      sum += e;
      sum2 += e * e;
    }
    double std_est = std::sqrt(sum2 / N - (sum / N) * (sum / N));
    CHECK(std_est == doctest::Approx(0.175).epsilon(0.03));
  }
}

TEST_CASE("critic_state: layout, flat heights, slope heights, noise-free match") {
  Sim sim;
  DRSample dr;
  Rng rng(19);
  std::array<double, kActionDim> prev{};
  std::array<double, kGaitGuidanceDim> gg{};

  auto st = sim.reset(flat_terrain(), dr, rng);
  auto cs = sim.critic_state(st, 0.3, 0.0, prev, gg);
  for (int j = 0; j < kHeightSamples; ++j) CHECK(cs.v[size_t(kObsDim + j)] == 0.0);
  auto clean = sim.observe_clean(st, 0.3);
  for (int i = 0; i < kObsDim; ++i) CHECK(cs.v[size_t(i)] == clean.v[size_t(i)]);

  auto st2 = sim.reset(slope_terrain(0.12), dr, rng);
  auto cs2 = sim.critic_state(st2, 0.0, 0.0, prev, gg);
  for (int j = 1; j < kHeightSamples; ++j) {
    double step = cs2.v[size_t(kObsDim + j)] - cs2.v[size_t(kObsDim + j - 1)];
    CHECK(step == doctest::Approx(0.1 * 0.12).epsilon(1e-9));
  }
  CHECK(int(cs2.v.size()) == 85);
}

TEST_CASE("termination: alive / fell / timeout") {
  Sim sim;
  DRSample dr;
  Rng rng(23);
  auto st = sim.reset(flat_terrain(), dr, rng);
  CHECK(sim.check_termination(st) == Termination::Alive);

  auto fallen = st;
  fallen.q[2] = 1.5;
  CHECK(sim.check_termination(fallen) == Termination::Fell);

  auto low = st;
  low.q[1] = 0.5 * st.nominal_height;
  CHECK(sim.check_termination(low) == Termination::Fell);

  auto timed = st;
  timed.elapsed = 20.0;
  CHECK(sim.check_termination(timed) == Termination::Timeout);

  auto faulted = st;
  faulted.fault = true;
  CHECK(sim.check_termination(faulted) == Termination::Fell);
}

TEST_CASE("total mass and DR scaling") {
  Sim sim;
  DRSample dr;
  CHECK(sim.total_mass(dr) == doctest::Approx(32.6).epsilon(1e-9));
  dr.mass_scale = 1.5;
  CHECK(sim.total_mass(dr) == doctest::Approx(48.9).epsilon(1e-9));
  dr.size_scale = 1.05;
  CHECK(sim.nominal_base_height(dr) > sim.nominal_base_height(DRSample{}));
}
