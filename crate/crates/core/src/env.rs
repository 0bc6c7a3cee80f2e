//! MDP wrapper: observations, reference trajectory, action mapping, reward,
//! termination, and the sensor-noise model.

use crate::dynamics::{self, SimState, TickRow, N_JOINTS, PHYSICS_DT};
use crate::world::{Simulation, WorldRef};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Observation width: motor positions at t and t-1 plus torso pitch at t and
/// t-1. Base position and velocities are not sensor-visible.
pub const OBS_DIM: usize = 14;

#[derive(Debug, Clone, Copy)]
pub struct Observation(pub [f64; OBS_DIM]);

impl Observation {
    pub fn motors_now(&self) -> &[f64] {
        &self.0[0..6]
    }
    pub fn motors_prev(&self) -> &[f64] {
        &self.0[6..12]
    }
    pub fn pitch_now(&self) -> f64 {
        self.0[12]
    }
    pub fn pitch_prev(&self) -> f64 {
        self.0[13]
    }
}

// ---------------------------------------------------------------------------
// Noise model
// ---------------------------------------------------------------------------

/// Sensor and timing noise. Ranges follow the standard profile: control
/// frequency uniform in [25, 33] Hz per rollout, a per-rollout orientation
/// bias from U(-0.3, 0.3), Gaussian motor noise of sd 0.01 per reading, and
/// U(-0.25, 0.25) noise on the normalized parameter input during training.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub ctrl_hz_range: [f64; 2],
    pub pitch_bias_range: f64,
    pub motor_noise_sd: f64,
    pub mu_input_noise: f64,
}

impl NoiseConfig {
    pub fn paper() -> Self {
        Self {
            ctrl_hz_range: [25.0, 33.0],
            pitch_bias_range: 0.3,
            motor_noise_sd: 0.01,
            mu_input_noise: 0.25,
        }
    }

    pub fn disabled() -> Self {
        Self { ctrl_hz_range: [33.0, 33.0], pitch_bias_range: 0.0, motor_noise_sd: 0.0, mu_input_noise: 0.0 }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Per-rollout sensor state: the drawn pitch bias plus the previous (noisy)
/// reading that gets stacked into each observation.
#[derive(Debug, Clone)]
pub struct SensorRig {
    pitch_bias: f64,
    motor_sd: f64,
    prev: Option<([f64; 6], f64)>,
}

impl SensorRig {
    pub fn new<R: Rng>(noise: &NoiseConfig, rng: &mut R) -> Self {
        let b = noise.pitch_bias_range;
        let pitch_bias = if b > 0.0 { rng.random_range(-b..b) } else { 0.0 };
        Self { pitch_bias, motor_sd: noise.motor_noise_sd, prev: None }
    }

    /// Reads the sensors: per-reading Gaussian motor noise plus the rollout's
    /// fixed pitch bias, stacked with the previous reading. On the first call
    /// the previous reading equals the current one.
    pub fn observe<R: Rng>(&mut self, state: &SimState, rng: &mut R) -> Observation {
        let mut motors = state.joint_angles();
        if self.motor_sd > 0.0 {
            for m in motors.iter_mut() {
                let n: f64 = rng.sample(rand_distr::StandardNormal);
                *m += self.motor_sd * n;
            }
        }
        let pitch = state.pitch() + self.pitch_bias;
        let (prev_motors, prev_pitch) = self.prev.unwrap_or((motors, pitch));
        let mut o = [0.0; OBS_DIM];
        o[0..6].copy_from_slice(&motors);
        o[6..12].copy_from_slice(&prev_motors);
        o[12] = pitch;
        o[13] = prev_pitch;
        self.prev = Some((motors, pitch));
        Observation(o)
    }
}

// ---------------------------------------------------------------------------
// Direction, reference trajectory, action mapping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    /// Sign applied to torso x-velocity so that "commanded direction" is
    /// always the positive axis (the planar analog of rotating the robot
    /// frame toward the target direction).
    pub fn sign(self) -> f64 {
        match self {
            Direction::Forward => 1.0,
            Direction::Backward => -1.0,
        }
    }

    /// Standard action-adjustment magnitude per direction.
    pub fn default_delta(self) -> f64 {
        match self {
            Direction::Forward => 0.3,
            Direction::Backward => 0.2,
        }
    }
}

/// Stepping-in-place reference amplitude for hips, rad.
pub const REF_HIP_AMPLITUDE: f64 = 0.35;
/// Knee lift amplitude, rad.
pub const REF_KNEE_AMPLITUDE: f64 = 0.5;
/// Gait frequency, Hz.
pub const REF_FREQUENCY_HZ: f64 = 1.25;

/// Hand-scripted stepping-in-place pose at time `t`: antiphase hip swing,
/// half-wave knee lifts, flat ankles. Deterministic in `t`.
pub fn reference_pose(t: f64) -> [f64; N_JOINTS] {
    let w = 2.0 * std::f64::consts::PI * REF_FREQUENCY_HZ;
    let hip = REF_HIP_AMPLITUDE * (w * t).sin();
    let knee_l = REF_KNEE_AMPLITUDE * (w * t + std::f64::consts::FRAC_PI_2).sin().max(0.0);
    let knee_r = REF_KNEE_AMPLITUDE * (w * t - std::f64::consts::FRAC_PI_2).sin().max(0.0);
    [hip, knee_l, 0.0, -hip, knee_r, 0.0]
}

/// Maps a policy output in [-1, 1]^6 to joint targets:
/// `q_target = q_ref + delta * output`, clamped to the joint limits.
pub fn act(
    policy_output: &[f64; N_JOINTS],
    ref_pose: &[f64; N_JOINTS],
    delta: f64,
    joint_limits: &[[f64; 2]; N_JOINTS],
) -> [f64; N_JOINTS] {
    let mut out = [0.0; N_JOINTS];
    for j in 0..N_JOINTS {
        debug_assert!((-1.0..=1.0).contains(&policy_output[j]));
        out[j] = (ref_pose[j] + delta * policy_output[j]).clamp(joint_limits[j][0], joint_limits[j][1]);
    }
    out
}

// ---------------------------------------------------------------------------
// Reward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub w_v: f64,
    pub w_a: f64,
    pub w_w: f64,
    pub w_t: f64,
    /// Constant reward for not having fallen.
    pub alive: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { w_v: 10.0, w_a: 0.01, w_w: 0.005, w_t: 0.2, alive: 5.0 }
    }
}

/// Reward from precomputed energy terms: velocity along the commanded
/// direction is rewarded, torque magnitude, actuator work, and tracking error
/// are penalized, plus the constant alive bonus.
pub fn reward_terms(
    vel_along: f64,
    sq_torque: f64,
    power: f64,
    motor_pos: &[f64; N_JOINTS],
    ref_pose: &[f64; N_JOINTS],
    w: &RewardWeights,
) -> f64 {
    let track: f64 = motor_pos.iter().zip(ref_pose).map(|(a, b)| (a - b) * (a - b)).sum();
    w.w_v * vel_along + w.alive - w.w_a * sq_torque - w.w_w * power - w.w_t * track
}

/// Instantaneous form operating on raw torque and velocity vectors.
pub fn reward(
    vel_along: f64,
    torques: &[f64; N_JOINTS],
    motor_qdot: &[f64; N_JOINTS],
    motor_pos: &[f64; N_JOINTS],
    ref_pose: &[f64; N_JOINTS],
    w: &RewardWeights,
) -> f64 {
    let sq: f64 = torques.iter().map(|t| t * t).sum();
    let power: f64 = torques.iter().zip(motor_qdot).map(|(t, v)| t * v).sum();
    reward_terms(vel_along, sq, power, motor_pos, ref_pose, w)
}

// ---------------------------------------------------------------------------
// Termination
// ---------------------------------------------------------------------------

/// Episode horizon in seconds.
pub const HORIZON_S: f64 = 20.0;
/// Fraction of standing height below which the robot counts as fallen.
pub const FALL_HEIGHT_FRACTION: f64 = 0.55;
/// Pitch magnitude beyond which the robot counts as fallen.
pub const FALL_PITCH_RAD: f64 = 0.9;

/// Fall / horizon detection.
pub fn terminated(state: &SimState, standing_height: f64) -> bool {
    state.pitch().abs() > FALL_PITCH_RAD
        || state.base_height() < FALL_HEIGHT_FRACTION * standing_height
        || state.t > HORIZON_S
}

// ---------------------------------------------------------------------------
// Environment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub noise: NoiseConfig,
    pub reward: RewardWeights,
    pub direction: Direction,
    /// Action adjustment magnitude; if absent, the direction default is used.
    pub delta: Option<f64>,
    /// Initial joint jitter half-range, rad.
    pub init_jitter: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::paper(),
            reward: RewardWeights::default(),
            direction: Direction::Forward,
            delta: None,
            init_jitter: 0.02,
        }
    }
}

impl EnvConfig {
    pub fn delta(&self) -> f64 {
        self.delta.unwrap_or_else(|| self.direction.default_delta())
    }
}

// ---------------------------------------------------------------------------
// Episode runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct TickOutcome {
    pub reward: f64,
    pub done: bool,
    /// Done because the horizon ran out rather than a fall; value estimates
    /// should bootstrap through truncations.
    pub truncated: bool,
}

/// Drives one episode at the control rate: draws the per-rollout control
/// frequency and sensor bias, holds actions across substeps, accumulates
/// reward terms, and applies the fall/horizon termination.
pub struct EpisodeRunner<'a> {
    sim: Simulation<'a>,
    rig: SensorRig,
    cfg: EnvConfig,
    delta: f64,
    n_substeps: usize,
    standing_h: f64,
    joint_limits: [[f64; 2]; N_JOINTS],
    start_x: f64,
    obs: Observation,
    blew_up: bool,
    finished: bool,
    log: Option<Vec<TickRow>>,
}

impl<'a> EpisodeRunner<'a> {
    pub fn new<R: Rng>(world: WorldRef<'a>, cfg: &EnvConfig, rng: &mut R) -> Self {
        let standing_h = world.standing_height();
        let limits = world.joint_limits();
        let mut sim = world.session(world.standing_state());
        // Initial pose jitter keeps the balance problem non-degenerate.
        if cfg.init_jitter > 0.0 {
            for j in 0..N_JOINTS {
                let d = rng.random_range(-cfg.init_jitter..cfg.init_jitter);
                sim.state.q[dynamics::coord::JOINT0 + j] =
                    (sim.state.q[dynamics::coord::JOINT0 + j] + d)
                        .clamp(limits[j][0], limits[j][1]);
            }
        }
        // Per-rollout control frequency, quantized to whole physics substeps.
        let hz = if cfg.noise.ctrl_hz_range[1] > cfg.noise.ctrl_hz_range[0] {
            rng.random_range(cfg.noise.ctrl_hz_range[0]..cfg.noise.ctrl_hz_range[1])
        } else {
            cfg.noise.ctrl_hz_range[0]
        };
        let n_substeps = (1.0 / (hz * PHYSICS_DT)).round().max(1.0) as usize;
        let mut rig = SensorRig::new(&cfg.noise, rng);
        let obs = rig.observe(&sim.state, rng);
        let start_x = sim.state.q[dynamics::coord::BASE_X];
        Self {
            sim,
            rig,
            cfg: cfg.clone(),
            delta: cfg.delta(),
            n_substeps,
            standing_h,
            joint_limits: limits,
            start_x,
            obs,
            blew_up: false,
            finished: false,
            log: None,
        }
    }

    pub fn enable_logging(&mut self) {
        self.log = Some(Vec::new());
    }

    pub fn take_log(&mut self) -> Vec<TickRow> {
        self.log.take().unwrap_or_default()
    }

    pub fn obs(&self) -> &Observation {
        &self.obs
    }

    pub fn time(&self) -> f64 {
        self.sim.state.t
    }

    pub fn state(&self) -> &SimState {
        &self.sim.state
    }

    pub fn control_dt(&self) -> f64 {
        self.n_substeps as f64 * PHYSICS_DT
    }

    /// Signed displacement along the commanded direction since reset.
    pub fn distance(&self) -> f64 {
        if self.blew_up {
            return 0.0;
        }
        self.cfg.direction.sign() * (self.sim.state.q[dynamics::coord::BASE_X] - self.start_x)
    }

    pub fn blew_up(&self) -> bool {
        self.blew_up
    }

    /// Applies one policy action (in [-1,1]^6) for one control interval.
    pub fn step<R: Rng>(&mut self, action: &[f64; N_JOINTS], rng: &mut R) -> TickOutcome {
        assert!(!self.finished, "episode already finished");
        let ref_pose = reference_pose(self.sim.state.t);
        let targets = act(action, &ref_pose, self.delta, &self.joint_limits);
        let x_before = self.sim.state.q[dynamics::coord::BASE_X];
        let stats = match self.sim.control_tick(&targets, self.n_substeps) {
            Ok(s) => s,
            Err(_) => {
                self.blew_up = true;
                self.finished = true;
                return TickOutcome { reward: 0.0, done: true, truncated: false };
            }
        };
        let dt_c = self.control_dt();
        let vx = (self.sim.state.q[dynamics::coord::BASE_X] - x_before) / dt_c;
        let vel_along = self.cfg.direction.sign() * vx;
        let motor_pos = self.sim.state.joint_angles();
        let ref_now = reference_pose(self.sim.state.t);
        let r = reward_terms(
            vel_along,
            stats.mean_sq_tau,
            stats.mean_power,
            &motor_pos,
            &ref_now,
            &self.cfg.reward,
        );
        if let Some(log) = self.log.as_mut() {
            log.push(TickRow {
                t: self.sim.state.t,
                q: self.sim.state.q,
                qd: self.sim.state.qdot,
                tau: stats.mean_tau,
                contact: self.sim.state.foot_contact,
                reward: Some(r),
            });
        }
        self.obs = self.rig.observe(&self.sim.state, rng);
        let done = terminated(&self.sim.state, self.standing_h);
        let fell = self.sim.state.pitch().abs() > FALL_PITCH_RAD
            || self.sim.state.base_height() < FALL_HEIGHT_FRACTION * self.standing_h;
        if done {
            self.finished = true;
        }
        TickOutcome { reward: r, done, truncated: done && !fell }
    }
}
