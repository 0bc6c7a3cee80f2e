//! Simulator parameter vector, actuated world wrapper, and the surrogate
//! real world.
//!
//! A [`World`] couples the rigid-body model with an actuator model and
//! contact parameters. The training world is built from a public
//! [`ModelParams`]; the [`SurrogateWorld`] hides its parameters behind a
//! newtype so identification and transfer can only interact with it through
//! trajectories.

use crate::actuator::{self, ActuatorParams, GainNet, Group, GAIN_NET_DIM};
use crate::dynamics::{
    self, ContactParams, DynamicsError, RobotModel, SimState, N_JOINTS, PHYSICS_DT,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

/// Dimension of the bounded parameter vector mu.
pub const MU_DIM: usize = 10;

/// Component names of mu, in storage order.
pub const MU_NAMES: [&str; MU_DIM] = [
    "rho_hip", "rho_knee", "rho_ankle", "sigma_hip", "sigma_knee", "sigma_ankle", "tau_lim",
    "mu_fric", "com_x", "com_z",
];

/// Global search box per dimension of mu. Every identified bound lives inside
/// this box, and normalized reporting maps it to [0, 1].
pub const GLOBAL_BOX: [[f64; 2]; MU_DIM] = [
    [0.3, 3.0],
    [0.3, 3.0],
    [0.3, 3.0],
    [0.3, 3.0],
    [0.3, 3.0],
    [0.3, 3.0],
    [2.0, 15.0],
    [0.2, 2.0],
    [-0.05, 0.05],
    [-0.05, 0.05],
];

/// The simulator parameter vector: per-group gain scales, torque limit,
/// ground friction, torso COM offset, plus the frozen 27-weight gain network
/// carried alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub mu: [f64; MU_DIM],
    pub phi: Vec<f64>,
}

pub mod mu_idx {
    pub const RHO_HIP: usize = 0;
    pub const RHO_KNEE: usize = 1;
    pub const RHO_ANKLE: usize = 2;
    pub const SIGMA_HIP: usize = 3;
    pub const SIGMA_KNEE: usize = 4;
    pub const SIGMA_ANKLE: usize = 5;
    pub const TAU_LIM: usize = 6;
    pub const MU_FRIC: usize = 7;
    pub const COM_X: usize = 8;
    pub const COM_Z: usize = 9;
}

/// Gain net with all-zero weights except a k_d head bias of 1, giving
/// moderately damped default gains.
pub fn default_phi() -> Vec<f64> {
    let mut phi = vec![0.0; GAIN_NET_DIM];
    phi[GAIN_NET_DIM - 1] = 1.0;
    phi
}

impl ModelParams {
    /// Nominal starting point: unit scales, mid torque limit, unit friction,
    /// centered torso COM.
    pub fn nominal() -> Self {
        let mut mu = [0.0; MU_DIM];
        mu[..6].fill(1.0);
        mu[mu_idx::TAU_LIM] = 8.0;
        mu[mu_idx::MU_FRIC] = 1.0;
        Self { mu, phi: default_phi() }
    }

    pub fn with_mu(mu: [f64; MU_DIM], phi: Vec<f64>) -> Self {
        assert_eq!(phi.len(), GAIN_NET_DIM);
        Self { mu, phi }
    }

    pub fn in_box(&self) -> bool {
        self.mu.iter().zip(GLOBAL_BOX.iter()).all(|(v, b)| *v >= b[0] && *v <= b[1])
    }

    /// Maps mu into [0, 1]^10 using the global box.
    pub fn normalize(mu: &[f64; MU_DIM]) -> [f64; MU_DIM] {
        let mut out = [0.0; MU_DIM];
        for i in 0..MU_DIM {
            out[i] = (mu[i] - GLOBAL_BOX[i][0]) / (GLOBAL_BOX[i][1] - GLOBAL_BOX[i][0]);
        }
        out
    }

    pub fn denormalize(unit: &[f64; MU_DIM]) -> [f64; MU_DIM] {
        let mut out = [0.0; MU_DIM];
        for i in 0..MU_DIM {
            out[i] = GLOBAL_BOX[i][0] + unit[i] * (GLOBAL_BOX[i][1] - GLOBAL_BOX[i][0]);
        }
        out
    }

    pub fn actuator_params(&self) -> ActuatorParams {
        ActuatorParams {
            rho: [self.mu[0], self.mu[1], self.mu[2]],
            sigma: [self.mu[3], self.mu[4], self.mu[5]],
            tau_lim: self.mu[mu_idx::TAU_LIM],
        }
    }
}

// ---------------------------------------------------------------------------
// Actuator dispatch
// ---------------------------------------------------------------------------

/// Motor-torque law used by a world. The nonlinear-gain variant exists only
/// inside surrogate worlds; it is deliberately outside the model class that
/// identification searches over.
#[derive(Debug, Clone)]
pub enum ActuatorModel {
    NnPd(GainNet),
    PdOnly { kp: f64, kd: f64 },
    /// Smooth gain schedules k_p(err), k_d(vel) that no constant-gain PD can
    /// match across step magnitudes.
    NonlinearGain,
}

impl ActuatorModel {
    fn raw_torque(&self, params: &ActuatorParams, group: Group, target: f64, theta: f64, theta_dot: f64) -> f64 {
        match self {
            ActuatorModel::NnPd(gainnet) => {
                actuator::torque(gainnet, params, group, target, theta, theta_dot)
            }
            ActuatorModel::PdOnly { kp, kd } => {
                actuator::pd_only_torque(*kp, *kd, params, group, target, theta, theta_dot)
            }
            ActuatorModel::NonlinearGain => {
                let err = target - theta;
                let kp = 22.0 + 14.0 * (-(err / 0.18) * (err / 0.18)).exp();
                let kd = 0.9 + 0.5 * (-(theta_dot / 6.0) * (theta_dot / 6.0)).exp();
                let g = group.index();
                let tau = params.rho[g] * kp * err - params.sigma[g] * kd * theta_dot;
                tau.clamp(-params.tau_lim, params.tau_lim)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// World
// ---------------------------------------------------------------------------

/// A fully-parameterized simulation: rigid-body model, contact, actuator.
#[derive(Debug, Clone)]
pub struct World {
    pub model: RobotModel,
    pub contact: ContactParams,
    pub act_params: ActuatorParams,
    pub actuator: ActuatorModel,
    /// First-order torque-lag time constant in seconds (unmodeled extra).
    pub torque_lag: Option<f64>,
    /// Dry friction torque magnitude in N*m (unmodeled extra).
    pub dry_friction: f64,
}

impl World {
    /// Training world for a given parameter vector, NN-PD actuated.
    pub fn from_params(params: &ModelParams) -> World {
        Self::from_params_with_actuator(params, ActuatorModel::NnPd(GainNet::from_flat(&params.phi)))
    }

    /// Training world with an explicit actuator law (used by the PD-only
    /// ablation, which shares mu but replaces the gain network).
    pub fn from_params_with_actuator(params: &ModelParams, actuator: ActuatorModel) -> World {
        let mut model = RobotModel::default();
        let torso = &mut model.links[dynamics::link::TORSO];
        torso.com_local[0] += params.mu[mu_idx::COM_X];
        torso.com_local[1] += params.mu[mu_idx::COM_Z];
        let contact = ContactParams { mu_fric: params.mu[mu_idx::MU_FRIC], ..Default::default() };
        World {
            model,
            contact,
            act_params: params.actuator_params(),
            actuator,
            torque_lag: None,
            dry_friction: 0.0,
        }
    }

    pub fn standing_state(&self) -> SimState {
        dynamics::standing_state(&self.model, &self.contact)
    }

    pub fn standing_height(&self) -> f64 {
        dynamics::standing_height(&self.model, &self.contact)
    }
}

/// Per-rollout simulation session. Owns the state plus actuator memory (the
/// torque-lag filter), so a fresh session must be created for every rollout.
#[derive(Debug, Clone)]
pub struct Simulation<'w> {
    world: &'w World,
    pub state: SimState,
    lag_torque: [f64; N_JOINTS],
}

/// Per-control-tick aggregates used by the reward and logging.
#[derive(Debug, Clone, Copy, Default)]
pub struct TickStats {
    /// Mean applied torque over the tick's substeps.
    pub mean_tau: [f64; N_JOINTS],
    /// Mean of |tau|^2 over substeps.
    pub mean_sq_tau: f64,
    /// Mean of tau . qdot over substeps.
    pub mean_power: f64,
}

impl<'w> Simulation<'w> {
    pub fn new(world: &'w World, state: SimState) -> Self {
        Self { world, state, lag_torque: [0.0; N_JOINTS] }
    }

    pub fn world(&self) -> &World {
        self.world
    }

    /// Instantaneous joint torques for the current state and targets.
    fn torques(&mut self, targets: &[f64; N_JOINTS]) -> [f64; N_JOINTS] {
        let mut tau = [0.0; N_JOINTS];
        let angles = self.state.joint_angles();
        let vels = self.state.joint_velocities();
        for j in 0..N_JOINTS {
            let cmd = self.world.actuator.raw_torque(
                &self.world.act_params,
                Group::of_joint(j),
                targets[j],
                angles[j],
                vels[j],
            );
            let applied = match self.world.torque_lag {
                Some(t_lag) => {
                    self.lag_torque[j] += (cmd - self.lag_torque[j]) * PHYSICS_DT / t_lag;
                    self.lag_torque[j]
                }
                None => cmd,
            };
            // Dry friction opposes motor motion; smooth near zero velocity.
            tau[j] = applied - self.world.dry_friction * (vels[j] / 0.02).tanh();
        }
        tau
    }

    /// Holds `targets` for `n_substeps` physics steps (zero-order hold over
    /// one control interval).
    pub fn control_tick(
        &mut self,
        targets: &[f64; N_JOINTS],
        n_substeps: usize,
    ) -> Result<TickStats, DynamicsError> {
        let mut stats = TickStats::default();
        for _ in 0..n_substeps {
            let tau = self.torques(targets);
            let vels = self.state.joint_velocities();
            let mut sq = 0.0;
            let mut pw = 0.0;
            for j in 0..N_JOINTS {
                stats.mean_tau[j] += tau[j];
                sq += tau[j] * tau[j];
                pw += tau[j] * vels[j];
            }
            stats.mean_sq_tau += sq;
            stats.mean_power += pw;
            self.state =
                dynamics::step(&self.state, &self.world.model, &self.world.contact, &tau, PHYSICS_DT)?;
        }
        let inv = 1.0 / n_substeps as f64;
        stats.mean_tau.iter_mut().for_each(|x| *x *= inv);
        stats.mean_sq_tau *= inv;
        stats.mean_power *= inv;
        Ok(stats)
    }
}

// ---------------------------------------------------------------------------
// Surrogate real world
// ---------------------------------------------------------------------------

/// Which flavor of hidden world an experiment runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateProfile {
    /// Same model class as training (NN-PD actuator, no extras); the hidden
    /// parameters are in principle recoverable.
    InClass,
    /// Nonlinear gain schedules plus torque lag and dry friction — dynamics
    /// the training model class cannot represent exactly.
    OutOfClass,
}

/// The stand-in for the physical robot. Its parameter vector is private by
/// construction: callers can create sessions and read trajectories, nothing
/// else.
#[derive(Debug, Clone)]
pub struct SurrogateWorld {
    inner: World,
}

impl SurrogateWorld {
    /// Draws hidden parameters from the central 25-75% band of the global box
    /// so identified bounds can enclose them without hitting the box edge.
    pub fn from_seed(profile: SurrogateProfile, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5u64.rotate_left(33));
        let mut unit = [0.0; MU_DIM];
        for u in unit.iter_mut() {
            *u = rng.random_range(0.25..0.75);
        }
        let mu = ModelParams::denormalize(&unit);
        match profile {
            SurrogateProfile::InClass => {
                let mut phi = default_phi();
                for w in phi.iter_mut() {
                    *w += rng.random_range(-0.4..0.4);
                }
                Self::in_class_with_params(&ModelParams::with_mu(mu, phi))
            }
            SurrogateProfile::OutOfClass => {
                let params = ModelParams::with_mu(mu, default_phi());
                let mut inner =
                    World::from_params_with_actuator(&params, ActuatorModel::NonlinearGain);
                inner.torque_lag = Some(0.010);
                inner.dry_friction = 0.05;
                Self { inner }
            }
        }
    }

    /// In-model-class surrogate with explicit ground-truth parameters, for
    /// validation harnesses that need to check recovery against a known mu.
    pub fn in_class_with_params(params: &ModelParams) -> Self {
        Self { inner: World::from_params(params) }
    }

    pub fn session(&self, state: SimState) -> Simulation<'_> {
        Simulation::new(&self.inner, state)
    }

    pub fn standing_state(&self) -> SimState {
        self.inner.standing_state()
    }

    pub fn standing_height(&self) -> f64 {
        self.inner.standing_height()
    }

    /// Joint limits are public hardware data (needed to script safe poses).
    pub fn joint_limits(&self) -> [[f64; 2]; N_JOINTS] {
        self.inner.model.joint_limits
    }
}

/// Either world, behind one face: a parameterized training world or the
/// surrogate with hidden parameters.
#[derive(Clone, Copy)]
pub enum WorldRef<'a> {
    Training(&'a World),
    Surrogate(&'a SurrogateWorld),
}

impl<'a> WorldRef<'a> {
    pub fn session(&self, state: SimState) -> Simulation<'a> {
        match self {
            WorldRef::Training(w) => Simulation::new(w, state),
            WorldRef::Surrogate(w) => Simulation::new(&w.inner, state),
        }
    }

    pub fn standing_state(&self) -> SimState {
        match self {
            WorldRef::Training(w) => w.standing_state(),
            WorldRef::Surrogate(w) => w.standing_state(),
        }
    }

    pub fn standing_height(&self) -> f64 {
        match self {
            WorldRef::Training(w) => w.standing_height(),
            WorldRef::Surrogate(w) => w.standing_height(),
        }
    }

    pub fn joint_limits(&self) -> [[f64; 2]; N_JOINTS] {
        match self {
            WorldRef::Training(w) => w.model.joint_limits,
            WorldRef::Surrogate(w) => w.joint_limits(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_params_are_in_box() {
        let p = ModelParams::nominal();
        assert!(p.in_box());
        assert_eq!(p.phi.len(), GAIN_NET_DIM);
    }

    #[test]
    fn normalize_round_trip() {
        let p = ModelParams::nominal();
        let unit = ModelParams::normalize(&p.mu);
        assert!(unit.iter().all(|u| (0.0..=1.0).contains(u)));
        let back = ModelParams::denormalize(&unit);
        for (a, b) in back.iter().zip(p.mu.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn com_override_shifts_torso_only() {
        let mut p = ModelParams::nominal();
        p.mu[mu_idx::COM_X] = 0.03;
        p.mu[mu_idx::COM_Z] = -0.02;
        let w = World::from_params(&p);
        let base = RobotModel::default();
        assert!((w.model.links[0].com_local[0] - 0.03).abs() < 1e-15);
        assert!((w.model.links[0].com_local[1] - (base.links[0].com_local[1] - 0.02)).abs() < 1e-15);
        for i in 1..7 {
            assert_eq!(w.model.links[i].com_local, base.links[i].com_local);
        }
        assert_eq!(w.contact.mu_fric, 1.0);
    }

    #[test]
    fn surrogate_draw_is_deterministic_per_seed() {
        let a = SurrogateWorld::from_seed(SurrogateProfile::OutOfClass, 3);
        let b = SurrogateWorld::from_seed(SurrogateProfile::OutOfClass, 3);
        let s = a.standing_state();
        let mut sa = a.session(s.clone());
        let mut sb = b.session(s);
        let targets = [0.1, 0.2, 0.0, -0.1, 0.1, 0.0];
        for _ in 0..20 {
            sa.control_tick(&targets, 30).unwrap();
            sb.control_tick(&targets, 30).unwrap();
        }
        assert_eq!(sa.state.q, sb.state.q);
    }

    #[test]
    fn torque_lag_smooths_the_command() {
        let p = ModelParams::nominal();
        let mut lagged = World::from_params(&p);
        lagged.torque_lag = Some(0.010);
        let crisp = World::from_params(&p);

        let state = dynamics::standing_state(&crisp.model, &crisp.contact);
        let pinned = dynamics::pin_base(state, true);
        let targets = [0.5, 0.0, 0.0, 0.0, 0.0, 0.0];

        let mut s_lag = Simulation::new(&lagged, pinned.clone());
        let mut s_crisp = Simulation::new(&crisp, pinned);
        let t_lag = s_lag.control_tick(&targets, 1).unwrap();
        let t_crisp = s_crisp.control_tick(&targets, 1).unwrap();
        // After one substep the lagged torque has only reached dt/t_lag of
        // the commanded value.
        assert!(t_lag.mean_tau[0].abs() < 0.2 * t_crisp.mean_tau[0].abs());
    }

    #[test]
    fn sessions_do_not_share_lag_state() {
        let w = SurrogateWorld::from_seed(SurrogateProfile::OutOfClass, 1);
        let st = dynamics::pin_base(w.standing_state(), true);
        let targets = [0.3, 0.0, 0.0, 0.0, 0.0, 0.0];
        let mut s1 = w.session(st.clone());
        let r1 = s1.control_tick(&targets, 30).unwrap();
        let mut s2 = w.session(st);
        let r2 = s2.control_tick(&targets, 30).unwrap();
        assert_eq!(r1.mean_tau, r2.mean_tau);
    }
}
