//! NN-PD actuator: a small shared gain network plus per-group scaling and a
//! torque clip, with a constant-gain PD variant for the ablation.
//!
//! The gain network maps `(position error, scaled velocity)` to positive
//! proportional and derivative gains. One network is shared across all six
//! motors; per-group scale factors and a learnable torque limit modulate the
//! differences between hips, knees, and ankles.

use crate::nnet::{Activation, Net};
use serde::{Deserialize, Serialize};

/// Number of gain-network parameters (2 -> 5 tanh -> 2 softplus).
pub const GAIN_NET_DIM: usize = 27;

/// Joint groups of the planar walker. The sagittal reduction keeps three of
/// the full robot's five groups (head/arm motors have no planar counterpart).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Hip,
    Knee,
    Ankle,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Hip, Group::Knee, Group::Ankle];

    /// Group of joint index 0..6 (hipL, kneeL, ankleL, hipR, kneeR, ankleR).
    pub fn of_joint(j: usize) -> Group {
        match j % 3 {
            0 => Group::Hip,
            1 => Group::Knee,
            _ => Group::Ankle,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Group::Hip => 0,
            Group::Knee => 1,
            Group::Ankle => 2,
        }
    }
}

/// Motor velocity is divided by this before entering the gain network, keeping
/// both inputs O(1) ahead of the tanh hidden layer.
pub const VELOCITY_INPUT_SCALE: f64 = 10.0;

/// Output scale applied to the softplus k_p head (N*m/rad per unit).
pub const KP_UNIT: f64 = 25.0;
/// Output scale applied to the softplus k_d head (N*m*s/rad per unit).
pub const KD_UNIT: f64 = 0.5;

// ---------------------------------------------------------------------------
// GainNet
// ---------------------------------------------------------------------------

/// The 27-weight shared gain network: dense 2->5 (tanh) then 5->2 with a
/// softplus head, so both gains are strictly positive for finite inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GainNet {
    net: Net,
}

impl GainNet {
    pub fn new(net: Net) -> Self {
        assert_eq!(net.param_count(), GAIN_NET_DIM, "gain net must have 27 parameters");
        Self { net }
    }

    /// All-zero weights: both heads sit at softplus(0), a moderate default.
    pub fn zeros() -> Self {
        Self { net: Net::zeros(&[2, 5, 2], &[Activation::Tanh, Activation::Softplus]) }
    }

    /// Builds the network from a flat 27-vector in layer order
    /// (W1 row-major, b1, W2 row-major, b2).
    pub fn from_flat(phi: &[f64]) -> Self {
        assert_eq!(phi.len(), GAIN_NET_DIM);
        let mut g = Self::zeros();
        g.net.unflatten(phi);
        g
    }

    /// Flat parameter vector in the serialization order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.net.flatten()
    }

    /// Evaluates (k_p, k_d) at the given error and velocity. Both are
    /// strictly positive.
    pub fn gains(&self, theta_err: f64, theta_dot: f64) -> (f64, f64) {
        let out = self.net.forward(&[theta_err, theta_dot / VELOCITY_INPUT_SCALE]);
        (KP_UNIT * out[0], KD_UNIT * out[1])
    }
}

// ---------------------------------------------------------------------------
// Per-group parameters
// ---------------------------------------------------------------------------

/// Learnable scale factors per joint group plus the torque limit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ActuatorParams {
    /// Proportional-gain scales for hip, knee, ankle.
    pub rho: [f64; 3],
    /// Derivative-gain scales for hip, knee, ankle.
    pub sigma: [f64; 3],
    /// Torque limit (N*m), applied as a symmetric clip.
    pub tau_lim: f64,
}

impl Default for ActuatorParams {
    fn default() -> Self {
        Self { rho: [1.0; 3], sigma: [1.0; 3], tau_lim: 8.0 }
    }
}

impl ActuatorParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.rho.iter().chain(self.sigma.iter()).any(|v| *v <= 0.0) || self.tau_lim <= 0.0 {
            return Err("actuator scales and torque limit must be strictly positive".into());
        }
        Ok(())
    }
}

#[inline]
fn clip(x: f64, lim: f64) -> f64 {
    x.clamp(-lim, lim)
}

/// Final NN-PD motor torque:
/// `clip(rho_g * k_p(phi) * dtheta - sigma_g * k_d(phi) * theta_dot, -tau, tau)`.
pub fn torque(
    gainnet: &GainNet,
    params: &ActuatorParams,
    group: Group,
    theta_target: f64,
    theta: f64,
    theta_dot: f64,
) -> f64 {
    let err = theta_target - theta;
    let (kp, kd) = gainnet.gains(err, theta_dot);
    let g = group.index();
    clip(params.rho[g] * kp * err - params.sigma[g] * kd * theta_dot, params.tau_lim)
}

/// Constant-gain PD torque with the same clip structure, used by the
/// NN-PD-vs-PD ablation.
pub fn pd_only_torque(
    kp: f64,
    kd: f64,
    params: &ActuatorParams,
    group: Group,
    theta_target: f64,
    theta: f64,
    theta_dot: f64,
) -> f64 {
    let err = theta_target - theta;
    let g = group.index();
    clip(params.rho[g] * kp * err - params.sigma[g] * kd * theta_dot, params.tau_lim)
}
