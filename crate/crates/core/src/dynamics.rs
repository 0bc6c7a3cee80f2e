//! Planar articulated rigid-body simulator with penalty ground contact.
//!
//! The robot is a fixed seven-link tree: a torso with three planar base DOFs
//! (x, z, pitch) and two three-joint legs (hip, knee, ankle), nine
//! generalized coordinates in total. The same engine is instantiated twice in
//! the pipeline — once as the training model and once as the surrogate world —
//! with different parameters.
//!
//! Integration is a semi-implicit (symplectic) Euler step on generalized
//! momenta: `p' = p + dt * (Q - dV/dq + dT/dq)`, then `q' = q + dt * M^-1 p'`.
//! Working in momenta rather than accelerations makes horizontal momentum
//! exactly cyclic: with no external horizontal force, `p_x` is conserved to
//! rounding error, which the no-contact momentum invariant relies on.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of generalized coordinates: base (x, z, pitch) + 6 joints.
pub const N_COORDS: usize = 9;
/// Number of actuated joints (hip, knee, ankle per leg).
pub const N_JOINTS: usize = 6;
/// Number of links in the tree.
pub const N_LINKS: usize = 7;

/// Inner physics timestep used throughout the pipeline (control actions are
/// held across 25-33 Hz control intervals made of these substeps).
pub const PHYSICS_DT: f64 = 1.0e-3;

/// Velocity gain of the tangential (friction) penalty force, clamped by
/// `mu_fric * normal`. Not part of the identified parameter vector.
const TANGENTIAL_DAMPING: f64 = 150.0;

type Vec2 = nalgebra::Vector2<f64>;
type VecN = SVector<f64, N_COORDS>;
type MatN = SMatrix<f64, N_COORDS, N_COORDS>;

#[inline]
fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

#[inline]
fn cross2(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

#[inline]
fn rot(c: f64, s: f64, v: Vec2) -> Vec2 {
    Vec2::new(c * v.x - s * v.y, s * v.x + c * v.y)
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    /// The integrator produced a non-finite entry; the rollout must abort.
    #[error("non-finite simulation state at t={t}")]
    NonFiniteState { t: f64 },
}

// ---------------------------------------------------------------------------
// Model description
// ---------------------------------------------------------------------------

/// Inertial and geometric description of one link. The link frame sits at the
/// proximal joint; `com_local` is the center of mass in that frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinkParams {
    pub mass: f64,
    pub length: f64,
    /// Rotational inertia about the COM.
    pub inertia: f64,
    pub com_local: [f64; 2],
}

/// Link indices within [`RobotModel::links`].
pub mod link {
    pub const TORSO: usize = 0;
    pub const THIGH_L: usize = 1;
    pub const SHANK_L: usize = 2;
    pub const FOOT_L: usize = 3;
    pub const THIGH_R: usize = 4;
    pub const SHANK_R: usize = 5;
    pub const FOOT_R: usize = 6;
}

/// Generalized-coordinate indices.
pub mod coord {
    pub const BASE_X: usize = 0;
    pub const BASE_Z: usize = 1;
    pub const PITCH: usize = 2;
    /// First joint coordinate; joints are hipL, kneeL, ankleL, hipR, kneeR, ankleR.
    pub const JOINT0: usize = 3;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobotModel {
    pub links: [LinkParams; N_LINKS],
    /// Gravitational acceleration magnitude, acting along -z.
    pub gravity: f64,
    /// Per-joint (lower, upper) angle limits in radians.
    pub joint_limits: [[f64; 2]; N_JOINTS],
    /// Reflected rotor inertia added to each joint coordinate. Geared hobby
    /// servos reflect rotor inertia through the gear ratio squared, which
    /// dominates the light distal links and keeps stiff PD gains integrable
    /// at the fixed physics timestep.
    pub armature: f64,
}

impl Default for RobotModel {
    fn default() -> Self {
        let rod = |mass: f64, length: f64, down: bool| LinkParams {
            mass,
            length,
            inertia: mass * length * length / 12.0,
            com_local: [0.0, if down { -length / 2.0 } else { length / 2.0 }],
        };
        let torso = rod(2.0, 0.30, false);
        let thigh = rod(0.4, 0.22, true);
        let shank = rod(0.3, 0.22, true);
        let foot = rod(0.1, 0.10, true);
        Self {
            links: [torso, thigh, shank, foot, thigh, shank, foot],
            gravity: 9.81,
            armature: 3.0e-3,
            joint_limits: [
                [-1.2, 1.2],
                [0.0, 2.4],
                [-0.8, 0.8],
                [-1.2, 1.2],
                [0.0, 2.4],
                [-0.8, 0.8],
            ],
        }
    }
}

impl RobotModel {
    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    /// Vertical distance from the hip to the foot contact point with all
    /// joints at zero.
    pub fn leg_extent(&self) -> f64 {
        self.links[link::THIGH_L].length
            + self.links[link::SHANK_L].length
            + self.links[link::FOOT_L].length
    }

    pub fn validate(&self) -> Result<(), String> {
        for (i, l) in self.links.iter().enumerate() {
            if !(l.mass > 0.0 && l.length > 0.0 && l.inertia > 0.0) {
                return Err(format!("link {i}: mass, length, inertia must be positive"));
            }
        }
        for (j, lim) in self.joint_limits.iter().enumerate() {
            if lim[0] >= lim[1] {
                return Err(format!("joint {j}: empty limit interval"));
            }
        }
        Ok(())
    }
}

/// Penalty-contact parameters for the point feet.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ContactParams {
    /// Normal spring stiffness, N/m.
    pub k_n: f64,
    /// Normal damping, N*s/m.
    pub c_n: f64,
    /// Coulomb friction coefficient.
    pub mu_fric: f64,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self { k_n: 1.0e4, c_n: 100.0, mu_fric: 1.0 }
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimState {
    pub q: [f64; N_COORDS],
    pub qdot: [f64; N_COORDS],
    pub t: f64,
    pub foot_contact: [bool; 2],
    /// When pinned the base DOFs are frozen and contact is disabled.
    pub pinned: bool,
}

impl SimState {
    pub fn new(q: [f64; N_COORDS]) -> Self {
        Self { q, qdot: [0.0; N_COORDS], t: 0.0, foot_contact: [false, false], pinned: false }
    }

    pub fn joint_angles(&self) -> [f64; N_JOINTS] {
        let mut out = [0.0; N_JOINTS];
        out.copy_from_slice(&self.q[coord::JOINT0..]);
        out
    }

    pub fn joint_velocities(&self) -> [f64; N_JOINTS] {
        let mut out = [0.0; N_JOINTS];
        out.copy_from_slice(&self.qdot[coord::JOINT0..]);
        out
    }

    pub fn pitch(&self) -> f64 {
        self.q[coord::PITCH]
    }

    pub fn base_height(&self) -> f64 {
        self.q[coord::BASE_Z]
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite()) && self.t.is_finite()
    }
}

/// Freezes or releases the base DOFs. Pinning holds positions and zeroes the
/// base velocities; unpinning changes nothing else, so a pin/unpin round trip
/// with no time elapsed is the identity.
pub fn pin_base(mut state: SimState, flag: bool) -> SimState {
    if flag {
        state.qdot[coord::BASE_X] = 0.0;
        state.qdot[coord::BASE_Z] = 0.0;
        state.qdot[coord::PITCH] = 0.0;
        state.foot_contact = [false, false];
    }
    state.pinned = flag;
    state
}

// ---------------------------------------------------------------------------
// Kinematics
// ---------------------------------------------------------------------------

/// World-frame kinematics of every body, refreshed once per step.
#[derive(Debug, Clone)]
pub struct Kinematics {
    /// World orientation per body.
    pub alpha: [f64; N_LINKS],
    /// World angular velocity per body.
    pub omega: [f64; N_LINKS],
    /// World position of each body's proximal joint.
    pub anchor: [Vec2; N_LINKS],
    /// World velocity of each body's proximal joint.
    pub anchor_vel: [Vec2; N_LINKS],
    pub com: [Vec2; N_LINKS],
    pub com_vel: [Vec2; N_LINKS],
    /// Contact point (foot tip) position and velocity, left then right.
    pub tip: [Vec2; 2],
    pub tip_vel: [Vec2; 2],
}

/// Angle-coordinate ancestors per body: (coordinate index, anchor body) pairs
/// are reconstructed from these tables.
const BODY_ANGLE_COORDS: [&[usize]; N_LINKS] = [
    &[2],
    &[2, 3],
    &[2, 3, 4],
    &[2, 3, 4, 5],
    &[2, 6],
    &[2, 6, 7],
    &[2, 6, 7, 8],
];

/// Body whose proximal joint is the anchor of each angle coordinate
/// (coordinate index - 2 maps into this table; pitch anchors at the torso).
const ANGLE_ANCHOR_BODY: [usize; 7] = [
    link::TORSO,   // pitch
    link::THIGH_L, // hipL
    link::SHANK_L, // kneeL
    link::FOOT_L,  // ankleL
    link::THIGH_R, // hipR
    link::SHANK_R, // kneeR
    link::FOOT_R,  // ankleR
];

pub fn forward_kinematics(model: &RobotModel, state: &SimState) -> Kinematics {
    let q = &state.q;
    let qd = &state.qdot;
    let base = Vec2::new(q[0], q[1]);
    let base_vel = Vec2::new(qd[0], qd[1]);

    let mut k = Kinematics {
        alpha: [0.0; N_LINKS],
        omega: [0.0; N_LINKS],
        anchor: [base; N_LINKS],
        anchor_vel: [base_vel; N_LINKS],
        com: [base; N_LINKS],
        com_vel: [base_vel; N_LINKS],
        tip: [Vec2::zeros(); 2],
        tip_vel: [Vec2::zeros(); 2],
    };

    // Torso.
    k.alpha[link::TORSO] = q[2];
    k.omega[link::TORSO] = qd[2];
    let c0 = model.links[link::TORSO].com_local;
    let (s, c) = q[2].sin_cos();
    let r = rot(c, s, Vec2::new(c0[0], c0[1]));
    k.com[link::TORSO] = base + r;
    k.com_vel[link::TORSO] = base_vel + qd[2] * perp(r);

    // Legs: (first joint coord, link indices).
    for (leg, &(j0, l1, l2, l3)) in [
        (3usize, link::THIGH_L, link::SHANK_L, link::FOOT_L),
        (6usize, link::THIGH_R, link::SHANK_R, link::FOOT_R),
    ]
    .iter()
    .enumerate()
    {
        let mut alpha = q[2];
        let mut omega = qd[2];
        let mut anchor = base;
        let mut anchor_vel = base_vel;
        for (step_idx, &body) in [l1, l2, l3].iter().enumerate() {
            let coord_idx = j0 + step_idx;
            alpha += q[coord_idx];
            omega += qd[coord_idx];
            k.alpha[body] = alpha;
            k.omega[body] = omega;
            k.anchor[body] = anchor;
            k.anchor_vel[body] = anchor_vel;
            let (s, c) = alpha.sin_cos();
            let lp = &model.links[body];
            let rc = rot(c, s, Vec2::new(lp.com_local[0], lp.com_local[1]));
            k.com[body] = anchor + rc;
            k.com_vel[body] = anchor_vel + omega * perp(rc);
            // Distal point: next anchor or foot tip.
            let rd = rot(c, s, Vec2::new(0.0, -lp.length));
            let distal = anchor + rd;
            let distal_vel = anchor_vel + omega * perp(rd);
            if step_idx == 2 {
                k.tip[leg] = distal;
                k.tip_vel[leg] = distal_vel;
            } else {
                anchor = distal;
                anchor_vel = distal_vel;
            }
        }
    }
    k
}

/// Jacobian column of a body's COM with respect to an angle coordinate.
#[inline]
fn angle_column(k: &Kinematics, body: usize, coord_idx: usize) -> Vec2 {
    let anchor = k.anchor[ANGLE_ANCHOR_BODY[coord_idx - 2]];
    perp(k.com[body] - anchor)
}

/// Mass matrix assembled from COM Jacobians: M = sum_b m_b J_v^T J_v + I_b J_w^T J_w.
pub fn mass_matrix(model: &RobotModel, k: &Kinematics) -> MatN {
    let mut m = MatN::zeros();
    for body in 0..N_LINKS {
        let lp = &model.links[body];
        let coords = BODY_ANGLE_COORDS[body];
        // Linear part: columns for x, z and each ancestor angle.
        // x and z columns are the unit vectors.
        m[(0, 0)] += lp.mass;
        m[(1, 1)] += lp.mass;
        let cols: Vec<(usize, Vec2)> =
            coords.iter().map(|&ci| (ci, angle_column(k, body, ci))).collect();
        for &(ci, col) in &cols {
            m[(0, ci)] += lp.mass * col.x;
            m[(1, ci)] += lp.mass * col.y;
            for &(cj, col2) in &cols {
                if cj >= ci {
                    m[(ci, cj)] += lp.mass * col.dot(&col2) + lp.inertia;
                }
            }
        }
    }
    // Reflected rotor inertia on the joint coordinates.
    for j in 0..N_JOINTS {
        m[(coord::JOINT0 + j, coord::JOINT0 + j)] += model.armature;
    }
    // Mirror the upper triangle.
    for i in 0..N_COORDS {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
    m
}

/// Gravity generalized force dV/dq (V = sum_b m_b g z_b).
fn gravity_force(model: &RobotModel, k: &Kinematics) -> VecN {
    let mut g = VecN::zeros();
    for body in 0..N_LINKS {
        let mg = model.links[body].mass * model.gravity;
        g[1] += mg;
        for &ci in BODY_ANGLE_COORDS[body] {
            g[ci] += mg * angle_column(k, body, ci).y;
        }
    }
    g
}

/// Kinetic-energy gradient dT/dq. For an angle coordinate j with anchor
/// velocity va_j, dT/dq_j = -sum_{b affected} m_b cross(va_j, v_b); the x and
/// z components vanish (translation invariance), which is what makes the
/// momentum update exactly conservative in those directions.
fn kinetic_gradient(model: &RobotModel, k: &Kinematics) -> VecN {
    let mut out = VecN::zeros();
    for body in 0..N_LINKS {
        let mv = model.links[body].mass;
        let v = k.com_vel[body];
        for &ci in BODY_ANGLE_COORDS[body] {
            let va = k.anchor_vel[ANGLE_ANCHOR_BODY[ci - 2]];
            out[ci] -= mv * cross2(va, v);
        }
    }
    out
}

/// Total kinetic energy at the given state, rotor inertia included.
pub fn kinetic_energy(model: &RobotModel, state: &SimState) -> f64 {
    let k = forward_kinematics(model, state);
    let mut t = 0.0;
    for body in 0..N_LINKS {
        let lp = &model.links[body];
        t += 0.5 * lp.mass * k.com_vel[body].norm_squared();
        t += 0.5 * lp.inertia * k.omega[body] * k.omega[body];
    }
    for j in 0..N_JOINTS {
        let w = state.qdot[coord::JOINT0 + j];
        t += 0.5 * model.armature * w * w;
    }
    t
}

/// Total gravitational potential energy (zero level at z = 0).
pub fn potential_energy(model: &RobotModel, state: &SimState) -> f64 {
    let k = forward_kinematics(model, state);
    (0..N_LINKS).map(|b| model.links[b].mass * model.gravity * k.com[b].y).sum()
}

// ---------------------------------------------------------------------------
// Contact
// ---------------------------------------------------------------------------

/// Per-foot contact force (world frame) under the penalty model. The normal
/// component never pulls.
fn contact_force(contact: &ContactParams, tip: Vec2, tip_vel: Vec2) -> Option<Vec2> {
    let penetration = -tip.y;
    if penetration <= 0.0 {
        return None;
    }
    let f_n = (contact.k_n * penetration - contact.c_n * tip_vel.y).max(0.0);
    let f_t_raw = -TANGENTIAL_DAMPING * tip_vel.x;
    let bound = contact.mu_fric * f_n;
    let f_t = f_t_raw.clamp(-bound, bound);
    Some(Vec2::new(f_t, f_n))
}

/// Generalized force from a world-frame force applied at a foot tip.
fn apply_tip_force(k: &Kinematics, foot_body: usize, leg: usize, f: Vec2, q_out: &mut VecN) {
    q_out[0] += f.x;
    q_out[1] += f.y;
    for &ci in BODY_ANGLE_COORDS[foot_body] {
        let anchor = k.anchor[ANGLE_ANCHOR_BODY[ci - 2]];
        let col = perp(k.tip[leg] - anchor);
        q_out[ci] += f.dot(&col);
    }
}

// ---------------------------------------------------------------------------
// Step
// ---------------------------------------------------------------------------

/// Advances the state by one physics substep under the given joint torques.
///
/// Preconditions: `0 < dt <= 2.5e-3` and finite torques. Returns
/// [`DynamicsError::NonFiniteState`] if the update blows up.
pub fn step(
    state: &SimState,
    model: &RobotModel,
    contact: &ContactParams,
    torques: &[f64; N_JOINTS],
    dt: f64,
) -> Result<SimState, DynamicsError> {
    assert!(dt > 0.0 && dt <= 2.5e-3, "dt must be in (0, 2.5e-3], got {dt}");
    assert!(torques.iter().all(|t| t.is_finite()), "torques must be finite");

    let k = forward_kinematics(model, state);
    let m = mass_matrix(model, &k);

    // Generalized applied force: joint torques + contact.
    let mut q_ext = VecN::zeros();
    for j in 0..N_JOINTS {
        q_ext[coord::JOINT0 + j] = torques[j];
    }
    let mut foot_contact = [false, false];
    if !state.pinned {
        for (leg, &foot_body) in [link::FOOT_L, link::FOOT_R].iter().enumerate() {
            if let Some(f) = contact_force(contact, k.tip[leg], k.tip_vel[leg]) {
                apply_tip_force(&k, foot_body, leg, f, &mut q_ext);
                foot_contact[leg] = true;
            }
        }
    }

    let rhs = q_ext - gravity_force(model, &k) + kinetic_gradient(model, &k);
    let qdot_vec = VecN::from_column_slice(&state.qdot);
    let mut new_state = state.clone();

    if state.pinned {
        // Reduced 6x6 joint system; base rows stay frozen.
        let mj = m.fixed_view::<N_JOINTS, N_JOINTS>(coord::JOINT0, coord::JOINT0).into_owned();
        let vj = qdot_vec.fixed_rows::<N_JOINTS>(coord::JOINT0).into_owned();
        let chol = mj.cholesky().ok_or(DynamicsError::NonFiniteState { t: state.t })?;
        let mut p = mj * vj;
        p += dt * rhs.fixed_rows::<N_JOINTS>(coord::JOINT0);
        let v_mid = chol.solve(&p);
        for j in 0..N_JOINTS {
            new_state.q[coord::JOINT0 + j] += dt * v_mid[j];
        }
        // Velocity consistent with the carried momentum at the new configuration.
        let k2 = forward_kinematics(model, &new_state);
        let m2 = mass_matrix(model, &k2);
        let mj2 = m2.fixed_view::<N_JOINTS, N_JOINTS>(coord::JOINT0, coord::JOINT0).into_owned();
        let chol2 = mj2.cholesky().ok_or(DynamicsError::NonFiniteState { t: state.t })?;
        let v_new = chol2.solve(&p);
        for j in 0..N_JOINTS {
            new_state.qdot[coord::JOINT0 + j] = v_new[j];
        }
    } else {
        let chol = m.cholesky().ok_or(DynamicsError::NonFiniteState { t: state.t })?;
        let mut p = m * qdot_vec;
        p += dt * rhs;
        let v_mid = chol.solve(&p);
        for i in 0..N_COORDS {
            new_state.q[i] += dt * v_mid[i];
        }
        let k2 = forward_kinematics(model, &new_state);
        let m2 = mass_matrix(model, &k2);
        let chol2 = m2.cholesky().ok_or(DynamicsError::NonFiniteState { t: state.t })?;
        let v_new = chol2.solve(&p);
        for i in 0..N_COORDS {
            new_state.qdot[i] = v_new[i];
        }
    }

    // Joint limits: clamp and zero the velocity of any joint that exceeded.
    for j in 0..N_JOINTS {
        let ci = coord::JOINT0 + j;
        let [lo, hi] = model.joint_limits[j];
        if new_state.q[ci] < lo {
            new_state.q[ci] = lo;
            new_state.qdot[ci] = 0.0;
        } else if new_state.q[ci] > hi {
            new_state.q[ci] = hi;
            new_state.qdot[ci] = 0.0;
        }
    }

    new_state.t = state.t + dt;
    new_state.foot_contact = foot_contact;
    if !new_state.is_finite() {
        return Err(DynamicsError::NonFiniteState { t: state.t });
    }
    Ok(new_state)
}

// ---------------------------------------------------------------------------
// Canonical poses
// ---------------------------------------------------------------------------

/// Standing state with straight legs and feet resting at the static
/// equilibrium penetration, where the contact springs exactly balance gravity.
pub fn standing_state(model: &RobotModel, contact: &ContactParams) -> SimState {
    let penetration = model.total_mass() * model.gravity / (2.0 * contact.k_n);
    let mut q = [0.0; N_COORDS];
    q[coord::BASE_Z] = model.leg_extent() - penetration;
    SimState::new(q)
}

/// Hip height of the reference standing pose, used by the fall-termination
/// threshold.
pub fn standing_height(model: &RobotModel, contact: &ContactParams) -> f64 {
    standing_state(model, contact).q[coord::BASE_Z]
}

// ---------------------------------------------------------------------------
// Trajectory CSV dump
// ---------------------------------------------------------------------------

/// One control-tick row of a trajectory log.
#[derive(Debug, Clone)]
pub struct TickRow {
    pub t: f64,
    pub q: [f64; N_COORDS],
    pub qd: [f64; N_COORDS],
    pub tau: [f64; N_JOINTS],
    pub contact: [bool; 2],
    /// Present only in environment rollout logs.
    pub reward: Option<f64>,
}

/// Serializes tick rows in the standard dump format:
/// `t,q0..q8,qd0..qd8,tau0..tau5,contactL,contactR[,reward]`.
pub fn trajectory_csv(rows: &[TickRow], with_reward: bool) -> String {
    let mut s = String::new();
    s.push('t');
    for i in 0..N_COORDS {
        s.push_str(&format!(",q{i}"));
    }
    for i in 0..N_COORDS {
        s.push_str(&format!(",qd{i}"));
    }
    for i in 0..N_JOINTS {
        s.push_str(&format!(",tau{i}"));
    }
    s.push_str(",contactL,contactR");
    if with_reward {
        s.push_str(",reward");
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{}", r.t));
        for v in r.q.iter().chain(r.qd.iter()).chain(r.tau.iter()) {
            s.push_str(&format!(",{v}"));
        }
        s.push_str(&format!(",{},{}", u8::from(r.contact[0]), u8::from(r.contact[1])));
        if with_reward {
            s.push_str(&format!(",{}", r.reward.unwrap_or(0.0)));
        }
        s.push('\n');
    }
    s
}
