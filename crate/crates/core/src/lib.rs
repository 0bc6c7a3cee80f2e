//! Planar biped locomotion lab.
//!
//! Everything needed to run the full transfer pipeline against a built-in
//! surrogate world lives here:
//!
//! * [`dynamics`] — planar articulated rigid-body simulation with penalty
//!   ground contact.
//! * [`actuator`] — the NN-PD motor model (shared gain network, per-group
//!   scales, torque clip) and its constant-gain ablation.
//! * [`world`] / [`env`] — parameterized worlds, the surrogate stand-in for
//!   real hardware, and the MDP wrapper (observations, reference gait,
//!   reward, termination, sensor noise).
//! * [`nnet`] — small dense networks with hand-rolled reverse-mode gradients
//!   and Adam.
//! * [`cmaes`] — the evolution strategy behind every identification fit.
//! * [`presysid`] — scripted data collection, the trajectory-matching loss,
//!   and parameter-bound extraction.
//! * [`pup`] — PPO training of the latent-conditioned policy and the
//!   nominal/robust baselines.
//! * [`postsysid`] — Gaussian-process Bayesian optimization over the latent.
//! * [`pipeline`] — file-based stage orchestration used by the CLI.

pub mod actuator;
pub mod cmaes;
pub mod dynamics;
pub mod env;
pub mod nnet;
pub mod pipeline;
pub mod postsysid;
pub mod presysid;
pub mod pup;
pub mod seed;
pub mod world;
