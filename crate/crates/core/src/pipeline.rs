//! File-based stage orchestration: the pipeline is a DAG of plain artifacts
//! (JSON parameters, CSV logs, JSON weight files) produced by sequential
//! stages, each seeded from the master seed. Rerunning a stage with the same
//! configuration and inputs reproduces its outputs byte for byte.

use crate::cmaes;
use crate::dynamics::TickRow;
use crate::env::{EnvConfig, EpisodeRunner};
use crate::postsysid::{self, BoBudget};
use crate::pup::ETA_DIM;
use crate::presysid::{
    self, bounds_report_csv, CollectConfig, ParamBounds, PresysidConfig, TrajectorySet,
};
use crate::pup::{self, PolicyBundle, PolicyKind, PpoConfig};
use crate::seed;
use crate::world::{ModelParams, SurrogateProfile, SurrogateWorld, World, WorldRef, MU_DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing prerequisite artifact: {0} (run the producing stage first)")]
    MissingArtifact(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed artifact {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Train(#[from] pup::TrainError),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Root experiment configuration; round-trips losslessly through JSON and
/// rejects unknown keys.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub surrogate: SurrogateProfile,
    pub env: EnvConfig,
    pub collect: CollectConfig,
    pub presysid: PresysidConfig,
    pub ppo: PpoConfig,
    pub bo: BoBudget,
    pub evaluate_runs: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            surrogate: SurrogateProfile::OutOfClass,
            env: EnvConfig::default(),
            collect: CollectConfig::default(),
            presysid: PresysidConfig::default(),
            ppo: PpoConfig::default(),
            bo: BoBudget::default(),
            evaluate_runs: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    /// The hidden world every experiment runs against, derived from the
    /// master seed; its parameters never leave this constructor.
    pub fn surrogate_world(&self) -> SurrogateWorld {
        SurrogateWorld::from_seed(self.surrogate, seed::derive(self.seed, "surrogate"))
    }
}

// ---------------------------------------------------------------------------
// Artifact names and helpers
// ---------------------------------------------------------------------------

pub mod artifact {
    pub const TRAJECTORIES_SIM: &str = "trajectories_sim.json";
    pub const TRAJECTORIES_SURROGATE: &str = "trajectories_surrogate.json";
    pub const BOUNDS: &str = "bounds.json";
    pub const BOUNDS_REPORT: &str = "bounds_report.csv";
    pub const PUP_WEIGHTS: &str = "pup.weights";
    pub const NOMINAL_WEIGHTS: &str = "nominal.weights";
    pub const ROBUST_WEIGHTS: &str = "robust.weights";
    pub const TRAINING_TRACE: &str = "training_trace.csv";
    pub const TRANSFER_TRACE: &str = "transfer_trace.csv";
    pub const EVALUATION: &str = "evaluation.csv";
    pub const REPORT: &str = "report.csv";

    pub fn weights_for(kind: super::PolicyKind) -> &'static str {
        match kind {
            super::PolicyKind::Pup => PUP_WEIGHTS,
            super::PolicyKind::Nominal => NOMINAL_WEIGHTS,
            super::PolicyKind::Robust => ROBUST_WEIGHTS,
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|source| PipelineError::Io { path: parent.to_path_buf(), source })?;
    }
    fs::write(path, contents).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn read_artifact(path: &Path) -> Result<String, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.into(), source })
}

fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, s: &str) -> Result<T, PipelineError> {
    serde_json::from_str(s)
        .map_err(|e| PipelineError::Malformed { path: path.into(), message: e.to_string() })
}

/// The bounds stage output: everything needed to reconstruct the training
/// distribution and the report figure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundsArtifact {
    pub global_box: [[f64; 2]; MU_DIM],
    pub nominal_mu: [f64; MU_DIM],
    pub phi: Vec<f64>,
    pub nominal_loss: f64,
    pub subset_mu: Vec<[f64; MU_DIM]>,
    pub lb: [f64; MU_DIM],
    pub ub: [f64; MU_DIM],
}

impl BoundsArtifact {
    pub fn bounds(&self) -> ParamBounds {
        ParamBounds { lb: self.lb, ub: self.ub }
    }

    pub fn nominal_params(&self) -> ModelParams {
        ModelParams::with_mu(self.nominal_mu, self.phi.clone())
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WorldChoice {
    Sim,
    Surrogate,
}

/// Collects the scripted trajectory set on the chosen world and dumps both
/// the JSON set and one state-log CSV per trajectory.
pub fn stage_collect(
    cfg: &ExperimentConfig,
    out: &Path,
    which: WorldChoice,
) -> Result<(), PipelineError> {
    let training_world;
    let surrogate_world;
    let (world_ref, tag, file) = match which {
        WorldChoice::Sim => {
            training_world = World::from_params(&ModelParams::nominal());
            (WorldRef::Training(&training_world), "sim", artifact::TRAJECTORIES_SIM)
        }
        WorldChoice::Surrogate => {
            surrogate_world = cfg.surrogate_world();
            (WorldRef::Surrogate(&surrogate_world), "surrogate", artifact::TRAJECTORIES_SURROGATE)
        }
    };
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &format!("collect/{tag}")));
    let (data, log) = presysid::collect_scripted(world_ref, &cfg.collect, &mut rng);
    let json = serde_json::to_string(&data).expect("trajectory serialization cannot fail");
    write_file(&out.join(file), &json)?;
    if !log.discarded.is_empty() {
        write_file(
            &out.join(format!("collect_{tag}_discarded.txt")),
            &(log.discarded.join("\n") + "\n"),
        )?;
    }
    // Per-trajectory state dumps in the standard CSV format.
    for traj in &data.trajectories {
        let rows = presysid::rerun_with_log(world_ref, traj);
        let csv = crate::dynamics::trajectory_csv(&rows, false);
        write_file(&out.join("trajectories").join(tag).join(format!("{}.csv", traj.name)), &csv)?;
    }
    Ok(())
}

/// Identifies nominal parameters and bounds from the surrogate trajectory
/// set; writes `bounds.json`, the normalized report bars, and per-fit CMA
/// traces.
pub fn stage_presysid(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    let path = out.join(artifact::TRAJECTORIES_SURROGATE);
    let data: TrajectorySet = parse_json(&path, &read_artifact(&path)?)?;
    let result = presysid::identify_bounds(&data, &cfg.presysid, seed::derive(cfg.seed, "presysid"));
    let art = BoundsArtifact {
        global_box: crate::world::GLOBAL_BOX,
        nominal_mu: result.nominal.mu,
        phi: result.nominal.phi.clone(),
        nominal_loss: result.nominal_loss,
        subset_mu: result.subset_fits.iter().map(|f| f.mu).collect(),
        lb: result.bounds.lb,
        ub: result.bounds.ub,
    };
    write_file(
        &out.join(artifact::BOUNDS),
        &serde_json::to_string_pretty(&art).expect("bounds serialization cannot fail"),
    )?;
    write_file(
        &out.join(artifact::BOUNDS_REPORT),
        &bounds_report_csv(&result.nominal.mu, &result.bounds),
    )?;
    for (name, rows) in &result.traces {
        write_file(&out.join("cma").join(format!("{name}.csv")), &cmaes::trace_csv(rows))?;
    }
    Ok(())
}

/// Trains one policy against the identified bounds; writes its weight file
/// and the training trace.
pub fn stage_train(
    cfg: &ExperimentConfig,
    out: &Path,
    kind: PolicyKind,
) -> Result<(), PipelineError> {
    let path = out.join(artifact::BOUNDS);
    let art: BoundsArtifact = parse_json(&path, &read_artifact(&path)?)?;
    let result = pup::train(
        kind,
        &art.nominal_params(),
        &art.bounds(),
        &cfg.env,
        &cfg.ppo,
        seed::derive(cfg.seed, &format!("train/{}", kind.name())),
    )?;
    write_file(&out.join(artifact::weights_for(kind)), &result.bundle.save_json())?;
    write_file(
        &out.join(artifact::TRAINING_TRACE),
        &pup::training_trace_csv(&result.trace, kind.name()),
    )?;
    Ok(())
}

/// Runs the 25-rollout latent search on the surrogate; writes the trace.
pub fn stage_transfer(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    let weights_path = out.join(artifact::PUP_WEIGHTS);
    let bundle = load_bundle(&weights_path)?;
    // bounds.json is a declared prerequisite of the stage even though the
    // latent box itself is fixed; fail early if the pipeline is out of order.
    let _ = read_artifact(&out.join(artifact::BOUNDS))?;
    let world = cfg.surrogate_world();
    let result = postsysid::transfer(&bundle, &world, &cfg.env, &cfg.bo, cfg.seed);
    write_file(&out.join(artifact::TRANSFER_TRACE), &postsysid::transfer_trace_csv(&result.samples))
}

fn load_bundle(path: &Path) -> Result<PolicyBundle, PipelineError> {
    let s = read_artifact(path)?;
    PolicyBundle::load_json(&s)
        .map_err(|e| PipelineError::Malformed { path: path.into(), message: e.to_string() })
}

/// Best latent recorded in a transfer trace.
pub fn eta_star_from_trace(path: &Path) -> Result<[f64; ETA_DIM], PipelineError> {
    let s = read_artifact(path)?;
    let mut best: Option<(f64, [f64; ETA_DIM])> = None;
    for line in s.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(PipelineError::Malformed {
                path: path.into(),
                message: format!("expected 6 columns, got {}", cols.len()),
            });
        }
        let parse = |c: &str| -> Result<f64, PipelineError> {
            c.parse().map_err(|_| PipelineError::Malformed {
                path: path.into(),
                message: format!("bad float: {c}"),
            })
        };
        let eta = [parse(cols[1])?, parse(cols[2])?, parse(cols[3])?];
        let fitness = parse(cols[4])?;
        if best.is_none_or(|(bf, _)| fitness > bf) {
            best = Some((fitness, eta));
        }
    }
    best.map(|(_, eta)| eta)
        .ok_or_else(|| PipelineError::Malformed { path: path.into(), message: "empty trace".into() })
}

/// One evaluation row: distance and elapsed time before falling.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub policy: String,
    pub direction: String,
    pub run: usize,
    pub distance_m: f64,
    pub time_s: f64,
}

pub fn evaluation_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("policy,direction,run,distance_m,time_s\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.policy, r.direction, r.run, r.distance_m, r.time_s));
    }
    s
}

/// Runs every trained policy `evaluate_runs` times on the surrogate with
/// greedy actions, recording distance and elapsed time; PUP is conditioned on
/// the transferred latent, the baselines on a zero latent. Also dumps one
/// rollout log per run.
pub fn stage_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    let eta_star = eta_star_from_trace(&out.join(artifact::TRANSFER_TRACE))?;
    let world = cfg.surrogate_world();
    let direction = format!("{:?}", cfg.env.direction).to_lowercase();
    let mut rows = Vec::new();
    for kind in [PolicyKind::Pup, PolicyKind::Nominal, PolicyKind::Robust] {
        let bundle = load_bundle(&out.join(artifact::weights_for(kind)))?;
        let eta = match kind {
            PolicyKind::Pup => eta_star,
            _ => [0.0; ETA_DIM],
        };
        for run in 0..cfg.evaluate_runs {
            let (distance, time, log) = evaluate_rollout(
                &bundle,
                &world,
                &cfg.env,
                &eta,
                seed::derive_indexed(cfg.seed, &format!("evaluate/{}", kind.name()), run as u64),
            );
            write_file(
                &out.join("rollout_logs").join(format!("{}_run{run}.csv", kind.name())),
                &crate::dynamics::trajectory_csv(&log, true),
            )?;
            rows.push(EvalRow {
                policy: kind.name().to_string(),
                direction: direction.clone(),
                run,
                distance_m: distance,
                time_s: time,
            });
        }
    }
    write_file(&out.join(artifact::EVALUATION), &evaluation_csv(&rows))
}

fn evaluate_rollout(
    bundle: &PolicyBundle,
    world: &SurrogateWorld,
    env_cfg: &EnvConfig,
    eta: &[f64; ETA_DIM],
    rollout_seed: u64,
) -> (f64, f64, Vec<TickRow>) {
    let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed);
    let mut ep = EpisodeRunner::new(WorldRef::Surrogate(world), env_cfg, &mut rng);
    ep.enable_logging();
    loop {
        let action = bundle.act_greedy(ep.obs(), eta);
        if ep.step(&action, &mut rng).done {
            break;
        }
    }
    (ep.distance(), ep.time(), ep.take_log())
}

/// Aggregates the evaluation into the comparison table and regenerates the
/// normalized bounds bars.
pub fn stage_report(cfg: &ExperimentConfig, out: &Path) -> Result<(), PipelineError> {
    let _ = cfg;
    let bounds_path = out.join(artifact::BOUNDS);
    let art: BoundsArtifact = parse_json(&bounds_path, &read_artifact(&bounds_path)?)?;
    write_file(&out.join(artifact::BOUNDS_REPORT), &bounds_report_csv(&art.nominal_mu, &art.bounds()))?;

    let eval_path = out.join(artifact::EVALUATION);
    let s = read_artifact(&eval_path)?;
    let mut per_policy: Vec<(String, String, Vec<f64>, Vec<f64>)> = Vec::new();
    for line in s.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(PipelineError::Malformed {
                path: eval_path.clone(),
                message: format!("expected 5 columns, got {}", cols.len()),
            });
        }
        let (policy, direction) = (cols[0].to_string(), cols[1].to_string());
        let d: f64 = cols[3].parse().unwrap_or(f64::NAN);
        let t: f64 = cols[4].parse().unwrap_or(f64::NAN);
        match per_policy.iter_mut().find(|(p, dir, _, _)| *p == policy && *dir == direction) {
            Some((_, _, ds, ts)) => {
                ds.push(d);
                ts.push(t);
            }
            None => per_policy.push((policy, direction, vec![d], vec![t])),
        }
    }
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        (mean, sd)
    };
    let mut csv = String::from(
        "policy,direction,runs,mean_distance_m,std_distance_m,mean_time_s,std_time_s\n",
    );
    for (policy, direction, ds, ts) in &per_policy {
        let (md, sd) = stats(ds);
        let (mt, st) = stats(ts);
        csv.push_str(&format!("{policy},{direction},{},{md},{sd},{mt},{st}\n", ds.len()));
    }
    write_file(&out.join(artifact::REPORT), &csv)
}
