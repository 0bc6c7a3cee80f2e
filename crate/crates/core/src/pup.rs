//! Projected Universal Policy: a latent projection module plus a
//! latent-conditioned discrete policy, trained with PPO under domain
//! randomization over identified parameter bounds. The same trainer produces
//! the Nominal (single-model) and Robust (randomization without conditioning)
//! baselines.

use crate::env::{EnvConfig, EpisodeRunner, Observation, OBS_DIM};
use crate::nnet::{Activation, AdamNet, ForwardCache, Net, NetGrads};
use crate::presysid::ParamBounds;
use crate::seed;
use crate::world::{ModelParams, World, WorldRef, MU_DIM};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Latent dimension of the projection output.
pub const ETA_DIM: usize = 3;
/// Discrete action bins per joint.
pub const N_BINS: usize = 11;
/// Policy/value input width: observation plus latent.
pub const POLICY_IN: usize = OBS_DIM + ETA_DIM;
/// Policy head width: one categorical per joint.
pub const POLICY_OUT: usize = 6 * N_BINS;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iteration}: mean return is not finite")]
    Diverged { iteration: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub steps_per_iter: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub iterations: usize,
    pub entropy_coef: f64,
    /// Optional auxiliary mirror-symmetry loss weight; 0 disables it.
    pub mirror_loss_weight: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            steps_per_iter: 20_000,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 10,
            minibatch: 2048,
            lr: 3e-4,
            iterations: 300,
            entropy_coef: 0.01,
            mirror_loss_weight: 0.0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err("clip must be in (0, 1)".into());
        }
        if self.steps_per_iter == 0 || self.epochs == 0 || self.minibatch == 0 {
            return Err("budgets must be positive".into());
        }
        Ok(())
    }
}

/// How the policy's latent tail is fed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    /// Latent comes from the projection module over (noisy) normalized mu.
    Projected,
    /// Latent input is architecturally zero (Nominal/Robust baselines).
    Zeros,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Pup,
    Nominal,
    Robust,
}

impl PolicyKind {
    pub fn latent_mode(self) -> LatentMode {
        match self {
            PolicyKind::Pup => LatentMode::Projected,
            _ => LatentMode::Zeros,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Pup => "pup",
            PolicyKind::Nominal => "nominal",
            PolicyKind::Robust => "robust",
        }
    }
}

/// Trained weights: projection (mu -> eta), policy (obs + eta -> 6x11
/// logits), and the value function, plus the frozen gain net the policy was
/// trained against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub projection: Net,
    pub policy: Net,
    pub value: Net,
    pub latent_mode: LatentMode,
    pub kind: PolicyKind,
    /// Gain-net weights of the training model class.
    pub phi: Vec<f64>,
}

impl PolicyBundle {
    pub fn init<R: Rng>(kind: PolicyKind, phi: Vec<f64>, rng: &mut R) -> Self {
        let projection =
            Net::xavier(&[MU_DIM, 8, ETA_DIM], &[Activation::Tanh, Activation::Tanh], rng);
        let mut policy = Net::xavier(
            &[POLICY_IN, 64, 64, POLICY_OUT],
            &[Activation::Tanh, Activation::Tanh, Activation::Linear],
            rng,
        );
        policy.scale_last_layer(0.01);
        let value = Net::xavier(
            &[POLICY_IN, 64, 64, 1],
            &[Activation::Tanh, Activation::Tanh, Activation::Linear],
            rng,
        );
        Self { projection, policy, value, latent_mode: kind.latent_mode(), kind, phi }
    }

    /// Latent for a normalized (possibly noise-perturbed) parameter vector.
    pub fn project(&self, mu_unit: &[f64; MU_DIM]) -> [f64; ETA_DIM] {
        match self.latent_mode {
            LatentMode::Zeros => [0.0; ETA_DIM],
            LatentMode::Projected => {
                let out = self.projection.forward(mu_unit);
                [out[0], out[1], out[2]]
            }
        }
    }

    pub fn input(obs: &Observation, eta: &[f64; ETA_DIM]) -> [f64; POLICY_IN] {
        let mut x = [0.0; POLICY_IN];
        x[..OBS_DIM].copy_from_slice(&obs.0);
        x[OBS_DIM..].copy_from_slice(eta);
        x
    }

    /// Greedy action for deployment: per-joint argmax over the bin logits.
    pub fn act_greedy(&self, obs: &Observation, eta: &[f64; ETA_DIM]) -> [f64; 6] {
        let logits = self.policy.forward(&Self::input(obs, eta));
        let mut bins = [0u8; 6];
        for j in 0..6 {
            let head = &logits[j * N_BINS..(j + 1) * N_BINS];
            let mut best = 0;
            for k in 1..N_BINS {
                if head[k] > head[best] {
                    best = k;
                }
            }
            bins[j] = best as u8;
        }
        decode_bins(&bins)
    }

    pub fn save_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("bundle serialization cannot fail")
    }

    pub fn load_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Bin index -> action value: b in {0..10} maps to -1 + b/5.
pub fn decode_bins(bins: &[u8; 6]) -> [f64; 6] {
    let mut out = [0.0; 6];
    for j in 0..6 {
        out[j] = -1.0 + f64::from(bins[j]) / 5.0;
    }
    out
}

// ---------------------------------------------------------------------------
// Parameter sampling and policy input
// ---------------------------------------------------------------------------

/// One uniform draw per rollout from the identified box.
pub fn sample_env_params<R: Rng>(bounds: &ParamBounds, rng: &mut R) -> [f64; MU_DIM] {
    let mut mu = [0.0; MU_DIM];
    for d in 0..MU_DIM {
        mu[d] = if bounds.ub[d] > bounds.lb[d] {
            rng.random_range(bounds.lb[d]..bounds.ub[d])
        } else {
            bounds.lb[d]
        };
    }
    mu
}

/// Per-rollout projection input: normalized mu plus U(-noise, noise) noise,
/// clamped back into the unit box.
pub fn noisy_mu_input<R: Rng>(mu: &[f64; MU_DIM], noise: f64, rng: &mut R) -> [f64; MU_DIM] {
    let mut unit = ModelParams::normalize(mu);
    if noise > 0.0 {
        for u in unit.iter_mut() {
            *u = (*u + rng.random_range(-noise..noise)).clamp(0.0, 1.0);
        }
    }
    unit
}

// ---------------------------------------------------------------------------
// Action distribution helpers
// ---------------------------------------------------------------------------

/// Per-head softmax probabilities written into `probs` (length POLICY_OUT).
fn softmax_heads(logits: &[f64], probs: &mut [f64]) {
    for j in 0..6 {
        let head = &logits[j * N_BINS..(j + 1) * N_BINS];
        let out = &mut probs[j * N_BINS..(j + 1) * N_BINS];
        let m = head.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..N_BINS {
            out[k] = (head[k] - m).exp();
            z += out[k];
        }
        for v in out.iter_mut() {
            *v /= z;
        }
    }
}

/// Samples one bin per joint; returns (bins, total log-probability).
fn sample_action<R: Rng>(probs: &[f64], rng: &mut R) -> ([u8; 6], f64) {
    let mut bins = [0u8; 6];
    let mut logp = 0.0;
    for j in 0..6 {
        let head = &probs[j * N_BINS..(j + 1) * N_BINS];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = N_BINS - 1;
        for (k, p) in head.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = k;
                break;
            }
        }
        bins[j] = chosen as u8;
        logp += head[chosen].max(1e-300).ln();
    }
    (bins, logp)
}

fn log_prob_of(probs: &[f64], bins: &[u8; 6]) -> f64 {
    (0..6).map(|j| probs[j * N_BINS + bins[j] as usize].max(1e-300).ln()).sum()
}

#[cfg_attr(not(test), allow(dead_code))]
fn entropy_of(probs: &[f64]) -> f64 {
    let mut h = 0.0;
    for j in 0..6 {
        for k in 0..N_BINS {
            let p = probs[j * N_BINS + k];
            if p > 1e-300 {
                h -= p * p.ln();
            }
        }
    }
    h
}

/// Output-logit gradient of the clipped PPO surrogate plus entropy bonus for
/// one sample. Returns the gradient and the probability ratio.
///
/// The surrogate gradient is exactly zero when the ratio is outside
/// [1-clip, 1+clip] on the side where clipping is active.
pub fn policy_logits_grad(
    logits: &[f64],
    bins: &[u8; 6],
    logp_old: f64,
    advantage: f64,
    clip: f64,
    entropy_coef: f64,
    grad: &mut [f64],
) -> f64 {
    let mut probs = [0.0; POLICY_OUT];
    softmax_heads(logits, &mut probs);
    let logp_new = log_prob_of(&probs, bins);
    let ratio = (logp_new - logp_old).exp();
    let surr_unclipped = ratio * advantage;
    let surr_clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    // d(-min)/d logp: flows only when the unclipped branch is the minimum.
    let dlogp = if surr_unclipped <= surr_clipped { -advantage * ratio } else { 0.0 };

    for j in 0..6 {
        let head_p = &probs[j * N_BINS..(j + 1) * N_BINS];
        let g = &mut grad[j * N_BINS..(j + 1) * N_BINS];
        // Per-head entropy for the bonus gradient.
        let mut h = 0.0;
        for p in head_p {
            if *p > 1e-300 {
                h -= p * p.ln();
            }
        }
        for k in 0..N_BINS {
            let p = head_p[k];
            let dlogp_dz = if k == bins[j] as usize { 1.0 - p } else { -p };
            let dentropy_dz = -p * (p.max(1e-300).ln() + h);
            g[k] = dlogp * dlogp_dz - entropy_coef * dentropy_dz;
        }
    }
    ratio
}

// ---------------------------------------------------------------------------
// Mirror symmetry (optional auxiliary loss)
// ---------------------------------------------------------------------------

/// Swaps left and right leg channels of an observation (both time slices);
/// pitch is unchanged in the sagittal model.
pub fn mirror_obs(input: &[f64; POLICY_IN]) -> [f64; POLICY_IN] {
    let mut out = *input;
    for t in 0..2 {
        let base = t * 6;
        for j in 0..3 {
            out.swap(base + j, base + j + 3);
        }
    }
    out
}

/// Swaps the left and right action heads of a logit vector.
pub fn mirror_logits(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    for j in 0..3 {
        for k in 0..N_BINS {
            out.swap(j * N_BINS + k, (j + 3) * N_BINS + k);
        }
    }
    out
}

/// Mean squared difference between the policy at each input and the mirrored
/// policy at the mirrored input.
pub fn mirror_loss(policy: &Net, inputs: &[[f64; POLICY_IN]]) -> f64 {
    if inputs.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for x in inputs {
        let a = policy.forward(x);
        let b = mirror_logits(&policy.forward(&mirror_obs(x)));
        total += a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    }
    total / inputs.len() as f64
}

// ---------------------------------------------------------------------------
// Rollout collection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct StepSample {
    input: [f64; POLICY_IN],
    mu_unit: [f64; MU_DIM],
    bins: [u8; 6],
    logp: f64,
    reward: f64,
    value: f64,
    advantage: f64,
    ret: f64,
}

#[derive(Debug, Clone)]
struct EpisodeData {
    steps: Vec<StepSample>,
    bootstrap_value: f64,
    total_reward: f64,
}

/// Computes GAE advantages and returns in place.
fn gae(steps: &mut [StepSample], bootstrap_value: f64, gamma: f64, lambda: f64) {
    let n = steps.len();
    let mut adv = 0.0;
    for t in (0..n).rev() {
        let next_v = if t + 1 < n { steps[t + 1].value } else { bootstrap_value };
        let delta = steps[t].reward + gamma * next_v - steps[t].value;
        adv = delta + gamma * lambda * adv;
        steps[t].advantage = adv;
        steps[t].ret = adv + steps[t].value;
    }
}

/// Runs one episode under the sampling policy. `truncated` episodes (horizon)
/// bootstrap with the value estimate of the final observation.
fn collect_episode(
    bundle: &PolicyBundle,
    kind: PolicyKind,
    nominal: &ModelParams,
    bounds: &ParamBounds,
    env_cfg: &EnvConfig,
    ppo: &PpoConfig,
    rollout_seed: u64,
) -> EpisodeData {
    let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed);
    // Per-rollout parameter draw.
    let mu = match kind {
        PolicyKind::Nominal => nominal.mu,
        _ => sample_env_params(bounds, &mut rng),
    };
    let mu_unit = noisy_mu_input(&mu, env_cfg.noise.mu_input_noise, &mut rng);
    let eta = bundle.project(&mu_unit);
    let params = ModelParams::with_mu(mu, bundle.phi.clone());
    let world = World::from_params(&params);
    let mut ep = EpisodeRunner::new(WorldRef::Training(&world), env_cfg, &mut rng);

    let mut cache = ForwardCache::default();
    let mut steps = Vec::with_capacity(256);
    let mut total_reward = 0.0;
    let bootstrap;
    loop {
        let input = PolicyBundle::input(ep.obs(), &eta);
        let logits = bundle.policy.forward_cached(&input, &mut cache);
        let mut probs = [0.0; POLICY_OUT];
        softmax_heads(logits, &mut probs);
        let (bins, logp) = sample_action(&probs, &mut rng);
        let action = decode_bins(&bins);
        let value = bundle.value.forward(&input)[0];
        let out = ep.step(&action, &mut rng);
        total_reward += out.reward;
        steps.push(StepSample {
            input,
            mu_unit,
            bins,
            logp,
            reward: out.reward,
            value,
            advantage: 0.0,
            ret: 0.0,
        });
        if out.done {
            bootstrap = if out.truncated {
                let last_input = PolicyBundle::input(ep.obs(), &eta);
                bundle.value.forward(&last_input)[0]
            } else {
                0.0
            };
            break;
        }
    }
    let mut ep_data = EpisodeData { steps, bootstrap_value: bootstrap, total_reward };
    gae(&mut ep_data.steps, ep_data.bootstrap_value, ppo.gamma, ppo.gae_lambda);
    ep_data
}

// ---------------------------------------------------------------------------
// PPO update
// ---------------------------------------------------------------------------

struct GradAccum {
    policy: NetGrads,
    value: NetGrads,
    projection: NetGrads,
}

impl GradAccum {
    fn zeros(bundle: &PolicyBundle) -> Self {
        Self {
            policy: NetGrads::zeros_like(&bundle.policy),
            value: NetGrads::zeros_like(&bundle.value),
            projection: NetGrads::zeros_like(&bundle.projection),
        }
    }

    fn add(&mut self, o: &GradAccum) {
        self.policy.add(&o.policy);
        self.value.add(&o.value);
        self.projection.add(&o.projection);
    }

    fn scale(&mut self, c: f64) {
        self.policy.scale(c);
        self.value.scale(c);
        self.projection.scale(c);
    }
}

/// Per-chunk gradient accumulation: deterministic regardless of worker count
/// because chunks are reduced in order.
#[allow(clippy::too_many_arguments)]
fn minibatch_grads(
    bundle: &PolicyBundle,
    samples: &[StepSample],
    indices: &[usize],
    clip: f64,
    entropy_coef: f64,
    mirror_weight: f64,
    train_projection: bool,
) -> GradAccum {
    let chunk_size = 256;
    let chunks: Vec<GradAccum> = indices
        .par_chunks(chunk_size)
        .map(|chunk| {
            let mut acc = GradAccum::zeros(bundle);
            let mut cache = ForwardCache::default();
            let mut vcache = ForwardCache::default();
            let mut pcache = ForwardCache::default();
            let mut mcache = ForwardCache::default();
            let mut input_grad = Vec::new();
            let mut logit_grad = vec![0.0; POLICY_OUT];
            for &i in chunk {
                let s = &samples[i];
                let logits = bundle.policy.forward_cached(&s.input, &mut cache).to_vec();
                policy_logits_grad(
                    &logits,
                    &s.bins,
                    s.logp,
                    s.advantage,
                    clip,
                    entropy_coef,
                    &mut logit_grad,
                );
                bundle.policy.backward(&cache, &logit_grad, &mut acc.policy, &mut input_grad);

                // Latent gradient flows into the projection module.
                if train_projection {
                    let eta_grad = [input_grad[OBS_DIM], input_grad[OBS_DIM + 1], input_grad[OBS_DIM + 2]];
                    bundle.projection.forward_cached(&s.mu_unit, &mut pcache);
                    let mut unused = Vec::new();
                    bundle.projection.backward(&pcache, &eta_grad, &mut acc.projection, &mut unused);
                }

                // Mirror-symmetry auxiliary term on the logits.
                if mirror_weight > 0.0 {
                    let mx = mirror_obs(&s.input);
                    let logits_m = bundle.policy.forward_cached(&mx, &mut mcache).to_vec();
                    let mirrored = mirror_logits(&logits_m);
                    let mut g_a = vec![0.0; POLICY_OUT];
                    let mut g_b = vec![0.0; POLICY_OUT];
                    for k in 0..POLICY_OUT {
                        let d = 2.0 * mirror_weight * (logits[k] - mirrored[k]);
                        g_a[k] = d;
                    }
                    // d/d logits_m = -M_a^T (a - M_a b) * 2w; M_a is its own inverse.
                    let g_b_m = mirror_logits(&g_a);
                    for k in 0..POLICY_OUT {
                        g_b[k] = -g_b_m[k];
                    }
                    bundle.policy.backward(&cache, &g_a, &mut acc.policy, &mut input_grad);
                    bundle.policy.backward(&mcache, &g_b, &mut acc.policy, &mut input_grad);
                }

                // Value regression toward the empirical return.
                let v = bundle.value.forward_cached(&s.input, &mut vcache)[0];
                bundle.value.backward(&vcache, &[v - s.ret], &mut acc.value, &mut input_grad);
            }
            acc
        })
        .collect();
    let mut total = GradAccum::zeros(bundle);
    for c in &chunks {
        total.add(c);
    }
    total.scale(1.0 / indices.len() as f64);
    total
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct IterStats {
    pub iteration: usize,
    pub mean_return: f64,
    pub mean_episode_len: f64,
}

pub fn training_trace_csv(rows: &[IterStats], policy: &str) -> String {
    let mut s = String::from("iteration,policy,mean_return,mean_episode_len\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.iteration, policy, r.mean_return, r.mean_episode_len));
    }
    s
}

pub struct TrainResult {
    pub bundle: PolicyBundle,
    pub trace: Vec<IterStats>,
}

/// Trains one policy with PPO. `kind` selects the latent wiring and the
/// per-rollout parameter draw: PUP projects noisy parameters sampled from the
/// bounds, Nominal trains on the nominal point with zero latent, Robust
/// randomizes over the bounds with zero latent.
pub fn train(
    kind: PolicyKind,
    nominal: &ModelParams,
    bounds: &ParamBounds,
    env_cfg: &EnvConfig,
    ppo: &PpoConfig,
    master_seed: u64,
) -> Result<TrainResult, TrainError> {
    ppo.validate().expect("invalid PPO configuration");
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(master_seed, "train/init"));
    let mut bundle = PolicyBundle::init(kind, nominal.phi.clone(), &mut rng);
    let mut policy_opt = AdamNet::new(bundle.policy.clone());
    let mut value_opt = AdamNet::new(bundle.value.clone());
    let mut projection_opt = AdamNet::new(bundle.projection.clone());
    let train_projection = kind.latent_mode() == LatentMode::Projected;

    let mut trace = Vec::with_capacity(ppo.iterations);
    for iteration in 0..ppo.iterations {
        // Rollout collection: launched in deterministic waves, included in
        // index order until the step budget is met.
        let mut episodes: Vec<EpisodeData> = Vec::new();
        let mut total_steps = 0;
        let mut next_idx = 0u64;
        let wave = (rayon::current_num_threads() * 2).max(4) as u64;
        while total_steps < ppo.steps_per_iter {
            let seeds: Vec<u64> = (next_idx..next_idx + wave)
                .map(|k| {
                    seed::derive_indexed(master_seed, "train/rollout", (iteration as u64) << 32 | k)
                })
                .collect();
            next_idx += wave;
            let wave_eps: Vec<EpisodeData> = seeds
                .par_iter()
                .map(|&s| collect_episode(&bundle, kind, nominal, bounds, env_cfg, ppo, s))
                .collect();
            for ep in wave_eps {
                if total_steps >= ppo.steps_per_iter {
                    break;
                }
                total_steps += ep.steps.len();
                episodes.push(ep);
            }
        }

        let mean_return =
            episodes.iter().map(|e| e.total_reward).sum::<f64>() / episodes.len() as f64;
        let mean_len = episodes.iter().map(|e| e.steps.len() as f64).sum::<f64>()
            / episodes.len() as f64;
        if !mean_return.is_finite() {
            return Err(TrainError::Diverged { iteration });
        }
        trace.push(IterStats { iteration, mean_return, mean_episode_len: mean_len });

        // Flatten and normalize advantages batch-wide.
        let mut samples: Vec<StepSample> =
            episodes.into_iter().flat_map(|e| e.steps).collect();
        let n = samples.len() as f64;
        let mean_adv = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
        let var_adv =
            samples.iter().map(|s| (s.advantage - mean_adv).powi(2)).sum::<f64>() / n;
        let sd_adv = var_adv.sqrt().max(1e-8);
        for s in &mut samples {
            s.advantage = (s.advantage - mean_adv) / sd_adv;
        }

        // Clipped-surrogate epochs over shuffled minibatches.
        let mut update_rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(master_seed, "train/update", iteration as u64));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..ppo.epochs {
            for k in (1..order.len()).rev() {
                let j = update_rng.random_range(0..=k);
                order.swap(k, j);
            }
            for batch in order.chunks(ppo.minibatch) {
                let grads = minibatch_grads(
                    &bundle,
                    &samples,
                    batch,
                    ppo.clip,
                    ppo.entropy_coef,
                    ppo.mirror_loss_weight,
                    train_projection,
                );
                policy_opt.step(&grads.policy, ppo.lr);
                bundle.policy = policy_opt.net.clone();
                value_opt.step(&grads.value, ppo.lr);
                bundle.value = value_opt.net.clone();
                if train_projection {
                    projection_opt.step(&grads.projection, ppo.lr);
                    bundle.projection = projection_opt.net.clone();
                }
            }
        }
    }

    Ok(TrainResult { bundle, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::NoiseConfig;

    fn tiny_ppo(iters: usize, steps: usize) -> PpoConfig {
        PpoConfig {
            steps_per_iter: steps,
            iterations: iters,
            minibatch: 256,
            epochs: 3,
            ..Default::default()
        }
    }

    #[test]
    fn decode_maps_center_bin_to_zero() {
        let bins = [5u8; 6];
        assert_eq!(decode_bins(&bins), [0.0; 6]);
        let lo = [0u8; 6];
        assert_eq!(decode_bins(&lo), [-1.0; 6]);
        let hi = [10u8; 6];
        assert_eq!(decode_bins(&hi), [1.0; 6]);
    }

    #[test]
    fn sample_env_params_respects_bounds() {
        let nominal = ModelParams::nominal();
        let degenerate = ParamBounds::degenerate(&nominal.mu);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert_eq!(sample_env_params(&degenerate, &mut rng), nominal.mu);
        }

        let mut lb = nominal.mu;
        let mut ub = nominal.mu;
        for d in 0..MU_DIM {
            lb[d] -= 0.05;
            ub[d] += 0.05;
        }
        let bounds = ParamBounds { lb, ub };
        let mut min = [f64::INFINITY; MU_DIM];
        let mut max = [f64::NEG_INFINITY; MU_DIM];
        let n = 100_000;
        for _ in 0..n {
            let mu = sample_env_params(&bounds, &mut rng);
            for d in 0..MU_DIM {
                assert!(mu[d] >= lb[d] && mu[d] <= ub[d]);
                min[d] = min[d].min(mu[d]);
                max[d] = max[d].max(mu[d]);
            }
        }
        for d in 0..MU_DIM {
            let width = ub[d] - lb[d];
            assert!((min[d] - lb[d]) / width < 0.01, "dim {d} min not near lb");
            assert!((ub[d] - max[d]) / width < 0.01, "dim {d} max not near ub");
        }
    }

    #[test]
    fn projection_output_strictly_inside_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bundle = PolicyBundle::init(PolicyKind::Pup, crate::world::default_phi(), &mut rng);
        for _ in 0..200 {
            let mut unit = [0.0; MU_DIM];
            for u in unit.iter_mut() {
                *u = rng.random_range(0.0..1.0);
            }
            let eta = bundle.project(&unit);
            for e in eta {
                assert!(e > -1.0 && e < 1.0);
            }
        }
    }

    #[test]
    fn noisy_mu_input_varies_per_draw_and_deterministic_without_noise() {
        let nominal = ModelParams::nominal();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clean1 = noisy_mu_input(&nominal.mu, 0.0, &mut rng);
        let clean2 = noisy_mu_input(&nominal.mu, 0.0, &mut rng);
        assert_eq!(clean1, clean2);
        let a = noisy_mu_input(&nominal.mu, 0.25, &mut rng);
        let b = noisy_mu_input(&nominal.mu, 0.25, &mut rng);
        assert_ne!(a, b);
        for (x, c) in a.iter().zip(&clean1) {
            assert!((x - c).abs() <= 0.25 + 1e-12);
            assert!((0.0..=1.0).contains(x));
        }
    }

    #[test]
    fn zeros_mode_ignores_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bundle = PolicyBundle::init(PolicyKind::Nominal, crate::world::default_phi(), &mut rng);
        let a = bundle.project(&[0.1; MU_DIM]);
        let b = bundle.project(&[0.9; MU_DIM]);
        assert_eq!(a, [0.0; ETA_DIM]);
        assert_eq!(b, [0.0; ETA_DIM]);
    }

    #[test]
    fn gae_limits_match_td_and_monte_carlo() {
        // Hand-built 3-step episode: rewards 1, 2, 3, values 0.5, 1.0, 1.5,
        // terminal (bootstrap 0), gamma = 0.9.
        let mk = || {
            vec![
                StepSample { input: [0.0; POLICY_IN], mu_unit: [0.0; MU_DIM], bins: [0; 6], logp: 0.0, reward: 1.0, value: 0.5, advantage: 0.0, ret: 0.0 },
                StepSample { input: [0.0; POLICY_IN], mu_unit: [0.0; MU_DIM], bins: [0; 6], logp: 0.0, reward: 2.0, value: 1.0, advantage: 0.0, ret: 0.0 },
                StepSample { input: [0.0; POLICY_IN], mu_unit: [0.0; MU_DIM], bins: [0; 6], logp: 0.0, reward: 3.0, value: 1.5, advantage: 0.0, ret: 0.0 },
            ]
        };
        let g = 0.9;

        // lambda = 0: one-step TD advantage r + g V' - V.
        let mut steps = mk();
        gae(&mut steps, 0.0, g, 0.0);
        assert!((steps[0].advantage - (1.0 + g * 1.0 - 0.5)).abs() < 1e-12);
        assert!((steps[1].advantage - (2.0 + g * 1.5 - 1.0)).abs() < 1e-12);
        assert!((steps[2].advantage - (3.0 - 1.5)).abs() < 1e-12);

        // lambda = 1: discounted Monte-Carlo return minus baseline.
        let mut steps = mk();
        gae(&mut steps, 0.0, g, 1.0);
        let mc0 = 1.0 + g * 2.0 + g * g * 3.0;
        let mc1 = 2.0 + g * 3.0;
        assert!((steps[0].advantage - (mc0 - 0.5)).abs() < 1e-12);
        assert!((steps[1].advantage - (mc1 - 1.0)).abs() < 1e-12);
        assert!((steps[2].advantage - (3.0 - 1.5)).abs() < 1e-12);
    }

    #[test]
    fn clipped_ratio_gives_zero_surrogate_gradient() {
        // Build logits so the new policy strongly prefers the stored bins,
        // pushing the ratio far above 1 + clip with positive advantage.
        let mut logits = vec![0.0; POLICY_OUT];
        let bins = [2u8; 6];
        for j in 0..6 {
            logits[j * N_BINS + 2] = 5.0;
        }
        let probs_uniform = (1.0 / N_BINS as f64).ln() * 6.0; // old logp: uniform policy
        let mut grad = vec![0.0; POLICY_OUT];
        let ratio = policy_logits_grad(&logits, &bins, probs_uniform, 1.0, 0.2, 0.0, &mut grad);
        assert!(ratio > 1.2);
        assert!(grad.iter().all(|g| g.abs() < 1e-14), "expected fully clipped gradient");

        // Negative advantage with ratio below 1 - clip also clips to zero.
        let mut logits = vec![0.0; POLICY_OUT];
        for j in 0..6 {
            logits[j * N_BINS + 1] = 5.0; // mass away from stored bins
        }
        let ratio = policy_logits_grad(&logits, &bins, probs_uniform, -1.0, 0.2, 0.0, &mut grad);
        assert!(ratio < 0.8);
        assert!(grad.iter().all(|g| g.abs() < 1e-14));

        // Inside the trust region the gradient is nonzero.
        let logits = vec![0.0; POLICY_OUT];
        let ratio = policy_logits_grad(&logits, &bins, probs_uniform, 1.0, 0.2, 0.0, &mut grad);
        assert!((ratio - 1.0).abs() < 1e-12);
        assert!(grad.iter().any(|g| g.abs() > 1e-6));
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        // Check d(-min(surrogate))/d logits numerically in the unclipped
        // regime, entropy included.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut logits: Vec<f64> = (0..POLICY_OUT).map(|_| rng.random_range(-0.5..0.5)).collect();
        let bins = [3u8; 6];
        let logp_old = {
            let mut probs = vec![0.0; POLICY_OUT];
            softmax_heads(&logits, &mut probs);
            log_prob_of(&probs, &bins)
        };
        let advantage = 0.7;
        let clip = 0.2;
        let ent = 0.01;
        let loss = |l: &[f64]| {
            let mut probs = vec![0.0; POLICY_OUT];
            softmax_heads(l, &mut probs);
            let logp = log_prob_of(&probs, &bins);
            let ratio = (logp - logp_old).exp();
            let s1 = ratio * advantage;
            let s2 = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
            -s1.min(s2) - ent * entropy_of(&probs)
        };
        let mut grad = vec![0.0; POLICY_OUT];
        policy_logits_grad(&logits, &bins, logp_old, advantage, clip, ent, &mut grad);
        let h = 1e-6;
        for k in (0..POLICY_OUT).step_by(7) {
            let orig = logits[k];
            logits[k] = orig + h;
            let lp = loss(&logits);
            logits[k] = orig - h;
            let lm = loss(&logits);
            logits[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (grad[k] - fd).abs() <= 1e-5 * grad[k].abs().max(fd.abs()).max(1e-2),
                "logit {k}: analytic {} vs fd {fd}",
                grad[k]
            );
        }
    }

    #[test]
    fn mirror_loss_zero_for_constant_policy_and_order_invariant() {
        // A zero-weight network emits identical logits everywhere: perfectly
        // symmetric by construction.
        let policy = Net::zeros(
            &[POLICY_IN, 8, POLICY_OUT],
            &[Activation::Tanh, Activation::Linear],
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut batch = Vec::new();
        for _ in 0..8 {
            let mut x = [0.0; POLICY_IN];
            for v in x.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            batch.push(x);
        }
        assert_eq!(mirror_loss(&policy, &batch), 0.0);

        let trained = Net::xavier(
            &[POLICY_IN, 8, POLICY_OUT],
            &[Activation::Tanh, Activation::Linear],
            &mut rng,
        );
        let l1 = mirror_loss(&trained, &batch);
        let mut reversed = batch.clone();
        reversed.reverse();
        let l2 = mirror_loss(&trained, &reversed);
        assert!((l1 - l2).abs() < 1e-12);
        assert!(l1 > 0.0);
    }

    #[test]
    fn mirror_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut policy = Net::xavier(
            &[POLICY_IN, 6, POLICY_OUT],
            &[Activation::Tanh, Activation::Linear],
            &mut rng,
        );
        let mut x = [0.0; POLICY_IN];
        for v in x.iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let w = 1.0;

        // Analytic gradient via the same two-pass route the trainer uses.
        let mut grads = NetGrads::zeros_like(&policy);
        let mut cache = ForwardCache::default();
        let mut mcache = ForwardCache::default();
        let mut ig = Vec::new();
        let logits = policy.forward_cached(&x, &mut cache).to_vec();
        let mx = mirror_obs(&x);
        let logits_m = policy.forward_cached(&mx, &mut mcache).to_vec();
        let mirrored = mirror_logits(&logits_m);
        let g_a: Vec<f64> =
            logits.iter().zip(&mirrored).map(|(a, b)| 2.0 * w * (a - b)).collect();
        let g_b: Vec<f64> = mirror_logits(&g_a).iter().map(|v| -v).collect();
        policy.backward(&cache, &g_a, &mut grads, &mut ig);
        policy.backward(&mcache, &g_b, &mut grads, &mut ig);

        let loss = |p: &Net| {
            let a = p.forward(&x);
            let b = mirror_logits(&p.forward(&mirror_obs(&x)));
            w * a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>()
        };
        let mut flat = policy.flatten();
        let analytic: Vec<f64> = {
            let mut v = Vec::new();
            for li in 0..policy.layers.len() {
                v.extend_from_slice(&grads.w[li]);
                v.extend_from_slice(&grads.b[li]);
            }
            v
        };
        let h = 1e-6;
        for k in (0..flat.len()).step_by(13) {
            let orig = flat[k];
            flat[k] = orig + h;
            policy.unflatten(&flat);
            let lp = loss(&policy);
            flat[k] = orig - h;
            policy.unflatten(&flat);
            let lm = loss(&policy);
            flat[k] = orig;
            policy.unflatten(&flat);
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (analytic[k] - fd).abs() <= 1e-5 * analytic[k].abs().max(fd.abs()).max(1e-2),
                "param {k}: analytic {} vs fd {fd}",
                analytic[k]
            );
        }
    }

    #[test]
    fn two_iteration_smoke_run_produces_finite_trace() {
        let nominal = ModelParams::nominal();
        let bounds = ParamBounds::degenerate(&nominal.mu);
        let env_cfg = EnvConfig { noise: NoiseConfig::paper(), ..Default::default() };
        let ppo = tiny_ppo(2, 600);
        let result =
            train(PolicyKind::Pup, &nominal, &bounds, &env_cfg, &ppo, 7).expect("training ran");
        assert_eq!(result.trace.len(), 2);
        for row in &result.trace {
            assert!(row.mean_return.is_finite());
            assert!(row.mean_episode_len > 0.0);
        }
    }

    #[test]
    fn baselines_smoke_run() {
        let nominal = ModelParams::nominal();
        let mut ub = nominal.mu;
        ub[0] += 0.2;
        let bounds = ParamBounds { lb: nominal.mu, ub };
        let env_cfg = EnvConfig::default();
        let ppo = tiny_ppo(2, 400);
        for kind in [PolicyKind::Nominal, PolicyKind::Robust] {
            let r = train(kind, &nominal, &bounds, &env_cfg, &ppo, 3).expect("baseline ran");
            assert_eq!(r.trace.len(), 2);
            assert!(r.trace.iter().all(|t| t.mean_return.is_finite()));
            assert_eq!(r.bundle.latent_mode, LatentMode::Zeros);
        }
    }

    #[test]
    fn bundle_round_trips_through_json() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bundle = PolicyBundle::init(PolicyKind::Pup, crate::world::default_phi(), &mut rng);
        let s = bundle.save_json();
        let loaded = PolicyBundle::load_json(&s).unwrap();
        assert_eq!(loaded.policy.flatten(), bundle.policy.flatten());
        assert_eq!(loaded.projection.flatten(), bundle.projection.flatten());
        assert_eq!(loaded.kind, PolicyKind::Pup);
    }

    #[test]
    fn training_trace_csv_shape() {
        let rows = vec![IterStats { iteration: 0, mean_return: 1.5, mean_episode_len: 42.0 }];
        let csv = training_trace_csv(&rows, "pup");
        assert!(csv.starts_with("iteration,policy,mean_return,mean_episode_len\n"));
        assert!(csv.contains("0,pup,1.5,42"));
    }
}
