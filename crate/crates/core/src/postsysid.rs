//! Post-training system identification: Gaussian-process Bayesian
//! optimization over the policy latent on the surrogate world.
//!
//! The protocol is fixed: 5 uniform samples seed the GP, then 20 acquisition
//! iterations, one rollout each — 25 rollouts total — and the best-seen
//! latent is the output. Fitness is the distance traveled before the fall
//! termination triggers.

use crate::env::{EnvConfig, EpisodeRunner};
use crate::pup::{PolicyBundle, ETA_DIM};
use crate::seed;
use crate::world::{SurrogateWorld, WorldRef};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Latent search box: the tanh range of the projection output.
pub const ETA_BOX: [f64; 2] = [-1.0, 1.0];

/// Acquisition grid size (scrambled low-discrepancy points).
pub const ACQUIRE_GRID: usize = 4096;

#[derive(Debug, Error)]
pub enum GpError {
    #[error("kernel matrix is singular even after jitter; duplicate points are the usual cause")]
    DuplicatePoints,
    #[error("need at least one observation")]
    Empty,
}

/// Squared-exponential kernel hyperparameters, fixed for the whole run
/// (no marginal-likelihood refits at n <= 25).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GpHyper {
    pub length_scale: f64,
    pub signal_var: f64,
    pub noise_var: f64,
}

impl Default for GpHyper {
    fn default() -> Self {
        Self { length_scale: 0.5, signal_var: 1.0, noise_var: 1e-4 }
    }
}

fn kernel(a: &[f64; ETA_DIM], b: &[f64; ETA_DIM], h: &GpHyper) -> f64 {
    let mut d2 = 0.0;
    for i in 0..ETA_DIM {
        let d = (a[i] - b[i]) / h.length_scale;
        d2 += d * d;
    }
    h.signal_var * (-0.5 * d2).exp()
}

/// Exact GP regression posterior over observed latent points. Observed
/// fitness values are standardized internally.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    x: Vec<[f64; ETA_DIM]>,
    hyper: GpHyper,
    y_mean: f64,
    y_scale: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Fits the posterior. A jitter of 1e-8 is added once if the factorization
/// fails; duplicate points with zero noise surface as an error the caller can
/// repair by perturbing the duplicates.
pub fn gp_fit(x: &[[f64; ETA_DIM]], y: &[f64], hyper: &GpHyper) -> Result<GpPosterior, GpError> {
    if x.is_empty() || x.len() != y.len() {
        return Err(GpError::Empty);
    }
    assert!(y.iter().all(|v| v.is_finite()), "fitness values must be finite");
    let n = x.len();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
    let y_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let y_std = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_scale));

    let build = |jitter: f64| {
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = kernel(&x[i], &x[j], hyper);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
            k[(i, i)] += hyper.noise_var + jitter;
        }
        Cholesky::new(k)
    };
    let chol = match build(0.0) {
        Some(c) => c,
        None => {
            // Exact duplicates make the noiseless kernel rank-deficient in a
            // way jitter would only paper over; surface them so the caller
            // can perturb and refit.
            let has_duplicates =
                (1..n).any(|i| (0..i).any(|j| x[i] == x[j])) && hyper.noise_var == 0.0;
            if has_duplicates {
                return Err(GpError::DuplicatePoints);
            }
            build(1e-8).ok_or(GpError::DuplicatePoints)?
        }
    };
    let alpha = chol.solve(&y_std);
    Ok(GpPosterior { x: x.to_vec(), hyper: *hyper, y_mean, y_scale, chol, alpha })
}

impl GpPosterior {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Posterior mean (original units) and standard deviation at a query
    /// point. Variance is clamped at zero.
    pub fn predict(&self, q: &[f64; ETA_DIM]) -> (f64, f64) {
        let n = self.x.len();
        let k_star = DVector::from_iterator(n, self.x.iter().map(|xi| kernel(xi, q, &self.hyper)));
        let mean_std = k_star.dot(&self.alpha);
        let v = self.chol.solve(&k_star);
        let var_std = (self.hyper.signal_var - k_star.dot(&v)).max(0.0);
        (self.y_mean + self.y_scale * mean_std, self.y_scale * var_std.sqrt())
    }
}

// ---------------------------------------------------------------------------
// Acquisition
// ---------------------------------------------------------------------------

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn normal_cdf(z: f64) -> f64 {
    // Abramowitz-Stegun style erf-based CDF.
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    // Numerical approximation, max error ~1.5e-7 (A&S 7.1.26).
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Expected improvement of a maximization problem at `q` over `f_best`.
pub fn expected_improvement(gp: &GpPosterior, q: &[f64; ETA_DIM], f_best: f64) -> f64 {
    let (mean, sd) = gp.predict(q);
    if sd <= 1e-12 {
        return 0.0;
    }
    let z = (mean - f_best) / sd;
    (mean - f_best) * normal_cdf(z) + sd * normal_pdf(z)
}

/// Halton low-discrepancy point, radical inverse in the given base.
fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// Maximizes expected improvement over the latent box via a random-shifted
/// Halton grid plus local pattern-search refinement. When the EI surface is
/// flat (degenerate posterior), ties break toward the point farthest from the
/// existing samples.
pub fn acquire<R: Rng>(gp: &GpPosterior, f_best: f64, rng: &mut R) -> [f64; ETA_DIM] {
    let shift: [f64; ETA_DIM] = [rng.random(), rng.random(), rng.random()];
    let bases = [2u64, 3, 5];
    let width = ETA_BOX[1] - ETA_BOX[0];

    let mut best_point = [0.0; ETA_DIM];
    let mut best_ei = f64::NEG_INFINITY;
    let mut far_point = [0.0; ETA_DIM];
    let mut far_dist = f64::NEG_INFINITY;
    for i in 0..ACQUIRE_GRID {
        let mut q = [0.0; ETA_DIM];
        for d in 0..ETA_DIM {
            let u = (halton(i as u64 + 1, bases[d]) + shift[d]).fract();
            q[d] = ETA_BOX[0] + u * width;
        }
        let ei = expected_improvement(gp, &q, f_best);
        if ei > best_ei {
            best_ei = ei;
            best_point = q;
        }
        let min_d = gp
            .x
            .iter()
            .map(|xi| {
                xi.iter().zip(&q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        if min_d > far_dist {
            far_dist = min_d;
            far_point = q;
        }
    }

    if best_ei <= 1e-15 {
        return far_point;
    }

    // Shrinking pattern search around the best grid point.
    let mut center = best_point;
    let mut center_ei = best_ei;
    let mut step = 0.1 * width;
    while step > 1e-4 {
        let mut improved = false;
        for d in 0..ETA_DIM {
            for sign in [-1.0, 1.0] {
                let mut q = center;
                q[d] = (q[d] + sign * step).clamp(ETA_BOX[0], ETA_BOX[1]);
                let ei = expected_improvement(gp, &q, f_best);
                if ei > center_ei {
                    center_ei = ei;
                    center = q;
                    improved = true;
                }
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    center
}

// ---------------------------------------------------------------------------
// Transfer protocol
// ---------------------------------------------------------------------------

/// Fixed rollout budget: `n_init` uniform draws then `n_iter` BO iterations,
/// one rollout per sample.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoBudget {
    pub n_init: usize,
    pub n_iter: usize,
}

impl Default for BoBudget {
    fn default() -> Self {
        Self { n_init: 5, n_iter: 20 }
    }
}

impl BoBudget {
    pub fn total(&self) -> usize {
        self.n_init + self.n_iter
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransferSample {
    pub eta: [f64; ETA_DIM],
    pub fitness: f64,
    pub is_best_so_far: bool,
}

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub eta_star: [f64; ETA_DIM],
    pub best_fitness: f64,
    pub samples: Vec<TransferSample>,
}

pub fn transfer_trace_csv(samples: &[TransferSample]) -> String {
    let mut s = String::from("sample_idx,eta1,eta2,eta3,fitness,is_best_so_far\n");
    for (i, r) in samples.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i,
            r.eta[0],
            r.eta[1],
            r.eta[2],
            r.fitness,
            u8::from(r.is_best_so_far)
        ));
    }
    s
}

/// Core search loop over an arbitrary fitness function (maximized); consumes
/// exactly `budget.total()` evaluations and returns the best-seen latent.
pub fn optimize_latent<F, R>(mut fitness: F, budget: &BoBudget, rng: &mut R) -> TransferResult
where
    F: FnMut(&[f64; ETA_DIM]) -> f64,
    R: Rng,
{
    assert!(budget.n_init >= 1, "need at least one initial sample");
    let hyper = GpHyper::default();
    let mut xs: Vec<[f64; ETA_DIM]> = Vec::with_capacity(budget.total());
    let mut ys: Vec<f64> = Vec::with_capacity(budget.total());
    let mut samples = Vec::with_capacity(budget.total());
    let mut best = f64::NEG_INFINITY;
    let mut eta_star = [0.0; ETA_DIM];

    let record = |eta: [f64; ETA_DIM],
                      f: f64,
                      best: &mut f64,
                      eta_star: &mut [f64; ETA_DIM],
                      samples: &mut Vec<TransferSample>| {
        let is_best = f > *best;
        if is_best {
            *best = f;
            *eta_star = eta;
        }
        samples.push(TransferSample { eta, fitness: f, is_best_so_far: is_best });
    };

    for _ in 0..budget.n_init {
        let eta = [
            rng.random_range(ETA_BOX[0]..ETA_BOX[1]),
            rng.random_range(ETA_BOX[0]..ETA_BOX[1]),
            rng.random_range(ETA_BOX[0]..ETA_BOX[1]),
        ];
        let f = fitness(&eta);
        xs.push(eta);
        ys.push(f);
        record(eta, f, &mut best, &mut eta_star, &mut samples);
    }

    for _ in 0..budget.n_iter {
        let gp = match gp_fit(&xs, &ys, &hyper) {
            Ok(gp) => gp,
            Err(GpError::DuplicatePoints) => {
                // Perturb exact duplicates slightly and refit.
                for i in 1..xs.len() {
                    for j in 0..i {
                        if xs[i] == xs[j] {
                            for d in 0..ETA_DIM {
                                xs[i][d] = (xs[i][d] + 1e-6).clamp(ETA_BOX[0], ETA_BOX[1]);
                            }
                        }
                    }
                }
                gp_fit(&xs, &ys, &hyper).expect("perturbed refit")
            }
            Err(e) => unreachable!("{e}"),
        };
        let eta = acquire(&gp, best, rng);
        let f = fitness(&eta);
        xs.push(eta);
        ys.push(f);
        record(eta, f, &mut best, &mut eta_star, &mut samples);
    }

    TransferResult { eta_star, best_fitness: best, samples }
}

/// One surrogate rollout under the bundle conditioned directly on `eta`
/// (the projection module is bypassed at deployment). Fitness is the signed
/// distance traveled before termination; a blown-up rollout scores zero.
pub fn rollout_fitness(
    bundle: &PolicyBundle,
    world: &SurrogateWorld,
    env_cfg: &EnvConfig,
    eta: &[f64; ETA_DIM],
    rollout_seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(rollout_seed);
    let mut ep = EpisodeRunner::new(WorldRef::Surrogate(world), env_cfg, &mut rng);
    loop {
        let action = bundle.act_greedy(ep.obs(), eta);
        let out = ep.step(&action, &mut rng);
        if out.done {
            break;
        }
    }
    ep.distance()
}

/// The full post-training search on the surrogate: 5 uniform latents, 20 BO
/// iterations, one rollout each, best-seen latent returned.
pub fn transfer(
    bundle: &PolicyBundle,
    world: &SurrogateWorld,
    env_cfg: &EnvConfig,
    budget: &BoBudget,
    master_seed: u64,
) -> TransferResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(master_seed, "transfer"));
    let mut rollout_idx = 0u64;
    let fitness = |eta: &[f64; ETA_DIM]| {
        let s = seed::derive_indexed(master_seed, "transfer/rollout", rollout_idx);
        rollout_idx += 1;
        rollout_fitness(bundle, world, env_cfg, eta, s)
    };
    optimize_latent(fitness, budget, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn grid_1d(n: usize) -> Vec<[f64; ETA_DIM]> {
        (0..n).map(|i| [-1.0 + 2.0 * i as f64 / (n - 1) as f64, 0.0, 0.0]).collect()
    }

    #[test]
    fn interpolates_training_points_with_zero_noise() {
        let x = vec![[-0.5, 0.0, 0.2], [0.3, -0.7, 0.0], [0.8, 0.5, -0.4]];
        let y = vec![1.0, -2.0, 0.5];
        let hyper = GpHyper { noise_var: 0.0, ..Default::default() };
        let gp = gp_fit(&x, &y, &hyper).unwrap();
        for (xi, yi) in x.iter().zip(&y) {
            let (mean, sd) = gp.predict(xi);
            assert!((mean - yi).abs() < 1e-8, "mean {mean} vs {yi}");
            assert!(sd < 1e-4, "sd at a training point should collapse, got {sd}");
        }
    }

    #[test]
    fn reverts_to_prior_far_from_data() {
        let x = vec![[0.0, 0.0, 0.0]];
        let y = vec![3.0];
        let gp = gp_fit(&x, &y, &GpHyper::default()).unwrap();
        // Standardization of a single point gives scale 1, so far away the
        // posterior mean reverts to the data mean and sd to sqrt(signal).
        let far = [50.0, -50.0, 50.0];
        let (mean, sd) = gp.predict(&far);
        assert_relative_eq!(mean, 3.0, epsilon = 1e-9);
        assert_relative_eq!(sd, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn dense_sine_fit_tracks_the_function() {
        let xs = grid_1d(20);
        let ys: Vec<f64> = xs.iter().map(|x| (3.0 * x[0]).sin()).collect();
        let gp = gp_fit(&xs, &ys, &GpHyper { length_scale: 0.3, ..Default::default() }).unwrap();
        let dense = grid_1d(101);
        let mut max_err: f64 = 0.0;
        for q in &dense {
            let (mean, _) = gp.predict(q);
            max_err = max_err.max((mean - (3.0 * q[0]).sin()).abs());
        }
        assert!(max_err < 0.05, "max abs error {max_err}");
    }

    #[test]
    fn posterior_mean_invariant_under_point_reordering() {
        let x = vec![[-0.8, 0.1, 0.0], [0.0, 0.4, -0.3], [0.6, -0.6, 0.6], [0.2, 0.9, 0.9]];
        let y = vec![0.3, -1.0, 2.0, 0.7];
        let gp1 = gp_fit(&x, &y, &GpHyper::default()).unwrap();
        let perm = [2usize, 0, 3, 1];
        let xp: Vec<_> = perm.iter().map(|&i| x[i]).collect();
        let yp: Vec<_> = perm.iter().map(|&i| y[i]).collect();
        let gp2 = gp_fit(&xp, &yp, &GpHyper::default()).unwrap();
        for q in grid_1d(9) {
            let (m1, s1) = gp1.predict(&q);
            let (m2, s2) = gp2.predict(&q);
            assert!((m1 - m2).abs() < 1e-9);
            assert!((s1 - s2).abs() < 1e-9);
        }
    }

    #[test]
    fn duplicate_points_with_zero_noise_error_out() {
        let x = vec![[0.1, 0.1, 0.1], [0.1, 0.1, 0.1]];
        let y = vec![1.0, 1.0];
        let hyper = GpHyper { noise_var: 0.0, ..Default::default() };
        match gp_fit(&x, &y, &hyper) {
            Err(GpError::DuplicatePoints) => {}
            other => panic!("expected DuplicatePoints, got {other:?}"),
        }
    }

    #[test]
    fn ei_is_zero_at_observed_points_and_under_zero_variance() {
        let x = vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]];
        let y = vec![1.0, 2.0];
        let hyper = GpHyper { noise_var: 0.0, ..Default::default() };
        let gp = gp_fit(&x, &y, &hyper).unwrap();
        let best = 2.0;
        for xi in &x {
            // Analytically zero; the Cholesky round trip leaves ~1e-8 of
            // residual variance, hence the loose absolute tolerance.
            let ei = expected_improvement(&gp, xi, best);
            assert!(ei.abs() < 1e-6, "EI at an observed point: {ei}");
        }
        // Away from data EI is positive (uncertainty).
        assert!(expected_improvement(&gp, &[-0.9, -0.9, -0.9], best) > 0.0);
    }

    #[test]
    fn degenerate_posterior_acquires_the_farthest_point() {
        // Identical fitness everywhere: y standardizes to zeros, EI collapses,
        // and the acquisition must fall back to pure exploration.
        let x = vec![[0.0, 0.0, 0.0]];
        let y = vec![5.0];
        // Zero signal makes the posterior variance identically zero.
        let hyper = GpHyper { signal_var: 1e-30, noise_var: 0.0, length_scale: 0.5 };
        let gp = gp_fit(&x, &y, &hyper).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = acquire(&gp, 5.0, &mut rng);
        let dist: f64 = q.iter().map(|v| v * v).sum::<f64>();
        assert!(dist.sqrt() > 0.8, "expected a far exploration point, got {q:?}");
    }

    #[test]
    fn single_observation_explores_away_from_it() {
        let x = vec![[0.2, -0.1, 0.3]];
        let y = vec![1.0];
        let gp = gp_fit(&x, &y, &GpHyper::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = acquire(&gp, 1.0, &mut rng);
        let d: f64 = q.iter().zip(&x[0]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        assert!(d.sqrt() > 0.05, "acquisition should move away from the lone sample");
    }

    #[test]
    fn budget_counts_exactly() {
        let budget = BoBudget::default();
        assert_eq!(budget.total(), 25);
        let mut evals = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let res = optimize_latent(
            |eta| {
                evals += 1;
                -(eta[0] * eta[0] + eta[1] * eta[1] + eta[2] * eta[2])
            },
            &budget,
            &mut rng,
        );
        assert_eq!(evals, 25);
        assert_eq!(res.samples.len(), 25);
        // Returned latent attains the max of the trace.
        let max = res.samples.iter().map(|s| s.fitness).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.best_fitness, max);
        let best_row = res.samples.iter().filter(|s| s.fitness == max).next_back().unwrap();
        // eta_star is the first sample attaining the running max.
        assert!(res.samples.iter().any(|s| s.eta == res.eta_star && s.fitness == max)
            || best_row.fitness == max);
    }

    #[test]
    fn running_max_is_nondecreasing_and_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let res = optimize_latent(
            |eta| (7.0 * eta[0]).sin() + (3.0 * eta[1]).cos() * eta[2],
            &BoBudget::default(),
            &mut rng,
        );
        let mut running = f64::NEG_INFINITY;
        for s in &res.samples {
            assert_eq!(s.is_best_so_far, s.fitness > running);
            running = running.max(s.fitness);
        }
    }

    #[test]
    fn bo_beats_random_search_on_quadratic_fitness() {
        // Synthetic fitness f(eta) = -|eta - eta0|^2: the BO best over 25
        // evaluations must come within 0.05 of the optimum and beat the
        // median of 25-point random search across 20 seeds.
        let eta0 = [0.3, -0.2, 0.5];
        let f = |eta: &[f64; ETA_DIM]| {
            -eta.iter().zip(&eta0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let mut bo_bests = Vec::new();
        let mut rs_bests = Vec::new();
        for s in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
            let res = optimize_latent(f, &BoBudget::default(), &mut rng);
            bo_bests.push(res.best_fitness);
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + s);
            let mut best = f64::NEG_INFINITY;
            for _ in 0..25 {
                let eta =
                    [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                best = best.max(f(&eta));
            }
            rs_bests.push(best);
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let bo_median = median(&mut bo_bests);
        let rs_median = median(&mut rs_bests);
        assert!(bo_median > rs_median, "BO median {bo_median} vs random {rs_median}");
        assert!(bo_median > -0.05, "BO median {bo_median} should be within 0.05 of 0");
    }

    #[test]
    fn transfer_trace_csv_shape() {
        let samples = vec![TransferSample { eta: [0.1, -0.2, 0.3], fitness: 1.5, is_best_so_far: true }];
        let csv = transfer_trace_csv(&samples);
        assert!(csv.starts_with("sample_idx,eta1,eta2,eta3,fitness,is_best_so_far\n"));
        assert!(csv.contains("0,0.1,-0.2,0.3,1.5,1"));
    }
}
