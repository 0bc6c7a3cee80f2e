//! Covariance Matrix Adaptation Evolution Strategy, used by every
//! identification fit.
//!
//! The optimizer works in box-normalized coordinates ([0, 1] per dimension,
//! following the standard rank-mu weighted update with step-size and
//! covariance evolution paths. Bound handling is by projection: samples are
//! clamped into the box and fitness is evaluated at the clamped point.
//! Fitness is minimized.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Floor applied to covariance eigenvalues.
const EIG_FLOOR: f64 = 1e-12;
/// Cap on the covariance condition number.
const COND_CAP: f64 = 1e14;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmaConfig {
    /// Population size; defaults to 4 + floor(3 ln n).
    pub population: Option<usize>,
    /// Initial step size as a fraction of the normalized box width.
    pub sigma0: f64,
    /// Generation budget for [`CmaEs::optimize`].
    pub max_generations: usize,
}

impl Default for CmaConfig {
    fn default() -> Self {
        Self { population: None, sigma0: 0.25, max_generations: 500 }
    }
}

/// One row of the optimization trace (`generation,best_fitness,mean_fitness,sigma`).
#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub generation: u64,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub sigma: f64,
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("generation,best_fitness,mean_fitness,sigma\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.generation, r.best_fitness, r.mean_fitness, r.sigma));
    }
    s
}

/// CMA-ES state over a box-constrained search space.
#[derive(Debug, Clone)]
pub struct CmaEs {
    bounds: Vec<[f64; 2]>,
    n: usize,
    lambda: usize,
    mu: usize,
    weights: DVector<f64>,
    mu_eff: f64,
    c_sigma: f64,
    d_sigma: f64,
    c_c: f64,
    c_1: f64,
    c_mu: f64,
    chi_n: f64,
    /// Distribution mean in normalized coordinates.
    mean: DVector<f64>,
    sigma: f64,
    cov: DMatrix<f64>,
    p_c: DVector<f64>,
    p_sigma: DVector<f64>,
    generation: u64,
    best: Option<(Vec<f64>, f64)>,
    trace: Vec<TraceRow>,
}

/// Default population size for dimension `n`.
pub fn default_population(n: usize) -> usize {
    4 + (3.0 * (n as f64).ln()).floor() as usize
}

impl CmaEs {
    /// Starts at the box center.
    pub fn new(bounds: Vec<[f64; 2]>, cfg: &CmaConfig) -> Self {
        let center: Vec<f64> = bounds.iter().map(|b| 0.5 * (b[0] + b[1])).collect();
        Self::with_mean(bounds, &center, cfg)
    }

    /// Starts at a caller-supplied mean (in original, denormalized units).
    pub fn with_mean(bounds: Vec<[f64; 2]>, mean: &[f64], cfg: &CmaConfig) -> Self {
        let n = bounds.len();
        assert!(n > 0 && mean.len() == n);
        for b in &bounds {
            assert!(b[1] > b[0], "empty box interval");
        }
        let lambda = cfg.population.unwrap_or_else(|| default_population(n));
        assert!(lambda >= 2);
        let mu = lambda / 2;
        let raw: Vec<f64> =
            (0..mu).map(|i| ((mu as f64) + 0.5).ln() - ((i + 1) as f64).ln()).collect();
        let sum: f64 = raw.iter().sum();
        let weights = DVector::from_iterator(mu, raw.iter().map(|w| w / sum));
        let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();

        let nf = n as f64;
        let c_sigma = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
        let d_sigma = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + c_sigma;
        let c_c = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
        let c_1 = 2.0 / ((nf + 1.3) * (nf + 1.3) + mu_eff);
        let c_mu =
            (2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0) * (nf + 2.0) + mu_eff)).min(1.0 - c_1);
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));

        let mean_norm = DVector::from_iterator(
            n,
            mean.iter().zip(&bounds).map(|(m, b)| ((m - b[0]) / (b[1] - b[0])).clamp(0.0, 1.0)),
        );

        Self {
            bounds,
            n,
            lambda,
            mu,
            weights,
            mu_eff,
            c_sigma,
            d_sigma,
            c_c,
            c_1,
            c_mu,
            chi_n,
            mean: mean_norm,
            sigma: cfg.sigma0,
            cov: DMatrix::identity(n, n),
            p_c: DVector::zeros(n),
            p_sigma: DVector::zeros(n),
            generation: 0,
            best: None,
            trace: Vec::new(),
        }
    }

    pub fn population_size(&self) -> usize {
        self.lambda
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Best candidate seen so far (denormalized) with its fitness.
    pub fn best(&self) -> Option<(&[f64], f64)> {
        self.best.as_ref().map(|(x, f)| (x.as_slice(), *f))
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn mean_denorm(&self) -> Vec<f64> {
        self.denorm(self.mean.as_slice())
    }

    fn denorm(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter().zip(&self.bounds).map(|(u, b)| b[0] + u * (b[1] - b[0])).collect()
    }

    fn norm(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.n,
            x.iter().zip(&self.bounds).map(|(v, b)| (v - b[0]) / (b[1] - b[0])),
        )
    }

    /// Eigen-decomposition with floor/condition repair; returns (B, sqrt(D)).
    fn decompose(&self) -> (DMatrix<f64>, DVector<f64>) {
        let sym = (&self.cov + self.cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let max_e = eig.eigenvalues.iter().cloned().fold(EIG_FLOOR, f64::max);
        let floor = (max_e / COND_CAP).max(EIG_FLOOR);
        let d_sqrt = eig.eigenvalues.map(|v| v.max(floor).sqrt());
        (eig.eigenvectors, d_sqrt)
    }

    /// Samples `lambda` candidates from N(mean, sigma^2 C), each clamped into
    /// the box and returned in original units.
    pub fn ask<R: Rng>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        let (b, d_sqrt) = self.decompose();
        (0..self.lambda)
            .map(|_| {
                let z = DVector::from_iterator(
                    self.n,
                    (0..self.n).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                let y = &b * z.component_mul(&d_sqrt);
                let mut x = &self.mean + self.sigma * y;
                x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
                self.denorm(x.as_slice())
            })
            .collect()
    }

    /// Rank-based distribution update. Candidates must be the vectors
    /// returned by the matching [`CmaEs::ask`] call; non-finite fitness ranks
    /// worst.
    pub fn tell(&mut self, candidates: &[Vec<f64>], fitnesses: &[f64]) {
        assert_eq!(candidates.len(), fitnesses.len());
        assert_eq!(candidates.len(), self.lambda);

        let mut order: Vec<usize> = (0..self.lambda).collect();
        order.sort_by(|&a, &b| {
            let fa = if fitnesses[a].is_finite() { fitnesses[a] } else { f64::INFINITY };
            let fb = if fitnesses[b].is_finite() { fitnesses[b] } else { f64::INFINITY };
            fa.partial_cmp(&fb).unwrap_or(std::cmp::Ordering::Equal)
        });

        // Track the best-so-far over finite fitness values only.
        let gen_best = order[0];
        if fitnesses[gen_best].is_finite()
            && self.best.as_ref().is_none_or(|(_, f)| fitnesses[gen_best] < *f)
        {
            self.best = Some((candidates[gen_best].clone(), fitnesses[gen_best]));
        }

        let old_mean = self.mean.clone();
        let mut new_mean = DVector::zeros(self.n);
        for (w_idx, &ci) in order.iter().take(self.mu).enumerate() {
            new_mean += self.weights[w_idx] * self.norm(&candidates[ci]);
        }

        let y_w = (&new_mean - &old_mean) / self.sigma;

        // C^{-1/2} from the repaired decomposition.
        let (b, d_sqrt) = self.decompose();
        let d_inv = DMatrix::from_diagonal(&d_sqrt.map(|v| 1.0 / v));
        let c_inv_sqrt = &b * d_inv * b.transpose();

        self.p_sigma = (1.0 - self.c_sigma) * &self.p_sigma
            + (self.c_sigma * (2.0 - self.c_sigma) * self.mu_eff).sqrt() * &c_inv_sqrt * &y_w;

        let expected_decay = 1.0 - (1.0 - self.c_sigma).powi(2 * (self.generation as i32 + 1));
        let h_sigma = if self.p_sigma.norm() / expected_decay.sqrt()
            < (1.4 + 2.0 / (self.n as f64 + 1.0)) * self.chi_n
        {
            1.0
        } else {
            0.0
        };

        self.p_c = (1.0 - self.c_c) * &self.p_c
            + h_sigma * (self.c_c * (2.0 - self.c_c) * self.mu_eff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::zeros(self.n, self.n);
        for (w_idx, &ci) in order.iter().take(self.mu).enumerate() {
            let y_i = (self.norm(&candidates[ci]) - &old_mean) / self.sigma;
            rank_mu += self.weights[w_idx] * &y_i * y_i.transpose();
        }

        let delta_h = (1.0 - h_sigma) * self.c_c * (2.0 - self.c_c);
        self.cov = (1.0 - self.c_1 - self.c_mu + self.c_1 * delta_h) * &self.cov
            + self.c_1 * &self.p_c * self.p_c.transpose()
            + self.c_mu * rank_mu;
        self.cov = (&self.cov + self.cov.transpose()) * 0.5;

        self.sigma *= ((self.c_sigma / self.d_sigma) * (self.p_sigma.norm() / self.chi_n - 1.0))
            .exp();
        self.sigma = self.sigma.clamp(1e-12, 2.0);

        self.mean = new_mean;
        self.generation += 1;

        let finite: Vec<f64> = fitnesses.iter().copied().filter(|f| f.is_finite()).collect();
        let mean_fitness = if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        };
        self.trace.push(TraceRow {
            generation: self.generation,
            best_fitness: self.best.as_ref().map_or(f64::INFINITY, |(_, f)| *f),
            mean_fitness,
            sigma: self.sigma,
        });
    }

    /// Runs ask/tell for `generations` steps, evaluating candidates in
    /// parallel. Returns the best point and fitness (the initial mean is also
    /// evaluated so a run can never return something worse than its start).
    pub fn optimize<F, R>(&mut self, f: F, generations: usize, rng: &mut R) -> (Vec<f64>, f64)
    where
        F: Fn(&[f64]) -> f64 + Sync,
        R: Rng,
    {
        use rayon::prelude::*;
        let m0 = self.mean_denorm();
        let f0 = f(&m0);
        if f0.is_finite() && self.best.as_ref().is_none_or(|(_, fb)| f0 < *fb) {
            self.best = Some((m0, f0));
        }
        for _ in 0..generations {
            let candidates = self.ask(rng);
            let fitnesses: Vec<f64> = candidates.par_iter().map(|c| f(c)).collect();
            self.tell(&candidates, &fitnesses);
        }
        let (x, fx) = self.best.as_ref().expect("at least the initial mean was evaluated");
        (x.clone(), *fx)
    }
}
