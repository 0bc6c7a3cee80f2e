use walker_core::presysid::*;
use walker_core::world::*;
use walker_core::cmaes::CmaConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let nom_gens: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(120);
    let sub_gens: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(60);
    let n_subsets: usize = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(6);

    for exp_seed in 0..3u64 {
        let t0 = Instant::now();
        // Known ground truth in the central band, like the pipeline surrogate draw.
        let mut rng = ChaCha8Rng::seed_from_u64(900 + exp_seed);
        let mut unit = [0.0; MU_DIM];
        for u in unit.iter_mut() { *u = rand::Rng::random_range(&mut rng, 0.25..0.75); }
        let mu_star = ModelParams::denormalize(&unit);
        let mut phi_star = default_phi();
        for w in phi_star.iter_mut() { *w += rand::Rng::random_range(&mut rng, -0.4..0.4); }
        let truth = ModelParams::with_mu(mu_star, phi_star.clone());
        let world = SurrogateWorld::in_class_with_params(&truth);

        let mut crng = ChaCha8Rng::seed_from_u64(exp_seed);
        let (data, log) = collect_scripted(WorldRef::Surrogate(&world), &CollectConfig::default(), &mut crng);
        assert!(log.discarded.is_empty(), "discarded {:?}", log.discarded);

        let cfg = PresysidConfig {
            n_subsets,
            nominal_generations: nom_gens,
            subset_generations: sub_gens,
            fit_gain_net: false,
            frozen_phi: Some(phi_star),
            cma: CmaConfig::default(),
            ..Default::default()
        };
        let res = identify_bounds(&data, &cfg, exp_seed);
        let inside = res.bounds.contains(&mu_star);
        let n_inside = inside.iter().filter(|b| **b).count();
        println!("seed {exp_seed}: {n_inside}/10 inside, nominal_loss={:.4}, {:.1}s", res.nominal_loss, t0.elapsed().as_secs_f64());
        for d in 0..MU_DIM {
            println!("  {:11} true={:+.3} nom={:+.3} [{:+.3},{:+.3}] {}",
                MU_NAMES[d], mu_star[d], res.nominal.mu[d], res.bounds.lb[d], res.bounds.ub[d],
                if inside[d] {"ok"} else {"MISS"});
        }
    }
}
