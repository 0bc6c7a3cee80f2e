use walker_core::presysid::*;
use walker_core::world::*;
use walker_core::dynamics::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let mut unit = [0.0; MU_DIM];
    for u in unit.iter_mut() { *u = rand::Rng::random_range(&mut rng, 0.25..0.75); }
    let mu_star = ModelParams::denormalize(&unit);
    let mut phi_star = default_phi();
    for w in phi_star.iter_mut() { *w += rand::Rng::random_range(&mut rng, -0.4..0.4); }
    println!("mu* = {:?}", mu_star);
    let truth = ModelParams::with_mu(mu_star, phi_star.clone());
    let gn = walker_core::actuator::GainNet::from_flat(&phi_star);
    println!("gains at (0,0): {:?}, at (0.5,0): {:?}", gn.gains(0.0,0.0), gn.gains(0.5,0.0));
    let world = World::from_params(&truth);

    // crouch pose from presysid scripts
    let lp = |knee: f64, split: f64| { let h = -0.5*knee; [h+split, knee, h, h-split, knee, h] };
    let crouch = lp(0.9, 0.22);
    let stand  = lp(0.15, 0.12);
    let mut q = [0.0; N_COORDS];
    q[3..].copy_from_slice(&crouch);
    let k = forward_kinematics(&world.model, &SimState::new(q));
    let low = k.tip[0].y.min(k.tip[1].y);
    q[1] = -low;
    let mut sim = Simulation::new(&world, SimState::new(q));
    let ctrl_dt = 30.0 * 1e-3;
    let rise_ticks = (1.2_f64 / ctrl_dt).round() as usize;
    for tick in 0..80 {
        let a = ((tick + 1) as f64 / rise_ticks as f64).min(1.0);
        let mut tgt = [0.0; 6];
        for j in 0..6 { tgt[j] = crouch[j] + a * (stand[j] - crouch[j]); }
        match sim.control_tick(&tgt, 30) {
            Ok(_) => {
                if tick % 5 == 0 {
                    println!("t={:.2} z={:+.3} pitch={:+.3} x={:+.3} |qd|max={:.2} knees=({:.2},{:.2})",
                        sim.state.t, sim.state.q[1], sim.state.q[2], sim.state.q[0],
                        sim.state.qdot.iter().fold(0.0_f64,|m,v| m.max(v.abs())),
                        sim.state.q[4], sim.state.q[7]);
                }
            }
            Err(e) => { println!("BLOWUP at tick {tick}: {e}"); break; }
        }
    }
}
