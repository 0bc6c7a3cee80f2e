use walker_core::dynamics::*;
use walker_core::world::*;
use std::time::Instant;
fn main() {
    let p = ModelParams::nominal();
    let w = World::from_params(&p);
    let mut sim = Simulation::new(&w, pin_base(w.standing_state(), true));
    let targets = [0.1, 0.2, 0.0, -0.1, 0.3, 0.0];
    let t0 = Instant::now();
    let n_ticks = 3000;
    for _ in 0..n_ticks { sim.control_tick(&targets, 33).unwrap(); }
    let dt = t0.elapsed().as_secs_f64();
    println!("{} substeps in {:.3}s -> {:.2} us/substep, {:.1} us/control tick",
        n_ticks*33, dt, dt/ (n_ticks as f64*33.0) * 1e6, dt/n_ticks as f64*1e6);

    // unpinned standing with zero action (falls eventually, catch error)
    let mut sim = Simulation::new(&w, w.standing_state());
    let t0 = Instant::now();
    let mut ticks = 0;
    for _ in 0..n_ticks {
        match sim.control_tick(&[0.0;6], 33) { Ok(_) => ticks += 1, Err(_) => break }
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("unpinned: {} ticks in {:.3}s -> {:.2} us/substep", ticks, dt, dt/(ticks as f64*33.0)*1e6);
}
