use nalgebra::DVector;
use odelap_core::models;
use odelap_core::ode::{integrate, Method, TimeGrid};
use odelap_core::sensitivity::{propagate_first_order, propagate_sensitivities, SensMode};
use std::time::Instant;

fn main() {
    let pp = models::predator_prey();
    let times: Vec<f64> = (0..40).map(|i| 0.1 * i as f64).collect();
    let grid = TimeGrid::new(times, 1).unwrap();
    let x1 = pp.x1_true.clone();
    let th = pp.theta_true.clone();
    let reps = 2000;

    let t0 = Instant::now();
    for _ in 0..reps {
        integrate(&pp.system, &x1, &th, &grid, Method::Rk4).unwrap();
    }
    println!("integrate:        {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        propagate_first_order(&pp.system, &x1, &th, &grid, Method::Rk4).unwrap();
    }
    println!("propagate_first:  {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);

    let t0 = Instant::now();
    for _ in 0..reps {
        propagate_sensitivities(&pp.system, &x1, &th, &grid, Method::Rk4, SensMode::Discrete)
            .unwrap();
    }
    println!("propagate_full:   {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);

    let fhn = models::fitzhugh_nagumo();
    let grid = TimeGrid::new(fhn.default_times.clone(), 2).unwrap();
    let x1 = fhn.x1_true.clone();
    let th = fhn.theta_true.clone();
    let t0 = Instant::now();
    for _ in 0..reps {
        propagate_sensitivities(&fhn.system, &x1, &th, &grid, Method::Rk4, SensMode::Discrete)
            .unwrap();
    }
    println!("fhn m=2 full:     {:.1} us", t0.elapsed().as_secs_f64() * 1e6 / reps as f64);
}
