use odelap_core::laplace::{PriorSpec, ThetaPrior};
use odelap_core::models;
use odelap_core::ode::{Method, TimeGrid};
use odelap_core::pipeline::{run_griddy_laplace, RunSettings};
use odelap_core::sensitivity::OdeTrajectory;
use std::time::Instant;

fn main() {
    let pp = models::predator_prey();
    let times: Vec<f64> = (0..40).map(|i| 0.1 * i as f64).collect();
    for seed in [808u64, 11, 42, 2024, 31415] {
        let t0 = Instant::now();
        let data = models::simulate_data(&pp, &pp.theta_true, &pp.x1_true, 1.0, &times, 100, seed, true).unwrap();
        let prior = PriorSpec::new(pp.a, pp.b, pp.c, data.first_observation(),
            ThetaPrior::Box(pp.system.theta_support.clone())).unwrap();
        let mut settings = RunSettings::new(pp.theta_true.clone(), 1008);
        settings.axis_points = 11;
        settings.n_draws = 300;
        settings.thin = 3;
        let grid = TimeGrid::new(times.clone(), 1).unwrap();
        let source = OdeTrajectory::new(&pp.system, Method::Rk4);
        match run_griddy_laplace(&source, &data, &prior, &grid, &pp.system.theta_support, &settings) {
            Ok(run) => {
                let col = run.samples.column(2);
                let sorted = odelap_core::math::sorted(&col);
                let q005 = odelap_core::math::quantile_linear(&sorted, 0.005);
                let q995 = odelap_core::math::quantile_linear(&sorted, 0.995);
                let mean = col.iter().sum::<f64>() / col.len() as f64;
                println!("seed {seed}: theta3 mean {:.3} 99%CI ({:.3},{:.3}) contains2.25={} [{:.0}s]",
                    mean, q005, q995, q005 <= 2.25 && 2.25 <= q995, t0.elapsed().as_secs_f64());
            }
            Err(e) => println!("seed {seed}: ERROR {e} [{:.0}s]", t0.elapsed().as_secs_f64()),
        }
    }
}
