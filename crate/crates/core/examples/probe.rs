use nalgebra::DVector;
use odelap_core::laplace::{PriorSpec, ThetaPrior};
use odelap_core::models;
use odelap_core::ode::{Method, TimeGrid};
use odelap_core::pipeline::{refine_grid_means, run_griddy_laplace, LaplacePosterior, RunSettings};
use odelap_core::sampler::{build_grid, grid_sample};
use odelap_core::sensitivity::OdeTrajectory;
use odelap_core::stats::summarize_column;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    if which == "fhn" || which.is_empty() {
        let t0 = Instant::now();
        let entry = models::fitzhugh_nagumo();
        let data = models::simulate_data(
            &entry, &entry.theta_true, &entry.x1_true, entry.sigma2_true,
            &entry.default_times, 100, 606, false,
        ).unwrap();
        let prior = PriorSpec::new(
            entry.a, entry.b, entry.c, data.first_observation(),
            ThetaPrior::Box(entry.system.theta_support.clone()),
        ).unwrap();
        let mut settings = RunSettings::new(entry.theta_true.clone(), 1006);
        settings.m2 = 15;
        let source = OdeTrajectory::new(&entry.system, Method::Rk4);
        let refined = refine_grid_means(
            &source, &data, &prior, &entry.default_times, &[1, 2, 4, 8], 0.001, &settings,
        ).unwrap();
        let refine = &refined.result;
        println!("refine: chosen m = {}, stabilized = {}", refine.chosen_m, refine.stabilized);
        for (m, mean) in &refine.history {
            println!("  m={m}: mean = [{:.6}, {:.6}, {:.6}]", mean[0], mean[1], mean[2]);
        }
        let fine = refined.chosen_grid();
        println!("grid: {} pts, failed {}, oos {}", fine.len(), fine.n_failed, fine.n_out_of_support);
        let a_star = (data.n() * data.p()) as f64 / 2.0 + prior.a;
        let samples = grid_sample(fine, 10_000, 1006, a_star, prior.b, refine.chosen_m).unwrap();
        for (j, name) in ["theta1", "theta2", "theta3"].iter().enumerate() {
            let s = summarize_column(name, &samples.column(j));
            println!("  {name}: mean {:.4} median {:.4} CI ({:.4}, {:.4})", s.mean, s.median, s.q05, s.q95);
        }
        let s2 = summarize_column("sigma2", &samples.column(4));
        println!("  sigma2: mean {:.4} median {:.4} CI ({:.4}, {:.4})", s2.mean, s2.median, s2.q05, s2.q95);
        println!("FHN total: {:.1}s", t0.elapsed().as_secs_f64());
    }
    if which == "pp" || which.is_empty() {
        let t0 = Instant::now();
        let pp = models::predator_prey();
        let times: Vec<f64> = (0..40).map(|i| 0.1 * i as f64).collect();
        let data = models::simulate_data(&pp, &pp.theta_true, &pp.x1_true, 1.0, &times, 100, 808, true).unwrap();
        let prior = PriorSpec::new(pp.a, pp.b, pp.c, data.first_observation(),
            ThetaPrior::Box(pp.system.theta_support.clone())).unwrap();
        let mut settings = RunSettings::new(pp.theta_true.clone(), 1008);
        settings.axis_points = 11;
        settings.n_draws = 900;
        settings.thin = 5;
        let grid = TimeGrid::new(times, 1).unwrap();
        let source = OdeTrajectory::new(&pp.system, Method::Rk4);
        let run = run_griddy_laplace(&source, &data, &prior, &grid, &pp.system.theta_support, &settings).unwrap();
        println!("PP: {} draws in {:.1}s", run.samples.draws.len(), run.elapsed_s);
        let s3 = summarize_column("theta3", &run.samples.column(2));
        let sorted = odelap_core::math::sorted(&run.samples.column(2));
        let q005 = odelap_core::math::quantile_linear(&sorted, 0.005);
        let q995 = odelap_core::math::quantile_linear(&sorted, 0.995);
        println!("  theta3: mean {:.4} median {:.4} 90%CI ({:.4},{:.4}) 99%CI ({:.4},{:.4})",
            s3.mean, s3.median, s3.q05, s3.q95, q005, q995);
        println!("PP total: {:.1}s", t0.elapsed().as_secs_f64());
    }
}
