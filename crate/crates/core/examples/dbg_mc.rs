use gridfill::grid_model::*;
use gridfill::harness::{simulate_truth, ProfileParams};
use gridfill::mc_solver::*;
use gridfill::measurements::*;
use gridfill::transforms::DctBasis;
use std::time::Instant;

fn main() {
    let feeder = bundled_feeder();
    let model = build_linear_model(&feeder).unwrap();
    let t_steps = 8;
    let stacked = build_stacked_model(&model, t_steps).unwrap();
    let basis = DctBasis::new(t_steps, 2).unwrap();
    let (_, truth) = simulate_truth(&feeder, t_steps, &ProfileParams::default(), 21).unwrap();
    let mask = sample_mask(truth.shape(), 0.2, 21).unwrap();
    let masked = apply_mask(&truth, &mask).unwrap();

    for outer in [1usize, 3, 10] {
        let cfg = SolverConfig { outer_iters: outer, outer_tol: 0.0, ..SolverConfig::default() };
        let t0 = Instant::now();
        let report = joint_mc_cs(&masked, &stacked, &basis, &cfg).unwrap();
        println!(
            "outer {outer}: {:.2}s, objective {:.6e} -> {:.6e}",
            t0.elapsed().as_secs_f64(),
            report.objective_trace.first().unwrap(),
            report.objective_trace.last().unwrap()
        );
    }
}
