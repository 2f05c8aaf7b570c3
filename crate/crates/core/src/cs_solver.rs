//! l1-regularized recovery of sparse coefficients from compressed linear
//! measurements, solved with a monotone accelerated proximal-gradient
//! iteration (soft thresholding).
//!
//! The solved form is the penalized Lagrangian
//! `min_a lambda * |a|_1 + |h - Phi D a|_2^2`, with the voltage
//! constraint rows adjoined as an extra quadratic penalty in spatial
//! mode. The monotone variant keeps the objective trace nonincreasing.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid_model::LinearPfModel;
use crate::transforms::{DctBasis, ProjectionMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    /// Iteration budget ran out before the tolerance was met. The last
    /// iterate is still returned; callers decide whether that matters.
    IterationBudgetExhausted,
}

/// How the l1 weight is chosen for a problem instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaRule {
    /// `lambda = factor * |(Phi D)^T h|_inf`.
    RelativeToCorrelation(f64),
    Absolute(f64),
}

impl LambdaRule {
    fn resolve(self, scale: f64) -> f64 {
        match self {
            LambdaRule::RelativeToCorrelation(factor) => factor * scale,
            LambdaRule::Absolute(value) => value,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CsOptions {
    pub lambda: LambdaRule,
    pub max_iters: usize,
    /// Relative objective-change tolerance.
    pub rel_tol: f64,
    /// Subgradient-residual tolerance, relative to `|(Phi D)^T h|_inf`.
    pub opt_tol: f64,
}

impl Default for CsOptions {
    fn default() -> Self {
        Self {
            lambda: LambdaRule::RelativeToCorrelation(0.01),
            max_iters: 5000,
            rel_tol: 1e-8,
            opt_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub enum CsMode<'a> {
    /// Per-sensor time series; no grid coupling.
    Temporal,
    /// Whole-state recovery with the linearized voltage equation adjoined
    /// as quadratic penalty rows weighted by `nu`. The state layout is
    /// `[Re(s); Im(s); Re(v); Im(v)]`.
    Spatial { model: &'a LinearPfModel, nu: f64 },
}

#[derive(Debug)]
pub struct CsProblem<'a> {
    /// Compressed measurements `h`, length M.
    pub measurements: DVector<f64>,
    pub projection: &'a ProjectionMatrix,
    /// Sparsifying basis `D` (N x N); the signal is `z = D a`.
    pub basis: DMatrix<f64>,
    pub mode: CsMode<'a>,
    pub options: CsOptions,
}

#[derive(Debug, Clone)]
pub struct CsSolution {
    /// Sparse coefficients `a`.
    pub coefficients: DVector<f64>,
    /// Recovered signal `z = D a`.
    pub signal: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Infinity norm of the l1 subgradient residual at the returned point.
    pub optimality_residual: f64,
    /// Objective after every iteration; nonincreasing by construction.
    pub objective_trace: Vec<f64>,
    pub lambda: f64,
}

/// Solve the l1 recovery problem for `a_hat` (and `z_hat = D a_hat`).
pub fn solve_l1(problem: &CsProblem) -> Result<CsSolution> {
    let phi = problem.projection.matrix();
    let n = problem.basis.nrows();
    if problem.basis.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "basis must be square, got {}x{}",
            problem.basis.nrows(),
            problem.basis.ncols()
        )));
    }
    if phi.ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "projection has {} columns but basis size is {n}",
            phi.ncols()
        )));
    }
    if problem.measurements.len() != phi.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} measurements for a {}-row projection",
            problem.measurements.len(),
            phi.nrows()
        )));
    }

    let sensing = phi * &problem.basis;
    let (g, h) = match &problem.mode {
        CsMode::Temporal => (sensing, problem.measurements.clone()),
        CsMode::Spatial { model, nu } => {
            let pf_n = model.node_count();
            if n != 4 * pf_n {
                return Err(Error::DimensionMismatch(format!(
                    "spatial state length {n} is not 4x the {pf_n} phase-nodes"
                )));
            }
            if *nu < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "power-flow weight {nu} must be nonnegative"
                )));
            }
            // Constraint rows: [Re v; Im v] - B [Re s; Im s] = [Re w; Im w],
            // i.e. E z = c with E = [-B | I] over the state layout.
            let sqrt_nu = nu.sqrt();
            let m = phi.nrows();
            let mut g = DMatrix::zeros(m + 2 * pf_n, n);
            g.rows_mut(0, m).copy_from(&sensing);
            // E D: rows of D at voltage positions minus B times rows at
            // injection positions.
            let d_inj = problem.basis.rows(0, 2 * pf_n).into_owned();
            let d_volt = problem.basis.rows(2 * pf_n, 2 * pf_n).into_owned();
            let constraint = (&d_volt - model.b() * &d_inj) * sqrt_nu;
            g.rows_mut(m, 2 * pf_n).copy_from(&constraint);
            let mut h = DVector::zeros(m + 2 * pf_n);
            h.rows_mut(0, m).copy_from(&problem.measurements);
            let w = model.w();
            for i in 0..pf_n {
                h[m + i] = sqrt_nu * w[i].re;
                h[m + pf_n + i] = sqrt_nu * w[i].im;
            }
            (g, h)
        }
    };

    if g.amax() == 0.0 {
        return Err(Error::ZeroInput("sensing matrix Phi D is zero".into()));
    }

    let mut solution = solve_lasso(&g, &h, &problem.options)?;
    solution.signal = &problem.basis * &solution.coefficients;
    Ok(solution)
}

/// Monotone FISTA on `lambda |a|_1 + |h - G a|^2`.
fn solve_lasso(g: &DMatrix<f64>, h: &DVector<f64>, options: &CsOptions) -> Result<CsSolution> {
    let n = g.ncols();
    let correlation = g.tr_mul(h);
    let scale = correlation.amax();
    let lambda = options.lambda.resolve(scale);
    if lambda < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "l1 weight {lambda} must be nonnegative"
        )));
    }

    let objective = |a: &DVector<f64>| -> f64 {
        let residual = h - g * a;
        lambda * a.iter().map(|v| v.abs()).sum::<f64>() + residual.norm_squared()
    };
    let opt_residual = |a: &DVector<f64>| -> f64 {
        let grad = 2.0 * g.tr_mul(&(g * a - h));
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let r = if a[i] != 0.0 {
                (grad[i] + lambda * a[i].signum()).abs()
            } else {
                (grad[i].abs() - lambda).max(0.0)
            };
            worst = worst.max(r);
        }
        worst
    };

    if scale == 0.0 {
        // h = 0 (or orthogonal to the range): a = 0 is already optimal.
        let a = DVector::zeros(n);
        let obj = objective(&a);
        return Ok(CsSolution {
            signal: a.clone(),
            coefficients: a,
            objective: obj,
            status: SolveStatus::Converged,
            iterations: 0,
            optimality_residual: 0.0,
            objective_trace: vec![obj],
            lambda,
        });
    }

    // Gradient of |h - G a|^2 is 2 G^T (G a - h); its Lipschitz constant
    // is twice the largest squared singular value of G.
    let sigma_max = g
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max);
    let step = 1.0 / (2.0 * sigma_max * sigma_max);
    let threshold = step * lambda;
    let opt_floor = options.opt_tol * scale;

    let mut x = DVector::<f64>::zeros(n);
    let mut y = x.clone();
    let mut t_acc: f64 = 1.0;
    let mut f_best = objective(&x);
    let mut trace = vec![f_best];
    let mut status = SolveStatus::IterationBudgetExhausted;
    let mut iterations = 0;

    for iter in 1..=options.max_iters {
        iterations = iter;
        let grad = 2.0 * g.tr_mul(&(g * &y - h));
        let mut z = &y - step * grad;
        for v in z.iter_mut() {
            *v = soft_threshold(*v, threshold);
        }
        let f_z = objective(&z);
        if !f_z.is_finite() {
            return Err(Error::NonFiniteObjective {
                iteration: iter,
                trace,
            });
        }

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
        // Monotone step: keep the better of the candidate and the incumbent.
        let (x_new, f_new) = if f_z <= f_best {
            (z.clone(), f_z)
        } else {
            (x.clone(), f_best)
        };
        y = &x_new + (t_acc / t_next) * (&z - &x_new) + ((t_acc - 1.0) / t_next) * (&x_new - &x);
        x = x_new;
        t_acc = t_next;

        let rel_change = (f_best - f_new).abs() / f_best.abs().max(1.0);
        f_best = f_new;
        trace.push(f_best);

        if rel_change <= options.rel_tol && opt_residual(&x) <= opt_floor {
            status = SolveStatus::Converged;
            break;
        }
    }

    let optimality_residual = opt_residual(&x);
    Ok(CsSolution {
        signal: x.clone(),
        coefficients: x,
        objective: f_best,
        status,
        iterations,
        optimality_residual,
        objective_trace: trace,
        lambda,
    })
}

#[inline]
fn soft_threshold(v: f64, threshold: f64) -> f64 {
    if v > threshold {
        v - threshold
    } else if v < -threshold {
        v + threshold
    } else {
        0.0
    }
}

/// Recover a full-length time series from its compressed samples.
///
/// No power-flow constraints at this stage. A square projection makes the
/// system determined, so it is inverted directly instead of running the
/// l1 iteration.
pub fn temporal_cs_recover(
    compressed: &DVector<f64>,
    projection: &ProjectionMatrix,
    basis: &DctBasis,
    options: &CsOptions,
) -> Result<CsSolution> {
    if projection.cols() != basis.len() {
        return Err(Error::DimensionMismatch(format!(
            "projection over {} samples but basis size is {}",
            projection.cols(),
            basis.len()
        )));
    }
    if compressed.len() != projection.rows() {
        return Err(Error::DimensionMismatch(format!(
            "{} compressed samples for a {}-row projection",
            compressed.len(),
            projection.rows()
        )));
    }

    if projection.rows() == projection.cols() {
        let signal = projection
            .matrix()
            .clone()
            .lu()
            .solve(compressed)
            .ok_or_else(|| {
                Error::InvalidParameter("square projection matrix is singular".into())
            })?;
        let coefficients = basis.forward(&signal);
        return Ok(CsSolution {
            objective: (compressed - projection.apply(&signal)).norm_squared(),
            signal,
            coefficients,
            status: SolveStatus::Converged,
            iterations: 0,
            optimality_residual: 0.0,
            objective_trace: Vec::new(),
            lambda: 0.0,
        });
    }

    // The series is sparse in DCT coefficients: z = D^T a for orthonormal
    // D, so the synthesis matrix passed to the solver is D^T.
    let problem = CsProblem {
        measurements: compressed.clone(),
        projection,
        basis: basis.matrix().transpose(),
        mode: CsMode::Temporal,
        options: options.clone(),
    };
    solve_l1(&problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::{build_linear_model, bundled_feeder};
    use crate::transforms::{projection_matrix, DctBasis, ProjectionKind, ProjectionMatrix};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dct_synthesis(t: usize) -> DMatrix<f64> {
        DctBasis::new(t, 1).unwrap().matrix().transpose()
    }

    #[test]
    fn zero_measurements_return_zero_coefficients() {
        let phi = projection_matrix(6, 8, ProjectionKind::Gaussian, 1).unwrap();
        let problem = CsProblem {
            measurements: DVector::zeros(6),
            projection: &phi,
            basis: dct_synthesis(8),
            mode: CsMode::Temporal,
            options: CsOptions::default(),
        };
        let solution = solve_l1(&problem).unwrap();
        assert_eq!(solution.coefficients.amax(), 0.0);
        assert_eq!(solution.status, SolveStatus::Converged);
    }

    #[test]
    fn one_sparse_signal_recovers_from_six_gaussian_samples() {
        let n = 8;
        let basis = dct_synthesis(n);
        for seed in [1u64, 2, 3, 4, 5] {
            let mut a_true = DVector::zeros(n);
            a_true[2] = 1.7;
            let z_true = &basis * &a_true;
            let phi = projection_matrix(6, n, ProjectionKind::Gaussian, seed).unwrap();
            let problem = CsProblem {
                measurements: phi.apply(&z_true),
                projection: &phi,
                basis: basis.clone(),
                mode: CsMode::Temporal,
                options: CsOptions {
                    lambda: LambdaRule::RelativeToCorrelation(1e-4),
                    ..CsOptions::default()
                },
            };
            let solution = solve_l1(&problem).unwrap();
            let rel = (&solution.signal - &z_true).norm() / z_true.norm();
            assert!(rel <= 1e-3, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn identity_sensing_with_vanishing_penalty_returns_measurements() {
        let n = 8;
        let phi = ProjectionMatrix::identity(n);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
        let problem = CsProblem {
            measurements: h.clone(),
            projection: &phi,
            basis: dct_synthesis(n),
            mode: CsMode::Temporal,
            options: CsOptions {
                lambda: LambdaRule::RelativeToCorrelation(1e-9),
                ..CsOptions::default()
            },
        };
        let solution = solve_l1(&problem).unwrap();
        assert!((&solution.signal - &h).norm() <= 1e-6);
    }

    #[test]
    fn converged_solutions_satisfy_the_subgradient_condition() {
        let n = 16;
        let basis = dct_synthesis(n);
        let phi = projection_matrix(10, n, ProjectionKind::Gaussian, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = DVector::from_fn(10, |_, _| rng.random::<f64>() - 0.5);
        let options = CsOptions::default();
        let problem = CsProblem {
            measurements: h.clone(),
            projection: &phi,
            basis: basis.clone(),
            mode: CsMode::Temporal,
            options: options.clone(),
        };
        let solution = solve_l1(&problem).unwrap();
        assert_eq!(solution.status, SolveStatus::Converged);
        let scale = (phi.matrix() * &basis).tr_mul(&h).amax();
        assert!(solution.optimality_residual <= options.opt_tol * scale);
        // Returned objective is the best seen over the whole trace.
        let best = solution
            .objective_trace
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        assert!(solution.objective <= best * (1.0 + 1e-6) + 1e-300);
    }

    #[test]
    fn objective_trace_is_monotone() {
        for seed in 0..8u64 {
            let n = 24;
            let m = 12;
            let basis = dct_synthesis(n);
            let phi = projection_matrix(m, n, ProjectionKind::Gaussian, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let h = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
            let problem = CsProblem {
                measurements: h,
                projection: &phi,
                basis: basis.clone(),
                mode: CsMode::Temporal,
                options: CsOptions::default(),
            };
            let solution = solve_l1(&problem).unwrap();
            for pair in solution.objective_trace.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-12, "trace increased: {pair:?}");
            }
        }
    }

    #[test]
    fn scaling_the_measurements_and_penalty_scales_the_solution() {
        let n = 12;
        let m = 8;
        let beta = 3.7;
        let basis = dct_synthesis(n);
        let phi = projection_matrix(m, n, ProjectionKind::Gaussian, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let h = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
        let lambda = 0.02;

        let solve = |h: DVector<f64>, lambda: f64| {
            let problem = CsProblem {
                measurements: h,
                projection: &phi,
                basis: basis.clone(),
                mode: CsMode::Temporal,
                options: CsOptions {
                    lambda: LambdaRule::Absolute(lambda),
                    ..CsOptions::default()
                },
            };
            solve_l1(&problem).unwrap()
        };

        let base = solve(h.clone(), lambda);
        let scaled = solve(beta * &h, beta * lambda);
        let expected = beta * &base.coefficients;
        let rel = (&scaled.coefficients - &expected).norm() / expected.norm().max(1e-300);
        assert!(rel <= 1e-6, "relative deviation {rel}");
    }

    #[test]
    fn temporal_recovery_of_slowly_varying_series() {
        // 2-sparse series (DC + first DCT atom) at 80% compression:
        // ceil(0.8 * 8) = 7 of 8 samples kept, matching the sweep harness.
        let t = 8;
        let basis = DctBasis::new(t, 2).unwrap();
        let x = DVector::from_fn(t, |i, _| {
            5.0 + 0.3 * (std::f64::consts::PI * (2.0 * i as f64 + 1.0) / 16.0).cos()
        });
        let mut worst: f64 = 0.0;
        for seed in 1..=10u64 {
            let phi = projection_matrix(7, t, ProjectionKind::Gaussian, seed).unwrap();
            let solution = temporal_cs_recover(
                &phi.apply(&x),
                &phi,
                &basis,
                &CsOptions {
                    lambda: LambdaRule::RelativeToCorrelation(1e-4),
                    ..CsOptions::default()
                },
            )
            .unwrap();
            let rel = (&solution.signal - &x).norm() / x.norm();
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-2, "worst relative error {worst}");
    }

    #[test]
    fn full_rate_recovery_is_exact() {
        let t = 8;
        let basis = DctBasis::new(t, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = DVector::from_fn(t, |_, _| rng.random::<f64>());
        let phi = ProjectionMatrix::identity(t);
        let solution = temporal_cs_recover(&x.clone(), &phi, &basis, &CsOptions::default()).unwrap();
        assert!((solution.signal - &x).amax() <= 1e-12);

        // Any invertible square projection is solved directly too.
        let square = projection_matrix(t, t, ProjectionKind::Gaussian, 2).unwrap();
        let solution =
            temporal_cs_recover(&square.apply(&x), &square, &basis, &CsOptions::default()).unwrap();
        assert!((solution.signal - &x).amax() <= 1e-9);
    }

    #[test]
    fn incompressible_series_reports_without_crashing() {
        let t = 8;
        let basis = DctBasis::new(t, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let noise = DVector::from_fn(t, |_, _| rng.random::<f64>() - 0.5);
        let phi = projection_matrix(3, t, ProjectionKind::Gaussian, 4).unwrap();
        let solution =
            temporal_cs_recover(&phi.apply(&noise), &phi, &basis, &CsOptions::default()).unwrap();
        // Underdetermined pure-noise recovery is allowed to be bad; it just
        // has to come back with a status instead of failing.
        assert!(solution.signal.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn spatial_mode_pulls_voltages_toward_the_power_flow_manifold() {
        let feeder = bundled_feeder();
        let model = build_linear_model(&feeder).unwrap();
        let n = feeder.node_count();
        let state_len = 4 * n;

        // A state that satisfies the linear power-flow map exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = DVector::from_fn(n, |_, _| {
            num_complex::Complex64::new(
                0.03 * (rng.random::<f64>() - 0.5),
                0.01 * (rng.random::<f64>() - 0.5),
            )
        });
        let (v, _) = model.predict(&s).unwrap();
        let mut z = DVector::zeros(state_len);
        for i in 0..n {
            z[i] = s[i].re;
            z[n + i] = s[i].im;
            z[2 * n + i] = v[i].re;
            z[3 * n + i] = v[i].im;
        }

        let m = state_len / 2;
        let phi = projection_matrix(m, state_len, ProjectionKind::Gaussian, 8).unwrap();
        let h = phi.apply(&z);
        let basis = DMatrix::identity(state_len, state_len);

        let pf_residual = |sol: &CsSolution| {
            let zs = &sol.signal;
            let mut p = DVector::zeros(2 * n);
            for i in 0..2 * n {
                p[i] = zs[i];
            }
            let dv = model.b() * &p;
            let mut r: f64 = 0.0;
            for i in 0..n {
                let re = zs[2 * n + i] - (model.w()[i].re + dv[i]);
                let im = zs[3 * n + i] - (model.w()[i].im + dv[n + i]);
                r += re * re + im * im;
            }
            r.sqrt()
        };

        let solve = |mode: CsMode| {
            let problem = CsProblem {
                measurements: h.clone(),
                projection: &phi,
                basis: basis.clone(),
                mode,
                options: CsOptions {
                    lambda: LambdaRule::RelativeToCorrelation(1e-4),
                    max_iters: 20000,
                    ..CsOptions::default()
                },
            };
            solve_l1(&problem).unwrap()
        };

        let unconstrained = solve(CsMode::Temporal);
        let constrained = solve(CsMode::Spatial {
            model: &model,
            nu: 100.0,
        });
        assert!(
            pf_residual(&constrained) < pf_residual(&unconstrained),
            "constrained {} vs unconstrained {}",
            pf_residual(&constrained),
            pf_residual(&unconstrained)
        );
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let phi = projection_matrix(4, 8, ProjectionKind::Gaussian, 1).unwrap();
        let problem = CsProblem {
            measurements: DVector::zeros(5),
            projection: &phi,
            basis: dct_synthesis(8),
            mode: CsMode::Temporal,
            options: CsOptions::default(),
        };
        assert!(matches!(
            solve_l1(&problem),
            Err(Error::DimensionMismatch(_))
        ));

        let problem = CsProblem {
            measurements: DVector::zeros(4),
            projection: &phi,
            basis: dct_synthesis(7),
            mode: CsMode::Temporal,
            options: CsOptions::default(),
        };
        assert!(solve_l1(&problem).is_err());

        let basis = DctBasis::new(6, 2).unwrap();
        assert!(temporal_cs_recover(&DVector::zeros(4), &phi, &basis, &CsOptions::default()).is_err());
    }
}
