//! The three estimators: factorized power-flow-constrained matrix
//! completion, the joint completion + temporal-sparsity alternating
//! minimization, and the two-stage CS-then-MC pipeline.
//!
//! The completed matrix is factorized as `X = U V` and the nuclear norm
//! replaced by `|U|_F^2 + |V|_F^2`. Each alternating sub-problem is
//! convex and smooth (the group l2 term is smoothed) and is minimized by
//! gradient descent with a backtracking line search, warm-started at the
//! current factor so the outer objective never increases.

use nalgebra::{DMatrix, DVector};

use crate::cs_solver::{temporal_cs_recover, CsOptions, SolveStatus};
use crate::error::{Error, Result};
use crate::grid_model::{build_stacked_model, LinearPfModel, StackedPfModel};
use crate::measurements::{
    extract_p, extract_y, scatter_p, scatter_y, sparsity_stack, sparsity_stack_adjoint,
    BlockMatrix, MaskedMatrix, MeasurementMatrix, ObservationMask, RowKind, ROW_KINDS,
};
use crate::transforms::{DctBasis, ProjectionMatrix};

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Weight of the observed-entry data-fit term.
    pub lambda1: f64,
    /// Weight of the linearized power-flow residual.
    pub nu: f64,
    /// Weight of the temporal-sparsity (high-frequency DCT) term.
    pub lambda2: f64,
    /// Factor width r.
    pub rank: usize,
    pub outer_iters: usize,
    /// Relative objective-change tolerance of the outer loop.
    pub outer_tol: f64,
    pub inner_iters: usize,
    /// Relative objective-change tolerance of each factor sub-solve.
    pub inner_tol: f64,
    /// Smoothing for the group l2 term: |s| -> sqrt(|s|^2 + eps^2).
    pub smoothing_eps: f64,
    /// Record per-iteration diagnostics in the report.
    pub collect_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda1: 100.0,
            nu: 10.0,
            lambda2: 1.0,
            rank: 5,
            outer_iters: 50,
            outer_tol: 1e-6,
            inner_iters: 300,
            inner_tol: 1e-8,
            smoothing_eps: 1e-8,
            collect_iterates: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, rows: usize, cols: usize) -> Result<()> {
        if self.lambda1 < 0.0 || self.nu < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::InvalidParameter(
                "tuning parameters lambda1, nu, lambda2 must be nonnegative".into(),
            ));
        }
        if self.rank < 1 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        if self.rank > rows.min(cols) {
            return Err(Error::InvalidParameter(format!(
                "rank {} exceeds min dimension {} of a {}x{} matrix",
                self.rank,
                rows.min(cols),
                rows,
                cols
            )));
        }
        if !(self.smoothing_eps > 0.0) {
            return Err(Error::InvalidParameter(
                "smoothing epsilon must be positive".into(),
            ));
        }
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidParameter(
                "iteration budgets must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The factorization `X = U V` with `U` m x r and `V` r x n.
#[derive(Debug, Clone)]
pub struct FactorPair {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl FactorPair {
    pub fn product(&self) -> DMatrix<f64> {
        &self.u * &self.v
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.u.norm_squared() + self.v.norm_squared()
    }

    /// Upper bound on the nuclear norm of `U V`.
    pub fn nuclear_bound(&self) -> f64 {
        0.5 * self.frobenius_sq()
    }
}

/// Per-outer-iteration diagnostics, recorded when
/// [`SolverConfig::collect_iterates`] is set.
#[derive(Debug, Clone)]
pub struct IterateStats {
    pub objective: f64,
    /// `|P_Omega(X - M)|_F`
    pub data_residual: f64,
    /// `|y - (A p + b)|_2`
    pub pf_residual: f64,
    /// `|f3(X)|_2`
    pub sparsity_norm: f64,
    /// `|U|_F^2 + |V|_F^2`
    pub factor_norm_sq: f64,
    /// Nuclear norm of `U V`.
    pub nuclear_norm: f64,
}

#[derive(Debug, Clone)]
pub struct EstimateReport {
    pub estimate: BlockMatrix,
    /// Full objective after initialization and after every outer iteration.
    pub objective_trace: Vec<f64>,
    pub factors: FactorPair,
    pub outer_iterations: usize,
    pub converged: bool,
    pub iterates: Option<Vec<IterateStats>>,
}

/// SVD initialization of the factors from the zero-filled observed matrix,
/// rescaled by `1/fad` to debias the spectrum.
pub fn init_factors(masked: &MaskedMatrix, rank: usize) -> Result<FactorPair> {
    let (rows, cols) = masked.shape();
    if rank < 1 {
        return Err(Error::InvalidParameter("rank must be at least 1".into()));
    }
    if rank > rows.min(cols) {
        return Err(Error::InvalidParameter(format!(
            "rank {} exceeds min dimension {}",
            rank,
            rows.min(cols)
        )));
    }
    // The SVD never terminates on non-finite input; reject it here.
    if masked.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective {
            iteration: 0,
            trace: Vec::new(),
        });
    }
    let scaled = masked.values() / masked.mask().fad();
    let svd = scaled.svd(true, true);
    let u_full = svd.u.expect("svd with vectors");
    let v_t_full = svd.v_t.expect("svd with vectors");
    let mut u = u_full.columns(0, rank).into_owned();
    let mut v = v_t_full.rows(0, rank).into_owned();
    for k in 0..rank {
        let root = svd.singular_values[k].max(0.0).sqrt();
        u.column_mut(k).scale_mut(root);
        v.row_mut(k).scale_mut(root);
    }
    Ok(FactorPair { u, v })
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

struct Objective<'a> {
    masked: &'a MaskedMatrix,
    stacked: &'a StackedPfModel,
    basis: Option<&'a DctBasis>,
    cfg: &'a SolverConfig,
    t_steps: usize,
    n: usize,
}

struct XTerms {
    total: f64,
    data_residual: f64,
    pf_residual: f64,
    sparsity_norm: f64,
}

impl<'a> Objective<'a> {
    fn x_terms(&self, x: &DMatrix<f64>) -> Result<XTerms> {
        let mut total = 0.0;
        let mut data_sq = 0.0;
        for &(r, c) in self.masked.mask().cells() {
            let d = x[(r, c)] - self.masked.values()[(r, c)];
            data_sq += d * d;
        }
        total += self.cfg.lambda1 * data_sq;

        let mut pf_norm = 0.0;
        if self.cfg.nu > 0.0 {
            let residual = self.pf_residual(x)?;
            let sq = residual.norm_squared();
            pf_norm = sq.sqrt();
            total += self.cfg.nu * sq;
        }

        let mut sparsity_norm = 0.0;
        if let Some(basis) = self.basis {
            let stack = sparsity_stack(x, basis)?;
            sparsity_norm = stack.norm();
            let eps = self.cfg.smoothing_eps;
            total += self.cfg.lambda2 * (sparsity_norm * sparsity_norm + eps * eps).sqrt();
        }

        Ok(XTerms {
            total,
            data_residual: data_sq.sqrt(),
            pf_residual: pf_norm,
            sparsity_norm,
        })
    }

    fn pf_residual(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let y = extract_y(x)?;
        let p = extract_p(x)?;
        Ok(y - self.stacked.apply(&p)? - self.stacked.b())
    }

    /// Gradient of the X-dependent terms with respect to X.
    fn x_gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (rows, cols) = (x.nrows(), x.ncols());
        let mut grad = DMatrix::zeros(rows, cols);
        for &(r, c) in self.masked.mask().cells() {
            grad[(r, c)] = 2.0 * self.cfg.lambda1 * (x[(r, c)] - self.masked.values()[(r, c)]);
        }

        if self.cfg.nu > 0.0 {
            let residual = self.pf_residual(x)?;
            let mut scaled = residual.clone();
            scaled.scale_mut(2.0 * self.cfg.nu);
            scatter_y(&scaled, self.t_steps, self.n, &mut grad);
            let mut back = self.stacked.apply_transpose(&scaled)?;
            back.scale_mut(-1.0);
            scatter_p(&back, self.t_steps, self.n, &mut grad);
        }

        if let Some(basis) = self.basis {
            let stack = sparsity_stack(x, basis)?;
            let eps = self.cfg.smoothing_eps;
            let smooth = (stack.norm_squared() + eps * eps).sqrt();
            let mut scaled = stack;
            scaled.scale_mut(self.cfg.lambda2 / smooth);
            sparsity_stack_adjoint(&scaled, basis, self.t_steps, self.n, &mut grad);
        }
        Ok(grad)
    }

    fn full(&self, factors: &FactorPair) -> Result<f64> {
        Ok(factors.frobenius_sq() + self.x_terms(&factors.product())?.total)
    }
}

// ---------------------------------------------------------------------------
// Inner factor solves
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
enum Side {
    U,
    V,
}

/// Minimize `|Z|_F^2 + q(Z V)` (or `q(U Z)`) over one factor by gradient
/// descent with Barzilai-Borwein step seeding and Armijo backtracking.
/// Starts from the current factor, so the value never increases.
fn minimize_factor(
    obj: &Objective<'_>,
    factors: &mut FactorPair,
    side: Side,
    initial_step: f64,
) -> Result<f64> {
    const ARMIJO: f64 = 1e-4;
    const MIN_STEP: f64 = 1e-20;

    let cfg = obj.cfg;
    let phi = |fp: &FactorPair| -> Result<f64> {
        let z = match side {
            Side::U => &fp.u,
            Side::V => &fp.v,
        };
        Ok(z.norm_squared() + obj.x_terms(&fp.product())?.total)
    };

    let grad_of = |fp: &FactorPair| -> Result<DMatrix<f64>> {
        let x = fp.product();
        let w = obj.x_gradient(&x)?;
        Ok(match side {
            Side::U => 2.0 * &fp.u + w * fp.v.transpose(),
            Side::V => 2.0 * &fp.v + fp.u.transpose() * w,
        })
    };

    let mut f = phi(factors)?;
    if !f.is_finite() {
        return Err(Error::NonFiniteObjective {
            iteration: 0,
            trace: vec![f],
        });
    }
    let mut step = initial_step;
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None; // (z, grad)

    for _ in 0..cfg.inner_iters {
        let grad = grad_of(factors)?;
        let gnorm_sq = grad.norm_squared();
        if gnorm_sq <= 1e-24 * f.abs().max(1.0) {
            break;
        }
        let z_current = match side {
            Side::U => factors.u.clone(),
            Side::V => factors.v.clone(),
        };

        // Barzilai-Borwein seed from the previous (step, gradient) pair.
        if let Some((z_old, g_old)) = &prev {
            let dz = &z_current - z_old;
            let dg = &grad - g_old;
            let denom = dz.dot(&dg);
            if denom > 0.0 {
                let bb = dz.norm_squared() / denom;
                if bb.is_finite() && bb > 0.0 {
                    step = bb.clamp(1e-12, 1e6);
                }
            }
        } else {
            step = step.max(MIN_STEP);
        }

        let mut accepted = false;
        while step >= MIN_STEP {
            let candidate = &z_current - step * &grad;
            let trial = match side {
                Side::U => FactorPair {
                    u: candidate,
                    v: factors.v.clone(),
                },
                Side::V => FactorPair {
                    u: factors.u.clone(),
                    v: candidate,
                },
            };
            let f_trial = phi(&trial)?;
            if !f_trial.is_finite() {
                step *= 0.5;
                continue;
            }
            if f_trial <= f - ARMIJO * step * gnorm_sq {
                match side {
                    Side::U => factors.u = trial.u,
                    Side::V => factors.v = trial.v,
                }
                let rel = (f - f_trial) / f.abs().max(1.0);
                f = f_trial;
                accepted = true;
                prev = Some((z_current, grad));
                if rel < cfg.inner_tol {
                    return Ok(f);
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent direction at float precision: stationary.
            break;
        }
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Estimators
// ---------------------------------------------------------------------------

fn run_alternating(
    masked: &MaskedMatrix,
    stacked: &StackedPfModel,
    basis: Option<&DctBasis>,
    cfg: &SolverConfig,
) -> Result<EstimateReport> {
    let (rows, cols) = masked.shape();
    cfg.validate(rows, cols)?;
    let t_steps = rows / ROW_KINDS;
    if stacked.t_steps() != t_steps || stacked.node_count() != cols {
        return Err(Error::DimensionMismatch(format!(
            "power-flow model covers {} steps x {} nodes, matrix is {} x {}",
            stacked.t_steps(),
            stacked.node_count(),
            t_steps,
            cols
        )));
    }
    if let Some(b) = basis {
        if b.len() != t_steps {
            return Err(Error::DimensionMismatch(format!(
                "basis size {} for {} time steps",
                b.len(),
                t_steps
            )));
        }
    }

    let obj = Objective {
        masked,
        stacked,
        basis: if cfg.lambda2 > 0.0 { basis } else { None },
        cfg,
        t_steps,
        n: cols,
    };

    let mut factors = init_factors(masked, cfg.rank)?;
    let mut f_now = obj.full(&factors)?;
    if !f_now.is_finite() {
        return Err(Error::NonFiniteObjective {
            iteration: 0,
            trace: vec![f_now],
        });
    }
    let mut trace = vec![f_now];
    let mut iterates = cfg.collect_iterates.then(Vec::new);
    if let Some(stats) = iterates.as_mut() {
        stats.push(collect_stats(&obj, &factors)?);
    }

    // Conservative first step from a curvature bound; the BB seed takes
    // over immediately after.
    let a_norm = stacked.block_spectral_norm();
    let curvature = |other_spectral: f64| -> f64 {
        let coupling =
            2.0 * cfg.lambda1 + 2.0 * cfg.nu * (1.0 + a_norm) * (1.0 + a_norm) + cfg.lambda2;
        2.0 + coupling * other_spectral * other_spectral
    };

    let mut converged = false;
    let mut outer_done = 0;
    for outer in 1..=cfg.outer_iters {
        outer_done = outer;
        let v_spectral = spectral_norm(&factors.v);
        minimize_factor(&obj, &mut factors, Side::U, 1.0 / curvature(v_spectral))?;
        let u_spectral = spectral_norm(&factors.u);
        minimize_factor(&obj, &mut factors, Side::V, 1.0 / curvature(u_spectral))?;
        // The inner solves track only their own factor's norm; recompute
        // the full objective for the trace.
        let f_after = obj.full(&factors)?;

        if !f_after.is_finite() {
            return Err(Error::NonFiniteObjective {
                iteration: outer,
                trace,
            });
        }
        // Warm-started descent cannot increase the objective; anything
        // beyond float noise means the inner solve went wrong.
        if f_after > f_now + 1e-6 * f_now.abs().max(1.0) {
            return Err(Error::InnerSolveDiverged {
                iteration: outer,
                trace,
            });
        }
        trace.push(f_after);
        if let Some(stats) = iterates.as_mut() {
            stats.push(collect_stats(&obj, &factors)?);
        }
        let rel = (f_now - f_after).abs() / f_now.abs().max(1.0);
        f_now = f_after;
        if rel < cfg.outer_tol {
            converged = true;
            break;
        }
    }

    Ok(EstimateReport {
        estimate: BlockMatrix::new(factors.product())?,
        objective_trace: trace,
        factors,
        outer_iterations: outer_done,
        converged,
        iterates,
    })
}

fn collect_stats(obj: &Objective<'_>, factors: &FactorPair) -> Result<IterateStats> {
    let x = factors.product();
    let terms = obj.x_terms(&x)?;
    let nuclear: f64 = x.clone().svd(false, false).singular_values.iter().sum();
    Ok(IterateStats {
        objective: factors.frobenius_sq() + terms.total,
        data_residual: terms.data_residual,
        pf_residual: terms.pf_residual,
        sparsity_norm: terms.sparsity_norm,
        factor_norm_sq: factors.frobenius_sq(),
        nuclear_norm: nuclear,
    })
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Joint completion: low-rank factors + observed-entry fit + stacked
/// power-flow penalty + high-frequency DCT penalty, alternating between
/// the two factors.
pub fn joint_mc_cs(
    masked: &MaskedMatrix,
    stacked: &StackedPfModel,
    basis: &DctBasis,
    config: &SolverConfig,
) -> Result<EstimateReport> {
    let t_steps = masked.shape().0 / ROW_KINDS;
    if t_steps < 2 {
        return Err(Error::InvalidParameter(
            "joint estimation needs at least 2 time steps".into(),
        ));
    }
    run_alternating(masked, stacked, Some(basis), config)
}

/// Single-time completion with power-flow constraints: the same
/// factorized machinery with `T = 1` and no temporal term.
pub fn classic_mc(
    masked: &MaskedMatrix,
    model: &LinearPfModel,
    config: &SolverConfig,
) -> Result<EstimateReport> {
    let (rows, cols) = masked.shape();
    if rows != ROW_KINDS {
        return Err(Error::DimensionMismatch(format!(
            "classic completion works on a single {ROW_KINDS}-row time step, got {rows} rows"
        )));
    }
    let stacked = build_stacked_model(model, 1)?;
    let mut cfg = config.clone();
    cfg.lambda2 = 0.0;
    cfg.rank = cfg.rank.min(rows.min(cols));
    run_alternating(masked, &stacked, None, &cfg)
}

// ---------------------------------------------------------------------------
// Two-stage CS-MC pipeline
// ---------------------------------------------------------------------------

/// One sensed cell-series: the measurement kind and column it lives at,
/// plus its compressed temporal samples and the projection that made them.
#[derive(Debug, Clone)]
pub struct SensorStream {
    pub kind: RowKind,
    pub column: usize,
    pub compressed: DVector<f64>,
    pub projection: ProjectionMatrix,
}

#[derive(Debug, Clone)]
pub struct Stage1Summary {
    pub kind: RowKind,
    pub column: usize,
    pub status: SolveStatus,
    pub iterations: usize,
    pub optimality_residual: f64,
}

#[derive(Debug)]
pub struct PipelineReport {
    pub estimate: BlockMatrix,
    pub per_time: Vec<EstimateReport>,
    pub stage1: Vec<Stage1Summary>,
}

/// Two-stage recovery: per-sensor temporal CS reconstruction (no
/// power-flow coupling), then single-time constrained completion at each
/// step using the reconstructed values as observations.
pub fn cs_mc_pipeline(
    sensors: &[SensorStream],
    basis: &DctBasis,
    masks: &[ObservationMask],
    model: &LinearPfModel,
    config: &SolverConfig,
    cs_options: &CsOptions,
) -> Result<PipelineReport> {
    let t_steps = basis.len();
    if masks.len() != t_steps {
        return Err(Error::DimensionMismatch(format!(
            "{} per-time masks for {} time steps",
            masks.len(),
            t_steps
        )));
    }
    if sensors.is_empty() {
        return Err(Error::EmptyMask);
    }
    let n = model.node_count();
    let m_rows = sensors[0].projection.rows();
    for sensor in sensors {
        if sensor.projection.cols() != t_steps {
            return Err(Error::DimensionMismatch(format!(
                "sensor {}[{}]: projection spans {} samples, expected {}",
                sensor.kind.label(),
                sensor.column,
                sensor.projection.cols(),
                t_steps
            )));
        }
        if sensor.projection.rows() != m_rows {
            return Err(Error::InvalidParameter(format!(
                "sensor {}[{}]: compression ratio differs from the first sensor",
                sensor.kind.label(),
                sensor.column
            )));
        }
        if sensor.column >= n {
            return Err(Error::IndexOutOfRange(format!(
                "sensor column {} (model has {n} phase-nodes)",
                sensor.column
            )));
        }
    }

    // Stage 1: recover each sensed series.
    let mut values = DMatrix::zeros(ROW_KINDS * t_steps, n);
    let mut stage1 = Vec::with_capacity(sensors.len());
    for sensor in sensors {
        let context = format!(
            "stage 1, sensor {}[{}]",
            sensor.kind.label(),
            sensor.column
        );
        let solution =
            temporal_cs_recover(&sensor.compressed, &sensor.projection, basis, cs_options)
                .map_err(|e| e.in_stage(context.clone()))?;
        for t in 0..t_steps {
            values[(t * ROW_KINDS + sensor.kind.index(), sensor.column)] = solution.signal[t];
        }
        stage1.push(Stage1Summary {
            kind: sensor.kind,
            column: sensor.column,
            status: solution.status,
            iterations: solution.iterations,
            optimality_residual: solution.optimality_residual,
        });
    }

    // Stage 2: constrained completion per time step.
    let mut per_time = Vec::with_capacity(t_steps);
    let mut slices = Vec::with_capacity(t_steps);
    for (t0, mask) in masks.iter().enumerate() {
        let t = t0 + 1;
        let context = format!("stage 2, time step {t}");
        if mask.shape() != (ROW_KINDS, n) {
            return Err(Error::DimensionMismatch(format!(
                "{context}: mask is {}x{}, expected {ROW_KINDS}x{n}",
                mask.shape().0,
                mask.shape().1
            )));
        }
        for &(r, c) in mask.cells() {
            let covered = sensors
                .iter()
                .any(|s| s.kind.index() == r && s.column == c);
            if !covered {
                return Err(Error::InvalidParameter(format!(
                    "{context}: observed cell ({r}, {c}) has no sensor stream"
                )));
            }
        }
        let slice = values.rows(t0 * ROW_KINDS, ROW_KINDS).into_owned();
        let masked = MaskedMatrix::new(slice, mask.clone())
            .map_err(|e| e.in_stage(context.clone()))?;
        let report =
            classic_mc(&masked, model, config).map_err(|e| e.in_stage(context.clone()))?;
        slices.push(MeasurementMatrix::new(report.estimate.data().clone(), t)?);
        per_time.push(report);
    }

    let estimate = crate::measurements::build_block_matrix(&slices)?;
    Ok(PipelineReport {
        estimate,
        per_time,
        stage1,
    })
}
