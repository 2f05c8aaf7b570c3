//! Sweep execution: one estimation run per (method, fad, cmr, seed), with
//! deterministic output independent of worker count.

use std::io::Write;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::grid_model::{build_linear_model, build_stacked_model, Feeder, LinearPfModel};
use crate::harness::metrics::summarize_errors;
use crate::harness::profiles::simulate_truth;
use crate::harness::scenario::{Method, Scenario};
use crate::mc_solver::{
    classic_mc, cs_mc_pipeline, joint_mc_cs, EstimateReport, IterateStats, SensorStream,
};
use crate::measurements::{
    apply_mask, build_block_matrix, extract_temporal_series, sample_mask, BlockMatrix,
    MeasurementMatrix, ObservationMask, RowKind, ROW_KINDS,
};
use crate::transforms::{projection_matrix, DctBasis, ProjectionKind, ProjectionMatrix};

/// Salts for deriving purpose-specific RNG seeds from a run seed, so the
/// mask, noise, and projections draw independent streams while staying
/// reproducible. Ground truth uses the run seed directly, which keeps it
/// identical across methods and grids for paired comparisons.
const MASK_SALT: u64 = 0x4d41534b;
const NOISE_SALT: u64 = 0x4e4f4953;
const SENSOR_SALT: u64 = 0x53454e53;
const PHI_SALT: u64 = 0x50524f4a;

/// SplitMix64 over (seed, salt); cheap, well-mixed, stable.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9e3779b97f4a7c15);
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// One line of results.csv.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub method: Method,
    pub fad: f64,
    pub cmr: f64,
    pub seed: u64,
    pub mape_power: f64,
    pub mape_vmag: f64,
    pub miae_vang: f64,
    pub status: String,
    pub runtime_s: f64,
}

impl MetricsRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Everything a single run produces beyond its metrics row.
#[derive(Debug)]
pub struct InstanceResult {
    pub row: MetricsRow,
    pub estimate: Option<BlockMatrix>,
    pub truth: Option<BlockMatrix>,
    /// Objective traces of the completion solves, labelled per sub-run.
    pub traces: Vec<(String, Vec<f64>)>,
    /// Per-iteration diagnostics when the solver was asked to collect them.
    pub iterates: Vec<(String, Vec<IterateStats>)>,
}

/// Shared read-only state for all runs of a sweep.
pub struct SweepContext {
    pub scenario: Scenario,
    pub feeder: Feeder,
    pub model: LinearPfModel,
}

impl SweepContext {
    pub fn new(scenario: Scenario) -> Result<SweepContext> {
        let feeder = Feeder::load(&scenario.feeder_path)?;
        let model = build_linear_model(&feeder)?;
        Ok(SweepContext {
            scenario,
            feeder,
            model,
        })
    }

    /// Build a context around an already-loaded feeder.
    pub fn with_feeder(scenario: Scenario, feeder: Feeder) -> Result<SweepContext> {
        let model = build_linear_model(&feeder)?;
        Ok(SweepContext {
            scenario,
            feeder,
            model,
        })
    }
}

fn failed_row(method: Method, fad: f64, cmr: f64, seed: u64, err: &Error, dt: f64) -> MetricsRow {
    MetricsRow {
        method,
        fad,
        cmr,
        seed,
        mape_power: f64::NAN,
        mape_vmag: f64::NAN,
        miae_vang: f64::NAN,
        status: err.to_string(),
        runtime_s: dt,
    }
}

/// Run one (method, fad, cmr, seed) instance. Solver failures land in the
/// row status; this function itself does not fail.
pub fn run_instance(
    ctx: &SweepContext,
    method: Method,
    fad: f64,
    cmr: f64,
    seed: u64,
    collect_iterates: bool,
) -> InstanceResult {
    let start = Instant::now();
    match run_instance_inner(ctx, method, fad, cmr, seed, collect_iterates) {
        Ok((estimate, truth, traces, iterates)) => {
            let summary = match summarize_errors(&estimate, &truth) {
                Ok(s) => s,
                Err(e) => {
                    let dt = start.elapsed().as_secs_f64();
                    return InstanceResult {
                        row: failed_row(method, fad, cmr, seed, &e, dt),
                        estimate: Some(estimate),
                        truth: Some(truth),
                        traces,
                        iterates,
                    };
                }
            };
            InstanceResult {
                row: MetricsRow {
                    method,
                    fad,
                    cmr,
                    seed,
                    mape_power: summary.mape_power,
                    mape_vmag: summary.mape_vmag,
                    miae_vang: summary.miae_vang,
                    status: "ok".into(),
                    runtime_s: start.elapsed().as_secs_f64(),
                },
                estimate: Some(estimate),
                truth: Some(truth),
                traces,
                iterates,
            }
        }
        Err(e) => InstanceResult {
            row: failed_row(method, fad, cmr, seed, &e, start.elapsed().as_secs_f64()),
            estimate: None,
            truth: None,
            traces: Vec::new(),
            iterates: Vec::new(),
        },
    }
}

type InnerOutcome = (
    BlockMatrix,
    BlockMatrix,
    Vec<(String, Vec<f64>)>,
    Vec<(String, Vec<IterateStats>)>,
);

fn push_report(
    label: String,
    report: &EstimateReport,
    traces: &mut Vec<(String, Vec<f64>)>,
    iterates: &mut Vec<(String, Vec<IterateStats>)>,
) {
    traces.push((label.clone(), report.objective_trace.clone()));
    if let Some(stats) = &report.iterates {
        iterates.push((label, stats.clone()));
    }
}

fn run_instance_inner(
    ctx: &SweepContext,
    method: Method,
    fad: f64,
    cmr: f64,
    seed: u64,
    collect_iterates: bool,
) -> Result<InnerOutcome> {
    let scenario = &ctx.scenario;
    let t_steps = scenario.t_steps;
    let n = ctx.feeder.node_count();
    let basis = DctBasis::new(t_steps, scenario.dct_split)?;
    let mut config = scenario.solver.clone();
    config.collect_iterates = collect_iterates;

    // Ground truth always comes from the nonlinear fixed-point oracle.
    let (_, truth) = simulate_truth(&ctx.feeder, t_steps, &scenario.profiles, seed)?;

    let mut traces = Vec::new();
    let mut iterates = Vec::new();
    let estimate = match method {
        Method::JointMcCs => {
            let mask = sample_mask((ROW_KINDS * t_steps, n), fad, derive_seed(seed, MASK_SALT))?;
            let masked = apply_mask(&truth, &mask)?
                .with_noise(scenario.meas_sigma, derive_seed(seed, NOISE_SALT))?;
            let stacked = build_stacked_model(&ctx.model, t_steps)?;
            let report = joint_mc_cs(&masked, &stacked, &basis, &config)?;
            push_report("joint".into(), &report, &mut traces, &mut iterates);
            report.estimate
        }
        Method::ClassicMc => {
            let mask = sample_mask((ROW_KINDS * t_steps, n), fad, derive_seed(seed, MASK_SALT))?;
            let masked = apply_mask(&truth, &mask)?
                .with_noise(scenario.meas_sigma, derive_seed(seed, NOISE_SALT))?;
            let mut slices = Vec::with_capacity(t_steps);
            for t in 1..=t_steps {
                let block = masked
                    .time_block(t)
                    .map_err(|e| e.in_stage(format!("time step {t}")))?;
                let report = classic_mc(&block, &ctx.model, &config)
                    .map_err(|e| e.in_stage(format!("time step {t}")))?;
                push_report(format!("t{t}"), &report, &mut traces, &mut iterates);
                slices.push(MeasurementMatrix::new(report.estimate.data().clone(), t)?);
            }
            build_block_matrix(&slices)?
        }
        Method::CsMc => {
            let sensor_mask =
                sample_mask((ROW_KINDS, n), fad, derive_seed(seed, SENSOR_SALT))?;
            let sensors = build_sensor_streams(
                &truth,
                &sensor_mask,
                cmr,
                scenario.projection_kind,
                seed,
                scenario.meas_sigma,
            )?;
            let masks: Vec<ObservationMask> = vec![sensor_mask; t_steps];
            let report = cs_mc_pipeline(
                &sensors,
                &basis,
                &masks,
                &ctx.model,
                &config,
                &scenario.cs.to_options(),
            )?;
            for (t, sub) in report.per_time.iter().enumerate() {
                push_report(format!("t{}", t + 1), sub, &mut traces, &mut iterates);
            }
            report.estimate
        }
    };

    Ok((estimate, truth, traces, iterates))
}

/// Compress every sensed cell-series of the truth matrix. `cmr = 1` keeps
/// the raw samples (identity projection); otherwise a seeded random
/// projection with `ceil(cmr * T)` rows is drawn per sensor, so the
/// realized compression never falls below the requested ratio.
pub fn build_sensor_streams(
    truth: &BlockMatrix,
    sensor_mask: &ObservationMask,
    cmr: f64,
    kind: ProjectionKind,
    seed: u64,
    meas_sigma: f64,
) -> Result<Vec<SensorStream>> {
    if !(cmr > 0.0 && cmr <= 1.0) {
        return Err(Error::InvalidParameter(format!("cmr {cmr} outside (0, 1]")));
    }
    let t_steps = truth.t_steps();
    let rows = ((cmr * t_steps as f64).ceil() as usize).clamp(1, t_steps);
    let phi_seed_base = derive_seed(seed, PHI_SALT);
    let noise_seed = derive_seed(seed, NOISE_SALT);

    let mut sensors = Vec::with_capacity(sensor_mask.len());
    for (idx, &(kind_row, column)) in sensor_mask.cells().iter().enumerate() {
        let row_kind = RowKind::from_index(kind_row)?;
        let series = extract_temporal_series(truth.data(), column, row_kind)?;
        let projection: ProjectionMatrix = if rows == t_steps {
            ProjectionMatrix::identity(t_steps)
        } else {
            projection_matrix(rows, t_steps, kind, derive_seed(phi_seed_base, idx as u64))?
        };
        let mut compressed = projection.apply(&series);
        if meas_sigma > 0.0 {
            use rand::SeedableRng;
            use rand_distr::Distribution;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(
                noise_seed,
                idx as u64,
            ));
            let normal = rand_distr::Normal::new(0.0, meas_sigma).expect("valid sigma");
            for v in compressed.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
        sensors.push(SensorStream {
            kind: row_kind,
            column,
            compressed,
            projection,
        });
    }
    Ok(sensors)
}

/// All (method, fad, cmr, seed) combinations of a scenario, in the fixed
/// nested order that the output preserves. Methods that ignore the
/// compression ratio run once with cmr = 1.
pub fn job_list(scenario: &Scenario) -> Vec<(Method, f64, f64, u64)> {
    let mut jobs = Vec::new();
    for &method in &scenario.methods {
        let cmrs: Vec<f64> = if method.uses_cmr() {
            scenario.cmr_grid.clone()
        } else {
            vec![1.0]
        };
        for &fad in &scenario.fad_grid {
            for &cmr in &cmrs {
                for &seed in &scenario.seeds {
                    jobs.push((method, fad, cmr, seed));
                }
            }
        }
    }
    jobs
}

/// Run the whole grid. `workers = 0` uses all cores (when the `parallel`
/// feature is on), `workers = 1` forces sequential execution. Output rows
/// are in job order regardless of scheduling, so worker count never
/// changes the result bytes.
pub fn run_sweep(ctx: &SweepContext, workers: usize) -> Result<Vec<MetricsRow>> {
    let jobs = job_list(&ctx.scenario);
    let results = execute_jobs(ctx, &jobs, workers);
    Ok(results)
}

#[cfg(feature = "parallel")]
fn execute_jobs(
    ctx: &SweepContext,
    jobs: &[(Method, f64, f64, u64)],
    workers: usize,
) -> Vec<MetricsRow> {
    use rayon::prelude::*;
    if workers == 1 {
        return jobs
            .iter()
            .map(|&(m, f, c, s)| run_instance(ctx, m, f, c, s, false).row)
            .collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| {
        jobs.par_iter()
            .map(|&(m, f, c, s)| run_instance(ctx, m, f, c, s, false).row)
            .collect()
    })
}

#[cfg(not(feature = "parallel"))]
fn execute_jobs(
    ctx: &SweepContext,
    jobs: &[(Method, f64, f64, u64)],
    _workers: usize,
) -> Vec<MetricsRow> {
    jobs.iter()
        .map(|&(m, f, c, s)| run_instance(ctx, m, f, c, s, false).row)
        .collect()
}

/// results.csv column order, fixed.
pub const RESULTS_HEADER: [&str; 9] = [
    "method",
    "fad",
    "cmr",
    "seed",
    "mape_power",
    "mape_vmag",
    "miae_vang",
    "status",
    "runtime_s",
];

pub fn write_results_csv<W: Write>(writer: W, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(RESULTS_HEADER)?;
    for row in rows {
        out.write_record([
            row.method.label().to_string(),
            format!("{}", row.fad),
            format!("{}", row.cmr),
            row.seed.to_string(),
            format!("{}", row.mape_power),
            format!("{}", row.mape_vmag),
            format!("{}", row.miae_vang),
            row.status.clone(),
            format!("{:.3}", row.runtime_s),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_results_csv<R: std::io::Read>(reader: R) -> Result<Vec<MetricsRow>> {
    let mut input = csv::Reader::from_reader(reader);
    {
        let headers = input.headers()?;
        if headers.iter().ne(RESULTS_HEADER.iter().copied()) {
            return Err(Error::schema(
                "results csv",
                format!("unexpected header {:?}", headers),
            ));
        }
    }
    let parse_f64 = |field: &str, name: &str| -> Result<f64> {
        field
            .parse()
            .map_err(|_| Error::schema("results csv", format!("bad {name} '{field}'")))
    };
    let mut rows = Vec::new();
    for record in input.records() {
        let record = record?;
        if record.len() != RESULTS_HEADER.len() {
            return Err(Error::schema(
                "results csv",
                format!("expected {} fields, got {}", RESULTS_HEADER.len(), record.len()),
            ));
        }
        rows.push(MetricsRow {
            method: Method::from_label(&record[0])?,
            fad: parse_f64(&record[1], "fad")?,
            cmr: parse_f64(&record[2], "cmr")?,
            seed: record[3]
                .parse()
                .map_err(|_| Error::schema("results csv", format!("bad seed '{}'", &record[3])))?,
            mape_power: parse_f64(&record[4], "mape_power")?,
            mape_vmag: parse_f64(&record[5], "mape_vmag")?,
            miae_vang: parse_f64(&record[6], "miae_vang")?,
            status: record[7].to_string(),
            runtime_s: parse_f64(&record[8], "runtime_s")?,
        });
    }
    Ok(rows)
}
