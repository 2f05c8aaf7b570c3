//! Radial feeder model, linearized power-flow map, and the nonlinear
//! fixed-point solver used to generate ground-truth states.
//!
//! The feeder is a tree of phase-nodes (bus, phase) hanging off a slack
//! bus with known voltage. Line segments carry complex impedance blocks
//! over the phases they span, so mutual coupling between phases of one
//! segment is expressed directly in the block.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn parse(label: char) -> Result<Phase> {
        match label {
            'a' => Ok(Phase::A),
            'b' => Ok(Phase::B),
            'c' => Ok(Phase::C),
            other => Err(Error::InvalidParameter(format!(
                "unknown phase label '{other}' (expected a, b, or c)"
            ))),
        }
    }

    pub fn label(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())
    }
}

/// One non-slack phase-node. The order of these in [`Feeder::nodes`]
/// fixes the column order of every matrix in the crate.
#[derive(Debug, Clone)]
pub struct PhaseNode {
    pub bus: String,
    pub phase: Phase,
    /// Nominal complex load drawn at this phase-node, per-unit. Loads are
    /// positive consumption; the corresponding net injection is negative.
    pub base_load: Complex64,
}

/// A line segment between two buses spanning `phases`, with a square
/// complex impedance block (self terms on the diagonal, mutual coupling
/// off-diagonal).
#[derive(Debug, Clone)]
pub struct LineSegment {
    pub from: String,
    pub to: String,
    pub phases: Vec<Phase>,
    pub impedance: DMatrix<Complex64>,
}

#[derive(Debug, Clone)]
pub struct Feeder {
    pub name: String,
    pub base_power: f64,
    pub slack_bus: String,
    /// Slack voltage per present phase, per-unit, ordered a, b, c.
    pub slack_voltage: Vec<(Phase, Complex64)>,
    pub nodes: Vec<PhaseNode>,
    pub lines: Vec<LineSegment>,
}

/// Voltages and injections for all non-slack phase-nodes at one time step.
#[derive(Debug, Clone)]
pub struct StateSnapshot {
    pub voltage: DVector<Complex64>,
    pub injection: DVector<Complex64>,
    /// 1-based time index; callers stamp this when assembling series.
    pub time_index: usize,
}

impl Feeder {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, bus: &str, phase: Phase) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.bus == bus && n.phase == phase)
    }

    pub fn slack_phase(&self, phase: Phase) -> Option<Complex64> {
        self.slack_voltage
            .iter()
            .find(|(p, _)| *p == phase)
            .map(|(_, v)| *v)
    }

    /// Nominal injections (negated base loads) in node order.
    pub fn base_injections(&self) -> DVector<Complex64> {
        DVector::from_iterator(self.nodes.len(), self.nodes.iter().map(|n| -n.base_load))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Feeder> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
        Feeder::from_toml_str(&text, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Feeder> {
        let file: FeederFile =
            toml::from_str(text).map_err(|e| Error::schema(origin, e.to_string()))?;
        let feeder = file.into_feeder(origin)?;
        feeder.validate()?;
        Ok(feeder)
    }

    /// Structural checks: radial tree per phase, reachable from the slack,
    /// nonnegative resistances, well-formed impedance blocks.
    pub fn validate(&self) -> Result<()> {
        if self.slack_voltage.is_empty() {
            return Err(Error::Topology("slack bus has no phases".into()));
        }
        for (_, v) in &self.slack_voltage {
            let mag = v.norm();
            if !(0.0..2.0).contains(&mag) || mag == 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "slack voltage magnitude {mag} outside (0, 2) per-unit"
                )));
            }
        }
        if !(self.base_power.is_finite() && self.base_power > 0.0) {
            return Err(Error::InvalidParameter(
                "base power must be positive".into(),
            ));
        }

        let mut seen = HashSet::new();
        for node in &self.nodes {
            if node.bus == self.slack_bus {
                return Err(Error::Topology(format!(
                    "node list contains the slack bus '{}'",
                    node.bus
                )));
            }
            if !seen.insert((node.bus.clone(), node.phase)) {
                return Err(Error::Topology(format!(
                    "duplicate phase-node {}.{}",
                    node.bus, node.phase
                )));
            }
        }

        let mut edge_count = 0usize;
        // adjacency over (bus, phase) pairs, one edge per phase of a segment
        let mut adjacency: HashMap<(String, Phase), Vec<(String, Phase)>> = HashMap::new();
        for line in &self.lines {
            let k = line.phases.len();
            if line.impedance.nrows() != k || line.impedance.ncols() != k {
                return Err(Error::Topology(format!(
                    "line {}-{}: impedance block is {}x{} but spans {} phases",
                    line.from,
                    line.to,
                    line.impedance.nrows(),
                    line.impedance.ncols(),
                    k
                )));
            }
            for z in line.impedance.iter() {
                if z.re < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "line {}-{}: negative resistance {}",
                        line.from, line.to, z.re
                    )));
                }
            }
            for &phase in &line.phases {
                for bus in [&line.from, &line.to] {
                    let exists = if *bus == self.slack_bus {
                        self.slack_phase(phase).is_some()
                    } else {
                        self.node_index(bus, phase).is_some()
                    };
                    if !exists {
                        return Err(Error::Topology(format!(
                            "line {}-{} uses undefined phase-node {}.{}",
                            line.from, line.to, bus, phase
                        )));
                    }
                }
                adjacency
                    .entry((line.from.clone(), phase))
                    .or_default()
                    .push((line.to.clone(), phase));
                adjacency
                    .entry((line.to.clone(), phase))
                    .or_default()
                    .push((line.from.clone(), phase));
                edge_count += 1;
            }
        }

        // Radial: per-phase edges == non-slack phase-nodes, and everything
        // reachable from the slack. Together these force a spanning forest.
        if edge_count != self.nodes.len() {
            return Err(Error::Topology(format!(
                "not radial: {} per-phase edges for {} non-slack phase-nodes",
                edge_count,
                self.nodes.len()
            )));
        }
        let mut reached: HashSet<(String, Phase)> = HashSet::new();
        let mut queue: VecDeque<(String, Phase)> = self
            .slack_voltage
            .iter()
            .map(|(p, _)| (self.slack_bus.clone(), *p))
            .collect();
        for item in &queue {
            reached.insert(item.clone());
        }
        while let Some(current) = queue.pop_front() {
            if let Some(neighbors) = adjacency.get(&current) {
                for next in neighbors {
                    if reached.insert(next.clone()) {
                        queue.push_back(next.clone());
                    }
                }
            }
        }
        for node in &self.nodes {
            if !reached.contains(&(node.bus.clone(), node.phase)) {
                return Err(Error::Topology(format!(
                    "phase-node {}.{} unreachable from slack",
                    node.bus, node.phase
                )));
            }
        }
        Ok(())
    }
}

/// The feeder bundled with the crate: a 13-bus (substation + 12) fully
/// three-phase radial network with unbalanced loads and mutually coupled
/// segments, giving 36 non-slack phase-nodes.
pub fn bundled_feeder() -> Feeder {
    Feeder::from_toml_str(include_str!("../data/feeder13.toml"), "bundled feeder13")
        .expect("bundled feeder is valid")
}

// ---------------------------------------------------------------------------
// TOML schema
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederFile {
    name: Option<String>,
    base_power: f64,
    slack_voltage: SlackFile,
    nodes: Vec<NodeFile>,
    lines: Vec<LineFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SlackFile {
    bus: String,
    a: Option<[f64; 2]>,
    b: Option<[f64; 2]>,
    c: Option<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeFile {
    bus: String,
    phase: String,
    load: Option<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LineFile {
    from: String,
    to: String,
    phases: String,
    z: Vec<Vec<[f64; 2]>>,
}

fn parse_phases(origin: &str, field: &str, text: &str) -> Result<Vec<Phase>> {
    let mut phases = Vec::new();
    for ch in text.chars() {
        let phase =
            Phase::parse(ch).map_err(|e| Error::schema(origin, format!("{field}: {e}")))?;
        if phases.contains(&phase) {
            return Err(Error::schema(
                origin,
                format!("{field}: repeated phase '{ch}'"),
            ));
        }
        phases.push(phase);
    }
    if phases.is_empty() {
        return Err(Error::schema(origin, format!("{field}: no phases listed")));
    }
    Ok(phases)
}

impl FeederFile {
    fn into_feeder(self, origin: &str) -> Result<Feeder> {
        let mut slack_voltage = Vec::new();
        for (phase, entry) in [
            (Phase::A, self.slack_voltage.a),
            (Phase::B, self.slack_voltage.b),
            (Phase::C, self.slack_voltage.c),
        ] {
            if let Some([re, im]) = entry {
                slack_voltage.push((phase, Complex64::new(re, im)));
            }
        }
        if slack_voltage.is_empty() {
            return Err(Error::schema(origin, "slack_voltage lists no phases"));
        }

        let mut nodes = Vec::with_capacity(self.nodes.len());
        for node in self.nodes {
            let phases = parse_phases(origin, &format!("node {}", node.bus), &node.phase)?;
            if phases.len() != 1 {
                return Err(Error::schema(
                    origin,
                    format!("node {}: exactly one phase per entry", node.bus),
                ));
            }
            let load = node.load.unwrap_or([0.0, 0.0]);
            nodes.push(PhaseNode {
                bus: node.bus,
                phase: phases[0],
                base_load: Complex64::new(load[0], load[1]),
            });
        }

        let mut lines = Vec::with_capacity(self.lines.len());
        for line in self.lines {
            let tag = format!("line {}-{}", line.from, line.to);
            let phases = parse_phases(origin, &tag, &line.phases)?;
            let k = phases.len();
            if line.z.len() != k || line.z.iter().any(|row| row.len() != k) {
                return Err(Error::schema(
                    origin,
                    format!("{tag}: impedance must be a {k}x{k} block of [re, im] pairs"),
                ));
            }
            let impedance = DMatrix::from_fn(k, k, |i, j| {
                Complex64::new(line.z[i][j][0], line.z[i][j][1])
            });
            lines.push(LineSegment {
                from: line.from,
                to: line.to,
                phases,
                impedance,
            });
        }

        Ok(Feeder {
            name: self.name.unwrap_or_else(|| "feeder".into()),
            base_power: self.base_power,
            slack_bus: self.slack_voltage.bus,
            slack_voltage,
            nodes,
            lines,
        })
    }
}

// ---------------------------------------------------------------------------
// Admittance assembly
// ---------------------------------------------------------------------------

struct Admittance {
    /// Non-slack block of the bus admittance matrix.
    y_ll: DMatrix<Complex64>,
    /// Coupling of non-slack nodes to the slack phases.
    y_l0: DMatrix<Complex64>,
    slack: DVector<Complex64>,
}

fn assemble_admittance(feeder: &Feeder) -> Result<Admittance> {
    let s = feeder.slack_voltage.len();
    let n = feeder.nodes.len();
    let dim = s + n;

    let global_index = |bus: &str, phase: Phase| -> Result<usize> {
        if bus == feeder.slack_bus {
            feeder
                .slack_voltage
                .iter()
                .position(|(p, _)| *p == phase)
                .ok_or_else(|| {
                    Error::Topology(format!("slack bus has no phase {phase}"))
                })
        } else {
            feeder
                .node_index(bus, phase)
                .map(|i| s + i)
                .ok_or_else(|| {
                    Error::Topology(format!("undefined phase-node {bus}.{phase}"))
                })
        }
    };

    let mut y = DMatrix::<Complex64>::zeros(dim, dim);
    for line in &feeder.lines {
        let k = line.phases.len();
        let y_block = line.impedance.clone().try_inverse().ok_or_else(|| {
            Error::DegenerateNetwork(format!(
                "line {}-{}: impedance block is singular",
                line.from, line.to
            ))
        })?;
        let from_idx: Vec<usize> = line
            .phases
            .iter()
            .map(|&p| global_index(&line.from, p))
            .collect::<Result<_>>()?;
        let to_idx: Vec<usize> = line
            .phases
            .iter()
            .map(|&p| global_index(&line.to, p))
            .collect::<Result<_>>()?;
        for i in 0..k {
            for j in 0..k {
                let yij = y_block[(i, j)];
                y[(from_idx[i], from_idx[j])] += yij;
                y[(to_idx[i], to_idx[j])] += yij;
                y[(from_idx[i], to_idx[j])] -= yij;
                y[(to_idx[i], from_idx[j])] -= yij;
            }
        }
    }

    let y_ll = y.view((s, s), (n, n)).into_owned();
    let y_l0 = y.view((s, 0), (n, s)).into_owned();
    let slack = DVector::from_iterator(s, feeder.slack_voltage.iter().map(|(_, v)| *v));
    Ok(Admittance { y_ll, y_l0, slack })
}

// ---------------------------------------------------------------------------
// Linearized model
// ---------------------------------------------------------------------------

/// Affine power-flow map linearized around the no-load point.
///
/// `b` maps stacked real injections `[Re(s); Im(s)]` to stacked voltage
/// deviations `[Re(v - w); Im(v - w)]`; `c` maps the same injections to
/// magnitude deviations `|v| - |w|`. Both are exact at zero injection.
#[derive(Debug, Clone)]
pub struct LinearPfModel {
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    w: DVector<Complex64>,
}

impl LinearPfModel {
    pub fn node_count(&self) -> usize {
        self.w.len()
    }

    /// The real 2n x 2n voltage sensitivity `[[B1, B2], [B3, B4]]`.
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// The real n x 2n magnitude sensitivity `[C1, C2]`.
    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// No-load complex voltage.
    pub fn w(&self) -> &DVector<Complex64> {
        &self.w
    }

    pub fn w_magnitude(&self) -> DVector<f64> {
        self.w.map(|v| v.norm())
    }

    pub fn b1(&self) -> DMatrix<f64> {
        let n = self.node_count();
        self.b.view((0, 0), (n, n)).into_owned()
    }

    pub fn b2(&self) -> DMatrix<f64> {
        let n = self.node_count();
        self.b.view((0, n), (n, n)).into_owned()
    }

    pub fn b3(&self) -> DMatrix<f64> {
        let n = self.node_count();
        self.b.view((n, 0), (n, n)).into_owned()
    }

    pub fn b4(&self) -> DMatrix<f64> {
        let n = self.node_count();
        self.b.view((n, n), (n, n)).into_owned()
    }

    pub fn c1(&self) -> DMatrix<f64> {
        let n = self.node_count();
        self.c.view((0, 0), (n, n)).into_owned()
    }

    pub fn c2(&self) -> DMatrix<f64> {
        let n = self.node_count();
        self.c.view((0, n), (n, n)).into_owned()
    }

    /// Single-time constraint block `[B1 B2; B3 B4; C1 C2]` (3n x 2n).
    pub fn constraint_block(&self) -> DMatrix<f64> {
        let n = self.node_count();
        let mut block = DMatrix::zeros(3 * n, 2 * n);
        block.rows_mut(0, 2 * n).copy_from(&self.b);
        block.rows_mut(2 * n, n).copy_from(&self.c);
        block
    }

    /// Single-time offset `[Re(w); Im(w); |w|]` (3n).
    pub fn constraint_offset(&self) -> DVector<f64> {
        let n = self.node_count();
        let mut offset = DVector::zeros(3 * n);
        for i in 0..n {
            offset[i] = self.w[i].re;
            offset[n + i] = self.w[i].im;
            offset[2 * n + i] = self.w[i].norm();
        }
        offset
    }

    /// Predicted complex voltage and magnitude under the affine map.
    pub fn predict(&self, injections: &DVector<Complex64>) -> Result<(DVector<Complex64>, DVector<f64>)> {
        let n = self.node_count();
        if injections.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} injections for {} phase-nodes",
                injections.len(),
                n
            )));
        }
        let mut p = DVector::zeros(2 * n);
        for i in 0..n {
            p[i] = injections[i].re;
            p[n + i] = injections[i].im;
        }
        let dv = &self.b * &p;
        let v = DVector::from_fn(n, |i, _| self.w[i] + Complex64::new(dv[i], dv[n + i]));
        let vmag = self.w_magnitude() + &self.c * &p;
        Ok((v, vmag))
    }
}

/// Build the no-load linearization of the feeder's power flow.
pub fn build_linear_model(feeder: &Feeder) -> Result<LinearPfModel> {
    feeder.validate()?;
    let adm = assemble_admittance(feeder)?;
    let n = feeder.node_count();

    let z_ll = adm.y_ll.clone().lu().try_inverse().ok_or_else(|| {
        Error::DegenerateNetwork("reduced admittance matrix is singular".into())
    })?;
    let w = -(&z_ll * (&adm.y_l0 * &adm.slack));
    for (i, wv) in w.iter().enumerate() {
        if wv.norm() < 1e-9 {
            return Err(Error::DegenerateNetwork(format!(
                "no-load voltage vanishes at phase-node {}",
                i
            )));
        }
    }

    // v - w ~= G conj(s) with G = Y_LL^-1 diag(conj(w))^-1
    let mut g = z_ll;
    for j in 0..n {
        let scale = Complex64::new(1.0, 0.0) / w[j].conj();
        for i in 0..n {
            g[(i, j)] *= scale;
        }
    }

    // Real expansion of s -> G conj(s): [Re; Im] = [[Gr, Gi], [Gi, -Gr]] [p; q]
    let mut b = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let gij = g[(i, j)];
            b[(i, j)] = gij.re;
            b[(i, n + j)] = gij.im;
            b[(n + i, j)] = gij.im;
            b[(n + i, n + j)] = -gij.re;
        }
    }

    // |v| - |w| ~= Re(diag(conj(w)/|w|) G conj(s))
    let mut c = DMatrix::zeros(n, 2 * n);
    for i in 0..n {
        let u = w[i].conj() / w[i].norm();
        for j in 0..n {
            let h = u * g[(i, j)];
            c[(i, j)] = h.re;
            c[(i, n + j)] = h.im;
        }
    }

    Ok(LinearPfModel { b, c, w })
}

// ---------------------------------------------------------------------------
// Stacked multi-time model
// ---------------------------------------------------------------------------

/// Block-diagonal extension of [`LinearPfModel`] over `T` time steps:
/// `y ~= A p + b` with `y` of length `3Tn` and `p` of length `2Tn`.
#[derive(Debug, Clone)]
pub struct StackedPfModel {
    block: DMatrix<f64>,
    offset_block: DVector<f64>,
    t_steps: usize,
    n: usize,
}

impl StackedPfModel {
    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// The repeated 3n x 2n diagonal block.
    pub fn block(&self) -> &DMatrix<f64> {
        &self.block
    }

    /// Materialize the full block-diagonal `A` (3Tn x 2Tn).
    pub fn a(&self) -> DMatrix<f64> {
        let (rows, cols) = (3 * self.n, 2 * self.n);
        let mut a = DMatrix::zeros(rows * self.t_steps, cols * self.t_steps);
        for t in 0..self.t_steps {
            a.view_mut((t * rows, t * cols), (rows, cols))
                .copy_from(&self.block);
        }
        a
    }

    /// The full offset `b`: `T` repetitions of `[Re(w); Im(w); |w|]`.
    pub fn b(&self) -> DVector<f64> {
        let rows = 3 * self.n;
        let mut b = DVector::zeros(rows * self.t_steps);
        for t in 0..self.t_steps {
            b.rows_mut(t * rows, rows).copy_from(&self.offset_block);
        }
        b
    }

    /// `A p` using the block structure.
    pub fn apply(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        let (rows, cols) = (3 * self.n, 2 * self.n);
        if p.len() != cols * self.t_steps {
            return Err(Error::DimensionMismatch(format!(
                "p has length {}, expected {}",
                p.len(),
                cols * self.t_steps
            )));
        }
        let mut y = DVector::zeros(rows * self.t_steps);
        for t in 0..self.t_steps {
            let pt = p.rows(t * cols, cols);
            let mut yt = y.rows_mut(t * rows, rows);
            self.block.mul_to(&pt, &mut yt);
        }
        Ok(y)
    }

    /// `A^T r` using the block structure.
    pub fn apply_transpose(&self, r: &DVector<f64>) -> Result<DVector<f64>> {
        let (rows, cols) = (3 * self.n, 2 * self.n);
        if r.len() != rows * self.t_steps {
            return Err(Error::DimensionMismatch(format!(
                "r has length {}, expected {}",
                r.len(),
                rows * self.t_steps
            )));
        }
        let mut p = DVector::zeros(cols * self.t_steps);
        for t in 0..self.t_steps {
            let rt = r.rows(t * rows, rows);
            let mut pt = p.rows_mut(t * cols, cols);
            self.block.tr_mul_to(&rt, &mut pt);
        }
        Ok(p)
    }

    /// Spectral norm of the per-time block, for step-size bounds.
    pub fn block_spectral_norm(&self) -> f64 {
        self.block
            .clone()
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .fold(0.0, f64::max)
    }
}

/// Stack the single-time linear model over `t_steps` time steps.
pub fn build_stacked_model(model: &LinearPfModel, t_steps: usize) -> Result<StackedPfModel> {
    if t_steps == 0 {
        return Err(Error::InvalidParameter("T must be >= 1".into()));
    }
    Ok(StackedPfModel {
        block: model.constraint_block(),
        offset_block: model.constraint_offset(),
        t_steps,
        n: model.node_count(),
    })
}

// ---------------------------------------------------------------------------
// Fixed-point power-flow oracle
// ---------------------------------------------------------------------------

const PF_MAX_ITERS: usize = 100;
const PF_STEP_TOL: f64 = 1e-12;
const PF_RESIDUAL_TOL: f64 = 1e-10;

/// Solve the nonlinear power flow by Z-bus fixed-point iteration
/// `v <- w + Y_LL^-1 diag(conj(v))^-1 conj(s)`.
///
/// This is the ground-truth oracle: the returned snapshot satisfies the
/// power-balance residual to 1e-10 in the infinity norm.
pub fn solve_powerflow(feeder: &Feeder, injections: &DVector<Complex64>) -> Result<StateSnapshot> {
    let n = feeder.node_count();
    if injections.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} injections for {} phase-nodes",
            injections.len(),
            n
        )));
    }
    let adm = assemble_admittance(feeder)?;
    let lu = adm.y_ll.clone().lu();
    let slack_current = &adm.y_l0 * &adm.slack;
    let w = lu
        .solve(&(-&slack_current))
        .ok_or_else(|| Error::DegenerateNetwork("reduced admittance matrix is singular".into()))?;

    let mut v = w.clone();
    let mut iterations = 0;
    for it in 0..PF_MAX_ITERS {
        iterations = it + 1;
        let rhs = DVector::from_fn(n, |i, _| injections[i].conj() / v[i].conj());
        let delta = lu
            .solve(&rhs)
            .expect("factorization already checked nonsingular");
        let v_new = &w + delta;
        let step = (&v_new - &v).iter().map(|c| c.norm()).fold(0.0, f64::max);
        v = v_new;
        if step <= PF_STEP_TOL {
            break;
        }
    }

    let flow = &adm.y_ll * &v;
    let residual = (0..n)
        .map(|i| (v[i].conj() * (flow[i] + slack_current[i]) - injections[i].conj()).norm())
        .fold(0.0, f64::max);
    if !residual.is_finite() || residual > PF_RESIDUAL_TOL {
        return Err(Error::PowerFlowDiverged {
            iterations,
            residual,
        });
    }
    for vi in v.iter() {
        let mag = vi.norm();
        if !(mag > 0.0 && mag < 2.0) {
            return Err(Error::PowerFlowDiverged {
                iterations,
                residual: mag,
            });
        }
    }

    Ok(StateSnapshot {
        voltage: v,
        injection: injections.clone(),
        time_index: 1,
    })
}
