//! Spatio-temporal measurement matrices, observation masks, and the
//! selector machinery that pulls voltage/power vectors and temporal
//! series out of a candidate matrix.
//!
//! Per time step the measurement matrix is 5 x n with fixed row order
//! [Re(v), Im(v), |v|, Re(s), Im(s)]; `T` of them stack vertically into
//! the 5T x n block matrix.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{Feeder, StateSnapshot};
use crate::transforms::DctBasis;

/// Number of measurement kinds per phase-node per time step.
pub const ROW_KINDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    ReV,
    ImV,
    Vmag,
    ReS,
    ImS,
}

impl RowKind {
    pub const ALL: [RowKind; ROW_KINDS] = [
        RowKind::ReV,
        RowKind::ImV,
        RowKind::Vmag,
        RowKind::ReS,
        RowKind::ImS,
    ];

    pub fn index(self) -> usize {
        match self {
            RowKind::ReV => 0,
            RowKind::ImV => 1,
            RowKind::Vmag => 2,
            RowKind::ReS => 3,
            RowKind::ImS => 4,
        }
    }

    pub fn from_index(index: usize) -> Result<RowKind> {
        RowKind::ALL.get(index).copied().ok_or_else(|| {
            Error::IndexOutOfRange(format!("row kind index {index} (valid 0..5)"))
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            RowKind::ReV => "re_v",
            RowKind::ImV => "im_v",
            RowKind::Vmag => "vmag",
            RowKind::ReS => "re_s",
            RowKind::ImS => "im_s",
        }
    }

    pub fn from_label(label: &str) -> Result<RowKind> {
        RowKind::ALL
            .into_iter()
            .find(|k| k.label() == label)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown row kind '{label}'")))
    }
}

/// Single-time 5 x n measurement matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    data: DMatrix<f64>,
    time_index: usize,
}

impl MeasurementMatrix {
    pub fn new(data: DMatrix<f64>, time_index: usize) -> Result<Self> {
        if data.nrows() != ROW_KINDS {
            return Err(Error::DimensionMismatch(format!(
                "measurement matrix needs {ROW_KINDS} rows, got {}",
                data.nrows()
            )));
        }
        Ok(Self { data, time_index })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn node_count(&self) -> usize {
        self.data.ncols()
    }
}

/// Fill the five measurement rows from a state snapshot.
pub fn build_measurement_matrix(snapshot: &StateSnapshot) -> MeasurementMatrix {
    let n = snapshot.voltage.len();
    let mut data = DMatrix::zeros(ROW_KINDS, n);
    for j in 0..n {
        let v = snapshot.voltage[j];
        let s = snapshot.injection[j];
        data[(RowKind::ReV.index(), j)] = v.re;
        data[(RowKind::ImV.index(), j)] = v.im;
        data[(RowKind::Vmag.index(), j)] = v.norm();
        data[(RowKind::ReS.index(), j)] = s.re;
        data[(RowKind::ImS.index(), j)] = s.im;
    }
    MeasurementMatrix {
        data,
        time_index: snapshot.time_index,
    }
}

/// The 5T x n spatio-temporal block matrix; time blocks stack downward
/// in order t = 1..T.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatrix {
    data: DMatrix<f64>,
    t_steps: usize,
}

impl BlockMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if data.nrows() == 0 || data.nrows() % ROW_KINDS != 0 {
            return Err(Error::DimensionMismatch(format!(
                "block matrix rows {} not a positive multiple of {ROW_KINDS}",
                data.nrows()
            )));
        }
        let t_steps = data.nrows() / ROW_KINDS;
        Ok(Self { data, t_steps })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn t_steps(&self) -> usize {
        self.t_steps
    }

    pub fn node_count(&self) -> usize {
        self.data.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.data.nrows(), self.data.ncols())
    }

    /// Recover the single-time matrix at 1-based index `t`.
    pub fn slice(&self, t: usize) -> Result<MeasurementMatrix> {
        if t == 0 || t > self.t_steps {
            return Err(Error::IndexOutOfRange(format!(
                "time index {t} (valid 1..={})",
                self.t_steps
            )));
        }
        let data = self.data.rows((t - 1) * ROW_KINDS, ROW_KINDS).into_owned();
        Ok(MeasurementMatrix {
            data,
            time_index: t,
        })
    }
}

/// Stack per-time matrices into a block matrix, checking shape and order.
pub fn build_block_matrix(matrices: &[MeasurementMatrix]) -> Result<BlockMatrix> {
    if matrices.is_empty() {
        return Err(Error::InvalidParameter("no measurement matrices".into()));
    }
    let n = matrices[0].node_count();
    for (i, m) in matrices.iter().enumerate() {
        if m.node_count() != n {
            return Err(Error::DimensionMismatch(format!(
                "matrix {} has {} columns, expected {}",
                i,
                m.node_count(),
                n
            )));
        }
        if m.time_index() != i + 1 {
            return Err(Error::InvalidParameter(format!(
                "matrix {} carries time index {}, expected {}",
                i,
                m.time_index(),
                i + 1
            )));
        }
    }
    let t_steps = matrices.len();
    let mut data = DMatrix::zeros(ROW_KINDS * t_steps, n);
    for (i, m) in matrices.iter().enumerate() {
        data.rows_mut(i * ROW_KINDS, ROW_KINDS).copy_from(m.data());
    }
    Ok(BlockMatrix { data, t_steps })
}

/// Set of observed cells of a matrix, with the fraction that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMask {
    shape: (usize, usize),
    cells: Vec<(usize, usize)>,
    fad: f64,
}

impl ObservationMask {
    /// Build from explicit cells; duplicates and out-of-range indices are
    /// rejected. The stored fraction is |cells| / (rows * cols).
    pub fn from_cells(shape: (usize, usize), mut cells: Vec<(usize, usize)>) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::EmptyMask);
        }
        cells.sort_unstable();
        for pair in cells.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::InvalidParameter(format!(
                    "duplicate mask cell ({}, {})",
                    pair[0].0, pair[0].1
                )));
            }
        }
        for &(r, c) in &cells {
            if r >= shape.0 || c >= shape.1 {
                return Err(Error::IndexOutOfRange(format!(
                    "mask cell ({r}, {c}) outside {}x{}",
                    shape.0, shape.1
                )));
            }
        }
        let fad = cells.len() as f64 / (shape.0 * shape.1) as f64;
        Ok(Self { shape, cells, fad })
    }

    pub fn full(shape: (usize, usize)) -> Result<Self> {
        let cells = (0..shape.0)
            .flat_map(|r| (0..shape.1).map(move |c| (r, c)))
            .collect();
        Self::from_cells(shape, cells)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn fad(&self) -> f64 {
        self.fad
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.cells.binary_search(&(row, col)).is_ok()
    }

    /// Restrict a 5T x n mask to the 5 x n mask of time block `t` (1-based).
    pub fn time_block(&self, t: usize) -> Result<ObservationMask> {
        let t_steps = self.shape.0 / ROW_KINDS;
        if t == 0 || t > t_steps {
            return Err(Error::IndexOutOfRange(format!(
                "time index {t} (valid 1..={t_steps})"
            )));
        }
        let lo = (t - 1) * ROW_KINDS;
        let cells: Vec<(usize, usize)> = self
            .cells
            .iter()
            .filter(|(r, _)| *r >= lo && *r < lo + ROW_KINDS)
            .map(|&(r, c)| (r - lo, c))
            .collect();
        if cells.is_empty() {
            return Err(Error::EmptyMask);
        }
        ObservationMask::from_cells((ROW_KINDS, self.shape.1), cells)
    }
}

/// Sample exactly `round(fad * rows * cols)` cells uniformly without
/// replacement; identical seeds give identical masks.
pub fn sample_mask(shape: (usize, usize), fad: f64, seed: u64) -> Result<ObservationMask> {
    if !(fad > 0.0 && fad <= 1.0) {
        if fad == 0.0 {
            return Err(Error::EmptyMask);
        }
        return Err(Error::InvalidParameter(format!(
            "fraction of available data {fad} outside (0, 1]"
        )));
    }
    let total = shape.0 * shape.1;
    let count = (fad * total as f64).round() as usize;
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, total, count);
    let cells = picks
        .into_iter()
        .map(|flat| (flat / shape.1, flat % shape.1))
        .collect();
    let mut mask = ObservationMask::from_cells(shape, cells)?;
    mask.fad = fad;
    Ok(mask)
}

/// A matrix with an explicit observation mask. Unobserved cells hold 0.0
/// in `values` but are never interpreted as data.
#[derive(Debug, Clone)]
pub struct MaskedMatrix {
    values: DMatrix<f64>,
    mask: ObservationMask,
}

impl MaskedMatrix {
    pub fn new(values: DMatrix<f64>, mask: ObservationMask) -> Result<Self> {
        if (values.nrows(), values.ncols()) != mask.shape() {
            return Err(Error::DimensionMismatch(format!(
                "values are {}x{} but mask covers {}x{}",
                values.nrows(),
                values.ncols(),
                mask.shape().0,
                mask.shape().1
            )));
        }
        let mut zeroed = DMatrix::zeros(values.nrows(), values.ncols());
        for &(r, c) in mask.cells() {
            zeroed[(r, c)] = values[(r, c)];
        }
        Ok(Self {
            values: zeroed,
            mask,
        })
    }

    /// Observed values with zeros elsewhere. Norms over this matrix only
    /// touch observed cells.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &ObservationMask {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn observed(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.mask
            .cells()
            .iter()
            .map(move |&(r, c)| (r, c, self.values[(r, c)]))
    }

    /// Add seeded Gaussian noise to the observed entries.
    pub fn with_noise(mut self, sigma: f64, seed: u64) -> Result<Self> {
        if sigma < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "noise sigma {sigma} must be nonnegative"
            )));
        }
        if sigma == 0.0 {
            return Ok(self);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        for &(r, c) in self.mask.cells() {
            self.values[(r, c)] += normal.sample(&mut rng);
        }
        Ok(self)
    }

    /// Restrict to time block `t` (1-based), both values and mask.
    pub fn time_block(&self, t: usize) -> Result<MaskedMatrix> {
        let mask = self.mask.time_block(t)?;
        let values = self
            .values
            .rows((t - 1) * ROW_KINDS, ROW_KINDS)
            .into_owned();
        MaskedMatrix::new(values, mask)
    }
}

/// Keep only the masked entries of a block matrix.
pub fn apply_mask(m: &BlockMatrix, mask: &ObservationMask) -> Result<MaskedMatrix> {
    if m.shape() != mask.shape() {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {}x{} but mask covers {}x{}",
            m.shape().0,
            m.shape().1,
            mask.shape().0,
            mask.shape().1
        )));
    }
    MaskedMatrix::new(m.data().clone(), mask.clone())
}

// ---------------------------------------------------------------------------
// Selectors
// ---------------------------------------------------------------------------

fn check_block_shape(x: &DMatrix<f64>) -> Result<usize> {
    if x.nrows() == 0 || x.nrows() % ROW_KINDS != 0 {
        return Err(Error::DimensionMismatch(format!(
            "candidate has {} rows, not a positive multiple of {ROW_KINDS}",
            x.nrows()
        )));
    }
    Ok(x.nrows() / ROW_KINDS)
}

/// Stack rows {Re(v), Im(v), |v|} of every time block into the length
/// 3Tn vector `y`, ordered (t, row kind, column).
pub fn extract_y(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let t_steps = check_block_shape(x)?;
    let n = x.ncols();
    let mut y = DVector::zeros(3 * t_steps * n);
    let mut k = 0;
    for t in 0..t_steps {
        for i in 0..3 {
            let row = x.row(t * ROW_KINDS + i);
            for j in 0..n {
                y[k] = row[j];
                k += 1;
            }
        }
    }
    Ok(y)
}

/// Stack rows {Re(s), Im(s)} of every time block into the length 2Tn
/// vector `p`, ordered (t, row kind, column).
pub fn extract_p(x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let t_steps = check_block_shape(x)?;
    let n = x.ncols();
    let mut p = DVector::zeros(2 * t_steps * n);
    let mut k = 0;
    for t in 0..t_steps {
        for i in 3..ROW_KINDS {
            let row = x.row(t * ROW_KINDS + i);
            for j in 0..n {
                p[k] = row[j];
                k += 1;
            }
        }
    }
    Ok(p)
}

/// Adjoint of [`extract_y`]: scatter `y` back into the voltage rows.
pub fn scatter_y(y: &DVector<f64>, t_steps: usize, n: usize, out: &mut DMatrix<f64>) {
    let mut k = 0;
    for t in 0..t_steps {
        for i in 0..3 {
            for j in 0..n {
                out[(t * ROW_KINDS + i, j)] += y[k];
                k += 1;
            }
        }
    }
}

/// Adjoint of [`extract_p`]: scatter `p` back into the power rows.
pub fn scatter_p(p: &DVector<f64>, t_steps: usize, n: usize, out: &mut DMatrix<f64>) {
    let mut k = 0;
    for t in 0..t_steps {
        for i in 3..ROW_KINDS {
            for j in 0..n {
                out[(t * ROW_KINDS + i, j)] += p[k];
                k += 1;
            }
        }
    }
}

/// The length-T series of one measurement kind at one column.
pub fn extract_temporal_series(
    x: &DMatrix<f64>,
    column: usize,
    kind: RowKind,
) -> Result<DVector<f64>> {
    let t_steps = check_block_shape(x)?;
    if column >= x.ncols() {
        return Err(Error::IndexOutOfRange(format!(
            "column {column} (matrix has {})",
            x.ncols()
        )));
    }
    Ok(DVector::from_fn(t_steps, |t, _| {
        x[(t * ROW_KINDS + kind.index(), column)]
    }))
}

/// Row kinds whose temporal series enter the sparsity term, in bracket
/// order: Re(s), Im(s), Re(v).
pub const SPARSITY_KINDS: [RowKind; 3] = [RowKind::ReS, RowKind::ImS, RowKind::ReV];

/// All sparsity-penalized series of `x`, column-major: for each column
/// the (Re s, Im s, Re v) series. 3n series of length T; the flattened
/// pre-transform stack has exactly 3Tn entries.
pub fn sparsity_series(x: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    check_block_shape(x)?;
    let mut series = Vec::with_capacity(3 * x.ncols());
    for j in 0..x.ncols() {
        for kind in SPARSITY_KINDS {
            series.push(extract_temporal_series(x, j, kind)?);
        }
    }
    Ok(series)
}

/// `f3`: concatenation of `D2 * series` over all sparsity series.
pub fn sparsity_stack(x: &DMatrix<f64>, basis: &DctBasis) -> Result<DVector<f64>> {
    let t_steps = check_block_shape(x)?;
    if basis.len() != t_steps {
        return Err(Error::DimensionMismatch(format!(
            "basis size {} does not match {} time steps",
            basis.len(),
            t_steps
        )));
    }
    let tail_rows = basis.len() - basis.split_index();
    let n = x.ncols();
    let mut out = DVector::zeros(3 * n * tail_rows);
    let mut offset = 0;
    for j in 0..n {
        for kind in SPARSITY_KINDS {
            let series = extract_temporal_series(x, j, kind)?;
            let transformed = basis.tail_forward(&series);
            out.rows_mut(offset, tail_rows).copy_from(&transformed);
            offset += tail_rows;
        }
    }
    Ok(out)
}

/// Adjoint of [`sparsity_stack`]: scatter `D2^T` of each segment back to
/// the owning (kind, column) series, accumulating into `out`.
pub fn sparsity_stack_adjoint(
    s: &DVector<f64>,
    basis: &DctBasis,
    t_steps: usize,
    n: usize,
    out: &mut DMatrix<f64>,
) {
    let tail_rows = basis.len() - basis.split_index();
    let mut offset = 0;
    for j in 0..n {
        for kind in SPARSITY_KINDS {
            let segment = s.rows(offset, tail_rows).into_owned();
            let series = basis.tail_adjoint(&segment);
            for t in 0..t_steps {
                out[(t * ROW_KINDS + kind.index(), j)] += series[t];
            }
            offset += tail_rows;
        }
    }
}

// ---------------------------------------------------------------------------
// Dump / ingest
// ---------------------------------------------------------------------------

/// Write cells as delimiter-separated text with header
/// `t,row_kind,bus,phase,value`. Unobserved cells are skipped.
pub fn write_measurement_csv<W: Write>(
    writer: W,
    values: &DMatrix<f64>,
    mask: Option<&ObservationMask>,
    feeder: &Feeder,
) -> Result<()> {
    let t_steps = check_block_shape(values)?;
    if values.ncols() != feeder.node_count() {
        return Err(Error::DimensionMismatch(format!(
            "{} columns for {} feeder phase-nodes",
            values.ncols(),
            feeder.node_count()
        )));
    }
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["t", "row_kind", "bus", "phase", "value"])?;
    for t in 0..t_steps {
        for kind in RowKind::ALL {
            let row = t * ROW_KINDS + kind.index();
            for (j, node) in feeder.nodes.iter().enumerate() {
                if let Some(mask) = mask {
                    if !mask.contains(row, j) {
                        continue;
                    }
                }
                out.write_record([
                    (t + 1).to_string(),
                    kind.label().to_string(),
                    node.bus.clone(),
                    node.phase.to_string(),
                    format!("{}", values[(row, j)]),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Read a measurement dump back into a value matrix plus the mask of the
/// cells that were present.
pub fn read_measurement_csv<R: Read>(
    reader: R,
    feeder: &Feeder,
    t_steps: usize,
) -> Result<MaskedMatrix> {
    let mut input = csv::Reader::from_reader(reader);
    let n = feeder.node_count();
    let mut values = DMatrix::zeros(ROW_KINDS * t_steps, n);
    let mut cells = Vec::new();
    for record in input.records() {
        let record = record?;
        if record.len() != 5 {
            return Err(Error::schema(
                "measurement csv",
                format!("expected 5 fields, got {}", record.len()),
            ));
        }
        let t: usize = record[0]
            .parse()
            .map_err(|_| Error::schema("measurement csv", format!("bad t '{}'", &record[0])))?;
        if t == 0 || t > t_steps {
            return Err(Error::IndexOutOfRange(format!(
                "t {t} (valid 1..={t_steps})"
            )));
        }
        let kind = RowKind::from_label(&record[1])?;
        let phase_text = &record[3];
        let mut chars = phase_text.chars();
        let phase = match (chars.next(), chars.next()) {
            (Some(c), None) => crate::grid_model::Phase::parse(c)?,
            _ => {
                return Err(Error::schema(
                    "measurement csv",
                    format!("bad phase '{phase_text}'"),
                ))
            }
        };
        let column = feeder.node_index(&record[2], phase).ok_or_else(|| {
            Error::schema(
                "measurement csv",
                format!("unknown phase-node {}.{}", &record[2], phase),
            )
        })?;
        let value: f64 = record[4].parse().map_err(|_| {
            Error::schema("measurement csv", format!("bad value '{}'", &record[4]))
        })?;
        let row = (t - 1) * ROW_KINDS + kind.index();
        values[(row, column)] = value;
        cells.push((row, column));
    }
    let mask = ObservationMask::from_cells((ROW_KINDS * t_steps, n), cells)?;
    MaskedMatrix::new(values, mask)
}

/// Serialize a mask as `row,col` index lines.
pub fn write_mask_csv<W: Write>(writer: W, mask: &ObservationMask) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["row", "col"])?;
    for &(r, c) in mask.cells() {
        out.write_record([r.to_string(), c.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_mask_csv<R: Read>(reader: R, shape: (usize, usize)) -> Result<ObservationMask> {
    let mut input = csv::Reader::from_reader(reader);
    let mut cells = Vec::new();
    for record in input.records() {
        let record = record?;
        let r: usize = record[0]
            .parse()
            .map_err(|_| Error::schema("mask csv", format!("bad row '{}'", &record[0])))?;
        let c: usize = record[1]
            .parse()
            .map_err(|_| Error::schema("mask csv", format!("bad col '{}'", &record[1])))?;
        cells.push((r, c));
    }
    ObservationMask::from_cells(shape, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::{build_linear_model, build_stacked_model, bundled_feeder, solve_powerflow};
    use nalgebra::DVector;
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn snapshot(v: Vec<Complex64>, s: Vec<Complex64>, t: usize) -> StateSnapshot {
        StateSnapshot {
            voltage: DVector::from_vec(v),
            injection: DVector::from_vec(s),
            time_index: t,
        }
    }

    #[test]
    fn measurement_rows_follow_fixed_semantics() {
        let snap = snapshot(
            vec![Complex64::new(1.0, 0.0); 3],
            vec![Complex64::new(0.0, 0.0); 3],
            1,
        );
        let m = build_measurement_matrix(&snap);
        for j in 0..3 {
            assert_eq!(m.data().column(j).as_slice(), &[1.0, 0.0, 1.0, 0.0, 0.0]);
        }

        let v = Complex64::from_polar(0.98, -1.0_f64.to_radians());
        let s = Complex64::new(0.1, 0.05);
        let m = build_measurement_matrix(&snapshot(vec![v], vec![s], 1));
        assert!((m.data()[(0, 0)] - v.re).abs() < 1e-15);
        assert!((m.data()[(1, 0)] - v.im).abs() < 1e-15);
        assert!((m.data()[(2, 0)] - v.norm()).abs() < 1e-15);
        assert!((m.data()[(3, 0)] - 0.1).abs() < 1e-15);
        assert!((m.data()[(4, 0)] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn powerflow_snapshot_magnitude_row_is_hypot_of_parts() {
        let feeder = bundled_feeder();
        let m = build_measurement_matrix(
            &solve_powerflow(&feeder, &feeder.base_injections()).unwrap(),
        );
        for j in 0..m.node_count() {
            let hyp = m.data()[(0, j)].hypot(m.data()[(1, j)]);
            assert!((m.data()[(2, j)] - hyp).abs() < 1e-14);
        }
    }

    #[test]
    fn block_matrix_stacks_in_time_order() {
        let a = MeasurementMatrix::new(DMatrix::from_element(5, 2, 1.0), 1).unwrap();
        let b = MeasurementMatrix::new(DMatrix::from_element(5, 2, 2.0), 2).unwrap();
        let block = build_block_matrix(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(block.shape(), (10, 2));
        assert_eq!(block.data().rows(5, 5), *b.data());
        assert_eq!(block.slice(1).unwrap(), a);
        assert_eq!(block.slice(2).unwrap(), b);

        let single = build_block_matrix(&[a.clone()]).unwrap();
        assert_eq!(single.data(), a.data());

        let wrong_cols = MeasurementMatrix::new(DMatrix::from_element(5, 3, 0.0), 2).unwrap();
        assert!(build_block_matrix(&[a.clone(), wrong_cols]).is_err());
        let wrong_time = MeasurementMatrix::new(DMatrix::from_element(5, 2, 0.0), 5).unwrap();
        assert!(build_block_matrix(&[a, wrong_time]).is_err());
    }

    #[test]
    fn mask_sampling_counts_and_determinism() {
        let full = sample_mask((10, 4), 1.0, 7).unwrap();
        assert_eq!(full.len(), 40);

        let half = sample_mask((10, 4), 0.5, 7).unwrap();
        assert_eq!(half.len(), 20);
        assert_eq!(half, sample_mask((10, 4), 0.5, 7).unwrap());
        assert_ne!(half, sample_mask((10, 4), 0.5, 8).unwrap());

        assert!(matches!(sample_mask((10, 4), 0.0, 7), Err(Error::EmptyMask)));
        assert!(sample_mask((10, 4), 1.2, 7).is_err());
    }

    #[test]
    fn apply_mask_keeps_observed_cells_exactly() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let data = DMatrix::from_fn(10, 3, |_, _| rng.random::<f64>());
        let block = BlockMatrix::new(data.clone()).unwrap();

        let full = ObservationMask::full((10, 3)).unwrap();
        let masked = apply_mask(&block, &full).unwrap();
        assert_eq!(masked.values(), &data);

        let partial = sample_mask((10, 3), 0.4, 11).unwrap();
        let masked = apply_mask(&block, &partial).unwrap();
        let observed_sum: f64 = masked.observed().map(|(_, _, v)| v).sum();
        let direct_sum: f64 = partial.cells().iter().map(|&(r, c)| data[(r, c)]).sum();
        assert_eq!(observed_sum, direct_sum);
        for &(r, c) in partial.cells() {
            assert_eq!(masked.values()[(r, c)], data[(r, c)]);
        }

        let wrong = ObservationMask::full((5, 3)).unwrap();
        assert!(apply_mask(&block, &wrong).is_err());
    }

    #[test]
    fn mask_rejects_duplicates_and_out_of_range() {
        assert!(matches!(
            ObservationMask::from_cells((2, 2), vec![]),
            Err(Error::EmptyMask)
        ));
        assert!(ObservationMask::from_cells((2, 2), vec![(0, 0), (0, 0)]).is_err());
        assert!(ObservationMask::from_cells((2, 2), vec![(2, 0)]).is_err());
    }

    #[test]
    fn selectors_match_hand_case() {
        let x = DMatrix::from_column_slice(5, 1, &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(extract_y(&x).unwrap().as_slice(), &[1.0, 2.0, 3.0]);
        assert_eq!(extract_p(&x).unwrap().as_slice(), &[4.0, 5.0]);

        let zeros = DMatrix::zeros(10, 3);
        assert_eq!(extract_y(&zeros).unwrap().amax(), 0.0);
        assert_eq!(extract_p(&zeros).unwrap().amax(), 0.0);

        let bad = DMatrix::zeros(7, 2);
        assert!(extract_y(&bad).is_err());
        assert!(extract_p(&bad).is_err());
    }

    #[test]
    fn linear_consistent_states_have_zero_stacked_residual() {
        // Build X from the linear map itself (voltages, magnitudes and all),
        // so y = A p + b must hold to numerical precision.
        let feeder = bundled_feeder();
        let model = build_linear_model(&feeder).unwrap();
        let t_steps = 4;
        let stacked = build_stacked_model(&model, t_steps).unwrap();
        let n = feeder.node_count();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut x = DMatrix::zeros(ROW_KINDS * t_steps, n);
        for t in 0..t_steps {
            let s = DVector::from_fn(n, |_, _| {
                Complex64::new(
                    0.03 * (rng.random::<f64>() - 0.5),
                    0.01 * (rng.random::<f64>() - 0.5),
                )
            });
            let (v, vmag) = model.predict(&s).unwrap();
            for j in 0..n {
                x[(t * ROW_KINDS, j)] = v[j].re;
                x[(t * ROW_KINDS + 1, j)] = v[j].im;
                x[(t * ROW_KINDS + 2, j)] = vmag[j];
                x[(t * ROW_KINDS + 3, j)] = s[j].re;
                x[(t * ROW_KINDS + 4, j)] = s[j].im;
            }
        }
        let y = extract_y(&x).unwrap();
        let p = extract_p(&x).unwrap();
        let residual = &y - stacked.apply(&p).unwrap() - stacked.b();
        assert!(residual.norm() <= 1e-9, "residual {}", residual.norm());
    }

    #[test]
    fn temporal_series_selects_the_right_cells() {
        let mut x = DMatrix::zeros(10, 2);
        for t in 0..2 {
            for i in 0..5 {
                for j in 0..2 {
                    x[(t * 5 + i, j)] = (100 * t + 10 * i + j) as f64;
                }
            }
        }
        let series = extract_temporal_series(&x, 1, RowKind::ReS).unwrap();
        assert_eq!(series.as_slice(), &[31.0, 131.0]);

        let constant = DMatrix::from_element(15, 1, 2.5);
        let series = extract_temporal_series(&constant, 0, RowKind::Vmag).unwrap();
        assert!(series.iter().all(|&v| v == 2.5));

        assert!(extract_temporal_series(&x, 2, RowKind::ReV).is_err());
    }

    #[test]
    fn sparsity_stack_counts_and_adjoint() {
        let t_steps = 6;
        let n = 3;
        let basis = crate::transforms::DctBasis::new(t_steps, 2).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::from_fn(ROW_KINDS * t_steps, n, |_, _| rng.random::<f64>() - 0.5);

        let series = sparsity_series(&x).unwrap();
        assert_eq!(series.len(), 3 * n);
        let pre_transform: usize = series.iter().map(|s| s.len()).sum();
        assert_eq!(pre_transform, 3 * t_steps * n);

        let stack = sparsity_stack(&x, &basis).unwrap();
        assert_eq!(stack.len(), 3 * n * (t_steps - 2));

        // Adjoint identity <f3(X), s> = <X, f3*(s)>.
        let s = DVector::from_fn(stack.len(), |_, _| rng.random::<f64>() - 0.5);
        let lhs = stack.dot(&s);
        let mut back = DMatrix::zeros(ROW_KINDS * t_steps, n);
        sparsity_stack_adjoint(&s, &basis, t_steps, n, &mut back);
        let rhs = x.dot(&back);
        assert!((lhs - rhs).abs() < 1e-12);

        // Constant-in-time matrices have no high-frequency content.
        let constant = DMatrix::from_fn(ROW_KINDS * t_steps, n, |r, c| (r % ROW_KINDS + c) as f64);
        let flat = sparsity_stack(&constant, &basis).unwrap();
        assert!(flat.amax() < 1e-12);
    }

    #[test]
    fn scatter_is_adjoint_of_extract() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = DMatrix::from_fn(15, 4, |_, _| rng.random::<f64>() - 0.5);
        let y = DVector::from_fn(3 * 3 * 4, |_, _| rng.random::<f64>() - 0.5);
        let p = DVector::from_fn(2 * 3 * 4, |_, _| rng.random::<f64>() - 0.5);

        let mut back_y = DMatrix::zeros(15, 4);
        scatter_y(&y, 3, 4, &mut back_y);
        assert!((extract_y(&x).unwrap().dot(&y) - x.dot(&back_y)).abs() < 1e-12);

        let mut back_p = DMatrix::zeros(15, 4);
        scatter_p(&p, 3, 4, &mut back_p);
        assert!((extract_p(&x).unwrap().dot(&p) - x.dot(&back_p)).abs() < 1e-12);
    }

    #[test]
    fn measurement_csv_round_trips() {
        let feeder = bundled_feeder();
        let (_, block) = crate::harness::simulate_truth(
            &feeder,
            2,
            &crate::harness::ProfileParams::default(),
            3,
        )
        .unwrap();

        let mut buffer = Vec::new();
        write_measurement_csv(&mut buffer, block.data(), None, &feeder).unwrap();
        let text = String::from_utf8(buffer.clone()).unwrap();
        assert!(text.starts_with("t,row_kind,bus,phase,value"));
        let restored = read_measurement_csv(buffer.as_slice(), &feeder, 2).unwrap();
        assert_eq!(restored.mask().len(), 10 * feeder.node_count());
        assert!((restored.values() - block.data()).amax() < 1e-12);

        // Masked dump keeps only observed cells.
        let mask = sample_mask(block.shape(), 0.25, 5).unwrap();
        let mut buffer = Vec::new();
        write_measurement_csv(&mut buffer, block.data(), Some(&mask), &feeder).unwrap();
        let restored = read_measurement_csv(buffer.as_slice(), &feeder, 2).unwrap();
        assert_eq!(restored.mask().cells(), mask.cells());
        for (r, c, v) in restored.observed() {
            assert!((v - block.data()[(r, c)]).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_csv_round_trips() {
        let mask = sample_mask((20, 6), 0.3, 9).unwrap();
        let mut buffer = Vec::new();
        write_mask_csv(&mut buffer, &mask).unwrap();
        let restored = read_mask_csv(buffer.as_slice(), (20, 6)).unwrap();
        assert_eq!(restored.cells(), mask.cells());
    }

    #[test]
    fn time_block_restriction() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let data = DMatrix::from_fn(15, 4, |_, _| rng.random::<f64>());
        let block = BlockMatrix::new(data.clone()).unwrap();
        let mask = sample_mask((15, 4), 0.6, 2).unwrap();
        let masked = apply_mask(&block, &mask).unwrap();
        let sub = masked.time_block(2).unwrap();
        assert_eq!(sub.shape(), (5, 4));
        for (r, c, v) in sub.observed() {
            assert_eq!(v, data[(5 + r, c)]);
            assert!(mask.contains(5 + r, c));
        }
        assert!(masked.time_block(0).is_err());
        assert!(masked.time_block(4).is_err());
    }

    #[test]
    fn noise_injection_is_seeded_and_optional() {
        let data = DMatrix::from_element(10, 2, 1.0);
        let block = BlockMatrix::new(data).unwrap();
        let mask = sample_mask((10, 2), 0.5, 1).unwrap();
        let clean = apply_mask(&block, &mask).unwrap().with_noise(0.0, 9).unwrap();
        assert!(clean.observed().all(|(_, _, v)| v == 1.0));

        let noisy_a = apply_mask(&block, &mask).unwrap().with_noise(0.01, 9).unwrap();
        let noisy_b = apply_mask(&block, &mask).unwrap().with_noise(0.01, 9).unwrap();
        assert_eq!(noisy_a.values(), noisy_b.values());
        assert!(noisy_a.observed().any(|(_, _, v)| v != 1.0));
        assert!(apply_mask(&block, &mask).unwrap().with_noise(-0.1, 9).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        /// Every cell lands in exactly one of y, p: scattering both back
        /// reassembles the matrix.
        #[test]
        fn extract_partition_covers_all_cells(t_steps in 1usize..5, n in 1usize..7, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(ROW_KINDS * t_steps, n, |_, _| rng.random::<f64>() - 0.5);
            let y = extract_y(&x).unwrap();
            let p = extract_p(&x).unwrap();
            prop_assert_eq!(y.len() + p.len(), x.len());
            let mut rebuilt = DMatrix::zeros(ROW_KINDS * t_steps, n);
            scatter_y(&y, t_steps, n, &mut rebuilt);
            scatter_p(&p, t_steps, n, &mut rebuilt);
            prop_assert!((rebuilt - &x).amax() == 0.0);
        }

        /// Slicing a built block matrix returns the inputs; rebuilding from
        /// slices is the identity.
        #[test]
        fn build_slice_rebuild_is_identity(t_steps in 1usize..6, n in 1usize..6, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<MeasurementMatrix> = (1..=t_steps)
                .map(|t| {
                    MeasurementMatrix::new(
                        DMatrix::from_fn(ROW_KINDS, n, |_, _| rng.random::<f64>() - 0.5),
                        t,
                    )
                    .unwrap()
                })
                .collect();
            let block = build_block_matrix(&inputs).unwrap();
            let slices: Vec<MeasurementMatrix> =
                (1..=t_steps).map(|t| block.slice(t).unwrap()).collect();
            for (a, b) in inputs.iter().zip(slices.iter()) {
                prop_assert_eq!(a, b);
            }
            let rebuilt = build_block_matrix(&slices).unwrap();
            prop_assert_eq!(rebuilt.data(), block.data());
        }

        /// Temporal series composed with block building recovers the
        /// original per-time entries.
        #[test]
        fn temporal_series_round_trip(t_steps in 1usize..6, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 3;
            let x = DMatrix::from_fn(ROW_KINDS * t_steps, n, |_, _| rng.random::<f64>() - 0.5);
            for j in 0..n {
                for kind in RowKind::ALL {
                    let series = extract_temporal_series(&x, j, kind).unwrap();
                    for t in 0..t_steps {
                        prop_assert_eq!(series[t], x[(t * ROW_KINDS + kind.index(), j)]);
                    }
                }
            }
        }
    }
}
