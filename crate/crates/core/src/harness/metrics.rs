//! Recovery-error metrics: percentage error for powers and magnitudes,
//! wrapped absolute error for angles.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::measurements::{extract_temporal_series, BlockMatrix, RowKind};

/// Entries with |truth| below this floor are excluded from percentage
/// errors; the ratio is meaningless there.
pub const MAPE_DENOMINATOR_FLOOR: f64 = 1e-6;

/// Mean absolute percentage error, in percent, over entries whose true
/// value clears the denominator floor.
pub fn mape(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} entries, truth has {}",
            estimate.len(),
            truth.len()
        )));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (e, t) in estimate.iter().zip(truth.iter()) {
        if t.abs() > MAPE_DENOMINATOR_FLOOR {
            total += (e - t).abs() / t.abs();
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::DegenerateTruth(MAPE_DENOMINATOR_FLOOR));
    }
    Ok(100.0 * total / counted as f64)
}

/// Wrap an angle difference into (-pi, pi].
fn wrap_angle(delta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut d = delta - two_pi * (delta / two_pi).round();
    if d <= -std::f64::consts::PI {
        d += two_pi;
    }
    d
}

/// Mean absolute wrapped angle error, in radians.
pub fn miae(est_angles: &DVector<f64>, true_angles: &DVector<f64>) -> Result<f64> {
    if est_angles.len() != true_angles.len() {
        return Err(Error::DimensionMismatch(format!(
            "estimate has {} angles, truth has {}",
            est_angles.len(),
            true_angles.len()
        )));
    }
    if est_angles.is_empty() {
        return Err(Error::InvalidParameter("no angles to compare".into()));
    }
    let total: f64 = est_angles
        .iter()
        .zip(true_angles.iter())
        .map(|(e, t)| wrap_angle(e - t).abs())
        .sum();
    Ok(total / est_angles.len() as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct ErrorSummary {
    /// MAPE over both power rows (Re s, Im s), percent.
    pub mape_power: f64,
    /// MAPE over the voltage-magnitude row, percent.
    pub mape_vmag: f64,
    /// Mean wrapped voltage-angle error, radians.
    pub miae_vang: f64,
}

fn gather_rows(block: &BlockMatrix, kinds: &[RowKind]) -> Result<DVector<f64>> {
    let t = block.t_steps();
    let n = block.node_count();
    let mut out = Vec::with_capacity(kinds.len() * t * n);
    for &kind in kinds {
        for j in 0..n {
            let series = extract_temporal_series(block.data(), j, kind)?;
            out.extend(series.iter().copied());
        }
    }
    Ok(DVector::from_vec(out))
}

fn gather_angles(block: &BlockMatrix) -> Result<DVector<f64>> {
    let re = gather_rows(block, &[RowKind::ReV])?;
    let im = gather_rows(block, &[RowKind::ImV])?;
    Ok(DVector::from_fn(re.len(), |i, _| im[i].atan2(re[i])))
}

/// Per-quantity errors of an estimated block matrix against ground truth.
pub fn summarize_errors(estimate: &BlockMatrix, truth: &BlockMatrix) -> Result<ErrorSummary> {
    if estimate.shape() != truth.shape() {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {:?}, truth is {:?}",
            estimate.shape(),
            truth.shape()
        )));
    }
    let power_kinds = [RowKind::ReS, RowKind::ImS];
    let mape_power = mape(
        &gather_rows(estimate, &power_kinds)?,
        &gather_rows(truth, &power_kinds)?,
    )?;
    let mape_vmag = mape(
        &gather_rows(estimate, &[RowKind::Vmag])?,
        &gather_rows(truth, &[RowKind::Vmag])?,
    )?;
    let miae_vang = miae(&gather_angles(estimate)?, &gather_angles(truth)?)?;
    Ok(ErrorSummary {
        mape_power,
        mape_vmag,
        miae_vang,
    })
}
