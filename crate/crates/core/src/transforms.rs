//! Orthonormal DCT basis with a head/tail split, random projection
//! matrices for compressed sampling, and spectral diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Orthonormal DCT-II basis of size `T x T`, split after row `j` into a
/// low-frequency block `D1` (first `j` rows) and a high-frequency block
/// `D2` (last `T - j` rows).
#[derive(Debug, Clone)]
pub struct DctBasis {
    matrix: DMatrix<f64>,
    split: usize,
}

impl DctBasis {
    /// Build the `T x T` orthonormal DCT-II matrix with split index `j`.
    ///
    /// Entry `(k, n)` is `alpha(k) * cos(pi * (2n + 1) * k / (2T))` with
    /// `alpha(0) = sqrt(1/T)` and `alpha(k > 0) = sqrt(2/T)`.
    pub fn new(t_steps: usize, split: usize) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::InvalidParameter("DCT size must be >= 1".into()));
        }
        if split > t_steps {
            return Err(Error::InvalidParameter(format!(
                "split index {split} exceeds basis size {t_steps}"
            )));
        }
        let t = t_steps as f64;
        let matrix = DMatrix::from_fn(t_steps, t_steps, |k, n| {
            let alpha = if k == 0 { (1.0 / t).sqrt() } else { (2.0 / t).sqrt() };
            alpha * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / (2.0 * t)).cos()
        });
        Ok(Self { matrix, split })
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn split_index(&self) -> usize {
        self.split
    }

    /// The full orthonormal matrix `D`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `D1`: the first `j` rows.
    pub fn head(&self) -> DMatrix<f64> {
        self.matrix.rows(0, self.split).into_owned()
    }

    /// `D2`: the last `T - j` rows.
    pub fn tail(&self) -> DMatrix<f64> {
        self.matrix
            .rows(self.split, self.len() - self.split)
            .into_owned()
    }

    /// Forward transform `D x`.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    /// Inverse transform `D^T a` (orthonormality makes the transpose exact).
    pub fn inverse(&self, a: &DVector<f64>) -> DVector<f64> {
        self.matrix.transpose() * a
    }

    /// `D2 x` without materializing the tail block.
    pub fn tail_forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let tail_rows = self.len() - self.split;
        DVector::from_fn(tail_rows, |r, _| self.matrix.row(self.split + r).dot(&x.transpose()))
    }

    /// Adjoint of [`DctBasis::tail_forward`]: scatter `D2^T s` back to signal space.
    pub fn tail_adjoint(&self, s: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        for (r, coeff) in s.iter().enumerate() {
            out.axpy(*coeff, &self.matrix.row(self.split + r).transpose(), 1.0);
        }
        out
    }
}

/// Energy split of `x` across the basis halves: `(|D1 x| / |x|, |D2 x| / |x|)`.
pub fn compactness_ratios(x: &DVector<f64>, basis: &DctBasis) -> Result<(f64, f64)> {
    if x.len() != basis.len() {
        return Err(Error::DimensionMismatch(format!(
            "signal length {} does not match basis size {}",
            x.len(),
            basis.len()
        )));
    }
    let norm = x.norm();
    if norm == 0.0 {
        return Err(Error::ZeroInput("compactness of the zero vector".into()));
    }
    let coeffs = basis.forward(x);
    let head = coeffs.rows(0, basis.split_index()).norm();
    let tail = coeffs.rows(basis.split_index(), basis.len() - basis.split_index()).norm();
    Ok((head / norm, tail / norm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    Gaussian,
    Bernoulli,
    /// Square pass-through; stage-1 recovery under it is exact.
    Identity,
}

/// Random `M x N` projection matrix used to compress a length-`N` signal
/// into `M` mixed samples.
#[derive(Debug, Clone)]
pub struct ProjectionMatrix {
    matrix: DMatrix<f64>,
    kind: ProjectionKind,
    seed: u64,
}

impl ProjectionMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> ProjectionKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// `M / N`, the compression ratio of this projection.
    pub fn cmr(&self) -> f64 {
        self.rows() as f64 / self.cols() as f64
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    /// The `n x n` identity projection (no compression).
    pub fn identity(n: usize) -> ProjectionMatrix {
        ProjectionMatrix {
            matrix: DMatrix::identity(n, n),
            kind: ProjectionKind::Identity,
            seed: 0,
        }
    }
}

/// Draw a seeded random projection. Gaussian entries are i.i.d. with mean 0
/// and variance `1/M`; Bernoulli entries are `+-1/sqrt(M)` equiprobable.
pub fn projection_matrix(
    rows: usize,
    cols: usize,
    kind: ProjectionKind,
    seed: u64,
) -> Result<ProjectionMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter(
            "projection dimensions must be positive".into(),
        ));
    }
    if rows > cols {
        return Err(Error::InvalidParameter(format!(
            "projection rows {rows} exceed signal length {cols}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rows as f64).sqrt();
    let matrix = match kind {
        ProjectionKind::Gaussian => {
            let normal = Normal::new(0.0, scale).expect("valid std dev");
            DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
        }
        ProjectionKind::Bernoulli => DMatrix::from_fn(rows, cols, |_, _| {
            if rng.random::<bool>() {
                scale
            } else {
                -scale
            }
        }),
        ProjectionKind::Identity => {
            if rows != cols {
                return Err(Error::InvalidParameter(
                    "identity projection must be square".into(),
                ));
            }
            DMatrix::identity(rows, cols)
        }
    };
    Ok(ProjectionMatrix { matrix, kind, seed })
}

/// Fraction of squared singular-value energy captured by the top `k`
/// singular values of `m`.
pub fn singular_energy(m: &DMatrix<f64>, k: usize) -> Result<f64> {
    let total_sq: f64 = m.iter().map(|v| v * v).sum();
    if total_sq == 0.0 {
        return Err(Error::ZeroInput("singular energy of the zero matrix".into()));
    }
    let svd = m.clone().svd(false, false);
    let mut values: Vec<f64> = svd.singular_values.iter().copied().collect();
    values.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    let top: f64 = values.iter().take(k).map(|s| s * s).sum();
    let all: f64 = values.iter().map(|s| s * s).sum();
    Ok(top / all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dct_is_orthonormal() {
        for t in [1, 2, 5, 8, 16] {
            let basis = DctBasis::new(t, t.min(2)).unwrap();
            let gram = basis.matrix() * basis.matrix().transpose();
            let identity = DMatrix::<f64>::identity(t, t);
            assert!((gram - identity).amax() < 1e-12, "T={t}");
        }
    }

    #[test]
    fn dct_t2_matches_hand_values() {
        let basis = DctBasis::new(2, 1).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expected = DMatrix::from_row_slice(2, 2, &[s, s, s, -s]);
        assert!((basis.matrix() - expected).amax() < 1e-15);
    }

    #[test]
    fn dct_concentrates_constant_in_dc() {
        for t in [1, 3, 8, 13] {
            let basis = DctBasis::new(t, 1).unwrap();
            let ones = DVector::from_element(t, 1.0);
            let coeffs = basis.forward(&ones);
            assert_relative_eq!(coeffs[0], (t as f64).sqrt(), epsilon = 1e-12);
            for k in 1..t {
                assert!(coeffs[k].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn split_blocks_stack_to_full_matrix() {
        let basis = DctBasis::new(8, 3).unwrap();
        let mut stacked = DMatrix::zeros(8, 8);
        stacked.rows_mut(0, 3).copy_from(&basis.head());
        stacked.rows_mut(3, 5).copy_from(&basis.tail());
        assert!((stacked - basis.matrix()).amax() == 0.0);
    }

    #[test]
    fn two_sparse_signal_concentrates_in_head() {
        // x_t = 5 + 0.3 cos(pi (2t - 1) / 16) for t = 1..8 has only the
        // k = 0 and k = 1 DCT-II coefficients nonzero.
        let t = 8;
        let basis = DctBasis::new(t, 2).unwrap();
        let x = DVector::from_fn(t, |i, _| {
            5.0 + 0.3 * (std::f64::consts::PI * (2.0 * (i as f64 + 1.0) - 1.0) / 16.0).cos()
        });
        let (r1, r2) = compactness_ratios(&x, &basis).unwrap();
        assert!(r1 >= 0.999, "r1 = {r1}");
        assert!(r2 < 1e-10, "r2 = {r2}");
    }

    #[test]
    fn compactness_edge_cases() {
        let basis = DctBasis::new(4, 1).unwrap();
        let constant = DVector::from_element(4, 3.0);
        let (r1, r2) = compactness_ratios(&constant, &basis).unwrap();
        assert_relative_eq!(r1, 1.0, epsilon = 1e-12);
        assert!(r2.abs() < 1e-12);

        // A signal in the span of the last basis row lands entirely in D2.
        let last_row: DVector<f64> = basis.matrix().row(3).transpose();
        let (r1, r2) = compactness_ratios(&last_row, &basis).unwrap();
        assert!(r1.abs() < 1e-12);
        assert_relative_eq!(r2, 1.0, epsilon = 1e-12);

        let zero = DVector::zeros(4);
        assert!(matches!(
            compactness_ratios(&zero, &basis),
            Err(Error::ZeroInput(_))
        ));
    }

    #[test]
    fn energy_partition_sums_to_one() {
        let basis = DctBasis::new(8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let x = DVector::from_fn(8, |_, _| rng.random::<f64>() - 0.5);
            let (r1, r2) = compactness_ratios(&x, &basis).unwrap();
            assert_relative_eq!(r1 * r1 + r2 * r2, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn tail_ops_match_materialized_block() {
        let basis = DctBasis::new(8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = DVector::from_fn(8, |_, _| rng.random::<f64>() - 0.5);
        let direct = basis.tail() * &x;
        assert!((basis.tail_forward(&x) - &direct).amax() < 1e-14);
        let back = basis.tail().transpose() * &direct;
        assert!((basis.tail_adjoint(&direct) - back).amax() < 1e-14);
    }

    #[test]
    fn gaussian_entries_have_target_variance() {
        let (m, n) = (100, 128);
        let phi = projection_matrix(m, n, ProjectionKind::Gaussian, 42).unwrap();
        let count = (m * n) as f64;
        let mean: f64 = phi.matrix().iter().sum::<f64>() / count;
        let var: f64 = phi.matrix().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
        let target = 1.0 / m as f64;
        assert!((var - target).abs() < 0.2 * target, "var = {var}, target = {target}");
    }

    #[test]
    fn bernoulli_entries_are_scaled_signs() {
        let phi = projection_matrix(16, 32, ProjectionKind::Bernoulli, 7).unwrap();
        let scale = 1.0 / 4.0;
        for v in phi.matrix().iter() {
            assert!(*v == scale || *v == -scale);
        }
    }

    #[test]
    fn projections_are_seed_deterministic() {
        for kind in [ProjectionKind::Gaussian, ProjectionKind::Bernoulli] {
            let a = projection_matrix(10, 20, kind, 99).unwrap();
            let b = projection_matrix(10, 20, kind, 99).unwrap();
            assert_eq!(a.matrix().as_slice(), b.matrix().as_slice());
            let c = projection_matrix(10, 20, kind, 100).unwrap();
            assert_ne!(a.matrix().as_slice(), c.matrix().as_slice());
        }
    }

    #[test]
    fn projection_rejects_oversampling() {
        assert!(matches!(
            projection_matrix(9, 8, ProjectionKind::Gaussian, 0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn singular_energy_known_cases() {
        let rank1 = DMatrix::from_fn(6, 4, |i, j| (i as f64 + 1.0) * (j as f64 + 1.0));
        assert_relative_eq!(singular_energy(&rank1, 1).unwrap(), 1.0, epsilon = 1e-12);

        let identity = DMatrix::<f64>::identity(5, 5);
        assert_relative_eq!(singular_energy(&identity, 1).unwrap(), 0.2, epsilon = 1e-12);

        let zero = DMatrix::<f64>::zeros(3, 3);
        assert!(matches!(singular_energy(&zero, 1), Err(Error::ZeroInput(_))));
    }

    #[test]
    fn singular_energy_is_monotone_and_saturates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = DMatrix::from_fn(7, 5, |_, _| rng.random::<f64>() - 0.5);
        let mut prev = 0.0;
        for k in 1..=5 {
            let e = singular_energy(&m, k).unwrap();
            assert!(e >= prev - 1e-12);
            prev = e;
        }
        assert_relative_eq!(singular_energy(&m, 5).unwrap(), 1.0, epsilon = 1e-10);
    }
}
