//! Kronecker-factored Fisher information estimate and Riemannian primitives:
//! damped inversion, natural gradient, Fisher inner product and the KL
//! quadratic form.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::tensorio::{GradientBundle, WeightMatrix};

pub fn to_dmatrix(w: &WeightMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(w.rows(), w.cols(), w.data())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Result<WeightMatrix> {
    let mut data = Vec::with_capacity(m.nrows() * m.ncols());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    WeightMatrix::new(m.nrows(), m.ncols(), data)
}

/// F ~ F_O (x) F_I with diagonal damping applied to each factor at inversion.
#[derive(Debug, Clone)]
pub struct KroneckerFim {
    f_out: DMatrix<f64>,
    f_in: DMatrix<f64>,
    damping: f64,
}

/// `F_W^{-1} grad`. Callers negate for the descent direction.
#[derive(Debug, Clone)]
pub struct NaturalGradient {
    pub matrix: WeightMatrix,
    pub source_damping: f64,
}

/// Estimates `F_I = (1/M) E[G^T G]` and `F_O = (1/N) E[G G^T]` from the
/// bundle, symmetrizing each factor after accumulation.
pub fn estimate_kronecker_fim(bundle: &GradientBundle, damping: f64) -> Result<KroneckerFim> {
    let (m, n) = (bundle.rows(), bundle.cols());
    let mut f_in = DMatrix::<f64>::zeros(n, n);
    let mut f_out = DMatrix::<f64>::zeros(m, m);
    for (i, s) in bundle.samples().iter().enumerate() {
        let g = to_dmatrix(s);
        f_in += g.transpose() * &g;
        f_out += &g * g.transpose();
        if f_in.iter().any(|v| !v.is_finite()) || f_out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite accumulation at sample {i}"
            )));
        }
    }
    let count = bundle.sample_count() as f64;
    f_in /= count * m as f64;
    f_out /= count * n as f64;
    f_in = (&f_in + f_in.transpose()) * 0.5;
    f_out = (&f_out + f_out.transpose()) * 0.5;
    Ok(KroneckerFim {
        f_out,
        f_in,
        damping,
    })
}

/// Relative damping: `rel` times the mean of both factors' mean diagonals.
pub fn default_damping(f_out: &DMatrix<f64>, f_in: &DMatrix<f64>, rel: f64) -> f64 {
    let mean_diag = |m: &DMatrix<f64>| m.diagonal().iter().sum::<f64>() / m.nrows() as f64;
    rel * 0.5 * (mean_diag(f_out) + mean_diag(f_in))
}

pub const DEFAULT_RELATIVE_DAMPING: f64 = 1e-4;

impl KroneckerFim {
    pub fn new(f_out: DMatrix<f64>, f_in: DMatrix<f64>, damping: f64) -> Result<Self> {
        if !f_out.is_square() || !f_in.is_square() {
            return Err(Error::Validation("FIM factors must be square".into()));
        }
        if damping < 0.0 {
            return Err(Error::Validation("damping must be >= 0".into()));
        }
        let sym_ok = |m: &DMatrix<f64>| {
            let scale = m.iter().map(|v| v.abs()).fold(0.0f64, f64::max).max(1e-300);
            (m - m.transpose())
                .iter()
                .all(|v| v.abs() <= 1e-12 * scale.max(1.0))
        };
        if !sym_ok(&f_out) || !sym_ok(&f_in) {
            return Err(Error::Validation("FIM factors must be symmetric".into()));
        }
        Ok(Self {
            f_out,
            f_in,
            damping,
        })
    }

    pub fn f_out(&self) -> &DMatrix<f64> {
        &self.f_out
    }

    pub fn f_in(&self) -> &DMatrix<f64> {
        &self.f_in
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn with_relative_damping(self, rel: f64) -> Self {
        let d = default_damping(&self.f_out, &self.f_in, rel);
        self.with_damping(d)
    }

    pub fn out_dim(&self) -> usize {
        self.f_out.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.f_in.nrows()
    }

    fn damped(m: &DMatrix<f64>, d: f64) -> DMatrix<f64> {
        let mut out = m.clone();
        for i in 0..out.nrows() {
            out[(i, i)] += d;
        }
        out
    }

    fn check_shape(&self, g: &WeightMatrix) -> Result<()> {
        if g.rows() != self.out_dim() || g.cols() != self.in_dim() {
            return Err(Error::Validation(format!(
                "matrix {}x{} does not match FIM {}x{}",
                g.rows(),
                g.cols(),
                self.out_dim(),
                self.in_dim()
            )));
        }
        Ok(())
    }

    /// Solves `(F_O + dI) X (F_I + dI) = g` by Cholesky of each factor.
    pub fn damped_inverse_apply(&self, g: &WeightMatrix) -> Result<NaturalGradient> {
        self.check_shape(g)?;
        if self.damping <= 0.0 {
            return Err(Error::Validation(
                "damping must be > 0 for inversion".into(),
            ));
        }
        let chol_out = Cholesky::new(Self::damped(&self.f_out, self.damping)).ok_or_else(|| {
            Error::Numeric(format!(
                "F_O + {:.3e} I is not positive definite; increase damping",
                self.damping
            ))
        })?;
        let chol_in = Cholesky::new(Self::damped(&self.f_in, self.damping)).ok_or_else(|| {
            Error::Numeric(format!(
                "F_I + {:.3e} I is not positive definite; increase damping",
                self.damping
            ))
        })?;
        let gm = to_dmatrix(g);
        // (F_O+dI)^-1 G (F_I+dI)^-1; the second solve runs on the transpose.
        let left = chol_out.solve(&gm);
        let full = chol_in.solve(&left.transpose()).transpose();
        Ok(NaturalGradient {
            matrix: from_dmatrix(&full)?,
            source_damping: self.damping,
        })
    }

    /// `<a, b>_W = trace(F_I a^T F_O b)`, the Kronecker form of
    /// `vec(a)^T (F_O (x) F_I) vec(b)` with row-major vec.
    pub fn fisher_inner(&self, a: &WeightMatrix, b: &WeightMatrix) -> Result<f64> {
        self.check_shape(a)?;
        self.check_shape(b)?;
        let bm = to_dmatrix(b);
        let t = &self.f_out * bm * &self.f_in;
        let mut acc = 0.0;
        for r in 0..a.rows() {
            for c in 0..a.cols() {
                acc += a.get(r, c) * t[(r, c)];
            }
        }
        Ok(acc)
    }

    /// `D_KL ~ 1/2 <dw, dw>_W`, clamped at zero against fp round-off.
    pub fn kl_quadratic(&self, dw: &WeightMatrix) -> Result<f64> {
        Ok((0.5 * self.fisher_inner(dw, dw)?).max(0.0))
    }
}

// ---------------------------------------------------------------------------
// RSQT-based persistence: f_out.rsqt + f_in.rsqt + fim.json sidecar

pub fn save_fim(fim: &KroneckerFim, dir: impl AsRef<std::path::Path>) -> Result<()> {
    let dir = dir.as_ref();
    crate::tensorio::write_tensor(&from_dmatrix(&fim.f_out)?, dir.join("f_out.rsqt"))?;
    crate::tensorio::write_tensor(&from_dmatrix(&fim.f_in)?, dir.join("f_in.rsqt"))?;
    let sidecar = serde_json::json!({ "damping": fim.damping });
    let path = dir.join("fim.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&sidecar).expect("json"))
        .map_err(|e| Error::io(&path, e))
}

pub fn load_fim(dir: impl AsRef<std::path::Path>) -> Result<KroneckerFim> {
    let dir = dir.as_ref();
    let f_out = to_dmatrix(&crate::tensorio::read_tensor(dir.join("f_out.rsqt"))?);
    let f_in = to_dmatrix(&crate::tensorio::read_tensor(dir.join("f_in.rsqt"))?);
    let path = dir.join("fim.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&raw)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let damping = v["damping"].as_f64().ok_or_else(|| {
        Error::Format(format!("{}: missing numeric \"damping\"", path.display()))
    })?;
    KroneckerFim::new(f_out, f_in, damping)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wm(rows: usize, cols: usize, data: &[f64]) -> WeightMatrix {
        WeightMatrix::new(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn zero_bundle_gives_zero_factors() {
        let bundle = GradientBundle::new(vec![WeightMatrix::zeros(2, 3); 4]).unwrap();
        let fim = estimate_kronecker_fim(&bundle, 0.0).unwrap();
        assert!(fim.f_out().iter().all(|&v| v == 0.0));
        assert!(fim.f_in().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rank_one_sample_closed_form() {
        // G = g a^T with g=[1,1], a=[1,0]
        let g = wm(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let bundle = GradientBundle::new(vec![g]).unwrap();
        let fim = estimate_kronecker_fim(&bundle, 0.0).unwrap();
        let f_in = fim.f_in();
        let f_out = fim.f_out();
        assert!((f_in[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(f_in[(0, 1)].abs() < 1e-12 && f_in[(1, 1)].abs() < 1e-12);
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            assert!((f_out[(r, c)] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_metric_natural_gradient_is_gradient() {
        let fim = KroneckerFim::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3), 0.0)
            .unwrap()
            // tiny damping keeps the factors effectively identity
            .with_damping(1e-14);
        let g = wm(2, 3, &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]);
        let ng = fim.damped_inverse_apply(&g).unwrap();
        for (a, b) in ng.matrix.data().iter().zip(g.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn scalar_metric_halves_gradient() {
        let fim = KroneckerFim::new(
            DMatrix::identity(2, 2) * 2.0,
            DMatrix::identity(2, 2),
            0.0,
        )
        .unwrap()
        .with_damping(1e-15);
        let g = wm(2, 2, &[2.0, 4.0, -6.0, 8.0]);
        let ng = fim.damped_inverse_apply(&g).unwrap();
        for (a, b) in ng.matrix.data().iter().zip(g.data()) {
            assert!((a - b / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_factors_inner_is_frobenius() {
        let fim = KroneckerFim::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 0.0).unwrap();
        let a = wm(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let b = wm(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        let expect: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        assert!((fim.fisher_inner(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn zero_argument_inner_is_zero() {
        let fim = KroneckerFim::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 0.0).unwrap();
        let z = WeightMatrix::zeros(2, 2);
        let b = wm(2, 2, &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(fim.fisher_inner(&z, &b).unwrap(), 0.0);
    }

    #[test]
    fn kl_quadratic_unit_norm_identity_is_half() {
        let fim = KroneckerFim::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 0.0).unwrap();
        let dw = wm(2, 2, &[0.5, 0.5, 0.5, 0.5]); // Frobenius norm 1
        assert!((fim.kl_quadratic(&dw).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_quadratic_scales_quadratically() {
        let fim = KroneckerFim::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::from_row_slice(2, 2, &[1.5, -0.2, -0.2, 0.8]),
            0.0,
        )
        .unwrap();
        let dw = wm(2, 2, &[0.3, -0.1, 0.2, 0.4]);
        let scaled = wm(2, 2, &[0.9, -0.3, 0.6, 1.2]);
        let base = fim.kl_quadratic(&dw).unwrap();
        let big = fim.kl_quadratic(&scaled).unwrap();
        assert!((big - 9.0 * base).abs() <= 1e-12 * big.abs().max(1.0));
    }

    #[test]
    fn shape_mismatch_is_validation_error() {
        let fim = KroneckerFim::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 0.0).unwrap();
        let a = wm(2, 3, &[0.0; 6]);
        assert!(matches!(
            fim.fisher_inner(&a, &a),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn fim_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let fim = KroneckerFim::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            DMatrix::identity(3, 3),
            0.25,
        )
        .unwrap();
        save_fim(&fim, dir.path()).unwrap();
        let back = load_fim(dir.path()).unwrap();
        assert_eq!(back.damping(), 0.25);
        assert_eq!(back.f_out(), fim.f_out());
        assert_eq!(back.f_in(), fim.f_in());
    }
}
