use nalgebra::Cholesky;

use crate::{CMatrix, C64};

/// `H diag(s)` for non-negative column weights `s`.
pub(crate) fn scale_columns(h: &CMatrix, s: &[f64]) -> CMatrix {
    let mut out = h.clone();
    for (mut col, &w) in out.column_iter_mut().zip(s) {
        col *= C64::new(w, 0.0);
    }
    out
}

/// Cholesky factor of the Hermitian positive definite matrix `H diag(s) H^H`.
pub(crate) fn weighted_gram(h: &CMatrix, s: &[f64]) -> (CMatrix, Option<Cholesky<C64, nalgebra::Dyn>>) {
    let hs = scale_columns(h, s);
    let gram = &hs * h.adjoint();
    let chol = checked_cholesky(gram);
    (hs, chol)
}

/// Smallest admissible Cholesky pivot `L_ii²` relative to `G_ii`.
const PIVOT_REL: f64 = 1e-13;

/// Cholesky factorisation that also rejects numerically zero pivots.
pub(crate) fn checked_cholesky(gram: CMatrix) -> Option<Cholesky<C64, nalgebra::Dyn>> {
    let diag: Vec<f64> = gram.diagonal().iter().map(|z| z.re).collect();
    let chol = Cholesky::new(gram)?;
    let l = chol.l_dirty();
    let ok = diag
        .iter()
        .enumerate()
        .all(|(i, &g)| g > 0.0 && l[(i, i)].re * l[(i, i)].re >= PIVOT_REL * g);
    ok.then_some(chol)
}

/// `diag(s) H^H (H diag(s) H^H)^{-1} diag(t)`; `None` if the Gram matrix is
/// not numerically positive definite.
pub(crate) fn weighted_zf(h: &CMatrix, s: &[f64], t: &[f64]) -> Option<CMatrix> {
    let (hs, chol) = weighted_gram(h, s);
    let chol = chol?;
    let k = h.nrows();
    let rhs = CMatrix::from_fn(k, k, |i, j| if i == j { C64::new(t[i], 0.0) } else { C64::new(0.0, 0.0) });
    let x = chol.solve(&rhs);
    let w = hs.adjoint() * x;
    w.iter().all(|z| z.re.is_finite() && z.im.is_finite()).then_some(w)
}
