//! Householder-like transformations `H_t = I − β_t w_t w_tᵀ`, their
//! sequential products, and the compact UT-transform representation.
//!
//! Conventions (pinned by the oracle tests, not assumed):
//! - `sequential_product(seq, a, b)` is the matrix `H_a·H_{a+1}·…·H_b`
//!   (smallest index is the leftmost factor). In an attention logit
//!   `k_jᵀ·H_{j+1}·…·H_i·q_i` this means `H_{j+1}` acts on `k` first.
//! - `Tinv` is the lower-triangular matrix
//!   `(I + strictLower(D·W·Wᵀ))⁻¹·D`. With this orientation the full
//!   product is `H_0·…·H_{L−1} = I − Wᵀ·Tinvᵀ·W` (note the transpose),
//!   while the attention matrix form uses `Tinv` untransposed.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{PathError, Result};
use crate::linalg;

/// Per-position direction vectors `w_t` and gates `β_t`.
///
/// Every row of `W` is unit-norm or all-zero (a zero row makes `H_t` the
/// identity regardless of `β_t`), and every `β_t` lies in `(0, 2)`.
#[derive(Debug, Clone)]
pub struct HouseholderSeq {
    w: Array2<f64>,
    beta: Array1<f64>,
}

impl HouseholderSeq {
    const NORM_TOL: f64 = 1e-12;

    pub fn new(w: Array2<f64>, beta: Array1<f64>) -> Result<Self> {
        if w.nrows() != beta.len() {
            return Err(PathError::ShapeMismatch(format!(
                "W has {} rows but beta has {} entries",
                w.nrows(),
                beta.len()
            )));
        }
        for (t, row) in w.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm != 0.0 && (norm - 1.0).abs() > Self::NORM_TOL {
                return Err(PathError::InvalidDirection { row: t, norm });
            }
        }
        for &b in beta.iter() {
            if !(0.0 < b && b < 2.0) {
                return Err(PathError::InvalidBeta { value: b });
            }
        }
        Ok(Self { w, beta })
    }

    /// Constructor without the `β ∈ (0, 2)` check. Needed by tests of the
    /// degenerate-gate property and by hand-weighted constructions that use
    /// exact `β ∈ {0, 1, 2}`.
    pub fn new_relaxed(w: Array2<f64>, beta: Array1<f64>) -> Result<Self> {
        if w.nrows() != beta.len() {
            return Err(PathError::ShapeMismatch(format!(
                "W has {} rows but beta has {} entries",
                w.nrows(),
                beta.len()
            )));
        }
        for (t, row) in w.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm != 0.0 && (norm - 1.0).abs() > Self::NORM_TOL {
                return Err(PathError::InvalidDirection { row: t, norm });
            }
        }
        Ok(Self { w, beta })
    }

    pub fn len(&self) -> usize {
        self.w.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn beta(&self) -> &Array1<f64> {
        &self.beta
    }

    /// The sub-sequence covering positions `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            w: self.w.slice(ndarray::s![start..end, ..]).to_owned(),
            beta: self.beta.slice(ndarray::s![start..end]).to_owned(),
        }
    }
}

/// Compact UT-transform factors for a full sequence.
#[derive(Debug, Clone)]
pub struct UTFactors {
    tinv: Array2<f64>,
    length: usize,
    dim: usize,
}

impl UTFactors {
    /// The lower-triangular `T⁻¹·D` matrix.
    pub fn tinv(&self) -> &Array2<f64> {
        &self.tinv
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The full product `H_0·…·H_{L−1} = I − Wᵀ·Tinvᵀ·W`.
    pub fn full_product(&self, seq: &HouseholderSeq) -> Array2<f64> {
        let w = seq.w();
        let mut p = linalg::identity(self.dim);
        let correction = w.t().dot(&self.tinv.t()).dot(w);
        p -= &correction;
        p
    }
}

/// Apply `x ↦ x − β·w·(wᵀx)` to a single vector.
pub fn householder_apply(
    w: &ArrayView1<f64>,
    beta: f64,
    x: &ArrayView1<f64>,
) -> Result<Array1<f64>> {
    if w.len() != x.len() {
        return Err(PathError::ShapeMismatch(format!(
            "w has length {} but x has length {}",
            w.len(),
            x.len()
        )));
    }
    let proj = beta * w.dot(x);
    let mut out = x.to_owned();
    out.scaled_add(-proj, w);
    Ok(out)
}

/// Brute-force oracle: `H_a·H_{a+1}·…·H_b`, or the identity when `a > b`.
pub fn sequential_product(seq: &HouseholderSeq, a: usize, b: usize) -> Result<Array2<f64>> {
    let l = seq.len();
    if a >= l || b >= l {
        return Err(PathError::IndexOutOfRange(format!(
            "interval ({a}, {b}) outside sequence of length {l}"
        )));
    }
    let d = seq.dim();
    let mut m = linalg::identity(d);
    if a > b {
        return Ok(m);
    }
    // Build the product column by column: column c of H_a·…·H_b is
    // H_a applied last, so walk factors right-to-left on each basis column.
    for c in 0..d {
        let mut col = Array1::zeros(d);
        col[c] = 1.0;
        for t in (a..=b).rev() {
            col = householder_apply(&seq.w().row(t), seq.beta()[t], &col.view())?;
        }
        m.column_mut(c).assign(&col);
    }
    Ok(m)
}

/// The UT transform: `Tinv = (I + strictLower(D·W·Wᵀ))⁻¹·D`, computed by
/// forward substitution on the unit-lower-triangular system.
pub fn ut_factor(seq: &HouseholderSeq) -> UTFactors {
    let (l, d) = (seq.len(), seq.dim());
    let w = seq.w();
    let beta = seq.beta();
    // T = I + strictLower(D W Wᵀ); only the strict lower part is stored.
    let gram = w.dot(&w.t());
    let mut t = Array2::zeros((l, l));
    for i in 0..l {
        t[[i, i]] = 1.0;
        for j in 0..i {
            t[[i, j]] = beta[i] * gram[[i, j]];
        }
    }
    // Tinv = T⁻¹ D: solve T X = D.
    let mut rhs = Array2::zeros((l, l));
    for i in 0..l {
        rhs[[i, i]] = beta[i];
    }
    let tinv = linalg::forward_substitute_unit_multi(&t.view(), &rhs.view());
    UTFactors {
        tinv,
        length: l,
        dim: d,
    }
}

/// Masked UT transform: the product over `[s0, e0]` recovered from the
/// global factors with row masks, `I − (W ⊙ M_{s0}^L)ᵀ·Tinvᵀ·(W ⊙ M_{e0}^R)`.
/// Equals `sequential_product(seq, s0, e0)`; identity when `s0 > e0`.
pub fn masked_interval_product(
    seq: &HouseholderSeq,
    ut: &UTFactors,
    s0: usize,
    e0: usize,
) -> Result<Array2<f64>> {
    let l = seq.len();
    if s0 >= l || e0 >= l {
        return Err(PathError::IndexOutOfRange(format!(
            "interval ({s0}, {e0}) outside sequence of length {l}"
        )));
    }
    if ut.length() != l || ut.dim() != seq.dim() {
        return Err(PathError::ShapeMismatch(
            "UT factors do not match the sequence".into(),
        ));
    }
    let d = seq.dim();
    let mut m = linalg::identity(d);
    if s0 > e0 {
        return Ok(m);
    }
    let w = seq.w();
    // Left mask keeps rows k ≥ s0, right mask keeps rows k ≤ e0.
    let mut wl = w.clone();
    for k in 0..s0 {
        wl.row_mut(k).fill(0.0);
    }
    let mut wr = w.clone();
    for k in (e0 + 1)..l {
        wr.row_mut(k).fill(0.0);
    }
    let correction = wl.t().dot(&ut.tinv().t()).dot(&wr);
    m -= &correction;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_support::{random_seq, seeded_rng};
    use ndarray::array;

    #[test]
    fn apply_identity_when_beta_zero() {
        let w = array![0.6, 0.8];
        let x = array![1.0, -2.0];
        let y = householder_apply(&w.view(), 0.0, &x.view()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn apply_reflects_axis_vector() {
        let w = array![0.6, 0.8];
        let y = householder_apply(&w.view(), 2.0, &w.view()).unwrap();
        for (a, b) in y.iter().zip(w.iter()) {
            assert!((a + b).abs() < 1e-15);
        }
    }

    #[test]
    fn apply_removes_rank_one_component() {
        let w = array![1.0, 0.0];
        let x = array![3.0, 4.0];
        let y = householder_apply(&w.view(), 1.0, &x.view()).unwrap();
        assert_eq!(y, array![0.0, 4.0]);
    }

    #[test]
    fn apply_rejects_dimension_mismatch() {
        let w = array![1.0, 0.0, 0.0];
        let x = array![1.0, 2.0];
        assert!(householder_apply(&w.view(), 1.0, &x.view()).is_err());
    }

    #[test]
    fn spectral_action_on_unit_direction() {
        let mut rng = seeded_rng(11);
        let seq = random_seq(&mut rng, 4, 6);
        for t in 0..seq.len() {
            let w = seq.w().row(t);
            let beta = seq.beta()[t];
            let hw = householder_apply(&w, beta, &w).unwrap();
            // H w = (1 − β) w
            for (a, b) in hw.iter().zip(w.iter()) {
                assert!((a - (1.0 - beta) * b).abs() < 1e-12);
            }
            // H x = x for x ⊥ w: project a random vector.
            let x = {
                let mut v = seq.w().row((t + 1) % seq.len()).to_owned();
                let c = v.dot(&w);
                v.scaled_add(-c, &w);
                v
            };
            let hx = householder_apply(&w, beta, &x.view()).unwrap();
            for (a, b) in hx.iter().zip(x.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_product_is_identity() {
        let mut rng = seeded_rng(1);
        let seq = random_seq(&mut rng, 5, 3);
        let m = sequential_product(&seq, 3, 1).unwrap();
        assert!(linalg::max_abs_diff(&m, &linalg::identity(3)) == 0.0);
    }

    #[test]
    fn single_factor_product() {
        let mut rng = seeded_rng(2);
        let seq = random_seq(&mut rng, 5, 3);
        let m = sequential_product(&seq, 2, 2).unwrap();
        let w = seq.w().row(2);
        let beta = seq.beta()[2];
        let mut expect = linalg::identity(3);
        for i in 0..3 {
            for j in 0..3 {
                expect[[i, j]] -= beta * w[i] * w[j];
            }
        }
        assert!(linalg::max_abs_diff(&m, &expect) < 1e-14);
    }

    #[test]
    fn product_matches_iterated_apply_on_basis() {
        let mut rng = seeded_rng(3);
        let seq = random_seq(&mut rng, 8, 5);
        let m = sequential_product(&seq, 0, 7).unwrap();
        for c in 0..5 {
            let mut col = ndarray::Array1::zeros(5);
            col[c] = 1.0;
            for t in (0..8).rev() {
                col = householder_apply(&seq.w().row(t), seq.beta()[t], &col.view()).unwrap();
            }
            for i in 0..5 {
                assert!((m[[i, c]] - col[i]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn out_of_range_indices_error() {
        let mut rng = seeded_rng(4);
        let seq = random_seq(&mut rng, 4, 3);
        assert!(sequential_product(&seq, 0, 4).is_err());
        let ut = ut_factor(&seq);
        assert!(masked_interval_product(&seq, &ut, 4, 2).is_err());
    }

    #[test]
    fn ut_single_factor() {
        let mut rng = seeded_rng(5);
        let seq = random_seq(&mut rng, 1, 4);
        let ut = ut_factor(&seq);
        assert!((ut.tinv()[[0, 0]] - seq.beta()[0]).abs() < 1e-15);
        let p = ut.full_product(&seq);
        let oracle = sequential_product(&seq, 0, 0).unwrap();
        assert!(linalg::max_abs_diff(&p, &oracle) < 1e-12);
    }

    #[test]
    fn ut_matches_sequential_product() {
        let mut rng = seeded_rng(6);
        for &(l, d) in &[(2usize, 3usize), (16, 8), (32, 16)] {
            let seq = random_seq(&mut rng, l, d);
            let ut = ut_factor(&seq);
            // Tinv is exactly lower triangular.
            for i in 0..l {
                for j in (i + 1)..l {
                    assert_eq!(ut.tinv()[[i, j]], 0.0);
                }
            }
            let p = ut.full_product(&seq);
            let oracle = sequential_product(&seq, 0, l - 1).unwrap();
            assert!(linalg::max_abs_diff(&p, &oracle) < 1e-10);
        }
    }

    #[test]
    fn masked_ut_matches_sequential_product() {
        let mut rng = seeded_rng(7);
        let l = 12;
        let seq = random_seq(&mut rng, l, 6);
        let ut = ut_factor(&seq);
        for s0 in 0..l {
            for e0 in 0..l {
                let got = masked_interval_product(&seq, &ut, s0, e0).unwrap();
                let want = sequential_product(&seq, s0, e0).unwrap();
                assert!(
                    linalg::max_abs_diff(&got, &want) < 1e-10,
                    "interval ({s0}, {e0})"
                );
            }
        }
    }

    #[test]
    fn masked_ut_full_interval_equals_full_product() {
        let mut rng = seeded_rng(8);
        let seq = random_seq(&mut rng, 9, 4);
        let ut = ut_factor(&seq);
        let a = masked_interval_product(&seq, &ut, 0, 8).unwrap();
        let b = ut.full_product(&seq);
        assert!(linalg::max_abs_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn degenerate_gate_makes_position_inert() {
        let mut rng = seeded_rng(9);
        let base = random_seq(&mut rng, 6, 4);
        let mut beta = base.beta().clone();
        beta[3] = 0.0;
        let relaxed = HouseholderSeq::new_relaxed(base.w().clone(), beta).unwrap();
        // Products spanning position 3 are unaffected by w_3.
        let mut w2 = base.w().clone();
        w2.row_mut(3).assign(&(base.w().row(0).to_owned() * 0.0));
        let zeroed = HouseholderSeq::new_relaxed(w2, relaxed.beta().clone()).unwrap();
        let a = sequential_product(&relaxed, 0, 5).unwrap();
        let b = sequential_product(&zeroed, 0, 5).unwrap();
        assert!(linalg::max_abs_diff(&a, &b) < 1e-14);
    }

    #[test]
    fn constructor_rejects_bad_inputs() {
        let w = array![[0.5, 0.5]];
        assert!(HouseholderSeq::new(w.clone(), array![1.0]).is_err());
        let unit = array![[0.6, 0.8]];
        assert!(HouseholderSeq::new(unit.clone(), array![2.0]).is_err());
        assert!(HouseholderSeq::new(unit.clone(), array![0.0]).is_err());
        assert!(HouseholderSeq::new(unit, array![1.0, 1.0]).is_err());
    }
}
