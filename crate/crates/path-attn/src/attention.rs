//! Ground-truth PaTH / FoX / PaTH-FoX attention in O(L²) memory.
//!
//! Everything here is the oracle for the faster paths: the naive logit
//! loop, the matrix-form logits reusing one global UT factorization, and
//! a reverse-mode backward through the matrix-form graph.

use ndarray::{Array1, Array2};

use crate::error::{PathError, Result};
use crate::householder::{self, HouseholderSeq, UTFactors};
use crate::linalg;

/// One head's worth of attention inputs.
#[derive(Debug, Clone)]
pub struct AttentionBatch {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub seq: HouseholderSeq,
    pub f: Option<Array1<f64>>,
    pub scale: f64,
}

impl AttentionBatch {
    pub fn new(
        q: Array2<f64>,
        k: Array2<f64>,
        v: Array2<f64>,
        seq: HouseholderSeq,
        f: Option<Array1<f64>>,
        scale: f64,
    ) -> Result<Self> {
        let (l, d) = (q.nrows(), q.ncols());
        for (name, m) in [("K", &k), ("V", &v)] {
            if m.nrows() != l || m.ncols() != d {
                return Err(PathError::ShapeMismatch(format!(
                    "{name} is {}×{} but Q is {l}×{d}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if seq.len() != l || seq.dim() != d {
            return Err(PathError::ShapeMismatch(format!(
                "Householder sequence is {}×{} but Q is {l}×{d}",
                seq.len(),
                seq.dim()
            )));
        }
        if let Some(gates) = &f {
            if gates.len() != l {
                return Err(PathError::ShapeMismatch(format!(
                    "gates have length {} but L = {l}",
                    gates.len()
                )));
            }
            for &g in gates.iter() {
                if !(0.0 < g && g < 1.0) {
                    return Err(PathError::InvalidGate { value: g });
                }
            }
        }
        Ok(Self {
            q,
            k,
            v,
            seq,
            f,
            scale,
        })
    }

    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.q.ncols()
    }
}

/// Lower-triangular unnormalized logits; strict upper entries are zero.
#[derive(Debug, Clone)]
pub struct LogitMatrix {
    pub a_tilde: Array2<f64>,
}

/// Naive logits: `Ã_{ij} = scale·k_jᵀ·(H_{j+1}·…·H_i)·q_i` for `j ≤ i`.
///
/// Per query row `i` the interval products are accumulated by walking `j`
/// downward: `r_j = H_{j+1}·…·H_i·q_i`, so the whole matrix costs O(L²d).
pub fn path_logits_naive(batch: &AttentionBatch) -> Result<LogitMatrix> {
    let l = batch.len();
    let mut a = Array2::zeros((l, l));
    for i in 0..l {
        // r starts as q_i (empty product on the diagonal).
        let mut r = batch.q.row(i).to_owned();
        a[[i, i]] = batch.scale * batch.k.row(i).dot(&r);
        for j in (0..i).rev() {
            // extend the interval to [j+1, i]: left-multiply by H_{j+1}
            r = householder::householder_apply(
                &batch.seq.w().row(j + 1),
                batch.seq.beta()[j + 1],
                &r.view(),
            )?;
            a[[i, j]] = batch.scale * batch.k.row(j).dot(&r);
        }
    }
    Ok(LogitMatrix { a_tilde: a })
}

/// Matrix-form logits reusing one global UT factorization:
/// `Ã = scale·(lower(QKᵀ) − lower(QWᵀ)·Tinv·strictLower(WKᵀ))`.
pub fn path_logits_matrixform(batch: &AttentionBatch) -> Result<LogitMatrix> {
    let ut = householder::ut_factor(&batch.seq);
    Ok(path_logits_matrixform_with(batch, &ut))
}

pub fn path_logits_matrixform_with(batch: &AttentionBatch, ut: &UTFactors) -> LogitMatrix {
    let w = batch.seq.w();
    let mut qk = batch.q.dot(&batch.k.t());
    linalg::tril_inplace(&mut qk);
    let mut qw = batch.q.dot(&w.t());
    linalg::tril_inplace(&mut qw);
    let mut wk = w.dot(&batch.k.t());
    linalg::strict_tril_inplace(&mut wk);
    let mut a = qk;
    a -= &qw.dot(ut.tinv()).dot(&wk);
    a *= batch.scale;
    linalg::tril_inplace(&mut a);
    LogitMatrix { a_tilde: a }
}

/// Inclusive prefix sums of `log f`: `c_t = Σ_{s ≤ t} log f_s` with `c` such
/// that `Σ_{s=j+1}^{i} log f_s = c_i − c_j`. Position 0's gate is stored but
/// never consumed.
fn log_gate_prefix(f: &Array1<f64>) -> Array1<f64> {
    let l = f.len();
    let mut c = Array1::zeros(l);
    for t in 1..l {
        c[t] = c[t - 1] + f[t].ln();
    }
    c
}

/// Shift logits by cumulative log forget gates:
/// `Ã'_{ij} = Ã_{ij} + Σ_{s=j+1}^{i} log f_s` (diagonal unchanged).
pub fn apply_fox_gates(logits: &LogitMatrix, f: &Array1<f64>) -> Result<LogitMatrix> {
    let l = logits.a_tilde.nrows();
    if f.len() != l {
        return Err(PathError::ShapeMismatch(format!(
            "gates have length {} but logits are {l}×{l}",
            f.len()
        )));
    }
    // The f ≡ 1 boundary is permitted here (log 1 = 0) so tests can assert
    // gate neutrality; batch construction still enforces the open interval.
    for &g in f.iter() {
        if !(0.0 < g && g <= 1.0) {
            return Err(PathError::InvalidGate { value: g });
        }
    }
    let c = log_gate_prefix(f);
    let mut a = logits.a_tilde.clone();
    for i in 0..l {
        for j in 0..i {
            a[[i, j]] += c[i] - c[j];
        }
    }
    Ok(LogitMatrix { a_tilde: a })
}

/// Causal softmax over the lower-triangular logits, weighted sum of values.
/// Each row uses max subtraction; row sums of the weights are exactly
/// normalized to 1.
pub fn softmax_attend(logits: &LogitMatrix, v: &Array2<f64>) -> Array2<f64> {
    let weights = softmax_weights(logits);
    weights.dot(v)
}

/// The normalized attention weight matrix (lower triangular, rows sum to 1).
pub fn softmax_weights(logits: &LogitMatrix) -> Array2<f64> {
    let l = logits.a_tilde.nrows();
    let mut a = Array2::zeros((l, l));
    for i in 0..l {
        let row = logits.a_tilde.row(i);
        let m = (0..=i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..=i {
            let e = (row[j] - m).exp();
            a[[i, j]] = e;
            z += e;
        }
        for j in 0..=i {
            a[[i, j]] /= z;
        }
    }
    a
}

/// Full PaTH(-FoX) forward: logits, optional gating, softmax-weighted values.
pub fn reference_forward(batch: &AttentionBatch) -> Result<Array2<f64>> {
    let mut logits = path_logits_naive(batch)?;
    if let Some(f) = &batch.f {
        logits = apply_fox_gates(&logits, f)?;
    }
    Ok(softmax_attend(&logits, &batch.v))
}

/// Gradients of `⟨dO, reference_forward(batch)⟩` with respect to every input.
/// `w` is treated as a free (unconstrained) matrix; callers that normalize
/// `w` compose with the normalization Jacobian themselves.
#[derive(Debug, Clone)]
pub struct AttentionGradients {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub w: Array2<f64>,
    pub beta: Array1<f64>,
    pub f: Option<Array1<f64>>,
}

/// Reverse mode through the matrix-form computation graph.
pub fn reference_backward(batch: &AttentionBatch, d_out: &Array2<f64>) -> Result<AttentionGradients> {
    let l = batch.len();
    let d = batch.dim();
    if d_out.nrows() != l || d_out.ncols() != d {
        return Err(PathError::ShapeMismatch(format!(
            "dO is {}×{} but output is {l}×{d}",
            d_out.nrows(),
            d_out.ncols()
        )));
    }
    let w = batch.seq.w();
    let beta = batch.seq.beta();

    // ---- forward recompute (matrix form) ----
    let ut = householder::ut_factor(&batch.seq);
    let tinv = ut.tinv(); // Z = T⁻¹D, lower triangular
    let mut sq = batch.q.dot(&w.t());
    linalg::tril_inplace(&mut sq);
    let mut rk = w.dot(&batch.k.t());
    linalg::strict_tril_inplace(&mut rk);
    let mut qk = batch.q.dot(&batch.k.t());
    linalg::tril_inplace(&mut qk);
    let mut a_tilde = qk;
    a_tilde -= &sq.dot(tinv).dot(&rk);
    a_tilde *= batch.scale;
    linalg::tril_inplace(&mut a_tilde);
    let mut logits = LogitMatrix { a_tilde };
    if let Some(f) = &batch.f {
        logits = apply_fox_gates(&logits, f)?;
    }
    let weights = softmax_weights(&logits);

    // ---- softmax / value backward ----
    let dv = weights.t().dot(d_out);
    let da = d_out.dot(&batch.v.t());
    // row-wise softmax Jacobian: dL_ij = A_ij (dA_ij − Σ_k dA_ik A_ik)
    let mut d_logits = Array2::zeros((l, l));
    for i in 0..l {
        let mut dot = 0.0;
        for j in 0..=i {
            dot += da[[i, j]] * weights[[i, j]];
        }
        for j in 0..=i {
            d_logits[[i, j]] = weights[[i, j]] * (da[[i, j]] - dot);
        }
    }

    // ---- FoX gate backward ----
    let df = if let Some(f) = &batch.f {
        let mut dc = Array1::<f64>::zeros(l);
        for i in 0..l {
            for j in 0..i {
                dc[i] += d_logits[[i, j]];
                dc[j] -= d_logits[[i, j]];
            }
        }
        // c_t = Σ_{s=1..t} log f_s  ⇒  d log f_s = Σ_{t ≥ s} dc_t
        let mut df = Array1::<f64>::zeros(l);
        let mut suffix = 0.0;
        for t in (1..l).rev() {
            suffix += dc[t];
            df[t] = suffix / f[t];
        }
        Some(df)
    } else {
        None
    };

    // ---- matrix-form logits backward ----
    // Ã = s·(lower(QKᵀ) − Sq·Z·Rk) with Sq, Rk masked as above.
    let mut dq = d_logits.dot(&batch.k).mapv(|x| x * batch.scale);
    let mut dk = d_logits.t().dot(&batch.q).mapv(|x| x * batch.scale);
    let fmat = d_logits.mapv(|x| -batch.scale * x);

    // dSq = F·(Z·Rk)ᵀ, tril-masked
    let zrk = tinv.dot(&rk);
    let mut gq = fmat.dot(&zrk.t());
    linalg::tril_inplace(&mut gq);
    dq += &gq.dot(w);
    let mut dw = gq.t().dot(&batch.q);

    // dRk = (Sq·Z)ᵀ·F, strict-lower-masked
    let sqz = sq.dot(tinv);
    let mut gk = sqz.t().dot(&fmat);
    linalg::strict_tril_inplace(&mut gk);
    dw += &gk.dot(&batch.k);
    dk += &gk.t().dot(w);

    // dZ = Sqᵀ·F·Rkᵀ, then back through Z = T⁻¹D.
    let dz = sq.t().dot(&fmat).dot(&rk.t());
    // Rebuild T (unit lower with strict lower = strictLower(D W Wᵀ)).
    let gram = w.dot(&w.t());
    let mut t = Array2::zeros((l, l));
    for i in 0..l {
        t[[i, i]] = 1.0;
        for j in 0..i {
            t[[i, j]] = beta[i] * gram[[i, j]];
        }
    }
    let x = linalg::backward_substitute_unit_transposed(&t.view(), &dz.view());
    let mut dbeta = Array1::<f64>::zeros(l);
    for i in 0..l {
        dbeta[i] += x[[i, i]]; // D entering through Z = T⁻¹D
    }
    // dT = −X·Zᵀ, strict-lower-masked; T = I + strictLower(D·W·Wᵀ)
    let mut gt = x.dot(&tinv.t()).mapv(|v| -v);
    linalg::strict_tril_inplace(&mut gt);
    for i in 0..l {
        for j in 0..i {
            dbeta[i] += gt[[i, j]] * gram[[i, j]];
        }
    }
    // dW += diag(β)·Gt·W + Gtᵀ·diag(β)·W
    let mut bgt = gt.clone();
    for i in 0..l {
        for j in 0..l {
            bgt[[i, j]] *= beta[i];
        }
    }
    dw += &bgt.dot(w);
    dw += &bgt.t().dot(w);

    Ok(AttentionGradients {
        q: dq,
        k: dk,
        v: dv,
        w: dw,
        beta: dbeta,
        f: df,
    })
}

/// Vanilla causal softmax attention, written independently of the PaTH
/// machinery; used by the NoPE-reduction tests.
pub fn vanilla_causal_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    scale: f64,
) -> Array2<f64> {
    let l = q.nrows();
    let mut out = Array2::zeros(v.raw_dim());
    for i in 0..l {
        let scores: Vec<f64> = (0..=i).map(|j| scale * q.row(i).dot(&k.row(j))).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            let wgt = e / z;
            out.row_mut(i).scaled_add(wgt, &v.row(j));
        }
    }
    out
}
