//! Blockwise PaTH attention: per-block UT factors, boundary-adjusted
//! queries/keys, the diagonal-block logit formula, and a streaming
//! right-to-left scan over key/value blocks with online softmax.
//!
//! Block algebra (all products ascending, matching `sequential_product`):
//! for block `i` spanning global positions `iB..(i+1)B−1`,
//! - row `t` of `Qadj_i` is `(H_{iB}·…·H_{iB+t})·q_{iB+t}` (the block-start
//!   transition is included on the query side),
//! - row `s` of `Kadj_i` is `(H_{iB+s+1}·…·H_{(i+1)B−1})ᵀ·k_{iB+s}`,
//! - `P_i = H_{iB}·…·H_{(i+1)B−1} = I − W_iᵀ·Tinv_iᵀ·W_i`.
//! A cross-block logit then factors as `Kadj_j·(P_{j+1}·…·P_{i−1})·Qadj_i`.

use ndarray::{s, Array1, Array2};

use crate::attention::AttentionBatch;
use crate::error::{PathError, Result};
use crate::householder::{self, HouseholderSeq};
use crate::linalg;

#[derive(Debug, Clone, Copy)]
pub struct BlockConfig {
    pub block_size: usize,
}

impl BlockConfig {
    pub fn new(block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(PathError::InvalidParameter("block size must be ≥ 1".into()));
        }
        Ok(Self { block_size })
    }
}

/// Per-block factors from the local UT transform.
#[derive(Debug, Clone)]
pub struct BlockFactors {
    /// B×B lower-triangular `T⁻¹·D` for the block's positions.
    pub tinv: Array2<f64>,
    /// d×d ascending product of the block's transitions.
    pub p: Array2<f64>,
    /// B×d boundary-adjusted queries.
    pub q_adj: Array2<f64>,
    /// B×d boundary-adjusted keys.
    pub k_adj: Array2<f64>,
}

/// Pad a batch to a multiple of `B` with identity transitions (zero `w`
/// rows), zero queries/keys/values, and neutral gates. Outputs for padded
/// rows are discarded by the caller; causal masking keeps padded keys out
/// of real rows because padding sits at the end of the sequence.
pub(crate) fn pad_batch(batch: &AttentionBatch, b: usize) -> Result<(AttentionBatch, usize)> {
    let l = batch.len();
    let padded_len = l.div_ceil(b) * b;
    if padded_len == l {
        return Ok((batch.clone(), l));
    }
    let d = batch.dim();
    let grow = |m: &Array2<f64>| {
        let mut out = Array2::zeros((padded_len, d));
        out.slice_mut(s![..l, ..]).assign(m);
        out
    };
    let q = grow(&batch.q);
    let k = grow(&batch.k);
    let v = grow(&batch.v);
    let mut w = Array2::zeros((padded_len, d));
    w.slice_mut(s![..l, ..]).assign(batch.seq.w());
    let mut beta = Array1::from_elem(padded_len, 1.0);
    beta.slice_mut(s![..l]).assign(batch.seq.beta());
    let seq = HouseholderSeq::new_relaxed(w, beta)?;
    let f = batch.f.as_ref().map(|f| {
        let mut out = Array1::from_elem(padded_len, 0.5);
        out.slice_mut(s![..l]).assign(f);
        out
    });
    let padded = AttentionBatch {
        q,
        k,
        v,
        seq,
        f,
        scale: batch.scale,
    };
    Ok((padded, l))
}

/// Compute `Tinv`, `P`, `Qadj`, `Kadj` for every block.
pub fn compute_block_factors(batch: &AttentionBatch, cfg: &BlockConfig) -> Result<Vec<BlockFactors>> {
    let b = cfg.block_size;
    if batch.len() % b != 0 {
        return Err(PathError::ShapeMismatch(format!(
            "sequence length {} not divisible by block size {b} (pad first)",
            batch.len()
        )));
    }
    let num_blocks = batch.len() / b;
    let d = batch.dim();
    let mut factors = Vec::with_capacity(num_blocks);
    for bi in 0..num_blocks {
        let lo = bi * b;
        let hi = lo + b;
        let seq = batch.seq.slice(lo, hi);
        let ut = householder::ut_factor(&seq);
        let tinv = ut.tinv().clone();
        let w = seq.w();
        let qb = batch.q.slice(s![lo..hi, ..]).to_owned();
        let kb = batch.k.slice(s![lo..hi, ..]).to_owned();

        // P = I − Wᵀ·Tinvᵀ·W (ascending full-block product)
        let mut p = linalg::identity(d);
        p -= &w.t().dot(&tinv.t()).dot(w);

        // Qadj = Q − tril(Q·Wᵀ)·Tinv·W
        let mut qw = qb.dot(&w.t());
        linalg::tril_inplace(&mut qw);
        let mut q_adj = qb;
        q_adj -= &qw.dot(&tinv).dot(w);

        // Kadj = K − (Tinv·strictLower(W·Kᵀ))ᵀ·W
        let mut wk = w.dot(&kb.t());
        linalg::strict_tril_inplace(&mut wk);
        let mut k_adj = kb;
        k_adj -= &tinv.dot(&wk).t().dot(w);

        factors.push(BlockFactors {
            tinv,
            p,
            q_adj,
            k_adj,
        });
    }
    Ok(factors)
}

/// Diagonal-block logits:
/// `scale·lower(Q_i·K_iᵀ − tril(Q_i·W_iᵀ)·Tinv_i·strictLower(W_i·K_iᵀ))`.
pub fn diagonal_block_logits(
    factors: &BlockFactors,
    batch: &AttentionBatch,
    cfg: &BlockConfig,
    block_idx: usize,
) -> Result<Array2<f64>> {
    let b = cfg.block_size;
    let lo = block_idx * b;
    let hi = lo + b;
    if hi > batch.len() {
        return Err(PathError::IndexOutOfRange(format!(
            "block {block_idx} exceeds sequence length {}",
            batch.len()
        )));
    }
    let qb = batch.q.slice(s![lo..hi, ..]);
    let kb = batch.k.slice(s![lo..hi, ..]);
    let wb = batch.seq.w().slice(s![lo..hi, ..]);
    let mut qk = qb.dot(&kb.t());
    let mut qw = qb.dot(&wb.t());
    linalg::tril_inplace(&mut qw);
    let mut wk = wb.dot(&kb.t());
    linalg::strict_tril_inplace(&mut wk);
    qk -= &qw.dot(&factors.tinv).dot(&wk);
    qk *= batch.scale;
    linalg::tril_inplace(&mut qk);
    Ok(qk)
}

/// Per-row online-softmax state for one query block.
pub(crate) struct OnlineState {
    pub row_max: Array1<f64>,
    pub normalizer: Array1<f64>,
    pub acc: Array2<f64>,
}

impl OnlineState {
    pub fn new(rows: usize, d: usize) -> Self {
        Self {
            row_max: Array1::from_elem(rows, f64::NEG_INFINITY),
            normalizer: Array1::zeros(rows),
            acc: Array2::zeros((rows, d)),
        }
    }

    /// Fold one tile of logits (row `t` valid for columns `0..valid_cols(t)`)
    /// against the matching value rows, with the rescale-on-new-max
    /// recurrence.
    pub fn update(
        &mut self,
        logits: &Array2<f64>,
        values: &ndarray::ArrayView2<f64>,
        valid_cols: impl Fn(usize) -> usize,
    ) {
        for t in 0..logits.nrows() {
            let cols = valid_cols(t);
            if cols == 0 {
                continue;
            }
            let tile_max = (0..cols)
                .map(|c| logits[[t, c]])
                .fold(f64::NEG_INFINITY, f64::max);
            let new_max = self.row_max[t].max(tile_max);
            if new_max > self.row_max[t] && self.normalizer[t] > 0.0 {
                let rescale = (self.row_max[t] - new_max).exp();
                self.normalizer[t] *= rescale;
                self.acc.row_mut(t).mapv_inplace(|x| x * rescale);
            }
            self.row_max[t] = new_max;
            for c in 0..cols {
                let e = (logits[[t, c]] - new_max).exp();
                self.normalizer[t] += e;
                self.acc.row_mut(t).scaled_add(e, &values.row(c));
            }
        }
    }

    pub fn finish(&self) -> Array2<f64> {
        let mut out = self.acc.clone();
        for t in 0..out.nrows() {
            let z = self.normalizer[t];
            if z > 0.0 {
                out.row_mut(t).mapv_inplace(|x| x / z);
            }
        }
        out
    }
}

/// Inclusive prefix sums of `log f` over the (padded) sequence.
pub(crate) fn log_gate_prefix(f: &Array1<f64>) -> Array1<f64> {
    let l = f.len();
    let mut c = Array1::zeros(l);
    for t in 1..l {
        c[t] = c[t - 1] + f[t].ln();
    }
    c
}

/// FlashAttention-style forward: diagonal block first, then a right-to-left
/// scan over earlier key/value blocks, folding each block's transition
/// product into the running queries.
pub fn blockwise_forward(batch: &AttentionBatch, cfg: &BlockConfig) -> Result<Array2<f64>> {
    let (padded, real_len) = pad_batch(batch, cfg.block_size)?;
    let b = cfg.block_size;
    let num_blocks = padded.len() / b;
    let d = padded.dim();
    let factors = compute_block_factors(&padded, cfg)?;
    let logf = padded.f.as_ref().map(log_gate_prefix);

    let mut out = Array2::zeros((padded.len(), d));
    for bi in 0..num_blocks {
        let lo = bi * b;
        let mut state = OnlineState::new(b, d);

        // Diagonal block: row t attends columns 0..=t.
        let mut diag = diagonal_block_logits(&factors[bi], &padded, cfg, bi)?;
        if let Some(c) = &logf {
            for t in 0..b {
                for scol in 0..=t {
                    diag[[t, scol]] += c[lo + t] - c[lo + scol];
                }
            }
        }
        state.update(&diag, &padded.v.slice(s![lo..lo + b, ..]), |t| t + 1);

        // Right-to-left scan over earlier blocks.
        let mut q_acc = factors[bi].q_adj.clone();
        for bj in (0..bi).rev() {
            let jlo = bj * b;
            let mut logits = q_acc.dot(&factors[bj].k_adj.t());
            logits *= padded.scale;
            if let Some(c) = &logf {
                for t in 0..b {
                    for scol in 0..b {
                        logits[[t, scol]] += c[lo + t] - c[jlo + scol];
                    }
                }
            }
            state.update(&logits, &padded.v.slice(s![jlo..jlo + b, ..]), |_| b);
            q_acc = q_acc.dot(&factors[bj].p.t());
        }

        out.slice_mut(s![lo..lo + b, ..]).assign(&state.finish());
    }
    Ok(out.slice(s![..real_len, ..]).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{path_logits_naive, reference_forward};
    use crate::householder::sequential_product;
    use crate::test_support::{random_batch, seeded_rng};

    #[test]
    fn factors_match_direct_application() {
        let mut rng = seeded_rng(20);
        let batch = random_batch(&mut rng, 32, 5, false);
        let cfg = BlockConfig::new(8).unwrap();
        let factors = compute_block_factors(&batch, &cfg).unwrap();
        for (bi, f) in factors.iter().enumerate() {
            let lo = bi * 8;
            let p_oracle = sequential_product(&batch.seq, lo, lo + 7).unwrap();
            assert!(linalg::max_abs_diff(&f.p, &p_oracle) < 1e-10);
            for t in 0..8 {
                let m = sequential_product(&batch.seq, lo, lo + t).unwrap();
                let expect = m.dot(&batch.q.row(lo + t));
                for c in 0..5 {
                    assert!((f.q_adj[[t, c]] - expect[c]).abs() < 1e-10);
                }
            }
            for sidx in 0..8 {
                let m = if sidx + 1 < 8 {
                    sequential_product(&batch.seq, lo + sidx + 1, lo + 7).unwrap()
                } else {
                    Array2::eye(5)
                };
                let expect = m.t().dot(&batch.k.row(lo + sidx));
                for c in 0..5 {
                    assert!((f.k_adj[[sidx, c]] - expect[c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_block_p_equals_global_product() {
        let mut rng = seeded_rng(21);
        let batch = random_batch(&mut rng, 12, 4, false);
        let cfg = BlockConfig::new(12).unwrap();
        let factors = compute_block_factors(&batch, &cfg).unwrap();
        let ut = householder::ut_factor(&batch.seq);
        let global = ut.full_product(&batch.seq);
        assert!(linalg::max_abs_diff(&factors[0].p, &global) < 1e-12);
    }

    #[test]
    fn zero_w_block_factors_are_trivial() {
        let mut rng = seeded_rng(22);
        let mut batch = random_batch(&mut rng, 8, 4, false);
        let beta = batch.seq.beta().clone();
        batch.seq = HouseholderSeq::new(Array2::zeros((8, 4)), beta).unwrap();
        let cfg = BlockConfig::new(4).unwrap();
        let factors = compute_block_factors(&batch, &cfg).unwrap();
        for (bi, f) in factors.iter().enumerate() {
            let lo = bi * 4;
            assert!(linalg::max_abs_diff(&f.p, &Array2::eye(4)) == 0.0);
            assert!(
                linalg::max_abs_diff(&f.q_adj, &batch.q.slice(s![lo..lo + 4, ..]).to_owned()) == 0.0
            );
            assert!(
                linalg::max_abs_diff(&f.k_adj, &batch.k.slice(s![lo..lo + 4, ..]).to_owned()) == 0.0
            );
        }
    }

    #[test]
    fn diagonal_block_matches_naive() {
        let mut rng = seeded_rng(23);
        let batch = random_batch(&mut rng, 24, 6, false);
        let cfg = BlockConfig::new(8).unwrap();
        let factors = compute_block_factors(&batch, &cfg).unwrap();
        let naive = path_logits_naive(&batch).unwrap();
        for bi in 0..3 {
            let lo = bi * 8;
            let diag = diagonal_block_logits(&factors[bi], &batch, &cfg, bi).unwrap();
            for t in 0..8 {
                for c in 0..=t {
                    assert!((diag[[t, c]] - naive.a_tilde[[lo + t, lo + c]]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn diagonal_block_single_entry() {
        let mut rng = seeded_rng(24);
        let batch = random_batch(&mut rng, 3, 4, false);
        let cfg = BlockConfig::new(1).unwrap();
        let factors = compute_block_factors(&batch, &cfg).unwrap();
        let diag = diagonal_block_logits(&factors[2], &batch, &cfg, 2).unwrap();
        let expect = batch.scale * batch.k.row(2).dot(&batch.q.row(2));
        assert!((diag[[0, 0]] - expect).abs() < 1e-13);
    }

    #[test]
    fn forward_matches_reference_across_block_sizes() {
        let mut rng = seeded_rng(25);
        for gated in [false, true] {
            let batch = random_batch(&mut rng, 48, 6, gated);
            let reference = reference_forward(&batch).unwrap();
            for bs in [1usize, 4, 16, 48] {
                let cfg = BlockConfig::new(bs).unwrap();
                let out = blockwise_forward(&batch, &cfg).unwrap();
                assert!(
                    linalg::max_rel_diff(&out, &reference) < 1e-9,
                    "B = {bs}, gated = {gated}"
                );
            }
        }
    }

    #[test]
    fn forward_handles_padding() {
        let mut rng = seeded_rng(26);
        let batch = random_batch(&mut rng, 37, 5, true);
        let reference = reference_forward(&batch).unwrap();
        let cfg = BlockConfig::new(8).unwrap();
        let out = blockwise_forward(&batch, &cfg).unwrap();
        assert_eq!(out.nrows(), 37);
        assert!(linalg::max_rel_diff(&out, &reference) < 1e-9);
    }

    #[test]
    fn online_normalizer_matches_batch_normalizer() {
        let mut rng = seeded_rng(27);
        let batch = random_batch(&mut rng, 24, 4, false);
        let cfg = BlockConfig::new(6).unwrap();
        // Recompute the streaming normalizer and compare with a batch
        // evaluation of the same rows.
        let naive = path_logits_naive(&batch).unwrap();
        let factors = compute_block_factors(&batch, &cfg).unwrap();
        for bi in 0..4 {
            let lo = bi * 6;
            let mut state = OnlineState::new(6, 4);
            let diag = diagonal_block_logits(&factors[bi], &batch, &cfg, bi).unwrap();
            state.update(&diag, &batch.v.slice(s![lo..lo + 6, ..]), |t| t + 1);
            let mut q_acc = factors[bi].q_adj.clone();
            for bj in (0..bi).rev() {
                let jlo = bj * 6;
                let logits = q_acc.dot(&factors[bj].k_adj.t()) * batch.scale;
                state.update(&logits, &batch.v.slice(s![jlo..jlo + 6, ..]), |_| 6);
                q_acc = q_acc.dot(&factors[bj].p.t());
            }
            for t in 0..6 {
                let i = lo + t;
                let row_max = (0..=i)
                    .map(|j| naive.a_tilde[[i, j]])
                    .fold(f64::NEG_INFINITY, f64::max);
                let batch_z: f64 = (0..=i).map(|j| (naive.a_tilde[[i, j]] - row_max).exp()).sum();
                let streamed = state.normalizer[t] * (state.row_max[t] - row_max).exp();
                assert!((streamed - batch_z).abs() < 1e-12 * batch_z.max(1.0));
            }
        }
    }

    #[test]
    fn query_update_covers_scanned_interval() {
        let mut rng = seeded_rng(28);
        let batch = random_batch(&mut rng, 16, 4, false);
        let cfg = BlockConfig::new(4).unwrap();
        let factors = compute_block_factors(&batch, &cfg).unwrap();
        let bi = 3;
        let lo = bi * 4;
        let mut q_acc = factors[bi].q_adj.clone();
        for bj in (0..bi).rev() {
            q_acc = q_acc.dot(&factors[bj].p.t());
            // After folding P_bj, row t covers H_{bj·B}·…·H_{lo+t}.
            for t in 0..4 {
                let m = sequential_product(&batch.seq, bj * 4, lo + t).unwrap();
                let expect = m.dot(&batch.q.row(lo + t));
                for c in 0..4 {
                    assert!((q_acc[[t, c]] - expect[c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn rejects_zero_block_size() {
        assert!(BlockConfig::new(0).is_err());
    }
}
