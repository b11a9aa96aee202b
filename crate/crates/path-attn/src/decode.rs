//! Autoregressive decoding with in-place key-cache refinement and
//! blockwise prefill.
//!
//! After step `t`, cache row `i` holds `(H_{i+1}·…·H_t)ᵀ·k_i`: each new
//! step applies its own transition to every historical key once, so the
//! decode logit `q_tᵀ·cache_i` equals the full PaTH logit
//! `k_iᵀ·H_{i+1}·…·H_t·q_t`. The new key is appended untransformed
//! (`k_i^{(i)} = k_i`).

use ndarray::{s, Array1, Array2, ArrayView1};

use crate::attention::AttentionBatch;
use crate::blockwise::{self, BlockConfig};
use crate::error::{PathError, Result};

#[derive(Debug, Clone)]
pub struct DecodeCache {
    k_cache: Array2<f64>,
    v_cache: Array2<f64>,
    /// Inclusive prefix sums of log f (`logf_prefix[t] = Σ_{s≤t} log f_s`,
    /// with position 0 contributing 0); `None` when gates are off.
    logf_prefix: Option<Vec<f64>>,
    len: usize,
    dim: usize,
    scale: f64,
    /// Scalar multiply-accumulates performed by the most recent
    /// `decode_step`; a test instrument for the O(t·d) cost contract.
    pub last_step_macs: u64,
}

impl DecodeCache {
    pub fn new(dim: usize, scale: f64, gated: bool) -> Self {
        Self {
            k_cache: Array2::zeros((0, dim)),
            v_cache: Array2::zeros((0, dim)),
            logf_prefix: gated.then(Vec::new),
            len: 0,
            dim,
            scale,
            last_step_macs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gated(&self) -> bool {
        self.logf_prefix.is_some()
    }

    /// Row `i` of the transformed key cache.
    pub fn key_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.k_cache.row(i)
    }

    fn reserve_row(&mut self) {
        if self.len == self.k_cache.nrows() {
            // amortized doubling
            let cap = (self.k_cache.nrows() * 2).max(4);
            let mut k = Array2::zeros((cap, self.dim));
            let mut v = Array2::zeros((cap, self.dim));
            k.slice_mut(s![..self.len, ..]).assign(&self.k_cache);
            v.slice_mut(s![..self.len, ..]).assign(&self.v_cache);
            self.k_cache = k;
            self.v_cache = v;
        }
    }

    fn push(&mut self, k: &ArrayView1<f64>, v: &ArrayView1<f64>, logf: Option<f64>) {
        self.reserve_row();
        self.k_cache.row_mut(self.len).assign(k);
        self.v_cache.row_mut(self.len).assign(v);
        if let Some(prefix) = &mut self.logf_prefix {
            let prev = prefix.last().copied().unwrap_or(0.0);
            // position 0's gate is never consumed
            prefix.push(if self.len == 0 { 0.0 } else { prev + logf.unwrap_or(0.0) });
        }
        self.len += 1;
    }
}

/// Batch-process a prompt: outputs via the blockwise forward, cache keys
/// via a right-to-left suffix accumulation of block products, so each
/// block is folded with one precomputed suffix matrix.
pub fn prefill(batch: &AttentionBatch, cfg: &BlockConfig) -> Result<(Array2<f64>, DecodeCache)> {
    let l = batch.len();
    let d = batch.dim();
    let mut cache = DecodeCache::new(d, batch.scale, batch.f.is_some());
    if l == 0 {
        return Ok((Array2::zeros((0, d)), cache));
    }
    let outputs = blockwise::blockwise_forward(batch, cfg)?;

    // Cache keys: row i must equal (H_{i+1}·…·H_{l−1})ᵀ·k_i. Work over the
    // padded sequence so every block is full; padding is identity so the
    // suffix products are unaffected.
    let b = cfg.block_size;
    let (work, _) = blockwise::pad_batch(batch, b)?;
    let factors = blockwise::compute_block_factors(&work, cfg)?;
    let num_blocks = work.len() / b;

    // suffix[t] = P_{t+1}·…·P_{last} (ascending block order)
    let mut suffix = vec![Array2::eye(d); num_blocks];
    for t in (0..num_blocks.saturating_sub(1)).rev() {
        suffix[t] = factors[t + 1].p.dot(&suffix[t + 1]);
    }
    for bt in 0..num_blocks {
        // row s of Kadj, folded: (suffix products)ᵀ·k_adj_row
        let folded = factors[bt].k_adj.dot(&suffix[bt]);
        for sidx in 0..b {
            let gi = bt * b + sidx;
            if gi >= l {
                break;
            }
            let logf = batch.f.as_ref().map(|f| f[gi].ln());
            cache.push(&folded.row(sidx), &batch.v.row(gi), logf);
        }
    }
    Ok((outputs, cache))
}

/// One decode step: refine every cached key in place with the new
/// transition, append the raw key, and attend the query over the cache.
#[allow(clippy::too_many_arguments)]
pub fn decode_step<'a>(
    cache: &mut DecodeCache,
    q: &ArrayView1<'a, f64>,
    k: &ArrayView1<'a, f64>,
    v: &ArrayView1<'a, f64>,
    w: &ArrayView1<'a, f64>,
    beta: f64,
    f: Option<f64>,
) -> Result<Array1<f64>> {
    let d = cache.dim;
    for (name, vec) in [("q", q), ("k", k), ("v", v), ("w", w)] {
        if vec.len() != d {
            return Err(PathError::ShapeMismatch(format!(
                "{name} has length {} but cache dim is {d}",
                vec.len()
            )));
        }
    }
    match (cache.gated(), f.is_some()) {
        (true, false) => {
            return Err(PathError::GateMismatch(
                "cache was built with gates but no gate supplied".into(),
            ))
        }
        (false, true) => {
            return Err(PathError::GateMismatch(
                "gate supplied but cache was built gateless".into(),
            ))
        }
        _ => {}
    }
    let mut macs: u64 = 0;

    // in-place refinement: k_i ← (I − β w wᵀ)·k_i for all cached rows
    let t = cache.len;
    for i in 0..t {
        let mut row = cache.k_cache.row_mut(i);
        let proj = beta * w.dot(&row);
        macs += d as u64;
        for (r, wc) in row.iter_mut().zip(w.iter()) {
            *r -= proj * wc;
        }
        macs += d as u64;
    }
    cache.push(k, v, f.map(|g| g.ln()));

    // standard causal softmax attention of q over the cache
    let t = cache.len;
    let mut logits = Vec::with_capacity(t);
    for i in 0..t {
        let mut s = cache.scale * q.dot(&cache.k_cache.row(i));
        macs += d as u64;
        if let Some(prefix) = &cache.logf_prefix {
            s += prefix[t - 1] - prefix[i];
        }
        logits.push(s);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut out = Array1::zeros(d);
    for (i, s) in logits.iter().enumerate() {
        let e = (s - m).exp();
        z += e;
        out.scaled_add(e, &cache.v_cache.row(i));
        macs += d as u64;
    }
    out.mapv_inplace(|x| x / z);
    cache.last_step_macs = macs;
    Ok(out)
}

/// Convenience: run `decode_step` for batch positions `[start, L)`,
/// returning one output row per step.
pub fn decode_range(
    cache: &mut DecodeCache,
    batch: &AttentionBatch,
    start: usize,
) -> Result<Array2<f64>> {
    let l = batch.len();
    let d = batch.dim();
    let mut out = Array2::zeros((l - start, d));
    for t in start..l {
        let f = batch.f.as_ref().map(|f| f[t]);
        let row = decode_step(
            cache,
            &batch.q.row(t),
            &batch.k.row(t),
            &batch.v.row(t),
            &batch.seq.w().row(t),
            batch.seq.beta()[t],
            f,
        )?;
        out.row_mut(t - start).assign(&row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::reference_forward;
    use crate::householder::sequential_product;
    use crate::linalg;
    use crate::test_support::{random_batch, seeded_rng};

    #[test]
    fn prefill_single_token() {
        let mut rng = seeded_rng(30);
        let batch = random_batch(&mut rng, 1, 4, false);
        let cfg = BlockConfig::new(4).unwrap();
        let (out, cache) = prefill(&batch, &cfg).unwrap();
        assert!(linalg::max_abs_diff(&out, &batch.v) < 1e-12);
        for c in 0..4 {
            assert!((cache.key_row(0)[c] - batch.k[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn prefill_cache_matches_direct_products() {
        let mut rng = seeded_rng(31);
        let batch = random_batch(&mut rng, 24, 5, false);
        let cfg = BlockConfig::new(8).unwrap();
        let (_, cache) = prefill(&batch, &cfg).unwrap();
        for i in 0..24 {
            let m = if i + 1 < 24 {
                sequential_product(&batch.seq, i + 1, 23).unwrap()
            } else {
                Array2::eye(5)
            };
            let expect = m.t().dot(&batch.k.row(i));
            for c in 0..5 {
                assert!((cache.key_row(i)[c] - expect[c]).abs() < 1e-9, "row {i}");
            }
        }
    }

    #[test]
    fn zero_w_prefill_keeps_raw_keys() {
        let mut rng = seeded_rng(32);
        let mut batch = random_batch(&mut rng, 8, 4, false);
        let beta = batch.seq.beta().clone();
        batch.seq = crate::householder::HouseholderSeq::new(Array2::zeros((8, 4)), beta).unwrap();
        let cfg = BlockConfig::new(4).unwrap();
        let (_, cache) = prefill(&batch, &cfg).unwrap();
        for i in 0..8 {
            for c in 0..4 {
                assert_eq!(cache.key_row(i)[c], batch.k[[i, c]]);
            }
        }
    }

    #[test]
    fn first_step_on_empty_cache_returns_value() {
        let mut rng = seeded_rng(33);
        let batch = random_batch(&mut rng, 1, 4, false);
        let mut cache = DecodeCache::new(4, batch.scale, false);
        let out = decode_step(
            &mut cache,
            &batch.q.row(0),
            &batch.k.row(0),
            &batch.v.row(0),
            &batch.seq.w().row(0),
            batch.seq.beta()[0],
            None,
        )
        .unwrap();
        for c in 0..4 {
            assert!((out[c] - batch.v[[0, c]]).abs() < 1e-15);
        }
    }

    #[test]
    fn beta_zero_step_leaves_cache_untouched() {
        let mut rng = seeded_rng(34);
        let batch = random_batch(&mut rng, 3, 4, false);
        let cfg = BlockConfig::new(4).unwrap();
        let (_, mut cache) = prefill(&batch, &cfg).unwrap();
        let before = (0..3)
            .map(|i| cache.key_row(i).to_owned())
            .collect::<Vec<_>>();
        let w = ndarray::array![1.0, 0.0, 0.0, 0.0];
        decode_step(
            &mut cache,
            &batch.q.row(0),
            &batch.k.row(0),
            &batch.v.row(0),
            &w.view(),
            0.0,
            None,
        )
        .unwrap();
        for i in 0..3 {
            for c in 0..4 {
                assert_eq!(cache.key_row(i)[c], before[i][c]);
            }
        }
    }

    #[test]
    fn decode_after_empty_prefill_matches_reference() {
        let mut rng = seeded_rng(35);
        for gated in [false, true] {
            let batch = random_batch(&mut rng, 32, 4, gated);
            let reference = reference_forward(&batch).unwrap();
            let mut cache = DecodeCache::new(4, batch.scale, gated);
            let out = decode_range(&mut cache, &batch, 0).unwrap();
            assert!(
                linalg::max_rel_diff(&out, &reference) < 1e-9,
                "gated = {gated}"
            );
        }
    }

    #[test]
    fn prefill_decode_seam() {
        let mut rng = seeded_rng(36);
        for gated in [false, true] {
            let batch = random_batch(&mut rng, 20, 4, gated);
            let reference = reference_forward(&batch).unwrap();
            for split in [0usize, 1, 7, 19] {
                let prefix = AttentionBatch {
                    q: batch.q.slice(s![..split, ..]).to_owned(),
                    k: batch.k.slice(s![..split, ..]).to_owned(),
                    v: batch.v.slice(s![..split, ..]).to_owned(),
                    seq: batch.seq.slice(0, split),
                    f: batch.f.as_ref().map(|f| f.slice(s![..split]).to_owned()),
                    scale: batch.scale,
                };
                let cfg = BlockConfig::new(4).unwrap();
                let (out_prefix, mut cache) = prefill(&prefix, &cfg).unwrap();
                if split > 0 {
                    let ref_prefix = reference.slice(s![..split, ..]).to_owned();
                    assert!(linalg::max_rel_diff(&out_prefix, &ref_prefix) < 1e-9);
                }
                let out_decode = decode_range(&mut cache, &batch, split).unwrap();
                let ref_suffix = reference.slice(s![split.., ..]).to_owned();
                assert!(
                    linalg::max_rel_diff(&out_decode, &ref_suffix) < 1e-9,
                    "split {split}, gated {gated}"
                );
            }
        }
    }

    #[test]
    fn cache_rows_follow_iterated_recurrence() {
        let mut rng = seeded_rng(37);
        let batch = random_batch(&mut rng, 12, 4, false);
        let mut cache = DecodeCache::new(4, batch.scale, false);
        decode_range(&mut cache, &batch, 0).unwrap();
        for i in 0..12 {
            let m = if i + 1 < 12 {
                sequential_product(&batch.seq, i + 1, 11).unwrap()
            } else {
                Array2::eye(4)
            };
            let expect = m.t().dot(&batch.k.row(i));
            for c in 0..4 {
                assert!((cache.key_row(i)[c] - expect[c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decode_cost_is_linear_in_cache_length() {
        let mut rng = seeded_rng(38);
        let batch = random_batch(&mut rng, 64, 8, false);
        let mut cache = DecodeCache::new(8, batch.scale, false);
        decode_range(&mut cache, &batch, 0).unwrap();
        // After 64 steps the last step touched t = 64 rows; the instrument
        // counts ≤ 4·t·d multiply-accumulates.
        let t = 64u64;
        let d = 8u64;
        assert!(cache.last_step_macs <= 4 * t * d);
        assert!(cache.last_step_macs >= t * d);
    }

    #[test]
    fn gate_mismatch_is_rejected() {
        let mut rng = seeded_rng(39);
        let batch = random_batch(&mut rng, 2, 4, false);
        let mut cache = DecodeCache::new(4, batch.scale, false);
        let err = decode_step(
            &mut cache,
            &batch.q.row(0),
            &batch.k.row(0),
            &batch.v.row(0),
            &batch.seq.w().row(0),
            1.0,
            Some(0.5),
        );
        assert!(err.is_err());
        let mut gated_cache = DecodeCache::new(4, batch.scale, true);
        let err = decode_step(
            &mut gated_cache,
            &batch.q.row(0),
            &batch.k.row(0),
            &batch.v.row(0),
            &batch.seq.w().row(0),
            1.0,
            None,
        );
        assert!(err.is_err());
    }
}
