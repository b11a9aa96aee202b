//! Hand-weighted models whose exact integer/fraction weights make
//! multiplicative position transitions do symbolic work: a one-layer
//! two-head permutation tracker over swap tokens, and a two-layer
//! flip-flop language-model solver that routes bits to instructions and
//! retrieves the last written bit through projecting transitions.
//!
//! The flip-flop wiring deviates minimally from a literal transcription
//! of its source bookkeeping, which mixes up the instruction-type dims
//! (8/9, 1-indexed) and the write-bit dims (10/11) in three places; the
//! retrieval argument forces: layer-2 β and values keyed off the
//! write-bit dims, and the read-state dims split by retrieved bit. See
//! `README.md` for the exact deltas.

use ndarray::{Array1, Array2};

use crate::attention::{self, AttentionBatch};
use crate::error::{PathError, Result};
use crate::householder::HouseholderSeq;
use crate::tasks::{TOK_B0, TOK_B1, TOK_I, TOK_R, TOK_W};

/// Token id for '#' in the swap vocabulary.
pub const SWAP_HASH: usize = 0;
/// Swap vocabulary size: '#' plus the 20 ordered pairs [x↔y], x ≠ y.
pub const SWAP_VOCAB: usize = 21;
/// Flip-flop vocabulary size.
pub const FFLM_VOCAB: usize = 5;

/// Token id of the ordered swap [x↔y] (1-based elements, x ≠ y).
pub fn swap_token_id(x: usize, y: usize) -> Result<usize> {
    if !(1..=5).contains(&x) || !(1..=5).contains(&y) || x == y {
        return Err(PathError::MalformedSequence(format!(
            "invalid swap pair ({x}, {y})"
        )));
    }
    // pairs enumerated x-major, skipping the diagonal
    let offset = (x - 1) * 4 + if y > x { y - 2 } else { y - 1 };
    Ok(1 + offset)
}

/// Inverse of `swap_token_id`.
pub fn swap_token_pair(id: usize) -> Result<(usize, usize)> {
    if id == SWAP_HASH || id >= SWAP_VOCAB {
        return Err(PathError::MalformedSequence(format!(
            "token {id} is not a swap token"
        )));
    }
    let offset = id - 1;
    let x = offset / 4 + 1;
    let rem = offset % 4;
    let y = if rem + 1 >= x { rem + 2 } else { rem + 1 };
    Ok((x, y))
}

/// β rule for the flip-flop solver's second attention layer.
#[derive(Debug, Clone, Copy)]
pub enum BetaRule {
    /// Hard indicator: β = 1 exactly when the token is a write-bit.
    Step,
    /// σ(slope·(write-bit indicator − ½)); a step for large slopes.
    SteepSigmoid { slope: f64 },
}

impl BetaRule {
    fn eval(&self, write_bit: f64) -> f64 {
        match self {
            BetaRule::Step => {
                if write_bit > 0.5 {
                    1.0
                } else {
                    0.0
                }
            }
            BetaRule::SteepSigmoid { slope } => 1.0 / (1.0 + (-slope * (write_bit - 0.5)).exp()),
        }
    }
}

/// One-layer, two-head tracker over the 21-token swap vocabulary.
///
/// Head 1 stores per-token key/query/w/value rows; head 2 is the
/// data-independent uniform head (all-zero K/Q/w, same values). The
/// output row subtracts head 2's first dim from head 1's.
#[derive(Debug, Clone)]
pub struct SwapTracker {
    pub n: f64,
    /// 21×6 per-token key rows (nonzero only for '#').
    pub k_table: Array2<f64>,
    /// 21×6 per-token query rows (input-independent, magnitude n).
    pub q_table: Array2<f64>,
    /// 21×6 per-token transition directions ((e_x−e_y)/√2, zero for '#').
    pub w_table: Array2<f64>,
    /// 21×6 per-token value rows.
    pub v_table: Array2<f64>,
    pub beta: f64,
    /// Row of the output projection acting on the 12-dim head concat.
    pub output_row: Array1<f64>,
}

/// Two-layer flip-flop solver over a 16-dim hidden stream.
#[derive(Debug, Clone)]
pub struct FflmSolver {
    pub n: f64,
    /// LM-head temperature for the near-uniform supports.
    pub t: f64,
    pub beta_rule: BetaRule,
    /// 5×16 token embedding rows.
    pub embedding: Array2<f64>,
}

#[derive(Debug, Clone)]
pub enum HandWeightedModel {
    Swap(SwapTracker),
    Fflm(FflmSolver),
}

/// Build the swap tracker at scale `n` (maximum word length).
pub fn build_swap_tracker(n: usize) -> HandWeightedModel {
    let nf = n as f64;
    let mut k_table = Array2::zeros((SWAP_VOCAB, 6));
    let mut q_table = Array2::zeros((SWAP_VOCAB, 6));
    let mut w_table = Array2::zeros((SWAP_VOCAB, 6));
    let mut v_table = Array2::zeros((SWAP_VOCAB, 6));
    for i in 0..5 {
        k_table[[SWAP_HASH, i]] = (i + 1) as f64;
    }
    k_table[[SWAP_HASH, 5]] = -1.0;
    v_table[[SWAP_HASH, 0]] = 1.0;
    for tok in 0..SWAP_VOCAB {
        for i in 0..5 {
            q_table[[tok, i]] = nf * (i + 1) as f64;
        }
        q_table[[tok, 5]] = nf * 54.5;
        if tok != SWAP_HASH {
            let (x, y) = swap_token_pair(tok).expect("enumerated swap token");
            let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
            w_table[[tok, x - 1]] = inv_sqrt2;
            w_table[[tok, y - 1]] = -inv_sqrt2;
        }
    }
    let mut output_row = Array1::zeros(12);
    output_row[0] = 1.0;
    output_row[6] = -1.0;
    HandWeightedModel::Swap(SwapTracker {
        n: nf,
        k_table,
        q_table,
        w_table,
        v_table,
        beta: 2.0,
        output_row,
    })
}

/// Build the flip-flop solver at scale `n` (maximum sequence length).
pub fn build_fflm_solver(n: usize) -> HandWeightedModel {
    build_fflm_solver_with(n, BetaRule::Step)
}

pub fn build_fflm_solver_with(n: usize, beta_rule: BetaRule) -> HandWeightedModel {
    let nf = n as f64;
    let mut embedding = Array2::zeros((FFLM_VOCAB, 16));
    for (tok, dim) in [(TOK_W, 0), (TOK_R, 1), (TOK_I, 2), (TOK_B0, 3), (TOK_B1, 4)] {
        embedding[[tok, dim]] = 1.0;
        embedding[[tok, 5]] = 1.0;
    }
    HandWeightedModel::Fflm(FflmSolver {
        n: nf,
        // temperature giving the uniform supports sub-1/n¹⁰⁰ leakage
        t: 101.0 * nf.ln(),
        beta_rule,
        embedding,
    })
}

fn swap_model(model: &HandWeightedModel) -> Result<&SwapTracker> {
    match model {
        HandWeightedModel::Swap(m) => Ok(m),
        HandWeightedModel::Fflm(_) => Err(PathError::InvalidParameter(
            "expected a swap tracker model".into(),
        )),
    }
}

fn fflm_model(model: &HandWeightedModel) -> Result<&FflmSolver> {
    match model {
        HandWeightedModel::Fflm(m) => Ok(m),
        HandWeightedModel::Swap(_) => Err(PathError::InvalidParameter(
            "expected a flip-flop solver model".into(),
        )),
    }
}

/// Decision (±1) for a '#'-prefixed swap word, plus the logit `s₀` from
/// the final position back to '#'. `s₀ = n·(Σ i·π(i) − 54.5)`, which is
/// `> 0.5n` exactly when the composed swaps are the identity.
pub fn swap_tracker_margin(model: &HandWeightedModel, tokens: &[usize]) -> Result<(i32, f64)> {
    let m = swap_model(model)?;
    if tokens.first() != Some(&SWAP_HASH) {
        return Err(PathError::MalformedSequence(
            "swap word must start with '#'".into(),
        ));
    }
    let l = tokens.len();
    if l > m.n as usize + 1 {
        return Err(PathError::MalformedSequence(format!(
            "word length {l} exceeds n+1 = {}",
            m.n as usize + 1
        )));
    }
    for &t in &tokens[1..] {
        swap_token_pair(t)?; // rejects '#' and out-of-range ids
    }
    let mut q = Array2::zeros((l, 6));
    let mut k = Array2::zeros((l, 6));
    let mut v = Array2::zeros((l, 6));
    let mut w = Array2::zeros((l, 6));
    for (pos, &tok) in tokens.iter().enumerate() {
        q.row_mut(pos).assign(&m.q_table.row(tok));
        k.row_mut(pos).assign(&m.k_table.row(tok));
        v.row_mut(pos).assign(&m.v_table.row(tok));
        w.row_mut(pos).assign(&m.w_table.row(tok));
    }
    let beta = Array1::from_elem(l, m.beta);
    let seq = HouseholderSeq::new_relaxed(w, beta)?;
    // construction uses unscaled logits
    let batch = AttentionBatch::new(q, k, v, seq, None, 1.0)?;
    let logits = attention::path_logits_naive(&batch)?;
    let s0 = logits.a_tilde[[l - 1, 0]];
    let weights = attention::softmax_weights(&logits);
    // head 1 output dim 0 = weight on '#'; head 2 is uniform, 1/l on '#'
    let head1 = weights[[l - 1, 0]];
    let head2 = 1.0 / l as f64;
    let concat = [head1, 0.0, 0.0, 0.0, 0.0, 0.0, head2, 0.0, 0.0, 0.0, 0.0, 0.0];
    let score: f64 = m
        .output_row
        .iter()
        .zip(concat.iter())
        .map(|(a, b)| a * b)
        .sum();
    let decision = if score >= 0.0 { 1 } else { -1 };
    Ok((decision, s0))
}

/// +1 iff the word composes to the identity permutation.
pub fn run_swap_tracker(model: &HandWeightedModel, tokens: &[usize]) -> Result<i32> {
    Ok(swap_tracker_margin(model, tokens)?.0)
}

/// Intermediate activations from a flip-flop solver run.
#[derive(Debug, Clone)]
pub struct FflmTrace {
    /// L×L layer-1 attention weights.
    pub layer1_weights: Array2<f64>,
    /// L×L layer-2 attention weights.
    pub layer2_weights: Array2<f64>,
    /// L×16 hidden stream after both layers.
    pub hidden: Array2<f64>,
    /// L×5 next-token distributions.
    pub dist: Array2<f64>,
}

fn validate_fflm_tokens(tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(PathError::MalformedSequence("empty sequence".into()));
    }
    if tokens[0] != TOK_W {
        return Err(PathError::MalformedSequence(
            "first instruction must be a write".into(),
        ));
    }
    for (pos, &t) in tokens.iter().enumerate() {
        if t >= FFLM_VOCAB {
            return Err(PathError::MalformedSequence(format!(
                "token {t} outside vocabulary at position {pos}"
            )));
        }
        let is_bit = t == TOK_B0 || t == TOK_B1;
        if pos % 2 == 0 && is_bit {
            return Err(PathError::MalformedSequence(format!(
                "expected instruction at position {pos}"
            )));
        }
        if pos % 2 == 1 && !is_bit {
            return Err(PathError::MalformedSequence(format!(
                "expected bit at position {pos}"
            )));
        }
    }
    Ok(())
}

/// Run the solver and keep intermediate attention rows for inspection.
pub fn run_fflm_solver_traced(model: &HandWeightedModel, tokens: &[usize]) -> Result<FflmTrace> {
    let m = fflm_model(model)?;
    validate_fflm_tokens(tokens)?;
    if tokens.len() > m.n as usize {
        return Err(PathError::MalformedSequence(format!(
            "length {} exceeds n = {}",
            tokens.len(),
            m.n as usize
        )));
    }
    let l = tokens.len();
    let mut h = Array2::zeros((l, 16));
    for (pos, &tok) in tokens.iter().enumerate() {
        h.row_mut(pos).assign(&m.embedding.row(tok));
    }
    let ind = |x: f64| x > 0.5;

    // layer-1 attention: bit tokens retrieve the preceding instruction's
    // type into dims 6..9 (instruction tokens harmlessly read themselves)
    let mut q = Array2::zeros((l, 16));
    let mut k = Array2::zeros((l, 16));
    let mut v = Array2::zeros((l, 16));
    let mut w = Array2::zeros((l, 16));
    for i in 0..l {
        let instr = h[[i, 0]] + h[[i, 1]] + h[[i, 2]];
        let bit = h[[i, 3]] + h[[i, 4]];
        k[[i, 0]] = instr;
        q[[i, 0]] = m.n * h[[i, 5]];
        w[[i, 0]] = instr;
        w[[i, 1]] = bit;
        v[[i, 6]] = h[[i, 0]];
        v[[i, 7]] = h[[i, 1]];
        v[[i, 8]] = h[[i, 2]];
    }
    let seq = HouseholderSeq::new(w, Array1::ones(l))?;
    let batch = AttentionBatch::new(q, k, v.clone(), seq, None, 1.0)?;
    let logits = attention::path_logits_naive(&batch)?;
    let layer1_weights = attention::softmax_weights(&logits);
    h += &layer1_weights.dot(&v);

    // layer-1 FFN: write-bit indicators in dims 9/10, complement in 11
    for i in 0..l {
        let h10 = ind(h[[i, 3]]) && ind(h[[i, 6]]);
        let h11 = ind(h[[i, 4]]) && ind(h[[i, 6]]);
        h[[i, 9]] += if h10 { 1.0 } else { 0.0 };
        h[[i, 10]] += if h11 { 1.0 } else { 0.0 };
        h[[i, 11]] += if h10 || h11 { 0.0 } else { 1.0 };
    }

    // layer-2 attention: every token retrieves the last write-bit's value
    // into dims 12/13; only write-bit transitions project the key axis
    let mut q = Array2::zeros((l, 16));
    let mut k = Array2::zeros((l, 16));
    let mut v = Array2::zeros((l, 16));
    let mut w = Array2::zeros((l, 16));
    let mut beta = Array1::zeros(l);
    for i in 0..l {
        let write_bit = h[[i, 9]] + h[[i, 10]];
        k[[i, 0]] = write_bit;
        q[[i, 0]] = m.n * h[[i, 5]];
        w[[i, 0]] = write_bit;
        w[[i, 1]] = h[[i, 11]];
        v[[i, 12]] = h[[i, 9]];
        v[[i, 13]] = h[[i, 10]];
        beta[i] = m.beta_rule.eval(write_bit);
    }
    let seq = HouseholderSeq::new_relaxed(w, beta)?;
    let batch = AttentionBatch::new(q, k, v.clone(), seq, None, 1.0)?;
    let logits = attention::path_logits_naive(&batch)?;
    let layer2_weights = attention::softmax_weights(&logits);
    h += &layer2_weights.dot(&v);

    // layer-2 FFN: read-state dims 14/15, keyed on read token × state
    for i in 0..l {
        let r0 = ind(h[[i, 1]]) && ind(h[[i, 12]]);
        let r1 = ind(h[[i, 1]]) && ind(h[[i, 13]]);
        h[[i, 14]] += if r0 { 1.0 } else { 0.0 };
        h[[i, 15]] += if r1 { 1.0 } else { 0.0 };
    }

    // LM head over {w, r, i, 0, 1}
    let mut dist = Array2::zeros((l, FFLM_VOCAB));
    for i in 0..l {
        let mut logit = [0.0f64; FFLM_VOCAB];
        let after_instr = h[[i, 0]] + h[[i, 2]]; // w or i → uniform bit next
        let after_bit = h[[i, 3]] + h[[i, 4]]; // bit → uniform instruction next
        logit[TOK_B0] += m.t * after_instr;
        logit[TOK_B1] += m.t * after_instr;
        logit[TOK_W] += m.t * after_bit;
        logit[TOK_R] += m.t * after_bit;
        logit[TOK_I] += m.t * after_bit;
        logit[TOK_B0] += m.n * h[[i, 14]];
        logit[TOK_B1] += m.n * h[[i, 15]];
        let mx = logit.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (slot, &lg) in logit.iter().enumerate() {
            let e = (lg - mx).exp();
            dist[[i, slot]] = e;
            z += e;
        }
        for slot in 0..FFLM_VOCAB {
            dist[[i, slot]] /= z;
        }
    }
    Ok(FflmTrace {
        layer1_weights,
        layer2_weights,
        hidden: h,
        dist,
    })
}

/// Per-position next-token distributions (L×5 rows summing to 1).
pub fn run_fflm_solver(model: &HandWeightedModel, tokens: &[usize]) -> Result<Array2<f64>> {
    Ok(run_fflm_solver_traced(model, tokens)?.dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    // independent oracle: compose the swaps on [1, 2, 3, 4, 5]
    fn compose_is_identity(tokens: &[usize]) -> bool {
        let mut perm = [1usize, 2, 3, 4, 5];
        for &t in &tokens[1..] {
            let (x, y) = swap_token_pair(t).unwrap();
            perm.swap(x - 1, y - 1);
        }
        perm == [1, 2, 3, 4, 5]
    }

    fn rearrangement_sum(tokens: &[usize]) -> f64 {
        let mut perm = [1usize, 2, 3, 4, 5];
        for &t in &tokens[1..] {
            let (x, y) = swap_token_pair(t).unwrap();
            perm.swap(x - 1, y - 1);
        }
        // π(i) = element at slot i of the final list
        (0..5).map(|i| ((i + 1) * perm[i]) as f64).sum()
    }

    #[test]
    fn swap_token_ids_roundtrip() {
        let mut seen = std::collections::HashSet::new();
        for x in 1..=5 {
            for y in 1..=5 {
                if x == y {
                    assert!(swap_token_id(x, y).is_err());
                    continue;
                }
                let id = swap_token_id(x, y).unwrap();
                assert!((1..SWAP_VOCAB).contains(&id));
                assert!(seen.insert(id));
                assert_eq!(swap_token_pair(id).unwrap(), (x, y));
            }
        }
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn swap_and_undo_is_identity() {
        let model = build_swap_tracker(256);
        let t12 = swap_token_id(1, 2).unwrap();
        assert_eq!(run_swap_tracker(&model, &[SWAP_HASH, t12, t12]).unwrap(), 1);
    }

    #[test]
    fn single_transposition_is_not_identity() {
        let model = build_swap_tracker(256);
        let t12 = swap_token_id(1, 2).unwrap();
        assert_eq!(run_swap_tracker(&model, &[SWAP_HASH, t12]).unwrap(), -1);
    }

    #[test]
    fn empty_word_is_identity() {
        let model = build_swap_tracker(256);
        let (decision, s0) = swap_tracker_margin(&model, &[SWAP_HASH]).unwrap();
        assert_eq!(decision, 1);
        assert!((s0 - 0.5 * 256.0).abs() < 1e-9);
    }

    #[test]
    fn random_words_match_permutation_oracle_with_margin() {
        let model = build_swap_tracker(256);
        let mut rng = crate::test_support::seeded_rng(60);
        for _ in 0..200 {
            let len = rng.gen_range(0..=100);
            let mut tokens = vec![SWAP_HASH];
            for _ in 0..len {
                loop {
                    let x = rng.gen_range(1..=5);
                    let y = rng.gen_range(1..=5);
                    if x != y {
                        tokens.push(swap_token_id(x, y).unwrap());
                        break;
                    }
                }
            }
            let (decision, s0) = swap_tracker_margin(&model, &tokens).unwrap();
            let expect = if compose_is_identity(&tokens) { 1 } else { -1 };
            assert_eq!(decision, expect);
            assert!(s0.abs() > 0.5 * 256.0 - 1e-9, "margin too small: {s0}");
            // proof-internal identity: s₀ = n·(Σ i·π(i) − 54.5)
            let predicted = 256.0 * (rearrangement_sum(&tokens) - 54.5);
            assert!((s0 - predicted).abs() < 1e-8 * predicted.abs().max(1.0));
        }
    }

    #[test]
    fn rearrangement_bound_holds() {
        let mut rng = crate::test_support::seeded_rng(61);
        for _ in 0..200 {
            let mut tokens = vec![SWAP_HASH];
            for _ in 0..rng.gen_range(0..40) {
                let x = rng.gen_range(1..=5);
                let y = rng.gen_range(1..=5);
                if x != y {
                    tokens.push(swap_token_id(x, y).unwrap());
                }
            }
            let s = rearrangement_sum(&tokens);
            assert!(s <= 55.0);
            assert_eq!(s == 55.0, compose_is_identity(&tokens));
        }
    }

    #[test]
    fn swap_rejects_malformed_words() {
        let model = build_swap_tracker(16);
        assert!(run_swap_tracker(&model, &[1, 2]).is_err()); // no '#'
        assert!(run_swap_tracker(&model, &[SWAP_HASH, 0]).is_err()); // '#' mid-word
        assert!(run_swap_tracker(&model, &[SWAP_HASH, 21]).is_err()); // out of vocab
        let long: Vec<usize> = std::iter::once(SWAP_HASH)
            .chain(std::iter::repeat(1).take(17))
            .collect();
        assert!(run_swap_tracker(&model, &long).is_err()); // exceeds n+1
    }

    // independent oracle: flip-flop automaton replay
    fn fflm_reads(tokens: &[usize]) -> Vec<(usize, usize)> {
        let mut state = None;
        let mut reads = Vec::new();
        for (pos, &t) in tokens.iter().enumerate() {
            if t == TOK_W {
                state = Some(tokens[pos + 1]);
            } else if t == TOK_R {
                reads.push((pos, state.expect("read before write")));
            }
        }
        reads
    }

    #[test]
    fn single_write_then_read() {
        let model = build_fflm_solver(256);
        let tokens = [TOK_W, TOK_B1, TOK_R];
        let dist = run_fflm_solver(&model, &tokens).unwrap();
        let read_row = dist.row(2);
        assert!(read_row[TOK_B1] > 1.0 - 1e-6);
    }

    #[test]
    fn paper_style_sequence_recalls_last_write() {
        let model = build_fflm_solver(256);
        // w 1 r 1 w 0 i 1 i 0 i 1 r → the final read must produce 0
        let tokens = [
            TOK_W, TOK_B1, TOK_R, TOK_B1, TOK_W, TOK_B0, TOK_I, TOK_B1, TOK_I, TOK_B0, TOK_I,
            TOK_B1, TOK_R,
        ];
        let dist = run_fflm_solver(&model, &tokens).unwrap();
        assert!(dist[[12, TOK_B0]] > 1.0 - 1e-6);
        // the earlier read sees the first write
        assert!(dist[[2, TOK_B1]] > 1.0 - 1e-6);
    }

    #[test]
    fn random_sequences_read_correctly_both_beta_rules() {
        let mut rng = crate::test_support::seeded_rng(62);
        let models = [
            build_fflm_solver(256),
            build_fflm_solver_with(256, BetaRule::SteepSigmoid { slope: 1e4 }),
        ];
        for _ in 0..50 {
            let pairs = rng.gen_range(2..20);
            let mut tokens = Vec::new();
            for p in 0..pairs {
                let instr = if p == 0 {
                    TOK_W
                } else {
                    [TOK_W, TOK_R, TOK_I][rng.gen_range(0..3)]
                };
                tokens.push(instr);
                tokens.push(if rng.gen_bool(0.5) { TOK_B0 } else { TOK_B1 });
            }
            let reads = fflm_reads(&tokens);
            for model in &models {
                let dist = run_fflm_solver(model, &tokens).unwrap();
                for &(pos, bit) in &reads {
                    assert!(
                        dist[[pos, bit]] > 1.0 - 1e-6,
                        "read at {pos} expected {bit}, got row {:?}",
                        dist.row(pos)
                    );
                }
            }
        }
    }

    #[test]
    fn instruction_positions_are_near_uniform() {
        let model = build_fflm_solver(256);
        let tokens = [TOK_W, TOK_B1, TOK_I, TOK_B0];
        let dist = run_fflm_solver(&model, &tokens).unwrap();
        // after 'w' (pos 0): uniform over the two bits
        assert!((dist[[0, TOK_B0]] - 0.5).abs() < 1e-6);
        assert!((dist[[0, TOK_B1]] - 0.5).abs() < 1e-6);
        // after a bit (pos 1): uniform over the three instructions
        for tok in [TOK_W, TOK_R, TOK_I] {
            assert!((dist[[1, tok]] - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer1_attention_is_one_hot_on_the_instruction() {
        let model = build_fflm_solver(256);
        let tokens = [TOK_W, TOK_B1, TOK_I, TOK_B0, TOK_R, TOK_B1];
        let trace = run_fflm_solver_traced(&model, &tokens).unwrap();
        for pos in [1usize, 3, 5] {
            assert!(
                trace.layer1_weights[[pos, pos - 1]] > 1.0 - 1e-6,
                "bit at {pos} must attend its instruction"
            );
        }
    }

    #[test]
    fn layer2_attention_targets_last_write_bit() {
        let model = build_fflm_solver(256);
        let tokens = [TOK_W, TOK_B1, TOK_I, TOK_B0, TOK_W, TOK_B0, TOK_R, TOK_B0];
        let trace = run_fflm_solver_traced(&model, &tokens).unwrap();
        // read at position 6: last write-bit is position 5
        assert!(trace.layer2_weights[[6, 5]] > 1.0 - 1e-6);
        // earlier position 3 still sees the first write-bit (position 1)
        assert!(trace.layer2_weights[[3, 1]] > 1.0 - 1e-6);
    }

    #[test]
    fn fflm_rejects_malformed_sequences() {
        let model = build_fflm_solver(64);
        assert!(run_fflm_solver(&model, &[]).is_err());
        assert!(run_fflm_solver(&model, &[TOK_R, TOK_B0]).is_err()); // must open with write
        assert!(run_fflm_solver(&model, &[TOK_W, TOK_W]).is_err()); // bit expected
        assert!(run_fflm_solver(&model, &[TOK_W, TOK_B0, TOK_B1]).is_err()); // instruction expected
        assert!(run_fflm_solver(&model, &[TOK_W, 7]).is_err()); // out of vocab
    }

    #[test]
    fn model_kind_mismatch_errors() {
        let swap = build_swap_tracker(8);
        let fflm = build_fflm_solver(8);
        assert!(run_fflm_solver(&swap, &[TOK_W, TOK_B0]).is_err());
        assert!(run_swap_tracker(&fflm, &[SWAP_HASH]).is_err());
    }
}
