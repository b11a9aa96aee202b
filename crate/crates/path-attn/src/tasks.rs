//! Seeded generators for the synthetic tasks: flip-flop language
//! modeling, the A5 word problem, '#'-prefixed swap words, and N-back
//! multi-query associative recall.
//!
//! Conventions shared with the training harness and CLI:
//! - `targets[p]` is the token the model must *output at* position `p`
//!   (next-token style); unsupervised positions are `None`.
//! - RNG is ChaCha8 seeded with the example's `seed`, so corpora are
//!   reproducible across platforms and languages implementing that
//!   stream cipher.
//! - Serialized form is JSONL: `{task, seed, tokens, targets, meta}`
//!   per line with `meta.format_version = 1`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PathError, Result};

// Flip-flop vocabulary layout (fixed dataset contract).
pub const TOK_W: usize = 0;
pub const TOK_R: usize = 1;
pub const TOK_I: usize = 2;
pub const TOK_B0: usize = 3;
pub const TOK_B1: usize = 4;

/// Instruction-mix presets: in-distribution, sparse-OOD, dense-OOD.
pub const FFLM_P_IGNORE_ID: f64 = 0.8;
pub const FFLM_P_IGNORE_SPARSE: f64 = 0.98;
pub const FFLM_P_IGNORE_DENSE: f64 = 0.10;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TaskExample {
    pub task: String,
    pub seed: u64,
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub meta: serde_json::Value,
}

fn base_meta() -> serde_json::Map<String, serde_json::Value> {
    let mut m = serde_json::Map::new();
    m.insert("format_version".into(), DATASET_FORMAT_VERSION.into());
    m
}

/// One flip-flop sequence of `length` tokens (instruction/bit pairs).
/// The first instruction is always a write; later instructions are
/// ignore with probability `p_ignore`, the remainder split evenly
/// between write and read. Reads are supervised with the current state.
pub fn gen_fflm(length: usize, p_ignore: f64, seed: u64) -> Result<TaskExample> {
    if !(0.0 < p_ignore && p_ignore < 1.0) {
        return Err(PathError::InvalidParameter(format!(
            "p_ignore must lie in (0, 1), got {p_ignore}"
        )));
    }
    if length < 2 || length % 2 != 0 {
        return Err(PathError::InvalidParameter(format!(
            "length must be an even count ≥ 2 of instruction/bit tokens, got {length}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = length / 2;
    let mut tokens = Vec::with_capacity(length);
    let mut targets = vec![None; length];
    let mut state: Option<usize> = None;
    for p in 0..pairs {
        let instr = if p == 0 {
            TOK_W
        } else {
            let u: f64 = rng.gen();
            if u < p_ignore {
                TOK_I
            } else if u < p_ignore + (1.0 - p_ignore) / 2.0 {
                TOK_W
            } else {
                TOK_R
            }
        };
        tokens.push(instr);
        let bit = match instr {
            TOK_R => state.expect("state set by the opening write"),
            _ => {
                if rng.gen_bool(0.5) {
                    TOK_B1
                } else {
                    TOK_B0
                }
            }
        };
        if instr == TOK_W {
            state = Some(bit);
        }
        if instr == TOK_R {
            targets[2 * p] = Some(bit);
        }
        tokens.push(bit);
    }
    let mut meta = base_meta();
    meta.insert("p_ignore".into(), p_ignore.into());
    Ok(TaskExample {
        task: "fflm".into(),
        seed,
        tokens,
        targets,
        meta: meta.into(),
    })
}

/// 5-element permutation as image array: `perm[i]` = image of element i.
pub type Perm5 = [usize; 5];

pub const PERM_IDENTITY: Perm5 = [0, 1, 2, 3, 4];

/// Compose: apply `g` after `p` (`(g∘p)(i) = g(p(i))`).
pub fn perm_compose(g: &Perm5, p: &Perm5) -> Perm5 {
    let mut out = [0; 5];
    for i in 0..5 {
        out[i] = g[p[i]];
    }
    out
}

fn perm_inverse(p: &Perm5) -> Perm5 {
    let mut out = [0; 5];
    for i in 0..5 {
        out[p[i]] = i;
    }
    out
}

fn cycle3(a: usize, b: usize, c: usize) -> Perm5 {
    let mut p = PERM_IDENTITY;
    p[a] = b;
    p[b] = c;
    p[c] = a;
    p
}

/// The six A5 word-problem generator tokens: g1=(1 2 3), g2=(1 2 4),
/// g3=(1 2 5), then their inverses, in token-id order 0..6.
pub fn a5_generators() -> [Perm5; 6] {
    let g1 = cycle3(0, 1, 2);
    let g2 = cycle3(0, 1, 3);
    let g3 = cycle3(0, 1, 4);
    [g1, g2, g3, perm_inverse(&g1), perm_inverse(&g2), perm_inverse(&g3)]
}

/// Compose a generator-token word left to right.
pub fn a5_compose(tokens: &[usize]) -> Result<Perm5> {
    let gens = a5_generators();
    let mut acc = PERM_IDENTITY;
    for &t in tokens {
        let g = gens.get(t).ok_or_else(|| {
            PathError::MalformedSequence(format!("token {t} is not an A5 generator"))
        })?;
        acc = perm_compose(g, &acc);
    }
    Ok(acc)
}

/// A5 word with per-prefix identity targets (1 = identity prefix).
/// Final-label balanced by rejection: a fair coin picks the desired
/// final label and words are re-drawn until it matches (bounded tries;
/// short lengths where identity is unreachable fall back to the last
/// draw).
pub fn gen_a5_word(length: usize, seed: u64) -> Result<TaskExample> {
    if length < 1 {
        return Err(PathError::InvalidParameter(
            "word length must be ≥ 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let want_identity = rng.gen_bool(0.5);
    let mut tokens = Vec::new();
    for attempt in 0..1000 {
        tokens = (0..length).map(|_| rng.gen_range(0..6)).collect();
        let is_identity = a5_compose(&tokens)? == PERM_IDENTITY;
        if is_identity == want_identity || attempt == 999 {
            break;
        }
    }
    let mut targets = Vec::with_capacity(length);
    let mut acc = PERM_IDENTITY;
    let gens = a5_generators();
    for &t in &tokens {
        acc = perm_compose(&gens[t], &acc);
        targets.push(Some(usize::from(acc == PERM_IDENTITY)));
    }
    let mut meta = base_meta();
    meta.insert(
        "final_identity".into(),
        (a5_compose(&tokens)? == PERM_IDENTITY).into(),
    );
    Ok(TaskExample {
        task: "a5_word".into(),
        seed,
        tokens,
        targets,
        meta: meta.into(),
    })
}

/// '#' followed by `length` uniform swap tokens; single final target is
/// the identity test (1 = identity). Token ids match the hand-weighted
/// swap tracker's vocabulary.
pub fn gen_swap_sequence(length: usize, seed: u64) -> Result<TaskExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = vec![crate::constructions::SWAP_HASH];
    let mut perm: Perm5 = PERM_IDENTITY;
    for _ in 0..length {
        loop {
            let x = rng.gen_range(1..=5);
            let y = rng.gen_range(1..=5);
            if x != y {
                tokens.push(crate::constructions::swap_token_id(x, y)?);
                perm.swap(x - 1, y - 1);
                break;
            }
        }
    }
    let mut targets = vec![None; tokens.len()];
    *targets.last_mut().expect("nonempty") = Some(usize::from(perm == PERM_IDENTITY));
    let mut meta = base_meta();
    meta.insert("num_swaps".into(), length.into());
    Ok(TaskExample {
        task: "swap".into(),
        seed,
        tokens,
        targets,
        meta: meta.into(),
    })
}

/// Distinct value tokens in the MQRAR vocabulary (after the variables).
pub const MQRAR_NUM_VALUES: usize = 10;

/// Alternating variable/value assignment stream. A variable occurrence
/// with at least `n_back` prior assignments of the same variable is a
/// query, supervised with the value of its `n_back`-th last prior
/// assignment; everything else is unsupervised. Token layout: variables
/// are `0..num_vars`, values are `num_vars..num_vars+10`.
pub fn gen_mqrar(
    n_back: usize,
    num_vars: usize,
    num_pairs: usize,
    seq_len: usize,
    seed: u64,
) -> Result<TaskExample> {
    if n_back < 1 {
        return Err(PathError::InvalidParameter("n_back must be ≥ 1".into()));
    }
    if num_vars < 1 || num_pairs < 1 {
        return Err(PathError::InvalidParameter(
            "need at least one variable and one pair".into(),
        ));
    }
    if seq_len != 2 * num_pairs {
        return Err(PathError::InvalidParameter(format!(
            "seq_len {seq_len} must equal 2·num_pairs = {}",
            2 * num_pairs
        )));
    }
    // a query needs n_back priors plus its own occurrence
    if (n_back + 1) * 2 > seq_len {
        return Err(PathError::InvalidParameter(format!(
            "n_back {n_back} infeasible at seq_len {seq_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(seq_len);
    let mut targets = vec![None; seq_len];
    let mut history: Vec<Vec<usize>> = vec![Vec::new(); num_vars];
    for p in 0..num_pairs {
        let var = rng.gen_range(0..num_vars);
        let value = num_vars + rng.gen_range(0..MQRAR_NUM_VALUES);
        let priors = &history[var];
        if priors.len() >= n_back {
            targets[2 * p] = Some(priors[priors.len() - n_back]);
        }
        tokens.push(var);
        tokens.push(value);
        history[var].push(value);
    }
    let mut meta = base_meta();
    meta.insert("n_back".into(), n_back.into());
    meta.insert("num_vars".into(), num_vars.into());
    Ok(TaskExample {
        task: "mqrar".into(),
        seed,
        tokens,
        targets,
        meta: meta.into(),
    })
}

/// Serialize examples one JSON object per line.
pub fn write_jsonl<W: Write>(out: &mut W, examples: &[TaskExample]) -> Result<()> {
    for ex in examples {
        let line = serde_json::to_string(ex)?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TaskExample>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
