//! Wall-clock comparison of the attention paths. f64 rows time the
//! library kernels; f32 rows time local single-precision ports of the
//! same algorithms (the library is double-precision by contract).

use crate::Outcome;
use clap::Args;
use ndarray::{s, Array1, Array2};
use path_attn::attention::{
    path_logits_matrixform, path_logits_naive, softmax_attend, vanilla_causal_attention,
};
use path_attn::blockwise::blockwise_forward;
use path_attn::test_support::{random_batch, seeded_rng};
use path_attn::{AttentionBatch, BlockConfig, PathError, Result};
use serde::Serialize;
use std::hint::black_box;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CSV_HEADER: &str = "impl,L,d,B,precision,median_ns,mad_ns";

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Comma-separated sequence lengths
    #[arg(long, default_value = "256,512,1024,2048")]
    pub l_list: String,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Block size for the blockwise path
    #[arg(long, default_value_t = 64)]
    pub block: usize,
    /// Timed repetitions per cell (median and MAD reported)
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// f64 (library kernels) or f32 (local ports)
    #[arg(long, default_value = "f64")]
    pub precision: String,
    /// Comma-separated subset of naive, matrixform, blockwise, vanilla
    #[arg(long, default_value = "naive,matrixform,blockwise,vanilla")]
    pub impls: String,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// CSV output file (default: <outdir>/bench.csv)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn median_mad(mut xs: Vec<u64>) -> (u64, u64) {
    xs.sort_unstable();
    let med = xs[xs.len() / 2];
    let mut dev: Vec<u64> = xs.iter().map(|&x| x.abs_diff(med)).collect();
    dev.sort_unstable();
    (med, dev[dev.len() / 2])
}

// ---------------- f32 ports of the four paths ----------------

struct Batch32 {
    q: Array2<f32>,
    k: Array2<f32>,
    v: Array2<f32>,
    w: Array2<f32>,
    beta: Array1<f32>,
    scale: f32,
}

impl Batch32 {
    fn from_f64(b: &AttentionBatch) -> Batch32 {
        Batch32 {
            q: b.q.mapv(|x| x as f32),
            k: b.k.mapv(|x| x as f32),
            v: b.v.mapv(|x| x as f32),
            w: b.seq.w().mapv(|x| x as f32),
            beta: b.seq.beta().mapv(|x| x as f32),
            scale: b.scale as f32,
        }
    }
}

fn softmax_attend32(logits: &Array2<f32>, v: &Array2<f32>) -> Array2<f32> {
    let l = logits.nrows();
    let d = v.ncols();
    let mut out = Array2::zeros((l, d));
    for i in 0..l {
        let row = logits.row(i);
        let m = (0..=i).map(|j| row[j]).fold(f32::NEG_INFINITY, f32::max);
        let mut z = 0.0f32;
        let mut acc = Array1::<f32>::zeros(d);
        for j in 0..=i {
            let e = (row[j] - m).exp();
            z += e;
            acc.scaled_add(e, &v.row(j));
        }
        out.row_mut(i).assign(&acc.mapv(|x| x / z));
    }
    out
}

/// Per-query downward walk through the transitions, O(L²·d).
fn naive32(b: &Batch32) -> Array2<f32> {
    let l = b.q.nrows();
    let mut logits = Array2::<f32>::zeros((l, l));
    for i in 0..l {
        let mut r = b.q.row(i).to_owned();
        logits[[i, i]] = b.scale * b.k.row(i).dot(&r);
        for j in (0..i).rev() {
            // r ← (I − β_{j+1} w_{j+1} w_{j+1}ᵀ)·r
            let w = b.w.row(j + 1);
            let proj = b.beta[j + 1] * w.dot(&r);
            r.scaled_add(-proj, &w);
            logits[[i, j]] = b.scale * b.k.row(j).dot(&r);
        }
    }
    softmax_attend32(&logits, &b.v)
}

/// Unit-lower-triangular solve T·X = B by forward substitution.
fn forward_substitute32(t: &Array2<f32>, b: &Array2<f32>) -> Array2<f32> {
    let n = t.nrows();
    let mut x = b.clone();
    for i in 1..n {
        for p in 0..i {
            let c = t[[i, p]];
            if c != 0.0 {
                let (top, mut bot) = x.view_mut().split_at(ndarray::Axis(0), i);
                let src = top.row(p).to_owned();
                bot.row_mut(0).scaled_add(-c, &src);
            }
        }
    }
    x
}

fn tril32(a: &mut Array2<f32>) {
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            a[[i, j]] = 0.0;
        }
    }
}

fn strict_tril32(a: &mut Array2<f32>) {
    for i in 0..a.nrows() {
        for j in i..a.ncols() {
            a[[i, j]] = 0.0;
        }
    }
}

/// `Tinv = (I + strictLower(D·W·Wᵀ))⁻¹·D` for rows `lo..lo+n`.
fn tinv32(w: &Array2<f32>, beta: &Array1<f32>, lo: usize, n: usize) -> Array2<f32> {
    let wb = w.slice(s![lo..lo + n, ..]);
    let gram = wb.dot(&wb.t());
    let mut t = Array2::<f32>::zeros((n, n));
    let mut rhs = Array2::<f32>::zeros((n, n));
    for i in 0..n {
        t[[i, i]] = 1.0;
        rhs[[i, i]] = beta[lo + i];
        for j in 0..i {
            t[[i, j]] = beta[lo + i] * gram[[i, j]];
        }
    }
    forward_substitute32(&t, &rhs)
}

/// Global triangular-solve formulation, O(L³).
fn matrixform32(b: &Batch32) -> Array2<f32> {
    let l = b.q.nrows();
    let tinv = tinv32(&b.w, &b.beta, 0, l);
    let mut qw = b.q.dot(&b.w.t());
    tril32(&mut qw);
    let mut wk = b.w.dot(&b.k.t());
    strict_tril32(&mut wk);
    let mut logits = b.q.dot(&b.k.t()) - qw.dot(&tinv.dot(&wk));
    logits.mapv_inplace(|v| v * b.scale);
    softmax_attend32(&logits, &b.v)
}

struct Factors32 {
    tinv: Array2<f32>,
    q_adj: Array2<f32>,
    k_adj: Array2<f32>,
    p: Array2<f32>,
}

fn block_factors32(b: &Batch32, lo: usize, bs: usize, d: usize) -> Factors32 {
    let hi = lo + bs;
    let qb = b.q.slice(s![lo..hi, ..]).to_owned();
    let kb = b.k.slice(s![lo..hi, ..]).to_owned();
    let wb = b.w.slice(s![lo..hi, ..]).to_owned();
    let tinv = tinv32(&b.w, &b.beta, lo, bs);
    // P = I − Wᵀ·Tinvᵀ·W
    let p = Array2::eye(d) - wb.t().dot(&tinv.t()).dot(&wb);
    // Qadj = Q − tril(Q·Wᵀ)·Tinv·W
    let mut qw = qb.dot(&wb.t());
    tril32(&mut qw);
    let q_adj = &qb - &qw.dot(&tinv).dot(&wb);
    // Kadj = K − (Tinv·strictLower(W·Kᵀ))ᵀ·W
    let mut wk = wb.dot(&kb.t());
    strict_tril32(&mut wk);
    let k_adj = &kb - &tinv.dot(&wk).t().dot(&wb);
    Factors32 {
        tinv,
        q_adj,
        k_adj,
        p,
    }
}

/// Blockwise scan with online softmax, O(L²·d + L·d²/B).
fn blockwise32(b: &Batch32, bs: usize) -> Array2<f32> {
    let l = b.q.nrows();
    let d = b.q.ncols();
    // pad with identity transitions so every block is full
    let padded = l.div_ceil(bs) * bs;
    let mut bb = Batch32 {
        q: Array2::zeros((padded, d)),
        k: Array2::zeros((padded, d)),
        v: Array2::zeros((padded, d)),
        w: Array2::zeros((padded, d)),
        beta: Array1::ones(padded),
        scale: b.scale,
    };
    bb.q.slice_mut(s![..l, ..]).assign(&b.q);
    bb.k.slice_mut(s![..l, ..]).assign(&b.k);
    bb.v.slice_mut(s![..l, ..]).assign(&b.v);
    bb.w.slice_mut(s![..l, ..]).assign(&b.w);
    bb.beta.slice_mut(s![..l]).assign(&b.beta);
    let nb = padded / bs;
    let factors: Vec<Factors32> = (0..nb).map(|t| block_factors32(&bb, t * bs, bs, d)).collect();

    let mut row_max = Array1::<f32>::from_elem(bs, f32::NEG_INFINITY);
    let mut norm = Array1::<f32>::zeros(bs);
    let mut acc = Array2::<f32>::zeros((bs, d));
    let mut out = Array2::zeros((l, d));
    for i in 0..nb {
        let lo = i * bs;
        row_max.fill(f32::NEG_INFINITY);
        norm.fill(0.0);
        acc.fill(0.0);
        let fold = |logits: &Array2<f32>, vals_lo: usize, valid: &dyn Fn(usize) -> usize,
                        row_max: &mut Array1<f32>, norm: &mut Array1<f32>, acc: &mut Array2<f32>| {
            for r in 0..bs {
                let cols = valid(r);
                if cols == 0 || lo + r >= l {
                    continue;
                }
                let tile_max = (0..cols)
                    .map(|c| logits[[r, c]])
                    .fold(f32::NEG_INFINITY, f32::max);
                let new_max = row_max[r].max(tile_max);
                if new_max > row_max[r] && norm[r] > 0.0 {
                    let rescale = (row_max[r] - new_max).exp();
                    norm[r] *= rescale;
                    acc.row_mut(r).mapv_inplace(|x| x * rescale);
                }
                row_max[r] = new_max;
                for c in 0..cols {
                    let e = (logits[[r, c]] - new_max).exp();
                    norm[r] += e;
                    acc.row_mut(r).scaled_add(e, &bb.v.row(vals_lo + c));
                }
            }
        };
        // diagonal block: scale·tril(QKᵀ − tril(QWᵀ)·Tinv·strictLower(WKᵀ))
        {
            let qb = bb.q.slice(s![lo..lo + bs, ..]);
            let kb = bb.k.slice(s![lo..lo + bs, ..]);
            let wb = bb.w.slice(s![lo..lo + bs, ..]);
            let mut qk = qb.dot(&kb.t());
            let mut qw = qb.dot(&wb.t());
            tril32(&mut qw);
            let mut wk = wb.dot(&kb.t());
            strict_tril32(&mut wk);
            qk -= &qw.dot(&factors[i].tinv).dot(&wk);
            qk.mapv_inplace(|x| x * bb.scale);
            fold(&qk, lo, &|r| (r + 1).min(l.saturating_sub(lo)),
                 &mut row_max, &mut norm, &mut acc);
        }
        // earlier blocks right to left, folding each block's P product
        let mut q_acc = factors[i].q_adj.clone();
        for j in (0..i).rev() {
            let mut logits = q_acc.dot(&factors[j].k_adj.t());
            logits.mapv_inplace(|x| x * bb.scale);
            fold(&logits, j * bs, &|_| bs, &mut row_max, &mut norm, &mut acc);
            q_acc = q_acc.dot(&factors[j].p.t());
        }
        for r in 0..bs {
            let gi = lo + r;
            if gi < l {
                out.row_mut(gi).assign(&acc.row(r).mapv(|x| x / norm[r]));
            }
        }
    }
    out
}

fn vanilla32(b: &Batch32) -> Array2<f32> {
    let mut logits = b.q.dot(&b.k.t());
    logits.mapv_inplace(|x| x * b.scale);
    softmax_attend32(&logits, &b.v)
}

// ---------------- driver ----------------

fn time_once(f: &mut dyn FnMut()) -> u64 {
    let start = Instant::now();
    f();
    start.elapsed().as_nanos() as u64
}

pub fn run(args: &BenchArgs, outdir: &Path) -> Result<Outcome> {
    let ls: Vec<usize> = args
        .l_list
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| PathError::InvalidParameter(format!("bad length '{s}'")))
        })
        .collect::<Result<_>>()?;
    let impls: Vec<&str> = args.impls.split(',').map(|s| s.trim()).collect();
    for name in &impls {
        if !["naive", "matrixform", "blockwise", "vanilla"].contains(name) {
            return Err(PathError::InvalidParameter(format!("unknown impl '{name}'")));
        }
    }
    let f32_mode = match args.precision.as_str() {
        "f64" => false,
        "f32" => true,
        other => {
            return Err(PathError::InvalidParameter(format!(
                "precision must be f64 or f32, got '{other}'"
            )))
        }
    };
    if args.reps == 0 {
        return Err(PathError::InvalidParameter("reps must be ≥ 1".into()));
    }

    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let cfg = BlockConfig::new(args.block)?;
    for &l in &ls {
        let mut rng = seeded_rng(args.seed ^ l as u64);
        let batch = random_batch(&mut rng, l, args.d, false);
        let b32 = Batch32::from_f64(&batch);
        for name in &impls {
            let mut kernel: Box<dyn FnMut()> = if f32_mode {
                match *name {
                    "naive" => Box::new(|| {
                        black_box(naive32(&b32));
                    }),
                    "matrixform" => Box::new(|| {
                        black_box(matrixform32(&b32));
                    }),
                    "blockwise" => Box::new(|| {
                        black_box(blockwise32(&b32, args.block));
                    }),
                    _ => Box::new(|| {
                        black_box(vanilla32(&b32));
                    }),
                }
            } else {
                match *name {
                    "naive" => Box::new(|| {
                        let lg = path_logits_naive(&batch).unwrap();
                        black_box(softmax_attend(&lg, &batch.v));
                    }),
                    "matrixform" => Box::new(|| {
                        let lg = path_logits_matrixform(&batch).unwrap();
                        black_box(softmax_attend(&lg, &batch.v));
                    }),
                    "blockwise" => Box::new(|| {
                        black_box(blockwise_forward(&batch, &cfg).unwrap());
                    }),
                    _ => Box::new(|| {
                        black_box(vanilla_causal_attention(
                            &batch.q,
                            &batch.k,
                            &batch.v,
                            batch.scale,
                        ));
                    }),
                }
            };
            kernel(); // warmup
            let times: Vec<u64> = (0..args.reps).map(|_| time_once(&mut kernel)).collect();
            let (med, mad) = median_mad(times);
            csv.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                name, l, args.d, args.block, args.precision, med, mad
            ));
        }
    }
    print!("{csv}");
    std::fs::create_dir_all(outdir)?;
    let out_path = args.out.clone().unwrap_or_else(|| outdir.join("bench.csv"));
    std::fs::write(&out_path, &csv)?;
    Ok(Outcome {
        passed: true,
        summary: format!(
            "timed impls=[{}] L=[{}] precision={} -> {}",
            impls.join(","),
            args.l_list,
            args.precision,
            out_path.display()
        ),
    })
}
