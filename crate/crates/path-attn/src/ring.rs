//! Single-process simulation of ring-style context parallelism.
//!
//! Each logical device owns a contiguous chunk of the sequence. During a
//! local phase it runs the blockwise scan over its own sub-blocks and
//! assembles chunk-level boundary-adjusted keys, queries folded to the
//! chunk start, and the chunk transition product `P_dev`. Then, over
//! `D−1` hops, the held `(Kadj, V, P_dev, gates)` tuples rotate around
//! the ring; a receiver attends only tuples originating from strictly
//! earlier chunks and folds each `P_dev` into its running queries, which
//! reproduces the blockwise right-to-left scan at chunk granularity.

use ndarray::{s, Array1, Array2};

use crate::attention::AttentionBatch;
use crate::blockwise::{self, BlockConfig, OnlineState};
use crate::error::{PathError, Result};

/// One logical device after its local phase.
pub struct DeviceState {
    pub id: usize,
    /// Chunk queries folded to the chunk start:
    /// row t = `(H_{lo}·…·H_{lo+t})·q_{lo+t}`.
    pub q_acc: Array2<f64>,
    /// Chunk keys folded to the chunk end:
    /// row s = `(H_{lo+s+1}·…·H_{hi−1})ᵀ·k_{lo+s}`.
    pub k_adj: Array2<f64>,
    pub v: Array2<f64>,
    /// Ascending product of the chunk's transitions.
    pub p_dev: Array2<f64>,
    /// Cumulative log-gate values at the chunk's positions (global
    /// inclusive prefix restricted to the chunk); `None` when ungated.
    pub gate_prefix: Option<Array1<f64>>,
    pub(crate) stats: OnlineState,
}

/// One ring send, as recorded in the transcript.
#[derive(Debug, Clone)]
pub struct RingMessage {
    pub hop: usize,
    /// Device whose chunk the payload describes.
    pub src: usize,
    pub dst: usize,
    pub k_adj: Array2<f64>,
    pub v: Array2<f64>,
    pub p_dev: Array2<f64>,
    pub gate_prefix: Option<Array1<f64>>,
}

impl RingMessage {
    /// Scalars transmitted: Kadj + V + P_dev + gate metadata.
    pub fn scalar_count(&self) -> usize {
        self.k_adj.len() + self.v.len() + self.p_dev.len() + self.gate_prefix.as_ref().map_or(0, |g| g.len())
    }
}

/// Render the message log one line per send.
pub fn transcript_lines(log: &[RingMessage]) -> String {
    let mut out = String::new();
    for m in log {
        let gates = m.gate_prefix.as_ref().map_or(0, |g| g.len());
        out.push_str(&format!(
            "hop={} src={} dst={} kadj={} v={} p={} gates={} total={}\n",
            m.hop,
            m.src,
            m.dst,
            m.k_adj.len(),
            m.v.len(),
            m.p_dev.len(),
            gates,
            m.scalar_count()
        ));
    }
    out
}

fn check_devices(l: usize, num_devices: usize) -> Result<()> {
    if num_devices < 1 {
        return Err(PathError::InvalidParameter(
            "need at least one device".into(),
        ));
    }
    if num_devices > l.max(1) {
        return Err(PathError::InvalidParameter(format!(
            "{num_devices} devices exceed sequence length {l}"
        )));
    }
    Ok(())
}

/// Local phase: pad, split into `num_devices` chunks, run each device's
/// in-chunk blockwise scan, and assemble the chunk-level tuple.
/// Returns the device states plus the real (unpadded) length and the
/// padded batch for value access.
pub fn compute_device_states(
    batch: &AttentionBatch,
    num_devices: usize,
    cfg: &BlockConfig,
) -> Result<(Vec<DeviceState>, usize, usize)> {
    let l = batch.len();
    check_devices(l, num_devices)?;
    let b = cfg.block_size;
    // Chunk length: ceil(L/D) rounded up to a sub-block multiple, so the
    // in-chunk scan never straddles a chunk boundary.
    let chunk_len = l.div_ceil(num_devices).div_ceil(b) * b;
    let (padded, real_len) = blockwise::pad_batch(batch, chunk_len * num_devices)?;
    let d = padded.dim();
    let factors = blockwise::compute_block_factors(&padded, cfg)?;
    let sub_per_chunk = chunk_len / b;
    let logf = padded.f.as_ref().map(blockwise::log_gate_prefix);

    let mut devices = Vec::with_capacity(num_devices);
    for p in 0..num_devices {
        let lo = p * chunk_len;
        let mut stats = OnlineState::new(chunk_len, d);
        let mut q_acc = Array2::zeros((chunk_len, d));
        for si in 0..sub_per_chunk {
            let g = p * sub_per_chunk + si;
            let glo = g * b;
            let rt0 = si * b;

            // diagonal tile, embedded at the sub-block's chunk rows
            let mut diag = blockwise::diagonal_block_logits(&factors[g], &padded, cfg, g)?;
            if let Some(c) = &logf {
                for t in 0..b {
                    for scol in 0..=t {
                        diag[[t, scol]] += c[glo + t] - c[glo + scol];
                    }
                }
            }
            let mut tile = Array2::zeros((chunk_len, b));
            tile.slice_mut(s![rt0..rt0 + b, ..]).assign(&diag);
            stats.update(&tile, &padded.v.slice(s![glo..glo + b, ..]), |t| {
                if (rt0..rt0 + b).contains(&t) {
                    t - rt0 + 1
                } else {
                    0
                }
            });

            // in-chunk right-to-left scan over earlier sub-blocks
            let mut q_sub = factors[g].q_adj.clone();
            for sj in (0..si).rev() {
                let gj = p * sub_per_chunk + sj;
                let jlo = gj * b;
                let mut logits = q_sub.dot(&factors[gj].k_adj.t());
                logits *= padded.scale;
                if let Some(c) = &logf {
                    for t in 0..b {
                        for scol in 0..b {
                            logits[[t, scol]] += c[glo + t] - c[jlo + scol];
                        }
                    }
                }
                let mut tile = Array2::zeros((chunk_len, b));
                tile.slice_mut(s![rt0..rt0 + b, ..]).assign(&logits);
                stats.update(&tile, &padded.v.slice(s![jlo..jlo + b, ..]), |t| {
                    if (rt0..rt0 + b).contains(&t) {
                        b
                    } else {
                        0
                    }
                });
                q_sub = q_sub.dot(&factors[gj].p.t());
            }
            // q_sub is now folded through every earlier in-chunk sub-block,
            // i.e. down to the chunk start.
            q_acc.slice_mut(s![rt0..rt0 + b, ..]).assign(&q_sub);
        }

        // chunk-level Kadj: fold each sub-block's Kadj through the later
        // sub-blocks' transition products (suffix accumulation)
        let mut k_adj = Array2::zeros((chunk_len, d));
        let mut suffix = Array2::eye(d);
        for si in (0..sub_per_chunk).rev() {
            let g = p * sub_per_chunk + si;
            let folded = factors[g].k_adj.dot(&suffix);
            k_adj.slice_mut(s![si * b..(si + 1) * b, ..]).assign(&folded);
            suffix = factors[g].p.dot(&suffix);
        }
        // after the loop, suffix is the full ascending chunk product
        let p_dev = suffix;

        let gate_prefix = logf
            .as_ref()
            .map(|c| c.slice(s![lo..lo + chunk_len]).to_owned());
        devices.push(DeviceState {
            id: p,
            q_acc,
            k_adj,
            v: padded.v.slice(s![lo..lo + chunk_len, ..]).to_owned(),
            p_dev,
            gate_prefix,
            stats,
        });
    }
    Ok((devices, real_len, chunk_len))
}

fn ring_run(
    batch: &AttentionBatch,
    num_devices: usize,
    cfg: &BlockConfig,
) -> Result<(Array2<f64>, Vec<RingMessage>)> {
    let (mut devices, real_len, chunk_len) = compute_device_states(batch, num_devices, cfg)?;
    let d = batch.dim();
    let mut log = Vec::new();

    // Held tuples start as each device's own chunk and rotate one step per
    // hop; receivers attend only tuples from strictly earlier chunks.
    let mut held: Vec<RingMessage> = devices
        .iter()
        .map(|dev| RingMessage {
            hop: 0,
            src: dev.id,
            dst: dev.id,
            k_adj: dev.k_adj.clone(),
            v: dev.v.clone(),
            p_dev: dev.p_dev.clone(),
            gate_prefix: dev.gate_prefix.clone(),
        })
        .collect();

    for hop in 1..num_devices {
        // every device sends its held tuple to the next device
        let mut next: Vec<RingMessage> = Vec::with_capacity(num_devices);
        for p in 0..num_devices {
            let prev = (p + num_devices - 1) % num_devices;
            let mut msg = held[prev].clone();
            msg.hop = hop;
            msg.dst = p;
            next.push(msg);
        }
        held = next;
        for p in 0..num_devices {
            let msg = &held[p];
            log.push(msg.clone());
            if msg.src >= p {
                continue; // later chunk circulating; causally invisible
            }
            let dev = &mut devices[p];
            let mut logits = dev.q_acc.dot(&msg.k_adj.t());
            logits *= batch.scale;
            if let (Some(c_row), Some(c_col)) = (&dev.gate_prefix, &msg.gate_prefix) {
                for t in 0..chunk_len {
                    for scol in 0..chunk_len {
                        logits[[t, scol]] += c_row[t] - c_col[scol];
                    }
                }
            }
            dev.stats.update(&logits, &msg.v.view(), |_| chunk_len);
            dev.q_acc = dev.q_acc.dot(&msg.p_dev.t());
        }
    }

    let mut out = Array2::zeros((num_devices * chunk_len, d));
    for dev in &devices {
        let lo = dev.id * chunk_len;
        out.slice_mut(s![lo..lo + chunk_len, ..])
            .assign(&dev.stats.finish());
    }
    Ok((out.slice(s![..real_len, ..]).to_owned(), log))
}

/// Forward pass through the simulated ring.
pub fn ring_forward(
    batch: &AttentionBatch,
    num_devices: usize,
    cfg: &BlockConfig,
) -> Result<Array2<f64>> {
    Ok(ring_run(batch, num_devices, cfg)?.0)
}

/// The ordered message log of a full ring execution.
pub fn ring_transcript(
    batch: &AttentionBatch,
    num_devices: usize,
    cfg: &BlockConfig,
) -> Result<Vec<RingMessage>> {
    Ok(ring_run(batch, num_devices, cfg)?.1)
}
