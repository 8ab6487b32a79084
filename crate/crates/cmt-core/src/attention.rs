//! Multi-head self-attention over spatial tokens, in two variants: the
//! dense baseline (MHSA) and the two-level windowed form (MMSA) that first
//! attends inside g x g windows, then globally on a g'-downsampled map.
//! Both come with an analytic MAC cost model and instrumented measurement.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{PoolMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    /// Level-1 window grid.
    pub g: usize,
    /// Level-2 downsample factor.
    pub g_prime: usize,
    /// Max-pool mixing coefficient in the level-2 pooling.
    pub pool_alpha: f64,
    /// Average-pool mixing coefficient.
    pub pool_beta: f64,
    /// Keep the leading 1/2 in the pooled mix (the printed form); setting
    /// this false exposes the un-attenuated variant for ablation.
    pub pool_half: bool,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize, g: usize, g_prime: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            channels,
            heads,
            g,
            g_prime,
            pool_alpha: 0.3,
            pool_beta: 0.7,
            pool_half: true,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide channels {}",
                self.heads, self.channels
            )));
        }
        if self.g == 0 || self.g_prime == 0 {
            return Err(Error::config("grid sizes must be positive"));
        }
        if !(self.pool_alpha > 0.0 && self.pool_beta > 0.0) {
            return Err(Error::config("pool mix coefficients must be positive"));
        }
        if (self.pool_alpha + self.pool_beta - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!(
                "pool mix must sum to 1, got {} + {}",
                self.pool_alpha, self.pool_beta
            )));
        }
        Ok(())
    }

    pub fn head_width(&self) -> usize {
        self.channels / self.heads
    }

    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        if h % self.g != 0 || w % self.g != 0 {
            return Err(Error::config(format!(
                "grid {} does not divide feature map {}x{}",
                self.g, h, w
            )));
        }
        if h % self.g_prime != 0 || w % self.g_prime != 0 {
            return Err(Error::config(format!(
                "downsample {} does not divide feature map {}x{}",
                self.g_prime, h, w
            )));
        }
        Ok(())
    }
}

fn random_square(c: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (1.0 / c as f64).sqrt();
    Tensor::from_fn(&[c, c], |_| rng.gen_range(-bound..bound))
}

/// Projection matrices for the dense baseline.
#[derive(Debug, Clone)]
pub struct MhsaWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wp: Tensor,
}

impl MhsaWeights {
    pub fn random(c: usize, rng: &mut ChaCha8Rng) -> Self {
        MhsaWeights {
            wq: random_square(c, rng),
            wk: random_square(c, rng),
            wv: random_square(c, rng),
            wp: random_square(c, rng),
        }
    }
}

/// Per-level q/k/v projections.
#[derive(Debug, Clone)]
pub struct LevelWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl LevelWeights {
    pub fn random(c: usize, rng: &mut ChaCha8Rng) -> Self {
        LevelWeights {
            wq: random_square(c, rng),
            wk: random_square(c, rng),
            wv: random_square(c, rng),
        }
    }
}

/// Projections for the two-level variant plus the back-to-back fusion pair.
#[derive(Debug, Clone)]
pub struct MmsaWeights {
    pub level1: LevelWeights,
    pub level2: LevelWeights,
    pub wm: Tensor,
    pub wn: Tensor,
}

impl MmsaWeights {
    pub fn random(c: usize, rng: &mut ChaCha8Rng) -> Self {
        MmsaWeights {
            level1: LevelWeights::random(c, rng),
            level2: LevelWeights::random(c, rng),
            wm: random_square(c, rng),
            wn: random_square(c, rng),
        }
    }
}

/// Tape-bound handles for [`MhsaWeights`].
#[derive(Debug, Clone, Copy)]
pub struct MhsaVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wp: Var,
}

impl MhsaVars {
    pub fn bind(tape: &Tape, w: &MhsaWeights) -> Result<Self> {
        Ok(MhsaVars {
            wq: tape.leaf(w.wq.clone())?,
            wk: tape.leaf(w.wk.clone())?,
            wv: tape.leaf(w.wv.clone())?,
            wp: tape.leaf(w.wp.clone())?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl LevelVars {
    pub fn bind(tape: &Tape, w: &LevelWeights) -> Result<Self> {
        Ok(LevelVars {
            wq: tape.leaf(w.wq.clone())?,
            wk: tape.leaf(w.wk.clone())?,
            wv: tape.leaf(w.wv.clone())?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MmsaVars {
    pub level1: LevelVars,
    pub level2: LevelVars,
    pub wm: Var,
    pub wn: Var,
}

impl MmsaVars {
    pub fn bind(tape: &Tape, w: &MmsaWeights) -> Result<Self> {
        Ok(MmsaVars {
            level1: LevelVars::bind(tape, &w.level1)?,
            level2: LevelVars::bind(tape, &w.level2)?,
            wm: tape.leaf(w.wm.clone())?,
            wn: tape.leaf(w.wn.clone())?,
        })
    }
}

/// Scaled-dot-product attention over tokens `[.., t, c]`, split into heads
/// of width `c / heads`. Returns `[.., t, c]` with heads re-concatenated.
/// No output projection and no residual here.
fn attention_core(tape: &Tape, tokens: Var, lv: &LevelVars, heads: usize) -> Result<Var> {
    let shape = tape.shape(tokens);
    let rank = shape.len();
    let (t, c) = (shape[rank - 2], shape[rank - 1]);
    if c % heads != 0 {
        return Err(Error::config(format!(
            "heads {} must divide channels {}",
            heads, c
        )));
    }
    let dh = c / heads;
    let batch = &shape[..rank - 2];

    let q = tape.matmul(tokens, lv.wq)?;
    let k = tape.matmul(tokens, lv.wk)?;
    let v = tape.matmul(tokens, lv.wv)?;

    // [.., t, c] -> [.., heads, t, dh]
    let split = |x: Var| -> Result<Var> {
        let mut s = batch.to_vec();
        s.extend([t, heads, dh]);
        let r = tape.reshape(x, &s)?;
        let k = batch.len();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.extend([k + 1, k, k + 2]);
        tape.permute(r, &perm)
    };
    let qh = split(q)?;
    let kh = split(k)?;
    let vh = split(v)?;

    // K^T over the last two axes
    let hrank = batch.len() + 3;
    let mut tperm: Vec<usize> = (0..hrank).collect();
    tperm.swap(hrank - 1, hrank - 2);
    let kt = tape.permute(kh, &tperm)?;

    let scores = tape.matmul(qh, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let att = tape.softmax(scaled, hrank - 1)?;
    let out = tape.matmul(att, vh)?;

    // [.., heads, t, dh] -> [.., t, c]
    let k = batch.len();
    let mut perm: Vec<usize> = (0..k).collect();
    perm.extend([k + 1, k, k + 2]);
    let merged = tape.permute(out, &perm)?;
    let mut s = batch.to_vec();
    s.extend([t, c]);
    tape.reshape(merged, &s)
}

fn to_tokens(tape: &Tape, x: Var, c: usize, hw: usize) -> Result<Var> {
    let flat = tape.reshape(x, &[c, hw])?;
    tape.permute(flat, &[1, 0])
}

fn from_tokens(tape: &Tape, tokens: Var, c: usize, h: usize, w: usize) -> Result<Var> {
    let back = tape.permute(tokens, &[1, 0])?;
    tape.reshape(back, &[c, h, w])
}

/// Dense baseline: global attention over all h*w spatial tokens, output
/// projection, residual connection.
pub fn mhsa_forward_var(
    tape: &Tape,
    x: Var,
    w: &MhsaVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let shape = tape.shape(x);
    let [c, h, wd] = three(&shape)?;
    if c != cfg.channels {
        return Err(Error::config(format!(
            "input channels {} vs config {}",
            c, cfg.channels
        )));
    }
    let tokens = to_tokens(tape, x, c, h * wd)?;
    let lv = LevelVars {
        wq: w.wq,
        wk: w.wk,
        wv: w.wv,
    };
    let a = attention_core(tape, tokens, &lv, cfg.heads)?;
    let projected = tape.matmul(a, w.wp)?;
    let with_res = tape.add(projected, tokens)?;
    from_tokens(tape, with_res, c, h, wd)
}

/// Level 1: attention inside non-overlapping g x g windows, plus residual.
pub fn mmsa_level1_var(
    tape: &Tape,
    x: Var,
    w: &MmsaVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let shape = tape.shape(x);
    let [c, h, wd] = three(&shape)?;
    let g = cfg.g;
    if h % g != 0 || wd % g != 0 {
        return Err(Error::config(format!(
            "grid {} does not divide feature map {}x{}",
            g, h, wd
        )));
    }
    let (hb, wb) = (h / g, wd / g);
    let nw = hb * wb;

    let blocked = tape.reshape(x, &[c, hb, g, wb, g])?;
    let windows = tape.permute(blocked, &[1, 3, 2, 4, 0])?; // [hb, wb, g, g, c]
    let tokens = tape.reshape(windows, &[nw, g * g, c])?;

    let att = attention_core(tape, tokens, &w.level1, cfg.heads)?;

    let unblock = tape.reshape(att, &[hb, wb, g, g, c])?;
    let restored = tape.permute(unblock, &[4, 0, 2, 1, 3])?; // [c, hb, g, wb, g]
    let full = tape.reshape(restored, &[c, h, wd])?;
    tape.add(full, x)
}

/// Level 2: mixed max/average pooling by g', global attention over the
/// downsampled tokens, nearest-neighbor upsample back to full resolution.
pub fn mmsa_level2_var(
    tape: &Tape,
    att1: Var,
    w: &MmsaVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let shape = tape.shape(att1);
    let [c, h, wd] = three(&shape)?;
    let gp = cfg.g_prime;
    if h % gp != 0 || wd % gp != 0 {
        return Err(Error::config(format!(
            "downsample {} does not divide feature map {}x{}",
            gp, h, wd
        )));
    }
    let mp = tape.pool2d(att1, gp, gp, PoolMode::Max)?;
    let ap = tape.pool2d(att1, gp, gp, PoolMode::Average)?;
    let mixed = tape.add(
        tape.scale(mp, cfg.pool_alpha)?,
        tape.scale(ap, cfg.pool_beta)?,
    )?;
    let pooled = if cfg.pool_half {
        tape.scale(mixed, 0.5)?
    } else {
        mixed
    };

    let (h2, w2) = (h / gp, wd / gp);
    let tokens = to_tokens(tape, pooled, c, h2 * w2)?;
    let att = attention_core(tape, tokens, &w.level2, cfg.heads)?;
    let map = from_tokens(tape, att, c, h2, w2)?;
    tape.upsample_nearest(map, gp)
}

/// Full two-level attention: `(Att1 + Att2) Wm Wn + x`.
pub fn mmsa_forward_var(
    tape: &Tape,
    x: Var,
    w: &MmsaVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    let shape = tape.shape(x);
    let [c, h, wd] = three(&shape)?;
    let att1 = mmsa_level1_var(tape, x, w, cfg)?;
    let att2 = mmsa_level2_var(tape, att1, w, cfg)?;
    let summed = tape.add(att1, att2)?;
    let tokens = to_tokens(tape, summed, c, h * wd)?;
    let m = tape.matmul(tokens, w.wm)?;
    let n = tape.matmul(m, w.wn)?;
    let back = from_tokens(tape, n, c, h, wd)?;
    tape.add(back, x)
}

fn three(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [a, b, c] => Ok([*a, *b, *c]),
        s => Err(Error::dim(format!("expected [c, h, w], got {:?}", s))),
    }
}

/// Convenience wrapper: run the dense baseline on plain tensors.
pub fn mhsa_forward(x: &Tensor, w: &MhsaWeights, cfg: &AttentionConfig) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let wv = MhsaVars::bind(&tape, w)?;
    let y = mhsa_forward_var(&tape, xv, &wv, cfg)?;
    Ok(tape.value(y))
}

/// Convenience wrapper: run the two-level attention on plain tensors.
pub fn mmsa_forward(x: &Tensor, w: &MmsaWeights, cfg: &AttentionConfig) -> Result<Tensor> {
    let tape = Tape::new();
    let xv = tape.leaf(x.clone())?;
    let wv = MmsaVars::bind(&tape, w)?;
    let y = mmsa_forward_var(&tape, xv, &wv, cfg)?;
    Ok(tape.value(y))
}

// ---- cost model ------------------------------------------------------------

/// Analytic dense-attention MAC count: `2 c h^2 w^2 + 3 h w c^2`.
pub fn mhsa_analytic_cost(c: u64, h: u64, w: u64) -> u64 {
    2 * c * h * h * w * w + 3 * h * w * c * c
}

/// Analytic two-level MAC count as printed:
/// `c h w (2 g'^2 + 4c) + (2 c h w / g'^2)(c + h w)`.
pub fn mmsa_analytic_cost(c: u64, h: u64, w: u64, g_prime: u64) -> u64 {
    let gp2 = g_prime * g_prime;
    c * h * w * (2 * gp2 + 4 * c) + (2 * c * h * w / gp2) * (c + h * w)
}

/// Variant with the level-1 grid g in the first term instead of g'; the two
/// coincide when g = g'.
pub fn mmsa_analytic_cost_grid(c: u64, h: u64, w: u64, g: u64, g_prime: u64) -> u64 {
    let gp2 = g_prime * g_prime;
    c * h * w * (2 * g * g + 4 * c) + (2 * c * h * w / gp2) * (c + h * w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Mhsa,
    Mmsa,
}

/// Measured vs analytic cost of one attention forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub kind: AttentionKind,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub g: usize,
    pub g_prime: usize,
    pub heads: usize,
    pub analytic_macs: u64,
    pub measured_macs: u64,
    pub wall_ns_median: u64,
    pub trials: usize,
}

/// Run `trials` seeded forward passes under a fresh MAC scope per run and a
/// monotonic clock; MAC counts must agree across trials.
pub fn measure_cost(
    kind: AttentionKind,
    cfg: &AttentionConfig,
    h: usize,
    w: usize,
    trials: usize,
    seed: u64,
) -> Result<CostReport> {
    if trials < 1 {
        return Err(Error::Parameter("trials must be >= 1".into()));
    }
    cfg.check()?;
    cfg.check_spatial(h, w)?;
    let c = cfg.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0));
    let mhsa_w = MhsaWeights::random(c, &mut rng);
    let mmsa_w = MmsaWeights::random(c, &mut rng);

    let mut macs: Option<u64> = None;
    let mut times = Vec::with_capacity(trials);
    for _ in 0..trials {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone())?;
        let start = Instant::now();
        match kind {
            AttentionKind::Mhsa => {
                let wv = MhsaVars::bind(&tape, &mhsa_w)?;
                mhsa_forward_var(&tape, xv, &wv, cfg)?;
            }
            AttentionKind::Mmsa => {
                let wv = MmsaVars::bind(&tape, &mmsa_w)?;
                mmsa_forward_var(&tape, xv, &wv, cfg)?;
            }
        }
        times.push(start.elapsed().as_nanos() as u64);
        let counted = tape.macs().total();
        match macs {
            None => macs = Some(counted),
            Some(prev) => {
                debug_assert_eq!(prev, counted, "MAC count must be deterministic");
            }
        }
    }
    times.sort_unstable();
    let analytic = match kind {
        AttentionKind::Mhsa => mhsa_analytic_cost(c as u64, h as u64, w as u64),
        AttentionKind::Mmsa => {
            mmsa_analytic_cost(c as u64, h as u64, w as u64, cfg.g_prime as u64)
        }
    };
    Ok(CostReport {
        kind,
        c,
        h,
        w,
        g: cfg.g,
        g_prime: cfg.g_prime,
        heads: cfg.heads,
        analytic_macs: analytic,
        measured_macs: macs.unwrap(),
        wall_ns_median: times[times.len() / 2],
        trials,
    })
}
