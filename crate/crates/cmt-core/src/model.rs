//! The full classifier: conv feature extractor (CIFE) -> feature embedding
//! -> N encoder blocks around the two-level attention -> sigmoid multi-label
//! head. Parameters live in a named set so training, checkpointing, and
//! gradient extraction all key off the same names.

use std::collections::BTreeMap;
use std::io::Read as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{mmsa_forward_var, AttentionConfig, LevelVars, MmsaVars};
use crate::error::{Error, Result};
use crate::tape::{PoolMode, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

// ---- configuration ---------------------------------------------------------

/// Conv front-end: stem conv (stride 2) -> max pool (stride 2) -> residual
/// bottleneck stages. The reduced default keeps one block per stage; the
/// full-depth schedule would repeat them 3/4/23 times.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CifeConfig {
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_repeats: Vec<usize>,
    pub stage_strides: Vec<usize>,
}

impl Default for CifeConfig {
    fn default() -> Self {
        CifeConfig {
            stem_channels: 8,
            stage_channels: vec![8, 16, 32],
            stage_repeats: vec![1, 1, 1],
            stage_strides: vec![1, 2, 2],
        }
    }
}

impl CifeConfig {
    /// Toy schedule with total stride 4 and 8 output channels.
    pub fn toy() -> Self {
        CifeConfig {
            stem_channels: 8,
            stage_channels: vec![8],
            stage_repeats: vec![1],
            stage_strides: vec![1],
        }
    }

    pub fn check(&self) -> Result<()> {
        let n = self.stage_channels.len();
        if n == 0 || self.stage_repeats.len() != n || self.stage_strides.len() != n {
            return Err(Error::config(format!(
                "stage lists must be nonempty and equal length: {}/{}/{}",
                n,
                self.stage_repeats.len(),
                self.stage_strides.len()
            )));
        }
        if self.stem_channels == 0
            || self.stage_channels.iter().any(|&c| c == 0)
            || self.stage_repeats.iter().any(|&r| r == 0)
            || self.stage_strides.iter().any(|&s| s == 0)
        {
            return Err(Error::config("zero stem/stage parameter"));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }

    /// Exact output spatial dims for an h x w input, before running anything.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.check()?;
        // stem: 3x3 conv, stride 2, pad 1
        let conv = |d: usize, s: usize| (d + 2 - 3) / s + 1;
        let (mut h, mut w) = (conv(h, 2), conv(w, 2));
        // 2x2 max pool, stride 2
        if h < 2 || w < 2 {
            return Err(Error::config(format!("input too small after stem: {}x{}", h, w)));
        }
        h = (h - 2) / 2 + 1;
        w = (w - 2) / 2 + 1;
        for (&stride, &reps) in self.stage_strides.iter().zip(&self.stage_repeats) {
            for rep in 0..reps {
                let s = if rep == 0 { stride } else { 1 };
                h = conv(h, s);
                w = conv(w, s);
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::config("feature map collapsed to zero size"));
        }
        Ok((h, w))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmtConfig {
    pub cife: CifeConfig,
    /// Number of encoder blocks.
    pub encoders: usize,
    pub attention: AttentionConfig,
    pub ffn_hidden: usize,
    /// Repeats of the feed-forward + add&norm pair inside one encoder.
    pub ffn_repeats: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl CmtConfig {
    pub fn new(cife: CifeConfig, encoders: usize, attention: AttentionConfig) -> Result<Self> {
        let cfg = CmtConfig {
            ffn_hidden: 2 * cife.out_channels(),
            cife,
            encoders,
            attention,
            ffn_repeats: 1,
            dropout: 0.2,
            classes: 4,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn toy() -> Self {
        let cife = CifeConfig::toy();
        let attention = AttentionConfig::new(cife.out_channels(), 2, 2, 2).unwrap();
        CmtConfig {
            ffn_hidden: 16,
            cife,
            encoders: 1,
            attention,
            ffn_repeats: 1,
            dropout: 0.2,
            classes: 4,
        }
    }

    pub fn check(&self) -> Result<()> {
        self.cife.check()?;
        self.attention.check()?;
        if self.encoders == 0 {
            return Err(Error::config("need at least one encoder"));
        }
        if self.ffn_repeats == 0 {
            return Err(Error::config("ffn_repeats must be >= 1"));
        }
        if self.classes == 0 {
            return Err(Error::config("need at least one class"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.attention.channels != self.cife.out_channels() {
            return Err(Error::config(format!(
                "attention channels {} vs CIFE output {}",
                self.attention.channels,
                self.cife.out_channels()
            )));
        }
        Ok(())
    }

    pub fn digest(&self) -> Result<[u8; 32]> {
        let json = serde_json::to_vec(self)?;
        let mut hasher = Sha256::new();
        hasher.update(&json);
        Ok(hasher.finalize().into())
    }
}

// ---- parameters ------------------------------------------------------------

/// Named parameter tensors, ordered by name for deterministic traversal.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter '{}'", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Register every parameter as a tape leaf.
    pub fn bind(&self, tape: &Tape) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.map {
            vars.insert(name.clone(), tape.leaf(t.clone())?);
        }
        Ok(BoundParams { vars })
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing bound parameter '{}'", name)))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Seeded per-name generator so initialization is independent of creation
/// order.
fn name_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(digest[..8].try_into().unwrap()))
}

fn uniform_init(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = name_rng(seed, name);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

fn conv_init(params: &mut ParamSet, name: &str, cout: usize, cin: usize, k: usize, seed: u64) {
    let t = uniform_init(&[cout, cin, k, k], cin * k * k, seed, name);
    params.insert(name, t);
}

fn linear_init(params: &mut ParamSet, name: &str, rows: usize, cols: usize, seed: u64) {
    let t = uniform_init(&[rows, cols], rows, seed, name);
    params.insert(name, t);
}

fn bottleneck_mid(cout: usize) -> usize {
    (cout / 4).max(1)
}

// ---- the model ---------------------------------------------------------------

pub struct CmtModel {
    pub config: CmtConfig,
    pub params: ParamSet,
}

/// Handles produced by a recorded forward pass.
pub struct CmtOutputs {
    pub cife_features: Var,
    pub logits: Var,
    pub probs: Var,
}

impl CmtModel {
    pub fn new(config: CmtConfig, seed: u64) -> Result<Self> {
        config.check()?;
        let mut params = ParamSet::default();
        init_cife(&mut params, &config.cife, seed);
        let c = config.cife.out_channels();
        for e in 0..config.encoders {
            init_encoder(&mut params, &format!("enc{}", e), c, config.ffn_hidden, seed);
        }
        let k = config.classes;
        linear_init(&mut params, "head.w2", c, c, seed);
        linear_init(&mut params, "head.w1", c, k, seed);
        params.insert("head.b", Tensor::zeros(&[k]));
        Ok(CmtModel { config, params })
    }

    /// Full pipeline on a recorded tape. `rng` drives dropout in train mode.
    pub fn forward(
        &self,
        tape: &Tape,
        bp: &BoundParams,
        image: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<CmtOutputs> {
        let feat = cife_forward(tape, image, bp, &self.config.cife)?;
        let mut x = feat;
        for e in 0..self.config.encoders {
            x = encoder_forward(tape, x, bp, &format!("enc{}", e), &self.config, mode, rng)?;
        }
        let (logits, probs) = head_forward(tape, x, bp)?;
        Ok(CmtOutputs {
            cife_features: feat,
            logits,
            probs,
        })
    }

    /// Eval-mode probabilities for a plain image tensor.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bp = self.params.bind(&tape)?;
        let img = tape.leaf(image.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&tape, &bp, img, Mode::Eval, &mut rng)?;
        Ok(tape.value(out.probs).into_data())
    }
}

fn init_cife(params: &mut ParamSet, cfg: &CifeConfig, seed: u64) {
    conv_init(params, "cife.stem.conv", cfg.stem_channels, 3, 3, seed);
    let mut cin = cfg.stem_channels;
    for (i, (&cout, &reps)) in cfg.stage_channels.iter().zip(&cfg.stage_repeats).enumerate() {
        for j in 0..reps {
            let mid = bottleneck_mid(cout);
            let p = format!("cife.s{}.b{}", i, j);
            conv_init(params, &format!("{}.conv1", p), mid, cin, 1, seed);
            conv_init(params, &format!("{}.conv2", p), mid, mid, 3, seed);
            conv_init(params, &format!("{}.conv3", p), cout, mid, 1, seed);
            let stride = if j == 0 { cfg.stage_strides[i] } else { 1 };
            if cin != cout || stride != 1 {
                conv_init(params, &format!("{}.proj", p), cout, cin, 1, seed);
            }
            cin = cout;
        }
    }
    params.insert("cife.out_scale", Tensor::ones(&[cfg.out_channels()]));
}

fn init_encoder(params: &mut ParamSet, prefix: &str, c: usize, hidden: usize, seed: u64) {
    for level in ["l1", "l2"] {
        for proj in ["wq", "wk", "wv"] {
            linear_init(params, &format!("{}.att.{}.{}", prefix, level, proj), c, c, seed);
        }
    }
    linear_init(params, &format!("{}.att.wm", prefix), c, c, seed);
    linear_init(params, &format!("{}.att.wn", prefix), c, c, seed);
    for ln in ["ln1", "ln2"] {
        params.insert(format!("{}.{}.gamma", prefix, ln), Tensor::ones(&[c]));
        params.insert(format!("{}.{}.beta", prefix, ln), Tensor::zeros(&[c]));
    }
    linear_init(params, &format!("{}.ffn.w1", prefix), c, hidden, seed);
    params.insert(format!("{}.ffn.b1", prefix), Tensor::zeros(&[hidden]));
    linear_init(params, &format!("{}.ffn.w2", prefix), hidden, c, seed);
    params.insert(format!("{}.ffn.b2", prefix), Tensor::zeros(&[c]));
}

/// Stem -> pool -> bottleneck stages -> per-channel output scale.
pub fn cife_forward(tape: &Tape, image: Var, bp: &BoundParams, cfg: &CifeConfig) -> Result<Var> {
    let shape = tape.shape(image);
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::config(format!("CIFE expects [3, h, w], got {:?}", shape)));
    }
    let mut x = tape.conv2d(image, bp.var("cife.stem.conv")?, 2, 1)?;
    x = tape.relu(x)?;
    x = tape.pool2d(x, 2, 2, PoolMode::Max)?;
    let mut cin = cfg.stem_channels;
    for (i, (&cout, &reps)) in cfg.stage_channels.iter().zip(&cfg.stage_repeats).enumerate() {
        for j in 0..reps {
            let stride = if j == 0 { cfg.stage_strides[i] } else { 1 };
            x = bottleneck_forward(tape, x, bp, &format!("cife.s{}.b{}", i, j), cin, cout, stride)?;
            cin = cout;
        }
    }
    tape.scale_channels(x, bp.var("cife.out_scale")?)
}

fn bottleneck_forward(
    tape: &Tape,
    x: Var,
    bp: &BoundParams,
    prefix: &str,
    cin: usize,
    cout: usize,
    stride: usize,
) -> Result<Var> {
    let mut y = tape.conv2d(x, bp.var(&format!("{}.conv1", prefix))?, 1, 0)?;
    y = tape.relu(y)?;
    y = tape.conv2d(y, bp.var(&format!("{}.conv2", prefix))?, stride, 1)?;
    y = tape.relu(y)?;
    y = tape.conv2d(y, bp.var(&format!("{}.conv3", prefix))?, 1, 0)?;
    let shortcut = if cin != cout || stride != 1 {
        tape.conv2d(x, bp.var(&format!("{}.proj", prefix))?, stride, 0)?
    } else {
        x
    };
    tape.relu(tape.add(y, shortcut)?)
}

/// Bit-preserving reshape `[c, h, w] -> [c, h*w]`.
pub fn to_embedding(fmap: &Tensor) -> Result<Tensor> {
    let shape = fmap.shape();
    if shape.len() != 3 {
        return Err(Error::dim(format!("to_embedding: shape {:?}", shape)));
    }
    fmap.reshaped(&[shape[0], shape[1] * shape[2]])
}

/// One encoder block: attention then feed-forward, each wrapped in
/// residual-add and channel layer-norm.
pub fn encoder_forward(
    tape: &Tape,
    x: Var,
    bp: &BoundParams,
    prefix: &str,
    cfg: &CmtConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let att = MmsaVars {
        level1: LevelVars {
            wq: bp.var(&format!("{}.att.l1.wq", prefix))?,
            wk: bp.var(&format!("{}.att.l1.wk", prefix))?,
            wv: bp.var(&format!("{}.att.l1.wv", prefix))?,
        },
        level2: LevelVars {
            wq: bp.var(&format!("{}.att.l2.wq", prefix))?,
            wk: bp.var(&format!("{}.att.l2.wk", prefix))?,
            wv: bp.var(&format!("{}.att.l2.wv", prefix))?,
        },
        wm: bp.var(&format!("{}.att.wm", prefix))?,
        wn: bp.var(&format!("{}.att.wn", prefix))?,
    };
    let attended = mmsa_forward_var(tape, x, &att, &cfg.attention)?;
    let mut y = tape.layer_norm(
        tape.add(x, attended)?,
        bp.var(&format!("{}.ln1.gamma", prefix))?,
        bp.var(&format!("{}.ln1.beta", prefix))?,
    )?;
    for _ in 0..cfg.ffn_repeats {
        let f = ffn_forward(tape, y, bp, prefix, cfg, mode, rng)?;
        y = tape.layer_norm(
            tape.add(y, f)?,
            bp.var(&format!("{}.ln2.gamma", prefix))?,
            bp.var(&format!("{}.ln2.beta", prefix))?,
        )?;
    }
    Ok(y)
}

/// Channel-wise two-layer feed-forward with relu and train-mode dropout.
fn ffn_forward(
    tape: &Tape,
    x: Var,
    bp: &BoundParams,
    prefix: &str,
    cfg: &CmtConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let shape = tape.shape(x);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let tokens = tape.permute(tape.reshape(x, &[c, h * w])?, &[1, 0])?;
    let mut y = tape.matmul(tokens, bp.var(&format!("{}.ffn.w1", prefix))?)?;
    y = tape.add_bias(y, bp.var(&format!("{}.ffn.b1", prefix))?)?;
    y = tape.relu(y)?;
    y = tape.dropout(y, cfg.dropout, rng, mode == Mode::Train)?;
    y = tape.matmul(y, bp.var(&format!("{}.ffn.w2", prefix))?)?;
    y = tape.add_bias(y, bp.var(&format!("{}.ffn.b2", prefix))?)?;
    tape.reshape(tape.permute(y, &[1, 0])?, &[c, h, w])
}

/// Global average pool, two stacked linear maps with no interleaved
/// nonlinearity, bias, sigmoid.
pub fn head_forward(tape: &Tape, x: Var, bp: &BoundParams) -> Result<(Var, Var)> {
    let pooled = tape.global_avg_pool(x)?;
    let c = tape.shape(pooled)[0];
    let row = tape.reshape(pooled, &[1, c])?;
    let h2 = tape.matmul(row, bp.var("head.w2")?)?;
    let h1 = tape.matmul(h2, bp.var("head.w1")?)?;
    let k = tape.shape(h1)[1];
    let flat = tape.reshape(h1, &[k])?;
    let logits = tape.add(flat, bp.var("head.b")?)?;
    let probs = tape.sigmoid(logits)?;
    Ok((logits, probs))
}

// ---- checkpoint I/O --------------------------------------------------------

const MAGIC: &[u8; 4] = b"CMT1";

/// Versioned binary container: magic, config digest, then per-parameter
/// name, shape, and raw little-endian f64 values.
pub fn save_checkpoint(path: &Path, model: &CmtModel) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&model.config.digest()?);
    buf.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, t) in model.params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    crate::imageio::write_atomic(path, &buf)
}

/// Load a checkpoint for a known config; the stored digest must match.
pub fn load_checkpoint(path: &Path, config: &CmtConfig) -> Result<CmtModel> {
    let mut file = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::config(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut digest = [0u8; 32];
    file.read_exact(&mut digest)?;
    if digest != config.digest()? {
        return Err(Error::config(format!(
            "{}: checkpoint was written for a different configuration",
            path.display()
        )));
    }
    let mut u32buf = [0u8; 4];
    file.read_exact(&mut u32buf)?;
    let count = u32::from_le_bytes(u32buf) as usize;
    let mut params = ParamSet::default();
    for _ in 0..count {
        file.read_exact(&mut u32buf)?;
        let name_len = u32::from_le_bytes(u32buf) as usize;
        let mut name = vec![0u8; name_len];
        file.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::config("corrupt checkpoint: non-utf8 name"))?;
        file.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut u64buf = [0u8; 8];
        for _ in 0..rank {
            file.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            file.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(CmtModel {
        config: config.clone(),
        params,
    })
}
