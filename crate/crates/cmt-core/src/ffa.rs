//! Feature fusion augmentation: fuses two same-class images through a
//! beta-sampled weight matrix that is constant everywhere except inside one
//! randomly re-weighted patch cell.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio;
use crate::tensor::Tensor;

/// Parameters of the Beta distribution used for weight sampling.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

impl BetaParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if a <= 0.0 || b <= 0.0 || !a.is_finite() || !b.is_finite() {
            return Err(Error::Parameter(format!(
                "beta parameters must be positive, got a={} b={}",
                a, b
            )));
        }
        Ok(BetaParams { a, b })
    }

    pub fn symmetric(alpha: f64) -> Result<Self> {
        Self::new(alpha, alpha)
    }

    /// Closed-form variance `ab / ((a+b)^2 (a+b+1))`.
    pub fn variance(&self) -> f64 {
        let s = self.a + self.b;
        self.a * self.b / (s * s * (s + 1.0))
    }
}

/// One draw from Beta(a, b).
pub fn sample_beta(params: BetaParams, rng: &mut ChaCha8Rng) -> Result<f64> {
    let dist = Beta::new(params.a, params.b)
        .map_err(|e| Error::Parameter(format!("beta sampler: {}", e)))?;
    Ok(dist.sample(rng))
}

/// How the re-weighted patch region is bounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionMode {
    /// Strict inequalities on both axes; the cell's boundary rows and
    /// columns keep the fixed weight.
    Strict,
    /// Conventional `[lo, hi)` cell.
    HalfOpen,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FfaConfig {
    /// Patch grid size; must divide the image height and width.
    pub patch: usize,
    /// Symmetric beta parameter in (0, 1).
    pub alpha: f64,
    /// Cell position (m, n), each in [0, patch); drawn uniformly when absent.
    pub position: Option<(usize, usize)>,
    pub region: RegionMode,
}

impl FfaConfig {
    pub fn new(patch: usize, alpha: f64) -> Result<Self> {
        if patch == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::config(format!(
                "alpha must be in (0, 1), got {}",
                alpha
            )));
        }
        Ok(FfaConfig {
            patch,
            alpha,
            position: None,
            region: RegionMode::Strict,
        })
    }

    pub fn with_position(mut self, m: usize, n: usize) -> Result<Self> {
        if m >= self.patch || n >= self.patch {
            return Err(Error::config(format!(
                "position ({}, {}) out of [0, {})",
                m, n, self.patch
            )));
        }
        self.position = Some((m, n));
        Ok(self)
    }
}

/// The complementary weight pair (M, M_d) with pointwise M + M_d = 1.
#[derive(Debug, Clone)]
pub struct WeightMask {
    pub m: Tensor,
    pub m_d: Tensor,
    /// Cell position actually used.
    pub position: (usize, usize),
    /// The fixed weight outside the cell.
    pub fixed_weight: f64,
}

/// Mask construction from an arbitrary draw source; the public
/// [`build_masks`] wires in the seeded beta sampler.
pub fn build_masks_with(
    h: usize,
    w: usize,
    patch: usize,
    position: (usize, usize),
    region: RegionMode,
    draw: &mut dyn FnMut() -> Result<f64>,
) -> Result<WeightMask> {
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "patch size {} does not divide image {}x{}",
            patch, h, w
        )));
    }
    let (m_pos, n_pos) = position;
    if m_pos >= patch || n_pos >= patch {
        return Err(Error::config(format!(
            "position ({}, {}) out of [0, {})",
            m_pos, n_pos, patch
        )));
    }
    let (cell_h, cell_w) = (h / patch, w / patch);
    let (row_lo, row_hi) = (m_pos * cell_h, (m_pos + 1) * cell_h);
    let (col_lo, col_hi) = (n_pos * cell_w, (n_pos + 1) * cell_w);
    let inside = |i: usize, j: usize| match region {
        RegionMode::Strict => i > row_lo && i < row_hi && j > col_lo && j < col_hi,
        RegionMode::HalfOpen => i >= row_lo && i < row_hi && j >= col_lo && j < col_hi,
    };
    let fixed = draw()?;
    let mut m = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            m[i * w + j] = if inside(i, j) { draw()? } else { fixed };
        }
    }
    let m_d: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
    Ok(WeightMask {
        m: Tensor::new(vec![h, w], m)?,
        m_d: Tensor::new(vec![h, w], m_d)?,
        position,
        fixed_weight: fixed,
    })
}

/// Build the weight pair for an h x w image. The cell position comes from
/// the config or, when absent, a uniform draw from the same generator.
pub fn build_masks(h: usize, w: usize, cfg: &FfaConfig, rng: &mut ChaCha8Rng) -> Result<WeightMask> {
    let position = match cfg.position {
        Some(p) => p,
        None => (rng.gen_range(0..cfg.patch), rng.gen_range(0..cfg.patch)),
    };
    let params = BetaParams::symmetric(cfg.alpha)?;
    let dist = Beta::new(params.a, params.b)
        .map_err(|e| Error::Parameter(format!("beta sampler: {}", e)))?;
    let mut draw = || Ok(dist.sample(rng));
    build_masks_with(h, w, cfg.patch, position, cfg.region, &mut draw)
}

/// Pointwise convex combination `i1 * m + i2 * m_d`. Accepts `[h, w]` or
/// `[c, h, w]`; a multi-channel image reuses the spatial mask per channel.
pub fn fuse(i1: &Tensor, i2: &Tensor, mask: &WeightMask) -> Result<Tensor> {
    if i1.shape() != i2.shape() {
        return Err(Error::dim(format!(
            "fuse: {:?} vs {:?}",
            i1.shape(),
            i2.shape()
        )));
    }
    let (channels, spatial) = match i1.shape() {
        [h, w] => (1, *h * *w),
        [c, h, w] => (*c, *h * *w),
        s => return Err(Error::dim(format!("fuse: unsupported shape {:?}", s))),
    };
    if mask.m.numel() != spatial {
        return Err(Error::dim(format!(
            "fuse: mask {:?} vs image {:?}",
            mask.m.shape(),
            i1.shape()
        )));
    }
    let mut out = vec![0.0; i1.numel()];
    for ch in 0..channels {
        for p in 0..spatial {
            let idx = ch * spatial + p;
            out[idx] = i1.data()[idx] * mask.m.data()[p] + i2.data()[idx] * mask.m_d.data()[p];
        }
    }
    Tensor::new(i1.shape().to_vec(), out)
}

/// One manifest line per emitted image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub output: String,
    pub source_a: String,
    pub source_b: String,
    pub seed: u64,
    pub p: usize,
    pub alpha: f64,
    pub m: usize,
    pub n: usize,
}

/// Generate `count` fused images from a class directory. Output `i` uses
/// the derived seed `base_seed + i`; a JSON-lines manifest records the
/// source pair and configuration per output.
pub fn augment_dataset(
    class_dir: &Path,
    out_dir: &Path,
    count: usize,
    cfg: &FfaConfig,
    base_seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let mut files: Vec<_> = std::fs::read_dir(class_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "ppm"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.len() < 2 {
        return Err(Error::Dataset(format!(
            "{} holds {} readable images; FFA needs at least 2",
            class_dir.display(),
            files.len()
        )));
    }
    let images: Vec<Tensor> = files
        .iter()
        .map(|p| imageio::read_image(p))
        .collect::<Result<_>>()?;
    let dims = images[0].shape().to_vec();
    for (img, path) in images.iter().zip(&files) {
        if img.shape() != dims {
            return Err(Error::dim(format!(
                "mixed image dimensions: {} is {:?}, expected {:?}",
                path.display(),
                img.shape(),
                dims
            )));
        }
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);

    std::fs::create_dir_all(out_dir)?;
    let mut manifest = Vec::with_capacity(count);
    for i in 0..count {
        let seed = base_seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick: Vec<usize> = (0..files.len()).collect();
        pick.shuffle(&mut rng);
        let (a, b) = (pick[0], pick[1]);
        let mask = build_masks(h, w, cfg, &mut rng)?;
        let fused = fuse(&images[a], &images[b], &mask)?;
        let name = format!("ffa_{:04}.png", i);
        imageio::write_image_png(&out_dir.join(&name), &fused)?;
        manifest.push(ManifestEntry {
            output: name,
            source_a: files[a].file_name().unwrap().to_string_lossy().into_owned(),
            source_b: files[b].file_name().unwrap().to_string_lossy().into_owned(),
            seed,
            p: cfg.patch,
            alpha: cfg.alpha,
            m: mask.position.0,
            n: mask.position.1,
        });
    }
    let mut lines = String::new();
    for entry in &manifest {
        lines.push_str(&serde_json::to_string(entry)?);
        lines.push('\n');
    }
    imageio::write_atomic(&out_dir.join("manifest.jsonl"), lines.as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_beta_params() {
        assert!(BetaParams::new(0.0, 0.4).is_err());
        assert!(BetaParams::new(0.4, -1.0).is_err());
    }

    #[test]
    fn stub_sampler_gives_constant_masks() {
        let mut draw = || Ok(0.25);
        let mask = build_masks_with(4, 4, 2, (1, 1), RegionMode::Strict, &mut draw).unwrap();
        assert!(mask.m.data().iter().all(|&v| v == 0.25));
        assert!(mask.m_d.data().iter().all(|&v| v == 0.75));
    }

    #[test]
    fn strict_region_4x4_p2_is_single_cell() {
        // h=w=4, p=2, m=n=1: strict bounds 2 < i < 4 and 2 < j < 4 leave
        // exactly the position (3, 3) with an independent draw.
        let mut calls = 0usize;
        let mut draw = || {
            calls += 1;
            Ok(if calls == 1 { 0.5 } else { 0.9 })
        };
        let mask = build_masks_with(4, 4, 2, (1, 1), RegionMode::Strict, &mut draw).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let v = mask.m.data()[i * 4 + j];
                if (i, j) == (3, 3) {
                    assert_eq!(v, 0.9);
                } else {
                    assert_eq!(v, 0.5);
                }
            }
        }
        assert_eq!(calls, 2); // one fixed draw + one in-region draw
    }

    #[test]
    fn halfopen_region_covers_whole_cell() {
        let mut calls = 0usize;
        let mut draw = || {
            calls += 1;
            Ok(if calls == 1 { 0.5 } else { 0.9 })
        };
        let mask = build_masks_with(4, 4, 2, (1, 1), RegionMode::HalfOpen, &mut draw).unwrap();
        let fresh = mask
            .m
            .data()
            .iter()
            .filter(|&&v| (v - 0.9).abs() < 1e-15)
            .count();
        assert_eq!(fresh, 4);
    }

    #[test]
    fn masks_are_seed_deterministic() {
        let cfg = FfaConfig::new(2, 0.4).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = build_masks(8, 8, &cfg, &mut r1).unwrap();
        let b = build_masks(8, 8, &cfg, &mut r2).unwrap();
        assert_eq!(a.m, b.m);
        assert_eq!(a.position, b.position);
    }

    #[test]
    fn indivisible_patch_rejected() {
        let cfg = FfaConfig::new(2, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(build_masks(5, 4, &cfg, &mut rng).is_err());
    }

    #[test]
    fn fuse_of_equal_images_is_identity() {
        let cfg = FfaConfig::new(2, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = build_masks(4, 4, &cfg, &mut rng).unwrap();
        let img = Tensor::from_fn(&[4, 4], |i| (i as f64) / 16.0);
        let fused = fuse(&img, &img, &mask).unwrap();
        for (a, b) in fused.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fuse_constant_mask_blend() {
        let mut draw = || Ok(0.25);
        let mask = build_masks_with(4, 4, 2, (0, 0), RegionMode::Strict, &mut draw).unwrap();
        let ones = Tensor::ones(&[4, 4]);
        let zeros = Tensor::zeros(&[4, 4]);
        let fused = fuse(&ones, &zeros, &mask).unwrap();
        assert!(fused.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn fuse_shape_mismatch() {
        let mut draw = || Ok(0.5);
        let mask = build_masks_with(4, 4, 2, (0, 0), RegionMode::Strict, &mut draw).unwrap();
        let a = Tensor::ones(&[4, 4]);
        let b = Tensor::ones(&[2, 8]);
        assert!(fuse(&a, &b, &mask).is_err());
    }

    #[test]
    fn multichannel_reuses_spatial_mask() {
        let cfg = FfaConfig::new(2, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mask = build_masks(4, 4, &cfg, &mut rng).unwrap();
        let i1 = Tensor::ones(&[3, 4, 4]);
        let i2 = Tensor::zeros(&[3, 4, 4]);
        let fused = fuse(&i1, &i2, &mask).unwrap();
        for ch in 0..3 {
            for p in 0..16 {
                assert_eq!(fused.data()[ch * 16 + p], mask.m.data()[p]);
            }
        }
    }

    #[test]
    fn beta_unit_interval_support() {
        let params = BetaParams::symmetric(0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10_000 {
            let v = sample_beta(params, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
