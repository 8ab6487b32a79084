//! Gradient-weighted class activation maps over the conv feature extractor,
//! plus overlay rendering for inspection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{resize_bilinear, to_gray};
use crate::model::{CmtModel, Mode};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// A class activation map at input resolution.
#[derive(Debug, Clone)]
pub struct CamMap {
    pub class: usize,
    /// Normalized heat in [0, 1], shape [h, w] of the input image.
    pub heat: Tensor,
    /// Extremes of the un-normalized map, recorded for the sidecar report.
    pub raw_min: f64,
    pub raw_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CamSidecar {
    pub input: String,
    pub class: usize,
    pub raw_min: f64,
    pub raw_max: f64,
}

/// Heat map for one class: backpropagate the pre-sigmoid logit to the conv
/// features, weight each channel by its mean gradient, rectify the weighted
/// sum, then min-max normalize and upsample to the input size.
pub fn grad_cam(model: &CmtModel, image: &Tensor, class: usize) -> Result<CamMap> {
    if class >= model.config.classes {
        return Err(Error::config(format!(
            "class {} out of range 0..{}",
            class, model.config.classes
        )));
    }
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::dim(format!("grad_cam: image shape {:?}", shape)));
    }
    let (ih, iw) = (shape[1], shape[2]);
    let tape = Tape::new();
    let bp = model.params.bind(&tape)?;
    let img = tape.leaf(image.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = model.forward(&tape, &bp, img, Mode::Eval, &mut rng)?;
    let mut one_hot = Tensor::zeros(&[model.config.classes]);
    one_hot.data_mut()[class] = 1.0;
    let logit = tape.project(out.logits, &one_hot)?;
    let grads = tape.backward(logit)?;

    let feat = tape.value(out.cife_features);
    let fshape = feat.shape().to_vec();
    let (fh, fw) = (fshape[1], fshape[2]);
    let grad = grads.get(out.cife_features, &fshape);
    let (small, raw_min, raw_max) = activation_heat(&feat, &grad)?;
    let heat = if ih % fh == 0 && iw % fw == 0 && ih / fh == iw / fw {
        upsample_nearest_2d(&small, ih / fh)
    } else {
        resize_bilinear(&small.reshaped(&[1, fh, fw])?, ih, iw)?.reshaped(&[ih, iw])?
    };
    Ok(CamMap {
        class,
        heat,
        raw_min,
        raw_max,
    })
}

/// The weighting core of the map: channel weights are the spatial mean of
/// the gradient, the map is the rectified weighted channel sum, min-max
/// normalized with an all-zero guard for flat maps. Returns the normalized
/// [h, w] map plus the raw extremes.
pub fn activation_heat(features: &Tensor, grads: &Tensor) -> Result<(Tensor, f64, f64)> {
    if features.shape() != grads.shape() || features.rank() != 3 {
        return Err(Error::dim(format!(
            "activation_heat: {:?} vs {:?}",
            features.shape(),
            grads.shape()
        )));
    }
    let (c, fh, fw) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let area = (fh * fw) as f64;
    let mut weights = vec![0.0; c];
    for k in 0..c {
        let base = k * fh * fw;
        weights[k] = grads.data()[base..base + fh * fw].iter().sum::<f64>() / area;
    }
    let mut raw = vec![0.0; fh * fw];
    for k in 0..c {
        let base = k * fh * fw;
        for i in 0..fh * fw {
            raw[i] += weights[k] * features.data()[base + i];
        }
    }
    for v in &mut raw {
        *v = v.max(0.0);
    }
    let raw_min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let raw_max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = raw_max - raw_min;
    let norm: Vec<f64> = if span > 0.0 {
        raw.iter().map(|v| (v - raw_min) / span).collect()
    } else {
        vec![0.0; raw.len()] // flat map: report all-zero heat
    };
    Ok((Tensor::new(vec![fh, fw], norm)?, raw_min, raw_max))
}

fn upsample_nearest_2d(t: &Tensor, factor: usize) -> Tensor {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn(&[h * factor, w * factor], |i| {
        let r = i / (w * factor) / factor;
        let col = (i % (w * factor)) / factor;
        t.data()[r * w + col]
    })
}

/// Fixed 256-entry "hot" ramp (black -> red -> yellow -> white) so renders
/// are byte-stable regardless of tiny floating-point differences upstream.
pub fn colormap_table() -> [(f64, f64, f64); 256] {
    let mut table = [(0.0, 0.0, 0.0); 256];
    for (i, entry) in table.iter_mut().enumerate() {
        let t = i as f64 / 255.0;
        *entry = (
            (3.0 * t).clamp(0.0, 1.0),
            (3.0 * t - 1.0).clamp(0.0, 1.0),
            (3.0 * t - 2.0).clamp(0.0, 1.0),
        );
    }
    table
}

/// Table lookup for a heat value in [0, 1].
pub fn colormap_hot(t: f64) -> (f64, f64, f64) {
    let idx = (t.clamp(0.0, 1.0) * 255.0).round() as usize;
    colormap_table()[idx]
}

/// Equal blend of the grayscale input and the colorized heat map,
/// shape [3, h, w] in [0, 1].
pub fn render_overlay(image: &Tensor, cam: &CamMap) -> Result<Tensor> {
    let gray = to_gray(image)?;
    let gshape = gray.shape().to_vec();
    let (h, w) = (gshape[1], gshape[2]);
    if cam.heat.shape() != [h, w] {
        return Err(Error::dim(format!(
            "overlay: heat {:?} vs image {}x{}",
            cam.heat.shape(),
            h,
            w
        )));
    }
    let table = colormap_table();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let ch = i / (h * w);
        let px = i % (h * w);
        let idx = (cam.heat.data()[px].clamp(0.0, 1.0) * 255.0).round() as usize;
        let (r, g, b) = table[idx];
        let heat = [r, g, b][ch];
        0.5 * gray.data()[px] + 0.5 * heat
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CmtConfig;

    fn toy_model(seed: u64) -> CmtModel {
        CmtModel::new(CmtConfig::toy(), seed).unwrap()
    }

    #[test]
    fn heat_in_unit_range_at_input_size() {
        let model = toy_model(4);
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i * 13) % 97) as f64 / 97.0);
        let cam = grad_cam(&model, &img, 1).unwrap();
        assert_eq!(cam.heat.shape(), &[32, 32]);
        let data = cam.heat.data();
        assert!(data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // a non-degenerate map touches both ends of the range
        assert!(data.iter().cloned().fold(f64::NEG_INFINITY, f64::max) == 1.0);
        assert!(data.iter().cloned().fold(f64::INFINITY, f64::min) == 0.0);
    }

    #[test]
    fn zero_input_gives_flat_zero_map() {
        let model = toy_model(4);
        let cam = grad_cam(&model, &Tensor::zeros(&[3, 32, 32]), 0).unwrap();
        assert!(cam.heat.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn class_out_of_range_rejected() {
        let model = toy_model(4);
        let img = Tensor::zeros(&[3, 32, 32]);
        assert!(grad_cam(&model, &img, 4).is_err());
    }

    #[test]
    fn deterministic_across_calls() {
        let model = toy_model(8);
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i * 7) % 31) as f64 / 31.0);
        let a = grad_cam(&model, &img, 2).unwrap();
        let b = grad_cam(&model, &img, 2).unwrap();
        assert_eq!(a.heat, b.heat);
        assert_eq!(a.raw_min, b.raw_min);
        assert_eq!(a.raw_max, b.raw_max);
    }

    #[test]
    fn nearest_upsample_blocks() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let up = upsample_nearest_2d(&t, 2);
        assert_eq!(up.shape(), &[4, 4]);
        assert_eq!(up.data()[0], 0.0);
        assert_eq!(up.data()[3], 1.0);
        assert_eq!(up.data()[5], 0.0);
        assert_eq!(up.data()[15], 0.25);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap_hot(0.0), (0.0, 0.0, 0.0));
        assert_eq!(colormap_hot(1.0), (1.0, 1.0, 1.0));
        let (r, g, b) = colormap_hot(1.0 / 3.0);
        assert!((r - 1.0).abs() < 1e-12 && g.abs() < 1e-12 && b == 0.0);
    }

    #[test]
    fn overlay_shape_and_range() {
        let model = toy_model(4);
        let img = Tensor::from_fn(&[3, 32, 32], |i| ((i * 13) % 97) as f64 / 97.0);
        let cam = grad_cam(&model, &img, 0).unwrap();
        let over = render_overlay(&img, &cam).unwrap();
        assert_eq!(over.shape(), &[3, 32, 32]);
        assert!(over.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
