//! Gradient-weighted class activation maps: per-channel coefficients from
//! spatially averaged score gradients, combined and relu-clipped into a
//! nonnegative localization map, exported as a P5 heatmap.

use std::fs;
use std::path::Path;

use crate::data::encode_p5;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::tensor::Tensor;

/// Which scalar the map explains: the pre-softmax logit (standard choice) or
/// the post-softmax probability of the target class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Score {
    #[default]
    Logit,
    Probability,
}

#[derive(Debug, Clone)]
pub struct GradCamResult {
    pub target_class: usize,
    pub layer: String,
    /// One coefficient per channel of the hooked feature map.
    pub alpha: Vec<f64>,
    /// Relu-clipped localization map at feature-map resolution, row-major.
    pub map: Vec<f64>,
    pub map_height: usize,
    pub map_width: usize,
    /// Min-max normalized, nearest-neighbor upsampled 8-bit map.
    pub heatmap: Vec<u8>,
    pub heatmap_side: usize,
}

/// The last feature stage before global average pooling.
pub fn default_layer(model: &ModelGraph) -> &'static str {
    if model.arch.has_bot() {
        "layer5"
    } else {
        "layer4"
    }
}

/// Coefficients and localization map for an arbitrary scalar score reachable
/// from a [1,C,h,w] activation: alpha_i = spatial mean of d score / d A_i,
/// map = relu(sum_i alpha_i * A_i). Runs the backward sweep itself.
pub fn gradcam_from(activation: &Tensor, score: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (c, h, w) = match *activation.shape() {
        [1, c, h, w] => (c, h, w),
        _ => {
            return Err(Error::Shape(format!(
                "gradcam activation must be [1,C,h,w], got {:?}",
                activation.shape()
            )))
        }
    };
    score.backward()?;
    let grad = activation.grad();
    let feat = activation.to_vec();
    let area = (h * w) as f64;
    let alpha: Vec<f64> = (0..c)
        .map(|i| grad[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / area)
        .collect();
    let map: Vec<f64> = (0..h * w)
        .map(|p| {
            let s: f64 = (0..c).map(|i| alpha[i] * feat[i * h * w + p]).sum();
            s.max(0.0)
        })
        .collect();
    Ok((alpha, map))
}

pub fn compute_gradcam(
    model: &ModelGraph,
    image: &[f64],
    target_class: usize,
    layer_name: &str,
    score: Score,
) -> Result<GradCamResult> {
    if target_class >= model.num_classes {
        return Err(Error::Config(format!(
            "class {target_class} out of range for {} classes",
            model.num_classes
        )));
    }
    let side = model.input_side;
    let batch = Tensor::from_vec(image.to_vec(), &[1, 3, side, side])?;
    let stages = model.forward_stages(&batch, false)?;
    let activation = stages
        .iter()
        .find(|(name, _)| name == layer_name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Config(format!("unknown layer '{layer_name}'")))?;
    let (h, w) = match *activation.shape() {
        [1, _, h, w] => (h, w),
        _ => {
            return Err(Error::Config(format!(
                "layer '{layer_name}' is not a 4-D activation"
            )))
        }
    };
    let logits = stages.last().unwrap().1.clone();
    let target = match score {
        Score::Logit => logits.select(target_class)?,
        Score::Probability => logits.softmax(1)?.select(target_class)?,
    };
    let (alpha, map) = gradcam_from(&activation, &target)?;

    // Gradients were scattered over the whole graph including parameters;
    // clear them so the model is byte-identical to its pre-call state.
    model.zero_grads();

    let heatmap = render_heatmap(&map, h, w, side);
    Ok(GradCamResult {
        target_class,
        layer: layer_name.to_string(),
        alpha,
        map,
        map_height: h,
        map_width: w,
        heatmap,
        heatmap_side: side,
    })
}

/// Min-max normalization to [0,255] (a constant nonzero map saturates to 255,
/// an identically-zero map stays zero), then nearest-neighbor upsampling.
pub fn render_heatmap(map: &[f64], h: usize, w: usize, side: usize) -> Vec<u8> {
    let mx = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mn = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let small: Vec<u8> = if mx == 0.0 {
        vec![0; h * w]
    } else if mx == mn {
        vec![255; h * w]
    } else {
        map.iter()
            .map(|v| ((v - mn) / (mx - mn) * 255.0).round() as u8)
            .collect()
    };
    let mut out = vec![0u8; side * side];
    for y in 0..side {
        let sy = y * h / side;
        for x in 0..side {
            out[y * side + x] = small[sy * w + x * w / side];
        }
    }
    out
}

pub fn export_heatmap(result: &GradCamResult, path: &Path) -> Result<()> {
    let bytes = encode_p5(result.heatmap_side, result.heatmap_side, &result.heatmap);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_normalization_arithmetic() {
        // 2x2 map [[0,1],[2,4]] at side 4 -> bytes {0,64,128,255} in 2x2 blocks
        let hm = render_heatmap(&[0.0, 1.0, 2.0, 4.0], 2, 2, 4);
        assert_eq!(hm[0], 0);
        assert_eq!(hm[1], 0);
        assert_eq!(hm[2], 64);
        assert_eq!(hm[4 + 2], 64);
        assert_eq!(hm[2 * 4], 128);
        assert_eq!(hm[3 * 4 + 3], 255);
    }

    #[test]
    fn degenerate_maps() {
        assert_eq!(render_heatmap(&[0.0; 4], 2, 2, 2), vec![0; 4]);
        assert_eq!(render_heatmap(&[3.0; 4], 2, 2, 2), vec![255; 4]);
    }
}
