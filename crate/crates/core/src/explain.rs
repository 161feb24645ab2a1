//! Grad-CAM heatmaps, their normalisation, upsampling, colouring and overlay.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::image::{self, RgbImage};
use crate::model::{forward_graph, predict, ModelParams, ModelSpec, Track, FEATURES};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f32 = 0.4;

/// Which class to explain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassChoice {
    /// The model's prediction.
    Auto,
    Index(usize),
}

impl std::str::FromStr for ClassChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(ClassChoice::Auto);
        }
        s.parse()
            .map(ClassChoice::Index)
            .map_err(|_| Error::Usage(format!("class must be \"auto\" or an index, got {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `H'×W'` at the target layer's spatial size.
    pub values: Tensor,
    pub normalized: bool,
    /// Set by [`normalize`] when the map was all zero.
    pub degenerate: bool,
    pub class: usize,
    pub layer: String,
    /// Per-channel weights: the spatial mean of `∂y_c/∂A^k`.
    pub weights: Vec<f32>,
}

/// Grad-CAM for one image `x: 1×C×H×W` at the spatial layer `layer`, with
/// `y_c` the pre-softmax logit. Returns the unnormalised `ReLU(Σ_k a_k A^k)`.
pub fn gradcam(params: &ModelParams, spec: &ModelSpec, x: &Tensor, class: ClassChoice, layer: &str) -> Result<Heatmap> {
    let (n, ..) = x.dims4("gradcam")?;
    if n != 1 {
        return Err(Error::shape("gradcam", x.shape(), "expects a batch of one image"));
    }
    let mut g = Graph::<f32>::new();
    let ids = params.register(&mut g, Track::None);
    let xi = g.constant(x.clone());
    // inference mode never draws from the stream
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let nodes = forward_graph(&mut g, spec, &ids, xi, false, &mut rng, Some(layer))?;
    let class = match class {
        ClassChoice::Auto => predict(g.value(nodes.probabilities))?[0],
        ClassChoice::Index(c) if c < spec.classes => c,
        ClassChoice::Index(c) => {
            return Err(Error::Usage(format!("class {c} out of range for {} classes", spec.classes)))
        }
    };
    let a_id = nodes
        .layer(layer)
        .ok_or_else(|| Error::Internal(format!("layer {layer:?} was not recorded")))?;
    let y = g.select(nodes.logits, class)?;
    let grads = g.backward(y)?;
    let a = g.value(a_id);
    let (_, k, h, w) = a.dims4("gradcam")?;
    let zero = Tensor::zeros(a.shape().to_vec());
    let da = grads.get(a_id).unwrap_or(&zero);

    let z = (h * w) as f32;
    let weights: Vec<f32> = da.data().chunks_exact(h * w).map(|c| c.iter().sum::<f32>() / z).collect();
    let mut values = vec![0.0f32; h * w];
    for (ch, &wk) in weights.iter().enumerate() {
        for (v, &av) in values.iter_mut().zip(&a.data()[ch * h * w..(ch + 1) * h * w]) {
            *v += wk * av;
        }
    }
    debug_assert_eq!(weights.len(), k);
    Ok(Heatmap {
        values: Tensor::new(vec![h, w], values.into_iter().map(|v| v.max(0.0)).collect())?,
        normalized: false,
        degenerate: false,
        class,
        layer: layer.to_string(),
        weights,
    })
}

/// Grad-CAM at the post-attention feature map.
pub fn gradcam_features(params: &ModelParams, spec: &ModelSpec, x: &Tensor, class: ClassChoice) -> Result<Heatmap> {
    gradcam(params, spec, x, class, FEATURES)
}

/// Divide by the maximum; an all-zero map stays zero and is flagged degenerate.
pub fn normalize(h: &Heatmap) -> Heatmap {
    let max = h.values.max();
    let mut out = h.clone();
    out.normalized = true;
    if max > 0.0 {
        out.values = h.values.map(|v| v / max);
        out.degenerate = false;
    } else {
        out.values = h.values.map(|_| 0.0);
        out.degenerate = true;
    }
    out
}

/// Align-corners bilinear upsampling of an `H'×W'` map to `H×W`.
pub fn upsample_bilinear(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = map.dims2("upsample")?;
    if out_h < h || out_w < w {
        return Err(Error::Usage(format!(
            "cannot upsample a {h}x{w} map to the smaller {out_h}x{out_w}"
        )));
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (y0, y1, fy) = coord(i, h, out_h);
        for j in 0..out_w {
            let (x0, x1, fx) = coord(j, w, out_w);
            let at = |y: usize, x: usize| d[y * w + x] as f64;
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
            let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

const ANCHORS: [(f64, [f64; 3]); 3] = [
    (0.0, [0.0, 0.0, 255.0]),
    (0.5, [255.0, 255.0, 0.0]),
    (1.0, [139.0, 0.0, 0.0]),
];

/// Blue → yellow → dark red, rounded half away from zero.
pub fn colormap(v: f32) -> Result<[u8; 3]> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Usage(format!("colormap value {v} outside [0, 1]; normalize first")));
    }
    let v = v as f64;
    let (lo, hi) = if v <= ANCHORS[1].0 {
        (ANCHORS[0], ANCHORS[1])
    } else {
        (ANCHORS[1], ANCHORS[2])
    };
    let t = (v - lo.0) / (hi.0 - lo.0);
    Ok(std::array::from_fn(|c| (lo.1[c] + (hi.1[c] - lo.1[c]) * t).round() as u8))
}

pub fn colorize(map: &Tensor) -> Result<RgbImage> {
    let (h, w) = map.dims2("colorize")?;
    let mut data = Vec::with_capacity(h * w * 3);
    for &v in map.data() {
        data.extend_from_slice(&colormap(v)?);
    }
    RgbImage::new(w, h, data)
}

/// `round((1 - α)·base + α·heat)` per channel.
pub fn overlay(base: &RgbImage, heat: &RgbImage, alpha: f32) -> Result<RgbImage> {
    if (base.width, base.height) != (heat.width, heat.height) {
        return Err(Error::Usage(format!(
            "overlay of {}x{} heat on {}x{} base",
            heat.width, heat.height, base.width, base.height
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Usage(format!("overlay alpha {alpha} outside [0, 1]")));
    }
    let a = alpha as f64;
    let data = base
        .data
        .iter()
        .zip(&heat.data)
        .map(|(&b, &h)| ((1.0 - a) * b as f64 + a * h as f64).round() as u8)
        .collect();
    RgbImage::new(base.width, base.height, data)
}

/// Row-major position of the first maximum.
pub fn argmax_pixel(map: &Tensor) -> Result<(usize, usize)> {
    let (_, w) = map.dims2("argmax_pixel")?;
    let mut best = 0;
    for (i, &v) in map.data().iter().enumerate() {
        if v > map.data()[best] {
            best = i;
        }
    }
    Ok((best % w, best / w))
}

/// Everything one explanation produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Explanation {
    pub heatmap: Heatmap,
    /// Normalised map at input resolution.
    pub upsampled: Tensor,
    pub heat_image: RgbImage,
    pub overlay_image: RgbImage,
}

/// Grad-CAM for `x: 1×3×H×W`, normalised, upsampled to `H×W`, coloured and
/// blended over the input.
pub fn explain(
    params: &ModelParams,
    spec: &ModelSpec,
    x: &Tensor,
    class: ClassChoice,
    layer: &str,
    alpha: f32,
) -> Result<Explanation> {
    let heatmap = normalize(&gradcam(params, spec, x, class, layer)?);
    let (_, _, h, w) = x.dims4("explain")?;
    let upsampled = upsample_bilinear(&heatmap.values, h, w)?;
    let heat_image = colorize(&upsampled)?;
    let base = image::from_tensor(&x.index_axis0(0))?;
    let overlay_image = overlay(&base, &heat_image, alpha)?;
    Ok(Explanation {
        heatmap,
        upsampled,
        heat_image,
        overlay_image,
    })
}
