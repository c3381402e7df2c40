//! The trainable network: a small convolutional encoder shared by a
//! heatmap head and a region-embedding head.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{roi_align, roi_align_backward, BoxXYXY, FeatureGrid};
use crate::heatmap::Heatmap;
use crate::nn::{
    conv2d_backward, conv2d_forward, linear_backward, linear_forward, relu_backward, relu_inplace, sigmoid, ConvSpec,
    ParamSet,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl LayerSpec {
    pub const fn new(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        LayerSpec { out_channels, kernel, stride, pad }
    }
}

/// Convolutional stack; every layer is followed by a ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            layers: vec![LayerSpec::new(16, 4, 4, 0), LayerSpec::new(16, 3, 1, 1), LayerSpec::new(16, 3, 1, 1)],
        }
    }
}

impl EncoderConfig {
    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }
}

/// Heatmap head. Hidden layers use ReLU; the last layer must have one output
/// channel and stride 1, and is squashed by a logistic unit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PointHeadConfig {
    pub layers: Vec<LayerSpec>,
}

impl Default for PointHeadConfig {
    fn default() -> Self {
        PointHeadConfig {
            layers: vec![LayerSpec::new(8, 3, 1, 1), LayerSpec::new(8, 3, 1, 1), LayerSpec::new(1, 1, 1, 0)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionHeadConfig {
    /// ROI-align output side.
    pub roi: usize,
    /// The pooled window is the box scaled by `context` plus `margin` pixels per side.
    pub context: f64,
    pub margin: f64,
    /// Also pool the tight box itself.
    pub tight_pool: bool,
    /// Append log box width/height (in feature cells) to the pooled vector.
    pub geometry: bool,
    pub hidden: usize,
    pub dim: usize,
    pub logit_scale: f64,
}

impl Default for RegionHeadConfig {
    fn default() -> Self {
        RegionHeadConfig {
            roi: 7,
            context: 2.0,
            margin: 2.0,
            tight_pool: true,
            geometry: true,
            hidden: 64,
            dim: 64,
            logit_scale: 20.0,
        }
    }
}

impl RegionHeadConfig {
    pub fn input_len(&self, channels: usize) -> usize {
        let pools = if self.tight_pool { 2 } else { 1 };
        pools * channels * self.roi * self.roi + if self.geometry { 2 } else { 0 }
    }

    pub fn context_box(&self, b: &BoxXYXY) -> BoxXYXY {
        let c = b.center();
        let hw = b.width() * 0.5 * self.context + self.margin;
        let hh = b.height() * 0.5 * self.context + self.margin;
        BoxXYXY::new(c.x - hw, c.y - hh, c.x + hw, c.y + hh)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub point_head: PointHeadConfig,
    pub region_head: RegionHeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.layers.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let last = self.point_head.layers.last().ok_or_else(|| Error::Config("point head needs a layer".into()))?;
        if last.out_channels != 1 {
            return Err(Error::Config("point head must end with one channel".into()));
        }
        if self.point_head.layers.iter().any(|l| l.stride != 1 || l.kernel != 2 * l.pad + 1) {
            return Err(Error::Config("point head layers must preserve resolution".into()));
        }
        let rh = &self.region_head;
        if rh.roi == 0 || rh.hidden == 0 || rh.dim == 0 || !(rh.context > 0.0) || rh.margin < 0.0 {
            return Err(Error::Config("invalid region head".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvIdx {
    spec: ConvSpec,
    w: usize,
    b: usize,
}

/// Parameters plus the configuration that gives them meaning. Parameter
/// names are `enc.<i>.{weight,bias}`, `point.<i>.{weight,bias}` and
/// `cls.fc{1,2}.{weight,bias}`.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
    enc: Vec<ConvIdx>,
    point: Vec<ConvIdx>,
    fc1: (usize, usize),
    fc2: (usize, usize),
}

pub struct EncoderTrace {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<FeatureGrid>,
}

impl EncoderTrace {
    pub fn features(&self) -> &FeatureGrid {
        self.acts.last().unwrap()
    }
}

pub struct PointTrace {
    /// Hidden activations after ReLU; `acts[0]` is the encoder output.
    acts: Vec<FeatureGrid>,
    pub heatmap: Heatmap,
}

pub struct RegionTrace {
    pub bbox: BoxXYXY,
    x: Vec<f64>,
    h: Vec<f64>,
    norm: f64,
    pub r: Vec<f64>,
}

fn layout(config: &ModelConfig) -> Result<(ParamSet, Vec<ConvIdx>, Vec<ConvIdx>, (usize, usize), (usize, usize))> {
    config.validate()?;
    let mut ps = ParamSet::default();
    let mut enc = Vec::new();
    let mut ch = config.encoder.in_channels;
    for (i, l) in config.encoder.layers.iter().enumerate() {
        let spec = ConvSpec { in_ch: ch, out_ch: l.out_channels, kernel: l.kernel, stride: l.stride, pad: l.pad };
        let w = ps.push(format!("enc.{i}.weight"), vec![l.out_channels, ch, l.kernel, l.kernel], vec![0.0; spec.weight_len()]);
        let b = ps.push(format!("enc.{i}.bias"), vec![l.out_channels], vec![0.0; l.out_channels]);
        enc.push(ConvIdx { spec, w, b });
        ch = l.out_channels;
    }
    let feat_ch = ch;
    let mut point = Vec::new();
    for (i, l) in config.point_head.layers.iter().enumerate() {
        let spec = ConvSpec { in_ch: ch, out_ch: l.out_channels, kernel: l.kernel, stride: l.stride, pad: l.pad };
        let w = ps.push(format!("point.{i}.weight"), vec![l.out_channels, ch, l.kernel, l.kernel], vec![0.0; spec.weight_len()]);
        let b = ps.push(format!("point.{i}.bias"), vec![l.out_channels], vec![0.0; l.out_channels]);
        point.push(ConvIdx { spec, w, b });
        ch = l.out_channels;
    }
    let rh = &config.region_head;
    let n_in = rh.input_len(feat_ch);
    let w1 = ps.push("cls.fc1.weight", vec![rh.hidden, n_in], vec![0.0; rh.hidden * n_in]);
    let b1 = ps.push("cls.fc1.bias", vec![rh.hidden], vec![0.0; rh.hidden]);
    let w2 = ps.push("cls.fc2.weight", vec![rh.dim, rh.hidden], vec![0.0; rh.dim * rh.hidden]);
    let b2 = ps.push("cls.fc2.bias", vec![rh.dim], vec![0.0; rh.dim]);
    Ok((ps, enc, point, (w1, b1), (w2, b2)))
}

/// Convert an RGB image to a `3 x H x W` grid with values in `[-0.5, 0.5]`,
/// zero-padded on the right/bottom to a multiple of `stride`.
pub fn image_to_input(img: &RgbImage, stride: usize) -> FeatureGrid {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pw = w.div_ceil(stride) * stride;
    let ph = h.div_ceil(stride) * stride;
    let mut g = FeatureGrid::zeros(3, ph, pw, 1);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            g.data[(c * ph + y as usize) * pw + x as usize] = p.0[c] as f64 / 255.0 - 0.5;
        }
    }
    g
}

impl Model {
    /// Fan-in scaled uniform initialization from a seed. The heatmap output
    /// bias starts at logit(0.01) so the initial map is nearly empty.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        let (mut params, enc, point, fc1, fc2) = layout(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_point = point.len();
        let mut fill = |params: &mut ParamSet, idx: usize, fan_in: usize, gain: f64| {
            let bound = (gain / fan_in as f64).sqrt();
            for v in params.tensors[idx].data.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        };
        for c in &enc {
            fill(&mut params, c.w, c.spec.in_ch * c.spec.kernel * c.spec.kernel, 6.0);
        }
        for (i, c) in point.iter().enumerate() {
            let gain = if i + 1 == n_point { 1.0 } else { 6.0 };
            fill(&mut params, c.w, c.spec.in_ch * c.spec.kernel * c.spec.kernel, gain);
        }
        let n_in = params.tensors[fc1.0].shape[1];
        fill(&mut params, fc1.0, n_in, 6.0);
        fill(&mut params, fc2.0, config.region_head.hidden, 3.0);
        let out_b = point.last().unwrap().b;
        params.tensors[out_b].data[0] = (0.01f64 / 0.99).ln();
        Ok(Model { config, params, enc, point, fc1, fc2 })
    }

    /// Wrap existing parameters, checking names and shapes against the config.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Model> {
        let (expected, enc, point, fc1, fc2) = layout(&config)?;
        expected.check_layout(&params)?;
        if !params.all_finite() {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Model { config, params, enc, point, fc1, fc2 })
    }

    pub fn stride(&self) -> usize {
        self.config.encoder.total_stride()
    }

    pub fn logit_scale(&self) -> f64 {
        self.config.region_head.logit_scale
    }

    pub fn encode(&self, input: &FeatureGrid) -> EncoderTrace {
        let mut acts = vec![input.clone()];
        for c in &self.enc {
            let mut out = conv2d_forward(&c.spec, &self.params.tensors[c.w].data, &self.params.tensors[c.b].data, acts.last().unwrap());
            relu_inplace(&mut out.data);
            acts.push(out);
        }
        EncoderTrace { acts }
    }

    /// Deterministic features of an image at the encoder's total stride.
    pub fn toy_encode(&self, img: &RgbImage) -> FeatureGrid {
        let mut trace = self.encode(&image_to_input(img, self.stride()));
        trace.acts.pop().unwrap()
    }

    pub fn encoder_backward(&self, trace: &EncoderTrace, grad_features: Vec<f64>, grads: &mut ParamSet) {
        let mut g = grad_features;
        for (i, c) in self.enc.iter().enumerate().rev() {
            relu_backward(&trace.acts[i + 1].data, &mut g);
            let go = FeatureGrid { data: g, ..trace.acts[i + 1].clone_shape() };
            let mut gin = if i > 0 { Some(vec![0.0; trace.acts[i].data.len()]) } else { None };
            let (gw, gb) = grad_pair(grads, c.w, c.b);
            conv2d_backward(&c.spec, &self.params.tensors[c.w].data, &trace.acts[i], &go, gw, gb, gin.as_deref_mut());
            match gin {
                Some(v) => g = v,
                None => break,
            }
        }
    }

    pub fn point_forward(&self, features: &FeatureGrid) -> Result<PointTrace> {
        let first = &self.point[0].spec;
        if features.channels != first.in_ch {
            return Err(Error::ShapeMismatch {
                expected: format!("{} feature channels", first.in_ch),
                got: format!("{}", features.channels),
            });
        }
        let mut acts = vec![features.clone()];
        let n = self.point.len();
        let mut logits = None;
        for (i, c) in self.point.iter().enumerate() {
            let mut out = conv2d_forward(&c.spec, &self.params.tensors[c.w].data, &self.params.tensors[c.b].data, acts.last().unwrap());
            if i + 1 < n {
                relu_inplace(&mut out.data);
                acts.push(out);
            } else {
                logits = Some(out);
            }
        }
        let logits = logits.unwrap();
        let heatmap = Heatmap {
            height: logits.height,
            width: logits.width,
            stride: logits.stride,
            data: logits.data.iter().map(|&z| sigmoid(z)).collect(),
        };
        Ok(PointTrace { acts, heatmap })
    }

    pub fn predict_heatmap(&self, features: &FeatureGrid) -> Result<Heatmap> {
        Ok(self.point_forward(features)?.heatmap)
    }

    /// Backpropagate `dL/dH` through the head; accumulates into `grads` and
    /// `grad_features`.
    pub fn point_backward(&self, trace: &PointTrace, grad_heat: &[f64], grads: &mut ParamSet, grad_features: &mut [f64]) {
        let h = &trace.heatmap;
        let mut g: Vec<f64> = grad_heat.iter().zip(&h.data).map(|(gh, p)| gh * p * (1.0 - p)).collect();
        let mut shape = FeatureGrid { channels: 1, height: h.height, width: h.width, stride: h.stride, data: Vec::new() };
        for (i, c) in self.point.iter().enumerate().rev() {
            if i + 1 < self.point.len() {
                relu_backward(&trace.acts[i + 1].data, &mut g);
                shape = trace.acts[i + 1].clone_shape();
            }
            let go = FeatureGrid { data: g, ..shape.clone() };
            let mut gin = vec![0.0; trace.acts[i].data.len()];
            let (gw, gb) = grad_pair(grads, c.w, c.b);
            conv2d_backward(&c.spec, &self.params.tensors[c.w].data, &trace.acts[i], &go, gw, gb, Some(&mut gin));
            g = gin;
        }
        for (a, b) in grad_features.iter_mut().zip(&g) {
            *a += b;
        }
    }

    fn region_input(&self, features: &FeatureGrid, bbox: &BoxXYXY) -> Result<Vec<f64>> {
        let rh = &self.config.region_head;
        if !bbox.is_valid() || bbox.is_degenerate() {
            return Err(Error::DegenerateBox);
        }
        let mut x = roi_align(features, &rh.context_box(bbox), rh.roi)?;
        if rh.tight_pool {
            x.extend(roi_align(features, bbox, rh.roi)?);
        }
        if rh.geometry {
            let s = features.stride as f64;
            x.push((bbox.width() / s).ln());
            x.push((bbox.height() / s).ln());
        }
        Ok(x)
    }

    /// Unit-norm region embedding for one box.
    pub fn region_forward(&self, features: &FeatureGrid, bbox: &BoxXYXY) -> Result<RegionTrace> {
        let rh = &self.config.region_head;
        let x = self.region_input(features, bbox)?;
        let p = &self.params.tensors;
        let mut h = vec![0.0; rh.hidden];
        linear_forward(&p[self.fc1.0].data, &p[self.fc1.1].data, &x, &mut h);
        relu_inplace(&mut h);
        let mut u = vec![0.0; rh.dim];
        linear_forward(&p[self.fc2.0].data, &p[self.fc2.1].data, &h, &mut u);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::NonFinite("region embedding has zero norm".into()));
        }
        let r = u.iter().map(|v| v / norm).collect();
        Ok(RegionTrace { bbox: *bbox, x, h, norm, r })
    }

    /// Region embeddings for many boxes; degenerate boxes are skipped with a log line.
    pub fn region_features(&self, features: &FeatureGrid, boxes: &[BoxXYXY]) -> Vec<Option<Vec<f64>>> {
        boxes
            .iter()
            .map(|b| match self.region_forward(features, b) {
                Ok(t) => Some(t.r),
                Err(e) => {
                    log::warn!("skipping region {:?}: {e}", b.to_array());
                    None
                }
            })
            .collect()
    }

    pub fn region_backward(&self, features: &FeatureGrid, trace: &RegionTrace, grad_r: &[f64], grads: &mut ParamSet, grad_features: &mut [f64]) -> Result<()> {
        let rh = &self.config.region_head;
        let rg: f64 = trace.r.iter().zip(grad_r).map(|(a, b)| a * b).sum();
        let gu: Vec<f64> = trace.r.iter().zip(grad_r).map(|(r, g)| (g - r * rg) / trace.norm).collect();
        let p = &self.params.tensors;
        let mut gh = vec![0.0; rh.hidden];
        {
            let (gw, gb) = grad_pair(grads, self.fc2.0, self.fc2.1);
            linear_backward(&p[self.fc2.0].data, &trace.h, &gu, gw, gb, Some(&mut gh));
        }
        relu_backward(&trace.h, &mut gh);
        let mut gx = vec![0.0; trace.x.len()];
        {
            let (gw, gb) = grad_pair(grads, self.fc1.0, self.fc1.1);
            linear_backward(&p[self.fc1.0].data, &trace.x, &gh, gw, gb, Some(&mut gx));
        }
        let pool = features.channels * rh.roi * rh.roi;
        roi_align_backward(features, &rh.context_box(&trace.bbox), rh.roi, &gx[..pool], grad_features)?;
        if rh.tight_pool {
            roi_align_backward(features, &trace.bbox, rh.roi, &gx[pool..2 * pool], grad_features)?;
        }
        Ok(())
    }

    /// Parameters whose names start with `prefix`.
    pub fn subset(&self, prefixes: &[&str]) -> ParamSet {
        ParamSet {
            tensors: self
                .params
                .tensors
                .iter()
                .filter(|t| prefixes.iter().any(|p| t.name.starts_with(p)))
                .cloned()
                .collect(),
        }
    }

    /// Encoder and heatmap head.
    pub fn decoder_params(&self) -> ParamSet {
        self.subset(&["enc.", "point."])
    }

    /// Region head.
    pub fn classifier_params(&self) -> ParamSet {
        self.subset(&["cls."])
    }

    /// Overwrite every tensor whose name appears in `src`.
    pub fn load_subset(&mut self, src: &ParamSet) -> Result<()> {
        for t in &src.tensors {
            let i = self
                .params
                .index_of(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", t.name)))?;
            if self.params.tensors[i].shape != t.shape {
                return Err(Error::ShapeMismatch {
                    expected: format!("{} {:?}", t.name, self.params.tensors[i].shape),
                    got: format!("{:?}", t.shape),
                });
            }
            self.params.tensors[i].data.copy_from_slice(&t.data);
        }
        Ok(())
    }
}

fn grad_pair(grads: &mut ParamSet, a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    assert!(a < b);
    let (l, r) = grads.tensors.split_at_mut(b);
    (&mut l[a].data, &mut r[0].data)
}

trait CloneShape {
    fn clone_shape(&self) -> FeatureGrid;
}

impl CloneShape for FeatureGrid {
    fn clone_shape(&self) -> FeatureGrid {
        FeatureGrid { channels: self.channels, height: self.height, width: self.width, stride: self.stride, data: Vec::new() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::dot;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { in_channels: 3, layers: vec![LayerSpec::new(3, 2, 2, 0), LayerSpec::new(3, 3, 1, 1)] },
            point_head: PointHeadConfig { layers: vec![LayerSpec::new(2, 3, 1, 1), LayerSpec::new(1, 1, 1, 0)] },
            region_head: RegionHeadConfig { roi: 2, hidden: 4, dim: 3, margin: 1.0, ..Default::default() },
        }
    }

    fn noise_image(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _| image::Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    #[test]
    fn zero_weights_give_uniform_half() {
        let mut m = Model::init(ModelConfig::default(), 1).unwrap();
        for t in m.params.tensors.iter_mut().filter(|t| t.name.starts_with("point.")) {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let f = m.toy_encode(&noise_image(32, 32, 2));
        let h = m.predict_heatmap(&f).unwrap();
        assert!(h.data.iter().all(|&v| v == 0.5));
        let ob = m.params.index_of("point.2.bias").unwrap();
        m.params.tensors[ob].data[0] = -4.0;
        let h = m.predict_heatmap(&f).unwrap();
        assert!(h.data.iter().all(|&v| (v - 0.017986209962091559).abs() < 1e-15));
    }

    #[test]
    fn encoder_is_deterministic_and_shift_equivariant() {
        let m = Model::init(ModelConfig::default(), 3).unwrap();
        let img = noise_image(64, 64, 4);
        let a = m.toy_encode(&img);
        assert_eq!(a, m.toy_encode(&img));
        assert_eq!((a.height, a.width, a.stride), (16, 16, 4));
        let shifted = RgbImage::from_fn(64, 64, |x, y| if x >= 4 { *img.get_pixel(x - 4, y) } else { image::Rgb([0, 0, 0]) });
        let b = m.toy_encode(&shifted);
        for c in 0..a.channels {
            for y in 2..14 {
                for x in 2..13 {
                    assert!((a.at(c, y, x) - b.at(c, y, x + 1)).abs() < 1e-12);
                }
            }
        }
        let zero = m.toy_encode(&RgbImage::new(64, 64));
        assert_eq!(zero, m.toy_encode(&RgbImage::new(64, 64)));
    }

    #[test]
    fn zero_mlp_weights_give_identical_embeddings() {
        let mut m = Model::init(ModelConfig::default(), 5).unwrap();
        for name in ["cls.fc1.weight", "cls.fc2.weight"] {
            let i = m.params.index_of(name).unwrap();
            m.params.tensors[i].data.iter_mut().for_each(|v| *v = 0.0);
        }
        let i = m.params.index_of("cls.fc2.bias").unwrap();
        m.params.tensors[i].data.iter_mut().enumerate().for_each(|(k, v)| *v = k as f64 + 1.0);
        let f = m.toy_encode(&noise_image(64, 64, 6));
        let rs = m.region_features(&f, &[BoxXYXY::new(1.0, 1.0, 5.0, 9.0), BoxXYXY::new(30.0, 20.0, 60.0, 50.0)]);
        let (a, b) = (rs[0].clone().unwrap(), rs[1].clone().unwrap());
        assert_eq!(a, b);
        assert!((dot(&a, &a) - 1.0).abs() < 1e-12);
        assert!(m.region_features(&f, &[BoxXYXY::new(3.0, 3.0, 3.0, 8.0)])[0].is_none());
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let m0 = Model::init(tiny_config(), 9).unwrap();
        let img = noise_image(12, 12, 10);
        let input = image_to_input(&img, 2);
        let boxes = [BoxXYXY::new(1.0, 2.0, 6.0, 5.0), BoxXYXY::new(4.0, 4.0, 11.0, 12.0)];
        let gh_seed: Vec<f64> = (0..36).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let gr_seed = [[0.3, -0.7, 0.2], [-0.1, 0.4, 0.9]];
        let objective = |m: &Model| -> f64 {
            let t = m.encode(&input);
            let h = m.point_forward(t.features()).unwrap();
            let mut l = dot(&h.heatmap.data, &gh_seed);
            for (b, g) in boxes.iter().zip(&gr_seed) {
                l += dot(&m.region_forward(t.features(), b).unwrap().r, g);
            }
            l
        };
        let t = m0.encode(&input);
        let pt = m0.point_forward(t.features()).unwrap();
        let mut grads = m0.params.zeros_like();
        let mut gf = vec![0.0; t.features().data.len()];
        m0.point_backward(&pt, &gh_seed, &mut grads, &mut gf);
        for (b, g) in boxes.iter().zip(&gr_seed) {
            let rt = m0.region_forward(t.features(), b).unwrap();
            m0.region_backward(t.features(), &rt, g, &mut grads, &mut gf).unwrap();
        }
        m0.encoder_backward(&t, gf, &mut grads);
        let flat = m0.params.flatten();
        let analytic = grads.flatten();
        let eps = 1e-6;
        let mut m = m0.clone();
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += eps;
            m.params.set_flat(&p);
            let lp = objective(&m);
            p[i] -= 2.0 * eps;
            m.params.set_flat(&p);
            let lm = objective(&m);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-6);
            assert!((fd - analytic[i]).abs() / denom < 1e-4, "param {i}: fd {fd} analytic {}", analytic[i]);
        }
    }
}
