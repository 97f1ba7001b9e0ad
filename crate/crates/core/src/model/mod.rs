//! Encoder–decoder segmentation network.
//!
//! [`SegModel`] is an encoder `g` and a decoder `h` built from [`Sequential`]
//! blocks; logits are bilinearly upsampled to the input resolution. The same
//! parameter set serves as teacher (pseudo-label inference) and student.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featperturb::PerturbLocation;
use crate::nn::{
    backward_layers, count_tensors, forward_layers, forward_layers_cached, resize_bilinear, resize_bilinear_backward,
    Conv2d, Layer, SeqCache, Sequential,
};
use crate::rng::Rng;
use crate::tensor::{FeatureMap, ImageTensor, LogitMap, ProbabilityMap, Tensor3};

/// Widths of the reference network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyNetConfig {
    pub in_channels: usize,
    /// Output channels of the four encoder convolutions; the last is `D`.
    pub encoder_widths: [usize; 4],
    pub decoder_width: usize,
    /// Kernel of the first decoder convolution.
    pub decoder_kernel: usize,
    pub num_classes: usize,
}

impl Default for TinyNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            encoder_widths: [16, 24, 32, 32],
            decoder_width: 32,
            decoder_kernel: 5,
            num_classes: 3,
        }
    }
}

impl TinyNetConfig {
    /// A very small variant (< 1k parameters) for gradient checks.
    pub fn micro(num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            encoder_widths: [4, 4, 4, 6],
            decoder_width: 4,
            decoder_kernel: 3,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegModel {
    encoder: Sequential,
    decoder: Sequential,
    num_classes: usize,
}

/// Flat gradient buffers aligned with [`SegModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(model: &SegModel) -> Self {
        Gradients(model.params().iter().map(|(_, p)| vec![0.0; p.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.0 {
            for v in t {
                *v *= s;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn split_encoder_decoder(&mut self, encoder_tensors: usize) -> (&mut [Vec<f64>], &mut [Vec<f64>]) {
        self.0.split_at_mut(encoder_tensors)
    }
}

/// Activations kept from a cached decoder pass.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    seq: SeqCache,
    low_res: (usize, usize),
}

/// Activations of the part of the network below the perturbation point.
#[derive(Debug, Clone)]
pub struct TrunkCache {
    encoder: SeqCache,
    neck: SeqCache,
}

/// Anything that maps a feature map to logits and can pull a logit gradient
/// back to the features. The feature-space adversarial perturbation only needs
/// this much of a model.
pub trait FeatureDecoder {
    fn decode_logits(&self, feat: &FeatureMap) -> Result<LogitMap>;
    fn feature_gradient(&self, feat: &FeatureMap, grad_logits: &LogitMap) -> Result<FeatureMap>;
}

impl SegModel {
    /// Assembles a model from arbitrary encoder and decoder blocks.
    pub fn new(encoder: Sequential, decoder: Sequential, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let d = encoder
            .out_channels()
            .ok_or_else(|| Error::Config("encoder has no convolution".into()))?;
        if decoder.in_channels() != Some(d) {
            return Err(Error::Config(format!(
                "decoder input {:?} does not match encoder output {d}",
                decoder.in_channels()
            )));
        }
        if decoder.out_channels() != Some(num_classes) {
            return Err(Error::Config(format!(
                "decoder emits {:?} channels, expected {num_classes}",
                decoder.out_channels()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            num_classes,
        })
    }

    /// The reference network: four 3×3 conv blocks (overall stride 4) and a
    /// two-conv decoder.
    pub fn tiny(cfg: &TinyNetConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.decoder_kernel % 2 == 0 {
            return Err(Error::Config(format!("decoder_kernel must be odd, got {}", cfg.decoder_kernel)));
        }
        let [w0, w1, w2, d] = cfg.encoder_widths;
        let encoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new(cfg.in_channels, w0, 3, 1, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(w0, w1, 3, 2, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(w1, w2, 3, 1, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(w2, d, 3, 2, rng)),
            Layer::Relu,
        ]);
        let decoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new(d, cfg.decoder_width, cfg.decoder_kernel, 1, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(cfg.decoder_width, cfg.num_classes, 1, 1, rng)),
        ]);
        Self::new(encoder, decoder, cfg.num_classes)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.out_channels().unwrap_or(0)
    }

    pub fn in_channels(&self) -> usize {
        self.encoder.in_channels().unwrap_or(0)
    }

    pub fn stride(&self) -> usize {
        self.encoder.stride()
    }

    pub fn encoder(&self) -> &Sequential {
        &self.encoder
    }

    pub fn decoder(&self) -> &Sequential {
        &self.decoder
    }

    pub fn encoder_tensors(&self) -> usize {
        self.encoder.num_tensors()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Parameter tensors by canonical name, encoder first.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (block, seq) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, c) in seq.convs().enumerate() {
                out.push((format!("{block}.{i}.weight"), c.weight.as_slice()));
                out.push((format!("{block}.{i}.bias"), c.bias.as_slice()));
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for seq in [&mut self.encoder, &mut self.decoder] {
            for c in seq.convs_mut() {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
        }
        out
    }

    /// SHA-256 over all parameter bytes; equal checksums mean equal weights.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params() {
            h.update(name.as_bytes());
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        if image.channels() != self.in_channels() {
            return Err(Error::Argument(format!(
                "model expects {} input channels, image has {}",
                self.in_channels(),
                image.channels()
            )));
        }
        if image.height() == 0 || image.width() == 0 {
            return Err(Error::Argument("empty image".into()));
        }
        Ok(())
    }

    fn check_feature(&self, feat: &FeatureMap) -> Result<()> {
        if feat.channels() != self.feature_dim() {
            return Err(Error::Argument(format!(
                "decoder expects {} feature channels, got {}",
                self.feature_dim(),
                feat.channels()
            )));
        }
        Ok(())
    }

    /// `g(x)`.
    pub fn encode(&self, image: &ImageTensor) -> Result<FeatureMap> {
        self.check_image(image)?;
        self.encoder.forward(image)
    }

    pub fn encode_cached(&self, image: &ImageTensor) -> Result<(FeatureMap, SeqCache)> {
        self.check_image(image)?;
        self.encoder.forward_cached(image)
    }

    pub fn encode_backward(&self, cache: &SeqCache, grad_feat: FeatureMap, grads: &mut Gradients) {
        let n = self.encoder_tensors();
        let (enc, _) = grads.split_encoder_decoder(n);
        self.encoder.backward(cache, grad_feat, enc);
    }

    /// `h(e)`, upsampled by the encoder stride.
    pub fn decode(&self, feat: &FeatureMap) -> Result<LogitMap> {
        let s = self.stride();
        self.decode_to(feat, feat.height() * s, feat.width() * s)
    }

    /// `h(e)`, upsampled to an explicit input resolution.
    pub fn decode_to(&self, feat: &FeatureMap, height: usize, width: usize) -> Result<LogitMap> {
        self.check_feature(feat)?;
        let low = self.decoder.forward(feat)?;
        Ok(resize_bilinear(&low, height, width))
    }

    pub fn decode_cached(&self, feat: &FeatureMap, height: usize, width: usize) -> Result<(LogitMap, DecodeCache)> {
        self.check_feature(feat)?;
        let (low, seq) = self.decoder.forward_cached(feat)?;
        let low_res = (low.height(), low.width());
        Ok((resize_bilinear(&low, height, width), DecodeCache { seq, low_res }))
    }

    /// Accumulates decoder gradients and returns the gradient w.r.t. the features.
    pub fn decode_backward(&self, cache: &DecodeCache, grad_logits: &LogitMap, grads: &mut Gradients) -> FeatureMap {
        let n = self.encoder_tensors();
        let (_, dec) = grads.split_encoder_decoder(n);
        let g_low = resize_bilinear_backward(grad_logits, cache.low_res.0, cache.low_res.1);
        self.decoder.backward(&cache.seq, g_low, dec)
    }

    /// `F(x) = h(g(x))` at the input resolution.
    pub fn forward(&self, image: &ImageTensor) -> Result<LogitMap> {
        let feat = self.encode(image)?;
        self.decode_to(&feat, image.height(), image.width())
    }

    pub fn predict(&self, image: &ImageTensor) -> Result<ProbabilityMap> {
        Ok(ProbabilityMap::from_logits(&self.forward(image)?))
    }

    /// Bi-temporal change detection: decode the difference of the two encodings.
    pub fn cd_forward(&self, image_a: &ImageTensor, image_b: &ImageTensor) -> Result<LogitMap> {
        image_a.ensure_same_shape(image_b, "change-detection pair")?;
        let diff = self.cd_feature_difference(image_a, image_b)?;
        self.decode_to(&diff, image_a.height(), image_a.width())
    }

    /// `g(a) − g(b)`.
    pub fn cd_feature_difference(&self, image_a: &ImageTensor, image_b: &ImageTensor) -> Result<FeatureMap> {
        image_a.ensure_same_shape(image_b, "change-detection pair")?;
        let fa = self.encode(image_a)?;
        let fb = self.encode(image_b)?;
        fa.zip_map(&fb, |a, b| a - b)
    }
    fn decoder_split(&self, location: PerturbLocation) -> usize {
        match location {
            PerturbLocation::EncoderDecoder => 0,
            PerturbLocation::PreClassifier => self
                .decoder
                .layers
                .iter()
                .rposition(|l| matches!(l, Layer::Conv(_)))
                .unwrap_or(0),
        }
    }

    /// Channels of the tensor at the perturbation point.
    pub fn perturb_channels(&self, location: PerturbLocation) -> usize {
        let split = self.decoder_split(location);
        self.decoder.layers[..split]
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv(c) => Some(c.out_channels),
                Layer::Relu => None,
            })
            .unwrap_or_else(|| self.feature_dim())
    }

    /// Encoder plus the decoder layers that precede the perturbation point.
    pub fn trunk_cached(&self, image: &ImageTensor, location: PerturbLocation) -> Result<(Tensor3, TrunkCache)> {
        let (feat, encoder) = self.encode_cached(image)?;
        let split = self.decoder_split(location);
        let (out, neck) = forward_layers_cached(&self.decoder.layers[..split], &feat)?;
        Ok((out, TrunkCache { encoder, neck }))
    }

    pub fn trunk(&self, image: &ImageTensor, location: PerturbLocation) -> Result<Tensor3> {
        let feat = self.encode(image)?;
        forward_layers(&self.decoder.layers[..self.decoder_split(location)], &feat)
    }

    pub fn trunk_backward(&self, cache: &TrunkCache, location: PerturbLocation, grad: Tensor3, grads: &mut Gradients) {
        let split = self.decoder_split(location);
        let n_enc = self.encoder_tensors();
        let n_neck = count_tensors(&self.decoder.layers[..split]);
        let (enc, dec) = grads.split_encoder_decoder(n_enc);
        let g_feat = backward_layers(&self.decoder.layers[..split], &cache.neck, grad, &mut dec[..n_neck]);
        self.encoder.backward(&cache.encoder, g_feat, enc);
    }

    /// Remaining decoder layers plus upsampling to `height × width`.
    pub fn head_cached(
        &self,
        x: &Tensor3,
        location: PerturbLocation,
        height: usize,
        width: usize,
    ) -> Result<(LogitMap, DecodeCache)> {
        let split = self.decoder_split(location);
        if split == 0 {
            self.check_feature(x)?;
        }
        let (low, seq) = forward_layers_cached(&self.decoder.layers[split..], x)?;
        let low_res = (low.height(), low.width());
        Ok((resize_bilinear(&low, height, width), DecodeCache { seq, low_res }))
    }

    pub fn head(&self, x: &Tensor3, location: PerturbLocation, height: usize, width: usize) -> Result<LogitMap> {
        let split = self.decoder_split(location);
        if split == 0 {
            self.check_feature(x)?;
        }
        let low = forward_layers(&self.decoder.layers[split..], x)?;
        Ok(resize_bilinear(&low, height, width))
    }

    /// Accumulates head gradients; returns the gradient at the perturbation point.
    pub fn head_backward(
        &self,
        cache: &DecodeCache,
        location: PerturbLocation,
        grad_logits: &LogitMap,
        grads: &mut Gradients,
    ) -> Tensor3 {
        let split = self.decoder_split(location);
        let n_enc = self.encoder_tensors();
        let n_neck = count_tensors(&self.decoder.layers[..split]);
        let (_, dec) = grads.split_encoder_decoder(n_enc);
        let g_low = resize_bilinear_backward(grad_logits, cache.low_res.0, cache.low_res.1);
        backward_layers(&self.decoder.layers[split..], &cache.seq, g_low, &mut dec[n_neck..])
    }

    /// The head at `location` seen as a [`FeatureDecoder`] producing `height × width` logits.
    pub fn head_decoder(&self, location: PerturbLocation, height: usize, width: usize) -> HeadDecoder<'_> {
        HeadDecoder {
            model: self,
            location,
            height,
            width,
        }
    }
}

/// Borrowed view of a model's head; see [`SegModel::head_decoder`].
pub struct HeadDecoder<'a> {
    model: &'a SegModel,
    location: PerturbLocation,
    height: usize,
    width: usize,
}

impl FeatureDecoder for HeadDecoder<'_> {
    fn decode_logits(&self, feat: &FeatureMap) -> Result<LogitMap> {
        self.model.head(feat, self.location, self.height, self.width)
    }

    fn feature_gradient(&self, feat: &FeatureMap, grad_logits: &LogitMap) -> Result<FeatureMap> {
        let (_, cache) = self.model.head_cached(feat, self.location, self.height, self.width)?;
        let mut scratch = Gradients::zeros_like(self.model);
        Ok(self.model.head_backward(&cache, self.location, grad_logits, &mut scratch))
    }
}


impl FeatureDecoder for SegModel {
    fn decode_logits(&self, feat: &FeatureMap) -> Result<LogitMap> {
        self.decode(feat)
    }

    fn feature_gradient(&self, feat: &FeatureMap, grad_logits: &LogitMap) -> Result<FeatureMap> {
        let (_, cache) = self.decode_cached(feat, grad_logits.height(), grad_logits.width())?;
        let mut scratch = Gradients::zeros_like(self);
        Ok(self.decode_backward(&cache, grad_logits, &mut scratch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_tensor;
    use crate::rng::SeedTree;

    fn model() -> SegModel {
        SegModel::tiny(&TinyNetConfig::default(), &mut SeedTree::new(0).rng()).unwrap()
    }

    #[test]
    fn declared_stride_arithmetic() {
        let m = model();
        assert_eq!(m.stride(), 4);
        let x = Tensor3::filled(3, 64, 64, 0.5);
        let f = m.encode(&x).unwrap();
        assert_eq!(f.shape(), (32, 16, 16));
        let logits = m.decode(&f).unwrap();
        assert_eq!(logits.shape(), (3, 64, 64));
    }

    #[test]
    fn decode_restores_odd_input_size() {
        let m = model();
        let x = Tensor3::filled(3, 13, 10, 0.2);
        assert_eq!(m.forward(&x).unwrap().shape(), (3, 13, 10));
    }

    #[test]
    fn zero_encoder_gives_zero_features() {
        let enc = Sequential::new(vec![
            Layer::Conv(Conv2d::zeroed(3, 4, 3, 2)),
            Layer::Relu,
            Layer::Conv(Conv2d::zeroed(4, 8, 3, 2)),
        ]);
        let dec = Sequential::new(vec![Layer::Conv(Conv2d::zeroed(8, 2, 1, 1))]);
        let m = SegModel::new(enc, dec, 2).unwrap();
        let x = uniform_tensor(3, 16, 16, -1.0, 1.0, &mut SeedTree::new(5).rng());
        assert!(m.encode(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_an_argument_error() {
        let m = model();
        assert!(matches!(m.encode(&Tensor3::zeros(1, 8, 8)), Err(Error::Argument(_))));
        assert!(matches!(m.decode(&Tensor3::zeros(5, 2, 2)), Err(Error::Argument(_))));
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = model();
        let x = uniform_tensor(3, 32, 32, 0.0, 1.0, &mut SeedTree::new(9).rng());
        assert_eq!(m.encode(&x).unwrap(), m.encode(&x).unwrap());
        assert_eq!(m.checksum(), m.clone().checksum());
    }

    #[test]
    fn predict_is_a_simplex() {
        let m = model();
        let x = uniform_tensor(3, 16, 16, 0.0, 1.0, &mut SeedTree::new(10).rng());
        let p = m.predict(&x).unwrap();
        ProbabilityMap::try_new(p.tensor().clone()).unwrap();
        let (k, h, w) = p.tensor().shape();
        for px in 0..h * w {
            let s: f64 = (0..k).map(|c| p.tensor().data()[c * h * w + px]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn change_detection_identity_and_antisymmetry() {
        let cfg = TinyNetConfig {
            num_classes: 2,
            ..TinyNetConfig::default()
        };
        let m = SegModel::tiny(&cfg, &mut SeedTree::new(1).rng()).unwrap();
        let mut rng = SeedTree::new(2).rng();
        let a = uniform_tensor(3, 16, 16, 0.0, 1.0, &mut rng);
        let b = uniform_tensor(3, 16, 16, 0.0, 1.0, &mut rng);
        let zero = Tensor3::zeros(m.feature_dim(), 4, 4);
        assert_eq!(m.cd_forward(&a, &a).unwrap(), m.decode_to(&zero, 16, 16).unwrap());
        let ab = m.cd_feature_difference(&a, &b).unwrap();
        let ba = m.cd_feature_difference(&b, &a).unwrap();
        assert_eq!(ab, ba.map(|v| -v));
        let step = {
            let fa = m.encode(&a).unwrap();
            let fb = m.encode(&b).unwrap();
            let d = fa.zip_map(&fb, |x, y| x - y).unwrap();
            m.decode_to(&d, 16, 16).unwrap()
        };
        assert_eq!(m.cd_forward(&a, &b).unwrap(), step);
        assert!(m.cd_forward(&a, &Tensor3::zeros(3, 8, 8)).is_err());
    }
}
