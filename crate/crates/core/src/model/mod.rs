//! The symmetric encoder-decoder.
//!
//! Encoder stage `s` runs `convs_per_stage[s]` blocks of conv → batch norm → ReLU and
//! then a 2×2 max-pool that records its winner indices. Decoder stages run in the
//! opposite order: unpool with the matching stage's indices back to the recorded
//! pre-pool size, then the same number of conv → batch norm → ReLU blocks, the last of
//! which narrows the width to the previous stage's. A final 3×3 conv maps to the
//! output classes, followed by a sigmoid.

mod checkpoint;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
};

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_apply, batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward, maxpool2_backward,
    maxpool2_forward, maxunpool2_backward, maxunpool2_forward, relu, relu_backward, sigmoid, sigmoid_backward, BnCache,
    BnParams, ConvCache, ConvParams, Mode, PoolIndices, ReluCache, SigmoidCache,
};
use crate::tensor::{Prng, Tensor};
use crate::NUM_CLASSES;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub convs_per_stage: Vec<usize>,
    pub channels_per_stage: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl NetConfig {
    /// Two stages of two convolutions, widths 8 and 16.
    pub fn desk() -> Self {
        Self {
            convs_per_stage: vec![2, 2],
            channels_per_stage: vec![8, 16],
            in_channels: 3,
            out_channels: NUM_CLASSES,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    /// VGG16-sized encoder: 13 convolutions over five stages.
    pub fn full() -> Self {
        Self { convs_per_stage: vec![2, 2, 3, 3, 3], channels_per_stage: vec![64, 128, 256, 512, 512], ..Self::desk() }
    }

    pub fn stages(&self) -> usize {
        self.convs_per_stage.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s == 0 {
            return Err(Error::Config("at least one pooling stage is required".into()));
        }
        if self.channels_per_stage.len() != s {
            return Err(Error::Config(format!(
                "{} conv counts but {} channel widths",
                s,
                self.channels_per_stage.len()
            )));
        }
        if self.convs_per_stage.contains(&0) || self.channels_per_stage.contains(&0) {
            return Err(Error::Config("conv counts and channel widths must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("input and output channels must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum {} outside [0, 1]", self.bn_momentum)));
        }
        if self.bn_epsilon <= 0.0 || !self.bn_epsilon.is_finite() {
            return Err(Error::Config(format!("bn_epsilon {} must be positive", self.bn_epsilon)));
        }
        Ok(())
    }

    /// Spatial granularity the padded input must respect: `2^stages`.
    pub fn granularity(&self) -> usize {
        1 << self.stages()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: ConvParams,
    pub bn: BnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetConfig,
    /// `encoder[s]` holds the blocks of encoder stage `s`.
    pub encoder: Vec<Vec<ConvBlock>>,
    /// `decoder[s]` mirrors `encoder[s]`; executed from the deepest stage outwards.
    pub decoder: Vec<Vec<ConvBlock>>,
    pub classifier: ConvParams,
}

/// Gradients of every trainable tensor, in [`Network::trainable`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

#[derive(Debug)]
struct BlockCache {
    conv: ConvCache,
    bn: BnCache,
    relu: ReluCache,
}

#[derive(Debug)]
struct CacheInner {
    batch: usize,
    orig: (usize, usize),
    padded: (usize, usize),
    encoder: Vec<Vec<BlockCache>>,
    pools: Vec<PoolIndices>,
    decoder: Vec<Vec<BlockCache>>,
    classifier: ConvCache,
    sigmoid: SigmoidCache,
}

/// Everything the backward pass needs from one forward call. Usable once.
#[derive(Debug)]
pub struct ForwardCache {
    inner: Option<CacheInner>,
}

impl ForwardCache {
    pub fn is_consumed(&self) -> bool {
        self.inner.is_none()
    }

    /// Pre-pool spatial size recorded at each encoder stage.
    pub fn pre_pool_sizes(&self) -> Vec<(usize, usize)> {
        self.inner.as_ref().map(|c| c.pools.iter().map(|p| p.input_size()).collect()).unwrap_or_default()
    }
}

fn stage_widths(cfg: &NetConfig, s: usize) -> (usize, usize) {
    let input = if s == 0 { cfg.in_channels } else { cfg.channels_per_stage[s - 1] };
    (input, cfg.channels_per_stage[s])
}

impl Network {
    /// He-initialized network, deterministic per generator state.
    pub fn build(cfg: &NetConfig, prng: &mut Prng) -> Result<Self> {
        Self::construct(cfg, &mut |cin, cout| ConvParams::he(cin, cout, prng))
    }

    /// Network with every conv weight and bias zero (gamma 1, beta 0).
    pub fn zeros(cfg: &NetConfig) -> Result<Self> {
        Self::construct(cfg, &mut ConvParams::zeros)
    }

    fn construct(cfg: &NetConfig, make: &mut dyn FnMut(usize, usize) -> ConvParams) -> Result<Self> {
        cfg.validate()?;
        let block = |cin, cout, make: &mut dyn FnMut(usize, usize) -> ConvParams| ConvBlock {
            conv: make(cin, cout),
            bn: BnParams::new(cout, cfg.bn_momentum, cfg.bn_epsilon),
        };
        let mut encoder = Vec::with_capacity(cfg.stages());
        for s in 0..cfg.stages() {
            let (cin, width) = stage_widths(cfg, s);
            encoder.push(
                (0..cfg.convs_per_stage[s]).map(|k| block(if k == 0 { cin } else { width }, width, make)).collect(),
            );
        }
        // decoder stages are built in execution order (deepest first) so that the
        // generator is consumed in the same order the layers run
        let mut decoder: Vec<Vec<ConvBlock>> = vec![Vec::new(); cfg.stages()];
        for s in (0..cfg.stages()).rev() {
            let (narrow, width) = stage_widths(cfg, s);
            let narrow = if s == 0 { width } else { narrow };
            let k_last = cfg.convs_per_stage[s] - 1;
            decoder[s] = (0..=k_last).map(|k| block(width, if k == k_last { narrow } else { width }, make)).collect();
        }
        let classifier = make(cfg.channels_per_stage[0], cfg.out_channels);
        Ok(Self { config: cfg.clone(), encoder, decoder, classifier })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn encoder_conv_count(&self) -> usize {
        self.encoder.iter().map(Vec::len).sum()
    }

    pub fn decoder_conv_count(&self) -> usize {
        self.decoder.iter().map(Vec::len).sum()
    }

    /// Encoder + decoder + classifier convolutions.
    pub fn conv_count(&self) -> usize {
        self.encoder_conv_count() + self.decoder_conv_count() + 1
    }

    fn blocks(&self) -> impl Iterator<Item = (String, &ConvBlock)> {
        let enc = self
            .encoder
            .iter()
            .enumerate()
            .flat_map(|(s, st)| st.iter().enumerate().map(move |(k, b)| (format!("enc{s}.{k}"), b)));
        let dec = self
            .decoder
            .iter()
            .enumerate()
            .flat_map(|(s, st)| st.iter().enumerate().map(move |(k, b)| (format!("dec{s}.{k}"), b)));
        enc.chain(dec)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut()).flatten()
    }

    /// Trainable tensors: per block conv weight, conv bias, bn gamma, bn beta
    /// (encoder stages, then decoder stages, in index order), then the classifier.
    pub fn trainable(&self) -> Vec<&Tensor> {
        self.named_tensors(false).into_iter().map(|(_, t)| t).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()).flatten() {
            out.push(&mut b.conv.weight);
            out.push(&mut b.conv.bias);
            out.push(&mut b.bn.gamma);
            out.push(&mut b.bn.beta);
        }
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.named_tensors(false).into_iter().map(|(n, _)| n).collect()
    }

    /// All persisted tensors (trainable plus running statistics) with stable names.
    pub fn named_tensors(&self, with_running: bool) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, b) in self.blocks() {
            out.push((format!("{name}.conv.weight"), &b.conv.weight));
            out.push((format!("{name}.conv.bias"), &b.conv.bias));
            out.push((format!("{name}.bn.gamma"), &b.bn.gamma));
            out.push((format!("{name}.bn.beta"), &b.bn.beta));
            if with_running {
                out.push((format!("{name}.bn.running_mean"), &b.bn.running_mean));
                out.push((format!("{name}.bn.running_var"), &b.bn.running_var));
            }
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        out.push(("classifier.bias".into(), &self.classifier.bias));
        out
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names = self.named_tensors(true).into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        let mut refs: Vec<&mut Tensor> = Vec::new();
        for b in self.encoder.iter_mut().chain(self.decoder.iter_mut()).flatten() {
            refs.push(&mut b.conv.weight);
            refs.push(&mut b.conv.bias);
            refs.push(&mut b.bn.gamma);
            refs.push(&mut b.bn.beta);
            refs.push(&mut b.bn.running_mean);
            refs.push(&mut b.bn.running_var);
        }
        refs.push(&mut self.classifier.weight);
        refs.push(&mut self.classifier.bias);
        names.into_iter().zip(refs).collect()
    }

    /// Set every conv weight and bias to zero.
    pub fn zero_conv_params(&mut self) {
        for b in self.blocks_mut() {
            b.conv.weight.data_mut().fill(0.0);
            b.conv.bias.data_mut().fill(0.0);
        }
        self.classifier.weight.data_mut().fill(0.0);
        self.classifier.bias.data_mut().fill(0.0);
    }

    fn padded_size(&self, h: usize, w: usize) -> (usize, usize) {
        let g = self.config.granularity();
        (h.div_ceil(g) * g, w.div_ceil(g) * g)
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::shape(format!("network expects {} input channels, got {c}", self.config.in_channels)));
        }
        Ok((n, c, h, w))
    }

    /// Forward pass returning `[N, out_channels, H, W]` probabilities and a cache for [`Network::backward`].
    ///
    /// The input is zero-padded on the right and bottom to the next multiple of
    /// `2^stages` and the output is cropped back to `H × W`. Train mode updates the
    /// batch-norm running statistics.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, ForwardCache)> {
        let (n, _, h, w) = self.check_input(x)?;
        let padded = self.padded_size(h, w);
        let mut a = pad_to(x, padded.0, padded.1);

        let mut enc_caches = Vec::with_capacity(self.encoder.len());
        let mut pools = Vec::with_capacity(self.encoder.len());
        for stage in self.encoder.iter_mut() {
            let mut caches = Vec::with_capacity(stage.len());
            for block in stage.iter_mut() {
                let (y, c) = block_forward(&a, block, mode)?;
                caches.push(c);
                a = y;
            }
            let (pooled, idx) = maxpool2_forward(&a)?;
            pools.push(idx);
            enc_caches.push(caches);
            a = pooled;
        }

        let mut dec_caches: Vec<Vec<BlockCache>> = (0..self.decoder.len()).map(|_| Vec::new()).collect();
        for s in (0..self.decoder.len()).rev() {
            let (ph, pw) = pools[s].input_size();
            a = maxunpool2_forward(&a, &pools[s], ph, pw)?;
            let (_, _, uh, uw) = a.dims4()?;
            assert_eq!((uh, uw), (ph, pw), "decoder unpool target differs from encoder pre-pool size");
            for block in self.decoder[s].iter_mut() {
                let (y, c) = block_forward(&a, block, mode)?;
                dec_caches[s].push(c);
                a = y;
            }
        }

        let (logits, classifier) = conv2d_forward(&a, &self.classifier)?;
        let (probs, sig) = sigmoid(&logits);
        let out = crop(&probs, h, w);
        let cache = CacheInner {
            batch: n,
            orig: (h, w),
            padded,
            encoder: enc_caches,
            pools,
            decoder: dec_caches,
            classifier,
            sigmoid: sig,
        };
        Ok((out, ForwardCache { inner: Some(cache) }))
    }

    /// Inference-mode forward on a shared network; no cache, running statistics untouched.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = self.check_input(x)?;
        let padded = self.padded_size(h, w);
        let mut a = pad_to(x, padded.0, padded.1);
        let mut pools = Vec::with_capacity(self.encoder.len());
        for stage in &self.encoder {
            for block in stage {
                a = block_infer(&a, block)?;
            }
            let (pooled, idx) = maxpool2_forward(&a)?;
            pools.push(idx);
            a = pooled;
        }
        for s in (0..self.decoder.len()).rev() {
            let (ph, pw) = pools[s].input_size();
            a = maxunpool2_forward(&a, &pools[s], ph, pw)?;
            for block in &self.decoder[s] {
                a = block_infer(&a, block)?;
            }
        }
        let (logits, _) = conv2d_forward(&a, &self.classifier)?;
        Ok(crop(&sigmoid(&logits).0, h, w))
    }

    /// Exact gradients of a scalar loss given `d loss / d probs`.
    pub fn backward(&self, cache: &mut ForwardCache, grad_probs: &Tensor) -> Result<ParamGrads> {
        let c = cache
            .inner
            .take()
            .ok_or_else(|| Error::Usage("forward cache was already consumed by an earlier backward".into()))?;
        let expect = [c.batch, self.config.out_channels, c.orig.0, c.orig.1];
        if grad_probs.shape() != expect {
            return Err(Error::shape(format!("grad_probs shape {:?}, expected {:?}", grad_probs.shape(), expect)));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.trainable_count()];
        let block_slot = |stage_offset: usize, s: usize, k: usize, net: &Network| -> usize {
            let before: usize = if stage_offset == 0 {
                net.encoder[..s].iter().map(Vec::len).sum::<usize>()
            } else {
                net.encoder_conv_count() + net.decoder[..s].iter().map(Vec::len).sum::<usize>()
            };
            4 * (before + k)
        };

        let mut g = pad_to(grad_probs, c.padded.0, c.padded.1);
        g = sigmoid_backward(c.sigmoid, &g)?;
        let cg = conv2d_backward(c.classifier, &g)?;
        let n_tr = grads.len();
        grads[n_tr - 2] = Some(cg.weight);
        grads[n_tr - 1] = Some(cg.bias);
        g = cg.input;

        let mut dec = c.decoder;
        for s in 0..self.decoder.len() {
            let caches = std::mem::take(&mut dec[s]);
            for (k, bc) in caches.into_iter().enumerate().rev() {
                let slot = block_slot(1, s, k, self);
                let (gi, gw) = block_backward(bc, &g)?;
                g = gi;
                for (i, t) in gw.into_iter().enumerate() {
                    grads[slot + i] = Some(t);
                }
            }
            g = maxunpool2_backward(&c.pools[s], &g)?;
        }

        let mut enc = c.encoder;
        for s in (0..self.encoder.len()).rev() {
            g = maxpool2_backward(&c.pools[s], &g)?;
            let caches = std::mem::take(&mut enc[s]);
            for (k, bc) in caches.into_iter().enumerate().rev() {
                let slot = block_slot(0, s, k, self);
                let (gi, gw) = block_backward(bc, &g)?;
                g = gi;
                for (i, t) in gw.into_iter().enumerate() {
                    grads[slot + i] = Some(t);
                }
            }
        }
        Ok(ParamGrads { tensors: grads.into_iter().map(|t| t.expect("every slot filled")).collect() })
    }

    pub fn trainable_count(&self) -> usize {
        4 * (self.encoder_conv_count() + self.decoder_conv_count()) + 2
    }

    /// Overwrite a persisted tensor by name. Shapes must match.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .named_tensors_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Data(format!("unknown tensor name {name:?}")))?
            .1;
        if !slot.same_shape(&value) {
            return Err(Error::shape(format!("tensor {name}: shape {:?}, expected {:?}", value.shape(), slot.shape())));
        }
        *slot = value;
        Ok(())
    }
}

fn block_forward(x: &Tensor, b: &mut ConvBlock, mode: Mode) -> Result<(Tensor, BlockCache)> {
    let (y, conv) = conv2d_forward(x, &b.conv)?;
    let (y, bn) = batchnorm_forward(&y, &mut b.bn, mode)?;
    let (y, relu) = relu(&y);
    Ok((y, BlockCache { conv, bn, relu }))
}

fn block_infer(x: &Tensor, b: &ConvBlock) -> Result<Tensor> {
    let (y, _) = conv2d_forward(x, &b.conv)?;
    let (y, _, _) = batchnorm_apply(&y, &b.bn, Mode::Infer)?;
    Ok(relu(&y).0)
}

/// Returns the input gradient and `[weight, bias, gamma, beta]` gradients.
fn block_backward(c: BlockCache, g: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    let g = relu_backward(c.relu, g)?;
    let bg = batchnorm_backward(c.bn, &g)?;
    let cg = conv2d_backward(c.conv, &bg.input)?;
    Ok((cg.input, vec![cg.weight, cg.bias, bg.gamma, bg.beta]))
}

/// Zero-pad right/bottom of a `[N, C, H, W]` tensor.
fn pad_to(x: &Tensor, ph: usize, pw: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().expect("rank 4");
    if (h, w) == (ph, pw) {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[n, c, ph, pw]);
    for p in 0..n * c {
        for y in 0..h {
            out.data_mut()[p * ph * pw + y * pw..][..w].copy_from_slice(&x.data()[p * h * w + y * w..][..w]);
        }
    }
    out
}

fn crop(x: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c, ph, pw) = x.dims4().expect("rank 4");
    if (h, w) == (ph, pw) {
        return x.clone();
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for p in 0..n * c {
        for y in 0..h {
            out.data_mut()[p * h * w + y * w..][..w].copy_from_slice(&x.data()[p * ph * pw + y * pw..][..w]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_structure() {
        let net = Network::build(&NetConfig::desk(), &mut Prng::new(1)).unwrap();
        assert_eq!(net.encoder_conv_count(), 4);
        assert_eq!(net.decoder_conv_count(), 4);
        assert_eq!(net.conv_count(), 9);
        assert_eq!(net.classifier.weight.shape(), &[7, 8, 3, 3]);
        // mirrored widths
        assert_eq!(net.decoder[1][0].conv.weight.shape(), &[16, 16, 3, 3]);
        assert_eq!(net.decoder[1][1].conv.weight.shape(), &[8, 16, 3, 3]);
        assert_eq!(net.decoder[0][1].conv.weight.shape(), &[8, 8, 3, 3]);
        assert_eq!(net.trainable().len(), net.trainable_count());
        assert_eq!(net.trainable_names().len(), net.trainable_count());
    }

    #[test]
    fn full_structure() {
        let net = Network::zeros(&NetConfig::full()).unwrap();
        assert_eq!(net.encoder_conv_count(), 13);
        assert_eq!(net.decoder_conv_count(), 13);
        assert_eq!(net.encoder[4][2].conv.weight.shape(), &[512, 512, 3, 3]);
        assert_eq!(net.decoder[0][1].conv.weight.shape(), &[64, 64, 3, 3]);
        assert_eq!(net.decoder[1][1].conv.weight.shape(), &[64, 128, 3, 3]);
    }

    #[test]
    fn invalid_configs() {
        let mut c = NetConfig::desk();
        c.channels_per_stage = vec![8];
        assert!(matches!(Network::zeros(&c), Err(Error::Config(_))));
        let c = NetConfig { convs_per_stage: vec![], channels_per_stage: vec![], ..NetConfig::desk() };
        assert!(matches!(Network::zeros(&c), Err(Error::Config(_))));
        let c = NetConfig { convs_per_stage: vec![0, 2], ..NetConfig::desk() };
        assert!(Network::zeros(&c).is_err());
        let c = NetConfig { bn_epsilon: 0.0, ..NetConfig::desk() };
        assert!(Network::zeros(&c).is_err());
    }

    #[test]
    fn he_init_statistics() {
        let net = Network::build(&NetConfig::desk(), &mut Prng::new(3)).unwrap();
        let w = &net.decoder[1][0].conv.weight;
        let n = w.len() as f64;
        let var = w.data().iter().map(|x| x * x).sum::<f64>() / n;
        let expect = 2.0 / (16.0 * 9.0);
        assert!((var / expect - 1.0).abs() < 0.15, "var {var} vs {expect}");
        assert!(net.encoder[0][0].conv.bias.data().iter().all(|&b| b == 0.0));
        assert!(net.encoder[0][0].bn.gamma.data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn build_deterministic() {
        let a = Network::build(&NetConfig::desk(), &mut Prng::new(9)).unwrap();
        let b = Network::build(&NetConfig::desk(), &mut Prng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = Network::build(&NetConfig::desk(), &mut Prng::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_params_give_half() {
        let mut net = Network::zeros(&NetConfig::desk()).unwrap();
        let x = Prng::new(1).normal_tensor(&[2, 3, 12, 10], 0.0, 1.0).unwrap();
        let (y, _) = net.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        assert!(net.predict(&x).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn spatial_shapes() {
        let mut net = Network::build(&NetConfig::desk(), &mut Prng::new(2)).unwrap();
        let x = Tensor::zeros(&[1, 3, 36, 36]);
        let (y, cache) = net.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.shape(), &[1, 7, 36, 36]);
        assert_eq!(cache.pre_pool_sizes(), vec![(36, 36), (18, 18)]);
        let x = Tensor::zeros(&[1, 3, 35, 35]);
        let (y, cache) = net.forward(&x, Mode::Infer).unwrap();
        assert_eq!(y.shape(), &[1, 7, 35, 35]);
        assert_eq!(cache.pre_pool_sizes(), vec![(36, 36), (18, 18)]);
    }

    #[test]
    fn spatial_symmetry_sweep() {
        let net = Network::build(&NetConfig::desk(), &mut Prng::new(4)).unwrap();
        for h in 2..=40 {
            for w in 2..=40 {
                let y = net.predict(&Tensor::zeros(&[1, 3, h, w])).unwrap();
                assert_eq!(y.shape(), &[1, 7, h, w]);
            }
        }
    }

    #[test]
    fn wrong_input_channels() {
        let net = Network::zeros(&NetConfig::desk()).unwrap();
        assert!(matches!(net.predict(&Tensor::zeros(&[1, 1, 4, 4])), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_zero_grad_and_reuse() {
        let mut net = Network::build(&NetConfig::desk(), &mut Prng::new(5)).unwrap();
        let x = Prng::new(6).normal_tensor(&[2, 3, 8, 8], 0.0, 1.0).unwrap();
        let (y, mut cache) = net.forward(&x, Mode::Train).unwrap();
        let grads = net.backward(&mut cache, &Tensor::zeros(y.shape())).unwrap();
        assert_eq!(grads.tensors.len(), net.trainable_count());
        assert_eq!(grads.max_abs(), 0.0);
        for (g, p) in grads.tensors.iter().zip(net.trainable()) {
            assert_eq!(g.shape(), p.shape());
        }
        assert!(cache.is_consumed());
        assert!(matches!(net.backward(&mut cache, &Tensor::zeros(y.shape())), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_deterministic() {
        let net0 = Network::build(&NetConfig::desk(), &mut Prng::new(7)).unwrap();
        let x = Prng::new(8).normal_tensor(&[2, 3, 8, 8], 0.0, 1.0).unwrap();
        let g = Prng::new(9).normal_tensor(&[2, 7, 8, 8], 0.0, 1.0).unwrap();
        let run = || {
            let mut net = net0.clone();
            let (_, mut cache) = net.forward(&x, Mode::Train).unwrap();
            net.backward(&mut cache, &g).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn infer_independent_of_batch() {
        let mut net = Network::build(&NetConfig::desk(), &mut Prng::new(10)).unwrap();
        // give the running stats non-trivial values
        let warm = Prng::new(11).normal_tensor(&[2, 3, 8, 8], 0.5, 1.0).unwrap();
        net.forward(&warm, Mode::Train).unwrap();
        let x = Prng::new(12).normal_tensor(&[3, 3, 10, 6], 0.0, 1.0).unwrap();
        let batched = net.predict(&x).unwrap();
        for i in 0..3 {
            let single = net.predict(&x.slice_batch(i, 1).unwrap()).unwrap();
            assert_eq!(single, batched.slice_batch(i, 1).unwrap());
        }
        let (via_forward, _) = net.clone().forward(&x, Mode::Infer).unwrap();
        assert_eq!(via_forward, batched);
    }

    #[test]
    fn set_tensor_checks() {
        let mut net = Network::zeros(&NetConfig::desk()).unwrap();
        assert!(net.set_tensor("classifier.bias", Tensor::new(&[7], 1.0).unwrap()).is_ok());
        assert_eq!(net.classifier.bias.data(), &[1.0; 7]);
        assert!(net.set_tensor("classifier.bias", Tensor::zeros(&[6])).is_err());
        assert!(net.set_tensor("nope", Tensor::zeros(&[6])).is_err());
    }
}
