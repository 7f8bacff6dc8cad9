// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual convolutional encoder mapping a window to a representation vector,
//! and the softmax classifier built on top of it.
//!
//! Each residual block runs one convolution per configured kernel size, each
//! followed by batch normalization; all but the last are followed by a ReLU.
//! The shortcut is the identity when channel counts agree and a 1x1
//! convolution plus batch normalization otherwise. The block output is
//! `relu(main + shortcut)`. After the blocks, global average pooling over time
//! feeds one fully-connected layer.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataset::Window;
use crate::error::{CarlaError, Result};
use crate::inject::RandomSource;
use crate::nn::{
    relu_backward, relu_inplace, BatchNorm1d, BnCache, Conv1d, Linear, Matrix, Param,
    Parameterized, Scalar, Tensor3,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kernel_sizes: Vec<usize>,
    /// Output channels of each residual block.
    pub channels: Vec<usize>,
    pub rep_dim: usize,
    pub input_dims: usize,
    pub window_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![8, 5, 3],
            channels: vec![64, 128, 128],
            rep_dim: 128,
            input_dims: 1,
            window_size: 200,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(CarlaError::Config("kernel sizes must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(CarlaError::Config("block channels must be positive".into()));
        }
        if self.rep_dim == 0 || self.input_dims == 0 || self.window_size == 0 {
            return Err(CarlaError::Config(
                "rep_dim, input_dims and window_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ResidualBlock<S> {
    convs: Vec<Conv1d<S>>,
    norms: Vec<BatchNorm1d<S>>,
    shortcut: Option<(Conv1d<S>, BatchNorm1d<S>)>,
}

struct BlockCache<S> {
    /// Input of each convolution; entry 0 is the block input.
    inputs: Vec<Tensor3<S>>,
    norms: Vec<BnCache<S>>,
    shortcut: Option<BnCache<S>>,
    output: Tensor3<S>,
}

impl<S: Scalar> ResidualBlock<S> {
    fn new(cin: usize, cout: usize, kernels: &[usize], rng: &mut RandomSource) -> Self {
        let mut convs = Vec::with_capacity(kernels.len());
        let mut norms = Vec::with_capacity(kernels.len());
        let mut c = cin;
        for &k in kernels {
            convs.push(Conv1d::new(c, cout, k, rng));
            norms.push(BatchNorm1d::new(cout));
            c = cout;
        }
        let shortcut = (cin != cout).then(|| (Conv1d::new(cin, cout, 1, rng), BatchNorm1d::new(cout)));
        Self {
            convs,
            norms,
            shortcut,
        }
    }

    fn forward_train(&mut self, x: Tensor3<S>) -> (Tensor3<S>, BlockCache<S>) {
        let depth = self.convs.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut norms = Vec::with_capacity(depth);
        let mut h = x;
        for j in 0..depth {
            let z = self.convs[j].forward(&h);
            let (mut y, cache) = self.norms[j].forward_train(&z);
            norms.push(cache);
            if j + 1 < depth {
                relu_inplace(&mut y.data);
            }
            inputs.push(h);
            h = y;
        }
        let (shortcut, sc_cache) = match &mut self.shortcut {
            Some((conv, bn)) => {
                let (y, cache) = bn.forward_train(&conv.forward(&inputs[0]));
                (y, Some(cache))
            }
            None => (inputs[0].clone(), None),
        };
        for (o, s) in h.data.iter_mut().zip(&shortcut.data) {
            *o = *o + *s;
        }
        relu_inplace(&mut h.data);
        let cache = BlockCache {
            inputs,
            norms,
            shortcut: sc_cache,
            output: h.clone(),
        };
        (h, cache)
    }

    fn forward_eval(&self, x: &Tensor3<S>) -> Tensor3<S> {
        let depth = self.convs.len();
        let mut h = x.clone();
        for j in 0..depth {
            h = self.norms[j].forward_eval(&self.convs[j].forward(&h));
            if j + 1 < depth {
                relu_inplace(&mut h.data);
            }
        }
        let shortcut = match &self.shortcut {
            Some((conv, bn)) => bn.forward_eval(&conv.forward(x)),
            None => x.clone(),
        };
        for (o, s) in h.data.iter_mut().zip(&shortcut.data) {
            *o = *o + *s;
        }
        relu_inplace(&mut h.data);
        h
    }

    fn backward(
        &mut self,
        cache: &BlockCache<S>,
        mut d_out: Tensor3<S>,
        need_input_grad: bool,
    ) -> Option<Tensor3<S>> {
        relu_backward(&cache.output.data, &mut d_out.data);
        let d_shortcut = d_out.clone();
        let mut d = d_out;
        let mut d_main = None;
        for j in (0..self.convs.len()).rev() {
            let dz = self.norms[j].backward(&cache.norms[j], &d);
            let need = j > 0 || need_input_grad;
            let dx = self.convs[j].backward(&cache.inputs[j], &dz, need);
            if j > 0 {
                d = dx.expect("requested input gradient");
                relu_backward(&cache.inputs[j].data, &mut d.data);
            } else {
                d_main = dx;
            }
        }
        let d_skip = match (&mut self.shortcut, &cache.shortcut) {
            (Some((conv, bn)), Some(bn_cache)) => {
                let dz = bn.backward(bn_cache, &d_shortcut);
                conv.backward(&cache.inputs[0], &dz, need_input_grad)
            }
            _ => need_input_grad.then_some(d_shortcut),
        };
        match (d_main, d_skip) {
            (Some(mut a), Some(b)) => {
                for (x, y) in a.data.iter_mut().zip(&b.data) {
                    *x = *x + *y;
                }
                Some(a)
            }
            _ => None,
        }
    }
}

impl<S: Scalar> Parameterized<S> for ResidualBlock<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        for (j, (conv, bn)) in self.convs.iter_mut().zip(&mut self.norms).enumerate() {
            conv.visit_params(&format!("{prefix}.conv{j}"), f);
            bn.visit_params(&format!("{prefix}.bn{j}"), f);
        }
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params(&format!("{prefix}.shortcut_conv"), f);
            bn.visit_params(&format!("{prefix}.shortcut_bn"), f);
        }
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        for (j, bn) in self.norms.iter_mut().enumerate() {
            bn.visit_buffers(&format!("{prefix}.bn{j}"), f);
        }
        if let Some((_, bn)) = &mut self.shortcut {
            bn.visit_buffers(&format!("{prefix}.shortcut_bn"), f);
        }
    }
}

/// The representation network.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<S> {
    config: EncoderConfig,
    blocks: Vec<ResidualBlock<S>>,
    fc: Linear<S>,
}

/// Forward state kept for [`Encoder::backward`].
pub struct EncoderCache<S> {
    blocks: Vec<BlockCache<S>>,
    pooled: Matrix<S>,
    length: usize,
}

impl<S: Scalar> Encoder<S> {
    /// Deterministically initialized encoder.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RandomSource::seed_from_u64(seed);
        let mut cin = config.input_dims;
        let blocks = config
            .channels
            .iter()
            .map(|&cout| {
                let block = ResidualBlock::new(cin, cout, &config.kernel_sizes, &mut rng);
                cin = cout;
                block
            })
            .collect();
        let fc = Linear::new(cin, config.rep_dim, &mut rng);
        Ok(Self {
            config,
            blocks,
            fc,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn rep_dim(&self) -> usize {
        self.config.rep_dim
    }

    fn check_input(&self, x: &Tensor3<S>) -> Result<()> {
        if x.c != self.config.input_dims {
            return Err(CarlaError::Shape(format!(
                "encoder expects {} input dimensions, got {}",
                self.config.input_dims, x.c
            )));
        }
        if x.n == 0 || x.l == 0 {
            return Err(CarlaError::Shape("empty batch".into()));
        }
        if x.data.iter().any(|v| !v.is_finite()) {
            return Err(CarlaError::Data("non-finite value in encoder input".into()));
        }
        Ok(())
    }

    /// Training-mode forward pass (batch statistics; running stats updated).
    pub fn forward_train(&mut self, x: &Tensor3<S>) -> Result<(Matrix<S>, EncoderCache<S>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let (y, cache) = block.forward_train(h);
            caches.push(cache);
            h = y;
        }
        let pooled = global_average_pool(&h);
        let rep = self.fc.forward(&pooled);
        Ok((
            rep,
            EncoderCache {
                blocks: caches,
                pooled,
                length: h.l,
            },
        ))
    }

    /// Evaluation-mode forward pass; read-only and independent across samples.
    pub fn forward_eval(&self, x: &Tensor3<S>) -> Result<Matrix<S>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward_eval(&h);
        }
        Ok(self.fc.forward(&global_average_pool(&h)))
    }

    /// Accumulates parameter gradients given the gradient of the representations.
    pub fn backward(&mut self, cache: &EncoderCache<S>, d_rep: &Matrix<S>) {
        let d_pooled = self.fc.backward(&cache.pooled, d_rep);
        let (n, c, l) = (d_pooled.rows, d_pooled.cols, cache.length);
        let inv = S::from_f64_lossy(1.0 / l as f64);
        let mut d = Tensor3::zeros(n, c, l);
        for i in 0..n {
            for ch in 0..c {
                let g = d_pooled.data[i * c + ch] * inv;
                d.data[(i * c + ch) * l..(i * c + ch + 1) * l]
                    .iter_mut()
                    .for_each(|v| *v = g);
            }
        }
        for (b, block) in self.blocks.iter_mut().enumerate().rev() {
            match block.backward(&cache.blocks[b], d.clone(), b > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    /// Encodes many windows in evaluation mode, `batch` at a time.
    pub fn encode_windows(&self, windows: &[&Window], batch: usize) -> Result<Matrix<S>> {
        let mut out = Matrix::zeros(0, self.rep_dim());
        for chunk in windows.chunks(batch.max(1)) {
            let rep = self.forward_eval(&windows_to_tensor(chunk)?)?;
            out.data.extend(rep.data);
            out.rows += rep.rows;
        }
        Ok(out)
    }
}

impl<S: Scalar> Parameterized<S> for Encoder<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params(&crate::nn::join_name(prefix, &format!("block{b}")), f);
        }
        self.fc
            .visit_params(&crate::nn::join_name(prefix, "fc"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.visit_buffers(&crate::nn::join_name(prefix, &format!("block{b}")), f);
        }
    }
}

fn global_average_pool<S: Scalar>(h: &Tensor3<S>) -> Matrix<S> {
    let mut pooled = Matrix::zeros(h.n, h.c);
    let inv = 1.0 / h.l as f64;
    for i in 0..h.n {
        for ch in 0..h.c {
            let base = (i * h.c + ch) * h.l;
            let s: f64 = h.data[base..base + h.l].iter().map(|v| v.as_f64()).sum();
            pooled.data[i * h.c + ch] = S::from_f64_lossy(s * inv);
        }
    }
    pooled
}

/// Stacks equally shaped windows into a `[n][dims][len]` tensor.
pub fn windows_to_tensor<S: Scalar>(windows: &[&Window]) -> Result<Tensor3<S>> {
    let first = windows
        .first()
        .ok_or_else(|| CarlaError::Shape("empty batch".into()))?;
    let (c, l) = (first.dims(), first.len());
    let mut data = Vec::with_capacity(windows.len() * c * l);
    for w in windows {
        if w.dims() != c || w.len() != l {
            return Err(CarlaError::Shape(format!(
                "window {}x{} in a batch of {c}x{l}",
                w.dims(),
                w.len()
            )));
        }
        data.extend(w.as_slice().iter().map(|&v| S::from_f64_lossy(v)));
    }
    Ok(Tensor3::from_vec(windows.len(), c, l, data))
}

/// Encoder backbone followed by a linear head and a softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<S> {
    pub encoder: Encoder<S>,
    pub head: Linear<S>,
}

pub struct ClassifierCache<S> {
    encoder: EncoderCache<S>,
    rep: Matrix<S>,
    probs: Matrix<S>,
}

impl<S: Scalar> Classifier<S> {
    /// Wraps a (pretrained) encoder with a freshly initialized head.
    pub fn new(encoder: Encoder<S>, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(CarlaError::Config(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        let mut rng = RandomSource::seed_from_u64(seed);
        let head = Linear::new(encoder.rep_dim(), classes, &mut rng);
        Ok(Self { encoder, head })
    }

    pub fn classes(&self) -> usize {
        self.head.outputs()
    }

    pub fn forward_train(&mut self, x: &Tensor3<S>) -> Result<(Matrix<S>, ClassifierCache<S>)> {
        let (rep, encoder) = self.encoder.forward_train(x)?;
        let probs = softmax_rows(&self.head.forward(&rep));
        Ok((
            probs.clone(),
            ClassifierCache {
                encoder,
                rep,
                probs,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor3<S>) -> Result<Matrix<S>> {
        let rep = self.encoder.forward_eval(x)?;
        Ok(softmax_rows(&self.head.forward(&rep)))
    }

    /// Backpropagates a gradient with respect to the output probabilities.
    pub fn backward(&mut self, cache: &ClassifierCache<S>, d_probs: &Matrix<S>) {
        let mut d_logits = Matrix::zeros(d_probs.rows, d_probs.cols);
        for r in 0..d_probs.rows {
            let p = cache.probs.row(r);
            let dp = d_probs.row(r);
            let dot: f64 = p.iter().zip(dp).map(|(a, b)| a.as_f64() * b.as_f64()).sum();
            for (k, out) in d_logits.row_mut(r).iter_mut().enumerate() {
                *out = S::from_f64_lossy(p[k].as_f64() * (dp[k].as_f64() - dot));
            }
        }
        let d_rep = self.head.backward(&cache.rep, &d_logits);
        self.encoder.backward(&cache.encoder, &d_rep);
    }

    /// Class probabilities for many windows in evaluation mode.
    pub fn predict_windows(&self, windows: &[&Window], batch: usize) -> Result<Matrix<S>> {
        let mut out = Matrix::zeros(0, self.classes());
        for chunk in windows.chunks(batch.max(1)) {
            let p = self.forward_eval(&windows_to_tensor(chunk)?)?;
            out.data.extend(p.data);
            out.rows += p.rows;
        }
        Ok(out)
    }
}

impl<S: Scalar> Parameterized<S> for Classifier<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        self.encoder
            .visit_params(&crate::nn::join_name(prefix, "encoder"), f);
        self.head
            .visit_params(&crate::nn::join_name(prefix, "head"), f);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        self.encoder
            .visit_buffers(&crate::nn::join_name(prefix, "encoder"), f);
    }
}

fn softmax_rows<S: Scalar>(logits: &Matrix<S>) -> Matrix<S> {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(r).iter_mut().zip(exps) {
            *o = S::from_f64_lossy(e / total);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dims: usize, len: usize) -> EncoderConfig {
        EncoderConfig {
            kernel_sizes: vec![8, 5, 3],
            channels: vec![4, 8, 8],
            rep_dim: 6,
            input_dims: dims,
            window_size: len,
        }
    }

    fn batch(n: usize, dims: usize, len: usize, phase: f64) -> Tensor3<f64> {
        let data = (0..n * dims * len)
            .map(|i| ((i as f64) * 0.37 + phase).sin())
            .collect();
        Tensor3::from_vec(n, dims, len, data)
    }

    #[test]
    fn defaults_follow_published_architecture() {
        let c = EncoderConfig::default();
        assert_eq!(c.kernel_sizes, vec![8, 5, 3]);
        assert_eq!(c.channels, vec![64, 128, 128]);
        assert_eq!(c.rep_dim, 128);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Encoder::<f32>::new(tiny_config(2, 16), 5).unwrap();
        let b = Encoder::<f32>::new(tiny_config(2, 16), 5).unwrap();
        let c = Encoder::<f32>::new(tiny_config(2, 16), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn output_shape_follows_rep_dim() {
        for rep in [3, 11] {
            let mut cfg = tiny_config(1, 20);
            cfg.rep_dim = rep;
            let enc = Encoder::<f64>::new(cfg, 1).unwrap();
            let out = enc.forward_eval(&batch(5, 1, 20, 0.0)).unwrap();
            assert_eq!((out.rows, out.cols), (5, rep));
        }
    }

    #[test]
    fn eval_is_batch_independent() {
        let enc = Encoder::<f32>::new(tiny_config(2, 16), 2).unwrap();
        let x = batch(8, 2, 16, 0.3);
        let x32 = Tensor3::from_vec(8, 2, 16, x.data.iter().map(|&v| v as f32).collect());
        let all = enc.forward_eval(&x32).unwrap();
        let one = Tensor3::from_vec(1, 2, 16, x32.sample(5).to_vec());
        let single = enc.forward_eval(&one).unwrap();
        for (a, b) in all.row(5).iter().zip(single.row(0)) {
            assert!((a - b).abs() < 1e-5);
        }
        assert_eq!(all, enc.forward_eval(&x32).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let enc = Encoder::<f64>::new(tiny_config(2, 16), 2).unwrap();
        assert!(enc.forward_eval(&batch(2, 3, 16, 0.0)).is_err());
        let mut x = batch(2, 2, 16, 0.0);
        x.data[7] = f64::NAN;
        assert!(enc.forward_eval(&x).is_err());
    }

    #[test]
    fn classifier_outputs_distributions() {
        let enc = Encoder::<f32>::new(tiny_config(2, 16), 3).unwrap();
        let clf = Classifier::new(enc, 4, 9).unwrap();
        let x = batch(6, 2, 16, 1.0);
        let x32 = Tensor3::from_vec(6, 2, 16, x.data.iter().map(|&v| v as f32).collect());
        let p = clf.forward_eval(&x32).unwrap();
        for r in 0..p.rows {
            let s: f32 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
            assert!(p.row(r).iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        // loss = sum(rep * weights) so d_rep is a fixed matrix
        let mut enc = Encoder::<f64>::new(tiny_config(2, 16), 11).unwrap();
        let x = batch(4, 2, 16, 0.2);
        let weights: Vec<f64> = (0..4 * 6).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let loss = |enc: &mut Encoder<f64>| -> f64 {
            let (rep, _) = enc.forward_train(&x).unwrap();
            rep.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        enc.zero_grad();
        let (_, cache) = enc.forward_train(&x).unwrap();
        enc.backward(&cache, &Matrix::from_vec(4, 6, weights.clone()));
        let mut analytic = Vec::new();
        enc.visit_params("", &mut |_, p| analytic.extend(p.grad.iter().copied()));
        let total = analytic.len();
        let h = 1e-6;
        for probe in (0..total).step_by(total / 25) {
            let perturb = |enc: &mut Encoder<f64>, delta: f64| {
                let mut idx = 0;
                enc.visit_params("", &mut |_, p| {
                    if probe >= idx && probe < idx + p.value.len() {
                        p.value[probe - idx] += delta;
                    }
                    idx += p.value.len();
                });
            };
            perturb(&mut enc, h);
            let up = loss(&mut enc);
            perturb(&mut enc, -2.0 * h);
            let down = loss(&mut enc);
            perturb(&mut enc, h);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[probe];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-3, "param {probe}: analytic {a}, numeric {numeric}");
        }
    }
}
