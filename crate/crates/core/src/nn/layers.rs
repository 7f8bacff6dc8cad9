// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;
use rayon::prelude::*;

use super::{gemm, join_name, Layout, Matrix, Param, Parameterized, Scalar, Tensor3};
use crate::inject::RandomSource;

/// Samples per work unit when accumulating weight gradients. Partial sums are
/// reduced in group order, so results do not depend on the thread count.
const GRAD_GROUP: usize = 16;

fn uniform_init<S: Scalar>(n: usize, bound: f64, rng: &mut RandomSource) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64_lossy(rng.gen_range(-bound..bound)))
        .collect()
}

/// Temporal convolution with "same" zero padding and no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<S> {
    pub weight: Param<S>,
    cin: usize,
    cout: usize,
    kernel: usize,
}

impl<S: Scalar> Conv1d<S> {
    pub fn new(cin: usize, cout: usize, kernel: usize, rng: &mut RandomSource) -> Self {
        let bound = 1.0 / ((cin * kernel) as f64).sqrt();
        let weight = Param::new(
            vec![cout, cin, kernel],
            uniform_init(cout * cin * kernel, bound, rng),
        );
        Self {
            weight,
            cin,
            cout,
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }

    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    /// Source range `[lo, hi)` of output steps that read inside the input for tap `j`.
    fn valid_steps(&self, j: usize, l: usize) -> (usize, usize) {
        let pad = self.pad_left();
        let lo = pad.saturating_sub(j).min(l);
        let hi = (l + pad).saturating_sub(j).min(l).max(lo);
        (lo, hi)
    }

    /// Unfolds samples `lo..hi` into one `(cin * k) x (g * l)` matrix with
    /// `col[ci * k + j][g * l + t] = x[lo + g][ci][t + j - pad]` (zero outside).
    fn group_columns(&self, x: &Tensor3<S>, lo: usize, hi: usize) -> Vec<S> {
        let l = x.l;
        let pad = self.pad_left();
        let mut col = Vec::with_capacity(self.cin * self.kernel * (hi - lo) * l);
        for ci in 0..self.cin {
            for j in 0..self.kernel {
                let (a, b) = self.valid_steps(j, l);
                for i in lo..hi {
                    let xs = &x.sample(i)[ci * l..(ci + 1) * l];
                    col.resize(col.len() + a, S::zero());
                    col.extend_from_slice(&xs[a + j - pad..b + j - pad]);
                    col.resize(col.len() + (l - b), S::zero());
                }
            }
        }
        col
    }

    /// Adds the column gradient of sample `g` back onto its input positions.
    fn col2im_add(&self, col: &[S], l: usize, width: usize, g: usize, dx: &mut [S]) {
        let pad = self.pad_left();
        for ci in 0..self.cin {
            let dxs = &mut dx[ci * l..(ci + 1) * l];
            for j in 0..self.kernel {
                let (a, b) = self.valid_steps(j, l);
                let r = (ci * self.kernel + j) * width + g * l;
                let src = &col[r + a..r + b];
                for (d, &v) in dxs[a + j - pad..b + j - pad].iter_mut().zip(src) {
                    *d = *d + v;
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor3<S>) -> Tensor3<S> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let l = x.l;
        let ck = self.cin * self.kernel;
        let mut y = Tensor3::zeros(x.n, self.cout, l);
        let w = &self.weight.value;
        y.data
            .par_chunks_mut(GRAD_GROUP * self.cout * l)
            .enumerate()
            .for_each(|(g, ys)| {
                let lo = g * GRAD_GROUP;
                let hi = (lo + GRAD_GROUP).min(x.n);
                let width = (hi - lo) * l;
                let col = self.group_columns(x, lo, hi);
                let mut out = vec![S::zero(); self.cout * width];
                gemm(
                    S::one(),
                    w,
                    Layout::row_major(self.cout, ck),
                    &col,
                    Layout::row_major(ck, width),
                    S::zero(),
                    &mut out,
                    Layout::row_major(self.cout, width),
                );
                for s in 0..hi - lo {
                    for co in 0..self.cout {
                        let dst = (s * self.cout + co) * l;
                        let src = co * width + s * l;
                        ys[dst..dst + l].copy_from_slice(&out[src..src + l]);
                    }
                }
            });
        y
    }

    /// Accumulates the weight gradient and optionally returns the input gradient.
    pub fn backward(
        &mut self,
        x: &Tensor3<S>,
        dy: &Tensor3<S>,
        need_input_grad: bool,
    ) -> Option<Tensor3<S>> {
        let l = x.l;
        let ck = self.cin * self.kernel;
        let groups = x.n.div_ceil(GRAD_GROUP);
        let this = &*self;
        let w = &this.weight.value;
        let partials: Vec<(Vec<S>, Vec<S>)> = (0..groups)
            .into_par_iter()
            .map(|g| {
                let lo = g * GRAD_GROUP;
                let hi = (lo + GRAD_GROUP).min(x.n);
                let width = (hi - lo) * l;
                let mut dyg = vec![S::zero(); this.cout * width];
                for s in 0..hi - lo {
                    let sample = dy.sample(lo + s);
                    for co in 0..this.cout {
                        let dst = co * width + s * l;
                        dyg[dst..dst + l].copy_from_slice(&sample[co * l..(co + 1) * l]);
                    }
                }
                let mut col = this.group_columns(x, lo, hi);
                let mut dw = vec![S::zero(); this.cout * ck];
                gemm(
                    S::one(),
                    &dyg,
                    Layout::row_major(this.cout, width),
                    &col,
                    Layout::transposed(ck, width),
                    S::zero(),
                    &mut dw,
                    Layout::row_major(this.cout, ck),
                );
                let mut dx = Vec::new();
                if need_input_grad {
                    gemm(
                        S::one(),
                        w,
                        Layout::transposed(this.cout, ck),
                        &dyg,
                        Layout::row_major(this.cout, width),
                        S::zero(),
                        &mut col,
                        Layout::row_major(ck, width),
                    );
                    dx = vec![S::zero(); (hi - lo) * this.cin * l];
                    for s in 0..hi - lo {
                        let dxs = &mut dx[s * this.cin * l..(s + 1) * this.cin * l];
                        this.col2im_add(&col, l, width, s, dxs);
                    }
                }
                (dw, dx)
            })
            .collect();

        let mut dx_all = Vec::with_capacity(if need_input_grad { x.data.len() } else { 0 });
        for (dw, dx) in partials {
            for (g, d) in self.weight.grad.iter_mut().zip(dw) {
                *g = *g + d;
            }
            dx_all.extend(dx);
        }
        need_input_grad.then(|| Tensor3::from_vec(x.n, self.cin, l, dx_all))
    }
}

impl<S: Scalar> Parameterized<S> for Conv1d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
    }

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<S>)) {}
}

/// Batch normalization over the sample and time axes of each channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm1d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
    momentum: f64,
    eps: f64,
}

/// Saved forward state for [`BatchNorm1d::backward`].
#[derive(Clone, Debug)]
pub struct BnCache<S> {
    xhat: Tensor3<S>,
    inv_std: Vec<f64>,
}

impl<S: Scalar> BatchNorm1d<S> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(vec![channels], S::one()),
            beta: Param::filled(vec![channels], S::zero()),
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor3<S>) -> (Tensor3<S>, BnCache<S>) {
        let c = self.channels();
        assert_eq!(x.c, c, "batch-norm channels");
        let count = (x.n * x.l) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for i in 0..x.n {
            let s = x.sample(i);
            for ch in 0..c {
                mean[ch] += s[ch * x.l..(ch + 1) * x.l]
                    .iter()
                    .map(|v| v.as_f64())
                    .sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..x.n {
            let s = x.sample(i);
            for ch in 0..c {
                let m = mean[ch];
                var[ch] += s[ch * x.l..(ch + 1) * x.l]
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = Tensor3::zeros(x.n, c, x.l);
        let mut y = Tensor3::zeros(x.n, c, x.l);
        let sample = c * x.l;
        for i in 0..x.n {
            for ch in 0..c {
                let g = self.gamma.value[ch];
                let b = self.beta.value[ch];
                let (m, is) = (S::from_f64_lossy(mean[ch]), S::from_f64_lossy(inv_std[ch]));
                let base = i * sample + ch * x.l;
                let src = &x.data[base..base + x.l];
                let hs = &mut xhat.data[base..base + x.l];
                let ys = &mut y.data[base..base + x.l];
                for t in 0..x.l {
                    let h = (src[t] - m) * is;
                    hs[t] = h;
                    ys[t] = g * h + b;
                }
            }
        }

        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = self.running_mean[ch].as_f64();
            let rv = self.running_var[ch].as_f64();
            self.running_mean[ch] =
                S::from_f64_lossy((1.0 - self.momentum) * rm + self.momentum * mean[ch]);
            self.running_var[ch] =
                S::from_f64_lossy((1.0 - self.momentum) * rv + self.momentum * var[ch] * unbiased);
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Normalizes with the running statistics; no state changes.
    pub fn forward_eval(&self, x: &Tensor3<S>) -> Tensor3<S> {
        let c = self.channels();
        assert_eq!(x.c, c, "batch-norm channels");
        let mut y = x.clone();
        let scale: Vec<S> = (0..c)
            .map(|ch| {
                let is = 1.0 / (self.running_var[ch].as_f64() + self.eps).sqrt();
                S::from_f64_lossy(is) * self.gamma.value[ch]
            })
            .collect();
        for sample in y.data.chunks_mut(c * x.l) {
            for ch in 0..c {
                let (m, sc, b) = (self.running_mean[ch], scale[ch], self.beta.value[ch]);
                for v in &mut sample[ch * x.l..(ch + 1) * x.l] {
                    *v = (*v - m) * sc + b;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, cache: &BnCache<S>, dy: &Tensor3<S>) -> Tensor3<S> {
        let c = self.channels();
        let (n, l) = (dy.n, dy.l);
        let count = (n * l) as f64;
        let mut sum_dy = vec![0.0f64; c];
        let mut sum_dy_xhat = vec![0.0f64; c];
        for i in 0..n {
            for ch in 0..c {
                let base = i * c * l + ch * l;
                for t in 0..l {
                    let d = dy.data[base + t].as_f64();
                    sum_dy[ch] += d;
                    sum_dy_xhat[ch] += d * cache.xhat.data[base + t].as_f64();
                }
            }
        }
        for ch in 0..c {
            self.gamma.grad[ch] = self.gamma.grad[ch] + S::from_f64_lossy(sum_dy_xhat[ch]);
            self.beta.grad[ch] = self.beta.grad[ch] + S::from_f64_lossy(sum_dy[ch]);
        }
        let mut dx = Tensor3::zeros(n, c, l);
        for i in 0..n {
            for ch in 0..c {
                let k = self.gamma.value[ch].as_f64() * cache.inv_std[ch];
                let scale = S::from_f64_lossy(k);
                let mean_d = S::from_f64_lossy(sum_dy[ch] / count);
                let mean_dh = S::from_f64_lossy(sum_dy_xhat[ch] / count);
                let base = i * c * l + ch * l;
                let ds = &dy.data[base..base + l];
                let hs = &cache.xhat.data[base..base + l];
                for (t, out) in dx.data[base..base + l].iter_mut().enumerate() {
                    *out = scale * (ds[t] - mean_d - hs[t] * mean_dh);
                }
            }
        }
        dx
    }
}

impl<S: Scalar> Parameterized<S> for BatchNorm1d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join_name(prefix, "gamma"), &mut self.gamma);
        f(&join_name(prefix, "beta"), &mut self.beta);
    }

    fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Vec<S>)) {
        f(&join_name(prefix, "running_mean"), &mut self.running_mean);
        f(&join_name(prefix, "running_var"), &mut self.running_var);
    }
}

/// Fully-connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<S> {
    pub weight: Param<S>,
    pub bias: Param<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut RandomSource) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Self {
            weight: Param::new(
                vec![outputs, inputs],
                uniform_init(outputs * inputs, bound, rng),
            ),
            bias: Param::new(vec![outputs], uniform_init(outputs, bound, rng)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Matrix<S>) -> Matrix<S> {
        let (inp, out) = (self.inputs(), self.outputs());
        assert_eq!(x.cols, inp, "linear input width");
        let mut y = Matrix::zeros(x.rows, out);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(&self.bias.value);
        }
        gemm(
            S::one(),
            &x.data,
            Layout::row_major(x.rows, inp),
            &self.weight.value,
            Layout::transposed(out, inp),
            S::one(),
            &mut y.data,
            Layout::row_major(x.rows, out),
        );
        y
    }

    pub fn backward(&mut self, x: &Matrix<S>, dy: &Matrix<S>) -> Matrix<S> {
        let (inp, out) = (self.inputs(), self.outputs());
        gemm(
            S::one(),
            &dy.data,
            Layout::transposed(dy.rows, out),
            &x.data,
            Layout::row_major(x.rows, inp),
            S::one(),
            &mut self.weight.grad,
            Layout::row_major(out, inp),
        );
        for r in 0..dy.rows {
            for (g, &d) in self.bias.grad.iter_mut().zip(dy.row(r)) {
                *g = *g + d;
            }
        }
        let mut dx = Matrix::zeros(x.rows, inp);
        gemm(
            S::one(),
            &dy.data,
            Layout::row_major(dy.rows, out),
            &self.weight.value,
            Layout::row_major(out, inp),
            S::zero(),
            &mut dx.data,
            Layout::row_major(x.rows, inp),
        );
        dx
    }
}

impl<S: Scalar> Parameterized<S> for Linear<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<S>)) {
        f(&join_name(prefix, "weight"), &mut self.weight);
        f(&join_name(prefix, "bias"), &mut self.bias);
    }

    fn visit_buffers(&mut self, _prefix: &str, _f: &mut dyn FnMut(&str, &mut Vec<S>)) {}
}

pub fn relu_inplace<S: Scalar>(values: &mut [S]) {
    values.iter_mut().for_each(|v| {
        if *v < S::zero() {
            *v = S::zero()
        }
    });
}

/// Zeroes `grad` wherever the activation output was not positive.
pub fn relu_backward<S: Scalar>(output: &[S], grad: &mut [S]) {
    for (g, &o) in grad.iter_mut().zip(output) {
        if o <= S::zero() {
            *g = S::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_same_padding_preserves_length() {
        let mut rng = RandomSource::seed_from_u64(0);
        for k in [8, 5, 3, 1] {
            let conv = Conv1d::<f64>::new(2, 3, k, &mut rng);
            let x = Tensor3::from_vec(1, 2, 10, (0..20).map(|v| v as f64).collect());
            let y = conv.forward(&x);
            assert_eq!((y.n, y.c, y.l), (1, 3, 10));
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = RandomSource::seed_from_u64(3);
        let conv = Conv1d::<f64>::new(2, 2, 4, &mut rng);
        let x = Tensor3::from_vec(2, 2, 6, (0..24).map(|v| (v as f64 * 0.3).cos()).collect());
        let y = conv.forward(&x);
        let pad = 1isize; // (4 - 1) / 2
        for n in 0..2 {
            for co in 0..2 {
                for t in 0..6isize {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for j in 0..4isize {
                            let src = t + j - pad;
                            if (0..6).contains(&src) {
                                acc += conv.weight.value[(co * 2 + ci) * 4 + j as usize]
                                    * x.data[n * 12 + ci * 6 + src as usize];
                            }
                        }
                    }
                    let got = y.data[n * 12 + co * 6 + t as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_output_is_standardized() {
        let mut bn = BatchNorm1d::<f64>::new(1);
        let x = Tensor3::from_vec(2, 1, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (y, _) = bn.forward_train(&x);
        let mean: f64 = y.data.iter().sum::<f64>() / 6.0;
        let var: f64 = y.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        assert!((bn.running_mean[0] - 0.35).abs() < 1e-12);
    }

    #[test]
    fn linear_forward_matches_manual() {
        let mut rng = RandomSource::seed_from_u64(1);
        let lin = Linear::<f64>::new(3, 2, &mut rng);
        let x = Matrix::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let y = lin.forward(&x);
        for o in 0..2 {
            let want: f64 = (0..3)
                .map(|i| lin.weight.value[o * 3 + i] * x.data[i])
                .sum::<f64>()
                + lin.bias.value[o];
            assert!((y.data[o] - want).abs() < 1e-12);
        }
    }
}
