//! Dense, convolutional and pooling layers with hand-written backward passes.
//!
//! Activations are stored channel-major (`C × H × W`), weights row-major.
//! Backward methods accumulate into a gradient value of the same type as the
//! layer, so a zeroed clone of the network doubles as its gradient buffer.

use rand::Rng;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn relu_in_place(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes `grad` wherever the post-ReLU activation is not positive.
pub(crate) fn relu_backward(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn uniform_fan_in<R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Affine map `y = W x + b`, `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: uniform_fan_in(rng, in_dim * out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.in_dim, self.out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        self.weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let row = o * self.in_dim..(o + 1) * self.in_dim;
            axpy(g, x, &mut grad.weight[row.clone()]);
            axpy(g, &self.weight[row], &mut dx);
        }
        dx
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Two hidden affine+ReLU layers and a single-logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden1: Linear,
    pub hidden2: Linear,
    pub output: Linear,
}

/// Post-activation values kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub logit: f64,
}

impl Mlp {
    pub fn new<R: Rng>(in_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        Self {
            hidden1: Linear::new(in_dim, hidden_dim, rng),
            hidden2: Linear::new(hidden_dim, hidden_dim, rng),
            output: Linear::new(hidden_dim, 1, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            hidden1: self.hidden1.zeros_like(),
            hidden2: self.hidden2.zeros_like(),
            output: self.output.zeros_like(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> MlpCache {
        let mut a1 = self.hidden1.forward(x);
        relu_in_place(&mut a1);
        let mut a2 = self.hidden2.forward(&a1);
        relu_in_place(&mut a2);
        let logit = self.output.forward(&a2)[0];
        MlpCache { a1, a2, logit }
    }

    pub fn backward(&self, x: &[f64], cache: &MlpCache, dlogit: f64, grad: &mut Mlp) -> Vec<f64> {
        let mut da2 = self.output.backward(&cache.a2, &[dlogit], &mut grad.output);
        relu_backward(&cache.a2, &mut da2);
        let mut da1 = self.hidden2.backward(&cache.a1, &da2, &mut grad.hidden2);
        relu_backward(&cache.a1, &mut da1);
        self.hidden1.backward(x, &da1, &mut grad.hidden1)
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(6);
        v.extend(self.hidden1.tensors());
        v.extend(self.hidden2.tensors());
        v.extend(self.output.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(6);
        v.extend(self.hidden1.tensors_mut());
        v.extend(self.hidden2.tensors_mut());
        v.extend(self.output.tensors_mut());
        v
    }
}

/// 3×3 convolution, stride 1, zero padding 1 (spatial size preserved).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `out × in × 3 × 3`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Zero-padded copy of a `C × H × W` map, shape `C × (H+2) × (W+2)`.
#[derive(Debug, Clone)]
pub struct Padded {
    pub data: Vec<f64>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Padded {
    pub fn from_map(x: &[f64], channels: usize, height: usize, width: usize) -> Self {
        let pw = width + 2;
        let ph = height + 2;
        let mut data = vec![0.0; channels * ph * pw];
        for c in 0..channels {
            for y in 0..height {
                let src = &x[(c * height + y) * width..][..width];
                data[(c * ph + y + 1) * pw + 1..][..width].copy_from_slice(src);
            }
        }
        Self {
            data,
            channels,
            height,
            width,
        }
    }

    #[inline]
    fn row(&self, c: usize, y: usize) -> &[f64] {
        let pw = self.width + 2;
        &self.data[(c * (self.height + 2) + y) * pw..][..pw]
    }
}

impl Conv2d {
    pub const K: usize = 3;

    pub fn new<R: Rng>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        let fan_in = in_ch * Self::K * Self::K;
        Self {
            in_ch,
            out_ch,
            weight: uniform_fan_in(rng, out_ch * fan_in, fan_in),
            bias: vec![0.0; out_ch],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.out_ch],
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_ch + i) * Self::K + ky) * Self::K + kx]
    }

    pub fn forward(&self, input: &Padded) -> Vec<f64> {
        let (h, w) = (input.height, input.width);
        let mut out = vec![0.0; self.out_ch * h * w];
        for o in 0..self.out_ch {
            let plane = &mut out[o * h * w..][..h * w];
            plane.fill(self.bias[o]);
            for i in 0..self.in_ch {
                for ky in 0..Self::K {
                    for kx in 0..Self::K {
                        let wv = self.w(o, i, ky, kx);
                        for y in 0..h {
                            let src = &input.row(i, y + ky)[kx..kx + w];
                            axpy(wv, src, &mut plane[y * w..][..w]);
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients; returns `dL/dinput` (unpadded) when
    /// `want_input_grad` is set.
    pub fn backward(
        &self,
        input: &Padded,
        dout: &[f64],
        grad: &mut Conv2d,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        let (h, w) = (input.height, input.width);
        let (ph, pw) = (h + 2, w + 2);
        let mut dpad = want_input_grad.then(|| vec![0.0; self.in_ch * ph * pw]);
        for o in 0..self.out_ch {
            let g_plane = &dout[o * h * w..][..h * w];
            grad.bias[o] += g_plane.iter().sum::<f64>();
            for i in 0..self.in_ch {
                for ky in 0..Self::K {
                    for kx in 0..Self::K {
                        let idx = ((o * self.in_ch + i) * Self::K + ky) * Self::K + kx;
                        let mut acc = 0.0;
                        for y in 0..h {
                            let src = &input.row(i, y + ky)[kx..kx + w];
                            acc += dot(&g_plane[y * w..][..w], src);
                        }
                        grad.weight[idx] += acc;
                        if let Some(dp) = dpad.as_mut() {
                            let wv = self.weight[idx];
                            for y in 0..h {
                                let dst = &mut dp[(i * ph + y + ky) * pw + kx..][..w];
                                axpy(wv, &g_plane[y * w..][..w], dst);
                            }
                        }
                    }
                }
            }
        }
        dpad.map(|dp| {
            let mut dx = vec![0.0; self.in_ch * h * w];
            for i in 0..self.in_ch {
                for y in 0..h {
                    dx[(i * h + y) * w..][..w]
                        .copy_from_slice(&dp[(i * ph + y + 1) * pw + 1..][..w]);
                }
            }
            dx
        })
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// 2×2 max pooling with stride 2. Returns the pooled map and, for each output
/// cell, the flat input index that won.
pub fn max_pool2(x: &[f64], channels: usize, height: usize, width: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let mut out = Vec::with_capacity(channels * oh * ow);
    let mut arg = Vec::with_capacity(channels * oh * ow);
    for c in 0..channels {
        for y in 0..oh {
            for xx in 0..ow {
                let base = (c * height + 2 * y) * width + 2 * xx;
                let mut best = base;
                for cand in [base + 1, base + width, base + width + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward(dout: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&g, &i) in dout.iter().zip(argmax) {
        dx[i] += g;
    }
    dx
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
