//! Dense and convolutional layers with explicit backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A C × H × W activation, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn band(&self, c: usize) -> &[f64] {
        let n = self.plane();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn band_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self) -> Self {
        Self::zeros(self.channels, self.height, self.width)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, limit: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-limit..=limit)).collect()
}

/// Fully connected layer, `y = W x + b` with `W` stored out × in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform weights with variance `gain / fan_in`, zero bias.
    pub fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let limit = (3.0 * gain / inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: uniform(rng, inputs * outputs, limit),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in dy.iter().enumerate() {
            grad.bias[o] += g;
            let row = o * self.inputs;
            for i in 0..self.inputs {
                grad.weight[row + i] += g * x[i];
                dx[i] += g * self.weight[row + i];
            }
        }
        dx
    }
}

/// 2D convolution with square kernel, zero padding `kernel / 2`.
///
/// Weights are laid out out × in × k × k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub inputs: usize,
    pub outputs: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(inputs: usize, outputs: usize, kernel: usize, stride: usize) -> Self {
        Self {
            inputs,
            outputs,
            kernel,
            stride,
            weight: vec![0.0; outputs * inputs * kernel * kernel],
            bias: vec![0.0; outputs],
        }
    }

    pub fn init(
        inputs: usize,
        outputs: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (inputs * kernel * kernel) as f64;
        let limit = (3.0 * gain / fan_in).sqrt();
        Self {
            weight: uniform(rng, outputs * inputs * kernel * kernel, limit),
            ..Self::zeros(inputs, outputs, kernel, stride)
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    /// Calls `f(out_index, in_index)` for every valid output/input pixel pair
    /// under kernel offset (ky, kx).
    #[inline]
    fn for_each_tap(
        &self,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
        ky: usize,
        kx: usize,
        mut f: impl FnMut(usize, usize),
    ) {
        let p = self.pad() as isize;
        let s = self.stride as isize;
        for y in 0..oh {
            let iy = y as isize * s + ky as isize - p;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let in_row = iy as usize * w;
            let out_row = y * ow;
            for x in 0..ow {
                let ix = x as isize * s + kx as isize - p;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                f(out_row + x, in_row + ix as usize);
            }
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        debug_assert_eq!(x.channels, self.inputs);
        let (oh, ow) = self.output_size(x.height, x.width);
        let mut out = FeatureMap::zeros(self.outputs, oh, ow);
        let k = self.kernel;
        for o in 0..self.outputs {
            let ob = out.band_mut(o);
            ob.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.inputs {
                let ib = x.band(i);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = self.weight[((o * self.inputs + i) * k + ky) * k + kx];
                        self.for_each_tap(x.height, x.width, oh, ow, ky, kx, |op, ip| {
                            ob[op] += wv * ib[ip];
                        });
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &FeatureMap, dy: &FeatureMap, grad: &mut Conv2d) -> FeatureMap {
        let (oh, ow) = (dy.height, dy.width);
        let mut dx = x.same_shape();
        let k = self.kernel;
        for o in 0..self.outputs {
            let db = dy.band(o);
            grad.bias[o] += db.iter().sum::<f64>();
            for i in 0..self.inputs {
                let ib = x.band(i);
                let n = x.plane();
                let dxb = &mut dx.data[i * n..(i + 1) * n];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((o * self.inputs + i) * k + ky) * k + kx;
                        let wv = self.weight[widx];
                        let mut gw = 0.0;
                        self.for_each_tap(x.height, x.width, oh, ow, ky, kx, |op, ip| {
                            gw += db[op] * ib[ip];
                            dxb[ip] += wv * db[op];
                        });
                        grad.weight[widx] += gw;
                    }
                }
            }
        }
        dx
    }
}

pub(crate) fn relu_in_place(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
