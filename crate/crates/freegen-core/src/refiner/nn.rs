//! Dense f64 tensors and 3x3 same-padding convolutions with hand-written
//! backward passes. Small enough to verify against finite differences, which
//! is the whole point of keeping this in-tree instead of binding a framework.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::fmath::{self, sigmoid};
use crate::par;

/// C x H x W tensor, index (c * h + y) * w + x.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Tensor {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn same_shape(&self, o: &Tensor) -> bool {
        self.c == o.c && self.h == o.h && self.w == o.w
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_derivative(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// One 3x3 stride-1 same-padding convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3x3 {
    pub in_c: usize,
    pub out_c: usize,
    /// \[out]\[in]\[ky]\[kx] flattened.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(in_c: usize, out_c: usize) -> Conv3x3 {
        Conv3x3 { in_c, out_c, weight: vec![0.0; out_c * in_c * 9], bias: vec![0.0; out_c] }
    }

    /// He-style uniform init: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn init(in_c: usize, out_c: usize, rng: &mut crate::rng::Rng) -> Conv3x3 {
        let bound = fmath::sqrt(6.0 / (in_c as f64 * 9.0));
        let mut conv = Conv3x3::zeros(in_c, out_c);
        for w in &mut conv.weight {
            *w = rng.random_range(-bound..bound);
        }
        conv
    }

    #[inline]
    fn w_at(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((oc * self.in_c + ic) * 3 + ky) * 3 + kx]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Same-padding forward. Parallel over output channels; each plane is
    /// written by exactly one task, so results are schedule-independent.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (h, w) = (x.h, x.w);
        let mut out = Tensor::zeros(self.out_c, h, w);
        par::for_each_chunk_mut(&mut out.data, h * w, |oc, plane| {
            for v in plane.iter_mut() {
                *v = self.bias[oc];
            }
            for ic in 0..self.in_c {
                let xin = x.plane(ic);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w_at(oc, ic, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        // Input row y + ky - 1, col x + kx - 1.
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1 - ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1 - kx).min(w);
                        for y in y_lo..y_hi {
                            let src = (y + ky - 1) * w;
                            let dst = y * w;
                            for x_ in x_lo..x_hi {
                                plane[dst + x_] += wv * xin[src + x_ + kx - 1];
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// Gradients of a scalar loss given d_out: returns (d_input, d_weight,
    /// d_bias). d_input is parallel over input channels, d_weight over output
    /// channels; each slot has one writer.
    pub fn backward(&self, x: &Tensor, d_out: &Tensor) -> (Tensor, Vec<f64>, Vec<f64>) {
        assert_eq!(d_out.c, self.out_c);
        let (h, w) = (x.h, x.w);
        let mut d_x = Tensor::zeros(self.in_c, h, w);
        par::for_each_chunk_mut(&mut d_x.data, h * w, |ic, plane| {
            for oc in 0..self.out_c {
                let gout = d_out.plane(oc);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = self.w_at(oc, ic, ky, kx);
                        if wv == 0.0 {
                            continue;
                        }
                        // d_x[ic][u][v] += w * d_out[oc][u - ky + 1][v - kx + 1]
                        let y_lo = ky.max(1) - 1;
                        let y_hi = (h + ky).min(h + 1) - 1;
                        let x_lo = kx.max(1) - 1;
                        let x_hi = (w + kx).min(w + 1) - 1;
                        for u in y_lo..y_hi {
                            let src = (u + 1 - ky) * w;
                            let dst = u * w;
                            for v in x_lo..x_hi {
                                plane[dst + v] += wv * gout[src + v + 1 - kx];
                            }
                        }
                    }
                }
            }
        });

        let mut d_w = vec![0.0; self.weight.len()];
        par::for_each_chunk_mut(&mut d_w, self.in_c * 9, |oc, wslice| {
            let gout = d_out.plane(oc);
            for ic in 0..self.in_c {
                let xin = x.plane(ic);
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        let y_lo = 1usize.saturating_sub(ky);
                        let y_hi = (h + 1 - ky).min(h);
                        let x_lo = 1usize.saturating_sub(kx);
                        let x_hi = (w + 1 - kx).min(w);
                        for y in y_lo..y_hi {
                            let src = (y + ky - 1) * w;
                            let dst = y * w;
                            for x_ in x_lo..x_hi {
                                acc += gout[dst + x_] * xin[src + x_ + kx - 1];
                            }
                        }
                        wslice[(ic * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        });

        let d_b: Vec<f64> = (0..self.out_c).map(|oc| d_out.plane(oc).iter().sum()).collect();
        (d_x, d_w, d_b)
    }
}

/// A stack of convolutions with SiLU between layers (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub layers: Vec<Conv3x3>,
}

/// Intermediate activations retained for the backward pass.
pub struct NetCache {
    /// Input to each layer (post-activation of the previous one).
    pub inputs: Vec<Tensor>,
    /// Pre-activation outputs of every layer except the last.
    pub preacts: Vec<Tensor>,
}

/// Per-layer parameter gradients in layer order.
pub struct NetGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ConvNet {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Conv3x3::param_count).sum()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (out, _) = self.forward_cached(x, false);
        out
    }

    /// Runs the net; with `keep` the cache holds what backward needs.
    pub fn forward_cached(&self, x: &Tensor, keep: bool) -> (Tensor, NetCache) {
        let mut cache = NetCache { inputs: Vec::new(), preacts: Vec::new() };
        let mut cur = x.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            if keep {
                cache.inputs.push(cur.clone());
            }
            let mut out = layer.forward(&cur);
            if li + 1 < self.layers.len() {
                if keep {
                    cache.preacts.push(out.clone());
                }
                for v in &mut out.data {
                    *v = silu(*v);
                }
            }
            cur = out;
        }
        (cur, cache)
    }

    /// Backpropagates d_out through the whole stack.
    pub fn backward(&self, cache: &NetCache, d_out: &Tensor) -> (Tensor, NetGrads) {
        let n = self.layers.len();
        let mut grads = NetGrads {
            weights: vec![Vec::new(); n],
            biases: vec![Vec::new(); n],
        };
        let mut d_cur = d_out.clone();
        for li in (0..n).rev() {
            if li + 1 < n {
                // Undo the SiLU applied after layer li.
                let pre = &cache.preacts[li];
                for (g, p) in d_cur.data.iter_mut().zip(&pre.data) {
                    *g *= silu_derivative(*p);
                }
            }
            let (d_in, d_w, d_b) = self.layers[li].backward(&cache.inputs[li], &d_cur);
            grads.weights[li] = d_w;
            grads.biases[li] = d_b;
            d_cur = d_in;
        }
        (d_cur, grads)
    }

    /// Appends every parameter in declaration order (per layer: weights, then
    /// biases).
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
    }

    /// Reads parameters back in the same order; returns the slice consumed.
    pub fn load_from(&mut self, flat: &[f64]) -> usize {
        let mut off = 0;
        for layer in &mut self.layers {
            let nw = layer.weight.len();
            layer.weight.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        off
    }
}
