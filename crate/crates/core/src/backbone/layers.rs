//! Dense 3D layers with explicit backward passes.
//!
//! Feature maps are single-sample `C×X×Y×Z` buffers; convolutions lower to
//! one sgemm per call via im2col.

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A single-sample feature map, channel-major, `z` fastest.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Feat {
    pub c: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl Feat {
    pub fn zeros(c: usize, dims: [usize; 3]) -> Self {
        Self { c, dims, data: vec![0.0; c * dims[0] * dims[1] * dims[2]] }
    }

    pub fn voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Feat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv3d {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `cout × (cin·k³)`, taps ordered `(cin, kx, ky, kz)`.
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Conv3d {
    pub fn new(cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let fan_in = cin * kernel.pow(3);
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("valid std");
        let weight = (0..cout * fan_in).map(|_| normal.sample(rng)).collect();
        Self { cin, cout, kernel, stride, weight, bias: bias.then(|| vec![0.0; cout]) }
    }

    fn taps(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        dims.map(|d| (d + 2 * self.pad() - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn forward(&self, x: &Feat, scratch: &mut Vec<f32>) -> Feat {
        debug_assert_eq!(x.c, self.cin);
        let dims = self.out_dims(x.dims);
        let mut y = Feat::zeros(self.cout, dims);
        let n = y.voxels();
        let taps = self.taps();
        let cols: &[f32] = if self.is_pointwise() {
            &x.data
        } else {
            im2col(x, self.kernel, self.stride, self.pad(), dims, scratch);
            scratch
        };
        // y = W · cols
        unsafe {
            matrixmultiply::sgemm(
                self.cout, taps, n, 1.0,
                self.weight.as_ptr(), taps as isize, 1,
                cols.as_ptr(), n as isize, 1,
                0.0, y.data.as_mut_ptr(), n as isize, 1,
            );
        }
        if let Some(b) = &self.bias {
            for (co, chunk) in y.data.chunks_exact_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[co]);
            }
        }
        y
    }

    /// Returns the input gradient when `need_input_grad`; accumulates weight
    /// and bias gradients into the provided buffers.
    pub fn backward(
        &self,
        x: &Feat,
        gy: &Feat,
        need_input_grad: bool,
        grad_weight: Option<&mut [f32]>,
        grad_bias: Option<&mut [f32]>,
        scratch: &mut Vec<f32>,
    ) -> Option<Feat> {
        let n = gy.voxels();
        let taps = self.taps();
        if let Some(gb) = grad_bias {
            for (co, chunk) in gy.data.chunks_exact(n).enumerate() {
                gb[co] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(gw) = grad_weight {
            let cols: &[f32] = if self.is_pointwise() {
                &x.data
            } else {
                im2col(x, self.kernel, self.stride, self.pad(), gy.dims, scratch);
                scratch
            };
            // gW += gY · colsᵀ
            unsafe {
                matrixmultiply::sgemm(
                    self.cout, n, taps, 1.0,
                    gy.data.as_ptr(), n as isize, 1,
                    cols.as_ptr(), 1, n as isize,
                    1.0, gw.as_mut_ptr(), taps as isize, 1,
                );
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut gx = Feat::zeros(self.cin, x.dims);
        if self.is_pointwise() {
            // gX = Wᵀ · gY
            unsafe {
                matrixmultiply::sgemm(
                    self.cin, self.cout, n, 1.0,
                    self.weight.as_ptr(), 1, self.cin as isize,
                    gy.data.as_ptr(), n as isize, 1,
                    0.0, gx.data.as_mut_ptr(), n as isize, 1,
                );
            }
        } else {
            scratch.clear();
            scratch.resize(taps * n, 0.0);
            unsafe {
                matrixmultiply::sgemm(
                    taps, self.cout, n, 1.0,
                    self.weight.as_ptr(), 1, taps as isize,
                    gy.data.as_ptr(), n as isize, 1,
                    0.0, scratch.as_mut_ptr(), n as isize, 1,
                );
            }
            col2im(scratch, self.kernel, self.stride, self.pad(), gy.dims, &mut gx);
        }
        Some(gx)
    }
}

fn shifted(o: usize, t: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    let i = (o * stride + t) as isize - pad as isize;
    (i >= 0 && (i as usize) < limit).then_some(i as usize)
}

fn im2col(x: &Feat, k: usize, stride: usize, pad: usize, out: [usize; 3], cols: &mut Vec<f32>) {
    let [d0, d1, d2] = x.dims;
    let n = out[0] * out[1] * out[2];
    cols.clear();
    cols.resize(x.c * k * k * k * n, 0.0);
    let mut row = 0;
    for ci in 0..x.c {
        let src = x.channel(ci);
        for t0 in 0..k {
            for t1 in 0..k {
                for t2 in 0..k {
                    let dst = &mut cols[row * n..(row + 1) * n];
                    row += 1;
                    for o0 in 0..out[0] {
                        let Some(i0) = shifted(o0, t0, stride, pad, d0) else { continue };
                        for o1 in 0..out[1] {
                            let Some(i1) = shifted(o1, t1, stride, pad, d1) else { continue };
                            let line = &src[(i0 * d1 + i1) * d2..(i0 * d1 + i1 + 1) * d2];
                            let o = &mut dst[(o0 * out[1] + o1) * out[2]..(o0 * out[1] + o1 + 1) * out[2]];
                            if stride == 1 && k == 3 && out[2] == d2 {
                                match t2 {
                                    0 => o[1..].copy_from_slice(&line[..d2 - 1]),
                                    1 => o.copy_from_slice(line),
                                    _ => o[..d2 - 1].copy_from_slice(&line[1..]),
                                }
                            } else {
                                for (o2, v) in o.iter_mut().enumerate() {
                                    if let Some(i2) = shifted(o2, t2, stride, pad, d2) {
                                        *v = line[i2];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], k: usize, stride: usize, pad: usize, out: [usize; 3], gx: &mut Feat) {
    let [d0, d1, d2] = gx.dims;
    let n = out[0] * out[1] * out[2];
    let nx = gx.voxels();
    let mut row = 0;
    for ci in 0..gx.c {
        let dst = &mut gx.data[ci * nx..(ci + 1) * nx];
        for t0 in 0..k {
            for t1 in 0..k {
                for t2 in 0..k {
                    let src = &cols[row * n..(row + 1) * n];
                    row += 1;
                    for o0 in 0..out[0] {
                        let Some(i0) = shifted(o0, t0, stride, pad, d0) else { continue };
                        for o1 in 0..out[1] {
                            let Some(i1) = shifted(o1, t1, stride, pad, d1) else { continue };
                            let line = &mut dst[(i0 * d1 + i1) * d2..(i0 * d1 + i1 + 1) * d2];
                            let o = &src[(o0 * out[1] + o1) * out[2]..(o0 * out[1] + o1 + 1) * out[2]];
                            if stride == 1 && k == 3 && out[2] == d2 {
                                let (dl, sl) = match t2 {
                                    0 => (&mut line[..d2 - 1], &o[1..]),
                                    1 => (&mut line[..], o),
                                    _ => (&mut line[1..], &o[..d2 - 1]),
                                };
                                dl.iter_mut().zip(sl).for_each(|(a, b)| *a += b);
                            } else {
                                for (o2, v) in o.iter().enumerate() {
                                    if let Some(i2) = shifted(o2, t2, stride, pad, d2) {
                                        line[i2] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BatchNorm3d {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

/// Per-channel statistics actually used by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct NormStats {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
    /// Unbiased batch variance, used for running-stat updates.
    pub batch_var: Vec<f32>,
    pub from_batch: bool,
}

impl BatchNorm3d {
    pub fn new(c: usize) -> Self {
        Self { gamma: vec![1.0; c], beta: vec![0.0; c], running_mean: vec![0.0; c], running_var: vec![1.0; c] }
    }

    pub fn forward(&self, x: &Feat, use_batch_stats: bool) -> (Feat, NormStats) {
        let n = x.voxels();
        let mut stats = NormStats {
            mean: Vec::with_capacity(x.c),
            inv_std: Vec::with_capacity(x.c),
            batch_var: Vec::with_capacity(x.c),
            from_batch: use_batch_stats,
        };
        let mut y = Feat::zeros(x.c, x.dims);
        for c in 0..x.c {
            let xs = x.channel(c);
            let (mean, var) = if use_batch_stats {
                let m = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let v = xs.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n as f64;
                stats.batch_var.push((v * n as f64 / (n.max(2) - 1) as f64) as f32);
                (m as f32, v as f32)
            } else {
                (self.running_mean[c], self.running_var[c])
            };
            let inv_std = 1.0 / (var + BN_EPS).sqrt();
            let scale = self.gamma[c] * inv_std;
            let shift = self.beta[c] - mean * scale;
            for (o, &v) in y.data[c * n..(c + 1) * n].iter_mut().zip(xs) {
                *o = v * scale + shift;
            }
            stats.mean.push(mean);
            stats.inv_std.push(inv_std);
        }
        (y, stats)
    }

    pub fn backward(
        &self,
        x: &Feat,
        gy: &Feat,
        stats: &NormStats,
        need_input_grad: bool,
        grad_gamma: Option<&mut [f32]>,
        grad_beta: Option<&mut [f32]>,
    ) -> Option<Feat> {
        let n = x.voxels();
        let mut sum_g = vec![0.0f64; x.c];
        let mut sum_gx = vec![0.0f64; x.c];
        for c in 0..x.c {
            let (m, is) = (stats.mean[c], stats.inv_std[c]);
            for (&g, &v) in gy.channel(c).iter().zip(x.channel(c)) {
                sum_g[c] += g as f64;
                sum_gx[c] += (g * (v - m) * is) as f64;
            }
        }
        if let Some(gg) = grad_gamma {
            for c in 0..x.c {
                gg[c] += sum_gx[c] as f32;
            }
        }
        if let Some(gb) = grad_beta {
            for c in 0..x.c {
                gb[c] += sum_g[c] as f32;
            }
        }
        if !need_input_grad {
            return None;
        }
        let mut gx = Feat::zeros(x.c, x.dims);
        for c in 0..x.c {
            let (m, is, g) = (stats.mean[c], stats.inv_std[c], self.gamma[c]);
            let out = &mut gx.data[c * n..(c + 1) * n];
            if stats.from_batch {
                let mg = (sum_g[c] / n as f64) as f32;
                let mgx = (sum_gx[c] / n as f64) as f32;
                for ((o, &dy), &v) in out.iter_mut().zip(gy.channel(c)).zip(x.channel(c)) {
                    let xhat = (v - m) * is;
                    *o = g * is * (dy - mg - xhat * mgx);
                }
            } else {
                for (o, &dy) in out.iter_mut().zip(gy.channel(c)) {
                    *o = g * is * dy;
                }
            }
        }
        Some(gx)
    }

    pub fn update_running(&mut self, stats: &NormStats, momentum: f32) {
        if !stats.from_batch {
            return;
        }
        for c in 0..self.gamma.len() {
            self.running_mean[c] = (1.0 - momentum) * self.running_mean[c] + momentum * stats.mean[c];
            self.running_var[c] = (1.0 - momentum) * self.running_var[c] + momentum * stats.batch_var[c];
        }
    }
}

pub(crate) fn relu(x: &Feat) -> Feat {
    Feat { c: x.c, dims: x.dims, data: x.data.iter().map(|&v| v.max(0.0)).collect() }
}

pub(crate) fn relu_backward(out: &Feat, gy: &Feat) -> Feat {
    let data = out.data.iter().zip(&gy.data).map(|(&o, &g)| if o > 0.0 { g } else { 0.0 }).collect();
    Feat { c: out.c, dims: out.dims, data }
}

/// Nearest-neighbour ×2 upsampling.
pub(crate) fn upsample2(x: &Feat) -> Feat {
    let [a, b, c] = x.dims;
    let dims = [2 * a, 2 * b, 2 * c];
    let mut y = Feat::zeros(x.c, dims);
    let n = y.voxels();
    for ch in 0..x.c {
        let src = x.channel(ch);
        let dst = &mut y.data[ch * n..(ch + 1) * n];
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                let s = &src[((i / 2) * b + j / 2) * c..((i / 2) * b + j / 2 + 1) * c];
                let d = &mut dst[(i * dims[1] + j) * dims[2]..(i * dims[1] + j + 1) * dims[2]];
                for (k, v) in d.iter_mut().enumerate() {
                    *v = s[k / 2];
                }
            }
        }
    }
    y
}

pub(crate) fn upsample2_backward(gy: &Feat) -> Feat {
    let dims = gy.dims.map(|d| d / 2);
    let mut gx = Feat::zeros(gy.c, dims);
    let n = gx.voxels();
    for ch in 0..gy.c {
        let src = gy.channel(ch);
        let dst = &mut gx.data[ch * n..(ch + 1) * n];
        for i in 0..gy.dims[0] {
            for j in 0..gy.dims[1] {
                let s = &src[(i * gy.dims[1] + j) * gy.dims[2]..(i * gy.dims[1] + j + 1) * gy.dims[2]];
                let d = &mut dst[((i / 2) * dims[1] + j / 2) * dims[2]..((i / 2) * dims[1] + j / 2 + 1) * dims[2]];
                for (k, v) in s.iter().enumerate() {
                    d[k / 2] += v;
                }
            }
        }
    }
    gx
}
