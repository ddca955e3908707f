//! Inter-sequence intervention views.
//!
//! Two perturbations of a multi-sequence volume, both acting on one pair of
//! sequences `(a, b)` while leaving the others untouched:
//!
//! - **LFCCS** exchanges the low-frequency Fourier amplitudes of `a` and `b`
//!   inside a centred box mask; each sequence keeps its own phase.
//! - **UGPS** exchanges the voxel values of `a` and `b` inside a dilated
//!   mask of high teacher entropy.
//!
//! [`generate_views`] assembles the anchor and the two perturbed views.
//!
//! FFT convention: unnormalised forward transform, `1/N` inverse. The
//! low-frequency mask is defined in the centred (DC-at-centre) layout and
//! is applied to the unshifted spectrum through `ifftshift`, which is the
//! same as shifting the spectrum, masking and shifting back.

use ndarray::{Array3, ArrayView3, Axis, Zip};
use num_complex::Complex64;
use rand::Rng;
use rustfft::FftPlanner;

use crate::config::{InterventionKind, VistaConfig};
use crate::error::{Error, Result};
use crate::volume::{BinaryMask3D, MultiSequenceVolume, ProbabilityMap};

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

/// Centred low-frequency box mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyMask {
    /// `true` inside the box, in centred spectral layout.
    pub data: Array3<bool>,
    pub ratio: f64,
    /// Box half-width per axis before clamping to the axis extent.
    pub half_widths: [usize; 3],
}

impl FrequencyMask {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// The mask moved to the unshifted (DC-at-origin) layout of an FFT.
    pub fn unshifted(&self) -> Array3<bool> {
        ifftshift3(&self.data)
    }
}

/// Box of half-width `floor(r·dim/2)` per axis around the spectral centre
/// `dim/2`. Axes whose box would exceed the extent are fully covered.
pub fn build_lowfreq_mask(shape: [usize; 3], r: f64) -> Result<FrequencyMask> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Value(format!("bandwidth ratio must lie in [0, 1], got {r}")));
    }
    let half_widths = shape.map(|d| (r * d as f64 / 2.0).floor() as usize);
    let inside = |i: usize, axis: usize| {
        let (d, h) = (shape[axis], half_widths[axis]);
        2 * h + 1 >= d || i.abs_diff(d / 2) <= h
    };
    let data = Array3::from_shape_fn(shape, |(i, j, k)| inside(i, 0) && inside(j, 1) && inside(k, 2));
    Ok(FrequencyMask { data, ratio: r, half_widths })
}

fn roll3<T: Clone>(a: &Array3<T>, shift: [usize; 3]) -> Array3<T> {
    let s = a.shape();
    let (d0, d1, d2) = (s[0], s[1], s[2]);
    Array3::from_shape_fn((d0, d1, d2), |(i, j, k)| {
        a[[(i + d0 - shift[0] % d0) % d0, (j + d1 - shift[1] % d1) % d1, (k + d2 - shift[2] % d2) % d2]].clone()
    })
}

/// Moves the zero-frequency bin to index `dim/2` on every axis.
pub fn fftshift3<T: Clone>(a: &Array3<T>) -> Array3<T> {
    let s = a.shape();
    roll3(a, [s[0] / 2, s[1] / 2, s[2] / 2])
}

/// Inverse of [`fftshift3`].
pub fn ifftshift3<T: Clone>(a: &Array3<T>) -> Array3<T> {
    let s = a.shape();
    roll3(a, [s[0] - s[0] / 2, s[1] - s[1] / 2, s[2] - s[2] / 2])
}

/// In-place 3D FFT. The inverse includes the `1/N` factor.
pub fn fft3(data: &mut Array3<Complex64>, inverse: bool, planner: &mut FftPlanner<f64>) {
    for axis in 0..3 {
        let len = data.shape()[axis];
        let fft = if inverse { planner.plan_fft_inverse(len) } else { planner.plan_fft_forward(len) };
        let mut buf = vec![Complex64::new(0.0, 0.0); len];
        for mut lane in data.lanes_mut(Axis(axis)) {
            buf.iter_mut().zip(lane.iter()).for_each(|(b, v)| *b = *v);
            fft.process(&mut buf);
            lane.iter_mut().zip(&buf).for_each(|(v, b)| *v = *b);
        }
    }
    if inverse {
        let n = data.len() as f64;
        data.mapv_inplace(|v| v / n);
    }
}

fn spectrum(x: ArrayView3<'_, f32>, planner: &mut FftPlanner<f64>) -> Array3<Complex64> {
    let mut c = x.mapv(|v| Complex64::new(v as f64, 0.0));
    fft3(&mut c, false, planner);
    c
}

fn check_pair(vol: &MultiSequenceVolume, (a, b): (usize, usize)) -> Result<()> {
    let s = vol.num_sequences();
    if a == b || a >= s || b >= s {
        return Err(Error::Index(format!("invalid sequence pair ({a}, {b}) for {s} sequences")));
    }
    Ok(())
}

/// Low-frequency cross-contrast swap between sequences `a` and `b`.
pub fn lfccs_swap(vol: &MultiSequenceVolume, pair: (usize, usize), r: f64) -> Result<MultiSequenceVolume> {
    check_pair(vol, pair)?;
    let mask = build_lowfreq_mask(vol.spatial_shape(), r)?.unshifted();
    let mut planner = FftPlanner::new();
    let fa = spectrum(vol.sequence(pair.0), &mut planner);
    let fb = spectrum(vol.sequence(pair.1), &mut planner);

    let mix = |own: &Array3<Complex64>, other: &Array3<Complex64>, planner: &mut FftPlanner<f64>| {
        let mut out = own.clone();
        Zip::from(&mut out).and(other).and(&mask).for_each(|o, &q, &m| {
            if m {
                // keep the phase of `own`, take the amplitude of `other`
                *o = Complex64::from_polar(q.norm(), o.arg());
            }
        });
        fft3(&mut out, true, planner);
        out.mapv(|v| v.re as f32)
    };

    let mut data = vol.data().clone();
    let new_a = mix(&fa, &fb, &mut planner);
    let new_b = mix(&fb, &fa, &mut planner);
    data.index_axis_mut(Axis(0), pair.0).assign(&new_a);
    data.index_axis_mut(Axis(0), pair.1).assign(&new_b);
    Ok(vol.with_data(data))
}

/// Channel-averaged binary entropy `U(v) = mean_c H(p_c(v))`, in nats.
pub fn binary_entropy_map(p: &ProbabilityMap) -> Array3<f32> {
    let c = p.num_channels() as f64;
    let mut u = Array3::<f64>::zeros(p.spatial_shape());
    for ch in p.data().outer_iter() {
        Zip::from(&mut u).and(&ch).for_each(|u, &pv| *u += binary_entropy(pv as f64) / c);
    }
    u.mapv(|v| v as f32)
}

#[inline]
pub(crate) fn binary_entropy(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// `q`-quantile with linear interpolation between order statistics
/// (position `q·(n−1)`).
pub fn quantile_linear(values: &[f32], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of an empty set");
    let mut v: Vec<f32> = values.to_vec();
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_v, upper) = v.select_nth_unstable_by(lo, f32::total_cmp);
    let hi_v = if frac > 0.0 { upper.iter().copied().fold(f32::INFINITY, f32::min) } else { lo_v };
    lo_v as f64 + frac * (hi_v as f64 - lo_v as f64)
}

/// Dilation with a cubic structuring element of odd `side`; voxels outside
/// the volume count as background.
pub fn dilate_box(mask: &Array3<bool>, side: usize) -> Array3<bool> {
    let radius = side / 2;
    if radius == 0 {
        return mask.clone();
    }
    // the box is separable: three 1D max filters
    let mut cur = mask.clone();
    for axis in 0..3 {
        let mut next = Array3::from_elem(cur.raw_dim(), false);
        for (src, mut dst) in cur.lanes(Axis(axis)).into_iter().zip(next.lanes_mut(Axis(axis))) {
            let n = src.len();
            for (i, &on) in src.iter().enumerate() {
                if on {
                    for j in i.saturating_sub(radius)..(i + radius + 1).min(n) {
                        dst[j] = true;
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// `Dilate(1[U ≥ τ_q])` with `τ_q` the `q`-quantile of `U`.
pub fn entropy_mask(u: &Array3<f32>, q: f64, dilation_side: usize) -> Result<BinaryMask3D> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Value(format!("quantile must lie in (0, 1), got {q}")));
    }
    if dilation_side == 0 || dilation_side.is_multiple_of(2) {
        return Err(Error::Value(format!("dilation side must be odd, got {dilation_side}")));
    }
    let flat: Vec<f32> = u.iter().copied().collect();
    let tau = quantile_linear(&flat, q);
    let seed = u.mapv(|v| v as f64 >= tau);
    Ok(BinaryMask3D(dilate_box(&seed, dilation_side)))
}

/// Uncertainty-guided patch swap between sequences `a` and `b` inside `mask`.
pub fn ugps_swap(vol: &MultiSequenceVolume, pair: (usize, usize), mask: &BinaryMask3D) -> Result<MultiSequenceVolume> {
    if mask.shape() != vol.spatial_shape() {
        return Err(Error::shape(format!("mask {:?} vs volume {:?}", mask.shape(), vol.spatial_shape())));
    }
    check_pair(vol, pair)?;
    let mut data = vol.data().clone();
    let (xa, xb) = (vol.sequence(pair.0), vol.sequence(pair.1));
    let mut a_out = xa.to_owned();
    let mut b_out = xb.to_owned();
    Zip::from(&mut a_out).and(&mut b_out).and(&xa).and(&xb).and(mask.data()).for_each(|oa, ob, &va, &vb, &m| {
        if m {
            *oa = vb;
            *ob = va;
        }
    });
    data.index_axis_mut(Axis(0), pair.0).assign(&a_out);
    data.index_axis_mut(Axis(0), pair.1).assign(&b_out);
    Ok(vol.with_data(data))
}

/// Uniform draw over unordered pairs of distinct sequence indices.
pub fn sample_pair(num_sequences: usize, rng: &mut impl Rng) -> (usize, usize) {
    debug_assert!(num_sequences >= 2);
    let total = num_sequences * (num_sequences - 1) / 2;
    let mut k = rng.random_range(0..total);
    for a in 0..num_sequences {
        let row = num_sequences - 1 - a;
        if k < row {
            return (a, a + 1 + k);
        }
        k -= row;
    }
    unreachable!("pair index within range")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Intervention {
    pub kind: InterventionKind,
    pub pair: (usize, usize),
}

/// The anchor view followed by two intervention views.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub views: Vec<MultiSequenceVolume>,
    /// Interventions that produced `views[1]` and `views[2]`.
    pub interventions: [Intervention; 2],
    /// The dilated entropy mask, when a patch swap was generated.
    pub ugps_mask: Option<BinaryMask3D>,
}

impl ViewSet {
    pub fn lfccs_pair(&self) -> Option<(usize, usize)> {
        self.interventions.iter().find(|i| i.kind == InterventionKind::Lfccs).map(|i| i.pair)
    }

    pub fn ugps_pair(&self) -> Option<(usize, usize)> {
        self.interventions.iter().find(|i| i.kind == InterventionKind::Ugps).map(|i| i.pair)
    }
}

/// Builds `[x, intervention₁(x), intervention₂(x)]`; pairs are drawn
/// independently from `rng` unless `cfg.shared_pair` is set.
pub fn generate_views(
    vol: &MultiSequenceVolume,
    teacher_anchor: &ProbabilityMap,
    cfg: &VistaConfig,
    rng: &mut impl Rng,
) -> Result<ViewSet> {
    if teacher_anchor.spatial_shape() != vol.spatial_shape() {
        return Err(Error::shape(format!(
            "anchor {:?} vs volume {:?}",
            teacher_anchor.spatial_shape(),
            vol.spatial_shape()
        )));
    }
    let s = vol.num_sequences();
    let first = sample_pair(s, rng);
    let second = if cfg.shared_pair { first } else { sample_pair(s, rng) };
    let interventions = [
        Intervention { kind: cfg.interventions[0], pair: first },
        Intervention { kind: cfg.interventions[1], pair: second },
    ];
    let ugps_mask = if interventions.iter().any(|i| i.kind == InterventionKind::Ugps) {
        let u = binary_entropy_map(teacher_anchor);
        Some(entropy_mask(&u, cfg.entropy_quantile, cfg.dilation_side)?)
    } else {
        None
    };
    let mut views = Vec::with_capacity(3);
    views.push(vol.clone());
    for iv in &interventions {
        views.push(match iv.kind {
            InterventionKind::Lfccs => lfccs_swap(vol, iv.pair, cfg.lfccs_ratio)?,
            InterventionKind::Ugps => ugps_swap(vol, iv.pair, ugps_mask.as_ref().expect("mask built for patch swap"))?,
        });
    }
    Ok(ViewSet { views, interventions, ugps_mask })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{LN_2, PI};

    fn random_volume(s: usize, dims: [usize; 3], seed: u64) -> MultiSequenceVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array::from_shape_fn((s, dims[0], dims[1], dims[2]), |_| rng.random_range(-2.0f32..2.0));
        MultiSequenceVolume::from_array(data).unwrap()
    }

    /// Direct O(N²) DFT, the independent reference for spectra.
    fn naive_dft(x: ArrayView3<'_, f32>) -> Array3<Complex64> {
        let s = x.shape().to_vec();
        Array3::from_shape_fn((s[0], s[1], s[2]), |(u, v, w)| {
            let mut acc = Complex64::new(0.0, 0.0);
            for ((i, j, k), &val) in x.indexed_iter() {
                let ph = -2.0 * PI
                    * ((u * i) as f64 / s[0] as f64 + (v * j) as f64 / s[1] as f64 + (w * k) as f64 / s[2] as f64);
                acc += Complex64::from_polar(val as f64, ph);
            }
            acc
        })
    }

    #[test]
    fn fft_matches_direct_dft() {
        let vol = random_volume(2, [8, 8, 10], 1);
        let mut planner = FftPlanner::new();
        let fast = spectrum(vol.sequence(0), &mut planner);
        let slow = naive_dft(vol.sequence(0));
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).norm() < 1e-9 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn mask_counts_follow_the_box_formula() {
        assert_eq!(build_lowfreq_mask([16, 16, 16], 0.0).unwrap().count(), 1);
        assert_eq!(build_lowfreq_mask([9, 12, 8], 0.0).unwrap().count(), 1);
        assert_eq!(build_lowfreq_mask([16, 16, 16], 1.0).unwrap().count(), 16 * 16 * 16);
        let m = build_lowfreq_mask([160, 192, 160], 0.10).unwrap();
        assert_eq!(m.half_widths, [8, 9, 8]);
        assert_eq!(m.count(), 17 * 19 * 17);
        assert_eq!(m.count(), 5491);
        assert!(build_lowfreq_mask([8, 8, 8], 1.5).is_err());
        assert!(build_lowfreq_mask([8, 8, 8], -0.1).is_err());
    }

    #[test]
    fn mask_is_symmetric_about_the_centre() {
        let m = build_lowfreq_mask([16, 18, 20], 0.3).unwrap();
        // DC bin of the unshifted layout is inside and the unshifted mask is
        // invariant under frequency negation.
        let u = m.unshifted();
        assert!(u[[0, 0, 0]]);
        let s = u.shape().to_vec();
        for ((i, j, k), &v) in u.indexed_iter() {
            assert_eq!(v, u[[(s[0] - i) % s[0], (s[1] - j) % s[1], (s[2] - k) % s[2]]]);
        }
    }

    #[test]
    fn self_swap_is_identity() {
        let mut data = random_volume(3, [8, 8, 8], 2).into_data();
        let a = data.index_axis(Axis(0), 0).to_owned();
        data.index_axis_mut(Axis(0), 1).assign(&a);
        let vol = MultiSequenceVolume::from_array(data).unwrap();
        for r in [0.1, 0.5, 1.0] {
            let out = lfccs_swap(&vol, (0, 1), r).unwrap();
            let err = (&out.sequence(0) - &vol.sequence(0)).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
            assert!(err <= 1e-4, "r={r}: {err}");
        }
    }

    #[test]
    fn untouched_sequences_are_bitwise_equal() {
        let vol = random_volume(4, [8, 8, 8], 3);
        let out = lfccs_swap(&vol, (1, 3), 0.25).unwrap();
        assert_eq!(out.sequence(0), vol.sequence(0));
        assert_eq!(out.sequence(2), vol.sequence(2));
        assert!(matches!(lfccs_swap(&vol, (1, 1), 0.1), Err(Error::Index(_))));
        assert!(matches!(lfccs_swap(&vol, (0, 4), 0.1), Err(Error::Index(_))));
    }

    #[test]
    fn zero_bandwidth_only_moves_the_mean() {
        let vol = random_volume(2, [8, 8, 8], 4);
        let out = lfccs_swap(&vol, (0, 1), 0.0).unwrap();
        let (x, y) = (vol.sequence(0), out.sequence(0));
        for axis in 0..3 {
            let n = x.shape()[axis];
            for i in 0..n - 1 {
                let gx = &x.index_axis(Axis(axis), i + 1) - &x.index_axis(Axis(axis), i);
                let gy = &y.index_axis(Axis(axis), i + 1) - &y.index_axis(Axis(axis), i);
                let err = (&gx - &gy).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
                assert!(err <= 1e-4, "axis {axis}: {err}");
            }
        }
    }

    #[test]
    fn full_bandwidth_exchanges_amplitudes() {
        let vol = random_volume(2, [8, 8, 8], 5);
        let out = lfccs_swap(&vol, (0, 1), 1.0).unwrap();
        let got = naive_dft(out.sequence(0));
        let want = naive_dft(vol.sequence(1));
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g.norm() - w.norm()).abs() <= 1e-3 * w.norm().max(1e-3), "{} vs {}", g.norm(), w.norm());
        }
    }

    /// Output phase of `a` equals its original phase, and Parseval ties the
    /// spatial energy to the mixed amplitude spectrum.
    #[test]
    fn phase_is_preserved_and_energy_matches_parseval() {
        for (dims, r, seed) in [([8, 8, 8], 0.3, 6u64), ([8, 10, 12], 0.5, 7), ([9, 8, 8], 0.2, 8)] {
            let vol = random_volume(3, dims, seed);
            let out = lfccs_swap(&vol, (0, 2), r).unwrap();
            let fa = naive_dft(vol.sequence(0));
            let fb = naive_dft(vol.sequence(2));
            let fo = naive_dft(out.sequence(0));
            let mask = build_lowfreq_mask(dims, r).unwrap().unshifted();
            for (((o, a), _), _) in fo.iter().zip(fa.iter()).zip(fb.iter()).zip(mask.iter()) {
                if o.norm() > 1e-6 {
                    let mut d = (o.arg() - a.arg()).rem_euclid(2.0 * PI);
                    if d > PI {
                        d = 2.0 * PI - d;
                    }
                    assert!(d <= 1e-3, "phase drift {d}");
                }
            }
            let n = fa.len() as f64;
            let mixed: f64 = fa
                .iter()
                .zip(fb.iter())
                .zip(mask.iter())
                .map(|((a, b), &m)| if m { b.norm_sqr() } else { a.norm_sqr() })
                .sum();
            let energy: f64 = out.sequence(0).iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((energy - mixed / n).abs() <= 1e-3 * energy, "{energy} vs {}", mixed / n);
        }
    }

    #[test]
    fn entropy_map_values() {
        let half = ProbabilityMap::filled([3, 4, 4, 4], 0.5).unwrap();
        assert!(binary_entropy_map(&half).iter().all(|&u| (u as f64 - LN_2).abs() < 1e-6));
        let certain = ProbabilityMap::new(Array::from_shape_fn((2, 4, 4, 4), |(c, x, _, _)| ((c + x) % 2) as f32)).unwrap();
        assert!(binary_entropy_map(&certain).iter().all(|&u| (0.0..=2e-6).contains(&u)));
        let mut mixed = Array4::from_elem((2, 1, 1, 1), 0.5f32);
        mixed[[1, 0, 0, 0]] = 1.0;
        let u = binary_entropy_map(&ProbabilityMap::new(mixed).unwrap());
        assert!((u[[0, 0, 0]] as f64 - LN_2 / 2.0).abs() < 1e-6);
    }

    #[test]
    fn constant_entropy_saturates_the_mask() {
        let u = Array3::from_elem((8, 8, 8), 0.3f32);
        assert_eq!(entropy_mask(&u, 0.95, 1).unwrap().count(), 512);
    }

    #[test]
    fn ramp_quantile_keeps_the_top_five_percent() {
        let u = Array::from_shape_fn((20, 20, 20), |(i, j, k)| (i * 400 + j * 20 + k) as f32);
        let m = entropy_mask(&u, 0.95, 1).unwrap();
        assert!((m.fraction() - 0.05).abs() <= 1.0 / 8000.0, "{}", m.fraction());
        assert!(entropy_mask(&u, 1.0, 1).is_err());
        assert!(entropy_mask(&u, 0.0, 1).is_err());
    }

    #[test]
    fn single_seed_dilates_to_its_neighbourhood() {
        let mut u = Array3::zeros((9, 9, 9));
        u[[4, 5, 3]] = 1.0f32;
        let m = entropy_mask(&u, 0.999, 3).unwrap();
        assert_eq!(m.count(), 27);
        for ((i, j, k), &v) in m.data().indexed_iter() {
            assert_eq!(v, i.abs_diff(4) <= 1 && j.abs_diff(5) <= 1 && k.abs_diff(3) <= 1);
        }
        // boundary seed: zero padding clips the neighbourhood
        let mut u = Array3::zeros((9, 9, 9));
        u[[0, 0, 0]] = 1.0f32;
        assert_eq!(entropy_mask(&u, 0.999, 3).unwrap().count(), 8);
    }

    #[test]
    fn quantile_interpolates_linearly() {
        let v = [4.0f32, 1.0, 3.0, 2.0];
        assert_eq!(quantile_linear(&v, 0.5), 2.5);
        assert_eq!(quantile_linear(&v, 1.0), 4.0);
        assert!((quantile_linear(&v, 0.9) - 3.7).abs() < 1e-12);
    }

    #[test]
    fn patch_swap_edge_cases() {
        let vol = random_volume(3, [8, 8, 8], 9);
        let empty = ugps_swap(&vol, (0, 2), &BinaryMask3D::zeros([8, 8, 8])).unwrap();
        assert_eq!(empty, vol);
        let full = ugps_swap(&vol, (0, 2), &BinaryMask3D::ones([8, 8, 8])).unwrap();
        assert_eq!(full.sequence(0), vol.sequence(2));
        assert_eq!(full.sequence(2), vol.sequence(0));
        assert_eq!(full.sequence(1), vol.sequence(1));
        assert!(matches!(ugps_swap(&vol, (0, 2), &BinaryMask3D::zeros([8, 8, 9])), Err(Error::Shape(_))));
    }

    #[test]
    fn patch_swap_matches_voxel_oracle_and_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let vol = random_volume(4, [8, 8, 8], rng.random());
            let mask = BinaryMask3D(Array3::from_shape_fn((8, 8, 8), |_| rng.random_bool(0.3)));
            let out = ugps_swap(&vol, (1, 3), &mask).unwrap();
            for ((i, j, k), &m) in mask.data().indexed_iter() {
                let (src_a, src_b) = if m { (3, 1) } else { (1, 3) };
                assert_eq!(out.data()[[1, i, j, k]], vol.data()[[src_a, i, j, k]]);
                assert_eq!(out.data()[[3, i, j, k]], vol.data()[[src_b, i, j, k]]);
            }
            assert_eq!(ugps_swap(&out, (1, 3), &mask).unwrap(), vol);
        }
    }

    #[test]
    fn pairs_are_uniform_over_unordered_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..6000 {
            let (a, b) = sample_pair(4, &mut rng);
            assert!(a < b && b < 4);
            *counts.entry((a, b)).or_insert(0) += 1;
        }
        assert_eq!(counts.len(), 6);
        assert!(counts.values().all(|&c| (850..1150).contains(&c)), "{counts:?}");
        assert_eq!(sample_pair(2, &mut rng), (0, 1));
    }

    #[test]
    fn view_generation_is_deterministic_and_pure() {
        let vol = random_volume(4, [8, 8, 8], 12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let anchor = ProbabilityMap::new(Array::from_shape_fn((3, 8, 8, 8), |_| rng.random_range(0.0f32..1.0))).unwrap();
        let cfg = VistaConfig { dilation_side: 3, ..Default::default() };
        let before = vol.clone();
        let a = generate_views(&vol, &anchor, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = generate_views(&vol, &anchor, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(vol, before);
        assert_eq!(a.views.len(), 3);
        assert_eq!(a.views[0], vol);
        assert!(a.lfccs_pair().is_some() && a.ugps_pair().is_some() && a.ugps_mask.is_some());
        assert_eq!(a.views[2], ugps_swap(&vol, a.ugps_pair().unwrap(), a.ugps_mask.as_ref().unwrap()).unwrap());
    }

    #[test]
    fn two_sequences_force_the_only_pair() {
        let vol = random_volume(2, [8, 8, 8], 14);
        let anchor = ProbabilityMap::filled([3, 8, 8, 8], 0.3).unwrap();
        let cfg = VistaConfig::default();
        let vs = generate_views(&vol, &anchor, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(vs.lfccs_pair(), Some((0, 1)));
        assert_eq!(vs.ugps_pair(), Some((0, 1)));
    }

    #[test]
    fn ablated_view_plans() {
        let vol = random_volume(4, [8, 8, 8], 15);
        let anchor = ProbabilityMap::filled([3, 8, 8, 8], 0.3).unwrap();
        let cfg = VistaConfig { interventions: [InterventionKind::Lfccs; 2], ..Default::default() };
        let vs = generate_views(&vol, &anchor, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(vs.ugps_mask.is_none());
        assert_eq!(vs.views[2], lfccs_swap(&vol, vs.interventions[1].pair, cfg.lfccs_ratio).unwrap());
        let shared = VistaConfig { shared_pair: true, ..Default::default() };
        let vs = generate_views(&vol, &anchor, &shared, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(vs.interventions[0].pair, vs.interventions[1].pair);
    }
}
