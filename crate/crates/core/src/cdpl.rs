//! Cross-view disagreement and the gated self-training losses.
//!
//! All losses return their value together with the gradient with respect to
//! the student logits. Teacher probabilities enter as constants.

use ndarray::{Array4, Zip};
use serde::{Deserialize, Serialize};

use crate::config::{PlNormalization, VistaConfig};
use crate::error::{Error, Result};
use crate::volume::ProbabilityMap;

/// Per-voxel, per-channel population variance across views.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap(Array4<f32>);

impl VarianceMap {
    /// Wraps precomputed variances; entries must be finite and non-negative.
    pub fn new(data: Array4<f32>) -> Result<Self> {
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Value("variances must be finite and non-negative".into()));
        }
        Ok(Self(data))
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.0
    }
}

/// Occupancy of the pseudo-label gates, as fractions of all entries.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GateReport {
    pub variance_open_fraction: f64,
    pub confidence_open_fraction: f64,
    pub joint_open_fraction: f64,
    /// Fraction of jointly gated entries whose hard label is 1.
    pub positive_label_fraction: f64,
}

/// A loss value and its gradient with respect to the student logits.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array4<f32>,
}

/// `V = (1/K) Σ_k (p_k − p̄)²`, computed in f64.
pub fn disagreement_variance(probs: &[&ProbabilityMap]) -> Result<VarianceMap> {
    let first = probs.first().ok_or_else(|| Error::EmptyInput("no views for variance".into()))?;
    let dim = first.data().raw_dim();
    if probs.iter().any(|p| p.data().raw_dim() != dim) {
        return Err(Error::shape("view probability maps differ in shape"));
    }
    let k = probs.len() as f64;
    let mut mean = Array4::<f64>::zeros(dim);
    for p in probs {
        Zip::from(&mut mean).and(p.data()).for_each(|m, &v| *m += v as f64 / k);
    }
    let mut var = Array4::<f64>::zeros(dim);
    for p in probs {
        Zip::from(&mut var).and(&mean).and(p.data()).for_each(|s, &m, &v| *s += (v as f64 - m).powi(2) / k);
    }
    Ok(VarianceMap(var.mapv(|v| v as f32)))
}

/// Binary cross-entropy of a logit against a soft target, in the stable
/// `softplus(z) - y·z` form. Returns the loss and `σ(z)`.
#[inline]
fn bce_logit(z: f32, y: f64) -> (f64, f64) {
    let z = z as f64;
    let loss = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    let s = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
    (loss, s)
}

fn check_shapes(logits: &Array4<f32>, teacher: &ProbabilityMap) -> Result<()> {
    if logits.raw_dim() != teacher.data().raw_dim() {
        return Err(Error::shape(format!("logits {:?} vs teacher {:?}", logits.shape(), teacher.data().shape())));
    }
    Ok(())
}

/// Hard pseudo-label BCE on entries that pass both the variance gate
/// (`V ≤ τ_var`) and the confidence gate (`p ∉ (τ⁻, τ⁺)`).
///
/// `variance = None` disables the variance gate (every entry passes it).
pub fn pseudo_label_loss(
    student_logits: &Array4<f32>,
    teacher_prob: &ProbabilityMap,
    variance: Option<&VarianceMap>,
    cfg: &VistaConfig,
) -> Result<(LossGrad, GateReport)> {
    check_shapes(student_logits, teacher_prob)?;
    if let Some(v) = variance {
        if v.0.raw_dim() != student_logits.raw_dim() {
            return Err(Error::shape("variance map does not match logits"));
        }
    }
    let n = student_logits.len();
    let (tau_var, tau_p, tau_m) = (cfg.tau_var as f32, cfg.tau_plus as f32, cfg.tau_minus as f32);

    // Pass 1: gate masks and counts.
    let mut targets = Array4::<i8>::from_elem(student_logits.raw_dim(), -1);
    let (mut var_open, mut conf_open, mut joint, mut pos) = (0usize, 0usize, 0usize, 0usize);
    let var_data = variance.map(|v| v.0.as_standard_layout().iter().copied().collect::<Vec<f32>>());
    let tp = teacher_prob.data().as_standard_layout();
    for (idx, (t, &p)) in targets.iter_mut().zip(tp.iter()).enumerate() {
        let vo = var_data.as_ref().is_none_or(|v| v[idx] <= tau_var);
        let label = if p >= tau_p {
            Some(1)
        } else if p <= tau_m {
            Some(0)
        } else {
            None
        };
        var_open += vo as usize;
        conf_open += label.is_some() as usize;
        if let (true, Some(y)) = (vo, label) {
            *t = y;
            joint += 1;
            pos += y as usize;
        }
    }

    let denom = match cfg.pl_normalization {
        PlNormalization::GatedMean => joint.max(1) as f64,
        PlNormalization::Sum => 1.0,
    };
    let mut loss = 0.0f64;
    let mut grad = Array4::<f32>::zeros(student_logits.raw_dim());
    Zip::from(&mut grad).and(student_logits).and(&targets).for_each(|g, &z, &t| {
        if t >= 0 {
            let y = t as f64;
            let (l, s) = bce_logit(z, y);
            loss += l;
            *g = ((s - y) / denom) as f32;
        }
    });
    let report = GateReport {
        variance_open_fraction: var_open as f64 / n as f64,
        confidence_open_fraction: conf_open as f64 / n as f64,
        joint_open_fraction: joint as f64 / n as f64,
        positive_label_fraction: if joint > 0 { pos as f64 / joint as f64 } else { 0.0 },
    };
    Ok((LossGrad { loss: loss / denom, grad }, report))
}

/// Soft BCE between each perturbed view's student prediction and the
/// teacher anchor, averaged over entries and over views.
///
/// Returns the loss and one gradient per view.
pub fn consistency_loss(view_logits: &[&Array4<f32>], teacher_prob: &ProbabilityMap) -> Result<(f64, Vec<Array4<f32>>)> {
    if view_logits.is_empty() {
        return Err(Error::EmptyInput("no perturbed views for consistency".into()));
    }
    let k = view_logits.len() as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(view_logits.len());
    for z in view_logits {
        check_shapes(z, teacher_prob)?;
        let n = z.len() as f64;
        let mut g = Array4::<f32>::zeros(z.raw_dim());
        let mut sum = 0.0f64;
        Zip::from(&mut g).and(*z).and(teacher_prob.data()).for_each(|g, &z, &p| {
            let (l, s) = bce_logit(z, p as f64);
            sum += l;
            *g = ((s - p as f64) / (n * k)) as f32;
        });
        total += sum / n / k;
        grads.push(g);
    }
    Ok((total, grads))
}

/// `ℒ = ℒ_PL + λ·ℒ_CONS`.
pub fn total_loss(l_pl: f64, l_cons: f64, lambda: f64) -> f64 {
    l_pl + lambda * l_cons
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::sigmoid;
    use ndarray::Array;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn pm(vals: &[f32]) -> ProbabilityMap {
        ProbabilityMap::new(Array::from_shape_vec((1, 1, 1, vals.len()), vals.to_vec()).unwrap()).unwrap()
    }

    fn var_of(vals: [f32; 3]) -> f64 {
        let maps: Vec<_> = vals.iter().map(|&v| pm(&[v])).collect();
        disagreement_variance(&maps.iter().collect::<Vec<_>>()).unwrap().0[[0, 0, 0, 0]] as f64
    }

    fn logit(p: f64) -> f32 {
        (p / (1.0 - p)).ln() as f32
    }

    #[test]
    fn hand_computed_variances() {
        assert_eq!(var_of([0.9, 0.9, 0.9]), 0.0);
        assert!((var_of([0.0, 0.5, 1.0]) - 1.0 / 6.0).abs() < 1e-6);
        let v = var_of([0.9, 0.95, 1.0]);
        assert!((v - 0.0016667).abs() < 1e-6 && v < 0.05);
    }

    #[test]
    fn variance_rejects_mismatched_views() {
        let (a, b) = (pm(&[0.1, 0.2]), pm(&[0.1]));
        assert!(matches!(disagreement_variance(&[&a, &b]), Err(Error::Shape(_))));
    }

    #[test]
    fn gated_single_voxel_is_ln2() {
        let cfg = VistaConfig::default();
        let t = pm(&[0.98]);
        let z = Array4::zeros((1, 1, 1, 1));
        let v = VarianceMap(Array4::from_elem((1, 1, 1, 1), 0.001));
        let (lg, rep) = pseudo_label_loss(&z, &t, Some(&v), &cfg).unwrap();
        assert!((lg.loss - LN_2).abs() < 1e-6);
        assert_eq!(rep.joint_open_fraction, 1.0);
        assert_eq!(rep.positive_label_fraction, 1.0);

        let vetoed = VarianceMap(Array4::from_elem((1, 1, 1, 1), 0.10));
        let (lg, rep) = pseudo_label_loss(&z, &t, Some(&vetoed), &cfg).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert_eq!(rep.joint_open_fraction, 0.0);
        assert!(lg.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ambiguous_teacher_closes_every_gate() {
        let cfg = VistaConfig::default();
        let t = ProbabilityMap::filled([3, 4, 4, 4], 0.5).unwrap();
        let z = Array4::from_elem((3, 4, 4, 4), 1.3f32);
        let (lg, rep) = pseudo_label_loss(&z, &t, None, &cfg).unwrap();
        assert_eq!((lg.loss, rep.confidence_open_fraction, rep.joint_open_fraction), (0.0, 0.0, 0.0));
        assert_eq!(rep.variance_open_fraction, 1.0);
    }

    #[test]
    fn sum_mode_scales_by_the_gated_count() {
        let t = pm(&[0.99, 0.01, 0.5, 0.97]);
        let z = Array::from_shape_vec((1, 1, 1, 4), vec![0.3f32, -0.2, 0.0, 1.0]).unwrap();
        let mean = pseudo_label_loss(&z, &t, None, &VistaConfig::default()).unwrap().0;
        let sum_cfg = VistaConfig { pl_normalization: PlNormalization::Sum, ..Default::default() };
        let sum = pseudo_label_loss(&z, &t, None, &sum_cfg).unwrap().0;
        assert!((sum.loss - 3.0 * mean.loss).abs() < 1e-9);
    }

    fn pl_value(z: &Array4<f32>, t: &ProbabilityMap, v: &VarianceMap) -> f64 {
        pseudo_label_loss(z, t, Some(v), &VistaConfig::default()).unwrap().0.loss
    }

    #[test]
    fn pseudo_label_gradient_matches_finite_differences() {
        let t = pm(&[0.98, 0.02, 0.6, 0.99, 0.97]);
        let v = VarianceMap(Array::from_shape_vec((1, 1, 1, 5), vec![0.01f32, 0.0, 0.0, 0.2, 0.04]).unwrap());
        let z = Array::from_shape_vec((1, 1, 1, 5), vec![0.4f32, -0.7, 0.2, 1.1, -0.3]).unwrap();
        let (lg, _) = pseudo_label_loss(&z, &t, Some(&v), &VistaConfig::default()).unwrap();
        for i in 0..5 {
            let h = 1e-3f32;
            let (mut up, mut down) = (z.clone(), z.clone());
            up[[0, 0, 0, i]] += h;
            down[[0, 0, 0, i]] -= h;
            let fd = (pl_value(&up, &t, &v) - pl_value(&down, &t, &v)) / (up[[0, 0, 0, i]] - down[[0, 0, 0, i]]) as f64;
            assert!((fd - lg.grad[[0, 0, 0, i]] as f64).abs() < 1e-4, "{i}: {fd} vs {}", lg.grad[[0, 0, 0, i]]);
        }
        // a single gated voxel with label 1 pulls the logit up: σ(z) − 1
        let single = pseudo_label_loss(&z.slice(ndarray::s![.., .., .., 0..1]).to_owned(), &pm(&[0.98]), None, &VistaConfig::default())
            .unwrap()
            .0;
        let g = single.grad[[0, 0, 0, 0]] as f64;
        assert!((g - (sigmoid(0.4) as f64 - 1.0)).abs() < 1e-6 && g < 0.0);
    }

    #[test]
    fn consistency_hand_values() {
        let t1 = pm(&[1.0, 1.0]);
        let sure = Array4::from_elem((1, 1, 1, 2), 30.0f32);
        let (l, _) = consistency_loss(&[&sure, &sure], &t1).unwrap();
        assert!(l < 1e-6);
        let half = Array4::zeros((1, 1, 1, 2));
        assert!((consistency_loss(&[&half, &half], &t1).unwrap().0 - LN_2).abs() < 1e-6);
        assert!((consistency_loss(&[&half, &half], &pm(&[0.5, 0.5])).unwrap().0 - LN_2).abs() < 1e-6);
        assert!(matches!(consistency_loss(&[], &t1), Err(Error::EmptyInput(_))));
    }

    fn cons_value(views: &[Array4<f32>; 2], t: &ProbabilityMap) -> f64 {
        consistency_loss(&[&views[0], &views[1]], t).unwrap().0
    }

    #[test]
    fn consistency_gradient_matches_finite_differences() {
        let t = pm(&[0.2, 0.7, 0.95]);
        let views = [
            Array::from_shape_vec((1, 1, 1, 3), vec![0.1f32, -0.4, 2.0]).unwrap(),
            Array::from_shape_vec((1, 1, 1, 3), vec![-1.0f32, 0.6, 0.3]).unwrap(),
        ];
        let (_, grads) = consistency_loss(&[&views[0], &views[1]], &t).unwrap();
        for k in 0..2 {
            for i in 0..3 {
                let h = 1e-3f32;
                let (mut up, mut down) = (views.clone(), views.clone());
                up[k][[0, 0, 0, i]] += h;
                down[k][[0, 0, 0, i]] -= h;
                let fd = (cons_value(&up, &t) - cons_value(&down, &t))
                    / (up[k][[0, 0, 0, i]] - down[k][[0, 0, 0, i]]) as f64;
                assert!((fd - grads[k][[0, 0, 0, i]] as f64).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn consistency_is_stationary_at_the_teacher_probability() {
        let t = pm(&[0.2, 0.7, 0.95]);
        let at = Array::from_shape_vec((1, 1, 1, 3), vec![logit(0.2), logit(0.7), logit(0.95)]).unwrap();
        let views = [at.clone(), at.clone()];
        let (_, grads) = consistency_loss(&[&at, &at], &t).unwrap();
        for k in 0..2 {
            for i in 0..3 {
                assert!(grads[k][[0, 0, 0, i]].abs() < 1e-4);
                let h = 1e-3f32;
                let (mut up, mut down) = (views.clone(), views.clone());
                up[k][[0, 0, 0, i]] += h;
                down[k][[0, 0, 0, i]] -= h;
                let fd = (cons_value(&up, &t) - cons_value(&down, &t)) / (2.0 * h as f64);
                assert!(fd.abs() < 1e-4, "{fd}");
            }
        }
    }

    #[test]
    fn total_loss_combines_terms() {
        assert_eq!(total_loss(0.7, 0.3, 1.0), 1.0);
        assert_eq!(total_loss(0.7, 0.3, 0.0), 0.7);
        assert_eq!(total_loss(0.0, 0.3, 1.0), 0.3);
    }

    proptest! {
        #[test]
        fn variance_is_bounded(a in 0.0f32..=1.0, b in 0.0f32..=1.0, c in 0.0f32..=1.0) {
            let v = var_of([a, b, c]);
            prop_assert!((0.0..=2.0 / 9.0 + 1e-7).contains(&v));
        }

        #[test]
        fn variance_ignores_view_order(a in 0.0f32..=1.0, b in 0.0f32..=1.0, c in 0.0f32..=1.0) {
            let base = var_of([a, b, c]);
            for perm in [[b, a, c], [c, b, a], [a, c, b], [b, c, a], [c, a, b]] {
                prop_assert!((var_of(perm) - base).abs() < 1e-7);
            }
        }

        #[test]
        fn gates_are_monotone(
            probs in proptest::collection::vec(0.0f32..=1.0, 64),
            vars in proptest::collection::vec(0.0f32..0.2, 64),
            tv in (0.001f64..0.2, 0.001f64..0.2),
            lo in (0.01f64..0.3, 0.01f64..0.3),
            hi in (0.7f64..0.99, 0.7f64..0.99),
        ) {
            let t = ProbabilityMap::new(Array::from_shape_vec((1, 4, 4, 4), probs).unwrap()).unwrap();
            let v = VarianceMap(Array::from_shape_vec((1, 4, 4, 4), vars).unwrap());
            let z = Array4::zeros((1, 4, 4, 4));
            let open = |tau_var: f64, tau_minus: f64, tau_plus: f64| {
                let cfg = VistaConfig { tau_var, tau_minus, tau_plus, ..Default::default() };
                pseudo_label_loss(&z, &t, Some(&v), &cfg).unwrap().1
            };
            let (t_lo, t_hi) = (tv.0.min(tv.1), tv.0.max(tv.1));
            prop_assert!(open(t_hi, 0.05, 0.95).joint_open_fraction >= open(t_lo, 0.05, 0.95).joint_open_fraction);
            // widening the ambiguous band (smaller τ⁻, larger τ⁺) closes more entries
            let (narrow, wide) = ((lo.0.max(lo.1), hi.0.min(hi.1)), (lo.0.min(lo.1), hi.0.max(hi.1)));
            let r_narrow = open(0.05, narrow.0, narrow.1);
            let r_wide = open(0.05, wide.0, wide.1);
            prop_assert!(r_wide.joint_open_fraction <= r_narrow.joint_open_fraction);
            prop_assert!(r_wide.joint_open_fraction <= r_wide.variance_open_fraction.min(r_wide.confidence_open_fraction));
        }
    }
}
