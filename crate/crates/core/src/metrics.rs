//! Overlap and boundary metrics for nested tumour subregions.
//!
//! Conventions: empty/empty Dice is 1; HD95 is undefined when either mask
//! is empty and sensitivity is undefined when the reference is empty.
//! Undefined values are left out of averages and counted.

use std::fmt::Write as _;

use ndarray::{Array3, ArrayView3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, ProbabilityMap};

/// Channel names of the label layout, outermost region first.
pub const REGION_NAMES: [&str; 3] = ["WT", "TC", "ET"];

/// Per-channel threshold; values equal to the threshold map to 1.
pub fn binarize(p: &ProbabilityMap, threshold: f32) -> LabelVolume {
    LabelVolume::new(p.data().mapv(|v| v >= threshold), false).expect("unnested labels always validate")
}

fn check(a: &ArrayView3<'_, bool>, b: &ArrayView3<'_, bool>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("masks differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn counts(pred: &ArrayView3<'_, bool>, gt: &ArrayView3<'_, bool>) -> (usize, usize, usize) {
    let (mut inter, mut np, mut ng) = (0, 0, 0);
    Zip::from(pred).and(gt).for_each(|&p, &g| {
        inter += (p && g) as usize;
        np += p as usize;
        ng += g as usize;
    });
    (inter, np, ng)
}

/// `2|A∩B| / (|A|+|B|)`.
pub fn dice(pred: ArrayView3<'_, bool>, gt: ArrayView3<'_, bool>) -> Result<f64> {
    check(&pred, &gt)?;
    let (inter, np, ng) = counts(&pred, &gt);
    Ok(if np + ng == 0 { 1.0 } else { 2.0 * inter as f64 / (np + ng) as f64 })
}

/// `TP / (TP + FN)`; `None` when the reference is empty.
pub fn sensitivity(pred: ArrayView3<'_, bool>, gt: ArrayView3<'_, bool>) -> Result<Option<f64>> {
    check(&pred, &gt)?;
    let (inter, _, ng) = counts(&pred, &gt);
    Ok((ng > 0).then(|| inter as f64 / ng as f64))
}

/// Foreground voxels with at least one 6-neighbour in the background; the
/// region outside the volume counts as background.
pub fn surface(mask: ArrayView3<'_, bool>) -> Array3<bool> {
    let s = mask.shape();
    let dims = [s[0], s[1], s[2]];
    Array3::from_shape_fn(dims, |(i, j, k)| {
        if !mask[[i, j, k]] {
            return false;
        }
        let idx = [i, j, k];
        (0..3).any(|ax| {
            let lo = idx[ax] == 0 || {
                let mut n = idx;
                n[ax] -= 1;
                !mask[n]
            };
            let hi = idx[ax] + 1 == dims[ax] || {
                let mut n = idx;
                n[ax] += 1;
                !mask[n]
            };
            lo || hi
        })
    })
}

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas), with sample spacing `h`.
fn edt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let pos = |q: usize| q as f64 * h;
    let mut k = 0usize;
    let first = (0..n).find(|&q| f[q].is_finite());
    let Some(first) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)));
            // z[0] = -inf, so this never walks below the first parabola
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in physical units) from every voxel to the
/// nearest `true` voxel of `seeds`. Infinite everywhere if `seeds` is empty.
pub fn squared_distance_transform(seeds: &Array3<bool>, spacing: [f64; 3]) -> Array3<f64> {
    let mut d = seeds.mapv(|b| if b { 0.0 } else { f64::INFINITY });
    for (axis, &h) in spacing.iter().enumerate() {
        let n = d.shape()[axis];
        let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
        for mut lane in d.lanes_mut(ndarray::Axis(axis)) {
            f.iter_mut().zip(lane.iter()).for_each(|(a, b)| *a = *b);
            edt_1d(&f, h, &mut out, &mut v, &mut z);
            lane.iter_mut().zip(&out).for_each(|(a, b)| *a = *b);
        }
    }
    d
}

/// Linear interpolation between order statistics at position `q·(n−1)`.
pub fn percentile_linear(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    values[lo] + (pos - lo as f64) * (values[hi] - values[lo])
}

/// 95th percentile of the pooled surface-to-surface nearest distances in
/// both directions, in the units of `spacing`. `None` if either mask is empty.
pub fn hd95(pred: ArrayView3<'_, bool>, gt: ArrayView3<'_, bool>, spacing: [f64; 3]) -> Result<Option<f64>> {
    check(&pred, &gt)?;
    let (sp, sg) = (surface(pred), surface(gt));
    if !sp.iter().any(|&b| b) || !sg.iter().any(|&b| b) {
        return Ok(None);
    }
    let (dp, dg) = (squared_distance_transform(&sp, spacing), squared_distance_transform(&sg, spacing));
    let mut dists = Vec::new();
    Zip::from(&sp).and(&dg).for_each(|&s, &d| {
        if s {
            dists.push(d.sqrt());
        }
    });
    Zip::from(&sg).and(&dp).for_each(|&s, &d| {
        if s {
            dists.push(d.sqrt());
        }
    });
    Ok(Some(percentile_linear(&mut dists, 0.95)))
}

/// Per-channel metrics of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: Vec<f64>,
    pub hd95: Vec<Option<f64>>,
    pub sensitivity: Vec<Option<f64>>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl CaseMetrics {
    pub fn macro_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }

    pub fn macro_hd95(&self) -> Option<f64> {
        mean_defined(self.hd95.iter().copied())
    }

    pub fn macro_sensitivity(&self) -> Option<f64> {
        mean_defined(self.sensitivity.iter().copied())
    }
}

pub fn evaluate_case(case_id: &str, pred: &LabelVolume, gt: &LabelVolume, spacing: [f64; 3]) -> Result<CaseMetrics> {
    if pred.data().shape() != gt.data().shape() {
        return Err(Error::shape(format!("prediction {:?} vs reference {:?}", pred.data().shape(), gt.data().shape())));
    }
    let mut m = CaseMetrics { case_id: case_id.to_owned(), dice: vec![], hd95: vec![], sensitivity: vec![] };
    for c in 0..gt.num_channels() {
        let (p, g) = (pred.channel(c), gt.channel(c));
        m.dice.push(dice(p, g)?);
        m.hd95.push(hd95(p, g, spacing)?);
        m.sensitivity.push(sensitivity(p, g)?);
    }
    Ok(m)
}

/// Mean with sample standard deviation (`n − 1`); `std` is `None` for a
/// single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: Option<f64>,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Summary { mean, std, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSummary {
    pub name: String,
    pub dice: Option<Summary>,
    pub hd95: Option<Summary>,
    pub sensitivity: Option<Summary>,
}

/// Cohort metrics: channel mean, then case mean within each run, then
/// mean ± sample std across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: usize,
    pub cases_per_run: Vec<usize>,
    pub dice: Summary,
    pub hd95: Option<Summary>,
    pub sensitivity: Option<Summary>,
    /// Per-run macro Dice, in run order.
    pub run_dice: Vec<f64>,
    pub channels: Vec<ChannelSummary>,
    /// Channel entries left out of the HD95 average (either mask empty).
    pub undefined_hd95: usize,
    /// Channel entries left out of the sensitivity average (empty reference).
    pub undefined_sensitivity: usize,
}

fn case_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    mean_defined(values)
}

/// Aggregates one or more runs (for example, seeds) over the same cohort.
pub fn macro_report(runs: &[Vec<CaseMetrics>]) -> Result<MetricsReport> {
    if runs.is_empty() || runs.iter().any(|r| r.is_empty()) {
        return Err(Error::EmptyInput("metrics need at least one case per run".into()));
    }
    let nc = runs[0][0].dice.len();
    if runs.iter().flatten().any(|c| c.dice.len() != nc || c.hd95.len() != nc || c.sensitivity.len() != nc) {
        return Err(Error::shape("cases disagree on the number of channels"));
    }
    let per_run = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| -> Vec<f64> {
        runs.iter().filter_map(|r| case_mean(r.iter().map(f))).collect()
    };
    let run_dice = per_run(&|c| Some(c.macro_dice()));
    let channels = (0..nc)
        .map(|ch| ChannelSummary {
            name: REGION_NAMES.get(ch).map_or_else(|| format!("ch{ch}"), |s| s.to_string()),
            dice: Summary::of(&per_run(&|c| Some(c.dice[ch]))),
            hd95: Summary::of(&per_run(&|c| c.hd95[ch])),
            sensitivity: Summary::of(&per_run(&|c| c.sensitivity[ch])),
        })
        .collect();
    let all = runs.iter().flatten();
    Ok(MetricsReport {
        runs: runs.len(),
        cases_per_run: runs.iter().map(Vec::len).collect(),
        dice: Summary::of(&run_dice).expect("at least one run"),
        hd95: Summary::of(&per_run(&|c| c.macro_hd95())),
        sensitivity: Summary::of(&per_run(&|c| c.macro_sensitivity())),
        run_dice,
        channels,
        undefined_hd95: all.clone().map(|c| c.hd95.iter().filter(|v| v.is_none()).count()).sum(),
        undefined_sensitivity: all.map(|c| c.sensitivity.iter().filter(|v| v.is_none()).count()).sum(),
    })
}

fn cell(s: Option<Summary>, digits: usize) -> String {
    match s {
        None => "n/a".into(),
        Some(Summary { mean, std: None, .. }) => format!("{mean:.digits$}"),
        Some(Summary { mean, std: Some(sd), .. }) => format!("{mean:.digits$} ± {sd:.digits$}"),
    }
}

/// Plain-text table with one row per method: macro Dice ↑, Sens. ↑, HD95 ↓.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>17}  {:>17}  {:>17}", "Method", "Dice ↑", "Sens. ↑", "HD95 ↓");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>17}  {:>17}  {:>17}",
            name,
            cell(Some(r.dice), 4),
            cell(r.sensitivity, 4),
            cell(r.hd95, 2)
        );
    }
    let flagged: Vec<_> = rows
        .iter()
        .filter(|(_, r)| r.undefined_hd95 + r.undefined_sensitivity > 0)
        .map(|(n, r)| format!("{n}: {} HD95, {} Sens. entries undefined", r.undefined_hd95, r.undefined_sensitivity))
        .collect();
    for f in flagged {
        let _ = writeln!(out, "  excluded {f}");
    }
    out
}
