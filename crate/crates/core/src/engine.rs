//! Online test-time adaptation with an EMA teacher.
//!
//! Each incoming volume gets `K` gradient steps on the student's
//! batch-norm affine parameters. Every step recomputes the teacher anchor,
//! builds the intervention views, measures cross-view disagreement, and
//! minimises the gated pseudo-label loss plus the consistency loss. The
//! teacher tracks the student through an exponential moving average and
//! produces the final prediction.

use std::io::Write;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Adam, Gradients, ModelConfig, NormMode, ParamSelection, SegmentationModel, Trace, TrainableMode};
use crate::cdpl::{consistency_loss, disagreement_variance, pseudo_label_loss, total_loss, GateReport};
use crate::config::VistaConfig;
use crate::error::{Error, Result};
use crate::io::Container;
use crate::isig::generate_views;
use crate::volume::{sigmoid, MultiSequenceVolume, ProbabilityMap};

/// Student, teacher, optimizer and random stream of one adaptation stream.
#[derive(Debug, Clone)]
pub struct AdaptationState {
    pub student: SegmentationModel,
    pub teacher: SegmentationModel,
    pub adam: Adam,
    pub selection: ParamSelection,
    pub cfg: VistaConfig,
    /// Gradient steps taken so far across all cases.
    pub global_step: u64,
    pub rng: ChaCha8Rng,
}

/// Loss values and gate occupancy of one gradient step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub case: String,
    pub step: usize,
    pub loss_pl: f64,
    pub loss_cons: f64,
    pub loss_total: f64,
    pub var_open: f64,
    pub conf_open: f64,
    pub joint_open: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub case_id: String,
    /// Final prediction after adaptation on this case.
    pub prediction: ProbabilityMap,
    /// One record per completed step (fewer than `K` only for skipped cases).
    pub steps: Vec<StepRecord>,
    /// Reason the case was skipped; the state was rolled back to its
    /// pre-case value.
    pub skipped: Option<String>,
}

/// Student and teacher start as copies of `source`; only BN affine
/// parameters are trainable.
pub fn init_state(source: &SegmentationModel, cfg: &VistaConfig) -> Result<AdaptationState> {
    cfg.validate()?;
    let selection = source.trainable_parameters(TrainableMode::BnAffineOnly);
    Ok(AdaptationState {
        student: source.clone(),
        teacher: source.clone(),
        adam: Adam::new(source, &selection, cfg.lr),
        selection,
        cfg: cfg.clone(),
        global_step: 0,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    })
}

/// Like [`init_state`], loading the source model from a checkpoint that
/// must match `expected`.
pub fn init_state_from_checkpoint(checkpoint: &Container, expected: &ModelConfig, cfg: &VistaConfig) -> Result<AdaptationState> {
    let model = SegmentationModel::from_container_expecting(checkpoint, expected)?;
    init_state(&model, cfg)
}

/// `θ̄ ← α·θ̄ + (1−α)·θ` over every parameter, evaluated in f64 as
/// `θ̄ + (1−α)(θ − θ̄)` so that `θ̄ = θ` is an exact fixed point.
pub fn ema_update(teacher: &mut SegmentationModel, student: &SegmentationModel, alpha: f64) -> Result<()> {
    if teacher.config() != student.config() {
        return Err(Error::shape("teacher and student architectures differ"));
    }
    for i in 0..teacher.num_param_tensors() {
        let src = student.param_at(i);
        for (t, &s) in teacher.param_at_mut(i).iter_mut().zip(src) {
            let tb = *t as f64;
            *t = (tb + (1.0 - alpha) * (s as f64 - tb)) as f32;
        }
    }
    Ok(())
}

fn teacher_probs(model: &SegmentationModel, x: &Array4<f32>) -> Result<ProbabilityMap> {
    let trace = model.forward_traced(x, NormMode::Running)?;
    ProbabilityMap::new(trace.logits().mapv(sigmoid))
}

fn check_volume(model: &SegmentationModel, vol: &MultiSequenceVolume) -> Result<()> {
    if vol.num_sequences() != model.config().in_channels {
        return Err(Error::shape(format!(
            "volume has {} sequences, model expects {}",
            vol.num_sequences(),
            model.config().in_channels
        )));
    }
    Ok(())
}

/// Eval-mode prediction without any adaptation.
pub fn predict(model: &SegmentationModel, vol: &MultiSequenceVolume) -> Result<ProbabilityMap> {
    check_volume(model, vol)?;
    teacher_probs(model, vol.data())
}

struct StepOutcome {
    record: StepRecord,
    grads: Option<Gradients>,
    /// Train-mode trace of the anchor view, kept for running-stat updates.
    anchor_trace: Option<Trace>,
}

fn scaled(a: &Array4<f32>, s: f64) -> Array4<f32> {
    a.mapv(|v| (v as f64 * s) as f32)
}

fn vista_step(state: &mut AdaptationState, vol: &MultiSequenceVolume, case_id: &str, step: usize) -> Result<StepOutcome> {
    let cfg = state.cfg.clone();
    let anchor = teacher_probs(&state.teacher, vol.data())?;
    let use_gate = cfg.use_pseudo_label && cfg.use_variance_gate;
    let views = if cfg.needs_views() { Some(generate_views(vol, &anchor, &cfg, &mut state.rng)?) } else { None };

    let variance = match (&views, use_gate) {
        (Some(vs), true) => {
            let p1 = teacher_probs(&state.teacher, vs.views[1].data())?;
            let p2 = teacher_probs(&state.teacher, vs.views[2].data())?;
            Some(disagreement_variance(&[&anchor, &p1, &p2])?)
        }
        _ => None,
    };

    let mut grads: Option<Gradients> = None;
    let mut add = |g: Gradients| match grads.as_mut() {
        Some(acc) => acc.accumulate(&g),
        None => grads = Some(g),
    };

    let mut anchor_trace = None;
    let (mut loss_pl, mut report) = (0.0, GateReport::default());
    if cfg.use_pseudo_label {
        let trace = state.student.forward_traced(vol.data(), NormMode::Batch)?;
        let (lg, rep) = pseudo_label_loss(&trace.logits(), &anchor, variance.as_ref(), &cfg)?;
        (loss_pl, report) = (lg.loss, rep);
        if rep.joint_open_fraction > 0.0 {
            add(state.student.backward(&trace, &lg.grad, &state.selection));
        }
        anchor_trace = Some(trace);
    }

    let mut loss_cons = 0.0;
    if cfg.lambda > 0.0 {
        let vs = views.as_ref().expect("views generated whenever lambda > 0");
        let traces = [
            state.student.forward_traced(vs.views[1].data(), NormMode::Batch)?,
            state.student.forward_traced(vs.views[2].data(), NormMode::Batch)?,
        ];
        let logits = [traces[0].logits(), traces[1].logits()];
        let (l, gs) = consistency_loss(&[&logits[0], &logits[1]], &anchor)?;
        loss_cons = l;
        for (trace, g) in traces.iter().zip(&gs) {
            add(state.student.backward(trace, &scaled(g, cfg.lambda), &state.selection));
        }
    }

    let loss_total = total_loss(loss_pl, loss_cons, cfg.lambda);
    let record = StepRecord {
        case: case_id.to_owned(),
        step,
        loss_pl,
        loss_cons,
        loss_total,
        var_open: report.variance_open_fraction,
        conf_open: report.confidence_open_fraction,
        joint_open: report.joint_open_fraction,
    };
    Ok(StepOutcome { record, grads, anchor_trace })
}

fn blend_teacher(state: &mut AdaptationState) -> Result<()> {
    ema_update(&mut state.teacher, &state.student, state.cfg.ema_alpha)?;
    if !state.cfg.freeze_bn_stats {
        state.teacher.blend_buffers(&state.student, state.cfg.ema_alpha);
    }
    Ok(())
}

/// Runs `K` adaptation steps on one volume and returns the teacher's
/// prediction after the last update.
///
/// A non-finite loss or gradient rolls the state back to its pre-case
/// value and marks the case as skipped.
pub fn adapt_volume(state: &mut AdaptationState, vol: &MultiSequenceVolume, case_id: &str) -> Result<CaseResult> {
    check_volume(&state.student, vol)?;
    let saved = state.clone();
    if state.cfg.reset_optimizer_per_case {
        state.adam.reset();
    }
    let mut steps = Vec::with_capacity(state.cfg.steps_per_volume);
    for k in 0..state.cfg.steps_per_volume {
        let out = vista_step(state, vol, case_id, k)?;
        let finite = out.record.loss_total.is_finite() && out.grads.as_ref().is_none_or(Gradients::is_finite);
        if !finite {
            let err = Error::NonFiniteLoss { step: k };
            steps.push(out.record);
            let rng = state.rng.clone();
            *state = saved;
            state.rng = rng;
            return Ok(CaseResult {
                case_id: case_id.to_owned(),
                prediction: predict(&state.teacher, vol)?,
                steps,
                skipped: Some(err.to_string()),
            });
        }
        if let Some(g) = &out.grads {
            state.adam.step(&mut state.student, g);
        }
        if !state.cfg.freeze_bn_stats {
            if let Some(trace) = &out.anchor_trace {
                state.student.update_running_stats(trace, state.cfg.bn_momentum);
            }
        }
        if state.cfg.ema_per_step {
            blend_teacher(state)?;
        }
        state.global_step += 1;
        steps.push(out.record);
    }
    if !state.cfg.ema_per_step {
        blend_teacher(state)?;
    }
    Ok(CaseResult { case_id: case_id.to_owned(), prediction: predict(&state.teacher, vol)?, steps, skipped: None })
}

/// Adapts on each volume in order, carrying the state across cases.
pub fn run_stream(state: &mut AdaptationState, volumes: &[(String, MultiSequenceVolume)]) -> Result<Vec<CaseResult>> {
    if volumes.is_empty() {
        return Err(Error::EmptyInput("adaptation stream".into()));
    }
    volumes.iter().map(|(id, vol)| adapt_volume(state, vol, id)).collect()
}

/// Source-model predictions with no state change.
pub fn run_no_tta(model: &SegmentationModel, volumes: &[MultiSequenceVolume]) -> Result<Vec<ProbabilityMap>> {
    volumes.iter().map(|v| predict(model, v)).collect()
}

/// Mean channel binary entropy of `σ(z)` and its gradient with respect to `z`.
pub fn entropy_loss(logits: &Array4<f32>) -> (f64, Array4<f32>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits.mapv(|z| {
        let p = sigmoid(z) as f64;
        loss += crate::isig::binary_entropy(p);
        // dH/dz = −z·p(1−p)
        (-(z as f64) * p * (1.0 - p) / n) as f32
    });
    (loss / n, grad)
}

/// Entropy-minimisation baseline: `K` steps per volume on the student's
/// BN affine parameters with batch statistics, no teacher, views or gates.
/// Predictions use the same batch-statistics forward.
pub fn run_tent_baseline(state: &mut AdaptationState, volumes: &[(String, MultiSequenceVolume)]) -> Result<Vec<CaseResult>> {
    if volumes.is_empty() {
        return Err(Error::EmptyInput("adaptation stream".into()));
    }
    let mut results = Vec::with_capacity(volumes.len());
    for (id, vol) in volumes {
        check_volume(&state.student, vol)?;
        let saved = state.clone();
        let mut steps = Vec::new();
        let mut skipped = None;
        for k in 0..state.cfg.steps_per_volume {
            let trace = state.student.forward_traced(vol.data(), NormMode::Batch)?;
            let (loss, grad) = entropy_loss(&trace.logits());
            let grads = state.student.backward(&trace, &grad, &state.selection);
            steps.push(StepRecord {
                case: id.clone(),
                step: k,
                loss_pl: 0.0,
                loss_cons: 0.0,
                loss_total: loss,
                var_open: 0.0,
                conf_open: 0.0,
                joint_open: 0.0,
            });
            if !loss.is_finite() || !grads.is_finite() {
                let rng = state.rng.clone();
                *state = saved.clone();
                state.rng = rng;
                skipped = Some(Error::NonFiniteLoss { step: k }.to_string());
                break;
            }
            state.adam.step(&mut state.student, &grads);
            state.global_step += 1;
        }
        let logits = state.student.forward_traced(vol.data(), NormMode::Batch)?.logits();
        results.push(CaseResult { case_id: id.clone(), prediction: ProbabilityMap::new(logits.mapv(sigmoid))?, steps, skipped });
    }
    Ok(results)
}

/// Writes one JSON object per line.
pub fn write_step_records(records: &[StepRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

const STATE_KIND: &str = "adaptation_state";

fn push_model(c: &mut Container, prefix: &str, model: &SegmentationModel) {
    for t in model.snapshot().entries.into_iter().chain(model.buffers()) {
        c.push(format!("{prefix}.{}", t.name), &t.shape, t.data);
    }
}

fn load_model(c: &Container, prefix: &str, config: &ModelConfig) -> Result<SegmentationModel> {
    let mut sub = Container::new("checkpoint");
    sub.header.meta = serde_json::json!({ "model": config });
    let p = format!("{prefix}.");
    for (entry, data) in c.header.tensors.iter().zip(&c.payloads) {
        if let Some(name) = entry.name.strip_prefix(&p) {
            sub.push(name, &entry.shape, data.clone());
        }
    }
    SegmentationModel::from_container(&sub)
}

impl AdaptationState {
    /// Serialises both models, the optimizer, counters and the random
    /// stream position so that a resumed stream continues bitwise.
    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new(STATE_KIND);
        let js = |e: serde_json::Error| Error::Format(e.to_string());
        c.header.meta = serde_json::json!({
            "model": self.student.config(),
            "cfg": serde_json::to_value(&self.cfg).map_err(js)?,
            "global_step": self.global_step,
            "adam": serde_json::to_value(&self.adam).map_err(js)?,
            "rng": serde_json::to_value(&self.rng).map_err(js)?,
        });
        push_model(&mut c, "student", &self.student);
        push_model(&mut c, "teacher", &self.teacher);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(STATE_KIND)?;
        let meta = &c.header.meta;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("state is missing `{k}`")));
        let js = |e: serde_json::Error| Error::Format(e.to_string());
        let config: ModelConfig = serde_json::from_value(field("model")?).map_err(js)?;
        let cfg: VistaConfig = serde_json::from_value(field("cfg")?).map_err(js)?;
        let student = load_model(c, "student", &config)?;
        let teacher = load_model(c, "teacher", &config)?;
        let selection = student.trainable_parameters(TrainableMode::BnAffineOnly);
        let adam: Adam = serde_json::from_value(field("adam")?).map_err(js)?;
        if adam.indices() != selection.indices.as_slice() {
            return Err(Error::CheckpointMismatch("optimizer state does not match the trainable selection".into()));
        }
        Ok(Self {
            student,
            teacher,
            adam,
            selection,
            cfg,
            global_step: serde_json::from_value(field("global_step")?).map_err(js)?,
            rng: serde_json::from_value(field("rng")?).map_err(js)?,
        })
    }
}
