//! Relation-aware meta-learning engine.
//!
//! Fuses the data-driven and graph segment representations, modulates the
//! shared initialization into a segment-specific one through a sigmoid gate,
//! runs inner-loop adaptation, and optimizes the joint outer objective
//! (summed post-adaptation test losses plus the weighted reconstruction
//! term). Meta-testing applies the same customization to an unseen segment.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mpfn::{self, HorizonConfig, LossReduction, MpfnDims, MpfnMode, SampleWindow};
use crate::relation::{self, EncoderDims};
use crate::tensor::{BoundParams, OptKind, Optimizer, ParamSet, Tape, Tensor, Var};

/// Ablation switch: which relational signal modulates the initialization and
/// which MPFN branch is active.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// drop the data-driven representation (graph signal only)
    NoData,
    /// drop the graph representation (data signal only)
    NoGraph,
    /// drop the seasonal GRU branch
    NoSeasonal,
    /// drop the local GRU branch
    NoLocal,
}

impl Ablation {
    pub fn uses_data(self) -> bool {
        !matches!(self, Ablation::NoData)
    }

    pub fn uses_graph(self) -> bool {
        !matches!(self, Ablation::NoGraph)
    }

    pub fn mpfn_mode(self) -> MpfnMode {
        match self {
            Ablation::NoSeasonal => MpfnMode::LocalOnly,
            Ablation::NoLocal => MpfnMode::SeasonalOnly,
            _ => MpfnMode::Full,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_d" => Ok(Ablation::NoData),
            "no_g" => Ok(Ablation::NoGraph),
            "szn" => Ok(Ablation::NoSeasonal),
            "local" => Ok(Ablation::NoLocal),
            other => Err(Error::Config(format!("unknown ablation {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoData => "no_d",
            Ablation::NoGraph => "no_g",
            Ablation::NoSeasonal => "szn",
            Ablation::NoLocal => "local",
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MetaGradOrder {
    First,
    Second,
}

/// How the sigmoid gate is laid out, or whether modulation is bypassed.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum ModulationMode {
    /// one gate entry per initialization coordinate
    Full,
    /// one gate scalar per named tensor
    Block,
    /// no modulation at all (the plain meta-learning baseline)
    Identity,
    /// gate forced to a constant; ForcedGate(1.0) must match Identity
    ForcedGate(f64),
}

impl ModulationMode {
    pub fn has_params(self) -> bool {
        matches!(self, ModulationMode::Full | ModulationMode::Block)
    }
}

#[derive(Copy, Clone, Debug)]
pub struct MetaConfig {
    pub inner_lr: f64,
    pub meta_lr: f64,
    pub lambda: f64,
    pub inner_steps: usize,
    pub meta_batch: usize,
    pub ablation: Ablation,
    pub order: MetaGradOrder,
    pub modulation: ModulationMode,
    pub outer_opt: OptKind,
    pub reduction: LossReduction,
    /// per-episode caps on sampled train/test windows per meta step; 0 = all
    pub train_samples: usize,
    pub test_samples: usize,
    /// probability of blinding a window's seasonal branch during meta
    /// training, so the model also learns the no-seasonal-history regime
    /// that data-poor segments live in
    pub seasonal_dropout: f64,
    /// cap on windows entering the reconstruction term per meta step; the
    /// most recent of the sampled adaptation windows are kept. 0 = all
    pub rec_samples: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 1e-4,
            meta_lr: 1e-3,
            lambda: 0.5,
            inner_steps: 1,
            meta_batch: 128,
            ablation: Ablation::Full,
            order: MetaGradOrder::First,
            modulation: ModulationMode::Full,
            outer_opt: OptKind::Adam,
            reduction: LossReduction::Mean,
            train_samples: 0,
            test_samples: 0,
            seasonal_dropout: 0.0,
            rec_samples: 0,
        }
    }
}

/// Model dimensions shared across the meta parameters.
#[derive(Copy, Clone, Debug)]
pub struct MetaDims {
    pub input: usize,
    pub hidden: usize,
    pub data_dim: usize,
    pub graph_dim: usize,
    pub walk_dim: usize,
}

impl MetaDims {
    pub fn fused_dim(&self, ablation: Ablation) -> usize {
        let mut d = 0;
        if ablation.uses_data() {
            d += self.data_dim;
        }
        if ablation.uses_graph() {
            d += self.graph_dim;
        }
        d
    }
}

/// One segment's sampled train/test sets plus identity and metadata. Train
/// windows chronologically precede test windows with a full target-window
/// gap, so no test input overlaps a train target.
#[derive(Clone, Debug)]
pub struct Episode {
    pub segment_id: String,
    pub category: String,
    pub d_tr: Vec<SampleWindow>,
    pub d_te: Vec<SampleWindow>,
    /// frozen walk embedding u^g; absent for segments outside the graph
    pub graph_vector: Option<Vec<f64>>,
    /// de-normalization for targets (train statistics)
    pub target_mean: f64,
    pub target_std: f64,
}

impl Episode {
    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.target_std + self.target_mean
    }

    /// No-leakage chronology: the last train target window must end before
    /// the first test target window begins.
    pub fn validate_chronology(&self, cfg: &HorizonConfig) -> Result<()> {
        let max_tr = self.d_tr.iter().map(|w| w.t_c).max();
        let min_te = self.d_te.iter().map(|w| w.t_c).min();
        if let (Some(tr), Some(te)) = (max_tr, min_te) {
            if tr + cfg.gap + cfg.horizon >= te + cfg.gap {
                return Err(Error::Config(format!(
                    "episode {}: train window ending at t_c={} leaks into test starting at t_c={}",
                    self.segment_id, tr, te
                )));
            }
        }
        Ok(())
    }
}

/// Initialize all learnable meta parameters for the given configuration:
/// the shared MPFN initialization under `theta0/`, the segment encoder and
/// decoder under `enc/` / `dec/`, the graph head under `graphhead/`, and the
/// modulation map under `mod/`.
pub fn init_meta_params(dims: &MetaDims, cfg: &MetaConfig, rng: &mut impl Rng) -> ParamSet {
    let mut params = ParamSet::new();
    let theta0 = mpfn::init_mpfn(MpfnDims { input: dims.input, hidden: dims.hidden }, rng);
    params.insert_prefixed("theta0/", &theta0);
    if cfg.ablation.uses_data() && cfg.modulation.has_params() {
        let enc = relation::init_segment_encoder(
            EncoderDims { input: dims.input, hidden: dims.hidden, repr_dim: dims.data_dim },
            rng,
        );
        params.insert_prefixed("", &enc);
    }
    if cfg.ablation.uses_graph() && cfg.modulation.has_params() {
        let head = relation::init_graph_head(dims.walk_dim, dims.graph_dim, rng);
        params.insert_prefixed("graphhead/", &head);
    }
    if cfg.modulation.has_params() {
        let q_dim = dims.fused_dim(cfg.ablation);
        let rows = match cfg.modulation {
            ModulationMode::Full => theta0.total_dim(),
            ModulationMode::Block => theta0.len(),
            _ => unreachable!(),
        };
        // start the gate constant near identity (sigma(2) ~ 0.88): W_m = 0
        // makes the initial run match plain meta-learning up to a uniform
        // shrink, so modulation only departs where the outer gradient finds
        // representation signal
        params.insert("mod/w", Tensor::zeros(vec![rows, q_dim]));
        params.insert("mod/b", Tensor::new(vec![rows], vec![2.0; rows]).expect("static shape"));
    }
    params
}

/// Concatenate the data-driven and graph representations, data first.
pub fn fuse_repr(tape: &mut Tape, q_d: Option<Var>, q_g: Option<Var>) -> Result<Var> {
    match (q_d, q_g) {
        (Some(d), Some(g)) => tape.concat(&[d, g]),
        (Some(d), None) => Ok(d),
        (None, Some(g)) => Ok(g),
        (None, None) => Err(Error::Config("no representation available to fuse".into())),
    }
}

/// Customize the initialization: elementwise product of the sigmoid gate
/// with the flattened theta0, reshaped back to its structure. `theta0` keys
/// are theta0-relative names.
pub fn modulate(
    tape: &mut Tape,
    params: &BoundParams,
    q: Option<Var>,
    theta0: &BoundParams,
    mode: ModulationMode,
) -> Result<BoundParams> {
    match mode {
        ModulationMode::Identity => Ok(theta0.clone()),
        ModulationMode::ForcedGate(c) => {
            let mut out = BTreeMap::new();
            for (name, &v) in theta0.vars() {
                out.insert(name.clone(), tape.scale(v, c)?);
            }
            Ok(BoundParams::from_vars(out))
        }
        ModulationMode::Full => {
            let q = q.ok_or_else(|| Error::Config("modulation requires a representation".into()))?;
            let mut flat_parts = Vec::new();
            let mut layout = Vec::new();
            for (name, &v) in theta0.vars() {
                let shape = tape.value(v).shape().to_vec();
                let n = tape.value(v).len();
                flat_parts.push(tape.reshape(v, vec![n])?);
                layout.push((name.clone(), shape, n));
            }
            let flat = tape.concat(&flat_parts)?;
            let pre = tape.affine(params.get("mod/w"), q, params.get("mod/b"))?;
            let gate = tape.sigmoid(pre)?;
            let gated = tape.mul(gate, flat)?;
            let mut out = BTreeMap::new();
            let mut off = 0;
            for (name, shape, n) in layout {
                let part = tape.slice(gated, off, n)?;
                out.insert(name, tape.reshape(part, shape)?);
                off += n;
            }
            Ok(BoundParams::from_vars(out))
        }
        ModulationMode::Block => {
            let q = q.ok_or_else(|| Error::Config("modulation requires a representation".into()))?;
            let pre = tape.affine(params.get("mod/w"), q, params.get("mod/b"))?;
            let gate = tape.sigmoid(pre)?;
            let mut out = BTreeMap::new();
            for (i, (name, &v)) in theta0.vars().iter().enumerate() {
                let shape = tape.value(v).shape().to_vec();
                let n = tape.value(v).len();
                let gi = tape.slice(gate, i, 1)?;
                let gs = tape.reshape(gi, vec![])?;
                let gb = tape.apply(crate::tensor::Op::Broadcast(vec![n]), &[gs])?;
                let flat = tape.reshape(v, vec![n])?;
                let gated = tape.mul(gb, flat)?;
                out.insert(name.clone(), tape.reshape(gated, shape)?);
            }
            Ok(BoundParams::from_vars(out))
        }
    }
}

/// Inner-loop variants: keep the inner gradient on the tape (second order),
/// detach it (first order), or replay previously captured gradient values
/// (the oracle for first-order checks).
pub enum InnerGrads<'a> {
    OnTape,
    Detached,
    Frozen(&'a [BTreeMap<String, Tensor>]),
}

/// K plain gradient steps on `loss_fn` starting from `theta`. Returns the
/// adapted parameters and, for the non-frozen variants, the detached
/// per-step gradient values actually applied.
pub fn inner_adapt<F>(
    tape: &mut Tape,
    theta: &BoundParams,
    loss_fn: F,
    alpha: f64,
    steps: usize,
    grads_mode: InnerGrads,
) -> Result<(BoundParams, Vec<BTreeMap<String, Tensor>>)>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let mut theta = theta.clone();
    let mut applied = Vec::new();
    for k in 0..steps {
        let mut next = BTreeMap::new();
        match &grads_mode {
            InnerGrads::Frozen(per_step) => {
                let g_map = per_step.get(k).ok_or_else(|| {
                    Error::Config(format!("frozen inner gradients missing for step {k}"))
                })?;
                for (name, &v) in theta.vars() {
                    match g_map.get(name) {
                        Some(g) => {
                            let gv = tape.constant(g.clone());
                            let step_v = tape.scale(gv, -alpha)?;
                            next.insert(name.clone(), tape.add(v, step_v)?);
                        }
                        None => {
                            next.insert(name.clone(), v);
                        }
                    }
                }
            }
            _ => {
                // First order treats the inner gradient as a constant, so
                // the loss is evaluated from detached copies of theta: the
                // backward then stops at the adaptation point instead of
                // re-traversing the modulation and representation graph
                // whose contribution would be thrown away.
                let eval_theta = if matches!(grads_mode, InnerGrads::Detached) {
                    let mut m = BTreeMap::new();
                    for (name, &v) in theta.vars() {
                        let value = tape.value(v).clone();
                        m.insert(name.clone(), tape.leaf(value));
                    }
                    BoundParams::from_vars(m)
                } else {
                    theta.clone()
                };
                let loss = loss_fn(tape, &eval_theta)?;
                let grads = tape.backward(loss)?;
                let mut step_record = BTreeMap::new();
                for (name, &v) in theta.vars() {
                    let eval_v = *eval_theta.vars().get(name).unwrap_or(&v);
                    match grads.var_wrt(eval_v) {
                        Some(gv) => {
                            step_record.insert(name.clone(), tape.value(gv).clone());
                            let g = if matches!(grads_mode, InnerGrads::OnTape) {
                                gv
                            } else {
                                let detached = tape.value(gv).clone();
                                tape.constant(detached)
                            };
                            let step_v = tape.scale(g, -alpha)?;
                            next.insert(name.clone(), tape.add(v, step_v)?);
                        }
                        None => {
                            next.insert(name.clone(), v);
                        }
                    }
                }
                applied.push(step_record);
            }
        }
        theta = BoundParams::from_vars(next);
    }
    Ok((theta, applied))
}

/// Per-episode outcome of one meta-training step.
#[derive(Clone, Debug)]
pub struct EpisodeReport {
    pub segment_id: String,
    pub test_loss: f64,
    pub rec_loss: f64,
}

struct EpisodeGrads {
    grads: BTreeMap<String, Tensor>,
    test_loss: f64,
    rec_loss: f64,
}

fn subsample<'a>(
    windows: &'a [SampleWindow],
    cap: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a SampleWindow> {
    if cap == 0 || windows.len() <= cap {
        return windows.iter().collect();
    }
    let mut idx: Vec<usize> = (0..windows.len()).collect();
    idx.shuffle(rng);
    idx.truncate(cap);
    idx.sort_unstable();
    idx.into_iter().map(|i| &windows[i]).collect()
}

/// Seasonal-blind copy of the adaptation windows for the encoder, so the
/// data-driven representation is computed the same way for segments with
/// and without seasonal history.
fn encoder_view(windows: &[SampleWindow]) -> Vec<SampleWindow> {
    windows
        .iter()
        .map(|w| {
            let mut v = w.clone();
            for frame in v.seasonal_seq.iter_mut() {
                frame.iter_mut().for_each(|x| *x = 0.0);
            }
            v.seasonal_mask = false;
            v
        })
        .collect()
}

/// Build the per-episode objective on a fresh tape and return gradients of
/// `test_loss + rec_coef * rec_loss` with respect to all meta parameters.
fn episode_grads(
    params: &ParamSet,
    ep: &Episode,
    cfg: &MetaConfig,
    rec_coef: f64,
    rng: &mut ChaCha8Rng,
    frozen: Option<&[BTreeMap<String, Tensor>]>,
) -> Result<EpisodeGrads> {
    let mut d_tr: Vec<SampleWindow> =
        subsample(&ep.d_tr, cfg.train_samples, rng).into_iter().cloned().collect();
    let mut d_te: Vec<SampleWindow> =
        subsample(&ep.d_te, cfg.test_samples, rng).into_iter().cloned().collect();
    if cfg.seasonal_dropout > 0.0 {
        for w in d_tr.iter_mut().chain(d_te.iter_mut()) {
            if w.seasonal_mask && rng.gen_bool(cfg.seasonal_dropout) {
                for frame in w.seasonal_seq.iter_mut() {
                    frame.iter_mut().for_each(|x| *x = 0.0);
                }
                w.seasonal_mask = false;
            }
        }
    }
    if d_tr.is_empty() && cfg.inner_steps > 0 {
        return Err(Error::EmptyBatch("inner_adapt"));
    }
    if d_te.is_empty() {
        return Err(Error::EmptyBatch("episode test set"));
    }

    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let theta0 = bound.sub("theta0/");
    let mode = cfg.ablation.mpfn_mode();

    // relational representation
    let use_repr = cfg.modulation.has_params();
    let (q_d, rec) = if use_repr && cfg.ablation.uses_data() {
        let view = encoder_view(&d_tr);
        let qs = relation::sample_encodings(&mut tape, &bound, &view)?;
        let q = relation::pool_encodings(&mut tape, &qs)?;
        let rec_n = match cfg.rec_samples {
            0 => view.len(),
            n => n.min(view.len()),
        };
        let start = view.len() - rec_n;
        let r = relation::reconstruction_from(&mut tape, &bound, &qs[start..], &view[start..])?;
        (Some(q), Some(r))
    } else {
        (None, None)
    };
    let q_g = if use_repr && cfg.ablation.uses_graph() {
        let u = ep
            .graph_vector
            .as_ref()
            .ok_or_else(|| Error::UnknownSegment(ep.segment_id.clone()))?;
        let uv = tape.constant(Tensor::vector(u.clone()));
        Some(relation::graph_repr(&mut tape, &bound.sub("graphhead/"), uv)?)
    } else {
        None
    };
    let q = if use_repr { Some(fuse_repr(&mut tape, q_d, q_g)?) } else { None };

    let theta_init = modulate(&mut tape, &bound, q, &theta0, cfg.modulation)?;

    let grads_mode = match (frozen, cfg.order) {
        (Some(f), _) => InnerGrads::Frozen(f),
        (None, MetaGradOrder::Second) => InnerGrads::OnTape,
        (None, MetaGradOrder::First) => InnerGrads::Detached,
    };
    let reduction = cfg.reduction;
    let (theta_i, _) = inner_adapt(
        &mut tape,
        &theta_init,
        |t, th| mpfn::mpfn_loss(t, th, &d_tr, mode, reduction),
        cfg.inner_lr,
        cfg.inner_steps,
        grads_mode,
    )?;

    let test_loss = mpfn::mpfn_loss(&mut tape, &theta_i, &d_te, mode, reduction)?;
    let objective = match rec {
        Some(r) if rec_coef != 0.0 => {
            let rw = tape.scale(r, rec_coef)?;
            tape.add(test_loss, rw)?
        }
        _ => test_loss,
    };
    let grads = tape.backward(objective)?;
    Ok(EpisodeGrads {
        grads: bound.grads(&tape, &grads),
        test_loss: tape.value(test_loss).item(),
        rec_loss: rec.map_or(0.0, |r| tape.value(r).item()),
    })
}

/// One outer step over a batch of episodes: per-episode gradients are
/// reduced in episode order, then all meta parameters take one optimizer
/// step at the meta learning rate. Returns the joint loss
/// (summed test losses plus lambda times the mean reconstruction loss).
pub fn meta_train_step(
    params: &mut ParamSet,
    opt: &mut Optimizer,
    batch: &[Episode],
    cfg: &MetaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (joint, grads) = meta_batch_grads(params, batch, cfg, rng)?;
    opt.step(params, &grads)?;
    Ok(joint)
}

/// Joint loss and summed gradients for one meta batch, without updating.
pub fn meta_batch_grads(
    params: &ParamSet,
    batch: &[Episode],
    cfg: &MetaConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("meta_train_step"));
    }
    let rec_coef = cfg.lambda / batch.len() as f64;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut sum_test = 0.0;
    let mut sum_rec = 0.0;
    for ep in batch {
        let out = episode_grads(params, ep, cfg, rec_coef, rng, None).map_err(|e| {
            Error::Episode { stage: "meta_train_step", segment: ep.segment_id.clone(), source: Box::new(e) }
        })?;
        sum_test += out.test_loss;
        sum_rec += out.rec_loss;
        for (name, g) in out.grads {
            match total.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    let joint = sum_test + cfg.lambda * sum_rec / batch.len() as f64;
    Ok((joint, total))
}

/// Meta-testing: customize the learned initialization for one segment, adapt
/// on its train set, and predict its test windows. Predictions are
/// de-normalized back to demand units.
pub struct AdaptOutcome {
    pub theta: ParamSet,
    /// de-normalized predictions, one per test window (chronological order)
    pub predictions: Vec<f64>,
    /// de-normalized actual targets
    pub actuals: Vec<f64>,
}

pub fn meta_test_adapt(params: &ParamSet, ep: &Episode, cfg: &MetaConfig) -> Result<AdaptOutcome> {
    if ep.d_tr.is_empty() && cfg.inner_steps > 0 {
        return Err(Error::Episode {
            stage: "meta_test_adapt",
            segment: ep.segment_id.clone(),
            source: Box::new(Error::EmptyBatch("adaptation set")),
        });
    }
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let theta0 = bound.sub("theta0/");
    let mode = cfg.ablation.mpfn_mode();

    let use_repr = cfg.modulation.has_params();
    let q_d = if use_repr && cfg.ablation.uses_data() {
        Some(relation::encode_segment(&mut tape, &bound, &encoder_view(&ep.d_tr))?)
    } else {
        None
    };
    let q_g = if use_repr && cfg.ablation.uses_graph() {
        let u = ep
            .graph_vector
            .as_ref()
            .ok_or_else(|| Error::UnknownSegment(ep.segment_id.clone()))?;
        let uv = tape.constant(Tensor::vector(u.clone()));
        Some(relation::graph_repr(&mut tape, &bound.sub("graphhead/"), uv)?)
    } else {
        None
    };
    let q = if use_repr { Some(fuse_repr(&mut tape, q_d, q_g)?) } else { None };
    let theta_init = modulate(&mut tape, &bound, q, &theta0, cfg.modulation)?;

    let reduction = cfg.reduction;
    let d_tr = ep.d_tr.clone();
    let (theta_t, _) = inner_adapt(
        &mut tape,
        &theta_init,
        |t, th| mpfn::mpfn_loss(t, th, &d_tr, mode, reduction),
        cfg.inner_lr,
        cfg.inner_steps,
        InnerGrads::Detached,
    )?;

    let mut predictions = Vec::with_capacity(ep.d_te.len());
    let mut actuals = Vec::with_capacity(ep.d_te.len());
    for w in &ep.d_te {
        let y = mpfn::mpfn_forward(&mut tape, &theta_t, w, mode)?;
        predictions.push(ep.denormalize(tape.value(y).item()));
        actuals.push(ep.denormalize(w.target));
    }
    Ok(AdaptOutcome { theta: theta_t.values(&tape), predictions, actuals })
}

/// The fused representation q for one episode under trained parameters
/// (for the representation dump).
pub fn segment_representation(params: &ParamSet, ep: &Episode, cfg: &MetaConfig) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let q_d = if cfg.modulation.has_params() && cfg.ablation.uses_data() {
        Some(relation::encode_segment(&mut tape, &bound, &encoder_view(&ep.d_tr))?)
    } else {
        None
    };
    let q_g = if cfg.modulation.has_params() && cfg.ablation.uses_graph() {
        let u = ep
            .graph_vector
            .as_ref()
            .ok_or_else(|| Error::UnknownSegment(ep.segment_id.clone()))?;
        let uv = tape.constant(Tensor::vector(u.clone()));
        Some(relation::graph_repr(&mut tape, &bound.sub("graphhead/"), uv)?)
    } else {
        None
    };
    let q = fuse_repr(&mut tape, q_d, q_g)?;
    Ok(tape.value(q).data().to_vec())
}

/// Finite-difference check of the meta gradient at the configured order.
/// Second order: the oracle is a plain forward evaluation. First order: the
/// oracle replays the inner gradients captured at the base point, so the
/// detached path is compared against what it actually computes.
pub fn meta_grad_check(
    params: &ParamSet,
    batch: &[Episode],
    cfg: &MetaConfig,
    step: f64,
) -> Result<f64> {
    let rec_coef = cfg.lambda / batch.len() as f64;

    // capture per-episode inner gradients at the base point (first order)
    let frozen: Option<Vec<Vec<BTreeMap<String, Tensor>>>> = match cfg.order {
        MetaGradOrder::Second => None,
        MetaGradOrder::First => {
            let mut all = Vec::new();
            for ep in batch {
                all.push(capture_inner_grads(params, ep, cfg)?);
            }
            Some(all)
        }
    };

    // analytic gradient (summed over the batch)
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, analytic) = meta_batch_grads(params, batch, cfg, &mut rng)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut total = 0.0;
        for (i, ep) in batch.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let f = frozen.as_ref().map(|v| v[i].as_slice());
            let out = episode_grads(p, ep, cfg, rec_coef, &mut rng, f)?;
            total += out.test_loss + rec_coef * out.rec_loss;
        }
        Ok(total)
    };

    let mut worst = 0.0_f64;
    for (name, base) in params.iter() {
        let a = &analytic[name];
        for i in 0..base.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += step;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= step;
            let n = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let av = a.data()[i];
            let rel = (av - n).abs() / 1.0_f64.max(av.abs()).max(n.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

fn capture_inner_grads(
    params: &ParamSet,
    ep: &Episode,
    cfg: &MetaConfig,
) -> Result<Vec<BTreeMap<String, Tensor>>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let theta0 = bound.sub("theta0/");
    let mode = cfg.ablation.mpfn_mode();
    let use_repr = cfg.modulation.has_params();
    let q_d = if use_repr && cfg.ablation.uses_data() {
        Some(relation::encode_segment(&mut tape, &bound, &encoder_view(&ep.d_tr))?)
    } else {
        None
    };
    let q_g = if use_repr && cfg.ablation.uses_graph() {
        let u = ep.graph_vector.as_ref().ok_or_else(|| Error::UnknownSegment(ep.segment_id.clone()))?;
        let uv = tape.constant(Tensor::vector(u.clone()));
        Some(relation::graph_repr(&mut tape, &bound.sub("graphhead/"), uv)?)
    } else {
        None
    };
    let q = if use_repr { Some(fuse_repr(&mut tape, q_d, q_g)?) } else { None };
    let theta_init = modulate(&mut tape, &bound, q, &theta0, cfg.modulation)?;
    let reduction = cfg.reduction;
    let d_tr = ep.d_tr.clone();
    let (_, captured) = inner_adapt(
        &mut tape,
        &theta_init,
        |t, th| mpfn::mpfn_loss(t, th, &d_tr, mode, reduction),
        cfg.inner_lr,
        cfg.inner_steps,
        InnerGrads::Detached,
    )?;
    Ok(captured)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Op;
    use rand::SeedableRng;

    fn tiny_dims() -> MetaDims {
        MetaDims { input: 3, hidden: 4, data_dim: 4, graph_dim: 2, walk_dim: 3 }
    }

    fn tiny_cfg() -> MetaConfig {
        MetaConfig {
            inner_lr: 0.01,
            meta_lr: 1e-3,
            lambda: 0.5,
            inner_steps: 1,
            meta_batch: 2,
            ..MetaConfig::default()
        }
    }

    fn rand_window(rng: &mut ChaCha8Rng, e: usize, len: usize, t_c: usize) -> SampleWindow {
        let frame = |r: &mut ChaCha8Rng| -> Vec<f64> {
            (0..e).map(|_| r.gen_range(-1.0..1.0)).collect()
        };
        SampleWindow {
            local_seq: (0..len).map(|_| frame(rng)).collect(),
            seasonal_seq: (0..len).map(|_| frame(rng)).collect(),
            seasonal_mask: true,
            target: rng.gen_range(-1.0..1.0),
            t_c,
        }
    }

    fn tiny_episode(rng: &mut ChaCha8Rng, id: &str, n_tr: usize, n_te: usize) -> Episode {
        let e = 3;
        let len = 5;
        let mut t_c = 10;
        // structured inputs (per-episode level plus small noise) with targets
        // that are a fixed function of them, so the tiny model can fit both
        // the forecast and the reconstruction
        let base: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let make = |rng: &mut ChaCha8Rng, t_c| {
            let mut w = rand_window(rng, e, len, t_c);
            for seq in [&mut w.local_seq, &mut w.seasonal_seq] {
                for frame in seq.iter_mut() {
                    for (x, b) in frame.iter_mut().zip(&base) {
                        *x = b + 0.2 * *x;
                    }
                }
            }
            w.target = 0.5 * w.local_seq.last().unwrap().iter().sum::<f64>();
            w
        };
        let mut d_tr = Vec::new();
        for _ in 0..n_tr {
            d_tr.push(make(rng, t_c));
            t_c += 1;
        }
        t_c += 10;
        let mut d_te = Vec::new();
        for _ in 0..n_te {
            d_te.push(make(rng, t_c));
            t_c += 1;
        }
        Episode {
            segment_id: id.to_string(),
            category: "c0".to_string(),
            d_tr,
            d_te,
            graph_vector: Some(vec![0.3, -0.2, 0.5]),
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    #[test]
    fn fuse_concatenates_data_first() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let g = tape.constant(Tensor::vector(vec![3.0]));
        let q = fuse_repr(&mut tape, Some(d), Some(g)).unwrap();
        assert_eq!(tape.value(q).data(), &[1.0, 2.0, 3.0]);
        let q = fuse_repr(&mut tape, Some(d), None).unwrap();
        assert_eq!(tape.value(q).data(), &[1.0, 2.0]);
        assert!(fuse_repr(&mut tape, None, None).is_err());
    }

    #[test]
    fn zero_modulation_halves_theta0() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let mut params = init_meta_params(&dims, &cfg, &mut rng);
        for name in ["mod/w", "mod/b"] {
            params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, false);
        let theta0 = bound.sub("theta0/");
        let q = tape.constant(Tensor::vector(vec![0.7; dims.fused_dim(cfg.ablation)]));
        let out = modulate(&mut tape, &bound, Some(q), &theta0, ModulationMode::Full).unwrap();
        for (name, &v) in out.vars() {
            let orig = params.get(&format!("theta0/{name}")).unwrap();
            for (a, b) in tape.value(v).data().iter().zip(orig.data()) {
                assert!((a - 0.5 * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_bias_recovers_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let mut params = init_meta_params(&dims, &cfg, &mut rng);
        params.get_mut("mod/w").unwrap().data_mut().iter_mut().for_each(|x| *x = 0.0);
        params.get_mut("mod/b").unwrap().data_mut().iter_mut().for_each(|x| *x = 100.0);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, false);
        let theta0 = bound.sub("theta0/");
        let q = tape.constant(Tensor::vector(vec![0.0; dims.fused_dim(cfg.ablation)]));
        let out = modulate(&mut tape, &bound, Some(q), &theta0, ModulationMode::Full).unwrap();
        for (name, &v) in out.vars() {
            let orig = params.get(&format!("theta0/{name}")).unwrap();
            for (a, b) in tape.value(v).data().iter().zip(orig.data()) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn modulation_shrinks_magnitudes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let params = init_meta_params(&dims, &cfg, &mut rng);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, false);
        let theta0 = bound.sub("theta0/");
        let qv: Vec<f64> =
            (0..dims.fused_dim(cfg.ablation)).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let q = tape.constant(Tensor::vector(qv));
        for mode in [ModulationMode::Full, ModulationMode::Block] {
            let out = modulate(&mut tape, &bound, Some(q), &theta0, mode).unwrap();
            for (name, &v) in out.vars() {
                let orig = params.get(&format!("theta0/{name}")).unwrap();
                for (a, b) in tape.value(v).data().iter().zip(orig.data()) {
                    assert!(a.abs() <= b.abs() + 1e-15, "{name}: |{a}| > |{b}|");
                }
            }
        }
    }

    #[test]
    fn forced_gate_one_matches_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dims = tiny_dims();
        let mut cfg_id = tiny_cfg();
        cfg_id.modulation = ModulationMode::Identity;
        cfg_id.lambda = 0.0;
        let mut cfg_forced = cfg_id;
        cfg_forced.modulation = ModulationMode::ForcedGate(1.0);

        let init = init_meta_params(&tiny_dims(), &cfg_id, &mut rng);
        let batch: Vec<Episode> =
            (0..2).map(|i| tiny_episode(&mut rng, &format!("s{i}"), 4, 3)).collect();

        let run = |cfg: &MetaConfig| -> Vec<f64> {
            let mut params = init.clone();
            let mut opt = Optimizer::new(cfg.outer_opt, cfg.meta_lr);
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            (0..5)
                .map(|_| meta_train_step(&mut params, &mut opt, &batch, cfg, &mut rng).unwrap())
                .collect()
        };
        let a = run(&cfg_id);
        let b = run(&cfg_forced);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        let _ = dims;
    }

    #[test]
    fn scalar_surrogate_inner_steps() {
        // L(theta) = (theta - 2)^2, theta = 0, alpha = 0.25
        for (k, expect) in [(1, 1.0), (2, 1.5)] {
            let mut tape = Tape::new();
            let th = tape.leaf(Tensor::scalar(0.0));
            let mut vars = BTreeMap::new();
            vars.insert("th".to_string(), th);
            let theta = BoundParams::from_vars(vars);
            let loss_fn = |t: &mut Tape, p: &BoundParams| {
                let c = t.constant(Tensor::scalar(2.0));
                let d = t.sub(p.get("th"), c)?;
                t.mul(d, d)
            };
            let (adapted, _) =
                inner_adapt(&mut tape, &theta, loss_fn, 0.25, k, InnerGrads::Detached).unwrap();
            let got = tape.value(adapted.get("th")).item();
            assert!((got - expect).abs() < 1e-12, "k={k}: {got}");
        }
    }

    #[test]
    fn unreachable_theta_is_left_unchanged() {
        let mut tape = Tape::new();
        let th = tape.leaf(Tensor::vector(vec![1.0, -2.0]));
        let mut vars = BTreeMap::new();
        vars.insert("th".to_string(), th);
        let theta = BoundParams::from_vars(vars);
        let loss_fn = |t: &mut Tape, _: &BoundParams| {
            let c = t.constant(Tensor::scalar(3.0));
            t.mul(c, c)
        };
        let (adapted, _) =
            inner_adapt(&mut tape, &theta, loss_fn, 0.5, 3, InnerGrads::OnTape).unwrap();
        assert_eq!(tape.value(adapted.get("th")).data(), &[1.0, -2.0]);
    }

    #[test]
    fn joint_loss_is_additive_over_episodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = tiny_dims();
        let mut cfg = tiny_cfg();
        cfg.lambda = 0.0;
        let params = init_meta_params(&dims, &cfg, &mut rng);
        let batch: Vec<Episode> =
            (0..3).map(|i| tiny_episode(&mut rng, &format!("s{i}"), 3, 2)).collect();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (joint, _) = meta_batch_grads(&params, &batch, &cfg, &mut r).unwrap();
        let mut sum = 0.0;
        for ep in &batch {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let (j, _) =
                meta_batch_grads(&params, std::slice::from_ref(ep), &cfg, &mut r).unwrap();
            sum += j;
        }
        assert!((joint - sum).abs() < 1e-10, "{joint} vs {sum}");
    }

    #[test]
    fn joint_loss_decreases_under_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let mut params = init_meta_params(&dims, &cfg, &mut rng);
        let batch: Vec<Episode> =
            (0..4).map(|i| tiny_episode(&mut rng, &format!("s{i}"), 4, 3)).collect();
        let mut opt = Optimizer::new(cfg.outer_opt, 5e-2);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let mut losses = Vec::new();
        for _ in 0..50 {
            losses.push(meta_train_step(&mut params, &mut opt, &batch, &cfg, &mut r).unwrap());
        }
        assert!(
            losses[49] < 0.5 * losses[0],
            "joint loss did not halve: {} -> {}",
            losses[0],
            losses[49]
        );
    }

    #[test]
    fn meta_gradient_matches_finite_differences_first_order() {
        let (params, batch, mut cfg) = grad_check_setup();
        cfg.order = MetaGradOrder::First;
        let worst = meta_grad_check(&params, &batch, &cfg, 1e-5).unwrap();
        assert!(worst < 1e-4, "max rel error {worst}");
    }

    #[test]
    fn meta_gradient_matches_finite_differences_second_order() {
        let (params, batch, mut cfg) = grad_check_setup();
        cfg.order = MetaGradOrder::Second;
        let worst = meta_grad_check(&params, &batch, &cfg, 1e-5).unwrap();
        assert!(worst < 1e-4, "max rel error {worst}");
    }

    fn grad_check_setup() -> (ParamSet, Vec<Episode>, MetaConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = tiny_dims();
        let mut cfg = tiny_cfg();
        cfg.inner_lr = 0.05;
        let params = init_meta_params(&dims, &cfg, &mut rng);
        let batch = vec![tiny_episode(&mut rng, "s0", 2, 2)];
        (params, batch, cfg)
    }

    #[test]
    fn second_order_differs_from_first_order() {
        let (params, batch, mut cfg) = grad_check_setup();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        cfg.order = MetaGradOrder::First;
        let (_, g1) = meta_batch_grads(&params, &batch, &cfg, &mut r).unwrap();
        cfg.order = MetaGradOrder::Second;
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (_, g2) = meta_batch_grads(&params, &batch, &cfg, &mut r).unwrap();
        let diff: f64 = g1
            .iter()
            .map(|(k, a)| {
                a.data().iter().zip(g2[k].data()).map(|(x, y)| (x - y).abs()).sum::<f64>()
            })
            .sum();
        assert!(diff > 1e-10, "orders should disagree somewhere, diff={diff}");
    }

    #[test]
    fn chronology_violation_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ep = tiny_episode(&mut rng, "s0", 3, 2);
        let hc = HorizonConfig { gap: 2, horizon: 3, season: 7, window_len: 5 };
        ep.validate_chronology(&hc).unwrap();
        ep.d_te[0].t_c = ep.d_tr.last().unwrap().t_c + 1;
        assert!(ep.validate_chronology(&hc).is_err());
    }

    #[test]
    fn missing_graph_vector_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let params = init_meta_params(&dims, &cfg, &mut rng);
        let mut ep = tiny_episode(&mut rng, "s0", 2, 2);
        ep.graph_vector = None;
        assert!(meta_test_adapt(&params, &ep, &cfg).is_err());
    }

    #[test]
    fn adapt_outputs_are_denormalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let params = init_meta_params(&dims, &cfg, &mut rng);
        let mut ep = tiny_episode(&mut rng, "s0", 3, 2);
        ep.target_mean = 10.0;
        ep.target_std = 2.0;
        let out = meta_test_adapt(&params, &ep, &cfg).unwrap();
        assert_eq!(out.predictions.len(), 2);
        for (a, w) in out.actuals.iter().zip(&ep.d_te) {
            assert!((a - (w.target * 2.0 + 10.0)).abs() < 1e-12);
        }
        // theta carries the adapted mpfn parameters only
        assert!(out.theta.get("local/wz").is_some());
        assert!(out.theta.get("head_w").is_some());
    }

    #[test]
    fn representation_has_fused_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let dims = tiny_dims();
        let cfg = tiny_cfg();
        let params = init_meta_params(&dims, &cfg, &mut rng);
        let ep = tiny_episode(&mut rng, "s0", 3, 2);
        let q = segment_representation(&params, &ep, &cfg).unwrap();
        assert_eq!(q.len(), dims.data_dim + dims.graph_dim);
        let _ = Op::Broadcast(vec![1]);
    }
}
