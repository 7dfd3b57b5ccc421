//! Experiment driver: ingestion, baselines, MAPE evaluation, significance
//! testing, ablation orchestration, sequence-length sweeps, and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::meta::{
    self, Ablation, Episode, MetaConfig, MetaDims, MetaGradOrder, ModulationMode,
};
use crate::mpfn::{self, HorizonConfig, MpfnDims, MpfnMode, SampleWindow};
use crate::relation::{self, DeepwalkConfig, NodeEmbedding};
use crate::synth::{self, EpisodeOptions, GeneratorConfig, SyntheticWorld};
use crate::tensor::{save_checkpoint, BoundParams, Dtype, OptKind, Optimizer, ParamSet, Tape};

const MAPE_EPS: f64 = 1e-8;

/// Mean absolute percentage error, as a percentage.
pub fn mape(preds: &[f64], actuals: &[f64]) -> Result<f64> {
    if preds.len() != actuals.len() {
        return Err(Error::Config(format!(
            "mape length mismatch: {} predictions vs {} actuals",
            preds.len(),
            actuals.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::EmptyBatch("mape"));
    }
    let total: f64 = preds
        .iter()
        .zip(actuals)
        .map(|(p, y)| (y - p).abs() / y.abs().max(MAPE_EPS))
        .sum();
    Ok(100.0 * total / preds.len() as f64)
}

/// Historical-average baseline: the mean of two target-window sums — the
/// same period one season back, and the most recent window of the same
/// length ending at t_c. Falls back to whichever estimate the history
/// supports.
pub fn stat_baseline(series: &[f64], t_c: usize, cfg: &HorizonConfig) -> Result<f64> {
    let span = cfg.horizon + 1;
    let mut estimates = Vec::new();
    let lo = t_c as i64 + cfg.gap as i64 - cfg.season as i64;
    if lo >= 0 && (lo as usize + span) <= series.len() {
        let lo = lo as usize;
        estimates.push(series[lo..lo + span].iter().sum::<f64>());
    }
    if t_c + 1 >= span && t_c < series.len() {
        estimates.push(series[t_c + 1 - span..=t_c].iter().sum::<f64>());
    }
    if estimates.is_empty() {
        return Err(Error::SeriesTooShort { need_lo: span, need_hi: span, len: series.len() });
    }
    Ok(estimates.iter().sum::<f64>() / estimates.len() as f64)
}

/// Paired two-sided Student's t-test on per-segment error differences.
pub fn significance_test(errors_a: &[f64], errors_b: &[f64]) -> Result<f64> {
    if errors_a.len() != errors_b.len() {
        return Err(Error::Config("significance_test requires paired samples".into()));
    }
    let n = errors_a.len();
    if n < 2 {
        return Err(Error::Config("significance_test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = errors_a.iter().zip(errors_b).map(|(a, b)| a - b).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Stage { stage: "significance_test", detail: e.to_string() })?;
    Ok(2.0 * (1.0 - dist.cdf(t.abs())))
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Baseline {
    Stat,
    Finetune,
    Maml,
}

impl Baseline {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stat" => Ok(Baseline::Stat),
            "finetune" => Ok(Baseline::Finetune),
            "maml" => Ok(Baseline::Maml),
            other => Err(Error::Config(format!("unknown baseline {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Stat => "stat",
            Baseline::Finetune => "finetune",
            Baseline::Maml => "maml",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub horizon: HorizonConfig,
    pub meta: MetaConfig,
    pub hidden: usize,
    pub d_q: usize,
    pub d_g: usize,
    pub d_walk: usize,
    pub meta_steps: usize,
    pub finetune_pretrain_steps: usize,
    pub finetune_tune_steps: usize,
    pub finetune_lr: f64,
    pub split: f64,
    pub episode_opts: EpisodeOptions,
    pub graph_percentile: f64,
    pub baselines: Vec<Baseline>,
    pub ablations: Vec<Ablation>,
    pub sweep_lens: Vec<usize>,
    pub demand_path: Option<PathBuf>,
    pub orders_path: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generator: GeneratorConfig::default(),
            horizon: HorizonConfig::new(7, 13, 91, 30).expect("static config"),
            meta: MetaConfig::default(),
            hidden: 128,
            d_q: 32,
            d_g: 16,
            d_walk: 32,
            meta_steps: 200,
            finetune_pretrain_steps: 200,
            finetune_tune_steps: 50,
            finetune_lr: 1e-2,
            split: 0.7,
            episode_opts: EpisodeOptions::default(),
            graph_percentile: 0.25,
            baselines: vec![Baseline::Stat, Baseline::Finetune, Baseline::Maml],
            ablations: vec![Ablation::Full],
            sweep_lens: Vec::new(),
            demand_path: None,
            orders_path: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    /// Small dimensions for smoke runs and fast experiments; keeps the
    /// default world structure.
    pub fn tiny(seed: u64) -> Self {
        let mut cfg = ExperimentConfig::default();
        cfg.generator.seed = seed;
        cfg.generator.feature_dim = 6;
        cfg.hidden = 10;
        cfg.d_q = 8;
        cfg.d_g = 4;
        cfg.d_walk = 16;
        cfg.meta.meta_lr = 1e-2;
        cfg.meta.inner_lr = 5e-2;
        cfg.meta.train_samples = 5;
        cfg.meta.test_samples = 5;
        cfg.meta_steps = 40;
        cfg.finetune_pretrain_steps = 80;
        cfg
    }

    pub fn dims(&self) -> MetaDims {
        MetaDims {
            input: self.generator.feature_dim,
            hidden: self.hidden,
            data_dim: self.d_q,
            graph_dim: self.d_g,
            walk_dim: self.d_walk,
        }
    }

    /// Apply one flat `key=value` assignment with dotted keys; unknown keys
    /// are errors.
    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value for {what}: invalid literal"));
        macro_rules! parse {
            ($t:ty) => {
                value.parse::<$t>().map_err(|_| bad(key))?
            };
        }
        match key {
            "gen.seed" => self.generator.seed = parse!(u64),
            "gen.categories" => self.generator.num_categories = parse!(usize),
            "gen.segments_per_category" => self.generator.segments_per_category = parse!(usize),
            "gen.days" => self.generator.days = parse!(usize),
            "gen.season" => self.generator.season = parse!(usize),
            "gen.base_demand" => self.generator.base_demand = parse!(f64),
            "gen.amplitude" => self.generator.category_amplitude = parse!(f64),
            "gen.noise" => self.generator.segment_noise = parse!(f64),
            "gen.trend" => self.generator.trend_scale = parse!(f64),
            "gen.features" => self.generator.feature_dim = parse!(usize),
            "gen.longtail" => self.generator.longtail_fraction = parse!(f64),
            "gen.orders_per_day" => self.generator.orders_per_day = parse!(usize),
            "gen.affinity" => self.generator.copurchase_affinity = parse!(f64),
            "horizon.gap" => self.horizon.gap = parse!(usize),
            "horizon.horizon" => self.horizon.horizon = parse!(usize),
            "horizon.season" => self.horizon.season = parse!(usize),
            "horizon.window" => self.horizon.window_len = parse!(usize),
            "meta.alpha" => self.meta.inner_lr = parse!(f64),
            "meta.beta" => self.meta.meta_lr = parse!(f64),
            "meta.lambda" => self.meta.lambda = parse!(f64),
            "meta.k" => self.meta.inner_steps = parse!(usize),
            "meta.batch" => self.meta.meta_batch = parse!(usize),
            "meta.train_samples" => self.meta.train_samples = parse!(usize),
            "meta.seasonal_dropout" => self.meta.seasonal_dropout = parse!(f64),
            "meta.rec_samples" => self.meta.rec_samples = parse!(usize),
            "meta.test_samples" => self.meta.test_samples = parse!(usize),
            "meta.order" => {
                self.meta.order = match value {
                    "first" => MetaGradOrder::First,
                    "second" => MetaGradOrder::Second,
                    _ => return Err(bad(key)),
                }
            }
            "meta.ablation" => self.meta.ablation = Ablation::parse(value)?,
            "meta.modulation" => {
                self.meta.modulation = match value {
                    "full" => ModulationMode::Full,
                    "block" => ModulationMode::Block,
                    _ => return Err(bad(key)),
                }
            }
            "dims.hidden" => self.hidden = parse!(usize),
            "dims.d_q" => self.d_q = parse!(usize),
            "dims.d_g" => self.d_g = parse!(usize),
            "dims.d_walk" => self.d_walk = parse!(usize),
            "run.steps" => self.meta_steps = parse!(usize),
            "run.split" => self.split = parse!(f64),
            "run.train_cap" => self.episode_opts.train_cap = parse!(usize),
            "run.test_cap" => self.episode_opts.test_cap = parse!(usize),
            "run.percentile" => self.graph_percentile = parse!(f64),
            "run.out" => self.out_dir = PathBuf::from(value),
            "run.demand_file" => self.demand_path = Some(PathBuf::from(value)),
            "run.orders_file" => self.orders_path = Some(PathBuf::from(value)),
            "run.baselines" => {
                self.baselines = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(Baseline::parse)
                    .collect::<Result<_>>()?
            }
            "run.ablations" => {
                self.ablations = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(Ablation::parse)
                    .collect::<Result<_>>()?
            }
            "sweep.lens" => {
                self.sweep_lens = value
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse::<usize>().map_err(|_| bad(key)))
                    .collect::<Result<_>>()?
            }
            "finetune.pretrain_steps" => self.finetune_pretrain_steps = parse!(usize),
            "finetune.tune_steps" => self.finetune_tune_steps = parse!(usize),
            "finetune.lr" => self.finetune_lr = parse!(f64),
            other => return Err(Error::Config(format!("unknown config key {other}"))),
        }
        Ok(())
    }

    pub fn parse_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", lineno + 1))
            })?;
            self.apply_key(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Deterministic echo of every setting, for the report.
    pub fn echo(&self) -> String {
        let g = &self.generator;
        let h = &self.horizon;
        let m = &self.meta;
        format!(
            "gen.seed={} gen.categories={} gen.segments_per_category={} gen.days={} \
             gen.season={} gen.base_demand={} gen.amplitude={} gen.noise={} gen.trend={} \
             gen.features={} gen.longtail={} gen.orders_per_day={} gen.affinity={}\n\
             horizon.gap={} horizon.horizon={} horizon.season={} horizon.window={}\n\
             meta.alpha={} meta.beta={} meta.lambda={} meta.k={} meta.batch={} \
             meta.train_samples={} meta.test_samples={} meta.seasonal_dropout={} \
             meta.rec_samples={} meta.order={:?}\n\
             dims.hidden={} dims.d_q={} dims.d_g={} dims.d_walk={}\n\
             run.steps={} run.split={} run.train_cap={} run.test_cap={} run.percentile={}\n\
             finetune.pretrain_steps={} finetune.tune_steps={} finetune.lr={}",
            g.seed, g.num_categories, g.segments_per_category, g.days, g.season, g.base_demand,
            g.category_amplitude, g.segment_noise, g.trend_scale, g.feature_dim,
            g.longtail_fraction, g.orders_per_day, g.copurchase_affinity,
            h.gap, h.horizon, h.season, h.window_len,
            m.inner_lr, m.meta_lr, m.lambda, m.inner_steps, m.meta_batch, m.train_samples,
            m.test_samples, m.seasonal_dropout, m.rec_samples, m.order,
            self.hidden, self.d_q, self.d_g, self.d_walk,
            self.meta_steps, self.split, self.episode_opts.train_cap, self.episode_opts.test_cap,
            self.graph_percentile,
            self.finetune_pretrain_steps, self.finetune_tune_steps, self.finetune_lr,
        )
    }
}

#[derive(Clone, Debug)]
pub struct MethodResult {
    pub method: String,
    /// (segment, category, mape)
    pub per_segment: Vec<(String, String, f64)>,
    pub per_category: BTreeMap<String, f64>,
    pub overall: f64,
}

impl MethodResult {
    pub fn from_rows(method: impl Into<String>, rows: Vec<(String, String, f64)>) -> Self {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for (_, cat, m) in &rows {
            let e = sums.entry(cat.clone()).or_default();
            e.0 += m;
            e.1 += 1;
        }
        let per_category =
            sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
        let overall = if rows.is_empty() {
            f64::NAN
        } else {
            rows.iter().map(|r| r.2).sum::<f64>() / rows.len() as f64
        };
        MethodResult { method: method.into(), per_segment: rows, per_category, overall }
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub seed: u64,
    pub config_echo: String,
    pub methods: Vec<MethodResult>,
    /// (method_a, method_b, p-value)
    pub p_values: Vec<(String, String, f64)>,
    /// (window_len, category, mape) — plot-ready sweep data
    pub sweep: Vec<(usize, String, f64)>,
    pub warnings: Vec<String>,
    pub runtime_secs: f64,
}

/// Everything derived from one world: episodes with graph vectors attached.
pub struct Prepared {
    pub world: SyntheticWorld,
    pub sources: Vec<Episode>,
    pub targets: Vec<Episode>,
    pub warnings: Vec<String>,
    pub embedding: NodeEmbedding,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let world = match (&cfg.demand_path, &cfg.orders_path) {
        (Some(dp), op) => {
            let mut r = std::io::BufReader::new(fs::File::open(dp)?);
            let mut world = synth::read_world(&mut r)?;
            world.season = cfg.horizon.season;
            if let Some(op) = op {
                let mut r = std::io::BufReader::new(fs::File::open(op)?);
                world.orders = relation::read_orders(&mut r)?;
            }
            world
        }
        _ => synth::generate_world(&cfg.generator)?,
    };
    let embedding = embed_world(cfg, &world)?;
    let (sources, targets, warnings) = episodes_for(cfg, &world, &embedding, cfg.horizon.window_len)?;
    Ok(Prepared { world, sources, targets, warnings, embedding })
}

pub fn embed_world(cfg: &ExperimentConfig, world: &SyntheticWorld) -> Result<NodeEmbedding> {
    let universe: std::collections::BTreeSet<String> =
        world.segments.iter().map(|s| s.id.clone()).collect();
    let graph = relation::build_cooccurrence(&world.orders, Some(&universe))?;
    let graph = relation::threshold_filter(&graph, cfg.graph_percentile);
    let dw = DeepwalkConfig { dim: cfg.d_walk, seed: cfg.generator.seed, ..DeepwalkConfig::default() };
    Ok(relation::deepwalk_embed(&graph, &dw))
}

fn episodes_for(
    cfg: &ExperimentConfig,
    world: &SyntheticWorld,
    embedding: &NodeEmbedding,
    window_len: usize,
) -> Result<(Vec<Episode>, Vec<Episode>, Vec<String>)> {
    let hc = HorizonConfig::new(cfg.horizon.gap, cfg.horizon.horizon, cfg.horizon.season, window_len)?;
    let split = synth::make_episodes(world, &hc, cfg.split, &cfg.episode_opts)?;
    let attach = |mut eps: Vec<Episode>| -> Vec<Episode> {
        for ep in &mut eps {
            let v = embedding
                .get(&ep.segment_id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| embedding.mean_vector());
            ep.graph_vector = Some(v);
        }
        eps
    };
    Ok((attach(split.sources), attach(split.targets), split.warnings))
}

/// Meta-train on the source episodes. Each step samples a meta batch
/// without replacement (cycling through a shuffled order).
pub fn train_meta(
    sources: &[Episode],
    meta_cfg: &MetaConfig,
    dims: &MetaDims,
    steps: usize,
    seed: u64,
) -> Result<(ParamSet, Vec<f64>)> {
    if sources.is_empty() {
        return Err(Error::EmptyBatch("train_meta"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x696e_6974);
    let mut params = meta::init_meta_params(dims, meta_cfg, &mut init_rng);
    let mut opt = Optimizer::new(meta_cfg.outer_opt, meta_cfg.meta_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e);
    let batch_size = meta_cfg.meta_batch.min(sources.len()).max(1);
    let mut order: Vec<usize> = (0..sources.len()).collect();
    let mut cursor = sources.len();
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(sources[order[cursor]].clone());
            cursor += 1;
        }
        let loss = meta::meta_train_step(&mut params, &mut opt, &batch, meta_cfg, &mut rng)?;
        losses.push(loss);
    }
    Ok((params, losses))
}

/// Adapt to every target episode and score MAPE per segment.
pub fn evaluate_targets(
    params: &ParamSet,
    targets: &[Episode],
    meta_cfg: &MetaConfig,
    method: &str,
) -> Result<MethodResult> {
    let mut rows = Vec::with_capacity(targets.len());
    for ep in targets {
        let out = meta::meta_test_adapt(params, ep, meta_cfg)?;
        rows.push((ep.segment_id.clone(), ep.category.clone(), mape(&out.predictions, &out.actuals)?));
    }
    Ok(MethodResult::from_rows(method, rows))
}

/// The historical-average baseline over raw demand series.
pub fn run_stat_baseline(
    world: &SyntheticWorld,
    targets: &[Episode],
    cfg: &HorizonConfig,
) -> Result<MethodResult> {
    let mut rows = Vec::with_capacity(targets.len());
    for ep in targets {
        let seg = world
            .segments
            .iter()
            .find(|s| s.id == ep.segment_id)
            .ok_or_else(|| Error::UnknownSegment(ep.segment_id.clone()))?;
        let mut preds = Vec::new();
        let mut actuals = Vec::new();
        for w in &ep.d_te {
            preds.push(stat_baseline(&seg.demand, w.t_c, cfg)?);
            actuals.push(ep.denormalize(w.target));
        }
        rows.push((ep.segment_id.clone(), ep.category.clone(), mape(&preds, &actuals)?));
    }
    Ok(MethodResult::from_rows("stat", rows))
}

/// Pre-train one forecaster on pooled source windows.
pub fn pretrain_pooled(
    sources: &[Episode],
    dims: &MetaDims,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<ParamSet> {
    let pool: Vec<&SampleWindow> = sources.iter().flat_map(|e| e.d_tr.iter()).collect();
    if pool.is_empty() {
        return Err(Error::EmptyBatch("pretrain_pooled"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x706f_6f6c);
    let mut params = mpfn::init_mpfn(MpfnDims { input: dims.input, hidden: dims.hidden }, &mut rng);
    let mut opt = Optimizer::new(OptKind::Adam, lr);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = pool.len();
    for _ in 0..steps {
        let mut batch = Vec::with_capacity(32);
        for _ in 0..32.min(pool.len()) {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(pool[order[cursor]].clone());
            cursor += 1;
        }
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params, true);
        let loss = mpfn::mpfn_loss(&mut tape, &bound, &batch, MpfnMode::Full, crate::mpfn::LossReduction::Mean)?;
        let grads = tape.backward(loss)?;
        let g = bound.grads(&tape, &grads);
        opt.step(&mut params, &g)?;
    }
    Ok(params)
}

/// Predictions of a plain forecaster on the test windows of one episode.
pub fn predict_windows(params: &ParamSet, ep: &Episode) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let mut preds = Vec::new();
    let mut actuals = Vec::new();
    for w in &ep.d_te {
        let y = mpfn::mpfn_forward(&mut tape, &bound, w, MpfnMode::Full)?;
        preds.push(ep.denormalize(tape.value(y).item()));
        actuals.push(ep.denormalize(w.target));
    }
    Ok((preds, actuals))
}

/// Finetune baseline: gradient-tune the pooled model per target segment.
pub fn run_finetune(
    pooled: &ParamSet,
    targets: &[Episode],
    tune_steps: usize,
    lr: f64,
) -> Result<MethodResult> {
    let mut rows = Vec::with_capacity(targets.len());
    for ep in targets {
        let mut params = pooled.clone();
        let mut opt = Optimizer::new(OptKind::Sgd, lr);
        for _ in 0..tune_steps {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &params, true);
            let loss = mpfn::mpfn_loss(
                &mut tape,
                &bound,
                &ep.d_tr,
                MpfnMode::Full,
                crate::mpfn::LossReduction::Mean,
            )?;
            let grads = tape.backward(loss)?;
            let g = bound.grads(&tape, &grads);
            opt.step(&mut params, &g)?;
        }
        let (preds, actuals) = predict_windows(&params, ep)?;
        rows.push((ep.segment_id.clone(), ep.category.clone(), mape(&preds, &actuals)?));
    }
    Ok(MethodResult::from_rows("finetune", rows))
}

/// MetaConfig for the plain meta-learning baseline: modulation disabled,
/// no reconstruction term.
pub fn maml_config(meta_cfg: &MetaConfig) -> MetaConfig {
    let mut cfg = *meta_cfg;
    cfg.modulation = ModulationMode::Identity;
    cfg.lambda = 0.0;
    cfg
}

fn meta_cfg_for(base: &MetaConfig, ablation: Ablation) -> MetaConfig {
    let mut cfg = *base;
    cfg.ablation = ablation;
    cfg
}

fn stage<T>(name: &'static str, cfg_echo: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        detail: format!("{e}\nconfig: {}", cfg_echo.replace('\n', " ")),
    })
}

/// Full pipeline for one seed: prepare data, train and evaluate the main
/// model, baselines, ablations, and the optional sequence-length sweep,
/// then write the report artifacts under `cfg.out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    let echo = cfg.echo();
    let seed = cfg.generator.seed;
    let dims = cfg.dims();

    let prep = stage("prepare", &echo, prepare(cfg))?;
    let mut methods = Vec::new();
    let mut checkpoints: Vec<(String, ParamSet)> = Vec::new();

    // main model and its ablations
    for &ab in &cfg.ablations {
        let mcfg = meta_cfg_for(&cfg.meta, ab);
        let name =
            if ab == Ablation::Full { "rmldp".to_string() } else { format!("rmldp-{}", ab.name()) };
        let (params, _) =
            stage("train", &echo, train_meta(&prep.sources, &mcfg, &dims, cfg.meta_steps, seed))?;
        methods.push(stage("adapt", &echo, evaluate_targets(&params, &prep.targets, &mcfg, &name))?);
        checkpoints.push((name, params));
    }

    for &b in &cfg.baselines {
        match b {
            Baseline::Stat => {
                methods.push(stage(
                    "eval",
                    &echo,
                    run_stat_baseline(&prep.world, &prep.targets, &cfg.horizon),
                )?);
            }
            Baseline::Finetune => {
                let pooled = stage(
                    "train",
                    &echo,
                    pretrain_pooled(&prep.sources, &dims, cfg.finetune_pretrain_steps, cfg.finetune_lr, seed),
                )?;
                methods.push(stage(
                    "eval",
                    &echo,
                    run_finetune(&pooled, &prep.targets, cfg.finetune_tune_steps, cfg.finetune_lr),
                )?);
            }
            Baseline::Maml => {
                let mcfg = maml_config(&cfg.meta);
                let (params, _) = stage(
                    "train",
                    &echo,
                    train_meta(&prep.sources, &mcfg, &dims, cfg.meta_steps, seed),
                )?;
                methods.push(stage(
                    "adapt",
                    &echo,
                    evaluate_targets(&params, &prep.targets, &mcfg, "maml"),
                )?);
                checkpoints.push(("maml".to_string(), params));
            }
        }
    }

    // pairwise significance on per-segment MAPEs over identical targets
    let mut p_values = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            let a = &methods[i];
            let b = &methods[j];
            if a.per_segment.len() == b.per_segment.len() && a.per_segment.len() >= 2 {
                let ea: Vec<f64> = a.per_segment.iter().map(|r| r.2).collect();
                let eb: Vec<f64> = b.per_segment.iter().map(|r| r.2).collect();
                p_values.push((a.method.clone(), b.method.clone(), significance_test(&ea, &eb)?));
            }
        }
    }

    // sequence-length sweep of the full model
    let mut sweep = Vec::new();
    for &len in &cfg.sweep_lens {
        let (src, tgt, _) =
            stage("sweep", &echo, episodes_for(cfg, &prep.world, &prep.embedding, len))?;
        let (params, _) =
            stage("sweep", &echo, train_meta(&src, &cfg.meta, &dims, cfg.meta_steps, seed))?;
        let res = stage("sweep", &echo, evaluate_targets(&params, &tgt, &cfg.meta, "rmldp"))?;
        for (cat, m) in &res.per_category {
            sweep.push((len, cat.clone(), *m));
        }
        sweep.push((len, "all".to_string(), res.overall));
    }

    let report = RunReport {
        seed,
        config_echo: echo.clone(),
        methods,
        p_values,
        sweep,
        warnings: prep.warnings.clone(),
        runtime_secs: started.elapsed().as_secs_f64(),
    };
    stage("report", &echo, write_artifacts(cfg, &report, &prep, &checkpoints))?;
    Ok(report)
}

fn write_artifacts(
    cfg: &ExperimentConfig,
    report: &RunReport,
    prep: &Prepared,
    checkpoints: &[(String, ParamSet)],
) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let path = |name: &str| cfg.out_dir.join(name);

    let mut methods_csv = String::from("method,category,segment,mape\n");
    for m in &report.methods {
        for (seg, cat, v) in &m.per_segment {
            let _ = writeln!(methods_csv, "{},{},{},{:.6}", m.method, cat, seg, v);
        }
    }
    fs::write(path("methods.csv"), methods_csv)?;

    let mut sweep_csv = String::from("window_len,category,mape\n");
    for (len, cat, v) in &report.sweep {
        let _ = writeln!(sweep_csv, "{},{},{:.6}", len, cat, v);
    }
    fs::write(path("sweep.csv"), sweep_csv)?;

    // representation dump for the full model, if trained
    if let Some((_, params)) = checkpoints.iter().find(|(n, _)| n == "rmldp") {
        let mut repr_csv = String::from("segment,category,components\n");
        for ep in &prep.targets {
            let q = meta::segment_representation(params, ep, &cfg.meta)?;
            let comps: Vec<String> = q.iter().map(|x| format!("{x:.6}")).collect();
            let _ = writeln!(repr_csv, "{},{},{}", ep.segment_id, ep.category, comps.join(";"));
        }
        fs::write(path("repr.csv"), repr_csv)?;
    }

    for (name, params) in checkpoints {
        let mut f = std::io::BufWriter::new(fs::File::create(path(&format!("{name}.ckpt")))?);
        save_checkpoint(&mut f, params, Dtype::F64)?;
    }

    let mut md = String::new();
    let _ = writeln!(md, "# Run report (seed {})\n", report.seed);
    let _ = writeln!(md, "## Methods\n");
    let _ = writeln!(md, "| method | category | mape |");
    let _ = writeln!(md, "|---|---|---|");
    for m in &report.methods {
        for (cat, v) in &m.per_category {
            let _ = writeln!(md, "| {} | {} | {:.4} |", m.method, cat, v);
        }
        let _ = writeln!(md, "| {} | all | {:.4} |", m.method, m.overall);
    }
    let _ = writeln!(md, "\n## Significance\n");
    for (a, b, p) in &report.p_values {
        let _ = writeln!(md, "- {a} vs {b}: p = {p:.6}");
    }
    if !report.sweep.is_empty() {
        let _ = writeln!(md, "\n## Sequence-length sweep\n");
        for (len, cat, v) in &report.sweep {
            let _ = writeln!(md, "- |T_c|={len} {cat}: {v:.4}");
        }
    }
    if !report.warnings.is_empty() {
        let _ = writeln!(md, "\n## Warnings\n");
        for w in &report.warnings {
            let _ = writeln!(md, "- {w}");
        }
    }
    let _ = writeln!(md, "\n## Config\n\n```\n{}\n```", report.config_echo);
    fs::write(path("report.md"), md)?;

    // runtime lives outside the deterministic report artifacts
    fs::write(path("timings.txt"), format!("runtime_secs={:.3}\n", report.runtime_secs))?;
    Ok(())
}
