//! Synthetic marketplace generator.
//!
//! Plants the structure each model component can exploit: a category-shared
//! seasonal phase, a per-segment trend, external features that are noisy
//! monotone functions of demand, co-purchase orders with within-category
//! affinity, and a long-tail regime where a fraction of segments only keep
//! a short suffix of history.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::meta::Episode;
use crate::mpfn::{target_demand, HorizonConfig, SampleWindow};

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub num_categories: usize,
    pub segments_per_category: usize,
    pub days: usize,
    pub season: usize,
    pub base_demand: f64,
    pub category_amplitude: f64,
    pub segment_noise: f64,
    pub trend_scale: f64,
    pub feature_dim: usize,
    pub longtail_fraction: f64,
    pub orders_per_day: usize,
    pub copurchase_affinity: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            seed: 0,
            num_categories: 3,
            segments_per_category: 20,
            days: 182,
            season: 91,
            base_demand: 100.0,
            category_amplitude: 0.7,
            segment_noise: 0.03,
            trend_scale: 0.4,
            feature_dim: 48,
            longtail_fraction: 0.3,
            orders_per_day: 40,
            copurchase_affinity: 0.85,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0 || self.segments_per_category == 0 {
            return Err(Error::Config("need at least one category and segment".into()));
        }
        if self.days == 0 || self.season < 2 {
            return Err(Error::Config("days must be positive and season >= 2".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.longtail_fraction) {
            return Err(Error::Config("longtail_fraction must lie in [0,1]".into()));
        }
        if !(0.0..=1.0).contains(&self.copurchase_affinity) {
            return Err(Error::Config("copurchase_affinity must lie in [0,1]".into()));
        }
        Ok(())
    }

    /// Length of the history suffix kept for long-tail segments.
    pub fn short_history_len(&self) -> usize {
        (self.days - self.season / 2).max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub id: String,
    pub category: String,
    /// global day index of the first record (0 for full-history segments)
    pub start_day: usize,
    pub demand: Vec<f64>,
    /// external features per day (feature_dim - 1 channels; demand is
    /// carried separately and prepended when windows are built)
    pub features: Vec<Vec<f64>>,
}

impl Segment {
    pub fn record_count(&self) -> usize {
        self.demand.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub segments: Vec<Segment>,
    pub orders: Vec<Vec<String>>,
    pub categories: Vec<String>,
    pub days: usize,
    pub season: usize,
}

impl SyntheticWorld {
    pub fn category_of(&self, segment_id: &str) -> Option<&str> {
        self.segments.iter().find(|s| s.id == segment_id).map(|s| s.category.as_str())
    }
}

pub fn generate_world(cfg: &GeneratorConfig) -> Result<SyntheticWorld> {
    cfg.validate()?;
    let mut world_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let categories: Vec<String> = (0..cfg.num_categories).map(|c| format!("cat{c}")).collect();
    let phases: Vec<f64> =
        (0..cfg.num_categories).map(|_| world_rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    // category-level season-over-season growth, evenly spread over
    // [1-trend, 1+trend] so categories always differ; flat when the trend
    // scale is zero so the noiseless world stays exactly periodic
    let mut growths: Vec<f64> = (0..cfg.num_categories)
        .map(|c| {
            let u = if cfg.num_categories > 1 {
                2.0 * c as f64 / (cfg.num_categories - 1) as f64 - 1.0
            } else {
                0.0
            };
            1.0 + cfg.trend_scale * u
        })
        .collect();
    growths.shuffle(&mut world_rng);

    let poor_per_cat =
        (cfg.longtail_fraction * cfg.segments_per_category as f64).round() as usize;
    let short_len = cfg.short_history_len().min(cfg.days);

    let mut segments = Vec::new();
    for c in 0..cfg.num_categories {
        for s in 0..cfg.segments_per_category {
            let index = (c * cfg.segments_per_category + s) as u64;
            // per-segment stream so parallel generation cannot change output
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index);
            let data_poor = s >= cfg.segments_per_category - poor_per_cat;
            let len = if data_poor { short_len } else { cfg.days };
            let start_day = cfg.days - len;
            // keep the idiosyncratic drift small next to the category growth
            let slope = rng.gen_range(-cfg.trend_scale..=cfg.trend_scale) / 3.0;
            let level = cfg.base_demand * rng.gen_range(0.5..1.5);

            let mut demand = Vec::with_capacity(len);
            for t in start_day..cfg.days {
                let seasonal = 1.0
                    + cfg.category_amplitude
                        * (std::f64::consts::TAU * t as f64 / cfg.season as f64 + phases[c]).sin();
                let trend = 1.0 + slope * (t as f64 / cfg.days as f64 - 0.5);
                let growth = growths[c].powf(t as f64 / cfg.season as f64);
                let noise = cfg.segment_noise * level * rng.gen_range(-1.0..1.0);
                demand.push((level * seasonal * trend * growth + noise).max(0.0));
            }

            // lagged user-action channels: monotone in demand, plus noise
            let ext = cfg.feature_dim - 1;
            let gains: Vec<f64> = (0..ext).map(|_| rng.gen_range(0.2..1.0)).collect();
            let lags: Vec<usize> = (0..ext).map(|_| rng.gen_range(0..4)).collect();
            let mut features = Vec::with_capacity(len);
            for t in 0..len {
                let mut row = Vec::with_capacity(ext);
                for k in 0..ext {
                    let src = demand[t.saturating_sub(lags[k])];
                    let noise = cfg.segment_noise * level * rng.gen_range(-1.0..1.0);
                    row.push((gains[k] * src + noise).max(0.0));
                }
                features.push(row);
            }

            segments.push(Segment {
                id: format!("seg_{}_{s}", categories[c]),
                category: categories[c].clone(),
                start_day,
                demand,
                features,
            });
        }
    }

    let orders = generate_orders(cfg, &segments);
    Ok(SyntheticWorld { segments, orders, categories, days: cfg.days, season: cfg.season })
}

fn generate_orders(cfg: &GeneratorConfig, segments: &[Segment]) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6f72_6465_7273);
    let mut orders = Vec::new();
    for day in 0..cfg.days {
        let active: Vec<&Segment> = segments.iter().filter(|s| s.start_day <= day).collect();
        if active.len() < 2 {
            continue;
        }
        for _ in 0..cfg.orders_per_day {
            let first = active[rng.gen_range(0..active.len())];
            let mut items = vec![first.id.clone()];
            let extra = rng.gen_range(1..=3);
            for _ in 0..extra {
                let same_cat = rng.gen_bool(cfg.copurchase_affinity);
                let pool: Vec<&&Segment> = active
                    .iter()
                    .filter(|s| (s.category == first.category) == same_cat && s.id != first.id)
                    .collect();
                if let Some(pick) = pool.get(rng.gen_range(0..pool.len().max(1))) {
                    if !items.contains(&pick.id) {
                        items.push(pick.id.clone());
                    }
                }
            }
            if items.len() >= 2 {
                orders.push(items);
            }
        }
    }
    orders
}

/// Within-segment chronological split sizes. The test block is the most
/// recent quarter of windows (capped), the train block ends a full target
/// window earlier so no train target overlaps any test input.
#[derive(Copy, Clone, Debug)]
pub struct EpisodeOptions {
    pub train_cap: usize,
    pub test_cap: usize,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions { train_cap: 10, test_cap: 20 }
    }
}

#[derive(Clone, Debug)]
pub struct EpisodeSplit {
    pub sources: Vec<Episode>,
    pub targets: Vec<Episode>,
    /// segments excluded because they cannot produce a full episode
    pub warnings: Vec<String>,
}

/// All sample windows of one segment at every valid t_c (local indices into
/// the segment's own history), un-normalized.
pub fn build_windows(seg: &Segment, cfg: &HorizonConfig) -> Vec<SampleWindow> {
    let len = seg.demand.len();
    let need_future = cfg.gap + cfg.horizon;
    if len < cfg.window_len + need_future {
        return Vec::new();
    }
    let mut windows = Vec::new();
    for t_c in (cfg.window_len - 1)..(len - need_future) {
        let frame = |t: usize| -> Vec<f64> {
            let mut row = Vec::with_capacity(1 + seg.features[t].len());
            row.push(seg.demand[t]);
            row.extend_from_slice(&seg.features[t]);
            row
        };
        let local_seq: Vec<Vec<f64>> =
            (t_c + 1 - cfg.window_len..=t_c).map(frame).collect();
        let anchor = cfg.seasonal_anchor(t_c);
        let (seasonal_seq, seasonal_mask) = if anchor >= cfg.window_len as i64 - 1 {
            let a = anchor as usize;
            ((a + 1 - cfg.window_len..=a).map(frame).collect(), true)
        } else {
            (vec![vec![0.0; seg.features[0].len() + 1]; cfg.window_len], false)
        };
        let target = target_demand(&seg.demand, t_c, cfg).expect("t_c bounds checked");
        windows.push(SampleWindow { local_seq, seasonal_seq, seasonal_mask, target, t_c });
    }
    windows
}

/// Rank segments by record count, make the top `split` fraction sources and
/// the rest targets, and build each segment's episode: windows at every
/// valid t_c, z-score normalized from the train block, split
/// chronologically with a full target-window gap.
pub fn make_episodes(
    world: &SyntheticWorld,
    cfg: &HorizonConfig,
    split: f64,
    opts: &EpisodeOptions,
) -> Result<EpisodeSplit> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Config(format!("split fraction {split} outside (0,1)")));
    }
    let mut ranked: Vec<&Segment> = world.segments.iter().collect();
    ranked.sort_by(|a, b| b.record_count().cmp(&a.record_count()).then(a.id.cmp(&b.id)));
    let n_src = ((split * ranked.len() as f64).floor() as usize).clamp(1, ranked.len() - 1);

    let mut out = EpisodeSplit { sources: Vec::new(), targets: Vec::new(), warnings: Vec::new() };
    for (rank, seg) in ranked.iter().enumerate() {
        let windows = build_windows(seg, cfg);
        match split_windows(seg, windows, cfg) {
            Ok(ep) => {
                let ep = cap_episode(ep, opts);
                if rank < n_src {
                    out.sources.push(ep);
                } else {
                    out.targets.push(ep);
                }
            }
            Err(why) => out.warnings.push(format!("{}: {why}", seg.id)),
        }
    }
    Ok(out)
}

fn split_windows(
    seg: &Segment,
    mut windows: Vec<SampleWindow>,
    cfg: &HorizonConfig,
) -> std::result::Result<Episode, String> {
    if windows.is_empty() {
        return Err(format!(
            "history of {} days yields no valid window",
            seg.record_count()
        ));
    }
    let w = windows.len();
    // drop `horizon` consecutive t_c positions between the blocks so the
    // last train target window ends before the first test input's target
    let gap = cfg.horizon;
    if w < gap + 2 {
        return Err(format!("{w} windows cannot hold a train/test split with gap {gap}"));
    }
    let n_te = ((w - gap) / 4).clamp(1, w - gap - 1);
    let n_tr = w - gap - n_te;
    let d_te = windows.split_off(w - n_te);
    windows.truncate(n_tr);

    let mut ep = Episode {
        segment_id: seg.id.clone(),
        category: seg.category.clone(),
        d_tr: windows,
        d_te,
        graph_vector: None,
        target_mean: 0.0,
        target_std: 1.0,
    };
    normalize_episode(&mut ep);
    Ok(ep)
}

fn cap_episode(mut ep: Episode, opts: &EpisodeOptions) -> Episode {
    if opts.train_cap > 0 && ep.d_tr.len() > opts.train_cap {
        ep.d_tr.drain(..ep.d_tr.len() - opts.train_cap);
    }
    if opts.test_cap > 0 && ep.d_te.len() > opts.test_cap {
        ep.d_te.drain(..ep.d_te.len() - opts.test_cap);
    }
    ep
}

/// Per-channel z-scoring from the train block; inputs pass through log1p
/// first (counts), targets keep their scale with the mean/std recorded for
/// de-normalization.
fn normalize_episode(ep: &mut Episode) {
    let dim = ep.d_tr.first().or(ep.d_te.first()).map_or(0, SampleWindow::feature_dim);
    let mut stats = vec![(0.0f64, 0.0f64, 0usize); dim];
    let mut t_sum = 0.0;
    let mut t_sq = 0.0;
    let mut t_n = 0usize;
    for w in &ep.d_tr {
        for frame in w.local_seq.iter().chain(w.seasonal_seq.iter().filter(|_| w.seasonal_mask)) {
            for (k, x) in frame.iter().enumerate() {
                let v = x.ln_1p();
                stats[k].0 += v;
                stats[k].1 += v * v;
                stats[k].2 += 1;
            }
        }
        t_sum += w.target;
        t_sq += w.target * w.target;
        t_n += 1;
    }
    let moments = |sum: f64, sq: f64, n: usize| -> (f64, f64) {
        if n == 0 {
            return (0.0, 1.0);
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        (mean, if std > 1e-8 { std } else { 1.0 })
    };
    let ch: Vec<(f64, f64)> = stats.iter().map(|&(s, q, n)| moments(s, q, n)).collect();
    let (tm, ts) = moments(t_sum, t_sq, t_n);
    for w in ep.d_tr.iter_mut().chain(ep.d_te.iter_mut()) {
        for seq in [&mut w.local_seq, &mut w.seasonal_seq] {
            for frame in seq.iter_mut() {
                for (k, x) in frame.iter_mut().enumerate() {
                    *x = (x.ln_1p() - ch[k].0) / ch[k].1;
                }
            }
        }
        if !w.seasonal_mask {
            for frame in &mut w.seasonal_seq {
                frame.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        w.target = (w.target - tm) / ts;
    }
    ep.target_mean = tm;
    ep.target_std = ts;
}

/// ISO-8601 date for a day offset from the fixed epoch 2024-01-01.
pub fn day_to_date(day: usize) -> String {
    // civil-from-days on the proleptic Gregorian calendar
    let z = day as i64 + 19_723 + 719_468; // 2024-01-01 in era-relative days
    let era = z / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!("{y:04}-{m:02}-{d:02}")
}

/// Demand file: one record per segment-day,
/// `segment_id  category  date  demand  f1,f2,...` (tab-separated).
pub fn write_world<W: Write>(w: &mut W, world: &SyntheticWorld) -> Result<()> {
    for seg in &world.segments {
        for (t, d) in seg.demand.iter().enumerate() {
            let feats: Vec<String> =
                seg.features[t].iter().map(|x| format!("{x:.17e}")).collect();
            writeln!(
                w,
                "{}\t{}\t{}\t{:.17e}\t{}",
                seg.id,
                seg.category,
                day_to_date(seg.start_day + t),
                d,
                feats.join(",")
            )?;
        }
    }
    Ok(())
}

pub fn read_world<R: BufRead>(r: &mut R) -> Result<SyntheticWorld> {
    let mut segments: Vec<Segment> = Vec::new();
    let mut dates: Vec<Vec<String>> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let bad = || Error::Config(format!("demand file line {}: malformed record", lineno + 1));
        let id = parts.next().ok_or_else(bad)?;
        let cat = parts.next().ok_or_else(bad)?;
        let date = parts.next().ok_or_else(bad)?;
        let demand: f64 = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let feats: Vec<f64> = match parts.next() {
            Some(f) if !f.is_empty() => f
                .split(',')
                .map(|x| x.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        match segments.iter_mut().position(|s| s.id == id) {
            Some(i) => {
                segments[i].demand.push(demand);
                segments[i].features.push(feats);
                dates[i].push(date.to_string());
            }
            None => {
                segments.push(Segment {
                    id: id.to_string(),
                    category: cat.to_string(),
                    start_day: 0,
                    demand: vec![demand],
                    features: vec![feats],
                });
                dates.push(vec![date.to_string()]);
            }
        }
    }
    if segments.is_empty() {
        return Err(Error::Config("demand file holds no records".into()));
    }
    let mut categories: Vec<String> = Vec::new();
    for s in &segments {
        if !categories.contains(&s.category) {
            categories.push(s.category.clone());
        }
    }
    let days = segments.iter().map(|s| s.demand.len()).max().unwrap_or(0);
    for (s, d) in segments.iter_mut().zip(&dates) {
        let _ = d;
        s.start_day = days - s.demand.len();
    }
    Ok(SyntheticWorld { segments, orders: Vec::new(), categories, days, season: 0 })
}
