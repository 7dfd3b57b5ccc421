//! Multi-pattern fusion network: two GRU branches (local recent window,
//! seasonal window lagged one season) fused into a linear prediction head.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{BoundParams, ParamSet, Tape, Tensor, Var};

/// Prediction window geometry: gap before the target window, target window
/// length, season period, and input sequence length.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct HorizonConfig {
    pub gap: usize,
    pub horizon: usize,
    pub season: usize,
    pub window_len: usize,
}

impl HorizonConfig {
    pub fn new(gap: usize, horizon: usize, season: usize, window_len: usize) -> Result<Self> {
        if horizon < 1 || window_len < 1 {
            return Err(Error::Config(format!(
                "horizon ({horizon}) and window_len ({window_len}) must be >= 1"
            )));
        }
        Ok(HorizonConfig { gap, horizon, season, window_len })
    }

    /// Seasonal anchor t_l = t_c + gap - season. Negative when the series
    /// does not reach back a full season.
    pub fn seasonal_anchor(&self, t_c: usize) -> i64 {
        t_c as i64 + self.gap as i64 - self.season as i64
    }
}

/// Target demand: inclusive sum of daily demand over
/// j = gap ..= gap + horizon, i.e. horizon + 1 terms.
pub fn target_demand(series: &[f64], t_c: usize, cfg: &HorizonConfig) -> Result<f64> {
    let lo = t_c + cfg.gap;
    let hi = t_c + cfg.gap + cfg.horizon;
    if hi >= series.len() {
        return Err(Error::SeriesTooShort { need_lo: lo, need_hi: hi, len: series.len() });
    }
    Ok(series[lo..=hi].iter().sum())
}

/// One training example: local and seasonal input sequences plus the target.
/// Sequences are `window_len` frames of dimension `e` (demand first, then
/// external features). When seasonal history is unavailable the seasonal
/// sequence is zero and `seasonal_mask` is false.
#[derive(Clone, Debug)]
pub struct SampleWindow {
    pub local_seq: Vec<Vec<f64>>,
    pub seasonal_seq: Vec<Vec<f64>>,
    pub seasonal_mask: bool,
    pub target: f64,
    pub t_c: usize,
}

impl SampleWindow {
    pub fn feature_dim(&self) -> usize {
        self.local_seq.first().map_or(0, Vec::len)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum MpfnMode {
    Full,
    LocalOnly,
    SeasonalOnly,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum LossReduction {
    Mean,
    Sum,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct MpfnDims {
    pub input: usize,
    pub hidden: usize,
}

const GATE_NAMES: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"];

/// GRU cell parameters under a prefix: wz/uz/bz, wr/ur/br, wh/uh/bh with
/// input weights `[hidden, input]`, recurrent weights `[hidden, hidden]`,
/// and biases `[hidden]`.
pub fn init_gru_cell(params: &mut ParamSet, prefix: &str, input: usize, hidden: usize, rng: &mut impl Rng) {
    for name in GATE_NAMES {
        let t = match &name[..1] {
            "w" => uniform_matrix(hidden, input, rng),
            "u" => uniform_matrix(hidden, hidden, rng),
            _ => Tensor::zeros(vec![hidden]),
        };
        params.insert(format!("{prefix}{name}"), t);
    }
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) matrix initialization.
pub fn uniform_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// Fresh MPFN parameters: branches `local/` and `seasonal/`, head weight
/// `head_w` of shape `[1, 2*hidden]` and scalar bias `head_b`.
pub fn init_mpfn(dims: MpfnDims, rng: &mut impl Rng) -> ParamSet {
    let mut params = ParamSet::new();
    init_gru_cell(&mut params, "local/", dims.input, dims.hidden, rng);
    init_gru_cell(&mut params, "seasonal/", dims.input, dims.hidden, rng);
    params.insert("head_w", uniform_matrix(1, 2 * dims.hidden, rng));
    params.insert("head_b", Tensor::vector(vec![0.0]));
    params
}

/// One GRU step: z and r are sigmoid gates, the candidate uses reset-gated
/// recurrence, and the new state is (1-z) ⊙ h + z ⊙ h̃.
pub fn gru_step(tape: &mut Tape, cell: &BoundParams, x: Var, h_prev: Var) -> Result<Var> {
    let gate = |tape: &mut Tape, w: &str, u: &str, b: &str, h: Var| -> Result<Var> {
        let wx = tape.matmul(cell.get(w), x)?;
        let uh = tape.matmul(cell.get(u), h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, cell.get(b))
    };
    let z = gate(tape, "wz", "uz", "bz", h_prev)?;
    let z = tape.sigmoid(z)?;
    let r = gate(tape, "wr", "ur", "br", h_prev)?;
    let r = tape.sigmoid(r)?;
    let rh = tape.mul(r, h_prev)?;
    let cand = gate(tape, "wh", "uh", "bh", rh)?;
    let cand = tape.tanh(cand)?;
    // (1-z) ⊙ h_prev + z ⊙ cand
    let zh = tape.mul(z, cand)?;
    let zp = tape.mul(z, h_prev)?;
    let keep = tape.sub(h_prev, zp)?;
    tape.add(keep, zh)
}

/// Unroll a GRU cell over `frames` starting from h_0 = 0.
pub fn gru_unroll(tape: &mut Tape, cell: &BoundParams, frames: &[Var], hidden: usize) -> Result<Var> {
    let mut h = tape.constant(Tensor::zeros(vec![hidden]));
    for &x in frames {
        h = gru_step(tape, cell, x, h)?;
    }
    Ok(h)
}

fn frames_on_tape(tape: &mut Tape, seq: &[Vec<f64>]) -> Vec<Var> {
    seq.iter()
        .map(|f| tape.constant(Tensor::vector(f.clone())))
        .collect()
}

/// Forward pass: fused hidden state (seasonal ⊕ local) through the linear
/// head. Ablation modes zero the removed branch's hidden vector; a false
/// seasonal mask zeroes the seasonal branch regardless of mode.
pub fn mpfn_forward(
    tape: &mut Tape,
    params: &BoundParams,
    window: &SampleWindow,
    mode: MpfnMode,
) -> Result<Var> {
    let hidden = tape.value(params.get("local/uz")).shape()[0];
    let local = params.sub("local/");
    let seasonal = params.sub("seasonal/");

    let h_local = if mode == MpfnMode::SeasonalOnly {
        tape.constant(Tensor::zeros(vec![hidden]))
    } else {
        let frames = frames_on_tape(tape, &window.local_seq);
        gru_unroll(tape, &local, &frames, hidden)?
    };
    let h_seasonal = if mode == MpfnMode::LocalOnly || !window.seasonal_mask {
        tape.constant(Tensor::zeros(vec![hidden]))
    } else {
        let frames = frames_on_tape(tape, &window.seasonal_seq);
        gru_unroll(tape, &seasonal, &frames, hidden)?
    };
    let fused = tape.concat(&[h_seasonal, h_local])?;
    let y = tape.affine(params.get("head_w"), fused, params.get("head_b"))?;
    tape.reshape(y, vec![])
}

/// MSE of predictions against targets over a batch of windows.
pub fn mpfn_loss(
    tape: &mut Tape,
    params: &BoundParams,
    batch: &[SampleWindow],
    mode: MpfnMode,
    reduction: LossReduction,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("mpfn_loss"));
    }
    let mut preds = Vec::with_capacity(batch.len());
    for w in batch {
        let y = mpfn_forward(tape, params, w, mode)?;
        preds.push(tape.reshape(y, vec![1])?);
    }
    let pred = tape.concat(&preds)?;
    let target = tape.constant(Tensor::vector(batch.iter().map(|w| w.target).collect()));
    let loss = tape.mse(pred, target)?;
    match reduction {
        LossReduction::Mean => Ok(loss),
        LossReduction::Sum => tape.scale(loss, batch.len() as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_cell(input: usize, hidden: usize) -> ParamSet {
        let mut p = ParamSet::new();
        for name in GATE_NAMES {
            let t = match &name[..1] {
                "w" => Tensor::zeros(vec![hidden, input]),
                "u" => Tensor::zeros(vec![hidden, hidden]),
                _ => Tensor::zeros(vec![hidden]),
            };
            p.insert(name, t);
        }
        p
    }

    fn window(local: Vec<Vec<f64>>, seasonal: Vec<Vec<f64>>, target: f64) -> SampleWindow {
        SampleWindow { local_seq: local, seasonal_seq: seasonal, seasonal_mask: true, target, t_c: 0 }
    }

    #[test]
    fn target_demand_constant_series() {
        let series = vec![1.0; 100];
        let cfg = HorizonConfig::new(14, 30, 365, 5).unwrap();
        assert_eq!(target_demand(&series, 0, &cfg).unwrap(), 31.0);
    }

    #[test]
    fn target_demand_zero_series() {
        let series = vec![0.0; 50];
        let cfg = HorizonConfig::new(2, 3, 365, 5).unwrap();
        assert_eq!(target_demand(&series, 0, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn target_demand_index_series() {
        let series: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let cfg = HorizonConfig::new(2, 3, 365, 5).unwrap();
        // 2 + 3 + 4 + 5
        assert_eq!(target_demand(&series, 0, &cfg).unwrap(), 14.0);
    }

    #[test]
    fn target_demand_out_of_range() {
        let series = vec![1.0; 10];
        let cfg = HorizonConfig::new(5, 10, 365, 5).unwrap();
        assert!(matches!(
            target_demand(&series, 0, &cfg),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn gru_zero_params_halves_hidden() {
        // z = r = sigmoid(0) = 0.5, candidate = tanh(0) = 0, so h' = 0.5 h.
        let cell = zero_cell(2, 3);
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &cell, false);
        let x = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let h = tape.constant(Tensor::vector(vec![0.4, -0.8, 0.2]));
        let out = gru_step(&mut tape, &b, x, h).unwrap();
        let got = tape.value(out).data().to_vec();
        for (g, e) in got.iter().zip([0.2, -0.4, 0.1]) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gru_zero_hidden_zero_params_stays_zero() {
        let cell = zero_cell(2, 3);
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &cell, false);
        let x = tape.constant(Tensor::vector(vec![5.0, 7.0]));
        let h = tape.constant(Tensor::zeros(vec![3]));
        let out = gru_step(&mut tape, &b, x, h).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_output_stays_in_unit_interval() {
        // brute force over 1000 random inputs with h_prev in [-1, 1]^d
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cell = ParamSet::new();
        init_gru_cell(&mut cell, "", 3, 4, &mut rng);
        for _ in 0..1000 {
            let mut tape = Tape::new();
            let b = BoundParams::bind(&mut tape, &cell, false);
            let x = tape.constant(Tensor::vector(
                (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect(),
            ));
            let h = tape.constant(Tensor::vector(
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ));
            let out = gru_step(&mut tape, &b, x, h).unwrap();
            assert!(tape.value(out).data().iter().all(|&v| v > -1.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_all_zero_params_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = init_mpfn(MpfnDims { input: 2, hidden: 3 }, &mut rng);
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &params, false);
        let w = window(vec![vec![1.0, 2.0]; 4], vec![vec![0.5, 0.5]; 4], 9.0);
        let y = mpfn_forward(&mut tape, &b, &w, MpfnMode::Full).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn local_only_matches_full_with_zero_seasonal() {
        // oracle: full forward with seasonal hidden forced to zero
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = init_mpfn(MpfnDims { input: 2, hidden: 3 }, &mut rng);
        for (name, t) in params.iter_mut() {
            if name.starts_with("seasonal/") {
                t.data_mut().fill(0.0);
            }
        }
        let w = window(vec![vec![1.0, -1.0]; 5], vec![vec![0.0, 0.0]; 5], 0.0);
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &params, false);
        let full = mpfn_forward(&mut tape, &b, &w, MpfnMode::Full).unwrap();
        let local = mpfn_forward(&mut tape, &b, &w, MpfnMode::LocalOnly).unwrap();
        // seasonal GRU with zero params keeps h = 0, so outputs are identical
        assert_eq!(tape.value(full).item(), tape.value(local).item());
    }

    #[test]
    fn forward_full_config_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = init_mpfn(MpfnDims { input: 48, hidden: 128 }, &mut rng);
        let frame: Vec<f64> = (0..48).map(|i| (i as f64 * 0.37).sin()).collect();
        let w = window(vec![frame.clone(); 30], vec![frame; 30], 1.0);
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &params, false);
        let y = mpfn_forward(&mut tape, &b, &w, MpfnMode::Full).unwrap();
        assert!(tape.value(y).item().is_finite());
    }

    #[test]
    fn loss_trivial_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = init_mpfn(MpfnDims { input: 2, hidden: 3 }, &mut rng);
        for (_, t) in params.iter_mut() {
            t.data_mut().fill(0.0);
        }
        // all predictions are 0 (zero params); targets encode desired errors
        let mk = |target: f64| window(vec![vec![0.0, 0.0]; 3], vec![vec![0.0, 0.0]; 3], target);
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &params, false);
        // perfect predictions
        let l = mpfn_loss(&mut tape, &b, &[mk(0.0), mk(0.0)], MpfnMode::Full, LossReduction::Mean)
            .unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        // every prediction off by constant c = 2 -> c^2
        let l = mpfn_loss(&mut tape, &b, &[mk(2.0), mk(2.0)], MpfnMode::Full, LossReduction::Mean)
            .unwrap();
        assert!((tape.value(l).item() - 4.0).abs() < 1e-12);
        // errors 1 and 3 -> (1+9)/2
        let l = mpfn_loss(&mut tape, &b, &[mk(1.0), mk(3.0)], MpfnMode::Full, LossReduction::Mean)
            .unwrap();
        assert!((tape.value(l).item() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_mpfn(MpfnDims { input: 2, hidden: 3 }, &mut rng);
        let mut tape = Tape::new();
        let b = BoundParams::bind(&mut tape, &params, false);
        assert!(matches!(
            mpfn_loss(&mut tape, &b, &[], MpfnMode::Full, LossReduction::Mean),
            Err(Error::EmptyBatch(_))
        ));
    }

    #[test]
    fn grad_check_tiny_config() {
        // feature dim 3, hidden 4, |T_c| = 5
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = init_mpfn(MpfnDims { input: 3, hidden: 4 }, &mut rng);
        let mk = |seed: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            SampleWindow {
                local_seq: (0..5)
                    .map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect())
                    .collect(),
                seasonal_seq: (0..5)
                    .map(|_| (0..3).map(|_| r.gen_range(-1.0..1.0)).collect())
                    .collect(),
                seasonal_mask: true,
                target: r.gen_range(-1.0..1.0),
                t_c: 0,
            }
        };
        let batch: Vec<SampleWindow> = (0..5).map(mk).collect();
        let report = grad_check(
            move |tape, bound| mpfn_loss(tape, bound, &batch, MpfnMode::Full, LossReduction::Mean),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {} at {}[{}]",
            report.max_rel_error,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = init_mpfn(MpfnDims { input: 2, hidden: 4 }, &mut rng);
        let w = window(vec![vec![0.3, -0.2]; 6], vec![vec![0.1, 0.9]; 6], 0.0);
        let run = || {
            let mut tape = Tape::new();
            let b = BoundParams::bind(&mut tape, &params, false);
            let y = mpfn_forward(&mut tape, &b, &w, MpfnMode::Full).unwrap();
            tape.value(y).item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
