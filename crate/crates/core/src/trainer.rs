//! Two-phase training: pretraining with the supervised and self-supervised
//! terms, a single threshold calibration on the EMA model, then the main
//! phase with pseudo-labeling and energy regularization under a cosine
//! learning-rate decay.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint::Archive;
use crate::config::{Mode, RunConfig};
use crate::data::{generate_gaussian_openset, sample_batch, OpenSetBatch, OpenSetDataset};
use crate::energy::{
    auroc, calibrate_thresholds, confidence_auroc, free_energy_score, softmax_confidence, ScoreRecord,
    Thresholds,
};
use crate::error::{Error, Result};
use crate::losses::{
    confidence_mask, energy_reg_loss, masked_pseudo_label_loss, pseudo_label_loss, self_supervised_loss,
    supervised_loss, total_loss, weight_decay_loss, LossBreakdown, LossTerms, LossWeights,
};
use crate::network::{EmaShadow, ModelParams, ParamVars, SgdNesterov};
use crate::rng::{self, tag};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};

/// Constant `eta0` before `K_p`, then `eta0 cos(gamma pi (k - K_p) / (2 (K - K_p)))`.
pub fn lr_schedule(k: usize, cfg: &RunConfig) -> f64 {
    if k < cfg.k_pre || cfg.k_total == cfg.k_pre {
        return cfg.eta0;
    }
    let t = (k - cfg.k_pre) as f64 / (cfg.k_total - cfg.k_pre) as f64;
    cfg.eta0 * (cfg.gamma * PI * t / 2.0).cos()
}

/// How unlabeled samples are selected for pseudo-labeling.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PseudoLabelRule {
    Off,
    /// Free energy of the weak view strictly below `tau_id`.
    Energy { tau_id: f64 },
    /// Largest softmax probability of the weak view at least `threshold`.
    Confidence { threshold: f64 },
}

/// Everything a single optimizer step needs besides the batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepPlan {
    pub weights: LossWeights,
    pub pseudo: PseudoLabelRule,
    /// `(tau_ood, m_ood)` for the energy hinge, when active.
    pub hinge: Option<(f64, f64)>,
    pub beta: f64,
    pub lr: f64,
}

/// Loss weights and selection rules in effect at step `k`.
pub fn step_plan(cfg: &RunConfig, k: usize, thresholds: Option<&Thresholds>) -> Result<StepPlan> {
    let w = cfg.weights;
    let pretraining = k < cfg.k_pre;
    let mut plan = StepPlan {
        weights: LossWeights {
            w_p: 0.0,
            w_s: 0.0,
            w_e: 0.0,
            w_w: w.w_w,
        },
        pseudo: PseudoLabelRule::Off,
        hinge: None,
        beta: cfg.energy.beta,
        lr: lr_schedule(k, cfg),
    };
    match cfg.mode {
        Mode::Supervised => {}
        Mode::FixmatchBaseline => {
            if !pretraining {
                plan.weights.w_p = if cfg.use_lp { w.w_p } else { 0.0 };
                plan.pseudo = PseudoLabelRule::Confidence {
                    threshold: cfg.fixmatch_conf_threshold,
                };
            }
        }
        Mode::Sefoss => {
            plan.weights.w_s = w.w_s;
            if !pretraining {
                let t = thresholds.ok_or_else(|| {
                    Error::Contract(format!("step {k} is past pretraining but thresholds are not calibrated"))
                })?;
                plan.weights.w_p = if cfg.use_lp { w.w_p } else { 0.0 };
                plan.weights.w_e = if cfg.use_le { w.w_e } else { 0.0 };
                plan.pseudo = PseudoLabelRule::Energy {
                    tau_id: cfg.tau_id_override.unwrap_or(t.tau_id),
                };
                plan.hinge = Some((t.tau_ood, t.m_ood));
            }
        }
    }
    Ok(plan)
}

/// Records every loss term for `batch` on `tape`.
///
/// `target_override` replaces the detached weak-view features used as the
/// self-supervised target; gradient checks pass a fixed copy so that finite
/// differences see the same constant the analytic gradient does.
pub fn record_losses(
    tape: &mut Tape,
    vars: &ParamVars,
    batch: &OpenSetBatch,
    plan: &StepPlan,
    target_override: Option<&Tensor>,
) -> Result<(Var, LossBreakdown)> {
    let terms = record_terms(tape, vars, batch, plan, target_override)?;
    total_loss(tape, &terms, &plan.weights)
}

/// The unweighted loss terms of [`record_losses`].
pub fn record_terms(
    tape: &mut Tape,
    vars: &ParamVars,
    batch: &OpenSetBatch,
    plan: &StepPlan,
    target_override: Option<&Tensor>,
) -> Result<LossTerms> {
    let xl = tape.constant(batch.labeled_x.clone())?;
    let fl = vars.forward_features(tape, xl)?;
    let o = vars.forward_logits(tape, fl)?;
    let l_l = supervised_loss(tape, o, &batch.labeled_onehot)?;

    let n_u = batch.unlabeled_weak.rows();
    let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));
    let (l_s, l_p, l_e, n_in, n_out) = if n_u == 0 {
        (zero(tape)?, zero(tape)?, zero(tape)?, 0, 0)
    } else {
        let xw = tape.constant(batch.unlabeled_weak.clone())?;
        let xs = tape.constant(batch.unlabeled_strong.clone())?;
        let z = vars.forward_features(tape, xw)?;
        let v = vars.forward_features(tape, xs)?;
        let w = vars.forward_logits(tape, z)?;
        let q = vars.forward_logits(tape, v)?;

        let target = match target_override {
            Some(t) => tape.constant(t.clone())?,
            None => tape.detach(z)?,
        };
        let hv = vars.project(tape, v)?;
        let l_s = guarded_self_supervised_loss(tape, hv, target)?;

        let w_val = tape.value(w).clone();
        let (l_p, n_in) = match plan.pseudo {
            PseudoLabelRule::Off => (zero(tape)?, 0),
            PseudoLabelRule::Energy { tau_id } => pseudo_label_loss(tape, &w_val, q, tau_id, plan.beta)?,
            PseudoLabelRule::Confidence { threshold } => {
                let mask = confidence_mask(&w_val, threshold);
                masked_pseudo_label_loss(tape, &w_val, q, &mask)?
            }
        };
        let (l_e, n_out) = match plan.hinge {
            None => (zero(tape)?, 0),
            Some((tau_ood, m_ood)) => energy_reg_loss(tape, w, tau_ood, m_ood, plan.beta)?,
        };
        (l_s, l_p, l_e, n_in, n_out)
    };
    let l_w = weight_decay_loss(tape, vars)?;
    Ok(LossTerms {
        l_l,
        l_p,
        l_s,
        l_e,
        l_w,
        inlier_mask_count: n_in,
        outlier_mask_count: n_out,
    })
}

/// Self-supervised loss that drops rows where either side has zero norm.
/// Dropped rows contribute 0 and the normalizer stays the full row count.
fn guarded_self_supervised_loss(tape: &mut Tape, hv: Var, target: Var) -> Result<Var> {
    let nonzero = |t: &Tensor, i: usize| t.row(i).iter().any(|&x| x != 0.0);
    let n = tape.shape(hv).0;
    let keep: Vec<usize> = (0..n)
        .filter(|&i| nonzero(tape.value(hv), i) && nonzero(tape.value(target), i))
        .collect();
    if keep.len() == n {
        return self_supervised_loss(tape, hv, target);
    }
    if keep.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let kept = keep.len();
    let hv = tape.gather_rows(hv, keep.clone())?;
    let target = tape.gather_rows(target, keep)?;
    let l = self_supervised_loss(tape, hv, target)?;
    tape.scale(l, kept as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Number of optimizer steps taken.
    pub step: usize,
    pub params: ModelParams,
    pub optimizer: SgdNesterov,
    pub ema: EmaShadow,
    thresholds: Option<Thresholds>,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let params = ModelParams::init(rng::derive(cfg.seed, tag::INIT, 0), &cfg.model_dims())?;
        Ok(Self {
            step: 0,
            optimizer: SgdNesterov::new(&params, cfg.momentum),
            ema: EmaShadow::new(&params, cfg.ema_momentum)?,
            params,
            thresholds: None,
        })
    }

    pub fn thresholds(&self) -> Option<&Thresholds> {
        self.thresholds.as_ref()
    }

    /// Computes thresholds from EMA-model energies of the unaugmented labeled
    /// inputs. Allowed once per run, at step `K_p`.
    pub fn calibrate(&mut self, labeled_x: &Tensor, cfg: &RunConfig) -> Result<Thresholds> {
        if self.thresholds.is_some() {
            return Err(Error::Contract("thresholds are already calibrated".into()));
        }
        if self.step != cfg.k_pre {
            return Err(Error::Contract(format!(
                "calibration happens at step K_p = {}, not at step {}",
                cfg.k_pre, self.step
            )));
        }
        let logits = self.ema.params.predict(labeled_x)?;
        let scores = free_energy_score(&logits, cfg.energy.beta);
        let t = calibrate_thresholds(&scores, &cfg.energy)?;
        self.thresholds = Some(t);
        Ok(t)
    }
}

/// One optimizer step followed by one EMA update.
pub fn training_step(state: &mut TrainState, batch: &OpenSetBatch, plan: &StepPlan) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let vars = state.params.register(&mut tape)?;
    let (total, breakdown) = record_losses(&mut tape, &vars, batch, plan, None)?;
    let mut grads = tape.backward(total)?;
    let grads = vars.collect_grads(&mut grads)?;
    state.optimizer.step(&mut state.params, &grads, plan.lr)?;
    state.ema.update(&state.params)?;
    state.step += 1;
    Ok(breakdown)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub acc_id: f64,
    pub auroc_energy: f64,
    pub auroc_confidence: f64,
}

/// Closed-set accuracy on `id_x` and AUROC of `id_x` against `ood_x` under
/// both scores.
pub fn evaluate(params: &ModelParams, id_x: &Tensor, id_y: &[usize], ood_x: &Tensor, beta: f64) -> Result<EvalResult> {
    let id_logits = params.predict(id_x)?;
    let ood_logits = params.predict(ood_x)?;
    let correct = id_logits
        .row_iter()
        .zip(id_y)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(EvalResult {
        acc_id: correct as f64 / id_y.len().max(1) as f64,
        auroc_energy: auroc(
            &free_energy_score(&id_logits, beta),
            &free_energy_score(&ood_logits, beta),
        )?,
        auroc_confidence: confidence_auroc(&softmax_confidence(&id_logits), &softmax_confidence(&ood_logits))?,
    })
}

pub fn score_records(params: &ModelParams, split: &str, x: &Tensor, is_ood: bool, beta: f64) -> Result<Vec<ScoreRecord>> {
    let logits = params.predict(x)?;
    Ok(free_energy_score(&logits, beta)
        .into_iter()
        .zip(softmax_confidence(&logits))
        .map(|(e, c)| ScoreRecord {
            split: split.to_string(),
            is_ood,
            score_energy: e,
            score_confidence: c,
        })
        .collect())
}

/// One evaluation row of `metrics.csv`. Loss columns and mask rates are
/// means over the steps since the previous row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub l_l: f64,
    pub l_p: f64,
    pub l_s: f64,
    pub l_e: f64,
    pub l_w: f64,
    pub total: f64,
    pub inlier_mask_rate: f64,
    pub outlier_mask_rate: f64,
    pub eval: EvalResult,
    pub thresholds: Option<Thresholds>,
}

pub const METRICS_HEADER: [&str; 16] = [
    "step",
    "lr",
    "l_l",
    "l_p",
    "l_s",
    "l_e",
    "l_w",
    "total",
    "inlier_mask_rate",
    "outlier_mask_rate",
    "acc_id",
    "auroc_energy",
    "auroc_confidence",
    "tau_id",
    "tau_ood",
    "m_ood",
];

impl MetricsRow {
    fn to_array(&self) -> [f64; 16] {
        let t = self.thresholds.map_or([f64::NAN; 3], |t| [t.tau_id, t.tau_ood, t.m_ood]);
        [
            self.step as f64,
            self.lr,
            self.l_l,
            self.l_p,
            self.l_s,
            self.l_e,
            self.l_w,
            self.total,
            self.inlier_mask_rate,
            self.outlier_mask_rate,
            self.eval.acc_id,
            self.eval.auroc_energy,
            self.eval.auroc_confidence,
            t[0],
            t[1],
            t[2],
        ]
    }

    fn from_array(a: &[f64]) -> Self {
        let thresholds = (!a[13].is_nan()).then(|| Thresholds {
            tau_id: a[13],
            tau_ood: a[14],
            m_ood: a[15],
        });
        Self {
            step: a[0] as usize,
            lr: a[1],
            l_l: a[2],
            l_p: a[3],
            l_s: a[4],
            l_e: a[5],
            l_w: a[6],
            total: a[7],
            inlier_mask_rate: a[8],
            outlier_mask_rate: a[9],
            eval: EvalResult {
                acc_id: a[10],
                auroc_energy: a[11],
                auroc_confidence: a[12],
            },
            thresholds,
        }
    }
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(METRICS_HEADER)?;
    for r in rows {
        let a = r.to_array();
        let mut rec = vec![r.step.to_string()];
        rec.extend(a[1..13].iter().map(f64::to_string));
        rec.extend(a[13..].iter().map(|v| if v.is_nan() { String::new() } else { v.to_string() }));
        csv.write_record(&rec)?;
    }
    csv.flush()?;
    Ok(())
}

/// Running sums for the loss columns between evaluations.
#[derive(Clone, Debug, Default, PartialEq)]
struct Window {
    sums: [f64; 8],
    count: usize,
    last_lr: f64,
}

impl Window {
    fn add(&mut self, b: &LossBreakdown, unlabeled: usize, lr: f64) {
        let rate = |n: usize| if unlabeled == 0 { 0.0 } else { n as f64 / unlabeled as f64 };
        let vals = [
            b.l_l,
            b.l_p,
            b.l_s,
            b.l_e,
            b.l_w,
            b.total,
            rate(b.inlier_mask_count),
            rate(b.outlier_mask_count),
        ];
        for (s, v) in self.sums.iter_mut().zip(vals) {
            *s += v;
        }
        self.count += 1;
        self.last_lr = lr;
    }

    fn means(&self) -> [f64; 8] {
        let n = self.count.max(1) as f64;
        self.sums.map(|s| s / n)
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.sums.to_vec();
        v.push(self.count as f64);
        v.push(self.last_lr);
        v
    }

    fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 10 {
            return Err(Error::Checkpoint(format!("window state has {} values, expected 10", v.len())));
        }
        let mut sums = [0.0; 8];
        sums.copy_from_slice(&v[..8]);
        Ok(Self {
            sums,
            count: v[8] as usize,
            last_lr: v[9],
        })
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median of each metric over the last five evaluations.
pub fn final_report(rows: &[MetricsRow]) -> EvalResult {
    let tail = &rows[rows.len().saturating_sub(5)..];
    let med = |f: fn(&EvalResult) -> f64| median(&mut tail.iter().map(|r| f(&r.eval)).collect::<Vec<_>>());
    EvalResult {
        acc_id: med(|e| e.acc_id),
        auroc_energy: med(|e| e.auroc_energy),
        auroc_confidence: med(|e| e.auroc_confidence),
    }
}

/// A training run in progress: configuration, data, state and telemetry.
#[derive(Clone, Debug)]
pub struct Run {
    cfg: RunConfig,
    data: OpenSetDataset,
    state: TrainState,
    window: Window,
    history: Vec<LossBreakdown>,
    metrics: Vec<MetricsRow>,
}

impl Run {
    pub fn new(cfg: RunConfig, data: OpenSetDataset) -> Result<Self> {
        cfg.validate()?;
        check_data(&cfg, &data)?;
        let state = TrainState::new(&cfg)?;
        let mut run = Self {
            cfg,
            data,
            state,
            window: Window::default(),
            history: Vec::new(),
            metrics: Vec::new(),
        };
        run.maybe_calibrate()?;
        Ok(run)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn data(&self) -> &OpenSetDataset {
        &self.data
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Per-step loss breakdowns since construction or resume.
    pub fn history(&self) -> &[LossBreakdown] {
        &self.history
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.metrics
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.k_total
    }

    fn maybe_calibrate(&mut self) -> Result<()> {
        if self.cfg.mode == Mode::Sefoss && self.state.step == self.cfg.k_pre && self.state.thresholds.is_none() {
            self.state.calibrate(&self.data.labeled_x, &self.cfg)?;
        }
        Ok(())
    }

    /// Batch for step `k`, drawn from its own random stream.
    pub fn batch_for_step(&self, k: usize) -> Result<OpenSetBatch> {
        let mu = if self.cfg.mode == Mode::Supervised { 0 } else { self.cfg.mu };
        let mut rng = rng::stream(self.cfg.seed, tag::BATCH, k as u64);
        sample_batch(&self.data, self.cfg.batch, mu, &self.cfg.augment, &mut rng)
    }

    pub fn step(&mut self) -> Result<LossBreakdown> {
        if self.is_done() {
            return Err(Error::Contract(format!("run already finished {} steps", self.cfg.k_total)));
        }
        let k = self.state.step;
        let plan = step_plan(&self.cfg, k, self.state.thresholds())?;
        let batch = self.batch_for_step(k)?;
        let b = training_step(&mut self.state, &batch, &plan)?;
        self.history.push(b);
        self.window.add(&b, batch.unlabeled_weak.rows(), plan.lr);
        self.maybe_calibrate()?;
        let k = self.state.step;
        if k % self.cfg.eval_every == 0 || k == self.cfg.k_total {
            let row = self.evaluation_row()?;
            self.metrics.push(row);
            self.window = Window::default();
        }
        Ok(b)
    }

    fn evaluation_row(&self) -> Result<MetricsRow> {
        let m = self.window.means();
        Ok(MetricsRow {
            step: self.state.step,
            lr: self.window.last_lr,
            l_l: m[0],
            l_p: m[1],
            l_s: m[2],
            l_e: m[3],
            l_w: m[4],
            total: m[5],
            inlier_mask_rate: m[6],
            outlier_mask_rate: m[7],
            eval: self.evaluate_ema()?,
            thresholds: self.state.thresholds,
        })
    }

    /// Evaluation of the EMA parameters on the test splits.
    pub fn evaluate_ema(&self) -> Result<EvalResult> {
        evaluate(
            &self.state.ema.params,
            &self.data.test_id_x,
            &self.data.test_id_y,
            &self.data.test_ood_x,
            self.cfg.energy.beta,
        )
    }

    /// Steps until `k` steps have been taken in total (or the run ends).
    pub fn run_until(&mut self, k: usize) -> Result<()> {
        while self.state.step < k.min(self.cfg.k_total) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        self.run_until(self.cfg.k_total)
    }

    /// Everything needed to continue this run bit-exactly.
    pub fn checkpoint(&self) -> Archive {
        let s = &self.state;
        let mut a = Archive::new();
        a.push_params("param", &s.params);
        a.push_params("ema", &s.ema.params);
        for (e, v) in s.params.entries().iter().zip(&s.optimizer.velocity) {
            a.push_tensor(format!("velocity/{}", e.name), v);
        }
        a.push("state/seed", vec![1], vec![f64::from_bits(self.cfg.seed)]);
        a.push("state/step", vec![1], vec![s.step as f64]);
        a.push("state/optimizer_steps", vec![1], vec![s.optimizer.steps as f64]);
        if let Some(t) = s.thresholds {
            a.push("state/thresholds", vec![3], vec![t.tau_id, t.tau_ood, t.m_ood]);
        }
        a.push("state/window", vec![10], self.window.to_vec());
        let rows: Vec<f64> = self.metrics.iter().flat_map(|r| r.to_array()).collect();
        a.push("state/metrics", vec![self.metrics.len(), 16], rows);
        a
    }

    /// Continues a run from [`Run::checkpoint`] output.
    pub fn resume(cfg: RunConfig, data: OpenSetDataset, archive: &Archive) -> Result<Self> {
        cfg.validate()?;
        check_data(&cfg, &data)?;
        let scalar = |name: &str| -> Result<f64> {
            let e = archive.require(name)?;
            e.data
                .first()
                .copied()
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is empty")))
        };
        let seed = scalar("state/seed")?.to_bits();
        if seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written with seed {seed}, config has seed {}",
                cfg.seed
            )));
        }
        let params = archive.params("param")?;
        if params.dims() != cfg.model_dims() {
            return Err(Error::Checkpoint("checkpoint model dimensions differ from the config".into()));
        }
        let mut optimizer = SgdNesterov::new(&params, cfg.momentum);
        for (e, v) in params.entries().iter().zip(optimizer.velocity.iter_mut()) {
            *v = archive.tensor(&format!("velocity/{}", e.name))?;
        }
        optimizer.steps = scalar("state/optimizer_steps")? as u64;
        let mut ema = EmaShadow::new(&params, cfg.ema_momentum)?;
        ema.params = archive.params("ema")?;
        let thresholds = match archive.get("state/thresholds") {
            Some(e) if e.data.len() == 3 => Some(Thresholds {
                tau_id: e.data[0],
                tau_ood: e.data[1],
                m_ood: e.data[2],
            }),
            Some(_) => return Err(Error::Checkpoint("thresholds entry must hold 3 values".into())),
            None => None,
        };
        let metrics_entry = archive.require("state/metrics")?;
        let metrics = metrics_entry.data.chunks(16).map(MetricsRow::from_array).collect();
        Ok(Self {
            state: TrainState {
                step: scalar("state/step")? as usize,
                params,
                optimizer,
                ema,
                thresholds,
            },
            window: Window::from_slice(&archive.require("state/window")?.data)?,
            history: Vec::new(),
            metrics,
            cfg,
            data,
        })
    }

    pub fn finish(self) -> RunArtifacts {
        RunArtifacts {
            final_eval: final_report(&self.metrics),
            checkpoint: self.checkpoint(),
            cfg: self.cfg,
            state: self.state,
            history: self.history,
            metrics: self.metrics,
        }
    }
}

fn check_data(cfg: &RunConfig, data: &OpenSetDataset) -> Result<()> {
    if data.input_dim() != cfg.data.input_dim || data.num_classes != cfg.data.num_classes {
        return Err(Error::Config(format!(
            "dataset has D={} C={}, config has D={} C={}",
            data.input_dim(),
            data.num_classes,
            cfg.data.input_dim,
            cfg.data.num_classes
        )));
    }
    if data.test_id_x.rows() == 0 || data.test_ood_x.rows() == 0 {
        return Err(Error::Config("evaluation needs nonempty ID and OOD test splits".into()));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub cfg: RunConfig,
    pub state: TrainState,
    pub history: Vec<LossBreakdown>,
    pub metrics: Vec<MetricsRow>,
    pub final_eval: EvalResult,
    pub checkpoint: Archive,
}

impl RunArtifacts {
    pub fn summary_json(&self, wall_time_s: f64) -> serde_json::Value {
        let config: serde_json::Map<String, serde_json::Value> = self
            .cfg
            .resolved()
            .into_iter()
            .map(|(k, v)| (k.to_string(), serde_json::Value::String(v)))
            .collect();
        serde_json::json!({
            "mode": self.cfg.mode.name(),
            "seed": self.cfg.seed,
            "steps": self.state.step,
            "config": config,
            "final": self.final_eval,
            "thresholds": self.state.thresholds(),
            "wall_time_s": wall_time_s,
        })
    }

    /// Writes `metrics.csv`, `summary.json` and `checkpoint.bin` into `dir`.
    pub fn write_to_dir(&self, dir: &Path, wall_time_s: f64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_metrics_csv(std::fs::File::create(dir.join("metrics.csv"))?, &self.metrics)?;
        let summary = serde_json::to_string_pretty(&self.summary_json(wall_time_s))?;
        std::fs::write(dir.join("summary.json"), summary + "\n")?;
        self.checkpoint.save(&dir.join("checkpoint.bin"))?;
        Ok(())
    }
}

/// Generates the configured dataset, trains to completion and, when `out`
/// is given, writes the run's artifacts there.
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<RunArtifacts> {
    let start = Instant::now();
    cfg.validate()?;
    let data = generate_gaussian_openset(cfg.seed, &cfg.data)?;
    let mut run = Run::new(cfg.clone(), data)?;
    run.run_to_end()?;
    let artifacts = run.finish();
    if let Some(dir) = out {
        artifacts.write_to_dir(dir, start.elapsed().as_secs_f64())?;
    }
    Ok(artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "K = 12\nK_p = 4\neval_every = 5\nB = 8\nmu = 2\nhidden_sizes = 8\nfeature_dim = 4\n\
             n_labeled = 8\nn_unlabeled = 40\nn_test_id = 20\nn_test_ood = 20\n",
        )
        .unwrap();
        cfg
    }

    #[test]
    fn schedule_values() {
        let cfg = RunConfig::default();
        assert_eq!(lr_schedule(0, &cfg), 0.03);
        assert_eq!(lr_schedule(cfg.k_pre - 1, &cfg), 0.03);
        assert_eq!(lr_schedule(cfg.k_pre, &cfg), 0.03);
        let end = 0.03 * (7.0 * PI / 16.0).cos();
        assert!((lr_schedule(cfg.k_total, &cfg) - end).abs() < 1e-12);
        let flat = RunConfig { k_pre: cfg.k_total, ..cfg };
        assert_eq!(lr_schedule(flat.k_total, &flat), 0.03);
    }

    #[test]
    fn phase_gating() {
        let cfg = tiny();
        let t = Thresholds {
            tau_id: -3.0,
            tau_ood: -1.0,
            m_ood: 0.0,
        };
        let pre = step_plan(&cfg, 0, None).unwrap();
        assert_eq!((pre.weights.w_p, pre.weights.w_e, pre.weights.w_s), (0.0, 0.0, 5.0));
        assert_eq!(pre.pseudo, PseudoLabelRule::Off);
        assert!(step_plan(&cfg, cfg.k_pre, None).is_err());
        let main = step_plan(&cfg, cfg.k_pre, Some(&t)).unwrap();
        assert_eq!(main.weights.w_p, 1.0);
        assert_eq!(main.pseudo, PseudoLabelRule::Energy { tau_id: -3.0 });
        assert_eq!(main.hinge, Some((-1.0, 0.0)));

        let fm = RunConfig { mode: Mode::FixmatchBaseline, ..tiny() };
        let p = step_plan(&fm, fm.k_pre, None).unwrap();
        assert_eq!((p.weights.w_s, p.weights.w_e, p.weights.w_p), (0.0, 0.0, 1.0));
        assert_eq!(p.pseudo, PseudoLabelRule::Confidence { threshold: 0.95 });
        assert_eq!(p.hinge, None);

        let sup = RunConfig { mode: Mode::Supervised, ..tiny() };
        let p = step_plan(&sup, sup.k_pre + 1, None).unwrap();
        assert_eq!(p.weights, LossWeights { w_w: 5e-4, ..LossWeights::default() });
    }

    #[test]
    fn calibration_is_single_use_and_timed() {
        let cfg = tiny();
        let data = generate_gaussian_openset(0, &cfg.data).unwrap();
        let mut state = TrainState::new(&cfg).unwrap();
        assert!(state.calibrate(&data.labeled_x, &cfg).is_err());
        state.step = cfg.k_pre;
        state.calibrate(&data.labeled_x, &cfg).unwrap();
        assert!(matches!(state.calibrate(&data.labeled_x, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_shadow() {
        let cfg = tiny();
        let data = generate_gaussian_openset(0, &cfg.data).unwrap();
        let run = Run::new(cfg.clone(), data).unwrap();
        let batch = run.batch_for_step(0).unwrap();
        let mut state = TrainState::new(&cfg).unwrap();
        let before = state.clone();
        let plan = StepPlan { lr: 0.0, ..step_plan(&cfg, 0, None).unwrap() };
        training_step(&mut state, &batch, &plan).unwrap();
        assert_eq!(state.params, before.params);
        assert_eq!(state.ema.params, before.ema.params);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn eval_cadence_and_final_row() {
        let cfg = tiny();
        let art = run_experiment(&cfg, None).unwrap();
        let steps: Vec<usize> = art.metrics.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![5, 10, 12]);
        assert!(art.metrics[0].thresholds.is_some());
        assert_eq!(art.history.len(), 12);
    }

    #[test]
    fn pretraining_records_no_pseudo_terms() {
        let cfg = tiny();
        let art = run_experiment(&cfg, None).unwrap();
        for b in &art.history[..cfg.k_pre] {
            assert_eq!((b.l_p, b.l_e, b.inlier_mask_count, b.outlier_mask_count), (0.0, 0.0, 0, 0));
        }
    }

    #[test]
    fn median_of_last_five() {
        let row = |a: f64| MetricsRow {
            step: 0,
            lr: 0.0,
            l_l: 0.0,
            l_p: 0.0,
            l_s: 0.0,
            l_e: 0.0,
            l_w: 0.0,
            total: 0.0,
            inlier_mask_rate: 0.0,
            outlier_mask_rate: 0.0,
            eval: EvalResult {
                acc_id: a,
                auroc_energy: a,
                auroc_confidence: a,
            },
            thresholds: None,
        };
        let rows: Vec<_> = [9.0, 1.0, 5.0, 2.0, 4.0, 3.0].into_iter().map(row).collect();
        assert_eq!(final_report(&rows).acc_id, 3.0);
        assert_eq!(final_report(&rows[..2]).acc_id, 5.0);
    }
}
