//! Two-phase training: source pretraining, then joint adaptation with
//! pseudo labels, anchor alignment and mixup distillation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_batches, EmbeddingSet};
use crate::error::{Error, Result};
use crate::eval::{score_set, MetricsReport};
use crate::losses::{distill_targets, grad_all, Gradients, LossBreakdown, LossWeights, Objective, Sample, StepBatch, Toggles};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelState, Phase};
use crate::numerics::RngStream;
use crate::pseudo::{bank_from_view, decisions_from_view, score_targets, BankRule, CurriculumSchedule, PseudoDecision, PseudoRules, ThresholdRule};
use crate::scalar::Scalar;

const STREAM_BATCHES: u64 = 0xBA7C;
const STREAM_MIXUP: u64 = 0x313D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_phase1: u32,
    pub epochs_phase2: u32,
    pub batch_source: usize,
    pub batch_target: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub beta: f64,
    pub lambda_tf: f64,
    pub lambda_lt_start: f64,
    pub lambda_lt_end: f64,
    pub tau: f64,
    pub real_weight: f64,
    pub seed: u64,
    pub toggles: Toggles,
    pub threshold_rule: ThresholdRule,
    pub bank_rule: BankRule,
    /// Optional two-record anchor file; seeded random anchors otherwise.
    pub anchors: Option<PathBuf>,
    /// Evaluate on the held-out sets after every epoch.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_phase1: 10,
            epochs_phase2: 20,
            batch_source: 32,
            batch_target: 10,
            lr: 1e-3,
            weight_decay: 5e-4,
            lambda: 0.8,
            lambda1: 0.4,
            lambda2: 0.5,
            beta: 0.1,
            lambda_tf: 0.9,
            lambda_lt_start: 0.85,
            lambda_lt_end: 0.70,
            tau: 0.07,
            real_weight: 2.0,
            seed: 42,
            toggles: Toggles::default(),
            threshold_rule: ThresholdRule::Ge,
            bank_rule: BankRule::Paper,
            anchors: None,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("tau", self.tau),
            ("real_weight", self.real_weight),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("weight_decay", self.weight_decay),
            ("lambda", self.lambda),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("beta", self.beta),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_tf", self.lambda_tf),
            ("lambda_lt_start", self.lambda_lt_start),
            ("lambda_lt_end", self.lambda_lt_end),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.lambda_lt_end > self.lambda_lt_start {
            return Err(Error::Config("lambda_lt_end must not exceed lambda_lt_start".into()));
        }
        if self.batch_source == 0 {
            return Err(Error::Config("batch_source must be at least 1".into()));
        }
        if self.epochs_phase2 > 0 && self.batch_target == 0 {
            return Err(Error::Config("batch_target must be at least 1 when joint epochs run".into()));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            beta: self.beta,
            real_weight: self.real_weight,
        }
    }

    pub fn objective(&self, phase: Phase) -> Objective {
        Objective {
            phase,
            weights: self.weights(),
            toggles: self.toggles,
        }
    }

    pub fn schedule(&self) -> CurriculumSchedule {
        CurriculumSchedule::new(self.lambda_lt_start, self.lambda_lt_end, self.epochs_phase2.saturating_sub(1))
    }

    pub fn rules(&self) -> PseudoRules {
        PseudoRules {
            threshold: self.threshold_rule,
            bank: self.bank_rule,
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn total_epochs(&self) -> u32 {
        self.epochs_phase1 + self.epochs_phase2
    }
}

/// Everything the trainer reads. Phase 1 only ever touches `source`.
#[derive(Debug, Clone)]
pub struct TrainData<F> {
    pub source: EmbeddingSet<F>,
    pub target: EmbeddingSet<F>,
    pub eval: Vec<EmbeddingSet<F>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: u32,
    pub step: usize,
    pub phase: Phase,
    pub loss: LossBreakdown<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub mean_auc: f64,
    pub frame_auc: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub phase: Phase,
    /// Step-averaged loss terms.
    pub loss: LossBreakdown<f64>,
    pub steps: usize,
    pub lambda_lt: Option<f64>,
    pub bank_real: usize,
    pub bank_fake: usize,
    pub accepted_real: usize,
    pub accepted_fake: usize,
    pub eval: Option<EvalSnapshot>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn epochs_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("log serializes") + "\n").collect()
    }

    pub fn steps_jsonl(&self) -> String {
        self.steps.iter().map(|e| serde_json::to_string(e).expect("log serializes") + "\n").collect()
    }
}

fn breakdown_f64<F: Scalar>(b: &LossBreakdown<F>) -> LossBreakdown<f64> {
    let c = |v: Option<F>| v.map(|x| x.as_f64());
    LossBreakdown {
        cls_source: c(b.cls_source),
        align_source: c(b.align_source),
        cls_target: c(b.cls_target),
        align_target: c(b.align_target),
        con_target: c(b.con_target),
        distill: c(b.distill),
        total: b.total.as_f64(),
        n_source: b.n_source,
        n_target: b.n_target,
        n_distill: b.n_distill,
    }
}

fn average(steps: &[LossBreakdown<f64>], obj: &Objective) -> LossBreakdown<f64> {
    let n = steps.len().max(1) as f64;
    let avg = |f: fn(&LossBreakdown<f64>) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = steps.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / n)
        }
    };
    let mut out = LossBreakdown {
        cls_source: avg(|b| b.cls_source),
        align_source: avg(|b| b.align_source),
        cls_target: avg(|b| b.cls_target),
        align_target: avg(|b| b.align_target),
        con_target: avg(|b| b.con_target),
        distill: avg(|b| b.distill),
        total: 0.0,
        n_source: steps.iter().map(|b| b.n_source).sum(),
        n_target: steps.iter().map(|b| b.n_target).sum(),
        n_distill: steps.iter().map(|b| b.n_distill).sum(),
    };
    out.total = out.weighted_total(obj);
    out
}

/// Live training state: model plus the RNG streams that drive batching and mixup.
#[derive(Debug, Clone, PartialEq)]
pub struct Session<F> {
    pub state: ModelState<F>,
    pub batches: RngStream,
    pub mixup: RngStream,
    pub config_hash: String,
}

impl<F: Scalar> Session<F> {
    pub fn new(cfg: &TrainConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let (lr, wd, tau) = (F::lit(cfg.lr), F::lit(cfg.weight_decay), F::lit(cfg.tau));
        let state = match &cfg.anchors {
            Some(path) => {
                let (real, fake) = crate::model::load_anchor_file::<F>(path)?;
                ModelState::with_anchors(dim, tau, lr, wd, &real, &fake)?
            }
            None => ModelState::new(dim, tau, lr, wd, cfg.seed)?,
        };
        Ok(Self {
            state,
            batches: RngStream::derive(cfg.seed, STREAM_BATCHES),
            mixup: RngStream::derive(cfg.seed, STREAM_MIXUP),
            config_hash: cfg.hash(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            state: self.state.clone(),
            config_hash: self.config_hash.clone(),
            streams: vec![self.batches.clone(), self.mixup.clone()],
        }
    }

    pub fn from_checkpoint(cfg: &TrainConfig, ck: Checkpoint<F>) -> Result<Self> {
        cfg.validate()?;
        if ck.config_hash != cfg.hash() {
            return Err(Error::Config("checkpoint was written under a different configuration".into()));
        }
        let [batches, mixup]: [RngStream; 2] = ck
            .streams
            .try_into()
            .map_err(|_| Error::Format("checkpoint must hold exactly two RNG streams".into()))?;
        Ok(Self {
            state: ck.state,
            batches,
            mixup,
            config_hash: ck.config_hash,
        })
    }

    fn apply(&mut self, g: &Gradients<F>) -> Result<()> {
        let s = &mut self.state;
        s.optim.adapter.step(&mut s.adapter, &g.adapter)?;
        s.optim.head.step(&mut s.head, &g.head)?;
        if g.anchors_touched() {
            s.optim.anchors.step(&mut s.anchors, &g.anchors)?;
            s.renormalize_anchors()?;
        }
        if !s.is_finite() {
            return Err(Error::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }
}

fn check_dims<F: Scalar>(state: &ModelState<F>, set: &EmbeddingSet<F>) -> Result<()> {
    if set.dim() != state.dim && !set.is_empty() {
        return Err(Error::Shape {
            expected: state.dim,
            actual: set.dim(),
        });
    }
    Ok(())
}

fn labeled<'a, F: Scalar>(set: &'a EmbeddingSet<F>, idx: &[usize]) -> Result<Vec<Sample<'a, F>>> {
    idx.iter()
        .map(|&i| {
            let r = &set.records()[i];
            let class = r.label.class().ok_or_else(|| Error::data(&r.id, "source record has no label"))?;
            Ok(Sample { feature: &r.feature, class })
        })
        .collect()
}

/// Held-out metrics of the current model.
pub fn evaluate<F: Scalar>(state: &ModelState<F>, eval: &[EmbeddingSet<F>], cfg: &TrainConfig) -> Result<MetricsReport> {
    let mut samples = Vec::new();
    for set in eval {
        samples.extend(score_set(state, set)?);
    }
    MetricsReport::from_samples(&samples, &cfg.hash(), cfg.seed, F::NAME)
}

fn snapshot(report: &MetricsReport) -> EvalSnapshot {
    EvalSnapshot {
        mean_auc: report.mean_auc,
        frame_auc: report.datasets.iter().map(|d| (d.dataset.clone(), d.frame_auc)).collect(),
    }
}

/// One pretraining epoch over the labeled source set.
pub fn run_phase1_epoch<F: Scalar>(session: &mut Session<F>, cfg: &TrainConfig, source: &EmbeddingSet<F>, log: &mut TrainLog) -> Result<EpochLog> {
    if source.is_empty() {
        return Err(Error::Dataset("source set is empty".into()));
    }
    check_dims(&session.state, source)?;
    let obj = cfg.objective(Phase::Pretrain);
    let empty = EmbeddingSet::empty(source.dim(), "")?;
    let batches = make_batches(source, &empty, &mut session.batches, cfg.batch_source, 0)?;
    let epoch = session.state.epoch;
    let mut losses = Vec::with_capacity(batches.len());
    for (step, b) in batches.iter().enumerate() {
        let batch = StepBatch {
            source: labeled(source, &b.source)?,
            target: Vec::new(),
            distill_targets: None,
        };
        let (lb, g) = grad_all(&session.state, &batch, &obj)?;
        session.apply(&g)?;
        let lb = breakdown_f64(&lb);
        log.steps.push(StepLog {
            epoch,
            step,
            phase: Phase::Pretrain,
            loss: lb.clone(),
        });
        losses.push(lb);
    }
    session.state.phase = Phase::Pretrain;
    session.state.epoch += 1;
    Ok(EpochLog {
        epoch,
        phase: Phase::Pretrain,
        loss: average(&losses, &obj),
        steps: batches.len(),
        lambda_lt: None,
        bank_real: 0,
        bank_fake: 0,
        accepted_real: 0,
        accepted_fake: 0,
        eval: None,
        warnings: Vec::new(),
    })
}

/// Pretraining only: `epochs_phase1` epochs on the source objective.
pub fn run_phase1<F: Scalar>(cfg: &TrainConfig, source: &EmbeddingSet<F>) -> Result<(Session<F>, TrainLog)> {
    if source.is_empty() {
        return Err(Error::Dataset("source set is empty".into()));
    }
    let mut session = Session::new(cfg, source.dim())?;
    let mut log = TrainLog::default();
    for _ in 0..cfg.epochs_phase1 {
        let e = run_phase1_epoch(&mut session, cfg, source, &mut log)?;
        log.epochs.push(e);
    }
    Ok((session, log))
}

/// Bank, threshold and decisions for joint epoch `t` under the current model.
pub fn pseudo_round<F: Scalar>(
    state: &ModelState<F>,
    cfg: &TrainConfig,
    target: &EmbeddingSet<F>,
    t: u32,
) -> Result<(f64, (usize, usize), Vec<PseudoDecision<F>>)> {
    let view = score_targets(state, target)?;
    let bank = bank_from_view(&view, cfg.lambda_tf, state.epoch);
    let lambda_lt = cfg.schedule().threshold_at(t)?;
    Ok((lambda_lt, bank.sizes(), decisions_from_view(&view, &bank, lambda_lt, cfg.rules())))
}

/// One joint epoch; `t` is the zero-based joint epoch index.
pub fn run_phase2_epoch<F: Scalar>(
    session: &mut Session<F>,
    cfg: &TrainConfig,
    source: &EmbeddingSet<F>,
    target: &EmbeddingSet<F>,
    t: u32,
    log: &mut TrainLog,
) -> Result<EpochLog> {
    if source.is_empty() {
        return Err(Error::Dataset("source set is empty".into()));
    }
    if target.is_empty() {
        return Err(Error::Dataset("target set is empty".into()));
    }
    check_dims(&session.state, source)?;
    check_dims(&session.state, target)?;
    let obj = cfg.objective(Phase::Joint);
    let epoch = session.state.epoch;
    let mut warnings = Vec::new();
    let mut pseudo: Vec<Option<crate::data::Class>> = vec![None; target.len()];
    let (mut lambda_lt, mut bank_sizes) = (None, (0, 0));
    if cfg.toggles.cpg {
        let (lt, sizes, decisions) = pseudo_round(&session.state, cfg, target, t)?;
        lambda_lt = Some(lt);
        bank_sizes = sizes;
        for (slot, d) in pseudo.iter_mut().zip(&decisions) {
            if d.accepted {
                *slot = Some(d.clip_label);
            }
        }
        if pseudo.iter().all(Option::is_none) {
            warnings.push(format!("epoch {epoch}: no pseudo label accepted"));
        }
    }
    let accepted_real = pseudo.iter().filter(|p| **p == Some(crate::data::Class::Real)).count();
    let accepted_fake = pseudo.iter().filter(|p| **p == Some(crate::data::Class::Fake)).count();

    let batches = make_batches(source, target, &mut session.batches, cfg.batch_source, cfg.batch_target)?;
    let mut losses = Vec::with_capacity(batches.len());
    for (step, b) in batches.iter().enumerate() {
        let src = labeled(source, &b.source)?;
        let tgt: Vec<Sample<'_, F>> = b
            .target
            .iter()
            .filter_map(|&i| pseudo[i].map(|class| Sample { feature: &target.records()[i].feature, class }))
            .collect();
        let distill = if cfg.toggles.cd {
            let st = &session.state;
            let zs = src.iter().map(|s| st.adapter_forward(s.feature)).collect::<Result<Vec<_>>>()?;
            let zt = b
                .target
                .iter()
                .map(|&i| {
                    let r = &target.records()[i];
                    st.embed(&r.id, &r.feature)
                })
                .collect::<Result<Vec<_>>>()?;
            distill_targets(&zs, &zt, &mut session.mixup)
        } else {
            None
        };
        let batch = StepBatch {
            source: src,
            target: tgt,
            distill_targets: distill,
        };
        let (lb, g) = grad_all(&session.state, &batch, &obj)?;
        session.apply(&g)?;
        let lb = breakdown_f64(&lb);
        log.steps.push(StepLog {
            epoch,
            step,
            phase: Phase::Joint,
            loss: lb.clone(),
        });
        losses.push(lb);
    }
    session.state.phase = Phase::Joint;
    session.state.epoch += 1;
    Ok(EpochLog {
        epoch,
        phase: Phase::Joint,
        loss: average(&losses, &obj),
        steps: batches.len(),
        lambda_lt,
        bank_real: bank_sizes.0,
        bank_fake: bank_sizes.1,
        accepted_real,
        accepted_fake,
        eval: None,
        warnings,
    })
}

/// Where `train` keeps its files, and whether to resume from them.
#[derive(Debug, Clone, Default)]
pub struct RunDir {
    pub dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many completed epochs (for interrupted runs).
    pub stop_after: Option<u32>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.dpgc";
pub const EPOCH_LOG_FILE: &str = "train_log.jsonl";
pub const STEP_LOG_FILE: &str = "steps.jsonl";

#[derive(Debug, Clone)]
pub struct TrainOutcome<F> {
    pub session: Session<F>,
    pub log: TrainLog,
    pub report: MetricsReport,
    pub completed: bool,
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Full pipeline. With a run directory, a checkpoint and log lines are
/// written after every epoch; `resume` continues from the stored checkpoint.
pub fn train<F: Scalar>(cfg: &TrainConfig, data: &TrainData<F>, run: &RunDir) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let ck_path = run.dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let mut session = match (&ck_path, run.resume) {
        (Some(p), true) if p.exists() => Session::from_checkpoint(cfg, load_checkpoint(p)?)?,
        _ => {
            if let Some(d) = &run.dir {
                fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                for f in [EPOCH_LOG_FILE, STEP_LOG_FILE] {
                    let p = d.join(f);
                    if p.exists() {
                        fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
                    }
                }
            }
            Session::new(cfg, data.source.dim())?
        }
    };
    let mut log = TrainLog::default();
    let total = cfg.total_epochs();
    while session.state.epoch < total {
        if run.stop_after.is_some_and(|n| session.state.epoch >= n) {
            break;
        }
        let done = session.state.epoch;
        let mut epoch_log = TrainLog::default();
        let mut e = if done < cfg.epochs_phase1 {
            run_phase1_epoch(&mut session, cfg, &data.source, &mut epoch_log)?
        } else {
            run_phase2_epoch(&mut session, cfg, &data.source, &data.target, done - cfg.epochs_phase1, &mut epoch_log)?
        };
        if cfg.eval_every_epoch && !data.eval.is_empty() {
            e.eval = Some(snapshot(&evaluate(&session.state, &data.eval, cfg)?));
        }
        epoch_log.epochs.push(e);
        if let (Some(d), Some(p)) = (&run.dir, &ck_path) {
            append(&d.join(EPOCH_LOG_FILE), &epoch_log.epochs_jsonl())?;
            append(&d.join(STEP_LOG_FILE), &epoch_log.steps_jsonl())?;
            save_checkpoint(&session.checkpoint(), p)?;
        }
        log.epochs.extend(epoch_log.epochs);
        log.steps.extend(epoch_log.steps);
    }
    let report = evaluate(&session.state, &data.eval, cfg)?;
    Ok(TrainOutcome {
        completed: session.state.epoch >= total,
        session,
        log,
        report,
    })
}
