//! Confidence-filtered feature banks, dual-verified pseudo labels, and the
//! acceptance-threshold curriculum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Class, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::{ModelState, Prediction};
use crate::scalar::Scalar;

/// Distance above which a sample is considered far from every fake entry.
pub const FAKE_DISTANCE_CUTOFF: f64 = 0.5;

/// How the classifier confidence is compared with the curriculum threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdRule {
    /// `confidence >= threshold`
    #[default]
    Ge,
    /// `confidence <= threshold`
    PaperLe,
}

impl ThresholdRule {
    pub fn admits<F: Scalar>(self, confidence: F, threshold: F) -> bool {
        match self {
            ThresholdRule::Ge => confidence >= threshold,
            ThresholdRule::PaperLe => confidence <= threshold,
        }
    }
}

/// How the bank assigns a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankRule {
    /// Real iff the nearest fake entry is farther than the cutoff.
    #[default]
    Paper,
    /// Whichever sub-bank holds the nearer entry; ties go to fake.
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankEntry<F> {
    pub id: String,
    pub z: Vec<F>,
    pub confidence: F,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank<F> {
    pub real: Vec<BankEntry<F>>,
    pub fake: Vec<BankEntry<F>>,
    pub built_at_epoch: u32,
    pub lambda_tf: f64,
}

impl<F: Scalar> FeatureBank<F> {
    pub fn entries(&self, class: Class) -> &[BankEntry<F>] {
        match class {
            Class::Real => &self.real,
            Class::Fake => &self.fake,
        }
    }

    pub fn sizes(&self) -> (usize, usize) {
        (self.real.len(), self.fake.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BankVerdict<F> {
    Label { label: Class, d_fake: F, d_real: Option<F> },
    Abstain { d_real: Option<F> },
}

/// One audited pseudo-label decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoDecision<F> {
    pub id: String,
    pub clip_label: Class,
    pub clip_confidence: F,
    pub bank_label: Option<Class>,
    pub d_fake: Option<F>,
    pub d_real: Option<F>,
    pub threshold: F,
    pub accepted: bool,
}

/// Linear decay of the acceptance threshold over the joint-training epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumSchedule {
    pub start: f64,
    pub end: f64,
    /// Index of the last epoch; `threshold_at(total)` is `end`.
    pub total: u32,
}

impl CurriculumSchedule {
    pub fn new(start: f64, end: f64, total: u32) -> Self {
        Self { start, end, total }
    }

    pub fn threshold_at(&self, t: u32) -> Result<f64> {
        if t > self.total {
            return Err(Error::Config(format!("curriculum epoch {t} exceeds last epoch {}", self.total)));
        }
        if t == 0 || self.total == 0 {
            return Ok(self.start);
        }
        if t == self.total {
            return Ok(self.end);
        }
        Ok(self.start + (self.end - self.start) * (t as f64 / self.total as f64))
    }
}

/// Adapter outputs and predictions for a target set under one model snapshot.
#[derive(Debug, Clone)]
pub struct TargetView<F> {
    pub ids: Vec<String>,
    pub z: Vec<Vec<F>>,
    pub predictions: Vec<Prediction<F>>,
}

pub fn score_targets<F: Scalar>(state: &ModelState<F>, set: &EmbeddingSet<F>) -> Result<TargetView<F>> {
    let rows: Vec<(Vec<F>, Prediction<F>)> = set
        .records()
        .par_iter()
        .map(|r| {
            let z = state.embed(&r.id, &r.feature)?;
            let p = state.predict_z(&z)?;
            Ok((z, p))
        })
        .collect::<Result<_>>()?;
    let (z, predictions) = rows.into_iter().unzip();
    Ok(TargetView {
        ids: set.records().iter().map(|r| r.id.clone()).collect(),
        z,
        predictions,
    })
}

pub fn bank_from_view<F: Scalar>(view: &TargetView<F>, lambda_tf: f64, epoch: u32) -> FeatureBank<F> {
    let tf = F::lit(lambda_tf);
    let mut bank = FeatureBank {
        real: Vec::new(),
        fake: Vec::new(),
        built_at_epoch: epoch,
        lambda_tf,
    };
    for ((id, z), p) in view.ids.iter().zip(&view.z).zip(&view.predictions) {
        if p.confidence >= tf {
            let entry = BankEntry {
                id: id.clone(),
                z: z.clone(),
                confidence: p.confidence,
            };
            match p.label {
                Class::Real => bank.real.push(entry),
                Class::Fake => bank.fake.push(entry),
            }
        }
    }
    bank
}

/// Retains target samples whose confidence reaches `lambda_tf`, split by predicted class.
pub fn build_bank<F: Scalar>(state: &ModelState<F>, target: &EmbeddingSet<F>, lambda_tf: f64, epoch: u32) -> Result<FeatureBank<F>> {
    if target.is_empty() {
        return Err(Error::Dataset("cannot build a feature bank from an empty target set".into()));
    }
    Ok(bank_from_view(&score_targets(state, target)?, lambda_tf, epoch))
}

/// Smallest Euclidean distance from `z` to any entry; `None` for no entries.
pub fn min_distance<F: Scalar>(z: &[F], entries: &[BankEntry<F>]) -> Option<F> {
    let mut best: Option<F> = None;
    for e in entries {
        let mut acc = F::zero();
        let mut abandoned = false;
        for (&a, &b) in z.iter().zip(&e.z) {
            let d = a - b;
            acc += d * d;
            if let Some(bst) = best {
                if acc > bst {
                    abandoned = true;
                    break;
                }
            }
        }
        if !abandoned && best.is_none_or(|b| acc < b) {
            best = Some(acc);
        }
    }
    best.map(|b| b.sqrt())
}

pub fn bank_label<F: Scalar>(z: &[F], bank: &FeatureBank<F>, rule: BankRule) -> BankVerdict<F> {
    let d_real = min_distance(z, &bank.real);
    let Some(d_fake) = min_distance(z, &bank.fake) else {
        return BankVerdict::Abstain { d_real };
    };
    let label = match rule {
        BankRule::Paper => {
            if d_fake > F::lit(FAKE_DISTANCE_CUTOFF) {
                Class::Real
            } else {
                Class::Fake
            }
        }
        BankRule::Nearest => match d_real {
            None => return BankVerdict::Abstain { d_real },
            Some(r) if r < d_fake => Class::Real,
            Some(_) => Class::Fake,
        },
    };
    BankVerdict::Label { label, d_fake, d_real }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PseudoRules {
    pub threshold: ThresholdRule,
    pub bank: BankRule,
}

pub fn decisions_from_view<F: Scalar>(view: &TargetView<F>, bank: &FeatureBank<F>, lambda_lt: f64, rules: PseudoRules) -> Vec<PseudoDecision<F>> {
    let thr = F::lit(lambda_lt);
    let both = !bank.real.is_empty() && !bank.fake.is_empty();
    (0..view.ids.len())
        .into_par_iter()
        .map(|i| {
            let p = view.predictions[i];
            let (bank_label, d_fake, d_real) = match bank_label(&view.z[i], bank, rules.bank) {
                BankVerdict::Label { label, d_fake, d_real } => (Some(label), Some(d_fake), d_real),
                BankVerdict::Abstain { d_real } => (None, None, d_real),
            };
            let accepted = both && bank_label == Some(p.label) && rules.threshold.admits(p.confidence, thr);
            PseudoDecision {
                id: view.ids[i].clone(),
                clip_label: p.label,
                clip_confidence: p.confidence,
                bank_label,
                d_fake,
                d_real,
                threshold: thr,
                accepted,
            }
        })
        .collect()
}

/// One decision per target sample, in set order.
///
/// Acceptance needs classifier/bank agreement, a confidence passing the
/// threshold rule, and two nonempty sub-banks.
pub fn generate_pseudo_labels<F: Scalar>(
    state: &ModelState<F>,
    target: &EmbeddingSet<F>,
    bank: &FeatureBank<F>,
    lambda_lt: f64,
    rules: PseudoRules,
) -> Result<Vec<PseudoDecision<F>>> {
    Ok(decisions_from_view(&score_targets(state, target)?, bank, lambda_lt, rules))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, z: Vec<f64>) -> BankEntry<f64> {
        BankEntry {
            id: id.into(),
            z,
            confidence: 0.95,
        }
    }

    #[test]
    fn curriculum_endpoints() {
        let s = CurriculumSchedule::new(0.85, 0.70, 10);
        assert_eq!(s.threshold_at(0).unwrap(), 0.85);
        assert_eq!(s.threshold_at(10).unwrap(), 0.70);
        assert!((s.threshold_at(5).unwrap() - 0.775).abs() < 1e-15);
        assert!(s.threshold_at(11).is_err());
        let mut prev = f64::INFINITY;
        for t in 0..=10 {
            let v = s.threshold_at(t).unwrap();
            assert!(v <= prev);
            prev = v;
        }
        assert_eq!(CurriculumSchedule::new(0.85, 0.70, 0).threshold_at(0).unwrap(), 0.85);
    }

    #[test]
    fn cutoff_examples() {
        let bank = FeatureBank {
            real: vec![entry("r", vec![0.0, 1.0])],
            fake: vec![entry("f", vec![1.0, 0.0])],
            built_at_epoch: 0,
            lambda_tf: 0.9,
        };
        let far = [1.0, 0.6];
        let near = [1.0, 0.3];
        let verdict = |z: &[f64]| match bank_label(z, &bank, BankRule::Paper) {
            BankVerdict::Label { label, .. } => label,
            _ => panic!(),
        };
        assert_eq!(verdict(&far), Class::Real);
        assert_eq!(verdict(&near), Class::Fake);
        assert_eq!(verdict(&[1.0, 0.0]), Class::Fake);
        let empty = FeatureBank::<f64> {
            fake: vec![],
            ..bank.clone()
        };
        assert!(matches!(bank_label(&far, &empty, BankRule::Paper), BankVerdict::Abstain { .. }));
        assert!(matches!(bank_label(&[0.1, 0.9], &bank, BankRule::Nearest), BankVerdict::Label { label: Class::Real, .. }));
    }

    #[test]
    fn early_abandon_keeps_exact_minimum() {
        let mut rng = crate::numerics::RngStream::from_seed(3);
        let entries: Vec<_> = (0..50).map(|i| entry(&i.to_string(), rng.gaussian_vec(16))).collect();
        for _ in 0..50 {
            let z: Vec<f64> = rng.gaussian_vec(16);
            let brute = entries
                .iter()
                .map(|e| z.iter().zip(&e.z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt();
            assert_eq!(min_distance(&z, &entries).unwrap().to_bits(), brute.to_bits());
        }
    }

    #[test]
    fn threshold_rules() {
        assert!(ThresholdRule::Ge.admits(0.90, 0.85));
        assert!(!ThresholdRule::Ge.admits(0.80, 0.85));
        assert!(ThresholdRule::PaperLe.admits(0.80, 0.85));
    }

    #[test]
    fn bank_filters_by_confidence() {
        let mk = |c: f64, label| Prediction {
            label,
            confidence: c,
            fake_score: if label == Class::Fake { c } else { 1.0 - c },
        };
        let view = TargetView {
            ids: vec!["a".into(), "b".into(), "c".into()],
            z: vec![vec![1.0, 0.0]; 3],
            predictions: vec![mk(0.95, Class::Fake), mk(0.91, Class::Real), mk(0.89, Class::Fake)],
        };
        let bank = bank_from_view(&view, 0.9, 2);
        assert_eq!(bank.sizes(), (1, 1));
        assert_eq!(bank.fake[0].id, "a");
        assert_eq!(bank.real[0].id, "b");
        assert_eq!(bank_from_view(&view, 0.99, 2).sizes(), (0, 0));
    }

    #[test]
    fn decision_examples() {
        let bank = FeatureBank {
            real: vec![entry("r", vec![0.0, 1.0])],
            fake: vec![entry("f", vec![1.0, 0.0])],
            built_at_epoch: 0,
            lambda_tf: 0.9,
        };
        let pred = |c: f64, label| Prediction {
            label,
            confidence: c,
            fake_score: 0.0,
        };
        let view = TargetView {
            ids: vec!["x".into(), "y".into(), "w".into()],
            z: vec![vec![1.0, 0.1], vec![1.0, 0.1], vec![0.0, 1.0]],
            predictions: vec![pred(0.90, Class::Fake), pred(0.80, Class::Fake), pred(0.95, Class::Fake)],
        };
        let d = decisions_from_view(&view, &bank, 0.85, PseudoRules::default());
        assert!(d[0].accepted);
        assert!(!d[1].accepted);
        assert_eq!(d[2].bank_label, Some(Class::Real));
        assert!(!d[2].accepted);
        let line = serde_json::to_string(&d[0]).unwrap();
        assert!(line.contains("\"clip_label\":\"fake\""));
    }
}
