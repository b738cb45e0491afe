//! Ranking metrics and report emission.
//!
//! Conventions: fake is the positive class and higher scores mean "more
//! fake". AUC counts ties as half. AP ranks by descending score with ties
//! broken by ascending id. EER sweeps every distinct score as a threshold
//! (predict fake when `score >= threshold`), keeps the lowest threshold that
//! minimizes `|FPR - FNR|` and returns `(FPR + FNR) / 2` there. Video scores
//! are the mean of their frame scores.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Class, EmbeddingSet};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub video_id: String,
    pub dataset_tag: String,
    pub label: Class,
    pub fake_score: f64,
}

fn class_counts(samples: &[ScoredSample]) -> (u64, u64) {
    let nf = samples.iter().filter(|s| s.label == Class::Fake).count() as u64;
    (samples.len() as u64 - nf, nf)
}

fn check_scores(samples: &[ScoredSample]) -> Result<()> {
    match samples.iter().find(|s| !s.fake_score.is_finite()) {
        Some(s) => Err(Error::Metric(format!("sample `{}` has a non-finite score", s.id))),
        None => Ok(()),
    }
}

fn both_classes(samples: &[ScoredSample], metric: &str) -> Result<(u64, u64)> {
    check_scores(samples)?;
    let (nr, nf) = class_counts(samples);
    if nr == 0 || nf == 0 {
        return Err(Error::Metric(format!("{metric} needs both classes, got {nr} real and {nf} fake")));
    }
    Ok((nr, nf))
}

fn ascending(samples: &[ScoredSample]) -> Vec<(f64, Class)> {
    let mut v: Vec<(f64, Class)> = samples.iter().map(|s| (s.fake_score, s.label)).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// Groups of equal scores in ascending order, as `(score, reals, fakes)`.
fn tie_groups(sorted: &[(f64, Class)]) -> Vec<(f64, u64, u64)> {
    let mut out: Vec<(f64, u64, u64)> = Vec::new();
    for &(s, c) in sorted {
        match out.last_mut() {
            Some(g) if g.0 == s => {}
            _ => out.push((s, 0, 0)),
        }
        let g = out.last_mut().expect("group pushed above");
        match c {
            Class::Real => g.1 += 1,
            Class::Fake => g.2 += 1,
        }
    }
    out
}

/// Mann-Whitney AUC.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let (nr, nf) = both_classes(samples, "AUC")?;
    // Twice the count of (fake, real) pairs won by the fake, ties counting one.
    let mut wins2: u128 = 0;
    let mut reals_below: u128 = 0;
    for (_, r, f) in tie_groups(&ascending(samples)) {
        wins2 += f as u128 * (2 * reals_below + r as u128);
        reals_below += r as u128;
    }
    Ok(wins2 as f64 / (2.0 * nr as f64 * nf as f64))
}

/// Average precision of the fake class.
pub fn ap(samples: &[ScoredSample]) -> Result<f64> {
    check_scores(samples)?;
    let (_, nf) = class_counts(samples);
    if nf == 0 {
        return Err(Error::Metric("AP needs at least one fake sample".into()));
    }
    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| b.fake_score.total_cmp(&a.fake_score).then_with(|| a.id.cmp(&b.id)));
    let mut hits = 0u64;
    let mut sum = 0.0;
    for (k, s) in order.iter().enumerate() {
        if s.label == Class::Fake {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / nf as f64)
}

/// Equal error rate as a fraction.
pub fn eer(samples: &[ScoredSample]) -> Result<f64> {
    let (nr, nf) = both_classes(samples, "EER")?;
    let mut fp = nr;
    let mut fn_ = 0u64;
    let mut best: Option<(u128, u64, u64)> = None;
    for (_, r, f) in tie_groups(&ascending(samples)) {
        // Threshold at this group: everything from here up is called fake.
        let gap = (fp as u128 * nf as u128).abs_diff(fn_ as u128 * nr as u128);
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, fp, fn_));
        }
        fp -= r;
        fn_ += f;
    }
    let (_, fp, fn_) = best.expect("nonempty input");
    Ok((fp as f64 / nr as f64 + fn_ as f64 / nf as f64) / 2.0)
}

/// One sample per video, ordered by video id, scored by the mean frame score.
pub fn video_pool(samples: &[ScoredSample]) -> Result<Vec<ScoredSample>> {
    let mut groups: BTreeMap<&str, Vec<&ScoredSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(&s.video_id).or_default().push(s);
    }
    groups
        .into_iter()
        .map(|(vid, frames)| {
            let first = frames[0];
            if let Some(bad) = frames.iter().find(|f| f.label != first.label) {
                return Err(Error::data(&bad.id, format!("label differs from other frames of video `{vid}`")));
            }
            let mean = frames.iter().map(|f| f.fake_score).sum::<f64>() / frames.len() as f64;
            Ok(ScoredSample {
                id: vid.to_string(),
                video_id: vid.to_string(),
                dataset_tag: first.dataset_tag.clone(),
                label: first.label,
                fake_score: mean,
            })
        })
        .collect()
}

/// Scores every labeled record of `set` with the model's fake probability.
pub fn score_set<F: Scalar>(state: &ModelState<F>, set: &EmbeddingSet<F>) -> Result<Vec<ScoredSample>> {
    set.records()
        .par_iter()
        .map(|r| {
            let label = r
                .label
                .class()
                .ok_or_else(|| Error::data(&r.id, "evaluation record has no label"))?;
            let p = state.predict(&r.feature).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("sample `{}`: {m}", r.id)),
                other => other,
            })?;
            Ok(ScoredSample {
                id: r.id.clone(),
                video_id: r.video_id.clone(),
                dataset_tag: r.dataset_tag.clone(),
                label,
                fake_score: p.fake_score.as_f64(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub frame_auc: f64,
    pub video_auc: f64,
    pub ap: f64,
    pub eer: f64,
    pub n_frames: usize,
    pub n_videos: usize,
}

impl DatasetMetrics {
    pub fn compute(dataset: impl Into<String>, samples: &[ScoredSample]) -> Result<Self> {
        let videos = video_pool(samples)?;
        Ok(Self {
            dataset: dataset.into(),
            frame_auc: auc(samples)?,
            video_auc: auc(&videos)?,
            ap: ap(samples)?,
            eer: eer(samples)?,
            n_frames: samples.len(),
            n_videos: videos.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub datasets: Vec<DatasetMetrics>,
    pub overall: DatasetMetrics,
    /// Mean frame AUC over the per-dataset rows.
    pub mean_auc: f64,
    pub config_hash: String,
    pub seed: u64,
    pub rng: String,
    pub scalar: String,
    pub video_pooling: String,
}

impl MetricsReport {
    /// Per-tag rows in tag order plus an overall row. Samples with an empty
    /// tag only contribute to the overall row.
    pub fn from_samples(samples: &[ScoredSample], config_hash: &str, seed: u64, scalar: &str) -> Result<Self> {
        let mut tags: BTreeMap<&str, Vec<ScoredSample>> = BTreeMap::new();
        for s in samples.iter().filter(|s| !s.dataset_tag.is_empty()) {
            tags.entry(&s.dataset_tag).or_default().push(s.clone());
        }
        let datasets: Vec<DatasetMetrics> = tags
            .par_iter()
            .map(|(tag, rows)| DatasetMetrics::compute(*tag, rows))
            .collect::<Result<_>>()?;
        let overall = DatasetMetrics::compute("overall", samples)?;
        let mean_auc = if datasets.is_empty() {
            overall.frame_auc
        } else {
            datasets.iter().map(|d| d.frame_auc).sum::<f64>() / datasets.len() as f64
        };
        Ok(Self {
            datasets,
            overall,
            mean_auc,
            config_hash: config_hash.to_string(),
            seed,
            rng: crate::numerics::RNG_ALGORITHM.to_string(),
            scalar: scalar.to_string(),
            video_pooling: "mean".to_string(),
        })
    }

    pub fn dataset(&self, tag: &str) -> Option<&DatasetMetrics> {
        self.datasets.iter().find(|d| d.dataset == tag)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(["dataset", "frame_auc", "video_auc", "ap", "eer_pct"]).map_err(io)?;
        for d in self.datasets.iter().chain(std::iter::once(&self.overall)) {
            w.write_record([
                d.dataset.clone(),
                format!("{:.6}", d.frame_auc),
                format!("{:.6}", d.video_auc),
                format!("{:.6}", d.ap),
                format!("{:.4}", d.eer * 100.0),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// Writes `report.json` and `report.csv` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::data::format::write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    crate::data::format::write_atomic(&dir.join("report.csv"), report.to_csv()?.as_bytes())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<MetricsReport> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
