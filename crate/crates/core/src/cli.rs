//! `dpg` command-line front end.
//!
//! Every command resolves one [`ExperimentConfig`] from defaults, an optional
//! TOML file and flag overrides, writes it to `<out>/config.resolved.toml`,
//! and then runs. Failures are reported on stderr as one JSON object.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{read_embeddings, read_raw, synth_generate, write_embeddings, EmbeddingSet, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::emit_report;
use crate::losses::Toggles;
use crate::model::load_checkpoint;
use crate::numerics::norm;
use crate::pseudo::{BankRule, ThresholdRule};
use crate::trainer::{evaluate, pseudo_round, train, RunDir, Session, TrainConfig, TrainData, CHECKPOINT_FILE};

pub const CONFIG_ECHO: &str = "config.resolved.toml";

/// Input files. Without a source file the synthetic benchmark is generated
/// in memory from the `[synth]` section.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub eval: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataPaths,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Parser)]
#[command(name = "dpg", version, about = "Dual-path domain adaptation over precomputed embeddings")]
pub struct Cli {
    /// TOML file with [data], [synth] and [train] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides both the synthetic and the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for every file a command writes.
    #[arg(long, global = true, default_value = "dpg-out")]
    pub out: PathBuf,
    /// Text-guided alignment terms.
    #[arg(long = "toggle-tca", global = true)]
    pub toggle_tca: Option<bool>,
    /// Target pseudo labels.
    #[arg(long = "toggle-cpg", global = true)]
    pub toggle_cpg: Option<bool>,
    /// Cross-domain distillation.
    #[arg(long = "toggle-cd", global = true)]
    pub toggle_cd: Option<bool>,
    /// `ge` or `paper-le`.
    #[arg(long = "threshold-rule", global = true, value_parser = parse_threshold_rule)]
    pub threshold_rule: Option<ThresholdRule>,
    /// `paper` or `nearest`.
    #[arg(long = "bank-rule", global = true, value_parser = parse_bank_rule)]
    pub bank_rule: Option<BankRule>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic benchmark as DPGE files.
    Synth,
    /// Train both phases and write checkpoint, logs and report.
    Train {
        /// Continue from `<out>/checkpoint.dpgc` if present.
        #[arg(long)]
        resume: bool,
        /// Stop once this many epochs have completed.
        #[arg(long)]
        stop_after: Option<u32>,
    },
    /// Score the evaluation sets with a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print one JSON line per pseudo-label decision.
    PseudoInspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Joint epoch index selecting the curriculum threshold.
        #[arg(long, default_value_t = 0)]
        epoch: u32,
    },
    /// Check DPGE files; exits 1 on any violation.
    Validate { paths: Vec<PathBuf> },
    /// Train every on/off combination of the three components.
    Ablate,
}

fn parse_threshold_rule(s: &str) -> std::result::Result<ThresholdRule, String> {
    match s {
        "ge" => Ok(ThresholdRule::Ge),
        "paper-le" => Ok(ThresholdRule::PaperLe),
        _ => Err(format!("expected `ge` or `paper-le`, got `{s}`")),
    }
}

fn parse_bank_rule(s: &str) -> std::result::Result<BankRule, String> {
    match s {
        "paper" => Ok(BankRule::Paper),
        "nearest" => Ok(BankRule::Nearest),
        _ => Err(format!("expected `paper` or `nearest`, got `{s}`")),
    }
}

impl Cli {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
        }
        let t = &mut cfg.train.toggles;
        t.tca = self.toggle_tca.unwrap_or(t.tca);
        t.cpg = self.toggle_cpg.unwrap_or(t.cpg);
        t.cd = self.toggle_cd.unwrap_or(t.cd);
        if let Some(r) = self.threshold_rule {
            cfg.train.threshold_rule = r;
        }
        if let Some(r) = self.bank_rule {
            cfg.train.bank_rule = r;
        }
        cfg.synth.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
    write_file(&out.join(CONFIG_ECHO), &text)
}

/// Loads the configured files, or generates the synthetic benchmark.
pub fn load_data(cfg: &ExperimentConfig) -> Result<TrainData<f64>> {
    match &cfg.data.source {
        Some(src) => {
            let source = read_embeddings(src)?;
            let target = match &cfg.data.target {
                Some(t) => read_embeddings(t)?,
                None => EmbeddingSet::empty(source.dim(), "no target")?,
            };
            let eval = cfg.data.eval.iter().map(read_embeddings).collect::<Result<Vec<_>>>()?;
            Ok(TrainData { source, target, eval })
        }
        None => {
            let d = synth_generate::<f64>(&cfg.synth)?;
            Ok(TrainData {
                target: d.pooled_target()?,
                eval: d.eval_sets(),
                source: d.source,
            })
        }
    }
}

fn cmd_synth(cfg: &ExperimentConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let d = synth_generate::<f64>(&cfg.synth)?;
    write_embeddings(&d.source, out.join("source.dpge"))?;
    write_embeddings(&d.pooled_target()?, out.join("target.dpge"))?;
    let evals = d.eval_sets();
    let refs: Vec<&EmbeddingSet<f64>> = evals.iter().collect();
    write_embeddings(&EmbeddingSet::concat(&refs, "synth eval")?, out.join("eval.dpge"))?;
    writeln!(stdout, "wrote source.dpge target.dpge eval.dpge to {}", out.display()).ok();
    Ok(())
}

fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool, stop_after: Option<u32>, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<()> {
    let data = load_data(cfg)?;
    let run = RunDir {
        dir: Some(out.to_path_buf()),
        resume,
        stop_after,
    };
    let outcome = train(&cfg.train, &data, &run)?;
    for e in &outcome.log.epochs {
        for w in &e.warnings {
            writeln!(stderr, "warning: {w}").ok();
        }
    }
    emit_report(&outcome.report, out)?;
    let status = if outcome.completed { "complete" } else { "stopped" };
    writeln!(
        stdout,
        "{status} after {} epochs, mean AUC {:.6}",
        outcome.session.state.epoch, outcome.report.mean_auc
    )
    .ok();
    Ok(())
}

fn session_from(cfg: &ExperimentConfig, path: &Path) -> Result<Session<f64>> {
    Session::from_checkpoint(&cfg.train, load_checkpoint(path)?)
}

fn cmd_eval(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, stdout: &mut dyn Write) -> Result<()> {
    let session = session_from(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    let report = evaluate(&session.state, &data.eval, &cfg.train)?;
    emit_report(&report, out)?;
    stdout.write_all(report.to_csv()?.as_bytes()).ok();
    Ok(())
}

fn cmd_pseudo(cfg: &ExperimentConfig, out: &Path, checkpoint: &Path, epoch: u32, stdout: &mut dyn Write) -> Result<()> {
    let session = session_from(cfg, checkpoint)?;
    let data = load_data(cfg)?;
    if data.target.is_empty() {
        return Err(Error::Dataset("pseudo-inspect needs a target set".into()));
    }
    let (_, _, decisions) = pseudo_round(&session.state, &cfg.train, &data.target, epoch)?;
    let mut text = String::new();
    for d in &decisions {
        text.push_str(&serde_json::to_string(d).expect("decision serializes"));
        text.push('\n');
    }
    write_file(&out.join("pseudo.jsonl"), &text)?;
    stdout.write_all(text.as_bytes()).ok();
    Ok(())
}

/// Human-readable findings for one file; the flag is true on any violation.
pub fn validate_file(path: &Path) -> (bool, Vec<String>) {
    let (dim, records) = match read_raw(path) {
        Ok(v) => v,
        Err(e) => return (true, vec![format!("{}: {}: {e}", path.display(), e.kind())]),
    };
    let mut lines = Vec::new();
    let mut bad = false;
    let mut seen = HashSet::new();
    let (mut labeled, mut unknown) = (0usize, 0usize);
    for r in &records {
        let f: Vec<f64> = r.feature.iter().map(|&x| f64::from(x)).collect();
        let n = norm(&f);
        if !n.is_finite() {
            bad = true;
            lines.push(format!("{}: DataError: record `{}` has a non-finite feature", path.display(), r.id));
        } else if n == 0.0 {
            bad = true;
            lines.push(format!("{}: DataError: record `{}` has a zero-norm feature", path.display(), r.id));
        }
        if !seen.insert(r.id.as_str()) {
            bad = true;
            lines.push(format!("{}: DataError: duplicate id `{}`", path.display(), r.id));
        }
        let rec = crate::data::EmbeddingRecord {
            id: r.id.clone(),
            video_id: r.video_id.clone(),
            domain_kind: r.domain_kind,
            dataset_tag: r.dataset_tag.clone(),
            label: r.label,
            feature: Vec::<f64>::new(),
        };
        if let Some(v) = rec.label_domain_violation() {
            bad = true;
            lines.push(format!("{}: DataError: record `{}`: {v}", path.display(), r.id));
        }
        match r.label.class() {
            Some(_) => labeled += 1,
            None => unknown += 1,
        }
    }
    lines.push(format!(
        "{}: {} records, dim {dim}, {labeled} labeled, {unknown} unlabeled: {}",
        path.display(),
        records.len(),
        if bad { "INVALID" } else { "ok" }
    ));
    (bad, lines)
}

fn cmd_ablate(cfg: &ExperimentConfig, out: &Path, stdout: &mut dyn Write) -> Result<()> {
    let data = load_data(cfg)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    let mut header = vec!["tca".to_string(), "cpg".into(), "cd".into(), "mean_auc".into()];
    let mut rows = Vec::new();
    for tca in [true, false] {
        for cpg in [true, false] {
            for cd in [true, false] {
                let mut tc = cfg.train.clone();
                tc.toggles = Toggles { tca, cpg, cd };
                tc.eval_every_epoch = false;
                let outcome = train(&tc, &data, &RunDir::default())?;
                let r = outcome.report;
                if rows.is_empty() {
                    header.extend(r.datasets.iter().map(|d| d.dataset.clone()));
                }
                let mut row = vec![
                    (tca as u8).to_string(),
                    (cpg as u8).to_string(),
                    (cd as u8).to_string(),
                    format!("{:.6}", r.mean_auc),
                ];
                row.extend(r.datasets.iter().map(|d| format!("{:.6}", d.frame_auc)));
                rows.push(row);
            }
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for row in &rows {
        w.write_record(row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    let text = String::from_utf8(bytes).expect("csv output is UTF-8");
    write_file(&out.join("ablation.csv"), &text)?;
    stdout.write_all(text.as_bytes()).ok();
    Ok(())
}

/// Process exit code for a finished command.
pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    if let Command::Validate { paths } = &cli.command {
        let mut bad = false;
        for p in paths {
            let (b, lines) = validate_file(p);
            bad |= b;
            for l in lines {
                writeln!(stdout, "{l}").ok();
            }
        }
        return i32::from(bad);
    }
    let result = cli.resolve().and_then(|cfg| {
        prepare_out(&cli.out, &cfg)?;
        match &cli.command {
            Command::Synth => cmd_synth(&cfg, &cli.out, stdout),
            Command::Train { resume, stop_after } => cmd_train(&cfg, &cli.out, *resume, *stop_after, stdout, stderr),
            Command::Eval { checkpoint } => cmd_eval(&cfg, &cli.out, checkpoint, stdout),
            Command::PseudoInspect { checkpoint, epoch } => cmd_pseudo(&cfg, &cli.out, checkpoint, *epoch, stdout),
            Command::Ablate => cmd_ablate(&cfg, &cli.out, stdout),
            Command::Validate { .. } => unreachable!("handled above"),
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            writeln!(stderr, "{msg}").ok();
            2
        }
    }
}

/// Default checkpoint location inside an output directory.
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join(CHECKPOINT_FILE)
}
