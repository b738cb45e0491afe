//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.
//!
//! Run with `cargo test --test acceptance`.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use dpgnet::data::{synth_generate, Class, SynthConfig};
use dpgnet::eval::{ap, auc, eer, ScoredSample};
use dpgnet::losses::{align_loss, cls_loss, contrast_loss, distill_from_targets, grad_all, Sample, StepBatch, Toggles};
use dpgnet::model::{ModelState, Phase};
use dpgnet::numerics::RngStream;
use dpgnet::pseudo::{CurriculumSchedule, PseudoDecision};
use dpgnet::trainer::{pseudo_round, run_phase1, train, RunDir, TrainConfig, TrainData, TrainOutcome};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn benchmark(synth: &SynthConfig) -> TrainData<f64> {
    let d = synth_generate::<f64>(synth).unwrap();
    TrainData {
        target: d.pooled_target().unwrap(),
        eval: d.eval_sets(),
        source: d.source,
    }
}

fn run(cfg: &TrainConfig, data: &TrainData<f64>) -> TrainOutcome<f64> {
    train(cfg, data, &RunDir::default()).unwrap()
}

// ---------------------------------------------------------------- gradients

fn fd_scalar(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6;
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = RngStream::from_seed(0x6ead);
    let mut worst = 0.0f64;
    let d = 8;
    for trial in 0..100 {
        let st = random_state(&mut rng, d);
        let tg = Toggles {
            tca: trial % 2 == 0,
            cpg: trial % 3 != 0,
            cd: trial % 5 != 1,
        };
        let phase = if trial % 4 == 0 { Phase::Pretrain } else { Phase::Joint };
        let nt = if phase == Phase::Pretrain { 0 } else { 1 + trial % 4 };
        let b = random_batch(&mut rng, d, 1 + trial % 6, nt, phase == Phase::Joint);
        let obj = objective_for(phase, tg);
        let batch = StepBatch {
            source: b.source.iter().map(|(x, c)| Sample { feature: x, class: *c }).collect(),
            target: b.target.iter().map(|(x, c)| Sample { feature: x, class: *c }).collect(),
            distill_targets: b.distill.clone(),
        };
        let (lb, g) = grad_all(&st, &batch, &obj).unwrap();
        worst = worst.max(rel_err(lb.total, objective(&st, &b, &obj)));
        for (grp, grads) in [(Group::Adapter, &g.adapter), (Group::Head, &g.head), (Group::Anchors, &g.anchors)] {
            for (i, &a) in grads.iter().enumerate() {
                worst = worst.max(rel_err(a, central_difference(&st, &b, &obj, grp, i, 1e-6)));
            }
        }

        // Each term on its own, against its scalar derivative.
        let (l0, l1, w) = (2.0 * rng.gaussian(), 2.0 * rng.gaussian(), 1.0 + rng.uniform());
        let probs = |a: f64, b: f64| {
            let pf = 1.0 / (1.0 + (a - b).exp());
            (1.0 - pf, pf)
        };
        for class in [Class::Real, Class::Fake] {
            let (_, dl) = cls_loss(probs(l0, l1), class, w);
            worst = worst.max(rel_err(dl[0], fd_scalar(|x| cls_loss(probs(x, l1), class, w).0, l0)));
            worst = worst.max(rel_err(dl[1], fd_scalar(|x| cls_loss(probs(l0, x), class, w).0, l1)));
        }
        let (sc, si) = (2.0 * rng.uniform() - 1.0, 2.0 * rng.uniform() - 1.0);
        let (_, dsc, dsi) = align_loss(sc, si, 0.07);
        worst = worst.max(rel_err(dsc, fd_scalar(|x| align_loss(x, si, 0.07).0, sc)));
        worst = worst.max(rel_err(dsi, fd_scalar(|x| align_loss(sc, x, 0.07).0, si)));
        let (_, dcc, dco) = contrast_loss(sc, si);
        worst = worst.max(rel_err(dcc, fd_scalar(|x| contrast_loss(x, si).0, sc)));
        worst = worst.max(rel_err(dco, fd_scalar(|x| contrast_loss(sc, x).0, si)));
        let zs: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, d)).collect();
        let zd: Vec<Vec<f64>> = (0..3).map(|_| random_unit(&mut rng, d)).collect();
        let (_, gz) = distill_from_targets(&zs, &zd);
        for r in 0..3 {
            for k in 0..d {
                let f = |x: f64| {
                    let mut z = zs.clone();
                    z[r][k] = x;
                    distill_from_targets(&z, &zd).0
                };
                worst = worst.max(rel_err(gz[r][k], fd_scalar(f, zs[r][k])));
            }
        }
    }
    let t = start.elapsed();
    verdict(
        worst <= 1e-6 && t < Duration::from_secs(30),
        format!("100 configs, d = 8, worst relative error {worst:.2e}, {:.1} s", t.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- metrics

fn brute_auc(s: &[ScoredSample]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for f in s.iter().filter(|x| x.label == Class::Fake) {
        for r in s.iter().filter(|x| x.label == Class::Real) {
            den += 1.0;
            if f.fake_score > r.fake_score {
                num += 1.0;
            } else if f.fake_score == r.fake_score {
                num += 0.5;
            }
        }
    }
    num / den
}

fn brute_ap(s: &[ScoredSample]) -> f64 {
    // Precision at each fake's rank, where rank counts everything placed
    // before it: higher score, or equal score and smaller id.
    let fakes: Vec<&ScoredSample> = s.iter().filter(|x| x.label == Class::Fake).collect();
    let ahead = |a: &ScoredSample, b: &ScoredSample| a.fake_score > b.fake_score || (a.fake_score == b.fake_score && a.id < b.id);
    let mut total = 0.0;
    for f in &fakes {
        let rank = 1 + s.iter().filter(|x| ahead(x, f)).count();
        let hits = 1 + fakes.iter().filter(|x| ahead(x, f)).count();
        total += hits as f64 / rank as f64;
    }
    total / fakes.len() as f64
}

fn brute_eer(s: &[ScoredSample]) -> f64 {
    let nr = s.iter().filter(|x| x.label == Class::Real).count();
    let nf = s.len() - nr;
    let mut thresholds: Vec<f64> = s.iter().map(|x| x.fake_score).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best: Option<(usize, f64)> = None;
    for t in thresholds {
        let fp = s.iter().filter(|x| x.label == Class::Real && x.fake_score >= t).count();
        let fn_ = s.iter().filter(|x| x.label == Class::Fake && x.fake_score < t).count();
        // |FPR - FNR| compared exactly through integer cross products; lowest threshold wins ties.
        let gap = (fp * nf).abs_diff(fn_ * nr);
        if best.is_none_or(|b| gap < b.0) {
            best = Some((gap, (fp as f64 / nr as f64 + fn_ as f64 / nf as f64) / 2.0));
        }
    }
    best.unwrap().1
}

fn random_instance(rng: &mut RngStream) -> Vec<ScoredSample> {
    let n = 2 + rng.index(199);
    let levels = 1 + rng.index(12);
    let mut out: Vec<ScoredSample> = (0..n)
        .map(|i| {
            let label = if rng.uniform() < 0.5 { Class::Real } else { Class::Fake };
            // Coarse levels produce many ties; continuous scores produce none.
            let fake_score = if rng.uniform() < 0.5 {
                rng.index(levels) as f64 / levels as f64
            } else {
                rng.uniform()
            };
            ScoredSample {
                id: format!("s{:03}", (i * 101) % 211),
                video_id: format!("v{i}"),
                dataset_tag: "x".into(),
                label,
                fake_score,
            }
        })
        .collect();
    out[0].label = Class::Real;
    out[1].label = Class::Fake;
    out
}

fn metric_oracles() -> Verdict {
    let mut rng = RngStream::from_seed(0x3e7c);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let s = random_instance(&mut rng);
        worst = worst
            .max((auc(&s).unwrap() - brute_auc(&s)).abs())
            .max((ap(&s).unwrap() - brute_ap(&s)).abs())
            .max((eer(&s).unwrap() - brute_eer(&s)).abs());
    }
    verdict(worst <= 1e-12, format!("1000 instances, n <= 200, worst deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- pseudo labels

/// Straight from the definitions: adapter, softmax head, bank membership,
/// nearest-fake distance with the 0.5 cutoff, and the three acceptance checks.
fn brute_decisions(st: &ModelState<f64>, features: &[(String, Vec<f64>)], lambda_tf: f64, lambda_lt: f64) -> Vec<(Class, f64, Option<Class>, bool)> {
    let d = st.dim;
    let embed = |x: &[f64]| {
        let mut u = vec![0.0; d];
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = st.adapter[d * d + i];
            for j in 0..d {
                *ui += st.adapter[i * d + j] * x[j];
            }
        }
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        u.into_iter().map(|v| v / n).collect::<Vec<f64>>()
    };
    let classify = |z: &[f64]| {
        let logit = |c: usize| st.head[2 * d + c] + (0..d).map(|k| st.head[c * d + k] * z[k]).sum::<f64>();
        let p_fake = 1.0 / (1.0 + (logit(0) - logit(1)).exp());
        let p_real = 1.0 - p_fake;
        if p_real > p_fake {
            (Class::Real, p_real)
        } else {
            (Class::Fake, p_fake)
        }
    };
    let rows: Vec<(Vec<f64>, Class, f64)> = features
        .iter()
        .map(|(_, x)| {
            let z = embed(x);
            let (c, p) = classify(&z);
            (z, c, p)
        })
        .collect();
    let bank = |c: Class| rows.iter().filter(|r| r.1 == c && r.2 >= lambda_tf).map(|r| &r.0).collect::<Vec<_>>();
    let (real_bank, fake_bank) = (bank(Class::Real), bank(Class::Fake));
    rows.iter()
        .map(|(z, c, p)| {
            let d_fake = fake_bank
                .iter()
                .map(|e| e.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.min(v))));
            let bank_label = d_fake.map(|df| if df > 0.5 { Class::Real } else { Class::Fake });
            let accepted = !real_bank.is_empty() && !fake_bank.is_empty() && bank_label == Some(*c) && *p >= lambda_lt;
            (*c, *p, bank_label, accepted)
        })
        .collect()
}

fn pseudo_equivalence() -> Verdict {
    let synth = SynthConfig {
        n_target_per_class: 167,
        ..SynthConfig::default()
    };
    let data = benchmark(&synth);
    let cfg = TrainConfig::default();
    let (session, _) = run_phase1(&cfg, &data.source).unwrap();
    let features: Vec<(String, Vec<f64>)> = data.target.records().iter().map(|r| (r.id.clone(), r.feature.clone())).collect();
    let mut mismatches = 0;
    let mut accepted = 0;
    for t in [0, cfg.epochs_phase2 - 1] {
        let (lt, _, got): (f64, _, Vec<PseudoDecision<f64>>) = pseudo_round(&session.state, &cfg, &data.target, t).unwrap();
        let want = brute_decisions(&session.state, &features, cfg.lambda_tf, lt);
        for (g, w) in got.iter().zip(&want) {
            accepted += usize::from(g.accepted);
            let same = g.clip_label == w.0 && (g.clip_confidence - w.1).abs() <= 1e-12 && g.bank_label == w.2 && g.accepted == w.3;
            mismatches += usize::from(!same);
        }
    }
    verdict(
        mismatches == 0 && accepted > 0 && features.len() >= 1000,
        format!("{} targets x 2 thresholds, {accepted} accepted, {mismatches} discrepancies", features.len()),
    )
}

// ---------------------------------------------------------------- curriculum

fn curriculum_endpoints() -> Verdict {
    let mut ok = true;
    for total in [1, 2, 9, 19, 100] {
        let s = CurriculumSchedule::new(0.85, 0.70, total);
        ok &= s.threshold_at(0).unwrap() == 0.85 && s.threshold_at(total).unwrap() == 0.70;
        let v: Vec<f64> = (0..=total).map(|t| s.threshold_at(t).unwrap()).collect();
        ok &= v.windows(2).all(|w| w[1] <= w[0]);
        ok &= s.threshold_at(total + 1).is_err();
    }
    let s = TrainConfig::default().schedule();
    ok &= s.threshold_at(0).unwrap() == 0.85 && s.threshold_at(s.total).unwrap() == 0.70;
    verdict(ok, "exact 0.85 / 0.70 endpoints, non-increasing for T in {1, 2, 9, 19, 100} and the default")
}

// ---------------------------------------------------------------- training criteria

fn adaptation_benefit() -> Verdict {
    let start = Instant::now();
    let data = benchmark(&SynthConfig::default());
    let cfg = TrainConfig {
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    let full = run(&cfg, &data).report.mean_auc;
    let baseline = run(&TrainConfig { epochs_phase2: 0, ..cfg }, &data).report.mean_auc;
    let t = start.elapsed();
    let gain = full - baseline;
    verdict(
        gain >= 0.05 && t < Duration::from_secs(120),
        format!("full {full:.4} vs phase-1 only {baseline:.4}, gain {gain:+.4}, {:.1} s", t.as_secs_f64()),
    )
}

fn ablation_direction() -> Verdict {
    let data = benchmark(&SynthConfig::default());
    let auc_with = |toggles: Toggles| {
        let cfg = TrainConfig {
            toggles,
            eval_every_epoch: false,
            ..TrainConfig::default()
        };
        run(&cfg, &data).report.mean_auc
    };
    let full = auc_with(Toggles::default());
    let off = auc_with(Toggles::OFF);
    let singles = [
        ("-TCA", auc_with(Toggles { tca: false, ..Toggles::default() })),
        ("-CPG", auc_with(Toggles { cpg: false, ..Toggles::default() })),
        ("-CD", auc_with(Toggles { cd: false, ..Toggles::default() })),
    ];
    let tol = 0.005;
    let ok = singles.iter().all(|(_, v)| full + tol >= *v && *v + tol >= off);
    let cells: Vec<String> = singles.iter().map(|(n, v)| format!("{n} {v:.4}")).collect();
    verdict(ok, format!("full {full:.4}, {}, all off {off:.4}", cells.join(", ")))
}

fn sample_size_trend() -> Verdict {
    let cfg = TrainConfig {
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    let at = |per_class: usize| {
        let synth = SynthConfig {
            n_target_per_class: per_class,
            ..SynthConfig::default()
        };
        let data = benchmark(&synth);
        (data.target.len(), run(&cfg, &data).report.mean_auc)
    };
    let (n_small, small) = at(167);
    let (n_large, large) = at(667);
    verdict(
        large >= small - 0.01,
        format!("pool {n_small}: {small:.4}, pool {n_large}: {large:.4}"),
    )
}

fn loss_schedule() -> Verdict {
    let data = benchmark(&SynthConfig::default());
    let cfg = TrainConfig {
        eval_every_epoch: false,
        ..TrainConfig::default()
    };
    let out = run(&cfg, &data);
    let mut target_terms = 0;
    let mut worst = 0.0f64;
    for s in &out.log.steps {
        if s.phase == Phase::Pretrain {
            let l = &s.loss;
            target_terms += [l.cls_target, l.align_target, l.con_target, l.distill].iter().filter(|t| t.is_some()).count();
            target_terms += l.n_target + l.n_distill;
        }
        worst = worst.max((s.loss.weighted_total(&cfg.objective(s.phase)) - s.loss.total).abs());
    }
    for e in &out.log.epochs {
        worst = worst.max((e.loss.weighted_total(&cfg.objective(e.phase)) - e.loss.total).abs());
    }
    let joint_terms = out.log.steps.iter().any(|s| s.phase == Phase::Joint && s.loss.cls_target.is_some());
    verdict(
        target_terms == 0 && worst <= 1e-12 && joint_terms,
        format!(
            "{} steps, phase-1 target contributions {target_terms}, worst reconstruction error {worst:.1e}",
            out.log.steps.len()
        ),
    )
}

// ---------------------------------------------------------------- CLI

const CLI_CONFIG: &str = "[synth]\ndim = 16\nn_source_per_class = 48\nn_target_per_class = 24\nn_eval_per_class = 16\n\n[train]\nepochs_phase1 = 2\nepochs_phase2 = 2\n";

fn dpg(dir: &Path, args: &[&str]) -> (i32, Vec<u8>, Vec<u8>) {
    let out = Command::new(env!("CARGO_BIN_EXE_dpg"))
        .current_dir(dir)
        .args(["--config", "exp.toml", "--out", "out"])
        .args(args)
        .output()
        .unwrap();
    (out.status.code().unwrap_or(-1), out.stdout, out.stderr)
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn cli_session(dir: &Path) -> Vec<(String, Vec<u8>)> {
    std::fs::write(dir.join("exp.toml"), CLI_CONFIG).unwrap();
    let mut record = Vec::new();
    let mut step = |name: &str, args: &[&str]| {
        let (code, stdout, stderr) = dpg(dir, args);
        record.push((format!("{name}: exit {code}"), [stdout, stderr].concat()));
        for (f, bytes) in tree(&dir.join("out")) {
            record.push((format!("{name}: {f}"), bytes));
        }
    };
    step("synth", &["synth"]);
    step("validate", &["validate", "out/source.dpge", "out/target.dpge", "out/eval.dpge"]);
    step("train", &["train"]);
    step("eval", &["eval", "--checkpoint", "out/checkpoint.dpgc"]);
    step("pseudo", &["pseudo-inspect", "--checkpoint", "out/checkpoint.dpgc"]);
    step("ablate", &["ablate"]);
    record
}

fn cli_determinism() -> Verdict {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = cli_session(a.path());
    let second = cli_session(b.path());
    let differing: Vec<&String> = first.iter().zip(&second).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    let all_ok = first.iter().filter(|(n, _)| n.contains(": exit ")).all(|(n, _)| n.ends_with("exit 0"));
    verdict(
        all_ok && first.len() == second.len() && differing.is_empty(),
        format!(
            "synth, validate, train, eval, pseudo-inspect, ablate twice: {} outputs compared, {} differ",
            first.len(),
            differing.len()
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient suite", gradient_suite),
        ("metric oracles", metric_oracles),
        ("pseudo-label equivalence", pseudo_equivalence),
        ("curriculum endpoints", curriculum_endpoints),
        ("adaptation benefit", adaptation_benefit),
        ("ablation direction", ablation_direction),
        ("sample-size trend", sample_size_trend),
        ("CLI determinism", cli_determinism),
        ("loss-schedule correctness", loss_schedule),
    ];
    let mut failures = 0;
    for (name, check) in criteria {
        let v = check();
        failures += usize::from(!v.pass);
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
