//! Synthetic domain-shift benchmark.
//!
//! Geometry (all directions are seeded, mutually orthogonal unit vectors):
//! target domain `k` with shift `delta_k` moves the class centre from `mu_r`
//! by `delta_k * v_k` and rotates the class offset toward `w_k`:
//!
//! ```text
//! centre_k = mu_r + delta_k * v_k
//! o_k      = normalize(u + tilt * delta_k * w_k)
//! real_k   = centre_k - (s / 2) * o_k
//! fake_k   = centre_k + (s / 2) * o_k
//! ```
//!
//! Class separation is exactly `s` in every domain, both means have the same
//! norm, and `delta = 0` reproduces the source. A fraction `hard_fraction` of
//! each domain's fakes sits on the centre. Each sample is
//! `mean + noise * g + axis_noise * g' * u` with `g` standard normal and `g'`
//! a standard normal scalar, then L2-normalized. The source holds
//! `source_fake_ratio` fakes per real; target and evaluation sets are balanced.
//!
//! Every population draws from its own derived stream, so growing the
//! unlabeled target pool leaves the source and evaluation sets unchanged.

use serde::{Deserialize, Serialize};

use crate::data::record::{Class, DomainKind, EmbeddingRecord, EmbeddingSet, Label};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, normalize_in_place, RngStream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub dim: usize,
    /// Real source samples; the source holds `source_fake_ratio` times as many fakes.
    pub n_source_per_class: usize,
    pub n_target_per_class: usize,
    pub n_eval_per_class: usize,
    /// One shift per target domain; the domain count is `deltas.len()`.
    pub deltas: Vec<f64>,
    pub separation: f64,
    pub tilt: f64,
    pub noise: f64,
    /// Extra noise along the source class axis `u` only.
    pub axis_noise: f64,
    pub hard_fraction: f64,
    /// Fakes per real in the source set. Target and evaluation sets are balanced.
    pub source_fake_ratio: f64,
    pub frames_per_video: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            n_source_per_class: 512,
            n_target_per_class: 256,
            n_eval_per_class: 256,
            deltas: vec![0.4, 0.7, 1.0],
            separation: 1.2,
            tilt: 3.5,
            noise: 0.02,
            axis_noise: 0.25,
            hard_fraction: 0.0,
            source_fake_ratio: 2.0,
            frames_per_video: 4,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn n_source_fakes(&self) -> usize {
        (self.source_fake_ratio * self.n_source_per_class as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.source_fake_ratio.is_finite() && self.source_fake_ratio > 0.0) || self.n_source_fakes() == 0 {
            return bad("source_fake_ratio must be finite and yield at least one source fake");
        }
        if self.n_source_per_class == 0 || self.n_target_per_class == 0 || self.n_eval_per_class == 0 {
            return bad("all per-class counts must be at least 1");
        }
        if self.deltas.is_empty() {
            return bad("at least one target domain (delta) is required");
        }
        if self.deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return bad("every delta must be finite and >= 0");
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return bad("noise must be finite and > 0");
        }
        if !(self.axis_noise.is_finite() && self.axis_noise >= 0.0) {
            return bad("axis_noise must be finite and >= 0");
        }
        if !(self.hard_fraction >= 0.0 && self.hard_fraction < 1.0) {
            return bad("hard_fraction must lie in [0, 1)");
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) || !self.tilt.is_finite() {
            return bad("separation and tilt must be finite, separation >= 0");
        }
        if self.frames_per_video == 0 {
            return bad("frames_per_video must be at least 1");
        }
        if self.dim < 2 + 2 * self.deltas.len() {
            return Err(Error::Config(format!(
                "dim {} too small for {} orthogonal directions",
                self.dim,
                2 + 2 * self.deltas.len()
            )));
        }
        Ok(())
    }

    pub fn domains(&self) -> usize {
        self.deltas.len()
    }
}

pub const SOURCE_TAG: &str = "synth-src";

pub fn target_tag(k: usize) -> String {
    format!("synth-t{}", k + 1)
}

/// One shifted domain: the unlabeled adaptation pool (true labels held out
/// in `pool_truth`) and a disjoint labeled evaluation split.
#[derive(Debug, Clone)]
pub struct TargetDomain<F> {
    pub tag: String,
    pub delta: f64,
    pub pool: EmbeddingSet<F>,
    pub pool_truth: Vec<Class>,
    pub eval: EmbeddingSet<F>,
}

#[derive(Debug, Clone)]
pub struct SynthData<F> {
    pub source: EmbeddingSet<F>,
    pub targets: Vec<TargetDomain<F>>,
}

impl<F: Scalar> SynthData<F> {
    /// All unlabeled pools pooled into one adaptation set.
    pub fn pooled_target(&self) -> Result<EmbeddingSet<F>> {
        let parts: Vec<&EmbeddingSet<F>> = self.targets.iter().map(|t| &t.pool).collect();
        EmbeddingSet::concat(&parts, "synth target pool")
    }

    pub fn pooled_truth(&self) -> Vec<Class> {
        self.targets.iter().flat_map(|t| t.pool_truth.iter().copied()).collect()
    }

    pub fn eval_sets(&self) -> Vec<EmbeddingSet<F>> {
        self.targets.iter().map(|t| t.eval.clone()).collect()
    }
}

/// Seeded directions shared by every population.
#[derive(Debug, Clone)]
pub struct Geometry {
    pub mu_real: Vec<f64>,
    pub u: Vec<f64>,
    pub shift_dirs: Vec<Vec<f64>>,
    pub tilt_dirs: Vec<Vec<f64>>,
}

const GEOMETRY_STREAM: u64 = 1;
const SOURCE_STREAM: u64 = 2;

fn pool_stream(k: usize) -> u64 {
    10 + 2 * k as u64
}

fn eval_stream(k: usize) -> u64 {
    11 + 2 * k as u64
}

fn orthogonal_unit(rng: &mut RngStream, dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut g: Vec<f64> = rng.gaussian_vec(dim);
        for b in basis {
            let c = dot(&g, b);
            axpy(-c, b, &mut g);
        }
        if normalize_in_place(&mut g).is_ok() {
            return g;
        }
    }
}

impl Geometry {
    pub fn new(cfg: &SynthConfig) -> Self {
        let mut rng = RngStream::derive(cfg.seed, GEOMETRY_STREAM);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        let mu_real = orthogonal_unit(&mut rng, cfg.dim, &basis);
        basis.push(mu_real.clone());
        let u = orthogonal_unit(&mut rng, cfg.dim, &basis);
        basis.push(u.clone());
        let mut shift_dirs = Vec::new();
        let mut tilt_dirs = Vec::new();
        for _ in 0..cfg.domains() {
            let v = orthogonal_unit(&mut rng, cfg.dim, &basis);
            basis.push(v.clone());
            let w = orthogonal_unit(&mut rng, cfg.dim, &basis);
            basis.push(w.clone());
            shift_dirs.push(v);
            tilt_dirs.push(w);
        }
        Self {
            mu_real,
            u,
            shift_dirs,
            tilt_dirs,
        }
    }

    /// Pre-normalization (real, fake, hard-fake) means; `domain = None` is the source.
    pub fn class_means(&self, cfg: &SynthConfig, domain: Option<usize>) -> [Vec<f64>; 3] {
        let mut centre = self.mu_real.clone();
        let mut offset = self.u.clone();
        if let Some(k) = domain {
            let delta = cfg.deltas[k];
            axpy(delta, &self.shift_dirs[k], &mut centre);
            if cfg.tilt * delta != 0.0 {
                axpy(cfg.tilt * delta, &self.tilt_dirs[k], &mut offset);
                normalize_in_place(&mut offset).expect("u is a unit vector orthogonal to w_k");
            }
        }
        let mut real = centre.clone();
        axpy(-0.5 * cfg.separation, &offset, &mut real);
        let mut fake = centre.clone();
        axpy(0.5 * cfg.separation, &offset, &mut fake);
        [real, fake, centre]
    }
}

struct Population<'a> {
    tag: &'a str,
    kind: DomainKind,
    id_prefix: &'a str,
    n_real: usize,
    n_fake: usize,
    means: [Vec<f64>; 3],
}

fn sample_population<F: Scalar>(
    cfg: &SynthConfig,
    geo: &Geometry,
    pop: &Population<'_>,
    rng: &mut RngStream,
) -> (Vec<EmbeddingRecord<F>>, Vec<Class>) {
    let [real, fake, mid] = &pop.means;
    let n_hard = (cfg.hard_fraction * pop.n_fake as f64).round() as usize;
    let mut records = Vec::with_capacity(pop.n_real + pop.n_fake);
    let mut truth = Vec::with_capacity(pop.n_real + pop.n_fake);
    for class in Class::ALL {
        let code = match class {
            Class::Real => 'r',
            Class::Fake => 'f',
        };
        let count = match class {
            Class::Real => pop.n_real,
            Class::Fake => pop.n_fake,
        };
        for i in 0..count {
            let mean = match class {
                Class::Real => real,
                Class::Fake if i < n_hard => mid,
                Class::Fake => fake,
            };
            let mut x: Vec<f64> = rng.gaussian_vec(cfg.dim);
            for (xi, mi) in x.iter_mut().zip(mean) {
                *xi = mi + cfg.noise * *xi;
            }
            if cfg.axis_noise > 0.0 {
                axpy(cfg.axis_noise * rng.gaussian(), &geo.u, &mut x);
            }
            normalize_in_place(&mut x).expect("gaussian sample is nonzero");
            let label = match pop.kind {
                DomainKind::TargetUnlabeled => Label::Unknown,
                _ => class.into(),
            };
            records.push(EmbeddingRecord {
                id: format!("{}-{}{:05}", pop.id_prefix, code, i),
                video_id: format!("{}-{}v{:04}", pop.id_prefix, code, i / cfg.frames_per_video),
                domain_kind: pop.kind,
                dataset_tag: pop.tag.to_string(),
                label,
                feature: x.into_iter().map(F::lit).collect(),
            });
            truth.push(class);
        }
    }
    (records, truth)
}

pub fn synth_generate<F: Scalar>(cfg: &SynthConfig) -> Result<SynthData<F>> {
    cfg.validate()?;
    let geo = Geometry::new(cfg);
    let mut rng = RngStream::derive(cfg.seed, SOURCE_STREAM);
    let (src_records, _) = sample_population::<F>(
        cfg,
        &geo,
        &Population {
            tag: SOURCE_TAG,
            kind: DomainKind::Source,
            id_prefix: "src",
            n_real: cfg.n_source_per_class,
            n_fake: cfg.n_source_fakes(),
            means: geo.class_means(cfg, None),
        },
        &mut rng,
    );
    let source = EmbeddingSet::new(cfg.dim, src_records, format!("synth seed {}", cfg.seed))?;
    let mut targets = Vec::with_capacity(cfg.domains());
    for k in 0..cfg.domains() {
        let tag = target_tag(k);
        let means = geo.class_means(cfg, Some(k));
        let mut pool_rng = RngStream::derive(cfg.seed, pool_stream(k));
        let (pool_records, pool_truth) = sample_population::<F>(
            cfg,
            &geo,
            &Population {
                tag: &tag,
                kind: DomainKind::TargetUnlabeled,
                id_prefix: &format!("t{}p", k + 1),
                n_real: cfg.n_target_per_class,
                n_fake: cfg.n_target_per_class,
                means: means.clone(),
            },
            &mut pool_rng,
        );
        let mut eval_rng = RngStream::derive(cfg.seed, eval_stream(k));
        let (eval_records, _) = sample_population::<F>(
            cfg,
            &geo,
            &Population {
                tag: &tag,
                kind: DomainKind::Eval,
                id_prefix: &format!("t{}e", k + 1),
                n_real: cfg.n_eval_per_class,
                n_fake: cfg.n_eval_per_class,
                means,
            },
            &mut eval_rng,
        );
        targets.push(TargetDomain {
            tag: tag.clone(),
            delta: cfg.deltas[k],
            pool: EmbeddingSet::new(cfg.dim, pool_records, format!("synth {tag} pool"))?,
            pool_truth,
            eval: EmbeddingSet::new(cfg.dim, eval_records, format!("synth {tag} eval"))?,
        });
    }
    Ok(SynthData { source, targets })
}
