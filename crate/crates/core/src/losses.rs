//! Loss terms and their hand-derived gradients.
//!
//! Every term is evaluated on adapter outputs `z = normalize(W x + b)`.
//! [`grad_all`] runs the forward pass per sample, backpropagates the active
//! terms through the head, the anchors and the normalized adapter, and reduces
//! per-sample contributions in index order so the result does not depend on
//! the thread count.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Class;
use crate::error::{Error, Result};
use crate::model::{ModelState, Phase};
use crate::numerics::{dot, norm, RngStream};
use crate::scalar::Scalar;

/// Objective coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Alignment weight in the pretraining objective.
    pub lambda: f64,
    /// Source classification weight in the joint objective.
    pub lambda1: f64,
    /// Source alignment weight in the joint objective.
    pub lambda2: f64,
    /// Distillation weight.
    pub beta: f64,
    /// Cross-entropy weight of real source samples.
    pub real_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            lambda1: 0.4,
            lambda2: 0.5,
            beta: 0.1,
            real_weight: 2.0,
        }
    }
}

/// Component switches: anchor alignment, pseudo-label supervision, distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Toggles {
    pub tca: bool,
    pub cpg: bool,
    pub cd: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            tca: true,
            cpg: true,
            cd: true,
        }
    }
}

impl Toggles {
    pub const OFF: Toggles = Toggles {
        tca: false,
        cpg: false,
        cd: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub phase: Phase,
    pub weights: LossWeights,
    pub toggles: Toggles,
}

/// Per-term batch means. `None` marks a term that is not part of the active
/// objective; an active target term over zero accepted samples is `Some(0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<F> {
    pub cls_source: Option<F>,
    pub align_source: Option<F>,
    pub cls_target: Option<F>,
    pub align_target: Option<F>,
    pub con_target: Option<F>,
    pub distill: Option<F>,
    pub total: F,
    pub n_source: usize,
    pub n_target: usize,
    pub n_distill: usize,
}

impl<F: Scalar> LossBreakdown<F> {
    /// Weighted sum of the logged terms under `obj`.
    pub fn weighted_total(&self, obj: &Objective) -> F {
        let c = Coefficients::new(obj);
        let term = |v: Option<F>, w: f64| v.map_or(F::zero(), |v| F::lit(w) * v);
        term(self.cls_source, c.cls_s)
            + term(self.align_source, c.align_s)
            + term(self.cls_target, 1.0)
            + term(self.align_target, 1.0)
            + term(self.con_target, 1.0)
            + term(self.distill, c.dis)
    }

    /// Unweighted pseudo-label composite, when any target term is active.
    pub fn pseudo_total(&self) -> Option<F> {
        if self.cls_target.is_none() {
            return None;
        }
        Some(self.cls_target.unwrap_or(F::zero()) + self.align_target.unwrap_or(F::zero()) + self.con_target.unwrap_or(F::zero()))
    }
}

/// Gradient buffers laid out like the corresponding [`ModelState`] fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub adapter: Vec<F>,
    pub head: Vec<F>,
    pub anchors: Vec<F>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            adapter: vec![F::zero(); dim * dim + dim],
            head: vec![F::zero(); 2 * dim + 2],
            anchors: vec![F::zero(); 2 * dim],
        }
    }

    pub fn anchors_touched(&self) -> bool {
        self.anchors.iter().any(|g| *g != F::zero())
    }
}

/// A labeled input feature. Target samples carry their accepted pseudo label.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a, F> {
    pub feature: &'a [F],
    pub class: Class,
}

/// One optimization step's worth of data.
#[derive(Debug, Clone, Default)]
pub struct StepBatch<'a, F> {
    pub source: Vec<Sample<'a, F>>,
    pub target: Vec<Sample<'a, F>>,
    /// Fixed mixup targets `z_d`, one per source sample.
    pub distill_targets: Option<Vec<Vec<F>>>,
}

/// `w * CE` on `(p_real, p_fake)`, with the gradient with respect to the logits.
pub fn cls_loss<F: Scalar>(probs: (F, F), class: Class, weight: F) -> (F, [F; 2]) {
    let p = [probs.0, probs.1];
    let y = class.index();
    let mut g = [weight * p[0], weight * p[1]];
    g[y] -= weight;
    (-weight * p[y].ln(), g)
}

fn cls_from_logits<F: Scalar>(logits: [F; 2], class: Class, weight: F) -> (F, [F; 2]) {
    let m = logits[0].max(logits[1]);
    let e = [(logits[0] - m).exp(), (logits[1] - m).exp()];
    let s = e[0] + e[1];
    let p = [e[0] / s, e[1] / s];
    let y = class.index();
    let log_p = logits[y] - m - s.ln();
    let mut g = [weight * p[0], weight * p[1]];
    g[y] -= weight;
    (-weight * log_p, g)
}

fn softplus<F: Scalar>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Two-way softmax alignment loss. Returns `(loss, dL/ds_correct, dL/ds_incorrect)`.
pub fn align_loss<F: Scalar>(s_correct: F, s_incorrect: F, tau: F) -> (F, F, F) {
    let x = (s_incorrect - s_correct) / tau;
    let g = sigmoid(x) / tau;
    (softplus(x), -g, g)
}

/// Returns `(loss, dL/ds_correct, dL/ds_opposite)`.
pub fn contrast_loss<F: Scalar>(s_correct: F, s_opposite: F) -> (F, F, F) {
    (s_opposite - s_correct, -F::one(), F::one())
}

fn cmp_features<F: Scalar>(a: &[F], b: &[F]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.as_f64().total_cmp(&y.as_f64()) {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Draws the mixup targets `z_d = a z_s + (1 - a) z_t` for a source batch.
///
/// The target batch is put into lexicographic feature order first, so the
/// pairing depends only on the stream and the set of target features.
/// Returns `None` for an empty target batch.
pub fn distill_targets<F: Scalar>(z_source: &[Vec<F>], z_target: &[Vec<F>], stream: &mut RngStream) -> Option<Vec<Vec<F>>> {
    if z_target.is_empty() {
        return None;
    }
    let mut order: Vec<&Vec<F>> = z_target.iter().collect();
    order.sort_by(|a, b| cmp_features(a, b));
    Some(
        z_source
            .iter()
            .map(|zs| {
                let zt = order[stream.index(order.len())];
                let a = F::lit(stream.uniform());
                zs.iter().zip(zt.iter()).map(|(&s, &t)| a * s + (F::one() - a) * t).collect()
            })
            .collect(),
    )
}

/// Mean squared distance to fixed mixup targets, and its gradient per source row.
pub fn distill_from_targets<F: Scalar>(z_source: &[Vec<F>], targets: &[Vec<F>]) -> (F, Vec<Vec<F>>) {
    let n = F::from_count(z_source.len().max(1));
    let mut loss = F::zero();
    let grads = z_source
        .iter()
        .zip(targets)
        .map(|(zs, zd)| {
            loss += zs.iter().zip(zd).map(|(&a, &b)| (a - b) * (a - b)).sum::<F>();
            zs.iter().zip(zd).map(|(&a, &b)| F::two() * (a - b) / n).collect()
        })
        .collect();
    (loss / n, grads)
}

/// Latent mixup distillation over one pairing drawn from `stream`.
/// `None` when the target batch is empty.
pub fn distill_loss<F: Scalar>(
    z_source: &[Vec<F>],
    z_target: &[Vec<F>],
    stream: &mut RngStream,
) -> Option<(F, Vec<Vec<F>>)> {
    if z_source.is_empty() {
        return None;
    }
    let targets = distill_targets(z_source, z_target, stream)?;
    Some(distill_from_targets(z_source, &targets))
}

/// Unweighted target-term breakdown over accepted pseudo-labeled samples.
pub fn pseudo_composite<F: Scalar>(state: &ModelState<F>, samples: &[Sample<'_, F>], tca: bool) -> Result<LossBreakdown<F>> {
    let obj = Objective {
        phase: Phase::Joint,
        weights: LossWeights {
            lambda: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            beta: 0.0,
            real_weight: 1.0,
        },
        toggles: Toggles {
            tca,
            cpg: true,
            cd: false,
        },
    };
    let batch = StepBatch {
        source: Vec::new(),
        target: samples.to_vec(),
        distill_targets: None,
    };
    let (mut b, _) = grad_all(state, &batch, &obj)?;
    b.cls_source = None;
    b.align_source = None;
    b.total = b.pseudo_total().unwrap_or(F::zero());
    Ok(b)
}

/// Effective per-term multipliers of the active objective.
struct Coefficients {
    cls_s: f64,
    align_s: f64,
    dis: f64,
    target: bool,
    anchors: bool,
    distill: bool,
}

impl Coefficients {
    fn new(obj: &Objective) -> Self {
        let w = &obj.weights;
        let t = &obj.toggles;
        match obj.phase {
            Phase::Pretrain => Self {
                cls_s: 1.0,
                align_s: if t.tca { w.lambda } else { 0.0 },
                dis: 0.0,
                target: false,
                anchors: t.tca,
                distill: false,
            },
            Phase::Joint => Self {
                cls_s: w.lambda1,
                align_s: if t.tca { w.lambda2 } else { 0.0 },
                dis: if t.cd { w.beta } else { 0.0 },
                target: t.cpg,
                anchors: t.tca,
                distill: t.cd,
            },
        }
    }
}

struct SampleOut<F> {
    cls: F,
    align: F,
    con: F,
    /// Gradient at the pre-normalization adapter output.
    g_u: Vec<F>,
    g_logits: [F; 2],
    z: Vec<F>,
    g_real: Vec<F>,
    g_fake: Vec<F>,
}

struct Term<'a, F> {
    cls_w: F,
    cls_scale: F,
    align_scale: F,
    con_scale: F,
    distill: Option<(F, &'a [F])>,
}

fn cos_grads<F: Scalar>(z: &[F], a: &[F]) -> Result<(F, Vec<F>, Vec<F>)> {
    let nz = norm(z);
    let na = norm(a);
    if !(na > F::zero()) {
        return Err(Error::Numeric("anchor has zero norm".into()));
    }
    let s = dot(z, a) / (nz * na);
    let dz = z.iter().zip(a).map(|(&zi, &ai)| ai / (nz * na) - s * zi / (nz * nz)).collect();
    let da = z.iter().zip(a).map(|(&zi, &ai)| zi / (nz * na) - s * ai / (na * na)).collect();
    Ok((s, dz, da))
}

fn sample_pass<F: Scalar>(state: &ModelState<F>, s: &Sample<'_, F>, t: &Term<'_, F>, anchors: bool) -> Result<SampleOut<F>> {
    let d = state.dim;
    let u = state.adapter_affine(s.feature)?;
    let nu = norm(&u);
    if !(nu > F::zero()) || !nu.is_finite() {
        return Err(Error::Numeric("adapter output is the zero vector".into()));
    }
    let z: Vec<F> = u.iter().map(|&x| x / nu).collect();
    let logits = state.head_logits(&z);
    let (cls, gl) = cls_from_logits(logits, s.class, t.cls_w);
    let g_logits = [gl[0] * t.cls_scale, gl[1] * t.cls_scale];
    let mut g_z = vec![F::zero(); d];
    for (k, &g) in g_logits.iter().enumerate() {
        let row = &state.head[k * d..(k + 1) * d];
        for (gz, &h) in g_z.iter_mut().zip(row) {
            *gz += g * h;
        }
    }
    let mut align = F::zero();
    let mut con = F::zero();
    let mut g_real = Vec::new();
    let mut g_fake = Vec::new();
    if anchors {
        let y = s.class;
        let (s_c, dz_c, da_c) = cos_grads(&z, state.anchor(y))?;
        let (s_o, dz_o, da_o) = cos_grads(&z, state.anchor(y.opposite()))?;
        let (la, ga_c, ga_o) = align_loss(s_c, s_o, state.tau);
        let (lc, gc_c, gc_o) = contrast_loss(s_c, s_o);
        align = la;
        con = lc;
        let g_c = t.align_scale * ga_c + t.con_scale * gc_c;
        let g_o = t.align_scale * ga_o + t.con_scale * gc_o;
        for i in 0..d {
            g_z[i] += g_c * dz_c[i] + g_o * dz_o[i];
        }
        let ga_correct: Vec<F> = da_c.iter().map(|&v| g_c * v).collect();
        let ga_opp: Vec<F> = da_o.iter().map(|&v| g_o * v).collect();
        (g_real, g_fake) = match y {
            Class::Real => (ga_correct, ga_opp),
            Class::Fake => (ga_opp, ga_correct),
        };
    }
    if let Some((scale, zd)) = t.distill {
        for i in 0..d {
            g_z[i] += scale * F::two() * (z[i] - zd[i]);
        }
    }
    let proj = dot(&g_z, &z);
    let g_u = g_z.iter().zip(&z).map(|(&g, &zi)| (g - proj * zi) / nu).collect();
    Ok(SampleOut {
        cls,
        align,
        con,
        g_u,
        g_logits,
        z,
        g_real,
        g_fake,
    })
}

/// Loss breakdown and full parameter gradient of the objective on `batch`.
pub fn grad_all<F: Scalar>(state: &ModelState<F>, batch: &StepBatch<'_, F>, obj: &Objective) -> Result<(LossBreakdown<F>, Gradients<F>)> {
    let c = Coefficients::new(obj);
    if obj.phase == Phase::Pretrain && !batch.target.is_empty() {
        return Err(Error::Config("pretraining batches carry no target samples".into()));
    }
    let d = state.dim;
    let ns = batch.source.len();
    let nt = if c.target { batch.target.len() } else { 0 };
    let distill = if c.distill { batch.distill_targets.as_ref() } else { None };
    if let Some(t) = distill {
        if t.len() != ns {
            return Err(Error::Shape {
                expected: ns,
                actual: t.len(),
            });
        }
    }
    let inv = |n: usize| if n == 0 { F::zero() } else { F::one() / F::from_count(n) };
    let inv_s = inv(ns);
    let inv_t = inv(nt);
    let real_w = F::lit(obj.weights.real_weight);

    let mut jobs: Vec<(Sample<'_, F>, Term<'_, F>)> = Vec::with_capacity(ns + nt);
    for (i, s) in batch.source.iter().enumerate() {
        jobs.push((
            *s,
            Term {
                cls_w: if s.class == Class::Real { real_w } else { F::one() },
                cls_scale: F::lit(c.cls_s) * inv_s,
                align_scale: F::lit(c.align_s) * inv_s,
                con_scale: F::zero(),
                distill: distill.map(|t| (F::lit(c.dis) * inv_s, t[i].as_slice())),
            },
        ));
    }
    for s in batch.target.iter().take(nt) {
        jobs.push((
            *s,
            Term {
                cls_w: F::one(),
                cls_scale: inv_t,
                align_scale: inv_t,
                con_scale: inv_t,
                distill: None,
            },
        ));
    }
    let outs: Vec<SampleOut<F>> = jobs
        .par_iter()
        .map(|(s, t)| sample_pass(state, s, t, c.anchors))
        .collect::<Result<_>>()?;

    let mut g = Gradients::zeros(d);
    let (gw, gb) = g.adapter.split_at_mut(d * d);
    for ((s, _), o) in jobs.iter().zip(&outs) {
        for i in 0..d {
            let gi = o.g_u[i];
            if gi == F::zero() {
                continue;
            }
            for (w, &x) in gw[i * d..(i + 1) * d].iter_mut().zip(s.feature) {
                *w += gi * x;
            }
            gb[i] += gi;
        }
        for k in 0..2 {
            for (h, &zi) in g.head[k * d..(k + 1) * d].iter_mut().zip(&o.z) {
                *h += o.g_logits[k] * zi;
            }
            g.head[2 * d + k] += o.g_logits[k];
        }
        if c.anchors {
            for i in 0..d {
                g.anchors[i] += o.g_real[i];
                g.anchors[d + i] += o.g_fake[i];
            }
        }
    }

    let mean = |it: &mut dyn Iterator<Item = F>, n: usize| it.fold(F::zero(), |a, b| a + b) * inv(n);
    let (src, tgt) = outs.split_at(ns);
    let cls_source = Some(mean(&mut src.iter().map(|o| o.cls), ns));
    let align_source = c.anchors.then(|| mean(&mut src.iter().map(|o| o.align), ns));
    let (cls_target, align_target, con_target) = if c.target {
        (
            Some(mean(&mut tgt.iter().map(|o| o.cls), nt)),
            c.anchors.then(|| mean(&mut tgt.iter().map(|o| o.align), nt)),
            c.anchors.then(|| mean(&mut tgt.iter().map(|o| o.con), nt)),
        )
    } else {
        (None, None, None)
    };
    let distill_val = if c.distill {
        Some(match distill {
            Some(t) => {
                let zs: Vec<Vec<F>> = src.iter().map(|o| o.z.clone()).collect();
                distill_from_targets(&zs, t).0
            }
            None => F::zero(),
        })
    } else {
        None
    };
    let mut b = LossBreakdown {
        cls_source,
        align_source,
        cls_target,
        align_target,
        con_target,
        distill: distill_val,
        total: F::zero(),
        n_source: ns,
        n_target: nt,
        n_distill: if distill_val.is_some() && distill.is_some() { ns } else { 0 },
    };
    b.total = b.weighted_total(obj);
    Ok((b, g))
}
