#![allow(dead_code)]

use dpgnet::data::Class;
use dpgnet::losses::{LossWeights, Objective, Toggles};
use dpgnet::model::{ModelState, Phase};
use dpgnet::numerics::RngStream;

/// Plain-formula objective, written without any of the library's loss code.
pub struct OracleBatch {
    pub source: Vec<(Vec<f64>, Class)>,
    pub target: Vec<(Vec<f64>, Class)>,
    pub distill: Option<Vec<Vec<f64>>>,
}

fn embed(st: &ModelState<f64>, x: &[f64]) -> Vec<f64> {
    let d = st.dim;
    let mut u = vec![0.0; d];
    for i in 0..d {
        let mut acc = st.adapter[d * d + i];
        for j in 0..d {
            acc += st.adapter[i * d + j] * x[j];
        }
        u[i] = acc;
    }
    let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter().map(|v| v / n).collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa.sqrt() * bb.sqrt())
}

/// Per-sample `(ce, align, con)` for class `y`.
fn terms(st: &ModelState<f64>, x: &[f64], y: Class, w: f64) -> (f64, f64, f64) {
    let d = st.dim;
    let z = embed(st, x);
    let l: Vec<f64> = (0..2)
        .map(|k| st.head[2 * d + k] + (0..d).map(|j| st.head[k * d + j] * z[j]).sum::<f64>())
        .collect();
    let p_y = l[y.index()].exp() / (l[0].exp() + l[1].exp());
    let ce = -w * p_y.ln();
    let anchor = |c: Class| &st.anchors[c.index() * d..(c.index() + 1) * d];
    let sc = cos(&z, anchor(y));
    let so = cos(&z, anchor(y.opposite()));
    let t = st.tau;
    let align = -((sc / t).exp() / ((sc / t).exp() + (so / t).exp())).ln();
    (ce, align, so - sc)
}

pub fn objective(st: &ModelState<f64>, b: &OracleBatch, obj: &Objective) -> f64 {
    let w = &obj.weights;
    let tg = &obj.toggles;
    let ns = b.source.len() as f64;
    let mut cls_s = 0.0;
    let mut al_s = 0.0;
    for (x, y) in &b.source {
        let rw = if *y == Class::Real { w.real_weight } else { 1.0 };
        let (c, a, _) = terms(st, x, *y, rw);
        cls_s += c / ns;
        al_s += a / ns;
    }
    match obj.phase {
        Phase::Pretrain => cls_s + if tg.tca { w.lambda * al_s } else { 0.0 },
        Phase::Joint => {
            let mut total = w.lambda1 * cls_s + if tg.tca { w.lambda2 * al_s } else { 0.0 };
            if tg.cpg && !b.target.is_empty() {
                let nt = b.target.len() as f64;
                for (x, y) in &b.target {
                    let (c, a, k) = terms(st, x, *y, 1.0);
                    total += c / nt;
                    if tg.tca {
                        total += (a + k) / nt;
                    }
                }
            }
            if tg.cd {
                if let Some(zd) = &b.distill {
                    let mut dis = 0.0;
                    for ((x, _), t) in b.source.iter().zip(zd) {
                        let z = embed(st, x);
                        dis += z.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / ns;
                    }
                    total += w.beta * dis;
                }
            }
            total
        }
    }
}

/// Parameter group selector for finite differences.
#[derive(Debug, Clone, Copy)]
pub enum Group {
    Adapter,
    Head,
    Anchors,
}

pub fn group_mut(st: &mut ModelState<f64>, g: Group) -> &mut Vec<f64> {
    match g {
        Group::Adapter => &mut st.adapter,
        Group::Head => &mut st.head,
        Group::Anchors => &mut st.anchors,
    }
}

pub fn central_difference(st: &ModelState<f64>, b: &OracleBatch, obj: &Objective, g: Group, i: usize, h: f64) -> f64 {
    let mut p = st.clone();
    group_mut(&mut p, g)[i] += h;
    let up = objective(&p, b, obj);
    group_mut(&mut p, g)[i] -= 2.0 * h;
    let down = objective(&p, b, obj);
    (up - down) / (2.0 * h)
}

/// Relative error with a unit floor on the scale, so that gradients that
/// are zero up to rounding are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn random_unit(rng: &mut RngStream, d: usize) -> Vec<f64> {
    let v: Vec<f64> = rng.gaussian_vec(d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// A perturbed model: random adapter near identity, random head, random unit anchors.
pub fn random_state(rng: &mut RngStream, d: usize) -> ModelState<f64> {
    let real = random_unit(rng, d);
    let fake = random_unit(rng, d);
    let mut st = ModelState::with_anchors(d, 0.07, 1e-3, 5e-4, &real, &fake).unwrap();
    for v in st.adapter.iter_mut() {
        *v += 0.3 * rng.gaussian();
    }
    for v in st.head.iter_mut() {
        *v = rng.gaussian();
    }
    st
}

pub fn class_of(rng: &mut RngStream) -> Class {
    if rng.uniform() < 0.5 {
        Class::Real
    } else {
        Class::Fake
    }
}

pub fn random_batch(rng: &mut RngStream, d: usize, ns: usize, nt: usize, distill: bool) -> OracleBatch {
    let source = (0..ns).map(|_| (random_unit(rng, d), class_of(rng))).collect();
    let target = (0..nt).map(|_| (random_unit(rng, d), class_of(rng))).collect();
    let distill = distill.then(|| (0..ns).map(|_| random_unit(rng, d)).collect());
    OracleBatch { source, target, distill }
}

pub fn objective_for(phase: Phase, toggles: Toggles) -> Objective {
    Objective {
        phase,
        weights: LossWeights::default(),
        toggles,
    }
}
