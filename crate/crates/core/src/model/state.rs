use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_embeddings, Class};
use crate::error::{Error, Result};
use crate::numerics::{axpy, cosine_sim, dot, normalize_in_place, softmax, AdamState, RngStream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizers<F> {
    pub adapter: AdamState<F>,
    pub head: AdamState<F>,
    pub anchors: AdamState<F>,
}

/// All trainable state.
///
/// Parameter groups are flat row-major buffers:
/// `adapter = [W (d x d) | b (d)]`, `head = [W (2 x d) | b (2)]`,
/// `anchors = [real (d) | fake (d)]`. Head row 0 scores the real class.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F> {
    pub dim: usize,
    pub adapter: Vec<F>,
    pub head: Vec<F>,
    pub anchors: Vec<F>,
    pub tau: F,
    pub optim: Optimizers<F>,
    pub phase: Phase,
    pub epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction<F> {
    pub label: Class,
    pub confidence: F,
    pub fake_score: F,
}

impl<F: Scalar> ModelState<F> {
    /// Identity adapter, zero head, seeded orthonormal anchor pair.
    pub fn new(dim: usize, tau: F, lr: F, weight_decay: F, seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("model dimension must be at least 2".into()));
        }
        if !(tau > F::zero()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        let mut rng = RngStream::derive(seed, 0xA11C);
        let mut real: Vec<F> = rng.gaussian_vec(dim);
        normalize_in_place(&mut real)?;
        let mut fake: Vec<F> = rng.gaussian_vec(dim);
        let c = dot(&fake, &real);
        axpy(-c, &real, &mut fake);
        normalize_in_place(&mut fake)?;
        Self::with_anchors(dim, tau, lr, weight_decay, &real, &fake)
    }

    pub fn with_anchors(dim: usize, tau: F, lr: F, weight_decay: F, real: &[F], fake: &[F]) -> Result<Self> {
        for a in [real, fake] {
            if a.len() != dim {
                return Err(Error::Shape {
                    expected: dim,
                    actual: a.len(),
                });
            }
        }
        let mut adapter = vec![F::zero(); dim * dim + dim];
        for i in 0..dim {
            adapter[i * dim + i] = F::one();
        }
        let head = vec![F::zero(); 2 * dim + 2];
        let mut anchors = Vec::with_capacity(2 * dim);
        anchors.extend_from_slice(real);
        anchors.extend_from_slice(fake);
        normalize_in_place(&mut anchors[..dim])?;
        normalize_in_place(&mut anchors[dim..])?;
        let optim = Optimizers {
            adapter: AdamState::new(adapter.len(), lr, weight_decay),
            head: AdamState::new(head.len(), lr, weight_decay),
            // Anchors are re-projected to the unit sphere after each step, so
            // weight decay would only rescale them before projection.
            anchors: AdamState::new(anchors.len(), lr, F::zero()),
        };
        Ok(Self {
            dim,
            adapter,
            head,
            anchors,
            tau,
            optim,
            phase: Phase::Pretrain,
            epoch: 0,
        })
    }

    pub fn adapter_weight(&self) -> &[F] {
        &self.adapter[..self.dim * self.dim]
    }

    pub fn adapter_bias(&self) -> &[F] {
        &self.adapter[self.dim * self.dim..]
    }

    pub fn head_row(&self, class: Class) -> &[F] {
        let d = self.dim;
        &self.head[class.index() * d..(class.index() + 1) * d]
    }

    pub fn head_bias(&self) -> &[F] {
        &self.head[2 * self.dim..]
    }

    pub fn anchor(&self, class: Class) -> &[F] {
        let d = self.dim;
        &self.anchors[class.index() * d..(class.index() + 1) * d]
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                actual: len,
            });
        }
        Ok(())
    }

    /// Pre-normalization adapter output `W x + b`.
    pub fn adapter_affine(&self, x: &[F]) -> Result<Vec<F>> {
        self.check_dim(x.len())?;
        let d = self.dim;
        let w = self.adapter_weight();
        Ok((0..d)
            .map(|i| dot(&w[i * d..(i + 1) * d], x) + self.adapter_bias()[i])
            .collect())
    }

    /// `normalize(W x + b)`, the representation every loss and bank uses.
    pub fn adapter_forward(&self, x: &[F]) -> Result<Vec<F>> {
        let mut u = self.adapter_affine(x)?;
        normalize_in_place(&mut u)
            .map_err(|_| Error::Numeric("adapter output is the zero vector".into()))?;
        Ok(u)
    }

    /// Like [`adapter_forward`](Self::adapter_forward) but names the sample on failure.
    pub fn embed(&self, id: &str, x: &[F]) -> Result<Vec<F>> {
        self.adapter_forward(x).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("sample `{id}`: {m}")),
            other => other,
        })
    }

    pub fn head_logits(&self, z: &[F]) -> [F; 2] {
        let b = self.head_bias();
        [
            dot(self.head_row(Class::Real), z) + b[0],
            dot(self.head_row(Class::Fake), z) + b[1],
        ]
    }

    /// `(p_real, p_fake)`.
    pub fn head_forward(&self, z: &[F]) -> Result<(F, F)> {
        self.check_dim(z.len())?;
        let p = softmax(&self.head_logits(z))?;
        Ok((p[0], p[1]))
    }

    /// Cosine similarities `(s_real, s_fake)` against the anchors.
    pub fn anchor_similarities(&self, z: &[F]) -> Result<(F, F)> {
        Ok((
            cosine_sim(z, self.anchor(Class::Real))?,
            cosine_sim(z, self.anchor(Class::Fake))?,
        ))
    }

    /// Prediction on an adapter output `z`. An exact tie goes to fake.
    pub fn predict_z(&self, z: &[F]) -> Result<Prediction<F>> {
        let (p_real, p_fake) = self.head_forward(z)?;
        Ok(decide(p_real, p_fake))
    }

    pub fn predict(&self, feature: &[F]) -> Result<Prediction<F>> {
        let z = self.adapter_forward(feature)?;
        self.predict_z(&z)
    }

    /// Projects both anchors back to unit length.
    pub fn renormalize_anchors(&mut self) -> Result<()> {
        let d = self.dim;
        normalize_in_place(&mut self.anchors[..d])?;
        normalize_in_place(&mut self.anchors[d..])
    }

    pub fn is_finite(&self) -> bool {
        self.adapter
            .iter()
            .chain(&self.head)
            .chain(&self.anchors)
            .all(|x| x.is_finite())
            && self.tau.is_finite()
    }
}

/// Arg-max with ties resolved to fake.
pub(crate) fn decide<F: Scalar>(p_real: F, p_fake: F) -> Prediction<F> {
    if p_real > p_fake {
        Prediction {
            label: Class::Real,
            confidence: p_real,
            fake_score: p_fake,
        }
    } else {
        Prediction {
            label: Class::Fake,
            confidence: p_fake,
            fake_score: p_fake,
        }
    }
}

/// Loads a two-record DPGE anchor file tagged `anchor_real` / `anchor_fake`.
pub fn load_anchor_file<F: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<F>, Vec<F>)> {
    let set = read_embeddings::<F>(path)?;
    if set.len() != 2 {
        return Err(Error::Format(format!("anchor file must hold exactly 2 records, found {}", set.len())));
    }
    let find = |tag: &str| {
        set.records()
            .iter()
            .find(|r| r.dataset_tag == tag || r.id == tag)
            .map(|r| r.feature.clone())
            .ok_or_else(|| Error::Format(format!("anchor file lacks a record tagged `{tag}`")))
    };
    Ok((find("anchor_real")?, find("anchor_fake")?))
}
