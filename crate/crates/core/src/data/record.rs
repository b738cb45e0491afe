use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::norm;
use crate::scalar::Scalar;

/// Binary class. Index 0 is real, 1 is fake.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Real,
    Fake,
}

impl Class {
    pub const ALL: [Class; 2] = [Class::Real, Class::Fake];

    #[inline]
    pub fn index(self) -> usize {
        match self {
            Class::Real => 0,
            Class::Fake => 1,
        }
    }

    #[inline]
    pub fn opposite(self) -> Class {
        match self {
            Class::Real => Class::Fake,
            Class::Fake => Class::Real,
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Class::Real => "real",
            Class::Fake => "fake",
        })
    }
}

/// Stored label: a class or unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
    Unknown,
}

impl Label {
    pub fn class(self) -> Option<Class> {
        match self {
            Label::Real => Some(Class::Real),
            Label::Fake => Some(Class::Fake),
            Label::Unknown => None,
        }
    }

    pub fn to_i8(self) -> i8 {
        match self {
            Label::Unknown => -1,
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_i8(v: i8) -> Option<Self> {
        match v {
            -1 => Some(Label::Unknown),
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }
}

impl From<Class> for Label {
    fn from(c: Class) -> Self {
        match c {
            Class::Real => Label::Real,
            Class::Fake => Label::Fake,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Source,
    TargetUnlabeled,
    Eval,
}

impl DomainKind {
    pub fn to_u8(self) -> u8 {
        match self {
            DomainKind::Source => 0,
            DomainKind::TargetUnlabeled => 1,
            DomainKind::Eval => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(DomainKind::Source),
            1 => Some(DomainKind::TargetUnlabeled),
            2 => Some(DomainKind::Eval),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord<F> {
    pub id: String,
    pub video_id: String,
    pub domain_kind: DomainKind,
    pub dataset_tag: String,
    pub label: Label,
    pub feature: Vec<F>,
}

impl<F: Scalar> EmbeddingRecord<F> {
    /// Label/domain consistency: source records are labeled, unlabeled
    /// target records are not.
    pub fn label_domain_violation(&self) -> Option<String> {
        match (self.domain_kind, self.label) {
            (DomainKind::Source, Label::Unknown) => Some("source record without a label".into()),
            (DomainKind::TargetUnlabeled, Label::Real | Label::Fake) => {
                Some("unlabeled target record carries a label".into())
            }
            _ => None,
        }
    }
}

/// An ordered collection of records sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet<F> {
    dim: usize,
    records: Vec<EmbeddingRecord<F>>,
    pub provenance: String,
}

impl<F: Scalar> EmbeddingSet<F> {
    /// Validates dimension, id uniqueness, and finiteness.
    pub fn new(
        dim: usize,
        records: Vec<EmbeddingRecord<F>>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Dataset("embedding dimension must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.feature.len() != dim {
                return Err(Error::data(
                    &r.id,
                    format!("feature length {} differs from set dim {dim}", r.feature.len()),
                ));
            }
            if r.feature.iter().any(|x| !x.is_finite()) {
                return Err(Error::data(&r.id, "non-finite feature value"));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::data(&r.id, "duplicate id"));
            }
        }
        Ok(Self {
            dim,
            records,
            provenance: provenance.into(),
        })
    }

    pub fn empty(dim: usize, provenance: impl Into<String>) -> Result<Self> {
        Self::new(dim, Vec::new(), provenance)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[EmbeddingRecord<F>] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn into_records(self) -> Vec<EmbeddingRecord<F>> {
        self.records
    }

    /// L2-normalizes every feature; a zero norm names the offending record.
    pub fn normalized(mut self) -> Result<Self> {
        for r in &mut self.records {
            let n = norm(&r.feature);
            if !(n > F::zero()) {
                return Err(Error::data(&r.id, "zero-norm feature"));
            }
            for x in &mut r.feature {
                *x /= n;
            }
        }
        Ok(self)
    }

    /// Concatenates sets of equal dimension; ids must stay unique.
    pub fn concat(parts: &[&EmbeddingSet<F>], provenance: impl Into<String>) -> Result<Self> {
        let dim = parts
            .first()
            .map(|s| s.dim)
            .ok_or_else(|| Error::Dataset("nothing to concatenate".into()))?;
        let mut records = Vec::new();
        for p in parts {
            if p.dim != dim {
                return Err(Error::Shape {
                    expected: dim,
                    actual: p.dim,
                });
            }
            records.extend(p.records.iter().cloned());
        }
        Self::new(dim, records, provenance)
    }

    /// Copy with every label replaced, e.g. to strip held-out labels.
    pub fn relabeled(&self, domain_kind: DomainKind, label: impl Fn(&EmbeddingRecord<F>) -> Label) -> Self {
        let records = self
            .records
            .iter()
            .map(|r| EmbeddingRecord {
                label: label(r),
                domain_kind,
                ..r.clone()
            })
            .collect();
        Self {
            dim: self.dim,
            records,
            provenance: self.provenance.clone(),
        }
    }

    /// Distinct dataset tags in first-appearance order.
    pub fn dataset_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = Vec::new();
        for r in &self.records {
            if !tags.iter().any(|t| t == &r.dataset_tag) {
                tags.push(r.dataset_tag.clone());
            }
        }
        tags
    }

    pub fn filter_tag(&self, tag: &str) -> Self {
        Self {
            dim: self.dim,
            records: self
                .records
                .iter()
                .filter(|r| r.dataset_tag == tag)
                .cloned()
                .collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn to_precision<G: Scalar>(&self) -> EmbeddingSet<G> {
        EmbeddingSet {
            dim: self.dim,
            records: self
                .records
                .iter()
                .map(|r| EmbeddingRecord {
                    id: r.id.clone(),
                    video_id: r.video_id.clone(),
                    domain_kind: r.domain_kind,
                    dataset_tag: r.dataset_tag.clone(),
                    label: r.label,
                    feature: r.feature.iter().map(|x| G::lit(x.as_f64())).collect(),
                })
                .collect(),
            provenance: self.provenance.clone(),
        }
    }
}
