use crate::data::record::EmbeddingSet;
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::scalar::Scalar;

/// Indices into the source and target sets for one optimizer step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One epoch of joint batches.
///
/// The source order is a fresh shuffle, cut into `batch_source`-sized chunks
/// (the last chunk may be short), so every source record appears exactly once.
/// When `batch_target > 0` the target order is shuffled next and consumed
/// sequentially with wraparound, `batch_target` indices per batch.
pub fn make_batches<F: Scalar>(
    source: &EmbeddingSet<F>,
    target: &EmbeddingSet<F>,
    stream: &mut RngStream,
    batch_source: usize,
    batch_target: usize,
) -> Result<Vec<JointBatch>> {
    if source.is_empty() {
        return Err(Error::Dataset("source set is empty".into()));
    }
    if batch_source == 0 {
        return Err(Error::Config("batch_source must be at least 1".into()));
    }
    if batch_target > 0 && target.is_empty() {
        return Err(Error::Dataset("target batches requested from an empty target set".into()));
    }
    let mut order: Vec<usize> = (0..source.len()).collect();
    stream.shuffle(&mut order);
    let target_order = if batch_target > 0 {
        let mut t: Vec<usize> = (0..target.len()).collect();
        stream.shuffle(&mut t);
        t
    } else {
        Vec::new()
    };
    let mut cursor = 0usize;
    Ok(order
        .chunks(batch_source)
        .map(|chunk| {
            let target = (0..batch_target)
                .map(|_| {
                    let idx = target_order[cursor % target_order.len()];
                    cursor += 1;
                    idx
                })
                .collect();
            JointBatch {
                source: chunk.to_vec(),
                target,
            }
        })
        .collect())
}
