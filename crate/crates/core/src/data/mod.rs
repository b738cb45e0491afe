//! Embedding records, the DPGE file format, the synthetic domain-shift
//! generator, and joint batch sampling.

mod batch;
pub(crate) mod format;
mod record;
mod synth;

pub use batch::{make_batches, JointBatch};
pub use format::{read_embeddings, read_raw, write_embeddings, RawRecord, MAGIC, VERSION};
pub use record::{Class, DomainKind, EmbeddingRecord, EmbeddingSet, Label};
pub use synth::{synth_generate, SynthConfig, SynthData, TargetDomain};
