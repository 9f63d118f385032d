//! Training examples and token-count bucketed batches.

use std::hash::{DefaultHasher, Hash, Hasher};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{GrayImage, TitExample, Vocab};
use crate::error::{Error, Result};

/// One tokenized example. Stages read the fields they need.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    /// Ground-truth source with EOS.
    pub source: Vec<usize>,
    /// Recognized source with EOS.
    pub recognized: Option<Vec<usize>>,
    pub image: Option<GrayImage>,
    /// Target without BOS/EOS.
    pub target: Vec<usize>,
}

impl TrainExample {
    pub fn from_pair(vocab: &Vocab, source: &str, target: &str) -> Self {
        Self {
            source: vocab.encode_source(source),
            recognized: None,
            image: None,
            target: vocab.tokenize(target),
        }
    }

    pub fn from_tit(vocab: &Vocab, ex: &TitExample) -> Self {
        Self {
            source: vocab.encode_source(&ex.text),
            recognized: ex.recognized.as_deref().map(|r| vocab.encode_source(r)),
            image: Some(ex.image.clone()),
            target: vocab.tokenize(&ex.translation),
        }
    }
}

/// Order-sensitive hash of a dataset.
pub fn data_hash(examples: &[TrainExample]) -> u64 {
    let mut h = DefaultHasher::new();
    for e in examples {
        e.source.hash(&mut h);
        e.recognized.hash(&mut h);
        e.target.hash(&mut h);
        if let Some(img) = &e.image {
            (img.width(), img.height()).hash(&mut h);
            img.pixels().hash(&mut h);
        }
    }
    h.finish()
}

/// Batches for one epoch: a seeded shuffle, a stable sort by length so
/// similar lengths share a batch, greedy packing up to `batch_tokens`, and a
/// seeded shuffle of the batch order. Pure in `(lengths, batch_tokens, seed,
/// epoch)`.
pub fn make_batches(lengths: &[usize], batch_tokens: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if lengths.is_empty() {
        return Err(Error::invalid("make_batches", "empty dataset"));
    }
    if batch_tokens == 0 {
        return Err(Error::invalid("make_batches", "batch_tokens must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut tokens = 0;
    for i in order {
        if !current.is_empty() && tokens + lengths[i] > batch_tokens {
            batches.push(std::mem::take(&mut current));
            tokens = 0;
        }
        tokens += lengths[i];
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}
