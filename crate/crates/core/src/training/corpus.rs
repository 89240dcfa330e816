use rand::seq::index::sample;
use rand::Rng;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::rng::{stream, Stream};

/// Symbols reachable from each two-token context.
pub const CONTEXT_SUPPORT: usize = 4;

/// Train/validation token streams.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Order-2 Markov chain over `vocab` symbols. Each context `(a, b)` draws
/// its next symbol from a random distribution over `CONTEXT_SUPPORT`
/// distinct symbols. The first 90% of the stream is training data.
pub fn synth_corpus(seed: u64, vocab: usize, length: usize) -> Corpus {
    assert!(vocab >= 2, "vocab must be at least 2");
    assert!(length >= 20, "corpus too short to split");
    let mut rng = stream(seed, Stream::Corpus);
    let support = CONTEXT_SUPPORT.min(vocab);
    let table: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..vocab * vocab)
        .map(|_| {
            let symbols = sample(&mut rng, vocab, support).into_vec();
            let weights: Vec<f64> = (0..support).map(|_| rng.random_range(0.05..1.0)).collect();
            (symbols, WeightedIndex::new(weights).expect("positive weights"))
        })
        .collect();

    let mut seq = Vec::with_capacity(length);
    seq.push(rng.random_range(0..vocab));
    seq.push(rng.random_range(0..vocab));
    while seq.len() < length {
        let ctx = seq[seq.len() - 2] * vocab + seq[seq.len() - 1];
        let (symbols, dist) = &table[ctx];
        seq.push(symbols[dist.sample(&mut rng)]);
    }
    let split = length * 9 / 10;
    let val = seq.split_off(split);
    Corpus {
        vocab,
        train: seq,
        val,
    }
}

/// Inputs and next-token targets for `seqs` windows of `seq_len` tokens, stacked row-wise.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn from_starts(tokens: &[usize], starts: &[usize], seq_len: usize) -> Batch {
        let mut inputs = Vec::with_capacity(starts.len() * seq_len);
        let mut targets = Vec::with_capacity(starts.len() * seq_len);
        for &s in starts {
            inputs.extend_from_slice(&tokens[s..s + seq_len]);
            targets.extend_from_slice(&tokens[s + 1..s + seq_len + 1]);
        }
        Batch {
            inputs,
            targets,
            seq_len,
        }
    }

    /// `batch_size` windows at uniformly random offsets.
    pub fn sample<R: Rng + ?Sized>(tokens: &[usize], batch_size: usize, seq_len: usize, rng: &mut R) -> Batch {
        let hi = tokens.len() - seq_len - 1;
        let starts: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..=hi)).collect();
        Self::from_starts(tokens, &starts, seq_len)
    }

    /// Consecutive non-overlapping windows, grouped into at most `max_batches` batches.
    pub fn sequential(tokens: &[usize], batch_size: usize, seq_len: usize, max_batches: usize) -> Vec<Batch> {
        let windows = (tokens.len() - 1) / seq_len;
        let starts: Vec<usize> = (0..windows).map(|w| w * seq_len).collect();
        starts
            .chunks(batch_size)
            .take(max_batches)
            .map(|c| Self::from_starts(tokens, c, seq_len))
            .collect()
    }

    pub fn sequences(&self) -> usize {
        self.inputs.len() / self.seq_len
    }
}
