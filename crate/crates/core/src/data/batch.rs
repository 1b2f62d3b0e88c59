use rand::seq::SliceRandom;
use rand::Rng;

use super::{Sample, Vocabulary, END, PAD};

/// One (image, caption) training pair. `image` indexes the sample list the
/// pair was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPair {
    pub image: usize,
    pub class_id: usize,
    pub tokens: Vec<usize>,
}

/// A padded mini-batch of caption pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Image index per row.
    pub items: Vec<usize>,
    /// Token rows, right-padded with PAD to the longest row.
    pub tokens: Vec<Vec<usize>>,
    pub class_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn width(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }
}

/// Every caption of every sample as its own pair, in sample order. Captions
/// longer than `max_len` ids are cut to `max_len`, keeping the final END.
pub fn caption_pairs(samples: &[Sample], vocab: &Vocabulary, max_len: usize) -> Vec<CaptionPair> {
    let mut out = Vec::new();
    for (image, s) in samples.iter().enumerate() {
        for caption in &s.captions {
            let mut tokens = vocab.encode(caption);
            if tokens.len() > max_len && max_len >= 2 {
                tokens.truncate(max_len - 1);
                tokens.push(END);
            }
            out.push(CaptionPair {
                image,
                class_id: s.class_id,
                tokens,
            });
        }
    }
    out
}

/// Index chunks of `0..n`, shuffled first when requested. The last chunk may be short.
pub fn index_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R, shuffle: bool) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn pair_batches<R: Rng + ?Sized>(
    pairs: &[CaptionPair],
    batch_size: usize,
    rng: &mut R,
    shuffle: bool,
) -> Vec<Batch> {
    index_batches(pairs.len(), batch_size, rng, shuffle)
        .into_iter()
        .map(|idx| {
            let width = idx.iter().map(|&i| pairs[i].tokens.len()).max().unwrap_or(0);
            let tokens = idx
                .iter()
                .map(|&i| {
                    let mut row = pairs[i].tokens.clone();
                    row.resize(width, PAD);
                    row
                })
                .collect();
            Batch {
                items: idx.iter().map(|&i| pairs[i].image).collect(),
                tokens,
                class_ids: idx.iter().map(|&i| pairs[i].class_id).collect(),
            }
        })
        .collect()
}

/// Pairs every caption with its image and batches them.
pub fn make_batches<R: Rng + ?Sized>(
    samples: &[Sample],
    batch_size: usize,
    vocab: &Vocabulary,
    rng: &mut R,
    shuffle: bool,
) -> Vec<Batch> {
    pair_batches(&caption_pairs(samples, vocab, usize::MAX), batch_size, rng, shuffle)
}
