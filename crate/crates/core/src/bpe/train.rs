use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use rayon::prelude::*;

use super::{pack, unpack, BpeVocab, DEFAULT_CODEPOINT_OFFSET};
use crate::corpus::TokenSequence;
use crate::error::{Error, Result};

/// Merge-list trainer.
///
/// Pair frequencies count every adjacent position (overlaps included) across the
/// current form of every utterance. The most frequent pair wins; ties go to the
/// lexicographically smallest `(left, right)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeTrainer {
    pub target_vocab_size: u32,
    pub min_pair_freq: u64,
    pub offset: u32,
}

impl BpeTrainer {
    pub fn new(target_vocab_size: u32) -> Self {
        Self {
            target_vocab_size,
            min_pair_freq: 2,
            offset: DEFAULT_CODEPOINT_OFFSET,
        }
    }

    pub fn min_pair_freq(mut self, f: u64) -> Self {
        self.min_pair_freq = f;
        self
    }

    pub fn offset(mut self, offset: u32) -> Self {
        self.offset = offset;
        self
    }

    pub fn train(&self, corpus: &[TokenSequence]) -> Result<BpeVocab> {
        self.train_with_frequencies(corpus).map(|(v, _)| v)
    }

    /// Trains and also returns the corpus frequency each merge had when chosen.
    pub fn train_with_frequencies(&self, corpus: &[TokenSequence]) -> Result<(BpeVocab, Vec<u64>)> {
        let k = corpus
            .first()
            .map(TokenSequence::alphabet_size)
            .ok_or_else(|| Error::domain("BPE training needs a non-empty corpus"))?;
        if corpus.iter().any(|s| s.alphabet_size() != k) {
            return Err(Error::domain("corpus sequences have mixed alphabet sizes"));
        }
        if self.target_vocab_size < k {
            return Err(Error::domain(format!(
                "target vocabulary {} is smaller than the base alphabet {k}",
                self.target_vocab_size
            )));
        }
        if self.min_pair_freq == 0 {
            return Err(Error::domain("min_pair_freq must be at least 1"));
        }
        // validates the offset before any work happens
        BpeVocab::new(k, self.offset, Vec::new())?;

        let mut words: HashMap<&[u32], u64> = HashMap::new();
        for s in corpus {
            *words.entry(s.tokens()).or_default() += 1;
        }
        let mut words: Vec<(Vec<u32>, u64)> =
            words.into_iter().map(|(w, c)| (w.to_vec(), c)).collect();
        words.sort_unstable();
        let mut state = PairState::new(&words);

        let budget = (self.target_vocab_size - k) as usize;
        let mut merges = Vec::with_capacity(budget.min(1 << 16));
        let mut freqs = Vec::new();
        while merges.len() < budget {
            let Some((pair, freq)) = state.pop_best() else {
                break;
            };
            if freq < self.min_pair_freq {
                break;
            }
            let new_id = k + merges.len() as u32;
            state.apply_merge(&mut words, pair, new_id);
            merges.push(unpack(pair));
            freqs.push(freq);
        }
        Ok((BpeVocab::new(k, self.offset, merges)?, freqs))
    }
}

/// Trains a vocabulary with the default offset.
pub fn bpe_train(
    corpus: &[TokenSequence],
    target_vocab_size: u32,
    min_pair_freq: u64,
) -> Result<BpeVocab> {
    BpeTrainer::new(target_vocab_size)
        .min_pair_freq(min_pair_freq)
        .train(corpus)
}

struct PairState {
    counts: HashMap<u64, u64>,
    /// Words that may contain the pair; stale entries are tolerated.
    occurs: HashMap<u64, Vec<usize>>,
    /// Max-heap on (count, smallest pair). Entries can be stale; see `pop_best`.
    heap: BinaryHeap<(u64, Reverse<u64>)>,
}

impl PairState {
    fn new(words: &[(Vec<u32>, u64)]) -> Self {
        let (counts, occurs) = words
            .par_iter()
            .enumerate()
            .fold(
                || (HashMap::new(), HashMap::new()),
                |(mut counts, mut occurs): (HashMap<u64, u64>, HashMap<u64, Vec<usize>>),
                 (wi, (w, c))| {
                    for pair in w.windows(2) {
                        let p = pack(pair[0], pair[1]);
                        *counts.entry(p).or_default() += c;
                        let list = occurs.entry(p).or_default();
                        if list.last() != Some(&wi) {
                            list.push(wi);
                        }
                    }
                    (counts, occurs)
                },
            )
            .reduce(
                || (HashMap::new(), HashMap::new()),
                |(mut ca, mut oa), (cb, ob)| {
                    for (p, c) in cb {
                        *ca.entry(p).or_default() += c;
                    }
                    for (p, mut l) in ob {
                        oa.entry(p).or_default().append(&mut l);
                    }
                    (ca, oa)
                },
            );
        let heap = counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();
        Self {
            counts,
            occurs,
            heap,
        }
    }

    fn pop_best(&mut self) -> Option<(u64, u64)> {
        while let Some((c, Reverse(p))) = self.heap.pop() {
            let cur = self.counts.get(&p).copied().unwrap_or(0);
            if cur == c && c > 0 {
                return Some((p, c));
            }
            // Increases always push a fresh entry; decreases are re-queued lazily.
            if cur > 0 && cur < c {
                self.heap.push((cur, Reverse(p)));
            }
        }
        None
    }

    fn apply_merge(&mut self, words: &mut [(Vec<u32>, u64)], pair: u64, new_id: u32) {
        let (a, b) = unpack(pair);
        let mut targets = self.occurs.remove(&pair).unwrap_or_default();
        targets.sort_unstable();
        targets.dedup();

        let mut delta: HashMap<u64, i64> = HashMap::new();
        let mut gained: Vec<(u64, usize)> = Vec::new();
        for wi in targets {
            let (word, count) = &mut words[wi];
            let count = *count as i64;
            let mut bump = |p: u64, d: i64| {
                *delta.entry(p).or_default() += d * count;
                if d > 0 {
                    gained.push((p, wi));
                }
            };
            let mut i = 0;
            while i + 1 < word.len() {
                if word[i] == a && word[i + 1] == b {
                    bump(pair, -1);
                    if i > 0 {
                        let left = word[i - 1];
                        bump(pack(left, a), -1);
                        bump(pack(left, new_id), 1);
                    }
                    if i + 2 < word.len() {
                        let right = word[i + 2];
                        bump(pack(b, right), -1);
                        bump(pack(new_id, right), 1);
                    }
                    word[i] = new_id;
                    word.remove(i + 1);
                }
                i += 1;
            }
        }

        let mut touched: Vec<(u64, i64)> = delta.into_iter().filter(|&(_, d)| d != 0).collect();
        touched.sort_unstable();
        for (p, d) in touched {
            let entry = self.counts.entry(p).or_default();
            *entry = entry
                .checked_add_signed(d)
                .expect("pair count went negative");
            if d > 0 {
                self.heap.push((*entry, Reverse(p)));
            }
            if *entry == 0 {
                self.counts.remove(&p);
            }
        }
        for (p, wi) in gained {
            let list = self.occurs.entry(p).or_default();
            if list.last() != Some(&wi) {
                list.push(wi);
            }
        }
        self.counts.remove(&pair);
    }
}
