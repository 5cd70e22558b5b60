use std::cmp::Reverse;
use std::collections::BinaryHeap;

use super::BpeVocab;

const NONE: usize = usize::MAX;

/// Greedy in-training-order encoding.
///
/// Equivalent to sweeping the merge list and rewriting each rule's occurrences
/// left to right: a merge of rank `r` produces id `K + r`, and every pair that
/// contains it has a rank above `r`, so always taking the lowest-ranked live pair
/// (leftmost first) visits rules in the same order as the sweep.
pub(crate) fn encode_ids(vocab: &BpeVocab, tokens: &[u32]) -> Vec<u32> {
    let n = tokens.len();
    if vocab.merges.is_empty() || n < 2 {
        return tokens.to_vec();
    }
    let mut ids = tokens.to_vec();
    let mut prev: Vec<usize> = (0..n).map(|i| i.wrapping_sub(1)).collect();
    prev[0] = NONE;
    let mut next: Vec<usize> = (1..=n).collect();
    next[n - 1] = NONE;
    let mut alive = vec![true; n];

    let mut heap = BinaryHeap::new();
    for i in 0..n - 1 {
        if let Some(r) = vocab.rank(ids[i], ids[i + 1]) {
            heap.push(Reverse((r, i)));
        }
    }

    while let Some(Reverse((rank, pos))) = heap.pop() {
        if !alive[pos] {
            continue;
        }
        let nx = next[pos];
        if nx == NONE || vocab.rank(ids[pos], ids[nx]) != Some(rank) {
            continue;
        }
        ids[pos] = vocab.base_size + rank;
        alive[nx] = false;
        next[pos] = next[nx];
        if next[pos] != NONE {
            prev[next[pos]] = pos;
        }
        let pv = prev[pos];
        if pv != NONE {
            if let Some(r) = vocab.rank(ids[pv], ids[pos]) {
                heap.push(Reverse((r, pv)));
            }
        }
        if next[pos] != NONE {
            if let Some(r) = vocab.rank(ids[pos], ids[next[pos]]) {
                heap.push(Reverse((r, pos)));
            }
        }
    }

    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    while i != NONE {
        out.push(ids[i]);
        i = next[i];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bpe::DEFAULT_CODEPOINT_OFFSET;

    /// The literal definition: one left-to-right rewrite pass per rule.
    fn sweep(vocab: &BpeVocab, tokens: &[u32]) -> Vec<u32> {
        let mut cur = tokens.to_vec();
        for (rank, &(l, r)) in vocab.merges().iter().enumerate() {
            let mut out = Vec::with_capacity(cur.len());
            let mut i = 0;
            while i < cur.len() {
                if i + 1 < cur.len() && cur[i] == l && cur[i + 1] == r {
                    out.push(vocab.base_size() + rank as u32);
                    i += 2;
                } else {
                    out.push(cur[i]);
                    i += 1;
                }
            }
            cur = out;
        }
        cur
    }

    #[test]
    fn overlapping_runs_follow_left_to_right() {
        let vocab = BpeVocab::new(2, DEFAULT_CODEPOINT_OFFSET, vec![(0, 0), (2, 0)]).unwrap();
        for n in 1..9 {
            let toks = vec![0; n];
            assert_eq!(encode_ids(&vocab, &toks), sweep(&vocab, &toks), "n={n}");
        }
    }

    #[test]
    fn matches_sweep_on_nested_rules() {
        let merges = vec![(1, 2), (3, 3), (0, 3), (4, 1), (5, 2), (6, 4), (2, 1)];
        let vocab = BpeVocab::new(3, DEFAULT_CODEPOINT_OFFSET, merges).unwrap();
        let mut state = 12345u64;
        for _ in 0..500 {
            let len = (state % 23) as usize + 1;
            let toks: Vec<u32> = (0..len)
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((state >> 33) % 3) as u32
                })
                .collect();
            assert_eq!(encode_ids(&vocab, &toks), sweep(&vocab, &toks), "{toks:?}");
        }
    }
}
