use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use super::{merge_pair, split_words, TokenizerError, Vocab, BASE_VOCAB_SIZE, BYTE_OFFSET};

type Pair = (u32, u32);

struct Word {
    syms: Vec<u32>,
    freq: i64,
}

/// Learn merges greedily by pair frequency until `target_size` pieces exist
/// or no pair occurs at least twice. Ties go to the lexicographically
/// smallest `(left bytes, right bytes)`.
pub fn train_bpe(corpus: &str, target_size: usize) -> Result<Vocab, TokenizerError> {
    if corpus.trim().is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    if target_size < BASE_VOCAB_SIZE {
        return Err(TokenizerError::TargetTooSmall { target: target_size, base: BASE_VOCAB_SIZE });
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for w in split_words(corpus) {
        *counts.entry(w).or_default() += 1;
    }
    let mut unique: Vec<(&str, i64)> = counts.into_iter().collect();
    unique.sort_unstable();
    let mut words: Vec<Word> = unique
        .into_iter()
        .map(|(w, freq)| Word { syms: w.bytes().map(|b| BYTE_OFFSET + b as u32).collect(), freq })
        .collect();

    let mut pieces: Vec<Vec<u8>> = vec![Vec::new(); BYTE_OFFSET as usize];
    pieces.extend((0..=255u8).map(|b| vec![b]));

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut where_: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in w.syms.windows(2) {
            let p = (p[0], p[1]);
            *pair_counts.entry(p).or_default() += w.freq;
            where_.entry(p).or_default().insert(wi);
        }
    }
    let key = |pieces: &[Vec<u8>], p: Pair| Reverse((pieces[p.0 as usize].clone(), pieces[p.1 as usize].clone()));
    let mut heap: BinaryHeap<(i64, Reverse<(Vec<u8>, Vec<u8>)>, Pair)> =
        pair_counts.iter().map(|(&p, &c)| (c, key(&pieces, p), p)).collect();

    let mut merges = Vec::new();
    while BASE_VOCAB_SIZE + merges.len() < target_size {
        let Some((count, _, pair)) = heap.pop() else { break };
        if pair_counts.get(&pair).copied().unwrap_or(0) != count {
            continue; // stale entry
        }
        if count < 2 {
            break;
        }
        let new_id = (BASE_VOCAB_SIZE + merges.len()) as u32;
        let mut bytes = pieces[pair.0 as usize].clone();
        bytes.extend_from_slice(&pieces[pair.1 as usize]);
        pieces.push(bytes);
        merges.push(pair);

        let affected: Vec<usize> = where_.remove(&pair).map(|s| s.into_iter().collect()).unwrap_or_default();
        let mut touched: BTreeSet<Pair> = BTreeSet::new();
        for wi in affected {
            let w = &mut words[wi];
            for p in w.syms.windows(2) {
                let p = (p[0], p[1]);
                *pair_counts.get_mut(&p).unwrap() -= w.freq;
                touched.insert(p);
            }
            w.syms = merge_pair(&w.syms, pair, new_id);
            for p in w.syms.windows(2) {
                let p = (p[0], p[1]);
                *pair_counts.entry(p).or_default() += w.freq;
                where_.entry(p).or_default().insert(wi);
                touched.insert(p);
            }
        }
        pair_counts.remove(&pair);
        for p in touched {
            match pair_counts.get(&p) {
                Some(&c) if c > 0 => heap.push((c, key(&pieces, p), p)),
                Some(_) => {
                    pair_counts.remove(&p);
                }
                None => {}
            }
        }
    }
    Ok(Vocab::from_merges(merges, target_size))
}
