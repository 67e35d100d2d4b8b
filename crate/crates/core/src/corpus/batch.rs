//! Length-bucketed, token-budgeted batching with a seeded per-epoch shuffle.

use super::vocab::{Vocabulary, PAD};
use super::ParallelExample;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One padded batch. Row i of every field belongs to the same example.
/// `src` rows are `[lang, words..., eos]`; `tgt` rows are unit tokens without
/// bos/eos framing (the model adds those when it shifts). Masks mark real
/// positions; padding uses the pad token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub example_ids: Vec<String>,
    pub src: Vec<Vec<u32>>,
    pub src_mask: Vec<Vec<bool>>,
    pub tgt: Vec<Vec<u32>>,
    pub tgt_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.example_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.example_ids.is_empty()
    }

    pub fn real_token_count(&self) -> usize {
        let count = |masks: &[Vec<bool>]| {
            masks
                .iter()
                .map(|m| m.iter().filter(|&&b| b).count())
                .sum::<usize>()
        };
        count(&self.src_mask) + count(&self.tgt_mask)
    }
}

fn pad_to(rows: Vec<Vec<u32>>) -> (Vec<Vec<u32>>, Vec<Vec<bool>>) {
    let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut padded = Vec::with_capacity(rows.len());
    let mut masks = Vec::with_capacity(rows.len());
    for mut row in rows {
        let real = row.len();
        row.resize(width, PAD);
        let mut mask = vec![true; real];
        mask.resize(width, false);
        padded.push(row);
        masks.push(mask);
    }
    (padded, masks)
}

/// Deterministic in (seed, epoch): shuffle, stable-sort by length, pack
/// greedily under the padded-token budget, then shuffle batch order.
///
/// The budget counts `rows * (padded src + padded tgt + 2)`, the +2 covering
/// the bos/eos the model adds on the target side.
pub fn batch_iterator(
    examples: &[ParallelExample],
    vocab: &Vocabulary,
    max_tokens: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    #[derive(Clone)]
    struct Item {
        id: String,
        src: Vec<u32>,
        tgt: Vec<u32>,
    }

    let mut items = Vec::with_capacity(examples.len());
    for e in examples {
        let src = vocab.tokenize(&e.source_text, &e.source_lang)?;
        let tgt = vocab
            .unit_tokens(&e.target_units)
            .map_err(|err| Error::Example {
                example_id: e.example_id.clone(),
                msg: err.to_string(),
            })?;
        let cost = src.len() + tgt.len() + 2;
        if cost > max_tokens {
            return Err(Error::Example {
                example_id: e.example_id.clone(),
                msg: format!("needs {cost} tokens, over the batch budget {max_tokens}"),
            });
        }
        items.push(Item {
            id: e.example_id.clone(),
            src,
            tgt,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("batch.epoch.{epoch}")));
    for i in (1..items.len()).rev() {
        items.swap(i, rng.gen_range(0..=i));
    }
    // Stable sort keeps the shuffled order within a length class.
    items.sort_by_key(|it| it.src.len() + it.tgt.len());

    let mut batches: Vec<Vec<Item>> = Vec::new();
    let mut current: Vec<Item> = Vec::new();
    let (mut max_src, mut max_tgt) = (0usize, 0usize);
    for item in items {
        let cand_src = max_src.max(item.src.len());
        let cand_tgt = max_tgt.max(item.tgt.len());
        let cand_cost = (current.len() + 1) * (cand_src + cand_tgt + 2);
        if !current.is_empty() && cand_cost > max_tokens {
            batches.push(std::mem::take(&mut current));
            max_src = item.src.len();
            max_tgt = item.tgt.len();
        } else {
            max_src = cand_src;
            max_tgt = cand_tgt;
        }
        current.push(item);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    for i in (1..batches.len()).rev() {
        let j = rng.gen_range(0..=i);
        batches.swap(i, j);
    }

    Ok(batches
        .into_iter()
        .map(|items| {
            let example_ids = items.iter().map(|it| it.id.clone()).collect();
            let (src, src_mask) = pad_to(items.iter().map(|it| it.src.clone()).collect());
            let (tgt, tgt_mask) = pad_to(items.into_iter().map(|it| it.tgt).collect());
            Batch {
                example_ids,
                src,
                src_mask,
                tgt,
                tgt_mask,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn bundle() -> crate::corpus::CorpusBundle {
        generate_corpus(&CorpusSpec {
            high_pairs: 40,
            medium_pairs: 10,
            low_pairs: 4,
            dev_pairs: 5,
            test_pairs: 5,
            vocab_size: 12,
            num_units: 16,
            ..CorpusSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn single_example_forms_one_batch() {
        let b = bundle();
        let batches = batch_iterator(&b.train[..1], &b.vocab, 512, 0, 0).unwrap();
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 1);
        assert_eq!(batches[0].example_ids[0], b.train[0].example_id);
    }

    #[test]
    fn deterministic_per_epoch_and_different_across_epochs() {
        let b = bundle();
        let a1 = batch_iterator(&b.train, &b.vocab, 128, 7, 0).unwrap();
        let a2 = batch_iterator(&b.train, &b.vocab, 128, 7, 0).unwrap();
        assert_eq!(a1, a2);
        let b1 = batch_iterator(&b.train, &b.vocab, 128, 7, 1).unwrap();
        let order = |bs: &[Batch]| {
            bs.iter()
                .flat_map(|x| x.example_ids.clone())
                .collect::<Vec<_>>()
        };
        assert_ne!(order(&a1), order(&b1));
    }

    #[test]
    fn token_counts_are_conserved() {
        let b = bundle();
        let batches = batch_iterator(&b.train, &b.vocab, 96, 3, 2).unwrap();
        let batched: usize = batches.iter().map(|x| x.real_token_count()).sum();
        let direct: usize = b
            .train
            .iter()
            .map(|e| {
                b.vocab.tokenize(&e.source_text, &e.source_lang).unwrap().len()
                    + e.target_units.len()
            })
            .sum();
        assert_eq!(batched, direct);
        // Every example appears exactly once.
        let mut ids: Vec<String> = batches
            .iter()
            .flat_map(|x| x.example_ids.clone())
            .collect();
        ids.sort();
        let mut expect: Vec<String> = b.train.iter().map(|e| e.example_id.clone()).collect();
        expect.sort();
        assert_eq!(ids, expect);
    }

    #[test]
    fn budget_is_respected() {
        let b = bundle();
        let max_tokens = 96;
        let batches = batch_iterator(&b.train, &b.vocab, max_tokens, 3, 0).unwrap();
        for batch in &batches {
            let src_w = batch.src[0].len();
            let tgt_w = batch.tgt[0].len();
            assert!(batch.len() * (src_w + tgt_w + 2) <= max_tokens);
        }
    }

    #[test]
    fn oversized_example_is_rejected_by_name() {
        let b = bundle();
        let err = batch_iterator(&b.train, &b.vocab, 8, 0, 0).unwrap_err();
        match err {
            Error::Example { example_id, .. } => {
                assert!(b.train.iter().any(|e| e.example_id == example_id));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rows_are_rectangular_with_consistent_masks() {
        let b = bundle();
        let batches = batch_iterator(&b.train, &b.vocab, 128, 1, 0).unwrap();
        for batch in batches {
            let sw = batch.src[0].len();
            let tw = batch.tgt[0].len();
            for i in 0..batch.len() {
                assert_eq!(batch.src[i].len(), sw);
                assert_eq!(batch.tgt[i].len(), tw);
                assert_eq!(batch.src_mask[i].len(), sw);
                assert_eq!(batch.tgt_mask[i].len(), tw);
                // Mask is a prefix of trues; padding carries the pad token.
                for j in 0..sw {
                    if !batch.src_mask[i][j] {
                        assert_eq!(batch.src[i][j], PAD);
                    }
                }
                let real = batch.src_mask[i].iter().filter(|&&x| x).count();
                assert!(batch.src_mask[i][..real].iter().all(|&x| x));
            }
        }
    }
}
