use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hcr_core::embed::{build_vocab, cosine, train_skipgram, SkipGramConfig, Vocabulary};

/// Documents drawn from one of two disjoint five-word blocks.
fn two_topics(docs: usize, seed: u64) -> (Vec<Vec<String>>, Vec<String>, Vec<String>) {
    let a: Vec<String> = (0..5).map(|i| format!("alpha{i}")).collect();
    let b: Vec<String> = (0..5).map(|i| format!("beta{i}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = (0..docs)
        .map(|d| {
            let block = if d % 2 == 0 { &a } else { &b };
            (0..30).map(|_| block[rng.gen_range(0..block.len())].clone()).collect()
        })
        .collect();
    (corpus, a, b)
}

fn ids(corpus: &[Vec<String>], vocab: &Vocabulary) -> Vec<Vec<u32>> {
    corpus.iter().map(|d| d.iter().filter_map(|t| vocab.id(t)).collect()).collect()
}

fn cfg() -> SkipGramConfig {
    SkipGramConfig { dim: 12, window: 3, epochs: 8, negatives: 4, lr: 0.05, seed: 4, ..SkipGramConfig::default() }
}

#[test]
fn planted_topics_are_recovered() {
    let (corpus, a, b) = two_topics(120, 1);
    let vocab = build_vocab(corpus.iter().map(Vec::as_slice), 0).unwrap();
    let r = train_skipgram(&ids(&corpus, &vocab), &vocab, &cfg()).unwrap();
    let row = |t: &str| r.embeddings.row(vocab.id(t).unwrap()).to_vec();
    let mean_cos = |xs: &[String], ys: &[String]| {
        let mut s = 0.0;
        let mut n = 0.0;
        for x in xs {
            for y in ys {
                if x != y {
                    s += cosine(&row(x), &row(y));
                    n += 1.0;
                }
            }
        }
        s / n
    };
    let intra = (mean_cos(&a, &a) + mean_cos(&b, &b)) / 2.0;
    let inter = mean_cos(&a, &b);
    assert!(intra > inter + 0.2, "intra {intra} inter {inter}");
}

#[test]
fn single_thread_training_is_reproducible_and_keeps_padding_zero() {
    let (corpus, _, _) = two_topics(40, 2);
    let vocab = build_vocab(corpus.iter().map(Vec::as_slice), 0).unwrap();
    let docs = ids(&corpus, &vocab);
    let x = train_skipgram(&docs, &vocab, &cfg()).unwrap();
    let y = train_skipgram(&docs, &vocab, &cfg()).unwrap();
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x.embeddings.data), bits(&y.embeddings.data));
    assert_eq!(x.embeddings.rows(), vocab.len());
    assert!(x.embeddings.row(0).iter().all(|v| *v == 0.0));
    assert_eq!(x.embeddings.tokens, vocab.tokens());

    let other = train_skipgram(&docs, &vocab, &SkipGramConfig { seed: 5, ..cfg() }).unwrap();
    assert_ne!(bits(&x.embeddings.data), bits(&other.embeddings.data));
}

#[test]
fn loss_falls_over_the_first_epochs() {
    let (corpus, _, _) = two_topics(80, 3);
    let vocab = build_vocab(corpus.iter().map(Vec::as_slice), 0).unwrap();
    let r = train_skipgram(&ids(&corpus, &vocab), &vocab, &SkipGramConfig { epochs: 5, ..cfg() }).unwrap();
    assert_eq!(r.epoch_losses.len(), 5);
    for w in r.epoch_losses.windows(2) {
        assert!(w[1] <= w[0] * 1.05, "{:?}", r.epoch_losses);
    }
    assert!(r.epoch_losses[4] < r.epoch_losses[0]);
}
