#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use hcr_core::embed::EmbeddingMatrix;
use hcr_core::models::{ModelConfig, ModelParams, NoteSeq, StayInput};
use hcr_core::ndcore::Tensor;

pub fn toy() -> ModelConfig {
    ModelConfig {
        conv_blocks: 2,
        filters: 4,
        kernel: 3,
        temporal_hidden: 3,
        cts_hiddens: vec![4, 3],
        note_length: 10,
        embedding_dim: 5,
        ..ModelConfig::default()
    }
}

pub fn embeddings(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingMatrix {
    let mut data = vec![0.0; dim];
    data.extend((0..(rows - 1) * dim).map(|_| rng.gen_range(-1.0..1.0)));
    EmbeddingMatrix { tokens: (0..rows).map(|i| format!("t{i}")).collect(), dim, data }
}

pub fn stay(id: u64, cfg: &ModelConfig, notes: usize, hours: usize, vocab: u32, rng: &mut ChaCha8Rng) -> StayInput {
    let l = cfg.note_length;
    let mut tokens = Vec::new();
    let mut mask = Vec::new();
    for _ in 0..notes {
        let real = rng.gen_range(1..=l);
        for i in 0..l {
            tokens.push(if i < real { rng.gen_range(1..vocab) } else { 0 });
            mask.push(i < real);
        }
    }
    let series =
        (0..hours * cfg.series_features).map(|i| if i % 2 == 0 { rng.gen_range(-2.0..2.0) } else { 1.0 }).collect();
    StayInput {
        hadm_id: id,
        label: rng.gen_bool(0.5),
        notes: Some(NoteSeq { note_length: l, n_notes: notes, tokens, mask }),
        series: Some(Tensor::new(&[hours, cfg.series_features], series).unwrap()),
    }
}

pub fn jitter(params: &mut ModelParams, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = params.tensors().keys().cloned().collect();
    for n in names {
        let positive = n.ends_with("running_var");
        for v in params.get_mut(&n).unwrap().data_mut() {
            *v += rng.gen_range(-0.3..0.3);
            if positive {
                *v = v.abs() + 0.1;
            }
        }
    }
}
