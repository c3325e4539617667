//! Benchmark fixtures shared by the criterion targets.

use ftm_core::model::init_params;
use ftm_core::synth::{generate, CellCounts, CorpusSpec};
use ftm_core::train::Example;
use ftm_core::{ModelConfig, ParamStore, SummaryKind};

/// Desk-scale configuration for `kind` with freshly initialised weights.
pub fn desk_model(kind: SummaryKind) -> (ModelConfig, ParamStore<f32>) {
    let cfg = ModelConfig::desk().with_kind(kind);
    let params = init_params(&cfg, 1).expect("desk config is valid");
    (cfg, params)
}

/// A handful of training examples from a small synthetic corpus.
pub fn small_examples(n: usize) -> Vec<Example> {
    let spec = CorpusSpec {
        train: CellCounts {
            vt_directed: n,
            vt_undirected: n,
            tb_directed: n,
            tb_undirected: n,
        },
        eval: CellCounts {
            vt_directed: 0,
            vt_undirected: 0,
            tb_directed: 0,
            tb_undirected: 0,
        },
        ..CorpusSpec::default()
    };
    generate(&spec)
        .expect("default corpus spec is valid")
        .iter()
        .map(|u| Example::from_utterance(u, spec.context, spec.subsample).expect("stackable"))
        .collect()
}
