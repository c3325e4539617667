//! In-memory training and scoring on a generated corpus, shared by the
//! commands and the test suites.

use ftm_core::metrics::{score_utterances, Scored};
use ftm_core::synth::{CorpusSpec, Split, Utterance};
use ftm_core::train::training_pool;
use ftm_core::{
    pretrain_phonetic, train_discriminative, Bound, Example, FtmError, Invocation, ModelConfig, ParamStore, Result,
    SummaryKind, TrainConfig, TrainOutcome,
};

fn examples<'a>(utts: impl IntoIterator<Item = &'a Utterance>, spec: &CorpusSpec) -> Result<Vec<Example>> {
    utts.into_iter()
        .map(|u| Example::from_utterance(u, spec.context, spec.subsample))
        .collect()
}

/// Phonetic pre-training on every training utterance of the corpus.
pub fn pretrain(cfg: &ModelConfig, tc: &TrainConfig, spec: &CorpusSpec, corpus: &[Utterance]) -> Result<TrainOutcome> {
    let ex = examples(corpus.iter().filter(|u| u.split == Split::Train), spec)?;
    pretrain_phonetic(cfg, tc, ex)
}

/// Discriminative fine-tuning of `cfg.summary_kind` on `tc.train_sets`.
pub fn finetune(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    spec: &CorpusSpec,
    corpus: &[Utterance],
    pretrained: &ParamStore<f32>,
) -> Result<TrainOutcome> {
    let pool = training_pool(corpus, &tc.train_sets, tc.payload_augmentation, spec.min_raw_frames)?;
    let ex = examples(pool.iter().map(|u| u.as_ref()), spec)?;
    train_discriminative(cfg, tc, ex, pretrained)
}

/// Scores the `split` utterances of one invocation type.
pub fn score_split(
    cfg: &ModelConfig,
    params: &ParamStore<f32>,
    spec: &CorpusSpec,
    corpus: &[Utterance],
    split: Split,
    inv: Invocation,
) -> Result<Vec<Scored>> {
    let kind = cfg.summary_kind;
    ftm_core::model::check_compatible(cfg, params)?;
    let head = kind.head_prefix();
    if !params.names().any(|n| n.starts_with(head)) {
        return Err(FtmError::Config(format!("checkpoint has no {kind} head parameters")));
    }
    let utts: Vec<&Utterance> = corpus.iter().filter(|u| u.split == split && u.invocation == inv).collect();
    if utts.is_empty() {
        return Err(FtmError::Data(format!("no {} {} utterances in the corpus", split.name(), inv)));
    }
    score_utterances(cfg, &Bound::new(params, false), kind, &utts, spec.context, spec.subsample)
}

/// Model kinds to train per row of the accuracy matrix.
pub fn matrix_train_sets() -> Vec<Vec<Invocation>> {
    vec![vec![Invocation::Vt], vec![Invocation::Tb], vec![Invocation::Vt, Invocation::Tb]]
}

pub fn tag(sets: &[Invocation]) -> String {
    TrainConfig {
        train_sets: sets.to_vec(),
        ..TrainConfig::default()
    }
    .train_tag()
}

pub fn all_kinds() -> Vec<SummaryKind> {
    SummaryKind::ALL.to_vec()
}
