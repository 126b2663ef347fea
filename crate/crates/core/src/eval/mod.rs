//! Evaluation harness: metrics, caption statistics, synthetic corpora and
//! experiment drivers.

mod experiment;
mod metrics;
mod stats;
mod synth;

pub use experiment::{
    ablate_slots, ablation_csv, ablation_table, cross_eval, evaluate, knowledge_from_corpus, parse_combos,
    run_pipeline, run_with_knowledge, table3_combos, AblationRow, MetricsReport, PipelineConfig, RunOutput,
    TABLE3_COMBOS,
};
pub use metrics::{accuracy, average_precision, roc_auc, roc_curve};
pub use stats::{caption_stats, CaptionStats};
pub use synth::{generate_synthetic, AspectPool, SynthConfig, SynthDomain, SynthManifest, SyntheticSplit, Vocabulary};
