//! End-to-end experiment drivers: knowledge → training → evaluation,
//! slot-combination ablations and cross-dataset evaluation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{accuracy, average_precision, roc_auc};
use crate::classifier::{predict_corpus, train, ModelParams, TrainConfig};
use crate::embedder::{Embedder, EmbedderConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::knowledge::{build_knowledge, default_prompts, Aspect, KnowledgeBase, PromptSet, Summarizer};
use crate::textcorpus::{group_by_class, CaptionCorpus};

/// Every setting that influences a training run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub embedder: EmbedderConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Frames sampled per video.
    pub frames: usize,
    pub aspects: Vec<Aspect>,
    pub threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            embedder: EmbedderConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            frames: 8,
            aspects: Aspect::ALL.to_vec(),
            threshold: 0.5,
        }
    }
}

impl PipelineConfig {
    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }

    pub fn validate(&self) -> Result<()> {
        self.embedder.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.frames == 0 {
            return Err(Error::Invalid("frames must be positive".into()));
        }
        if self.aspects.is_empty() {
            return Err(Error::Invalid("at least one aspect must be active".into()));
        }
        if self.embedder.d != self.encoder.d_model {
            return Err(Error::dims("embedder d vs encoder d_model", self.encoder.d_model, self.embedder.d));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_tag: String,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    pub acc: Option<f64>,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    pub config_digest: String,
}

impl MetricsReport {
    /// Computes every metric that is defined for the given labels.
    pub fn compute(dataset_tag: &str, scores: &[f64], labels: &[bool], threshold: f64, config_digest: &str) -> Result<Self> {
        let n_pos = labels.iter().filter(|&&l| l).count();
        let n_neg = labels.len() - n_pos;
        if n_pos + n_neg < 2 {
            return Err(Error::Invalid("a report needs at least two items".into()));
        }
        Ok(MetricsReport {
            dataset_tag: dataset_tag.to_string(),
            auc: roc_auc(scores, labels).ok(),
            ap: average_precision(scores, labels).ok(),
            acc: Some(accuracy(scores, labels, threshold)?),
            threshold,
            n_pos,
            n_neg,
            config_digest: config_digest.to_string(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned two-column plain text.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let rows = [
            ("dataset", self.dataset_tag.clone()),
            ("auc", fmt(self.auc)),
            ("ap", fmt(self.ap)),
            ("acc", fmt(self.acc)),
            ("threshold", format!("{}", self.threshold)),
            ("n_pos", self.n_pos.to_string()),
            ("n_neg", self.n_neg.to_string()),
            ("config", self.config_digest.clone()),
        ];
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}

/// Builds class knowledge from a training corpus.
pub fn knowledge_from_corpus(
    corpus: &CaptionCorpus,
    prompts: &PromptSet,
    embedder: &dyn Embedder,
    aspects: &[Aspect],
    summarizer: &dyn Summarizer,
) -> Result<KnowledgeBase> {
    let (normal, abnormal) = group_by_class(corpus);
    build_knowledge(&normal, &abnormal, prompts, embedder, aspects, summarizer)
}

/// Scores `test` and reports metrics.
pub fn evaluate(
    model: &ModelParams,
    kb: &KnowledgeBase,
    test: &CaptionCorpus,
    embedder: &dyn Embedder,
    threshold: f64,
    config_digest: &str,
) -> Result<(MetricsReport, Vec<f64>)> {
    let scores = predict_corpus(test, kb, model, embedder)?;
    let report = MetricsReport::compute(&test.source_tag, &scores, &test.labels(), threshold, config_digest)?;
    Ok((report, scores))
}

/// Knowledge, model and held-out report of one train/test run.
pub struct RunOutput {
    pub knowledge: KnowledgeBase,
    pub model: ModelParams,
    pub report: MetricsReport,
    pub scores: Vec<f64>,
}

/// Builds knowledge from `train` (restricted to `cfg.aspects`), trains and
/// evaluates on `test`.
pub fn run_pipeline(
    train_corpus: &CaptionCorpus,
    test: &CaptionCorpus,
    cfg: &PipelineConfig,
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
) -> Result<RunOutput> {
    cfg.validate()?;
    let kb = knowledge_from_corpus(train_corpus, &default_prompts()?, embedder, &cfg.aspects, summarizer)?;
    run_with_knowledge(train_corpus, test, kb, cfg, embedder)
}

pub fn run_with_knowledge(
    train_corpus: &CaptionCorpus,
    test: &CaptionCorpus,
    kb: KnowledgeBase,
    cfg: &PipelineConfig,
    embedder: &dyn Embedder,
) -> Result<RunOutput> {
    let model = train(train_corpus, &kb, cfg.encoder, cfg.frames, &cfg.train, embedder)?;
    let (report, scores) = evaluate(&model, &kb, test, embedder, cfg.threshold, &cfg.digest()?)?;
    Ok(RunOutput { knowledge: kb, model, report, scores })
}

/// One row of a slot-combination sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub active_aspects: Vec<Aspect>,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    /// Set when the row failed; the sweep continues.
    pub error: Option<String>,
}

/// Abbreviated combinations of the published slot-combination table, in
/// its row order.
pub const TABLE3_COMBOS: [&str; 7] = [
    "action,context",
    "action",
    "action,object",
    "action,object,context",
    "action,environment",
    "context,action,object,environment",
    "object,environment",
];

pub fn table3_combos() -> Vec<Vec<Aspect>> {
    TABLE3_COMBOS
        .iter()
        .map(|c| Aspect::parse_list(c).expect("valid combo"))
        .collect()
}

/// Parses combos, one per line or separated by `;`. The keyword `table3`
/// expands to [`TABLE3_COMBOS`].
pub fn parse_combos(text: &str) -> Result<Vec<Vec<Aspect>>> {
    let mut out = Vec::new();
    for item in text.split(['\n', ';']).map(str::trim).filter(|s| !s.is_empty() && !s.starts_with('#')) {
        if item.eq_ignore_ascii_case("table3") {
            out.extend(table3_combos());
        } else {
            out.push(Aspect::parse_list(item)?);
        }
    }
    if out.is_empty() {
        return Err(Error::Invalid("no aspect combinations given".into()));
    }
    Ok(out)
}

/// For each combination: restrict the knowledge, retrain with the same
/// seed and evaluate. Rows are emitted in input order.
pub fn ablate_slots(
    train_corpus: &CaptionCorpus,
    test: &CaptionCorpus,
    combos: &[Vec<Aspect>],
    cfg: &PipelineConfig,
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
) -> Result<Vec<AblationRow>> {
    if combos.is_empty() {
        return Err(Error::Invalid("no aspect combinations given".into()));
    }
    let mut needed: Vec<Aspect> = combos.iter().flatten().copied().collect();
    needed = Aspect::canonical(&needed);
    let full = knowledge_from_corpus(train_corpus, &default_prompts()?, embedder, &needed, summarizer)?;
    let rows = combos
        .iter()
        .map(|combo| {
            let row_cfg = PipelineConfig { aspects: Aspect::canonical(combo), ..cfg.clone() };
            let run = full
                .restrict(combo, embedder)
                .and_then(|kb| run_with_knowledge(train_corpus, test, kb, &row_cfg, embedder));
            match run {
                Ok(r) => AblationRow {
                    active_aspects: row_cfg.aspects,
                    auc: r.report.auc,
                    ap: r.report.ap,
                    error: None,
                },
                Err(e) => {
                    log::error!("ablation row [{}] failed: {e}", Aspect::join(combo, ","));
                    AblationRow { active_aspects: row_cfg.aspects, auc: None, ap: None, error: Some(e.to_string()) }
                }
            }
        })
        .collect();
    Ok(rows)
}

/// CSV with header `aspects,auc,ap`; aspects are joined with `+`, failed
/// rows have empty metric fields.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("aspects,auc,ap\n");
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        let _ = writeln!(out, "{},{},{}", Aspect::join(&r.active_aspects, "+"), fmt(r.auc), fmt(r.ap));
    }
    out
}

/// Aligned table of ablation rows with a checkmark per aspect.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<4} {:<4} {:<4} {:<4} {:>8} {:>8}", "co", "ac", "ob", "en", "auc", "ap");
    for r in rows {
        let marks: Vec<&str> = Aspect::ALL
            .iter()
            .map(|a| if r.active_aspects.contains(a) { "x" } else { "" })
            .collect();
        let fmt = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            out,
            "{:<4} {:<4} {:<4} {:<4} {:>8} {:>8}",
            marks[0],
            marks[1],
            marks[2],
            marks[3],
            fmt(r.auc),
            fmt(r.ap)
        );
    }
    out
}

/// Trains on one domain (knowledge from the training domain only) and
/// evaluates on another. With `allow_same_source` the source-tag guard is
/// lifted, which turns this into a plain train/test evaluation.
pub fn cross_eval(
    train_corpus: &CaptionCorpus,
    test: &CaptionCorpus,
    cfg: &PipelineConfig,
    embedder: &dyn Embedder,
    summarizer: &dyn Summarizer,
    allow_same_source: bool,
) -> Result<MetricsReport> {
    if !allow_same_source && train_corpus.source_tag == test.source_tag {
        return Err(Error::Invalid(format!(
            "cross-dataset evaluation needs different sources, both are {:?}",
            train_corpus.source_tag
        )));
    }
    Ok(run_pipeline(train_corpus, test, cfg, embedder, summarizer)?.report)
}
