//! Target-independent implementation of the browser operations. Errors are
//! plain strings so they cross the JavaScript boundary unchanged.

use serde::Serialize;

use tbvad_core::classifier::ModelParams;
use tbvad_core::embedder::{cosine_similarity, mean_pool, Embedder, HashEmbedder, DESCRIPTION_MAX_TOKENS};
use tbvad_core::eval::{
    accuracy, average_precision, generate_synthetic, roc_auc, roc_curve, run_pipeline, PipelineConfig, SynthConfig,
};
use tbvad_core::knowledge::{ExtractiveSummarizer, KnowledgeBase};
use tbvad_core::reasoning::{explain_video, ExplainOptions, ExplanationBackend};
use tbvad_core::textcorpus::{Caption, CaptionCorpus, Label, VideoRecord};

/// Embedding width and seed shared by every operation on the page.
pub const DIM: usize = 64;
pub const EMBED_SEED: u64 = 0;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

pub struct DemoDetector {
    embedder: HashEmbedder,
    kb: KnowledgeBase,
    model: ModelParams,
    test: CaptionCorpus,
    pub held_out_auc: f64,
}

impl DemoDetector {
    /// Trains on a corpus small enough to finish quickly in a browser.
    pub fn train(seed: u64) -> Result<Self, String> {
        let split = generate_synthetic(&SynthConfig {
            train_videos: 160,
            test_videos: 40,
            seed,
            ..SynthConfig::default()
        })
        .map_err(err)?;
        let mut cfg = PipelineConfig::default();
        cfg.train.epochs = 20;
        cfg.train.seed = seed;
        let embedder = HashEmbedder::new(DIM, EMBED_SEED).map_err(err)?;
        let run = run_pipeline(&split.train, &split.test, &cfg, &embedder, &ExtractiveSummarizer::default())
            .map_err(err)?;
        Ok(DemoDetector {
            embedder,
            kb: run.knowledge,
            model: run.model,
            test: split.test,
            held_out_auc: run.report.auc.unwrap_or(f64::NAN),
        })
    }

    /// Treats each non-empty line as one frame caption.
    pub fn explain(&self, captions: &str, top_k: usize, counterfactual: bool) -> Result<String, String> {
        let captions: Vec<Caption> = captions
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, text)| Caption { video_id: "input".into(), frame_index: i as u64, text: text.to_string() })
            .collect();
        if captions.is_empty() {
            return Err("enter at least one caption".into());
        }
        // The label is a placeholder; prediction ignores it.
        let video = VideoRecord { video_id: "input".into(), label: Label::Normal, captions };
        let opts = ExplainOptions { top_k: top_k.max(1), counterfactual };
        let record = explain_video(&video, &self.kb, &self.model, &self.embedder, opts, ExplanationBackend::Template)
            .map_err(err)?;
        record.to_json().map_err(err)
    }

    pub fn knowledge_json(&self) -> Result<String, String> {
        self.kb.to_json().map_err(err)
    }

    pub fn example(&self, abnormal: bool) -> String {
        let want = if abnormal { Label::Abnormal } else { Label::Normal };
        self.test
            .videos
            .iter()
            .find(|v| v.label == want)
            .map(|v| v.captions.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join("\n"))
            .unwrap_or_default()
    }
}

#[derive(Debug, Serialize)]
pub struct RankingReport {
    pub auc: f64,
    pub ap: f64,
    pub accuracy: f64,
    /// `(false positive rate, true positive rate)` points from (0,0) to (1,1).
    pub roc: Vec<(f64, f64)>,
}

fn numbers(text: &str, what: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("{what}: {t:?} is not a number")))
        .collect()
}

pub fn ranking_metrics(scores: &str, labels: &str, threshold: f64) -> Result<String, String> {
    let scores = numbers(scores, "scores")?;
    let labels: Vec<bool> = numbers(labels, "labels")?
        .into_iter()
        .map(|l| match l {
            0.0 => Ok(false),
            1.0 => Ok(true),
            other => Err(format!("labels must be 0 or 1, got {other}")),
        })
        .collect::<Result<_, _>>()?;
    if scores.len() != labels.len() {
        return Err(format!("{} scores but {} labels", scores.len(), labels.len()));
    }
    let report = RankingReport {
        auc: roc_auc(&scores, &labels).map_err(err)?,
        ap: average_precision(&scores, &labels).map_err(err)?,
        accuracy: accuracy(&scores, &labels, threshold).map_err(err)?,
        roc: roc_curve(&scores, &labels).map_err(err)?,
    };
    serde_json::to_string(&report).map_err(err)
}

pub fn text_similarity(a: &str, b: &str) -> Result<f64, String> {
    let embedder = HashEmbedder::new(DIM, EMBED_SEED).map_err(err)?;
    let pooled = |t: &str| -> Result<_, String> {
        mean_pool(&embedder.embed_tokens(t, DESCRIPTION_MAX_TOKENS).map_err(err)?).map_err(err)
    };
    cosine_similarity(pooled(a)?.view(), pooled(b)?.view()).map_err(err)
}
