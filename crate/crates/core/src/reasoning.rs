//! Explainable reasoning: slot cross-attention, slot importance, evidence
//! retrieval, counterfactual slot margins and the explanation record.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{concatenate, Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::classifier::{predict_video, HeadTensors, ModelParams, Prediction};
use crate::embedder::{cosine_similarity, Embedder, TokenEmbeddingSeq};
use crate::error::{Error, Result};
use crate::knowledge::{Aspect, KnowledgeBase};
use crate::remote::TextGenerator;
use crate::textcorpus::{Label, VideoRecord};

/// Slot-to-frame scores `A` (`S×T`) and slot contexts `C = A·H` (`S×d`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    pub a: Array2<f64>,
    pub c: Array2<f64>,
}

/// `A = K_v·H_dᵀ/√d`, `C = A·H_d`, with masked columns of `A` set to zero.
pub fn slot_attention(k_v: &Array2<f64>, h_d: &TokenEmbeddingSeq) -> Result<AttentionResult> {
    slot_attention_with(k_v, h_d, false)
}

/// As [`slot_attention`]; with `softmax` set, each row of `A` is
/// softmax-normalized over the unmasked frames first.
pub fn slot_attention_with(k_v: &Array2<f64>, h_d: &TokenEmbeddingSeq, softmax_rows: bool) -> Result<AttentionResult> {
    let d = h_d.dim();
    if k_v.ncols() != d {
        return Err(Error::dims("slot prototype width", d, k_v.ncols()));
    }
    let mask = h_d.mask();
    let mut a = k_v.dot(&h_d.vectors().t()) / (d as f64).sqrt();
    for (j, &keep) in mask.iter().enumerate() {
        if !keep {
            a.column_mut(j).fill(0.0);
        }
    }
    if softmax_rows {
        for mut row in a.rows_mut() {
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &m)| m)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (v, &m) in row.iter_mut().zip(mask) {
                *v = if m { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row.mapv_inplace(|v| v / sum);
        }
    }
    let c = a.dot(h_d.vectors());
    if a.iter().chain(c.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("slot attention".into()));
    }
    Ok(AttentionResult { a, c })
}

/// Scores one slot from its concatenated `[C_s; K_s]` row.
pub trait SlotScorer {
    fn score(&self, input: ArrayView1<f64>) -> f64;
}

impl<F: Fn(ArrayView1<f64>) -> f64> SlotScorer for F {
    fn score(&self, input: ArrayView1<f64>) -> f64 {
        self(input)
    }
}

/// Two-layer feed-forward scorer: `w2·tanh(W1·x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceNet {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

impl ImportanceNet {
    pub fn from_head(head: &HeadTensors<Array2<f64>>) -> Self {
        ImportanceNet {
            w1: head.imp_w1.clone(),
            b1: head.imp_b1.row(0).to_owned(),
            w2: head.imp_w2.row(0).to_owned(),
            b2: head.imp_b2[[0, 0]],
        }
    }

    pub fn from_model(model: &ModelParams) -> Self {
        Self::from_head(&model.tensors.head)
    }
}

impl SlotScorer for ImportanceNet {
    fn score(&self, input: ArrayView1<f64>) -> f64 {
        let hidden = (self.w1.dot(&input) + &self.b1).mapv(f64::tanh);
        self.w2.dot(&hidden) + self.b2
    }
}

/// Raw slot scores `z` and their softmax `w`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotImportance {
    pub z: Array1<f64>,
    pub w: Array1<f64>,
}

/// Numerically stable softmax.
pub fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let e = z.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// `z_s = f([C_s; K_s])` for every slot, `w = softmax(z)`.
pub fn slot_importance(c: &Array2<f64>, k_v: &Array2<f64>, f: &dyn SlotScorer) -> Result<SlotImportance> {
    if c.nrows() != k_v.nrows() {
        return Err(Error::dims("slot count", k_v.nrows(), c.nrows()));
    }
    if c.nrows() == 0 {
        return Err(Error::Empty("no slots".into()));
    }
    let input = concatenate(Axis(1), &[c.view(), k_v.view()]).map_err(|e| Error::Invalid(e.to_string()))?;
    let z: Array1<f64> = input.rows().into_iter().map(|r| f.score(r)).collect();
    if let Some(s) = z.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("importance score of slot {s}")));
    }
    let w = softmax(&z);
    Ok(SlotImportance { z, w })
}

/// A retrieved knowledge sentence supporting one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evidence {
    pub aspect: Aspect,
    #[serde(rename = "class")]
    pub class_v: Label,
    pub sentence: String,
    pub similarity: f64,
    pub rank: usize,
}

/// Slot indices ordered by descending weight; ties keep canonical order.
fn ranked_slots(w: &Array1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&i, &j| w[j].total_cmp(&w[i]));
    idx
}

/// For each of the `k` highest-weighted slots of `class_v`, the knowledge
/// sentence with the largest cosine similarity to `h_bar` (ties → lowest
/// sentence index). Slots without sentences are skipped.
pub fn retrieve_evidence(
    h_bar: &Array1<f64>,
    kb: &KnowledgeBase,
    class_v: Label,
    importance: &SlotImportance,
    k: usize,
) -> Result<Vec<Evidence>> {
    if k == 0 {
        return Err(Error::Invalid("top-k must be at least 1".into()));
    }
    let aspects = kb.aspects();
    if importance.w.len() != aspects.len() {
        return Err(Error::dims("slot weights", aspects.len(), importance.w.len()));
    }
    if h_bar.len() != kb.dim() {
        return Err(Error::dims("h_bar", kb.dim(), h_bar.len()));
    }
    let mut out = Vec::new();
    for s in ranked_slots(&importance.w) {
        if out.len() == k {
            break;
        }
        let aspect = aspects[s];
        let (Some(slot), Some(emb)) = (kb.slot(class_v, aspect), kb.sentence_embeddings(class_v, aspect)) else {
            return Err(Error::Invalid(format!("knowledge lacks slot {}/{aspect}", class_v.short())));
        };
        if slot.sentences.is_empty() {
            log::warn!("slot {}/{aspect} has no sentences; skipping", class_v.short());
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in emb.rows().into_iter().enumerate() {
            let sim = cosine_similarity(h_bar.view(), row)?;
            if best.is_none_or(|(_, b)| sim > b) {
                best = Some((i, sim));
            }
        }
        let (i, similarity) = best.expect("non-empty slot");
        out.push(Evidence {
            aspect,
            class_v,
            sentence: slot.sentences[i].clone(),
            similarity,
            rank: out.len() + 1,
        });
    }
    Ok(out)
}

/// Slot weights under the predicted class's prototypes and under the
/// opposite class's prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualWeights {
    pub factual: SlotImportance,
    pub counterfactual: SlotImportance,
}

pub fn counterfactual_weights(
    h_d: &TokenEmbeddingSeq,
    kb: &KnowledgeBase,
    f: &dyn SlotScorer,
    predicted_v: Label,
    softmax_attention: bool,
) -> Result<CounterfactualWeights> {
    let importance = |v: Label| -> Result<SlotImportance> {
        let k = kb.prototypes(v);
        let att = slot_attention_with(k, h_d, softmax_attention)?;
        slot_importance(&att.c, k, f)
    };
    Ok(CounterfactualWeights {
        factual: importance(predicted_v)?,
        counterfactual: importance(predicted_v.opposite())?,
    })
}

/// `Δ_s = w_s − w^cf_s` per active aspect.
pub fn counterfactual_margins(
    h_d: &TokenEmbeddingSeq,
    kb: &KnowledgeBase,
    f: &dyn SlotScorer,
    predicted_v: Label,
) -> Result<BTreeMap<Aspect, f64>> {
    let cw = counterfactual_weights(h_d, kb, f, predicted_v, false)?;
    Ok(margins_from(kb.aspects(), &cw))
}

fn margins_from(aspects: &[Aspect], cw: &CounterfactualWeights) -> BTreeMap<Aspect, f64> {
    aspects
        .iter()
        .enumerate()
        .map(|(s, &a)| (a, cw.factual.w[s] - cw.counterfactual.w[s]))
        .collect()
}

/// The structured explanation emitted per video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplanationRecord {
    pub video_id: String,
    pub score: f64,
    pub label: Label,
    pub slot_weights: BTreeMap<Aspect, f64>,
    pub evidences: Vec<Evidence>,
    /// Empty when counterfactual analysis was not requested.
    pub margins: BTreeMap<Aspect, f64>,
    pub rationale: String,
    pub fallback: bool,
    pub model_digest: String,
}

impl ExplanationRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(format!("explanation record {}: {m}", self.video_id)));
        if !(0.0..=1.0).contains(&self.score) {
            return bad(format!("score {} outside [0, 1]", self.score));
        }
        if self.label != Label::from_score(self.score) {
            return bad("label disagrees with score".into());
        }
        if self.slot_weights.is_empty() {
            return bad("no slot weights".into());
        }
        let total: f64 = self.slot_weights.values().sum();
        if (total - 1.0).abs() > 1e-6 || self.slot_weights.values().any(|&w| !(w >= 0.0)) {
            return bad(format!("slot weights sum to {total}"));
        }
        if !self.margins.is_empty() {
            if !self.margins.keys().eq(self.slot_weights.keys()) {
                return bad("margins and slot weights cover different aspects".into());
            }
            let sum: f64 = self.margins.values().sum();
            if sum.abs() > 1e-6 {
                return bad(format!("margins sum to {sum}"));
            }
        }
        if self.evidences.len() > self.slot_weights.len() {
            return bad("more evidences than slots".into());
        }
        for (i, e) in self.evidences.iter().enumerate() {
            if e.rank != i + 1 || !self.slot_weights.contains_key(&e.aspect) || e.class_v != self.label {
                return bad(format!("evidence {} is inconsistent", i + 1));
            }
        }
        Ok(())
    }

    /// Every evidence sentence is a verbatim member of the slot it cites.
    pub fn check_membership(&self, kb: &KnowledgeBase) -> Result<()> {
        for e in &self.evidences {
            let ok = kb
                .slot(e.class_v, e.aspect)
                .is_some_and(|s| s.sentences.contains(&e.sentence));
            if !ok {
                return Err(Error::Invalid(format!(
                    "evidence {:?} is not a sentence of slot {}/{}",
                    e.sentence,
                    e.class_v.short(),
                    e.aspect
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: ExplanationRecord = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }
}

/// Assembles and validates a record. The label is abnormal iff `y ≥ 0.5`.
#[allow(clippy::too_many_arguments)]
pub fn build_record(
    video_id: &str,
    y: f64,
    aspects: &[Aspect],
    w: &SlotImportance,
    evidences: Vec<Evidence>,
    margins: BTreeMap<Aspect, f64>,
    rationale: &str,
    model_digest: &str,
) -> Result<ExplanationRecord> {
    if w.w.len() != aspects.len() {
        return Err(Error::dims("slot weights", aspects.len(), w.w.len()));
    }
    let record = ExplanationRecord {
        video_id: video_id.to_string(),
        score: y,
        label: Label::from_score(y),
        slot_weights: aspects.iter().copied().zip(w.w.iter().copied()).collect(),
        evidences,
        margins,
        rationale: rationale.to_string(),
        fallback: false,
        model_digest: model_digest.to_string(),
    };
    record.validate()?;
    Ok(record)
}

/// Deterministic rendering of a record as a short justification.
pub fn template_explanation(record: &ExplanationRecord) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Prediction: {} (score {:.3}).", record.label, record.score);
    let pct = |a: &Aspect| format!("{a} ({:.1}%)", record.slot_weights[a] * 100.0);
    if record.evidences.is_empty() {
        let mut aspects: Vec<&Aspect> = record.slot_weights.keys().collect();
        aspects.sort_by(|a, b| record.slot_weights[b].total_cmp(&record.slot_weights[a]));
        let list: Vec<String> = aspects.into_iter().map(pct).collect();
        let _ = writeln!(out, "Slot weights: {}.", list.join(", "));
        return out;
    }
    let list: Vec<String> = record.evidences.iter().map(|e| pct(&e.aspect)).collect();
    let _ = writeln!(out, "Top aspects: {}.", list.join(", "));
    for e in &record.evidences {
        let _ = writeln!(
            out,
            "Evidence [{}] (similarity {:.3}): \"{}\"",
            e.aspect, e.similarity, e.sentence
        );
    }
    if let Some((aspect, delta)) = pivot(&record.margins) {
        let _ = writeln!(
            out,
            "Counterfactual pivot: {aspect} (margin {delta:+.3}) under {} knowledge.",
            record.label.opposite()
        );
    }
    out
}

/// Aspect with the largest |Δ|; ties keep canonical order.
fn pivot(margins: &BTreeMap<Aspect, f64>) -> Option<(Aspect, f64)> {
    let mut best: Option<(Aspect, f64)> = None;
    for (&a, &d) in margins {
        if best.is_none_or(|(_, b)| d.abs() > b.abs()) {
            best = Some((a, d));
        }
    }
    best
}

pub const EXPLANATION_PROMPT: &str = "You are explaining the decision of a video anomaly detector. \
The JSON record below lists the anomaly score, predicted label, per-aspect slot weights, \
retrieved knowledge evidence and counterfactual slot margins. Write a concise, human-readable \
justification (at most four sentences) that names the predicted label, the most important \
aspects and quotes the evidence.\n\nRecord:\n";

pub const EXPLANATION_MAX_TOKENS: usize = 256;

/// Where rationales come from.
#[derive(Clone, Copy)]
pub enum ExplanationBackend<'a> {
    Template,
    Remote(&'a dyn TextGenerator),
}

/// Returns the rationale and whether the template fallback was used
/// because the remote backend failed.
pub fn generate_explanation(record: &ExplanationRecord, backend: ExplanationBackend<'_>) -> Result<(String, bool)> {
    record.validate()?;
    match backend {
        ExplanationBackend::Template => Ok((template_explanation(record), false)),
        ExplanationBackend::Remote(generator) => {
            let mut bare = record.clone();
            bare.rationale.clear();
            let prompt = format!("{EXPLANATION_PROMPT}{}", bare.to_json()?);
            match generator.generate(&prompt, EXPLANATION_MAX_TOKENS) {
                Ok(text) => Ok((text, false)),
                Err(e) => {
                    log::warn!("explanation service failed ({e}); using template");
                    Ok((template_explanation(record), true))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExplainOptions {
    pub top_k: usize,
    pub counterfactual: bool,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions { top_k: 2, counterfactual: true }
    }
}

/// Builds the full record for an already computed prediction.
pub fn explain_prediction(
    video_id: &str,
    prediction: &Prediction,
    kb: &KnowledgeBase,
    model: &ModelParams,
    opts: ExplainOptions,
    backend: ExplanationBackend<'_>,
) -> Result<ExplanationRecord> {
    let predicted = Label::from_score(prediction.y);
    let f = ImportanceNet::from_model(model);
    let cw = counterfactual_weights(&prediction.h_d, kb, &f, predicted, model.config.softmax_attention)?;
    let evidences = retrieve_evidence(&prediction.h_bar, kb, predicted, &cw.factual, opts.top_k)?;
    let margins = if opts.counterfactual {
        margins_from(kb.aspects(), &cw)
    } else {
        BTreeMap::new()
    };
    let mut record = build_record(
        video_id,
        prediction.y,
        kb.aspects(),
        &cw.factual,
        evidences,
        margins,
        "",
        &model.digest()?,
    )?;
    let (text, fallback) = generate_explanation(&record, backend)?;
    record.rationale = text;
    record.fallback = fallback;
    Ok(record)
}

/// Scores one video and explains the decision.
pub fn explain_video(
    video: &VideoRecord,
    kb: &KnowledgeBase,
    model: &ModelParams,
    embedder: &dyn Embedder,
    opts: ExplainOptions,
    backend: ExplanationBackend<'_>,
) -> Result<ExplanationRecord> {
    let prediction = predict_video(video, kb, model, embedder, model.config.frames)?;
    explain_prediction(&video.video_id, &prediction, kb, model, opts, backend)
}
