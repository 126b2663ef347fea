//! Structured four-aspect knowledge: summarization per class, slot
//! prototypes, sentence embeddings, and projection into the latent space.

mod summarize;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::embedder::{mean_pool, Embedder, EmbedderMeta, KNOWLEDGE_MAX_TOKENS};
use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::textcorpus::{sentence_split, CaptionCorpus, Label};

pub use summarize::{chunk_by_tokens, ExtractiveSummarizer, LlmSummarizer, Summarizer};

/// Knowledge slot. The declaration order is the canonical slot order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Context,
    Action,
    Object,
    Environment,
}

impl Aspect {
    pub const ALL: [Aspect; 4] = [Aspect::Context, Aspect::Action, Aspect::Object, Aspect::Environment];

    pub fn as_str(self) -> &'static str {
        match self {
            Aspect::Context => "context",
            Aspect::Action => "action",
            Aspect::Object => "object",
            Aspect::Environment => "environment",
        }
    }

    /// Sorts and deduplicates into canonical order.
    pub fn canonical(aspects: &[Aspect]) -> Vec<Aspect> {
        let mut v = aspects.to_vec();
        v.sort();
        v.dedup();
        v
    }

    /// Parses a comma- or plus-separated list such as `object,environment`.
    pub fn parse_list(s: &str) -> Result<Vec<Aspect>> {
        let parsed = s
            .split([',', '+'])
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect::<Result<Vec<Aspect>>>()?;
        if parsed.is_empty() {
            return Err(Error::Invalid("aspect list is empty".into()));
        }
        Ok(Self::canonical(&parsed))
    }

    pub fn join(aspects: &[Aspect], sep: &str) -> String {
        aspects.iter().map(|a| a.as_str()).collect::<Vec<_>>().join(sep)
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aspect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "context" | "co" => Ok(Aspect::Context),
            "action" | "ac" => Ok(Aspect::Action),
            "object" | "ob" => Ok(Aspect::Object),
            "environment" | "en" => Ok(Aspect::Environment),
            other => Err(Error::Invalid(format!("unknown aspect {other:?}"))),
        }
    }
}

pub const CAPTIONS_PLACEHOLDER: &str = "{captions}";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AspectPrompt {
    pub aspect: Aspect,
    pub template: String,
    /// Terms the extractive summarizer up-weights for this aspect.
    #[serde(default)]
    pub keywords: Vec<String>,
}

impl AspectPrompt {
    pub fn new(aspect: Aspect, template: impl Into<String>, keywords: Vec<String>) -> Result<Self> {
        let p = AspectPrompt {
            aspect,
            template: template.into(),
            keywords,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.template.matches(CAPTIONS_PLACEHOLDER).count() != 1 {
            return Err(Error::Invalid(format!(
                "{} prompt must contain {CAPTIONS_PLACEHOLDER} exactly once",
                self.aspect
            )));
        }
        Ok(())
    }

    pub fn render(&self, captions: &str) -> String {
        self.template.replacen(CAPTIONS_PLACEHOLDER, captions, 1)
    }
}

/// One prompt per aspect.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    prompts: [AspectPrompt; 4],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptFile {
    prompts: Vec<AspectPrompt>,
}

impl PromptSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let file: PromptFile = serde_json::from_str(text)?;
        let mut slots: [Option<AspectPrompt>; 4] = Default::default();
        for p in file.prompts {
            p.validate()?;
            let idx = p.aspect as usize;
            if slots[idx].is_some() {
                return Err(Error::Invalid(format!("duplicate prompt for {}", p.aspect)));
            }
            slots[idx] = Some(p);
        }
        let prompts = slots.map(|p| p.ok_or_else(|| Error::Invalid("prompt file must define all four aspects".into())));
        let [c, a, o, e] = prompts;
        Ok(PromptSet {
            prompts: [c?, a?, o?, e?],
        })
    }

    pub fn get(&self, aspect: Aspect) -> &AspectPrompt {
        &self.prompts[aspect as usize]
    }
}

/// The shipped prompt templates.
pub fn default_prompts() -> Result<PromptSet> {
    PromptSet::from_json(include_str!("../../assets/prompts.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotSummary {
    pub class: Label,
    pub aspect: Aspect,
    pub text: String,
    pub sentences: Vec<String>,
}

impl SlotSummary {
    pub fn new(class: Label, aspect: Aspect, text: impl Into<String>) -> Result<Self> {
        let text = text.into().trim().to_string();
        if text.is_empty() {
            return Err(Error::Empty(format!("summary for {aspect}/{class} is empty")));
        }
        let sentences = sentence_split(&text);
        Ok(SlotSummary {
            class,
            aspect,
            text,
            sentences,
        })
    }
}

/// Runs one summarization job over every caption in `corpus_part`.
pub fn summarize_aspect(
    corpus_part: &CaptionCorpus,
    prompt: &AspectPrompt,
    class: Label,
    summarizer: &dyn Summarizer,
) -> Result<SlotSummary> {
    summarize_aspect_in(corpus_part, &[], prompt, class, summarizer)
}

fn caption_texts(corpus: &CaptionCorpus) -> Vec<String> {
    corpus
        .videos
        .iter()
        .flat_map(|v| v.captions.iter().map(|c| c.text.clone()))
        .collect()
}

/// [`summarize_aspect`] with the rest of the training collection as
/// background; the class's own captions are always part of the background.
pub fn summarize_aspect_in(
    corpus_part: &CaptionCorpus,
    others: &[&CaptionCorpus],
    prompt: &AspectPrompt,
    class: Label,
    summarizer: &dyn Summarizer,
) -> Result<SlotSummary> {
    let captions = caption_texts(corpus_part);
    if captions.is_empty() {
        return Err(Error::Empty(format!("no captions to summarize for {}/{class}", prompt.aspect)));
    }
    let mut background = captions.clone();
    for other in others {
        background.extend(caption_texts(other));
    }
    let text = summarizer.summarize_in(prompt, &captions, &background).map_err(|e| match e {
        Error::Remote { attempts, message } => Error::Remote {
            attempts,
            message: format!("summarizing {}/{class}: {message}", prompt.aspect),
        },
        other => other,
    })?;
    SlotSummary::new(class, prompt.aspect, text)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    aspects: Vec<Aspect>,
    slots: BTreeMap<(Label, Aspect), SlotSummary>,
    /// Per class, one row per active aspect in canonical order.
    prototypes: BTreeMap<Label, Array2<f64>>,
    sentence_embeddings: BTreeMap<(Label, Aspect), Array2<f64>>,
    /// Mean-pooled embedding of each class's concatenated knowledge text.
    knowledge_means: BTreeMap<Label, Array1<f64>>,
    embedder: EmbedderMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SlotJson {
    text: String,
    sentences: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KnowledgeFile {
    aspects: Vec<Aspect>,
    classes: BTreeMap<String, BTreeMap<Aspect, SlotJson>>,
    embedder: EmbedderMeta,
}

impl KnowledgeBase {
    /// Embeds slot texts and sentences for the given summaries.
    pub fn from_summaries(
        aspects: &[Aspect],
        summaries: Vec<SlotSummary>,
        embedder: &dyn Embedder,
    ) -> Result<Self> {
        let aspects = Aspect::canonical(aspects);
        if aspects.is_empty() {
            return Err(Error::Invalid("at least one aspect must be active".into()));
        }
        let mut slots = BTreeMap::new();
        for s in summaries {
            if !aspects.contains(&s.aspect) {
                return Err(Error::Invalid(format!("summary for inactive aspect {}", s.aspect)));
            }
            if s.sentences != sentence_split(&s.text) {
                return Err(Error::Invalid(format!(
                    "sentences of {}/{} do not match its text",
                    s.aspect, s.class
                )));
            }
            slots.insert((s.class, s.aspect), s);
        }
        for class in Label::BOTH {
            for &a in &aspects {
                if !slots.contains_key(&(class, a)) {
                    return Err(Error::Invalid(format!("missing summary for {a}/{class}")));
                }
            }
        }

        let d = embedder.dim();
        let mut prototypes = BTreeMap::new();
        let mut sentence_embeddings = BTreeMap::new();
        let mut knowledge_means = BTreeMap::new();
        for class in Label::BOTH {
            let texts: Vec<&str> = aspects.iter().map(|a| slots[&(class, *a)].text.as_str()).collect();
            let pooled = embedder.embed_pooled(&texts, KNOWLEDGE_MAX_TOKENS)?;
            let mut proto = Array2::zeros((aspects.len(), d));
            for (mut row, v) in proto.rows_mut().into_iter().zip(&pooled) {
                row.assign(v);
            }
            prototypes.insert(class, proto);

            for &a in &aspects {
                let slot = &slots[&(class, a)];
                let mut m = Array2::zeros((slot.sentences.len(), d));
                for (mut row, sentence) in m.rows_mut().into_iter().zip(&slot.sentences) {
                    match embedder.embed_tokens(sentence, KNOWLEDGE_MAX_TOKENS) {
                        Ok(seq) => row.assign(&mean_pool(&seq)?),
                        // token-less sentences keep a zero row (cosine 0 against anything)
                        Err(Error::Empty(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                sentence_embeddings.insert((class, a), m);
            }

            let joined = texts.join("\n");
            let seq = embedder.embed_tokens(&joined, KNOWLEDGE_MAX_TOKENS)?;
            knowledge_means.insert(class, mean_pool(&seq)?);
        }

        Ok(KnowledgeBase {
            aspects,
            slots,
            prototypes,
            sentence_embeddings,
            knowledge_means,
            embedder: embedder.meta(),
        })
    }

    pub fn aspects(&self) -> &[Aspect] {
        &self.aspects
    }

    pub fn dim(&self) -> usize {
        self.embedder.dim
    }

    pub fn embedder_meta(&self) -> EmbedderMeta {
        self.embedder
    }

    pub fn slot(&self, class: Label, aspect: Aspect) -> Option<&SlotSummary> {
        self.slots.get(&(class, aspect))
    }

    /// `S×d` prototype matrix `K_v`.
    pub fn prototypes(&self, class: Label) -> &Array2<f64> {
        &self.prototypes[&class]
    }

    pub fn sentence_embeddings(&self, class: Label, aspect: Aspect) -> Option<&Array2<f64>> {
        self.sentence_embeddings.get(&(class, aspect))
    }

    /// Active slot texts of one class joined by newlines in canonical order.
    pub fn knowledge_text(&self, class: Label) -> String {
        self.aspects
            .iter()
            .map(|a| self.slots[&(class, *a)].text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Mean token embedding of [`Self::knowledge_text`].
    pub fn knowledge_embedding(&self, class: Label) -> &Array1<f64> {
        &self.knowledge_means[&class]
    }

    pub fn to_json(&self) -> Result<String> {
        let mut classes = BTreeMap::new();
        for class in Label::BOTH {
            let slots = self
                .aspects
                .iter()
                .map(|a| {
                    let s = &self.slots[&(class, *a)];
                    (
                        *a,
                        SlotJson {
                            text: s.text.clone(),
                            sentences: s.sentences.clone(),
                        },
                    )
                })
                .collect();
            classes.insert(class.short().to_string(), slots);
        }
        let file = KnowledgeFile {
            aspects: self.aspects.clone(),
            classes,
            embedder: self.embedder,
        };
        Ok(serde_json::to_string_pretty(&file)? + "\n")
    }

    /// Parses a knowledge file and recomputes embeddings with `embedder`,
    /// which must match the recorded backend, dimension and seed.
    pub fn from_json(text: &str, embedder: &dyn Embedder) -> Result<Self> {
        let file: KnowledgeFile = serde_json::from_str(text)?;
        let meta = embedder.meta();
        if meta.dim != file.embedder.dim {
            return Err(Error::dims("knowledge embedder", file.embedder.dim, meta.dim));
        }
        if meta != file.embedder {
            return Err(Error::Invalid(format!(
                "knowledge was built with {:?} but the embedder is {:?}",
                file.embedder, meta
            )));
        }
        let mut summaries = Vec::new();
        for (key, slots) in file.classes {
            let class: Label = key.parse()?;
            for (aspect, slot) in slots {
                summaries.push(SlotSummary {
                    class,
                    aspect,
                    text: slot.text,
                    sentences: slot.sentences,
                });
            }
        }
        Self::from_summaries(&file.aspects, summaries, embedder)
    }

    /// Copy restricted to a subset of the active aspects.
    pub fn restrict(&self, aspects: &[Aspect], embedder: &dyn Embedder) -> Result<Self> {
        let aspects = Aspect::canonical(aspects);
        if let Some(a) = aspects.iter().find(|a| !self.aspects.contains(a)) {
            return Err(Error::Invalid(format!("aspect {a} is not present in this knowledge base")));
        }
        let summaries = self
            .slots
            .values()
            .filter(|s| aspects.contains(&s.aspect))
            .cloned()
            .collect();
        Self::from_summaries(&aspects, summaries, embedder)
    }
}

/// Summarizes every (class, active aspect) pair and embeds the results.
pub fn build_knowledge(
    normal: &CaptionCorpus,
    abnormal: &CaptionCorpus,
    prompts: &PromptSet,
    embedder: &dyn Embedder,
    active_aspects: &[Aspect],
    summarizer: &dyn Summarizer,
) -> Result<KnowledgeBase> {
    if normal.is_empty() || abnormal.is_empty() {
        return Err(Error::Empty("knowledge needs both normal and abnormal videos".into()));
    }
    let aspects = Aspect::canonical(active_aspects);
    if aspects.is_empty() {
        return Err(Error::Invalid("at least one aspect must be active".into()));
    }
    let jobs: Vec<(Label, Aspect)> = Label::BOTH
        .iter()
        .flat_map(|&c| aspects.iter().map(move |&a| (c, a)))
        .collect();
    let summaries = par_map(&jobs, 8, |&(class, aspect)| {
        let (part, other) = match class {
            Label::Normal => (normal, abnormal),
            Label::Abnormal => (abnormal, normal),
        };
        summarize_aspect_in(part, &[other], prompts.get(aspect), class, summarizer)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    KnowledgeBase::from_summaries(&aspects, summaries, embedder)
}

/// Affine projection of the class's mean knowledge embedding.
pub fn encode_knowledge(
    kb: &KnowledgeBase,
    class: Label,
    w_v: &Array2<f64>,
    b_v: &Array1<f64>,
) -> Result<Array1<f64>> {
    let m = kb.knowledge_embedding(class);
    if w_v.ncols() != m.len() {
        return Err(Error::dims("knowledge projection input", m.len(), w_v.ncols()));
    }
    if b_v.len() != w_v.nrows() {
        return Err(Error::dims("knowledge projection bias", w_v.nrows(), b_v.len()));
    }
    if w_v.iter().chain(b_v.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("knowledge projection".into()));
    }
    Ok(w_v.dot(m) + b_v)
}
