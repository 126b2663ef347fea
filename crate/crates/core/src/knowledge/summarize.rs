//! Aspect summarizers: an offline extractive ranker and an LLM-backed
//! map-reduce summarizer.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use super::AspectPrompt;
use crate::embedder::tokenize;
use crate::error::{Error, Result};
use crate::remote::TextGenerator;
use crate::textcorpus::sentence_split;

/// Produces one summary text for an aspect from a list of captions.
pub trait Summarizer: Send + Sync {
    fn summarize(&self, prompt: &AspectPrompt, captions: &[String]) -> Result<String>;

    /// Summarizes `captions` (one class's captions) given the full caption
    /// collection they were drawn from. The default ignores the background.
    fn summarize_in(&self, prompt: &AspectPrompt, captions: &[String], background: &[String]) -> Result<String> {
        let _ = background;
        self.summarize(prompt, captions)
    }
}

/// Ranks corpus sentences by keyword-weighted mean TF-IDF and greedily keeps
/// the best ones, discounting terms already covered by earlier picks so the
/// summary spans distinct salient terms instead of near-duplicate sentences.
///
/// Document frequencies are counted over the sentences of a background
/// collection (the whole training corpus when summarizing one class), so
/// terms characteristic of the summarized class score highest.
#[derive(Debug, Clone)]
pub struct ExtractiveSummarizer {
    pub top_sentences: usize,
    /// Multiplier applied to terms that appear in the prompt's keyword list.
    pub keyword_weight: f64,
    /// Factor applied to a term's weight each time a picked sentence
    /// contains it; 1 disables the redundancy discount.
    pub redundancy: f64,
}

impl Default for ExtractiveSummarizer {
    fn default() -> Self {
        ExtractiveSummarizer {
            top_sentences: 10,
            keyword_weight: 4.0,
            redundancy: 0.5,
        }
    }
}

/// A deduplicated candidate sentence with its per-term base weights
/// (`tf·idf·keyword`), in a fixed term order.
struct Candidate {
    text: String,
    terms: Vec<(String, f64)>,
}

impl Candidate {
    fn score(&self, discount: &HashMap<String, f64>) -> f64 {
        if self.terms.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .terms
            .iter()
            .map(|(t, w)| w * discount.get(t).copied().unwrap_or(1.0))
            .sum();
        total / self.terms.len() as f64
    }
}

impl ExtractiveSummarizer {
    fn candidates(&self, prompt: &AspectPrompt, captions: &[String], background: &[String]) -> Vec<Candidate> {
        let docs: Vec<String> = captions.iter().flat_map(|c| sentence_split(c)).collect();
        let terms: Vec<Vec<String>> = docs.iter().map(|d| tokenize(d)).collect();

        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n = 0usize;
        for sentence in background.iter().flat_map(|c| sentence_split(c)) {
            n += 1;
            let unique: HashSet<String> = tokenize(&sentence).into_iter().collect();
            for t in unique {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = n as f64;
        let keywords: HashSet<String> = prompt.keywords.iter().map(|k| k.to_lowercase()).collect();

        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (doc, doc_terms) in docs.iter().zip(&terms) {
            if !seen.insert(doc.as_str()) {
                continue;
            }
            let mut counts: Vec<(&str, usize)> = Vec::new();
            for t in doc_terms {
                match counts.iter_mut().find(|(u, _)| u == t) {
                    Some((_, c)) => *c += 1,
                    None => counts.push((t, 1)),
                }
            }
            let len = doc_terms.len() as f64;
            let weighted = counts
                .into_iter()
                .map(|(t, c)| {
                    let df_t = df.get(t).copied().unwrap_or(0) as f64;
                    let idf = ((1.0 + n) / (1.0 + df_t)).ln() + 1.0;
                    let w = if keywords.contains(t) { self.keyword_weight } else { 1.0 };
                    (t.to_string(), c as f64 / len * idf * w)
                })
                .collect();
            out.push(Candidate { text: doc.clone(), terms: weighted });
        }
        out
    }

    /// Candidate sentences (deduplicated, first occurrence kept) with their
    /// undiscounted scores, best first; the captions are their own background.
    pub fn rank(&self, prompt: &AspectPrompt, captions: &[String]) -> Vec<(String, f64)> {
        self.rank_in(prompt, captions, captions)
    }

    /// [`rank`](Self::rank) with document frequencies from `background`.
    pub fn rank_in(&self, prompt: &AspectPrompt, captions: &[String], background: &[String]) -> Vec<(String, f64)> {
        let none = HashMap::new();
        let mut ranked: Vec<(String, f64)> = self
            .candidates(prompt, captions, background)
            .into_iter()
            .map(|c| {
                let s = c.score(&none);
                (c.text, s)
            })
            .collect();
        // stable sort keeps first-occurrence order among equal scores
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        ranked
    }

    /// Greedy selection of up to `top_sentences` sentences: each round takes
    /// the best sentence under the current term discounts (earliest on ties),
    /// then multiplies the discount of each of its terms by `redundancy`.
    pub fn select(&self, prompt: &AspectPrompt, captions: &[String], background: &[String]) -> Vec<String> {
        let mut pool = self.candidates(prompt, captions, background);
        let mut discount: HashMap<String, f64> = HashMap::new();
        let mut picked = Vec::new();
        while picked.len() < self.top_sentences.max(1) && !pool.is_empty() {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, c) in pool.iter().enumerate() {
                let s = c.score(&discount);
                if s > best_score {
                    best = i;
                    best_score = s;
                }
            }
            let chosen = pool.remove(best);
            for (t, _) in &chosen.terms {
                *discount.entry(t.clone()).or_insert(1.0) *= self.redundancy;
            }
            picked.push(chosen.text);
        }
        picked
    }
}

impl Summarizer for ExtractiveSummarizer {
    fn summarize(&self, prompt: &AspectPrompt, captions: &[String]) -> Result<String> {
        self.summarize_in(prompt, captions, captions)
    }

    fn summarize_in(&self, prompt: &AspectPrompt, captions: &[String], background: &[String]) -> Result<String> {
        let picked: Vec<String> = self
            .select(prompt, captions, background)
            .iter()
            .map(|s| terminate(s))
            .collect();
        Ok(picked.join(" "))
    }
}

fn terminate(sentence: &str) -> String {
    if sentence.ends_with(['.', '!', '?']) {
        sentence.to_string()
    } else {
        format!("{sentence}.")
    }
}

/// Summarizes through a text generator, chunking long inputs and then
/// summarizing the chunk summaries until a single call suffices.
#[derive(Clone)]
pub struct LlmSummarizer {
    generator: Arc<dyn TextGenerator>,
    pub chunk_tokens: usize,
    pub max_new_tokens: usize,
}

impl LlmSummarizer {
    pub fn new(generator: Arc<dyn TextGenerator>) -> Self {
        LlmSummarizer {
            generator,
            chunk_tokens: 3000,
            max_new_tokens: 512,
        }
    }

    fn call(&self, prompt: &AspectPrompt, chunk: &[String]) -> Result<String> {
        let text = self
            .generator
            .generate(&prompt.render(&chunk.join("\n")), self.max_new_tokens)?;
        Ok(truncate_tokens(text.trim(), self.max_new_tokens))
    }
}

impl Summarizer for LlmSummarizer {
    fn summarize(&self, prompt: &AspectPrompt, captions: &[String]) -> Result<String> {
        let mut items: Vec<String> = captions.to_vec();
        loop {
            let chunks = chunk_by_tokens(&items, self.chunk_tokens);
            if chunks.len() <= 1 {
                return self.call(prompt, chunks.first().map(Vec::as_slice).unwrap_or(&[]));
            }
            let before = chunks.len();
            items = chunks
                .iter()
                .map(|c| self.call(prompt, c))
                .collect::<Result<_>>()?;
            if chunk_by_tokens(&items, self.chunk_tokens).len() >= before {
                return Err(Error::Invalid(
                    "chunk summaries do not shrink below the chunk budget".into(),
                ));
            }
        }
    }
}

fn token_len(s: &str) -> usize {
    s.split_whitespace().count()
}

fn truncate_tokens(s: &str, max: usize) -> String {
    if token_len(s) <= max {
        s.to_string()
    } else {
        s.split_whitespace().take(max).collect::<Vec<_>>().join(" ")
    }
}

/// Greedy packing of items into chunks of at most `budget` whitespace
/// tokens; an oversized single item is truncated to the budget.
pub fn chunk_by_tokens(items: &[String], budget: usize) -> Vec<Vec<String>> {
    let budget = budget.max(1);
    let mut chunks: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    let mut used = 0;
    for item in items {
        let item = truncate_tokens(item, budget);
        let len = token_len(&item);
        if used + len > budget && !current.is_empty() {
            chunks.push(std::mem::take(&mut current));
            used = 0;
        }
        used += len;
        current.push(item);
    }
    if !current.is_empty() {
        chunks.push(current);
    }
    chunks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{default_prompts, Aspect};
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn object_prompt() -> AspectPrompt {
        default_prompts().unwrap().get(Aspect::Object).clone()
    }

    #[test]
    fn dominant_term_survives_extraction() {
        let captions: Vec<String> = (0..30)
            .map(|i| format!("A person number {i} holds a gun near shelf {}.", i % 7))
            .collect();
        let s = ExtractiveSummarizer::default().summarize(&object_prompt(), &captions).unwrap();
        assert!(s.contains("gun"));
        assert_eq!(sentence_split(&s).len(), 10);
    }

    #[test]
    fn single_caption_is_its_own_summary() {
        let captions = vec!["A woman carries a red umbrella.".to_string()];
        let s = ExtractiveSummarizer::default().summarize(&object_prompt(), &captions).unwrap();
        assert_eq!(s, "A woman carries a red umbrella.");
    }

    #[test]
    fn keywords_lift_sentences() {
        let captions = vec!["alpha beta gamma.".to_string(), "delta epsilon knife.".to_string()];
        let ranked = ExtractiveSummarizer::default().rank(&object_prompt(), &captions);
        assert_eq!(ranked[0].0, "delta epsilon knife.");
    }

    #[test]
    fn redundancy_spreads_picks_over_distinct_terms() {
        let mut captions: Vec<String> = (0..6).map(|i| format!("A man holds a cup{}.", " again".repeat(i))).collect();
        captions.push("A man holds a knife.".into());
        let mut s = ExtractiveSummarizer { top_sentences: 2, ..Default::default() };
        let picked = s.select(&object_prompt(), &captions, &captions);
        assert_eq!(picked.len(), 2);
        assert!(picked.iter().any(|p| p.contains("knife")), "{picked:?}");
        s.redundancy = 1.0;
        let plain: Vec<String> = s.rank(&object_prompt(), &captions).into_iter().take(2).map(|r| r.0).collect();
        assert_eq!(s.select(&object_prompt(), &captions, &captions), plain);
    }

    #[test]
    fn background_frequencies_favor_class_specific_terms() {
        // within the class the knife is the most frequent object, but across
        // the whole collection the cup is the common one
        let class: Vec<String> = ["A man holds a knife.", "A man holds a knife.", "A man holds a cup."]
            .map(String::from)
            .to_vec();
        let mut all = class.clone();
        all.extend((0..20).map(|_| "A man holds a cup.".to_string()));
        let s = ExtractiveSummarizer { top_sentences: 1, ..Default::default() };
        assert_eq!(s.summarize(&object_prompt(), &class).unwrap(), "A man holds a cup.");
        assert_eq!(s.summarize_in(&object_prompt(), &class, &all).unwrap(), "A man holds a knife.");
    }

    #[test]
    fn chunking_respects_budget() {
        let items: Vec<String> = (0..10).map(|_| "w w w".to_string()).collect();
        let chunks = chunk_by_tokens(&items, 7);
        assert!(chunks.iter().all(|c| c.iter().map(|s| token_len(s)).sum::<usize>() <= 7));
        assert_eq!(chunks.iter().map(Vec::len).sum::<usize>(), 10);
        let long = vec!["x ".repeat(20)];
        assert_eq!(token_len(&chunk_by_tokens(&long, 5)[0][0]), 5);
    }

    #[test]
    fn map_reduce_over_long_input() {
        let calls = Arc::new(AtomicUsize::new(0));
        let counter = calls.clone();
        let generator = move |_: &str, _: usize| -> Result<String> {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok("short summary.".to_string())
        };
        let mut s = LlmSummarizer::new(Arc::new(generator));
        s.chunk_tokens = 10;
        let captions: Vec<String> = (0..12).map(|_| "one two three four five".to_string()).collect();
        let out = s.summarize(&object_prompt(), &captions).unwrap();
        assert_eq!(out, "short summary.");
        // 6 chunk calls, 2 calls over the 6 partial summaries, 1 final call
        assert_eq!(calls.load(Ordering::SeqCst), 9);
    }

    #[test]
    fn passthrough_for_short_input() {
        let g = |p: &str, _: usize| -> Result<String> {
            assert!(p.contains("a gun"));
            Ok("  Stub text.  ".into())
        };
        let s = LlmSummarizer::new(Arc::new(g));
        assert_eq!(s.summarize(&object_prompt(), &["a gun".into()]).unwrap(), "Stub text.");
    }
}
