//! Caption-quality statistics: average length and information content.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::embedder::tokenize;
use crate::error::{Error, Result};
use crate::textcorpus::CaptionCorpus;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionStats {
    /// Mean whitespace-token count per caption.
    pub avg_len: f64,
    /// Mean over captions of the mean TF-IDF weight of each caption's
    /// distinct terms.
    pub tfidf: f64,
    pub captions: usize,
}

/// Treats every caption as a document. `IDF = ln(N/df)`, `TF = count / doc
/// length` in tokenizer terms. Captions without terms count toward
/// `avg_len` but not toward `tfidf`.
pub fn caption_stats(corpus: &CaptionCorpus) -> Result<CaptionStats> {
    let texts: Vec<&str> = corpus
        .videos
        .iter()
        .flat_map(|v| v.captions.iter().map(|c| c.text.as_str()))
        .collect();
    if texts.is_empty() {
        return Err(Error::Empty("caption corpus".into()));
    }
    let n = texts.len() as f64;
    let avg_len = texts.iter().map(|t| t.split_whitespace().count()).sum::<usize>() as f64 / n;

    let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in &docs {
        for t in doc.iter().map(String::as_str).collect::<HashSet<_>>() {
            *df.entry(t).or_default() += 1;
        }
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for doc in docs.iter().filter(|d| !d.is_empty()) {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in doc {
            *counts.entry(t).or_default() += 1;
        }
        // sum in a fixed order so results do not depend on hash iteration
        let mut terms: Vec<(&str, usize)> = counts.into_iter().collect();
        terms.sort_unstable();
        let len = doc.len() as f64;
        let sum: f64 = terms
            .iter()
            .map(|&(t, c)| c as f64 / len * (n / df[t] as f64).ln())
            .sum();
        total += sum / terms.len() as f64;
        counted += 1;
    }
    let tfidf = if counted == 0 { 0.0 } else { total / counted as f64 };
    Ok(CaptionStats { avg_len, tfidf, captions: texts.len() })
}
