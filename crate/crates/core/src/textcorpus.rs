//! Caption ingestion, class grouping, frame sampling and sentence splitting.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weak video-level label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Normal, Label::Abnormal];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Abnormal => "abnormal",
        }
    }

    /// Single-letter class key used in knowledge files (`n` / `a`).
    pub fn short(self) -> &'static str {
        match self {
            Label::Normal => "n",
            Label::Abnormal => "a",
        }
    }

    pub fn opposite(self) -> Label {
        match self {
            Label::Normal => Label::Abnormal,
            Label::Abnormal => Label::Normal,
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }

    /// Decision rule shared by classification and explanation: the 0.5
    /// boundary belongs to the abnormal class.
    pub fn from_score(y: f64) -> Label {
        if y >= 0.5 {
            Label::Abnormal
        } else {
            Label::Normal
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" | "n" => Ok(Label::Normal),
            "abnormal" | "a" => Ok(Label::Abnormal),
            other => Err(Error::Invalid(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Caption {
    pub video_id: String,
    pub frame_index: u64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub label: Label,
    /// Sorted by `frame_index`.
    pub captions: Vec<Caption>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionCorpus {
    pub videos: Vec<VideoRecord>,
    /// Dataset provenance, e.g. `ucf` or `synth-A`.
    pub source_tag: String,
}

/// One line of a caption JSON-Lines file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionLine {
    pub video_id: String,
    pub frame_index: u64,
    pub label: Label,
    pub text: String,
    /// Optional provenance tag; must agree across the file when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

impl CaptionCorpus {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn video(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == id)
    }

    pub fn labels(&self) -> Vec<bool> {
        self.videos.iter().map(|v| v.label.is_abnormal()).collect()
    }

    pub fn caption_count(&self) -> usize {
        self.videos.iter().map(|v| v.captions.len()).sum()
    }

    /// Serializes back to JSON-Lines, one caption per line, in corpus order.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for video in &self.videos {
            for caption in &video.captions {
                let line = CaptionLine {
                    video_id: video.video_id.clone(),
                    frame_index: caption.frame_index,
                    label: video.label,
                    text: caption.text.clone(),
                    source: Some(self.source_tag.clone()),
                };
                out.push_str(&serde_json::to_string(&line)?);
                out.push('\n');
            }
        }
        Ok(out)
    }

    /// Builds a corpus from already-parsed videos, enforcing every invariant.
    pub fn from_videos(videos: Vec<VideoRecord>, source_tag: impl Into<String>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut checked = Vec::with_capacity(videos.len());
        for mut video in videos {
            if !ids.insert(video.video_id.clone()) {
                return Err(Error::Invalid(format!(
                    "video id {:?} appears more than once",
                    video.video_id
                )));
            }
            video.captions.sort_by_key(|c| c.frame_index);
            for pair in video.captions.windows(2) {
                if pair[0].frame_index == pair[1].frame_index {
                    return Err(Error::DuplicateFrame {
                        video_id: video.video_id.clone(),
                        frame_index: pair[0].frame_index,
                    });
                }
            }
            if let Some(c) = video.captions.iter().find(|c| c.text.trim().is_empty()) {
                return Err(Error::Invalid(format!(
                    "empty caption text for video {:?} frame {}",
                    video.video_id, c.frame_index
                )));
            }
            checked.push(video);
        }
        Ok(CaptionCorpus {
            videos: checked,
            source_tag: source_tag.into(),
        })
    }
}

/// Reads a caption JSON-Lines file. The source tag defaults to the file stem
/// unless records carry a `source` field.
pub fn load_captions(path: impl AsRef<Path>) -> Result<CaptionCorpus> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let default_tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "captions".to_string());
    parse_captions(std::io::BufReader::new(file), &default_tag).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses caption JSON-Lines from any reader. Blank lines are ignored.
pub fn parse_captions(reader: impl BufRead, default_tag: &str) -> Result<CaptionCorpus> {
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, VideoRecord> = HashMap::new();
    let mut seen_frames: HashSet<(String, u64)> = HashSet::new();
    let mut source: Option<String> = None;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<captions>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.text.trim().is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "caption text is empty".into(),
            });
        }
        if !seen_frames.insert((rec.video_id.clone(), rec.frame_index)) {
            return Err(Error::DuplicateFrame {
                video_id: rec.video_id,
                frame_index: rec.frame_index,
            });
        }
        if let Some(tag) = rec.source {
            match &source {
                Some(existing) if *existing != tag => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("source {tag:?} disagrees with earlier {existing:?}"),
                    })
                }
                Some(_) => {}
                None => source = Some(tag),
            }
        }
        let caption = Caption {
            video_id: rec.video_id.clone(),
            frame_index: rec.frame_index,
            text: rec.text,
        };
        match by_id.get_mut(&rec.video_id) {
            Some(video) => {
                if video.label != rec.label {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!(
                            "label {} disagrees with earlier label {} for video {:?}",
                            rec.label, video.label, rec.video_id
                        ),
                    });
                }
                video.captions.push(caption);
            }
            None => {
                order.push(rec.video_id.clone());
                by_id.insert(
                    rec.video_id.clone(),
                    VideoRecord {
                        video_id: rec.video_id,
                        label: rec.label,
                        captions: vec![caption],
                    },
                );
            }
        }
    }

    if order.is_empty() {
        return Err(Error::Empty("caption file contains no records".into()));
    }
    let videos = order
        .into_iter()
        .map(|id| by_id.remove(&id).expect("ordered ids come from the map"))
        .collect();
    CaptionCorpus::from_videos(videos, source.unwrap_or_else(|| default_tag.to_string()))
}

/// Splits a corpus into its normal and abnormal parts, preserving order.
pub fn group_by_class(corpus: &CaptionCorpus) -> (CaptionCorpus, CaptionCorpus) {
    let (abnormal, normal): (Vec<_>, Vec<_>) = corpus
        .videos
        .iter()
        .cloned()
        .partition(|v| v.label.is_abnormal());
    (
        CaptionCorpus {
            videos: normal,
            source_tag: corpus.source_tag.clone(),
        },
        CaptionCorpus {
            videos: abnormal,
            source_tag: corpus.source_tag.clone(),
        },
    )
}

/// Rank positions chosen by [`sample_evenly`] for `n` captions and `k` requested frames.
pub fn even_positions(n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    if k == 1 {
        return vec![0];
    }
    (0..k).map(|i| i * (n - 1) / (k - 1)).collect()
}

/// Picks `k` captions at evenly spaced ranks, endpoints included.
pub fn sample_evenly(video: &VideoRecord, k: usize) -> Result<Vec<Caption>> {
    if k == 0 {
        return Err(Error::Invalid("frame count K must be at least 1".into()));
    }
    if video.captions.is_empty() {
        return Err(Error::Empty(format!(
            "video {:?} has no captions",
            video.video_id
        )));
    }
    Ok(even_positions(video.captions.len(), k)
        .into_iter()
        .map(|p| video.captions[p].clone())
        .collect())
}

/// Splits at `.`, `!` or `?` followed by whitespace or end of text.
/// Abbreviations are not special-cased.
pub fn sentence_split(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            let boundary = match chars.peek() {
                None => true,
                Some((_, next)) => next.is_whitespace(),
            };
            if boundary {
                let end = i + c.len_utf8();
                push_sentence(&mut out, &text[start..end]);
                start = end;
            }
        }
    }
    push_sentence(&mut out, &text[start..]);
    out
}

fn push_sentence(out: &mut Vec<String>, raw: &str) {
    let normalized = raw.split_whitespace().collect::<Vec<_>>().join(" ");
    if !normalized.is_empty() {
        out.push(normalized);
    }
}
