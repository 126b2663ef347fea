//! Seeded synthetic caption corpora with anomaly vocabulary planted in one
//! aspect. Each caption has one sentence per aspect, so each aspect's
//! vocabulary can be controlled independently.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knowledge::Aspect;
use crate::textcorpus::{Caption, CaptionCorpus, Label, VideoRecord};

/// Vocabulary family of a synthetic corpus.
///
/// `A` and `B` use different everyday vocabulary but share the anomaly
/// vocabulary; `Disjoint` shares neither with `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthDomain {
    A,
    B,
    Disjoint,
}

impl SynthDomain {
    pub fn tag(self) -> &'static str {
        match self {
            SynthDomain::A => "synth-a",
            SynthDomain::B => "synth-b",
            SynthDomain::Disjoint => "synth-disjoint",
        }
    }
}

impl std::str::FromStr for SynthDomain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(SynthDomain::A),
            "b" => Ok(SynthDomain::B),
            "disjoint" => Ok(SynthDomain::Disjoint),
            other => Err(Error::Invalid(format!("unknown synthetic domain {other:?}"))),
        }
    }
}

/// Word pools for one aspect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectPool {
    pub normal: Vec<String>,
    pub abnormal: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub subjects: Vec<String>,
    pub context: AspectPool,
    pub action: AspectPool,
    pub object: AspectPool,
    pub environment: AspectPool,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

impl Vocabulary {
    pub fn for_domain(domain: SynthDomain) -> Self {
        let everyday_a = (
            words(&["morning", "afternoon", "evening", "midday", "dawn", "dusk"]),
            words(&["walks", "talks", "waits", "shops", "reads", "jogs", "sits", "stands"]),
            words(&["backpack", "cup", "umbrella", "stroller", "newspaper", "suitcase", "phone", "wallet"]),
            words(&["street", "store", "parking lot", "station", "hallway", "sidewalk", "park", "bus stop"]),
        );
        let everyday_b = (
            words(&["weekend", "holiday", "lunchtime", "weekday", "festival", "routine"]),
            words(&["cooks", "plays", "cleans", "types", "climbs", "drives", "carries", "sings"]),
            words(&["laptop", "book", "guitar", "pan", "mug", "ball", "lamp", "bicycle"]),
            words(&["kitchen", "office", "garage", "lobby", "library", "garden", "yard", "market"]),
        );
        let anomalous_a = (
            words(&["robbery", "riot", "emergency", "explosion"]),
            words(&["punches", "fights", "steals", "kicks", "shoves", "attacks"]),
            words(&["gun", "knife", "crowbar", "bat", "bottle", "weapon"]),
            words(&["burning building", "smashed storefront", "wrecked car park", "flooded tunnel"]),
        );
        let anomalous_disjoint = (
            words(&["accident", "chaos", "midnight raid", "blackout"]),
            words(&["stabs", "smashes", "chases", "throws", "crashes", "flees"]),
            words(&["sword", "grenade", "axe", "hammer", "rifle", "pistol"]),
            words(&["collapsed bridge", "burning alley", "broken plaza", "smoky stairwell"]),
        );
        let (everyday, anomalous) = match domain {
            SynthDomain::A => (everyday_a, anomalous_a),
            SynthDomain::B => (everyday_b, anomalous_a),
            SynthDomain::Disjoint => (everyday_b, anomalous_disjoint),
        };
        let subjects = match domain {
            SynthDomain::A => words(&["A man", "A woman", "A person", "A child", "A worker", "An old man"]),
            _ => words(&["A chef", "A student", "A clerk", "A tourist", "A driver", "A girl"]),
        };
        Vocabulary {
            subjects,
            context: AspectPool { normal: everyday.0, abnormal: anomalous.0 },
            action: AspectPool { normal: everyday.1, abnormal: anomalous.1 },
            object: AspectPool { normal: everyday.2, abnormal: anomalous.2 },
            environment: AspectPool { normal: everyday.3, abnormal: anomalous.3 },
        }
    }

    pub fn pool(&self, aspect: Aspect) -> &AspectPool {
        match aspect {
            Aspect::Context => &self.context,
            Aspect::Action => &self.action,
            Aspect::Object => &self.object,
            Aspect::Environment => &self.environment,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub train_videos: usize,
    pub test_videos: usize,
    /// Captions per video.
    pub frames: usize,
    pub abnormal_fraction: f64,
    /// Aspect whose sentences carry the anomaly vocabulary.
    pub planted_aspect: Aspect,
    /// Probability that a frame of an abnormal video is planted; every
    /// abnormal video has at least one planted frame.
    pub plant_rate: f64,
    pub domain: SynthDomain,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            train_videos: 200,
            test_videos: 100,
            frames: 8,
            abnormal_fraction: 0.5,
            planted_aspect: Aspect::Object,
            plant_rate: 1.0,
            domain: SynthDomain::A,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Invalid("synthetic videos need at least one frame".into()));
        }
        if !(0.0..=1.0).contains(&self.plant_rate) || !(0.0..1.0).contains(&self.abnormal_fraction) {
            return Err(Error::Invalid("plant_rate and abnormal_fraction must be probabilities".into()));
        }
        for (n, what) in [(self.train_videos, "train"), (self.test_videos, "test")] {
            let pos = (n as f64 * self.abnormal_fraction).round() as usize;
            if n > 0 && (pos == 0 || pos == n) {
                return Err(Error::Invalid(format!("{what} split would contain a single class")));
            }
        }
        Ok(())
    }
}

/// Description of a generated corpus, written next to the caption files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub source_tag: String,
    pub planted_terms: Vec<String>,
    pub vocabulary: Vocabulary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSplit {
    pub train: CaptionCorpus,
    pub test: CaptionCorpus,
    pub manifest: SynthManifest,
}

fn sentence(aspect: Aspect, subject: &str, word: &str) -> String {
    match aspect {
        Aspect::Context => format!("It is {word}."),
        Aspect::Action => format!("{subject} {word} nearby."),
        Aspect::Object => format!("{subject} holds a {word}."),
        Aspect::Environment => format!("The scene is a {word}."),
    }
}

fn caption(vocab: &Vocabulary, rng: &mut ChaCha8Rng, planted: Option<Aspect>) -> String {
    let subject = vocab.subjects.choose(rng).expect("non-empty pool");
    Aspect::ALL
        .iter()
        .map(|&a| {
            let pool = vocab.pool(a);
            let list = if planted == Some(a) { &pool.abnormal } else { &pool.normal };
            sentence(a, subject, list.choose(rng).expect("non-empty pool"))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn video(id: String, label: Label, cfg: &SynthConfig, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> VideoRecord {
    let mut planted: Vec<bool> = (0..cfg.frames)
        .map(|_| label.is_abnormal() && rng.random_bool(cfg.plant_rate))
        .collect();
    if label.is_abnormal() && !planted.iter().any(|&p| p) {
        let i = rng.random_range(0..cfg.frames);
        planted[i] = true;
    }
    let captions = planted
        .iter()
        .enumerate()
        .map(|(i, &p)| Caption {
            video_id: id.clone(),
            frame_index: i as u64,
            text: caption(vocab, rng, p.then_some(cfg.planted_aspect)),
        })
        .collect();
    VideoRecord { video_id: id, label, captions }
}

fn split(name: &str, n: usize, cfg: &SynthConfig, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Result<CaptionCorpus> {
    let n_abnormal = (n as f64 * cfg.abnormal_fraction).round() as usize;
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_abnormal { Label::Abnormal } else { Label::Normal })
        .collect();
    use rand::seq::SliceRandom;
    labels.shuffle(rng);
    let tag = cfg.domain.tag();
    let videos = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| video(format!("{tag}-{name}-{i:04}"), label, cfg, vocab, rng))
        .collect();
    CaptionCorpus::from_videos(videos, tag)
}

/// Generates a train/test pair. The test split uses an independent stream.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticSplit> {
    cfg.validate()?;
    let vocab = Vocabulary::for_domain(cfg.domain);
    let mut train_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x7e57));
    let train = split("train", cfg.train_videos, cfg, &vocab, &mut train_rng)?;
    let test = split("test", cfg.test_videos, cfg, &vocab, &mut test_rng)?;
    Ok(SyntheticSplit {
        manifest: SynthManifest {
            config: cfg.clone(),
            source_tag: cfg.domain.tag().to_string(),
            planted_terms: vocab.pool(cfg.planted_aspect).abnormal.clone(),
            vocabulary: vocab,
        },
        train,
        test,
    })
}
