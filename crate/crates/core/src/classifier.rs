//! Fusion head, end-to-end model forward pass, training loop and the
//! versioned model file.
//!
//! The description path encodes per-frame caption embeddings, pools them to
//! `h̄` and projects to `P_d`. The knowledge path projects the class-agnostic
//! knowledge embedding (mean of the normal and abnormal encodings) to `P_V`.
//! The score is `σ(W·[P_d; P_V] + b)`.
//!
//! So that the slot importance network receives a training signal, the
//! importance-weighted slot context `Σ_s w_s·C_s` is computed under each
//! class's prototypes and their difference (abnormal minus normal) is added
//! to `h̄` through a scalar gate (initialized to zero) before projection.
//! The residual is disabled when the importance network is frozen.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedder::{tokenize, Embedder, EmbedderMeta, TokenEmbeddingSeq, DESCRIPTION_MAX_TOKENS};
use crate::encoder::{
    encoder_forward, tensor_group, uniform_init, EncoderConfig, EncoderParams, EncoderTensors,
};
use crate::error::{Error, Result};
use crate::knowledge::{Aspect, KnowledgeBase};
use crate::parallel::par_map;
use crate::tape::{sigmoid, Tape, Var};
use crate::textcorpus::{sample_evenly, CaptionCorpus, Label, VideoRecord};

pub const MODEL_MAGIC: &[u8; 8] = b"TBVADMDL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

tensor_group!(
    /// Knowledge projection, fusion head, slot importance network and the
    /// residual gates. Shapes follow the `out×in` / `1×n` convention.
    HeadTensors {
        know_w, know_b,
        fusion_w, fusion_b,
        imp_w1, imp_b1, imp_w2, imp_b2,
        gate,
    }
);

#[derive(Debug, Clone, PartialEq)]
pub struct ModelTensors<T> {
    pub encoder: EncoderTensors<T>,
    pub head: HeadTensors<T>,
}

impl<T> ModelTensors<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&str, &T) -> U) -> ModelTensors<U> {
        ModelTensors {
            encoder: self.encoder.map("encoder.", f),
            head: self.head.map("head.", f),
        }
    }

    pub fn try_map<U, E>(&self, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<ModelTensors<U>, E> {
        Ok(ModelTensors {
            encoder: self.encoder.try_map("encoder.", f)?,
            head: self.head.try_map("head.", f)?,
        })
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &T)) {
        self.encoder.visit("encoder.", f);
        self.head.visit("head.", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut T)) {
        self.encoder.visit_mut("encoder.", f);
        self.head.visit_mut("head.", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n.to_string()));
        names
    }
}

fn is_importance_tensor(name: &str) -> bool {
    name.starts_with("head.imp_") || name == "head.gate"
}

/// Everything needed to rebuild a model besides its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub aspects: Vec<Aspect>,
    pub embedder: EmbedderMeta,
    /// Frames sampled per video (`K`).
    pub frames: usize,
    pub seed: u64,
    /// Adds the gated difference of the classes' importance-weighted slot
    /// contexts to `h̄`.
    pub gated_residual: bool,
    /// Row-softmax over slot attention scores (off: scores used as written).
    pub softmax_attention: bool,
}

impl ModelConfig {
    pub fn new(encoder: EncoderConfig, kb: &KnowledgeBase, frames: usize, seed: u64) -> Self {
        ModelConfig {
            encoder,
            aspects: kb.aspects().to_vec(),
            embedder: kb.embedder_meta(),
            frames,
            seed,
            gated_residual: true,
            softmax_attention: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.frames == 0 {
            return Err(Error::Invalid("frames must be positive".into()));
        }
        if self.aspects.is_empty() {
            return Err(Error::Invalid("model has no active aspects".into()));
        }
        if self.embedder.dim != self.encoder.d_model {
            return Err(Error::dims("embedding width vs d_model", self.encoder.d_model, self.embedder.dim));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: ModelTensors<Array2<f64>>,
}

impl ModelParams {
    /// Seeded uniform(±1/√fan_in) initialization; residual gates start at 0.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let enc = EncoderParams::init(config.encoder, &mut rng)?;
        let d = config.encoder.d_model;
        let dl = config.encoder.d_latent;
        let head = HeadTensors {
            know_w: uniform_init(&mut rng, dl, d, d),
            know_b: uniform_init(&mut rng, 1, dl, d),
            fusion_w: uniform_init(&mut rng, 1, 2 * dl, 2 * dl),
            fusion_b: uniform_init(&mut rng, 1, 1, 2 * dl),
            imp_w1: uniform_init(&mut rng, d, 2 * d, 2 * d),
            imp_b1: uniform_init(&mut rng, 1, d, 2 * d),
            imp_w2: uniform_init(&mut rng, 1, d, d),
            imp_b2: uniform_init(&mut rng, 1, 1, d),
            gate: Array2::zeros((1, 1)),
        };
        let mut params = ModelParams {
            config,
            tensors: ModelTensors { encoder: enc.tensors, head },
        };
        params.round_to_f32();
        Ok(params)
    }

    pub fn encoder_params(&self) -> EncoderParams {
        EncoderParams {
            config: self.config.encoder,
            tensors: self.tensors.encoder.clone(),
        }
    }

    /// Rounds every value to the nearest `f32` so the saved model reloads
    /// to bitwise-identical tensors.
    pub fn round_to_f32(&mut self) {
        self.tensors
            .visit_mut(&mut |_, m| m.mapv_inplace(|v| v as f32 as f64));
    }

    pub fn check_finite(&self) -> Result<()> {
        let mut bad = None;
        self.tensors.visit(&mut |name, m| {
            if bad.is_none() && m.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(name) => Err(Error::NonFinite(format!("model tensor {name}"))),
            None => Ok(()),
        }
    }

    /// Checks that `kb` is the knowledge this model was configured for.
    pub fn check_knowledge(&self, kb: &KnowledgeBase) -> Result<()> {
        if kb.embedder_meta() != self.config.embedder {
            return Err(Error::Invalid(format!(
                "knowledge embedder {:?} does not match model embedder {:?}",
                kb.embedder_meta(),
                self.config.embedder
            )));
        }
        if kb.aspects() != self.config.aspects.as_slice() {
            return Err(Error::Invalid(format!(
                "knowledge aspects [{}] do not match model aspects [{}]",
                Aspect::join(kb.aspects(), ","),
                Aspect::join(&self.config.aspects, ",")
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&ModelHeader {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            tensor_count: self.tensors.names().len(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        self.tensors.visit(&mut |name, m| {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for v in m.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        });
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MODEL_MAGIC {
            return Err(Error::Corrupt { offset: 0, message: "not a model file (bad magic)".into() });
        }
        let version = r.u32("format version")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: MODEL_FORMAT_VERSION });
        }
        let header_len = r.u32("header length")? as usize;
        let header_at = r.pos;
        let header: ModelHeader = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::Corrupt { offset: header_at, message: format!("bad header: {e}") })?;
        if header.format_version != version {
            return Err(Error::Corrupt {
                offset: header_at,
                message: "header version disagrees with preamble".into(),
            });
        }
        header
            .config
            .validate()
            .map_err(|e| Error::Corrupt { offset: header_at, message: e.to_string() })?;

        let mut blocks = BTreeMap::new();
        for _ in 0..header.tensor_count {
            let at = r.pos;
            let name_len = r.u16("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Corrupt { offset: at, message: "tensor name is not UTF-8".into() })?;
            let rows = r.u32("tensor rows")? as usize;
            let cols = r.u32("tensor cols")? as usize;
            let n = rows
                .checked_mul(cols)
                .and_then(|n| n.checked_mul(4))
                .ok_or(Error::Corrupt { offset: at, message: "tensor size overflows".into() })?;
            let data = r.take(n, "tensor data")?;
            let values: Vec<f64> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            let m = Array2::from_shape_vec((rows, cols), values).expect("length checked");
            if blocks.insert(name.clone(), (at, m)).is_some() {
                return Err(Error::Corrupt { offset: at, message: format!("duplicate tensor {name}") });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt { offset: r.pos, message: "trailing bytes after last tensor".into() });
        }

        let template = ModelParams::zeros(header.config.clone())?;
        let end = r.pos;
        let tensors = template.tensors.try_map(&mut |name, shape_of| {
            let (at, m) = blocks
                .remove(name)
                .ok_or_else(|| Error::Corrupt { offset: end, message: format!("missing tensor {name}") })?;
            if m.dim() != shape_of.dim() {
                return Err(Error::Corrupt {
                    offset: at,
                    message: format!("tensor {name} has shape {:?}, expected {:?}", m.dim(), shape_of.dim()),
                });
            }
            Ok(m)
        })?;
        if let Some((name, (at, _))) = blocks.into_iter().next() {
            return Err(Error::Corrupt { offset: at, message: format!("unexpected tensor {name}") });
        }
        Ok(ModelParams { config: header.config, tensors })
    }

    /// Zero tensors with the shapes implied by `config`.
    fn zeros(config: ModelConfig) -> Result<Self> {
        let mut p = ModelParams::init(config)?;
        p.tensors.visit_mut(&mut |_, m| m.fill(0.0));
        Ok(p)
    }

    /// Hex SHA-256 of the serialized model.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    format_version: u32,
    config: ModelConfig,
    tensor_count: usize,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos,
                message: format!("file truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
}

pub fn save_model(model: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = model.to_bytes()?;
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelParams::from_bytes(&bytes)
}

/// `σ(W·[P_d; P_V] + b)` for the fusion head in `head`.
pub fn fuse_classify(p_d: &Array1<f64>, p_v: &Array1<f64>, head: &HeadTensors<Array2<f64>>) -> Result<f64> {
    let dl = head.fusion_w.ncols() / 2;
    if p_d.len() != dl {
        return Err(Error::dims("P_d", dl, p_d.len()));
    }
    if p_v.len() != dl {
        return Err(Error::dims("P_V", dl, p_v.len()));
    }
    let w = head.fusion_w.row(0);
    let z = w.slice(ndarray::s![..dl]).dot(p_d) + w.slice(ndarray::s![dl..]).dot(p_v) + head.fusion_b[[0, 0]];
    Ok(sigmoid(z))
}

/// Knowledge-derived constants used by every forward pass.
#[derive(Debug, Clone)]
pub struct KnowledgeInputs {
    pub prototypes_n: Array2<f64>,
    pub prototypes_a: Array2<f64>,
    /// Mean of the two classes' pooled knowledge embeddings, `1×d`.
    pub knowledge_mean: Array2<f64>,
}

impl KnowledgeInputs {
    pub fn new(kb: &KnowledgeBase) -> Self {
        let mean = (kb.knowledge_embedding(Label::Normal) + kb.knowledge_embedding(Label::Abnormal)) * 0.5;
        KnowledgeInputs {
            prototypes_n: kb.prototypes(Label::Normal).clone(),
            prototypes_a: kb.prototypes(Label::Abnormal).clone(),
            knowledge_mean: mean.insert_axis(ndarray::Axis(0)),
        }
    }
}

pub(crate) struct ForwardVars {
    pub logit: Var,
    pub h: Var,
    pub h_bar: Var,
    pub p_d: Var,
    pub p_v: Var,
}

/// Importance-weighted slot context `Σ_s w_s·C_s` (`1×d`) for one class.
fn weighted_context(
    tape: &mut Tape,
    head: &HeadTensors<Var>,
    prototypes: &Array2<f64>,
    h: Var,
    mask: &[bool],
    softmax_attention: bool,
) -> Var {
    let d = prototypes.ncols();
    let k = tape.leaf(prototypes.clone());
    let scores = tape.matmul_t(k, h);
    let mut a = tape.scale(scores, 1.0 / (d as f64).sqrt());
    if softmax_attention {
        if mask.iter().any(|m| !m) {
            let bias = Array2::from_shape_fn((prototypes.nrows(), mask.len()), |(_, j)| {
                if mask[j] {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            });
            let b = tape.leaf(bias);
            a = tape.add(a, b);
        }
        a = tape.softmax_rows(a);
    }
    // masked rows of H are zero, so masked columns contribute nothing
    let c = tape.matmul(a, h);
    let input = tape.concat_cols(&[c, k]);
    let hidden = tape.matmul_t(input, head.imp_w1);
    let hidden = tape.add_row(hidden, head.imp_b1);
    let hidden = tape.tanh(hidden);
    let z = tape.matmul_t(hidden, head.imp_w2);
    let z = tape.add_row(z, head.imp_b2);
    let z = tape.transpose(z);
    let w = tape.softmax_rows(z);
    tape.matmul(w, c)
}

pub(crate) fn model_forward(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &ModelTensors<Var>,
    knowledge: &KnowledgeInputs,
    x: &TokenEmbeddingSeq,
) -> Result<ForwardVars> {
    let h = encoder_forward(tape, &config.encoder, &vars.encoder, x.vectors(), x.mask())?;
    let h_bar = tape.mean_rows(h, x.mask());
    let mut pooled = h_bar;
    if config.gated_residual {
        let head = &vars.head;
        let ctx_a = weighted_context(tape, head, &knowledge.prototypes_a, h, x.mask(), config.softmax_attention);
        let ctx_n = weighted_context(tape, head, &knowledge.prototypes_n, h, x.mask(), config.softmax_attention);
        let ctx_n = tape.scale(ctx_n, -1.0);
        let contrast = tape.add(ctx_a, ctx_n);
        let gated = tape.scale_by(contrast, head.gate);
        pooled = tape.add(pooled, gated);
    }
    let p_d = tape.matmul_t(pooled, vars.encoder.w_d);
    let p_d = tape.add_row(p_d, vars.encoder.b_d);
    let km = tape.leaf(knowledge.knowledge_mean.clone());
    let p_v = tape.matmul_t(km, vars.head.know_w);
    let p_v = tape.add_row(p_v, vars.head.know_b);
    let cat = tape.concat_cols(&[p_d, p_v]);
    let logit = tape.matmul_t(cat, vars.head.fusion_w);
    let logit = tape.add_row(logit, vars.head.fusion_b);
    if !tape.scalar(logit).is_finite() {
        return Err(Error::NonFinite("fusion logit".into()));
    }
    Ok(ForwardVars { logit, h, h_bar, p_d, p_v })
}

/// Forward pass outputs for one video.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub y: f64,
    pub p_d: Array1<f64>,
    pub p_v: Array1<f64>,
    /// Encoder output `H_d`.
    pub h_d: TokenEmbeddingSeq,
    /// Mean of the unmasked rows of `H_d`.
    pub h_bar: Array1<f64>,
}

fn row(m: &Array2<f64>) -> Array1<f64> {
    m.row(0).to_owned()
}

pub fn predict_features(model: &ModelParams, knowledge: &KnowledgeInputs, x: &TokenEmbeddingSeq) -> Result<Prediction> {
    let mut tape = Tape::new();
    let vars = model.tensors.map(&mut |_, m| tape.leaf(m.clone()));
    let out = model_forward(&mut tape, &model.config, &vars, knowledge, x)?;
    Ok(Prediction {
        y: sigmoid(tape.scalar(out.logit)),
        p_d: row(tape.value(out.p_d)),
        p_v: row(tape.value(out.p_v)),
        h_d: TokenEmbeddingSeq::new(tape.value(out.h).clone(), x.mask().to_vec())?,
        h_bar: row(tape.value(out.h_bar)),
    })
}

/// Samples `frames` evenly spaced captions and embeds each one into a
/// pooled row. Captions without any token are masked out.
pub fn video_features(video: &VideoRecord, embedder: &dyn Embedder, frames: usize) -> Result<TokenEmbeddingSeq> {
    let captions = sample_evenly(video, frames)?;
    let real: Vec<usize> = (0..captions.len())
        .filter(|&i| !tokenize(&captions[i].text).is_empty())
        .collect();
    if real.is_empty() {
        return Err(Error::Empty(format!("video {} has no caption tokens", video.video_id)));
    }
    let texts: Vec<&str> = real.iter().map(|&i| captions[i].text.as_str()).collect();
    let pooled = embedder.embed_pooled(&texts, DESCRIPTION_MAX_TOKENS)?;
    let mut x = Array2::zeros((captions.len(), embedder.dim()));
    let mut mask = vec![false; captions.len()];
    for (&i, v) in real.iter().zip(pooled) {
        x.row_mut(i).assign(&v);
        mask[i] = true;
    }
    TokenEmbeddingSeq::new(x, mask)
}

pub fn predict_video(
    video: &VideoRecord,
    kb: &KnowledgeBase,
    model: &ModelParams,
    embedder: &dyn Embedder,
    frames: usize,
) -> Result<Prediction> {
    model.check_knowledge(kb)?;
    let x = video_features(video, embedder, frames)?;
    predict_features(model, &KnowledgeInputs::new(kb), &x)
}

/// Scores every video of `corpus` in order.
pub fn predict_corpus(
    corpus: &CaptionCorpus,
    kb: &KnowledgeBase,
    model: &ModelParams,
    embedder: &dyn Embedder,
) -> Result<Vec<f64>> {
    model.check_knowledge(kb)?;
    let knowledge = KnowledgeInputs::new(kb);
    let features = corpus_features(corpus, embedder, model.config.frames)?;
    features
        .iter()
        .map(|x| predict_features(model, &knowledge, x).map(|p| p.y))
        .collect()
}

pub fn corpus_features(corpus: &CaptionCorpus, embedder: &dyn Embedder, frames: usize) -> Result<Vec<TokenEmbeddingSeq>> {
    par_map(&corpus.videos, 8, |v| video_features(v, embedder, frames))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub l2_weight: f64,
    pub freeze_importance_net: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            l2_weight: 1e-4,
            freeze_importance_net: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Invalid(format!("learning_rate {} must be in [0, 1]", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Invalid("epochs and batch_size must be positive".into()));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::Invalid("l2_weight must be a nonnegative number".into()));
        }
        Ok(())
    }
}

/// Per-epoch mean training loss.
pub type LossHistory = Vec<f64>;

/// Loss and gradients (in `ModelTensors::visit` order) for one video.
pub(crate) fn video_loss_and_grads(
    model: &ModelParams,
    knowledge: &KnowledgeInputs,
    x: &TokenEmbeddingSeq,
    label: bool,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let vars = model.tensors.map(&mut |_, m| tape.leaf(m.clone()));
    let out = model_forward(&mut tape, &model.config, &vars, knowledge, x)?;
    let loss = tape.bce_with_logits(out.logit, if label { 1.0 } else { 0.0 });
    let grads = tape.backward(loss, 1.0);
    let mut shapes = Vec::new();
    model.tensors.visit(&mut |_, m| shapes.push(m.raw_dim()));
    let mut var_list = Vec::new();
    vars.visit(&mut |_, v| var_list.push(*v));
    let g = var_list
        .iter()
        .zip(shapes)
        .map(|(v, shape)| grads.get(*v).cloned().unwrap_or_else(|| Array2::zeros(shape)))
        .collect();
    Ok((tape.scalar(loss), g))
}

/// Mean BCE plus `l2/2·‖θ‖²` over the trainable tensors.
pub fn training_loss(
    model: &ModelParams,
    knowledge: &KnowledgeInputs,
    data: &[(TokenEmbeddingSeq, bool)],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (x, label) in data {
        total += video_loss_and_grads(model, knowledge, x, *label)?.0;
    }
    let mut sq = 0.0;
    model.tensors.visit(&mut |name, m| {
        if !(cfg.freeze_importance_net && is_importance_tensor(name)) {
            sq += m.iter().map(|v| v * v).sum::<f64>();
        }
    });
    Ok(total / data.len() as f64 + 0.5 * cfg.l2_weight * sq)
}

/// Analytic gradient of [`training_loss`] for every tensor; tensors frozen
/// by `cfg` get zero gradients.
pub fn training_loss_gradients(
    model: &ModelParams,
    knowledge: &KnowledgeInputs,
    data: &[(TokenEmbeddingSeq, bool)],
    cfg: &TrainConfig,
) -> Result<ModelTensors<Array2<f64>>> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut sum: Option<Vec<Array2<f64>>> = None;
    for (x, label) in data {
        let (_, grads) = video_loss_and_grads(model, knowledge, x, *label)?;
        match &mut sum {
            None => sum = Some(grads),
            Some(acc) => acc.iter_mut().zip(grads).for_each(|(a, g)| *a += &g),
        }
    }
    let mut sum = sum.expect("non-empty data").into_iter();
    let n = data.len() as f64;
    Ok(model.tensors.map(&mut |name, m| {
        let g = sum.next().expect("one gradient per tensor");
        if cfg.freeze_importance_net && is_importance_tensor(name) {
            Array2::zeros(m.raw_dim())
        } else {
            g / n + &(m * cfg.l2_weight)
        }
    }))
}

/// Mini-batch SGD from `init` over pre-embedded videos. Class balance is
/// checked by [`train`]; this lower-level entry point accepts any labels.
pub fn train_from(
    init: ModelParams,
    knowledge: &KnowledgeInputs,
    data: &[(TokenEmbeddingSeq, bool)],
    cfg: &TrainConfig,
) -> Result<(ModelParams, LossHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut model = init;
    if cfg.freeze_importance_net {
        model.config.gated_residual = false;
    }
    let names = model.tensors.names();
    let frozen: Vec<bool> = names
        .iter()
        .map(|n| cfg.freeze_importance_net && is_importance_tensor(n))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed_5eed_5eed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results = par_map(batch, 8, |&i| video_loss_and_grads(&model, knowledge, &data[i].0, data[i].1));
            let mut sum: Option<Vec<Array2<f64>>> = None;
            for r in results {
                let (loss, grads) = r.map_err(|e| match e {
                    Error::NonFinite(_) => Error::NanLoss { epoch },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::NanLoss { epoch });
                }
                epoch_loss += loss;
                match &mut sum {
                    None => sum = Some(grads),
                    Some(acc) => acc.iter_mut().zip(grads).for_each(|(a, g)| *a += &g),
                }
            }
            let sum = sum.expect("non-empty batch");
            let scale = 1.0 / batch.len() as f64;
            let mut k = 0;
            model.tensors.visit_mut(&mut |_, m| {
                if !frozen[k] {
                    let g = &sum[k] * scale + &(&*m * cfg.l2_weight);
                    m.scaled_add(-cfg.learning_rate, &g);
                }
                k += 1;
            });
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() {
            return Err(Error::NanLoss { epoch });
        }
        log::debug!("epoch {epoch}: loss {mean:.6}");
        history.push(mean);
    }
    model.round_to_f32();
    model.check_finite().map_err(|_| Error::NanLoss { epoch: cfg.epochs - 1 })?;
    Ok((model, history))
}

/// Embeds the corpus, initializes a model from `model_cfg` (seeded by
/// `cfg.seed`) and trains it.
pub fn train(
    corpus: &CaptionCorpus,
    kb: &KnowledgeBase,
    encoder: EncoderConfig,
    frames: usize,
    cfg: &TrainConfig,
    embedder: &dyn Embedder,
) -> Result<ModelParams> {
    let (model, _) = train_with_history(corpus, kb, encoder, frames, cfg, embedder)?;
    Ok(model)
}

pub fn train_with_history(
    corpus: &CaptionCorpus,
    kb: &KnowledgeBase,
    encoder: EncoderConfig,
    frames: usize,
    cfg: &TrainConfig,
    embedder: &dyn Embedder,
) -> Result<(ModelParams, LossHistory)> {
    cfg.validate()?;
    let labels = corpus.labels();
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::Invalid("training corpus must contain both normal and abnormal videos".into()));
    }
    let mut model_cfg = ModelConfig::new(encoder, kb, frames, cfg.seed);
    model_cfg.gated_residual = !cfg.freeze_importance_net;
    let init = ModelParams::init(model_cfg)?;
    init.check_knowledge(kb)?;
    let features = corpus_features(corpus, embedder, frames)?;
    let data: Vec<(TokenEmbeddingSeq, bool)> = features.into_iter().zip(labels).collect();
    train_from(init, &KnowledgeInputs::new(kb), &data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedder::Backend;
    use ndarray::arr1;
    use rand::Rng;

    fn meta(d: usize) -> EmbedderMeta {
        EmbedderMeta { backend: Backend::Hash, dim: d, seed: 0 }
    }

    fn tiny_config(d: usize, layers: usize) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { num_layers: layers, num_heads: 2, d_model: d, d_ff: 2 * d, d_latent: 3 },
            aspects: Aspect::ALL.to_vec(),
            embedder: meta(d),
            frames: 4,
            seed: 7,
            gated_residual: true,
            softmax_attention: false,
        }
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0))
    }

    fn tiny_knowledge(d: usize, seed: u64) -> KnowledgeInputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KnowledgeInputs {
            prototypes_n: random_matrix(&mut rng, 4, d) * 0.5,
            prototypes_a: random_matrix(&mut rng, 4, d) * 0.5,
            knowledge_mean: random_matrix(&mut rng, 1, d) * 0.5,
        }
    }

    #[test]
    fn fuse_classify_examples() {
        let mut p = ModelParams::init(tiny_config(4, 0)).unwrap();
        p.tensors.head.fusion_w.fill(0.0);
        p.tensors.head.fusion_b.fill(0.0);
        let v = arr1(&[0.3, -2.0, 5.0]);
        assert_eq!(fuse_classify(&v, &v, &p.tensors.head).unwrap(), 0.5);

        p.tensors.head.fusion_w[[0, 0]] = 1.0;
        p.tensors.head.fusion_b[[0, 0]] = 0.0;
        let pd = arr1(&[3f64.ln(), 0.0, 0.0]);
        let y = fuse_classify(&pd, &Array1::zeros(3), &p.tensors.head).unwrap();
        assert!((y - 0.75).abs() < 1e-12);

        assert!(fuse_classify(&arr1(&[1.0]), &v, &p.tensors.head).is_err());
    }

    #[test]
    fn fuse_classify_matches_scalar_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ModelParams::init(tiny_config(4, 0)).unwrap();
        p.tensors.head.fusion_w = random_matrix(&mut rng, 1, 6);
        p.tensors.head.fusion_b[[0, 0]] = 0.37;
        let pd = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        let pv = Array1::from_shape_simple_fn(3, || rng.random_range(-1.0..1.0));
        let mut z = 0.37;
        for i in 0..3 {
            z += p.tensors.head.fusion_w[[0, i]] * pd[i];
            z += p.tensors.head.fusion_w[[0, 3 + i]] * pv[i];
        }
        let expected = 1.0 / (1.0 + (-z).exp());
        assert!((fuse_classify(&pd, &pv, &p.tensors.head).unwrap() - expected).abs() <= 1e-12);
    }

    #[test]
    fn fusion_is_monotone_in_logit() {
        let p = ModelParams::init(tiny_config(4, 0)).unwrap();
        let pd = arr1(&[0.1, 0.2, 0.3]);
        let pv = arr1(&[0.0, 0.0, 0.0]);
        let y0 = fuse_classify(&pd, &pv, &p.tensors.head).unwrap();
        let mut bumped = p.tensors.head.clone();
        bumped.fusion_b[[0, 0]] += 0.1;
        assert!(fuse_classify(&pd, &pv, &bumped).unwrap() > y0);
    }

    #[test]
    fn init_is_f32_exact_and_seeded() {
        let a = ModelParams::init(tiny_config(8, 1)).unwrap();
        let b = ModelParams::init(tiny_config(8, 1)).unwrap();
        assert_eq!(a, b);
        a.tensors.visit(&mut |_, m| assert!(m.iter().all(|&v| v == v as f32 as f64)));
        assert_eq!(a.tensors.head.gate[[0, 0]], 0.0);
    }

    #[test]
    fn model_file_round_trip() {
        let p = ModelParams::init(tiny_config(8, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&p, &path).unwrap();
        let q = load_model(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.digest().unwrap(), q.digest().unwrap());
    }

    #[test]
    fn truncated_and_versioned_files_fail() {
        let p = ModelParams::init(tiny_config(8, 1)).unwrap();
        let bytes = p.to_bytes().unwrap();
        match ModelParams::from_bytes(&bytes[..bytes.len() - 3]) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset > 16),
            other => panic!("expected corrupt error, got {other:?}"),
        }
        let mut wrong = bytes.clone();
        wrong[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            ModelParams::from_bytes(&wrong),
            Err(Error::Version { found: 9, expected: 1 })
        ));
        assert!(matches!(ModelParams::from_bytes(b"nope"), Err(Error::Corrupt { offset: 0, .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(ModelParams::from_bytes(&extra), Err(Error::Corrupt { .. })));
    }

    fn tiny_data(d: usize, seed: u64) -> Vec<(TokenEmbeddingSeq, bool)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = random_matrix(&mut rng, 4, d);
        a.row_mut(3).fill(0.0);
        vec![
            (TokenEmbeddingSeq::new(a, vec![true, true, true, false]).unwrap(), true),
            (TokenEmbeddingSeq::unmasked(random_matrix(&mut rng, 4, d)).unwrap(), false),
        ]
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let init = ModelParams::init(tiny_config(8, 1)).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, batch_size: 1, ..Default::default() };
        let (trained, hist) = train_from(init.clone(), &tiny_knowledge(8, 1), &tiny_data(8, 2), &cfg).unwrap();
        assert_eq!(trained, init);
        assert_eq!(hist.len(), 2);
    }

    #[test]
    fn nan_loss_reports_epoch() {
        let init = ModelParams::init(tiny_config(8, 1)).unwrap();
        let mut poisoned = init;
        poisoned.tensors.head.fusion_b[[0, 0]] = f64::NAN;
        assert!(matches!(
            train_from(poisoned, &tiny_knowledge(8, 1), &tiny_data(8, 2), &TrainConfig::default()),
            Err(Error::NanLoss { epoch: 0 })
        ));
    }

    #[test]
    fn one_step_matches_hand_gradient() {
        // identity projections, empty encoder, frozen importance net
        let mut cfg = tiny_config(2, 0);
        cfg.encoder = EncoderConfig { num_layers: 0, num_heads: 1, d_model: 2, d_ff: 2, d_latent: 2 };
        cfg.embedder = meta(2);
        let mut init = ModelParams::init(cfg).unwrap();
        init.tensors.encoder.w_d = Array2::eye(2);
        init.tensors.encoder.b_d.fill(0.0);
        init.tensors.head.know_w = Array2::eye(2);
        init.tensors.head.know_b.fill(0.0);
        init.tensors.head.fusion_w = ndarray::arr2(&[[0.5, -0.25, 0.125, 0.75]]);
        init.tensors.head.fusion_b[[0, 0]] = 0.0;
        let knowledge = KnowledgeInputs {
            prototypes_n: Array2::zeros((4, 2)),
            prototypes_a: Array2::zeros((4, 2)),
            knowledge_mean: ndarray::arr2(&[[0.5, 0.5]]),
        };
        let x = TokenEmbeddingSeq::unmasked(ndarray::arr2(&[[1.0, 0.0], [0.0, -1.0]])).unwrap();
        let lr = 0.5;
        let tc = TrainConfig {
            learning_rate: lr,
            epochs: 1,
            batch_size: 1,
            seed: 0,
            l2_weight: 0.0,
            freeze_importance_net: true,
        };
        let (trained, _) = train_from(init, &knowledge, &[(x, true)], &tc).unwrap();

        // by hand: P_d = mean(x) = [0.5, -0.5], P_V = [0.5, 0.5]
        let f = [0.5, -0.5, 0.5, 0.5];
        let w0 = [0.5, -0.25, 0.125, 0.75];
        let z: f64 = f.iter().zip(&w0).map(|(a, b)| a * b).sum();
        let dz = 1.0 / (1.0 + (-z).exp()) - 1.0;
        for i in 0..4 {
            let expected = w0[i] - lr * dz * f[i];
            let got = trained.tensors.head.fusion_w[[0, i]];
            assert!((got - expected).abs() < 1e-6, "{i}: {got} vs {expected}");
        }
        let expected_b = -lr * dz;
        assert!((trained.tensors.head.fusion_b[[0, 0]] - expected_b).abs() < 1e-6);
    }

    #[test]
    fn full_loss_gradient_check() {
        let cfg = tiny_config(8, 1);
        let mut model = ModelParams::init(cfg).unwrap();
        model.tensors.head.gate[[0, 0]] = 0.4;
        let knowledge = tiny_knowledge(8, 4);
        let data = tiny_data(8, 5);
        let loss_of = |m: &ModelParams| -> f64 {
            data.iter()
                .map(|(x, l)| video_loss_and_grads(m, &knowledge, x, *l).unwrap().0)
                .sum()
        };
        let mut analytic: Option<Vec<Array2<f64>>> = None;
        for (x, l) in &data {
            let (_, g) = video_loss_and_grads(&model, &knowledge, x, *l).unwrap();
            match &mut analytic {
                None => analytic = Some(g),
                Some(a) => a.iter_mut().zip(g).for_each(|(a, g)| *a += &g),
            }
        }
        let analytic = analytic.unwrap();
        let names = model.tensors.names();
        let eps = 1e-5;
        for (idx, name) in names.iter().enumerate() {
            let shape = analytic[idx].dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let bump = |delta: f64| {
                        let mut m = model.clone();
                        let mut k = 0;
                        m.tensors.visit_mut(&mut |_, t| {
                            if k == idx {
                                t[[r, c]] += delta;
                            }
                            k += 1;
                        });
                        loss_of(&m)
                    };
                    let numeric = (bump(eps) - bump(-eps)) / (2.0 * eps);
                    let a = analytic[idx][[r, c]];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                    assert!(rel < 1e-4, "{name}[{r},{c}]: analytic {a} numeric {numeric}");
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let knowledge = tiny_knowledge(8, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let data: Vec<(TokenEmbeddingSeq, bool)> = (0..12)
            .map(|i| {
                let mut m = random_matrix(&mut rng, 4, 8) * 0.3;
                if i % 2 == 0 {
                    m.column_mut(0).mapv_inplace(|v| v + 1.0);
                }
                (TokenEmbeddingSeq::unmasked(m).unwrap(), i % 2 == 0)
            })
            .collect();
        let cfg = TrainConfig { learning_rate: 0.1, epochs: 15, batch_size: 4, ..Default::default() };
        let init = ModelParams::init(tiny_config(8, 1)).unwrap();
        let (a, hist) = train_from(init.clone(), &knowledge, &data, &cfg).unwrap();
        let (b, _) = train_from(init, &knowledge, &data, &cfg).unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert!(hist.last().unwrap() < &hist[0], "{hist:?}");
    }
}
