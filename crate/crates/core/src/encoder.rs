//! Pre-norm transformer encoder over per-frame caption embeddings, with
//! mean pooling and an affine projection into the shared latent space.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::TokenEmbeddingSeq;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Declares a struct of named tensors, generic over the tensor
/// representation, with name-aware `map`, `visit` and `visit_mut`.
macro_rules! tensor_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)+
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> $name<U> {
                $name { $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)+ }
            }

            pub fn try_map<U, E>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<$name<U>, E> {
                Ok($name { $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field)?,)+ })
            }

            pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &self.$field);)+
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
                $(f(&format!("{prefix}{}", stringify!($field)), &mut self.$field);)+
            }
        }
    };
}
pub(crate) use tensor_group;

tensor_group!(
    /// One encoder layer. Linear weights are stored `out×in`; biases and
    /// layer-norm parameters are `1×n` rows.
    LayerTensors {
        ln1_gain, ln1_bias,
        w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o,
        ln2_gain, ln2_bias,
        ff_w1, ff_b1, ff_w2, ff_b2,
    }
);

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTensors<T> {
    pub layers: Vec<LayerTensors<T>>,
    /// `d_latent×d_model`
    pub w_d: T,
    /// `1×d_latent`
    pub b_d: T,
}

impl<T> EncoderTensors<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> EncoderTensors<U> {
        EncoderTensors {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("{prefix}layer{i}."), f))
                .collect(),
            w_d: f(&format!("{prefix}w_d"), &self.w_d),
            b_d: f(&format!("{prefix}b_d"), &self.b_d),
        }
    }

    pub fn try_map<U, E>(
        &self,
        prefix: &str,
        f: &mut impl FnMut(&str, &T) -> Result<U, E>,
    ) -> Result<EncoderTensors<U>, E> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            layers.push(l.try_map(&format!("{prefix}layer{i}."), f)?);
        }
        Ok(EncoderTensors {
            layers,
            w_d: f(&format!("{prefix}w_d"), &self.w_d)?,
            b_d: f(&format!("{prefix}b_d"), &self.b_d)?,
        })
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layer{i}."), f);
        }
        f(&format!("{prefix}w_d"), &self.w_d);
        f(&format!("{prefix}b_d"), &self.b_d);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}layer{i}."), f);
        }
        f(&format!("{prefix}w_d"), &mut self.w_d);
        f(&format!("{prefix}b_d"), &mut self.b_d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_latent: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 256,
            d_latent: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.d_model == 0 || self.d_ff == 0 || self.d_latent == 0 {
            return Err(Error::Invalid("encoder sizes must be positive".into()));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(Error::Invalid(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }
}

/// `rows×cols` matrix drawn from U(−1/√fan_in, 1/√fan_in).
pub(crate) fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tensors: EncoderTensors<Array2<f64>>,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let ff = config.d_ff;
        let layers = (0..config.num_layers)
            .map(|_| LayerTensors {
                ln1_gain: Array2::ones((1, d)),
                ln1_bias: Array2::zeros((1, d)),
                w_q: uniform_init(rng, d, d, d),
                b_q: uniform_init(rng, 1, d, d),
                w_k: uniform_init(rng, d, d, d),
                b_k: uniform_init(rng, 1, d, d),
                w_v: uniform_init(rng, d, d, d),
                b_v: uniform_init(rng, 1, d, d),
                w_o: uniform_init(rng, d, d, d),
                b_o: uniform_init(rng, 1, d, d),
                ln2_gain: Array2::ones((1, d)),
                ln2_bias: Array2::zeros((1, d)),
                ff_w1: uniform_init(rng, ff, d, d),
                ff_b1: uniform_init(rng, 1, ff, d),
                ff_w2: uniform_init(rng, d, ff, ff),
                ff_b2: uniform_init(rng, 1, d, ff),
            })
            .collect();
        Ok(EncoderParams {
            config,
            tensors: EncoderTensors {
                layers,
                w_d: uniform_init(rng, config.d_latent, d, d),
                b_d: uniform_init(rng, 1, config.d_latent, d),
            },
        })
    }
}

/// Fixed sinusoidal position table, `t×d`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn row_mask_matrix(mask: &[bool], cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((mask.len(), cols), |(i, _)| if mask[i] { 1.0 } else { 0.0 })
}

/// Encoder stack recorded on `tape`. Returns `H_d` (`T×d_model`) with
/// masked rows zeroed.
pub(crate) fn encoder_forward(
    tape: &mut Tape,
    config: &EncoderConfig,
    tensors: &EncoderTensors<Var>,
    x: &Array2<f64>,
    mask: &[bool],
) -> Result<Var> {
    let (t, d) = x.dim();
    if d != config.d_model {
        return Err(Error::dims("encoder input width", config.d_model, d));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Empty("encoder input has no unmasked rows".into()));
    }
    if tensors.layers.is_empty() {
        return Ok(tape.leaf(x.clone()));
    }

    let keep = row_mask_matrix(mask, d);
    let all_real = mask.iter().all(|&m| m);
    // inputs are scaled by √d_model so positions do not swamp them
    let scaled = x * (d as f64).sqrt() + &(sinusoidal_positions(t, d) * &keep);
    let mut z = tape.leaf(scaled);
    let key_bias = if all_real {
        None
    } else {
        Some(Array2::from_shape_fn((t, t), |(_, j)| if mask[j] { 0.0 } else { f64::NEG_INFINITY }))
    };
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    for (li, layer) in tensors.layers.iter().enumerate() {
        let n1 = tape.layer_norm(z, LAYER_NORM_EPS);
        let n1 = tape.mul_row(n1, layer.ln1_gain);
        let n1 = tape.add_row(n1, layer.ln1_bias);
        let q = tape.matmul_t(n1, layer.w_q);
        let q = tape.add_row(q, layer.b_q);
        let k = tape.matmul_t(n1, layer.w_k);
        let k = tape.add_row(k, layer.b_k);
        let v = tape.matmul_t(n1, layer.w_v);
        let v = tape.add_row(v, layer.b_v);

        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_t(qh, kh);
            let mut scores = tape.scale(scores, scale);
            if let Some(bias) = &key_bias {
                let b = tape.leaf(bias.clone());
                scores = tape.add(scores, b);
            }
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = tape.concat_cols(&heads);
        let o = tape.matmul_t(cat, layer.w_o);
        let o = tape.add_row(o, layer.b_o);
        z = tape.add(z, o);

        let n2 = tape.layer_norm(z, LAYER_NORM_EPS);
        let n2 = tape.mul_row(n2, layer.ln2_gain);
        let n2 = tape.add_row(n2, layer.ln2_bias);
        let f = tape.matmul_t(n2, layer.ff_w1);
        let f = tape.add_row(f, layer.ff_b1);
        let f = tape.gelu(f);
        let f = tape.matmul_t(f, layer.ff_w2);
        let f = tape.add_row(f, layer.ff_b2);
        z = tape.add(z, f);
        if !all_real {
            z = tape.mul_const(z, keep.clone());
        }

        if tape.value(z).iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("encoder layer {li} output")));
        }
    }
    Ok(z)
}

/// Registers every tensor as a tape leaf.
pub(crate) fn encoder_leaves(tape: &mut Tape, tensors: &EncoderTensors<Array2<f64>>) -> EncoderTensors<Var> {
    tensors.map("", &mut |_, m| tape.leaf(m.clone()))
}

/// Runs the encoder stack: `H_d` has the same shape and mask as `x_d`.
pub fn encode_descriptions(x_d: &TokenEmbeddingSeq, params: &EncoderParams) -> Result<TokenEmbeddingSeq> {
    if x_d.dim() != params.config.d_model {
        return Err(Error::dims("description embedding", params.config.d_model, x_d.dim()));
    }
    let mut tape = Tape::new();
    let vars = encoder_leaves(&mut tape, &params.tensors);
    let h = encoder_forward(&mut tape, &params.config, &vars, x_d.vectors(), x_d.mask())?;
    TokenEmbeddingSeq::new(tape.value(h).clone(), x_d.mask().to_vec())
}

/// Mean over unmasked rows followed by `W_d·h̄ + b_d`.
pub fn project_description(h_d: &TokenEmbeddingSeq, params: &EncoderParams) -> Result<Array1<f64>> {
    let pooled = crate::embedder::mean_pool(h_d)?;
    project_pooled(&pooled, &params.tensors.w_d, &params.tensors.b_d)
}

pub(crate) fn project_pooled(pooled: &Array1<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Result<Array1<f64>> {
    if w.ncols() != pooled.len() {
        return Err(Error::dims("description projection input", w.ncols(), pooled.len()));
    }
    Ok(w.dot(pooled) + &b.row(0))
}
