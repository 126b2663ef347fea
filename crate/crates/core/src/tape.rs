//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse and returns gradients for every recorded node. Vectors
//! are represented as `1×n` row matrices and scalars as `1×1`.

use ndarray::{s, Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Gelu(Var),
    Tanh(Var),
    /// Keeps the per-row inverse standard deviation.
    LayerNorm(Var, Vec<f64>),
    SoftmaxRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var, Vec<bool>),
    Transpose(Var),
    BceWithLogits(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `-[t ln σ(z) + (1-t) ln(1-σ(z))]`, evaluated without overflow.
pub fn bce_with_logits(z: f64, target: f64) -> f64 {
    z.max(0.0) - z * target + (-z.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` element-wise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    /// Scales `a` by a `1×1` variable.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Row-wise standardization (population variance), without gain or bias.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let k = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * k);
            inv.push(k);
        }
        self.push(out, Op::LayerNorm(a, inv))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() });
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean over rows whose mask entry is true, as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var, mask: &[bool]) -> Var {
        let x = self.value(a);
        let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
        let mut acc = Array2::zeros((1, x.ncols()));
        for (row, &m) in x.rows().into_iter().zip(mask) {
            if m {
                acc.row_mut(0).scaled_add(1.0, &row);
            }
        }
        acc /= count;
        self.push(acc, Op::MeanRows(a, mask.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Binary cross-entropy of a `1×1` logit against a 0/1 target.
    pub fn bce_with_logits(&mut self, z: Var, target: f64) -> Var {
        let v = Array2::from_elem((1, 1), bce_with_logits(self.scalar(z), target));
        self.push(v, Op::BceWithLogits(z, target))
    }

    /// Reverse pass from `output`, seeded with `seed` (for scalar outputs)
    /// broadcast over its shape.
    pub fn backward(&self, output: Var, seed: f64) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::from_elem(self.value(output).raw_dim(), seed));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, delta: Array2<f64>| match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&self.value(*b).t()));
                    acc(*b, self.value(*a).t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    acc(*a, g.dot(self.value(*b)));
                    acc(*b, g.t().dot(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(*a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let ga = &g * self.value(*r);
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*a, ga);
                    acc(*r, gr);
                }
                Op::MulConst(a, c) => acc(*a, &g * c),
                Op::Scale(a, s) => acc(*a, &g * *s),
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let gs = (&g * self.value(*a)).sum();
                    acc(*a, &g * k);
                    acc(*s, Array2::from_elem((1, 1), gs));
                }
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    acc(*a, &g * &d);
                }
                Op::Tanh(a) => {
                    let d = node.value.mapv(|y| 1.0 - y * y);
                    acc(*a, &g * &d);
                }
                Op::LayerNorm(a, inv) => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.raw_dim());
                    let n = y.ncols() as f64;
                    for (i, k) in inv.iter().enumerate() {
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mean_g = gr.sum() / n;
                        let mean_gy = gr.dot(&yr) / n;
                        for j in 0..y.ncols() {
                            dx[[i, j]] = k * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    acc(*a, dx);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut dx = Array2::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        let dot = g.row(i).dot(&y.row(i));
                        for j in 0..y.ncols() {
                            dx[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    acc(*a, dx);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(*p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::MeanRows(a, mask) => {
                    let count = mask.iter().filter(|&&m| m).count().max(1) as f64;
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    for (mut row, &m) in ga.rows_mut().into_iter().zip(mask) {
                        if m {
                            row.assign(&(&g.row(0) / count));
                        }
                    }
                    acc(*a, ga);
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::BceWithLogits(z, t) => {
                    let dz = g[[0, 0]] * (sigmoid(self.scalar(*z)) - t);
                    acc(*z, Array2::from_elem((1, 1), dz));
                }
            }
            grads[idx] = Some(g);
        }
        Grads { grads }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of `v`; `None` if `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
