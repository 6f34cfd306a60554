//! Sequence forecaster: optional token embedding, a stack of (optionally
//! bidirectional) LSTM layers and a linear head read from the last time step.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{backward_direction, forward_direction, DirectionCache, LstmCellParams};
use super::matrix::{gemm, Matrix, View};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Linear output, trained with mean squared error.
    Regression,
    /// Linear output followed by softmax, trained with cross-entropy.
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ModelInput {
    Features { count: usize },
    Tokens { vocab_size: usize, embedding_dim: usize },
}

/// Architecture of a [`SequenceModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input: ModelInput,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_directions: usize,
    pub output_dim: usize,
    pub head: HeadKind,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Config(m.to_string()));
        if self.hidden_size == 0 || self.num_layers == 0 || self.output_dim == 0 {
            return bad("hidden_size, num_layers and output_dim must be positive");
        }
        if !(1..=2).contains(&self.num_directions) {
            return bad("num_directions must be 1 or 2");
        }
        match self.input {
            ModelInput::Features { count: 0 } => return bad("feature count must be positive"),
            ModelInput::Tokens {
                vocab_size,
                embedding_dim,
            } => {
                if vocab_size == 0 || embedding_dim == 0 {
                    return bad("vocab_size and embedding_dim must be positive");
                }
                if self.head == HeadKind::Classification && self.output_dim != vocab_size {
                    return bad("classification head width must equal the vocabulary size");
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.input {
            ModelInput::Features { count } => count,
            ModelInput::Tokens { embedding_dim, .. } => embedding_dim,
        }
    }

    /// Width of each layer's output (and of the head's input).
    pub fn layer_width(&self) -> usize {
        self.hidden_size * self.num_directions
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim()
        } else {
            self.layer_width()
        }
    }
}

/// A batch of windows laid out batch-major as `(batch_size, time_steps,
/// input_features)`, or `(batch_size, time_steps)` token ids.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Dense {
        data: &'a [f64],
        batch: usize,
        steps: usize,
        features: usize,
    },
    Tokens {
        ids: &'a [usize],
        batch: usize,
        steps: usize,
    },
}

impl Batch<'_> {
    pub fn size(&self) -> usize {
        match self {
            Batch::Dense { batch, .. } | Batch::Tokens { batch, .. } => *batch,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Batch::Dense { steps, .. } | Batch::Tokens { steps, .. } => *steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub spec: ModelSpec,
    pub embedding: Option<Matrix>,
    /// `num_layers * num_directions` cells, layer-major.
    pub cells: Vec<LstmCellParams>,
    /// `output_dim x layer_width`
    pub head_w: Matrix,
    /// `1 x output_dim`
    pub head_b: Matrix,
}

/// Activations kept from [`SequenceModel::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    steps: usize,
    token_ids: Option<Vec<usize>>,
    /// time-major input of every layer
    layer_inputs: Vec<Vec<f64>>,
    directions: Vec<DirectionCache>,
    /// last-step representation, `batch x layer_width`
    last: Vec<f64>,
}

/// Parameter gradients in the same canonical order as
/// [`SequenceModel::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|m| m.data.iter())
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

impl SequenceModel {
    /// All-zero model with the given architecture.
    pub fn zeros(spec: ModelSpec) -> Result<Self, NnError> {
        spec.validate()?;
        let embedding = match spec.input {
            ModelInput::Tokens {
                vocab_size,
                embedding_dim,
            } => Some(Matrix::zeros(vocab_size, embedding_dim)),
            ModelInput::Features { .. } => None,
        };
        let mut cells = Vec::with_capacity(spec.num_layers * spec.num_directions);
        for layer in 0..spec.num_layers {
            for _ in 0..spec.num_directions {
                cells.push(LstmCellParams::zeros(spec.layer_input_dim(layer), spec.hidden_size));
            }
        }
        Ok(SequenceModel {
            spec,
            embedding,
            cells,
            head_w: Matrix::zeros(spec.output_dim, spec.layer_width()),
            head_b: Matrix::zeros(1, spec.output_dim),
        })
    }

    /// Uniform(-1/sqrt(H), 1/sqrt(H)) initialization with forget-gate biases
    /// set to 1.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self, NnError> {
        let mut model = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.init_with(&mut rng);
        Ok(model)
    }

    pub fn init_with(&mut self, rng: &mut impl Rng) {
        let bound = 1.0 / (self.spec.hidden_size as f64).sqrt();
        for m in self.params_mut() {
            for v in &mut m.data {
                *v = rng.gen_range(-bound..bound);
            }
        }
        let h = self.spec.hidden_size;
        for cell in &mut self.cells {
            cell.b.data[..h].iter_mut().for_each(|v| *v = 1.0);
        }
    }

    pub fn cell(&self, layer: usize, direction: usize) -> &LstmCellParams {
        &self.cells[layer * self.spec.num_directions + direction]
    }

    /// Named parameters in canonical order.
    pub fn params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        if let Some(e) = &self.embedding {
            out.push(("embedding".to_string(), e));
        }
        for (k, cell) in self.cells.iter().enumerate() {
            let (l, d) = (k / self.spec.num_directions, k % self.spec.num_directions);
            out.push((format!("lstm.{l}.{d}.w"), &cell.w));
            out.push((format!("lstm.{l}.{d}.u"), &cell.u));
            out.push((format!("lstm.{l}.{d}.b"), &cell.b));
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        if let Some(e) = &mut self.embedding {
            out.push(e);
        }
        for cell in &mut self.cells {
            out.push(&mut cell.w);
            out.push(&mut cell.u);
            out.push(&mut cell.b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn zero_gradients(&self) -> Gradients {
        Gradients {
            tensors: self
                .params()
                .into_iter()
                .map(|(_, m)| Matrix::zeros(m.rows, m.cols))
                .collect(),
        }
    }

    fn time_major_input(&self, batch: &Batch<'_>) -> Result<(Vec<f64>, Option<Vec<usize>>), NnError> {
        let steps = batch.steps();
        let n = batch.size();
        match (*batch, self.spec.input) {
            (
                Batch::Dense {
                    data,
                    batch,
                    steps,
                    features,
                },
                ModelInput::Features { count },
            ) => {
                if features != count || data.len() != batch * steps * features {
                    return Err(NnError::Shape(format!(
                        "dense batch ({batch}, {steps}, {features}) with {} values does not fit a {count}-feature model",
                        data.len()
                    )));
                }
                let mut x = vec![0.0; data.len()];
                for b in 0..batch {
                    for t in 0..steps {
                        let src = (b * steps + t) * features;
                        let dst = (t * batch + b) * features;
                        x[dst..dst + features].copy_from_slice(&data[src..src + features]);
                    }
                }
                Ok((x, None))
            }
            (
                Batch::Tokens { ids, .. },
                ModelInput::Tokens {
                    vocab_size,
                    embedding_dim,
                },
            ) => {
                if ids.len() != n * steps {
                    return Err(NnError::Shape("token batch length mismatch".into()));
                }
                let table = self.embedding.as_ref().expect("token model has an embedding");
                let mut x = vec![0.0; n * steps * embedding_dim];
                let mut tm_ids = vec![0; n * steps];
                for b in 0..n {
                    for t in 0..steps {
                        let id = ids[b * steps + t];
                        if id >= vocab_size {
                            return Err(NnError::Shape(format!(
                                "token id {id} outside vocabulary of {vocab_size}"
                            )));
                        }
                        let dst = (t * n + b) * embedding_dim;
                        x[dst..dst + embedding_dim].copy_from_slice(table.row(id));
                        tm_ids[t * n + b] = id;
                    }
                }
                Ok((x, Some(tm_ids)))
            }
            _ => Err(NnError::Shape("batch kind does not match model input".into())),
        }
    }

    /// Forward pass. Returns `batch x output_dim` predictions (probabilities
    /// for a classification head) and the activation cache.
    pub fn forward(&self, batch: &Batch<'_>) -> Result<(Matrix, ForwardCache), NnError> {
        let steps = batch.steps();
        let n = batch.size();
        if steps == 0 || n == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        let (x0, token_ids) = self.time_major_input(batch)?;
        let h = self.spec.hidden_size;
        let dirs = self.spec.num_directions;
        let width = self.spec.layer_width();

        let mut layer_inputs = vec![x0];
        let mut directions = Vec::with_capacity(self.cells.len());
        for layer in 0..self.spec.num_layers {
            let input = layer_inputs.last().expect("layer input");
            let mut out = vec![0.0; steps * n * width];
            for d in 0..dirs {
                let cache = forward_direction(self.cell(layer, d), input, steps, n, d == 1);
                for t in 0..steps {
                    let hs = cache.output_at(t);
                    for b in 0..n {
                        let dst = (t * n + b) * width + d * h;
                        out[dst..dst + h].copy_from_slice(&hs[b * h..(b + 1) * h]);
                    }
                }
                directions.push(cache);
            }
            layer_inputs.push(out);
        }
        let top = layer_inputs.pop().expect("top layer output");
        let last = top[(steps - 1) * n * width..].to_vec();

        let mut out = Matrix::zeros(n, self.spec.output_dim);
        gemm(
            1.0,
            View::new(&last, n, width),
            View::of(&self.head_w).t(),
            0.0,
            &mut out.data,
        );
        for r in 0..n {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.head_b.data) {
                *v += b;
            }
        }
        if self.spec.head == HeadKind::Classification {
            for r in 0..n {
                softmax_in_place(out.row_mut(r));
            }
        }
        if !out.is_finite() {
            return Err(NnError::NonFinite("model output".into()));
        }
        Ok((
            out,
            ForwardCache {
                batch: n,
                steps,
                token_ids,
                layer_inputs,
                directions,
                last,
            },
        ))
    }

    /// Predictions only.
    pub fn predict(&self, batch: &Batch<'_>) -> Result<Matrix, NnError> {
        self.forward(batch).map(|(out, _)| out)
    }

    /// Backpropagation through time.
    ///
    /// `d_head` is the loss gradient with respect to the head's pre-activation
    /// output (`batch x output_dim`); for the softmax head this is the combined
    /// softmax/cross-entropy gradient returned by
    /// [`super::loss::cross_entropy_grad`].
    pub fn backward(&self, cache: &ForwardCache, d_head: &Matrix) -> Result<Gradients, NnError> {
        let (n, steps) = (cache.batch, cache.steps);
        if d_head.shape() != (n, self.spec.output_dim) {
            return Err(NnError::Shape(format!(
                "head gradient {:?} does not match ({n}, {})",
                d_head.shape(),
                self.spec.output_dim
            )));
        }
        let h = self.spec.hidden_size;
        let dirs = self.spec.num_directions;
        let width = self.spec.layer_width();
        let mut grads = self.zero_gradients();
        let head_idx = grads.tensors.len() - 2;

        gemm(
            1.0,
            View::of(d_head).t(),
            View::new(&cache.last, n, width),
            0.0,
            &mut grads.tensors[head_idx].data,
        );
        for r in 0..n {
            for (acc, v) in grads.tensors[head_idx + 1].data.iter_mut().zip(d_head.row(r)) {
                *acc += v;
            }
        }

        let mut d_layer_out = vec![0.0; steps * n * width];
        gemm(
            1.0,
            View::of(d_head),
            View::of(&self.head_w),
            0.0,
            &mut d_layer_out[(steps - 1) * n * width..],
        );

        let cell_offset = usize::from(self.embedding.is_some());
        for layer in (0..self.spec.num_layers).rev() {
            let input = &cache.layer_inputs[layer];
            let in_dim = self.spec.layer_input_dim(layer);
            let mut d_input = vec![0.0; steps * n * in_dim];
            for d in 0..dirs {
                let mut d_out = vec![0.0; steps * n * h];
                for row in 0..steps * n {
                    d_out[row * h..(row + 1) * h]
                        .copy_from_slice(&d_layer_out[row * width + d * h..row * width + (d + 1) * h]);
                }
                let k = layer * dirs + d;
                let mut cell_grads = LstmCellParams {
                    w: std::mem::replace(&mut grads.tensors[cell_offset + 3 * k], Matrix::zeros(0, 0)),
                    u: std::mem::replace(&mut grads.tensors[cell_offset + 3 * k + 1], Matrix::zeros(0, 0)),
                    b: std::mem::replace(&mut grads.tensors[cell_offset + 3 * k + 2], Matrix::zeros(0, 0)),
                };
                backward_direction(
                    &self.cells[k],
                    &cache.directions[k],
                    input,
                    &d_out,
                    &mut cell_grads,
                    &mut d_input,
                );
                grads.tensors[cell_offset + 3 * k] = cell_grads.w;
                grads.tensors[cell_offset + 3 * k + 1] = cell_grads.u;
                grads.tensors[cell_offset + 3 * k + 2] = cell_grads.b;
            }
            d_layer_out = d_input;
        }

        if let (Some(ids), Some(_)) = (&cache.token_ids, &self.embedding) {
            let dim = self.spec.input_dim();
            let emb = &mut grads.tensors[0];
            for (row, &id) in ids.iter().enumerate() {
                for (acc, v) in emb.row_mut(id).iter_mut().zip(&d_layer_out[row * dim..(row + 1) * dim]) {
                    *acc += v;
                }
            }
        }
        Ok(grads)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dirs: usize, head: HeadKind) -> ModelSpec {
        match head {
            HeadKind::Regression => ModelSpec {
                input: ModelInput::Features { count: 3 },
                hidden_size: 4,
                num_layers: 2,
                num_directions: dirs,
                output_dim: 3,
                head,
            },
            HeadKind::Classification => ModelSpec {
                input: ModelInput::Tokens {
                    vocab_size: 6,
                    embedding_dim: 3,
                },
                hidden_size: 4,
                num_layers: 2,
                num_directions: dirs,
                output_dim: 6,
                head,
            },
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let model = SequenceModel::init(spec(2, HeadKind::Classification), 1).unwrap();
        let ids: Vec<usize> = (0..40).map(|k| k % 6).collect();
        let out = model
            .predict(&Batch::Tokens {
                ids: &ids,
                batch: 4,
                steps: 10,
            })
            .unwrap();
        for r in 0..4 {
            let s: f64 = out.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bidirectional_doubles_head_width() {
        let one = SequenceModel::zeros(spec(1, HeadKind::Regression)).unwrap();
        let two = SequenceModel::zeros(spec(2, HeadKind::Regression)).unwrap();
        assert_eq!(two.head_w.cols, 2 * one.head_w.cols);
        assert_eq!(two.cell(1, 0).input(), 8);
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let model = SequenceModel::init(spec(2, HeadKind::Regression), 9).unwrap();
        for cell in &model.cells {
            assert!(cell.b.data[..4].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn sequence_order_matters() {
        let mut s = spec(1, HeadKind::Regression);
        s.num_layers = 1;
        let model = SequenceModel::init(s, 3).unwrap();
        let x: Vec<f64> = (0..15).map(|k| k as f64 / 15.0).collect();
        let mut rev = Vec::new();
        for t in (0..5).rev() {
            rev.extend_from_slice(&x[t * 3..(t + 1) * 3]);
        }
        let a = model
            .predict(&Batch::Dense {
                data: &x,
                batch: 1,
                steps: 5,
                features: 3,
            })
            .unwrap();
        let b = model
            .predict(&Batch::Dense {
                data: &rev,
                batch: 1,
                steps: 5,
                features: 3,
            })
            .unwrap();
        assert!(a.data.iter().zip(&b.data).any(|(p, q)| (p - q).abs() > 1e-6));
    }

    #[test]
    fn zero_head_gradient_gives_zero_gradients() {
        let model = SequenceModel::init(spec(2, HeadKind::Regression), 5).unwrap();
        let x: Vec<f64> = (0..30).map(|k| (k % 7) as f64 / 7.0).collect();
        let (_, cache) = model
            .forward(&Batch::Dense {
                data: &x,
                batch: 2,
                steps: 5,
                features: 3,
            })
            .unwrap();
        let g = model.backward(&cache, &Matrix::zeros(2, 3)).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn rejects_mismatched_batches() {
        let model = SequenceModel::init(spec(1, HeadKind::Regression), 5).unwrap();
        let x = vec![0.0; 8];
        assert!(model
            .predict(&Batch::Dense {
                data: &x,
                batch: 1,
                steps: 2,
                features: 4
            })
            .is_err());
        assert!(model
            .predict(&Batch::Tokens {
                ids: &[0, 1],
                batch: 1,
                steps: 2
            })
            .is_err());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = spec(2, HeadKind::Classification);
        s.output_dim = 5;
        assert!(SequenceModel::zeros(s).is_err());
        let mut s = spec(2, HeadKind::Regression);
        s.num_directions = 3;
        assert!(SequenceModel::zeros(s).is_err());
    }
}
