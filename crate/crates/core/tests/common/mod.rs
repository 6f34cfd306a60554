//! Shared numeric oracles for the gradient and acceptance tests.
#![allow(dead_code)]

use gossipwatch::nn::loss::{batch_cross_entropy, cross_entropy_grad, loss_mse, mse_grad};
use gossipwatch::nn::{lstm_cell_step, Batch, HeadKind, LstmCellParams, Matrix, ModelInput, ModelSpec, SequenceModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

pub fn spec(head: HeadKind) -> ModelSpec {
    match head {
        HeadKind::Regression => ModelSpec {
            input: ModelInput::Features { count: 3 },
            hidden_size: 4,
            num_layers: 2,
            num_directions: 2,
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
            num_directions: 2,
            output_dim: 6,
            head,
        },
    }
}

/// Max relative error between analytic and central-difference gradients.
pub fn gradient_error(head: HeadKind, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SequenceModel::init(spec(head), seed).unwrap();
    // spread parameters out so no gate saturates trivially
    for m in model.params_mut() {
        for v in &mut m.data {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
    let (batch, steps) = (2, 5);
    let dense: Vec<f64> = (0..batch * steps * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
    let ids: Vec<usize> = (0..batch * steps).map(|_| rng.gen_range(0..6)).collect();
    let dense_target = Matrix::from_fn(batch, 3, |_, _| rng.gen_range(0.0..1.0));
    let token_target: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..6)).collect();

    let input = |_: &SequenceModel| match head {
        HeadKind::Regression => Batch::Dense {
            data: &dense,
            batch,
            steps,
            features: 3,
        },
        HeadKind::Classification => Batch::Tokens {
            ids: &ids,
            batch,
            steps,
        },
    };
    let loss_of = |m: &SequenceModel| {
        let out = m.predict(&input(m)).unwrap();
        match head {
            HeadKind::Regression => loss_mse(&out.data, &dense_target.data),
            HeadKind::Classification => batch_cross_entropy(&out, &token_target),
        }
    };

    let (out, cache) = model.forward(&input(&model)).unwrap();
    let d_head = match head {
        HeadKind::Regression => mse_grad(&out, &dense_target),
        HeadKind::Classification => cross_entropy_grad(&out, &token_target),
    };
    let grads = model.backward(&cache, &d_head).unwrap();

    let mut worst: f64 = 0.0;
    let n_tensors = grads.tensors.len();
    for t in 0..n_tensors {
        let len = grads.tensors[t].data.len();
        for k in 0..len {
            let original = model.params_mut()[t].data[k];
            model.params_mut()[t].data[k] = original + EPS;
            let plus = loss_of(&model);
            model.params_mut()[t].data[k] = original - EPS;
            let minus = loss_of(&model);
            model.params_mut()[t].data[k] = original;
            let numeric = (plus - minus) / (2.0 * EPS);
            let analytic = grads.tensors[t].data[k];
            let denom = analytic.abs().max(numeric.abs());
            if denom > 1e-7 {
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
    }
    worst
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Straight-line transcription of the gate equations with per-gate
/// matrices, written without the packed layout used by the engine.
fn reference_cell(
    w: &[Vec<Vec<f64>>; 4],
    u: &[Vec<Vec<f64>>; 4],
    b: &[Vec<f64>; 4],
    x: &[f64],
    h: &[f64],
    c: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let affine = |g: usize, j: usize| {
        let mut s = b[g][j];
        for (k, xv) in x.iter().enumerate() {
            s += w[g][j][k] * xv;
        }
        for (k, hv) in h.iter().enumerate() {
            s += u[g][j][k] * hv;
        }
        s
    };
    let hidden = h.len();
    let mut h_new = vec![0.0; hidden];
    let mut c_new = vec![0.0; hidden];
    for j in 0..hidden {
        let f = logistic(affine(0, j));
        let i = logistic(affine(1, j));
        let o = logistic(affine(2, j));
        let cand = affine(3, j).tanh();
        c_new[j] = f * c[j] + i * cand;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

/// Max absolute deviation of the engine's cell step from the reference over
/// `cases` random inputs.
pub fn cell_oracle_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let (input, hidden) = (2, 3);
    for _ in 0..cases {
        let mut gen = |rows: usize, cols: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(-1.5..1.5)).collect())
                .collect()
        };
        let w = [
            gen(hidden, input),
            gen(hidden, input),
            gen(hidden, input),
            gen(hidden, input),
        ];
        let u = [
            gen(hidden, hidden),
            gen(hidden, hidden),
            gen(hidden, hidden),
            gen(hidden, hidden),
        ];
        let bias = gen(4, hidden);
        let b = [bias[0].clone(), bias[1].clone(), bias[2].clone(), bias[3].clone()];
        let io = gen(3, hidden.max(input));
        let x = &io[0][..input];
        let h = &io[1][..hidden];
        let c = &io[2][..hidden];

        let mut params = LstmCellParams::zeros(input, hidden);
        for g in 0..4 {
            for j in 0..hidden {
                for k in 0..input {
                    params.w.set(g * hidden + j, k, w[g][j][k]);
                }
                for k in 0..hidden {
                    params.u.set(g * hidden + j, k, u[g][j][k]);
                }
                params.b.set(0, g * hidden + j, b[g][j]);
            }
        }
        let (h_got, c_got) = lstm_cell_step(&params, x, h, c).unwrap();
        let (h_ref, c_ref) = reference_cell(&w, &u, &b, x, h, c);
        for j in 0..hidden {
            worst = worst.max((h_got[j] - h_ref[j]).abs()).max((c_got[j] - c_ref[j]).abs());
        }
    }
    worst
}
