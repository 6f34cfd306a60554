//! LSTM cell and a batched single-direction layer with backpropagation
//! through time.
//!
//! Gate blocks are packed in the order forget, input, output, candidate:
//! rows `[0, H)` of `w`, `u` and `b` belong to the forget gate, `[H, 2H)` to
//! the input gate, `[2H, 3H)` to the output gate and `[3H, 4H)` to the cell
//! candidate.

use serde::{Deserialize, Serialize};

use super::matrix::{gemm, Matrix, View};
use super::NnError;

pub const GATES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Forget = 0,
    Input = 1,
    Output = 2,
    Candidate = 3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    /// `4H x input`
    pub w: Matrix,
    /// `4H x H`
    pub u: Matrix,
    /// `1 x 4H`
    pub b: Matrix,
}

impl LstmCellParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        LstmCellParams {
            w: Matrix::zeros(GATES * hidden, input),
            u: Matrix::zeros(GATES * hidden, hidden),
            b: Matrix::zeros(1, GATES * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.u.cols
    }

    pub fn input(&self) -> usize {
        self.w.cols
    }

    /// Rows of `w` belonging to `gate`, as an `H x input` matrix.
    pub fn w_gate(&self, gate: Gate) -> Matrix {
        block(&self.w, gate, self.hidden())
    }

    pub fn u_gate(&self, gate: Gate) -> Matrix {
        block(&self.u, gate, self.hidden())
    }

    pub fn b_gate(&self, gate: Gate) -> &[f64] {
        let h = self.hidden();
        &self.b.data[gate as usize * h..(gate as usize + 1) * h]
    }

    fn check(&self) -> Result<(), NnError> {
        let h = self.hidden();
        if self.w.rows != GATES * h || self.u.rows != GATES * h || self.b.shape() != (1, GATES * h) {
            return Err(NnError::Shape(format!(
                "inconsistent LSTM parameters: w {:?}, u {:?}, b {:?}",
                self.w.shape(),
                self.u.shape(),
                self.b.shape()
            )));
        }
        Ok(())
    }
}

fn block(m: &Matrix, gate: Gate, hidden: usize) -> Matrix {
    let start = gate as usize * hidden * m.cols;
    Matrix::from_vec(hidden, m.cols, m.data[start..start + hidden * m.cols].to_vec())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step for a single example.
///
/// Gates use the logistic function; the candidate and the output squashing
/// use `tanh`.
pub fn lstm_cell_step(
    params: &LstmCellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), NnError> {
    params.check()?;
    let h = params.hidden();
    if x.len() != params.input() || h_prev.len() != h || c_prev.len() != h {
        return Err(NnError::Shape(format!(
            "cell step expects x[{}], h[{h}], c[{h}]; got x[{}], h[{}], c[{}]",
            params.input(),
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let wx = params.w.mul_vec(x);
    let uh = params.u.mul_vec(h_prev);
    let pre: Vec<f64> = (0..GATES * h).map(|k| wx[k] + uh[k] + params.b.data[k]).collect();
    let mut h_t = vec![0.0; h];
    let mut c_t = vec![0.0; h];
    for j in 0..h {
        let f = sigmoid(pre[j]);
        let i = sigmoid(pre[h + j]);
        let o = sigmoid(pre[2 * h + j]);
        let g = pre[3 * h + j].tanh();
        c_t[j] = f * c_prev[j] + i * g;
        h_t[j] = o * c_t[j].tanh();
    }
    if h_t.iter().chain(&c_t).any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("lstm cell output".into()));
    }
    Ok((h_t, c_t))
}

/// Activations of one direction of one layer over a batch, indexed by
/// processing step `s` (which equals the time index for forward layers and
/// `T - 1 - t` for reversed ones).
#[derive(Debug, Clone)]
pub struct DirectionCache {
    reverse: bool,
    steps: usize,
    batch: usize,
    hidden: usize,
    /// post-activation gates, `steps x batch x 4H`
    gates: Vec<f64>,
    /// cell states, `steps x batch x H`
    cells: Vec<f64>,
    /// `tanh(c)`, `steps x batch x H`
    tanh_cells: Vec<f64>,
    /// hidden states, `steps x batch x H`
    hidden_states: Vec<f64>,
}

impl DirectionCache {
    fn time_of(&self, s: usize) -> usize {
        if self.reverse {
            self.steps - 1 - s
        } else {
            s
        }
    }

    /// Hidden state emitted at original time `t` (`batch x H`).
    pub fn output_at(&self, t: usize) -> &[f64] {
        let s = if self.reverse { self.steps - 1 - t } else { t };
        let n = self.batch * self.hidden;
        &self.hidden_states[s * n..(s + 1) * n]
    }
}

/// Run one direction over a time-major input (`steps x batch x input`).
pub fn forward_direction(
    params: &LstmCellParams,
    input: &[f64],
    steps: usize,
    batch: usize,
    reverse: bool,
) -> DirectionCache {
    let h = params.hidden();
    let in_dim = params.input();
    let g4 = GATES * h;
    debug_assert_eq!(input.len(), steps * batch * in_dim);

    // input projections for every (t, b) at once
    let mut pre_x = vec![0.0; steps * batch * g4];
    gemm(
        1.0,
        View::new(input, steps * batch, in_dim),
        View::of(&params.w).t(),
        0.0,
        &mut pre_x,
    );
    for row in pre_x.chunks_exact_mut(g4) {
        for (v, b) in row.iter_mut().zip(&params.b.data) {
            *v += b;
        }
    }

    let mut cache = DirectionCache {
        reverse,
        steps,
        batch,
        hidden: h,
        gates: vec![0.0; steps * batch * g4],
        cells: vec![0.0; steps * batch * h],
        tanh_cells: vec![0.0; steps * batch * h],
        hidden_states: vec![0.0; steps * batch * h],
    };
    let bh = batch * h;
    let bg = batch * g4;
    for s in 0..steps {
        let t = cache.time_of(s);
        let gates = &mut cache.gates[s * bg..(s + 1) * bg];
        gates.copy_from_slice(&pre_x[t * bg..(t + 1) * bg]);
        if s > 0 {
            let h_prev = &cache.hidden_states[(s - 1) * bh..s * bh];
            gemm(1.0, View::new(h_prev, batch, h), View::of(&params.u).t(), 1.0, gates);
        }
        for b in 0..batch {
            let row = &mut gates[b * g4..(b + 1) * g4];
            for j in 0..h {
                row[j] = sigmoid(row[j]);
                row[h + j] = sigmoid(row[h + j]);
                row[2 * h + j] = sigmoid(row[2 * h + j]);
                row[3 * h + j] = row[3 * h + j].tanh();
            }
            for j in 0..h {
                let c_prev = if s > 0 {
                    cache.cells[(s - 1) * bh + b * h + j]
                } else {
                    0.0
                };
                let c = row[j] * c_prev + row[h + j] * row[3 * h + j];
                let tc = c.tanh();
                let idx = s * bh + b * h + j;
                cache.cells[idx] = c;
                cache.tanh_cells[idx] = tc;
                cache.hidden_states[idx] = row[2 * h + j] * tc;
            }
        }
    }
    cache
}

/// Backpropagate one direction.
///
/// `d_output` is the loss gradient w.r.t. this direction's hidden output at
/// each original time step (`steps x batch x H`). Parameter gradients are
/// accumulated into `grads`; the gradient w.r.t. the layer input is
/// accumulated into `d_input` (`steps x batch x input`).
pub fn backward_direction(
    params: &LstmCellParams,
    cache: &DirectionCache,
    input: &[f64],
    d_output: &[f64],
    grads: &mut LstmCellParams,
    d_input: &mut [f64],
) {
    let (steps, batch, h) = (cache.steps, cache.batch, cache.hidden);
    let in_dim = params.input();
    let g4 = GATES * h;
    let bh = batch * h;
    let bg = batch * g4;

    let mut d_pre = vec![0.0; steps * bg];
    let mut dh_next = vec![0.0; bh];
    let mut dc_next = vec![0.0; bh];
    for s in (0..steps).rev() {
        let t = cache.time_of(s);
        let gates = &cache.gates[s * bg..(s + 1) * bg];
        let da = &mut d_pre[t * bg..(t + 1) * bg];
        for b in 0..batch {
            let row = &gates[b * g4..(b + 1) * g4];
            let drow = &mut da[b * g4..(b + 1) * g4];
            for j in 0..h {
                let k = b * h + j;
                let idx = s * bh + k;
                let (f, i, o, g) = (row[j], row[h + j], row[2 * h + j], row[3 * h + j]);
                let tc = cache.tanh_cells[idx];
                let c_prev = if s > 0 { cache.cells[idx - bh] } else { 0.0 };
                let dh = d_output[t * bh + k] + dh_next[k];
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                dc_next[k] = dc * f;
                drow[j] = dc * c_prev * f * (1.0 - f);
                drow[h + j] = dc * g * i * (1.0 - i);
                drow[2 * h + j] = d_o * o * (1.0 - o);
                drow[3 * h + j] = dc * i * (1.0 - g * g);
            }
        }
        if s > 0 {
            let h_prev = &cache.hidden_states[(s - 1) * bh..s * bh];
            gemm(
                1.0,
                View::new(da, batch, g4).t(),
                View::new(h_prev, batch, h),
                1.0,
                &mut grads.u.data,
            );
            gemm(1.0, View::new(da, batch, g4), View::of(&params.u), 0.0, &mut dh_next);
        }
    }

    for row in d_pre.chunks_exact(g4) {
        for (acc, v) in grads.b.data.iter_mut().zip(row) {
            *acc += v;
        }
    }
    let rows = steps * batch;
    gemm(
        1.0,
        View::new(&d_pre, rows, g4).t(),
        View::new(input, rows, in_dim),
        1.0,
        &mut grads.w.data,
    );
    gemm(1.0, View::new(&d_pre, rows, g4), View::of(&params.w), 1.0, d_input);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_params_zero_state() {
        let p = LstmCellParams::zeros(2, 3);
        let (h, c) = lstm_cell_step(&p, &[0.3, -0.7], &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn zero_params_carry_half_the_cell() {
        let p = LstmCellParams::zeros(2, 3);
        let c_prev = [1.0, -2.0, 0.5];
        let (h, c) = lstm_cell_step(&p, &[0.1, 0.2], &[0.4, 0.0, -0.3], &c_prev).unwrap();
        for j in 0..3 {
            assert!((c[j] - 0.5 * c_prev[j]).abs() < 1e-15);
            assert!((h[j] - 0.5 * (0.5 * c_prev[j]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = LstmCellParams::zeros(2, 3);
        assert!(matches!(
            lstm_cell_step(&p, &[0.0; 3], &[0.0; 3], &[0.0; 3]),
            Err(NnError::Shape(_))
        ));
    }

    #[test]
    fn batched_forward_matches_cell_steps() {
        let (input, hidden, steps, batch) = (3, 4, 5, 2);
        let mut p = LstmCellParams::zeros(input, hidden);
        for (k, v) in
            p.w.data
                .iter_mut()
                .chain(p.u.data.iter_mut())
                .chain(p.b.data.iter_mut())
                .enumerate()
        {
            *v = ((k * 37 % 19) as f64 - 9.0) / 10.0;
        }
        let x: Vec<f64> = (0..steps * batch * input)
            .map(|k| ((k * 13 % 7) as f64 - 3.0) / 4.0)
            .collect();
        for reverse in [false, true] {
            let cache = forward_direction(&p, &x, steps, batch, reverse);
            for b in 0..batch {
                let (mut h, mut c) = (vec![0.0; hidden], vec![0.0; hidden]);
                let order: Vec<usize> = if reverse {
                    (0..steps).rev().collect()
                } else {
                    (0..steps).collect()
                };
                for t in order {
                    let xt = &x[(t * batch + b) * input..(t * batch + b + 1) * input];
                    (h, c) = lstm_cell_step(&p, xt, &h, &c).unwrap();
                    let got = &cache.output_at(t)[b * hidden..(b + 1) * hidden];
                    for j in 0..hidden {
                        assert!((got[j] - h[j]).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
