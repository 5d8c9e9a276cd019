//! LSTM layer with stacked gate weights and full-sequence backpropagation.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};

use super::sigmoid;

/// Gates per cell in the stacked weight layout: input, retain, output,
/// update, in that row order.
pub const GATES_PER_CELL: usize = 4;

/// Recurrent state carried between frames.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: Array1::zeros(hidden),
            c: Array1::zeros(hidden),
        }
    }
}

/// LSTM cell over sequences.
///
/// Gate pre-activations are stacked as `[input; retain; output; update]`
/// rows of `w_x` (`4h x in`), `w_h` (`4h x h`) and `b` (`4h`). The cell
/// applies the retain gate to the previous cell state:
///
/// ```text
/// c_t = retain .* c_{t-1} + input .* tanh_update
/// h_t = output .* tanh(c_t)
/// ```
#[derive(Debug, Clone)]
pub struct Lstm {
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
}

/// Per-sequence forward cache: gate activations and state trajectories.
#[derive(Debug, Clone)]
pub struct LstmCache {
    /// `in x T` inputs.
    pub x: Array2<f64>,
    /// `4h x T` gate activations (post-nonlinearity).
    pub gates: Array2<f64>,
    /// `h x T` cell states after each step.
    pub c: Array2<f64>,
    /// `h x T` tanh of the cell states.
    pub tanh_c: Array2<f64>,
    /// `h x T` hidden outputs.
    pub h: Array2<f64>,
    /// State the sequence started from.
    pub state0: LstmState,
}

impl Lstm {
    pub fn new(w_x: Array2<f64>, w_h: Array2<f64>, b: Array1<f64>) -> Result<Self> {
        let rows = w_x.nrows();
        if rows % GATES_PER_CELL != 0 {
            return Err(Error::Shape(format!(
                "stacked gate rows {rows} not divisible by {GATES_PER_CELL}"
            )));
        }
        let hidden = rows / GATES_PER_CELL;
        if w_h.nrows() != rows || w_h.ncols() != hidden || b.len() != rows {
            return Err(Error::Shape(format!(
                "lstm shapes: w_x {:?}, w_h {:?}, b {}",
                w_x.dim(),
                w_h.dim(),
                b.len()
            )));
        }
        Ok(Self { w_x, w_h, b })
    }

    pub fn in_dim(&self) -> usize {
        self.w_x.ncols()
    }

    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }

    /// Gate activations from a stacked pre-activation vector, in place:
    /// sigmoid on the first three gate blocks, tanh on the update block.
    fn activate(z: &mut Array1<f64>, hidden: usize) {
        for (j, v) in z.iter_mut().enumerate() {
            *v = if j < 3 * hidden { sigmoid(*v) } else { v.tanh() };
        }
    }

    /// One recurrent step. Returns the new state and the gate activations
    /// (needed by the skip controller and for caching).
    pub fn step(&self, x: &Array1<f64>, state: &LstmState) -> Result<(LstmState, Array1<f64>)> {
        if x.len() != self.in_dim() || state.h.len() != self.hidden() {
            return Err(Error::Shape(format!(
                "lstm step: input {} state {} vs expected {} / {}",
                x.len(),
                state.h.len(),
                self.in_dim(),
                self.hidden()
            )));
        }
        let hidden = self.hidden();
        let mut z = self.w_x.dot(x) + self.w_h.dot(&state.h) + &self.b;
        Self::activate(&mut z, hidden);
        let (new_c, new_h) = Self::state_update(&z, &state.c, hidden);
        Ok((LstmState { h: new_h, c: new_c }, z))
    }

    fn state_update(gates: &Array1<f64>, c_prev: &Array1<f64>, hidden: usize) -> (Array1<f64>, Array1<f64>) {
        let input = gates.slice(s![0..hidden]);
        let retain = gates.slice(s![hidden..2 * hidden]);
        let output = gates.slice(s![2 * hidden..3 * hidden]);
        let update = gates.slice(s![3 * hidden..4 * hidden]);
        let mut c = Array1::zeros(hidden);
        let mut h = Array1::zeros(hidden);
        for j in 0..hidden {
            c[j] = retain[j] * c_prev[j] + input[j] * update[j];
            h[j] = output[j] * c[j].tanh();
        }
        (c, h)
    }

    /// Full-sequence forward. `x` is `in x T`; the input projection for all
    /// frames runs as one matrix product, only the recurrence is sequential.
    pub fn forward_seq(&self, x: &Array2<f64>, state0: &LstmState) -> Result<(Array2<f64>, LstmCache)> {
        if x.nrows() != self.in_dim() {
            return Err(Error::Shape(format!(
                "lstm input rows {} vs expected {}",
                x.nrows(),
                self.in_dim()
            )));
        }
        if state0.h.len() != self.hidden() || state0.c.len() != self.hidden() {
            return Err(Error::Shape("lstm initial state size".into()));
        }
        let hidden = self.hidden();
        let t_len = x.ncols();
        let mut zx = self.w_x.dot(x);
        for mut col in zx.axis_iter_mut(Axis(1)) {
            col += &self.b;
        }
        let mut gates = Array2::zeros((GATES_PER_CELL * hidden, t_len));
        let mut c_all = Array2::zeros((hidden, t_len));
        let mut tanh_all = Array2::zeros((hidden, t_len));
        let mut h_all = Array2::zeros((hidden, t_len));
        let mut h_prev = state0.h.clone();
        let mut c_prev = state0.c.clone();
        for t in 0..t_len {
            let mut z = zx.column(t).to_owned() + self.w_h.dot(&h_prev);
            Self::activate(&mut z, hidden);
            let (c, h) = Self::state_update(&z, &c_prev, hidden);
            gates.column_mut(t).assign(&z);
            tanh_all.column_mut(t).assign(&c.mapv(f64::tanh));
            c_all.column_mut(t).assign(&c);
            h_all.column_mut(t).assign(&h);
            h_prev = h;
            c_prev = c;
        }
        let cache = LstmCache {
            x: x.clone(),
            gates,
            c: c_all,
            tanh_c: tanh_all,
            h: h_all.clone(),
            state0: state0.clone(),
        };
        Ok((h_all, cache))
    }

    /// Backpropagation through time over a cached sequence.
    ///
    /// `dh` is `dL/dh_t` for every frame (`h x T`). Returns parameter
    /// gradients, the input gradient, and the gradient with respect to the
    /// initial state.
    #[allow(clippy::type_complexity)]
    pub fn backward_seq(
        &self,
        dh: &Array2<f64>,
        cache: &LstmCache,
    ) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>, Array2<f64>, LstmState)> {
        let hidden = self.hidden();
        let t_len = cache.x.ncols();
        if dh.dim() != (hidden, t_len) {
            return Err(Error::Shape(format!(
                "lstm dh {:?} vs ({hidden}, {t_len})",
                dh.dim()
            )));
        }
        let mut dz_all = Array2::zeros((GATES_PER_CELL * hidden, t_len));
        let mut dh_carry = Array1::zeros(hidden);
        let mut dc_carry: Array1<f64> = Array1::zeros(hidden);
        for t in (0..t_len).rev() {
            let gates = cache.gates.column(t);
            let tanh_c = cache.tanh_c.column(t);
            let c_prev = if t == 0 {
                cache.state0.c.view()
            } else {
                cache.c.column(t - 1)
            };
            let mut dz = Array1::zeros(GATES_PER_CELL * hidden);
            for j in 0..hidden {
                let (gi, gr, go, gu) = (
                    gates[j],
                    gates[hidden + j],
                    gates[2 * hidden + j],
                    gates[3 * hidden + j],
                );
                let dh_total = dh[(j, t)] + dh_carry[j];
                // h = o * tanh(c)
                let do_ = dh_total * tanh_c[j];
                let dc = dc_carry[j] + dh_total * go * (1.0 - tanh_c[j] * tanh_c[j]);
                // c = r * c_prev + i * u
                dz[j] = dc * gu * gi * (1.0 - gi); // input gate
                dz[hidden + j] = dc * c_prev[j] * gr * (1.0 - gr); // retain gate
                dz[2 * hidden + j] = do_ * go * (1.0 - go); // output gate
                dz[3 * hidden + j] = dc * gi * (1.0 - gu * gu); // update
                dc_carry[j] = dc * gr;
            }
            dh_carry = self.w_h.t().dot(&dz);
            dz_all.column_mut(t).assign(&dz);
        }
        // Parameter gradients as batched products over the whole sequence.
        let dwx = dz_all.dot(&cache.x.t());
        let mut h_prev_mat = Array2::zeros((hidden, t_len));
        h_prev_mat.column_mut(0).assign(&cache.state0.h);
        for t in 1..t_len {
            let col = cache.h.column(t - 1).to_owned();
            h_prev_mat.column_mut(t).assign(&col);
        }
        let dwh = dz_all.dot(&h_prev_mat.t());
        let db = dz_all.sum_axis(Axis(1));
        let dx = self.w_x.t().dot(&dz_all);
        let dstate0 = LstmState {
            h: dh_carry,
            c: dc_carry,
        };
        Ok((dwx, dwh, db, dx, dstate0))
    }
}
