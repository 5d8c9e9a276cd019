//! The differentiable objective: forward and reverse passes over full
//! utterances, with optional pruning masks and skip-gate relaxation.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;

use crate::compression::{
    apply_masks, eval_masks, fake_quant_weights, gate_pullback, penalty_with_grads,
    penalty_with_grads_on, pull_back_masked_grads, QatSpecs, QuantSpec, RequantParams,
};
use crate::enhancer::EnhancerModel;
use crate::error::{Error, Result};
use crate::metrics::psa_masked_loss_grad;
use crate::nn::{sigmoid, Activation, Dense, DenseCache, Lstm, LstmCache, LstmState, GATES_PER_CELL};
use crate::skip::{context_ema_step, gate_decision, skip_gate_step, SkipRuntime, CONTEXT_DECAY, MASK_DECAY};

use super::{BnMode, Objective, ObjectiveOpts, SkipStyle, Utterance};

/// Everything the reverse pass needs from one skip-model utterance.
struct SkipTrace {
    /// `n_mel x T` compressed mel features.
    feats: Array2<f64>,
    /// Candidate-step caches, both layers: gate activations (`4h x T`),
    /// candidate cells, their tanh, candidate outputs.
    gates1: Array2<f64>,
    cand1_c: Array2<f64>,
    cand1_tanh: Array2<f64>,
    cand1_h: Array2<f64>,
    gates2: Array2<f64>,
    cand2_c: Array2<f64>,
    cand2_tanh: Array2<f64>,
    cand2_h: Array2<f64>,
    /// Selected (post-blend) states per frame.
    sel1_h: Array2<f64>,
    sel1_c: Array2<f64>,
    sel2_h: Array2<f64>,
    sel2_c: Array2<f64>,
    /// Update probability at each frame (the decision input).
    g_tilde: Vec<f64>,
    /// Blend weight: binary in hard mode, `g_tilde` in soft mode.
    w: Vec<f64>,
    /// Increment used by the probability recursion at each frame.
    delta_used: Vec<f64>,
    /// Frame whose gate pre-activation produced `delta_used`.
    src: Vec<usize>,
    /// Whether the recursion's held branch saturated at `1 - g_tilde`.
    kink: Vec<bool>,
    /// Whether this frame evaluated the gate pre-activation.
    has_pre: Vec<bool>,
    /// Fresh increment for frames where `has_pre` holds.
    delta: Vec<f64>,
    /// Saturation ceiling of the probability recursion: 1 in float mode,
    /// the top of the gate grid in quantized mode.
    cap: f64,
}

enum Recurrent {
    Plain { c1: LstmCache, c2: LstmCache },
    Skip(Box<SkipTrace>),
}

/// `acc[i, :] += a[i] * b` for all rows.
fn add_outer(acc: &mut Array2<f64>, a: &Array1<f64>, b: &ArrayView1<f64>) {
    for (i, &ai) in a.iter().enumerate() {
        if ai != 0.0 {
            acc.row_mut(i).scaled_add(ai, b);
        }
    }
}

/// Single-step LSTM backward in terms of cached activations. `dh` and
/// `dc_in` are the gradients arriving at this step's output state. Returns
/// the pre-activation gradient (`4h`) and the gradient on the previous cell.
fn lstm_step_backward(
    gates: &ArrayView1<f64>,
    tanh_c: &ArrayView1<f64>,
    c_prev: &ArrayView1<f64>,
    dh: &Array1<f64>,
    dc_in: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let hidden = dh.len();
    let mut dz = Array1::zeros(GATES_PER_CELL * hidden);
    let mut dc_prev = Array1::zeros(hidden);
    for j in 0..hidden {
        let (gi, gr, go, gu) = (
            gates[j],
            gates[hidden + j],
            gates[2 * hidden + j],
            gates[3 * hidden + j],
        );
        let do_ = dh[j] * tanh_c[j];
        let dc = dc_in[j] + dh[j] * go * (1.0 - tanh_c[j] * tanh_c[j]);
        dz[j] = dc * gu * gi * (1.0 - gi);
        dz[hidden + j] = dc * c_prev[j] * gr * (1.0 - gr);
        dz[2 * hidden + j] = do_ * go * (1.0 - go);
        dz[3 * hidden + j] = dc * gi * (1.0 - gu * gu);
        dc_prev[j] = dc * gr;
    }
    (dz, dc_prev)
}

/// Blend of candidate and held state; exact passthrough at the binary ends.
fn select_state(w: f64, cand: &LstmState, prev: &LstmState) -> LstmState {
    if w == 1.0 {
        cand.clone()
    } else if w == 0.0 {
        prev.clone()
    } else {
        LstmState {
            h: w * &cand.h + (1.0 - w) * &prev.h,
            c: w * &cand.c + (1.0 - w) * &prev.c,
        }
    }
}

fn col_or_zeros(m: &Array2<f64>, t: usize) -> Array1<f64> {
    if t == 0 {
        Array1::zeros(m.nrows())
    } else {
        m.column(t - 1).to_owned()
    }
}

/// Forward pass for one plain (non-skip) utterance: features through both
/// LSTM layers. Returns the `h2 x T` output and the layer caches.
fn plain_forward(model: &EnhancerModel, utt: &Utterance) -> Result<(Array2<f64>, Recurrent)> {
    let t_len = utt.noisy.ncols();
    let mut feats = Array2::zeros((model.arch.n_mel, t_len));
    for t in 0..t_len {
        feats
            .column_mut(t)
            .assign(&model.features(&utt.noisy.column(t))?);
    }
    let z1 = LstmState::zeros(model.arch.hidden1);
    let (h1, c1) = model.lstm1.forward_seq(&feats, &z1)?;
    let z2 = LstmState::zeros(model.arch.hidden2);
    let (h2, c2) = model.lstm2.forward_seq(&h1, &z2)?;
    Ok((h2, Recurrent::Plain { c1, c2 }))
}

/// Forward pass for one skip-model utterance. Candidate states are
/// computed every frame; the blend weight is the binary decision in hard
/// mode and the update probability itself in soft mode. Returns the
/// `(h2 + dim_c) x T` pre-norm features and the full trace.
fn skip_forward(
    model: &EnhancerModel,
    utt: &Utterance,
    style: SkipStyle,
) -> Result<(Array2<f64>, Recurrent)> {
    let params = model
        .skip
        .as_ref()
        .ok_or_else(|| Error::Nn("skip forward on a model without a controller".into()))?;
    let arch = &model.arch;
    let dim_c = arch.dim_c.expect("skip arch has dim_c");
    let (h1, h2) = (arch.hidden1, arch.hidden2);
    let t_len = utt.noisy.ncols();
    let g = GATES_PER_CELL;

    let mut tr = SkipTrace {
        feats: Array2::zeros((arch.n_mel, t_len)),
        gates1: Array2::zeros((g * h1, t_len)),
        cand1_c: Array2::zeros((h1, t_len)),
        cand1_tanh: Array2::zeros((h1, t_len)),
        cand1_h: Array2::zeros((h1, t_len)),
        gates2: Array2::zeros((g * h2, t_len)),
        cand2_c: Array2::zeros((h2, t_len)),
        cand2_tanh: Array2::zeros((h2, t_len)),
        cand2_h: Array2::zeros((h2, t_len)),
        sel1_h: Array2::zeros((h1, t_len)),
        sel1_c: Array2::zeros((h1, t_len)),
        sel2_h: Array2::zeros((h2, t_len)),
        sel2_c: Array2::zeros((h2, t_len)),
        g_tilde: vec![0.0; t_len],
        w: vec![0.0; t_len],
        delta_used: vec![0.0; t_len],
        src: vec![0; t_len],
        kink: vec![false; t_len],
        has_pre: vec![false; t_len],
        delta: vec![0.0; t_len],
        cap: 1.0,
    };

    let mut rt = SkipRuntime::new(dim_c);
    let mut sel1 = LstmState::zeros(h1);
    let mut sel2 = LstmState::zeros(h2);
    let mut g_cur = 1.0;
    let mut src_cur = 0usize;
    let mut z = Array2::zeros((h2 + dim_c, t_len));

    for t in 0..t_len {
        let feat = model.features(&utt.noisy.column(t))?;
        tr.feats.column_mut(t).assign(&feat);
        context_ema_step(params, &mut rt, &feat.view())?;

        let (w, du, has_pre, delta, g_next) = match style {
            SkipStyle::Hard => {
                debug_assert_eq!(rt.g_tilde, g_cur);
                let update = skip_gate_step(params, &mut rt, &sel2.c.view())?;
                if update {
                    src_cur = t;
                }
                let du = rt.delta_cached;
                (if update { 1.0 } else { 0.0 }, du, update, du, rt.g_tilde)
            }
            SkipStyle::Soft => {
                let delta = sigmoid(params.gate_preact(&sel2.c.view())?);
                src_cur = t;
                let hold = g_cur + delta.min(1.0 - g_cur);
                (g_cur, delta, true, delta, g_cur * delta + (1.0 - g_cur) * hold)
            }
        };
        tr.g_tilde[t] = g_cur;
        tr.w[t] = w;
        tr.delta_used[t] = du;
        tr.src[t] = src_cur;
        tr.kink[t] = (1.0 - g_cur) < du;
        tr.has_pre[t] = has_pre;
        tr.delta[t] = delta;

        let (cand1, gates1) = model.lstm1.step(&feat, &sel1)?;
        let nsel1 = select_state(w, &cand1, &sel1);
        let (cand2, gates2) = model.lstm2.step(&nsel1.h, &sel2)?;
        let nsel2 = select_state(w, &cand2, &sel2);

        tr.gates1.column_mut(t).assign(&gates1);
        tr.cand1_tanh.column_mut(t).assign(&cand1.c.mapv(f64::tanh));
        tr.cand1_c.column_mut(t).assign(&cand1.c);
        tr.cand1_h.column_mut(t).assign(&cand1.h);
        tr.gates2.column_mut(t).assign(&gates2);
        tr.cand2_tanh.column_mut(t).assign(&cand2.c.mapv(f64::tanh));
        tr.cand2_c.column_mut(t).assign(&cand2.c);
        tr.cand2_h.column_mut(t).assign(&cand2.h);
        tr.sel1_h.column_mut(t).assign(&nsel1.h);
        tr.sel1_c.column_mut(t).assign(&nsel1.c);
        tr.sel2_h.column_mut(t).assign(&nsel2.h);
        tr.sel2_c.column_mut(t).assign(&nsel2.c);

        z.slice_mut(s![0..h2, t]).assign(&nsel2.h);
        z.slice_mut(s![h2.., t]).assign(&rt.c_x);

        sel1 = nsel1;
        sel2 = nsel2;
        g_cur = g_next;
    }
    Ok((z, Recurrent::Skip(Box::new(tr))))
}

/// Causal exponential mask smoothing, batch form of the streaming step.
fn mask_ema_forward(m: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    let mut prev: Option<Array1<f64>> = None;
    for t in 0..m.ncols() {
        let col = m.column(t);
        let sm = match prev {
            Some(ref p) => MASK_DECAY * p + (1.0 - MASK_DECAY) * &col,
            None => col.to_owned(),
        };
        out.column_mut(t).assign(&sm);
        prev = Some(sm);
    }
    out
}

/// Reverse of [`mask_ema_forward`]: gradient on the smoothed masks in,
/// gradient on the raw masks out.
fn mask_ema_backward(dms: &Array2<f64>) -> Array2<f64> {
    let mut dm = Array2::zeros(dms.raw_dim());
    let mut carry: Array1<f64> = Array1::zeros(dms.nrows());
    for t in (0..dms.ncols()).rev() {
        let total = &dms.column(t) + &(MASK_DECAY * &carry);
        if t == 0 {
            dm.column_mut(0).assign(&total);
        } else {
            dm.column_mut(t).assign(&((1.0 - MASK_DECAY) * &total));
        }
        carry = total;
    }
    dm
}

// ---------------------------------------------------------------------------
// Quantized forward passes. Every intermediate lives on a power-of-two grid,
// so the f64 arithmetic below is exact and reproduces the integer engine's
// accumulate/requantize pipeline bit for bit; the float caches then feed the
// ordinary backward passes, which makes the gradients straight-through by
// construction.
// ---------------------------------------------------------------------------

/// Grids of one quantized LSTM layer.
struct LstmGrids<'a> {
    pre: &'a QuantSpec,
    c: &'a QuantSpec,
    h: &'a QuantSpec,
    sig: &'a QuantSpec,
    tanh: &'a QuantSpec,
}

/// One rounded EMA step on a shared power-of-two grid. The increment is the
/// fixed-point product of the code difference, exactly as the integer
/// pipeline computes it; the result stays on the grid.
fn quant_ema_step(prev: f64, target: f64, step: f64, rq: &RequantParams) -> f64 {
    let d = ((target - prev) / step).round_ties_even() as i64;
    prev + rq.apply(d) as f64 * step
}

/// One quantized LSTM step: exact dyadic matvec accumulation, requantized
/// pre-activations, table-equivalent nonlinearities, requantized states.
/// Returns the new state, the gate activations, and tanh of the new cell.
fn quant_lstm_step(
    lstm: &Lstm,
    x: &Array1<f64>,
    state: &LstmState,
    g: &LstmGrids,
) -> (LstmState, Array1<f64>, Array1<f64>) {
    let hidden = lstm.hidden();
    let mut gates = lstm.w_x.dot(x) + lstm.w_h.dot(&state.h) + &lstm.b;
    for (j, v) in gates.iter_mut().enumerate() {
        let pre = g.pre.fake_quant(*v);
        *v = if j < 3 * hidden {
            g.sig.fake_quant(sigmoid(pre))
        } else {
            g.tanh.fake_quant(pre.tanh())
        };
    }
    let mut c = Array1::zeros(hidden);
    let mut tanh_c = Array1::zeros(hidden);
    let mut h = Array1::zeros(hidden);
    for j in 0..hidden {
        let (gi, gr, go, gu) = (
            gates[j],
            gates[hidden + j],
            gates[2 * hidden + j],
            gates[3 * hidden + j],
        );
        c[j] = g.c.fake_quant(gr * state.c[j] + gi * gu);
        tanh_c[j] = g.tanh.fake_quant(c[j].tanh());
        h[j] = g.h.fake_quant(go * tanh_c[j]);
    }
    (LstmState { h, c }, gates, tanh_c)
}

/// Full-sequence quantized LSTM from a zero state, caching the quantized
/// activations so the standard BPTT applies straight-through.
fn quant_lstm_seq(lstm: &Lstm, x: &Array2<f64>, g: &LstmGrids) -> (Array2<f64>, LstmCache) {
    let hidden = lstm.hidden();
    let t_len = x.ncols();
    let state0 = LstmState::zeros(hidden);
    let mut gates_all = Array2::zeros((GATES_PER_CELL * hidden, t_len));
    let mut c_all = Array2::zeros((hidden, t_len));
    let mut tanh_all = Array2::zeros((hidden, t_len));
    let mut h_all = Array2::zeros((hidden, t_len));
    let mut state = state0.clone();
    for t in 0..t_len {
        let (next, gates, tanh_c) = quant_lstm_step(lstm, &x.column(t).to_owned(), &state, g);
        gates_all.column_mut(t).assign(&gates);
        c_all.column_mut(t).assign(&next.c);
        tanh_all.column_mut(t).assign(&tanh_c);
        h_all.column_mut(t).assign(&next.h);
        state = next;
    }
    let cache = LstmCache {
        x: x.clone(),
        gates: gates_all,
        c: c_all,
        tanh_c: tanh_all,
        h: h_all.clone(),
        state0,
    };
    (h_all, cache)
}

/// Quantized dense layer over a sequence: requantized pre-activations, then
/// ReLU on the same grid (zero is representable) or sigmoid onto `out`.
fn quant_dense_seq(
    layer: &Dense,
    x: &Array2<f64>,
    pre: &QuantSpec,
    out: Option<&QuantSpec>,
) -> Result<(Array2<f64>, DenseCache)> {
    if x.nrows() != layer.in_dim() {
        return Err(Error::Shape(format!(
            "dense input rows {} vs expected {}",
            x.nrows(),
            layer.in_dim()
        )));
    }
    let mut y = layer.w.dot(x);
    for mut col in y.axis_iter_mut(Axis(1)) {
        col += &layer.b;
    }
    match (layer.act, out) {
        (Activation::Relu, None) => y.mapv_inplace(|v| pre.fake_quant(v).max(0.0)),
        (Activation::Sigmoid, Some(grid)) => {
            y.mapv_inplace(|v| grid.fake_quant(sigmoid(pre.fake_quant(v))))
        }
        _ => {
            return Err(Error::Train(
                "unsupported activation in the quantized head".into(),
            ))
        }
    }
    let cache = DenseCache {
        x: x.clone(),
        y: y.clone(),
    };
    Ok((y, cache))
}

/// Quantized causal mask smoothing: the streaming EMA stepped in integer
/// form on the mask grid.
fn quant_mask_ema_forward(
    m: &ArrayView2<f64>,
    grid: &QuantSpec,
    rq: &RequantParams,
) -> Array2<f64> {
    let mut out = Array2::zeros(m.raw_dim());
    let mut prev: Option<Array1<f64>> = None;
    for t in 0..m.ncols() {
        let col = m.column(t);
        let sm = match prev {
            Some(ref p) => {
                Array1::from_shape_fn(p.len(), |j| quant_ema_step(p[j], col[j], grid.step, rq))
            }
            None => col.to_owned(),
        };
        out.column_mut(t).assign(&sm);
        prev = Some(sm);
    }
    out
}

/// Quantized non-skip forward: fake-quantized features through both LSTM
/// layers on their calibrated grids.
fn quant_plain_forward(
    fq: &EnhancerModel,
    sp: &QatSpecs,
    noisy: &Array2<Complex64>,
) -> Result<(Array2<f64>, Recurrent)> {
    let t_len = noisy.ncols();
    let mut feats = Array2::zeros((fq.arch.n_mel, t_len));
    for t in 0..t_len {
        let f = fq.features(&noisy.column(t))?;
        feats
            .column_mut(t)
            .assign(&f.mapv(|v| sp.act.feat.fake_quant(v)));
    }
    let a = &sp.act;
    let g1 = LstmGrids {
        pre: &a.pre1,
        c: &a.c1,
        h: &a.h1,
        sig: &a.sig,
        tanh: &a.tanh,
    };
    let g2 = LstmGrids {
        pre: &a.pre2,
        c: &a.c2,
        h: &a.h2,
        sig: &a.sig,
        tanh: &a.tanh,
    };
    let (h1, c1) = quant_lstm_seq(&fq.lstm1, &feats, &g1);
    let (h2, c2) = quant_lstm_seq(&fq.lstm2, &h1, &g2);
    Ok((h2, Recurrent::Plain { c1, c2 }))
}

/// Quantized skip forward. Hard mode mirrors the integer engine exactly:
/// the update probability lives on the gate grid with a saturating-add
/// recursion, the context EMA steps in integer form on its fine grid, and
/// candidate states are the quantized LSTM steps. Soft mode keeps the
/// pointwise quantizers but blends states continuously — a training
/// relaxation with no integer counterpart.
fn quant_skip_forward(
    fq: &EnhancerModel,
    sp: &QatSpecs,
    noisy: &Array2<Complex64>,
    style: SkipStyle,
) -> Result<(Array2<f64>, Recurrent)> {
    let params = fq
        .skip
        .as_ref()
        .ok_or_else(|| Error::Nn("skip forward on a model without a controller".into()))?;
    let sg = sp
        .skip
        .as_ref()
        .ok_or_else(|| Error::Train("skip model without calibrated skip grids".into()))?;
    let arch = &fq.arch;
    let dim_c = arch.dim_c.expect("skip arch has dim_c");
    let (h1n, h2n) = (arch.hidden1, arch.hidden2);
    let t_len = noisy.ncols();
    let gpc = GATES_PER_CELL;
    let cap = sg.gate.beta;
    let rq_ctx = RequantParams::from_ratio(1.0 - CONTEXT_DECAY)?;

    let mut tr = SkipTrace {
        feats: Array2::zeros((arch.n_mel, t_len)),
        gates1: Array2::zeros((gpc * h1n, t_len)),
        cand1_c: Array2::zeros((h1n, t_len)),
        cand1_tanh: Array2::zeros((h1n, t_len)),
        cand1_h: Array2::zeros((h1n, t_len)),
        gates2: Array2::zeros((gpc * h2n, t_len)),
        cand2_c: Array2::zeros((h2n, t_len)),
        cand2_tanh: Array2::zeros((h2n, t_len)),
        cand2_h: Array2::zeros((h2n, t_len)),
        sel1_h: Array2::zeros((h1n, t_len)),
        sel1_c: Array2::zeros((h1n, t_len)),
        sel2_h: Array2::zeros((h2n, t_len)),
        sel2_c: Array2::zeros((h2n, t_len)),
        g_tilde: vec![0.0; t_len],
        w: vec![0.0; t_len],
        delta_used: vec![0.0; t_len],
        src: vec![0; t_len],
        kink: vec![false; t_len],
        has_pre: vec![false; t_len],
        delta: vec![0.0; t_len],
        cap,
    };

    let a = &sp.act;
    let g1 = LstmGrids {
        pre: &a.pre1,
        c: &a.c1,
        h: &a.h1,
        sig: &a.sig,
        tanh: &a.tanh,
    };
    let g2 = LstmGrids {
        pre: &a.pre2,
        c: &a.c2,
        h: &a.h2,
        sig: &a.sig,
        tanh: &a.tanh,
    };

    let mut c_x: Array1<f64> = Array1::zeros(dim_c);
    let mut sel1 = LstmState::zeros(h1n);
    let mut sel2 = LstmState::zeros(h2n);
    let mut g_cur = cap;
    let mut delta_cached = cap;
    let mut src_cur = 0usize;
    let mut z = Array2::zeros((h2n + dim_c, t_len));

    for t in 0..t_len {
        let feat = fq
            .features(&noisy.column(t))?
            .mapv(|v| a.feat.fake_quant(v));
        tr.feats.column_mut(t).assign(&feat);

        // Context EMA on its fine grid, stepped in integer form.
        let proj = params.w_c.dot(&feat) + &params.b_c;
        for (cx, &p) in c_x.iter_mut().zip(proj.iter()) {
            let p_fine = sg.cx.fake_quant(p);
            *cx = quant_ema_step(*cx, p_fine, sg.cx.step, &rq_ctx);
        }

        let gate_delta = |cell: &Array1<f64>| -> f64 {
            let pre = sg.gate_pre.fake_quant(params.w_b.dot(cell) + params.b_b);
            sg.gate.fake_quant(sigmoid(pre))
        };
        let (w, du, has_pre, delta, g_next) = match style {
            SkipStyle::Hard => {
                let update = gate_decision(g_cur);
                let du = if update {
                    let d = gate_delta(&sel2.c);
                    delta_cached = d;
                    src_cur = t;
                    d
                } else {
                    delta_cached
                };
                let next = if update { du } else { (g_cur + du).min(cap) };
                (if update { 1.0 } else { 0.0 }, du, update, du, next)
            }
            SkipStyle::Soft => {
                let delta = gate_delta(&sel2.c);
                src_cur = t;
                let hold = (g_cur + delta).min(cap);
                (g_cur, delta, true, delta, g_cur * delta + (1.0 - g_cur) * hold)
            }
        };
        tr.g_tilde[t] = g_cur;
        tr.w[t] = w;
        tr.delta_used[t] = du;
        tr.src[t] = src_cur;
        tr.kink[t] = (cap - g_cur) < du;
        tr.has_pre[t] = has_pre;
        tr.delta[t] = delta;

        let (cand1, gates1, tanh1) = quant_lstm_step(&fq.lstm1, &feat, &sel1, &g1);
        let nsel1 = select_state(w, &cand1, &sel1);
        let (cand2, gates2, tanh2) = quant_lstm_step(&fq.lstm2, &nsel1.h, &sel2, &g2);
        let nsel2 = select_state(w, &cand2, &sel2);

        tr.gates1.column_mut(t).assign(&gates1);
        tr.cand1_tanh.column_mut(t).assign(&tanh1);
        tr.cand1_c.column_mut(t).assign(&cand1.c);
        tr.cand1_h.column_mut(t).assign(&cand1.h);
        tr.gates2.column_mut(t).assign(&gates2);
        tr.cand2_tanh.column_mut(t).assign(&tanh2);
        tr.cand2_c.column_mut(t).assign(&cand2.c);
        tr.cand2_h.column_mut(t).assign(&cand2.h);
        tr.sel1_h.column_mut(t).assign(&nsel1.h);
        tr.sel1_c.column_mut(t).assign(&nsel1.c);
        tr.sel2_h.column_mut(t).assign(&nsel2.h);
        tr.sel2_c.column_mut(t).assign(&nsel2.c);

        z.slice_mut(s![0..h2n, t]).assign(&nsel2.h);
        z.slice_mut(s![h2n.., t])
            .assign(&c_x.mapv(|v| sg.cx_head.fake_quant(v)));

        sel1 = nsel1;
        sel2 = nsel2;
        g_cur = g_next;
    }
    Ok((z, Recurrent::Skip(Box::new(tr))))
}

/// Quantized streaming inference: run the fake-quantized forward over one
/// noisy spectrogram and return the final (smoothed, for skip models) mel
/// masks plus the gate trace. The integer engine reproduces these mask
/// values code for code, so this is its reference implementation.
pub fn quant_mask_frames(
    model: &EnhancerModel,
    specs: &QatSpecs,
    noisy: &Array2<Complex64>,
) -> Result<(Array2<f64>, Vec<bool>)> {
    if !model.bn.is_identity() {
        return Err(Error::Train(
            "fold the batch norm before quantized inference".into(),
        ));
    }
    let (fq, _) = fake_quant_weights(model, specs)?;
    let is_skip = fq.arch.has_skip();
    let (z, rec) = if is_skip {
        quant_skip_forward(&fq, specs, noisy, SkipStyle::Hard)?
    } else {
        quant_plain_forward(&fq, specs, noisy)?
    };
    let (a1, _) = quant_dense_seq(&fq.fc1, &z, &specs.act.fc1_pre, None)?;
    let (m_raw, _) = quant_dense_seq(&fq.fc2, &a1, &specs.act.fc2_pre, Some(&specs.act.mask))?;
    match rec {
        Recurrent::Skip(tr) => {
            let rq = RequantParams::from_ratio(1.0 - MASK_DECAY)?;
            let masks = quant_mask_ema_forward(&m_raw.view(), &specs.act.mask, &rq);
            let trace = tr.w.iter().map(|&w| w == 1.0).collect();
            Ok((masks, trace))
        }
        Recurrent::Plain { .. } => Ok((m_raw, Vec::new())),
    }
}

/// Reverse pass through one skip-model utterance. `dz` is the gradient on
/// the pre-norm features (`(h2 + dim_c) x T`); `budget_coeff` is the
/// per-frame weight of the budget term. Parameter gradients accumulate
/// into `grads`.
fn skip_backward(
    fwd: &EnhancerModel,
    tr: &SkipTrace,
    dz: &ArrayView2<f64>,
    budget_coeff: f64,
    grads: &mut EnhancerModel,
) -> Result<()> {
    let params = fwd.skip.as_ref().expect("skip model");
    let arch = &fwd.arch;
    let (h1, h2) = (arch.hidden1, arch.hidden2);
    let dim_c = arch.dim_c.expect("skip arch");
    let t_len = tr.feats.ncols();
    let dh2_direct = dz.slice(s![0..h2, ..]);
    let dcx_direct = dz.slice(s![h2.., ..]);

    let mut dwx1 = Array2::zeros((GATES_PER_CELL * h1, arch.n_mel));
    let mut dwh1 = Array2::zeros((GATES_PER_CELL * h1, h1));
    let mut db1 = Array1::zeros(GATES_PER_CELL * h1);
    let mut dwx2 = Array2::zeros((GATES_PER_CELL * h2, h1));
    let mut dwh2 = Array2::zeros((GATES_PER_CELL * h2, h2));
    let mut db2 = Array1::zeros(GATES_PER_CELL * h2);
    let mut dwb = Array1::zeros(h2);
    let mut dbb = 0.0;
    let mut dwc = Array2::zeros((dim_c, arch.n_mel));
    let mut dbc = Array1::zeros(dim_c);

    // Context EMA chain: c_x[t] = 0.9 c_x[t-1] + 0.1 proj[t].
    {
        use crate::skip::CONTEXT_DECAY;
        let mut carry: Array1<f64> = Array1::zeros(dim_c);
        for t in (0..t_len).rev() {
            let total = &dcx_direct.column(t) + &(CONTEXT_DECAY * &carry);
            let dproj = (1.0 - CONTEXT_DECAY) * &total;
            add_outer(&mut dwc, &dproj, &tr.feats.column(t));
            dbc += &dproj;
            carry = total;
        }
    }

    // Gate and state chain, back to front.
    let mut d_delta = vec![0.0; t_len];
    let mut g_next = 0.0; // dL/d g_tilde[t+1]
    let mut dh1c: Array1<f64> = Array1::zeros(h1);
    let mut dc1c: Array1<f64> = Array1::zeros(h1);
    let mut dh2c: Array1<f64> = Array1::zeros(h2);
    let mut dc2c: Array1<f64> = Array1::zeros(h2);

    for t in (0..t_len).rev() {
        let w = tr.w[t];
        let gt = tr.g_tilde[t];
        let du = tr.delta_used[t];
        let kink = tr.kink[t];

        // Probability recursion g[t+1] = w du + (1-w)(g + min(du, cap-g)).
        let hold = gt + du.min(tr.cap - gt);
        let dr_du = if kink { w } else { 1.0 };
        let dr_dw = du - hold;
        let dr_dg = if kink { 0.0 } else { 1.0 - w };
        d_delta[tr.src[t]] += g_next * dr_du;
        let mut g_cur = g_next * (dr_dw + dr_dg) + budget_coeff;

        // Gate pre-activation evaluated at this frame: delta = sigmoid(pre),
        // pre = w_b . c2_sel[t-1] + b_b. All later frames reusing this
        // increment have already deposited into d_delta[t].
        let mut pre_inject: Option<Array1<f64>> = None;
        if tr.has_pre[t] {
            let dpre = d_delta[t] * tr.delta[t] * (1.0 - tr.delta[t]);
            if dpre != 0.0 {
                let c2_prev = col_or_zeros(&tr.sel2_c, t);
                dwb.scaled_add(dpre, &c2_prev);
                dbb += dpre;
                pre_inject = Some(dpre * &params.w_b);
            }
        }

        // Selected state at t, layer 2: direct use in z plus the carries.
        let dsel2_h = &dh2c + &dh2_direct.column(t);
        let dsel2_c = dc2c.clone();
        let prev2_h = col_or_zeros(&tr.sel2_h, t);
        let prev2_c = col_or_zeros(&tr.sel2_c, t);
        let cand2_h = tr.cand2_h.column(t);
        let cand2_c = tr.cand2_c.column(t);
        let mut dw_t = 0.0;
        for j in 0..h2 {
            dw_t += dsel2_h[j] * (cand2_h[j] - prev2_h[j]);
            dw_t += dsel2_c[j] * (cand2_c[j] - prev2_c[j]);
        }
        let dcand2_h = w * &dsel2_h;
        let dcand2_c = w * &dsel2_c;
        let mut ndh2c = (1.0 - w) * &dsel2_h;
        let mut ndc2c = (1.0 - w) * &dsel2_c;

        let (dz2, dc_prev2) = lstm_step_backward(
            &tr.gates2.column(t),
            &tr.cand2_tanh.column(t),
            &prev2_c.view(),
            &dcand2_h,
            &dcand2_c,
        );
        add_outer(&mut dwx2, &dz2, &tr.sel1_h.column(t));
        add_outer(&mut dwh2, &dz2, &prev2_h.view());
        db2 += &dz2;
        ndc2c += &dc_prev2;
        ndh2c += &fwd.lstm2.w_h.t().dot(&dz2);
        let dx2 = fwd.lstm2.w_x.t().dot(&dz2);

        // Layer 1 at t.
        let dsel1_h = &dh1c + &dx2;
        let dsel1_c = dc1c.clone();
        let prev1_h = col_or_zeros(&tr.sel1_h, t);
        let prev1_c = col_or_zeros(&tr.sel1_c, t);
        let cand1_h = tr.cand1_h.column(t);
        let cand1_c = tr.cand1_c.column(t);
        for j in 0..h1 {
            dw_t += dsel1_h[j] * (cand1_h[j] - prev1_h[j]);
            dw_t += dsel1_c[j] * (cand1_c[j] - prev1_c[j]);
        }
        let dcand1_h = w * &dsel1_h;
        let dcand1_c = w * &dsel1_c;
        let mut ndh1c = (1.0 - w) * &dsel1_h;
        let mut ndc1c = (1.0 - w) * &dsel1_c;

        let (dz1, dc_prev1) = lstm_step_backward(
            &tr.gates1.column(t),
            &tr.cand1_tanh.column(t),
            &prev1_c.view(),
            &dcand1_h,
            &dcand1_c,
        );
        add_outer(&mut dwx1, &dz1, &tr.feats.column(t));
        add_outer(&mut dwh1, &dz1, &prev1_h.view());
        db1 += &dz1;
        ndc1c += &dc_prev1;
        ndh1c += &fwd.lstm1.w_h.t().dot(&dz1);

        // Straight-through: the blend weight's gradient lands on g_tilde[t]
        // in both modes.
        g_cur += dw_t;
        if let Some(inj) = pre_inject {
            ndc2c += &inj;
        }

        dh1c = ndh1c;
        dc1c = ndc1c;
        dh2c = ndh2c;
        dc2c = ndc2c;
        g_next = g_cur; // consumed at t-1; discarded at t = 0 (g_tilde[0] = 1)
    }

    grads.lstm1.w_x += &dwx1;
    grads.lstm1.w_h += &dwh1;
    grads.lstm1.b += &db1;
    grads.lstm2.w_x += &dwx2;
    grads.lstm2.w_h += &dwh2;
    grads.lstm2.b += &db2;
    let sg = grads.skip.as_mut().expect("grads follow model shape");
    sg.w_b += &dwb;
    sg.b_b += dbb;
    sg.w_c += &dwc;
    sg.b_c += &dbc;
    Ok(())
}

/// Evaluate the training objective and its gradients over a batch.
///
/// The data term is the mean masking loss; with pruning enabled the
/// forward pass runs on group-masked weights, gradients are pulled back to
/// the raw weights and threshold parameters, and the sparsity penalty is
/// added; for skip models a budget term can penalize the mean update
/// probability. The model itself is never mutated: in `BnMode::Train` the
/// computed batch statistics are returned for the caller to fold into the
/// running estimates.
pub fn objective(
    model: &EnhancerModel,
    batch: &[Utterance],
    opts: &ObjectiveOpts,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Train("objective needs at least one utterance".into()));
    }
    for utt in batch {
        if utt.clean.dim() != utt.noisy.dim() {
            return Err(Error::Train(format!(
                "clean/noisy shape mismatch: {:?} vs {:?}",
                utt.clean.dim(),
                utt.noisy.dim()
            )));
        }
        if utt.noisy.ncols() == 0 {
            return Err(Error::Train("empty utterance".into()));
        }
    }
    let b_count = batch.len() as f64;

    let (masks, fwd) = match &opts.prune {
        Some(p) => {
            let m = eval_masks(model, p.set, p.state, p.mode);
            let fwd = apply_masks(model, p.set, &m);
            (Some(m), fwd)
        }
        None => (None, model.clone()),
    };
    let fwd = match opts.quant {
        Some(sp) => {
            if opts.bn == BnMode::Train {
                return Err(Error::Train(
                    "quantized training requires frozen batch-norm statistics".into(),
                ));
            }
            if !fwd.bn.is_identity() {
                return Err(Error::Train(
                    "fold the batch norm before quantized training".into(),
                ));
            }
            fake_quant_weights(&fwd, sp)?.0
        }
        None => fwd,
    };
    let is_skip = fwd.arch.has_skip();

    // Recurrent forward, one utterance at a time.
    let mut zs: Vec<Array2<f64>> = Vec::with_capacity(batch.len());
    let mut recs: Vec<Recurrent> = Vec::with_capacity(batch.len());
    for utt in batch {
        let (z, rec) = match opts.quant {
            Some(sp) if is_skip => quant_skip_forward(&fwd, sp, &utt.noisy, opts.skip)?,
            Some(sp) => quant_plain_forward(&fwd, sp, &utt.noisy)?,
            None if is_skip => skip_forward(&fwd, utt, opts.skip)?,
            None => plain_forward(&fwd, utt)?,
        };
        zs.push(z);
        recs.push(rec);
    }
    let z_views: Vec<_> = zs.iter().map(|z| z.view()).collect();
    let z_all = concatenate(Axis(1), &z_views).map_err(|e| Error::Shape(e.to_string()))?;

    // Shared head over the whole batch.
    let (y_bn, bn_cache) = match opts.bn {
        BnMode::Train => {
            let mut bn = fwd.bn.clone();
            let (y, cache) = bn.forward_train(&z_all)?;
            (y, Some(cache))
        }
        BnMode::Eval => (fwd.bn.forward_eval(&z_all)?, None),
    };
    let (m_raw, fc1_cache, fc2_cache) = match opts.quant {
        Some(sp) => {
            let (a1, c1) = quant_dense_seq(&fwd.fc1, &y_bn, &sp.act.fc1_pre, None)?;
            let (m, c2) = quant_dense_seq(&fwd.fc2, &a1, &sp.act.fc2_pre, Some(&sp.act.mask))?;
            (m, c1, c2)
        }
        None => {
            let (a1, c1) = fwd.fc1.forward_seq(&y_bn)?;
            let (m, c2) = fwd.fc2.forward_seq(&a1)?;
            (m, c1, c2)
        }
    };

    // Per-utterance loss and mask gradients.
    let rq_mask = match opts.quant {
        Some(_) if is_skip => Some(RequantParams::from_ratio(1.0 - MASK_DECAY)?),
        _ => None,
    };
    let mut dm_all = Array2::zeros(m_raw.raw_dim());
    let mut data_term = 0.0;
    let mut offset = 0;
    for utt in batch {
        let t_len = utt.noisy.ncols();
        let m_b = m_raw.slice(s![.., offset..offset + t_len]);
        let m_used = if is_skip {
            match (opts.quant, &rq_mask) {
                (Some(sp), Some(rq)) => quant_mask_ema_forward(&m_b, &sp.act.mask, rq),
                _ => mask_ema_forward(&m_b),
            }
        } else {
            m_b.to_owned()
        };
        let spectral = fwd.mel.transpose(&m_used)?;
        let (loss_b, ds_b) = psa_masked_loss_grad(&utt.clean, &utt.noisy, &spectral)?;
        data_term += loss_b / b_count;
        let dms = fwd.mel.matrix().dot(&ds_b) / b_count;
        let dm_b = if is_skip { mask_ema_backward(&dms) } else { dms };
        dm_all
            .slice_mut(s![.., offset..offset + t_len])
            .assign(&dm_b);
        offset += t_len;
    }

    // Head backward.
    let mut grads = fwd.zeroed_like();
    let (dw2, db2, da1) = fwd.fc2.backward_seq(&dm_all, &fc2_cache)?;
    let (dw1, db1, dy_bn) = fwd.fc1.backward_seq(&da1, &fc1_cache)?;
    grads.fc2.w += &dw2;
    grads.fc2.b += &db2;
    grads.fc1.w += &dw1;
    grads.fc1.b += &db1;

    let (dz_all, bn_batch_stats) = match (&opts.bn, &bn_cache) {
        (BnMode::Train, Some(cache)) => {
            let (dgamma, dbeta, dx) = fwd.bn.backward(&dy_bn, cache)?;
            grads.bn.gamma += &dgamma;
            grads.bn.beta += &dbeta;
            (dx, Some((cache.mean.clone(), cache.var.clone())))
        }
        (BnMode::Eval, None) => {
            // y = a x + b with a = gamma / sqrt(rv + eps): pure affine map.
            let feats = fwd.bn.features();
            let (a, _) = fwd.bn.affine();
            let mut dx = dy_bn.clone();
            for (j, mut row) in dx.outer_iter_mut().enumerate() {
                row *= a[j];
            }
            for j in 0..feats {
                let inv_std = 1.0 / (fwd.bn.running_var[j] + fwd.bn.eps).sqrt();
                let mut dg = 0.0;
                let mut db = 0.0;
                for t in 0..dy_bn.ncols() {
                    dg += dy_bn[(j, t)] * (z_all[(j, t)] - fwd.bn.running_mean[j]) * inv_std;
                    db += dy_bn[(j, t)];
                }
                grads.bn.gamma[j] += dg;
                grads.bn.beta[j] += db;
            }
            (dx, None)
        }
        _ => unreachable!("cache presence follows the mode"),
    };
    if opts.quant.is_some() {
        // The folded batch norm is a frozen identity; its parameters are
        // not trained any further.
        grads.bn.gamma.fill(0.0);
        grads.bn.beta.fill(0.0);
    }

    // Recurrent backward plus skip-rate/budget accounting.
    let mut budget_term = 0.0;
    let mut held = 0usize;
    let mut frames = 0usize;
    offset = 0;
    for (utt, rec) in batch.iter().zip(&recs) {
        let t_len = utt.noisy.ncols();
        let dz_b = dz_all.slice(s![.., offset..offset + t_len]);
        match rec {
            Recurrent::Plain { c1, c2 } => {
                let (dwx2, dwh2, db2, dh1, _) =
                    fwd.lstm2.backward_seq(&dz_b.to_owned(), c2)?;
                let (dwx1, dwh1, db1, _, _) = fwd.lstm1.backward_seq(&dh1, c1)?;
                grads.lstm2.w_x += &dwx2;
                grads.lstm2.w_h += &dwh2;
                grads.lstm2.b += &db2;
                grads.lstm1.w_x += &dwx1;
                grads.lstm1.w_h += &dwh1;
                grads.lstm1.b += &db1;
            }
            Recurrent::Skip(tr) => {
                let budget_coeff = opts.budget_weight / (t_len as f64 * b_count);
                skip_backward(&fwd, tr, &dz_b, budget_coeff, &mut grads)?;
                let mean_g: f64 = tr.g_tilde.iter().sum::<f64>() / t_len as f64;
                budget_term += opts.budget_weight * mean_g / b_count;
                held += tr.g_tilde.iter().filter(|&&g| g < 0.5).count();
            }
        }
        frames += t_len;
        offset += t_len;
    }

    // Pruning pullback and penalty.
    let mut penalty_term = 0.0;
    let mut rho_grads = Vec::new();
    if let Some(p) = &opts.prune {
        let masks_ref = masks.as_ref().expect("masks exist when pruning");
        rho_grads = vec![0.0; p.set.threshold_layers.len()];
        let dr = pull_back_masked_grads(model, p.set, p.cover, masks_ref, &mut grads);
        gate_pullback(model, p.set, p.state, &dr, &mut grads, &mut rho_grads);
        // Under quantization the penalty norms are taken on the snapped
        // weights (straight-through to the raw ones); the gate slopes stay
        // on the raw model either way.
        let (pv, pg, prho) = match opts.quant {
            Some(sp) => {
                let (q_raw, _) = fake_quant_weights(model, sp)?;
                penalty_with_grads_on(model, &q_raw, p.set, p.state, p.mode)
            }
            None => penalty_with_grads(model, p.set, p.state, p.mode),
        };
        penalty_term = pv;
        grads.add_scaled(&pg, 1.0)?;
        for (acc, g) in rho_grads.iter_mut().zip(&prho) {
            *acc += g;
        }
    }

    Ok(Objective {
        value: data_term + penalty_term + budget_term,
        data_term,
        penalty_term,
        budget_term,
        grads,
        rho_grads,
        bn_batch_stats,
        masks,
        skip_rate: held as f64 / frames as f64,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::{calibrate, fold_bn, GroupSet, PruneMode, PruneState, QatConfig};
    use crate::dsp::{stft_with, AudioSignal, FrameConfig, StftPlan};
    use crate::enhancer::{ArchConfig, TensorId, TensorViewMut};
    use crate::train::{BnMode, ObjectiveOpts, PruneOpts, SkipStyle};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            n_mel: 4,
            hidden1: 8,
            hidden2: 8,
            fc1_units: 4,
            dim_c: None,
            frame: FrameConfig::baseline(),
        }
    }

    fn tiny_skip_arch() -> ArchConfig {
        ArchConfig {
            n_mel: 4,
            hidden1: 8,
            hidden2: 8,
            fc1_units: 4,
            dim_c: Some(4),
            frame: FrameConfig::skip(),
        }
    }

    fn rand_spectrum(bins: usize, frames: usize, rng: &mut ChaCha8Rng) -> Array2<Complex64> {
        Array2::from_shape_fn((bins, frames), |_| {
            let r = rng.gen_range(0.5..1.5);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            Complex64::from_polar(r, phi)
        })
    }

    fn tiny_batch(bins: usize, frames: &[usize], seed: u64) -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        frames
            .iter()
            .map(|&t| Utterance {
                clean: rand_spectrum(bins, t, &mut rng),
                noisy: rand_spectrum(bins, t, &mut rng),
            })
            .collect()
    }

    fn update_coord(model: &mut EnhancerModel, id: TensorId, flat: usize, f: impl Fn(f64) -> f64) {
        match model.tensor_mut(id).unwrap() {
            TensorViewMut::Mat(m) => {
                let v = m.iter_mut().nth(flat).unwrap();
                *v = f(*v);
            }
            TensorViewMut::Vec(v) => {
                let x = &mut v[flat];
                *x = f(*x);
            }
            TensorViewMut::Scalar(s) => *s = f(*s),
        }
    }

    fn read_grad(grads: &EnhancerModel, id: TensorId, flat: usize) -> f64 {
        grads.tensor(id).unwrap().to_flat()[flat]
    }

    fn check_fd(
        model: &EnhancerModel,
        batch: &[Utterance],
        opts: &ObjectiveOpts,
        probes: &[(TensorId, usize)],
        rel: f64,
    ) {
        let obj = objective(model, batch, opts).unwrap();
        let h = 1e-5;
        for &(id, flat) in probes {
            let mut mp = model.clone();
            update_coord(&mut mp, id, flat, |v| v + h);
            let mut mm = model.clone();
            update_coord(&mut mm, id, flat, |v| v - h);
            let fp = objective(&mp, batch, opts).unwrap().value;
            let fm = objective(&mm, batch, opts).unwrap().value;
            let fd = (fp - fm) / (2.0 * h);
            let an = read_grad(&obj.grads, id, flat);
            let scale = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                ((an - fd) / scale).abs() < rel,
                "{:?}[{flat}]: analytic {an} vs fd {fd}",
                id
            );
        }
    }

    #[test]
    fn baseline_gradients_match_finite_differences() {
        let model = EnhancerModel::init(tiny_arch(), 21).unwrap();
        let batch = tiny_batch(model.arch.frame.bins(), &[6, 5], 22);
        let opts = ObjectiveOpts {
            bn: BnMode::Train,
            ..Default::default()
        };
        let probes = [
            (TensorId::Lstm1Wx, 5),
            (TensorId::Lstm1Wh, 17),
            (TensorId::Lstm1B, 3),
            (TensorId::Lstm2Wx, 40),
            (TensorId::Lstm2Wh, 200),
            (TensorId::Lstm2B, 30),
            (TensorId::BnGamma, 2),
            (TensorId::BnBeta, 5),
            (TensorId::Fc1W, 9),
            (TensorId::Fc1B, 1),
            (TensorId::Fc2W, 7),
            (TensorId::Fc2B, 2),
        ];
        check_fd(&model, &batch, &opts, &probes, 1e-3);
    }

    #[test]
    fn baseline_eval_mode_gradients_match_finite_differences() {
        let mut model = EnhancerModel::init(tiny_arch(), 23).unwrap();
        // Non-trivial running statistics so the eval affine map matters.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        model
            .bn
            .running_mean
            .mapv_inplace(|_| rng.gen_range(-0.3..0.3));
        model
            .bn
            .running_var
            .mapv_inplace(|_| rng.gen_range(0.5..1.5));
        let batch = tiny_batch(model.arch.frame.bins(), &[5], 25);
        let opts = ObjectiveOpts::default();
        let probes = [
            (TensorId::Lstm1Wx, 11),
            (TensorId::Lstm2Wh, 99),
            (TensorId::BnGamma, 4),
            (TensorId::BnBeta, 0),
            (TensorId::Fc1W, 3),
            (TensorId::Fc2W, 12),
        ];
        check_fd(&model, &batch, &opts, &probes, 1e-3);
    }

    #[test]
    fn eval_objective_equals_streaming_inference_loss() {
        let model = EnhancerModel::init(tiny_arch(), 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let n = 4000;
        let clean =
            AudioSignal::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000).unwrap();
        let noisy =
            AudioSignal::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000).unwrap();
        let plan = StftPlan::new(model.arch.frame).unwrap();
        let spec_c = stft_with(&clean, &plan).unwrap();
        let spec_n = stft_with(&noisy, &plan).unwrap();

        let batch = [Utterance {
            clean: spec_c.data.clone(),
            noisy: spec_n.data.clone(),
        }];
        let obj = objective(&model, &batch, &ObjectiveOpts::default()).unwrap();

        let (_, spectral, _) = model.mask_frames(&spec_n).unwrap();
        let (manual, _) = psa_masked_loss_grad(&spec_c.data, &spec_n.data, &spectral).unwrap();
        assert_abs_diff_eq!(obj.data_term, manual, epsilon = 1e-9 * manual.max(1.0));
        assert_eq!(obj.skip_rate, 0.0);
        assert!(obj.bn_batch_stats.is_none());
    }

    #[test]
    fn skip_hard_objective_equals_streaming_inference_loss() {
        let mut model = EnhancerModel::init(tiny_skip_arch(), 41).unwrap();
        // Push the gate toward small increments so real holds occur.
        model.skip.as_mut().unwrap().b_b = -2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 4600;
        let clean =
            AudioSignal::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000).unwrap();
        let noisy =
            AudioSignal::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 16000).unwrap();
        let plan = StftPlan::new(model.arch.frame).unwrap();
        let spec_c = stft_with(&clean, &plan).unwrap();
        let spec_n = stft_with(&noisy, &plan).unwrap();

        let batch = [Utterance {
            clean: spec_c.data.clone(),
            noisy: spec_n.data.clone(),
        }];
        let obj = objective(&model, &batch, &ObjectiveOpts::default()).unwrap();

        let (_, spectral, trace) = model.mask_frames(&spec_n).unwrap();
        let (manual, _) = psa_masked_loss_grad(&spec_c.data, &spec_n.data, &spectral).unwrap();
        assert_abs_diff_eq!(obj.data_term, manual, epsilon = 1e-9 * manual.max(1.0));
        // The gate actually held some frames and the rates agree exactly.
        let held = trace.iter().filter(|&&g| !g).count();
        assert!(held > 0, "gate never held");
        assert_eq!(obj.skip_rate, held as f64 / trace.len() as f64);
    }

    #[test]
    fn skip_soft_gradients_match_finite_differences() {
        let mut model = EnhancerModel::init(tiny_skip_arch(), 51).unwrap();
        // Keep the probability recursion away from the min() tie.
        model.skip.as_mut().unwrap().b_b = 0.8;
        let batch = tiny_batch(model.arch.frame.bins(), &[5, 4], 52);
        let opts = ObjectiveOpts {
            bn: BnMode::Train,
            skip: SkipStyle::Soft,
            budget_weight: 0.05,
            ..Default::default()
        };
        let probes = [
            (TensorId::GateW, 2),
            (TensorId::GateB, 0),
            (TensorId::CtxW, 5),
            (TensorId::CtxB, 1),
            (TensorId::Lstm1Wx, 9),
            (TensorId::Lstm1Wh, 30),
            (TensorId::Lstm2Wx, 77),
            (TensorId::Lstm2Wh, 140),
            (TensorId::Lstm2B, 12),
            (TensorId::BnGamma, 9),
            (TensorId::BnBeta, 2),
            (TensorId::Fc1W, 20),
            (TensorId::Fc2W, 3),
            (TensorId::Fc2B, 1),
        ];
        check_fd(&model, &batch, &opts, &probes, 1e-3);
    }

    #[test]
    fn pruned_objective_gradients_match_finite_differences() {
        let model = EnhancerModel::init(tiny_arch(), 61).unwrap();
        let set = GroupSet::for_arch(&model.arch);
        let cover = set.cover_map();
        let mut state = PruneState::new(&set, 1e-3, 10.0);
        // Thresholds in the bulk of the group-norm distribution so the
        // sigmoid gates are neither saturated nor flat.
        for (k, r) in state.rho.iter_mut().enumerate() {
            *r = -0.3 + 0.15 * k as f64;
        }
        let batch = tiny_batch(model.arch.frame.bins(), &[5], 62);
        let opts = ObjectiveOpts {
            bn: BnMode::Train,
            prune: Some(PruneOpts {
                set: &set,
                cover: &cover,
                state: &state,
                mode: PruneMode::Soft,
            }),
            ..Default::default()
        };
        let probes = [
            (TensorId::Lstm1Wx, 5),
            (TensorId::Lstm1Wh, 9), // off-diagonal: row and column group overlap
            (TensorId::Lstm2Wx, 33),
            (TensorId::Lstm2Wh, 72),
            (TensorId::Fc1W, 2), // tied to an lstm2 unit
            (TensorId::Fc2W, 6),
            (TensorId::Fc1B, 0), // uncovered passthrough
            (TensorId::BnGamma, 1),
        ];
        check_fd(&model, &batch, &opts, &probes, 1e-3);

        // Threshold gradients against finite differences over rho.
        let obj = objective(&model, &batch, &opts).unwrap();
        let h = 1e-5;
        for k in 0..state.rho.len() {
            let mut sp = state.clone();
            sp.rho[k] += h;
            let mut sm = state.clone();
            sm.rho[k] -= h;
            let op = ObjectiveOpts {
                prune: Some(PruneOpts {
                    set: &set,
                    cover: &cover,
                    state: &sp,
                    mode: PruneMode::Soft,
                }),
                ..opts
            };
            let om = ObjectiveOpts {
                prune: Some(PruneOpts {
                    set: &set,
                    cover: &cover,
                    state: &sm,
                    mode: PruneMode::Soft,
                }),
                ..opts
            };
            let fd = (objective(&model, &batch, &op).unwrap().value
                - objective(&model, &batch, &om).unwrap().value)
                / (2.0 * h);
            let an = obj.rho_grads[k];
            let scale = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                ((an - fd) / scale).abs() < 1e-3,
                "rho[{k}]: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn skip_pruned_soft_gradients_match_finite_differences() {
        let mut model = EnhancerModel::init(tiny_skip_arch(), 71).unwrap();
        model.skip.as_mut().unwrap().b_b = 0.8;
        let set = GroupSet::for_arch(&model.arch);
        let cover = set.cover_map();
        let mut state = PruneState::new(&set, 1e-3, 10.0);
        for (k, r) in state.rho.iter_mut().enumerate() {
            *r = -0.35 + 0.12 * k as f64;
        }
        let batch = tiny_batch(model.arch.frame.bins(), &[4], 72);
        let opts = ObjectiveOpts {
            bn: BnMode::Train,
            prune: Some(PruneOpts {
                set: &set,
                cover: &cover,
                state: &state,
                mode: PruneMode::Soft,
            }),
            skip: SkipStyle::Soft,
            budget_weight: 0.02,
            quant: None,
        };
        let probes = [
            (TensorId::Lstm2Wh, 88),
            (TensorId::CtxW, 7),
            (TensorId::CtxB, 2),
            (TensorId::GateW, 5),
            (TensorId::Fc1W, 21), // context column of fc1
        ];
        check_fd(&model, &batch, &opts, &probes, 1e-3);

        let obj = objective(&model, &batch, &opts).unwrap();
        let h = 1e-5;
        for k in 0..state.rho.len() {
            let mut sp = state.clone();
            sp.rho[k] += h;
            let mut sm = state.clone();
            sm.rho[k] -= h;
            let op = ObjectiveOpts {
                prune: Some(PruneOpts {
                    set: &set,
                    cover: &cover,
                    state: &sp,
                    mode: PruneMode::Soft,
                }),
                ..opts
            };
            let om = ObjectiveOpts {
                prune: Some(PruneOpts {
                    set: &set,
                    cover: &cover,
                    state: &sm,
                    mode: PruneMode::Soft,
                }),
                ..opts
            };
            let fd = (objective(&model, &batch, &op).unwrap().value
                - objective(&model, &batch, &om).unwrap().value)
                / (2.0 * h);
            let an = obj.rho_grads[k];
            let scale = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                ((an - fd) / scale).abs() < 1e-3,
                "rho[{k}]: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn frozen_gate_stops_recurrent_gradients_exactly() {
        let mut model = EnhancerModel::init(tiny_skip_arch(), 81).unwrap();
        // Saturate the gate shut: only frame 0 updates, from zero states.
        model.skip.as_mut().unwrap().b_b = -10.0;
        // Zero-init biases can leave every hidden unit dead at this size;
        // bias them on so the mask head actually passes gradient back.
        model.fc1.b.fill(0.5);
        let batch = tiny_batch(model.arch.frame.bins(), &[6], 82);
        let obj = objective(&model, &batch, &ObjectiveOpts::default()).unwrap();

        // The only candidate step feeding the loss starts from zero states,
        // so every recurrent-weight gradient is exactly zero while the
        // input-projection gradient is not.
        assert!(obj.grads.lstm2.w_h.iter().all(|&g| g == 0.0));
        assert!(obj.grads.lstm1.w_h.iter().all(|&g| g == 0.0));
        assert!(obj.grads.lstm2.w_x.iter().any(|&g| g != 0.0));
        // Gate weight reads the zero cell state; its bias still moves.
        let sg = obj.grads.skip.as_ref().unwrap();
        assert!(sg.w_b.iter().all(|&g| g == 0.0));
        assert!(sg.b_b != 0.0);
        assert_abs_diff_eq!(obj.skip_rate, 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn train_mode_returns_batch_stats_without_mutating_the_model() {
        let model = EnhancerModel::init(tiny_arch(), 91).unwrap();
        let before: Vec<f64> = model
            .tensor_ids()
            .iter()
            .flat_map(|&id| model.tensor(id).unwrap().to_flat())
            .collect();
        let batch = tiny_batch(model.arch.frame.bins(), &[4, 3], 92);
        let opts = ObjectiveOpts {
            bn: BnMode::Train,
            ..Default::default()
        };
        let obj = objective(&model, &batch, &opts).unwrap();
        let (mean, var) = obj.bn_batch_stats.expect("train mode reports stats");
        assert_eq!(mean.len(), model.arch.bn_features());
        assert!(var.iter().all(|&v| v.is_finite() && v >= 0.0));
        let after: Vec<f64> = model
            .tensor_ids()
            .iter()
            .flat_map(|&id| model.tensor(id).unwrap().to_flat())
            .collect();
        assert_eq!(before, after);
        assert_eq!(obj.frames, 7);
    }

    #[test]
    fn objective_is_bitwise_deterministic() {
        let mut model = EnhancerModel::init(tiny_skip_arch(), 95).unwrap();
        model.skip.as_mut().unwrap().b_b = -1.0;
        let batch = tiny_batch(model.arch.frame.bins(), &[5, 3], 96);
        let opts = ObjectiveOpts {
            bn: BnMode::Train,
            ..Default::default()
        };
        let a = objective(&model, &batch, &opts).unwrap();
        let b = objective(&model, &batch, &opts).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        for id in a.grads.tensor_ids() {
            let ga = a.grads.tensor(id).unwrap().to_flat();
            let gb = b.grads.tensor(id).unwrap().to_flat();
            assert_eq!(
                ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    /// Calibrated 16-bit grids on a folded model.
    fn quant_fixture(skip: bool, seed: u64, frames: &[usize]) -> (EnhancerModel, Vec<Utterance>) {
        let arch = if skip { tiny_skip_arch() } else { tiny_arch() };
        let mut model = EnhancerModel::init(arch, seed).unwrap();
        fold_bn(&mut model).unwrap();
        let batch = tiny_batch(model.arch.frame.bins(), frames, seed ^ 0xD1CE);
        (model, batch)
    }

    fn calibrated(model: &EnhancerModel, batch: &[Utterance], bits: u32) -> QatSpecs {
        let spectra: Vec<_> = batch.iter().map(|u| u.noisy.clone()).collect();
        let cfg = QatConfig {
            weight_bits: bits,
            act_bits: bits,
            mask_bits: 16,
            calib_decay: 0.99,
        };
        calibrate(model, &spectra, &cfg).unwrap()
    }

    #[test]
    fn high_precision_quantization_tracks_the_float_objective() {
        let (model, batch) = quant_fixture(false, 808, &[14, 11]);
        let specs = calibrated(&model, &batch, 16);
        let float_opts = ObjectiveOpts {
            bn: BnMode::Eval,
            ..Default::default()
        };
        let quant_opts = ObjectiveOpts {
            bn: BnMode::Eval,
            quant: Some(&specs),
            ..Default::default()
        };
        let f = objective(&model, &batch, &float_opts).unwrap();
        let q = objective(&model, &batch, &quant_opts).unwrap();
        let rel = (q.value - f.value).abs() / f.value.abs();
        assert!(rel < 2e-3, "objective drift {rel}");
        // Straight-through gradients of the 16-bit graph stay close to the
        // float gradients everywhere except the frozen batch norm.
        let (mut num, mut den) = (0.0, 0.0);
        for id in f.grads.tensor_ids() {
            if matches!(id, TensorId::BnGamma | TensorId::BnBeta) {
                continue;
            }
            let gf = f.grads.tensor(id).unwrap().to_flat();
            let gq = q.grads.tensor(id).unwrap().to_flat();
            for (a, b) in gf.iter().zip(&gq) {
                num += (a - b) * (a - b);
                den += a * a;
            }
        }
        let drift = (num / den).sqrt();
        assert!(drift < 0.05, "gradient drift {drift}");
        // The frozen identity norm must not accumulate gradient.
        assert!(q.grads.bn.gamma.iter().all(|&g| g == 0.0));
        assert!(q.grads.bn.beta.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn high_precision_soft_skip_quantization_tracks_the_float_objective() {
        let (model, batch) = quant_fixture(true, 811, &[12, 9]);
        let specs = calibrated(&model, &batch, 16);
        let float_opts = ObjectiveOpts {
            bn: BnMode::Eval,
            skip: SkipStyle::Soft,
            budget_weight: 0.1,
            ..Default::default()
        };
        let quant_opts = ObjectiveOpts {
            quant: Some(&specs),
            ..float_opts
        };
        let f = objective(&model, &batch, &float_opts).unwrap();
        let q = objective(&model, &batch, &quant_opts).unwrap();
        let rel = (q.value - f.value).abs() / f.value.abs();
        assert!(rel < 1e-2, "objective drift {rel}");
    }

    #[test]
    fn quantized_training_requires_folded_frozen_batch_norm() {
        let (folded, batch) = quant_fixture(false, 400, &[8]);
        let specs = calibrated(&folded, &batch, 8);
        let train = ObjectiveOpts {
            bn: BnMode::Train,
            quant: Some(&specs),
            ..Default::default()
        };
        assert!(objective(&folded, &batch, &train).is_err());
        let eval = ObjectiveOpts {
            bn: BnMode::Eval,
            quant: Some(&specs),
            ..Default::default()
        };
        let raw = EnhancerModel::init(tiny_arch(), 400).unwrap();
        assert!(objective(&raw, &batch, &eval).is_err());
        assert!(objective(&folded, &batch, &eval).is_ok());
    }

    #[test]
    fn quantized_penalty_is_the_masked_sum_of_snapped_group_norms() {
        let (model, batch) = quant_fixture(true, 355, &[9]);
        let specs = calibrated(&model, &batch, 8);
        let set = GroupSet::for_arch(&model.arch);
        let cover = set.cover_map();
        let state = PruneState::new(&set, 1e-9, 40.0);
        let opts = ObjectiveOpts {
            bn: BnMode::Eval,
            prune: Some(PruneOpts {
                set: &set,
                cover: &cover,
                state: &state,
                mode: PruneMode::Hard,
            }),
            skip: SkipStyle::Hard,
            budget_weight: 0.0,
            quant: Some(&specs),
        };
        let obj = objective(&model, &batch, &opts).unwrap();
        // Direct summation: every gate is open at the initial thresholds,
        // and the norms are taken over the snapped weights.
        let masks = eval_masks(&model, &set, &state, PruneMode::Hard);
        assert!(masks.iter().all(|&r| r == 1.0));
        let (q_raw, _) = fake_quant_weights(&model, &specs).unwrap();
        let mut expected = 0.0;
        for (g, &r) in set.groups.iter().zip(&masks) {
            let mut ss = 0.0;
            for &(id, flat) in g.unique_coords() {
                let w = q_raw.tensor(id).unwrap().to_flat()[flat];
                ss += w * w;
            }
            expected += r * ss.sqrt();
        }
        expected *= state.lambda;
        assert!(
            (obj.penalty_term - expected).abs() <= 1e-12 * expected.abs(),
            "penalty {} vs direct sum {}",
            obj.penalty_term,
            expected
        );
    }

    #[test]
    fn quantized_streaming_masks_live_on_the_mask_grid_and_match_training() {
        let (model, batch) = quant_fixture(true, 622, &[17]);
        let specs = calibrated(&model, &batch, 8);
        let (masks, trace) = quant_mask_frames(&model, &specs, &batch[0].noisy).unwrap();
        assert_eq!(masks.dim(), (model.arch.n_mel, 17));
        assert_eq!(trace.len(), 17);
        assert!(trace[0], "the first frame always updates");
        for &v in masks.iter() {
            assert_eq!(v.to_bits(), specs.act.mask.fake_quant(v).to_bits());
        }
        let (m2, t2) = quant_mask_frames(&model, &specs, &batch[0].noisy).unwrap();
        assert_eq!(trace, t2);
        assert!(masks
            .iter()
            .zip(m2.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        // The training graph scores exactly these masks: same loss, same
        // hold pattern.
        let opts = ObjectiveOpts {
            bn: BnMode::Eval,
            quant: Some(&specs),
            ..Default::default()
        };
        let obj = objective(&model, &batch, &opts).unwrap();
        let spectral = model.mel.transpose(&masks).unwrap();
        let (loss, _) = psa_masked_loss_grad(&batch[0].clean, &batch[0].noisy, &spectral).unwrap();
        assert_eq!(obj.data_term.to_bits(), loss.to_bits());
        let held = trace.iter().filter(|&&u| !u).count();
        assert_abs_diff_eq!(obj.skip_rate, held as f64 / 17.0, epsilon = 1e-15);
    }

    #[test]
    fn unquantized_objective_is_unchanged_by_the_quant_feature() {
        let (model, batch) = quant_fixture(false, 515, &[7, 6]);
        let base = ObjectiveOpts {
            bn: BnMode::Eval,
            ..Default::default()
        };
        let explicit = ObjectiveOpts {
            bn: BnMode::Eval,
            quant: None,
            ..Default::default()
        };
        let a = objective(&model, &batch, &base).unwrap();
        let b = objective(&model, &batch, &explicit).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }
}
