//! Quantized-training support: batch-norm folding, activation-range
//! calibration, and the per-tensor weight grids recomputed every step.
//!
//! The flow is: fold the batch norm into fc1, stream a calibration set
//! through the float model to freeze per-site activation grids, then train
//! with fake-quantized weights and activations before exporting integers.

use ndarray::{Array1, Array2, Axis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::enhancer::EnhancerModel;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, LstmState};
use crate::skip::{gate_decision, SkipRuntime, CONTEXT_DECAY};

use super::{fake_to_step, Calibrator, QuantSpec};

/// Bit widths per tensor class and the calibration EMA decay.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QatConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Width of the mask path (output mask, gate probability, context EMA).
    pub mask_bits: u32,
    pub calib_decay: f64,
}

impl Default for QatConfig {
    fn default() -> Self {
        Self {
            weight_bits: 8,
            act_bits: 8,
            mask_bits: 16,
            calib_decay: 0.99,
        }
    }
}

/// Frozen activation grids, one per requantization site of the network.
/// All steps are powers of two (see the quant module for why).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActGrids {
    /// Compressed mel features (the network input).
    pub feat: QuantSpec,
    /// Stacked gate pre-activations, layer 1.
    pub pre1: QuantSpec,
    pub c1: QuantSpec,
    pub h1: QuantSpec,
    /// Stacked gate pre-activations, layer 2.
    pub pre2: QuantSpec,
    pub c2: QuantSpec,
    pub h2: QuantSpec,
    /// fc1 pre-activation; its ReLU output lives on the same grid.
    pub fc1_pre: QuantSpec,
    pub fc2_pre: QuantSpec,
    /// Sigmoid gate outputs (fixed grid).
    pub sig: QuantSpec,
    /// Tanh outputs (fixed grid).
    pub tanh: QuantSpec,
    /// Output mel mask (fixed unit grid).
    pub mask: QuantSpec,
}

/// Grids for the skip controller's extra dataflow.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipGrids {
    /// Context EMA domain: shared by the projection output and the EMA
    /// state so the EMA update is a single rounded step on one grid.
    pub cx: QuantSpec,
    /// Coarser context grid the mask head consumes.
    pub cx_head: QuantSpec,
    /// Gate pre-activation (scalar per frame).
    pub gate_pre: QuantSpec,
    /// Gate probability domain (fixed unit grid).
    pub gate: QuantSpec,
}

/// Everything the quantized forward pass needs besides the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QatSpecs {
    pub act: ActGrids,
    pub skip: Option<SkipGrids>,
    pub weight_bits: u32,
}

/// Fold the batch-norm inference affine into fc1 and reset the layer to an
/// exact identity: `fc1(bn(x)) = (W·diag(a))x + (W b + bias)`. Idempotent.
pub fn fold_bn(model: &mut EnhancerModel) -> Result<()> {
    let (a, b) = model.bn.affine();
    if a.len() != model.fc1.in_dim() {
        return Err(Error::Shape(format!(
            "batchnorm width {} vs fc1 input {}",
            a.len(),
            model.fc1.in_dim()
        )));
    }
    let shift = model.fc1.w.dot(&b);
    for (j, mut col) in model.fc1.w.axis_iter_mut(Axis(1)).enumerate() {
        col *= a[j];
    }
    model.fc1.b += &shift;
    let n = model.bn.features();
    // gamma / sqrt(var + eps) divides two identical f64 values, so the
    // eval-mode affine becomes scale 1, shift 0 bitwise.
    model.bn.gamma = Array1::from_elem(n, (1.0 + model.bn.eps).sqrt());
    model.bn.beta = Array1::zeros(n);
    model.bn.running_mean = Array1::zeros(n);
    model.bn.running_var = Array1::ones(n);
    debug_assert!(model.bn.is_identity());
    Ok(())
}

/// Running (min, max) over one utterance.
#[derive(Clone, Copy)]
struct Range {
    lo: f64,
    hi: f64,
}

impl Range {
    fn new() -> Self {
        Self {
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
        }
    }

    fn add(&mut self, v: f64) {
        self.lo = self.lo.min(v);
        self.hi = self.hi.max(v);
    }

    fn add_all<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for &v in vs {
            self.add(v);
        }
    }

    fn fold_into(&self, cal: &mut Calibrator) {
        if self.lo <= self.hi {
            cal.observe([self.lo, self.hi]);
        }
    }
}

fn po2_from(cal: &Calibrator, bits: u32, site: &str) -> Result<QuantSpec> {
    if !cal.is_calibrated() {
        return Err(Error::Quant(format!("site {site} observed no data")));
    }
    QuantSpec::power_of_two(cal.lo, cal.hi, bits)
}

/// Sigmoid/sigmoid/sigmoid/tanh over stacked gate pre-activations, then the
/// cell update. Returns the new state.
fn lstm_float_step(pre: &Array1<f64>, c_prev: &Array1<f64>, hidden: usize) -> LstmState {
    let mut c = Array1::zeros(hidden);
    let mut h = Array1::zeros(hidden);
    for j in 0..hidden {
        let i = sigmoid(pre[j]);
        let r = sigmoid(pre[hidden + j]);
        let o = sigmoid(pre[2 * hidden + j]);
        let u = pre[3 * hidden + j].tanh();
        c[j] = r * c_prev[j] + i * u;
        h[j] = o * c[j].tanh();
    }
    LstmState { h, c }
}

/// Stream a calibration set through the float model and freeze the
/// activation grids from EMA min/max ranges (one observation per
/// utterance). Requires the batch norm to be folded first, because the
/// grids describe the folded network the integer engine will run.
pub fn calibrate(
    model: &EnhancerModel,
    spectra: &[Array2<Complex64>],
    cfg: &QatConfig,
) -> Result<QatSpecs> {
    if !model.bn.is_identity() {
        return Err(Error::Quant(
            "fold the batch norm before calibrating activation ranges".into(),
        ));
    }
    if spectra.is_empty() {
        return Err(Error::Quant("calibration needs at least one utterance".into()));
    }
    let h1n = model.arch.hidden1;
    let h2n = model.arch.hidden2;
    let d = cfg.calib_decay;
    let mut cal_feat = Calibrator::new(d);
    let mut cal_pre1 = Calibrator::new(d);
    let mut cal_c1 = Calibrator::new(d);
    let mut cal_h1 = Calibrator::new(d);
    let mut cal_pre2 = Calibrator::new(d);
    let mut cal_c2 = Calibrator::new(d);
    let mut cal_h2 = Calibrator::new(d);
    let mut cal_fc1 = Calibrator::new(d);
    let mut cal_fc2 = Calibrator::new(d);
    let mut cal_cx = Calibrator::new(d);
    let mut cal_gate = Calibrator::new(d);

    for spec in spectra {
        let mut s1 = LstmState::zeros(h1n);
        let mut s2 = LstmState::zeros(h2n);
        let mut rt = model.skip.as_ref().map(|p| SkipRuntime::new(p.b_c.len()));
        let mut r_feat = Range::new();
        let mut r_pre1 = Range::new();
        let mut r_c1 = Range::new();
        let mut r_h1 = Range::new();
        let mut r_pre2 = Range::new();
        let mut r_c2 = Range::new();
        let mut r_h2 = Range::new();
        let mut r_fc1 = Range::new();
        let mut r_fc2 = Range::new();
        let mut r_cx = Range::new();
        let mut r_gate = Range::new();

        for t in 0..spec.ncols() {
            let feat = model.features(&spec.column(t))?;
            r_feat.add_all(feat.iter());
            let update = match (&model.skip, &mut rt) {
                (Some(p), Some(rt)) => {
                    let proj = p.project_context(&feat.view())?;
                    r_cx.add_all(proj.iter());
                    rt.c_x = CONTEXT_DECAY * &rt.c_x + (1.0 - CONTEXT_DECAY) * &proj;
                    r_cx.add_all(rt.c_x.iter());
                    let g = gate_decision(rt.g_tilde);
                    if g {
                        let pre = p.gate_preact(&s2.c.view())?;
                        r_gate.add(pre);
                        rt.delta_cached = sigmoid(pre);
                        rt.g_tilde = rt.delta_cached;
                    } else {
                        rt.g_tilde += rt.delta_cached.min(1.0 - rt.g_tilde);
                    }
                    g
                }
                _ => true,
            };
            if update {
                let pre1 =
                    model.lstm1.w_x.dot(&feat) + model.lstm1.w_h.dot(&s1.h) + &model.lstm1.b;
                r_pre1.add_all(pre1.iter());
                s1 = lstm_float_step(&pre1, &s1.c, h1n);
                r_c1.add_all(s1.c.iter());
                r_h1.add_all(s1.h.iter());
                let pre2 =
                    model.lstm2.w_x.dot(&s1.h) + model.lstm2.w_h.dot(&s2.h) + &model.lstm2.b;
                r_pre2.add_all(pre2.iter());
                s2 = lstm_float_step(&pre2, &s2.c, h2n);
                r_c2.add_all(s2.c.iter());
                r_h2.add_all(s2.h.iter());
            }
            let z = match &rt {
                Some(rt) => ndarray::concatenate(Axis(0), &[s2.h.view(), rt.c_x.view()])
                    .expect("concat widths"),
                None => s2.h.clone(),
            };
            let fc1_pre = model.fc1.w.dot(&z) + &model.fc1.b;
            r_fc1.add_all(fc1_pre.iter());
            let a1 = fc1_pre.mapv(|v| model.fc1.act.apply(v));
            let fc2_pre = model.fc2.w.dot(&a1) + &model.fc2.b;
            r_fc2.add_all(fc2_pre.iter());
        }

        r_feat.fold_into(&mut cal_feat);
        r_pre1.fold_into(&mut cal_pre1);
        r_c1.fold_into(&mut cal_c1);
        r_h1.fold_into(&mut cal_h1);
        r_pre2.fold_into(&mut cal_pre2);
        r_c2.fold_into(&mut cal_c2);
        r_h2.fold_into(&mut cal_h2);
        r_fc1.fold_into(&mut cal_fc1);
        r_fc2.fold_into(&mut cal_fc2);
        r_cx.fold_into(&mut cal_cx);
        r_gate.fold_into(&mut cal_gate);
    }

    let act = ActGrids {
        feat: po2_from(&cal_feat, cfg.act_bits, "feat")?,
        pre1: po2_from(&cal_pre1, cfg.act_bits, "pre1")?,
        c1: po2_from(&cal_c1, cfg.act_bits, "c1")?,
        h1: po2_from(&cal_h1, cfg.act_bits, "h1")?,
        pre2: po2_from(&cal_pre2, cfg.act_bits, "pre2")?,
        c2: po2_from(&cal_c2, cfg.act_bits, "c2")?,
        h2: po2_from(&cal_h2, cfg.act_bits, "h2")?,
        fc1_pre: po2_from(&cal_fc1, cfg.act_bits, "fc1_pre")?,
        fc2_pre: po2_from(&cal_fc2, cfg.act_bits, "fc2_pre")?,
        sig: QuantSpec::sigmoid_grid(cfg.act_bits)?,
        tanh: QuantSpec::tanh_grid(cfg.act_bits)?,
        mask: QuantSpec::unit_grid(cfg.mask_bits)?,
    };
    let skip = match &model.skip {
        Some(_) => Some(SkipGrids {
            cx: po2_from(&cal_cx, cfg.mask_bits, "cx")?,
            cx_head: po2_from(&cal_cx, cfg.act_bits, "cx")?,
            gate_pre: po2_from(&cal_gate, cfg.act_bits, "gate_pre")?,
            gate: QuantSpec::unit_grid(cfg.mask_bits)?,
        }),
        None => None,
    };
    Ok(QatSpecs {
        act,
        skip,
        weight_bits: cfg.weight_bits,
    })
}

/// Per-tensor weight grids: symmetric power-of-two ranges from each
/// tensor's current max-abs. Recomputed every training step and once more
/// at export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightSpecs {
    pub lstm1_wx: QuantSpec,
    pub lstm1_wh: QuantSpec,
    pub lstm2_wx: QuantSpec,
    pub lstm2_wh: QuantSpec,
    pub fc1_w: QuantSpec,
    pub fc2_w: QuantSpec,
    pub skip_wc: Option<QuantSpec>,
    pub skip_wb: Option<QuantSpec>,
}

fn max_abs<'a>(vs: impl IntoIterator<Item = &'a f64>) -> f64 {
    vs.into_iter().fold(0.0f64, |m, &v| m.max(v.abs()))
}

impl WeightSpecs {
    pub fn from_model(model: &EnhancerModel, bits: u32) -> Result<WeightSpecs> {
        Ok(WeightSpecs {
            lstm1_wx: QuantSpec::symmetric(max_abs(&model.lstm1.w_x), bits)?,
            lstm1_wh: QuantSpec::symmetric(max_abs(&model.lstm1.w_h), bits)?,
            lstm2_wx: QuantSpec::symmetric(max_abs(&model.lstm2.w_x), bits)?,
            lstm2_wh: QuantSpec::symmetric(max_abs(&model.lstm2.w_h), bits)?,
            fc1_w: QuantSpec::symmetric(max_abs(&model.fc1.w), bits)?,
            fc2_w: QuantSpec::symmetric(max_abs(&model.fc2.w), bits)?,
            skip_wc: match &model.skip {
                Some(p) => Some(QuantSpec::symmetric(max_abs(&p.w_c), bits)?),
                None => None,
            },
            skip_wb: match &model.skip {
                Some(p) => Some(QuantSpec::symmetric(max_abs(&p.w_b), bits)?),
                None => None,
            },
        })
    }
}

/// Grid steps for bias vectors. Each bias is added into an integer
/// accumulator, so it lives on that accumulator's grid: the product of the
/// weight and input steps, or the finer of the two when a layer sums two
/// matvecs over different grids.
#[derive(Debug, Clone, Copy)]
pub struct BiasSteps {
    pub lstm1: f64,
    pub lstm2: f64,
    pub fc1: f64,
    pub fc2: f64,
    pub skip_bc: Option<f64>,
    pub skip_bb: Option<f64>,
}

pub fn bias_steps(ws: &WeightSpecs, specs: &QatSpecs) -> BiasSteps {
    let a = &specs.act;
    let fc1_h2 = ws.fc1_w.step * a.h2.step;
    BiasSteps {
        lstm1: (ws.lstm1_wx.step * a.feat.step).min(ws.lstm1_wh.step * a.h1.step),
        lstm2: (ws.lstm2_wx.step * a.h1.step).min(ws.lstm2_wh.step * a.h2.step),
        fc1: match &specs.skip {
            Some(sg) => fc1_h2.min(ws.fc1_w.step * sg.cx_head.step),
            None => fc1_h2,
        },
        fc2: ws.fc2_w.step * a.fc1_pre.step,
        skip_bc: ws
            .skip_wc
            .as_ref()
            .map(|wc| wc.step * a.feat.step),
        skip_bb: ws
            .skip_wb
            .as_ref()
            .map(|wb| wb.step * a.c2.step),
    }
}

/// Snap every parameter onto its quantization grid: weights onto fresh
/// per-tensor grids, biases onto the derived accumulator grids. The batch
/// norm is left untouched (it must already be the folded identity).
/// Returns the snapped model and the weight grids used.
pub fn fake_quant_weights(
    model: &EnhancerModel,
    specs: &QatSpecs,
) -> Result<(EnhancerModel, WeightSpecs)> {
    if model.skip.is_some() != specs.skip.is_some() {
        return Err(Error::Quant(
            "model and quantization grids disagree about the skip controller".into(),
        ));
    }
    let ws = WeightSpecs::from_model(model, specs.weight_bits)?;
    let bs = bias_steps(&ws, specs);
    let mut q = model.clone();
    q.lstm1.w_x.mapv_inplace(|v| ws.lstm1_wx.fake_quant(v));
    q.lstm1.w_h.mapv_inplace(|v| ws.lstm1_wh.fake_quant(v));
    q.lstm1.b.mapv_inplace(|v| fake_to_step(v, bs.lstm1));
    q.lstm2.w_x.mapv_inplace(|v| ws.lstm2_wx.fake_quant(v));
    q.lstm2.w_h.mapv_inplace(|v| ws.lstm2_wh.fake_quant(v));
    q.lstm2.b.mapv_inplace(|v| fake_to_step(v, bs.lstm2));
    q.fc1.w.mapv_inplace(|v| ws.fc1_w.fake_quant(v));
    q.fc1.b.mapv_inplace(|v| fake_to_step(v, bs.fc1));
    q.fc2.w.mapv_inplace(|v| ws.fc2_w.fake_quant(v));
    q.fc2.b.mapv_inplace(|v| fake_to_step(v, bs.fc2));
    if let Some(p) = &mut q.skip {
        let wc = ws.skip_wc.as_ref().expect("skip grids present");
        let wb = ws.skip_wb.as_ref().expect("skip grids present");
        let bc = bs.skip_bc.expect("skip grids present");
        let bb = bs.skip_bb.expect("skip grids present");
        p.w_c.mapv_inplace(|v| wc.fake_quant(v));
        p.b_c.mapv_inplace(|v| fake_to_step(v, bc));
        p.w_b.mapv_inplace(|v| wb.fake_quant(v));
        p.b_b = fake_to_step(p.b_b, bb);
    }
    Ok((q, ws))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{FrameConfig, Spectrogram, WindowKind};
    use crate::enhancer::ArchConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn tiny_arch(skip: bool) -> ArchConfig {
        ArchConfig {
            n_mel: 6,
            hidden1: 8,
            hidden2: 8,
            fc1_units: 5,
            dim_c: if skip { Some(4) } else { None },
            frame: FrameConfig {
                frame_len: 32,
                hop_len: 16,
                sample_rate: 16_000,
                window: WindowKind::SqrtHann,
            },
        }
    }

    fn tiny_model(seed: u64, skip: bool) -> EnhancerModel {
        EnhancerModel::init(tiny_arch(skip), seed).unwrap()
    }

    fn random_spectrum(seed: u64, bins: usize, frames: usize) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((bins, frames), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn as_spectrogram(data: Array2<Complex64>, frame: FrameConfig) -> Spectrogram {
        let len_hint = data.ncols() * frame.hop_len;
        Spectrogram {
            data,
            config: frame,
            len_hint,
        }
    }

    fn scramble_bn(model: &mut EnhancerModel, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.bn.gamma.mapv_inplace(|_| rng.gen_range(0.5..2.0));
        model.bn.beta.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        model.bn.running_mean.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        model.bn.running_var.mapv_inplace(|_| rng.gen_range(0.2..3.0));
    }

    #[test]
    fn folding_preserves_streaming_outputs() {
        for skip in [false, true] {
            let mut model = tiny_model(11, skip);
            scramble_bn(&mut model, 12);
            let bins = model.arch.frame.bins();
            let spec = as_spectrogram(random_spectrum(13, bins, 9), model.arch.frame);
            let (before, _, _) = model.mask_frames(&spec).unwrap();
            fold_bn(&mut model).unwrap();
            let (after, _, _) = model.mask_frames(&spec).unwrap();
            for (a, b) in before.iter().zip(after.iter()) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-10);
            }
            assert!(model.bn.is_identity());
        }
    }

    #[test]
    fn folding_is_idempotent() {
        let mut model = tiny_model(21, true);
        scramble_bn(&mut model, 22);
        fold_bn(&mut model).unwrap();
        let w = model.fc1.w.clone();
        let b = model.fc1.b.clone();
        fold_bn(&mut model).unwrap();
        assert_eq!(model.fc1.w, w);
        assert_eq!(model.fc1.b, b);
    }

    #[test]
    fn unfolded_model_cannot_calibrate() {
        let mut model = tiny_model(31, false);
        scramble_bn(&mut model, 32);
        let bins = model.arch.frame.bins();
        let err = calibrate(&model, &[random_spectrum(33, bins, 4)], &QatConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn feature_grid_matches_hand_rolled_ema_range() {
        let mut model = tiny_model(41, false);
        fold_bn(&mut model).unwrap();
        let bins = model.arch.frame.bins();
        let utts: Vec<Array2<Complex64>> =
            (0..3).map(|i| random_spectrum(50 + i, bins, 6)).collect();
        let cfg = QatConfig::default();
        let specs = calibrate(&model, &utts, &cfg).unwrap();

        let mut cal = Calibrator::new(cfg.calib_decay);
        for utt in &utts {
            let mut r = Range::new();
            for t in 0..utt.ncols() {
                let feat = model.features(&utt.column(t)).unwrap();
                r.add_all(feat.iter());
            }
            cal.observe([r.lo, r.hi]);
        }
        let want = QuantSpec::power_of_two(cal.lo, cal.hi, cfg.act_bits).unwrap();
        assert_eq!(specs.act.feat, want);
        assert!(specs.skip.is_none());
    }

    #[test]
    fn skip_model_gets_skip_grids() {
        let mut model = tiny_model(61, true);
        fold_bn(&mut model).unwrap();
        let bins = model.arch.frame.bins();
        let specs = calibrate(
            &model,
            &[random_spectrum(62, bins, 12), random_spectrum(63, bins, 12)],
            &QatConfig::default(),
        )
        .unwrap();
        let sg = specs.skip.expect("skip grids");
        assert!(sg.cx.has_power_step() && sg.cx_head.has_power_step());
        assert_eq!(sg.cx.bits, 16);
        assert_eq!(sg.cx_head.bits, 8);
        // Both context grids anchor at the same calibrated lower edge; the
        // coarse one may round further down, but by less than its own step.
        assert!((sg.cx.alpha - sg.cx_head.alpha).abs() < sg.cx_head.step);
        assert_eq!(sg.gate.bits, 16);
    }

    #[test]
    fn weight_grids_never_clip_their_tensor() {
        let mut model = tiny_model(71, true);
        fold_bn(&mut model).unwrap();
        let ws = WeightSpecs::from_model(&model, 8).unwrap();
        for (w, spec) in [
            (model.lstm1.w_x.iter(), &ws.lstm1_wx),
            (model.lstm1.w_h.iter(), &ws.lstm1_wh),
            (model.fc1.w.iter(), &ws.fc1_w),
            (model.fc2.w.iter(), &ws.fc2_w),
        ] {
            for &v in w {
                assert!(
                    (spec.fake_quant(v) - v).abs() <= spec.step / 2.0 + 1e-15,
                    "value {v} clipped by grid [{}, {}]",
                    spec.alpha,
                    spec.beta
                );
            }
        }
    }

    #[test]
    fn weight_snapping_is_bitwise_idempotent() {
        let mut model = tiny_model(81, true);
        fold_bn(&mut model).unwrap();
        let bins = model.arch.frame.bins();
        let specs = calibrate(&model, &[random_spectrum(82, bins, 8)], &QatConfig::default())
            .unwrap();
        let (q1, _) = fake_quant_weights(&model, &specs).unwrap();
        let (q2, _) = fake_quant_weights(&q1, &specs).unwrap();
        assert_eq!(q1.lstm1.w_x, q2.lstm1.w_x);
        assert_eq!(q1.lstm2.w_h, q2.lstm2.w_h);
        assert_eq!(q1.fc1.w, q2.fc1.w);
        assert_eq!(q1.fc1.b, q2.fc1.b);
        assert_eq!(q1.fc2.b, q2.fc2.b);
        let (p1, p2) = (q1.skip.as_ref().unwrap(), q2.skip.as_ref().unwrap());
        assert_eq!(p1.w_c, p2.w_c);
        assert_eq!(p1.b_b, p2.b_b);
    }

    #[test]
    fn bias_steps_are_accumulator_grid_products() {
        let mut model = tiny_model(91, true);
        fold_bn(&mut model).unwrap();
        let bins = model.arch.frame.bins();
        let specs = calibrate(&model, &[random_spectrum(92, bins, 8)], &QatConfig::default())
            .unwrap();
        let ws = WeightSpecs::from_model(&model, specs.weight_bits).unwrap();
        let bs = bias_steps(&ws, &specs);
        let a = &specs.act;
        assert_eq!(
            bs.lstm1,
            (ws.lstm1_wx.step * a.feat.step).min(ws.lstm1_wh.step * a.h1.step)
        );
        let sg = specs.skip.as_ref().unwrap();
        assert_eq!(
            bs.fc1,
            (ws.fc1_w.step * a.h2.step).min(ws.fc1_w.step * sg.cx_head.step)
        );
        assert_eq!(bs.skip_bb.unwrap(), ws.skip_wb.unwrap().step * a.c2.step);
        // Power-of-two products stay powers of two.
        assert_eq!(bs.lstm2.log2().fract(), 0.0);
        assert_eq!(bs.fc2.log2().fract(), 0.0);
    }

    #[test]
    fn zeroed_group_stays_exactly_zero_after_snapping() {
        let mut model = tiny_model(101, false);
        fold_bn(&mut model).unwrap();
        // Zero out one hidden unit of lstm2 by hand, the way a pruning mask
        // would, and check the quantizer maps those exact zeros to zeros.
        let h = model.arch.hidden2;
        for g in 0..4 {
            model.lstm2.w_x.row_mut(g * h + 3).fill(0.0);
            model.lstm2.w_h.row_mut(g * h + 3).fill(0.0);
            model.lstm2.w_h.column_mut(3).fill(0.0);
            model.lstm2.b[g * h + 3] = 0.0;
        }
        model.fc1.w.column_mut(3).fill(0.0);
        let bins = model.arch.frame.bins();
        let specs = calibrate(&model, &[random_spectrum(102, bins, 8)], &QatConfig::default())
            .unwrap();
        let (q, _) = fake_quant_weights(&model, &specs).unwrap();
        for g in 0..4 {
            assert!(q.lstm2.w_x.row(g * h + 3).iter().all(|&v| v == 0.0));
            assert!(q.lstm2.w_h.row(g * h + 3).iter().all(|&v| v == 0.0));
            assert_eq!(q.lstm2.b[g * h + 3], 0.0);
        }
        assert!(q.lstm2.w_h.column(3).iter().all(|&v| v == 0.0));
        assert!(q.fc1.w.column(3).iter().all(|&v| v == 0.0));
    }
}
