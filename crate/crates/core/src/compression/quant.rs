//! Power-of-two quantization grids and fixed-point requantization.
//!
//! The integer inference engine and the quantized training graph must agree
//! bitwise. That only works if every rescale between grids is exact in both
//! domains, so all grids produced here use power-of-two steps: products and
//! sums of on-grid values are then exact dyadic rationals that `f64` holds
//! without rounding, and a requantization becomes an integer shift with
//! half-to-even rounding that `f64::round_ties_even` reproduces exactly.
//! The only non-dyadic scale factors in the whole pipeline are the two EMA
//! coefficients; those run through [`RequantParams`] on small integer
//! differences in both domains.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::QuantSpec;

impl QuantSpec {
    /// Smallest power-of-two step grid covering `[lo, hi] ∪ {0}`.
    ///
    /// The zero point is an exact integer code and `step` is a power of two,
    /// so `(beta - alpha) / (2^bits - 1) == step` holds bitwise.
    pub fn power_of_two(lo: f64, hi: f64, bits: u32) -> Result<QuantSpec> {
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Quant(format!("non-finite range ({lo}, {hi})")));
        }
        if lo > hi {
            return Err(Error::Quant(format!("inverted range ({lo}, {hi})")));
        }
        if !(2..=16).contains(&bits) {
            return Err(Error::Quant(format!("unsupported code width {bits}")));
        }
        let lo = lo.min(0.0);
        let hi = hi.max(0.0);
        let max_code = (1i64 << bits) - 1;
        if lo == 0.0 && hi == 0.0 {
            // Dead site (all observations zero): any grid through zero works.
            return Ok(Self::from_power_step(0.007_812_5, 0, bits));
        }
        let mut exp: i32 = -60;
        while exp <= 100 {
            let step = (exp as f64).exp2();
            let zero = (-lo / step).ceil() as i64;
            if zero <= max_code && (max_code - zero) as f64 * step >= hi {
                return Ok(Self::from_power_step(step, zero, bits));
            }
            exp += 1;
        }
        Err(Error::Quant(format!("range ({lo}, {hi}) too wide to cover")))
    }

    fn from_power_step(step: f64, zero_point: i64, bits: u32) -> QuantSpec {
        let max_code = (1i64 << bits) - 1;
        let alpha = -(zero_point as f64) * step;
        QuantSpec {
            alpha,
            beta: alpha + max_code as f64 * step,
            bits,
            step,
            zero_point,
        }
    }

    /// Power-of-two grid for a roughly symmetric tensor: covers
    /// `[-max_abs, max_abs]` with zero exact.
    pub fn symmetric(max_abs: f64, bits: u32) -> Result<QuantSpec> {
        if !max_abs.is_finite() || max_abs < 0.0 {
            return Err(Error::Quant(format!("bad magnitude bound {max_abs}")));
        }
        Self::power_of_two(-max_abs, max_abs, bits)
    }

    /// Fixed grid for sigmoid outputs at the given width: step
    /// 2^-(bits-1), zero at code 0, so both 0.0 and 1.0 are exact grid
    /// points (1.0 at code 2^(bits-1)).
    pub fn sigmoid_grid(bits: u32) -> Result<QuantSpec> {
        if !(2..=16).contains(&bits) {
            return Err(Error::Quant(format!("unsupported code width {bits}")));
        }
        Ok(Self::from_power_step((-(bits as f64) + 1.0).exp2(), 0, bits))
    }

    /// Fixed grid for tanh outputs: step 2^-(bits-2), zero at code
    /// 2^(bits-2), so -1.0, 0.0 and +1.0 are exact grid points.
    pub fn tanh_grid(bits: u32) -> Result<QuantSpec> {
        if !(2..=16).contains(&bits) {
            return Err(Error::Quant(format!("unsupported code width {bits}")));
        }
        Ok(Self::from_power_step(
            (-(bits as f64) + 2.0).exp2(),
            1 << (bits - 2),
            bits,
        ))
    }

    /// Fixed grid for the unit interval: step 2^-bits, zero at code 0.
    /// 1.0 itself is not representable and clamps to the top code; the
    /// resulting error is one grid step at the top of the range.
    pub fn unit_grid(bits: u32) -> Result<QuantSpec> {
        if !(2..=16).contains(&bits) {
            return Err(Error::Quant(format!("unsupported code width {bits}")));
        }
        Ok(Self::from_power_step((-(bits as f64)).exp2(), 0, bits))
    }

    /// [`Self::sigmoid_grid`] at 8 bits.
    pub fn sigmoid8() -> QuantSpec {
        Self::sigmoid_grid(8).expect("8 bits is valid")
    }

    /// [`Self::tanh_grid`] at 8 bits.
    pub fn tanh8() -> QuantSpec {
        Self::tanh_grid(8).expect("8 bits is valid")
    }

    /// [`Self::unit_grid`] at 16 bits.
    pub fn unit16() -> QuantSpec {
        Self::unit_grid(16).expect("16 bits is valid")
    }

    /// 32-bit spec for accumulator-domain values (biases). Codes are offset
    /// by 2³¹ so the stored signed value `code - 2³¹` spans exactly `i32`.
    pub fn accumulator(step: f64) -> Result<QuantSpec> {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::Quant(format!("bad accumulator step {step}")));
        }
        let zero_point = 1i64 << 31;
        let max_code = (1i64 << 32) - 1;
        let alpha = -(zero_point as f64) * step;
        Ok(QuantSpec {
            alpha,
            beta: alpha + max_code as f64 * step,
            bits: 32,
            step,
            zero_point,
        })
    }

    /// Whether the grid step is an exact power of two.
    pub fn has_power_step(&self) -> bool {
        self.step > 0.0 && self.step.log2().fract() == 0.0
    }
}

/// Snap a value onto an unbounded grid of the given step (no clipping).
/// Used for bias values, which live on the fine accumulator grid where the
/// representable range is far wider than any trained bias.
pub fn fake_to_step(x: f64, step: f64) -> f64 {
    (x / step).round_ties_even() * step
}

/// `round(x / 2^shift)` with ties to even, exact in integer arithmetic.
/// Matches `f64::round_ties_even` on the same rational number.
pub fn round_half_even_shift(x: i64, shift: u32) -> i64 {
    if shift == 0 {
        return x;
    }
    debug_assert!(shift <= 62);
    let floor = x >> shift;
    let rem = x - (floor << shift);
    let half = 1i64 << (shift - 1);
    if rem > half {
        floor + 1
    } else if rem < half {
        floor
    } else {
        floor + (floor & 1)
    }
}

/// Requantize an integer accumulator onto a coarser grid whose step is
/// `2^k` times the accumulator's step: `clamp(round((m + zero·2^k) / 2^k))`
/// with ties to even. `m` counts accumulator steps with the zero offset
/// already removed; the result is a code on the target grid.
///
/// Adding the zero offset *before* rounding keeps the tie-break parity
/// identical to quantizing the real value in `f64`, which is what makes the
/// integer engine and the float training graph agree bitwise.
pub fn requant_po2_code(m: i64, k: u32, zero_point: i64, max_code: i64) -> i64 {
    debug_assert!(k <= 40, "grid ratio 2^{k} out of range");
    round_half_even_shift(m + (zero_point << k), k).clamp(0, max_code)
}

/// Fixed-point multiplier approximating a positive real rescale factor:
/// `multiplier / 2^shift ≈ ratio` with the multiplier normalized into
/// `[2^30, 2^31)`, giving at least 30 bits of relative accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantParams {
    pub multiplier: i32,
    pub shift: u32,
}

impl RequantParams {
    pub fn from_ratio(ratio: f64) -> Result<RequantParams> {
        if !(ratio.is_finite() && ratio > 0.0) {
            return Err(Error::Quant(format!("bad requant ratio {ratio}")));
        }
        let mut exp = ratio.log2().floor() as i32;
        let mut multiplier = (ratio * ((30 - exp) as f64).exp2()).round();
        // log2 rounding can land the first guess one octave off; renormalize.
        while multiplier >= (1i64 << 31) as f64 {
            exp += 1;
            multiplier = (ratio * ((30 - exp) as f64).exp2()).round();
        }
        while multiplier < (1i64 << 30) as f64 {
            exp -= 1;
            multiplier = (ratio * ((30 - exp) as f64).exp2()).round();
        }
        let shift = 30 - exp;
        if !(0..=62).contains(&shift) {
            return Err(Error::Quant(format!("requant ratio {ratio} out of range")));
        }
        Ok(RequantParams {
            multiplier: multiplier as i32,
            shift: shift as u32,
        })
    }

    /// The exact rational this approximates the ratio with.
    pub fn realized_ratio(&self) -> f64 {
        self.multiplier as f64 / (self.shift as f64).exp2()
    }

    /// `round(v · multiplier / 2^shift)` with ties to even.
    /// `|v|` must stay below 2³² so the product fits an `i64`.
    pub fn apply(&self, v: i64) -> i64 {
        debug_assert!(v.unsigned_abs() < 1 << 32);
        round_half_even_shift(v * self.multiplier as i64, self.shift)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn power_grid_identities_hold_bitwise() {
        for (lo, hi, bits) in [
            (-1.3, 0.7, 8),
            (-0.02, 5.9, 8),
            (0.0, 33.0, 12),
            (-7.1, -0.0, 8),
            (-0.4, 0.4, 4),
        ] {
            let spec = QuantSpec::power_of_two(lo, hi, bits).unwrap();
            assert!(spec.has_power_step(), "step {} not 2^k", spec.step);
            assert!(spec.alpha <= lo && spec.beta >= hi);
            assert_eq!(spec.alpha.to_bits(), (-(spec.zero_point as f64) * spec.step).to_bits());
            let rebuilt = (spec.beta - spec.alpha) / spec.max_code() as f64;
            assert_eq!(rebuilt.to_bits(), spec.step.to_bits());
            assert_eq!(spec.dequantize(spec.zero_point).to_bits(), 0.0f64.to_bits());
            assert_eq!(spec.quantize(0.0), spec.zero_point);
        }
    }

    #[test]
    fn power_grid_is_tightest_cover()  {
        // Halving the step must break coverage: the constructor returns the
        // finest power-of-two grid that spans the requested range.
        for (lo, hi) in [(-1.0, 1.0), (0.0, 1.0), (-3.7, 0.2), (-0.001, 0.9)] {
            let spec = QuantSpec::power_of_two(lo, hi, 8).unwrap();
            let finer = spec.step / 2.0;
            let zero = (-lo.min(0.0) / finer).ceil() as i64;
            let covers = zero <= 255 && (255 - zero) as f64 * finer >= hi.max(0.0);
            assert!(!covers, "({lo}, {hi}) admits finer step {finer}");
        }
    }

    #[test]
    fn fixed_grids_represent_their_landmarks_exactly() {
        let sig = QuantSpec::sigmoid8();
        assert_eq!(sig.fake_quant(0.0).to_bits(), 0.0f64.to_bits());
        assert_eq!(sig.fake_quant(1.0).to_bits(), 1.0f64.to_bits());
        assert_eq!(sig.fake_quant(0.5).to_bits(), 0.5f64.to_bits());
        assert_eq!(sig.quantize(1.0), 128);

        let th = QuantSpec::tanh8();
        assert_eq!(th.fake_quant(-1.0).to_bits(), (-1.0f64).to_bits());
        assert_eq!(th.fake_quant(0.0).to_bits(), 0.0f64.to_bits());
        assert_eq!(th.fake_quant(1.0).to_bits(), 1.0f64.to_bits());
        assert_eq!(th.quantize(-1.0), 0);
        assert_eq!(th.quantize(1.0), 128);

        let u = QuantSpec::unit16();
        assert_eq!(u.quantize(0.5), 1 << 15);
        assert_eq!(u.quantize(1.0), 65_535); // clamps: 1.0 is off-grid
        assert_eq!(u.fake_quant(0.0).to_bits(), 0.0f64.to_bits());
        assert!(u.beta < 1.0);
    }

    #[test]
    fn accumulator_spec_spans_signed_32_bit_codes() {
        let spec = QuantSpec::accumulator(2.0f64.powi(-20)).unwrap();
        assert_eq!(spec.quantize(0.0), spec.zero_point);
        assert_eq!(spec.zero_point, 1 << 31);
        // A typical trained bias sits far inside the range and round-trips.
        let b = -3.141592653589793;
        let q = spec.quantize(b);
        assert!((spec.dequantize(q) - b).abs() <= spec.step / 2.0);
        let signed = q - spec.zero_point;
        assert!(signed >= i32::MIN as i64 && signed <= i32::MAX as i64);
    }

    #[test]
    fn bias_grid_snap_has_no_clipping() {
        let step = 2.0f64.powi(-14);
        let x = 123.456_789;
        let snapped = fake_to_step(x, step);
        assert!((snapped - x).abs() <= step / 2.0);
        assert_eq!((snapped / step).fract(), 0.0);
        // Far beyond any 8-bit range: still representable, not clipped.
        let huge = 1.0e6 + 0.3;
        assert!((fake_to_step(huge, step) - huge).abs() <= step / 2.0);
    }

    #[test]
    fn shift_rounding_tie_cases() {
        // x/2: -1.5 → -2, -0.5 → 0, 0.5 → 0, 1.5 → 2 (ties to even)
        assert_eq!(round_half_even_shift(-3, 1), -2);
        assert_eq!(round_half_even_shift(-1, 1), 0);
        assert_eq!(round_half_even_shift(1, 1), 0);
        assert_eq!(round_half_even_shift(3, 1), 2);
        assert_eq!(round_half_even_shift(6, 2), 2); // 1.5 → 2
        assert_eq!(round_half_even_shift(10, 2), 2); // 2.5 → 2
        assert_eq!(round_half_even_shift(-10, 2), -2); // -2.5 → -2
        assert_eq!(round_half_even_shift(7, 0), 7);
    }

    #[test]
    fn power_of_two_ratio_gets_exact_multiplier() {
        for e in -24i32..=8 {
            let rq = RequantParams::from_ratio((e as f64).exp2()).unwrap();
            assert_eq!(rq.multiplier, 1 << 30, "ratio 2^{e}");
            assert_eq!(rq.shift as i32, 30 - e);
        }
    }

    #[test]
    fn ema_coefficients_fit_the_fixed_point_form() {
        for ratio in [0.1, 0.85, 0.9, 0.15] {
            let rq = RequantParams::from_ratio(ratio).unwrap();
            assert!((1 << 30..1i64 << 31).contains(&(rq.multiplier as i64)));
            let rel = (rq.realized_ratio() - ratio).abs() / ratio;
            assert!(rel <= 2.0f64.powi(-30), "{ratio}: rel err {rel}");
        }
    }

    #[test]
    fn requant_with_offset_matches_float_quantization() {
        // Requantizing an accumulator count m (step s) onto a coarser grid
        // (step 2^k s, zero z) must equal quantizing the real value m·s.
        let out = QuantSpec::from_power_step(2.0f64.powi(-4), 77, 8); // odd zero
        let k = 9u32; // accumulator step 2^-13
        let acc_step = 2.0f64.powi(-13);
        for m in [-630_000i64, -12_345, -256, -255, 0, 255, 256, 511, 630_000] {
            let code = requant_po2_code(m, k, out.zero_point, out.max_code());
            assert_eq!(code, out.quantize(m as f64 * acc_step), "m = {m}");
        }
        // Exact ties: m = half-step odd multiples exercise the even rule.
        for m in [-4864i64, -256, 256, 768, 1280] {
            let code = requant_po2_code(m, k, out.zero_point, out.max_code());
            assert_eq!(code, out.quantize(m as f64 * acc_step), "tie m = {m}");
        }
    }

    proptest! {
        #[test]
        fn shift_rounding_matches_float_oracle(x in -(1i64 << 50)..(1i64 << 50), shift in 1u32..40) {
            // x < 2^50 and shift < 40 keep x and x/2^shift exact in f64.
            let want = (x as f64 / (shift as f64).exp2()).round_ties_even() as i64;
            prop_assert_eq!(round_half_even_shift(x, shift), want);
        }

        #[test]
        fn requant_params_approximate_any_ratio(log_r in -20.0f64..20.0) {
            let ratio = log_r.exp2();
            let rq = RequantParams::from_ratio(ratio).unwrap();
            prop_assert!((1 << 30..1i64 << 31).contains(&(rq.multiplier as i64)));
            let rel = (rq.realized_ratio() - ratio).abs() / ratio;
            prop_assert!(rel <= 2.0f64.powi(-30));
        }

        #[test]
        fn apply_matches_float_oracle(v in -(1i64 << 20)..(1i64 << 20), log_r in -8.0f64..8.0) {
            let rq = RequantParams::from_ratio(log_r.exp2()).unwrap();
            // v·multiplier < 2^51 stays exact in f64, so the float
            // round-ties-even of the same rational is an exact oracle.
            let exact = v as f64 * rq.multiplier as f64 / (rq.shift as f64).exp2();
            prop_assert_eq!(rq.apply(v), exact.round_ties_even() as i64);
        }

        #[test]
        fn power_grid_covers_and_zero_is_exact(
            lo in -100.0f64..0.0,
            width in 1e-6f64..200.0,
            bits in 2u32..=16,
        ) {
            let spec = QuantSpec::power_of_two(lo, lo + width, bits).unwrap();
            prop_assert!(spec.has_power_step());
            prop_assert!(spec.alpha <= lo);
            prop_assert!(spec.beta >= (lo + width).max(0.0));
            prop_assert_eq!(spec.fake_quant(0.0).to_bits(), 0.0f64.to_bits());
            let rebuilt = (spec.beta - spec.alpha) / spec.max_code() as f64;
            prop_assert_eq!(rebuilt.to_bits(), spec.step.to_bits());
        }

        #[test]
        fn on_grid_requant_between_power_grids_is_lossless(
            code in 0i64..256,
            k in 0u32..8,
        ) {
            // A value on the coarse grid survives a round trip through the
            // fine accumulator domain unchanged.
            let out = QuantSpec::from_power_step(2.0f64.powi(-5), 130, 8);
            let v = out.dequantize(code);
            let m = ((code - out.zero_point) as i64) << k; // v in fine steps
            prop_assert_eq!(requant_po2_code(m, k, out.zero_point, out.max_code()), code);
            prop_assert_eq!(out.quantize(v), code);
        }
    }
}
