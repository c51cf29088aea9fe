//! Rate-specific downsampling plans.
//!
//! A plan is a stack of valid (unpadded) strided convolutions whose stride
//! product equals the number of samples in one 20 ms frame at its rate, so
//! every rate lands on the same frame grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FRAME_SHIFT_S: f64 = 0.02;
pub const TARGET_RECEPTIVE_FIELD_S: f64 = 0.025;
pub const MAX_PRIME_FACTOR: u64 = 7;
pub const DEFAULT_CHANNELS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DownsamplePlan {
    pub rate_hz: u32,
    pub dr: usize,
    pub layers: Vec<ConvLayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReceptiveField {
    pub samples: usize,
    pub ms: f64,
}

const CANONICAL: [(u32, &[usize], &[usize]); 4] = [
    (16_000, &[5, 2, 2, 2, 2, 2, 2], &[10, 3, 3, 3, 3, 2, 2]),
    (22_050, &[7, 7, 3, 3], &[19, 14, 4, 3]),
    (24_000, &[5, 3, 2, 2, 2, 2, 2], &[10, 5, 3, 3, 3, 2, 2]),
    (48_000, &[5, 3, 2, 2, 2, 2, 2, 2], &[10, 5, 3, 3, 3, 3, 2, 2]),
];

impl DownsamplePlan {
    pub fn from_parts(rate_hz: u32, strides: &[usize], kernels: &[usize], channels: usize) -> Self {
        assert_eq!(strides.len(), kernels.len());
        let layers = strides.iter().zip(kernels).map(|(&stride, &kernel)| ConvLayerSpec { kernel, stride, channels }).collect();
        DownsamplePlan { rate_hz, dr: strides.iter().product(), layers }
    }

    pub fn strides(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.stride).collect()
    }

    pub fn kernels(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.kernel).collect()
    }

    pub fn stride_product(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.channels)
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        for l in &mut self.layers {
            l.channels = channels;
        }
        self
    }

    pub fn receptive_field(&self) -> ReceptiveField {
        receptive_field(self)
    }

    pub fn frame_count(&self, n_samples: usize) -> Result<usize> {
        frame_count(self, n_samples)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn is_canonical_rate(rate_hz: u32) -> bool {
    CANONICAL.iter().any(|(r, _, _)| *r == rate_hz)
}

/// The published stride/kernel row for one of the four canonical rates.
pub fn canonical_plan(rate_hz: u32) -> Result<DownsamplePlan> {
    CANONICAL
        .iter()
        .find(|(r, _, _)| *r == rate_hz)
        .map(|(r, s, k)| DownsamplePlan::from_parts(*r, s, k, DEFAULT_CHANNELS))
        .ok_or(Error::NoCanonicalPlan(rate_hz))
}

/// Samples per frame at `rate_hz`, if integral.
pub fn downsampling_ratio(rate_hz: u32, frame_shift_s: f64) -> Result<usize> {
    let dr = rate_hz as f64 * frame_shift_s;
    let rounded = dr.round();
    if rounded < 1.0 || (dr - rounded).abs() > 1e-9 * dr.max(1.0) {
        return Err(Error::IncompatibleRate { rate_hz, dr });
    }
    Ok(rounded as usize)
}

fn prime_factors_desc(mut n: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            out.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        out.push(n);
    }
    out.reverse();
    out
}

/// Builds a plan for an arbitrary rate.
///
/// Strides are the prime factors of `dr` in non-increasing order. Kernels
/// start equal to their strides and are widened (each up to `3 × stride`)
/// to reach the smallest receptive field at or above 25 ms. Among the
/// widenings that reach that minimum, earlier layers are widened as much as
/// possible. Canonical rates at the default frame shift return their
/// published row.
pub fn derive_plan(rate_hz: u32, frame_shift_s: f64) -> Result<DownsamplePlan> {
    let dr = downsampling_ratio(rate_hz, frame_shift_s)?;
    if (frame_shift_s - DEFAULT_FRAME_SHIFT_S).abs() < 1e-12 {
        if let Ok(plan) = canonical_plan(rate_hz) {
            return Ok(plan);
        }
    }
    let strides: Vec<usize> = prime_factors_desc(dr as u64).into_iter().map(|p| p as usize).collect();
    if let Some(&big) = strides.iter().find(|&&p| p as u64 > MAX_PRIME_FACTOR) {
        return Err(Error::UnfactorableRate { rate_hz, factor: big as u64 });
    }
    let strides = if strides.is_empty() { vec![1] } else { strides };

    let target = (rate_hz as f64 * TARGET_RECEPTIVE_FIELD_S - 1e-9).ceil() as usize;
    let base_rf = dr; // kernels == strides
    let extra_needed = target.saturating_sub(base_rf);

    // jumps[i] = product of strides before layer i; widening layer i by one adds jumps[i].
    let mut jumps = Vec::with_capacity(strides.len());
    let mut j = 1;
    for &s in &strides {
        jumps.push(j);
        j *= s;
    }
    let caps: Vec<usize> = strides.iter().map(|&s| 2 * s).collect();
    let max_extra: usize = jumps.iter().zip(&caps).map(|(j, c)| j * c).sum();

    // reachable[i][v]: extra amount v is exactly reachable using layers i.. .
    let bound = max_extra.min(extra_needed + jumps.last().copied().unwrap_or(1) * 3) + 1;
    let n = strides.len();
    let mut reachable = vec![vec![false; bound + 1]; n + 1];
    reachable[n][0] = true;
    for i in (0..n).rev() {
        for v in 0..=bound {
            reachable[i][v] = (0..=caps[i]).any(|w| w * jumps[i] <= v && reachable[i + 1][v - w * jumps[i]]);
        }
    }
    let Some(extra) = (extra_needed..=bound).find(|&v| reachable[0][v]) else {
        return Err(Error::invalid(format!("cannot reach a 25 ms receptive field at {rate_hz} Hz")));
    };
    let mut widen = vec![0usize; n];
    let mut left = extra;
    for i in 0..n {
        let w = (0..=caps[i]).rev().find(|&w| w * jumps[i] <= left && reachable[i + 1][left - w * jumps[i]]).expect("reachable");
        widen[i] = w;
        left -= w * jumps[i];
    }
    let kernels: Vec<usize> = strides.iter().zip(&widen).map(|(s, w)| s + w).collect();
    Ok(DownsamplePlan::from_parts(rate_hz, &strides, &kernels, DEFAULT_CHANNELS))
}

/// Output length after the full conv stack, applying
/// `floor((n - kernel) / stride) + 1` layer by layer.
pub fn frame_count(plan: &DownsamplePlan, n_samples: usize) -> Result<usize> {
    let mut t = n_samples;
    for l in &plan.layers {
        if t < l.kernel {
            return Err(Error::TooShort { needed: plan.receptive_field().samples, got: n_samples });
        }
        t = (t - l.kernel) / l.stride + 1;
    }
    Ok(t)
}

pub fn receptive_field(plan: &DownsamplePlan) -> ReceptiveField {
    let mut rf = 1;
    let mut jump = 1;
    for l in &plan.layers {
        rf += (l.kernel - 1) * jump;
        jump *= l.stride;
    }
    ReceptiveField { samples: rf, ms: rf as f64 * 1000.0 / plan.rate_hz as f64 }
}

/// Every broken plan invariant, as a human-readable line.
pub fn validate_plan(plan: &DownsamplePlan) -> Vec<String> {
    let mut out = Vec::new();
    if plan.layers.is_empty() {
        out.push("plan has no layers".to_string());
    }
    let prod = plan.stride_product();
    if prod != plan.dr {
        out.push(format!("stride product {prod} ≠ dr {}", plan.dr));
    }
    match downsampling_ratio(plan.rate_hz, DEFAULT_FRAME_SHIFT_S) {
        Ok(dr) if dr == plan.dr => {}
        Ok(dr) => out.push(format!("dr {} ≠ rate × 0.02 = {dr}", plan.dr)),
        Err(_) => out.push(format!("rate × 0.02 is not an integer at {} Hz", plan.rate_hz)),
    }
    for (i, l) in plan.layers.iter().enumerate() {
        if l.stride == 0 {
            out.push(format!("stride < 1 at layer {i}"));
        }
        if l.kernel == 0 {
            out.push(format!("kernel < 1 at layer {i}"));
        }
        if l.kernel < l.stride {
            out.push(format!("kernel < stride at layer {i}"));
        }
        if l.channels == 0 {
            out.push(format!("channels < 1 at layer {i}"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent oracle: run the length recurrence on an explicit sample
    // index range instead of the closed formula.
    fn frames_by_enumeration(plan: &DownsamplePlan, n: usize) -> usize {
        let mut len = n;
        for l in &plan.layers {
            let mut count = 0;
            let mut start = 0;
            while start + l.kernel <= len {
                count += 1;
                start += l.stride;
            }
            len = count;
        }
        len
    }

    #[test]
    fn canonical_rows() {
        let p = canonical_plan(16_000).unwrap();
        assert_eq!(p.strides(), vec![5, 2, 2, 2, 2, 2, 2]);
        assert_eq!(p.kernels(), vec![10, 3, 3, 3, 3, 2, 2]);
        let p = canonical_plan(22_050).unwrap();
        assert_eq!(p.strides(), vec![7, 7, 3, 3]);
        assert_eq!(p.kernels(), vec![19, 14, 4, 3]);
        let p = canonical_plan(24_000).unwrap();
        assert_eq!(p.strides(), vec![5, 3, 2, 2, 2, 2, 2]);
        assert_eq!(p.kernels(), vec![10, 5, 3, 3, 3, 2, 2]);
        let p = canonical_plan(48_000).unwrap();
        assert_eq!(p.strides(), vec![5, 3, 2, 2, 2, 2, 2, 2]);
        assert_eq!(p.kernels(), vec![10, 5, 3, 3, 3, 3, 2, 2]);
        assert!(matches!(canonical_plan(32_000), Err(Error::NoCanonicalPlan(32_000))));
    }

    #[test]
    fn canonical_invariants() {
        for (rate, dr) in [(16_000, 320), (22_050, 441), (24_000, 480), (48_000, 960)] {
            let p = canonical_plan(rate).unwrap();
            assert_eq!(p.dr, dr);
            assert_eq!(p.stride_product(), dr);
            assert!(validate_plan(&p).is_empty(), "{:?}", validate_plan(&p));
            assert!((p.receptive_field().ms - 25.0).abs() < 0.05);
        }
    }

    #[test]
    fn receptive_fields_by_hand() {
        // 1 + 9·1 + 2·5 + 2·10 + 2·20 + 2·40 + 1·80 + 1·160
        assert_eq!(canonical_plan(16_000).unwrap().receptive_field().samples, 400);
        // 1 + 18·1 + 13·7 + 3·49 + 2·147
        let rf = canonical_plan(22_050).unwrap().receptive_field();
        assert_eq!(rf.samples, 551);
        assert!((rf.ms - 25.0).abs() < 0.015);
        let single = DownsamplePlan::from_parts(16_000, &[5], &[10], 1);
        assert_eq!(single.receptive_field().samples, 10);
    }

    #[test]
    fn one_second_is_49_frames_at_every_canonical_rate() {
        for rate in crate::dsp::CANONICAL_RATES {
            let p = canonical_plan(rate).unwrap();
            assert_eq!(frame_count(&p, rate as usize).unwrap(), 49);
            assert_eq!(frames_by_enumeration(&p, rate as usize), 49);
        }
    }

    #[test]
    fn too_short_input() {
        let p = canonical_plan(16_000).unwrap();
        assert!(matches!(frame_count(&p, 399), Err(Error::TooShort { needed: 400, got: 399 })));
        assert_eq!(frame_count(&p, 400).unwrap(), 1);
    }

    #[test]
    fn derived_plans() {
        assert_eq!(derive_plan(16_000, 0.02).unwrap(), canonical_plan(16_000).unwrap());
        let p = derive_plan(32_000, 0.02).unwrap();
        assert_eq!(p.stride_product(), 640);
        let ms = p.receptive_field().ms;
        assert!((25.0..=27.0).contains(&ms), "{ms}");
        assert!(validate_plan(&p).is_empty());
        assert_eq!(frames_by_enumeration(&p, 32_000), frame_count(&p, 32_000).unwrap());

        assert!(matches!(derive_plan(11_025, 0.02), Err(Error::IncompatibleRate { dr, .. }) if (dr - 220.5).abs() < 1e-9));
        // 8800 × 0.02 = 176 = 2⁴ · 11
        assert!(matches!(derive_plan(8_800, 0.02), Err(Error::UnfactorableRate { factor: 11, .. })));
    }

    #[test]
    fn derived_44100_hits_25ms() {
        let p = derive_plan(44_100, 0.02).unwrap();
        assert_eq!(p.strides(), vec![7, 7, 3, 3, 2]);
        assert_eq!(p.receptive_field().samples, 1103);
    }

    #[test]
    fn violations_are_named() {
        let bad = DownsamplePlan {
            rate_hz: 16_000,
            dr: 320,
            layers: vec![ConvLayerSpec { kernel: 10, stride: 5, channels: 8 }, ConvLayerSpec { kernel: 2, stride: 2, channels: 8 }],
        };
        assert_eq!(validate_plan(&bad), vec!["stride product 10 ≠ dr 320".to_string()]);
        let bad = DownsamplePlan { rate_hz: 50, dr: 1, layers: vec![ConvLayerSpec { kernel: 1, stride: 2, channels: 1 }] };
        let v = validate_plan(&bad);
        assert!(v.contains(&"kernel < stride at layer 0".to_string()), "{v:?}");
    }

    #[test]
    fn json_round_trip() {
        let p = canonical_plan(22_050).unwrap();
        assert_eq!(DownsamplePlan::from_json(&p.to_json()).unwrap(), p);
    }

    proptest! {
        #[test]
        fn aligned_frame_counts(tenths in 5usize..=100) {
            let d = tenths as f64 / 10.0;
            let counts: Vec<usize> = crate::dsp::CANONICAL_RATES
                .iter()
                .map(|&r| frame_count(&canonical_plan(r).unwrap(), (d * r as f64).round() as usize).unwrap())
                .collect();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "{counts:?}");
        }

        #[test]
        fn derived_plans_validate(mult in 1u32..=60) {
            // Rates on a 50 Hz grid always give an integer dr.
            let rate = mult * 800;
            if let Ok(p) = derive_plan(rate, 0.02) {
                prop_assert!(validate_plan(&p).is_empty());
                prop_assert_eq!(p.stride_product() as f64 / rate as f64, 0.02);
                prop_assert!(p.receptive_field().samples as f64 >= rate as f64 * 0.025 - 1e-9);
            }
        }

        #[test]
        fn frame_count_matches_enumeration(rate_idx in 0usize..4, n in 1200usize..20_000) {
            let p = canonical_plan(crate::dsp::CANONICAL_RATES[rate_idx]).unwrap();
            if n >= p.receptive_field().samples {
                prop_assert_eq!(frame_count(&p, n).unwrap(), frames_by_enumeration(&p, n));
            }
        }
    }
}
