//! Band decomposition and differential-entropy features.
//!
//! Each band is isolated with a zero-phase Butterworth band-pass built from a
//! high-pass at the lower edge and a low-pass at the upper edge, both run
//! forward and backward. DE is then taken per channel, per band, per
//! non-overlapping one-second window under a Gaussian model:
//! `½·ln(2πe·σ²)`.

use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::error::{EetError, Result};

/// Minimum sampling rate accepted for raw samples, in Hz.
pub const MIN_RATE: usize = 128;
/// Sample variances below this are clamped before the logarithm.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// Butterworth order of each band edge (high-pass and low-pass separately).
pub const EDGE_ORDER: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSet {
    bands: Vec<Band>,
}

impl Default for BandSet {
    /// δ 1-3 Hz, θ 4-7 Hz, α 8-13 Hz, β 14-30 Hz, γ 31-50 Hz.
    fn default() -> Self {
        let b = |name: &str, low, high| Band {
            name: name.to_string(),
            low,
            high,
        };
        Self {
            bands: vec![
                b("delta", 1.0, 3.0),
                b("theta", 4.0, 7.0),
                b("alpha", 8.0, 13.0),
                b("beta", 14.0, 30.0),
                b("gamma", 31.0, 50.0),
            ],
        }
    }
}

impl BandSet {
    pub fn new(bands: Vec<Band>) -> Result<Self> {
        if bands.is_empty() {
            return Err(EetError::config("band set is empty"));
        }
        for b in &bands {
            if !(b.low > 0.0 && b.low < b.high) {
                return Err(EetError::config(format!(
                    "band {} has invalid edges [{}, {}]",
                    b.name, b.low, b.high
                )));
            }
        }
        for w in bands.windows(2) {
            if w[1].low <= w[0].high {
                return Err(EetError::config(format!(
                    "bands {} and {} overlap or are out of order",
                    w[0].name, w[1].name
                )));
            }
        }
        Ok(Self { bands })
    }

    pub fn bands(&self) -> &[Band] {
        &self.bands
    }

    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.bands.iter().position(|b| b.name == name)
    }

    /// Every band must sit strictly below Nyquist at `rate`.
    pub fn validate_for_rate(&self, rate: usize) -> Result<()> {
        let nyquist = rate as f64 / 2.0;
        match self.bands.iter().find(|b| b.high >= nyquist) {
            Some(b) => Err(EetError::config(format!(
                "band {} upper edge {} Hz is not below Nyquist {} Hz",
                b.name, b.high, nyquist
            ))),
            None => Ok(()),
        }
    }
}

/// Multichannel time-domain EEG, values in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct RawEegSample {
    rate: usize,
    signal: Vec<Vec<f64>>,
    label: usize,
}

impl RawEegSample {
    /// `signal[c]` is channel `c`; every channel holds whole seconds at `rate`.
    pub fn new(rate: usize, signal: Vec<Vec<f64>>, label: usize) -> Result<Self> {
        if signal.is_empty() {
            return Err(EetError::contract("sample needs at least one channel"));
        }
        if rate < MIN_RATE {
            return Err(EetError::contract(format!(
                "sampling rate {rate} Hz below minimum {MIN_RATE} Hz"
            )));
        }
        let n = signal[0].len();
        if signal.iter().any(|ch| ch.len() != n) {
            return Err(EetError::contract("channels differ in length"));
        }
        if n == 0 || !n.is_multiple_of(rate) {
            return Err(EetError::contract(format!(
                "signal length {n} is not a positive whole number of seconds at {rate} Hz"
            )));
        }
        if signal.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EetError::NonFinite { op: "raw sample" });
        }
        Ok(Self {
            rate,
            signal,
            label,
        })
    }

    pub fn rate(&self) -> usize {
        self.rate
    }

    pub fn channels(&self) -> usize {
        self.signal.len()
    }

    pub fn seconds(&self) -> usize {
        self.signal[0].len() / self.rate
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn signal(&self) -> &[Vec<f64>] {
        &self.signal
    }
}

/// DE values laid out `seconds × channels × bands`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeFeatures {
    seconds: usize,
    channels: usize,
    bands: usize,
    values: Vec<f64>,
}

impl DeFeatures {
    pub fn new(seconds: usize, channels: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if seconds == 0 || channels == 0 || bands == 0 {
            return Err(EetError::contract("DE feature extents must be positive"));
        }
        if values.len() != seconds * channels * bands {
            return Err(EetError::Shape {
                op: "de_features",
                left: vec![seconds, channels, bands],
                right: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EetError::NonFinite { op: "de_features" });
        }
        Ok(Self {
            seconds,
            channels,
            bands,
            values,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.seconds, self.channels, self.bands)
    }

    pub fn seconds(&self) -> usize {
        self.seconds
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn get(&self, t: usize, c: usize, s: usize) -> f64 {
        self.values[(t * self.channels + c) * self.bands + s]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Second-order section, `a0` normalized to 1.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn lowpass(cutoff: f64, rate: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b0 = (1.0 - cos) / 2.0;
        Self {
            b: [b0 / a0, (1.0 - cos) / a0, b0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn highpass(cutoff: f64, rate: f64, q: f64) -> Self {
        let w0 = 2.0 * PI * cutoff / rate;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b0 = (1.0 + cos) / 2.0;
        Self {
            b: [b0 / a0, -(1.0 + cos) / a0, b0 / a0],
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct form II, starting from the steady state of a
    /// constant input `x0`.
    fn run(&self, x: &mut [f64]) {
        let x0 = x[0];
        let g = self.dc_gain();
        let mut z2 = (self.b[2] - self.a[1] * g) * x0;
        let mut z1 = (self.b[1] - self.a[0] * g) * x0 + z2;
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * y + z2;
            z2 = self.b[2] * input - self.a[1] * y;
            *v = y;
        }
    }
}

/// Q factors of the biquads realizing an even-order Butterworth response.
fn butterworth_qs(order: usize) -> Vec<f64> {
    (0..order / 2)
        .map(|k| 1.0 / (2.0 * (PI * (2 * k + 1) as f64 / (2 * order) as f64).cos()))
        .collect()
}

/// Zero-phase band-pass for one band at one sampling rate.
#[derive(Clone, Debug)]
pub struct BandFilter {
    sections: Vec<Biquad>,
    pad: usize,
}

impl BandFilter {
    pub fn new(band: &Band, rate: usize) -> Result<Self> {
        let fs = rate as f64;
        if band.high >= fs / 2.0 {
            return Err(EetError::config(format!(
                "band {} exceeds Nyquist at {rate} Hz",
                band.name
            )));
        }
        let qs = butterworth_qs(EDGE_ORDER);
        let mut sections: Vec<Biquad> = qs
            .iter()
            .map(|&q| Biquad::highpass(band.low, fs, q))
            .collect();
        sections.extend(qs.iter().map(|&q| Biquad::lowpass(band.high, fs, q)));
        // Three periods of the lower edge covers the slowest transient.
        let pad = ((3.0 * fs / band.low).ceil() as usize).max(6 * sections.len());
        Ok(Self { sections, pad })
    }

    fn cascade(&self, x: &mut [f64]) {
        for s in &self.sections {
            s.run(x);
        }
    }

    /// Forward-backward filtering with odd extension at both ends.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = self.pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.cascade(&mut ext);
        ext.reverse();
        self.cascade(&mut ext);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

/// Per-band filtered copies of a sample: `out[band][channel][time]`.
pub fn band_decompose(sample: &RawEegSample, bands: &BandSet) -> Result<Vec<Vec<Vec<f64>>>> {
    bands.validate_for_rate(sample.rate)?;
    bands
        .bands
        .iter()
        .map(|band| {
            let filter = BandFilter::new(band, sample.rate)?;
            Ok(sample.signal.iter().map(|ch| filter.apply(ch)).collect())
        })
        .collect()
}

/// `½·ln(2πe·σ²)` with σ² the unbiased sample variance, floored at
/// [`VARIANCE_FLOOR`].
pub fn differential_entropy(window: &[f64]) -> Result<f64> {
    if window.len() < 2 {
        return Err(EetError::contract("DE window needs at least two samples"));
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok(0.5 * (2.0 * PI * E * var.max(VARIANCE_FLOOR)).ln())
}

pub fn extract_de_features(sample: &RawEegSample, bands: &BandSet) -> Result<DeFeatures> {
    let filtered = band_decompose(sample, bands)?;
    let (seconds, channels, nb) = (sample.seconds(), sample.channels(), bands.len());
    let rate = sample.rate;
    let mut values = vec![0.0; seconds * channels * nb];
    for (s, per_band) in filtered.iter().enumerate() {
        for (c, signal) in per_band.iter().enumerate() {
            for t in 0..seconds {
                let de = differential_entropy(&signal[t * rate..(t + 1) * rate])?;
                values[(t * channels + c) * nb + s] = de;
            }
        }
    }
    DeFeatures::new(seconds, channels, nb, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const RATE: usize = 200;

    fn tone(freq: f64, amp: f64, seconds: usize) -> Vec<f64> {
        (0..RATE * seconds)
            .map(|i| amp * (2.0 * PI * freq * i as f64 / RATE as f64).sin())
            .collect()
    }

    /// Periodogram power at an exact DFT bin.
    fn bin_power(x: &[f64], freq: f64) -> f64 {
        let n = x.len() as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let ph = 2.0 * PI * freq * i as f64 / RATE as f64;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        2.0 * (re * re + im * im) / (n * n)
    }

    fn mean_power(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
    }

    fn single_channel(x: Vec<f64>) -> RawEegSample {
        RawEegSample::new(RATE, vec![x], 0).unwrap()
    }

    #[test]
    fn alpha_tone_stays_in_alpha() {
        let x = tone(10.0, 1.0, 10);
        let input = bin_power(&x, 10.0);
        let out = band_decompose(&single_channel(x), &BandSet::default()).unwrap();
        let bands = BandSet::default();
        let a = bands.index_of("alpha").unwrap();
        let alpha = mean_power(&out[a][0]);
        for name in ["beta", "gamma"] {
            let p = mean_power(&out[bands.index_of(name).unwrap()][0]);
            assert!(p < 0.01 * input, "{name}: {p} vs {input}");
        }
        let total: f64 = out.iter().map(|b| mean_power(&b[0])).sum();
        assert!(alpha > 0.8 * total);
    }

    #[test]
    fn two_tones_are_recovered_by_their_bands() {
        let x: Vec<f64> = tone(2.0, 1.0, 10)
            .iter()
            .zip(tone(40.0, 0.5, 10))
            .map(|(a, b)| a + b)
            .collect();
        let (p2, p40) = (bin_power(&x, 2.0), bin_power(&x, 40.0));
        let out = band_decompose(&single_channel(x), &BandSet::default()).unwrap();
        let delta = &out[0][0];
        let gamma = &out[4][0];
        assert!(
            bin_power(delta, 2.0) >= 0.95 * p2,
            "{} vs {p2}",
            bin_power(delta, 2.0)
        );
        assert!(
            bin_power(gamma, 40.0) >= 0.95 * p40,
            "{} vs {p40}",
            bin_power(gamma, 40.0)
        );
    }

    #[test]
    fn twenty_db_an_octave_outside_each_band() {
        let bands = BandSet::default();
        for band in bands.bands() {
            let filter = BandFilter::new(band, RATE).unwrap();
            for f in [band.low / 2.0, band.high * 2.0] {
                if f >= RATE as f64 / 2.0 || f < 0.2 {
                    continue;
                }
                // Long window so the probe frequency sits on a bin.
                let secs = 40;
                let x: Vec<f64> = (0..RATE * secs)
                    .map(|i| (2.0 * PI * f * i as f64 / RATE as f64).sin())
                    .collect();
                let y = filter.apply(&x);
                let mid = RATE * 10..RATE * 30;
                let ratio = mean_power(&y[mid.clone()]) / mean_power(&x[mid]);
                assert!(ratio <= 0.01, "{} at {f} Hz: ratio {ratio}", band.name);
            }
        }
    }

    #[test]
    fn zero_signal_is_zero_in_every_band() {
        let out =
            band_decompose(&single_channel(vec![0.0; RATE * 3]), &BandSet::default()).unwrap();
        assert!(out.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn band_above_nyquist_is_rejected() {
        let bands = BandSet::new(vec![Band {
            name: "hi".into(),
            low: 60.0,
            high: 120.0,
        }])
        .unwrap();
        let res = band_decompose(&single_channel(vec![0.0; RATE]), &bands);
        assert!(matches!(res, Err(EetError::Config(_))));
    }

    #[test]
    fn overlapping_bands_are_rejected() {
        let b = |l, h| Band {
            name: "x".into(),
            low: l,
            high: h,
        };
        assert!(BandSet::new(vec![b(1.0, 5.0), b(4.0, 8.0)]).is_err());
        assert!(BandSet::new(vec![b(5.0, 1.0)]).is_err());
    }

    #[test]
    fn sample_invariants() {
        assert!(RawEegSample::new(100, vec![vec![0.0; 100]], 0).is_err());
        assert!(RawEegSample::new(RATE, vec![vec![0.0; 150]], 0).is_err());
        assert!(RawEegSample::new(RATE, vec![], 0).is_err());
        assert!(RawEegSample::new(RATE, vec![vec![0.0; 200], vec![0.0; 400]], 0).is_err());
    }

    #[test]
    fn de_of_unit_variance_window() {
        // {-1, 1, -1, 1}: mean 0, unbiased variance 4/3; rescale to exactly 1.
        let s = (3.0f64 / 4.0).sqrt();
        let w = [-s, s, -s, s];
        let want = 0.5 * (2.0 * PI * E).ln();
        assert!((differential_entropy(&w).unwrap() - want).abs() < 1e-9);
        assert!((want - 1.41894).abs() < 1e-5);
    }

    #[test]
    fn de_of_constant_window_uses_floor() {
        let de = differential_entropy(&[4.2; 10]).unwrap();
        assert_eq!(de, 0.5 * (2.0 * PI * E * VARIANCE_FLOOR).ln());
    }

    #[test]
    fn de_needs_two_samples() {
        assert!(differential_entropy(&[1.0]).is_err());
    }

    #[test]
    fn de_of_gaussian_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let normal = Normal::new(0.0, 2.0).unwrap();
        let w: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
        let want = 0.5 * (2.0 * PI * E * 4.0).ln();
        assert!((differential_entropy(&w).unwrap() - want).abs() < 0.05);
    }

    #[test]
    fn feature_shape_for_ten_seconds_of_62_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let normal = Normal::new(0.0, 10.0).unwrap();
        let signal = (0..62)
            .map(|_| (0..RATE * 10).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let sample = RawEegSample::new(RATE, signal, 1).unwrap();
        let f = extract_de_features(&sample, &BandSet::default()).unwrap();
        assert_eq!(f.shape(), (10, 62, 5));
    }

    #[test]
    fn louder_channel_has_higher_de() {
        let (secs, chans) = (10, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let signal: Vec<Vec<f64>> = (0..chans)
            .map(|c| {
                let scale = if c == 7 { 2.0 } else { 1.0 };
                (0..RATE * secs)
                    .map(|_| scale * normal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let f = extract_de_features(
            &RawEegSample::new(RATE, signal, 0).unwrap(),
            &BandSet::default(),
        )
        .unwrap();
        let mean_de =
            |c: usize, s: usize| (0..secs).map(|t| f.get(t, c, s)).sum::<f64>() / secs as f64;
        for s in 0..5 {
            for c in (0..chans).filter(|&c| c != 7) {
                assert!(mean_de(7, s) > mean_de(c, s), "band {s} channel {c}");
            }
        }
    }

    #[test]
    fn identical_channels_give_identical_rows() {
        let x = tone(11.0, 3.0, 2);
        let sample = RawEegSample::new(RATE, vec![x.clone(), x], 0).unwrap();
        let f = extract_de_features(&sample, &BandSet::default()).unwrap();
        for t in 0..2 {
            for s in 0..5 {
                assert_eq!(f.get(t, 0, s), f.get(t, 1, s));
            }
        }
    }
}
