//! Synthetic EEG with planted class structure.
//!
//! Every channel is a sum of one band-limited Gaussian component per band
//! (each scaled to unit RMS) plus white noise. A class effect multiplies the
//! amplitude of one band's component by `effect_size` in chosen
//! electrodes/seconds, which raises the DE there by `ln(effect_size)`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetFile, RecordKind};
use crate::error::{EetError, Result};
use crate::featurize::{BandFilter, BandSet, DeFeatures};
use crate::layout::ElectrodeLayout;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Effect {
    /// One electrode region's band amplitude grows with the class index.
    Spatial,
    /// One band's amplitude on every electrode grows with the class index.
    Spectral,
    /// The class picks which second carries the boosted band on every electrode.
    Temporal,
    /// Class `c` boosts region group `j` at second `τ[(j + c) mod K]`, so every
    /// region and every second is boosted once per class and only the
    /// region-second pairing identifies the class.
    Joint,
}

impl FromStr for Effect {
    type Err = EetError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "spatial" => Ok(Self::Spatial),
            "spectral" => Ok(Self::Spectral),
            "temporal" => Ok(Self::Temporal),
            "joint" => Ok(Self::Joint),
            _ => Err(EetError::config(format!(
                "unknown effect {s:?} (expected spatial, spectral, temporal or joint)"
            ))),
        }
    }
}

impl fmt::Display for Effect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Spatial => "spatial",
            Self::Spectral => "spectral",
            Self::Temporal => "temporal",
            Self::Joint => "joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    pub seconds: usize,
    pub rate: usize,
    pub effect: Effect,
    /// Amplitude multiplier of the boosted component; must exceed 1.
    pub effect_size: f64,
    /// Standard deviation of the white noise added to every channel.
    pub noise_floor: f64,
    /// Name of the band carrying the effect, or `all`.
    pub band: String,
    /// Side of the square electrode regions the spatial effects occupy.
    pub region_side: usize,
    pub store: RecordKind,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            samples: 200,
            classes: 3,
            seconds: 4,
            rate: 128,
            effect: Effect::Joint,
            effect_size: 2.0,
            noise_floor: 0.1,
            band: "all".into(),
            region_side: 2,
            store: RecordKind::De,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self, bands: &BandSet) -> Result<()> {
        if self.samples == 0 || self.seconds == 0 || self.region_side == 0 {
            return Err(EetError::config(
                "samples, seconds and region side must be positive",
            ));
        }
        if self.classes < 2 {
            return Err(EetError::config("at least two classes are required"));
        }
        if !(self.effect_size > 1.0 && self.effect_size.is_finite()) {
            return Err(EetError::config(
                "effect size must be a finite multiplier above 1",
            ));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return Err(EetError::config(
                "noise floor must be finite and non-negative",
            ));
        }
        if self.band != "all" && bands.index_of(&self.band).is_none() {
            return Err(EetError::config(format!("unknown band {:?}", self.band)));
        }
        bands.validate_for_rate(self.rate)?;
        let needs_seconds = matches!(self.effect, Effect::Temporal | Effect::Joint);
        if needs_seconds && self.classes > self.seconds {
            return Err(EetError::config(format!(
                "{} effect needs at least as many seconds ({}) as classes ({})",
                self.effect, self.seconds, self.classes
            )));
        }
        Ok(())
    }
}

/// Where the effect of a generated dataset lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectPlan {
    /// Boosted band; `None` boosts every band.
    pub band: Option<usize>,
    /// Channel indices of each boosted region group.
    pub regions: Vec<Vec<usize>>,
    /// Seconds used by temporal and joint effects.
    pub seconds: Vec<usize>,
}

/// Outcome of the single-statistic stump sweep on a joint dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityReport {
    pub statistics: usize,
    pub best_stump_accuracy: f64,
    pub best_statistic: String,
    /// Accuracy of matching each sample against the planted class patterns.
    pub pattern_accuracy: f64,
}

/// Highest accuracy a single stump may reach on a joint dataset.
pub const STUMP_LIMIT: f64 = 0.7;

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: DatasetFile,
    pub plan: EffectPlan,
    pub ambiguity: Option<AmbiguityReport>,
}

/// Aligned `side × side` blocks whose every cell holds an electrode, as channel lists.
fn full_regions(layout: &ElectrodeLayout, side: usize) -> Vec<Vec<usize>> {
    let mut at = vec![None; layout.rows() * layout.cols()];
    for ch in 0..layout.channels() {
        let (r, c) = layout.cell(ch);
        at[r * layout.cols() + c] = Some(ch);
    }
    let mut out = Vec::new();
    for r0 in (0..layout.rows() / side * side).step_by(side) {
        for c0 in (0..layout.cols() / side * side).step_by(side) {
            let block: Option<Vec<usize>> = (0..side * side)
                .map(|k| at[(r0 + k / side) * layout.cols() + c0 + k % side])
                .collect();
            out.extend(block);
        }
    }
    out
}

fn plan_effect(
    spec: &SyntheticSpec,
    layout: &ElectrodeLayout,
    bands: &BandSet,
) -> Result<EffectPlan> {
    let mut rng = rng::stream(spec.seed, "synth/layout");
    let band = bands.index_of(&spec.band);
    let groups = match spec.effect {
        Effect::Spatial => 1,
        Effect::Joint => spec.classes,
        _ => 0,
    };
    let mut candidates = full_regions(layout, spec.region_side);
    if candidates.len() < groups {
        return Err(EetError::config(format!(
            "layout has {} complete {}×{} regions, effect needs {groups}",
            candidates.len(),
            spec.region_side,
            spec.region_side
        )));
    }
    candidates.shuffle(&mut rng);
    candidates.truncate(groups);
    let mut seconds: Vec<usize> = (0..spec.seconds).collect();
    seconds.shuffle(&mut rng);
    seconds.truncate(match spec.effect {
        Effect::Temporal | Effect::Joint => spec.classes,
        _ => 0,
    });
    Ok(EffectPlan {
        band,
        regions: candidates,
        seconds,
    })
}

/// Amplitude multiplier of `band`'s component for one class, channel and second.
fn gain(
    spec: &SyntheticSpec,
    plan: &EffectPlan,
    class: usize,
    channel: usize,
    second: usize,
    band: usize,
) -> f64 {
    if plan.band.is_some_and(|b| b != band) {
        return 1.0;
    }
    let a = spec.effect_size;
    let level = a.powf(class as f64 / (spec.classes - 1) as f64);
    match spec.effect {
        Effect::Spatial if plan.regions[0].contains(&channel) => level,
        Effect::Spectral => level,
        Effect::Temporal if plan.seconds[class] == second => a,
        Effect::Joint => {
            let k = spec.classes;
            let boosted = plan.regions.iter().enumerate().any(|(j, group)| {
                group.contains(&channel) && plan.seconds[(j + class) % k] == second
            });
            if boosted {
                a
            } else {
                1.0
            }
        }
        _ => 1.0,
    }
}

fn sample_signal(
    spec: &SyntheticSpec,
    plan: &EffectPlan,
    filters: &[BandFilter],
    channels: usize,
    index: usize,
    class: usize,
) -> Vec<f64> {
    let mut rng = rng::stream(spec.seed, &format!("synth/sample{index}"));
    let n = spec.seconds * spec.rate;
    let mut out = Vec::with_capacity(channels * n);
    for ch in 0..channels {
        let mut signal: Vec<f64> = (0..n)
            .map(|_| spec.noise_floor * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (b, filter) in filters.iter().enumerate() {
            let white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let component = filter.apply(&white);
            let rms = (component.iter().map(|v| v * v).sum::<f64>() / n as f64)
                .sqrt()
                .max(1e-12);
            for t in 0..spec.seconds {
                let g = gain(spec, plan, class, ch, t, b) / rms;
                for i in t * spec.rate..(t + 1) * spec.rate {
                    signal[i] += g * component[i];
                }
            }
        }
        out.extend(signal);
    }
    out
}

/// Generates a dataset for `spec` on the electrodes of `layout`.
pub fn generate(spec: &SyntheticSpec, layout: &ElectrodeLayout) -> Result<SynthOutput> {
    let bands = BandSet::default();
    spec.validate(&bands)?;
    let plan = plan_effect(spec, layout, &bands)?;
    let mut labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.classes).collect();
    labels.shuffle(&mut rng::stream(spec.seed, "synth/labels"));
    let filters = bands
        .bands()
        .iter()
        .map(|b| BandFilter::new(b, spec.rate))
        .collect::<Result<Vec<_>>>()?;
    let channels = layout.channels();
    let raw: Vec<Vec<f64>> = (0..spec.samples)
        .into_par_iter()
        .map(|i| sample_signal(spec, &plan, &filters, channels, i, labels[i]))
        .collect();
    let dataset = DatasetFile {
        kind: RecordKind::Raw,
        rate: spec.rate,
        seconds: spec.seconds,
        classes: spec.classes,
        bands,
        electrodes: layout.names().to_vec(),
        records: raw,
        labels,
    };
    let needs_features = spec.store == RecordKind::De || spec.effect == Effect::Joint;
    let features = if needs_features {
        Some(dataset.featurized()?)
    } else {
        None
    };
    let ambiguity = if spec.effect == Effect::Joint {
        let f = features.as_ref().expect("featurized");
        let feats = (0..f.len())
            .map(|i| f.de_features(i))
            .collect::<Result<Vec<_>>>()?;
        let report = ambiguity_sweep(&feats, &f.labels, &plan, spec.classes);
        if report.best_stump_accuracy >= STUMP_LIMIT {
            return Err(EetError::contract(format!(
                "joint design is not ambiguous: stump on {} reaches {:.3}",
                report.best_statistic, report.best_stump_accuracy
            )));
        }
        Some(report)
    } else {
        None
    };
    let dataset = match spec.store {
        RecordKind::De => features.expect("featurized"),
        RecordKind::Raw => dataset,
    };
    Ok(SynthOutput {
        dataset,
        plan,
        ambiguity,
    })
}

/// Threshold and per-side class of the best one-split rule on `values`.
fn fit_stump(values: &[f64], labels: &[usize], classes: usize) -> (f64, usize, usize) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let argmax =
        |counts: &[usize]| (0..classes).fold(0, |b, c| if counts[c] > counts[b] { c } else { b });
    let mut left = vec![0usize; classes];
    let mut right = vec![0usize; classes];
    for &y in labels {
        right[y] += 1;
    }
    let everything = argmax(&right);
    let mut best = (right[everything], f64::NEG_INFINITY, everything, everything);
    for (k, &i) in order.iter().enumerate() {
        left[labels[i]] += 1;
        right[labels[i]] -= 1;
        // Only split between distinct values.
        let Some(&next) = order.get(k + 1) else { break };
        if values[next] == values[i] {
            continue;
        }
        let (l, r) = (argmax(&left), argmax(&right));
        if left[l] + right[r] > best.0 {
            best = (left[l] + right[r], 0.5 * (values[i] + values[next]), l, r);
        }
    }
    (best.1, best.2, best.3)
}

/// Held-out accuracy of a one-threshold stump: fitted on even-indexed
/// samples and scored on odd ones, then the reverse, averaged.
pub fn stump_accuracy(values: &[f64], labels: &[usize], classes: usize) -> f64 {
    let split = |parity: usize| -> (Vec<f64>, Vec<usize>) {
        (0..values.len())
            .filter(|i| i % 2 == parity)
            .map(|i| (values[i], labels[i]))
            .unzip()
    };
    let halves = [split(0), split(1)];
    let mut total = 0.0;
    for (fit, score) in [(&halves[0], &halves[1]), (&halves[1], &halves[0])] {
        let (threshold, below, above) = fit_stump(&fit.0, &fit.1, classes);
        let hits = score
            .0
            .iter()
            .zip(&score.1)
            .filter(|&(&v, &y)| y == if v <= threshold { below } else { above })
            .count();
        total += hits as f64 / score.0.len().max(1) as f64;
    }
    total / 2.0
}

/// Runs the stump on every per-channel, per-region-group and per-second
/// marginal of the effect band and the other bands, and scores the full
/// planted pattern.
pub fn ambiguity_sweep(
    features: &[DeFeatures],
    labels: &[usize],
    plan: &EffectPlan,
    classes: usize,
) -> AmbiguityReport {
    let (seconds, channels, bands) = features[0].shape();
    let mut stats: Vec<(String, Vec<f64>)> = Vec::new();
    for s in 0..bands {
        for c in 0..channels {
            let v = features
                .iter()
                .map(|f| (0..seconds).map(|t| f.get(t, c, s)).sum::<f64>() / seconds as f64)
                .collect();
            stats.push((format!("channel {c} band {s} over seconds"), v));
        }
        for (j, group) in plan.regions.iter().enumerate() {
            let v = features
                .iter()
                .map(|f| {
                    let total: f64 = (0..seconds)
                        .flat_map(|t| group.iter().map(move |&c| f.get(t, c, s)))
                        .sum();
                    total / (seconds * group.len()) as f64
                })
                .collect();
            stats.push((format!("region group {j} band {s} over seconds"), v));
        }
        for t in 0..seconds {
            let v = features
                .iter()
                .map(|f| (0..channels).map(|c| f.get(t, c, s)).sum::<f64>() / channels as f64)
                .collect();
            stats.push((format!("second {t} band {s} over channels"), v));
        }
    }
    let mut best = (0.0, String::new());
    for (name, values) in &stats {
        let acc = stump_accuracy(values, labels, classes);
        if acc > best.0 {
            best = (acc, name.clone());
        }
    }
    let k = classes;
    let mut hits = 0;
    for (f, &y) in features.iter().zip(labels) {
        let score = |c: usize| -> f64 {
            plan.regions
                .iter()
                .enumerate()
                .map(|(j, group)| {
                    let t = plan.seconds[(j + c) % k];
                    let boosted = |s: &usize| plan.band.is_none_or(|b| b == *s);
                    (0..bands)
                        .filter(boosted)
                        .flat_map(|s| group.iter().map(move |&ch| f.get(t, ch, s)))
                        .sum::<f64>()
                })
                .sum()
        };
        let guess = (0..k).fold(0, |b, c| if score(c) > score(b) { c } else { b });
        hits += usize::from(guess == y);
    }
    AmbiguityReport {
        statistics: stats.len(),
        best_stump_accuracy: best.0,
        best_statistic: best.1,
        pattern_accuracy: hits as f64 / labels.len() as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(effect: Effect) -> SyntheticSpec {
        SyntheticSpec {
            samples: 12,
            classes: 2,
            seconds: 2,
            effect,
            effect_size: 4.0,
            band: "alpha".into(),
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    fn mean_de(
        d: &DatasetFile,
        class: usize,
        channels: &[usize],
        seconds: &[usize],
        band: usize,
    ) -> f64 {
        let mut sum = 0.0;
        let mut n = 0;
        for i in (0..d.len()).filter(|&i| d.labels[i] == class) {
            let f = d.de_features(i).unwrap();
            for &t in seconds {
                for &c in channels {
                    sum += f.get(t, c, band);
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn spatial_effect_shifts_de_by_log_size() {
        let out = generate(&small(Effect::Spatial), &ElectrodeLayout::default()).unwrap();
        let region = &out.plan.regions[0];
        assert_eq!(region.len(), 4);
        let d = &out.dataset;
        let shift = mean_de(d, 1, region, &[0, 1], out.plan.band.unwrap())
            - mean_de(d, 0, region, &[0, 1], out.plan.band.unwrap());
        assert!((shift - 4f64.ln()).abs() < 0.15, "{shift}");
        // Electrodes outside the region and other bands are unaffected.
        let others: Vec<usize> = (0..62).filter(|c| !region.contains(c)).collect();
        let flat = mean_de(d, 1, &others, &[0, 1], out.plan.band.unwrap())
            - mean_de(d, 0, &others, &[0, 1], out.plan.band.unwrap());
        assert!(flat.abs() < 0.1, "{flat}");
        let band = (out.plan.band.unwrap() + 2) % 5;
        let flat = mean_de(d, 1, region, &[0, 1], band) - mean_de(d, 0, region, &[0, 1], band);
        assert!(flat.abs() < 0.15, "{flat}");
    }

    #[test]
    fn temporal_effect_lives_in_class_second() {
        let out = generate(&small(Effect::Temporal), &ElectrodeLayout::default()).unwrap();
        let all: Vec<usize> = (0..62).collect();
        let d = &out.dataset;
        let t1 = out.plan.seconds[1];
        let shift = mean_de(d, 1, &all, &[t1], out.plan.band.unwrap())
            - mean_de(d, 0, &all, &[t1], out.plan.band.unwrap());
        assert!((shift - 4f64.ln()).abs() < 0.15, "{shift}");
    }

    #[test]
    fn labels_are_balanced_and_in_range() {
        let spec = SyntheticSpec {
            samples: 20,
            effect: Effect::Spectral,
            ..SyntheticSpec::default()
        };
        let out = generate(&spec, &ElectrodeLayout::default()).unwrap();
        let d = &out.dataset;
        assert_eq!(d.len(), 20);
        assert_eq!(d.kind, RecordKind::De);
        for c in 0..3 {
            let n = d.labels.iter().filter(|&&y| y == c).count();
            assert!((6..=7).contains(&n));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            store: RecordKind::Raw,
            ..small(Effect::Spectral)
        };
        let a = generate(&spec, &ElectrodeLayout::default())
            .unwrap()
            .dataset
            .to_bytes()
            .unwrap();
        let b = generate(&spec, &ElectrodeLayout::default())
            .unwrap()
            .dataset
            .to_bytes()
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joint_marginals_are_ambiguous_but_pattern_is_not() {
        let spec = SyntheticSpec {
            samples: 150,
            classes: 3,
            seconds: 3,
            effect: Effect::Joint,
            ..SyntheticSpec::default()
        };
        let out = generate(&spec, &ElectrodeLayout::default()).unwrap();
        let report = out.ambiguity.unwrap();
        assert!(report.best_stump_accuracy < STUMP_LIMIT, "{report:?}");
        assert!(report.pattern_accuracy > 0.95, "{report:?}");
        assert_eq!(out.plan.regions.len(), 3);
        assert_eq!(out.plan.seconds.len(), 3);
    }

    #[test]
    fn stump_finds_a_clean_split() {
        let v = [0.1, 0.2, 5.0, 6.0, 0.3, 0.4, 7.0, 8.0];
        assert_eq!(stump_accuracy(&v, &[0, 0, 1, 1, 0, 0, 1, 1], 2), 1.0);
        assert_eq!(stump_accuracy(&[1.0; 4], &[0, 0, 1, 1], 2), 0.5);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bands = BandSet::default();
        let bad = |f: fn(&mut SyntheticSpec)| {
            let mut s = SyntheticSpec::default();
            f(&mut s);
            s.validate(&bands).is_err()
        };
        assert!(bad(|s| s.effect_size = 1.0));
        assert!(bad(|s| s.classes = 1));
        assert!(bad(|s| s.seconds = 2));
        assert!(bad(|s| s.band = "mu".into()));
        assert!(bad(|s| s.rate = 64));
    }
}
