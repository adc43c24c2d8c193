//! Evaluation battery: token accuracy, frame error, SI-SDR improvement,
//! latent-class accuracy through a nearest-template classifier, and
//! average-rank aggregation across systems.
//!
//! Everything here is a pure function of its inputs, so evaluation
//! parallelizes over utterances; the report is assembled in a fixed order
//! afterwards to keep artifacts diffable.

use crate::error::{Error, Result};
use crate::grid::TokenGrid;
use crate::signal::{si_sdr, SignalConfig, UtteranceSpec, Waveform};
use crate::tensor::Tensor;

/// Fraction of positions where the two grids hold the same token.
/// Symmetric in its arguments. Both grids must be mask-free; callers
/// enforce that where grids can carry mask ids.
pub fn token_accuracy(a: &TokenGrid, b: &TokenGrid) -> Result<f64> {
    if a.frames() != b.frames() || a.stages() != b.stages() {
        return Err(Error::shape(format!(
            "token accuracy: {}x{} vs {}x{}",
            a.frames(),
            a.stages(),
            b.frames(),
            b.stages()
        )));
    }
    let hits = a.data().iter().zip(b.data()).filter(|(x, y)| x == y).count();
    Ok(hits as f64 / a.data().len() as f64)
}

/// Mean absolute difference over two equally-shaped frame tensors.
pub fn frame_mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("frame MAE", a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

/// Mean squared difference over two equally-shaped frame tensors.
pub fn frame_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape("frame MSE", a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

fn check_same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// SI-SDR gain of the enhanced estimate over the noisy input against the
/// same clean reference, in dB. Computed per utterance so that averaging
/// controls for each utterance's SNR draw.
pub fn si_sdr_improvement(clean: &Waveform, noisy: &Waveform, enhanced: &Waveform) -> Result<f64> {
    Ok(si_sdr(clean, enhanced)? - si_sdr(clean, noisy)?)
}

/// Interpolation factor of the classifier's spectral analysis: frames are
/// zero-padded to this multiple of the window before the transform, so bin
/// spacing is `sample_rate / (PAD * frame_len)`.
const CLASSIFIER_PAD: usize = 8;

/// Nearest-template classifier for the generator's latent classes.
///
/// The features are per-frame *spectral energy profiles*: magnitudes of a
/// zero-padded Fourier transform of the Hann-windowed frame over the bins
/// inside the codec passband, squared and normalized to unit sum. The
/// generator keeps phase continuous across class switches, so any feature
/// of the one-sided analysis coefficients alone varies with the phase a
/// frame happens to land on; taking both quadratures makes the profile a
/// function of the class's frequency content only, and the normalization
/// removes the per-utterance gain draw. One template per class is the mean
/// profile over every fitted frame carrying that label.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneClassifier {
    templates: Vec<Vec<f64>>,
    signal: SignalConfig,
}

impl PhoneClassifier {
    /// Fits templates on clean waveforms with their generation sidecars.
    /// Every class must occur in the corpus.
    pub fn fit<'a, I>(signal: &SignalConfig, corpus: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a Waveform, &'a UtteranceSpec)>,
    {
        signal.validate()?;
        let k = signal.k_phone;
        let bins = passband_bins(signal);
        let mut sums = vec![vec![0.0; bins]; k];
        let mut counts = vec![0usize; k];
        for (wave, spec) in corpus {
            let profiles = frame_profiles(wave, signal)?;
            for (f, profile) in profiles.iter().enumerate() {
                let label = spec.frame_label(f);
                if label >= k {
                    return Err(Error::vocab(format!(
                        "classifier fit: frame label {label} outside the {k} configured classes"
                    )));
                }
                for (s, p) in sums[label].iter_mut().zip(profile) {
                    *s += p;
                }
                counts[label] += 1;
            }
        }
        let mut templates = Vec::with_capacity(k);
        for (label, (sum, count)) in sums.into_iter().zip(&counts).enumerate() {
            if *count == 0 {
                return Err(Error::data(format!(
                    "classifier fit: class {label} never occurs in the fitting corpus"
                )));
            }
            templates.push(sum.into_iter().map(|s| s / *count as f64).collect());
        }
        Ok(Self { templates, signal: signal.clone() })
    }

    pub fn class_count(&self) -> usize {
        self.templates.len()
    }

    /// Nearest template (squared Euclidean over energy profiles, ties to
    /// the lower class index) for each analysis frame of the waveform.
    pub fn classify(&self, wave: &Waveform) -> Result<Vec<usize>> {
        let profiles = frame_profiles(wave, &self.signal)?;
        let mut out = Vec::with_capacity(profiles.len());
        for profile in &profiles {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (label, template) in self.templates.iter().enumerate() {
                let d: f64 = template
                    .iter()
                    .zip(profile)
                    .map(|(&t, &p)| (t - p) * (t - p))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = label;
                }
            }
            out.push(best);
        }
        Ok(out)
    }
}

/// Fraction of frames whose classified latent class matches the
/// generation sidecar's ground truth.
pub fn phone_accuracy(
    enhanced: &Waveform,
    spec: &UtteranceSpec,
    classifier: &PhoneClassifier,
) -> Result<f64> {
    let predicted = classifier.classify(enhanced)?;
    let hits = predicted
        .iter()
        .enumerate()
        .filter(|&(f, &p)| p == spec.frame_label(f))
        .count();
    Ok(hits as f64 / predicted.len() as f64)
}

/// Spectral bins covering the codec passband `d_emb · sr / (2 · frame_len)`
/// at the padded resolution, DC included.
fn passband_bins(signal: &SignalConfig) -> usize {
    signal.d_emb * CLASSIFIER_PAD / 2 + 1
}

/// One normalized spectral energy profile per analysis frame, on the same
/// frame grid as the codec frontend. An all-zero frame maps to the uniform
/// profile so classification stays deterministic.
fn frame_profiles(wave: &Waveform, signal: &SignalConfig) -> Result<Vec<Vec<f64>>> {
    if wave.len() < signal.frame_len {
        return Err(Error::data(format!(
            "classifier: {} samples is shorter than one {}-sample frame",
            wave.len(),
            signal.frame_len
        )));
    }
    let w = signal.frame_len;
    let bins = passband_bins(signal);
    let padded = w * CLASSIFIER_PAD;
    let window: Vec<f64> = (0..w)
        .map(|n| {
            let x = std::f64::consts::PI * n as f64 / w as f64;
            x.sin() * x.sin()
        })
        .collect();
    // Quadrature tables for the padded transform, restricted to the
    // passband bins.
    let mut cos_t = vec![0.0; bins * w];
    let mut sin_t = vec![0.0; bins * w];
    for b in 0..bins {
        for n in 0..w {
            let angle = std::f64::consts::TAU * b as f64 * n as f64 / padded as f64;
            cos_t[b * w + n] = angle.cos();
            sin_t[b * w + n] = angle.sin();
        }
    }

    let frames = signal.frame_count(wave.len());
    let mut out = Vec::with_capacity(frames);
    let mut windowed = vec![0.0; w];
    for f in 0..frames {
        // Ground-truth labels follow the hop segment a frame *starts* in,
        // but the codec frame grid centers its windows on the boundary
        // between that segment and the next. Shifting the classifier's
        // window half a hop left puts its peak on the labeled segment.
        let start = (f * signal.hop).saturating_sub(signal.hop / 2);
        for n in 0..w {
            windowed[n] = wave.samples[start + n] * window[n];
        }
        let mut profile = vec![0.0; bins];
        let mut total = 0.0;
        for (b, p) in profile.iter_mut().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for n in 0..w {
                re += windowed[n] * cos_t[b * w + n];
                im += windowed[n] * sin_t[b * w + n];
            }
            *p = re * re + im * im;
            total += *p;
        }
        if total <= 0.0 {
            profile.fill(0.0);
        } else {
            // Log energies, mean-subtracted: gain becomes an additive
            // constant and vanishes, and harmonic level *ratios* (the
            // class envelope signature) weigh as much as peak positions.
            // The floor sits above codec quantization noise so that a
            // reconstruction's near-empty bins do not swamp the distance.
            profile.iter_mut().for_each(|p| *p = (*p / total + 1e-4).ln());
            let mean = profile.iter().sum::<f64>() / bins as f64;
            profile.iter_mut().for_each(|p| *p -= mean);
        }
        out.push(profile);
    }
    Ok(out)
}

/// Whether larger or smaller metric values should rank first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    HigherIsBetter,
    LowerIsBetter,
}

/// One scored utterance: `value` of `metric` for `system` on `utterance`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub utterance: String,
    pub system: String,
    pub metric: String,
    pub value: f64,
}

/// Accumulated per-utterance scores plus free-form metadata (checkpoint
/// id, config, seed). Rows keep insertion order; the CSV column order is
/// fixed as `utterance,system,metric,value`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub meta: Vec<(String, String)>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_meta(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.meta.push((key.into(), value.into()));
    }

    pub fn push(
        &mut self,
        utterance: impl Into<String>,
        system: impl Into<String>,
        metric: impl Into<String>,
        value: f64,
    ) {
        self.rows.push(EvalRow {
            utterance: utterance.into(),
            system: system.into(),
            metric: metric.into(),
            value,
        });
    }

    /// Distinct systems in first-appearance order.
    pub fn systems(&self) -> Vec<String> {
        dedup_in_order(self.rows.iter().map(|r| r.system.as_str()))
    }

    /// Distinct metrics in first-appearance order.
    pub fn metrics(&self) -> Vec<String> {
        dedup_in_order(self.rows.iter().map(|r| r.metric.as_str()))
    }

    /// Mean and row count of one system/metric cell, in insertion order
    /// (deterministic accumulation).
    pub fn mean(&self, system: &str, metric: &str) -> Option<(f64, usize)> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in &self.rows {
            if row.system == system && row.metric == metric {
                sum += row.value;
                count += 1;
            }
        }
        (count > 0).then(|| (sum / count as f64, count))
    }

    /// The utterance ids scored for one system/metric cell, sorted.
    fn utterance_set(&self, system: &str, metric: &str) -> Vec<&str> {
        let mut ids: Vec<&str> = self
            .rows
            .iter()
            .filter(|r| r.system == system && r.metric == metric)
            .map(|r| r.utterance.as_str())
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Comma-separated table: `# key = value` metadata lines, the fixed
    /// header, then one row per scored utterance in insertion order.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out.push_str("utterance,system,metric,value\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                row.utterance, row.system, row.metric, row.value
            ));
        }
        out
    }

    /// Structured-text summary: metadata followed by per-system per-metric
    /// means with their counts.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for system in self.systems() {
            for metric in self.metrics() {
                if let Some((mean, count)) = self.mean(&system, &metric) {
                    out.push_str(&format!("{system} {metric} mean={mean} n={count}\n"));
                }
            }
        }
        out
    }
}

fn dedup_in_order<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = Vec::new();
    for item in items {
        if !seen.iter().any(|s: &String| s == item) {
            seen.push(item.to_string());
        }
    }
    seen
}

/// Average rank per system, lower is better: for each listed metric the
/// systems are ranked on their mean score (1 = best in the declared
/// direction, exact ties share the mean of their positions), and a
/// system's overall score is the mean of its ranks. Returned in the
/// report's system order. Depends on score order only, so any strictly
/// monotone rescaling of a metric leaves the result unchanged.
pub fn rank_aggregate(
    report: &EvalReport,
    directions: &[(&str, Direction)],
) -> Result<Vec<(String, f64)>> {
    let systems = report.systems();
    if systems.len() < 2 {
        return Err(Error::config(format!(
            "rank aggregation needs at least two systems, report has {}",
            systems.len()
        )));
    }
    if directions.is_empty() {
        return Err(Error::config("rank aggregation needs at least one metric".to_string()));
    }
    let mut totals = vec![0.0; systems.len()];
    for &(metric, direction) in directions {
        let mut means = Vec::with_capacity(systems.len());
        for system in &systems {
            let (mean, _) = report.mean(system, metric).ok_or_else(|| {
                Error::data(format!("system {system} has no rows for metric {metric}"))
            })?;
            if !mean.is_finite() {
                return Err(Error::numeric(format!(
                    "system {system} has a non-finite mean for metric {metric}"
                )));
            }
            means.push(mean);
        }
        // Rankings only compare within a metric, so every system must have
        // been scored on the same utterances.
        let reference = report.utterance_set(&systems[0], metric);
        for system in &systems[1..] {
            if report.utterance_set(system, metric) != reference {
                return Err(Error::data(format!(
                    "metric {metric} was computed over different utterance sets for {} and {system}",
                    systems[0]
                )));
            }
        }
        for (total, rank) in totals.iter_mut().zip(fractional_ranks(&means, direction)) {
            *total += rank;
        }
    }
    Ok(systems
        .into_iter()
        .zip(totals)
        .map(|(system, total)| (system, total / directions.len() as f64))
        .collect())
}

/// Positions 1..=n after sorting by the direction, with exactly equal
/// values sharing the mean of their positions.
fn fractional_ranks(values: &[f64], direction: Direction) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        let cmp = values[a].partial_cmp(&values[b]).expect("finite means");
        match direction {
            Direction::HigherIsBetter => cmp.reverse(),
            Direction::LowerIsBetter => cmp,
        }
    });
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions are 1-based: the group spans i+1 ..= j+1.
        let shared = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}
