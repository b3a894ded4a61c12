//! Fourier analysis of weight matrices over Z_p.

use std::collections::BTreeSet;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{MetricSet, MetricValue};

/// Normalized two-sided power spectrum, DC at index 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerSpectrum {
    pub power: Vec<f64>,
    /// Unnormalized total `sum |X_k|^2` before normalization.
    pub total: f64,
}

impl PowerSpectrum {
    pub fn p(&self) -> usize {
        self.power.len()
    }
}

/// Per-column DFT power along the row axis of a row-major `rows x cols`
/// matrix. Returns one unnormalized power vector per column.
pub fn column_powers(data: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    assert_eq!(data.len(), rows * cols, "matrix extent");
    let fft = FftPlanner::<f64>::new().plan_fft_forward(rows);
    let mut buf = vec![Complex::new(0.0, 0.0); rows];
    (0..cols)
        .map(|c| {
            for (r, z) in buf.iter_mut().enumerate() {
                *z = Complex::new(data[r * cols + c], 0.0);
            }
            fft.process(&mut buf);
            buf.iter().map(|z| z.norm_sqr()).collect()
        })
        .collect()
}

/// Power spectrum of a `p x d` matrix along its length-p axis, summed over
/// columns and normalized to one.
pub fn weight_spectrum(data: &[f64], p: usize, d: usize) -> Result<PowerSpectrum> {
    let mut power = vec![0.0; p];
    for col in column_powers(data, p, d) {
        for (acc, x) in power.iter_mut().zip(col) {
            *acc += x;
        }
    }
    let total: f64 = power.iter().sum();
    if total == 0.0 {
        return Err(Error::Degenerate("weight spectrum of an all-zero matrix".into()));
    }
    for x in &mut power {
        *x /= total;
    }
    Ok(PowerSpectrum { power, total })
}

/// Spectrum of a `d x p` matrix along its length-p (column) axis.
pub fn weight_spectrum_transposed(data: &[f64], d: usize, p: usize) -> Result<PowerSpectrum> {
    weight_spectrum(&transpose(data, d, p), p, d)
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

/// Shannon entropy of `probs` (zero terms contribute nothing) divided by
/// `ln(bins)`.
fn normalized_entropy(probs: &[f64], bins: f64) -> f64 {
    let h: f64 = probs.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum();
    h / bins.ln()
}

pub fn spectral_entropy(spec: &PowerSpectrum) -> f64 {
    normalized_entropy(&spec.power, spec.p() as f64)
}

/// Frequencies `k` with `1 <= k < p/2`.
fn half_band(p: usize) -> impl Iterator<Item = usize> {
    (1..p).take_while(move |k| 2 * k < p)
}

/// Dominant non-DC frequency in `[1, p/2)`, lowest index on ties.
pub fn peak_frequency(spec: &PowerSpectrum) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for k in half_band(spec.p()) {
        let v = spec.power[k];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Frequencies in `[1, p/2)` holding more than ten times the uniform share.
pub fn significant_frequencies(spec: &PowerSpectrum) -> BTreeSet<usize> {
    let threshold = 10.0 / spec.p() as f64;
    half_band(spec.p()).filter(|&k| spec.power[k] > threshold).collect()
}

/// Doubling sequence from `fundamental`, reflected into `[0, p/2]`.
pub fn harmonic_series(fundamental: u64, p: u64, count: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(count);
    let mut f = fundamental % p;
    for _ in 0..count {
        out.push(fold(f, p));
        f = (2 * f) % p;
    }
    out
}

/// Reflection of a frequency above `p/2` to `p - f`.
pub fn fold(f: u64, p: u64) -> u64 {
    let f = f % p;
    if 2 * f > p {
        p - f
    } else {
        f
    }
}

/// Power in bins `k < max(p/20, 10)`, DC included.
pub fn low_freq_power(spec: &PowerSpectrum) -> f64 {
    let p = spec.p();
    let cutoff = (p as f64 / 20.0).max(10.0);
    spec.power
        .iter()
        .enumerate()
        .take_while(|(k, _)| (*k as f64) < cutoff)
        .map(|(_, x)| x)
        .sum()
}

/// Power at the first nine multiples of `stride`, taken mod p.
pub fn stride_harmonic_power(spec: &PowerSpectrum, stride: usize) -> f64 {
    let p = spec.p();
    (1..=9).map(|k| spec.power[(k * stride) % p]).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NeuronSpectra {
    /// Mean over columns of the largest one-sided bin share.
    pub top1: f64,
    /// Mean over columns of the one-sided entropy over `ln(p/2)`.
    pub entropy: f64,
    /// Columns that carried non-DC power.
    pub columns: usize,
}

/// Per-column spectra of a `p x d` matrix. Each column's power is folded
/// onto `k = 1..=(p-1)/2` (conjugate bins merged, DC dropped) and
/// renormalized; columns with no non-DC power (to rounding) are skipped.
pub fn neuron_spectra(data: &[f64], p: usize, d: usize) -> Option<NeuronSpectra> {
    let half = (p - 1) / 2;
    let (mut top1, mut entropy, mut columns) = (0.0, 0.0, 0usize);
    for col in column_powers(data, p, d) {
        let mut folded: Vec<f64> = (1..=half).map(|k| col[k] + col[p - k]).collect();
        if p.is_multiple_of(2) {
            folded.push(col[p / 2]);
        }
        let total: f64 = folded.iter().sum();
        // rounding leaves ~1e-32 of spurious power in constant columns
        let all: f64 = col.iter().sum();
        if total.is_nan() || total <= all * 1e-20 {
            continue;
        }
        for x in &mut folded {
            *x /= total;
        }
        top1 += folded.iter().cloned().fold(0.0, f64::max);
        entropy += normalized_entropy(&folded, p as f64 / 2.0);
        columns += 1;
    }
    (columns > 0).then(|| NeuronSpectra {
        top1: top1 / columns as f64,
        entropy: entropy / columns as f64,
        columns,
    })
}

/// Emission state of the `fourier` hook: every frequency that has ever
/// crossed the significance threshold in the embedding spectrum.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTracker {
    pub ever_significant: BTreeSet<usize>,
}

impl FrequencyTracker {
    /// Rows for the `fourier` hook from a `p x d` embedding and a `d x p`
    /// decoder weight.
    pub fn metrics(&mut self, embedding: &[f64], decoder: &[f64], p: usize, d: usize) -> Result<MetricSet> {
        let emb = weight_spectrum(embedding, p, d)?;
        let significant = significant_frequencies(&emb);
        let fresh: Vec<f64> = significant
            .difference(&self.ever_significant)
            .map(|&k| k as f64)
            .collect();
        self.ever_significant.extend(significant.iter().copied());

        let mut out = MetricSet::new();
        out.put("spectral_entropy", spectral_entropy(&emb));
        let peak = peak_frequency(&emb);
        out.put("peak_frequency", peak.map(|k| k as f64));
        out.put("peak_power", peak.map(|k| emb.power[k]));
        out.put("n_significant_freqs", significant.len() as f64);
        let stride = (p as f64).sqrt().floor() as usize;
        out.put("stride_harmonic_power", stride_harmonic_power(&emb, stride));
        out.put("low_freq_power", low_freq_power(&emb));
        let table = self
            .ever_significant
            .iter()
            .map(|&k| (k.to_string(), emb.power[k]))
            .collect();
        out.put("freq_powers", MetricValue::Table(table));
        out.put("n_tracked_freqs", self.ever_significant.len() as f64);
        out.put("newly_acquired_freqs", MetricValue::List(fresh));

        match weight_spectrum_transposed(decoder, d, p) {
            Ok(dec) => {
                out.put("decoder_spectral_entropy", spectral_entropy(&dec));
                out.put("decoder_peak_frequency", peak_frequency(&dec).map(|k| k as f64));
                out.put(
                    "decoder_n_significant_freqs",
                    significant_frequencies(&dec).len() as f64,
                );
            }
            Err(Error::Degenerate(_)) => {
                for key in [
                    "decoder_spectral_entropy",
                    "decoder_peak_frequency",
                    "decoder_n_significant_freqs",
                ] {
                    out.put(key, MetricValue::Null);
                }
            }
            Err(e) => return Err(e),
        }
        let neurons = neuron_spectra(embedding, p, d);
        out.put("neuron_fourier_top1", neurons.map(|n| n.top1));
        out.put("neuron_fourier_entropy", neurons.map(|n| n.entropy));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;

    /// Textbook O(p^2) DFT power, used as an oracle for the FFT path.
    fn naive_power(x: &[f64]) -> Vec<f64> {
        let p = x.len();
        (0..p)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (k * n) as f64 / p as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                re * re + im * im
            })
            .collect()
    }

    fn spec(power: Vec<f64>) -> PowerSpectrum {
        PowerSpectrum { power, total: 1.0 }
    }

    fn cosine_column(p: usize, d: usize, freq: usize) -> Vec<f64> {
        let mut m = vec![0.0; p * d];
        for a in 0..p {
            m[a * d] = (2.0 * PI * (freq * a) as f64 / p as f64).cos();
        }
        m
    }

    #[test]
    fn pure_cosine_splits_between_conjugate_bins() {
        let s = weight_spectrum(&cosine_column(97, 3, 7), 97, 3).unwrap();
        assert!((s.power[7] - 0.5).abs() < 1e-12);
        assert!((s.power[90] - 0.5).abs() < 1e-12);
        assert_eq!(peak_frequency(&s), Some(7));
        assert_eq!(significant_frequencies(&s).into_iter().collect::<Vec<_>>(), vec![7]);
    }

    #[test]
    fn fft_matches_naive_dft() {
        let p = 31;
        let d = 4;
        let m: Vec<f64> = (0..p * d).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let fast = column_powers(&m, p, d);
        for (c, col) in fast.iter().enumerate() {
            let x: Vec<f64> = (0..p).map(|r| m[r * d + c]).collect();
            for (a, b) in col.iter().zip(naive_power(&x)) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn invariants_hold_on_arbitrary_matrix() {
        let (p, d) = (13, 5);
        let m: Vec<f64> = (0..p * d).map(|i| (i as f64 * 0.77).sin()).collect();
        let s = weight_spectrum(&m, p, d).unwrap();
        assert!((s.power.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.power.iter().all(|&x| x >= 0.0));
        for k in 1..p {
            assert!((s.power[k] - s.power[p - k]).abs() < 1e-12);
        }
        // Parseval: sum |X_k|^2 = p * sum |x|^2
        let energy: f64 = m.iter().map(|x| x * x).sum();
        assert!((s.total - p as f64 * energy).abs() < 1e-9 * s.total);
    }

    #[test]
    fn constant_matrix_is_all_dc() {
        let s = weight_spectrum(&[2.5; 12], 4, 3).unwrap();
        assert!((s.power[0] - 1.0).abs() < 1e-15);
        assert!((spectral_entropy(&s)).abs() < 1e-15);
    }

    #[test]
    fn zero_matrix_is_degenerate() {
        assert!(matches!(weight_spectrum(&[0.0; 6], 3, 2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn entropy_endpoints() {
        assert!((spectral_entropy(&spec(vec![0.2; 5])) - 1.0).abs() < 1e-15);
        assert_eq!(spectral_entropy(&spec(vec![0.0, 1.0, 0.0])), 0.0);
        let two = spectral_entropy(&spec(vec![0.5, 0.5, 0.0, 0.0]));
        assert!((two - 0.5).abs() < 1e-15);
    }

    #[test]
    fn entropy_drops_when_mass_moves_to_heavy_bin() {
        let before = spectral_entropy(&spec(vec![0.5, 0.3, 0.2]));
        let after = spectral_entropy(&spec(vec![0.6, 0.3, 0.1]));
        assert!(after < before);
    }

    #[test]
    fn peak_is_scale_invariant_and_prefers_low_index() {
        let m: Vec<f64> = (0..97 * 2).map(|i| ((i * 13) % 7) as f64).collect();
        let big: Vec<f64> = m.iter().map(|x| x * 1e3).collect();
        let a = weight_spectrum(&m, 97, 2).unwrap();
        let b = weight_spectrum(&big, 97, 2).unwrap();
        assert_eq!(peak_frequency(&a), peak_frequency(&b));
        let tie = spec(vec![0.0, 0.25, 0.25, 0.25, 0.25]);
        assert_eq!(peak_frequency(&tie), Some(1));
    }

    #[test]
    fn significance_threshold() {
        assert!(significant_frequencies(&spec(vec![1.0 / 97.0; 97])).is_empty());
        let mut delta = vec![0.0; 97];
        delta[11] = 1.0;
        let sig = significant_frequencies(&spec(delta.clone()));
        assert_eq!(sig.into_iter().collect::<Vec<_>>(), vec![11]);
        assert_eq!(stride_harmonic_power(&spec(delta), 11), 1.0);
    }

    #[test]
    fn harmonic_series_folds_at_half() {
        assert_eq!(
            harmonic_series(101, 9973, 7),
            vec![101, 202, 404, 808, 1616, 3232, 3509]
        );
        assert_eq!(harmonic_series(1, 8, 3), vec![1, 2, 4]);
        for f in harmonic_series(37, 97, 40) {
            assert!(2 * f <= 97);
        }
    }

    #[test]
    fn low_frequency_cutoff() {
        let s = spec(vec![1.0 / 97.0; 97]);
        assert!((low_freq_power(&s) - 10.0 / 97.0).abs() < 1e-15);
        let s = spec(vec![1.0 / 1009.0; 1009]);
        // cutoff 50.45 -> bins 0..=50
        assert!((low_freq_power(&s) - 51.0 / 1009.0).abs() < 1e-13);
    }

    #[test]
    fn identical_single_frequency_neurons() {
        let (p, d) = (97, 4);
        let mut m = vec![0.0; p * d];
        for a in 0..p {
            let v = (2.0 * PI * (5 * a) as f64 / p as f64).sin();
            for c in 0..d {
                m[a * d + c] = v;
            }
        }
        let n = neuron_spectra(&m, p, d).unwrap();
        assert_eq!(n.columns, 4);
        assert!((n.top1 - 1.0).abs() < 1e-12);
        assert!(n.entropy.abs() < 1e-12);
        assert!(neuron_spectra(&[1.0; 12], 3, 4).is_none());
    }

    #[test]
    fn tracker_reports_new_frequencies_once() {
        let (p, d) = (31usize, 2usize);
        let wave = |k: f64| -> Vec<f64> {
            (0..p)
                .flat_map(|a| {
                    let x = (2.0 * PI * k * a as f64 / p as f64).cos();
                    [x, 0.5 * x]
                })
                .collect()
        };
        let decoder = vec![0.0; d * p];
        let mut tr = FrequencyTracker::default();
        let m = tr.metrics(&wave(3.0), &decoder, p, d).unwrap();
        assert_eq!(m.num("peak_frequency"), Some(3.0));
        assert_eq!(m.get("newly_acquired_freqs"), Some(&MetricValue::List(vec![3.0])));
        assert_eq!(m.get("decoder_spectral_entropy"), Some(&MetricValue::Null));
        let m = tr.metrics(&wave(3.0), &decoder, p, d).unwrap();
        assert_eq!(m.get("newly_acquired_freqs"), Some(&MetricValue::List(vec![])));
        assert_eq!(m.num("n_tracked_freqs"), Some(1.0));
        assert!((m.num("neuron_fourier_top1").unwrap() - 1.0).abs() < 1e-12);
    }
}
