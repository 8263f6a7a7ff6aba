use super::Sample;
use crate::error::{Error, Result};
use crate::model::ReModel;
use serde::Serialize;

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Micro accuracy of argmax predictions over whole test samples.
pub fn evaluate_accuracy(model: &ReModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty test set"));
    }
    let mut correct = 0;
    for s in samples {
        let inst = s.instance(None);
        if argmax(&model.predict(&inst.sentences)?) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistogramBin {
    pub low: f64,
    pub high: f64,
    pub clean: usize,
    pub noisy: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NoiseReport {
    pub mean_clean: f64,
    pub mean_noisy: f64,
    /// `mean_clean − mean_noisy`.
    pub gap: f64,
    /// Probability that a random clean sample outranks a random noisy one;
    /// `None` when either class is empty.
    pub auc: Option<f64>,
    pub histogram: Vec<HistogramBin>,
}

impl NoiseReport {
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,clean,noisy\n");
        for b in &self.histogram {
            out.push_str(&format!("{:.1},{:.1},{},{}\n", b.low, b.high, b.clean, b.noisy));
        }
        out
    }
}

/// Mann–Whitney AUC with ties counted half.
pub fn auc(positive: &[f64], negative: &[f64]) -> Option<f64> {
    if positive.is_empty() || negative.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in positive {
        for &n in negative {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (positive.len() * negative.len()) as f64)
}

/// Separation of selection probabilities between clean and noisy samples,
/// with a ten-bin histogram.
pub fn noise_separation(probs: &[(f64, bool)]) -> NoiseReport {
    let clean: Vec<f64> = probs.iter().filter(|p| p.1).map(|p| p.0).collect();
    let noisy: Vec<f64> = probs.iter().filter(|p| !p.1).map(|p| p.0).collect();
    let mean = |xs: &[f64]| if xs.is_empty() { 0.0 } else { xs.iter().sum::<f64>() / xs.len() as f64 };
    let mut histogram: Vec<HistogramBin> = (0..10)
        .map(|i| HistogramBin { low: i as f64 / 10.0, high: (i + 1) as f64 / 10.0, clean: 0, noisy: 0 })
        .collect();
    for &(p, is_clean) in probs {
        let bin = ((p * 10.0) as usize).min(9);
        if is_clean {
            histogram[bin].clean += 1;
        } else {
            histogram[bin].noisy += 1;
        }
    }
    let (mc, mn) = (mean(&clean), mean(&noisy));
    NoiseReport { mean_clean: mc, mean_noisy: mn, gap: mc - mn, auc: auc(&clean, &noisy), histogram }
}
