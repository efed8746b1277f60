//! Frozen-embedding evaluation: a multinomial logistic regression trained
//! by Adam under stratified k-fold cross-validation. Features are
//! standardized with statistics fitted on each training split only.

use super::TrainError;
use crate::tensor::{AdamConfig, AdamState};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PROBE_EPOCHS: usize = 200;
const PROBE_LR: f64 = 0.1;
const PROBE_WEIGHT_DECAY: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub seed: u64,
}

/// Stratified fold ids: per-class seeded shuffle dealt round-robin.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut assignment = vec![0usize; labels.len()];
    let mut cursor = 0usize;
    for class in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = cursor % folds;
            cursor += 1;
        }
    }
    assignment
}

pub fn probe(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    folds: usize,
    seed: u64,
) -> Result<ProbeReport, TrainError> {
    if embeddings.len() != labels.len() {
        return Err(TrainError::Config(format!(
            "{} embeddings for {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if folds < 2 {
        return Err(TrainError::Config("eval.folds must be >= 2".into()));
    }
    if embeddings.len() < folds {
        return Err(TrainError::Config(format!(
            "{} samples cannot fill {} folds",
            embeddings.len(),
            folds
        )));
    }
    let width = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != width) {
        return Err(TrainError::Config("ragged embedding rows".into()));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    if num_classes < 2 {
        return Err(TrainError::Config("probe needs at least two classes".into()));
    }

    let fold_of = stratified_folds(labels, folds, seed);
    let mut fold_accuracies = Vec::with_capacity(folds);
    for fold in 0..folds {
        let train_idx: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] != fold).collect();
        let test_idx: Vec<usize> = (0..labels.len()).filter(|&i| fold_of[i] == fold).collect();

        for class in 0..num_classes {
            if !train_idx.iter().any(|&i| labels[i] == class) {
                log::warn!("fold {fold}: class {class} absent from the training split");
            }
        }

        let (mean, std) = fit_standardizer(embeddings, &train_idx, width);
        let x_train = standardized(embeddings, &train_idx, &mean, &std);
        let x_test = standardized(embeddings, &test_idx, &mean, &std);
        let y_train: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();

        let (w, b) = train_logistic(&x_train, &y_train, width, num_classes, seed);

        let mut correct = 0usize;
        for (row, &i) in x_test.chunks(width).zip(&test_idx) {
            if predict(row, &w, &b, width, num_classes) == labels[i] {
                correct += 1;
            }
        }
        fold_accuracies.push(correct as f64 / test_idx.len().max(1) as f64);
    }

    let mean = fold_accuracies.iter().sum::<f64>() / folds as f64;
    let var = fold_accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / folds as f64;
    Ok(ProbeReport { fold_accuracies, mean, std: var.sqrt(), seed })
}

fn fit_standardizer(embeddings: &[Vec<f64>], idx: &[usize], width: usize) -> (Vec<f64>, Vec<f64>) {
    let n = idx.len().max(1) as f64;
    let mut mean = vec![0.0; width];
    for &i in idx {
        for (m, &v) in mean.iter_mut().zip(&embeddings[i]) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; width];
    for &i in idx {
        for j in 0..width {
            let d = embeddings[i][j] - mean[j];
            std[j] += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt().max(1e-8);
    }
    (mean, std)
}

fn standardized(embeddings: &[Vec<f64>], idx: &[usize], mean: &[f64], std: &[f64]) -> Vec<f64> {
    let width = mean.len();
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        for j in 0..width {
            out.push((embeddings[i][j] - mean[j]) / std[j]);
        }
    }
    out
}

/// Full-batch Adam on softmax cross-entropy; returns `(W[C×D], b[C])`.
fn train_logistic(
    x: &[f64],
    y: &[usize],
    width: usize,
    classes: usize,
    _seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut w = vec![0.0f64; classes * width];
    let mut b = vec![0.0f64; classes];
    let cfg = AdamConfig {
        learning_rate: PROBE_LR,
        weight_decay: 0.0, // decay folded into the gradient below
        ..Default::default()
    };
    let mut adam: AdamState<f64> = AdamState::new(cfg, &[w.len(), b.len()]);

    let mut probs = vec![0.0f64; classes];
    for _ in 0..PROBE_EPOCHS {
        let mut gw = vec![0.0f64; classes * width];
        let mut gb = vec![0.0f64; classes];
        for (i, row) in x.chunks(width).enumerate() {
            softmax_logits(row, &w, &b, width, classes, &mut probs);
            for c in 0..classes {
                let delta = probs[c] - if y[i] == c { 1.0 } else { 0.0 };
                gb[c] += delta;
                for j in 0..width {
                    gw[c * width + j] += delta * row[j];
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        for (g, wv) in gw.iter_mut().zip(&w) {
            *g = *g * inv_n + PROBE_WEIGHT_DECAY * wv;
        }
        for g in &mut gb {
            *g *= inv_n;
        }
        adam.step_group(0, &mut w, &gw, true);
        adam.step_group(1, &mut b, &gb, false);
    }
    (w, b)
}

fn softmax_logits(row: &[f64], w: &[f64], b: &[f64], width: usize, classes: usize, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for c in 0..classes {
        let mut z = b[c];
        for j in 0..width {
            z += w[c * width + j] * row[j];
        }
        out[c] = z;
        max = max.max(z);
    }
    let mut sum = 0.0;
    for v in out.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
}

fn predict(row: &[f64], w: &[f64], b: &[f64], width: usize, classes: usize) -> usize {
    let mut best = (f64::NEG_INFINITY, 0usize);
    for c in 0..classes {
        let mut z = b[c];
        for j in 0..width {
            z += w[c * width + j] * row[j];
        }
        if z > best.0 {
            best = (z, c);
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut embeddings = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let class = i % 2;
            let center = if class == 0 { -3.0 } else { 3.0 };
            embeddings.push(vec![
                center + rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ]);
            labels.push(class);
        }
        let report = probe(&embeddings, &labels, 10, 0).unwrap();
        assert_eq!(report.mean, 1.0, "{:?}", report.fold_accuracies);
    }

    #[test]
    fn shuffled_labels_sit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut means = Vec::new();
        for shuffle in 0..20 {
            let embeddings: Vec<Vec<f64>> = (0..40)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let mut labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
            labels.shuffle(&mut rng);
            let report = probe(&embeddings, &labels, 5, shuffle).unwrap();
            means.push(report.mean);
        }
        let overall = means.iter().sum::<f64>() / means.len() as f64;
        assert!((overall - 0.5).abs() < 0.1, "null accuracy {overall}");
    }

    #[test]
    fn two_folds_on_four_points_split_evenly() {
        let labels = vec![0, 0, 1, 1];
        let fold_of = stratified_folds(&labels, 2, 3);
        assert_eq!(fold_of.iter().filter(|&&f| f == 0).count(), 2);
        assert_eq!(fold_of.iter().filter(|&&f| f == 1).count(), 2);
    }

    #[test]
    fn folds_partition_and_stratify() {
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let fold_of = stratified_folds(&labels, 5, 9);
        for fold in 0..5 {
            let members: Vec<usize> =
                (0..30).filter(|&i| fold_of[i] == fold).collect();
            assert_eq!(members.len(), 6);
            for class in 0..3 {
                assert_eq!(members.iter().filter(|&&i| labels[i] == class).count(), 2);
            }
        }
    }

    #[test]
    fn absent_class_still_evaluates() {
        // Class 1 has a single sample; two of the three folds train without it.
        let embeddings: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64]).collect();
        let labels = vec![0, 0, 0, 0, 0, 0, 1];
        let report = probe(&embeddings, &labels, 3, 0).unwrap();
        assert_eq!(report.fold_accuracies.len(), 3);
    }
}
