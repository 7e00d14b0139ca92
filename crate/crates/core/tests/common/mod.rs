//! Test-side oracles shared by integration targets.

#![allow(dead_code)]

use defusion::tensor::Rng;

/// Fraction of (positive, negative) pairs ranked correctly, ties worth half.
pub fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn counts(scores: &[f64], labels: &[u8]) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut tn, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= 0.5, l == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, false) => tn += 1.0,
            (false, true) => fn_ += 1.0,
        }
    }
    (tp, fp, tn, fn_)
}

pub fn f1_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let (tp, fp, _, fn_) = counts(scores, labels);
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / (tp + fp);
    let r = tp / (tp + fn_);
    2.0 * p * r / (p + r)
}

pub fn accuracy_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let (tp, _, tn, _) = counts(scores, labels);
    (tp + tn) / scores.len() as f64
}

/// Random instance with both classes and some exact ties.
pub fn random_instance(rng: &mut Rng, n: usize) -> (Vec<f64>, Vec<u8>) {
    loop {
        let labels: Vec<u8> = (0..n).map(|_| rng.bernoulli(0.4) as u8).collect();
        if labels.contains(&0) && labels.contains(&1) {
            let scores = labels
                .iter()
                .map(|&l| {
                    let s = 1.0 / (1.0 + (-(rng.normal() + l as f64)).exp());
                    if rng.bernoulli(0.2) {
                        (s * 10.0).round() / 10.0
                    } else {
                        s
                    }
                })
                .collect();
            return (scores, labels);
        }
    }
}
