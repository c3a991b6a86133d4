//! Classification metrics: NLL, 0-1 error, binned ECE and the generalized
//! ambiguity decomposition of the cross-entropy under logit averaging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, log_sum_exp, log_sum_exp_f64, Tensor};

/// Probabilities below this are floored before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default number of ECE bins.
pub const ECE_BINS: usize = 15;

/// Labelled feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Tensor,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "features must be N×d, got {:?}",
                features.shape()
            )));
        }
        if features.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        Ok(Self { features, labels })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// One more than the largest label.
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn check_labels(&self, classes: usize) -> Result<()> {
        check_labels(&self.labels, classes)
    }

    /// Copy with rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let rows: Vec<Vec<f32>> = order
            .iter()
            .map(|&i| self.features.row(i).to_vec())
            .collect();
        let labels = order.iter().map(|&i| self.labels[i]).collect();
        Self::new(Tensor::from_rows(&rows)?, labels)
    }
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().position(|&y| y >= classes) {
        Some(i) => Err(Error::Data(format!(
            "label {} at row {i} is outside [0, {classes})",
            labels[i]
        ))),
        None => Ok(()),
    }
}

fn check_probs(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let &[n, k] = probs.shape() else {
        return Err(Error::Dimension(format!(
            "predictions must be N×K, got {:?}",
            probs.shape()
        )));
    };
    if n != labels.len() {
        return Err(Error::Dimension(format!(
            "{n} prediction rows but {} labels",
            labels.len()
        )));
    }
    check_labels(labels, k)?;
    Ok((n, k))
}

/// Mean negative log-probability of the true class.
pub fn nll(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_probs(probs, labels)?;
    let total: f64 = probs
        .rows()
        .zip(labels)
        .map(|(p, &y)| -(p[y] as f64).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n as f64)
}

/// Fraction of rows whose argmax differs from the label.
pub fn err(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_probs(probs, labels)?;
    let wrong = probs
        .rows()
        .zip(labels)
        .filter(|(p, &y)| argmax(p) != y)
        .count();
    Ok(wrong as f64 / n as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins
/// `((j-1)/J, j/J]`.
pub fn ece(probs: &Tensor, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::Config("ECE needs at least one bin".into()));
    }
    let (n, _) = check_probs(probs, labels)?;
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf_sum = vec![0.0f64; bins];
    for (p, &y) in probs.rows().zip(labels) {
        let pred = argmax(p);
        let conf = p[pred] as f64;
        let j = ((conf * bins as f64).ceil() as usize).clamp(1, bins) - 1;
        count[j] += 1;
        conf_sum[j] += conf;
        if pred == y {
            correct[j] += 1;
        }
    }
    let mut total = 0.0;
    for j in 0..bins {
        if count[j] == 0 {
            continue;
        }
        let c = count[j] as f64;
        let acc = correct[j] as f64 / c;
        let avg_conf = conf_sum[j] / c;
        total += c / n as f64 * (acc - avg_conf).abs();
    }
    Ok(total)
}

/// `(a) average member loss`, `(b) ambiguity`, `(c) ensemble loss`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub avg_loss: f64,
    pub ambiguity: f64,
    pub ensemble_loss: f64,
}

fn check_member_logits(member_logits: &Tensor, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let &[s, n, k] = member_logits.shape() else {
        return Err(Error::Dimension(format!(
            "member logits must be S×N×K, got {:?}",
            member_logits.shape()
        )));
    };
    if n != labels.len() {
        return Err(Error::Dimension(format!(
            "{n} logit rows per member but {} labels",
            labels.len()
        )));
    }
    check_labels(labels, k)?;
    Ok((s, n, k))
}

/// `−log softmax(z)[y]` for one row.
pub fn cross_entropy(logits: &[f32], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label] as f64
}

/// Mean cross-entropy of one model's `N×K` logits.
pub fn logit_nll(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = check_probs(logits, labels)?;
    let total: f64 = logits
        .rows()
        .zip(labels)
        .map(|(z, &y)| cross_entropy(z, y))
        .sum();
    Ok(total / n as f64)
}

/// Generalized ambiguity decomposition under logit averaging.
///
/// `a` and `c` are computed independently; `b = a − c`.
pub fn ambiguity_decomposition(member_logits: &Tensor, labels: &[usize]) -> Result<Decomposition> {
    let (s, n, k) = check_member_logits(member_logits, labels)?;
    let data = member_logits.data();

    let mut avg_loss = 0.0;
    for m in 0..s {
        let mut member = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let off = (m * n + i) * k;
            member += cross_entropy(&data[off..off + k], y);
        }
        avg_loss += member / n as f64;
    }
    avg_loss /= s as f64;

    let mut ensemble_loss = 0.0;
    let mut mean = vec![0.0f64; k];
    for (i, &y) in labels.iter().enumerate() {
        mean.iter_mut().for_each(|v| *v = 0.0);
        for m in 0..s {
            let off = (m * n + i) * k;
            for (acc, &z) in mean.iter_mut().zip(&data[off..off + k]) {
                *acc += z as f64;
            }
        }
        mean.iter_mut().for_each(|v| *v /= s as f64);
        ensemble_loss += log_sum_exp_f64(&mean) - mean[y];
    }
    ensemble_loss /= n as f64;

    Ok(Decomposition {
        avg_loss,
        ambiguity: avg_loss - ensemble_loss,
        ensemble_loss,
    })
}

/// NLL of the probability-averaged ensemble, evaluated in log space:
/// `−log((1/S) Σₛ softmax(zₛ)[y])`.
///
/// Agrees with [`nll`] on the averaged probabilities wherever those exceed
/// the floor; with `S = 1` it reduces exactly to the member's cross-entropy.
pub fn ensemble_nll(member_logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (s, n, k) = check_member_logits(member_logits, labels)?;
    let data = member_logits.data();
    let ln_s = (s as f64).ln();
    let mut total = 0.0;
    let mut logp = vec![0.0f64; s];
    for (i, &y) in labels.iter().enumerate() {
        for (m, lp) in logp.iter_mut().enumerate() {
            let off = (m * n + i) * k;
            *lp = -cross_entropy(&data[off..off + k], y);
        }
        total += ln_s - log_sum_exp_f64(&logp);
    }
    Ok(total / n as f64)
}

/// Everything reported for one evaluated model or ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub err: f64,
    pub ece: f64,
    pub avg_loss: f64,
    /// Absent for single-model evaluations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambiguity: Option<f64>,
    pub ensemble_loss: f64,
    pub memory_bits: u64,
    pub per_member_nll: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(rows: &[&[f32]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn nll_examples() {
        let uniform = probs(&[&[0.25; 4]]);
        assert!((nll(&uniform, &[2]).unwrap() - 4f64.ln()).abs() < 1e-7);
        assert_eq!(nll(&probs(&[&[0.0, 1.0, 0.0]]), &[1]).unwrap(), 0.0);
        let v = nll(&probs(&[&[0.25, 0.75]]), &[1]).unwrap();
        assert!((v - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn nll_floors_zero_probability() {
        let v = nll(&probs(&[&[1.0, 0.0]]), &[1]).unwrap();
        assert!((v - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let p = probs(&[&[0.5, 0.5]]);
        assert!(matches!(nll(&p, &[2]), Err(Error::Data(_))));
        assert!(matches!(err(&p, &[5]), Err(Error::Data(_))));
        assert!(matches!(ece(&p, &[2], 15), Err(Error::Data(_))));
    }

    #[test]
    fn err_examples() {
        let p = probs(&[&[0.9, 0.1], &[0.2, 0.8], &[0.6, 0.4], &[0.3, 0.7]]);
        assert_eq!(err(&p, &[0, 1, 0, 1]).unwrap(), 0.0);
        assert_eq!(err(&p, &[0, 1, 1, 0]).unwrap(), 0.5);
        let u = probs(&[&[0.25; 4], &[0.25; 4]]);
        assert_eq!(err(&u, &[0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn ece_perfectly_calibrated_bin() {
        // five points at confidence 0.8, four correct
        let p = probs(&[&[0.8f32, 0.2][..]; 5]);
        let v = ece(&p, &[0, 0, 0, 0, 1], ECE_BINS).unwrap();
        assert!(v.abs() < 1e-7, "{v}");
    }

    #[test]
    fn ece_hand_cases() {
        let p = probs(&[&[0.9, 0.1], &[0.1, 0.9]]);
        let v = ece(&p, &[0, 1], ECE_BINS).unwrap();
        assert!((v - 0.1).abs() < 1e-7, "{v}");

        let p = probs(&[&[0.9, 0.1], &[0.1, 0.9], &[0.6, 0.4], &[0.4, 0.6]]);
        let v = ece(&p, &[0, 1, 1, 0], ECE_BINS).unwrap();
        assert!((v - 0.35).abs() < 1e-7, "{v}");
    }

    #[test]
    fn ece_zero_bins_rejected() {
        assert!(ece(&probs(&[&[1.0]]), &[0], 0).is_err());
    }

    fn logits3(s: usize, n: usize, k: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![s, n, k], data).unwrap()
    }

    #[test]
    fn decomposition_hand_case() {
        let z = logits3(2, 1, 2, vec![0.0, 0.0, 2.0, 0.0]);
        let d = ambiguity_decomposition(&z, &[0]).unwrap();
        assert!((d.avg_loss - 0.410038).abs() < 1e-6);
        assert!((d.ensemble_loss - 0.313262).abs() < 1e-6);
        assert!((d.ambiguity - 0.096776).abs() < 1e-6);
    }

    #[test]
    fn decomposition_single_member_is_degenerate() {
        let z = logits3(1, 2, 3, vec![0.3, -1.0, 2.0, 1.0, 1.5, -0.5]);
        let d = ambiguity_decomposition(&z, &[2, 0]).unwrap();
        assert_eq!(d.ambiguity, 0.0);
        assert_eq!(d.avg_loss, d.ensemble_loss);
        assert_eq!(ensemble_nll(&z, &[2, 0]).unwrap(), d.avg_loss);
    }

    #[test]
    fn decomposition_identical_members() {
        let row = [0.3f32, -1.0, 2.0, 1.0, 1.5, -0.5];
        let z = logits3(3, 2, 3, row.repeat(3));
        let d = ambiguity_decomposition(&z, &[1, 1]).unwrap();
        assert!(d.ambiguity.abs() < 1e-12);
    }

    #[test]
    fn ensemble_nll_matches_probability_route() {
        let data = vec![0.0, 0.0, 1.0, 3.0, -2.0, 0.5, 2.0, 0.0, 0.1, 0.2, 0.3, -0.3];
        let z = logits3(3, 2, 2, data.clone());
        let labels = [1, 0];
        let mut mean = vec![0.0f32; 4];
        for m in 0..3 {
            let p = Tensor::new(vec![2, 2], data[m * 4..(m + 1) * 4].to_vec())
                .unwrap()
                .softmax();
            for (a, b) in mean.iter_mut().zip(p.data()) {
                *a += b / 3.0;
            }
        }
        let via_probs = nll(&Tensor::new(vec![2, 2], mean).unwrap(), &labels).unwrap();
        assert!((ensemble_nll(&z, &labels).unwrap() - via_probs).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn ambiguity_is_nonnegative(
            s in 1usize..6, n in 1usize..8, k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let r = crate::rng::CounterRng::new(seed, 0);
            let data: Vec<f32> = (0..s * n * k).map(|i| (r.normal(i as u64) * 3.0) as f32).collect();
            let labels: Vec<usize> = (0..n).map(|i| (r.words(10_000 + i as u64)[0] % k as u64) as usize).collect();
            let d = ambiguity_decomposition(&Tensor::new(vec![s, n, k], data).unwrap(), &labels).unwrap();
            prop_assert!(d.ambiguity >= -1e-9);
            prop_assert!((d.avg_loss - d.ensemble_loss - d.ambiguity).abs() <= 1e-12);
        }

        #[test]
        fn ece_in_unit_interval_and_order_free(seed in any::<u64>(), n in 1usize..40) {
            let r = crate::rng::CounterRng::new(seed, 1);
            let logits: Vec<f32> = (0..n * 3).map(|i| (r.normal(i as u64) * 2.0) as f32).collect();
            let p = Tensor::new(vec![n, 3], logits).unwrap().softmax();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let v = ece(&p, &labels, ECE_BINS).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));

            let rev_rows: Vec<Vec<f32>> = p.rows().rev().map(|r| r.to_vec()).collect();
            let rev_labels: Vec<usize> = labels.iter().rev().copied().collect();
            let w = ece(&Tensor::from_rows(&rev_rows).unwrap(), &rev_labels, ECE_BINS).unwrap();
            prop_assert!((v - w).abs() < 1e-12);
        }

        #[test]
        fn err_invariant_under_monotone_transform(seed in any::<u64>(), n in 1usize..20) {
            let r = crate::rng::CounterRng::new(seed, 2);
            let p: Vec<f32> = (0..n * 4).map(|i| r.uniform(i as u64) as f32).collect();
            let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 4).collect();
            let a = Tensor::new(vec![n, 4], p).unwrap();
            let b = a.map(|v| 3.0 * v * v * v + 1.0);
            prop_assert_eq!(err(&a, &labels).unwrap(), err(&b, &labels).unwrap());
        }

        #[test]
        fn nll_nonnegative(seed in any::<u64>(), n in 1usize..20) {
            let r = crate::rng::CounterRng::new(seed, 3);
            let z: Vec<f32> = (0..n * 5).map(|i| (r.normal(i as u64) * 4.0) as f32).collect();
            let p = Tensor::new(vec![n, 5], z).unwrap().softmax();
            let labels: Vec<usize> = (0..n).map(|i| i % 5).collect();
            prop_assert!(nll(&p, &labels).unwrap() >= 0.0);
        }
    }
}
