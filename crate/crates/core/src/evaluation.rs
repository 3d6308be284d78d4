//! Ensemble inference and scalar quality metrics.

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::flops::FlopsReport;
use crate::network::SparseNetwork;
use crate::tensor::{argmax, Matrix, Rng};
use crate::training::Ticket;
use crate::PROB_EPS;

/// Default number of equal-width confidence bins for ECE.
pub const DEFAULT_ECE_BINS: usize = 15;
/// Default Gaussian noise levels (std in normalised input units).
pub const DEFAULT_SEVERITIES: [f64; 5] = [0.02, 0.05, 0.1, 0.2, 0.3];
/// Default FGSM step.
pub const DEFAULT_FGSM_EPS: f64 = 8.0 / 255.0;

/// Per-member class probabilities on one evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub members: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl PredictionSet {
    pub fn new(members: Vec<Matrix>, labels: Vec<usize>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(Error::InvalidArgument("prediction set has no members".into()));
        };
        let shape = first.shape();
        if shape.0 != labels.len() {
            return Err(Error::dims(
                "PredictionSet::new",
                format!("{} rows, {} labels", shape.0, labels.len()),
            ));
        }
        if let Some(i) = members.iter().position(|m| m.shape() != shape) {
            return Err(Error::dims(
                "PredictionSet::new",
                format!("member {i} has shape {:?}, expected {shape:?}", members[i].shape()),
            ));
        }
        Ok(Self { members, labels })
    }

    pub fn from_tickets(tickets: &[Ticket], set: &LabeledSet) -> Result<Self> {
        let members = tickets
            .iter()
            .map(|t| t.network.predict(&set.inputs))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, set.labels.clone())
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Arithmetic mean of member probabilities.
pub fn average(members: &[Matrix]) -> Result<Matrix> {
    let Some(first) = members.first() else {
        return Err(Error::InvalidArgument("cannot average zero members".into()));
    };
    let mut acc = Matrix::zeros(first.rows(), first.cols());
    for (i, m) in members.iter().enumerate() {
        if m.shape() != first.shape() {
            return Err(Error::dims("ensemble_average", format!("member {i} shape differs")));
        }
        for (a, &v) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *a += v;
        }
    }
    let inv = 1.0 / members.len() as f64;
    Ok(acc.map(|v| v * inv))
}

pub fn ensemble_average(preds: &PredictionSet) -> Result<Matrix> {
    average(&preds.members)
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = probs
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Mean of `−ln max(p_y, 1e-12)`.
pub fn nll(probs: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .row_iter()
        .zip(labels)
        .map(|(row, &y)| -row[y].max(PROB_EPS).ln())
        .sum();
    total / labels.len() as f64
}

/// Bin of confidence `c` among `bins` bins covering `(b/B, (b+1)/B]`.
fn confidence_bin(c: f64, bins: usize) -> usize {
    let b_f = bins as f64;
    let mut b = ((c * b_f).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while b > 0 && c <= b as f64 / b_f {
        b -= 1;
    }
    while b + 1 < bins && c > (b + 1) as f64 / b_f {
        b += 1;
    }
    b
}

/// Expected calibration error over `bins` equal-width confidence bins.
/// Confidence is the row maximum; empty bins contribute nothing.
pub fn ece(probs: &Matrix, labels: &[usize], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(Error::InvalidArgument("ECE needs at least one bin".into()));
    }
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for (row, &y) in probs.row_iter().zip(labels) {
        let pred = argmax(row);
        let c = row[pred];
        let b = confidence_bin(c, bins);
        count[b] += 1;
        conf_sum[b] += c;
        if pred == y {
            correct[b] += 1;
        }
    }
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let nb = count[b] as f64;
        let gap = (correct[b] as f64 / nb - conf_sum[b] / nb).abs();
        total += nb / n as f64 * gap;
    }
    Ok(total)
}

/// Accuracy, NLL and ECE of one probability matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
}

pub fn score(probs: &Matrix, labels: &[usize], bins: usize) -> Result<Scores> {
    Ok(Scores {
        acc: accuracy(probs, labels),
        nll: nll(probs, labels),
        ece: ece(probs, labels, bins)?,
    })
}

/// Ensemble-averaged prediction of a set of tickets.
pub fn ensemble_predict(tickets: &[Ticket], inputs: &Matrix) -> Result<Matrix> {
    let members = tickets
        .iter()
        .map(|t| t.network.predict(inputs))
        .collect::<Result<Vec<_>>>()?;
    average(&members)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeverityScores {
    pub severity: f64,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionReport {
    pub per_severity: Vec<SeverityScores>,
    /// Unweighted mean over severities.
    pub mean: Scores,
}

/// Evaluates the ensemble on copies of `set` with additive Gaussian noise of
/// each standard deviation in `severities`. One noise draw per entry is shared
/// across severities, so levels differ only in scale.
pub fn corrupted_eval(
    tickets: &[Ticket],
    set: &LabeledSet,
    severities: &[f64],
    seed: u64,
    bins: usize,
) -> Result<CorruptionReport> {
    if severities.is_empty() {
        return Err(Error::InvalidArgument("no corruption severities".into()));
    }
    let mut rng = Rng::with_stream(seed, 11);
    let noise: Vec<f64> = (0..set.inputs.len()).map(|_| rng.normal()).collect();
    let mut per_severity = Vec::with_capacity(severities.len());
    for &s in severities {
        let mut x = set.inputs.clone();
        for (v, z) in x.as_mut_slice().iter_mut().zip(&noise) {
            *v += s * z;
        }
        let probs = ensemble_predict(tickets, &x)?;
        per_severity.push(SeverityScores {
            severity: s,
            scores: score(&probs, &set.labels, bins)?,
        });
    }
    let k = per_severity.len() as f64;
    let mean = Scores {
        acc: per_severity.iter().map(|s| s.scores.acc).sum::<f64>() / k,
        nll: per_severity.iter().map(|s| s.scores.nll).sum::<f64>() / k,
        ece: per_severity.iter().map(|s| s.scores.ece).sum::<f64>() / k,
    };
    Ok(CorruptionReport { per_severity, mean })
}

/// `P(s_in > s_out) + ½·P(s_in = s_out)` via midranks.
pub fn auc_from_scores(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::InvalidArgument("AUC needs both score sets nonempty".into()));
    }
    let mut all: Vec<(f64, bool)> = in_scores
        .iter()
        .map(|&s| (s, true))
        .chain(out_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_in = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // ranks are 1-based; tied block i..=j shares the midrank
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_in += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n, m) = (in_scores.len() as f64, out_scores.len() as f64);
    Ok((rank_sum_in - n * (n + 1.0) / 2.0) / (n * m))
}

pub fn max_probability(probs: &Matrix) -> Vec<f64> {
    probs
        .row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// ROC-AUC separating in-distribution (positive) from out-of-distribution
/// rows by maximum probability.
pub fn ood_auc(in_probs: &Matrix, out_probs: &Matrix) -> Result<f64> {
    auc_from_scores(&max_probability(in_probs), &max_probability(out_probs))
}

/// `x + eps·sign(∂L/∂x)`, clipped per feature to `[lo, hi]`.
pub fn fgsm_attack(
    net: &SparseNetwork,
    inputs: &Matrix,
    labels: &[usize],
    eps: f64,
    lo: &[f64],
    hi: &[f64],
) -> Result<Matrix> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::InvalidArgument(format!("eps {eps} must be nonnegative")));
    }
    if lo.len() != inputs.cols() || hi.len() != inputs.cols() {
        return Err(Error::dims("fgsm_attack", "clip bounds do not match feature count"));
    }
    if eps == 0.0 {
        return Ok(inputs.clone());
    }
    let (grads, _) = net.loss_and_gradients(inputs, labels)?;
    let mut adv = inputs.clone();
    let d = inputs.cols();
    for (i, (v, &g)) in adv.as_mut_slice().iter_mut().zip(grads.input.as_slice()).enumerate() {
        let j = i % d;
        let step = if g > 0.0 {
            eps
        } else if g < 0.0 {
            -eps
        } else {
            0.0
        };
        *v = (*v + step).clamp(lo[j], hi[j]);
    }
    Ok(adv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialReport {
    pub eps: f64,
    /// Ensemble accuracy on the attacks crafted against each member.
    pub per_member: Vec<f64>,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

/// Crafts FGSM inputs against every member in turn and evaluates the whole
/// ensemble on each attacked copy.
pub fn adversarial_eval(
    tickets: &[Ticket],
    set: &LabeledSet,
    eps: f64,
    lo: &[f64],
    hi: &[f64],
) -> Result<AdversarialReport> {
    if tickets.is_empty() {
        return Err(Error::InvalidArgument("no tickets".into()));
    }
    let mut per_member = Vec::with_capacity(tickets.len());
    for t in tickets {
        let adv = fgsm_attack(&t.network, &set.inputs, &set.labels, eps, lo, hi)?;
        per_member.push(accuracy(&ensemble_predict(tickets, &adv)?, &set.labels));
    }
    let min = per_member.iter().copied().fold(f64::INFINITY, f64::min);
    let max = per_member.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = per_member.iter().sum::<f64>() / per_member.len() as f64;
    Ok(AdversarialReport {
        eps,
        per_member,
        min,
        mean,
        max,
    })
}

/// Everything the `eval` command reports.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub acc: f64,
    pub nll: f64,
    pub ece: f64,
    /// Test accuracy of each member on its own.
    pub member_acc: Vec<f64>,
    pub corrupted: Option<CorruptionReport>,
    pub ood_auc: Option<f64>,
    pub adversarial: Option<AdversarialReport>,
    pub flops: Option<FlopsReport>,
}

impl MetricReport {
    pub fn clean(tickets: &[Ticket], set: &LabeledSet, bins: usize) -> Result<Self> {
        let preds = PredictionSet::from_tickets(tickets, set)?;
        let avg = ensemble_average(&preds)?;
        let s = score(&avg, &set.labels, bins)?;
        Ok(Self {
            acc: s.acc,
            nll: s.nll,
            ece: s.ece,
            member_acc: preds.members.iter().map(|m| accuracy(m, &set.labels)).collect(),
            corrupted: None,
            ood_auc: None,
            adversarial: None,
            flops: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn averaging_examples() {
        let a = m(&[&[0.6, 0.4]]);
        let b = m(&[&[0.2, 0.8]]);
        let avg = average(&[a.clone(), b]).unwrap();
        assert!((avg.get(0, 0) - 0.4).abs() < 1e-15 && (avg.get(0, 1) - 0.6).abs() < 1e-15);
        assert_eq!(average(std::slice::from_ref(&a)).unwrap(), a);
        assert!(average(&[a, m(&[&[0.5, 0.5], &[0.5, 0.5]])]).is_err());
        assert!(PredictionSet::new(vec![], vec![]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        let onehot = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(accuracy(&onehot, &[0, 1]), 1.0);
        assert_eq!(accuracy(&onehot, &[1, 0]), 0.0);
        let rows: Vec<[f64; 2]> = (0..10).map(|_| [0.9, 0.1]).collect();
        let labels: Vec<usize> = (0..10).map(|i| usize::from(i >= 7)).collect();
        assert!((accuracy(&Matrix::from_rows(&rows).unwrap(), &labels) - 0.7).abs() < 1e-15);
        // tie goes to class 0
        assert_eq!(accuracy(&m(&[&[0.5, 0.5]]), &[0]), 1.0);
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll(&m(&[&[1.0, 0.0]]), &[0]), 0.0);
        assert!((nll(&m(&[&[0.5, 0.5]]), &[1]) - 2f64.ln()).abs() < 1e-15);
        let mixed = m(&[&[1.0, 0.0], &[0.5, 0.5], &[0.75, 0.25]]);
        let expect = (0.0 + 2f64.ln() + 4f64.ln()) / 3.0;
        assert!((nll(&mixed, &[0, 0, 1]) - expect).abs() < 1e-15);
    }

    #[test]
    fn ece_examples() {
        assert_eq!(ece(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1], 15).unwrap(), 0.0);
        assert!((ece(&m(&[&[0.8, 0.2]]), &[1], 15).unwrap() - 0.8).abs() < 1e-15);
        let p = m(&[&[0.7, 0.3], &[0.9, 0.1]]);
        assert!((ece(&p, &[0, 1], 1).unwrap() - 0.3).abs() < 1e-15);
        assert!(ece(&p, &[0, 1], 0).is_err());
    }

    #[test]
    fn bin_edges_are_right_closed() {
        assert_eq!(confidence_bin(0.5, 2), 0);
        assert_eq!(confidence_bin(0.5000001, 2), 1);
        assert_eq!(confidence_bin(1.0, 15), 14);
        assert_eq!(confidence_bin(0.2, 10), 1);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_from_scores(&[0.9, 0.8], &[0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auc_from_scores(&[0.3, 0.6, 0.6], &[0.6, 0.3, 0.6]).unwrap(), 0.5);
        assert_eq!(auc_from_scores(&[0.9, 0.3], &[0.5]).unwrap(), 0.5);
        assert!(auc_from_scores(&[], &[0.5]).is_err());
    }
}
