//! Diversity between ensemble members.

use crate::error::{Error, Result};
use crate::evaluation::PredictionSet;
use crate::tensor::Matrix;
use crate::PROB_EPS;

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dims(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Fraction of rows on which the two argmax predictions differ.
pub fn disagreement(p1: &Matrix, p2: &Matrix) -> Result<f64> {
    same_shape("disagreement", p1, p2)?;
    if p1.rows() == 0 {
        return Ok(0.0);
    }
    let differ = p1
        .argmax_rows()
        .iter()
        .zip(p2.argmax_rows())
        .filter(|(a, b)| **a != *b)
        .count();
    Ok(differ as f64 / p1.rows() as f64)
}

/// Mean over rows of `Σ_k p1_k (ln p1_k − ln p2_k)`, both clamped at 1e-12.
pub fn kl_divergence(p1: &Matrix, p2: &Matrix) -> Result<f64> {
    same_shape("kl_divergence", p1, p2)?;
    if p1.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (a, b) in p1.row_iter().zip(p2.row_iter()) {
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x.max(PROB_EPS), y.max(PROB_EPS));
            total += x * (x.ln() - y.ln());
        }
    }
    Ok(total / p1.rows() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityReport {
    /// Mean disagreement over unordered member pairs.
    pub d_dis: f64,
    /// Mean KL divergence over ordered member pairs.
    pub d_kl: f64,
    pub pairwise_dis: Matrix,
    /// `pairwise_kl[(i, j)] = KL(member_i ‖ member_j)`.
    pub pairwise_kl: Matrix,
    /// Mean pairwise disagreement restricted to each true class; `None` for
    /// classes without samples.
    pub per_class_dis: Vec<Option<f64>>,
}

pub fn ensemble_diversity(preds: &PredictionSet) -> Result<DiversityReport> {
    let m = preds.members.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "diversity needs at least 2 members, got {m}"
        )));
    }
    let mut dis = Matrix::zeros(m, m);
    let mut kl = Matrix::zeros(m, m);
    let mut dis_sum = 0.0;
    let mut kl_sum = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i == j {
                continue;
            }
            let k = kl_divergence(&preds.members[i], &preds.members[j])?;
            kl.set(i, j, k);
            kl_sum += k;
            if i < j {
                let d = disagreement(&preds.members[i], &preds.members[j])?;
                dis.set(i, j, d);
                dis.set(j, i, d);
                dis_sum += d;
            }
        }
    }
    let unordered = (m * (m - 1) / 2) as f64;
    let ordered = (m * (m - 1)) as f64;

    let classes = preds.members[0].cols();
    let argmaxes: Vec<Vec<usize>> = preds.members.iter().map(Matrix::argmax_rows).collect();
    let mut per_class_dis = Vec::with_capacity(classes);
    for c in 0..classes {
        let rows: Vec<usize> = (0..preds.labels.len()).filter(|&r| preds.labels[r] == c).collect();
        if rows.is_empty() {
            per_class_dis.push(None);
            continue;
        }
        let mut sum = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                let differ = rows.iter().filter(|&&r| argmaxes[i][r] != argmaxes[j][r]).count();
                sum += differ as f64 / rows.len() as f64;
            }
        }
        per_class_dis.push(Some(sum / unordered));
    }

    Ok(DiversityReport {
        d_dis: dis_sum / unordered,
        d_kl: kl_sum / ordered,
        pairwise_dis: dis,
        pairwise_kl: kl,
        per_class_dis,
    })
}

/// Pearson and Spearman correlation; `None` when either input has zero variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks with tied values sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn accuracy_correlation(individual: &[f64], ensemble: &[f64]) -> Result<Correlation> {
    if individual.len() != ensemble.len() {
        return Err(Error::dims(
            "accuracy_correlation",
            format!("{} vs {} values", individual.len(), ensemble.len()),
        ));
    }
    if individual.len() < 3 {
        return Err(Error::InvalidArgument("correlation needs at least 3 points".into()));
    }
    Ok(Correlation {
        pearson: pearson(individual, ensemble),
        spearman: pearson(&average_ranks(individual), &average_ranks(ensemble)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn disagreement_examples() {
        let a = m(&[&[0.9, 0.1], &[0.2, 0.8]]);
        assert_eq!(disagreement(&a, &a).unwrap(), 0.0);
        let b = m(&[&[0.1, 0.9], &[0.7, 0.3]]);
        assert_eq!(disagreement(&a, &b).unwrap(), 1.0);
        let rows1: Vec<[f64; 2]> = (0..10).map(|_| [0.9, 0.1]).collect();
        let rows2: Vec<[f64; 2]> = (0..10).map(|i| if i < 3 { [0.1, 0.9] } else { [0.6, 0.4] }).collect();
        let d = disagreement(&Matrix::from_rows(&rows1).unwrap(), &Matrix::from_rows(&rows2).unwrap()).unwrap();
        assert!((d - 0.3).abs() < 1e-15);
        assert!(disagreement(&a, &m(&[&[1.0, 0.0]])).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = m(&[&[0.5, 0.5]]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let q = m(&[&[0.25, 0.75]]);
        let expect = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&p, &q).unwrap() - expect).abs() < 1e-15);
        let onehot = m(&[&[1.0, 0.0]]);
        assert!((kl_divergence(&onehot, &p).unwrap() - 2f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn ensemble_report_definitions() {
        let a = m(&[&[0.9, 0.1], &[0.8, 0.2], &[0.3, 0.7]]);
        let b = a.clone();
        let c = m(&[&[0.1, 0.9], &[0.8, 0.2], &[0.6, 0.4]]);
        let same = PredictionSet::new(vec![a.clone(), b.clone()], vec![0, 0, 1]).unwrap();
        let r = ensemble_diversity(&same).unwrap();
        assert_eq!((r.d_dis, r.d_kl), (0.0, 0.0));

        let preds = PredictionSet::new(vec![a.clone(), b.clone(), c.clone()], vec![0, 0, 1]).unwrap();
        let r = ensemble_diversity(&preds).unwrap();
        let pairs = [
            disagreement(&a, &b).unwrap(),
            disagreement(&a, &c).unwrap(),
            disagreement(&b, &c).unwrap(),
        ];
        assert!((r.d_dis - pairs.iter().sum::<f64>() / 3.0).abs() < 1e-15);
        for i in 0..3 {
            assert_eq!(r.pairwise_dis.get(i, i), 0.0);
            assert_eq!(r.pairwise_kl.get(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(r.pairwise_dis.get(i, j), r.pairwise_dis.get(j, i));
            }
        }
        // class 0 rows: {0, 1}; only c disagrees on row 0 → pairs (a,c),(b,c) give 0.5 each
        assert!((r.per_class_dis[0].unwrap() - 1.0 / 3.0).abs() < 1e-15);

        assert!(ensemble_diversity(&PredictionSet::new(vec![a], vec![0, 0, 1]).unwrap()).is_err());
    }

    #[test]
    fn missing_class_is_none() {
        let a = m(&[&[0.9, 0.05, 0.05]]);
        let preds = PredictionSet::new(vec![a.clone(), a], vec![0]).unwrap();
        let r = ensemble_diversity(&preds).unwrap();
        assert_eq!(r.per_class_dis, vec![Some(0.0), None, None]);
    }

    #[test]
    fn correlation_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let c = accuracy_correlation(&x, &y).unwrap();
        assert!((c.pearson.unwrap() - 1.0).abs() < 1e-15);
        assert!((c.spearman.unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let c = accuracy_correlation(&x, &neg).unwrap();
        assert!((c.pearson.unwrap() + 1.0).abs() < 1e-15);
        assert!((c.spearman.unwrap() + 1.0).abs() < 1e-15);
        let c = accuracy_correlation(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        assert!((c.spearman.unwrap() - 0.5).abs() < 1e-15);
        let c = accuracy_correlation(&[1.0, 1.0, 1.0], &[1.0, 3.0, 2.0]).unwrap();
        assert_eq!(c.pearson, None);
        assert_eq!(c.spearman, None);
        assert!(accuracy_correlation(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn average_ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }
}
