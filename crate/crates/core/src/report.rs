//! Plain-text reports: `key = value` files and aligned tables.

use crate::diversity::DiversityReport;
use crate::evaluation::MetricReport;
use crate::flops::FlopsReport;
use crate::tensor::Matrix;

/// Named scalar results in a fixed order.
pub type Entries = Vec<(String, f64)>;

pub fn metric_entries(r: &MetricReport) -> Entries {
    let mut e: Entries = vec![("acc".into(), r.acc), ("nll".into(), r.nll), ("ece".into(), r.ece)];
    for (j, a) in r.member_acc.iter().enumerate() {
        e.push((format!("member_{}_acc", j + 1), *a));
    }
    if !r.member_acc.is_empty() {
        let mean = r.member_acc.iter().sum::<f64>() / r.member_acc.len() as f64;
        e.push(("member_mean_acc".into(), mean));
    }
    if let Some(c) = &r.corrupted {
        for s in &c.per_severity {
            e.push((format!("c_acc@{}", s.severity), s.scores.acc));
            e.push((format!("c_nll@{}", s.severity), s.scores.nll));
            e.push((format!("c_ece@{}", s.severity), s.scores.ece));
        }
        e.push(("c_acc".into(), c.mean.acc));
        e.push(("c_nll".into(), c.mean.nll));
        e.push(("c_ece".into(), c.mean.ece));
    }
    if let Some(auc) = r.ood_auc {
        e.push(("ood_auc".into(), auc));
    }
    if let Some(a) = &r.adversarial {
        e.push(("fgsm_eps".into(), a.eps));
        for (j, acc) in a.per_member.iter().enumerate() {
            e.push((format!("fgsm_acc_vs_member_{}", j + 1), *acc));
        }
        e.push(("fgsm_acc_min".into(), a.min));
        e.push(("fgsm_acc_mean".into(), a.mean));
        e.push(("fgsm_acc_max".into(), a.max));
    }
    if let Some(f) = &r.flops {
        e.extend(flops_entries(f));
    }
    e
}

pub fn flops_entries(f: &FlopsReport) -> Entries {
    vec![
        ("train_flops".into(), f.train_flops),
        ("inference_flops".into(), f.inference_flops_per_sample),
        ("train_flops_ratio".into(), f.ratio_to_dense),
    ]
}

pub fn diversity_entries(r: &DiversityReport) -> Entries {
    let mut e: Entries = vec![("d_dis".into(), r.d_dis), ("d_kl".into(), r.d_kl)];
    for (c, d) in r.per_class_dis.iter().enumerate() {
        if let Some(d) = d {
            e.push((format!("d_dis_class_{c}"), *d));
        }
    }
    e
}

fn format_value(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e9 || v.abs() < 1e-4) {
        format!("{v:.6e}")
    } else {
        format!("{v:.6}")
    }
}

/// `key = value` lines.
pub fn to_key_value(entries: &[(String, f64)]) -> String {
    entries
        .iter()
        .map(|(k, v)| format!("{k} = {}\n", format_value(*v)))
        .collect()
}

/// Aligned three-column table: name, tag, value.
pub fn table(tag: &str, entries: &[(String, f64)]) -> String {
    let name_w = entries.iter().map(|(k, _)| k.len()).max().unwrap_or(0).max(4);
    let tag_w = tag.len().max(3);
    let mut out = format!("{:<name_w$}  {:<tag_w$}  value\n", "name", "tag");
    for (k, v) in entries {
        out.push_str(&format!("{k:<name_w$}  {tag:<tag_w$}  {}\n", format_value(*v)));
    }
    out
}

/// Square matrix with 1-based member labels.
pub fn matrix_table(m: &Matrix) -> String {
    let mut out = String::from("      ");
    for j in 0..m.cols() {
        out.push_str(&format!("{:>10}", format!("m{}", j + 1)));
    }
    out.push('\n');
    for i in 0..m.rows() {
        out.push_str(&format!("{:<6}", format!("m{}", i + 1)));
        for j in 0..m.cols() {
            out.push_str(&format!("{:>10.6}", m.get(i, j)));
        }
        out.push('\n');
    }
    out
}

/// Full diversity report: scalars, then both pairwise matrices.
pub fn diversity_text(r: &DiversityReport) -> String {
    format!(
        "{}\n# pairwise disagreement\n{}\n# pairwise KL (row || column)\n{}",
        to_key_value(&diversity_entries(r)),
        matrix_table(&r.pairwise_dis),
        matrix_table(&r.pairwise_kl)
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_and_table() {
        let e = vec![("acc".to_string(), 0.5), ("train_flops".to_string(), 1.5e12)];
        assert_eq!(to_key_value(&e), "acc = 0.500000\ntrain_flops = 1.500000e12\n");
        let t = table("edst", &e);
        assert!(t.starts_with("name         tag   value\n"), "{t}");
        assert!(t.contains("acc          edst  0.500000"), "{t}");
    }

    #[test]
    fn matrix_rendering() {
        let m = Matrix::from_rows(&[[0.0, 0.25], [0.25, 0.0]]).unwrap();
        let t = matrix_table(&m);
        assert_eq!(t.lines().count(), 3);
        assert!(t.lines().nth(1).unwrap().contains("0.250000"));
    }

    #[test]
    fn metric_entries_cover_members() {
        let r = MetricReport {
            acc: 0.9,
            nll: 0.3,
            ece: 0.05,
            member_acc: vec![0.8, 0.85],
            corrupted: None,
            ood_auc: Some(0.7),
            adversarial: None,
            flops: None,
        };
        let keys: Vec<String> = metric_entries(&r).into_iter().map(|(k, _)| k).collect();
        assert_eq!(
            keys,
            [
                "acc",
                "nll",
                "ece",
                "member_1_acc",
                "member_2_acc",
                "member_mean_acc",
                "ood_auc"
            ]
        );
    }
}
