//! Datasets: synthetic 2-D generators plus IDX and CSV loaders.
//!
//! Inputs are min-max scaled with training-split statistics (synthetic, CSV)
//! or divided by 255 (IDX pixels).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Rng};

/// Inputs with their integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dims(
                "LabeledSet::new",
                format!("{} rows, {} labels", inputs.rows(), labels.len()),
            ));
        }
        if !inputs.all_finite() {
            return Err(Error::NonFinite("dataset inputs"));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Repeats every sample `times` times in place.
    pub fn repeated(&self, times: usize) -> LabeledSet {
        let idx: Vec<usize> = (0..self.len()).flat_map(|i| std::iter::repeat_n(i, times)).collect();
        self.subset(&idx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Per-feature `(x − min) / (max − min)` using training statistics.
    MinMax,
    /// Raw byte values divided by 255.
    Pixel,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::MinMax => "minmax",
            Normalization::Pixel => "pixel",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: LabeledSet,
    pub test: LabeledSet,
    pub num_classes: usize,
    pub normalization: Normalization,
    /// Per-feature range over both splits after normalisation; adversarial
    /// inputs are clipped to it.
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
}

impl Dataset {
    pub fn from_splits(
        name: impl Into<String>,
        train: LabeledSet,
        test: LabeledSet,
        num_classes: Option<usize>,
        normalization: Normalization,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument("training split is empty".into()));
        }
        if train.dim() != test.dim() && !test.is_empty() {
            return Err(Error::dims(
                "Dataset::from_splits",
                format!("train has {} features, test {}", train.dim(), test.dim()),
            ));
        }
        let observed = train.labels.iter().chain(&test.labels).max().map_or(0, |m| m + 1);
        let k = num_classes.unwrap_or(observed).max(2);
        if let Some(&label) = train.labels.iter().chain(&test.labels).find(|&&y| y >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let d = train.dim();
        let mut feature_min = vec![f64::INFINITY; d];
        let mut feature_max = vec![f64::NEG_INFINITY; d];
        for row in train.inputs.row_iter().chain(test.inputs.row_iter()) {
            for j in 0..d {
                feature_min[j] = feature_min[j].min(row[j]);
                feature_max[j] = feature_max[j].max(row[j]);
            }
        }
        Ok(Self {
            name: name.into(),
            train,
            test,
            num_classes: k,
            normalization,
            feature_min,
            feature_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

/// Scales both splits to [0, 1] per feature using the training split's range.
fn min_max_normalize(train: &mut Matrix, test: &mut Matrix) {
    let d = train.cols();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for row in train.row_iter() {
        for j in 0..d {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    for m in [train, test] {
        for r in 0..m.rows() {
            for (j, v) in m.row_mut(r).iter_mut().enumerate() {
                let span = hi[j] - lo[j];
                *v = if span > 0.0 { (*v - lo[j]) / span } else { 0.0 };
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    TwoMoons,
    Gaussians,
    Spirals,
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SyntheticKind::TwoMoons => "two_moons",
            SyntheticKind::Gaussians => "gaussians",
            SyntheticKind::Spirals => "spirals",
        })
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(SyntheticKind::TwoMoons),
            "gaussians" => Ok(SyntheticKind::Gaussians),
            "spirals" => Ok(SyntheticKind::Spirals),
            other => Err(Error::Config(format!("unknown synthetic dataset '{other}'"))),
        }
    }
}

/// Two-class 2-D dataset with `n` samples, split 80/20 after a seeded shuffle.
/// Classes get `⌊n/2⌋` and `⌈n/2⌉` points; `noise` is the std of additive
/// Gaussian jitter in raw units.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 samples, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise {noise}")));
    }
    let mut rng = Rng::with_stream(seed, 0);
    let per_class = [n / 2, n - n / 2];
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in per_class.iter().enumerate() {
        for i in 0..count {
            let frac = if count > 1 { i as f64 / (count - 1) as f64 } else { 0.0 };
            let (x, y) = match kind {
                SyntheticKind::TwoMoons => {
                    let t = std::f64::consts::PI * frac;
                    if class == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    }
                }
                SyntheticKind::Gaussians => {
                    if class == 0 {
                        (-2.0, 0.0)
                    } else {
                        (2.0, 0.0)
                    }
                }
                SyntheticKind::Spirals => {
                    let t = 0.25 + 2.75 * std::f64::consts::PI * frac;
                    let phase = std::f64::consts::PI * class as f64;
                    (t * (t + phase).cos() / 10.0, t * (t + phase).sin() / 10.0)
                }
            };
            points.push([x + noise * rng.normal(), y + noise * rng.normal()]);
            labels.push(class);
        }
    }
    let order = rng.shuffle(n);
    let n_train = (n as f64 * 0.8).round() as usize;
    let pick = |idx: &[usize]| -> (Vec<[f64; 2]>, Vec<usize>) {
        (
            idx.iter().map(|&i| points[i]).collect(),
            idx.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (tr_x, tr_y) = pick(&order[..n_train]);
    let (te_x, te_y) = pick(&order[n_train..]);
    let mut tr = Matrix::from_rows(&tr_x)?;
    let mut te = if te_x.is_empty() {
        Matrix::zeros(0, 2)
    } else {
        Matrix::from_rows(&te_x)?
    };
    min_max_normalize(&mut tr, &mut te);
    Dataset::from_splits(
        kind.to_string(),
        LabeledSet::new(tr, tr_y)?,
        LabeledSet::new(te, te_y)?,
        Some(2),
        Normalization::MinMax,
    )
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Reads an IDX image file and its label file. Pixels are scaled to [0, 1].
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledSet> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;

    let magic = read_be_u32(&images, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(ip, format!("bad image magic {magic:#010x}")));
    }
    let n = read_be_u32(&images, 4, ip)? as usize;
    let rows = read_be_u32(&images, 8, ip)? as usize;
    let cols = read_be_u32(&images, 12, ip)? as usize;
    let d = rows * cols;
    let body = &images[16..];
    if body.len() != n * d {
        return Err(Error::format(
            ip,
            format!("expected {} pixel bytes, found {}", n * d, body.len()),
        ));
    }

    let magic = read_be_u32(&labels, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(lp, format!("bad label magic {magic:#010x}")));
    }
    let n_labels = read_be_u32(&labels, 4, lp)? as usize;
    let label_body = &labels[8..];
    if label_body.len() != n_labels {
        return Err(Error::format(
            lp,
            format!("expected {n_labels} label bytes, found {}", label_body.len()),
        ));
    }
    if n_labels != n {
        return Err(Error::format(lp, format!("{n_labels} labels for {n} images")));
    }
    let inputs = Matrix::from_vec(n, d, body.iter().map(|&b| b as f64 / 255.0).collect())?;
    LabeledSet::new(inputs, label_body.iter().map(|&b| b as usize).collect())
}

/// Encodes images and labels in IDX format (used to produce fixtures).
pub fn write_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [n, rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    fs::write(ip, img).map_err(|e| Error::io(ip, e))?;
    fs::write(lp, lab).map_err(|e| Error::io(lp, e))
}

/// Parses a CSV file whose last column is an integer label. A first row that
/// does not parse as numbers is treated as a header.
pub fn read_csv(path: impl AsRef<Path>) -> Result<LabeledSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let (feats, label) = fields.split_at(fields.len() - 1);
        let parsed: std::result::Result<Vec<f64>, _> = feats.iter().map(|f| f.parse::<f64>()).collect();
        let label = label[0].parse::<usize>();
        match (parsed, label) {
            (Ok(x), Ok(y)) => {
                if let Some(first) = rows.first() {
                    if first.len() != x.len() {
                        return Err(Error::format(
                            path,
                            format!("line {} has {} features, expected {}", lineno + 1, x.len(), first.len()),
                        ));
                    }
                }
                rows.push(x);
                labels.push(y);
            }
            _ if lineno == 0 => continue,
            _ => return Err(Error::format(path, format!("line {} is not numeric", lineno + 1))),
        }
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no data rows"));
    }
    LabeledSet::new(Matrix::from_rows(&rows)?, labels)
}

/// Writes `features..., label` rows with a header line.
pub fn write_csv(path: impl AsRef<Path>, set: &LabeledSet) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let header: Vec<String> = (0..set.dim())
        .map(|j| format!("x{j}"))
        .chain(["label".to_string()])
        .collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (row, y) in set.inputs.row_iter().zip(&set.labels) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{y}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads train and test CSV files and min-max scales them with training statistics.
pub fn load_csv(
    train_path: impl AsRef<Path>,
    test_path: impl AsRef<Path>,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let mut train = read_csv(&train_path)?;
    let mut test = read_csv(&test_path)?;
    if train.dim() != test.dim() {
        return Err(Error::dims(
            "load_csv",
            format!("train has {} features, test {}", train.dim(), test.dim()),
        ));
    }
    min_max_normalize(&mut train.inputs, &mut test.inputs);
    Dataset::from_splits("csv", train, test, num_classes, Normalization::MinMax)
}

/// Gaussian noise inputs matching the training split's per-feature mean and
/// standard deviation; used as an out-of-distribution source.
pub fn gaussian_noise_like(train: &LabeledSet, n: usize, rng: &mut Rng) -> Matrix {
    let d = train.dim();
    let m = train.len().max(1) as f64;
    let mean: Vec<f64> = train.inputs.column_sums().iter().map(|s| s / m).collect();
    let mut var = vec![0.0; d];
    for row in train.inputs.row_iter() {
        for j in 0..d {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / m).sqrt()).collect();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for j in 0..d {
            data.push(mean[j] + std[j] * rng.normal());
        }
    }
    Matrix::from_vec(n, d, data).expect("sized above")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        for kind in [
            SyntheticKind::TwoMoons,
            SyntheticKind::Gaussians,
            SyntheticKind::Spirals,
        ] {
            let a = gen_synthetic(kind, 200, 0.1, 3).unwrap();
            let b = gen_synthetic(kind, 200, 0.1, 3).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.train.len(), 160);
            assert_eq!(a.test.len(), 40);
            assert_ne!(a, gen_synthetic(kind, 200, 0.1, 4).unwrap());
        }
    }

    #[test]
    fn two_moons_class_balance() {
        let d = gen_synthetic(SyntheticKind::TwoMoons, 2000, 0.1, 0).unwrap();
        let ones = d.train.labels.iter().chain(&d.test.labels).filter(|&&y| y == 1).count();
        assert!((ones as i64 - 1000).abs() <= 1);
        let odd = gen_synthetic(SyntheticKind::TwoMoons, 2001, 0.1, 0).unwrap();
        let ones = odd
            .train
            .labels
            .iter()
            .chain(&odd.test.labels)
            .filter(|&&y| y == 1)
            .count();
        assert!((ones as i64 * 2 - 2001).abs() <= 1);
    }

    #[test]
    fn train_split_is_unit_scaled() {
        let d = gen_synthetic(SyntheticKind::Spirals, 500, 0.05, 1).unwrap();
        let xs = d.train.inputs.as_slice();
        assert!(xs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(xs.contains(&0.0) && xs.contains(&1.0));
    }

    #[test]
    fn rejects_tiny_or_unknown() {
        assert!(gen_synthetic(SyntheticKind::TwoMoons, 9, 0.1, 0).is_err());
        assert!("circles".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn idx_round_trip_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let pixels: Vec<u8> = (0..3 * 4).map(|i| (i * 20) as u8).collect();
        write_idx(&ip, &lp, 2, 2, &pixels, &[0, 9, 4]).unwrap();
        let set = load_idx(&ip, &lp).unwrap();
        assert_eq!(set.inputs.shape(), (3, 4));
        assert_eq!(set.labels, vec![0, 9, 4]);
        assert_eq!(set.inputs.get(2, 3), 220.0 / 255.0);

        assert!(matches!(load_idx(&lp, &ip), Err(Error::Format { .. })));

        let mut bytes = fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&ip, &bytes).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));

        write_idx(&ip, &lp, 2, 2, &pixels, &[0, 9, 4]).unwrap();
        let mut lab = fs::read(&lp).unwrap();
        lab[7] = 2;
        lab.truncate(10);
        fs::write(&lp, &lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn csv_header_optional() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        fs::write(&a, "f1,f2,label\n0,1,0\n2,3,1\n4,5,2\n").unwrap();
        fs::write(&b, "1,1,1\n3,3,0\n").unwrap();
        let d = load_csv(&a, &b, None).unwrap();
        assert_eq!(d.num_classes, 3);
        assert_eq!(d.train.len(), 3);
        assert_eq!(d.test.inputs.row(0), &[0.25, 0.0]);
        fs::write(&b, "1,1,1\nx,3,0\n").unwrap();
        assert!(load_csv(&a, &b, None).is_err());
    }
}
