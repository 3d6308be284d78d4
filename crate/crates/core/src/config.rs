//! Run configuration: flat `key = value` text with `#` comments.
//!
//! Every key maps to one field; unknown or repeated keys are rejected, and the
//! same keys can be overridden from the command line through [`RunConfig::set`].

use std::collections::HashSet;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{gen_synthetic, load_csv, load_idx, Dataset, Normalization, SyntheticKind};
use crate::error::{Error, Result};
use crate::evaluation::{DEFAULT_ECE_BINS, DEFAULT_FGSM_EPS, DEFAULT_SEVERITIES};
use crate::training::ScheduleConfig;

/// Keys in serialization order.
pub const KEYS: &[&str] = &[
    "dataset",
    "data_n",
    "data_noise",
    "data_seed",
    "train_path",
    "test_path",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
    "num_classes",
    "hidden",
    "sparsity",
    "distribution",
    "ensemble_size",
    "epochs",
    "t_ex",
    "t_re",
    "t_total",
    "delta_t",
    "p",
    "p_schedule",
    "growth",
    "q",
    "exclude_pruned",
    "explore",
    "lr_explore",
    "lr_refine_1",
    "lr_refine_2",
    "refine_split",
    "member_lr_milestones",
    "batch_size",
    "momentum",
    "weight_decay",
    "seed",
    "out_dir",
    "ece_bins",
    "severities",
    "fgsm_eps",
    "ood_n",
    "flops_overhead",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    /// `two_moons`, `gaussians`, `spirals`, `csv` or `idx`.
    pub dataset: String,
    pub data_n: usize,
    pub data_noise: f64,
    pub data_seed: u64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Inferred from the labels when absent.
    pub num_classes: Option<usize>,
    pub out_dir: PathBuf,
    pub ece_bins: usize,
    pub severities: Vec<f64>,
    pub fgsm_eps: f64,
    /// Number of Gaussian-noise inputs used as the out-of-distribution set.
    pub ood_n: usize,
    /// Charge a dense backward pass per connectivity update in the FLOPs report.
    pub flops_overhead: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            dataset: "two_moons".into(),
            data_n: 2000,
            data_noise: 0.1,
            data_seed: 0,
            train_path: None,
            test_path: None,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            num_classes: None,
            out_dir: PathBuf::from("out"),
            ece_bins: DEFAULT_ECE_BINS,
            severities: DEFAULT_SEVERITIES.to_vec(),
            fgsm_eps: DEFAULT_FGSM_EPS,
            ood_n: 1000,
            flops_overhead: true,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

fn join<T: Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "key '{key}': expected true or false, got '{value}'"
        ))),
    }
}

fn keyed(key: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) if !msg.starts_with("key '") => Error::Config(format!("key '{key}': {msg}")),
        other => other,
    }
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.schedule;
        let path = || Some(PathBuf::from(value));
        match key {
            "dataset" => {
                if !matches!(value, "csv" | "idx") {
                    value.parse::<SyntheticKind>().map_err(|e| keyed(key, e))?;
                }
                self.dataset = value.to_string();
            }
            "data_n" => self.data_n = parse_value(key, value)?,
            "data_noise" => self.data_noise = parse_value(key, value)?,
            "data_seed" => self.data_seed = parse_value(key, value)?,
            "train_path" => self.train_path = path(),
            "test_path" => self.test_path = path(),
            "train_images" => self.train_images = path(),
            "train_labels" => self.train_labels = path(),
            "test_images" => self.test_images = path(),
            "test_labels" => self.test_labels = path(),
            "num_classes" => {
                self.num_classes = match value {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "hidden" => s.hidden = parse_list(key, value)?,
            "sparsity" => s.sparsity = parse_value(key, value)?,
            "distribution" => s.distribution = value.parse().map_err(|e| keyed(key, e))?,
            "ensemble_size" => s.ensemble_size = parse_value(key, value)?,
            "epochs" => s.epochs = parse_value(key, value)?,
            "t_ex" => s.t_ex = parse_value(key, value)?,
            "t_re" => s.t_re = parse_value(key, value)?,
            "t_total" => s.t_total = parse_value(key, value)?,
            "delta_t" => s.exploration.interval = value.parse().map_err(|e| keyed(key, e))?,
            "p" => s.exploration.rate = parse_value(key, value)?,
            "p_schedule" => s.exploration.schedule = value.parse().map_err(|e| keyed(key, e))?,
            "growth" => s.exploration.growth = value.parse().map_err(|e| keyed(key, e))?,
            "q" => s.exploration.global_rate = parse_value(key, value)?,
            "exclude_pruned" => s.exploration.exclude_pruned = parse_bool(key, value)?,
            "explore" => s.explore = parse_bool(key, value)?,
            "lr_explore" => s.lr_explore = parse_value(key, value)?,
            "lr_refine_1" => s.lr_refine_1 = parse_value(key, value)?,
            "lr_refine_2" => s.lr_refine_2 = parse_value(key, value)?,
            "refine_split" => s.refine_split = parse_value(key, value)?,
            "member_lr_milestones" => {
                let v: Vec<f64> = parse_list(key, value)?;
                if v.len() != 2 {
                    return Err(Error::Config(format!(
                        "key '{key}': expected two comma-separated fractions, got '{value}'"
                    )));
                }
                s.member_lr_milestones = (v[0], v[1]);
            }
            "batch_size" => s.batch_size = parse_value(key, value)?,
            "momentum" => s.momentum = parse_value(key, value)?,
            "weight_decay" => s.weight_decay = parse_value(key, value)?,
            "seed" => s.seed = parse_value(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "ece_bins" => self.ece_bins = parse_value(key, value)?,
            "severities" => self.severities = parse_list(key, value)?,
            "fgsm_eps" => self.fgsm_eps = parse_value(key, value)?,
            "ood_n" => self.ood_n = parse_value(key, value)?,
            "flops_overhead" => self.flops_overhead = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Textual value of a key, `None` for unset optional paths.
    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.schedule;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        Some(match key {
            "dataset" => self.dataset.clone(),
            "data_n" => self.data_n.to_string(),
            "data_noise" => self.data_noise.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "train_path" => return path(&self.train_path),
            "test_path" => return path(&self.test_path),
            "train_images" => return path(&self.train_images),
            "train_labels" => return path(&self.train_labels),
            "test_images" => return path(&self.test_images),
            "test_labels" => return path(&self.test_labels),
            "num_classes" => self.num_classes.map_or("auto".into(), |k| k.to_string()),
            "hidden" => join(&s.hidden),
            "sparsity" => s.sparsity.to_string(),
            "distribution" => s.distribution.to_string(),
            "ensemble_size" => s.ensemble_size.to_string(),
            "epochs" => s.epochs.to_string(),
            "t_ex" => s.t_ex.to_string(),
            "t_re" => s.t_re.to_string(),
            "t_total" => s.t_total.to_string(),
            "delta_t" => s.exploration.interval.to_string(),
            "p" => s.exploration.rate.to_string(),
            "p_schedule" => s.exploration.schedule.to_string(),
            "growth" => s.exploration.growth.to_string(),
            "q" => s.exploration.global_rate.to_string(),
            "exclude_pruned" => s.exploration.exclude_pruned.to_string(),
            "explore" => s.explore.to_string(),
            "lr_explore" => s.lr_explore.to_string(),
            "lr_refine_1" => s.lr_refine_1.to_string(),
            "lr_refine_2" => s.lr_refine_2.to_string(),
            "refine_split" => s.refine_split.to_string(),
            "member_lr_milestones" => {
                format!("{},{}", s.member_lr_milestones.0, s.member_lr_milestones.1)
            }
            "batch_size" => s.batch_size.to_string(),
            "momentum" => s.momentum.to_string(),
            "weight_decay" => s.weight_decay.to_string(),
            "seed" => s.seed.to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            "ece_bins" => self.ece_bins.to_string(),
            "severities" => join(&self.severities),
            "fgsm_eps" => self.fgsm_eps.to_string(),
            "ood_n" => self.ood_n.to_string(),
            "flops_overhead" => self.flops_overhead.to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("key '{key}' given twice")));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// One `key = value` line per set key, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        KEYS.iter()
            .filter_map(|k| self.get(k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        match self.dataset.as_str() {
            "csv" => {
                for (k, v) in [("train_path", &self.train_path), ("test_path", &self.test_path)] {
                    if v.is_none() {
                        return Err(Error::Config(format!("key '{k}' is required for dataset csv")));
                    }
                }
            }
            "idx" => {
                for (k, v) in [
                    ("train_images", &self.train_images),
                    ("train_labels", &self.train_labels),
                    ("test_images", &self.test_images),
                    ("test_labels", &self.test_labels),
                ] {
                    if v.is_none() {
                        return Err(Error::Config(format!("key '{k}' is required for dataset idx")));
                    }
                }
            }
            _ => {
                if self.data_n < 10 {
                    return Err(Error::Config(format!(
                        "key 'data_n': need at least 10 samples, got {}",
                        self.data_n
                    )));
                }
                if !(self.data_noise >= 0.0 && self.data_noise.is_finite()) {
                    return Err(Error::Config(format!(
                        "key 'data_noise': {} is not a valid std",
                        self.data_noise
                    )));
                }
            }
        }
        if self.num_classes.is_some_and(|k| k < 2) {
            return Err(Error::Config("key 'num_classes': need at least 2 classes".into()));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("key 'ece_bins' must be at least 1".into()));
        }
        if self.severities.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config(
                "key 'severities': values must be finite and nonnegative".into(),
            ));
        }
        if !(self.fgsm_eps >= 0.0 && self.fgsm_eps.is_finite()) {
            return Err(Error::Config(format!(
                "key 'fgsm_eps': {} must be nonnegative",
                self.fgsm_eps
            )));
        }
        if self.ood_n == 0 {
            return Err(Error::Config("key 'ood_n' must be at least 1".into()));
        }
        Ok(())
    }

    /// Generates or loads the configured dataset.
    pub fn load_dataset(&self) -> Result<Dataset> {
        match self.dataset.as_str() {
            "csv" => load_csv(
                self.train_path.as_ref().expect("validated"),
                self.test_path.as_ref().expect("validated"),
                self.num_classes,
            ),
            "idx" => {
                let train = load_idx(
                    self.train_images.as_ref().expect("validated"),
                    self.train_labels.as_ref().expect("validated"),
                )?;
                let test = load_idx(
                    self.test_images.as_ref().expect("validated"),
                    self.test_labels.as_ref().expect("validated"),
                )?;
                Dataset::from_splits("idx", train, test, self.num_classes, Normalization::Pixel)
            }
            kind => gen_synthetic(kind.parse()?, self.data_n, self.data_noise, self.data_seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparsity::{Growth, RateSchedule, UpdateInterval};

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn parses_comments_and_values() {
        let text = "# schedule\n t_total = 850 \nt_ex=150 # trailing\n\ngrowth = random\np_schedule = cosine\ndelta_t = 7\nhidden = 32,16\nnum_classes = 3\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.schedule.t_total, 850);
        assert_eq!(cfg.schedule.t_ex, 150);
        assert_eq!(cfg.schedule.exploration.growth, Growth::Random);
        assert_eq!(cfg.schedule.exploration.schedule, RateSchedule::Cosine);
        assert_eq!(cfg.schedule.exploration.interval, UpdateInterval::Steps(7));
        assert_eq!(cfg.schedule.hidden, vec![32, 16]);
        assert_eq!(cfg.num_classes, Some(3));
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("bogus = 1").unwrap_err().to_string();
        assert!(err.contains("'bogus'"), "{err}");
        let err = RunConfig::parse("sparsity = lots").unwrap_err().to_string();
        assert!(err.contains("'sparsity'"), "{err}");
        let err = RunConfig::parse("growth = magic").unwrap_err().to_string();
        assert!(err.contains("'growth'"), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2").unwrap_err().to_string();
        assert!(err.contains("twice"), "{err}");
        assert!(RunConfig::parse("no equals sign").is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.set("dataset", "csv").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("train_path"));
        let mut cfg = RunConfig::default();
        cfg.set("sparsity", "1.5").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("ece_bins", "0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_key_is_readable() {
        let cfg = RunConfig::default();
        for k in KEYS {
            let optional = k.ends_with("_path") || k.ends_with("_images") || k.ends_with("_labels");
            assert_eq!(cfg.get(k).is_some(), !optional, "{k}");
        }
    }
}
