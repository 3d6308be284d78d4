//! Analytic FLOPs accounting (multiplications plus additions, layer by layer).
//!
//! A dense `n_in → n_out` layer costs `2·n_in·n_out` per sample in the forward
//! pass; sparse layers scale that by their density. The backward pass is
//! charged at twice the forward cost.

use crate::error::{Error, Result};
use crate::network::LayerShape;

/// Default backward-to-forward cost ratio.
pub const BACKWARD_MULTIPLIER: f64 = 2.0;

/// Forward FLOPs per sample: `Σ_l 2·n_in·n_out·d_l`.
pub fn inference_flops(shapes: &[LayerShape], densities: &[f64]) -> Result<f64> {
    if shapes.len() != densities.len() {
        return Err(Error::dims(
            "inference_flops",
            format!("{} shapes, {} densities", shapes.len(), densities.len()),
        ));
    }
    Ok(shapes
        .iter()
        .zip(densities)
        .map(|(s, &d)| dense_layer_flops(s) * d)
        .sum())
}

fn dense_layer_flops(s: &LayerShape) -> f64 {
    2.0 * s.params() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopsModel {
    pub shapes: Vec<LayerShape>,
    pub densities: Vec<f64>,
    pub backward_multiplier: f64,
    pub steps: u64,
    pub batch_size: u64,
    /// Connectivity updates during the run.
    pub exploration_events: u64,
    /// Charge one dense backward pass per connectivity update (gradient growth
    /// needs the dense gradient there).
    pub dense_exploration_overhead: bool,
}

impl FlopsModel {
    pub fn new(shapes: Vec<LayerShape>, densities: Vec<f64>, steps: u64, batch_size: u64) -> Self {
        Self {
            shapes,
            densities,
            backward_multiplier: BACKWARD_MULTIPLIER,
            steps,
            batch_size,
            exploration_events: 0,
            dense_exploration_overhead: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shapes.len() != self.densities.len() {
            return Err(Error::dims("FlopsModel", "shapes and densities differ in length"));
        }
        if let Some(d) = self.densities.iter().find(|&&d| !(d > 0.0 && d <= 1.0)) {
            return Err(Error::InvalidArgument(format!("density {d} outside (0, 1]")));
        }
        if self.backward_multiplier < 0.0 {
            return Err(Error::InvalidArgument("negative backward multiplier".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsReport {
    pub train_flops: f64,
    pub inference_flops_per_sample: f64,
    /// Training cost relative to the same schedule on the dense network.
    pub ratio_to_dense: f64,
}

/// `steps · batch · (1 + backward_multiplier) · forward`, plus one dense
/// backward per exploration event when the overhead flag is set.
pub fn training_flops(model: &FlopsModel) -> Result<FlopsReport> {
    model.validate()?;
    let sparse_fwd = inference_flops(&model.shapes, &model.densities)?;
    let dense_fwd: f64 = model.shapes.iter().map(dense_layer_flops).sum();
    let per_step = model.batch_size as f64 * (1.0 + model.backward_multiplier);
    let mut train = model.steps as f64 * per_step * sparse_fwd;
    if model.dense_exploration_overhead {
        train += model.exploration_events as f64 * model.batch_size as f64 * model.backward_multiplier * dense_fwd;
    }
    let dense_train = model.steps as f64 * per_step * dense_fwd;
    Ok(FlopsReport {
        train_flops: train,
        inference_flops_per_sample: sparse_fwd,
        ratio_to_dense: if dense_train > 0.0 { train / dense_train } else { 0.0 },
    })
}

/// FLOPs of a single training step on one batch.
pub fn step_flops(shapes: &[LayerShape], densities: &[f64], batch_size: usize) -> f64 {
    let fwd = inference_flops(shapes, densities).unwrap_or(0.0);
    batch_size as f64 * (1.0 + BACKWARD_MULTIPLIER) * fwd
}

/// Dense backward of one batch, charged at gradient-growth updates.
pub fn dense_backward_flops(shapes: &[LayerShape], batch_size: usize) -> f64 {
    let dense_fwd: f64 = shapes.iter().map(dense_layer_flops).sum();
    batch_size as f64 * BACKWARD_MULTIPLIER * dense_fwd
}

/// Training-time ratio of one explore-then-refine run of `t_total` epochs to
/// `members` independent runs of `epochs_per_member` epochs each.
pub fn single_run_step_ratio(t_total: u64, members: u64, epochs_per_member: u64) -> f64 {
    t_total as f64 / (members * epochs_per_member) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inference_examples() {
        let l1 = LayerShape::dense(784, 100);
        let l2 = LayerShape::dense(100, 10);
        assert_eq!(inference_flops(&[l1], &[1.0]).unwrap(), 156_800.0);
        assert_eq!(inference_flops(&[l1], &[0.1]).unwrap(), 15_680.0);
        assert_eq!(inference_flops(&[l1, l2], &[0.1, 0.5]).unwrap(), 16_680.0);
        assert!(inference_flops(&[l1], &[]).is_err());
    }

    #[test]
    fn dense_and_uniform_ratios() {
        let shapes = LayerShape::mlp(&[2, 64, 64, 2]);
        let dense = FlopsModel::new(shapes.clone(), vec![1.0; 3], 100, 32);
        assert_eq!(training_flops(&dense).unwrap().ratio_to_dense, 1.0);
        let sparse = FlopsModel::new(shapes, vec![0.2; 3], 100, 32);
        assert!((training_flops(&sparse).unwrap().ratio_to_dense - 0.2).abs() < 1e-15);
    }

    #[test]
    fn overhead_adds_dense_backward() {
        let shapes = vec![LayerShape::dense(10, 10)];
        let mut m = FlopsModel::new(shapes, vec![0.5], 10, 4);
        let base = training_flops(&m).unwrap().train_flops;
        m.exploration_events = 3;
        assert_eq!(training_flops(&m).unwrap().train_flops, base);
        m.dense_exploration_overhead = true;
        assert_eq!(training_flops(&m).unwrap().train_flops, base + 3.0 * 4.0 * 2.0 * 200.0);
    }

    #[test]
    fn rejects_bad_density() {
        let m = FlopsModel::new(vec![LayerShape::dense(2, 2)], vec![0.0], 1, 1);
        assert!(training_flops(&m).is_err());
    }

    #[test]
    fn step_ratio() {
        assert_eq!(single_run_step_ratio(450, 3, 250), 0.6);
    }
}
