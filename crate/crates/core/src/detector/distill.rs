use serde::{Deserialize, Serialize};

use super::DetectorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillTarget {
    Backbone,
    Roi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub weight: f64,
    pub targets: Vec<DistillTarget>,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { weight: 0.2, targets: vec![DistillTarget::Backbone, DistillTarget::Roi] }
    }
}

impl DistillConfig {
    pub fn off() -> Self {
        Self { weight: 0.0, ..Self::default() }
    }

    pub fn has(&self, t: DistillTarget) -> bool {
        self.weight != 0.0 && self.targets.contains(&t)
    }
}

/// `weight * mean((s - t)^2)` for one feature set, with its gradient w.r.t. `s`.
fn mse(student: &[f64], teacher: &[f64], weight: f64) -> Result<(f64, Vec<f64>), DetectorError> {
    if student.len() != teacher.len() {
        return Err(DetectorError::ShapeMismatch);
    }
    if student.is_empty() || weight == 0.0 {
        return Ok((0.0, vec![0.0; student.len()]));
    }
    let n = student.len() as f64;
    let mut loss = 0.0;
    let grad = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| {
            let d = s - t;
            loss += d * d;
            2.0 * weight * d / n
        })
        .collect();
    Ok((weight * loss / n, grad))
}

/// Weighted mean-squared feature distance summed over the configured targets.
///
/// `student` and `teacher` pair features by target; targets not listed in the
/// config contribute nothing. Returns the loss and one gradient per input pair.
pub fn distill_losses(
    student: &[(DistillTarget, &[f64])],
    teacher: &[(DistillTarget, &[f64])],
    config: &DistillConfig,
) -> Result<(f64, Vec<Vec<f64>>), DetectorError> {
    if student.len() != teacher.len() {
        return Err(DetectorError::ShapeMismatch);
    }
    if !config.weight.is_finite() || config.weight < 0.0 {
        return Err(DetectorError::Config(format!("invalid distillation weight {}", config.weight)));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student.len());
    for ((ts, s), (tt, t)) in student.iter().zip(teacher) {
        if ts != tt {
            return Err(DetectorError::ShapeMismatch);
        }
        let w = if config.targets.contains(ts) { config.weight } else { 0.0 };
        let (l, g) = mse(s, t, w)?;
        total += l;
        grads.push(g);
    }
    Ok((total, grads))
}
