use crate::error::{Error, Result};

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

fn check(pred: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<()> {
    if pred.len() != targets.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), targets.len())));
    }
    if pred.iter().zip(targets).any(|(p, t)| p.len() != t.len()) {
        return Err(Error::Shape("prediction and target widths differ".into()));
    }
    Ok(())
}

/// Squared error summed over classes, averaged over the batch.
pub fn loss_mse(pred: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    check(pred, targets)?;
    let total: f64 = pred
        .iter()
        .zip(targets)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / pred.len() as f64)
}

pub fn loss_mse_grad(pred: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    check(pred, targets)?;
    let o = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(targets)
        .map(|(p, t)| p.iter().zip(t).map(|(a, b)| 2.0 * (a - b) / o).collect())
        .collect())
}
