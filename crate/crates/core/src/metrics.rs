//! Evaluation metrics computed outside any gradient tape.

use crate::error::{Error, Result};

fn check_pair(pred: &[f64], target: &[f64], min_len: usize, op: &'static str) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::dimension(op, pred.len(), target.len()));
    }
    if pred.len() < min_len {
        return Err(Error::Contract(format!("{op} needs at least {min_len} samples, got {}", pred.len())));
    }
    Ok(())
}

pub fn metric_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1, "metric_mse")?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n)
}

pub fn metric_mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target, 1, "metric_mae")?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

/// Coefficient of determination. `degenerate` is set when the target has
/// zero variance, in which case the value is defined as 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct R2 {
    pub value: f64,
    pub degenerate: bool,
}

pub fn metric_r2(pred: &[f64], target: &[f64]) -> Result<R2> {
    check_pair(pred, target, 2, "metric_r2")?;
    let n = target.len() as f64;
    let mean = target.iter().sum::<f64>() / n;
    let ss_tot: f64 = target.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(R2 { value: 0.0, degenerate: true });
    }
    let ss_res: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(R2 { value: 1.0 - ss_res / ss_tot, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [1.0, 2.0, 3.0];
        assert_eq!(metric_mse(&y, &y).unwrap(), 0.0);
        assert_eq!(metric_mae(&y, &y).unwrap(), 0.0);
        assert_eq!(metric_r2(&y, &y).unwrap(), R2 { value: 1.0, degenerate: false });
    }

    #[test]
    fn hand_values() {
        // Residuals {1, −1}.
        assert_eq!(metric_mse(&[2.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(metric_mae(&[2.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        // Residuals {0, 3}.
        assert_eq!(metric_mse(&[1.0, 5.0], &[1.0, 2.0]).unwrap(), 4.5);
        assert_eq!(metric_mae(&[1.0, 5.0], &[1.0, 2.0]).unwrap(), 1.5);
    }

    #[test]
    fn r2_baselines() {
        let y = [1.0, 2.0, 3.0, 4.0];
        // Predicting the mean scores zero.
        let mean_pred = [2.5; 4];
        assert_eq!(metric_r2(&mean_pred, &y).unwrap().value, 0.0);
        // An arbitrarily bad predictor goes negative.
        let bad = [100.0, -50.0, 80.0, -10.0];
        assert!(metric_r2(&bad, &y).unwrap().value < 0.0);
    }

    #[test]
    fn r2_zero_variance_is_flagged() {
        let r = metric_r2(&[1.0, 2.0], &[5.0, 5.0]).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn r2_shift_invariance() {
        let pred = [1.1, 1.9, 3.2, 3.8];
        let y = [1.0, 2.0, 3.0, 4.0];
        let base = metric_r2(&pred, &y).unwrap().value;
        for shift in [-10.0, 0.5, 1234.0] {
            let ps: Vec<f64> = pred.iter().map(|v| v + shift).collect();
            let ys: Vec<f64> = y.iter().map(|v| v + shift).collect();
            let shifted = metric_r2(&ps, &ys).unwrap().value;
            assert!((shifted - base).abs() < 1e-9, "{shifted} vs {base}");
        }
    }

    #[test]
    fn contract_errors() {
        assert!(matches!(metric_mse(&[], &[]), Err(Error::Contract(_))));
        assert!(matches!(metric_r2(&[1.0], &[1.0]), Err(Error::Contract(_))));
        assert!(matches!(metric_mse(&[1.0], &[1.0, 2.0]), Err(Error::Dimension { .. })));
    }
}
