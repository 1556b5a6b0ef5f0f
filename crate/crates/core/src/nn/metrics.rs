use crate::error::{Error, Result};

fn check(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape(format!("metric inputs differ in length: {} vs {}", y.len(), y_hat.len())));
    }
    if y.is_empty() {
        return Err(Error::UndefinedMetric("empty input".into()));
    }
    Ok(())
}

/// Mean squared error.
pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

/// Mean absolute error.
pub fn mae(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Coefficient of determination `1 - SS_res / SS_tot`, unclamped (negative for fits
/// worse than the mean predictor).
pub fn r2(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check(y, y_hat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedMetric("r2 of a constant target".into()));
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit() {
        let y = [0.1, 0.5, -0.3];
        assert_eq!(mse(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn mean_predictor_scores_zero() {
        let y = [1.0, 2.0, 6.0];
        assert_eq!(r2(&y, &[3.0; 3]).unwrap(), 0.0);
    }

    #[test]
    fn small_worked_example() {
        assert_eq!(mse(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(mae(&[0.0, 2.0], &[1.0, 1.0]).unwrap(), 1.0);
    }

    #[test]
    fn r2_is_unclamped_and_errors_on_constant_target() {
        assert!(r2(&[0.0, 1.0], &[5.0, -5.0]).unwrap() < 0.0);
        assert!(matches!(r2(&[1.0, 1.0], &[1.0, 1.0]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(mse(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }
}
