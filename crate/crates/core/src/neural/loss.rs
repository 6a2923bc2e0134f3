//! Losses and metrics.

use crate::scalar::Scalar;

use super::NeuralError;

fn check_lengths(a: usize, b: usize) -> Result<(), NeuralError> {
    if a != b {
        return Err(NeuralError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(NeuralError::Empty);
    }
    Ok(())
}

fn check_log_domain<S: Scalar>(values: &[S]) -> Result<(), NeuralError> {
    match values.iter().find(|&&v| v <= -S::one() || !v.is_finite()) {
        Some(v) => Err(NeuralError::Domain(format!("msle needs entries > -1, got {v}"))),
        None => Ok(()),
    }
}

/// Mean squared logarithmic error: `mean((ln(1+t) − ln(1+p))²)`.
pub fn msle<S: Scalar>(y_true: &[S], y_pred: &[S]) -> Result<S, NeuralError> {
    check_lengths(y_true.len(), y_pred.len())?;
    check_log_domain(y_true)?;
    check_log_domain(y_pred)?;
    let sum: S = y_true
        .iter()
        .zip(y_pred)
        .map(|(&t, &p)| {
            let d = t.ln_1p() - p.ln_1p();
            d * d
        })
        .sum();
    Ok(sum / S::of(y_true.len() as f64))
}

/// `∂ msle / ∂ y_pred`, one entry per prediction.
pub fn msle_grad<S: Scalar>(y_true: &[S], y_pred: &[S]) -> Result<Vec<S>, NeuralError> {
    check_lengths(y_true.len(), y_pred.len())?;
    check_log_domain(y_true)?;
    check_log_domain(y_pred)?;
    let n = S::of(y_true.len() as f64);
    let two = S::of(2.0);
    Ok(y_true
        .iter()
        .zip(y_pred)
        .map(|(&t, &p)| -two * (t.ln_1p() - p.ln_1p()) / (n * (S::one() + p)))
        .collect())
}

/// Below this prediction the training loss continues linearly instead of
/// following `ln(1+p)` to its pole at -1.
pub const LOG_GUARD: f64 = -0.5;

/// `ln(1+p)` for `p >= LOG_GUARD`, its tangent line below.
fn guarded_log1p<S: Scalar>(p: S) -> (S, S) {
    let g = S::of(LOG_GUARD);
    if p >= g {
        (p.ln_1p(), S::one() / (S::one() + p))
    } else {
        let slope = S::one() / (S::one() + g);
        (g.ln_1p() + (p - g) * slope, slope)
    }
}

/// MSLE as used for training: equal to [`msle`] whenever every value is at
/// least [`LOG_GUARD`], and finite for any finite input.
pub fn msle_guarded<S: Scalar>(y_true: &[S], y_pred: &[S]) -> Result<S, NeuralError> {
    check_lengths(y_true.len(), y_pred.len())?;
    let sum: S = y_true
        .iter()
        .zip(y_pred)
        .map(|(&t, &p)| {
            let d = guarded_log1p(t).0 - guarded_log1p(p).0;
            d * d
        })
        .sum();
    Ok(sum / S::of(y_true.len() as f64))
}

pub fn msle_guarded_grad<S: Scalar>(y_true: &[S], y_pred: &[S]) -> Result<Vec<S>, NeuralError> {
    check_lengths(y_true.len(), y_pred.len())?;
    let n = S::of(y_true.len() as f64);
    let two = S::of(2.0);
    Ok(y_true
        .iter()
        .zip(y_pred)
        .map(|(&t, &p)| {
            let (lp, dlp) = guarded_log1p(p);
            -two * (guarded_log1p(t).0 - lp) * dlp / n
        })
        .collect())
}

/// Mean absolute error.
pub fn mae<S: Scalar>(y_true: &[S], y_pred: &[S]) -> Result<S, NeuralError> {
    check_lengths(y_true.len(), y_pred.len())?;
    let sum: S = y_true.iter().zip(y_pred).map(|(&t, &p)| (t - p).abs()).sum();
    Ok(sum / S::of(y_true.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn msle_zero_on_equal_vectors() {
        let v = [0.0, 0.3, 1.0, 2.5];
        assert_eq!(msle(&v, &v).unwrap(), 0.0);
    }

    #[test]
    fn msle_of_e_minus_one() {
        let e = std::f64::consts::E;
        assert!((msle(&[0.0], &[e - 1.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn msle_domain_errors() {
        assert!(matches!(msle(&[0.0], &[-1.0]), Err(NeuralError::Domain(_))));
        assert!(matches!(msle(&[-2.0], &[0.0]), Err(NeuralError::Domain(_))));
        assert!(matches!(msle_grad(&[0.0], &[-1.5]), Err(NeuralError::Domain(_))));
    }

    #[test]
    fn guarded_matches_msle_on_domain_and_stays_finite() {
        let t: [f64; 3] = [0.2, 0.9, 0.0];
        let p: [f64; 3] = [0.1, -0.4, 1.7];
        assert_eq!(msle_guarded(&t, &p).unwrap(), msle(&t, &p).unwrap());
        let (a, b) = (msle_guarded_grad(&t, &p).unwrap(), msle_grad(&t, &p).unwrap());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-15 * y.abs()));
        let far: [f64; 3] = [-3.0, -1.0, -0.7];
        assert!(msle_guarded(&t, &far).unwrap().is_finite());
        let g = msle_guarded_grad(&t, &far).unwrap();
        assert!(g.iter().all(|v| v.is_finite() && *v < 0.0));
    }

    #[test]
    fn mae_hand_values() {
        assert_eq!(mae(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 2.0);
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(mae(&[1.0], &[1.0, 2.0]), Err(NeuralError::LengthMismatch(1, 2))));
    }
}
