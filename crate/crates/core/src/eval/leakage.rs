use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Equivalent forget-token exposure of a run, read off a curve of standard
/// runs trained on increasing amounts of forget data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub forget_loss: f64,
    pub undiscovered_forget_tokens: f64,
    /// `None` when the loss lies outside the baseline curve.
    pub equivalent_forget_tokens: Option<f64>,
    pub leakage: Option<f64>,
    /// Interval certainly containing the leakage. Equal ends when interpolated.
    pub leakage_bounds: (f64, f64),
    /// The two baseline points `(tokens, loss)` used for interpolation, or
    /// the nearest point when extrapolation was refused.
    pub bracket: Vec<(f64, f64)>,
}

impl LeakageReport {
    pub fn extrapolated(&self) -> bool {
        self.leakage.is_none()
    }
}

/// Piecewise-linear map from forget loss to forget tokens over `baseline`
/// points `(forget_tokens, forget_loss)`; `leakage = equivalent / undiscovered`.
pub fn leakage(forget_loss: f64, undiscovered_tokens: f64, baseline: &[(f64, f64)]) -> Result<LeakageReport> {
    if baseline.len() < 2 {
        return Err(Error::contract("leakage needs at least two baseline runs"));
    }
    if undiscovered_tokens <= 0.0 {
        return Err(Error::contract("run saw no undiscovered forget tokens"));
    }
    if !forget_loss.is_finite() || baseline.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::contract("non-finite loss or token count"));
    }
    let mut pts = baseline.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let report = |eq: Option<f64>, bounds: (f64, f64), bracket| LeakageReport {
        forget_loss,
        undiscovered_forget_tokens: undiscovered_tokens,
        equivalent_forget_tokens: eq,
        leakage: eq.map(|e| e / undiscovered_tokens),
        leakage_bounds: bounds,
        bracket,
    };
    if let Some(p) = pts.iter().find(|p| p.1 == forget_loss) {
        let l = p.0 / undiscovered_tokens;
        return Ok(report(Some(p.0), (l, l), vec![*p]));
    }
    for w in pts.windows(2) {
        let ((t0, l0), (t1, l1)) = (w[0], w[1]);
        if (l0 - forget_loss) * (l1 - forget_loss) < 0.0 {
            let t = t0 + (forget_loss - l0) / (l1 - l0) * (t1 - t0);
            let l = t / undiscovered_tokens;
            return Ok(report(Some(t), (l, l), vec![w[0], w[1]]));
        }
    }
    let hi = *pts.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
    let lo = *pts.iter().min_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty");
    if forget_loss > hi.1 {
        // worse than the least-exposed baseline: at most that many tokens
        Ok(report(None, (0.0, hi.0 / undiscovered_tokens), vec![hi]))
    } else {
        Ok(report(None, (lo.0 / undiscovered_tokens, f64::INFINITY), vec![lo]))
    }
}
