use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::EvalLosses;

/// `loss = alpha * compute^(-beta)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub alpha: f64,
    pub beta: f64,
    /// Root-mean-square residual of the fit in log-loss space.
    pub rmse_log: f64,
    /// Losses were not strictly decreasing in compute.
    pub low_confidence: bool,
}

impl PowerLaw {
    pub fn loss_at(&self, compute: f64) -> f64 {
        self.alpha * compute.powf(-self.beta)
    }

    /// Compute at which the fitted curve reaches `loss`.
    pub fn compute_for(&self, loss: f64) -> f64 {
        (self.alpha / loss).powf(1.0 / self.beta)
    }
}

/// Least-squares line through `(ln compute, ln loss)`.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLaw> {
    if points.len() < 2 {
        return Err(Error::contract("a power-law fit needs at least two points"));
    }
    if points.iter().any(|&(c, l)| !(c > 0.0 && l > 0.0)) {
        return Err(Error::contract("compute and loss must be positive"));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let xs: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("all points share one compute value"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rmse = (xs.iter().zip(&ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum::<f64>() / n).sqrt();
    Ok(PowerLaw {
        alpha: intercept.exp(),
        beta: -slope,
        rmse_log: rmse,
        low_confidence: pts.windows(2).any(|w| w[1].1 >= w[0].1),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub forget: PowerLaw,
    pub retain: PowerLaw,
    pub related: PowerLaw,
}

/// Fits each test subset over `(compute, losses)` of baseline runs.
pub fn fit_scaling(runs: &[(f64, EvalLosses)]) -> Result<ScalingFit> {
    let pick = |f: fn(&EvalLosses) -> f64| fit_power_law(&runs.iter().map(|(c, l)| (*c, f(l))).collect::<Vec<_>>());
    Ok(ScalingFit {
        forget: pick(|l| l.forget)?,
        retain: pick(|l| l.retain)?,
        related: pick(|l| l.related)?,
    })
}

/// Fraction of `full_compute` a baseline following `fit` could have saved
/// and still reached `loss`: `1 - C_equiv / C_full`. Negative when the
/// loss is better than the baseline at full compute.
pub fn compute_penalty(loss: f64, fit: &PowerLaw, full_compute: f64) -> f64 {
    1.0 - fit.compute_for(loss) / full_compute
}
