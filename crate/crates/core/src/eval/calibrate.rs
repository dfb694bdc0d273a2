use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logit rows of target positions, `[len, vocab]`, with their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedLogits {
    vocab: usize,
    logits: Vec<f32>,
    targets: Vec<u32>,
}

impl CachedLogits {
    pub fn new(vocab: usize, logits: Vec<f32>, targets: Vec<u32>) -> Result<Self> {
        if vocab == 0 || logits.len() != vocab * targets.len() {
            return Err(Error::shape(format!(
                "{} logits do not form {} rows of {vocab}",
                logits.len(),
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Index(format!("target {t} >= vocabulary {vocab}")));
        }
        Ok(CachedLogits { vocab, logits, targets })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    fn row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.vocab..(i + 1) * self.vocab]
    }

    fn biased(&self, i: usize, bias: Option<&[f64]>, j: usize) -> f64 {
        self.row(i)[j] as f64 + bias.map_or(0.0, |b| b[j])
    }

    pub fn row_loss(&self, i: usize, bias: Option<&[f64]>) -> f64 {
        let max = (0..self.vocab).map(|j| self.biased(i, bias, j)).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..self.vocab).map(|j| (self.biased(i, bias, j) - max).exp()).sum::<f64>().ln();
        lse - self.biased(i, bias, self.targets[i] as usize)
    }

    pub fn mean_loss(&self, bias: Option<&[f64]>) -> f64 {
        (0..self.len()).map(|i| self.row_loss(i, bias)).sum::<f64>() / self.len() as f64
    }

    /// Mean loss and its gradient with respect to the bias.
    fn loss_and_grad(&self, bias: &[f64]) -> (f64, Vec<f64>) {
        let v = self.vocab;
        let mut grad = vec![0.0; v];
        let mut probs = vec![0.0; v];
        let mut total = 0.0;
        for i in 0..self.len() {
            let row = self.row(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..v {
                probs[j] = row[j] as f64 + bias[j];
                max = max.max(probs[j]);
            }
            let mut z = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - max).exp();
                z += *p;
            }
            let t = self.targets[i] as usize;
            total += z.ln() + max - (row[t] as f64 + bias[t]);
            for j in 0..v {
                grad[j] += probs[j] / z;
            }
            grad[t] -= 1.0;
        }
        let n = self.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (total / n, grad)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Weight of the retain loss in `l_forget + alpha * l_retain`.
    pub alpha: f64,
    pub lr: f64,
    pub max_iters: usize,
    /// Stop once the objective changes by less than this.
    pub tolerance: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { alpha: 100.0, lr: 0.1, max_iters: 2000, tolerance: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub logit_bias: Vec<f64>,
    pub alpha: f64,
    pub forget_before: f64,
    pub retain_before: f64,
    pub forget_after: f64,
    pub retain_after: f64,
    /// Combined objective before the first and after every accepted step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iters` ran out before the tolerance was met.
    pub converged: bool,
}

impl CalibrationResult {
    pub fn objective_before(&self) -> f64 {
        self.objective[0]
    }

    pub fn objective_after(&self) -> f64 {
        *self.objective.last().expect("objective trace is never empty")
    }
}

/// Fits one bias per logit by gradient descent on `l_forget + alpha * l_retain`.
///
/// The step starts at `lr`, doubles after every accepted step and halves
/// until the objective does not increase, so the trace is non-increasing.
/// Growing the step matters for biases of tokens a model never predicts,
/// whose gradient stays nearly constant over a long flat stretch.
pub fn calibrate(forget: &CachedLogits, retain: &CachedLogits, cfg: &CalibrationConfig) -> Result<CalibrationResult> {
    if forget.is_empty() || retain.is_empty() {
        return Err(Error::contract("calibration sets must be non-empty"));
    }
    if forget.vocab != retain.vocab {
        return Err(Error::shape("calibration sets disagree on vocabulary size"));
    }
    let v = forget.vocab;
    let objective = |b: &[f64]| {
        let (lf, gf) = forget.loss_and_grad(b);
        let (lr, gr) = retain.loss_and_grad(b);
        let g: Vec<f64> = gf.iter().zip(&gr).map(|(a, b)| a + cfg.alpha * b).collect();
        (lf + cfg.alpha * lr, g)
    };
    let mut bias = vec![0.0; v];
    let (mut obj, mut grad) = objective(&bias);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let mut step = cfg.lr;
    while iterations < cfg.max_iters {
        iterations += 1;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = bias.iter().zip(&grad).map(|(b, g)| b - step * g).collect();
            let (o, g) = objective(&cand);
            if o <= obj {
                accepted = Some((cand, o, g));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, o, g)) = accepted else {
            converged = true;
            break;
        };
        let change = obj - o;
        step *= 2.0;
        bias = cand;
        obj = o;
        grad = g;
        trace.push(obj);
        if change < cfg.tolerance {
            converged = true;
            break;
        }
    }
    Ok(CalibrationResult {
        forget_before: forget.mean_loss(None),
        retain_before: retain.mean_loss(None),
        forget_after: forget.mean_loss(Some(&bias)),
        retain_after: retain.mean_loss(Some(&bias)),
        logit_bias: bias,
        alpha: cfg.alpha,
        objective: trace,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cache(n: usize, v: usize, seed: u64, shift: &[(usize, f32)]) -> CachedLogits {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..n {
            let mut row: Vec<f32> = (0..v).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for &(j, s) in shift {
                row[j] += s;
            }
            logits.extend(row);
            targets.push(rng.gen_range(0..v as u32));
        }
        CachedLogits::new(v, logits, targets).unwrap()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let c = random_cache(30, 6, 1, &[]);
        let b = vec![0.1, -0.2, 0.3, 0.0, 0.5, -0.4];
        let (_, g) = c.loss_and_grad(&b);
        for j in 0..6 {
            let h = 1e-6;
            let mut up = b.clone();
            up[j] += h;
            let mut dn = b.clone();
            dn[j] -= h;
            let fd = (c.mean_loss(Some(&up)) - c.mean_loss(Some(&dn))) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-7, "{j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn objective_trace_is_monotone_and_never_worse() {
        let f = random_cache(200, 10, 2, &[(3, -5.0)]);
        let r = random_cache(200, 10, 3, &[(1, 2.0)]);
        let res = calibrate(&f, &r, &CalibrationConfig::default()).unwrap();
        assert!(res.objective.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.objective_after() <= res.objective_before());
        assert!(res.converged);
    }

    #[test]
    fn suppressed_token_is_restored() {
        // targets are uniform, but token 0 is pushed towards -inf: the bias
        // learns to undo it and forget loss strictly drops
        let f = random_cache(300, 8, 4, &[(0, -30.0)]);
        let r = random_cache(300, 8, 5, &[(0, -30.0)]);
        let res = calibrate(&f, &r, &CalibrationConfig::default()).unwrap();
        assert!(res.forget_after < res.forget_before - 1.0);
        assert!(res.logit_bias[0] > 5.0);
    }

    #[test]
    fn optimal_model_is_left_alone() {
        // logits equal the log-frequencies of the targets: zero gradient
        let v = 4;
        let freq = [0.1f64, 0.2, 0.3, 0.4];
        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for (t, &p) in freq.iter().enumerate() {
            for _ in 0..(p * 100.0).round() as usize {
                logits.extend(freq.iter().map(|q| q.ln() as f32));
                targets.push(t as u32);
            }
        }
        let c = CachedLogits::new(v, logits, targets).unwrap();
        let res = calibrate(&c, &c, &CalibrationConfig::default()).unwrap();
        assert!(res.logit_bias.iter().all(|b| b.abs() < 1e-3), "{:?}", res.logit_bias);
        assert!((res.forget_after - res.forget_before).abs() < 1e-6);
    }

    #[test]
    fn bad_inputs() {
        assert!(CachedLogits::new(3, vec![0.0; 5], vec![0, 1]).is_err());
        assert!(matches!(CachedLogits::new(2, vec![0.0; 2], vec![2]), Err(Error::Index(_))));
        let e = CachedLogits::new(2, vec![], vec![]).unwrap();
        let c = random_cache(3, 2, 0, &[]);
        assert!(calibrate(&e, &c, &CalibrationConfig::default()).is_err());
    }
}
