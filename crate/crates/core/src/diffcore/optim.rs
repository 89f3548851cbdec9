use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::{Matrix, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected first/second moment estimates, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.ids().map(|id| Matrix::zeros(params.value(id).dim())).collect();
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `params`.
    /// Gradients are left untouched; call `ParamSet::zero_grads` afterwards.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let (values, grads) = params.parts_mut();
        for (((p, g), m), v) in values.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            });
        }
    }
}

pub fn adam_step(params: &mut ParamSet, state: &mut AdamState) {
    state.step(params);
}

/// One row of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: f64,
}

/// Writes `epoch,loss,val_metric` rows.
pub fn write_curve_csv<W: std::io::Write>(curve: &[CurvePoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "epoch,loss,val_metric")?;
    for p in curve {
        writeln!(out, "{},{},{}", p.epoch, p.loss, p.val_metric)?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_is_bounded_by_lr() {
        let mut params = ParamSet::new();
        let id = params.add("p", array![[1.0, -2.0, 0.5, 3.0]]);
        let mut state = AdamState::new(&params, AdamConfig::default());
        let g = array![[0.3, -40.0, 1e-6, 0.0]];
        params.grad_mut(id).assign(&g);
        adam_step(&mut params, &mut state);
        assert_eq!(state.step_count(), 1);
        let lr = state.config.lr;
        let before = array![[1.0, -2.0, 0.5, 3.0]];
        for ((p, b), g) in params.value(id).iter().zip(before.iter()).zip(g.iter()) {
            let delta = p - b;
            // Step 1: m̂ = g, v̂ = g², so Δ = -lr·g/(|g|+ε).
            let expected = -lr * g / (g.abs() + 1e-8);
            assert!((delta - expected).abs() < 1e-15, "{delta} vs {expected}");
            assert!(delta.abs() <= lr * (1.0 + 1e-8));
        }
    }
}
