//! Adam with bias correction and decoupled weight decay, plus the OneCycle
//! learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{DiffError, Graph, Tensor};

/// A named parameter tensor living outside any computation graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered name -> parameter map. BTreeMap keeps iteration deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], values: Vec<f64>) {
        assert_eq!(values.len(), shape.iter().product::<usize>(), "param {name}: bad shape");
        self.params.insert(name.to_string(), Param { shape: shape.to_vec(), values });
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Materializes the named parameter as a gradient-tracked leaf.
    pub fn leaf(&self, graph: &Graph, name: &str) -> Tensor {
        let p = self.get(name);
        graph.leaf(p.values.clone(), &p.shape)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled weight decay factor (0 disables).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, weight_decay: 0.0 }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    pub step: u64,
}

/// One Adam update over every parameter that has a gradient entry.
/// Deterministic given (params, grads, state).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    cfg: &AdamConfig,
    lr: f64,
) {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, p) in params.params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        assert_eq!(g.len(), p.values.len(), "gradient shape mismatch for `{name}`");
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.values[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + cfg.weight_decay * p.values[i]);
        }
    }
}

/// Scales all gradients by max_norm / ||g|| when the global L2 norm of the
/// concatenated gradients exceeds `max_norm`. Returns the pre-clip norm.
/// `max_norm <= 0` disables clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().flatten().map(|g| g * g).sum();
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// OneCycle-style schedule: linear warmup from base_lr/10 to base_lr over the
/// first 30% of steps, then cosine decay to base_lr/1000.
pub fn onecycle_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64, DiffError> {
    if step > total_steps {
        return Err(DiffError::Invalid {
            op: "onecycle_lr",
            msg: format!("step {step} > total_steps {total_steps}"),
        });
    }
    let warmup = (((total_steps as f64) * 0.3).round() as u64).max(1);
    let start = base_lr / 10.0;
    let floor = base_lr / 1000.0;
    if step <= warmup {
        let t = step as f64 / warmup as f64;
        Ok(start + (base_lr - start) * t)
    } else {
        let t = (step - warmup) as f64 / (total_steps - warmup).max(1) as f64;
        Ok(floor + (base_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_grad_norm_rescales_only_above_threshold() {
        // norm of [3, 4] is 5; clip at 10 leaves it, clip at 2.5 halves it
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![3.0]);
        grads.insert("b".to_string(), vec![4.0]);
        let norm = clip_grad_norm(&mut grads, 10.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(grads["w"], vec![3.0]);

        let norm = clip_grad_norm(&mut grads, 2.5);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((grads["w"][0] - 1.5).abs() < 1e-12);
        assert!((grads["b"][0] - 2.0).abs() < 1e-12);

        // disabled
        let mut g2 = BTreeMap::new();
        g2.insert("w".to_string(), vec![100.0]);
        clip_grad_norm(&mut g2, 0.0);
        assert_eq!(g2["w"], vec![100.0]);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = ParamStore::new();
        ps.insert("w", &[2], vec![1.0, -2.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        let mut st = OptimizerState::default();
        adam_step(&mut ps, &grads, &mut st, &AdamConfig::default(), 0.01);
        assert_eq!(ps.get("w").values, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_about_lr() {
        let mut ps = ParamStore::new();
        ps.insert("w", &[1], vec![0.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![1.0]);
        let mut st = OptimizerState::default();
        adam_step(&mut ps, &grads, &mut st, &AdamConfig::default(), 0.01);
        // bias-corrected m_hat = v_hat = 1, so delta = -lr / (1 + eps)
        let got = ps.get("w").values[0];
        assert!((got + 0.01).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn two_steps_decrease_a_convex_quadratic() {
        // f(x) = (x - 3)^2
        let mut ps = ParamStore::new();
        ps.insert("x", &[1], vec![0.0]);
        let mut st = OptimizerState::default();
        let f = |x: f64| (x - 3.0) * (x - 3.0);
        let f0 = f(ps.get("x").values[0]);
        for _ in 0..2 {
            let x = ps.get("x").values[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), vec![2.0 * (x - 3.0)]);
            adam_step(&mut ps, &grads, &mut st, &AdamConfig::default(), 0.1);
        }
        assert!(f(ps.get("x").values[0]) < f0);
    }

    #[test]
    fn onecycle_boundaries() {
        let base = 0.01;
        assert!((onecycle_lr(0, 1000, base).unwrap() - base / 10.0).abs() < 1e-15);
        assert!((onecycle_lr(300, 1000, base).unwrap() - base).abs() < 1e-15);
        assert!((onecycle_lr(1000, 1000, base).unwrap() - base / 1000.0).abs() < 1e-9);
        assert!(onecycle_lr(1001, 1000, base).is_err());
    }
}
