use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a fixed list of flat parameter blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, block_sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.first_moment.iter().map(Vec::len).collect()
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(config(format!(
                "adam expects {} blocks, got {} parameter and {} gradient blocks",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first_moment[i].len() || g.len() != p.len() {
                return Err(config(format!("adam block {i}: shape mismatch")));
            }
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut state = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        state.step(&mut [&mut p[..]], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig::default();
        let mut state = AdamState::new(cfg, &[2]);
        let mut p = [0.0, 0.0];
        state.step(&mut [&mut p[..]], &[&[0.37, -12.0]]).unwrap();
        assert!((p[0] + cfg.learning_rate).abs() < 1e-10);
        assert!((p[1] - cfg.learning_rate).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut state = AdamState::new(AdamConfig::default(), &[2]);
        let mut p = [0.0; 3];
        assert!(state.step(&mut [&mut p[..]], &[&[0.0; 3]]).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn quadratic_descends_monotonically_after_second_step() {
        // f(x) = (x - 3)^2 from x = 0; independent scalar simulation of the update rule.
        let cfg = AdamConfig { learning_rate: 0.1, ..AdamConfig::default() };
        let mut oracle_x = 0.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut oracle_path = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * (oracle_x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9_f64.powi(t));
            let vh = v / (1.0 - 0.999_f64.powi(t));
            oracle_x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            oracle_path.push(oracle_x);
        }

        let mut state = AdamState::new(cfg, &[1]);
        let mut x = [0.0];
        let mut losses = Vec::new();
        for expected in &oracle_path {
            let g = 2.0 * (x[0] - 3.0);
            state.step(&mut [&mut x[..]], &[&[g]]).unwrap();
            assert!((x[0] - expected).abs() < 1e-12);
            losses.push((x[0] - 3.0).powi(2));
        }
        for w in losses[1..].windows(2) {
            assert!(w[1] < w[0]);
        }
    }
}
