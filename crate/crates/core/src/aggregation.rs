//! Server-side model fusion.
//!
//! Contributions are always folded in ascending client-id order, so every
//! rule is exactly (bit-for-bit) invariant to the order of its input list.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Layout, ParamVector};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientContribution {
    pub client_id: usize,
    pub params: ParamVector,
    pub n_samples: usize,
    pub local_steps: usize,
}

fn sorted(contribs: &[ClientContribution]) -> Result<Vec<&ClientContribution>> {
    if contribs.is_empty() {
        return Err(Error::Fusion("no client contributions to fuse".into()));
    }
    let mut refs: Vec<&ClientContribution> = contribs.iter().collect();
    refs.sort_by_key(|c| c.client_id);
    let first = &refs[0].params;
    for c in &refs {
        if c.n_samples == 0 {
            return Err(Error::Fusion(format!("client {} reports zero samples", c.client_id)));
        }
        first.check_same_layout(&c.params)?;
    }
    Ok(refs)
}

fn sample_weights(contribs: &[&ClientContribution]) -> Vec<f64> {
    let total: usize = contribs.iter().map(|c| c.n_samples).sum();
    contribs
        .iter()
        .map(|c| c.n_samples as f64 / total as f64)
        .collect()
}

/// `Σ_k (|D_k| / Σ|D|) · θ_k`.
pub fn fedavg_fuse(contribs: &[ClientContribution]) -> Result<ParamVector> {
    let contribs = sorted(contribs)?;
    let weights = sample_weights(&contribs);
    let mut out = ParamVector::zeros(&contribs[0].params.layout);
    for (c, w) in contribs.iter().zip(&weights) {
        for (o, &v) in out.values.iter_mut().zip(&c.params.values) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Normalised averaging: each client's update is divided by its own step
/// count `τ_k`, the weighted mean direction is rescaled by
/// `τ_eff = Σ w_k·τ_k` and applied to `global`.
pub fn fednova_fuse(global: &ParamVector, contribs: &[ClientContribution]) -> Result<ParamVector> {
    let contribs = sorted(contribs)?;
    global.check_same_layout(&contribs[0].params)?;
    if let Some(c) = contribs.iter().find(|c| c.local_steps == 0) {
        return Err(Error::Fusion(format!("client {} took zero local steps", c.client_id)));
    }
    let weights = sample_weights(&contribs);
    let tau_eff: f64 = contribs
        .iter()
        .zip(&weights)
        .map(|(c, w)| w * c.local_steps as f64)
        .sum();

    let mut direction = vec![0.0; global.len()];
    for (c, w) in contribs.iter().zip(&weights) {
        let scale = w / c.local_steps as f64;
        for ((d, &g), &v) in direction.iter_mut().zip(&global.values).zip(&c.params.values) {
            *d += scale * (g - v);
        }
    }
    let values = global
        .values
        .iter()
        .zip(&direction)
        .map(|(g, d)| g - tau_eff * d)
        .collect();
    ParamVector::from_values(&global.layout, values)
}

/// Moments and constants of the adaptive server optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerOptState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    /// Adaptivity floor added to `√v`.
    pub tau: f64,
    pub server_lr: f64,
}

impl ServerOptState {
    pub fn new(layout: &Layout, beta1: f64, beta2: f64, tau: f64, server_lr: f64) -> Self {
        let n = layout.num_params();
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            beta1,
            beta2,
            tau,
            server_lr,
        }
    }
}

/// Adam on the pseudo-gradient `Δ = fedavg(θ_k) − global`, without bias
/// correction:
///
/// ```text
/// m ← β1·m + (1−β1)·Δ
/// v ← β2·v + (1−β2)·Δ²
/// θ ← θ + η·m / (√v + τ)
/// ```
pub fn fedadam_fuse(
    global: &ParamVector,
    contribs: &[ClientContribution],
    state: &mut ServerOptState,
) -> Result<ParamVector> {
    let averaged = fedavg_fuse(contribs)?;
    global.check_same_layout(&averaged)?;
    if state.first_moment.len() != global.len() || state.second_moment.len() != global.len() {
        return Err(Error::Shape {
            expected: global.len(),
            actual: state.first_moment.len(),
        });
    }
    let mut values = Vec::with_capacity(global.len());
    for i in 0..global.len() {
        let delta = averaged.values[i] - global.values[i];
        let m = state.beta1 * state.first_moment[i] + (1.0 - state.beta1) * delta;
        let v = state.beta2 * state.second_moment[i] + (1.0 - state.beta2) * delta * delta;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        values.push(global.values[i] + state.server_lr * m / (v.sqrt() + state.tau));
    }
    ParamVector::from_values(&global.layout, values)
}

/// Which federated optimizer the run uses. FedProx shares FedAvg fusion; its
/// difference is the proximal term in local training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ServerOptimizer {
    #[default]
    FedAvg,
    FedProx,
    FedNova,
    FedAdam,
}

impl fmt::Display for ServerOptimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServerOptimizer::FedAvg => "fedavg",
            ServerOptimizer::FedProx => "fedprox",
            ServerOptimizer::FedNova => "fednova",
            ServerOptimizer::FedAdam => "fedadam",
        })
    }
}

/// The server's fusion step together with any optimizer state it carries.
#[derive(Debug, Clone)]
pub enum Aggregator {
    Average,
    Normalized,
    Adaptive(ServerOptState),
}

impl Aggregator {
    pub fn new(kind: ServerOptimizer, layout: &Layout, server: &ServerHyper) -> Self {
        match kind {
            ServerOptimizer::FedAvg | ServerOptimizer::FedProx => Aggregator::Average,
            ServerOptimizer::FedNova => Aggregator::Normalized,
            ServerOptimizer::FedAdam => Aggregator::Adaptive(ServerOptState::new(
                layout,
                server.beta1,
                server.beta2,
                server.tau,
                server.lr,
            )),
        }
    }

    pub fn fuse(&mut self, global: &ParamVector, contribs: &[ClientContribution]) -> Result<ParamVector> {
        match self {
            Aggregator::Average => fedavg_fuse(contribs),
            Aggregator::Normalized => fednova_fuse(global, contribs),
            Aggregator::Adaptive(state) => fedadam_fuse(global, contribs, state),
        }
    }
}

/// Server optimizer hyperparameters (used by FedAdam).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerHyper {
    pub lr: f64,
    pub tau: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for ServerHyper {
    fn default() -> Self {
        Self {
            lr: 0.01,
            tau: 0.001,
            beta1: 0.9,
            beta2: 0.99,
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn layout(n: usize) -> Layout {
        // An (n-1)→1 dense layer has exactly n parameters.
        Layout::from_widths(&[n - 1, 1]).unwrap()
    }

    fn contrib(id: usize, values: Vec<f64>, n_samples: usize, steps: usize) -> ClientContribution {
        let l = layout(values.len());
        ClientContribution {
            client_id: id,
            params: ParamVector::from_values(&l, values).unwrap(),
            n_samples,
            local_steps: steps,
        }
    }

    #[test]
    fn fedavg_hand_cases() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![5.0, -2.0, 0.0, 8.0];
        let avg = fedavg_fuse(&[contrib(0, a.clone(), 10, 1), contrib(1, b.clone(), 10, 1)]).unwrap();
        assert_eq!(avg.values, vec![3.0, 0.0, 1.5, 6.0]);

        let single = fedavg_fuse(&[contrib(3, a.clone(), 7, 1)]).unwrap();
        assert_eq!(single.values, a);

        let skew = fedavg_fuse(&[contrib(0, a, 100, 1), contrib(1, b, 300, 1)]).unwrap();
        let expected = [4.0, -1.0, 0.75, 7.0];
        for (x, e) in skew.values.iter().zip(expected) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_of_nothing_is_an_error() {
        assert!(matches!(fedavg_fuse(&[]), Err(Error::Fusion(_))));
    }

    #[test]
    fn fednova_single_client_identity() {
        let g = contrib(0, vec![0.0, 1.0, 2.0], 1, 1).params;
        let c = contrib(5, vec![0.5, -1.0, 3.25], 40, 7);
        let out = fednova_fuse(&g, std::slice::from_ref(&c)).unwrap();
        for (x, e) in out.values.iter().zip(&c.params.values) {
            assert!((x - e).abs() < 1e-12);
        }
    }

    #[test]
    fn fednova_two_clients_straight_line_oracle() {
        // global = (1, 1); θ_a = (0, 2), n = 1, τ = 1; θ_b = (3, -1), n = 3, τ = 4.
        // w = (0.25, 0.75); d_a = (1, -1); d_b = (-0.5, 0.5);
        // Σ w·d = (0.25 - 0.375, -0.25 + 0.375) = (-0.125, 0.125);
        // τ_eff = 0.25 + 3 = 3.25; result = (1 + 0.40625, 1 - 0.40625).
        let g = contrib(0, vec![1.0, 1.0], 1, 1).params;
        let out = fednova_fuse(
            &g,
            &[contrib(0, vec![0.0, 2.0], 1, 1), contrib(1, vec![3.0, -1.0], 3, 4)],
        )
        .unwrap();
        assert!((out.values[0] - 1.40625).abs() < 1e-12);
        assert!((out.values[1] - 0.59375).abs() < 1e-12);
    }

    #[test]
    fn fednova_rejects_zero_steps() {
        let g = contrib(0, vec![1.0, 1.0], 1, 1).params;
        assert!(fednova_fuse(&g, &[contrib(0, vec![0.0, 2.0], 1, 0)]).is_err());
    }

    #[test]
    fn fedadam_zero_delta_keeps_global() {
        let g = contrib(0, vec![0.3, -0.7], 1, 1).params;
        let mut state = ServerOptState::new(&g.layout, 0.9, 0.99, 0.001, 0.01);
        let out = fedadam_fuse(&g, &[contrib(2, g.values.clone(), 5, 1)], &mut state).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn fedadam_first_step_by_hand() {
        let g = contrib(0, vec![0.0, 0.0], 1, 1).params;
        let mut state = ServerOptState::new(&g.layout, 0.9, 0.99, 0.001, 0.01);
        let out = fedadam_fuse(&g, &[contrib(0, vec![1.0, 1.0], 1, 1)], &mut state).unwrap();
        assert!((state.first_moment[0] - 0.1).abs() < 1e-12);
        assert!((state.second_moment[0] - 0.01).abs() < 1e-12);
        assert!((out.values[0] - 0.01 * 0.1 / 0.101).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fedavg_stays_in_hull_and_ignores_order(
            rows in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 3), 1usize..100), 1..8)
        ) {
            let contribs: Vec<_> = rows
                .iter()
                .enumerate()
                .map(|(i, (v, n))| contrib(i, v.clone(), *n, 1))
                .collect();
            let fused = fedavg_fuse(&contribs).unwrap();
            for j in 0..3 {
                let lo = rows.iter().map(|r| r.0[j]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r.0[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(fused.values[j] >= lo - 1e-9 && fused.values[j] <= hi + 1e-9);
            }
            let mut reversed = contribs.clone();
            reversed.reverse();
            prop_assert_eq!(fedavg_fuse(&reversed).unwrap(), fused);
        }

        #[test]
        fn fedadam_without_momentum_is_scaled_step(delta in -1.0f64..1.0, tau in 10.0f64..1e3) {
            let g = contrib(0, vec![0.5, 0.5], 1, 1).params;
            let mut state = ServerOptState::new(&g.layout, 0.0, 0.0, tau, 0.1);
            let out = fedadam_fuse(&g, &[contrib(0, vec![0.5 + delta, 0.5], 1, 1)], &mut state).unwrap();
            let closed = 0.5 + 0.1 * delta / (delta.abs() + tau);
            prop_assert!((out.values[0] - closed).abs() < 1e-12);
            // With a floor this large the step is close to 0.1·Δ/τ.
            prop_assert!((out.values[0] - 0.5 - 0.1 * delta / tau).abs() <= 0.1 * delta * delta / (tau * tau) + 1e-15);
        }
    }
}
