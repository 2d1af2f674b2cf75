//! Symmetric label noise: transition matrices, noisy-client selection and
//! per-client label corruption.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::partition::ClientShard;
use crate::rng::{floor_fraction, RngStream};

/// Row-stochastic `K × K` corruption model. Row `i` is the distribution of
/// the observed label given true label `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTransitionMatrix {
    num_classes: usize,
    mu: f64,
    entries: Vec<f64>,
}

impl NoiseTransitionMatrix {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.num_classes + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.num_classes..(from + 1) * self.num_classes]
    }

    /// Draws an observed label for true label `y` by inverting the row CDF.
    pub fn sample(&self, y: usize, rng: &mut RngStream) -> usize {
        let row = self.row(y);
        let u = rng.uniform_f64();
        let mut acc = 0.0;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        // u landed in the rounding gap above the row sum.
        row.iter().rposition(|&p| p > 0.0).unwrap_or(y)
    }
}

/// Diagonal `1 − μ`, off-diagonal `μ / (K − 1)`.
pub fn symmetric_matrix(num_classes: usize, mu: f64) -> Result<NoiseTransitionMatrix> {
    if num_classes < 2 {
        return Err(Error::config("data.k", "noise model needs at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::config("noise.mu", format!("{mu} is outside [0, 1]")));
    }
    let off = mu / (num_classes - 1) as f64;
    let mut entries = vec![off; num_classes * num_classes];
    for i in 0..num_classes {
        entries[i * num_classes + i] = 1.0 - mu;
    }
    Ok(NoiseTransitionMatrix {
        num_classes,
        mu,
        entries,
    })
}

/// Ground-truth set of corrupted clients. Used for metrics only.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyClientSelection {
    pub noisy_ids: BTreeSet<usize>,
    pub rho: f64,
}

/// Uniformly random subset of `⌊ρ·N⌋` of the client ids `0..N`.
pub fn select_noisy_clients(
    num_clients: usize,
    rho: f64,
    rng: &mut RngStream,
) -> Result<NoisyClientSelection> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::config("noise.rho", format!("{rho} is outside [0, 1]")));
    }
    let count = floor_fraction(num_clients, rho).min(num_clients);
    let noisy_ids = rng.sample_indices(num_clients, count).into_iter().collect();
    Ok(NoisyClientSelection { noisy_ids, rho })
}

/// Resamples every label of `shard` from its row of `matrix`. Returns the
/// corrupted shard and how many labels changed.
pub fn corrupt_labels(
    shard: &ClientShard,
    matrix: &NoiseTransitionMatrix,
    rng: &mut RngStream,
) -> Result<(ClientShard, usize)> {
    let k = matrix.num_classes();
    let mut flips = 0;
    let mut labels = Vec::with_capacity(shard.labels.len());
    for &y in &shard.labels {
        if y >= k {
            return Err(Error::Data(format!(
                "client {} has label {y} but the noise model has {k} classes",
                shard.client_id
            )));
        }
        let observed = matrix.sample(y, rng);
        if observed != y {
            flips += 1;
        }
        labels.push(observed);
    }
    Ok((
        ClientShard {
            client_id: shard.client_id,
            indices: shard.indices.clone(),
            labels,
        },
        flips,
    ))
}
