//! Distribution of the train split across clients.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// One client's local data: indices into the global dataset plus the labels
/// the client actually sees (corrupted for noisy clients).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ClientShard {
    fn from_indices(client_id: usize, indices: Vec<usize>, labels: &[usize]) -> Self {
        let local = indices.iter().map(|&i| labels[i]).collect();
        Self {
            client_id,
            indices,
            labels: local,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_clients(num_clients: usize) -> Result<()> {
    if num_clients == 0 {
        return Err(Error::config("federation.clients", "need at least one client"));
    }
    Ok(())
}

/// Random permutation of `train_indices` cut into `num_clients` shards whose
/// sizes differ by at most one. `labels` is indexed by global sample index.
pub fn partition_iid(
    train_indices: &[usize],
    labels: &[usize],
    num_clients: usize,
    rng: &mut RngStream,
) -> Result<Vec<ClientShard>> {
    check_clients(num_clients)?;
    if train_indices.len() < num_clients {
        return Err(Error::config(
            "federation.clients",
            format!(
                "{num_clients} clients but only {} training samples",
                train_indices.len()
            ),
        ));
    }
    let mut order = train_indices.to_vec();
    rng.shuffle(&mut order);

    let base = order.len() / num_clients;
    let extra = order.len() % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    let mut rest = order.as_slice();
    for client_id in 0..num_clients {
        let size = base + usize::from(client_id < extra);
        let (head, tail) = rest.split_at(size);
        shards.push(ClientShard::from_indices(client_id, head.to_vec(), labels));
        rest = tail;
    }
    Ok(shards)
}

/// Integer allocation of `total` items in proportion to `weights` using the
/// largest-remainder method. Ties on the remainder go to the lower index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    // Floating error can only push the floor sum slightly below `total`.
    let mut remaining = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &j in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[j] += 1;
        remaining -= 1;
    }
    counts
}

/// For each class, draws client proportions from `Dir_N(α)` (normalised
/// `Gamma(α, 1)` draws) and deals that class's shuffled samples out in those
/// proportions. Shards may end up empty for small `α`.
pub fn partition_dirichlet(
    train_indices: &[usize],
    labels: &[usize],
    num_clients: usize,
    alpha: f64,
    rng: &mut RngStream,
) -> Result<Vec<ClientShard>> {
    check_clients(num_clients)?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("partition.alpha", format!("{alpha} must be positive")));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::config("partition.alpha", e.to_string()))?;

    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in train_indices {
        by_class.entry(labels[i]).or_default().push(i);
    }

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (_, mut members) in by_class {
        rng.shuffle(&mut members);
        let mut weights: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
        if weights.iter().sum::<f64>() <= 0.0 {
            // Every draw underflowed; the limit of Dir(α→0) is a vertex.
            weights.iter_mut().for_each(|w| *w = 0.0);
            weights[rng.uniform_index(num_clients)] = 1.0;
        }
        let counts = largest_remainder(&weights, members.len());
        let mut rest = members.as_slice();
        for (client, count) in counts.into_iter().enumerate() {
            let (head, tail) = rest.split_at(count);
            assigned[client].extend_from_slice(head);
            rest = tail;
        }
    }

    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| ClientShard::from_indices(client_id, idx, labels))
        .collect())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::rng::derive_stream;

    fn balanced_labels(k: usize, per_class: usize) -> Vec<usize> {
        (0..k * per_class).map(|i| i / per_class).collect()
    }

    fn assert_disjoint_cover(shards: &[ClientShard], train: &[usize]) {
        let mut all: Vec<usize> = shards.iter().flat_map(|s| s.indices.clone()).collect();
        all.sort_unstable();
        let mut expected = train.to_vec();
        expected.sort_unstable();
        assert_eq!(all, expected);
    }

    #[test]
    fn iid_sizes() {
        let labels = vec![0; 45_000];
        let train: Vec<usize> = (0..45_000).collect();
        let shards = partition_iid(&train, &labels, 100, &mut derive_stream(1, "p")).unwrap();
        assert!(shards.iter().all(|s| s.len() == 450));

        let train: Vec<usize> = (0..10).collect();
        let shards = partition_iid(&train, &labels, 3, &mut derive_stream(1, "p")).unwrap();
        let sizes: Vec<usize> = shards.iter().map(ClientShard::len).collect();
        assert_eq!(sizes, vec![4, 3, 3]);

        let shards = partition_iid(&train, &labels, 1, &mut derive_stream(1, "p")).unwrap();
        assert_eq!(shards.len(), 1);
        assert_disjoint_cover(&shards, &train);
    }

    #[test]
    fn shard_labels_follow_indices() {
        let labels = balanced_labels(4, 5);
        let train: Vec<usize> = (0..20).collect();
        for s in partition_dirichlet(&train, &labels, 3, 0.5, &mut derive_stream(2, "p")).unwrap() {
            for (i, y) in s.indices.iter().zip(&s.labels) {
                assert_eq!(labels[*i], *y);
            }
        }
    }

    #[test]
    fn dirichlet_single_client_gets_everything() {
        let labels = balanced_labels(5, 7);
        let train: Vec<usize> = (0..35).collect();
        let shards = partition_dirichlet(&train, &labels, 1, 0.01, &mut derive_stream(3, "p")).unwrap();
        assert_eq!(shards[0].len(), 35);
    }

    #[test]
    fn dirichlet_conserves_samples() {
        let labels = balanced_labels(10, 100);
        let train: Vec<usize> = (0..1000).collect();
        let shards = partition_dirichlet(&train, &labels, 10, 0.5, &mut derive_stream(4, "p")).unwrap();
        assert_eq!(shards.iter().map(ClientShard::len).sum::<usize>(), 1000);
        assert_disjoint_cover(&shards, &train);
    }

    #[test]
    fn dirichlet_large_alpha_is_near_uniform() {
        let labels = balanced_labels(10, 1000);
        let train: Vec<usize> = (0..10_000).collect();
        let shards = partition_dirichlet(&train, &labels, 10, 1e6, &mut derive_stream(5, "p")).unwrap();
        for s in &shards {
            let mut hist = [0usize; 10];
            for &y in &s.labels {
                hist[y] += 1;
            }
            for &h in &hist {
                assert!((h as f64 - 100.0).abs() <= 5.0, "{hist:?}");
            }
        }
    }

    #[test]
    fn dirichlet_rejects_nonpositive_alpha() {
        let labels = balanced_labels(2, 2);
        let train: Vec<usize> = (0..4).collect();
        assert!(partition_dirichlet(&train, &labels, 2, 0.0, &mut derive_stream(5, "p")).is_err());
        assert!(partition_dirichlet(&train, &labels, 2, -1.0, &mut derive_stream(5, "p")).is_err());
    }

    #[test]
    fn largest_remainder_hand_case() {
        // Quotas 3.5, 2.5, 4.0 → floors 3, 2, 4 with one left over; the tie
        // on .5 goes to index 0.
        assert_eq!(largest_remainder(&[0.35, 0.25, 0.4], 10), vec![4, 2, 4]);
    }

    proptest! {
        #[test]
        fn largest_remainder_conserves(weights in prop::collection::vec(1e-9f64..10.0, 1..30), total in 0usize..500) {
            let counts = largest_remainder(&weights, total);
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            let sum: f64 = weights.iter().sum();
            for (c, w) in counts.iter().zip(&weights) {
                let q = w / sum * total as f64;
                prop_assert!((*c as f64 - q).abs() < 1.0 + 1e-9);
            }
        }

        #[test]
        fn partitions_are_deterministic(seed in any::<u64>(), n in 1usize..12) {
            let labels = balanced_labels(4, 10);
            let train: Vec<usize> = (0..40).collect();
            let a = partition_dirichlet(&train, &labels, n, 0.3, &mut derive_stream(seed, "p")).unwrap();
            let b = partition_dirichlet(&train, &labels, n, 0.3, &mut derive_stream(seed, "p")).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
