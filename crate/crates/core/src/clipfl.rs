//! Validation-driven noisy-client identification and one-shot pruning.
//!
//! During the pre-pruning phase each round's sampled clients are ranked by
//! the validation accuracy of their locally trained models. The top `m` are
//! clean candidates and the only models fused; everyone else gets their
//! noise candidacy score (NCS) bumped. At the phase boundary the `⌊p·|S|⌋`
//! clients with the highest NCS are removed for good.
//!
//! All ties (equal accuracy, equal NCS) are broken by ascending client id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::floor_fraction;

/// Sampled client ids ordered by accuracy, best first.
pub fn rank_clients(accs: &[(usize, f64)]) -> Vec<usize> {
    let mut sorted = accs.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().map(|(id, _)| id).collect()
}

/// The first `min(m, len)` ranked ids are clean candidates, the rest noisy.
pub fn split_candidates(ranked: &[usize], m: usize) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let cut = m.min(ranked.len());
    (
        ranked[..cut].iter().copied().collect(),
        ranked[cut..].iter().copied().collect(),
    )
}

/// Noise candidacy scores for every client of the federation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NcsTable {
    scores: BTreeMap<usize, u32>,
    frozen: bool,
}

impl NcsTable {
    pub fn new(client_ids: impl IntoIterator<Item = usize>) -> Self {
        Self {
            scores: client_ids.into_iter().map(|id| (id, 0)).collect(),
            frozen: false,
        }
    }

    pub fn score(&self, id: usize) -> Option<u32> {
        self.scores.get(&id).copied()
    }

    pub fn scores(&self) -> &BTreeMap<usize, u32> {
        &self.scores
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Adds one to each listed client's score.
    pub fn update(&mut self, noisy_candidates: &BTreeSet<usize>) -> Result<()> {
        if self.frozen {
            return Err(Error::Protocol("NCS table is frozen after pruning".into()));
        }
        if let Some(id) = noisy_candidates.iter().find(|id| !self.scores.contains_key(id)) {
            return Err(Error::State(format!("unknown client {id} in NCS update")));
        }
        for id in noisy_candidates {
            *self.scores.entry(*id).or_default() += 1;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Before the one-shot prune.
    Pre,
    /// After it.
    Post,
}

/// Who is still in the federation. `truth_noisy` is carried for reporting
/// and must never feed a training or pruning decision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FederationState {
    pub active: BTreeSet<usize>,
    pub pruned: BTreeSet<usize>,
    pub truth_noisy: BTreeSet<usize>,
    pub phase: Phase,
}

impl FederationState {
    pub fn new(num_clients: usize, truth_noisy: BTreeSet<usize>) -> Self {
        Self {
            active: (0..num_clients).collect(),
            pruned: BTreeSet::new(),
            truth_noisy,
            phase: Phase::Pre,
        }
    }
}

/// Removes the `⌊p·|S|⌋` active clients with the highest NCS, freezes the
/// table and advances to [`Phase::Post`]. Returns the pruned ids in pruning
/// order.
pub fn prune(state: &mut FederationState, table: &mut NcsTable, p: f64) -> Result<Vec<usize>> {
    if state.phase != Phase::Pre {
        return Err(Error::Protocol("pruning already happened".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config("clipfl.p", format!("{p} is outside [0, 1)")));
    }
    let mut order: Vec<usize> = state.active.iter().copied().collect();
    order.sort_by(|a, b| {
        let sa = table.score(*a).unwrap_or(0);
        let sb = table.score(*b).unwrap_or(0);
        match sb.cmp(&sa) {
            Ordering::Equal => a.cmp(b),
            other => other,
        }
    });
    order.truncate(floor_fraction(state.active.len(), p));
    for id in &order {
        state.active.remove(id);
        state.pruned.insert(*id);
    }
    table.frozen = true;
    state.phase = Phase::Post;
    Ok(order)
}

/// Share of pruned clients that really are noisy.
pub fn identification_accuracy(pruned: &BTreeSet<usize>, truth_noisy: &BTreeSet<usize>) -> Result<f64> {
    if pruned.is_empty() {
        return Err(Error::Evaluation(
            "identification accuracy is undefined when nothing was pruned".into(),
        ));
    }
    Ok(pruned.intersection(truth_noisy).count() as f64 / pruned.len() as f64)
}

/// Outcome of one pre-pruning round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundCandidates {
    pub ranked: Vec<usize>,
    pub clean: BTreeSet<usize>,
    pub noisy: BTreeSet<usize>,
}

/// Bundles the NCS table and federation state behind the two calls the
/// round loop needs.
#[derive(Debug, Clone)]
pub struct Controller {
    pub m: usize,
    pub p: f64,
    pub table: NcsTable,
    pub state: FederationState,
}

impl Controller {
    pub fn new(num_clients: usize, m: usize, p: f64, truth_noisy: BTreeSet<usize>) -> Result<Self> {
        if m == 0 {
            return Err(Error::config("clipfl.m", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config("clipfl.p", format!("{p} is outside [0, 1)")));
        }
        Ok(Self {
            m,
            p,
            table: NcsTable::new(0..num_clients),
            state: FederationState::new(num_clients, truth_noisy),
        })
    }

    /// Ranks the round's validation accuracies, splits candidates and
    /// updates the NCS table.
    pub fn observe_round(&mut self, accs: &[(usize, f64)]) -> Result<RoundCandidates> {
        if self.state.phase != Phase::Pre {
            return Err(Error::Protocol("candidate ranking after pruning".into()));
        }
        if let Some((id, _)) = accs.iter().find(|(id, _)| !self.state.active.contains(id)) {
            return Err(Error::State(format!("client {id} is not active")));
        }
        let ranked = rank_clients(accs);
        let (clean, noisy) = split_candidates(&ranked, self.m);
        self.table.update(&noisy)?;
        Ok(RoundCandidates { ranked, clean, noisy })
    }

    pub fn prune(&mut self) -> Result<Vec<usize>> {
        prune(&mut self.state, &mut self.table, self.p)
    }

    /// `None` when nothing was pruned.
    pub fn identification_accuracy(&self) -> Option<f64> {
        identification_accuracy(&self.state.pruned, &self.state.truth_noisy).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(ids: &[usize]) -> BTreeSet<usize> {
        ids.iter().copied().collect()
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_clients(&[(3, 0.9), (1, 0.4), (7, 0.7)]), vec![3, 7, 1]);
        assert_eq!(rank_clients(&[(2, 0.5), (0, 0.5), (9, 0.5)]), vec![0, 2, 9]);
        assert_eq!(rank_clients(&[(4, 0.1)]), vec![4]);
    }

    #[test]
    fn candidate_split_examples() {
        let ranked: Vec<usize> = (0..10).collect();
        let (c, n) = split_candidates(&ranked, 5);
        assert_eq!((c.len(), n.len()), (5, 5));
        let (c, n) = split_candidates(&[4, 1, 2], 5);
        assert_eq!(c, set(&[1, 2, 4]));
        assert!(n.is_empty());
        let (c, n) = split_candidates(&[4, 1, 2], 1);
        assert_eq!(c, set(&[4]));
        assert_eq!(n, set(&[1, 2]));
    }

    #[test]
    fn ncs_counts_flags() {
        let mut t = NcsTable::new(0..4);
        for round in 0..5 {
            let flagged = if round < 3 { set(&[2]) } else { set(&[]) };
            t.update(&flagged).unwrap();
        }
        assert_eq!(t.score(2), Some(3));
        assert_eq!(t.score(0), Some(0));
        assert!(matches!(t.update(&set(&[9])), Err(Error::State(_))));
    }

    #[test]
    fn scripted_six_client_trace() {
        // m = 2. Hand-enumerated:
        // r0 sampled {0,1,2,3}: acc 0:.9 1:.2 2:.5 3:.5 → rank 0,2,3,1 → noisy {3,1}
        // r1 sampled {1,4,5}:   acc 1:.8 4:.1 5:.8    → rank 1,5,4   → noisy {4}
        // r2 sampled {0,2,4,5}: acc .3 .3 .3 .3       → rank 0,2,4,5 → noisy {4,5}
        // r3 sampled {3,4}:     saturated             → noisy {}
        // NCS = {0:0, 1:1, 2:0, 3:1, 4:2, 5:1}
        let mut c = Controller::new(6, 2, 0.5, set(&[])).unwrap();
        c.observe_round(&[(0, 0.9), (1, 0.2), (2, 0.5), (3, 0.5)]).unwrap();
        c.observe_round(&[(1, 0.8), (4, 0.1), (5, 0.8)]).unwrap();
        c.observe_round(&[(0, 0.3), (2, 0.3), (4, 0.3), (5, 0.3)]).unwrap();
        let r3 = c.observe_round(&[(3, 0.0), (4, 1.0)]).unwrap();
        assert!(r3.noisy.is_empty());
        let scores: Vec<u32> = c.table.scores().values().copied().collect();
        assert_eq!(scores, vec![0, 1, 0, 1, 2, 1]);
        // ⌊0.5·6⌋ = 3: client 4 (2), then 1, 3 (score 1, lowest ids first).
        assert_eq!(c.prune().unwrap(), vec![4, 1, 3]);
        assert_eq!(c.state.active, set(&[0, 2, 5]));
    }

    #[test]
    fn prune_counts_and_one_shot() {
        let mut state = FederationState::new(100, set(&[]));
        let mut table = NcsTable::new(0..100);
        assert_eq!(prune(&mut state, &mut table, 0.5).unwrap().len(), 50);
        assert!(matches!(prune(&mut state, &mut table, 0.5), Err(Error::Protocol(_))));
        assert!(table.update(&set(&[1])).is_err());

        let mut state = FederationState::new(7, set(&[]));
        let mut table = NcsTable::new(0..7);
        assert_eq!(prune(&mut state, &mut table, 0.5).unwrap().len(), 3);

        let mut state = FederationState::new(7, set(&[]));
        let mut table = NcsTable::new(0..7);
        assert!(prune(&mut state, &mut table, 0.0).unwrap().is_empty());
        assert_eq!(state.phase, Phase::Post);

        let mut state = FederationState::new(7, set(&[]));
        assert!(matches!(
            prune(&mut state, &mut NcsTable::new(0..7), 1.0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn identification_examples() {
        let truth: BTreeSet<usize> = (0..50).collect();
        assert_eq!(identification_accuracy(&truth, &truth).unwrap(), 1.0);
        let pruned: BTreeSet<usize> = (1..51).collect();
        assert!((identification_accuracy(&pruned, &truth).unwrap() - 0.98).abs() < 1e-12);
        assert_eq!(identification_accuracy(&set(&[0, 60, 70, 80]), &truth).unwrap(), 0.25);
        assert!(identification_accuracy(&set(&[]), &truth).is_err());
    }
}
