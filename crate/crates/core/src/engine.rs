//! The round loop: data preparation, client sampling, local training,
//! ranking and pruning, fusion, evaluation and communication accounting.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::aggregation::{Aggregator, ClientContribution};
use crate::clipfl::Controller;
use crate::config::{DataKind, ExperimentConfig, PartitionKind};
use crate::data::{self, Dataset, SplitRatio};
use crate::error::{Error, Result};
use crate::model::{self, Layout, LocalUpdate, ParamVector};
use crate::noise;
use crate::partition::{self, ClientShard};
use crate::rng::{derive_stream, floor_fraction, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_accuracy: f64,
    pub sampled: Vec<usize>,
    /// Pre-pruning rounds only.
    pub clean_candidates: Vec<usize>,
    /// Pre-pruning rounds only.
    pub noisy_candidates: Vec<usize>,
    /// Models sent down plus models sent up.
    pub comm_units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub clipfl: bool,
    pub per_round: Vec<RoundMetrics>,
    pub final_accuracy: f64,
    pub identification_accuracy: Option<f64>,
    pub total_comm_units: usize,
    pub pruned_ids: Vec<usize>,
    pub ncs: BTreeMap<usize, u32>,
    pub truth_noisy: Vec<usize>,
    pub config: ExperimentConfig,
}

/// Mean test accuracy over the last `min(10, n)` rounds.
pub fn final_accuracy(per_round: &[RoundMetrics]) -> Result<f64> {
    if per_round.is_empty() {
        return Err(Error::Evaluation("no rounds to average".into()));
    }
    let tail = &per_round[per_round.len().saturating_sub(10)..];
    Ok(tail.iter().map(|r| r.test_accuracy).sum::<f64>() / tail.len() as f64)
}

/// Draws `⌊|active|·C⌋` clients without replacement, ascending. Clients
/// for which `eligible` is false (empty shards) are never drawn; if too
/// few remain the round proceeds with all of them.
pub fn sample_clients(
    active: &BTreeSet<usize>,
    sample_rate: f64,
    eligible: impl Fn(usize) -> bool,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    if !(sample_rate > 0.0 && sample_rate <= 1.0) {
        return Err(Error::config(
            "federation.sample_rate",
            format!("{sample_rate} is outside (0, 1]"),
        ));
    }
    let wanted = floor_fraction(active.len(), sample_rate);
    if wanted == 0 {
        return Err(Error::config(
            "federation.sample_rate",
            format!("⌊{}·{sample_rate}⌋ = 0 clients per round", active.len()),
        ));
    }
    let pool: Vec<usize> = active.iter().copied().filter(|&id| eligible(id)).collect();
    if pool.is_empty() {
        return Err(Error::State("every active client has an empty shard".into()));
    }
    let mut picked: Vec<usize> = rng
        .sample_indices(pool.len(), wanted.min(pool.len()))
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Transfers a run would make if every sampled client had data:
/// `Σ_t 2·⌊|S_t|·C⌋`.
pub fn planned_comm_units(cfg: &ExperimentConfig) -> usize {
    let n = cfg.federation.clients;
    let c = cfg.federation.sample_rate;
    if cfg.clipfl.enabled {
        let survivors = n - floor_fraction(n, cfg.clipfl.p);
        2 * (cfg.clipfl.t_pre * floor_fraction(n, c) + cfg.clipfl.t_post * floor_fraction(survivors, c))
    } else {
        2 * cfg.total_rounds() * floor_fraction(n, c)
    }
}

/// Everything the round loop needs, built once per configuration.
#[derive(Debug, Clone)]
pub struct Federation {
    pub dataset: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
    /// Client shards after label corruption, indexed by client id.
    pub shards: Vec<ClientShard>,
    /// Ground-truth noisy clients. Reporting only.
    pub truth_noisy: BTreeSet<usize>,
    /// Number of labels changed per noisy client.
    pub label_flips: BTreeMap<usize, usize>,
    pub layout: Layout,
}

/// Data generation or loading, split, partition, noisy-client selection and
/// corruption.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Federation> {
    cfg.validate()?;
    let seed = cfg.seed;
    let dataset = match cfg.data.kind {
        DataKind::Synthetic => {
            data::generate_synthetic(&cfg.data.synthetic_spec(), &mut derive_stream(seed, "data"))?
        }
        DataKind::Csv => {
            let path = cfg
                .data
                .path
                .as_deref()
                .ok_or_else(|| Error::config("data.path", "missing"))?;
            data::load_csv(path)?
        }
    };
    let splits = data::split(dataset.n_samples(), SplitRatio::default(), &mut derive_stream(seed, "split"))?;
    if splits.validation.is_empty() || splits.test.is_empty() {
        return Err(Error::Data("validation or test split is empty".into()));
    }

    let n = cfg.federation.clients;
    let mut part_rng = derive_stream(seed, "partition");
    let shards = match cfg.partition.kind {
        PartitionKind::Iid => partition::partition_iid(&splits.train, dataset.labels(), n, &mut part_rng)?,
        PartitionKind::Dirichlet => partition::partition_dirichlet(
            &splits.train,
            dataset.labels(),
            n,
            cfg.partition.alpha,
            &mut part_rng,
        )?,
    };

    let selection = noise::select_noisy_clients(n, cfg.noise.rho, &mut derive_stream(seed, "noise/select"))?;
    let matrix = noise::symmetric_matrix(dataset.num_classes(), cfg.noise.mu)?;
    let mut label_flips = BTreeMap::new();
    let shards = shards
        .into_iter()
        .map(|shard| {
            if selection.noisy_ids.contains(&shard.client_id) {
                let mut rng = derive_stream(seed, &format!("noise/client/{}", shard.client_id));
                let (noisy, flips) = noise::corrupt_labels(&shard, &matrix, &mut rng)?;
                label_flips.insert(shard.client_id, flips);
                Ok(noisy)
            } else {
                Ok(shard)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let layout = Layout::mlp(dataset.feature_dim(), cfg.model.hidden, dataset.num_classes())?;
    Ok(Federation {
        validation: dataset.subset(&splits.validation),
        test: dataset.subset(&splits.test),
        dataset,
        shards,
        truth_noisy: selection.noisy_ids,
        label_flips,
        layout,
    })
}

#[cfg(feature = "parallel")]
fn map_clients<T, F>(threads: Option<usize>, ids: &[usize], f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    let run = || ids.par_iter().map(|&id| f(id)).collect();
    match threads {
        Some(1) => ids.iter().map(|&id| f(id)).collect(),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        },
        None => run(),
    }
}

#[cfg(not(feature = "parallel"))]
fn map_clients<T, F>(_threads: Option<usize>, ids: &[usize], f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    ids.iter().map(|&id| f(id)).collect()
}

impl Federation {
    fn local_updates(&self, cfg: &ExperimentConfig, round: usize, global: &ParamVector, sampled: &[usize]) -> Result<Vec<(usize, LocalUpdate)>> {
        let opt = cfg.optimizer();
        let loss = cfg.loss();
        map_clients(cfg.threads, sampled, |id| {
            let mut rng = derive_stream(cfg.seed, &format!("train/round/{round}/client/{id}"));
            model::local_update(global, &self.shards[id], &self.dataset, &opt, &loss, &mut rng)
                .map(|u| (id, u))
        })
        .into_iter()
        .collect()
    }

    fn contribution(&self, id: usize, update: &LocalUpdate) -> ClientContribution {
        ClientContribution {
            client_id: id,
            params: update.params.clone(),
            n_samples: self.shards[id].len(),
            local_steps: update.steps,
        }
    }

    /// One round: sample, train locally, rank and fuse, evaluate.
    fn run_round(
        &self,
        cfg: &ExperimentConfig,
        round: usize,
        global: &ParamVector,
        controller: Option<&mut Controller>,
        pre_pruning: bool,
        aggregator: &mut Aggregator,
    ) -> Result<(ParamVector, RoundMetrics)> {
        let active: BTreeSet<usize> = match &controller {
            Some(c) => c.state.active.clone(),
            None => (0..self.shards.len()).collect(),
        };
        let mut rng = derive_stream(cfg.seed, &format!("sample/round/{round}"));
        let sampled = sample_clients(
            &active,
            cfg.federation.sample_rate,
            |id| !self.shards[id].is_empty(),
            &mut rng,
        )?;
        let updates = self.local_updates(cfg, round, global, &sampled)?;

        let (fused_ids, clean, noisy) = match controller {
            Some(ctrl) if pre_pruning => {
                let positions: Vec<usize> = (0..updates.len()).collect();
                let accs = map_clients(cfg.threads, &positions, |i| {
                    model::evaluate(&updates[i].1.params, &self.validation).map(|a| (updates[i].0, a))
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
                let cands = ctrl.observe_round(&accs)?;
                (
                    cands.clean.clone(),
                    cands.clean.into_iter().collect(),
                    cands.noisy.into_iter().collect(),
                )
            }
            _ => (sampled.iter().copied().collect::<BTreeSet<_>>(), Vec::new(), Vec::new()),
        };

        let contribs: Vec<ClientContribution> = updates
            .iter()
            .filter(|(id, _)| fused_ids.contains(id))
            .map(|(id, u)| self.contribution(*id, u))
            .collect();
        let next = aggregator.fuse(global, &contribs)?;
        let test_accuracy = model::evaluate(&next, &self.test)?;
        let metrics = RoundMetrics {
            round,
            test_accuracy,
            comm_units: 2 * sampled.len(),
            sampled,
            clean_candidates: clean,
            noisy_candidates: noisy,
        };
        Ok((next, metrics))
    }

    /// Runs every round of the configured mode. `observer` sees each round's
    /// metrics and the new global model.
    pub fn run(
        &self,
        cfg: &ExperimentConfig,
        observer: &mut dyn FnMut(&RoundMetrics, &ParamVector),
    ) -> Result<RunReport> {
        cfg.validate()?;
        let seed = cfg.seed;
        let n = self.shards.len();
        let mut global = model::init_params(&self.layout, &mut derive_stream(seed, "init"));
        let mut aggregator = Aggregator::new(cfg.server.optimizer, &self.layout, &cfg.server_hyper());
        let mut controller = if cfg.clipfl.enabled {
            Some(Controller::new(n, cfg.clipfl.m, cfg.clipfl.p, self.truth_noisy.clone())?)
        } else {
            None
        };
        let mut pruned_ids = Vec::new();
        let mut per_round = Vec::with_capacity(cfg.total_rounds());

        for round in 0..cfg.total_rounds() {
            if round == cfg.clipfl.t_pre {
                if let Some(ctrl) = controller.as_mut() {
                    pruned_ids = ctrl.prune().map_err(|e| e.in_round(round))?;
                }
            }
            let pre_pruning = controller.is_some() && round < cfg.clipfl.t_pre;
            let (next, metrics) = self
                .run_round(cfg, round, &global, controller.as_mut(), pre_pruning, &mut aggregator)
                .map_err(|e| e.in_round(round))?;
            global = next;
            observer(&metrics, &global);
            per_round.push(metrics);
        }

        let (identification_accuracy, ncs) = match &controller {
            Some(c) => (c.identification_accuracy(), c.table.scores().clone()),
            None => (None, BTreeMap::new()),
        };
        Ok(RunReport {
            seed,
            clipfl: controller.is_some(),
            final_accuracy: final_accuracy(&per_round)?,
            total_comm_units: per_round.iter().map(|r| r.comm_units).sum(),
            per_round,
            identification_accuracy,
            pruned_ids,
            ncs,
            truth_noisy: self.truth_noisy.iter().copied().collect(),
            config: cfg.clone(),
        })
    }
}

/// Prepares the federation and runs it.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<RunReport> {
    prepare(cfg)?.run(cfg, &mut |_, _| {})
}

/// Runs the same configuration and seed twice, once without and once with
/// pruning. Returns `(vanilla, clipfl)`.
pub fn run_ab(cfg: &ExperimentConfig) -> Result<(RunReport, RunReport)> {
    let mut vanilla_cfg = cfg.clone();
    vanilla_cfg.clipfl.enabled = false;
    let mut clipfl_cfg = cfg.clone();
    clipfl_cfg.clipfl.enabled = true;
    clipfl_cfg.validate()?;
    let federation = prepare(&clipfl_cfg)?;
    let vanilla = federation.run(&vanilla_cfg, &mut |_, _| {})?;
    let clipfl = federation.run(&clipfl_cfg, &mut |_, _| {})?;
    Ok((vanilla, clipfl))
}
