//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export has a plain Rust twin (`*_impl`) so the logic can be tested
//! natively; the wasm wrappers only convert errors into JS exceptions.

use clipfl_core::config::parse_config_str;
use clipfl_core::engine::{self, RunReport};
use clipfl_core::noise::symmetric_matrix;
use clipfl_core::partition::partition_dirichlet;
use clipfl_core::rng::derive_stream;
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Small enough to finish in a few seconds in a browser tab.
pub const DEMO_CONFIG: &str = r#"
seed = 1
[data]
k = 10
per_class = 60
dim = 64
spread = 0.7
[federation]
clients = 20
sample_rate = 0.5
[noise]
mu = 0.8
rho = 0.5
[model]
hidden = 16
[opt]
epochs = 5
[clipfl]
m = 5
p = 0.5
t_pre = 20
t_post = 10
"#;

/// Row-major K×K symmetric noise matrix.
pub fn noise_matrix_impl(k: usize, mu: f64) -> Result<Vec<f64>, String> {
    let t = symmetric_matrix(k, mu).map_err(|e| e.to_string())?;
    Ok((0..k).flat_map(|i| t.row(i).to_vec()).collect())
}

/// Row-major N×K label counts of a Dirichlet split of a balanced label set.
pub fn partition_histogram_impl(
    n_clients: usize,
    alpha: f64,
    k: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<u32>, String> {
    if k == 0 {
        return Err("k must be at least 1".into());
    }
    let labels: Vec<usize> = (0..k * per_class).map(|i| i % k).collect();
    let train: Vec<usize> = (0..labels.len()).collect();
    let shards = partition_dirichlet(&train, &labels, n_clients, alpha, &mut derive_stream(seed, "partition"))
        .map_err(|e| e.to_string())?;
    let mut counts = vec![0u32; n_clients * k];
    for shard in &shards {
        for &label in &shard.labels {
            counts[shard.client_id * k + label] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Serialize)]
pub struct AbResult {
    pub vanilla_curve: Vec<f64>,
    pub clipfl_curve: Vec<f64>,
    pub vanilla_final: f64,
    pub clipfl_final: f64,
    pub identification_accuracy: Option<f64>,
    pub t_pre: usize,
    pub ncs: Vec<u32>,
    pub pruned_ids: Vec<usize>,
    pub truth_noisy: Vec<usize>,
}

fn curve(r: &RunReport) -> Vec<f64> {
    r.per_round.iter().map(|m| m.test_accuracy).collect()
}

/// Runs vanilla and pruning side by side on `DEMO_CONFIG` with `overrides`
/// applied. Overrides are `key=value` lines, e.g. `noise.mu=0.5`.
pub fn run_ab_impl(overrides: &str) -> Result<AbResult, String> {
    let mut pairs = Vec::new();
    for line in overrides.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{line}`"))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let cfg = parse_config_str(DEMO_CONFIG, &pairs).map_err(|e| e.to_string())?;
    let (vanilla, clipfl) = engine::run_ab(&cfg).map_err(|e| e.to_string())?;
    Ok(AbResult {
        vanilla_curve: curve(&vanilla),
        clipfl_curve: curve(&clipfl),
        vanilla_final: vanilla.final_accuracy,
        clipfl_final: clipfl.final_accuracy,
        identification_accuracy: clipfl.identification_accuracy,
        t_pre: cfg.clipfl.t_pre,
        ncs: clipfl.ncs.values().copied().collect(),
        pruned_ids: clipfl.pruned_ids,
        truth_noisy: clipfl.truth_noisy,
    })
}

#[wasm_bindgen]
pub fn noise_matrix(k: usize, mu: f64) -> Result<Vec<f64>, JsError> {
    noise_matrix_impl(k, mu).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn partition_histogram(n_clients: usize, alpha: f64, k: usize, per_class: usize, seed: u32) -> Result<Vec<u32>, JsError> {
    partition_histogram_impl(n_clients, alpha, k, per_class, seed as u64).map_err(|e| JsError::new(&e))
}

/// Returns the A/B result as a JSON string.
#[wasm_bindgen]
pub fn run_ab(overrides: &str) -> Result<String, JsError> {
    let result = run_ab_impl(overrides).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&result).map_err(|e| JsError::new(&e.to_string()))
}
