use serde::{Deserialize, Serialize};

use super::run::{median, simulate};
use super::scenario::Scenario;
use crate::error::Result;
use crate::orchestrator::Strategy;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub tasks: usize,
    pub success: usize,
    pub failure: usize,
    pub error: usize,
    pub median_latency_ms: f64,
    pub median_cost: f64,
    pub total_cost: f64,
    pub top_agent_share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub runs: usize,
    /// Median over seeds of the per-seed median.
    pub median_latency_ms: f64,
    pub median_cost: f64,
    /// Medians over every task of every seed.
    pub pooled_median_latency_ms: f64,
    pub pooled_median_cost: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    pub summaries: Vec<StrategySummary>,
}

/// Runs every strategy under every seed. Seeds are shared across strategies
/// so each comparison sees the same attempt draws.
pub fn sweep(base: &Scenario, strategies: &[Strategy], seeds: &[u64]) -> Result<Sweep> {
    let mut out = Sweep::default();
    for &strategy in strategies {
        let mut pooled_lat = Vec::new();
        let mut pooled_cost = Vec::new();
        let mut tasks = 0;
        let mut success = 0;
        let first = out.rows.len();
        for &seed in seeds {
            let run = simulate(&base.with_strategy(strategy).with_seed(seed))?;
            let m = run.metrics;
            pooled_lat.extend(m.latencies_ms.iter().map(|&l| l as f64));
            pooled_cost.extend(m.costs.iter().copied());
            tasks += m.tasks;
            success += m.success;
            out.rows.push(SweepRow {
                strategy,
                seed,
                tasks: m.tasks,
                success: m.success,
                failure: m.failure,
                error: m.error,
                median_latency_ms: m.median_latency_ms,
                median_cost: m.median_cost,
                total_cost: m.total_cost,
                top_agent_share: m.top_agent_share,
            });
        }
        let rows = &out.rows[first..];
        let lat: Vec<f64> = rows.iter().map(|r| r.median_latency_ms).collect();
        let cost: Vec<f64> = rows.iter().map(|r| r.median_cost).collect();
        out.summaries.push(StrategySummary {
            strategy,
            runs: rows.len(),
            median_latency_ms: median(&lat),
            median_cost: median(&cost),
            pooled_median_latency_ms: median(&pooled_lat),
            pooled_median_cost: median(&pooled_cost),
            success_rate: if tasks == 0 { 0.0 } else { success as f64 / tasks as f64 },
        });
    }
    Ok(out)
}

impl Sweep {
    pub fn summary(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.summaries.iter().find(|s| s.strategy == strategy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "strategy,seed,tasks,success,failure,error,median_latency_ms,median_cost,total_cost,top_agent_share\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.strategy.short_name(),
                r.seed,
                r.tasks,
                r.success,
                r.failure,
                r.error,
                r.median_latency_ms,
                r.median_cost,
                r.total_cost,
                r.top_agent_share
            ));
        }
        out
    }
}
