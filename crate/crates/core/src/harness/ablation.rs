use std::fmt;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, FlowSpec, Variant};
use super::metrics::MetricsRecord;
use super::train::meta_train;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Mean post-training evaluation travel time per scenario.
    pub travel_time_s: Vec<f64>,
    /// Every training row of this variant, across scenarios and seeds.
    pub training: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub scenarios: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "| variant |")?;
        for s in &self.scenarios {
            write!(f, " {s} |")?;
        }
        writeln!(f)?;
        write!(f, "|---|")?;
        for _ in &self.scenarios {
            write!(f, "---:|")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "| {} |", r.variant)?;
            for t in &r.travel_time_s {
                write!(f, " {t:.2} |")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Train each learned variant on each scenario and seed; the table holds
/// the greedy evaluation of the trained parameters on that scenario and seed.
pub fn run_ablation(base: &ExperimentConfig) -> Result<AblationTable> {
    base.validate()?;
    let flows: Vec<FlowSpec> = if base.ablation_flows.is_empty() {
        vec![base.flow.clone()]
    } else {
        base.ablation_flows.clone()
    };
    let mut rows = Vec::new();
    for variant in Variant::LEARNED {
        let mut row = AblationRow {
            variant,
            travel_time_s: Vec::new(),
            training: Vec::new(),
        };
        for flow in &flows {
            let cfg = ExperimentConfig {
                variant,
                flow: flow.clone(),
                ..base.clone()
            };
            let mut evals = Vec::new();
            for &seed in &cfg.seeds {
                let out = meta_train(&cfg, seed, |_| Ok(()))?;
                evals.push(out.final_eval.avg_travel_time_s);
                row.training.extend(out.metrics);
            }
            row.travel_time_s.push(evals.iter().sum::<f64>() / evals.len() as f64);
        }
        rows.push(row);
    }
    Ok(AblationTable {
        scenarios: flows.iter().map(ToString::to_string).collect(),
        rows,
    })
}
