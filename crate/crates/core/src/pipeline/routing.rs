use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TaggedSample;
use crate::error::{Error, Result};
use crate::model::MoeModel;
use crate::numerics::Graph;

const CHUNK: usize = 64;

/// Fraction of `(token, selected slot)` pairs each expert receives, per
/// domain, at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub layer: usize,
    pub n_experts: usize,
    /// `proportions[domain][expert]`; each row sums to 1.
    pub proportions: Vec<Vec<f64>>,
    /// Routed tokens per domain.
    pub tokens: Vec<usize>,
}

impl RoutingTable {
    /// Largest proportion in each row.
    pub fn top_share(&self) -> Vec<f64> {
        self.proportions
            .iter()
            .map(|row| row.iter().copied().fold(0.0, f64::max))
            .collect()
    }

    /// Largest `|p − 1/n|` over the whole table.
    pub fn max_deviation(&self) -> f64 {
        let u = 1.0 / self.n_experts as f64;
        self.proportions
            .iter()
            .flatten()
            .map(|p| (p - u).abs())
            .fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("domain,expert,proportion\n");
        for (d, row) in self.proportions.iter().enumerate() {
            for (e, p) in row.iter().enumerate() {
                out.push_str(&format!("{d},{e},{p}\n"));
            }
        }
        out
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(json, text).map_err(|e| Error::io(json, e))
    }
}

pub fn analyze_routing(moe: &MoeModel, eval: &[TaggedSample], layer: usize) -> Result<RoutingTable> {
    if eval.is_empty() {
        return Err(Error::Empty("eval split is empty".into()));
    }
    let n_layers = moe.config().n_layers;
    if layer >= n_layers {
        return Err(Error::OutOfRange {
            index: layer,
            len: n_layers,
        });
    }
    let n = moe.n_experts();
    let n_domains = eval.iter().map(|s| s.domain_id).max().unwrap_or(0) + 1;
    let mut counts = vec![vec![0usize; n]; n_domains];
    let mut tokens = vec![0usize; n_domains];
    for d in 0..n_domains {
        let samples: Vec<&[usize]> = eval
            .iter()
            .filter(|s| s.domain_id == d)
            .map(|s| s.tokens.as_slice())
            .collect();
        for chunk in samples.chunks(CHUNK) {
            let mut g = Graph::new();
            let trace = moe.build(&mut g, chunk, &|_| false)?;
            let mask = &trace.gates[layer].mask;
            tokens[d] += mask.len() / n;
            for (j, &m) in mask.iter().enumerate() {
                if m {
                    counts[d][j % n] += 1;
                }
            }
        }
    }
    let proportions = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect();
    Ok(RoutingTable {
        layer,
        n_experts: n,
        proportions,
        tokens,
    })
}
