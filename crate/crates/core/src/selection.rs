//! Seed sampling, per-expert perplexity tables and capacity-bounded bucket
//! assignment.

use serde::{Deserialize, Serialize};

use crate::corpus::TaggedSample;
use crate::error::{Error, Result};
use crate::model::{perplexity, LanguageModel};
use crate::numerics::RngState;

#[derive(Clone, Debug, PartialEq)]
pub struct SeedDataset {
    pub samples: Vec<TaggedSample>,
    pub source_fraction: f64,
}

/// Draws `max(1, round(fraction · |corpus|))` samples without replacement,
/// in a seeded random order.
pub fn sample_seed(corpus: &[TaggedSample], fraction: f64, rng: &RngState) -> Result<SeedDataset> {
    if corpus.is_empty() {
        return Err(Error::Empty("cannot sample seed data from an empty corpus".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("seed fraction must lie in (0, 1], got {fraction}")));
    }
    let size = ((fraction * corpus.len() as f64).round() as usize).clamp(1, corpus.len());
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    rng.generator().shuffle(&mut idx);
    Ok(SeedDataset {
        samples: idx[..size].iter().map(|&i| corpus[i].clone()).collect(),
        source_fraction: fraction,
    })
}

/// Row `i` holds the perplexity of seed sample `i` under every expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerplexityTable {
    pub sample_ids: Vec<u64>,
    pub values: Vec<Vec<f64>>,
}

impl PerplexityTable {
    pub fn new(sample_ids: Vec<u64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if sample_ids.len() != values.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} rows",
                sample_ids.len(),
                values.len()
            )));
        }
        let n = values.first().map_or(0, Vec::len);
        for row in &values {
            if row.len() != n || n == 0 {
                return Err(Error::Shape("perplexity rows must share a non-zero width".into()));
            }
            if row.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
                return Err(Error::NonFinite("perplexities must be positive and finite".into()));
            }
        }
        Ok(PerplexityTable { sample_ids, values })
    }

    pub fn n_experts(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn build_ppl_table<M: LanguageModel>(experts: &[M], seed: &SeedDataset) -> Result<PerplexityTable> {
    if experts.is_empty() {
        return Err(Error::Empty("perplexity table needs at least one expert".into()));
    }
    let values = seed
        .samples
        .iter()
        .map(|s| experts.iter().map(|e| perplexity(e, &s.tokens)).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    PerplexityTable::new(seed.samples.iter().map(|s| s.sample_id).collect(), values)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertBucket {
    pub expert_index: usize,
    pub capacity: usize,
    pub sample_ids: Vec<u64>,
}

/// Result of bucket assignment, as serialized next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buckets {
    pub buckets: Vec<ExpertBucket>,
    pub dropped_count: usize,
    pub dropped_ids: Vec<u64>,
}

impl Buckets {
    fn empty(n: usize, capacity: usize) -> Self {
        Buckets {
            buckets: (0..n)
                .map(|i| ExpertBucket {
                    expert_index: i,
                    capacity,
                    sample_ids: Vec::new(),
                })
                .collect(),
            dropped_count: 0,
            dropped_ids: Vec::new(),
        }
    }

    fn drop_sample(&mut self, id: u64) {
        self.dropped_count += 1;
        self.dropped_ids.push(id);
    }
}

/// `ceil(|seed| / n)`.
pub fn default_capacity(seed_len: usize, n_experts: usize) -> usize {
    seed_len.div_ceil(n_experts.max(1)).max(1)
}

/// Walks samples in table order; each goes to its lowest-perplexity expert
/// that still has room (ties to the lower expert index) or is dropped when
/// every bucket is full.
pub fn assign_buckets(table: &PerplexityTable, capacity: usize) -> Result<Buckets> {
    if capacity == 0 {
        return Err(Error::InvalidArgument("bucket capacity must be >= 1".into()));
    }
    let n = table.n_experts();
    let mut out = Buckets::empty(n, capacity);
    for (id, row) in table.sample_ids.iter().zip(&table.values) {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        match order
            .into_iter()
            .find(|&e| out.buckets[e].sample_ids.len() < capacity)
        {
            Some(e) => out.buckets[e].sample_ids.push(*id),
            None => out.drop_sample(*id),
        }
    }
    Ok(out)
}

/// Fills buckets by a uniform draw over the buckets that still have room.
pub fn assign_random(sample_ids: &[u64], n_experts: usize, capacity: usize, rng: &RngState) -> Result<Buckets> {
    if capacity == 0 || n_experts == 0 {
        return Err(Error::InvalidArgument("need capacity >= 1 and at least one expert".into()));
    }
    let mut out = Buckets::empty(n_experts, capacity);
    let mut gen = rng.generator();
    for &id in sample_ids {
        let open: Vec<usize> = (0..n_experts)
            .filter(|&e| out.buckets[e].sample_ids.len() < capacity)
            .collect();
        if open.is_empty() {
            out.drop_sample(id);
        } else {
            let e = open[gen.index(open.len())];
            out.buckets[e].sample_ids.push(id);
        }
    }
    Ok(out)
}
