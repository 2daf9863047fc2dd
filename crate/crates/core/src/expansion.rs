//! Growing an expert pool from checkpoints: delta similarity, parent
//! selection, DARE and the genetic merge loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{lora_effective_delta, DenseModel, FFN_WEIGHTS};
use crate::numerics::{RngState, Role, Tensor};

/// Where an expert came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Provenance {
    Checkpoint {
        step: usize,
        tag: String,
    },
    Merged {
        parent_j: usize,
        parent_k: usize,
        alpha: f64,
        drop_rate: f64,
        /// Seed of the iteration's stream; `merge_pair` with
        /// `RngState::new(seed)` replays the merge.
        seed: u64,
    },
}

/// Experts that all share the architecture of a common base model.
#[derive(Clone, Debug)]
pub struct ExpertSet {
    base: DenseModel,
    experts: Vec<DenseModel>,
    provenance: Vec<Provenance>,
}

fn check_compatible(base: &DenseModel, other: &DenseModel) -> Result<()> {
    if base.config() != other.config() {
        return Err(Error::Shape("expert config differs from base".into()));
    }
    for (a, b) in base.params().iter().zip(other.params().iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} {:?} does not match {} {:?}",
                b.name,
                b.value.shape(),
                a.name,
                a.value.shape()
            )));
        }
    }
    Ok(())
}

impl ExpertSet {
    pub fn new(base: DenseModel, experts: Vec<DenseModel>, provenance: Vec<Provenance>) -> Result<Self> {
        if experts.len() != provenance.len() {
            return Err(Error::InvalidArgument(format!(
                "{} experts but {} provenance records",
                experts.len(),
                provenance.len()
            )));
        }
        for e in &experts {
            check_compatible(&base, e)?;
        }
        Ok(ExpertSet {
            base,
            experts,
            provenance,
        })
    }

    pub fn base(&self) -> &DenseModel {
        &self.base
    }

    pub fn experts(&self) -> &[DenseModel] {
        &self.experts
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn into_parts(self) -> (DenseModel, Vec<DenseModel>, Vec<Provenance>) {
        (self.base, self.experts, self.provenance)
    }

    pub(crate) fn push(&mut self, expert: DenseModel, provenance: Provenance) {
        self.experts.push(expert);
        self.provenance.push(provenance);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeltaScope {
    ExpertLayers,
    All,
}

fn diff_into(out: &mut Vec<f64>, a: &Tensor, b: &Tensor) {
    out.extend(a.data().iter().zip(b.data()).map(|(x, y)| x - y));
}

/// `expert − base` flattened in parameter-name order. With LoRA adapters
/// each adapted projection contributes the difference of its effective
/// `B·A·scaling` updates instead of the raw factors.
pub fn expert_delta(expert: &DenseModel, base: &DenseModel, scope: DeltaScope) -> Result<Vec<f64>> {
    check_compatible(base, expert)?;
    let mut out = Vec::new();
    if scope == DeltaScope::All {
        for (e, b) in expert.params().iter().zip(base.params().iter()) {
            if e.role == Role::Backbone {
                diff_into(&mut out, &e.value, &b.value);
            }
        }
    }
    if expert.config().has_lora() {
        for l in 0..expert.config().n_layers {
            for w in FFN_WEIGHTS {
                let de = lora_effective_delta(&expert.lora_adapter(l, w)?)?;
                let db = lora_effective_delta(&base.lora_adapter(l, w)?)?;
                diff_into(&mut out, &de, &db);
            }
        }
    } else {
        for (e, b) in expert.params().iter().zip(base.params().iter()) {
            if e.role == Role::Expert {
                diff_into(&mut out, &e.value, &b.value);
            }
        }
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Cosine similarity matrix of the given deltas; diagonal is 1. Zero deltas
/// get similarity 0 to everything else and are listed in the second element.
pub fn cosine_matrix(deltas: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = deltas.len();
    let zero: Vec<usize> = (0..n)
        .filter(|&i| deltas[i].iter().all(|&x| x == 0.0))
        .collect();
    let mut sim = vec![vec![0.0; n]; n];
    for j in 0..n {
        sim[j][j] = 1.0;
        for k in j + 1..n {
            let s = cosine(&deltas[j], &deltas[k]);
            sim[j][k] = s;
            sim[k][j] = s;
        }
    }
    (sim, zero)
}

/// Expert-layer delta similarity of every pair of experts in the set.
pub fn pairwise_similarity(set: &ExpertSet) -> Result<Vec<Vec<f64>>> {
    if set.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "similarity needs at least 2 experts, got {}",
            set.len()
        )));
    }
    let deltas = set
        .experts()
        .iter()
        .map(|e| expert_delta(e, set.base(), DeltaScope::ExpertLayers))
        .collect::<Result<Vec<_>>>()?;
    let (sim, zero) = cosine_matrix(&deltas);
    for i in zero {
        log::warn!("expert {i} equals the base on its expert layers; similarity set to 0");
    }
    Ok(sim)
}

/// Off-diagonal pair with the smallest similarity, ties to the smallest
/// `(j, k)`.
pub fn select_parents(sim: &[Vec<f64>]) -> Result<(usize, usize)> {
    let n = sim.len();
    if n < 2 || sim.iter().any(|r| r.len() != n) {
        return Err(Error::Shape(format!("need a square matrix of size >= 2, got {n} rows")));
    }
    let mut best = (0, 1);
    for j in 0..n {
        for k in j + 1..n {
            if sim[j][k] < sim[best.0][best.1] {
                best = (j, k);
            }
        }
    }
    Ok(best)
}

/// Drop-and-rescale: each coordinate is zeroed with probability `p` and the
/// survivors are scaled by `1 / (1 − p)`.
pub fn dare(delta: &[f64], p: f64, rng: &RngState) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("drop rate must lie in [0, 1), got {p}")));
    }
    if p == 0.0 {
        return Ok(delta.to_vec());
    }
    let scale = 1.0 / (1.0 - p);
    let mut gen = rng.generator();
    Ok(delta
        .iter()
        .map(|&x| if gen.bernoulli(p) { 0.0 } else { x * scale })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParentStrategy {
    /// Least-similar pair.
    Genetic,
    /// Uniformly random pair.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeConfig {
    pub drop_rate: f64,
    pub seed: u64,
    pub weight_low: f64,
    pub weight_high: f64,
    pub parents: ParentStrategy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            drop_rate: 0.5,
            seed: 0,
            weight_low: 0.0,
            weight_high: 1.0,
            parents: ParentStrategy::Genetic,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop_rate must lie in [0, 1), got {}", self.drop_rate)));
        }
        if !(0.0 <= self.weight_low && self.weight_low < self.weight_high && self.weight_high <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 <= weight_low < weight_high <= 1, got {} and {}",
                self.weight_low, self.weight_high
            )));
        }
        Ok(())
    }
}

fn expert_values(m: &DenseModel) -> Vec<f64> {
    m.params()
        .iter()
        .filter(|p| p.role == Role::Expert)
        .flat_map(|p| p.value.data().iter().copied())
        .collect()
}

/// `base + dare(expert − base)`, which is the expert itself when nothing is
/// dropped.
fn mutated(expert: &[f64], base: &[f64], p: f64, rng: &RngState) -> Result<Vec<f64>> {
    if p == 0.0 {
        return Ok(expert.to_vec());
    }
    let delta: Vec<f64> = expert.iter().zip(base).map(|(e, b)| e - b).collect();
    let kept = dare(&delta, p, rng)?;
    Ok(base.iter().zip(&kept).map(|(b, d)| b + d).collect())
}

/// Merges experts `j` and `k` with weights `(alpha, 1 − alpha)` after
/// applying DARE to each parent's expert-layer delta independently. With
/// full FFN experts the backbones are mixed with the same weights; LoRA
/// experts keep the frozen base backbone.
pub fn merge_pair(
    set: &ExpertSet,
    j: usize,
    k: usize,
    alpha: f64,
    drop_rate: f64,
    rng: &RngState,
) -> Result<DenseModel> {
    let n = set.len();
    if j >= n || k >= n {
        return Err(Error::OutOfRange { index: j.max(k), len: n });
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("merge weight {alpha} outside [0, 1]")));
    }
    let beta = 1.0 - alpha;
    let (ej, ek) = (&set.experts[j], &set.experts[k]);
    let base = expert_values(set.base());
    let mj = mutated(&expert_values(ej), &base, drop_rate, &rng.split("dare-j"))?;
    let mk = mutated(&expert_values(ek), &base, drop_rate, &rng.split("dare-k"))?;
    let lora = set.base.config().has_lora();

    let mut out = ej.clone();
    let mut offset = 0;
    let src_j = ej.params().iter();
    let src_k = ek.params().iter();
    let src_base = set.base().params().iter();
    for (((p, pj), pk), pb) in out.params_mut().iter_mut().zip(src_j).zip(src_k).zip(src_base) {
        match p.role {
            Role::Expert => {
                let len = p.value.numel();
                for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                    *x = alpha * mj[offset + i] + beta * mk[offset + i];
                }
                offset += len;
            }
            Role::Backbone if lora => p.value = pb.value.clone(),
            Role::Backbone => {
                let data = pj.value.data().iter().zip(pk.value.data());
                for (x, (a, b)) in p.value.data_mut().iter_mut().zip(data) {
                    *x = alpha * a + beta * b;
                }
            }
        }
    }
    Ok(out)
}

/// Grows the set to `n` experts. Each iteration recomputes similarities over
/// the current set (merged experts included), picks parents, draws the merge
/// weight from the open interval `(weight_low, weight_high)` and appends the
/// merged expert.
pub fn expand_experts(set: ExpertSet, n: usize, cfg: &MergeConfig) -> Result<ExpertSet> {
    cfg.validate()?;
    let m = set.len();
    if n < m {
        return Err(Error::InvalidArgument(format!("cannot shrink {m} experts to {n}")));
    }
    if n > m && m < 2 {
        return Err(Error::InvalidArgument("expansion needs at least 2 experts".into()));
    }
    let mut set = set;
    let root = RngState::new(cfg.seed);
    for it in 0..n - m {
        let rng = root.child(it as u64);
        let (j, k) = match cfg.parents {
            ParentStrategy::Genetic => select_parents(&pairwise_similarity(&set)?)?,
            ParentStrategy::Random => {
                let mut g = rng.split("parents").generator();
                let a = g.index(set.len());
                let mut b = g.index(set.len() - 1);
                if b >= a {
                    b += 1;
                }
                (a.min(b), a.max(b))
            }
        };
        let u = rng.split("alpha").generator().uniform_open();
        let alpha = cfg.weight_low + (cfg.weight_high - cfg.weight_low) * u;
        let merged = merge_pair(&set, j, k, alpha, cfg.drop_rate, &rng)?;
        log::debug!("expansion step {it}: parents ({j}, {k}), alpha {alpha:.4}");
        set.push(
            merged,
            Provenance::Merged {
                parent_j: j,
                parent_k: k,
                alpha,
                drop_rate: cfg.drop_rate,
                seed: rng.seed,
            },
        );
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{names, ModelConfig};
    use proptest::prelude::*;

    fn cfg(lora: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            d_h: 4,
            n_layers: 1,
            n_heads: 1,
            d_ff: 6,
            max_seq: 6,
            lora_rank: lora,
            lora_scaling: 2.0,
        }
    }

    fn perturbed(base: &DenseModel, seed: u64, scale: f64) -> DenseModel {
        let mut m = base.clone();
        let mut g = RngState::new(seed).generator();
        for p in m.params_mut().iter_mut() {
            for x in p.value.data_mut() {
                *x += scale * g.normal(1.0);
            }
        }
        m
    }

    fn set_of(base: &DenseModel, seeds: &[u64]) -> ExpertSet {
        let experts: Vec<DenseModel> = seeds.iter().map(|&s| perturbed(base, s, 0.1)).collect();
        let prov = seeds
            .iter()
            .map(|&s| Provenance::Checkpoint { step: s as usize, tag: format!("s{s}") })
            .collect();
        ExpertSet::new(base.clone(), experts, prov).unwrap()
    }

    #[test]
    fn delta_examples() {
        let base = DenseModel::new(cfg(0), &RngState::new(1)).unwrap();
        assert!(expert_delta(&base, &base, DeltaScope::All).unwrap().iter().all(|&x| x == 0.0));

        let mut e = base.clone();
        let w = e.params_mut().get_mut("layer.0.ffn.w1").unwrap();
        w.value.data_mut()[0] += 1.0;
        let d = expert_delta(&e, &base, DeltaScope::ExpertLayers).unwrap();
        assert_eq!(d.len(), 2 * 4 * 6);
        assert_eq!(d.iter().filter(|&&x| x != 0.0).count(), 1);

        let lb = DenseModel::new(cfg(2), &RngState::new(1)).unwrap();
        let mut le = lb.clone();
        le.params_mut()
            .get_mut(&names::lora_a(&names::ffn(0), "w1"))
            .unwrap()
            .value
            .data_mut()[0] += 3.0;
        assert!(expert_delta(&le, &lb, DeltaScope::ExpertLayers)
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn cosine_examples() {
        let (s, _) = cosine_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(s[0][1], 0.0);
        let (s, _) = cosine_matrix(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        assert!((s[0][1] - 1.0).abs() < 1e-15);
        let (s, zero) = cosine_matrix(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let want = [[1.0, r, 0.0], [r, 1.0, r], [0.0, r, 1.0]];
        for j in 0..3 {
            for k in 0..3 {
                assert!((s[j][k] - want[j][k]).abs() < 1e-5);
            }
        }
        assert!(zero.is_empty());
        assert_eq!(select_parents(&s).unwrap(), (0, 2));
        let (s, zero) = cosine_matrix(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!((s[0][1], zero), (0.0, vec![0]));
    }

    #[test]
    fn parent_ties() {
        assert_eq!(select_parents(&[vec![1.0, 0.3], vec![0.3, 1.0]]).unwrap(), (0, 1));
        let flat = vec![vec![0.5; 4]; 4];
        assert_eq!(select_parents(&flat).unwrap(), (0, 1));
        assert!(select_parents(&[vec![1.0]]).is_err());
    }

    #[test]
    fn dare_basics() {
        let rng = RngState::new(9);
        let v = vec![0.5, -1.0, 2.0];
        assert_eq!(dare(&v, 0.0, &rng).unwrap(), v);
        assert!(dare(&[0.0; 10], 0.7, &rng).unwrap().iter().all(|&x| x == 0.0));
        assert!(dare(&v, 1.0, &rng).is_err());
        assert_eq!(dare(&v, 0.4, &rng).unwrap(), dare(&v, 0.4, &rng).unwrap());
        for x in dare(&v, 0.5, &rng).unwrap().iter().zip(&v) {
            assert!(*x.0 == 0.0 || *x.0 == 2.0 * x.1);
        }
    }

    #[test]
    fn expansion_shapes_and_replay() {
        let base = DenseModel::new(cfg(0), &RngState::new(2)).unwrap();
        let set = set_of(&base, &[1, 2, 3, 4]);
        let mc = MergeConfig { seed: 11, ..Default::default() };
        assert_eq!(expand_experts(set.clone(), 4, &mc).unwrap().len(), 4);
        assert!(expand_experts(set.clone(), 3, &mc).is_err());
        let a = expand_experts(set.clone(), 8, &mc).unwrap();
        let b = expand_experts(set.clone(), 8, &mc).unwrap();
        assert_eq!(a.len(), 8);
        for (x, y) in a.experts().iter().zip(b.experts()) {
            assert_eq!(x.params(), y.params());
        }
        for (x, y) in set.experts().iter().zip(a.experts()) {
            assert_eq!(x.params(), y.params());
        }
        assert_eq!(a.provenance()[..4], set.provenance()[..]);
    }

    #[test]
    fn p0_merge_is_convex_combination() {
        let base = DenseModel::new(cfg(0), &RngState::new(2)).unwrap();
        let set = set_of(&base, &[5, 6]);
        let mc = MergeConfig { drop_rate: 0.0, seed: 3, ..Default::default() };
        let out = expand_experts(set.clone(), 3, &mc).unwrap();
        let Provenance::Merged { alpha, .. } = out.provenance()[2] else { panic!() };
        let d0 = expert_delta(&set.experts()[0], &base, DeltaScope::ExpertLayers).unwrap();
        let d1 = expert_delta(&set.experts()[1], &base, DeltaScope::ExpertLayers).unwrap();
        let dn = expert_delta(&out.experts()[2], &base, DeltaScope::ExpertLayers).unwrap();
        for i in 0..dn.len() {
            assert!((dn[i] - (alpha * d0[i] + (1.0 - alpha) * d1[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_weight_merge_copies_parent() {
        let base = DenseModel::new(cfg(0), &RngState::new(2)).unwrap();
        let set = set_of(&base, &[5, 6, 7]);
        let m = merge_pair(&set, 2, 0, 1.0, 0.0, &RngState::new(1)).unwrap();
        assert_eq!(m.params(), set.experts()[2].params());
    }

    #[test]
    fn lora_merge_keeps_base_backbone() {
        let base = DenseModel::new(cfg(2), &RngState::new(2)).unwrap();
        let set = set_of(&base, &[5, 6]);
        let m = merge_pair(&set, 0, 1, 0.3, 0.5, &RngState::new(1)).unwrap();
        let frozen = |p: &crate::numerics::Parameter| p.role == Role::Backbone;
        assert_eq!(m.params().checksum(frozen), base.params().checksum(frozen));
    }

    proptest! {
        #[test]
        fn dare_preserves_zero_set(
            v in prop::collection::vec(prop_oneof![Just(0.0), -5.0f64..5.0], 1..64),
            p in 0.0f64..0.95,
            seed in any::<u64>(),
        ) {
            let out = dare(&v, p, &RngState::new(seed)).unwrap();
            for (a, b) in v.iter().zip(&out) {
                if *a == 0.0 {
                    prop_assert_eq!(*b, 0.0);
                }
            }
        }
    }
}
