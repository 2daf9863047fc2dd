use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::{load_dense, load_moe, load_tensors, save_dense, save_moe, save_tensors, CheckpointInfo, ModelKind};
use super::config::{derive_seed, Baseline, CheckpointStrategy, PipelineConfig, SelectionStrategy};
use super::routing::{analyze_routing, RoutingTable};
use crate::corpus::{corpus_perplexity, domain_ppl, gen_corpus, read_samples, write_samples, TaggedSample};
use crate::error::{Error, Result};
use crate::expansion::{expand_experts, ExpertSet, Provenance};
use crate::model::{names, DenseModel, MoeModel};
use crate::numerics::{RngState, Tensor};
use crate::selection::{assign_buckets, assign_random, build_ppl_table, default_capacity, sample_seed, Buckets};
use crate::training::{posttrain_moe, train_dense_with_checkpoints, TrainConfig};
use crate::upcycle::{assemble_moe, assemble_router, init_routing_vectors, preoptimize_expert, vanilla_upcycle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Prepare,
    Expand,
    Select,
    InitRouter,
    Upcycle,
    Posttrain,
    Baseline,
    Eval,
    AnalyzeRouting,
}

impl Stage {
    /// Execution order of a full run.
    pub const ALL: [Stage; 10] = [
        Stage::GenData,
        Stage::Prepare,
        Stage::Expand,
        Stage::Select,
        Stage::InitRouter,
        Stage::Upcycle,
        Stage::Posttrain,
        Stage::Baseline,
        Stage::Eval,
        Stage::AnalyzeRouting,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Prepare => "prepare",
            Stage::Expand => "expand",
            Stage::Select => "select",
            Stage::InitRouter => "init-router",
            Stage::Upcycle => "upcycle",
            Stage::Posttrain => "posttrain",
            Stage::Baseline => "baseline",
            Stage::Eval => "eval",
            Stage::AnalyzeRouting => "analyze-routing",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageStatus {
    Completed,
    Skipped,
}

/// What a stage consumed and produced, keyed by path relative to the output
/// directory, with SHA-256 digests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_time_s: f64,
    pub seed: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(out_dir: &Path) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutDirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub mixed_ppl: f64,
    pub domain_ppl: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub models: BTreeMap<String, ModelScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SelectSummary {
    strategy: SelectionStrategy,
    seed_size: usize,
    capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct PrepareSummary {
    harvested_steps: Vec<usize>,
    kept_steps: Vec<usize>,
    strategy: CheckpointStrategy,
}

/// Relative artifact paths.
pub mod paths {
    pub const TRAIN: &str = "corpus/train.jsonl";
    pub const EVAL: &str = "corpus/eval.jsonl";
    pub const BASE: &str = "prepare/base.upck";
    pub const DENSE_FINAL: &str = "prepare/dense_final.upck";
    pub const PRETRAIN_LOG: &str = "prepare/pretrain_loss.jsonl";
    pub const PREPARE_LOG: &str = "prepare/loss.jsonl";
    pub const PREPARE_SUMMARY: &str = "prepare/summary.json";
    pub const SEED: &str = "select/seed.jsonl";
    pub const PPL_TABLE: &str = "select/ppl_table.json";
    pub const BUCKETS: &str = "select/buckets.json";
    pub const SELECT_SUMMARY: &str = "select/summary.json";
    pub const UPIT_INIT: &str = "upcycle/upit_init.upck";
    pub const UPIT_FINAL: &str = "posttrain/upit_final.upck";
    pub const POSTTRAIN_LOG: &str = "posttrain/loss.jsonl";
    pub const VANILLA_INIT: &str = "baseline/vanilla_init.upck";
    pub const VANILLA_FINAL: &str = "baseline/vanilla_final.upck";
    pub const VANILLA_LOG: &str = "baseline/vanilla_loss.jsonl";
    pub const DENSE_CONTINUED: &str = "baseline/dense_continued.upck";
    pub const DENSE_LOG: &str = "baseline/dense_loss.jsonl";
    pub const REPORT: &str = "eval/report.json";
    pub const ROUTING_SUMMARY: &str = "analysis/summary.json";

    pub fn prepared(i: usize) -> String {
        format!("prepare/expert-{i}.upck")
    }

    pub fn expanded(i: usize) -> String {
        format!("expand/expert-{i}.upck")
    }

    pub fn preoptimized(i: usize) -> String {
        format!("init-router/expert-{i}.upck")
    }

    pub fn vectors(i: usize) -> String {
        format!("init-router/vectors-{i}.upck")
    }

    pub fn preopt_log(i: usize) -> String {
        format!("init-router/loss-{i}.jsonl")
    }

    pub fn record(stage: &str) -> String {
        format!("records/{stage}.json")
    }
}

/// Picks `m` entries spread evenly over `candidates`, ending at its last one.
pub fn spread(candidates: &[usize], m: usize) -> Result<Vec<usize>> {
    let l = candidates.len();
    if m == 0 || m > l {
        return Err(Error::Config(format!("cannot keep {m} checkpoints out of {l}")));
    }
    Ok((0..m).map(|j| candidates[(j + 1) * l / m - 1]).collect())
}

/// Indices into the harvested list that become experts.
pub fn pick_checkpoints(harvested: usize, m: usize, strategy: CheckpointStrategy) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..harvested).collect();
    let half = harvested / 2;
    let candidates = match strategy {
        CheckpointStrategy::Uniform => &all[..],
        CheckpointStrategy::FrontHalf => &all[..harvested - half],
        CheckpointStrategy::BackHalf => &all[half..],
    };
    spread(candidates, m)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A configured run bound to one output directory.
pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    _lock: OutDirLock,
}

struct Ctx {
    inputs: Vec<String>,
    outputs: Vec<String>,
    status: StageStatus,
}

impl Ctx {
    fn new() -> Self {
        Ctx {
            inputs: Vec::new(),
            outputs: Vec::new(),
            status: StageStatus::Completed,
        }
    }
}

impl Pipeline {
    /// Validates `cfg` and locks `out`.
    pub fn open(cfg: PipelineConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        let lock = OutDirLock::acquire(out)?;
        let p = Pipeline {
            cfg,
            out: out.to_path_buf(),
            _lock: lock,
        };
        write_json(&p.out.join("config.json"), &p.cfg)?;
        Ok(p)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn run_all(&self) -> Result<Vec<StageRecord>> {
        Stage::ALL.iter().map(|&s| self.run_stage(s)).collect()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageRecord> {
        let seed = derive_seed(self.cfg.seed, stage.name());
        log::info!("stage {stage} (seed {seed})");
        let start = Instant::now();
        let mut ctx = Ctx::new();
        let mut input_hashes = BTreeMap::new();
        // inputs are hashed before the stage body runs so a stage that
        // overwrites its own inputs still records what it read
        self.declare_inputs(stage, &mut ctx)?;
        for rel in &ctx.inputs {
            let p = self.path(rel);
            if !p.is_file() {
                return Err(Error::MissingArtifact(p));
            }
            input_hashes.insert(rel.clone(), sha256_file(&p)?);
        }
        match stage {
            Stage::GenData => self.gen_data(&mut ctx)?,
            Stage::Prepare => self.prepare(&mut ctx)?,
            Stage::Expand => self.expand(&mut ctx)?,
            Stage::Select => self.select(&mut ctx)?,
            Stage::InitRouter => self.init_router(&mut ctx)?,
            Stage::Upcycle => self.upcycle(&mut ctx)?,
            Stage::Posttrain => self.posttrain(&mut ctx)?,
            Stage::Baseline => self.baseline(&mut ctx)?,
            Stage::Eval => self.eval(&mut ctx)?,
            Stage::AnalyzeRouting => self.analyze(&mut ctx)?,
        }
        let mut outputs = BTreeMap::new();
        for rel in &ctx.outputs {
            outputs.insert(rel.clone(), sha256_file(&self.path(rel))?);
        }
        let record = StageRecord {
            stage,
            status: ctx.status,
            inputs: input_hashes,
            outputs,
            wall_time_s: start.elapsed().as_secs_f64(),
            seed,
        };
        self.mkdir("records")?;
        write_json(&self.path(&paths::record(stage.name())), &record)?;
        log::info!("stage {stage} {:?} in {:.1}s", record.status, record.wall_time_s);
        Ok(record)
    }

    fn selection_off(&self) -> bool {
        self.cfg.selection.strategy == SelectionStrategy::Off
    }

    fn declare_inputs(&self, stage: Stage, ctx: &mut Ctx) -> Result<()> {
        let n = self.cfg.expansion.n;
        let m = self.cfg.prepare.m;
        let i = &mut ctx.inputs;
        match stage {
            Stage::GenData => {}
            Stage::Prepare => i.push(paths::TRAIN.into()),
            Stage::Expand => {
                i.push(paths::BASE.into());
                i.extend((0..m).map(paths::prepared));
            }
            Stage::Select => {
                i.push(paths::TRAIN.into());
                if !self.selection_off() {
                    i.extend((0..n).map(paths::expanded));
                }
            }
            Stage::InitRouter => {
                i.push(paths::SELECT_SUMMARY.into());
                if !self.selection_off() {
                    i.extend([paths::SEED.into(), paths::BUCKETS.into()]);
                    i.extend((0..n).map(paths::expanded));
                }
            }
            Stage::Upcycle => {
                i.push(paths::BASE.into());
                i.push(paths::SELECT_SUMMARY.into());
                if self.selection_off() {
                    i.extend((0..n).map(paths::expanded));
                } else {
                    i.extend((0..n).map(paths::preoptimized));
                    i.extend((0..n).map(paths::vectors));
                }
            }
            Stage::Posttrain => i.extend([paths::TRAIN.into(), paths::UPIT_INIT.into()]),
            Stage::Baseline => {
                if self.cfg.baseline == Baseline::Vanilla {
                    i.extend([paths::TRAIN.into(), paths::DENSE_FINAL.into()]);
                }
            }
            Stage::Eval => {
                i.push(paths::EVAL.into());
                i.extend(self.eval_models().into_iter().map(|(_, p)| p.to_string()));
            }
            Stage::AnalyzeRouting => {
                i.push(paths::EVAL.into());
                i.extend(self.routed_models().into_iter().map(|(_, p)| p.to_string()));
            }
        }
        Ok(())
    }

    fn eval_models(&self) -> Vec<(&'static str, &'static str)> {
        let mut v = vec![
            ("dense_final", paths::DENSE_FINAL),
            ("upit_init", paths::UPIT_INIT),
            ("upit_final", paths::UPIT_FINAL),
        ];
        if self.cfg.baseline == Baseline::Vanilla {
            v.extend([
                ("dense_continued", paths::DENSE_CONTINUED),
                ("vanilla_init", paths::VANILLA_INIT),
                ("vanilla_final", paths::VANILLA_FINAL),
            ]);
        }
        v
    }

    fn routed_models(&self) -> Vec<(&'static str, &'static str)> {
        self.eval_models()
            .into_iter()
            .filter(|(name, _)| !name.starts_with("dense"))
            .collect()
    }

    fn mkdir(&self, rel: &str) -> Result<()> {
        let p = self.path(rel);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))
    }

    fn train_split(&self) -> Result<Vec<TaggedSample>> {
        read_samples(&self.path(paths::TRAIN))
    }

    fn gen_data(&self, ctx: &mut Ctx) -> Result<()> {
        let corpus = gen_corpus(&self.cfg.corpus)?;
        self.mkdir("corpus")?;
        write_samples(&self.path(paths::TRAIN), &corpus.train)?;
        write_samples(&self.path(paths::EVAL), &corpus.eval)?;
        ctx.outputs.extend([paths::TRAIN.into(), paths::EVAL.into()]);
        Ok(())
    }

    fn prepare(&self, ctx: &mut Ctx) -> Result<()> {
        let train = self.train_split()?;
        let init = DenseModel::new(self.cfg.model.without_lora(), &self.cfg.model_seed())?;
        self.mkdir("prepare")?;
        let pretrain = &self.cfg.prepare.pretrain;
        let base = if pretrain.epochs > 0 {
            let cfg = TrainConfig {
                checkpoint_interval: usize::MAX,
                ..pretrain.clone()
            };
            let run = train_dense_with_checkpoints(init, &train, &cfg)?;
            write_jsonl(&self.path(paths::PRETRAIN_LOG), &run.log)?;
            ctx.outputs.push(paths::PRETRAIN_LOG.into());
            run.checkpoints.into_iter().last().expect("training yields a final checkpoint").0
        } else {
            init
        };
        let base = if self.cfg.model.has_lora() {
            base.with_adapters(self.cfg.model.clone(), &self.cfg.model_seed().split("adapters"))?
        } else {
            base
        };
        let info = CheckpointInfo::dense(&self.cfg.model);
        save_dense(&self.path(paths::BASE), &base, info.clone())?;
        // downstream stages see the stored f32 weights, so training starts
        // from them as well
        let (base, _) = load_dense(&self.path(paths::BASE))?;
        let run = train_dense_with_checkpoints(base, &train, &self.cfg.prepare.train)?;
        let harvested: Vec<usize> = run.checkpoints.iter().map(|(_, m)| m.step).collect();
        let kept = pick_checkpoints(run.checkpoints.len(), self.cfg.prepare.m, self.cfg.prepare.strategy)?;
        for (j, &idx) in kept.iter().enumerate() {
            let (model, meta) = &run.checkpoints[idx];
            let mut ci = info.clone();
            ci.train = Some(meta.clone());
            ci.provenance = Some(Provenance::Checkpoint {
                step: meta.step,
                tag: meta.tag.clone(),
            });
            save_dense(&self.path(&paths::prepared(j)), model, ci)?;
            ctx.outputs.push(paths::prepared(j));
        }
        let (last, meta) = run.checkpoints.last().expect("training yields a final checkpoint");
        let mut ci = info;
        ci.train = Some(meta.clone());
        save_dense(&self.path(paths::DENSE_FINAL), last, ci)?;
        write_jsonl(&self.path(paths::PREPARE_LOG), &run.log)?;
        write_json(
            &self.path(paths::PREPARE_SUMMARY),
            &PrepareSummary {
                kept_steps: kept.iter().map(|&i| harvested[i]).collect(),
                harvested_steps: harvested,
                strategy: self.cfg.prepare.strategy,
            },
        )?;
        ctx.outputs.extend(
            [paths::BASE, paths::DENSE_FINAL, paths::PREPARE_LOG, paths::PREPARE_SUMMARY].map(String::from),
        );
        Ok(())
    }

    fn load_experts(&self, rel: impl Fn(usize) -> String, count: usize) -> Result<(Vec<DenseModel>, Vec<CheckpointInfo>)> {
        let mut models = Vec::with_capacity(count);
        let mut infos = Vec::with_capacity(count);
        for i in 0..count {
            let (m, info) = load_dense(&self.path(&rel(i)))?;
            models.push(m);
            infos.push(info);
        }
        Ok((models, infos))
    }

    fn expand(&self, ctx: &mut Ctx) -> Result<()> {
        let (base, _) = load_dense(&self.path(paths::BASE))?;
        let (experts, infos) = self.load_experts(paths::prepared, self.cfg.prepare.m)?;
        let provenance = infos
            .iter()
            .map(|i| {
                i.provenance
                    .clone()
                    .ok_or_else(|| Error::Config("prepared expert without provenance".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let set = ExpertSet::new(base, experts, provenance)?;
        let grown = expand_experts(set, self.cfg.expansion.n, &self.cfg.expansion.merge)?;
        self.mkdir("expand")?;
        let (_, experts, provenance) = grown.into_parts();
        for (i, (e, p)) in experts.iter().zip(provenance).enumerate() {
            let mut info = CheckpointInfo::dense(e.config());
            info.provenance = Some(p);
            save_dense(&self.path(&paths::expanded(i)), e, info)?;
            ctx.outputs.push(paths::expanded(i));
        }
        Ok(())
    }

    fn select(&self, ctx: &mut Ctx) -> Result<()> {
        let sel = &self.cfg.selection;
        let n = self.cfg.expansion.n;
        self.mkdir("select")?;
        if sel.strategy == SelectionStrategy::Off {
            write_json(
                &self.path(paths::SELECT_SUMMARY),
                &SelectSummary {
                    strategy: sel.strategy,
                    seed_size: 0,
                    capacity: 0,
                },
            )?;
            ctx.outputs.push(paths::SELECT_SUMMARY.into());
            return Ok(());
        }
        let train = self.train_split()?;
        let rng = self.cfg.stage_rng("select");
        let seed = sample_seed(&train, sel.fraction, &rng.split("seed"))?;
        let capacity = sel.capacity.unwrap_or_else(|| default_capacity(seed.samples.len(), n));
        let buckets = match sel.strategy {
            SelectionStrategy::Skilled => {
                let (experts, _) = self.load_experts(paths::expanded, n)?;
                let table = build_ppl_table(&experts, &seed)?;
                write_json(&self.path(paths::PPL_TABLE), &table)?;
                ctx.outputs.push(paths::PPL_TABLE.into());
                assign_buckets(&table, capacity)?
            }
            SelectionStrategy::Random => {
                let ids: Vec<u64> = seed.samples.iter().map(|s| s.sample_id).collect();
                assign_random(&ids, n, capacity, &rng.split("buckets"))?
            }
            SelectionStrategy::Off => unreachable!("handled above"),
        };
        if buckets.dropped_count > 0 {
            log::warn!("{} seed samples dropped: every bucket was full", buckets.dropped_count);
        }
        write_samples(&self.path(paths::SEED), &seed.samples)?;
        write_json(&self.path(paths::BUCKETS), &buckets)?;
        write_json(
            &self.path(paths::SELECT_SUMMARY),
            &SelectSummary {
                strategy: sel.strategy,
                seed_size: seed.samples.len(),
                capacity,
            },
        )?;
        ctx.outputs.extend([paths::SEED, paths::BUCKETS, paths::SELECT_SUMMARY].map(String::from));
        Ok(())
    }

    fn fresh_vectors(&self, i: usize) -> Vec<Tensor> {
        init_routing_vectors(&self.cfg.model, &self.cfg.stage_rng("routing-init").child(i as u64))
    }

    fn init_router(&self, ctx: &mut Ctx) -> Result<()> {
        let summary: SelectSummary = read_json(&self.path(paths::SELECT_SUMMARY))?;
        if summary.strategy == SelectionStrategy::Off {
            log::info!("init-router skipped: selection strategy is off");
            ctx.status = StageStatus::Skipped;
            return Ok(());
        }
        let n = self.cfg.expansion.n;
        let seed = read_samples(&self.path(paths::SEED))?;
        let buckets: Buckets = read_json(&self.path(paths::BUCKETS))?;
        let (experts, infos) = self.load_experts(paths::expanded, n)?;
        self.mkdir("init-router")?;
        let preopt = &self.cfg.upcycle.preopt;
        for (i, (expert, info)) in experts.into_iter().zip(infos).enumerate() {
            let wanted: HashSet<u64> = buckets
                .buckets
                .get(i)
                .map(|b| b.sample_ids.iter().copied().collect())
                .unwrap_or_default();
            let bucket: Vec<&TaggedSample> = seed.iter().filter(|s| wanted.contains(&s.sample_id)).collect();
            let tokens: Vec<&[usize]> = bucket.iter().map(|s| s.tokens.as_slice()).collect();
            let cfg = TrainConfig {
                seed: RngState::new(preopt.seed).child(i as u64).seed,
                ..preopt.clone()
            };
            let out = preoptimize_expert(expert, self.fresh_vectors(i), &tokens, &cfg)?;
            save_dense(&self.path(&paths::preoptimized(i)), &out.expert, info)?;
            let names: Vec<String> = (0..out.vectors.len()).map(names::routing_vector).collect();
            let tensors: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(&out.vectors).collect();
            let vinfo = CheckpointInfo {
                kind: ModelKind::RoutingVectors,
                ..CheckpointInfo::dense(&self.cfg.model)
            };
            save_tensors(&self.path(&paths::vectors(i)), &vinfo, &tensors)?;
            write_jsonl(&self.path(&paths::preopt_log(i)), &out.log)?;
            ctx.outputs.extend([paths::preoptimized(i), paths::vectors(i), paths::preopt_log(i)]);
        }
        Ok(())
    }

    fn load_vectors(&self, i: usize) -> Result<Vec<Tensor>> {
        let (info, tensors) = load_tensors(&self.path(&paths::vectors(i)))?;
        if info.kind != ModelKind::RoutingVectors {
            return Err(Error::Config(format!("{} is not a routing-vector file", paths::vectors(i))));
        }
        Ok(tensors.into_iter().map(|(_, t)| t).collect())
    }

    fn upcycle(&self, ctx: &mut Ctx) -> Result<()> {
        let n = self.cfg.expansion.n;
        let (base, _) = load_dense(&self.path(paths::BASE))?;
        let (experts, infos, vectors) = if self.selection_off() {
            let (e, i) = self.load_experts(paths::expanded, n)?;
            (e, i, (0..n).map(|i| self.fresh_vectors(i)).collect::<Vec<_>>())
        } else {
            let (e, i) = self.load_experts(paths::preoptimized, n)?;
            let v = (0..n).map(|i| self.load_vectors(i)).collect::<Result<Vec<_>>>()?;
            (e, i, v)
        };
        let provenance = infos
            .into_iter()
            .map(|i| {
                i.provenance
                    .ok_or_else(|| Error::Config("expert checkpoint without provenance".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        let set = ExpertSet::new(base, experts, provenance)?;
        let routers = assemble_router(&vectors)?;
        let moe = assemble_moe(&set, &routers, &self.cfg.upcycle)?;
        self.mkdir("upcycle")?;
        save_moe(&self.path(paths::UPIT_INIT), &moe, CheckpointInfo::moe(moe.config(), *moe.layout()))?;
        ctx.outputs.push(paths::UPIT_INIT.into());
        Ok(())
    }

    fn posttrain_to(&self, moe: MoeModel, train: &[TaggedSample], model: &str, log: &str) -> Result<()> {
        let (moe, records) = posttrain_moe(moe, train, &self.cfg.posttrain)?;
        save_moe(&self.path(model), &moe, CheckpointInfo::moe(moe.config(), *moe.layout()))?;
        write_jsonl(&self.path(log), &records)
    }

    fn posttrain(&self, ctx: &mut Ctx) -> Result<()> {
        let train = self.train_split()?;
        let (moe, _) = load_moe(&self.path(paths::UPIT_INIT))?;
        self.mkdir("posttrain")?;
        self.posttrain_to(moe, &train, paths::UPIT_FINAL, paths::POSTTRAIN_LOG)?;
        ctx.outputs.extend([paths::UPIT_FINAL, paths::POSTTRAIN_LOG].map(String::from));
        Ok(())
    }

    fn baseline(&self, ctx: &mut Ctx) -> Result<()> {
        if self.cfg.baseline == Baseline::None {
            ctx.status = StageStatus::Skipped;
            return Ok(());
        }
        let train = self.train_split()?;
        let (dense, _) = load_dense(&self.path(paths::DENSE_FINAL))?;
        let up = &self.cfg.upcycle;
        let vanilla = vanilla_upcycle(&dense, up.n_experts, up.k, up.gate_mode, &self.cfg.stage_rng("vanilla"))?;
        self.mkdir("baseline")?;
        save_moe(
            &self.path(paths::VANILLA_INIT),
            &vanilla,
            CheckpointInfo::moe(vanilla.config(), *vanilla.layout()),
        )?;
        let (vanilla, _) = load_moe(&self.path(paths::VANILLA_INIT))?;
        self.posttrain_to(vanilla, &train, paths::VANILLA_FINAL, paths::VANILLA_LOG)?;

        let cfg = TrainConfig {
            checkpoint_interval: usize::MAX,
            ..self.cfg.posttrain.clone()
        };
        let run = train_dense_with_checkpoints(dense, &train, &cfg)?;
        let (last, meta) = run.checkpoints.last().expect("training yields a final checkpoint");
        let mut info = CheckpointInfo::dense(last.config());
        info.train = Some(meta.clone());
        save_dense(&self.path(paths::DENSE_CONTINUED), last, info)?;
        write_jsonl(&self.path(paths::DENSE_LOG), &run.log)?;
        ctx.outputs.extend(
            [
                paths::VANILLA_INIT,
                paths::VANILLA_FINAL,
                paths::VANILLA_LOG,
                paths::DENSE_CONTINUED,
                paths::DENSE_LOG,
            ]
            .map(String::from),
        );
        Ok(())
    }

    fn eval(&self, ctx: &mut Ctx) -> Result<()> {
        let eval = read_samples(&self.path(paths::EVAL))?;
        let n_domains = self.cfg.corpus.n_domains;
        let mut models = BTreeMap::new();
        for (name, rel) in self.eval_models() {
            let (info, _) = load_tensors(&self.path(rel))?;
            let score = match info.kind {
                ModelKind::Dense => {
                    let (m, _) = load_dense(&self.path(rel))?;
                    ModelScore {
                        mixed_ppl: corpus_perplexity(&m, &eval)?,
                        domain_ppl: domain_ppl(&m, &eval, n_domains)?,
                    }
                }
                _ => {
                    let (m, _) = load_moe(&self.path(rel))?;
                    ModelScore {
                        mixed_ppl: corpus_perplexity(&m, &eval)?,
                        domain_ppl: domain_ppl(&m, &eval, n_domains)?,
                    }
                }
            };
            log::info!("{name}: mixed ppl {:.4}", score.mixed_ppl);
            models.insert(name.to_string(), score);
        }
        self.mkdir("eval")?;
        write_json(&self.path(paths::REPORT), &EvalReport { models })?;
        ctx.outputs.push(paths::REPORT.into());
        Ok(())
    }

    fn analyze(&self, ctx: &mut Ctx) -> Result<()> {
        let eval = read_samples(&self.path(paths::EVAL))?;
        let layer = self.cfg.analysis_layer();
        self.mkdir("analysis")?;
        let mut summary: BTreeMap<String, RoutingTable> = BTreeMap::new();
        for (name, rel) in self.routed_models() {
            let (moe, _) = load_moe(&self.path(rel))?;
            let table = analyze_routing(&moe, &eval, layer)?;
            let csv = format!("analysis/{name}.csv");
            let json = format!("analysis/{name}.json");
            table.write(&self.path(&csv), &self.path(&json))?;
            ctx.outputs.extend([csv, json]);
            summary.insert(name.to_string(), table);
        }
        write_json(&self.path(paths::ROUTING_SUMMARY), &summary)?;
        ctx.outputs.push(paths::ROUTING_SUMMARY.into());
        Ok(())
    }
}

/// Reads the evaluation report of a finished run.
pub fn read_report(out_dir: &Path) -> Result<EvalReport> {
    read_json(&out_dir.join(paths::REPORT))
}

/// Reads the routing summary of a finished run.
pub fn read_routing(out_dir: &Path) -> Result<BTreeMap<String, RoutingTable>> {
    read_json(&out_dir.join(paths::ROUTING_SUMMARY))
}
