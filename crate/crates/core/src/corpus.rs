//! Synthetic multi-domain token corpus with per-domain evaluation.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{perplexity, LanguageModel};
use crate::numerics::{Generator, RngState};

pub const BOS: usize = 0;
pub const SEP: usize = 1;
pub const EOS: usize = 2;
/// Ids below this are special tokens; domain content starts here.
pub const FIRST_CONTENT: usize = 4;

/// The formal micro-task a domain is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// The sequence is one random half repeated twice.
    Copy,
    /// A random run, then SEP and the run reversed.
    Reverse,
    /// Triples `(a, b, (a + b) mod width)`.
    ModAdd,
    /// A random run, then SEP and the run sorted.
    Sort,
}

impl Task {
    pub fn for_domain(d: usize) -> Task {
        [Task::Copy, Task::Reverse, Task::ModAdd, Task::Sort][d % 4]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_domains: usize,
    /// Relative domain weights; empty means equal weights.
    pub ratios: Vec<f64>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_domains: 4,
            ratios: Vec::new(),
            train_samples: 2000,
            eval_samples: 400,
            seq_len: 32,
            vocab_size: 64,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_domains == 0 {
            return bad("n_domains must be >= 1".into());
        }
        if !self.ratios.is_empty() {
            if self.ratios.len() != self.n_domains {
                return bad(format!(
                    "{} ratios for {} domains",
                    self.ratios.len(),
                    self.n_domains
                ));
            }
            if self.ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return bad("ratios must be positive".into());
            }
        }
        if self.seq_len < 4 {
            return bad(format!("seq_len must be >= 4, got {}", self.seq_len));
        }
        if self.vocab_size < FIRST_CONTENT || self.domain_width() < 2 {
            return bad(format!(
                "vocab_size {} leaves fewer than 2 content tokens per domain",
                self.vocab_size
            ));
        }
        if self.train_samples == 0 {
            return bad("train_samples must be >= 1".into());
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        if self.ratios.is_empty() {
            vec![1.0; self.n_domains]
        } else {
            self.ratios.clone()
        }
    }

    /// Number of content tokens owned by each domain.
    pub fn domain_width(&self) -> usize {
        self.vocab_size.saturating_sub(FIRST_CONTENT) / self.n_domains.max(1)
    }

    /// Half-open token range of domain `d`.
    pub fn domain_range(&self, d: usize) -> (usize, usize) {
        let w = self.domain_width();
        let lo = FIRST_CONTENT + d * w;
        (lo, lo + w)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSample {
    pub sample_id: u64,
    pub domain_id: usize,
    pub tokens: Vec<usize>,
}

impl AsRef<[usize]> for TaggedSample {
    fn as_ref(&self) -> &[usize] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<TaggedSample>,
    pub eval: Vec<TaggedSample>,
}

/// Splits `total` in proportion to `weights`, rounding by largest remainder
/// (ties to the lower index).
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut rest = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in &order {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn run(gen: &mut Generator, n: usize, lo: usize, width: usize) -> Vec<usize> {
    (0..n).map(|_| lo + gen.index(width)).collect()
}

/// One sample of domain `d`, exactly `seq_len` tokens long.
pub fn gen_sample(spec: &CorpusSpec, d: usize, gen: &mut Generator) -> Vec<usize> {
    let (lo, hi) = spec.domain_range(d);
    let width = hi - lo;
    let len = spec.seq_len;
    let half = len / 2;
    let mut out = Vec::with_capacity(len);
    match Task::for_domain(d) {
        Task::Copy => {
            out.push(BOS);
            out.extend(run(gen, half - 1, lo, width));
            out.extend_from_within(..half);
        }
        Task::Reverse | Task::Sort => {
            let xs = run(gen, half - 1, lo, width);
            out.push(BOS);
            out.extend(&xs);
            out.push(SEP);
            let mut ys = xs;
            if Task::for_domain(d) == Task::Reverse {
                ys.reverse();
            } else {
                ys.sort_unstable();
            }
            out.extend(ys);
        }
        Task::ModAdd => {
            out.push(BOS);
            while out.len() + 3 <= len {
                let a = gen.index(width);
                let b = gen.index(width);
                out.extend([lo + a, lo + b, lo + (a + b) % width]);
            }
        }
    }
    out.resize(len, EOS);
    out
}

fn gen_split(spec: &CorpusSpec, total: usize, first_id: u64, rng: &RngState) -> Vec<TaggedSample> {
    let counts = largest_remainder(total, &spec.weights());
    let mut domains: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(d, &c)| std::iter::repeat_n(d, c))
        .collect();
    rng.split("order").generator().shuffle(&mut domains);
    let mut gen = rng.split("tokens").generator();
    domains
        .into_iter()
        .enumerate()
        .map(|(i, d)| TaggedSample {
            sample_id: first_id + i as u64,
            domain_id: d,
            tokens: gen_sample(spec, d, &mut gen),
        })
        .collect()
}

/// Generates the train and eval splits. Eval sample ids continue after the
/// train ids, so the splits never share an id.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let rng = RngState::new(spec.seed);
    let train = gen_split(spec, spec.train_samples, 0, &rng.split("train"));
    let eval = gen_split(
        spec,
        spec.eval_samples,
        spec.train_samples as u64,
        &rng.split("eval"),
    );
    Ok(Corpus { train, eval })
}

/// Mean per-sample perplexity of each domain.
pub fn domain_ppl<M: LanguageModel + ?Sized>(
    model: &M,
    eval: &[TaggedSample],
    n_domains: usize,
) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; n_domains];
    let mut counts = vec![0usize; n_domains];
    for s in eval {
        if s.domain_id >= n_domains {
            return Err(Error::OutOfRange {
                index: s.domain_id,
                len: n_domains,
            });
        }
        sums[s.domain_id] += perplexity(model, &s.tokens)?;
        counts[s.domain_id] += 1;
    }
    if let Some(d) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Empty(format!("no eval samples for domain {d}")));
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
}

/// `exp` of the mean next-token NLL over every sample, i.e. the perplexity of
/// the whole mixed-domain split.
pub fn corpus_perplexity<M: LanguageModel + ?Sized>(model: &M, eval: &[TaggedSample]) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Empty("eval split is empty".into()));
    }
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in eval {
        let pred = s.tokens.len() - 1;
        nll += perplexity(model, &s.tokens)?.ln() * pred as f64;
        n += pred;
    }
    Ok((nll / n as f64).exp())
}

pub fn write_samples(path: &Path, samples: &[TaggedSample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples(path: &Path) -> Result<Vec<TaggedSample>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
