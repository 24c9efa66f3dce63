//! Synthetic multi-domain sequence data.
//!
//! Each domain is a per-channel first-order Markov chain whose transitions
//! concentrate on a domain-specific band of the vocabulary, so domains are
//! clearly distinguishable while sharing one token space.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::numcore::{Rng, Tensor};

/// Probability mass a transition row places on its in-band successors.
pub const BAND_MASS: f64 = 0.8;
/// In-band successors per row.
pub const SUCCESSORS: usize = 4;

/// One domain's generative process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub vocab_size: usize,
    /// `transitions[c]`: row-stochastic `vocab × vocab` matrix for channel `c`.
    pub transitions: Vec<Tensor>,
    /// Half-open token range sequences start in and transitions favour.
    pub band: (usize, usize),
    /// Sequence lengths are uniform over `len_min..=len_max`.
    pub len_min: usize,
    pub len_max: usize,
}

impl DomainSpec {
    /// Random band-biased chain for domain `index`: every row puts
    /// [`BAND_MASS`] on [`SUCCESSORS`] tokens inside the band and spreads the
    /// rest uniformly over the vocabulary.
    pub fn synthetic(index: usize, name: &str, m: &DatasetManifest) -> Result<Self> {
        let (v, w) = (m.vocab_size, m.band_width);
        let band = (index * w, (index + 1) * w);
        if w < SUCCESSORS || band.1 > v {
            return Err(Error::Config(format!("band {band:?} of domain {name} does not fit a vocabulary of {v}")));
        }
        let transitions = (0..m.n_channels)
            .map(|c| {
                let mut rng = Rng::with_stream(m.seed, 1_000 + (index * 64 + c) as u64);
                let mut t = Tensor::full(&[v, v], (1.0 - BAND_MASS) / v as f64);
                for i in 0..v {
                    let mut cands: Vec<usize> = (band.0..band.1).collect();
                    rng.shuffle(&mut cands);
                    let raw: Vec<f64> = (0..SUCCESSORS).map(|_| 0.5 + rng.uniform()).collect();
                    let s: f64 = raw.iter().sum();
                    for (&j, r) in cands[..SUCCESSORS].iter().zip(&raw) {
                        t.row_mut(i)[j] += BAND_MASS * r / s;
                    }
                }
                t
            })
            .collect();
        let spec = Self { name: name.to_string(), vocab_size: v, transitions, band, len_min: m.len_min, len_max: m.len_max };
        spec.validate()?;
        Ok(spec)
    }

    pub fn n_channels(&self) -> usize {
        self.transitions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size;
        if self.transitions.is_empty() {
            return Err(Error::Config(format!("domain {} has no channels", self.name)));
        }
        if self.len_min < 2 || self.len_min > self.len_max {
            return Err(Error::Config(format!("domain {}: length range {}..={}", self.name, self.len_min, self.len_max)));
        }
        if self.band.0 >= self.band.1 || self.band.1 > v {
            return Err(Error::Config(format!("domain {}: band {:?} outside vocabulary", self.name, self.band)));
        }
        for (c, t) in self.transitions.iter().enumerate() {
            if t.shape() != [v, v] {
                return Err(crate::error::shape_err!("domain {} channel {c}: transition shape {:?}", self.name, t.shape()));
            }
            for i in 0..v {
                let row = t.row(i);
                let s: f64 = row.iter().sum();
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Param(format!(
                        "domain {} channel {c}: degenerate transition row {i}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Mean total-variation distance between corresponding transition rows,
/// minimized over channels.
pub fn transition_tv(a: &DomainSpec, b: &DomainSpec) -> Result<f64> {
    if a.vocab_size != b.vocab_size || a.n_channels() != b.n_channels() {
        return Err(Error::Config(format!("domains {} and {} have different layouts", a.name, b.name)));
    }
    let v = a.vocab_size;
    Ok(a.transitions
        .iter()
        .zip(&b.transitions)
        .map(|(ta, tb)| {
            (0..v)
                .map(|i| 0.5 * ta.row(i).iter().zip(tb.row(i)).map(|(x, y)| (x - y).abs()).sum::<f64>())
                .sum::<f64>()
                / v as f64
        })
        .fold(f64::INFINITY, f64::min))
}

/// Minimum pairwise distinguishability required between domains.
pub const MIN_DOMAIN_TV: f64 = 0.2;

pub fn check_distinguishable(specs: &[DomainSpec]) -> Result<()> {
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            let tv = transition_tv(&specs[i], &specs[j])?;
            if tv < MIN_DOMAIN_TV {
                return Err(Error::Config(format!(
                    "domains {} and {} too similar (tv {tv:.3})",
                    specs[i].name, specs[j].name
                )));
            }
        }
    }
    Ok(())
}

/// One multi-channel token sequence, laid out `[position][channel]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub domain: usize,
    pub tokens: Vec<u32>,
}

impl Sequence {
    pub fn len(&self, channels: usize) -> usize {
        self.tokens.len() / channels
    }
}

/// Samples `n` sequences from `spec`; the stream depends only on
/// `(seed, domain)`, so domains can be generated in any order.
pub fn generate_domain(spec: &DomainSpec, domain: usize, n: usize, seed: u64) -> Result<Vec<Sequence>> {
    spec.validate()?;
    let mut rng = Rng::with_stream(seed, domain as u64);
    let ch = spec.n_channels();
    Ok((0..n)
        .map(|_| {
            let len = spec.len_min + rng.below(spec.len_max - spec.len_min + 1);
            let mut tokens = vec![0u32; len * ch];
            for c in 0..ch {
                let mut tok = spec.band.0 + rng.below(spec.band.1 - spec.band.0);
                tokens[c] = tok as u32;
                for t in 1..len {
                    tok = rng.categorical(spec.transitions[c].row(tok));
                    tokens[t * ch + c] = tok as u32;
                }
            }
            Sequence { domain, tokens }
        })
        .collect())
}

/// Sizes and seeds for the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub domains: Vec<String>,
    /// Imbalanced per-domain pool sizes (sequences).
    pub raw_counts: Vec<usize>,
    /// Sequences per domain in the balanced fine-tuning set.
    pub balanced_per_domain: usize,
    /// Held-out sequences per domain.
    pub eval_per_domain: usize,
    /// Share of each domain's balanced sequences used for warmup.
    pub warmup_fraction: f64,
    pub vocab_size: usize,
    pub n_channels: usize,
    pub band_width: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub seed: u64,
}

impl DatasetManifest {
    /// Desk-scale corpus: pools of 8000/6000/5000/1000 sequences, 500
    /// balanced and 200 held-out sequences per domain.
    pub fn desk(seed: u64) -> Self {
        Self {
            domains: ["A", "B", "C", "D"].map(String::from).to_vec(),
            raw_counts: vec![8000, 6000, 5000, 1000],
            balanced_per_domain: 500,
            eval_per_domain: 200,
            warmup_fraction: 0.4,
            vocab_size: 64,
            n_channels: 2,
            band_width: 16,
            len_min: 32,
            len_max: 32,
            seed,
        }
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.raw_counts.len() != self.domains.len() {
            return Err(Error::Config("raw_counts must list one pool size per domain".into()));
        }
        if self.raw_counts.contains(&0) || self.balanced_per_domain == 0 || self.eval_per_domain == 0 {
            return Err(Error::Config("every split needs at least one sequence per domain".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return Err(Error::Config(format!("warmup_fraction {} outside (0, 1]", self.warmup_fraction)));
        }
        if self.n_channels == 0 {
            return Err(Error::Config("n_channels must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_count(&self) -> usize {
        ((self.balanced_per_domain as f64 * self.warmup_fraction).round() as usize).clamp(1, self.balanced_per_domain)
    }

    /// Share of raw sequences per domain.
    pub fn raw_shares(&self) -> Vec<f64> {
        let total: usize = self.raw_counts.iter().sum();
        self.raw_counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

/// One domain's disjoint splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSplits {
    pub raw: Vec<Sequence>,
    pub balanced: Vec<Sequence>,
    pub eval: Vec<Sequence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub manifest: DatasetManifest,
    pub specs: Vec<DomainSpec>,
    pub splits: Vec<DomainSplits>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainFile {
    domain: String,
    index: usize,
    raw: Vec<Vec<u32>>,
    balanced: Vec<Vec<u32>>,
    eval: Vec<Vec<u32>>,
}

impl Datasets {
    /// Generates every domain's splits from one stream per domain.
    pub fn generate(manifest: &DatasetManifest) -> Result<Self> {
        manifest.validate()?;
        let specs = manifest
            .domains
            .iter()
            .enumerate()
            .map(|(i, n)| DomainSpec::synthetic(i, n, manifest))
            .collect::<Result<Vec<_>>>()?;
        check_distinguishable(&specs)?;
        let splits = Self::split_all(manifest, &specs)?;
        Ok(Self { manifest: manifest.clone(), specs, splits })
    }

    fn split_all(manifest: &DatasetManifest, specs: &[DomainSpec]) -> Result<Vec<DomainSplits>> {
        specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (r, b, e) = (manifest.raw_counts[i], manifest.balanced_per_domain, manifest.eval_per_domain);
                let mut all = generate_domain(spec, i, r + b + e, manifest.seed)?;
                let eval = all.split_off(r + b);
                let balanced = all.split_off(r);
                Ok(DomainSplits { raw: all, balanced, eval })
            })
            .collect()
    }

    pub fn n_domains(&self) -> usize {
        self.manifest.n_domains()
    }

    pub fn channels(&self) -> usize {
        self.manifest.n_channels
    }

    /// Warmup subset: the leading share of each domain's balanced split.
    pub fn warmup(&self, domain: usize) -> &[Sequence] {
        &self.splits[domain].balanced[..self.manifest.warmup_count()]
    }

    pub fn raw_all(&self) -> Vec<Sequence> {
        self.splits.iter().flat_map(|s| s.raw.iter().cloned()).collect()
    }

    pub fn balanced_all(&self) -> Vec<Sequence> {
        self.splits.iter().flat_map(|s| s.balanced.iter().cloned()).collect()
    }

    pub fn warmup_all(&self) -> Vec<Sequence> {
        (0..self.n_domains()).flat_map(|d| self.warmup(d).iter().cloned()).collect()
    }

    pub fn eval_all(&self) -> Vec<Sequence> {
        self.splits.iter().flat_map(|s| s.eval.iter().cloned()).collect()
    }

    /// Writes `manifest.json` and one `domain_<name>.json` per domain.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        for (i, (name, s)) in self.manifest.domains.iter().zip(&self.splits).enumerate() {
            let tok = |v: &[Sequence]| v.iter().map(|q| q.tokens.clone()).collect();
            let f = DomainFile { domain: name.clone(), index: i, raw: tok(&s.raw), balanced: tok(&s.balanced), eval: tok(&s.eval) };
            fs::write(dir.join(format!("domain_{name}.json")), serde_json::to_string(&f)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|e| {
                if e.kind() == std::io::ErrorKind::NotFound {
                    Error::Missing(format!("dataset file {} (run gen-data first)", p.display()))
                } else {
                    e.into()
                }
            })
        };
        let manifest: DatasetManifest = serde_json::from_str(&read(&dir.join("manifest.json"))?)?;
        manifest.validate()?;
        let specs = manifest
            .domains
            .iter()
            .enumerate()
            .map(|(i, n)| DomainSpec::synthetic(i, n, &manifest))
            .collect::<Result<Vec<_>>>()?;
        let mut splits = Vec::new();
        for (i, name) in manifest.domains.iter().enumerate() {
            let f: DomainFile = serde_json::from_str(&read(&dir.join(format!("domain_{name}.json")))?)?;
            if f.index != i || &f.domain != name {
                return Err(Error::Config(format!("domain file for {name} is labelled {} #{}", f.domain, f.index)));
            }
            if f.raw.len() != manifest.raw_counts[i]
                || f.balanced.len() != manifest.balanced_per_domain
                || f.eval.len() != manifest.eval_per_domain
            {
                return Err(Error::Config(format!("domain {name}: split sizes disagree with the manifest")));
            }
            let seqs = |v: Vec<Vec<u32>>| -> Result<Vec<Sequence>> {
                v.into_iter()
                    .map(|tokens| {
                        if tokens.is_empty() || tokens.len() % manifest.n_channels != 0 {
                            return Err(Error::Config(format!("domain {name}: ragged sequence")));
                        }
                        Ok(Sequence { domain: i, tokens })
                    })
                    .collect()
            };
            splits.push(DomainSplits { raw: seqs(f.raw)?, balanced: seqs(f.balanced)?, eval: seqs(f.eval)? });
        }
        Ok(Self { manifest, specs, splits })
    }
}

/// Packs sequences into one batch, padding to the longest; padded positions
/// and their predecessors carry zero loss weight.
pub fn make_batch(seqs: &[&Sequence], channels: usize) -> Result<Batch> {
    if seqs.is_empty() {
        return Err(Error::Empty("no sequences to batch".into()));
    }
    let seq = seqs.iter().map(|s| s.len(channels)).max().unwrap_or(0);
    let mut tokens = vec![0u32; seqs.len() * seq * channels];
    let mut loss_mask = vec![0.0; seqs.len() * seq];
    for (b, s) in seqs.iter().enumerate() {
        let len = s.len(channels);
        tokens[b * seq * channels..][..len * channels].copy_from_slice(&s.tokens);
        for t in 0..len.saturating_sub(1) {
            loss_mask[b * seq + t] = 1.0;
        }
    }
    Ok(Batch { batch: seqs.len(), seq, channels, tokens, domains: seqs.iter().map(|s| s.domain).collect(), loss_mask })
}
