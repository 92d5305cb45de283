use serde::{Deserialize, Serialize};

use crate::numerics::Rng;
use crate::{ensure, Result};

/// Token source: an order-2 Markov chain over its own slice of the
/// vocabulary. The next token depends on the previous token and on the
/// coarse group of the one before it. Each context draws one successor
/// profile, so some contexts are near-deterministic and others ambiguous.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    /// First token id of the source's range.
    pub base: usize,
    /// Number of token ids the source emits.
    pub span: usize,
    /// Groups the older context token is reduced to.
    pub groups: usize,
    /// Candidate successor distributions, most likely first. Each context
    /// picks one uniformly at random.
    pub profiles: Vec<Vec<f64>>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub vocab: usize,
    pub seq_len: usize,
    pub prompt_len: usize,
    pub sources: Vec<SourceSpec>,
    /// Query index at which serving streams switch from source 0 to 1.
    pub shift_at: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let source = |base, seed| SourceSpec { base, span: 32, groups: 4, profiles: vec![vec![0.75, 0.15, 0.1]], seed };
        Self { vocab: 64, seq_len: 96, prompt_len: 16, sources: vec![source(0, 101), source(32, 202)], shift_at: 50 }
    }
}

/// Transition table of one source.
#[derive(Clone, Debug)]
pub struct MarkovSource {
    spec: SourceSpec,
    /// `[group * span + prev]` -> (profile, successor ids aligned with it).
    table: Vec<(usize, Vec<usize>)>,
}

impl MarkovSource {
    pub fn new(spec: &SourceSpec) -> Result<Self> {
        ensure!(!spec.profiles.is_empty(), "source needs at least one successor profile");
        ensure!(spec.span > 0 && spec.profiles.iter().all(|p| p.len() <= spec.span), "source span too small");
        ensure!(spec.groups >= 1 && spec.groups <= spec.span, "groups must be in 1..=span");
        for p in &spec.profiles {
            let total: f64 = p.iter().sum();
            ensure!((total - 1.0).abs() < 1e-9 && p.iter().all(|&x| x > 0.0), "successor probabilities must be positive and sum to 1");
        }
        let mut rng = Rng::new(spec.seed, 0x636f_7270);
        let table = (0..spec.groups * spec.span)
            .map(|_| {
                let profile = rng.below(spec.profiles.len());
                let mut ids: Vec<usize> = (0..spec.span).collect();
                rng.shuffle(&mut ids);
                ids.truncate(spec.profiles[profile].len());
                (profile, ids.into_iter().map(|i| spec.base + i).collect())
            })
            .collect();
        Ok(Self { spec: spec.clone(), table })
    }

    fn local(&self, tok: usize) -> usize {
        tok - self.spec.base
    }

    pub fn contains(&self, tok: usize) -> bool {
        tok >= self.spec.base && tok < self.spec.base + self.spec.span
    }

    /// Next-token distribution over the source's range given two context
    /// tokens from the same range.
    pub fn next_distribution(&self, older: usize, prev: usize) -> Vec<(usize, f64)> {
        let group = self.local(older) * self.spec.groups / self.spec.span;
        let (profile, ids) = &self.table[group * self.spec.span + self.local(prev)];
        ids.iter().copied().zip(self.spec.profiles[*profile].iter().copied()).collect()
    }

    pub fn sample(&self, rng: &mut Rng, len: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..len.min(2)).map(|_| self.spec.base + rng.below(self.spec.span)).collect();
        while out.len() < len {
            let dist = self.next_distribution(out[out.len() - 2], out[out.len() - 1]);
            let weights: Vec<f64> = dist.iter().map(|&(_, p)| p).collect();
            let i = rng.categorical(&weights).expect("positive weights");
            out.push(dist[i].0);
        }
        out
    }
}

/// All sources of a corpus spec, ready to sample.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub sources: Vec<MarkovSource>,
}

impl Corpus {
    pub fn new(spec: CorpusSpec) -> Result<Self> {
        ensure!(!spec.sources.is_empty(), "corpus needs at least one source");
        ensure!(spec.prompt_len >= 2 && spec.prompt_len <= spec.seq_len, "prompt_len must be in 2..=seq_len");
        for s in &spec.sources {
            ensure!(s.base + s.span <= spec.vocab, "source range exceeds vocab {}", spec.vocab);
        }
        let sources = spec.sources.iter().map(MarkovSource::new).collect::<Result<_>>()?;
        Ok(Self { spec, sources })
    }

    fn source(&self, i: usize) -> Result<&MarkovSource> {
        self.sources.get(i).ok_or_else(|| crate::Error::Config(format!("no source {i}")))
    }

    /// `n` full-length sequences from `source`.
    pub fn sequences(&self, source: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let src = self.source(source)?;
        let mut rng = Rng::new(seed, 0x7365_7100 + source as u64);
        Ok((0..n).map(|_| src.sample(&mut rng, self.spec.seq_len)).collect())
    }

    /// `n` prompts from `source`.
    pub fn prompts(&self, source: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let src = self.source(source)?;
        let mut rng = Rng::new(seed, 0x7072_6d00 + source as u64);
        Ok((0..n).map(|_| src.sample(&mut rng, self.spec.prompt_len)).collect())
    }

    /// Serving stream: query `i` comes from source 0 before `shift_at` and
    /// from source 1 afterwards (source 0 only when there is no second).
    pub fn shifted_stream(&self, n: usize, seed: u64) -> Result<Vec<(usize, Vec<usize>)>> {
        let mut rng = Rng::new(seed, 0x7374_726d);
        (0..n)
            .map(|i| {
                let s = if i >= self.spec.shift_at && self.sources.len() > 1 { 1 } else { 0 };
                Ok((s, self.source(s)?.sample(&mut rng, self.spec.prompt_len)))
            })
            .collect()
    }
}

/// Relative token frequencies of `seqs` over `vocab`.
pub fn unigram(seqs: &[Vec<usize>], vocab: usize) -> Vec<f64> {
    let mut counts = vec![0.0; vocab];
    let mut n = 0.0;
    for s in seqs {
        for &t in s {
            counts[t] += 1.0;
            n += 1.0;
        }
    }
    if n > 0.0 {
        for c in &mut counts {
            *c /= n;
        }
    }
    counts
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
