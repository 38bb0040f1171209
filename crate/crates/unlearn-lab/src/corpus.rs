//! Synthetic corpora with known statistics, character tokenization, and the
//! data splits every run needs: train set D, forget set U, retain sample R,
//! an approximate set A drawn fresh from the same generator, and a held-out
//! general set G.
//!
//! Corpora live on disk as UTF-8 text, one sequence per line; split
//! membership is a JSON manifest of sequence indices.

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = usize;
pub type Sequence = Vec<Token>;

/// Deterministic seed derivation (splitmix64 over the pair).
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ROW_SUM_TOL: f64 = 1e-12;

/// Where a generated sequence starts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum InitialDist {
    /// Sample the initial state from the stationary distribution.
    Stationary,
    /// Uniform over states.
    Uniform,
    /// Always start in one state.
    Fixed(usize),
}

/// Order-k Markov chain over `vocab` tokens. Transition rows are indexed by
/// the base-`vocab` encoding of the last k tokens (most significant first).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MarkovChainSpec {
    pub order: usize,
    pub vocab: usize,
    pub transitions: Vec<Vec<f64>>,
    pub initial: InitialDist,
}

impl MarkovChainSpec {
    pub fn new(order: usize, vocab: usize, transitions: Vec<Vec<f64>>) -> Result<Self> {
        let spec = MarkovChainSpec {
            order,
            vocab,
            transitions,
            initial: InitialDist::Stationary,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Deterministic random chain: log-normal row weights mixed with a
    /// uniform floor so every transition stays reachable.
    pub fn structured(vocab: usize, matrix_seed: u64, spread: f64, floor: f64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(matrix_seed);
        let mut transitions = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            let weights: Vec<f64> = (0..vocab).map(|_| (spread * gauss(&mut rng)).exp()).collect();
            let total: f64 = weights.iter().sum();
            let row: Vec<f64> = weights
                .iter()
                .map(|w| (1.0 - floor * vocab as f64) * w / total + floor)
                .collect();
            transitions.push(row);
        }
        MarkovChainSpec {
            order: 1,
            vocab,
            transitions,
            initial: InitialDist::Stationary,
        }
    }

    pub fn num_states(&self) -> usize {
        self.vocab.pow(self.order as u32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.order == 0 || self.vocab == 0 {
            return Err(Error::InvalidConfig("markov order and vocab must be positive".into()));
        }
        if self.transitions.len() != self.num_states() {
            return Err(Error::InvalidConfig(format!(
                "expected {} transition rows, got {}",
                self.num_states(),
                self.transitions.len()
            )));
        }
        for (r, row) in self.transitions.iter().enumerate() {
            if row.len() != self.vocab {
                return Err(Error::InvalidConfig(format!(
                    "transition row {r} has {} entries, expected {}",
                    row.len(),
                    self.vocab
                )));
            }
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::NonStochasticRow {
                    row: r,
                    sum: f64::NAN,
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::NonStochasticRow { row: r, sum });
            }
        }
        if let InitialDist::Fixed(s) = self.initial {
            if s >= self.num_states() {
                return Err(Error::InvalidConfig(format!("initial state {s} out of range")));
            }
        }
        Ok(())
    }

    /// Stationary distribution over states by damped power iteration.
    pub fn stationary(&self) -> Vec<f64> {
        let n = self.num_states();
        let mut pi = vec![1.0 / n as f64; n];
        let mut next = vec![0.0; n];
        for _ in 0..100_000 {
            next.fill(0.0);
            for (s, row) in self.transitions.iter().enumerate() {
                let mass = pi[s];
                if mass == 0.0 {
                    continue;
                }
                for (v, &p) in row.iter().enumerate() {
                    let t = (s * self.vocab + v) % n;
                    next[t] += mass * p;
                }
            }
            let mut delta = 0.0;
            for (p, nx) in pi.iter_mut().zip(&next) {
                let blended = 0.5 * *p + 0.5 * nx;
                delta += (blended - *p).abs();
                *p = blended;
            }
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats per token: sum_s pi(s) H(P(.|s)).
    pub fn entropy_rate(&self) -> f64 {
        let pi = self.stationary();
        let mut h = 0.0;
        for (s, row) in self.transitions.iter().enumerate() {
            let row_h: f64 = row
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| -p * p.ln())
                .sum();
            h += pi[s] * row_h;
        }
        h
    }

    fn decode_state(&self, mut state: usize) -> Vec<Token> {
        let mut toks = vec![0; self.order];
        for slot in (0..self.order).rev() {
            toks[slot] = state % self.vocab;
            state /= self.vocab;
        }
        toks
    }
}

fn gauss(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; two uniforms per call keeps the stream simple to reason about.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn sample_categorical(rng: &mut ChaCha12Rng, probs: &[f64]) -> usize {
    let mut dart: f64 = rng.gen();
    for (i, &p) in probs.iter().enumerate() {
        dart -= p;
        if dart <= 0.0 {
            return i;
        }
    }
    probs.len() - 1
}

/// Token sequences expanded from string templates. `{slot}` placeholders are
/// filled uniformly from the named filler list; output token ids come from
/// the grammar's own character alphabet.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemplateGrammarSpec {
    pub templates: Vec<String>,
    pub fillers: BTreeMap<String, Vec<String>>,
}

impl TemplateGrammarSpec {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::InvalidConfig("template grammar needs at least one template".into()));
        }
        if self.fillers.values().any(|v| v.is_empty()) {
            return Err(Error::InvalidConfig("every filler list must be non-empty".into()));
        }
        Ok(())
    }

    /// Alphabet of every character this grammar can emit, sorted.
    pub fn alphabet(&self) -> Vec<char> {
        let mut chars: Vec<char> = self
            .templates
            .iter()
            .map(|t| strip_slots(t))
            .chain(self.fillers.values().flatten().cloned())
            .flat_map(|s| s.chars().collect::<Vec<_>>())
            .collect();
        chars.sort_unstable();
        chars.dedup();
        chars
    }

    fn expand(&self, rng: &mut ChaCha12Rng) -> String {
        let template = &self.templates[rng.gen_range(0..self.templates.len())];
        let mut out = String::new();
        let mut rest = template.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let close = rest[open..].find('}').map(|c| open + c).unwrap_or(rest.len() - 1);
            let name = &rest[open + 1..close];
            match self.fillers.get(name) {
                Some(choices) => out.push_str(&choices[rng.gen_range(0..choices.len())]),
                None => out.push_str(&rest[open..=close]),
            }
            rest = &rest[close + 1..];
        }
        out.push_str(rest);
        out
    }
}

fn strip_slots(template: &str) -> String {
    let mut out = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        match rest[open..].find('}') {
            Some(c) => rest = &rest[open + c + 1..],
            None => {
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum GeneratorKind {
    MarkovChain(MarkovChainSpec),
    TemplateGrammar(TemplateGrammarSpec),
}

/// Everything needed to reproduce a corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub num_sequences: usize,
    pub sequence_length: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_sequences == 0 {
            return Err(Error::InvalidConfig("num_sequences must be positive".into()));
        }
        match &self.kind {
            GeneratorKind::MarkovChain(m) => {
                if self.sequence_length < m.order + 1 {
                    return Err(Error::InvalidConfig(
                        "sequence_length must exceed the markov order".into(),
                    ));
                }
                m.validate()
            }
            GeneratorKind::TemplateGrammar(g) => g.validate(),
        }
    }

    /// Vocabulary implied by the generator.
    pub fn vocab(&self) -> usize {
        match &self.kind {
            GeneratorKind::MarkovChain(m) => m.vocab,
            GeneratorKind::TemplateGrammar(g) => g.alphabet().len(),
        }
    }

    pub fn tokenizer(&self) -> Result<CharTokenizer> {
        match &self.kind {
            GeneratorKind::MarkovChain(m) => CharTokenizer::alphabet(m.vocab),
            GeneratorKind::TemplateGrammar(g) => Ok(CharTokenizer {
                chars: g.alphabet(),
            }),
        }
    }

    pub fn with_seed(&self, seed: u64) -> GeneratorSpec {
        let mut s = self.clone();
        s.seed = seed;
        s
    }
}

/// Generate the corpus described by `spec`. Deterministic for a fixed seed.
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<Sequence>> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    match &spec.kind {
        GeneratorKind::MarkovChain(m) => {
            let stationary = match m.initial {
                InitialDist::Stationary => Some(m.stationary()),
                _ => None,
            };
            let mut out = Vec::with_capacity(spec.num_sequences);
            for _ in 0..spec.num_sequences {
                let mut state = match m.initial {
                    InitialDist::Fixed(s) => s,
                    InitialDist::Uniform => rng.gen_range(0..m.num_states()),
                    InitialDist::Stationary => sample_categorical(&mut rng, stationary.as_ref().unwrap()),
                };
                let mut seq = m.decode_state(state);
                while seq.len() < spec.sequence_length {
                    let v = sample_categorical(&mut rng, &m.transitions[state]);
                    seq.push(v);
                    state = (state * m.vocab + v) % m.num_states();
                }
                out.push(seq);
            }
            Ok(out)
        }
        GeneratorKind::TemplateGrammar(g) => {
            let tok = spec.tokenizer()?;
            (0..spec.num_sequences)
                .map(|_| tok.encode(&g.expand(&mut rng)))
                .collect()
        }
    }
}

/// Sizing and seeding of the data splits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub forget_fraction: f64,
    pub retain_sample_size: usize,
    pub approx_size: usize,
    pub general_size: usize,
    pub seed: u64,
}

/// Sequence indices (into D) backing each split; written next to the corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitManifest {
    pub forget: Vec<usize>,
    pub retain_sample: Vec<usize>,
    pub general: Vec<usize>,
}

/// The train corpus D and its derived splits.
#[derive(Clone, Debug)]
pub struct CorpusSplits {
    /// Full training corpus D.
    pub train: Vec<Sequence>,
    /// Forget set U, a strict subset of D.
    pub forget: Vec<Sequence>,
    /// D minus U.
    pub retain: Vec<Sequence>,
    /// Small retain sample R used by hybrid unlearning objectives.
    pub retain_sample: Vec<Sequence>,
    /// Held-out general evaluation set G (subset of D minus U).
    pub general: Vec<Sequence>,
    /// Approximate set A: fresh draws from the generator, disjoint from D.
    pub approx: Vec<Sequence>,
    pub manifest: SplitManifest,
}

impl CorpusSplits {
    /// Check the structural split invariants.
    pub fn validate(&self) -> Result<()> {
        if self.forget.is_empty() || self.forget.len() >= self.train.len() {
            return Err(Error::InvalidConfig(format!(
                "forget set of {} sequences must be non-empty and smaller than D ({})",
                self.forget.len(),
                self.train.len()
            )));
        }
        let m = &self.manifest;
        let forget: HashSet<usize> = m.forget.iter().copied().collect();
        if m.retain_sample.iter().any(|i| forget.contains(i)) || m.general.iter().any(|i| forget.contains(i)) {
            return Err(Error::InvalidConfig("retain-side indices overlap the forget set".into()));
        }
        let d: HashSet<&Sequence> = self.train.iter().collect();
        if self.approx.iter().any(|s| d.contains(s)) {
            return Err(Error::InvalidConfig("approximate set intersects D".into()));
        }
        Ok(())
    }
}

/// Partition `corpus` into splits and draw the approximate set.
///
/// Selection shuffles a content-sorted index list, so the forget membership
/// set depends only on the seed and the corpus contents, not on the order
/// sequences arrive in.
pub fn make_splits(corpus: &[Sequence], split: &SplitSpec, generator: &GeneratorSpec) -> Result<CorpusSplits> {
    if !(split.forget_fraction > 0.0 && split.forget_fraction < 1.0) {
        return Err(Error::InvalidForgetFraction(split.forget_fraction));
    }
    let n = corpus.len();
    if n < 2 {
        return Err(Error::InvalidConfig("corpus needs at least two sequences to split".into()));
    }
    let forget_len = ((split.forget_fraction * n as f64).round() as usize).clamp(1, n - 1);
    if forget_len + split.general_size + split.retain_sample_size > n {
        return Err(Error::InvalidConfig(format!(
            "splits need {} sequences but the corpus has {}",
            forget_len + split.general_size + split.retain_sample_size,
            n
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| corpus[a].cmp(&corpus[b]).then(a.cmp(&b)));
    let mut rng = ChaCha12Rng::seed_from_u64(split.seed);
    // Fisher-Yates over the canonical order.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut forget_idx: Vec<usize> = order[..forget_len].to_vec();
    let mut general_idx: Vec<usize> = order[forget_len..forget_len + split.general_size].to_vec();
    let mut retain_sample_idx: Vec<usize> = order
        [forget_len + split.general_size..forget_len + split.general_size + split.retain_sample_size]
        .to_vec();
    forget_idx.sort_unstable();
    general_idx.sort_unstable();
    retain_sample_idx.sort_unstable();

    let forget_set: HashSet<usize> = forget_idx.iter().copied().collect();
    let retain: Vec<Sequence> = (0..n)
        .filter(|i| !forget_set.contains(i))
        .map(|i| corpus[i].clone())
        .collect();

    let d_contents: HashSet<&Sequence> = corpus.iter().collect();
    let mut approx: Vec<Sequence> = Vec::with_capacity(split.approx_size);
    let mut attempt = 0u64;
    while approx.len() < split.approx_size {
        if attempt >= 64 {
            return Err(Error::ApproxSetExhausted {
                needed: split.approx_size,
            });
        }
        let fresh_spec = GeneratorSpec {
            num_sequences: split.approx_size,
            ..generator.clone()
        }
        .with_seed(mix_seed(generator.seed, 0xA220_0000 + mix_seed(split.seed, attempt)));
        for seq in generate(&fresh_spec)? {
            if approx.len() < split.approx_size && !d_contents.contains(&seq) && !approx.contains(&seq) {
                approx.push(seq);
            }
        }
        attempt += 1;
    }

    let splits = CorpusSplits {
        train: corpus.to_vec(),
        forget: forget_idx.iter().map(|&i| corpus[i].clone()).collect(),
        retain,
        retain_sample: retain_sample_idx.iter().map(|&i| corpus[i].clone()).collect(),
        general: general_idx.iter().map(|&i| corpus[i].clone()).collect(),
        approx,
        manifest: SplitManifest {
            forget: forget_idx,
            retain_sample: retain_sample_idx,
            general: general_idx,
        },
    };
    splits.validate()?;
    Ok(splits)
}

/// Character-level tokenizer: ids are positions in a fixed character list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharTokenizer {
    chars: Vec<char>,
}

const BASE_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

impl CharTokenizer {
    /// Vocabulary built from the corpus text: sorted unique characters.
    pub fn from_text<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let mut chars: Vec<char> = lines.into_iter().flat_map(|l| l.chars()).collect();
        chars.sort_unstable();
        chars.dedup();
        CharTokenizer { chars }
    }

    /// First `vocab` characters of the base alphabet; the id-to-char map
    /// used when rendering generated token ids as text.
    pub fn alphabet(vocab: usize) -> Result<Self> {
        if vocab == 0 || vocab > BASE_ALPHABET.chars().count() {
            return Err(Error::InvalidConfig(format!(
                "alphabet tokenizer supports 1..={} tokens, requested {vocab}",
                BASE_ALPHABET.chars().count()
            )));
        }
        Ok(CharTokenizer {
            chars: BASE_ALPHABET.chars().take(vocab).collect(),
        })
    }

    pub fn vocab(&self) -> usize {
        self.chars.len()
    }

    pub fn encode(&self, text: &str) -> Result<Sequence> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&k| k == c)
                    .ok_or(Error::UnknownChar(c))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[Token]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                self.chars.get(t).copied().ok_or(Error::OutOfVocab {
                    token: t,
                    vocab: self.chars.len(),
                })
            })
            .collect()
    }
}

/// Write one sequence per line.
pub fn save_corpus(path: &Path, corpus: &[Sequence], tok: &CharTokenizer) -> Result<()> {
    let mut text = String::new();
    for seq in corpus {
        text.push_str(&tok.decode(seq)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_corpus(path: &Path, tok: &CharTokenizer) -> Result<Vec<Sequence>> {
    fs::read_to_string(path)?.lines().map(|l| tok.encode(l)).collect()
}

pub fn save_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<SplitManifest> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state_symmetric() -> GeneratorSpec {
        GeneratorSpec {
            kind: GeneratorKind::MarkovChain(
                MarkovChainSpec::new(1, 2, vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap(),
            ),
            num_sequences: 100,
            sequence_length: 1000,
            seed: 7,
        }
    }

    #[test]
    fn absorbing_state_yields_constant_sequence() {
        let mut m = MarkovChainSpec::new(
            1,
            3,
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.5, 0.5, 0.0],
                vec![0.2, 0.3, 0.5],
            ],
        )
        .unwrap();
        m.initial = InitialDist::Fixed(0);
        let spec = GeneratorSpec {
            kind: GeneratorKind::MarkovChain(m),
            num_sequences: 3,
            sequence_length: 20,
            seed: 1,
        };
        for seq in generate(&spec).unwrap() {
            assert!(seq.iter().all(|&t| t == 0));
        }
    }

    #[test]
    fn symmetric_chain_transition_frequency_matches() {
        let corpus = generate(&two_state_symmetric()).unwrap();
        let mut flips = 0usize;
        let mut total = 0usize;
        for seq in &corpus {
            for w in seq.windows(2) {
                total += 1;
                if w[0] != w[1] {
                    flips += 1;
                }
            }
        }
        let freq = flips as f64 / total as f64;
        assert!((freq - 0.5).abs() < 0.02, "flip frequency {freq}");
    }

    #[test]
    fn same_seed_reproduces_the_corpus() {
        let spec = two_state_symmetric();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn rejects_non_stochastic_matrix() {
        let err = MarkovChainSpec::new(1, 2, vec![vec![0.7, 0.7], vec![0.5, 0.5]]).unwrap_err();
        assert!(matches!(err, Error::NonStochasticRow { row: 0, .. }));
    }

    #[test]
    fn entropy_rate_of_iid_uniform_is_log_v() {
        let m = MarkovChainSpec::new(1, 4, vec![vec![0.25; 4]; 4]).unwrap();
        assert!((m.entropy_rate() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn plug_in_entropy_estimate_matches_analytic_rate() {
        let m = MarkovChainSpec::structured(5, 99, 1.5, 0.01);
        let analytic = m.entropy_rate();
        let spec = GeneratorSpec {
            kind: GeneratorKind::MarkovChain(m),
            num_sequences: 120,
            sequence_length: 2000,
            seed: 3,
        };
        let corpus = generate(&spec).unwrap();
        // Plug-in estimator from bigram counts.
        let v = 5usize;
        let mut counts = vec![vec![0usize; v]; v];
        for seq in &corpus {
            for w in seq.windows(2) {
                counts[w[0]][w[1]] += 1;
            }
        }
        let total: usize = counts.iter().flatten().sum();
        let mut est = 0.0;
        for row in &counts {
            let row_total: usize = row.iter().sum();
            if row_total == 0 {
                continue;
            }
            for &c in row {
                if c > 0 {
                    let p = c as f64 / row_total as f64;
                    est -= (row_total as f64 / total as f64) * p * p.ln();
                }
            }
        }
        assert!(
            (est - analytic).abs() / analytic < 0.02,
            "estimate {est} vs analytic {analytic}"
        );
    }

    fn small_corpus_spec() -> GeneratorSpec {
        GeneratorSpec {
            kind: GeneratorKind::MarkovChain(MarkovChainSpec::structured(6, 11, 1.2, 0.01)),
            num_sequences: 100,
            sequence_length: 24,
            seed: 42,
        }
    }

    fn default_split() -> SplitSpec {
        SplitSpec {
            forget_fraction: 0.1,
            retain_sample_size: 10,
            approx_size: 20,
            general_size: 15,
            seed: 5,
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let gen = small_corpus_spec();
        let corpus = generate(&gen).unwrap();
        let splits = make_splits(&corpus, &default_split(), &gen).unwrap();
        assert_eq!(splits.forget.len(), 10);
        assert_eq!(splits.retain.len(), 90);
        assert_eq!(splits.approx.len(), 20);
        let d: HashSet<&Sequence> = splits.train.iter().collect();
        assert!(splits.approx.iter().all(|s| !d.contains(s)));
        splits.validate().unwrap();
    }

    #[test]
    fn forget_membership_is_invariant_to_corpus_order() {
        let gen = small_corpus_spec();
        let corpus = generate(&gen).unwrap();
        let split = default_split();
        let a = make_splits(&corpus, &split, &gen).unwrap();

        let mut shuffled = corpus.clone();
        shuffled.reverse();
        shuffled.swap(3, 57);
        let b = make_splits(&shuffled, &split, &gen).unwrap();

        let mut fa = a.forget.clone();
        let mut fb = b.forget.clone();
        fa.sort();
        fb.sort();
        assert_eq!(fa, fb);
    }

    #[test]
    fn split_invariants_hold_across_seeds() {
        let gen = small_corpus_spec();
        let corpus = generate(&gen).unwrap();
        for seed in 0..100 {
            let split = SplitSpec {
                seed,
                ..default_split()
            };
            let splits = make_splits(&corpus, &split, &gen).unwrap();
            splits.validate().unwrap();
            assert_eq!(splits.forget.len() + splits.retain.len(), splits.train.len());
        }
    }

    #[test]
    fn degenerate_forget_fractions_are_rejected() {
        let gen = small_corpus_spec();
        let corpus = generate(&gen).unwrap();
        for f in [0.0, 1.0] {
            let split = SplitSpec {
                forget_fraction: f,
                ..default_split()
            };
            assert!(matches!(
                make_splits(&corpus, &split, &gen),
                Err(Error::InvalidForgetFraction(_))
            ));
        }
    }

    #[test]
    fn corpus_file_round_trip() {
        let gen = small_corpus_spec();
        let corpus = generate(&gen).unwrap();
        let tok = gen.tokenizer().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        save_corpus(&path, &corpus, &tok).unwrap();
        assert_eq!(load_corpus(&path, &tok).unwrap(), corpus);
    }

    #[test]
    fn template_grammar_generates_and_encodes() {
        let mut fillers = BTreeMap::new();
        fillers.insert("animal".to_string(), vec!["cat".into(), "dog".into()]);
        fillers.insert("verb".to_string(), vec!["runs".into(), "naps".into()]);
        let g = TemplateGrammarSpec {
            templates: vec!["the {animal} {verb}".into()],
            fillers,
        };
        let spec = GeneratorSpec {
            kind: GeneratorKind::TemplateGrammar(g),
            num_sequences: 8,
            sequence_length: 0,
            seed: 2,
        };
        let corpus = generate(&spec).unwrap();
        let tok = spec.tokenizer().unwrap();
        for seq in &corpus {
            let text = tok.decode(seq).unwrap();
            assert!(text.starts_with("the "));
        }
        assert_eq!(generate(&spec).unwrap(), corpus);
    }

    #[test]
    fn tokenizer_rejects_unknown_chars() {
        let tok = CharTokenizer::alphabet(4).unwrap();
        assert!(matches!(tok.encode("abz"), Err(Error::UnknownChar('z'))));
        assert!(matches!(tok.decode(&[9]), Err(Error::OutOfVocab { .. })));
    }
}
