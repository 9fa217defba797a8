//! Parallel corpora: loading, filtering, synthetic generation, training
//! mixtures and minibatch iteration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid language code {0:?}: expected [a-z]{{2,8}}")]
    InvalidLanguageCode(String),
    #[error("duplicate language code {0:?} in registry")]
    DuplicateLanguageCode(String),
    #[error("line count mismatch: {src_path} has {src_lines} lines, {tgt_path} has {tgt_lines}")]
    LineCountMismatch {
        src_path: String,
        src_lines: usize,
        tgt_path: String,
        tgt_lines: usize,
    },
    #[error("{path}: line {line} is not valid UTF-8")]
    InvalidUtf8 { path: String, line: usize },
    #[error("mixture strategy {strategy} requires the {direction} direction, which was not supplied")]
    MissingDirection { strategy: String, direction: String },
    #[error("synthetic language alphabets overlap: {0}")]
    OverlappingAlphabets(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSyntheticSpec(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A short lowercase language identifier such as `de` or `en`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn new(code: &str) -> Result<Self, CorpusError> {
        let ok = (2..=8).contains(&code.len()) && code.bytes().all(|b| b.is_ascii_lowercase());
        if ok {
            Ok(LanguageCode(code.to_string()))
        } else {
            Err(CorpusError::InvalidLanguageCode(code.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for LanguageCode {
    type Error = CorpusError;
    fn try_from(s: String) -> Result<Self, CorpusError> {
        LanguageCode::new(&s)
    }
}

impl From<LanguageCode> for String {
    fn from(c: LanguageCode) -> String {
        c.0
    }
}

/// The set of language codes known to a pipeline run. Codes are unique and
/// kept in insertion order.
#[derive(Debug, Clone, Default)]
pub struct LanguageRegistry {
    codes: Vec<LanguageCode>,
}

impl LanguageRegistry {
    pub fn new(codes: &[LanguageCode]) -> Result<Self, CorpusError> {
        let mut reg = LanguageRegistry::default();
        for c in codes {
            reg.register(c.clone())?;
        }
        Ok(reg)
    }

    pub fn register(&mut self, code: LanguageCode) -> Result<(), CorpusError> {
        if self.codes.contains(&code) {
            return Err(CorpusError::DuplicateLanguageCode(code.0));
        }
        self.codes.push(code);
        Ok(())
    }

    pub fn contains(&self, code: &LanguageCode) -> bool {
        self.codes.contains(code)
    }

    pub fn codes(&self) -> &[LanguageCode] {
        &self.codes
    }

    /// Language code owning `token` under the `<code>_` prefix convention,
    /// if the part before the first underscore is a registered code.
    pub fn prefix_of(&self, token: &str) -> Option<&LanguageCode> {
        let head = token.split('_').next()?;
        if head.len() == token.len() {
            return None; // no underscore at all
        }
        self.codes.iter().find(|c| c.as_str() == head)
    }
}

/// One aligned sentence pair together with its language pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub src_lang: LanguageCode,
    pub tgt_lang: LanguageCode,
}

/// An ordered collection of sentence pairs. A corpus may be a single
/// direction or a mixture; per-pair languages are always authoritative.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub provenance: String,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, provenance: impl Into<String>) -> Self {
        ParallelCorpus {
            pairs,
            provenance: provenance.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Corpus with source and target sides swapped.
    pub fn reversed(&self, provenance: impl Into<String>) -> Self {
        let pairs = self
            .pairs
            .iter()
            .map(|p| SentencePair {
                source: p.target.clone(),
                target: p.source.clone(),
                src_lang: p.tgt_lang.clone(),
                tgt_lang: p.src_lang.clone(),
            })
            .collect();
        ParallelCorpus::new(pairs, provenance)
    }
}

/// A translation direction, used as the key for mixture parts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Direction {
    pub src: LanguageCode,
    pub tgt: LanguageCode,
}

impl Direction {
    pub fn new(src: LanguageCode, tgt: LanguageCode) -> Self {
        Direction { src, tgt }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

/// Which training mixture to build from the per-direction corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureStrategy {
    Direct,
    Zero2L,
    Zero4L,
    Zero6L,
    /// The six Zero6L corpora plus the two synthetic directions produced by
    /// back-translation, eight parts in total.
    BackTransAugmented,
}

impl MixtureStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            MixtureStrategy::Direct => "direct",
            MixtureStrategy::Zero2L => "zero2l",
            MixtureStrategy::Zero4L => "zero4l",
            MixtureStrategy::Zero6L => "zero6l",
            MixtureStrategy::BackTransAugmented => "backtrans",
        }
    }

    /// The directions this strategy concatenates, in mixture order.
    pub fn required_directions(&self, roles: &MixtureRoles) -> Vec<Direction> {
        let d = |a: &LanguageCode, b: &LanguageCode| Direction::new(a.clone(), b.clone());
        let MixtureRoles { src, pvt, tgt } = roles;
        match self {
            MixtureStrategy::Direct => vec![d(src, tgt)],
            MixtureStrategy::Zero2L => vec![d(src, pvt), d(pvt, tgt)],
            MixtureStrategy::Zero4L => {
                vec![d(src, pvt), d(pvt, tgt), d(pvt, src), d(tgt, pvt)]
            }
            MixtureStrategy::Zero6L => vec![
                d(src, pvt),
                d(pvt, tgt),
                d(pvt, src),
                d(tgt, pvt),
                d(pvt, pvt),
                d(tgt, tgt),
            ],
            MixtureStrategy::BackTransAugmented => vec![
                d(src, pvt),
                d(pvt, tgt),
                d(pvt, src),
                d(tgt, pvt),
                d(pvt, pvt),
                d(tgt, tgt),
                d(src, tgt),
                d(tgt, src),
            ],
        }
    }
}

/// Which language plays which role in a zero-shot setup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixtureRoles {
    pub src: LanguageCode,
    pub pvt: LanguageCode,
    pub tgt: LanguageCode,
}

/// Result of loading a parallel file pair: the corpus plus the number of
/// pairs dropped because one side was empty.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub corpus: ParallelCorpus,
    pub dropped_empty: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let bytes = std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut raw: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if raw.last().is_some_and(|l| l.is_empty()) {
        raw.pop(); // trailing newline
    }
    raw.iter()
        .enumerate()
        .map(|(i, l)| {
            std::str::from_utf8(l)
                .map(|s| s.to_string())
                .map_err(|_| CorpusError::InvalidUtf8 {
                    path: path.display().to_string(),
                    line: i + 1,
                })
        })
        .collect()
}

/// Load a line-aligned parallel file pair. Pair `i` joins line `i` of each
/// file; pairs with an empty side are dropped and counted.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_lang: LanguageCode,
    tgt_lang: LanguageCode,
) -> Result<Loaded, CorpusError> {
    let src_lines = read_lines(src_path)?;
    let tgt_lines = read_lines(tgt_path)?;
    if src_lines.len() != tgt_lines.len() {
        return Err(CorpusError::LineCountMismatch {
            src_path: src_path.display().to_string(),
            src_lines: src_lines.len(),
            tgt_path: tgt_path.display().to_string(),
            tgt_lines: tgt_lines.len(),
        });
    }
    let mut pairs = Vec::new();
    let mut dropped = 0usize;
    for (s, t) in src_lines.iter().zip(tgt_lines.iter()) {
        let source: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        let target: Vec<String> = t.split_whitespace().map(str::to_string).collect();
        if source.is_empty() || target.is_empty() {
            dropped += 1;
            continue;
        }
        pairs.push(SentencePair {
            source,
            target,
            src_lang: src_lang.clone(),
            tgt_lang: tgt_lang.clone(),
        });
    }
    let provenance = format!("{}-{} ({})", src_lang, tgt_lang, src_path.display());
    Ok(Loaded {
        corpus: ParallelCorpus::new(pairs, provenance),
        dropped_empty: dropped,
    })
}

/// Keep only pairs whose sides are both at most `max_len` tokens long.
/// The bound is inclusive: a 50-token sentence survives `max_len = 50`.
pub fn length_filter(corpus: &ParallelCorpus, max_len: usize) -> ParallelCorpus {
    assert!(max_len >= 1, "max_len must be at least 1");
    let pairs = corpus
        .pairs
        .iter()
        .filter(|p| p.source.len() <= max_len && p.target.len() <= max_len)
        .cloned()
        .collect();
    ParallelCorpus::new(pairs, corpus.provenance.clone())
}

/// Concatenate the per-direction corpora a strategy requires into a single
/// mixture. Parts are appended in the strategy's fixed direction order, so
/// the result is deterministic; shuffling happens later in `batch_iter`.
pub fn build_mixture(
    parts: &BTreeMap<Direction, ParallelCorpus>,
    strategy: MixtureStrategy,
    roles: &MixtureRoles,
) -> Result<ParallelCorpus, CorpusError> {
    let mut pairs = Vec::new();
    for dir in strategy.required_directions(roles) {
        let part = parts
            .get(&dir)
            .ok_or_else(|| CorpusError::MissingDirection {
                strategy: strategy.name().to_string(),
                direction: dir.to_string(),
            })?;
        pairs.extend(part.pairs.iter().cloned());
    }
    Ok(ParallelCorpus::new(
        pairs,
        format!("{} mixture", strategy.name()),
    ))
}

/// Deterministic minibatch schedule: a seeded permutation of the corpus cut
/// into consecutive batches (last one may be short), each batch shuffled
/// again with the same stream. Returns index batches into `corpus.pairs`.
///
/// The corpus-level and within-batch shuffles are both applied because the
/// source material is ambiguous about which is meant; either way every pair
/// appears exactly once per call.
pub fn batch_iter(corpus: &ParallelCorpus, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    batch_indices(corpus.len(), batch_size, seed)
}

/// The index schedule behind `batch_iter`, usable for any slice that
/// parallels the corpus order.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order
        .chunks(batch_size)
        .map(|chunk| chunk.to_vec())
        .collect();
    for batch in &mut batches {
        batch.shuffle(&mut rng);
    }
    batches
}

/// Specification of a family of synthetic languages that translate into one
/// another token for token through a shared concept space.
///
/// Concept `c` surfaces as `<code><c>` in each language (for example
/// concept 5 is `aa5` in language `aa` and `bb5` in language `bb`), so the
/// alphabets of distinct languages are disjoint by construction and the
/// reference translation of any sentence is exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub languages: Vec<LanguageCode>,
    pub concepts: usize,
    /// Inclusive `[min, max]` sentence length range.
    pub sentence_len: [usize; 2],
    pub pairs_per_direction: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.languages.is_empty() {
            return Err(CorpusError::InvalidSyntheticSpec(
                "languages must be nonempty".into(),
            ));
        }
        for (i, a) in self.languages.iter().enumerate() {
            for b in &self.languages[i + 1..] {
                if a == b {
                    return Err(CorpusError::OverlappingAlphabets(format!(
                        "language {a} listed twice"
                    )));
                }
            }
        }
        if self.concepts == 0 {
            return Err(CorpusError::InvalidSyntheticSpec("concepts must be > 0".into()));
        }
        let [lo, hi] = self.sentence_len;
        if lo == 0 || lo > hi {
            return Err(CorpusError::InvalidSyntheticSpec(format!(
                "bad sentence_len range [{lo}, {hi}]"
            )));
        }
        if self.pairs_per_direction == 0 {
            return Err(CorpusError::InvalidSyntheticSpec(
                "pairs_per_direction must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn render_token(&self, lang: &LanguageCode, concept: usize) -> String {
        format!("{}{}", lang, concept)
    }

    /// Concept id of a surface token, if it belongs to `lang`.
    pub fn parse_token(&self, lang: &LanguageCode, token: &str) -> Option<usize> {
        let rest = token.strip_prefix(lang.as_str())?;
        let concept: usize = rest.parse().ok()?;
        (concept < self.concepts).then_some(concept)
    }

    /// The exact reference translation: map each token through the concept
    /// space. Tokens not in `from`'s alphabet pass through unchanged.
    pub fn translate_sentence(
        &self,
        tokens: &[String],
        from: &LanguageCode,
        to: &LanguageCode,
    ) -> Vec<String> {
        tokens
            .iter()
            .map(|t| match self.parse_token(from, t) {
                Some(c) => self.render_token(to, c),
                None => t.clone(),
            })
            .collect()
    }
}

fn direction_seed(base: u64, dir: &Direction) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for b in dir.to_string().bytes() {
        h = h.wrapping_mul(0x100_0000_01b3).wrapping_add(b as u64);
    }
    h
}

/// Generate every ordered direction (including the identity directions used
/// as autoencoding corpora) for the languages of `spec`. Deterministic in
/// `spec.seed`; each direction draws from its own seeded stream so corpora
/// do not shift when others are regenerated.
pub fn synth_corpus(spec: &SyntheticSpec) -> Result<BTreeMap<Direction, ParallelCorpus>, CorpusError> {
    spec.validate()?;
    let mut out = BTreeMap::new();
    for src in &spec.languages {
        for tgt in &spec.languages {
            let dir = Direction::new(src.clone(), tgt.clone());
            let mut rng = ChaCha8Rng::seed_from_u64(direction_seed(spec.seed, &dir));
            let [lo, hi] = spec.sentence_len;
            let mut pairs = Vec::with_capacity(spec.pairs_per_direction);
            for _ in 0..spec.pairs_per_direction {
                let len = rng.random_range(lo..=hi);
                let concepts: Vec<usize> =
                    (0..len).map(|_| rng.random_range(0..spec.concepts)).collect();
                let source: Vec<String> =
                    concepts.iter().map(|&c| spec.render_token(src, c)).collect();
                let target: Vec<String> =
                    concepts.iter().map(|&c| spec.render_token(tgt, c)).collect();
                pairs.push(SentencePair {
                    source,
                    target,
                    src_lang: src.clone(),
                    tgt_lang: tgt.clone(),
                });
            }
            let provenance = format!("synthetic {dir}");
            out.insert(dir, ParallelCorpus::new(pairs, provenance));
        }
    }
    Ok(out)
}
