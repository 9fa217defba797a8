//! Vocabularies, per-language entry partitions and target-dictionary
//! filter masks.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{LanguageCode, LanguageRegistry, ParallelCorpus};
use crate::preprocess::{self, PreprocScheme};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("filter for {lang} would allow no language entries")]
    EmptyFilter { lang: String },
    #[error("language {0} is not registered")]
    UnregisteredLanguage(String),
    #[error("scheme {0} needs a token occurrence map to partition entries")]
    OccurrenceMapRequired(&'static str),
    #[error("vocab file {path}: line {line}: {reason}")]
    Parse {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Dense entry-to-id mapping with the four specials reserved as ids 0..3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<String>) -> Self {
        let index = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        Vocabulary { entries, index }
    }

    /// Build from a token stream: entries with frequency >= `min_count`,
    /// ordered by descending frequency then lexicographically, after the
    /// specials.
    pub fn build<I, S>(tokens: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut freq: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            let t = t.as_ref();
            if SPECIALS.contains(&t) {
                continue;
            }
            *freq.entry(t.to_string()).or_insert(0) += 1;
        }
        let mut ordered: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(_, f)| *f >= min_count)
            .collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        entries.extend(ordered.into_iter().map(|(t, _)| t));
        Vocabulary::from_entries(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the specials are always present
    }

    /// Id of a token, falling back to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    /// One entry per line; the line number is the id.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(e);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_file_string()).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, VocabError> {
        let entries: Vec<String> = text.lines().map(str::to_string).collect();
        if entries.len() < SPECIALS.len() {
            return Err(VocabError::Parse {
                path: path.to_string(),
                line: 1,
                reason: "fewer lines than the four specials".into(),
            });
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if entries[i] != *s {
                return Err(VocabError::Parse {
                    path: path.to_string(),
                    line: i + 1,
                    reason: format!("expected special {s:?}, found {:?}", entries[i]),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for (i, e) in entries.iter().enumerate() {
            if !seen.insert(e) {
                return Err(VocabError::Parse {
                    path: path.to_string(),
                    line: i + 1,
                    reason: format!("duplicate entry {e:?}"),
                });
            }
        }
        Ok(Vocabulary::from_entries(entries))
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Word vocabulary plus the language-factor vocabulary of a factored model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactoredVocabulary {
    pub word: Vocabulary,
    pub factor_langs: Vocabulary,
}

impl FactoredVocabulary {
    pub fn build<I, S>(surfaces: I, registry: &LanguageRegistry, min_count: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let word = Vocabulary::build(surfaces, min_count);
        let mut entries: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        entries.extend(registry.codes().iter().map(|c| c.to_string()));
        FactoredVocabulary {
            word,
            factor_langs: Vocabulary::from_entries(entries),
        }
    }
}

/// Disjoint assignment of entry ids to languages; everything unassigned is
/// neutral (specials, forcing tokens, pseudo starts, shared surfaces).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LanguagePartition {
    pub by_lang: BTreeMap<LanguageCode, BTreeSet<usize>>,
    pub neutral: BTreeSet<usize>,
    /// Non-structural tokens that could not be assigned a language in
    /// prefix mode.
    pub unassigned_warnings: usize,
}

impl LanguagePartition {
    pub fn lang_of(&self, id: usize) -> Option<&LanguageCode> {
        self.by_lang
            .iter()
            .find_map(|(lang, ids)| ids.contains(&id).then_some(lang))
    }
}

/// A token-to-languages occurrence map collected from training corpora:
/// each token maps to the set of languages whose sentences contained it.
pub type OccurrenceMap = BTreeMap<String, BTreeSet<LanguageCode>>;

pub fn occurrence_map(corpus: &ParallelCorpus) -> OccurrenceMap {
    let mut map = OccurrenceMap::new();
    for p in &corpus.pairs {
        for t in &p.source {
            map.entry(t.clone()).or_default().insert(p.src_lang.clone());
        }
        for t in &p.target {
            map.entry(t.clone()).or_default().insert(p.tgt_lang.clone());
        }
    }
    map
}

/// Partition vocabulary entries by language.
///
/// In the language-coded scheme the `<code>_` prefix decides ownership and
/// no occurrence map is needed; forcing tokens, pseudo starts and specials
/// stay neutral. The other schemes have bare surfaces, so an entry belongs
/// to a language exactly when it only ever occurred in that language's
/// sentences.
pub fn language_partition(
    vocab: &Vocabulary,
    scheme: PreprocScheme,
    registry: &LanguageRegistry,
    occurrence: Option<&OccurrenceMap>,
) -> Result<LanguagePartition, VocabError> {
    let mut by_lang: BTreeMap<LanguageCode, BTreeSet<usize>> = registry
        .codes()
        .iter()
        .map(|c| (c.clone(), BTreeSet::new()))
        .collect();
    let mut neutral = BTreeSet::new();
    let mut warnings = 0usize;

    let occurrence = match scheme {
        PreprocScheme::LangCodedForced => None,
        PreprocScheme::TargetTokenOnly | PreprocScheme::Factored => Some(
            occurrence.ok_or(VocabError::OccurrenceMapRequired(scheme.name()))?,
        ),
    };

    for (id, entry) in vocab.entries().iter().enumerate() {
        if Vocabulary::is_special(id)
            || preprocess::is_forcing_token(entry, registry)
            || preprocess::is_target_start(entry, registry)
            || preprocess::is_johnson_token(entry, registry)
        {
            neutral.insert(id);
            continue;
        }
        match occurrence {
            None => match registry.prefix_of(entry) {
                Some(code) => {
                    by_lang.get_mut(&code.clone()).unwrap().insert(id);
                }
                None => {
                    warnings += 1;
                    neutral.insert(id);
                }
            },
            Some(map) => match map.get(entry) {
                Some(langs) if langs.len() == 1 => {
                    let code = langs.iter().next().unwrap();
                    if let Some(ids) = by_lang.get_mut(code) {
                        ids.insert(id);
                    } else {
                        neutral.insert(id);
                    }
                }
                _ => {
                    neutral.insert(id);
                }
            },
        }
    }
    Ok(LanguagePartition {
        by_lang,
        neutral,
        unassigned_warnings: warnings,
    })
}

/// Boolean mask over vocabulary ids for decoding into one target language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterMask {
    pub lang: LanguageCode,
    allowed: Vec<bool>,
}

impl FilterMask {
    pub fn allows(&self, id: usize) -> bool {
        self.allowed.get(id).copied().unwrap_or(false)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }
}

/// Mask allowing exactly the target language's entries, the specials and
/// the target's pseudo start word. `<unk>` passes every mask because it is
/// language-neutral; entries of other languages and neutral non-special
/// entries are blocked.
pub fn filter_mask(
    vocab: &Vocabulary,
    partition: &LanguagePartition,
    tgt: &LanguageCode,
    registry: &LanguageRegistry,
) -> Result<FilterMask, VocabError> {
    if !registry.contains(tgt) {
        return Err(VocabError::UnregisteredLanguage(tgt.to_string()));
    }
    let owned = partition
        .by_lang
        .get(tgt)
        .ok_or_else(|| VocabError::UnregisteredLanguage(tgt.to_string()))?;
    if owned.is_empty() {
        return Err(VocabError::EmptyFilter {
            lang: tgt.to_string(),
        });
    }
    let pseudo = preprocess::make_target_start(tgt);
    let mut allowed = vec![false; vocab.len()];
    for id in 0..vocab.len() {
        allowed[id] = Vocabulary::is_special(id)
            || owned.contains(&id)
            || vocab.token(id) == pseudo;
    }
    Ok(FilterMask {
        lang: tgt.clone(),
        allowed,
    })
}
