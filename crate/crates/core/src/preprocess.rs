//! The multilingual preprocessing schemes and their inverses.
//!
//! Three schemes are supported: language coding of every word plus target
//! forcing tokens, a single target token prepended to the source, and
//! per-word language factors. Coding and forcing are part of the external
//! text contract: prefixes use a single underscore (`de_Lage`), forcing
//! tokens use angle brackets (`<en>`), the target-token scheme uses `2en`,
//! and the pseudo start word for language `en` is `en__`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LanguageCode, LanguageRegistry};
use crate::subword;

#[derive(Debug, Error)]
pub enum PreprocError {
    #[error("token {token:?} already carries the registered language prefix {prefix:?}")]
    AlreadyCoded { token: String, prefix: String },
    #[error("language code {0:?} is not registered")]
    UnregisteredLanguage(String),
    #[error("arity mismatch: {tokens} tokens but {langs} word languages")]
    ArityMismatch { tokens: usize, langs: usize },
}

/// Which preprocessing scheme a pipeline run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PreprocScheme {
    /// Language codes on every word plus repeated target forcing tokens.
    #[serde(rename = "langcoded")]
    LangCodedForced,
    /// A single target token prepended to the source sentence.
    #[serde(rename = "johnson")]
    TargetTokenOnly,
    /// Surfaces untouched; languages travel as word factors.
    Factored,
}

impl PreprocScheme {
    pub fn name(&self) -> &'static str {
        match self {
            PreprocScheme::LangCodedForced => "langcoded",
            PreprocScheme::TargetTokenOnly => "johnson",
            PreprocScheme::Factored => "factored",
        }
    }
}

/// A surface form with optional language annotations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedToken {
    pub surface: String,
    pub lang: Option<LanguageCode>,
    /// `(word_lang, tgt_lang)` in the factored scheme.
    pub factors: Option<(LanguageCode, LanguageCode)>,
}

impl TaggedToken {
    /// Pipe-delimited form `surface|word_lang|tgt_lang` used by factored
    /// text files.
    pub fn to_field(&self) -> String {
        match &self.factors {
            Some((wl, tl)) => format!("{}|{}|{}", self.surface, wl, tl),
            None => self.surface.clone(),
        }
    }

    pub fn from_field(field: &str, registry: &LanguageRegistry) -> Result<Self, PreprocError> {
        let parts: Vec<&str> = field.split('|').collect();
        if parts.len() == 3 {
            let wl = lookup(registry, parts[1])?;
            let tl = lookup(registry, parts[2])?;
            Ok(TaggedToken {
                surface: parts[0].to_string(),
                lang: Some(wl.clone()),
                factors: Some((wl, tl)),
            })
        } else {
            Ok(TaggedToken {
                surface: field.to_string(),
                lang: None,
                factors: None,
            })
        }
    }
}

fn lookup(registry: &LanguageRegistry, code: &str) -> Result<LanguageCode, PreprocError> {
    let lc = LanguageCode::new(code)
        .map_err(|_| PreprocError::UnregisteredLanguage(code.to_string()))?;
    if registry.contains(&lc) {
        Ok(lc)
    } else {
        Err(PreprocError::UnregisteredLanguage(code.to_string()))
    }
}

/// The target forcing token for a language, e.g. `<en>`.
pub fn forcing_token(lang: &LanguageCode) -> String {
    format!("<{lang}>")
}

pub fn is_forcing_token(token: &str, registry: &LanguageRegistry) -> bool {
    token
        .strip_prefix('<')
        .and_then(|t| t.strip_suffix('>'))
        .and_then(|code| LanguageCode::new(code).ok())
        .is_some_and(|lc| registry.contains(&lc))
}

/// The pseudo word that starts every target sentence in the language-coded
/// scheme, e.g. `en__`.
pub fn make_target_start(lang: &LanguageCode) -> String {
    format!("{lang}__")
}

pub fn is_target_start(token: &str, registry: &LanguageRegistry) -> bool {
    token
        .strip_suffix("__")
        .and_then(|code| LanguageCode::new(code).ok())
        .is_some_and(|lc| registry.contains(&lc))
}

/// The target token of the single-token scheme, e.g. `2en`.
pub fn johnson_token(lang: &LanguageCode) -> String {
    format!("2{lang}")
}

pub fn is_johnson_token(token: &str, registry: &LanguageRegistry) -> bool {
    token
        .strip_prefix('2')
        .and_then(|code| LanguageCode::new(code).ok())
        .is_some_and(|lc| registry.contains(&lc))
}

/// Prefix every token with `<lang>_`. Rejects tokens that already carry a
/// registered prefix, which guards against coding the same text twice.
pub fn apply_language_coding(
    tokens: &[String],
    lang: &LanguageCode,
    registry: &LanguageRegistry,
) -> Result<Vec<String>, PreprocError> {
    if !registry.contains(lang) {
        return Err(PreprocError::UnregisteredLanguage(lang.to_string()));
    }
    for t in tokens {
        if let Some(prefix) = registry.prefix_of(t) {
            return Err(PreprocError::AlreadyCoded {
                token: t.clone(),
                prefix: prefix.to_string(),
            });
        }
    }
    Ok(tokens.iter().map(|t| format!("{lang}_{t}")).collect())
}

/// Insert the forcing token `<tgt>` `repeat` times at the start and, when
/// `both_ends` is set, `repeat` times at the end.
pub fn apply_target_forcing(
    tokens: &[String],
    tgt: &LanguageCode,
    repeat: usize,
    both_ends: bool,
) -> Vec<String> {
    assert!(repeat >= 1, "repeat must be at least 1");
    let tok = forcing_token(tgt);
    let mut out = Vec::with_capacity(tokens.len() + repeat * (1 + both_ends as usize));
    out.extend(std::iter::repeat_n(tok.clone(), repeat));
    out.extend(tokens.iter().cloned());
    if both_ends {
        out.extend(std::iter::repeat_n(tok, repeat));
    }
    out
}

/// Prepend the single target token `2<tgt>`; words stay unprefixed.
pub fn apply_johnson(tokens: &[String], tgt: &LanguageCode) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.push(johnson_token(tgt));
    out.extend(tokens.iter().cloned());
    out
}

/// Attach `(word_lang, tgt_lang)` factors to every token; surfaces are
/// never altered. Target-side text is annotated with `(tgt, tgt)`.
pub fn annotate_factors(
    tokens: &[String],
    word_lang: &LanguageCode,
    tgt_lang: &LanguageCode,
    registry: &LanguageRegistry,
) -> Result<Vec<TaggedToken>, PreprocError> {
    let langs = vec![word_lang.clone(); tokens.len()];
    annotate_factors_per_token(tokens, &langs, tgt_lang, registry)
}

/// As `annotate_factors`, but with a per-token word language, which lets a
/// caller encode code-switched input.
pub fn annotate_factors_per_token(
    tokens: &[String],
    word_langs: &[LanguageCode],
    tgt_lang: &LanguageCode,
    registry: &LanguageRegistry,
) -> Result<Vec<TaggedToken>, PreprocError> {
    if tokens.len() != word_langs.len() {
        return Err(PreprocError::ArityMismatch {
            tokens: tokens.len(),
            langs: word_langs.len(),
        });
    }
    if !registry.contains(tgt_lang) {
        return Err(PreprocError::UnregisteredLanguage(tgt_lang.to_string()));
    }
    for wl in word_langs {
        if !registry.contains(wl) {
            return Err(PreprocError::UnregisteredLanguage(wl.to_string()));
        }
    }
    Ok(tokens
        .iter()
        .zip(word_langs)
        .map(|(t, wl)| TaggedToken {
            surface: t.clone(),
            lang: Some(wl.clone()),
            factors: Some((wl.clone(), tgt_lang.clone())),
        })
        .collect())
}

/// Result of stripping scheme artifacts from decoded text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Postprocessed {
    pub tokens: Vec<String>,
    /// Tokens that carried no recognizable language prefix in the
    /// language-coded scheme; they pass through unchanged.
    pub unknown_prefixes: usize,
    pub dangling_markers: usize,
}

/// Strip scheme artifacts (language prefixes, pseudo start words, forcing
/// and target tokens) and then undo the subword segmentation.
pub fn postprocess(
    tokens: &[String],
    scheme: PreprocScheme,
    registry: &LanguageRegistry,
) -> Postprocessed {
    let mut unknown = 0usize;
    let stripped: Vec<String> = match scheme {
        PreprocScheme::LangCodedForced => tokens
            .iter()
            .filter(|t| !is_forcing_token(t, registry) && !is_target_start(t, registry))
            .map(|t| match registry.prefix_of(t) {
                Some(code) => t[code.as_str().len() + 1..].to_string(),
                None => {
                    unknown += 1;
                    t.clone()
                }
            })
            .collect(),
        PreprocScheme::TargetTokenOnly => {
            let mut rest: &[String] = tokens;
            while let Some(first) = rest.first() {
                if is_johnson_token(first, registry) {
                    rest = &rest[1..];
                } else {
                    break;
                }
            }
            rest.to_vec()
        }
        PreprocScheme::Factored => {
            let mut rest: &[String] = tokens;
            if rest.first().is_some_and(|t| is_target_start(t, registry)) {
                rest = &rest[1..];
            }
            rest.to_vec()
        }
    };
    let undone = subword::bpe_undo(&stripped);
    Postprocessed {
        tokens: undone.tokens,
        unknown_prefixes: unknown,
        dangling_markers: undone.dangling_markers,
    }
}
