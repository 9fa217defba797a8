//! Byte-pair encoding: learn merge operations from a token stream and
//! apply or undo the segmentation.
//!
//! Sub-units use a continuation-marker convention: every non-final unit of
//! a word carries a `@@` suffix, so undoing a segmentation is plain local
//! concatenation. Merge rules store the marker-suffixed forms, which makes
//! word-internal and word-final merges distinct rules.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const DEFAULT_MARKER: &str = "@@";

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("merges file {path}: bad header {header:?}")]
    BadHeader { path: String, header: String },
    #[error("merges file {path}: line {line} is not `LEFT RIGHT`")]
    BadMergeLine { path: String, line: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// An ordered list of merge operations; position is priority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    pub merges: Vec<(String, String)>,
    pub marker: String,
}

fn split_to_units(word: &str, marker: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 < n {
                format!("{c}{marker}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn join_units(left: &str, right: &str, marker: &str) -> String {
    let stem = left.strip_suffix(marker).unwrap_or(left);
    format!("{stem}{right}")
}

/// Merge all non-overlapping occurrences of (left, right), left to right.
fn apply_merge(units: &mut Vec<String>, left: &str, right: &str, joined: &str) {
    let mut i = 0;
    while i + 1 < units.len() {
        if units[i] == left && units[i + 1] == right {
            units[i] = joined.to_string();
            units.remove(i + 1);
        }
        i += 1;
    }
}

/// Learn up to `n_merges` merge operations by greedy most-frequent-pair
/// merging over word-internal unit sequences. Ties between equally frequent
/// pairs go to the lexicographically smallest pair; training stops early
/// when no pair occurs at least twice.
pub fn bpe_train<I, S>(tokens: I, n_merges: usize) -> BpeModel
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let marker = DEFAULT_MARKER.to_string();
    let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
    for t in tokens {
        *word_freq.entry(t.as_ref().to_string()).or_insert(0) += 1;
    }
    let mut words: Vec<(Vec<String>, usize)> = word_freq
        .into_iter()
        .map(|(w, f)| (split_to_units(&w, &marker), f))
        .collect();

    let mut merges: Vec<(String, String)> = Vec::new();
    for _ in 0..n_merges {
        let mut pair_freq: BTreeMap<(String, String), usize> = BTreeMap::new();
        for (units, f) in &words {
            for w in units.windows(2) {
                *pair_freq
                    .entry((w[0].clone(), w[1].clone()))
                    .or_insert(0) += f;
            }
        }
        // BTreeMap iterates in pair order, so strictly-greater keeps the
        // lexicographically smallest pair among ties.
        let best = pair_freq
            .into_iter()
            .fold(None::<((String, String), usize)>, |acc, (pair, f)| {
                match &acc {
                    Some((_, bf)) if *bf >= f => acc,
                    _ => Some((pair, f)),
                }
            });
        let Some(((left, right), freq)) = best else {
            break;
        };
        if freq < 2 {
            break;
        }
        let joined = join_units(&left, &right, &marker);
        for (units, _) in &mut words {
            apply_merge(units, &left, &right, &joined);
        }
        debug_assert!(!merges.contains(&(left.clone(), right.clone())));
        merges.push((left, right));
    }
    BpeModel { merges, marker }
}

/// Result of undoing a segmentation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeUndo {
    pub tokens: Vec<String>,
    /// Number of marker-suffixed units with no successor to join; such
    /// units are kept verbatim.
    pub dangling_markers: usize,
}

impl BpeModel {
    pub fn new(merges: Vec<(String, String)>) -> Self {
        BpeModel {
            merges,
            marker: DEFAULT_MARKER.to_string(),
        }
    }

    /// Segment each token: split to characters, then apply the merge list
    /// in priority order. Unknown characters pass through as singletons.
    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        for word in tokens {
            let mut units = split_to_units(word, &self.marker);
            for (left, right) in &self.merges {
                if units.len() < 2 {
                    break;
                }
                let joined = join_units(left, right, &self.marker);
                apply_merge(&mut units, left, right, &joined);
            }
            out.extend(units);
        }
        out
    }

    pub fn undo(&self, tokens: &[String]) -> BpeUndo {
        undo_with_marker(tokens, &self.marker)
    }

    pub fn to_file_string(&self) -> String {
        let mut s = format!("#desk-bpe v1 marker={}\n", self.marker);
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<(), SubwordError> {
        std::fs::write(path, self.to_file_string()).map_err(|source| SubwordError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn parse(text: &str, path: &str) -> Result<Self, SubwordError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        let marker = header
            .strip_prefix("#desk-bpe v1 marker=")
            .filter(|m| !m.is_empty())
            .ok_or_else(|| SubwordError::BadHeader {
                path: path.to_string(),
                header: header.to_string(),
            })?;
        let mut merges = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut it = line.split(' ');
            match (it.next(), it.next(), it.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    merges.push((l.to_string(), r.to_string()));
                }
                _ => {
                    return Err(SubwordError::BadMergeLine {
                        path: path.to_string(),
                        line: i + 2,
                    })
                }
            }
        }
        Ok(BpeModel {
            merges,
            marker: marker.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SubwordError> {
        let text = std::fs::read_to_string(path).map_err(|source| SubwordError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string())
    }
}

fn undo_with_marker(tokens: &[String], marker: &str) -> BpeUndo {
    let mut out = Vec::new();
    let mut dangling = 0usize;
    let mut acc = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let is_last = i + 1 == tokens.len();
        match t.strip_suffix(marker) {
            Some(stem) if !is_last => acc.push_str(stem),
            Some(_) => {
                // final token still carrying the marker
                acc.push_str(t);
                out.push(std::mem::take(&mut acc));
                dangling += 1;
            }
            None => {
                acc.push_str(t);
                out.push(std::mem::take(&mut acc));
            }
        }
    }
    BpeUndo {
        tokens: out,
        dangling_markers: dangling,
    }
}

/// Undo a segmentation produced with the default `@@` marker.
pub fn bpe_undo(tokens: &[String]) -> BpeUndo {
    undo_with_marker(tokens, DEFAULT_MARKER)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn zero_merges_splits_to_characters() {
        let model = bpe_train(toks("low low lower"), 0);
        assert!(model.merges.is_empty());
        assert_eq!(model.apply(&toks("low")), toks("l@@ o@@ w"));
    }

    #[test]
    fn hand_traced_merge_order_on_low_corpus() {
        // Pair counts over {low x2, lower x1}:
        //   (l@@,o@@) = 3   <- merge 1 -> lo@@
        //   (o@@,w)   = 2   (from `low` only)
        //   (o@@,w@@) = 1, (w@@,e@@) = 1, (e@@,r) = 1
        // After merge 1: (lo@@,w) = 2 <- merge 2 -> low
        let model = bpe_train(toks("low low lower"), 2);
        assert_eq!(
            model.merges,
            vec![
                ("l@@".to_string(), "o@@".to_string()),
                ("lo@@".to_string(), "w".to_string()),
            ]
        );
        // A third merge is unavailable: every remaining pair has frequency 1.
        let model3 = bpe_train(toks("low low lower"), 3);
        assert_eq!(model3.merges.len(), 2);
    }

    #[test]
    fn train_is_deterministic() {
        let a = bpe_train(toks("ab ab abc bc bc cab"), 5);
        let b = bpe_train(toks("ab ab abc bc bc cab"), 5);
        assert_eq!(a, b);
    }

    #[test]
    fn fully_merged_word_is_one_unit() {
        let model = bpe_train(toks("low low lower"), 2);
        assert_eq!(model.apply(&toks("low")), toks("low"));
    }

    #[test]
    fn unseen_word_follows_merge_trace() {
        // With merges [l@@+o@@, lo@@+w], `lowest` becomes
        // l@@ o@@ w@@ e@@ s@@ t -> lo@@ w@@ e@@ s@@ t; the second merge
        // does not fire because w@@ is not word-final `w`.
        let model = bpe_train(toks("low low lower"), 2);
        assert_eq!(model.apply(&toks("lowest")), toks("lo@@ w@@ e@@ s@@ t"));
    }

    #[test]
    fn apply_on_empty_is_empty() {
        let model = bpe_train(toks("ab ab"), 1);
        assert!(model.apply(&[]).is_empty());
    }

    #[test]
    fn undo_definition_and_dangling() {
        let undone = bpe_undo(&toks("ab@@ cd"));
        assert_eq!(undone.tokens, toks("abcd"));
        assert_eq!(undone.dangling_markers, 0);

        let dangling = bpe_undo(&toks("x@@"));
        assert_eq!(dangling.tokens, toks("x@@"));
        assert_eq!(dangling.dangling_markers, 1);
    }

    #[test]
    fn unit_count_bounded_by_chars_plus_merges() {
        let corpus = "aba abab baba abba bab abb aab";
        for n in [0usize, 1, 3, 8, 20] {
            let model = bpe_train(toks(corpus), n);
            let mut units = std::collections::BTreeSet::new();
            for t in toks(corpus) {
                units.extend(model.apply(&[t]));
            }
            let chars: std::collections::BTreeSet<char> = corpus
                .chars()
                .filter(|c| !c.is_whitespace())
                .collect();
            // Every observed unit is either a raw (possibly marked) char or
            // the output of a merge.
            assert!(units.len() <= 2 * chars.len() + model.merges.len());
        }
    }

    #[test]
    fn merges_file_round_trip() {
        let model = bpe_train(toks("low low lower lowest newest"), 6);
        let text = model.to_file_string();
        assert!(text.starts_with("#desk-bpe v1 marker=@@\n"));
        let parsed = BpeModel::parse(&text, "mem").unwrap();
        assert_eq!(parsed, model);
    }

    #[test]
    fn bad_header_and_bad_line_rejected() {
        assert!(matches!(
            BpeModel::parse("#other v9\n", "mem"),
            Err(SubwordError::BadHeader { .. })
        ));
        assert!(matches!(
            BpeModel::parse("#desk-bpe v1 marker=@@\nonlyone\n", "mem"),
            Err(SubwordError::BadMergeLine { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_identity(words in proptest::collection::vec("[a-e]{1,6}", 1..12), n_merges in 0usize..12) {
            let model = bpe_train(words.iter(), n_merges);
            let sentence: Vec<String> = words.clone();
            let segmented = model.apply(&sentence);
            let undone = model.undo(&segmented);
            prop_assert_eq!(undone.tokens, sentence);
            prop_assert_eq!(undone.dangling_markers, 0);
        }

        #[test]
        fn apply_is_per_token_local(words in proptest::collection::vec("[a-d]{1,5}", 2..8)) {
            // Segmenting a sentence equals concatenating per-token output.
            let model = bpe_train(words.iter(), 6);
            let whole = model.apply(&words);
            let mut parts = Vec::new();
            for w in &words {
                parts.extend(model.apply(std::slice::from_ref(w)));
            }
            prop_assert_eq!(whole, parts);
        }
    }
}
