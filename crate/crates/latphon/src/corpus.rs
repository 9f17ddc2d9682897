//! Pronunciation-dictionary ingestion: line parsing, IPA tokenization, and
//! deterministic train/validation/test splitting.
//!
//! Input files follow the ipa-dict convention: UTF-8, one record per line,
//! `word<TAB>/pron/` with optional extra pronunciations separated by `, `,
//! and `#`-prefixed comment lines.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;
use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;
use unicode_segmentation::UnicodeSegmentation;

/// Primary stress mark (kept as a standalone token when `keep_stress`).
pub const STRESS_PRIMARY: char = '\u{02C8}';
/// Secondary stress mark.
pub const STRESS_SECONDARY: char = '\u{02CC}';
/// Length mark; merges into the preceding token.
pub const LENGTH_MARK: char = '\u{02D0}';
/// Combining double inverted breve (tie bar above, as in t͡ʃ).
pub const TIE_ABOVE: char = '\u{0361}';
/// Combining double breve below (tie bar below).
pub const TIE_BELOW: char = '\u{035C}';

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed line{}: {reason}", fmt_line_no(.line_no))]
    MalformedLine { line_no: Option<usize>, reason: String },
    #[error("pronunciation empty after normalization")]
    EmptyAfterNormalization,
    #[error("insufficient data for {lang}: {unique_words} unique words, need at least {min}")]
    InsufficientData { lang: LanguageId, unique_words: usize, min: usize },
    #[error("unknown language code {0:?}")]
    UnknownLanguage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_line_no(n: &Option<usize>) -> String {
    match n {
        Some(n) => format!(" {n}"),
        None => String::new(),
    }
}

/// One of the six supported languages, in fixed alphabetical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageId {
    En,
    Es,
    Fr,
    It,
    Pt,
    Ro,
}

impl LanguageId {
    pub const ALL: [LanguageId; 6] = [
        LanguageId::En,
        LanguageId::Es,
        LanguageId::Fr,
        LanguageId::It,
        LanguageId::Pt,
        LanguageId::Ro,
    ];

    /// Stable integer index, 0..6, alphabetical by code.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<LanguageId> {
        Self::ALL.get(i).copied()
    }

    pub fn code(self) -> &'static str {
        match self {
            LanguageId::En => "en",
            LanguageId::Es => "es",
            LanguageId::Fr => "fr",
            LanguageId::It => "it",
            LanguageId::Pt => "pt",
            LanguageId::Ro => "ro",
        }
    }

    pub fn from_code(code: &str) -> Result<LanguageId, CorpusError> {
        Self::ALL
            .into_iter()
            .find(|l| l.code() == code)
            .ok_or_else(|| CorpusError::UnknownLanguage(code.to_string()))
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for LanguageId {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LanguageId::from_code(s)
    }
}

/// One (word, phoneme sequence, language) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordEntry {
    pub word: String,
    pub phonemes: Vec<String>,
    pub lang: LanguageId,
}

/// What to do with records that list several pronunciations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiPronRule {
    /// Keep only the first listed pronunciation (one target per word).
    First,
    /// Keep every pronunciation as its own entry.
    All,
}

impl fmt::Display for MultiPronRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MultiPronRule::First => "first",
            MultiPronRule::All => "all",
        })
    }
}

/// Cleaning policy applied to every pronunciation; recorded in every
/// artifact derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizationPolicy {
    /// Keep ˈ and ˌ as standalone phoneme tokens.
    pub keep_stress: bool,
    /// Combining marks that survive normalization; all others are dropped
    /// with a logged count.
    pub diacritic_allowlist: BTreeSet<char>,
    pub multi_pron_rule: MultiPronRule,
}

impl Default for NormalizationPolicy {
    fn default() -> Self {
        NormalizationPolicy {
            keep_stress: true,
            diacritic_allowlist: default_diacritic_allowlist(),
            multi_pron_rule: MultiPronRule::First,
        }
    }
}

/// Combining marks kept by default: nasalization, tie bars, syllabicity,
/// non-syllabicity, and voicelessness.
pub fn default_diacritic_allowlist() -> BTreeSet<char> {
    ['\u{0303}', TIE_ABOVE, TIE_BELOW, '\u{0329}', '\u{032F}', '\u{0325}']
        .into_iter()
        .collect()
}

/// Result of parsing one dictionary line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedLine {
    /// Entries produced by the record: one under `multi_pron_rule=first`,
    /// possibly several under `all`.
    Entries(Vec<WordEntry>),
    /// Comment or blank line.
    Skip,
}

/// Tokenize the text between the slash delimiters of a pronunciation into
/// phoneme tokens.
///
/// The text is NFC-normalized and segmented into extended grapheme
/// clusters, then: tie-bar pairs (t͡ʃ) merge into single tokens, the length
/// mark ː merges into the preceding token, and combining marks such as
/// nasalization stay attached to their base. Stress marks are standalone
/// tokens when `keep_stress`, otherwise dropped. Combining marks outside
/// the allowlist, whitespace, and delimiter characters are dropped with a
/// logged count.
pub fn tokenize_ipa(pron: &str, policy: &NormalizationPolicy) -> Result<Vec<String>, CorpusError> {
    let norm: String = pron.nfc().collect();
    let mut tokens: Vec<String> = Vec::new();
    let mut dropped = 0usize;
    let mut tie_pending = false;
    for cluster in norm.graphemes(true) {
        let mut tok = String::new();
        let mut has_tie = false;
        for c in cluster.chars() {
            if c == TIE_ABOVE || c == TIE_BELOW {
                if policy.diacritic_allowlist.contains(&c) {
                    tok.push(c);
                    has_tie = true;
                } else {
                    dropped += 1;
                }
            } else if is_combining_mark(c) {
                if policy.diacritic_allowlist.contains(&c) {
                    tok.push(c);
                } else {
                    dropped += 1;
                }
            } else if c.is_whitespace()
                || c.is_control()
                || c == '/'
                || c == ','
                || ((c == STRESS_PRIMARY || c == STRESS_SECONDARY) && !policy.keep_stress)
            {
                dropped += 1;
            } else {
                tok.push(c);
            }
        }
        if tok.is_empty() {
            continue;
        }
        if tie_pending {
            // Previous token ended with a tie bar: this cluster completes it.
            let last = tokens.last_mut().expect("tie_pending implies a token");
            last.push_str(&tok);
            tie_pending = has_tie;
            continue;
        }
        if tok.chars().all(|c| c == LENGTH_MARK) {
            match tokens.last_mut() {
                Some(last) => last.push_str(&tok),
                None => tokens.push(tok),
            }
            continue;
        }
        tokens.push(tok);
        tie_pending = has_tie;
    }
    if dropped > 0 {
        log::debug!("tokenize_ipa dropped {dropped} characters from {pron:?}");
    }
    if tokens.is_empty() {
        return Err(CorpusError::EmptyAfterNormalization);
    }
    Ok(tokens)
}

/// Parse one line of an ipa-dict file.
///
/// Comment (`#`) and blank lines yield [`ParsedLine::Skip`]. The word is
/// lowercased; pronunciations are tokenized per [`tokenize_ipa`].
pub fn parse_ipadict_line(
    line: &str,
    lang: LanguageId,
    policy: &NormalizationPolicy,
) -> Result<ParsedLine, CorpusError> {
    let line = line.trim_end_matches(['\r', '\n']);
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(ParsedLine::Skip);
    }
    let malformed = |reason: &str| CorpusError::MalformedLine {
        line_no: None,
        reason: reason.to_string(),
    };
    let (word_raw, pron_raw) = line
        .split_once('\t')
        .ok_or_else(|| malformed("no tab separator"))?;
    let word = word_raw.trim().to_lowercase();
    if word.is_empty() {
        return Err(malformed("empty word field"));
    }
    let mut entries = Vec::new();
    for (i, part) in pron_raw.trim().split(", ").enumerate() {
        let inner = part
            .trim()
            .strip_prefix('/')
            .and_then(|s| s.strip_suffix('/'))
            .ok_or_else(|| malformed("pronunciation not delimited by slashes"))?;
        if i == 0 || policy.multi_pron_rule == MultiPronRule::All {
            entries.push(WordEntry {
                word: word.clone(),
                phonemes: tokenize_ipa(inner, policy)?,
                lang,
            });
        }
    }
    Ok(ParsedLine::Entries(entries))
}

/// Load one language's dictionary file.
///
/// Malformed or empty-after-normalization lines are skipped with a logged
/// count rather than aborting the whole file; I/O errors abort.
pub fn load_language_file(
    path: &Path,
    lang: LanguageId,
    policy: &NormalizationPolicy,
) -> Result<Vec<WordEntry>, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut entries = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        match parse_ipadict_line(&line, lang, policy) {
            Ok(ParsedLine::Entries(mut es)) => entries.append(&mut es),
            Ok(ParsedLine::Skip) => {}
            Err(e) => {
                skipped += 1;
                log::warn!("{}:{}: skipped: {e}", path.display(), i + 1);
            }
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} unusable lines", path.display());
    }
    Ok(entries)
}

/// Minimum unique words a language must have to be splittable.
pub const MIN_WORDS_PER_LANG: usize = 1_100;
/// Held-out set sizes, per language.
pub const VAL_SIZE: usize = 500;
pub const TEST_SIZE: usize = 500;

/// Per-language train/validation/test partition. Languages absent from the
/// input have empty lists in all three buckets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: [Vec<WordEntry>; 6],
    pub val: [Vec<WordEntry>; 6],
    pub test: [Vec<WordEntry>; 6],
    pub split_seed: u64,
    pub policy: NormalizationPolicy,
}

impl CorpusSplit {
    /// Languages with at least one entry in some bucket.
    pub fn langs(&self) -> Vec<LanguageId> {
        LanguageId::ALL
            .into_iter()
            .filter(|l| {
                let i = l.index();
                !self.train[i].is_empty() || !self.val[i].is_empty() || !self.test[i].is_empty()
            })
            .collect()
    }

    /// All train entries across languages, in language order.
    pub fn train_all(&self) -> Vec<WordEntry> {
        self.train.iter().flatten().cloned().collect()
    }

    /// Hex digest over the canonical manifest serialization; identifies a
    /// split exactly.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        write_manifest(self, &mut buf).expect("writing to Vec cannot fail");
        let mut h = Sha256::new();
        h.update(&buf);
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministically split entries into per-language train/val/test sets.
///
/// Entries are deduplicated on the case-folded word (first occurrence
/// wins). Each language is shuffled by a stream derived from `seed` and its
/// language index; the first 500 entries become test, the next 500 val, and
/// the rest train.
pub fn split_corpus(
    entries: Vec<WordEntry>,
    seed: u64,
    policy: &NormalizationPolicy,
) -> Result<CorpusSplit, CorpusError> {
    let mut by_lang: [Vec<WordEntry>; 6] = Default::default();
    let mut seen: [BTreeSet<String>; 6] = Default::default();
    for e in entries {
        let i = e.lang.index();
        if seen[i].insert(e.word.to_lowercase()) {
            by_lang[i].push(e);
        }
    }
    for lang in LanguageId::ALL {
        let n = by_lang[lang.index()].len();
        if n > 0 && n < MIN_WORDS_PER_LANG {
            return Err(CorpusError::InsufficientData {
                lang,
                unique_words: n,
                min: MIN_WORDS_PER_LANG,
            });
        }
    }
    let mut split = CorpusSplit {
        train: Default::default(),
        val: Default::default(),
        test: Default::default(),
        split_seed: seed,
        policy: policy.clone(),
    };
    for lang in LanguageId::ALL {
        let i = lang.index();
        let mut list = std::mem::take(&mut by_lang[i]);
        if list.is_empty() {
            continue;
        }
        let stream = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        list.shuffle(&mut rng);
        let mut rest = list.split_off(TEST_SIZE);
        split.test[i] = list;
        let train = rest.split_off(VAL_SIZE);
        split.val[i] = rest;
        split.train[i] = train;
    }
    Ok(split)
}

/// One row of the corpus counts table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsRow {
    pub lang: LanguageId,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Per-language (train, val, test) counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub rows: Vec<StatsRow>,
}

impl CorpusStats {
    /// Aligned text table: one row per language plus a totals row.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10}{:>10}{:>8}{:>8}\n", "Language", "Train", "Val", "Test"));
        let (mut t, mut v, mut s) = (0usize, 0usize, 0usize);
        for r in &self.rows {
            out.push_str(&format!("{:<10}{:>10}{:>8}{:>8}\n", r.lang.code(), r.train, r.val, r.test));
            t += r.train;
            v += r.val;
            s += r.test;
        }
        out.push_str(&format!("{:<10}{:>10}{:>8}{:>8}\n", "Total", t, v, s));
        out
    }
}

/// Count split entries per language, in the layout of the corpus table.
pub fn corpus_stats(split: &CorpusSplit) -> CorpusStats {
    let rows = split
        .langs()
        .into_iter()
        .map(|lang| {
            let i = lang.index();
            StatsRow {
                lang,
                train: split.train[i].len(),
                val: split.val[i].len(),
                test: split.test[i].len(),
            }
        })
        .collect();
    CorpusStats { rows }
}

const MANIFEST_HEADER: &str = "# latphon split manifest v1";

/// Serialize a split as a line-oriented manifest:
/// `lang<TAB>split<TAB>word<TAB>space-joined-phoneme-tokens`, preceded by
/// `#` header lines recording the seed and normalization policy.
pub fn write_manifest(split: &CorpusSplit, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "{MANIFEST_HEADER}")?;
    writeln!(w, "# split_seed = {}", split.split_seed)?;
    writeln!(w, "# keep_stress = {}", split.policy.keep_stress)?;
    writeln!(w, "# multi_pron_rule = {}", split.policy.multi_pron_rule)?;
    let marks: Vec<String> = split
        .policy
        .diacritic_allowlist
        .iter()
        .map(|c| format!("U+{:04X}", *c as u32))
        .collect();
    writeln!(w, "# diacritic_allowlist = {}", marks.join(" "))?;
    for lang in LanguageId::ALL {
        let i = lang.index();
        for (name, bucket) in [
            ("train", &split.train[i]),
            ("val", &split.val[i]),
            ("test", &split.test[i]),
        ] {
            for e in bucket {
                writeln!(w, "{}\t{}\t{}\t{}", lang.code(), name, e.word, e.phonemes.join(" "))?;
            }
        }
    }
    Ok(())
}

/// Parse a manifest produced by [`write_manifest`].
pub fn read_manifest(r: impl BufRead) -> Result<CorpusSplit, CorpusError> {
    let mut split = CorpusSplit {
        train: Default::default(),
        val: Default::default(),
        test: Default::default(),
        split_seed: 0,
        policy: NormalizationPolicy::default(),
    };
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        let line_no = Some(no + 1);
        let malformed = |reason: String| CorpusError::MalformedLine { line_no, reason };
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "split_seed" => {
                        split.split_seed =
                            v.parse().map_err(|_| malformed(format!("bad split_seed {v:?}")))?;
                    }
                    "keep_stress" => {
                        split.policy.keep_stress =
                            v.parse().map_err(|_| malformed(format!("bad keep_stress {v:?}")))?;
                    }
                    "multi_pron_rule" => {
                        split.policy.multi_pron_rule = match v {
                            "first" => MultiPronRule::First,
                            "all" => MultiPronRule::All,
                            _ => return Err(malformed(format!("bad multi_pron_rule {v:?}"))),
                        };
                    }
                    "diacritic_allowlist" => {
                        let mut set = BTreeSet::new();
                        for m in v.split_whitespace() {
                            let cp = m
                                .strip_prefix("U+")
                                .and_then(|h| u32::from_str_radix(h, 16).ok())
                                .and_then(char::from_u32)
                                .ok_or_else(|| malformed(format!("bad codepoint {m:?}")))?;
                            set.insert(cp);
                        }
                        split.policy.diacritic_allowlist = set;
                    }
                    _ => {}
                }
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (lang, bucket, word, toks) =
            match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
                _ => return Err(malformed("expected 4 tab-separated fields".to_string())),
            };
        let lang = LanguageId::from_code(lang)?;
        let entry = WordEntry {
            word: word.to_string(),
            phonemes: toks.split(' ').map(str::to_string).collect(),
            lang,
        };
        let i = lang.index();
        match bucket {
            "train" => split.train[i].push(entry),
            "val" => split.val[i].push(entry),
            "test" => split.test[i].push(entry),
            other => return Err(malformed(format!("unknown split name {other:?}"))),
        }
    }
    Ok(split)
}

/// Convenience: read a manifest from a file path.
pub fn read_manifest_file(path: &Path) -> Result<CorpusSplit, CorpusError> {
    let f = std::fs::File::open(path)?;
    read_manifest(std::io::BufReader::new(f))
}
