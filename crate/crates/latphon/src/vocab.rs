//! Grapheme and phoneme vocabularies: id assignment, encoding between text
//! and integer sequences, and the vocabulary file format.
//!
//! Id layout is deterministic. Both sides reserve PAD=0, BOS=1, EOS=2,
//! UNK=3. The source side then reserves one token per language (ids 4..10)
//! before grapheme symbols; the target side continues directly with phoneme
//! symbols from id 4. Content symbols are sorted lexicographically, so the
//! tables are a pure function of the set of symbols in the training data.

use crate::corpus::{LanguageId, WordEntry};
use sha2::{Digest, Sha256};
use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
/// Number of reserved special rows on each side.
pub const N_SPECIALS: usize = 4;
/// First language-token id on the source side.
pub const FIRST_LANG_ID: u32 = 4;
/// First grapheme id on the source side.
pub const FIRST_GRAPHEME_ID: u32 = FIRST_LANG_ID + 6;
/// First phoneme id on the target side.
pub const FIRST_PHONEME_ID: u32 = 4;

/// Display forms of the special tokens, indexed by id.
pub const SPECIAL_SYMBOLS: [&str; N_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Phoneme content symbols beyond this trip a warning (the inventory the
/// reference model was sized for).
pub const PHONEME_BUDGET: usize = 109;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build vocabularies from an empty corpus")]
    EmptyCorpus,
    #[error("id {id} out of range for vocabulary of {size} rows")]
    UnknownId { id: u32, size: usize },
    #[error("malformed vocabulary file line {line_no}: {reason}")]
    MalformedVocabFile { line_no: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One side's symbol table: `symbols[id]` is the symbol, `ids` the inverse.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    ids: HashMap<String, u32>,
}

impl SymbolTable {
    fn new(symbols: Vec<String>) -> SymbolTable {
        let ids = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        SymbolTable { symbols, ids }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.ids.get(symbol).copied()
    }

    pub fn symbol(&self, id: u32) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }
}

/// The paired source (grapheme) and target (phoneme) vocabularies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabPair {
    pub graphemes: SymbolTable,
    pub phonemes: SymbolTable,
}

impl VocabPair {
    /// Source-side reserved token id for a language.
    pub fn lang_token_id(lang: LanguageId) -> u32 {
        FIRST_LANG_ID + lang.index() as u32
    }

    /// Content grapheme symbols (excluding specials and language tokens).
    pub fn n_content_graphemes(&self) -> usize {
        self.graphemes.len() - FIRST_GRAPHEME_ID as usize
    }

    /// Content phoneme symbols (excluding specials).
    pub fn n_content_phonemes(&self) -> usize {
        self.phonemes.len() - FIRST_PHONEME_ID as usize
    }

    /// Hex digest of the canonical serialized form; recorded in checkpoints
    /// so an evaluation can verify it decodes with the right tables.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        write_vocab(self, &mut buf).expect("writing to Vec cannot fail");
        let mut h = Sha256::new();
        h.update(&buf);
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Build both vocabularies from training entries.
///
/// Grapheme symbols are the characters of the words; phoneme symbols are
/// the phoneme tokens. Construction is order-independent: symbols are
/// collected into sets and assigned ids lexicographically. Warns when the
/// phoneme inventory exceeds [`PHONEME_BUDGET`].
pub fn build_vocabs(train: &[WordEntry]) -> Result<VocabPair, VocabError> {
    if train.is_empty() {
        return Err(VocabError::EmptyCorpus);
    }
    let mut graph_set: BTreeSet<String> = BTreeSet::new();
    let mut phon_set: BTreeSet<String> = BTreeSet::new();
    for e in train {
        for c in e.word.chars() {
            graph_set.insert(c.to_string());
        }
        for p in &e.phonemes {
            phon_set.insert(p.clone());
        }
    }
    if phon_set.len() > PHONEME_BUDGET {
        log::warn!(
            "phoneme inventory has {} content symbols, above the {PHONEME_BUDGET}-symbol budget",
            phon_set.len()
        );
    } else {
        log::info!("phoneme inventory: {} content symbols", phon_set.len());
    }
    let mut graphemes: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
    graphemes.extend(LanguageId::ALL.iter().map(|l| format!("<{}>", l.code())));
    graphemes.extend(graph_set);
    let mut phonemes: Vec<String> = SPECIAL_SYMBOLS.iter().map(|s| s.to_string()).collect();
    phonemes.extend(phon_set);
    Ok(VocabPair {
        graphemes: SymbolTable::new(graphemes),
        phonemes: SymbolTable::new(phonemes),
    })
}

/// Encode a word as `[lang token] + [grapheme ids]`; unknown characters map
/// to UNK. Output length is always `chars(word) + 1`.
pub fn encode_source(word: &str, lang: LanguageId, vocab: &VocabPair) -> Vec<u32> {
    let mut ids = Vec::with_capacity(word.chars().count() + 1);
    ids.push(VocabPair::lang_token_id(lang));
    for c in word.chars() {
        let mut buf = [0u8; 4];
        ids.push(vocab.graphemes.id(c.encode_utf8(&mut buf)).unwrap_or(UNK_ID));
    }
    ids
}

/// Re-index a source encoding for the no-language-ID model variant: the
/// leading language token is removed and grapheme ids shift down by the six
/// reserved rows. Special ids are unchanged.
pub fn strip_lang_token(src_ids: &[u32]) -> Vec<u32> {
    src_ids
        .iter()
        .skip(1)
        .map(|&id| if id >= FIRST_GRAPHEME_ID { id - 6 } else { id })
        .collect()
}

/// Encode a phoneme sequence as `[BOS] + ids + [EOS]`; unknown phonemes map
/// to UNK with a warning.
pub fn encode_target(phonemes: &[String], vocab: &VocabPair) -> Vec<u32> {
    let mut ids = Vec::with_capacity(phonemes.len() + 2);
    ids.push(BOS_ID);
    for p in phonemes {
        match vocab.phonemes.id(p) {
            Some(id) => ids.push(id),
            None => {
                log::warn!("phoneme {p:?} not in vocabulary; encoding as UNK");
                ids.push(UNK_ID);
            }
        }
    }
    ids.push(EOS_ID);
    ids
}

/// Map target-side ids back to phoneme tokens: skips BOS and PAD, stops at
/// the first EOS.
pub fn decode_phonemes(ids: &[u32], vocab: &VocabPair) -> Result<Vec<String>, VocabError> {
    let mut out = Vec::new();
    for &id in ids {
        if id == EOS_ID {
            break;
        }
        if id == BOS_ID || id == PAD_ID {
            continue;
        }
        match vocab.phonemes.symbol(id) {
            Some(s) => out.push(s.to_string()),
            None => {
                return Err(VocabError::UnknownId { id, size: vocab.phonemes.len() });
            }
        }
    }
    Ok(out)
}

/// Serialize both tables as `id<TAB>symbol<TAB>kind` lines. Source rows
/// (kinds `special`, `lang`, `grapheme`) come first, then target content
/// rows (kind `phoneme`); the shared specials are written once.
pub fn write_vocab(vocab: &VocabPair, mut w: impl Write) -> std::io::Result<()> {
    for (id, sym) in vocab.graphemes.symbols.iter().enumerate() {
        let kind = if id < N_SPECIALS {
            "special"
        } else if (id as u32) < FIRST_GRAPHEME_ID {
            "lang"
        } else {
            "grapheme"
        };
        writeln!(w, "{id}\t{sym}\t{kind}")?;
    }
    for (id, sym) in vocab.phonemes.symbols.iter().enumerate().skip(N_SPECIALS) {
        writeln!(w, "{id}\t{sym}\tphoneme")?;
    }
    Ok(())
}

/// Load a vocabulary file written by [`write_vocab`], reproducing ids
/// exactly.
pub fn read_vocab(r: impl BufRead) -> Result<VocabPair, VocabError> {
    let mut source: Vec<(u32, String)> = Vec::new();
    let mut target: Vec<(u32, String)> = Vec::new();
    let mut specials: Vec<(u32, String)> = Vec::new();
    for (no, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = no + 1;
        let malformed = |reason: String| VocabError::MalformedVocabFile { line_no, reason };
        let mut parts = line.split('\t');
        let (id, sym, kind) = match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), Some(c)) => (a, b, c),
            _ => return Err(malformed("expected 3 tab-separated fields".into())),
        };
        let id: u32 = id.parse().map_err(|_| malformed(format!("bad id {id:?}")))?;
        match kind {
            "special" => specials.push((id, sym.to_string())),
            "lang" | "grapheme" => source.push((id, sym.to_string())),
            "phoneme" => target.push((id, sym.to_string())),
            other => return Err(malformed(format!("unknown kind {other:?}"))),
        }
    }
    let build = |mut rows: Vec<(u32, String)>, side: &str| -> Result<SymbolTable, VocabError> {
        rows.sort_by_key(|(id, _)| *id);
        let mut symbols = Vec::with_capacity(rows.len());
        for (i, (id, sym)) in rows.into_iter().enumerate() {
            if id as usize != i {
                return Err(VocabError::MalformedVocabFile {
                    line_no: 0,
                    reason: format!("{side} ids are not contiguous at id {id}"),
                });
            }
            symbols.push(sym);
        }
        Ok(SymbolTable::new(symbols))
    };
    let mut src_rows = specials.clone();
    src_rows.extend(source);
    let mut tgt_rows = specials;
    tgt_rows.extend(target);
    Ok(VocabPair {
        graphemes: build(src_rows, "source")?,
        phonemes: build(tgt_rows, "target")?,
    })
}

/// Convenience: read a vocabulary from a file path.
pub fn read_vocab_file(path: &std::path::Path) -> Result<VocabPair, VocabError> {
    let f = std::fs::File::open(path)?;
    read_vocab(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(word: &str, phonemes: &[&str], lang: LanguageId) -> WordEntry {
        WordEntry {
            word: word.into(),
            phonemes: phonemes.iter().map(|s| s.to_string()).collect(),
            lang,
        }
    }

    fn fixture_vocab() -> VocabPair {
        build_vocabs(&[
            entry("ab", &["a", "b"], LanguageId::Es),
            entry("ba", &["b", "a"], LanguageId::En),
        ])
        .unwrap()
    }

    #[test]
    fn id_layout_is_deterministic() {
        let v = fixture_vocab();
        // Specials 0..4, lang tokens 4..10, graphemes from 10 sorted.
        assert_eq!(v.graphemes.symbol(0), Some("<pad>"));
        assert_eq!(v.graphemes.symbol(3), Some("<unk>"));
        assert_eq!(v.graphemes.symbol(4), Some("<en>"));
        assert_eq!(v.graphemes.symbol(9), Some("<ro>"));
        assert_eq!(v.graphemes.symbol(10), Some("a"));
        assert_eq!(v.graphemes.symbol(11), Some("b"));
        assert_eq!(v.phonemes.symbol(4), Some("a"));
        assert_eq!(v.phonemes.symbol(5), Some("b"));
        assert_eq!(v.n_content_graphemes(), 2);
        assert_eq!(v.n_content_phonemes(), 2);
    }

    #[test]
    fn single_entry_vocab_matches_contract() {
        let v = build_vocabs(&[entry("a", &["a"], LanguageId::Es)]).unwrap();
        assert_eq!(v.graphemes.len(), N_SPECIALS + 6 + 1);
        assert_eq!(v.phonemes.len(), N_SPECIALS + 1);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(build_vocabs(&[]), Err(VocabError::EmptyCorpus)));
    }

    #[test]
    fn construction_is_order_independent() {
        let a = vec![
            entry("ab", &["a", "b"], LanguageId::Es),
            entry("cd", &["c", "d"], LanguageId::Fr),
            entry("ef", &["e", "f"], LanguageId::En),
        ];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(build_vocabs(&a).unwrap(), build_vocabs(&b).unwrap());
    }

    #[test]
    fn encode_source_prepends_lang_token() {
        let v = fixture_vocab();
        assert_eq!(encode_source("ab", LanguageId::Es, &v), vec![5, 10, 11]);
        assert_eq!(encode_source("", LanguageId::Fr, &v), vec![6]);
    }

    #[test]
    fn encode_source_maps_unknown_chars_to_unk() {
        let v = fixture_vocab();
        assert_eq!(encode_source("axb", LanguageId::En, &v), vec![4, 10, UNK_ID, 11]);
    }

    #[test]
    fn encode_source_length_is_chars_plus_one() {
        let v = fixture_vocab();
        // Multi-byte character: length counts chars, not bytes.
        assert_eq!(encode_source("ça", LanguageId::Fr, &v).len(), 3);
    }

    #[test]
    fn strip_lang_token_reindexes_graphemes() {
        let v = fixture_vocab();
        let ids = encode_source("ab", LanguageId::Es, &v);
        assert_eq!(strip_lang_token(&ids), vec![4, 5]);
        let with_unk = vec![7, UNK_ID, 10];
        assert_eq!(strip_lang_token(&with_unk), vec![UNK_ID, 4]);
    }

    #[test]
    fn encode_target_frames_with_bos_eos() {
        let v = fixture_vocab();
        assert_eq!(encode_target(&["a".to_string()], &v), vec![BOS_ID, 4, EOS_ID]);
        assert_eq!(encode_target(&[], &v), vec![BOS_ID, EOS_ID]);
    }

    #[test]
    fn decode_strips_specials_and_stops_at_eos() {
        let v = fixture_vocab();
        assert_eq!(decode_phonemes(&[1, 4, 2, 0, 0], &v).unwrap(), vec!["a".to_string()]);
        assert_eq!(decode_phonemes(&[1, 2], &v).unwrap(), Vec::<String>::new());
        assert_eq!(
            decode_phonemes(&[1, 4, 5, 2, 4], &v).unwrap(),
            vec!["a".to_string(), "b".to_string()]
        );
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let v = fixture_vocab();
        assert!(matches!(
            decode_phonemes(&[1, 999], &v),
            Err(VocabError::UnknownId { id: 999, .. })
        ));
    }

    #[test]
    fn target_roundtrip_identity() {
        let v = fixture_vocab();
        let seqs = [vec![], vec!["a".to_string()], vec!["b".to_string(), "a".to_string()]];
        for s in seqs {
            assert_eq!(decode_phonemes(&encode_target(&s, &v), &v).unwrap(), s);
        }
    }

    #[test]
    fn lang_token_ids_are_distinct_and_reserved() {
        let ids: BTreeSet<u32> = LanguageId::ALL.into_iter().map(VocabPair::lang_token_id).collect();
        assert_eq!(ids.len(), 6);
        assert!(ids.iter().all(|&id| (FIRST_LANG_ID..FIRST_GRAPHEME_ID).contains(&id)));
    }

    #[test]
    fn vocab_file_roundtrip_reproduces_ids() {
        let v = build_vocabs(&[
            entry("abç", &["a", "t͡ʃ", "ɑ̃"], LanguageId::Fr),
            entry("zq", &["ˈ", "aː"], LanguageId::It),
        ])
        .unwrap();
        let mut buf = Vec::new();
        write_vocab(&v, &mut buf).unwrap();
        let back = read_vocab(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(v, back);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\tlang\n"), "{text}");
        assert!(text.contains("t͡ʃ\tphoneme"), "{text}");
    }

    #[test]
    fn vocab_file_rejects_noncontiguous_ids() {
        let bad = "0\t<pad>\tspecial\n1\t<bos>\tspecial\n2\t<eos>\tspecial\n3\t<unk>\tspecial\n7\tx\tphoneme\n";
        assert!(read_vocab(std::io::Cursor::new(bad.as_bytes())).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = fixture_vocab();
        let b = build_vocabs(&[entry("abz", &["a", "b", "z"], LanguageId::Es)]).unwrap();
        assert_eq!(a.digest(), fixture_vocab().digest());
        assert_ne!(a.digest(), b.digest());
    }

    proptest! {
        #[test]
        fn roundtrip_for_arbitrary_invocab_sequences(idx in proptest::collection::vec(0usize..2, 0..12)) {
            let v = fixture_vocab();
            let symbols = ["a".to_string(), "b".to_string()];
            let seq: Vec<String> = idx.into_iter().map(|i| symbols[i].clone()).collect();
            prop_assert_eq!(decode_phonemes(&encode_target(&seq, &v), &v).unwrap(), seq);
        }

        #[test]
        fn vocab_is_pure_function_of_entry_multiset(perm in proptest::sample::subsequence(vec![0usize,1,2,3,4], 5)) {
            // Any permutation/subsequence ordering of the same entries gives
            // the same tables when the multisets match.
            let all = [entry("ab", &["a"], LanguageId::En),
                entry("bc", &["b"], LanguageId::Es),
                entry("cd", &["c"], LanguageId::Fr),
                entry("de", &["d"], LanguageId::It),
                entry("ef", &["e"], LanguageId::Pt)];
            let chosen: Vec<WordEntry> = perm.iter().map(|&i| all[i].clone()).collect();
            if chosen.is_empty() { return Ok(()); }
            let mut rev = chosen.clone();
            rev.reverse();
            prop_assert_eq!(build_vocabs(&chosen).unwrap(), build_vocabs(&rev).unwrap());
        }
    }
}
