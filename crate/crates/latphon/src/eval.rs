//! Evaluation: greedy decoding, phoneme error rate with Wilson confidence
//! intervals, two-proportion significance tests, ablation comparison,
//! single-word throughput benchmarking, and plot-data emission.

use std::time::Instant;

use serde_json::json;
use thiserror::Error;

use crate::corpus::{CorpusSplit, LanguageId, WordEntry};
use crate::model::{Model, ModelError};
use crate::vocab::{self, VocabPair, BOS_ID, EOS_ID};

/// Two-sided 95% normal quantile pinned to the value used throughout.
pub const Z_95: f64 = 1.959964;

/// Minimum measurement-set size for a throughput run.
pub const THROUGHPUT_MIN_WORDS: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("hypothesis count {hyps} does not match reference count {refs}")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("reference set is empty")]
    EmptyReferenceSet,
    #[error("zero trials")]
    ZeroTrials,
    #[error("confidence {0} outside (0, 1)")]
    InvalidConfidence(f64),
    #[error("checkpoint was trained with vocabulary {checkpoint}, got {loaded}")]
    VocabMismatch { checkpoint: String, loaded: String },
    #[error("reports cover different data: {0}")]
    SplitMismatch(String),
    #[error("throughput needs at least {min} words, got {got}")]
    TooFewWords { got: usize, min: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Which held-out bucket of a split an evaluation ran on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSubset {
    Val,
    Test,
}

impl std::fmt::Display for EvalSubset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalSubset::Val => "val",
            EvalSubset::Test => "test",
        })
    }
}

/// Decode one word: encode the source once, then append the argmax token
/// until EOS or the cap. Ties break toward the lowest token id. The default
/// cap is 2·chars+10, which guarantees termination on any model.
pub fn greedy_decode(
    model: &Model<f32>,
    word: &str,
    lang: LanguageId,
    vocab: &VocabPair,
    max_len: Option<usize>,
) -> Result<Vec<String>, EvalError> {
    let cap = max_len.unwrap_or_else(|| 2 * word.chars().count() + 10);
    let mut src = vocab::encode_source(word, lang, vocab);
    if !model.config().use_lang_id {
        src = vocab::strip_lang_token(&src);
    }
    let ids = greedy_decode_ids(model, &src, cap)?;
    Ok(ids
        .iter()
        .map(|&id| vocab.phonemes.symbol(id).unwrap_or("<unk>").to_string())
        .collect())
}

/// Greedy id loop against a cached encoder memory.
fn greedy_decode_ids(
    model: &Model<f32>,
    src_ids: &[u32],
    cap: usize,
) -> Result<Vec<u32>, ModelError> {
    if cap == 0 {
        return Ok(Vec::new());
    }
    let memory = model.encode_source(src_ids)?;
    let v = model.config().tgt_rows();
    let mut dec_in = vec![BOS_ID];
    let mut emitted = Vec::new();
    while emitted.len() < cap {
        let logits = model.decode_with_memory(&memory, &dec_in)?;
        let last = &logits[(dec_in.len() - 1) * v..];
        let mut best = 0usize;
        for (i, &x) in last.iter().enumerate().skip(1) {
            if x > last[best] {
                best = i;
            }
        }
        if best as u32 == EOS_ID {
            break;
        }
        emitted.push(best as u32);
        dec_in.push(best as u32);
    }
    Ok(emitted)
}

/// Minimum insertions + deletions + substitutions, unit costs, two-row DP.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0usize; short.len() + 1];
    for (i, lv) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, sv) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lv != sv);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Aggregate edit counts behind a PER figure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerCounts {
    pub n_errors: usize,
    pub n_ref_phonemes: usize,
    pub per_pct: f64,
}

/// Phoneme error rate: total edit distance over total reference tokens,
/// as a percentage. May exceed 100 under heavy insertion.
pub fn per(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<PerCounts, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: refs.len() });
    }
    if refs.is_empty() {
        return Err(EvalError::EmptyReferenceSet);
    }
    let n_ref_phonemes: usize = refs.iter().map(Vec::len).sum();
    if n_ref_phonemes == 0 {
        return Err(EvalError::EmptyReferenceSet);
    }
    let n_errors: usize =
        hyps.iter().zip(refs).map(|(h, r)| levenshtein(h, r)).sum();
    Ok(PerCounts {
        n_errors,
        n_ref_phonemes,
        per_pct: 100.0 * n_errors as f64 / n_ref_phonemes as f64,
    })
}

/// Standard normal CDF via West's rational approximations: relative error
/// under 1e-15 in the central region and under 1e-8 across the far tail,
/// ample for confidence intervals and p-values.
pub fn norm_cdf(z: f64) -> f64 {
    if z == 0.0 {
        return 0.5;
    }
    if z > 0.0 {
        return 1.0 - negative_tail(-z);
    }
    negative_tail(z)
}

/// Lower-tail probability for z < 0.
fn negative_tail(z: f64) -> f64 {
    let x = -z;
    if x > 37.0 {
        return 0.0;
    }
    let e = (-x * x / 2.0).exp();
    if x < 7.071067811865475 {
        let mut n = 3.52624965998911e-2 * x + 0.700383064443688;
        n = n * x + 6.37396220353165;
        n = n * x + 33.912866078383;
        n = n * x + 112.079291497871;
        n = n * x + 221.213596169931;
        n = n * x + 220.206867912376;
        let mut d = 8.83883476483184e-2 * x + 1.75566716318264;
        d = d * x + 16.064177579207;
        d = d * x + 86.7807322029461;
        d = d * x + 296.564248779674;
        d = d * x + 637.333633378831;
        d = d * x + 793.826512519948;
        d = d * x + 440.413735824752;
        e * n / d
    } else {
        let b = x + 1.0 / (x + 2.0 / (x + 3.0 / (x + 4.0 / (x + 0.65))));
        e / (b * 2.506628274631)
    }
}

/// Inverse standard normal CDF by bisection; used for non-default
/// confidence levels.
fn probit(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// 95% Wilson score interval over Bernoulli trials, as proportions.
pub fn wilson_ci(errors: usize, trials: usize) -> Result<(f64, f64), EvalError> {
    wilson_ci_at(errors, trials, 0.95)
}

/// Wilson score interval at an arbitrary confidence level. The error
/// proportion is clamped to 1.0 so edit counts above the reference length
/// remain well-defined.
pub fn wilson_ci_at(
    errors: usize,
    trials: usize,
    confidence: f64,
) -> Result<(f64, f64), EvalError> {
    if trials == 0 {
        return Err(EvalError::ZeroTrials);
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(EvalError::InvalidConfidence(confidence));
    }
    let z = if confidence == 0.95 { Z_95 } else { probit(0.5 + confidence / 2.0) };
    let n = trials as f64;
    let p_hat = (errors as f64 / n).min(1.0);
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p_hat + z2 / (2.0 * n)) / denom;
    let half = z * (p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Ok(((center - half).max(0.0), (center + half).min(1.0)))
}

/// One-sided two-proportion z-test (H1: system 1's error proportion is
/// lower). Small p favors system 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceResult {
    pub e1: usize,
    pub n1: usize,
    pub e2: usize,
    pub n2: usize,
    pub z: f64,
    pub p_one_sided: f64,
    /// Pooled proportion was 0 or 1: no variance, p reported as 0.5.
    pub degenerate_pool: bool,
}

/// Pooled-variance two-proportion z-test on error counts.
///
/// Swapping the two systems negates z bitwise and maps p to exactly 1−p:
/// both tails are derived from one rounding of the small tail, so the pair
/// always sums to exactly 1.
pub fn two_prop_ztest(
    e1: usize,
    n1: usize,
    e2: usize,
    n2: usize,
) -> Result<SignificanceResult, EvalError> {
    if n1 == 0 || n2 == 0 {
        return Err(EvalError::ZeroTrials);
    }
    let p1 = (e1 as f64 / n1 as f64).min(1.0);
    let p2 = (e2 as f64 / n2 as f64).min(1.0);
    let pooled = ((e1 + e2) as f64 / (n1 + n2) as f64).min(1.0);
    if pooled == 0.0 || pooled == 1.0 {
        return Ok(SignificanceResult {
            e1,
            n1,
            e2,
            n2,
            z: 0.0,
            p_one_sided: 0.5,
            degenerate_pool: true,
        });
    }
    let se = (pooled * (1.0 - pooled) * (1.0 / n1 as f64 + 1.0 / n2 as f64)).sqrt();
    let z = (p1 - p2) / se;
    let p_one_sided = if z == 0.0 {
        0.5
    } else {
        // r is the one rounding of the large tail; 1−r is then exact, so
        // the two orientations are exact complements.
        let r = 1.0 - norm_cdf(-z.abs());
        if z < 0.0 {
            1.0 - r
        } else {
            r
        }
    };
    Ok(SignificanceResult { e1, n1, e2, n2, z, p_one_sided, degenerate_pool: false })
}

/// Per-language evaluation row.
#[derive(Debug, Clone, PartialEq)]
pub struct LangEval {
    pub lang: LanguageId,
    pub n_words: usize,
    pub n_ref_phonemes: usize,
    pub n_errors: usize,
    pub per_pct: f64,
    /// Wilson 95% bounds as proportions of reference phonemes.
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Full evaluation over one held-out subset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub subset: EvalSubset,
    pub rows: Vec<LangEval>,
    /// Unweighted mean over the languages present.
    pub mean_per_pct: f64,
    pub vocab_sha256: String,
    pub split_digest: String,
    pub model_params: usize,
}

/// Greedy-decode every held-out word and assemble per-language PER rows.
/// `checkpoint_vocab_sha256` comes from the checkpoint manifest and must
/// match the loaded vocabulary.
pub fn evaluate(
    model: &Model<f32>,
    checkpoint_vocab_sha256: &str,
    vocab: &VocabPair,
    split: &CorpusSplit,
    subset: EvalSubset,
) -> Result<EvalReport, EvalError> {
    let loaded = vocab.digest();
    if loaded != checkpoint_vocab_sha256 {
        return Err(EvalError::VocabMismatch {
            checkpoint: checkpoint_vocab_sha256.to_string(),
            loaded,
        });
    }
    let params = model.count_params();
    evaluate_with_decoder(vocab, split, subset, params, checkpoint_vocab_sha256, |e| {
        greedy_decode(model, &e.word, e.lang, vocab, None)
    })
}

/// Evaluation core over an arbitrary decoder; the lookup-oracle tests and
/// the model path share this.
pub fn evaluate_with_decoder<D>(
    _vocab: &VocabPair,
    split: &CorpusSplit,
    subset: EvalSubset,
    model_params: usize,
    vocab_sha256: &str,
    mut decode: D,
) -> Result<EvalReport, EvalError>
where
    D: FnMut(&WordEntry) -> Result<Vec<String>, EvalError>,
{
    let buckets = match subset {
        EvalSubset::Val => &split.val,
        EvalSubset::Test => &split.test,
    };
    let mut rows = Vec::new();
    for lang in LanguageId::ALL {
        let entries = &buckets[lang.index()];
        if entries.is_empty() {
            continue;
        }
        let mut hyps = Vec::with_capacity(entries.len());
        let mut refs = Vec::with_capacity(entries.len());
        for e in entries {
            hyps.push(decode(e)?);
            refs.push(e.phonemes.clone());
        }
        let counts = per(&hyps, &refs)?;
        let (ci_lo, ci_hi) = wilson_ci(counts.n_errors, counts.n_ref_phonemes)?;
        rows.push(LangEval {
            lang,
            n_words: entries.len(),
            n_ref_phonemes: counts.n_ref_phonemes,
            n_errors: counts.n_errors,
            per_pct: counts.per_pct,
            ci_lo,
            ci_hi,
        });
    }
    if rows.is_empty() {
        return Err(EvalError::EmptyReferenceSet);
    }
    let mean_per_pct = rows.iter().map(|r| r.per_pct).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        subset,
        rows,
        mean_per_pct,
        vocab_sha256: vocab_sha256.to_string(),
        split_digest: split.digest(),
        model_params,
    })
}

/// One language's with/without comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub lang: LanguageId,
    pub per_with: f64,
    pub per_without: f64,
    /// PER increase when the language token is removed.
    pub delta: f64,
    pub sig: SignificanceResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub mean_with: f64,
    pub mean_without: f64,
    pub mean_delta: f64,
}

/// Per-language Δ table with significance between a with-language-ID report
/// and its ablated counterpart. Both must cover the same split and subset.
pub fn ablation_compare(
    with_id: &EvalReport,
    no_id: &EvalReport,
) -> Result<AblationReport, EvalError> {
    if with_id.split_digest != no_id.split_digest {
        return Err(EvalError::SplitMismatch("different split digests".into()));
    }
    if with_id.subset != no_id.subset {
        return Err(EvalError::SplitMismatch(format!(
            "subsets differ: {} vs {}",
            with_id.subset, no_id.subset
        )));
    }
    let langs_a: Vec<LanguageId> = with_id.rows.iter().map(|r| r.lang).collect();
    let langs_b: Vec<LanguageId> = no_id.rows.iter().map(|r| r.lang).collect();
    if langs_a != langs_b {
        return Err(EvalError::SplitMismatch("language sets differ".into()));
    }
    let mut rows = Vec::with_capacity(with_id.rows.len());
    for (a, b) in with_id.rows.iter().zip(&no_id.rows) {
        if a.n_ref_phonemes != b.n_ref_phonemes || a.n_words != b.n_words {
            return Err(EvalError::SplitMismatch(format!(
                "{} test sets differ in size",
                a.lang
            )));
        }
        let sig = two_prop_ztest(a.n_errors, a.n_ref_phonemes, b.n_errors, b.n_ref_phonemes)?;
        rows.push(AblationRow {
            lang: a.lang,
            per_with: a.per_pct,
            per_without: b.per_pct,
            delta: b.per_pct - a.per_pct,
            sig,
        });
    }
    Ok(AblationReport {
        rows,
        mean_with: with_id.mean_per_pct,
        mean_without: no_id.mean_per_pct,
        mean_delta: no_id.mean_per_pct - with_id.mean_per_pct,
    })
}

/// Single-word decoding throughput.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputReport {
    pub device: String,
    pub words_per_s: f64,
    pub chars_per_s: f64,
    pub n_words: usize,
    pub wall_seconds: f64,
}

/// Time greedy decoding one word at a time (batch 1) after a warmup pass.
pub fn throughput_bench(
    model: &Model<f32>,
    vocab: &VocabPair,
    words: &[(String, LanguageId)],
    warmup_n: usize,
    device: &str,
) -> Result<ThroughputReport, EvalError> {
    if words.len() < THROUGHPUT_MIN_WORDS {
        return Err(EvalError::TooFewWords { got: words.len(), min: THROUGHPUT_MIN_WORDS });
    }
    for (word, lang) in words.iter().take(warmup_n) {
        greedy_decode(model, word, *lang, vocab, None)?;
    }
    let n_chars: usize = words.iter().map(|(w, _)| w.chars().count()).sum();
    let start = Instant::now();
    for (word, lang) in words {
        greedy_decode(model, word, *lang, vocab, None)?;
    }
    let wall_seconds = start.elapsed().as_secs_f64();
    Ok(ThroughputReport {
        device: device.to_string(),
        words_per_s: words.len() as f64 / wall_seconds,
        chars_per_s: n_chars as f64 / wall_seconds,
        n_words: words.len(),
        wall_seconds,
    })
}

/// One point on the size-versus-accuracy plot.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRow {
    pub name: String,
    pub params: Option<f64>,
    pub per_pct: f64,
    pub footprint_mb: Option<f64>,
}

/// Published baseline constants emitted as annotation rows.
fn pareto_annotations() -> Vec<ParetoRow> {
    vec![
        ParetoRow {
            name: "ByT5-small".into(),
            params: Some(5.8e8),
            per_pct: 5.4,
            footprint_mb: None,
        },
        ParetoRow { name: "WFST".into(), params: None, per_pct: 3.2, footprint_mb: None },
    ]
}

/// Comma-separated plot data with header `name,params,per,footprint_mb`.
/// Baseline annotation rows are appended whenever the input is non-empty;
/// an empty input yields a header-only file.
pub fn pareto_plot_data(rows: &[ParetoRow]) -> String {
    let mut out = String::from("name,params,per,footprint_mb\n");
    let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    let mut emit = |r: &ParetoRow| {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.name,
            fmt_opt(r.params),
            r.per_pct,
            fmt_opt(r.footprint_mb)
        ));
    };
    for r in rows {
        emit(r);
    }
    if !rows.is_empty() {
        for r in pareto_annotations() {
            emit(&r);
        }
    }
    out
}

/// Fixed-width text table of per-language PER with 95% CIs.
pub fn render_eval_table(r: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("PER (%) with Wilson 95% CIs, {} set\n", r.subset));
    out.push_str(&format!(
        "{:<10} {:>8} {:>9} {:>9} {:>8} {:>12}\n",
        "Language", "PER", "CI lo", "CI hi", "Words", "Ref phones"
    ));
    for row in &r.rows {
        out.push_str(&format!(
            "{:<10} {:>8.2} {:>9.2} {:>9.2} {:>8} {:>12}\n",
            row.lang.code(),
            row.per_pct,
            100.0 * row.ci_lo,
            100.0 * row.ci_hi,
            row.n_words,
            row.n_ref_phonemes
        ));
    }
    out.push_str(&format!("{:<10} {:>8.2}\n", "Mean", r.mean_per_pct));
    out
}

/// Machine-readable evaluation records, one JSON object per language line.
pub fn eval_records_jsonl(r: &EvalReport) -> String {
    let mut out = String::new();
    for row in &r.rows {
        let rec = json!({
            "lang": row.lang.code(),
            "subset": r.subset.to_string(),
            "n_words": row.n_words,
            "n_ref_phonemes": row.n_ref_phonemes,
            "n_errors": row.n_errors,
            "per_pct": row.per_pct,
            "ci95_lo": row.ci_lo,
            "ci95_hi": row.ci_hi,
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    out.push_str(
        &json!({
            "mean_per_pct": r.mean_per_pct,
            "subset": r.subset.to_string(),
            "model_params": r.model_params,
        })
        .to_string(),
    );
    out.push('\n');
    out
}

/// Fixed-width Δ table for the language-ID ablation.
pub fn render_ablation_table(a: &AblationReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<10} {:>10} {:>10} {:>8} {:>12}\n",
        "Language", "With ID", "No ID", "Delta", "p (one-sided)"
    ));
    for row in &a.rows {
        out.push_str(&format!(
            "{:<10} {:>10.2} {:>10.2} {:>+8.2} {:>12.3e}\n",
            row.lang.code(),
            row.per_with,
            row.per_without,
            row.delta,
            row.sig.p_one_sided
        ));
    }
    out.push_str(&format!(
        "{:<10} {:>10.2} {:>10.2} {:>+8.2}\n",
        "Mean", a.mean_with, a.mean_without, a.mean_delta
    ));
    out
}

/// One-line throughput summary in the published table's column order.
pub fn render_throughput_table(t: &ThroughputReport) -> String {
    format!(
        "{:<24} {:>10} {:>10}\n{:<24} {:>10.1} {:>10.1}\n",
        "Device", "words/s", "chars/s", t.device, t.words_per_s, t.chars_per_s
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::NormalizationPolicy;
    use crate::model::ModelConfig;
    use crate::vocab::build_vocabs;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn entry(word: &str, phones: &str, lang: LanguageId) -> WordEntry {
        WordEntry { word: word.into(), phonemes: toks(phones), lang }
    }

    /// Tiny two-language split placed directly into the test bucket.
    fn tiny_split() -> CorpusSplit {
        let mut split = CorpusSplit {
            train: Default::default(),
            val: Default::default(),
            test: Default::default(),
            split_seed: 1,
            policy: NormalizationPolicy::default(),
        };
        split.test[LanguageId::En.index()] =
            vec![entry("ab", "a b", LanguageId::En), entry("ba", "b a", LanguageId::En)];
        split.test[LanguageId::It.index()] = vec![entry("ano", "a n o", LanguageId::It)];
        split.train = split.test.clone();
        split
    }

    #[test]
    fn levenshtein_identical_is_zero() {
        let a = toks("p ɛ t o");
        assert_eq!(levenshtein(&a, &a), 0);
    }

    #[test]
    fn levenshtein_geminate_reduction_is_one() {
        let hyp = toks("p ɛ t o");
        let reference = toks("p ɛ t t o");
        assert_eq!(levenshtein(&hyp, &reference), 1);
    }

    #[test]
    fn levenshtein_empty_cases() {
        let a = toks("a b c");
        let empty: Vec<String> = vec![];
        assert_eq!(levenshtein(&a, &empty), 3);
        assert_eq!(levenshtein(&empty, &a), 3);
        assert_eq!(levenshtein(&empty, &empty), 0);
    }

    /// Reachability check: edit distance ≤ d, by exhaustive path search.
    fn edit_leq(a: &[u8], b: &[u8], d: usize) -> bool {
        if a.is_empty() {
            return b.len() <= d;
        }
        if b.is_empty() {
            return a.len() <= d;
        }
        if a[0] == b[0] && edit_leq(&a[1..], &b[1..], d) {
            return true;
        }
        if d == 0 {
            return false;
        }
        edit_leq(&a[1..], &b[1..], d - 1)
            || edit_leq(&a[1..], b, d - 1)
            || edit_leq(a, &b[1..], d - 1)
    }

    fn brute_distance(a: &[u8], b: &[u8]) -> usize {
        (0..=a.len().max(b.len())).find(|&d| edit_leq(a, b, d)).unwrap()
    }

    #[test]
    fn per_all_correct_is_zero() {
        let refs = vec![toks("a b"), toks("c d e")];
        let got = per(&refs.clone(), &refs).unwrap();
        assert_eq!(got.n_errors, 0);
        assert_eq!(got.per_pct, 0.0);
    }

    #[test]
    fn per_one_substitution_in_ten() {
        let refs = vec![toks("a b c d e f g h i j")];
        let mut hyps = refs.clone();
        hyps[0][3] = "x".into();
        let got = per(&hyps, &refs).unwrap();
        assert_eq!(got.n_errors, 1);
        assert_eq!(got.n_ref_phonemes, 10);
        assert_eq!(got.per_pct, 10.0);
    }

    #[test]
    fn per_rejects_mismatched_and_empty() {
        let refs = vec![toks("a")];
        assert!(matches!(per(&[], &refs), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(per(&[], &[]), Err(EvalError::EmptyReferenceSet)));
        let empty_refs = vec![Vec::<String>::new()];
        let empty_hyps = vec![Vec::<String>::new()];
        assert!(matches!(per(&empty_hyps, &empty_refs), Err(EvalError::EmptyReferenceSet)));
    }

    #[test]
    fn norm_cdf_matches_reference_points() {
        assert_eq!(norm_cdf(0.0), 0.5);
        // Central region: near machine precision.
        let got95 = norm_cdf(-Z_95);
        let want95 = 0.024_999_999_096_442_4;
        assert!(((got95 - want95) / want95).abs() < 1e-12, "{got95}");
        let got2 = norm_cdf(-2.0);
        let want2 = 0.02275013194817921;
        assert!(((got2 - want2) / want2).abs() < 1e-12, "{got2}");
        // Tail: the approximation's envelope is ~1e-8 relative.
        let got6 = norm_cdf(-6.0);
        let want6 = 9.865_876_450_376_98e-10;
        assert!(((got6 - want6) / want6).abs() < 1e-8, "{got6}");
        let got20 = norm_cdf(-20.0);
        let want20 = 2.7536241186062337e-89;
        assert!(((got20 - want20) / want20).abs() < 1e-8, "{got20}");
        assert!((norm_cdf(6.0) - (1.0 - want6)).abs() < 1e-15);
        // Beyond the cutoff the tail underflows to exactly zero.
        assert_eq!(norm_cdf(-38.0), 0.0);
        assert_eq!(norm_cdf(38.0), 1.0);
    }

    #[test]
    fn wilson_zero_errors_oracle() {
        let (lo, hi) = wilson_ci(0, 100).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 0.0370).abs() < 1e-3, "{hi}");
    }

    #[test]
    fn wilson_half_errors_oracle() {
        let (lo, hi) = wilson_ci(50, 100).unwrap();
        assert!((lo - 0.404).abs() < 1e-3, "{lo}");
        assert!((hi - 0.596).abs() < 1e-3, "{hi}");
        assert!(((lo + hi) / 2.0 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn wilson_rejects_zero_trials_and_bad_confidence() {
        assert!(matches!(wilson_ci(3, 0), Err(EvalError::ZeroTrials)));
        assert!(matches!(wilson_ci_at(1, 10, 1.0), Err(EvalError::InvalidConfidence(_))));
    }

    #[test]
    fn wilson_other_confidence_uses_probit() {
        // 90% z is ~1.6449; interval must be strictly inside the 95% one.
        let (lo95, hi95) = wilson_ci_at(20, 200, 0.95).unwrap();
        let (lo90, hi90) = wilson_ci_at(20, 200, 0.90).unwrap();
        assert!(lo90 > lo95 && hi90 < hi95);
    }

    #[test]
    fn ztest_equal_proportions() {
        let r = two_prop_ztest(10, 1000, 10, 1000).unwrap();
        assert_eq!(r.z, 0.0);
        assert_eq!(r.p_one_sided, 0.5);
        assert!(!r.degenerate_pool);
    }

    #[test]
    fn ztest_strong_difference_is_significant() {
        let r = two_prop_ztest(30, 3500, 95, 3500).unwrap();
        assert!(r.p_one_sided < 1e-6, "{}", r.p_one_sided);
        assert!(r.z < -5.0);
    }

    #[test]
    fn ztest_swap_is_exact_complement_both_ways() {
        let a = two_prop_ztest(30, 3500, 95, 3500).unwrap();
        let b = two_prop_ztest(95, 3500, 30, 3500).unwrap();
        assert_eq!(b.p_one_sided, 1.0 - a.p_one_sided);
        assert_eq!(a.p_one_sided, 1.0 - b.p_one_sided);
        assert_eq!(a.z.to_bits(), (-b.z).to_bits());
    }

    #[test]
    fn ztest_degenerate_pool_is_flagged() {
        let r = two_prop_ztest(0, 50, 0, 70).unwrap();
        assert!(r.degenerate_pool);
        assert_eq!(r.p_one_sided, 0.5);
        assert!(matches!(two_prop_ztest(1, 0, 0, 5), Err(EvalError::ZeroTrials)));
    }

    #[test]
    fn oracle_decoder_scores_zero_per() {
        let split = tiny_split();
        let vocab = build_vocabs(&split.train_all()).unwrap();
        let report = evaluate_with_decoder(&vocab, &split, EvalSubset::Test, 0, "sha", |e| {
            Ok(e.phonemes.clone())
        })
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert_eq!(row.per_pct, 0.0);
            assert_eq!(row.ci_lo, 0.0);
        }
        assert_eq!(report.mean_per_pct, 0.0);
    }

    #[test]
    fn untrained_model_scores_high_per() {
        let split = tiny_split();
        let vocab = build_vocabs(&split.train_all()).unwrap();
        let cfg = ModelConfig {
            grapheme_vocab_size: vocab.n_content_graphemes(),
            phoneme_vocab_size: vocab.n_content_phonemes(),
            ..ModelConfig::toy(0, 0)
        };
        let model: Model<f32> = Model::init(&cfg, 3).unwrap();
        let report =
            evaluate(&model, &vocab.digest(), &vocab, &split, EvalSubset::Test).unwrap();
        // Random decoders emit junk up to the cap; expect gross error rates.
        assert!(report.mean_per_pct > 50.0, "{}", report.mean_per_pct);
    }

    #[test]
    fn evaluate_rejects_vocab_mismatch() {
        let split = tiny_split();
        let vocab = build_vocabs(&split.train_all()).unwrap();
        let cfg = ModelConfig {
            grapheme_vocab_size: vocab.n_content_graphemes(),
            phoneme_vocab_size: vocab.n_content_phonemes(),
            ..ModelConfig::toy(0, 0)
        };
        let model: Model<f32> = Model::init(&cfg, 3).unwrap();
        let got = evaluate(&model, "different-sha", &vocab, &split, EvalSubset::Test);
        assert!(matches!(got, Err(EvalError::VocabMismatch { .. })));
    }

    #[test]
    fn greedy_decode_is_deterministic_and_respects_cap() {
        let split = tiny_split();
        let vocab = build_vocabs(&split.train_all()).unwrap();
        let cfg = ModelConfig {
            grapheme_vocab_size: vocab.n_content_graphemes(),
            phoneme_vocab_size: vocab.n_content_phonemes(),
            ..ModelConfig::toy(0, 0)
        };
        let model: Model<f32> = Model::init(&cfg, 8).unwrap();
        let a = greedy_decode(&model, "ab", LanguageId::En, &vocab, None).unwrap();
        let b = greedy_decode(&model, "ab", LanguageId::En, &vocab, None).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 2 * 2 + 10);
        let empty = greedy_decode(&model, "ab", LanguageId::En, &vocab, Some(0)).unwrap();
        assert!(empty.is_empty());
        let one = greedy_decode(&model, "ab", LanguageId::En, &vocab, Some(1)).unwrap();
        assert!(one.len() <= 1);
    }

    #[test]
    fn ablation_identical_reports_are_null() {
        let split = tiny_split();
        let vocab = build_vocabs(&split.train_all()).unwrap();
        let report = evaluate_with_decoder(&vocab, &split, EvalSubset::Test, 0, "s", |e| {
            Ok(e.phonemes.clone())
        })
        .unwrap();
        let cmp = ablation_compare(&report, &report).unwrap();
        for row in &cmp.rows {
            assert_eq!(row.delta, 0.0);
            assert_eq!(row.sig.p_one_sided, 0.5);
        }
        assert_eq!(cmp.mean_delta, 0.0);
    }

    #[test]
    fn ablation_rejects_mismatched_splits() {
        let split = tiny_split();
        let vocab = build_vocabs(&split.train_all()).unwrap();
        let a = evaluate_with_decoder(&vocab, &split, EvalSubset::Test, 0, "s", |e| {
            Ok(e.phonemes.clone())
        })
        .unwrap();
        let mut b = a.clone();
        b.split_digest = "something-else".into();
        assert!(matches!(ablation_compare(&a, &b), Err(EvalError::SplitMismatch(_))));
        let mut c = a.clone();
        c.subset = EvalSubset::Val;
        assert!(matches!(ablation_compare(&a, &c), Err(EvalError::SplitMismatch(_))));
    }

    #[test]
    fn throughput_rejects_small_sets() {
        let split = tiny_split();
        let vocab = build_vocabs(&split.train_all()).unwrap();
        let cfg = ModelConfig {
            grapheme_vocab_size: vocab.n_content_graphemes(),
            phoneme_vocab_size: vocab.n_content_phonemes(),
            ..ModelConfig::toy(0, 0)
        };
        let model: Model<f32> = Model::init(&cfg, 8).unwrap();
        let words = vec![("ab".to_string(), LanguageId::En); 99];
        assert!(matches!(
            throughput_bench(&model, &vocab, &words, 5, "test"),
            Err(EvalError::TooFewWords { got: 99, min: 100 })
        ));
    }

    #[test]
    fn throughput_ratio_matches_mean_word_length() {
        let split = tiny_split();
        let vocab = build_vocabs(&split.train_all()).unwrap();
        let mut cfg = ModelConfig {
            grapheme_vocab_size: vocab.n_content_graphemes(),
            phoneme_vocab_size: vocab.n_content_phonemes(),
            ..ModelConfig::toy(0, 0)
        };
        cfg.n_enc_layers = 1;
        cfg.n_dec_layers = 1;
        let model: Model<f32> = Model::init(&cfg, 8).unwrap();
        let mut words = Vec::new();
        for i in 0..120 {
            let w = if i % 2 == 0 { "ab" } else { "ano" };
            words.push((w.to_string(), LanguageId::En));
        }
        let report = throughput_bench(&model, &vocab, &words, 3, "test-cpu").unwrap();
        let mean_len = words.iter().map(|(w, _)| w.chars().count()).sum::<usize>() as f64
            / words.len() as f64;
        let ratio = report.chars_per_s / report.words_per_s;
        assert!((ratio - mean_len).abs() < 1e-9, "ratio {ratio} vs mean {mean_len}");
        assert!(report.chars_per_s >= report.words_per_s);
        assert_eq!(report.n_words, 120);
    }

    #[test]
    fn pareto_empty_input_is_header_only() {
        assert_eq!(pareto_plot_data(&[]), "name,params,per,footprint_mb\n");
    }

    #[test]
    fn pareto_includes_annotations_with_data() {
        let rows = vec![ParetoRow {
            name: "latphon".into(),
            params: Some(7_452_273.0),
            per_pct: 3.5,
            footprint_mb: Some(29.8),
        }];
        let csv = pareto_plot_data(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "name,params,per,footprint_mb");
        assert_eq!(lines[1], "latphon,7452273,3.5,29.8");
        assert!(lines.iter().any(|l| l.starts_with("ByT5-small,580000000,5.4,")));
        assert!(lines.iter().any(|l| l.starts_with("WFST,,3.2,")));
    }

    #[test]
    fn tables_render_all_languages() {
        let split = tiny_split();
        let vocab = build_vocabs(&split.train_all()).unwrap();
        let report = evaluate_with_decoder(&vocab, &split, EvalSubset::Test, 0, "s", |e| {
            Ok(e.phonemes.clone())
        })
        .unwrap();
        let table = render_eval_table(&report);
        assert!(table.contains("en") && table.contains("it") && table.contains("Mean"));
        let jsonl = eval_records_jsonl(&report);
        assert_eq!(jsonl.lines().count(), 3);
        let cmp = ablation_compare(&report, &report).unwrap();
        let atable = render_ablation_table(&cmp);
        assert!(atable.contains("Delta") || atable.contains("Mean"));
    }

    proptest! {
        #[test]
        fn levenshtein_matches_brute_force(
            a in proptest::collection::vec(0u8..3, 0..=6),
            b in proptest::collection::vec(0u8..3, 0..=6),
        ) {
            prop_assert_eq!(levenshtein(&a, &b), brute_distance(&a, &b));
        }

        #[test]
        fn levenshtein_symmetry_and_identity(
            a in proptest::collection::vec(0u8..4, 0..=8),
            b in proptest::collection::vec(0u8..4, 0..=8),
        ) {
            prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
            prop_assert_eq!(levenshtein(&a, &a), 0);
            if levenshtein(&a, &b) == 0 {
                prop_assert_eq!(&a, &b);
            }
        }

        #[test]
        fn levenshtein_triangle_inequality(
            a in proptest::collection::vec(0u8..3, 0..=5),
            b in proptest::collection::vec(0u8..3, 0..=5),
            c in proptest::collection::vec(0u8..3, 0..=5),
        ) {
            prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        }

        #[test]
        fn per_counts_are_additive(
            lens in proptest::collection::vec(1usize..5, 1..6),
        ) {
            // Build two disjoint sets and check count additivity.
            let refs_a: Vec<Vec<String>> = lens.iter().map(|&n| (0..n).map(|i| i.to_string()).collect()).collect();
            let mut hyps_a = refs_a.clone();
            hyps_a[0][0] = "x".into();
            let refs_b: Vec<Vec<String>> = refs_a.iter().map(|r| { let mut r = r.clone(); r.push("t".into()); r }).collect();
            let hyps_b = refs_b.clone();
            let pa = per(&hyps_a, &refs_a).unwrap();
            let pb = per(&hyps_b, &refs_b).unwrap();
            let all_h: Vec<Vec<String>> = hyps_a.iter().chain(&hyps_b).cloned().collect();
            let all_r: Vec<Vec<String>> = refs_a.iter().chain(&refs_b).cloned().collect();
            let pc = per(&all_h, &all_r).unwrap();
            prop_assert_eq!(pc.n_errors, pa.n_errors + pb.n_errors);
            prop_assert_eq!(pc.n_ref_phonemes, pa.n_ref_phonemes + pb.n_ref_phonemes);
        }

        #[test]
        fn wilson_contains_clamped_p_hat(e in 0usize..400, n in 1usize..300) {
            let (lo, hi) = wilson_ci(e, n).unwrap();
            let p_hat = (e as f64 / n as f64).min(1.0);
            prop_assert!(lo <= p_hat + 1e-12 && p_hat <= hi + 1e-12);
            prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
        }

        #[test]
        fn wilson_width_shrinks_with_n(e in 1usize..50, scale in 2usize..6) {
            // Same p-hat, more trials: the interval must tighten.
            let n = 100usize;
            let (lo1, hi1) = wilson_ci(e, n).unwrap();
            let (lo2, hi2) = wilson_ci(e * scale, n * scale).unwrap();
            prop_assert!(hi2 - lo2 < hi1 - lo1);
        }

        #[test]
        fn ztest_swap_complement_random(
            e1 in 0usize..200, n1 in 1usize..2000,
            e2 in 0usize..200, n2 in 1usize..2000,
        ) {
            let a = two_prop_ztest(e1, n1, e2, n2).unwrap();
            let b = two_prop_ztest(e2, n2, e1, n1).unwrap();
            prop_assert_eq!(b.p_one_sided, 1.0 - a.p_one_sided);
            prop_assert_eq!(a.p_one_sided, 1.0 - b.p_one_sided);
        }

        #[test]
        fn norm_cdf_is_monotone(a in -37.0f64..37.0, d in 0.001f64..5.0) {
            prop_assert!(norm_cdf(a) <= norm_cdf(a + d));
        }
    }
}
