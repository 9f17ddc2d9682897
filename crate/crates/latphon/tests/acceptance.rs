//! Acceptance gate: eleven checks covering the parameter budget, checkpoint
//! format, gradients, schedule, metric oracles, learning behaviour, the
//! language-ID ablation, throughput, decoder causality, and report layout.
//!
//! Each check is one test named c01..c11 and prints a `cNN: PASS ...` line
//! (visible with `--nocapture`). Tolerances are pinned inline.

use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use latphon::corpus::{self, CorpusSplit, LanguageId, NormalizationPolicy};
use latphon::eval::{self, EvalSubset};
use latphon::model::{self, Model, ModelConfig};
use latphon::tensor::Tape;
use latphon::train::{self, TrainConfig};
use latphon::vocab::{self, VocabPair};

/// Serializes the wall-clock-sensitive checks so they do not time each other.
static TIMED: Mutex<()> = Mutex::new(());

fn timed_guard() -> std::sync::MutexGuard<'static, ()> {
    TIMED.lock().unwrap_or_else(|e| e.into_inner())
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/toy-ipa-dict")
}

fn load_fixture() -> (CorpusSplit, VocabPair) {
    let policy = NormalizationPolicy::default();
    let mut entries = Vec::new();
    for lang in LanguageId::ALL {
        let path = fixture_dir().join(format!("{}.txt", lang.code()));
        entries.extend(corpus::load_language_file(&path, lang, &policy).unwrap());
    }
    let split = corpus::split_corpus(entries, 42, &policy).unwrap();
    let vocab = vocab::build_vocabs(&split.train_all()).unwrap();
    (split, vocab)
}

/// The two desk-scale training runs (language-ID kept and ablated), shared
/// by c07 and c08. Whoever asks first pays for both.
struct Trained {
    _dir: tempfile::TempDir,
    split: CorpusSplit,
    vocab: VocabPair,
    with_val_per: f64,
    with_ckpt: PathBuf,
    no_ckpt: PathBuf,
    with_wall: Duration,
    no_wall: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let _guard = timed_guard();
        let (split, vocab) = load_fixture();
        let dir = tempfile::tempdir().unwrap();
        let mcfg = ModelConfig::toy(vocab.n_content_graphemes(), vocab.n_content_phonemes());
        let tcfg = TrainConfig::toy();

        let t0 = Instant::now();
        let with_report = train::run_training(
            &split,
            &vocab,
            &mcfg,
            &tcfg,
            &dir.path().join("with"),
            None,
            None,
        )
        .unwrap();
        let with_wall = t0.elapsed();

        let no_cfg = ModelConfig { use_lang_id: false, ..mcfg };
        let t1 = Instant::now();
        let no_report = train::run_training(
            &split,
            &vocab,
            &no_cfg,
            &tcfg,
            &dir.path().join("no"),
            None,
            None,
        )
        .unwrap();
        let no_wall = t1.elapsed();

        Trained {
            split,
            vocab,
            with_val_per: with_report.best.expect("validation ran").1,
            with_ckpt: with_report.checkpoint_path,
            no_ckpt: no_report.checkpoint_path,
            with_wall,
            no_wall,
            _dir: dir,
        }
    })
}

#[test]
fn c01_parameter_budget_and_breakdown() {
    let cfg = ModelConfig::reference();
    let m = Model::<f32>::init(&cfg, 42).unwrap();
    let n = m.count_params();
    assert!(
        (7_000_000..=8_000_000).contains(&n),
        "c01: FAIL (param count {n} outside [7.0M, 8.0M])"
    );
    let breakdown = m.param_breakdown();
    assert_eq!(
        breakdown.language_id, 1_536,
        "c01: FAIL (language-ID rows {} != 1536)",
        breakdown.language_id
    );
    let closed = model::count_params_closed_form(&cfg);
    let brute: usize = (0..m.n_tensors()).map(|i| m.tensor_data(i).len()).sum();
    assert_eq!(closed, brute, "c01: FAIL (closed form {closed} != brute {brute})");
    assert_eq!(n, brute);
    println!("c01: PASS (params {n} in [7.0M, 8.0M], language-ID rows 1536, closed == brute)");
}

#[test]
fn c02_checkpoint_footprint_and_bitwise_roundtrip() {
    let cfg = ModelConfig::reference();
    let m = Model::<f32>::init(&cfg, 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ckpt");
    let b = dir.path().join("b.ckpt");
    m.save_checkpoint("0".repeat(64).as_str(), None, &a).unwrap();
    let size = std::fs::metadata(&a).unwrap().len();
    const LIMIT: u64 = 32 * 1024 * 1024;
    assert!(size <= LIMIT, "c02: FAIL (checkpoint {size} bytes > 32 MB)");
    let (loaded, manifest) = Model::load_checkpoint(&a).unwrap();
    loaded
        .save_checkpoint(&manifest.vocab_sha256, manifest.run_config.clone(), &b)
        .unwrap();
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert_eq!(bytes_a, bytes_b, "c02: FAIL (save/load/save not bitwise identical)");
    println!(
        "c02: PASS (reference checkpoint {:.1} MB <= 32 MB, roundtrip bitwise identical)",
        size as f64 / (1024.0 * 1024.0)
    );
}

#[test]
fn c03_autodiff_matches_central_finite_differences() {
    let _guard = timed_guard();
    let t0 = Instant::now();
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::toy(10, 12) };
    let mut m = Model::<f64>::init(&cfg, 7).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let src_rows = 10 + cfg.grapheme_vocab_size as u32;
    let tgt_rows = 4 + cfg.phoneme_vocab_size as u32;
    let mut src: Vec<Vec<u32>> = Vec::new();
    let mut dec_in: Vec<Vec<u32>> = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for _ in 0..4 {
        let ls = rng.random_range(3..9);
        let lt = rng.random_range(2..7);
        src.push((0..ls).map(|_| rng.random_range(4..src_rows)).collect());
        dec_in.push((0..lt).map(|_| rng.random_range(1..tgt_rows)).collect());
        labels.extend((0..lt).map(|_| rng.random_range(2..tgt_rows)));
    }
    let mask = vec![true; labels.len()];

    let loss = |m: &Model<f64>| -> f64 {
        let mut tape: Tape<'_, f64> = Tape::new();
        let bound = m.bind(&mut tape);
        let (logits, _) = m.forward_graph(&mut tape, &bound, &src, &dec_in, None).unwrap();
        let l = tape.cross_entropy_masked(logits, &labels, &mask).unwrap();
        tape.scalar_value(l)
    };

    // Reverse-mode gradients for every tensor.
    let grads: Vec<Vec<f64>> = {
        let mut tape: Tape<'_, f64> = Tape::new();
        let bound = m.bind(&mut tape);
        let (logits, _) = m.forward_graph(&mut tape, &bound, &src, &dec_in, None).unwrap();
        let l = tape.cross_entropy_masked(logits, &labels, &mask).unwrap();
        tape.backward(l).unwrap();
        bound
            .ids()
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                tape.grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; m.tensor_data(i).len()])
            })
            .collect()
    };

    let sizes: Vec<usize> = (0..m.n_tensors()).map(|i| m.tensor_data(i).len()).collect();
    let total: usize = sizes.iter().sum();
    const H: f64 = 1e-3;
    const N_SAMPLES: usize = 220;
    const TOL: f64 = 1e-4;
    let mut worst = 0.0f64;
    for _ in 0..N_SAMPLES {
        let mut flat = rng.random_range(0..total);
        let mut t = 0;
        while flat >= sizes[t] {
            flat -= sizes[t];
            t += 1;
        }
        let orig = m.tensor_data(t)[flat];
        m.tensor_data_mut(t)[flat] = orig + H;
        let up = loss(&m);
        m.tensor_data_mut(t)[flat] = orig - H;
        let down = loss(&m);
        m.tensor_data_mut(t)[flat] = orig;
        let fd = (up - down) / (2.0 * H);
        let ad = grads[t][flat];
        let denom = fd.abs().max(ad.abs());
        if denom < 1e-8 {
            continue; // both effectively zero
        }
        let rel = (fd - ad).abs() / denom;
        worst = worst.max(rel);
        assert!(
            rel < TOL,
            "c03: FAIL (tensor {t} elem {flat}: fd {fd:.9e} vs ad {ad:.9e}, rel {rel:.3e})"
        );
    }
    let wall = t0.elapsed();
    assert!(wall < Duration::from_secs(60), "c03: FAIL (took {wall:?} >= 1 min)");
    println!(
        "c03: PASS ({N_SAMPLES} sampled params, h=1e-3 fp64, max rel err {worst:.3e} < 1e-4, {:.1}s)",
        wall.as_secs_f64()
    );
}

#[test]
fn c04_learning_rate_schedule_pinned_points() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.total_steps, 100_000);
    assert_eq!(cfg.warmup_steps, 10_000);
    let lr = |s: u64| train::lr_at_step(s, &cfg).unwrap();
    assert_eq!(lr(0), 0.0, "c04: FAIL (lr(0) != 0)");
    assert_eq!(lr(10_000), 3e-4, "c04: FAIL (lr(10k) != 3e-4 exactly)");
    let mid = lr(55_000);
    assert!(
        (mid - 1.5e-4).abs() <= 1e-12,
        "c04: FAIL (lr(55k) {mid} not within 1e-12 of 1.5e-4)"
    );
    assert_eq!(lr(100_000), 0.0, "c04: FAIL (lr(total) != 0)");
    // Junction continuity: one warmup step of slope on the left, a near-flat
    // cosine start on the right.
    let left_gap = (lr(10_000) - lr(9_999)).abs();
    assert!(left_gap <= 3e-4 / 10_000.0 + 1e-15, "c04: FAIL (warmup side jump {left_gap})");
    let right_gap = (lr(10_000) - lr(10_001)).abs();
    assert!(right_gap <= 1e-9, "c04: FAIL (cosine side jump {right_gap})");
    for s in (10_000..100_000).step_by(1000) {
        assert!(lr(s) >= lr(s + 1000), "c04: FAIL (decay not monotone at {s})");
    }
    println!("c04: PASS (lr(0)=0, lr(10k)=3e-4, lr(55k)=1.5e-4 +/- 1e-12, continuous junction)");
}

#[test]
fn c05_metric_oracles() {
    // Exhaustive edit distance against an independent full-matrix oracle.
    fn oracle(a: &[u8], b: &[u8]) -> usize {
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in dp[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = dp[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
            }
        }
        dp[a.len()][b.len()]
    }
    let mut strings: Vec<Vec<u8>> = vec![Vec::new()];
    for len in 1..=6 {
        let start = strings.len() - 3usize.pow(len as u32 - 1).max(1);
        let prev: Vec<Vec<u8>> = if len == 1 {
            vec![Vec::new()]
        } else {
            strings[start..].to_vec()
        };
        for p in prev {
            for c in *b"abc" {
                let mut s = p.clone();
                s.push(c);
                strings.push(s);
            }
        }
    }
    assert_eq!(strings.len(), 1093); // (3^7 - 1) / 2
    let mut checked = 0usize;
    for a in &strings {
        for b in &strings {
            assert_eq!(
                eval::levenshtein(a, b),
                oracle(a, b),
                "c05: FAIL (levenshtein mismatch on {a:?} vs {b:?})"
            );
            checked += 1;
        }
    }

    // Wilson bounds against the closed-form formula.
    let closed_form = |k: f64, n: f64| -> (f64, f64) {
        let z = 1.959964f64;
        let p = k / n;
        let denom = 1.0 + z * z / n;
        let center = (p + z * z / (2.0 * n)) / denom;
        let half = (z / denom) * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt();
        (center - half, center + half)
    };
    for (k, n) in [(0usize, 100usize), (50, 100)] {
        let (lo, hi) = eval::wilson_ci(k, n).unwrap();
        let (clo, chi) = closed_form(k as f64, n as f64);
        assert!(
            (lo - clo).abs() < 1e-3 && (hi - chi).abs() < 1e-3,
            "c05: FAIL (wilson({k},{n}) = ({lo},{hi}) vs closed form ({clo},{chi}))"
        );
    }

    // Two-proportion z-test: exact antisymmetry and the equal-proportion case.
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let n1 = rng.random_range(50..2000);
        let n2 = rng.random_range(50..2000);
        let e1 = rng.random_range(1..n1);
        let e2 = rng.random_range(1..n2);
        let ab = eval::two_prop_ztest(e1, n1, e2, n2).unwrap();
        let ba = eval::two_prop_ztest(e2, n2, e1, n1).unwrap();
        assert_eq!(
            ab.z.to_bits(),
            (-ba.z).to_bits(),
            "c05: FAIL (z not exactly antisymmetric)"
        );
        assert_eq!(
            ab.p_one_sided,
            1.0 - ba.p_one_sided,
            "c05: FAIL (p not exactly complementary)"
        );
    }
    let eq = eval::two_prop_ztest(25, 500, 25, 500).unwrap();
    assert_eq!(eq.z, 0.0, "c05: FAIL (equal proportions must give z = 0)");
    assert_eq!(eq.p_one_sided, 0.5);
    println!(
        "c05: PASS ({checked} exhaustive edit-distance pairs, wilson closed form within 1e-3, \
         z-test exactly antisymmetric)"
    );
}

#[test]
fn c06_initial_masked_nll_near_uniform() {
    let _guard = timed_guard();
    let cfg = ModelConfig::reference();
    // 109 content phonemes; PAD/BOS/EOS/UNK are extra rows. The uniform
    // anchor is still the published ln(109): ln(113) differs by under 1%.
    let tgt_rows = 4 + cfg.phoneme_vocab_size as u32;
    assert_eq!(tgt_rows, 113);
    let m = Model::<f32>::init(&cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let src_rows = 10 + cfg.grapheme_vocab_size as u32;
    let mut src = Vec::new();
    let mut dec_in = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..8 {
        let ls = rng.random_range(4..12);
        let lt = rng.random_range(3..10);
        src.push((0..ls).map(|_| rng.random_range(4..src_rows)).collect::<Vec<u32>>());
        dec_in.push((0..lt).map(|_| rng.random_range(1..tgt_rows)).collect::<Vec<u32>>());
        labels.extend((0..lt).map(|_| rng.random_range(2..tgt_rows)));
    }
    let mask = vec![true; labels.len()];
    let mut tape: Tape<'_, f32> = Tape::new();
    let bound = m.bind(&mut tape);
    let (logits, _) = m.forward_graph(&mut tape, &bound, &src, &dec_in, None).unwrap();
    let l = tape.cross_entropy_masked(logits, &labels, &mask).unwrap();
    let nll = tape.scalar_value(l) as f64;
    let uniform = (109f64).ln();
    assert!(
        (nll - uniform).abs() <= 0.10 * uniform,
        "c06: FAIL (initial NLL {nll:.4} not within 10% of ln(109) = {uniform:.4})"
    );
    println!("c06: PASS (initial masked NLL {nll:.4} within 10% of ln(109) = {uniform:.4})");
}

#[test]
fn c07_toy_training_learns_the_fixture() {
    let art = trained();
    assert!(
        art.with_val_per < 10.0,
        "c07: FAIL (trained val PER {:.2}% >= 10%)",
        art.with_val_per
    );
    // An untrained model of the same shape must be far from the data.
    let mcfg =
        ModelConfig::toy(art.vocab.n_content_graphemes(), art.vocab.n_content_phonemes());
    let untrained = Model::<f32>::init(&mcfg, 987).unwrap();
    let digest = art.vocab.digest();
    let report =
        eval::evaluate(&untrained, &digest, &art.vocab, &art.split, EvalSubset::Val).unwrap();
    assert!(
        report.mean_per_pct > 80.0,
        "c07: FAIL (untrained val PER {:.2}% <= 80%)",
        report.mean_per_pct
    );
    assert!(
        art.with_wall < Duration::from_secs(600),
        "c07: FAIL (toy run took {:?} >= 10 min)",
        art.with_wall
    );
    println!(
        "c07: PASS (toy val PER {:.2}% < 10%, untrained {:.2}% > 80%, {:.0}s < 10 min)",
        art.with_val_per,
        report.mean_per_pct,
        art.with_wall.as_secs_f64()
    );
}

/// Pooled en+es test-set error counts; those two languages share one word
/// list with letter-for-letter conflicting pronunciations.
fn conflict_counts(report: &eval::EvalReport) -> (usize, usize) {
    let mut errors = 0;
    let mut phones = 0;
    for row in &report.rows {
        if matches!(row.lang, LanguageId::En | LanguageId::Es) {
            errors += row.n_errors;
            phones += row.n_ref_phonemes;
        }
    }
    (errors, phones)
}

#[test]
fn c08_language_id_ablation_on_conflict_pair() {
    let art = trained();
    let digest = art.vocab.digest();
    let (with_model, wm) = Model::load_checkpoint(&art.with_ckpt).unwrap();
    assert_eq!(wm.vocab_sha256, digest);
    let (no_model, nm) = Model::load_checkpoint(&art.no_ckpt).unwrap();
    assert!(!nm.config.use_lang_id);

    let with_report =
        eval::evaluate(&with_model, &digest, &art.vocab, &art.split, EvalSubset::Test).unwrap();
    let no_report =
        eval::evaluate(&no_model, &digest, &art.vocab, &art.split, EvalSubset::Test).unwrap();
    let (e_with, n_with) = conflict_counts(&with_report);
    let (e_no, n_no) = conflict_counts(&no_report);
    let per_with = 100.0 * e_with as f64 / n_with as f64;
    let per_no = 100.0 * e_no as f64 / n_no as f64;
    assert!(per_with < 5.0, "c08: FAIL (with-ID conflict PER {per_with:.2}% >= 5%)");
    assert!(per_no >= 45.0, "c08: FAIL (no-ID conflict PER {per_no:.2}% < 45%)");
    // Lower-tail test: small p means the first system makes fewer errors.
    let sig = eval::two_prop_ztest(e_with, n_with, e_no, n_no).unwrap();
    assert!(sig.z < 0.0);
    assert!(
        sig.p_one_sided < 1e-6,
        "c08: FAIL (p {:.3e} >= 1e-6)",
        sig.p_one_sided
    );
    assert!(
        art.no_wall < Duration::from_secs(900),
        "c08: FAIL (ablation run took {:?} >= 15 min)",
        art.no_wall
    );
    println!(
        "c08: PASS (conflict PER with-ID {per_with:.2}% < 5%, no-ID {per_no:.2}% >= 45%, \
         p {:.3e} < 1e-6, {:.0}s < 15 min)",
        sig.p_one_sided,
        art.no_wall.as_secs_f64()
    );
}

#[test]
fn c09_reference_size_throughput() {
    let (split, vocab) = load_fixture();
    let model = Model::<f32>::init(&ModelConfig::reference(), 42).unwrap();
    let mut words: Vec<(String, LanguageId)> = Vec::new();
    'outer: for lang in LanguageId::ALL {
        for e in &split.test[lang.index()] {
            words.push((e.word.clone(), lang));
            if words.len() == 120 {
                break 'outer;
            }
        }
    }
    let _guard = timed_guard();
    let report = eval::throughput_bench(&model, &vocab, &words, 10, "cpu").unwrap();
    assert!(
        report.words_per_s >= 5.0,
        "c09: FAIL (reference-size model {:.1} words/s < 5)",
        report.words_per_s
    );
    println!(
        "c09: PASS (reference-size greedy decode {:.1} words/s >= 5, batch 1, cpu)",
        report.words_per_s
    );
}

#[test]
fn c10_decoder_causality_is_bit_exact() {
    let cfg = ModelConfig { dropout: 0.0, ..ModelConfig::toy(12, 14) };
    let m = Model::<f32>::init(&cfg, 11).unwrap();
    let tgt_rows = 4 + cfg.phoneme_vocab_size;
    let src_rows = (10 + cfg.grapheme_vocab_size) as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..100 {
        let ls = rng.random_range(2..9);
        let lp = rng.random_range(1..7);
        let extra = rng.random_range(1..5);
        let src: Vec<u32> = (0..ls).map(|_| rng.random_range(4..src_rows)).collect();
        let mut dec: Vec<u32> =
            (0..lp).map(|_| rng.random_range(1..tgt_rows as u32)).collect();
        let memory = m.encode_source(&src).unwrap();
        let short = m.decode_with_memory(&memory, &dec).unwrap();
        dec.extend((0..extra).map(|_| rng.random_range(1..tgt_rows as u32)));
        let long = m.decode_with_memory(&memory, &dec).unwrap();
        for (i, (a, b)) in short.iter().zip(long[..lp * tgt_rows].iter()).enumerate() {
            assert_eq!(
                a.to_bits(),
                b.to_bits(),
                "c10: FAIL (trial {trial}: logit {i} changed after appending future tokens)"
            );
        }
    }
    println!("c10: PASS (100 random trials, prefix logits bit-identical under future-token edits)");
}

#[test]
fn c11_report_layout_golden_file() {
    // Synthetic counts shaped like the published per-language PER table.
    let counts: [(LanguageId, usize, usize, usize); 6] = [
        (LanguageId::En, 1500, 9253, 684),
        (LanguageId::Es, 1500, 8914, 98),
        (LanguageId::Fr, 1500, 9478, 412),
        (LanguageId::It, 1500, 9031, 151),
        (LanguageId::Pt, 1500, 9244, 287),
        (LanguageId::Ro, 1500, 9107, 214),
    ];
    let mut rows = Vec::new();
    for (lang, n_words, n_ref, n_err) in counts {
        let (ci_lo, ci_hi) = eval::wilson_ci(n_err, n_ref).unwrap();
        rows.push(eval::LangEval {
            lang,
            n_words,
            n_ref_phonemes: n_ref,
            n_errors: n_err,
            per_pct: 100.0 * n_err as f64 / n_ref as f64,
            ci_lo,
            ci_hi,
        });
    }
    let mean = rows.iter().map(|r| r.per_pct).sum::<f64>() / rows.len() as f64;
    let report = eval::EvalReport {
        subset: EvalSubset::Test,
        rows,
        mean_per_pct: mean,
        vocab_sha256: "synthetic".into(),
        split_digest: "synthetic".into(),
        model_params: 7_452_273,
    };
    let rendered = eval::render_eval_table(&report);
    let golden = include_str!("golden/per_table.txt");
    assert_eq!(
        rendered, golden,
        "c11: FAIL (report layout drifted from tests/golden/per_table.txt)"
    );
    println!("c11: PASS (report generator matches the golden per-language table layout)");
}
