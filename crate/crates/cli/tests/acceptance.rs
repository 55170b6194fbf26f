//! End-to-end gates for the full pipeline, one test per gate. Each test
//! prints a single `[gate N] ... PASS/FAIL` line with the measured numbers
//! so a log scrape shows the whole scorecard.
//!
//! Gates 5-7 share trained models through `OnceLock` fixtures; everything is
//! seeded, so reruns reproduce the same numbers bit for bit.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use tempfile::TempDir;

use radicalign::clip::{self, CandidateMatrix, ClipDims, ClipModel, PretrainConfig};
use radicalign::ctr::{self, CtrConfig, CtrDims, CtrModel, HeadMode, StepTarget};
use radicalign::eval::{self, ShotBucket};
use radicalign::glyph::{self, DatasetRegime, RadicalBitmap, Sample};
use radicalign::ids::{self, DecompositionLevel, Lexicon, Token};
use radicalign::seed;
use radicalign::tensor::{Graph, NodeId, Tensor};

const SEED: u64 = 11;

/// Class layout shared by gates 5-7: classes [0, SEEN) train the encoders,
/// [SEEN, SEEN+UNSEEN) are held out, and the one EXTRA class stays outside
/// the candidate matrix until `add_candidate`.
const SEEN: usize = 240;
const UNSEEN: usize = 60;
const EXTRA: usize = SEEN + UNSEEN; // class id 300

const PRETRAIN_EPOCHS: usize = 150;
const WEIGHT_DECAY: f64 = 0.1;
const PRETRAIN_LR: f64 = 1e-3;
const GLYPHS_PER_CLASS: usize = 6;

const CTR_LINES: usize = 600;
const CTR_EPOCHS: usize = 20;
const CTR_LR: f64 = 1e-3;

fn gate(n: usize, what: &str, pass: bool, detail: &str) {
    println!(
        "[gate {}] {}: {} ({})",
        n,
        what,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
}

// ---------------------------------------------------------------------------
// gate 1: IDS round trip
// ---------------------------------------------------------------------------

#[test]
fn gate_1_ids_round_trip() {
    let start = Instant::now();
    let mut rng = seed::rng(SEED);
    for i in 0..1000 {
        let tree = ids::random_tree(&mut rng, 24, 3);
        let tokens = ids::serialize_ids(&tree);
        assert_eq!(*tokens.last().unwrap(), Token::End, "case {}", i);
        // tree -> tokens -> tree
        let body = &tokens[..tokens.len() - 1];
        let back = ids::parse_ids(body).unwrap_or_else(|e| panic!("case {}: {}", i, e));
        assert_eq!(back, tree, "case {}", i);
        // tokens -> tree -> tokens
        assert_eq!(ids::serialize_ids(&back), tokens, "case {}", i);
    }
    let elapsed = start.elapsed();
    let pass = elapsed.as_secs_f64() < 5.0;
    gate(
        1,
        "ids round trip x1000",
        pass,
        &format!("{:.2}s", elapsed.as_secs_f64()),
    );
    assert!(pass, "round trip took {:?}, budget 5s", elapsed);
}

// ---------------------------------------------------------------------------
// gate 2: finite-difference gradient verification
// ---------------------------------------------------------------------------

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Analytic gradients vs. central differences; the numeric side only ever
/// runs the forward pass, so it is independent of every backward rule.
fn fd_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &ids);
    assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
    let grads = g.backward(loss);

    let eval_at = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        let loss = f(&mut g, &ids);
        g.value(loss).item()
    };

    for (ti, t) in inputs.iter().enumerate() {
        let analytic = grads
            .get(ids[ti])
            .unwrap_or_else(|| panic!("no grad for input {}", ti));
        for ei in 0..t.data.len() {
            let mut plus = inputs.to_vec();
            plus[ti].data[ei] += FD_H;
            let mut minus = inputs.to_vec();
            minus[ti].data[ei] -= FD_H;
            let numeric = (eval_at(&plus) - eval_at(&minus)) / (2.0 * FD_H);
            let a = analytic.data[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            assert!(
                rel <= FD_TOL,
                "input {} elem {}: analytic {} vs numeric {} (rel {})",
                ti,
                ei,
                a,
                numeric,
                rel
            );
        }
    }
}

fn rand_tensor(shape: &[usize], seed_v: u64) -> Tensor<f64> {
    let mut rng = seed::rng(seed_v);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Fixed random weighting so every output element influences the scalar loss.
fn weighted(g: &mut Graph<f64>, x: NodeId, seed_v: u64) -> NodeId {
    let w = g.constant(rand_tensor(g.shape(x), seed_v));
    let p = g.mul(x, w);
    g.sum_all(p)
}

#[test]
fn gate_2_gradient_checks() {
    let start = Instant::now();
    let a = rand_tensor(&[2, 3], 1);
    let b = rand_tensor(&[2, 3], 2);
    let row = rand_tensor(&[1, 3], 3);

    // elementwise and broadcast arithmetic
    fd_check(&[a.clone(), b.clone()], |g, ids| {
        let y = g.add(ids[0], ids[1]);
        weighted(g, y, 100)
    });
    fd_check(&[a.clone(), b.clone()], |g, ids| {
        let y = g.sub(ids[0], ids[1]);
        weighted(g, y, 101)
    });
    fd_check(&[a.clone(), b.clone()], |g, ids| {
        let y = g.mul(ids[0], ids[1]);
        weighted(g, y, 102)
    });
    fd_check(&[a.clone(), row], |g, ids| {
        let y = g.add_broadcast(ids[0], ids[1]);
        weighted(g, y, 103)
    });
    fd_check(&[a.clone()], |g, ids| {
        let y = g.scale(ids[0], -1.7);
        weighted(g, y, 104)
    });

    // nonlinearities
    fd_check(&[a.clone()], |g, ids| {
        let y = g.relu(ids[0]);
        weighted(g, y, 105)
    });
    fd_check(&[a.clone()], |g, ids| {
        let y = g.exp(ids[0]);
        weighted(g, y, 106)
    });
    let pos = a.map(|v| v.abs() + 0.5);
    fd_check(&[pos], |g, ids| {
        let y = g.ln(ids[0]);
        weighted(g, y, 107)
    });

    // shape ops
    let c3 = rand_tensor(&[2, 3, 4], 4);
    fd_check(&[c3.clone()], |g, ids| {
        let y = g.reshape(ids[0], &[6, 4]);
        weighted(g, y, 108)
    });
    fd_check(&[c3.clone()], |g, ids| {
        let y = g.permute(ids[0], &[2, 0, 1]);
        weighted(g, y, 109)
    });
    fd_check(&[c3.clone()], |g, ids| {
        let y = g.select_positions(ids[0], &[2, 0]);
        weighted(g, y, 110)
    });
    let c3b = rand_tensor(&[2, 3, 2], 5);
    fd_check(&[c3.clone(), c3b], |g, ids| {
        let y = g.concat_last(ids[0], ids[1]);
        weighted(g, y, 111)
    });
    let r1 = rand_tensor(&[2, 3], 6);
    let r2 = rand_tensor(&[4, 3], 7);
    fd_check(&[r1, r2], |g, ids| {
        let y = g.concat_rows(ids[0], ids[1]);
        weighted(g, y, 112)
    });

    // matrix products
    let m1 = rand_tensor(&[3, 4], 8);
    let m2 = rand_tensor(&[4, 2], 9);
    fd_check(&[m1, m2], |g, ids| {
        let y = g.matmul(ids[0], ids[1]);
        weighted(g, y, 113)
    });
    let bm1 = rand_tensor(&[2, 3, 4], 10);
    let bm2 = rand_tensor(&[2, 4, 2], 11);
    fd_check(&[bm1, bm2], |g, ids| {
        let y = g.batch_matmul(ids[0], ids[1]);
        weighted(g, y, 114)
    });

    // reductions and normalizations
    fd_check(&[a.clone()], |g, ids| {
        let y = g.softmax_last(ids[0]);
        weighted(g, y, 115)
    });
    fd_check(&[a.clone()], |g, ids| {
        let y = g.logsumexp_last(ids[0]);
        weighted(g, y, 116)
    });
    fd_check(&[a.clone()], |g, ids| {
        let y = g.sum_last(ids[0]);
        weighted(g, y, 117)
    });
    fd_check(&[a.clone()], |g, ids| g.sum_all(ids[0]));
    fd_check(&[a.clone()], |g, ids| g.mean_all(ids[0]));
    let gain = rand_tensor(&[3], 12);
    let bias = rand_tensor(&[3], 13);
    fd_check(&[a.clone(), gain, bias], |g, ids| {
        let y = g.layer_norm(ids[0], ids[1], ids[2]);
        weighted(g, y, 118)
    });
    fd_check(&[a.clone()], |g, ids| {
        let y = g.l2_normalize_last(ids[0]);
        weighted(g, y, 119)
    });

    // image ops
    let img = rand_tensor(&[2, 4, 4, 2], 14);
    let ker = rand_tensor(&[3, 3, 2, 3], 15);
    for stride in [1usize, 2] {
        fd_check(&[img.clone(), ker.clone()], move |g, ids| {
            let y = g.conv2d(ids[0], ids[1], stride);
            weighted(g, y, 120)
        });
    }
    fd_check(&[img.clone()], |g, ids| {
        let y = g.max_pool2d(ids[0]);
        weighted(g, y, 121)
    });
    fd_check(&[img], |g, ids| {
        let y = g.global_avg_pool(ids[0]);
        weighted(g, y, 122)
    });
    let table = rand_tensor(&[6, 4], 16);
    fd_check(&[table], |g, ids| {
        let y = g.embedding(ids[0], &[1, 3, 3, 0], &[2, 2]);
        weighted(g, y, 123)
    });

    // composite alignment losses on raw (pre-normalization) embeddings
    let i_raw = rand_tensor(&[3, 4], 17);
    let t_raw = rand_tensor(&[3, 4], 18);
    fd_check(&[i_raw.clone(), t_raw], |g, ids| {
        let i = g.l2_normalize_last(ids[0]);
        let t = g.l2_normalize_last(ids[1]);
        clip::loss_lt_node(g, i, t)
    });
    fd_check(&[i_raw.clone()], |g, ids| {
        let i = g.l2_normalize_last(ids[0]);
        clip::loss_li_node(g, i, &[0, 0, 1])
    });
    fd_check(&[i_raw], |g, ids| {
        let i = g.l2_normalize_last(ids[0]);
        let lt = clip::loss_lt_node(g, i, i);
        let li = clip::loss_li_node(g, i, &[0, 0, 1]);
        g.add(lt, li)
    });

    // line-decoder loss with the regularizer active (beta = 0.001)
    let f_raw = rand_tensor(&[1, 2, 3], 19);
    let rows_raw = rand_tensor(&[2, 3], 20);
    let targets = vec![vec![StepTarget::Row(0), StepTarget::Row(1)]];
    fd_check(&[f_raw.clone(), rows_raw.clone()], |g, ids| {
        let f = g.reshape(ids[0], &[1, 2, 3]);
        let f = g.l2_normalize_last(f);
        let rows = g.l2_normalize_last(ids[1]);
        ctr::ctr_loss_node(g, f, &targets, rows, 0.001, true).unwrap()
    });

    let elapsed = start.elapsed();
    let pass = elapsed.as_secs_f64() < 60.0;
    gate(
        2,
        "finite-difference gradients",
        pass,
        &format!("{:.2}s", elapsed.as_secs_f64()),
    );
    assert!(pass, "gradient checks took {:?}, budget 60s", elapsed);
}

// ---------------------------------------------------------------------------
// gate 3: hand-computed loss values
// ---------------------------------------------------------------------------

#[test]
fn gate_3_loss_oracles() {
    // loss_lt, N=2, orthonormal rows: each softmax row puts e/(e+1) on the
    // diagonal, four such terms.
    let eye2 = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 0.0, 1.0]);
    let lt_ortho = clip::loss_lt(&eye2, &eye2).unwrap();
    let expect_ortho = 4.0 * (1.0 + (-1.0f64).exp()).ln(); // = 1.2530
    assert!((lt_ortho - 1.2530).abs() < 1e-3, "got {}", lt_ortho);
    assert!((lt_ortho - expect_ortho).abs() < 1e-9);

    // loss_lt, N=2, all four embeddings identical: every softmax is uniform.
    let same = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, 1.0, 0.0]);
    let lt_same = clip::loss_lt(&same, &same).unwrap();
    assert!((lt_same - 2.7726).abs() < 1e-3, "got {}", lt_same);

    // loss_lt, N=1: softmax over a single element is 1, loss exactly 0.
    let one = Tensor::from_vec(&[1, 2], vec![1.0f64, 0.0]);
    assert_eq!(clip::loss_lt(&one, &one).unwrap(), 0.0);

    // loss_li, two identical same-label rows: numerator e, denominator 2e.
    let li_same = clip::loss_li(&same, &[0, 0]).unwrap();
    assert!((li_same - 1.3863).abs() < 1e-3, "got {}", li_same);

    // loss_li, antipodal same-label rows: each term log(1 + e^2).
    let anti = Tensor::from_vec(&[2, 2], vec![1.0f64, 0.0, -1.0, 0.0]);
    let li_anti = clip::loss_li(&anti, &[0, 0]).unwrap();
    assert!((li_anti / 2.0 - 2.1269).abs() < 1e-3, "got {}", li_anti);

    // loss_li, all labels distinct: no positive pairs, exactly 0.
    let li_zero = clip::loss_li(&eye2, &[0, 1]).unwrap();
    assert_eq!(li_zero, 0.0);

    gate(
        3,
        "loss value oracles",
        true,
        &format!(
            "lt {:.4}/{:.4}, li {:.4}/{:.4}/0",
            lt_ortho,
            lt_same,
            li_same,
            li_anti / 2.0
        ),
    );
}

// ---------------------------------------------------------------------------
// gate 4: metric oracles
// ---------------------------------------------------------------------------

/// Textbook full-matrix Levenshtein, kept deliberately separate from the
/// two-row implementation under test.
fn lev_oracle(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let sub = d[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d[a.len()][b.len()]
}

#[test]
fn gate_4_metric_oracles() {
    let mut rng = seed::rng(seed::derive(SEED, "metrics"));
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..500 {
        let la = rng.gen_range(0..8);
        let lb = rng.gen_range(0..8);
        let a: Vec<usize> = (0..la).map(|_| rng.gen_range(0..5)).collect();
        let b: Vec<usize> = (0..lb).map(|_| rng.gen_range(0..5)).collect();
        assert_eq!(eval::edit_distance(&a, &b), lev_oracle(&a, &b));
        preds.push(a);
        labels.push(b);
    }

    // ned against a direct per-pair computation
    let mut total = 0.0;
    for (a, b) in preds.iter().zip(&labels) {
        let denom = a.len().max(b.len());
        if denom > 0 {
            total += lev_oracle(a, b) as f64 / denom as f64;
        }
    }
    let expect_ned = 1.0 - total / preds.len() as f64;
    let got_ned = eval::ned(&preds, &labels).unwrap();
    assert!((got_ned - expect_ned).abs() < 1e-12);

    // lacc/cacc against direct counting
    let exact = preds.iter().zip(&labels).filter(|(a, b)| a == b).count();
    let got_lacc = eval::lacc(&preds, &labels).unwrap();
    assert!((got_lacc - exact as f64 / preds.len() as f64).abs() < 1e-12);

    let cp: Vec<usize> = (0..500).map(|_| rng.gen_range(0..5)).collect();
    let cl: Vec<usize> = (0..500).map(|_| rng.gen_range(0..5)).collect();
    let hits = cp.iter().zip(&cl).filter(|(a, b)| a == b).count();
    let got_cacc = eval::cacc(&cp, &cl).unwrap();
    assert!((got_cacc - hits as f64 / 500.0).abs() < 1e-12);

    gate(
        4,
        "metric oracles x500",
        true,
        &format!("ned {:.4}, lacc {:.4}, cacc {:.4}", got_ned, got_lacc, got_cacc),
    );
}

// ---------------------------------------------------------------------------
// shared trained fixtures for gates 5-7
// ---------------------------------------------------------------------------

struct Stage1 {
    _dir: TempDir,
    lex: Lexicon,
    bitmaps: Vec<RadicalBitmap>,
    model: ClipModel,
    /// candidate rows for the 300-class universe (EXTRA stays out)
    p300: CandidateMatrix,
    seen_cacc: f64,
    unseen_cacc: f64,
    train_secs: f64,
}

fn glyph_split(lo: usize, hi: usize) -> Vec<usize> {
    (lo..hi).collect()
}

fn eval_glyphs(model: &ClipModel, p: &CandidateMatrix, data: &[Sample]) -> f64 {
    let preds: Vec<usize> = data
        .iter()
        .map(|s| clip::ccr_recognize(model, &s.pixels, p).unwrap())
        .collect();
    let labels: Vec<usize> = data.iter().map(|s| s.label[0]).collect();
    eval::cacc(&preds, &labels).unwrap()
}

fn stage1() -> &'static Stage1 {
    static S: OnceLock<Stage1> = OnceLock::new();
    S.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let lex = ids::generate_lexicon(EXTRA + 1, 24, 2, SEED);
        let bitmaps = glyph::radical_inventory(lex.radical_count());

        let train_dir = dir.path().join("train");
        glyph::make_dataset(
            &lex,
            &bitmaps,
            &glyph_split(0, SEEN),
            GLYPHS_PER_CLASS,
            DatasetRegime::Printed,
            seed::derive(SEED, "train-glyphs"),
            &train_dir,
        )
        .expect("train glyphs");
        let train = glyph::load_dataset(&train_dir).expect("load train");

        let mut model = ClipModel::new(ClipDims::default(), lex.vocab_size(), SEED);
        let cfg = PretrainConfig {
            lambda: 1.0,
            lr: PRETRAIN_LR,
            epochs: PRETRAIN_EPOCHS,
            weight_decay: WEIGHT_DECAY,
            seed: SEED,
            ..Default::default()
        };
        let t0 = Instant::now();
        clip::pretrain(&mut model, &lex, &train, &cfg).expect("pretrain");
        let train_secs = t0.elapsed().as_secs_f64();

        let p300 = clip::export_candidates(
            &model,
            &lex,
            &glyph_split(0, EXTRA),
            DecompositionLevel::Radical,
        )
        .expect("candidates");

        // fresh renders on both sides so the numbers measure generalization
        // to new style draws, not recall of training pixels
        let seen_dir = dir.path().join("seen-eval");
        glyph::make_dataset(
            &lex,
            &bitmaps,
            &glyph_split(0, SEEN),
            2,
            DatasetRegime::Printed,
            seed::derive(SEED, "seen-eval"),
            &seen_dir,
        )
        .expect("seen eval glyphs");
        let unseen_dir = dir.path().join("unseen-eval");
        glyph::make_dataset(
            &lex,
            &bitmaps,
            &glyph_split(SEEN, EXTRA),
            3,
            DatasetRegime::Printed,
            seed::derive(SEED, "unseen-eval"),
            &unseen_dir,
        )
        .expect("unseen eval glyphs");

        let seen_cacc = eval_glyphs(&model, &p300, &glyph::load_dataset(&seen_dir).unwrap());
        let unseen_cacc = eval_glyphs(&model, &p300, &glyph::load_dataset(&unseen_dir).unwrap());

        Stage1 {
            _dir: dir,
            lex,
            bitmaps,
            model,
            p300,
            seen_cacc,
            unseen_cacc,
            train_secs,
        }
    })
}

#[test]
fn gate_5_zero_shot_glyph_recognition() {
    let s = stage1();
    let pass = s.unseen_cacc >= 0.30 && s.seen_cacc >= 0.85 && s.train_secs <= 1800.0;
    gate(
        5,
        "zero-shot glyphs vs 300 candidates",
        pass,
        &format!(
            "seen {:.1}% (>=85), unseen {:.1}% (>=30), train {:.0}s (<=1800)",
            s.seen_cacc * 100.0,
            s.unseen_cacc * 100.0,
            s.train_secs
        ),
    );
    assert!(
        s.train_secs <= 1800.0,
        "pretrain took {:.0}s, budget 1800s",
        s.train_secs
    );
    assert!(s.seen_cacc >= 0.85, "seen CACC {:.3} < 0.85", s.seen_cacc);
    assert!(s.unseen_cacc >= 0.30, "unseen CACC {:.3} < 0.30", s.unseen_cacc);
}

struct Stage2 {
    match_model: CtrModel,
    /// per-character accuracy on lines made only of held-out classes
    unseen_char_acc: f64,
    unseen_hits: usize,
    fc_unseen_hits: usize,
    fc_unseen_total: usize,
    add_class_successes: usize,
}

fn line_samples(
    s1: &Stage1,
    classes: &[usize],
    lines: usize,
    max_len: usize,
    label: &str,
    dir: &Path,
) -> Vec<Sample> {
    glyph::make_line_dataset(
        &s1.lex,
        &s1.bitmaps,
        classes,
        lines,
        1,
        max_len,
        DatasetRegime::Printed,
        seed::derive(SEED, label),
        dir,
    )
    .expect("line dataset");
    glyph::load_dataset(dir).expect("load lines")
}

fn zero_bucket(
    train: &[Sample],
    preds: &[Vec<usize>],
    labels: &[Vec<usize>],
) -> (usize, usize) {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in train {
        for &c in &s.label {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    let report = eval::few_shot_report(&counts, preds, labels);
    let z = report.get(&ShotBucket::Zero).cloned().unwrap_or_default();
    (z.correct, z.total)
}

fn stage2() -> &'static Stage2 {
    static S: OnceLock<Stage2> = OnceLock::new();
    S.get_or_init(|| {
        let s1 = stage1();
        let dir = TempDir::new().expect("tempdir");

        let train = line_samples(
            s1,
            &glyph_split(0, SEEN),
            CTR_LINES,
            6,
            "train-lines",
            &dir.path().join("train"),
        );
        let test = line_samples(
            s1,
            &glyph_split(SEEN, EXTRA),
            60,
            6,
            "test-lines",
            &dir.path().join("test"),
        );

        let cfg = CtrConfig {
            lr: CTR_LR,
            epochs: CTR_EPOCHS,
            seed: SEED,
            ..Default::default()
        };
        let dims = CtrDims::default();
        let (match_model, _) = ctr::train_ctr(&cfg, &dims, &s1.p300, &train).expect("train match");

        let labels: Vec<Vec<usize>> = test.iter().map(|s| s.label.clone()).collect();
        let preds: Vec<Vec<usize>> = test
            .iter()
            .map(|s| match_model.greedy_decode(&s1.p300, &s.pixels).unwrap().classes)
            .collect();
        let (unseen_hits, unseen_total) = zero_bucket(&train, &preds, &labels);
        let unseen_char_acc = unseen_hits as f64 / unseen_total.max(1) as f64;

        // same data, dense output head over the observed training classes:
        // its output space has no row for a held-out class at all
        let fc_cfg = CtrConfig {
            head_mode: HeadMode::Fc,
            lr: CTR_LR,
            epochs: 3,
            seed: SEED,
            ..Default::default()
        };
        let (fc_model, _) = ctr::train_ctr(&fc_cfg, &dims, &s1.p300, &train).expect("train fc");
        let fc_preds: Vec<Vec<usize>> = test
            .iter()
            .map(|s| fc_model.greedy_decode(&s1.p300, &s.pixels).unwrap().classes)
            .collect();
        let (fc_unseen_hits, fc_unseen_total) = zero_bucket(&train, &fc_preds, &labels);

        // grow the candidate set by one class and decode lines containing it,
        // with every weight frozen
        let mut p301 = s1.p300.clone();
        let tokens = s1
            .lex
            .tokens_for_level(EXTRA, DecompositionLevel::Radical)
            .unwrap();
        ctr::add_candidate(&mut p301, EXTRA, &tokens, &s1.model, &s1.lex).expect("add class");
        let mut add_class_successes = 0;
        for trial in 0..5 {
            let trial_seed = seed::derive(SEED, &format!("add-class-{trial}"));
            let mut rng = seed::rng(trial_seed);
            let filler = rng.gen_range(0..SEEN);
            let label = vec![filler, EXTRA];
            let style = glyph::StyleParams::sample(glyph::StyleRegime::Printed, &mut rng);
            let img =
                glyph::render_line(&label, &s1.lex, &s1.bitmaps, &style, trial_seed).unwrap();
            let out = match_model.greedy_decode(&p301, &img.pixels).unwrap();
            if out.classes.contains(&EXTRA) {
                add_class_successes += 1;
            }
        }

        Stage2 {
            match_model,
            unseen_char_acc,
            unseen_hits,
            fc_unseen_hits,
            fc_unseen_total,
            add_class_successes,
        }
    })
}

#[test]
fn gate_6_zero_shot_lines_and_add_class() {
    let s = stage2();
    let pass = s.unseen_char_acc >= 0.20 && s.add_class_successes >= 1;
    gate(
        6,
        "zero-shot lines + add-class",
        pass,
        &format!(
            "unseen per-char {:.1}% (>=20), add-class {}/5 (>=1)",
            s.unseen_char_acc * 100.0,
            s.add_class_successes
        ),
    );
    assert!(
        s.unseen_char_acc >= 0.20,
        "unseen per-char accuracy {:.3} < 0.20",
        s.unseen_char_acc
    );
    assert!(s.add_class_successes >= 1, "add-class failed all 5 trials");
}

#[test]
fn gate_7_ablation_directions() {
    // (a) small paired run, one seed, lambda 1 vs 0: the intra-class term
    // should not hurt held-out accuracy. Soft gate: a miss prints a warning
    // because the expected margin is small.
    let lex = ids::generate_lexicon(80, 24, 2, SEED);
    let bitmaps = glyph::radical_inventory(lex.radical_count());
    let dir = TempDir::new().expect("tempdir");
    let train_dir = dir.path().join("train");
    glyph::make_dataset(
        &lex,
        &bitmaps,
        &glyph_split(0, 64),
        4,
        DatasetRegime::Printed,
        seed::derive(SEED, "ablate-train"),
        &train_dir,
    )
    .unwrap();
    let train = glyph::load_dataset(&train_dir).unwrap();
    let eval_dir = dir.path().join("eval");
    glyph::make_dataset(
        &lex,
        &bitmaps,
        &glyph_split(64, 80),
        3,
        DatasetRegime::Printed,
        seed::derive(SEED, "ablate-eval"),
        &eval_dir,
    )
    .unwrap();
    let eval_set = glyph::load_dataset(&eval_dir).unwrap();

    let run = |lambda: f64| -> f64 {
        let mut model = ClipModel::new(ClipDims::default(), lex.vocab_size(), SEED);
        let cfg = PretrainConfig {
            lambda,
            lr: PRETRAIN_LR,
            epochs: 60,
            weight_decay: WEIGHT_DECAY,
            seed: SEED,
            ..Default::default()
        };
        clip::pretrain(&mut model, &lex, &train, &cfg).unwrap();
        let p = clip::export_candidates(
            &model,
            &lex,
            &glyph_split(0, 80),
            DecompositionLevel::Radical,
        )
        .unwrap();
        eval_glyphs(&model, &p, &eval_set)
    };
    let with_li = run(1.0);
    let without_li = run(0.0);
    let soft_ok = with_li >= without_li;
    if !soft_ok {
        println!(
            "[gate 7] WARNING: lambda=1 unseen CACC {:.3} < lambda=0 {:.3} (soft gate, not fatal)",
            with_li, without_li
        );
    }

    // (b) hard gate from the shared line models: similarity matching can hit
    // held-out classes, a dense head over training classes cannot, ever.
    let s2 = stage2();
    let hard_ok = s2.unseen_hits > 0 && s2.fc_unseen_hits == 0;
    gate(
        7,
        "ablation directions",
        hard_ok,
        &format!(
            "lambda1 {:.3} vs lambda0 {:.3} ({}), match hits {} > 0, fc hits {}/{} == 0",
            with_li,
            without_li,
            if soft_ok { "ok" } else { "warned" },
            s2.unseen_hits,
            s2.fc_unseen_hits,
            s2.fc_unseen_total
        ),
    );
    assert!(s2.unseen_hits > 0, "matching head never hit a held-out class");
    assert_eq!(
        s2.fc_unseen_hits, 0,
        "dense head emitted a class outside its output space"
    );
    let _ = &s2.match_model;
}

// ---------------------------------------------------------------------------
// gate 8: causality and termination
// ---------------------------------------------------------------------------

#[test]
fn gate_8_causality_and_termination() {
    // tiny decoder + tiny random candidate set; size is irrelevant to both
    // properties and keeps 1000 decodes cheap
    let dims = CtrDims {
        embed_dim: 8,
        model_dim: 8,
        layers: 1,
        heads: 2,
        conv_widths: vec![2, 4],
    };
    let max_len = 5;
    let model = CtrModel::new(dims, HeadMode::Match, max_len, Vec::new(), SEED);
    let mut rng = seed::rng(seed::derive(SEED, "gate8"));
    let mut p = CandidateMatrix::new(8);
    for c in 0..6 {
        let mut v: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        p.append(c, &v).unwrap();
    }

    let npix = 32 * 256;
    // causality: flipping a label token at step j must leave every decoder
    // feature at steps <= j bit-identical
    for case in 0..50 {
        let pixels: Vec<f32> = (0..npix).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let len = rng.gen_range(2..=4usize);
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(0..6)).collect();
        let j = rng.gen_range(0..len);
        let mut flipped = labels.clone();
        flipped[j] = (flipped[j] + 1 + rng.gen_range(0..5)) % 6;
        let a = model.teacher_forced_features(&pixels, &p, &labels).unwrap();
        let b = model.teacher_forced_features(&pixels, &p, &flipped).unwrap();
        let c = 8;
        for step in 0..=j {
            assert_eq!(
                a.data[step * c..(step + 1) * c],
                b.data[step * c..(step + 1) * c],
                "case {}: feature at step {} depends on the label at step {}",
                case,
                step,
                j
            );
        }
    }

    // termination: every decode returns within the length limit
    let mut truncated = 0usize;
    for _ in 0..1000 {
        let pixels: Vec<f32> = (0..npix).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let out = model.greedy_decode(&p, &pixels).unwrap();
        assert!(out.classes.len() <= max_len);
        truncated += usize::from(out.truncated);
    }

    gate(
        8,
        "causality x50 + termination x1000",
        true,
        &format!("{} of 1000 decodes hit the length cap", truncated),
    );
}

// ---------------------------------------------------------------------------
// gate 9: reproducibility through the command-line interface
// ---------------------------------------------------------------------------

fn run_cli(args: &[&str]) {
    let bin = env!("CARGO_BIN_EXE_radicalign");
    let out = Command::new(bin).args(args).output().expect("spawn cli");
    assert!(
        out.status.success(),
        "cli {:?} failed:\n{}{}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("read {}: {}", p.display(), e))
}

#[test]
fn gate_9_reproducibility() {
    let dir = TempDir::new().expect("tempdir");
    let d = |name: &str| -> PathBuf { dir.path().join(name) };
    let s = |p: &PathBuf| p.to_str().unwrap().to_owned();

    let lex_dir = d("lex");
    let data_dir = d("glyphs");
    let small = [
        "-O".to_owned(),
        "classes=24".to_owned(),
        "-O".to_owned(),
        "samples_per_class=2".to_owned(),
        "-O".to_owned(),
        "epochs=2".to_owned(),
        "-O".to_owned(),
        "split=char_zero_shot:m=20,k=4".to_owned(),
    ];
    let smallr: Vec<&str> = small.iter().map(String::as_str).collect();

    let lex_s = s(&lex_dir);
    let data_s = s(&data_dir);
    let mut args = vec!["lexicon", "build", "--out", &lex_s, "--seed", "7"];
    args.extend(&smallr);
    run_cli(&args);
    let mut args = vec![
        "synth", "--lexicon", &lex_s, "--out", &data_s, "--seed", "7", "--side", "train",
    ];
    args.extend(&smallr);
    run_cli(&args);

    let run_a = d("runA");
    let run_b = d("runB");
    for out in [&run_a, &run_b] {
        let out_s = s(out);
        let mut args = vec![
            "pretrain", "--lexicon", &lex_s, "--dataset", &data_s, "--out", &out_s, "--seed", "7",
        ];
        args.extend(&smallr);
        run_cli(&args);
    }
    let ckpt_same =
        read_bytes(&run_a.join("clip.ckpt")) == read_bytes(&run_b.join("clip.ckpt"));
    let log_same =
        read_bytes(&run_a.join("train_log.tsv")) == read_bytes(&run_b.join("train_log.tsv"));

    // save/load must preserve downstream numbers exactly: compare per-glyph
    // predictions from the in-memory graph against the reloaded checkpoint
    let lex = Lexicon::load(&lex_dir.join("lexicon.tsv"), &lex_dir.join("strokes.tsv")).unwrap();
    let model = ClipModel::load(&run_a.join("clip.ckpt")).unwrap();
    let p = clip::export_candidates(
        &model,
        &lex,
        &glyph_split(0, lex.class_count()),
        DecompositionLevel::Radical,
    )
    .unwrap();
    let data = glyph::load_dataset(&data_dir).unwrap();
    let preds: Vec<usize> = data
        .iter()
        .map(|smp| clip::ccr_recognize(&model, &smp.pixels, &p).unwrap())
        .collect();

    let resaved = d("resaved.ckpt");
    model.save(&resaved).unwrap();
    let reloaded = ClipModel::load(&resaved).unwrap();
    let p2 = clip::export_candidates(
        &reloaded,
        &lex,
        &glyph_split(0, lex.class_count()),
        DecompositionLevel::Radical,
    )
    .unwrap();
    let preds2: Vec<usize> = data
        .iter()
        .map(|smp| clip::ccr_recognize(&reloaded, &smp.pixels, &p2).unwrap())
        .collect();
    let labels: Vec<usize> = data.iter().map(|smp| smp.label[0]).collect();
    let metrics_same = preds == preds2
        && eval::cacc(&preds, &labels).unwrap() == eval::cacc(&preds2, &labels).unwrap();

    let pass = ckpt_same && log_same && metrics_same;
    gate(
        9,
        "seeded reruns + checkpoint round trip",
        pass,
        &format!(
            "ckpt identical: {}, log identical: {}, metrics preserved: {}",
            ckpt_same, log_same, metrics_same
        ),
    );
    assert!(ckpt_same, "checkpoints from identical seeded runs differ");
    assert!(log_same, "training logs from identical seeded runs differ");
    assert!(metrics_same, "metrics changed across a save/load round trip");
}
