//! Command-line front end for the full pipeline: lexicon construction,
//! dataset synthesis, dual-encoder pre-training, candidate export, line
//! recognizer training, evaluation, ablations, and embedding dumps.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use radicalign::clip::{self, ClipModel};
use radicalign::config::{RunConfig, RunManifest};
use radicalign::ctr::{self, CtrModel};
use radicalign::eval::{self, AblationParam, MetricsReport, SplitSpec};
use radicalign::glyph::{self, RadicalBitmap};
use radicalign::ids::{self, Lexicon, Token};

#[derive(Parser)]
#[command(name = "radicalign", version, about = "glyph/IDS alignment and text-line recognition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value config file; omitted keys use defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// individual overrides, e.g. -O lambda=0
    #[arg(short = 'O', long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for ov in &self.overrides {
            let (k, v) = ov
                .split_once('=')
                .with_context(|| format!("override {ov:?} is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build or lint a lexicon directory (lexicon.tsv + strokes.tsv)
    Lexicon {
        #[command(subcommand)]
        cmd: LexiconCmd,
    },
    /// Synthesize a glyph or text-line dataset
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// glyphs or lines
        #[arg(long, default_value = "glyphs")]
        kind: String,
        /// which side of the configured split to synthesize: train|test|all
        #[arg(long, default_value = "all")]
        side: String,
    },
    /// Pre-train the dual encoder on a glyph dataset
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Export canonical representations for a class range
    ExportCandidates {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// train|test|all relative to the configured split
        #[arg(long, default_value = "all")]
        side: String,
    },
    /// Train the line recognizer against frozen candidates
    TrainCtr {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate a model on a dataset and write a metrics report
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// ccr (single glyphs) or ctr (text lines)
        #[arg(long, default_value = "ctr")]
        stage: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// glyph training dataset manifest for few-shot bucket counts
        #[arg(long)]
        train_dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// restrict to one side of a split (requires --lexicon)
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value = "all")]
        side: String,
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
    /// One train+eval run per parameter value, shared seed
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// lambda | beta | head_mode | reg_term
        #[arg(long)]
        param: String,
        /// comma-separated values
        #[arg(long)]
        values: String,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        train_dataset: PathBuf,
        #[arg(long)]
        eval_dataset: PathBuf,
        /// required for beta/head_mode/reg_term sweeps
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Dump text-encoder embeddings for every class as TSV
    DumpEmbeddings {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Append one class to a candidate file without touching any weights
    AddClass {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        class_id: usize,
        /// space-separated token string, e.g. "H2 r0 r1" (END appended)
        #[arg(long)]
        ids: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum LexiconCmd {
    Build {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    Lint {
        dir: PathBuf,
    },
}

/// Exclusive ownership of a run directory for the process lifetime.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("LOCK");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                bail!(
                    "run directory {} is locked (stale LOCK file?)",
                    dir.display()
                )
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn lexicon_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("lexicon.tsv"), dir.join("strokes.tsv"))
}

fn load_lexicon(dir: &Path) -> Result<Lexicon> {
    let (lp, sp) = lexicon_paths(dir);
    Ok(Lexicon::load(&lp, &sp)?)
}

fn bitmaps_for(lex: &Lexicon) -> Vec<RadicalBitmap> {
    glyph::radical_inventory(lex.radical_count())
}

fn split_side(cfg: &RunConfig, lex: &Lexicon, side: &str) -> Result<Vec<usize>> {
    Ok(match side {
        "all" => lex.classes().collect(),
        "train" => cfg.split.apply(lex)?.0,
        "test" => cfg.split.apply(lex)?.1,
        other => bail!("unknown split side {other:?} (expected train|test|all)"),
    })
}

/// Occurrences of each class in a dataset manifest (for few-shot buckets).
fn manifest_counts(dir: &Path) -> Result<BTreeMap<usize, usize>> {
    let samples = glyph::load_dataset(dir)?;
    let mut counts = BTreeMap::new();
    for s in samples {
        for &c in &s.label {
            *counts.entry(c).or_insert(0) += 1;
        }
    }
    Ok(counts)
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Lexicon { cmd } => lexicon_cmd(cmd),
        Cmd::Synth {
            cfg,
            lexicon,
            out,
            seed,
            kind,
            side,
        } => synth_cmd(cfg, &lexicon, &out, seed, &kind, &side),
        Cmd::Pretrain {
            cfg,
            lexicon,
            dataset,
            out,
            seed,
        } => pretrain_cmd(cfg, &lexicon, &dataset, &out, seed),
        Cmd::ExportCandidates {
            cfg,
            model,
            lexicon,
            out,
            side,
        } => export_cmd(cfg, &model, &lexicon, &out, &side),
        Cmd::TrainCtr {
            cfg,
            candidates,
            dataset,
            out,
            seed,
        } => train_ctr_cmd(cfg, &candidates, &dataset, &out, seed),
        Cmd::Eval {
            cfg,
            stage,
            model,
            candidates,
            dataset,
            train_dataset,
            out,
            split,
            side,
            lexicon,
        } => eval_cmd(
            cfg,
            &stage,
            &model,
            &candidates,
            &dataset,
            train_dataset.as_deref(),
            &out,
            split.as_deref(),
            &side,
            lexicon.as_deref(),
        ),
        Cmd::Ablate {
            cfg,
            param,
            values,
            lexicon,
            train_dataset,
            eval_dataset,
            candidates,
            out,
            seed,
        } => ablate_cmd(
            cfg,
            &param,
            &values,
            &lexicon,
            &train_dataset,
            &eval_dataset,
            candidates.as_deref(),
            &out,
            seed,
        ),
        Cmd::DumpEmbeddings {
            cfg,
            model,
            lexicon,
            out,
        } => dump_cmd(cfg, &model, &lexicon, &out),
        Cmd::AddClass {
            candidates,
            model,
            lexicon,
            class_id,
            ids,
            out,
        } => add_class_cmd(&candidates, &model, &lexicon, class_id, &ids, &out),
    }
}

fn lexicon_cmd(cmd: LexiconCmd) -> Result<()> {
    match cmd {
        LexiconCmd::Build { cfg, out, seed } => {
            let cfg = cfg.resolve(Some(seed))?;
            let lex = ids::generate_lexicon(cfg.classes, cfg.radicals, cfg.max_depth, cfg.seed);
            lex.validate()?;
            glyph::check_distinct(&lex, &bitmaps_for(&lex))?;
            std::fs::create_dir_all(&out)?;
            let (lp, sp) = lexicon_paths(&out);
            lex.save(&lp, &sp)?;
            println!(
                "wrote {} classes / {} radicals, hash {}",
                lex.class_count(),
                lex.radical_count(),
                lex.hash()
            );
            Ok(())
        }
        LexiconCmd::Lint { dir } => {
            let lex = load_lexicon(&dir)?;
            lex.validate()?;
            glyph::check_distinct(&lex, &bitmaps_for(&lex))?;
            println!(
                "ok: {} classes, {} radicals, hash {}",
                lex.class_count(),
                lex.radical_count(),
                lex.hash()
            );
            Ok(())
        }
    }
}

fn synth_cmd(
    cfg: ConfigArgs,
    lexicon: &Path,
    out: &Path,
    seed: u64,
    kind: &str,
    side: &str,
) -> Result<()> {
    let cfg = cfg.resolve(Some(seed))?;
    let lex = load_lexicon(lexicon)?;
    let bitmaps = bitmaps_for(&lex);
    let classes = split_side(&cfg, &lex, side)?;
    let _lock = RunLock::acquire(out)?;
    match kind {
        "glyphs" => glyph::make_dataset(
            &lex,
            &bitmaps,
            &classes,
            cfg.samples_per_class,
            cfg.regime,
            cfg.seed,
            out,
        )?,
        "lines" => glyph::make_line_dataset(
            &lex,
            &bitmaps,
            &classes,
            cfg.lines,
            1,
            cfg.max_line_len,
            cfg.regime,
            cfg.seed,
            out,
        )?,
        other => bail!("unknown synth kind {other:?} (expected glyphs|lines)"),
    }
    println!("wrote dataset under {}", out.display());
    Ok(())
}

fn pretrain_cmd(
    cfg: ConfigArgs,
    lexicon: &Path,
    dataset: &Path,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let cfg = cfg.resolve(Some(seed))?;
    let lex = load_lexicon(lexicon)?;
    let data = glyph::load_dataset(dataset)?;
    let _lock = RunLock::acquire(out)?;
    let started = Instant::now();

    let mut model = ClipModel::new(cfg.clip_dims(), lex.vocab_size(), cfg.seed);
    let log = clip::pretrain(&mut model, &lex, &data, &cfg.pretrain_config())?;

    let ckpt = out.join("clip.ckpt");
    let log_path = out.join("train_log.tsv");
    let cfg_path = out.join("resolved.cfg");
    model.save(&ckpt)?;
    clip::save_train_log(&log_path, &log)?;
    cfg.save(&cfg_path)?;

    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        lexicon_hash: lex.hash(),
        wall_clock_ms: started.elapsed().as_millis(),
        ..Default::default()
    };
    manifest.add_file("checkpoint", &ckpt);
    manifest.add_file("train_log", &log_path);
    manifest.add_file("config", &cfg_path);
    manifest.save(&out.join("manifest.tsv"))?;
    if let Some(last) = log.last() {
        println!(
            "pretrained {} epochs, final L_T {:.4} L_I {:.4} L_pre {:.4}",
            log.len(),
            last.lt,
            last.li,
            last.lpre
        );
    }
    Ok(())
}

fn export_cmd(
    cfg: ConfigArgs,
    model: &Path,
    lexicon: &Path,
    out: &Path,
    side: &str,
) -> Result<()> {
    let cfg = cfg.resolve(None)?;
    let lex = load_lexicon(lexicon)?;
    let model = ClipModel::load(model)?;
    let classes = split_side(&cfg, &lex, side)?;
    let p = clip::export_candidates(&model, &lex, &classes, cfg.level)?;
    p.save(out)?;
    println!("wrote {} candidate rows to {}", p.len(), out.display());
    Ok(())
}

fn train_ctr_cmd(
    cfg: ConfigArgs,
    candidates: &Path,
    dataset: &Path,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let cfg = cfg.resolve(Some(seed))?;
    let p = clip::CandidateMatrix::load(candidates)?;
    let data = glyph::load_dataset(dataset)?;
    let _lock = RunLock::acquire(out)?;
    let started = Instant::now();

    let (model, log) = ctr::train_ctr(&cfg.ctr_config(), &cfg.ctr_dims(), &p, &data)?;

    let ckpt = out.join("ctr.ckpt");
    let log_path = out.join("ctr_log.tsv");
    let cfg_path = out.join("resolved.cfg");
    model.save(&ckpt)?;
    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
        for (e, l) in log.iter().enumerate() {
            writeln!(f, "{}\t{:.6}", e + 1, l)?;
        }
    }
    cfg.save(&cfg_path)?;

    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        wall_clock_ms: started.elapsed().as_millis(),
        ..Default::default()
    };
    manifest.add_file("checkpoint", &ckpt);
    manifest.add_file("train_log", &log_path);
    manifest.add_file("config", &cfg_path);
    manifest.save(&out.join("manifest.tsv"))?;
    println!(
        "trained CTR {} epochs, final loss {:.4}",
        log.len(),
        log.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    cfg: ConfigArgs,
    stage: &str,
    model: &Path,
    candidates: &Path,
    dataset: &Path,
    train_dataset: Option<&Path>,
    out: &Path,
    split: Option<&str>,
    side: &str,
    lexicon: Option<&Path>,
) -> Result<()> {
    let mut cfg = cfg.resolve(None)?;
    if let Some(s) = split {
        cfg.split = SplitSpec::parse(s)?;
    }
    let p = clip::CandidateMatrix::load(candidates)?;
    let mut data = glyph::load_dataset(dataset)?;
    if side != "all" {
        let lex_dir = lexicon.context("--lexicon required when filtering by split side")?;
        let lex = load_lexicon(lex_dir)?;
        let keep: std::collections::BTreeSet<usize> =
            split_side(&cfg, &lex, side)?.into_iter().collect();
        data.retain(|s| s.label.iter().all(|c| keep.contains(c)));
    }
    if data.is_empty() {
        bail!("no samples left to evaluate");
    }
    let _lock = RunLock::acquire(out)?;
    let started = Instant::now();

    let (preds, labels): (Vec<Vec<usize>>, Vec<Vec<usize>>) = match stage {
        "ccr" => {
            let model = ClipModel::load(model)?;
            let mut preds = Vec::with_capacity(data.len());
            let mut labels = Vec::with_capacity(data.len());
            for s in &data {
                preds.push(vec![clip::ccr_recognize(&model, &s.pixels, &p)?]);
                labels.push(s.label.clone());
            }
            (preds, labels)
        }
        "ctr" => {
            let model = CtrModel::load(model)?;
            let mut preds = Vec::with_capacity(data.len());
            let mut labels = Vec::with_capacity(data.len());
            let mut rows = Vec::with_capacity(data.len());
            for (i, s) in data.iter().enumerate() {
                let r = model.greedy_decode(&p, &s.pixels)?;
                preds.push(r.classes.clone());
                labels.push(s.label.clone());
                rows.push((i, r));
            }
            ctr::save_predictions(&out.join("predictions.tsv"), &rows)?;
            (preds, labels)
        }
        other => bail!("unknown eval stage {other:?} (expected ccr|ctr)"),
    };

    let counts = match train_dataset {
        Some(d) => manifest_counts(d)?,
        None => BTreeMap::new(),
    };
    let report = MetricsReport::from_lines(&preds, &labels, &counts, started.elapsed())?;
    report.save(&out.join("metrics.tsv"))?;
    std::fs::write(out.join("summary.txt"), report.summary() + "\n")?;
    println!("{}", report.summary());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(
    cfg: ConfigArgs,
    param: &str,
    values: &str,
    lexicon: &Path,
    train_dataset: &Path,
    eval_dataset: &Path,
    candidates: Option<&Path>,
    out: &Path,
    seed: u64,
) -> Result<()> {
    let base = cfg.resolve(Some(seed))?;
    let param = AblationParam::parse(param)?;
    let values: Vec<String> = values.split(',').map(str::to_string).collect();
    let lex = load_lexicon(lexicon)?;
    let train_data = glyph::load_dataset(train_dataset)?;
    let eval_data = glyph::load_dataset(eval_dataset)?;
    let _lock = RunLock::acquire(out)?;

    let table = eval::ablation_sweep(param, &values, |param, value| {
        let mut cfg = base.clone();
        let started = Instant::now();
        let (preds, labels): (Vec<Vec<usize>>, Vec<Vec<usize>>) = match param {
            AblationParam::Lambda => {
                cfg.set("lambda", value)?;
                let mut model = ClipModel::new(cfg.clip_dims(), lex.vocab_size(), cfg.seed);
                clip::pretrain(&mut model, &lex, &train_data, &cfg.pretrain_config())?;
                let all: Vec<usize> = lex.classes().collect();
                let p = clip::export_candidates(&model, &lex, &all, cfg.level)?;
                let mut preds = Vec::new();
                let mut labels = Vec::new();
                for s in &eval_data {
                    preds.push(vec![clip::ccr_recognize(&model, &s.pixels, &p)?]);
                    labels.push(s.label.clone());
                }
                (preds, labels)
            }
            AblationParam::Beta | AblationParam::HeadMode | AblationParam::RegTerm => {
                match param {
                    AblationParam::Beta => cfg.set("ctr_beta", value)?,
                    AblationParam::HeadMode => cfg.set("head_mode", value)?,
                    AblationParam::RegTerm => match value {
                        "on" => {}
                        "off" => cfg.ctr_beta = 0.0,
                        other => {
                            return Err(radicalign::Error::Parse {
                                file: "ablation".into(),
                                line: 0,
                                msg: format!("reg_term value {other:?} (expected on|off)"),
                            })
                        }
                    },
                    AblationParam::Lambda => unreachable!(),
                }
                let cand = candidates.ok_or_else(|| radicalign::Error::Parse {
                    file: "ablation".into(),
                    line: 0,
                    msg: "--candidates required for CTR-side sweeps".into(),
                })?;
                let p = clip::CandidateMatrix::load(cand)?;
                let (model, _log) = ctr::train_ctr(&cfg.ctr_config(), &cfg.ctr_dims(), &p, &train_data)?;
                let mut preds = Vec::new();
                let mut labels = Vec::new();
                for s in &eval_data {
                    let r = model.greedy_decode(&p, &s.pixels)?;
                    preds.push(r.classes);
                    labels.push(s.label.clone());
                }
                (preds, labels)
            }
        };
        MetricsReport::from_lines(&preds, &labels, &BTreeMap::new(), started.elapsed())
    })?;
    let table_path = out.join("ablation.tsv");
    std::fs::write(&table_path, &table)?;
    print!("{table}");
    Ok(())
}

fn dump_cmd(cfg: ConfigArgs, model: &Path, lexicon: &Path, out: &Path) -> Result<()> {
    use std::io::Write;
    let cfg = cfg.resolve(None)?;
    let lex = load_lexicon(lexicon)?;
    let model = ClipModel::load(model)?;
    let all: Vec<usize> = lex.classes().collect();
    let p = clip::export_candidates(&model, &lex, &all, cfg.level)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
    for (i, &cid) in p.class_ids.iter().enumerate() {
        let vals = p
            .row(i)
            .iter()
            .map(|v| format!("{:e}", v))
            .collect::<Vec<_>>()
            .join("\t");
        writeln!(f, "{}\t{}\t{}", cid, lex.name(cid)?, vals)?;
    }
    println!("wrote {} embeddings to {}", p.len(), out.display());
    Ok(())
}

fn add_class_cmd(
    candidates: &Path,
    model: &Path,
    lexicon: &Path,
    class_id: usize,
    ids_str: &str,
    out: &Path,
) -> Result<()> {
    let mut p = clip::CandidateMatrix::load(candidates)?;
    let model = ClipModel::load(model)?;
    let lex = load_lexicon(lexicon)?;
    let mut tokens: Vec<Token> = ids_str
        .split_whitespace()
        .map(Token::from_str)
        .collect::<radicalign::Result<_>>()?;
    if tokens.last() == Some(&Token::End) {
        tokens.pop();
    }
    // verify the sequence is a well-formed description before encoding
    ids::parse_ids(&tokens)?;
    tokens.push(Token::End);
    ctr::add_candidate(&mut p, class_id, &tokens, &model, &lex)?;
    p.save(out)?;
    println!("{} rows -> {}", p.len(), out.display());
    Ok(())
}
