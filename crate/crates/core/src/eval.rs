//! Split construction, sequence metrics, few-shot bucket reports, and
//! ablation sweep plumbing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Duration;

use crate::error::Error;
use crate::ids::Lexicon;
use crate::Result;

// ---------------------------------------------------------------------------
// splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSpec {
    /// first m classes train, last k classes test
    CharZeroShot { m: usize, k: usize },
    /// classes containing a radical with global frequency < n go to test
    RadicalZeroShot { n: usize },
    Full,
}

impl SplitSpec {
    /// Parse "char_zero_shot:m=240,k=60", "radical_zero_shot:n=3" or "full".
    pub fn parse(s: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Parse {
            file: "split".into(),
            line: 0,
            msg: format!("{msg} in {s:?}"),
        };
        let (kind, rest) = match s.split_once(':') {
            Some((k, r)) => (k, r),
            None => (s, ""),
        };
        let args: BTreeMap<&str, usize> = rest
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| {
                let (k, v) = p.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                let v = v.parse().map_err(|_| bad("bad integer"))?;
                Ok((k, v))
            })
            .collect::<Result<_>>()?;
        let arg = |name: &str| args.get(name).copied().ok_or_else(|| bad("missing parameter"));
        match kind {
            "full" => Ok(SplitSpec::Full),
            "char_zero_shot" => Ok(SplitSpec::CharZeroShot {
                m: arg("m")?,
                k: arg("k")?,
            }),
            "radical_zero_shot" => Ok(SplitSpec::RadicalZeroShot { n: arg("n")? }),
            _ => Err(bad("unknown split kind")),
        }
    }

    pub fn apply(&self, lex: &Lexicon) -> Result<(Vec<usize>, Vec<usize>)> {
        match *self {
            SplitSpec::Full => Ok((lex.classes().collect(), lex.classes().collect())),
            SplitSpec::CharZeroShot { m, k } => make_char_zero_shot_split(lex, m, k),
            SplitSpec::RadicalZeroShot { n } => make_radical_zero_shot_split(lex, n),
        }
    }
}

impl std::fmt::Display for SplitSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SplitSpec::Full => write!(f, "full"),
            SplitSpec::CharZeroShot { m, k } => write!(f, "char_zero_shot:m={m},k={k}"),
            SplitSpec::RadicalZeroShot { n } => write!(f, "radical_zero_shot:n={n}"),
        }
    }
}

/// Train on classes [0, m), test on the last k classes.
pub fn make_char_zero_shot_split(
    lex: &Lexicon,
    m: usize,
    k: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let total = lex.class_count();
    if m == 0 || k == 0 || m + k > total {
        return Err(Error::SplitOverflow(m, k, total));
    }
    Ok(((0..m).collect(), (total - k..total).collect()))
}

/// Classes containing at least one radical with global frequency < n form
/// the test side; frequency is computed over the full lexicon.
pub fn make_radical_zero_shot_split(lex: &Lexicon, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let all: Vec<usize> = lex.classes().collect();
    let freq = lex.radical_frequencies(&all)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in lex.classes() {
        let rare = lex
            .tree(c)?
            .leaves()
            .iter()
            .any(|r| freq.get(r).copied().unwrap_or(0) < n);
        if rare {
            test.push(c);
        } else {
            train.push(c);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::DegenerateSplit(format!(
            "train {} / test {} classes",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

/// Fraction of exact class matches.
pub fn cacc(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Fraction of exactly matching lines.
pub fn lacc(preds: &[Vec<usize>], labels: &[Vec<usize>]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Levenshtein distance over class-id tokens (two-row DP).
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// 1 - mean(ED / Maxlen); a both-empty pair contributes zero error.
pub fn ned(preds: &[Vec<usize>], labels: &[Vec<usize>]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::LengthMismatch(preds.len(), labels.len()));
    }
    let mut total = 0.0;
    for (p, l) in preds.iter().zip(labels) {
        let maxlen = p.len().max(l.len());
        if maxlen > 0 {
            total += edit_distance(p, l) as f64 / maxlen as f64;
        }
    }
    Ok(1.0 - total / preds.len() as f64)
}

// ---------------------------------------------------------------------------
// few-shot buckets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ShotBucket {
    Zero,
    OneToFifty,
    OverFifty,
}

impl ShotBucket {
    fn of(count: usize) -> Self {
        match count {
            0 => ShotBucket::Zero,
            1..=50 => ShotBucket::OneToFifty,
            _ => ShotBucket::OverFifty,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShotBucket::Zero => "0",
            ShotBucket::OneToFifty => "1-50",
            ShotBucket::OverFifty => ">50",
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BucketStats {
    pub correct: usize,
    pub total: usize,
}

impl BucketStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Align one prediction against its label by edit-distance backtrace and
/// mark each label token correct iff the alignment keeps it (a match, not a
/// substitution/deletion).
fn align_hits(pred: &[usize], label: &[usize]) -> Vec<bool> {
    let (n, m) = (label.len(), pred.len());
    // full DP matrix for the backtrace
    let mut d = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        d[at(i, 0)] = i;
    }
    for j in 0..=m {
        d[at(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[at(i - 1, j - 1)] + usize::from(label[i - 1] != pred[j - 1]);
            d[at(i, j)] = sub.min(d[at(i - 1, j)] + 1).min(d[at(i, j - 1)] + 1);
        }
    }
    let mut hits = vec![false; n];
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0
            && j > 0
            && d[at(i, j)] == d[at(i - 1, j - 1)] + usize::from(label[i - 1] != pred[j - 1])
        {
            hits[i - 1] = label[i - 1] == pred[j - 1];
            i -= 1;
            j -= 1;
        } else if i > 0 && d[at(i, j)] == d[at(i - 1, j)] + 1 {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    hits
}

/// Per-character accuracy grouped by training-occurrence buckets
/// {0, 1-50, >50}. `train_counts` maps class id to occurrences in the
/// training manifest; every test character lands in exactly one bucket.
pub fn few_shot_report(
    train_counts: &BTreeMap<usize, usize>,
    preds: &[Vec<usize>],
    labels: &[Vec<usize>],
) -> BTreeMap<ShotBucket, BucketStats> {
    let mut per_class: BTreeMap<usize, BucketStats> = BTreeMap::new();
    for (p, l) in preds.iter().zip(labels) {
        let hits = align_hits(p, l);
        for (t, &cid) in l.iter().enumerate() {
            let e = per_class.entry(cid).or_default();
            e.total += 1;
            e.correct += usize::from(hits[t]);
        }
    }
    let mut out: BTreeMap<ShotBucket, BucketStats> = BTreeMap::new();
    for (cid, stats) in per_class {
        let shots = train_counts.get(&cid).copied().unwrap_or(0);
        let e = out.entry(ShotBucket::of(shots)).or_default();
        e.correct += stats.correct;
        e.total += stats.total;
    }
    out
}

// ---------------------------------------------------------------------------
// reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub cacc: f64,
    pub lacc: f64,
    pub ned: f64,
    pub samples: usize,
    pub buckets: BTreeMap<ShotBucket, BucketStats>,
    pub per_batch: Duration,
}

impl MetricsReport {
    pub fn from_lines(
        preds: &[Vec<usize>],
        labels: &[Vec<usize>],
        train_counts: &BTreeMap<usize, usize>,
        elapsed: Duration,
    ) -> Result<Self> {
        let flat_p: Vec<usize> = preds.iter().flatten().copied().collect();
        let flat_l: Vec<usize> = labels.iter().flatten().copied().collect();
        // exact-position CACC only makes sense when lengths line up; fall
        // back to backtrace counting otherwise
        let cacc_v = if flat_p.len() == flat_l.len() && !flat_p.is_empty() {
            cacc(&flat_p, &flat_l)?
        } else {
            let mut hit = 0usize;
            let mut tot = 0usize;
            for (p, l) in preds.iter().zip(labels) {
                let hits = align_hits(p, l);
                hit += hits.iter().filter(|&&h| h).count();
                tot += l.len();
            }
            if tot == 0 {
                0.0
            } else {
                hit as f64 / tot as f64
            }
        };
        Ok(MetricsReport {
            cacc: cacc_v,
            lacc: lacc(preds, labels)?,
            ned: ned(preds, labels)?,
            samples: preds.len(),
            buckets: few_shot_report(train_counts, preds, labels),
            per_batch: elapsed.checked_div(preds.len() as u32).unwrap_or_default(),
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "metric\tvalue");
        let _ = writeln!(s, "cacc\t{:.6}", self.cacc);
        let _ = writeln!(s, "lacc\t{:.6}", self.lacc);
        let _ = writeln!(s, "ned\t{:.6}", self.ned);
        let _ = writeln!(s, "samples\t{}", self.samples);
        for (b, st) in &self.buckets {
            let _ = writeln!(
                s,
                "shots_{}\t{:.6}\t{}/{}",
                b.name(),
                st.accuracy(),
                st.correct,
                st.total
            );
        }
        let _ = writeln!(s, "per_sample_us\t{}", self.per_batch.as_micros());
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} samples: CACC {:.2}%  LACC {:.2}%  NED {:.4}",
            self.samples,
            self.cacc * 100.0,
            self.lacc * 100.0,
            self.ned
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// ablation sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationParam {
    Lambda,
    Beta,
    HeadMode,
    RegTerm,
}

impl AblationParam {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(AblationParam::Lambda),
            "beta" => Ok(AblationParam::Beta),
            "head_mode" => Ok(AblationParam::HeadMode),
            "reg_term" => Ok(AblationParam::RegTerm),
            other => Err(Error::Parse {
                file: "ablation".into(),
                line: 0,
                msg: format!("unknown ablation parameter {other:?}"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationParam::Lambda => "lambda",
            AblationParam::Beta => "beta",
            AblationParam::HeadMode => "head_mode",
            AblationParam::RegTerm => "reg_term",
        }
    }
}

/// One train+eval run per value under a shared seed; the caller supplies
/// the run closure, this assembles the TSV table.
pub fn ablation_sweep<F>(
    param: AblationParam,
    values: &[String],
    mut run: F,
) -> Result<String>
where
    F: FnMut(AblationParam, &str) -> Result<MetricsReport>,
{
    if values.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut table = format!("{}\tcacc\tlacc\tned\tsamples\n", param.name());
    for v in values {
        let r = run(param, v)?;
        let _ = writeln!(
            table,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            v, r.cacc, r.lacc, r.ned, r.samples
        );
    }
    Ok(table)
}
