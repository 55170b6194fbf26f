//! Run configuration (plain key=value text) and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::clip::{ClipDims, PretrainConfig};
use crate::ctr::{CtrConfig, CtrDims, HeadMode};
use crate::error::Error;
use crate::eval::SplitSpec;
use crate::glyph::DatasetRegime;
use crate::ids::DecompositionLevel;
use crate::Result;

/// One flat configuration covering every pipeline stage; commands read the
/// subset they need. All fields have defaults, so a config file only lists
/// overrides.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,

    // lexicon / data
    pub classes: usize,
    pub radicals: usize,
    pub max_depth: usize,
    pub level: DecompositionLevel,
    pub regime: DatasetRegime,
    pub samples_per_class: usize,
    pub lines: usize,
    pub max_line_len: usize,
    pub split: SplitSpec,

    // alignment model
    pub embed_dim: usize,
    pub text_dim: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub text_dropout: f64,
    pub hard_frac: f64,

    // line recognizer
    pub ctr_beta: f64,
    pub head_mode: HeadMode,
    pub max_decode_len: usize,
    pub ctr_layers: usize,
    pub ctr_heads: usize,
    pub ctr_batch_size: usize,
    pub ctr_lr: f64,
    pub ctr_epochs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let c = CtrConfig::default();
        let cd = ClipDims::default();
        let td = CtrDims::default();
        RunConfig {
            seed: 0,
            classes: 300,
            radicals: 24,
            max_depth: 3,
            level: p.level,
            regime: DatasetRegime::Mixed,
            samples_per_class: 6,
            lines: 600,
            max_line_len: 6,
            split: SplitSpec::CharZeroShot { m: 240, k: 60 },
            embed_dim: cd.embed_dim,
            text_dim: cd.text_dim,
            text_layers: cd.text_layers,
            text_heads: cd.text_heads,
            lambda: p.lambda,
            batch_size: p.batch_size,
            lr: p.lr,
            beta1: p.beta1,
            beta2: p.beta2,
            epochs: p.epochs,
            weight_decay: p.weight_decay,
            text_dropout: p.text_dropout,
            hard_frac: p.hard_frac,
            ctr_beta: c.beta,
            head_mode: c.head_mode,
            max_decode_len: c.max_decode_len,
            ctr_layers: td.layers,
            ctr_heads: td.heads,
            ctr_batch_size: c.batch_size,
            ctr_lr: c.lr,
            ctr_epochs: c.epochs,
        }
    }
}

fn level_name(l: DecompositionLevel) -> &'static str {
    match l {
        DecompositionLevel::Character => "character",
        DecompositionLevel::Radical => "radical",
        DecompositionLevel::Stroke => "stroke",
    }
}

fn head_name(h: HeadMode) -> &'static str {
    match h {
        HeadMode::Match => "match",
        HeadMode::Fc => "fc",
    }
}

impl RunConfig {
    /// Apply `key=value` lines from a config file. Unknown keys, duplicate
    /// keys, and malformed values are errors that carry file:line.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path)?;
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ln = i + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(&name, ln, "expected key=value"))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = seen.insert(key.to_string(), ln) {
                return Err(Error::parse(
                    &name,
                    ln,
                    format!("duplicate key {key:?} (first at line {prev})"),
                ));
            }
            self.set(key, value)
                .map_err(|e| Error::parse(&name, ln, e.to_string()))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Parse {
                file: "config".into(),
                line: 0,
                msg: format!("bad value {v:?} for {key}"),
            })
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "radicals" => self.radicals = num(key, value)?,
            "max_depth" => self.max_depth = num(key, value)?,
            "level" => self.level = DecompositionLevel::from_str(value)?,
            "regime" => self.regime = DatasetRegime::from_str(value)?,
            "samples_per_class" => self.samples_per_class = num(key, value)?,
            "lines" => self.lines = num(key, value)?,
            "max_line_len" => self.max_line_len = num(key, value)?,
            "split" => self.split = SplitSpec::parse(value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "text_dim" => self.text_dim = num(key, value)?,
            "text_layers" => self.text_layers = num(key, value)?,
            "text_heads" => self.text_heads = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "text_dropout" => self.text_dropout = num(key, value)?,
            "hard_frac" => self.hard_frac = num(key, value)?,
            "ctr_beta" => self.ctr_beta = num(key, value)?,
            "head_mode" => self.head_mode = HeadMode::parse(value)?,
            "max_decode_len" => self.max_decode_len = num(key, value)?,
            "ctr_layers" => self.ctr_layers = num(key, value)?,
            "ctr_heads" => self.ctr_heads = num(key, value)?,
            "ctr_batch_size" => self.ctr_batch_size = num(key, value)?,
            "ctr_lr" => self.ctr_lr = num(key, value)?,
            "ctr_epochs" => self.ctr_epochs = num(key, value)?,
            other => {
                return Err(Error::Parse {
                    file: "config".into(),
                    line: 0,
                    msg: format!("unknown key {other:?}"),
                })
            }
        }
        Ok(())
    }

    /// Canonical serialization of the fully resolved config.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut w = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        w("seed", self.seed.to_string());
        w("classes", self.classes.to_string());
        w("radicals", self.radicals.to_string());
        w("max_depth", self.max_depth.to_string());
        w("level", level_name(self.level).to_string());
        w("regime", self.regime.name().to_string());
        w("samples_per_class", self.samples_per_class.to_string());
        w("lines", self.lines.to_string());
        w("max_line_len", self.max_line_len.to_string());
        w("split", self.split.to_string());
        w("embed_dim", self.embed_dim.to_string());
        w("text_dim", self.text_dim.to_string());
        w("text_layers", self.text_layers.to_string());
        w("text_heads", self.text_heads.to_string());
        w("lambda", format!("{}", self.lambda));
        w("batch_size", self.batch_size.to_string());
        w("lr", format!("{}", self.lr));
        w("beta1", format!("{}", self.beta1));
        w("beta2", format!("{}", self.beta2));
        w("epochs", self.epochs.to_string());
        w("weight_decay", format!("{}", self.weight_decay));
        w("text_dropout", format!("{}", self.text_dropout));
        w("hard_frac", format!("{}", self.hard_frac));
        w("ctr_beta", format!("{}", self.ctr_beta));
        w("head_mode", head_name(self.head_mode).to_string());
        w("max_decode_len", self.max_decode_len.to_string());
        w("ctr_layers", self.ctr_layers.to_string());
        w("ctr_heads", self.ctr_heads.to_string());
        w("ctr_batch_size", self.ctr_batch_size.to_string());
        w("ctr_lr", format!("{}", self.ctr_lr));
        w("ctr_epochs", self.ctr_epochs.to_string());
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv())?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_kv().as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            lambda: self.lambda,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epochs: self.epochs,
            seed: self.seed,
            level: self.level,
            weight_decay: self.weight_decay,
            text_dropout: self.text_dropout,
            hard_frac: self.hard_frac,
        }
    }

    pub fn clip_dims(&self) -> ClipDims {
        ClipDims {
            embed_dim: self.embed_dim,
            text_dim: self.text_dim,
            text_layers: self.text_layers,
            text_heads: self.text_heads,
            ..Default::default()
        }
    }

    pub fn ctr_config(&self) -> CtrConfig {
        CtrConfig {
            beta: self.ctr_beta,
            head_mode: self.head_mode,
            max_decode_len: self.max_decode_len,
            batch_size: self.ctr_batch_size,
            lr: self.ctr_lr,
            beta1: self.beta1,
            beta2: self.beta2,
            epochs: self.ctr_epochs,
            seed: self.seed,
        }
    }

    pub fn ctr_dims(&self) -> CtrDims {
        CtrDims {
            embed_dim: self.embed_dim,
            layers: self.ctr_layers,
            heads: self.ctr_heads,
            ..Default::default()
        }
    }
}

/// Record of what a run produced; every referenced file must exist when the
/// manifest is written.
#[derive(Debug, Clone, Default)]
pub struct RunManifest {
    pub config_hash: String,
    pub lexicon_hash: String,
    pub files: Vec<(String, PathBuf)>,
    pub wall_clock_ms: u128,
}

impl RunManifest {
    pub fn add_file(&mut self, role: &str, path: impl Into<PathBuf>) {
        self.files.push((role.to_string(), path.into()));
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        for (role, f) in &self.files {
            if !f.exists() {
                return Err(Error::Checkpoint(format!(
                    "manifest references missing {role} file {}",
                    f.display()
                )));
            }
        }
        let mut s = String::new();
        let _ = writeln!(s, "config_hash\t{}", self.config_hash);
        let _ = writeln!(s, "lexicon_hash\t{}", self.lexicon_hash);
        let _ = writeln!(s, "wall_clock_ms\t{}", self.wall_clock_ms);
        for (role, f) in &self.files {
            let _ = writeln!(s, "file\t{}\t{}", role, f.display());
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_kv() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        cfg.save(&path).unwrap();
        let mut back = RunConfig::default();
        back.seed = 999; // will be overwritten by the file
        back.apply_file(&path).unwrap();
        assert_eq!(back.to_kv(), cfg.to_kv());
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn parse_errors_carry_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");

        std::fs::write(&path, "# comment\nseed=1\nnonsense\n").unwrap();
        let err = RunConfig::default().apply_file(&path).unwrap_err();
        assert!(err.to_string().contains("bad.cfg:3"), "{err}");

        std::fs::write(&path, "seed=abc\n").unwrap();
        let err = RunConfig::default().apply_file(&path).unwrap_err();
        assert!(err.to_string().contains("bad.cfg:1"), "{err}");

        std::fs::write(&path, "bogus_key=1\n").unwrap();
        assert!(RunConfig::default().apply_file(&path).is_err());

        std::fs::write(&path, "seed=1\nseed=2\n").unwrap();
        let err = RunConfig::default().apply_file(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        b.lambda = 0.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn manifest_requires_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = RunManifest {
            config_hash: "a".into(),
            lexicon_hash: "b".into(),
            wall_clock_ms: 5,
            ..Default::default()
        };
        m.add_file("checkpoint", dir.path().join("missing.ckpt"));
        assert!(m.save(&dir.path().join("manifest.tsv")).is_err());

        let ck = dir.path().join("real.ckpt");
        std::fs::write(&ck, b"x").unwrap();
        let mut m2 = RunManifest::default();
        m2.add_file("checkpoint", &ck);
        m2.save(&dir.path().join("manifest.tsv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert!(text.contains("file\tcheckpoint\t"));
    }
}
