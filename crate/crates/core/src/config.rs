//! Flat `key = value` run configuration with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::routing::SparsityRatio;
use crate::training::{LossConfig, ToyConfig, TrainConfig};

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "ADATTN_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::config(format!("precision must be f32 or f64, got '{other}'"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ToyConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub precision: Precision,
    pub out: PathBuf,
    pub gradcheck_step: f64,
    pub gradcheck_tol: f64,
    pub equivalence_seeds: usize,
    pub equivalence_tol: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ToyConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
            precision: Precision::F64,
            out: PathBuf::from("adattn-out"),
            gradcheck_step: 1e-5,
            gradcheck_tol: 1e-4,
            equivalence_seeds: 20,
            equivalence_tol: 1e-10,
        }
    }
}

impl RunConfig {
    /// Defaults for gradient checking: the small model of
    /// [`ToyConfig::gradcheck`], 64-bit.
    pub fn gradcheck() -> Self {
        Self {
            model: ToyConfig::gradcheck(),
            ..Self::default()
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value '{v}' for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean '{v}' for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Recognised keys, in header order.
    pub const KEYS: [&'static str; 33] = [
        "frames",
        "grid_h",
        "grid_w",
        "patch",
        "specials",
        "dim",
        "heads",
        "blocks",
        "ratios",
        "gate_hidden",
        "fw_hidden",
        "ffn_mult",
        "ref_frame",
        "variant",
        "lambda_reg",
        "entropy",
        "entropy_coeff",
        "seed",
        "precision",
        "out",
        "steps",
        "lr",
        "eval_batches",
        "bench_frames",
        "bench_patches",
        "bench_specials",
        "bench_dim",
        "bench_heads",
        "reps",
        "gradcheck_step",
        "gradcheck_tol",
        "equivalence_seeds",
        "equivalence_tol",
    ];

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "frames" => m.frames = parse(key, v)?,
            "grid_h" => m.grid_h = parse(key, v)?,
            "grid_w" => m.grid_w = parse(key, v)?,
            "patch" => m.patch = parse(key, v)?,
            "specials" => m.specials = parse(key, v)?,
            "dim" => m.dim = parse(key, v)?,
            "heads" => m.heads = parse(key, v)?,
            "blocks" => m.blocks = parse(key, v)?,
            "ratios" => {
                m.ratios = parse_list::<SparsityRatio>(key, v)?;
                self.bench.ratios = m.ratios.clone();
            }
            "gate_hidden" => m.gate_hidden = parse(key, v)?,
            "fw_hidden" => m.fw_hidden = parse(key, v)?,
            "ffn_mult" => m.ffn_mult = parse(key, v)?,
            "ref_frame" => {
                m.ref_frame_dense = parse_bool(key, v)?;
                self.bench.ref_frame_dense = m.ref_frame_dense;
            }
            "variant" => m.variant = v.parse()?,
            "lambda_reg" => self.loss.lambda_reg = parse(key, v)?,
            "entropy" => self.loss.entropy_enabled = parse_bool(key, v)?,
            "entropy_coeff" => self.loss.entropy_coeff = parse(key, v)?,
            "seed" => {
                self.train.seed = parse(key, v)?;
                self.bench.seed = self.train.seed;
            }
            "precision" => self.precision = v.parse()?,
            "out" => self.out = PathBuf::from(v),
            "steps" => self.train.steps = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "eval_batches" => self.train.eval_batches = parse(key, v)?,
            "bench_frames" => self.bench.frame_counts = parse_list(key, v)?,
            "bench_patches" => self.bench.patches = parse(key, v)?,
            "bench_specials" => self.bench.specials = parse(key, v)?,
            "bench_dim" => self.bench.dim = parse(key, v)?,
            "bench_heads" => self.bench.heads = parse(key, v)?,
            "reps" => self.bench.reps = parse(key, v)?,
            "gradcheck_step" => self.gradcheck_step = parse(key, v)?,
            "gradcheck_tol" => self.gradcheck_tol = parse(key, v)?,
            "equivalence_seeds" => self.equivalence_seeds = parse(key, v)?,
            "equivalence_tol" => self.equivalence_tol = parse(key, v)?,
            other => return Err(Error::config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let m = &self.model;
        match key {
            "frames" => m.frames.to_string(),
            "grid_h" => m.grid_h.to_string(),
            "grid_w" => m.grid_w.to_string(),
            "patch" => m.patch.to_string(),
            "specials" => m.specials.to_string(),
            "dim" => m.dim.to_string(),
            "heads" => m.heads.to_string(),
            "blocks" => m.blocks.to_string(),
            "ratios" => join(&m.ratios),
            "gate_hidden" => m.gate_hidden.to_string(),
            "fw_hidden" => m.fw_hidden.to_string(),
            "ffn_mult" => m.ffn_mult.to_string(),
            "ref_frame" => m.ref_frame_dense.to_string(),
            "variant" => m.variant.to_string(),
            "lambda_reg" => self.loss.lambda_reg.to_string(),
            "entropy" => self.loss.entropy_enabled.to_string(),
            "entropy_coeff" => self.loss.entropy_coeff.to_string(),
            "seed" => self.train.seed.to_string(),
            "precision" => self.precision.to_string(),
            "out" => self.out.display().to_string(),
            "steps" => self.train.steps.to_string(),
            "lr" => self.train.lr.to_string(),
            "eval_batches" => self.train.eval_batches.to_string(),
            "bench_frames" => join(&self.bench.frame_counts),
            "bench_patches" => self.bench.patches.to_string(),
            "bench_specials" => self.bench.specials.to_string(),
            "bench_dim" => self.bench.dim.to_string(),
            "bench_heads" => self.bench.heads.to_string(),
            "reps" => self.bench.reps.to_string(),
            "gradcheck_step" => self.gradcheck_step.to_string(),
            "gradcheck_tol" => self.gradcheck_tol.to_string(),
            "equivalence_seeds" => self.equivalence_seeds.to_string(),
            "equivalence_tol" => self.equivalence_tol.to_string(),
            _ => String::new(),
        }
    }

    /// `(key, value)` pairs of a config file body; errors carry the 1-based line.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut probe = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::ConfigLine { line: n + 1, msg };
            let Some((k, v)) = line.split_once('=') else {
                return Err(at(format!("expected 'key = value', got '{line}'")));
            };
            probe.set(k, v).map_err(|e| at(e.to_string()))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Applies every setting of a config file body.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in Self::parse_text(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if self.train.steps == 0 || self.train.lr.is_nan() || self.train.lr <= 0.0 {
            return Err(Error::config("steps must be >= 1 and lr > 0"));
        }
        if !(1e-6..=1e-4).contains(&self.gradcheck_step) {
            return Err(Error::config("gradcheck_step must lie in [1e-6, 1e-4]"));
        }
        if self.gradcheck_tol.is_nan()
            || self.equivalence_tol.is_nan()
            || self.gradcheck_tol < 0.0
            || self.equivalence_tol < 0.0
        {
            return Err(Error::config("tolerances must be non-negative"));
        }
        self.bench.validate()
    }

    /// `# key = value` lines for every setting except the output directory.
    pub fn header(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS.iter().filter(|&&k| k != "out") {
            let _ = writeln!(s, "# {k} = {}", self.get(k));
        }
        s
    }

    /// The file body that reproduces this configuration.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }
}
