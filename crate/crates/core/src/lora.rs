//! Low-rank adapter algebra and fine-tune configuration files.
//!
//! A frozen base matrix `W0` (d_out × d_in) is adapted by a rank-r product
//! `up · down`, with `down` (r × d_in, conventionally `A`) drawn from a seeded
//! Gaussian and `up` (d_out × r, conventionally `B`) starting at zero:
//!
//! ```text
//! h = W0·x + scale · up·(down·x)
//! ```
//!
//! `scale` defaults to 1, which is the plain update with no `alpha / r`
//! factor. The product `up·down` is never formed on the forward path.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::num::Scalar;

pub const DEFAULT_INIT_SIGMA: f64 = 0.02;

#[derive(Debug, Error)]
pub enum LoraError {
    #[error("rank {rank} exceeds min(d_in, d_out) = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("invalid init sigma {0}")]
    InvalidSigma(f64),
    #[error("missing field {0}")]
    MissingField(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, LoraError> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(LoraError::ShapeMismatch {
                expected: format!("rows of length {cols}"),
                got: format!("row of length {}", bad.len()),
            });
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    pub fn mul_vec(&self, x: &[T]) -> Result<Vec<T>, LoraError> {
        if x.len() != self.cols {
            return Err(LoraError::ShapeMismatch {
                expected: format!("vector of length {}", self.cols),
                got: format!("length {}", x.len()),
            });
        }
        Ok((0..self.rows).map(|i| crate::num::dot(self.row(i), x)).collect())
    }

    pub fn matmul(&self, rhs: &Matrix<T>) -> Result<Matrix<T>, LoraError> {
        if self.cols != rhs.rows {
            return Err(LoraError::ShapeMismatch {
                expected: format!("{} rows on the right", self.cols),
                got: format!("{:?}", rhs.shape()),
            });
        }
        Ok(Matrix::from_fn(self.rows, rhs.cols, |i, j| {
            (0..self.cols).fold(T::zero(), |acc, k| acc + self.get(i, k) * rhs.get(k, j))
        }))
    }
}

/// Frozen base weights plus a trainable low-rank pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter<T> {
    base: Matrix<T>,
    /// r × d_in
    down: Matrix<T>,
    /// d_out × r
    up: Matrix<T>,
    rank: usize,
    scale: T,
}

fn check_rank(rank: usize, d_out: usize, d_in: usize) -> Result<(), LoraError> {
    if rank == 0 {
        return Err(LoraError::ZeroRank);
    }
    let max = d_in.min(d_out);
    if rank > max {
        return Err(LoraError::RankTooLarge { rank, max });
    }
    Ok(())
}

impl<T: Scalar> LowRankAdapter<T> {
    /// Fresh adapter: `down` ~ N(0, sigma²) from `seed`, `up` = 0.
    pub fn init(base: Matrix<T>, rank: usize, seed: u64, sigma: f64) -> Result<Self, LoraError> {
        let (d_out, d_in) = base.shape();
        check_rank(rank, d_out, d_in)?;
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(LoraError::InvalidSigma(sigma));
        }
        let normal = Normal::new(0.0, sigma).map_err(|_| LoraError::InvalidSigma(sigma))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let down = Matrix::from_fn(rank, d_in, |_, _| T::of(normal.sample(&mut rng)));
        Ok(LowRankAdapter {
            base,
            down,
            up: Matrix::zeros(d_out, rank),
            rank,
            scale: T::one(),
        })
    }

    /// Adapter with explicit factors, e.g. after training.
    pub fn from_parts(base: Matrix<T>, down: Matrix<T>, up: Matrix<T>) -> Result<Self, LoraError> {
        let (d_out, d_in) = base.shape();
        let rank = down.rows();
        check_rank(rank, d_out, d_in)?;
        if down.cols() != d_in || up.shape() != (d_out, rank) {
            return Err(LoraError::ShapeMismatch {
                expected: format!("down {rank}x{d_in}, up {d_out}x{rank}"),
                got: format!("down {:?}, up {:?}", down.shape(), up.shape()),
            });
        }
        Ok(LowRankAdapter {
            base,
            down,
            up,
            rank,
            scale: T::one(),
        })
    }

    pub fn with_scale(mut self, scale: T) -> Self {
        self.scale = scale;
        self
    }

    pub fn base(&self) -> &Matrix<T> {
        &self.base
    }

    pub fn down(&self) -> &Matrix<T> {
        &self.down
    }

    pub fn up(&self) -> &Matrix<T> {
        &self.up
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn d_in(&self) -> usize {
        self.base.cols()
    }

    pub fn d_out(&self) -> usize {
        self.base.rows()
    }

    /// `W0·x + scale · up·(down·x)`.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, LoraError> {
        let mut h = self.base.mul_vec(x)?;
        let projected = self.down.mul_vec(x)?;
        let delta = self.up.mul_vec(&projected)?;
        for (hi, di) in h.iter_mut().zip(delta) {
            *hi = *hi + self.scale * di;
        }
        Ok(h)
    }

    /// `W0 + scale · up·down`. Entries whose update is exactly zero keep the
    /// base value bit for bit.
    pub fn merge(&self) -> Matrix<T> {
        let delta = self.up.matmul(&self.down).expect("shapes checked at construction");
        Matrix::from_fn(self.d_out(), self.d_in(), |i, j| {
            let d = self.scale * delta.get(i, j);
            if d.is_zero() {
                self.base.get(i, j)
            } else {
                self.base.get(i, j) + d
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamSavings {
    pub full: u64,
    pub lora: u64,
    /// `lora / full`
    pub ratio: f64,
}

impl ParamSavings {
    pub fn ratio_percent(&self) -> f64 {
        self.ratio * 100.0
    }
}

/// Trainable parameter counts for full fine-tuning versus a rank-`rank` adapter.
pub fn param_savings(d_in: u64, d_out: u64, rank: u64) -> Result<ParamSavings, LoraError> {
    if d_in == 0 || d_out == 0 {
        return Err(LoraError::InvalidConfig("dimensions must be positive".into()));
    }
    check_rank(rank as usize, d_out as usize, d_in as usize)?;
    let full = d_in * d_out;
    let lora = rank * (d_in + d_out);
    Ok(ParamSavings {
        full,
        lora,
        ratio: lora as f64 / full as f64,
    })
}

/// Fine-tune hyperparameters, written as `key=value` lines for translation
/// into an external training tool's own format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub cutoff_len: u32,
    pub batch_size: u32,
    pub compute_type: String,
    pub lr_scheduler: String,
    pub optimizer: String,
    pub lora_rank: u32,
    pub lora_target: String,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            learning_rate: 0.00005,
            epochs: 30,
            cutoff_len: 1024,
            batch_size: 2,
            compute_type: "fp16".into(),
            lr_scheduler: "cosine".into(),
            optimizer: "adamw_torch".into(),
            lora_rank: 8,
            lora_target: "all".into(),
        }
    }
}

const CONFIG_KEYS: [&str; 9] = [
    "learning_rate",
    "epochs",
    "cutoff_len",
    "batch_size",
    "compute_type",
    "lr_scheduler",
    "optimizer",
    "lora_rank",
    "lora_target",
];

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), LoraError> {
        let bad = |m: &str| Err(LoraError::InvalidConfig(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 || self.cutoff_len == 0 || self.batch_size == 0 {
            return bad("epochs, cutoff_len and batch_size must be positive");
        }
        if self.lora_rank == 0 {
            return bad("lora_rank must be at least 1");
        }
        for (k, v) in [
            ("compute_type", &self.compute_type),
            ("lr_scheduler", &self.lr_scheduler),
            ("optimizer", &self.optimizer),
            ("lora_target", &self.lora_target),
        ] {
            if v.trim().is_empty() || v.contains(['\n', '\r', '=']) || v.trim() != v {
                return bad(&format!("{k} must be a non-empty single-line value"));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, LoraError> {
        let mut values: [Option<(usize, String)>; 9] = Default::default();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| LoraError::Parse {
                line: line_no,
                message: "expected key=value".into(),
            })?;
            let key = key.trim();
            let slot = CONFIG_KEYS
                .iter()
                .position(|k| *k == key)
                .ok_or_else(|| LoraError::Parse {
                    line: line_no,
                    message: format!("unknown key {key:?}"),
                })?;
            if values[slot].is_some() {
                return Err(LoraError::Parse {
                    line: line_no,
                    message: format!("duplicate key {key:?}"),
                });
            }
            values[slot] = Some((line_no, value.trim().to_string()));
        }
        let take = |i: usize| values[i].clone().ok_or(LoraError::MissingField(CONFIG_KEYS[i]));
        fn num<N: std::str::FromStr>((line, v): (usize, String)) -> Result<N, LoraError> {
            v.parse().map_err(|_| LoraError::Parse {
                line,
                message: format!("invalid number {v:?}"),
            })
        }
        let cfg = FinetuneConfig {
            learning_rate: num(take(0)?)?,
            epochs: num(take(1)?)?,
            cutoff_len: num(take(2)?)?,
            batch_size: num(take(3)?)?,
            compute_type: take(4)?.1,
            lr_scheduler: take(5)?.1,
            optimizer: take(6)?.1,
            lora_rank: num(take(7)?)?,
            lora_target: take(8)?.1,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self, path: &Path) -> Result<(), LoraError> {
        self.validate()?;
        fs::write(path, self.to_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LoraError> {
        Self::parse(&fs::read_to_string(path)?)
    }
}

impl fmt::Display for FinetuneConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "learning_rate={}", self.learning_rate)?;
        writeln!(f, "epochs={}", self.epochs)?;
        writeln!(f, "cutoff_len={}", self.cutoff_len)?;
        writeln!(f, "batch_size={}", self.batch_size)?;
        writeln!(f, "compute_type={}", self.compute_type)?;
        writeln!(f, "lr_scheduler={}", self.lr_scheduler)?;
        writeln!(f, "optimizer={}", self.optimizer)?;
        writeln!(f, "lora_rank={}", self.lora_rank)?;
        writeln!(f, "lora_target={}", self.lora_target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_example() {
        let a = LowRankAdapter::from_parts(Matrix::identity(2), m(&[&[1.0, 0.0]]), m(&[&[1.0], &[0.0]]))
            .unwrap();
        assert_eq!(a.forward(&[1.0, 2.0]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(a.merge(), m(&[&[2.0, 0.0], &[0.0, 1.0]]));
        assert_eq!(a.forward(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn fresh_adapter_is_exact_identity() {
        let base = m(&[&[0.3, -1.7, 2.0], &[-0.0, 5.5, 1e-300]]);
        let a = LowRankAdapter::init(base.clone(), 2, 7, DEFAULT_INIT_SIGMA).unwrap();
        assert!(a.up().is_zero());
        let x = [0.1, -3.0, 7.25];
        assert_eq!(a.forward(&x).unwrap(), base.mul_vec(&x).unwrap());
        let merged = a.merge();
        for (p, q) in merged.as_slice().iter().zip(base.as_slice()) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
    }

    #[test]
    fn init_is_seeded_and_rank_checked() {
        let base = Matrix::<f64>::zeros(4, 3);
        let a = LowRankAdapter::init(base.clone(), 2, 42, 0.02).unwrap();
        let b = LowRankAdapter::init(base.clone(), 2, 42, 0.02).unwrap();
        let c = LowRankAdapter::init(base.clone(), 2, 43, 0.02).unwrap();
        assert_eq!(a.down(), b.down());
        assert_ne!(a.down(), c.down());
        assert!(matches!(
            LowRankAdapter::init(base.clone(), 4, 0, 0.02),
            Err(LoraError::RankTooLarge { rank: 4, max: 3 })
        ));
        assert!(matches!(LowRankAdapter::init(base.clone(), 0, 0, 0.02), Err(LoraError::ZeroRank)));
        assert!(LowRankAdapter::init(base, 1, 0, -1.0).is_err());
    }

    #[test]
    fn init_sample_spread_matches_sigma() {
        let a = LowRankAdapter::<f64>::init(Matrix::zeros(64, 64), 64, 1, 0.02).unwrap();
        let xs = a.down().as_slice();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.002, "{mean}");
        assert!((var.sqrt() - 0.02).abs() < 0.002, "{}", var.sqrt());
    }

    #[test]
    fn shape_errors() {
        let a = LowRankAdapter::<f64>::init(Matrix::zeros(2, 3), 1, 0, 0.02).unwrap();
        assert!(matches!(a.forward(&[1.0, 2.0]), Err(LoraError::ShapeMismatch { .. })));
        assert!(LowRankAdapter::from_parts(Matrix::<f64>::zeros(2, 3), Matrix::zeros(1, 2), Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn works_in_f32() {
        let a = LowRankAdapter::<f32>::from_parts(
            Matrix::identity(2),
            Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap(),
            Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap(),
        )
        .unwrap();
        assert_eq!(a.forward(&[1.0, 2.0]).unwrap(), vec![2.0f32, 2.0]);
    }

    #[test]
    fn scale_extension() {
        let a = LowRankAdapter::from_parts(Matrix::identity(2), m(&[&[1.0, 0.0]]), m(&[&[1.0], &[0.0]]))
            .unwrap()
            .with_scale(0.5);
        assert_eq!(a.forward(&[1.0, 2.0]).unwrap(), vec![1.5, 2.0]);
    }

    #[test]
    fn savings_examples() {
        let s = param_savings(4096, 4096, 8).unwrap();
        assert_eq!((s.full, s.lora), (16_777_216, 65_536));
        assert_eq!(s.ratio_percent(), 0.390625);
        assert_eq!(param_savings(16, 16, 16).unwrap().ratio, 2.0);
        let s = param_savings(4, 2, 1).unwrap();
        assert_eq!((s.full, s.lora, s.ratio), (8, 6, 0.75));
        assert!(param_savings(4, 2, 3).is_err());
    }

    #[test]
    fn config_defaults_text() {
        let text = FinetuneConfig::default().to_string();
        assert_eq!(
            text,
            "learning_rate=0.00005\nepochs=30\ncutoff_len=1024\nbatch_size=2\ncompute_type=fp16\n\
             lr_scheduler=cosine\noptimizer=adamw_torch\nlora_rank=8\nlora_target=all\n"
        );
        assert_eq!(FinetuneConfig::parse(&text).unwrap(), FinetuneConfig::default());
    }

    #[test]
    fn config_parse_errors() {
        let text = FinetuneConfig::default().to_string();
        let missing: String = text.lines().filter(|l| !l.starts_with("optimizer")).map(|l| format!("{l}\n")).collect();
        assert!(matches!(FinetuneConfig::parse(&missing), Err(LoraError::MissingField("optimizer"))));
        assert!(matches!(FinetuneConfig::parse(&format!("{text}epochs=3\n")), Err(LoraError::Parse { .. })));
        assert!(matches!(FinetuneConfig::parse(&format!("{text}bogus=1\n")), Err(LoraError::Parse { .. })));
        let zero_rank = text.replace("lora_rank=8", "lora_rank=0");
        assert!(matches!(FinetuneConfig::parse(&zero_rank), Err(LoraError::InvalidConfig(_))));
        assert!(FinetuneConfig::parse(&text.replace("epochs=30", "epochs=x")).is_err());
    }

    #[test]
    fn config_file_io() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.txt");
        FinetuneConfig::default().emit(&path).unwrap();
        assert_eq!(FinetuneConfig::load(&path).unwrap(), FinetuneConfig::default());
        assert!(matches!(
            FinetuneConfig::default().emit(&dir.path().join("no/such/dir/cfg.txt")),
            Err(LoraError::Io(_))
        ));
    }

    fn random_adapter(seed: u64) -> (LowRankAdapter<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_out = rng.random_range(1..=8);
        let d_in = rng.random_range(1..=8);
        let r = rng.random_range(1..=d_in.min(d_out));
        let mut gen = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-2.0..2.0));
        let base = gen(d_out, d_in);
        let down = gen(r, d_in);
        let up = gen(d_out, r);
        let x = (0..d_in).map(|i| (i as f64 * 0.37).sin()).collect();
        (LowRankAdapter::from_parts(base, down, up).unwrap(), x)
    }

    proptest! {
        #[test]
        fn forward_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let (a, x) = random_adapter(seed);
            let y: Vec<f64> = x.iter().map(|v| v * 0.5 - 1.0).collect();
            let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| alpha * p + beta * q).collect();
            let lhs = a.forward(&combo).unwrap();
            let fx = a.forward(&x).unwrap();
            let fy = a.forward(&y).unwrap();
            for i in 0..lhs.len() {
                let rhs = alpha * fx[i] + beta * fy[i];
                prop_assert!((lhs[i] - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            }
        }

        #[test]
        fn forward_matches_merged(seed in any::<u64>()) {
            let (a, x) = random_adapter(seed);
            let via_merge = a.merge().mul_vec(&x).unwrap();
            let direct = a.forward(&x).unwrap();
            for (p, q) in direct.iter().zip(&via_merge) {
                prop_assert!((p - q).abs() <= 1e-10 * p.abs().max(q.abs()).max(1.0));
            }
        }
    }
}
