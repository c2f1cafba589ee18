//! Wall-time scaling of softmax, linear and MLLA attention in the token
//! count, with median timing and a log-log slope fit.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionInput, FeatureMap, Mlla};
use crate::autodiff::Tape;
use crate::error::{invalid, Result};
use crate::kernels::ScoreGate;
use crate::nn::{random_tensor, seeded_rng, Init, ParamStore};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Softmax,
    Linear,
    Mlla,
}

impl Kernel {
    pub const ALL: [Kernel; 3] = [Kernel::Softmax, Kernel::Linear, Kernel::Mlla];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Softmax => "softmax",
            Kernel::Linear => "linear",
            Kernel::Mlla => "mlla",
        }
    }

    /// Accepted range for the time ratio of one doubling of N.
    pub fn doubling_bounds(self) -> (f64, f64) {
        match self {
            Kernel::Softmax => (3.0, 6.0),
            Kernel::Linear | Kernel::Mlla => (1.5, 3.0),
        }
    }
}

impl std::str::FromStr for Kernel {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid("Kernel", format!("unknown kernel {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub grid: Vec<usize>,
    pub dim: usize,
    pub head_dim: usize,
    pub reps: usize,
    pub warmup: usize,
    pub kernels: Vec<Kernel>,
    pub seed: u64,
    /// A timed sample repeats the kernel until it spans at least this long.
    pub min_sample: Duration,
    /// Required gap between the softmax slope and each linear-time slope.
    pub min_slope_gap: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            grid: vec![1024, 2048, 4096],
            dim: 64,
            head_dim: 16,
            reps: 5,
            warmup: 2,
            kernels: Kernel::ALL.to_vec(),
            seed: 0,
            min_sample: Duration::from_millis(20),
            min_slope_gap: 0.6,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 2 || self.grid.contains(&0) || self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("BenchConfig", "grid needs at least two increasing positive sizes"));
        }
        if self.head_dim == 0 || self.dim % self.head_dim != 0 || self.head_dim % 2 != 0 {
            return Err(invalid("BenchConfig", format!("dim {} must split into even heads of {}", self.dim, self.head_dim)));
        }
        if self.reps == 0 || self.kernels.is_empty() {
            return Err(invalid("BenchConfig", "need at least one repetition and one kernel"));
        }
        Ok(())
    }

    pub fn heads(&self) -> usize {
        self.dim / self.head_dim
    }
}

/// Image grid for `n` tokens: `h = 2^⌊log₂ n / 2⌋`, `w = n / h`.
pub fn token_grid(n: usize) -> Result<(usize, usize)> {
    let h = 1usize << (n.ilog2() / 2);
    if n % h != 0 {
        return Err(invalid("token_grid", format!("{n} tokens do not tile a {h}-row grid")));
    }
    Ok((h, n / h))
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub kernel: Kernel,
    pub n: usize,
    pub median_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub reps: usize,
    /// Calls averaged inside one timed sample.
    pub inner: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelSummary {
    pub kernel: Kernel,
    pub slope: f64,
    /// `t(N_{i+1}) / t(N_i)` over consecutive grid points.
    pub ratios: Vec<f64>,
    pub ratios_ok: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub rows: Vec<BenchRow>,
    pub summaries: Vec<KernelSummary>,
    /// Softmax slope minus the largest linear-time slope, when both ran.
    pub slope_gap: Option<f64>,
    pub elapsed_s: f64,
}

impl BenchReport {
    pub fn csv_header() -> &'static str {
        "kernel,n,median_s,min_s,max_s,reps,inner"
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::csv_header());
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.6e},{:.6e},{:.6e},{},{}\n",
                r.kernel.name(),
                r.n,
                r.median_s,
                r.min_s,
                r.max_s,
                r.reps,
                r.inner
            ));
        }
        s
    }

    pub fn summary(&self, kernel: Kernel) -> Option<&KernelSummary> {
        self.summaries.iter().find(|s| s.kernel == kernel)
    }

    pub fn slope_gap_ok(&self) -> bool {
        self.slope_gap.is_some_and(|g| g > self.config.min_slope_gap)
    }

    pub fn passed(&self) -> bool {
        self.summaries.iter().all(|s| s.ratios_ok) && self.slope_gap.is_none_or(|_| self.slope_gap_ok())
    }
}

/// Least-squares slope of `ln t` against `ln n`.
pub fn loglog_slope(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / k, ys.iter().sum::<f64>() / k);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Repetitions needed so one sample spans `min_sample`, from a single
/// untimed-overhead probe call.
fn inner_count(probe: Duration, min_sample: Duration) -> usize {
    if probe >= min_sample {
        return 1;
    }
    let per = probe.as_secs_f64().max(1e-9);
    (min_sample.as_secs_f64() / per).ceil() as usize
}

fn time_samples(cfg: &BenchConfig, mut call: impl FnMut() -> Result<()>) -> Result<(Vec<f64>, usize)> {
    let t = Instant::now();
    call()?;
    let inner = inner_count(t.elapsed(), cfg.min_sample);
    for _ in 0..cfg.warmup {
        for _ in 0..inner {
            call()?;
        }
    }
    let mut samples = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let t = Instant::now();
        for _ in 0..inner {
            call()?;
        }
        samples.push(t.elapsed().as_secs_f64() / inner as f64);
    }
    Ok((samples, inner))
}

fn bench_one(cfg: &BenchConfig, kernel: Kernel, n: usize) -> Result<BenchRow> {
    let mut rng = seeded_rng(cfg.seed ^ (n as u64).rotate_left(17));
    let d = cfg.dim;
    let heads = cfg.heads();
    let (mut samples, inner) = match kernel {
        Kernel::Softmax | Kernel::Linear => {
            let inp = AttentionInput::new(random_tensor(&[n, d], &mut rng), random_tensor(&[n, d], &mut rng), random_tensor(&[n, d], &mut rng))?;
            time_samples(cfg, || {
                let out = match kernel {
                    Kernel::Softmax => inp.softmax_attention(heads, ScoreGate::Softmax)?,
                    _ => inp.linear_attention(heads, FeatureMap::EluPlusOne, false)?,
                };
                std::hint::black_box(out);
                Ok(())
            })?
        }
        Kernel::Mlla => {
            let (h, w) = token_grid(n)?;
            let mut store = ParamStore::new();
            let block = Mlla::new(&mut Init::new(&mut store, &mut rng), d, heads)?;
            let x = random_tensor(&[1, d, h, w], &mut rng);
            time_samples(cfg, || {
                let tape = Tape::new();
                let ctx = store.bind(&tape, false);
                std::hint::black_box(block.forward(&ctx, ctx.input(x.clone()))?.value());
                Ok(())
            })?
        }
    };
    let min_s = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_s = samples.iter().cloned().fold(0.0, f64::max);
    Ok(BenchRow {
        kernel,
        n,
        median_s: median(&mut samples),
        min_s,
        max_s,
        reps: cfg.reps,
        inner,
    })
}

/// Runs the grid on one execution stream; `on_row` sees each row as it
/// completes.
pub fn bench_attention_scaling(cfg: &BenchConfig, mut on_row: impl FnMut(&BenchRow) + Send) -> Result<BenchReport> {
    cfg.validate()?;
    let start = Instant::now();
    let rows = par::sequential(|| -> Result<Vec<BenchRow>> {
        let mut rows = Vec::new();
        for &kernel in &cfg.kernels {
            for &n in &cfg.grid {
                let row = bench_one(cfg, kernel, n)?;
                on_row(&row);
                rows.push(row);
            }
        }
        Ok(rows)
    })?;
    let summaries: Vec<KernelSummary> = cfg
        .kernels
        .iter()
        .map(|&kernel| {
            let pts: Vec<(usize, f64)> = rows.iter().filter(|r| r.kernel == kernel).map(|r| (r.n, r.median_s)).collect();
            let ratios: Vec<f64> = pts.windows(2).map(|w| w[1].1 / w[0].1).collect();
            let (lo, hi) = kernel.doubling_bounds();
            let doubling = pts.windows(2).all(|w| w[1].0 == 2 * w[0].0);
            KernelSummary {
                kernel,
                slope: loglog_slope(&pts),
                ratios_ok: !doubling || ratios.iter().all(|r| (lo..=hi).contains(r)),
                ratios,
            }
        })
        .collect();
    let soft = summaries.iter().find(|s| s.kernel == Kernel::Softmax).map(|s| s.slope);
    let lin = summaries.iter().filter(|s| s.kernel != Kernel::Softmax).map(|s| s.slope).reduce(f64::max);
    let slope_gap = soft.zip(lin).map(|(s, l)| s - l);
    Ok(BenchReport {
        config: cfg.clone(),
        rows,
        summaries,
        slope_gap,
        elapsed_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(usize, f64)> = [8usize, 16, 32].iter().map(|&n| (n, 3.0 * (n as f64).powi(2))).collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn grids_tile() {
        assert_eq!(token_grid(1024).unwrap(), (32, 32));
        assert_eq!(token_grid(2048).unwrap(), (32, 64));
        assert_eq!(token_grid(4096).unwrap(), (64, 64));
        assert!(token_grid(3).is_ok());
    }

    #[test]
    fn tiny_grid_produces_rows() {
        let cfg = BenchConfig {
            grid: vec![16, 32],
            dim: 8,
            head_dim: 4,
            reps: 1,
            warmup: 0,
            min_sample: Duration::ZERO,
            ..Default::default()
        };
        let rep = bench_attention_scaling(&cfg, |_| {}).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert_eq!(rep.to_csv().lines().count(), 7);
    }
}
