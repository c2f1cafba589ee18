//! Executable equivalences between attention formulations.

use serde::Serialize;

use crate::attention::{linear_attention_numerator, linear_attention_recurrent, ssm_scan, AttentionInput, FeatureMap, SsmParams};
use crate::autodiff::Tape;
use crate::error::Result;
use crate::nn::{random_tensor, seeded_rng};
use crate::tensor::Tensor;

pub const EQUIV_TOLERANCE: f64 = 1e-10;
/// Sequence lengths exercised per seed.
pub const LENGTHS: [usize; 5] = [1, 2, 7, 32, 64];
pub const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

#[derive(Clone, Debug, Serialize)]
pub struct EquivRecord {
    pub check: &'static str,
    pub seed: u64,
    pub n: usize,
    pub max_dev: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl EquivRecord {
    fn new(check: &'static str, seed: u64, n: usize, max_dev: f64) -> Self {
        Self {
            check,
            seed,
            n,
            max_dev,
            tolerance: EQUIV_TOLERANCE,
            passed: max_dev < EQUIV_TOLERANCE,
        }
    }

    pub fn csv_header() -> &'static str {
        "check,seed,n,max_dev,tolerance,passed"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.3e},{:.0e},{}", self.check, self.seed, self.n, self.max_dev, self.tolerance, self.passed)
    }
}

/// Recurrent causal scan against the prefix-sum parallel form.
pub fn linear_recurrent_vs_prefix(seed: u64, n: usize, dim: usize, heads: usize) -> Result<EquivRecord> {
    let mut rng = seeded_rng(seed);
    let inp = AttentionInput::new(
        random_tensor(&[n, dim], &mut rng),
        random_tensor(&[n, dim], &mut rng),
        random_tensor(&[n, dim], &mut rng),
    )?;
    let rec = linear_attention_recurrent(&inp, heads, FeatureMap::EluPlusOne)?;
    let par = inp.linear_attention(heads, FeatureMap::EluPlusOne, true)?;
    Ok(EquivRecord::new("linear_recurrent_vs_prefix", seed, n, rec.max_abs_diff(&par)))
}

/// State-space scan with `Ã = 1, Δ = 1, D = 0, B = K, C = Q, x = V`
/// against the unnormalized causal linear-attention numerator.
pub fn ssm_correspondence(seed: u64, n: usize, d: usize, c: usize) -> Result<EquivRecord> {
    let mut rng = seeded_rng(seed);
    let q = random_tensor(&[n, d], &mut rng);
    let k = random_tensor(&[n, d], &mut rng);
    let v = random_tensor(&[n, c], &mut rng);
    let y = ssm_scan(&SsmParams {
        a_tilde: Tensor::ones(&[n, d]),
        b: k.clone(),
        c: q.clone(),
        delta: Tensor::ones(&[n, c]),
        d_skip: Tensor::zeros(&[c]),
        x: v.clone(),
    })?;
    let tape = Tape::new();
    let lift = |t: &Tensor| tape.constant(t.clone()).reshape(&[1, n, t.shape()[1]]);
    let num = linear_attention_numerator(lift(&q)?, lift(&k)?, lift(&v)?, 1, FeatureMap::Identity, true)?;
    let num = num.value().reshape(&[n, c])?;
    Ok(EquivRecord::new("ssm_vs_linear_numerator", seed, n, y.max_abs_diff(&num)))
}

pub fn run_suite(seeds: &[u64]) -> Result<Vec<EquivRecord>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for (i, &n) in LENGTHS.iter().enumerate() {
            let s = seed.wrapping_mul(1000).wrapping_add(i as u64);
            out.push(linear_recurrent_vs_prefix(s, n, 16, 4)?);
            out.push(ssm_correspondence(s, n, 8, 6)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_on_one_seed() {
        let recs = run_suite(&[3]).unwrap();
        assert_eq!(recs.len(), 2 * LENGTHS.len());
        assert!(recs.iter().all(|r| r.passed), "{recs:?}");
    }
}
