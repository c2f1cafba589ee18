//! Central finite-difference validation of tape gradients.

use rand::seq::index::sample;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::nn::{seeded_rng, Ctx, ParamStore};
use crate::tensor::Tensor;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Checks at most this many entries per tensor (sampled); `None` checks all.
    pub max_per_tensor: Option<usize>,
    /// Checks this many entries drawn from the union of all tensors;
    /// overrides `max_per_tensor`.
    pub sample_total: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-3,
            max_per_tensor: None,
            sample_total: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub seed: u64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst: String,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn csv_header() -> &'static str {
        "name,seed,checked,max_rel_err,max_abs_err,worst,tolerance,passed"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.3e},{:.3e},{},{:.0e},{}",
            self.name, self.seed, self.checked, self.max_rel_err, self.max_abs_err, self.worst, self.tolerance, self.passed
        )
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Param(crate::nn::ParamId),
    Input(usize),
}

/// Compares the tape gradient of the scalar `f` against central
/// differences, for every parameter in `store` and every tensor in `inputs`.
pub fn check<F>(name: &str, store: &ParamStore, inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let ctx = store.bind(&tape, true);
    let in_vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&ctx, &in_vars)?;
    if loss.value().numel() != 1 {
        return Err(invalid("gradcheck", "objective must be scalar"));
    }
    let grads = tape.backward(loss)?;
    let param_grads = ctx.param_grads(&grads);
    let input_grads: Vec<Tensor> = in_vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(ctx);

    let eval = |s: &ParamStore, x: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let ctx = s.bind(&tape, false);
        let vars: Vec<Var<'_>> = x.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&ctx, &vars)?.value().item())
    };

    let mut targets: Vec<(Slot, String, usize, &Tensor)> = Vec::new();
    for (i, id) in store.ids().enumerate() {
        targets.push((Slot::Param(id), store.name(id).to_string(), store.get(id).numel(), &param_grads[i]));
    }
    for (i, t) in inputs.iter().enumerate() {
        targets.push((Slot::Input(i), format!("input{i}"), t.numel(), &input_grads[i]));
    }

    let mut rng = seeded_rng(opts.seed ^ 0x9e37_79b9);
    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    let mut report = GradCheckReport {
        name: name.to_string(),
        seed: opts.seed,
        checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: String::new(),
        tolerance: opts.tolerance,
        passed: true,
    };
    let mut picks: Vec<(usize, usize)> = Vec::new();
    match opts.sample_total {
        Some(k) => {
            let total: usize = targets.iter().map(|t| t.2).sum();
            let mut flat = sample(&mut rng, total, k.min(total)).into_vec();
            flat.sort_unstable();
            let (mut t, mut base) = (0, 0);
            for g in flat {
                while g >= base + targets[t].2 {
                    base += targets[t].2;
                    t += 1;
                }
                picks.push((t, g - base));
            }
        }
        None => {
            for (t, target) in targets.iter().enumerate() {
                let n = target.2;
                match opts.max_per_tensor {
                    Some(k) if k < n => picks.extend(sample(&mut rng, n, k).into_iter().map(|i| (t, i))),
                    _ => picks.extend((0..n).map(|i| (t, i))),
                }
            }
        }
    }
    for (t, idx) in picks {
        let (slot, ref label, _, analytic) = targets[t];
        let numeric = {
            let mut bump = |delta: f64| -> Result<f64> {
                let cell = match slot {
                    Slot::Param(id) => &mut work_store.get_mut(id).data_mut()[idx],
                    Slot::Input(i) => &mut work_inputs[i].data_mut()[idx],
                };
                let orig = *cell;
                *cell = orig + delta;
                let v = eval(&work_store, &work_inputs);
                let cell = match slot {
                    Slot::Param(id) => &mut work_store.get_mut(id).data_mut()[idx],
                    Slot::Input(i) => &mut work_inputs[i].data_mut()[idx],
                };
                *cell = orig;
                v
            };
            let plus = bump(opts.step)?;
            let minus = bump(-opts.step)?;
            (plus - minus) / (2.0 * opts.step)
        };
        let a = analytic.data()[idx];
        let r = rel_err(a, numeric);
        report.checked += 1;
        report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
        if r >= report.max_rel_err {
            report.max_rel_err = r;
            report.worst = format!("{label}[{idx}]");
        }
    }
    report.passed = report.max_rel_err < opts.tolerance;
    Ok(report)
}

/// `Σ out ⊙ R` with a fixed random `R`, turning any output into a scalar
/// objective whose gradient exercises every output element.
pub fn random_projection<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = seeded_rng(seed);
    let r = Tensor::uniform(&out.shape(), -1.0, 1.0, &mut rng);
    Ok(out.mul(out.tape().constant(r))?.sum())
}
