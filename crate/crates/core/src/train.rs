//! Adam optimiser and the deterministic overfitting loop.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{invalid, shape_err, Result};
use crate::loss::pyramid_loss;
use crate::model::FmNet;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Step at which the learning rate is multiplied by `decay_factor`;
    /// half of `steps` when unset.
    pub decay_step: Option<usize>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 1e-4,
            decay_step: None,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn decay_boundary(&self) -> usize {
        self.decay_step.unwrap_or(self.steps / 2)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let boundary = self.decay_boundary();
        if step >= boundary && boundary > 0 {
            self.lr * self.decay_factor
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { beta1, beta2, eps, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(invalid("Adam::step", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for ((id, g), (m, v)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = store.get_mut(id).data_mut();
            for (((p, &g), m), v) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// `(bce, iou)` per pyramid level.
    pub levels: Vec<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<StepRecord>,
    /// Loss of the final parameters.
    pub final_loss: f64,
    /// Level-1 probabilities `[B,1,H,W]` after training.
    pub probabilities: Tensor,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.curve.iter().map(|r| r.loss).collect()
    }

    /// Mean absolute error of the 0.5-thresholded masks.
    pub fn thresholded_mae(&self, gt: &Tensor) -> Result<f64> {
        let bin = self.probabilities.map(|p| if p >= 0.5 { 1.0 } else { 0.0 });
        crate::metrics::mae(&bin, gt)
    }
}

/// Level-1 probabilities and total loss of the current parameters.
pub fn evaluate(net: &FmNet, store: &ParamStore, images: &Tensor, masks: &Tensor) -> Result<(Tensor, f64)> {
    let tape = Tape::new();
    let ctx = store.bind(&tape, false);
    let pyr = net.forward(&ctx, ctx.input(images.clone()))?;
    let loss = pyramid_loss(&pyr.logits, masks)?.total.value().item();
    tape.check_finite()?;
    Ok((pyr.logits[0].value().map(crate::autodiff::sigmoid), loss))
}

/// Full-batch Adam on `(images, masks)` for `cfg.steps` steps. Aborts with
/// the first op that produced a non-finite value.
pub fn train_overfit(
    net: &FmNet,
    store: &mut ParamStore,
    images: &Tensor,
    masks: &Tensor,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let (is, ms) = (images.shape(), masks.shape());
    if is.len() != 4 || ms.len() != 4 || is[0] != ms[0] || ms[1] != 1 || is[2..] != ms[2..] {
        return Err(shape_err("train_overfit", "images [B,3,H,W] with masks [B,1,H,W]", format!("{is:?} / {ms:?}")));
    }
    let mut adam = Adam::new(store, cfg.beta1, cfg.beta2, cfg.eps);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let tape = Tape::new();
        let ctx = store.bind(&tape, true);
        let pyr = net.forward(&ctx, ctx.input(images.clone()))?;
        let terms = pyramid_loss(&pyr.logits, masks)?;
        tape.check_finite()?;
        let grads = tape.backward(terms.total)?;
        let param_grads = ctx.param_grads(&grads);
        if let Some(bad) = param_grads.iter().position(|g| !g.all_finite()) {
            return Err(invalid("train_overfit", format!("non-finite gradient for {}", store.params()[bad].name)));
        }
        let lr = cfg.lr_at(step);
        let rec = StepRecord {
            step,
            lr,
            loss: terms.total.value().item(),
            levels: terms.level_values(),
        };
        drop(ctx);
        adam.step(store, &param_grads, lr)?;
        on_step(&rec);
        curve.push(rec);
    }
    let (probabilities, final_loss) = evaluate(net, store, images, masks)?;
    Ok(TrainOutcome { curve, final_loss, probabilities })
}
