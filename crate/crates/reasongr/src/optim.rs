//! Adam over the trainable tensors, with B factors stepped at a multiple of
//! the A learning rate (lr_B = λ·lr_A). Frozen base matrices never move.

use indexmap::IndexMap;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::model::{AdapterSet, Gradients, SeqModel};

pub const DEFAULT_LR_A: f64 = 2e-3;
pub const DEFAULT_LR_RATIO: f64 = 16.0;
pub const DEFAULT_GRAD_CLIP: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub lr_a: f64,
    /// λ: the B-factor learning rate is λ·lr_a.
    pub lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    adapter_m: IndexMap<String, (Array2<f64>, Array2<f64>)>,
    adapter_v: IndexMap<String, (Array2<f64>, Array2<f64>)>,
    norm_m: Option<IndexMap<String, (Array1<f64>, Array1<f64>)>>,
    norm_v: Option<IndexMap<String, (Array1<f64>, Array1<f64>)>>,
}

impl OptimizerState {
    pub fn new(model: &SeqModel, adapters: &AdapterSet, lr_a: f64, lr_ratio: f64) -> Self {
        let zeros_like = |adapters: &AdapterSet| -> IndexMap<String, (Array2<f64>, Array2<f64>)> {
            adapters
                .adapters
                .iter()
                .map(|(name, ad)| {
                    (
                        name.clone(),
                        (Array2::zeros(ad.a.dim()), Array2::zeros(ad.b.dim())),
                    )
                })
                .collect()
        };
        let norm_zeros = || {
            adapters.train_layer_norm.then(|| {
                model
                    .norm_table()
                    .iter()
                    .map(|(name, ln)| {
                        (
                            name.clone(),
                            (Array1::zeros(ln.gain.len()), Array1::zeros(ln.bias.len())),
                        )
                    })
                    .collect::<IndexMap<_, _>>()
            })
        };
        OptimizerState {
            step: 0,
            lr_a,
            lr_ratio,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            adapter_m: zeros_like(adapters),
            adapter_v: zeros_like(adapters),
            norm_m: norm_zeros(),
            norm_v: norm_zeros(),
        }
    }

    pub fn lr_b(&self) -> f64 {
        self.lr_ratio * self.lr_a
    }
}

fn adam_update(
    param: &mut f64,
    grad: f64,
    m: &mut f64,
    v: &mut f64,
    lr: f64,
    state_step: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    *m = beta1 * *m + (1.0 - beta1) * grad;
    *v = beta2 * *v + (1.0 - beta2) * grad * grad;
    let m_hat = *m / (1.0 - beta1.powf(state_step));
    let v_hat = *v / (1.0 - beta2.powf(state_step));
    *param -= lr * m_hat / (v_hat.sqrt() + eps);
}

/// One bias-corrected Adam step over the adapters (and layer norms when
/// training them). `grads` must come from `SeqModel::backward` with matching
/// adapter shapes.
pub fn adam_step(
    state: &mut OptimizerState,
    model: &mut SeqModel,
    adapters: &mut AdapterSet,
    grads: &Gradients,
) {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let (lr_a, lr_b) = (state.lr_a, state.lr_b());

    for (name, adapter) in &mut adapters.adapters {
        let (ga, gb) = &grads.adapters[name];
        let (ma, mb) = state.adapter_m.get_mut(name).expect("moment slot");
        let (va, vb) = state.adapter_v.get_mut(name).expect("moment slot");
        for (((p, &g), m), v) in adapter.a.iter_mut().zip(ga.iter()).zip(ma.iter_mut()).zip(va.iter_mut()) {
            adam_update(p, g, m, v, lr_a, t, b1, b2, eps);
        }
        for (((p, &g), m), v) in adapter.b.iter_mut().zip(gb.iter()).zip(mb.iter_mut()).zip(vb.iter_mut()) {
            adam_update(p, g, m, v, lr_b, t, b1, b2, eps);
        }
    }

    if let (Some(norm_grads), Some(norm_m), Some(norm_v)) =
        (&grads.norms, &mut state.norm_m, &mut state.norm_v)
    {
        for (name, ln) in model.norms_mut() {
            let (gg, gb) = &norm_grads[name];
            let (mg, mb) = norm_m.get_mut(name).expect("norm moment slot");
            let (vg, vb) = norm_v.get_mut(name).expect("norm moment slot");
            for (((p, &g), m), v) in ln.gain.iter_mut().zip(gg.iter()).zip(mg.iter_mut()).zip(vg.iter_mut()) {
                adam_update(p, g, m, v, lr_a, t, b1, b2, eps);
            }
            for (((p, &g), m), v) in ln.bias.iter_mut().zip(gb.iter()).zip(mb.iter_mut()).zip(vb.iter_mut()) {
                adam_update(p, g, m, v, lr_a, t, b1, b2, eps);
            }
        }
    }
}
