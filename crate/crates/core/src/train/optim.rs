use crate::tensor::{DumpEntry, ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    m: Vec<f32>,
    v: Vec<f32>,
    /// Updates applied so far; drives bias correction.
    t: u32,
}

/// Adam with decoupled weight decay. Moments and step counts are kept per
/// parameter, so a tensor that sat frozen starts its bias correction fresh
/// when it is first updated.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    slots: Vec<Slot>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, config: AdamWConfig) -> Self {
        let slots = params
            .iter()
            .map(|(_, p)| Slot {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
                t: 0,
            })
            .collect();
        AdamW { config, slots }
    }

    /// Number of updates parameter `id` has received.
    pub fn updates(&self, id: usize) -> u32 {
        self.slots[id].t
    }

    /// Global L2 norm of the scaled gradients of parameters with a nonzero
    /// learning rate.
    pub fn grad_norm(params: &ParamStore<f32>, rates: &[f64], scale: f64) -> f64 {
        params
            .iter()
            .filter(|(id, _)| rates[*id] > 0.0)
            .filter_map(|(_, p)| p.value.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|&x| (x as f64 * scale).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Apply one update. `rates[id]` is the learning rate of parameter `id`
    /// (0 leaves it and its moments untouched); gradients are multiplied by
    /// `grad_scale` and then clipped to global norm `clip` when `clip > 0`.
    pub fn step(&mut self, params: &mut ParamStore<f32>, rates: &[f64], grad_scale: f64, clip: f64) {
        assert_eq!(rates.len(), params.len(), "one rate per parameter");
        let norm = Self::grad_norm(params, rates, grad_scale);
        let coef = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let scale = grad_scale * coef;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        for (id, p) in params.iter_mut() {
            let lr = rates[id];
            if lr <= 0.0 {
                continue;
            }
            let Some(grad) = p.value.grad.take() else {
                continue;
            };
            let slot = &mut self.slots[id];
            slot.t += 1;
            let c1 = 1.0 - beta1.powi(slot.t as i32);
            let c2 = 1.0 - beta2.powi(slot.t as i32);
            let decay = if p.decay { weight_decay } else { 0.0 };
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(&mut slot.m)
                .zip(&mut slot.v)
            {
                let g = g as f64 * scale;
                let mn = beta1 * *m as f64 + (1.0 - beta1) * g;
                let vn = beta2 * *v as f64 + (1.0 - beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = (mn / c1) / ((vn / c2).sqrt() + eps) + decay * *w as f64;
                *w = (*w as f64 - lr * update) as f32;
            }
            p.value.grad = Some(grad);
        }
    }

    /// State as named tensors: `{param}.m`, `{param}.v` and a 1×1 `{param}.t`.
    pub fn tensors(&self, params: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::with_capacity(3 * self.slots.len());
        for ((_, p), s) in params.iter().zip(&self.slots) {
            let shape = p.value.shape().to_vec();
            out.push((format!("{}.m", p.name), Tensor::new(shape.clone(), s.m.clone()).unwrap()));
            out.push((format!("{}.v", p.name), Tensor::new(shape, s.v.clone()).unwrap()));
            out.push((format!("{}.t", p.name), Tensor::full(1, 1, s.t as f32)));
        }
        out
    }

    pub fn restore(&mut self, params: &ParamStore<f32>, entries: Vec<DumpEntry<f32>>) -> Result<(), TensorError> {
        let mut map: std::collections::BTreeMap<String, Tensor<f32>> =
            entries.into_iter().map(|e| (e.name, e.tensor)).collect();
        for ((_, p), slot) in params.iter().zip(&mut self.slots) {
            let mut take = |suffix: &str| {
                map.remove(&format!("{}.{suffix}", p.name))
                    .ok_or_else(|| TensorError::Invalid(format!("optimizer state lacks {}.{suffix}", p.name)))
            };
            let (m, v, t) = (take("m")?, take("v")?, take("t")?);
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() || t.len() != 1 {
                return Err(TensorError::Invalid(format!("optimizer state for {} has the wrong shape", p.name)));
            }
            slot.m = m.into_data();
            slot.v = v.into_data();
            slot.t = t.data()[0] as u32;
        }
        if let Some(extra) = map.keys().next() {
            return Err(TensorError::Invalid(format!("optimizer state has unknown tensor {extra}")));
        }
        Ok(())
    }
}
