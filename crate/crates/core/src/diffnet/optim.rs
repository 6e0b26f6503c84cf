use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};

use super::{Real, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
struct Slot<T> {
    name: String,
    value: Tensor<T>,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

/// Named parameter tensors with their Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    slots: Vec<Slot<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { slots: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(LexError::Contract(format!("duplicate parameter {name}")));
        }
        let n = value.numel();
        self.slots.push(Slot {
            name,
            value,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        });
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.slots[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.slots[id.0].value
    }

    pub fn step_count(&self, id: ParamId) -> u64 {
        self.slots[id.0].step
    }

    pub(crate) fn grad_buffer(&mut self, id: ParamId) -> &mut Vec<T> {
        self.slots[id.0].value.grad_mut()
    }

    pub(crate) fn ensure_grads(&mut self) {
        for s in &mut self.slots {
            s.value.grad_mut();
        }
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.value.clear_grad();
        }
    }

    /// Order-sensitive FNV-1a digest over names and raw value bits.
    pub fn checksum(&self, prefix: &str) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for s in self.slots.iter().filter(|s| s.name.starts_with(prefix)) {
            s.name.bytes().for_each(&mut eat);
            for &x in s.value.data() {
                x.as_f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    /// Adam update of every parameter.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        self.adam_step_where(cfg, |_| true)
    }

    /// Adam update restricted to parameters whose name satisfies `select`.
    /// Weight decay is coupled: `weight_decay * p` is added to the gradient.
    pub fn adam_step_where(&mut self, cfg: &AdamConfig, select: impl Fn(&str) -> bool) -> Result<()> {
        let (b1, b2) = cfg.betas;
        for s in self.slots.iter_mut().filter(|s| select(&s.name)) {
            let Some(grad) = s.value.grad().map(<[T]>::to_vec) else {
                return Err(LexError::Contract(format!(
                    "adam step on {} without a gradient",
                    s.name
                )));
            };
            s.step += 1;
            let bc1 = 1.0 - b1.powi(s.step as i32);
            let bc2 = 1.0 - b2.powi(s.step as i32);
            let step = T::of(cfg.lr / bc1);
            let (wd, tb1, tb2, eps) = (T::of(cfg.weight_decay), T::of(b1), T::of(b2), T::of(cfg.eps));
            let bc2 = T::of(bc2);
            let data = s.value.data_mut();
            for (((p, &g), m), v) in data.iter_mut().zip(&grad).zip(&mut s.m).zip(&mut s.v) {
                let g = g + wd * *p;
                *m = tb1 * *m + (T::one() - tb1) * g;
                *v = tb2 * *v + (T::one() - tb2) * g * g;
                *p = *p - step * *m / ((*v / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Tape;

    fn scalar_store(x: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::scalar(x)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .insert("w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap())
            .unwrap();
        store.ensure_grads();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..10 {
            store.adam_step(&cfg).unwrap();
        }
        assert_eq!(store.tensor(id).data(), &[1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        for g in [2.5, -0.3] {
            let (mut store, id) = scalar_store(0.0);
            let cfg = AdamConfig {
                lr: 1e-2,
                weight_decay: 0.0,
                ..AdamConfig::default()
            };
            let mut prev = 0.0;
            for _ in 0..50 {
                store.zero_grad();
                store.grad_buffer(id)[0] = g;
                store.adam_step(&cfg).unwrap();
                let now = store.tensor(id).data()[0];
                assert!((now - prev) * g < 0.0);
                prev = now;
            }
        }
    }

    #[test]
    fn quadratic_bowl_converges() {
        let (mut store, id) = scalar_store(3.0);
        let cfg = AdamConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..5000 {
            store.zero_grad();
            let mut tape = Tape::new();
            let p = tape.param(&store, id, true);
            let sq = tape.mul(p, p).unwrap();
            let loss = tape.scale(sq, 0.5);
            let loss = tape.sum(loss);
            tape.backward(loss, &mut store).unwrap();
            store.adam_step(&cfg).unwrap();
        }
        assert!(store.tensor(id).data()[0].abs() < 1e-3);
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let (mut store, _) = scalar_store(1.0);
        let err = store.adam_step(&AdamConfig::default()).unwrap_err();
        assert!(matches!(err, LexError::Contract(_)));
    }

    #[test]
    fn filtered_step_only_touches_selected_parameters() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("predictor.w", Tensor::scalar(1.0)).unwrap();
        let b = store.insert("selector.w", Tensor::scalar(1.0)).unwrap();
        store.ensure_grads();
        store.grad_buffer(a)[0] = 1.0;
        store.grad_buffer(b)[0] = 1.0;
        let before = store.checksum("predictor.");
        store
            .adam_step_where(&AdamConfig::default(), |n| n.starts_with("selector."))
            .unwrap();
        assert_eq!(before, store.checksum("predictor."));
        assert!(store.tensor(b).data()[0] < 1.0);
        assert_eq!(store.step_count(a), 0);
        assert_eq!(store.step_count(b), 1);
    }
}
