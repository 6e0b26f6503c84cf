use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LexError, Result};

use super::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenActivation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Softmax,
    Sigmoid,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default = "relu")]
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

fn relu() -> HiddenActivation {
    HiddenActivation::Relu
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, output_activation: OutputActivation) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims,
            output_dim,
            hidden_activation: HiddenActivation::Relu,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(LexError::Config(format!("mlp with a zero-width layer: {self:?}")));
        }
        if self.output_activation == OutputActivation::Softmax && self.output_dim < 2 {
            return Err(LexError::Config("softmax output needs at least two units".into()));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }
}

/// Fully connected network whose weights live in a [`ParamStore`] under
/// `<prefix>.l<i>.weight` (fan_in × fan_out) and `<prefix>.l<i>.bias`.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    prefix: String,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers freshly initialized weights, uniform in ±sqrt(1/fan_in).
    pub fn init<T: Real, R: Rng + ?Sized>(spec: MlpSpec, prefix: &str, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let bound = (1.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect();
            let b = (0..fan_out)
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect();
            let wid = store.insert(format!("{prefix}.l{i}.weight"), Tensor::matrix(fan_in, fan_out, w)?)?;
            let bid = store.insert(format!("{prefix}.l{i}.bias"), Tensor::matrix(1, fan_out, b)?)?;
            layers.push((wid, bid));
        }
        Ok(Mlp {
            spec,
            prefix: prefix.to_string(),
            layers,
        })
    }

    /// Binds to weights already present in `store` (e.g. after loading a checkpoint).
    pub fn bind<T: Real>(spec: MlpSpec, prefix: &str, store: &ParamStore<T>) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
            let find = |kind: &str, shape: [usize; 2]| {
                let name = format!("{prefix}.l{i}.{kind}");
                let id = store
                    .find(&name)
                    .ok_or_else(|| LexError::State(format!("missing parameter {name}")))?;
                if store.tensor(id).shape() != shape {
                    return Err(LexError::Dimension(format!(
                        "{name}: expected {shape:?}, found {:?}",
                        store.tensor(id).shape()
                    )));
                }
                Ok(id)
            };
            layers.push((find("weight", [fan_in, fan_out])?, find("bias", [1, fan_out])?));
        }
        Ok(Mlp {
            spec,
            prefix: prefix.to_string(),
            layers,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    /// Output before the final activation.
    pub fn forward_logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Result<Var> {
        let (_, cols) = tape.dims(x);
        if cols != self.spec.input_dim {
            return Err(LexError::Dimension(format!(
                "{} expects {} inputs, got {cols}",
                self.prefix, self.spec.input_dim
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let w = tape.param(store, w, trainable);
            let b = tape.param(store, b, trainable);
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = match self.spec.hidden_activation {
                    HiddenActivation::Relu => tape.relu(h),
                };
            }
        }
        Ok(h)
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, trainable: bool) -> Result<Var> {
        let z = self.forward_logits(tape, store, x, trainable)?;
        Ok(match self.spec.output_activation {
            OutputActivation::Softmax => tape.softmax_rows(z),
            OutputActivation::Sigmoid => tape.sigmoid(z),
            OutputActivation::Identity => z,
        })
    }

    /// Gradient-free evaluation on a row-major batch.
    pub fn predict<T: Real>(&self, store: &ParamStore<T>, x: &[T], rows: usize) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(rows, self.spec.input_dim, x.to_vec())?;
        let out = self.forward(&mut tape, store, xv, false)?;
        Ok(tape.value(out).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn zero_weights_give_uniform_softmax() {
        let mut store = ParamStore::<f64>::new();
        let spec = MlpSpec::new(3, vec![4], 5, OutputActivation::Softmax);
        let mlp = Mlp::init(spec, "f", &mut store, &mut seeded(1)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let out = mlp.predict(&store, &[0.3, -1.0, 2.0, 5.0, 1.0, 0.0], 2).unwrap();
        for p in out {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut store = ParamStore::<f64>::new();
        let spec = MlpSpec::new(3, vec![], 3, OutputActivation::Identity);
        let mlp = Mlp::init(spec, "f", &mut store, &mut seeded(2)).unwrap();
        let w = store.find("f.l0.weight").unwrap();
        let b = store.find("f.l0.bias").unwrap();
        let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        store.tensor_mut(w).data_mut().copy_from_slice(&eye);
        store.tensor_mut(b).data_mut().iter_mut().for_each(|x| *x = 0.0);
        let x = [0.5, -2.0, 7.25];
        assert_eq!(mlp.predict(&store, &x, 1).unwrap(), x.to_vec());
    }

    #[test]
    fn wide_softmax_rows_sum_to_one() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = seeded(3);
        let spec = MlpSpec::new(11, vec![200, 200, 200], 2, OutputActivation::Softmax);
        let mlp = Mlp::init(spec, "f", &mut store, &mut rng).unwrap();
        let x: Vec<f32> = (0..64 * 11).map(|_| rng.random_range(-3.0..3.0)).collect();
        let out = mlp.predict(&store, &x, 64).unwrap();
        for row in out.chunks(2) {
            assert!(((row[0] + row[1]) - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn input_width_mismatch_is_a_dimension_error() {
        let mut store = ParamStore::<f64>::new();
        let spec = MlpSpec::new(4, vec![3], 2, OutputActivation::Softmax);
        let mlp = Mlp::init(spec, "f", &mut store, &mut seeded(4)).unwrap();
        let err = mlp.predict(&store, &[1.0; 6], 2).unwrap_err();
        assert!(matches!(err, LexError::Dimension(_)));
    }

    #[test]
    fn bind_recovers_layers() {
        let mut store = ParamStore::<f64>::new();
        let spec = MlpSpec::new(4, vec![3], 2, OutputActivation::Softmax);
        let a = Mlp::init(spec.clone(), "g", &mut store, &mut seeded(5)).unwrap();
        let b = Mlp::bind(spec, "g", &store).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(a.predict(&store, &x, 1).unwrap(), b.predict(&store, &x, 1).unwrap());
    }
}
