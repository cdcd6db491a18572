//! Parameter updates. Frozen layers are skipped entirely.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, ParamGrads};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m_w: Vec<T>,
    v_w: Vec<T>,
    m_b: Vec<T>,
    v_b: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: Vec<Option<Moments<T>>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. `grads[i]` belongs to `layers[i]`; layers with
    /// `frozen[i]` set are left untouched.
    pub fn step(
        &mut self,
        layers: &mut [Layer<T>],
        grads: &[Option<ParamGrads<T>>],
        frozen: &[bool],
    ) -> Result<()> {
        if grads.len() != layers.len() || frozen.len() != layers.len() {
            return Err(Error::InvalidConfig(format!(
                "{} layers but {} gradient slots and {} freeze flags",
                layers.len(),
                grads.len(),
                frozen.len()
            )));
        }
        for (i, (layer, grad)) in layers.iter().zip(grads).enumerate() {
            if let (Some((w, b)), Some(g)) = (layer.params(), grad) {
                if w.shape() != g.weight.shape() || b.len() != g.bias.len() {
                    return Err(Error::ShapeMismatch {
                        layer: Some(i),
                        expected: format!("{:?} + bias[{}]", w.shape(), b.len()),
                        actual: g.weight.shape().to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        self.moments.resize_with(layers.len(), || None);
        let lr = self.learning_rate;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (i, layer) in layers.iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let (Some((w, b)), Some(g)) = (layer.params_mut(), &grads[i]) else {
                continue;
            };
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = T::from_f64(lr);
                    for (p, &gv) in w.data_mut().iter_mut().zip(g.weight.data()) {
                        *p = *p - lr * gv;
                    }
                    for (p, &gv) in b.iter_mut().zip(&g.bias) {
                        *p = *p - lr * gv;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self.moments[i].get_or_insert_with(|| Moments {
                        m_w: vec![T::ZERO; w.len()],
                        v_w: vec![T::ZERO; w.len()],
                        m_b: vec![T::ZERO; b.len()],
                        v_b: vec![T::ZERO; b.len()],
                    });
                    adam_update(w.data_mut(), g.weight.data(), &mut m.m_w, &mut m.v_w, lr, b1, b2, eps, bc1, bc2);
                    adam_update(b, &g.bias, &mut m.m_b, &mut m.v_b, lr, b1, b2, eps, bc1, bc2);
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_update<T: Element>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    let (b1, b2, lr, eps) = (T::from_f64(b1), T::from_f64(b2), T::from_f64(lr), T::from_f64(eps));
    let (bc1, bc2) = (T::from_f64(bc1), T::from_f64(bc2));
    for (((p, &g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mi = b1 * *mi + (T::ONE - b1) * g;
        *vi = b2 * *vi + (T::ONE - b2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}
