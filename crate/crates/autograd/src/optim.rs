use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled L2 penalty: `weight_decay * w` is added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: i32,
}

/// Adam with bias correction. Moments are tracked per parameter, and so is
/// the step count, since phased training updates disjoint parameter groups.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
        }
    }

    /// Applies one update to every non-frozen parameter holding a gradient,
    /// then clears all gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), || None);
        }
        let c = self.config;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            if p.frozen {
                continue;
            }
            let n = p.value.len();
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![T::zero(); n],
                v: vec![T::zero(); n],
                steps: 0,
            });
            if st.m.len() != n || grad.len() != n {
                return Err(TensorError::StateMismatch(p.name.clone()));
            }
            st.steps += 1;
            let b1 = T::from_f64_lossy(c.beta1);
            let b2 = T::from_f64_lossy(c.beta2);
            let one = T::one();
            let wd = T::from_f64_lossy(c.weight_decay);
            let eps = T::from_f64_lossy(c.eps);
            let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(st.steps));
            let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(st.steps));
            let lr = T::from_f64_lossy(lr);
            let w = p.value.data_mut();
            for i in 0..n {
                let g = grad.data()[i] + wd * w[i];
                st.m[i] = b1 * st.m[i] + (one - b1) * g;
                st.v[i] = b2 * st.v[i] + (one - b2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grads();
        Ok(())
    }

    /// Moment buffers for a parameter, if it has been stepped.
    pub fn moments(&self, index: usize) -> Option<(Tensor<T>, Tensor<T>)> {
        let st = self.state.get(index)?.as_ref()?;
        let n = st.m.len();
        Some((
            Tensor::new(vec![n], st.m.clone()).ok()?,
            Tensor::new(vec![n], st.v.clone()).ok()?,
        ))
    }
}
