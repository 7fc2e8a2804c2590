use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a [`Parameter`]; the key under which a tape
/// reports gradients. Cloning a parameter yields a new id, so copies (target
/// networks, momentum encoders) never alias the original's gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        Self(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor together with its gradient slot.
#[derive(Debug)]
pub struct Parameter {
    id: ParamId,
    name: String,
    pub value: Tensor,
    grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
            grad,
        }
    }

    /// Uniform initialisation in `±bound`.
    pub fn uniform(name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(name, Tensor::new(shape, data).expect("shape product matches"))
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub(crate) fn accumulate_grad(&mut self, g: &Tensor) {
        self.grad.add_assign(g);
    }

    /// Overwrites the value with `other`'s, keeping identity and name.
    pub fn copy_value_from(&mut self, other: &Parameter) {
        self.value
            .data_mut()
            .copy_from_slice(other.value.data());
    }
}

impl Clone for Parameter {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

/// Anything that owns parameters. Visit order must be stable: optimisers,
/// checkpoints and parameter-wise copies rely on it.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    /// Flattened values in visit order.
    fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.extend_from_slice(p.value.data()));
        out
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.value.shape().to_vec()));
        out
    }
}

impl Module for Parameter {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(self)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(self)
    }
}

impl<M: Module> Module for Vec<M> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.iter().for_each(|m| m.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.iter_mut().for_each(|m| m.visit_mut(f));
    }
}

impl<M: Module> Module for Option<M> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        if let Some(m) = self {
            m.visit(f)
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        if let Some(m) = self {
            m.visit_mut(f)
        }
    }
}

/// Copies every parameter value of `src` into `dst`; shapes must mirror.
pub fn copy_params(src: &impl Module, dst: &mut impl Module) -> crate::Result<()> {
    let mut values = Vec::new();
    src.visit(&mut |p| values.push(p.value.clone()));
    let mut idx = 0;
    let mut mismatch = None;
    dst.visit_mut(&mut |p| {
        match values.get(idx) {
            Some(v) if v.shape() == p.value.shape() => {
                p.value.data_mut().copy_from_slice(v.data());
            }
            other => {
                mismatch.get_or_insert_with(|| {
                    format!(
                        "parameter {} has shape {:?}, source {:?}",
                        p.name(),
                        p.value.shape(),
                        other.map(|t| t.shape().to_vec())
                    )
                });
            }
        }
        idx += 1;
    });
    if idx != values.len() {
        mismatch.get_or_insert_with(|| format!("{} source params, {} destination", values.len(), idx));
    }
    match mismatch {
        Some(msg) => Err(crate::NumericsError::Contract(msg)),
        None => Ok(()),
    }
}

/// Elementwise `dst ← keep·dst + (1−keep)·src` over mirrored modules.
pub fn blend_params(src: &impl Module, dst: &mut impl Module, keep: f64) -> crate::Result<()> {
    let mut values = Vec::new();
    src.visit(&mut |p| values.push(p.value.clone()));
    let mut idx = 0;
    let mut mismatch = None;
    dst.visit_mut(&mut |p| {
        match values.get(idx) {
            Some(v) if v.shape() == p.value.shape() => {
                for (d, s) in p.value.data_mut().iter_mut().zip(v.data()) {
                    *d = keep * *d + (1.0 - keep) * s;
                }
            }
            _ => {
                mismatch.get_or_insert_with(|| format!("shape mismatch at parameter {}", p.name()));
            }
        }
        idx += 1;
    });
    if idx != values.len() {
        mismatch.get_or_insert_with(|| format!("{} source params, {} destination", values.len(), idx));
    }
    match mismatch {
        Some(msg) => Err(crate::NumericsError::Contract(msg)),
        None => Ok(()),
    }
}
