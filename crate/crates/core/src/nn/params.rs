//! Named parameter storage and the per-forward graph context.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor, Var};
use crate::nn::var::Grads;

/// One parameter with its optimizer state (AdamW moments).
#[derive(Clone)]
pub struct Param<S: Scalar> {
    pub value: Tensor<S>,
    pub m: Tensor<S>,
    pub v: Tensor<S>,
}

impl<S: Scalar> Param<S> {
    fn new(value: Tensor<S>) -> Self {
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        Param { value, m, v }
    }
}

/// Ordered name -> parameter map. Iteration order is the sorted name order,
/// which keeps checkpoints and update sweeps deterministic.
#[derive(Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: BTreeMap<String, Param<S>>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        assert!(
            self.params
                .insert(name.to_string(), Param::new(value))
                .is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn value(&self, name: &str) -> &Tensor<S> {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .value
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<S>) {
        let p = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(p.value.shape(), value.shape(), "set_value shape mismatch");
        p.value = value;
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Move every parameter of `other` in under a fresh prefix.
    pub fn absorb(&mut self, prefix: &str, other: ParamStore<S>) {
        for (name, p) in other.params {
            let full = format!("{prefix}{name}");
            assert!(
                self.params.insert(full.clone(), p).is_none(),
                "duplicate parameter name {full}"
            );
        }
    }

    /// Extract the parameters whose names start with `prefix`, stripping it.
    pub fn extract_prefix(&self, prefix: &str) -> ParamStore<S> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.params.insert(rest.to_string(), p.clone());
            }
        }
        out
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            out.params.insert(name.clone(), Param::new(p.value.cast()));
        }
        out.step = self.step;
        out
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

// ── initializers ────────────────────────────────────────────────────────

pub fn uniform_init<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::from_f64(rng.gen_range(-bound..bound)))
}

/// Fan-in scaled uniform: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_init<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<S> {
    uniform_init(rng, shape, 1.0 / (fan_in as f64).sqrt())
}

pub fn normal_init<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<S> {
    Tensor::from_fn(shape, |_| {
        // Box-Muller on two uniform draws.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        S::from_f64(z * std)
    })
}

/// 1x1 conv kernel that is exactly the channel identity.
pub fn identity_conv1x1<S: Scalar>(c: usize) -> Tensor<S> {
    let mut data = vec![S::ZERO; c * c];
    for i in 0..c {
        data[i * c + i] = S::ONE;
    }
    Tensor::raw(&[c, c, 1, 1], data)
}

// ── forward context ─────────────────────────────────────────────────────

/// Per-forward view of a [`ParamStore`]. Leaf nodes are cached by name so a
/// parameter used twice contributes a single gradient entry.
pub struct Ctx<'a, S: Scalar> {
    store: &'a ParamStore<S>,
    trainable: bool,
    leaves: RefCell<BTreeMap<String, Var<S>>>,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(store: &'a ParamStore<S>) -> Self {
        Ctx {
            store,
            trainable: true,
            leaves: RefCell::new(BTreeMap::new()),
        }
    }

    /// A context whose parameters are constants: no gradients recorded.
    pub fn frozen(store: &'a ParamStore<S>) -> Self {
        Ctx {
            store,
            trainable: false,
            leaves: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn store(&self) -> &ParamStore<S> {
        self.store
    }

    pub fn param(&self, name: &str) -> Var<S> {
        if let Some(v) = self.leaves.borrow().get(name) {
            return v.clone();
        }
        let value = self.store.value(name).clone();
        let var = if self.trainable {
            Var::leaf(value)
        } else {
            Var::constant(value)
        };
        self.leaves
            .borrow_mut()
            .insert(name.to_string(), var.clone());
        var
    }

    /// Gradients for every parameter this context handed out, by name.
    /// Parameters that received no gradient are omitted.
    pub fn grads(&self, grads: &Grads<S>) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        for (name, var) in self.leaves.borrow().iter() {
            if let Some(g) = grads.get(var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

/// Validate that a gradient map only refers to known parameters with matching
/// shapes; used before optimizer steps.
pub fn check_grads<S: Scalar>(
    store: &ParamStore<S>,
    grads: &BTreeMap<String, Tensor<S>>,
) -> Result<()> {
    for (name, g) in grads {
        let p = store
            .get(name)
            .ok_or_else(|| Error::shape(format!("gradient for unknown parameter {name}")))?;
        if p.value.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} vs parameter {:?} for {name}",
                g.shape(),
                p.value.shape()
            )));
        }
    }
    Ok(())
}
