//! Parameter storage, initialization, and layer descriptors.
//!
//! Layers are lightweight descriptors: they know their parameter names,
//! shapes and geometry, and fetch the actual tensors from a [`ParamStore`]
//! through a [`Session`] at forward time. This keeps the optimizer,
//! checkpointing and budget accounting working off one flat, ordered map.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::elem::Scalar;
use crate::ops::{self, ConvSpec};
use crate::tensor::Tensor;

/// Flat named parameter/buffer store with deterministic iteration order.
#[derive(Clone)]
pub struct ParamStore<E> {
    params: BTreeMap<String, Tensor<E>>,
    buffers: BTreeMap<String, Tensor<E>>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: &str, t: Tensor<E>) {
        let prev = self.params.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn insert_buffer(&mut self, name: &str, t: Tensor<E>) {
        let prev = self.buffers.insert(name.to_string(), t);
        assert!(prev.is_none(), "duplicate buffer name {name}");
    }

    pub fn param(&self, name: &str) -> &Tensor<E> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn buffer(&self, name: &str) -> &Tensor<E> {
        self.buffers
            .get(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn set_param(&mut self, name: &str, t: Tensor<E>) {
        let slot = self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(slot.shape(), t.shape(), "shape change for {name}");
        *slot = t;
    }

    pub fn set_buffer(&mut self, name: &str, t: Tensor<E>) {
        let slot = self
            .buffers
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown buffer {name}"));
        assert_eq!(slot.shape(), t.shape(), "shape change for {name}");
        *slot = t;
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.buffers.iter()
    }

    pub fn num_scalars(&self) -> u64 {
        self.params.values().map(|t| t.numel() as u64).sum()
    }

    /// Set every parameter (not buffers) to zero. Used by the residual
    /// identity checks.
    pub fn zero_all_params(&mut self) {
        for t in self.params.values_mut() {
            *t = Tensor::zeros(t.shape());
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }
}

impl<E: Scalar> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// One forward pass: a tape plus bindings from parameter names to tape
/// leaves, the train/eval switch, and batch-norm buffer updates produced by
/// training-mode forwards.
pub struct Session<'a, E: Scalar> {
    pub tape: Tape<E>,
    store: &'a ParamStore<E>,
    bindings: RefCell<BTreeMap<String, Var>>,
    training: bool,
    buffer_updates: RefCell<Vec<(String, Tensor<E>)>>,
}

impl<'a, E: Scalar> Session<'a, E> {
    pub fn new(store: &'a ParamStore<E>, training: bool) -> Self {
        Self {
            // training needs gradients; evaluation records values only
            tape: if training { Tape::new() } else { Tape::no_grad() },
            store,
            bindings: RefCell::new(BTreeMap::new()),
            training,
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// A gradient-enabled evaluation-mode session (for gradient checks that
    /// must differentiate an eval forward).
    pub fn eval_with_grad(store: &'a ParamStore<E>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bindings: RefCell::new(BTreeMap::new()),
            training: false,
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    /// A training-mode session with gradients enabled (alias of `new(store, true)`).
    pub fn train_with_grad(store: &'a ParamStore<E>) -> Self {
        Self::new(store, true)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    /// Bind a named parameter as a tape leaf (cached per session).
    pub fn param(&self, name: &str) -> Var {
        if let Some(&v) = self.bindings.borrow().get(name) {
            return v;
        }
        let v = self.tape.leaf(self.store.param(name).clone());
        self.bindings.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn buffer(&self, name: &str) -> Tensor<E> {
        self.store.buffer(name).clone()
    }

    pub fn push_buffer_update(&self, name: &str, t: Tensor<E>) {
        self.buffer_updates.borrow_mut().push((name.to_string(), t));
    }

    /// Drain recorded buffer updates (running statistics), to be applied by
    /// the trainer after the optimizer step.
    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor<E>)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }

    pub fn input(&self, t: Tensor<E>) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> Tensor<E> {
        self.tape.value(v)
    }

    /// Collect gradients for every bound parameter after backward.
    pub fn param_grads(&self, grads: &mut Grads<E>) -> BTreeMap<String, Tensor<E>> {
        let mut out = BTreeMap::new();
        for (name, &var) in self.bindings.borrow().iter() {
            if let Some(g) = grads.take(var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Truncated-normal-free Kaiming-uniform init bound for a fan-in.
fn kaiming_bound(fan_in: usize) -> f64 {
    // gain for ReLU family, uniform bound = gain * sqrt(3 / fan_in)
    let gain = (2.0f64).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

/// 2D convolution layer descriptor.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_c: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        in_c: usize,
        out_c: usize,
        kh: usize,
        kw: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        assert!(in_c % spec.groups == 0 && out_c % spec.groups == 0);
        Self {
            name: name.into(),
            in_c,
            out_c,
            kh,
            kw,
            spec,
            bias,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>, rng: &mut ChaCha8Rng) {
        let in_cg = self.in_c / self.spec.groups;
        let fan_in = in_cg * self.kh * self.kw;
        let bound = kaiming_bound(fan_in);
        let n = self.out_c * in_cg * self.kh * self.kw;
        let data: Vec<E> = (0..n)
            .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        store.insert_param(
            &self.weight_name(),
            Tensor::new(&[self.out_c, in_cg, self.kh, self.kw], data),
        );
        if self.bias {
            store.insert_param(&self.bias_name(), Tensor::zeros(&[self.out_c]));
        }
    }

    pub fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        let w = sess.param(&self.weight_name());
        let b = if self.bias {
            Some(sess.param(&self.bias_name()))
        } else {
            None
        };
        ops::conv2d(&sess.tape, x, w, b, self.spec)
    }

    pub fn param_count(&self) -> u64 {
        let in_cg = self.in_c / self.spec.groups;
        let mut n = (self.out_c * in_cg * self.kh * self.kw) as u64;
        if self.bias {
            n += self.out_c as u64;
        }
        n
    }

    /// Analytic multiply-accumulate count for an input of spatial size (h,w).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.spec.out_size(h, w, self.kh, self.kw);
        let in_cg = self.in_c / self.spec.groups;
        (self.kh * self.kw * in_cg * self.out_c * oh * ow) as u64
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.spec.out_size(h, w, self.kh, self.kw)
    }
}

/// Batch normalization layer descriptor (per-channel affine + running stats).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>) {
        store.insert_param(
            &format!("{}.gamma", self.name),
            Tensor::full(&[self.channels], E::ONE),
        );
        store.insert_param(&format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
        store.insert_buffer(
            &format!("{}.running_mean", self.name),
            Tensor::zeros(&[self.channels]),
        );
        store.insert_buffer(
            &format!("{}.running_var", self.name),
            Tensor::full(&[self.channels], E::ONE),
        );
    }

    pub fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        let gamma = sess.param(&format!("{}.gamma", self.name));
        let beta = sess.param(&format!("{}.beta", self.name));
        if sess.training() {
            let (y, stats) = ops::batch_norm_train(&sess.tape, x, gamma, beta, self.eps);
            let m = E::from_f64(self.momentum);
            let rm = sess.buffer(&format!("{}.running_mean", self.name));
            let rv = sess.buffer(&format!("{}.running_var", self.name));
            let new_mean = blend(&rm, &stats.mean, m);
            let new_var = blend(&rv, &stats.var_unbiased, m);
            sess.push_buffer_update(&format!("{}.running_mean", self.name), new_mean);
            sess.push_buffer_update(&format!("{}.running_var", self.name), new_var);
            y
        } else {
            let rm = sess.buffer(&format!("{}.running_mean", self.name));
            let rv = sess.buffer(&format!("{}.running_var", self.name));
            ops::batch_norm_eval(&sess.tape, x, gamma, beta, &rm, &rv, self.eps)
        }
    }

    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }
}

fn blend<E: Scalar>(old: &Tensor<E>, new: &Tensor<E>, momentum: E) -> Tensor<E> {
    let data = old
        .data()
        .iter()
        .zip(new.data().iter())
        .map(|(&o, &n)| o * (E::ONE - momentum) + n * momentum)
        .collect();
    Tensor::new(old.shape(), data)
}

/// Channel layer norm descriptor.
#[derive(Clone, Debug)]
pub struct LayerNormC {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNormC {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            eps: 1e-6,
        }
    }

    pub fn register<E: Scalar>(&self, store: &mut ParamStore<E>) {
        store.insert_param(
            &format!("{}.gamma", self.name),
            Tensor::full(&[self.channels], E::ONE),
        );
        store.insert_param(&format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
    }

    pub fn forward<E: Scalar>(&self, sess: &Session<E>, x: Var) -> Var {
        let gamma = sess.param(&format!("{}.gamma", self.name));
        let beta = sess.param(&format!("{}.beta", self.name));
        ops::layer_norm_channels(&sess.tape, x, gamma, beta, self.eps)
    }

    pub fn param_count(&self) -> u64 {
        2 * self.channels as u64
    }
}

/// Raw named tensor parameter (state matrices, skip coefficients).
#[derive(Clone, Debug)]
pub struct RawParam {
    pub name: String,
    pub shape: Vec<usize>,
}

impl RawParam {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn register_with<E: Scalar>(&self, store: &mut ParamStore<E>, init: Tensor<E>) {
        assert_eq!(init.shape(), &self.shape[..]);
        store.insert_param(&self.name, init);
    }

    pub fn get<E: Scalar>(&self, sess: &Session<E>) -> Var {
        sess.param(&self.name)
    }

    pub fn param_count(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }
}
