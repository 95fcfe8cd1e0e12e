//! Parameter storage, deterministic initialization, and small layer
//! builders shared by the backbone, neck, heads, and decoder.
//!
//! Parameters live in a [`ParamStore`] keyed by stable path-like names
//! ("backbone.stem.conv.weight"). Layer structs hold names and hyper
//! parameters only; at forward time a [`Binding`] turns names into tape
//! leaves, one leaf per name per tape.

use crate::autograd::{Elem, Tape, Tx};
use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::cell::RefCell;
use std::collections::BTreeMap;

/// Derives a per-parameter RNG seed from the run seed and the parameter
/// name, so adding or removing unrelated parameters never shifts another
/// parameter's initialization.
pub fn seed_for(global_seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    KaimingUniform { fan_in: usize },
    Uniform { lo: f64, hi: f64 },
    Const(f64),
}

/// Named parameter tensors, iterated in name order everywhere.
#[derive(Debug, Clone)]
pub struct ParamStore<E: Elem> {
    params: BTreeMap<String, ArrayD<E>>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Registers and initializes a parameter. Panics on duplicate names:
    /// layer constructors own their namespace.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, global_seed: u64) {
        let name = name.into();
        let value = match init {
            Init::Const(c) => ArrayD::from_elem(ndarray::IxDyn(shape), E::from_f64(c)),
            Init::KaimingUniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                self.sample_uniform(&name, shape, -bound, bound, global_seed)
            }
            Init::Uniform { lo, hi } => self.sample_uniform(&name, shape, lo, hi, global_seed),
        };
        let prev = self.params.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter name: {name}");
    }

    fn sample_uniform(
        &self,
        name: &str,
        shape: &[usize],
        lo: f64,
        hi: f64,
        global_seed: u64,
    ) -> ArrayD<E> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed_for(global_seed, name));
        ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || {
            E::from_f64(rng.gen_range(lo..hi))
        })
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<E>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<E>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<E>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<ArrayD<E>> {
        self.params.remove(name)
    }

    /// Removes every parameter under a dotted prefix; returns how many.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let doomed: Vec<String> = self
            .params
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        for k in &doomed {
            self.params.remove(k);
        }
        doomed.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<E>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<E>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.params.values().map(|v| v.len()).sum()
    }
}

/// Ties a [`ParamStore`] to one [`Tape`], creating at most one leaf per
/// parameter so gradients accumulate correctly across shared uses.
pub struct Binding<'t, E: Elem> {
    tape: &'t Tape<E>,
    store: &'t ParamStore<E>,
    leaves: RefCell<BTreeMap<String, Tx>>,
    trainable: bool,
}

impl<'t, E: Elem> Binding<'t, E> {
    pub fn new(tape: &'t Tape<E>, store: &'t ParamStore<E>) -> Self {
        Binding {
            tape,
            store,
            leaves: RefCell::new(BTreeMap::new()),
            trainable: true,
        }
    }

    /// Binds parameters as constants: forwards only, no gradients tracked.
    pub fn frozen(tape: &'t Tape<E>, store: &'t ParamStore<E>) -> Self {
        Binding {
            trainable: false,
            ..Self::new(tape, store)
        }
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    /// Tape node for a named parameter. Panics if the store does not hold
    /// it; parameters are registered at model construction, so a miss is a
    /// wiring bug rather than a user error.
    pub fn param(&self, name: &str) -> Tx {
        if let Some(&tx) = self.leaves.borrow().get(name) {
            return tx;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter not in store: {name}"))
            .clone();
        let tx = if self.trainable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.leaves.borrow_mut().insert(name.to_string(), tx);
        tx
    }

    /// Every parameter bound so far, in name order.
    pub fn bound(&self) -> Vec<(String, Tx)> {
        self.leaves
            .borrow()
            .iter()
            .map(|(n, &t)| (n.clone(), t))
            .collect()
    }
}

/// Largest group count from {8, 4, 2, 1} dividing the channel width.
pub fn norm_groups(channels: usize) -> usize {
    for g in [8usize, 4, 2] {
        if channels % g == 0 {
            return g;
        }
    }
    1
}

/// Plain convolution layer (square kernel, same-padding `k/2`).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let name = name.into();
        let fan_in = cin * k * k;
        store.add(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            Init::KaimingUniform { fan_in },
            seed,
        );
        if bias {
            store.add(format!("{name}.bias"), &[cout], Init::Const(0.0), seed);
        }
        Conv2d {
            name,
            cin,
            cout,
            k,
            stride,
            bias,
        }
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let w = bx.param(&format!("{}.weight", self.name));
        let b = self.bias.then(|| bx.param(&format!("{}.bias", self.name)));
        bx.tape().conv2d(x, w, b, self.stride, self.k / 2)
    }
}

/// Group normalization with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: impl Into<String>,
        channels: usize,
    ) -> Self {
        let name = name.into();
        store.add(format!("{name}.gamma"), &[channels], Init::Const(1.0), seed);
        store.add(format!("{name}.beta"), &[channels], Init::Const(0.0), seed);
        GroupNorm {
            name,
            channels,
            groups: norm_groups(channels),
            eps: 1e-5,
        }
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let gamma = bx.param(&format!("{}.gamma", self.name));
        let beta = bx.param(&format!("{}.beta", self.name));
        bx.tape().group_norm(x, self.groups, gamma, beta, self.eps)
    }
}

/// Conv + GroupNorm + SiLU, the standard block of the whole network.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: GroupNorm,
}

impl ConvBlock {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
    ) -> Self {
        let name = name.into();
        ConvBlock {
            conv: Conv2d::new(store, seed, format!("{name}.conv"), cin, cout, k, stride, false),
            norm: GroupNorm::new(store, seed, format!("{name}.norm"), cout),
        }
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let y = self.conv.forward(bx, x);
        let y = self.norm.forward(bx, y);
        bx.tape().silu(y)
    }
}

/// Transposed convolution (kernel 4, stride 2, padding 1 doubles dims).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let name = name.into();
        let fan_in = cin * k * k;
        store.add(
            format!("{name}.weight"),
            &[cin, cout, k, k],
            Init::KaimingUniform { fan_in },
            seed,
        );
        if bias {
            store.add(format!("{name}.bias"), &[cout], Init::Const(0.0), seed);
        }
        ConvTranspose2d {
            name,
            cin,
            cout,
            k,
            stride,
            pad,
            bias,
        }
    }

    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let w = bx.param(&format!("{}.weight", self.name));
        let b = self.bias.then(|| bx.param(&format!("{}.bias", self.name)));
        bx.tape().conv_transpose2d(x, w, b, self.stride, self.pad)
    }
}

/// Fully connected layer over the last axis of a 2-D input.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new<E: Elem>(
        store: &mut ParamStore<E>,
        seed: u64,
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        let name = name.into();
        store.add(
            format!("{name}.weight"),
            &[cin, cout],
            Init::KaimingUniform { fan_in: cin },
            seed,
        );
        if bias {
            store.add(format!("{name}.bias"), &[cout], Init::Const(0.0), seed);
        }
        Linear {
            name,
            cin,
            cout,
            bias,
        }
    }

    /// `x [rows, cin] -> [rows, cout]`.
    pub fn forward<E: Elem>(&self, bx: &Binding<'_, E>, x: Tx) -> Tx {
        let w = bx.param(&format!("{}.weight", self.name));
        let y = bx.tape().matmul(x, w);
        if self.bias {
            let b = bx.param(&format!("{}.bias", self.name));
            bx.tape().add_row_bias(y, b)
        } else {
            y
        }
    }
}
