//! Parameters, layers, optimizer, and checkpoints.
//!
//! A [`ParamStore`] owns named f64 arrays (parameters plus non-optimized
//! buffers such as running batch-norm statistics). Each training step opens
//! a [`Session`] that registers parameters on a fresh tape; a frozen session
//! registers them as constants so no gradient can reach them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::{Tape, Tensor, TensorId};

#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    /// Adam first/second moment, lazily sized.
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters and buffers, in deterministic (sorted) order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    buffers: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let n = value.numel();
        self.params.insert(
            name.to_string(),
            Param { value, m: vec![0.0; n], v: vec![0.0; n] },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|p| &p.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) {
        let p = self.params.get_mut(name).expect("unknown param");
        assert_eq!(p.value.shape(), value.shape(), "shape change for {name}");
        p.value = value;
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn insert_buffer(&mut self, name: &str, data: Vec<f64>) {
        self.buffers.insert(name.to_string(), data);
    }

    pub fn buffer(&self, name: &str) -> &[f64] {
        self.buffers.get(name).unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.buffers.get_mut(name).unwrap_or_else(|| panic!("unknown buffer {name}"))
    }

    pub fn has_buffer(&self, name: &str) -> bool {
        self.buffers.contains_key(name)
    }

    /// Copy every parameter and buffer whose name and shape match from
    /// `other`. Returns the copied names (used for teacher -> student init).
    pub fn copy_matching_from(&mut self, other: &ParamStore) -> Vec<String> {
        let mut copied = Vec::new();
        for (name, theirs) in &other.params {
            if let Some(ours) = self.params.get_mut(name) {
                if ours.value.shape() == theirs.value.shape() {
                    ours.value = theirs.value.clone();
                    copied.push(name.clone());
                }
            }
        }
        for (name, theirs) in &other.buffers {
            if let Some(ours) = self.buffers.get_mut(name) {
                if ours.len() == theirs.len() {
                    *ours = theirs.clone();
                    copied.push(name.clone());
                }
            }
        }
        copied
    }
}

/// AdamW-style optimizer parameters (decoupled weight decay).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.01 }
    }
}

impl ParamStore {
    /// One optimizer step over the provided gradients. `t` is the 1-based
    /// global step for bias correction. Parameters without a gradient entry
    /// are left untouched.
    pub fn adam_step(
        &mut self,
        grads: &BTreeMap<String, Vec<f64>>,
        cfg: &AdamConfig,
        lr: f64,
        t: usize,
    ) {
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        for (name, p) in self.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            assert_eq!(g.len(), p.value.numel(), "gradient size for {name}");
            let mut data = p.value.data().to_vec();
            for i in 0..data.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                data[i] -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * data[i]);
            }
            p.value = Tensor::new(p.value.shape().to_vec(), data);
        }
    }
}

// ---- checkpoints ---------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in f64 elements into the flat payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    params: Vec<ManifestEntry>,
    buffers: Vec<ManifestEntry>,
}

impl ParamStore {
    /// Write `<stem>.json` (manifest) and `<stem>.bin` (flat f64 LE arrays,
    /// params then buffers, both in sorted name order).
    pub fn save_checkpoint(&self, stem: &Path) -> Result<()> {
        let mut manifest = Manifest { params: Vec::new(), buffers: Vec::new() };
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (name, p) in &self.params {
            manifest.params.push(ManifestEntry {
                name: name.clone(),
                shape: p.value.shape().to_vec(),
                offset,
            });
            for v in p.value.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += p.value.numel();
        }
        for (name, b) in &self.buffers {
            manifest.buffers.push(ManifestEntry {
                name: name.clone(),
                shape: vec![b.len()],
                offset,
            });
            for v in b {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += b.len();
        }
        crate::io::write_json_pretty(&stem.with_extension("json"), &manifest)?;
        let mut f = fs::File::create(stem.with_extension("bin"))?;
        f.write_all(&payload)?;
        Ok(())
    }

    /// Load a checkpoint saved by [`ParamStore::save_checkpoint`]. Adam
    /// moments start fresh.
    pub fn load_checkpoint(stem: &Path) -> Result<ParamStore> {
        let manifest: Manifest = crate::io::read_json(&stem.with_extension("json"))?;
        let mut bytes = Vec::new();
        fs::File::open(stem.with_extension("bin"))?.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(CoreError::Format("checkpoint payload not f64-aligned".into()));
        }
        let floats: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut store = ParamStore::new();
        for e in &manifest.params {
            let n: usize = e.shape.iter().product();
            if e.offset + n > floats.len() {
                return Err(CoreError::Format(format!("checkpoint entry {} out of range", e.name)));
            }
            store.insert(&e.name, Tensor::new(e.shape.clone(), floats[e.offset..e.offset + n].to_vec()));
        }
        for e in &manifest.buffers {
            let n: usize = e.shape.iter().product();
            if e.offset + n > floats.len() {
                return Err(CoreError::Format(format!("checkpoint buffer {} out of range", e.name)));
            }
            store.insert_buffer(&e.name, floats[e.offset..e.offset + n].to_vec());
        }
        Ok(store)
    }
}

// ---- sessions --------------------------------------------------------------

enum StoreRef<'a> {
    Mut(&'a mut ParamStore),
    Shared(&'a ParamStore),
}

/// One forward/backward pass: a tape plus lazily registered parameters.
///
/// Frozen sessions borrow the store immutably, so the type system rules out
/// any parameter or buffer mutation through a teacher forward.
pub struct Session<'a> {
    pub tape: Tape,
    store: StoreRef<'a>,
    ids: HashMap<String, TensorId>,
    /// Training mode: batch norms use batch statistics and update buffers.
    pub training: bool,
    /// Frozen: parameters register as constants (no gradient path).
    pub frozen: bool,
}

impl<'a> Session<'a> {
    pub fn train(store: &'a mut ParamStore) -> Session<'a> {
        Session {
            tape: Tape::new(),
            store: StoreRef::Mut(store),
            ids: HashMap::new(),
            training: true,
            frozen: false,
        }
    }

    /// Inference/teacher session: eval-mode norms, constant params, and a
    /// non-recording tape.
    pub fn frozen(store: &'a ParamStore) -> Session<'a> {
        Session {
            tape: Tape::no_grad(),
            store: StoreRef::Shared(store),
            ids: HashMap::new(),
            training: false,
            frozen: true,
        }
    }

    /// Eval-mode forward that still records gradients (used by grad checks
    /// and by student evaluation).
    pub fn eval_recording(store: &'a ParamStore) -> Session<'a> {
        Session {
            tape: Tape::new(),
            store: StoreRef::Shared(store),
            ids: HashMap::new(),
            training: false,
            frozen: false,
        }
    }

    pub fn param(&mut self, name: &str) -> TensorId {
        if let Some(id) = self.ids.get(name) {
            return *id;
        }
        let value = self
            .store()
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not initialized"))
            .clone();
        let id = if self.frozen { self.tape.constant(value) } else { self.tape.leaf(value) };
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn store(&self) -> &ParamStore {
        match &self.store {
            StoreRef::Mut(s) => s,
            StoreRef::Shared(s) => s,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match &mut self.store {
            StoreRef::Mut(s) => s,
            StoreRef::Shared(_) => panic!("store_mut on a frozen/eval session"),
        }
    }

    /// Collect gradients for every parameter registered on this tape.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.ids {
            if let Some(g) = self.tape.grad(*id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }
}

/// Finite-difference check of model gradients with respect to named
/// parameters. `build` runs a forward pass to a scalar loss inside the
/// given session; the check perturbs each coordinate of each listed
/// parameter and compares central differences against the tape gradient.
///
/// Uses eval-mode sessions so the function of the parameters is
/// deterministic (no running-stat updates).
pub fn grad_check_params<F>(
    build: F,
    store: &ParamStore,
    check: &[String],
    h: f64,
) -> crate::error::Result<f64>
where
    F: Fn(&mut Session) -> crate::error::Result<TensorId>,
{
    let mut sess = Session::eval_recording(store);
    let out = build(&mut sess)?;
    let value = sess.tape.value(out).item();
    if !value.is_finite() {
        return Err(crate::error::CoreError::NonFinite("grad_check_params forward"));
    }
    sess.tape.backward(out)?;
    let grads = sess.param_grads();
    drop(sess);

    let eval = |probe: &ParamStore| -> crate::error::Result<f64> {
        let mut sess = Session::eval_recording(probe);
        let out = build(&mut sess)?;
        let v = sess.tape.value(out).item();
        if !v.is_finite() {
            return Err(crate::error::CoreError::NonFinite("grad_check_params probe"));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for name in check {
        let base = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown param {name}"))
            .clone();
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; base.numel()]);
        for ci in 0..base.numel() {
            let mut probe = store.clone();
            let mut plus = base.data().to_vec();
            plus[ci] += h;
            probe.set_value(name, Tensor::new(base.shape().to_vec(), plus));
            let fp = eval(&probe)?;
            let mut minus = base.data().to_vec();
            minus[ci] -= h;
            probe.set_value(name, Tensor::new(base.shape().to_vec(), minus));
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ci];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

// ---- layers -----------------------------------------------------------------

fn kaiming_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}

/// 2D convolution layer (conv weight layout `[Co,Ci,k,k]`).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv2d { name: name.to_string(), cin, cout, k, stride, padding }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let w = kaiming_uniform(rng, &[self.cout, self.cin, self.k, self.k], self.cin * self.k * self.k);
        store.insert(&format!("{}.w", self.name), w);
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, sess: &mut Session, x: TensorId) -> Result<TensorId> {
        let w = sess.param(&format!("{}.w", self.name));
        let b = sess.param(&format!("{}.b", self.name));
        sess.tape.conv2d(x, w, Some(b), self.stride, self.padding)
    }
}

/// 3D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        Conv3d { name: name.to_string(), cin, cout, k, stride, padding }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan = self.cin * self.k * self.k * self.k;
        let w = kaiming_uniform(rng, &[self.cout, self.cin, self.k, self.k, self.k], fan);
        store.insert(&format!("{}.w", self.name), w);
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, sess: &mut Session, x: TensorId) -> Result<TensorId> {
        let w = sess.param(&format!("{}.w", self.name));
        let b = sess.param(&format!("{}.b", self.name));
        sess.tape.conv3d(x, w, Some(b), self.stride, self.padding)
    }
}

/// Transposed 2D conv (weight `[Ci,Co,k,k]`), stride-k upsampling.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvTranspose2d { name: name.to_string(), cin, cout, k, stride }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let w = kaiming_uniform(rng, &[self.cin, self.cout, self.k, self.k], self.cin * self.k * self.k);
        store.insert(&format!("{}.w", self.name), w);
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, sess: &mut Session, x: TensorId) -> Result<TensorId> {
        let w = sess.param(&format!("{}.w", self.name));
        let b = sess.param(&format!("{}.b", self.name));
        sess.tape.conv_transpose2d(x, w, Some(b), self.stride, 0, 0)
    }
}

/// Transposed 3D conv (weight `[Ci,Co,k,k,k]`).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvTranspose3d {
    pub fn new(name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvTranspose3d { name: name.to_string(), cin, cout, k, stride }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan = self.cin * self.k * self.k * self.k;
        let w = kaiming_uniform(rng, &[self.cin, self.cout, self.k, self.k, self.k], fan);
        store.insert(&format!("{}.w", self.name), w);
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward(&self, sess: &mut Session, x: TensorId) -> Result<TensorId> {
        let w = sess.param(&format!("{}.w", self.name));
        let b = sess.param(&format!("{}.b", self.name));
        sess.tape.conv_transpose3d(x, w, Some(b), self.stride, 0, 0)
    }
}

/// Depthwise 7x7-style conv (weight `[C,k,k]`), stride 1.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d {
    pub name: String,
    pub channels: usize,
    pub k: usize,
    pub padding: usize,
}

impl DepthwiseConv2d {
    pub fn new(name: &str, channels: usize, k: usize, padding: usize) -> Self {
        DepthwiseConv2d { name: name.to_string(), channels, k, padding }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let w = kaiming_uniform(rng, &[self.channels, self.k, self.k], self.k * self.k);
        store.insert(&format!("{}.w", self.name), w);
        store.insert(&format!("{}.b", self.name), Tensor::zeros(&[self.channels]));
    }

    pub fn forward(&self, sess: &mut Session, x: TensorId) -> Result<TensorId> {
        let w = sess.param(&format!("{}.w", self.name));
        let b = sess.param(&format!("{}.b", self.name));
        sess.tape.depthwise_conv2d(x, w, Some(b), self.padding)
    }
}

const BN_MOMENTUM: f64 = 0.1;

/// Batch norm over `[N,C,...]` with running statistics (momentum 0.1).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm { name: name.to_string(), channels }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(&format!("{}.gamma", self.name), Tensor::full(&[self.channels], 1.0));
        store.insert(&format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
        store.insert_buffer(&format!("{}.running_mean", self.name), vec![0.0; self.channels]);
        store.insert_buffer(&format!("{}.running_var", self.name), vec![1.0; self.channels]);
    }

    pub fn forward(&self, sess: &mut Session, x: TensorId) -> Result<TensorId> {
        let gamma = sess.param(&format!("{}.gamma", self.name));
        let beta = sess.param(&format!("{}.beta", self.name));
        if sess.training {
            let shape = sess.tape.shape(x).to_vec();
            let group = (shape[0] * shape[2..].iter().product::<usize>()) as f64;
            let (y, mean, var) = sess.tape.batch_norm(x, gamma, beta)?;
            // Unbiased variance in the running stats when possible.
            let unbias = if group > 1.0 { group / (group - 1.0) } else { 1.0 };
            let rm = sess.store_mut().buffer_mut(&format!("{}.running_mean", self.name));
            for (r, b) in rm.iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let rv = sess.store_mut().buffer_mut(&format!("{}.running_var", self.name));
            for (r, b) in rv.iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (b * unbias);
            }
            Ok(y)
        } else {
            let mean = sess.store().buffer(&format!("{}.running_mean", self.name)).to_vec();
            let var = sess.store().buffer(&format!("{}.running_var", self.name)).to_vec();
            sess.tape.batch_norm_eval(x, gamma, beta, &mean, &var)
        }
    }
}

/// Channel layer norm (ConvNeXt style).
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        LayerNorm { name: name.to_string(), channels }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(&format!("{}.gamma", self.name), Tensor::full(&[self.channels], 1.0));
        store.insert(&format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
    }

    pub fn forward(&self, sess: &mut Session, x: TensorId) -> Result<TensorId> {
        let gamma = sess.param(&format!("{}.gamma", self.name));
        let beta = sess.param(&format!("{}.beta", self.name));
        sess.tape.layer_norm(x, gamma, beta)
    }
}
