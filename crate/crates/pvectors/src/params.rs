//! Named parameter storage, forward-pass binding, and the checkpoint format.
//!
//! Parameters live in a flat [`ParamStore`] keyed by hierarchical dotted
//! names (`tdnn.block1.conv1.weight`). A [`Forward`] wraps a [`Tape`] for a
//! single forward/backward pass: it binds store parameters as tape leaves on
//! first use and collects their gradients afterwards. Batch-norm running
//! statistics are ordinary non-trainable entries in the store; a forward
//! pass in training mode returns the batch statistics for the caller to fold
//! in, keeping the forward itself pure.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) {
        self.map.insert(name.to_string(), Param { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.map
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{}'", name)))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter '{}'", name)))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn remove_namespace(&mut self, prefix: &str) {
        let full = format!("{}.", prefix);
        self.map.retain(|k, _| !k.starts_with(&full) && k != prefix);
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.map
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Trainable scalar counts grouped by the first dotted name component.
    pub fn count_by_namespace(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.map {
            if !p.trainable {
                continue;
            }
            let ns = name.split('.').next().unwrap_or(name).to_string();
            *out.entry(ns).or_insert(0) += p.tensor.numel();
        }
        out
    }

    /// Copy every entry under `prefix.` from `src`, erroring on names that
    /// `src` does not provide.
    pub fn copy_namespace_from(&mut self, src: &ParamStore, prefix: &str) -> Result<()> {
        let full = format!("{}.", prefix);
        let mut missing = Vec::new();
        let names: Vec<String> = self
            .map
            .keys()
            .filter(|k| k.starts_with(&full))
            .cloned()
            .collect();
        for name in names {
            match src.map.get(&name) {
                Some(p) => {
                    self.map.insert(name, p.clone());
                }
                None => missing.push(name),
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Transfer(missing))
        }
    }
}

// ── initialization ───────────────────────────────────────────────────

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
}

/// Conv/linear weight + bias with the usual 1/sqrt(fan_in) bound.
pub fn init_conv1d(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cout: usize, cin: usize, k: usize) {
    let bound = 1.0 / ((cin * k) as f64).sqrt();
    store.insert(&format!("{}.weight", prefix), uniform(rng, &[cout, cin, k], bound), true);
    store.insert(&format!("{}.bias", prefix), uniform(rng, &[cout], bound), true);
}

pub fn init_conv2d(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cout: usize, cin: usize, kh: usize, kw: usize) {
    let bound = 1.0 / ((cin * kh * kw) as f64).sqrt();
    store.insert(&format!("{}.weight", prefix), uniform(rng, &[cout, cin, kh, kw], bound), true);
    store.insert(&format!("{}.bias", prefix), uniform(rng, &[cout], bound), true);
}

/// Linear layer stored as [din, dout] so forward is a plain matmul.
pub fn init_linear(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, din: usize, dout: usize) {
    let bound = 1.0 / (din as f64).sqrt();
    store.insert(&format!("{}.weight", prefix), uniform(rng, &[din, dout], bound), true);
    store.insert(&format!("{}.bias", prefix), uniform(rng, &[dout], bound), true);
}

pub fn init_batchnorm(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(&format!("{}.weight", prefix), Tensor::full(&[c], 1.0), true);
    store.insert(&format!("{}.bias", prefix), Tensor::zeros(&[c]), true);
    store.insert(&format!("{}.running_mean", prefix), Tensor::zeros(&[c]), false);
    store.insert(&format!("{}.running_var", prefix), Tensor::full(&[c], 1.0), false);
    store.insert(&format!("{}.steps", prefix), Tensor::scalar(0.0), false);
}

pub fn init_layernorm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(&format!("{}.weight", prefix), Tensor::full(&[d], 1.0), true);
    store.insert(&format!("{}.bias", prefix), Tensor::zeros(&[d]), true);
}

// ── forward context ──────────────────────────────────────────────────

/// New batch statistics produced by one batch-norm application.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: HashMap<String, TensorId>,
    pub training: bool,
    pub bn_updates: Vec<BnUpdate>,
    pub trace: Vec<String>,
    pub dropout: f64,
    pub dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Forward {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            training,
            bn_updates: Vec::new(),
            trace: Vec::new(),
            dropout: 0.0,
            dropout_rng: None,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Bind a parameter as a tape leaf (cached per name).
    pub fn p(&mut self, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let param = self.store.get(name)?;
        let mut t = param.tensor.clone();
        t.requires_grad = param.trainable && self.training;
        let id = self.tape.leaf(&t);
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn input(&mut self, t: &Tensor) -> TensorId {
        self.tape.leaf(t)
    }

    /// Post-backward gradients for every bound trainable parameter.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.bound {
            if let Some(g) = self.tape.grad(id) {
                out.insert(name.clone(), g.to_vec());
            }
        }
        out
    }

    pub fn linear(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let w = self.p(&format!("{}.weight", prefix))?;
        let b = self.p(&format!("{}.bias", prefix))?;
        let dout = self.tape.shape(w)[1];
        let y = self.tape.matmul(x, w)?;
        let b2 = self.tape.reshape(b, vec![1, dout])?;
        self.tape.add(y, b2)
    }

    pub fn conv1d(
        &mut self,
        x: TensorId,
        prefix: &str,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let w = self.p(&format!("{}.weight", prefix))?;
        let b = self.p(&format!("{}.bias", prefix))?;
        self.tape.conv1d(x, w, b, stride, dilation, padding)
    }

    pub fn conv2d(&mut self, x: TensorId, prefix: &str, padding: usize) -> Result<TensorId> {
        let w = self.p(&format!("{}.weight", prefix))?;
        let b = self.p(&format!("{}.bias", prefix))?;
        self.tape.conv2d(x, w, b, padding)
    }

    pub fn layernorm(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let g = self.p(&format!("{}.weight", prefix))?;
        let b = self.p(&format!("{}.bias", prefix))?;
        self.tape.layernorm(x, g, b, LN_EPS)
    }

    pub fn batchnorm(&mut self, x: TensorId, prefix: &str) -> Result<TensorId> {
        let g = self.p(&format!("{}.weight", prefix))?;
        let b = self.p(&format!("{}.bias", prefix))?;
        let (y, stats) = if self.training {
            self.tape.batchnorm1d(x, g, b, None, true, BN_EPS)?
        } else {
            let steps = self.store.get(&format!("{}.steps", prefix))?.tensor.data[0];
            if steps < 1.0 {
                return Err(Error::State(format!(
                    "batchnorm '{}' used in eval mode before any training step",
                    prefix
                )));
            }
            let rm = self.store.get(&format!("{}.running_mean", prefix))?.tensor.data.clone();
            let rv = self.store.get(&format!("{}.running_var", prefix))?.tensor.data.clone();
            self.tape.batchnorm1d(x, g, b, Some((&rm, &rv)), false, BN_EPS)?
        };
        if let Some((mean, var)) = stats {
            self.bn_updates.push(BnUpdate { prefix: prefix.to_string(), mean, var });
        }
        Ok(y)
    }

    /// Inverted dropout; identity when not training or rate is zero.
    pub fn apply_dropout(&mut self, x: TensorId) -> Result<TensorId> {
        if !self.training || self.dropout <= 0.0 {
            return Ok(x);
        }
        let rng = match &mut self.dropout_rng {
            Some(r) => r,
            None => return Ok(x),
        };
        let p = self.dropout;
        let shape = self.tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 - p;
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / keep })
            .collect();
        let m = self.tape.constant(shape, mask);
        self.tape.mul(x, m)
    }
}

/// Fold batch statistics into the store's running statistics.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        let rm = store.get_mut(&format!("{}.running_mean", u.prefix))?;
        for (r, &m) in rm.tensor.data.iter_mut().zip(&u.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.get_mut(&format!("{}.running_var", u.prefix))?;
        for (r, &v) in rv.tensor.data.iter_mut().zip(&u.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        store.get_mut(&format!("{}.steps", u.prefix))?.tensor.data[0] += 1.0;
    }
    Ok(())
}

// ── checkpoint format ────────────────────────────────────────────────

pub const CKPT_MAGIC: &[u8; 4] = b"PVCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u32,
    pub stage: u32,
    /// Adam first/second moments keyed by parameter name.
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub version: u32,
    pub store: ParamStore,
    pub state: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, state: Option<TrainState>) -> Self {
        Checkpoint { version: CKPT_VERSION, store: store.clone(), state }
    }

    /// Load checkpoint values into a freshly initialized store of the same
    /// layout. Names present in the checkpoint but unknown to the target, or
    /// expected by the target but absent, are reported together.
    pub fn apply_to(&self, target: &mut ParamStore) -> Result<()> {
        let mut problems = Vec::new();
        for (name, p) in self.store.iter() {
            match target.map.get_mut(name) {
                Some(slot) => {
                    if slot.tensor.shape != p.tensor.shape {
                        return Err(Error::Format(format!(
                            "checkpoint tensor '{}' has shape {:?}, expected {:?}",
                            name, p.tensor.shape, slot.tensor.shape
                        )));
                    }
                    slot.tensor.data = p.tensor.data.clone();
                }
                None => problems.push(format!("unknown: {}", name)),
            }
        }
        for name in target.map.keys() {
            if !self.store.contains(name) {
                problems.push(format!("missing: {}", name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Transfer(problems))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(CKPT_MAGIC)?;
        f.write_u32::<LittleEndian>(self.version)?;
        f.write_u32::<LittleEndian>(self.store.map.len() as u32)?;
        for (name, p) in &self.store.map {
            write_str(&mut f, name)?;
            f.write_u8(p.trainable as u8)?;
            f.write_u32::<LittleEndian>(p.tensor.shape.len() as u32)?;
            for &d in &p.tensor.shape {
                f.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &p.tensor.data {
                f.write_f64::<LittleEndian>(v)?;
            }
        }
        match &self.state {
            None => f.write_u8(0)?,
            Some(s) => {
                f.write_u8(1)?;
                f.write_u64::<LittleEndian>(s.step)?;
                f.write_u32::<LittleEndian>(s.epoch)?;
                f.write_u32::<LittleEndian>(s.stage)?;
                f.write_u32::<LittleEndian>(s.moments.len() as u32)?;
                for (name, (m, v)) in &s.moments {
                    write_str(&mut f, name)?;
                    f.write_u64::<LittleEndian>(m.len() as u64)?;
                    for &x in m {
                        f.write_f64::<LittleEndian>(x)?;
                    }
                    for &x in v {
                        f.write_f64::<LittleEndian>(x)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)
            .map_err(|_| Error::Format("checkpoint truncated before magic".into()))?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {:?}", magic)));
        }
        let version = f.read_u32::<LittleEndian>()?;
        if version != CKPT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
        }
        let n = f.read_u32::<LittleEndian>()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let name = read_str(&mut f)?;
            let trainable = f.read_u8()? != 0;
            let ndim = f.read_u32::<LittleEndian>()? as usize;
            if ndim > 8 {
                return Err(Error::Format(format!("tensor '{}' rank {} overflows", name, ndim)));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(f.read_u32::<LittleEndian>()? as usize);
            }
            let numel: usize = shape.iter().product();
            if numel > 1 << 28 {
                return Err(Error::Format(format!("tensor '{}' dim overflow", name)));
            }
            let mut data = vec![0.0; numel];
            for v in data.iter_mut() {
                *v = f
                    .read_f64::<LittleEndian>()
                    .map_err(|_| Error::Format(format!("checkpoint truncated in '{}'", name)))?;
            }
            store.insert(&name, Tensor::new(shape, data)?, trainable);
        }
        let has_state = f.read_u8()? != 0;
        let state = if has_state {
            let step = f.read_u64::<LittleEndian>()?;
            let epoch = f.read_u32::<LittleEndian>()?;
            let stage = f.read_u32::<LittleEndian>()?;
            let nm = f.read_u32::<LittleEndian>()? as usize;
            let mut moments = BTreeMap::new();
            for _ in 0..nm {
                let name = read_str(&mut f)?;
                let len = f.read_u64::<LittleEndian>()? as usize;
                let mut m = vec![0.0; len];
                let mut v = vec![0.0; len];
                for x in m.iter_mut() {
                    *x = f.read_f64::<LittleEndian>()?;
                }
                for x in v.iter_mut() {
                    *x = f.read_f64::<LittleEndian>()?;
                }
                moments.insert(name, (m, v));
            }
            Some(TrainState { step, epoch, stage, moments })
        } else {
            None
        };
        Ok(Checkpoint { version, store, state })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 4096 {
        return Err(Error::Format("name length overflow".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("checkpoint truncated in name".into()))?;
    String::from_utf8(buf).map_err(|_| Error::Format("non-utf8 name".into()))
}
