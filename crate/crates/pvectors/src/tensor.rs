//! Dense float64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to tensors registered on it and
//! replays the records in reverse to accumulate gradients. The operation set
//! is exactly what the model needs: matmul/bmm, 1-D/2-D convolution, the
//! usual activations, batch/layer norm, pooling, nearest upsampling and the
//! structural ops (concat/permute/reshape/narrow) with singleton-axis
//! broadcasting for add/mul/div.

use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![v; n], requires_grad: false, grad: None }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false, grad: None }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false, grad: None }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Accumulate (+=) a gradient buffer into `self.grad`.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(gr) => {
                for (a, b) in gr.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a tensor registered on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

struct Slot {
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
}

/// Read-only view of tape values handed to backward closures.
pub struct TapeValues {
    slots: Vec<Slot>,
}

impl TapeValues {
    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.slots[id.0].shape
    }
    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.slots[id.0].data
    }
    fn numel(&self, id: TensorId) -> usize {
        self.slots[id.0].data.len()
    }
    fn needs_grad(&self, id: TensorId) -> bool {
        self.slots[id.0].needs_grad
    }
}

type BackwardFn = Box<dyn Fn(&TapeValues, &[f64]) -> Vec<Vec<f64>>>;

struct Node {
    inputs: Vec<TensorId>,
    backward: BackwardFn,
}

/// Wengert list: values plus one backward record per non-leaf value.
pub struct Tape {
    v: TapeValues,
    nodes: Vec<Option<Node>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!("broadcast rank mismatch: {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || x == 1 || y == 1 {
                Ok(x.max(y))
            } else {
                Err(Error::Dim(format!("incompatible broadcast: {:?} vs {:?}", a, b)))
            }
        })
        .collect()
}

impl Tape {
    pub fn new() -> Self {
        Tape { v: TapeValues { slots: Vec::new() }, nodes: Vec::new(), grads: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, node: Option<Node>) -> TensorId {
        self.v.slots.push(Slot { shape, data, needs_grad });
        self.nodes.push(node);
        self.grads.push(None);
        TensorId(self.v.slots.len() - 1)
    }

    /// Register a tensor as a leaf. Gradient participation follows `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, None)
    }

    /// Register a constant that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.push(shape, data, false, None)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.v.shape(id)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        self.v.data(id)
    }

    pub fn value(&self, id: TensorId) -> Tensor {
        Tensor {
            shape: self.v.shape(id).to_vec(),
            data: self.v.data(id).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    fn any_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.v.needs_grad(i))
    }

    fn record(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<TensorId>,
        backward: BackwardFn,
    ) -> TensorId {
        let ng = self.any_grad(&inputs);
        let node = if ng { Some(Node { inputs, backward }) } else { None };
        self.push(shape, data, ng, node)
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// reachable tensor that participates in differentiation.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.v.numel(loss) != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.v.shape(loss)
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let (inputs, gs) = {
                let node = match &self.nodes[i] {
                    Some(n) => n,
                    None => continue,
                };
                let og = self.grads[i].as_deref().unwrap();
                let gs = (node.backward)(&self.v, og);
                (node.inputs.clone(), gs)
            };
            for (inp, g) in inputs.into_iter().zip(gs) {
                if !self.v.needs_grad(inp) {
                    continue;
                }
                debug_assert_eq!(g.len(), self.v.numel(inp));
                match &mut self.grads[inp.0] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn ewise_binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: fn(f64, f64) -> f64,
        dfa: fn(f64, f64) -> f64,
        dfb: fn(f64, f64) -> f64,
    ) -> Result<TensorId> {
        let sa = self.v.shape(a).to_vec();
        let sb = self.v.shape(b).to_vec();
        let so = broadcast_shape(&sa, &sb)?;
        let (sta, stb, sto) = (strides(&sa), strides(&sb), strides(&so));
        let n: usize = so.iter().product();
        let mut out = vec![0.0; n];
        let map = |flat: usize, s_in: &[usize], st_in: &[usize]| -> usize {
            let mut rem = flat;
            let mut off = 0;
            for d in 0..so.len() {
                let c = rem / sto[d];
                rem %= sto[d];
                if s_in[d] != 1 {
                    off += c * st_in[d];
                }
            }
            off
        };
        for i in 0..n {
            out[i] = f(self.v.data(a)[map(i, &sa, &sta)], self.v.data(b)[map(i, &sb, &stb)]);
        }
        let (sa2, sb2, so2) = (sa.clone(), sb.clone(), so.clone());
        let bw: BackwardFn = Box::new(move |v, og| {
            let (sta, stb, sto) = (strides(&sa2), strides(&sb2), strides(&so2));
            let mut ga = vec![0.0; v.numel(a)];
            let mut gb = vec![0.0; v.numel(b)];
            let ad = v.data(a);
            let bd = v.data(b);
            for (i, &g) in og.iter().enumerate() {
                let mut rem = i;
                let (mut oa, mut ob) = (0usize, 0usize);
                for d in 0..so2.len() {
                    let c = rem / sto[d];
                    rem %= sto[d];
                    if sa2[d] != 1 {
                        oa += c * sta[d];
                    }
                    if sb2[d] != 1 {
                        ob += c * stb[d];
                    }
                }
                ga[oa] += g * dfa(ad[oa], bd[ob]);
                gb[ob] += g * dfb(ad[oa], bd[ob]);
            }
            vec![ga, gb]
        });
        Ok(self.record(so, out, vec![a, b], bw))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ewise_binary(a, b, |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ewise_binary(a, b, |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ewise_binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ewise_binary(a, b, |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Elementwise unary op. `df` receives (input, output).
    fn ewise_unary(
        &mut self,
        a: TensorId,
        f: fn(f64) -> f64,
        df: fn(f64, f64) -> f64,
    ) -> TensorId {
        let shape = self.v.shape(a).to_vec();
        let out: Vec<f64> = self.v.data(a).iter().map(|&x| f(x)).collect();
        let out_saved = out.clone();
        let bw: BackwardFn = Box::new(move |v, og| {
            let ad = v.data(a);
            vec![og.iter().enumerate().map(|(i, &g)| g * df(ad[i], out_saved[i])).collect()]
        });
        self.record(shape, out, vec![a], bw)
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.ewise_unary(a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.v.shape(a).to_vec();
        let out: Vec<f64> = self.v.data(a).iter().map(|&x| x * c).collect();
        let bw: BackwardFn = Box::new(move |_, og| vec![og.iter().map(|&g| g * c).collect()]);
        self.record(shape, out, vec![a], bw)
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let shape = self.v.shape(a).to_vec();
        let out: Vec<f64> = self.v.data(a).iter().map(|&x| x + c).collect();
        let bw: BackwardFn = Box::new(move |_, og| vec![og.to_vec()]);
        self.record(shape, out, vec![a], bw)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.ewise_unary(a, |x| if x > 0.0 { x } else { 0.0 }, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.ewise_unary(
            a,
            |x| {
                // stable in both tails
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.ewise_unary(a, |x| x.tanh(), |_, y| 1.0 - y * y)
    }

    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        self.ewise_unary(a, |x| x.sqrt(), |_, y| 0.5 / y)
    }

    // ── matrix products ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.v.shape(a);
        let sb = self.v.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.v.data(a), self.v.data(b), m, k, n);
        let bw: BackwardFn = Box::new(move |v, og| {
            let ad = v.data(a);
            let bd = v.data(b);
            // ga = og . b^T  ;  gb = a^T . og
            let mut ga = vec![0.0; m * k];
            for i in 0..m {
                for j in 0..n {
                    let g = og[i * n + j];
                    if g == 0.0 {
                        continue;
                    }
                    for p in 0..k {
                        ga[i * k + p] += g * bd[p * n + j];
                    }
                }
            }
            let mut gb = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        gb[p * n + j] += av * og[i * n + j];
                    }
                }
            }
            vec![ga, gb]
        });
        Ok(self.record(vec![m, n], out, vec![a, b], bw))
    }

    /// Batched matmul over rank-3 tensors: [B,M,K] x [B,K,N] -> [B,M,N].
    pub fn bmm(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.v.shape(a).to_vec();
        let sb = self.v.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dim(format!("bmm: {:?} x {:?}", sa, sb)));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bt * m * n];
        for q in 0..bt {
            let o = matmul_raw(
                &self.v.data(a)[q * m * k..(q + 1) * m * k],
                &self.v.data(b)[q * k * n..(q + 1) * k * n],
                m,
                k,
                n,
            );
            out[q * m * n..(q + 1) * m * n].copy_from_slice(&o);
        }
        let bw: BackwardFn = Box::new(move |v, og| {
            let ad = v.data(a);
            let bd = v.data(b);
            let mut ga = vec![0.0; bt * m * k];
            let mut gb = vec![0.0; bt * k * n];
            for q in 0..bt {
                let (ao, bo, oo) = (q * m * k, q * k * n, q * m * n);
                for i in 0..m {
                    for j in 0..n {
                        let g = og[oo + i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[ao + i * k + p] += g * bd[bo + p * n + j];
                            gb[bo + p * n + j] += g * ad[ao + i * k + p];
                        }
                    }
                }
            }
            vec![ga, gb]
        });
        Ok(self.record(vec![bt, m, n], out, vec![a, b], bw))
    }

    // ── reductions / softmax ────────────────────────────────────────

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.v.data(a).iter().sum();
        let n = self.v.numel(a);
        let bw: BackwardFn = Box::new(move |_, og| vec![vec![og[0]; n]]);
        self.record(vec![], vec![s], vec![a], bw)
    }

    pub fn sum_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.v.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Dim(format!("sum_axis {} on shape {:?}", axis, sa)));
        }
        let outer: usize = sa[..axis].iter().product();
        let len = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let mut so = sa.clone();
        so.remove(axis);
        let mut out = vec![0.0; outer * inner];
        let ad = self.v.data(a);
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += ad[(o * len + l) * inner + i];
                }
            }
        }
        let bw: BackwardFn = Box::new(move |_, og| {
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        ga[(o * len + l) * inner + i] = og[o * inner + i];
                    }
                }
            }
            vec![ga]
        });
        Ok(self.record(so, out, vec![a], bw))
    }

    pub fn mean_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let n = self.v.shape(a)[axis] as f64;
        let s = self.sum_axis(a, axis)?;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Max over an axis; ties route the gradient to the first maximal index.
    pub fn max_axis(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.v.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Dim(format!("max_axis {} on shape {:?}", axis, sa)));
        }
        let outer: usize = sa[..axis].iter().product();
        let len = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let mut so = sa.clone();
        so.remove(axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        let ad = self.v.data(a);
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = ad[(o * len + l) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = l;
                    }
                }
            }
        }
        let bw: BackwardFn = Box::new(move |_, og| {
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let l = arg[o * inner + i];
                    ga[(o * len + l) * inner + i] = og[o * inner + i];
                }
            }
            vec![ga]
        });
        Ok(self.record(so, out, vec![a], bw))
    }

    /// Numerically stable softmax along `axis` (max-shifted).
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let sa = self.v.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Dim(format!("softmax axis {} on shape {:?}", axis, sa)));
        }
        let outer: usize = sa[..axis].iter().product();
        let len = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let ad = self.v.data(a);
        let mut out = vec![0.0; ad.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mx = (0..len).map(|l| ad[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (ad[idx(l)] - mx).exp();
                    out[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    out[idx(l)] /= z;
                }
            }
        }
        let y = out.clone();
        let bw: BackwardFn = Box::new(move |_, og| {
            let mut ga = vec![0.0; og.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| og[idx(l)] * y[idx(l)]).sum();
                    for l in 0..len {
                        ga[idx(l)] = y[idx(l)] * (og[idx(l)] - dot);
                    }
                }
            }
            vec![ga]
        });
        Ok(self.record(sa, out, vec![a], bw))
    }

    /// Mean cross-entropy over a batch of logit rows, fused with log-softmax.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let s = self.v.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::Dim(format!(
                "cross_entropy: logits {:?} vs {} labels",
                s,
                labels.len()
            )));
        }
        let (b, n) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Input(format!("label {} out of range 0..{}", bad, n)));
        }
        let ld = self.v.data(logits);
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &ld[r * n..(r + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            for j in 0..n {
                probs[r * n + j] = (row[j] - mx).exp() / z;
            }
            loss += z.ln() + mx - row[labels[r]];
        }
        loss /= b as f64;
        let labels = labels.to_vec();
        let bw: BackwardFn = Box::new(move |_, og| {
            let g = og[0] / b as f64;
            let mut ga = vec![0.0; b * n];
            for r in 0..b {
                for j in 0..n {
                    let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                    ga[r * n + j] = g * (probs[r * n + j] - onehot);
                }
            }
            vec![ga]
        });
        Ok(self.record(vec![], vec![loss], vec![logits], bw))
    }

    // ── structural ──────────────────────────────────────────────────

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.v.numel(a) {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?}",
                self.v.shape(a),
                shape
            )));
        }
        let out = self.v.data(a).to_vec();
        let bw: BackwardFn = Box::new(move |_, og| vec![og.to_vec()]);
        Ok(self.record(shape, out, vec![a], bw))
    }

    pub fn permute(&mut self, a: TensorId, order: &[usize]) -> Result<TensorId> {
        let sa = self.v.shape(a).to_vec();
        let r = sa.len();
        let mut seen = vec![false; r];
        if order.len() != r || order.iter().any(|&o| o >= r || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::Dim(format!("permute {:?} on rank {}", order, r)));
        }
        let so: Vec<usize> = order.iter().map(|&o| sa[o]).collect();
        let sta = strides(&sa);
        let sto = strides(&so);
        let n = self.v.numel(a);
        let mut out = vec![0.0; n];
        let ad = self.v.data(a);
        for i in 0..n {
            let mut rem = i;
            let mut src = 0;
            for d in 0..r {
                let c = rem / sto[d];
                rem %= sto[d];
                src += c * sta[order[d]];
            }
            out[i] = ad[src];
        }
        let order_v = order.to_vec();
        let so_bw = so.clone();
        let bw: BackwardFn = Box::new(move |_, og| {
            let sta = strides(&sa);
            let sto = strides(&so_bw);
            let mut ga = vec![0.0; og.len()];
            for (i, &g) in og.iter().enumerate() {
                let mut rem = i;
                let mut src = 0;
                for d in 0..order_v.len() {
                    let c = rem / sto[d];
                    rem %= sto[d];
                    src += c * sta[order_v[d]];
                }
                ga[src] = g;
            }
            vec![ga]
        });
        Ok(self.record(so, out, vec![a], bw))
    }

    pub fn narrow(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.v.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(Error::Dim(format!(
                "narrow axis {} [{}, {}) on {:?}",
                axis,
                start,
                start + len,
                sa
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let full = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        let mut so = sa.clone();
        so[axis] = len;
        let ad = self.v.data(a);
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = (o * full + start + l) * inner;
                let dst = (o * len + l) * inner;
                out[dst..dst + inner].copy_from_slice(&ad[src..src + inner]);
            }
        }
        let bw: BackwardFn = Box::new(move |_, og| {
            let mut ga = vec![0.0; outer * full * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = (o * full + start + l) * inner;
                    let src = (o * len + l) * inner;
                    ga[dst..dst + inner].copy_from_slice(&og[src..src + inner]);
                }
            }
            vec![ga]
        });
        Ok(self.record(so, out, vec![a], bw))
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Dim("concat of zero tensors".into()));
        }
        let s0 = self.v.shape(parts[0]).to_vec();
        if axis >= s0.len() {
            return Err(Error::Dim(format!("concat axis {} on {:?}", axis, s0)));
        }
        let mut total = 0usize;
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.v.shape(p);
            if sp.len() != s0.len()
                || sp.iter().zip(&s0).enumerate().any(|(d, (&x, &y))| d != axis && x != y)
            {
                return Err(Error::Dim(format!("concat shape mismatch: {:?} vs {:?}", sp, s0)));
            }
            lens.push(sp[axis]);
            total += sp[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut so = s0.clone();
        so[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        let mut off = 0usize;
        for (pi, &p) in parts.iter().enumerate() {
            let pd = self.v.data(p);
            let l = lens[pi];
            for o in 0..outer {
                let dst = (o * total + off) * inner;
                let src = o * l * inner;
                out[dst..dst + l * inner].copy_from_slice(&pd[src..src + l * inner]);
            }
            off += l;
        }
        let lens_b = lens.clone();
        let bw: BackwardFn = Box::new(move |_, og| {
            let mut gs = Vec::with_capacity(lens_b.len());
            let mut off = 0usize;
            for &l in &lens_b {
                let mut g = vec![0.0; outer * l * inner];
                for o in 0..outer {
                    let src = (o * total + off) * inner;
                    let dst = o * l * inner;
                    g[dst..dst + l * inner].copy_from_slice(&og[src..src + l * inner]);
                }
                off += l;
                gs.push(g);
            }
            gs
        });
        Ok(self.record(so, out, parts.to_vec(), bw))
    }

    /// Repeat each slice along the last axis `factor` times.
    pub fn upsample_nearest(&mut self, a: TensorId, factor: usize) -> Result<TensorId> {
        if factor == 0 {
            return Err(Error::Dim("upsample factor must be >= 1".into()));
        }
        let sa = self.v.shape(a).to_vec();
        let t = *sa.last().ok_or_else(|| Error::Dim("upsample on rank-0".into()))?;
        let outer: usize = sa[..sa.len() - 1].iter().product();
        let mut so = sa.clone();
        *so.last_mut().unwrap() = t * factor;
        let ad = self.v.data(a);
        let mut out = vec![0.0; outer * t * factor];
        for o in 0..outer {
            for i in 0..t {
                let v = ad[o * t + i];
                for f in 0..factor {
                    out[o * t * factor + i * factor + f] = v;
                }
            }
        }
        let bw: BackwardFn = Box::new(move |_, og| {
            let mut ga = vec![0.0; outer * t];
            for o in 0..outer {
                for i in 0..t {
                    for f in 0..factor {
                        ga[o * t + i] += og[o * t * factor + i * factor + f];
                    }
                }
            }
            vec![ga]
        });
        Ok(self.record(so, out, vec![a], bw))
    }

    // ── convolutions ────────────────────────────────────────────────

    /// 1-D cross-correlation. `x` is [Cin,T] or [B,Cin,T]; `w` is [Cout,Cin,K].
    pub fn conv1d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        dilation: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let sx = self.v.shape(x).to_vec();
        let sw = self.v.shape(w).to_vec();
        let (batched, b, cin, t) = match sx.len() {
            2 => (false, 1, sx[0], sx[1]),
            3 => (true, sx[0], sx[1], sx[2]),
            _ => return Err(Error::Dim(format!("conv1d input rank {:?}", sx))),
        };
        if sw.len() != 3 || sw[1] != cin {
            return Err(Error::Dim(format!("conv1d weight {:?} for Cin {}", sw, cin)));
        }
        let (cout, k) = (sw[0], sw[2]);
        if self.v.shape(bias) != [cout] {
            return Err(Error::Dim(format!(
                "conv1d bias {:?} for Cout {}",
                self.v.shape(bias),
                cout
            )));
        }
        if stride == 0 || dilation == 0 || k == 0 {
            return Err(Error::Dim("conv1d: stride/dilation/kernel must be >= 1".into()));
        }
        let span = dilation * (k - 1) + 1;
        let tp_num = (t + 2 * padding).checked_sub(span).map(|v| v / stride + 1);
        let tout = match tp_num {
            Some(v) if v >= 1 => v,
            _ => {
                return Err(Error::Dim(format!(
                    "conv1d: nonpositive output length (T={}, K={}, d={}, p={}, s={})",
                    t, k, dilation, padding, stride
                )))
            }
        };
        let xd = self.v.data(x);
        let wd = self.v.data(w);
        let bd = self.v.data(bias);
        let mut out = vec![0.0; b * cout * tout];
        for n in 0..b {
            for co in 0..cout {
                for to in 0..tout {
                    let mut acc = bd[co];
                    for kk in 0..k {
                        let ti = (to * stride + kk * dilation) as isize - padding as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for ci in 0..cin {
                            acc += xd[(n * cin + ci) * t + ti] * wd[(co * cin + ci) * k + kk];
                        }
                    }
                    out[(n * cout + co) * tout + to] = acc;
                }
            }
        }
        let so = if batched { vec![b, cout, tout] } else { vec![cout, tout] };
        let bw: BackwardFn = Box::new(move |v, og| {
            let xd = v.data(x);
            let wd = v.data(w);
            let mut gx = vec![0.0; b * cin * t];
            let mut gw = vec![0.0; cout * cin * k];
            let mut gb = vec![0.0; cout];
            for n in 0..b {
                for co in 0..cout {
                    for to in 0..tout {
                        let g = og[(n * cout + co) * tout + to];
                        if g == 0.0 {
                            continue;
                        }
                        gb[co] += g;
                        for kk in 0..k {
                            let ti = (to * stride + kk * dilation) as isize - padding as isize;
                            if ti < 0 || ti >= t as isize {
                                continue;
                            }
                            let ti = ti as usize;
                            for ci in 0..cin {
                                gx[(n * cin + ci) * t + ti] += g * wd[(co * cin + ci) * k + kk];
                                gw[(co * cin + ci) * k + kk] += g * xd[(n * cin + ci) * t + ti];
                            }
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        });
        Ok(self.record(so, out, vec![x, w, bias], bw))
    }

    /// 2-D cross-correlation, stride 1. `x` is [Cin,H,W] or [B,Cin,H,W];
    /// `w` is [Cout,Cin,Kh,Kw].
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        padding: usize,
    ) -> Result<TensorId> {
        let sx = self.v.shape(x).to_vec();
        let sw = self.v.shape(w).to_vec();
        let (batched, b, cin, h, wd_in) = match sx.len() {
            3 => (false, 1, sx[0], sx[1], sx[2]),
            4 => (true, sx[0], sx[1], sx[2], sx[3]),
            _ => return Err(Error::Dim(format!("conv2d input rank {:?}", sx))),
        };
        if sw.len() != 4 || sw[1] != cin {
            return Err(Error::Dim(format!("conv2d weight {:?} for Cin {}", sw, cin)));
        }
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if self.v.shape(bias) != [cout] {
            return Err(Error::Dim("conv2d bias shape".into()));
        }
        let ho = (h + 2 * padding).checked_sub(kh).map(|v| v + 1);
        let wo = (wd_in + 2 * padding).checked_sub(kw).map(|v| v + 1);
        let (ho, wo) = match (ho, wo) {
            (Some(a), Some(bb)) if a >= 1 && bb >= 1 => (a, bb),
            _ => return Err(Error::Dim("conv2d: nonpositive output extent".into())),
        };
        let xd = self.v.data(x);
        let wdd = self.v.data(w);
        let bd = self.v.data(bias);
        let mut out = vec![0.0; b * cout * ho * wo];
        for n in 0..b {
            for co in 0..cout {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = bd[co];
                        for ki in 0..kh {
                            let hi = (i + ki) as isize - padding as isize;
                            if hi < 0 || hi >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let wi = (j + kj) as isize - padding as isize;
                                if wi < 0 || wi >= wd_in as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    acc += xd[((n * cin + ci) * h + hi as usize) * wd_in + wi as usize]
                                        * wdd[((co * cin + ci) * kh + ki) * kw + kj];
                                }
                            }
                        }
                        out[((n * cout + co) * ho + i) * wo + j] = acc;
                    }
                }
            }
        }
        let so = if batched { vec![b, cout, ho, wo] } else { vec![cout, ho, wo] };
        let bw: BackwardFn = Box::new(move |v, og| {
            let xd = v.data(x);
            let wdd = v.data(w);
            let mut gx = vec![0.0; b * cin * h * wd_in];
            let mut gw = vec![0.0; cout * cin * kh * kw];
            let mut gb = vec![0.0; cout];
            for n in 0..b {
                for co in 0..cout {
                    for i in 0..ho {
                        for j in 0..wo {
                            let g = og[((n * cout + co) * ho + i) * wo + j];
                            if g == 0.0 {
                                continue;
                            }
                            gb[co] += g;
                            for ki in 0..kh {
                                let hi = (i + ki) as isize - padding as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for kj in 0..kw {
                                    let wi = (j + kj) as isize - padding as isize;
                                    if wi < 0 || wi >= wd_in as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let xi = ((n * cin + ci) * h + hi as usize) * wd_in + wi as usize;
                                        let wix = ((co * cin + ci) * kh + ki) * kw + kj;
                                        gx[xi] += g * wdd[wix];
                                        gw[wix] += g * xd[xi];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, gw, gb]
        });
        Ok(self.record(so, out, vec![x, w, bias], bw))
    }

    // ── normalization ───────────────────────────────────────────────

    /// Batch normalization over channels. `x` is [B,C] or [B,C,T].
    /// In training mode, normalizes with batch statistics and returns them
    /// so the caller can fold them into running stats. In eval mode, uses
    /// the supplied running statistics.
    pub fn batchnorm1d(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running: Option<(&[f64], &[f64])>,
        training: bool,
        eps: f64,
    ) -> Result<(TensorId, Option<(Vec<f64>, Vec<f64>)>)> {
        let sx = self.v.shape(x).to_vec();
        let (b, c, t) = match sx.len() {
            2 => (sx[0], sx[1], 1usize),
            3 => (sx[0], sx[1], sx[2]),
            _ => return Err(Error::Dim(format!("batchnorm1d input rank {:?}", sx))),
        };
        if self.v.shape(gamma) != [c] || self.v.shape(beta) != [c] {
            return Err(Error::Dim("batchnorm1d affine shape".into()));
        }
        let idx = move |n: usize, ch: usize, ti: usize| (n * c + ch) * t + ti;
        let xd = self.v.data(x);
        let m = (b * t) as f64;
        let (mean, var, stats_out) = if training {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for n in 0..b {
                    for ti in 0..t {
                        s += xd[idx(n, ch, ti)];
                    }
                }
                mean[ch] = s / m;
                let mut v2 = 0.0;
                for n in 0..b {
                    for ti in 0..t {
                        let d = xd[idx(n, ch, ti)] - mean[ch];
                        v2 += d * d;
                    }
                }
                var[ch] = v2 / m;
            }
            // running stats carry the unbiased variance
            let unbiased: Vec<f64> = if m > 1.0 {
                var.iter().map(|&v| v * m / (m - 1.0)).collect()
            } else {
                var.clone()
            };
            let stats = (mean.clone(), unbiased);
            (mean, var, Some(stats))
        } else {
            let (rm, rv) = running.ok_or_else(|| {
                Error::State("batchnorm eval mode without running statistics".into())
            })?;
            (rm.to_vec(), rv.to_vec(), None)
        };
        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.v.data(gamma);
        let bd = self.v.data(beta);
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        for ch in 0..c {
            for n in 0..b {
                for ti in 0..t {
                    let i = idx(n, ch, ti);
                    xhat[i] = (xd[i] - mean[ch]) * invstd[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let xhat_b = xhat;
        let invstd_b = invstd;
        let bw: BackwardFn = Box::new(move |v, og| {
            let gd = v.data(gamma);
            let mut gx = vec![0.0; og.len()];
            let mut gg = vec![0.0; c];
            let mut gb2 = vec![0.0; c];
            for ch in 0..c {
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for n in 0..b {
                    for ti in 0..t {
                        let i = idx(n, ch, ti);
                        sum_dy += og[i];
                        sum_dy_xhat += og[i] * xhat_b[i];
                    }
                }
                gg[ch] = sum_dy_xhat;
                gb2[ch] = sum_dy;
                for n in 0..b {
                    for ti in 0..t {
                        let i = idx(n, ch, ti);
                        let dxhat = og[i] * gd[ch];
                        gx[i] = if training {
                            invstd_b[ch]
                                * (dxhat - (sum_dy * gd[ch] + xhat_b[i] * sum_dy_xhat * gd[ch]) / m)
                        } else {
                            dxhat * invstd_b[ch]
                        };
                    }
                }
            }
            vec![gx, gg, gb2]
        });
        let id = self.record(sx, out, vec![x, gamma, beta], bw);
        Ok((id, stats_out))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let sx = self.v.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::Dim("layernorm on rank-0".into()))?;
        if self.v.shape(gamma) != [d] || self.v.shape(beta) != [d] {
            return Err(Error::Dim("layernorm affine shape".into()));
        }
        let rows = self.v.numel(x) / d;
        let xd = self.v.data(x);
        let gd = self.v.data(gamma);
        let bd = self.v.data(beta);
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut invstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean: f64 = row.iter().sum::<f64>() / d as f64;
            let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            invstd[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let bw: BackwardFn = Box::new(move |v, og| {
            let gd = v.data(gamma);
            let mut gx = vec![0.0; og.len()];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let mut sum_dy = 0.0;
                let mut sum_dy_xhat = 0.0;
                for j in 0..d {
                    let i = r * d + j;
                    let dxhat = og[i] * gd[j];
                    sum_dy += dxhat;
                    sum_dy_xhat += dxhat * xhat[i];
                    gg[j] += og[i] * xhat[i];
                    gb[j] += og[i];
                }
                for j in 0..d {
                    let i = r * d + j;
                    let dxhat = og[i] * gd[j];
                    gx[i] = invstd[r] * (dxhat - (sum_dy + xhat[i] * sum_dy_xhat) / d as f64);
                }
            }
            vec![gx, gg, gb]
        });
        Ok(self.record(sx, out, vec![x, gamma, beta], bw))
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// Central finite-difference gradient of a scalar-valued function.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Relative gradient discrepancy: |a-b| / max(|a|, |b|, 1).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> TensorId {
        let mut t = Tensor::new(shape.to_vec(), data).unwrap();
        t.requires_grad = true;
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = leaf(&mut tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[1, 2], vec![1.0, 0.0]);
        let b = leaf(&mut tape, &[2, 1], vec![0.0, 5.0]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(y), &[0.0]);
    }

    #[test]
    fn matmul_grad_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let flat: Vec<f64> = a.iter().chain(&b).copied().collect();
        let run = |x: &[f64]| {
            let mut tape = Tape::new();
            let mut ta = Tensor::new(vec![3, 4], x[..12].to_vec()).unwrap();
            let mut tb = Tensor::new(vec![4, 2], x[12..].to_vec()).unwrap();
            ta.requires_grad = true;
            tb.requires_grad = true;
            let (ia, ib) = (tape.leaf(&ta), tape.leaf(&tb));
            let y = tape.matmul(ia, ib).unwrap();
            let s = tape.sum_all(y);
            (tape, ia, ib, s)
        };
        let (mut tape, ia, ib, s) = run(&flat);
        tape.backward(s).unwrap();
        let analytic: Vec<f64> = tape
            .grad(ia)
            .unwrap()
            .iter()
            .chain(tape.grad(ib).unwrap())
            .copied()
            .collect();
        let numeric = finite_diff_grad(
            |x| {
                let (t, _, _, s) = run(x);
                t.data(s)[0]
            },
            &flat,
            1e-5,
        );
        for (a, n) in analytic.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) <= 1e-6, "{} vs {}", a, n);
        }
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
        // w[c][c][0] = 1
        let w = leaf(&mut tape, &[2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut tape, &[2], vec![0.0, 0.0]);
        let y = tape.conv1d(x, w, b, 1, 1, 0).unwrap();
        assert_eq!(tape.data(y), tape.data(x));
    }

    #[test]
    fn conv1d_hand_values() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], vec![1.0, 2.0, 3.0]);
        let w = leaf(&mut tape, &[1, 1, 3], vec![1.0, 1.0, 1.0]);
        let b = leaf(&mut tape, &[1], vec![0.0]);
        let y = tape.conv1d(x, w, b, 1, 1, 1).unwrap();
        assert_eq!(tape.data(y), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_dilated_length() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 5], vec![0.0; 5]);
        let w = leaf(&mut tape, &[1, 1, 3], vec![1.0; 3]);
        let b = leaf(&mut tape, &[1], vec![0.0]);
        let y = tape.conv1d(x, w, b, 1, 2, 2).unwrap();
        assert_eq!(tape.shape(y), &[1, 5]);
    }

    #[test]
    fn conv2d_identity_and_hand_sum() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9]);
        let w1 = leaf(&mut tape, &[1, 1, 1, 1], vec![1.0]);
        let b0 = leaf(&mut tape, &[1], vec![0.0]);
        let y = tape.conv2d(x, w1, b0, 0).unwrap();
        assert_eq!(tape.data(y), &[1.0; 9]);
        let w3 = leaf(&mut tape, &[1, 1, 3, 3], vec![1.0; 9]);
        let y3 = tape.conv2d(x, w3, b0, 1).unwrap();
        // center of the padded all-ones convolution
        assert_eq!(tape.data(y3)[4], 9.0);
    }

    #[test]
    fn sigmoid_and_softmax_basics() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[1], vec![0.0]);
        let s = tape.sigmoid(z);
        assert_eq!(tape.data(s), &[0.5]);
        let x = leaf(&mut tape, &[1, 3], vec![0.0, 0.0, 0.0]);
        let sm = tape.softmax(x, 1).unwrap();
        for v in tape.data(sm) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_logits_no_overflow() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], vec![1000.0, 1000.0]);
        let sm = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.data(sm), &[0.5, 0.5]);
    }

    #[test]
    fn batchnorm_train_standardizes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[8, 2], (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let g = leaf(&mut tape, &[2], vec![1.0, 1.0]);
        let b = leaf(&mut tape, &[2], vec![0.0, 0.0]);
        let (y, stats) = tape.batchnorm1d(x, g, b, None, true, 1e-5).unwrap();
        assert!(stats.is_some());
        let d = tape.data(y);
        for c in 0..2 {
            let col: Vec<f64> = (0..8).map(|r| d[r * 2 + c]).collect();
            let mean: f64 = col.iter().sum::<f64>() / 8.0;
            let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batchnorm_constant_channel_is_zeroed() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4, 1], vec![5.0; 4]);
        let g = leaf(&mut tape, &[1], vec![1.0]);
        let b = leaf(&mut tape, &[1], vec![0.0]);
        let (y, _) = tape.batchnorm1d(x, g, b, None, true, 1e-5).unwrap();
        for v in tape.data(y) {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_affine_shift() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[4, 1], vec![-3.0, -1.0, 1.0, 3.0]);
        let g = leaf(&mut tape, &[1], vec![2.0]);
        let b = leaf(&mut tape, &[1], vec![3.0]);
        let (y, _) = tape.batchnorm1d(x, g, b, None, true, 1e-8).unwrap();
        let d = tape.data(y);
        let mean: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!((mean - 3.0).abs() < 1e-6);
        assert!((var.sqrt() - 2.0).abs() < 1e-3);
    }

    #[test]
    fn layernorm_standardizes_rows() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 2.0, 7.0]);
        let g = leaf(&mut tape, &[4], vec![1.0; 4]);
        let b = leaf(&mut tape, &[4], vec![0.0; 4]);
        let y = tape.layernorm(x, g, b, 1e-8).unwrap();
        let d = tape.data(y);
        for r in 0..2 {
            let row = &d[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn reductions_mean_max() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 3], vec![1.0, 2.0, 3.0]);
        let m = tape.mean_axis(x, 1).unwrap();
        assert_eq!(tape.data(m), &[2.0]);
        let x2 = leaf(&mut tape, &[1, 3], vec![1.0, 3.0, 2.0]);
        let mx = tape.max_axis(x2, 1).unwrap();
        assert_eq!(tape.data(mx), &[3.0]);
        let s = tape.sum_all(mx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x2).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn pooled_reduction_permutation_invariant() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 4], vec![0.5, -1.0, 2.0, 0.25]);
        let p = leaf(&mut tape, &[1, 4], vec![2.0, 0.25, 0.5, -1.0]);
        let (mx, mp) = (tape.max_axis(x, 1).unwrap(), tape.max_axis(p, 1).unwrap());
        assert_eq!(tape.data(mx), tape.data(mp));
        let (sx, sp) = (tape.mean_axis(x, 1).unwrap(), tape.mean_axis(p, 1).unwrap());
        assert_eq!(tape.data(sx), tape.data(sp));
    }

    #[test]
    fn upsample_nearest_rules() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 1, 2], vec![3.0, 7.0]);
        let same = tape.upsample_nearest(x, 1).unwrap();
        assert_eq!(tape.data(same), &[3.0, 7.0]);
        let up = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.data(up), &[3.0, 3.0, 7.0, 7.0]);
        // mean over each repeated pair recovers the input
        let r = tape.reshape(up, vec![1, 2, 2]).unwrap();
        let down = tape.mean_axis(r, 2).unwrap();
        assert_eq!(tape.data(down), &[3.0, 7.0]);
    }

    #[test]
    fn permute_round_trip_and_concat() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], (0..6).map(|v| v as f64).collect());
        let p = tape.permute(x, &[1, 0]).unwrap();
        let back = tape.permute(p, &[1, 0]).unwrap();
        assert_eq!(tape.data(back), tape.data(x));
        let a = leaf(&mut tape, &[1], vec![1.0]);
        let b = leaf(&mut tape, &[1], vec![2.0]);
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0]);
    }

    #[test]
    fn broadcast_mul_is_row_scaling() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let gate = leaf(&mut tape, &[2, 1], vec![2.0, 10.0]);
        let y = tape.mul(x, gate).unwrap();
        assert_eq!(tape.data(y), &[2.0, 4.0, 6.0, 40.0, 50.0, 60.0]);
    }

    #[test]
    fn backward_sum_gives_ones_and_square_gives_2x() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, -2.0, 0.5]);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, -2.0, 0.5]);
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum_all(xx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn finite_diff_square_at_three() {
        let g = finite_diff_grad(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[1, 2], vec![0.0, 0.0]);
        let l = tape.cross_entropy_mean(x, &[0]).unwrap();
        assert!((tape.data(l)[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, &[3, 2], vec![0.0; 6]);
        assert!(tape.add(a, b).is_err());
        assert!(tape.matmul(a, a).is_err());
        assert!(tape.reshape(a, vec![4, 2]).is_err());
        assert!(tape.narrow(a, 1, 2, 3).is_err());
    }
}
