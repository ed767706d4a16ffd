//! Central finite-difference gradient checks: a per-operation suite and a
//! composed whole-model check over sampled parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::params::Forward;
use crate::tensor::{finite_diff_grad, rel_err, Tape, Tensor, TensorId};

pub const PER_OP_H: f64 = 1e-5;
pub const PER_OP_TOL: f64 = 1e-6;
pub const COMPOSED_H: f64 = 1e-6;
pub const COMPOSED_TOL: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub max_rel: f64,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel <= self.tol
    }
}

/// Check one differentiable function against central differences. Inputs are
/// sampled via `sample`; non-scalar outputs are contracted with a fixed
/// random weight tensor so asymmetric errors cannot cancel.
pub fn check_fn<F, S>(
    name: &str,
    shapes: &[&[usize]],
    seed: u64,
    h: f64,
    tol: f64,
    sample: S,
    f: F,
) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
    S: Fn(&mut ChaCha8Rng, usize) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat = Vec::new();
    for (k, s) in shapes.iter().enumerate() {
        let n: usize = s.iter().product();
        for _ in 0..n {
            flat.push(sample(&mut rng, k));
        }
    }
    // weights for contracting a non-scalar output to a scalar
    let mut wrng = ChaCha8Rng::seed_from_u64(seed ^ 0x317);
    let mut weight_cache: Option<Vec<f64>> = None;

    let mut eval = |x: &[f64]| -> Result<(f64, Option<Vec<Vec<f64>>>, bool)> {
        let mut tape = Tape::new();
        let mut ids = Vec::with_capacity(shapes.len());
        let mut off = 0;
        for s in shapes {
            let n: usize = s.iter().product();
            let mut t = Tensor::new(s.to_vec(), x[off..off + n].to_vec())?;
            t.requires_grad = true;
            ids.push(tape.leaf(&t));
            off += n;
        }
        let out = f(&mut tape, &ids)?;
        let out_n = tape.data(out).len();
        let scalar = if out_n == 1 {
            out
        } else {
            let w = weight_cache
                .get_or_insert_with(|| (0..out_n).map(|_| wrng.gen_range(-1.0..1.0)).collect())
                .clone();
            let wc = tape.constant(tape.shape(out).to_vec(), w);
            let prod = tape.mul(out, wc)?;
            tape.sum_all(prod)
        };
        let value = tape.data(scalar)[0];
        tape.backward(scalar)?;
        let grads: Vec<Vec<f64>> =
            ids.iter().map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default()).collect();
        Ok((value, Some(grads), true))
    };

    let (_, analytic, _) = eval(&flat)?;
    let analytic: Vec<f64> = analytic.unwrap().into_iter().flatten().collect();
    if analytic.len() != flat.len() {
        return Err(Error::Numeric(format!("gradcheck '{}': missing input gradients", name)));
    }
    let numeric = finite_diff_grad(
        |x| {
            let (v, _, _) = eval(x).expect("gradcheck forward failed");
            v
        },
        &flat,
        h,
    );
    let max_rel = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0f64, f64::max);
    Ok(GradReport { name: name.into(), max_rel, tol })
}

fn std_sample(rng: &mut ChaCha8Rng, _k: usize) -> f64 {
    rng.gen_range(-1.0..1.0)
}

/// Shift values away from zero so relu's kink is never straddled by the
/// finite-difference stencil.
fn kink_safe(rng: &mut ChaCha8Rng, _k: usize) -> f64 {
    let v: f64 = rng.gen_range(0.1..1.0);
    if rng.gen::<bool>() {
        v
    } else {
        -v
    }
}

fn positive(rng: &mut ChaCha8Rng, _k: usize) -> f64 {
    rng.gen_range(0.5..2.0)
}

/// Per-operation gradient suite.
pub fn per_op_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut reports = Vec::new();
    let h = PER_OP_H;
    let tol = PER_OP_TOL;

    reports.push(check_fn("add", &[&[2, 3], &[2, 3]], seed, h, tol, std_sample, |t, x| {
        t.add(x[0], x[1])
    })?);
    reports.push(check_fn("add_broadcast", &[&[2, 3], &[1, 3]], seed, h, tol, std_sample, |t, x| {
        t.add(x[0], x[1])
    })?);
    reports.push(check_fn("sub", &[&[2, 3], &[2, 3]], seed, h, tol, std_sample, |t, x| {
        t.sub(x[0], x[1])
    })?);
    reports.push(check_fn("mul", &[&[2, 3], &[2, 3]], seed, h, tol, std_sample, |t, x| {
        t.mul(x[0], x[1])
    })?);
    reports.push(check_fn("mul_broadcast", &[&[2, 3, 4], &[2, 1, 4]], seed, h, tol, std_sample, |t, x| {
        t.mul(x[0], x[1])
    })?);
    reports.push(check_fn("div", &[&[2, 3], &[2, 3]], seed, h, tol, positive, |t, x| {
        t.div(x[0], x[1])
    })?);
    reports.push(check_fn("neg_scale", &[&[2, 3]], seed, h, tol, std_sample, |t, x| {
        let n = t.neg(x[0]);
        Ok(t.scale(n, 1.7))
    })?);
    reports.push(check_fn("relu", &[&[3, 4]], seed, h, tol, kink_safe, |t, x| Ok(t.relu(x[0])))?);
    reports.push(check_fn("sigmoid", &[&[3, 4]], seed, h, tol, std_sample, |t, x| {
        Ok(t.sigmoid(x[0]))
    })?);
    reports.push(check_fn("tanh", &[&[3, 4]], seed, h, tol, std_sample, |t, x| Ok(t.tanh(x[0])))?);
    reports.push(check_fn("sqrt", &[&[3, 4]], seed, h, tol, positive, |t, x| Ok(t.sqrt(x[0])))?);
    reports.push(check_fn("matmul", &[&[3, 4], &[4, 2]], seed, h, tol, std_sample, |t, x| {
        t.matmul(x[0], x[1])
    })?);
    reports.push(check_fn("bmm", &[&[2, 3, 4], &[2, 4, 2]], seed, h, tol, std_sample, |t, x| {
        t.bmm(x[0], x[1])
    })?);
    reports.push(check_fn("sum_axis", &[&[2, 3, 4]], seed, h, tol, std_sample, |t, x| {
        t.sum_axis(x[0], 1)
    })?);
    reports.push(check_fn("mean_axis", &[&[2, 3, 4]], seed, h, tol, std_sample, |t, x| {
        t.mean_axis(x[0], 2)
    })?);
    reports.push(check_fn("max_axis", &[&[2, 3, 5]], seed, h, tol, kink_safe, |t, x| {
        t.max_axis(x[0], 2)
    })?);
    reports.push(check_fn("softmax", &[&[2, 5]], seed, h, tol, std_sample, |t, x| {
        t.softmax(x[0], 1)
    })?);
    reports.push(check_fn("cross_entropy", &[&[3, 5]], seed, h, tol, std_sample, |t, x| {
        t.cross_entropy_mean(x[0], &[0, 2, 4])
    })?);
    reports.push(check_fn("reshape_permute", &[&[2, 3, 4]], seed, h, tol, std_sample, |t, x| {
        let p = t.permute(x[0], &[2, 0, 1])?;
        t.reshape(p, vec![4, 6])
    })?);
    reports.push(check_fn("narrow_concat", &[&[2, 5], &[2, 3]], seed, h, tol, std_sample, |t, x| {
        let n = t.narrow(x[0], 1, 1, 3)?;
        t.concat(&[n, x[1]], 1)
    })?);
    reports.push(check_fn("upsample", &[&[2, 3, 4]], seed, h, tol, std_sample, |t, x| {
        t.upsample_nearest(x[0], 2)
    })?);
    reports.push(check_fn(
        "conv1d",
        &[&[2, 3, 8], &[4, 3, 3], &[4]],
        seed,
        h,
        tol,
        std_sample,
        |t, x| t.conv1d(x[0], x[1], x[2], 1, 2, 2),
    )?);
    reports.push(check_fn(
        "conv1d_stride",
        &[&[2, 3, 8], &[4, 3, 3], &[4]],
        seed,
        h,
        tol,
        std_sample,
        |t, x| t.conv1d(x[0], x[1], x[2], 2, 1, 1),
    )?);
    reports.push(check_fn(
        "conv2d",
        &[&[2, 2, 4, 5], &[3, 2, 3, 3], &[3]],
        seed,
        h,
        tol,
        std_sample,
        |t, x| t.conv2d(x[0], x[1], x[2], 1),
    )?);
    reports.push(check_fn(
        "batchnorm_train",
        &[&[4, 3, 5], &[3], &[3]],
        seed,
        h,
        tol,
        std_sample,
        |t, x| Ok(t.batchnorm1d(x[0], x[1], x[2], None, true, crate::params::BN_EPS)?.0),
    )?);
    reports.push(check_fn(
        "layernorm",
        &[&[2, 3, 6], &[6], &[6]],
        seed,
        h,
        tol,
        std_sample,
        |t, x| t.layernorm(x[0], x[1], x[2], crate::params::LN_EPS),
    )?);
    Ok(reports)
}

/// Composed whole-model check: analytic gradients from one backward pass
/// against central differences on `n_samples` randomly chosen parameter
/// entries. Returns the worst relative error and the sample count.
pub fn composed_check(cfg: &ModelConfig, seed: u64, n_samples: usize) -> Result<GradReport> {
    cfg.validate()?;
    let mut store = model::init_pvectors(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0);
    let b = 2;
    let input = Tensor::new(
        vec![b, cfg.n_mels, cfg.frames],
        (0..b * cfg.n_mels * cfg.frames).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let out_w: Vec<f64> = (0..b * cfg.embed_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let loss_of = |store: &crate::params::ParamStore| -> Result<(f64, Option<std::collections::BTreeMap<String, Vec<f64>>>)> {
        let mut fw = Forward::new(store, true);
        let x = fw.input(&input);
        let emb = model::pvectors_forward(&mut fw, x, cfg)?;
        let wc = fw.tape.constant(vec![b, cfg.embed_dim], out_w.clone());
        let prod = fw.tape.mul(emb, wc)?;
        let loss = fw.tape.sum_all(prod);
        let v = fw.tape.data(loss)[0];
        fw.tape.backward(loss)?;
        Ok((v, Some(fw.grads())))
    };

    let (_, grads) = loss_of(&store)?;
    let grads = grads.unwrap();

    // sample parameter entries uniformly over trainable names
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, _)| n.clone())
        .collect();
    let mut srng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a);
    let mut max_rel = 0.0f64;
    for _ in 0..n_samples {
        let name = &names[srng.gen_range(0..names.len())];
        let len = store.get(name)?.tensor.data.len();
        let idx = srng.gen_range(0..len);
        let analytic = grads.get(name).map(|g| g[idx]).unwrap_or(0.0);
        let orig = store.get(name)?.tensor.data[idx];
        store.get_mut(name)?.tensor.data[idx] = orig + COMPOSED_H;
        let (vp, _) = loss_of(&store)?;
        store.get_mut(name)?.tensor.data[idx] = orig - COMPOSED_H;
        let (vm, _) = loss_of(&store)?;
        store.get_mut(name)?.tensor.data[idx] = orig;
        let numeric = (vp - vm) / (2.0 * COMPOSED_H);
        max_rel = max_rel.max(rel_err(analytic, numeric));
    }
    Ok(GradReport { name: "composed_pvectors".into(), max_rel, tol: COMPOSED_TOL })
}
