//! Local-feature branch: SFA front, frame-level stem conv, three
//! SE-Res2Blocks with dilations 2/3/4, multi-layer aggregation, attentive
//! statistics pooling and the embedding FC.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{init_batchnorm, init_conv1d, init_linear, Forward, ParamStore};
use crate::sfa::{init_sfa, sfa_forward};
use crate::tensor::TensorId;

pub const DILATIONS: [usize; 3] = [2, 3, 4];
pub const ASP_EPS: f64 = 1e-9;

pub fn init_tdnn_branch(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    let (f, c) = (cfg.n_mels, cfg.tdnn_channels);
    assert!(c % cfg.res2_scale == 0, "channels must divide by res2 scale");
    init_sfa(store, rng, &format!("{}.sfa", prefix), f, cfg.sfa_expansion);
    init_conv1d(store, rng, &format!("{}.stem.conv", prefix), c, f, 5);
    init_batchnorm(store, &format!("{}.stem.bn", prefix), c);
    for b in 1..=3 {
        let bp = format!("{}.block{}", prefix, b);
        init_conv1d(store, rng, &format!("{}.conv1", bp), c, c, 1);
        init_batchnorm(store, &format!("{}.bn1", bp), c);
        let g = c / cfg.res2_scale;
        for i in 2..=cfg.res2_scale {
            init_conv1d(store, rng, &format!("{}.res2.conv{}", bp, i), g, g, 3);
            init_batchnorm(store, &format!("{}.res2.bn{}", bp, i), g);
        }
        init_conv1d(store, rng, &format!("{}.conv2", bp), c, c, 1);
        init_batchnorm(store, &format!("{}.bn2", bp), c);
        init_linear(store, rng, &format!("{}.se.fc1", bp), c, cfg.se_bottleneck);
        init_linear(store, rng, &format!("{}.se.fc2", bp), cfg.se_bottleneck, c);
    }
    init_conv1d(store, rng, &format!("{}.agg", prefix), cfg.agg_channels, 3 * c, 1);
    init_conv1d(store, rng, &format!("{}.asp.att1", prefix), cfg.attn_bottleneck, cfg.agg_channels, 1);
    init_conv1d(store, rng, &format!("{}.asp.att2", prefix), 1, cfg.attn_bottleneck, 1);
    init_linear(store, rng, &format!("{}.embed", prefix), 2 * cfg.agg_channels, cfg.embed_dim);
}

/// SFA front plus stem conv: features [B,F,T] -> X_Td [B,C,T].
pub fn stem(fw: &mut Forward, feat: TensorId, prefix: &str, cfg: &ModelConfig) -> Result<TensorId> {
    let x = sfa_forward(fw, feat, &format!("{}.sfa", prefix), cfg.n_mels, cfg.sfa_expansion)?;
    let x = fw.conv1d(x, &format!("{}.stem.conv", prefix), 1, 1, 2)?;
    let x = fw.tape.relu(x);
    fw.batchnorm(x, &format!("{}.stem.bn", prefix))
}

/// One SE-Res2Block: 1x1 conv, hierarchical dilated group convs, 1x1 conv,
/// squeeze-excitation gate, residual add.
pub fn se_res2block(
    fw: &mut Forward,
    x: TensorId,
    prefix: &str,
    cfg: &ModelConfig,
    dilation: usize,
) -> Result<TensorId> {
    let c = cfg.tdnn_channels;
    let s = cfg.res2_scale;
    if c % s != 0 {
        return Err(Error::Config(format!("channels {} not divisible by scale {}", c, s)));
    }
    let shape = fw.tape.shape(x).to_vec();
    let (b, t) = (shape[0], shape[2]);
    let g = c / s;

    let h = fw.conv1d(x, &format!("{}.conv1", prefix), 1, 1, 0)?;
    let h = fw.tape.relu(h);
    let h = fw.batchnorm(h, &format!("{}.bn1", prefix))?;

    // hierarchical residual groups: first passes through, each later group
    // is conv(group_i + previous output)
    let mut outs: Vec<TensorId> = Vec::with_capacity(s);
    for i in 0..s {
        let gi = fw.tape.narrow(h, 1, i * g, g)?;
        if i == 0 {
            outs.push(gi);
        } else {
            let sum = fw.tape.add(gi, outs[i - 1])?;
            let y = fw.conv1d(sum, &format!("{}.res2.conv{}", prefix, i + 1), 1, dilation, dilation)?;
            let y = fw.tape.relu(y);
            let y = fw.batchnorm(y, &format!("{}.res2.bn{}", prefix, i + 1))?;
            outs.push(y);
        }
    }
    let merged = fw.tape.concat(&outs, 1)?;

    let h = fw.conv1d(merged, &format!("{}.conv2", prefix), 1, 1, 0)?;
    let h = fw.tape.relu(h);
    let h = fw.batchnorm(h, &format!("{}.bn2", prefix))?;

    // squeeze-excitation over time
    let z = fw.tape.mean_axis(h, 2)?; // [B,C]
    let z = fw.linear(z, &format!("{}.se.fc1", prefix))?;
    let z = fw.tape.relu(z);
    let z = fw.linear(z, &format!("{}.se.fc2", prefix))?;
    let gate = fw.tape.sigmoid(z);
    let gate = fw.tape.reshape(gate, vec![b, c, 1])?;
    let _ = t;
    let scaled = fw.tape.mul(h, gate)?;

    fw.tape.add(scaled, x)
}

pub fn block(fw: &mut Forward, x: TensorId, prefix: &str, cfg: &ModelConfig, idx: usize) -> Result<TensorId> {
    se_res2block(fw, x, &format!("{}.block{}", prefix, idx), cfg, DILATIONS[idx - 1])
}

/// Attentive statistics pooling: scalar attention per frame from a tanh MLP,
/// softmax over time, weighted mean and weighted std (eps under the root).
pub fn asp(fw: &mut Forward, h: TensorId, prefix: &str) -> Result<TensorId> {
    let shape = fw.tape.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dim(format!("asp expects [B,C,T], got {:?}", shape)));
    }
    let scores = fw.conv1d(h, &format!("{}.att1", prefix), 1, 1, 0)?;
    let scores = fw.tape.tanh(scores);
    let scores = fw.conv1d(scores, &format!("{}.att2", prefix), 1, 1, 0)?; // [B,1,T]
    let alpha = fw.tape.softmax(scores, 2)?;
    weighted_stats(fw, h, alpha)
}

/// concat(weighted mean, weighted std) over the last axis given normalized
/// weights alpha of shape [B,1,T].
pub fn weighted_stats(fw: &mut Forward, h: TensorId, alpha: TensorId) -> Result<TensorId> {
    let wh = fw.tape.mul(h, alpha)?;
    let mean = fw.tape.sum_axis(wh, 2)?; // [B,C]
    let h2 = fw.tape.mul(h, h)?;
    let wh2 = fw.tape.mul(h2, alpha)?;
    let m2 = fw.tape.sum_axis(wh2, 2)?;
    let mean_sq = fw.tape.mul(mean, mean)?;
    let var = fw.tape.sub(m2, mean_sq)?;
    let var = fw.tape.add_scalar(var, ASP_EPS);
    let std = fw.tape.sqrt(var);
    fw.tape.concat(&[mean, std], 1)
}

/// Aggregate the three taps into the branch embedding.
pub fn embed(fw: &mut Forward, taps: &[TensorId; 3], prefix: &str, _cfg: &ModelConfig) -> Result<TensorId> {
    let cat = fw.tape.concat(taps.as_slice(), 1)?; // [B,3C,T]
    let agg = fw.conv1d(cat, &format!("{}.agg", prefix), 1, 1, 0)?;
    let agg = fw.tape.relu(agg);
    let pooled = asp(fw, agg, &format!("{}.asp", prefix))?; // [B,2*agg]
    fw.linear(pooled, &format!("{}.embed", prefix))
}

/// Full branch forward. Bridge inputs, when absent, are treated as zero
/// (standalone mode). Returns the three taps and the embedding.
pub fn forward(
    fw: &mut Forward,
    feat: TensorId,
    prefix: &str,
    cfg: &ModelConfig,
    bridges: [Option<TensorId>; 2],
) -> Result<([TensorId; 3], TensorId)> {
    let x = stem(fw, feat, prefix, cfg)?;
    let x1 = block(fw, x, prefix, cfg, 1)?;
    let in2 = match bridges[0] {
        Some(c) => add_bridge(fw, x1, c)?,
        None => x1,
    };
    let x2 = block(fw, in2, prefix, cfg, 2)?;
    let in3 = match bridges[1] {
        Some(c) => add_bridge(fw, x2, c)?,
        None => x2,
    };
    let x3 = block(fw, in3, prefix, cfg, 3)?;
    let emb = embed(fw, &[x1, x2, x3], prefix, cfg)?;
    Ok(([x1, x2, x3], emb))
}

pub fn add_bridge(fw: &mut Forward, tap: TensorId, complement: TensorId) -> Result<TensorId> {
    let st = fw.tape.shape(tap);
    let sc = fw.tape.shape(complement);
    if st != sc {
        return Err(Error::Dim(format!(
            "bridge shape {:?} does not match tap shape {:?}",
            sc, st
        )));
    }
    fw.tape.add(tap, complement)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mini_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.n_mels = 6;
        cfg.frames = 10;
        cfg.tdnn_channels = 8;
        cfg.res2_scale = 2;
        cfg.se_bottleneck = 4;
        cfg.agg_channels = 12;
        cfg.attn_bottleneck = 4;
        cfg.embed_dim = 5;
        cfg.sfa_expansion = 2;
        cfg
    }

    fn mini_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_tdnn_branch(&mut store, &mut rng, "tdnn", cfg);
        store
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn all_zero_block_is_pure_residual() {
        let cfg = mini_cfg();
        let mut store = mini_store(&cfg, 1);
        for name in store.names() {
            if name.contains("block1") && (name.ends_with(".weight") || name.ends_with(".bias")) {
                if !name.contains(".bn") {
                    store.get_mut(&name).unwrap().tensor.data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let mut fw = Forward::new(&store, true);
        let x = fw.input(&rand_tensor(&[2, cfg.tdnn_channels, 7], 2));
        let y = block(&mut fw, x, "tdnn", &cfg, 1).unwrap();
        for (a, b) in fw.tape.data(x).iter().zip(fw.tape.data(y)) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn zero_se_fc2_means_half_gate() {
        let cfg = mini_cfg();
        let mut store = mini_store(&cfg, 3);
        store.get_mut("tdnn.block1.se.fc2.weight").unwrap().tensor.data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("tdnn.block1.se.fc2.bias").unwrap().tensor.data.iter_mut().for_each(|v| *v = 0.0);
        // with fc2 zeroed the gate is sigmoid(0)=0.5 regardless of the
        // squeeze input, so rescaling fc1 must not change the block output
        let d1 = {
            let mut fw = Forward::new(&store, true);
            let x = fw.input(&rand_tensor(&[1, cfg.tdnn_channels, 6], 4));
            let y1 = block(&mut fw, x, "tdnn", &cfg, 1).unwrap();
            fw.tape.data(y1).to_vec()
        };
        store.get_mut("tdnn.block1.se.fc1.weight").unwrap().tensor.data.iter_mut().for_each(|v| *v *= -3.0);
        let mut fw2 = Forward::new(&store, true);
        let x2 = fw2.input(&rand_tensor(&[1, cfg.tdnn_channels, 6], 4));
        let y2 = block(&mut fw2, x2, "tdnn", &cfg, 1).unwrap();
        for (a, b) in d1.iter().zip(fw2.tape.data(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn asp_single_frame_mean_is_the_frame() {
        let cfg = mini_cfg();
        let store = mini_store(&cfg, 5);
        let mut fw = Forward::new(&store, true);
        let input = rand_tensor(&[1, cfg.agg_channels, 1], 6);
        let h = fw.input(&input);
        let pooled = asp(&mut fw, h, "tdnn.asp").unwrap();
        let d = fw.tape.data(pooled);
        for c in 0..cfg.agg_channels {
            assert!((d[c] - input.data[c]).abs() < 1e-12);
            // std collapses to the epsilon floor
            assert!(d[cfg.agg_channels + c] <= (ASP_EPS.sqrt() + 1e-12));
        }
    }

    #[test]
    fn zero_attention_mlp_is_plain_mean_std() {
        let cfg = mini_cfg();
        let mut store = mini_store(&cfg, 7);
        for n in ["tdnn.asp.att2.weight", "tdnn.asp.att2.bias"] {
            store.get_mut(n).unwrap().tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let t = 5;
        let input = rand_tensor(&[1, cfg.agg_channels, t], 8);
        let mut fw = Forward::new(&store, true);
        let h = fw.input(&input);
        let pooled = asp(&mut fw, h, "tdnn.asp").unwrap();
        let d = fw.tape.data(pooled);
        for c in 0..cfg.agg_channels {
            let row = &input.data[c * t..(c + 1) * t];
            let mean: f64 = row.iter().sum::<f64>() / t as f64;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / t as f64 - mean * mean;
            assert!((d[c] - mean).abs() < 1e-12);
            assert!((d[cfg.agg_channels + c] - (var + ASP_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_in_time_input_has_zero_std() {
        let cfg = mini_cfg();
        let store = mini_store(&cfg, 9);
        let t = 4;
        let mut data = Vec::new();
        for c in 0..cfg.agg_channels {
            data.extend(std::iter::repeat(c as f64 * 0.1 - 0.5).take(t));
        }
        let mut fw = Forward::new(&store, true);
        let h = fw.input(&Tensor::new(vec![1, cfg.agg_channels, t], data.clone()).unwrap());
        let pooled = asp(&mut fw, h, "tdnn.asp").unwrap();
        let d = fw.tape.data(pooled);
        for c in 0..cfg.agg_channels {
            assert!((d[c] - data[c * t]).abs() < 1e-12);
            assert!(d[cfg.agg_channels + c] < 1e-4);
        }
    }

    #[test]
    fn zero_bridges_equal_standalone() {
        let cfg = mini_cfg();
        let store = mini_store(&cfg, 11);
        let input = rand_tensor(&[2, cfg.n_mels, cfg.frames], 12);
        let mut fw1 = Forward::new(&store, true);
        let x1 = fw1.input(&input);
        let (_, e1) = forward(&mut fw1, x1, "tdnn", &cfg, [None, None]).unwrap();
        let mut fw2 = Forward::new(&store, true);
        let x2 = fw2.input(&input);
        let zeros = fw2.tape.constant(vec![2, cfg.tdnn_channels, cfg.frames], vec![0.0; 2 * cfg.tdnn_channels * cfg.frames]);
        let (_, e2) = forward(&mut fw2, x2, "tdnn", &cfg, [Some(zeros), Some(zeros)]).unwrap();
        for (a, b) in fw1.tape.data(e1).iter().zip(fw2.tape.data(e2)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn embedding_shape_for_any_length() {
        let cfg = mini_cfg();
        let store = mini_store(&cfg, 13);
        for t in [4usize, 10, 17] {
            let mut fw = Forward::new(&store, true);
            let x = fw.input(&rand_tensor(&[2, cfg.n_mels, t], t as u64));
            let (_, e) = forward(&mut fw, x, "tdnn", &cfg, [None, None]).unwrap();
            assert_eq!(fw.tape.shape(e), &[2, cfg.embed_dim]);
        }
    }

    #[test]
    fn stem_gradient_matches_finite_differences() {
        let cfg = mini_cfg();
        let mut store = mini_store(&cfg, 15);
        let input = rand_tensor(&[1, cfg.n_mels, 6], 16);
        let run = |store: &ParamStore| -> (f64, Vec<f64>) {
            let mut fw = Forward::new(store, true);
            let x = fw.input(&input);
            let (_, e) = forward(&mut fw, x, "tdnn", &cfg, [None, None]).unwrap();
            let loss = fw.tape.sum_all(e);
            let v = fw.tape.data(loss)[0];
            fw.tape.backward(loss).unwrap();
            (v, fw.grads().get("tdnn.stem.conv.weight").cloned().unwrap_or_default())
        };
        let (_, analytic) = run(&store);
        let w0 = store.get("tdnn.stem.conv.weight").unwrap().tensor.data.clone();
        for idx in [0usize, 17, w0.len() - 1] {
            let h = 1e-5;
            store.get_mut("tdnn.stem.conv.weight").unwrap().tensor.data[idx] = w0[idx] + h;
            let (vp, _) = run(&store);
            store.get_mut("tdnn.stem.conv.weight").unwrap().tensor.data[idx] = w0[idx] - h;
            let (vm, _) = run(&store);
            store.get_mut("tdnn.stem.conv.weight").unwrap().tensor.data[idx] = w0[idx];
            let numeric = (vp - vm) / (2.0 * h);
            assert!(
                crate::tensor::rel_err(analytic[idx], numeric) <= 1e-3,
                "{} vs {}",
                analytic[idx],
                numeric
            );
        }
    }
}
