//! Global-feature branch: SFA front, stride-2 convolutional stem with
//! sinusoidal positions, three TransBlocks of three pre-norm encoder layers
//! each, mean+std pooling and the embedding FC.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{init_conv1d, init_layernorm, init_linear, Forward, ParamStore};
use crate::sfa::{init_sfa, sfa_forward};
use crate::tdnn::weighted_stats;
use crate::tensor::TensorId;

pub fn init_transformer_branch(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    let (f, d) = (cfg.n_mels, cfg.trans_dim);
    assert!(d % cfg.trans_heads == 0, "model dim must divide by heads");
    init_sfa(store, rng, &format!("{}.sfa", prefix), f, cfg.sfa_expansion);
    init_conv1d(store, rng, &format!("{}.stem.conv", prefix), d, f, 3);
    for b in 1..=cfg.trans_blocks {
        for l in 1..=cfg.layers_per_block {
            let lp = format!("{}.block{}.layer{}", prefix, b, l);
            init_layernorm(store, &format!("{}.ln1", lp), d);
            init_linear(store, rng, &format!("{}.q", lp), d, d);
            init_linear(store, rng, &format!("{}.k", lp), d, d);
            init_linear(store, rng, &format!("{}.v", lp), d, d);
            init_linear(store, rng, &format!("{}.o", lp), d, d);
            init_layernorm(store, &format!("{}.ln2", lp), d);
            init_linear(store, rng, &format!("{}.ffn1", lp), d, cfg.ffn_mult * d);
            init_linear(store, rng, &format!("{}.ffn2", lp), cfg.ffn_mult * d, d);
        }
    }
    init_linear(store, rng, &format!("{}.embed", prefix), 2 * d, cfg.embed_dim);
}

/// Sinusoidal absolute positional encoding, shape [1,T,d].
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Multi-head self-attention over [B,T,d] with no masking. Also returns the
/// attention tensor [B*h,T,T] so tests can check row-stochasticity.
pub fn mhsa(fw: &mut Forward, x: TensorId, prefix: &str, heads: usize) -> Result<(TensorId, TensorId)> {
    let s = fw.tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dim(format!("mhsa expects [B,T,d], got {:?}", s)));
    }
    let (b, t, d) = (s[0], s[1], s[2]);
    if d % heads != 0 {
        return Err(Error::Config(format!("dim {} not divisible by {} heads", d, heads)));
    }
    let dh = d / heads;
    let flat = fw.tape.reshape(x, vec![b * t, d])?;
    let split = |fw: &mut Forward, y: TensorId| -> Result<TensorId> {
        let y = fw.tape.reshape(y, vec![b, t, heads, dh])?;
        let y = fw.tape.permute(y, &[0, 2, 1, 3])?;
        fw.tape.reshape(y, vec![b * heads, t, dh])
    };
    let q = fw.linear(flat, &format!("{}.q", prefix))?;
    let k = fw.linear(flat, &format!("{}.k", prefix))?;
    let v = fw.linear(flat, &format!("{}.v", prefix))?;
    let q = split(fw, q)?;
    let k = split(fw, k)?;
    let v = split(fw, v)?;
    let kt = fw.tape.permute(k, &[0, 2, 1])?;
    let scores = fw.tape.bmm(q, kt)?;
    let scores = fw.tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let attn = fw.tape.softmax(scores, 2)?; // [B*h,T,T]
    let ctx = fw.tape.bmm(attn, v)?; // [B*h,T,dh]
    let ctx = fw.tape.reshape(ctx, vec![b, heads, t, dh])?;
    let ctx = fw.tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = fw.tape.reshape(ctx, vec![b * t, d])?;
    let out = fw.linear(ctx, &format!("{}.o", prefix))?;
    let out = fw.tape.reshape(out, vec![b, t, d])?;
    Ok((out, attn))
}

/// Pre-norm encoder layer: x + MHSA(LN(x)), then + FFN(LN(.)).
pub fn encoder_layer(fw: &mut Forward, x: TensorId, prefix: &str, cfg: &ModelConfig) -> Result<TensorId> {
    let s = fw.tape.shape(x).to_vec();
    let (b, t, d) = (s[0], s[1], s[2]);
    let h = fw.layernorm(x, &format!("{}.ln1", prefix))?;
    let (att, _) = mhsa(fw, h, prefix, cfg.trans_heads)?;
    let att = fw.apply_dropout(att)?;
    let x = fw.tape.add(x, att)?;
    let h = fw.layernorm(x, &format!("{}.ln2", prefix))?;
    let flat = fw.tape.reshape(h, vec![b * t, d])?;
    let f1 = fw.linear(flat, &format!("{}.ffn1", prefix))?;
    let f1 = fw.tape.relu(f1);
    let f2 = fw.linear(f1, &format!("{}.ffn2", prefix))?;
    let f2 = fw.tape.reshape(f2, vec![b, t, d])?;
    let f2 = fw.apply_dropout(f2)?;
    fw.tape.add(x, f2)
}

/// SFA front, strided stem and positional encoding:
/// features [B,F,T] -> X_Tr [B,T',d] with T' = floor((T-1)/2)+1.
pub fn stem(fw: &mut Forward, feat: TensorId, prefix: &str, cfg: &ModelConfig) -> Result<TensorId> {
    let x = sfa_forward(fw, feat, &format!("{}.sfa", prefix), cfg.n_mels, cfg.sfa_expansion)?;
    let x = fw.conv1d(x, &format!("{}.stem.conv", prefix), 2, 1, 1)?; // [B,d,T']
    let x = fw.tape.permute(x, &[0, 2, 1])?; // [B,T',d]
    let s = fw.tape.shape(x).to_vec();
    let pe = positional_encoding(s[1], s[2]);
    let pe = fw.tape.constant(vec![1, s[1], s[2]], pe);
    fw.tape.add(x, pe)
}

/// One TransBlock: `layers_per_block` concatenated encoder layers.
pub fn block(fw: &mut Forward, x: TensorId, prefix: &str, cfg: &ModelConfig, idx: usize) -> Result<TensorId> {
    let mut h = x;
    for l in 1..=cfg.layers_per_block {
        h = encoder_layer(fw, h, &format!("{}.block{}.layer{}", prefix, idx, l), cfg)?;
    }
    Ok(h)
}

/// Mean/std pooling over time plus the embedding FC.
pub fn embed(fw: &mut Forward, x: TensorId, prefix: &str) -> Result<TensorId> {
    let s = fw.tape.shape(x).to_vec();
    let (b, t) = (s[0], s[1]);
    let h = fw.tape.permute(x, &[0, 2, 1])?; // [B,d,T]
    let alpha = fw.tape.constant(vec![1, 1, t], vec![1.0 / t as f64; t]);
    let _ = b;
    let pooled = weighted_stats(fw, h, alpha)?; // [B,2d]
    fw.linear(pooled, &format!("{}.embed", prefix))
}

/// Full branch forward with optional additive bridge inputs before blocks
/// two and three; absent bridges mean standalone mode.
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
        Some(c) => crate::tdnn::add_bridge(fw, x1, c)?,
        None => x1,
    };
    let x2 = block(fw, in2, prefix, cfg, 2)?;
    let in3 = match bridges[1] {
        Some(c) => crate::tdnn::add_bridge(fw, x2, c)?,
        None => x2,
    };
    let x3 = block(fw, in3, prefix, cfg, 3)?;
    let emb = embed(fw, x3, prefix)?;
    Ok(([x1, x2, x3], emb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn mini_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.n_mels = 6;
        cfg.frames = 10;
        cfg.trans_dim = 8;
        cfg.trans_heads = 2;
        cfg.trans_blocks = 3;
        cfg.layers_per_block = 2;
        cfg.ffn_mult = 2;
        cfg.embed_dim = 5;
        cfg.sfa_expansion = 2;
        cfg
    }

    fn mini_store(cfg: &ModelConfig, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_transformer_branch(&mut store, &mut rng, "trans", cfg);
        store
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let cfg = mini_cfg();
        let store = mini_store(&cfg, 1);
        let mut fw = Forward::new(&store, true);
        let t = 6;
        let x = fw.input(&rand_tensor(&[2, t, cfg.trans_dim], 2));
        let (_, attn) = mhsa(&mut fw, x, "trans.block1.layer1", cfg.trans_heads).unwrap();
        let d = fw.tape.data(attn);
        for row in d.chunks(t) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_qk_gives_projected_time_mean() {
        let cfg = mini_cfg();
        let mut store = mini_store(&cfg, 3);
        for n in [
            "trans.block1.layer1.q.weight",
            "trans.block1.layer1.q.bias",
            "trans.block1.layer1.k.weight",
            "trans.block1.layer1.k.bias",
        ] {
            store.get_mut(n).unwrap().tensor.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let t = 5;
        let input = rand_tensor(&[1, t, cfg.trans_dim], 4);
        let mut fw = Forward::new(&store, true);
        let x = fw.input(&input);
        let (out, attn) = mhsa(&mut fw, x, "trans.block1.layer1", cfg.trans_heads).unwrap();
        for v in fw.tape.data(attn) {
            assert!((v - 1.0 / t as f64).abs() <= 1e-12);
        }
        // uniform attention makes every output frame identical
        let d = fw.tape.data(out);
        let first = &d[..cfg.trans_dim];
        for frame in d.chunks(cfg.trans_dim) {
            for (a, b) in first.iter().zip(frame) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mhsa_is_permutation_equivariant() {
        let cfg = mini_cfg();
        let store = mini_store(&cfg, 5);
        let t = 6;
        let d = cfg.trans_dim;
        let input = rand_tensor(&[1, t, d], 6);
        let mut rev = input.clone();
        for i in 0..t {
            rev.data[i * d..(i + 1) * d]
                .copy_from_slice(&input.data[(t - 1 - i) * d..(t - i) * d]);
        }
        let mut fw1 = Forward::new(&store, true);
        let x1 = fw1.input(&input);
        let (y1, _) = mhsa(&mut fw1, x1, "trans.block1.layer1", cfg.trans_heads).unwrap();
        let mut fw2 = Forward::new(&store, true);
        let x2 = fw2.input(&rev);
        let (y2, _) = mhsa(&mut fw2, x2, "trans.block1.layer1", cfg.trans_heads).unwrap();
        let d1 = fw1.tape.data(y1);
        let d2 = fw2.tape.data(y2);
        for i in 0..t {
            for j in 0..d {
                assert!((d1[i * d + j] - d2[(t - 1 - i) * d + j]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_sublayers_make_encoder_identity() {
        let cfg = mini_cfg();
        let mut store = mini_store(&cfg, 7);
        for n in ["o.weight", "o.bias", "ffn2.weight", "ffn2.bias"] {
            store
                .get_mut(&format!("trans.block1.layer1.{}", n))
                .unwrap()
                .tensor
                .data
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
        let input = rand_tensor(&[2, 4, cfg.trans_dim], 8);
        let mut fw = Forward::new(&store, true);
        let x = fw.input(&input);
        let y = encoder_layer(&mut fw, x, "trans.block1.layer1", &cfg).unwrap();
        for (a, b) in input.data.iter().zip(fw.tape.data(y)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn stride_two_stem_halves_length() {
        let mut cfg = mini_cfg();
        cfg.frames = 298;
        let store = mini_store(&cfg, 9);
        let mut fw = Forward::new(&store, true);
        let x = fw.input(&rand_tensor(&[1, cfg.n_mels, 298], 10));
        let y = stem(&mut fw, x, "trans", &cfg).unwrap();
        assert_eq!(fw.tape.shape(y), &[1, 149, cfg.trans_dim]);
    }

    #[test]
    fn zero_bridges_equal_standalone() {
        let cfg = mini_cfg();
        let store = mini_store(&cfg, 11);
        let input = rand_tensor(&[2, cfg.n_mels, cfg.frames], 12);
        let mut fw1 = Forward::new(&store, true);
        let x1 = fw1.input(&input);
        let (_, e1) = forward(&mut fw1, x1, "trans", &cfg, [None, None]).unwrap();
        let t2 = cfg.frames / 2;
        let mut fw2 = Forward::new(&store, true);
        let x2 = fw2.input(&input);
        let zeros = fw2.tape.constant(vec![2, t2, cfg.trans_dim], vec![0.0; 2 * t2 * cfg.trans_dim]);
        let (_, e2) = forward(&mut fw2, x2, "trans", &cfg, [Some(zeros), Some(zeros)]).unwrap();
        for (a, b) in fw1.tape.data(e1).iter().zip(fw2.tape.data(e2)) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn embedding_shape_fixed_across_lengths() {
        let cfg = mini_cfg();
        let store = mini_store(&cfg, 13);
        for t in [6usize, 10, 20] {
            let mut fw = Forward::new(&store, true);
            let x = fw.input(&rand_tensor(&[1, cfg.n_mels, t], t as u64));
            let (_, e) = forward(&mut fw, x, "trans", &cfg, [None, None]).unwrap();
            assert_eq!(fw.tape.shape(e), &[1, cfg.embed_dim]);
        }
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let cfg = mini_cfg();
        let mut store = mini_store(&cfg, 15);
        let input = rand_tensor(&[1, 4, cfg.trans_dim], 16);
        let name = "trans.block1.layer1.v.weight";
        let run = |store: &ParamStore| -> (f64, Vec<f64>) {
            let mut fw = Forward::new(store, true);
            let x = fw.input(&input);
            let y = encoder_layer(&mut fw, x, "trans.block1.layer1", &cfg).unwrap();
            let loss = fw.tape.sum_all(y);
            let v = fw.tape.data(loss)[0];
            fw.tape.backward(loss).unwrap();
            (v, fw.grads().get(name).cloned().unwrap_or_default())
        };
        let (_, analytic) = run(&store);
        let w0 = store.get(name).unwrap().tensor.data.clone();
        for idx in [0usize, 13, w0.len() - 1] {
            let h = 1e-5;
            store.get_mut(name).unwrap().tensor.data[idx] = w0[idx] + h;
            let (vp, _) = run(&store);
            store.get_mut(name).unwrap().tensor.data[idx] = w0[idx] - h;
            let (vm, _) = run(&store);
            store.get_mut(name).unwrap().tensor.data[idx] = w0[idx];
            let numeric = (vp - vm) / (2.0 * h);
            assert!(crate::tensor::rel_err(analytic[idx], numeric) <= 1e-5);
        }
    }
}
