//! Spatial frequency-channel attention.
//!
//! Expand channels with a 1x1 Conv1d, pool over time (average and max) into
//! two (expansion x mel) maps, stack them as a 2-channel image, run a 3x3
//! Conv2d to a single-channel attention map, squash with sigmoid, re-scale
//! the expanded feature, and reduce channels back with a 1x1 Conv1d.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{init_conv1d, init_conv2d, Forward, ParamStore};
use crate::tensor::TensorId;

pub fn init_sfa(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, f: usize, k: usize) {
    init_conv1d(store, rng, &format!("{}.expand", prefix), k * f, f, 1);
    init_conv2d(store, rng, &format!("{}.map", prefix), 1, 2, 3, 3);
    init_conv1d(store, rng, &format!("{}.reduce", prefix), f, k * f, 1);
}

/// Forward pass returning both the output and the sigmoid attention map
/// (shape [B,1,k,F]); the map is exposed for invariant checks.
pub fn sfa_forward_with_attention(
    fw: &mut Forward,
    x: TensorId,
    prefix: &str,
    f: usize,
    k: usize,
) -> Result<(TensorId, TensorId)> {
    let sx = fw.tape.shape(x).to_vec();
    if sx.len() != 3 || sx[1] != f {
        return Err(Error::Dim(format!(
            "sfa expects [B,{},T] input, got {:?}",
            f, sx
        )));
    }
    let b = sx[0];
    let expanded = fw.conv1d(x, &format!("{}.expand", prefix), 1, 1, 0)?; // [B,kF,T]
    let gap = fw.tape.mean_axis(expanded, 2)?; // [B,kF]
    let gmp = fw.tape.max_axis(expanded, 2)?; // [B,kF]
    let gap_m = fw.tape.reshape(gap, vec![b, 1, k, f])?;
    let gmp_m = fw.tape.reshape(gmp, vec![b, 1, k, f])?;
    let stacked = fw.tape.concat(&[gap_m, gmp_m], 1)?; // [B,2,k,F]
    let map = fw.conv2d(stacked, &format!("{}.map", prefix), 1)?; // [B,1,k,F]
    let attn = fw.tape.sigmoid(map);
    let gate = fw.tape.reshape(attn, vec![b, k * f, 1])?;
    let scaled = fw.tape.mul(expanded, gate)?;
    let out = fw.conv1d(scaled, &format!("{}.reduce", prefix), 1, 1, 0)?; // [B,F,T]
    Ok((out, attn))
}

pub fn sfa_forward(fw: &mut Forward, x: TensorId, prefix: &str, f: usize, k: usize) -> Result<TensorId> {
    Ok(sfa_forward_with_attention(fw, x, prefix, f, k)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};

    fn setup(f: usize, k: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_sfa(&mut store, &mut rng, "sfa", f, k);
        store
    }

    fn random_input(b: usize, f: usize, t: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![b, f, t], (0..b * f * t).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn zero_map_conv_gives_half_gates() {
        let (f, k) = (6, 2);
        let mut store = setup(f, k, 1);
        store.get_mut("sfa.map.weight").unwrap().tensor.data.iter_mut().for_each(|v| *v = 0.0);
        store.get_mut("sfa.map.bias").unwrap().tensor.data.iter_mut().for_each(|v| *v = 0.0);
        let mut fw = Forward::new(&store, true);
        let x = fw.input(&random_input(2, f, 5, 2));
        let (_, attn) = sfa_forward_with_attention(&mut fw, x, "sfa", f, k).unwrap();
        for v in fw.tape.data(attn) {
            assert_eq!(*v, 0.5);
        }
    }

    #[test]
    fn output_shape_matches_input_across_lengths() {
        let (f, k) = (6, 2);
        let store = setup(f, k, 3);
        for t in [1usize, 7, 298] {
            let mut fw = Forward::new(&store, true);
            let x = fw.input(&random_input(2, f, t, t as u64));
            let y = sfa_forward(&mut fw, x, "sfa", f, k).unwrap();
            assert_eq!(fw.tape.shape(y), &[2, f, t]);
        }
    }

    #[test]
    fn time_permutation_permutes_output_and_fixes_attention() {
        let (f, k, t) = (5, 3, 8);
        let store = setup(f, k, 4);
        let x = random_input(1, f, t, 9);
        // reversed frames
        let mut rev = x.clone();
        for c in 0..f {
            for i in 0..t {
                rev.data[c * t + i] = x.data[c * t + (t - 1 - i)];
            }
        }
        let mut fw1 = Forward::new(&store, true);
        let x1 = fw1.input(&x);
        let (y1, a1) = sfa_forward_with_attention(&mut fw1, x1, "sfa", f, k).unwrap();
        let mut fw2 = Forward::new(&store, true);
        let x2 = fw2.input(&rev);
        let (y2, a2) = sfa_forward_with_attention(&mut fw2, x2, "sfa", f, k).unwrap();
        for (a, b) in fw1.tape.data(a1).iter().zip(fw2.tape.data(a2)) {
            assert!((a - b).abs() <= 1e-12);
        }
        let d1 = fw1.tape.data(y1);
        let d2 = fw2.tape.data(y2);
        for c in 0..f {
            for i in 0..t {
                assert!((d1[c * t + i] - d2[c * t + (t - 1 - i)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let store = setup(6, 2, 5);
        let mut fw = Forward::new(&store, true);
        let x = fw.input(&random_input(1, 4, 5, 1));
        assert!(sfa_forward(&mut fw, x, "sfa", 6, 2).is_err());
    }
}
