//! Soft feature alignment interaction: the FSB1/FSB2 bridges and the coupled
//! two-branch forward.
//!
//! FSB1 maps a TDNN tap [B,C,T] onto the Transformer tap layout [B,T',d]
//! with one strided conv doing both the channel and the temporal alignment;
//! FSB2 maps a Transformer tap back via nearest upsampling and a 1x1 conv.
//! Both multiply by a sigmoid-gated trainable vector before the final
//! normalization, and both start from a layer-normalized source.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{init_batchnorm, init_conv1d, init_layernorm, Forward, ParamStore};
use crate::tensor::{Tensor, TensorId};
use crate::{tdnn, transformer};

pub fn init_fsb1(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    let (c, d) = (cfg.tdnn_channels, cfg.trans_dim);
    init_layernorm(store, &format!("{}.ln", prefix), c);
    init_conv1d(store, rng, &format!("{}.align", prefix), d, c, 3);
    store.insert(&format!("{}.gate", prefix), Tensor::zeros(&[d]), true);
    init_batchnorm(store, &format!("{}.bn", prefix), d);
}

pub fn init_fsb2(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    let (c, d) = (cfg.tdnn_channels, cfg.trans_dim);
    init_layernorm(store, &format!("{}.ln", prefix), d);
    init_conv1d(store, rng, &format!("{}.align", prefix), c, d, 1);
    store.insert(&format!("{}.gate", prefix), Tensor::zeros(&[c]), true);
    init_batchnorm(store, &format!("{}.bn", prefix), c);
}

pub fn init_sfai(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, cfg: &ModelConfig) {
    init_fsb1(store, rng, &format!("{}.fsb1_a", prefix), cfg);
    init_fsb1(store, rng, &format!("{}.fsb1_b", prefix), cfg);
    init_fsb2(store, rng, &format!("{}.fsb2_a", prefix), cfg);
    init_fsb2(store, rng, &format!("{}.fsb2_b", prefix), cfg);
}

/// TDNN -> Transformer bridge: [B,C,T_td] -> [B,T_tr,d].
pub fn fsb1(fw: &mut Forward, x_td: TensorId, prefix: &str, cfg: &ModelConfig) -> Result<TensorId> {
    let s = fw.tape.shape(x_td).to_vec();
    if s.len() != 3 || s[1] != cfg.tdnn_channels {
        return Err(Error::Dim(format!(
            "fsb1 expects [B,{},T], got {:?}",
            cfg.tdnn_channels, s
        )));
    }
    let (b, d) = (s[0], cfg.trans_dim);
    // layer norm over channels, applied per frame
    let h = fw.tape.permute(x_td, &[0, 2, 1])?;
    let h = fw.layernorm(h, &format!("{}.ln", prefix))?;
    let h = fw.tape.permute(h, &[0, 2, 1])?;
    // strided conv aligns both the channel count and the temporal scale
    let h = fw.conv1d(h, &format!("{}.align", prefix), cfg.upsample, 1, 1)?; // [B,d,T_tr]
    let h = fw.batchnorm(h, &format!("{}.bn", prefix))?;
    let h = fw.tape.permute(h, &[0, 2, 1])?; // [B,T_tr,d]
    // the gate comes after normalization so a saturated-off gate really
    // zeroes the bridge (batch norm would rescale it right back otherwise)
    let gate = fw.p(&format!("{}.gate", prefix))?;
    let gate = fw.tape.sigmoid(gate);
    let gate = fw.tape.reshape(gate, vec![1, 1, d])?;
    let h = fw.tape.mul(h, gate)?;
    let _ = b;
    Ok(h)
}

/// Transformer -> TDNN bridge: [B,T_tr,d] -> [B,C,T_td].
pub fn fsb2(fw: &mut Forward, x_tr: TensorId, prefix: &str, cfg: &ModelConfig) -> Result<TensorId> {
    let s = fw.tape.shape(x_tr).to_vec();
    if s.len() != 3 || s[2] != cfg.trans_dim {
        return Err(Error::Dim(format!(
            "fsb2 expects [B,T,{}], got {:?}",
            cfg.trans_dim, s
        )));
    }
    let c = cfg.tdnn_channels;
    let h = fw.layernorm(x_tr, &format!("{}.ln", prefix))?;
    let h = fw.tape.permute(h, &[0, 2, 1])?; // [B,d,T_tr]
    let h = fw.tape.upsample_nearest(h, cfg.upsample)?; // [B,d,T_td]
    let h = fw.conv1d(h, &format!("{}.align", prefix), 1, 1, 0)?; // [B,C,T_td]
    let h = fw.batchnorm(h, &format!("{}.bn", prefix))?;
    // gate last, same reasoning as fsb1
    let gate = fw.p(&format!("{}.gate", prefix))?;
    let gate = fw.tape.sigmoid(gate);
    let gate = fw.tape.reshape(gate, vec![1, c, 1])?;
    fw.tape.mul(h, gate)
}

/// Expected event order of one coupled forward pass.
pub const COUPLED_TRACE: [&str; 14] = [
    "stem_td", "stem_tr", "block1_td", "block1_tr", "fsb2_a", "block2_td", "fsb1_a", "block2_tr",
    "fsb2_b", "block3_td", "fsb1_b", "block3_tr", "embed_td", "embed_tr",
];

/// Coupled two-branch forward in the exact dependency order of the
/// interaction equations. Every step is recorded in `fw.trace`.
pub fn coupled_forward(
    fw: &mut Forward,
    feat: TensorId,
    cfg: &ModelConfig,
) -> Result<(TensorId, TensorId)> {
    let ev = |fw: &mut Forward, name: &str| fw.trace.push(name.to_string());

    let x_td = tdnn::stem(fw, feat, "tdnn", cfg)?;
    ev(fw, "stem_td");
    let x_tr = transformer::stem(fw, feat, "trans", cfg)?;
    ev(fw, "stem_tr");
    check_alignment(fw, x_td, x_tr, cfg)?;

    let x1_td = tdnn::block(fw, x_td, "tdnn", cfg, 1)?;
    ev(fw, "block1_td");
    let x1_tr = transformer::block(fw, x_tr, "trans", cfg, 1)?;
    ev(fw, "block1_tr");

    let c_td = fsb2(fw, x1_tr, "sfai.fsb2_a", cfg)?;
    ev(fw, "fsb2_a");
    let in2_td = tdnn::add_bridge(fw, x1_td, c_td)?;
    let x2_td = tdnn::block(fw, in2_td, "tdnn", cfg, 2)?;
    ev(fw, "block2_td");

    let c_tr = fsb1(fw, x2_td, "sfai.fsb1_a", cfg)?;
    ev(fw, "fsb1_a");
    let in2_tr = tdnn::add_bridge(fw, x1_tr, c_tr)?;
    let x2_tr = transformer::block(fw, in2_tr, "trans", cfg, 2)?;
    ev(fw, "block2_tr");

    let cp_td = fsb2(fw, x2_tr, "sfai.fsb2_b", cfg)?;
    ev(fw, "fsb2_b");
    let in3_td = tdnn::add_bridge(fw, x2_td, cp_td)?;
    let x3_td = tdnn::block(fw, in3_td, "tdnn", cfg, 3)?;
    ev(fw, "block3_td");

    let cp_tr = fsb1(fw, x3_td, "sfai.fsb1_b", cfg)?;
    ev(fw, "fsb1_b");
    let in3_tr = tdnn::add_bridge(fw, x2_tr, cp_tr)?;
    let x3_tr = transformer::block(fw, in3_tr, "trans", cfg, 3)?;
    ev(fw, "block3_tr");

    let e_td = tdnn::embed(fw, &[x1_td, x2_td, x3_td], "tdnn", cfg)?;
    ev(fw, "embed_td");
    let e_tr = transformer::embed(fw, x3_tr, "trans")?;
    ev(fw, "embed_tr");

    debug_assert!(trace_is_valid(&fw.trace), "coupled forward trace out of order");
    Ok((e_td, e_tr))
}

/// The FSB2 temporal contract: upsample factor x T_tr must equal T_td.
fn check_alignment(fw: &Forward, x_td: TensorId, x_tr: TensorId, cfg: &ModelConfig) -> Result<()> {
    let t_td = fw.tape.shape(x_td)[2];
    let t_tr = fw.tape.shape(x_tr)[1];
    if t_tr * cfg.upsample != t_td {
        return Err(Error::Config(format!(
            "temporal misalignment: {} x T_tr {} != T_td {} (segment length must be even)",
            cfg.upsample, t_tr, t_td
        )));
    }
    Ok(())
}

/// True when `trace` ends with one well-ordered coupled forward pass.
pub fn trace_is_valid(trace: &[String]) -> bool {
    trace.len() >= COUPLED_TRACE.len()
        && trace[trace.len() - COUPLED_TRACE.len()..]
            .iter()
            .zip(COUPLED_TRACE.iter())
            .all(|(a, b)| a == b)
}
