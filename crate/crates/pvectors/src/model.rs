//! Full model assembly: configuration presets, parameter initialization,
//! the embedding aggregation layer, the coupled forward, stage-1 to stage-2
//! weight transfer and parameter counting.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::params::{init_batchnorm, init_linear, Checkpoint, Forward, ParamStore, TrainState};
use crate::sfai;
use crate::tensor::{Tensor, TensorId};
use crate::{tdnn, transformer};

#[derive(Clone, Debug)]
pub struct ModelConfig {
    pub preset: String,
    /// Mel bins F.
    pub n_mels: usize,
    /// Fixed segment length in frames; must be even for bridge alignment.
    pub frames: usize,
    pub tdnn_channels: usize,
    pub res2_scale: usize,
    pub se_bottleneck: usize,
    pub agg_channels: usize,
    pub attn_bottleneck: usize,
    pub trans_dim: usize,
    pub trans_heads: usize,
    pub trans_blocks: usize,
    pub layers_per_block: usize,
    pub ffn_mult: usize,
    pub embed_dim: usize,
    pub sfa_expansion: usize,
    pub dropout: f64,
    /// Temporal resolution gap between the branches (stride-2 stem).
    pub upsample: usize,
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            preset: "full".into(),
            n_mels: 80,
            frames: 298,
            tdnn_channels: 512,
            res2_scale: 8,
            se_bottleneck: 128,
            agg_channels: 1536,
            attn_bottleneck: 128,
            trans_dim: 272,
            trans_heads: 4,
            trans_blocks: 3,
            layers_per_block: 3,
            ffn_mult: 4,
            embed_dim: 192,
            sfa_expansion: 4,
            dropout: 0.1,
            upsample: 2,
        }
    }

    pub fn toy() -> Self {
        ModelConfig {
            preset: "toy".into(),
            n_mels: 24,
            frames: 60,
            tdnn_channels: 64,
            res2_scale: 4,
            se_bottleneck: 16,
            agg_channels: 128,
            attn_bottleneck: 32,
            trans_dim: 64,
            trans_heads: 4,
            trans_blocks: 3,
            layers_per_block: 3,
            ffn_mult: 4,
            embed_dim: 32,
            sfa_expansion: 2,
            dropout: 0.0,
            upsample: 2,
        }
    }

    pub fn from_preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown preset '{}'", other))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tdnn_channels % self.res2_scale != 0 {
            return Err(Error::Config("channels must divide by res2 scale".into()));
        }
        if self.trans_dim % self.trans_heads != 0 {
            return Err(Error::Config("model dim must divide by head count".into()));
        }
        if self.frames % self.upsample != 0 {
            return Err(Error::Config("segment length must divide by the upsample factor".into()));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Branch {
    Tdnn,
    Transformer,
}

impl Branch {
    pub fn namespace(self) -> &'static str {
        match self {
            Branch::Tdnn => "tdnn",
            Branch::Transformer => "trans",
        }
    }
    pub fn head_namespace(self) -> &'static str {
        match self {
            Branch::Tdnn => "head_td",
            Branch::Transformer => "head_tr",
        }
    }
}

pub fn init_eal(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    init_linear(store, rng, &format!("{}.fc", prefix), 2 * d, d);
    init_batchnorm(store, &format!("{}.bn", prefix), d);
}

/// Parameters of one standalone branch (stage 1, no classifier head).
pub fn init_branch(cfg: &ModelConfig, branch: Branch, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    match branch {
        Branch::Tdnn => tdnn::init_tdnn_branch(&mut store, &mut rng, "tdnn", cfg),
        Branch::Transformer => transformer::init_transformer_branch(&mut store, &mut rng, "trans", cfg),
    }
    store
}

/// Parameters of the full coupled model (both branches, bridges and EAL).
pub fn init_pvectors(cfg: &ModelConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    tdnn::init_tdnn_branch(&mut store, &mut rng, "tdnn", cfg);
    transformer::init_transformer_branch(&mut store, &mut rng, "trans", cfg);
    sfai::init_sfai(&mut store, &mut rng, "sfai", cfg);
    init_eal(&mut store, &mut rng, "eal", cfg.embed_dim);
    store
}

/// Classifier head for AM-softmax: a [D,N] weight matrix with unit-norm
/// columns.
pub fn init_head(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize, n: usize) {
    let mut w = crate::params::uniform(rng, &[d, n], 1.0);
    normalize_columns(&mut w);
    store.insert(&format!("{}.w", prefix), w, true);
}

pub fn normalize_columns(w: &mut Tensor) {
    let (d, n) = (w.shape[0], w.shape[1]);
    for j in 0..n {
        let norm: f64 = (0..d).map(|i| w.data[i * n + j] * w.data[i * n + j]).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..d {
                w.data[i * n + j] /= norm;
            }
        }
    }
}

/// Embedding aggregation layer: BN(FC(concat(e_td, e_tr))).
pub fn eal_forward(fw: &mut Forward, e_td: TensorId, e_tr: TensorId) -> Result<TensorId> {
    let std = fw.tape.shape(e_td).to_vec();
    let str_ = fw.tape.shape(e_tr).to_vec();
    if std != str_ || std.len() != 2 {
        return Err(Error::Dim(format!(
            "eal expects matching [B,D] embeddings, got {:?} and {:?}",
            std, str_
        )));
    }
    let cat = fw.tape.concat(&[e_td, e_tr], 1)?;
    let h = fw.linear(cat, "eal.fc")?;
    fw.batchnorm(h, "eal.bn")
}

/// Stack feature matrices into a [B,F,T] input tensor.
pub fn batch_features(feats: &[&FeatureMatrix]) -> Result<Tensor> {
    if feats.is_empty() {
        return Err(Error::Input("empty feature batch".into()));
    }
    let (f, t) = (feats[0].mels, feats[0].frames);
    let mut data = Vec::with_capacity(feats.len() * f * t);
    for m in feats {
        if m.mels != f || m.frames != t {
            return Err(Error::Dim("inconsistent feature shapes in batch".into()));
        }
        data.extend_from_slice(&m.values);
    }
    Tensor::new(vec![feats.len(), f, t], data)
}

/// Full p-vectors forward: coupled branches plus EAL. Returns the final
/// speaker embedding [B,D].
pub fn pvectors_forward(fw: &mut Forward, feat: TensorId, cfg: &ModelConfig) -> Result<TensorId> {
    let (e_td, e_tr) = sfai::coupled_forward(fw, feat, cfg)?;
    eal_forward(fw, e_td, e_tr)
}

/// Stage-1 -> stage-2 transfer: branch weights copied verbatim from the two
/// standalone checkpoints, classifier namespaces dropped, bridges and EAL
/// freshly initialized.
pub fn transfer_weights(
    stage1_td: &Checkpoint,
    stage1_tr: &Checkpoint,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<Checkpoint> {
    let mut store = init_pvectors(cfg, seed);
    store.copy_namespace_from(&stage1_td.store, "tdnn")?;
    store.copy_namespace_from(&stage1_tr.store, "trans")?;
    let state = TrainState { step: 0, epoch: 0, stage: 2, moments: Default::default() };
    Ok(Checkpoint::from_store(&store, Some(state)))
}

/// Trainable parameter count for a preset.
pub fn param_count(cfg: &ModelConfig) -> usize {
    init_pvectors(cfg, 0).trainable_count()
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    Tdnn,
    Transformer,
    Coupled,
}

impl EmbedMode {
    /// Pick the extraction mode matching a checkpoint's parameter namespaces.
    pub fn detect(store: &ParamStore) -> Result<Self> {
        let td = store.names().iter().any(|n| n.starts_with("tdnn."));
        let tr = store.names().iter().any(|n| n.starts_with("trans."));
        let eal = store.names().iter().any(|n| n.starts_with("eal."));
        match (td, tr, eal) {
            (_, _, true) => Ok(EmbedMode::Coupled),
            (true, false, false) => Ok(EmbedMode::Tdnn),
            (false, true, false) => Ok(EmbedMode::Transformer),
            _ => Err(Error::State("cannot infer extraction mode from checkpoint".into())),
        }
    }
}

/// Eval-mode embedding extraction for a list of (utterance id, features).
pub fn compute_embeddings(
    store: &ParamStore,
    cfg: &ModelConfig,
    mode: EmbedMode,
    feats: &[(String, FeatureMatrix)],
    batch_size: usize,
) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::with_capacity(feats.len());
    for chunk in feats.chunks(batch_size.max(1)) {
        let refs: Vec<&FeatureMatrix> = chunk.iter().map(|(_, m)| m).collect();
        let batch = batch_features(&refs)?;
        let mut fw = Forward::new(store, false);
        let x = fw.input(&batch);
        let emb = match mode {
            EmbedMode::Tdnn => tdnn::forward(&mut fw, x, "tdnn", cfg, [None, None])?.1,
            EmbedMode::Transformer => transformer::forward(&mut fw, x, "trans", cfg, [None, None])?.1,
            EmbedMode::Coupled => pvectors_forward(&mut fw, x, cfg)?,
        };
        let d = fw.tape.shape(emb)[1];
        let data = fw.tape.data(emb);
        for (i, (id, _)) in chunk.iter().enumerate() {
            out.push((id.clone(), data[i * d..(i + 1) * d].to_vec()));
        }
    }
    Ok(out)
}
