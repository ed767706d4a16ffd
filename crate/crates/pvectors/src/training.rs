//! Losses, optimizer, learning-rate schedule, the two-stage training
//! strategy and a synthetic-speaker data generator for desk-scale runs.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::{self, Branch, ModelConfig};
use crate::params::{apply_bn_updates, Checkpoint, Forward, ParamStore, TrainState};
use crate::tensor::TensorId;

#[derive(Clone, Debug)]
pub struct AamConfig {
    pub margin: f64,
    pub scale: f64,
    pub classes: usize,
}

impl AamConfig {
    pub fn recommended(classes: usize) -> Self {
        AamConfig { margin: 0.2, scale: 30.0, classes }
    }
}

/// Additive margin softmax on cosine logits: target logit cos(theta)-m, all
/// logits scaled by s, then cross-entropy. Embeddings are L2-normalized
/// here; the head weight columns are kept unit-norm by the optimizer loop.
pub fn am_softmax_loss(
    fw: &mut Forward,
    emb: TensorId,
    labels: &[usize],
    head_prefix: &str,
    cfg: &AamConfig,
) -> Result<TensorId> {
    let s = fw.tape.shape(emb).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Dim(format!(
            "am_softmax: embeddings {:?} vs {} labels",
            s,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.classes) {
        return Err(Error::Input(format!("label {} out of range 0..{}", bad, cfg.classes)));
    }
    let (b, _d) = (s[0], s[1]);
    let w = fw.p(&format!("{}.w", head_prefix))?;
    // row-normalize embeddings
    let sq = fw.tape.mul(emb, emb)?;
    let norm2 = fw.tape.sum_axis(sq, 1)?;
    let norm = fw.tape.sqrt(norm2);
    let norm = fw.tape.reshape(norm, vec![b, 1])?;
    let ehat = fw.tape.div(emb, norm)?;
    let logits = fw.tape.matmul(ehat, w)?; // [B,N]
    // subtract the margin on target entries
    let mut margin_mask = vec![0.0; b * cfg.classes];
    for (r, &l) in labels.iter().enumerate() {
        margin_mask[r * cfg.classes + l] = -cfg.margin;
    }
    let mm = fw.tape.constant(vec![b, cfg.classes], margin_mask);
    let logits = fw.tape.add(logits, mm)?;
    let logits = fw.tape.scale(logits, cfg.scale);
    fw.tape.cross_entropy_mean(logits, labels)
}

#[derive(Clone, Debug)]
pub struct Triangular2Config {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_epochs: usize,
    pub steps_per_epoch: usize,
}

impl Triangular2Config {
    pub fn recommended(steps_per_epoch: usize) -> Self {
        Triangular2Config { lr_min: 1e-8, lr_max: 1e-3, cycle_epochs: 6, steps_per_epoch }
    }

    pub fn cycle_steps(&self) -> usize {
        self.cycle_epochs * self.steps_per_epoch.max(1)
    }
}

/// Triangular2 cyclical learning rate: a triangle wave between lr_min and a
/// peak that halves every cycle.
pub fn triangular2_lr(step: u64, cfg: &Triangular2Config) -> f64 {
    let cycle = cfg.cycle_steps() as u64;
    let c = step / cycle;
    let x = (step % cycle) as f64;
    let half = cycle as f64 / 2.0;
    let frac = if x <= half { x / half } else { (cycle as f64 - x) / half };
    let peak = cfg.lr_min + (cfg.lr_max - cfg.lr_min) / 2f64.powi(c as i32);
    cfg.lr_min + (peak - cfg.lr_min) * frac
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub t: u64,
    pub moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam step over the supplied gradients.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (name, g) in grads {
        let p = store.get_mut(name)?;
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for i in 0..g.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p.tensor.data[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ── synthetic speakers ───────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub speakers: usize,
    pub utts_per_speaker: usize,
    pub mels: usize,
    pub frames: usize,
    pub noise: f64,
}

/// Per-speaker spectral template: a smoothed random envelope with a few
/// formant-like bumps.
fn speaker_template(rng: &mut ChaCha8Rng, mels: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..mels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut env = vec![0.0; mels];
    for i in 0..mels {
        let lo = i.saturating_sub(1);
        let hi = (i + 2).min(mels);
        env[i] = raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
    }
    for _ in 0..3 {
        let center = rng.gen_range(0..mels) as f64;
        let amp = rng.gen_range(1.0..2.5);
        for (i, e) in env.iter_mut().enumerate() {
            let d = i as f64 - center;
            *e += amp * (-d * d / 8.0).exp();
        }
    }
    env
}

/// Deterministic synthetic dataset: same-speaker utterances share a template
/// plus independent Gaussian noise.
pub fn gen_synth(spec: &SynthSpec, seed: u64) -> Result<Vec<(FeatureMatrix, usize)>> {
    if spec.speakers < 2 {
        return Err(Error::Config("need at least two synthetic speakers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> =
        (0..spec.speakers).map(|_| speaker_template(&mut rng, spec.mels)).collect();
    let mut data = Vec::with_capacity(spec.speakers * spec.utts_per_speaker);
    for (spk, tpl) in templates.iter().enumerate() {
        for _ in 0..spec.utts_per_speaker {
            let mut values = vec![0.0; spec.mels * spec.frames];
            for m in 0..spec.mels {
                for t in 0..spec.frames {
                    let noise = if spec.noise > 0.0 {
                        // Box-Muller
                        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                        let u2: f64 = rng.gen();
                        spec.noise
                            * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos()
                    } else {
                        0.0
                    };
                    values[m * spec.frames + t] = tpl[m] + noise;
                }
            }
            data.push((FeatureMatrix::new(spec.mels, spec.frames, values)?, spk));
        }
    }
    Ok(data)
}

// ── training loops ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub margin: f64,
    pub scale: f64,
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_stage1: 24,
            epochs_stage2: 6,
            batch_size: 32,
            seed: 1,
            margin: 0.2,
            scale: 30.0,
            lr_min: 1e-8,
            lr_max: 1e-3,
            cycle_epochs: 6,
        }
    }
}

fn class_count(data: &[(FeatureMatrix, usize)]) -> usize {
    data.iter().map(|(_, s)| s + 1).max().unwrap_or(0)
}

struct StepRecord {
    loss: f64,
}

/// Shared minibatch loop. `forward_loss` builds the loss for one batch.
fn train_loop<F>(
    store: &mut ParamStore,
    data: &[(FeatureMatrix, usize)],
    epochs: usize,
    stage: u32,
    tc: &TrainConfig,
    log: &mut dyn Write,
    head_prefixes: &[&str],
    mut forward_loss: F,
) -> Result<TrainState>
where
    F: FnMut(&mut Forward, TensorId, &[usize]) -> Result<TensorId>,
{
    if data.is_empty() {
        return Err(Error::Input("empty training data".into()));
    }
    let steps_per_epoch = data.len().div_ceil(tc.batch_size);
    let lr_cfg = Triangular2Config {
        lr_min: tc.lr_min,
        lr_max: tc.lr_max,
        cycle_epochs: tc.cycle_epochs,
        steps_per_epoch,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut adam = AdamState::default();
    let mut step: u64 = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(tc.batch_size) {
            let feats: Vec<&FeatureMatrix> = chunk.iter().map(|&i| &data[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].1).collect();
            let batch = model::batch_features(&feats)?;
            let mut fw = Forward::new(store, true);
            fw.dropout_rng = Some(ChaCha8Rng::seed_from_u64(tc.seed.wrapping_mul(31).wrapping_add(step)));
            let feat_id = fw.input(&batch);
            let loss_id = forward_loss(&mut fw, feat_id, &labels)?;
            let rec = StepRecord { loss: fw.tape.data(loss_id)[0] };
            if !rec.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: loss {} at stage {} step {}",
                    rec.loss, stage, step
                )));
            }
            fw.tape.backward(loss_id)?;
            let grads = fw.grads();
            let updates = std::mem::take(&mut fw.bn_updates);
            drop(fw);
            let lr = triangular2_lr(step, &lr_cfg);
            adam_step(store, &grads, &mut adam, lr)?;
            apply_bn_updates(store, &updates)?;
            for hp in head_prefixes {
                let w = store.get_mut(&format!("{}.w", hp))?;
                model::normalize_columns(&mut w.tensor);
            }
            writeln!(log, "{}\t{}\t{:.10e}\t{:.8}", step, stage, lr, rec.loss)?;
            step += 1;
        }
        let _ = epoch;
    }
    Ok(TrainState { step, epoch: epochs as u32, stage, moments: adam.moments })
}

/// Stage 1: train one standalone branch with its own AM-softmax classifier.
pub fn train_stage1(
    branch: Branch,
    data: &[(FeatureMatrix, usize)],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let classes = class_count(data);
    let mut store = model::init_branch(cfg, branch, tc.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ xhead_seed());
    model::init_head(&mut store, &mut rng, branch.head_namespace(), cfg.embed_dim, classes);
    let aam = AamConfig { margin: tc.margin, scale: tc.scale, classes };
    let ns = branch.namespace();
    let head = branch.head_namespace();
    let dropout = cfg.dropout;
    let cfg2 = cfg.clone();
    let state = train_loop(
        &mut store,
        data,
        tc.epochs_stage1,
        1,
        tc,
        log,
        &[head],
        move |fw, feat, labels| {
            fw.dropout = dropout;
            let emb = match branch {
                Branch::Tdnn => crate::tdnn::forward(fw, feat, ns, &cfg2, [None, None])?.1,
                Branch::Transformer => {
                    crate::transformer::forward(fw, feat, ns, &cfg2, [None, None])?.1
                }
            };
            am_softmax_loss(fw, emb, labels, head, &aam)
        },
    )?;
    Ok(Checkpoint::from_store(&store, Some(state)))
}

/// Stage 2: transfer the two stage-1 checkpoints into the coupled model,
/// attach a single AM-softmax head on the EAL output and train everything.
pub fn train_stage2(
    ckpt_td: &Checkpoint,
    ckpt_tr: &Checkpoint,
    data: &[(FeatureMatrix, usize)],
    cfg: &ModelConfig,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let classes = class_count(data);
    let transferred = model::transfer_weights(ckpt_td, ckpt_tr, cfg, tc.seed)?;
    let mut store = transferred.store;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ xhead_seed());
    model::init_head(&mut store, &mut rng, "head", cfg.embed_dim, classes);
    let aam = AamConfig { margin: tc.margin, scale: tc.scale, classes };
    let dropout = cfg.dropout;
    let cfg2 = cfg.clone();
    let mut state = train_loop(
        &mut store,
        data,
        tc.epochs_stage2,
        2,
        tc,
        log,
        &["head"],
        move |fw, feat, labels| {
            fw.dropout = dropout;
            let emb = model::pvectors_forward(fw, feat, &cfg2)?;
            am_softmax_loss(fw, emb, labels, "head", &aam)
        },
    )?;
    state.stage = 2;
    Ok(Checkpoint::from_store(&store, Some(state)))
}

// small helper keeping head init seeds distinct from branch init seeds
#[allow(non_snake_case)]
fn xhead_seed() -> u64 {
    0x48454144
}
