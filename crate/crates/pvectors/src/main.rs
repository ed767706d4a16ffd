use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use pvectors::error::{Error, Result};
use pvectors::features::{self, FeatureMatrix};
use pvectors::gradcheck;
use pvectors::metrics;
use pvectors::model::{self, Branch, EmbedMode, ModelConfig};
use pvectors::params::Checkpoint;
use pvectors::training::{self, SynthSpec, TrainConfig};

/// Everything tunable from a key=value config file. Command-line flags
/// override file values, which override these defaults.
#[derive(Clone, Debug)]
struct RunConfig {
    preset: String,
    seed: u64,
    speakers: usize,
    utts_per_speaker: usize,
    mels: usize,
    frames: usize,
    noise: f64,
    epochs_stage1: usize,
    epochs_stage2: usize,
    batch_size: usize,
    margin: f64,
    scale: f64,
    lr_min: f64,
    lr_max: f64,
    cycle_epochs: usize,
    snorm_topk: usize,
    p_target: f64,
    c_fa: f64,
    c_miss: f64,
    window_ms: f64,
    hop_ms: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "toy".into(),
            seed: 1,
            speakers: 20,
            utts_per_speaker: 10,
            mels: 24,
            frames: 60,
            noise: 0.3,
            epochs_stage1: 24,
            epochs_stage2: 6,
            batch_size: 32,
            margin: 0.2,
            scale: 30.0,
            lr_min: 1e-8,
            lr_max: 1e-3,
            cycle_epochs: 6,
            snorm_topk: 5,
            p_target: 0.01,
            c_fa: 1.0,
            c_miss: 1.0,
            window_ms: 25.0,
            hop_ms: 10.0,
        }
    }
}

impl RunConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value '{}' for key '{}'", v, key)))
        }
        match key {
            "preset" => self.preset = value.to_string(),
            "seed" => self.seed = num(key, value)?,
            "speakers" => self.speakers = num(key, value)?,
            "utts_per_speaker" => self.utts_per_speaker = num(key, value)?,
            "mels" => self.mels = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "epochs_stage1" => self.epochs_stage1 = num(key, value)?,
            "epochs_stage2" => self.epochs_stage2 = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "scale" => self.scale = num(key, value)?,
            "lr_min" => self.lr_min = num(key, value)?,
            "lr_max" => self.lr_max = num(key, value)?,
            "cycle_epochs" => self.cycle_epochs = num(key, value)?,
            "snorm_topk" => self.snorm_topk = num(key, value)?,
            "p_target" => self.p_target = num(key, value)?,
            "c_fa" => self.c_fa = num(key, value)?,
            "c_miss" => self.c_miss = num(key, value)?,
            "window_ms" => self.window_ms = num(key, value)?,
            "hop_ms" => self.hop_ms = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key '{}'", other))),
        }
        Ok(())
    }

    fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = RunConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    fn model(&self) -> Result<ModelConfig> {
        let m = ModelConfig::from_preset(&self.preset)?;
        m.validate()?;
        Ok(m)
    }

    fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs_stage1: self.epochs_stage1,
            epochs_stage2: self.epochs_stage2,
            batch_size: self.batch_size,
            seed: self.seed,
            margin: self.margin,
            scale: self.scale,
            lr_min: self.lr_min,
            lr_max: self.lr_max,
            cycle_epochs: self.cycle_epochs,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "pvectors",
    about = "Parallel-coupled TDNN/Transformer speaker embeddings: data, training, scoring",
    after_help = "Option precedence: built-in defaults < --config key=value file < command-line flags."
)]
struct Cli {
    /// Key=value config file applied before command-line flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Model preset: toy | full (overrides the config file).
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-speaker feature dataset.
    Synth(SynthArgs),
    /// Convert a directory of mono 16-bit WAV files to feature files.
    Fbank(FbankArgs),
    /// Train stage 1 (one branch) or stage 2 (coupled model).
    Train(TrainArgs),
    /// Extract embeddings from a checkpoint for a feature dataset.
    Embed(EmbedArgs),
    /// Score trials by cosine similarity, optionally s-normalized.
    Score(ScoreArgs),
    /// Compute EER and minDCF from trials and scores.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite; nonzero exit on failure.
    Gradcheck(GradcheckArgs),
    /// Print trainable parameter counts per namespace.
    Params,
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    speakers: Option<usize>,
    #[arg(long)]
    utts_per_speaker: Option<usize>,
    #[arg(long)]
    mels: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct FbankArgs {
    /// Directory of .wav files.
    #[arg(long)]
    input: PathBuf,
    /// Output feature directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mels: Option<usize>,
    #[arg(long)]
    window_ms: Option<f64>,
    #[arg(long)]
    hop_ms: Option<f64>,
    /// Crop/repeat every utterance to this many frames.
    #[arg(long)]
    frames: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// 1td, 1tr or 2.
    #[arg(long)]
    stage: String,
    /// Dataset directory (feature files plus labels.txt).
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training log (tab-separated step/stage/lr/loss); stdout if omitted.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Stage-1 TDNN checkpoint (stage 2 only).
    #[arg(long)]
    ckpt_td: Option<PathBuf>,
    /// Stage-1 transformer checkpoint (stage 2 only).
    #[arg(long)]
    ckpt_tr: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// td | tr | coupled; inferred from the checkpoint if omitted.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Cohort embedding file enabling adaptive s-norm.
    #[arg(long)]
    cohort: Option<PathBuf>,
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    trials: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    p_target: Option<f64>,
    #[arg(long)]
    c_fa: Option<f64>,
    #[arg(long)]
    c_miss: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Also run the composed whole-model check (slower).
    #[arg(long, default_value_t = true)]
    composed: bool,
    /// Parameter samples for the composed check.
    #[arg(long, default_value_t = 100)]
    samples: usize,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut rc = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        rc.seed = s;
    }
    if let Some(p) = &cli.preset {
        rc.preset = p.clone();
    }
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(rc, a),
        Cmd::Fbank(a) => cmd_fbank(rc, a),
        Cmd::Train(a) => cmd_train(rc, a),
        Cmd::Embed(a) => cmd_embed(rc, a),
        Cmd::Score(a) => cmd_score(rc, a),
        Cmd::Eval(a) => cmd_eval(rc, a),
        Cmd::Gradcheck(a) => cmd_gradcheck(rc, a),
        Cmd::Params => cmd_params(rc),
    }
}

// ── dataset directory helpers ────────────────────────────────────────

fn write_dataset(dir: &Path, data: &[(FeatureMatrix, usize)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut labels = String::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for (feat, spk) in data {
        let idx = counts.entry(*spk).or_insert(0);
        let id = format!("s{:03}u{:03}", spk, idx);
        *idx += 1;
        features::write_features(&dir.join(format!("{}.pvfb", id)), feat)?;
        labels.push_str(&format!("{} {}\n", id, spk));
    }
    std::fs::write(dir.join("labels.txt"), labels)?;
    Ok(())
}

fn read_dataset(dir: &Path) -> Result<Vec<(String, FeatureMatrix, usize)>> {
    let labels_path = dir.join("labels.txt");
    let text = std::fs::read_to_string(&labels_path)
        .map_err(|_| Error::Input(format!("missing labels file {}", labels_path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let (id, spk) = match (it.next(), it.next(), it.next()) {
            (Some(id), Some(spk), None) => (id, spk),
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: expected 'utt_id speaker'",
                    labels_path.display(),
                    lineno + 1
                )))
            }
        };
        let spk: usize = spk
            .parse()
            .map_err(|_| Error::Format(format!("bad speaker index '{}'", spk)))?;
        let feat = features::read_features(&dir.join(format!("{}.pvfb", id)))?;
        out.push((id.to_string(), feat, spk));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

// ── commands ─────────────────────────────────────────────────────────

fn cmd_synth(rc: RunConfig, a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        speakers: a.speakers.unwrap_or(rc.speakers),
        utts_per_speaker: a.utts_per_speaker.unwrap_or(rc.utts_per_speaker),
        mels: a.mels.unwrap_or(rc.mels),
        frames: a.frames.unwrap_or(rc.frames),
        noise: a.noise.unwrap_or(rc.noise),
    };
    let data = training::gen_synth(&spec, rc.seed)?;
    write_dataset(&a.out, &data)?;
    println!("wrote {} utterances to {}", data.len(), a.out.display());
    Ok(())
}

fn cmd_fbank(rc: RunConfig, a: FbankArgs) -> Result<()> {
    use rand::SeedableRng;
    if !a.input.is_dir() {
        return Err(Error::Input(format!("{} is not a directory", a.input.display())));
    }
    std::fs::create_dir_all(&a.out)?;
    let mut wavs: Vec<PathBuf> = std::fs::read_dir(&a.input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(Error::Input(format!("no .wav files in {}", a.input.display())));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rc.seed);
    for wav in &wavs {
        let clip = features::read_wav(wav)?;
        let mut feat = features::fbank(
            &clip,
            a.window_ms.unwrap_or(rc.window_ms),
            a.hop_ms.unwrap_or(rc.hop_ms),
            a.mels.unwrap_or(rc.mels),
        )?;
        if let Some(fr) = a.frames {
            feat = features::crop_segment(&feat, fr, &mut rng);
        }
        let stem = wav.file_stem().unwrap().to_string_lossy();
        features::write_features(&a.out.join(format!("{}.pvfb", stem)), &feat)?;
    }
    println!("converted {} files to {}", wavs.len(), a.out.display());
    Ok(())
}

fn cmd_train(rc: RunConfig, a: TrainArgs) -> Result<()> {
    let cfg = rc.model()?;
    let mut tc = rc.train();
    if let Some(b) = a.batch_size {
        tc.batch_size = b;
    }
    let rows = read_dataset(&a.data)?;
    let data: Vec<(FeatureMatrix, usize)> = rows.into_iter().map(|(_, f, s)| (f, s)).collect();
    let mut log: Box<dyn Write> = match &a.log {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout()),
    };
    let ckpt = match a.stage.as_str() {
        "1td" | "1tr" => {
            if let Some(e) = a.epochs {
                tc.epochs_stage1 = e;
            }
            let branch = if a.stage == "1td" { Branch::Tdnn } else { Branch::Transformer };
            training::train_stage1(branch, &data, &cfg, &tc, &mut log)?
        }
        "2" => {
            if let Some(e) = a.epochs {
                tc.epochs_stage2 = e;
            }
            let (td, tr) = match (&a.ckpt_td, &a.ckpt_tr) {
                (Some(td), Some(tr)) => (td, tr),
                _ => {
                    return Err(Error::Usage(
                        "stage 2 requires --ckpt-td and --ckpt-tr".into(),
                    ))
                }
            };
            let ckpt_td = Checkpoint::load(td)?;
            let ckpt_tr = Checkpoint::load(tr)?;
            training::train_stage2(&ckpt_td, &ckpt_tr, &data, &cfg, &tc, &mut log)?
        }
        other => return Err(Error::Usage(format!("unknown stage '{}'", other))),
    };
    log.flush()?;
    ckpt.save(&a.out)?;
    println!("saved checkpoint {}", a.out.display());
    Ok(())
}

fn cmd_embed(rc: RunConfig, a: EmbedArgs) -> Result<()> {
    let cfg = rc.model()?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let mode = match a.mode.as_deref() {
        None | Some("auto") => EmbedMode::detect(&ckpt.store)?,
        Some("td") => EmbedMode::Tdnn,
        Some("tr") => EmbedMode::Transformer,
        Some("coupled") => EmbedMode::Coupled,
        Some(other) => return Err(Error::Usage(format!("unknown embed mode '{}'", other))),
    };
    let rows = read_dataset(&a.data)?;
    let feats: Vec<(String, FeatureMatrix)> =
        rows.into_iter().map(|(id, f, _)| (id, f)).collect();
    let embs = model::compute_embeddings(
        &ckpt.store,
        &cfg,
        mode,
        &feats,
        a.batch_size.unwrap_or(rc.batch_size),
    )?;
    let map: BTreeMap<String, Vec<f64>> = embs.into_iter().collect();
    metrics::write_embeddings(&a.out, &map)?;
    println!("wrote {} embeddings to {}", map.len(), a.out.display());
    Ok(())
}

fn cmd_score(rc: RunConfig, a: ScoreArgs) -> Result<()> {
    let trials = metrics::read_trials(&a.trials)?;
    let embs = metrics::read_embeddings(&a.embeddings)?;
    let mut raw = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        let e = embs
            .get(&t.enroll)
            .ok_or_else(|| Error::Input(format!("missing embedding for '{}'", t.enroll)))?;
        let s = embs
            .get(&t.test)
            .ok_or_else(|| Error::Input(format!("missing embedding for '{}'", t.test)))?;
        raw.push(metrics::cosine_score(e, s)?);
    }
    let final_scores = match &a.cohort {
        Some(cpath) => {
            let cohort_map = metrics::read_embeddings(cpath)?;
            let cohort: Vec<Vec<f64>> = cohort_map.into_values().collect();
            let k = a.topk.unwrap_or(rc.snorm_topk).min(cohort.len());
            metrics::adaptive_snorm(&raw, &trials.trials, &embs, &cohort, k)?
        }
        None => raw,
    };
    metrics::write_scores(&a.out, &trials.trials, &final_scores)?;
    println!("wrote {} scores to {}", final_scores.len(), a.out.display());
    Ok(())
}

fn cmd_eval(rc: RunConfig, a: EvalArgs) -> Result<()> {
    let trials = metrics::read_trials(&a.trials)?;
    let scored = metrics::read_scores(&a.scores)?;
    let mut by_pair: BTreeMap<(String, String), f64> = BTreeMap::new();
    for (e, t, s) in scored {
        by_pair.insert((e, t), s);
    }
    let mut scores = Vec::with_capacity(trials.trials.len());
    let mut labels = Vec::with_capacity(trials.trials.len());
    for t in &trials.trials {
        let s = by_pair
            .get(&(t.enroll.clone(), t.test.clone()))
            .ok_or_else(|| Error::Input(format!("no score for trial {} {}", t.enroll, t.test)))?;
        scores.push(*s);
        labels.push(t.target);
    }
    let set = metrics::ScoreSet::new(scores, labels)?;
    let eer = metrics::eer(&set)?;
    let dcf = metrics::min_dcf(
        &set,
        a.p_target.unwrap_or(rc.p_target),
        a.c_fa.unwrap_or(rc.c_fa),
        a.c_miss.unwrap_or(rc.c_miss),
    )?;
    println!("EER\t{:.4}\tminDCF\t{:.4}", eer * 100.0, dcf);
    Ok(())
}

fn cmd_gradcheck(rc: RunConfig, a: GradcheckArgs) -> Result<()> {
    let mut failed = false;
    for r in gradcheck::per_op_suite(rc.seed)? {
        let ok = r.passed();
        failed |= !ok;
        println!(
            "{}\t{}\tmax_rel={:.3e}\ttol={:.0e}",
            if ok { "ok" } else { "FAIL" },
            r.name,
            r.max_rel,
            r.tol
        );
    }
    if a.composed {
        let cfg = ModelConfig::from_preset(&rc.preset)?;
        let r = gradcheck::composed_check(&cfg, rc.seed, a.samples)?;
        let ok = r.passed();
        failed |= !ok;
        println!(
            "{}\t{}\tmax_rel={:.3e}\ttol={:.0e}",
            if ok { "ok" } else { "FAIL" },
            r.name,
            r.max_rel,
            r.tol
        );
    }
    if failed {
        return Err(Error::Numeric("gradient check failed".into()));
    }
    Ok(())
}

fn cmd_params(rc: RunConfig) -> Result<()> {
    let cfg = rc.model()?;
    let store = model::init_pvectors(&cfg, 0);
    for (ns, n) in store.count_by_namespace() {
        println!("{}\t{}", ns, n);
    }
    println!("total\t{}", store.trainable_count());
    Ok(())
}
