use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use polylm::corpus::{pack_sequences, MaskingConfig, TokenId};
use polylm::model::{ModelConfig, PolyLm};
use polylm::training::{latest_checkpoint, Checkpoint, Schedule, ScheduleSpec, TrainConfig, TrainLog, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::commands::{open, read_docs, read_vocab};
use crate::config::RunConfig;
use crate::Invalid;

pub const LOG_FILE: &str = "train.log";
pub const CONFIG_FILE: &str = "config.txt";

/// Peak learning rate used for the desk preset.
pub const DESK_LR: f64 = 1e-4;
pub const DESK_STEPS: u64 = 50_000;
pub const DESK_BATCH: usize = 8;

const KEYS: &[&str] = &[
    "preset",
    "d_model",
    "filter_size",
    "n_heads",
    "layers_disamb",
    "layers_predict",
    "seq_len",
    "dropout",
    "init_std",
    "layer_norm_eps",
    "steps",
    "lr_peak",
    "warmup_steps",
    "lambda_final",
    "lambda_ramp_steps",
    "r_start",
    "r_final",
    "r_ramp_steps",
    "batch_size",
    "seed",
    "checkpoint_every",
    "keep_checkpoints",
    "clip_norm",
    "distinctness",
    "target_rate",
    "mask_frac",
    "random_frac",
    "keep_frac",
];

#[derive(Args)]
pub struct TrainArgs {
    /// One document per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Directory for checkpoints, the step log and the resolved config.
    #[arg(long)]
    pub out: PathBuf,
    /// paper-small, paper-base or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Total schedule length in updates.
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from the latest checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Halt (with a checkpoint) after this many updates.
    #[arg(long)]
    pub stop_at: Option<u64>,
}

/// Everything a fresh run needs, resolved from presets, the config file and
/// overrides.
pub struct Resolved {
    pub model: ModelConfig,
    pub schedule: Schedule,
    pub train: TrainConfig,
    pub text: String,
}

pub fn resolve(cfg: &RunConfig) -> anyhow::Result<Resolved> {
    let preset: String = cfg.get("preset", "desk".to_string())?;
    let base = ModelConfig::preset(&preset)
        .ok_or_else(|| Invalid(format!("unknown preset {preset:?} (expected paper-small, paper-base or desk)")))?;
    let desk = preset == "desk";
    let model = ModelConfig {
        d_model: cfg.get("d_model", base.d_model)?,
        filter_size: cfg.get("filter_size", base.filter_size)?,
        n_heads: cfg.get("n_heads", base.n_heads)?,
        layers_disamb: cfg.get("layers_disamb", base.layers_disamb)?,
        layers_predict: cfg.get("layers_predict", base.layers_predict)?,
        seq_len: cfg.get("seq_len", base.seq_len)?,
        dropout: cfg.get("dropout", base.dropout)?,
        init_std: cfg.get("init_std", base.init_std)?,
        layer_norm_eps: cfg.get("layer_norm_eps", base.layer_norm_eps)?,
    };
    model.validate()?;

    let paper = Schedule::paper();
    let steps = cfg.get("steps", if desk { DESK_STEPS } else { paper.total_steps() })?;
    let lr = cfg.get("lr_peak", if desk { DESK_LR } else { paper.spec().lr_peak })?;
    let d = Schedule::scaled(steps, lr)?.spec().clone();
    let schedule = Schedule::new(ScheduleSpec {
        total_steps: steps,
        warmup_steps: cfg.get("warmup_steps", d.warmup_steps)?,
        lr_peak: lr,
        lambda_final: cfg.get("lambda_final", d.lambda_final)?,
        lambda_ramp_steps: cfg.get("lambda_ramp_steps", d.lambda_ramp_steps)?,
        r_start: cfg.get("r_start", d.r_start)?,
        r_final: cfg.get("r_final", d.r_final)?,
        r_ramp_steps: cfg.get("r_ramp_steps", d.r_ramp_steps)?,
    })?;

    let t = TrainConfig::default();
    let m = MaskingConfig::default();
    let clip = cfg.get("clip_norm", t.clip_norm.unwrap_or(0.0))?;
    let train = TrainConfig {
        batch_size: cfg.get("batch_size", if desk { DESK_BATCH } else { t.batch_size })?,
        seed: cfg.get("seed", t.seed)?,
        checkpoint_every: cfg.get("checkpoint_every", t.checkpoint_every)?,
        keep_checkpoints: cfg.get("keep_checkpoints", t.keep_checkpoints)?,
        clip_norm: (clip > 0.0).then_some(clip),
        distinctness: cfg.get("distinctness", t.distinctness)?,
        masking: MaskingConfig {
            target_rate: cfg.get("target_rate", m.target_rate)?,
            mask_frac: cfg.get("mask_frac", m.mask_frac)?,
            random_frac: cfg.get("random_frac", m.random_frac)?,
            keep_frac: cfg.get("keep_frac", m.keep_frac)?,
        },
        adam: t.adam,
    };
    train.validate()?;
    train.masking.validate()?;
    Ok(Resolved { model, schedule, train, text: cfg.resolved() })
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let (vocab, inventory) = read_vocab(&args.vocab)?;
    let docs = read_docs(&args.corpus)?;
    let encoded: Vec<Vec<TokenId>> = docs.iter().map(|d| vocab.encode_tokens(d)).collect();

    let mut trainer = if args.resume {
        if args.config.is_some()
            || !args.overrides.is_empty()
            || args.preset.is_some()
            || args.steps.is_some()
            || args.seed.is_some()
        {
            return Err(
                Invalid("--resume takes its configuration from the checkpoint; drop the other options".into()).into()
            );
        }
        let path = latest_checkpoint(&args.out)?
            .ok_or_else(|| Invalid(format!("no checkpoint to resume in {}", args.out.display())))?;
        let ckpt = Checkpoint::load(&path)?;
        if ckpt.model.vocab.tokens() != vocab.tokens() {
            return Err(Invalid("vocabulary file differs from the one the checkpoint was trained with".into()).into());
        }
        log::info!("resuming from {} at step {}", path.display(), ckpt.step);
        truncate_log(&args.out.join(LOG_FILE), ckpt.step)?;
        let data = pack_sequences(&encoded, ckpt.model.config.seq_len, ckpt.model.vocab.pad());
        Trainer::from_checkpoint(ckpt, data)?
    } else {
        let mut cfg = RunConfig::load(KEYS, args.config.as_deref(), &args.overrides)?;
        if let Some(p) = &args.preset {
            cfg.set("preset", p);
        }
        if let Some(s) = args.steps {
            cfg.set("steps", s);
        }
        if let Some(s) = args.seed {
            cfg.set("seed", s);
        }
        let r = resolve(&cfg)?;
        for line in r.text.lines() {
            log::info!("config: {line}");
        }
        if latest_checkpoint(&args.out).ok().flatten().is_some() || args.out.join(LOG_FILE).exists() {
            return Err(Invalid(format!(
                "{} already holds a run; use --resume or a fresh directory",
                args.out.display()
            ))
            .into());
        }
        fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
        fs::write(args.out.join(CONFIG_FILE), &r.text)?;
        let mut init = ChaCha8Rng::seed_from_u64(r.train.seed);
        init.set_stream(1);
        let model = PolyLm::new(r.model, vocab, inventory, &mut init)?;
        let data = pack_sequences(&encoded, model.config.seq_len, model.vocab.pad());
        log::info!(
            "{} windows, {} tokens in vocabulary, {} senses",
            data.len(),
            model.vocab.len(),
            model.inventory.total()
        );
        Trainer::new(model, data, r.schedule, r.train)?
    };

    let total = trainer.schedule.total_steps();
    let until = args.stop_at.unwrap_or(total).min(total);
    let mut log = TrainLog::append(&args.out.join(LOG_FILE))?;
    let every = (total / 20).max(1);
    let mut io_err = None;
    trainer.run(until, Some(&args.out), |rec| {
        if let Err(e) = log.write(rec) {
            io_err.get_or_insert(e);
        }
        if (rec.step + 1) % every == 0 {
            log::info!(
                "step {} lr {:.3e} J_LM {:.4} J_D {:.4} J_M {:.4}",
                rec.step + 1,
                rec.lr,
                rec.j_lm,
                rec.j_d,
                rec.j_m
            );
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log::info!("stopped at step {} of {total}", trainer.step());
    Ok(())
}

/// Drops log lines for steps at or beyond `step`, which a resumed run
/// will write again.
fn truncate_log(path: &Path, step: u64) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::io::read_to_string(open(path)?)?;
    let mut kept = String::new();
    for (i, line) in text.lines().enumerate() {
        let keep = i == 0 || line.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < step);
        if keep {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}
