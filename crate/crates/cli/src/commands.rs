use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use trajformer::checkpoint::{load_checkpoint, save_checkpoint};
use trajformer::data::{
    batchify, generate_synthetic, prefetch, split_stream, stream_jsonl, write_jsonl_to, DataError,
    Split,
};
use trajformer::eval::{evaluate, rollout, EvalMode, ModelPredictor};
use trajformer::geo::{featurize, CenterAccumulator, NormalizationParams, Trajectory};
use trajformer::train::{history_csv, pretext_autoencoder_check, BatchIter, Objective, Trainer};
use trajformer::Checkpoint;

use crate::args::{
    EvalArgs, FitNormArgs, Format, ModeArg, ObjectiveArg, PretextArgs, RolloutArgs, SynthArgs,
    TrainArgs,
};
use crate::error::CliError;
use crate::settings::{set, FileConfig};

type Outcome = Result<(), CliError>;

/// Batches read ahead of the training step.
const PREFETCH_DEPTH: usize = 4;
const LOG_EVERY: u64 = 10;

fn io_error(path: &Path, e: io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| io_error(p, e))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn emit(path: Option<&Path>, text: &str) -> Outcome {
    let mut out = output(path)?;
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| io_error(path.unwrap_or(Path::new("<stdout>")), e))
}

fn read_norm(path: &Path) -> Result<NormalizationParams, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let norm: NormalizationParams = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    norm.validate()?;
    Ok(norm)
}

fn fit_norm_over(
    trajs: impl Iterator<Item = Result<Trajectory, DataError>>,
) -> Result<NormalizationParams, CliError> {
    let mut acc = CenterAccumulator::default();
    for t in trajs {
        t?.points().iter().for_each(|p| acc.push(p));
    }
    Ok(acc.finish()?)
}

pub fn synth(args: SynthArgs) -> Outcome {
    let mut cfg = FileConfig::load(args.config.config.as_deref())?.synthetic;
    set(&mut cfg.n_traj, args.n_traj);
    set(&mut cfg.points_per_traj, args.points);
    set(&mut cfg.n_waypoints, args.waypoints);
    set(&mut cfg.noise_sigma, args.noise);
    set(&mut cfg.seed, args.seed);
    let trajs = generate_synthetic(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let file = File::create(&args.out).map_err(|e| io_error(&args.out, e))?;
    let mut out = BufWriter::new(file);
    let mut n = 0;
    for t in trajs {
        n += write_jsonl_to(&mut out, [&t]).map_err(|e| io_error(&args.out, e))?;
    }
    out.flush().map_err(|e| io_error(&args.out, e))?;
    info!("wrote {n} trajectories to {}", args.out.display());
    Ok(())
}

pub fn fit_norm(args: FitNormArgs) -> Outcome {
    FileConfig::load(args.config.config.as_deref())?;
    let norm = fit_norm_over(stream_jsonl(&args.data)?)?;
    let json = serde_json::to_string_pretty(&norm).expect("normalization serializes");
    emit(args.out.as_deref(), &format!("{json}\n"))
}

fn objective(arg: ObjectiveArg) -> Objective {
    match arg {
        ObjectiveArg::NextStep => Objective::NextStep,
        ObjectiveArg::Infill => Objective::Infill,
        ObjectiveArg::Alternating => Objective::Alternating,
    }
}

fn split_batches(
    data: PathBuf,
    which: Split,
    trainer: &Trainer<f64>,
) -> impl FnMut() -> Result<BatchIter<'static>, DataError> {
    let (fraction, seed) = (trainer.config.val_fraction, trainer.config.seed);
    let (batch_size, s_max, norm) = (
        trainer.config.batch_size,
        trainer.config.s_max,
        trainer.norm,
    );
    move || {
        let trajs = split_stream(stream_jsonl(&data)?, which, fraction, seed);
        let batches = batchify(trajs, batch_size, s_max, norm)?;
        Ok(Box::new(prefetch(batches, PREFETCH_DEPTH)))
    }
}

pub fn train(args: TrainArgs) -> Outcome {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let mut trainer = match &args.resume {
        Some(path) => {
            let t = load_checkpoint::<f64>(path)?.into_trainer()?;
            info!("resuming from {} at step {}", path.display(), t.step());
            t
        }
        None => {
            let mut model = file.model;
            set(&mut model.d_model, args.d_model);
            set(&mut model.n_heads, args.n_heads);
            set(&mut model.n_blocks, args.n_blocks);
            set(&mut model.rope, args.rope);
            set(&mut model.patch_len, args.patch_len);
            let mut cfg = file.train;
            set(&mut cfg.lr, args.lr);
            set(&mut cfg.batch_size, args.batch_size);
            set(&mut cfg.s_max, args.s_max);
            set(&mut cfg.objective, args.objective.map(objective));
            set(&mut cfg.mask_ratio, args.mask_ratio);
            set(&mut cfg.val_fraction, args.val_fraction);
            set(&mut cfg.seed, args.seed);
            let norm = match &args.norm {
                Some(p) => read_norm(p)?,
                None => fit_norm_over(split_stream(
                    stream_jsonl(&args.data)?,
                    Split::Train,
                    cfg.val_fraction,
                    cfg.seed,
                ))?,
            };
            Trainer::new(model, cfg, norm).map_err(|e| CliError::Usage(e.to_string()))?
        }
    };
    set(&mut trainer.config.epochs, args.epochs);
    if args.max_steps.is_some() {
        trainer.config.max_steps = args.max_steps;
    }
    let start = trainer.step();

    let mut train_batches = split_batches(args.data.clone(), Split::Train, &trainer);
    let mut val_batches = split_batches(args.data.clone(), Split::Validation, &trainer);
    let has_val = trainer.config.val_fraction > 0.0;
    let mut last = None;
    trainer.fit(
        &mut train_batches,
        has_val.then_some(&mut val_batches as &mut dyn FnMut() -> _),
        |r| {
            if r.step % LOG_EVERY == 0 {
                info!(
                    "step {} loss {:.6e} grad norm {:.3e}",
                    r.step, r.loss, r.grad_norm
                );
            }
            last = Some(r.loss);
        },
    )?;
    if trainer.step() == start && args.resume.is_none() {
        return Err(CliError::Data(format!(
            "no training batches in {}",
            args.data.display()
        )));
    }

    save_checkpoint(&Checkpoint::from_trainer(&trainer), &args.out)?;
    if let Some(path) = &args.history {
        emit(Some(path), &history_csv(&trainer.history))?;
    }
    let summary = serde_json::json!({
        "checkpoint": args.out,
        "steps": trainer.step(),
        "epochs": trainer.epoch,
        "last_loss": last,
        "history": trainer.history,
    });
    println!("{summary}");
    Ok(())
}

pub fn eval(args: EvalArgs) -> Outcome {
    let settings = FileConfig::load(args.config.config.as_deref())?.eval;
    let ckpt = load_checkpoint::<f64>(&args.checkpoint)?;
    let model = ckpt.model()?;
    let dataset_norm = match &args.norm {
        Some(p) => read_norm(p)?,
        None => ckpt.normalization,
    };
    let mode_name = match args.mode {
        Some(ModeArg::NextStep) => "next_step",
        Some(ModeArg::Infill) => "infill",
        Some(ModeArg::Rollout) => "rollout",
        None => settings.mode.as_str(),
    };
    let ratio = args.mask_ratio.unwrap_or(settings.mask_ratio);
    let seed = args.seed.unwrap_or(settings.seed);
    let mode = match mode_name {
        "next_step" => EvalMode::NextStep,
        "infill" => EvalMode::Infill { ratio, seed },
        "rollout" => EvalMode::Rollout {
            horizon: args.horizon.unwrap_or(settings.horizon),
        },
        other => return Err(CliError::Usage(format!("unknown eval mode {other:?}"))),
    };
    let batch_size = args.batch_size.unwrap_or(settings.batch_size);
    let s_max = model.config().max_seq * model.config().patch_len;
    let batches = batchify(stream_jsonl(&args.data)?, batch_size, s_max, dataset_norm)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let predictor = ModelPredictor {
        model: &model,
        normalization: ckpt.normalization,
    };
    let report = evaluate(&predictor, batches, &dataset_norm, mode)?;
    if !(report.ade_m.is_finite() && report.fde_m.is_finite() && report.time_mae_s.is_finite()) {
        return Err(CliError::Numeric(format!(
            "non-finite metrics: {}",
            report.to_json()
        )));
    }
    let text = match args.format {
        Format::Json => format!("{}\n", report.to_json()),
        Format::Csv => report.to_csv(),
    };
    emit(args.out.as_deref(), &text)
}

pub fn rollout_cmd(args: RolloutArgs) -> Outcome {
    let ckpt = load_checkpoint::<f64>(&args.checkpoint)?;
    let model = ckpt.model()?;
    let predictor = ModelPredictor {
        model: &model,
        normalization: ckpt.normalization,
    };
    let budget = model.config().max_seq * model.config().patch_len;
    let longest = (budget + 1).saturating_sub(args.horizon);
    let mut out = output(args.out.as_deref())?;
    let out_name = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("<stdout>"));
    for traj in stream_jsonl(&args.data)? {
        let traj = traj?;
        let keep = args
            .prefix
            .unwrap_or(traj.len())
            .min(traj.len())
            .min(longest);
        if keep < 2 {
            warn!("skipping {}: prefix of {keep} points", traj.id);
            continue;
        }
        let prefix = traj.prefix(keep)?;
        let predicted = rollout(&predictor, &prefix, args.horizon)?;
        let mut points = prefix.into_points();
        points.extend(predicted);
        let extended = Trajectory::new(traj.id, points)?;
        write_jsonl_to(&mut out, [&extended]).map_err(|e| io_error(&out_name, e))?;
    }
    out.flush().map_err(|e| io_error(&out_name, e))
}

pub fn pretext(args: PretextArgs) -> Outcome {
    let file = FileConfig::load(args.config.config.as_deref())?;
    let mut cfg = file.pretext;
    set(&mut cfg.steps, args.steps);
    set(&mut cfg.lr, args.lr);
    set(&mut cfg.seed, args.seed);
    let trajs: Vec<Trajectory> = match &args.data {
        Some(path) => stream_jsonl(path)?.collect::<Result<_, _>>()?,
        None => generate_synthetic(&file.synthetic)
            .map_err(|e| CliError::Usage(e.to_string()))?
            .collect(),
    };
    let norm = trajformer::geo::compute_center(&trajs)?;
    let sequences: Vec<_> = trajs.iter().map(|t| featurize(t, &norm).features).collect();
    let report =
        pretext_autoencoder_check(&sequences, &cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    println!(
        "{}",
        serde_json::to_string(&report).expect("report serializes")
    );
    let worst = report.rmse_raw.max(report.rmse_with_pe);
    if !worst.is_finite() {
        return Err(CliError::Numeric("non-finite reconstruction error".into()));
    }
    match args.max_rmse {
        Some(limit) if worst >= limit => Err(CliError::Numeric(format!(
            "RMSE {worst:.3e} reaches {limit:.3e}"
        ))),
        _ => Ok(()),
    }
}
