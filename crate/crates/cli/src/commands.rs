use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use rrn_core::data::{
    load_dataset, save_dataset, split_train_test, synthesize, DataFormat, Dataset, SynthConfig,
};
use rrn_core::eval::{rank_profile, AlignOptions};
use rrn_core::model::load_model;
use rrn_core::trainer::{
    evaluate_with, predict_all, robustness_sweep, train_with, TrainConfig, TrainHooks,
};
use rrn_core::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::args::{Cli, Command, DatasetArgs, EvalArgs, ExportArgs, RankArgs, SweepArgs, SynthArgs, TrainArgs};

pub const LOG_FILE: &str = "train.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let sub = matches.subcommand().map(|(_, m)| m);
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a, sub.expect("subcommand matches")),
        Command::Eval(a) => eval(a),
        Command::ExportRepr(a) => export_repr(a),
        Command::Sweep(a) => sweep(a),
        Command::Rank(a) => rank(a),
    }
}

fn format_of(path: &Path, format: Option<DataFormat>) -> DataFormat {
    format.unwrap_or_else(|| DataFormat::from_path(path))
}

fn load(args: &DatasetArgs) -> Result<(Dataset, DataFormat)> {
    let format = format_of(&args.dataset, args.format);
    Ok((load_dataset(&args.dataset, format)?, format))
}

fn synth(a: SynthArgs) -> Result<()> {
    let syn = synthesize(&SynthConfig {
        points: a.p,
        frames: a.f,
        bases: a.k,
        camera_seed: a.camera_seed,
        shape_seed: a.shape_seed,
        noise_ratio: a.noise,
    })?;
    save_dataset(&syn.dataset, &a.out, format_of(&a.out, a.format))?;
    println!(
        "wrote {} frames of {} points to {}",
        syn.dataset.len(),
        syn.dataset.points(),
        a.out.display()
    );
    Ok(())
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn read_config(path: Option<&Path>) -> Result<TrainConfig> {
    let Some(path) = path else {
        return Ok(TrainConfig::default());
    };
    TrainConfig::from_toml(&fs::read_to_string(path)?).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// Config file (or defaults), then the ablation, then explicit flags.
pub fn resolve_config(a: &TrainArgs, m: &ArgMatches) -> Result<TrainConfig> {
    let mut cfg = read_config(a.config.as_deref())?;
    if a.config.is_none() || explicit(m, "ablation") {
        a.ablation.apply(&mut cfg);
    }
    macro_rules! set {
        ($($field:ident),*) => {
            $(if explicit(m, stringify!($field)) {
                cfg.$field = a.$field.clone();
            })*
        };
    }
    set!(
        epochs, lr, decay, batch, lambda1, lambda2, tau, xi, bank, block, recursion, seed,
        checkpoint_every, eval_every, channels, rot_layers
    );
    if a.joint {
        cfg.joint = true;
    }
    if a.random_rotation {
        cfg.random_rotation = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct DatasetInfo {
    path: PathBuf,
    format: DataFormat,
    sha256: String,
    name: String,
    frames: usize,
    points: usize,
}

#[derive(Serialize)]
struct Artifacts {
    log: &'static str,
    config: &'static str,
    checkpoints: &'static str,
    final_checkpoint: String,
}

/// Everything needed to repeat a training run.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    ablation: String,
    seed: u64,
    parameters: usize,
    split: f64,
    train_frames: usize,
    test_frames: usize,
    dataset: DatasetInfo,
    config: TrainConfig,
    artifacts: Artifacts,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn train(a: TrainArgs, m: &ArgMatches) -> Result<()> {
    let cfg = resolve_config(&a, m)?;
    let (ds, format) = load(&a.data)?;
    let (train_ds, test_ds) = if a.split >= 1.0 {
        (ds.clone(), None)
    } else {
        let (tr, te) = split_train_test(&ds, a.split)?;
        (tr, Some(te))
    };
    let checkpoints = a.out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&checkpoints)?;
    let parameters = cfg.arch(ds.points()).parameter_count();
    println!("{} model with {parameters} parameters", a.ablation);

    let manifest = RunManifest {
        tool: "rrn",
        version: env!("CARGO_PKG_VERSION"),
        ablation: a.ablation.to_string(),
        seed: cfg.seed,
        parameters,
        split: a.split,
        train_frames: train_ds.len(),
        test_frames: test_ds.as_ref().map_or(0, Dataset::len),
        dataset: DatasetInfo {
            path: a.data.dataset.clone(),
            format,
            sha256: sha256_hex(&fs::read(&a.data.dataset)?),
            name: ds.name().to_string(),
            frames: ds.len(),
            points: ds.points(),
        },
        config: cfg.clone(),
        artifacts: Artifacts {
            log: LOG_FILE,
            config: CONFIG_FILE,
            checkpoints: CHECKPOINT_DIR,
            final_checkpoint: format!("{CHECKPOINT_DIR}/final.json"),
        },
    };
    fs::write(a.out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    fs::write(a.out.join(CONFIG_FILE), cfg.to_toml()?)?;

    let mut log = BufWriter::new(fs::File::create(a.out.join(LOG_FILE))?);
    let hooks = TrainHooks {
        test: test_ds.as_ref(),
        checkpoint_dir: Some(&checkpoints),
        log: Some(&mut log),
    };
    let out = train_with(&train_ds, &cfg, hooks)?;
    log.flush()?;
    if let Some(last) = out.log.last() {
        let score = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.6}"));
        println!(
            "trained {} epochs ({}): reproj {:.6}, e3D train {}, test {}",
            out.log.len(),
            a.ablation,
            last.loss_reproj,
            score(last.e3d_train),
            score(last.e3d_test)
        );
    } else {
        println!("trained 0 epochs ({})", a.ablation);
    }
    println!("checkpoint: {}", checkpoints.join("final.json").display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (ds, _) = load(&a.data)?;
    let opts = AlignOptions {
        reflection: !a.no_reflection,
        scale: a.scale,
    };
    let report = evaluate_with(&model, &ds, opts)?;
    if let Some(out) = &a.out {
        fs::write(out, report.to_json()? + "\n")?;
    }
    let reflected = report.reflections.iter().filter(|&&r| r).count();
    println!(
        "mean e3D {:.6} over {} frames ({reflected} reflected)",
        report.mean, report.count
    );
    Ok(())
}

fn export_repr(a: ExportArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let (ds, _) = load(&a.data)?;
    let preds = predict_all(&model, &ds)?;
    let d = model.arch.repr_dim();
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&a.out).map_err(to_io)?;
    let mut header = vec!["frame".to_string()];
    header.extend((0..d).map(|k| format!("h{k}")));
    w.write_record(&header).map_err(to_io)?;
    for (f, p) in ds.frames().iter().zip(&preds) {
        let mut row = vec![f.index().to_string()];
        row.extend(p.repr.unit.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush()?;
    println!("wrote {} representations of dimension {d} to {}", preds.len(), a.out.display());
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = read_config(a.config.as_deref())?;
    a.ablation.apply(&mut cfg);
    let (ds, _) = load(&a.data)?;
    let rows = robustness_sweep(&ds, &cfg, &a.noise, &a.keep, a.split)?;
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&a.out).map_err(to_io)?;
    for r in &rows {
        w.serialize(r).map_err(to_io)?;
        println!("{} {}: e3D test {:.6}", r.setting, r.value, r.e3d_test);
    }
    w.flush()?;
    Ok(())
}

fn rank(a: RankArgs) -> Result<()> {
    let (ds, _) = load(&a.data)?;
    println!("{}", serde_json::to_string_pretty(&rank_profile(&ds))?);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::{CommandFactory, FromArgMatches};

    fn parse(args: &[&str]) -> (TrainArgs, ArgMatches) {
        let m = Cli::command().try_get_matches_from(args).unwrap();
        let cli = Cli::from_arg_matches(&m).unwrap();
        let sub = m.subcommand_matches("train").unwrap().clone();
        match cli.command {
            Command::Train(a) => (a, sub),
            _ => unreachable!(),
        }
    }

    #[test]
    fn flag_defaults_match_config_defaults() {
        let (a, m) = parse(&["rrn", "train", "--dataset", "d.json", "--out", "o"]);
        let cfg = resolve_config(&a, &m).unwrap();
        assert_eq!(cfg, TrainConfig::default());
        // The flag defaults shown in --help are the config defaults.
        let d = TrainConfig::default();
        assert_eq!((a.epochs, a.lr, a.decay, a.batch), (d.epochs, d.lr, d.decay, d.batch));
        assert_eq!((a.lambda1, a.lambda2, a.tau, a.xi), (d.lambda1, d.lambda2, d.tau, d.xi));
        assert_eq!((a.bank, a.block, a.recursion, a.seed), (d.bank, d.block, d.recursion, d.seed));
        assert_eq!((a.channels, a.rot_layers), (d.channels, d.rot_layers));
        assert_eq!((a.checkpoint_every, a.eval_every), (d.checkpoint_every, d.eval_every));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "epochs = 5\nlr = 0.01\nconsist = false\n").unwrap();
        let p = path.to_str().unwrap();
        let (a, m) = parse(&["rrn", "train", "--dataset", "d", "--out", "o", "--config", p, "--lr", "0.02"]);
        let cfg = resolve_config(&a, &m).unwrap();
        assert_eq!((cfg.epochs, cfg.lr), (5, 0.02));
        assert!(!cfg.consist, "file setting kept without an explicit --ablation");
        let (a, m) = parse(&["rrn", "train", "--dataset", "d", "--out", "o", "--config", p, "--ablation", "rrn"]);
        let cfg = resolve_config(&a, &m).unwrap();
        assert!(!cfg.contrast && !cfg.consist);
        let (a, m) = parse(&["rrn", "train", "--dataset", "d", "--out", "o", "--channels", "16,8"]);
        assert_eq!(resolve_config(&a, &m).unwrap().channels, vec![16, 8]);
    }
}
