use std::path::{Path, PathBuf};

use thermvis::dataio::{encode_png8, generate_synthetic_dataset, load_dataset, read_dataset, write_dataset, write_file};
use thermvis::quality::{evaluate_quality_with, QualityReport};
use thermvis::training::{prepare_records, synthesize_with, train as train_run, TrainState};
use thermvis::verify::{evaluate_verification_with, ProbeSource, VerificationReport};
use thermvis::{Ablation, DatasetSplit, Protocol, TrainConfig};

use crate::error::{io_err, CliError};
use crate::manifest::{self, Artifacts, RunManifest};
use crate::table::{fmt_db, fmt_percent, fmt_ratio, Table};
use crate::{AblateArgs, ConfigArgs, EvalArgs, EvalMode, GenDataArgs, ReplayArgs, SynthArgs, TrainArgs};

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn create_dir(p: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(p).map_err(io_err(p))
}

fn parse_protocol(s: &str) -> Result<Protocol, CliError> {
    Ok(s.parse::<Protocol>()?)
}

fn read_split(dir: &Path) -> Result<DatasetSplit, CliError> {
    if !dir.is_dir() {
        return Err(CliError::user(format!("dataset directory {} does not exist", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

fn build_config(args: &ConfigArgs, ablation: Option<&str>) -> Result<TrainConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::from_file(p)?,
        None => TrainConfig::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::user(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(p) = &args.protocol {
        cfg.protocol = parse_protocol(p)?;
    }
    if let Some(s) = args.steps {
        cfg.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(a) = ablation {
        cfg.ablation = Some(a.parse::<Ablation>()?);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn gen_data(root: &Path, a: GenDataArgs) -> Result<(), CliError> {
    if a.subjects < 2 {
        return Err(CliError::user(format!("--subjects must be at least 2, got {}", a.subjects)));
    }
    let out = a.out.unwrap_or_else(|| root.join("data"));
    let split = generate_synthetic_dataset(a.seed, a.subjects, a.samples, a.side)?;
    write_dataset(&out, &split)?;
    println!(
        "wrote {} records ({} train, {} test) to {}",
        split.train.len() + split.test.len(),
        split.train.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

fn write_manifest(m: &RunManifest, dir: &Path) -> Result<(), CliError> {
    m.write(dir)?;
    match m.missing_artifacts().first() {
        Some(p) => Err(CliError::Internal(format!("run manifest references missing artifact {}", p.display()))),
        None => Ok(()),
    }
}

/// Trains one configuration into `out` and writes its run manifest.
fn run_training(cfg: &TrainConfig, data_dir: &Path, split: &DatasetSplit, out: &Path) -> Result<(RunManifest, TrainState), CliError> {
    create_dir(out)?;
    let config_path = out.join("config.txt");
    write_file(&config_path, cfg.to_text().as_bytes())?;
    let run = train_run(cfg, split, out)?;
    let final_checkpoint = match run.checkpoints.last() {
        Some(p) => p.clone(),
        None => {
            let p = thermvis::training::checkpoint_path(out, run.state.step);
            run.state.save(&p)?;
            p
        }
    };
    let m = RunManifest {
        run_id: RunManifest::run_id(cfg),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        dataset: absolute(data_dir),
        config: cfg.clone(),
        artifacts: Artifacts {
            checkpoints: run.checkpoints.iter().map(|p| absolute(p)).collect(),
            final_checkpoint: absolute(&final_checkpoint),
            trace: absolute(&run.trace_path),
            config: absolute(&config_path),
            reports: Vec::new(),
        },
    };
    write_manifest(&m, out)?;
    let last = run.trace.last().map(|(_, r)| r.total).unwrap_or(f64::NAN);
    println!("run {}: {} steps, final total loss {last:.6}, output in {}", m.run_id, run.state.step, out.display());
    Ok((m, run.state))
}

pub fn train(root: &Path, a: TrainArgs) -> Result<(), CliError> {
    let cfg = build_config(&a.config, a.ablation.as_deref())?;
    let split = read_split(&a.data)?;
    if a.all_protocols {
        let out = a.out.unwrap_or_else(|| root.join("runs").join("all-protocols"));
        for p in Protocol::ALL {
            let c = TrainConfig { protocol: p, ..cfg.clone() };
            run_training(&c, &a.data, &split, &out.join(p.name()))?;
        }
        return Ok(());
    }
    let out = a.out.unwrap_or_else(|| root.join("runs").join(RunManifest::run_id(&cfg)));
    run_training(&cfg, &a.data, &split, &out)?;
    Ok(())
}

struct Evaluation {
    quality: Option<QualityReport>,
    verification: Option<VerificationReport>,
    raw: Option<VerificationReport>,
    files: Vec<PathBuf>,
}

fn check_channels(state: &TrainState, protocol: Protocol) -> Result<(), CliError> {
    let want = state.generator.config.in_channels;
    if want != protocol.input_channels() {
        return Err(CliError::user(format!(
            "checkpoint expects {want} input channel(s) but protocol {protocol} provides {}",
            protocol.input_channels()
        )));
    }
    Ok(())
}

/// Writes the reports for one checkpoint under `out`.
fn evaluate(state: &TrainState, split: &DatasetSplit, protocol: Protocol, mode: EvalMode, out: &Path) -> Result<Evaluation, CliError> {
    check_channels(state, protocol)?;
    create_dir(out)?;
    let test = prepare_records(&split.test, state.config.image_side)?;
    let dog = &state.config.dog;
    let mut ev = Evaluation {
        quality: None,
        verification: None,
        raw: None,
        files: Vec::new(),
    };
    if mode != EvalMode::Verify {
        let q = evaluate_quality_with(&state.generator, &test, protocol, dog)?;
        let (csv, json) = (out.join("quality.csv"), out.join("quality.json"));
        q.write_csv(&csv)?;
        q.write_json(&json)?;
        ev.files.extend([csv, json]);
        ev.quality = Some(q);
    }
    if mode != EvalMode::Quality {
        let v = evaluate_verification_with(ProbeSource::Generator(&state.generator), &test, protocol, &state.identity, dog)?;
        let (csv, json) = (out.join("roc.csv"), out.join("verification.json"));
        v.roc.write_csv(&csv)?;
        v.write_json(&json)?;
        ev.files.extend([csv, json]);
        ev.verification = Some(v);
        ev.raw = Some(evaluate_verification_with(ProbeSource::Raw, &test, protocol, &state.identity, dog)?);
    }
    Ok(ev)
}

fn summary_row(label: String, ev: &Evaluation) -> Vec<String> {
    let dash = || "-".to_string();
    let q = ev.quality.as_ref();
    let v = ev.verification.as_ref();
    let r = ev.raw.as_ref();
    vec![
        label,
        q.map_or_else(dash, |q| fmt_db(q.mean_psnr)),
        q.map_or_else(dash, |q| fmt_ratio(q.mean_ssim)),
        v.map_or_else(dash, |v| fmt_percent(v.auc)),
        v.map_or_else(dash, |v| fmt_percent(v.eer)),
        r.map_or_else(dash, |v| fmt_percent(v.auc)),
        r.map_or_else(dash, |v| fmt_percent(v.eer)),
    ]
}

const SUMMARY_HEADER: [&str; 7] = ["", "PSNR (dB)", "SSIM", "AUC", "EER", "Raw AUC", "Raw EER"];

pub fn eval(root: &Path, a: EvalArgs) -> Result<(), CliError> {
    let split = read_split(&a.data)?;
    let mut table = Table::new(&SUMMARY_HEADER);
    if a.all_protocols {
        let runs = a.runs.expect("clap requires --runs");
        let out = a.out.unwrap_or_else(|| root.join("eval").join("all-protocols"));
        for p in Protocol::ALL {
            let m = RunManifest::read(&runs.join(p.name()).join(manifest::FILE_NAME))?;
            let state = TrainState::load(&m.artifacts.final_checkpoint)?;
            if state.config.protocol != p {
                return Err(CliError::user(format!(
                    "run under {} was trained for {}",
                    runs.join(p.name()).display(),
                    state.config.protocol
                )));
            }
            let ev = evaluate(&state, &split, p, a.mode, &out.join(p.name()))?;
            table.row(summary_row(p.table_label().into(), &ev));
        }
        print!("{}", table.render());
        return Ok(());
    }
    let ckpt = a.checkpoint.expect("clap requires --checkpoint");
    let state = TrainState::load(&ckpt)?;
    let protocol = match &a.protocol {
        Some(p) => parse_protocol(p)?,
        None => state.config.protocol,
    };
    let out = a.out.unwrap_or_else(|| root.join("eval").join(protocol.name()));
    let ev = evaluate(&state, &split, protocol, a.mode, &out)?;
    table.row(summary_row(protocol.table_label().into(), &ev));
    print!("{}", table.render());
    for f in &ev.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

pub fn ablate(root: &Path, a: AblateArgs) -> Result<(), CliError> {
    let base = build_config(&a.config, None)?;
    let split = read_split(&a.data)?;
    let out = a.out.unwrap_or_else(|| root.join("ablate").join(base.protocol.name()));
    let mut table = Table::new(&SUMMARY_HEADER);
    let mut csv = String::from("ablation,psnr_db,ssim,auc,eer,roc_csv\n");
    for ab in Ablation::ALL {
        let cfg = TrainConfig {
            ablation: Some(ab),
            ..base.clone()
        };
        let dir = out.join(thermvis::training::ablation_dir_name(ab));
        let (mut m, state) = run_training(&cfg, &a.data, &split, &dir)?;
        let ev = evaluate(&state, &split, cfg.protocol, EvalMode::Both, &dir)?;
        m.artifacts.reports = ev.files.iter().map(|p| absolute(p)).collect();
        write_manifest(&m, &dir)?;
        let (q, v) = (ev.quality.as_ref().unwrap(), ev.verification.as_ref().unwrap());
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            ab.label(),
            q.mean_psnr,
            q.mean_ssim,
            v.auc,
            v.eer,
            absolute(&dir.join("roc.csv")).display()
        ));
        table.row(summary_row(ab.label().into(), &ev));
    }
    let summary = out.join("ablation_summary.csv");
    write_file(&summary, csv.as_bytes())?;
    print!("{}", table.render());
    println!("wrote {}", summary.display());
    Ok(())
}

pub fn synthesize(root: &Path, a: SynthArgs) -> Result<(), CliError> {
    let state = TrainState::load(&a.checkpoint)?;
    let protocol = match &a.protocol {
        Some(p) => parse_protocol(p)?,
        None => state.config.protocol,
    };
    check_channels(&state, protocol)?;
    let manifest_path = a.input.join("manifest.csv");
    let records = load_dataset(&a.input, &manifest_path)?;
    let records = prepare_records(&records, state.config.image_side)?;
    let images = synthesize_with(&state.generator, &records, protocol, &state.config.dog)?;
    let out = a.out.unwrap_or_else(|| root.join("synth").join(protocol.name()));
    create_dir(&out)?;
    for (rec, img) in records.iter().zip(&images) {
        write_file(&out.join(format!("{}.png", rec.sample_id)), &encode_png8(img))?;
    }
    println!("wrote {} images to {}", images.len(), out.display());
    Ok(())
}

pub fn replay(root: &Path, a: ReplayArgs) -> Result<(), CliError> {
    let m = RunManifest::read(&a.manifest)?;
    let split = read_split(&m.dataset)?;
    let out = a.out.unwrap_or_else(|| root.join("replay").join(&m.run_id));
    let (again, _) = run_training(&m.config, &m.dataset, &split, &out)?;
    if !m.artifacts.trace.exists() {
        println!("original trace {} not found; replay not compared", m.artifacts.trace.display());
        return Ok(());
    }
    let before = std::fs::read(&m.artifacts.trace).map_err(io_err(&m.artifacts.trace))?;
    let after = std::fs::read(&again.artifacts.trace).map_err(io_err(&again.artifacts.trace))?;
    if before != after {
        return Err(CliError::Internal(format!(
            "replayed trace {} differs from {}",
            again.artifacts.trace.display(),
            m.artifacts.trace.display()
        )));
    }
    println!("replay of {} reproduced {} identically", m.run_id, m.artifacts.trace.display());
    Ok(())
}
