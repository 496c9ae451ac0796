use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hsta::checkpoint;
use hsta::data::{self, mix_seed, Dataset};
use hsta::eval::{self, Metrics, Protocol};
use hsta::experiment::{self, ExperimentConfig};
use hsta::gradcheck::{self, REL_TOLERANCE, SUITE_MODELS};
use hsta::model::HstaModel;
use hsta::tape::OpKind;
use hsta::train::{self, TrainConfig};
use sha2::{Digest, Sha256};

use crate::{Common, CrossvalArgs, Failure, GradcheckArgs, ProtocolArg, ReportArgs, TrainArgs};

type Outcome = Result<(), Failure>;

const CONFIG_FILE: &str = "config.toml";
const REPORT_FILE: &str = "report.txt";
const PREDICTIONS_FILE: &str = "predictions.csv";

fn runtime(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime(dir, e))?;
    }
    fs::write(path, text).map_err(|e| runtime(path, e))
}

fn split_assignment(arg: &str) -> Result<(&str, &str), Failure> {
    arg.split_once('=')
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| Failure::Invalid(format!("expected KEY=VALUE, got {arg:?}")))
}

/// Config file, then `--seed`, then each `--set` in order.
fn load_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| runtime(path, e))?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for arg in &common.overrides {
        let (key, value) = split_assignment(arg)?;
        cfg = cfg.with_override(key, value)?;
    }
    Ok(cfg)
}

/// Adopts the generator settings stored with the dataset.
fn bind_dataset(cfg: &mut ExperimentConfig, dataset: &Dataset) {
    if cfg.data != dataset.spec {
        eprintln!("note: using the generator settings stored with the dataset");
        cfg.data = dataset.spec.clone();
    }
}

/// SHA-256 over the dataset description, the manifest and every payload,
/// in file-name order.
fn dataset_digest(dir: &Path) -> Result<String, Failure> {
    let clips = dir.join("clips");
    let mut payloads: Vec<PathBuf> = fs::read_dir(&clips)
        .map_err(|e| runtime(&clips, e))?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| runtime(&clips, e))?;
    payloads.sort();
    let mut files = vec![dir.join(data::DATASET_SPEC_FILE), dir.join(data::MANIFEST_FILE)];
    files.extend(payloads);
    let mut hasher = Sha256::new();
    for path in &files {
        let name = path.strip_prefix(dir).unwrap_or(path);
        hasher.update(name.to_string_lossy().as_bytes());
        hasher.update(fs::read(path).map_err(|e| runtime(path, e))?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn gen(common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.data.seed = seed;
    }
    cfg.data.validate()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let dataset = data::generate_dataset(&cfg.data)?;
    data::write_dataset(&out, &dataset)?;
    let spec = &dataset.spec;
    let counts: Vec<String> = dataset.class_counts().iter().map(usize::to_string).collect();
    println!("wrote {} clips to {}", dataset.clips.len(), out.display());
    println!("subjects {} ({} clips each)", spec.num_subjects, spec.clips_per_subject);
    println!("classes {} (clips per class: {})", spec.num_classes, counts.join(" "));
    println!(
        "frames {} of {}x{}x{}, amplitude {}, noise {}",
        spec.frames, spec.height, spec.width, spec.channels, spec.amplitude, spec.noise
    );
    println!("sha256 {}", dataset_digest(&out)?);
    Ok(())
}

pub fn train(common: &Common, args: &TrainArgs) -> Outcome {
    let mut cfg = load_config(common)?;
    if args.checkpoint_every == Some(0) {
        return Err(Failure::Invalid("--checkpoint-every must be at least 1".into()));
    }
    let dataset = data::read_dataset(&args.data)?;
    bind_dataset(&mut cfg, &dataset);
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
    write(&out.join(CONFIG_FILE), &cfg.to_toml())?;

    let samples = train::clip_samples(&dataset.clips, &cfg.model.geometry)?;
    let ids: Vec<usize> = (0..samples.len()).collect();
    let mut model = HstaModel::new(cfg.model.clone(), mix_seed(cfg.seed, 0))?;
    let train_cfg = TrainConfig {
        seed: mix_seed(cfg.seed, 1),
        ..cfg.train.clone()
    };
    let started = Instant::now();
    let log = train::train_with(&mut model, &samples, &ids, &train_cfg, |e, m| {
        let done = e.epoch + 1;
        eprintln!("epoch {done:>4}  loss {:.6}  lr {:.3e}", e.mean_loss, e.lr);
        match args.checkpoint_every {
            Some(n) if done.is_multiple_of(n) => checkpoint::save(&out.join(format!("checkpoint-epoch-{done:04}")), m),
            _ => Ok(()),
        }
    })?;
    write(&out.join("loss.log"), &log.to_text())?;
    checkpoint::save(&out.join("checkpoint"), &model)?;

    let predictions = train::predict_all(&model, &samples, &ids)?;
    let fit = eval::aggregate_over_folds(
        &[eval::FoldOutcome {
            predictions,
            labels: dataset.labels(),
        }],
        cfg.model.num_classes,
    )?;
    if let Some(last) = log.epochs.last() {
        println!("final loss {:.6} after {} steps", last.mean_loss, log.steps);
    }
    print!("{}", experiment::format_sweep("training set", &[("fit".into(), fit)]));
    println!("checkpoint {}", out.join("checkpoint").display());
    eprintln!("trained in {:.1} s", started.elapsed().as_secs_f64());
    Ok(())
}

/// Runs one cross-validation and writes its config, report and predictions to `dir`.
fn crossval_into(
    dir: &Path,
    dataset: &Dataset,
    cfg: &ExperimentConfig,
    jobs: usize,
) -> Result<(String, Metrics), Failure> {
    let started = Instant::now();
    let result = experiment::run_crossval(dataset, cfg, jobs)?;
    let report = result.report();
    write(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    write(&dir.join(REPORT_FILE), &report)?;
    experiment::write_predictions(&dir.join(PREDICTIONS_FILE), dataset, &result)?;
    eprintln!(
        "{} folds in {:.1} s",
        result.folds.len(),
        started.elapsed().as_secs_f64()
    );
    Ok((report, result.pooled))
}

pub fn crossval(common: &Common, args: &CrossvalArgs) -> Outcome {
    let mut cfg = load_config(common)?;
    match args.protocol {
        Some(ProtocolArg::Loso) => cfg.protocol = Protocol::Loso,
        Some(ProtocolArg::Kfold) => cfg.protocol = Protocol::Kfold,
        None => {}
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    let sweep = match &args.sweep {
        Some(arg) => {
            let (key, values) = split_assignment(arg)?;
            if key.starts_with("data.") {
                return Err(Failure::Invalid(format!(
                    "cannot sweep {key}: the dataset is fixed, generate one per value instead"
                )));
            }
            let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
            Some((key, values))
        }
        None => None,
    };
    let dataset = data::read_dataset(&args.data)?;
    bind_dataset(&mut cfg, &dataset);
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("runs/crossval"));

    let Some((key, values)) = sweep else {
        cfg.validate()?;
        let (report, _) = crossval_into(&out, &dataset, &cfg, common.jobs)?;
        print!("{report}");
        return Ok(());
    };
    // Validate every point before spending time on any of them.
    let mut points = Vec::with_capacity(values.len());
    for v in &values {
        let point = cfg.with_override(key, v)?;
        point.validate()?;
        points.push((v.to_string(), point));
    }
    let mut rows = Vec::with_capacity(points.len());
    for (v, point) in points {
        let (report, pooled) = crossval_into(&out.join(format!("{key}={v}")), &dataset, &point, common.jobs)?;
        println!("{key} = {v}");
        print!("{report}");
        println!();
        rows.push((v, pooled));
    }
    let grid = experiment::format_sweep(key, &rows);
    write(&out.join("sweep.txt"), &grid)?;
    print!("{grid}");
    Ok(())
}

pub fn gradcheck(common: &Common, args: &GradcheckArgs) -> Outcome {
    let fault = match &args.inject_fault {
        Some(name) => Some(
            OpKind::from_name(name)
                .filter(|k| OpKind::DIFFERENTIABLE.contains(k))
                .ok_or_else(|| {
                    let known: Vec<&str> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
                    Failure::Invalid(format!("unknown op {name:?}; expected one of {}", known.join(", ")))
                })?,
        ),
        None => None,
    };
    let started = Instant::now();
    let groups = gradcheck::run_suite(&SUITE_MODELS, fault, common.seed.unwrap_or(0))?;
    let mut out = String::new();
    writeln!(
        out,
        "{:<12} {:<28} {:>12} {:>12}",
        "component", "group", "max rel err", "max abs err"
    )
    .unwrap();
    let mut total = 0;
    let mut failed = 0;
    for g in &groups {
        for c in &g.checks {
            let ok = c.passed(REL_TOLERANCE);
            total += 1;
            failed += usize::from(!ok);
            writeln!(
                out,
                "{:<12} {:<28} {:>12.3e} {:>12.3e} {}",
                g.component,
                c.name,
                c.max_rel_err,
                c.max_abs_err,
                if ok { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
    }
    for g in &groups {
        writeln!(out, "{:<12} worst relative error {:.3e}", g.component, g.max_rel_err()).unwrap();
    }
    print!("{out}");
    eprintln!(
        "checked {total} parameter groups in {:.1} s",
        started.elapsed().as_secs_f64()
    );
    if failed == 0 {
        println!("PASS");
        return Ok(());
    }
    let cause = match fault {
        Some(k) => format!(", backward rule of {} was corrupted", k.name()),
        None => String::new(),
    };
    println!("FAIL: {failed} of {total} parameter groups at or above {REL_TOLERANCE:e}{cause}");
    Err(Failure::Invalid(format!(
        "gradient check failed in {failed} parameter groups"
    )))
}

/// Directories holding a finished run: `path` itself, or its immediate
/// subdirectories in name order.
fn find_runs(path: &Path) -> Result<Vec<PathBuf>, Failure> {
    if path.join(PREDICTIONS_FILE).is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut runs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| runtime(path, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.join(PREDICTIONS_FILE).is_file())
        .collect();
    runs.sort();
    if runs.is_empty() {
        return Err(Failure::Runtime(format!(
            "no {PREDICTIONS_FILE} under {}",
            path.display()
        )));
    }
    Ok(runs)
}

fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn report(args: &ReportArgs) -> Outcome {
    let mut rows = Vec::new();
    let mut details = String::new();
    for root in &args.runs {
        for dir in find_runs(root)? {
            let path = dir.join(CONFIG_FILE);
            let text = fs::read_to_string(&path).map_err(|e| runtime(&path, e))?;
            let cfg = ExperimentConfig::from_toml(&text)?;
            let c = cfg.model.num_classes;
            let outcomes = experiment::read_predictions(&dir.join(PREDICTIONS_FILE))?;
            let pooled = eval::aggregate_over_folds(&outcomes, c)?;
            if args.per_fold {
                let per_fold = outcomes
                    .iter()
                    .map(|o| eval::aggregate_over_folds(std::slice::from_ref(o), c))
                    .collect::<hsta::Result<Vec<_>>>()?;
                writeln!(details, "{}", run_name(&dir)).unwrap();
                writeln!(details, "{}", eval::format_report(&per_fold, &pooled)).unwrap();
            }
            rows.push((run_name(&dir), pooled));
        }
    }
    print!("{details}");
    if args.csv {
        println!("run,acc,uar,uf1");
        for (name, m) in &rows {
            println!(
                "{name},{},{},{}",
                eval::percent(m.acc),
                eval::percent(m.uar),
                eval::percent(m.uf1)
            );
        }
    } else {
        print!("{}", experiment::format_sweep("run", &rows));
    }
    Ok(())
}
