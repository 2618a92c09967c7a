use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use ins_core::checkpoint::{load_checkpoint, save_checkpoint};
use ins_core::data::{generate_gaussian_mil, generate_grid_mil, load_dataset, save_dataset};
use ins_core::eval::{evaluate, export_score_map};
use ins_core::nn::GradcheckConfig;
use ins_core::trainer::{check_total_loss_gradient, TotalLossCheck, TrainingSet, METRICS_CSV_HEADER};
use ins_core::{Error, SyntheticConfig, TrainConfig, TrainState};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::{EvalArgs, GenArgs, GradcheckArgs, TrainArgs, TrainOverrides};

/// A bad flag combination or config file; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config { .. } | Error::Usage(_)) => 2,
        _ => 1,
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("reading config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("config {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Prints the resolved config and writes it to `path`.
fn echo<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    write_json(path, value)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

/// Generator settings as stored next to a dataset; usable as `gen --config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub data: SyntheticConfig,
    pub grid_side: Option<usize>,
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut name = dataset.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    dataset.with_file_name(name)
}

pub fn gen(a: GenArgs) -> anyhow::Result<ExitCode> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => read_config(p)?,
        None => GenConfig::default(),
    };
    let d = &mut cfg.data;
    if let Some(r) = a.ratio {
        d.positive_ratio = r;
    }
    if let Some(n) = a.bags {
        d.n_pos_bags = n;
        d.n_neg_bags = n;
    }
    if let Some(side) = a.grid_side {
        cfg.grid_side = Some(side);
        if a.per_bag.is_none() {
            cfg.data.instances_per_bag = side * side;
        }
    }
    let d = &mut cfg.data;
    if let Some(n) = a.per_bag {
        d.instances_per_bag = n;
    }
    if let Some(n) = a.d_raw {
        d.d_raw = n;
    }
    if let Some(s) = a.separation {
        d.class_separation = s;
    }
    if let Some(s) = a.noise_sigma {
        d.noise_sigma = s;
    }
    if let Some(s) = a.seed {
        d.seed = s;
    }
    cfg.data.validate()?;
    if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    echo(&manifest_path(&a.out), &cfg)?;
    let ds = match cfg.grid_side {
        Some(side) => generate_grid_mil(&cfg.data, side)?,
        None => generate_gaussian_mil(&cfg.data)?,
    };
    save_dataset(&ds, &a.out)?;
    eprintln!(
        "wrote {} bags, {} instances, {} positives per positive bag to {}",
        ds.bags.len(),
        ds.num_instances(),
        cfg.data.positives_per_bag(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn apply_overrides(cfg: &mut TrainConfig, o: &TrainOverrides) {
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = o.$f { cfg.$f = v; })*};
    }
    set!(epochs, warmup_epochs, batch_size, lr, tau, alpha, beta, lambda1, lambda2, queue_capacity, embed_dim, seed);
    if o.no_iwscl {
        cfg.use_iwscl = false;
    }
    if o.infonce {
        cfg.infonce_denominator = true;
    }
}

fn only_epochs_set(o: &TrainOverrides) -> bool {
    let TrainOverrides {
        epochs: _,
        warmup_epochs,
        batch_size,
        lr,
        tau,
        alpha,
        beta,
        lambda1,
        lambda2,
        queue_capacity,
        embed_dim,
        seed,
        no_iwscl,
        infonce,
    } = o;
    warmup_epochs.is_none()
        && batch_size.is_none()
        && lr.is_none()
        && tau.is_none()
        && alpha.is_none()
        && beta.is_none()
        && lambda1.is_none()
        && lambda2.is_none()
        && queue_capacity.is_none()
        && embed_dim.is_none()
        && seed.is_none()
        && !no_iwscl
        && !infonce
}

pub fn train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let resumed = match &a.resume {
        Some(p) => {
            if a.config.is_some() || !only_epochs_set(&a.overrides) {
                return Err(usage("a resumed run keeps its config; only --epochs may be given"));
            }
            Some(load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?)
        }
        None => None,
    };
    let mut cfg = match (&resumed, &a.config) {
        (Some(s), _) => s.cfg.clone(),
        (None, Some(p)) => read_config(p)?,
        (None, None) => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, &a.overrides);
    cfg.validate()?;
    if let Some(s) = &resumed {
        if cfg.epochs < s.epoch {
            return Err(usage(format!("--epochs {} is below the {} epochs already done", cfg.epochs, s.epoch)));
        }
    }
    create_dir(&a.out)?;
    echo(&a.out.join("resolved_config.json"), &cfg)?;
    if a.dry_run {
        return Ok(ExitCode::SUCCESS);
    }

    let ds = load_dataset(&a.data)?;
    let truth = ds.instance_truth();
    let data = TrainingSet::from_dataset(&ds)?;
    let mut state = match resumed {
        Some(mut s) => {
            if s.d_raw != ds.d_raw {
                return Err(Error::Dimension {
                    context: "dataset features vs checkpoint".into(),
                    expected: s.d_raw,
                    actual: ds.d_raw,
                }
                .into());
            }
            if s.labels.len() != data.len() {
                return Err(Error::Dimension {
                    context: "dataset instances vs checkpoint".into(),
                    expected: s.labels.len(),
                    actual: data.len(),
                }
                .into());
            }
            s.cfg = cfg.clone();
            s
        }
        None => TrainState::new(&data, &cfg)?,
    };

    let metrics_path = a.out.join("metrics.csv");
    let fresh = a.resume.is_none() || !metrics_path.exists();
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    if fresh {
        writeln!(metrics, "{METRICS_CSV_HEADER}")?;
    }
    let start = Instant::now();
    while state.epoch < cfg.epochs {
        let m = state.run_epoch(&data, truth.as_deref())?;
        writeln!(metrics, "{}", m.csv_row())?;
        metrics.flush()?;
        eprintln!(
            "epoch {}/{}{} total={:.4} l_iwscl={:.4} l_cls={:.4} l_bc={:.4}{} ({:.1}s)",
            m.epoch,
            cfg.epochs,
            if m.warmup { " (warm-up)" } else { "" },
            m.total,
            m.l_iwscl,
            m.l_cls,
            m.l_bc,
            m.pseudo_auc.map(|p| format!(" pseudo_auc={p:.4}")).unwrap_or_default(),
            start.elapsed().as_secs_f64()
        );
    }
    save_checkpoint(&state, a.out.join("checkpoint.json"))?;
    let labels_path = a.out.join("pseudo_labels.csv");
    let file = fs::File::create(&labels_path).with_context(|| format!("writing {}", labels_path.display()))?;
    state.labels.write_csv(std::io::BufWriter::new(file))?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    export_maps: bool,
    restrict_positive_bags: bool,
}

pub fn eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    create_dir(&a.out)?;
    echo(
        &a.out.join("eval_config.json"),
        &EvalEcho {
            checkpoint: &a.checkpoint,
            data: &a.data,
            export_maps: a.export_maps,
            restrict_positive_bags: a.restrict_positive_bags,
        },
    )?;
    let state = load_checkpoint(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let ds = load_dataset(&a.data)?;
    let (report, probs) = evaluate(&state, &ds, a.restrict_positive_bags)?;
    write_json(&a.out.join("report.json"), &report)?;
    let mut csv = String::from("instance_id,bag_id,probability\n");
    for ((i, inst), p) in ds.instances().enumerate().zip(&probs) {
        csv.push_str(&format!("{i},{},{p}\n", ds.bags[inst.bag_index].bag_id));
    }
    fs::write(a.out.join("instance_scores.csv"), csv)?;
    if a.export_maps {
        if ds.grid_side().is_none() {
            return Err(usage("--export-maps needs a dataset made with gen --grid-side"));
        }
        export_score_map(&ds, &probs, a.out.join("maps"))?;
    }
    match &report.instance {
        Some(r) => println!("instance_auc={:.4} instance_acc={:.4}", r.auc, r.threshold_accuracy),
        None => println!("instance_auc=n/a (no instance labels)"),
    }
    println!("bag_auc={:.4} bag_acc={:.4}", report.bag.auc, report.bag.threshold_accuracy);
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct GradcheckEcho {
    seed: u64,
    d_raw: usize,
    per_bag: usize,
    embed_dim: usize,
    queue_per_label: usize,
    epsilon: f64,
    tolerance: f64,
    abs_floor: f64,
    corrupt: Option<String>,
    corrupt_by: f64,
}

pub fn gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    let mut setup = TotalLossCheck::default();
    if let Some(s) = a.seed {
        setup.cfg.seed = s;
    }
    setup.check = GradcheckConfig {
        epsilon: a.epsilon.unwrap_or(setup.check.epsilon),
        tolerance: a.tolerance.unwrap_or(setup.check.tolerance),
        ..setup.check
    };
    if !(setup.check.epsilon > 0.0 && setup.check.tolerance > 0.0) {
        bail!(usage("--epsilon and --tolerance must be positive"));
    }
    setup.corrupt = a.corrupt.clone().map(|b| (b, a.corrupt_by));
    let echoed = GradcheckEcho {
        seed: setup.cfg.seed,
        d_raw: setup.d_raw,
        per_bag: setup.per_bag,
        embed_dim: setup.cfg.embed_dim,
        queue_per_label: setup.queue_per_label,
        epsilon: setup.check.epsilon,
        tolerance: setup.check.tolerance,
        abs_floor: setup.check.abs_floor,
        corrupt: a.corrupt,
        corrupt_by: a.corrupt_by,
    };
    match &a.out {
        Some(dir) => {
            create_dir(dir)?;
            echo(&dir.join("gradcheck_config.json"), &echoed)?;
        }
        None => println!("{}", serde_json::to_string_pretty(&echoed)?),
    }
    let report = check_total_loss_gradient(&setup)?;
    if let Some(dir) = &a.out {
        write_json(&dir.join("gradcheck_report.json"), &report)?;
    }
    for b in &report.blocks {
        println!("{:<16} max_rel_err={:.3e}", b.name, b.max_rel_err);
    }
    println!(
        "{} max_rel_err={:.3e} worst={} tolerance={:.0e} checked={}",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_rel_err,
        report.worst_block,
        report.tolerance,
        report.n_checked
    );
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
