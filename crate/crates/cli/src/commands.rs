use std::fs;
use std::path::{Path, PathBuf};

use r2au_core::checkpoint::{self, write_atomic};
use r2au_core::data::{
    apply_split, holdout_split, load_dsb2018, load_image, read_manifest, synth_blobs_detailed,
    write_dsb, write_manifest, write_mask_png, SamplePair, Split, SynthConfig,
};
use r2au_core::gradcheck::{run_suite, SuiteConfig};
use r2au_core::losses::LossConfig;
use r2au_core::metrics::{Aggregation, MetricsRow, CSV_HEADER};
use r2au_core::training::{
    ablation_grid, evaluate_model, table1_grid, train as train_model, GridRow,
};
use r2au_core::{R2AUNet, Shape, Tensor};

use crate::config::{first_difference, RunConfig};
use crate::CliError;

fn input_error(e: impl std::fmt::Display) -> CliError {
    CliError::usage(e.to_string())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))
}

fn dataset_name(cfg: &RunConfig, root: &Path) -> String {
    cfg.data.name.clone().unwrap_or_else(|| {
        root.file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    })
}

fn data_root(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf, CliError> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.data.root.clone())
        .ok_or_else(|| CliError::usage("no dataset: pass --data or set `data.root`".into()))
}

fn load_data(root: &Path, size: usize) -> Result<Vec<SamplePair>, CliError> {
    if !root.is_dir() {
        return Err(CliError::usage(format!(
            "{}: dataset directory not found",
            root.display()
        )));
    }
    let samples = load_dsb2018(root, size).map_err(input_error)?;
    if samples.is_empty() {
        return Err(CliError::usage(format!(
            "{}: no sample directories",
            root.display()
        )));
    }
    Ok(samples)
}

fn split_data(
    cfg: &RunConfig,
    samples: Vec<SamplePair>,
) -> Result<
    (
        Vec<r2au_core::data::ManifestEntry>,
        Vec<SamplePair>,
        Vec<SamplePair>,
    ),
    CliError,
> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let manifest = holdout_split(&ids, cfg.data.val_count, cfg.seed).map_err(input_error)?;
    let (train, val) = apply_split(samples, &manifest)?;
    Ok((manifest, train, val))
}

fn csv_document(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn synth(out: &Path, n: usize, size: usize, imbalance: f64, seed: u64) -> Result<(), CliError> {
    let cfg = SynthConfig {
        n_samples: n,
        image_size: size,
        imbalance_target: imbalance,
        seed,
        ..SynthConfig::default()
    };
    cfg.check()
        .map_err(|(f, m)| CliError::usage(format!("--{}: {m}", flag_for(f))))?;
    let samples = synth_blobs_detailed(&cfg)?;
    create_dir(out)?;
    write_dsb(out, &samples)?;
    let fraction = samples
        .iter()
        .map(|s| s.pair.foreground_fraction())
        .sum::<f64>()
        / samples.len() as f64;
    println!(
        "wrote {} samples to {} (mean foreground fraction {fraction:.4})",
        samples.len(),
        out.display()
    );
    Ok(())
}

fn flag_for(field: &str) -> &str {
    match field {
        "n_samples" => "n",
        "image_size" => "size",
        "imbalance_target" => "imbalance",
        f => f,
    }
}

/// Refuses to reuse an output directory that belongs to a different run.
fn claim_out_dir(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let path = out.join("config.json");
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(());
    };
    let previous = RunConfig::parse(&text).map_err(|e| {
        CliError::usage(format!(
            "{} belongs to an incompatible run: {}",
            path.display(),
            e.message
        ))
    })?;
    let a = serde_json::to_value(&previous).expect("config serializes");
    let b = serde_json::to_value(cfg).expect("config serializes");
    match first_difference(&a, &b) {
        None => Ok(()),
        Some(field) => Err(CliError::usage(format!(
            "{} was written by a run with a different config (field `{field}`); use a new --out",
            path.display()
        ))),
    }
}

pub fn train(config: &Path, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let root = data_root(&cfg, data)?;
    claim_out_dir(out, &cfg)?;
    let samples = load_data(&root, cfg.model.height)?;
    let (manifest, train_set, val_set) = split_data(&cfg, samples)?;
    create_dir(out)?;
    write_atomic(&out.join("config.json"), cfg.to_pretty_json().as_bytes())?;
    write_manifest(&out.join("manifest.json"), &manifest)?;
    eprintln!(
        "training {} on {} images, validating on {}",
        cfg.model.variant_name(),
        train_set.len(),
        val_set.len()
    );
    let model = R2AUNet::<f32>::build(&cfg.model, cfg.seed)?;
    let outcome = train_model(
        model,
        &train_set,
        &val_set,
        &cfg.train,
        cfg.seed,
        Some(out),
        |e| {
            eprintln!(
                "epoch {:>3}  loss {:.4}  val dice {:.4}  precision {:.4}  recall {:.4}  lr {:.2e}  {:.1}s",
                e.epoch, e.train_loss, e.val.dice, e.val.precision, e.val.recall, e.lr, e.seconds
            )
        },
    )?;
    checkpoint::save(&outcome.model, &out.join("best.r2au"))?;
    let best = outcome.registry.best().expect("one epoch ran");
    println!(
        "best epoch {} with val dice {:.4}; weights in {}",
        best.epoch,
        best.val_dice,
        out.join("best.r2au").display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    /// `None` scores every sample.
    pub split: Option<Split>,
    pub manifest: Option<PathBuf>,
    pub per_image: bool,
    pub threshold: f64,
    pub out: Option<PathBuf>,
}

fn load_checkpoint(path: &Path) -> Result<R2AUNet<f32>, CliError> {
    if !path.is_file() {
        return Err(CliError::usage(format!(
            "{}: checkpoint not found",
            path.display()
        )));
    }
    checkpoint::load(path).map_err(input_error)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn check_threshold(t: f64) -> Result<(), CliError> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "--threshold must lie in (0, 1), got {t}"
        )))
    }
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    check_threshold(a.threshold)?;
    let model = load_checkpoint(&a.ckpt)?;
    let run = fs::read_to_string(sibling(&a.ckpt, "config.json"))
        .ok()
        .and_then(|t| RunConfig::parse(&t).ok());
    let mut samples = load_data(&a.data, model.config.height)?;
    if let Some(split) = a.split {
        let path = a
            .manifest
            .clone()
            .unwrap_or_else(|| sibling(&a.ckpt, "manifest.json"));
        if !path.is_file() {
            return Err(CliError::usage(format!(
                "{}: manifest not found; pass --manifest or --split all",
                path.display()
            )));
        }
        let manifest = read_manifest(&path).map_err(input_error)?;
        let (train, val) = apply_split(samples, &manifest).map_err(input_error)?;
        samples = if split == Split::Train { train } else { val };
    }
    if samples.is_empty() {
        return Err(CliError::usage("the selected split is empty".into()));
    }
    let mode = if a.per_image {
        Aggregation::PerImage
    } else {
        Aggregation::Pooled
    };
    let metrics = evaluate_model(&model, &samples, a.threshold, mode, 4)?;
    let (loss, (alpha, beta, gamma)) = match &run {
        Some(r) => {
            let row = GridRow {
                loss: r.train.loss.clone(),
            };
            (row.label().to_owned(), row.hyper())
        }
        None => (String::new(), (None, None, None)),
    };
    let dataset = match &run {
        Some(r) => dataset_name(r, &a.data),
        None => dataset_name(&RunConfig::default(), &a.data),
    };
    let row = MetricsRow {
        dataset,
        model_variant: model.config.variant_name().to_owned(),
        loss,
        alpha,
        beta,
        gamma,
        metrics,
    };
    let doc = csv_document(&[row]);
    if let Some(out) = &a.out {
        write_atomic(out, doc.as_bytes())?;
    }
    print!("{doc}");
    Ok(())
}

pub fn predict(ckpt: &Path, image: &Path, out: &Path, threshold: f64) -> Result<(), CliError> {
    check_threshold(threshold)?;
    let model = load_checkpoint(ckpt)?;
    let size = model.config.height;
    let x = load_image(image, size).map_err(input_error)?;
    let mask = model.predict_mask(&x, threshold)?;
    let plane = Tensor::from_vec(Shape::new(1, 1, size, size), mask.data().to_vec())?;
    write_mask_png(out, &plane)?;
    let fg = plane.data().iter().filter(|&&v| v == 1.0).count();
    println!(
        "wrote {} ({size}x{size}, {fg} foreground pixels)",
        out.display()
    );
    Ok(())
}

pub fn gradcheck(
    depth: usize,
    size: usize,
    base_channels: usize,
    seeds: u64,
) -> Result<(), CliError> {
    if depth == 0 || base_channels == 0 || seeds == 0 {
        return Err(CliError::usage(
            "--depth, --base-channels and --seeds must be positive".into(),
        ));
    }
    if size == 0 || size % (1 << depth) != 0 {
        return Err(CliError::usage(format!(
            "--size must be a positive multiple of 2^depth = {}",
            1 << depth
        )));
    }
    let cfg = SuiteConfig {
        seeds: (0..seeds).collect(),
        depth,
        base_channels,
        size,
        ..SuiteConfig::default()
    };
    let entries = run_suite(&cfg, |e| println!("{}", e.report_line()))?;
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| format!("{} (seed {})", e.check, e.seed))
        .collect();
    let total: f64 = entries.iter().map(|e| e.elapsed.as_secs_f64()).sum();
    println!(
        "{} checks, {} failed, {total:.1}s",
        entries.len(),
        failed.len()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(format!(
            "gradient check failed: {}",
            failed.join(", ")
        )))
    }
}

fn load_grid(spec: &str) -> Result<Vec<GridRow>, CliError> {
    if spec == "table1" {
        return Ok(table1_grid());
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("--grid {}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let losses: Vec<LossConfig> = serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::usage(format!(
            "{}: grid error at `{}`: {}",
            path.display(),
            e.path(),
            e.inner()
        ))
    })?;
    for (i, l) in losses.iter().enumerate() {
        l.check().map_err(|(f, m)| {
            CliError::usage(format!(
                "{}: grid error at `[{i}].{f}`: {m}",
                path.display()
            ))
        })?;
    }
    if losses.is_empty() {
        return Err(CliError::usage(format!(
            "{}: grid is empty",
            path.display()
        )));
    }
    Ok(losses.into_iter().map(|loss| GridRow { loss }).collect())
}

pub fn ablate(
    config: &Path,
    grid: &str,
    data: Option<&Path>,
    rows: &[usize],
    out: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let mut grid = load_grid(grid)?;
    if !rows.is_empty() {
        let n = grid.len();
        if let Some(bad) = rows.iter().find(|&&r| r == 0 || r > n) {
            return Err(CliError::usage(format!("--rows: {bad} is outside 1..={n}")));
        }
        grid = rows.iter().map(|&r| grid[r - 1].clone()).collect();
    }
    let root = data_root(&cfg, data)?;
    let samples = load_data(&root, cfg.model.height)?;
    let (_, train_set, val_set) = split_data(&cfg, samples)?;
    let total = grid.len();
    let results = ablation_grid(
        &dataset_name(&cfg, &root),
        &cfg.model,
        &cfg.train,
        &grid,
        &train_set,
        &val_set,
        cfg.seed,
        |i, r| match &r.outcome {
            Ok(m) => eprintln!(
                "[{}/{total}] {:<22} dice {:.4}  precision {:.4}  recall {:.4}",
                i + 1,
                r.row.label(),
                m.metrics.dice,
                m.metrics.precision,
                m.metrics.recall
            ),
            Err(e) => eprintln!("[{}/{total}] {} failed: {e}", i + 1, r.row.label()),
        },
    )?;
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r.outcome {
            Ok(m) => ok.push(m),
            Err(e) => failed.push(format!("row {} ({}): {e}", i + 1, r.row.label())),
        }
    }
    let doc = csv_document(&ok);
    if let Some(out) = out {
        write_atomic(out, doc.as_bytes())?;
    }
    print!("{doc}");
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::runtime(failed.join("; ")))
    }
}
