use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::{json, Map, Value};
use spt_core::material::{
    HARDENING_RANGE, POISSON_RATIO, TEST_YIELD_RANGE, THICKNESS_RANGE, TRAIN_YIELD_RANGE, YOUNGS_MODULUS,
};
use spt_core::{
    emit_plot, evaluate as evaluate_checkpoint, gaf_transform, generate_dataset, predict_mpa, read_csv, train_with,
    write_csv, write_loss_history, Checkpoint, CurvePair, Dataset, GafMode, GridSpec, Split,
};

use crate::config::{desk_defaults, read_config_file, resolve, TrainOverrides};
use crate::UsageError;

pub const DEFAULT_TRAIN_LIMIT: usize = 200;

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Verbosity {
    Quiet,
    Info,
    Debug,
}

/// From `SPT_LOG`: `quiet`, `info` (default) or `debug`.
fn verbosity() -> Verbosity {
    match std::env::var("SPT_LOG").as_deref() {
        Ok("quiet") | Ok("0") => Verbosity::Quiet,
        Ok("debug") => Verbosity::Debug,
        _ => Verbosity::Info,
    }
}

fn info(msg: impl AsRef<str>) {
    if verbosity() >= Verbosity::Info {
        eprintln!("{}", msg.as_ref());
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// A dataset plus the manifest found next to it, if any.
struct Loaded {
    ds: Dataset,
    path: PathBuf,
    manifest: Option<Value>,
}

fn load_dataset(path: &Path, split: Split) -> Result<Loaded> {
    let (file, dir) = if path.is_dir() {
        let name = match split {
            Split::Train => "train.csv",
            Split::Test => "test.csv",
        };
        (path.join(name), Some(path.to_path_buf()))
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf))
    };
    if !file.exists() {
        bail!("dataset {} does not exist", file.display());
    }
    let mut ds = read_csv(&file, split)?;
    let manifest_path = dir.map(|d| d.join(MANIFEST)).filter(|p| p.exists());
    let manifest = match manifest_path {
        Some(p) => {
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            let m: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            if let Some(grid) = m.get("grid").cloned() {
                let grid: GridSpec =
                    serde_json::from_value(grid).with_context(|| format!("grid in {}", p.display()))?;
                if grid.l_in == ds.grid.l_in && grid.l_out == ds.grid.l_out {
                    ds.grid = grid;
                }
            }
            ds.seed = m.get("seed").and_then(Value::as_u64);
            Some(m)
        }
        None => None,
    };
    Ok(Loaded {
        ds,
        path: file,
        manifest,
    })
}

fn sample(ds: &Dataset, index: usize) -> Result<&CurvePair> {
    ds.samples.get(index).ok_or_else(|| {
        UsageError(format!(
            "sample index {index} out of range (dataset has {} samples)",
            ds.len()
        ))
        .into()
    })
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Settings and seeds behind a checkpoint, for sidecar files.
fn checkpoint_provenance(ckpt: &Checkpoint, ckpt_path: &Path, data: &Loaded) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("checkpoint".into(), json!(ckpt_path.display().to_string()));
    m.insert("train_config".into(), json!(ckpt.meta.train_config));
    m.insert("model_config".into(), json!(ckpt.meta.model_config));
    m.insert("dataset_seed".into(), json!(ckpt.meta.dataset_seed));
    m.insert("data".into(), json!(data.path.display().to_string()));
    m.insert("data_seed".into(), json!(data.ds.seed));
    m
}

pub fn generate(n_train: usize, n_test: usize, seed: u64, l_in: usize, l_out: usize, out: &Path) -> Result<()> {
    let grid = GridSpec::with_lengths(l_in, l_out);
    let (train, test) = generate_dataset(n_train, n_test, seed, grid).map_err(|e| UsageError(e.to_string()))?;
    create_dir(out)?;
    write_csv(&train, &out.join("train.csv"))?;
    write_csv(&test, &out.join("test.csv"))?;
    let manifest = json!({
        "seed": seed,
        "n_train": n_train,
        "n_test": n_test,
        "grid": grid,
        "ranges": {
            "train_yield_stress": TRAIN_YIELD_RANGE,
            "test_yield_stress": TEST_YIELD_RANGE,
            "hardening_exponent": HARDENING_RANGE,
            "thickness": THICKNESS_RANGE,
        },
        "youngs_modulus": YOUNGS_MODULUS,
        "poisson_ratio": POISSON_RATIO,
        "train_norm_stats": train.norm_stats,
    });
    write_json(&out.join(MANIFEST), &manifest)?;
    info(format!(
        "wrote {n_train} train and {n_test} test samples to {}",
        out.display()
    ));
    Ok(())
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub baseline_1d: bool,
    pub paper_arch: bool,
    pub train_limit: usize,
    pub overrides: &'a TrainOverrides,
}

pub fn train(args: TrainArgs<'_>) -> Result<()> {
    let mut base = desk_defaults();
    if args.paper_arch {
        let paper = spt_core::TrainConfig::default();
        base.hidden_size = paper.hidden_size;
        base.num_layers = paper.num_layers;
    }
    let file = args.config.map(read_config_file).transpose()?;
    let mut cfg = resolve(base, file.as_ref(), args.overrides)?;
    if args.baseline_1d {
        cfg.gaf_enabled = false;
    }
    if args.train_limit == 0 {
        return Err(UsageError("--train-limit must be at least 1".into()).into());
    }

    let loaded = load_dataset(args.data, Split::Train)?;
    let ds = loaded.ds.truncated(args.train_limit);
    info(format!(
        "training on {} samples: hidden {} x {} layers, {} heads, {} epochs, gaf {}",
        ds.len(),
        cfg.hidden_size,
        cfg.num_layers,
        cfg.num_heads,
        cfg.epochs,
        cfg.gaf_enabled
    ));
    let level = verbosity();
    let epochs = cfg.epochs;
    let out = train_with(&ds, &cfg, |e, loss| {
        if level >= Verbosity::Debug || (level >= Verbosity::Info && (e % 10 == 0 || e == 1 || e == epochs)) {
            eprintln!("epoch {e:>4}  loss {loss:.6e}");
        }
    })?;

    create_dir(args.out)?;
    let mut ckpt = out.checkpoint;
    ckpt.meta
        .provenance
        .insert("data".into(), json!(loaded.path.display().to_string()));
    ckpt.meta
        .provenance
        .insert("train_limit".into(), json!(args.train_limit));
    if let Some(m) = &loaded.manifest {
        ckpt.meta.provenance.insert("manifest".into(), m.clone());
    }
    ckpt.save(&args.out.join("model.ckpt"))?;
    write_loss_history(&out.history, &args.out.join("loss.csv"))?;
    write_json(
        &args.out.join("config.json"),
        &json!({ "train_config": cfg, "train_limit": args.train_limit, "data": loaded.path.display().to_string(), "dataset_seed": ds.seed }),
    )?;
    info(format!("wrote {}", args.out.join("model.ckpt").display()));
    Ok(())
}

pub fn evaluate(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let loaded = load_dataset(data, Split::Test)?;
    let mut report = evaluate_checkpoint(&ckpt, &loaded.ds)?;
    report
        .provenance
        .extend(checkpoint_provenance(&ckpt, checkpoint, &loaded));
    println!("{}", report.summary());
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("report.json"));
    report.write_json(&path)?;
    info(format!("wrote {}", path.display()));
    Ok(())
}

fn predicted(ckpt: &Checkpoint, pair: &CurvePair) -> Result<Vec<f64>> {
    let model = ckpt.to_model()?;
    let grid = ckpt.meta.grid;
    if pair.load.len() != grid.l_in || pair.stress.len() != grid.l_out {
        bail!(
            "sample has {} load and {} stress points; the checkpoint expects {} and {}",
            pair.load.len(),
            pair.stress.len(),
            grid.l_in,
            grid.l_out
        );
    }
    let mut rows = predict_mpa(&model, &ckpt.meta.norm_stats, std::slice::from_ref(pair))?;
    Ok(rows.remove(0))
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `strain,stress` for one sample plus a JSON sidecar.
pub fn predict(checkpoint: &Path, data: &Path, index: usize, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let loaded = load_dataset(data, Split::Test)?;
    let pair = sample(&loaded.ds, index)?;
    let pred = predicted(&ckpt, pair)?;
    let mut text = String::from("strain,stress\n");
    for (e, s) in pair.strain_grid.iter().zip(&pred) {
        text.push_str(&format!("{e},{s}\n"));
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    let mut meta = checkpoint_provenance(&ckpt, checkpoint, &loaded);
    meta.insert("sample_index".into(), json!(index));
    meta.insert("sample_id".into(), json!(pair.id));
    write_json(&sidecar(out), &meta)?;
    info(format!("wrote {} points to {}", pred.len(), out.display()));
    Ok(())
}

pub fn export_gaf(data: &Path, out: &Path, index: Option<usize>) -> Result<()> {
    let loaded = load_dataset(data, Split::Test)?;
    let pairs: Vec<&CurvePair> = match index {
        Some(i) => vec![sample(&loaded.ds, i)?],
        None => loaded.ds.samples.iter().collect(),
    };
    create_dir(out)?;
    for pair in &pairs {
        let img = gaf_transform(&pair.load, GafMode::Lenient)?;
        img.export_pgm(&out.join(format!("gaf_{}.pgm", pair.id)))?;
    }
    write_json(
        &out.join("gaf.json"),
        &json!({
            "data": loaded.path.display().to_string(),
            "data_seed": loaded.ds.seed,
            "samples": pairs.iter().map(|p| p.id).collect::<Vec<_>>(),
            "size": loaded.ds.grid.l_in,
        }),
    )?;
    info(format!("wrote {} images to {}", pairs.len(), out.display()));
    Ok(())
}

pub fn plot(checkpoint: &Path, data: &Path, index: usize, out: &Path) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let loaded = load_dataset(data, Split::Test)?;
    let pair = sample(&loaded.ds, index)?;
    let pred = predicted(&ckpt, pair)?;
    create_dir(out)?;
    let stem = out.join(format!("plot_{}", pair.id));
    emit_plot(pair, &pred, &stem.with_extension("csv"), &stem.with_extension("svg"))?;
    let mut meta = checkpoint_provenance(&ckpt, checkpoint, &loaded);
    meta.insert("sample_index".into(), json!(index));
    meta.insert("sample_id".into(), json!(pair.id));
    write_json(&stem.with_extension("json"), &meta)?;
    info(format!("wrote {}.{{csv,svg}}", stem.display()));
    Ok(())
}
