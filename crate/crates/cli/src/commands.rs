//! Implementations of the five pipeline verbs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use countlab::dcgp::{
    self, fixed_partition_cells, gated_rate, infer_count, CellReport, CountMap, InferConfig,
};
use countlab::eval::{self, EvalReport};
use countlab::genclient::{
    default_count_schedule, GenClient, GenConfig, OracleBackend, RemoteBackend,
};
use countlab::manifest::{self, CountRow, DataLayout};
use countlab::models::{encoder_checksum, Checkpoint};
use countlab::train::{
    compute_prototypes, filter_outliers, pretrain_sorting, train_count, train_density, TrainConfig,
};
use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::{
    AblateArgs, AblateKind, BackendKind, CliError, DatasetKind, EvaluateArgs, GenerateArgs,
    InferArgs, StageArg, StrategyArg, TrainArgs,
};

fn make_client(args: &GenerateArgs) -> Result<GenClient, CliError> {
    match args.backend {
        BackendKind::Oracle => {
            let backend = match args.canvas {
                Some(edge) => OracleBackend::with_canvas((edge, edge)),
                None => OracleBackend::default(),
            };
            Ok(GenClient::oracle(backend))
        }
        BackendKind::Remote => {
            let endpoint = args.endpoint.as_deref().ok_or(CliError::MissingDependency {
                what: "remote backend endpoint".into(),
                hint: "pass --endpoint http://host:port/generate".into(),
            })?;
            Ok(GenClient::new(
                Box::new(RemoteBackend::new(endpoint)),
                GenConfig::default(),
            ))
        }
    }
}

pub fn cmd_generate(args: &GenerateArgs, cfg: &Resolved) -> Result<(), CliError> {
    let layout = DataLayout::new(&cfg.data_root);
    fs::create_dir_all(&cfg.data_root)?;
    let client = make_client(args)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let report = match args.kind {
        DatasetKind::Sorting => {
            let mut refs = Vec::with_capacity(args.refs as usize);
            for i in 0..args.refs {
                let count = rng.random_range(args.count_min..=args.count_max);
                refs.push(client.reference(count, args.seed.wrapping_add(i as u64))?);
            }
            client.build_sorting_dataset(&refs, args.n_minus, args.n_plus, &layout, args.seed)?
        }
        DatasetKind::Count => {
            let schedule = default_count_schedule(args.per_category, &client.cfg.count_template);
            let capped: Vec<_> = schedule
                .into_iter()
                .filter(|c| c.prompt_count <= args.count_max)
                .collect();
            client.build_count_dataset(&capped, args.zero_rows, &layout, args.seed)?
        }
        DatasetKind::Density => {
            let zero_pool = manifest::load_count(&layout.count_manifest())
                .map(|rows| {
                    rows.into_iter()
                        .filter(|r| r.prompt_count == 0)
                        .collect::<Vec<_>>()
                })
                .unwrap_or_default();
            client.build_density_dataset(args.per_class, &zero_pool, &layout, args.seed)?
        }
        DatasetKind::Test => {
            let counts: Vec<u32> = (0..args.test_images)
                .map(|_| rng.random_range(args.count_min..=args.count_max))
                .collect();
            client.build_test_dataset(&counts, &layout, args.seed)?
        }
    };
    println!(
        "generated {:?} dataset under {}: {} rows written, {} failed",
        args.kind,
        cfg.data_root.display(),
        report.rows_written,
        report.rows_failed
    );
    for line in &report.failures {
        eprintln!("warning: {line}");
    }
    Ok(())
}

fn load_dependency(path: Option<&Path>, stage: &str) -> Result<Checkpoint, CliError> {
    let dir = path.ok_or(CliError::MissingDependency {
        what: format!("checkpoint for the {stage} stage"),
        hint: "train the sorting stage first: countlab train --stage sort --out <dir>, then pass --checkpoint <dir>".into(),
    })?;
    if !dir.join("encoder.json").exists() {
        return Err(CliError::MissingDependency {
            what: format!("encoder weights in {}", dir.display()),
            hint: "the directory must hold a checkpoint written by countlab train --stage sort"
                .into(),
        });
    }
    Ok(Checkpoint::load(dir)?)
}

/// Apply flag overrides onto the resolved train section.
fn effective_train(args: &TrainArgs, cfg: &Resolved) -> TrainConfig {
    let mut t = cfg.train.clone();
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.lambda_weight {
        t.lambda_weight = v;
    }
    if let Some(v) = args.lambda_bb {
        t.lambda_bb = v;
    }
    if args.finetune {
        t.freeze_encoder = false;
    }
    t
}

pub fn cmd_train(args: &TrainArgs, cfg: &Resolved) -> Result<(), CliError> {
    let layout = DataLayout::new(&cfg.data_root);
    let tcfg = effective_train(args, cfg);
    fs::create_dir_all(&args.out)?;

    let (ckpt, log) = match args.stage {
        StageArg::Sort => pretrain_sorting(&layout, &cfg.model, &tcfg)?,
        StageArg::Count => {
            let base = load_dependency(args.checkpoint.as_deref(), "count")?;
            let rows = manifest::load_count(&layout.count_manifest())?;
            let table = compute_prototypes(&layout, &rows, &base)?;
            let (filtered, freport) = filter_outliers(&layout, &rows, &base, &table)?;
            manifest::write_all(&layout.filtered_count_manifest(), &filtered)?;
            fs::write(
                args.out.join("filter_report.json"),
                serde_json::to_vec_pretty(&freport).expect("report serializes"),
            )?;
            println!(
                "prototype filter: kept {} dropped {}",
                freport.kept, freport.dropped
            );
            train_count(&layout, &filtered, &base, &tcfg)?
        }
        StageArg::Density => {
            let base = load_dependency(args.checkpoint.as_deref(), "density")?;
            let rows = manifest::load_density(&layout.density_manifest())?;
            train_density(&layout, &rows, &base, &tcfg)?
        }
    };

    ckpt.save(&args.out)?;
    log.save(&args.out.join("train_log.jsonl"))?;
    let mut effective = cfg.clone();
    effective.train = tcfg;
    effective.save(&args.out.join("config.json"))?;
    println!(
        "stage {:?} done: checkpoint at {} (encoder {})",
        args.stage,
        args.out.display(),
        &encoder_checksum(&ckpt.encoder)[..12]
    );
    if let (Some(first), Some(last)) = (log.first_loss(), log.last_loss()) {
        println!("loss {first:.4} -> {last:.4} over {} epochs", log.rows.len());
    }
    Ok(())
}

/// One line of the inference report file.
#[derive(Debug, Serialize, Deserialize)]
pub struct ImageRecord {
    pub path: String,
    pub final_count: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub cells: Vec<CellReport>,
}

/// Failure line for images that could not be processed.
#[derive(Debug, Serialize, Deserialize)]
pub struct SkipRecord {
    pub path: String,
    pub error: String,
}

fn strategy_count(
    img: &RgbImage,
    ckpt: &Checkpoint,
    strategy: StrategyArg,
    icfg: &InferConfig,
) -> Result<(f64, usize, Vec<CellReport>), CliError> {
    Ok(match strategy {
        StrategyArg::Dcgp => {
            let out = infer_count(img, ckpt, icfg)?;
            (out.final_count, out.m, out.cells)
        }
        StrategyArg::Fixed => {
            let cells = fixed_partition_cells(img, ckpt, icfg.m)?;
            let total = cells.iter().map(|c| c.contribution).sum();
            (total, icfg.m, cells)
        }
        StrategyArg::Gated => {
            let rate = gated_rate(img, ckpt, icfg.m)?;
            let cells = fixed_partition_cells(img, ckpt, rate)?;
            let total = cells.iter().map(|c| c.contribution).sum();
            (total, rate, cells)
        }
    })
}

/// Heat overlay of the count map onto the source image.
fn write_overlay(img: &RgbImage, cmap: &CountMap, path: &Path) -> Result<(), CliError> {
    let (h, w) = cmap.values.dim();
    let max = cmap
        .values
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max)
        .max(1e-12);
    let min = cmap.values.iter().cloned().fold(f64::MAX, f64::min);
    let span = (max - min).max(1e-12);
    let mut out = img.clone();
    let (iw, ih) = out.dimensions();
    for (x, y, px) in out.enumerate_pixels_mut() {
        let r = ((y as usize * h) / ih as usize).min(h - 1);
        let c = ((x as usize * w) / iw as usize).min(w - 1);
        let heat = ((cmap.values[(r, c)] - min) / span * 255.0) as u8;
        px.0[0] = ((px.0[0] as u16 + heat as u16) / 2) as u8;
        px.0[1] /= 2;
        px.0[2] /= 2;
    }
    out.save(path).map_err(|e| CliError::Image(e.to_string()))?;
    Ok(())
}

pub fn cmd_infer(args: &InferArgs, cfg: &Resolved) -> Result<(), CliError> {
    let ckpt = load_dependency(Some(args.checkpoint.as_path()), "inference")?;
    if ckpt.count_head.is_none() {
        return Err(CliError::MissingDependency {
            what: "count head in the checkpoint".into(),
            hint: "run countlab train --stage count before inferring".into(),
        });
    }
    let icfg = InferConfig {
        m: args.m,
        tau: args.tau,
        hybrid: !args.no_hybrid && cfg.infer.hybrid,
    };
    if let Some(dir) = &args.overlay_dir {
        fs::create_dir_all(dir)?;
    }
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = fs::File::create(&args.out)?;
    let mut ok = 0usize;
    let mut skipped = 0usize;
    for path in &args.images {
        let record_path = path.display().to_string();
        let img = match image::open(path) {
            Ok(i) => i.to_rgb8(),
            Err(e) => {
                skipped += 1;
                let row = SkipRecord {
                    path: record_path.clone(),
                    error: e.to_string(),
                };
                writeln!(out, "{}", serde_json::to_string(&row).expect("row serializes"))?;
                eprintln!("warning: skipping {record_path}: {e}");
                continue;
            }
        };
        let (final_count, m, cells) = strategy_count(&img, &ckpt, args.strategy, &icfg)?;
        if let Some(dir) = &args.overlay_dir {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| format!("img_{ok}"));
            let cmap = dcgp::count_map(&img, &ckpt)?;
            write_overlay(&img, &cmap, &dir.join(format!("{stem}_overlay.png")))?;
        }
        let row = ImageRecord {
            path: record_path,
            final_count,
            m,
            cells,
        };
        writeln!(out, "{}", serde_json::to_string(&row).expect("row serializes"))?;
        ok += 1;
    }
    println!(
        "inferred {ok} image(s), skipped {skipped}, report at {}",
        args.out.display()
    );
    Ok(())
}

/// Prediction rows from an inference report, keyed by path relative to the
/// data root when possible.
fn load_predictions(path: &Path, root: &Path) -> Result<BTreeMap<String, f64>, CliError> {
    let text = fs::read_to_string(path)?;
    let mut preds = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        // Skip-records have no final_count and are ignored here.
        if let Ok(row) = serde_json::from_str::<ImageRecord>(line) {
            let key = Path::new(&row.path)
                .strip_prefix(root)
                .map(|p| p.to_string_lossy().replace('\\', "/"))
                .unwrap_or_else(|_| row.path.clone());
            preds.insert(key, row.final_count);
        } else if serde_json::from_str::<SkipRecord>(line).is_err() {
            return Err(CliError::Config {
                path: path.display().to_string(),
                message: format!("line {}: not an inference record", ln + 1),
            });
        }
    }
    Ok(preds)
}

pub fn cmd_evaluate(args: &EvaluateArgs, cfg: &Resolved) -> Result<(), CliError> {
    let rows = manifest::load_count(&args.manifest)?;
    let preds = load_predictions(&args.predictions, &cfg.data_root)?;
    let report = eval::evaluate(&rows, &preds)?;
    let body = serde_json::to_string_pretty(&report).expect("report serializes");
    match &args.out {
        Some(p) => {
            fs::write(p, &body)?;
            println!(
                "n {} mae {:.4} mse {:.4} -> {}",
                report.n,
                report.mae,
                report.mse,
                p.display()
            );
        }
        None => println!("{body}"),
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mae: f64,
    pub mse: f64,
    pub n: usize,
}

fn eval_variant<F>(
    rows: &[CountRow],
    layout: &DataLayout,
    mut predict: F,
) -> Result<EvalReport, CliError>
where
    F: FnMut(&RgbImage) -> Result<f64, CliError>,
{
    let mut pairs = Vec::with_capacity(rows.len());
    for row in rows {
        let truth = row.true_count.ok_or_else(|| CliError::Config {
            path: row.path.clone(),
            message: "test manifest row lacks true_count".into(),
        })?;
        let img = image::open(layout.resolve(&row.path))
            .map_err(|e| CliError::Image(e.to_string()))?
            .to_rgb8();
        pairs.push((truth as f64, predict(&img)?));
    }
    Ok(eval::report_from_pairs(&pairs)?)
}

pub fn cmd_ablate(args: &AblateArgs, cfg: &Resolved) -> Result<(), CliError> {
    let layout = DataLayout::new(&cfg.data_root);
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| layout.test_manifest());
    let rows = manifest::load_count(&manifest_path)?;
    let ckpt = load_dependency(Some(args.checkpoint.as_path()), "ablation")?;
    let m = args.m;
    let icfg = InferConfig {
        m,
        tau: args.tau,
        hybrid: cfg.infer.hybrid,
    };

    let mut table: Vec<AblationRow> = Vec::new();
    let mut push = |variant: String, report: EvalReport| {
        println!(
            "{variant}: mae {:.4} mse {:.4} (n {})",
            report.mae, report.mse, report.n
        );
        table.push(AblationRow {
            variant,
            mae: report.mae,
            mse: report.mse,
            n: report.n,
        });
    };

    match args.which {
        AblateKind::Partition => {
            for rate in [1usize, 2, 3] {
                let r = eval_variant(&rows, &layout, |img| {
                    Ok(dcgp::fixed_partition_count(img, &ckpt, rate)?)
                })?;
                push(format!("fixed-{rate}x{rate}"), r);
            }
            let r = eval_variant(&rows, &layout, |img| {
                Ok(dcgp::gated_partition_count(img, &ckpt, m)?)
            })?;
            push(format!("gated-{m}x{m}"), r);
            let r = eval_variant(&rows, &layout, |img| {
                Ok(infer_count(img, &ckpt, &icfg)?.final_count)
            })?;
            push(format!("dcgp-{m}x{m}"), r);
        }
        AblateKind::CountTrain => {
            let count_rows = manifest::load_count(&layout.count_manifest())?;
            let table_protos = compute_prototypes(&layout, &count_rows, &ckpt)?;
            let (filtered, _) = filter_outliers(&layout, &count_rows, &ckpt, &table_protos)?;
            for (variant, freeze) in [("linear-probe", true), ("full-finetune", false)] {
                let tcfg = TrainConfig {
                    freeze_encoder: freeze,
                    ..cfg.train.clone()
                };
                let (trained, _) = train_count(&layout, &filtered, &ckpt, &tcfg)?;
                let r = eval_variant(&rows, &layout, |img| {
                    Ok(dcgp::whole_image_count(img, &trained)?)
                })?;
                push(variant.to_string(), r);
            }
        }
        AblateKind::Resolution => {
            for (variant, hybrid) in [("hybrid-on", true), ("hybrid-off", false)] {
                let vcfg = InferConfig { hybrid, ..icfg.clone() };
                let r = eval_variant(&rows, &layout, |img| {
                    Ok(infer_count(img, &ckpt, &vcfg)?.final_count)
                })?;
                push(variant.to_string(), r);
            }
        }
    }

    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = fs::File::create(&args.out)?;
    for row in &table {
        writeln!(out, "{}", serde_json::to_string(row).expect("row serializes"))?;
    }
    println!("{} variant(s) -> {}", table.len(), args.out.display());
    Ok(())
}

