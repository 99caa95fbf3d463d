//! Scratch diagnostics, not part of the suite.

use std::path::Path;

use countlab::dcgp;
use countlab::eval;
use countlab::genclient::{GenClient, OracleBackend};
use countlab::manifest::{self, DataLayout};
use countlab::models::{global_pool, EncoderConfig};
use countlab::scene_lab::{EditSize, ImageSample, LabConfig};
use countlab::train::{self, TrainConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn env_pair(name: &str) -> Option<(f64, f64)> {
    std::env::var(name).ok().map(|v| {
        let (a, b) = v.split_once(',').unwrap();
        (a.trim().parse().unwrap(), b.trim().parse().unwrap())
    })
}

fn tiny_encoder() -> EncoderConfig {
    let input: u32 = std::env::var("DIAG_INPUT").map(|v| v.parse().unwrap()).unwrap_or(32);
    let eseed: u64 = std::env::var("DIAG_ESEED").map(|v| v.parse().unwrap()).unwrap_or(5);
    EncoderConfig {
        input_size: input,
        widths: vec![6, 10, 16],
        seed: eseed,
    }
}

fn lum_plane(img: &image::RgbImage) -> (Vec<f64>, usize, usize) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut lum = vec![0f64; w * h];
    for (i, p) in img.pixels().enumerate() {
        lum[i] = (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0);
    }
    (lum, w, h)
}

fn proxy_stat(img: &image::RgbImage) -> f64 {
    let (lum, w, h) = lum_plane(img);
    let mut sorted = lum.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = sorted[sorted.len() / 2];
    let ink = lum.iter().filter(|&&l| (l - median).abs() > 0.15).count() as f64;
    let mut edge = 0f64;
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w && (lum[y * w + x + 1] - lum[y * w + x]).abs() > 0.15 {
                edge += 1.0;
            }
            if y + 1 < h && (lum[(y + 1) * w + x] - lum[y * w + x]).abs() > 0.15 {
                edge += 1.0;
            }
        }
    }
    (edge.max(1.0).powi(2) / ink.max(1.0)).ln()
}

fn energy_stat(img: &image::RgbImage) -> f64 {
    let (lum, _, _) = lum_plane(img);
    let n = lum.len() as f64;
    let mean = lum.iter().sum::<f64>() / n;
    lum.iter().map(|l| (l - mean).abs()).sum::<f64>() / n
}

#[test]
#[ignore]
fn diag_stage1() {
    let band: f64 = std::env::var("DIAG_BAND").map(|v| v.parse().unwrap()).unwrap_or(1.0 / 3.0);
    let epochs: usize = std::env::var("DIAG_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(40);
    let refs_n: usize = std::env::var("DIAG_REFS").map(|v| v.parse().unwrap()).unwrap_or(32);
    let lr: f64 = std::env::var("DIAG_LR").map(|v| v.parse().unwrap()).unwrap_or(0.01);
    let batch: usize = std::env::var("DIAG_BATCH").map(|v| v.parse().unwrap()).unwrap_or(8);
    let lbb: f64 = std::env::var("DIAG_LBB").map(|v| v.parse().unwrap()).unwrap_or(0.5);
    let lw: f64 = std::env::var("DIAG_LW").map(|v| v.parse().unwrap()).unwrap_or(5.0);

    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("diag_world");
    let _ = std::fs::remove_dir_all(&root);
    std::fs::create_dir_all(&root).unwrap();
    let layout = DataLayout::new(&root);
    let mut lab = LabConfig::default();
    if let Some(s) = env_pair("DIAG_SCALE") {
        lab.scene_scale = s;
    }
    if let Some(j) = env_pair("DIAG_RJIT") {
        lab.radius_jitter = j;
    }
    let mut client = GenClient::oracle(OracleBackend {
        lab,
        ..OracleBackend::default()
    });
    client.cfg.band_fraction = band;
    if let Some((lo, hi)) = env_pair("DIAG_EDIT") {
        client.cfg.remove = EditSize::Fraction(lo, hi);
        client.cfg.add = EditSize::Fraction(lo, hi);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let refs: Vec<ImageSample> = (0..refs_n)
        .map(|_| client.reference(rng.random_range(1..=50u32), rng.random()).unwrap())
        .collect();
    let tiles: u32 = std::env::var("DIAG_TILE").map(|v| v.parse().unwrap()).unwrap_or(4);
    client.build_sorting_dataset(&refs, tiles, tiles, &layout, 202).unwrap();

    let mut rng_t = ChaCha8Rng::seed_from_u64(404);
    let test_counts: Vec<u32> = (0..60).map(|_| rng_t.random_range(1..=50)).collect();
    client.build_test_dataset(&test_counts, &layout, 505).unwrap();

    let cfg = TrainConfig {
        lr,
        epochs,
        batch_size: batch,
        seed: 7,
        lambda_bb: lbb,
        lambda_weight: lw,
        ..TrainConfig::default()
    };
    let t0 = std::time::Instant::now();
    let (ckpt, log) = train::pretrain_sorting(&layout, &tiny_encoder(), &cfg).unwrap();
    println!(
        "trained {} triplets in {:.0}s",
        refs_n * (tiles * tiles) as usize,
        t0.elapsed().as_secs_f64()
    );
    for (i, row) in log.rows.iter().enumerate() {
        if i % 5 == 0 || i == log.rows.len() - 1 {
            println!("epoch {:3}  loss {:8.4}  ordered {:.3}", row.epoch, row.loss, row.metric);
        }
    }

    // Where does the residual loss live, and do predictions order the
    // training scenes themselves?
    let sort_rows = manifest::load_sorting(&layout.sorting_manifest()).unwrap();
    let head_ref = ckpt.sort_head.as_ref().unwrap();
    let mut l_y_sum = 0.0;
    let mut l_z_sum = 0.0;
    let mut train_scores = Vec::new();
    let mut train_truths = Vec::new();
    for row in sort_rows.iter().take(128) {
        let mut zs = Vec::new();
        let mut preds = Vec::new();
        for (slot, rel) in row.paths.iter().enumerate() {
            let img = image::open(layout.resolve(rel)).unwrap().to_rgb8();
            let z = global_pool(&ckpt.features(&img).unwrap());
            preds.push(head_ref.forward(&z));
            zs.push(z);
            if let Some(tc) = row.true_counts {
                train_scores.push(*preds.last().unwrap());
                train_truths.push(tc[slot] as f64);
            }
        }
        let labels: Vec<u32> = row.ranks.iter().map(|&r| r as u32).collect();
        let s_y = countlab::ranking::label_similarity(&labels);
        let s_p = countlab::ranking::pred_similarity(&preds);
        let s_z = countlab::ranking::feature_similarity(&zs).unwrap();
        let loss = countlab::ranking::sort_loss(&s_y, &s_p, &s_z, lw).unwrap();
        l_y_sum += loss.l_y;
        l_z_sum += loss.l_z;
    }
    println!(
        "mean l_y {:.3}  mean l_z {:.3} (weighted {:.3})  train spearman {:.3}",
        l_y_sum / 128.0,
        l_z_sum / 128.0,
        lw * l_z_sum / 128.0,
        eval::spearman(&train_scores, &train_truths)
    );

    let test_rows = manifest::load_count(&layout.test_manifest()).unwrap();
    let head = ckpt.sort_head.as_ref().unwrap();
    let mut scores = Vec::new();
    let mut truths = Vec::new();
    let mut proxies = Vec::new();
    let mut energies = Vec::new();
    for r in &test_rows {
        let img = image::open(layout.resolve(&r.path)).unwrap().to_rgb8();
        scores.push(head.forward(&global_pool(&ckpt.features(&img).unwrap())));
        truths.push(r.true_count.unwrap() as f64);
        proxies.push(proxy_stat(&img));
        energies.push(energy_stat(&img));
    }
    println!("test spearman {:.3}", eval::spearman(&scores, &truths));
    println!(
        "proxy-vs-count spearman {:.3}   energy-vs-count spearman {:.3}",
        eval::spearman(&proxies, &truths),
        eval::spearman(&energies, &truths)
    );

    // How good can a probe on these features get?
    let count_rows: Vec<_> = test_rows.iter().cloned().collect();
    let head_cfg = TrainConfig { seed: 7, ..TrainConfig::head_stage() };
    let (probed, _) = train::train_count(&layout, &count_rows, &ckpt, &head_cfg).unwrap();
    let pairs: Vec<(f64, f64)> = test_rows
        .iter()
        .map(|r| {
            let img = image::open(layout.resolve(&r.path)).unwrap().to_rgb8();
            (
                r.true_count.unwrap() as f64,
                dcgp::whole_image_count(&img, &probed).unwrap(),
            )
        })
        .collect();
    println!("train-on-test probe MAE {:.2}", eval::report_from_pairs(&pairs).unwrap().mae);
}
