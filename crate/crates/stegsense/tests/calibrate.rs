//! Scratch calibration harness for picking acceptance epoch budgets.
//! Selected by CAL_RUN env var; deleted before the suite is finalized.

use std::time::Instant;
use stegsense::dataset::split_indices;
use stegsense::embed::{embed_lsb_matching, EmbedSpec};
use stegsense::image::Image8;
use stegsense::losses::LossConfig;
use stegsense::network::{ablation_variants, init_model, NetworkConfig};
use stegsense::rng;
use stegsense::synth::{synthesize_cover, Texture};
use stegsense::trainer::{evaluate, fit, load_checkpoint, FitSession, MetricsRow, OptimConfig, TrainState};

type Pairs = Vec<(Image8, Image8)>;

fn corpus(payload: f64, texture: Texture) -> (Pairs, Pairs, Pairs) {
    let n = 500;
    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let cover = synthesize_cover(64, 64, rng::derive(1000, i as u64), texture).unwrap();
        let spec = EmbedSpec {
            payload_bpp: payload,
            seed: rng::derive(2000, i as u64),
        };
        let (stego, _) = embed_lsb_matching(&cover, &spec).unwrap();
        pairs.push((cover, stego));
    }
    let (tr, va, te) = split_indices(n, Default::default(), 3000).unwrap();
    let take = |idx: Vec<usize>| -> Pairs { idx.into_iter().map(|i| pairs[i].clone()).collect() };
    (take(tr), take(va), take(te))
}

fn show(row: &MetricsRow) {
    println!(
        "epoch {:>3} train_loss {:.4} train_acc {:.4} val_loss {:.4} val_acc {:.4}",
        row.epoch, row.train_loss, row.train_acc, row.val_loss, row.val_acc
    );
}

#[test]
#[ignore]
fn calibrate() {
    let spec = std::env::var("CAL_RUN").unwrap_or_else(|_| "full:1.0:0:25".into());
    let parts: Vec<&str> = spec.split(':').collect();
    let (name, payload, seed, epochs) = (
        parts[0],
        parts[1].parse::<f64>().unwrap(),
        parts[2].parse::<u64>().unwrap(),
        parts[3].parse::<usize>().unwrap(),
    );
    let texture = match std::env::var("CAL_TEXTURE").as_deref() {
        Ok("smooth") => Texture::Smooth,
        Ok("busy") => Texture::Busy,
        _ => Texture::Mixed,
    };
    println!("run {name} payload {payload} seed {seed} cap {epochs} texture {texture:?}");

    let t0 = Instant::now();
    let (train, val, test) = corpus(payload, texture);
    println!("corpus built in {:.1?}: {} / {} / {}", t0.elapsed(), train.len(), val.len(), test.len());

    let variant = ablation_variants(&NetworkConfig::default())
        .into_iter()
        .find(|v| v.name == name)
        .unwrap();
    let mut model = init_model(&variant.net, rng::derive(seed, 1)).unwrap();
    let mut state = TrainState::new(&model);
    let dir = tempfile::tempdir().unwrap();
    let session = FitSession {
        train_pairs: &train,
        val_pairs: &val,
        loss: LossConfig {
            lambda: variant.lambda,
            ..LossConfig::default()
        },
        optim: OptimConfig {
            epochs,
            seed,
            ..OptimConfig::default()
        },
        pairs_per_batch: 16,
        early_stop_window: std::env::var("CAL_ESW").ok().and_then(|v| v.parse().ok()).unwrap_or(0),
        early_stop_delta: 0.002,
        config_echo: format!("calibration {name} {payload} {seed}\n"),
        ckpt_dir: Some(dir.path().to_path_buf()),
        progress: Some(show),
    };
    let t1 = Instant::now();
    let out = fit(&mut model, &mut state, &session).unwrap();
    println!(
        "trained {} epochs in {:.1?} ({:.1?}/epoch), stopped_early={}",
        out.rows.len(),
        t1.elapsed(),
        t1.elapsed() / out.rows.len().max(1) as u32,
        out.stopped_early
    );
    if let Some(b) = out.best {
        println!("best val acc {:.4} at epoch {}", b.accuracy, b.epoch);
    }
    let (best_model, _) = load_checkpoint(&dir.path().join("best.ckpt"))
        .unwrap()
        .instantiate(&variant.net)
        .unwrap();
    let tm = evaluate(&best_model, &test, 16).unwrap();
    println!(
        "TEST at best-val: acc {:.4} loss {:.4} fa {:.4} miss {:.4}",
        tm.accuracy, tm.loss, tm.false_alarm, tm.miss
    );
    let tl = evaluate(&model, &test, 16).unwrap();
    println!("TEST at last: acc {:.4}", tl.accuracy);
}
