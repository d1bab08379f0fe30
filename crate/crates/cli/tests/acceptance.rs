//! End-to-end acceptance checks, one line per criterion.
//!
//! Run with `cargo test -p camcon-cli --test acceptance`. The CIFAR-10
//! dependent checks read `$CAMCON_CIFAR10_DIR`, falling back to
//! `data/cifar-10-batches-bin` under the workspace root. Set
//! `CAMCON_ACCEPT_REUSE=1` to reuse finished desk-scale runs.

use std::collections::HashSet;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use camcon::autograd::{self, no_grad, Tensor};
use camcon::backbone::ParamStore;
use camcon::data::{
    make_splits, parse_records, read_batch_file, synthetic_dataset, write_cifar10_dir, RawDataset, SplitName,
    IMAGE_BYTES, RECORD_BYTES, TEST_FILE, TRAIN_FILES,
};
use camcon::losses::{combine_tensors, gradcam_consistency_loss, pseudo_label_loss, supervised_loss};
use camcon::toy::ToyConvNet;
use camcon::trainer::{
    cam_disagreement, derive_seed, pseudo_targets, to_batch, unit_image, unlabeled_losses, CamClassSource,
    ConsistencySettings,
};
use camcon::{
    apply_to_image, build_backbone, compute_cam, replay_spatial, sample_augmentation, upsample_cam, AugmentPolicy,
    AugmentationRecord, Backbone, BackboneConfig, CamMap, Classifier, DepthPreset, Error, InputShape, LayerId,
    LossWeights, SplitConfig, TrainMode, Trainer, TrainingConfig,
};
use camcon_cli::config::ExperimentConfig;
use camcon_cli::experiment::{read_metrics, run_experiment, RunSummary, CHECKPOINT_FILE, METRICS_FILE, SUMMARY_FILE};
use camcon_cli::report::{report, TABLE_CSV, TABLE_MD};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn cifar_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("CAMCON_CIFAR10_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/cifar-10-batches-bin"));
    let complete = TRAIN_FILES.iter().chain([&TEST_FILE]).all(|f| dir.join(f).is_file());
    complete.then_some(dir)
}

fn missing_cifar() -> String {
    "CIFAR-10 binary batches not found (set CAMCON_CIFAR10_DIR or place them in data/cifar-10-batches-bin)".into()
}

fn layer(i: u8) -> LayerId {
    LayerId::new(i).unwrap()
}

fn tiny16(seed: u64) -> Backbone {
    build_backbone(&BackboneConfig {
        depth_preset: DepthPreset::Tiny,
        num_classes: 10,
        input_shape: InputShape { height: 16, width: 16, channels: 3 },
        seed,
    })
    .unwrap()
}

fn random_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.random_range(0.0..1.0))
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()))
}

// 1
fn cam_weights_vs_finite_differences() -> Check {
    let start = Instant::now();
    let model = ToyConvNet::new(11, 3, 8, 4, 10);
    let l = layer(1);
    let mut worst = 0.0f64;
    for (n, seed) in [(1usize, 1u64), (2, 2), (3, 3)] {
        let x = Tensor::constant(random_array(&[n, 3, 8, 8], seed));
        let classes: Vec<usize> = (0..n).map(|i| (3 * i + seed as usize) % 10).collect();
        let cams = compute_cam(&model, &x, &classes, l, false).map_err(e)?;
        let acts = no_grad(|| model.forward(&x, Some(l))).map_err(e)?.captured.unwrap();
        let a0 = acts.value().clone();
        let (c, h, w) = (a0.shape()[1], a0.shape()[2], a0.shape()[3]);
        ensure(h <= 8 && w <= 8, || format!("{h}x{w} grid"))?;
        let score = |a: &ArrayD<f64>, i: usize| -> f64 {
            no_grad(|| model.forward_from(l, &Tensor::constant(a.clone()))).unwrap().value()[[i, classes[i]]]
        };
        let eps = 1e-3;
        for i in 0..n {
            for ch in 0..c {
                let mut sum = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        let mut plus = a0.clone();
                        plus[[i, ch, y, x]] += eps;
                        let mut minus = a0.clone();
                        minus[[i, ch, y, x]] -= eps;
                        sum += (score(&plus, i) - score(&minus, i)) / (2.0 * eps);
                    }
                }
                let fd = sum / (h * w) as f64;
                worst = worst.max((fd - cams.weights[[i, ch]]).abs());
            }
        }
    }
    ensure(worst < 1e-4, || format!("max abs error {worst:.3e}"))?;
    within(Duration::from_secs(60), start)?;
    Ok(format!("max abs error {worst:.2e}"))
}

// 2
fn second_order_gradient() -> Check {
    let start = Instant::now();
    let mut model = tiny16(21);
    let target = layer(3);
    let raw = synthetic_dataset(6, SplitName::Train, 21);
    let input = InputShape { height: 16, width: 16, channels: 3 };
    let clean: Vec<_> = (0..6).map(|i| unit_image(raw.image(i), input)).collect();
    let policy = AugmentPolicy { image_size: (16, 16), max_rotation_deg: 20.0, ..Default::default() };
    let records: Vec<_> = (0..6).map(|i| sample_augmentation(100 + i, &policy).unwrap()).collect();
    let augmented = to_batch(clean.iter().zip(&records).map(|(im, r)| apply_to_image(im, r).unwrap()).collect());
    let settings = ConsistencySettings {
        layer: target,
        with_pseudo_label: false,
        with_cam: true,
        align_cams: true,
        cam_class_source: CamClassSource::ArgmaxOriginal,
    };
    // Pseudo-labels are fixed targets of the total loss.
    let targets = pseudo_targets(&model, &to_batch(clean), target, true).map_err(e)?;
    let weights = LossWeights { alpha: 0.0, beta: 0.0, gamma: 1.0 };
    let total = |m: &Backbone| -> Tensor {
        let u = unlabeled_losses(m, &augmented, &targets, &records, &settings).unwrap();
        combine_tensors(None, u.l_p.as_ref(), u.l_g.as_ref(), &weights)
    };
    let t = total(&model);
    let grads = autograd::grad(&t, model.parameters().tensors(), false).map_err(e)?;

    let below = model.params_before(layer(2));
    let below_max = below
        .iter()
        .flat_map(|&i| grads[i].value().iter().map(|g| g.abs()).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    ensure(below_max > 0.0, || "no gradient reaches parameters below the target layer".into())?;

    let sizes: Vec<usize> = model.parameters().tensors().iter().map(Tensor::len).collect();
    let total_scalars: usize = sizes.iter().sum();
    let locate = |mut k: usize| {
        for (p, &s) in sizes.iter().enumerate() {
            if k < s {
                return (p, k);
            }
            k -= s;
        }
        unreachable!()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (p, k) = locate(rng.random_range(0..total_scalars));
        let base = model.parameters().get(p).value().clone();
        let at = |delta: f64, store: &mut ParamStore| {
            let mut v = base.clone();
            *v.iter_mut().nth(k).unwrap() += delta;
            store.set(p, v).unwrap();
        };
        at(eps, model.params_mut());
        let hi = total(&model).item();
        at(-eps, model.params_mut());
        let lo = total(&model).item();
        model.params_mut().set(p, base.clone()).unwrap();
        let fd = (hi - lo) / (2.0 * eps);
        let an = *grads[p].value().iter().nth(k).unwrap();
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    ensure(worst < 1e-2, || format!("max relative error {worst:.3e}"))?;
    within(Duration::from_secs(120), start)?;
    Ok(format!("max relative error {worst:.2e}, largest gradient below target {below_max:.2e}"))
}

fn entropy_oracle(logits: &ArrayD<f64>) -> f64 {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut h = 0.0;
    for i in 0..n {
        let m = (0..k).map(|c| logits[[i, c]]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (logits[[i, c]] - m).exp()).sum();
        for c in 0..k {
            let p = (logits[[i, c]] - m).exp() / z;
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
    }
    h / n as f64
}

// 3
fn identity_augmentation_collapse() -> Check {
    let raw = synthetic_dataset(200, SplitName::Train, 31);
    let split = make_splits(&raw, &SplitConfig { labeled_count: 40, ratio: 1.0, val_fraction: 0.2, seed: 3 }).map_err(e)?;
    let config = TrainingConfig { epochs: 1, batch_size: 8, mode: TrainMode::Full, ..Default::default() };
    let mut trainer = Trainer::new(tiny16(31), &split, config, AugmentPolicy::identity((16, 16))).map_err(e)?;
    let input = InputShape { height: 16, width: 16, channels: 3 };
    let (mut worst_g, mut worst_p) = (0.0f64, 0.0f64);
    for step in 0..5 {
        let pos: Vec<usize> = (step * 8..step * 8 + 8).collect();
        let clean = to_batch(pos.iter().map(|&p| unit_image(split.unlabeled.image(p), input)).collect());
        let logits = no_grad(|| trainer.model().forward(&clean, None)).map_err(e)?.logits.value().clone();
        let expected = entropy_oracle(&logits);
        let b = trainer.step(0, step, &pos, &pos).map_err(e)?;
        worst_g = worst_g.max(b.l_g.abs());
        worst_p = worst_p.max((b.l_p - expected).abs());
    }
    ensure(worst_g <= 1e-6, || format!("max map loss {worst_g:.3e}"))?;
    ensure(worst_p <= 1e-6, || format!("pseudo-label loss off by {worst_p:.3e}"))?;
    Ok(format!("max map loss {worst_g:.1e}, max pseudo-label deviation {worst_p:.1e} over 5 steps"))
}

fn one_hot_map(n: usize, r: usize, c: usize) -> CamMap {
    let mut grid = Array2::zeros((n, n));
    grid[[r, c]] = 1.0;
    CamMap { grid, class_index: 0, layer: LayerId::ALL[0], differentiable: false }
}

fn rotated_index(n: usize, quarter_turns: i32, (mut r, mut c): (usize, usize)) -> (usize, usize) {
    for _ in 0..quarter_turns.rem_euclid(4) {
        (r, c) = (n - 1 - c, r);
    }
    (r, c)
}

fn tent(d: f64) -> f64 {
    (1.0 - d.abs()).max(0.0)
}

// 4
fn spatial_replay_oracle() -> Check {
    let n = 4;
    let frame = 32;
    for q in [-1i32, 1, 2, 3] {
        let record = AugmentationRecord { rotation_deg: 90.0 * q as f64, ..AugmentationRecord::identity((frame, frame)) };
        for r in 0..n {
            for c in 0..n {
                let out = replay_spatial(&one_hot_map(n, r, c), &record).map_err(e)?;
                let (er, ec) = rotated_index(n, q, (r, c));
                let mut expected = Array2::zeros((n, n));
                expected[[er, ec]] = 1.0;
                ensure(out.map.grid == expected, || format!("{}° rotation moved ({r},{c}) wrongly", 90 * q))?;
                ensure(out.valid.iter().all(|&v| v), || "quarter turn invalidated cells".into())?;
            }
        }
    }
    // Crops in map cells: output cell (y, x) reads source position
    // top + (y + 1/2)·s - 1/2 with s = crop/frame, interpolated bilinearly.
    let cells = 8;
    let scale = frame / cells;
    let mut crops = 0;
    for (top, left, size) in [(0, 0, 4), (4, 4, 4), (2, 3, 4), (0, 4, 4), (1, 1, 6), (0, 0, 8), (3, 0, 2)] {
        let record = AugmentationRecord {
            crop: camcon::augment::CropBox { top: top * scale, left: left * scale, height: size * scale, width: size * scale },
            ..AugmentationRecord::identity((frame, frame))
        };
        let s = size as f64 / cells as f64;
        for r in 0..cells {
            for c in 0..cells {
                let out = replay_spatial(&one_hot_map(cells, r, c), &record).map_err(e)?;
                for y in 0..cells {
                    for x in 0..cells {
                        let sy = (top as f64 + (y as f64 + 0.5) * s - 0.5).clamp(0.0, (cells - 1) as f64);
                        let sx = (left as f64 + (x as f64 + 0.5) * s - 0.5).clamp(0.0, (cells - 1) as f64);
                        let want = tent(sy - r as f64) * tent(sx - c as f64);
                        let got = out.map.grid[[y, x]];
                        ensure((got - want).abs() < 1e-12, || {
                            format!("crop {top},{left},{size}: hot ({r},{c}) gives {got} at ({y},{x}), oracle {want}")
                        })?;
                    }
                }
                crops += 1;
            }
        }
    }
    // Smooth map: replay against downsample(apply(upsample(map))).
    let smooth = Array2::from_shape_fn((8, 8), |(y, x)| {
        let (fy, fx) = (y as f64 / 7.0, x as f64 / 7.0);
        0.5 + 0.3 * (std::f64::consts::PI * fy).sin() * (0.8 * std::f64::consts::PI * fx).cos() + 0.1 * fx
    });
    let map = CamMap { grid: smooth, class_index: 0, layer: LayerId::ALL[0], differentiable: false };
    let up = upsample_cam(&map, (frame, frame)).map_err(e)?.grid;
    let image = Array3::from_shape_fn((3, frame, frame), |(_, y, x)| up[[y, x]]);
    let policy = AugmentPolicy { max_rotation_deg: 30.0, crop_scale_range: (0.5, 1.0), ..AugmentPolicy::identity((32, 32)) };
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let record = sample_augmentation(seed, &policy).map_err(e)?;
        let applied = apply_to_image(&image, &record).map_err(e)?;
        let replayed = replay_spatial(&map, &record).map_err(e)?;
        let (mut sum, mut count) = (0.0, 0usize);
        for y in 0..8 {
            for x in 0..8 {
                if !replayed.valid[[y, x]] {
                    continue;
                }
                let mut block = 0.0;
                for dy in 0..scale {
                    for dx in 0..scale {
                        block += applied[[0, y * scale + dy, x * scale + dx]];
                    }
                }
                sum += (block / (scale * scale) as f64 - replayed.map.grid[[y, x]]).abs();
                count += 1;
            }
        }
        worst = worst.max(sum / count.max(1) as f64);
    }
    ensure(worst < 0.05, || format!("commutation mean-abs error {worst:.4}"))?;
    Ok(format!("64 quarter-turn and {crops} crop cases exact; commutation error {worst:.4} (worst of 50 records)"))
}

// 5
fn split_protocol() -> Check {
    let raw = RawDataset::new(vec![0; 50_000 * IMAGE_BYTES], (0..50_000).map(|i| (i % 10) as u8).collect(), SplitName::Train)
        .map_err(e)?;
    for seed in 0..10 {
        for (ratio, unlabeled) in [(0.5, 2500), (1.0, 5000), (2.0, 10_000)] {
            let s = make_splits(&raw, &SplitConfig { labeled_count: 5000, ratio, val_fraction: 0.2, seed }).map_err(e)?;
            let sizes = (s.validation.len(), s.labeled.len(), s.unlabeled.len());
            ensure(sizes == (10_000, 5000, unlabeled), || format!("seed {seed} ratio {ratio}: sizes {sizes:?}"))?;
            let sets: Vec<HashSet<usize>> = [s.validation.indices(), s.labeled.indices(), s.unlabeled.indices()]
                .iter()
                .map(|ix| ix.iter().copied().collect())
                .collect();
            ensure(sets.iter().map(HashSet::len).sum::<usize>() == sizes.0 + sizes.1 + sizes.2, || {
                format!("seed {seed} ratio {ratio}: repeated index")
            })?;
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                ensure(sets[a].is_disjoint(&sets[b]), || format!("seed {seed} ratio {ratio}: sets {a} and {b} overlap"))?;
            }
        }
    }
    Ok("30 splits with sizes (10000, 5000, 2500/5000/10000), pairwise disjoint".into())
}

// 6
fn loss_spot_checks() -> Check {
    let ln10 = 10f64.ln();
    let uniform_logits = Tensor::constant(ArrayD::from_elem(IxDyn(&[4, 10]), 0.7));
    let ce = supervised_loss(&uniform_logits, &[0, 3, 5, 9]).map_err(e)?.item();
    ensure((ce - ln10).abs() < 1e-6, || format!("uniform cross-entropy {ce}"))?;
    let mut one_hot = ArrayD::zeros(IxDyn(&[3, 10]));
    for i in 0..3 {
        one_hot[[i, 2 * i]] = 1.0;
    }
    let uniform = Tensor::constant(ArrayD::from_elem(IxDyn(&[3, 10]), 0.1));
    let lp = pseudo_label_loss(&Tensor::constant(one_hot), &uniform).map_err(e)?.item();
    ensure((lp - ln10).abs() < 1e-6, || format!("one-hot vs uniform pseudo-label loss {lp}"))?;
    let zeros = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 4, 4])));
    let ones = Tensor::constant(ArrayD::from_elem(IxDyn(&[2, 4, 4]), 1.0));
    let valid = ArrayD::from_elem(IxDyn(&[2, 4, 4]), true);
    let lg = gradcam_consistency_loss(&zeros, &ones, &valid).map_err(e)?.item();
    ensure((lg - 1.0).abs() < 1e-9, || format!("zeros vs ones map loss {lg}"))?;
    Ok(format!(
        "cross-entropy {:.1e}, pseudo-label {:.1e}, map {:.1e} from expected",
        (ce - ln10).abs(),
        (lp - ln10).abs(),
        (lg - 1.0).abs()
    ))
}

fn small_experiment(root: &Path, out: &str) -> ExperimentConfig {
    let text = format!(
        r#"run_id = "determinism"
output_dir = "{out}"
[dataset]
dir = "{data}"
exact_counts = false
[data]
labeled_count = 40
ratio = 2.0
[model]
depth_preset = "tiny"
num_classes = 10
input_shape = {{ height = 16, width = 16, channels = 3 }}
[augment]
image_size = [16, 16]
[train]
epochs = 2
batch_size = 8
target_layer = 2
"#,
        out = root.join(out).display(),
        data = root.join("data").display()
    );
    ExperimentConfig::from_toml_str(&text).unwrap()
}

// 7
fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e)?;
    let root = tmp.path();
    write_cifar10_dir(&root.join("data"), &synthetic_dataset(200, SplitName::Train, 7), &synthetic_dataset(30, SplitName::Test, 8))
        .map_err(e)?;
    let mut dirs = Vec::new();
    for out in ["a", "b"] {
        let cfg = small_experiment(root, out);
        run_experiment(&cfg, true).map_err(e)?;
        report(&cfg.output_dir).map_err(e)?;
        dirs.push(cfg.output_dir);
    }
    let metrics: Vec<_> = dirs
        .iter()
        .map(|d| read_metrics(&d.join("determinism").join(METRICS_FILE)))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    ensure(metrics[0].len() == 2 && metrics[0].len() == metrics[1].len(), || "epoch counts differ".into())?;
    for (x, y) in metrics[0].iter().zip(&metrics[1]) {
        ensure(x.same_values(y, 1e-6), || format!("{x:?} vs {y:?}"))?;
    }
    for f in [TABLE_MD, TABLE_CSV] {
        let (a, b) = (fs::read(dirs[0].join(f)).map_err(e)?, fs::read(dirs[1].join(f)).map_err(e)?);
        ensure(a == b, || format!("{f} differs"))?;
    }
    Ok("2 epochs of metrics equal; table.md and table.csv byte-identical".into())
}

struct Desk {
    full: Vec<RunSummary>,
    ablation: Vec<RunSummary>,
    baseline: Vec<RunSummary>,
    config: ExperimentConfig,
}

const DESK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn desk_runs(data: &Path) -> Result<Desk, String> {
    let root = workspace_root();
    let mut base = ExperimentConfig::load(&root.join("configs/desk.toml")).map_err(e)?;
    base.dataset.dir = data.to_path_buf();
    base.output_dir = root.join("target/acceptance/desk");
    let reuse = std::env::var_os("CAMCON_ACCEPT_REUSE").is_some();
    let mut desk = Desk { full: vec![], ablation: vec![], baseline: vec![], config: base.clone() };
    for mode in [TrainMode::Full, TrainMode::Ablation, TrainMode::Baseline] {
        for seed in DESK_SEEDS {
            let mut c = base.clone().with_seed(seed);
            c.train.mode = mode;
            c.run_id = format!("{}_s{seed}", serde_json::to_value(mode).unwrap().as_str().unwrap());
            let summary_path = c.run_dir().join(SUMMARY_FILE);
            let s = if reuse && summary_path.is_file() {
                serde_json::from_str(&fs::read_to_string(&summary_path).map_err(e)?).map_err(e)?
            } else {
                eprintln!("desk run {} ...", c.run_id);
                run_experiment(&c, true).map_err(e)?
            };
            match mode {
                TrainMode::Full => desk.full.push(s),
                TrainMode::Ablation => desk.ablation.push(s),
                TrainMode::Baseline => desk.baseline.push(s),
            }
        }
    }
    Ok(desk)
}

fn mean_acc(runs: &[RunSummary]) -> f64 {
    100.0 * runs.iter().map(|r| r.val_accuracy).sum::<f64>() / runs.len() as f64
}

// 8
fn desk_directional(desk: &Result<Desk, String>) -> Check {
    let desk = desk.as_ref().map_err(Clone::clone)?;
    let (f, a, b) = (mean_acc(&desk.full), mean_acc(&desk.ablation), mean_acc(&desk.baseline));
    let detail = format!("full {f:.2}%, ablation {a:.2}%, baseline {b:.2}% over {} seeds", DESK_SEEDS.len());
    ensure(f >= a - 0.5 && f >= b - 0.5, || detail.clone())?;
    Ok(detail)
}

// 9
fn cam_agreement_improves(desk: &Result<Desk, String>, data: Option<&Path>) -> Check {
    let desk = desk.as_ref().map_err(Clone::clone)?;
    let data = data.ok_or_else(missing_cifar)?;
    let cfg = desk.config.clone().with_seed(DESK_SEEDS[0]);
    let trained_path = cfg.output_dir.join(&desk.full[0].run_id).join(CHECKPOINT_FILE);
    let trained = camcon::checkpoint::Checkpoint::load(&trained_path).map_err(e)?.build_model().map_err(e)?;
    let initial = build_backbone(&cfg.model).map_err(e)?;
    let test = read_batch_file(&data.join(TEST_FILE), SplitName::Test).map_err(e)?;
    let input = cfg.model.input_shape;
    let probe: Vec<_> = (0..64).map(|i| unit_image(test.image(i), input)).collect();
    let records: Vec<_> = (0..64u64)
        .map(|i| sample_augmentation(derive_seed(&[9, i]), &cfg.augment))
        .collect::<Result<_, _>>()
        .map_err(e)?;
    let target = cfg.train.target_layer;
    let before = cam_disagreement(&initial, &probe, &records, target).map_err(e)?;
    let after = cam_disagreement(&trained, &probe, &records, target).map_err(e)?;
    let detail = format!("masked MSE {before:.5} at initialization, {after:.5} after training");
    ensure(after < before, || detail.clone())?;
    Ok(detail)
}

fn records_with_label(n: usize, bad: Option<(usize, u8)>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(n * RECORD_BYTES);
    for i in 0..n {
        bytes.push(match bad {
            Some((k, label)) if k == i => label,
            _ => (i % 10) as u8,
        });
        bytes.extend((0..IMAGE_BYTES).map(|j| ((i * 31 + j) % 256) as u8));
    }
    bytes
}

// 10
fn cifar_parser(data: Option<&Path>) -> Check {
    let file = Path::new("fixture.bin");
    let good = records_with_label(7, None);
    let parsed = parse_records(&good, file, SplitName::Train).map_err(e)?;
    ensure(parsed.to_bytes() == good, || "fixture round-trip differs".into())?;
    let cases = [
        (good[..good.len() - 100].to_vec(), 6 * RECORD_BYTES as u64, "truncated"),
        (records_with_label(7, Some((4, 10))), 4 * RECORD_BYTES as u64, "label 10"),
        (records_with_label(7, Some((0, 255))), 0, "label 255"),
    ];
    for (bytes, offset, what) in &cases {
        match parse_records(bytes, file, SplitName::Train) {
            Err(Error::Parse { offset: got, .. }) if got == *offset => {}
            other => return Err(format!("{what}: expected parse error at {offset}, got {:?}", other.map(|d| d.len()))),
        }
    }
    let fixtures = format!("{} corrupted fixtures rejected at the right offsets", cases.len());
    let dir = data.ok_or_else(|| format!("{fixtures}; {}", missing_cifar()))?;
    let mut total = 0;
    for name in TRAIN_FILES.iter().chain([&TEST_FILE]) {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(e)?;
        let split = if *name == TEST_FILE { SplitName::Test } else { SplitName::Train };
        let d = parse_records(&bytes, &path, split).map_err(e)?;
        ensure(d.to_bytes() == bytes, || format!("{name} does not round-trip"))?;
        total += d.len();
    }
    ensure(total == 60_000, || format!("{total} records instead of 60000"))?;
    Ok(format!("{total} records round-trip byte-exact; {fixtures}"))
}

fn report_line(n: usize, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match &outcome {
        Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} [{secs:.1}s]"),
        Err(d) => println!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1}s]"),
    }
    outcome.is_ok()
}

fn main() -> ExitCode {
    panic::set_hook(Box::new(|_| {}));
    let data = cifar_dir();
    let mut ok = true;
    ok &= report_line(1, "grad-cam channel weights vs finite differences", cam_weights_vs_finite_differences);
    ok &= report_line(2, "second-order gradient of the map loss", second_order_gradient);
    ok &= report_line(3, "identity augmentation collapse", identity_augmentation_collapse);
    ok &= report_line(4, "spatial replay oracle", spatial_replay_oracle);
    ok &= report_line(5, "split protocol", split_protocol);
    ok &= report_line(6, "loss spot checks", loss_spot_checks);
    ok &= report_line(7, "determinism", determinism);
    let desk = match &data {
        Some(d) => panic::catch_unwind(AssertUnwindSafe(|| desk_runs(d))).unwrap_or_else(|_| Err("desk runs panicked".into())),
        None => Err(missing_cifar()),
    };
    ok &= report_line(8, "desk-scale directional check", || desk_directional(&desk));
    ok &= report_line(9, "map agreement improves with training", || cam_agreement_improves(&desk, data.as_deref()));
    ok &= report_line(10, "CIFAR-10 parser", || cifar_parser(data.as_deref()));
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
