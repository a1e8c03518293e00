//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spike_nvpt::backbone::BackboneCheckpoint;
use spike_nvpt::corruption::{jpeg_compress, CorruptionSpec, Family, JPEG_QUALITIES};
use spike_nvpt::gradcheck;
use spike_nvpt::pipeline::{
    corrupt_all, evaluate, feature_similarity, gen_dataset, pretrain_backbone, tune, Dataset, DatasetSpec,
    EvalReport, Method, PretrainConfig, ShapeKind, Split, TuneConfig, TunedModel,
};
use spike_nvpt::spiking::{arctan_surrogate, if_rate_closed_form, if_steps_on_this_thread, sf_layer_rate, IfConfig};
use spike_nvpt::tensor::Tensor;

const TREND_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const GRID_SEED: u64 = 5;
const SIMILARITY_SEED: u64 = 9;
const SIMILARITY_IMAGES: usize = 50;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

struct Fixture {
    ckpt: BackboneCheckpoint,
    train: Dataset,
    test: Dataset,
}

struct TrendRun {
    seed: u64,
    vpt: (TunedModel, EvalReport, f64),
    spike: (TunedModel, EvalReport, f64),
}

fn fixture() -> Fixture {
    let t = Instant::now();
    let source = gen_dataset(&DatasetSpec::new(ShapeKind::Source, 4, 400, 0, Split::Train)).unwrap();
    let (ckpt, report) = pretrain_backbone(&source, &PretrainConfig::default()).unwrap();
    println!(
        "  pretrained backbone: source accuracy {:.3} in {:.1}s",
        report.train_accuracy,
        t.elapsed().as_secs_f64()
    );
    Fixture {
        ckpt,
        train: gen_dataset(&DatasetSpec::new(ShapeKind::Target, 4, 400, 1, Split::Train)).unwrap(),
        test: gen_dataset(&DatasetSpec::new(ShapeKind::Target, 4, 200, 1, Split::Test)).unwrap(),
    }
}

fn gaussian_grid() -> Vec<CorruptionSpec> {
    Family::GaussianNoise
        .default_grid()
        .iter()
        .map(|&m| CorruptionSpec::new(Family::GaussianNoise, m, GRID_SEED))
        .collect()
}

fn trend_runs(fx: &Fixture) -> Vec<TrendRun> {
    let grid = gaussian_grid();
    let clean = &fx.test.images[..SIMILARITY_IMAGES];
    let noisy = corrupt_all(clean, &CorruptionSpec::new(Family::GaussianNoise, 0.3, SIMILARITY_SEED)).unwrap();
    let last = fx.ckpt.config.layer_count - 1;
    let run = |method: Method, seed: u64| {
        let model = tune(&fx.ckpt, &fx.train, &TuneConfig { seed, ..TuneConfig::desk(method) }).unwrap();
        let report = evaluate(&model, &fx.ckpt, &fx.test, &grid).unwrap();
        let sim = feature_similarity(&model, &fx.ckpt, clean, &noisy, &[last]).unwrap()[0];
        (model, report, sim)
    };
    TREND_SEEDS
        .iter()
        .map(|&seed| {
            let t = Instant::now();
            let r = TrendRun {
                seed,
                vpt: run(Method::Vpt, seed),
                spike: run(Method::SpikeNvpt, seed),
            };
            println!("  trend seed {seed} done in {:.1}s", t.elapsed().as_secs_f64());
            r
        })
        .collect()
}

fn noisy_mid(r: &EvalReport) -> f64 {
    let cells: Vec<f64> = r
        .cells
        .iter()
        .filter(|c| (0.2..=0.4).contains(&c.intensity))
        .map(|c| c.accuracy)
        .collect();
    cells.iter().sum::<f64>() / cells.len() as f64
}

fn ac1_if_oracle() -> Outcome {
    let t = Instant::now();
    let cfg = IfConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs: Vec<f64> = (0..1000).map(|_| rng.random_range(-0.05..=0.05)).collect();
    let rates = sf_layer_rate(&Tensor::new(&[1000], inputs.clone()).unwrap(), &cfg).unwrap();
    let mismatches = inputs
        .iter()
        .zip(rates.data())
        .filter(|(&p, &r)| if_rate_closed_form(p, &cfg).unwrap() != r)
        .count();
    let secs = t.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 1.0,
        format!("{mismatches} mismatches of 1000, {secs:.3}s"),
    )
}

fn ac2_surrogate() -> Outcome {
    let r = gradcheck::surrogate_check(2, 100).unwrap();
    let at_zero = arctan_surrogate(0.0, 2.0);
    outcome(
        r.passed() && r.samples == 100 && at_zero == 1.0,
        format!("max rel error {:e} over {} points, surrogate(0) = {at_zero}", r.max_rel_error, r.samples),
    )
}

fn ac3_autodiff() -> Outcome {
    let t = Instant::now();
    let results = gradcheck::run_suite(3).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let forward = results.iter().find(|r| r.name.contains("forward")).expect("forward check present");
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    outcome(
        failed.is_empty() && forward.samples >= 20 && secs < 30.0,
        format!(
            "{} checks, failed {:?}, forward samples {}, worst rel error {worst:e}, {secs:.1}s",
            results.len(),
            failed,
            forward.samples
        ),
    )
}

fn ac4_binarity(fx: &Fixture, runs: &[TrendRun]) -> Outcome {
    let images = &fx.test.images[..100];
    let mut problems = Vec::new();
    for r in runs {
        let m = &r.spike.0;
        if !m.injected.iter().all(|p| p.data().iter().all(|&v| v == 0.0 || v == 1.0)) {
            problems.push(format!("seed {} has non-binary prompts", r.seed));
        }
        let before = if_steps_on_this_thread();
        let frozen: Vec<Vec<f64>> = images.iter().map(|im| m.forward(im, &fx.ckpt).unwrap().logits.data().to_vec()).collect();
        let frozen_steps = if_steps_on_this_thread() - before;
        let live: Vec<Vec<f64>> = images.iter().map(|im| m.forward_live(im, &fx.ckpt).unwrap().logits.data().to_vec()).collect();
        if frozen != live {
            problems.push(format!("seed {} frozen logits differ from live", r.seed));
        }
        if frozen_steps != 0 {
            problems.push(format!("seed {} ran {frozen_steps} IF steps at inference", r.seed));
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} spike_nvpt models, 100 images each, no IF steps at inference", runs.len())
        } else {
            problems.join("; ")
        },
    )
}

fn ac5_frozen_backbone(fx: &Fixture) -> Outcome {
    let before = fx.ckpt.to_bytes().unwrap();
    let train = fx.train.take(60);
    let mut changed = Vec::new();
    for m in Method::ALL {
        let cfg = TuneConfig {
            epochs: 3,
            ..TuneConfig::desk(m)
        };
        let model = tune(&fx.ckpt, &train, &cfg).unwrap();
        if fx.ckpt.to_bytes().unwrap() != before || model.backbone_fingerprint != fx.ckpt.weights_fingerprint() {
            changed.push(m.name());
        }
    }
    outcome(
        changed.is_empty(),
        format!("5 methods tuned, backbone changed for {changed:?}"),
    )
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn ac6_corruption(fx: &Fixture) -> Outcome {
    let batch = &fx.test.images[..16];
    let mut problems = Vec::new();
    for f in Family::ALL {
        let mut prev = -1.0;
        for level in f.default_grid() {
            let spec = CorruptionSpec::new(f, level, 11);
            let out = corrupt_all(batch, &spec).unwrap();
            if out != corrupt_all(batch, &spec).unwrap() {
                problems.push(format!("{f}:{level} not deterministic"));
            }
            if out.iter().any(|t| t.shape() != batch[0].shape() || t.data().iter().any(|v| !(0.0..=1.0).contains(v))) {
                problems.push(format!("{f}:{level} out of range"));
            }
            let err = batch.iter().zip(&out).map(|(a, b)| mse(a, b)).sum::<f64>() / batch.len() as f64;
            if err < prev {
                problems.push(format!("{f}:{level} error {err} below previous {prev}"));
            }
            prev = err;
        }
    }
    let jpeg: Vec<f64> = JPEG_QUALITIES
        .iter()
        .map(|&q| {
            batch
                .iter()
                .map(|im| mse(im, &jpeg_compress(im, q as u32).unwrap()))
                .sum::<f64>()
                / batch.len() as f64
        })
        .collect();
    if !jpeg.windows(2).all(|w| w[0] < w[1]) {
        problems.push(format!("jpeg mse not increasing: {jpeg:?}"));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("4 families x 4 levels on 16 images, jpeg mse {jpeg:.5?}")
        } else {
            problems.join("; ")
        },
    )
}

fn ac7_robustness(runs: &[TrendRun]) -> Outcome {
    let n = runs.len() as f64;
    let vpt_clean = runs.iter().map(|r| r.vpt.1.clean).sum::<f64>() / n;
    let spike_clean = runs.iter().map(|r| r.spike.1.clean).sum::<f64>() / n;
    let gap = (spike_clean - vpt_clean) * 100.0;
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", noisy_mid(&r.spike.1), noisy_mid(&r.vpt.1)))
        .collect();
    let wins = runs.iter().filter(|r| noisy_mid(&r.spike.1) >= noisy_mid(&r.vpt.1)).count();
    let a = gap.abs() <= 3.0;
    let b = wins >= 3;
    outcome(
        a && b,
        format!(
            "(a) {}: clean spike_nvpt {:.2}% vpt {:.2}% gap {gap:+.2} pts; (b) {}: noisy wins {wins}/5, spike/vpt per seed {per_seed:?}",
            if a { "pass" } else { "fail" },
            spike_clean * 100.0,
            vpt_clean * 100.0,
            if b { "pass" } else { "fail" },
        ),
    )
}

fn ac8_similarity(fx: &Fixture, runs: &[TrendRun]) -> Outcome {
    let wins = runs.iter().filter(|r| r.spike.2 >= r.vpt.2).count();
    let in_range = runs.iter().all(|r| (-1.0..=1.0).contains(&r.spike.2) && (-1.0..=1.0).contains(&r.vpt.2));
    let clean = &fx.test.images[..8];
    let last = fx.ckpt.config.layer_count - 1;
    let self_sims: Vec<f64> = runs
        .iter()
        .flat_map(|r| [&r.vpt.0, &r.spike.0])
        .map(|m| feature_similarity(m, &fx.ckpt, clean, clean, &[0, last]).unwrap())
        .flatten()
        .collect();
    let identity = self_sims.iter().all(|&s| s == 1.0);
    let per_seed: Vec<String> = runs.iter().map(|r| format!("{:.3}/{:.3}", r.spike.2, r.vpt.2)).collect();
    outcome(
        wins * 2 > runs.len() && in_range && identity,
        format!("spike_nvpt >= vpt in {wins}/5 seeds (spike/vpt {per_seed:?}), range ok {in_range}, clean-vs-clean 1.0 {identity}"),
    )
}

fn run_ablate(bin: &str, dir: &Path, cfg: &Path) -> Result<String, String> {
    let out = Command::new(bin)
        .args(["--out", dir.to_str().unwrap(), "--config", cfg.to_str().unwrap(), "ablate"])
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    fs::read_to_string(dir.join("ablation.csv")).map_err(|e| e.to_string())
}

fn ac9_report(fx: &Fixture) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("ablate.cfg");
    fs::write(&cfg, "[tune]\nepochs = 4\n[ablate]\nseeds = 0,1\n").unwrap();
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        fs::create_dir_all(&dir).unwrap();
        fx.ckpt.save(dir.join("backbone.ckpt")).unwrap();
        fx.train.take(80).save(dir.join("synthetic-shapes_train.dat")).unwrap();
        fx.test.take(80).save(dir.join("synthetic-shapes_test.dat")).unwrap();
        match run_ablate(env!("CARGO_BIN_EXE_spike-nvpt"), &dir, &cfg) {
            Ok(c) => csvs.push(c),
            Err(e) => return outcome(false, format!("ablate failed: {e}")),
        }
    }
    let mut problems = Vec::new();
    if csvs[0] != csvs[1] {
        problems.push("reruns differ".to_string());
    }
    let mut rd = csv::Reader::from_reader(csvs[0].as_bytes());
    let header: Vec<String> = rd.headers().unwrap().iter().map(str::to_string).collect();
    if header.len() != 3 + 16 + 4 {
        problems.push(format!("{} columns", header.len()));
    }
    let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
    let methods: Vec<&str> = rows.iter().filter(|r| &r[1] == "mean").map(|r| r.get(0).unwrap()).collect();
    if methods.len() != 5 || rows.len() != 15 {
        problems.push(format!("{} rows, mean rows for {methods:?}", rows.len()));
    }
    for row in &rows {
        for f in Family::ALL {
            let idx: Vec<usize> = header
                .iter()
                .enumerate()
                .filter(|(_, h)| h.starts_with(&format!("{f}:")) && !h.ends_with(":avg"))
                .map(|(i, _)| i)
                .collect();
            let avg_idx = header.iter().position(|h| *h == format!("{f}:avg")).unwrap();
            let cells: Vec<f64> = idx.iter().map(|&i| row[i].parse().unwrap()).collect();
            let recomputed = cells.iter().sum::<f64>() / cells.len() as f64;
            if idx.len() != 4 || row[avg_idx].parse::<f64>().unwrap() != recomputed {
                problems.push(format!("{} {} {f} average mismatch", &row[0], &row[1]));
            }
        }
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} columns, {} rows, averages exact, reruns byte-identical", header.len(), rows.len())
        } else {
            problems.join("; ")
        },
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(&str, Outcome)> = vec![
        ("AC1 IF oracle equivalence", ac1_if_oracle()),
        ("AC2 surrogate-gradient exactness", ac2_surrogate()),
        ("AC3 autodiff integrity", ac3_autodiff()),
    ];
    let fx = fixture();
    results.push(("AC6 corruption suite", ac6_corruption(&fx)));
    results.push(("AC5 frozen-backbone invariant", ac5_frozen_backbone(&fx)));
    results.push(("AC9 report fidelity", ac9_report(&fx)));
    let runs = trend_runs(&fx);
    results.push(("AC4 binarity and freezing", ac4_binarity(&fx, &runs)));
    results.push(("AC7 desk-scale robustness trend", ac7_robustness(&runs)));
    results.push(("AC8 feature-stability trend", ac8_similarity(&fx, &runs)));
    results.sort_by_key(|(name, _)| name[2..4].trim().parse::<u32>().unwrap_or(0));

    println!();
    for (name, o) in &results {
        println!("{} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|(_, o)| !o.passed).count();
    println!(
        "\nacceptance: {} passed, {failed} failed in {:.0}s",
        results.len() - failed,
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
