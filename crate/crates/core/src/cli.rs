//! Command-line entry point.
//!
//! Settings resolve in three layers: built-in defaults, then the config file
//! (`--config`), then command-line flags. The config file is flat
//! `key = value` text grouped under `[section]` headers; unknown keys are
//! rejected. Every command writes `manifest_<command>.json` next to its
//! outputs with the fully resolved settings and input hashes.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::backbone::{BackboneCheckpoint, BackboneConfig};
use crate::corruption::{write_pnm, CorruptionSpec, Family};
use crate::error::{Error, Result};
use crate::format::sha256_hex;
use crate::gradcheck;
use crate::pipeline::{
    corrupt_all, evaluate, feature_similarity, gen_dataset, pretrain_backbone, run_ablation_suite, tune,
    AblationReport, Dataset, DatasetSpec, Method, PretrainConfig, RunManifest, ShapeKind, Split, TuneConfig,
    TunedModel,
};

pub const OUT_ENV: &str = "SPIKE_NVPT_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "spike-nvpt", version, about = "Spiking visual prompt tuning experiments")]
pub struct Cli {
    /// Seed for data generation, pretraining, tuning and corruption draws.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default: $SPIKE_NVPT_OUT, else ./runs).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Sectioned `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic-shapes dataset split.
    GenData {
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        noise_floor: Option<f64>,
    },
    /// Pretrain a backbone on the source task.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tune prompts on a frozen backbone.
    Tune {
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate tuned models on the corruption grid.
    Eval {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Tuned model files (default: every tuned_*.model in the output directory).
        #[arg(long)]
        model: Vec<PathBuf>,
    },
    /// Tune and evaluate every method across seeds.
    Ablate {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        /// Comma-separated seed list.
        #[arg(long)]
        seeds: Option<String>,
        /// Comma-separated method list.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Clean-vs-corrupted feature cosine similarity per layer.
    Similarity {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Vec<PathBuf>,
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        intensity: Option<f64>,
        #[arg(long)]
        layers: Option<String>,
    },
    /// Finite-difference and surrogate-gradient checks.
    Gradcheck,
    /// Write PGM/PPM previews of one corrupted image.
    CorruptPreview {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        index: Option<usize>,
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        intensity: Option<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::Tune { .. } => "tune",
            Command::Eval { .. } => "eval",
            Command::Ablate { .. } => "ablate",
            Command::Similarity { .. } => "similarity",
            Command::Gradcheck => "gradcheck",
            Command::CorruptPreview { .. } => "corrupt-preview",
        }
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Check(_) => 4,
        _ => 1,
    }
}

/// Parses sectioned `key = value` text into `section.key` entries.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut section = String::new();
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        let key = if section.is_empty() {
            k.trim().to_string()
        } else {
            format!("{section}.{}", k.trim())
        };
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{key}`", n + 1)));
        }
    }
    Ok(out)
}

/// Every accepted key with its default value.
pub fn default_settings() -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    let mut put = |k: &str, v: String| {
        m.insert(k.to_string(), v);
    };
    put("seed", "0".into());
    put("data.kind", ShapeKind::Target.name().into());
    put("data.classes", "4".into());
    put("data.count", "400".into());
    put("data.split", "train".into());
    put("data.noise_floor", "0.03".into());
    put("data.image_size", "32".into());
    let p = PretrainConfig::default();
    put("pretrain.epochs", p.epochs.to_string());
    put("pretrain.batch_size", p.batch_size.to_string());
    put("pretrain.lr", p.lr.to_string());
    put("pretrain.momentum", p.momentum.to_string());
    put("pretrain.weight_decay", p.weight_decay.to_string());
    put("pretrain.patch_size", p.backbone.patch_size.to_string());
    put("pretrain.embed_dim", p.backbone.embed_dim.to_string());
    put("pretrain.layer_count", p.backbone.layer_count.to_string());
    put("pretrain.head_count", p.backbone.head_count.to_string());
    put("pretrain.mlp_ratio", p.backbone.mlp_ratio.to_string());
    for (k, v) in TuneConfig::desk(Method::SpikeNvpt).to_entries() {
        if k != "seed" {
            put(&format!("tune.{k}"), v);
        }
    }
    put("eval.families", Family::ALL.map(Family::name).join(","));
    put("ablate.seeds", "0,1,2,3,4".into());
    put("ablate.methods", Method::ALL.map(Method::name).join(","));
    put("similarity.family", Family::GaussianNoise.name().into());
    put("similarity.intensity", "0.3".into());
    put("similarity.layers", "1,3".into());
    put("similarity.count", "100".into());
    put("corrupt.family", Family::Jpeg.name().into());
    put("corrupt.intensity", "5".into());
    put("corrupt.index", "0".into());
    m
}

/// Resolved settings: defaults overlaid with config-file and flag values.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(overlay: &BTreeMap<String, String>) -> Result<Self> {
        let mut values = default_settings();
        for (k, v) in overlay {
            match values.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Error::Config(format!("unknown config key `{k}`"))),
            }
        }
        Ok(Self { values })
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    pub fn get<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = &self.values[key];
        raw.parse()
            .map_err(|_| Error::Config(format!("`{key}` has invalid value `{raw}`")))
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        self.values[key]
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("`{key}` has invalid item `{s}`")))
            })
            .collect()
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn section(&self, name: &str) -> BTreeMap<String, String> {
        let prefix = format!("{name}.");
        self.values
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|k| (k.to_string(), v.clone())))
            .collect()
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        Ok(DatasetSpec {
            kind: self.get::<String>("data.kind")?.parse().map_err(config)?,
            class_count: self.get("data.classes")?,
            count: self.get("data.count")?,
            seed: self.seed()?,
            noise_floor: self.get("data.noise_floor")?,
            image_size: self.get("data.image_size")?,
            split: self.get::<String>("data.split")?.parse().map_err(config)?,
        })
    }

    pub fn pretrain_config(&self) -> Result<PretrainConfig> {
        let cfg = PretrainConfig {
            backbone: BackboneConfig {
                image_size: self.get("data.image_size")?,
                patch_size: self.get("pretrain.patch_size")?,
                embed_dim: self.get("pretrain.embed_dim")?,
                layer_count: self.get("pretrain.layer_count")?,
                head_count: self.get("pretrain.head_count")?,
                mlp_ratio: self.get("pretrain.mlp_ratio")?,
                prompt_len: self.get("tune.prompt_len")?,
                ..BackboneConfig::default()
            },
            epochs: self.get("pretrain.epochs")?,
            batch_size: self.get("pretrain.batch_size")?,
            lr: self.get("pretrain.lr")?,
            momentum: self.get("pretrain.momentum")?,
            weight_decay: self.get("pretrain.weight_decay")?,
            seed: self.seed()?,
        };
        cfg.validate().map_err(config)?;
        Ok(cfg)
    }

    pub fn tune_config(&self) -> Result<TuneConfig> {
        let mut entries = self.section("tune");
        entries.insert("seed".into(), self.seed()?.to_string());
        let cfg = TuneConfig::default().with_entries(&entries).map_err(config)?;
        cfg.validate().map_err(config)?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<Vec<CorruptionSpec>> {
        let seed = self.seed()?;
        let families: Vec<Family> = self.list::<String>("eval.families")?
            .iter()
            .map(|f| f.parse().map_err(config))
            .collect::<Result<_>>()?;
        Ok(families
            .into_iter()
            .flat_map(|f| f.default_grid().into_iter().map(move |i| CorruptionSpec::new(f, i, seed)))
            .collect())
    }
}

fn config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn resolve_out(flag: Option<&Path>) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

fn data_file(out: &Path, kind: ShapeKind, split: Split) -> PathBuf {
    out.join(format!("{}_{}.dat", kind.name(), split.name()))
}

fn model_file(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(format!("tuned_{}_seed{seed}.model", method.name()))
}

struct Ctx {
    out: PathBuf,
    settings: Settings,
    manifest: RunManifest,
}

impl Ctx {
    fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.manifest.hashes.insert(label.to_string(), file_hash(path)?);
        self.manifest
            .config
            .insert(format!("input.{label}"), path.display().to_string());
        Ok(())
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, bytes)?;
        self.manifest.outputs.push(name.to_string());
        Ok(path)
    }

    fn output(&mut self, path: &Path) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.manifest.outputs.push(name);
    }

    fn finish(mut self, command: &str) -> Result<()> {
        for (k, v) in &self.settings.values {
            self.manifest.config.insert(k.clone(), v.clone());
        }
        let json = self.manifest.to_json()?;
        fs::write(self.out.join(format!("manifest_{command}.json")), json)?;
        Ok(())
    }
}

fn load_models(out: &Path, paths: &[PathBuf]) -> Result<Vec<(PathBuf, TunedModel)>> {
    let mut files: Vec<PathBuf> = paths.to_vec();
    if files.is_empty() {
        for entry in fs::read_dir(out)? {
            let p = entry?.path();
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if name.starts_with("tuned_") && name.ends_with(".model") {
                files.push(p);
            }
        }
        files.sort();
    }
    if files.is_empty() {
        return Err(Error::Config(format!("no tuned models found in {}", out.display())));
    }
    files
        .into_iter()
        .map(|p| TunedModel::load(&p).map(|m| (p, m)))
        .collect()
}

/// Runs one parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let overlay = match &cli.config {
        Some(p) => parse_config(&fs::read_to_string(p)?)?,
        None => BTreeMap::new(),
    };
    let mut settings = Settings::new(&overlay)?;
    if let Some(seed) = cli.seed {
        settings.set("seed", seed)?;
    }
    let out = resolve_out(cli.out.as_deref());
    fs::create_dir_all(&out)?;
    let command = cli.command.name();
    let mut ctx = Ctx {
        out: out.clone(),
        manifest: RunManifest::new(command, BTreeMap::new()),
        settings,
    };
    if let Some(p) = &cli.config {
        ctx.input("config", p)?;
    }

    match cli.command {
        Command::GenData {
            kind,
            classes,
            count,
            split,
            noise_floor,
        } => {
            let s = &mut ctx.settings;
            if let Some(v) = kind {
                s.set("data.kind", v)?;
            }
            if let Some(v) = classes {
                s.set("data.classes", v)?;
            }
            if let Some(v) = count {
                s.set("data.count", v)?;
            }
            if let Some(v) = split {
                s.set("data.split", v)?;
            }
            if let Some(v) = noise_floor {
                s.set("data.noise_floor", v)?;
            }
            let spec = ctx.settings.dataset_spec()?;
            let ds = gen_dataset(&spec).map_err(config)?;
            let path = data_file(&out, spec.kind, spec.split);
            ds.save(&path)?;
            ctx.output(&path);
            ctx.manifest.hashes.insert("dataset".into(), ds.content_hash()?);
            println!("wrote {} ({} images)", path.display(), ds.len());
        }
        Command::Pretrain { data } => {
            let path = data.unwrap_or_else(|| data_file(&out, ShapeKind::Source, Split::Train));
            ctx.input("data", &path)?;
            let ds = Dataset::load(&path)?;
            let cfg = ctx.settings.pretrain_config()?;
            let (ckpt, report) = pretrain_backbone(&ds, &cfg)?;
            let ck = out.join("backbone.ckpt");
            ckpt.save(&ck)?;
            ctx.output(&ck);
            ctx.manifest.hashes.insert("weights".into(), ckpt.weights_fingerprint());
            ctx.manifest.hashes.insert("recipe".into(), ckpt.provenance.recipe_hash.clone());
            let log: String = report
                .epoch_loss
                .iter()
                .enumerate()
                .map(|(e, l)| format!("epoch {e} loss {l}\n"))
                .chain([format!("source_train_accuracy {}\n", report.train_accuracy)])
                .collect();
            ctx.write("pretrain_log.txt", log.as_bytes())?;
            println!("source train accuracy {:.4}", report.train_accuracy);
        }
        Command::Tune { method, ckpt, data } => {
            if let Some(m) = method {
                ctx.settings.set("tune.method", m)?;
            }
            let cfg = ctx.settings.tune_config()?;
            let ck_path = ckpt.unwrap_or_else(|| out.join("backbone.ckpt"));
            let data_path = data.unwrap_or_else(|| data_file(&out, ShapeKind::Target, Split::Train));
            ctx.input("ckpt", &ck_path)?;
            ctx.input("data", &data_path)?;
            let backbone = BackboneCheckpoint::load(&ck_path)?;
            let ds = Dataset::load(&data_path)?;
            let model = tune(&backbone, &ds, &cfg)?;
            let path = model_file(&out, cfg.method, cfg.seed);
            model.save(&path)?;
            ctx.output(&path);
            ctx.manifest.overrides = cfg.overrides();
            ctx.manifest.hashes.insert("tune_config".into(), cfg.config_hash());
            println!(
                "{} seed {}: final train accuracy {:.4}",
                cfg.method,
                cfg.seed,
                model.log.epoch_accuracy.last().copied().unwrap_or(0.0)
            );
        }
        Command::Eval { ckpt, data, model } => {
            let ck_path = ckpt.unwrap_or_else(|| out.join("backbone.ckpt"));
            let data_path = data.unwrap_or_else(|| data_file(&out, ShapeKind::Target, Split::Test));
            ctx.input("ckpt", &ck_path)?;
            ctx.input("data", &data_path)?;
            let backbone = BackboneCheckpoint::load(&ck_path)?;
            let ds = Dataset::load(&data_path)?;
            let grid = ctx.settings.grid()?;
            let mut runs = Vec::new();
            for (i, (p, m)) in load_models(&out, &model)?.into_iter().enumerate() {
                ctx.input(&format!("model{i}"), &p)?;
                runs.push((m.method(), evaluate(&m, &backbone, &ds, &grid)?));
            }
            let report = AblationReport::from_reports(&grid, &runs);
            ctx.write("eval.csv", report.to_csv()?.as_bytes())?;
            let text = report.to_text();
            ctx.write("eval.txt", text.as_bytes())?;
            print!("{text}");
        }
        Command::Ablate {
            ckpt,
            train,
            test,
            seeds,
            methods,
        } => {
            if let Some(v) = seeds {
                ctx.settings.set("ablate.seeds", v)?;
            }
            if let Some(v) = methods {
                ctx.settings.set("ablate.methods", v)?;
            }
            let base = ctx.settings.tune_config()?;
            let seeds: Vec<u64> = ctx.settings.list("ablate.seeds")?;
            let methods: Vec<Method> = ctx
                .settings
                .list::<String>("ablate.methods")?
                .iter()
                .map(|m| m.parse().map_err(config))
                .collect::<Result<_>>()?;
            let ck_path = ckpt.unwrap_or_else(|| out.join("backbone.ckpt"));
            let train_path = train.unwrap_or_else(|| data_file(&out, ShapeKind::Target, Split::Train));
            let test_path = test.unwrap_or_else(|| data_file(&out, ShapeKind::Target, Split::Test));
            ctx.input("ckpt", &ck_path)?;
            ctx.input("train", &train_path)?;
            ctx.input("test", &test_path)?;
            let backbone = BackboneCheckpoint::load(&ck_path)?;
            let run = run_ablation_suite(
                &backbone,
                &Dataset::load(&train_path)?,
                &Dataset::load(&test_path)?,
                &base,
                &methods,
                &seeds,
                &ctx.settings.grid()?,
            )?;
            ctx.manifest.overrides = base.overrides();
            ctx.write("ablation.csv", run.report.to_csv()?.as_bytes())?;
            let text = run.report.to_text();
            ctx.write("ablation.txt", text.as_bytes())?;
            print!("{text}");
        }
        Command::Similarity {
            ckpt,
            data,
            model,
            family,
            intensity,
            layers,
        } => {
            if let Some(v) = family {
                ctx.settings.set("similarity.family", v)?;
            }
            if let Some(v) = intensity {
                ctx.settings.set("similarity.intensity", v)?;
            }
            if let Some(v) = layers {
                ctx.settings.set("similarity.layers", v)?;
            }
            let ck_path = ckpt.unwrap_or_else(|| out.join("backbone.ckpt"));
            let data_path = data.unwrap_or_else(|| data_file(&out, ShapeKind::Target, Split::Test));
            ctx.input("ckpt", &ck_path)?;
            ctx.input("data", &data_path)?;
            let backbone = BackboneCheckpoint::load(&ck_path)?;
            let ds = Dataset::load(&data_path)?;
            let fam: Family = ctx.settings.get::<String>("similarity.family")?.parse().map_err(config)?;
            let spec = CorruptionSpec::new(fam, ctx.settings.get("similarity.intensity")?, ctx.settings.seed()?);
            spec.validate().map_err(config)?;
            let layers: Vec<usize> = ctx.settings.list("similarity.layers")?;
            let count: usize = ctx.settings.get("similarity.count")?;
            let clean = &ds.images[..count.min(ds.len())];
            let noisy = corrupt_all(clean, &spec)?;
            let mut csv_text = String::from("method,seed");
            for l in &layers {
                csv_text.push_str(&format!(",layer{l}"));
            }
            csv_text.push('\n');
            for (i, (p, m)) in load_models(&out, &model)?.into_iter().enumerate() {
                ctx.input(&format!("model{i}"), &p)?;
                let sims = feature_similarity(&m, &backbone, clean, &noisy, &layers).map_err(|e| match e {
                    Error::Index(msg) => Error::Config(msg),
                    other => other,
                })?;
                csv_text.push_str(&format!("{},{}", m.method(), m.config.seed));
                for s in sims {
                    csv_text.push_str(&format!(",{s}"));
                }
                csv_text.push('\n');
            }
            ctx.write("similarity.csv", csv_text.as_bytes())?;
            print!("{csv_text}");
        }
        Command::Gradcheck => {
            let results = gradcheck::run_suite(ctx.settings.seed()?)?;
            let text: String = results.iter().map(|r| r.line() + "\n").collect();
            ctx.write("gradcheck.txt", text.as_bytes())?;
            print!("{text}");
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            ctx.finish(command)?;
            if !failed.is_empty() {
                return Err(Error::Check(format!("gradient checks failed: {}", failed.join(", "))));
            }
            return Ok(());
        }
        Command::CorruptPreview {
            data,
            index,
            family,
            intensity,
        } => {
            if let Some(v) = family {
                ctx.settings.set("corrupt.family", v)?;
            }
            if let Some(v) = intensity {
                ctx.settings.set("corrupt.intensity", v)?;
            }
            if let Some(v) = index {
                ctx.settings.set("corrupt.index", v)?;
            }
            let ds = match data {
                Some(p) => {
                    ctx.input("data", &p)?;
                    Dataset::load(&p)?
                }
                None => gen_dataset(&ctx.settings.dataset_spec()?).map_err(config)?,
            };
            let idx: usize = ctx.settings.get("corrupt.index")?;
            let image = ds
                .images
                .get(idx)
                .ok_or_else(|| Error::Config(format!("image index {idx} outside dataset of {}", ds.len())))?;
            let fam: Family = ctx.settings.get::<String>("corrupt.family")?.parse().map_err(config)?;
            let level: f64 = ctx.settings.get("corrupt.intensity")?;
            let spec = CorruptionSpec::new(fam, level, ctx.settings.seed()?);
            spec.validate().map_err(config)?;
            let corrupted = spec.apply(image, idx as u64)?;
            let ext = if image.shape()[0] == 1 { "pgm" } else { "ppm" };
            for (name, img) in [
                (format!("preview_clean.{ext}"), image),
                (format!("preview_{fam}_{level}.{ext}"), &corrupted),
            ] {
                let path = out.join(&name);
                let mut w = BufWriter::new(fs::File::create(&path)?);
                write_pnm(&mut w, img)?;
                ctx.output(&path);
                println!("wrote {}", path.display());
            }
        }
    }
    ctx.finish(command)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_sections_flatten() {
        let m = parse_config("seed = 3\n# note\n[tune]\nlr = 0.1  # inline\nmethod = vpt\n").unwrap();
        assert_eq!(m["seed"], "3");
        assert_eq!(m["tune.lr"], "0.1");
        assert_eq!(m["tune.method"], "vpt");
    }

    #[test]
    fn malformed_and_duplicate_lines_are_config_errors() {
        assert!(matches!(parse_config("[a]\nnot a pair\n"), Err(Error::Config(_))));
        assert!(matches!(parse_config("x = 1\nx = 2\n"), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let m = parse_config("[tune]\nlearning_rate = 0.1\n").unwrap();
        assert!(matches!(Settings::new(&m), Err(Error::Config(_))));
    }

    #[test]
    fn settings_resolve_typed_configs() {
        let m = parse_config("seed = 7\n[tune]\nmethod = sd_only\nepochs = 3\n").unwrap();
        let s = Settings::new(&m).unwrap();
        let t = s.tune_config().unwrap();
        assert_eq!(t.method, Method::SdOnly);
        assert_eq!(t.epochs, 3);
        assert_eq!(t.seed, 7);
        assert_eq!(s.pretrain_config().unwrap().seed, 7);
        assert_eq!(s.grid().unwrap().len(), 16);
        let bad = Settings::new(&parse_config("[tune]\nmethod = lora\n").unwrap()).unwrap();
        assert!(matches!(bad.tune_config(), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::Check("x".into())), 4);
    }
}
