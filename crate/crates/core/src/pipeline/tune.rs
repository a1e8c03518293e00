use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use super::{epoch_batches, f64_entry};
use crate::backbone::{
    forward_tape, forward_with_head, patch_embed, Activations, BackboneCheckpoint, BackboneVars, Head,
};
use crate::error::{Error, Result};
use crate::format::{
    canonical_text, header_get, header_parse, read_named_tensors, read_preamble, sha256_hex, write_named_tensors,
    write_preamble,
};
use crate::spiking::{
    freeze_spike_prompts, sd_unit, sf_layer_rate, IfConfig, PromptStack, PromptTransform, RateGradient, SpikeConfig,
    SpikePath,
};
use crate::tensor::{Sgd, Tape, Tensor, Var};

use super::dataset::Dataset;

pub const TUNED_MAGIC: &[u8; 8] = b"SNVPTTUN";
pub const TUNED_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    SpikeNvpt,
    Vpt,
    SfOnly,
    SdOnly,
    BinaryVpt,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Vpt, Method::BinaryVpt, Method::SfOnly, Method::SdOnly, Method::SpikeNvpt];

    pub fn name(self) -> &'static str {
        match self {
            Method::SpikeNvpt => "spike_nvpt",
            Method::Vpt => "vpt",
            Method::SfOnly => "sf_only",
            Method::SdOnly => "sd_only",
            Method::BinaryVpt => "binary_vpt",
        }
    }

    /// Transform applied to the continuous prompts during training.
    pub fn training_transform(self) -> PromptTransform {
        match self {
            Method::SpikeNvpt => PromptTransform::FilterThenSpike,
            Method::Vpt | Method::BinaryVpt => PromptTransform::Identity,
            Method::SfOnly => PromptTransform::FilterOnly,
            Method::SdOnly => PromptTransform::SpikeOnly,
        }
    }

    pub fn is_spike_family(self) -> bool {
        matches!(self, Method::SpikeNvpt | Method::SfOnly | Method::SdOnly)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown method `{s}`")))
    }
}

fn rate_gradient_name(r: RateGradient) -> &'static str {
    match r {
        RateGradient::ArcTan => "arctan",
        RateGradient::StraightThrough => "straight_through",
    }
}

fn parse_rate_gradient(s: &str) -> Result<RateGradient> {
    match s {
        "arctan" => Ok(RateGradient::ArcTan),
        "straight_through" => Ok(RateGradient::StraightThrough),
        _ => Err(Error::Parameter(format!("unknown rate_gradient `{s}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
    pub prompt_len: usize,
    pub prompt_init_std: f64,
    pub train_head: bool,
    /// Carry one extra, never-injected prompt (N + 1 prompts in total).
    pub reserve_extra_prompt: bool,
    /// `binary_vpt` only: threshold every layer's prompt, not just the first.
    pub binarize_all_layers: bool,
    pub rate_gradient: RateGradient,
    pub if_cfg: IfConfig,
    pub sd_cfg: SpikeConfig,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            method: Method::SpikeNvpt,
            epochs: 100,
            batch_size: 64,
            lr: 1.5,
            weight_decay: 0.001,
            momentum: 0.0,
            seed: 0,
            prompt_len: 10,
            prompt_init_std: 0.02,
            train_head: true,
            reserve_extra_prompt: false,
            binarize_all_layers: false,
            rate_gradient: RateGradient::ArcTan,
            if_cfg: IfConfig::default(),
            sd_cfg: SpikeConfig::default(),
        }
    }
}

const KEYS: [&str; 18] = [
    "batch_size",
    "binarize_all_layers",
    "epochs",
    "if.t_steps",
    "if.v_reset",
    "if.v_th",
    "lr",
    "method",
    "momentum",
    "prompt_init_std",
    "prompt_len",
    "rate_gradient",
    "reserve_extra_prompt",
    "sd.alpha",
    "sd.theta",
    "seed",
    "train_head",
    "weight_decay",
];

impl TuneConfig {
    /// Desk-scale settings for the synthetic-shapes task.
    pub fn desk(method: Method) -> Self {
        Self {
            method,
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.if_cfg.validate()?;
        self.sd_cfg.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.prompt_len == 0 {
            return Err(Error::Parameter("epochs, batch_size and prompt_len must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.prompt_init_std > 0.0) {
            return Err(Error::Parameter(format!(
                "bad momentum {} / weight_decay {} / prompt_init_std {}",
                self.momentum, self.weight_decay, self.prompt_init_std
            )));
        }
        Ok(())
    }

    pub fn to_entries(&self) -> BTreeMap<String, String> {
        let vals = [
            self.batch_size.to_string(),
            self.binarize_all_layers.to_string(),
            self.epochs.to_string(),
            self.if_cfg.t_steps.to_string(),
            f64_entry(self.if_cfg.v_reset),
            f64_entry(self.if_cfg.v_th),
            f64_entry(self.lr),
            self.method.name().to_string(),
            f64_entry(self.momentum),
            f64_entry(self.prompt_init_std),
            self.prompt_len.to_string(),
            rate_gradient_name(self.rate_gradient).to_string(),
            self.reserve_extra_prompt.to_string(),
            f64_entry(self.sd_cfg.alpha),
            f64_entry(self.sd_cfg.theta),
            self.seed.to_string(),
            self.train_head.to_string(),
            f64_entry(self.weight_decay),
        ];
        KEYS.iter().map(|k| k.to_string()).zip(vals).collect()
    }

    /// Overlays `entries` on `self`; unknown keys are rejected.
    pub fn with_entries(&self, entries: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = self.clone();
        for (k, v) in entries {
            let bad = || Error::Config(format!("`{k}` has invalid value `{v}`"));
            macro_rules! p {
                () => {
                    v.parse().map_err(|_| bad())?
                };
            }
            match k.as_str() {
                "batch_size" => c.batch_size = p!(),
                "binarize_all_layers" => c.binarize_all_layers = p!(),
                "epochs" => c.epochs = p!(),
                "if.t_steps" => c.if_cfg.t_steps = p!(),
                "if.v_reset" => c.if_cfg.v_reset = p!(),
                "if.v_th" => c.if_cfg.v_th = p!(),
                "lr" => c.lr = p!(),
                "method" => c.method = v.parse().map_err(|_| bad())?,
                "momentum" => c.momentum = p!(),
                "prompt_init_std" => c.prompt_init_std = p!(),
                "prompt_len" => c.prompt_len = p!(),
                "rate_gradient" => c.rate_gradient = parse_rate_gradient(v).map_err(|_| bad())?,
                "reserve_extra_prompt" => c.reserve_extra_prompt = p!(),
                "sd.alpha" => c.sd_cfg.alpha = p!(),
                "sd.theta" => c.sd_cfg.theta = p!(),
                "seed" => c.seed = p!(),
                "train_head" => c.train_head = p!(),
                "weight_decay" => c.weight_decay = p!(),
                _ => return Err(Error::Config(format!("unknown tune key `{k}`"))),
            }
        }
        Ok(c)
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(canonical_text(&self.to_entries()).as_bytes())
    }

    /// Human-readable list of settings that differ from the reference defaults.
    pub fn overrides(&self) -> Vec<String> {
        let reference = TuneConfig {
            method: self.method,
            seed: self.seed,
            ..TuneConfig::default()
        }
        .to_entries();
        self.to_entries()
            .into_iter()
            .filter(|(k, v)| reference.get(k) != Some(v))
            .map(|(k, v)| format!("{k}: {} -> {v}", reference[&k]))
            .collect()
    }

    pub fn spike_path(&self) -> SpikePath {
        SpikePath {
            if_cfg: self.if_cfg,
            sd_cfg: self.sd_cfg,
            rate_gradient: self.rate_gradient,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// Result of prompt tuning. `injected` is what inference feeds the backbone:
/// for spike-family methods it is the cached output of the spike path.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedModel {
    pub config: TuneConfig,
    pub prompts: PromptStack,
    pub head: Head,
    pub injected: Vec<Tensor>,
    pub backbone_fingerprint: String,
    pub log: TrainingLog,
}

/// The prompts a method injects at inference, recomputed from the
/// continuous prompts (the live pipeline).
pub fn inference_prompts(stack: &PromptStack, cfg: &TuneConfig) -> Result<Vec<Tensor>> {
    let n = stack.layer_count;
    let injected: Vec<Tensor> = match cfg.method {
        Method::SpikeNvpt => freeze_spike_prompts(stack, &cfg.if_cfg, &cfg.sd_cfg)?.0,
        Method::Vpt => stack.prompts.iter().map(Tensor::detached).collect(),
        Method::SfOnly => stack
            .prompts
            .iter()
            .map(|p| sf_layer_rate(p, &cfg.if_cfg))
            .collect::<Result<_>>()?,
        Method::SdOnly => stack.prompts.iter().map(|p| sd_unit(p, &cfg.sd_cfg)).collect(),
        Method::BinaryVpt => stack
            .prompts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == 0 || cfg.binarize_all_layers {
                    sd_unit(p, &cfg.sd_cfg)
                } else {
                    p.detached()
                }
            })
            .collect(),
    };
    Ok(injected.into_iter().take(n).collect())
}

impl TunedModel {
    pub fn method(&self) -> Method {
        self.config.method
    }

    /// Inference from the cached prompts.
    pub fn forward(&self, image: &Tensor, ckpt: &BackboneCheckpoint) -> Result<Activations> {
        forward_with_head(image, ckpt, &self.injected, &self.head)
    }

    /// Inference that recomputes the prompt path from the continuous prompts.
    pub fn forward_live(&self, image: &Tensor, ckpt: &BackboneCheckpoint) -> Result<Activations> {
        let prompts = inference_prompts(&self.prompts, &self.config)?;
        forward_with_head(image, ckpt, &prompts, &self.head)
    }

    pub fn check_backbone(&self, ckpt: &BackboneCheckpoint) -> Result<()> {
        if ckpt.weights_fingerprint() != self.backbone_fingerprint {
            return Err(Error::Contract("tuned model was trained against a different backbone".into()));
        }
        Ok(())
    }

    fn header(&self) -> BTreeMap<String, String> {
        let mut h: BTreeMap<String, String> =
            self.config.to_entries().into_iter().map(|(k, v)| (format!("tune.{k}"), v)).collect();
        let join = |xs: &[f64]| xs.iter().map(|v| f64_entry(*v)).collect::<Vec<_>>().join(",");
        h.insert("backbone_fingerprint".into(), self.backbone_fingerprint.clone());
        h.insert("log.epoch_loss".into(), join(&self.log.epoch_loss));
        h.insert("log.epoch_accuracy".into(), join(&self.log.epoch_accuracy));
        h.insert("prompt_count".into(), self.prompts.prompts.len().to_string());
        h.insert("layer_count".into(), self.prompts.layer_count.to_string());
        h.insert("injected_count".into(), self.injected.len().to_string());
        h
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_preamble(w, TUNED_MAGIC, TUNED_VERSION, &self.header())?;
        let names: Vec<String> = (0..self.prompts.prompts.len())
            .map(|i| format!("prompt.{i:03}"))
            .chain((0..self.injected.len()).map(|i| format!("injected.{i:03}")))
            .chain(["head.weight".to_string(), "head.bias".to_string()])
            .collect();
        let tensors = self
            .prompts
            .prompts
            .iter()
            .chain(&self.injected)
            .chain([&self.head.weight, &self.head.bias]);
        write_named_tensors(w, names.iter().map(String::as_str).zip(tensors).collect::<Vec<_>>().into_iter())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let h = read_preamble(r, TUNED_MAGIC, TUNED_VERSION)?;
        let tune: BTreeMap<String, String> = h
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("tune.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let config = TuneConfig::default()
            .with_entries(&tune)
            .map_err(|e| Error::Format(format!("tuned-model header: {e}")))?;
        let split = |key: &str| -> Result<Vec<f64>> {
            let raw = header_get(&h, key)?;
            if raw.is_empty() {
                return Ok(Vec::new());
            }
            raw.split(',')
                .map(|s| s.parse().map_err(|_| Error::Format(format!("bad number `{s}` in {key}"))))
                .collect()
        };
        let log = TrainingLog {
            epoch_loss: split("log.epoch_loss")?,
            epoch_accuracy: split("log.epoch_accuracy")?,
        };
        let prompt_count: usize = header_parse(&h, "prompt_count")?;
        let injected_count: usize = header_parse(&h, "injected_count")?;
        let layer_count: usize = header_parse(&h, "layer_count")?;
        let tensors = read_named_tensors(r)?;
        if tensors.len() != prompt_count + injected_count + 2 {
            return Err(Error::Format(format!("expected {} tensors, found {}", prompt_count + injected_count + 2, tensors.len())));
        }
        let mut it = tensors.into_iter().map(|(_, t)| t);
        let prompts: Vec<Tensor> = it.by_ref().take(prompt_count).map(Tensor::with_grad).collect();
        let injected: Vec<Tensor> = it.by_ref().take(injected_count).collect();
        let mut weight = it.next().expect("length checked");
        let mut bias = it.next().expect("length checked");
        weight.requires_grad = config.train_head;
        bias.requires_grad = config.train_head;
        Ok(Self {
            config,
            prompts: PromptStack::from_prompts(prompts, layer_count)?,
            head: Head { weight, bias },
            injected,
            backbone_fingerprint: header_get(&h, "backbone_fingerprint")?.to_string(),
            log,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

struct ImageGrad {
    loss: f64,
    correct: bool,
    prompts: Vec<Vec<f64>>,
    head_w: Vec<f64>,
    head_b: Vec<f64>,
}

fn image_grad(
    ckpt: &BackboneCheckpoint,
    head: &Head,
    injected: &[Tensor],
    embedded: &Tensor,
    label: usize,
) -> Result<ImageGrad> {
    let mut tape = Tape::new();
    let vars = BackboneVars::register(&mut tape, ckpt);
    let hw = tape.param(&head.weight);
    let hb = tape.param(&head.bias);
    let pv: Vec<Var> = injected.iter().map(|p| tape.param(p)).collect();
    let e = tape.param(embedded);
    let fv = forward_tape(&mut tape, &vars, (hw, hb), e, &pv, &ckpt.config)?;
    let logits = tape.value(fv.logits).data().to_vec();
    let correct = crate::backbone::argmax(&logits) == label;
    let loss = tape.cross_entropy(fv.logits, &[label])?;
    let loss_value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grad_or_zero = |v: Var| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
    Ok(ImageGrad {
        loss: loss_value,
        correct,
        prompts: pv.iter().map(|&v| grad_or_zero(v)).collect(),
        head_w: grad_or_zero(hw),
        head_b: grad_or_zero(hb),
    })
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Trains prompts (and the head) for `cfg.method` on a frozen backbone.
///
/// Panics if the backbone weights change during training.
pub fn tune(ckpt: &BackboneCheckpoint, data: &Dataset, cfg: &TuneConfig) -> Result<TunedModel> {
    cfg.validate()?;
    ckpt.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("empty tuning dataset".into()));
    }
    if data.images[0].shape() != [ckpt.config.channels, ckpt.config.image_size, ckpt.config.image_size] {
        return Err(Error::Contract(format!(
            "dataset images {:?} do not fit the backbone geometry",
            data.images[0].shape()
        )));
    }
    let fingerprint = ckpt.weights_fingerprint();
    let n_layers = ckpt.config.layer_count;
    let dim = ckpt.config.embed_dim;
    let mut stack = PromptStack::init(
        n_layers,
        cfg.prompt_len,
        dim,
        cfg.seed.wrapping_mul(7919).wrapping_add(17),
        cfg.prompt_init_std,
        cfg.reserve_extra_prompt,
    )?;
    let mut head = Head::zeros(dim, data.class_count)?;
    head.weight.requires_grad = cfg.train_head;
    head.bias.requires_grad = cfg.train_head;

    let embedded: Vec<Tensor> = data
        .images
        .par_iter()
        .map(|im| patch_embed(im, ckpt))
        .collect::<Result<_>>()?;
    let path = cfg.spike_path();
    let transform = cfg.method.training_transform();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut log = TrainingLog::default();

    for epoch in 0..cfg.epochs {
        let (mut total, mut correct) = (0.0, 0usize);
        for (step, batch) in epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let scale = 1.0 / batch.len() as f64;
            let (prompt_grads, head_w, head_b) = {
                let mut ptape = Tape::new();
                let leaves: Vec<Var> = stack.prompts.iter().map(|p| ptape.param(p)).collect();
                let outs = leaves[..n_layers]
                    .iter()
                    .map(|&v| path.apply_tape(&mut ptape, v, transform))
                    .collect::<Result<Vec<_>>>()?;
                let injected: Vec<Tensor> = outs.iter().map(|&v| ptape.value(v).detached().with_grad()).collect();

                let grads = batch
                    .par_iter()
                    .map(|&i| image_grad(ckpt, &head, &injected, &embedded[i], data.labels[i]))
                    .collect::<Result<Vec<_>>>()?;
                let mut seeds: Vec<Vec<f64>> = injected.iter().map(|t| vec![0.0; t.len()]).collect();
                let mut hw = vec![0.0; head.weight.len()];
                let mut hb = vec![0.0; head.bias.len()];
                for g in &grads {
                    if !g.loss.is_finite() {
                        return Err(Error::Training(format!(
                            "{} loss became {} at epoch {epoch}, step {step}",
                            cfg.method, g.loss
                        )));
                    }
                    total += g.loss;
                    correct += usize::from(g.correct);
                    for (s, pg) in seeds.iter_mut().zip(&g.prompts) {
                        add_into(s, pg);
                    }
                    add_into(&mut hw, &g.head_w);
                    add_into(&mut hb, &g.head_b);
                }
                let seeds: Vec<(Var, Vec<f64>)> = outs
                    .iter()
                    .zip(seeds)
                    .map(|(&v, s)| (v, s.into_iter().map(|x| x * scale).collect()))
                    .collect();
                ptape.backward_from(&seeds)?;
                let pg: Vec<Option<Vec<f64>>> = leaves.iter().map(|&v| ptape.grad(v).map(<[f64]>::to_vec)).collect();
                (pg, hw, hb)
            };
            for (p, g) in stack.prompts.iter_mut().zip(prompt_grads) {
                if let Some(g) = g {
                    p.accumulate_grad(&g)?;
                }
            }
            let mut params: Vec<&mut Tensor> = stack.prompts.iter_mut().collect();
            if cfg.train_head {
                head.weight.accumulate_grad(&head_w.iter().map(|v| v * scale).collect::<Vec<_>>())?;
                head.bias.accumulate_grad(&head_b.iter().map(|v| v * scale).collect::<Vec<_>>())?;
                params.push(&mut head.weight);
                params.push(&mut head.bias);
            }
            opt.step(&mut params);
        }
        log.epoch_loss.push(total / data.len() as f64);
        log.epoch_accuracy.push(correct as f64 / data.len() as f64);
        assert_eq!(
            ckpt.weights_fingerprint(),
            fingerprint,
            "backbone weights changed during {} tuning (epoch {epoch})",
            cfg.method
        );
    }

    let injected = inference_prompts(&stack, cfg)?;
    Ok(TunedModel {
        config: cfg.clone(),
        prompts: stack,
        head,
        injected,
        backbone_fingerprint: fingerprint,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::pipeline::dataset::{gen_dataset, DatasetSpec, ShapeKind, Split};

    fn backbone() -> BackboneCheckpoint {
        let cfg = BackboneConfig {
            embed_dim: 16,
            layer_count: 2,
            head_count: 2,
            mlp_ratio: 2,
            ..Default::default()
        };
        BackboneCheckpoint::init_random(cfg, 5).unwrap()
    }

    fn data() -> Dataset {
        gen_dataset(&DatasetSpec::new(ShapeKind::Target, 4, 12, 2, Split::Train)).unwrap()
    }

    fn small(method: Method) -> TuneConfig {
        TuneConfig {
            epochs: 2,
            batch_size: 6,
            prompt_len: 3,
            ..TuneConfig::desk(method)
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("lora".parse::<Method>().is_err());
    }

    #[test]
    fn entries_round_trip_and_reject_unknown_keys() {
        let mut c = TuneConfig::desk(Method::BinaryVpt);
        c.lr = 0.1 + 0.2;
        c.rate_gradient = RateGradient::StraightThrough;
        let back = TuneConfig::default().with_entries(&c.to_entries()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
        let bad = BTreeMap::from([("learning_rate".to_string(), "1".to_string())]);
        assert!(matches!(c.with_entries(&bad), Err(Error::Config(_))));
        let bad = BTreeMap::from([("epochs".to_string(), "many".to_string())]);
        assert!(matches!(c.with_entries(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_list_desk_changes() {
        assert!(TuneConfig::default().overrides().is_empty());
        let o = TuneConfig::desk(Method::Vpt).overrides();
        assert!(o.iter().any(|s| s.starts_with("epochs: 100 -> 30")));
        assert!(o.iter().all(|s| !s.starts_with("method")));
    }

    #[test]
    fn validation_rejects_bad_settings() {
        for c in [
            TuneConfig { lr: 0.0, ..TuneConfig::default() },
            TuneConfig { epochs: 0, ..TuneConfig::default() },
            TuneConfig { momentum: 1.0, ..TuneConfig::default() },
            TuneConfig { prompt_init_std: 0.0, ..TuneConfig::default() },
        ] {
            assert!(matches!(c.validate(), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn injected_prompts_have_method_specific_values() {
        let ck = backbone();
        let ds = data();
        let t = IfConfig::default().t_steps as f64;
        for m in Method::ALL {
            let model = tune(&ck, &ds, &small(m)).unwrap();
            assert_eq!(model.injected.len(), 2);
            assert_eq!(model.backbone_fingerprint, ck.weights_fingerprint());
            assert_eq!(model.log.epoch_loss.len(), 2);
            for (layer, p) in model.injected.iter().enumerate() {
                assert_eq!(p.shape(), [3, 16]);
                let binary = p.data().iter().all(|&v| v == 0.0 || v == 1.0);
                match m {
                    Method::SpikeNvpt | Method::SdOnly => assert!(binary),
                    Method::SfOnly => assert!(p.data().iter().all(|&v| {
                        let k = v * t;
                        k == k.round() && (0.0..=t).contains(&k)
                    })),
                    Method::BinaryVpt => assert_eq!(binary, layer == 0),
                    Method::Vpt => assert!(!binary),
                }
            }
            let img = &ds.images[0];
            assert_eq!(
                model.forward(img, &ck).unwrap().logits,
                model.forward_live(img, &ck).unwrap().logits
            );
        }
    }

    #[test]
    fn tuning_is_deterministic_and_moves_prompts() {
        let ck = backbone();
        let ds = data();
        let cfg = small(Method::SpikeNvpt);
        let a = tune(&ck, &ds, &cfg).unwrap();
        let b = tune(&ck, &ds, &cfg).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let start = PromptStack::init(2, 3, 16, cfg.seed.wrapping_mul(7919).wrapping_add(17), 0.02, false).unwrap();
        assert_ne!(a.prompts.prompts[0].data(), start.prompts[0].data());
        assert!(a.head.weight.data().iter().any(|&v| v != 0.0));
        let c = tune(&ck, &ds, &TuneConfig { seed: 9, ..cfg }).unwrap();
        assert_ne!(a.to_bytes().unwrap(), c.to_bytes().unwrap());
    }

    #[test]
    fn frozen_head_stays_zero() {
        let cfg = TuneConfig {
            train_head: false,
            ..small(Method::Vpt)
        };
        let model = tune(&backbone(), &data(), &cfg).unwrap();
        assert!(model.head.weight.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn model_file_round_trip() {
        let ck = backbone();
        let cfg = TuneConfig {
            reserve_extra_prompt: true,
            ..small(Method::BinaryVpt)
        };
        let model = tune(&ck, &data(), &cfg).unwrap();
        assert_eq!(model.prompts.prompts.len(), 3);
        assert_eq!(model.injected.len(), 2);
        let bytes = model.to_bytes().unwrap();
        let back = TunedModel::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, model);
        back.check_backbone(&ck).unwrap();
        let other = BackboneCheckpoint::init_random(ck.config, 6).unwrap();
        assert!(back.check_backbone(&other).is_err());
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(matches!(TunedModel::read_from(&mut corrupt.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_geometry_is_a_contract_error() {
        let ds = gen_dataset(&DatasetSpec {
            image_size: 16,
            ..DatasetSpec::new(ShapeKind::Target, 4, 4, 0, Split::Train)
        })
        .unwrap();
        assert!(matches!(tune(&backbone(), &ds, &small(Method::Vpt)), Err(Error::Contract(_))));
    }
}
