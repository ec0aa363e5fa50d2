//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use abc_core::checkpoint;
use abc_core::data::{generate_dataset, BackgroundStyle, SceneSpec};
use abc_core::graph::Graph;
use abc_core::gradcheck::{full_network_check, op_battery};
use abc_core::metrics::{confusion, report, roc_sweep, ConfusionCounts};
use abc_core::model::{count_flops, AbcConfig, AbcModel, DecoderFirst, EncoderFirst};
use abc_core::optim::AdamState;
use abc_core::params::ForwardCtx;
use abc_core::pgm;
use abc_core::train::{fit, TrainConfig, TrainError};

use crate::config::{ConfigError, ConfigMap};
use crate::dataset;
use crate::CliError;

const GRADCHECK_TOLERANCE: f32 = 1e-3;
const ROC_THRESHOLDS: usize = 64;

pub struct Common {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Common {
    fn load_config(&self) -> Result<ConfigMap, CliError> {
        match &self.config {
            Some(path) => Ok(ConfigMap::load(path)?),
            None => Err(CliError::usage("--config is required for this subcommand")),
        }
    }

    fn load_config_or_empty(&self) -> Result<ConfigMap, CliError> {
        match &self.config {
            Some(path) => Ok(ConfigMap::load(path)?),
            None => Ok(ConfigMap::empty()),
        }
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        self.out
            .as_deref()
            .ok_or_else(|| CliError::usage("--out is required for this subcommand"))
    }
}

fn parse_background(raw: &str) -> Result<BackgroundStyle, ConfigError> {
    match raw {
        "smooth-gradient" => Ok(BackgroundStyle::SmoothGradient),
        "cloud-clutter" => Ok(BackgroundStyle::CloudClutter),
        other => Err(ConfigError(format!(
            "background '{other}' (expected smooth-gradient or cloud-clutter)"
        ))),
    }
}

fn scene_spec(cfg: &mut ConfigMap, seed_override: Option<u64>) -> Result<SceneSpec, ConfigError> {
    let defaults = SceneSpec::default();
    let background = parse_background(&cfg.optional_string("background", "smooth-gradient"))?;
    let mut spec = SceneSpec {
        height: cfg.optional("height", defaults.height)?,
        width: cfg.optional("width", defaults.width)?,
        targets_min: cfg.optional("targets_min", defaults.targets_min)?,
        targets_max: cfg.optional("targets_max", defaults.targets_max)?,
        radius_min: cfg.optional("radius_min", defaults.radius_min)?,
        radius_max: cfg.optional("radius_max", defaults.radius_max)?,
        intensity_min: cfg.optional("intensity_min", defaults.intensity_min)?,
        intensity_max: cfg.optional("intensity_max", defaults.intensity_max)?,
        background,
        noise_sigma: cfg.optional("noise_sigma", defaults.noise_sigma)?,
        seed: cfg.optional("seed", defaults.seed)?,
    };
    if let Some(seed) = seed_override {
        spec.seed = seed;
    }
    Ok(spec)
}

fn model_config(cfg: &mut ConfigMap) -> Result<AbcConfig, CliError> {
    let input_dim: usize = cfg.require("input_dim")?;
    let height: usize = cfg.require("height")?;
    let width: usize = cfg.require("width")?;
    let mut config = AbcConfig::new(input_dim, height, width);
    config.deep_supervision = cfg.optional("deep_supervision", true)?;
    config.encoder_first = match cfg.optional_string("encoder_first", "conv-module").as_str() {
        "conv-module" => EncoderFirst::ConvModule,
        "clft" => EncoderFirst::Clft,
        other => {
            return Err(CliError::usage(format!(
                "encoder_first '{other}' (expected conv-module or clft)"
            )))
        }
    };
    config.decoder_first = match cfg.optional_string("decoder_first", "ucdc").as_str() {
        "ucdc" => DecoderFirst::Ucdc,
        "conv-module" => DecoderFirst::ConvModule,
        other => {
            return Err(CliError::usage(format!(
                "decoder_first '{other}' (expected ucdc or conv-module)"
            )))
        }
    };
    config
        .validate()
        .map_err(|e| CliError::usage(format!("invalid model config: {e}")))?;
    Ok(config)
}

pub fn gen_data(common: Common) -> Result<(), CliError> {
    let out = common.out_dir()?.to_path_buf();
    let mut cfg = common.load_config()?;
    let count: usize = cfg.require("count")?;
    let spec = scene_spec(&mut cfg, common.seed)?;
    cfg.finish()?;

    let samples = generate_dataset(&spec, count);
    dataset::write_dataset(&out, &samples, spec.height, spec.width)?;
    println!("wrote {count} samples to {}", out.display());
    Ok(())
}

fn train_error(e: TrainError) -> CliError {
    match e {
        TrainError::NanLoss { .. } => CliError::numerical(e.to_string()),
        _ => CliError::data(e.to_string()),
    }
}

fn format_record(r: &abc_core::train::EpochRecord) -> String {
    format!("{}, {:.6}, {:.6e}, {:.6}", r.epoch, r.mean_loss, r.lr, r.train_iou)
}

pub fn train(common: Common) -> Result<(), CliError> {
    let out = common.out_dir()?.to_path_buf();
    let mut cfg = common.load_config()?;
    let data_dir: PathBuf = PathBuf::from(cfg.require_string("data_dir")?);
    let model_cfg = model_config(&mut cfg)?;
    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: cfg.require("epochs")?,
        base_lr: cfg.require("lr")?,
        batch_size: cfg.require("batch")?,
        poly_power: cfg.optional("poly_power", defaults.poly_power)?,
        adam: abc_core::optim::AdamConfig {
            weight_decay: cfg.optional("weight_decay", defaults.adam.weight_decay)?,
            ..defaults.adam
        },
        seed: common.seed.unwrap_or(cfg.optional("seed", defaults.seed)?),
        loss_eps: cfg.optional("loss_eps", defaults.loss_eps)?,
        flip: cfg.optional("flip", defaults.flip)?,
    };
    let checkpoint_every: usize = cfg.optional("checkpoint_every", 50)?;
    cfg.finish()?;

    let samples = dataset::load_dataset(&data_dir, model_cfg.height, model_cfg.width)?;
    fs::create_dir_all(&out).map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;

    let mut model = AbcModel::new(model_cfg, train_cfg.seed)
        .map_err(|e| CliError::usage(format!("cannot build model: {e}")))?;
    let mut state = AdamState::new(&model.store);

    let mut best_iou = f64::NEG_INFINITY;
    let mut ckpt_io: Result<(), CliError> = Ok(());
    let records = {
        let total_epochs = train_cfg.epochs;
        let out_ref = &out;
        let ckpt_io = &mut ckpt_io;
        let best_iou = &mut best_iou;
        fit(&mut model, &mut state, &samples, &train_cfg, move |m, s, r| {
            if ckpt_io.is_err() {
                return;
            }
            let mut save = |name: String| {
                let path = out_ref.join(name);
                if let Err(e) = fs::write(&path, checkpoint::encode(&m.store, s)) {
                    *ckpt_io = Err(CliError::data(format!("{}: {e}", path.display())));
                }
            };
            if checkpoint_every > 0 && r.epoch % checkpoint_every == 0 {
                save(format!("checkpoint_{:04}.ckpt", r.epoch));
            }
            if r.train_iou > *best_iou {
                *best_iou = r.train_iou;
                save("checkpoint_best.ckpt".to_string());
            }
            if r.epoch == total_epochs {
                save("checkpoint_final.ckpt".to_string());
            }
        })
        .map_err(train_error)?
    };
    ckpt_io?;

    let mut log = String::new();
    for r in &records {
        log.push_str(&format_record(r));
        log.push('\n');
    }
    let log_path = out.join("train_log.csv");
    fs::write(&log_path, log).map_err(|e| CliError::data(format!("{}: {e}", log_path.display())))?;
    if let Some(last) = records.last() {
        println!("{}", format_record(last));
    }
    Ok(())
}

fn load_model_from_checkpoint(
    path: &Path,
    config: AbcConfig,
) -> Result<(AbcModel, AdamState), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let ckpt = checkpoint::decode(&bytes)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let mut model = AbcModel::new(config, 0)
        .map_err(|e| CliError::usage(format!("cannot build model: {e}")))?;
    let mut state = AdamState::new(&model.store);
    checkpoint::restore(&ckpt, &mut model.store, &mut state)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    state.step = ckpt.step;
    Ok((model, state))
}

/// Sigmoid probabilities of the main head for one image.
fn predict(model: &AbcModel, image: &[f32]) -> Result<Vec<f32>, CliError> {
    let (h, w) = (model.config.height, model.config.width);
    let mut g = Graph::new();
    let mut ctx = ForwardCtx::new(&model.store);
    let x = g.constant(&[1, 1, h, w], image.to_vec());
    let out = model
        .forward(&mut g, &mut ctx, x)
        .map_err(|e| CliError::data(e.to_string()))?;
    let prob = g.sigmoid(out.main_logits);
    Ok(g.data(prob).to_vec())
}

fn binarize(prob: &[f32]) -> Vec<f32> {
    // tie rule: p >= 0.5 counts as positive
    prob.iter().map(|&p| if p >= 0.5 { 1.0 } else { 0.0 }).collect()
}

pub fn eval(common: Common, ckpt_path: &Path) -> Result<(), CliError> {
    let roc_path = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("roc.csv"));
    let mut cfg = common.load_config()?;
    let data_dir = PathBuf::from(cfg.require_string("data_dir")?);
    let model_cfg = model_config(&mut cfg)?;
    cfg.finish()?;

    let (h, w) = (model_cfg.height, model_cfg.width);
    let samples = dataset::load_dataset(&data_dir, h, w)?;
    let (model, _state) = load_model_from_checkpoint(ckpt_path, model_cfg)?;

    let mut probs: Vec<Vec<f32>> = Vec::new();
    let mut counts: Vec<ConfusionCounts> = Vec::new();
    for s in &samples {
        let prob = predict(&model, &s.image)?;
        let pred = binarize(&prob);
        counts.push(
            confusion(&pred, &s.mask).map_err(|e| CliError::data(e.to_string()))?,
        );
        probs.push(prob);
    }
    let rep = report(&counts).map_err(|e| CliError::data(e.to_string()))?;
    println!("n, {}", rep.n);
    println!("IoU, {:.6}", rep.iou);
    println!("nIoU, {:.6}", rep.niou);
    println!("F1, {:.6}", rep.f1);

    let thresholds: Vec<f32> = (0..ROC_THRESHOLDS)
        .map(|i| i as f32 / (ROC_THRESHOLDS - 1) as f32)
        .collect();
    let pairs: Vec<(&[f32], &[f32])> = probs
        .iter()
        .zip(&samples)
        .map(|(p, s)| (p.as_slice(), s.mask.as_slice()))
        .collect();
    let points = roc_sweep(&pairs, h, w, &thresholds);
    let mut csv = String::new();
    for p in &points {
        csv.push_str(&format!("{:.6}, {:.6}, {:.6}\n", p.threshold, p.pd, p.fa));
    }
    fs::write(&roc_path, csv)
        .map_err(|e| CliError::data(format!("{}: {e}", roc_path.display())))?;
    Ok(())
}

pub fn infer(common: Common, ckpt_path: &Path, image_path: &Path) -> Result<(), CliError> {
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("mask.pgm"));
    let mut cfg = common.load_config()?;
    let model_cfg = model_config(&mut cfg)?;
    cfg.finish()?;

    let (h, w) = (model_cfg.height, model_cfg.width);
    let (iw, ih, image) = dataset::load_image(image_path)?;
    if (iw, ih) != (w, h) {
        return Err(CliError::data(format!(
            "{}: got {iw}x{ih}, model expects {w}x{h}",
            image_path.display()
        )));
    }
    let (model, _state) = load_model_from_checkpoint(ckpt_path, model_cfg)?;
    let prob = predict(&model, &image)?;
    let mask: Vec<u8> = prob.iter().map(|&p| if p >= 0.5 { 255 } else { 0 }).collect();

    fs::write(&out, pgm::encode(w, h, &mask))
        .map_err(|e| CliError::data(format!("{}: {e}", out.display())))?;
    let prob_path = prob_path_for(&out);
    fs::write(&prob_path, pgm::encode(w, h, &pgm::quantize(&prob)))
        .map_err(|e| CliError::data(format!("{}: {e}", prob_path.display())))?;
    println!("wrote {} and {}", out.display(), prob_path.display());
    Ok(())
}

fn prob_path_for(mask_path: &Path) -> PathBuf {
    let stem = mask_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "mask".to_string());
    mask_path.with_file_name(format!("{stem}_prob.pgm"))
}

pub fn gradcheck(common: Common, inject_fault: bool) -> Result<(), CliError> {
    let seed = common.seed.unwrap_or(0);
    let mut checks = op_battery(seed, 5);
    if inject_fault {
        checks[0].max_rel_err += 1.0;
    }
    let network_err = full_network_check(seed, 2);

    let mut failed = false;
    println!("op, max_rel_err, status");
    for c in &checks {
        let ok = c.max_rel_err < GRADCHECK_TOLERANCE;
        failed |= !ok;
        println!("{}, {:.3e}, {}", c.name, c.max_rel_err, if ok { "pass" } else { "FAIL" });
    }
    let ok = network_err < GRADCHECK_TOLERANCE;
    failed |= !ok;
    println!("full_network_c4, {:.3e}, {}", network_err, if ok { "pass" } else { "FAIL" });

    if failed {
        Err(CliError::numerical("gradient check failed".to_string()))
    } else {
        Ok(())
    }
}

pub fn flops(common: Common) -> Result<(), CliError> {
    let mut cfg = common.load_config_or_empty()?;
    let height: usize = cfg.optional("height", 256)?;
    let width: usize = cfg.optional("width", 256)?;
    cfg.finish()?;

    let widths = [16usize, 32, 64];
    let mut totals = Vec::new();
    println!("C, flops");
    for &c in &widths {
        let total = count_flops(&AbcConfig::new(c, height, width))
            .map_err(|e| CliError::usage(format!("invalid config: {e}")))?;
        println!("{c}, {total}");
        totals.push(total);
    }
    println!("ratio_32_16, {:.4}", totals[1] as f64 / totals[0] as f64);
    println!("ratio_64_32, {:.4}", totals[2] as f64 / totals[1] as f64);
    Ok(())
}
