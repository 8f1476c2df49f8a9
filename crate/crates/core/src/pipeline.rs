//! Pipeline stages on disk: synthesize, train the rain-removal network,
//! train the attack, export and apply the flow, evaluate.
//!
//! Output layout under `run.out_dir`:
//!
//! ```text
//! derain.urap  derain_log.csv  generator.urap  attack_log.csv  flow.uraf
//! report.csv   report.json     qualitative/    checkpoints/
//! ```

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::harness::{self, MetricsReport, MockDetector, Trained};
use crate::imaging::{load_image, load_paired_dataset, save_image, save_paired_dataset, PairedSample};
use crate::metrics::pixel_histogram;
use crate::nets::{load_params, save_params, DerainNet, Generator};
use crate::nn::ModelParams;
use crate::rain::{synth_dataset, SynthMode, SynthParams};
use crate::trainer;
use crate::warp::{load_flow, save_flow, spatial_transform, FlowField};

pub type Log<'a> = &'a mut dyn FnMut(&str);

pub const DERAIN_PARAMS: &str = "derain.urap";
pub const GENERATOR_PARAMS: &str = "generator.urap";
pub const FLOW_FILE: &str = "flow.uraf";
pub const REPORT_STEM: &str = "report";

/// Runs `f` on all cores when `run.parallel` is set, otherwise on one
/// thread. Results are identical either way.
pub fn with_threads<R: Send>(cfg: &RunConfig, f: impl FnOnce() -> R + Send) -> R {
    let threads = if cfg.run.parallel { 0 } else { 1 };
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Debug, Serialize)]
struct SplitManifest<'a> {
    count: usize,
    seed: u64,
    ids: Vec<&'a str>,
}

#[derive(Debug, Serialize)]
struct SynthManifest<'a> {
    global_seed: u64,
    mode: SynthMode,
    height: usize,
    width: usize,
    params: &'a SynthParams,
    train: SplitManifest<'a>,
    test: SplitManifest<'a>,
}

/// Writes `train/` and `test/` paired splits plus `manifest.json` under
/// `run.data_dir`.
pub fn synth(cfg: &RunConfig, log: Log) -> Result<PathBuf> {
    let s = &cfg.synth;
    let train = synth_dataset::<f32>(&cfg.rain, s.mode, s.train_count, s.height, s.width)?;
    let test_params = SynthParams {
        seed: cfg.test_seed(),
        ..cfg.rain.clone()
    };
    let test = synth_dataset::<f32>(&test_params, s.mode, s.test_count, s.height, s.width)?;
    save_paired_dataset(&train, cfg.train_dir())?;
    save_paired_dataset(&test, cfg.test_dir())?;
    let manifest = SynthManifest {
        global_seed: cfg.run.seed,
        mode: s.mode,
        height: s.height,
        width: s.width,
        params: &cfg.rain,
        train: SplitManifest {
            count: train.len(),
            seed: cfg.rain.seed,
            ids: ids(&train),
        },
        test: SplitManifest {
            count: test.len(),
            seed: test_params.seed,
            ids: ids(&test),
        },
    };
    let path = cfg.run.data_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    log(&format!(
        "synthesized {} train / {} test pairs ({:?}) into {}",
        train.len(),
        test.len(),
        s.mode,
        cfg.run.data_dir.display()
    ));
    Ok(path)
}

fn ids(v: &[PairedSample<f32>]) -> Vec<&str> {
    v.iter().map(|p| p.id.as_str()).collect()
}

fn load_split(dir: &Path) -> Result<Vec<PairedSample<f32>>> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    load_paired_dataset(dir)
}

/// Probe samples for per-epoch logging: up to 20 test pairs when a test
/// split exists.
fn probe_split(cfg: &RunConfig) -> Result<Vec<PairedSample<f32>>> {
    if !cfg.test_dir().is_dir() {
        return Ok(Vec::new());
    }
    let mut v = load_paired_dataset(cfg.test_dir())?;
    v.truncate(20);
    Ok(v)
}

fn echo_hyperparameters(cfg: &RunConfig, log: Log) {
    for (alg, item, value) in cfg.hyperparameter_rows() {
        log(&format!("hyper {alg} {item} = {value}"));
    }
}

fn checkpoint(cfg: &RunConfig, prefix: &str, epoch: usize, p: &ModelParams<f32>) -> Result<()> {
    let every = cfg.run.checkpoint_every;
    if every == 0 || !epoch.is_multiple_of(every) {
        return Ok(());
    }
    let dir = cfg.run.out_dir.join("checkpoints");
    create_dir(&dir)?;
    save_params(p, dir.join(format!("{prefix}_epoch{epoch:04}.urap")))
}

pub fn train_derain(cfg: &RunConfig, log: Log) -> Result<PathBuf> {
    let data = load_split(&cfg.train_dir())?;
    let probe = probe_split(cfg)?;
    let net = DerainNet::new(cfg.derain_net.clone())?;
    create_dir(&cfg.run.out_dir)?;
    echo_hyperparameters(cfg, log);
    let (params, tlog) = trainer::train_derain_with(&net, &data, &probe, &cfg.derain, &cfg.ssim, |r, p| {
        log(&format!(
            "derain epoch {} loss {:.6} probe_ssim {:.4} ({:.1}s)",
            r.epoch, r.loss, r.probe_ssim, r.seconds
        ));
        checkpoint(cfg, "derain", r.epoch, p)
    })?;
    let out = cfg.run.out_dir.join(DERAIN_PARAMS);
    save_params(&params, &out)?;
    tlog.save_csv(cfg.run.out_dir.join("derain_log.csv"))?;
    log(&format!("wrote {}", out.display()));
    Ok(out)
}

pub fn load_theta(cfg: &RunConfig, path: &Path) -> Result<(DerainNet, ModelParams<f32>)> {
    let net = DerainNet::new(cfg.derain_net.clone())?;
    let theta = load_params(path, Some(net.fingerprint()))?;
    net.check_params(&theta)?;
    Ok((net, theta))
}

/// Trains the generator against the weights at `theta_path`, then writes
/// its parameters and the exported universal flow.
pub fn train_attack(cfg: &RunConfig, theta_path: &Path, log: Log) -> Result<(PathBuf, PathBuf)> {
    let (net, theta) = load_theta(cfg, theta_path)?;
    let data = load_split(&cfg.train_dir())?;
    let probe = probe_split(cfg)?;
    let gen = Generator::new(cfg.generator_config())?;
    create_dir(&cfg.run.out_dir)?;
    echo_hyperparameters(cfg, log);
    let (params, tlog) = trainer::train_attack_with(&gen, &net, &theta, &data, &probe, &cfg.attack, &cfg.ssim, |r, p| {
        log(&format!(
            "attack epoch {} loss {:.6} probe_loss {:.6} probe_ssim {:.4} ({:.1}s)",
            r.epoch, r.loss, r.probe_loss, r.probe_ssim, r.seconds
        ));
        checkpoint(cfg, "generator", r.epoch, p)
    })?;
    let gen_path = cfg.run.out_dir.join(GENERATOR_PARAMS);
    save_params(&params, &gen_path)?;
    tlog.save_csv(cfg.run.out_dir.join("attack_log.csv"))?;
    let flow_path = cfg.run.out_dir.join(FLOW_FILE);
    save_flow(&trainer::export_universal_flow(&gen, &params, &cfg.attack)?, &flow_path)?;
    log(&format!("wrote {} and {}", gen_path.display(), flow_path.display()));
    Ok((gen_path, flow_path))
}

pub fn export_flow(cfg: &RunConfig, generator_path: &Path, out: &Path) -> Result<FlowField<f32>> {
    let gen = Generator::new(cfg.generator_config())?;
    let params = load_params(generator_path, Some(gen.fingerprint()))?;
    gen.check_params(&params)?;
    let flow = trainer::export_universal_flow(&gen, &params, &cfg.attack)?;
    save_flow(&flow, out)?;
    Ok(flow)
}

/// Warps every image by the flow and writes it under `out_dir` with its
/// original file name.
pub fn apply(flow_path: &Path, images: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let flow: FlowField<f32> = load_flow(flow_path)?;
    create_dir(out_dir)?;
    let mut written = Vec::with_capacity(images.len());
    for path in images {
        let img = load_image::<f32>(path)?;
        if img.height() != flow.height() || img.width() != flow.width() {
            return Err(Error::Geometry(format!(
                "{} is {}x{} but the flow is {}x{}",
                path.display(),
                img.height(),
                img.width(),
                flow.height(),
                flow.width()
            )));
        }
        let name = path
            .file_name()
            .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
        let out = out_dir.join(name);
        save_image(&spatial_transform(&img, &flow)?, &out)?;
        written.push(out);
    }
    Ok(written)
}

/// Evaluates on the test split and writes `report.csv` / `report.json`
/// (and qualitative panels when `qualitative`) into `out_dir`.
pub fn evaluate(
    cfg: &RunConfig,
    theta_path: &Path,
    flow_path: &Path,
    out_dir: &Path,
    qualitative: bool,
    log: Log,
) -> Result<MetricsReport> {
    let (net, theta) = load_theta(cfg, theta_path)?;
    let flow: FlowField<f32> = load_flow(flow_path)?;
    let test = load_split(&cfg.test_dir())?;
    let model = Trained {
        net: &net,
        params: &theta,
    };
    let detector = MockDetector::new(cfg.eval.detector_bins)?;
    let det = cfg
        .eval
        .detector
        .then_some((&detector as &dyn harness::Detector, cfg.eval.bias_mode));
    let report = harness::evaluate_with(&model, &flow, &test, cfg.eval.random_seed, &cfg.ssim, det)?;
    let (csv, json) = report.save(out_dir, REPORT_STEM)?;
    for r in &report.rows {
        log(&format!("{:<20} ssim {:.4} psnr {:.2}", r.condition.as_str(), r.ssim, r.psnr));
    }
    log(&format!("wrote {} and {}", csv.display(), json.display()));
    if qualitative && cfg.eval.qualitative > 0 {
        let n = cfg.eval.qualitative.min(test.len());
        let dir = out_dir.join("qualitative");
        let files = harness::dump_qualitative(&model, &flow, &test[..n], &dir, cfg.eval.histogram_bins)?;
        log(&format!("wrote {} qualitative files into {}", files.len(), dir.display()));
    }
    Ok(report)
}

pub fn histogram(image: &Path, bins: usize, out: &Path) -> Result<()> {
    pixel_histogram(&load_image::<f32>(image)?, bins)?.save_csv(out)
}

/// Every stage in order from one configuration.
pub fn run_all(cfg: &RunConfig, log: Log) -> Result<MetricsReport> {
    synth(cfg, log)?;
    let theta = train_derain(cfg, log)?;
    let (_, flow) = train_attack(cfg, &theta, log)?;
    let out = cfg.run.out_dir.clone();
    evaluate(cfg, &theta, &flow, &out, true, log)
}
