//! Evaluation: metric tables over the no-attack / universal-flow /
//! random-flow conditions, detector-based perception metrics, and
//! qualitative dumps.
//!
//! # Report schema
//!
//! CSV, one row per condition in the fixed order `clean-reference`,
//! `derain`, `derain-under-ura`, `derain-under-random`:
//!
//! ```text
//! condition,ssim,psnr,identify_error,confidence_bias,ssim_drop,psnr_drop
//! ```
//!
//! Empty cells mean "not applicable": perception columns without a detector,
//! drops outside the two attacked rows. An infinite PSNR is written `+inf`.
//! Drops are `(derain − attacked) / derain`.
//!
//! JSON carries the same cells nested by condition:
//!
//! ```text
//! {"samples": n, "random_seed": s, "bias_mode": "ratio",
//!  "conditions": {"derain": {"ssim": .., "psnr": .., ...}, ...}}
//! ```
//!
//! with `null` for empty cells and the string `"+inf"` for an infinite PSNR.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::imaging::{save_image, Image, PairedSample};
use crate::metrics::{self, confidence_bias, identify_error, BiasMode, Detection, DetectorReport, SsimParams};
use crate::nets::DerainNet;
use crate::nn::ModelParams;
use crate::scalar::Scalar;
use crate::warp::{random_flow, spatial_transform, FlowField};

/// Anything mapping an observation to a restored image.
pub trait Restorer<T>: Sync {
    fn restore(&self, observation: &Image<T>) -> Result<Image<T>>;
}

/// A rain-removal network paired with its weights.
pub struct Trained<'a, T> {
    pub net: &'a DerainNet,
    pub params: &'a ModelParams<T>,
}

impl<T: Scalar> Restorer<T> for Trained<'_, T> {
    fn restore(&self, observation: &Image<T>) -> Result<Image<T>> {
        self.net.forward(self.params, observation)
    }
}

/// Returns its input unchanged.
pub struct IdentityRestorer;

impl<T: Scalar> Restorer<T> for IdentityRestorer {
    fn restore(&self, observation: &Image<T>) -> Result<Image<T>> {
        Ok(observation.clone())
    }
}

/// Image → report over a fixed category set. Implementations must be
/// deterministic. External detectors plug in here through an adapter.
pub trait Detector: Sync {
    fn categories(&self) -> usize;
    fn detect(&self, img: &Image<f64>) -> std::result::Result<DetectorReport, String>;
}

/// Labels an image by the fullest bin of its luminance histogram; the
/// confidence is that bin's share of pixels. Ties go to the lower bin.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MockDetector {
    bins: usize,
}

impl MockDetector {
    pub fn new(bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::Argument(format!("mock detector needs at least 2 bins, got {bins}")));
        }
        Ok(MockDetector { bins })
    }
}

impl Detector for MockDetector {
    fn categories(&self) -> usize {
        self.bins
    }

    fn detect(&self, img: &Image<f64>) -> std::result::Result<DetectorReport, String> {
        let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
        let mut counts = vec![0usize; self.bins];
        for i in 0..r.len() {
            let y = 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i];
            counts[metrics::bin_index(y, self.bins)] += 1;
        }
        let (label, &best) = counts
            .iter()
            .enumerate()
            .fold((0, &counts[0]), |acc, (i, n)| if *n > *acc.1 { (i, n) } else { acc });
        let confidence = best as f64 / r.len() as f64;
        DetectorReport::new(self.bins, vec![Detection { label, confidence }]).map_err(|e| e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Condition {
    CleanReference,
    Derain,
    DerainUnderUra,
    DerainUnderRandom,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::CleanReference,
        Condition::Derain,
        Condition::DerainUnderUra,
        Condition::DerainUnderRandom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::CleanReference => "clean-reference",
            Condition::Derain => "derain",
            Condition::DerainUnderUra => "derain-under-ura",
            Condition::DerainUnderRandom => "derain-under-random",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionRow {
    pub condition: Condition,
    pub ssim: f64,
    pub psnr: f64,
    pub identify_error: Option<f64>,
    pub confidence_bias: Option<f64>,
    pub ssim_drop: Option<f64>,
    pub psnr_drop: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub random_seed: u64,
    pub bias_mode: BiasMode,
    /// Always in [`Condition::ALL`] order.
    pub rows: Vec<ConditionRow>,
    /// Per test sample: SSIM of the restored output without and with the
    /// universal flow.
    pub per_sample: Vec<SampleScore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleScore {
    pub id: String,
    pub derain_ssim: f64,
    pub ura_ssim: f64,
    pub random_ssim: f64,
}

pub fn relative_drop(baseline: f64, attacked: f64) -> Option<f64> {
    (baseline.is_finite() && baseline != 0.0 && attacked.is_finite()).then(|| (baseline - attacked) / baseline)
}

fn cell(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == f64::INFINITY => "+inf".into(),
        Some(x) => x.to_string(),
    }
}

fn json_cell(v: Option<f64>) -> Value {
    match v {
        None => Value::Null,
        Some(x) if x == f64::INFINITY => Value::String("+inf".into()),
        Some(x) => json!(x),
    }
}

impl MetricsReport {
    pub fn row(&self, c: Condition) -> &ConditionRow {
        self.rows.iter().find(|r| r.condition == c).expect("every condition has a row")
    }

    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "condition,ssim,psnr,identify_error,confidence_bias,ssim_drop,psnr_drop")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.condition,
                cell(Some(r.ssim)),
                cell(Some(r.psnr)),
                cell(r.identify_error),
                cell(r.confidence_bias),
                cell(r.ssim_drop),
                cell(r.psnr_drop)
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = Vec::new();
        self.write_csv(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ascii")
    }

    pub fn to_json(&self) -> Value {
        let mut conditions = Map::new();
        for r in &self.rows {
            conditions.insert(
                r.condition.to_string(),
                json!({
                    "ssim": json_cell(Some(r.ssim)),
                    "psnr": json_cell(Some(r.psnr)),
                    "identify_error": json_cell(r.identify_error),
                    "confidence_bias": json_cell(r.confidence_bias),
                    "ssim_drop": json_cell(r.ssim_drop),
                    "psnr_drop": json_cell(r.psnr_drop),
                }),
            );
        }
        json!({
            "samples": self.samples,
            "random_seed": self.random_seed,
            "bias_mode": self.bias_mode,
            "conditions": conditions,
        })
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&self.to_json()).expect("json values serialize");
        std::fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        Ok((csv_path, json_path))
    }
}

/// Identify error and confidence bias for one condition, averaged over
/// images. The bias is `None` when no image has a matched label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerceptionRow {
    pub identify_error: f64,
    pub confidence_bias: Option<f64>,
}

struct SampleOutputs<T> {
    derain: Image<T>,
    ura: Image<T>,
    random: Image<T>,
}

fn check_testset<T: Scalar>(testset: &[PairedSample<T>], flow: &FlowField<T>) -> Result<()> {
    if testset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = testset
        .iter()
        .find(|s| s.height() != flow.height() || s.width() != flow.width())
    {
        return Err(Error::Geometry(format!(
            "sample {} is {}x{} but the flow is {}x{}",
            s.id,
            s.height(),
            s.width(),
            flow.height(),
            flow.width()
        )));
    }
    Ok(())
}

fn run_conditions<T: Scalar>(
    model: &dyn Restorer<T>,
    flow: &FlowField<T>,
    testset: &[PairedSample<T>],
    random_seed: u64,
) -> Result<Vec<SampleOutputs<T>>> {
    check_testset(testset, flow)?;
    let rand = random_flow(random_seed, flow.height(), flow.width(), flow.mapping(), flow.budget_eps())?;
    testset
        .par_iter()
        .map(|s| {
            Ok(SampleOutputs {
                derain: model.restore(&s.observation)?,
                ura: model.restore(&spatial_transform(&s.observation, flow)?)?,
                random: model.restore(&spatial_transform(&s.observation, &rand)?)?,
            })
        })
        .collect()
}

fn perception_from_outputs<T: Scalar>(
    detector: &dyn Detector,
    mode: BiasMode,
    testset: &[PairedSample<T>],
    outputs: &[SampleOutputs<T>],
) -> Result<[PerceptionRow; 4]> {
    let detect = |id: &str, img: &Image<T>| {
        detector.detect(&img.cast()).map_err(|msg| Error::Detector {
            sample: id.to_string(),
            msg,
        })
    };
    let per_image: Vec<[(f64, Option<f64>); 4]> = testset
        .par_iter()
        .zip(outputs)
        .map(|(s, o)| {
            let clear = detect(&s.id, &s.background)?;
            let reports = [
                clear.clone(),
                detect(&s.id, &o.derain)?,
                detect(&s.id, &o.ura)?,
                detect(&s.id, &o.random)?,
            ];
            let mut row = [(0.0, None); 4];
            for (slot, rep) in row.iter_mut().zip(&reports) {
                let bias = match confidence_bias(rep, &clear, mode) {
                    Ok(b) => Some(b),
                    Err(Error::NoMatchedLabels) => None,
                    Err(e) => return Err(e),
                };
                *slot = (identify_error(rep, &clear)?, bias);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let n = per_image.len() as f64;
    let mut rows = [PerceptionRow {
        identify_error: 0.0,
        confidence_bias: None,
    }; 4];
    for (k, row) in rows.iter_mut().enumerate() {
        row.identify_error = per_image.iter().map(|r| r[k].0).sum::<f64>() / n;
        let biases: Vec<f64> = per_image.iter().filter_map(|r| r[k].1).collect();
        if !biases.is_empty() {
            row.confidence_bias = Some(biases.iter().sum::<f64>() / biases.len() as f64);
        }
    }
    Ok(rows)
}

/// Mean SSIM / PSNR against the clean background for every condition. The
/// random-flow control uses the universal flow's mapping and budget.
pub fn evaluate<T: Scalar>(
    model: &dyn Restorer<T>,
    flow: &FlowField<T>,
    testset: &[PairedSample<T>],
    random_seed: u64,
    ssim: &SsimParams,
) -> Result<MetricsReport> {
    evaluate_with(model, flow, testset, random_seed, ssim, None)
}

/// [`evaluate`] plus perception columns when a detector is given.
pub fn evaluate_with<T: Scalar>(
    model: &dyn Restorer<T>,
    flow: &FlowField<T>,
    testset: &[PairedSample<T>],
    random_seed: u64,
    ssim: &SsimParams,
    detector: Option<(&dyn Detector, BiasMode)>,
) -> Result<MetricsReport> {
    ssim.validate()?;
    let outputs = run_conditions(model, flow, testset, random_seed)?;
    let one = T::one();
    // (ssim, psnr) per sample per condition
    let scores: Vec<[(f64, f64); 4]> = testset
        .par_iter()
        .zip(&outputs)
        .map(|(s, o)| {
            let b = &s.background;
            let mut row = [(0.0, 0.0); 4];
            for (slot, img) in row.iter_mut().zip([b, &o.derain, &o.ura, &o.random]) {
                *slot = (
                    metrics::ssim(img, b, ssim)?.as_f64(),
                    metrics::psnr(img, b, one)?.as_f64(),
                );
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let n = testset.len() as f64;
    let mean = |k: usize, f: fn(&(f64, f64)) -> f64| scores.iter().map(|r| f(&r[k])).sum::<f64>() / n;
    let perception = match detector {
        Some((d, mode)) => Some(perception_from_outputs(d, mode, testset, &outputs)?),
        None => None,
    };
    let mut rows: Vec<ConditionRow> = Condition::ALL
        .iter()
        .enumerate()
        .map(|(k, &condition)| ConditionRow {
            condition,
            ssim: mean(k, |p| p.0),
            psnr: mean(k, |p| p.1),
            identify_error: perception.map(|p| p[k].identify_error),
            confidence_bias: perception.and_then(|p| p[k].confidence_bias),
            ssim_drop: None,
            psnr_drop: None,
        })
        .collect();
    let (base_ssim, base_psnr) = (rows[1].ssim, rows[1].psnr);
    for r in &mut rows[2..] {
        r.ssim_drop = relative_drop(base_ssim, r.ssim);
        r.psnr_drop = relative_drop(base_psnr, r.psnr);
    }
    let per_sample = testset
        .iter()
        .zip(&scores)
        .map(|(s, r)| SampleScore {
            id: s.id.clone(),
            derain_ssim: r[1].0,
            ura_ssim: r[2].0,
            random_ssim: r[3].0,
        })
        .collect();
    Ok(MetricsReport {
        samples: testset.len(),
        random_seed,
        bias_mode: detector.map(|d| d.1).unwrap_or_default(),
        rows,
        per_sample,
    })
}

/// Identify error and confidence bias per condition, in [`Condition::ALL`]
/// order.
pub fn perception_eval<T: Scalar>(
    detector: &dyn Detector,
    model: &dyn Restorer<T>,
    flow: &FlowField<T>,
    testset: &[PairedSample<T>],
    random_seed: u64,
    mode: BiasMode,
) -> Result<[PerceptionRow; 4]> {
    let outputs = run_conditions(model, flow, testset, random_seed)?;
    perception_from_outputs(detector, mode, testset, &outputs)
}

pub const QUALITATIVE_PNGS: [&str; 6] = ["rain", "perturbation", "adv_rain", "derain", "adv_derain", "clean"];
pub const QUALITATIVE_HISTOGRAMS: [&str; 4] = ["clean", "rain", "derain", "adv_derain"];

/// Writes `<id>_<panel>.png` for the six panels and
/// `<id>_hist_<image>.csv` for four histograms per sample. Returns every
/// path written.
pub fn dump_qualitative<T: Scalar>(
    model: &dyn Restorer<T>,
    flow: &FlowField<T>,
    samples: &[PairedSample<T>],
    out_dir: impl AsRef<Path>,
    bins: usize,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let perturbation = flow.magnitude_image();
    let mut written = Vec::new();
    for s in samples {
        s.observation.check_geometry(&perturbation)?;
        let adv = spatial_transform(&s.observation, flow)?;
        let derain = model.restore(&s.observation)?;
        let adv_derain = model.restore(&adv)?;
        let panels = [&s.observation, &perturbation, &adv, &derain, &adv_derain, &s.background];
        for (name, img) in QUALITATIVE_PNGS.iter().zip(panels) {
            let p = out_dir.join(format!("{}_{name}.png", s.id));
            save_image(img, &p)?;
            written.push(p);
        }
        for (name, img) in QUALITATIVE_HISTOGRAMS
            .iter()
            .zip([&s.background, &s.observation, &derain, &adv_derain])
        {
            let p = out_dir.join(format!("{}_hist_{name}.csv", s.id));
            metrics::pixel_histogram(img, bins)?.save_csv(&p)?;
            written.push(p);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::FlowMapping;

    fn solid(v: f64) -> Image<f64> {
        Image::filled(8, 8, v).unwrap()
    }

    #[test]
    fn mock_detector_examples() {
        let d = MockDetector::new(4).unwrap();
        let black = d.detect(&solid(0.0)).unwrap();
        assert_eq!(black.entries(), &[Detection { label: 0, confidence: 1.0 }]);
        let white = d.detect(&solid(1.0)).unwrap();
        assert_eq!(white.entries(), &[Detection { label: 3, confidence: 1.0 }]);
        let half = Image::from_fn(8, 8, |_, y, _| if y < 4 { 0.0 } else { 1.0 }).unwrap();
        let r = MockDetector::new(2).unwrap().detect(&half).unwrap();
        assert_eq!(r.entries(), &[Detection { label: 0, confidence: 0.5 }]);
        assert!(MockDetector::new(1).is_err());
    }

    struct Constant;
    impl Detector for Constant {
        fn categories(&self) -> usize {
            3
        }
        fn detect(&self, _: &Image<f64>) -> std::result::Result<DetectorReport, String> {
            Ok(DetectorReport::new(3, vec![Detection { label: 1, confidence: 0.7 }]).unwrap())
        }
    }

    struct Failing;
    impl Detector for Failing {
        fn categories(&self) -> usize {
            2
        }
        fn detect(&self, _: &Image<f64>) -> std::result::Result<DetectorReport, String> {
            Err("offline".into())
        }
    }

    fn testset() -> Vec<PairedSample<f64>> {
        (0..3)
            .map(|i| {
                let b = Image::from_fn(8, 8, |c, y, x| ((x + 2 * y + c + i) % 5) as f64 / 4.0).unwrap();
                let o = b.clip(0.1, 0.9);
                PairedSample::new(format!("s{i}"), o, b).unwrap()
            })
            .collect()
    }

    #[test]
    fn constant_detector_is_neutral() {
        let ts = testset();
        let flow = random_flow(4, 8, 8, FlowMapping::Centered, 2.0).unwrap();
        let rows = perception_eval(&Constant, &IdentityRestorer, &flow, &ts, 1, BiasMode::Ratio).unwrap();
        for r in rows {
            assert_eq!(r.identify_error, 0.0);
            assert_eq!(r.confidence_bias, Some(1.0));
        }
    }

    #[test]
    fn detector_failure_names_the_sample() {
        let ts = testset();
        let flow = FlowField::identity(8, 8, 2.0).unwrap();
        match perception_eval(&Failing, &IdentityRestorer, &flow, &ts, 1, BiasMode::Ratio) {
            Err(Error::Detector { sample, msg }) => {
                assert_eq!(sample, "s0");
                assert_eq!(msg, "offline");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_testset_rejected() {
        let flow = FlowField::<f64>::identity(8, 8, 2.0).unwrap();
        let p = SsimParams::default();
        assert!(matches!(evaluate(&IdentityRestorer, &flow, &[], 0, &p), Err(Error::EmptyDataset)));
        assert!(matches!(
            perception_eval(&Constant, &IdentityRestorer, &flow, &[], 0, BiasMode::Ratio),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let flow = FlowField::<f64>::identity(8, 10, 2.0).unwrap();
        let p = SsimParams { window_size: 5, ..SsimParams::default() };
        assert!(matches!(evaluate(&IdentityRestorer, &flow, &testset(), 0, &p), Err(Error::Geometry(_))));
    }

    #[test]
    fn identity_flow_rows_and_drops() {
        let ts = testset();
        let flow = FlowField::identity(8, 8, 2.0).unwrap();
        let p = SsimParams { window_size: 5, ..SsimParams::default() };
        let r = evaluate(&IdentityRestorer, &flow, &ts, 9, &p).unwrap();
        let clean = r.row(Condition::CleanReference);
        assert_eq!(clean.ssim, 1.0);
        assert_eq!(clean.psnr, f64::INFINITY);
        let (d, u) = (r.row(Condition::Derain), r.row(Condition::DerainUnderUra));
        assert_eq!((d.ssim, d.psnr), (u.ssim, u.psnr));
        assert_eq!(u.ssim_drop, Some(0.0));
        let rnd = r.row(Condition::DerainUnderRandom);
        assert!((rnd.ssim_drop.unwrap() - (d.ssim - rnd.ssim) / d.ssim).abs() < 1e-12);
        assert!(r.to_csv().lines().nth(1).unwrap().starts_with("clean-reference,1,+inf,,,,"));
        assert_eq!(r.to_json()["conditions"]["clean-reference"]["psnr"], "+inf");
    }

    #[test]
    fn csv_row_order_fixed() {
        let ts = testset();
        let flow = FlowField::identity(8, 8, 2.0).unwrap();
        let p = SsimParams { window_size: 5, ..SsimParams::default() };
        let r = evaluate_with(&IdentityRestorer, &flow, &ts, 1, &p, Some((&Constant, BiasMode::Ratio))).unwrap();
        let names: Vec<String> = r.to_csv().lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
        assert_eq!(names, ["clean-reference", "derain", "derain-under-ura", "derain-under-random"]);
        assert_eq!(r.row(Condition::DerainUnderUra).identify_error, Some(0.0));
    }

    #[test]
    fn qualitative_manifest() {
        let ts = testset();
        let flow = FlowField::identity(8, 8, 2.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let written = dump_qualitative(&IdentityRestorer, &flow, &ts[..2], dir.path(), 16).unwrap();
        assert_eq!(written.len(), 20);
        assert!(written.iter().all(|p| p.exists()));
        let rain = std::fs::read(dir.path().join("s0_rain.png")).unwrap();
        let adv = std::fs::read(dir.path().join("s0_adv_rain.png")).unwrap();
        assert_eq!(rain, adv);
        let mag: Image<f64> = crate::imaging::load_image(dir.path().join("s0_perturbation.png")).unwrap();
        assert!(mag.data().iter().all(|&v| v == 0.0));
    }
}
