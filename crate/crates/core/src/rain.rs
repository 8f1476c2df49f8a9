//! Procedural rain: streak fields, adherent drops, and the three observation
//! models that combine them with a clean background.
//!
//! * streaks:  `O = B + R_ζ`
//! * drops:    `O = (1 - M) ⊙ B + R_η`
//! * combined: `O = (1 - M) ⊙ (B + R_ζ) + η R_η`
//!
//! Every composition is clipped to `[0, 1]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, PairedSample, CHANNELS};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub streak_count: usize,
    /// Degrees from vertical.
    pub streak_angle_range: [f64; 2],
    /// Pixels.
    pub streak_length_range: [f64; 2],
    pub streak_intensity_range: [f64; 2],
    pub drop_count: usize,
    /// Semi-axis lengths in pixels.
    pub drop_radius_range: [f64; 2],
    /// Gaussian blur applied to the streak field; 0 disables it.
    pub blur_sigma: f64,
    /// Atmospheric scattering constant weighting the drop texture.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            streak_count: 70,
            streak_angle_range: [-20.0, 20.0],
            streak_length_range: [6.0, 18.0],
            streak_intensity_range: [0.35, 0.8],
            drop_count: 2,
            drop_radius_range: [2.0, 4.5],
            blur_sigma: 0.6,
            eta: 0.8,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0] <= r[1] && r[0] >= lo && r[1] <= hi) {
        return Err(Error::Argument(format!(
            "{name} range [{}, {}] must be ordered and within [{lo}, {hi}]",
            r[0], r[1]
        )));
    }
    Ok(())
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        check_range("streak angle", self.streak_angle_range, -90.0, 90.0)?;
        check_range("streak length", self.streak_length_range, 0.0, f64::MAX)?;
        check_range("streak intensity", self.streak_intensity_range, 0.0, 1.0)?;
        check_range("drop radius", self.drop_radius_range, 0.0, f64::MAX)?;
        if self.drop_radius_range[0] <= 0.0 && self.drop_count > 0 {
            return Err(Error::Argument("drop radius must be positive".into()));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Argument(format!("blur sigma {} must be >= 0", self.blur_sigma)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::Argument(format!("eta {} must lie in (0, 1]", self.eta)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    Streaks,
    Drops,
    #[default]
    Combined,
}

impl SynthMode {
    fn name(self) -> &'static str {
        match self {
            SynthMode::Streaks => "streaks",
            SynthMode::Drops => "drops",
            SynthMode::Combined => "combined",
        }
    }
}

/// Rain-streak intensity field `R_ζ` (identical in every channel).
#[derive(Clone, Debug, PartialEq)]
pub struct StreakField<T>(pub Image<T>);

/// Adherent drops: blur mask `M` (one plane, shared by the channels) and
/// drop texture `R_η`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropLayer<T> {
    mask: Vec<T>,
    texture: Image<T>,
}

impl<T: Scalar> DropLayer<T> {
    pub fn new(mask: Vec<T>, texture: Image<T>) -> Result<Self> {
        if mask.len() != texture.height() * texture.width() {
            return Err(Error::Geometry(format!(
                "mask has {} values for a {}x{} texture",
                mask.len(),
                texture.height(),
                texture.width()
            )));
        }
        if let Some(v) = mask.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Argument(format!("mask value {v} outside [0, 1]")));
        }
        Ok(DropLayer { mask, texture })
    }

    pub fn mask(&self) -> &[T] {
        &self.mask
    }

    pub fn texture(&self) -> &Image<T> {
        &self.texture
    }
}

fn uniform(rng: &mut impl Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Normalized separable Gaussian blur with clamp-to-edge borders.
pub(crate) fn blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    g * plane[y * w + xx]
                })
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, g)| {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    g * tmp[yy * w + x]
                })
                .sum();
        }
    }
    out
}

fn segment_distance(py: f64, px: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    let t = if len2 > 0.0 {
        (((py - a.0) * dy + (px - a.1) * dx) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qy, qx) = (a.0 + t * dy, a.1 + t * dx);
    ((py - qy).powi(2) + (px - qx).powi(2)).sqrt()
}

fn replicate<T: Scalar>(plane: &[f64], h: usize, w: usize) -> Image<T> {
    let mut data = Vec::with_capacity(CHANNELS * h * w);
    for _ in 0..CHANNELS {
        data.extend(plane.iter().map(|&v| T::lit(v.clamp(0.0, 1.0))));
    }
    Image::new(h, w, data).expect("clamped field")
}

/// Anti-aliased line segments, blurred and clipped.
pub fn gen_streaks<T: Scalar>(params: &SynthParams, h: usize, w: usize) -> Result<StreakField<T>> {
    params.validate()?;
    let mut rng = seeds::rng(params.seed, "streaks");
    let mut field = vec![0.0f64; h * w];
    for _ in 0..params.streak_count {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let angle = uniform(&mut rng, params.streak_angle_range).to_radians();
        let len = uniform(&mut rng, params.streak_length_range);
        let intensity = uniform(&mut rng, params.streak_intensity_range);
        let (dy, dx) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
        let a = (cy - dy, cx - dx);
        let b = (cy + dy, cx + dx);
        let y0 = (a.0.min(b.0) - 1.0).floor().max(0.0) as usize;
        let y1 = ((a.0.max(b.0) + 1.0).ceil() as usize).min(h - 1);
        let x0 = (a.1.min(b.1) - 1.0).floor().max(0.0) as usize;
        let x1 = ((a.1.max(b.1) + 1.0).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let cover = (1.0 - segment_distance(y as f64, x as f64, a, b)).max(0.0);
                let v = &mut field[y * w + x];
                *v = v.max(intensity * cover);
            }
        }
    }
    let blurred = blur_plane(&field, h, w, params.blur_sigma);
    Ok(StreakField(replicate(&blurred, h, w)))
}

/// Soft-edged ellipses written into the mask and a premultiplied texture.
pub fn gen_drops<T: Scalar>(params: &SynthParams, h: usize, w: usize) -> Result<DropLayer<T>> {
    params.validate()?;
    let mut rng = seeds::rng(params.seed, "drops");
    let mut mask = vec![0.0f64; h * w];
    let mut texture = vec![0.0f64; CHANNELS * h * w];
    for _ in 0..params.drop_count {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = uniform(&mut rng, params.drop_radius_range);
        let rx = uniform(&mut rng, params.drop_radius_range);
        let brightness = rng.random_range(0.55..0.95);
        let tint = [0.95, 0.98, 1.0];
        let y0 = (cy - ry - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + ry + 1.0).ceil() as usize).min(h - 1);
        let x0 = (cx - rx - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + rx + 1.0).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = (((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2)).sqrt();
                let m = ((1.0 - d) / 0.3).clamp(0.0, 1.0);
                if m <= 0.0 {
                    continue;
                }
                let i = y * w + x;
                mask[i] = mask[i].max(m);
                // brighter rim, darker core
                let shade = brightness * (0.8 + 0.2 * d.min(1.0));
                for (c, t) in tint.iter().enumerate() {
                    let v = &mut texture[c * h * w + i];
                    *v = v.max(m * shade * t);
                }
            }
        }
    }
    let mask = mask.into_iter().map(|v| T::lit(v)).collect();
    let texture = Image::new(h, w, texture.into_iter().map(|v| T::lit(v)).collect())?;
    DropLayer::new(mask, texture)
}

/// Combines a background with rain components under one observation model.
pub fn compose<T: Scalar>(
    b: &Image<T>,
    mode: SynthMode,
    streaks: Option<&StreakField<T>>,
    drops: Option<&DropLayer<T>>,
    eta: T,
) -> Result<Image<T>> {
    let missing = |component| Error::MissingComponent {
        mode: mode.name(),
        component,
    };
    let streaks = match mode {
        SynthMode::Streaks | SynthMode::Combined => {
            let s = streaks.ok_or_else(|| missing("streak field"))?;
            b.check_geometry(&s.0)?;
            Some(s)
        }
        SynthMode::Drops => None,
    };
    let drops = match mode {
        SynthMode::Drops | SynthMode::Combined => {
            let d = drops.ok_or_else(|| missing("drop layer"))?;
            b.check_geometry(&d.texture)?;
            Some(d)
        }
        SynthMode::Streaks => None,
    };
    let n = b.height() * b.width();
    let one = T::one();
    let bd = b.data();
    let out: Vec<T> = (0..CHANNELS * n)
        .map(|i| {
            let base = bd[i];
            let streak = streaks.map_or(T::zero(), |s| s.0.data()[i]);
            match (mode, drops) {
                (SynthMode::Streaks, _) => base + streak,
                (SynthMode::Drops, Some(d)) => (one - d.mask[i % n]) * base + d.texture.data()[i],
                (SynthMode::Combined, Some(d)) => {
                    (one - d.mask[i % n]) * (base + streak) + eta * d.texture.data()[i]
                }
                _ => unreachable!("drop layer checked above"),
            }
        })
        .collect();
    Image::from_unclipped(b.height(), b.width(), out)
}

/// Procedural clean scene: a color gradient overlaid with random rectangles,
/// ellipses, and stripe patches.
pub fn gen_background<T: Scalar>(seed: u64, h: usize, w: usize) -> Result<Image<T>> {
    let mut rng = seeds::rng(seed, "background");
    let mut data = vec![0.0f64; CHANNELS * h * w];
    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    let (gy, gx) = (theta.sin(), theta.cos());
    let span = (h + w) as f64 / 2.0;
    for y in 0..h {
        for x in 0..w {
            let t = (((y as f64 - h as f64 / 2.0) * gy + (x as f64 - w as f64 / 2.0) * gx) / span + 0.5)
                .clamp(0.0, 1.0);
            for c in 0..CHANNELS {
                data[c * h * w + y * w + x] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.random_range(8..16);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let alpha = rng.random_range(0.6..1.0);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(2.0..(h as f64 / 4.0).max(3.0));
        let rx = rng.random_range(2.0..(w as f64 / 4.0).max(3.0));
        let kind = rng.random_range(0..3u8);
        let period = rng.random_range(2.0..5.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                let inside = match kind {
                    0 => dy.abs() <= 1.0 && dx.abs() <= 1.0,
                    1 => dy * dy + dx * dx <= 1.0,
                    _ => dy.abs() <= 1.0 && dx.abs() <= 1.0 && ((x as f64 / period).floor() as i64) % 2 == 0,
                };
                if inside {
                    for c in 0..CHANNELS {
                        let v = &mut data[c * h * w + y * w + x];
                        *v = (1.0 - alpha) * *v + alpha * color[c];
                    }
                }
            }
        }
    }
    Image::from_unclipped(h, w, data.into_iter().map(|v| T::lit(v)).collect())
}

/// Renders rain over `background` with per-sample streams derived from
/// `params.seed` and `index`.
pub fn synth_observation<T: Scalar>(
    params: &SynthParams,
    mode: SynthMode,
    background: &Image<T>,
    index: u64,
) -> Result<Image<T>> {
    let local = SynthParams {
        seed: seeds::derive_seed(params.seed, &format!("sample-{index}")),
        ..params.clone()
    };
    let (h, w) = (background.height(), background.width());
    let streaks = match mode {
        SynthMode::Drops => None,
        _ => Some(gen_streaks(&local, h, w)?),
    };
    let drops = match mode {
        SynthMode::Streaks => None,
        _ => Some(gen_drops(&local, h, w)?),
    };
    compose(background, mode, streaks.as_ref(), drops.as_ref(), T::lit(params.eta))
}

/// `count` procedural pairs named `00000`, `00001`, ...
pub fn synth_dataset<T: Scalar>(
    params: &SynthParams,
    mode: SynthMode,
    count: usize,
    h: usize,
    w: usize,
) -> Result<Vec<PairedSample<T>>> {
    params.validate()?;
    (0..count)
        .map(|i| {
            let bg_seed = seeds::derive_seed(params.seed, &format!("background-{i}"));
            let background = gen_background(bg_seed, h, w)?;
            let observation = synth_observation(params, mode, &background, i as u64)?;
            PairedSample::new(format!("{i:05}"), observation, background)
        })
        .collect()
}
