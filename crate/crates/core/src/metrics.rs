//! Image-quality metrics and the two training objectives.
//!
//! SSIM is computed over Gaussian-weighted "valid" windows (no padding) and
//! averaged over windows and channels. Every differentiable quantity has a
//! `*_grad` twin returning the gradient with respect to its image arguments
//! as a flat channel-planar buffer.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimParams {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub window_size: usize,
    pub window_sigma: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            c1: 1e-4,
            c2: 9e-4,
            c3: 4.5e-4,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            window_size: 11,
            window_sigma: 1.5,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.c3 > 0.0) {
            return Err(Error::Argument("SSIM constants must be positive".into()));
        }
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "SSIM window must be odd and >= 3, got {}",
                self.window_size
            )));
        }
        if !(self.window_sigma > 0.0) {
            return Err(Error::Argument("SSIM window sigma must be positive".into()));
        }
        Ok(())
    }

    /// With `c3 = c2 / 2` and `beta = gamma` the contrast and structure
    /// terms collapse into `(2 cov + c2) / (var_x + var_y + c2)`, which is
    /// smooth at zero variance.
    fn fused(&self) -> bool {
        (self.c3 - self.c2 / 2.0).abs() <= 1e-15 * self.c2 && self.beta == self.gamma
    }

    pub(crate) fn kernel<T: Scalar>(&self) -> Vec<T> {
        let half = (self.window_size / 2) as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| T::lit(v / sum)).collect()
    }
}

/// Separable "valid" correlation of an `h x w` plane with `g ⊗ g`.
fn filter_valid<T: Scalar>(plane: &[T], h: usize, w: usize, g: &[T]) -> Vec<T> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); oh * w];
    for i in 0..oh {
        let row = &mut tmp[i * w..(i + 1) * w];
        for (a, &ga) in g.iter().enumerate() {
            let src = &plane[(i + a) * w..(i + a + 1) * w];
            for (t, &s) in row.iter_mut().zip(src) {
                *t += ga * s;
            }
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for i in 0..oh {
        let src = &tmp[i * w..(i + 1) * w];
        for j in 0..ow {
            let mut acc = T::zero();
            for (b, &gb) in g.iter().enumerate() {
                acc += gb * src[j + b];
            }
            out[i * ow + j] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `(h-k+1) x (w-k+1)` map back
/// onto the `h x w` grid.
fn filter_valid_adjoint<T: Scalar>(map: &[T], h: usize, w: usize, g: &[T]) -> Vec<T> {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut tmp = vec![T::zero(); oh * w];
    for i in 0..oh {
        let dst = &mut tmp[i * w..(i + 1) * w];
        for j in 0..ow {
            let v = map[i * ow + j];
            for (b, &gb) in g.iter().enumerate() {
                dst[j + b] += gb * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for i in 0..oh {
        let src = &tmp[i * w..(i + 1) * w];
        for (a, &ga) in g.iter().enumerate() {
            let dst = &mut out[(i + a) * w..(i + a + 1) * w];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += ga * s;
            }
        }
    }
    out
}

#[inline]
/// Odd power `sign(x) |x|^e`, so a negative structure term stays defined
/// under fractional exponents.
fn pw<T: Scalar>(x: T, e: T) -> T {
    if e == T::one() {
        x
    } else if e == T::zero() {
        T::one()
    } else {
        x.abs().powf(e).copysign(x)
    }
}

/// Derivative of [`pw`] in `x`.
fn dpw<T: Scalar>(x: T, e: T) -> T {
    if e == T::one() {
        T::one()
    } else if e == T::zero() {
        T::zero()
    } else {
        e * x.abs().powf(e - T::one())
    }
}

/// Per-window SSIM and its partials with respect to the raw moments
/// `(mu_x, mu_y, E[x^2], E[y^2], E[xy])`.
struct WindowTerms<T> {
    value: T,
    d_mx: T,
    d_my: T,
    d_exx: T,
    d_eyy: T,
    d_exy: T,
}

struct SsimConsts<T> {
    c1: T,
    c2: T,
    c3: T,
    alpha: T,
    beta: T,
    gamma: T,
    fused: bool,
}

impl<T: Scalar> SsimConsts<T> {
    fn new(p: &SsimParams) -> Self {
        SsimConsts {
            c1: T::lit(p.c1),
            c2: T::lit(p.c2),
            c3: T::lit(p.c3),
            alpha: T::lit(p.alpha),
            beta: T::lit(p.beta),
            gamma: T::lit(p.gamma),
            fused: p.fused(),
        }
    }

    fn window(&self, mx: T, my: T, exx: T, eyy: T, exy: T) -> WindowTerms<T> {
        let two = T::lit(2.0);
        let vx = exx - mx * mx;
        let vy = eyy - my * my;
        let cov = exy - mx * my;

        let ln = two * mx * my + self.c1;
        let ld = mx * mx + my * my + self.c1;
        let l = ln / ld;
        let dl_dmx = two * my / ld - ln * two * mx / (ld * ld);
        let dl_dmy = two * mx / ld - ln * two * my / (ld * ld);

        // cs-part and its partials w.r.t. (vx, vy, cov)
        let (cs, dcs_dvx, dcs_dvy, dcs_dcov) = if self.fused {
            let n = two * cov + self.c2;
            let d = vx + vy + self.c2;
            let cs = n / d;
            let e = self.beta;
            let val = pw(cs, e);
            let dval = dpw(cs, e);
            let dvx = -n / (d * d) * dval;
            (val, dvx, dvx, two / d * dval)
        } else {
            let sx = vx.max(T::zero()).sqrt();
            let sy = vy.max(T::zero()).sqrt();
            let cn = two * sx * sy + self.c2;
            let cd = vx + vy + self.c2;
            let c = cn / cd;
            let sn = cov + self.c3;
            let sd = sx * sy + self.c3;
            let s = sn / sd;
            let cb = pw(c, self.beta);
            let sg = pw(s, self.gamma);
            let dcb = dpw(c, self.beta);
            let dsg = dpw(s, self.gamma);
            // partials of c and s w.r.t. sigma_x, sigma_y, vx, vy, cov
            let dc_dsx = two * sy / cd;
            let dc_dsy = two * sx / cd;
            let dc_dv = -cn / (cd * cd);
            let ds_dsx = -sn * sy / (sd * sd);
            let ds_dsy = -sn * sx / (sd * sd);
            let ds_dcov = T::one() / sd;
            let tiny = T::lit(1e-12);
            let dsx_dvx = T::lit(0.5) / sx.max(tiny);
            let dsy_dvy = T::lit(0.5) / sy.max(tiny);
            let dcs_dsx = dcb * dc_dsx * sg + cb * dsg * ds_dsx;
            let dcs_dsy = dcb * dc_dsy * sg + cb * dsg * ds_dsy;
            let dvx = dcs_dsx * dsx_dvx + dcb * dc_dv * sg;
            let dvy = dcs_dsy * dsy_dvy + dcb * dc_dv * sg;
            (cb * sg, dvx, dvy, cb * dsg * ds_dcov)
        };

        let la = pw(l, self.alpha);
        let dla = dpw(l, self.alpha);
        let value = la * cs;
        let d_l = dla * cs;
        // chain through vx = exx - mx^2, vy = eyy - my^2, cov = exy - mx my
        let d_mx = d_l * dl_dmx + la * (dcs_dvx * (-two * mx) + dcs_dcov * (-my));
        let d_my = d_l * dl_dmy + la * (dcs_dvy * (-two * my) + dcs_dcov * (-mx));
        WindowTerms {
            value,
            d_mx,
            d_my,
            d_exx: la * dcs_dvx,
            d_eyy: la * dcs_dvy,
            d_exy: la * dcs_dcov,
        }
    }
}

fn check_pair<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<()> {
    x.check_geometry(y)
}

fn check_window<T: Scalar>(x: &Image<T>, p: &SsimParams) -> Result<()> {
    p.validate()?;
    if x.height() < p.window_size || x.width() < p.window_size {
        return Err(Error::TooSmall {
            height: x.height(),
            width: x.width(),
            window: p.window_size,
        });
    }
    Ok(())
}

/// SSIM value with gradients with respect to both inputs.
#[derive(Clone, Debug)]
pub struct SsimGrad<T> {
    pub value: T,
    pub grad_x: Vec<T>,
    pub grad_y: Vec<T>,
}

fn ssim_impl<T: Scalar>(x: &Image<T>, y: &Image<T>, p: &SsimParams, want_grad: bool) -> Result<SsimGrad<T>> {
    check_pair(x, y)?;
    check_window(x, p)?;
    let (h, w) = (x.height(), x.width());
    let g: Vec<T> = p.kernel();
    let k = g.len();
    let windows = (h + 1 - k) * (w + 1 - k);
    let norm = T::lit((windows * CHANNELS) as f64);
    let consts = SsimConsts::new(p);

    let mut total = T::zero();
    let (mut grad_x, mut grad_y) = if want_grad {
        (vec![T::zero(); x.data().len()], vec![T::zero(); x.data().len()])
    } else {
        (Vec::new(), Vec::new())
    };

    for c in 0..CHANNELS {
        let xp = x.plane(c);
        let yp = y.plane(c);
        let xx: Vec<T> = xp.iter().map(|&v| v * v).collect();
        let yy: Vec<T> = yp.iter().map(|&v| v * v).collect();
        let xy: Vec<T> = xp.iter().zip(yp).map(|(&a, &b)| a * b).collect();
        let mx = filter_valid(xp, h, w, &g);
        let my = filter_valid(yp, h, w, &g);
        let exx = filter_valid(&xx, h, w, &g);
        let eyy = filter_valid(&yy, h, w, &g);
        let exy = filter_valid(&xy, h, w, &g);

        let mut maps: [Vec<T>; 5] = Default::default();
        if want_grad {
            for m in maps.iter_mut() {
                *m = vec![T::zero(); windows];
            }
        }
        let mut plane_sum = T::zero();
        for i in 0..windows {
            let t = consts.window(mx[i], my[i], exx[i], eyy[i], exy[i]);
            plane_sum += t.value;
            if want_grad {
                maps[0][i] = t.d_mx / norm;
                maps[1][i] = t.d_my / norm;
                maps[2][i] = t.d_exx / norm;
                maps[3][i] = t.d_eyy / norm;
                maps[4][i] = t.d_exy / norm;
            }
        }
        total += plane_sum;

        if want_grad {
            let a_mx = filter_valid_adjoint(&maps[0], h, w, &g);
            let a_my = filter_valid_adjoint(&maps[1], h, w, &g);
            let a_exx = filter_valid_adjoint(&maps[2], h, w, &g);
            let a_eyy = filter_valid_adjoint(&maps[3], h, w, &g);
            let a_exy = filter_valid_adjoint(&maps[4], h, w, &g);
            let two = T::lit(2.0);
            let off = c * h * w;
            for i in 0..h * w {
                grad_x[off + i] = a_mx[i] + two * xp[i] * a_exx[i] + yp[i] * a_exy[i];
                grad_y[off + i] = a_my[i] + two * yp[i] * a_eyy[i] + xp[i] * a_exy[i];
            }
        }
    }
    Ok(SsimGrad {
        value: total / norm,
        grad_x,
        grad_y,
    })
}

pub fn ssim<T: Scalar>(x: &Image<T>, y: &Image<T>, p: &SsimParams) -> Result<T> {
    Ok(ssim_impl(x, y, p, false)?.value)
}

pub fn ssim_grad<T: Scalar>(x: &Image<T>, y: &Image<T>, p: &SsimParams) -> Result<SsimGrad<T>> {
    ssim_impl(x, y, p, true)
}

pub fn mse<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<T> {
    check_pair(x, y)?;
    let n = T::lit(x.data().len() as f64);
    Ok(x.data().iter().zip(y.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n)
}

/// Peak signal-to-noise ratio in dB; `+inf` when the images are identical.
pub fn psnr<T: Scalar>(x: &Image<T>, y: &Image<T>, max_value: T) -> Result<T> {
    Ok(psnr_from_mse(mse(x, y)?, max_value))
}

pub fn psnr_from_mse<T: Scalar>(mse: T, max_value: T) -> T {
    if mse == T::zero() {
        return T::infinity();
    }
    T::lit(10.0) * (max_value * max_value / mse).log10()
}

pub fn l1<T: Scalar>(x: &Image<T>, y: &Image<T>) -> Result<T> {
    check_pair(x, y)?;
    let n = T::lit(x.data().len() as f64);
    Ok(x.data().iter().zip(y.data()).map(|(&a, &b)| (a - b).abs()).sum::<T>() / n)
}

fn l1_grad_into<T: Scalar>(x: &Image<T>, y: &Image<T>, out: &mut [T]) {
    let n = T::lit(x.data().len() as f64);
    for ((o, &a), &b) in out.iter_mut().zip(x.data()).zip(y.data()) {
        let d = a - b;
        *o = if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        };
    }
}

/// Rain-removal objective: `l1(pred, b) - lambda * ssim(pred, b)`.
pub fn derain_loss<T: Scalar>(pred: &Image<T>, b: &Image<T>, lambda: T, p: &SsimParams) -> Result<T> {
    Ok(l1(pred, b)? - lambda * ssim(pred, b, p)?)
}

/// [`derain_loss`] and its gradient with respect to `pred`.
pub fn derain_loss_grad<T: Scalar>(
    pred: &Image<T>,
    b: &Image<T>,
    lambda: T,
    p: &SsimParams,
) -> Result<(T, Vec<T>)> {
    let s = ssim_grad(pred, b, p)?;
    let value = l1(pred, b)? - lambda * s.value;
    let mut grad = vec![T::zero(); pred.data().len()];
    l1_grad_into(pred, b, &mut grad);
    for (g, &sg) in grad.iter_mut().zip(&s.grad_x) {
        *g -= lambda * sg;
    }
    Ok((value, grad))
}

/// Attack objective (minimized): `ssim(adv, clean) + phi * ssim(adv, b)`.
pub fn attack_loss<T: Scalar>(
    pred_adv: &Image<T>,
    pred_clean: &Image<T>,
    b: &Image<T>,
    phi: T,
    p: &SsimParams,
) -> Result<T> {
    check_pair(pred_adv, b)?;
    Ok(ssim(pred_adv, pred_clean, p)? + phi * ssim(pred_adv, b, p)?)
}

/// [`attack_loss`] and its gradient with respect to `pred_adv`.
pub fn attack_loss_grad<T: Scalar>(
    pred_adv: &Image<T>,
    pred_clean: &Image<T>,
    b: &Image<T>,
    phi: T,
    p: &SsimParams,
) -> Result<(T, Vec<T>)> {
    check_pair(pred_adv, b)?;
    let s1 = ssim_grad(pred_adv, pred_clean, p)?;
    let s2 = ssim_grad(pred_adv, b, p)?;
    let grad = s1
        .grad_x
        .iter()
        .zip(&s2.grad_x)
        .map(|(&a, &c)| a + phi * c)
        .collect();
    Ok((s1.value + phi * s2.value, grad))
}

/// One detection: a category index (the position of the one-hot code's
/// single 1) and its confidence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: usize,
    pub confidence: f64,
}

/// A detector's output over a fixed category set, one entry per content slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    categories: usize,
    entries: Vec<Detection>,
}

impl DetectorReport {
    pub fn new(categories: usize, entries: Vec<Detection>) -> Result<Self> {
        for d in &entries {
            if d.label >= categories {
                return Err(Error::Argument(format!(
                    "label {} outside the {categories}-category set",
                    d.label
                )));
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(Error::Argument(format!("confidence {} outside [0, 1]", d.confidence)));
            }
        }
        Ok(DetectorReport { categories, entries })
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn entries(&self) -> &[Detection] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn one_hot(&self, slot: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.categories];
        v[self.entries[slot].label] = 1.0;
        v
    }
}

fn check_aligned(a: &DetectorReport, b: &DetectorReport) -> Result<()> {
    if a.len() != b.len() || a.categories != b.categories {
        return Err(Error::MisalignedReports {
            derain: a.len(),
            clear: b.len(),
        });
    }
    Ok(())
}

/// Sum of one-hot mismatches normalized by the derained report's code mass.
/// Two empty reports agree trivially and score 0.
pub fn identify_error(derain: &DetectorReport, clear: &DetectorReport) -> Result<f64> {
    check_aligned(derain, clear)?;
    let mut mismatch = 0.0;
    let mut mass = 0.0;
    for i in 0..derain.len() {
        let d = derain.one_hot(i);
        let c = clear.one_hot(i);
        mismatch += d.iter().zip(&c).map(|(a, b)| (a - b).abs()).sum::<f64>();
        mass += d.iter().sum::<f64>();
    }
    Ok(if mass == 0.0 { 0.0 } else { mismatch / mass })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BiasMode {
    /// Mean of `c_derain / c_clear` over matched labels; 1 for identical reports.
    #[default]
    Ratio,
    /// Mean of `c_derain - c_clear` over matched labels; 0 for identical reports.
    Difference,
}

/// Confidence drift over slots where both reports agree on the label.
/// In ratio mode a slot whose clear confidence is 0 carries no ratio and is
/// skipped.
pub fn confidence_bias(derain: &DetectorReport, clear: &DetectorReport, mode: BiasMode) -> Result<f64> {
    check_aligned(derain, clear)?;
    let mut sum = 0.0;
    let mut matched = 0usize;
    for (d, c) in derain.entries.iter().zip(&clear.entries) {
        if d.label != c.label {
            continue;
        }
        match mode {
            BiasMode::Difference => sum += d.confidence - c.confidence,
            BiasMode::Ratio => {
                if c.confidence == 0.0 {
                    continue;
                }
                sum += d.confidence / c.confidence;
            }
        }
        matched += 1;
    }
    if matched == 0 {
        return Err(Error::NoMatchedLabels);
    }
    Ok(sum / matched as f64)
}

/// Per-channel counts over equal-width bins of `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bins: usize,
    pub counts: [Vec<u64>; CHANNELS],
}

#[inline]
pub(crate) fn bin_index(v: f64, bins: usize) -> usize {
    ((v * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

pub fn pixel_histogram<T: Scalar>(img: &Image<T>, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::Argument(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let mut counts: [Vec<u64>; CHANNELS] = Default::default();
    for (c, slot) in counts.iter_mut().enumerate() {
        *slot = vec![0; bins];
        for &v in img.plane(c) {
            slot[bin_index(v.as_f64(), bins)] += 1;
        }
    }
    Ok(Histogram { bins, counts })
}

impl Histogram {
    /// CSV with columns `channel,bin_lo,bin_hi,count`; channels are 0=R, 1=G, 2=B.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "channel,bin_lo,bin_hi,count")?;
        for (c, counts) in self.counts.iter().enumerate() {
            for (i, n) in counts.iter().enumerate() {
                let lo = i as f64 / self.bins as f64;
                let hi = (i + 1) as f64 / self.bins as f64;
                writeln!(out, "{c},{lo},{hi},{n}")?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_csv(&mut buf)
            .and_then(|_| buf.flush())
            .map_err(|e| Error::io(path, e))
    }
}
