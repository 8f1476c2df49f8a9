//! Flow fields and the differentiable bilinear spatial transform.
//!
//! A [`FlowField`] stores one raw 2-vector `(Δu, Δv) ∈ [0,1]²` per pixel,
//! shared across color channels. The mapping mode turns raw values into
//! sampling coordinates; [`spatial_transform`] then bilinearly resamples the
//! image at those coordinates.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMapping {
    /// `u = u' + (h - 1) Δu`, `v = v' + (w - 1) Δv`.
    Literal,
    /// `u = u' + (2 Δu - 1) ε`, `v = v' + (2 Δv - 1) ε`: symmetric displacement
    /// bounded by the pixel budget `ε`.
    #[default]
    Centered,
}

impl FlowMapping {
    fn code(self) -> u8 {
        match self {
            FlowMapping::Literal => 0,
            FlowMapping::Centered => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FlowMapping::Literal),
            1 => Some(FlowMapping::Centered),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField<T> {
    height: usize,
    width: usize,
    /// Δu plane then Δv plane, row-major.
    raw: Vec<T>,
    mapping: FlowMapping,
    budget_eps: T,
}

impl<T: Scalar> FlowField<T> {
    pub fn new(height: usize, width: usize, raw: Vec<T>, mapping: FlowMapping, budget_eps: T) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::Argument(format!("flow field {height}x{width} is degenerate")));
        }
        if raw.len() != 2 * height * width {
            return Err(Error::Argument(format!(
                "flow field {height}x{width} needs {} raw values, got {}",
                2 * height * width,
                raw.len()
            )));
        }
        if let Some(v) = raw.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Argument(format!("raw flow value {v} outside [0, 1]")));
        }
        if !(budget_eps >= T::zero() && budget_eps.is_finite()) {
            return Err(Error::Argument(format!("invalid flow budget {budget_eps}")));
        }
        Ok(FlowField {
            height,
            width,
            raw,
            mapping,
            budget_eps,
        })
    }

    /// Centered field with zero displacement everywhere.
    pub fn identity(height: usize, width: usize, budget_eps: T) -> Result<Self> {
        let half = T::lit(0.5);
        Self::new(height, width, vec![half; 2 * height * width], FlowMapping::Centered, budget_eps)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn raw(&self) -> &[T] {
        &self.raw
    }

    pub fn mapping(&self) -> FlowMapping {
        self.mapping
    }

    pub fn budget_eps(&self) -> T {
        self.budget_eps
    }

    /// Scale from a raw value to a displacement, and the offset added to the
    /// base coordinate when the raw value is 0, for the row and column axes.
    fn affine(&self) -> ((T, T), (T, T)) {
        match self.mapping {
            FlowMapping::Literal => (
                (T::lit((self.height - 1) as f64), T::zero()),
                (T::lit((self.width - 1) as f64), T::zero()),
            ),
            FlowMapping::Centered => {
                let e = self.budget_eps;
                ((e + e, -e), (e + e, -e))
            }
        }
    }

    /// Per-pixel `(u, v)` displacement before clamping.
    pub fn displacements(&self) -> Vec<(T, T)> {
        let ((su, ou), (sv, ov)) = self.affine();
        let n = self.height * self.width;
        (0..n)
            .map(|i| (ou + su * self.raw[i], ov + sv * self.raw[n + i]))
            .collect()
    }

    /// Displacement magnitudes normalized by their maximum (all zero when the
    /// field does not move any pixel).
    pub fn magnitude_image(&self) -> Image<T> {
        let mags: Vec<T> = self
            .displacements()
            .into_iter()
            .map(|(du, dv)| (du * du + dv * dv).sqrt())
            .collect();
        let max = mags.iter().fold(T::zero(), |m, &v| m.max(v));
        let plane: Vec<T> = if max > T::zero() {
            mags.iter().map(|&v| (v / max).min(T::one())).collect()
        } else {
            vec![T::zero(); mags.len()]
        };
        let mut data = Vec::with_capacity(CHANNELS * plane.len());
        for _ in 0..CHANNELS {
            data.extend_from_slice(&plane);
        }
        Image::new(self.height, self.width, data).expect("magnitudes lie in [0, 1]")
    }

    pub fn cast<U: Scalar>(&self) -> FlowField<U> {
        FlowField {
            height: self.height,
            width: self.width,
            raw: self.raw.iter().map(|v| U::lit(v.as_f64())).collect(),
            mapping: self.mapping,
            budget_eps: U::lit(self.budget_eps.as_f64()),
        }
    }
}

/// A clamped sampling coordinate and its derivative with respect to the raw
/// flow value that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Coord<T> {
    pos: T,
    dpos_draw: T,
}

fn clamp_coord<T: Scalar>(unclamped: T, scale: T, hi: T) -> Coord<T> {
    if unclamped < T::zero() {
        Coord { pos: T::zero(), dpos_draw: T::zero() }
    } else if unclamped > hi {
        Coord { pos: hi, dpos_draw: T::zero() }
    } else {
        Coord { pos: unclamped, dpos_draw: scale }
    }
}

fn coords<T: Scalar>(f: &FlowField<T>) -> Vec<(Coord<T>, Coord<T>)> {
    let (h, w) = (f.height, f.width);
    let ((su, ou), (sv, ov)) = f.affine();
    let (hmax, wmax) = (T::lit((h - 1) as f64), T::lit((w - 1) as f64));
    let n = h * w;
    let mut out = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let u = T::lit(y as f64) + ou + su * f.raw[i];
            let v = T::lit(x as f64) + ov + sv * f.raw[n + i];
            out.push((clamp_coord(u, su, hmax), clamp_coord(v, sv, wmax)));
        }
    }
    out
}

/// Sampling coordinates `(u, v)` (row, column) of every output pixel,
/// clamped to the image rectangle.
pub fn sample_coords<T: Scalar>(f: &FlowField<T>) -> Vec<(T, T)> {
    coords(f).into_iter().map(|(u, v)| (u.pos, v.pos)).collect()
}

/// Top-left integer neighbor and fractional offset; the neighbor is pulled
/// back one cell on the last row/column so the right neighbor exists.
#[inline]
fn split<T: Scalar>(pos: T, len: usize) -> (usize, T) {
    let i = pos.floor().to_usize().unwrap_or(0).min(len - 2);
    (i, pos - T::lit(i as f64))
}

fn check_geometry<T: Scalar>(img: &Image<T>, f: &FlowField<T>) -> Result<()> {
    if img.height() != f.height || img.width() != f.width {
        return Err(Error::Geometry(format!(
            "image {}x{} vs flow {}x{}",
            img.height(),
            img.width(),
            f.height,
            f.width
        )));
    }
    Ok(())
}

/// Bilinear resampling of `img` at the flow's sampling coordinates.
pub fn spatial_transform<T: Scalar>(img: &Image<T>, f: &FlowField<T>) -> Result<Image<T>> {
    check_geometry(img, f)?;
    let (h, w) = (f.height, f.width);
    let n = h * w;
    let src = img.data();
    let mut out = vec![T::zero(); CHANNELS * n];
    let one = T::one();
    for (i, (u, v)) in coords(f).into_iter().enumerate() {
        let (u0, fu) = split(u.pos, h);
        let (v0, fv) = split(v.pos, w);
        let w00 = (one - fu) * (one - fv);
        let w10 = fu * (one - fv);
        let w01 = (one - fu) * fv;
        let w11 = fu * fv;
        let p = u0 * w + v0;
        for c in 0..CHANNELS {
            let s = &src[c * n..];
            out[c * n + i] = w00 * s[p] + w10 * s[p + w] + w01 * s[p + 1] + w11 * s[p + w + 1];
        }
    }
    // Convex combinations of unit-range values; the clip only absorbs rounding.
    Image::from_unclipped(h, w, out)
}

/// Gradients of a scalar loss through [`spatial_transform`].
#[derive(Clone, Debug)]
pub struct WarpGrad<T> {
    pub image: Vec<T>,
    /// Same layout as [`FlowField::raw`].
    pub raw: Vec<T>,
}

/// Back-propagates `grad_out` (gradient of the loss w.r.t. the warped image)
/// to the source pixels and the raw flow values.
pub fn spatial_transform_backward<T: Scalar>(img: &Image<T>, f: &FlowField<T>, grad_out: &[T]) -> Result<WarpGrad<T>> {
    check_geometry(img, f)?;
    let (h, w) = (f.height, f.width);
    let n = h * w;
    if grad_out.len() != CHANNELS * n {
        return Err(Error::Geometry(format!(
            "output gradient has {} values, expected {}",
            grad_out.len(),
            CHANNELS * n
        )));
    }
    let src = img.data();
    let mut g_img = vec![T::zero(); CHANNELS * n];
    let mut g_raw = vec![T::zero(); 2 * n];
    let one = T::one();
    for (i, (u, v)) in coords(f).into_iter().enumerate() {
        let (u0, fu) = split(u.pos, h);
        let (v0, fv) = split(v.pos, w);
        let w00 = (one - fu) * (one - fv);
        let w10 = fu * (one - fv);
        let w01 = (one - fu) * fv;
        let w11 = fu * fv;
        let p = u0 * w + v0;
        let mut d_u = T::zero();
        let mut d_v = T::zero();
        for c in 0..CHANNELS {
            let go = grad_out[c * n + i];
            let s = &src[c * n..];
            let (p00, p10, p01, p11) = (s[p], s[p + w], s[p + 1], s[p + w + 1]);
            let gi = &mut g_img[c * n..];
            gi[p] += w00 * go;
            gi[p + w] += w10 * go;
            gi[p + 1] += w01 * go;
            gi[p + w + 1] += w11 * go;
            d_u += go * ((one - fv) * (p10 - p00) + fv * (p11 - p01));
            d_v += go * ((one - fu) * (p01 - p00) + fu * (p11 - p10));
        }
        g_raw[i] = d_u * u.dpos_draw;
        g_raw[n + i] = d_v * v.dpos_draw;
    }
    Ok(WarpGrad { image: g_img, raw: g_raw })
}

/// Raw values i.i.d. uniform on `[0, 1]`.
pub fn random_flow<T: Scalar>(seed: u64, height: usize, width: usize, mapping: FlowMapping, budget_eps: T) -> Result<FlowField<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = (0..2 * height * width)
        .map(|_| T::lit(rng.random::<f64>()))
        .collect();
    FlowField::new(height, width, raw, mapping, budget_eps)
}

const FLOW_MAGIC: &[u8; 4] = b"URAF";
const FLOW_VERSION: u32 = 1;
const FLOW_HEADER: usize = 4 + 4 + 4 + 4 + 1 + 4;

/// Encodes the field: magic `URAF`, version, height, width (u32 LE), mapping
/// byte, budget (f32 LE), then `2·h·w` f32 LE raw values, Δu plane first.
pub fn encode_flow<T: Scalar>(f: &FlowField<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(FLOW_HEADER + 8 * f.height * f.width);
    out.extend_from_slice(FLOW_MAGIC);
    out.extend_from_slice(&FLOW_VERSION.to_le_bytes());
    out.extend_from_slice(&(f.height as u32).to_le_bytes());
    out.extend_from_slice(&(f.width as u32).to_le_bytes());
    out.push(f.mapping.code());
    out.extend_from_slice(&(f.budget_eps.as_f64() as f32).to_le_bytes());
    for v in &f.raw {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_flow<T: Scalar>(bytes: &[u8]) -> Result<FlowField<T>> {
    let corrupt = |msg: &str| Error::Corrupt(format!("flow field: {msg}"));
    if bytes.len() < FLOW_HEADER {
        return Err(corrupt("truncated header"));
    }
    if &bytes[..4] != FLOW_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != FLOW_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let (h, w) = (u32_at(8) as usize, u32_at(12) as usize);
    let mapping = FlowMapping::from_code(bytes[16]).ok_or_else(|| corrupt("unknown mapping"))?;
    let budget = f32::from_le_bytes(bytes[17..21].try_into().expect("4 bytes"));
    let payload = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| corrupt("dimension overflow"))?;
    if bytes.len() - FLOW_HEADER != payload {
        return Err(corrupt(&format!(
            "payload is {} bytes, header implies {payload}",
            bytes.len() - FLOW_HEADER
        )));
    }
    let raw = bytes[FLOW_HEADER..]
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    FlowField::new(h, w, raw, mapping, T::lit(budget as f64)).map_err(|e| corrupt(&e.to_string()))
}

pub fn save_flow<T: Scalar>(f: &FlowField<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_flow(f)).map_err(|e| Error::io(path, e))
}

pub fn load_flow<T: Scalar>(path: impl AsRef<Path>) -> Result<FlowField<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flow(&bytes)
}
