//! RGB rasters with unit-range intensities, PNG I/O, and paired datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{ColorType, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHANNELS: usize = 3;
/// Smallest side accepted by [`Image`].
pub const MIN_SIDE: usize = 8;

/// A 3-channel image, channel-planar and row-major, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is below the {MIN_SIDE}x{MIN_SIDE} minimum"
            )));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::InvalidImage(format!(
                "{} values for a {height}x{width} RGB image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::InvalidImage(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    /// Clips `data` into `[0, 1]` and wraps it.
    pub fn from_unclipped(height: usize, width: usize, mut data: Vec<T>) -> Result<Self> {
        clip_in_place(&mut data, T::zero(), T::one());
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; CHANNELS * height * width])
    }

    /// Builds an image from `f(channel, row, col)`.
    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn same_geometry(&self, other: &Image<T>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_geometry(&self, other: &Image<T>) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::Geometry(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn clip(&self, lo: T, hi: T) -> Image<T> {
        let mut data = self.data.clone();
        clip_in_place(&mut data, lo, hi);
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    /// Reorders color planes: output plane `i` is input plane `order[i]`.
    pub fn permute_channels(&self, order: [usize; CHANNELS]) -> Image<T> {
        let mut data = Vec::with_capacity(self.data.len());
        for &c in &order {
            data.extend_from_slice(self.plane(c));
        }
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let n = self.height * self.width;
        let mut bytes = Vec::with_capacity(CHANNELS * n);
        for i in 0..n {
            for c in 0..CHANNELS {
                bytes.push(quantize(self.data[c * n + i]));
            }
        }
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer sized for the image")
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Result<Self> {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let raw = rgb.as_raw();
        let scale = T::lit(255.0);
        let mut data = vec![T::zero(); CHANNELS * h * w];
        for i in 0..h * w {
            for c in 0..CHANNELS {
                data[c * h * w + i] = T::lit(raw[i * CHANNELS + c] as f64) / scale;
            }
        }
        Self::new(h, w, data)
    }
}

/// Round-half-up 8-bit quantization.
#[inline]
pub fn quantize<T: Scalar>(v: T) -> u8 {
    let scaled = (v.as_f64() * 255.0 + 0.5).floor();
    scaled.clamp(0.0, 255.0) as u8
}

pub fn clip_in_place<T: Scalar>(values: &mut [T], lo: T, hi: T) {
    for v in values {
        *v = hi.min(lo.max(*v));
    }
}

pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    if img.color() != ColorType::Rgb8 {
        return Err(Error::NotRgb {
            path: path.to_path_buf(),
            found: format!("{:?}", img.color()),
        });
    }
    let rgb = img.into_rgb8();
    Image::from_rgb8(&rgb).map_err(|e| match e {
        Error::InvalidImage(msg) => Error::Decode {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

pub fn save_image<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    img.to_rgb8()
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::io(path, std::io::Error::other(other.to_string())),
        })
}

/// A rain observation and the clean background it was derived from.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample<T> {
    pub id: String,
    pub observation: Image<T>,
    pub background: Image<T>,
}

impl<T: Scalar> PairedSample<T> {
    pub fn new(id: impl Into<String>, observation: Image<T>, background: Image<T>) -> Result<Self> {
        let id = id.into();
        observation
            .check_geometry(&background)
            .map_err(|e| Error::Geometry(format!("pair {id}: {e}")))?;
        Ok(PairedSample {
            id,
            observation,
            background,
        })
    }

    pub fn height(&self) -> usize {
        self.observation.height()
    }

    pub fn width(&self) -> usize {
        self.observation.width()
    }
}

pub const RAIN_DIR: &str = "rain";
pub const CLEAN_DIR: &str = "clean";

fn png_stems(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png || !path.is_file() {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Loads `<root>/rain/<name>.png` paired with `<root>/clean/<name>.png`,
/// ordered by name.
pub fn load_paired_dataset<T: Scalar>(root: impl AsRef<Path>) -> Result<Vec<PairedSample<T>>> {
    let root = root.as_ref();
    let rain_dir = root.join(RAIN_DIR);
    let clean_dir = root.join(CLEAN_DIR);
    let rain = png_stems(&rain_dir)?;
    let clean = png_stems(&clean_dir)?;
    if let Some(name) = rain.keys().find(|k| !clean.contains_key(*k)) {
        return Err(Error::Orphan {
            name: format!("{name}.png"),
            missing_dir: clean_dir,
        });
    }
    if let Some(name) = clean.keys().find(|k| !rain.contains_key(*k)) {
        return Err(Error::Orphan {
            name: format!("{name}.png"),
            missing_dir: rain_dir,
        });
    }
    rain.iter()
        .map(|(name, rain_path)| {
            let observation = load_image(rain_path)?;
            let background = load_image(&clean[name])?;
            PairedSample::new(name.clone(), observation, background)
        })
        .collect()
}

/// Writes `samples` into the paired layout under `root`, creating both
/// subdirectories even when `samples` is empty.
pub fn save_paired_dataset<T: Scalar>(samples: &[PairedSample<T>], root: impl AsRef<Path>) -> Result<()> {
    let root = root.as_ref();
    for dir in [RAIN_DIR, CLEAN_DIR] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in samples {
        save_image(&s.observation, root.join(RAIN_DIR).join(format!("{}.png", s.id)))?;
        save_image(&s.background, root.join(CLEAN_DIR).join(format!("{}.png", s.id)))?;
    }
    Ok(())
}
