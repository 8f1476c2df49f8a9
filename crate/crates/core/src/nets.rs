//! The flow-field generator and the rain-removal network, plus the
//! parameter file format.
//!
//! Parameter file (`.urap`), all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "URAP"
//! version      u32      1
//! dtype        u8       4 = f32, 8 = f64
//! seed         u64
//! fingerprint  u64      architecture digest
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32, name (UTF-8)
//!   ndim       u32, dims (u32 each)
//!   data       prod(dims) values of `dtype`
//! ```

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};
use crate::nn::{Conv, ConvT, Grads, InstanceNorm, Layer, ModelParams, NamedTensor, ParamBuilder, ParamSpec, Seq, Tensor, Trace};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Flow-field height.
    pub height: usize,
    /// Flow-field width.
    pub width: usize,
    pub noise_channels: usize,
    pub noise_height: usize,
    pub noise_width: usize,
    pub down_channels: [usize; 3],
    pub down_strides: [usize; 3],
    pub residual_blocks: usize,
    /// Widths of the first two transposed convolutions; the third emits the
    /// two flow planes.
    pub up_channels: [usize; 2],
    pub up_strides: [usize; 3],
}

impl GeneratorConfig {
    /// Default layout for an `h x w` flow: noise at `h/8 x w/8`, three
    /// shape-preserving convolutions, four residual blocks, three 2x
    /// transposed convolutions.
    pub fn for_size(height: usize, width: usize) -> Self {
        GeneratorConfig {
            height,
            width,
            noise_channels: 8,
            noise_height: height / 8,
            noise_width: width / 8,
            down_channels: [32, 64, 64],
            down_strides: [1, 1, 1],
            residual_blocks: 4,
            up_channels: [32, 16],
            up_strides: [2, 2, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DerainConfig {
    /// Full-resolution and half-resolution feature widths.
    pub widths: [usize; 2],
    pub residual_blocks: usize,
    /// Add full-resolution encoder features to the decoder output.
    pub skip: bool,
}

impl Default for DerainConfig {
    fn default() -> Self {
        DerainConfig {
            widths: [16, 32],
            residual_blocks: 2,
            skip: true,
        }
    }
}

fn plain_block(pb: &mut ParamBuilder, name: &str, c: usize) -> Layer {
    Layer::Residual(Seq(vec![
        Layer::Conv(Conv::new(pb, &format!("{name}.conv1"), c, c, 3, 1, true)),
        Layer::Relu,
        Layer::Conv(Conv::new(pb, &format!("{name}.conv2"), c, c, 3, 1, true)),
    ]))
}

fn normed_block(pb: &mut ParamBuilder, name: &str, c: usize) -> Layer {
    Layer::Residual(Seq(vec![
        Layer::Conv(Conv::new(pb, &format!("{name}.conv1"), c, c, 3, 1, false)),
        Layer::Norm(InstanceNorm::new(pb, &format!("{name}.norm1"), c)),
        Layer::Relu,
        Layer::Conv(Conv::new(pb, &format!("{name}.conv2"), c, c, 3, 1, false)),
        Layer::Norm(InstanceNorm::new(pb, &format!("{name}.norm2"), c)),
    ]))
}

fn fingerprint_of<C: Serialize>(kind: &str, cfg: &C) -> u64 {
    let json = serde_json::to_string(cfg).expect("config serializes");
    seeds::fingerprint(&format!("{kind}:{json}"))
}

/// Noise-to-flow generator: strided convolutions with instance norm and
/// ReLU, residual blocks, transposed convolutions, sigmoid.
#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    specs: Vec<ParamSpec>,
    net: Seq,
}

/// Saved state of a traced generator pass.
pub struct GeneratorTrace<T>(Trace<T>);

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Result<Self> {
        let bad = |msg: String| Err(Error::Config(format!("generator: {msg}")));
        if cfg.noise_channels == 0 || cfg.noise_height == 0 || cfg.noise_width == 0 {
            return bad("noise shape must be non-empty".into());
        }
        if cfg.down_channels.contains(&0) || cfg.up_channels.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if cfg.down_strides.contains(&0) {
            return bad("strides must be positive".into());
        }
        if let Some(s) = cfg.up_strides.iter().find(|&&s| s != 1 && s % 2 != 0) {
            return bad(format!("transposed-convolution stride {s} must be 1 or even"));
        }
        let mut pb = ParamBuilder::default();
        let mut layers = Vec::new();
        let mut c = cfg.noise_channels;
        for (i, (&out, &s)) in cfg.down_channels.iter().zip(&cfg.down_strides).enumerate() {
            layers.push(Layer::Conv(Conv::new(&mut pb, &format!("down{i}"), c, out, 3, s, false)));
            layers.push(Layer::Norm(InstanceNorm::new(&mut pb, &format!("down{i}.norm"), out)));
            layers.push(Layer::Relu);
            c = out;
        }
        for i in 0..cfg.residual_blocks {
            layers.push(normed_block(&mut pb, &format!("res{i}"), c));
        }
        for (i, &out) in cfg.up_channels.iter().enumerate() {
            layers.push(Layer::ConvT(ConvT::new(&mut pb, &format!("up{i}"), c, out, cfg.up_strides[i], false)));
            layers.push(Layer::Norm(InstanceNorm::new(&mut pb, &format!("up{i}.norm"), out)));
            layers.push(Layer::Relu);
            c = out;
        }
        layers.push(Layer::ConvT(ConvT::new(&mut pb, "up2", c, 2, cfg.up_strides[2], true)));
        layers.push(Layer::Sigmoid);
        let net = Seq(layers);
        let out = net.out_shape((cfg.noise_channels, cfg.noise_height, cfg.noise_width));
        if out != (2, cfg.height, cfg.width) {
            return bad(format!(
                "noise {}x{}x{} maps to {}x{}x{}, expected 2x{}x{}",
                cfg.noise_channels, cfg.noise_height, cfg.noise_width, out.0, out.1, out.2, cfg.height, cfg.width
            ));
        }
        Ok(Generator { cfg, specs: pb.specs, net })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_of("generator", &self.cfg)
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        ModelParams::init(&self.specs, seed, self.fingerprint())
    }

    pub fn check_params<T: Scalar>(&self, p: &ModelParams<T>) -> Result<()> {
        if p.fingerprint != self.fingerprint() {
            return Err(Error::Fingerprint {
                expected: self.fingerprint(),
                found: p.fingerprint,
            });
        }
        p.check_specs(&self.specs)
    }

    pub fn noise_shape(&self) -> (usize, usize, usize) {
        (self.cfg.noise_channels, self.cfg.noise_height, self.cfg.noise_width)
    }

    /// Standard-normal noise of the configured shape.
    pub fn sample_noise<T: Scalar>(&self, rng: &mut impl Rng) -> Tensor<T> {
        let (c, h, w) = self.noise_shape();
        let data = (0..c * h * w)
            .map(|_| T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Tensor { c, h, w, data }
    }

    fn check_noise<T: Scalar>(&self, z: &Tensor<T>) -> Result<()> {
        if z.shape() != self.noise_shape() {
            return Err(Error::Geometry(format!(
                "noise {:?} does not match the configured {:?}",
                z.shape(),
                self.noise_shape()
            )));
        }
        Ok(())
    }

    /// Raw flow values (Δu plane then Δv plane), each in `(0, 1)`.
    pub fn forward<T: Scalar>(&self, p: &ModelParams<T>, z: &Tensor<T>) -> Result<Vec<T>> {
        self.check_noise(z)?;
        Ok(self.net.eval(p, z.clone()).data)
    }

    pub fn forward_traced<T: Scalar>(&self, p: &ModelParams<T>, z: &Tensor<T>) -> Result<(Vec<T>, GeneratorTrace<T>)> {
        self.check_noise(z)?;
        let (y, trace) = self.net.forward(p, z.clone());
        Ok((y.data, GeneratorTrace(trace)))
    }

    /// Accumulates parameter gradients given the gradient w.r.t. the raw flow.
    pub fn backward<T: Scalar>(&self, p: &ModelParams<T>, trace: &GeneratorTrace<T>, grad_raw: &[T], grads: &mut Grads<T>) {
        let dy = Tensor {
            c: 2,
            h: self.cfg.height,
            w: self.cfg.width,
            data: grad_raw.to_vec(),
        };
        self.net.backward(p, &trace.0, dy, Some(grads), false);
    }
}

/// Input intensities are pulled into `[LOGIT_EPS, 1 - LOGIT_EPS]` before the
/// logit so the identity path stays finite.
const LOGIT_EPS: f64 = 1e-3;

/// Encoder-decoder rain-removal network:
/// `out = sigmoid(logit(O) + tail(decode(encode(O)) [+ head(O)]))`.
#[derive(Clone, Debug)]
pub struct DerainNet {
    cfg: DerainConfig,
    specs: Vec<ParamSpec>,
    head: Seq,
    body: Seq,
    tail: Seq,
}

pub struct DerainTrace<T> {
    input: Vec<T>,
    output: Vec<T>,
    head: Trace<T>,
    body: Trace<T>,
    tail: Trace<T>,
    h: usize,
    w: usize,
}

impl DerainNet {
    pub fn new(cfg: DerainConfig) -> Result<Self> {
        if cfg.widths.contains(&0) {
            return Err(Error::Config("derain: widths must be positive".into()));
        }
        let [c1, c2] = cfg.widths;
        let mut pb = ParamBuilder::default();
        let head = Seq(vec![
            Layer::Conv(Conv::new(&mut pb, "head", CHANNELS, c1, 3, 1, true)),
            Layer::Relu,
        ]);
        let mut body = vec![
            Layer::Conv(Conv::new(&mut pb, "down", c1, c2, 3, 2, true)),
            Layer::Relu,
        ];
        for i in 0..cfg.residual_blocks {
            body.push(plain_block(&mut pb, &format!("res{i}"), c2));
        }
        body.push(Layer::ConvT(ConvT::new(&mut pb, "up", c2, c1, 2, true)));
        body.push(Layer::Relu);
        let tail = Seq(vec![Layer::Conv(Conv::new(&mut pb, "tail", c1, CHANNELS, 3, 1, true))]);
        Ok(DerainNet {
            cfg,
            specs: pb.specs,
            head,
            body: Seq(body),
            tail,
        })
    }

    pub fn config(&self) -> &DerainConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_of("derain", &self.cfg)
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        ModelParams::init(&self.specs, seed, self.fingerprint())
    }

    pub fn check_params<T: Scalar>(&self, p: &ModelParams<T>) -> Result<()> {
        if p.fingerprint != self.fingerprint() {
            return Err(Error::Fingerprint {
                expected: self.fingerprint(),
                found: p.fingerprint,
            });
        }
        p.check_specs(&self.specs)
    }

    fn check_input<T: Scalar>(&self, o: &Image<T>) -> Result<()> {
        if !o.height().is_multiple_of(2) || !o.width().is_multiple_of(2) {
            return Err(Error::Geometry(format!(
                "derain input {}x{} must have even sides",
                o.height(),
                o.width()
            )));
        }
        Ok(())
    }

    fn logit_input<T: Scalar>(v: T) -> T {
        let eps = T::lit(LOGIT_EPS);
        let c = v.max(eps).min(T::one() - eps);
        (c / (T::one() - c)).ln()
    }

    fn finish<T: Scalar>(o: &Image<T>, mut t: Vec<T>) -> Vec<T> {
        for (v, &x) in t.iter_mut().zip(o.data()) {
            let z = *v + Self::logit_input(x);
            *v = T::one() / (T::one() + (-z).exp());
        }
        t
    }

    pub fn forward<T: Scalar>(&self, p: &ModelParams<T>, o: &Image<T>) -> Result<Image<T>> {
        self.check_input(o)?;
        let x = Tensor::new(CHANNELS, o.height(), o.width(), o.data().to_vec())?;
        let h0 = self.head.eval(p, x);
        let mut b = self.body.eval(p, h0.clone());
        if self.cfg.skip {
            for (a, &s) in b.data.iter_mut().zip(&h0.data) {
                *a += s;
            }
        }
        let t = self.tail.eval(p, b);
        Image::from_unclipped(o.height(), o.width(), Self::finish(o, t.data))
    }

    pub fn forward_traced<T: Scalar>(&self, p: &ModelParams<T>, o: &Image<T>) -> Result<(Image<T>, DerainTrace<T>)> {
        self.check_input(o)?;
        let x = Tensor::new(CHANNELS, o.height(), o.width(), o.data().to_vec())?;
        let (h0, head) = self.head.forward(p, x);
        let (mut b, body) = self.body.forward(p, h0.clone());
        if self.cfg.skip {
            for (a, &s) in b.data.iter_mut().zip(&h0.data) {
                *a += s;
            }
        }
        let (t, tail) = self.tail.forward(p, b);
        let out = Self::finish(o, t.data);
        let img = Image::from_unclipped(o.height(), o.width(), out.clone())?;
        let trace = DerainTrace {
            input: o.data().to_vec(),
            output: out,
            head,
            body,
            tail,
            h: o.height(),
            w: o.width(),
        };
        Ok((img, trace))
    }

    /// Back-propagates `grad_out`; accumulates parameter gradients when
    /// `grads` is given and returns the input gradient when `need_input`.
    pub fn backward<T: Scalar>(
        &self,
        p: &ModelParams<T>,
        trace: &DerainTrace<T>,
        grad_out: &[T],
        mut grads: Option<&mut Grads<T>>,
        need_input: bool,
    ) -> Option<Vec<T>> {
        let one = T::one();
        let eps = T::lit(LOGIT_EPS);
        // through the sigmoid
        let dz: Vec<T> = grad_out
            .iter()
            .zip(&trace.output)
            .map(|(&g, &y)| g * y * (one - y))
            .collect();
        let dt = Tensor {
            c: CHANNELS,
            h: trace.h,
            w: trace.w,
            data: dz.clone(),
        };
        let db = self.tail.backward(p, &trace.tail, dt, grads.as_deref_mut(), true).expect("requested");
        let mut dh0 = self.body.backward(p, &trace.body, db.clone(), grads.as_deref_mut(), true).expect("requested");
        if self.cfg.skip {
            for (a, &s) in dh0.data.iter_mut().zip(&db.data) {
                *a += s;
            }
        }
        let dx = self.head.backward(p, &trace.head, dh0, grads, need_input)?;
        let mut dx = dx.data;
        for ((d, &g), &x) in dx.iter_mut().zip(&dz).zip(&trace.input) {
            if x > eps && x < one - eps {
                *d += g / (x * (one - x));
            }
        }
        Some(dx)
    }
}

const PARAMS_MAGIC: &[u8; 4] = b"URAP";
const PARAMS_VERSION: u32 = 1;

pub fn encode_params<T: Scalar>(p: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + p.len() * T::BYTES);
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.push(T::BYTES as u8);
    out.extend_from_slice(&p.seed.to_le_bytes());
    out.extend_from_slice(&p.fingerprint.to_le_bytes());
    out.extend_from_slice(&(p.tensors.len() as u32).to_le_bytes());
    for t in &p.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("parameters: truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_values<T: Scalar, U: Scalar>(raw: &[u8]) -> Vec<T> {
    raw.chunks_exact(U::BYTES).map(|c| T::lit(U::read_le(c).as_f64())).collect()
}

/// Decodes a parameter file. Values stored at a different precision are
/// converted; `expected_fingerprint` rejects files built for another
/// architecture.
pub fn decode_params<T: Scalar>(bytes: &[u8], expected_fingerprint: Option<u64>) -> Result<ModelParams<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != PARAMS_MAGIC {
        return Err(Error::Corrupt("parameters: bad magic".into()));
    }
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(Error::Corrupt(format!("parameters: unsupported version {version}")));
    }
    let dtype = r.take(1)?[0] as usize;
    if dtype != 4 && dtype != 8 {
        return Err(Error::Corrupt(format!("parameters: unknown dtype {dtype}")));
    }
    let seed = r.u64()?;
    let fingerprint = r.u64()?;
    if let Some(expected) = expected_fingerprint {
        if expected != fingerprint {
            return Err(Error::Fingerprint {
                expected,
                found: fingerprint,
            });
        }
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Corrupt("parameters: tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype))
            .ok_or_else(|| Error::Corrupt(format!("parameters: tensor {name} overflows")))?;
        let raw = r.take(n)?;
        let data = if dtype == 4 {
            read_values::<T, f32>(raw)
        } else {
            read_values::<T, f64>(raw)
        };
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt("parameters: trailing bytes".into()));
    }
    let p = ModelParams {
        tensors,
        seed,
        fingerprint,
    };
    if !p.all_finite() {
        return Err(Error::Corrupt("parameters: non-finite weight".into()));
    }
    Ok(p)
}

pub fn save_params<T: Scalar>(p: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(p)).map_err(|e| Error::io(path, e))
}

pub fn load_params<T: Scalar>(path: impl AsRef<Path>, expected_fingerprint: Option<u64>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes, expected_fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_generator() -> Generator {
        Generator::new(GeneratorConfig {
            height: 8,
            width: 8,
            noise_channels: 2,
            noise_height: 4,
            noise_width: 4,
            down_channels: [3, 4, 4],
            down_strides: [1, 2, 1],
            residual_blocks: 1,
            up_channels: [4, 3],
            up_strides: [2, 2, 1],
        })
        .unwrap()
    }

    #[test]
    fn default_generator_layout() {
        let g = Generator::new(GeneratorConfig::for_size(64, 64)).unwrap();
        assert_eq!(g.noise_shape(), (8, 8, 8));
        let p: ModelParams<f32> = g.init(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = g.sample_noise(&mut rng);
        let raw = g.forward(&p, &z).unwrap();
        assert_eq!(raw.len(), 2 * 64 * 64);
        assert!(raw.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(raw, g.forward(&p, &z).unwrap());
    }

    #[test]
    fn generator_rejects_bad_arithmetic() {
        let mut cfg = GeneratorConfig::for_size(64, 64);
        cfg.noise_height = 7;
        assert!(matches!(Generator::new(cfg), Err(Error::Config(_))));
        let mut cfg = GeneratorConfig::for_size(64, 64);
        cfg.up_strides = [3, 2, 2];
        assert!(Generator::new(cfg).is_err());
    }

    #[test]
    fn generator_init_determinism() {
        let g = tiny_generator();
        let a: ModelParams<f64> = g.init(1);
        assert_eq!(a, g.init(1));
        assert_ne!(a, g.init(2));
        assert!(a.all_finite());
        g.check_params(&a).unwrap();
        let wrong_noise = Tensor::<f64>::zeros(2, 3, 4);
        assert!(matches!(g.forward(&a, &wrong_noise), Err(Error::Geometry(_))));
    }

    #[test]
    fn derain_shapes_and_range() {
        let net = DerainNet::new(DerainConfig::default()).unwrap();
        let p: ModelParams<f32> = net.init(5);
        let o = Image::<f32>::from_fn(16, 24, |c, y, x| ((c + y * 3 + x) % 11) as f32 / 10.0).unwrap();
        let out = net.forward(&p, &o).unwrap();
        assert_eq!((out.height(), out.width()), (16, 24));
        let (traced, _) = net.forward_traced(&p, &o).unwrap();
        assert_eq!(out, traced);
        let odd = Image::<f32>::filled(9, 8, 0.5).unwrap();
        assert!(net.forward(&p, &odd).is_err());
    }

    #[test]
    fn params_round_trip_and_errors() {
        let net = DerainNet::new(DerainConfig::default()).unwrap();
        let p: ModelParams<f32> = net.init(9);
        let bytes = encode_params(&p);
        let back: ModelParams<f32> = decode_params(&bytes, Some(net.fingerprint())).unwrap();
        assert_eq!(back, p);

        let other = DerainNet::new(DerainConfig { skip: false, ..DerainConfig::default() }).unwrap();
        assert!(matches!(
            decode_params::<f32>(&bytes, Some(other.fingerprint())),
            Err(Error::Fingerprint { .. })
        ));
        assert!(matches!(decode_params::<f32>(&bytes[..bytes.len() - 3], None), Err(Error::Corrupt(_))));
        assert!(matches!(decode_params::<f32>(&bytes[..12], None), Err(Error::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[1] = b'x';
        assert!(matches!(decode_params::<f32>(&bad, None), Err(Error::Corrupt(_))));

        let wide: ModelParams<f64> = decode_params(&bytes, None).unwrap();
        assert_eq!(wide.tensors[0].data[0] as f32, p.tensors[0].data[0]);
    }
}
