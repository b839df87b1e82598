//! 8-bit RGB images on disk (binary PPM), paired datasets, patch sampling
//! and synthetic degradations.

use std::path::{Path, PathBuf};

use crate::autograd::{Graph, PadMode};
use crate::error::{contract_err, shape_err, Error, ImageFault, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Interleaved 8-bit RGB pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(shape_err!("{height}x{width} RGB image needs {} bytes, got {}", height * width * 3, pixels.len()));
        }
        Ok(Self { height, width, pixels })
    }

    /// `[1, 3, h, w]` with values `byte / 255`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let plane = self.height * self.width;
        let mut data = vec![T::zero(); 3 * plane];
        let scale = T::lit(255.0);
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = T::lit(f64::from(px[c])) / scale;
            }
        }
        Tensor::from_vec(&[1, 3, self.height, self.width], data).expect("sized above")
    }

    /// Quantises a `[1, 3, h, w]` tensor: clamp to `[0, 1]`, scale by 255, round.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if n != 1 || c != 3 {
            return Err(shape_err!("image tensor must be [1, 3, h, w], got {:?}", t.shape()));
        }
        let plane = h * w;
        let d = t.data();
        let mut pixels = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for ch in 0..3 {
                let v = d[ch * plane + i].as_f64();
                let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
                pixels.push((v * 255.0).round() as u8);
            }
        }
        Self::new(h, w, pixels)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(shape_err!("crop {h}x{w} at ({y0}, {x0}) outside {}x{}", self.height, self.width));
        }
        let mut pixels = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            pixels.extend_from_slice(&self.pixels[row..row + w * 3]);
        }
        Self::new(h, w, pixels)
    }
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, ImageFault> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageFault::BadHeader(format!("missing or invalid {what}")))
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageBuffer, ImageFault> {
    let magic = bytes.get(..2).unwrap_or(bytes);
    if magic != b"P6" {
        return Err(ImageFault::UnsupportedFormat(String::from_utf8_lossy(magic).into_owned()));
    }
    let mut hd = Header { bytes, pos: 2 };
    let width = hd.number("width")? as usize;
    let height = hd.number("height")? as usize;
    let maxval = hd.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(ImageFault::BadHeader(format!("empty extents {width}x{height}")));
    }
    if maxval != 255 {
        return Err(ImageFault::MaxVal(maxval));
    }
    if !bytes.get(hd.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageFault::BadHeader("no separator after maxval".into()));
    }
    let body = &bytes[hd.pos + 1..];
    let expected = width * height * 3;
    if body.len() < expected {
        return Err(ImageFault::Truncated {
            found: body.len(),
            expected,
        });
    }
    Ok(ImageBuffer {
        height,
        width,
        pixels: body[..expected].to_vec(),
    })
}

pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_ppm(&bytes).map_err(|reason| Error::Image {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_image(img: &ImageBuffer, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub lq: ImageBuffer,
    pub gt: ImageBuffer,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, lq: ImageBuffer, gt: ImageBuffer) -> Result<Self> {
        let id = id.into();
        if (lq.height, lq.width) != (gt.height, gt.width) {
            return Err(shape_err!(
                "pair `{id}`: lq is {}x{} but gt is {}x{}",
                lq.height,
                lq.width,
                gt.height,
                gt.width
            ));
        }
        Ok(Self { id, lq, gt })
    }
}

fn ppm_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut stems = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if path.extension().is_some_and(|x| x == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Pairs `<root>/lq/<id>.ppm` with `<root>/gt/<id>.ppm`, sorted by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<PairedSample>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let (lq_dir, gt_dir) = (root.join("lq"), root.join("gt"));
        let lq = ppm_stems(&lq_dir)?;
        let gt = ppm_stems(&gt_dir)?;
        if let Some(id) = lq.iter().find(|s| gt.binary_search(s).is_err()) {
            return Err(contract_err!("{} has no ground truth partner", lq_dir.join(format!("{id}.ppm")).display()));
        }
        if let Some(id) = gt.iter().find(|s| lq.binary_search(s).is_err()) {
            return Err(contract_err!("{} has no degraded partner", gt_dir.join(format!("{id}.ppm")).display()));
        }
        let samples = gt
            .iter()
            .map(|id| {
                let file = format!("{id}.ppm");
                PairedSample::new(id.as_str(), read_image(&lq_dir.join(&file))?, read_image(&gt_dir.join(&file))?)
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    /// Writes every pair under `root` in the layout [`Dataset::open`] reads.
    pub fn save(&self, root: &Path) -> Result<()> {
        for sub in ["lq", "gt"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        for s in &self.samples {
            let file = format!("{}.ppm", s.id);
            write_image(&s.lq, &root.join("lq").join(&file))?;
            write_image(&s.gt, &root.join("gt").join(&file))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Crops the same uniformly drawn `size x size` window from both images and
/// returns them as `[1, 3, size, size]` tensors.
pub fn sample_patch_pair<T: Scalar>(sample: &PairedSample, size: usize, rng: &mut SeededRng) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w) = (sample.gt.height, sample.gt.width);
    if size == 0 || size > h.min(w) {
        return Err(contract_err!("patch size {size} does not fit in `{}` ({h}x{w})", sample.id));
    }
    let y = rng.below(h - size + 1);
    let x = rng.below(w - size + 1);
    Ok((
        sample.lq.crop(y, x, size, size)?.to_tensor(),
        sample.gt.crop(y, x, size, size)?.to_tensor(),
    ))
}

/// Patch size plus the generator that places the windows.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    pub size: usize,
    rng: SeededRng,
}

impl PatchSampler {
    pub fn new(size: usize, seed: u64) -> Self {
        Self {
            size,
            rng: SeededRng::new(seed),
        }
    }

    pub fn sample<T: Scalar>(&mut self, sample: &PairedSample) -> Result<(Tensor<T>, Tensor<T>)> {
        sample_patch_pair(sample, self.size, &mut self.rng)
    }
}

pub const DEFAULT_GAMMA_RANGE: (f64, f64) = (2.0, 4.0);
pub const DEFAULT_BLUR_SIGMA_RANGE: (f64, f64) = (1.0, 3.0);
pub const DEFAULT_NOISE_SIGMA: f64 = 0.02;
pub const DEFAULT_READ_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Degradation {
    /// `clamp(gt^gamma + N(0, read_noise))`.
    LowLight { gamma: f64, read_noise: f64 },
    /// Gaussian blur with reflect padding.
    Blur { sigma: f64 },
    /// `clamp(gt + N(0, sigma))`.
    GaussianNoise { sigma: f64 },
}

impl Degradation {
    pub fn random_lowlight(rng: &mut SeededRng) -> Self {
        let (lo, hi) = DEFAULT_GAMMA_RANGE;
        Degradation::LowLight {
            gamma: rng.uniform(lo, hi),
            read_noise: DEFAULT_READ_NOISE,
        }
    }

    pub fn random_blur(rng: &mut SeededRng) -> Self {
        let (lo, hi) = DEFAULT_BLUR_SIGMA_RANGE;
        Degradation::Blur {
            sigma: rng.uniform(lo, hi),
        }
    }

    pub fn noise() -> Self {
        Degradation::GaussianNoise {
            sigma: DEFAULT_NOISE_SIGMA,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = match *self {
            Degradation::LowLight { gamma, read_noise } => {
                (!(gamma > 0.0)).then(|| format!("gamma must be > 0, got {gamma}")).or_else(|| {
                    (!(read_noise >= 0.0)).then(|| format!("read noise must be >= 0, got {read_noise}"))
                })
            }
            Degradation::Blur { sigma } | Degradation::GaussianNoise { sigma } => {
                (!(sigma > 0.0)).then(|| format!("sigma must be > 0, got {sigma}"))
            }
        };
        bad.map_or(Ok(()), |m| Err(Error::Contract(m)))
    }
}

fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

fn blur<T: Scalar>(x: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.dims4()?;
    let taps = gaussian_taps(sigma);
    let k = taps.len();
    let r = k / 2;
    let row: Vec<T> = (0..c).flat_map(|_| taps.iter().map(|&t| T::lit(t))).collect();
    let mut g = Graph::<T>::no_grad();
    let xv = g.constant(x.clone());
    let kh = g.constant(Tensor::from_vec(&[c, 1, 1, k], row.clone())?);
    let kv = g.constant(Tensor::from_vec(&[c, 1, k, 1], row)?);
    let p = g.pad2d(&xv, [0, 0, r, r], PadMode::Reflect)?;
    let y = g.conv2d(&p, &kh, None, 1, c)?;
    let p = g.pad2d(&y, [r, r, 0, 0], PadMode::Reflect)?;
    Ok(g.conv2d(&p, &kv, None, 1, c)?.into_tensor())
}

/// Applies `kind` to a `[n, c, h, w]` tensor in `[0, 1]`. The result is
/// always inside `[0, 1]`.
pub fn synth_degrade<T: Scalar>(gt: &Tensor<T>, kind: Degradation, rng: &mut SeededRng) -> Result<Tensor<T>> {
    kind.validate()?;
    gt.dims4()?;
    if let Some(v) = gt.data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(contract_err!("degradation input must lie in [0, 1], found {}", v.as_f64()));
    }
    let unit = |v: f64| T::lit(v.clamp(0.0, 1.0));
    let out = match kind {
        Degradation::LowLight { gamma, read_noise } => {
            let mut t = gt.map(|v| v.powf(T::lit(gamma)));
            if read_noise > 0.0 {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = unit(v.as_f64() + rng.normal(0.0, read_noise)));
            }
            t
        }
        Degradation::Blur { sigma } => blur(gt, sigma)?.map(|v| unit(v.as_f64())),
        Degradation::GaussianNoise { sigma } => {
            let mut t = gt.clone();
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v = unit(v.as_f64() + rng.normal(0.0, sigma)));
            t
        }
    };
    Ok(out)
}

/// A `[1, 3, h, w]` test scene on the 1/255 grid: a smooth colour field,
/// a few hard-edged discs and bars, and fine texture.
pub fn synthetic_scene<T: Scalar>(h: usize, w: usize, rng: &mut SeededRng) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(contract_err!("scene extents must be positive, got {h}x{w}"));
    }
    let mut img = vec![0.0f64; 3 * h * w];
    let plane = h * w;
    for c in 0..3 {
        let base = rng.uniform(0.25, 0.65);
        let (gy, gx) = (rng.uniform(-0.25, 0.25), rng.uniform(-0.25, 0.25));
        let (fy, fx, ph) = (rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.0, std::f64::consts::TAU));
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
                let wave = 0.08 * (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin();
                img[c * plane + y * w + x] = base + gy * (u - 0.5) + gx * (v - 0.5) + wave;
            }
        }
    }
    let shapes = 6 + rng.below(6);
    let scale = h.min(w) as f64;
    for _ in 0..shapes {
        let color = [rng.next_f64(), rng.next_f64(), rng.next_f64()];
        let (cy, cx) = (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64));
        let disc = rng.next_f64() < 0.5;
        let (ry, rx) = (rng.uniform(0.05, 0.25) * scale, rng.uniform(0.05, 0.25) * scale);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if disc {
                    (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
                } else {
                    dy.abs() <= ry && dx.abs() <= rx
                };
                if inside {
                    for (c, &col) in color.iter().enumerate() {
                        img[c * plane + y * w + x] = col;
                    }
                }
            }
        }
    }
    let data = img
        .into_iter()
        .map(|v| {
            let v = v + rng.uniform(-0.02, 0.02);
            T::lit((v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        })
        .collect();
    Tensor::from_vec(&[1, 3, h, w], data)
}

/// `count` scenes of `h x w` degraded by `kind`, ids `scene_000`, ...
/// Scene `i` uses `substream(seed, i)`.
pub fn synthetic_dataset(count: usize, h: usize, w: usize, kind: Degradation, seed: u64) -> Result<Dataset> {
    let samples = (0..count)
        .map(|i| {
            let mut rng = SeededRng::substream(seed, i as u64);
            let gt = synthetic_scene::<f64>(h, w, &mut rng)?;
            let lq = synth_degrade(&gt, kind, &mut rng)?;
            PairedSample::new(
                format!("scene_{i:03}"),
                ImageBuffer::from_tensor(&lq)?,
                ImageBuffer::from_tensor(&gt)?,
            )
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

/// Every `*.ppm` directly under `dir`, sorted by file name, as `(stem, tensor)`.
pub fn read_image_dir<T: Scalar>(dir: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    ppm_stems(dir)?
        .into_iter()
        .map(|stem| {
            let path: PathBuf = dir.join(format!("{stem}.ppm"));
            Ok((stem, read_image(&path)?.to_tensor()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comment_parses() {
        let img = decode_ppm(b"P6 # made by hand\n1 1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.pixels, [1, 2, 3]);
    }

    #[test]
    fn taps_are_normalised() {
        let t = gaussian_taps(1.3);
        assert_eq!(t.len(), 9);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scene_is_on_byte_grid() {
        let t = synthetic_scene::<f64>(9, 13, &mut SeededRng::new(4)).unwrap();
        let back = ImageBuffer::from_tensor(&t).unwrap().to_tensor::<f64>();
        assert_eq!(back, t);
    }
}
