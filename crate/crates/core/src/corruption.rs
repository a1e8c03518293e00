//! Seeded image corruptions on `[C, H, W]` images with values in `[0, 1]`.
//!
//! Four families: additive Gaussian noise, salt-and-pepper, Gaussian blur
//! and a codec-free JPEG proxy (8x8 DCT quantization only, no chroma
//! subsampling or entropy coding).

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub const GAUSSIAN_STD: f64 = 0.1;
pub const GAUSSIAN_MEANS: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
pub const SALT_PEPPER_RATES: [f64; 4] = [0.01, 0.02, 0.03, 0.04];
pub const JPEG_QUALITIES: [f64; 4] = [20.0, 15.0, 10.0, 5.0];
pub const BLUR_SIGMAS: [f64; 4] = [2.0, 3.0, 4.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    GaussianNoise,
    SaltPepper,
    Jpeg,
    GaussianBlur,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::GaussianNoise, Family::SaltPepper, Family::Jpeg, Family::GaussianBlur];

    pub fn name(self) -> &'static str {
        match self {
            Family::GaussianNoise => "gaussian_noise",
            Family::SaltPepper => "salt_pepper",
            Family::Jpeg => "jpeg",
            Family::GaussianBlur => "gaussian_blur",
        }
    }

    /// Default intensity grid, mildest first.
    pub fn default_grid(self) -> [f64; 4] {
        match self {
            Family::GaussianNoise => GAUSSIAN_MEANS,
            Family::SaltPepper => SALT_PEPPER_RATES,
            Family::Jpeg => JPEG_QUALITIES,
            Family::GaussianBlur => BLUR_SIGMAS,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown corruption family `{s}`")))
    }
}

/// One corruption cell. `intensity` is the noise mean, the salt-and-pepper
/// rate, the JPEG quality or the blur sigma depending on `family`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    pub family: Family,
    pub intensity: f64,
    pub seed: u64,
    /// Standard deviation for the Gaussian family.
    pub noise_std: f64,
}

impl CorruptionSpec {
    pub fn new(family: Family, intensity: f64, seed: u64) -> Self {
        Self {
            family,
            intensity,
            seed,
            noise_std: GAUSSIAN_STD,
        }
    }

    /// The 16-cell default grid.
    pub fn default_grid(seed: u64) -> Vec<CorruptionSpec> {
        Family::ALL
            .into_iter()
            .flat_map(|f| f.default_grid().into_iter().map(move |i| CorruptionSpec::new(f, i, seed)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            Family::GaussianNoise => check_std(self.noise_std),
            Family::SaltPepper => check_rate(self.intensity),
            Family::Jpeg => quality_from(self.intensity).map(|_| ()),
            Family::GaussianBlur => check_sigma(self.intensity),
        }
    }

    /// Applies the corruption; `stream` separates draws for different images.
    pub fn apply(&self, img: &Tensor, stream: u64) -> Result<Tensor> {
        let seed = mix_seed(self.seed, stream);
        match self.family {
            Family::GaussianNoise => gaussian_noise(img, self.intensity, self.noise_std, seed),
            Family::SaltPepper => salt_pepper(img, self.intensity, seed),
            Family::Jpeg => jpeg_compress(img, quality_from(self.intensity)?),
            Family::GaussianBlur => gaussian_blur(img, self.intensity),
        }
    }
}

fn mix_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn check_image(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        &[c, h, w] => Ok((c, h, w)),
        s => Err(shape_err!("expected a [C, H, W] image, got {s:?}")),
    }
}

fn check_std(std: f64) -> Result<()> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::Parameter(format!("noise std must be >= 0, got {std}")));
    }
    Ok(())
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Parameter(format!("salt-and-pepper rate {rate} outside [0, 1]")));
    }
    Ok(())
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("blur sigma must be > 0, got {sigma}")));
    }
    Ok(())
}

fn quality_from(q: f64) -> Result<u32> {
    if q.fract() != 0.0 || !(1.0..=100.0).contains(&q) {
        return Err(Error::Parameter(format!("JPEG quality must be an integer in [1, 100], got {q}")));
    }
    Ok(q as u32)
}

fn map_pixels(img: &Tensor, f: impl FnMut(f64) -> f64) -> Result<Tensor> {
    Tensor::new(img.shape(), img.data().iter().copied().map(f).collect())
}

/// `clamp(img + eta, 0, 1)` with `eta ~ N(mean, std^2)` per pixel.
pub fn gaussian_noise(img: &Tensor, mean: f64, std: f64, seed: u64) -> Result<Tensor> {
    check_image(img)?;
    check_std(std)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    map_pixels(img, |v| {
        let z: f64 = rng.sample(StandardNormal);
        (v + mean + std * z).clamp(0.0, 1.0)
    })
}

/// Each pixel independently, with probability `rate`, becomes 0 or 1.
pub fn salt_pepper(img: &Tensor, rate: f64, seed: u64) -> Result<Tensor> {
    check_image(img)?;
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    map_pixels(img, |v| {
        if rng.random::<f64>() < rate {
            if rng.random::<bool>() {
                1.0
            } else {
                0.0
            }
        } else {
            v
        }
    })
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), valid
/// for any offset.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let radius = (3.0 * sigma).ceil() as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and reflect padding.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Result<Tensor> {
    let (c, h, w) = check_image(img)?;
    let kernel = gaussian_kernel(sigma)?;
    let r = (kernel.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for x in 0..w {
                tmp[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * src[base + y * w + reflect(x as isize + k as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out[base + y * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wk)| wk * tmp[base + reflect(y as isize + k as isize - r, h) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(img.shape(), out.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

pub const LUMINANCE_TABLE: [u32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quality-scaled quantization table, entries clamped to `[1, 255]`.
pub fn quant_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::Parameter(format!("JPEG quality {quality} outside [1, 100]")));
    }
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(LUMINANCE_TABLE.iter()) {
        *o = ((b * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(out)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = 0.5 * cu * (((2 * x + 1) * u) as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    b
}

/// Orthonormal 2-D DCT-II of one 8x8 block: `F = B f B^T`.
fn dct8(block: &[f64; 64], b: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct8(coef: &[f64; 64], b: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Per-channel 8x8 block DCT quantization round trip. Output samples are
/// rounded to the 8-bit grid.
pub fn jpeg_compress(img: &Tensor, quality: u32) -> Result<Tensor> {
    let (c, h, w) = check_image(img)?;
    let q = quant_table(quality)?;
    let basis = dct_basis();
    let src = img.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for dy in 0..8 {
                    for dx in 0..8 {
                        let (y, x) = ((by + dy).min(h - 1), (bx + dx).min(w - 1));
                        block[dy * 8 + dx] = src[base + y * w + x].clamp(0.0, 1.0) * 255.0 - 128.0;
                    }
                }
                let mut coef = dct8(&block, &basis);
                for (f, qi) in coef.iter_mut().zip(q.iter()) {
                    *f = (*f / qi).round() * qi;
                }
                let rec = idct8(&coef, &basis);
                for dy in 0..8.min(h - by) {
                    for dx in 0..8.min(w - bx) {
                        let level = (rec[dy * 8 + dx] + 128.0).round().clamp(0.0, 255.0);
                        out[base + (by + dy) * w + bx + dx] = level / 255.0;
                    }
                }
            }
        }
    }
    Tensor::new(img.shape(), out)
}

/// Writes a 1-channel image as binary PGM (P5) or a 3-channel image as PPM (P6).
pub fn write_pnm(w: &mut impl Write, img: &Tensor) -> Result<()> {
    let (c, h, wd) = check_image(img)?;
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(shape_err!("PNM previews need 1 or 3 channels, got {c}")),
    };
    write!(w, "{magic}\n{wd} {h}\n255\n")?;
    let px = img.data();
    let mut bytes = Vec::with_capacity(px.len());
    for y in 0..h {
        for x in 0..wd {
            for ch in 0..c {
                bytes.push((px[(ch * h + y) * wd + x].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

/// Reads back what [`write_pnm`] writes.
pub fn read_pnm(r: &mut impl BufRead) -> Result<Tensor> {
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PNM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    let c = match tokens[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::Format(format!("unsupported PNM magic {m}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PNM field `{s}`")));
    let (w, h, max) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if max != 255 {
        return Err(Error::Format(format!("PNM maxval {max} unsupported")));
    }
    let mut bytes = vec![0u8; c * h * w];
    r.read_exact(&mut bytes)?;
    let mut data = vec![0.0; bytes.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                data[(ch * h + y) * w + x] = bytes[(y * w + x) * c + ch] as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[c, h, w], data)
}
