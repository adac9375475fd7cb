//! Hole masks: random rectangles, borehole-style stripes, fixed-size
//! rectangles for coverage sweeps, and persisted test suites.
//!
//! A mask is 1 on hole (generated) pixels and 0 on observed pixels.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use autodiff::Tensor;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::seed::{rng_for, Rng, Stream};

pub const RECT_COVERAGE_MIN: f64 = 0.15;
pub const RECT_COVERAGE_MAX: f64 = 0.30;
pub const RECT_MAX_COUNT: usize = 5;
const RECT_MAX_ROUNDS: usize = 1000;
const FALLBACK_FRACTION: f64 = 0.20;

/// Strictly binary `[N,1,H,W]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask(Tensor);

impl Mask {
    pub fn new(t: Tensor) -> Result<Self> {
        let [_, c, _, _] = t.dims4()?;
        if c != 1 {
            return Err(Error::Mask(format!("expected 1 channel, got shape {:?}", t.shape())));
        }
        if let Some(v) = t.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Mask(format!("non-binary value {v}")));
        }
        Ok(Self(t))
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> Self {
        Self(Tensor::zeros(&[n, 1, h, w]))
    }

    pub fn ones(n: usize, h: usize, w: usize) -> Self {
        Self(Tensor::ones(&[n, 1, h, w]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn holes(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }

    /// Fraction of hole pixels.
    pub fn hole_fraction(&self) -> f64 {
        self.holes() as f64 / self.0.len() as f64
    }

    pub fn is_hole(&self, n: usize, y: usize, x: usize) -> bool {
        self.0.at4(n, 0, y, x) == 1.0
    }

    pub fn sample(&self, n: usize) -> Result<Mask> {
        Ok(Mask(self.0.sample(n)?))
    }

    pub fn stack(masks: &[Mask]) -> Result<Mask> {
        let parts: Vec<Tensor> = masks.iter().map(|m| m.0.clone()).collect();
        Ok(Mask(Tensor::stack(&parts)?))
    }

    /// The complement (observed pixels) as a float tensor.
    pub fn inverted(&self) -> Tensor {
        self.0.map(|v| 1.0 - v)
    }

    /// The mask repeated over `channels`, matching an image batch.
    pub fn expanded(&self, channels: usize) -> Result<Tensor> {
        let [n, _, h, w] = self.0.dims4()?;
        Ok(autodiff::expand_mask(&self.0, &[n, channels, h, w])?)
    }

    fn from_bits(h: usize, w: usize, bits: &[bool]) -> Self {
        Self(Tensor::from_fn(&[1, 1, h, w], |i| bits[i] as u8 as f64))
    }
}

/// An axis-aligned rectangle `[y, y+h) × [x, x+w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

/// Output of [`sample_rect_masks`].
#[derive(Debug, Clone, PartialEq)]
pub struct RectMask {
    pub mask: Mask,
    pub rects: Vec<Rect>,
    pub fell_back: bool,
}

fn paint(h: usize, w: usize, rects: &[Rect]) -> Vec<bool> {
    let mut bits = vec![false; h * w];
    for r in rects {
        for y in r.y..r.y + r.h {
            bits[y * w + r.x..y * w + r.x + r.w].fill(true);
        }
    }
    bits
}

/// Rectangle whose area is as close as possible to `fraction · h · w`.
fn sized_rect(h: usize, w: usize, fraction: f64) -> (usize, usize) {
    if fraction <= 0.0 {
        return (0, 0);
    }
    let target = fraction * (h * w) as f64;
    let rh = ((h as f64 * fraction.sqrt()).round() as usize).clamp(1, h);
    let rw = ((target / rh as f64).round() as usize).clamp(1, w);
    (rh, rw)
}

/// Draws 1 to 5 rectangles with side lengths uniform in `[h/8, h/2]` (resp. `w`)
/// at uniform positions, resampling until the union covers 15 to 30 % of the
/// image. After 1000 rejected rounds it returns one centered rectangle of about
/// 20 % area.
pub fn sample_rect_masks(h: usize, w: usize, rng: &mut Rng) -> Result<RectMask> {
    if h < 8 || w < 8 {
        return Err(Error::Mask(format!("rectangle masks need at least 8x8, got {h}x{w}")));
    }
    let total = (h * w) as f64;
    for _ in 0..RECT_MAX_ROUNDS {
        let k = rng.gen_range(1..=RECT_MAX_COUNT);
        let rects: Vec<Rect> = (0..k)
            .map(|_| {
                let rh = rng.gen_range(h / 8..=h / 2);
                let rw = rng.gen_range(w / 8..=w / 2);
                Rect {
                    y: rng.gen_range(0..=h - rh),
                    x: rng.gen_range(0..=w - rw),
                    h: rh,
                    w: rw,
                }
            })
            .collect();
        let bits = paint(h, w, &rects);
        let cov = bits.iter().filter(|&&b| b).count() as f64 / total;
        if (RECT_COVERAGE_MIN..=RECT_COVERAGE_MAX).contains(&cov) {
            return Ok(RectMask {
                mask: Mask::from_bits(h, w, &bits),
                rects,
                fell_back: false,
            });
        }
    }
    let (rh, rw) = sized_rect(h, w, FALLBACK_FRACTION);
    let rect = Rect {
        y: (h - rh) / 2,
        x: (w - rw) / 2,
        h: rh,
        w: rw,
    };
    Ok(RectMask {
        mask: Mask::from_bits(h, w, &paint(h, w, &[rect])),
        rects: vec![rect],
        fell_back: true,
    })
}

/// Full-height vertical stripes of `stripe_width` with left edges at
/// `phase_offset + i·w/n_stripes` (integer spacing), wrapping at the right edge.
pub fn borehole_stripes(
    h: usize,
    w: usize,
    n_stripes: usize,
    stripe_width: usize,
    phase_offset: usize,
) -> Result<Mask> {
    if n_stripes * stripe_width >= w {
        return Err(Error::Mask(format!(
            "{n_stripes} stripes of width {stripe_width} do not fit in width {w}"
        )));
    }
    let mut cols = vec![false; w];
    for i in 0..n_stripes {
        let left = phase_offset + i * w / n_stripes;
        for dx in 0..stripe_width {
            let x = (left + dx) % w;
            if cols[x] {
                return Err(Error::Mask(format!("stripes overlap at column {x}")));
            }
            cols[x] = true;
        }
    }
    Ok(Mask(Tensor::from_fn(&[1, 1, h, w], |i| cols[i % w] as u8 as f64)))
}

/// One rectangle of fixed size (about `hole_fraction` of the image) at a
/// uniform random position.
pub fn fixed_rect_mask(h: usize, w: usize, hole_fraction: f64, rng: &mut Rng) -> Result<Mask> {
    if !(0.0..=1.0).contains(&hole_fraction) {
        return Err(Error::Mask(format!("hole fraction {hole_fraction} outside [0, 1]")));
    }
    let (rh, rw) = sized_rect(h, w, hole_fraction);
    if rh == 0 {
        return Ok(Mask::zeros(1, h, w));
    }
    let rect = Rect {
        y: rng.gen_range(0..=h - rh),
        x: rng.gen_range(0..=w - rw),
        h: rh,
        w: rw,
    };
    Ok(Mask::from_bits(h, w, &paint(h, w, &[rect])))
}

/// Where training and test masks come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskSource {
    /// 1 to 5 random rectangles covering 15 to 30 %.
    Rectangles,
    /// Borehole stripes with a random phase.
    Stripes { count: usize, width: usize },
    /// One fixed-size rectangle at a random position.
    FixedRect { hole_fraction: f64 },
}

impl MaskSource {
    pub fn sample(&self, h: usize, w: usize, rng: &mut Rng) -> Result<Mask> {
        match *self {
            MaskSource::Rectangles => Ok(sample_rect_masks(h, w, rng)?.mask),
            MaskSource::Stripes { count, width } => {
                let phase = rng.gen_range(0..w);
                borehole_stripes(h, w, count, width, phase)
            }
            MaskSource::FixedRect { hole_fraction } => fixed_rect_mask(h, w, hole_fraction, rng),
        }
    }
}

impl fmt::Display for MaskSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSource::Rectangles => write!(f, "rectangles"),
            MaskSource::Stripes { count, width } => write!(f, "stripes:{count}:{width}"),
            MaskSource::FixedRect { hole_fraction } => write!(f, "fixed:{hole_fraction}"),
        }
    }
}

impl FromStr for MaskSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::Config(format!("unrecognized mask source `{s}`"));
        match parts[..] {
            ["rectangles"] => Ok(MaskSource::Rectangles),
            ["stripes"] => Ok(MaskSource::Stripes { count: 4, width: 6 }),
            ["stripes", n, w] => Ok(MaskSource::Stripes {
                count: n.parse().map_err(|_| bad())?,
                width: w.parse().map_err(|_| bad())?,
            }),
            ["fixed", f] => Ok(MaskSource::FixedRect {
                hole_fraction: f.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// `x ⊙ (1 - M) + fill·M`: observed pixels are copied exactly.
pub fn apply_mask(x: &Tensor, mask: &Mask, fill: f64) -> Result<Tensor> {
    let [_, c, _, _] = x.dims4()?;
    let m = mask.expanded(c)?;
    Ok(x.zip_map(&m, |v, hole| if hole == 1.0 { fill } else { v })?)
}

/// Per-image, per-channel mean of observed pixels; 0.5 when nothing is observed.
pub fn observed_mean(x: &Tensor, mask: &Mask) -> Result<Vec<f64>> {
    let [n, c, h, w] = x.dims4()?;
    let mut out = Vec::with_capacity(n * c);
    for s in 0..n {
        for ch in 0..c {
            let (mut sum, mut count) = (0.0, 0usize);
            for y in 0..h {
                for xx in 0..w {
                    if !mask.is_hole(s, y, xx) {
                        sum += x.at4(s, ch, y, xx);
                        count += 1;
                    }
                }
            }
            out.push(if count == 0 { 0.5 } else { sum / count as f64 });
        }
    }
    Ok(out)
}

/// Fills holes with the per-channel mean of the observed pixels.
pub fn apply_mask_mean_fill(x: &Tensor, mask: &Mask) -> Result<Tensor> {
    let [n, c, h, w] = x.dims4()?;
    let means = observed_mean(x, mask)?;
    let mut out = x.clone();
    let data = out.data_mut();
    for s in 0..n {
        for ch in 0..c {
            let fill = means[s * c + ch];
            for y in 0..h {
                for xx in 0..w {
                    if mask.is_hole(s, y, xx) {
                        data[((s * c + ch) * h + y) * w + xx] = fill;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// A fixed, reproducible set of test masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSuite {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub source: MaskSource,
    pub masks: Vec<Mask>,
}

const SUITE_MAGIC: &[u8; 8] = b"TXFMASK\0";
const SUITE_VERSION: u32 = 1;

/// Mask `i` is drawn from its own stream derived from `(seed, i)`, so suites
/// are order independent and prefixes of larger suites.
pub fn build_mask_suite(
    source: MaskSource,
    height: usize,
    width: usize,
    seed: u64,
    n_images: usize,
) -> Result<MaskSuite> {
    let masks = (0..n_images)
        .map(|i| source.sample(height, width, &mut rng_for(seed, Stream::MaskSuite, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskSuite {
        seed,
        height,
        width,
        source,
        masks,
    })
}

impl MaskSuite {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Magic, version, seed, size, source, then run-length-encoded masks
    /// (alternating 0/1 runs starting with 0), closed by a CRC-32 of everything
    /// before it. Integers are little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(SUITE_MAGIC);
        out.extend_from_slice(&SUITE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        let source = self.source.to_string();
        out.extend_from_slice(&(source.len() as u32).to_le_bytes());
        out.extend_from_slice(source.as_bytes());
        out.extend_from_slice(&(self.masks.len() as u32).to_le_bytes());
        for m in &self.masks {
            let runs = run_lengths(m.tensor().data());
            out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
            for r in runs {
                out.extend_from_slice(&r.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const KIND: &str = "mask suite";
        if bytes.len() < SUITE_MAGIC.len() + 4 {
            return Err(Error::corrupt(KIND, "truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::corrupt(KIND, "checksum mismatch"));
        }
        let mut r = crate::binio::Reader::new(body, KIND);
        if r.bytes(SUITE_MAGIC.len())? != SUITE_MAGIC {
            return Err(Error::corrupt(KIND, "bad magic"));
        }
        let version = r.u32()?;
        if version != SUITE_VERSION {
            return Err(Error::corrupt(KIND, format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let source: MaskSource = r.string()?.parse()?;
        let n = r.u32()? as usize;
        let mut masks = Vec::with_capacity(n);
        for _ in 0..n {
            let count = r.u32()? as usize;
            let mut bits = Vec::with_capacity(height * width);
            for k in 0..count {
                let len = r.u32()? as usize;
                bits.extend(std::iter::repeat_n(k % 2 == 1, len));
            }
            if bits.len() != height * width {
                return Err(Error::corrupt(KIND, "mask run lengths do not match size"));
            }
            masks.push(Mask::from_bits(height, width, &bits));
        }
        r.finish()?;
        Ok(Self {
            seed,
            height,
            width,
            source,
            masks,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn run_lengths(values: &[f64]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for &v in values {
        let bit = v == 1.0;
        if bit != current {
            runs.push(len);
            current = bit;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs
}
