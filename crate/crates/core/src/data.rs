//! PNG input/output, procedural textures and dataset manifests.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use autodiff::Tensor;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::masking::Mask;
use crate::seed::{derive_seed, rng_for, Stream};

// ---------------------------------------------------------------------------
// PNG

/// Reads an 8-bit grayscale or RGB PNG as `[1,C,H,W]` in `[0,1]`. With
/// `crop_to`, larger images are center-cropped to that square size.
pub fn load_image(path: &Path, crop_to: Option<usize>) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let image_err = |detail: String| Error::UnsupportedImage {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = decoder.read_info().map_err(|e| image_err(e.to_string()))?;
    let info = reader.info();
    let channels = match (info.color_type, info.bit_depth) {
        (png::ColorType::Grayscale, png::BitDepth::Eight) => 1,
        (png::ColorType::Rgb, png::BitDepth::Eight) => 3,
        (color, depth) => {
            return Err(image_err(format!(
                "{color:?} at {depth:?} bits; only 8-bit grayscale and RGB are supported"
            )))
        }
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| image_err(e.to_string()))?;
    let bytes = &buf[..frame.buffer_size()];
    let stride = frame.line_size;

    let (y0, x0, oh, ow) = match crop_to {
        Some(s) if h >= s && w >= s => ((h - s) / 2, (w - s) / 2, s, s),
        Some(s) => {
            return Err(image_err(format!("{w}x{h} is smaller than the crop size {s}")));
        }
        None => (0, 0, h, w),
    };
    let mut data = vec![0.0; channels * oh * ow];
    for c in 0..channels {
        for y in 0..oh {
            for x in 0..ow {
                let b = bytes[(y0 + y) * stride + (x0 + x) * channels + c];
                data[(c * oh + y) * ow + x] = b as f64 / 255.0;
            }
        }
    }
    Ok(Tensor::new(vec![1, channels, oh, ow], data)?)
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[1,C,H,W]` or `[C,H,W]` (C = 1 or 3) as an 8-bit PNG.
pub fn save_image(t: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = match *t.shape() {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => return Err(Error::Mismatch(format!("cannot save shape {:?} as an image", t.shape()))),
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Mismatch(format!("cannot save {c} channels as an image"))),
    };
    let mut bytes = vec![0u8; c * h * w];
    for ch in 0..c {
        for i in 0..h * w {
            bytes[i * c + ch] = quantize(t.data()[ch * h * w + i]);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::UnsupportedImage {
        path: path.to_path_buf(),
        detail: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a grayscale PNG as a single mask; pixels at or above half intensity
/// are holes.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let t = load_image(path, None)?;
    let [_, c, _, _] = t.dims4()?;
    if c != 1 {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            detail: format!("{c} channels; masks must be grayscale"),
        });
    }
    Mask::new(t.map(|v| (v >= 0.5) as u8 as f64))
}

/// Saves one mask of a batch as a 0/255 grayscale PNG.
pub fn save_mask(mask: &Mask, index: usize, path: &Path) -> Result<()> {
    save_image(&mask.sample(index)?.into_tensor(), path)
}

// ---------------------------------------------------------------------------
// Procedural textures

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TextureKind {
    Stripes,
    Checker,
    SinusoidMix,
    LayeredBands,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] = [
        TextureKind::Stripes,
        TextureKind::Checker,
        TextureKind::SinusoidMix,
        TextureKind::LayeredBands,
    ];
}

impl fmt::Display for TextureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TextureKind::Stripes => "stripes",
            TextureKind::Checker => "checker",
            TextureKind::SinusoidMix => "sinusoid_mix",
            TextureKind::LayeredBands => "layered_bands",
        })
    }
}

impl FromStr for TextureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TextureKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown texture kind `{s}`")))
    }
}

/// Parameters of one procedural texture. Colors, phases and noise are all
/// drawn from `seed`, so a spec fully determines its image.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureSpec {
    pub kind: TextureKind,
    /// Spatial period in pixels (stripe/grating period, checker block side,
    /// band boundary wavelength).
    pub period: f64,
    /// Stripe normal angle in radians.
    pub angle: f64,
    pub bands: usize,
    /// Boundary wobble amplitude of layered bands, in pixels.
    pub amplitude: f64,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    pub channels: usize,
    pub seed: u64,
}

impl TextureSpec {
    /// Parameters drawn from `seed` within ranges that look reasonable at 64x64.
    pub fn random(kind: TextureKind, channels: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::Texture, 0);
        Self {
            kind,
            period: rng.gen_range(6.0..20.0_f64).round(),
            angle: match kind {
                // vertical or horizontal stripes keep integer-pixel periodicity
                TextureKind::Stripes => [0.0, PI / 2.0][rng.gen_range(0..2)],
                _ => rng.gen_range(0.0..PI),
            },
            bands: rng.gen_range(3..=8),
            amplitude: rng.gen_range(1.0..4.0_f64),
            noise: rng.gen_range(0.0..0.05_f64),
            channels,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(Error::Config(format!("texture period must be positive, got {}", self.period)));
        }
        if self.kind == TextureKind::LayeredBands && self.bands == 0 {
            return Err(Error::Config("layered bands need at least one band".into()));
        }
        if self.channels == 0 || !self.noise.is_finite() || self.noise < 0.0 || !self.amplitude.is_finite() {
            return Err(Error::Config(format!("invalid texture spec {self:?}")));
        }
        Ok(())
    }
}

/// Renders a texture as `[1,C,H,W]` in `[0,1]`.
pub fn gen_texture(spec: &TextureSpec, h: usize, w: usize) -> Result<Tensor> {
    spec.validate()?;
    let c = spec.channels;
    let mut rng = rng_for(spec.seed, Stream::Texture, 1);
    let mut color = || -> Vec<f64> { (0..c).map(|_| rng.gen_range(0.05..0.95)).collect() };
    let (fg, bg) = (color(), color());
    let mut rng = rng_for(spec.seed, Stream::Texture, 2);

    // Scalar field t in [0,1] per pixel, mixed between the two colors.
    let p = spec.period;
    let mut values = vec![0.0; c * h * w];
    match spec.kind {
        TextureKind::Stripes => {
            let phase: f64 = rng.gen_range(0.0..1.0);
            let (cs, sn) = (spec.angle.cos(), spec.angle.sin());
            fill_mix(&mut values, h, w, &fg, &bg, |y, x| {
                let u = ((x as f64 * cs + y as f64 * sn) / p + phase).rem_euclid(1.0);
                (u < 0.5) as u8 as f64
            });
        }
        TextureKind::Checker => {
            let side = p.max(1.0) as usize;
            fill_mix(&mut values, h, w, &fg, &bg, |y, x| ((y / side + x / side) % 2) as f64);
        }
        TextureKind::SinusoidMix => {
            let gratings: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    let a: f64 = rng.gen_range(0.0..PI);
                    let period = p * rng.gen_range(0.6..1.6);
                    (a.cos(), a.sin(), period, rng.gen_range(0.0..2.0 * PI))
                })
                .collect();
            fill_mix(&mut values, h, w, &fg, &bg, |y, x| {
                let s: f64 = gratings
                    .iter()
                    .map(|&(cs, sn, period, ph)| {
                        (2.0 * PI * (x as f64 * cs + y as f64 * sn) / period + ph).sin()
                    })
                    .sum();
                (s / 3.0 + 1.0) / 2.0
            });
        }
        TextureKind::LayeredBands => {
            let n = spec.bands;
            let band_h = h as f64 / n as f64;
            let boundaries: Vec<(f64, f64, f64)> = (1..n)
                .map(|k| {
                    let base = k as f64 * band_h + rng.gen_range(-0.25..0.25) * band_h;
                    let wavelength = p * rng.gen_range(2.0..5.0);
                    (base, wavelength, rng.gen_range(0.0..2.0 * PI))
                })
                .collect();
            let band_colors: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..c).map(|_| rng.gen_range(0.05..0.95)).collect())
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let band = boundaries
                        .iter()
                        .filter(|&&(base, wl, ph)| {
                            let b = base + spec.amplitude * (2.0 * PI * x as f64 / wl + ph).sin();
                            y as f64 >= b
                        })
                        .count();
                    for ch in 0..c {
                        values[(ch * h + y) * w + x] = band_colors[band][ch];
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in values.iter_mut() {
            *v += rng.gen_range(-spec.noise..=spec.noise);
        }
    }
    for v in values.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(Tensor::new(vec![1, c, h, w], values)?)
}

fn fill_mix(values: &mut [f64], h: usize, w: usize, fg: &[f64], bg: &[f64], t: impl Fn(usize, usize) -> f64) {
    for y in 0..h {
        for x in 0..w {
            let a = t(y, x);
            for ch in 0..fg.len() {
                values[(ch * h + y) * w + x] = bg[ch] + (fg[ch] - bg[ch]) * a;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Synthetic(TextureSpec),
    File(PathBuf),
}

impl Entry {
    /// Loads or renders the image, checking its size and channel count.
    pub fn load(&self, base: &Path, size: usize, channels: usize, crop: bool) -> Result<Tensor> {
        let t = match self {
            Entry::Synthetic(spec) => gen_texture(spec, size, size)?,
            Entry::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                load_image(&path, crop.then_some(size))?
            }
        };
        let [_, c, h, w] = t.dims4()?;
        if c != channels || h != size || w != size {
            return Err(Error::Mismatch(format!(
                "{self} is {c}x{h}x{w}, expected {channels}x{size}x{size}"
            )));
        }
        Ok(t)
    }
}

impl fmt::Display for Entry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Entry::Synthetic(s) => write!(
                f,
                "synthetic {} seed={} period={} angle={} bands={} amplitude={} noise={} channels={}",
                s.kind, s.seed, s.period, s.angle, s.bands, s.amplitude, s.noise, s.channels
            ),
            Entry::File(p) => write!(f, "file {}", p.display()),
        }
    }
}

impl FromStr for Entry {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("bad manifest entry `{line}`: {why}"));
        if let Some(path) = line.strip_prefix("file ") {
            return Ok(Entry::File(PathBuf::from(path.trim())));
        }
        let rest = line.strip_prefix("synthetic ").ok_or_else(|| bad("unknown entry type"))?;
        let mut parts = rest.split_whitespace();
        let kind: TextureKind = parts.next().ok_or_else(|| bad("missing kind"))?.parse()?;
        let mut spec = TextureSpec {
            kind,
            period: 8.0,
            angle: 0.0,
            bands: 4,
            amplitude: 0.0,
            noise: 0.0,
            channels: 3,
            seed: 0,
        };
        for kv in parts {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("expected key=value"))?;
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(&format!("bad number `{v}`")));
            let int = |v: &str| v.parse::<u64>().map_err(|_| bad(&format!("bad integer `{v}`")));
            match k {
                "seed" => spec.seed = int(v)?,
                "period" => spec.period = num(v)?,
                "angle" => spec.angle = num(v)?,
                "bands" => spec.bands = int(v)? as usize,
                "amplitude" => spec.amplitude = num(v)?,
                "noise" => spec.noise = num(v)?,
                "channels" => spec.channels = int(v)? as usize,
                _ => return Err(bad(&format!("unknown key `{k}`"))),
            }
        }
        Ok(Entry::Synthetic(spec))
    }
}

/// Train/val/test image lists plus the image geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
    /// Center-crop larger files instead of rejecting them.
    pub center_crop: bool,
    pub train: Vec<Entry>,
    pub val: Vec<Entry>,
    pub test: Vec<Entry>,
}

const MANIFEST_VERSION: u32 = 1;

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[Entry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, split: Split) -> &mut Vec<Entry> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }

    /// Rejects entries that appear in more than one split.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for e in self.split(split) {
                let key = match e {
                    Entry::Synthetic(s) => format!("synthetic seed {}", s.seed),
                    Entry::File(p) => format!("file {}", p.display()),
                };
                if !seen.insert(key.clone()) {
                    return Err(Error::Config(format!("{key} appears twice in the manifest")));
                }
            }
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("manifest image size and channels must be positive".into()));
        }
        Ok(())
    }

    pub fn load_split(&self, split: Split, base: &Path) -> Result<Vec<Tensor>> {
        self.split(split)
            .iter()
            .map(|e| e.load(base, self.image_size, self.channels, self.center_crop))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "version = {MANIFEST_VERSION}\nimage_size = {}\nchannels = {}\nseed = {}\ncenter_crop = {}\n",
            self.image_size, self.channels, self.seed, self.center_crop
        );
        for split in Split::ALL {
            out.push_str(&format!("\n[{}]\n", split.name()));
            for e in self.split(split) {
                out.push_str(&format!("{e}\n"));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut m = DatasetManifest {
            image_size: 0,
            channels: 0,
            seed: 0,
            center_crop: false,
            train: vec![],
            val: vec![],
            test: vec![],
        };
        let mut section: Option<Split> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: String| Error::Config(format!("manifest line {}: {why}", lineno + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = Some(
                    Split::ALL
                        .into_iter()
                        .find(|s| s.name() == name)
                        .ok_or_else(|| bad(format!("unknown section `{name}`")))?,
                );
                continue;
            }
            match section {
                Some(s) => {
                    let e = line.parse()?;
                    m.split_mut(s).push(e);
                }
                None => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| bad("expected key = value".into()))?;
                    let v = v.trim();
                    let int = || v.parse::<u64>().map_err(|_| bad(format!("bad value `{v}`")));
                    match k.trim() {
                        "version" if int()? == MANIFEST_VERSION as u64 => {}
                        "version" => return Err(bad(format!("unsupported version {v}"))),
                        "image_size" => m.image_size = int()? as usize,
                        "channels" => m.channels = int()? as usize,
                        "seed" => m.seed = int()?,
                        "center_crop" => {
                            m.center_crop = v.parse().map_err(|_| bad(format!("bad bool `{v}`")))?
                        }
                        other => return Err(bad(format!("unknown key `{other}`"))),
                    }
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Manifest over `root/{train,val,test}/*.png`, sorted by file name. Paths
    /// are stored relative to `root`.
    pub fn from_folder(root: &Path, image_size: usize, channels: usize, center_crop: bool) -> Result<Self> {
        let mut m = DatasetManifest {
            image_size,
            channels,
            seed: 0,
            center_crop,
            train: vec![],
            val: vec![],
            test: vec![],
        };
        for split in Split::ALL {
            let dir = root.join(split.name());
            if !dir.is_dir() {
                continue;
            }
            let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            files.sort();
            for f in files {
                let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
                m.split_mut(split).push(Entry::File(rel));
            }
        }
        m.validate()?;
        Ok(m)
    }
}

/// Offset separating test image indices from train indices in the seed
/// derivation, so growing one split never changes the other.
const TEST_INDEX_OFFSET: u64 = 1 << 40;

/// Synthetic manifest cycling through `kinds`; image `i` of a split gets its
/// own derived seed.
pub fn make_synthetic_dataset(
    n_train: usize,
    n_test: usize,
    kinds: &[TextureKind],
    seed: u64,
    image_size: usize,
    channels: usize,
) -> Result<DatasetManifest> {
    if kinds.is_empty() {
        return Err(Error::Config("at least one texture kind is required".into()));
    }
    let entry = |i: usize, offset: u64| {
        let s = derive_seed(seed, Stream::Split, offset + i as u64);
        Entry::Synthetic(TextureSpec::random(kinds[i % kinds.len()], channels, s))
    };
    let m = DatasetManifest {
        image_size,
        channels,
        seed,
        center_crop: false,
        train: (0..n_train).map(|i| entry(i, 0)).collect(),
        val: vec![],
        test: (0..n_test).map(|i| entry(i, TEST_INDEX_OFFSET)).collect(),
    };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checker_parity() {
        let spec = TextureSpec {
            kind: TextureKind::Checker,
            period: 8.0,
            angle: 0.0,
            bands: 0,
            amplitude: 0.0,
            noise: 0.0,
            channels: 1,
            seed: 3,
        };
        let t = gen_texture(&spec, 32, 32).unwrap();
        assert_ne!(t.at4(0, 0, 0, 0), t.at4(0, 0, 0, 8));
        assert_eq!(t.at4(0, 0, 0, 0), t.at4(0, 0, 8, 8));
    }

    #[test]
    fn manifest_roundtrip() {
        let m = make_synthetic_dataset(5, 3, &[TextureKind::Stripes, TextureKind::LayeredBands], 11, 32, 3)
            .unwrap();
        assert_eq!((m.train.len(), m.test.len()), (5, 3));
        let text = m.to_text();
        let back = DatasetManifest::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn duplicate_entries_are_rejected() {
        let mut m = make_synthetic_dataset(2, 1, &TextureKind::ALL, 1, 16, 1).unwrap();
        m.test.push(m.train[0].clone());
        assert!(m.validate().is_err());
    }
}
