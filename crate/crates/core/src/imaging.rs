//! Image I/O, colour conversion, bicubic degradation and patch sampling.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageU8 {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} RGB needs {} bytes, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(ImageU8 { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// `v / 255`, planar.
    pub fn to_float(&self) -> ImageF {
        let plane = self.width * self.height;
        let mut data = vec![0.0f32; 3 * plane];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        ImageF {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageU8> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(
                "crop",
                format!("{height}x{width} at ({top},{left}) outside {}x{}", self.height, self.width),
            ));
        }
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        ImageU8::new(width, height, data)
    }
}

/// Planar `3 x H x W` float image, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{width}x{height} planar RGB needs {} values, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(ImageF { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.width * self.height;
        &self.data[c * plane..(c + 1) * plane]
    }

    /// `round(v * 255)` (half away from zero), clamped to `[0, 255]`.
    pub fn to_u8(&self) -> ImageU8 {
        let plane = self.width * self.height;
        let mut data = vec![0u8; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                data[3 * p + c] = quantize(self.data[c * plane + p]);
            }
        }
        ImageU8 {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn clamped(&self) -> ImageF {
        ImageF {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![1, 3, self.height, self.width], self.data.clone()).expect("image invariant")
    }

    /// Sample `index` of a `[N, 3, H, W]` tensor.
    pub fn from_tensor(t: &Tensor<f32>, index: usize) -> Result<ImageF> {
        let &[n, 3, h, w] = t.shape() else {
            return Err(Error::shape("image from tensor", format!("expected [N, 3, H, W], got {:?}", t.shape())));
        };
        if index >= n {
            return Err(Error::shape("image from tensor", format!("sample {index} of {n}")));
        }
        let len = 3 * h * w;
        ImageF::new(w, h, t.data()[index * len..(index + 1) * len].to_vec())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<ImageF> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::shape(
                "crop",
                format!("{height}x{width} at ({top},{left}) outside {}x{}", self.height, self.width),
            ));
        }
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            let plane = self.channel(c);
            for y in top..top + height {
                data.extend_from_slice(&plane[y * self.width + left..y * self.width + left + width]);
            }
        }
        ImageF::new(width, height, data)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Reads an 8-bit RGB, RGBA, grey or grey+alpha PNG as RGB (alpha is dropped,
/// grey is replicated). Palette and 16-bit images are rejected.
pub fn load_png(path: &Path) -> Result<ImageU8> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let decode_err = |source| Error::PngDecode {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = decoder.read_info().map_err(decode_err)?;
    let (color, depth) = reader.output_color_type();
    let unsupported = |reason: String| Error::UnsupportedImage {
        path: path.to_path_buf(),
        reason,
    };
    if depth != png::BitDepth::Eight {
        return Err(unsupported(format!("bit depth {depth:?}, only 8-bit is supported")));
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(unsupported("palette images are not supported".into())),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| unsupported("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(decode_err)?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * frame.line_size..y * frame.line_size + w * channels];
        for px in row.chunks_exact(channels) {
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    ImageU8::new(w, h, rgb)
}

pub fn save_png(img: &ImageU8, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |source| Error::PngEncode {
        path: path.to_path_buf(),
        source,
    };
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(&img.data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (1.5 * x - 2.5) * x * x + 1.0
    } else if x < 2.0 {
        ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0
    } else {
        0.0
    }
}

/// Taps of one output sample: (input index, normalized weight).
type Taps = Vec<(usize, f64)>;

/// Per-output taps for resampling `in_len` samples to `out_len`.
///
/// Sample centres follow the pixel-area convention
/// `u = (i + 0.5) / scale - 0.5`. When shrinking, the kernel is stretched
/// by `1 / scale` (antialiasing). Out-of-range taps are clamped to the edge.
fn resample_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = out_len as f64 / in_len as f64;
    let ks = scale.min(1.0);
    let support = 2.0 / ks;
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let first = (u - support).floor() as isize;
            let last = (u + support).ceil() as isize;
            let mut taps: Taps = Vec::new();
            for j in first..=last {
                let w = ks * cubic(ks * (u - j as f64));
                if w == 0.0 {
                    continue;
                }
                let idx = j.clamp(0, in_len as isize - 1) as usize;
                match taps.iter_mut().find(|(k, _)| *k == idx) {
                    Some(t) => t.1 += w,
                    None => taps.push((idx, w)),
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            for t in &mut taps {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Separable bicubic resize (horizontal pass, then vertical), antialiased
/// when downscaling.
pub fn bicubic_resize(img: &ImageF, out_h: usize, out_w: usize) -> Result<ImageF> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bicubic_resize", format!("output {out_h}x{out_w}")));
    }
    let (h, w) = (img.height, img.width);
    let xt = resample_taps(w, out_w);
    let yt = resample_taps(h, out_h);
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    let mut rows = vec![0.0f64; h * out_w];
    for c in 0..3 {
        let src = img.channel(c);
        for y in 0..h {
            for (x, taps) in xt.iter().enumerate() {
                rows[y * out_w + x] = taps.iter().map(|&(j, wt)| wt * src[y * w + j] as f64).sum();
            }
        }
        for taps in &yt {
            for x in 0..out_w {
                let v: f64 = taps.iter().map(|&(j, wt)| wt * rows[j * out_w + x]).sum();
                out.push(v as f32);
            }
        }
    }
    ImageF::new(out_w, out_h, out)
}

/// Studio-swing BT.601 luma on the 0-255 scale:
/// `65.481 R + 128.553 G + 24.966 B + 16` for RGB in `[0, 1]`.
pub fn luma_255(img: &ImageF) -> Vec<f64> {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    (0..r.len())
        .map(|i| 65.481 * r[i] as f64 + 128.553 * g[i] as f64 + 24.966 * b[i] as f64 + 16.0)
        .collect()
}

/// Luma plane scaled to `[16/255, 235/255]`.
pub fn rgb_to_y(img: &ImageF) -> Vec<f32> {
    luma_255(img).into_iter().map(|y| (y / 255.0) as f32).collect()
}

/// Aligned LR/HR crop: LR corner uniform over valid positions, HR corner at
/// `scale` times the same offset. Returns `[3, p, p]` and `[3, sp, sp]`.
pub fn sample_patch_pair<R: Rng + ?Sized>(
    rng: &mut R,
    lr: &ImageF,
    hr: &ImageF,
    lr_patch: usize,
    scale: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if hr.width != lr.width * scale || hr.height != lr.height * scale {
        return Err(Error::Dataset(format!(
            "HR {}x{} is not {scale}x LR {}x{}",
            hr.width, hr.height, lr.width, lr.height
        )));
    }
    if lr_patch == 0 || lr.width < lr_patch || lr.height < lr_patch {
        return Err(Error::Dataset(format!(
            "LR image {}x{} smaller than patch {lr_patch}",
            lr.width, lr.height
        )));
    }
    let top = rng.random_range(0..=lr.height - lr_patch);
    let left = rng.random_range(0..=lr.width - lr_patch);
    let lr_crop = lr.crop(top, left, lr_patch, lr_patch)?;
    let hp = lr_patch * scale;
    let hr_crop = hr.crop(top * scale, left * scale, hp, hp)?;
    Ok((
        Tensor::new(vec![3, lr_patch, lr_patch], lr_crop.data)?,
        Tensor::new(vec![3, hp, hp], hr_crop.data)?,
    ))
}

/// Largest centred crop whose sides are multiples of `scale`.
pub fn center_crop_divisible(img: &ImageU8, scale: usize) -> Result<ImageU8> {
    let h = img.height - img.height % scale;
    let w = img.width - img.width % scale;
    if h == 0 || w == 0 {
        return Err(Error::Dataset(format!(
            "{}x{} image too small for scale {scale}",
            img.width, img.height
        )));
    }
    img.crop((img.height - h) / 2, (img.width - w) / 2, h, w)
}

/// Bicubic downscale by `scale` followed by 8-bit quantization.
pub fn degrade(hr: &ImageU8, scale: usize) -> Result<ImageU8> {
    let f = hr.to_float();
    Ok(bicubic_resize(&f, hr.height / scale, hr.width / scale)?.to_u8())
}

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("reading {}", dir.display()), e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Turns a directory of HR PNGs into a dataset root: `<out>/HR` holds the
/// (crop-to-divisible) HR images and `<out>/LRx<s>` their degraded versions.
pub fn degrade_dir(hr_dir: &Path, out_dir: &Path, scale: usize) -> Result<usize> {
    let files = list_pngs(hr_dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG files in {}", hr_dir.display())));
    }
    let hr_out = out_dir.join("HR");
    let lr_out = out_dir.join(format!("LRx{scale}"));
    for d in [&hr_out, &lr_out] {
        fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    for f in &files {
        let hr = center_crop_divisible(&load_png(f)?, scale)?;
        let lr = degrade(&hr, scale)?;
        let name = format!("{}.png", stem(f));
        save_png(&hr, &hr_out.join(&name))?;
        save_png(&lr, &lr_out.join(&name))?;
    }
    Ok(files.len())
}

/// Ordered (LR, HR) file pairs matched by file stem.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetIndex {
    pub pairs: Vec<(PathBuf, PathBuf)>,
    pub scale: usize,
}

impl DatasetIndex {
    /// `<root>/HR/*.png` paired with `<root>/LRx<scale>/*.png`.
    pub fn scan(root: &Path, scale: usize) -> Result<Self> {
        Self::from_dirs(&root.join(format!("LRx{scale}")), &root.join("HR"), scale)
    }

    pub fn from_dirs(lr_dir: &Path, hr_dir: &Path, scale: usize) -> Result<Self> {
        for d in [lr_dir, hr_dir] {
            if !d.is_dir() {
                return Err(Error::Dataset(format!("missing directory {}", d.display())));
            }
        }
        let hr = list_pngs(hr_dir)?;
        let lr = list_pngs(lr_dir)?;
        if hr.is_empty() {
            return Err(Error::Dataset(format!("empty dataset: no PNG files in {}", hr_dir.display())));
        }
        let lr_stems: Vec<String> = lr.iter().map(|p| stem(p)).collect();
        let mut pairs = Vec::with_capacity(hr.len());
        for h in &hr {
            let s = stem(h);
            let i = lr_stems
                .iter()
                .position(|l| *l == s)
                .ok_or_else(|| Error::Dataset(format!("no LR image for {s} in {}", lr_dir.display())))?;
            pairs.push((lr[i].clone(), h.clone()));
        }
        if lr.len() != hr.len() {
            return Err(Error::Dataset(format!(
                "{} LR files but {} HR files",
                lr.len(),
                hr.len()
            )));
        }
        Ok(DatasetIndex { pairs, scale })
    }

    /// Loads every pair, checking `HR = scale x LR` on both axes.
    pub fn load(&self) -> Result<Vec<(String, ImageF, ImageF)>> {
        self.pairs
            .iter()
            .map(|(l, h)| {
                let lr = load_png(l)?;
                let hr = load_png(h)?;
                if hr.width != lr.width * self.scale || hr.height != lr.height * self.scale {
                    return Err(Error::Dataset(format!(
                        "{}: HR {}x{} is not {}x LR {}x{}",
                        stem(h),
                        hr.width,
                        hr.height,
                        self.scale,
                        lr.width,
                        lr.height
                    )));
                }
                Ok((stem(h), lr.to_float(), hr.to_float()))
            })
            .collect()
    }
}

/// Procedural test image: a colour gradient overlaid with oriented gratings,
/// hard-edged rectangles and discs. Fully determined by `rng`.
pub fn synthetic_texture<R: Rng + ?Sized>(rng: &mut R, size: usize) -> ImageU8 {
    let n = size as f64;
    let mut img = vec![[0.0f64; 3]; size * size];
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let grad: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                img[y * size + x][c] = base[c] + grad[c] * (x as f64 + y as f64) / (2.0 * n);
            }
        }
    }
    for _ in 0..rng.random_range(1..=3) {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let period = rng.random_range(5.0..14.0);
        let amp = rng.random_range(0.08..0.25);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.5..1.0));
        let (s, co) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let phase = (x as f64 * co + y as f64 * s) * std::f64::consts::TAU / period;
                for c in 0..3 {
                    img[y * size + x][c] += amp * tint[c] * phase.sin();
                }
            }
        }
    }
    for _ in 0..rng.random_range(3..=7) {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
        let (x0, y0) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let (w, h) = (rng.random_range(4.0..n / 2.0), rng.random_range(4.0..n / 2.0));
        let disc = rng.random_bool(0.4);
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = if disc {
                    let (dx, dy) = ((fx - x0) / w, (fy - y0) / w);
                    dx * dx + dy * dy <= 1.0
                } else {
                    fx >= x0 && fx < x0 + w && fy >= y0 && fy < y0 + h
                };
                if inside {
                    img[y * size + x] = color;
                }
            }
        }
    }
    let data = img
        .iter()
        .flat_map(|px| px.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8))
        .collect();
    ImageU8::new(size, size, data).expect("synthetic image size")
}
