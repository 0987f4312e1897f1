//! Frame sequence loading, luma conversion and area-averaged downscaling.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default working resolution for flow computation (longest side, pixels).
pub const DEFAULT_MAX_DIM: usize = 320;

const LUMA_R: f64 = 0.299;
const LUMA_G: f64 = 0.587;
const LUMA_B: f64 = 0.114;

/// Single-channel image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl LumaImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidParam(format!("image dimensions {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::InvalidParam(format!(
                "image data length {} != {width}x{height}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidParam(format!("intensity {v} outside [0, 1]")));
        }
        Ok(LumaImage {
            width,
            height,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, value: f32) -> Self {
        LumaImage::new(width, height, vec![value; width * height]).expect("valid constant image")
    }

    /// Builds an image from a closure over pixel coordinates; values are clamped to `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        LumaImage::new(width, height, data).expect("valid generated image")
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Writes the image as a 16-bit grayscale PNG.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let buf: Vec<u16> = self
            .data
            .iter()
            .map(|&v| (v as f64 * 65535.0).round() as u16)
            .collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(
            self.width as u32,
            self.height as u32,
            buf,
        )
        .expect("buffer size matches dimensions");
        img.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Ordered frames of one video, all with the same dimensions.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<LumaImage>,
    source_id: String,
    frame_paths: Vec<PathBuf>,
}

impl FrameSequence {
    pub fn new(source_id: impl Into<String>, frames: Vec<LumaImage>, frame_paths: Vec<PathBuf>) -> Result<Self> {
        let source_id = source_id.into();
        if frames.is_empty() {
            return Err(Error::EmptySource(source_id));
        }
        if !frame_paths.is_empty() && frame_paths.len() != frames.len() {
            return Err(Error::InvalidParam(format!(
                "{} frame paths for {} frames",
                frame_paths.len(),
                frames.len()
            )));
        }
        let label = |i: usize| {
            frame_paths
                .get(i)
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| format!("frame {i}"))
        };
        let dims = (frames[0].width, frames[0].height);
        for (i, f) in frames.iter().enumerate().skip(1) {
            if (f.width, f.height) != dims {
                return Err(Error::DimensionMismatch {
                    first: label(0),
                    first_dims: dims,
                    second: label(i),
                    second_dims: (f.width, f.height),
                });
            }
        }
        Ok(FrameSequence {
            frames,
            source_id,
            frame_paths,
        })
    }

    pub fn frames(&self) -> &[LumaImage] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Origin paths, empty for in-memory sequences.
    pub fn frame_paths(&self) -> &[PathBuf] {
        &self.frame_paths
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.frames[0].width, self.frames[0].height)
    }

    /// Downscales every frame to the working resolution.
    pub fn downscaled(&self, max_dim: usize) -> FrameSequence {
        FrameSequence {
            frames: self.frames.par_iter().map(|f| downscale(f, max_dim)).collect(),
            source_id: self.source_id.clone(),
            frame_paths: self.frame_paths.clone(),
        }
    }
}

/// Rec. 601 luma of channels normalized by `max_value`.
pub fn to_luma(r: u16, g: u16, b: u16, max_value: u16) -> f32 {
    let m = max_value as f64;
    let y = LUMA_R * (r as f64 / m) + LUMA_G * (g as f64 / m) + LUMA_B * (b as f64 / m);
    y.clamp(0.0, 1.0) as f32
}

fn luma_from_dynamic(img: DynamicImage) -> LumaImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| (v as f64 / 255.0) as f32).collect(),
        DynamicImage::ImageLumaA8(buf) => buf.pixels().map(|p| (p.0[0] as f64 / 255.0) as f32).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| (v as f64 / 65535.0) as f32).collect(),
        DynamicImage::ImageLumaA16(buf) => buf.pixels().map(|p| (p.0[0] as f64 / 65535.0) as f32).collect(),
        DynamicImage::ImageRgb8(buf) => buf
            .pixels()
            .map(|p| to_luma(p.0[0] as u16, p.0[1] as u16, p.0[2] as u16, 255))
            .collect(),
        DynamicImage::ImageRgba8(buf) => buf
            .pixels()
            .map(|p| to_luma(p.0[0] as u16, p.0[1] as u16, p.0[2] as u16, 255))
            .collect(),
        DynamicImage::ImageRgb16(buf) => buf
            .pixels()
            .map(|p| to_luma(p.0[0], p.0[1], p.0[2], u16::MAX))
            .collect(),
        DynamicImage::ImageRgba16(buf) => buf
            .pixels()
            .map(|p| to_luma(p.0[0], p.0[1], p.0[2], u16::MAX))
            .collect(),
        other => other
            .to_rgb32f()
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0.map(|c| c.clamp(0.0, 1.0) as f64);
                (LUMA_R * r + LUMA_G * g + LUMA_B * b) as f32
            })
            .collect(),
    };
    LumaImage::new(w, h, data).expect("decoded image is consistent")
}

pub fn load_image(path: &Path) -> Result<LumaImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(luma_from_dynamic(img))
}

fn is_frame_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
}

/// Compares strings with embedded digit runs ordered numerically, so that
/// `f2` sorts before `f10`.
pub fn natural_cmp(a: &str, b: &str) -> Ordering {
    let mut ai = a.chars().peekable();
    let mut bi = b.chars().peekable();
    loop {
        match (ai.peek().copied(), bi.peek().copied()) {
            (None, None) => return a.cmp(b),
            (None, Some(_)) => return Ordering::Less,
            (Some(_), None) => return Ordering::Greater,
            (Some(ca), Some(cb)) if ca.is_ascii_digit() && cb.is_ascii_digit() => {
                let na = take_digits(&mut ai);
                let nb = take_digits(&mut bi);
                let ta = na.trim_start_matches('0');
                let tb = nb.trim_start_matches('0');
                let ord = ta.len().cmp(&tb.len()).then_with(|| ta.cmp(tb));
                if ord != Ordering::Equal {
                    return ord;
                }
            }
            (Some(ca), Some(cb)) => {
                if ca != cb {
                    return ca.cmp(&cb);
                }
                ai.next();
                bi.next();
            }
        }
    }
}

fn take_digits(it: &mut std::iter::Peekable<std::str::Chars<'_>>) -> String {
    let mut s = String::new();
    while let Some(c) = it.peek().copied().filter(char::is_ascii_digit) {
        s.push(c);
        it.next();
    }
    s
}

/// Lists frame files of a directory in natural filename order.
pub fn list_frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_frame_file(&path) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| {
        let na = a.file_name().unwrap_or_default().to_string_lossy();
        let nb = b.file_name().unwrap_or_default().to_string_lossy();
        natural_cmp(&na, &nb)
    });
    Ok(files)
}

fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        })
        .collect())
}

/// Loads a directory of PNG/PGM frames, or a newline-delimited manifest of
/// frame paths (relative entries resolve against the manifest's directory).
pub fn load_sequence(source: &Path) -> Result<FrameSequence> {
    let paths = if source.is_dir() {
        list_frame_files(source)?
    } else {
        read_manifest(source)?
    };
    let source_id = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| source.display().to_string());
    if paths.is_empty() {
        return Err(Error::EmptySource(source.display().to_string()));
    }
    let frames = paths
        .par_iter()
        .map(|p| load_image(p))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(source_id, frames, paths)
}

/// Area-averaged resize so the longest side equals `max_dim`. Images already
/// within the bound are returned unchanged.
pub fn downscale(img: &LumaImage, max_dim: usize) -> LumaImage {
    let max_dim = max_dim.max(1);
    let (w, h) = (img.width, img.height);
    let longest = w.max(h);
    if longest <= max_dim {
        return img.clone();
    }
    let scale = max_dim as f64 / longest as f64;
    let nw = ((w as f64 * scale).round() as usize).clamp(1, max_dim);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, max_dim);

    let xw = area_weights(w, nw);
    let yw = area_weights(h, nh);

    // Horizontal pass.
    let mut tmp = vec![0.0f64; nw * h];
    for y in 0..h {
        let row = &img.data[y * w..(y + 1) * w];
        for (ox, taps) in xw.iter().enumerate() {
            tmp[y * nw + ox] = taps.iter().map(|&(i, wt)| row[i] as f64 * wt).sum();
        }
    }
    // Vertical pass.
    let mut out = vec![0.0f32; nw * nh];
    for (oy, taps) in yw.iter().enumerate() {
        for ox in 0..nw {
            let v: f64 = taps.iter().map(|&(i, wt)| tmp[i * nw + ox] * wt).sum();
            out[oy * nw + ox] = v.clamp(0.0, 1.0) as f32;
        }
    }
    LumaImage::new(nw, nh, out).expect("resized image is consistent")
}

/// Per output cell, the source indices it overlaps and normalized coverage weights.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let lo = o as f64 * ratio;
            let hi = (o + 1) as f64 * ratio;
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let cover = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((i, cover / ratio));
                }
                i += 1;
            }
            taps
        })
        .collect()
}
