//! Dense two-frame optical flow by pyramidal polynomial expansion.
//!
//! Each pixel neighbourhood is approximated by a quadratic polynomial
//! `f(x) ≈ xᵀAx + bᵀx + c` fitted with Gaussian-weighted least squares. A
//! displacement `d` between two frames turns `b` into `b - 2Ad`, so each
//! iteration solves the window-averaged normal equations for `d`, coarse to
//! fine over a Gaussian pyramid.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frameio::LumaImage;

/// Regularization added to the averaged normal matrix before inversion.
pub const FLOW_EPSILON: f64 = 1e-6;

const FLOW_MAGIC: &[u8; 4] = b"FMGF";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    pub pyramid_scale: f64,
    pub window_size: usize,
    pub iterations: usize,
    pub poly_n: usize,
    pub poly_sigma: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            pyramid_levels: 3,
            pyramid_scale: 0.5,
            window_size: 15,
            iterations: 3,
            poly_n: 5,
            poly_sigma: 1.1,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParam(m));
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels must be >= 1".into());
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return bad(format!("pyramid_scale {} not in (0, 1)", self.pyramid_scale));
        }
        if self.window_size < 3 || self.window_size.is_multiple_of(2) {
            return bad(format!("window_size {} must be odd and >= 3", self.window_size));
        }
        if self.poly_n < 3 || self.poly_n.is_multiple_of(2) {
            return bad(format!("poly_n {} must be odd and >= 3", self.poly_n));
        }
        if !(self.poly_sigma > 0.0 && self.poly_sigma.is_finite()) {
            return bad(format!("poly_sigma {} must be > 0", self.poly_sigma));
        }
        Ok(())
    }

    /// Short identifier recorded alongside instability profiles.
    pub fn digest(&self) -> String {
        format!(
            "pe:levels={},scale={},win={},iters={},poly_n={},poly_sigma={}",
            self.pyramid_levels,
            self.pyramid_scale,
            self.window_size,
            self.iterations,
            self.poly_n,
            self.poly_sigma
        )
    }
}

/// Per-pixel displacement field in working-resolution pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(&u, &v)| (u as f64).hypot(v as f64))
    }

    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().fold(0.0, f64::max)
    }

    /// Writes the binary dump: magic, u32 width, u32 height, then (u, v)
    /// f32 pairs, all little-endian, row-major.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(FLOW_MAGIC)?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.u.len() * 8);
        for (u, v) in self.u.iter().zip(&self.v) {
            buf.extend_from_slice(&u.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from(mut r: impl Read) -> Result<FlowField> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)
            .map_err(|e| Error::FlowFormat(e.to_string()))?;
        if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
            return Err(Error::FlowFormat("missing FMGF header".into()));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() != width * height * 8 {
            return Err(Error::FlowFormat(format!(
                "expected {} payload bytes for {width}x{height}, found {}",
                width * height * 8,
                body.len()
            )));
        }
        let (mut u, mut v) = (Vec::with_capacity(width * height), Vec::with_capacity(width * height));
        for px in body.chunks_exact(8) {
            u.push(f32::from_le_bytes(px[..4].try_into().unwrap()));
            v.push(f32::from_le_bytes(px[4..].try_into().unwrap()));
        }
        Ok(FlowField { width, height, u, v })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file))
            .map_err(|e| Error::io(path, e))
    }
}

/// Mean of per-pixel flow magnitudes.
pub fn flow_mean_magnitude(f: &FlowField) -> f64 {
    if f.u.is_empty() {
        return 0.0;
    }
    f.magnitudes().sum::<f64>() / f.u.len() as f64
}

/// 95th percentile (nearest rank) of per-pixel flow magnitudes.
pub fn flow_p95_magnitude(f: &FlowField) -> f64 {
    let mut mags: Vec<f64> = f.magnitudes().collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f64::total_cmp);
    let rank = ((0.95 * mags.len() as f64).ceil() as usize).clamp(1, mags.len());
    mags[rank - 1]
}

/// Quadratic coefficients of one pixel's neighbourhood:
/// `f(x, y) ≈ c + bx·x + by·y + axx·x² + ayy·y² + 2·axy·x·y`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolyCoeffs {
    pub c: f64,
    pub bx: f64,
    pub by: f64,
    pub axx: f64,
    pub ayy: f64,
    pub axy: f64,
}

#[derive(Debug, Clone)]
pub struct PolyExpansion {
    pub width: usize,
    pub height: usize,
    pub coeffs: Vec<PolyCoeffs>,
}

impl PolyExpansion {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &PolyCoeffs {
        &self.coeffs[y * self.width + x]
    }
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let r = radius as i64;
    (-r..=r)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Basis exponents (x power, y power) for 1, x, y, x², y², xy.
const BASIS: [(usize, usize); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (0, 2), (1, 1)];

/// Fits the quadratic model at every pixel by Gaussian-weighted least
/// squares over a `poly_n`-wide window. Near the frame edges the fit uses
/// only the in-image part of the window.
pub fn poly_expansion(img: &LumaImage, poly_n: usize, poly_sigma: f64) -> PolyExpansion {
    let data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    poly_expansion_f64(&data, img.width(), img.height(), poly_n, poly_sigma)
}

fn poly_expansion_f64(
    data: &[f64],
    w: usize,
    h: usize,
    poly_n: usize,
    poly_sigma: f64,
) -> PolyExpansion {
    let radius = poly_n / 2;
    let g = gaussian_kernel(radius, poly_sigma);
    let r = radius as i64;
    let n = w * h;

    // Horizontal correlations with g·dx^k, k = 0..2 (zero outside the image).
    let (mut hz0, mut hz1, mut hz2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        let o0 = &mut hz0[y * w..(y + 1) * w];
        let o1 = &mut hz1[y * w..(y + 1) * w];
        let o2 = &mut hz2[y * w..(y + 1) * w];
        for (ki, &gk) in g.iter().enumerate() {
            let k = ki as i64 - r;
            let (lo, hi) = shifted_range(k, w);
            if lo >= hi {
                continue;
            }
            let kf = k as f64;
            let (g1, g2) = (gk * kf, gk * kf * kf);
            let src = &row[(lo as i64 + k) as usize..(hi as i64 + k) as usize];
            for (((a, b), c), &s) in o0[lo..hi]
                .iter_mut()
                .zip(&mut o1[lo..hi])
                .zip(&mut o2[lo..hi])
                .zip(src)
            {
                *a += gk * s;
                *b += g1 * s;
                *c += g2 * s;
            }
        }
    }

    // Vertical correlations produce the six projections h_i = Σ w φ_i f.
    let mut proj: [Vec<f64>; 6] = std::array::from_fn(|_| vec![0.0; n]);
    for y in 0..h {
        let [p0, p1, p2, p3, p4, p5] = proj.each_mut().map(|p| &mut p[y * w..(y + 1) * w]);
        for (ki, &gi) in g.iter().enumerate() {
            let k = ki as i64 - r;
            let yy = y as i64 + k;
            if yy < 0 || yy >= h as i64 {
                continue;
            }
            let kf = k as f64;
            let (gk, gkk) = (gi * kf, gi * kf * kf);
            let s = yy as usize * w..(yy as usize + 1) * w;
            let (h0, h1, h2) = (&hz0[s.clone()], &hz1[s.clone()], &hz2[s]);
            for x in 0..w {
                p0[x] += gi * h0[x];
                p1[x] += gi * h1[x];
                p2[x] += gk * h0[x];
                p3[x] += gi * h2[x];
                p4[x] += gkk * h0[x];
                p5[x] += gk * h1[x];
            }
        }
    }

    // The Gram matrix depends only on how the window is clipped, so its
    // inverse is shared by every pixel with the same clipping.
    let classes = |len: usize| {
        let mut uniq: Vec<(usize, usize)> = Vec::new();
        let idx: Vec<usize> = (0..len)
            .map(|pos| {
                let c = (pos.min(radius), (len - 1 - pos).min(radius));
                uniq.iter().position(|&u| u == c).unwrap_or_else(|| {
                    uniq.push(c);
                    uniq.len() - 1
                })
            })
            .collect();
        (idx, uniq)
    };
    let moments = |(left, right): (usize, usize)| {
        let mut m = [0.0f64; 5];
        for k in -(left as i64)..=(right as i64) {
            let gk = g[(k + r) as usize];
            let mut pw = 1.0;
            for mk in m.iter_mut() {
                *mk += gk * pw;
                pw *= k as f64;
            }
        }
        m
    };
    let (xi, xc) = classes(w);
    let (yi, yc) = classes(h);
    let mut inverses = Vec::with_capacity(xc.len() * yc.len());
    for &cy in &yc {
        for &cx in &xc {
            let (mx, my) = (moments(cx), moments(cy));
            let mut gram = [[0.0; 6]; 6];
            for (i, &(ai, bi)) in BASIS.iter().enumerate() {
                for (j, &(aj, bj)) in BASIS.iter().enumerate() {
                    gram[i][j] = mx[ai + aj] * my[bi + bj];
                }
            }
            inverses.push(invert6(gram));
        }
    }

    let mut coeffs = Vec::with_capacity(n);
    for (y, &cy) in yi.iter().enumerate() {
        let base = cy * xc.len();
        for (x, &cx) in xi.iter().enumerate() {
            let inv = &inverses[base + cx];
            let i = y * w + x;
            let p = [proj[0][i], proj[1][i], proj[2][i], proj[3][i], proj[4][i], proj[5][i]];
            let mut sol = [0.0; 6];
            for (s, row) in sol.iter_mut().zip(inv) {
                *s = row.iter().zip(&p).map(|(a, b)| a * b).sum();
            }
            coeffs.push(PolyCoeffs {
                c: sol[0],
                bx: sol[1],
                by: sol[2],
                axx: sol[3],
                ayy: sol[4],
                axy: sol[5] * 0.5,
            });
        }
    }
    PolyExpansion {
        width: w,
        height: h,
        coeffs,
    }
}

/// Output range `[lo, hi)` whose samples at offset `k` fall inside `0..len`.
#[inline]
fn shifted_range(k: i64, len: usize) -> (usize, usize) {
    let lo = (-k).max(0) as usize;
    let hi = (len as i64 - k).clamp(0, len as i64) as usize;
    (lo, hi)
}

/// Inverse of a symmetric positive semi-definite 6×6 matrix. A small ridge
/// keeps windows clipped to fewer than three samples per axis solvable.
fn invert6(mut m: [[f64; 6]; 6]) -> [[f64; 6]; 6] {
    let trace: f64 = (0..6).map(|i| m[i][i]).sum();
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += 1e-12 * trace;
    }
    let mut inv = [[0.0; 6]; 6];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for col in 0..6 {
        let pivot = (col..6)
            .max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let d = m[col][col];
        for k in 0..6 {
            m[col][k] /= d;
            inv[col][k] /= d;
        }
        for row in 0..6 {
            if row != col {
                let f = m[row][col];
                if f != 0.0 {
                    for k in 0..6 {
                        m[row][k] -= f * m[col][k];
                        inv[row][k] -= f * inv[col][k];
                    }
                }
            }
        }
    }
    inv
}

/// Separable Gaussian blur with weights renormalized over the in-image support.
fn blur_normalized(data: &[f64], w: usize, h: usize, radius: usize, sigma: f64) -> Vec<f64> {
    let g = gaussian_kernel(radius, sigma);
    let r = radius as i64;
    let support_inv = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|p| {
                let lo = p.saturating_sub(radius);
                let hi = (p + radius).min(len - 1);
                1.0 / g[lo + radius - p..=hi + radius - p].iter().sum::<f64>()
            })
            .collect()
    };
    let inv_x = support_inv(w);
    let inv_y = support_inv(h);

    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &data[y * w..(y + 1) * w];
        let out = &mut tmp[y * w..(y + 1) * w];
        for (ki, &gk) in g.iter().enumerate() {
            let k = ki as i64 - r;
            let (lo, hi) = shifted_range(k, w);
            if lo >= hi {
                continue;
            }
            let src = &row[(lo as i64 + k) as usize..(hi as i64 + k) as usize];
            for (d, &s) in out[lo..hi].iter_mut().zip(src) {
                *d += gk * s;
            }
        }
        for (d, &s) in out.iter_mut().zip(&inv_x) {
            *d *= s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let lo = y.saturating_sub(radius);
        let hi = (y + radius).min(h - 1);
        let dst = &mut out[y * w..(y + 1) * w];
        for yy in lo..=hi {
            let gk = g[yy + radius - y];
            for (d, &s) in dst.iter_mut().zip(&tmp[yy * w..(yy + 1) * w]) {
                *d += gk * s;
            }
        }
        let s = inv_y[y];
        dst.iter_mut().for_each(|d| *d *= s);
    }
    out
}

/// Bilinear sample with coordinates clamped to the image.
#[inline]
fn bilinear(data: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = data[y0 * w + x0] * (1.0 - fx) + data[y0 * w + x1] * fx;
    let bot = data[y1 * w + x0] * (1.0 - fx) + data[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear sample of five interleaved channels with clamped coordinates.
#[inline]
fn bilinear5(data: &[[f64; 5]], w: usize, h: usize, x: f64, y: f64) -> [f64; 5] {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w01 = fx * (1.0 - fy);
    let w10 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    let (p00, p01, p10, p11) = (
        &data[y0 * w + x0],
        &data[y0 * w + x1],
        &data[y1 * w + x0],
        &data[y1 * w + x1],
    );
    std::array::from_fn(|c| p00[c] * w00 + p01[c] * w01 + p10[c] * w10 + p11[c] * w11)
}

/// Resamples to `(nw, nh)` with pixel-centre-aligned bilinear interpolation.
fn resize_bilinear(data: &[f64], w: usize, h: usize, nw: usize, nh: usize) -> Vec<f64> {
    let sx = w as f64 / nw as f64;
    let sy = h as f64 / nh as f64;
    let mut out = Vec::with_capacity(nw * nh);
    for y in 0..nh {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..nw {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            out.push(bilinear(data, w, h, fx, fy));
        }
    }
    out
}

/// Polynomial expansions of one frame at every pyramid level, finest first.
/// Computing this once per frame lets a sequence reuse it for both of the
/// transitions the frame takes part in.
#[derive(Debug, Clone)]
pub struct FramePyramid {
    levels: Vec<PolyExpansion>,
}

impl FramePyramid {
    pub fn build(img: &LumaImage, params: &FlowParams) -> FramePyramid {
        let (w, h) = (img.width(), img.height());
        let base: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
        let min_side = params.poly_n.max(4);
        let mut levels = Vec::with_capacity(params.pyramid_levels);
        for k in 0..params.pyramid_levels {
            let scale = params.pyramid_scale.powi(k as i32);
            let nw = (w as f64 * scale).round() as usize;
            let nh = (h as f64 * scale).round() as usize;
            if k > 0 && (nw < min_side || nh < min_side) {
                break;
            }
            let level = if k == 0 {
                base.clone()
            } else {
                let sigma = (1.0 / scale - 1.0) * 0.5;
                let radius = ((sigma * 3.0).round() as usize).max(1);
                let blurred = blur_normalized(&base, w, h, radius, sigma);
                resize_bilinear(&blurred, w, h, nw, nh)
            };
            levels.push(poly_expansion_f64(&level, nw, nh, params.poly_n, params.poly_sigma));
        }
        FramePyramid { levels }
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.levels[0].width, self.levels[0].height)
    }
}

/// Dense flow from frame `a` to frame `b`: content at `x` in `a` appears at
/// `x + d(x)` in `b`.
pub fn flow_two_frame(a: &LumaImage, b: &LumaImage, params: &FlowParams) -> Result<FlowField> {
    params.validate()?;
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::InvalidParam(format!(
            "flow frames differ in size: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let pa = FramePyramid::build(a, params);
    let pb = FramePyramid::build(b, params);
    flow_from_pyramids(&pa, &pb, params)
}

pub fn flow_from_pyramids(
    a: &FramePyramid,
    b: &FramePyramid,
    params: &FlowParams,
) -> Result<FlowField> {
    if a.dimensions() != b.dimensions() || a.levels.len() != b.levels.len() {
        return Err(Error::InvalidParam("pyramids differ in shape".into()));
    }
    let win_radius = params.window_size / 2;
    let win_sigma = 0.3 * ((params.window_size as f64 - 1.0) * 0.5 - 1.0) + 0.8;

    let mut flow: Option<(usize, usize, Vec<f64>, Vec<f64>)> = None;
    for level in (0..a.levels.len()).rev() {
        let (ea, eb) = (&a.levels[level], &b.levels[level]);
        let (w, h) = (ea.width, ea.height);
        let (mut du, mut dv) = match flow.take() {
            None => (vec![0.0; w * h], vec![0.0; w * h]),
            Some((pw, ph, pu, pv)) => {
                let fx = w as f64 / pw as f64;
                let fy = h as f64 / ph as f64;
                let mut u = resize_bilinear(&pu, pw, ph, w, h);
                let mut v = resize_bilinear(&pv, pw, ph, w, h);
                u.iter_mut().for_each(|x| *x *= fx);
                v.iter_mut().for_each(|x| *x *= fy);
                (u, v)
            }
        };

        // bx, by, axx, ayy, axy of the second frame, sampled together.
        let e2: Vec<[f64; 5]> = eb
            .coeffs
            .iter()
            .map(|c| [c.bx, c.by, c.axx, c.ayy, c.axy])
            .collect();

        for _ in 0..params.iterations {
            let mut g11 = vec![0.0; w * h];
            let mut g12 = vec![0.0; w * h];
            let mut g22 = vec![0.0; w * h];
            let mut h1 = vec![0.0; w * h];
            let mut h2 = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let c1 = &ea.coeffs[i];
                    let (d1, d2) = (du[i], dv[i]);
                    let [b2x, b2y, a2xx, a2yy, a2xy] =
                        bilinear5(&e2, w, h, x as f64 + d1, y as f64 + d2);
                    let axx = 0.5 * (c1.axx + a2xx);
                    let ayy = 0.5 * (c1.ayy + a2yy);
                    let axy = 0.5 * (c1.axy + a2xy);
                    let db1 = -0.5 * (b2x - c1.bx) + axx * d1 + axy * d2;
                    let db2 = -0.5 * (b2y - c1.by) + axy * d1 + ayy * d2;
                    // AᵀA and AᵀΔb for symmetric A.
                    g11[i] = axx * axx + axy * axy;
                    g12[i] = axy * (axx + ayy);
                    g22[i] = axy * axy + ayy * ayy;
                    h1[i] = axx * db1 + axy * db2;
                    h2[i] = axy * db1 + ayy * db2;
                }
            }
            let g11 = blur_normalized(&g11, w, h, win_radius, win_sigma);
            let g12 = blur_normalized(&g12, w, h, win_radius, win_sigma);
            let g22 = blur_normalized(&g22, w, h, win_radius, win_sigma);
            let h1 = blur_normalized(&h1, w, h, win_radius, win_sigma);
            let h2 = blur_normalized(&h2, w, h, win_radius, win_sigma);
            for i in 0..w * h {
                let m11 = g11[i] + FLOW_EPSILON;
                let m22 = g22[i] + FLOW_EPSILON;
                let m12 = g12[i];
                let det = m11 * m22 - m12 * m12;
                du[i] = (m22 * h1[i] - m12 * h2[i]) / det;
                dv[i] = (m11 * h2[i] - m12 * h1[i]) / det;
            }
        }
        flow = Some((w, h, du, dv));
    }
    let (w, h, u, v) = flow.expect("at least one pyramid level");
    Ok(FlowField {
        width: w,
        height: h,
        u: u.into_iter().map(|x| x as f32).collect(),
        v: v.into_iter().map(|x| x as f32).collect(),
    })
}
