//! Dense image containers and the two on-disk formats used by datasets:
//! binary PPM (P6, 8-bit RGB) and little-endian grayscale PFM.
//!
//! Pixel `(x, y)` covers the continuous square `[x, x+1) × [y, y+1)`, so its
//! center sits at `(x + 0.5, y + 0.5)`. All continuous sampling functions take
//! coordinates in that convention.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Single-channel `f64` map (depth, disparity, masks as 0/1).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ScalarMap {
    pub fn new(width: usize, height: usize, fill: f64) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear lookup at continuous pixel coordinates; `None` outside the
    /// hull of pixel centers.
    pub fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let (x0, y0, fx, fy) = bilinear_cell(u, v, self.width, self.height)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let a = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let b = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(a * (1.0 - fy) + b * fy)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        write_pfm(path, self)
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        read_pfm(path)
    }
}

/// RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        Self { width, height, data: vec![fill; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    pub fn sample(&self, u: f64, v: f64) -> Option<[f64; 3]> {
        let (x0, y0, fx, fy) = bilinear_cell(u, v, self.width, self.height)?;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (p00, p10, p01, p11) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        let mut out = [0.0; 3];
        for c in 0..3 {
            let a = p00[c] * (1.0 - fx) + p10[c] * fx;
            let b = p01[c] * (1.0 - fx) + p11[c] * fx;
            out[c] = a * (1.0 - fy) + b * fy;
        }
        Some(out)
    }

    /// Rec. 601 luma.
    pub fn to_gray(&self) -> ScalarMap {
        ScalarMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).collect(),
        }
    }

    /// Each channel of `self` as a separate map.
    pub fn channel(&self, c: usize) -> ScalarMap {
        ScalarMap { width: self.width, height: self.height, data: self.data.iter().map(|p| p[c]).collect() }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.data {
            for c in p {
                buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (tokens, body) = header_tokens(&bytes, 4, "PPM")?;
        if tokens[0] != "P6" {
            return Err(format_err("PPM", format!("unsupported magic {:?}", tokens[0])));
        }
        let width = parse_dim(&tokens[1], "PPM")?;
        let height = parse_dim(&tokens[2], "PPM")?;
        if tokens[3] != "255" {
            return Err(format_err("PPM", "only 8-bit maxval 255 is supported".into()));
        }
        let body = &bytes[body..];
        if body.len() != width * height * 3 {
            return Err(format_err("PPM", format!("expected {} data bytes, found {}", width * height * 3, body.len())));
        }
        let data = body.chunks_exact(3).map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0]).collect();
        Ok(Self { width, height, data })
    }

    /// Rounds every channel to the 8-bit grid, i.e. what a PPM round trip yields.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() / 255.0)).collect(),
        }
    }
}

/// Top-left cell and fractional offsets for bilinear interpolation at
/// continuous coordinates `(u, v)`.
#[inline]
pub(crate) fn bilinear_cell(u: f64, v: f64, width: usize, height: usize) -> Option<(usize, usize, f64, f64)> {
    let x = u - 0.5;
    let y = v - 0.5;
    const SLACK: f64 = 1e-9;
    if !(x >= -SLACK && y >= -SLACK && x <= (width - 1) as f64 + SLACK && y <= (height - 1) as f64 + SLACK) {
        return None;
    }
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    // Non-negative, so truncation is floor (and avoids a libm call).
    let x0 = (x as usize).min(width.saturating_sub(2));
    let y0 = (y as usize).min(height.saturating_sub(2));
    Some((x0, y0, x - x0 as f64, y - y0 as f64))
}

fn format_err(kind: &'static str, msg: String) -> Error {
    Error::Format { kind, msg }
}

fn parse_dim(tok: &str, kind: &'static str) -> Result<usize> {
    tok.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| format_err(kind, format!("bad dimension {tok:?}")))
}

/// Splits a PNM-style header into `n` whitespace separated tokens and returns
/// the offset of the first data byte (after exactly one whitespace byte).
fn header_tokens(bytes: &[u8], n: usize, kind: &'static str) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(format_err(kind, "truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(format_err(kind, "missing data section".into()));
    }
    Ok((tokens, i + 1))
}

/// Grayscale PFM, little-endian (negative scale), rows stored bottom-to-top.
pub fn write_pfm(path: &Path, map: &ScalarMap) -> Result<()> {
    let mut buf = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            buf.extend_from_slice(&(map.get(x, y) as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<ScalarMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tokens, body) = header_tokens(&bytes, 4, "PFM")?;
    if tokens[0] != "Pf" {
        return Err(format_err("PFM", format!("unsupported magic {:?}", tokens[0])));
    }
    let width = parse_dim(&tokens[1], "PFM")?;
    let height = parse_dim(&tokens[2], "PFM")?;
    let scale: f64 = tokens[3].parse().map_err(|_| format_err("PFM", format!("bad scale {:?}", tokens[3])))?;
    if scale == 0.0 {
        return Err(format_err("PFM", "zero scale".into()));
    }
    let little = scale < 0.0;
    let body = &bytes[body..];
    if body.len() != width * height * 4 {
        return Err(format_err("PFM", format!("expected {} data bytes, found {}", width * height * 4, body.len())));
    }
    let mut map = ScalarMap::new(width, height, 0.0);
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let row = height - 1 - i / width;
        map.set(i % width, row, v as f64);
    }
    Ok(map)
}

/// Writes a scalar map as a grayscale PPM, linearly normalized to its
/// finite min/max range. Used for inspection dumps.
pub fn write_heatmap_ppm(path: &Path, map: &ScalarMap) -> Result<()> {
    let finite = map.data.iter().copied().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img = RgbImage {
        width: map.width,
        height: map.height,
        data: map
            .data
            .iter()
            .map(|&v| {
                let g = if v.is_finite() { (v - lo) / span } else { 0.0 };
                [g, g, g]
            })
            .collect(),
    };
    img.write_ppm(path)
}

/// Mean over a `(2r+1)²` window, clamping coordinates at the border.
pub fn box_mean(map: &ScalarMap, r: usize) -> ScalarMap {
    let (w, h) = (map.width, map.height);
    let ri = r as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = ScalarMap::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dx in -ri..=ri {
                s += map.get(clamp(x as isize + dx, w), y);
            }
            tmp.set(x, y, s);
        }
    }
    let norm = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = ScalarMap::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -ri..=ri {
                s += tmp.get(x, clamp(y as isize + dy, h));
            }
            out.set(x, y, s / norm);
        }
    }
    out
}

/// Normalized 1-D Gaussian taps for `sigma`, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(map: &ScalarMap, sigma: f64) -> ScalarMap {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h) = (map.width, map.height);
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = ScalarMap::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = k.iter().enumerate().map(|(i, kv)| kv * map.get(clamp(x as isize + i as isize - r, w), y)).sum();
            tmp.set(x, y, s);
        }
    }
    let mut out = ScalarMap::new(w, h, 0.0);
    for y in 0..h {
        for x in 0..w {
            let s: f64 = k.iter().enumerate().map(|(i, kv)| kv * tmp.get(x, clamp(y as isize + i as isize - r, h))).sum();
            out.set(x, y, s);
        }
    }
    out
}

/// 2×2 average pooling (odd trailing rows/columns are dropped).
pub fn avg_pool2(map: &ScalarMap) -> ScalarMap {
    let (w, h) = (map.width / 2, map.height / 2);
    ScalarMap::from_fn(w, h, |x, y| {
        0.25 * (map.get(2 * x, 2 * y) + map.get(2 * x + 1, 2 * y) + map.get(2 * x, 2 * y + 1) + map.get(2 * x + 1, 2 * y + 1))
    })
}

/// Mirrors a map left-right.
pub fn flip_horizontal(map: &ScalarMap) -> ScalarMap {
    ScalarMap::from_fn(map.width, map.height, |x, y| map.get(map.width - 1 - x, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let map = ScalarMap::from_fn(5, 3, |x, y| x as f64 * 0.5 + y as f64 * 10.0 + 0.125);
        map.write_pfm(&p).unwrap();
        let back = ScalarMap::read_pfm(&p).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn pfm_stores_bottom_row_first() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pfm");
        let map = ScalarMap::from_fn(2, 2, |_, y| y as f64);
        map.write_pfm(&p).unwrap();
        let bytes = fs::read(&p).unwrap();
        let body = &bytes[bytes.len() - 16..];
        assert_eq!(f32::from_le_bytes(body[0..4].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(body[8..12].try_into().unwrap()), 0.0);
    }

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.ppm");
        let mut img = RgbImage::new(4, 2, [0.0; 3]);
        img.set(1, 1, [1.0, 0.5, 0.25]);
        let img = img.quantized();
        img.write_ppm(&p).unwrap();
        assert_eq!(RgbImage::read_ppm(&p).unwrap(), img);
    }

    #[test]
    fn truncated_ppm_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ppm");
        fs::write(&p, b"P6\n4 4\n255\n\x00\x01").unwrap();
        assert!(matches!(RgbImage::read_ppm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn filters_preserve_constants() {
        let map = ScalarMap::new(7, 5, 0.3);
        for m in [box_mean(&map, 2), gaussian_blur(&map, 1.5)] {
            assert!(m.data.iter().all(|v| (v - 0.3).abs() < 1e-15));
        }
        let p = avg_pool2(&map);
        assert_eq!((p.width, p.height), (3, 2));
    }

    #[test]
    fn bilinear_hits_pixel_centers_exactly() {
        let map = ScalarMap::from_fn(4, 3, |x, y| (x * 7 + y * 3) as f64);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(map.sample(x as f64 + 0.5, y as f64 + 0.5), Some(map.get(x, y)));
            }
        }
        assert_eq!(map.sample(1.0, 0.5), Some(3.5));
        assert!(map.sample(0.2, 1.0).is_none());
        assert!(map.sample(4.6, 1.0).is_none());
    }
}
