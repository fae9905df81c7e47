//! Image containers, physical pixel geometry, stack normalization and the
//! binary FST stack/mask format.
//!
//! Pixel `(i, j)` (row `i`, column `j`) has its center at
//! `(i * dy, j * dx)` meters; every position reported by the pipeline uses
//! this convention.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_DY: f64 = 60e-6;
pub const DEFAULT_DX: f64 = 30e-6;
pub const DEFAULT_DT: f64 = 2e-3;
pub const DEFAULT_WAVELENGTH: f64 = 60e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub ny: usize,
    pub nx: usize,
    /// Row pitch in meters.
    pub dy: f64,
    /// Column pitch in meters.
    pub dx: f64,
    /// Inter-frame interval in seconds.
    pub dt: f64,
    pub wavelength: f64,
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self::with_shape(312, 180)
    }
}

impl GridGeometry {
    pub fn new(ny: usize, nx: usize, dy: f64, dx: f64, dt: f64, wavelength: f64) -> Result<Self> {
        let g = Self {
            ny,
            nx,
            dy,
            dx,
            dt,
            wavelength,
        };
        g.validate()?;
        Ok(g)
    }

    /// Shape with the default acquisition pitch, frame interval and wavelength.
    pub fn with_shape(ny: usize, nx: usize) -> Self {
        Self {
            ny,
            nx,
            dy: DEFAULT_DY,
            dx: DEFAULT_DX,
            dt: DEFAULT_DT,
            wavelength: DEFAULT_WAVELENGTH,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ny == 0 || self.nx == 0 {
            return Err(Error::Argument(format!(
                "grid shape must be non-empty, got {}x{}",
                self.ny, self.nx
            )));
        }
        for (name, v) in [
            ("dy", self.dy),
            ("dx", self.dx),
            ("dt", self.dt),
            ("wavelength", self.wavelength),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Argument(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.ny * self.nx
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.nx + j
    }

    /// Physical position (y, x) of a pixel center.
    #[inline]
    pub fn position(&self, i: usize, j: usize) -> (f64, f64) {
        (i as f64 * self.dy, j as f64 * self.dx)
    }

    /// Fractional pixel coordinates of a physical position.
    #[inline]
    pub fn to_pixel(&self, y: f64, x: f64) -> (f64, f64) {
        (y / self.dy, x / self.dx)
    }

    /// Whether a physical position lies within the span of pixel centers.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let (py, px) = self.to_pixel(y, x);
        py >= 0.0 && px >= 0.0 && py <= (self.ny - 1) as f64 && px <= (self.nx - 1) as f64
    }

    /// Geometry of a grid refined by integer factors; fine pixel `f * i`
    /// coincides with coarse pixel `i`.
    pub fn upsampled(&self, factor_y: usize, factor_x: usize) -> Self {
        Self {
            ny: self.ny * factor_y,
            nx: self.nx * factor_x,
            dy: self.dy / factor_y as f64,
            dx: self.dx / factor_x as f64,
            ..*self
        }
    }

    pub fn same_shape(&self, other: &GridGeometry) -> bool {
        self.ny == other.ny && self.nx == other.nx
    }
}

/// One intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub geometry: GridGeometry,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(geometry: GridGeometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Argument(format!(
                "frame data has {} values, geometry {}x{} needs {}",
                data.len(),
                geometry.ny,
                geometry.nx,
                geometry.len()
            )));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!("non-finite value at pixel {k}")));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        Self {
            geometry,
            data: vec![0.0; geometry.len()],
        }
    }

    pub fn filled(geometry: GridGeometry, value: f32) -> Self {
        Self {
            geometry,
            data: vec![value; geometry.len()],
        }
    }

    pub fn from_fn(geometry: GridGeometry, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(geometry.len());
        for i in 0..geometry.ny {
            for j in 0..geometry.nx {
                data.push(f(i, j));
            }
        }
        Self { geometry, data }
    }

    #[inline]
    pub fn ny(&self) -> usize {
        self.geometry.ny
    }

    #[inline]
    pub fn nx(&self) -> usize {
        self.geometry.nx
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.geometry.nx + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        let nx = self.geometry.nx;
        self.data[i * nx + j] = v;
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Row-major index of the first maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = k;
            }
        }
        best
    }
}

/// Time-ordered frames sharing one geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStack {
    pub geometry: GridGeometry,
    pub frames: Vec<Frame>,
}

impl FrameStack {
    pub fn new(geometry: GridGeometry, frames: Vec<Frame>) -> Result<Self> {
        geometry.validate()?;
        if frames.is_empty() {
            return Err(Error::Argument("a stack needs at least one frame".into()));
        }
        if let Some(t) = frames.iter().position(|f| f.geometry != geometry) {
            return Err(Error::Argument(format!(
                "frame {t} geometry differs from the stack geometry"
            )));
        }
        Ok(Self { geometry, frames })
    }

    pub fn from_frames(frames: Vec<Frame>) -> Result<Self> {
        let geometry = frames
            .first()
            .map(|f| f.geometry)
            .ok_or_else(|| Error::Argument("a stack needs at least one frame".into()))?;
        Self::new(geometry, frames)
    }

    #[inline]
    pub fn nframes(&self) -> usize {
        self.frames.len()
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.frames.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), f| {
            (lo.min(f.min()), hi.max(f.max()))
        })
    }

    pub fn mean(&self) -> f64 {
        let n = (self.nframes() * self.geometry.len()) as f64;
        self.frames
            .iter()
            .map(|f| f.data.iter().map(|&v| v as f64).sum::<f64>())
            .sum::<f64>()
            / n
    }
}

/// Affine map of the whole stack onto [0, 1] using the global min and max.
pub fn normalize_stack(stack: &FrameStack) -> Result<FrameStack> {
    let (lo, hi) = stack.min_max();
    if !(hi > lo) {
        return Err(Error::Degenerate(format!(
            "cannot normalize a constant stack (all values {lo})"
        )));
    }
    let lo = lo as f64;
    let span = hi as f64 - lo;
    let frames = stack
        .frames
        .iter()
        .map(|f| Frame {
            geometry: f.geometry,
            data: f
                .data
                .iter()
                .map(|&v| ((v as f64 - lo) / span) as f32)
                .collect(),
        })
        .collect();
    Ok(FrameStack {
        geometry: stack.geometry,
        frames,
    })
}

/// Binary vessel reference with its exact Euclidean distance field.
#[derive(Debug, Clone, PartialEq)]
pub struct VesselMask {
    pub geometry: GridGeometry,
    pub bits: Vec<bool>,
    /// Distance in meters to the nearest true pixel center, 0 on the mask.
    pub distance: Vec<f64>,
}

impl VesselMask {
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Bilinear sample of the distance field at a physical position.
    /// Positions off the grid are clamped onto it and the clamped offset is
    /// added to the sampled distance.
    pub fn distance_at(&self, y: f64, x: f64) -> f64 {
        let g = &self.geometry;
        let ymax = (g.ny - 1) as f64 * g.dy;
        let xmax = (g.nx - 1) as f64 * g.dx;
        let cy = y.clamp(0.0, ymax);
        let cx = x.clamp(0.0, xmax);
        let extra = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
        let (py, px) = g.to_pixel(cy, cx);
        let i0 = (py.floor() as usize).min(g.ny - 1);
        let j0 = (px.floor() as usize).min(g.nx - 1);
        let i1 = (i0 + 1).min(g.ny - 1);
        let j1 = (j0 + 1).min(g.nx - 1);
        let ty = py - i0 as f64;
        let tx = px - j0 as f64;
        let d = |i: usize, j: usize| self.distance[g.index(i, j)];
        let top = d(i0, j0) * (1.0 - tx) + d(i0, j1) * tx;
        let bottom = d(i1, j0) * (1.0 - tx) + d(i1, j1) * tx;
        top * (1.0 - ty) + bottom * ty + extra
    }
}

/// Builds a vessel mask and its distance field from a boolean image.
pub fn mask_from_image(bits: Vec<bool>, geometry: GridGeometry) -> Result<VesselMask> {
    geometry.validate()?;
    if bits.len() != geometry.len() {
        return Err(Error::Argument(format!(
            "mask has {} pixels, geometry needs {}",
            bits.len(),
            geometry.len()
        )));
    }
    if !bits.iter().any(|&b| b) {
        return Err(Error::Degenerate("vessel mask has no true pixels".into()));
    }
    let distance = euclidean_distance_transform(&bits, &geometry);
    Ok(VesselMask {
        geometry,
        bits,
        distance,
    })
}

/// Exact Euclidean distance transform with anisotropic pitch, computed as
/// two separable lower-envelope-of-parabolas passes over squared distances.
fn euclidean_distance_transform(bits: &[bool], g: &GridGeometry) -> Vec<f64> {
    let (ny, nx) = (g.ny, g.nx);
    let mut sq = vec![f64::INFINITY; ny * nx];
    let mut col_in = vec![0.0; ny];
    let mut col_out = vec![0.0; ny];
    for j in 0..nx {
        for i in 0..ny {
            col_in[i] = if bits[i * nx + j] { 0.0 } else { f64::INFINITY };
        }
        squared_distance_1d(&col_in, g.dy, &mut col_out);
        for i in 0..ny {
            sq[i * nx + j] = col_out[i];
        }
    }
    let mut row_out = vec![0.0; nx];
    for i in 0..ny {
        let row = &mut sq[i * nx..(i + 1) * nx];
        squared_distance_1d(row, g.dx, &mut row_out);
        row.copy_from_slice(&row_out);
    }
    sq.into_iter().map(f64::sqrt).collect()
}

fn squared_distance_1d(f: &[f64], spacing: f64, out: &mut [f64]) {
    let n = f.len();
    let s2 = spacing * spacing;
    let mut verts: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    let intersect = |q: usize, r: usize| {
        let (qf, rf) = (q as f64, r as f64);
        ((f[q] + s2 * qf * qf) - (f[r] + s2 * rf * rf)) / (2.0 * s2 * (qf - rf))
    };
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            match verts.last() {
                None => {
                    verts.push(q);
                    bounds.clear();
                    bounds.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&r) => {
                    let s = intersect(q, r);
                    if s <= bounds[bounds.len() - 1] {
                        verts.pop();
                        bounds.pop();
                    } else {
                        verts.push(q);
                        bounds.push(s);
                        break;
                    }
                }
            }
        }
    }
    if verts.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        let pf = p as f64;
        while k + 1 < verts.len() && bounds[k + 1] < pf {
            k += 1;
        }
        let q = verts[k];
        let d = pf - q as f64;
        *o = s2 * d * d + f[q];
    }
}

// --- FST binary format -------------------------------------------------------

pub const FST_MAGIC: &[u8; 4] = b"FST1";
pub const FST_VERSION: u32 = 1;
pub const FST_HEADER_LEN: usize = 4 + 4 * 4 + 4 * 8;

/// Header fields of an FST file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FstHeader {
    pub nframes: usize,
    pub geometry: GridGeometry,
}

fn encode_header(nframes: usize, g: &GridGeometry) -> Vec<u8> {
    let mut buf = Vec::with_capacity(FST_HEADER_LEN);
    buf.extend_from_slice(FST_MAGIC);
    buf.extend_from_slice(&FST_VERSION.to_le_bytes());
    for v in [nframes, g.ny, g.nx] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in [g.dy, g.dx, g.dt, g.wavelength] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn decode_header(buf: &[u8]) -> Result<FstHeader> {
    if buf.len() < FST_HEADER_LEN {
        return Err(Error::format(
            buf.len() as u64,
            format!("header truncated: {} of {FST_HEADER_LEN} bytes", buf.len()),
        ));
    }
    if &buf[0..4] != FST_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &buf[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != FST_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let nframes = u32_at(8) as usize;
    let geometry = GridGeometry {
        ny: u32_at(12) as usize,
        nx: u32_at(16) as usize,
        dy: f64_at(20),
        dx: f64_at(28),
        dt: f64_at(36),
        wavelength: f64_at(44),
    };
    if nframes == 0 {
        return Err(Error::format(8, "stack declares zero frames"));
    }
    geometry
        .validate()
        .map_err(|e| Error::format(12, format!("invalid geometry: {e}")))?;
    Ok(FstHeader { nframes, geometry })
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_all(path: &Path, chunks: &[&[u8]]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for c in chunks {
        w.write_all(c).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads only the header of an FST file.
pub fn read_header(path: impl AsRef<Path>) -> Result<FstHeader> {
    let path = path.as_ref();
    let mut buf = vec![0u8; FST_HEADER_LEN];
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut got = 0;
    while got < buf.len() {
        let n = f.read(&mut buf[got..]).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        got += n;
    }
    buf.truncate(got);
    decode_header(&buf)
}

pub fn encode_stack(stack: &FrameStack) -> Vec<u8> {
    let mut buf = encode_header(stack.nframes(), &stack.geometry);
    buf.reserve(stack.nframes() * stack.geometry.len() * 4);
    for f in &stack.frames {
        for v in &f.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn decode_stack(buf: &[u8]) -> Result<FrameStack> {
    let header = decode_header(buf)?;
    let g = header.geometry;
    let npix = g.len();
    let need = FST_HEADER_LEN + header.nframes * npix * 4;
    if buf.len() < need {
        let have_frames = (buf.len() - FST_HEADER_LEN) / (npix * 4);
        return Err(Error::format(
            buf.len() as u64,
            format!(
                "payload truncated: header declares {} frames, file holds {have_frames} ({} of {need} bytes)",
                header.nframes,
                buf.len()
            ),
        ));
    }
    if buf.len() > need {
        return Err(Error::format(
            need as u64,
            format!("{} trailing bytes after payload", buf.len() - need),
        ));
    }
    let mut frames = Vec::with_capacity(header.nframes);
    let mut offset = FST_HEADER_LEN;
    for _ in 0..header.nframes {
        let mut data = Vec::with_capacity(npix);
        for _ in 0..npix {
            let v = f32::from_le_bytes(buf[offset..offset + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(offset as u64, format!("non-finite value {v}")));
            }
            data.push(v);
            offset += 4;
        }
        frames.push(Frame { geometry: g, data });
    }
    Ok(FrameStack {
        geometry: g,
        frames,
    })
}

pub fn save_stack(stack: &FrameStack, path: impl AsRef<Path>) -> Result<()> {
    write_all(path.as_ref(), &[&encode_stack(stack)])
}

pub fn load_stack(path: impl AsRef<Path>) -> Result<FrameStack> {
    decode_stack(&read_all(path.as_ref())?)
}

pub fn save_frame(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let stack = FrameStack {
        geometry: frame.geometry,
        frames: vec![frame.clone()],
    };
    save_stack(&stack, path)
}

pub fn save_mask(mask: &VesselMask, path: impl AsRef<Path>) -> Result<()> {
    let header = encode_header(1, &mask.geometry);
    let payload: Vec<u8> = mask.bits.iter().map(|&b| b as u8).collect();
    write_all(path.as_ref(), &[&header, &payload])
}

pub fn decode_mask(buf: &[u8]) -> Result<VesselMask> {
    let header = decode_header(buf)?;
    if header.nframes != 1 {
        return Err(Error::format(
            8,
            format!("mask files hold one plane, header declares {}", header.nframes),
        ));
    }
    let g = header.geometry;
    let need = FST_HEADER_LEN + g.len();
    if buf.len() != need {
        return Err(Error::format(
            buf.len().min(need) as u64,
            format!("mask payload has {} bytes, expected {}", buf.len() - FST_HEADER_LEN, g.len()),
        ));
    }
    let mut bits = Vec::with_capacity(g.len());
    for (k, &b) in buf[FST_HEADER_LEN..].iter().enumerate() {
        match b {
            0 => bits.push(false),
            1 => bits.push(true),
            _ => {
                return Err(Error::format(
                    (FST_HEADER_LEN + k) as u64,
                    format!("mask byte {b} is not 0 or 1"),
                ))
            }
        }
    }
    mask_from_image(bits, g)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<VesselMask> {
    decode_mask(&read_all(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom(ny: usize, nx: usize) -> GridGeometry {
        GridGeometry::with_shape(ny, nx)
    }

    fn brute_distance(bits: &[bool], g: &GridGeometry) -> Vec<f64> {
        let mut out = vec![f64::INFINITY; g.len()];
        for i in 0..g.ny {
            for j in 0..g.nx {
                for a in 0..g.ny {
                    for b in 0..g.nx {
                        if bits[g.index(a, b)] {
                            let dy = (i as f64 - a as f64) * g.dy;
                            let dx = (j as f64 - b as f64) * g.dx;
                            let d = (dy * dy + dx * dx).sqrt();
                            let o = &mut out[g.index(i, j)];
                            *o = o.min(d);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn geometry_rejects_bad_values() {
        assert!(GridGeometry::new(0, 3, 1.0, 1.0, 1.0, 1.0).is_err());
        assert!(GridGeometry::new(3, 3, -1.0, 1.0, 1.0, 1.0).is_err());
        assert!(GridGeometry::new(3, 3, 1.0, 1.0, 0.0, 1.0).is_err());
        let g = GridGeometry::default();
        assert_eq!((g.dy, g.dx, g.dt, g.wavelength), (60e-6, 30e-6, 2e-3, 60e-6));
    }

    #[test]
    fn zeros_round_trip() {
        let g = geom(2, 2);
        let s = FrameStack::new(g, vec![Frame::zeros(g)]).unwrap();
        let back = decode_stack(&encode_stack(&s)).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let g = geom(2, 3);
        let s = FrameStack::new(g, vec![Frame::filled(g, 1.0); 3]).unwrap();
        let bytes = encode_stack(&s);
        let cut = &bytes[..FST_HEADER_LEN + 2 * g.len() * 4];
        match decode_stack(cut) {
            Err(Error::Format { offset, message }) => {
                assert_eq!(offset as usize, cut.len());
                assert!(message.contains("3 frames"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_non_finite() {
        let g = geom(1, 1);
        let s = FrameStack::new(g, vec![Frame::zeros(g)]).unwrap();
        let mut bytes = encode_stack(&s);
        bytes[0] = b'X';
        assert!(matches!(decode_stack(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = encode_stack(&s);
        bytes[FST_HEADER_LEN..].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_stack(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, FST_HEADER_LEN),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let g = geom(1, 1);
        let s = FrameStack::new(g, vec![Frame::zeros(g)]).unwrap();
        let err = save_stack(&s, "/nonexistent-dir/x/y.fst").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/nonexistent-dir/x/y.fst"));
    }

    #[test]
    fn file_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = (0..3)
            .map(|_| Frame::from_fn(g, |_, _| rng.gen::<f32>()))
            .collect();
        let s = FrameStack::new(g, frames).unwrap();
        let a = dir.path().join("a.fst");
        let b = dir.path().join("b.fst");
        save_stack(&s, &a).unwrap();
        save_stack(&s, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(load_stack(&a).unwrap(), s);
        let h = read_header(&a).unwrap();
        assert_eq!(h.nframes, 3);
        assert_eq!(h.geometry, g);
    }

    #[test]
    fn normalize_examples() {
        let g = geom(1, 3);
        let s = FrameStack::new(g, vec![Frame::new(g, vec![0.0, 5.0, 10.0]).unwrap()]).unwrap();
        let n = normalize_stack(&s).unwrap();
        assert_eq!(n.frames[0].data, vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_stack(&n).unwrap(), n);
        let c = FrameStack::new(g, vec![Frame::filled(g, 2.0)]).unwrap();
        assert!(matches!(normalize_stack(&c), Err(Error::Degenerate(_))));
    }

    #[test]
    fn normalize_is_global_and_keeps_argmax() {
        let g = geom(6, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames: Vec<Frame> = (0..5)
            .map(|t| Frame::from_fn(g, |_, _| rng.gen::<f32>() * (t + 1) as f32 - 2.0))
            .collect();
        let s = FrameStack::new(g, frames).unwrap();
        let n = normalize_stack(&s).unwrap();
        assert_eq!(n.min_max(), (0.0, 1.0));
        for (a, b) in s.frames.iter().zip(&n.frames) {
            assert_eq!(a.argmax(), b.argmax());
        }
        // dimmest frame stays dim: the map is shared by all frames
        assert!(n.frames[0].max() < n.frames[4].max());
    }

    #[test]
    fn distance_three_four_five() {
        let g = GridGeometry::new(5, 6, 1e-6, 1e-6, 1.0, 1.0).unwrap();
        let mut bits = vec![false; g.len()];
        bits[0] = true;
        let m = mask_from_image(bits, g).unwrap();
        assert!((m.distance[g.index(3, 4)] - 5e-6).abs() < 1e-18);
        assert_eq!(m.distance[0], 0.0);
    }

    #[test]
    fn all_true_and_empty_masks() {
        let g = geom(4, 4);
        let m = mask_from_image(vec![true; 16], g).unwrap();
        assert!(m.distance.iter().all(|&d| d == 0.0));
        assert!(matches!(
            mask_from_image(vec![false; 16], g),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn distance_matches_brute_force_32() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for density in [0.002, 0.02, 0.2, 0.7] {
            let g = geom(32, 32);
            let mut bits: Vec<bool> = (0..g.len()).map(|_| rng.gen_bool(density)).collect();
            bits[rng.gen_range(0..g.len())] = true;
            let m = mask_from_image(bits.clone(), g).unwrap();
            let oracle = brute_distance(&bits, &g);
            for (a, b) in m.distance.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-12 * b.max(1e-6), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = geom(3, 4);
        let bits = vec![true, false, false, true, false, true, false, false, false, false, true, false];
        let m = mask_from_image(bits, g).unwrap();
        let p = dir.path().join("m.fst");
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn distance_sampling_is_bilinear() {
        let g = GridGeometry::new(1, 3, 10e-6, 10e-6, 1.0, 1.0).unwrap();
        let m = mask_from_image(vec![true, false, false], g).unwrap();
        assert!((m.distance_at(0.0, 15e-6) - 15e-6).abs() < 1e-15);
        assert_eq!(m.distance_at(0.0, 0.0), 0.0);
    }

    proptest! {
        #[test]
        fn fst_round_trip_is_bit_exact(
            ny in 1usize..6, nx in 1usize..6, nf in 1usize..4,
            seed in any::<u64>(),
        ) {
            let g = geom(ny, nx);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let frames = (0..nf)
                .map(|_| Frame::from_fn(g, |_, _| f32::from_bits(rng.gen::<u32>() & 0xbf7f_ffff)))
                .collect();
            let s = FrameStack::new(g, frames).unwrap();
            let back = decode_stack(&encode_stack(&s)).unwrap();
            for (a, b) in s.frames.iter().zip(&back.frames) {
                prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            prop_assert_eq!(back.geometry, g);
        }

        #[test]
        fn normalize_idempotent_and_monotone(
            vals in proptest::collection::vec(-1e3f32..1e3, 2..40),
        ) {
            prop_assume!(vals.iter().any(|&v| v != vals[0]));
            let g = geom(1, vals.len());
            let s = FrameStack::new(g, vec![Frame::new(g, vals.clone()).unwrap()]).unwrap();
            let n = normalize_stack(&s).unwrap();
            prop_assert_eq!(&normalize_stack(&n).unwrap(), &n);
            for a in 0..vals.len() {
                for b in 0..vals.len() {
                    if vals[a] <= vals[b] {
                        prop_assert!(n.frames[0].data[a] <= n.frames[0].data[b]);
                    }
                }
            }
        }
    }
}
