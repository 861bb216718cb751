//! Raster containers and the file formats the pipeline exchanges.
//!
//! * `.flo` (Middlebury): `PIEH`, i32 width, i32 height, interleaved f32
//!   `(u, v)`, little-endian. `|u| > 1e9` or `|v| > 1e9` marks invalid flow.
//! * PFM: `Pf` (gray) or `PF` (color), negative scale for little-endian,
//!   scanlines stored bottom-to-top. NaN marks invalid depth.
//! * PGM (`P5`): 8- or 16-bit gray, scaled to `[0, 1]` on read.
//! * Trajectory text, one `t tx ty tz qx qy qz qw` line per pose
//!   (camera-to-world), and intrinsics text `fx fy cx cy width height`.
//!
//! In memory every raster is row-major, top row first.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::geometry::{compose, Intrinsics, RelativePose};
use crate::{Error, Result};

const FLO_MAGIC: &[u8; 4] = b"PIEH";
const MAX_DIM: usize = 1 << 16;

/// Sentinel written for invalid flow vectors.
pub const INVALID_FLOW: f32 = 1e10;
/// Magnitude above which a flow component is treated as invalid.
pub const INVALID_FLOW_THRESHOLD: f32 = 1e9;
/// Largest deviation of `|q|` from 1 accepted in trajectory files.
pub const QUATERNION_NORM_TOL: f64 = 1e-3;

/// Row-major, top-to-bottom image of `C` f32 channels per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<const C: usize> {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl<const C: usize> Raster<C> {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * C {
            return Err(Error::input(format!(
                "raster data has {} samples, expected {width}x{height}x{C}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * C],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Channels of pixel `i` in row-major order.
    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * C..(i + 1) * C]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * C..(i + 1) * C]
    }

    pub fn get(&self, x: usize, y: usize) -> &[f32] {
        self.pixel(y * self.width + x)
    }

    pub fn same_size<const D: usize>(&self, other: &Raster<D>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

impl Raster<1> {
    pub fn from_f64(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        Self::new(width, height, values.iter().map(|&v| v as f32).collect())
    }

    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Dense flow from the keyframe to one adjacent frame.
///
/// Invalid pixels carry [`INVALID_FLOW`] in both components.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Raster<2>);

impl FlowField {
    pub fn new(raster: Raster<2>) -> Self {
        Self(raster)
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self(Raster::filled(width, height, INVALID_FLOW))
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self(Raster::filled(width, height, 0.0))
    }

    pub fn raster(&self) -> &Raster<2> {
        &self.0
    }

    pub fn into_raster(self) -> Raster<2> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    /// Flow vector at pixel `i`, or `None` when marked invalid.
    pub fn vector(&self, i: usize) -> Option<(f32, f32)> {
        let p = self.0.pixel(i);
        flow_is_valid(p[0], p[1]).then_some((p[0], p[1]))
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.vector(i).is_some()
    }

    pub fn set(&mut self, i: usize, u: f32, v: f32) {
        let p = self.0.pixel_mut(i);
        p[0] = u;
        p[1] = v;
    }

    pub fn set_invalid(&mut self, i: usize) {
        self.set(i, INVALID_FLOW, INVALID_FLOW);
    }

    pub fn valid_count(&self) -> usize {
        (0..self.0.pixel_count()).filter(|&i| self.is_valid(i)).count()
    }
}

fn flow_is_valid(u: f32, v: f32) -> bool {
    u.is_finite()
        && v.is_finite()
        && u.abs() <= INVALID_FLOW_THRESHOLD
        && v.abs() <= INVALID_FLOW_THRESHOLD
}

/// Timestamped camera-to-world poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<(f64, RelativePose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, RelativePose)>) -> Result<Self> {
        for (i, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::format(format!(
                    "timestamps not strictly increasing at entry {} ({} after {})",
                    i + 1,
                    w[1].0,
                    w[0].0
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, RelativePose)] {
        &self.entries
    }

    pub fn pose(&self, i: usize) -> &RelativePose {
        &self.entries[i].1
    }

    pub fn timestamp(&self, i: usize) -> f64 {
        self.entries[i].0
    }

    /// Pose mapping keyframe-camera coordinates into frame-`k` coordinates.
    pub fn relative_pose(&self, keyframe: usize, k: usize) -> RelativePose {
        compose(self.pose(keyframe), &self.pose(k).inverse())
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// .flo

pub fn encode_flow(flow: &FlowField) -> Vec<u8> {
    let r = flow.raster();
    let mut out = Vec::with_capacity(12 + r.data.len() * 4);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(r.width as i32).to_le_bytes());
    out.extend_from_slice(&(r.height as i32).to_le_bytes());
    for v in &r.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flow(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::format("flow file shorter than its 12-byte header"));
    }
    if &bytes[..4] != FLO_MAGIC {
        return Err(Error::format(format!(
            "bad flow magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if width <= 0 || height <= 0 || width as usize > MAX_DIM || height as usize > MAX_DIM {
        return Err(Error::format(format!(
            "implausible flow dimensions {width}x{height}"
        )));
    }
    let (width, height) = (width as usize, height as usize);
    let n = width * height * 2;
    let payload = &bytes[12..];
    if payload.len() < n * 4 {
        return Err(Error::format(format!(
            "truncated flow payload: {} bytes, expected {}",
            payload.len(),
            n * 4
        )));
    }
    let data = payload[..n * 4]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FlowField(Raster::new(width, height, data)?))
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    decode_flow(&read_bytes(path)?).map_err(|e| annotate(path, e))
}

pub fn write_flow(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_flow(flow))
}

fn annotate(path: &Path, e: Error) -> Error {
    match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// Header tokenizer shared by PFM and PGM.

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self, what: &str) -> Result<&'a str> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(format!("missing {what} in header")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::format(format!("non-ASCII {what} in header")))
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.token(what)?;
        tok.parse()
            .map_err(|_| Error::format(format!("cannot parse {what} from {tok:?}")))
    }

    /// Consumes the single whitespace byte separating header and payload.
    fn payload(self) -> Result<&'a [u8]> {
        match self.bytes.get(self.pos) {
            Some(b) if b.is_ascii_whitespace() => Ok(&self.bytes[self.pos + 1..]),
            _ => Err(Error::format("header not terminated by whitespace")),
        }
    }
}

fn dimension(h: &mut Header<'_>, what: &str) -> Result<usize> {
    let v: usize = h.number(what)?;
    if v == 0 || v > MAX_DIM {
        return Err(Error::format(format!("implausible {what} {v}")));
    }
    Ok(v)
}

// ---------------------------------------------------------------------------
// PFM

/// A decoded PFM file.
#[derive(Debug, Clone, PartialEq)]
pub enum PfmImage {
    Gray(Raster<1>),
    Color(Raster<3>),
}

fn encode_pfm_samples(tag: &str, width: usize, height: usize, channels: usize, data: &[f32]) -> Vec<u8> {
    let header = format!("{tag}\n{width} {height}\n-1.0\n");
    let mut out = Vec::with_capacity(header.len() + data.len() * 4);
    out.extend_from_slice(header.as_bytes());
    let row = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_pfm(raster: &Raster<1>) -> Vec<u8> {
    encode_pfm_samples("Pf", raster.width, raster.height, 1, &raster.data)
}

pub fn encode_pfm_color(raster: &Raster<3>) -> Vec<u8> {
    encode_pfm_samples("PF", raster.width, raster.height, 3, &raster.data)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<PfmImage> {
    let mut h = Header::new(bytes);
    let channels = match h.token("PFM magic")? {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(format!("bad PFM magic {other:?}"))),
    };
    let width = dimension(&mut h, "width")?;
    let height = dimension(&mut h, "height")?;
    let scale: f32 = h.number("scale")?;
    if !scale.is_finite() || scale == 0.0 {
        return Err(Error::format(format!("invalid PFM scale {scale}")));
    }
    let little = scale < 0.0;
    let payload = h.payload()?;
    let row = width * channels;
    let need = row * height * 4;
    if payload.len() < need {
        return Err(Error::format(format!(
            "truncated PFM payload: {} bytes, expected {need}",
            payload.len()
        )));
    }
    let mut data = vec![0f32; row * height];
    for (file_row, chunk) in payload[..need].chunks_exact(row * 4).enumerate() {
        let y = height - 1 - file_row;
        for (dst, c) in data[y * row..(y + 1) * row].iter_mut().zip(chunk.chunks_exact(4)) {
            let b: [u8; 4] = c.try_into().unwrap();
            *dst = if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    Ok(if channels == 1 {
        PfmImage::Gray(Raster::new(width, height, data)?)
    } else {
        PfmImage::Color(Raster::new(width, height, data)?)
    })
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<PfmImage> {
    let path = path.as_ref();
    decode_pfm(&read_bytes(path)?).map_err(|e| annotate(path, e))
}

/// Reads a single-channel PFM, rejecting color files.
pub fn read_pfm_gray(path: impl AsRef<Path>) -> Result<Raster<1>> {
    let path = path.as_ref();
    match read_pfm(path)? {
        PfmImage::Gray(r) => Ok(r),
        PfmImage::Color(_) => Err(Error::format(format!(
            "{}: expected a single-channel PFM",
            path.display()
        ))),
    }
}

pub fn write_pfm(raster: &Raster<1>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(raster))
}

pub fn write_pfm_color(raster: &Raster<3>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm_color(raster))
}

// ---------------------------------------------------------------------------
// PGM

pub fn decode_pgm(bytes: &[u8]) -> Result<Raster<1>> {
    let mut h = Header::new(bytes);
    let magic = h.token("PGM magic")?;
    if magic != "P5" {
        return Err(Error::format(format!("bad PGM magic {magic:?}")));
    }
    let width = dimension(&mut h, "width")?;
    let height = dimension(&mut h, "height")?;
    let maxval: u32 = h.number("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(format!("invalid PGM maxval {maxval}")));
    }
    let payload = h.payload()?;
    let n = width * height;
    let scale = maxval as f32;
    let data: Vec<f32> = if maxval < 256 {
        if payload.len() < n {
            return Err(Error::format("truncated 8-bit PGM payload"));
        }
        payload[..n].iter().map(|&b| f32::from(b) / scale).collect()
    } else {
        if payload.len() < 2 * n {
            return Err(Error::format("truncated 16-bit PGM payload"));
        }
        payload[..2 * n]
            .chunks_exact(2)
            .map(|c| f32::from(u16::from_be_bytes([c[0], c[1]])) / scale)
            .collect()
    };
    Raster::new(width, height, data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Raster<1>> {
    let path = path.as_ref();
    decode_pgm(&read_bytes(path)?).map_err(|e| annotate(path, e))
}

/// Bit depth of a written PGM.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmDepth {
    Eight,
    Sixteen,
}

/// Quantizes `[0, 1]` intensities (clamped) to a binary PGM.
pub fn encode_pgm(raster: &Raster<1>, depth: PgmDepth) -> Vec<u8> {
    let maxval: u32 = match depth {
        PgmDepth::Eight => 255,
        PgmDepth::Sixteen => 65535,
    };
    let mut out = format!("P5\n{} {}\n{maxval}\n", raster.width, raster.height).into_bytes();
    for &v in &raster.data {
        let q = (v.clamp(0.0, 1.0) * maxval as f32).round() as u32;
        match depth {
            PgmDepth::Eight => out.push(q as u8),
            PgmDepth::Sixteen => out.extend_from_slice(&(q as u16).to_be_bytes()),
        }
    }
    out
}

pub fn write_pgm(raster: &Raster<1>, depth: PgmDepth, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(raster, depth))
}

// ---------------------------------------------------------------------------
// Text formats

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_fields(line: &str, lineno: usize, expected: usize) -> Result<Vec<f64>> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::format(format!("line {lineno}: cannot parse {t:?}")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != expected {
        return Err(Error::format(format!(
            "line {lineno}: expected {expected} fields, found {}",
            vals.len()
        )));
    }
    if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
        return Err(Error::format(format!("line {lineno}: non-finite value {v}")));
    }
    Ok(vals)
}

pub fn parse_trajectory(text: &str) -> Result<Trajectory> {
    let mut entries = Vec::new();
    for (lineno, line) in data_lines(text) {
        let v = parse_fields(line, lineno, 8)?;
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        let norm = q.norm();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(Error::format(format!(
                "line {lineno}: quaternion norm {norm} is not within {QUATERNION_NORM_TOL} of 1"
            )));
        }
        let pose = RelativePose::from_quaternion(
            UnitQuaternion::from_quaternion(q),
            Vector3::new(v[1], v[2], v[3]),
        );
        entries.push((v[0], pose));
    }
    Trajectory::new(entries)
}

pub fn format_trajectory(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (t, pose) in traj.entries() {
        let p = pose.translation();
        let q = pose.quaternion();
        let q = q.quaternion();
        out.push_str(&format!(
            "{t} {} {} {} {} {} {} {}\n",
            p.x, p.y, p.z, q.i, q.j, q.k, q.w
        ));
    }
    out
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    parse_trajectory(&read_text(path)?).map_err(|e| annotate(path, e))
}

pub fn write_trajectory(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), format_trajectory(traj).as_bytes())
}

pub fn parse_intrinsics(text: &str) -> Result<Intrinsics> {
    let mut lines = data_lines(text);
    let (lineno, line) = lines
        .next()
        .ok_or_else(|| Error::format("empty intrinsics file"))?;
    let v = parse_fields(line, lineno, 6)?;
    if lines.next().is_some() {
        return Err(Error::format("intrinsics file has more than one data line"));
    }
    let dims_ok = [v[4], v[5]]
        .iter()
        .all(|d| d.fract() == 0.0 && *d >= 1.0 && *d <= MAX_DIM as f64);
    if !dims_ok {
        return Err(Error::format(format!(
            "image size {}x{} is not a positive integer pair",
            v[4], v[5]
        )));
    }
    Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize)
        .map_err(|e| Error::format(e.to_string()))
}

pub fn format_intrinsics(k: &Intrinsics) -> String {
    format!(
        "{} {} {} {} {} {}\n",
        k.fx(),
        k.fy(),
        k.cx(),
        k.cy(),
        k.width(),
        k.height()
    )
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<Intrinsics> {
    let path = path.as_ref();
    parse_intrinsics(&read_text(path)?).map_err(|e| annotate(path, e))
}

pub fn write_intrinsics(k: &Intrinsics, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), format_intrinsics(k).as_bytes())
}
