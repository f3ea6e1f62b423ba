//! Records exchanged between pipeline stages and with the feature extractor.
//!
//! # DVTF container (version 1)
//!
//! All multi-byte fields are little-endian. Reals are IEEE-754 binary32.
//! Strings are a `u32` byte length followed by UTF-8 bytes.
//!
//! ```text
//! "DVTF"  u32 version=1  u8 kind
//! kind 0  FeatureMap  u32 grid_h  u32 grid_w  u32 channels  f32[grid_h*grid_w*channels]
//! kind 1  ViewSet     str image_id  u32 h_px  u32 w_px  u32 n_views
//!                     n_views * { u8 flip  f32 x0 y0 x1 y1  u32 out_h  u32 out_w
//!                                 u32 grid_h  u32 grid_w  u32 channels  f32[...] }
//! kind 2  LabelMap    u32 grid_h  u32 grid_w  u16[grid_h*grid_w]   (65535 = ignore)
//! kind 3  Checkpoint  u32 n_tensors
//!                     n_tensors * { str name  u32 ndim  u32[ndim] dims  f32[prod(dims)] }
//! ```
//!
//! Feature data is row-major: `h` outermost, then `w`, channels innermost.
//! Files must end exactly where the payload ends.
//!
//! # View plans
//!
//! UTF-8 text, one header line `DVT-PLAN 1 <h_px> <w_px>` then one line per
//! view: `<flip:0|1> <x0> <y0> <x1> <y1> <grid_h> <grid_w>`. Reals carry at least
//! nine decimals and at least nine significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DVTF";
pub const VERSION: u32 = 1;
pub const IGNORE_LABEL: u16 = 65535;

const KIND_FEATURE_MAP: u8 = 0;
const KIND_VIEW_SET: u8 = 1;
const KIND_LABEL_MAP: u8 = 2;
const KIND_CHECKPOINT: u8 = 3;

/// Dense `grid_h x grid_w x channels` grid of patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let map = FeatureMap {
            grid_h,
            grid_w,
            channels,
            data,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn zeros(grid_h: usize, grid_w: usize, channels: usize) -> Self {
        FeatureMap {
            grid_h,
            grid_w,
            channels,
            data: vec![0.0; grid_h * grid_w * channels],
        }
    }

    /// Builds a map from per-patch vectors stored as `f64`, row-major.
    pub fn from_f64(grid_h: usize, grid_w: usize, channels: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), grid_h * grid_w * channels);
        FeatureMap {
            grid_h,
            grid_w,
            channels,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn n_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn patch(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.grid_w + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn patch_mut(&mut self, i: usize, j: usize) -> &mut [f32] {
        let start = (i * self.grid_w + j) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Patch by flat row-major index.
    pub fn row(&self, p: usize) -> &[f32] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_h == 0 || self.grid_w == 0 || self.channels == 0 {
            return Err(Error::Validation(format!(
                "feature map dims must be positive, got {}x{}x{}",
                self.grid_h, self.grid_w, self.channels
            )));
        }
        let expected = self.grid_h * self.grid_w * self.channels;
        if self.data.len() != expected {
            return Err(Error::Validation(format!(
                "feature map data length {} != {expected}",
                self.data.len()
            )));
        }
        if let Some(p) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite feature value at index {p}"
            )));
        }
        Ok(())
    }
}

/// A crop + optional horizontal flip, in normalized original-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewTransform {
    pub flip_h: bool,
    /// `(x0, y0, x1, y1)` with `0 <= x0 < x1 <= 1` and likewise for y.
    pub crop: [f32; 4],
    pub out_grid: (usize, usize),
}

impl ViewTransform {
    pub fn identity(out_grid: (usize, usize)) -> Self {
        ViewTransform {
            flip_h: false,
            crop: [0.0, 0.0, 1.0, 1.0],
            out_grid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [x0, y0, x1, y1] = self.crop;
        let ok_axis = |a: f32, b: f32| a.is_finite() && b.is_finite() && 0.0 <= a && a < b && b <= 1.0;
        if !ok_axis(x0, x1) || !ok_axis(y0, y1) {
            return Err(Error::Validation(format!(
                "invalid crop rectangle {:?}",
                self.crop
            )));
        }
        if self.out_grid.0 == 0 || self.out_grid.1 == 0 {
            return Err(Error::Validation(format!(
                "output grid must be at least 1x1, got {:?}",
                self.out_grid
            )));
        }
        Ok(())
    }

    /// Crop area as a fraction of the original image.
    pub fn area(&self) -> f64 {
        let [x0, y0, x1, y1] = self.crop;
        (x1 as f64 - x0 as f64) * (y1 as f64 - y0 as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub image_id: String,
    /// Original image size in pixels, `(h_px, w_px)`.
    pub orig_size: (u32, u32),
    pub views: Vec<(ViewTransform, FeatureMap)>,
}

impl ViewSet {
    pub fn channels(&self) -> usize {
        self.views.first().map_or(0, |(_, m)| m.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Validation("view set has no views".into()));
        }
        let c = self.channels();
        for (i, (t, m)) in self.views.iter().enumerate() {
            t.validate()?;
            m.validate()?;
            if m.channels != c {
                return Err(Error::Validation(format!(
                    "view {i} has {} channels, expected {c}",
                    m.channels
                )));
            }
            if (m.grid_h, m.grid_w) != t.out_grid {
                return Err(Error::Validation(format!(
                    "view {i} map grid {}x{} disagrees with its transform grid {:?}",
                    m.grid_h, m.grid_w, t.out_grid
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(grid_h: usize, grid_w: usize, labels: Vec<u16>) -> Result<Self> {
        let m = LabelMap {
            grid_h,
            grid_w,
            labels,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.grid_h * self.grid_w {
            return Err(Error::Validation(format!(
                "label map length {} != {}x{}",
                self.labels.len(),
                self.grid_h,
                self.grid_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Looks up a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Validation(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape
            )));
        }
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut names: Vec<&str> = self.tensors.iter().map(|t| t.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Validation(format!("duplicate tensor name {}", w[0])));
        }
        for t in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(Error::Validation(format!(
                    "tensor {} declares {n} values but holds {}",
                    t.name,
                    t.data.len()
                )));
            }
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "tensor {} has non-finite values",
                    t.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    FeatureMap(FeatureMap),
    ViewSet(ViewSet),
    LabelMap(LabelMap),
    Checkpoint(Checkpoint),
}

impl Record {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Record::FeatureMap(_) => "FeatureMap",
            Record::ViewSet(_) => "ViewSet",
            Record::LabelMap(_) => "LabelMap",
            Record::Checkpoint(_) => "Checkpoint",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Record::FeatureMap(m) => m.validate(),
            Record::ViewSet(v) => v.validate(),
            Record::LabelMap(l) => l.validate(),
            Record::Checkpoint(c) => c.validate(),
        }
    }

    pub fn into_feature_map(self) -> Result<FeatureMap> {
        match self {
            Record::FeatureMap(m) => Ok(m),
            other => Err(Error::Format(format!(
                "expected FeatureMap, found {}",
                other.kind_name()
            ))),
        }
    }

    pub fn into_view_set(self) -> Result<ViewSet> {
        match self {
            Record::ViewSet(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected ViewSet, found {}",
                other.kind_name()
            ))),
        }
    }

    pub fn into_label_map(self) -> Result<LabelMap> {
        match self {
            Record::LabelMap(l) => Ok(l),
            other => Err(Error::Format(format!(
                "expected LabelMap, found {}",
                other.kind_name()
            ))),
        }
    }

    pub fn into_checkpoint(self) -> Result<Checkpoint> {
        match self {
            Record::Checkpoint(c) => Ok(c),
            other => Err(Error::Format(format!(
                "expected Checkpoint, found {}",
                other.kind_name()
            ))),
        }
    }
}

impl From<FeatureMap> for Record {
    fn from(m: FeatureMap) -> Self {
        Record::FeatureMap(m)
    }
}

impl From<ViewSet> for Record {
    fn from(v: ViewSet) -> Self {
        Record::ViewSet(v)
    }
}

impl From<LabelMap> for Record {
    fn from(l: LabelMap) -> Self {
        Record::LabelMap(l)
    }
}

impl From<Checkpoint> for Record {
    fn from(c: Checkpoint) -> Self {
        Record::Checkpoint(c)
    }
}

// ---------------------------------------------------------------------------
// encoding

fn dim_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Validation(format!("{what} {v} does not fit in u32")))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn dim(&mut self, v: usize, what: &str) -> Result<()> {
        self.u32(dim_u32(v, what)?);
        Ok(())
    }
    fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.dim(s.len(), "string length")?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn feature_body(&mut self, m: &FeatureMap) -> Result<()> {
        self.dim(m.grid_h, "grid_h")?;
        self.dim(m.grid_w, "grid_w")?;
        self.dim(m.channels, "channels")?;
        self.f32s(&m.data);
        Ok(())
    }
}

/// Serializes a record. Invalid records are rejected before any bytes are produced.
pub fn encode_dvtf(record: &Record) -> Result<Vec<u8>> {
    record.validate()?;
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(VERSION);
    match record {
        Record::FeatureMap(m) => {
            w.u8(KIND_FEATURE_MAP);
            w.feature_body(m)?;
        }
        Record::ViewSet(vs) => {
            w.u8(KIND_VIEW_SET);
            w.str(&vs.image_id)?;
            w.u32(vs.orig_size.0);
            w.u32(vs.orig_size.1);
            w.dim(vs.views.len(), "view count")?;
            for (t, m) in &vs.views {
                w.u8(t.flip_h as u8);
                w.f32s(&t.crop);
                w.dim(t.out_grid.0, "out_h")?;
                w.dim(t.out_grid.1, "out_w")?;
                w.feature_body(m)?;
            }
        }
        Record::LabelMap(l) => {
            w.u8(KIND_LABEL_MAP);
            w.dim(l.grid_h, "grid_h")?;
            w.dim(l.grid_w, "grid_w")?;
            for &v in &l.labels {
                w.u16(v);
            }
        }
        Record::Checkpoint(c) => {
            w.u8(KIND_CHECKPOINT);
            w.dim(c.tensors.len(), "tensor count")?;
            for t in &c.tensors {
                w.str(&t.name)?;
                w.dim(t.shape.len(), "ndim")?;
                for &d in &t.shape {
                    w.dim(d, "dim")?;
                }
                w.f32s(&t.data);
            }
        }
    }
    Ok(w.buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!(
                "truncated while reading {what} at byte {} ({} bytes needed, {} left)",
                self.pos,
                n,
                self.buf.len() - self.pos
            ))),
        }
    }
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
    fn dim(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
    /// Reads `n` f32 values, checking the byte budget before allocating.
    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| Error::Corrupt(format!("{what}: declared length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect())
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.dim(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| Error::Corrupt(format!("{what} is not valid UTF-8")))
    }
    fn feature_body(&mut self) -> Result<FeatureMap> {
        let grid_h = self.dim("grid_h")?;
        let grid_w = self.dim("grid_w")?;
        let channels = self.dim("channels")?;
        let n = grid_h
            .checked_mul(grid_w)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| Error::Corrupt("feature map dims overflow".into()))?;
        let data = self.f32s(n, "feature payload")?;
        Ok(FeatureMap {
            grid_h,
            grid_w,
            channels,
            data,
        })
    }
}

fn product(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Parses and validates a DVTF byte buffer.
pub fn decode_dvtf(bytes: &[u8]) -> Result<Record> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r
        .take(4, "magic")
        .map_err(|_| Error::Format("file shorter than the DVTF magic".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r
        .u32("version")
        .map_err(|_| Error::Format("missing version".into()))?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let kind = r
        .u8("kind")
        .map_err(|_| Error::Format("missing record kind".into()))?;
    let record = match kind {
        KIND_FEATURE_MAP => Record::FeatureMap(r.feature_body()?),
        KIND_VIEW_SET => {
            let image_id = r.str("image id")?;
            let h_px = r.u32("h_px")?;
            let w_px = r.u32("w_px")?;
            let n_views = r.dim("view count")?;
            // Each view needs at least 37 bytes; refuse absurd counts up front.
            if n_views > r.remaining() / 37 + 1 {
                return Err(Error::Corrupt(format!(
                    "view count {n_views} exceeds remaining payload"
                )));
            }
            let mut views = Vec::with_capacity(n_views);
            for _ in 0..n_views {
                let flip = r.u8("flip flag")?;
                if flip > 1 {
                    return Err(Error::Validation(format!("flip flag {flip} is not 0 or 1")));
                }
                let c = r.f32s(4, "crop")?;
                let out_h = r.dim("out_h")?;
                let out_w = r.dim("out_w")?;
                let map = r.feature_body()?;
                views.push((
                    ViewTransform {
                        flip_h: flip == 1,
                        crop: [c[0], c[1], c[2], c[3]],
                        out_grid: (out_h, out_w),
                    },
                    map,
                ));
            }
            Record::ViewSet(ViewSet {
                image_id,
                orig_size: (h_px, w_px),
                views,
            })
        }
        KIND_LABEL_MAP => {
            let grid_h = r.dim("grid_h")?;
            let grid_w = r.dim("grid_w")?;
            let n = grid_h
                .checked_mul(grid_w)
                .and_then(|n| n.checked_mul(2).map(|_| n))
                .ok_or_else(|| Error::Corrupt("label map dims overflow".into()))?;
            let raw = r.take(n * 2, "label payload")?;
            let labels = raw
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect();
            Record::LabelMap(LabelMap {
                grid_h,
                grid_w,
                labels,
            })
        }
        KIND_CHECKPOINT => {
            let n = r.dim("tensor count")?;
            if n > r.remaining() / 8 + 1 {
                return Err(Error::Corrupt(format!(
                    "tensor count {n} exceeds remaining payload"
                )));
            }
            let mut ckpt = Checkpoint::default();
            for _ in 0..n {
                let name = r.str("tensor name")?;
                let ndim = r.dim("ndim")?;
                if ndim > r.remaining() / 4 {
                    return Err(Error::Corrupt(format!("tensor {name}: ndim {ndim} too large")));
                }
                let shape = (0..ndim)
                    .map(|_| r.dim("dim"))
                    .collect::<Result<Vec<_>>>()?;
                let count = product(&shape)
                    .ok_or_else(|| Error::Corrupt(format!("tensor {name}: shape overflows")))?;
                let data = r.f32s(count, "tensor payload")?;
                ckpt.tensors.push(NamedTensor { name, shape, data });
            }
            Record::Checkpoint(ckpt)
        }
        other => return Err(Error::Format(format!("unknown record kind {other}"))),
    };
    if r.remaining() != 0 {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after payload",
            r.remaining()
        )));
    }
    record.validate()?;
    Ok(record)
}

pub fn write_dvtf(record: &Record, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dvtf(record)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dvtf(path: impl AsRef<Path>) -> Result<Record> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dvtf(&bytes)
}

// ---------------------------------------------------------------------------
// view plans

pub const PLAN_HEADER: &str = "DVT-PLAN";

/// At least nine decimals, and more below 0.1 so that nine significant
/// digits survive; any f32 then parses back exactly.
fn plan_real(v: f32) -> String {
    let a = (v as f64).abs();
    if a == 0.0 {
        return format!("{:.9}", 0.0);
    }
    let mut e = a.log10().floor() as i32;
    if 10f64.powi(e) > a {
        e -= 1;
    } else if 10f64.powi(e + 1) <= a {
        e += 1;
    }
    format!("{:.*}", (8 - e).max(9) as usize, v)
}

/// Renders a view plan. Transforms are validated first.
pub fn format_view_plan(transforms: &[ViewTransform], orig_size: (u32, u32)) -> Result<String> {
    let mut out = format!("{PLAN_HEADER} 1 {} {}\n", orig_size.0, orig_size.1);
    for t in transforms {
        t.validate()?;
        let [x0, y0, x1, y1] = t.crop;
        writeln!(
            out,
            "{} {} {} {} {} {} {}",
            t.flip_h as u8,
            plan_real(x0),
            plan_real(y0),
            plan_real(x1),
            plan_real(y1),
            t.out_grid.0,
            t.out_grid.1
        )
        .expect("writing to a String cannot fail");
    }
    Ok(out)
}

pub fn parse_view_plan(text: &str) -> Result<(Vec<ViewTransform>, (u32, u32))> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty view plan".into(),
    })?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let bad_header = || Error::Parse {
        line: 1,
        msg: format!("expected `{PLAN_HEADER} 1 <h_px> <w_px>`, got `{header}`"),
    };
    if parts.len() != 4 || parts[0] != PLAN_HEADER || parts[1] != "1" {
        return Err(bad_header());
    }
    let h_px: u32 = parts[2].parse().map_err(|_| bad_header())?;
    let w_px: u32 = parts[3].parse().map_err(|_| bad_header())?;

    let mut transforms = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", f.len())));
        }
        let flip_h = match f[0] {
            "0" => false,
            "1" => true,
            other => return Err(err(format!("flip flag must be 0 or 1, got `{other}`"))),
        };
        let mut crop = [0f32; 4];
        for (k, slot) in crop.iter_mut().enumerate() {
            *slot = f[1 + k]
                .parse::<f32>()
                .map_err(|_| err(format!("bad real `{}`", f[1 + k])))?;
        }
        let gh: usize = f[5]
            .parse()
            .map_err(|_| err(format!("bad grid height `{}`", f[5])))?;
        let gw: usize = f[6]
            .parse()
            .map_err(|_| err(format!("bad grid width `{}`", f[6])))?;
        let t = ViewTransform {
            flip_h,
            crop,
            out_grid: (gh, gw),
        };
        t.validate().map_err(|e| err(e.to_string()))?;
        transforms.push(t);
    }
    Ok((transforms, (h_px, w_px)))
}

pub fn write_view_plan(
    transforms: &[ViewTransform],
    orig_size: (u32, u32),
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = format_view_plan(transforms, orig_size)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_view_plan(path: impl AsRef<Path>) -> Result<(Vec<ViewTransform>, (u32, u32))> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_view_plan(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_map(h: usize, w: usize, c: usize) -> FeatureMap {
        let data = (0..h * w * c).map(|i| i as f32 * 0.25 - 3.0).collect();
        FeatureMap::new(h, w, c, data).unwrap()
    }

    #[test]
    fn feature_map_payload_size() {
        let m = FeatureMap::zeros(37, 37, 768);
        let bytes = encode_dvtf(&m.into()).unwrap();
        let header = 4 + 4 + 1 + 12;
        assert_eq!(bytes.len() - header, 4_205_568);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_dvtf(&ramp_map(1, 2, 3).into()).unwrap();
        assert_eq!(&bytes[..4], b"DVTF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(bytes[8], 0);
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &2u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &3u32.to_le_bytes());
        assert_eq!(&bytes[21..25], &(-3.0f32).to_le_bytes());
    }

    #[test]
    fn empty_view_set_rejected() {
        let vs = ViewSet {
            image_id: "x".into(),
            orig_size: (10, 10),
            views: vec![],
        };
        assert!(matches!(encode_dvtf(&vs.into()), Err(Error::Validation(_))));
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let mut bytes = encode_dvtf(&ramp_map(4, 4, 8).into()).unwrap();
        bytes[3] = b'X';
        assert!(matches!(decode_dvtf(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encode_dvtf(&ramp_map(4, 4, 8).into()).unwrap();
        let cut = &bytes[..bytes.len() - 7];
        assert!(matches!(decode_dvtf(cut), Err(Error::Corrupt(_))));
    }

    #[test]
    fn nan_payload_is_validation_error() {
        let mut bytes = encode_dvtf(&ramp_map(2, 2, 2).into()).unwrap();
        let off = 21 + 4 * 3;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_dvtf(&bytes), Err(Error::Validation(_))));
    }

    #[test]
    fn view_set_and_checkpoint_round_trip() {
        let vs = ViewSet {
            image_id: "img-01".into(),
            orig_size: (518, 640),
            views: vec![
                (ViewTransform::identity((2, 3)), ramp_map(2, 3, 4)),
                (
                    ViewTransform {
                        flip_h: true,
                        crop: [0.1, 0.2, 0.6, 0.9],
                        out_grid: (2, 3),
                    },
                    ramp_map(2, 3, 4),
                ),
            ],
        };
        let rec = Record::from(vs);
        assert_eq!(decode_dvtf(&encode_dvtf(&rec).unwrap()).unwrap(), rec);

        let mut ck = Checkpoint::default();
        ck.push("G", vec![4, 2, 2], vec![0.5; 16]);
        ck.push("h.0.b", vec![3], vec![1.0, 2.0, 3.0]);
        let rec = Record::from(ck);
        assert_eq!(decode_dvtf(&encode_dvtf(&rec).unwrap()).unwrap(), rec);

        let lm = LabelMap::new(2, 2, vec![0, 1, IGNORE_LABEL, 3]).unwrap();
        let rec = Record::from(lm);
        assert_eq!(decode_dvtf(&encode_dvtf(&rec).unwrap()).unwrap(), rec);
    }

    #[test]
    fn duplicate_checkpoint_names_rejected() {
        let mut ck = Checkpoint::default();
        ck.push("a", vec![1], vec![0.0]);
        ck.push("a", vec![1], vec![1.0]);
        assert!(encode_dvtf(&ck.into()).is_err());
    }

    #[test]
    fn identity_plan_line() {
        let text = format_view_plan(&[ViewTransform::identity((37, 37))], (518, 518)).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("DVT-PLAN 1 518 518"));
        assert_eq!(
            lines.next(),
            Some("0 0.000000000 0.000000000 1.000000000 1.000000000 37 37")
        );
    }

    #[test]
    fn bad_flip_flag_reports_line() {
        let text = "DVT-PLAN 1 10 10\n0 0 0 1 1 2 2\n2 0 0 1 1 2 2\n";
        match parse_view_plan(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn feature_map_round_trip_is_bit_exact(
            h in 1usize..6, w in 1usize..6, c in 1usize..9, seed in any::<u32>()
        ) {
            let data: Vec<f32> = (0..h * w * c)
                .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6)
                .collect();
            let rec = Record::from(FeatureMap::new(h, w, c, data).unwrap());
            let back = decode_dvtf(&encode_dvtf(&rec).unwrap()).unwrap();
            let (Record::FeatureMap(a), Record::FeatureMap(b)) = (&rec, &back) else { unreachable!() };
            prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        #[test]
        fn plan_round_trip_within_printed_precision(
            raw in proptest::collection::vec((any::<bool>(), 0.0f32..0.45, 0.0f32..0.45, 0.05f32..0.5, 0.05f32..0.5, 1usize..40, 1usize..40), 1..30)
        ) {
            let ts: Vec<ViewTransform> = raw.iter().map(|&(f, x0, y0, w, h, gh, gw)| ViewTransform {
                flip_h: f, crop: [x0, y0, x0 + w, y0 + h], out_grid: (gh, gw),
            }).collect();
            let text = format_view_plan(&ts, (100, 200)).unwrap();
            let (back, size) = parse_view_plan(&text).unwrap();
            prop_assert_eq!(size, (100, 200));
            prop_assert_eq!(back.len(), ts.len());
            for (a, b) in ts.iter().zip(&back) {
                prop_assert_eq!(a.flip_h, b.flip_h);
                prop_assert_eq!(a.out_grid, b.out_grid);
                for k in 0..4 {
                    prop_assert!((a.crop[k] - b.crop[k]).abs() <= 1e-9 + f32::EPSILON * a.crop[k].abs());
                }
            }
        }
    }
}
