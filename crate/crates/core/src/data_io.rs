//! Image sets, IDX reading, the GLIM container, PGM and CSV output.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::learning::{GlimpseDataset, GlimpseRecord};
use crate::models::fa::FaModel;
use crate::models::mixture::MofaModel;
use crate::models::projected::ProjectedMixture;
use crate::retina::{build_layout, place_all, Offset, RetinaSpec};

/// Affine map applied by [`normalize`], kept for inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub src_min: f64,
    pub src_max: f64,
    pub lo: f64,
    pub hi: f64,
}

/// `count` images of `rows × cols` pixels, stored row-major one image after
/// another.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub provenance: String,
    pub normalization: Option<Normalization>,
}

impl ImageSet {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, provenance: impl Into<String>) -> Result<Self> {
        let d = rows * cols;
        if d == 0 || !data.len().is_multiple_of(d) {
            return Err(Error::InvalidArgument(format!(
                "{} values do not form whole {rows}×{cols} images",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            provenance: provenance.into(),
            normalization: None,
        })
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.pixels()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.pixels();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn image_vector(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(self.image(i))
    }

    /// `N × D` matrix with one image per row.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.count(), self.pixels(), &self.data)
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let mut data = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        ImageSet {
            rows: self.rows,
            cols: self.cols,
            data,
            provenance: self.provenance.clone(),
            normalization: self.normalization,
        }
    }
}

/// Contents of an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum Idx {
    Images(ImageSet),
    Labels(Vec<u8>),
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8).ok_or_else(|| Error::Parse {
                offset: self.pos as u64,
                message: format!("{what} length overflows"),
            })?,
            what,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.usize(what)?;
        let start = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            offset: start as u64,
            message: format!("{what} is not UTF-8"),
        })
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Parse big-endian IDX bytes (unsigned-byte images or labels).
pub fn parse_idx(bytes: &[u8], provenance: &str) -> Result<Idx> {
    let mut c = Cursor::new(bytes);
    if bytes.is_empty() {
        return c.fail("empty file");
    }
    let magic = c.u32_be("magic number")?;
    match magic {
        IDX_IMAGES => {
            let n = c.u32_be("image count")? as usize;
            let rows = c.u32_be("row count")? as usize;
            let cols = c.u32_be("column count")? as usize;
            if rows == 0 || cols == 0 {
                return c.fail("image dimensions must be positive");
            }
            let raw = c.take(n * rows * cols, "image data")?;
            if c.pos != bytes.len() {
                return c.fail(format!("{} trailing bytes", bytes.len() - c.pos));
            }
            let data = raw.iter().map(|&b| b as f64).collect();
            Ok(Idx::Images(ImageSet::new(rows, cols, data, provenance)?))
        }
        IDX_LABELS => {
            let n = c.u32_be("label count")? as usize;
            let raw = c.take(n, "label data")?;
            if c.pos != bytes.len() {
                return c.fail(format!("{} trailing bytes", bytes.len() - c.pos));
            }
            Ok(Idx::Labels(raw.to_vec()))
        }
        other => Err(Error::Parse {
            offset: 0,
            message: format!("bad IDX magic 0x{other:08x}"),
        }),
    }
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<Idx> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    parse_idx(&bytes, &path.display().to_string())
}

/// Keep the images whose label equals `digit`.
pub fn filter_label(images: &ImageSet, labels: &[u8], digit: u8) -> Result<ImageSet> {
    check_dim("label count", images.count(), labels.len())?;
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == digit).collect();
    let mut out = images.subset(&keep);
    out.provenance = format!("{} label={digit}", images.provenance);
    Ok(out)
}

/// Map the observed range of the whole set affinely onto `[lo, hi]`.
pub fn normalize(set: &ImageSet, lo: f64, hi: f64) -> Result<ImageSet> {
    if !(hi > lo) {
        return Err(Error::InvalidArgument(format!(
            "normalization needs hi > lo, got [{lo}, {hi}]"
        )));
    }
    let min = set.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = set.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let data = if max > min {
        let scale = (hi - lo) / (max - min);
        set.data.iter().map(|v| lo + (v - min) * scale).collect()
    } else {
        log::warn!("image set is constant; mapping every pixel to the midpoint");
        vec![0.5 * (lo + hi); set.data.len()]
    };
    Ok(ImageSet {
        data,
        normalization: Some(Normalization {
            src_min: min,
            src_max: max,
            lo,
            hi,
        }),
        rows: set.rows,
        cols: set.cols,
        provenance: set.provenance.clone(),
    })
}

/// Apply an existing normalization, e.g. a training set's, to another set.
pub fn normalize_with(set: &ImageSet, n: Normalization) -> Result<ImageSet> {
    if !(n.hi > n.lo) {
        return Err(Error::InvalidArgument(format!(
            "normalization needs hi > lo, got [{}, {}]",
            n.lo, n.hi
        )));
    }
    let data = if n.src_max > n.src_min {
        let scale = (n.hi - n.lo) / (n.src_max - n.src_min);
        set.data.iter().map(|v| n.lo + (v - n.src_min) * scale).collect()
    } else {
        vec![0.5 * (n.lo + n.hi); set.data.len()]
    };
    Ok(ImageSet {
        data,
        normalization: Some(n),
        rows: set.rows,
        cols: set.cols,
        provenance: set.provenance.clone(),
    })
}

/// Undo [`normalize`].
pub fn denormalize(set: &ImageSet) -> Result<ImageSet> {
    let n = set
        .normalization
        .ok_or_else(|| Error::InvalidArgument("image set carries no normalization to invert".into()))?;
    let data = if n.src_max > n.src_min {
        let scale = (n.src_max - n.src_min) / (n.hi - n.lo);
        set.data.iter().map(|v| n.src_min + (v - n.lo) * scale).collect()
    } else {
        vec![n.src_min; set.data.len()]
    };
    Ok(ImageSet {
        data,
        normalization: None,
        rows: set.rows,
        cols: set.cols,
        provenance: set.provenance.clone(),
    })
}

/// Seeded shuffle, then the first `round(N · fraction)` images go to train.
pub fn split(set: &ImageSet, train_fraction: f64, seed: u64) -> Result<(ImageSet, ImageSet)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = set.count();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (n as f64 * train_fraction).round() as usize;
    let mut train = set.subset(&order[..n_train]);
    let mut test = set.subset(&order[n_train..]);
    train.provenance = format!("{} train", set.provenance);
    test.provenance = format!("{} test", set.provenance);
    Ok((train, test))
}

/// A fitted model with everything needed to use it on glimpses.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub mixture: MofaModel,
    pub retina: RetinaSpec,
    pub rows: usize,
    pub cols: usize,
    pub offsets: Vec<Offset>,
    /// `noise_y[m][a]`; empty until y-space noise has been set.
    pub noise_y: Vec<Vec<DVector<f64>>>,
    /// Free-form JSON metadata.
    pub metadata: String,
}

impl ModelBundle {
    /// Project the mixture through every offset, using the stored y-space
    /// noise or its initial value when none is stored.
    pub fn projected(&self) -> Result<ProjectedMixture> {
        let layout = build_layout(&self.retina)?;
        let rts = place_all(&layout, self.rows, self.cols, &self.offsets);
        if self.noise_y.is_empty() {
            ProjectedMixture::with_initial_noise(self.mixture.clone(), rts)
        } else {
            ProjectedMixture::new(self.mixture.clone(), rts, self.noise_y.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Images(ImageSet),
    Glimpses(GlimpseDataset),
    Model(ModelBundle),
}

impl Payload {
    fn kind(&self) -> u16 {
        match self {
            Payload::Images(_) => 1,
            Payload::Glimpses(_) => 2,
            Payload::Model(_) => 3,
        }
    }
}

pub const GLIM_MAGIC: &[u8; 4] = b"GLIM";
pub const GLIM_VERSION: u16 = 1;

#[derive(Default)]
struct Sink {
    buf: Vec<u8>,
}

impl Sink {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.f64(*x);
        }
    }
    fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn offsets(&mut self, offsets: &[Offset]) -> Result<()> {
        self.u32(offsets.len())?;
        for o in offsets {
            self.i32(o.dr);
            self.i32(o.dc);
        }
        Ok(())
    }
}

fn encode_images(s: &mut Sink, set: &ImageSet) -> Result<()> {
    s.u32(set.count())?;
    s.u32(set.rows)?;
    s.u32(set.cols)?;
    s.string(&set.provenance)?;
    match set.normalization {
        Some(n) => {
            s.u8(1);
            s.f64s(&[n.src_min, n.src_max, n.lo, n.hi]);
        }
        None => s.u8(0),
    }
    s.f64s(&set.data);
    Ok(())
}

fn encode_glimpses(s: &mut Sink, ds: &GlimpseDataset) -> Result<()> {
    s.string(&ds.retina.to_json())?;
    s.u32(ds.rows)?;
    s.u32(ds.cols)?;
    s.offsets(&ds.offsets)?;
    s.u32(ds.records.len())?;
    for r in &ds.records {
        s.u32(r.offset_id)?;
        s.u32(r.source)?;
        s.u32(r.values.len())?;
        s.f64s(&r.values);
    }
    Ok(())
}

fn encode_model(s: &mut Sink, b: &ModelBundle) -> Result<()> {
    s.string(&b.retina.to_json())?;
    s.u32(b.rows)?;
    s.u32(b.cols)?;
    s.offsets(&b.offsets)?;
    let mix = &b.mixture;
    s.u32(mix.len())?;
    s.u32(mix.dim())?;
    s.u32(mix.latent())?;
    for (c, &w) in mix.components.iter().zip(&mix.weights) {
        s.f64(w);
        s.f64s(c.mean.as_slice());
        // row-major loadings
        s.f64s(c.loadings.transpose().as_slice());
        s.f64s(c.noise.as_slice());
    }
    s.u32(b.noise_y.len())?;
    for row in &b.noise_y {
        s.u32(row.len())?;
        for v in row {
            s.u32(v.len())?;
            s.f64s(v.as_slice());
        }
    }
    s.string(&b.metadata)?;
    Ok(())
}

/// Container bytes: header, body, CRC32 of the body.
pub fn encode_glim(payload: &Payload) -> Result<Vec<u8>> {
    let mut body = Sink::default();
    match payload {
        Payload::Images(p) => encode_images(&mut body, p)?,
        Payload::Glimpses(p) => encode_glimpses(&mut body, p)?,
        Payload::Model(p) => encode_model(&mut body, p)?,
    }
    let mut out = Vec::with_capacity(body.buf.len() + 12);
    out.extend_from_slice(GLIM_MAGIC);
    out.extend_from_slice(&GLIM_VERSION.to_le_bytes());
    out.extend_from_slice(&payload.kind().to_le_bytes());
    out.extend_from_slice(&body.buf);
    out.extend_from_slice(&crc32fast::hash(&body.buf).to_le_bytes());
    Ok(out)
}

fn decode_images(c: &mut Cursor) -> Result<ImageSet> {
    let n = c.usize("image count")?;
    let rows = c.usize("rows")?;
    let cols = c.usize("cols")?;
    let provenance = c.string("provenance")?;
    let normalization = match c.u8("normalization flag")? {
        0 => None,
        1 => {
            let v = c.f64s(4, "normalization")?;
            Some(Normalization {
                src_min: v[0],
                src_max: v[1],
                lo: v[2],
                hi: v[3],
            })
        }
        f => return c.fail(format!("bad normalization flag {f}")),
    };
    if rows == 0 || cols == 0 {
        return c.fail("image dimensions must be positive");
    }
    let data = c.f64s(n * rows * cols, "pixel data")?;
    Ok(ImageSet {
        rows,
        cols,
        data,
        provenance,
        normalization,
    })
}

fn decode_offsets(c: &mut Cursor) -> Result<Vec<Offset>> {
    let n = c.usize("offset count")?;
    (0..n)
        .map(|_| Ok(Offset::new(c.i32("offset row")?, c.i32("offset col")?)))
        .collect()
}

fn decode_retina(c: &mut Cursor) -> Result<RetinaSpec> {
    let start = c.pos;
    let json = c.string("retina spec")?;
    RetinaSpec::from_json(&json).map_err(|e| Error::Parse {
        offset: start as u64,
        message: format!("retina spec: {e}"),
    })
}

fn decode_glimpses(c: &mut Cursor) -> Result<GlimpseDataset> {
    let retina = decode_retina(c)?;
    let rows = c.usize("rows")?;
    let cols = c.usize("cols")?;
    let offsets = decode_offsets(c)?;
    let n = c.usize("record count")?;
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let offset_id = c.usize("record offset")?;
        let source = c.usize("record source")?;
        let len = c.usize("record length")?;
        if offset_id >= offsets.len() {
            return c.fail(format!("record offset id {offset_id} out of range"));
        }
        records.push(GlimpseRecord {
            offset_id,
            source,
            values: c.f64s(len, "record values")?,
        });
    }
    Ok(GlimpseDataset {
        retina,
        rows,
        cols,
        offsets,
        records,
    })
}

fn decode_model(c: &mut Cursor) -> Result<ModelBundle> {
    let retina = decode_retina(c)?;
    let rows = c.usize("rows")?;
    let cols = c.usize("cols")?;
    let offsets = decode_offsets(c)?;
    let m = c.usize("component count")?;
    let d = c.usize("dimension")?;
    let k = c.usize("latent dimension")?;
    let mut comps = Vec::with_capacity(m);
    let mut weights = Vec::with_capacity(m);
    for _ in 0..m {
        weights.push(c.f64("weight")?);
        let mean = DVector::from_vec(c.f64s(d, "mean")?);
        let loadings = DMatrix::from_row_slice(d, k, &c.f64s(d * k, "loadings")?);
        let noise = DVector::from_vec(c.f64s(d, "noise")?);
        comps.push(FaModel { mean, loadings, noise });
    }
    let start = c.pos;
    let mixture = MofaModel {
        components: comps,
        weights,
    };
    mixture.validate().map_err(|e| Error::Parse {
        offset: start as u64,
        message: format!("invalid model: {e}"),
    })?;
    let nm = c.usize("noise table components")?;
    let mut noise_y = Vec::with_capacity(nm);
    for _ in 0..nm {
        let na = c.usize("noise table offsets")?;
        let mut row = Vec::with_capacity(na);
        for _ in 0..na {
            let len = c.usize("noise length")?;
            row.push(DVector::from_vec(c.f64s(len, "noise values")?));
        }
        noise_y.push(row);
    }
    let metadata = c.string("metadata")?;
    Ok(ModelBundle {
        mixture,
        retina,
        rows,
        cols,
        offsets,
        noise_y,
        metadata,
    })
}

pub fn decode_glim(bytes: &[u8]) -> Result<Payload> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4, "magic")?;
    if magic != GLIM_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not a GLIM file (bad magic)".into(),
        });
    }
    let version = c.u16("version")?;
    if version != GLIM_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported GLIM version {version}"),
        });
    }
    let kind = c.u16("payload kind")?;
    if bytes.len() < 12 {
        return c.fail("truncated GLIM file: no checksum");
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[8..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut body = Cursor {
        bytes: &bytes[..body_end],
        pos: 8,
    };
    let payload = match kind {
        1 => Payload::Images(decode_images(&mut body)?),
        2 => Payload::Glimpses(decode_glimpses(&mut body)?),
        3 => Payload::Model(decode_model(&mut body)?),
        k => {
            return Err(Error::Parse {
                offset: 6,
                message: format!("unknown GLIM payload kind {k}"),
            })
        }
    };
    if body.pos != body_end {
        return body.fail(format!("{} unread bytes before the checksum", body_end - body.pos));
    }
    Ok(payload)
}

pub fn write_glim(path: impl AsRef<Path>, payload: &Payload) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_glim(payload)?).map_err(Error::io(path))
}

pub fn read_glim(path: impl AsRef<Path>) -> Result<Payload> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_glim(&bytes)
}

/// P5 bytes for an image with values in `[−1, 1]`; missing pixels are white.
pub fn encode_pgm(rows: usize, cols: usize, values: &[f64], missing: Option<&[bool]>) -> Result<Vec<u8>> {
    check_dim("pgm pixels", rows * cols, values.len())?;
    if let Some(m) = missing {
        check_dim("pgm missing mask", rows * cols, m.len())?;
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    for (i, v) in values.iter().enumerate() {
        let byte = if missing.is_some_and(|m| m[i]) {
            255
        } else {
            ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
        };
        out.push(byte);
    }
    Ok(out)
}

pub fn write_pgm(
    path: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    values: &[f64],
    missing: Option<&[bool]>,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pgm(rows, cols, values, missing)?).map_err(Error::io(path))
}

/// Linear rescale of `values` onto `[−1, 1]` (for variance panels).
pub fn stretch(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| 2.0 * (v - min) / (max - min) - 1.0).collect()
}

pub fn write_csv<S: AsRef<str>>(path: impl AsRef<Path>, header: &[S], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header.iter().map(|h| h.as_ref()))?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(Error::io(path))?;
    Ok(())
}
