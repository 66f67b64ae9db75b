//! The PGME episode container.
//!
//! Little-endian throughout: the magic `PGME`, a `u32` version, then records
//! until end of file. A record is
//!
//! ```text
//! u16 name length | name (UTF-8) | u8 dtype (0 = f32, 1 = u8) | u8 rank | u32 dims × rank | payload
//! ```
//!
//! Record names:
//!
//! | name                          | dtype | shape      |
//! |-------------------------------|-------|------------|
//! | `query.feat.S{s}.L{l}`        | f32   | (h, w, d)  |
//! | `query.clip`                  | f32   | (h, w, dt) |
//! | `query.mask` (optional)       | u8    | (H, W)     |
//! | `text.embed`                  | f32   | (dt)       |
//! | `support{k}.feat.S{s}.L{l}`   | f32   | (h, w, d)  |
//! | `support{k}.clip`             | f32   | (h, w, dt) |
//! | `support{k}.mask`             | u8    | (H, W)     |
//! | `meta.class_id`               | f32   | (1)        |
//! | `meta.image_size`             | f32   | (2)        |
//!
//! Stage, layer and shot indices are 1, 1 and 0 based respectively.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use pgma_core::episode::{Episode, FeatureStack, Level, Mask, Shot};
use pgma_core::Tensor;

pub const MAGIC: [u8; 4] = *b"PGME";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum PgmeError {
    #[error("not a PGME file (magic {0:?})")]
    MagicMismatch([u8; 4]),
    #[error("unsupported PGME version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record{}", .0.as_deref().map(|n| format!(" `{n}`")).unwrap_or_default())]
    Truncated(Option<String>),
    #[error("record `{name}` has unknown dtype {dtype}")]
    UnknownDtype { name: String, dtype: u8 },
    #[error("missing record `{0}`")]
    MissingRecord(String),
    #[error("invalid record `{name}`: {reason}")]
    InvalidRecord { name: String, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, PgmeError>;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Record {
    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self { name: name.into(), dims: dims.to_vec(), payload: Payload::F32(data) }
    }

    pub fn u8(name: impl Into<String>, dims: &[usize], data: Vec<u8>) -> Self {
        Self { name: name.into(), dims: dims.to_vec(), payload: Payload::U8(data) }
    }

    fn invalid(&self, reason: impl Into<String>) -> PgmeError {
        PgmeError::InvalidRecord { name: self.name.clone(), reason: reason.into() }
    }

    fn tensor(&self) -> Result<Tensor<f32>> {
        match &self.payload {
            Payload::F32(v) => Tensor::new(self.dims.clone(), v.clone()).map_err(|e| self.invalid(e.to_string())),
            Payload::U8(_) => Err(self.invalid("expected f32 payload")),
        }
    }

    fn mask(&self) -> Result<Mask> {
        match (&self.payload, &self.dims[..]) {
            (Payload::U8(v), &[h, w]) => Mask::new(h, w, v.clone()).map_err(|e| self.invalid(e.to_string())),
            _ => Err(self.invalid("expected a rank-2 u8 mask")),
        }
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[Record]) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for r in records {
        let name = r.name.as_bytes();
        let name_len = u16::try_from(name.len()).map_err(|_| r.invalid("name longer than 65535 bytes"))?;
        let rank = u8::try_from(r.dims.len()).map_err(|_| r.invalid("rank above 255"))?;
        if r.dims.iter().product::<usize>() != r.payload.len() {
            return Err(r.invalid("payload length does not match dims"));
        }
        w.write_all(&name_len.to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[r.payload.dtype(), rank])?;
        for &d in &r.dims {
            let d = u32::try_from(d).map_err(|_| r.invalid("dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        match &r.payload {
            Payload::F32(v) => {
                let mut buf = Vec::with_capacity(v.len() * 4);
                v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
                w.write_all(&buf)?;
            }
            Payload::U8(v) => w.write_all(v)?,
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], name: Option<&str>) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => PgmeError::Truncated(name.map(str::to_string)),
        _ => PgmeError::Io(e),
    })
}

/// Reads every record whose name passes `keep`; skipped payloads are
/// seeked over, never read.
pub fn read_records_filtered<R: Read + Seek>(mut r: R, keep: impl Fn(&str) -> bool) -> Result<Vec<Record>> {
    let end = r.seek(SeekFrom::End(0))?;
    r.seek(SeekFrom::Start(0))?;
    let mut head = [0u8; 8];
    read_exact_or(&mut r, &mut head, None)?;
    let magic: [u8; 4] = head[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(PgmeError::MagicMismatch(magic));
    }
    let version = u32::from_le_bytes(head[4..].try_into().unwrap());
    if version != VERSION {
        return Err(PgmeError::UnsupportedVersion(version));
    }
    let mut out = Vec::new();
    loop {
        let pos = r.stream_position()?;
        if pos == end {
            break;
        }
        let mut b2 = [0u8; 2];
        read_exact_or(&mut r, &mut b2, None)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact_or(&mut r, &mut name, None)?;
        let name = String::from_utf8(name).map_err(|_| PgmeError::InvalidRecord { name: "<non-utf8>".into(), reason: "name is not UTF-8".into() })?;
        read_exact_or(&mut r, &mut b2, Some(&name))?;
        let (dtype, rank) = (b2[0], b2[1] as usize);
        let width = match dtype {
            0 => 4u64,
            1 => 1,
            _ => return Err(PgmeError::UnknownDtype { name, dtype }),
        };
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b4 = [0u8; 4];
            read_exact_or(&mut r, &mut b4, Some(&name))?;
            dims.push(u32::from_le_bytes(b4) as usize);
        }
        let bytes = dims.iter().try_fold(width, |acc, &d| acc.checked_mul(d as u64)).ok_or_else(|| PgmeError::InvalidRecord { name: name.clone(), reason: "size overflow".into() })?;
        let here = r.stream_position()?;
        if end - here < bytes {
            return Err(PgmeError::Truncated(Some(name)));
        }
        if !keep(&name) {
            r.seek(SeekFrom::Current(bytes as i64))?;
            continue;
        }
        let mut raw = vec![0u8; bytes as usize];
        read_exact_or(&mut r, &mut raw, Some(&name))?;
        let payload = if dtype == 0 {
            Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        } else {
            Payload::U8(raw)
        };
        out.push(Record { name, dims, payload });
    }
    Ok(out)
}

pub fn read_records<R: Read + Seek>(r: R) -> Result<Vec<Record>> {
    read_records_filtered(r, |_| true)
}

/// How many support shots to materialize when loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Supports {
    All,
    /// The first `k` shots; a file with fewer is an error.
    First(usize),
}

fn support_index(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("support")?;
    let digits = rest.split('.').next()?;
    digits.parse().ok()
}

fn stack_records(prefix: &str, stack: &FeatureStack, out: &mut Vec<Record>) {
    for l in &stack.levels {
        out.push(Record::f32(format!("{prefix}.feat.S{}.L{}", l.stage, l.layer), l.map.shape(), l.map.data().to_vec()));
    }
    out.push(Record::f32(format!("{prefix}.clip"), stack.clip.shape(), stack.clip.data().to_vec()));
}

/// Records of an episode in canonical order.
pub fn episode_records(ep: &Episode) -> Vec<Record> {
    let mut out = Vec::new();
    out.push(Record::f32("meta.class_id", &[1], vec![ep.class_id as f32]));
    out.push(Record::f32("meta.image_size", &[2], vec![ep.query.image_size.0 as f32, ep.query.image_size.1 as f32]));
    out.push(Record::f32("text.embed", &[ep.text_embed.len()], ep.text_embed.clone()));
    stack_records("query", &ep.query, &mut out);
    if let Some(m) = &ep.query_mask {
        out.push(Record::u8("query.mask", &[m.height, m.width], m.data.clone()));
    }
    for (k, s) in ep.supports.iter().enumerate() {
        let p = format!("support{k}");
        stack_records(&p, &s.features, &mut out);
        out.push(Record::u8(format!("{p}.mask"), &[s.mask.height, s.mask.width], s.mask.data.clone()));
    }
    out
}

fn parse_level(rest: &str) -> Option<(usize, usize)> {
    let (s, l) = rest.split_once('.')?;
    let stage = s.strip_prefix('S')?.parse().ok()?;
    let layer = l.strip_prefix('L')?.parse().ok()?;
    (stage >= 1 && layer >= 1).then_some((stage, layer))
}

fn take<'a>(map: &mut BTreeMap<String, &'a Record>, name: &str) -> Result<&'a Record> {
    map.remove(name).ok_or_else(|| PgmeError::MissingRecord(name.to_string()))
}

fn build_stack(map: &mut BTreeMap<String, &Record>, prefix: &str, image_size: (usize, usize)) -> Result<FeatureStack> {
    let feat = format!("{prefix}.feat.");
    let names: Vec<String> = map.keys().filter(|n| n.starts_with(&feat)).cloned().collect();
    let mut levels = Vec::with_capacity(names.len());
    for n in names {
        let r = take(map, &n)?;
        let (stage, layer) = parse_level(&n[feat.len()..]).ok_or_else(|| r.invalid("expected a name of the form <prefix>.feat.S<stage>.L<layer>"))?;
        if r.dims.len() != 3 {
            return Err(r.invalid("feature maps must be rank 3"));
        }
        levels.push(Level { stage, layer, map: r.tensor()? });
    }
    if levels.is_empty() {
        return Err(PgmeError::MissingRecord(format!("{prefix}.feat.S1.L1")));
    }
    levels.sort_by_key(|l| (l.stage, l.layer));
    let clip = take(map, &format!("{prefix}.clip"))?;
    if clip.dims.len() != 3 {
        return Err(clip.invalid("clip map must be rank 3"));
    }
    Ok(FeatureStack { levels, clip: clip.tensor()?, image_size })
}

fn scalar_meta(map: &mut BTreeMap<String, &Record>, name: &str, n: usize) -> Result<Vec<usize>> {
    let r = take(map, name)?;
    let t = r.tensor()?;
    if t.len() != n || t.data().iter().any(|&v| v < 0.0 || v.fract() != 0.0 || !v.is_finite()) {
        return Err(r.invalid(format!("expected {n} non-negative integers")));
    }
    Ok(t.data().iter().map(|&v| v as usize).collect())
}

/// Assembles an episode from records and validates it.
pub fn episode_from_records(records: &[Record]) -> Result<Episode> {
    let mut map = BTreeMap::new();
    for r in records {
        if map.insert(r.name.clone(), r).is_some() {
            return Err(r.invalid("duplicate record"));
        }
    }
    let class_id = scalar_meta(&mut map, "meta.class_id", 1)?[0];
    let size = scalar_meta(&mut map, "meta.image_size", 2)?;
    let image_size = (size[0], size[1]);
    let text = take(&mut map, "text.embed")?;
    if text.dims.len() != 1 {
        return Err(text.invalid("text embedding must be rank 1"));
    }
    let text_embed = text.tensor()?.into_data();
    let query = build_stack(&mut map, "query", image_size)?;
    let query_mask = map.remove("query.mask").map(Record::mask).transpose()?;

    let shots = map.keys().filter_map(|n| support_index(n)).max().map_or(0, |k| k + 1);
    let mut supports = Vec::with_capacity(shots);
    for k in 0..shots {
        let mask = take(&mut map, &format!("support{k}.mask"))?.mask()?;
        let features = build_stack(&mut map, &format!("support{k}"), (mask.height, mask.width))?;
        supports.push(Shot { features, mask });
    }
    if let Some(extra) = map.keys().next() {
        return Err(PgmeError::InvalidRecord { name: extra.clone(), reason: "unrecognized record name".into() });
    }
    let ep = Episode { supports, query, query_mask, text_embed, class_id };
    ep.validate().map_err(|e| PgmeError::InvalidRecord { name: "<episode>".into(), reason: e.to_string() })?;
    Ok(ep)
}

pub fn save_episode(path: impl AsRef<Path>, ep: &Episode) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_records(f, &episode_records(ep))
}

pub fn load_episode(path: impl AsRef<Path>) -> Result<Episode> {
    load_episode_with(path, Supports::All)
}

/// Loads an episode, reading only the support records that are asked for.
pub fn load_episode_with(path: impl AsRef<Path>, supports: Supports) -> Result<Episode> {
    let f = BufReader::new(File::open(path)?);
    let records = read_records_filtered(f, |n| match (supports, support_index(n)) {
        (Supports::First(k), Some(i)) => i < k,
        _ => true,
    })?;
    let ep = episode_from_records(&records)?;
    if let Supports::First(k) = supports {
        if ep.supports.len() < k {
            return Err(PgmeError::MissingRecord(format!("support{}.mask", ep.supports.len())));
        }
    }
    Ok(ep)
}
