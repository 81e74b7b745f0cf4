//! Binary containers: datasets (`MRNB`), branch checkpoints (`MRNW`) and
//! router checkpoints (`MRNR`). All integers are little-endian.

use std::path::Path;

use mrn_autograd::{ParamStore, Tensor};
use sha2::{Digest, Sha256};

use crate::error::{io_err, MrnError, Result};
use crate::glyphgen::{GlobalId, GrayImage, TextInstance};
use crate::recognizer::{BranchShape, FrameConfig, RecognizerBranch};
use crate::rehearsal::RehearsalEntry;
use crate::router::{Router, RouterKind};

pub const DATASET_MAGIC: &[u8; 4] = b"MRNB";
pub const BRANCH_MAGIC: &[u8; 4] = b"MRNW";
pub const ROUTER_MAGIC: &[u8; 4] = b"MRNR";
pub const VERSION: u16 = 1;

const FLAG_ORIGIN: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("unexpected end of file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> std::result::Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        if self.take(4)? != magic {
            return Err(format!("bad magic, expected {}", String::from_utf8_lossy(magic)));
        }
        let v = self.u16()?;
        if v != VERSION {
            return Err(format!("unsupported version {v}"));
        }
        Ok(())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn format_err(path: &Path) -> impl FnOnce(String) -> MrnError + '_ {
    move |reason| MrnError::Format {
        path: path.to_path_buf(),
        reason,
    }
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn encode_instance(out: &mut Vec<u8>, inst: &TextInstance) -> Result<()> {
    let len = u8::try_from(inst.labels.len()).map_err(|_| crate::error::contract("label sequence longer than 255"))?;
    let w = u16::try_from(inst.image.width).map_err(|_| crate::error::contract("image wider than 65535"))?;
    out.push(inst.language_id);
    out.push(len);
    out.extend_from_slice(&w.to_le_bytes());
    for &l in &inst.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for &p in &inst.image.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(())
}

fn decode_instance(r: &mut Reader, height: usize) -> std::result::Result<TextInstance, String> {
    let language_id = r.u8()?;
    let len = r.u8()? as usize;
    let width = r.u16()? as usize;
    let labels = (0..len).map(|_| r.u32()).collect::<std::result::Result<Vec<GlobalId>, _>>()?;
    let pixels = (0..height * width).map(|_| r.f32()).collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(TextInstance {
        image: GrayImage { height, width, pixels },
        labels,
        language_id,
    })
}

fn dataset_bytes<'a>(height: usize, records: impl ExactSizeIterator<Item = (&'a TextInstance, Option<u16>)>, with_origin: bool) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(if with_origin { FLAG_ORIGIN } else { 0 });
    out.extend_from_slice(&(height as u16).to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (inst, origin) in records {
        if inst.image.height != height {
            return Err(crate::error::contract("instances of mixed height"));
        }
        encode_instance(&mut out, inst)?;
        if let Some(o) = origin {
            out.extend_from_slice(&o.to_le_bytes());
        }
    }
    Ok(out)
}

/// Serialized instance list; `height` is stored once in the header.
pub fn encode_dataset(instances: &[TextInstance], height: usize) -> Result<Vec<u8>> {
    dataset_bytes(height, instances.iter().map(|i| (i, None)), false)
}

pub fn write_dataset(path: &Path, instances: &[TextInstance], height: usize) -> Result<()> {
    write_file(path, &encode_dataset(instances, height)?)
}

fn parse_dataset(bytes: &[u8]) -> std::result::Result<Vec<(TextInstance, Option<u16>)>, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(DATASET_MAGIC)?;
    let flags = r.u8()?;
    let height = r.u16()? as usize;
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let inst = decode_instance(&mut r, height)?;
        let origin = if flags & FLAG_ORIGIN != 0 { Some(r.u16()?) } else { None };
        out.push((inst, origin));
    }
    r.finish()?;
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Vec<TextInstance>, String> {
    Ok(parse_dataset(bytes)?.into_iter().map(|(i, _)| i).collect())
}

pub fn read_dataset(path: &Path) -> Result<Vec<TextInstance>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_dataset(&bytes).map_err(format_err(path))
}

/// Rehearsal memory snapshot: the dataset layout plus an origin step per record.
pub fn write_rehearsal(path: &Path, entries: &[&RehearsalEntry], height: usize) -> Result<()> {
    let bytes = dataset_bytes(height, entries.iter().map(|e| (&e.instance, Some(e.origin_step as u16))), true)?;
    write_file(path, &bytes)
}

/// `(instance, origin step)` pairs of a rehearsal snapshot.
pub fn read_rehearsal(path: &Path) -> Result<Vec<(TextInstance, usize)>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let recs = parse_dataset(&bytes).map_err(format_err(path))?;
    recs.into_iter()
        .map(|(i, o)| o.map(|o| (i, o as usize)).ok_or_else(|| format_err(path)("record without origin step".into())))
        .collect()
}

fn encode_params(out: &mut Vec<u8>, params: &ParamStore) {
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (_, name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += t.len() as u64;
    }
    for (_, _, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn decode_params(r: &mut Reader) -> std::result::Result<ParamStore, String> {
    let n = r.u32()? as usize;
    let mut index = Vec::with_capacity(n.min(1024));
    let mut expected = 0u64;
    for _ in 0..n {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| "section name is not UTF-8")?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let offset = r.u64()?;
        if offset != expected {
            return Err(format!("section {name} at offset {offset}, expected {expected}"));
        }
        expected += shape.iter().product::<usize>() as u64;
        index.push((name, shape));
    }
    let mut params = ParamStore::new();
    for (name, shape) in index {
        let len = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        params.add(name, t);
    }
    Ok(params)
}

pub fn encode_branch(b: &RecognizerBranch) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(BRANCH_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(b.language_id);
    out.push(u8::from(b.is_frozen()));
    let f = b.shape.frame;
    for v in [f.height, f.max_width, f.frames, f.stride, f.window, f.pool, b.shape.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(b.snapshot().len() as u32).to_le_bytes());
    for &id in b.snapshot() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    encode_params(&mut out, b.params());
    out
}

pub fn decode_branch(bytes: &[u8]) -> std::result::Result<RecognizerBranch, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(BRANCH_MAGIC)?;
    let language_id = r.u8()?;
    let frozen = r.u8()? != 0;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let shape = BranchShape {
        frame: FrameConfig {
            height: dims[0],
            max_width: dims[1],
            frames: dims[2],
            stride: dims[3],
            window: dims[4],
            pool: dims[5],
        },
        channels: dims[6],
    };
    let n = r.u32()? as usize;
    let snapshot = (0..n).map(|_| r.u32()).collect::<std::result::Result<Vec<_>, _>>()?;
    let params = decode_params(&mut r)?;
    r.finish()?;
    RecognizerBranch::from_parts(language_id, shape, params, snapshot, frozen).map_err(|e| e.to_string())
}

pub fn write_branch(path: &Path, b: &RecognizerBranch) -> Result<()> {
    write_file(path, &encode_branch(b))
}

pub fn read_branch(path: &Path) -> Result<RecognizerBranch> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_branch(&bytes).map_err(format_err(path))
}

pub fn encode_router(router: &Router) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(ROUTER_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match router.kind {
        RouterKind::Dm => 0,
        RouterKind::Mlp => 1,
    });
    for v in [router.domains, router.depth, router.patches, router.channels, router.hidden] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    encode_params(&mut out, router.params());
    out
}

pub fn decode_router(bytes: &[u8]) -> std::result::Result<Router, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    r.header(ROUTER_MAGIC)?;
    let kind = match r.u8()? {
        0 => RouterKind::Dm,
        1 => RouterKind::Mlp,
        k => return Err(format!("unknown router kind {k}")),
    };
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let params = decode_params(&mut r)?;
    r.finish()?;
    let [domains, depth, patches, channels, hidden] = dims;
    Router::from_parts(kind, patches, domains, channels, depth, hidden, params).map_err(|e| e.to_string())
}

pub fn write_router(path: &Path, router: &Router) -> Result<()> {
    write_file(path, &encode_router(router))
}

pub fn read_router(path: &Path) -> Result<Router> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_router(&bytes).map_err(format_err(path))
}
