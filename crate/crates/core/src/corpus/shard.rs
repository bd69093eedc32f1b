use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{LabBag, MaskedTruth};
use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"LBSH";
pub const SHARD_VERSION: u8 = 0x01;
pub const SHARD_EXTENSION: &str = "lbsh";

const FLAG_NULL: u8 = 0b01;
const FLAG_MASKED: u8 = 0b10;
const ELEMENT_BYTES: usize = 4 + 8 + 1;
const TRUTH_BYTES: usize = 4 + 4 + 8 + 1;

fn encode(bag: &LabBag, out: &mut Vec<u8>) {
    out.extend_from_slice(&(bag.len() as u32).to_le_bytes());
    out.extend_from_slice(&(bag.truths.len() as u32).to_le_bytes());
    for i in 0..bag.len() {
        out.extend_from_slice(&bag.tokens[i].to_le_bytes());
        out.extend_from_slice(&bag.values[i].to_le_bytes());
        let mut flags = 0;
        if bag.nulls[i] {
            flags |= FLAG_NULL;
        }
        if bag.is_masked(i) {
            flags |= FLAG_MASKED;
        }
        out.push(flags);
    }
    for t in &bag.truths {
        out.extend_from_slice(&(t.position as u32).to_le_bytes());
        out.extend_from_slice(&t.token.to_le_bytes());
        out.extend_from_slice(&t.value.to_le_bytes());
        out.push(u8::from(t.null));
    }
}

/// Sequential writer for one shard file.
pub struct ShardWriter {
    out: BufWriter<File>,
    records: usize,
    buf: Vec<u8>,
}

impl ShardWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(SHARD_MAGIC)?;
        out.write_all(&[SHARD_VERSION])?;
        Ok(Self {
            out,
            records: 0,
            buf: Vec::new(),
        })
    }

    pub fn write(&mut self, bag: &LabBag) -> Result<()> {
        bag.validate()?;
        self.buf.clear();
        encode(bag, &mut self.buf);
        let len = u32::try_from(self.buf.len()).map_err(|_| Error::data("bag too large for a shard record"))?;
        self.out.write_all(&len.to_le_bytes())?;
        self.out.write_all(&self.buf)?;
        self.records += 1;
        Ok(())
    }

    pub fn records(&self) -> usize {
        self.records
    }

    pub fn finish(mut self) -> Result<usize> {
        self.out.flush()?;
        Ok(self.records)
    }
}

/// Writes `bags` into `dir` as `shard-NNNNN.lbsh` files of at most
/// `shard_size` records each. Returns the written paths.
pub fn write_shards(bags: &[LabBag], dir: &Path, shard_size: usize) -> Result<Vec<PathBuf>> {
    if shard_size == 0 {
        return Err(Error::config("shard size must be at least 1"));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, chunk) in bags.chunks(shard_size).enumerate() {
        let path = dir.join(format!("shard-{i:05}.{SHARD_EXTENSION}"));
        let mut w = ShardWriter::create(&path)?;
        for bag in chunk {
            w.write(bag)?;
        }
        w.finish()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Shard files in `dir`, sorted by name. A missing directory has none.
pub fn shard_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == SHARD_EXTENSION))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Every bag of every shard in `dir`, in file then record order.
pub fn read_shards(dir: &Path) -> Result<Vec<LabBag>> {
    let mut out = Vec::new();
    for p in shard_paths(dir)? {
        out.extend(read_shard_file(&p)?);
    }
    Ok(out)
}

pub fn read_shard_file(path: &Path) -> Result<Vec<LabBag>> {
    decode_shard(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
    record: usize,
}

impl<'a> Cursor<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            record: self.record,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.end - self.pos < n {
            return Err(self.fail(format!("truncated: needed {n} bytes, {} remain", self.end - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub(crate) fn decode_shard(bytes: &[u8]) -> Result<Vec<LabBag>> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        end: bytes.len(),
        record: 0,
    };
    if c.take(4).map_err(|_| c.fail("missing magic"))? != SHARD_MAGIC {
        c.pos = 0;
        return Err(c.fail("bad magic"));
    }
    let version = c.u8()?;
    if version != SHARD_VERSION {
        c.pos -= 1;
        return Err(c.fail(format!("unsupported version {version}")));
    }
    let mut bags = Vec::new();
    while c.pos < bytes.len() {
        c.end = bytes.len();
        let len = c.u32()? as usize;
        let start = c.pos;
        if bytes.len() - start < len {
            return Err(c.fail(format!("record declares {len} bytes but {} remain", bytes.len() - start)));
        }
        c.end = start + len;
        let bag = decode_record(&mut c)?;
        if c.pos != c.end {
            return Err(c.fail(format!("{} trailing bytes in record", c.end - c.pos)));
        }
        bags.push(bag);
        c.record += 1;
    }
    Ok(bags)
}

fn decode_record(c: &mut Cursor<'_>) -> Result<LabBag> {
    let l = c.u32()? as usize;
    let n_mask = c.u32()? as usize;
    let need = l
        .checked_mul(ELEMENT_BYTES)
        .and_then(|a| n_mask.checked_mul(TRUTH_BYTES).and_then(|b| a.checked_add(b)));
    if need != Some(c.end - c.pos) {
        return Err(c.fail(format!("record length does not fit L={l}, n_mask={n_mask}")));
    }
    let mut bag = LabBag {
        tokens: Vec::with_capacity(l),
        values: Vec::with_capacity(l),
        nulls: Vec::with_capacity(l),
        truths: Vec::with_capacity(n_mask),
    };
    let mut masked = vec![false; l];
    for (i, is_masked) in masked.iter_mut().enumerate() {
        bag.tokens.push(c.u32()?);
        let v = c.f64()?;
        if !v.is_finite() {
            return Err(c.fail(format!("non-finite value at position {i}")));
        }
        bag.values.push(v);
        let flags = c.u8()?;
        if flags & !(FLAG_NULL | FLAG_MASKED) != 0 {
            return Err(c.fail(format!("unknown flag bits {flags:#04x}")));
        }
        bag.nulls.push(flags & FLAG_NULL != 0);
        *is_masked = flags & FLAG_MASKED != 0;
    }
    for _ in 0..n_mask {
        let position = c.u32()? as usize;
        let token = c.u32()?;
        let value = c.f64()?;
        let null = match c.u8()? {
            0 => false,
            1 => true,
            b => return Err(c.fail(format!("bad truth null byte {b}"))),
        };
        if position >= l || !masked[position] {
            return Err(c.fail(format!("truth position {position} is not a masked position")));
        }
        bag.truths.push(MaskedTruth {
            position,
            token,
            value,
            null,
        });
    }
    if masked.iter().filter(|&&m| m).count() != n_mask {
        return Err(c.fail("masked flags disagree with truth count"));
    }
    bag.validate().map_err(|e| c.fail(e.to_string()))?;
    Ok(bag)
}
