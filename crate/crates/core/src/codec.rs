//! Little-endian binary helpers and content digests shared by the artifact formats.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8], kind: &'static str) -> Result<()> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(kind, "truncated header"))?;
    if buf != magic {
        return Err(Error::format(kind, "bad magic"));
    }
    Ok(())
}

pub(crate) fn write_str16(w: &mut impl Write, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::InvalidArgument(format!("id longer than 65535 bytes: {s:.40}…")))?;
    w.write_u16::<LE>(len)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn write_str32(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_utf8(r: &mut impl Read, len: usize, kind: &'static str) -> Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(kind, "truncated string"))?;
    String::from_utf8(buf).map_err(|_| Error::format(kind, "invalid UTF-8"))
}

pub(crate) fn read_str16(r: &mut impl Read, kind: &'static str) -> Result<String> {
    let len = r
        .read_u16::<LE>()
        .map_err(|_| Error::format(kind, "truncated string length"))?;
    read_utf8(r, len as usize, kind)
}

pub(crate) fn read_str32(r: &mut impl Read, kind: &'static str) -> Result<String> {
    let len = r
        .read_u32::<LE>()
        .map_err(|_| Error::format(kind, "truncated string length"))?;
    read_utf8(r, len as usize, kind)
}

pub(crate) fn write_opt_str32(w: &mut impl Write, s: Option<&str>) -> Result<()> {
    match s {
        Some(s) => {
            w.write_u8(1)?;
            write_str32(w, s)
        }
        None => Ok(w.write_u8(0)?),
    }
}

pub(crate) fn read_opt_str32(r: &mut impl Read, kind: &'static str) -> Result<Option<String>> {
    match read_u8(r, kind)? {
        0 => Ok(None),
        1 => Ok(Some(read_str32(r, kind)?)),
        t => Err(Error::format(kind, format!("bad option tag {t}"))),
    }
}

pub(crate) fn read_u8(r: &mut impl Read, kind: &'static str) -> Result<u8> {
    r.read_u8().map_err(|_| Error::format(kind, "truncated"))
}

pub(crate) fn read_u16(r: &mut impl Read, kind: &'static str) -> Result<u16> {
    r.read_u16::<LE>().map_err(|_| Error::format(kind, "truncated"))
}

pub(crate) fn read_u32(r: &mut impl Read, kind: &'static str) -> Result<u32> {
    r.read_u32::<LE>().map_err(|_| Error::format(kind, "truncated"))
}

pub(crate) fn read_u64(r: &mut impl Read, kind: &'static str) -> Result<u64> {
    r.read_u64::<LE>().map_err(|_| Error::format(kind, "truncated"))
}

pub(crate) fn read_i64(r: &mut impl Read, kind: &'static str) -> Result<i64> {
    r.read_i64::<LE>().map_err(|_| Error::format(kind, "truncated"))
}

pub(crate) fn read_f64(r: &mut impl Read, kind: &'static str) -> Result<f64> {
    r.read_f64::<LE>().map_err(|_| Error::format(kind, "truncated"))
}

pub(crate) fn write_f32s(w: &mut impl Write, xs: &[f32]) -> Result<()> {
    for &x in xs {
        w.write_f32::<LE>(x)?;
    }
    Ok(())
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize, kind: &'static str) -> Result<Vec<f32>> {
    let mut out = vec![0f32; n];
    r.read_f32_into::<LE>(&mut out)
        .map_err(|_| Error::format(kind, "truncated float block"))?;
    Ok(out)
}

pub(crate) fn write_f64s(w: &mut impl Write, xs: &[f64]) -> Result<()> {
    for &x in xs {
        w.write_f64::<LE>(x)?;
    }
    Ok(())
}

pub(crate) fn read_f64s(r: &mut impl Read, n: usize, kind: &'static str) -> Result<Vec<f64>> {
    let mut out = vec![0f64; n];
    r.read_f64_into::<LE>(&mut out)
        .map_err(|_| Error::format(kind, "truncated float block"))?;
    Ok(out)
}
