//! Binary parameter snapshots. Layout: the 5-byte magic "LDCV1", then one
//! record per parameter: u32 name length, UTF-8 name bytes, u32 rank,
//! u32 extents, then the raw values as little-endian f64. All integers are
//! little-endian. Round-trips are bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"LDCV1";

/// Longest accepted parameter name; guards allocation on corrupt files.
const MAX_NAME_LEN: u32 = 4096;

pub fn save(path: &Path, params: &[&Param]) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    for p in params {
        let name = p.name().as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let shape = p.value().shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in p.value().data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Reads every record in file order.
pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let fmt_err = |offset: usize, detail: &str| Error::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        detail: detail.to_string(),
    };

    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt_err(0, "bad magic, expected LDCV1"));
    }
    let mut off = MAGIC.len();
    let mut out = Vec::new();

    let read_u32 = |bytes: &[u8], off: &mut usize, what: &str| -> Result<u32> {
        if *off + 4 > bytes.len() {
            return Err(fmt_err(*off, &format!("unexpected end of file reading {what}")));
        }
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        Ok(v)
    };

    while off < bytes.len() {
        let rec_start = off;
        let name_len = read_u32(&bytes, &mut off, "name length")? as usize;
        if name_len as u32 > MAX_NAME_LEN {
            return Err(fmt_err(rec_start, "implausible name length"));
        }
        if off + name_len > bytes.len() {
            return Err(fmt_err(off, "unexpected end of file reading name"));
        }
        let name = std::str::from_utf8(&bytes[off..off + name_len])
            .map_err(|_| fmt_err(off, "parameter name is not UTF-8"))?
            .to_string();
        off += name_len;

        let rank = read_u32(&bytes, &mut off, "rank")? as usize;
        if rank > 8 {
            return Err(fmt_err(off - 4, "implausible rank"));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = read_u32(&bytes, &mut off, "extent")? as usize;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| fmt_err(off - 4, "extent product overflows"))?;
            shape.push(e);
        }
        if off + numel * 8 > bytes.len() {
            return Err(fmt_err(off, "unexpected end of file reading values"));
        }
        let mut data = Vec::with_capacity(numel);
        for k in 0..numel {
            let start = off + k * 8;
            data.push(f64::from_le_bytes(bytes[start..start + 8].try_into().unwrap()));
        }
        off += numel * 8;
        let tensor = Tensor::new(shape, data)
            .map_err(|_| fmt_err(rec_start, "non-finite value or bad shape in record"))?;
        out.push((name, tensor));
    }
    Ok(out)
}

/// Installs loaded tensors into an existing parameter collection. The name
/// sets must match exactly and every shape must agree.
pub fn restore(params: &mut [&mut Param], loaded: Vec<(String, Tensor)>) -> Result<()> {
    let mut by_name: std::collections::HashMap<String, Tensor> = loaded.into_iter().collect();
    for p in params.iter_mut() {
        let t = by_name.remove(p.name()).ok_or_else(|| {
            Error::Contract(format!("checkpoint is missing parameter '{}'", p.name()))
        })?;
        if t.shape() != p.value().shape() {
            return Err(Error::shape(
                "checkpoint::restore",
                format!(
                    "parameter '{}': model {:?} vs checkpoint {:?}",
                    p.name(),
                    p.value().shape(),
                    t.shape()
                ),
            ));
        }
        *p.value_mut() = t;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Contract(format!(
            "checkpoint contains unknown parameter '{extra}'"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn param(name: &str, shape: Vec<usize>, data: Vec<f64>) -> Param {
        Param::new(name, Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        // Values chosen to have nontrivial mantissas.
        let a = param("net.0.weight", vec![2, 2], vec![0.1, -0.2, 1.0 / 3.0, f64::MIN_POSITIVE]);
        let b = param("net.0.bias", vec![2], vec![std::f64::consts::PI, -0.0]);
        save(&path, &[&a, &b]).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "net.0.weight");
        assert_eq!(
            loaded[0].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            loaded[1].1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // Byte-for-byte stability when re-saved from the loaded copy.
        let mut a2 = param("net.0.weight", vec![2, 2], vec![0.0; 4]);
        let mut b2 = param("net.0.bias", vec![2], vec![0.0; 2]);
        restore(&mut [&mut a2, &mut b2], loaded).unwrap();
        let path2 = dir.path().join("ck2.bin");
        save(&path2, &[&a2, &b2]).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE!rest").unwrap();
        match load(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.bin");
        let p = param("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        save(&path, &[&p]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 9]).unwrap();
        match load(&path) {
            Err(Error::Format { offset, detail, .. }) => {
                assert!(offset > 0, "offset {offset}");
                assert!(detail.contains("end of file"), "{detail}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn restore_rejects_name_and_shape_mismatches() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let p = param("w", vec![2], vec![1.0, 2.0]);
        save(&path, &[&p]).unwrap();

        let mut wrong_name = param("v", vec![2], vec![0.0; 2]);
        assert!(restore(&mut [&mut wrong_name], load(&path).unwrap()).is_err());

        let mut wrong_shape = param("w", vec![2, 1], vec![0.0; 2]);
        assert!(restore(&mut [&mut wrong_shape], load(&path).unwrap()).is_err());

        let mut ok = param("w", vec![2], vec![0.0; 2]);
        let mut extra = param("extra", vec![1], vec![0.0]);
        // File lacks 'extra'.
        assert!(restore(&mut [&mut ok, &mut extra], load(&path).unwrap()).is_err());
    }
}
