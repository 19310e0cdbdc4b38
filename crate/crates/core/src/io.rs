//! On-disk formats: measurement CSV, binary grid fields, and the byte-level
//! helpers shared with the kernel-operator file.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{DomainBox, Grid3, MeasurementSet};

pub const GRID_MAGIC: &[u8; 4] = b"MGRD";
pub const GRID_VERSION: u32 = 1;

/// Write `bytes` to a temporary file next to `path`, then rename over it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Little-endian byte sink.
#[derive(Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    /// Append the CRC32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

/// Little-endian cursor that reports short reads as corruption of `path`.
pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    /// Verify the trailing checksum and return a reader over the body.
    pub fn checked(bytes: &'a [u8], path: &'a Path, magic: &[u8; 4]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(path, "file truncated: too short for header"));
        }
        if &bytes[..4] != magic {
            return Err(Error::format(
                path,
                format!(
                    "bad magic: expected {:?}",
                    std::str::from_utf8(magic).unwrap_or("?")
                ),
            ));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(Error::format(
                path,
                "checksum mismatch (truncated or corrupt file)",
            ));
        }
        Ok(ByteReader {
            data: body,
            pos: 4,
            path,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::format(
                self.path,
                "file truncated: payload shorter than header declares",
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(self.path, "size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
    pub fn path(&self) -> &Path {
        self.path
    }
}

/// Write a per-node field in `node_index` order.
pub fn write_grid_field(path: &Path, grid: &Grid3, values: &[f64]) -> Result<()> {
    if values.len() != grid.n_nodes() {
        return Err(Error::DimensionMismatch {
            what: "grid field",
            expected: grid.n_nodes(),
            actual: values.len(),
        });
    }
    write_atomic(path, &encode_grid_field(grid, values))
}

pub fn encode_grid_field(grid: &Grid3, values: &[f64]) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(GRID_MAGIC);
    w.u32(GRID_VERSION);
    for n in grid.dims() {
        w.u32(n as u32);
    }
    let d = grid.domain;
    for v in [d.min[0], d.max[0], d.min[1], d.max[1], d.min[2], d.max[2]] {
        w.f64(v);
    }
    for v in values {
        w.f64(*v);
    }
    w.finish()
}

pub fn read_grid_field(path: &Path) -> Result<(Grid3, Vec<f64>)> {
    decode_grid_field(&read_file(path)?, path)
}

pub fn decode_grid_field(bytes: &[u8], path: &Path) -> Result<(Grid3, Vec<f64>)> {
    let mut r = ByteReader::checked(bytes, path, GRID_MAGIC)?;
    let version = r.u32()?;
    if version != GRID_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported grid version {version}"),
        ));
    }
    let (nx, ny, nz) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut b = [0.0; 6];
    for v in b.iter_mut() {
        *v = r.f64()?;
    }
    let domain = DomainBox::new([b[0], b[2], b[4]], [b[1], b[3], b[5]])
        .map_err(|e| Error::format(path, e.to_string()))?;
    let grid = Grid3::new(domain, nx, ny, nz).map_err(|e| Error::format(path, e.to_string()))?;
    let n = grid.n_nodes();
    if r.remaining() != n * 8 {
        return Err(Error::format(
            path,
            format!(
                "payload holds {} values but header declares {nx}x{ny}x{nz} = {n}",
                r.remaining() / 8
            ),
        ));
    }
    let values = r.f64s(n)?;
    Ok((grid, values))
}

pub const MEASUREMENT_HEADER: &str = "x,y,z,d";

/// `x,y,z,d` CSV with shortest round-trip float formatting.
pub fn write_measurements_csv(path: &Path, points: &[[f64; 3]], modulus: &[f64]) -> Result<()> {
    if points.len() != modulus.len() {
        return Err(Error::DimensionMismatch {
            what: "measurement CSV columns",
            expected: points.len(),
            actual: modulus.len(),
        });
    }
    let mut s = String::with_capacity(points.len() * 64);
    s.push_str(MEASUREMENT_HEADER);
    s.push('\n');
    for (p, d) in points.iter().zip(modulus) {
        s.push_str(&format!("{},{},{},{}\n", p[0], p[1], p[2], d));
    }
    write_atomic(path, s.as_bytes())
}

pub fn read_measurements_csv(path: &Path) -> Result<MeasurementSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_measurements_csv(&text, path)
}

pub fn parse_measurements_csv(text: &str, path: &Path) -> Result<MeasurementSet> {
    let err = |line: usize, msg: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MEASUREMENT_HEADER => {}
        Some((_, h)) => {
            return Err(err(
                1,
                format!("expected header `{MEASUREMENT_HEADER}`, found `{h}`"),
            ))
        }
        None => return Err(err(1, "no data rows".into())),
    }
    let mut points = Vec::new();
    let mut values = Vec::new();
    for (k, line) in lines {
        let lineno = k + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f
                .parse::<f64>()
                .map_err(|e| err(lineno, format!("cannot parse `{f}`: {e}")))?;
            if !slot.is_finite() {
                return Err(err(lineno, format!("non-finite value `{f}`")));
            }
        }
        points.push([v[0], v[1], v[2]]);
        values.push(v[3]);
    }
    if points.is_empty() {
        return Err(err(2, "no data rows".into()));
    }
    MeasurementSet::new(points, Some(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> Grid3 {
        Grid3::new(
            DomainBox::new([0.0, 0.0, -0.5], [1.0, 1.0, 0.0]).unwrap(),
            3,
            4,
            2,
        )
        .unwrap()
    }

    #[test]
    fn grid_field_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.mgrd");
        let g = grid();
        let vals: Vec<f64> = (0..g.n_nodes()).map(|j| (j as f64).sin() * 1e-3).collect();
        write_grid_field(&p, &g, &vals).unwrap();
        let (g2, v2) = read_grid_field(&p).unwrap();
        assert_eq!(g, g2);
        assert_eq!(
            vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            v2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        assert!(write_grid_field(&p, &g, &vals[1..]).is_err());

        // header declares more nodes than the payload carries
        let mut bytes = encode_grid_field(&g, &vals);
        bytes[8] = 9;
        let body = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..body]);
        bytes[body..].copy_from_slice(&crc.to_le_bytes());
        assert!(decode_grid_field(&bytes, &p)
            .unwrap_err()
            .to_string()
            .contains("declares"));

        let good = encode_grid_field(&g, &vals);
        assert!(decode_grid_field(&good[..good.len() - 9], &p).is_err());
        let mut flipped = good.clone();
        flipped[40] ^= 1;
        assert!(decode_grid_field(&flipped, &p)
            .unwrap_err()
            .to_string()
            .contains("checksum"));
        let mut magic = good;
        magic[0] = b'X';
        assert!(decode_grid_field(&magic, &p)
            .unwrap_err()
            .to_string()
            .contains("magic"));
    }

    #[test]
    fn csv_errors() {
        let p = Path::new("m.csv");
        assert!(parse_measurements_csv("", p)
            .unwrap_err()
            .to_string()
            .contains("no data rows"));
        assert!(parse_measurements_csv("x,y,z,d\n", p)
            .unwrap_err()
            .to_string()
            .contains("no data rows"));
        let e = parse_measurements_csv("x,y,z,d\n0,0,0.1,1\n0,0,0.1,NaN\n", p).unwrap_err();
        assert!(e.to_string().contains(":3:"), "{e}");
        let e = parse_measurements_csv("x,y,z,d\n0,0,0.1\n", p).unwrap_err();
        assert!(e.to_string().contains(":2:"), "{e}");
    }

    proptest! {
        #[test]
        fn csv_roundtrip(rows in prop::collection::vec(prop::array::uniform4(-1e6f64..1e6), 1..40)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.csv");
            let pts: Vec<[f64; 3]> = rows.iter().map(|r| [r[0], r[1], r[2]]).collect();
            let d: Vec<f64> = rows.iter().map(|r| r[3]).collect();
            write_measurements_csv(&p, &pts, &d).unwrap();
            let m = read_measurements_csv(&p).unwrap();
            prop_assert_eq!(m.points, pts);
            prop_assert_eq!(m.observed.unwrap(), d);
        }
    }
}
