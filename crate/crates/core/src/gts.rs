//! The GTS binary container and CSV import.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "GTS1"            4 bytes magic
//! d                 u8
//! dims              d x u32
//! T                 u32
//! values            T * prod(dims) x f64, time-major, column-major within a frame
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{LiarError, Result};
use crate::grid::{GridSeries, Shape};

pub const MAGIC: &[u8; 4] = b"GTS1";

pub fn encode_gts(series: &GridSeries) -> Result<Vec<u8>> {
    let dims = series.shape().dims();
    if dims.len() > u8::MAX as usize {
        return Err(LiarError::Size(format!("{} dimensions exceed u8", dims.len())));
    }
    let mut out = Vec::with_capacity(9 + 4 * dims.len() + 8 * series.values().len());
    out.extend_from_slice(MAGIC);
    out.push(dims.len() as u8);
    for &n in dims {
        let n = u32::try_from(n).map_err(|_| LiarError::Size(format!("dimension {n} exceeds u32")))?;
        out.extend_from_slice(&n.to_le_bytes());
    }
    let t = u32::try_from(series.t_len())
        .map_err(|_| LiarError::Size(format!("T = {} exceeds u32", series.t_len())))?;
    out.extend_from_slice(&t.to_le_bytes());
    for v in series.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_gts(bytes: &[u8]) -> Result<GridSeries> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(LiarError::format(0, format!("bad magic {magic:?}, expected \"GTS1\"")));
    }
    let d = cur.take(1, "dimension count")?[0] as usize;
    if d == 0 {
        return Err(LiarError::format(4, "dimension count is 0"));
    }
    let mut dims = Vec::with_capacity(d);
    for j in 0..d {
        let at = cur.pos as u64;
        let n = cur.u32(&format!("dims[{j}]"))? as usize;
        if n == 0 {
            return Err(LiarError::format(at, format!("dims[{j}] is 0")));
        }
        dims.push(n);
    }
    let t_at = cur.pos as u64;
    let t_len = cur.u32("T")? as usize;
    if t_len == 0 {
        return Err(LiarError::format(t_at, "T is 0"));
    }
    let shape = Shape::new(dims).map_err(|e| LiarError::format(5, format!("dim overflow: {e}")))?;
    let count = shape
        .len()
        .checked_mul(t_len)
        .filter(|c| c.checked_mul(8).is_some())
        .ok_or_else(|| LiarError::format(t_at, "dim overflow: payload size overflows"))?;
    let payload_at = cur.pos;
    let need = count * 8;
    if bytes.len() - payload_at < need {
        return Err(LiarError::format(
            bytes.len() as u64,
            format!(
                "truncated payload: need {need} bytes of values from offset {payload_at}, have {}",
                bytes.len() - payload_at
            ),
        ));
    }
    if bytes.len() - payload_at > need {
        return Err(LiarError::format(
            (payload_at + need) as u64,
            "trailing bytes after payload",
        ));
    }
    let mut values = Vec::with_capacity(count);
    for (k, chunk) in bytes[payload_at..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        if !v.is_finite() {
            return Err(LiarError::format(
                (payload_at + 8 * k) as u64,
                format!("non-finite value {v}"),
            ));
        }
        values.push(v);
    }
    GridSeries::new(shape, t_len, values)
}

pub fn read_gts(path: impl AsRef<Path>) -> Result<GridSeries> {
    decode_gts(&fs::read(path)?)
}

pub fn write_gts(series: &GridSeries, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_gts(series)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(LiarError::format(
                self.pos as u64,
                format!("truncated header: missing {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

/// Parses a CSV of stacked matrix frames: `T * rows` lines of `cols`
/// comma-separated numbers, frame `t` occupying lines `t*rows .. (t+1)*rows`.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_csv_frames(text: &str, rows: usize) -> Result<GridSeries> {
    if rows == 0 {
        return Err(LiarError::Config("rows per frame must be positive".into()));
    }
    let mut lines: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let row = trimmed
            .split(',')
            .map(|f| {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| LiarError::format(start, format!("cannot parse {f:?}")))?;
                if !v.is_finite() {
                    return Err(LiarError::format(start, format!("non-finite value {v}")));
                }
                Ok(v)
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = lines.first() {
            if first.len() != row.len() {
                return Err(LiarError::format(
                    start,
                    format!("row has {} columns, expected {}", row.len(), first.len()),
                ));
            }
        }
        lines.push(row);
    }
    if lines.is_empty() || !lines.len().is_multiple_of(rows) {
        return Err(LiarError::format(
            offset,
            format!("{} data rows is not a multiple of {rows}", lines.len()),
        ));
    }
    let cols = lines[0].len();
    let t_len = lines.len() / rows;
    let mut values = Vec::with_capacity(t_len * rows * cols);
    for frame in lines.chunks_exact(rows) {
        for c in 0..cols {
            for row in frame {
                values.push(row[c]);
            }
        }
    }
    GridSeries::new(Shape::matrix(rows, cols)?, t_len, values)
}

pub fn read_csv_frames(path: impl AsRef<Path>, rows: usize) -> Result<GridSeries> {
    parse_csv_frames(&fs::read_to_string(path)?, rows)
}
