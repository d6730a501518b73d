//! `GSETv001` container for sequences of [`FieldSet`]s.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "GSETv001"
//! header_len u64
//! header     header_len bytes of UTF-8 JSON
//! payload    time * channel * y * x float32 values, layout t,c,y,x
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{FieldSet, VariableSpec};

pub const MAGIC: &[u8; 8] = b"GSETv001";
pub const DTYPE: &str = "float32le";
pub const LAYOUT: &str = "t,c,y,x";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub time: usize,
    pub channel: usize,
    pub y: usize,
    pub x: usize,
}

impl Dims {
    pub fn frame_len(&self) -> usize {
        self.channel * self.y * self.x
    }

    pub fn payload_bytes(&self) -> u64 {
        (self.time * self.frame_len()) as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsetHeader {
    pub dims: Dims,
    pub variables: Vec<VariableSpec>,
    pub dtype: String,
    pub layout: String,
    pub dt_hours: f64,
    pub seed: u64,
    /// Time index of the first frame.
    #[serde(default)]
    pub t0: i64,
}

impl GsetHeader {
    pub fn for_sequence(seq: &[FieldSet], seed: u64) -> Result<Self> {
        let first = seq
            .first()
            .ok_or_else(|| Error::ShapeMismatch("cannot write an empty sequence".into()))?;
        let (c, y, x) = first.dims();
        for (i, fs) in seq.iter().enumerate() {
            first.compatible_with(fs)?;
            if fs.time_index != first.time_index + i as i64 {
                return Err(Error::ShapeMismatch(format!(
                    "time indices must be consecutive: frame {i} has {}",
                    fs.time_index
                )));
            }
        }
        Ok(GsetHeader {
            dims: Dims {
                time: seq.len(),
                channel: c,
                y,
                x,
            },
            variables: first.specs.clone(),
            dtype: DTYPE.into(),
            layout: LAYOUT.into(),
            dt_hours: first.dt_hours,
            seed,
            t0: first.time_index,
        })
    }
}

pub fn write_gridset(seq: &[FieldSet], seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let header = GsetHeader::for_sequence(seq, seed)?;
    write_with_header(&header, seq, path.as_ref())
}

fn write_with_header(header: &GsetHeader, seq: &[FieldSet], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let json = serde_json::to_vec(header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for fs in seq {
        // iter() walks the logical c,y,x order even for non-standard layouts
        for v in fs.values.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Random-access reader over a GSET file.
pub struct GsetReader {
    path: PathBuf,
    file: BufReader<File>,
    header: GsetHeader,
    payload_start: u64,
}

impl GsetReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = BufReader::new(File::open(&path)?);
        let total = file.get_ref().metadata()?.len();

        let mut magic = [0u8; 8];
        if file.read_exact(&mut magic).is_err() || &magic != MAGIC {
            return Err(Error::corrupt(&path, "bad magic"));
        }
        let mut len = [0u8; 8];
        file.read_exact(&mut len).map_err(|_| Error::corrupt(&path, "truncated header"))?;
        let header_len = u64::from_le_bytes(len);
        if header_len > total.saturating_sub(16) {
            return Err(Error::corrupt(&path, "header length exceeds file size"));
        }
        let mut json = vec![0u8; header_len as usize];
        file.read_exact(&mut json)?;
        let header: GsetHeader =
            serde_json::from_slice(&json).map_err(|e| Error::corrupt(&path, format!("header: {e}")))?;
        if header.dtype != DTYPE || header.layout != LAYOUT {
            return Err(Error::corrupt(
                &path,
                format!("unsupported dtype/layout {}/{}", header.dtype, header.layout),
            ));
        }
        if header.variables.len() != header.dims.channel {
            return Err(Error::corrupt(&path, "variable list does not match channel count"));
        }
        let payload_start = 16 + header_len;
        let payload = total - payload_start;
        if payload != header.dims.payload_bytes() {
            return Err(Error::ShapeMismatch(format!(
                "{}: payload is {payload} bytes, header dims {:?} need {}",
                path.display(),
                header.dims,
                header.dims.payload_bytes()
            )));
        }
        Ok(GsetReader {
            path,
            file,
            header,
            payload_start,
        })
    }

    pub fn header(&self) -> &GsetHeader {
        &self.header
    }

    pub fn len(&self) -> usize {
        self.header.dims.time
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reads frame `t` (0-based position in the file).
    pub fn read_frame(&mut self, t: usize) -> Result<FieldSet> {
        let d = self.header.dims;
        if t >= d.time {
            return Err(Error::ShapeMismatch(format!(
                "{}: frame {t} out of range ({} frames)",
                self.path.display(),
                d.time
            )));
        }
        let n = d.frame_len();
        self.file.seek(SeekFrom::Start(self.payload_start + (t * n * 4) as u64))?;
        let mut bytes = vec![0u8; n * 4];
        self.file.read_exact(&mut bytes)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let values = Array3::from_shape_vec((d.channel, d.y, d.x), data)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        FieldSet::new(
            values,
            self.header.variables.clone(),
            self.header.t0 + t as i64,
            self.header.dt_hours,
        )
    }

    pub fn read_all(&mut self) -> Result<Vec<FieldSet>> {
        (0..self.len()).map(|t| self.read_frame(t)).collect()
    }
}

pub fn read_gridset(path: impl AsRef<Path>) -> Result<(GsetHeader, Vec<FieldSet>)> {
    let mut r = GsetReader::open(path)?;
    let seq = r.read_all()?;
    Ok((r.header.clone(), seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(t: usize, c: usize, y: usize, x: usize, salt: u32) -> Vec<FieldSet> {
        let specs: Vec<_> = (0..c).map(|i| VariableSpec::new(format!("v{i}"), "u")).collect();
        (0..t)
            .map(|ti| {
                let v = Array3::from_shape_fn((c, y, x), |(ci, yi, xi)| {
                    f32::from_bits((ti * 7919 + ci * 104729 + yi * 31 + xi) as u32 ^ salt)
                });
                FieldSet::new(v, specs.clone(), 3 + ti as i64, 6.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.gset"), dir.path().join("b.gset"));
        let s = seq(2, 3, 4, 5, 0x3f00_0000);
        write_gridset(&s, 11, &a).unwrap();
        let (h, back) = read_gridset(&a).unwrap();
        assert_eq!(h.seed, 11);
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].time_index, 4);
        write_gridset(&back, 11, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_payload_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.gset");
        write_gridset(&seq(2, 1, 16, 16, 0), 0, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(GsetReader::open(&p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gset");
        write_gridset(&seq(1, 1, 16, 16, 0), 0, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(GsetReader::open(&p), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn single_frame_16x16_is_1024_payload_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.gset");
        write_gridset(&seq(1, 1, 16, 16, 0), 0, &p).unwrap();
        let r = GsetReader::open(&p).unwrap();
        assert_eq!(r.header().dims.payload_bytes(), 1024);
        let len = std::fs::metadata(&p).unwrap().len();
        assert_eq!(len - r.payload_start, 1024);
    }

    #[test]
    fn streaming_frame_matches_full_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.gset");
        let s = seq(4, 2, 16, 17, 0x4000_0000);
        write_gridset(&s, 0, &p).unwrap();
        let mut r = GsetReader::open(&p).unwrap();
        let f2 = r.read_frame(2).unwrap();
        assert_eq!(f2.values.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   s[2].values.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(r.read_frame(4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn arbitrary_bits_round_trip(t in 1usize..3, c in 1usize..3, y in 1usize..6, x in 1usize..6, salt in any::<u32>()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("p.gset");
            let s = seq(t, c, y, x, salt);
            write_gridset(&s, 1, &p).unwrap();
            let (_, back) = read_gridset(&p).unwrap();
            for (a, b) in s.iter().zip(&back) {
                let a: Vec<u32> = a.values.iter().map(|v| v.to_bits()).collect();
                let b: Vec<u32> = b.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, b);
            }
        }
    }
}
