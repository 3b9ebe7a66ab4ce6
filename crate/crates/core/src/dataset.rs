//! In-memory CSI datasets and the `CCD1` on-disk format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "CCD1"
//! u32 N, u32 B, u32 W, u32 C
//! u8 geometry (0 = ULA, 1 = URA), u16 rows, u16 cols
//! f64 bandwidth_hz, f64 carrier_hz
//! u8 has_ground_truth
//! N records:
//!   u32 ue_id, f64 timestamp, [f64 x, f64 y if has_ground_truth]
//!   B*W complex entries, row-major, each as f32 re, f32 im
//! ```
//!
//! ULA headers store `rows = cols = 0`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use num_complex::Complex32;

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"CCD1";

/// Antenna arrangement at the base station.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayGeometry {
    Ula,
    /// Rectangular array; antenna `b` sits at row `b / cols`, column `b % cols`.
    Ura { rows: usize, cols: usize },
}

impl ArrayGeometry {
    pub fn check_antennas(&self, antennas: usize) -> Result<()> {
        match *self {
            ArrayGeometry::Ula => Ok(()),
            ArrayGeometry::Ura { rows, cols } if rows * cols == antennas && rows > 0 => Ok(()),
            ArrayGeometry::Ura { rows, cols } => Err(Error::config(
                "array",
                format!("URA {rows}x{cols} does not match {antennas} antennas"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    /// B
    pub antennas: usize,
    /// W
    pub subcarriers: usize,
    /// C, the number of delay taps kept by the feature pipeline.
    pub cyclic_prefix: usize,
    pub geometry: ArrayGeometry,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
}

/// One CSI snapshot: a B x W complex channel matrix from a single UE.
#[derive(Debug, Clone, PartialEq)]
pub struct CsiSample {
    pub h: Array2<Complex32>,
    pub ue_id: u32,
    /// Seconds.
    pub timestamp: f64,
    /// UE position in meters, when known. Only used for evaluation.
    pub ground_truth: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<CsiSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn has_ground_truth(&self) -> bool {
        self.samples.first().is_some_and(|s| s.ground_truth.is_some())
    }

    /// Ground-truth positions, if every sample carries one.
    pub fn ground_truth(&self) -> Option<Vec<[f64; 2]>> {
        self.samples.iter().map(|s| s.ground_truth).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.timestamp).collect()
    }

    /// Sample indices grouped by UE, each list in time order.
    pub fn ue_tracks(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut tracks: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            tracks.entry(s.ue_id).or_default().push(i);
        }
        tracks
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.antennas == 0 || m.subcarriers == 0 {
            return Err(Error::Validation(format!(
                "B={} and W={} must both be at least 1",
                m.antennas, m.subcarriers
            )));
        }
        if m.cyclic_prefix == 0 || m.cyclic_prefix > m.subcarriers {
            return Err(Error::Validation(format!(
                "cyclic prefix C={} outside 1..={}",
                m.cyclic_prefix, m.subcarriers
            )));
        }
        m.geometry
            .check_antennas(m.antennas)
            .map_err(|e| Error::Validation(e.to_string()))?;
        if !(m.bandwidth_hz.is_finite() && m.carrier_hz.is_finite()) {
            return Err(Error::Validation("bandwidth and carrier must be finite".into()));
        }

        let with_truth = self.has_ground_truth();
        let mut last_time: BTreeMap<u32, f64> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.h.dim() != (m.antennas, m.subcarriers) {
                return Err(Error::Validation(format!(
                    "sample {i} has shape {:?}, expected ({}, {})",
                    s.h.dim(),
                    m.antennas,
                    m.subcarriers
                )));
            }
            if s.h.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
                return Err(Error::Validation(format!("sample {i} has non-finite CSI")));
            }
            if !(s.timestamp.is_finite() && s.timestamp >= 0.0) {
                return Err(Error::Validation(format!(
                    "sample {i} has invalid timestamp {}",
                    s.timestamp
                )));
            }
            match s.ground_truth {
                Some(p) if !with_truth || !(p[0].is_finite() && p[1].is_finite()) => {
                    return Err(Error::Validation(format!(
                        "sample {i} ground truth is inconsistent with the dataset"
                    )))
                }
                None if with_truth => {
                    return Err(Error::Validation(format!("sample {i} lacks ground truth")))
                }
                _ => {}
            }
            if let Some(&prev) = last_time.get(&s.ue_id) {
                if s.timestamp <= prev {
                    return Err(Error::Validation(format!(
                        "sample {i}: timestamps of UE {} not strictly increasing ({} after {})",
                        s.ue_id, s.timestamp, prev
                    )));
                }
            }
            last_time.insert(s.ue_id, s.timestamp);
        }
        Ok(())
    }
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Validation(format!("{what}={value} exceeds u32")))
}

fn to_u16(value: usize, what: &str) -> Result<u16> {
    u16::try_from(value).map_err(|_| Error::Validation(format!("{what}={value} exceeds u16")))
}

/// Serializes `ds` into any writer. Validation happens before the first byte is written.
pub fn encode_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    ds.validate()?;
    let m = &ds.meta;
    let (tag, rows, cols) = match m.geometry {
        ArrayGeometry::Ula => (0u8, 0u16, 0u16),
        ArrayGeometry::Ura { rows, cols } => (1u8, to_u16(rows, "rows")?, to_u16(cols, "cols")?),
    };
    let with_truth = ds.has_ground_truth();

    out.write_all(DATASET_MAGIC)?;
    out.write_all(&to_u32(ds.len(), "N")?.to_le_bytes())?;
    out.write_all(&to_u32(m.antennas, "B")?.to_le_bytes())?;
    out.write_all(&to_u32(m.subcarriers, "W")?.to_le_bytes())?;
    out.write_all(&to_u32(m.cyclic_prefix, "C")?.to_le_bytes())?;
    out.write_all(&[tag])?;
    out.write_all(&rows.to_le_bytes())?;
    out.write_all(&cols.to_le_bytes())?;
    out.write_all(&m.bandwidth_hz.to_le_bytes())?;
    out.write_all(&m.carrier_hz.to_le_bytes())?;
    out.write_all(&[u8::from(with_truth)])?;

    for s in &ds.samples {
        out.write_all(&s.ue_id.to_le_bytes())?;
        out.write_all(&s.timestamp.to_le_bytes())?;
        if let Some([x, y]) = s.ground_truth {
            out.write_all(&x.to_le_bytes())?;
            out.write_all(&y.to_le_bytes())?;
        }
        // `h` may be non-contiguous; iterate logically in row-major order.
        for z in s.h.iter() {
            out.write_all(&z.re.to_le_bytes())?;
            out.write_all(&z.im.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    ds.validate()?;
    let file = File::create(path)?;
    encode_dataset(ds, BufWriter::new(file))
}

struct Cursor<R> {
    inner: R,
    /// Record currently being parsed, for truncation messages.
    record: Option<usize>,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        match self.inner.read_exact(&mut buf) {
            Ok(()) => Ok(buf),
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => Err(Error::Format(match self.record {
                Some(i) => format!("file truncated in record {i}"),
                None => "file truncated in header".to_string(),
            })),
            Err(e) => Err(e.into()),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

/// Parses a `CCD1` stream. The result always satisfies [`Dataset::validate`].
pub fn decode_dataset<R: Read>(input: R) -> Result<Dataset> {
    let mut cur = Cursor {
        inner: input,
        record: None,
    };
    let magic: [u8; 4] = cur.bytes()?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"CCD1\"",
            String::from_utf8_lossy(&magic)
        )));
    }
    let n = cur.u32()? as usize;
    let antennas = cur.u32()? as usize;
    let subcarriers = cur.u32()? as usize;
    let cyclic_prefix = cur.u32()? as usize;
    let tag = cur.u8()?;
    let rows = cur.u16()? as usize;
    let cols = cur.u16()? as usize;
    let geometry = match tag {
        0 => ArrayGeometry::Ula,
        1 => ArrayGeometry::Ura { rows, cols },
        other => return Err(Error::Format(format!("unknown geometry tag {other}"))),
    };
    let bandwidth_hz = cur.f64()?;
    let carrier_hz = cur.f64()?;
    let with_truth = match cur.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("invalid ground-truth flag {other}"))),
    };
    if antennas == 0 || subcarriers == 0 {
        return Err(Error::Validation(format!(
            "B={antennas} and W={subcarriers} must both be at least 1"
        )));
    }

    let entries = antennas * subcarriers;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for i in 0..n {
        cur.record = Some(i);
        let ue_id = cur.u32()?;
        let timestamp = cur.f64()?;
        let ground_truth = if with_truth {
            Some([cur.f64()?, cur.f64()?])
        } else {
            None
        };
        let mut values = Vec::with_capacity(entries);
        for _ in 0..entries {
            let re = cur.f32()?;
            let im = cur.f32()?;
            values.push(Complex32::new(re, im));
        }
        let h = Array2::from_shape_vec((antennas, subcarriers), values)
            .expect("entry count matches shape");
        samples.push(CsiSample {
            h,
            ue_id,
            timestamp,
            ground_truth,
        });
    }
    let mut trailing = [0u8; 1];
    if cur.inner.read(&mut trailing)? != 0 {
        return Err(Error::Format(format!("trailing bytes after record {}", n.saturating_sub(1))));
    }

    let ds = Dataset {
        meta: DatasetMeta {
            antennas,
            subcarriers,
            cyclic_prefix,
            geometry,
            bandwidth_hz,
            carrier_hz,
        },
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = File::open(path)?;
    decode_dataset(BufReader::new(file))
}
