//! Binary dataset container (`OCKD`): header, room spec, then fixed-layout
//! little-endian sample records. Roundtrips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{CkmError, Result};
use crate::oracle::RoomSpec;
use crate::vec3::Vec3;

pub const DATASET_MAGIC: &[u8; 4] = b"OCKD";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSplit {
    Train,
    Test,
}

/// One supervision record.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySample {
    pub split: SampleSplit,
    pub p_tx: Vec3,
    pub p_rx: Vec3,
    pub freq_hz: f64,
    pub gain_db: f64,
    /// Linear power, row-major V x Z.
    pub spectrum: Vec<f32>,
    /// Gains of orders 0..=max_bounce when stored.
    pub order_gains_db: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub v_bins: usize,
    pub z_bins: usize,
    pub array_rows: usize,
    pub array_cols: usize,
    pub room: RoomSpec,
    pub samples: Vec<QuerySample>,
}

impl Dataset {
    pub fn n_antennas(&self) -> usize {
        self.array_rows * self.array_cols
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &QuerySample> {
        self.samples.iter().filter(|s| s.split == SampleSplit::Train)
    }

    pub fn test_samples(&self) -> impl Iterator<Item = &QuerySample> {
        self.samples.iter().filter(|s| s.split == SampleSplit::Test)
    }
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        self.out.write_all(&[v])?;
        Ok(())
    }
    fn u16(&mut self, v: u16) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn f32(&mut self, v: f32) -> Result<()> {
        self.out.write_all(&v.to_le_bytes())?;
        Ok(())
    }
    fn vec3(&mut self, v: Vec3) -> Result<()> {
        for x in v {
            self.f64(x)?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inp: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inp
            .read_exact(&mut buf)
            .map_err(|_| CkmError::Format("truncated dataset file".into()))?;
        Ok(buf)
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
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }
    fn vec3(&mut self) -> Result<Vec3> {
        Ok([self.f64()?, self.f64()?, self.f64()?])
    }
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = Writer { out: std::io::BufWriter::new(file) };
    w.out.write_all(DATASET_MAGIC)?;
    w.u16(DATASET_VERSION)?;
    w.u32(data.v_bins as u32)?;
    w.u32(data.z_bins as u32)?;
    w.u32(data.array_rows as u32)?;
    w.u32(data.array_cols as u32)?;
    w.u32(data.samples.len() as u32)?;
    w.vec3(data.room.extents)?;
    for r in data.room.reflections {
        w.f64(r)?;
    }
    w.u32(data.room.max_bounce as u32)?;
    let with_orders = data.samples.iter().all(|s| s.order_gains_db.is_some());
    w.u8(u8::from(with_orders))?;
    for s in &data.samples {
        w.u8(match s.split {
            SampleSplit::Train => 0,
            SampleSplit::Test => 1,
        })?;
        w.vec3(s.p_tx)?;
        w.vec3(s.p_rx)?;
        w.f64(s.freq_hz)?;
        w.f64(s.gain_db)?;
        if with_orders {
            let gains = s.order_gains_db.as_ref().expect("checked above");
            w.u8(gains.len() as u8)?;
            for g in gains {
                w.f64(*g)?;
            }
        }
        debug_assert_eq!(s.spectrum.len(), data.v_bins * data.z_bins);
        for v in &s.spectrum {
            w.f32(*v)?;
        }
    }
    w.out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let mut r = Reader { inp: std::io::BufReader::new(file) };
    let magic: [u8; 4] = r.bytes()?;
    if &magic != DATASET_MAGIC {
        return Err(CkmError::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(CkmError::Format(format!("unsupported dataset version {version}")));
    }
    let v_bins = r.u32()? as usize;
    let z_bins = r.u32()? as usize;
    let array_rows = r.u32()? as usize;
    let array_cols = r.u32()? as usize;
    let count = r.u32()? as usize;
    let extents = r.vec3()?;
    let mut reflections = [0.0; 6];
    for x in reflections.iter_mut() {
        *x = r.f64()?;
    }
    let max_bounce = r.u32()? as usize;
    let with_orders = r.u8()? != 0;
    let room = RoomSpec { extents, reflections, max_bounce };
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let split = match r.u8()? {
            0 => SampleSplit::Train,
            1 => SampleSplit::Test,
            other => return Err(CkmError::Format(format!("bad split tag {other}"))),
        };
        let p_tx = r.vec3()?;
        let p_rx = r.vec3()?;
        let freq_hz = r.f64()?;
        let gain_db = r.f64()?;
        let order_gains_db = if with_orders {
            let n = r.u8()? as usize;
            let mut gains = Vec::with_capacity(n);
            for _ in 0..n {
                gains.push(r.f64()?);
            }
            Some(gains)
        } else {
            None
        };
        let mut spectrum = Vec::with_capacity(v_bins * z_bins);
        for _ in 0..v_bins * z_bins {
            spectrum.push(r.f32()?);
        }
        samples.push(QuerySample { split, p_tx, p_rx, freq_hz, gain_db, spectrum, order_gains_db });
    }
    // trailing garbage means the header count was wrong
    let mut probe = [0u8; 1];
    match r.inp.read(&mut probe) {
        Ok(0) => {}
        Ok(_) => return Err(CkmError::Format("trailing bytes after final record".into())),
        Err(e) => return Err(CkmError::Io(e)),
    }
    Ok(Dataset { v_bins, z_bins, array_rows, array_cols, room, samples })
}
