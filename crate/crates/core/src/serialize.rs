//! Versioned little-endian binary blobs.
//!
//! Mixture blob layout:
//!
//! ```text
//! "SDMM" | version u32 | spheres u32 | euclid u32 | K u32
//! K x { weight f64 | spheres x (x, y, z) f64 | euclid x f64 | dim x dim f64 (row-major covariance) }
//! ```

use crate::error::{Error, Result};
use crate::gaussian::{Layout, TangentGaussian};
use crate::geometry::UnitVec3;
use crate::linalg::MatD;
use crate::mixture::Sdmm;

pub const MIXTURE_MAGIC: &[u8; 4] = b"SDMM";
pub const MIXTURE_VERSION: u32 = 1;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Length-prefixed nested blob.
    pub fn blob(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.bytes(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect(&mut self, magic: &[u8]) -> Result<()> {
        let got = self.take(magic.len())?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn blob(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn write_mixture(w: &mut Writer, m: &Sdmm) {
    let layout = m.layout();
    w.bytes(MIXTURE_MAGIC);
    w.u32(MIXTURE_VERSION);
    w.u32(layout.spheres as u32);
    w.u32(layout.euclid as u32);
    w.u32(m.len() as u32);
    let d = layout.dim();
    for (c, wt) in m.components().iter().zip(m.weights()) {
        w.f64(*wt);
        for s in 0..layout.spheres {
            let v = c.dir_mean(s);
            w.f64(v.x());
            w.f64(v.y());
            w.f64(v.z());
        }
        for e in c.euclid_mean() {
            w.f64(*e);
        }
        for i in 0..d {
            for j in 0..d {
                w.f64(c.cov()[(i, j)]);
            }
        }
    }
}

pub fn read_mixture(r: &mut Reader) -> Result<Sdmm> {
    r.expect(MIXTURE_MAGIC)?;
    let version = r.u32()?;
    if version != MIXTURE_VERSION {
        return Err(Error::Format(format!("unsupported mixture version {version}")));
    }
    let layout = Layout::new(r.u32()? as usize, r.u32()? as usize).map_err(|e| Error::Format(e.to_string()))?;
    let k = r.u32()? as usize;
    if k == 0 || k > 1 << 20 {
        return Err(Error::Format(format!("implausible component count {k}")));
    }
    let d = layout.dim();
    let mut comps = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for _ in 0..k {
        weights.push(r.f64()?);
        let mut dirs = Vec::with_capacity(layout.spheres);
        for _ in 0..layout.spheres {
            let (x, y, z) = (r.f64()?, r.f64()?, r.f64()?);
            let v = nalgebra::Vector3::new(x, y, z);
            // Stored means are already unit; keep their bits for exact round trips.
            let u = if (v.norm() - 1.0).abs() < 1e-12 {
                UnitVec3::new_unchecked(v)
            } else {
                UnitVec3::new_normalize(v).ok_or_else(|| Error::Format("zero mean direction".into()))?
            };
            dirs.push(u);
        }
        let mut e = Vec::with_capacity(layout.euclid);
        for _ in 0..layout.euclid {
            e.push(r.f64()?);
        }
        let mut cov = MatD::identity();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = r.f64()?;
            }
        }
        comps.push(TangentGaussian::new(layout, &dirs, &e, &cov).map_err(|e| Error::Format(e.to_string()))?);
    }
    Sdmm::new(comps, weights).map_err(|e| Error::Format(e.to_string()))
}

pub fn mixture_to_bytes(m: &Sdmm) -> Vec<u8> {
    let mut w = Writer::new();
    write_mixture(&mut w, m);
    w.finish()
}

pub fn mixture_from_bytes(b: &[u8]) -> Result<Sdmm> {
    let mut r = Reader::new(b);
    let m = read_mixture(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after mixture".into()));
    }
    Ok(m)
}

/// 64-bit FNV-1a, stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
