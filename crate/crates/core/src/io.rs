//! Little-endian binary helpers shared by the on-disk formats.

use std::fs;
use std::path::Path;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Vec3};

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
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.f32(*v);
        }
    }

    /// R row-major (9×f64), t (3×f64), f, c_x, c_y (f64), H, W (u32).
    pub fn camera(&mut self, cam: &Camera) {
        for r in 0..3 {
            for c in 0..3 {
                self.f64(cam.rotation[(r, c)]);
            }
        }
        for i in 0..3 {
            self.f64(cam.translation[i]);
        }
        self.f64(cam.focal);
        self.f64(cam.cx);
        self.f64(cam.cy);
        self.u32(cam.height);
        self.u32(cam.width);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, &self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedFile)?;
        let out = self.data.get(self.pos..end).ok_or(Error::TruncatedFile)?;
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(Error::TruncatedFile)?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect())
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found: [u8; 4] = self.array()?;
        if &found != expected {
            return Err(Error::BadMagic {
                expected: *expected,
                found,
            });
        }
        Ok(())
    }

    /// Reads the version field, accepting any of `supported`.
    pub fn version(&mut self, supported: &[u32]) -> Result<u32> {
        let v = self.u32()?;
        if !supported.contains(&v) {
            return Err(Error::VersionMismatch {
                expected: *supported.last().expect("nonempty"),
                found: v,
            });
        }
        Ok(v)
    }

    pub fn camera(&mut self) -> Result<Camera> {
        let mut rot = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                rot[(r, c)] = self.f64()?;
            }
        }
        let t = Vec3::new(self.f64()?, self.f64()?, self.f64()?);
        let focal = self.f64()?;
        let cx = self.f64()?;
        let cy = self.f64()?;
        let height = self.u32()?;
        let width = self.u32()?;
        Camera::new(rot, t, focal, cx, cy, width, height)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
