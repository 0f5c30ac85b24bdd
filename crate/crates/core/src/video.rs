//! Pixel-space RGB videos `(3, F, H, W)` and their `KVLVID1f` file format.

use std::path::Path;

use ndarray::Array4;

use crate::error::{KvLockError, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::scalar::Real;

pub const VIDEO_MAGIC: &[u8; 8] = b"KVLVID1f";

/// Channel-major RGB video with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Video<T> {
    data: Array4<T>,
}

impl<T: Real> Video<T> {
    pub fn new(data: Array4<T>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(KvLockError::Shape(format!(
                "video needs 3 channels, got {}",
                data.dim().0
            )));
        }
        let data = if data.is_standard_layout() {
            data
        } else {
            data.as_standard_layout().to_owned()
        };
        Ok(Self { data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array4::zeros((3, frames, height, width)),
        }
    }

    pub fn frames(&self) -> usize {
        self.data.dim().1
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// `(F, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let (_, f, h, w) = self.data.dim();
        (f, h, w)
    }

    pub fn array(&self) -> &Array4<T> {
        &self.data
    }

    pub fn array_mut(&mut self) -> &mut Array4<T> {
        &mut self.data
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (f, h, w) = self.dims();
        let mut out = ByteWriter::with_capacity(20 + self.data.len() * 4);
        out.bytes(VIDEO_MAGIC).u32(f as u32).u32(h as u32).u32(w as u32);
        for &v in self.data.iter() {
            out.f32(v.to_disk());
        }
        write_file(path, &out.finish())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path, "video")?;
        let mut r = ByteReader::new(&bytes, path);
        r.magic(VIDEO_MAGIC)?;
        let (f, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let values = r.f32s(3 * f * h * w)?;
        r.finish()?;
        let data = Array4::from_shape_vec((3, f, h, w), values.into_iter().map(T::from_disk).collect())
            .expect("length matches header");
        Ok(Self { data })
    }
}
