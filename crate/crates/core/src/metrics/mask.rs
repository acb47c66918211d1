use crate::error::{Error, Result};

/// Binary object mask, 1 inside the object, row-major `height x width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!("mask {height}x{width} with {} values", data.len())));
        }
        Ok(Self {
            height,
            width,
            data: data.into_iter().map(|v| (v != 0) as u8).collect(),
        })
    }

    pub fn from_fn(height: usize, width: usize, inside: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| inside(i / width, i % width) as u8).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}
