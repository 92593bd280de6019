use crate::error::{Error, Result};

/// A `{0, 1}` image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape("binary_mask", "element count", height * width, data.len()));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid("binary_mask", format!("value {v} is not 0 or 1")));
        }
        Ok(BinaryMask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            data: vec![1; height * width],
        }
    }

    /// Thresholds `values > threshold` to 1.
    pub fn from_threshold(height: usize, width: usize, values: &[u8], threshold: u8) -> Result<Self> {
        Self::new(height, width, values.iter().map(|&v| u8::from(v > threshold)).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        assert_eq!(self.dims(), other.dims(), "mask extents differ");
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a & b).collect(),
        }
    }

    /// Builds a mask by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(y, x)));
            }
        }
        BinaryMask { height, width, data }
    }

    /// Rectangular sub-mask.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> BinaryMask {
        assert!(
            top + height <= self.height && left + width <= self.width,
            "crop out of bounds"
        );
        BinaryMask::from_fn(height, width, |y, x| self.get(top + y, left + x) == 1)
    }
}
