use crate::error::{Error, Result};

/// Interpretation of the values stored in an [`ImageBuffer`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    /// Linear scene radiance, non-negative and unbounded.
    LinearHdr,
    /// Display-referred values in `[0, 1]`.
    LdrUnit,
}

/// Row-major `height x width x 3` image of `f64` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
    space: ColorSpace,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn zeros(width: usize, height: usize, space: ColorSpace) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
            space,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64, space: ColorSpace) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
            space,
        }
    }

    /// Wraps raw samples without range checks; only the length is validated.
    pub fn from_vec(width: usize, height: usize, data: Vec<f64>, space: ColorSpace) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{} samples for a {width}x{height}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            space,
        })
    }

    /// Like [`ImageBuffer::from_vec`] but also enforces the color-space range.
    pub fn from_vec_checked(
        width: usize,
        height: usize,
        data: Vec<f64>,
        space: ColorSpace,
    ) -> Result<Self> {
        let img = Self::from_vec(width, height, data, space)?;
        img.validate()?;
        Ok(img)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            let ok = match self.space {
                ColorSpace::LinearHdr => v.is_finite() && v >= 0.0,
                ColorSpace::LdrUnit => (0.0..=1.0).contains(&v),
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "sample {i} = {v} out of range for {:?}",
                    self.space
                )));
            }
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn with_space(mut self, space: ColorSpace) -> Self {
        self.space = space;
        self
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, v: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&v);
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn ensure_same_shape(&self, other: &ImageBuffer, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
            space: self.space,
        }
    }

    pub fn scaled(&self, k: f64) -> ImageBuffer {
        self.map(|v| v * k)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Extracts one channel as a dense `height x width` plane.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(3).copied().collect()
    }
}
