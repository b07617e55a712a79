//! Dense row-major image containers.

/// A single-channel image of real values (residuals, feature channels).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "plane data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An RGB image with channel values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Self {
        assert_eq!(data.len(), width * height, "image data length");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        Self::new(width, height, vec![rgb; width * height])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_dims(&self, other: &ColorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rounds every channel to the nearest 8-bit level, matching what a PNG
    /// round trip produces.
    pub fn quantize_u8(&mut self) {
        for px in &mut self.data {
            for c in px.iter_mut() {
                *c = quantize_unit(*c);
            }
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|px| px.iter().map(|&c| to_u8(c)))
            .collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Self {
        assert_eq!(bytes.len(), width * height * 3);
        let data = bytes
            .chunks_exact(3)
            .map(|p| {
                [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ]
            })
            .collect();
        Self::new(width, height, data)
    }

    /// Channel-mean absolute difference per pixel.
    pub fn mean_abs_residual(&self, other: &ColorImage) -> Plane {
        assert!(self.same_dims(other));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0)
            .collect();
        Plane::new(self.width, self.height, data)
    }
}

/// Per-pixel inlier weight. Binary stages hold values in `{0, 1}`,
/// probabilistic stages hold values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InlierMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl InlierMask {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), width * height, "mask length");
        debug_assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
        Self {
            width,
            height,
            values,
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![1.0; width * height])
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0.0; width * height])
    }

    pub fn from_bools(width: usize, height: usize, inlier: impl IntoIterator<Item = bool>) -> Self {
        let values: Vec<f64> = inlier
            .into_iter()
            .map(|b| if b { 1.0 } else { 0.0 })
            .collect();
        Self::new(width, height, values)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_inlier(&self, x: usize, y: usize) -> bool {
        self.get(x, y) >= 0.5
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn inlier_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Thresholds probabilities into a binary mask (`p >= threshold` is an inlier).
    pub fn binarize(&self, threshold: f64) -> InlierMask {
        InlierMask::from_bools(
            self.width,
            self.height,
            self.values.iter().map(|&v| v >= threshold),
        )
    }

    /// Boolean outlier set of a mask, thresholded at 0.5.
    pub fn outliers(&self) -> Vec<bool> {
        self.values.iter().map(|&v| v < 0.5).collect()
    }

    /// Pixelwise AND of two binary masks.
    pub fn intersect(&self, other: &InlierMask) -> InlierMask {
        assert_eq!(self.values.len(), other.values.len());
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a.min(b))
            .collect();
        InlierMask::new(self.width, self.height, values)
    }

    /// True when every inlier of `self` is also an inlier of `other`.
    pub fn is_subset_of(&self, other: &InlierMask) -> bool {
        self.values.iter().zip(&other.values).all(|(&a, &b)| a <= b)
    }

    pub fn to_gray8(&self) -> Vec<u8> {
        self.values.iter().map(|&v| to_u8(v)).collect()
    }
}

#[inline]
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[inline]
pub fn quantize_unit(v: f64) -> f64 {
    to_u8(v) as f64 / 255.0
}
