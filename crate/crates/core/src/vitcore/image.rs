use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;

use super::VitError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    /// Pixel count; saturates instead of overflowing so absurd shapes fail
    /// validation rather than wrapping.
    pub fn len(&self) -> usize {
        self.height
            .saturating_mul(self.width)
            .saturating_mul(self.channels)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of patches and flattened patch length for a patch side `p`.
    pub fn patch_grid(&self, p: usize) -> Result<(usize, usize), VitError> {
        if p == 0 || self.height % p != 0 || self.width % p != 0 {
            return Err(VitError::Shape(format!(
                "{}x{} image does not split into {p}x{p} patches",
                self.height, self.width
            )));
        }
        let patches = (self.height / p).checked_mul(self.width / p);
        let len = p.checked_mul(p).and_then(|q| q.checked_mul(self.channels));
        match (patches, len) {
            (Some(n), Some(l)) if l > 0 => Ok((n, l)),
            _ => Err(VitError::Shape(format!(
                "{}x{}x{} image with {p}x{p} patches is out of range",
                self.height, self.width, self.channels
            ))),
        }
    }
}

/// Image in height × width × channel layout, pixel `(y, x, c)` at
/// `(y·W + x)·C + c`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub shape: ImageShape,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(shape: ImageShape, data: Vec<f64>) -> Result<Self, VitError> {
        if data.len() != shape.len() || shape.is_empty() {
            return Err(VitError::Shape(format!(
                "{}x{}x{} image needs {} values, got {}",
                shape.height,
                shape.width,
                shape.channels,
                shape.len(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.shape.width + x) * self.shape.channels + c]
    }
}

/// Splits `image` into non-overlapping `p × p` patches in raster order. Row `r`
/// is patch `r`; column `c·p² + dy·p + dx` holds channel `c` at offset
/// `(dy, dx)` inside the patch.
pub fn tokenize(image: &Image, p: usize) -> Result<Matrix, VitError> {
    let (n, len) = image.shape.patch_grid(p)?;
    let per_row = image.shape.width / p;
    let mut out = Matrix::zeros(n, len);
    for r in 0..n {
        let (by, bx) = (r / per_row, r % per_row);
        let row = out.row_mut(r);
        for c in 0..image.shape.channels {
            for dy in 0..p {
                for dx in 0..p {
                    row[c * p * p + dy * p + dx] = image.get(by * p + dy, bx * p + dx, c);
                }
            }
        }
    }
    Ok(out)
}

/// Tokenizes every image; all images must share a shape.
pub fn stack_tokens(images: &[Image], p: usize) -> Result<Vec<Matrix>, VitError> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            if img.shape != first.shape {
                return Err(VitError::Shape(format!("image {i} shape differs from image 0")));
            }
            tokenize(img, p)
        })
        .collect()
}
