use crate::error::{Error, Result};

/// Dense per-pixel 2-vector field in pixel units, row-major.
///
/// Used both for displacements and for dense velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub vectors: Vec<[f64; 2]>,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        DisplacementField {
            width,
            height,
            vectors: vec![[0.0; 2]; width * height],
        }
    }

    pub fn constant(width: usize, height: usize, v: [f64; 2]) -> Self {
        DisplacementField {
            width,
            height,
            vectors: vec![v; width * height],
        }
    }

    pub fn new(width: usize, height: usize, vectors: Vec<[f64; 2]>) -> Result<Self> {
        if vectors.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} vectors for a {width}x{height} field",
                vectors.len()
            )));
        }
        if vectors.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Input("displacement field contains non-finite values".into()));
        }
        Ok(DisplacementField {
            width,
            height,
            vectors,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.vectors[y * self.width + x]
    }

    pub fn check_matches(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::Dimension(format!(
                "field is {}x{}, image is {width}x{height}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        DisplacementField {
            width: self.width,
            height: self.height,
            vectors: self.vectors.iter().map(|v| [v[0] * s, v[1] * s]).collect(),
        }
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max)
    }

    /// Splits into x and y component planes.
    pub fn components(&self) -> (Vec<f64>, Vec<f64>) {
        self.vectors.iter().map(|v| (v[0], v[1])).unzip()
    }

    pub fn center_crop(&self, size: usize) -> Result<Self> {
        if size == 0 || size > self.width || size > self.height {
            return Err(Error::Dimension(format!(
                "crop size {size} exceeds field size {}x{}",
                self.width, self.height
            )));
        }
        let x0 = (self.width - size) / 2;
        let y0 = (self.height - size) / 2;
        let mut vectors = Vec::with_capacity(size * size);
        for y in y0..y0 + size {
            vectors.extend_from_slice(&self.vectors[y * self.width + x0..y * self.width + x0 + size]);
        }
        Ok(DisplacementField {
            width: size,
            height: size,
            vectors,
        })
    }
}
