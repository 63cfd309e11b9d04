//! Activation dumps on disk and their in-memory forms.
//!
//! A [`FeatureMapSet`] is one layer's output for one input sample, shape
//! `(c, h, w)`. [`matricize`] flattens it to the `c × hw` [`ActivationMatrix`]
//! that the CI computations operate on, one row per channel in row-major
//! order.

mod manifest;
mod npy;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub use manifest::{DumpManifest, LayerEntry};
pub use npy::{load_feature_maps, read_npy, write_feature_maps, write_npy, NpyArray};

/// Element type of stored activations. Arithmetic is always f64 in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

/// One layer's activations for one input sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    layer_id: String,
    sample_id: usize,
    shape: [usize; 3],
    data: Vec<f64>,
}

impl FeatureMapSet {
    /// Builds a feature-map set from row-major `(c, h, w)` data.
    pub fn new(
        layer_id: impl Into<String>,
        sample_id: usize,
        shape: [usize; 3],
        data: Vec<f64>,
    ) -> Result<Self> {
        let layer_id = layer_id.into();
        if shape.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "feature map shape {shape:?} for layer {layer_id} has a zero dimension"
            )));
        }
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                layer_id,
                expected: shape.to_vec(),
                found: vec![data.len()],
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer_id,
                sample_id,
                index,
            });
        }
        Ok(Self {
            layer_id,
            sample_id,
            shape,
            data,
        })
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn sample_id(&self) -> usize {
        self.sample_id
    }

    /// `[c, h, w]`.
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Row-major `(c, h, w)` values.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        let [_, h, w] = self.shape;
        self.data[(c * h + y) * w + x]
    }

    /// The spatial map of one channel, row-major `h × w`.
    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }
}

/// A layer's feature maps flattened to `c × hw`, row `i` being channel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    layer_id: String,
    data: DMatrix<f64>,
}

impl ActivationMatrix {
    /// Wraps an existing matrix. Entries must be finite.
    pub fn new(layer_id: impl Into<String>, data: DMatrix<f64>) -> Result<Self> {
        let layer_id = layer_id.into();
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput(format!(
                "activation matrix for {layer_id} must be non-empty, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "activation matrix for {layer_id} contains non-finite entries"
            )));
        }
        Ok(Self { layer_id, data })
    }

    /// Builds from row-major values.
    pub fn from_row_slice(
        layer_id: impl Into<String>,
        rows: usize,
        cols: usize,
        values: &[f64],
    ) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Self::new(layer_id, DMatrix::from_row_slice(rows, cols, values))
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn cols(&self) -> usize {
        self.data.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Multiplies every entry by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            layer_id: self.layer_id.clone(),
            data: &self.data * alpha,
        }
    }

    /// Reorders rows so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        let n = self.rows();
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::InvalidInput(format!(
                "{perm:?} is not a permutation of 0..{n}"
            )));
        }
        let data = DMatrix::from_fn(n, self.cols(), |i, j| self.data[(perm[i], j)]);
        Ok(Self {
            layer_id: self.layer_id.clone(),
            data,
        })
    }
}

/// Flattens `(c, h, w)` feature maps to a `c × hw` matrix.
pub fn matricize(fms: &FeatureMapSet) -> ActivationMatrix {
    let [c, h, w] = fms.shape;
    ActivationMatrix {
        layer_id: fms.layer_id.clone(),
        data: DMatrix::from_row_slice(c, h * w, &fms.data),
    }
}

/// Inverse of [`matricize`] given the spatial size.
pub fn dematricize(
    m: &ActivationMatrix,
    sample_id: usize,
    height: usize,
    width: usize,
) -> Result<FeatureMapSet> {
    if height * width != m.cols() {
        return Err(Error::ShapeMismatch {
            layer_id: m.layer_id.clone(),
            expected: vec![m.rows(), height, width],
            found: vec![m.rows(), m.cols()],
        });
    }
    // nalgebra stores column-major; transpose to read back row-major.
    let data = m.data.transpose().as_slice().to_vec();
    FeatureMapSet::new(
        m.layer_id.clone(),
        sample_id,
        [m.rows(), height, width],
        data,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matricize_row_major() {
        let fms = FeatureMapSet::new("l", 0, [2, 2, 2], (1..=8).map(f64::from).collect()).unwrap();
        let m = matricize(&fms);
        assert_eq!((m.rows(), m.cols()), (2, 4));
        let expected = DMatrix::from_row_slice(2, 4, &[1., 2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(m.as_matrix(), &expected);
    }

    #[test]
    fn matricize_unit_spatial() {
        let fms = FeatureMapSet::new("l", 0, [3, 1, 1], vec![0.5, -1.0, 2.0]).unwrap();
        let m = matricize(&fms);
        assert_eq!((m.rows(), m.cols()), (3, 1));
        assert_eq!(m.as_matrix().column(0).as_slice(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn rejects_non_finite_and_bad_length() {
        let err = FeatureMapSet::new("conv3", 7, [1, 1, 2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                sample_id: 7,
                index: 1,
                ..
            }
        ));
        assert!(err.to_string().contains("conv3"));
        assert!(FeatureMapSet::new("l", 0, [2, 2, 2], vec![0.0; 7]).is_err());
        assert!(FeatureMapSet::new("l", 0, [0, 2, 2], vec![]).is_err());
    }

    #[test]
    fn permute_rows_rejects_non_permutation() {
        let m = ActivationMatrix::from_row_slice("l", 2, 2, &[1., 2., 3., 4.]).unwrap();
        assert!(m.permute_rows(&[0, 0]).is_err());
        let p = m.permute_rows(&[1, 0]).unwrap();
        assert_eq!(p.as_matrix()[(0, 0)], 3.0);
    }

    proptest! {
        #[test]
        fn dematricize_inverts_matricize(
            c in 1usize..6, h in 1usize..5, w in 1usize..6, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..c * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
            let fms = FeatureMapSet::new("l", 3, [c, h, w], data).unwrap();
            let m = matricize(&fms);
            prop_assert_eq!((m.rows(), m.cols()), (c, h * w));
            for ch in 0..c {
                let row: Vec<f64> = m.as_matrix().row(ch).iter().copied().collect();
                prop_assert_eq!(row.as_slice(), fms.channel(ch));
            }
            let back = dematricize(&m, 3, h, w).unwrap();
            prop_assert_eq!(back, fms);
        }
    }
}
