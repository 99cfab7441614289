//! Per-pixel class probability fields.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Number of segmentation classes: background, LV cavity, myocardium,
/// infarction, no-reflow.
pub const NUM_CLASSES: usize = 5;

const SIMPLEX_TOL: f64 = 1e-5;

/// Class probabilities stored channels-first, `values[[c, row, col]]`.
///
/// Labels, network predictions and soft mix-up targets all travel as a
/// `ProbMap`. The checked constructor enforces the simplex invariant; the
/// unchecked one exists for gradient probes, which perturb single entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    values: Array3<f64>,
}

impl ProbMap {
    /// Wraps `values` after checking every pixel lies on the simplex.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let map = Self { values };
        map.check_simplex(SIMPLEX_TOL)?;
        Ok(map)
    }

    pub fn from_array_unchecked(values: Array3<f64>) -> Self {
        Self { values }
    }

    /// Exact one-hot encoding of a label map into `classes` channels.
    pub fn one_hot(labels: ArrayView2<'_, u8>, classes: usize) -> Result<Self> {
        let (h, w) = labels.dim();
        let mut values = Array3::zeros((classes, h, w));
        for ((r, c), &l) in labels.indexed_iter() {
            if l as usize >= classes {
                return Err(Error::LabelRange { value: l as f64 });
            }
            values[[l as usize, r, c]] = 1.0;
        }
        Ok(Self { values })
    }

    pub fn classes(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    /// `(classes, height, width)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), c)
    }

    /// Per-pixel argmax; ties resolve to the lower class index.
    pub fn argmax(&self) -> Array2<u8> {
        let (classes, h, w) = self.values.dim();
        Array2::from_shape_fn((h, w), |(r, c)| {
            let mut best = 0;
            let mut best_v = self.values[[0, r, c]];
            for k in 1..classes {
                let v = self.values[[k, r, c]];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            best as u8
        })
    }

    /// Fails unless every entry is in `[0,1]` and every pixel sums to one
    /// within `tol`.
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        let (classes, h, w) = self.values.dim();
        for r in 0..h {
            for c in 0..w {
                let mut sum = 0.0;
                for k in 0..classes {
                    let v = self.values[[k, r, c]];
                    if !(-tol..=1.0 + tol).contains(&v) {
                        return Err(Error::Shape(format!(
                            "probability {v} at ({r},{c}) channel {k} outside [0,1]"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > tol {
                    return Err(Error::Shape(format!(
                        "channel sum {sum} at ({r},{c}) is not 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_hot_label_two() {
        let labels = array![[2u8]];
        let p = ProbMap::one_hot(labels.view(), NUM_CLASSES).unwrap();
        let px: Vec<f64> = (0..5).map(|k| p.values()[[k, 0, 0]]).collect();
        assert_eq!(px, vec![0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_all_background() {
        let labels = Array2::<u8>::zeros((3, 4));
        let p = ProbMap::one_hot(labels.view(), NUM_CLASSES).unwrap();
        assert!(p.channel(0).iter().all(|&v| v == 1.0));
        p.check_simplex(0.0).unwrap();
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        let labels = array![[0u8, 5]];
        assert!(matches!(
            ProbMap::one_hot(labels.view(), NUM_CLASSES),
            Err(Error::LabelRange { value }) if value == 5.0
        ));
    }

    #[test]
    fn argmax_tie_goes_to_lower_class() {
        let p = ProbMap::new(Array3::from_elem((5, 1, 1), 0.2)).unwrap();
        assert_eq!(p.argmax()[[0, 0]], 0);
    }

    #[test]
    fn argmax_inverts_one_hot() {
        let labels = array![[0u8, 1, 2], [3, 4, 0]];
        let p = ProbMap::one_hot(labels.view(), NUM_CLASSES).unwrap();
        assert_eq!(p.argmax(), labels);
    }

    #[test]
    fn new_rejects_off_simplex() {
        let v = Array3::from_elem((5, 2, 2), 0.3);
        assert!(ProbMap::new(v).is_err());
    }
}
