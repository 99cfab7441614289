//! Pathology mix-up: register a moving slice onto a fixed slice with a
//! translation + isotropic scaling estimated from foreground moments, then
//! blend images and label probabilities inside the cardiac foreground.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_io::SliceSample;
use crate::error::{Error, Result};
use crate::probmap::{ProbMap, NUM_CLASSES};

/// Classes treated as foreground when estimating the registration: cavity
/// plus the whole myocardium (including lesions).
pub const DEFAULT_FOREGROUND: [u8; 4] = [1, 2, 3, 4];

/// Default tolerance on `|z_norm(fixed) - z_norm(moving)|` for pair sampling.
pub const DEFAULT_Z_TOLERANCE: f64 = 0.25;

/// Centroid and mean centroid distance of a foreground region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForegroundStats {
    /// `(x, y)` = (row, column) in pixel units.
    pub center: (f64, f64),
    pub mean_radius: f64,
    pub pixel_count: usize,
}

/// Statistics of the pixels whose label is in `classes`.
pub fn foreground_stats(labels: ArrayView2<'_, u8>, classes: &[u8]) -> Result<ForegroundStats> {
    mask_stats(labels.map(|l| classes.contains(l)).view())
}

/// Statistics of the `true` pixels of a mask.
pub fn mask_stats(mask: ArrayView2<'_, bool>) -> Result<ForegroundStats> {
    let mut count = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((r, c), &m) in mask.indexed_iter() {
        if m {
            count += 1;
            sx += r as f64;
            sy += c as f64;
        }
    }
    if count == 0 {
        return Err(Error::EmptyForeground);
    }
    let cx = sx / count as f64;
    let cy = sy / count as f64;
    let dist: f64 = mask
        .indexed_iter()
        .filter(|(_, &m)| m)
        .map(|((r, c), _)| (r as f64 - cx).hypot(c as f64 - cy))
        .sum();
    Ok(ForegroundStats {
        center: (cx, cy),
        mean_radius: dist / count as f64,
        pixel_count: count,
    })
}

/// Homogeneous 2D affine map acting on `(x, y)` = (row, column).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    pub matrix: [[f64; 3]; 3],
}

impl AffineTransform2D {
    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Isotropic scaling by `s` about the origin followed by translation.
    pub fn scale_translate(s: f64, tx: f64, ty: f64) -> Self {
        Self {
            matrix: [[s, 0.0, tx], [0.0, s, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let m = &self.matrix;
        (
            m[0][0] * p.0 + m[0][1] * p.1 + m[0][2],
            m[1][0] * p.0 + m[1][1] * p.1 + m[1][2],
        )
    }

    /// Inverse map; fails for singular linear parts.
    pub fn inverse(&self) -> Result<Self> {
        let m = &self.matrix;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if !(det.is_finite() && det.abs() > 1e-12) {
            return Err(Error::DegenerateScale(format!(
                "transform is not invertible (determinant {det})"
            )));
        }
        let a = m[1][1] / det;
        let b = -m[0][1] / det;
        let c = -m[1][0] / det;
        let d = m[0][0] / det;
        let tx = -(a * m[0][2] + b * m[1][2]);
        let ty = -(c * m[0][2] + d * m[1][2]);
        Ok(Self {
            matrix: [[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]],
        })
    }
}

/// Registration of `moving` onto `fixed`: scale `s = d_F / d_M` and the
/// translation that sends the moving center onto the fixed center.
pub fn build_affine(fixed: &ForegroundStats, moving: &ForegroundStats) -> Result<AffineTransform2D> {
    if moving.mean_radius.is_nan() || moving.mean_radius <= 0.0 {
        return Err(Error::DegenerateScale(format!(
            "moving foreground has mean radius {}",
            moving.mean_radius
        )));
    }
    let s = fixed.mean_radius / moving.mean_radius;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::DegenerateScale(format!("scale factor {s}")));
    }
    Ok(AffineTransform2D::scale_translate(
        s,
        fixed.center.0 - s * moving.center.0,
        fixed.center.1 - s * moving.center.1,
    ))
}

/// Bilinear sample with zero outside the image. Corners with zero weight are
/// skipped so integer positions reproduce the input exactly.
#[inline]
fn bilinear(img: &ArrayView2<'_, f64>, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (xi, yi) = (x0 as i64, y0 as i64);
    let mut acc = 0.0;
    for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
        if wx == 0.0 {
            continue;
        }
        let r = xi + dx;
        if r < 0 || r >= h as i64 {
            continue;
        }
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            let c = yi + dy;
            if c < 0 || c >= w as i64 {
                continue;
            }
            acc += wx * wy * img[[r as usize, c as usize]];
        }
    }
    acc
}

/// Resamples `image` so that `output(p) = image(T⁻¹ p)`.
pub fn warp_image(image: ArrayView2<'_, f64>, t: &AffineTransform2D) -> Result<Array2<f64>> {
    let inv = t.inverse()?;
    Ok(Array2::from_shape_fn(image.dim(), |(r, c)| {
        let (x, y) = inv.apply((r as f64, c as f64));
        bilinear(&image, x, y)
    }))
}

/// Warps the one-hot encoding of `labels` channel by channel and
/// renormalizes each pixel; fully out-of-bounds pixels become background.
pub fn warp_labels(labels: ArrayView2<'_, u8>, t: &AffineTransform2D) -> Result<ProbMap> {
    let onehot = ProbMap::one_hot(labels, NUM_CLASSES)?;
    warp_probmap(&onehot, t)
}

pub fn warp_probmap(map: &ProbMap, t: &AffineTransform2D) -> Result<ProbMap> {
    let (k, h, w) = map.dim();
    let mut out = Array3::zeros((k, h, w));
    for c in 0..k {
        let warped = warp_image(map.channel(c), t)?;
        out.index_axis_mut(Axis(0), c).assign(&warped);
    }
    for r in 0..h {
        for col in 0..w {
            let mut px = out.slice_mut(ndarray::s![.., r, col]);
            let sum: f64 = px.sum();
            if sum > 0.0 {
                px.mapv_inplace(|v| v / sum);
            } else {
                px.fill(0.0);
                px[0] = 1.0;
            }
        }
    }
    Ok(ProbMap::from_array_unchecked(out))
}

/// Output of [`pathology_mixup`].
#[derive(Debug, Clone)]
pub struct MixupResult {
    pub image: Array2<f64>,
    pub target: ProbMap,
    pub lambda: f64,
    /// Pixels where the blend was applied.
    pub mix_mask: Array2<bool>,
    pub transform: AffineTransform2D,
}

/// Mix-up with the default foreground classes.
pub fn pathology_mixup(fixed: &SliceSample, moving: &SliceSample, lambda: f64) -> Result<MixupResult> {
    pathology_mixup_with(fixed, moving, lambda, &DEFAULT_FOREGROUND)
}

/// Blends `(1-λ)·(M∘T) + λ·F` for image and label probabilities inside the
/// union of the fixed foreground and the warped moving foreground; the fixed
/// slice is copied elsewhere. `stats_classes` selects the pixels used to
/// estimate `T`.
pub fn pathology_mixup_with(
    fixed: &SliceSample,
    moving: &SliceSample,
    lambda: f64,
    stats_classes: &[u8],
) -> Result<MixupResult> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("mix-up lambda {lambda} outside [0,1]")));
    }
    if fixed.dim() != moving.dim() {
        return Err(Error::Shape(format!(
            "fixed slice {:?} and moving slice {:?} differ in size",
            fixed.dim(),
            moving.dim()
        )));
    }
    let fs = foreground_stats(fixed.labels.view(), stats_classes)?;
    let ms = foreground_stats(moving.labels.view(), stats_classes)?;
    let t = build_affine(&fs, &ms)?;
    let warped_img = warp_image(moving.image.view(), &t)?;
    let warped_lab = warp_labels(moving.labels.view(), &t)?;
    let fixed_hot = ProbMap::one_hot(fixed.labels.view(), NUM_CLASSES)?;

    let mix_mask = Zip::from(&fixed.labels)
        .and(warped_lab.channel(0))
        .map_collect(|&l, &bg| l != 0 || bg < 0.5);

    let mut image = fixed.image.clone();
    Zip::from(&mut image)
        .and(&warped_img)
        .and(&mix_mask)
        .for_each(|o, &m, &inside| {
            if inside {
                *o = (1.0 - lambda) * m + lambda * *o;
            }
        });

    let mut target = fixed_hot.into_inner();
    for c in 0..NUM_CLASSES {
        let mut tc = target.index_axis_mut(Axis(0), c);
        Zip::from(&mut tc)
            .and(warped_lab.channel(c))
            .and(&mix_mask)
            .for_each(|o, &m, &inside| {
                if inside {
                    *o = (1.0 - lambda) * m + lambda * *o;
                }
            });
    }

    Ok(MixupResult {
        image,
        target: ProbMap::from_array_unchecked(target),
        lambda,
        mix_mask,
        transform: t,
    })
}

/// Pre-computed mix-up eligibility of a slice list.
///
/// A slice is eligible when its foreground exists and has positive mean
/// radius (a single-pixel foreground has no defined scale).
#[derive(Debug, Clone)]
pub struct PairSampler {
    eligible: Vec<usize>,
    z: Vec<f64>,
    is_eligible: Vec<bool>,
}

impl PairSampler {
    pub fn new(slices: &[SliceSample], stats_classes: &[u8]) -> Self {
        let is_eligible: Vec<bool> = slices
            .iter()
            .map(|s| {
                foreground_stats(s.labels.view(), stats_classes)
                    .map(|st| st.mean_radius > 0.0)
                    .unwrap_or(false)
            })
            .collect();
        Self {
            eligible: (0..slices.len()).filter(|&i| is_eligible[i]).collect(),
            z: slices.iter().map(|s| s.z_norm).collect(),
            is_eligible,
        }
    }

    pub fn num_eligible(&self) -> usize {
        self.eligible.len()
    }

    pub fn is_eligible(&self, idx: usize) -> bool {
        self.is_eligible.get(idx).copied().unwrap_or(false)
    }

    /// Picks a moving partner for `fixed` uniformly among the other eligible
    /// slices within `z_tolerance`; falls back to the nearest z.
    pub fn partner<R: Rng + ?Sized>(&self, fixed: usize, z_tolerance: f64, rng: &mut R) -> Result<usize> {
        let others: Vec<usize> = self.eligible.iter().copied().filter(|&i| i != fixed).collect();
        if others.is_empty() {
            return Err(Error::InsufficientData(
                "no other eligible slice to pair with".into(),
            ));
        }
        let zf = self.z[fixed];
        let close: Vec<usize> = others
            .iter()
            .copied()
            .filter(|&i| (self.z[i] - zf).abs() <= z_tolerance)
            .collect();
        if close.is_empty() {
            let nearest = others
                .iter()
                .copied()
                .min_by(|&a, &b| (self.z[a] - zf).abs().total_cmp(&(self.z[b] - zf).abs()))
                .expect("non-empty");
            return Ok(nearest);
        }
        Ok(close[rng.random_range(0..close.len())])
    }

    /// Uniform fixed slice, then a partner (see [`PairSampler::partner`]).
    pub fn sample<R: Rng + ?Sized>(&self, z_tolerance: f64, rng: &mut R) -> Result<(usize, usize)> {
        if self.eligible.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "mix-up needs 2 eligible slices, found {}",
                self.eligible.len()
            )));
        }
        let fixed = self.eligible[rng.random_range(0..self.eligible.len())];
        let moving = self.partner(fixed, z_tolerance, rng)?;
        Ok((fixed, moving))
    }
}

/// Draws a `(fixed, moving)` pair of distinct slices with similar z.
pub fn sample_pair<'a, R: Rng + ?Sized>(
    train_set: &'a [SliceSample],
    z_tolerance: f64,
    rng: &mut R,
) -> Result<(&'a SliceSample, &'a SliceSample)> {
    let sampler = PairSampler::new(train_set, &DEFAULT_FOREGROUND);
    let (f, m) = sampler.sample(z_tolerance, rng)?;
    Ok((&train_set[f], &train_set[m]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_pixel_stats() {
        let mut l = Array2::<u8>::zeros((32, 32));
        l[[10, 20]] = 1;
        let s = foreground_stats(l.view(), &DEFAULT_FOREGROUND).unwrap();
        assert_eq!(s.center, (10.0, 20.0));
        assert_eq!(s.mean_radius, 0.0);
        assert_eq!(s.pixel_count, 1);
    }

    #[test]
    fn four_corner_stats() {
        let mut l = Array2::<u8>::zeros((3, 3));
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            l[[r, c]] = 2;
        }
        let s = foreground_stats(l.view(), &DEFAULT_FOREGROUND).unwrap();
        assert_eq!(s.center, (1.0, 1.0));
        assert!((s.mean_radius - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_foreground() {
        let l = Array2::<u8>::zeros((4, 4));
        assert!(matches!(
            foreground_stats(l.view(), &DEFAULT_FOREGROUND),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn affine_identity_and_worked_example() {
        let a = ForegroundStats {
            center: (3.0, 4.0),
            mean_radius: 2.5,
            pixel_count: 10,
        };
        assert_eq!(build_affine(&a, &a).unwrap(), AffineTransform2D::identity());

        let moving = ForegroundStats {
            center: (10.0, 10.0),
            mean_radius: 5.0,
            pixel_count: 9,
        };
        let fixed = ForegroundStats {
            center: (30.0, 40.0),
            mean_radius: 10.0,
            pixel_count: 9,
        };
        let t = build_affine(&fixed, &moving).unwrap();
        assert_eq!(t.matrix, [[2.0, 0.0, 10.0], [0.0, 2.0, 20.0], [0.0, 0.0, 1.0]]);
        assert_eq!(t.apply((10.0, 10.0)), (30.0, 40.0));
    }

    #[test]
    fn degenerate_moving_scale() {
        let zero = ForegroundStats {
            center: (1.0, 1.0),
            mean_radius: 0.0,
            pixel_count: 1,
        };
        let f = ForegroundStats {
            mean_radius: 3.0,
            ..zero
        };
        assert!(matches!(build_affine(&f, &zero), Err(Error::DegenerateScale(_))));
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = Array2::from_shape_fn((9, 7), |(r, c)| (r * 7 + c) as f64 * 0.37 - 3.1);
        assert_eq!(warp_image(img.view(), &AffineTransform2D::identity()).unwrap(), img);
        let lab = Array2::from_shape_fn((9, 7), |(r, c)| ((r + 2 * c) % 5) as u8);
        let hot = ProbMap::one_hot(lab.view(), 5).unwrap();
        assert_eq!(warp_labels(lab.view(), &AffineTransform2D::identity()).unwrap(), hot);
    }

    #[test]
    fn integer_translation_matches_index_shift() {
        let img = Array2::from_shape_fn((10, 12), |(r, c)| 1.0 + (r * 12 + c) as f64);
        let (dx, dy) = (3i64, -2i64);
        let t = AffineTransform2D::scale_translate(1.0, dx as f64, dy as f64);
        let out = warp_image(img.view(), &t).unwrap();
        for ((r, c), &v) in out.indexed_iter() {
            let (sr, sc) = (r as i64 - dx, c as i64 - dy);
            let expected = if (0..10).contains(&sr) && (0..12).contains(&sc) {
                img[[sr as usize, sc as usize]]
            } else {
                0.0
            };
            assert_eq!(v, expected);
        }
    }

    #[test]
    fn constant_image_translation_fill() {
        let img = Array2::from_elem((8, 8), 1.0);
        let out = warp_image(img.view(), &AffineTransform2D::scale_translate(1.0, 5.0, 0.0)).unwrap();
        assert!(out.rows().into_iter().take(5).all(|r| r.iter().all(|&v| v == 0.0)));
        assert!(out.rows().into_iter().skip(5).all(|r| r.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn singular_transform_rejected() {
        let t = AffineTransform2D::scale_translate(0.0, 1.0, 1.0);
        let img = Array2::<f64>::zeros((4, 4));
        assert!(matches!(warp_image(img.view(), &t), Err(Error::DegenerateScale(_))));
    }

    #[test]
    fn warped_labels_on_simplex() {
        let lab = array![[0u8, 1, 2, 3], [4, 3, 2, 1], [1, 1, 2, 2], [0, 0, 4, 4]];
        let t = AffineTransform2D::scale_translate(1.3, 0.4, -0.7);
        let p = warp_labels(lab.view(), &t).unwrap();
        p.check_simplex(1e-12).unwrap();
    }

    fn slice(z: f64, labels: Array2<u8>) -> SliceSample {
        SliceSample {
            case_id: "c".into(),
            z_index: 0,
            z_norm: z,
            image: labels.mapv(|l| l as f64),
            labels,
        }
    }

    fn blob(h: usize) -> Array2<u8> {
        Array2::from_shape_fn((h, h), |(r, c)| {
            let d = (r as f64 - 4.0).hypot(c as f64 - 4.0);
            if d < 2.0 {
                1
            } else if d < 3.0 {
                2
            } else {
                0
            }
        })
    }

    #[test]
    fn two_slice_dataset_pairs_both() {
        let data = vec![slice(0.0, blob(9)), slice(1.0, blob(9))];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (f, m) = sample_pair(&data, 0.1, &mut rng).unwrap();
            assert_ne!(f.z_norm, m.z_norm);
        }
    }

    #[test]
    fn single_eligible_slice_is_insufficient() {
        let mut one = Array2::<u8>::zeros((9, 9));
        one[[3, 3]] = 1;
        let data = vec![slice(0.0, blob(9)), slice(0.5, one)];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            sample_pair(&data, 1.0, &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    use rand::SeedableRng;
}
