//! Images as point sets: every pixel becomes a feature vector plus a
//! normalized 2-d grid position. This representation is the carrier for the
//! whole pipeline; positions are regenerated from the grid at every stage
//! rather than carried through layers.

use crate::error::Error;
use crate::tensor::Elem;

/// `n` feature points with their grid positions. Points are stored in
/// row-major raster order; positions lie in `[-0.5, 0.5]^2` and are exactly
/// the canonical grid for `(height, width)`.
#[derive(Clone, Debug)]
pub struct PointSet<E: Elem> {
    /// `n x d` features.
    pub features: Vec<E>,
    pub feature_dim: usize,
    pub height: usize,
    pub width: usize,
}

impl<E: Elem> PointSet<E> {
    pub fn n_points(&self) -> usize {
        self.height * self.width
    }

    pub fn positions(&self) -> Vec<E> {
        grid_positions(self.height, self.width)
    }
}

/// Canonical normalized positions for an `h x w` grid, raster order.
/// Pixel `(i, j)` sits at `((j+0.5)/w - 0.5, (i+0.5)/h - 0.5)`.
pub fn grid_positions<E: Elem>(height: usize, width: usize) -> Vec<E> {
    assert!(height >= 1 && width >= 1, "grid must be at least 1x1");
    let mut out = Vec::with_capacity(height * width * 2);
    for i in 0..height {
        for j in 0..width {
            out.push(E::from_f64((j as f64 + 0.5) / width as f64 - 0.5));
            out.push(E::from_f64((i as f64 + 0.5) / height as f64 - 0.5));
        }
    }
    out
}

/// Convert an `h x w x ch` image (channels innermost, values already in
/// `[-1, 1]`) into a point set with `d = ch`.
pub fn image_to_points<E: Elem>(image: &[E], height: usize, width: usize, channels: usize) -> PointSet<E> {
    assert_eq!(image.len(), height * width * channels, "image size mismatch");
    PointSet { features: image.to_vec(), feature_dim: channels, height, width }
}

/// Raster-order inverse of [`image_to_points`].
pub fn points_to_image<E: Elem>(ps: &PointSet<E>, channels: usize) -> Result<Vec<E>, Error> {
    if ps.feature_dim != channels {
        return Err(Error::Contract(format!(
            "point set has {} feature channels, requested {}",
            ps.feature_dim, channels
        )));
    }
    Ok(ps.features.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_is_centered() {
        let p = grid_positions::<f64>(1, 1);
        assert_eq!(p, vec![0.0, 0.0]);
    }

    #[test]
    fn two_by_two_grid() {
        let p = grid_positions::<f64>(2, 2);
        assert_eq!(
            p,
            vec![-0.25, -0.25, 0.25, -0.25, -0.25, 0.25, 0.25, 0.25]
        );
    }

    #[test]
    fn mnist_grid_extents() {
        let p = grid_positions::<f64>(28, 28);
        assert_eq!(p.len(), 784 * 2);
        let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let expect = (27.0 + 0.5) / 28.0 - 0.5; // corner coordinate from the formula
        assert!((hi - expect).abs() < 1e-15);
        assert!((lo + expect).abs() < 1e-15);
        assert!((expect - 0.482142857142857).abs() < 1e-12);
    }

    #[test]
    fn image_roundtrip_is_bitwise() {
        let img: Vec<f32> = (0..28 * 28).map(|i| (i as f32 / 392.0) - 1.0).collect();
        let ps = image_to_points(&img, 28, 28, 1);
        assert_eq!(ps.n_points(), 784);
        assert_eq!(ps.feature_dim, 1);
        let back = points_to_image(&ps, 1).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn single_rgb_point() {
        let ps = image_to_points(&[0.0f32, 0.0, 0.0], 1, 1, 3);
        assert_eq!(ps.n_points(), 1);
        assert_eq!(ps.feature_dim, 3);
    }

    #[test]
    fn channel_mismatch_is_contract_error() {
        let ps = image_to_points(&[0.0f32; 4], 2, 2, 1);
        assert!(points_to_image(&ps, 3).is_err());
    }

    #[test]
    fn positions_ignore_features() {
        let a = image_to_points(&[1.0f64, 2.0, 3.0, 4.0], 2, 2, 1);
        let b = image_to_points(&[-1.0f64, 0.0, 0.5, 0.25], 2, 2, 1);
        assert_eq!(a.positions(), b.positions());
    }
}
