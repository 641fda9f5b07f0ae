//! Bilinear interpolation taps shared by every sampler in the crate.
//!
//! Coordinates are normalized `(x, y)` with `x` pointing right and `y` down.
//! Pixel `(i, j)` of an `H x W` map has its center at
//! `((j + 0.5) / W, (i + 0.5) / H)`. Neighbors that fall outside the map
//! contribute zero (zero padding), so a location far outside `[0, 1]^2`
//! samples the zero vector.

/// Up to four weighted neighbors of a fractional location.
#[derive(Debug, Clone, Copy, Default)]
pub struct Taps {
    /// Flat `i * W + j` index of each neighbor, `None` when padded.
    pub index: [Option<usize>; 4],
    pub weight: [f64; 4],
    /// Derivative of each weight with respect to normalized x.
    pub dweight_dx: [f64; 4],
    /// Derivative of each weight with respect to normalized y.
    pub dweight_dy: [f64; 4],
}

impl Taps {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64, f64, f64)> + '_ {
        (0..4).filter_map(move |t| {
            self.index[t].map(|i| (i, self.weight[t], self.dweight_dx[t], self.dweight_dy[t]))
        })
    }
}

/// Normalized coordinate to continuous pixel coordinate along one axis.
#[inline]
pub fn to_pixel(coord: f64, extent: usize) -> f64 {
    coord * extent as f64 - 0.5
}

/// Normalized center of pixel index `i` along an axis of `extent` pixels.
#[inline]
pub fn pixel_center(i: usize, extent: usize) -> f64 {
    (i as f64 + 0.5) / extent as f64
}

pub fn bilinear_taps(x: f64, y: f64, height: usize, width: usize) -> Taps {
    let mut taps = Taps::default();
    let u = to_pixel(x, width);
    let v = to_pixel(y, height);
    // Anything this far out has no in-range neighbor; also keeps the casts below sane.
    if !(u > -1.0 && v > -1.0 && u < width as f64 && v < height as f64) {
        return taps;
    }
    let j0 = u.floor();
    let i0 = v.floor();
    let fx = u - j0;
    let fy = v - i0;
    let (j0, i0) = (j0 as i64, i0 as i64);
    let (sx, sy) = (width as f64, height as f64);

    let corners = [
        (i0, j0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (i0, j0 + 1, fx * (1.0 - fy), 1.0 - fy, -fx),
        (i0 + 1, j0, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (i0 + 1, j0 + 1, fx * fy, fy, fx),
    ];
    for (t, &(i, j, w, dwdu, dwdv)) in corners.iter().enumerate() {
        if i >= 0 && j >= 0 && (i as usize) < height && (j as usize) < width {
            taps.index[t] = Some(i as usize * width + j as usize);
            taps.weight[t] = w;
            taps.dweight_dx[t] = dwdu * sx;
            taps.dweight_dy[t] = dwdv * sy;
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_center_hits_one_tap() {
        let taps = bilinear_taps(pixel_center(2, 4), pixel_center(1, 3), 3, 4);
        let hit: Vec<_> = taps.iter().filter(|t| t.1 > 0.0).collect();
        assert_eq!(hit.len(), 1);
        assert_eq!(hit[0].0, 4 + 2);
        assert!((hit[0].1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weights_sum_to_one_inside() {
        let taps = bilinear_taps(0.37, 0.61, 5, 7);
        let total: f64 = taps.iter().map(|t| t.1).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let dx: f64 = taps.iter().map(|t| t.2).sum();
        assert!(dx.abs() < 1e-12);
    }

    #[test]
    fn far_outside_is_empty() {
        assert_eq!(bilinear_taps(-1.0, -1.0, 4, 4).iter().count(), 0);
        assert_eq!(bilinear_taps(f64::INFINITY, 0.5, 4, 4).iter().count(), 0);
    }
}
