use crate::error::{Error, Result};

/// Row-major 2D grid. `x` is the column, `y` the row.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Raster<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: width * height,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn same_shape<U>(&self, other: &Raster<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Raster<U> {
        Raster {
            width: self.width,
            height: self.height,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    /// Mirror left-right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    /// Mirror top-bottom.
    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(x, self.height - 1 - y))
    }

    /// Rotate clockwise by `quarter_turns` × 90°. Four turns is the identity.
    pub fn rotate_quarter(&self, quarter_turns: usize) -> Self {
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => Self::from_fn(self.height, self.width, |x, y| {
                self.get(y, self.height - 1 - x)
            }),
            2 => Self::from_fn(self.width, self.height, |x, y| {
                self.get(self.width - 1 - x, self.height - 1 - y)
            }),
            _ => Self::from_fn(self.height, self.width, |x, y| {
                self.get(self.width - 1 - y, x)
            }),
        }
    }

    /// Nearest-neighbour lookup at continuous coordinates, with reflected borders.
    pub fn sample_nearest(&self, fx: f64, fy: f64) -> T {
        let x = reflect_index(fx.round() as i64, self.width);
        let y = reflect_index(fy.round() as i64, self.height);
        self.get(x, y)
    }

    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Self::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }
}

impl Raster<f64> {
    /// Bilinear lookup at continuous pixel coordinates, reflecting past the border.
    pub fn sample_bilinear(&self, fx: f64, fy: f64) -> f64 {
        let x0 = fx.floor();
        let y0 = fy.floor();
        let tx = fx - x0;
        let ty = fy - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let px = |x: i64, y: i64| self.get(reflect_index(x, self.width), reflect_index(y, self.height));
        let top = px(x0, y0) * (1.0 - tx) + px(x0 + 1, y0) * tx;
        let bottom = px(x0, y0 + 1) * (1.0 - tx) + px(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    /// Pixel-centre aligned bilinear resize.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Self::from_fn(width, height, |x, y| {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            self.sample_bilinear(fx, fy)
        })
    }

    /// Mean over the (2r+1)² window around each pixel, clipped at the edges.
    pub fn box_mean(&self, radius: usize) -> Self {
        let (w, h) = (self.width, self.height);
        // summed-area table with a zero border row/column
        let mut sat = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += self.get(x, y);
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        Self::from_fn(w, h, |x, y| {
            let x0 = x.saturating_sub(radius);
            let y0 = y.saturating_sub(radius);
            let x1 = (x + radius + 1).min(w);
            let y1 = (y + radius + 1).min(h);
            let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                + sat[y0 * (w + 1) + x0];
            sum / ((x1 - x0) * (y1 - y0)) as f64
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Reflect an out-of-range index back into `0..n` (`dcb|abcd|cba` style, edge pixel not repeated).
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as i64;
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Raster<u8> {
        Raster::new(3, 2, vec![1, 2, 3, 4, 5, 6]).unwrap()
    }

    #[test]
    fn flips_on_two_by_two() {
        let r = Raster::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(r.flip_horizontal().as_slice(), &[2, 1, 4, 3]);
        assert_eq!(r.flip_vertical().as_slice(), &[3, 4, 1, 2]);
    }

    #[test]
    fn quarter_rotation_moves_top_row_to_right_column() {
        let r = grid().rotate_quarter(1);
        assert_eq!((r.width(), r.height()), (2, 3));
        // [[4,1],[5,2],[6,3]]
        assert_eq!(r.as_slice(), &[4, 1, 5, 2, 6, 3]);
    }

    #[test]
    fn rotations_compose_to_identity() {
        let r = grid();
        for k in 0..4 {
            assert_eq!(r.rotate_quarter(k).rotate_quarter(4 - k), r);
        }
        assert_eq!(r.rotate_quarter(2), r.flip_horizontal().flip_vertical());
    }

    #[test]
    fn reflect_index_wraps_without_repeating_edges() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn box_mean_matches_brute_force() {
        let r = Raster::from_fn(7, 5, |x, y| (x * 3 + y * 7 % 5) as f64 * 0.1);
        for radius in [0, 1, 2, 4] {
            let fast = r.box_mean(radius);
            for y in 0usize..5 {
                for x in 0usize..7 {
                    let mut sum = 0.0;
                    let mut n = 0;
                    for yy in y.saturating_sub(radius)..(y + radius + 1).min(5) {
                        for xx in x.saturating_sub(radius)..(x + radius + 1).min(7) {
                            sum += r.get(xx, yy);
                            n += 1;
                        }
                    }
                    assert!((fast.get(x, y) - sum / n as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_resize_of_constant_is_constant() {
        let r = Raster::filled(10, 10, 0.3);
        let up = r.resize_bilinear(13, 14);
        assert!(up.as_slice().iter().all(|&v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn bilinear_interpolates_midpoint() {
        let r = Raster::new(2, 1, vec![0.0, 1.0]).unwrap();
        assert!((r.sample_bilinear(0.5, 0.0) - 0.5).abs() < 1e-12);
    }
}
