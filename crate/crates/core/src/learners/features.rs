use crate::data::Image;

/// Box-mean radii stacked after the raw intensity.
pub const SEG_RADII: [usize; 3] = [1, 2, 4];
/// Features per pixel.
pub const SEG_FEATURES: usize = 1 + SEG_RADII.len();

/// Per-pixel feature stack: raw value, then box means at [`SEG_RADII`].
#[derive(Debug, Clone, PartialEq)]
pub struct SegFeatures {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl SegFeatures {
    pub fn compute(image: &Image) -> Self {
        let raw = image.raster();
        let means: Vec<_> = SEG_RADII.iter().map(|&r| raw.box_mean(r)).collect();
        let mut data = Vec::with_capacity(raw.len() * SEG_FEATURES);
        for i in 0..raw.len() {
            data.push(raw.as_slice()[i]);
            data.extend(means.iter().map(|m| m.as_slice()[i]));
        }
        Self { width: image.width(), height: image.height(), data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major, one slice of length [`SEG_FEATURES`] per pixel.
    pub fn pixels(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(SEG_FEATURES)
    }
}
