//! In-memory images and ground-truth instances shared by every stage.

use crate::geometry::{rasterize_all, Mask, Polygon};

/// Planar RGB image with channel values in `[0, 1]`, layout `[3, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; 3 * height * width] }
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width);
        Self { height, width, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let p = self.height * self.width;
        let i = row * self.width + col;
        [self.data[i], self.data[p + i], self.data[2 * p + i]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let p = self.height * self.width;
        let i = row * self.width + col;
        self.data[i] = rgb[0];
        self.data[p + i] = rgb[1];
        self.data[2 * p + i] = rgb[2];
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.height * self.width;
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn clamp(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// One annotated object: polygons (unioned) plus its enclosing box.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub category_id: u32,
    pub polygons: Vec<Polygon>,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
}

impl Instance {
    /// Builds an instance whose box is the tight hull of its polygons.
    pub fn from_polygons(category_id: u32, polygons: Vec<Polygon>) -> Self {
        let b = polygons.iter().map(Polygon::bounds).fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |a, b| {
            [a[0].min(b[0]), a[1].min(b[1]), a[2].max(b[2]), a[3].max(b[3])]
        });
        Self { category_id, polygons, bbox: [b[0], b[1], b[2] - b[0], b[3] - b[1]] }
    }

    pub fn xyxy(&self) -> [f32; 4] {
        let [x, y, w, h] = self.bbox;
        [x as f32, y as f32, (x + w) as f32, (y + h) as f32]
    }

    pub fn mask(&self, height: usize, width: usize) -> Mask {
        rasterize_all(&self.polygons, height, width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub file_name: String,
    pub image: Image,
    pub instances: Vec<Instance>,
    /// Free-form stratum label (e.g. variety) used for stratified splits.
    pub stratum: String,
}
