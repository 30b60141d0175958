//! Scene rendering primitives: value noise, colour conversion, berry-cluster
//! shapes and leaf occluders.

use rand::Rng;

use crate::geometry::Mask;
use crate::sample::Image;

pub(crate) fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Hue in degrees, saturation, value.
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Smooth noise in `[0, 1]`: bilinear interpolation of a random lattice with
/// `cell`-pixel spacing.
pub(crate) fn value_noise<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, cell: f32) -> Vec<f32> {
    let gh = (height as f32 / cell).ceil() as usize + 2;
    let gw = (width as f32 / cell).ceil() as usize + 2;
    let grid: Vec<f32> = (0..gh * gw).map(|_| rng.random::<f32>()).collect();
    let mut out = vec![0.0; height * width];
    for y in 0..height {
        let fy = y as f32 / cell;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        let ty = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..width {
            let fx = x as f32 / cell;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let tx = tx * tx * (3.0 - 2.0 * tx);
            let g = |a: usize, b: usize| grid[a * gw + b];
            let top = g(iy, ix) * (1.0 - tx) + g(iy, ix + 1) * tx;
            let bot = g(iy + 1, ix) * (1.0 - tx) + g(iy + 1, ix + 1) * tx;
            out[y * width + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// One berry in the object's canonical frame.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Berry {
    pub x: f32,
    pub y: f32,
    pub r: f32,
}

/// A grape-bunch-like cluster: berries in a canonical frame plus an affine
/// map (canonical = `inv * (p - centre)`).
#[derive(Clone, Debug)]
pub(crate) struct Cluster {
    pub cx: f32,
    pub cy: f32,
    pub berries: Vec<Berry>,
    /// Inverse of the object's linear map, row-major.
    pub inv: [f32; 4],
    /// Image-space bounding radius.
    pub radius: f32,
}

impl Cluster {
    /// Grows a connected cluster: each new berry touches a random existing one
    /// and stays inside a downward-tapering envelope of half-height `extent`.
    pub fn grow<R: Rng + ?Sized>(rng: &mut R, extent: f32, radius: [f32; 2], count: usize) -> Vec<Berry> {
        let mut berries = vec![Berry { x: 0.0, y: -0.4 * extent, r: rng.random_range(radius[0]..=radius[1]) }];
        let inside = |x: f32, y: f32| {
            let t = ((y + extent) / (2.0 * extent)).clamp(0.0, 1.0);
            y.abs() <= extent && x.abs() <= extent * (0.85 - 0.6 * t)
        };
        let mut attempts = 0;
        while berries.len() < count && attempts < 40 * count {
            attempts += 1;
            let base = berries[rng.random_range(0..berries.len())];
            let r = rng.random_range(radius[0]..=radius[1]);
            // Bias growth downwards so bunches hang.
            let angle = rng.random_range(-0.2f32..std::f32::consts::PI + 0.2);
            let d = 0.85 * (base.r + r);
            let (x, y) = (base.x + d * angle.cos(), base.y + d * angle.sin());
            if inside(x, y) {
                berries.push(Berry { x, y, r });
            }
        }
        berries
    }

    pub fn new(cx: f32, cy: f32, berries: Vec<Berry>, linear: [f32; 4]) -> Self {
        let [a, b, c, d] = linear;
        let det = a * d - b * c;
        let inv = [d / det, -b / det, -c / det, a / det];
        let canon = berries.iter().map(|q| (q.x * q.x + q.y * q.y).sqrt() + q.r).fold(0.0f32, f32::max);
        let gain = (a.abs() + b.abs()).max(c.abs() + d.abs());
        Self { cx, cy, berries, inv, radius: canon * gain }
    }

    pub fn canonical(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        (self.inv[0] * dx + self.inv[1] * dy, self.inv[2] * dx + self.inv[3] * dy)
    }

    /// Normalised distance to the nearest berry centre covering the point
    /// (`< 1` inside), with that berry.
    pub fn berry_at(&self, x: f32, y: f32) -> Option<(f32, &Berry)> {
        let (u, v) = self.canonical(x, y);
        self.berries
            .iter()
            .filter_map(|b| {
                let d = ((u - b.x).powi(2) + (v - b.y).powi(2)).sqrt() / b.r;
                (d < 1.0).then_some((d, b))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Pixel-centre silhouette.
    pub fn silhouette(&self, height: usize, width: usize) -> Mask {
        let mut m = Mask::new(height, width);
        let r0 = (self.cy - self.radius - 1.0).floor().max(0.0) as usize;
        let r1 = ((self.cy + self.radius + 1.0).ceil().max(0.0) as usize).min(height);
        let c0 = (self.cx - self.radius - 1.0).floor().max(0.0) as usize;
        let c1 = ((self.cx + self.radius + 1.0).ceil().max(0.0) as usize).min(width);
        for r in r0..r1 {
            for c in c0..c1 {
                if self.berry_at(c as f32 + 0.5, r as f32 + 0.5).is_some() {
                    m.set(r, c, true);
                }
            }
        }
        m
    }
}

/// Elliptical leaf occluder.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Leaf {
    pub cx: f32,
    pub cy: f32,
    pub rx: f32,
    pub ry: f32,
    pub angle: f32,
}

impl Leaf {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        u * u + v * v < 1.0
    }

    pub fn mask(&self, height: usize, width: usize) -> Mask {
        let mut m = Mask::new(height, width);
        for r in 0..height {
            for c in 0..width {
                if self.contains(c as f32 + 0.5, r as f32 + 0.5) {
                    m.set(r, c, true);
                }
            }
        }
        m
    }
}

/// Applies the same Gaussian blur as the augmenter to an image in place.
pub(crate) fn blur(im: &mut Image, sigma: f32) {
    crate::augment::gaussian_blur(im, sigma);
}
