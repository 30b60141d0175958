//! Binary masks, polygons, pixel-centre rasterization and boundary tracing.
//!
//! Pixel `(row, col)` covers `[col, col+1) × [row, row+1)` and is sampled at
//! its centre `(col + 0.5, row + 0.5)`. Polygons use the even-odd rule.

use std::collections::HashMap;

/// Row-major binary image.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.height, self.width, self.count())
    }
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![false; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn union_with(&mut self, other: &Mask) {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a |= b);
    }

    pub fn subtract(&mut self, other: &Mask) {
        assert_eq!((self.height, self.width), (other.height, other.width));
        self.data.iter_mut().zip(&other.data).for_each(|(a, &b)| *a &= !b);
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(&a, &b)| a && b).count()
    }

    pub fn mirrored_horizontal(&self) -> Mask {
        let mut out = Mask::new(self.height, self.width);
        for r in 0..self.height {
            for c in 0..self.width {
                out.data[r * self.width + c] = self.data[r * self.width + (self.width - 1 - c)];
            }
        }
        out
    }

    /// Tight `(x, y, w, h)` box around set pixels, or `None` when empty.
    pub fn bbox(&self) -> Option<[f64; 4]> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for r in 0..self.height {
            for c in 0..self.width {
                if self.get(r, c) {
                    x0 = x0.min(c);
                    y0 = y0.min(r);
                    x1 = x1.max(c + 1);
                    y1 = y1.max(r + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| [x0 as f64, y0 as f64, (x1 - x0) as f64, (y1 - y0) as f64])
    }

    /// Fills background regions not connected (4-neighbourhood) to the border.
    pub fn filled_holes(&self) -> Mask {
        let (h, w) = (self.height, self.width);
        let mut outside = vec![false; h * w];
        let mut stack: Vec<usize> = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if (r == 0 || c == 0 || r + 1 == h || c + 1 == w) && !self.data[r * w + c] {
                    outside[r * w + c] = true;
                    stack.push(r * w + c);
                }
            }
        }
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |rr: usize, cc: usize| {
                let j = rr * w + cc;
                if !self.data[j] && !outside[j] {
                    outside[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < h {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < w {
                visit(r, c + 1);
            }
        }
        Mask::from_vec(h, w, outside.into_iter().map(|o| !o).collect())
    }
}

/// Closed polygon in image pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub points: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    /// From a COCO flat `[x0, y0, x1, y1, ...]` list.
    pub fn from_flat(flat: &[f64]) -> Self {
        Self { points: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect() }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let a = self.points[i];
                let b = self.points[(i + 1) % n];
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn perimeter(&self) -> f64 {
        let n = self.points.len();
        (0..n)
            .map(|i| {
                let a = self.points[i];
                let b = self.points[(i + 1) % n];
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            })
            .sum()
    }

    /// `[x_min, y_min, x_max, y_max]`.
    pub fn bounds(&self) -> [f64; 4] {
        self.points.iter().fold([f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY], |b, p| {
            [b[0].min(p[0]), b[1].min(p[1]), b[2].max(p[0]), b[3].max(p[1])]
        })
    }

    /// Even-odd point test. A point lying exactly on a crossing of its
    /// horizontal line counts as inside, which keeps the test symmetric under
    /// horizontal mirroring.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let n = self.points.len();
        let mut inside = false;
        let mut j = n.wrapping_sub(1);
        for i in 0..n {
            let (a, b) = (self.points[i], self.points[j]);
            if (a[1] > y) != (b[1] > y) {
                let xc = crossing_x(a, b, y);
                if x == xc {
                    return true;
                }
                if x < xc {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Mirror about the vertical centre line of an image `width` wide.
    pub fn mirrored_horizontal(&self, width: f64) -> Polygon {
        Polygon { points: self.points.iter().map(|p| [width - p[0], p[1]]).collect() }
    }
}

/// x where edge `a`-`b` crosses the horizontal line at `y`. The endpoint
/// order is normalised so both walk directions give the same float.
fn crossing_x(a: [f64; 2], b: [f64; 2], y: f64) -> f64 {
    let (a, b) = if (a[1], a[0]) <= (b[1], b[0]) { (a, b) } else { (b, a) };
    a[0] + (y - a[1]) * (b[0] - a[0]) / (b[1] - a[1])
}

/// Pixel-centre, even-odd scanline rasterization. Parts outside the image are
/// clipped; a zero-area polygon yields an empty mask.
pub fn rasterize(poly: &Polygon, height: usize, width: usize) -> Mask {
    let mut mask = Mask::new(height, width);
    if poly.len() < 3 || poly.area() == 0.0 {
        log::warn!("degenerate polygon with {} vertices rasterizes to an empty mask", poly.len());
        return mask;
    }
    fill_polygon(poly, &mut mask);
    mask
}

fn fill_polygon(poly: &Polygon, mask: &mut Mask) {
    let [_, y_min, _, y_max] = poly.bounds();
    let n = poly.points.len();
    let r0 = (y_min - 0.5).ceil().max(0.0) as usize;
    let r1 = ((y_max - 0.5).floor() + 1.0).clamp(0.0, mask.height as f64) as usize;
    let mut xs: Vec<f64> = Vec::new();
    for r in r0..r1 {
        let y = r as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let a = poly.points[i];
            let b = poly.points[(i + 1) % n];
            if (a[1] > y) != (b[1] > y) {
                xs.push(crossing_x(a, b, y));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            // centre cx is inside when pair[0] <= cx <= pair[1]
            let c0 = (pair[0] - 0.5).ceil().max(0.0);
            let c1 = ((pair[1] - 0.5).floor() + 1.0).min(mask.width as f64);
            let (c0, c1) = (c0 as isize, c1 as isize);
            for c in c0..c1 {
                mask.data[r * mask.width + c as usize] = true;
            }
        }
    }
}

/// Union of the rasterizations of several polygons.
pub fn rasterize_all<'a>(polys: impl IntoIterator<Item = &'a Polygon>, height: usize, width: usize) -> Mask {
    let mut m = Mask::new(height, width);
    for p in polys {
        m.union_with(&rasterize(p, height, width));
    }
    m
}

/// Traces the outer boundary of every 4-connected foreground component.
///
/// Vertices sit on the midpoints of boundary pixel edges, so rasterizing the
/// result reproduces each hole-free component exactly. Collinear vertices are
/// merged and the outline is then simplified with tolerance `tolerance`
/// (values below ~0.35 px keep the rasterization exact).
pub fn trace_polygons(mask: &Mask, tolerance: f64) -> Vec<Polygon> {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let fg = |r: isize, c: isize| r >= 0 && c >= 0 && r < h && c < w && mask.get(r as usize, c as usize);
    // directed boundary edges keyed by start vertex (x, y); direction (dx, dy)
    let mut out: HashMap<(isize, isize), Vec<(isize, isize)>> = HashMap::new();
    let mut edges: Vec<((isize, isize), (isize, isize))> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !fg(r, c) {
                continue;
            }
            let mut add = |start: (isize, isize), dir: (isize, isize)| {
                out.entry(start).or_default().push(dir);
                edges.push((start, dir));
            };
            if !fg(r - 1, c) {
                add((c, r), (1, 0));
            }
            if !fg(r, c + 1) {
                add((c + 1, r), (0, 1));
            }
            if !fg(r + 1, c) {
                add((c + 1, r + 1), (-1, 0));
            }
            if !fg(r, c - 1) {
                add((c, r + 1), (0, -1));
            }
        }
    }
    let mut used: HashMap<((isize, isize), (isize, isize)), bool> = edges.iter().map(|&e| (e, false)).collect();
    let mut polys = Vec::new();
    for &start in &edges {
        if used[&start] {
            continue;
        }
        let mut loop_pts: Vec<[f64; 2]> = Vec::new();
        let mut cur = start;
        loop {
            used.insert(cur, true);
            let ((x, y), (dx, dy)) = cur;
            loop_pts.push([x as f64 + dx as f64 * 0.5, y as f64 + dy as f64 * 0.5]);
            let next_v = (x + dx, y + dy);
            // prefer right turn, then straight, then left: keeps diagonal pixels apart
            let prefs = [(-dy, dx), (dx, dy), (dy, -dx)];
            let cands = out.get(&next_v).cloned().unwrap_or_default();
            let next = prefs.iter().find(|d| cands.contains(d) && !used[&(next_v, **d)]).map(|&d| (next_v, d));
            match next {
                Some(n) => cur = n,
                None => break,
            }
        }
        let poly = Polygon::new(loop_pts);
        // outer loops run clockwise on screen, i.e. positive signed area with y down
        if poly.signed_area() > 0.0 {
            polys.push(simplify_closed(&merge_collinear(&poly), tolerance));
        }
    }
    polys
}

fn merge_collinear(poly: &Polygon) -> Polygon {
    let n = poly.points.len();
    if n < 4 {
        return poly.clone();
    }
    let pts: Vec<[f64; 2]> = (0..n)
        .filter(|&i| {
            let a = poly.points[(i + n - 1) % n];
            let b = poly.points[i];
            let c = poly.points[(i + 1) % n];
            let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
            cross.abs() > 1e-12
        })
        .map(|i| poly.points[i])
        .collect();
    if pts.len() >= 3 {
        Polygon::new(pts)
    } else {
        poly.clone()
    }
}

/// Douglas-Peucker on a closed ring.
pub fn simplify_closed(poly: &Polygon, tolerance: f64) -> Polygon {
    let n = poly.points.len();
    if tolerance <= 0.0 || n <= 4 {
        return poly.clone();
    }
    let p0 = poly.points[0];
    let far = (1..n).max_by(|&a, &b| dist2(poly.points[a], p0).partial_cmp(&dist2(poly.points[b], p0)).unwrap()).unwrap_or(n / 2);
    let mut keep = vec![false; n];
    keep[0] = true;
    keep[far] = true;
    let ring: Vec<[f64; 2]> = poly.points.iter().copied().chain(std::iter::once(p0)).collect();
    dp(&ring, 0, far, tolerance, &mut keep);
    dp(&ring, far, n, tolerance, &mut keep);
    let pts: Vec<[f64; 2]> = (0..n).filter(|&i| keep[i]).map(|i| poly.points[i]).collect();
    if pts.len() >= 3 {
        Polygon::new(pts)
    } else {
        poly.clone()
    }
}

fn dp(ring: &[[f64; 2]], lo: usize, hi: usize, tol: f64, keep: &mut [bool]) {
    if hi <= lo + 1 {
        return;
    }
    let (a, b) = (ring[lo], ring[hi]);
    let (mut best, mut best_d) = (lo, -1.0);
    for (i, &p) in ring.iter().enumerate().take(hi).skip(lo + 1) {
        let d = segment_distance(p, a, b);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }
    if best_d > tol {
        keep[best % keep.len()] = true;
        dp(ring, lo, best, tol, keep);
        dp(ring, best, hi, tol, keep);
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (vx, vy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = vx * vx + vy * vy;
    if len2 == 0.0 {
        return dist2(p, a).sqrt();
    }
    let t = (((p[0] - a[0]) * vx + (p[1] - a[1]) * vy) / len2).clamp(0.0, 1.0);
    dist2(p, [a[0] + t * vx, a[1] + t * vy]).sqrt()
}
