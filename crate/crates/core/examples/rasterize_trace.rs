//! Rasterises a star polygon, traces the mask back into polygons and
//! reports how closely the round trip reproduces the pixels.

use scalpel_seg::geometry::{rasterize, rasterize_all, trace_polygons, Polygon};
use scalpel_seg::metrics::mask_iou;

fn main() {
    let (cx, cy) = (16.0, 16.0);
    let points = (0..10)
        .map(|k| {
            let angle = std::f64::consts::PI * k as f64 / 5.0;
            let r = if k % 2 == 0 { 13.0 } else { 6.0 };
            [cx + r * angle.cos(), cy + r * angle.sin()]
        })
        .collect();
    let star = Polygon::new(points);
    let mask = rasterize(&star, 32, 32);
    for r in 0..32 {
        let row: String = (0..32).map(|c| if mask.get(r, c) { '#' } else { '.' }).collect();
        println!("{row}");
    }
    println!("polygon area {:.1}, mask pixels {}", star.area(), mask.count());
    for tol in [0.0, 0.5, 1.0] {
        let traced = trace_polygons(&mask, tol);
        let back = rasterize_all(&traced, 32, 32);
        let vertices: usize = traced.iter().map(Polygon::len).sum();
        println!("tolerance {tol:.1}: {} polygon(s), {vertices} vertices, IoU {:.4}", traced.len(), mask_iou(&mask, &back).unwrap());
    }
}
