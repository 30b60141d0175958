//! Measurements over generated scenes.

use scalpel_seg::geometry::{rasterize_all, Mask};
use scalpel_seg::synth::{render_scene, SceneStyle, ShiftKind, ShiftSpec};

pub fn iou(a: &Mask, b: &Mask) -> f64 {
    let inter = a.data().iter().zip(b.data()).filter(|(x, y)| **x && **y).count();
    let union = a.data().iter().zip(b.data()).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Styles covering plain, occluded, sheared and recoloured scenes.
fn styles() -> Vec<SceneStyle> {
    let occluded = ShiftSpec { kind: ShiftKind::Occlusion, magnitude: 1.0, seed: 0 }.apply(&SceneStyle::red_globe());
    let sheared = ShiftSpec { kind: ShiftKind::Viewpoint, magnitude: 1.0, seed: 0 }.apply(&SceneStyle::red_globe());
    vec![SceneStyle::source(), SceneStyle::red_globe(), occluded, sheared]
}

/// Per-object IoU between the rasterized annotation and the renderer's
/// silhouette, over `scenes` scenes.
pub fn fidelity(scenes: u64) -> Vec<f64> {
    let styles = styles();
    let mut out = Vec::new();
    for i in 0..scenes {
        let style = &styles[i as usize % styles.len()];
        let size = if i % 2 == 0 { 64 } else { 32 };
        let scene = render_scene(style, size, [1, 4], 77, i, usize::MAX);
        for (inst, sil) in scene.sample.instances.iter().zip(&scene.silhouettes) {
            out.push(iou(&rasterize_all(&inst.polygons, size, size), sil));
        }
    }
    out
}
