//! Bilinear sampling on single-channel planes, pixel centers at integer
//! coordinates.

/// Samples `plane` (row-major `h x w`) at continuous `(y, x)`, clamping
/// to the border pixels. Callers decide what lies outside the frame.
pub(crate) fn bilinear_clamped(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Source coordinate of destination index `i` when resizing `src` samples onto
/// `dst` samples with aligned outer edges.
pub(crate) fn resize_coord(i: usize, src: f64, dst: usize) -> f64 {
    (i as f64 + 0.5) * src / dst as f64 - 0.5
}
