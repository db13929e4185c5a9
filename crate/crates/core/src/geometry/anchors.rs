use super::BBox;

/// Reference boxes for every feature-map position.
///
/// Anchors are ordered by row, then column, then scale, then ratio. Each is
/// centered on its cell, `(col·stride + stride/2, row·stride + stride/2)`,
/// with `w = scale·√ratio` and `h = scale/√ratio`, so its area is `scale²`.
pub fn generate_anchors(
    feature_h: usize,
    feature_w: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<BBox> {
    let shapes: Vec<(f64, f64)> = scales
        .iter()
        .flat_map(|&s| ratios.iter().map(move |&r| (s * r.sqrt(), s / r.sqrt())))
        .collect();
    let mut anchors = Vec::with_capacity(feature_h * feature_w * shapes.len());
    for row in 0..feature_h {
        for col in 0..feature_w {
            let cx = col as f64 * stride + 0.5 * stride;
            let cy = row as f64 * stride + 0.5 * stride;
            anchors.extend(shapes.iter().map(|&(w, h)| BBox::new(cx, cy, w, h)));
        }
    }
    anchors
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_single_anchor() {
        let a = generate_anchors(1, 1, 8.0, &[16.0], &[1.0]);
        assert_eq!(a, vec![BBox::new(4.0, 4.0, 16.0, 16.0)]);
    }

    #[test]
    fn anchor_count() {
        let a = generate_anchors(4, 4, 8.0, &[8.0, 16.0, 32.0], &[0.5, 1.0, 2.0]);
        assert_eq!(a.len(), 4 * 4 * 3 * 3);
        assert_eq!(a[9].x, 12.0);
        assert_eq!(a[4 * 9].y, 12.0);
    }

    #[test]
    fn ratio_preserves_area() {
        for r in [0.5, 1.0, 2.0, 3.7] {
            let a = generate_anchors(1, 1, 4.0, &[11.0], &[r])[0];
            assert!((a.w * a.h - 121.0).abs() < 1e-9);
            assert!((a.w / a.h - r).abs() < 1e-9);
        }
    }
}
