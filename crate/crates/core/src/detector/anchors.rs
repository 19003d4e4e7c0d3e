use super::bbox::BBox;

/// Square anchors, one per size, centred on every cell of a `rows×cols`
/// feature map and clipped to the image. Order is row, column, size.
pub fn generate_anchors(
    rows: usize,
    cols: usize,
    stride: usize,
    sizes: &[f64],
    image_w: f64,
    image_h: f64,
) -> Vec<BBox> {
    let s = stride as f64;
    let mut out = Vec::with_capacity(rows * cols * sizes.len());
    for y in 0..rows {
        for x in 0..cols {
            let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
            for &size in sizes {
                out.push(BBox::from_center(cx, cy, size, size).clip(image_w, image_h));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_and_bounds() {
        let a = generate_anchors(6, 6, 16, &[16.0, 32.0, 48.0], 96.0, 96.0);
        assert_eq!(a.len(), 108);
        assert!(a
            .iter()
            .all(|b| b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 96.0 && b.y2 <= 96.0 && b.is_valid()));
    }

    #[test]
    fn interior_anchor_is_centred_square() {
        let a = generate_anchors(6, 6, 16, &[16.0, 32.0, 48.0], 96.0, 96.0);
        let b = a[(3 * 6 + 3) * 3 + 1];
        assert_eq!(b.center(), (56.0, 56.0));
        assert_eq!((b.width(), b.height()), (32.0, 32.0));
    }
}
