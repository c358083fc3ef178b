//! Brute-force boundary-band computation for Boundary IoU checks: its own
//! flood fill for the outer contour and a direct double loop for Chebyshev
//! distances, no dilation tricks.

fn exterior_region(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut ext = vec![false; h * w];
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if (y == 0 || x == 0 || y == h - 1 || x == w - 1) && !mask[y * w + x] {
                ext[y * w + x] = true;
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        let mut visit = |yy: isize, xx: isize| {
            if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                let i = yy as usize * w + xx as usize;
                if !mask[i] && !ext[i] {
                    ext[i] = true;
                    stack.push((yy as usize, xx as usize));
                }
            }
        };
        visit(y as isize - 1, x as isize);
        visit(y as isize + 1, x as isize);
        visit(y as isize, x as isize - 1);
        visit(y as isize, x as isize + 1);
    }
    ext
}

/// Mask pixels on the outer contour (4-adjacent to the exterior region or on
/// the image border).
pub fn outer_contour(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let ext = exterior_region(mask, h, w);
    let mut contour = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let near_ext = (y > 0 && ext[(y - 1) * w + x])
                || (y + 1 < h && ext[(y + 1) * w + x])
                || (x > 0 && ext[y * w + x - 1])
                || (x + 1 < w && ext[y * w + x + 1]);
            if edge || near_ext {
                contour.push((y, x));
            }
        }
    }
    contour
}

/// The mask restricted to pixels within Chebyshev distance `r` of its outer
/// contour, by direct minimum-distance scan.
pub fn boundary_region(mask: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let contour = outer_contour(mask, h, w);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let near = contour.iter().any(|&(cy, cx)| {
                let dy = (cy as isize - y as isize).unsigned_abs();
                let dx = (cx as isize - x as isize).unsigned_abs();
                dy.max(dx) <= r
            });
            out[y * w + x] = near;
        }
    }
    out
}

/// Boundary IoU via the brute-force regions.
pub fn boundary_iou(a: &[bool], b: &[bool], h: usize, w: usize, r: usize) -> f64 {
    let ra = boundary_region(a, h, w, r);
    let rb = boundary_region(b, h, w, r);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in ra.iter().zip(&rb) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
