//! Bird's-eye-view footprints of boxes and their overlap.

/// Corners of the `x`-`z` footprint of a box centred at `(x, z)`, rotated by
/// `yaw` about `+y`, with length along the rotated `x` axis.
pub fn footprint(x: f64, z: f64, yaw: f64, length: f64, width: f64) -> [[f64; 2]; 4] {
    let (s, c) = yaw.sin_cos();
    // Object x axis maps to (c, -s), object z axis to (s, c) in world (x, z).
    let ax = [c * length / 2.0, -s * length / 2.0];
    let az = [s * width / 2.0, c * width / 2.0];
    [
        [x - ax[0] - az[0], z - ax[1] - az[1]],
        [x + ax[0] - az[0], z + ax[1] - az[1]],
        [x + ax[0] + az[0], z + ax[1] + az[1]],
        [x - ax[0] + az[0], z - ax[1] + az[1]],
    ]
}

fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        / 2.0
}

fn ccw(poly: &[[f64; 2]; 4]) -> Vec<[f64; 2]> {
    let mut v = poly.to_vec();
    if signed_area(&v) < 0.0 {
        v.reverse();
    }
    v
}

/// Clips `subject` against the convex counter-clockwise polygon `clip`.
fn clip_convex(subject: Vec<[f64; 2]>, clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject;
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let side = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
        let input = std::mem::take(&mut out);
        for k in 0..input.len() {
            let (p, q) = (input[k], input[(k + 1) % input.len()]);
            let (sp, sq) = (side(p), side(q));
            if sp >= 0.0 {
                out.push(p);
            }
            if (sp >= 0.0) != (sq >= 0.0) {
                let t = sp / (sp - sq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

/// Intersection over union of two footprints.
pub fn footprint_iou(a: &[[f64; 2]; 4], b: &[[f64; 2]; 4]) -> f64 {
    let (pa, pb) = (ccw(a), ccw(b));
    let inter = clip_convex(pa.clone(), &pb);
    let i = if inter.len() < 3 { 0.0 } else { signed_area(&inter).abs() };
    let u = signed_area(&pa).abs() + signed_area(&pb).abs() - i;
    if u > 0.0 {
        i / u
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_overlap() {
        let a = footprint(0.0, 0.0, 0.0, 2.0, 2.0);
        let b = footprint(1.0, 0.0, 0.0, 2.0, 2.0);
        assert!((footprint_iou(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
        assert!((footprint_iou(&a, &a) - 1.0).abs() < 1e-12);
        let far = footprint(5.0, 0.0, 0.0, 2.0, 2.0);
        assert_eq!(footprint_iou(&a, &far), 0.0);
    }

    #[test]
    fn rotation_invariance() {
        let a = footprint(0.0, 0.0, 0.0, 4.0, 1.0);
        let b = footprint(0.0, 0.0, std::f64::consts::FRAC_PI_2, 4.0, 1.0);
        // Cross of two 4x1 bars: intersection 1, union 7.
        assert!((footprint_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        let c = footprint(0.0, 0.0, std::f64::consts::PI, 4.0, 1.0);
        assert!((footprint_iou(&a, &c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heading_follows_yaw() {
        let f = footprint(0.0, 0.0, 0.3, 2.0, 0.0);
        let front = [(f[1][0] + f[2][0]) / 2.0, (f[1][1] + f[2][1]) / 2.0];
        assert!((front[0] - 0.3f64.cos()).abs() < 1e-12);
        assert!((front[1] + 0.3f64.sin()).abs() < 1e-12);
    }
}
