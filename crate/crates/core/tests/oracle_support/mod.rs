//! Independent oracles shared by the geometry and criterion test suites.
//! These deliberately avoid the library's closed-form / clipping / solver
//! code paths.

use fewshape::geometry::RotatedBox;

/// Membership test by rotating the point into the box frame.
pub fn point_in_box(b: &RotatedBox, x: f64, y: f64) -> bool {
    let (s, c) = b.theta.sin_cos();
    let dx = x - b.x;
    let dy = y - b.y;
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= b.w / 2.0 && v.abs() <= b.h / 2.0
}

/// IoU by counting cell centers of a `res × res` grid over the joint
/// bounding box of the two boxes.
pub fn raster_iou(a: &RotatedBox, b: &RotatedBox, res: usize) -> f64 {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for bx in [a, b] {
        for p in bx.corners() {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
    }
    let step_x = (hi[0] - lo[0]) / res as f64;
    let step_y = (hi[1] - lo[1]) / res as f64;
    let mut in_a = 0u64;
    let mut in_b = 0u64;
    let mut both = 0u64;
    for iy in 0..res {
        let y = lo[1] + (iy as f64 + 0.5) * step_y;
        for ix in 0..res {
            let x = lo[0] + (ix as f64 + 0.5) * step_x;
            let pa = point_in_box(a, x, y);
            let pb = point_in_box(b, x, y);
            in_a += pa as u64;
            in_b += pb as u64;
            both += (pa && pb) as u64;
        }
    }
    let union = in_a + in_b - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// Eigendecomposition of a symmetric 2×2 matrix: (eigenvalues, eigenvectors
/// as columns).
pub fn eig2x2_sym(m: [[f64; 2]; 2]) -> ([f64; 2], [[f64; 2]; 2]) {
    let (a, b, c) = (m[0][0], m[0][1], m[1][1]);
    let tr = a + c;
    let diff = a - c;
    let disc = (diff * diff / 4.0 + b * b).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = tr / 2.0 - disc;
    let v1 = if b.abs() > 1e-300 {
        let n = (b * b + (l1 - a) * (l1 - a)).sqrt();
        [b / n, (l1 - a) / n]
    } else if a >= c {
        [1.0, 0.0]
    } else {
        [0.0, 1.0]
    };
    let v2 = [-v1[1], v1[0]];
    ([l1, l2], [[v1[0], v2[0]], [v1[1], v2[1]]])
}

/// Matrix square root via eigendecomposition: `V·diag(√λ)·Vᵀ`.
pub fn sqrt2x2_eig(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let (lambda, v) = eig2x2_sym(m);
    let s = [lambda[0].max(0.0).sqrt(), lambda[1].max(0.0).sqrt()];
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = s[0] * v[i][0] * v[j][0] + s[1] * v[i][1] * v[j][1];
        }
    }
    out
}

pub fn matmul2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Squared Wasserstein distance evaluated through the eigendecomposition
/// route (no closed-form cross-trace shortcut).
pub fn wasserstein_sq_eig(
    m1: [f64; 2],
    s1: [[f64; 2]; 2],
    m2: [f64; 2],
    s2: [[f64; 2]; 2],
) -> f64 {
    let dm = (m1[0] - m2[0]).powi(2) + (m1[1] - m2[1]).powi(2);
    let r1 = sqrt2x2_eig(s1);
    let inner = matmul2(matmul2(r1, s2), r1);
    let cross = sqrt2x2_eig(inner);
    dm + s1[0][0] + s1[1][1] + s2[0][0] + s2[1][1] - 2.0 * (cross[0][0] + cross[1][1])
}

/// Minimum-cost assignment of every column (target) to a distinct row
/// (prediction) by exhaustive search over injections. `cost` is row-major
/// `p × t` with `p ≥ t`.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> (f64, Vec<(usize, usize)>) {
    let p = cost.len();
    let t = if p == 0 { 0 } else { cost[0].len() };
    assert!(p >= t, "oracle requires at least as many rows as columns");
    let k = p.min(t);
    let mut best = (f64::INFINITY, Vec::new());
    let mut rows: Vec<usize> = Vec::with_capacity(k);
    let mut used = vec![false; p];
    fn recurse(
        cost: &[Vec<f64>],
        col: usize,
        k: usize,
        rows: &mut Vec<usize>,
        used: &mut Vec<bool>,
        acc: f64,
        best: &mut (f64, Vec<(usize, usize)>),
    ) {
        if col == k {
            if acc < best.0 {
                best.0 = acc;
                best.1 = rows.iter().enumerate().map(|(c, &r)| (r, c)).collect();
            }
            return;
        }
        for r in 0..cost.len() {
            if used[r] {
                continue;
            }
            used[r] = true;
            rows.push(r);
            recurse(cost, col + 1, k, rows, used, acc + cost[r][col], best);
            rows.pop();
            used[r] = false;
        }
    }
    recurse(cost, 0, k, &mut rows, &mut used, 0.0, &mut best);
    best
}
