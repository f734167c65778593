//! Rotated-box algebra: Gaussian conversion, Wasserstein distance, the
//! scale-invariant box loss, polygon IoU, and Bezier outlines.
//!
//! Everything here is pure f64 math; the differentiable version of the box
//! loss is assembled in `criterion` from the same formulas.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

/// Signed areas below this count as degenerate (px²).
pub const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid box: width {w} and height {h} must be positive")]
    InvalidBox { w: f64, h: f64 },
    #[error("covariance is not symmetric positive-definite: {0}")]
    NotSpd(String),
    #[error("degenerate target area {0}")]
    DegenerateTarget(f64),
    #[error("loss modulation tau must exceed 1, got {0}")]
    InvalidTau(f64),
    #[error("curve parameter {0} outside [0, 1]")]
    ParamOutOfRange(f64),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("need at least 2 samples per curve, got {0}")]
    TooFewSamples(usize),
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// Rotated rectangle: center `(x, y)` in pixels, width along the box axis at
/// angle `theta` (radians, canonicalized to `[−π/2, π/2)`), height across it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotatedBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Wraps an angle into `[−π/2, π/2)`.
pub fn canonical_angle(theta: f64) -> f64 {
    let mut t = theta % PI;
    if t >= FRAC_PI_2 {
        t -= PI;
    }
    if t < -FRAC_PI_2 {
        t += PI;
    }
    t
}

impl RotatedBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        if !(w > 0.0) || !(h > 0.0) {
            return Err(GeometryError::InvalidBox { w, h });
        }
        Ok(Self {
            x,
            y,
            w,
            h,
            theta: canonical_angle(theta),
        })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corners in order (front-left, front-right, back-right, back-left)
    /// relative to the box axis.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let rot = |dx: f64, dy: f64| [self.x + c * dx - s * dy, self.y + s * dx + c * dy];
        [rot(-hw, -hh), rot(hw, -hh), rot(hw, hh), rot(-hw, hh)]
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon::new(self.corners().to_vec()).expect("4 corners")
    }

    /// Uniformly scales the center and the side lengths (angle unchanged).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x: self.x * s,
            y: self.y * s,
            w: self.w * s,
            h: self.h * s,
            theta: self.theta,
        }
    }
}

/// 2-D Gaussian stand-in for a rotated box: mean and SPD covariance.
#[derive(Debug, Clone, Copy)]
pub struct GaussianBox {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl GaussianBox {
    pub fn new(mean: [f64; 2], cov: [[f64; 2]; 2]) -> Result<Self> {
        if (cov[0][1] - cov[1][0]).abs() > 1e-12 {
            return Err(GeometryError::NotSpd(format!(
                "asymmetric off-diagonals {} vs {}",
                cov[0][1], cov[1][0]
            )));
        }
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let trace = cov[0][0] + cov[1][1];
        if det <= 0.0 || trace <= 0.0 {
            return Err(GeometryError::NotSpd(format!("det {det}, trace {trace}")));
        }
        Ok(Self { mean, cov })
    }

    pub fn det(&self) -> f64 {
        self.cov[0][0] * self.cov[1][1] - self.cov[0][1] * self.cov[1][0]
    }

    pub fn trace(&self) -> f64 {
        self.cov[0][0] + self.cov[1][1]
    }
}

/// Converts a rotated box into its Gaussian form: mean at the center and
/// `Σ = M²`, where `M` rotates `diag(w/2, h/2)` by the box angle.
pub fn box_to_gaussian(b: &RotatedBox) -> Result<GaussianBox> {
    if !(b.w > 0.0) || !(b.h > 0.0) {
        return Err(GeometryError::InvalidBox { w: b.w, h: b.h });
    }
    let (s, c) = b.theta.sin_cos();
    let (hw, hh) = (b.w / 2.0, b.h / 2.0);
    let m00 = hw * c * c + hh * s * s;
    let m01 = (hw - hh) * c * s;
    let m11 = hw * s * s + hh * c * c;
    // Σ = M² for symmetric M
    let cov = [
        [m00 * m00 + m01 * m01, m01 * (m00 + m11)],
        [m01 * (m00 + m11), m01 * m01 + m11 * m11],
    ];
    GaussianBox::new([b.x, b.y], cov)
}

/// Analytic square root of a 2×2 SPD matrix:
/// `M^½ = (M + √det(M)·I) / √(tr(M) + 2·√det(M))`.
pub fn sqrt2x2(m: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let s = det.max(0.0).sqrt();
    let denom = (m[0][0] + m[1][1] + 2.0 * s).sqrt();
    [
        [(m[0][0] + s) / denom, m[0][1] / denom],
        [m[1][0] / denom, (m[1][1] + s) / denom],
    ]
}

/// Squared 2-Wasserstein distance between Gaussians:
/// `‖m₁−m₂‖² + tr(Σ₁+Σ₂−2(Σ₁^½Σ₂Σ₁^½)^½)`, with the cross trace evaluated in
/// closed form as `√(tr(Σ₁Σ₂) + 2√(detΣ₁·detΣ₂))`.
pub fn wasserstein_sq(a: &GaussianBox, b: &GaussianBox) -> Result<f64> {
    // re-validate: callers may have constructed covariances directly
    GaussianBox::new(a.mean, a.cov)?;
    GaussianBox::new(b.mean, b.cov)?;
    let dx = a.mean[0] - b.mean[0];
    let dy = a.mean[1] - b.mean[1];
    let tr_prod = a.cov[0][0] * b.cov[0][0]
        + 2.0 * a.cov[0][1] * b.cov[0][1]
        + a.cov[1][1] * b.cov[1][1];
    let cross = (tr_prod + 2.0 * (a.det() * b.det()).sqrt()).sqrt();
    Ok((dx * dx + dy * dy + a.trace() + b.trace() - 2.0 * cross).max(0.0))
}

/// How the box loss normalizes scale: by the square root of the target area
/// (the default, which makes the loss scale-invariant) or literally by the
/// area itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaNorm {
    #[default]
    Sqrt,
    Literal,
}

/// Bounded box-regression loss `1 − 1/(τ + ln(d² + 1))` on boxes normalized
/// so the target has unit area. The value lives in `[1 − 1/τ, 1)`.
pub fn gwd_loss_term(pred: &RotatedBox, target: &RotatedBox, tau: f64) -> Result<f64> {
    gwd_loss_term_with(pred, target, tau, AreaNorm::Sqrt)
}

pub fn gwd_loss_term_with(
    pred: &RotatedBox,
    target: &RotatedBox,
    tau: f64,
    norm: AreaNorm,
) -> Result<f64> {
    if !(tau > 1.0) {
        return Err(GeometryError::InvalidTau(tau));
    }
    let area = target.area();
    if !area.is_finite() || area < 1e-12 {
        return Err(GeometryError::DegenerateTarget(area));
    }
    let scale = match norm {
        AreaNorm::Sqrt => 1.0 / area.sqrt(),
        AreaNorm::Literal => 1.0 / area,
    };
    let d2 = wasserstein_sq(
        &box_to_gaussian(&pred.scaled(scale))?,
        &box_to_gaussian(&target.scaled(scale))?,
    )?;
    Ok(1.0 - 1.0 / (tau + (d2 + 1.0).ln()))
}

// ---------------------------------------------------------------------------
// Polygons
// ---------------------------------------------------------------------------

/// Simple polygon stored with positive (counter-clockwise) signed area.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    verts: Vec<[f64; 2]>,
}

fn shoelace(verts: &[[f64; 2]]) -> f64 {
    let n = verts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = verts[i];
        let [x1, y1] = verts[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

impl Polygon {
    /// Canonicalizes orientation so the signed area is non-negative.
    pub fn new(mut verts: Vec<[f64; 2]>) -> Result<Self> {
        if verts.len() < 3 {
            return Err(GeometryError::TooFewVertices(verts.len()));
        }
        if shoelace(&verts) < 0.0 {
            verts.reverse();
        }
        Ok(Self { verts })
    }

    pub fn verts(&self) -> &[[f64; 2]] {
        &self.verts
    }

    pub fn area(&self) -> f64 {
        shoelace(&self.verts)
    }

    pub fn is_degenerate(&self) -> bool {
        self.area() < AREA_EPS
    }

    /// Drops consecutive duplicates and collinear runs.
    pub fn simplified(&self, eps: f64) -> Polygon {
        let mut out: Vec<[f64; 2]> = Vec::new();
        let n = self.verts.len();
        for i in 0..n {
            let prev = self.verts[(i + n - 1) % n];
            let cur = self.verts[i];
            let next = self.verts[(i + 1) % n];
            let dup = (cur[0] - prev[0]).abs() < eps && (cur[1] - prev[1]).abs() < eps;
            if dup {
                continue;
            }
            if cross(prev, cur, next).abs() < eps {
                continue;
            }
            out.push(cur);
        }
        if out.len() < 3 {
            return self.clone();
        }
        Polygon { verts: out }
    }

    /// True when no two non-adjacent edges properly intersect.
    pub fn is_simple(&self) -> bool {
        let n = self.verts.len();
        for i in 0..n {
            let a0 = self.verts[i];
            let a1 = self.verts[(i + 1) % n];
            for j in i + 1..n {
                // skip adjacent edges (shared vertex)
                if j == i || (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let b0 = self.verts[j];
                let b1 = self.verts[(j + 1) % n];
                let d1 = cross(a0, a1, b0);
                let d2 = cross(a0, a1, b1);
                let d3 = cross(b0, b1, a0);
                let d4 = cross(b0, b1, a1);
                if ((d1 > 0.0) != (d2 > 0.0)) && ((d3 > 0.0) != (d4 > 0.0)) {
                    return false;
                }
            }
        }
        true
    }

    /// True when `self` is convex (all turns the same way, up to AREA_EPS).
    pub fn is_convex(&self) -> bool {
        let n = self.verts.len();
        self.verts.iter().enumerate().all(|(i, &v)| {
            cross(v, self.verts[(i + 1) % n], self.verts[(i + 2) % n]) > -AREA_EPS
        })
    }

    /// Fan/ear decomposition into triangles. Exact for simple polygons.
    pub fn triangulate(&self) -> Vec<[[f64; 2]; 3]> {
        let mut verts: Vec<[f64; 2]> = self.verts.clone();
        let mut tris = Vec::new();
        let mut guard = 0usize;
        while verts.len() > 3 {
            let n = verts.len();
            let mut clipped = false;
            for i in 0..n {
                let prev = verts[(i + n - 1) % n];
                let cur = verts[i];
                let next = verts[(i + 1) % n];
                let c = cross(prev, cur, next);
                if c.abs() < AREA_EPS {
                    // collinear vertex contributes no area
                    verts.remove(i);
                    clipped = true;
                    break;
                }
                if c < 0.0 {
                    continue; // reflex corner, not an ear
                }
                let ear_ok = verts.iter().enumerate().all(|(j, &p)| {
                    if j == (i + n - 1) % n || j == i || j == (i + 1) % n {
                        return true;
                    }
                    !point_in_triangle(p, prev, cur, next)
                });
                if ear_ok {
                    tris.push([prev, cur, next]);
                    verts.remove(i);
                    clipped = true;
                    break;
                }
            }
            if !clipped {
                // numerically stuck (nearly-degenerate input); fall back to a fan
                for i in 1..verts.len() - 1 {
                    tris.push([verts[0], verts[i], verts[i + 1]]);
                }
                return tris;
            }
            guard += 1;
            if guard > 10_000 {
                break;
            }
        }
        if verts.len() == 3 {
            tris.push([verts[0], verts[1], verts[2]]);
        }
        tris
    }
}

fn point_in_triangle(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> bool {
    let d1 = cross(a, b, p);
    let d2 = cross(b, c, p);
    let d3 = cross(c, a, p);
    let has_neg = d1 < -AREA_EPS || d2 < -AREA_EPS || d3 < -AREA_EPS;
    let has_pos = d1 > AREA_EPS || d2 > AREA_EPS || d3 > AREA_EPS;
    !(has_neg && has_pos)
}

/// Clips `subject` against a convex `clip` polygon (Sutherland–Hodgman).
/// Both must be CCW; the result is the vertex list of the intersection.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let e0 = clip[i];
        let e1 = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let m = input.len();
        for j in 0..m {
            let cur = input[j];
            let prev = input[(j + m - 1) % m];
            let cur_in = cross(e0, e1, cur) >= 0.0;
            let prev_in = cross(e0, e1, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    if let Some(p) = line_intersect(prev, cur, e0, e1) {
                        output.push(p);
                    }
                }
                output.push(cur);
            } else if prev_in {
                if let Some(p) = line_intersect(prev, cur, e0, e1) {
                    output.push(p);
                }
            }
        }
    }
    output
}

fn line_intersect(a0: [f64; 2], a1: [f64; 2], b0: [f64; 2], b1: [f64; 2]) -> Option<[f64; 2]> {
    let r = [a1[0] - a0[0], a1[1] - a0[1]];
    let s = [b1[0] - b0[0], b1[1] - b0[1]];
    let denom = r[0] * s[1] - r[1] * s[0];
    if denom.abs() < 1e-300 {
        return None;
    }
    let t = ((b0[0] - a0[0]) * s[1] - (b0[1] - a0[1]) * s[0]) / denom;
    Some([a0[0] + t * r[0], a0[1] + t * r[1]])
}

fn convex_intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let inter = clip_convex(a, b);
    if inter.len() < 3 {
        return 0.0;
    }
    shoelace(&inter).max(0.0)
}

/// Intersection area of two simple polygons via triangle decomposition.
pub fn intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    if a.is_convex() && b.is_convex() {
        return convex_intersection_area(a.verts(), b.verts());
    }
    let ta = a.triangulate();
    let tb = b.triangulate();
    let mut acc = 0.0;
    for t in &ta {
        for u in &tb {
            acc += convex_intersection_area(&t[..], &u[..]);
        }
    }
    acc
}

/// IoU plus a flag marking degenerate inputs (which force the value to 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IouResult {
    pub value: f64,
    pub degenerate: bool,
}

pub fn polygon_iou(a: &Polygon, b: &Polygon) -> IouResult {
    if a.is_degenerate() || b.is_degenerate() {
        return IouResult {
            value: 0.0,
            degenerate: true,
        };
    }
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union < AREA_EPS {
        return IouResult {
            value: 0.0,
            degenerate: true,
        };
    }
    IouResult {
        value: (inter / union).clamp(0.0, 1.0),
        degenerate: false,
    }
}

/// Intersection-over-union of two rotated boxes via convex clipping.
pub fn rotated_iou(a: &RotatedBox, b: &RotatedBox) -> f64 {
    polygon_iou(&a.to_polygon(), &b.to_polygon()).value
}

// ---------------------------------------------------------------------------
// Bezier regions
// ---------------------------------------------------------------------------

/// Text region bounded by two cubic Bezier curves: control points 0..=3 trace
/// the top boundary left to right, 4..=7 the bottom boundary right to left.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BezierRegion {
    pub points: [[f64; 2]; 8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Top,
    Bottom,
}

/// Cubic Bernstein evaluation on the chosen boundary.
pub fn bezier_eval(region: &BezierRegion, t: f64, boundary: Boundary) -> Result<[f64; 2]> {
    if !(0.0..=1.0).contains(&t) {
        return Err(GeometryError::ParamOutOfRange(t));
    }
    let p = match boundary {
        Boundary::Top => &region.points[0..4],
        Boundary::Bottom => &region.points[4..8],
    };
    let u = 1.0 - t;
    let b = [u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t];
    let mut out = [0.0; 2];
    for k in 0..4 {
        out[0] += b[k] * p[k][0];
        out[1] += b[k] * p[k][1];
    }
    Ok(out)
}

/// Closed outline sampled from a Bezier region.
#[derive(Debug, Clone)]
pub struct SampledOutline {
    pub polygon: Polygon,
    /// The sampled boundary crossed itself; the polygon is still returned.
    pub self_intersecting: bool,
}

/// Samples both curves at `samples_per_curve` parameters each and joins them
/// into a closed polygon (top left→right, then bottom right→left).
pub fn bezier_to_polygon(region: &BezierRegion, samples_per_curve: usize) -> Result<SampledOutline> {
    if samples_per_curve < 2 {
        return Err(GeometryError::TooFewSamples(samples_per_curve));
    }
    let s = samples_per_curve;
    let mut verts = Vec::with_capacity(2 * s);
    for i in 0..s {
        let t = i as f64 / (s - 1) as f64;
        verts.push(bezier_eval(region, t, Boundary::Top)?);
    }
    for i in 0..s {
        let t = i as f64 / (s - 1) as f64;
        verts.push(bezier_eval(region, t, Boundary::Bottom)?);
    }
    let polygon = Polygon::new(verts)?;
    let self_intersecting = !polygon.is_simple();
    Ok(SampledOutline {
        polygon,
        self_intersecting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxy(x: f64, y: f64, w: f64, h: f64, t: f64) -> RotatedBox {
        RotatedBox::new(x, y, w, h, t).unwrap()
    }

    #[test]
    fn axis_aligned_gaussian_is_diagonal() {
        let g = box_to_gaussian(&boxy(0.0, 0.0, 4.0, 2.0, 0.0)).unwrap();
        assert_eq!(g.mean, [0.0, 0.0]);
        assert!((g.cov[0][0] - 4.0).abs() < 1e-12);
        assert!((g.cov[1][1] - 1.0).abs() < 1e-12);
        assert!(g.cov[0][1].abs() < 1e-12);
    }

    #[test]
    fn swap_sides_and_rotate_quarter_turn_is_identical() {
        let a = box_to_gaussian(&boxy(0.0, 0.0, 4.0, 2.0, 0.0)).unwrap();
        let b = box_to_gaussian(&boxy(0.0, 0.0, 2.0, 4.0, FRAC_PI_2)).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((a.cov[i][j] - b.cov[i][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn square_gaussian_is_isotropic_for_any_angle() {
        let g = box_to_gaussian(&boxy(1.0, 2.0, 2.0, 2.0, 0.7)).unwrap();
        assert!((g.cov[0][0] - 1.0).abs() < 1e-12);
        assert!((g.cov[1][1] - 1.0).abs() < 1e-12);
        assert!(g.cov[0][1].abs() < 1e-12);
    }

    #[test]
    fn wasserstein_trivia() {
        let a = box_to_gaussian(&boxy(0.0, 0.0, 3.0, 2.0, 0.4)).unwrap();
        assert_eq!(wasserstein_sq(&a, &a).unwrap(), 0.0);
        let b = box_to_gaussian(&boxy(3.0, 4.0, 3.0, 2.0, 0.4)).unwrap();
        assert!((wasserstein_sq(&a, &b).unwrap() - 25.0).abs() < 1e-10);
    }

    #[test]
    fn wasserstein_commuting_diagonal_case() {
        let a = GaussianBox::new([0.0, 0.0], [[4.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = GaussianBox::new([0.0, 0.0], [[1.0, 0.0], [0.0, 4.0]]).unwrap();
        // commuting SPD matrices: d² = ‖Σ₁^½ − Σ₂^½‖_F² = (2−1)² + (1−2)²
        assert!((wasserstein_sq(&a, &b).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn non_spd_is_rejected() {
        assert!(GaussianBox::new([0.0; 2], [[1.0, 2.0], [2.0, 1.0]]).is_err());
        assert!(GaussianBox::new([0.0; 2], [[1.0, 0.0], [0.1, 1.0]]).is_err());
    }

    #[test]
    fn gwd_floor_at_perfect_match() {
        let t = boxy(5.0, 5.0, 8.0, 2.0, 0.3);
        let v = gwd_loss_term(&t, &t, 3.0).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gwd_is_scale_invariant() {
        let p = boxy(1.0, 2.0, 6.0, 2.0, 0.2);
        let t = boxy(2.0, 3.0, 5.0, 2.5, -0.1);
        let base = gwd_loss_term(&p, &t, 3.0).unwrap();
        for s in [0.1, 10.0, 100.0] {
            let v = gwd_loss_term(&p.scaled(s), &t.scaled(s), 3.0).unwrap();
            assert!((v - base).abs() < 1e-9, "scale {s}: {v} vs {base}");
        }
    }

    #[test]
    fn gwd_worked_example() {
        // pred and target share h=2, w=4, θ=0; centers differ by (3,4).
        let p = boxy(0.0, 0.0, 4.0, 2.0, 0.0);
        let t = boxy(3.0, 4.0, 4.0, 2.0, 0.0);
        let expect = 1.0 - 1.0 / (3.0 + (25.0 / 8.0 + 1.0_f64).ln());
        let v = gwd_loss_term(&p, &t, 3.0).unwrap();
        assert!((v - expect).abs() < 1e-12);
        // cross-check the normalized distance through wasserstein_sq itself
        let s = 1.0 / t.area().sqrt();
        let d2 = wasserstein_sq(
            &box_to_gaussian(&p.scaled(s)).unwrap(),
            &box_to_gaussian(&t.scaled(s)).unwrap(),
        )
        .unwrap();
        assert!((d2 - 25.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn gwd_rejects_bad_inputs() {
        let t = boxy(0.0, 0.0, 2.0, 2.0, 0.0);
        assert!(gwd_loss_term(&t, &t, 1.0).is_err());
        assert!(RotatedBox::new(0.0, 0.0, 0.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn iou_identical_and_disjoint() {
        let a = boxy(10.0, 10.0, 6.0, 3.0, 0.5);
        assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-9);
        let b = boxy(100.0, 100.0, 6.0, 3.0, 0.5);
        assert_eq!(rotated_iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_against_known_octagon_overlap() {
        // unit square vs itself rotated 45°: intersection is a regular octagon
        let a = boxy(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = boxy(0.0, 0.0, 1.0, 1.0, std::f64::consts::FRAC_PI_4);
        let inter = 2.0 * (2.0_f64.sqrt() - 1.0);
        let expect = inter / (2.0 - inter);
        assert!((rotated_iou(&a, &b) - expect).abs() < 1e-9);
    }

    #[test]
    fn degenerate_polygon_flags_zero() {
        let line = Polygon::new(vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]).unwrap();
        let sq = boxy(0.5, 0.5, 1.0, 1.0, 0.0).to_polygon();
        let r = polygon_iou(&line, &sq);
        assert_eq!(r.value, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn bezier_endpoints_and_collinear_midpoint() {
        let region = BezierRegion {
            points: [
                [0.0, 0.0], [0.0, 1.0], [0.0, 2.0], [0.0, 3.0],
                [2.0, 3.0], [2.0, 2.0], [2.0, 1.0], [2.0, 0.0],
            ],
        };
        assert_eq!(bezier_eval(&region, 0.0, Boundary::Top).unwrap(), [0.0, 0.0]);
        assert_eq!(bezier_eval(&region, 1.0, Boundary::Top).unwrap(), [0.0, 3.0]);
        let mid = bezier_eval(&region, 0.5, Boundary::Top).unwrap();
        assert!((mid[0]).abs() < 1e-15 && (mid[1] - 1.5).abs() < 1e-15);
        assert!(bezier_eval(&region, 1.2, Boundary::Top).is_err());
    }

    #[test]
    fn straight_bezier_rectangle_collapses_to_corners() {
        // a 4×2 rectangle written as two straight cubic edges
        let lerp = |a: [f64; 2], b: [f64; 2], t: f64| {
            [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]
        };
        let tl = [0.0, 0.0];
        let tr = [4.0, 0.0];
        let br = [4.0, 2.0];
        let bl = [0.0, 2.0];
        let region = BezierRegion {
            points: [
                tl, lerp(tl, tr, 1.0 / 3.0), lerp(tl, tr, 2.0 / 3.0), tr,
                br, lerp(br, bl, 1.0 / 3.0), lerp(br, bl, 2.0 / 3.0), bl,
            ],
        };
        let outline = bezier_to_polygon(&region, 16).unwrap();
        assert!(!outline.self_intersecting);
        let simple = outline.polygon.simplified(1e-9);
        assert_eq!(simple.verts().len(), 4);
        assert!((outline.polygon.area() - 8.0).abs() < 1e-9);

        let quad = bezier_to_polygon(&region, 2).unwrap();
        assert_eq!(quad.polygon.verts().len(), 4);
    }
}
