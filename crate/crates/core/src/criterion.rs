//! Set matching and the training objective: Hungarian assignment between
//! predicted tokens and ground-truth instances, classification cross-entropy,
//! the scale-invariant Gaussian-Wasserstein box loss, the score-map smooth-L1
//! loss, and their weighted total.

use std::f64::consts::PI;

use fewshape_numerics::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::{box_to_gaussian, gwd_loss_term_with, AreaNorm, BezierRegion, RotatedBox};
use crate::grouper::HeadMode;
use crate::sampler::{ScoreTarget, TokenMeta};

/// Loss scaling factors, with the feature-selection weight on an epoch decay
/// schedule (×0.1 at each listed epoch).
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_f_init: f64,
    pub lambda_f_decay_epochs: Vec<usize>,
    pub tau: f64,
    pub area_norm: AreaNorm,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 0.5,
            lambda_d: 1.0,
            lambda_f_init: 1e-2,
            lambda_f_decay_epochs: vec![35, 45],
            tau: 3.0,
            area_norm: AreaNorm::Sqrt,
        }
    }
}

impl LossWeights {
    pub fn lambda_f(&self, epoch: usize) -> f64 {
        let decays = self
            .lambda_f_decay_epochs
            .iter()
            .filter(|&&e| epoch >= e)
            .count();
        self.lambda_f_init * 0.1f64.powi(decays as i32)
    }
}

/// One-to-one assignment: `pairs[k] = (prediction, target)`, plus the
/// predictions left unmatched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
}

impl Matching {
    pub fn empty(n_preds: usize) -> Self {
        Self {
            pairs: Vec::new(),
            unmatched_preds: (0..n_preds).collect(),
        }
    }

    pub fn matched_flags(&self, n_preds: usize) -> Vec<bool> {
        let mut flags = vec![false; n_preds];
        for &(p, _) in &self.pairs {
            flags[p] = true;
        }
        flags
    }
}

/// Minimum-cost assignment on a `P×T` cost matrix. Equivalent to padding the
/// matrix square with a large constant and solving exactly: every target gets
/// a distinct prediction (when `P ≥ T`), chosen to minimize the summed cost.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Matching> {
    let p = cost.len();
    let t = if p == 0 { 0 } else { cost[0].len() };
    for (i, row) in cost.iter().enumerate() {
        debug_assert_eq!(row.len(), t);
        for (j, &v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFiniteCost { row: i, col: j });
            }
        }
    }
    if p == 0 || t == 0 {
        return Ok(Matching::empty(p));
    }
    // assign along the smaller dimension
    let transposed = p < t;
    let (rows, cols) = if transposed { (p, t) } else { (t, p) };
    let at = |r: usize, c: usize| -> f64 {
        if transposed {
            cost[r][c]
        } else {
            cost[c][r]
        }
    };
    // shortest augmenting path with potentials (rows ≤ cols)
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut assigned_row = vec![0usize; cols + 1]; // 1-based row held by column, 0 = free
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(rows);
    for j in 1..=cols {
        if assigned_row[j] != 0 {
            let (row, col) = (assigned_row[j] - 1, j - 1);
            // rows were targets unless transposed
            if transposed {
                pairs.push((row, col));
            } else {
                pairs.push((col, row));
            }
        }
    }
    pairs.sort_by_key(|&(_, t)| t);
    let matched: std::collections::BTreeSet<usize> = pairs.iter().map(|&(p, _)| p).collect();
    let unmatched_preds = (0..p).filter(|i| !matched.contains(i)).collect();
    Ok(Matching {
        pairs,
        unmatched_preds,
    })
}

/// Decoded per-token prediction used for matching (plain values).
#[derive(Debug, Clone)]
pub struct DetectionValue {
    pub p: f64,
    pub rbox: RotatedBox,
    pub bezier: Option<BezierRegion>,
}

/// Pairwise matching cost: `λ_c·(1−p) + λ_d·gwd(box, target)`, plus the mean
/// control-point L1 distance (in image-normalized units) in Bezier mode.
pub fn match_cost(
    detections: &[DetectionValue],
    targets: &[RotatedBox],
    target_beziers: Option<&[BezierRegion]>,
    weights: &LossWeights,
    image: (f64, f64),
) -> Result<Vec<Vec<f64>>> {
    let mut cost = Vec::with_capacity(detections.len());
    for det in detections {
        let mut row = Vec::with_capacity(targets.len());
        for (t_idx, target) in targets.iter().enumerate() {
            let mut c = weights.lambda_c * (1.0 - det.p)
                + weights.lambda_d
                    * gwd_loss_term_with(&det.rbox, target, weights.tau, weights.area_norm)?;
            if let (Some(bez), Some(tbs)) = (&det.bezier, target_beziers) {
                let tb = &tbs[t_idx];
                let mut l1 = 0.0;
                for k in 0..8 {
                    l1 += (bez.points[k][0] - tb.points[k][0]).abs() / image.0
                        + (bez.points[k][1] - tb.points[k][1]).abs() / image.1;
                }
                c += l1 / 8.0;
            }
            row.push(c);
        }
        cost.push(row);
    }
    Ok(cost)
}

/// Binary cross-entropy over every token: matched tokens are positives.
/// Probabilities are clamped to `[1e-7, 1−1e-7]`.
pub fn loss_class(g: &Graph, p: Var, matched: &[bool]) -> Result<Var> {
    let n = matched.len();
    debug_assert_eq!(g.shape(p), vec![n, 1]);
    let labels = g.constant(Tensor::new(
        vec![n, 1],
        matched.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )
    .expect("labels"));
    let pc = g.clamp(p, 1e-7, 1.0 - 1e-7);
    let pos = g.mul(labels, g.log(pc))?;
    let neg = g.mul(g.rsub_scalar(1.0, labels), g.log(g.rsub_scalar(1.0, pc)))?;
    Ok(g.neg(g.mean_all(g.add(pos, neg)?)))
}

/// Differentiable scale-invariant box loss, averaged over matched pairs.
/// Returns the loss variable and a flag marking an empty matching (loss 0).
pub fn loss_det_rbox(
    g: &Graph,
    box_params: Var,
    matching: &Matching,
    targets: &[RotatedBox],
    image: (f64, f64),
    weights: &LossWeights,
) -> Result<(Var, bool)> {
    if matching.pairs.is_empty() {
        return Ok((g.scalar(0.0), true));
    }
    let rows: Vec<usize> = matching.pairs.iter().map(|&(p, _)| p).collect();
    let picked: Vec<&RotatedBox> = matching.pairs.iter().map(|&(_, t)| &targets[t]).collect();
    let nr = rows.len();
    let sel = g.gather_rows(box_params, &rows)?; // [Nr, 5]
    let col = |g: &Graph, idx: usize| -> Result<Var> {
        Ok(g.reshape(g.slice_axis(sel, 1, idx, idx + 1)?, vec![nr])?)
    };
    // decode to pixels
    let x = g.mul_scalar(col(g, 0)?, image.0);
    let y = g.mul_scalar(col(g, 1)?, image.1);
    let w = g.mul_scalar(col(g, 2)?, image.0);
    let h = g.mul_scalar(col(g, 3)?, image.1);
    let theta = g.mul_scalar(g.add_scalar(col(g, 4)?, -0.5), PI);
    // per-pair normalization so each target has unit area
    let scale = Tensor::new(
        vec![nr],
        picked
            .iter()
            .map(|t| match weights.area_norm {
                AreaNorm::Sqrt => 1.0 / t.area().sqrt(),
                AreaNorm::Literal => 1.0 / t.area(),
            })
            .collect(),
    )
    .expect("scales");
    let sc = g.constant(scale.clone());
    let xn = g.mul(x, sc)?;
    let yn = g.mul(y, sc)?;
    let wn = g.mul(w, sc)?;
    let hn = g.mul(h, sc)?;
    // normalized target Gaussian entries (constants)
    let mut t_mx = Vec::with_capacity(nr);
    let mut t_my = Vec::with_capacity(nr);
    let mut t_a = Vec::with_capacity(nr);
    let mut t_b = Vec::with_capacity(nr);
    let mut t_c = Vec::with_capacity(nr);
    let mut t_sqrt_det = Vec::with_capacity(nr);
    for (i, t) in picked.iter().enumerate() {
        let tn = t.scaled(scale.data()[i]);
        let gsn = box_to_gaussian(&tn)?;
        t_mx.push(gsn.mean[0]);
        t_my.push(gsn.mean[1]);
        t_a.push(gsn.cov[0][0]);
        t_b.push(gsn.cov[0][1]);
        t_c.push(gsn.cov[1][1]);
        t_sqrt_det.push(gsn.det().max(0.0).sqrt());
    }
    let cvec = |g: &Graph, v: Vec<f64>| g.constant(Tensor::new(vec![nr], v).expect("const vec"));
    let (t_mx, t_my) = (cvec(g, t_mx), cvec(g, t_my));
    let (t_a, t_b, t_c) = (cvec(g, t_a), cvec(g, t_b), cvec(g, t_c));
    let t_sqrt_det = cvec(g, t_sqrt_det);
    // prediction Gaussian: M = R·diag(w/2, h/2)·Rᵀ, Σ = M²
    let cos_t = g.cos(theta);
    let sin_t = g.sin(theta);
    let cc = g.mul(cos_t, cos_t)?;
    let ss = g.mul(sin_t, sin_t)?;
    let cs = g.mul(cos_t, sin_t)?;
    let hw = g.mul_scalar(wn, 0.5);
    let hh = g.mul_scalar(hn, 0.5);
    let m00 = g.add(g.mul(hw, cc)?, g.mul(hh, ss)?)?;
    let m01 = g.mul(g.sub(hw, hh)?, cs)?;
    let m11 = g.add(g.mul(hw, ss)?, g.mul(hh, cc)?)?;
    let p_a = g.add(g.mul(m00, m00)?, g.mul(m01, m01)?)?;
    let p_b = g.mul(m01, g.add(m00, m11)?)?;
    let p_c = g.add(g.mul(m01, m01)?, g.mul(m11, m11)?)?;
    // d² = ‖Δm‖² + tr(Σp) + tr(Σt) − 2·√(tr(ΣpΣt) + 2·√(detΣp·detΣt))
    let dx = g.sub(xn, t_mx)?;
    let dy = g.sub(yn, t_my)?;
    let dm = g.add(g.mul(dx, dx)?, g.mul(dy, dy)?)?;
    let tr_p = g.add(p_a, p_c)?;
    let tr_t = g.add(t_a, t_c)?;
    let tr_prod = g.add(
        g.add(g.mul(p_a, t_a)?, g.mul_scalar(g.mul(p_b, t_b)?, 2.0))?,
        g.mul(p_c, t_c)?,
    )?;
    // √detΣp = det M = (w/2)(h/2) exactly, keeping the gradient clean
    let sqrt_det_p = g.mul(hw, hh)?;
    let cross_sq = g.add(tr_prod, g.mul_scalar(g.mul(sqrt_det_p, t_sqrt_det)?, 2.0))?;
    let cross = g.sqrt(cross_sq);
    let d2 = g.sub(g.add(dm, g.add(tr_p, tr_t)?)?, g.mul_scalar(cross, 2.0))?;
    // 1 − 1/(τ + ln(d² + 1))
    let denom = g.add_scalar(g.log(g.add_scalar(d2, 1.0)), weights.tau);
    let ones = g.constant(Tensor::full(&[nr], 1.0));
    let per_pair = g.rsub_scalar(1.0, g.div(ones, denom)?);
    Ok((g.mean_all(per_pair), false))
}

/// Bezier-mode detection loss: smooth-L1 on the axis-box parameters plus
/// smooth-L1 on the 16 control-point coordinates, both in sigmoid space,
/// averaged over matched pairs; the two terms get equal weight.
pub fn loss_det_bezier(
    g: &Graph,
    box_params: Var,
    bezier_params: Var,
    matching: &Matching,
    target_axis: &[RotatedBox],
    target_beziers: &[BezierRegion],
    metas: &[TokenMeta],
    image: (f64, f64),
) -> Result<(Var, bool)> {
    if matching.pairs.is_empty() {
        return Ok((g.scalar(0.0), true));
    }
    let rows: Vec<usize> = matching.pairs.iter().map(|&(p, _)| p).collect();
    let nr = rows.len();
    let sel_box = g.gather_rows(box_params, &rows)?; // [Nr, 4]
    let sel_bez = g.gather_rows(bezier_params, &rows)?; // [Nr, 16]
    // targets in the heads' sigmoid space
    let mut box_t = Vec::with_capacity(nr * 4);
    let mut bez_t = Vec::with_capacity(nr * 16);
    for &(p_idx, t_idx) in &matching.pairs {
        let t = &target_axis[t_idx];
        box_t.extend_from_slice(&[
            t.x / image.0,
            t.y / image.1,
            t.w / image.0,
            t.h / image.1,
        ]);
        let center = metas[p_idx].center();
        let enc =
            crate::grouper::encode_bezier(&target_beziers[t_idx], center, image.0, image.1);
        bez_t.extend_from_slice(&enc);
    }
    let box_t = g.constant(Tensor::new(vec![nr, 4], box_t).expect("box targets"));
    let bez_t = g.constant(Tensor::new(vec![nr, 16], bez_t).expect("bezier targets"));
    let box_loss = g.mean_all(g.smooth_l1(sel_box, box_t)?);
    let bez_loss = g.mean_all(g.smooth_l1(sel_bez, bez_t)?);
    Ok((g.add(box_loss, bez_loss)?, false))
}

/// Smooth-L1 between predicted and target score maps, averaged over every
/// cell of every scale.
pub fn loss_fs(g: &Graph, scores: &[Var; 3], targets: &ScoreTarget) -> Result<Var> {
    let mut total: Option<Var> = None;
    let mut n_cells = 0usize;
    for k in 0..3 {
        let shape = g.shape(scores[k]);
        let t = &targets.maps[k];
        if shape != t.shape() {
            return Err(Error::Config(format!(
                "score map {k} shape {shape:?} does not match target {:?}",
                t.shape()
            )));
        }
        n_cells += t.numel();
        let tv = g.constant(t.clone());
        let part = g.sum_all(g.smooth_l1(scores[k], tv)?);
        total = Some(match total {
            None => part,
            Some(acc) => g.add(acc, part)?,
        });
    }
    Ok(g.mul_scalar(total.expect("three scales"), 1.0 / n_cells as f64))
}

/// `λ_c·L_class + λ_d·L_det + λ_f(epoch)·L_fs`; rejects non-finite parts.
pub fn total_loss(
    g: &Graph,
    l_class: Var,
    l_det: Var,
    l_fs: Var,
    weights: &LossWeights,
    epoch: usize,
) -> Result<Var> {
    for (name, v) in [("classification", l_class), ("detection", l_det), ("selection", l_fs)] {
        if !g.value(v).item().is_finite() {
            return Err(Error::NonFiniteLoss { part: name });
        }
    }
    let lf = weights.lambda_f(epoch);
    let sum = g.add(
        g.mul_scalar(l_class, weights.lambda_c),
        g.mul_scalar(l_det, weights.lambda_d),
    )?;
    Ok(g.add(sum, g.mul_scalar(l_fs, lf))?)
}
