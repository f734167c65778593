//! Feature sampling: Gaussian score-map targets, constrained deformable
//! pooling, the shared scoring net, and top-k / adaptive token selection.

use fewshape_numerics::rng::Rng;
use fewshape_numerics::{Graph, Tensor, Var};

use crate::error::{Error, Result};
use crate::geometry::RotatedBox;
use crate::nn::{Bound, Conv, ParamStore};

/// Score-map downsampling factors (one octave below the pyramid), finest
/// first to match the pyramid level order.
pub const SCORE_DIVISORS: [usize; 3] = [8, 16, 32];

/// Score target value above which a cell counts as foreground text.
pub const FOREGROUND_THRESHOLD: f64 = 0.1;

/// Per-scale sampling budgets in the conventional order: the coarsest scale
/// (1/32) first, i.e. `(n0, n1, n2)` selects `n0` tokens at 1/32, `n1` at
/// 1/16, and `n2` at 1/8.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Budgets(pub [usize; 3]);

impl Budgets {
    /// Budget for a finest-first scale index (0 → 1/8, 2 → 1/32).
    pub fn for_scale(&self, scale: usize) -> usize {
        self.0[2 - scale]
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }
}

/// Ground-truth importance maps, same shapes as the predicted score maps.
#[derive(Debug, Clone)]
pub struct ScoreTarget {
    pub maps: [Tensor; 3],
}

/// Renders one rotated Gaussian per instance onto each scale, peak 1 at the
/// cell containing the instance center, σ = (w/6, h/6) along/across the box
/// axis. Overlapping instances combine by elementwise max.
pub fn make_score_targets(boxes: &[RotatedBox], image_h: usize, image_w: usize) -> ScoreTarget {
    let maps = SCORE_DIVISORS.map(|d| {
        let (h, w) = (image_h / d, image_w / d);
        let mut map = vec![0.0; h * w];
        for b in boxes {
            let (s, c) = b.theta.sin_cos();
            let sigma_along = b.w / 6.0;
            let sigma_across = b.h / 6.0;
            // snap the peak to the grid so the center cell holds exactly 1
            let pj = ((b.x / d as f64).floor().clamp(0.0, (w - 1) as f64)) as usize;
            let pi = ((b.y / d as f64).floor().clamp(0.0, (h - 1) as f64)) as usize;
            let cx = (pj as f64 + 0.5) * d as f64;
            let cy = (pi as f64 + 0.5) * d as f64;
            for i in 0..h {
                for j in 0..w {
                    let dx = (j as f64 + 0.5) * d as f64 - cx;
                    let dy = (i as f64 + 0.5) * d as f64 - cy;
                    let u = c * dx + s * dy;
                    let v = -s * dx + c * dy;
                    let e = u * u / (2.0 * sigma_along * sigma_along)
                        + v * v / (2.0 * sigma_across * sigma_across);
                    let val = (-e).exp();
                    let cell = &mut map[i * w + j];
                    if val > *cell {
                        *cell = val;
                    }
                }
            }
        }
        Tensor::new(vec![h, w], map).expect("target shape")
    });
    ScoreTarget { maps }
}

/// Cells with target above [`FOREGROUND_THRESHOLD`], per scale.
pub fn foreground_masks(target: &ScoreTarget) -> [Vec<bool>; 3] {
    [0, 1, 2].map(|k| {
        target.maps[k]
            .data()
            .iter()
            .map(|&v| v > FOREGROUND_THRESHOLD)
            .collect()
    })
}

pub struct PoolOutput {
    /// Half-resolution pooled features.
    pub pooled: Var,
    /// The offset-scaling gate λ per cell, for inspection.
    pub lambda: Var,
}

pub struct Sampler {
    offset_convs: [Conv; 3],
    score_conv1: Conv,
    score_conv2: Conv,
}

impl Sampler {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, channels: usize) -> Self {
        let c = channels;
        let offset_convs = [
            Conv::new(store, rng, "sampler/offset0", 3, 3, c, 2, 1, 1),
            Conv::new(store, rng, "sampler/offset1", 3, 3, c, 2, 1, 1),
            Conv::new(store, rng, "sampler/offset2", 3, 3, c, 2, 1, 1),
        ];
        let score_conv1 = Conv::new(store, rng, "sampler/score1", 3, 3, c, c, 1, 1);
        let score_conv2 = Conv::new(store, rng, "sampler/score2", 3, 3, c, 1, 1, 1);
        Self {
            offset_convs,
            score_conv1,
            score_conv2,
        }
    }

    /// Constrained deformable pooling to half resolution: a 3×3 conv predicts
    /// raw offsets per cell, scaled by λ = sigmoid(channel mean) and by the
    /// map extent `(W, H)`; features are gathered bilinearly at the displaced
    /// positions and averaged over 2×2 windows.
    pub fn constrained_pool(&self, g: &Graph, bp: &Bound, level: usize, f: Var) -> Result<PoolOutput> {
        let shape = g.shape(f);
        let (h, w) = (shape[0], shape[1]);
        let raw = self.offset_convs[level].apply(g, bp, f)?; // [H,W,2]
        let lambda = g.sigmoid(g.mean_axis(f, 2)?); // [H,W]
        let lambda_plane = g.reshape(lambda, vec![h, w, 1])?;
        let lambda2 = g.concat(&[lambda_plane, lambda_plane], 2)?;
        let extent = g.constant(Tensor::new(vec![2], vec![w as f64, h as f64]).expect("extent"));
        let scaled = g.mul_vec_last(g.mul(raw, lambda2)?, extent)?;
        let base = g.constant(Tensor::from_fn(&[h, w, 2], |flat| {
            let ch = flat % 2;
            let x = (flat / 2) % w;
            let y = flat / (2 * w);
            if ch == 0 {
                x as f64
            } else {
                y as f64
            }
        }));
        let pos = g.add(base, scaled)?;
        let warped = g.warp_bilinear(f, pos)?;
        let pooled = g.avg_pool2(warped)?;
        Ok(PoolOutput { pooled, lambda })
    }

    /// Two shared 3×3 convs (C→C→1) and a sigmoid; returns the `[h,w]` score
    /// map variable.
    pub fn score_features(&self, g: &Graph, bp: &Bound, pooled: Var) -> Result<Var> {
        let shape = g.shape(pooled);
        let hidden = g.relu(self.score_conv1.apply(g, bp, pooled)?);
        let logits = self.score_conv2.apply(g, bp, hidden)?;
        Ok(g.reshape(g.sigmoid(logits), vec![shape[0], shape[1]])?)
    }
}

/// One selected token: scale index (finest first), grid cell, and the score
/// it was picked with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenMeta {
    pub scale: usize,
    pub divisor: usize,
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

impl TokenMeta {
    /// Image-plane center of the token's cell, in pixels.
    pub fn center(&self) -> (f64, f64) {
        (
            (self.col as f64 + 0.5) * self.divisor as f64,
            (self.row as f64 + 0.5) * self.divisor as f64,
        )
    }
}

/// Result of token selection: flat cell indices per scale (in pick order)
/// and per-token metadata in the final token order (scale-major).
#[derive(Debug, Clone)]
pub struct Selection {
    pub per_scale: [Vec<usize>; 3],
    pub metas: Vec<TokenMeta>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }
}

fn sorted_cells(scores: &Tensor) -> Vec<(usize, f64)> {
    let mut cells: Vec<(usize, f64)> = scores.data().iter().copied().enumerate().collect();
    // score descending, then row-major cell index ascending
    cells.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    cells
}

fn push_tokens(
    selection: &mut Selection,
    scale: usize,
    width: usize,
    picks: impl IntoIterator<Item = (usize, f64)>,
) {
    for (flat, score) in picks {
        selection.per_scale[scale].push(flat);
        selection.metas.push(TokenMeta {
            scale,
            divisor: SCORE_DIVISORS[scale],
            row: flat / width,
            col: flat % width,
            score,
        });
    }
}

/// Top-`N_k` cells per scale by predicted score, deterministic tie-break by
/// row-major cell order.
pub fn select_topk(scores: &[Tensor; 3], budgets: &Budgets) -> Result<Selection> {
    let mut selection = Selection {
        per_scale: [Vec::new(), Vec::new(), Vec::new()],
        metas: Vec::with_capacity(budgets.total()),
    };
    for scale in 0..3 {
        let n = budgets.for_scale(scale);
        let cells = scores[scale].numel();
        if n > cells {
            return Err(Error::BudgetTooLarge {
                budget: n,
                cells,
                divisor: SCORE_DIVISORS[scale],
            });
        }
        let width = scores[scale].shape()[1];
        let ranked = sorted_cells(&scores[scale]);
        push_tokens(&mut selection, scale, width, ranked.into_iter().take(n));
    }
    Ok(selection)
}

/// Selects `ceil(fraction × |foreground|)` of the foreground cells with the
/// highest predicted scores, pooled across scales. With no foreground at all,
/// falls back to the single highest-scoring cell overall.
pub fn select_adaptive(
    scores: &[Tensor; 3],
    foreground: &[Vec<bool>; 3],
    fraction: f64,
) -> Result<Selection> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "adaptive fraction must be in (0, 1], got {fraction}"
        )));
    }
    // candidates across scales: (scale, flat, score)
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for scale in 0..3 {
        debug_assert_eq!(scores[scale].numel(), foreground[scale].len());
        for (flat, (&s, &fg)) in scores[scale]
            .data()
            .iter()
            .zip(&foreground[scale])
            .enumerate()
        {
            if fg {
                candidates.push((scale, flat, s));
            }
        }
    }
    let mut selection = Selection {
        per_scale: [Vec::new(), Vec::new(), Vec::new()],
        metas: Vec::new(),
    };
    if candidates.is_empty() {
        // global argmax over every cell of every scale
        let mut best = (0usize, 0usize, f64::NEG_INFINITY);
        for scale in 0..3 {
            for (flat, &s) in scores[scale].data().iter().enumerate() {
                if s > best.2 {
                    best = (scale, flat, s);
                }
            }
        }
        let width = scores[best.0].shape()[1];
        push_tokens(&mut selection, best.0, width, [(best.1, best.2)]);
        return Ok(selection);
    }
    let take = (fraction * candidates.len() as f64).ceil() as usize;
    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2)
            .unwrap()
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });
    candidates.truncate(take.max(1));
    // token order stays scale-major like top-k
    for scale in 0..3 {
        let width = scores[scale].shape()[1];
        let picks: Vec<(usize, f64)> = candidates
            .iter()
            .filter(|c| c.0 == scale)
            .map(|c| (c.1, c.2))
            .collect();
        push_tokens(&mut selection, scale, width, picks);
    }
    Ok(selection)
}

/// Gathers the selected feature rows from the pooled maps into one `[N, C]`
/// token matrix, rows in selection (scale-major) order.
pub fn gather_tokens(g: &Graph, pooled: &[Var; 3], selection: &Selection) -> Result<Var> {
    let mut parts = Vec::new();
    for scale in 0..3 {
        if selection.per_scale[scale].is_empty() {
            continue;
        }
        let shape = g.shape(pooled[scale]);
        let flat = g.reshape(pooled[scale], vec![shape[0] * shape[1], shape[2]])?;
        parts.push(g.gather_rows(flat, &selection.per_scale[scale])?);
    }
    debug_assert!(!parts.is_empty());
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    Ok(g.concat(&parts, 0)?)
}
