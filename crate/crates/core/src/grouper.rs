//! Feature grouping: position embeddings, a small transformer encoder over
//! the sampled tokens, and the prediction heads.

use std::f64::consts::PI;

use fewshape_numerics::rng::Rng;
use fewshape_numerics::{Graph, Tensor, Var};

use crate::error::Result;
use crate::geometry::{BezierRegion, RotatedBox};
use crate::nn::{Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::sampler::TokenMeta;

/// Which shapes the detection head regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Rbox,
    Bezier,
}

impl std::fmt::Display for HeadMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadMode::Rbox => write!(f, "rbox"),
            HeadMode::Bezier => write!(f, "bezier"),
        }
    }
}

struct EncoderLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln1: LayerNorm,
    ln2: LayerNorm,
    ffn1: Linear,
    ffn2: Linear,
}

pub struct Grouper {
    scale_embed: ParamId,
    layers: Vec<EncoderLayer>,
    cls1: Linear,
    cls2: Linear,
    box1: Linear,
    box2: Linear,
    bez1: Option<Linear>,
    bez2: Option<Linear>,
    pub channels: usize,
    pub heads: usize,
    pub mode: HeadMode,
}

/// Head outputs, all in sigmoid space: `p` is `[N,1]`, `box_params` is
/// `[N,5]` (rbox) or `[N,4]` (bezier), `bezier_params` is `[N,16]`.
pub struct HeadsOut {
    pub p: Var,
    pub box_params: Var,
    pub bezier_params: Option<Var>,
}

impl Grouper {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        channels: usize,
        heads: usize,
        encoder_layers: usize,
        mode: HeadMode,
    ) -> Self {
        assert!(channels % heads == 0, "head count must divide channel width");
        let c = channels;
        let scale_embed = store.add("grouper/scale_embed", Tensor::zeros(&[3, c]));
        let layers = (0..encoder_layers)
            .map(|i| {
                let p = format!("grouper/layer{i}");
                EncoderLayer {
                    wq: Linear::new(store, rng, &format!("{p}/wq"), c, c),
                    wk: Linear::new(store, rng, &format!("{p}/wk"), c, c),
                    wv: Linear::new(store, rng, &format!("{p}/wv"), c, c),
                    wo: Linear::new(store, rng, &format!("{p}/wo"), c, c),
                    ln1: LayerNorm::new(store, &format!("{p}/ln1"), c),
                    ln2: LayerNorm::new(store, &format!("{p}/ln2"), c),
                    ffn1: Linear::new(store, rng, &format!("{p}/ffn1"), c, 4 * c),
                    ffn2: Linear::new(store, rng, &format!("{p}/ffn2"), 4 * c, c),
                }
            })
            .collect();
        let cls1 = Linear::new(store, rng, "grouper/cls1", c, c);
        let cls2 = Linear::new(store, rng, "grouper/cls2", c, 1);
        let box_out = match mode {
            HeadMode::Rbox => 5,
            HeadMode::Bezier => 4,
        };
        let box1 = Linear::new(store, rng, "grouper/box1", c, c);
        let box2 = Linear::new(store, rng, "grouper/box2", c, box_out);
        let (bez1, bez2) = match mode {
            HeadMode::Rbox => (None, None),
            HeadMode::Bezier => (
                Some(Linear::new(store, rng, "grouper/bez1", c, c)),
                Some(Linear::new(store, rng, "grouper/bez2", c, 16)),
            ),
        };
        Self {
            scale_embed,
            layers,
            cls1,
            cls2,
            box1,
            box2,
            bez1,
            bez2,
            channels: c,
            heads,
            mode,
        }
    }

    /// Adds the fixed sinusoidal embedding of each token's normalized cell
    /// center and a learned per-scale embedding row.
    pub fn embed_positions(
        &self,
        g: &Graph,
        bp: &Bound,
        tokens: Var,
        metas: &[TokenMeta],
        image_w: usize,
        image_h: usize,
    ) -> Result<Var> {
        let sin_table = g.constant(sinusoid_table(metas, self.channels, image_w, image_h));
        let scale_idx: Vec<usize> = metas.iter().map(|m| m.scale).collect();
        let scale_rows = g.gather_rows(bp.var(self.scale_embed), &scale_idx)?;
        Ok(g.add(g.add(tokens, sin_table)?, scale_rows)?)
    }

    /// One multi-head self-attention block (no residual / norm). Returns the
    /// projected output and, when requested, each head's attention matrix.
    fn attention(
        &self,
        g: &Graph,
        bp: &Bound,
        layer: &EncoderLayer,
        x: Var,
        record: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let c = self.channels;
        let dh = c / self.heads;
        let q = layer.wq.apply(g, bp, x)?;
        let k = layer.wk.apply(g, bp, x)?;
        let v = layer.wv.apply(g, bp, x)?;
        let mut head_outs = Vec::with_capacity(self.heads);
        let mut recorded = Vec::new();
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = g.slice_axis(q, 1, lo, hi)?;
            let kh = g.slice_axis(k, 1, lo, hi)?;
            let vh = g.slice_axis(v, 1, lo, hi)?;
            let logits = g.mul_scalar(
                g.matmul(qh, g.transpose(kh)?)?,
                1.0 / (dh as f64).sqrt(),
            );
            let attn = g.softmax_last(logits)?;
            recorded.push(attn);
            head_outs.push(g.matmul(attn, vh)?);
        }
        if let Some(out) = record {
            for a in &recorded {
                out.push(g.value(*a));
            }
        }
        let merged = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            g.concat(&head_outs, 1)?
        };
        layer.wo.apply(g, bp, merged)
    }

    /// Runs the encoder stack: `x ← layernorm(x + Attn(x))`, then
    /// `x ← layernorm(x + FFN(x))`, per layer.
    pub fn encode(&self, g: &Graph, bp: &Bound, tokens: Var) -> Result<Var> {
        self.encode_impl(g, bp, tokens, None)
    }

    /// Like [`encode`](Self::encode) but also returns every head's attention
    /// matrix, layer-major.
    pub fn encode_with_attention(
        &self,
        g: &Graph,
        bp: &Bound,
        tokens: Var,
    ) -> Result<(Var, Vec<Tensor>)> {
        let mut attn = Vec::new();
        let out = self.encode_impl(g, bp, tokens, Some(&mut attn))?;
        Ok((out, attn))
    }

    fn encode_impl(
        &self,
        g: &Graph,
        bp: &Bound,
        tokens: Var,
        mut record: Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let mut x = tokens;
        for layer in &self.layers {
            let attn = self.attention(g, bp, layer, x, record.as_deref_mut())?;
            x = layer.ln1.apply(g, bp, g.add(x, attn)?)?;
            let hidden = g.relu(layer.ffn1.apply(g, bp, x)?);
            let ffn = layer.ffn2.apply(g, bp, hidden)?;
            x = layer.ln2.apply(g, bp, g.add(x, ffn)?)?;
        }
        Ok(x)
    }

    /// Classification and box (and Bezier) heads: 2-layer MLPs with a final
    /// sigmoid, so every output lives in (0, 1).
    pub fn predict_heads(&self, g: &Graph, bp: &Bound, encoded: Var) -> Result<HeadsOut> {
        let p = g.sigmoid(
            self.cls2
                .apply(g, bp, g.relu(self.cls1.apply(g, bp, encoded)?))?,
        );
        let box_params = g.sigmoid(
            self.box2
                .apply(g, bp, g.relu(self.box1.apply(g, bp, encoded)?))?,
        );
        let bezier_params = match (&self.bez1, &self.bez2) {
            (Some(b1), Some(b2)) => Some(g.sigmoid(
                b2.apply(g, bp, g.relu(b1.apply(g, bp, encoded)?))?,
            )),
            _ => None,
        };
        Ok(HeadsOut {
            p,
            box_params,
            bezier_params,
        })
    }

    /// Plain-buffer encoder forward for frozen weights: same math as
    /// [`encode`](Self::encode) without building a graph, with the attention
    /// matrix streamed in row blocks. Used for timing and inference at large
    /// token counts.
    pub fn encode_value_only(&self, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
        let n = tokens.shape()[0];
        let c = self.channels;
        let dh = c / self.heads;
        let mut x = tokens.data().to_vec();
        let lin = |store: &ParamStore, l: &Linear, input: &[f64], rows: usize, cin: usize| {
            let w = store.tensor(l.w);
            let b = store.tensor(l.b);
            let cout = w.shape()[1];
            let mut out = vec![0.0; rows * cout];
            matmul_rm(input, w.data(), &mut out, rows, cin, cout);
            for r in 0..rows {
                for j in 0..cout {
                    out[r * cout + j] += b.data()[j];
                }
            }
            out
        };
        for layer in &self.layers {
            let q = lin(store, &layer.wq, &x, n, c);
            let k = lin(store, &layer.wk, &x, n, c);
            let v = lin(store, &layer.wv, &x, n, c);
            let mut merged = vec![0.0; n * c];
            const BLOCK: usize = 64;
            let scale = 1.0 / (dh as f64).sqrt();
            for h in 0..self.heads {
                let off = h * dh;
                let mut logits = vec![0.0; BLOCK * n];
                for r0 in (0..n).step_by(BLOCK) {
                    let rows = BLOCK.min(n - r0);
                    // logits[r, j] = q[r0+r, off..] · k[j, off..] · scale
                    for r in 0..rows {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for d in 0..dh {
                                acc += q[(r0 + r) * c + off + d] * k[j * c + off + d];
                            }
                            logits[r * n + j] = acc * scale;
                        }
                    }
                    for r in 0..rows {
                        let row = &mut logits[r * n..(r + 1) * n];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut sum = 0.0;
                        for vv in row.iter_mut() {
                            *vv = (*vv - max).exp();
                            sum += *vv;
                        }
                        for vv in row.iter_mut() {
                            *vv /= sum;
                        }
                    }
                    for r in 0..rows {
                        for j in 0..n {
                            let a = logits[r * n + j];
                            for d in 0..dh {
                                merged[(r0 + r) * c + off + d] += a * v[j * c + off + d];
                            }
                        }
                    }
                }
            }
            let wo = store.tensor(layer.wo.w);
            let bo = store.tensor(layer.wo.b);
            let mut attn_out = vec![0.0; n * c];
            matmul_rm(&merged, wo.data(), &mut attn_out, n, c, c);
            for r in 0..n {
                for j in 0..c {
                    attn_out[r * c + j] += bo.data()[j];
                }
            }
            for i in 0..n * c {
                attn_out[i] += x[i];
            }
            layer_norm_affine(&mut attn_out, c, store, &layer.ln1);
            let hidden = lin(store, &layer.ffn1, &attn_out, n, c);
            let hidden: Vec<f64> = hidden.iter().map(|&v| v.max(0.0)).collect();
            let mut ffn = lin(store, &layer.ffn2, &hidden, n, 4 * c);
            for i in 0..n * c {
                ffn[i] += attn_out[i];
            }
            layer_norm_affine(&mut ffn, c, store, &layer.ln2);
            x = ffn;
        }
        Ok(Tensor::new(vec![n, c], x).expect("encoder shape"))
    }
}

fn matmul_rm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    fewshape_numerics::graph::gemm(m, k, n, a, false, b, false, 0.0, c);
}

fn layer_norm_affine(x: &mut [f64], c: usize, store: &ParamStore, ln: &LayerNorm) {
    let gamma = store.tensor(ln.gamma);
    let beta = store.tensor(ln.beta);
    for row in x.chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + ln.eps).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gamma.data()[j] + beta.data()[j];
        }
    }
}

/// Sinusoidal table: for each token, `C/2` dims encode normalized x and `C/2`
/// encode normalized y, as interleaved sin/cos pairs with geometrically
/// spaced frequencies. The base argument for position `u ∈ [0,1]` is `u·π`.
pub fn sinusoid_table(metas: &[TokenMeta], channels: usize, image_w: usize, image_h: usize) -> Tensor {
    let half = channels / 2;
    let pairs = (half / 2).max(1);
    Tensor::from_fn(&[metas.len(), channels], |flat| {
        let tok = flat / channels;
        let dim = flat % channels;
        let (cx, cy) = metas[tok].center();
        let (u, axis_dim) = if dim < half {
            (cx / image_w as f64, dim)
        } else {
            (cy / image_h as f64, dim - half)
        };
        let pair = axis_dim / 2;
        let freq = PI / 10000f64.powf(pair as f64 / pairs as f64);
        let arg = u * freq;
        if axis_dim % 2 == 0 {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Analytic multiply-accumulate count of one self-attention layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionCost {
    pub n: usize,
    pub c: usize,
    /// Q, K, V input projections: `3·N·C²`.
    pub projections: f64,
    /// Logits + weighted sum: `2·N²·C`.
    pub quadratic: f64,
    /// Output projection: `N·C²`.
    pub output: f64,
}

impl AttentionCost {
    pub fn total(&self) -> f64 {
        self.projections + self.quadratic + self.output
    }
}

pub fn attention_cost(n: usize, c: usize) -> AttentionCost {
    let (nf, cf) = (n as f64, c as f64);
    AttentionCost {
        n,
        c,
        projections: 3.0 * nf * cf * cf,
        quadratic: 2.0 * nf * nf * cf,
        output: nf * cf * cf,
    }
}

/// Cost of attending over every cell of every scale map separately, summed.
pub fn dense_attention_cost(map_sizes: &[(usize, usize)], c: usize) -> AttentionCost {
    let mut acc = AttentionCost {
        n: 0,
        c,
        projections: 0.0,
        quadratic: 0.0,
        output: 0.0,
    };
    for &(h, w) in map_sizes {
        let one = attention_cost(h * w, c);
        acc.n += h * w;
        acc.projections += one.projections;
        acc.quadratic += one.quadratic;
        acc.output += one.output;
    }
    acc
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Decodes sigmoid-space `(x̂, ŷ, ŵ, ĥ, θ̂)` into image coordinates:
/// `x = x̂·W`, `y = ŷ·H`, `w = ŵ·W`, `h = ĥ·H`, `θ = (θ̂−0.5)·π`.
pub fn decode_rbox(vals: &[f64], image_w: f64, image_h: f64) -> Result<RotatedBox> {
    Ok(RotatedBox::new(
        vals[0] * image_w,
        vals[1] * image_h,
        vals[2] * image_w,
        vals[3] * image_h,
        (vals[4] - 0.5) * PI,
    )?)
}

/// Inverse of [`decode_rbox`] on its range.
pub fn encode_rbox(b: &RotatedBox, image_w: f64, image_h: f64) -> [f64; 5] {
    [
        b.x / image_w,
        b.y / image_h,
        b.w / image_w,
        b.h / image_h,
        b.theta / PI + 0.5,
    ]
}

/// Decodes sigmoid-space `(x̂, ŷ, ŵ, ĥ)` into an axis-aligned box.
pub fn decode_axis_box(vals: &[f64], image_w: f64, image_h: f64) -> Result<RotatedBox> {
    Ok(RotatedBox::new(
        vals[0] * image_w,
        vals[1] * image_h,
        vals[2] * image_w,
        vals[3] * image_h,
        0.0,
    )?)
}

/// Decodes 16 sigmoid-space values into 8 control points, each an offset from
/// the token's cell center in units of the image size.
pub fn decode_bezier(
    vals: &[f64],
    token_center: (f64, f64),
    image_w: f64,
    image_h: f64,
) -> BezierRegion {
    let mut points = [[0.0; 2]; 8];
    for (k, point) in points.iter_mut().enumerate() {
        point[0] = token_center.0 + (vals[2 * k] - 0.5) * image_w;
        point[1] = token_center.1 + (vals[2 * k + 1] - 0.5) * image_h;
    }
    BezierRegion { points }
}

/// Inverse of [`decode_bezier`] on its range.
pub fn encode_bezier(
    region: &BezierRegion,
    token_center: (f64, f64),
    image_w: f64,
    image_h: f64,
) -> [f64; 16] {
    let mut vals = [0.0; 16];
    for (k, point) in region.points.iter().enumerate() {
        vals[2 * k] = (point[0] - token_center.0) / image_w + 0.5;
        vals[2 * k + 1] = (point[1] - token_center.1) / image_h + 0.5;
    }
    vals
}
