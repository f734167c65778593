//! Central finite differences vs autodiff for every differentiable op, plus
//! the nested-loop convolution reference.

use fewshape_numerics::gradcheck::{central_diff, close};
use fewshape_numerics::graph::{Graph, Var};
use fewshape_numerics::rng::{self, Rng};
use fewshape_numerics::{Result, Tensor};

const STEP: f64 = 1e-5;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-8;

/// Random tensor with entries in `[lo, hi]`, kept away from `avoid` kinks.
fn rand_tensor(r: &mut Rng, shape: &[usize], lo: f64, hi: f64, avoid: &[f64], margin: f64) -> Tensor {
    Tensor::from_fn(shape, |_| loop {
        let v = rng::uniform(r, lo, hi);
        if avoid.iter().all(|&a| (v - a).abs() > margin) {
            break v;
        }
    })
}

/// Checks one op against central differences until at least `min_points`
/// input elements have been probed across random configurations.
fn check_op<F>(name: &str, seed: u64, min_points: usize, make_inputs: impl Fn(&mut Rng) -> Vec<Tensor>, build: F)
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let mut r = rng::seeded(seed);
    let mut probed = 0usize;
    let mut configs = 0usize;
    while probed < min_points {
        configs += 1;
        let inputs = make_inputs(&mut r);
        // Fixed weights make the scalar root sensitive to every output element.
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&g, &vars).unwrap_or_else(|e| panic!("{name}: forward failed: {e}"));
        let weights = Tensor::from_fn(&g.shape(out), |_| rng::uniform(&mut r, -1.0, 1.0));
        let wvar = g.constant(weights.clone());
        let root = g.sum_all(g.mul(out, wvar).expect("weight shape"));
        g.backward(root).unwrap();

        let eval = |ts: &[Tensor]| -> Result<f64> {
            let g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone())).collect();
            let out = build(&g, &vars)?;
            let wvar = g.constant(weights.clone());
            Ok(g.value(g.sum_all(g.mul(out, wvar)?)).item())
        };

        for (which, input) in inputs.iter().enumerate() {
            let analytic = g.grad_of(vars[which]).unwrap();
            for elem in 0..input.numel() {
                let numeric = central_diff(&eval, &inputs, which, elem, STEP).unwrap();
                let a = analytic.data()[elem];
                assert!(
                    close(a, numeric, RTOL, ATOL),
                    "{name}: config {configs} input {which} elem {elem}: autodiff {a} vs fd {numeric}"
                );
                probed += 1;
            }
        }
    }
}

#[test]
fn elementwise_binary_ops() {
    let shapes = |r: &mut Rng| vec![rand_tensor(r, &[4, 5], -2.0, 2.0, &[], 0.0); 2];
    check_op("add", 1, 1000, shapes, |g, v| g.add(v[0], v[1]));
    let shapes = |r: &mut Rng| vec![rand_tensor(r, &[4, 5], -2.0, 2.0, &[], 0.0); 2];
    check_op("sub", 2, 1000, shapes, |g, v| g.sub(v[0], v[1]));
    let shapes = |r: &mut Rng| vec![rand_tensor(r, &[4, 5], -2.0, 2.0, &[], 0.0); 2];
    check_op("mul", 3, 1000, shapes, |g, v| g.mul(v[0], v[1]));
    let div_inputs = |r: &mut Rng| {
        vec![
            rand_tensor(r, &[4, 5], -2.0, 2.0, &[], 0.0),
            rand_tensor(r, &[4, 5], 0.5, 2.0, &[], 0.0),
        ]
    };
    check_op("div", 4, 1000, div_inputs, |g, v| g.div(v[0], v[1]));
}

#[test]
fn elementwise_unary_ops() {
    check_op("exp", 5, 1000, |r| vec![rand_tensor(r, &[5, 5], -2.0, 2.0, &[], 0.0)], |g, v| Ok(g.exp(v[0])));
    check_op("log", 6, 1000, |r| vec![rand_tensor(r, &[5, 5], 0.2, 3.0, &[], 0.0)], |g, v| Ok(g.log(v[0])));
    check_op("sqrt", 7, 1000, |r| vec![rand_tensor(r, &[5, 5], 0.1, 4.0, &[], 0.0)], |g, v| Ok(g.sqrt(v[0])));
    check_op("sigmoid", 8, 1000, |r| vec![rand_tensor(r, &[5, 5], -4.0, 4.0, &[], 0.0)], |g, v| Ok(g.sigmoid(v[0])));
    check_op("relu", 9, 1000, |r| vec![rand_tensor(r, &[5, 5], -2.0, 2.0, &[0.0], 0.05)], |g, v| Ok(g.relu(v[0])));
    check_op("sin", 10, 1000, |r| vec![rand_tensor(r, &[5, 5], -3.0, 3.0, &[], 0.0)], |g, v| Ok(g.sin(v[0])));
    check_op("cos", 11, 1000, |r| vec![rand_tensor(r, &[5, 5], -3.0, 3.0, &[], 0.0)], |g, v| Ok(g.cos(v[0])));
    check_op(
        "clamp",
        12,
        1000,
        |r| vec![rand_tensor(r, &[5, 5], -2.0, 2.0, &[-1.0, 1.0], 0.05)],
        |g, v| Ok(g.clamp(v[0], -1.0, 1.0)),
    );
    check_op("add_scalar", 13, 1000, |r| vec![rand_tensor(r, &[5, 5], -2.0, 2.0, &[], 0.0)], |g, v| {
        Ok(g.add_scalar(v[0], 0.7))
    });
    check_op("mul_scalar", 14, 1000, |r| vec![rand_tensor(r, &[5, 5], -2.0, 2.0, &[], 0.0)], |g, v| {
        Ok(g.mul_scalar(v[0], -1.3))
    });
}

#[test]
fn matmul_and_transpose() {
    let inputs = |r: &mut Rng| {
        vec![
            rand_tensor(r, &[3, 4], -1.0, 1.0, &[], 0.0),
            rand_tensor(r, &[4, 5], -1.0, 1.0, &[], 0.0),
        ]
    };
    check_op("matmul", 15, 1000, inputs, |g, v| g.matmul(v[0], v[1]));
    check_op("transpose", 16, 1000, |r| vec![rand_tensor(r, &[4, 6], -1.0, 1.0, &[], 0.0)], |g, v| {
        g.transpose(v[0])
    });
}

#[test]
fn normalization_ops() {
    check_op("softmax", 17, 1000, |r| vec![rand_tensor(r, &[6, 5], -3.0, 3.0, &[], 0.0)], |g, v| {
        g.softmax_last(v[0])
    });
    check_op("layer_norm", 18, 1000, |r| vec![rand_tensor(r, &[6, 5], -3.0, 3.0, &[], 0.0)], |g, v| {
        g.layer_norm_last(v[0], 1e-5)
    });
    let inputs = |r: &mut Rng| {
        vec![
            rand_tensor(r, &[6, 4], -2.0, 2.0, &[], 0.0),
            rand_tensor(r, &[4], -2.0, 2.0, &[], 0.0),
        ]
    };
    check_op("add_vec_last", 19, 1000, inputs, |g, v| g.add_vec_last(v[0], v[1]));
    let inputs = |r: &mut Rng| {
        vec![
            rand_tensor(r, &[6, 4], -2.0, 2.0, &[], 0.0),
            rand_tensor(r, &[4], -2.0, 2.0, &[], 0.0),
        ]
    };
    check_op("mul_vec_last", 20, 1000, inputs, |g, v| g.mul_vec_last(v[0], v[1]));
}

#[test]
fn shape_ops() {
    let inputs = |r: &mut Rng| {
        vec![
            rand_tensor(r, &[3, 4], -1.0, 1.0, &[], 0.0),
            rand_tensor(r, &[3, 2], -1.0, 1.0, &[], 0.0),
        ]
    };
    check_op("concat", 21, 1000, inputs, |g, v| g.concat(&[v[0], v[1]], 1));
    check_op("slice_axis", 22, 1000, |r| vec![rand_tensor(r, &[4, 6], -1.0, 1.0, &[], 0.0)], |g, v| {
        g.slice_axis(v[0], 1, 1, 4)
    });
    check_op("reshape", 23, 1000, |r| vec![rand_tensor(r, &[4, 6], -1.0, 1.0, &[], 0.0)], |g, v| {
        g.reshape(v[0], vec![8, 3])
    });
    check_op("gather_rows", 24, 1000, |r| vec![rand_tensor(r, &[6, 4], -1.0, 1.0, &[], 0.0)], |g, v| {
        g.gather_rows(v[0], &[5, 0, 2, 0])
    });
}

#[test]
fn reduction_ops() {
    check_op("sum_all", 25, 1000, |r| vec![rand_tensor(r, &[5, 6], -1.0, 1.0, &[], 0.0)], |g, v| {
        Ok(g.sum_all(v[0]))
    });
    check_op("mean_all", 26, 1000, |r| vec![rand_tensor(r, &[5, 6], -1.0, 1.0, &[], 0.0)], |g, v| {
        Ok(g.mean_all(v[0]))
    });
    check_op("sum_axis", 27, 1000, |r| vec![rand_tensor(r, &[4, 3, 5], -1.0, 1.0, &[], 0.0)], |g, v| {
        g.sum_axis(v[0], 1)
    });
    check_op("mean_axis", 28, 1000, |r| vec![rand_tensor(r, &[4, 3, 5], -1.0, 1.0, &[], 0.0)], |g, v| {
        g.mean_axis(v[0], 2)
    });
}

#[test]
fn spatial_ops() {
    let inputs = |r: &mut Rng| {
        vec![
            rand_tensor(r, &[5, 5, 2], -1.0, 1.0, &[], 0.0),
            rand_tensor(r, &[3, 3, 2, 3], -1.0, 1.0, &[], 0.0),
        ]
    };
    check_op("conv2d_s1", 29, 1000, inputs, |g, v| g.conv2d(v[0], v[1], 1, 1));
    let inputs = |r: &mut Rng| {
        vec![
            rand_tensor(r, &[6, 6, 2], -1.0, 1.0, &[], 0.0),
            rand_tensor(r, &[3, 3, 2, 2], -1.0, 1.0, &[], 0.0),
        ]
    };
    check_op("conv2d_s2", 30, 1000, inputs, |g, v| g.conv2d(v[0], v[1], 2, 1));
    check_op("avg_pool2", 31, 1000, |r| vec![rand_tensor(r, &[6, 4, 3], -1.0, 1.0, &[], 0.0)], |g, v| {
        g.avg_pool2(v[0])
    });
    check_op("upsample", 32, 1000, |r| vec![rand_tensor(r, &[3, 4, 2], -1.0, 1.0, &[], 0.0)], |g, v| {
        g.upsample_nearest2(v[0])
    });
}

#[test]
fn warp_bilinear_grads() {
    // Positions stay strictly inside the map and away from the integer
    // lattice, where bilinear interpolation has derivative kinks.
    let inputs = |r: &mut Rng| {
        let feats = rand_tensor(r, &[5, 6, 2], -1.0, 1.0, &[], 0.0);
        let pos = Tensor::from_fn(&[3, 3, 2], |i| {
            let max = if i % 2 == 0 { 5.0 } else { 4.0 };
            let cell = rng::uniform(r, 0.0, max - 1.0).floor();
            cell + rng::uniform(r, 0.1, 0.9)
        });
        vec![feats, pos]
    };
    check_op("warp_bilinear", 33, 1000, inputs, |g, v| g.warp_bilinear(v[0], v[1]));
}

#[test]
fn smooth_l1_grads() {
    // Keep |a−b| away from the 0 and ±1 curvature transitions.
    let inputs = |r: &mut Rng| {
        let a = rand_tensor(r, &[5, 5], -2.0, 2.0, &[], 0.0);
        let b = Tensor::from_fn(&[5, 5], |i| loop {
            let v = rng::uniform(r, -2.0, 2.0);
            let d: f64 = a.data()[i] - v;
            if d.abs() > 0.05 && (d.abs() - 1.0).abs() > 0.05 {
                break v;
            }
        });
        vec![a, b]
    };
    check_op("smooth_l1", 34, 1000, inputs, |g, v| g.smooth_l1(v[0], v[1]));
}

/// Random 3-layer MLP: grads vs central differences at tight tolerance.
#[test]
fn mlp_gradients_match_finite_differences() {
    let mut r = rng::seeded(99);
    for _ in 0..5 {
        let x = rand_tensor(&mut r, &[1, 6], -1.0, 1.0, &[], 0.0);
        let w1 = rand_tensor(&mut r, &[6, 8], -0.5, 0.5, &[], 0.0);
        let w2 = rand_tensor(&mut r, &[8, 8], -0.5, 0.5, &[], 0.0);
        let w3 = rand_tensor(&mut r, &[8, 1], -0.5, 0.5, &[], 0.0);
        let inputs = vec![x, w1, w2, w3];

        let eval = |ts: &[Tensor]| -> Result<f64> {
            let g = Graph::new();
            let x = g.leaf(ts[0].clone());
            let w1 = g.leaf(ts[1].clone());
            let w2 = g.leaf(ts[2].clone());
            let w3 = g.leaf(ts[3].clone());
            let h1 = g.sigmoid(g.matmul(x, w1)?);
            let h2 = g.sigmoid(g.matmul(h1, w2)?);
            Ok(g.value(g.sum_all(g.matmul(h2, w3)?)).item())
        };

        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let h1 = g.sigmoid(g.matmul(vars[0], vars[1]).unwrap());
        let h2 = g.sigmoid(g.matmul(h1, vars[2]).unwrap());
        let y = g.sum_all(g.matmul(h2, vars[3]).unwrap());
        g.backward(y).unwrap();

        for (which, input) in inputs.iter().enumerate() {
            let analytic = g.grad_of(vars[which]).unwrap();
            for elem in 0..input.numel() {
                let numeric = central_diff(&eval, &inputs, which, elem, STEP).unwrap();
                let a = analytic.data()[elem];
                assert!(
                    close(a, numeric, 1e-5, 1e-9),
                    "mlp input {which} elem {elem}: {a} vs {numeric}"
                );
            }
        }
    }
}

/// Direct nested-loop convolution, kept independent of the im2col path.
fn conv2d_reference(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, _, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    Tensor::from_fn(&[oh, ow, cout], |flat| {
        let co = flat % cout;
        let ox = (flat / cout) % ow;
        let oy = flat / (cout * ow);
        let mut acc = 0.0;
        for ky in 0..kh {
            for kx in 0..kw {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                    continue;
                }
                for ci in 0..cin {
                    acc += x.at(&[iy as usize, ix as usize, ci]) * k.at(&[ky, kx, ci, co]);
                }
            }
        }
        acc
    })
}

#[test]
fn conv2d_matches_nested_loop_reference() {
    let mut r = rng::seeded(55);
    for trial in 0..20 {
        let cin = 1 + trial % 3;
        let cout = 1 + (trial / 3) % 3;
        let x = rand_tensor(&mut r, &[5, 5, cin], -2.0, 2.0, &[], 0.0);
        let k = rand_tensor(&mut r, &[3, 3, cin, cout], -2.0, 2.0, &[], 0.0);
        for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
            let g = Graph::new();
            let xv = g.leaf(x.clone());
            let kv = g.leaf(k.clone());
            let got = g.value(g.conv2d(xv, kv, stride, pad).unwrap());
            let want = conv2d_reference(&x, &k, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(
                got.max_abs_diff(&want).unwrap() < 1e-10,
                "trial {trial} stride {stride} pad {pad}"
            );
        }
    }
}

#[test]
fn softmax_rows_are_a_distribution() {
    let mut r = rng::seeded(77);
    for _ in 0..200 {
        let x = rand_tensor(&mut r, &[4, 7], -30.0, 30.0, &[], 0.0);
        let g = Graph::new();
        let y = g.value(g.softmax_last(g.leaf(x)).unwrap());
        for row in y.data().chunks(7) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
        }
    }
}
