//! Criterion against independent oracles: exhaustive search for the
//! assignment solver and central finite differences for every loss.

mod oracle_support;

use fewshape::criterion::{
    hungarian, loss_class, loss_det_bezier, loss_det_rbox, loss_fs, total_loss, LossWeights,
    Matching,
};
use fewshape::geometry::{BezierRegion, RotatedBox};
use fewshape::sampler::{make_score_targets, TokenMeta};
use fewshape_numerics::gradcheck::{central_diff, close};
use fewshape_numerics::rng::{self, Rng};
use fewshape_numerics::{Graph, Tensor};
use oracle_support::brute_force_assignment;

#[test]
fn hungarian_matches_brute_force_on_1000_matrices() {
    let mut r = rng::seeded(601);
    for trial in 0..1000 {
        let t = 1 + rng::uniform_index(&mut r, 7); // targets ≤ 7
        let p = t + rng::uniform_index(&mut r, 6); // predictions ≥ targets
        let cost: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..t).map(|_| rng::uniform(&mut r, -5.0, 5.0)).collect())
            .collect();
        let m = hungarian(&cost).unwrap();
        assert_eq!(m.pairs.len(), t, "trial {trial}: every target matched");
        let total: f64 = m.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        let (best, _) = brute_force_assignment(&cost);
        assert!(
            (total - best).abs() < 1e-9,
            "trial {trial}: solver {total} vs brute force {best}"
        );
        // injectivity both ways
        let mut seen_p = std::collections::BTreeSet::new();
        let mut seen_t = std::collections::BTreeSet::new();
        for &(pi, ti) in &m.pairs {
            assert!(seen_p.insert(pi) && seen_t.insert(ti));
        }
    }
}

#[test]
fn hungarian_handles_more_targets_than_predictions() {
    let mut r = rng::seeded(602);
    for _ in 0..200 {
        let p = 1 + rng::uniform_index(&mut r, 4);
        let t = p + 1 + rng::uniform_index(&mut r, 3);
        let cost: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..t).map(|_| rng::uniform(&mut r, 0.0, 9.0)).collect())
            .collect();
        let m = hungarian(&cost).unwrap();
        assert_eq!(m.pairs.len(), p, "pair count = min(P, T)");
        let total: f64 = m.pairs.iter().map(|&(i, j)| cost[i][j]).sum();
        // transpose and reuse the oracle
        let cost_t: Vec<Vec<f64>> = (0..t)
            .map(|j| (0..p).map(|i| cost[i][j]).collect())
            .collect();
        let (best, _) = brute_force_assignment(&cost_t);
        assert!((total - best).abs() < 1e-9);
    }
}

const STEP: f64 = 1e-6;
const RTOL: f64 = 1e-4;
const ATOL: f64 = 1e-7;

fn rand_tensor(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng::uniform(r, lo, hi))
}

/// Gradient of the classification loss wrt head outputs (through the clamp
/// and the log terms) against central differences.
#[test]
fn class_loss_gradient_matches_fd() {
    let mut r = rng::seeded(603);
    for _ in 0..100 {
        let n = 2 + rng::uniform_index(&mut r, 6);
        let p = rand_tensor(&mut r, &[n, 1], 0.05, 0.95);
        let matched: Vec<bool> = (0..n).map(|_| rng::uniform(&mut r, 0.0, 1.0) > 0.6).collect();
        let g = Graph::new();
        let pv = g.leaf(p.clone());
        let l = loss_class(&g, pv, &matched).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad_of(pv).unwrap();
        let matched2 = matched.clone();
        let eval = move |ts: &[Tensor]| -> fewshape_numerics::Result<f64> {
            let g = Graph::new();
            let pv = g.leaf(ts[0].clone());
            let l = loss_class(&g, pv, &matched2).map_err(|_| {
                fewshape_numerics::NumericsError::InvalidTensor("loss".into())
            })?;
            Ok(g.value(l).item())
        };
        for elem in 0..n {
            let numeric = central_diff(&eval, &[p.clone()], 0, elem, STEP).unwrap();
            let a = analytic.data()[elem];
            assert!(close(a, numeric, RTOL, ATOL), "elem {elem}: {a} vs {numeric}");
        }
    }
}

/// Gradient of the scale-invariant box loss wrt the raw (sigmoid-space) box
/// parameters against central differences, at random matchings.
#[test]
fn det_loss_gradient_matches_fd() {
    let mut r = rng::seeded(604);
    let img = (128.0, 128.0);
    for _ in 0..100 {
        let n = 3 + rng::uniform_index(&mut r, 4);
        let t_count = 1 + rng::uniform_index(&mut r, 3.min(n));
        let params = rand_tensor(&mut r, &[n, 5], 0.15, 0.85);
        let targets: Vec<RotatedBox> = (0..t_count)
            .map(|_| {
                RotatedBox::new(
                    rng::uniform(&mut r, 20.0, 100.0),
                    rng::uniform(&mut r, 20.0, 100.0),
                    rng::uniform(&mut r, 6.0, 50.0),
                    rng::uniform(&mut r, 4.0, 20.0),
                    rng::uniform(&mut r, -1.4, 1.4),
                )
                .unwrap()
            })
            .collect();
        let mut preds: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut r, &mut preds);
        let matching = Matching {
            pairs: (0..t_count).map(|t| (preds[t], t)).collect(),
            unmatched_preds: preds[t_count..].to_vec(),
        };
        let weights = LossWeights::default();

        let g = Graph::new();
        let pv = g.leaf(params.clone());
        let (l, _) = loss_det_rbox(&g, pv, &matching, &targets, img, &weights).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad_of(pv).unwrap();

        let (m2, t2, w2) = (matching.clone(), targets.clone(), weights.clone());
        let eval = move |ts: &[Tensor]| -> fewshape_numerics::Result<f64> {
            let g = Graph::new();
            let pv = g.leaf(ts[0].clone());
            let (l, _) = loss_det_rbox(&g, pv, &m2, &t2, img, &w2)
                .map_err(|_| fewshape_numerics::NumericsError::InvalidTensor("loss".into()))?;
            Ok(g.value(l).item())
        };
        for _ in 0..6 {
            let elem = rng::uniform_index(&mut r, 5 * n);
            let numeric = central_diff(&eval, &[params.clone()], 0, elem, STEP).unwrap();
            let a = analytic.data()[elem];
            assert!(close(a, numeric, RTOL, ATOL), "elem {elem}: {a} vs {numeric}");
        }
    }
}

/// Gradient of the Bezier-mode detection loss wrt both heads.
#[test]
fn bezier_loss_gradient_matches_fd() {
    let mut r = rng::seeded(605);
    let img = (128.0, 128.0);
    for _ in 0..100 {
        let n = 3 + rng::uniform_index(&mut r, 3);
        let box_params = rand_tensor(&mut r, &[n, 4], 0.2, 0.8);
        let bez_params = rand_tensor(&mut r, &[n, 16], 0.2, 0.8);
        let metas: Vec<TokenMeta> = (0..n)
            .map(|i| TokenMeta {
                scale: i % 3,
                divisor: [8, 16, 32][i % 3],
                row: i,
                col: 1,
                score: 0.5,
            })
            .collect();
        let target_axis = vec![RotatedBox::new(60.0, 60.0, 30.0, 12.0, 0.0).unwrap()];
        let target_bez = vec![BezierRegion {
            points: [
                [45.0, 54.0], [55.0, 52.0], [65.0, 52.0], [75.0, 54.0],
                [75.0, 66.0], [65.0, 68.0], [55.0, 68.0], [45.0, 66.0],
            ],
        }];
        let matching = Matching {
            pairs: vec![(1, 0)],
            unmatched_preds: (0..n).filter(|&i| i != 1).collect(),
        };

        let g = Graph::new();
        let bv = g.leaf(box_params.clone());
        let zv = g.leaf(bez_params.clone());
        let (l, _) = loss_det_bezier(&g, bv, zv, &matching, &target_axis, &target_bez, &metas, img)
            .unwrap();
        g.backward(l).unwrap();
        let grads = [g.grad_of(bv).unwrap(), g.grad_of(zv).unwrap()];

        let (m2, ta2, tb2, me2) = (matching.clone(), target_axis.clone(), target_bez.clone(), metas.clone());
        let eval = move |ts: &[Tensor]| -> fewshape_numerics::Result<f64> {
            let g = Graph::new();
            let bv = g.leaf(ts[0].clone());
            let zv = g.leaf(ts[1].clone());
            let (l, _) = loss_det_bezier(&g, bv, zv, &m2, &ta2, &tb2, &me2, img)
                .map_err(|_| fewshape_numerics::NumericsError::InvalidTensor("loss".into()))?;
            Ok(g.value(l).item())
        };
        let inputs = [box_params.clone(), bez_params.clone()];
        for which in 0..2 {
            for _ in 0..3 {
                let elem = rng::uniform_index(&mut r, inputs[which].numel());
                let numeric = central_diff(&eval, &inputs, which, elem, STEP).unwrap();
                let a = grads[which].data()[elem];
                assert!(close(a, numeric, RTOL, ATOL), "input {which} elem {elem}: {a} vs {numeric}");
            }
        }
    }
}

/// Gradient of the score-map loss wrt predicted scores.
#[test]
fn fs_loss_gradient_matches_fd() {
    let mut r = rng::seeded(606);
    let targets = make_score_targets(
        &[RotatedBox::new(30.0, 30.0, 28.0, 10.0, 0.4).unwrap()],
        64,
        64,
    );
    for _ in 0..100 {
        let maps = [
            rand_tensor(&mut r, &[8, 8], 0.0, 1.0),
            rand_tensor(&mut r, &[4, 4], 0.0, 1.0),
            rand_tensor(&mut r, &[2, 2], 0.0, 1.0),
        ];
        let g = Graph::new();
        let vars = [g.leaf(maps[0].clone()), g.leaf(maps[1].clone()), g.leaf(maps[2].clone())];
        let l = loss_fs(&g, &vars, &targets).unwrap();
        g.backward(l).unwrap();
        let analytic = g.grad_of(vars[0]).unwrap();

        let t2 = targets.clone();
        let eval = move |ts: &[Tensor]| -> fewshape_numerics::Result<f64> {
            let g = Graph::new();
            let vars = [g.leaf(ts[0].clone()), g.leaf(ts[1].clone()), g.leaf(ts[2].clone())];
            let l = loss_fs(&g, &vars, &t2)
                .map_err(|_| fewshape_numerics::NumericsError::InvalidTensor("loss".into()))?;
            Ok(g.value(l).item())
        };
        for _ in 0..5 {
            let elem = rng::uniform_index(&mut r, 64);
            let numeric = central_diff(&eval, &maps, 0, elem, STEP).unwrap();
            let a = analytic.data()[elem];
            assert!(close(a, numeric, RTOL, ATOL), "elem {elem}: {a} vs {numeric}");
        }
    }
}

/// Total loss wrt all three parts: the weighted-sum gradient is exact.
#[test]
fn total_loss_gradient_is_weighted_sum() {
    let g = Graph::new();
    let lc = g.leaf(Tensor::scalar(0.7));
    let ld = g.leaf(Tensor::scalar(0.8));
    let lf = g.leaf(Tensor::scalar(0.2));
    let w = LossWeights::default();
    let t = total_loss(&g, lc, ld, lf, &w, 10).unwrap();
    g.backward(t).unwrap();
    assert!((g.grad_of(lc).unwrap().item() - w.lambda_c).abs() < 1e-15);
    assert!((g.grad_of(ld).unwrap().item() - w.lambda_d).abs() < 1e-15);
    assert!((g.grad_of(lf).unwrap().item() - w.lambda_f(10)).abs() < 1e-15);
}
