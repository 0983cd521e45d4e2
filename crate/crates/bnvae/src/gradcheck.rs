//! Central finite-difference verification of tape gradients.

use crate::tape::{Node, Tape, TapeError};
use crate::tensor::Tensor;

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum GradCheck {
    /// Every parameter element compared; worst relative error reported.
    Checked { max_rel_error: f64, elements: usize },
    /// Some forward evaluation came within `h` of a hinge or clamp kink,
    /// where central differences are meaningless.
    SkippedKink { distance: f64 },
}

impl GradCheck {
    /// Relative error when checked; panics on a skipped check.
    pub fn max_rel_error(&self) -> f64 {
        match self {
            GradCheck::Checked { max_rel_error, .. } => *max_rel_error,
            GradCheck::SkippedKink { distance } => {
                panic!("gradient check skipped near a kink (distance {distance})")
            }
        }
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        match self {
            GradCheck::Checked { max_rel_error, .. } => *max_rel_error < tolerance,
            GradCheck::SkippedKink { .. } => true,
        }
    }
}

/// Compare the tape gradient of `build` against central differences.
///
/// `build` must construct a scalar loss from leaves created for `params`, in
/// a deterministic way (freeze any noise outside and pass it in as a leaf).
/// Returns the max over all parameter elements of
/// `|analytic - cd| / max(|analytic|, |cd|, 1e-8)` with step `h`.
pub fn gradient_check<F>(params: &[Tensor], build: F, h: f64) -> Result<GradCheck, TapeError>
where
    F: Fn(&mut Tape, &[Node]) -> Result<Node, TapeError>,
{
    assert!(h > 0.0, "step must be positive");

    let eval = |inputs: &[Tensor]| -> Result<(f64, f64), TapeError> {
        let mut tape = Tape::new();
        let nodes: Vec<Node> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &nodes)?;
        let v = tape.value(loss);
        if v.len() != 1 {
            return Err(TapeError::NonScalarLoss { shape: v.shape().to_vec() });
        }
        Ok((v.item(), tape.kink_distance()))
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let nodes: Vec<Node> = params.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &nodes)?;
    if tape.value(loss).len() != 1 {
        return Err(TapeError::NonScalarLoss { shape: tape.value(loss).shape().to_vec() });
    }
    let base_kink = tape.kink_distance();
    if base_kink <= h {
        return Ok(GradCheck::SkippedKink { distance: base_kink });
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = nodes.iter().map(|&n| grads.wrt(n)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel = 0.0f64;
    let mut elements = 0usize;
    for p in 0..params.len() {
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];

            work[p].data_mut()[i] = orig + h;
            let (f_plus, k_plus) = eval(&work)?;
            work[p].data_mut()[i] = orig - h;
            let (f_minus, k_minus) = eval(&work)?;
            work[p].data_mut()[i] = orig;

            let kink = k_plus.min(k_minus);
            if kink <= h {
                return Ok(GradCheck::SkippedKink { distance: kink });
            }

            let cd = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[p].data()[i];
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
            elements += 1;
        }
    }
    Ok(GradCheck::Checked { max_rel_error: max_rel, elements })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    #[test]
    fn linear_layer_grad_matches_fd() {
        let mut src = RandomSource::new(11);
        let x = src.standard_normal(&[4, 3]);
        let w = src.standard_normal(&[3, 2]);
        let b = src.standard_normal(&[2]);
        let result = gradient_check(
            &[x, w, b],
            |tape, nodes| {
                let y = tape.matmul(nodes[0], nodes[1])?;
                let y = tape.add(y, nodes[2])?;
                let sq = tape.square(y);
                tape.sum_all(sq)
            },
            1e-5,
        )
        .unwrap();
        assert!(result.max_rel_error() < 1e-6, "{result:?}");
    }

    #[test]
    fn two_layer_tanh_network_grad_matches_fd() {
        let mut src = RandomSource::new(17);
        let x = src.standard_normal(&[3, 4]);
        let w1 = src.uniform(&[4, 5], -0.5, 0.5);
        let b1 = src.uniform(&[5], -0.1, 0.1);
        let w2 = src.uniform(&[5, 2], -0.5, 0.5);
        let b2 = src.uniform(&[2], -0.1, 0.1);
        let result = gradient_check(
            &[x, w1, b1, w2, b2],
            |tape, n| {
                let h = tape.matmul(n[0], n[1])?;
                let h = tape.add(h, n[2])?;
                let h = tape.tanh(h);
                let o = tape.matmul(h, n[3])?;
                let o = tape.add(o, n[4])?;
                let o = tape.square(o);
                tape.sum_all(o)
            },
            1e-5,
        )
        .unwrap();
        assert!(result.max_rel_error() < 1e-6, "{result:?}");
    }

    #[test]
    fn hinge_at_threshold_is_skipped() {
        let x = Tensor::vector(&[0.3, 0.9]);
        let result = gradient_check(
            &[x],
            |tape, n| {
                let h = tape.hinge_max(n[0], 0.3);
                tape.sum_all(h)
            },
            1e-5,
        )
        .unwrap();
        assert!(matches!(result, GradCheck::SkippedKink { distance } if distance == 0.0));
    }

    #[test]
    fn every_primitive_matches_fd_on_random_configs() {
        // 100 random shape/value draws per differentiable primitive.
        let mut src = RandomSource::new(2024);
        let mut worst = 0.0f64;
        for case in 0..100 {
            let m = 1 + src.next_usize(4);
            let k = 1 + src.next_usize(4);
            let n = 1 + src.next_usize(4);
            let a2 = src.standard_normal(&[m, k]);
            let b2 = src.standard_normal(&[k, n]);
            let same = src.standard_normal(&[m, k]);
            let suffix = src.standard_normal(&[k]);
            let pos = src.uniform(&[m, k], 0.5, 3.0);

            type BuildFn = Box<dyn Fn(&mut Tape, &[Node]) -> Result<Node, TapeError>>;
            let ops: Vec<(&str, Vec<Tensor>, BuildFn)> = vec![
                (
                    "matmul",
                    vec![a2.clone(), b2.clone()],
                    Box::new(|t: &mut Tape, n: &[Node]| {
                        let y = t.matmul(n[0], n[1])?;
                        t.sum_all(y)
                    }),
                ),
                (
                    "add",
                    vec![a2.clone(), same.clone()],
                    Box::new(|t, n| {
                        let y = t.add(n[0], n[1])?;
                        let y = t.square(y);
                        t.sum_all(y)
                    }),
                ),
                (
                    "sub-broadcast",
                    vec![a2.clone(), suffix.clone()],
                    Box::new(|t, n| {
                        let y = t.sub(n[0], n[1])?;
                        let y = t.square(y);
                        t.sum_all(y)
                    }),
                ),
                (
                    "mul",
                    vec![a2.clone(), same.clone()],
                    Box::new(|t, n| {
                        let y = t.mul(n[0], n[1])?;
                        t.sum_all(y)
                    }),
                ),
                (
                    "exp",
                    vec![a2.clone()],
                    Box::new(|t, n| {
                        let y = t.exp(n[0])?;
                        t.sum_all(y)
                    }),
                ),
                (
                    "log",
                    vec![pos.clone()],
                    Box::new(|t, n| {
                        let y = t.log(n[0])?;
                        t.sum_all(y)
                    }),
                ),
                (
                    "tanh",
                    vec![a2.clone()],
                    Box::new(|t, n| {
                        let y = t.tanh(n[0]);
                        t.sum_all(y)
                    }),
                ),
                (
                    "sigmoid",
                    vec![a2.clone()],
                    Box::new(|t, n| {
                        let y = t.sigmoid(n[0]);
                        t.sum_all(y)
                    }),
                ),
                (
                    "square",
                    vec![a2.clone()],
                    Box::new(|t, n| {
                        let y = t.square(n[0]);
                        t.sum_all(y)
                    }),
                ),
                (
                    "sum-axis",
                    vec![a2.clone()],
                    Box::new(|t, n| {
                        let y = t.sum_axis(n[0], 1)?;
                        let y = t.square(y);
                        t.sum_all(y)
                    }),
                ),
                (
                    "mean-axis",
                    vec![a2.clone()],
                    Box::new(|t, n| {
                        let y = t.mean_axis(n[0], 0)?;
                        let y = t.square(y);
                        t.sum_all(y)
                    }),
                ),
                (
                    "concat",
                    vec![a2.clone(), same.clone()],
                    Box::new(|t, n| {
                        let y = t.concat(&[n[0], n[1]], 1)?;
                        let y = t.square(y);
                        t.sum_all(y)
                    }),
                ),
                (
                    "slice",
                    vec![a2.clone()],
                    Box::new(move |t, n| {
                        let y = t.slice(n[0], 1, 0, 1)?;
                        let y = t.square(y);
                        t.sum_all(y)
                    }),
                ),
                (
                    "scalar-scale",
                    vec![a2.clone()],
                    Box::new(|t, n| {
                        let y = t.scale(n[0], -1.75);
                        t.sum_all(y)
                    }),
                ),
                (
                    "xent",
                    vec![a2.clone()],
                    Box::new(move |t, n| {
                        let targets: Vec<usize> = (0..m).map(|r| r % k).collect();
                        let y = t.xent_rows(n[0], &targets)?;
                        t.sum_all(y)
                    }),
                ),
            ];

            for (name, params, build) in ops {
                let res = gradient_check(&params, build.as_ref(), 1e-5).unwrap();
                match res {
                    GradCheck::Checked { max_rel_error, .. } => {
                        assert!(
                            max_rel_error < 1e-6,
                            "case {case}: {name} rel err {max_rel_error}"
                        );
                        if max_rel_error > worst {
                            worst = max_rel_error;
                        }
                    }
                    GradCheck::SkippedKink { .. } => panic!("{name} has no kinks"),
                }
            }
        }
        assert!(worst < 1e-6);
    }

    #[test]
    fn replay_with_same_seed_is_bit_identical() {
        let run = || {
            let mut src = RandomSource::with_stream(77, 2);
            let x = src.standard_normal(&[5, 3]);
            let w = src.standard_normal(&[3, 3]);
            let mut tape = Tape::new();
            let nx = tape.leaf(x);
            let nw = tape.leaf(w);
            let y = tape.matmul(nx, nw).unwrap();
            let y = tape.tanh(y);
            let loss = tape.sum_all(y).unwrap();
            let v = tape.value(loss).item();
            let g = tape.backward(loss).unwrap().wrt(nw);
            (v, g.data().to_vec())
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
