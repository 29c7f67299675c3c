//! Finite-difference verification of every differentiable tape op, plus a
//! composite network stacking all of them. Central differences at h = 1e-5
//! in f64; an entry passes when it is within 1e-9 absolutely or 1e-5
//! relative to (|analytic| + |numeric| + 1e-8).

use degrid_core::rng;
use degrid_core::tape::{Tape, ValueId};
use degrid_core::tensor::Tensor;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;
const ABS_TOL: f64 = 1e-9;

type Builder = dyn Fn(&Tape<f64>, &[ValueId]) -> ValueId;

/// Evaluate `build` on a fresh tape, compare analytic gradients for every
/// input against central differences.
fn grad_check(name: &str, inputs: &[Tensor<f64>], build: &Builder) {
    let eval = |tensors: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let ids: Vec<ValueId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&tape, &ids);
        tape.value(root).unwrap().scalar_value()
    };

    // Analytic pass.
    let tape = Tape::new();
    let ids: Vec<ValueId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&tape, &ids);
    let grads = tape.backward(root).unwrap();
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs.iter())
        .map(|(&id, t)| grads.get_or_zeros(id, t.shape()).unwrap())
        .collect();

    for (ti, tensor) in inputs.iter().enumerate() {
        for e in 0..tensor.numel() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut pd = tensor.data().to_vec();
            pd[e] += H;
            plus[ti] = Tensor::from_vec(tensor.shape().to_vec(), pd).unwrap();
            let mut md = tensor.data().to_vec();
            md[e] -= H;
            minus[ti] = Tensor::from_vec(tensor.shape().to_vec(), md).unwrap();
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let a = analytic[ti].data()[e];
            let diff = (a - numeric).abs();
            assert!(
                diff < ABS_TOL || diff / (a.abs() + numeric.abs() + 1e-8) < REL_TOL,
                "{name}: input {ti} element {e}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn random(shape: Vec<usize>, name: &str) -> Tensor<f64> {
    let mut r = rng::stream(7, name);
    let n = shape.iter().product();
    Tensor::from_vec(shape, rng::normal_vec::<f64>(&mut r, n, 1.0)).unwrap()
}

/// Random values pushed away from zero so kink-crossings cannot spoil the
/// finite differences around relu/abs.
fn random_off_kink(shape: Vec<usize>, name: &str) -> Tensor<f64> {
    random(shape, name).map(|v| if v.abs() < 0.05 { v + 0.1 * v.signum() + 0.1 } else { v })
}

#[test]
fn conv_geometries() {
    let cases: &[(usize, usize, usize, usize, usize, usize, usize, usize, bool)] = &[
        (1, 1, 5, 5, 1, 3, 1, 1, true),
        (2, 2, 6, 6, 3, 3, 2, 1, true),
        (1, 3, 4, 6, 2, 1, 1, 0, false),
        (1, 1, 8, 8, 2, 2, 2, 0, true),
        (2, 2, 5, 7, 2, 3, 1, 0, false),
        (1, 2, 6, 4, 3, 3, 3, 1, true),
    ];
    for (i, &(n, ci, h, w, co, k, s, p, bias)) in cases.iter().enumerate() {
        let mut inputs = vec![
            random(vec![n, ci, h, w], &format!("cx{i}")),
            random(vec![co, ci, k, k], &format!("cw{i}")),
        ];
        if bias {
            inputs.push(random(vec![co], &format!("cb{i}")));
        }
        grad_check(&format!("conv{i}"), &inputs, &move |t, ids| {
            let b = bias.then(|| ids[2]);
            let y = t.conv2d(ids[0], ids[1], b, s, p, None).unwrap();
            t.sum(y).unwrap()
        });
    }
}

#[test]
fn linear_with_and_without_bias() {
    let x = random(vec![3, 4], "lx");
    let w = random(vec![2, 4], "lw");
    let b = random(vec![2], "lb");
    grad_check("linear+bias", &[x.clone(), w.clone(), b], &|t, ids| {
        let y = t.linear(ids[0], ids[1], Some(ids[2])).unwrap();
        // Square via mul so the weight gradient is value-dependent.
        let y2 = t.mul(y, y).unwrap();
        t.sum(y2).unwrap()
    });
    grad_check("linear", &[x, w], &|t, ids| {
        let y = t.linear(ids[0], ids[1], None).unwrap();
        t.sum(y).unwrap()
    });
}

#[test]
fn channel_affine() {
    let x = random(vec![2, 3, 4, 4], "bx");
    let s = random(vec![3], "bs");
    let h = random(vec![3], "bh");
    grad_check("channel_affine", &[x, s, h], &|t, ids| {
        let y = t.channel_affine(ids[0], ids[1], ids[2]).unwrap();
        let y2 = t.mul(y, y).unwrap();
        t.sum(y2).unwrap()
    });
}

#[test]
fn activations() {
    let x = random_off_kink(vec![2, 3, 4, 4], "rx");
    grad_check("relu", &[x], &|t, ids| {
        let y = t.relu(ids[0]).unwrap();
        let y2 = t.mul(y, y).unwrap();
        t.sum(y2).unwrap()
    });
    let x = random(vec![3, 5], "sx");
    grad_check("sigmoid", &[x], &|t, ids| {
        let y = t.sigmoid(ids[0]).unwrap();
        let y2 = t.mul(y, y).unwrap();
        t.sum(y2).unwrap()
    });
}

#[test]
fn pooling_and_resampling() {
    let x = random(vec![2, 2, 6, 6], "px");
    grad_check("max_pool2x", &[x], &|t, ids| {
        let y = t.max_pool2x(ids[0]).unwrap();
        let y2 = t.mul(y, y).unwrap();
        t.sum(y2).unwrap()
    });
    let x = random(vec![2, 3, 4, 4], "gx");
    grad_check("global_avg_pool", &[x], &|t, ids| {
        let y = t.global_avg_pool(ids[0]).unwrap();
        let y2 = t.mul(y, y).unwrap();
        t.sum(y2).unwrap()
    });
    let x = random(vec![1, 2, 6, 4], "dx");
    grad_check("bilinear_down2x", &[x], &|t, ids| {
        let y = t.bilinear_down2x(ids[0]).unwrap();
        let y2 = t.mul(y, y).unwrap();
        t.sum(y2).unwrap()
    });
}

#[test]
fn structural_ops() {
    let x = random(vec![1, 1, 5, 7], "rox");
    grad_check("roll2d", &[x], &|t, ids| {
        let y = t.roll2d(ids[0], 2, -3).unwrap();
        let y2 = t.mul(y, y).unwrap();
        t.sum(y2).unwrap()
    });
    let a = random(vec![3, 4], "aa");
    let b = random(vec![3, 4], "ab");
    grad_check("add_mul_scale", &[a, b], &|t, ids| {
        let s = t.add(ids[0], ids[1]).unwrap();
        let m = t.mul(s, ids[0]).unwrap();
        let sc = t.scale(m, -1.7).unwrap();
        t.sum(sc).unwrap()
    });
    let x = random(vec![4, 6], "mx");
    grad_check("mean", &[x], &|t, ids| {
        let y = t.mul(ids[0], ids[0]).unwrap();
        t.mean(y).unwrap()
    });
    let x = random(vec![3, 5], "scx");
    grad_check("select_column", &[x], &|t, ids| {
        let c = t.select_column(ids[0], 2).unwrap();
        let c2 = t.mul(c, c).unwrap();
        t.sum(c2).unwrap()
    });
}

#[test]
fn fused_losses() {
    let logits = random(vec![4, 3], "cel");
    grad_check("cross_entropy", &[logits], &|t, ids| {
        t.cross_entropy_mean(ids[0], &[0, 2, 1, 2]).unwrap()
    });

    let logits = random(vec![3, 2], "bcel");
    let targets = Tensor::from_vec(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    grad_check("bce_with_logits", &[logits], &move |t, ids| {
        t.bce_with_logits_mean(ids[0], &targets).unwrap()
    });

    // Keep |a - target| away from the kink of |.|
    let a = random(vec![2, 3], "l1a");
    let target = a.map(|v| v + 0.5 + 0.1 * v.signum());
    grad_check("l1_mean", &[a], &move |t, ids| {
        t.l1_mean(ids[0], &target).unwrap()
    });
}

#[test]
fn composite_network_end_to_end() {
    // conv -> affine -> relu -> maxpool -> conv(s2) -> relu -> add skip ->
    // gap -> linear -> cross-entropy: exercises fan-out and every joint.
    let x = random(vec![2, 2, 8, 8], "nx");
    let w1 = random(vec![3, 2, 3, 3], "nw1").map(|v| v * 0.5);
    let s1 = random(vec![3], "ns1").map(|v| 1.0 + 0.1 * v);
    let h1 = random(vec![3], "nh1").map(|v| 0.1 * v);
    let w2 = random(vec![3, 3, 3, 3], "nw2").map(|v| v * 0.5);
    let wskip = random(vec![3, 3, 1, 1], "nws").map(|v| v * 0.5);
    let wfc = random(vec![3, 3], "nwf");
    let bfc = random(vec![3], "nbf");
    let inputs = vec![x, w1, s1, h1, w2, wskip, wfc, bfc];
    grad_check("composite", &inputs, &|t, ids| {
        let c1 = t.conv2d(ids[0], ids[1], None, 1, 1, None).unwrap();
        let a1 = t.channel_affine(c1, ids[2], ids[3]).unwrap();
        let r1 = t.relu(a1).unwrap();
        let p1 = t.max_pool2x(r1).unwrap(); // 8 -> 4
        let c2 = t.conv2d(p1, ids[4], None, 2, 1, None).unwrap(); // 4 -> 2
        let r2 = t.relu(c2).unwrap();
        let skip_pool = t.max_pool2x(p1).unwrap(); // 4 -> 2
        let skip = t.conv2d(skip_pool, ids[5], None, 1, 0, None).unwrap();
        let j = t.add(r2, skip).unwrap();
        let g = t.global_avg_pool(j).unwrap();
        let logits = t.linear(g, ids[6], Some(ids[7])).unwrap();
        t.cross_entropy_mean(logits, &[1, 0]).unwrap()
    });
}

#[test]
fn grad_hook_is_vjp_of_roll_averaged_forward() {
    // For the same cotangent field g, autodiff through the mean-over-rolls
    // composition must equal the plain conv's input-gradient followed by
    // roll-averaging with negated offsets. This is a vector-Jacobian-product
    // identity, so it holds for any downstream head.
    use degrid_core::tape::{RollSet, PHASE_ROLLS};

    for (i, &(ci, h, w, co, k, s, p)) in [
        (1usize, 6usize, 6usize, 1usize, 2usize, 2usize, 0usize),
        (2, 8, 6, 3, 3, 2, 1),
        (3, 10, 10, 2, 3, 2, 1),
        (1, 12, 8, 2, 2, 2, 0),
    ]
    .iter()
    .enumerate()
    {
        let x = random(vec![2, ci, h, w], &format!("vx{i}"));
        let wt = random(vec![co, ci, k, k], &format!("vw{i}"));
        let b = random(vec![co], &format!("vb{i}"));

        // Cotangent realized as the linear functional sum(y * g).
        let probe_shape = {
            let t = Tape::new();
            let xi = t.leaf(x.clone());
            let wi = t.leaf(wt.clone());
            let y = t.conv2d(xi, wi, None, s, p, None).unwrap();
            t.value(y).unwrap().shape().to_vec()
        };
        let g = random(probe_shape, &format!("vg{i}"));

        // Side A: autodiff through the explicit averaged composition.
        let t = Tape::new();
        let xi = t.leaf(x.clone());
        let wi = t.leaf(wt.clone());
        let bi = t.leaf(b.clone());
        let gi = t.leaf(g.clone());
        let mut acc: Option<ValueId> = None;
        for (dy, dx) in PHASE_ROLLS {
            let rolled = t.roll2d(xi, dy, dx).unwrap();
            let c = t.conv2d(rolled, wi, Some(bi), s, p, None).unwrap();
            acc = Some(match acc {
                None => c,
                Some(a) => t.add(a, c).unwrap(),
            });
        }
        let mean = t.scale(acc.unwrap(), 0.25).unwrap();
        let probe = t.mul(mean, gi).unwrap();
        let root = t.sum(probe).unwrap();
        let side_a = t.backward(root).unwrap().get(xi).unwrap().unwrap().clone();

        // Side B: plain conv with the adjoint-offset gradient hook.
        let t = Tape::new();
        let xi = t.leaf(x.clone());
        let wi = t.leaf(wt.clone());
        let bi = t.leaf(b.clone());
        let gi = t.leaf(g.clone());
        let y = t
            .conv2d(xi, wi, Some(bi), s, p, Some(RollSet::adjoint()))
            .unwrap();
        let probe = t.mul(y, gi).unwrap();
        let root = t.sum(probe).unwrap();
        let side_b = t.backward(root).unwrap().get(xi).unwrap().unwrap().clone();

        for (a, b) in side_a.data().iter().zip(side_b.data().iter()) {
            assert!((a - b).abs() < 1e-10, "config {i}: {a} vs {b}");
        }
    }
}

#[test]
fn literal_and_adjoint_hooks_agree_on_period2_fields() {
    use degrid_core::tape::RollSet;
    // Tile an arbitrary 2x2 cell: shifting by +1 equals shifting by -1 on a
    // period-2 pattern, so the two offset conventions coincide exactly.
    let cell = [0.7, -1.3, 2.1, 0.4];
    let mut data = vec![0.0f64; 2 * 12 * 10];
    for c in 0..2 {
        for i in 0..12 {
            for j in 0..10 {
                data[(c * 12 + i) * 10 + j] = cell[(i % 2) * 2 + (j % 2)] * (c as f64 + 1.0);
            }
        }
    }
    let g = Tensor::from_vec(vec![1, 2, 12, 10], data).unwrap();
    let lit = RollSet::literal().average(&g).unwrap();
    let adj = RollSet::adjoint().average(&g).unwrap();
    assert_eq!(lit.data(), adj.data());
}
