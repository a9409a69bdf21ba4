//! Analytic gradients against central finite differences (h = 1e-5, f64).

use fcdx_tensor::gradcheck::{check_inputs, check_params, max_rel_err};
use fcdx_tensor::nn::{BatchNorm, Conv3d, Linear};
use fcdx_tensor::{ParamStore, Result, Stream, Tape, Tensor, Var};

const H: f64 = 1e-5;
const PROBES: usize = 20;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], s: &mut Stream) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| s.uniform_range(-1.0, 1.0))
}

/// `Σ y ⊙ R` for a fixed pseudo-random `R`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let r = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.7548776662).sin());
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

fn check<F>(name: &str, inputs: Vec<Tensor<f64>>, f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut s = Stream::from_seed(name.len() as u64 * 7919);
    let probes = check_inputs(&inputs, f, PROBES, H, &mut s).unwrap();
    let err = max_rel_err(&probes);
    assert!(err <= TOL, "{name}: max relative error {err:e}");
}

#[test]
fn elementwise_ops() {
    let mut s = Stream::from_seed(1);
    let (a, b) = (random(&[3, 4], &mut s), random(&[3, 4], &mut s));
    check("add", vec![a.clone(), b.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y)
    });
    check("sub", vec![a.clone(), b.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        project(t, y)
    });
    check("mul", vec![a.clone(), b.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y)
    });
    check("scale_exp", vec![a.clone()], |t, v| {
        let y = t.scale(v[0], 0.5);
        let y = t.exp(y);
        project(t, y)
    });
    check("sigmoid", vec![a.clone()], |t, v| {
        let y = t.sigmoid(v[0]);
        project(t, y)
    });
    check("relu", vec![a.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], |t, v| {
        let y = t.relu(v[0]);
        project(t, y)
    });
    check("mean", vec![a.clone()], |t, v| {
        let y = t.exp(v[0]);
        Ok(t.mean(y))
    });
}

#[test]
fn elu_at_plus_minus_point_seven() {
    let x = Tensor::from_f64(&[2], &[0.7, -0.7]).unwrap();
    let mut s = Stream::from_seed(2);
    let probes = check_inputs(&[x], |t, v| {
        let y = t.elu(v[0]);
        project(t, y)
    }, 8, H, &mut s)
    .unwrap();
    assert!(max_rel_err(&probes) <= TOL);
}

#[test]
fn matrix_ops() {
    let mut s = Stream::from_seed(3);
    check("matmul", vec![random(&[3, 4], &mut s), random(&[4, 2], &mut s)], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        project(t, y)
    });
    check("transpose", vec![random(&[3, 4], &mut s)], |t, v| {
        let y = t.transpose(v[0])?;
        project(t, y)
    });
    check("add_bias", vec![random(&[3, 4], &mut s), random(&[4], &mut s)], |t, v| {
        let y = t.add_bias(v[0], v[1])?;
        project(t, y)
    });
    check("softmax_rows", vec![random(&[3, 5], &mut s)], |t, v| {
        let y = t.softmax(v[0], 1)?;
        project(t, y)
    });
    check("softmax_cols", vec![random(&[3, 5], &mut s)], |t, v| {
        let y = t.softmax(v[0], 0)?;
        project(t, y)
    });
    check("mean_rows", vec![random(&[6, 3], &mut s)], |t, v| {
        let y = t.mean_rows(v[0])?;
        project(t, y)
    });
    check("concat_slice", vec![random(&[2, 3], &mut s), random(&[2, 2], &mut s)], |t, v| {
        let c = t.concat(&[v[0], v[1]], 1)?;
        let y = t.slice(c, 1, 1, 3)?;
        let y2 = t.mul(y, y)?;
        project(t, y2)
    });
    check("reshape_index0", vec![random(&[2, 6], &mut s)], |t, v| {
        let r = t.reshape(v[0], &[2, 3, 2])?;
        let y = t.index0(r, 1)?;
        let y = t.exp(y);
        project(t, y)
    });
}

#[test]
fn attention_and_losses() {
    let mut s = Stream::from_seed(4);
    check("attention", vec![random(&[5, 4], &mut s)], |t, v| {
        let y = t.attention(v[0])?;
        project(t, y)
    });
    check("attention_single", vec![random(&[1, 3], &mut s)], |t, v| {
        let y = t.attention(v[0])?;
        project(t, y)
    });
    check("cross_entropy", vec![random(&[5], &mut s)], |t, v| t.cross_entropy(v[0], 3));
    let target = Tensor::from_fn(&[2, 3, 3], |i| (i % 3 == 0) as u8 as f64);
    check("dice", vec![random(&[2, 3, 3], &mut s)], move |t, v| {
        let p = t.sigmoid(v[0]);
        t.dice_loss(p, &target, 1.0)
    });
}

#[test]
fn volumetric_ops() {
    let mut s = Stream::from_seed(5);
    check("conv3x3x3", vec![random(&[2, 2, 3, 4, 3], &mut s), random(&[3, 2, 3, 3, 3], &mut s), random(&[3], &mut s)], |t, v| {
        let y = t.conv3d(v[0], v[1], Some(v[2]))?;
        project(t, y)
    });
    check("conv1x1x1", vec![random(&[2, 3, 2, 2, 2], &mut s), random(&[2, 3, 1, 1, 1], &mut s)], |t, v| {
        let y = t.conv3d(v[0], v[1], None)?;
        project(t, y)
    });
    check("upsample2", vec![random(&[2, 2, 2, 3], &mut s)], |t, v| {
        let y = t.upsample(v[0], 2)?;
        project(t, y)
    });
    check("upsample4", vec![random(&[1, 1, 2, 2, 2], &mut s)], |t, v| {
        let y = t.upsample(v[0], 4)?;
        project(t, y)
    });
    check("avg_pool", vec![random(&[2, 4, 4, 2], &mut s)], |t, v| {
        let y = t.avg_pool(v[0], 2)?;
        project(t, y)
    });
    check("spatial_mean", vec![random(&[2, 3, 2, 2, 2], &mut s)], |t, v| {
        let y = t.spatial_mean(v[0])?;
        project(t, y)
    });
    check("gather", vec![random(&[2, 3, 2, 2, 2], &mut s)], |t, v| {
        let y = t.gather_points(v[0], 1, &[7, 0, 3])?;
        project(t, y)
    });
    check("broadcast", vec![random(&[2, 3], &mut s)], |t, v| {
        let y = t.broadcast_spatial(v[0], [2, 1, 2])?;
        project(t, y)
    });
    check("batchnorm_train", vec![random(&[2, 3, 2, 2, 2], &mut s), random(&[3], &mut s), random(&[3], &mut s)], |t, v| {
        let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        let y = t.elu(y);
        project(t, y)
    });
    let (mean, var) = ([0.1, -0.2, 0.3], [0.5, 1.5, 0.9]);
    check("batchnorm_eval", vec![random(&[2, 3, 2, 2, 2], &mut s), random(&[3], &mut s), random(&[3], &mut s)], move |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)?;
        let y = t.elu(y);
        project(t, y)
    });
}

#[test]
fn composite_mlp_parameters() {
    let mut s = Stream::from_seed(6);
    let mut store = ParamStore::<f64>::new();
    let l1 = Linear::new(&mut store, "l1", 4, 6, true, &mut s).unwrap();
    let l2 = Linear::new(&mut store, "l2", 6, 5, true, &mut s).unwrap();
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += 0.05);
    }
    let x = random(&[3, 4], &mut s);
    let probes = check_params(&mut store, |t, st| {
        let xv = t.constant(x.clone());
        let h = l1.forward(t, st, xv)?;
        let h = t.elu(h);
        let y = l2.forward(t, st, h)?;
        let r = t.index0(y, 1)?;
        t.cross_entropy(r, 4)
    }, PROBES, H, &mut s)
    .unwrap();
    assert!(max_rel_err(&probes) <= TOL, "{}", max_rel_err(&probes));
}

#[test]
fn composite_conv_stack_parameters() {
    let mut s = Stream::from_seed(7);
    let mut store = ParamStore::<f64>::new();
    let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
    let c1 = Conv3d::new(&mut store, "c1", 2, 3, 3, true, &mut s).unwrap();
    let c2 = Conv3d::new(&mut store, "c2", 3, 1, 1, true, &mut s).unwrap();
    let x = random(&[2, 2, 4, 4, 4], &mut s);
    let probes = check_params(&mut store, |t, st| {
        let xv = t.constant(x.clone());
        let h = bn.forward(t, st, xv)?;
        let h = t.elu(h);
        let h = c1.forward(t, st, h)?;
        let h = t.avg_pool(h, 2)?;
        let h = t.upsample(h, 2)?;
        let y = c2.forward(t, st, h)?;
        let p = t.sigmoid(y);
        let target = Tensor::from_fn(&[2 * 64], |i| (i % 5 == 0) as u8 as f64);
        t.dice_loss(p, &target, 1.0)
    }, PROBES, H, &mut s)
    .unwrap();
    assert!(max_rel_err(&probes) <= TOL, "{}", max_rel_err(&probes));
}

#[test]
fn branch_signature_tracks_relu_signs_and_gathers() {
    let sig = |x: f64, idx: &[usize]| {
        let mut tape = Tape::<f64>::new();
        let v = tape.constant(Tensor::new(&[1, 1, 1, 1, 2], vec![x, 1.0]).unwrap());
        tape.relu(v);
        tape.gather_points(v, 0, idx).unwrap();
        tape.branch_signature()
    };
    assert_eq!(sig(0.3, &[0]), sig(0.7, &[0]));
    assert_ne!(sig(0.3, &[0]), sig(-0.3, &[0]));
    assert_ne!(sig(0.3, &[0]), sig(0.3, &[1]));
}

#[test]
fn probes_next_to_a_kink_shrink_the_step() {
    // relu(x) summed, with one entry 3e-6 from the kink: a 1e-5 step straddles it.
    let x = Tensor::new(&[3], vec![3e-6, 0.5, -0.5]).unwrap();
    let mut s = Stream::from_seed(0);
    let probes = check_inputs(
        &[x],
        |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        },
        30,
        H,
        &mut s,
    )
    .unwrap();
    let near: Vec<_> = probes.iter().filter(|p| p.element == 0).collect();
    assert!(!near.is_empty());
    for p in near {
        assert!(p.step < 3e-6 && !p.straddles);
        assert!((p.numeric - 1.0).abs() < 1e-9 && p.analytic == 1.0);
    }
    assert!(probes.iter().filter(|p| p.element != 0).all(|p| p.step == H));
    assert!(max_rel_err(&probes) < 1e-9);
}
