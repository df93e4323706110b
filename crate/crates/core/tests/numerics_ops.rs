use causnet::numerics::{finite_difference_check, Array, Mask, NumericsError, Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 100;
const TOL: f64 = 1e-4;

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Projects an arbitrary-shaped output to a scalar with fixed random weights
/// so every output coordinate contributes to the checked gradient.
fn weighted_sum<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_array(&mut rng, &y.shape(), -1.0, 1.0);
    y.mul(y.tape().constant(w))?.sum()
}

fn check_op<F>(name: &str, shape: &[usize], lo: f64, hi: f64, f: F)
where
    F: for<'t> Fn(Var<'t>, &mut ChaCha8Rng) -> Result<Var<'t>, NumericsError>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
    let mut worst: f64 = 0.0;
    for trial in 0..TRIALS {
        let x = random_array(&mut rng, shape, lo, hi);
        let op_seed: u64 = rng.gen();
        let err = finite_difference_check(
            |v| {
                let mut op_rng = ChaCha8Rng::seed_from_u64(op_seed);
                let y = f(v, &mut op_rng)?;
                weighted_sum(y, op_seed)
            },
            &x,
            1e-5,
        )
        .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
        worst = worst.max(err);
    }
    assert!(worst <= TOL, "{name}: worst relative error {worst:e}");
}

fn const_like<'t>(v: Var<'t>, rng: &mut ChaCha8Rng, shape: &[usize]) -> Var<'t> {
    v.tape().constant(random_array(rng, shape, -1.0, 1.0))
}

#[test]
fn gradcheck_elementwise_binary_ops() {
    check_op("add", &[3, 4], -2.0, 2.0, |v, r| v.add(const_like(v, r, &[3, 4])));
    check_op("add_row", &[3, 4], -2.0, 2.0, |v, r| v.add(const_like(v, r, &[4])));
    check_op("sub", &[3, 4], -2.0, 2.0, |v, r| const_like(v, r, &[3, 4]).sub(v));
    check_op("mul_self", &[5], -2.0, 2.0, |v, _| v.mul(v));
    check_op("mul_row", &[2, 3], -2.0, 2.0, |v, r| v.mul(const_like(v, r, &[1, 3])));
    // gradient w.r.t. the broadcast operand
    check_op("mul_rhs_row", &[3], -2.0, 2.0, |v, r| const_like(v, r, &[4, 3]).mul(v));
    check_op("mul_rhs_scalar", &[1], -2.0, 2.0, |v, r| const_like(v, r, &[2, 3]).mul(v));
    check_op("scale", &[4], -2.0, 2.0, |v, _| v.scale(-1.7));
    check_op("add_scalar", &[4], -2.0, 2.0, |v, _| v.add_scalar(0.3)?.mul(v));
}

#[test]
fn gradcheck_matrix_ops() {
    check_op("matmul_lhs", &[3, 4], -1.0, 1.0, |v, r| v.matmul(const_like(v, r, &[4, 2])));
    check_op("matmul_rhs", &[4, 2], -1.0, 1.0, |v, r| const_like(v, r, &[3, 4]).matmul(v));
    check_op("bmm_lhs", &[2, 3, 4], -1.0, 1.0, |v, r| v.bmm(const_like(v, r, &[2, 4, 5]), false));
    check_op("bmm_rhs", &[2, 4, 5], -1.0, 1.0, |v, r| const_like(v, r, &[2, 3, 4]).bmm(v, false));
    check_op("bmm_t_lhs", &[2, 3, 4], -1.0, 1.0, |v, r| v.bmm(const_like(v, r, &[2, 5, 4]), true));
    check_op("bmm_t_rhs", &[2, 5, 4], -1.0, 1.0, |v, r| const_like(v, r, &[2, 3, 4]).bmm(v, true));
    check_op("bmm_self_t", &[2, 3, 4], -1.0, 1.0, |v, _| v.bmm(v, true));
}

#[test]
fn gradcheck_unary_ops() {
    check_op("sigmoid", &[6], -4.0, 4.0, |v, _| v.sigmoid());
    check_op("tanh", &[6], -3.0, 3.0, |v, _| v.tanh());
    check_op("exp", &[6], -2.0, 2.0, |v, _| v.exp());
    check_op("log", &[6], 0.2, 3.0, |v, _| v.log());
    check_op("xlogx", &[6], 0.05, 2.0, |v, _| v.xlogx());
    // keep inputs away from the kink
    check_op("relu", &[6], 0.1, 2.0, |v, r| v.mul(const_like(v, r, &[6]).sigmoid()?.add_scalar(-0.5)?.scale(4.0)?)?.relu());
}

#[test]
fn gradcheck_normalizing_ops() {
    check_op("softmax", &[3, 5], -3.0, 3.0, |v, _| v.softmax());
    check_op("masked_softmax", &[4, 4], -3.0, 3.0, |v, _| v.masked_softmax(&Mask::autoregressive(4)));
    check_op("layer_norm", &[3, 6], -2.0, 2.0, |v, _| v.layer_norm(1e-9));
}

#[test]
fn gradcheck_structural_ops() {
    check_op("concat0", &[2, 3], -1.0, 1.0, |v, r| Var::concat(&[v, const_like(v, r, &[1, 3]), v], 0));
    check_op("concat1", &[2, 3], -1.0, 1.0, |v, r| Var::concat(&[const_like(v, r, &[2, 2]), v], 1));
    check_op("slice", &[3, 4, 2], -1.0, 1.0, |v, _| v.slice(1, 1, 3));
    check_op("reshape", &[3, 4], -1.0, 1.0, |v, _| v.reshape(&[2, 6])?.tanh());
    check_op("sum", &[3, 4], -1.0, 1.0, |v, _| v.tanh()?.sum());
    check_op("mean", &[3, 4], -1.0, 1.0, |v, _| v.mul(v)?.mean());
}

#[test]
fn sigmoid_of_zero_is_half() {
    let tape = Tape::new();
    let y = tape.constant(Array::scalar(0.0).unwrap()).sigmoid().unwrap();
    assert_eq!(y.item(), 0.5);
}

#[test]
fn masked_softmax_forces_zero_weight() {
    let tape = Tape::new();
    let x = tape.constant(Array::vector(&[1.0, 1.0, 5.0]).unwrap());
    let mask = Mask::from_additive(vec![3], &[0.0, 0.0, f64::NEG_INFINITY]).unwrap();
    let y = x.masked_softmax(&mask).unwrap();
    assert_eq!(y.value().data(), &[0.5, 0.5, 0.0]);
}

#[test]
fn fully_masked_row_is_all_zeros() {
    let tape = Tape::new();
    let x = tape.param(Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mask = Mask::new(vec![2, 2], vec![false, false, true, true]).unwrap();
    let y = x.masked_softmax(&mask).unwrap();
    assert_eq!(&y.value().data()[..2], &[0.0, 0.0]);
    let g = y.sum().unwrap().backward().get(x);
    assert!(g.data().iter().all(|d| d.is_finite()));
}

#[test]
fn masked_softmax_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..TRIALS {
        let n = rng.gen_range(2..9);
        let x = random_array(&mut rng, &[n, n], -30.0, 30.0);
        let tape = Tape::new();
        let y = tape.constant(x).masked_softmax(&Mask::autoregressive(n)).unwrap();
        let y = y.value();
        for t in 0..n {
            let row = &y.data()[t * n..(t + 1) * n];
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert!(row[t + 1..].iter().all(|&p| p == 0.0));
        }
    }
}

#[test]
fn layer_norm_standardizes_each_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..TRIALS {
        let x = random_array(&mut rng, &[4, 16], -5.0, 5.0);
        let tape = Tape::new();
        let y = tape.constant(x).layer_norm(1e-9).unwrap().value();
        for row in y.data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() <= 1e-6);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn detach_blocks_gradient_and_preserves_value() {
    let tape = Tape::new();
    let x = tape.param(Array::vector(&[0.5, -1.5]).unwrap());
    let d = x.tanh().unwrap().detach();
    assert_eq!(d.value().data(), x.tanh().unwrap().value().data());
    let through_detach = d.mul(x).unwrap().sum().unwrap().backward().get(x);
    // only the direct path survives: d/dx (c · x) = c
    assert_eq!(through_detach.data(), d.value().data());

    // upstream gradient through another path is unchanged by the detached branch
    let tape = Tape::new();
    let x = tape.param(Array::vector(&[0.5, -1.5]).unwrap());
    let plain = x.exp().unwrap().sum().unwrap().backward().get(x);
    let tape2 = Tape::new();
    let x2 = tape2.param(Array::vector(&[0.5, -1.5]).unwrap());
    let side = x2.tanh().unwrap().detach();
    let with_side = x2.exp().unwrap().add(side.scale(0.0).unwrap()).unwrap().sum().unwrap().backward().get(x2);
    assert_eq!(plain, with_side);
}

#[test]
fn shape_errors_name_the_operation() {
    let tape = Tape::new();
    let a = tape.constant(Array::zeros(&[2, 3]));
    let b = tape.constant(Array::zeros(&[2, 3]));
    match a.matmul(b) {
        Err(NumericsError::ShapeMismatch { op, shapes }) => {
            assert_eq!(op, "matmul");
            assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    let c = tape.constant(Array::zeros(&[2]));
    assert!(matches!(a.add(c), Err(NumericsError::ShapeMismatch { op: "add", .. })));
}
