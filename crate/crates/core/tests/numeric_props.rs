use misapp::numeric::{finite_diff_check, softmax, Tape, Tensor, Var};
use misapp::Result;
use proptest::prelude::*;
use proptest::test_runner::RngSeed;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

/// Values with magnitude in `[0.2, 1.5]` and random sign.
fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = random(shape, seed);
    Tensor::new(shape.to_vec(), t.data().iter().map(|x| x.abs() + 0.3).collect()).unwrap()
}

/// Reduces `out` to a scalar through fixed weights so no output direction
/// is favored.
fn project(tape: &mut Tape, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random(&shape, 0xabc));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn check<F>(params: &[Tensor], op: F) -> std::result::Result<(), TestCaseError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let errors = finite_diff_check(
        |tape, vars| {
            let out = op(tape, vars)?;
            project(tape, out)
        },
        params,
        H,
    )
    .map_err(|e| TestCaseError::fail(e.to_string()))?;
    for (i, e) in errors.iter().enumerate() {
        prop_assert!(*e < TOL, "param {i}: relative error {e}");
    }
    Ok(())
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=4, 1..=3)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn elementwise_binary(shape in shape_strategy(), seed in any::<u64>()) {
        let p = [random(&shape, seed), random(&shape, seed ^ 1)];
        check(&p, |t, v| t.add(v[0], v[1]))?;
        check(&p, |t, v| t.sub(v[0], v[1]))?;
        check(&p, |t, v| t.mul(v[0], v[1]))?;
    }

    #[test]
    fn elementwise_unary(shape in shape_strategy(), seed in any::<u64>()) {
        let p = [random(&shape, seed)];
        check(&p, |t, v| Ok(t.scale(v[0], -1.7)))?;
        check(&p, |t, v| Ok(t.sigmoid(v[0])))?;
        check(&p, |t, v| Ok(t.gelu(v[0])))?;
        check(&p, |t, v| Ok(t.abs(v[0])))?;
        check(&[positive(&shape, seed)], |t, v| t.log(v[0]))?;
    }

    #[test]
    fn scalar_scaling(shape in shape_strategy(), seed in any::<u64>()) {
        let p = [random(&[1], seed), random(&shape, seed ^ 2)];
        check(&p, |t, v| t.scale_by(v[0], v[1]))?;
    }

    #[test]
    fn matmul_forms(m in 1usize..=4, k in 1usize..=4, n in 1usize..=4, seed in any::<u64>()) {
        check(&[random(&[m, k], seed), random(&[k, n], seed ^ 3)], |t, v| t.matmul(v[0], v[1]))?;
        check(&[random(&[m, k], seed), random(&[k], seed ^ 4)], |t, v| t.matmul(v[0], v[1]))?;
        check(&[random(&[k], seed), random(&[k, n], seed ^ 5)], |t, v| t.matmul(v[0], v[1]))?;
        check(&[random(&[k], seed), random(&[k], seed ^ 6)], |t, v| t.dot(v[0], v[1]))?;
        check(&[random(&[m, k], seed)], |t, v| t.transpose(v[0]))?;
    }

    #[test]
    fn axis_operations(shape in shape_strategy(), axis_pick in 0usize..3, seed in any::<u64>()) {
        let axis = axis_pick % shape.len();
        let p = [random(&shape, seed)];
        check(&p, |t, v| t.softmax(v[0], axis))?;
        check(&p, |t, v| t.log_softmax(v[0], axis))?;
        check(&p, |t, v| t.mean(v[0], axis))?;
        check(&p, |t, v| Ok(t.sum(v[0])))?;
        let len = shape[axis].div_ceil(2);
        let start = shape[axis] - len;
        check(&p, |t, v| t.slice(v[0], axis, start, len))?;
        let q = [random(&shape, seed ^ 7), random(&shape, seed ^ 8)];
        check(&q, |t, v| t.concat(&[v[0], v[1]], axis))?;
        check(&q, |t, v| t.stack(&[v[0], v[1]]))?;
        let flat: usize = shape.iter().product();
        check(&p, |t, v| t.reshape(v[0], &[flat]))?;
        check(&p, |t, v| t.pick(v[0], flat - 1))?;
    }

    #[test]
    fn layer_norm_gradient(shape in shape_strategy(), seed in any::<u64>()) {
        // two-entry rows normalize to +-1 and carry gradients below finite-difference resolution
        prop_assume!(*shape.last().unwrap() > 2);
        check(&[random(&shape, seed)], |t, v| t.layer_norm(v[0], 1e-5))?;
    }

    #[test]
    fn gather_and_dropout(rows in 1usize..=5, cols in 1usize..=4, seed in any::<u64>()) {
        let idx: Vec<usize> = (0..rows + 2).map(|i| (i * 7 + seed as usize) % rows).collect();
        check(&[random(&[rows, cols], seed)], |t, v| t.gather(v[0], &idx))?;
        check(&[random(&[rows, cols], seed)], |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            t.dropout(v[0], 0.3, &mut rng)
        })?;
    }

    #[test]
    fn softmax_is_a_distribution(values in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let p = softmax(&values);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(values.clone()));
        let y = tape.softmax(x, 0).unwrap();
        let q = tape.value(y).data();
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn layer_norm_moments(rows in 1usize..4, cols in 2usize..16, scale in 1.0f64..30.0, seed in any::<u64>()) {
        let x = random(&[rows, cols], seed);
        let x = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * scale).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.layer_norm(xv, 1e-5).unwrap();
        let out = tape.value(y);
        let moments = |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            (mean, row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64)
        };
        for r in 0..rows {
            let (_, raw_var) = moments(x.row(r));
            let (mean, var) = moments(out.row(r));
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - raw_var / (raw_var + 1e-5)).abs() < 1e-12);
            if raw_var >= 10.0 {
                prop_assert!((var - 1.0).abs() < 1e-6, "variance {var}");
            }
        }
    }

    #[test]
    fn repeated_use_accumulates(shape in shape_strategy(), k in 1usize..5, seed in any::<u64>()) {
        let mut tape = Tape::new();
        let x = tape.leaf(random(&shape, seed));
        let mut acc = tape.sigmoid(x);
        for _ in 1..k {
            let s = tape.sigmoid(x);
            acc = tape.add(acc, s).unwrap();
        }
        let root = tape.sum(acc);
        let many = tape.backward(root).unwrap().wrt(x);

        let mut single = Tape::new();
        let y = single.leaf(random(&shape, seed));
        let s = single.sigmoid(y);
        let root = single.sum(s);
        let once = single.backward(root).unwrap().wrt(y);
        for (a, b) in many.data().iter().zip(once.data()) {
            prop_assert!((a - k as f64 * b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn zero_rate_dropout_matches_inference(shape in shape_strategy(), seed in any::<u64>()) {
        let mut tape = Tape::new();
        let x = tape.constant(random(&shape, seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = tape.dropout(x, 0.0, &mut rng).unwrap();
        prop_assert_eq!(tape.value(y), tape.value(x));
    }
}
