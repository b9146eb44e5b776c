#![allow(dead_code)]

use gaitmff::tensor::gradcheck::{GradCheckConfig, GradCheckReport, check_gradients};
use gaitmff::tensor::{Tape, Tensor, TensorError, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Contracts `y` with a fixed random tensor so every output coordinate
/// carries a distinct weight into the scalar loss.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(tape.shape(y), &mut rng));
    let p = tape.hadamard(y, w)?;
    Ok(tape.sum(p))
}

pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheckReport, TensorError>,
}

fn check(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
) -> Result<GradCheckReport, TensorError> {
    check_gradients(inputs, &GradCheckConfig::default(), f)
}

fn add(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [rng.random_range(1..4), rng.random_range(1..5)];
    let inputs = [random(&shape, &mut rng), random(&shape, &mut rng)];
    check(&inputs, |t, v| {
        let y = t.add(v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
}

fn affine(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, i, o) = (
        rng.random_range(1..4),
        rng.random_range(1..6),
        rng.random_range(1..5),
    );
    let inputs = [
        random(&[n, i], &mut rng),
        random(&[i, o], &mut rng),
        random(&[o], &mut rng),
    ];
    check(&inputs, |t, v| {
        let y = t.affine(v[0], v[1], v[2])?;
        weighted_sum(t, y, seed)
    })
}

fn conv2d(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, ci, co) = (
        rng.random_range(1..3),
        rng.random_range(1..4),
        rng.random_range(1..4),
    );
    let k = [1, 3][rng.random_range(0..2)];
    let stride = rng.random_range(1..3);
    let padding = if k == 3 { rng.random_range(0..2) } else { 0 };
    let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
    let inputs = [
        random(&[n, ci, h, w], &mut rng),
        random(&[co, ci, k, k], &mut rng),
    ];
    check(&inputs, |t, v| {
        let y = t.conv2d(v[0], v[1], stride, padding)?;
        weighted_sum(t, y, seed)
    })
}

fn relu(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [random(&[3, 5], &mut rng)];
    check(&inputs, |t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, seed)
    })
}

fn sigmoid(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [random(&[3, 5], &mut rng).map(|x| 4.0 * x)];
    check(&inputs, |t, v| {
        let y = t.sigmoid(v[0]);
        weighted_sum(t, y, seed)
    })
}

fn hadamard(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [random(&[2, 3, 4], &mut rng), random(&[2, 3, 4], &mut rng)];
    check(&inputs, |t, v| {
        let y = t.hadamard(v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
}

fn hadamard_broadcast(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [random(&[2, 3, 2, 4], &mut rng), random(&[2, 3], &mut rng)];
    check(&inputs, |t, v| {
        let y = t.hadamard(v[0], v[1])?;
        weighted_sum(t, y, seed)
    })
}

fn concat(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = rng.random_range(0..3);
    let mut shape = [2, 3, 2];
    let a = random(&shape, &mut rng);
    shape[axis] = 1;
    let b = random(&shape, &mut rng);
    check(&[a, b], |t, v| {
        let y = t.concat(v, axis)?;
        weighted_sum(t, y, seed)
    })
}

fn global_avg_pool(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [random(&[2, 3, 3, 4], &mut rng)];
    check(&inputs, |t, v| {
        let y = t.global_avg_pool(v[0])?;
        weighted_sum(t, y, seed)
    })
}

fn dropout(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [random(&[4, 6], &mut rng)];
    check(&inputs, |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let y = t.dropout(v[0], 0.4, true, &mut mask_rng)?;
        weighted_sum(t, y, seed)
    })
}

fn softmax_cross_entropy(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (rng.random_range(1..5), rng.random_range(2..6));
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let inputs = [random(&[n, k], &mut rng).map(|x| 3.0 * x)];
    check(&inputs, |t, v| t.softmax_cross_entropy(v[0], &labels))
}

fn sum(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [random(&[3, 4], &mut rng)];
    check(&inputs, |t, v| {
        let sq = t.hadamard(v[0], v[0])?;
        Ok(t.sum(sq))
    })
}

fn mean(seed: u64) -> Result<GradCheckReport, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = [random(&[3, 4], &mut rng)];
    check(&inputs, |t, v| {
        let sq = t.hadamard(v[0], v[0])?;
        Ok(t.mean(sq))
    })
}

pub const OP_CASES: &[OpCase] = &[
    OpCase {
        name: "add",
        run: add,
    },
    OpCase {
        name: "affine",
        run: affine,
    },
    OpCase {
        name: "conv2d",
        run: conv2d,
    },
    OpCase {
        name: "relu",
        run: relu,
    },
    OpCase {
        name: "sigmoid",
        run: sigmoid,
    },
    OpCase {
        name: "hadamard",
        run: hadamard,
    },
    OpCase {
        name: "hadamard_broadcast",
        run: hadamard_broadcast,
    },
    OpCase {
        name: "concat",
        run: concat,
    },
    OpCase {
        name: "global_avg_pool",
        run: global_avg_pool,
    },
    OpCase {
        name: "dropout",
        run: dropout,
    },
    OpCase {
        name: "softmax_cross_entropy",
        run: softmax_cross_entropy,
    },
    OpCase {
        name: "sum",
        run: sum,
    },
    OpCase {
        name: "mean",
        run: mean,
    },
];
