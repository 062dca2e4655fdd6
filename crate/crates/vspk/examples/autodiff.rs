//! The gradient tape on its own: a two-layer classifier assembled from
//! tape operations, trained by plain gradient descent, then cross-checked
//! against central finite differences.
//!
//! Run with `cargo run --release --example autodiff`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vspk::tensor::{grad_check, Tape, Tensor};

/// Eight 4-feature rows in three classes, linearly separated by design so
/// a tiny model can fit them.
fn toy_batch(rng: &mut ChaCha8Rng) -> (Tensor, Vec<usize>) {
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for row in 0..8 {
        let class = row % 3;
        for feature in 0..4 {
            let center = if feature == class { 2.0 } else { 0.0 };
            data.push(center + noise.sample(rng));
        }
        labels.push(class);
    }
    (Tensor::new(vec![8, 4], data).unwrap(), labels)
}

fn he_init(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn main() -> vspk::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (x, labels) = toy_batch(&mut rng);

    // Parameters of x[8,4] -> relu(x w1 + b1)[8,6] -> (h w2 + b2)[8,3].
    let mut params = vec![
        he_init(vec![4, 6], 4, &mut rng),
        Tensor::zeros(vec![6]),
        he_init(vec![6, 3], 6, &mut rng),
        Tensor::zeros(vec![3]),
    ];

    let forward = |tape: &mut Tape, ids: &[vspk::tensor::TensorId], x: &Tensor| {
        let input = tape.constant(x);
        let pre = tape.matmul(input, ids[0])?;
        let pre = tape.add_bias(pre, ids[1])?;
        let hidden = tape.relu(pre);
        let logits = tape.matmul(hidden, ids[2])?;
        tape.add_bias(logits, ids[3])
    };

    for step in 0..60 {
        let mut tape = Tape::new();
        let ids: Vec<_> = params.iter().map(|p| tape.leaf(p)).collect();
        let logits = forward(&mut tape, &ids, &x)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let loss_value = tape.value(loss)?;
        tape.backward(loss)?;
        for (param, &id) in params.iter_mut().zip(&ids) {
            let grad = tape.grad(id);
            for (w, g) in param.data_mut().iter_mut().zip(grad.data()) {
                *w -= 0.5 * g;
            }
        }
        if step % 20 == 0 || step == 59 {
            println!("step {step:2}  cross-entropy {loss_value:.6}");
        }
    }

    // The same graph, re-built from the trained weights, checked against
    // finite differences coordinate by coordinate.
    let worst = grad_check(
        |tape, ids| {
            let logits = forward(tape, ids, &x)?;
            tape.cross_entropy(logits, &labels)
        },
        &params,
        1e-5,
    )?;
    println!("max relative gradient error across all parameters: {worst:.3e}");
    Ok(())
}
