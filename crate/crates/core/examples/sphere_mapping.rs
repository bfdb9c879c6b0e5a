//! Shows what sphere mapping does to one patch of features: points are
//! pulled onto a sphere of radius alpha around the patch mean, and each
//! point carries its mean cosine to the rest of the patch.
//!
//! cargo run --release --example sphere_mapping

use mgt::autodiff::{Tape, Tensor};
use mgt::slfe::{mrc, sphere_map};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> mgt::Result<()> {
    let (k, d) = (6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut values: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    // Two nearly parallel points, so their cosine terms stand out.
    for c in 0..d {
        values[d + c] = 1.05 * values[c];
    }

    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, k, d], values)?);
    let alpha = tape.constant(Tensor::full(&[d], 2.0));
    let beta = tape.constant(Tensor::full(&[d], 1.0));
    let zero = tape.constant(Tensor::zeros(&[d]));
    let radial = sphere_map(&mut tape, x, alpha, zero, zero)?;
    let angular = sphere_map(&mut tape, x, zero, beta, zero)?;
    let pooled = mrc(&mut tape, x)?;

    println!("point  |radial part|  mean cosine");
    let r = tape.value(radial).data().to_vec();
    let a = tape.value(angular).data().to_vec();
    for j in 0..k {
        let row = &r[j * d..(j + 1) * d];
        let len = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{j:>5}  {len:>13.6}  {:>+11.4}", a[j * d]);
    }
    let p = tape.value(pooled);
    println!("after max-pool/repeat/concat: {:?}; pooled half of point 0 = {:?}", p.shape(), &p.data()[d..2 * d]);
    Ok(())
}
