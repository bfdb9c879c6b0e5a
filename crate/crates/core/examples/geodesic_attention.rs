//! Compares geodesic attention with the dot-product variant on a handful of
//! tokens. Geodesic weights depend only on token directions, so rescaling a
//! token leaves them unchanged; dot-product weights move.
//!
//! cargo run --release --example geodesic_attention

use mgt::attention::{Attention, AttentionConfig, AttentionKind};
use mgt::autodiff::{Tape, Tensor};
use mgt::nn::{Graph, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn weights(att: &Attention, store: &ParamStore, tokens: &[f64], n: usize) -> mgt::Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store);
    let x = g.tape.constant(Tensor::new(vec![n, tokens.len() / n], tokens.to_vec())?);
    let w = att.weights(&mut g, x)?;
    Ok(g.tape.value(w).data().to_vec())
}

fn show(label: &str, w: &[f64], n: usize) {
    println!("{label}");
    for row in w.chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
        println!("  {}", cells.join("  "));
    }
}

fn main() -> mgt::Result<()> {
    let (n, d) = (4, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let tokens: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut scaled = tokens.clone();
    scaled[..d].iter_mut().for_each(|v| *v *= 10.0);

    let mut store = ParamStore::new();
    let geodesic = AttentionConfig { kind: AttentionKind::Geodesic, factors: 2, temperature: 0.5 };
    let geo = Attention::new(&mut store, "geo", d, geodesic, &mut rng)?;
    let dot = Attention::new(&mut store, "dot", d, AttentionConfig { kind: AttentionKind::Dot, ..geodesic }, &mut rng)?;

    show("geodesic, 2 sphere factors, temperature 0.5", &weights(&geo, &store, &tokens, n)?, n);
    show("geodesic, token 0 scaled by 10", &weights(&geo, &store, &scaled, n)?, n);
    show("dot product", &weights(&dot, &store, &tokens, n)?, n);
    show("dot product, token 0 scaled by 10", &weights(&dot, &store, &scaled, n)?, n);
    Ok(())
}
