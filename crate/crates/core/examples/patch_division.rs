//! Divides one synthetic torus into multi-scale patches and prints where the
//! patch centers land and how much of the surface each scale covers.
//!
//! cargo run --release --example patch_division

use mgt::data::Shape;
use mgt::geometry::{divide, normalize, FpsStart, PointCloud, ScaleConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mgt::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points = Shape::Torus.sample(1024, &mut rng);
    let cloud = normalize(&PointCloud::from_xyz(&points, 3)?);
    let scales = ScaleConfig::standard();
    let set = divide(&cloud, &scales, FpsStart::Pinned(0))?;

    println!("{} points, scales {scales}, {} tokens with the class token", cloud.len(), 1 + scales.total_patches());
    for sp in &set.scales {
        let mut covered = vec![false; cloud.len()];
        let mut radius: f64 = 0.0;
        for (c, group) in sp.center_indices.iter().zip(&sp.neighbor_indices) {
            for &i in group {
                covered[i] = true;
                radius = radius.max(cloud.squared_distance(*c, i).sqrt());
            }
        }
        let share = covered.iter().filter(|&&c| c).count() as f64 / cloud.len() as f64;
        println!(
            "K={:>3} S={:>2}: {:>5.1}% of points in some patch, widest patch radius {:.3}",
            sp.scale.k,
            sp.scale.s,
            100.0 * share,
            radius
        );
    }
    let first = &set.scales[0];
    println!("first centers of the smallest scale:");
    for &c in first.center_indices.iter().take(4) {
        let [x, y, z] = cloud.xyz(c);
        println!("  #{c:<4} ({x:+.3}, {y:+.3}, {z:+.3})");
    }
    Ok(())
}
