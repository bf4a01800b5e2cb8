//! Test fixtures: synthetic textures and random models.

use rand::seq::SliceRandom;
use rand::Rng;

use mgrf::features::{FeatureKind, Offset, OffsetList};
use mgrf::model::Potential;
use mgrf::{GreyImage, NestedModel};

/// 8-bit texture of dark round blobs on a regular lattice, with mild
/// pixel noise. Stands in for strongly periodic Brodatz plates.
pub fn regular_texture<R: Rng + ?Sized>(width: usize, height: usize, period: (f64, f64), rng: &mut R) -> GreyImage {
    let (px, py) = period;
    let radius = 0.3 * px.min(py);
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            // Alternate rows are shifted by half a period.
            let row = (y as f64 / py).floor();
            let shift = if row as i64 % 2 == 0 { 0.0 } else { 0.5 * px };
            let fx = (x as f64 + shift).rem_euclid(px) - 0.5 * px;
            let fy = (y as f64).rem_euclid(py) - 0.5 * py;
            let r = (fx * fx + fy * fy).sqrt();
            let edge = ((r - radius) / 1.5).clamp(-1.0, 1.0);
            let base = 130.0 + 80.0 * edge;
            let noise: f64 = (0..4).map(|_| rng.random_range(-12.0..12.0)).sum();
            pixels.push((base + noise).round().clamp(0.0, 255.0) as u8);
        }
    }
    GreyImage::from_pixels(width, height, 256, pixels).expect("valid texture")
}

/// Every clique shape that fits in a `w x h` lattice and is worth trying on
/// tiny lattices, paired with the feature kinds that accept it.
fn small_families(levels: usize) -> Vec<(FeatureKind, OffsetList)> {
    let mut out = vec![(FeatureKind::Marginal, OffsetList::single())];
    let pairs = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 0), (0, 2), (2, 1)];
    for &(dx, dy) in &pairs {
        out.push((FeatureKind::Gld, OffsetList::pair(dx, dy)));
        out.push((FeatureKind::Glc, OffsetList::pair(dx, dy)));
        out.push((FeatureKind::Bp, OffsetList::pair(dx, dy)));
        out.push((FeatureKind::Be { threshold: (levels / 4) as u8 }, OffsetList::pair(dx, dy)));
    }
    let triples = [[(1, 0), (0, 1)], [(-1, 0), (1, 0)], [(0, -1), (0, 1)], [(1, 1), (-1, 1)]];
    for t in &triples {
        let offsets = OffsetList::anchored(t.iter().map(|&(dx, dy)| Offset::new(dx, dy)));
        out.push((FeatureKind::Bp, offsets.clone()));
        out.push((FeatureKind::Be { threshold: 0 }, offsets.clone()));
        out.push((FeatureKind::Glc, offsets));
    }
    out
}

/// Model of 1 to `max_potentials` random families with `theta` drawn
/// uniformly from `[-scale, scale]`.
pub fn random_model<R: Rng + ?Sized>(
    levels: usize,
    max_potentials: usize,
    scale: f64,
    width: usize,
    height: usize,
    rng: &mut R,
) -> NestedModel {
    let mut families: Vec<_> = small_families(levels)
        .into_iter()
        .filter(|(_, o)| o.clique_count(width, height) > 0)
        .collect();
    families.shuffle(rng);
    let n = rng.random_range(1..=max_potentials.min(families.len()));
    let mut model = NestedModel::new(levels).expect("levels");
    for (kind, offsets) in families.into_iter().take(n) {
        let p = Potential::new(kind, offsets, levels).expect("family fits");
        let theta = (0..p.bins()).map(|_| rng.random_range(-scale..=scale)).collect();
        model = model.add_potential(p.with_theta(theta)).expect("consistent model");
    }
    model
}

/// Pairwise GLD model whose extra offsets are the "true" long-range
/// interactions; `theta[d] = strength * |d| / (Q - 1)` rewards equal pairs.
pub fn gld_ground_truth(levels: usize, extra: &[(i32, i32)], strength: f64) -> NestedModel {
    let mut model = NestedModel::base(levels, true).expect("levels");
    let q = levels as f64 - 1.0;
    for &(dx, dy) in extra {
        let p = Potential::new(FeatureKind::Gld, OffsetList::pair(dx, dy), levels).expect("pair");
        let theta = (0..p.bins()).map(|b| strength * (b as f64 - q).abs() / q).collect();
        model = model.add_potential(p.with_theta(theta)).expect("consistent model");
    }
    model
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn regular_texture_repeats() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(1);
        let t = regular_texture(64, 64, (12.0, 12.0), &mut rng);
        // Sites one full period apart (two rows down keeps the shift) agree
        // far more than unrelated sites.
        let mut same = 0.0;
        let mut other = 0.0;
        for y in 0..40 {
            for x in 0..50 {
                same += (t.get(x, y) as f64 - t.get(x + 12, y + 24) as f64).abs();
                other += (t.get(x, y) as f64 - t.get(x + 6, y) as f64).abs();
            }
        }
        assert!(same < 0.5 * other, "{same} vs {other}");
    }

    #[test]
    fn random_models_fit_the_lattice() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(2);
        for _ in 0..50 {
            let m = random_model(2, 4, 1.0, 3, 3, &mut rng);
            assert!(!m.is_empty() && m.len() <= 4);
            assert!(m.potentials().iter().all(|p| p.offsets.clique_count(3, 3) > 0));
        }
    }
}
