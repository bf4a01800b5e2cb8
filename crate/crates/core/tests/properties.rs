//! Cross-module properties checked against exact enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mgrf::eval::{exact_count_covariance, exact_expectations, exact_log_likelihood};
use mgrf::features::{collect_histogram, FeatureKind, Offset, OffsetList};
use mgrf::learning::{gradient, jsd, second_order_step};
use mgrf::model::Potential;
use mgrf::sampling::{acsa_run, csa_run, Sampler, SamplerConfig};
use mgrf::{GreyImage, NestedModel};

fn random_theta(model: &mut NestedModel, scale: f64, rng: &mut ChaCha8Rng) {
    let t: Vec<f64> = (0..model.theta_vector().len()).map(|_| rng.random_range(-scale..scale)).collect();
    model.set_theta_vector(&t).unwrap();
}

fn families() -> Vec<(FeatureKind, OffsetList)> {
    vec![
        (FeatureKind::Marginal, OffsetList::single()),
        (FeatureKind::Gld, OffsetList::pair(1, 0)),
        (FeatureKind::Gld, OffsetList::pair(0, 1)),
        (FeatureKind::Glc, OffsetList::pair(1, 1)),
        (FeatureKind::Bp, OffsetList::anchored([Offset::new(1, 0), Offset::new(0, 1)])),
        (FeatureKind::Be { threshold: 0 }, OffsetList::pair(2, 0)),
    ]
}

fn model_from(levels: usize, picks: &[usize]) -> NestedModel {
    let fams = families();
    let mut m = NestedModel::new(levels).unwrap();
    for &i in picks {
        let (k, o) = fams[i].clone();
        m = m.add_potential(Potential::new(k, o, levels).unwrap()).unwrap();
    }
    m
}

fn random_small_model(levels: usize, rng: &mut ChaCha8Rng) -> NestedModel {
    let n = families().len();
    let mut picks: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
    if picks.is_empty() {
        picks.push(rng.random_range(0..n));
    }
    let mut m = model_from(levels, &picks);
    random_theta(&mut m, 1.5, rng);
    m
}

#[test]
fn raster_sweep_kernel_leaves_gibbs_distribution_invariant() {
    // 1x2 lattice: a sweep resamples (0,0) then (1,0).
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let levels = 3;
    let pair = OffsetList::pair(1, 0);
    let models = [
        vec![(FeatureKind::Marginal, OffsetList::single()), (FeatureKind::Gld, pair.clone())],
        vec![(FeatureKind::Gld, pair.clone()), (FeatureKind::Glc, pair.clone())],
        vec![(FeatureKind::Marginal, OffsetList::single()), (FeatureKind::Be { threshold: 0 }, pair.clone())],
    ];
    for pots in models {
        let mut model = NestedModel::new(levels).unwrap();
        for (k, o) in pots {
            model = model.add_potential(Potential::new(k, o, levels).unwrap()).unwrap();
        }
        random_theta(&mut model, 2.0, &mut rng);
        let states: Vec<(u8, u8)> = (0..levels as u8).flat_map(|a| (0..levels as u8).map(move |b| (a, b))).collect();
        let img = |(a, b): (u8, u8)| GreyImage::from_pixels(2, 1, levels, vec![a, b]).unwrap();
        let weights: Vec<f64> = states.iter().map(|&s| (-model.gibbs_energy(&img(s)).unwrap()).exp()).collect();
        let z: f64 = weights.iter().sum();
        let pi: Vec<f64> = weights.iter().map(|w| w / z).collect();

        let mut sampler = Sampler::new(model.clone(), img((0, 0))).unwrap();
        let mut next = vec![0.0; states.len()];
        for (i, &(a, b)) in states.iter().enumerate() {
            sampler.set_pixel(0, 0, a);
            sampler.set_pixel(1, 0, b);
            let first = sampler.conditional(0, 0);
            for (a2, pa) in first.iter().enumerate() {
                sampler.set_pixel(0, 0, a2 as u8);
                let second = sampler.conditional(1, 0);
                for (b2, pb) in second.iter().enumerate() {
                    next[a2 * levels + b2] += pi[i] * pa * pb;
                }
            }
        }
        for (p, q) in pi.iter().zip(&next) {
            assert!((p - q).abs() < 1e-12, "{pi:?} vs {next:?}");
        }
    }
}

#[test]
fn exact_hessian_is_negative_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let model = random_small_model(2, &mut rng);
        let cov = exact_count_covariance(&model, 3, 3).unwrap();
        let n = model.theta_vector().len();
        for i in 0..n {
            for j in 0..n {
                assert!((cov[i * n + j] - cov[j * n + i]).abs() < 1e-9);
            }
        }
        // The Hessian is -cov, so v' H v <= 0 for every direction.
        for _ in 0..200 {
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut q = 0.0;
            for i in 0..n {
                for j in 0..n {
                    q += v[i] * cov[i * n + j] * v[j];
                }
            }
            assert!(-q <= 1e-9, "v'Hv = {}", -q);
        }
    }
}

/// Exact log-likelihood after one step on the newest potential, starting
/// from theta = 0 with the rest of the model held fixed (as in nesting).
fn new_potential_step(model: &mut NestedModel, obs: &GreyImage) -> (f64, Vec<f64>, f64) {
    let (w, h) = (obs.width(), obs.height());
    let last = model.len() - 1;
    model.potentials_mut()[last].theta.iter_mut().for_each(|t| *t = 0.0);
    let exact = exact_expectations(model, w, h).unwrap();
    let obs_h = model.histograms(obs).unwrap();
    let g = gradient(&obs_h[last..], &exact.expected[last..]).unwrap();
    let cov = exact_count_covariance(model, w, h).unwrap();
    let n = model.theta_vector().len();
    let first = n - g.len();
    let cliques = model.potentials()[last].offsets.clique_count(w, h) as f64;
    let var: Vec<f64> = (first..n).map(|k| cov[k * n + k] / cliques).collect();
    let before = exact_log_likelihood(model, obs).unwrap();
    let theta = second_order_step(&model.potentials()[last].theta, &g, &var).unwrap();
    (before, theta, g.iter().map(|v| v.abs()).sum())
}

#[test]
fn second_order_step_increases_exact_log_likelihood_on_a_3x3_model() {
    // Base model at theta = 0, checkerboard observation, new GLC(1,1).
    let mut model = NestedModel::base(2, true)
        .unwrap()
        .add_potential(Potential::new(FeatureKind::Glc, OffsetList::pair(1, 1), 2).unwrap())
        .unwrap();
    let obs = GreyImage::from_pixels(3, 3, 2, (0..9).map(|i| ((i % 3 + i / 3) % 2) as u8).collect()).unwrap();
    let (before, theta, _) = new_potential_step(&mut model, &obs);
    let last = model.len() - 1;
    model.potentials_mut()[last].theta = theta;
    let after = exact_log_likelihood(&model, &obs).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn second_order_step_moves_along_an_ascent_direction() {
    // The diagonal curvature can overshoot the line maximum, but a short
    // move along the step always gains likelihood.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..60 {
        let mut model = random_small_model(2, &mut rng);
        let obs = GreyImage::noise(3, 3, 2, &mut rng).unwrap();
        let (before, theta, gsum) = new_potential_step(&mut model, &obs);
        if gsum < 1e-9 {
            continue;
        }
        let last = model.len() - 1;
        model.potentials_mut()[last].theta = theta.iter().map(|t| t * 1e-3).collect();
        let after = exact_log_likelihood(&model, &obs).unwrap();
        assert!(after > before, "{before} -> {after}");
    }
}

/// Rows of dark blobs on a hexagonal lattice, quantized to `levels`.
fn regular_texture(size: usize, period: f64, levels: usize, rng: &mut ChaCha8Rng) -> GreyImage {
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let row = (y as f64 / period).floor() as i64;
            let shift = if row % 2 == 0 { 0.0 } else { 0.5 * period };
            let fx = (x as f64 + shift).rem_euclid(period) - 0.5 * period;
            let fy = (y as f64).rem_euclid(period) - 0.5 * period;
            let r = (fx * fx + fy * fy).sqrt();
            let v = 0.5 + 0.35 * ((r - 0.3 * period) / 1.5).clamp(-1.0, 1.0) + rng.random_range(-0.1..0.1);
            px.push(((v * levels as f64).floor() as i64).clamp(0, levels as i64 - 1) as u8);
        }
    }
    GreyImage::from_pixels(size, size, levels, px).unwrap()
}

#[test]
fn acsa_beats_robbins_monro_on_a_regular_texture() {
    let levels = 8;
    let mut wins = 0;
    for rep in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + rep);
        let training = regular_texture(128, 12.0, levels, &mut rng);
        let mut model = NestedModel::base(levels, true).unwrap();
        for (dx, dy) in [(12, 0), (6, 12), (-6, 12), (3, 0)] {
            model = model
                .add_potential(Potential::new(FeatureKind::Gld, OffsetList::pair(dx, dy), levels).unwrap())
                .unwrap();
        }
        let targets: Vec<Vec<f64>> = model
            .potentials()
            .iter()
            .map(|p| collect_histogram(&p.kind, &p.offsets, &training).unwrap().smoothed(0.1))
            .collect();
        let cfg = SamplerConfig::noise(100, 100, 60, 500 + rep);
        let mean_jsd = |img: &GreyImage| -> f64 {
            let hs = model.histograms(img).unwrap();
            hs.iter().zip(&targets).map(|(h, t)| jsd(h, t).unwrap()).sum::<f64>() / hs.len() as f64
        };
        let rm = mean_jsd(&csa_run(&model, &targets, &cfg).unwrap().image);
        let acsa = mean_jsd(&acsa_run(&model, &targets, &cfg).unwrap().image);
        if acsa < rm {
            wins += 1;
        }
    }
    assert!(wins >= 7, "ACSA better in {wins}/10 runs");
}
