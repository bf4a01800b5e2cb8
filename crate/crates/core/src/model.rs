//! The nested MGRF: an ordered list of potentials over clique families.
//!
//! Each potential pairs a feature function with a clique shape and a
//! parameter vector `theta` (one entry per feature bin). The Gibbs
//! distribution is
//!
//! ```text
//! p(g) ∝ exp(-sum_p sum_{cliques c of p} theta_p[f_p(g_c)])
//!      = exp(-sum_p N_p * theta_p . h_p(g))
//! ```
//!
//! with `h_p` the normalized histogram and `N_p` the number of cliques that
//! fit inside the lattice. [`NestedModel::energy`] reports the size-free
//! quantity `sum_p theta_p . h_p(g)`; [`NestedModel::gibbs_energy`] is the
//! exponent itself. Cliques that stick out of the lattice contribute nothing.
//!
//! # Text format
//!
//! ```text
//! mgrf-model 1
//! levels 16
//! # kind	arity	bins	iteration	offsets	theta	target
//! gld	2	31	0	0,0 1,0	0.12 -0.5 ...	0.01 0.02 ...
//! ```
//!
//! Fields are tab-separated; offsets and number lists are space-separated.
//! The target column holds the smoothed training histogram or `none`.
//! Numbers are written in the shortest form that parses back to the same
//! `f64`, so a round trip is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{accumulate_counts, collect_histogram, eval_feature, FeatureKind, OffsetList};
use crate::image::GreyImage;

pub const MODEL_MAGIC: &str = "mgrf-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Potential {
    pub kind: FeatureKind,
    pub offsets: OffsetList,
    pub theta: Vec<f64>,
    /// Target (training) frequencies the sampler steers towards.
    pub target: Option<Vec<f64>>,
    /// Nesting iteration that introduced this potential; 0 for the base model.
    pub iteration: usize,
}

impl Potential {
    /// Potential with all-zero parameters.
    pub fn new(kind: FeatureKind, offsets: OffsetList, levels: usize) -> Result<Self> {
        kind.validate(levels, offsets.arity())?;
        let bins = kind.bins(levels, offsets.arity());
        Ok(Self {
            kind,
            offsets,
            theta: vec![0.0; bins],
            target: None,
            iteration: 0,
        })
    }

    pub fn with_theta(mut self, theta: Vec<f64>) -> Self {
        self.theta = theta;
        self
    }

    pub fn with_target(mut self, target: Vec<f64>) -> Self {
        self.target = Some(target);
        self
    }

    pub fn with_iteration(mut self, iteration: usize) -> Self {
        self.iteration = iteration;
        self
    }

    pub fn bins(&self) -> usize {
        self.theta.len()
    }

    pub fn check(&self, levels: usize) -> Result<()> {
        self.kind.validate(levels, self.offsets.arity())?;
        let bins = self.kind.bins(levels, self.offsets.arity());
        if self.theta.len() != bins {
            return Err(Error::LengthMismatch {
                expected: bins,
                got: self.theta.len(),
            });
        }
        if let Some(t) = &self.target {
            if t.len() != bins {
                return Err(Error::LengthMismatch {
                    expected: bins,
                    got: t.len(),
                });
            }
        }
        if self.theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite theta in {} potential", self.kind)));
        }
        Ok(())
    }

    /// Whether `other` describes the same clique family and feature, with
    /// member order ignored.
    pub fn same_family(&self, kind: &FeatureKind, offsets: &OffsetList) -> bool {
        &self.kind == kind && self.offsets.shape_key() == offsets.shape_key()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NestedModel {
    levels: usize,
    potentials: Vec<Potential>,
}

impl NestedModel {
    pub fn new(levels: usize) -> Result<Self> {
        if !(2..=256).contains(&levels) {
            return Err(Error::InvalidArgument(format!("levels must be in 2..=256, got {levels}")));
        }
        Ok(Self {
            levels,
            potentials: Vec::new(),
        })
    }

    /// Marginal (optional) plus the two nearest-neighbour grey-level differences.
    pub fn base(levels: usize, marginal: bool) -> Result<Self> {
        let mut model = Self::new(levels)?;
        if marginal {
            model = model.add_potential(Potential::new(FeatureKind::Marginal, OffsetList::single(), levels)?)?;
        }
        for (dx, dy) in [(1, 0), (0, 1)] {
            model = model.add_potential(Potential::new(FeatureKind::Gld, OffsetList::pair(dx, dy), levels)?)?;
        }
        Ok(model)
    }

    /// Appends `p`; existing parameters are left untouched.
    pub fn add_potential(mut self, p: Potential) -> Result<Self> {
        p.check(self.levels)?;
        self.potentials.push(p);
        Ok(self)
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn potentials(&self) -> &[Potential] {
        &self.potentials
    }

    pub fn potentials_mut(&mut self) -> &mut [Potential] {
        &mut self.potentials
    }

    pub fn len(&self) -> usize {
        self.potentials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.potentials.is_empty()
    }

    pub fn contains_family(&self, kind: &FeatureKind, offsets: &OffsetList) -> bool {
        self.potentials.iter().any(|p| p.same_family(kind, offsets))
    }

    /// Largest Chebyshev reach of any clique from its anchor.
    pub fn max_extent(&self) -> usize {
        self.potentials
            .iter()
            .map(|p| p.offsets.extent() as usize)
            .max()
            .unwrap_or(0)
    }

    /// All parameters, potential by potential.
    pub fn theta_vector(&self) -> Vec<f64> {
        self.potentials.iter().flat_map(|p| p.theta.iter().copied()).collect()
    }

    pub fn set_theta_vector(&mut self, theta: &[f64]) -> Result<()> {
        let total: usize = self.potentials.iter().map(Potential::bins).sum();
        if theta.len() != total {
            return Err(Error::LengthMismatch {
                expected: total,
                got: theta.len(),
            });
        }
        let mut rest = theta;
        for p in &mut self.potentials {
            let (head, tail) = rest.split_at(p.theta.len());
            p.theta.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn check_image(&self, img: &GreyImage) -> Result<()> {
        if img.levels() != self.levels {
            return Err(Error::InvalidArgument(format!(
                "image has {} levels, model has {}",
                img.levels(),
                self.levels
            )));
        }
        Ok(())
    }

    /// Per-potential normalized histograms of `img`.
    pub fn histograms(&self, img: &GreyImage) -> Result<Vec<Vec<f64>>> {
        self.check_image(img)?;
        self.potentials
            .iter()
            .map(|p| collect_histogram(&p.kind, &p.offsets, img).map(|h| h.freq))
            .collect()
    }

    /// `sum_p theta_p . h_p(img)` over normalized histograms.
    pub fn energy(&self, img: &GreyImage) -> Result<f64> {
        let hists = self.histograms(img)?;
        Ok(self
            .potentials
            .iter()
            .zip(&hists)
            .map(|(p, h)| dot(&p.theta, h))
            .sum())
    }

    /// Gibbs exponent: `sum_p sum_c theta_p[f_p(g_c)]`, so that
    /// `p(g) ∝ exp(-gibbs_energy(g))`. Families with no clique inside the
    /// lattice contribute zero.
    pub fn gibbs_energy(&self, img: &GreyImage) -> Result<f64> {
        self.check_image(img)?;
        let mut total = 0.0;
        for p in &self.potentials {
            let mut counts = vec![0u64; p.bins()];
            accumulate_counts(&p.kind, &p.offsets, img, &mut counts);
            total += counts.iter().zip(&p.theta).map(|(&c, &t)| c as f64 * t).sum::<f64>();
        }
        Ok(total)
    }

    /// Exponent contribution of every clique containing `(x, y)`, for each
    /// candidate level at that site (other pixels as in `img`).
    pub fn local_energies(&self, img: &GreyImage, x: usize, y: usize) -> Result<Vec<f64>> {
        self.check_image(img)?;
        if x >= img.width() || y >= img.height() {
            return Err(Error::InvalidArgument(format!(
                "site ({x}, {y}) outside {}x{} lattice",
                img.width(),
                img.height()
            )));
        }
        let mut energies = vec![0.0; self.levels];
        let mut values = Vec::new();
        for p in &self.potentials {
            let Some(range) = p.offsets.anchors(img.width(), img.height()) else {
                continue;
            };
            // Distinct anchors whose clique covers the site.
            let mut anchors: Vec<(isize, isize)> = p
                .offsets
                .iter()
                .map(|o| (x as isize - o.dx as isize, y as isize - o.dy as isize))
                .filter(|&(ax, ay)| range.contains(ax, ay))
                .collect();
            anchors.sort_unstable();
            anchors.dedup();
            for (ax, ay) in anchors {
                for (q, e) in energies.iter_mut().enumerate() {
                    values.clear();
                    for o in p.offsets.iter() {
                        let (px, py) = ((ax + o.dx as isize) as usize, (ay + o.dy as isize) as usize);
                        values.push(if (px, py) == (x, y) { q as u8 } else { img.get(px, py) });
                    }
                    *e += p.theta[eval_feature(&p.kind, self.levels, &values)];
                }
            }
        }
        Ok(energies)
    }

    /// Conditional distribution of the level at `(x, y)` given the rest.
    pub fn local_conditional(&self, img: &GreyImage, x: usize, y: usize) -> Result<Vec<f64>> {
        let energies = self.local_energies(img, x, y)?;
        Ok(boltzmann(&energies))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MODEL_MAGIC} {MODEL_VERSION}\nlevels {}\n", self.levels);
        out.push_str("# kind\tarity\tbins\titeration\toffsets\ttheta\ttarget\n");
        for p in &self.potentials {
            let _ = write!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t",
                p.kind,
                p.offsets.arity(),
                p.bins(),
                p.iteration,
                p.offsets,
                join_floats(&p.theta)
            );
            match &p.target {
                Some(t) => out.push_str(&join_floats(t)),
                None => out.push_str("none"),
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let fail = |line: usize, reason: String| Error::ModelFormat { line, reason };

        let (n, header) = lines.next().ok_or_else(|| fail(1, "empty model file".into()))?;
        let version = header
            .strip_prefix(MODEL_MAGIC)
            .map(str::trim)
            .ok_or_else(|| fail(n, format!("expected `{MODEL_MAGIC} <version>` header")))?;
        if version != MODEL_VERSION.to_string() {
            return Err(fail(n, format!("unsupported model version `{version}`")));
        }
        let (n, levels_line) = lines.next().ok_or_else(|| fail(2, "missing levels line".into()))?;
        let levels: usize = levels_line
            .strip_prefix("levels ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| fail(n, "expected `levels <Q>`".into()))?;
        let mut model = NestedModel::new(levels).map_err(|e| fail(n, e.to_string()))?;

        for (n, line) in lines {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 7 {
                return Err(fail(n, format!("expected 7 tab-separated fields, found {}", fields.len())));
            }
            let kind: FeatureKind = fields[0].parse().map_err(|e| fail(n, e))?;
            let arity: usize = fields[1].parse().map_err(|_| fail(n, "bad arity".into()))?;
            let bins: usize = fields[2].parse().map_err(|_| fail(n, "bad bin count".into()))?;
            let iteration: usize = fields[3].parse().map_err(|_| fail(n, "bad iteration".into()))?;
            let offsets: OffsetList = fields[4].parse().map_err(|e| fail(n, e))?;
            if offsets.arity() != arity {
                return Err(fail(n, format!("arity {arity} but {} offsets", offsets.arity())));
            }
            let theta = parse_floats(fields[5]).map_err(|e| fail(n, e))?;
            if theta.len() != bins {
                return Err(fail(n, format!("{bins} bins but {} theta values", theta.len())));
            }
            let target = match fields[6] {
                "none" => None,
                t => Some(parse_floats(t).map_err(|e| fail(n, e))?),
            };
            let p = Potential {
                kind,
                offsets,
                theta,
                target,
                iteration,
            };
            model = model.add_potential(p).map_err(|e| fail(n, e.to_string()))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|source| Error::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized `exp(-e)` with the minimum shifted to zero.
pub fn boltzmann(energies: &[f64]) -> Vec<f64> {
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    let mut p: Vec<f64> = energies.iter().map(|&e| (min - e).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

fn join_floats(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 8);
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{v:?}");
    }
    s
}

fn parse_floats(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.split(' ')
        .map(|t| t.parse::<f64>().map_err(|_| format!("bad number `{t}`")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{Offset, OffsetList};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(rng: &mut ChaCha8Rng, levels: usize) -> NestedModel {
        let mut m = NestedModel::base(levels, true).unwrap();
        let extra = [
            (FeatureKind::Gld, OffsetList::pair(2, 1)),
            (FeatureKind::Bp, OffsetList::anchored([Offset::new(1, 0), Offset::new(-1, 1), Offset::new(0, -2)])),
            (FeatureKind::Be { threshold: 1 }, OffsetList::anchored([Offset::new(1, 1), Offset::new(-1, 0)])),
            (FeatureKind::Glc, OffsetList::pair(1, 1)),
        ];
        for (kind, offsets) in extra {
            m = m.add_potential(Potential::new(kind, offsets, levels).unwrap()).unwrap();
        }
        for p in m.potentials_mut() {
            p.theta.iter_mut().for_each(|t| *t = rng.random_range(-1.0..1.0));
        }
        m
    }

    #[test]
    fn zero_theta_gives_zero_energy_and_uniform_conditional() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = NestedModel::base(8, true).unwrap();
        let img = GreyImage::noise(12, 9, 8, &mut rng).unwrap();
        assert_eq!(m.energy(&img).unwrap(), 0.0);
        for p in m.local_conditional(&img, 3, 4).unwrap() {
            assert!((p - 0.125).abs() < 1e-15);
        }
    }

    #[test]
    fn marginal_energy_is_a_dot_product() {
        let m = NestedModel::new(4)
            .unwrap()
            .add_potential(
                Potential::new(FeatureKind::Marginal, OffsetList::single(), 4)
                    .unwrap()
                    .with_theta(vec![0.0, 1.0, 0.0, 0.0]),
            )
            .unwrap();
        let img = GreyImage::from_pixels(2, 2, 4, vec![1, 0, 1, 3]).unwrap();
        assert_eq!(m.energy(&img).unwrap(), 0.5);
        assert_eq!(m.gibbs_energy(&img).unwrap(), 2.0);
    }

    #[test]
    fn single_marginal_conditional() {
        let m = NestedModel::new(2)
            .unwrap()
            .add_potential(
                Potential::new(FeatureKind::Marginal, OffsetList::single(), 2)
                    .unwrap()
                    .with_theta(vec![0.0, 2f64.ln()]),
            )
            .unwrap();
        let img = GreyImage::new(5, 5, 2).unwrap();
        let p = m.local_conditional(&img, 2, 2).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn adding_zero_potential_keeps_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random_model(&mut rng, 6);
        let img = GreyImage::noise(10, 10, 6, &mut rng).unwrap();
        let before = m.energy(&img).unwrap();
        let p = Potential::new(FeatureKind::Gld, OffsetList::pair(3, 0), 6).unwrap();
        let m2 = m.clone().add_potential(p.clone()).unwrap();
        assert_eq!(m2.energy(&img).unwrap(), before);
        assert_eq!(m2.potentials().last(), Some(&p));
        assert_eq!(&m2.potentials()[..m.len()], m.potentials());
    }

    #[test]
    fn conditional_matches_full_energy_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let m = random_model(&mut rng, 5);
            let mut img = GreyImage::noise(7, 6, 5, &mut rng).unwrap();
            let (x, y) = (rng.random_range(0..7), rng.random_range(0..6));
            let local = m.local_conditional(&img, x, y).unwrap();
            let full: Vec<f64> = (0..5)
                .map(|q| {
                    img.set(x, y, q);
                    m.gibbs_energy(&img).unwrap()
                })
                .collect();
            let oracle = boltzmann(&full);
            for (a, b) in local.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!((local.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut m = random_model(&mut rng, 7);
        m.potentials_mut()[1].target = Some(vec![1.0 / 13.0; 13]);
        m.potentials_mut()[2].iteration = 5;
        m.potentials_mut()[0].theta[0] = 1e-300;
        let back = NestedModel::from_text(&m.to_text()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_bad_files() {
        let good = NestedModel::base(4, true).unwrap().to_text();
        assert!(NestedModel::from_text(&good.replace("mgrf-model 1", "mgrf-model 9")).is_err());
        assert!(NestedModel::from_text(&good.replace("gld\t", "zzz\t")).is_err());
        let err = NestedModel::from_text(&good.replace("marginal\t1\t4", "marginal\t1\t5")).unwrap_err();
        assert!(matches!(err, Error::ModelFormat { line: 4, .. }), "{err}");
        assert!(NestedModel::from_text("").is_err());
    }

    #[test]
    fn theta_vector_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut m = random_model(&mut rng, 4);
        let v: Vec<f64> = m.theta_vector().iter().map(|t| t * 2.0).collect();
        m.set_theta_vector(&v).unwrap();
        assert_eq!(m.theta_vector(), v);
        assert!(m.set_theta_vector(&v[1..]).is_err());
    }

    proptest! {
        #[test]
        fn energy_change_of_one_pixel_is_local(seed in any::<u64>(), q in 0u8..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random_model(&mut rng, 5);
            let mut img = GreyImage::noise(8, 8, 5, &mut rng).unwrap();
            let (x, y) = (rng.random_range(0..8), rng.random_range(0..8));
            let local = m.local_energies(&img, x, y).unwrap();
            let old = img.get(x, y);
            let before = m.gibbs_energy(&img).unwrap();
            img.set(x, y, q);
            let after = m.gibbs_energy(&img).unwrap();
            let incremental = local[q as usize] - local[old as usize];
            prop_assert!((after - before - incremental).abs() < 1e-9);
        }
    }
}
