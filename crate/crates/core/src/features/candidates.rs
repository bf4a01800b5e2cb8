//! Candidate clique shapes for the selector families.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::features::{HistogramStats, Offset, OffsetList};
use crate::learning::jsd;

/// Jag-star radii run over `1..=JAGSTAR_MAX_RADIUS`.
pub const JAGSTAR_MAX_RADIUS: u32 = 20;

/// Rotations tried per angular step `2*pi/(k-1)` between neighbouring rays.
/// Rotating by a full step only swaps the two radii, so phases in
/// `[0, 2*pi/(k-1))` together with all ordered radius pairs cover every
/// jag-star; 8 steps give 2704 distinct shapes for k = 9 and 3110 for k = 13.
pub const JAGSTAR_PHASE_STEPS: u32 = 8;

/// Every canonical (upper half plane) offset `r` with `0 < |r| <= max_radius`
/// as a pair clique `{(0,0), r}`, in lexicographic order.
pub fn gld_candidates(max_radius: f64) -> Vec<OffsetList> {
    canonical_offsets(max_radius)
        .into_iter()
        .map(|r| OffsetList::anchored([r]))
        .collect()
}

fn canonical_offsets(max_radius: f64) -> Vec<Offset> {
    let r = max_radius.floor() as i32;
    let limit = max_radius * max_radius;
    let mut out = Vec::new();
    for dx in -r..=r {
        for dy in 0..=r {
            let o = Offset::new(dx, dy);
            if o.is_canonical() && (o.norm_sq() as f64) <= limit {
                out.push(o);
            }
        }
    }
    out.sort();
    out
}

/// Symmetric third-order cliques `{(0,0), r, -r}` for every canonical `r`
/// with `0 < |r| <= max_radius`, in lexicographic order of `r`.
pub fn bp3_symmetric_candidates(max_radius: f64) -> Vec<OffsetList> {
    canonical_offsets(max_radius)
        .into_iter()
        .map(|r| OffsetList::anchored([r, r.neg()]))
        .collect()
}

/// Jag-star clique of order `k`: `k - 1` pixels alternating between circles
/// of radius `d0` (even rays) and `d1` (odd rays) at angles
/// `2*pi*i/(k-1) + phi`, coordinates rounded to the nearest pixel.
/// Coincident pixels after rounding are kept so the arity stays `k`.
pub fn jag_star_offsets(k: usize, d0: f64, d1: f64, phi: f64) -> OffsetList {
    assert!(k >= 3, "jag-star needs at least two surrounding pixels");
    let rays = (k - 1) as f64;
    OffsetList::anchored((0..k - 1).map(|i| {
        let radius = if i % 2 == 1 { d1 } else { d0 };
        let angle = 2.0 * PI * i as f64 / rays + phi;
        Offset::new(
            (radius * angle.cos()).round() as i32,
            (radius * angle.sin()).round() as i32,
        )
    }))
}

/// Deterministic jag-star candidate set of order `k`: integer radii
/// `d0, d1` in `1..=20` and [`JAGSTAR_PHASE_STEPS`] rotations per angular
/// step, with shapes that coincide as pixel sets emitted once.
pub fn enumerate_jagstar_candidates(k: usize) -> Vec<OffsetList> {
    let step = 2.0 * PI / (k - 1) as f64 / JAGSTAR_PHASE_STEPS as f64;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for d0 in 1..=JAGSTAR_MAX_RADIUS {
        for d1 in 1..=JAGSTAR_MAX_RADIUS {
            for j in 0..JAGSTAR_PHASE_STEPS {
                let shape = jag_star_offsets(k, d0 as f64, d1 as f64, j as f64 * step);
                if seen.insert(shape.shape_key()) {
                    out.push(shape);
                }
            }
        }
    }
    out
}

/// Fifth-order symmetric cliques built from pairs of characteristic offsets.
///
/// For every unordered pair `(r1, r2)` of distinct offsets (taken up to sign)
/// and each choice of full or halved (toward zero) length for each, emits
/// `{(0,0), a, -a, b, -b}`. Shapes where a halved offset vanishes or the two
/// axes coincide are skipped; duplicates are emitted once.
pub fn combined_bp5_candidates(selected: &[Offset]) -> Result<Vec<OffsetList>> {
    let mut base: Vec<Offset> = selected
        .iter()
        .filter(|o| **o != Offset::ORIGIN)
        .map(|o| o.canonical())
        .collect();
    base.sort();
    base.dedup();
    if base.is_empty() {
        return Err(Error::NoCandidates("combined BP5 (no characteristic offsets)".into()));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in 0..base.len() {
        for j in i + 1..base.len() {
            let (r1, r2) = (base[i], base[j]);
            for b in [r2, r2.halved()] {
                for a in [r1, r1.halved()] {
                    if a == Offset::ORIGIN || b == Offset::ORIGIN || a.canonical() == b.canonical() {
                        continue;
                    }
                    let shape = OffsetList::anchored([a, a.neg(), b, b.neg()]);
                    if seen.insert(shape.shape_key()) {
                        out.push(shape);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Joins the four best-scoring symmetric pairs `r` into the ninth-order
/// clique `{(0,0), r1, -r1, ..., r4, -r4}`. Scores are ordered descending
/// with ties broken by ascending canonical offset, so the result does not
/// depend on the order of `scored`.
pub fn conjoin_from_scores(scored: &[(Offset, f64)]) -> Result<OffsetList> {
    let mut ranked: Vec<(Offset, f64)> = scored.iter().map(|&(r, s)| (r.canonical(), s)).collect();
    ranked.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        other => other,
    });
    let mut picked: Vec<Offset> = Vec::with_capacity(4);
    for (r, _) in ranked {
        if !picked.contains(&r) {
            picked.push(r);
            if picked.len() == 4 {
                break;
            }
        }
    }
    if picked.len() < 4 {
        return Err(Error::NoCandidates(format!(
            "conjoined BP9 needs 4 distinct symmetric pairs, got {}",
            picked.len()
        )));
    }
    Ok(OffsetList::anchored(picked.into_iter().flat_map(|r| [r, r.neg()])))
}

/// Conjoined ninth-order shape from per-candidate third-order histograms on
/// the training image and on model samples, scored by their Jensen-Shannon
/// divergence. `candidates` must be symmetric `{(0,0), r, -r}` cliques.
pub fn conjoin_bp9(
    candidates: &[OffsetList],
    training: &[HistogramStats],
    samples: &[HistogramStats],
) -> Result<OffsetList> {
    if candidates.len() != training.len() || candidates.len() != samples.len() {
        return Err(Error::LengthMismatch {
            expected: candidates.len(),
            got: training.len().min(samples.len()),
        });
    }
    let scored = candidates
        .iter()
        .zip(training.iter().zip(samples))
        .map(|(c, (t, s))| {
            let r = *c.as_slice().get(1).ok_or_else(|| {
                Error::InvalidArgument(format!("`{c}` is not a symmetric pair clique"))
            })?;
            Ok((r, jsd(&t.freq, &s.freq)?))
        })
        .collect::<Result<Vec<_>>>()?;
    conjoin_from_scores(&scored)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(dx: i32, dy: i32) -> Offset {
        Offset::new(dx, dy)
    }

    #[test]
    fn radius_one_jagstar_is_lbp_ring() {
        let shape = jag_star_offsets(9, 1.0, 1.0, 0.0);
        let expected = OffsetList::anchored([
            o(1, 0), o(1, 1), o(0, 1), o(-1, 1), o(-1, 0), o(-1, -1), o(0, -1), o(1, -1),
        ]);
        assert_eq!(shape, expected);
    }

    #[test]
    fn radius_two_jagstar_by_hand() {
        // 2cos(45deg) = 1.414 -> 1, so the diagonal rays land on (+-1, +-1).
        let shape = jag_star_offsets(9, 2.0, 2.0, 0.0);
        let expected = OffsetList::anchored([
            o(2, 0), o(1, 1), o(0, 2), o(-1, 1), o(-2, 0), o(-1, -1), o(0, -2), o(1, -1),
        ]);
        assert_eq!(shape, expected);
    }

    #[test]
    fn rotation_changes_shape() {
        let a = jag_star_offsets(9, 2.0, 2.0, 0.0);
        let b = jag_star_offsets(9, 2.0, 2.0, PI / 8.0);
        assert_ne!(a.shape_key(), b.shape_key());
    }

    #[test]
    fn jagstar_enumeration_contract() {
        for k in [9, 13] {
            let all = enumerate_jagstar_candidates(k);
            assert!(all.iter().all(|c| c.arity() == k && c.extent() <= 20));
            assert_eq!(all, enumerate_jagstar_candidates(k));
            let keys: HashSet<_> = all.iter().map(|c| c.shape_key()).collect();
            assert_eq!(keys.len(), all.len());
            // Same order of magnitude as a dense grid of a couple of thousand.
            assert!((1000..6000).contains(&all.len()), "k={k}: {}", all.len());
        }
        assert_eq!(enumerate_jagstar_candidates(9).len(), 2704);
        assert_eq!(enumerate_jagstar_candidates(13).len(), 3110);
    }

    #[test]
    fn combined_bp5_worked_example() {
        let got = combined_bp5_candidates(&[o(4, 0), o(0, 6)]).unwrap();
        let want: Vec<OffsetList> = [
            (o(0, 6), o(4, 0)),
            (o(0, 3), o(4, 0)),
            (o(0, 6), o(2, 0)),
            (o(0, 3), o(2, 0)),
        ]
        .into_iter()
        .map(|(a, b)| OffsetList::anchored([a, a.neg(), b, b.neg()]))
        .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn combined_bp5_shape_contract() {
        let got = combined_bp5_candidates(&[o(4, 0), o(0, 6), o(-4, 0), o(3, 3), o(1, 0), o(2, 0)]).unwrap();
        let keys: HashSet<_> = got.iter().map(|c| c.shape_key()).collect();
        assert_eq!(keys.len(), got.len());
        for c in &got {
            assert_eq!(c.arity(), 5);
            let s = c.as_slice();
            assert_eq!(s[2], s[1].neg());
            assert_eq!(s[4], s[3].neg());
        }
        assert!(combined_bp5_candidates(&[]).is_err());
    }

    #[test]
    fn gld_candidate_window() {
        let all = gld_candidates(40.0);
        assert!(all.iter().all(|c| c.as_slice()[1].is_canonical() && c.as_slice()[1].norm_sq() <= 1600));
        // Half of the lattice points in a radius-40 disc, minus the centre.
        assert_eq!(all.len(), (5025 - 1) / 2);
    }

    #[test]
    fn conjoin_forced_choice_and_permutation_invariance() {
        let four = [(o(1, 0), 0.1), (o(0, 1), 0.0), (o(3, 2), 0.5), (o(-2, 1), 0.2)];
        let shape = conjoin_from_scores(&four).unwrap();
        assert_eq!(shape.arity(), 9);
        let members: HashSet<_> = shape.iter().copied().collect();
        for (r, _) in four {
            assert!(members.contains(&r) && members.contains(&r.neg()));
        }
        let mut scored = vec![
            (o(1, 0), 0.3), (o(0, 1), 0.3), (o(5, 5), 0.9), (o(2, 0), 0.3),
            (o(-3, 1), 0.3), (o(7, 0), 0.0), (o(1, 2), 0.3),
        ];
        let first = conjoin_from_scores(&scored).unwrap();
        scored.reverse();
        assert_eq!(conjoin_from_scores(&scored).unwrap(), first);
        scored.swap(0, 3);
        assert_eq!(conjoin_from_scores(&scored).unwrap(), first);
        assert!(conjoin_from_scores(&scored[..3]).is_err());
    }

    #[test]
    fn zero_divergence_pair_only_fills_in() {
        let cands: Vec<OffsetList> = [o(1, 0), o(2, 0), o(3, 0), o(4, 0), o(5, 0)]
            .into_iter()
            .map(|r| OffsetList::anchored([r, r.neg()]))
            .collect();
        let train = HistogramStats { freq: vec![0.25; 4], clique_count: 4 };
        let off = HistogramStats { freq: vec![0.4, 0.2, 0.2, 0.2], clique_count: 5 };
        let mut samples = vec![off.clone(); 5];
        samples[0] = train.clone();
        let trains = vec![train.clone(); 5];
        let shape = conjoin_bp9(&cands, &trains, &samples).unwrap();
        assert!(!shape.iter().any(|&m| m == o(1, 0)));
        // With only three positive-divergence pairs, the matched one is used.
        let shape = conjoin_bp9(&cands[..4], &trains[..4], &samples[..4]).unwrap();
        assert!(shape.iter().any(|&m| m == o(1, 0)));
    }
}
