use nhtb::dyadic::*;
use nhtb::measure::lebesgue_grid;
use nhtb::rng;
use proptest::prelude::*;

fn params(r: u32) -> GoodnessParams {
    // alpha = d = 1 gives gamma = 1/4.
    GoodnessParams::new(1.0, 1.0, r, 1.0, 0.1).unwrap()
}

#[test]
fn cube_of_point_standard_and_shifted() {
    let sys = DyadicSystem::standard(1, -10, 10).unwrap();
    let q = sys.cube_of_point(&[0.3], 0).unwrap();
    assert_eq!((q.lower(0), q.upper(0)), (0.0, 1.0));

    let mut bits = vec![vec![0u8]; 21];
    bits[9] = vec![1]; // level -1
    let sys = DyadicSystem::new(ShiftSequence::from_bits(1, -10, &bits).unwrap());
    let q = sys.cube_of_point(&[0.3], 0).unwrap();
    assert_eq!((q.lower(0), q.upper(0)), (-0.5, 0.5));
    assert!(sys.cube_of_point(&[0.3], 11).is_err());
}

#[test]
fn geometry_examples() {
    let q = Cube::from_corner(0, &[0.0]).unwrap();
    let r = Cube::from_corner(1, &[2.0]).unwrap();
    let g = geometry(&q, &r);
    assert_eq!(g.dist, 1.0);
    assert_eq!(g.long_distance, 4.0);

    let g = geometry(&q, &q);
    assert_eq!(g.dist, 0.0);
    assert_eq!(g.long_distance, 2.0);

    let q = Cube::from_corner(0, &[0.0, 0.0]).unwrap();
    let r = Cube::from_corner(0, &[3.0, 0.0]).unwrap();
    let g = geometry(&q, &r);
    assert_eq!(g.dist, 2.0);
    assert_eq!(g.long_distance, 4.0);
}

#[test]
fn boundary_distance_cases() {
    let r = Cube::from_corner(2, &[0.0, 0.0]).unwrap();
    let inside = Cube::from_corner(0, &[1.0, 2.0]).unwrap();
    assert_eq!(dist_to_boundary(&inside, &r), (1.0, 1.0));
    let straddle = Cube::from_corner(0, &[3.5, 1.0]).unwrap();
    assert_eq!(dist_to_boundary(&straddle, &r).0, 0.0);
    let outside = Cube::from_corner(0, &[7.0, 7.0]).unwrap();
    let (l2, li) = dist_to_boundary(&outside, &r);
    assert!((l2 - 18f64.sqrt()).abs() < 1e-15);
    assert_eq!(li, 3.0);
}

#[test]
fn theta_examples() {
    assert_eq!(theta(0, &params(8)), 11);
    assert_eq!(theta(4, &params(8)), 12);
    assert_eq!(theta(0, &params(3)), 4);
    // r = 2 is below the constraint for lambda = 1, so evaluate the formula directly.
    let mut p = params(8);
    p.r = 2;
    assert_eq!(theta(0, &p), 3);
}

#[test]
fn r_constraint_rejected() {
    let e = GoodnessParams::new(1.0, 1.0, 2, 1.0, 0.1).unwrap_err();
    assert!(e.to_string().contains("2^(r(1-gamma)) >= 4 lambda"));
    assert!(GoodnessParams::new(1.0, 1.0, 3, 1.0, 0.1).is_ok());
    assert!(GoodnessParams::new(1.0, 1.0, 8, 1.0, 0.3).is_err());
}

#[test]
fn singular_pair_examples() {
    let p = params(8);
    let r = Cube::from_corner(0, &[0.0]).unwrap();
    let side = 2f64.powi(-20);
    let centered = Cube::from_corner(-20, &[0.5 - side]).unwrap();
    assert_eq!(is_singular_pair(&centered, &r, &p).unwrap(), Singularity::EssentiallySingular);
    assert_eq!(is_singular_pair(&r, &r, &p).unwrap(), Singularity::Singular);
    let deep = Cube::from_corner(-20, &[0.25]).unwrap();
    let t = p.threshold(side, 1.0);
    assert!(dist_to_boundary(&deep, &r).0 > t);
    assert_eq!(is_singular_pair(&deep, &r, &p).unwrap(), Singularity::Neither);
    assert!(is_singular_pair(&r, &deep, &p).is_err());
}

#[test]
fn badness_bound_values() {
    assert!((badness_bound(1, 0.25, 32) - 0.0491).abs() < 5e-4);
    assert!((badness_bound(1, 0.25, 16) - 0.786).abs() < 1e-3);
    assert!(badness_bound(1, 0.25, 17) < badness_bound(1, 0.25, 16));
}

#[test]
fn vacuous_goodness_when_r_exceeds_search() {
    let mut p = params(8);
    p.max_excess = 5;
    let low = ShiftSequence::zero(1, -10, 0).unwrap();
    let high = ShiftSequence::zero(1, 0, 2).unwrap();
    let q = Cube::from_corner(0, &[0.0]).unwrap();
    assert!(is_good(&q, &low, &high, &p).unwrap());
}

#[test]
fn touching_lattice_is_bad_and_small_window_rejected() {
    let p = params(8);
    let low = ShiftSequence::zero(1, -10, -1).unwrap();
    let high = ShiftSequence::zero(1, 0, 50).unwrap();
    // Corner 0 lies on every standard lattice hyperplane.
    let q = Cube::from_corner(0, &[0.0]).unwrap();
    let info = goodness(&q, &low, &high, &p).unwrap();
    assert!(!info.good);
    assert_eq!(info.witness_excess, Some(8));
    let short = ShiftSequence::zero(1, 0, 20).unwrap();
    assert!(matches!(is_good(&q, &low, &short, &p), Err(nhtb::Error::WindowTooSmall(_))));
}

/// Brute force over hybrid cubes near `Q` at each searched level.
fn brute_bad(q: &Cube, low: &ShiftSequence, high: &ShiftSequence, p: &GoodnessParams) -> bool {
    let hyb = DyadicSystem::new(ShiftSequence::hybrid(low, high, q.level).unwrap());
    let dim = q.dim();
    for e in p.r..=p.max_excess {
        let k = q.level + e as i32;
        let base = hyb.cube_at_units(&q.corner, k);
        let s = base.side_units();
        for t in 0..3usize.pow(dim as u32) {
            let mut r = base;
            let mut x = t;
            for c in 0..dim {
                r.corner[c] += ((x % 3) as i128 - 1) * s;
                x /= 3;
            }
            if is_singular_pair(q, &r, p).unwrap() == Singularity::EssentiallySingular {
                return true;
            }
        }
    }
    false
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn goodness_matches_brute_force(seed in any::<u64>(), dim in 1usize..=2, r in 3u32..6, cx in -40i64..40, cy in -40i64..40) {
        let mut p = params(r);
        p.max_excess = 12;
        let mut g = rng::root(seed);
        let low = ShiftSequence::random(&mut g, dim, -12, -1).unwrap();
        let high = ShiftSequence::random(&mut g, dim, -12, 14).unwrap();
        let corner = if dim == 1 { vec![cx as f64 / 8.0] } else { vec![cx as f64 / 8.0, cy as f64 / 8.0] };
        let q = Cube::from_corner(-3, &corner).unwrap();
        let fast = !is_good(&q, &low, &high, &p).unwrap();
        prop_assert_eq!(fast, brute_bad(&q, &low, &high, &p));
    }

    #[test]
    fn cube_of_point_contains_point(seed in any::<u64>(), x in -100.0f64..100.0, y in -100.0f64..100.0, k in -20i32..8) {
        let mut g = rng::root(seed);
        let sys = DyadicSystem::new(ShiftSequence::random(&mut g, 2, -24, 10).unwrap());
        let q = sys.cube_of_point(&[x, y], k).unwrap();
        prop_assert!(q.contains_point(&[x, y]));
        prop_assert_eq!(q.side(), 2f64.powi(k));
        prop_assert!(sys.owns(&q));
        let parent = sys.parent(&q);
        prop_assert!(parent.contains_cube(&q));
        prop_assert_eq!(sys.ancestor(&q, 3).level, k + 3);
        let kids = q.children();
        prop_assert_eq!(kids.iter().filter(|c| c.contains_point(&[x, y])).count(), 1);
        for c in &kids {
            prop_assert!(sys.owns(c));
        }
    }

    #[test]
    fn offset_is_truncated_sum(seed in any::<u64>(), k in -8i32..9) {
        let mut g = rng::root(seed);
        let s = ShiftSequence::random(&mut g, 2, -6, 6).unwrap();
        let off = s.offset(k);
        for c in 0..2 {
            let mut sum = 0.0;
            for j in -6..k.min(7) {
                sum += s.bit(j, c) as f64 * 2f64.powi(j);
            }
            prop_assert_eq!(units_to_f64(off[c]), sum);
            prop_assert!(units_to_f64(off[c]) < 2f64.powi(k));
        }
    }
}

#[test]
fn partition_of_atoms_at_every_level() {
    let m = lebesgue_grid(2, 16).unwrap();
    let mut g = rng::root(3);
    let sys = DyadicSystem::new(ShiftSequence::random(&mut g, 2, -8, 4).unwrap());
    for k in -8..=4 {
        let cubes = occupied_cubes(&sys, &m, k);
        for i in 0..m.len() {
            assert_eq!(cubes.iter().filter(|q| q.contains_point(m.point(i))).count(), 1);
        }
        if k > -8 {
            for q in &cubes {
                let inside: usize = (0..m.len()).filter(|&i| q.contains_point(m.point(i))).count();
                let via_kids: usize = q
                    .children()
                    .iter()
                    .map(|c| (0..m.len()).filter(|&i| c.contains_point(m.point(i))).count())
                    .sum();
                assert_eq!(inside, via_kids);
            }
        }
    }
}

#[test]
fn separation_and_containment_for_good_cubes() {
    // Goodness is rare unless r is large: at gamma = 1/4 each excess e below
    // about 8 makes a cube bad almost surely.
    let p = params(16);
    let mut checked_sep = 0;
    let mut checked_cont = 0;
    for t in 0..200u64 {
        let mut g = rng::substream(11, t);
        let sys = RandomSystems::sample(&mut g, 1, -16, 48).unwrap();
        let x = [0.123 + t as f64 * 1e-3];
        let q = sys.d.cube_of_point(&x, -6).unwrap();
        if !sys.is_good_d(&q, &p).unwrap() {
            continue;
        }
        for e in p.r..=22 {
            let r = sys.dp.cube_of_point(&x, -6 + e as i32).unwrap();
            assert!(sys.good_separation_check(&q, &r, &p).unwrap());
            checked_sep += 1;
        }
        // Containment for good R in D' near Q.
        for n in 0..4u32 {
            let r = sys.dp.cube_of_point(&x, -6 + n as i32).unwrap();
            if !sys.is_good_dp(&r, &p).unwrap() {
                continue;
            }
            let d = geometry(&q, &r).long_distance / r.side();
            let j = (d.log2().ceil() as i32 - 1).max(0) as u32;
            assert!(sys.containment_level_check(&q, &r, j, n, &p).unwrap());
            checked_cont += 1;
        }
    }
    assert!(checked_sep > 0 && checked_cont > 0);
}

#[test]
fn mc_badness_below_bound() {
    for &(dim, r) in &[(1usize, 8u32), (2, 8), (1, 16)] {
        let p = params(r);
        let rep = bad_probability_mc(dim, &p, 4000, 5).unwrap();
        assert!(rep.frequency <= rep.analytic_bound + 3.0 * rep.stderr, "{rep:?}");
    }
    let a = bad_probability_mc(1, &params(8), 2000, 9).unwrap();
    let b = bad_probability_mc(1, &params(8), 2000, 9).unwrap();
    assert_eq!(a, b);
}

#[test]
fn boundary_region_membership() {
    let p = params(8);
    let q = Cube::from_corner(0, &[0.0]).unwrap();
    let other = DyadicSystem::standard(1, -20, 20).unwrap();
    assert!(!boundary_membership(&[0.5], &q, &other, &p).in_delta_q);
    assert!(boundary_membership(&[0.0], &q, &other, &p).in_delta_q);
    assert!(boundary_membership(&[1.0], &q, &other, &p).in_delta_q);
    let mb = boundary_membership(&[0.0], &q, &other, &p);
    assert!(mb.in_q_bad && mb.in_delta_k);

    // Lebesgue mass fraction of delta_Q on a fine grid.
    let eta = 0.05;
    let p = GoodnessParams::new(1.0, 1.0, 8, 1.0, eta).unwrap();
    let m = lebesgue_grid(1, 1 << 12).unwrap();
    let shifted = nhtb::measure::AtomicMeasure::new(
        1,
        m.points().iter().map(|x| x * 3.0 - 1.0).collect(),
        m.weights().iter().map(|w| w * 3.0).collect(),
        1.0,
    )
    .unwrap();
    let mass: f64 = (0..shifted.len())
        .filter(|&i| boundary_membership(shifted.point(i), &q, &other, &p).in_delta_q)
        .map(|i| shifted.weight(i))
        .sum();
    assert!((mass - 4.0 * eta).abs() < 3.0 / 4096.0, "{mass}");
}

#[test]
fn goodness_csv() {
    let p = params(8);
    let low = ShiftSequence::zero(1, -10, -1).unwrap();
    let high = ShiftSequence::zero(1, 0, 50).unwrap();
    let q = Cube::from_corner(0, &[0.0]).unwrap();
    let info = goodness(&q, &low, &high, &p).unwrap();
    let mut buf = Vec::new();
    write_goodness_csv(&mut buf, &[(q, info)]).unwrap();
    let s = String::from_utf8(buf).unwrap();
    assert!(s.starts_with("cube,level,status,min_margin"));
    assert!(s.contains("0:0,0,bad"));
}
