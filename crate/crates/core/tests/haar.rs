use nhtb::dyadic::{Cube, DyadicSystem, ShiftSequence};
use nhtb::field::{inner, pair, NormSpace, VectorField, C64};
use nhtb::haar::*;
use nhtb::measure::{build_accretive, cantor, lebesgue_grid, AccretiveFn, AccretiveSpec, AtomicMeasure};
use nhtb::rng;
use proptest::prelude::*;

fn random_setup(seed: u64, dim: usize, depth: u32) -> (AtomicMeasure, AccretiveFn, DyadicSystem) {
    let m = cantor(0.25, depth, dim).unwrap();
    let b = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 1.2, seed }, &m).unwrap();
    let mut g = rng::root(seed ^ 0xabc);
    let sys = DyadicSystem::new(ShiftSequence::random(&mut g, dim, -30, 8).unwrap());
    (m, b, sys)
}

fn close(a: C64, b: C64, tol: f64) -> bool {
    (a - b).norm() <= tol
}

#[test]
fn classical_haar_function() {
    let m = lebesgue_grid(1, 8).unwrap();
    let b = AccretiveFn::one(8);
    let q = Cube::from_corner(0, &[0.0]).unwrap();
    let phi = build_haar(&q, 1, &m, &b).unwrap();
    for i in 0..8 {
        let want = if m.point(i)[0] < 0.5 { 1.0 } else { -1.0 };
        assert!(close(phi.values[i], C64::new(want, 0.0), 1e-15));
    }
    let rep = verify_haar_norms(&phi, &m, &b);
    assert!((rep.l1_linf - 1.0).abs() < 1e-15);
    assert!(rep.integral_b_phi.norm() < 1e-15);
    assert!((rep.integral_b_phi_sq.re - 1.0).abs() < 1e-15);
    let top = build_haar(&q, 0, &m, &b).unwrap();
    assert!(!top.cancellative);
    assert!(top.values.iter().all(|v| close(*v, C64::new(1.0, 0.0), 1e-15)));
}

#[test]
fn empty_child_gives_zero_function() {
    let m = AtomicMeasure::new(1, vec![0.1, 0.3], vec![0.5, 0.5], 1.0).unwrap();
    let b = AccretiveFn::one(2);
    let q = Cube::from_corner(0, &[0.0]).unwrap();
    let ord = order_subcubes(&q, &m, &b).unwrap();
    assert_eq!(ord, vec![1, 0]);
    assert!(build_haar(&q, 1, &m, &b).unwrap().is_zero());
}

#[test]
fn ordering_examples() {
    // Balanced children with b = 1: lexicographic.
    let m = lebesgue_grid(2, 4).unwrap();
    let b = AccretiveFn::one(m.len());
    let q = Cube::from_corner(0, &[0.0, 0.0]).unwrap();
    assert_eq!(order_subcubes(&q, &m, &b).unwrap(), vec![0, 1, 2, 3]);
    // All mass in one child: it comes last.
    let m = AtomicMeasure::new(2, vec![0.7, 0.2, 0.8, 0.3], vec![0.5, 0.5], 1.0).unwrap();
    let b = AccretiveFn::one(2);
    let ord = order_subcubes(&q, &m, &b).unwrap();
    assert_eq!(*ord.last().unwrap(), 1);
    // Overstated delta.
    let bad = AccretiveFn::new(vec![C64::new(1.0, 0.0), C64::new(-0.9, 0.0)], Some(0.9)).unwrap();
    assert!(matches!(order_subcubes(&q, &m, &bad), Err(nhtb::Error::NoValidChild { .. })));
}

#[test]
fn cond_expectation_basics() {
    let (m, b, sys) = random_setup(1, 1, 5);
    let floor = delta_floor(&b);
    let mut g = rng::root(2);
    let f = VectorField::random_gaussian(&mut g, m.len(), NormSpace::scalar());
    // b = 1 gives plain averages.
    let one = AccretiveFn::one(m.len());
    let e = cond_expectation(&m, &f, &one, -1, &sys, 1e-9).unwrap();
    let e1 = cond_expectation(&m, &f, &one, -1, &sys, 1e-9).unwrap();
    assert_eq!(e, e1);
    // Below the finest scale: identity.
    let id = cond_expectation(&m, &f, &b, -40, &sys, floor).unwrap();
    assert!(id.max_abs_diff(&f) < 1e-12);
    // E_k^b b = b.
    let bf = VectorField::scalar(b.values().to_vec());
    for k in -12..3 {
        let e = cond_expectation(&m, &bf, &b, k, &sys, floor).unwrap();
        assert!(e.max_abs_diff(&bf) < 1e-12);
        let d = martingale_difference(&m, &bf.scale(C64::new(2.0, -1.0)), &b, k, &sys, floor).unwrap();
        assert!(d.max_abs() < 1e-12);
    }
}

#[test]
fn telescoping_and_vanishing_integrals() {
    let (m, b, sys) = random_setup(4, 2, 3);
    let floor = delta_floor(&b);
    let mut g = rng::root(5);
    let f = VectorField::random_gaussian(&mut g, m.len(), NormSpace::lq(2.0, 3).unwrap());
    let top = 1;
    let mut sum = cond_expectation(&m, &f, &b, top, &sys, floor).unwrap();
    for k in (-12..=top).rev() {
        let d = martingale_difference(&m, &f, &b, k, &sys, floor).unwrap();
        // Integral of D_k^b f over each level-k cube vanishes.
        for i in 0..m.len() {
            let q = sys.cube_of_point(m.point(i), k).unwrap();
            let mut s = C64::new(0.0, 0.0);
            for j in 0..m.len() {
                if q.contains_point(m.point(j)) {
                    s += d.at(j)[0] * m.weight(j);
                }
            }
            assert!(s.norm() < 1e-12);
        }
        sum.add_assign(&d);
    }
    assert!(sum.max_abs_diff(&f) < 1e-11);
}

#[test]
fn projection_algebra() {
    let (m, b, sys) = random_setup(6, 1, 6);
    let floor = delta_floor(&b);
    let mut g = rng::root(7);
    let f = VectorField::random_gaussian(&mut g, m.len(), NormSpace::scalar());
    let e = |h: &VectorField, k| cond_expectation(&m, h, &b, k, &sys, floor).unwrap();
    let d = |h: &VectorField, k| martingale_difference(&m, h, &b, k, &sys, floor).unwrap();
    for (k, j) in [(-3, -5), (-5, -3), (-4, -4), (0, -8)] {
        let ekj = e(&e(&f, j), k);
        assert!(ekj.max_abs_diff(&e(&f, k.max(j))) < 1e-10);
        let dkj = d(&d(&f, j), k);
        if k == j {
            assert!(dkj.max_abs_diff(&d(&f, k)) < 1e-10);
        } else {
            assert!(dkj.max_abs() < 1e-10);
        }
    }
}

#[test]
fn tree_matches_direct_operators() {
    let (m, b, sys) = random_setup(8, 2, 4);
    let tree = Tree::build(&m, &b, &sys, None).unwrap();
    let floor = delta_floor(&b);
    let mut g = rng::root(9);
    let f = VectorField::random_gaussian(&mut g, m.len(), NormSpace::scalar());
    for li in 0..tree.num_levels() {
        let k = tree.level(li);
        let direct = cond_expectation(&m, &f, &b, k, &sys, floor).unwrap();
        assert!(tree.cond_expectation(&f, li).max_abs_diff(&direct) < 1e-12);
    }
    // Rank-one identity per cell: D_Q^b f = sum_u b phi <phi, f>.
    let coeffs = tree.coefficients(&f);
    for li in 0..tree.num_levels() - 1 {
        let k = tree.level(li);
        let d = martingale_difference(&m, &f, &b, k, &sys, floor).unwrap();
        for cell in tree.cells(li) {
            let mut c = vec![C64::new(0.0, 0.0); coeffs.len()];
            for h in cell.haar.clone() {
                if tree.haar()[h].cancellative() {
                    c[h] = coeffs[h];
                }
            }
            let part = tree.synthesize(&c, f.space, None);
            for pos in 0..tree.len() {
                let a = tree.order()[pos];
                let want = if pos >= cell.start && pos < cell.end { d.at(a)[0] } else { C64::new(0.0, 0.0) };
                assert!(close(part.at(a)[0], want, 1e-11));
            }
        }
    }
}

#[test]
fn haar_identities_and_gram_matrix() {
    let (m, b, sys) = random_setup(10, 2, 3);
    let tree = Tree::build(&m, &b, &sys, None).unwrap();
    assert_eq!(tree.haar().len(), m.len());
    let funcs: Vec<Vec<C64>> = tree.haar().iter().map(|h| tree.haar_values(h)).collect();
    for (h, phi) in tree.haar().iter().zip(&funcs) {
        let ib: C64 = (0..m.len()).map(|i| b.value(i) * phi[i] * m.weight(i)).sum();
        let ib2: C64 = (0..m.len()).map(|i| b.value(i) * phi[i] * phi[i] * m.weight(i)).sum();
        if h.cancellative() {
            assert!(ib.norm() < 1e-12);
        }
        assert!((ib2 - 1.0).norm() < 1e-10);
    }
    for (x, px) in funcs.iter().enumerate() {
        for (y, py) in funcs.iter().enumerate() {
            let g: C64 = (0..m.len()).map(|i| b.value(i) * px[i] * py[i] * m.weight(i)).sum();
            let want = if x == y { 1.0 } else { 0.0 };
            assert!((g - want).norm() < 1e-10, "gram[{x}][{y}] = {g}");
        }
    }
}

#[test]
fn explicit_haar_agrees_with_tree() {
    let (m, b, sys) = random_setup(12, 2, 3);
    let tree = Tree::build(&m, &b, &sys, None).unwrap();
    for h in tree.haar() {
        let q = tree.haar_cube(h);
        let phi = build_haar(&q, h.u, &m, &b).unwrap();
        let from_tree = tree.haar_values(h);
        for i in 0..m.len() {
            assert!(close(phi.values[i], from_tree[i], 1e-12));
        }
    }
}

#[test]
fn decomposition_round_trip_and_counts() {
    let (m, b, sys) = random_setup(13, 2, 4);
    let tree = Tree::build(&m, &b, &sys, None).unwrap();
    let space = NormSpace::lq(3.0, 4).unwrap();
    let mut g = rng::root(14);
    let f = VectorField::random_gaussian(&mut g, m.len(), space);
    let dec = decompose(&f, &tree).unwrap();
    let back = reconstruct(&dec, &tree).unwrap();
    assert!(back.max_abs_diff(&f) / f.max_abs() < 1e-12);
    assert_eq!(dec.keys.len(), m.len());
    let splitting: usize = (0..tree.num_levels())
        .map(|li| tree.cells(li).iter().filter(|c| c.children.len() > 1).count())
        .sum();
    assert_eq!(tree.formal_haar_count(), splitting * 3 + tree.cells(0).len());

    // f = b: only the top coefficients survive.
    let bf = VectorField::scalar(b.values().to_vec());
    let dec = decompose(&bf, &tree).unwrap();
    for (k, (_, u)) in dec.keys.iter().enumerate() {
        if *u > 0 {
            assert!(dec.coeff(k)[0].norm() < 1e-12);
        }
    }
    let mut buf = Vec::new();
    dec.write_csv(&mut buf).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), m.len() + 1);
}

#[test]
fn unconditionality_trivial_cases() {
    let m = lebesgue_grid(1, 64).unwrap();
    let b = AccretiveFn::one(64);
    let sys = DyadicSystem::standard(1, -10, 4).unwrap();
    let tree = Tree::build(&m, &b, &sys, Some(0)).unwrap();
    let mut g = rng::root(15);
    let f = VectorField::random_gaussian(&mut g, 64, NormSpace::scalar());
    let rep = unconditionality_estimate(&f, &tree, m.weights(), 2.0, 20, 1).unwrap();
    assert!((rep.max_ratio - 1.0).abs() < 1e-12 && (rep.mean_ratio - 1.0).abs() < 1e-12);
    // A single Haar term.
    let h = tree.haar()[5];
    let single = VectorField::scalar(tree.haar_values(&h));
    let rep = unconditionality_estimate(&single, &tree, m.weights(), 3.0, 10, 2).unwrap();
    assert!((rep.max_ratio - 1.0).abs() < 1e-12);
}

#[test]
fn norm_constants_recorded() {
    let (m, b, sys) = random_setup(17, 2, 4);
    let tree = Tree::build(&m, &b, &sys, None).unwrap();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for h in tree.haar().iter().filter(|h| h.cancellative()) {
        let rep = verify_haar_norms(&tree.haar_function(h), &m, &b);
        lo = lo.min(rep.l1_linf);
        hi = hi.max(rep.l1_linf);
        assert!(rep.pointwise_lower > 0.0 && rep.pointwise_upper.is_finite());
    }
    assert!(lo > 0.0 && hi < 10.0, "{lo} {hi}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn subaccretive_after_ordering(seed in any::<u64>(), dim in 1usize..=2) {
        let (m, b, sys) = random_setup(seed, dim, 4);
        let tree = Tree::build(&m, &b, &sys, None).unwrap();
        for li in 0..tree.num_levels() {
            for cell in tree.cells(li) {
                let q = cell.cube;
                let ord = order_subcubes(&q, &m, &b).unwrap();
                let ints: Vec<C64> = q.children().iter().map(|c| {
                    (0..m.len()).filter(|&i| c.contains_point(m.point(i))).map(|i| b.value(i) * m.weight(i)).sum()
                }).collect();
                prop_assert_eq!(subaccretive_violations(&ints, &ord, b.delta() * cell.mass), 0);
            }
        }
    }

    #[test]
    fn pairing_conventions(seed in any::<u64>()) {
        let mut g = rng::root(seed);
        let w: Vec<f64> = (0..10).map(|i| 0.1 + i as f64 * 0.01).collect();
        let x = VectorField::random_gaussian(&mut g, 10, NormSpace::scalar());
        let y = VectorField::random_gaussian(&mut g, 10, NormSpace::scalar());
        let conj = VectorField::scalar(x.values().iter().map(|z| z.conj()).collect());
        prop_assert!((inner(&w, &x, &y) - pair(&w, &conj, &y)).norm() < 1e-12);
    }
}
