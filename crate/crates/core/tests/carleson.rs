use nhtb::carleson::*;
use nhtb::dyadic::{DyadicSystem, RandomSystems};
use nhtb::field::{NormSpace, VectorField, C64};
use nhtb::filtration::Filtration;
use nhtb::haar::Tree;
use nhtb::kernel::{DiscreteOperator, KernelSpec};
use nhtb::measure::{build_accretive, cantor, AccretiveFn, AccretiveSpec, AtomicMeasure};
use nhtb::rng;
use proptest::prelude::*;

fn opts() -> SignOptions {
    SignOptions { trials: 4000, seed: 5, union_samples: 16 }
}

fn line_filtration(depth: u32) -> (AtomicMeasure, Filtration) {
    let m = cantor(0.3, depth, 1).unwrap();
    let sys = DyadicSystem::standard(1, -40, 4).unwrap();
    let tree = Tree::build(&m, &AccretiveFn::one(m.len()), &sys, Some(1)).unwrap();
    let f = Filtration::from_tree(&tree).unwrap();
    (m, f)
}

/// `E || sum eps_j v_j ||^p` over all sign patterns, no symmetry reduction.
fn brute_moment(space: NormSpace, vs: &[Vec<C64>], p: f64) -> f64 {
    let k = vs.len();
    let mut s = 0.0;
    for bits in 0..1usize << k {
        let mut acc = vec![C64::new(0.0, 0.0); space.dim];
        for (j, v) in vs.iter().enumerate() {
            let e = if bits >> j & 1 == 1 { -1.0 } else { 1.0 };
            for c in 0..space.dim {
                acc[c] += v[c] * e;
            }
        }
        s += space.norm(&acc).powf(p);
    }
    s / (1usize << k) as f64
}

#[test]
fn one_point_space_is_rademacher_norm() {
    let space = NormSpace::lq(3.0, 2).unwrap();
    let filt = Filtration::new(vec![0.7], vec![0, 1, 2, 3], vec![vec![0]; 4]).unwrap();
    let mut g = rng::root(9);
    let seq = random_adapted_sequence(&filt, space, 1.0, &mut g);
    let xs: Vec<Vec<C64>> = (0..4).map(|l| seq.theta[&l].at(0).to_vec()).collect();
    for p in [1.0, 2.0, 3.5] {
        let rep = carleson_norm(&filt, &seq, p, &opts()).unwrap();
        assert!(rep.exact);
        // sup over k of partial sums; the full sum need not be the largest.
        let oracle = (1..=4).map(|k| brute_moment(space, &xs[..k], p).powf(1.0 / p)).fold(0.0, f64::max);
        assert!((rep.norm - oracle).abs() < 1e-12 * oracle, "{} vs {oracle}", rep.norm);
    }
}

#[test]
fn car2_scalar_is_square_function_sup() {
    let (_, filt) = line_filtration(5);
    let mut g = rng::root(2);
    let seq = random_adapted_sequence(&filt, NormSpace::scalar(), 0.7, &mut g);
    let rep = carleson_norm(&filt, &seq, 2.0, &opts()).unwrap();
    let w = filt.weights();
    let mut oracle: f64 = 0.0;
    for k in 0..filt.num_levels() {
        for (c, atoms) in filt.cells(k).iter().enumerate() {
            let s: f64 = atoms
                .iter()
                .map(|&x| w[x] * (0..=k).map(|j| seq.theta[&j].at(x)[0].norm_sqr()).sum::<f64>())
                .sum();
            oracle = oracle.max((s / filt.mass(k, c)).sqrt());
        }
    }
    assert!((rep.norm - oracle).abs() < 1e-10 * oracle);
    assert!(rep.union_sup <= rep.norm * (1.0 + 1e-12));
}

#[test]
fn monte_carlo_agrees_with_exact() {
    let filt = Filtration::new(vec![1.0], (0..14).collect(), vec![vec![0]; 14]).unwrap();
    let mut seq = CarlesonSequence::new(NormSpace::scalar());
    for l in 0..14 {
        seq.insert(l, VectorField::scalar_real(&[1.0])).unwrap();
    }
    let rep = carleson_norm(&filt, &seq, 1.0, &SignOptions { trials: 40000, seed: 1, union_samples: 0 }).unwrap();
    assert!(!rep.exact);
    // E|S_14| for a 14-step walk: sum_k |2k-14| C(14,k) / 2^14.
    let mut e = 0.0;
    let mut c = 1.0f64;
    for k in 0..=14u32 {
        e += (2.0 * k as f64 - 14.0).abs() * c;
        c = c * (14 - k) as f64 / (k + 1) as f64;
    }
    e /= 16384.0;
    assert!((rep.norm - e).abs() < 0.05 * e, "{} vs {e}", rep.norm);
}

#[test]
fn jn_rejects_non_adapted_and_reports_ratios() {
    let (m, filt) = line_filtration(4);
    let mut seq = CarlesonSequence::new(NormSpace::scalar());
    let mut v = vec![0.0; m.len()];
    v[0] = 1.0;
    seq.insert(filt.num_levels() - 1, VectorField::scalar_real(&v)).unwrap();
    assert!(jn_equivalence_test(&filt, &[seq], &[1.0, 2.0], &opts()).is_err());

    let mut g = rng::root(4);
    let seqs: Vec<_> = (0..10).map(|_| random_adapted_sequence(&filt, NormSpace::scalar(), 0.5, &mut g)).collect();
    let rep = jn_equivalence_test(&filt, &seqs, &[1.0, 2.0, 4.0], &opts()).unwrap();
    assert!(rep.all_exact);
    // Lyapunov: Car^p is nondecreasing in p.
    for k in 1..3 {
        assert!(rep.ratio_min[k] >= 1.0 - 1e-12);
    }
    assert!(rep.ratio_max[2] < 10.0);
}

#[test]
fn abstract_paraproduct_small_case() {
    let (m, filt) = line_filtration(3);
    let mut g = rng::root(8);
    let seq = random_adapted_sequence(&filt, NormSpace::scalar(), 1.0, &mut g);
    let mut fv = vec![0.0; m.len()];
    fv[2] = 1.0;
    let f = VectorField::scalar_real(&fv);
    let p = 1.5;
    let rep = abstract_paraproduct(&filt, &seq, &f, p, &opts()).unwrap();
    // Direct oracle: E_j f(x) = w_2 / mu(cell) on the cell containing atom 2.
    let w = filt.weights();
    let mut total = 0.0;
    for x in 0..m.len() {
        let vs: Vec<Vec<C64>> = (0..filt.num_levels())
            .map(|j| {
                let c = filt.label(j, 2);
                let e = if filt.label(j, x) == c { w[2] / filt.mass(j, c) } else { 0.0 };
                vec![seq.theta[&j].at(x)[0] * e]
            })
            .collect();
        total += w[x] * brute_moment(NormSpace::scalar(), &vs, p);
    }
    let oracle = total.powf(1.0 / p);
    assert!((rep.pf_norm - oracle).abs() < 1e-10 * oracle);
    assert!(rep.ratio.is_finite() && rep.ratio > 0.0);
}

#[test]
fn bmo_of_constant_and_step() {
    let m = AtomicMeasure::new(1, vec![0.1, 0.3, 0.6, 0.8], vec![1.0; 4], 1.0).unwrap();
    let sys = DyadicSystem::standard(1, -10, 2).unwrap();
    let cubes = vec![sys.cube_of_point(&[0.1], 0).unwrap()];
    let c = VectorField::scalar_real(&[2.0; 4]);
    assert_eq!(bmo_norm(&m, &c, 2.0, 1.0, &cubes).unwrap(), 0.0);
    let h = VectorField::scalar_real(&[1.0, 1.0, -1.0, -1.0]);
    let v = bmo_norm(&m, &h, 2.0, 1.0, &cubes).unwrap();
    assert!((v - 1.0).abs() < 1e-14);
    // The dilate 3Q = [-1, 2) has the same mass here.
    let v3 = bmo_norm(&m, &h, 1.0, 3.0, &cubes).unwrap();
    assert!((v3 - 1.0).abs() < 1e-14);
}

struct Pi2Fixture {
    m: AtomicMeasure,
    b1: AccretiveFn,
    b2: AccretiveFn,
    sys: RandomSystems,
    tf: Tree,
    tg: Tree,
    t: DiscreteOperator,
}

fn fixture(seed: u64) -> Pi2Fixture {
    let m = cantor(0.25, 3, 2).unwrap();
    let b1 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 0.7, seed }, &m).unwrap();
    let b2 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 0.7, seed: seed + 1 }, &m).unwrap();
    let mut g = rng::root(seed);
    let sys = RandomSystems::sample(&mut g, 2, -40, 12).unwrap();
    let tf = Tree::build(&m, &b1, &sys.d, Some(2)).unwrap();
    let tg = Tree::build(&m, &b2, &sys.dp, Some(2)).unwrap();
    let t = DiscreteOperator::new(KernelSpec::Cauchy, m.clone(), None).unwrap();
    Pi2Fixture { m, b1, b2, sys, tf, tg, t }
}

#[test]
fn telescoping_identity_holds() {
    for seed in [1, 2, 3] {
        let fx = fixture(seed);
        let s = Pi2Setup { t: &fx.t, b1: &fx.b1, b2: &fx.b2, tree_f: &fx.tf, tree_g: &fx.tg, dp: &fx.sys.dp, r: 2 };
        let mut g = rng::root(seed + 10);
        let gv = VectorField::random_gaussian(&mut g, fx.m.len(), NormSpace::lq(2.0, 2).unwrap());
        let rep = pi2_telescoping_check(&s, &gv).unwrap();
        assert!(rep.checked > 0);
        assert!(rep.max_rel_err <= 1e-10, "{rep:?}");
    }
}

#[test]
fn pi2_zero_kernel_and_linearity() {
    let fx = fixture(4);
    let zero = DiscreteOperator::new(KernelSpec::Zero { d: 1.0 }, fx.m.clone(), None).unwrap();
    let all = |_: &nhtb::dyadic::Cube| true;
    let s0 = Pi2Setup { t: &zero, b1: &fx.b1, b2: &fx.b2, tree_f: &fx.tf, tree_g: &fx.tg, dp: &fx.sys.dp, r: 2 };
    let g = VectorField::scalar_real(&vec![1.0; fx.m.len()]);
    assert_eq!(paraproduct_pi2(&s0, &g, &all, &all).unwrap().max_abs(), 0.0);

    let s = Pi2Setup { t: &fx.t, ..s0 };
    let mut r = rng::root(1);
    let g1 = VectorField::random_gaussian(&mut r, fx.m.len(), NormSpace::scalar());
    let g2 = VectorField::random_gaussian(&mut r, fx.m.len(), NormSpace::scalar());
    let mut sum = g1.clone();
    sum.add_assign(&g2);
    let mut lhs = paraproduct_pi2(&s, &g1, &all, &all).unwrap();
    lhs.add_assign(&paraproduct_pi2(&s, &g2, &all, &all).unwrap());
    let rhs = paraproduct_pi2(&s, &sum, &all, &all).unwrap();
    assert!(lhs.max_abs_diff(&rhs) < 1e-9 * rhs.max_abs().max(1.0));
    let none = |_: &nhtb::dyadic::Cube| false;
    assert_eq!(paraproduct_pi2(&s, &g1, &none, &all).unwrap().max_abs(), 0.0);
    let rep = pi2_bound(&s, &fx.m, &g1, 2.0, 1.0, &all, &all).unwrap();
    assert!(rep.ratio.is_finite() && rep.bmo > 0.0);
}

#[test]
fn bmo_haar_sum_matches_square_sum() {
    let fx = fixture(6);
    let all = |_: &nhtb::dyadic::Cube| true;
    let entry = fx.tf.haar().iter().find(|h| h.cancellative() && h.li >= 3).unwrap();
    let q = fx.tf.haar_cube(entry);
    let r_cube = fx.sys.d.ancestor(&q, 2);
    let h = VectorField::random_gaussian(&mut rng::root(2), fx.m.len(), NormSpace::scalar());
    let p = 2.0;
    let rep = bmo_haar_sum_test(&fx.m, &fx.tf, &fx.b1, &h, &r_cube, p, 2, 1.0, &all, &opts()).unwrap();
    // p = 2: orthogonality of the signs gives sum_Q |c_Q|^2 ||phi_Q||_2^2.
    let coeffs = fx.tf.coefficients(&h.mul_scalar_fn(fx.b1.values()));
    let mut s = 0.0;
    for (k, e) in fx.tf.haar().iter().enumerate() {
        let qq = fx.tf.haar_cube(e);
        if e.cancellative() && qq.level <= r_cube.level - 2 && r_cube.contains_cube(&qq) {
            let v = VectorField::scalar(fx.tf.haar_values(e));
            s += coeffs[k].norm_sqr() * v.lp_norm(fx.m.weights(), 2.0).powi(2);
        }
    }
    assert!(rep.terms > 0);
    if rep.exact {
        assert!((rep.lhs - s.sqrt()).abs() < 1e-10 * s.sqrt().max(1e-300));
    } else {
        assert!((rep.lhs - s.sqrt()).abs() < 0.05 * s.sqrt());
    }
    assert!(rep.ratio.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn unions_never_exceed_cells(seed in 0u64..1000) {
        let (_, filt) = line_filtration(4);
        let mut g = rng::root(seed);
        let seq = random_adapted_sequence(&filt, NormSpace::scalar(), 0.6, &mut g);
        let rep = carleson_norm(&filt, &seq, 1.0, &SignOptions { trials: 100, seed, union_samples: 40 }).unwrap();
        prop_assert!(rep.union_sup <= rep.norm * (1.0 + 1e-12));
    }

    #[test]
    fn carleson_is_homogeneous(seed in 0u64..1000, c in 0.1f64..10.0) {
        let (_, filt) = line_filtration(3);
        let mut g = rng::root(seed);
        let seq = random_adapted_sequence(&filt, NormSpace::scalar(), 0.8, &mut g);
        let mut scaled = seq.clone();
        for v in scaled.theta.values_mut() {
            *v = v.scale(C64::new(c, 0.0));
        }
        let a = carleson_norm(&filt, &seq, 1.5, &opts()).unwrap().norm;
        let b = carleson_norm(&filt, &scaled, 1.5, &opts()).unwrap().norm;
        prop_assert!((b - c * a).abs() <= 1e-10 * b.max(1e-300));
    }
}
