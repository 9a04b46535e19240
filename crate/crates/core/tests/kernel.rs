use nhtb::dyadic::{Cube, GoodnessParams, RandomSystems};
use nhtb::field::{inner, pair, NormSpace, VectorField, C64};
use nhtb::haar::{build_haar, HaarFunction, Tree};
use nhtb::kernel::*;
use nhtb::measure::{build_accretive, cantor, lebesgue_grid, AccretiveFn, AccretiveSpec, AtomicMeasure};
use nhtb::rng;

fn cauchy_on(m: &AtomicMeasure) -> DiscreteOperator {
    DiscreteOperator::new(KernelSpec::Cauchy, m.clone(), None).unwrap()
}

fn rel(a: C64, b: C64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(1e-300)
}

#[test]
fn cauchy_kernel_constants() {
    let mut g = rng::root(1);
    for dim in [1, 2] {
        let rep = czk_check(&KernelSpec::Cauchy, dim, 20_000, &mut g).unwrap();
        assert!((rep.worst_size_ratio - 1.0).abs() < 1e-12, "{rep:?}");
        assert!(rep.worst_holder_ratio <= 2.0 + 1e-9, "{rep:?}");
        assert!(rep.worst_holder_sum_ratio <= 4.0 + 1e-9);
    }
    let z = czk_check(&KernelSpec::Zero { d: 1.0 }, 2, 100, &mut g).unwrap();
    assert_eq!((z.worst_size_ratio, z.worst_holder_ratio), (0.0, 0.0));
    assert!(czk_check(&KernelSpec::Cauchy, 3, 10, &mut g).is_err());
}

#[test]
fn kernel_json_by_name() {
    let k: KernelSpec = serde_json::from_str(r#"{"name":"odd_power","d":1.0,"component":0}"#).unwrap();
    assert_eq!(k, KernelSpec::OddPower { d: 1.0, component: 0 });
    let k: KernelSpec = serde_json::from_str(r#"{"name":"cauchy"}"#).unwrap();
    assert_eq!(k.name(), "cauchy");
    assert!(serde_json::from_str::<KernelSpec>(r#"{"name":"odd_power","d":1.0,"component":0,"x":1}"#).is_err());
}

#[test]
fn apply_small_cases() {
    let m = AtomicMeasure::new(1, vec![0.25], vec![0.5], 1.0).unwrap();
    let t = cauchy_on(&m);
    let tf = t.apply(&VectorField::scalar_real(&[3.0]));
    assert_eq!(tf.values()[0], C64::new(0.0, 0.0));

    let m = AtomicMeasure::new(1, vec![0.1, 0.6], vec![0.3, 0.7], 1.0).unwrap();
    let t = cauchy_on(&m);
    let tf = t.apply(&VectorField::scalar_real(&[1.0, 0.0]));
    assert_eq!(tf.values()[0], C64::new(0.0, 0.0));
    assert!(rel(tf.values()[1], C64::new(0.3 / (0.6 - 0.1), 0.0)) < 1e-15);
}

#[test]
fn transpose_and_adjoint_consistency() {
    let m = cantor(0.25, 3, 2).unwrap();
    let t = cauchy_on(&m);
    let mut g = rng::root(7);
    let space = NormSpace::lq(2.0, 3).unwrap();
    for _ in 0..5 {
        let f = VectorField::random_gaussian(&mut g, m.len(), space);
        let h = VectorField::random_gaussian(&mut g, m.len(), space);
        let lhs = pair(m.weights(), &h, &t.apply(&f));
        let rhs = pair(m.weights(), &t.apply_transpose(&h), &f);
        assert!(rel(lhs, rhs) < 1e-12);
        let lhs = inner(m.weights(), &h, &t.apply(&f));
        let rhs = inner(m.weights(), &t.apply_adjoint(&h), &f);
        assert!(rel(lhs, rhs) < 1e-12);
    }
}

#[test]
fn truncation_default() {
    let m = cantor(0.25, 2, 1).unwrap();
    let t = cauchy_on(&m);
    assert!((t.eps() - m.min_separation() / 2.0).abs() < 1e-15);
    assert!(t.is_maximal());
    let coarse = DiscreteOperator::new(KernelSpec::Cauchy, m.clone(), Some(10.0)).unwrap();
    assert!(coarse.apply(&VectorField::scalar_real(&vec![1.0; m.len()])).max_abs() == 0.0);
}

fn point_haar(m: &AtomicMeasure, i: usize, v: C64) -> HaarFunction {
    let mut values = vec![C64::new(0.0, 0.0); m.len()];
    values[i] = v;
    let mut region = vec![0u8; m.len()];
    region[i] = 1;
    let q = Cube::from_corner(0, &vec![0.0; m.dim()]).unwrap();
    HaarFunction { cube: q, u: 1, cancellative: true, values, region, qu_mass: m.weight(i), q_mass: m.weight(i) }
}

#[test]
fn matrix_coeff_single_atoms() {
    let m = AtomicMeasure::new(2, vec![0.1, 0.2, 0.7, 0.4], vec![0.25, 0.5], 1.0).unwrap();
    let t = cauchy_on(&m);
    let b1 = AccretiveFn::new(vec![C64::new(0.9, 0.1), C64::new(0.8, -0.3)], Some(0.5)).unwrap();
    let b2 = AccretiveFn::new(vec![C64::new(0.7, 0.2), C64::new(1.0, 0.0)], Some(0.5)).unwrap();
    let psi = point_haar(&m, 0, C64::new(2.0, 1.0));
    let phi = point_haar(&m, 1, C64::new(-1.0, 0.5));
    let want = C64::new(2.0, 1.0) * b2.value(0) * KernelSpec::Cauchy.eval(m.point(0), m.point(1)) * b1.value(1)
        * C64::new(-1.0, 0.5)
        * 0.25
        * 0.5;
    assert!(rel(matrix_coeff(&t, &psi, &phi, &b1, &b2), want) < 1e-15);
    assert_eq!(matrix_coeff(&t, &phi, &phi, &b1, &b2), C64::new(0.0, 0.0));
}

#[test]
fn matrix_coeff_is_bilinear() {
    let m = cantor(0.25, 3, 2).unwrap();
    let t = cauchy_on(&m);
    let b1 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 1.0, seed: 3 }, &m).unwrap();
    let b2 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 1.0, seed: 4 }, &m).unwrap();
    let q = Cube::from_corner(-1, &[0.0, 0.0]).unwrap();
    let r = Cube::from_corner(0, &[0.0, 0.0]).unwrap();
    let psi = build_haar(&r, 2, &m, &b2).unwrap();
    let phi1 = build_haar(&q, 1, &m, &b1).unwrap();
    let phi2 = build_haar(&q, 3, &m, &b1).unwrap();
    let (a, c) = (C64::new(0.3, -1.2), C64::new(-2.0, 0.4));
    let mut comb = phi1.clone();
    for i in 0..m.len() {
        comb.values[i] = a * phi1.values[i] + c * phi2.values[i];
    }
    let lhs = matrix_coeff(&t, &psi, &comb, &b1, &b2);
    let rhs = a * matrix_coeff(&t, &psi, &phi1, &b1, &b2) + c * matrix_coeff(&t, &psi, &phi2, &b1, &b2);
    assert!(rel(lhs, rhs) < 1e-12);
    let mut psi_c = psi.clone();
    for v in psi_c.values.iter_mut() {
        *v *= a;
    }
    assert!(rel(matrix_coeff(&t, &psi_c, &phi1, &b1, &b2), a * matrix_coeff(&t, &psi, &phi1, &b1, &b2)) < 1e-12);
}

struct Setup {
    m: AtomicMeasure,
    b1: AccretiveFn,
    b2: AccretiveFn,
    sys: RandomSystems,
    tf: Tree,
    tg: Tree,
    p: GoodnessParams,
}

fn setup(depth: u32, seed: u64, r: u32) -> Setup {
    let m = cantor(0.25, depth, 2).unwrap();
    let b1 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 0.8, seed }, &m).unwrap();
    let b2 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 0.8, seed: seed + 1 }, &m).unwrap();
    let mut g = rng::root(seed);
    let p = GoodnessParams::with_search(1.0, 1.0, r, 1.0, 0.1, r + 8).unwrap();
    let sys = RandomSystems::sample(&mut g, 2, -40, 2 + r as i32 + 8).unwrap();
    let tf = Tree::build(&m, &b1, &sys.d, Some(1)).unwrap();
    let tg = Tree::build(&m, &b2, &sys.dp, Some(1)).unwrap();
    Setup { m, b1, b2, sys, tf, tg, p }
}

fn cancellative(t: &Tree) -> Vec<HaarFunction> {
    t.haar().iter().filter(|h| h.cancellative()).map(|h| t.haar_function(h)).collect()
}

#[test]
fn separated_ratios_finite_and_zero_phi() {
    let s = setup(4, 11, 3);
    let t = cauchy_on(&s.m);
    let qs = cancellative(&s.tf);
    let rs = cancellative(&s.tg);
    let goods: Vec<bool> = qs.iter().map(|q| s.sys.is_good_d(&q.cube, &s.p).unwrap()).collect();
    let mut pairs = Vec::new();
    for (q, &good) in qs.iter().zip(&goods) {
        for r in &rs {
            pairs.push(CoeffPair { psi: r, phi: q, q_good: good });
        }
    }
    let rep = decay_separated(&t, &pairs, &s.b1, &s.b2);
    assert!(rep.rows.iter().any(|r| r.flag != PairFlag::Hypothesis));
    assert!(rep.sup_ratio_near.is_finite() && rep.sup_ratio_near > 0.0);
    assert!(rep.sup_ratio_long.is_finite());
    assert!(rep.skipped > 0);

    let mut zero = qs[0].clone();
    zero.values.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
    let far = rs.iter().find(|r| {
        let g = nhtb::dyadic::geometry(&zero.cube, &r.cube);
        zero.cube.side() <= r.cube.side() && zero.cube.side() <= g.dist
    });
    if let Some(r) = far {
        let rep = decay_separated(&t, &[CoeffPair { psi: r, phi: &zero, q_good: true }], &s.b1, &s.b2);
        assert_eq!(rep.rows[0].coeff_abs, 0.0);
        assert_eq!(rep.rows[0].ratio_near, 0.0);
    }
}

#[test]
fn separated_hypothesis_flagged() {
    let m = lebesgue_grid(1, 16).unwrap();
    let b = AccretiveFn::one(16);
    let t = cauchy_on(&m);
    let q = Cube::from_corner(-2, &[0.0]).unwrap();
    let r = Cube::from_corner(-1, &[0.0]).unwrap();
    let psi = build_haar(&r, 1, &m, &b).unwrap();
    let phi = build_haar(&q, 1, &m, &b).unwrap();
    let rep = decay_separated(&t, &[CoeffPair { psi: &psi, phi: &phi, q_good: true }], &b, &b);
    assert_eq!(rep.rows[0].flag, PairFlag::Hypothesis);
    assert_eq!(rep.skipped, 1);
}

#[test]
fn scale_indices_examples() {
    let q = Cube::from_corner(-2, &[0.0]).unwrap();
    let r = Cube::from_corner(0, &[3.0]).unwrap();
    // D = 1/4 + 2.75 + 1 = 4, D/l(R) = 4 -> j = 1.
    assert_eq!(scale_indices(&q, &r), (2, 1));
    let r = Cube::from_corner(0, &[1.0]).unwrap();
    // D = 1/4 + 3/4 + 1 = 2 -> j = 0.
    assert_eq!(scale_indices(&q, &r), (2, 0));
}

fn contained_pairs<'a>(s: &Setup, qs: &'a [HaarFunction], rs: &'a [HaarFunction], r: u32) -> Vec<CoeffPair<'a>> {
    let mut v = Vec::new();
    for q in qs {
        let good = s.sys.is_good_d(&q.cube, &s.p).unwrap();
        for rr in rs {
            if rr.cube.contains_cube(&q.cube) && rr.cube.level - q.cube.level > r as i32 {
                v.push(CoeffPair { psi: rr, phi: q, q_good: good });
            }
        }
    }
    v
}

#[test]
fn contained_identity_split() {
    let s = setup(5, 21, 3);
    let t = cauchy_on(&s.m);
    let qs = cancellative(&s.tf);
    let rs = cancellative(&s.tg);
    let pairs = contained_pairs(&s, &qs, &rs, 3);
    assert!(!pairs.is_empty());
    let rep = decay_contained(&t, &pairs, &s.b1, &s.b2, 3);
    assert!(rep.max_split_rel_err <= 1e-10, "{}", rep.max_split_rel_err);
    assert!(rep.sup_ratio.is_finite());
    assert!(rep.sup_pointwise_ratio.is_finite());
    for row in rep.rows.iter().filter(|r| r.flag == PairFlag::Ok) {
        assert!(rel(row.corrected, row.coeff - row.correction) < 1e-14);
    }
}

#[test]
fn correction_uses_value_of_psi_on_q() {
    // psi_R constant on the child holding Q: the correction is <b2, T(b1 phi)> psi_R(Q).
    let m = lebesgue_grid(1, 64).unwrap();
    let b = AccretiveFn::one(64);
    let t = cauchy_on(&m);
    let r = Cube::from_corner(0, &[0.0]).unwrap();
    let q = Cube::from_corner(-5, &[0.125]).unwrap();
    let psi = build_haar(&r, 1, &m, &b).unwrap();
    let phi = build_haar(&q, 1, &m, &b).unwrap();
    let rep = decay_contained(&t, &[CoeffPair { psi: &psi, phi: &phi, q_good: true }], &b, &b, 3);
    let row = &rep.rows[0];
    assert_eq!(row.flag, PairFlag::Ok);
    let tphi = t.apply(&VectorField::scalar(phi.values.clone()));
    let global: C64 = (0..64).map(|i| tphi.values()[i] * m.weight(i)).sum();
    let i = (0..64).find(|&i| q.contains_point(m.point(i))).unwrap();
    assert!(rel(row.correction, global * psi.values[i]) < 1e-12);
}

#[test]
fn close_split_cases() {
    let m = cantor(0.25, 4, 2).unwrap();
    let t = cauchy_on(&m);
    let b1 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 1.0, seed: 5 }, &m).unwrap();
    let b2 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 1.0, seed: 6 }, &m).unwrap();
    let q = Cube::from_corner(-1, &[0.0, 0.0]).unwrap();
    let s = close_split(&t, &q, &q, &b1, &b2, 0.01).unwrap();
    assert_eq!(s.r_sep, C64::new(0.0, 0.0));
    assert_eq!(s.r_bdry, C64::new(0.0, 0.0));
    assert_eq!(s.q_bdry, C64::new(0.0, 0.0));
    assert_eq!(s.q_sep, C64::new(0.0, 0.0));
    assert_eq!(s.delta, s.direct);

    let r = Cube::from_corner(-1, &[0.5, 0.0]).unwrap();
    let s = close_split(&t, &q, &r, &b1, &b2, 0.1).unwrap();
    assert_eq!(s.delta_mass, 0.0);
    assert_eq!(s.delta, C64::new(0.0, 0.0));
    assert!(s.rel_err <= 1e-10);

    // Shifted, overlapping cubes of different size.
    let sys = RandomSystems::sample(&mut rng::root(9), 2, -20, 10).unwrap();
    for k in [-1, -2] {
        for i in (0..m.len()).step_by(37) {
            let qq = sys.d.cube_of_point(m.point(i), k).unwrap();
            let rr = sys.dp.cube_of_point(m.point(i), k + 1).unwrap();
            let s = close_split(&t, &qq, &rr, &b1, &b2, 0.05).unwrap();
            assert!(s.rel_err <= 1e-10);
            assert!(s.r_sep_ratio.is_finite() && s.q_sep_ratio.is_finite());
        }
    }
}

#[test]
fn weak_boundedness_cases() {
    let m = cantor(0.25, 4, 2).unwrap();
    let one = AccretiveFn::one(m.len());
    let t = cauchy_on(&m);
    let mut g = rng::root(4);
    let rects = random_rects(&m, 100, &mut g);
    assert_eq!(weak_boundedness_check(&t, &one, &one, &rects).unwrap(), 0.0);

    let b1 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 1.0, seed: 1 }, &m).unwrap();
    let b2 = build_accretive(&AccretiveSpec::RandomPhase { max_angle: 1.0, seed: 2 }, &m).unwrap();
    let v = weak_boundedness_check(&t, &b1, &b2, &rects).unwrap();
    assert!(v.is_finite() && v > 0.0);

    // Constant kernel: c (mu(E)^2 - sum w^2) / mu(E).
    let m = lebesgue_grid(1, 10).unwrap();
    let one = AccretiveFn::one(10);
    let t = DiscreteOperator::new(KernelSpec::Constant { c: 2.0, d: 1.0 }, m.clone(), None).unwrap();
    let whole = Rect { lo: vec![0.0], hi: vec![1.0] };
    let v = weak_boundedness_check(&t, &one, &one, &[whole]).unwrap();
    assert!((v - 2.0 * (1.0 - 10.0 * 0.01)).abs() < 1e-14);
    let empty = Rect { lo: vec![5.0], hi: vec![6.0] };
    assert_eq!(weak_boundedness_check(&t, &one, &one, &[empty]).unwrap(), 0.0);
}

#[test]
fn weighted_matrix_matches_apply() {
    let m = cantor(0.25, 2, 2).unwrap();
    let t = cauchy_on(&m);
    let a = t.weighted_matrix();
    let f: Vec<f64> = (0..m.len()).map(|i| (i as f64 * 0.37).sin()).collect();
    let tf = t.apply(&VectorField::scalar_real(&f));
    for i in 0..m.len() {
        let mut s = C64::new(0.0, 0.0);
        for j in 0..m.len() {
            s += a[(i, j)] * f[j] * m.weight(j).sqrt();
        }
        assert!(rel(s / m.weight(i).sqrt(), tf.values()[i]) < 1e-12);
    }
}
