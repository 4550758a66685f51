mod common;

use common::*;
use crosscorpus::losses::{
    decouple_loss, median_bandwidth, mk_mmd, scl_loss, Bandwidth, LossConfig, MmdConfig, PrototypeSet,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;

fn set(pe_s: &Array1<f64>, pc_s: &Array1<f64>, pe_t: &Array1<f64>, pc_t: &Array1<f64>) -> PrototypeSet {
    PrototypeSet {
        emotion_source: pe_s.clone(),
        corpus_source: pc_s.clone(),
        emotion_target: pe_t.clone(),
        corpus_target: pc_t.clone(),
    }
}

#[test]
fn decouple_on_identical_prototypes_is_ln2() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let v = unit_rows(&normal(&mut r, 1, 128)).row(0).to_owned();
        let got = decouple_loss(&set(&v, &v, &v, &v), 1.0);
        assert!((got - 2f64.ln()).abs() < 1e-6, "{got}");
    }
}

#[test]
fn decouple_on_antipodal_prototypes() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let v = unit_rows(&normal(&mut r, 1, 128)).row(0).to_owned();
        let w = -&v;
        let got = decouple_loss(&set(&v, &w, &v, &w), 1.0);
        assert!((got + (2.0 - 2f64.ln())).abs() < 1e-6, "{got}");
    }
}

#[test]
fn decouple_matches_oracle() {
    for seed in 0..50 {
        let mut r = rng(seed);
        let p = unit_rows(&normal(&mut r, 4, 16));
        let tau = [1e-2, 0.1, 1.0][seed as usize % 3];
        let got = decouple_loss(&set(&p.row(0).to_owned(), &p.row(1).to_owned(), &p.row(2).to_owned(), &p.row(3).to_owned()), tau);
        let want = oracle_decouple(&p.row(0).to_vec(), &p.row(1).to_vec(), &p.row(2).to_vec(), &p.row(3).to_vec(), tau);
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn scl_matches_brute_force() {
    for seed in 0..200 {
        let mut r = rng(seed);
        let n = r.random_range(2..=8);
        let d = r.random_range(2..=16);
        let z = unit_rows(&normal(&mut r, n, d));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..3)).collect();
        let tau = [1e-2, 0.07, 0.5, 1.0][seed as usize % 4];
        let got = scl_loss(z.view(), &labels, tau).unwrap();
        let want = oracle_scl(&z, &labels, tau);
        assert!((got - want).abs() <= 1e-8, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn mmd_matches_brute_force() {
    let lc = LossConfig::default();
    for seed in 0..200 {
        let mut r = rng(seed);
        let d = r.random_range(1..=8);
        let (ns, nt) = (r.random_range(1..=8), r.random_range(1..=8));
        let x = normal(&mut r, ns, d);
        let y = normal(&mut r, nt, d) * 1.5 + 0.3;
        if ns + nt >= 2 {
            let med = median_bandwidth(x.view(), y.view());
            assert!((med - oracle_median_sq_dist(&x, &y)).abs() <= 1e-12 * med.max(1.0));
        }
        let sigma2 = r.random_range(0.1..5.0);
        let cfg = lc.mmd().with_bandwidth(Bandwidth::Fixed(sigma2));
        let got = mk_mmd(x.view(), y.view(), &cfg).unwrap();
        let want = oracle_mmd(&x, &y, sigma2, &lc.mmd_multipliers, &lc.mmd_weights);
        assert!((got - want).abs() <= 1e-10, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn mmd_vanishes_on_identical_batches() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let x = normal(&mut r, 8, 16);
        for cfg in [LossConfig::default().mmd(), MmdConfig::single(0.7)] {
            let v = mk_mmd(x.view(), x.view(), &cfg).unwrap();
            assert!(v.abs() <= 1e-10, "{v}");
        }
    }
}

/// MMD between `x` and `x + k·u` for every offset `k`.
fn translation_curve(seed: u64, offsets: &[f64]) -> Vec<f64> {
    let mut r = rng(seed);
    let x = normal(&mut r, 8, 16);
    let u = unit_rows(&normal(&mut r, 1, 16)).row(0).to_owned();
    let cfg = LossConfig::default().mmd().with_bandwidth(Bandwidth::Fixed(median_bandwidth(x.view(), x.view())));
    offsets.iter().map(|&k| mk_mmd(x.view(), (&x + &(&u * k)).view(), &cfg).unwrap()).collect()
}

#[test]
fn mmd_grows_with_translation() {
    let offsets = [0.0, 0.25, 0.5, 1.0, 2.0, 4.0];
    for seed in 0..20 {
        let c = translation_curve(seed, &offsets);
        assert!(c[0].abs() < 1e-10);
        assert!(c.windows(2).all(|w| w[1] > w[0]), "{c:?}");
    }
}

fn orthogonal(seed: u64, d: usize) -> Array2<f64> {
    let mut r = rng(seed);
    let a = normal(&mut r, d, d);
    let mut q = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let mut v = a.row(i).to_owned();
        for j in 0..i {
            let p = v.dot(&q.row(j));
            v -= &(&q.row(j) * p);
        }
        let n = v.dot(&v).sqrt();
        q.row_mut(i).assign(&(v / n));
    }
    q
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mmd_is_non_negative_and_symmetric(seed in 0u64..10_000, ns in 1usize..8, nt in 1usize..8, shift in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = normal(&mut r, ns, 5);
        let y = normal(&mut r, nt, 5) + shift;
        let cfg = LossConfig::default().mmd();
        let a = mk_mmd(x.view(), y.view(), &cfg).unwrap();
        let b = mk_mmd(y.view(), x.view(), &cfg).unwrap();
        prop_assert!(a >= -1e-10);
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn scl_is_permutation_invariant(seed in 0u64..10_000, n in 2usize..10) {
        let mut r = rng(seed);
        let z = unit_rows(&normal(&mut r, n, 6));
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let zp = z.select(ndarray::Axis(0), &perm);
        let lp: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let a = scl_loss(z.view(), &labels, 0.1).unwrap();
        let b = scl_loss(zp.view(), &lp, 0.1).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn decouple_is_rotation_invariant(seed in 0u64..10_000, tau in prop::sample::select(vec![1e-2, 0.1, 1.0])) {
        let mut r = rng(seed);
        let p = unit_rows(&normal(&mut r, 4, 8));
        let q = orthogonal(seed + 1, 8);
        let rp = p.dot(&q.t());
        let row = |m: &Array2<f64>, i: usize| m.row(i).to_owned();
        let a = decouple_loss(&set(&row(&p, 0), &row(&p, 1), &row(&p, 2), &row(&p, 3)), tau);
        let b = decouple_loss(&set(&row(&rp, 0), &row(&rp, 1), &row(&rp, 2), &row(&rp, 3)), tau);
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        prop_assert!(a.is_finite());
    }
}
