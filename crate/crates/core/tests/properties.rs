use proptest::prelude::*;

use qnd_core::estimator::{classify, OutcomeKind};
use qnd_core::griddesign::{lambert_w0, psi_d};
use qnd_core::linalg::{c, hermiticity_defect, min_eigenvalue, trace, CMat};
use qnd_core::model::{e_lc, gamma_entries, validate_qnd, QndModel};
use qnd_core::reduced::{FilterBank, FilterParams};
use qnd_core::sme::{generator_apply, step, BlockWeight, OnBlocks};

fn model_from(ls: &[f64], cs: &[f64], theta: f64) -> QndModel {
    QndModel::new(vec![1; ls.len()])
        .unwrap()
        .with_diffusive(ls, 1.0, 0.5)
        .with_jump(cs, 1.0, theta)
}

fn state(n: usize, re: &[f64], im: &[f64]) -> CMat {
    let g = CMat::from_fn(n, n, |r, k| c(re[r * n + k], im[r * n + k]));
    let rho = &g * g.adjoint() + CMat::identity(n, n) * c(1e-3, 0.0);
    let tr = rho.trace();
    rho / tr
}

fn simplex(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gamma_is_monotone_in_rates(theta in 0.0..2.0f64, z in 0.0..1.0f64, iota in 0.0..3.0f64, cj in -3.0..3.0f64, d in 0.0..1.0f64) {
        let cc = vec![vec![c(cj, 0.5)]];
        let base = gamma_entries(&[theta], &[vec![z]], &[iota], &cc, 1)[0][0];
        prop_assert!(gamma_entries(&[theta + d], &[vec![z]], &[iota], &cc, 1)[0][0] >= base);
        prop_assert!(gamma_entries(&[theta], &[vec![z + d]], &[iota], &cc, 1)[0][0] >= base);
        prop_assert!(gamma_entries(&[theta], &[vec![z]], &[iota + d], &cc, 1)[0][0] >= base);
    }

    #[test]
    fn separation_constant_ignores_block_order(ls in prop::collection::vec(-2.0..2.0f64, 3), cs in prop::collection::vec(0.5..3.0f64, 3), rot in 0usize..3) {
        let m = model_from(&ls, &cs, 0.2);
        let mut lp = ls.clone();
        let mut cp = cs.clone();
        lp.rotate_left(rot);
        cp.rotate_left(rot);
        let p = model_from(&lp, &cp, 0.2);
        prop_assert!((e_lc(&m) - e_lc(&p)).abs() <= 1e-12 * e_lc(&m).max(1.0));
    }

    #[test]
    fn separation_constant_positive_iff_distinguishable(
        ls in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 1.0]), 2..5),
        cs_seed in prop::collection::vec(prop::sample::select(vec![1.0, 2.0]), 4),
        theta in prop::sample::select(vec![0.0, 0.5]),
    ) {
        let cs = &cs_seed[..ls.len()];
        let m = model_from(&ls, cs, theta);
        let rep = validate_qnd(&m).unwrap();
        prop_assert_eq!(e_lc(&m) > 0.0, rep.indistinguishable_pairs(&m).is_empty());
    }

    #[test]
    fn filter_stays_on_simplex_and_keeps_zeros(
        raw in prop::collection::vec(0.0..1.0f64, 3),
        zero in 0usize..3,
        dy in -0.3..0.3f64,
        jump in 0u32..2,
        g in 0.2..3.0f64,
        th in 0.05..1.0f64,
    ) {
        let m = model_from(&[1.0, -0.5, 0.2], &[1.0, 2.0, 0.5], 0.3);
        let p = FilterParams::new(&m, vec![0.5], vec![g], vec![1.0], vec![th], vec![vec![1.0]]).unwrap();
        let bank = FilterBank::new(&m, &[p]).unwrap();
        let mut raw = raw;
        raw[zero] = 0.0;
        raw[(zero + 1) % 3] += 0.1;
        let mut q = simplex(&raw);
        let mut clamped = false;
        for _ in 0..20 {
            bank.advance(&mut q, &mut clamped, &[dy], &[jump], 1e-2).unwrap();
        }
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(q.iter().all(|&x| x >= 0.0));
        prop_assert_eq!(q[zero], 0.0);
    }

    #[test]
    fn bank_rows_match_single_filters(
        gs in prop::collection::vec(0.2..3.0f64, 3),
        dys in prop::collection::vec(-0.2..0.2f64, 10),
        jumps in prop::collection::vec(0u32..2, 10),
        raw in prop::collection::vec(0.05..1.0f64, 2),
    ) {
        let m = model_from(&[1.0, -1.0], &[1.0, 2.0], 0.3);
        let params: Vec<FilterParams> = gs
            .iter()
            .map(|&g| FilterParams::new(&m, vec![0.5], vec![g], vec![1.0], vec![0.3], vec![vec![g]]).unwrap())
            .collect();
        let q0 = simplex(&raw);
        let bank = FilterBank::new(&m, &params).unwrap();
        let mut joint: Vec<f64> = (0..3).flat_map(|_| q0.iter().map(|x| x / 3.0)).collect();
        let mut cl = false;
        let mut singles: Vec<Vec<f64>> = vec![q0.clone(); 3];
        let banks: Vec<FilterBank> = params.iter().map(|p| FilterBank::new(&m, std::slice::from_ref(p)).unwrap()).collect();
        for (dy, f) in dys.iter().zip(&jumps) {
            bank.advance(&mut joint, &mut cl, &[*dy], &[*f], 1e-2).unwrap();
            for (b, s) in banks.iter().zip(singles.iter_mut()) {
                b.advance(s, &mut cl, &[*dy], &[*f], 1e-2).unwrap();
            }
        }
        for n in 0..3 {
            let row = &joint[2 * n..2 * n + 2];
            let pi: f64 = row.iter().sum();
            for j in 0..2 {
                prop_assert!((row[j] / pi - singles[n][j]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn classify_commutes_with_permutation(raw in prop::collection::vec(0.0..1.0f64, 4), hot in 0usize..4, rot in 0usize..4, w in 0.0..1.0f64) {
        // A dominant entry gives a single convergence; reversal keeps adjacency.
        let mut raw = raw;
        raw[hot] += 400.0 * w;
        let pi = simplex(&raw);
        let o = classify(&pi, 0.99, 0.05);
        let mut rotated = pi.clone();
        rotated.rotate_right(rot);
        let or = classify(&rotated, 0.99, 0.05);
        let mut rev = pi.clone();
        rev.reverse();
        let ov = classify(&rev, 0.99, 0.05);
        match o {
            OutcomeKind::SingleConvergence { n } => {
                prop_assert_eq!(or, OutcomeKind::SingleConvergence { n: (n + rot) % 4 });
                prop_assert_eq!(ov, OutcomeKind::SingleConvergence { n: 3 - n });
            }
            OutcomeKind::Oscillatory { n, m } => prop_assert_eq!(ov, OutcomeKind::Oscillatory { n: 3 - m, m: 3 - n }),
            OutcomeKind::InsufficientData => prop_assert_eq!(ov, OutcomeKind::InsufficientData),
        }
    }

    #[test]
    fn sme_step_returns_density_matrix(
        re in prop::collection::vec(-1.0..1.0f64, 9),
        im in prop::collection::vec(-1.0..1.0f64, 9),
        dw in -0.2..0.2f64,
        jump in 0u32..2,
    ) {
        let m = QndModel::new(vec![2, 1]).unwrap()
            .with_hamiltonian(vec![CMat::from_row_slice(2, 2, &[c(0.0, 0.0), c(0.7, 0.0), c(0.7, 0.0), c(0.0, 0.0)]), CMat::zeros(1, 1)])
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5)
            .with_jump(&[1.0, 2.0], 1.0, 0.3);
        let rho = state(3, &re, &im);
        let next = step(&m, &rho, &[dw], &[jump], 1e-3).unwrap();
        prop_assert!(hermiticity_defect(&next) <= 1e-12);
        prop_assert!((trace(&next).re - 1.0).abs() <= 1e-12);
        prop_assert!(min_eigenvalue(&next) >= -1e-12);
    }

    #[test]
    fn block_weights_have_zero_drift(re in prop::collection::vec(-1.0..1.0f64, 9), im in prop::collection::vec(-1.0..1.0f64, 9)) {
        let m = QndModel::new(vec![2, 1]).unwrap()
            .with_hamiltonian(vec![CMat::from_row_slice(2, 2, &[c(0.3, 0.0), c(0.7, 0.1), c(0.7, -0.1), c(0.0, 0.0)]), CMat::zeros(1, 1)])
            .with_diffusive(&[1.0, -1.0], 1.0, 0.5)
            .with_jump(&[1.0, 2.0], 1.0, 0.3);
        let rho = state(3, &re, &im);
        for j in 0..2 {
            let v = OnBlocks { blocks: &m.blocks, f: BlockWeight(j) };
            prop_assert!(generator_apply(&m, &v, &rho).unwrap().abs() <= 1e-10);
        }
    }

    #[test]
    fn lambert_inverts(x in -0.36787944117144233..1e6f64) {
        let w = lambert_w0(x).unwrap();
        prop_assert!((w * w.exp() - x).abs() <= 1e-13 * x.abs().max(1e-300));
    }

    #[test]
    fn psi_d_is_monotone_in_kappa(a in 0.3..0.99f64, d in -3i32..4, k1 in 0.0..3.0f64, k2 in 0.0..3.0f64) {
        let b = 1.0 / a;
        let (lo, hi) = if k1 < k2 { (k1, k2) } else { (k2, k1) };
        if d > 0 {
            prop_assert!(psi_d(a, b, d, lo) <= psi_d(a, b, d, hi));
        } else {
            prop_assert!(psi_d(a, b, d, lo) >= psi_d(a, b, d, hi));
        }
    }
}
