use super::*;
use crate::glm::{fit_binomial, BinomialRows, NewtonOptions};
use crate::model::{cell_joint_prob, Covariate};
use crate::simulation::sample_model;
use approx::assert_relative_eq;
use proptest::prelude::*;

fn spec_1p() -> CovariateSpec {
    CovariateSpec::new(vec![Covariate::new("x", 2, false).with_first_code(0)]).unwrap()
}

fn spec_mixed() -> CovariateSpec {
    CovariateSpec::new(vec![Covariate::new("g", 3, true), Covariate::new("h", 2, false), Covariate::new("k", 3, false)])
        .unwrap()
}

fn random_records(spec: &CovariateSpec, n: usize, seed: u64) -> Vec<Record> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::random(spec, &mut rng, 0.8, false);
    for r in &mut p.response {
        for t in &mut r.theta {
            t[0] += 1.0;
        }
    }
    sample_model(spec, &p, None, n, seed + 1).unwrap().into_iter().map(|s| s.record).collect()
}

/// Posterior over (cell, u) for one stratum straight from Bayes' rule on the
/// joint probabilities, enumerating every class and keeping those whose
/// implied treatment matches.
fn brute_force(spec: &CovariateSpec, p: &ParamSet, s: &Stratum) -> Vec<(usize, ComplianceClass, f64)> {
    let mut out = Vec::new();
    for cell in 0..spec.n_cells() {
        let levels = spec.cell_levels(cell);
        if s.x.iter().zip(&levels).any(|(o, l)| o.is_some_and(|v| v != *l)) {
            continue;
        }
        for u in ComplianceClass::ALL {
            if u.treatment(s.z) != s.d {
                continue;
            }
            out.push((cell, u, cell_joint_prob(spec, p, s.pattern, cell, u, s.z, s.y).unwrap()));
        }
    }
    let norm: f64 = out.iter().map(|t| t.2).sum();
    out.iter().map(|&(c, u, v)| (c, u, s.count * v / norm)).collect()
}

#[test]
fn support_matches_monotonicity() {
    for d in 0..2u8 {
        for z in 0..2u8 {
            let want: Vec<_> = ComplianceClass::ALL.into_iter().filter(|u| u.treatment(z) == d).collect();
            let mut got = latent_support(d, z).to_vec();
            got.sort_by_key(|u| u.index());
            assert_eq!(got, want, "d={d} z={z}");
        }
    }
}

#[test]
fn treated_under_control_goes_to_always_takers() {
    let spec = spec_1p();
    let mut counts = ObservedCounts::new(&spec);
    counts.add(&Record::new(vec![Some(1)], 0, 1, 1), 7.0);
    let p = ParamSet::zeros(&spec);
    let e = e_step(&spec, &p, &counts).unwrap();
    assert_eq!(e.get(1, 1, AlwaysTaker, 0, 1), 7.0);
    assert_eq!(e.get(1, 1, Complier, 0, 1), 0.0);
    assert_eq!(e.total(), 7.0);
}

#[test]
fn symmetric_parameters_split_evenly() {
    let spec = spec_1p();
    let mut counts = ObservedCounts::new(&spec);
    counts.add(&Record::new(vec![Some(0)], 1, 1, 0), 10.0);
    counts.add(&Record::new(vec![None], 0, 0, 1), 4.0);
    let p = ParamSet::zeros(&spec);
    let e = e_step(&spec, &p, &counts).unwrap();
    assert_relative_eq!(e.get(1, 0, AlwaysTaker, 1, 0), 5.0, epsilon = 1e-12);
    assert_relative_eq!(e.get(1, 0, Complier, 1, 0), 5.0, epsilon = 1e-12);
    for cell in 0..2 {
        for u in [NeverTaker, Complier] {
            assert_relative_eq!(e.get(0, cell, u, 0, 1), 1.0, epsilon = 1e-12);
        }
    }
}

#[test]
fn e_step_matches_bayes_oracle() {
    let spec = spec_mixed();
    let data = random_records(&spec, 3000, 3);
    let counts = tabulate_observed(&data, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut p = ParamSet::random(&spec, &mut rng, 1.0, false);
    p.w = (0..spec.n_cells()).map(|c| 1.0 + c as f64).collect();
    let tot: f64 = p.w.iter().sum();
    p.w.iter_mut().for_each(|v| *v /= tot);
    let e = e_step(&spec, &p, &counts).unwrap();
    let mut want = CellExpectations::new(spec.n_patterns(), spec.n_cells(), 1);
    for s in counts.strata() {
        for (cell, u, v) in brute_force(&spec, &p, &s) {
            let cur = want.get(s.pattern, cell, u, s.z, s.y);
            want.set(s.pattern, cell, u, s.z, s.y, cur + v);
        }
    }
    let mut worst = 0.0f64;
    for pat in 0..spec.n_patterns() as u32 {
        for cell in 0..spec.n_cells() {
            for u in ComplianceClass::ALL {
                for z in 0..2 {
                    for y in 0..2 {
                        worst = worst.max((e.get(pat, cell, u, z, y) - want.get(pat, cell, u, z, y)).abs());
                    }
                }
            }
        }
    }
    assert!(worst < 1e-12, "{worst}");
}

#[test]
fn loglik_matches_per_record_enumeration() {
    let spec = spec_mixed();
    let data = random_records(&spec, 50, 5);
    let counts = tabulate_observed(&data, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = ParamSet::random(&spec, &mut rng, 1.0, false);
    let mut want = 0.0;
    for r in &data {
        let s = Stratum { pattern: r.pattern(&spec), x: r.x.clone(), d: r.d, z: r.z, y: r.y, count: 1.0 };
        let mut lik = 0.0;
        for cell in s.candidate_cells(&spec) {
            for u in ComplianceClass::ALL.into_iter().filter(|u| u.treatment(r.z) == r.d) {
                lik += cell_joint_prob(&spec, &p, s.pattern, cell, u, r.z, r.y).unwrap();
            }
        }
        want += lik.ln();
    }
    let got = observed_loglik(&spec, &p, &counts).unwrap();
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn stratum_mass_is_conserved() {
    let spec = spec_mixed();
    let data = random_records(&spec, 2000, 8);
    let counts = tabulate_observed(&data, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = ParamSet::random(&spec, &mut rng, 1.5, false);
    let e = e_step(&spec, &p, &counts).unwrap();
    for s in counts.strata() {
        let mut got = 0.0;
        for cell in s.candidate_cells(&spec) {
            for u in latent_support(s.d, s.z) {
                got += e.get(s.pattern, cell, *u, s.z, s.y);
            }
        }
        assert!((got - s.count).abs() < 1e-9, "{s:?}: {got}");
    }
    assert_relative_eq!(e.total(), data.len() as f64, epsilon = 1e-9);
}

#[test]
fn tabulation() {
    let spec = spec_mixed();
    let empty = tabulate_observed(&[], &spec).unwrap();
    assert_eq!(empty.total(), 0.0);
    assert!(empty.strata().is_empty());

    let r = Record::new(vec![Some(1), None, Some(2)], 1, 1, 0);
    let one = tabulate_observed(std::slice::from_ref(&r), &spec).unwrap();
    assert_eq!(one.count(&r.x, 1, 1, 0), 1.0);
    assert_eq!(one.pattern_total(0b10), 1.0);
    assert_eq!(one.pattern_total(spec.complete_pattern()), 0.0);
    let st = one.strata();
    assert_eq!(st.len(), 1);
    assert_eq!((st[0].x.clone(), st[0].d, st[0].z, st[0].y), (r.x.clone(), 1, 1, 0));

    let data = random_records(&spec, 1000, 4);
    let counts = tabulate_observed(&data, &spec).unwrap();
    let mut oracle: std::collections::HashMap<&Record, f64> = std::collections::HashMap::new();
    for r in &data {
        *oracle.entry(r).or_default() += 1.0;
    }
    for (r, n) in &oracle {
        assert_eq!(counts.count(&r.x, r.d, r.z, r.y), *n);
    }
    assert_eq!(counts.strata().len(), oracle.len());
    assert_eq!(counts.total(), 1000.0);

    let bad = Record::new(vec![None, Some(0), Some(0)], 0, 0, 0);
    assert!(matches!(tabulate_observed(&[bad], &spec), Err(Error::Record { index: 0, .. })));
}

#[test]
fn cell_probabilities_update_to_frequencies() {
    let spec = CovariateSpec::new(vec![Covariate::new("g", 3, true)]).unwrap();
    let mut e = CellExpectations::new(1, 3, 1);
    e.set(0, 0, Complier, 1, 1, 10.0);
    e.set(0, 1, NeverTaker, 0, 0, 30.0);
    e.set(0, 2, AlwaysTaker, 1, 0, 60.0);
    let p = m_step(&e, &spec, &FitConfig::default()).unwrap();
    assert_relative_eq!(p.w[0], 0.1, epsilon = 1e-15);
    assert_relative_eq!(p.w[1], 0.3, epsilon = 1e-15);
    assert_relative_eq!(p.w[2], 0.6, epsilon = 1e-15);
}

#[test]
fn balanced_classes_give_zero_compliance_coefficients() {
    let spec = CovariateSpec::new(vec![Covariate::new("g", 2, true)]).unwrap();
    let mut e = CellExpectations::new(1, 2, 1);
    for cell in 0..2 {
        for u in ComplianceClass::ALL {
            e.set(0, cell, u, 1, 1, 5.0);
            e.set(0, cell, u, 0, 0, 5.0);
        }
    }
    let p = m_step(&e, &spec, &FitConfig::default()).unwrap();
    assert!(p.delta_a.iter().chain(&p.delta_c).all(|v| v.abs() < 1e-10));
}

#[test]
fn instrument_model_matches_direct_logistic_fit_without_missingness() {
    let spec = CovariateSpec::new(vec![Covariate::new("g", 3, true), Covariate::new("h", 2, true)]).unwrap();
    let data = random_records(&spec, 3000, 21);
    let cfg = FitConfig { n_restarts: 1, ..Default::default() };
    let fit = fit_em(&data, &spec, &cfg).unwrap();
    let mut rows = BinomialRows::new(spec.dim());
    for r in &data {
        let levels: Vec<u16> = r.x.iter().map(|v| v.unwrap()).collect();
        let x = spec.features(&levels);
        rows.push(&x, 0.0, r.z as f64, 1.0 - r.z as f64);
    }
    let direct = fit_binomial(&rows, &vec![0.0; spec.dim()], NewtonOptions::default());
    for (a, b) in fit.params.alpha.iter().zip(&direct.coef) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn single_cell_fit_recovers_frequencies() {
    // One fully observed covariate with records in one level only.
    let spec = CovariateSpec::new(vec![Covariate::new("g", 2, true)]).unwrap();
    let mut data = Vec::new();
    for i in 0..40 {
        data.push(Record::new(vec![Some(0)], 1, (i % 2) as u8, (i % 3 == 0) as u8));
        data.push(Record::new(vec![Some(0)], 0, (i % 4 == 0) as u8, (i % 5 == 0) as u8));
    }
    let fit = fit_em(&data, &spec, &FitConfig::default()).unwrap();
    assert_relative_eq!(fit.params.w[0], 1.0, epsilon = 1e-12);
    assert!(fit.params.w[1].abs() < 1e-12);
    assert!(fit.loglik().is_finite());
}

#[test]
fn mle_beats_truth() {
    let spec = spec_mixed();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut truth = ParamSet::random(&spec, &mut rng, 0.6, false);
    for r in &mut truth.response {
        for t in &mut r.theta {
            t[0] += 1.0;
        }
    }
    let data: Vec<Record> =
        sample_model(&spec, &truth, None, 4000, 32).unwrap().into_iter().map(|s| s.record).collect();
    let counts = tabulate_observed(&data, &spec).unwrap();
    let fit = fit_em(&data, &spec, &FitConfig::default()).unwrap();
    let ll_truth = observed_loglik(&spec, &truth, &counts).unwrap();
    assert!(fit.loglik() >= ll_truth - 1e-6, "{} < {}", fit.loglik(), ll_truth);
    assert!(fit.converged);
}

#[test]
fn empty_arm_is_rejected() {
    let spec = spec_1p();
    let data = vec![Record::new(vec![Some(0)], 1, 1, 0), Record::new(vec![Some(1)], 1, 0, 1)];
    assert!(fit_em(&data, &spec, &FitConfig::default()).is_err());
    assert!(fit_em(&[], &spec, &FitConfig::default()).is_err());
}

#[test]
fn fit_is_reproducible() {
    let spec = spec_mixed();
    let data = random_records(&spec, 800, 40);
    let cfg = FitConfig { n_restarts: 2, init_seed: 9, ..Default::default() };
    let a = fit_em(&data, &spec, &cfg).unwrap();
    let b = fit_em(&data, &spec, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.loglik_trace, b.loglik_trace);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn em_is_monotone(seed in 0u64..10_000, levels in 2u16..4, full in proptest::bool::ANY) {
        let mut covs = Vec::new();
        if full {
            covs.push(Covariate::new("f", levels, true));
        }
        covs.push(Covariate::new("m", 2, false));
        let spec = CovariateSpec::new(covs).unwrap();
        let data = random_records(&spec, 300, seed);
        let cfg = FitConfig { n_restarts: 1, max_em_iters: 40, init_seed: seed, ..Default::default() };
        let fit = match fit_em(&data, &spec, &cfg) {
            Ok(f) => f,
            Err(Error::Invalid(_)) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        for w in fit.loglik_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-9 * (1.0 + w[0].abs()), "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn e_step_conserves_mass_for_random_parameters(seed in 0u64..10_000) {
        let spec = spec_mixed();
        let data = random_records(&spec, 200, seed);
        let counts = tabulate_observed(&data, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let p = ParamSet::random(&spec, &mut rng, 2.0, true);
        let e = EmModel::new(&spec, MissingnessModel::ComplierInteraction).e_step(&p, &counts).unwrap();
        prop_assert!((e.total() - 200.0).abs() < 1e-9);
    }
}
