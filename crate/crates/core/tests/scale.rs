use aic_core::design::{generate_all, Method, StimulusRef, Triplet};
use aic_core::scale::likelihood::{negative_log_likelihood, nll_theta, pack, Side};
use aic_core::scale::{
    bootstrap_source, fit_source, BootstrapConfig, CodecParams, FitConfig, LikelihoodConfig, Resampling, SourceData,
};
use aic_core::seed::rng_from;
use aic_core::store::{Choice, ResponseRecord};
use aic_core::synthetic::{simulate_records, synthetic_manifest, GroundTruth, Observer};
use rand::Rng;

mod common;
use common::{oracle_nll, params, phi, record, LADDER};

#[test]
fn likelihood_matches_per_response_oracle() {
    let m = synthetic_manifest(1, 2, &[1.8, 1.0, 0.4]);
    let mut rng = rng_from(7, "toy");
    for case in 0..40 {
        let triplets = generate_all(&m, if case % 2 == 0 { Method::Btc } else { Method::Ptc }, 2, case).unwrap();
        let n = 1 + case as usize % 5;
        let records: Vec<ResponseRecord> = (0..n)
            .map(|_| {
                let t = &triplets[rng.gen_range(0..triplets.len())];
                let c = [Choice::Left, Choice::Right, Choice::NotSure, Choice::Skip][rng.gen_range(0..4)];
                record(t, c)
            })
            .collect();
        let ps = vec![
            params(rng.gen_range(0.5..4.0), rng.gen_range(0.3..2.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..0.5)),
            params(rng.gen_range(0.5..4.0), rng.gen_range(0.3..2.0), rng.gen_range(0.5..3.0), rng.gen_range(0.0..0.5)),
        ];
        let data = SourceData::from_records(&m, "S1", &records).unwrap();
        let ours = negative_log_likelihood(&ps, &data, &LikelihoodConfig::default());
        let oracle = oracle_nll(&ps, &m, &records);
        let rel = (ours - oracle).abs() / oracle.abs().max(1e-300);
        assert!(rel < 1e-10 || (ours - oracle).abs() < 1e-12, "case {case}: {ours} vs {oracle}");
        let via_theta = nll_theta(&pack(&ps), &data, &LikelihoodConfig::default(), None);
        if ps.iter().all(|p| p.gamma2 > 1e-6) {
            assert!((via_theta - ours).abs() <= 1e-9 * ours.abs().max(1.0));
        }
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let m = synthetic_manifest(1, 4, &LADDER);
    let truth = GroundTruth::spread(&m);
    let mut rng = rng_from(11, "grad");
    let mut triplets = generate_all(&m, Method::Btc, 24, 1).unwrap();
    triplets.extend(generate_all(&m, Method::Ptc, 24, 1).unwrap());
    let records = simulate_records(&m, &truth, &triplets, 3, Observer::model(), &mut rng).unwrap();
    let data = SourceData::from_records(&m, "S1", &records).unwrap();
    let cfg = LikelihoodConfig::default();
    for point in 0..20 {
        let theta: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = vec![0.0; 16];
        nll_theta(&theta, &data, &cfg, Some(&mut g));
        for j in 0..16 {
            let h = 1e-6 * theta[j].abs().max(1.0);
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fd = (nll_theta(&tp, &data, &cfg, None) - nll_theta(&tm, &data, &cfg, None)) / (2.0 * h);
            let scale = g[j].abs().max(fd.abs()).max(1e-3);
            assert!((g[j] - fd).abs() / scale < 1e-4, "point {point} param {j}: {} vs {fd}", g[j]);
        }
    }
}

#[test]
fn source_side_has_zero_distortion() {
    let m = synthetic_manifest(1, 1, &[1.0, 0.5]);
    let t = Triplet::new(Method::Ptc, "S1", StimulusRef::Source, StimulusRef::coded("c1", 1));
    let data = SourceData::from_records(&m, "S1", &[record(&t, Choice::Right)]).unwrap();
    assert_eq!(data.observations[0].left, Side::Source);
    let p = params(2.0, 1.0, 1.0, 0.0);
    let d = 2.0 * (-1.0f64).exp();
    let expected = -phi(d).ln();
    let got = negative_log_likelihood(&[p], &data, &LikelihoodConfig::default());
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

fn max_curve_error(fit: &CodecParams, truth: &CodecParams) -> f64 {
    (0..=100)
        .map(|i| {
            let r = 0.3 + (2.0 - 0.3) * i as f64 / 100.0;
            (fit.rd_distortion(r) - truth.rd_distortion(r)).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn fit_recovers_generating_curves() {
    let m = synthetic_manifest(1, 4, &LADDER);
    let truth = GroundTruth::spread(&m);
    let mut triplets = generate_all(&m, Method::Btc, 24, 3).unwrap();
    triplets.extend(generate_all(&m, Method::Ptc, 24, 3).unwrap());
    let mut rng = rng_from(5, "recovery");
    let records = simulate_records(&m, &truth, &triplets, 200, Observer::model(), &mut rng).unwrap();
    let data = SourceData::from_records(&m, "S1", &records).unwrap();
    let model = fit_source(&data, &FitConfig::default()).unwrap();
    assert!(model.diagnostics.converged);
    assert!(model.diagnostics.nll < model.diagnostics.null_nll);
    for (c, fitted) in model.codecs.iter().enumerate() {
        let err = max_curve_error(&fitted.params, &truth.sources["S1"][c]);
        assert!(err < 0.1, "codec {}: max error {err}", fitted.codec_id);
    }
}

#[test]
fn fit_rejects_codec_without_responses() {
    let m = synthetic_manifest(1, 2, &LADDER);
    let t = Triplet::new(Method::Ptc, "S1", StimulusRef::Source, StimulusRef::coded("c1", 1));
    let data = SourceData::from_records(&m, "S1", &[record(&t, Choice::Right)]).unwrap();
    let err = fit_source(&data, &FitConfig::default()).unwrap_err();
    assert!(err.to_string().contains("c2"), "{err}");
}

#[test]
fn bootstrap_band_contains_estimate_and_identity_collapses() {
    let m = synthetic_manifest(1, 4, &LADDER);
    let truth = GroundTruth::spread(&m);
    let mut triplets = generate_all(&m, Method::Btc, 24, 3).unwrap();
    triplets.extend(generate_all(&m, Method::Ptc, 24, 3).unwrap());
    let mut rng = rng_from(9, "boot");
    let records = simulate_records(&m, &truth, &triplets, 24, Observer::model(), &mut rng).unwrap();
    let data = SourceData::from_records(&m, "S1", &records).unwrap();
    let fc = FitConfig::default();
    let point = fit_source(&data, &fc).unwrap();

    let cfg = BootstrapConfig {
        replicates: 60,
        seed: 1,
        ..BootstrapConfig::default()
    };
    let res = bootstrap_source(&data, &point, &fc, &cfg).unwrap();
    assert_eq!(res.bands.len(), 4);
    for b in &res.bands {
        assert!(b.contains_estimate());
        assert_eq!(b.bitrate.len(), 100);
        let w = b.width_at(1.0).expect("curve crosses 1 JND");
        assert!(w > 0.0);
    }
    let again = bootstrap_source(&data, &point, &fc, &cfg).unwrap();
    assert_eq!(res.bands, again.bands);

    let identity = BootstrapConfig {
        replicates: 2,
        resampling: Resampling::Identity,
        ..cfg
    };
    let res = bootstrap_source(&data, &point, &fc, &identity).unwrap();
    for b in &res.bands {
        assert!(b.width_at(1.0).unwrap() <= 1e-6);
    }
}

#[test]
fn oracle_cdf_reference_values() {
    // mpmath at 30 digits
    assert!((phi(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    assert!((phi(-1.96) / 0.024_997_895_148_220_435 - 1.0).abs() < 1e-14);
    assert!((phi(-10.0) / 7.619_853_024_160_527e-24 - 1.0).abs() < 1e-12);
    assert!((phi(4.0) - 0.999_968_328_758_166_9).abs() < 1e-15);
}
