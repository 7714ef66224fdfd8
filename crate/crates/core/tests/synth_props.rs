use resadapt::synth::{generate, oracle_accuracy, SynthConfig};
use resadapt::Temperature;

/// Standard normal CDF via the Abramowitz-Stegun 7.1.26 erf approximation
/// (absolute error below 1.5e-7).
fn phi(x: f64) -> f64 {
    let z = x.abs() / 2f64.sqrt();
    let t = 1.0 / (1.0 + 0.3275911 * z);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-z * z).exp();
    if x >= 0.0 {
        0.5 * (1.0 + erf)
    } else {
        0.5 * (1.0 - erf)
    }
}

#[test]
fn moderate_seed_7_has_headroom() {
    let p = generate(&SynthConfig::moderate(7)).unwrap();
    let tau = Temperature::CLIP;
    let k = p.config.num_classes as f64;
    // Regression values: correct predictions out of 2500 per domain.
    let pinned = [1524usize, 1411, 1817];
    for (d, &correct) in pinned.iter().enumerate() {
        let acc = p.zero_shot_accuracy(d, tau).unwrap();
        assert!(acc > 1.0 / k && acc < 1.0, "domain {d}: {acc}");
        assert_eq!((acc * 2500.0).round() as usize, correct, "domain {d}");
    }
}

#[test]
fn oracle_beats_noisy_anchors() {
    for seed in 0..10 {
        let cfg = SynthConfig {
            noise: 0.1,
            anchor_noise: 0.3,
            seed,
            ..SynthConfig::default()
        };
        let p = generate(&cfg).unwrap();
        for d in 0..cfg.num_domains {
            let zs = p.zero_shot_accuracy(d, Temperature::CLIP).unwrap();
            let oracle = oracle_accuracy(&p, d).unwrap();
            assert!(oracle >= zs, "seed {seed} domain {d}: oracle {oracle} < zero-shot {zs}");
        }
    }
}

#[test]
fn two_class_accuracy_matches_closed_form() {
    // Two prototypes, no shift or anchor noise. With per-coordinate noise
    // sigma the nearest-prototype rule is correct iff the noise projected on
    // p1 - p2 does not cross the bisector: P = Phi(|p1 - p2| / (2 sigma)).
    let cfg = SynthConfig {
        num_classes: 2,
        dim: 32,
        num_domains: 1,
        samples_per_class_per_domain: 5000,
        class_separation: 20.0,
        domain_shift: 0.0,
        noise: 5.0,
        anchor_noise: 0.0,
        seed: 2024,
    };
    let p = generate(&cfg).unwrap();
    let protos = &p.true_prototypes[0];
    let gap: f64 = protos
        .row(0)
        .iter()
        .zip(protos.row(1))
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(gap > 1.99, "prototypes should be nearly antipodal, gap {gap}");
    let sigma = cfg.noise / (cfg.dim as f64).sqrt();
    let expected = phi(gap / (2.0 * sigma));
    let measured = oracle_accuracy(&p, 0).unwrap();
    assert!(
        (measured - expected).abs() < 0.02,
        "measured {measured}, closed form {expected}"
    );
    // Anchors are exact here, so zero-shot is the same classifier.
    assert_eq!(p.zero_shot_accuracy(0, Temperature::CLIP).unwrap(), measured);
}

#[test]
fn more_noise_does_not_help() {
    let levels = [0.2, 0.4, 0.8];
    let stats: Vec<(f64, f64)> = levels
        .iter()
        .map(|&noise| {
            let accs: Vec<f64> = (0..12)
                .map(|seed| {
                    let p = generate(&SynthConfig {
                        noise,
                        seed,
                        ..SynthConfig::default()
                    })
                    .unwrap();
                    (0..3)
                        .map(|d| p.zero_shot_accuracy(d, Temperature::CLIP).unwrap())
                        .sum::<f64>()
                        / 3.0
                })
                .collect();
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        })
        .collect();
    for w in stats.windows(2) {
        let ((lo_mean, lo_se), (hi_mean, hi_se)) = (w[0], w[1]);
        assert!(
            hi_mean <= lo_mean + lo_se.max(hi_se),
            "noise increase raised accuracy: {stats:?}"
        );
    }
}

#[test]
fn identical_seeds_identical_problems() {
    let cfg = SynthConfig::moderate(3);
    let a = generate(&cfg).unwrap();
    let b = generate(&cfg).unwrap();
    assert_eq!(a.anchors, b.anchors);
    assert_eq!(a.domains.banks(), b.domains.banks());
    assert_eq!(a.labels, b.labels);
    let c = generate(&SynthConfig::moderate(4)).unwrap();
    assert_ne!(a.domains.banks(), c.domains.banks());
}
