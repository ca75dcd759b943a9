//! End-to-end training behaviour on small simulated problems.

use fhmm_core::eval::{align_chains, infer_svi, validation_params};
use fhmm_core::model::{exact_loglik, exact_marginals, simulate, FhmmParams, TransitionMatrix};
use fhmm_core::numerics::CholFactor;
use fhmm_core::smf::{smf_elbo, smf_em_fit, SmfConfig};
use fhmm_core::svi::{train, TrainConfig, TrainInit};

fn single_chain() -> FhmmParams {
    FhmmParams::new(
        1,
        1,
        vec![2.0, -1.0],
        CholFactor::new(1, vec![0.5]).unwrap(),
        vec![TransitionMatrix::from_switch(0.1, 0.15).unwrap()],
    )
    .unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn smoothed_elbo_trace_rises_across_seeds() {
    let truth = single_chain();
    let window = 50;
    let mut rising = 0;
    for seed in 0..20u64 {
        let (_, y) = simulate(&truth, 200, 100 + seed).unwrap();
        let cfg = TrainConfig {
            chains: 1,
            iterations: 1000,
            learning_rate: 1e-2,
            log_every: 1,
            seed,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &y, TrainInit::default()).unwrap();
        let elbo: Vec<f64> = out.trace.records.iter().map(|r| r.elbo).collect();
        assert_eq!(elbo.len(), 1000);
        if mean(&elbo[elbo.len() - window..]) > mean(&elbo[..window]) {
            rising += 1;
        }
    }
    assert!(rising >= 19, "smoothed ELBO rose in only {rising}/20 seeds");
}

#[test]
fn same_seed_same_result() {
    let (_, y) = simulate(&validation_params(), 300, 8).unwrap();
    let cfg = TrainConfig {
        iterations: 200,
        seed: 4,
        log_every: 10,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &y, TrainInit::default()).unwrap();
    let b = train(&cfg, &y, TrainInit::default()).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.net, b.net);
    let strip = |t: &fhmm_core::svi::TrainTrace| -> Vec<(usize, u64, u64, u64)> {
        t.records
            .iter()
            .map(|r| {
                (
                    r.iteration,
                    r.elbo.to_bits(),
                    r.grad_norm_gamma.to_bits(),
                    r.grad_norm_omega.to_bits(),
                )
            })
            .collect()
    };
    assert_eq!(strip(&a.trace), strip(&b.trace));
}

#[test]
fn smf_em_raises_likelihood_and_bounds_it() {
    let truth = validation_params();
    let (_, y) = simulate(&truth, 400, 21).unwrap();
    let mut best: Option<(f64, FhmmParams)> = None;
    // EM has local optima; a few restarts, keeping the best bound.
    for init_seed in 3..6 {
        let init = fhmm_core::model::init_params(&y, 2, init_seed).unwrap();
        let fit = smf_em_fit(&init, &y, &SmfConfig::default()).unwrap();
        let before = exact_loglik(&init, &y).unwrap();
        let after = exact_loglik(&fit.params, &y).unwrap();
        assert!(after > before);
        let bound = smf_elbo(&fit.params, &y, &fit.state).unwrap();
        assert!(bound <= after + 1e-8);
        for w in fit.trace.windows(2) {
            assert!(w[1].elbo >= w[0].elbo - 1e-6 * w[0].elbo.abs());
        }
        if best.as_ref().is_none_or(|(b, _)| bound > *b) {
            best = Some((bound, fit.params));
        }
    }
    let (_, fitted) = best.unwrap();
    let per_step = |p: &FhmmParams| exact_loglik(p, &y).unwrap() / y.len() as f64;
    assert!(per_step(&fitted) >= per_step(&truth) - 0.02);
    let al = align_chains(&truth, &fitted).unwrap();
    for (a, b) in al.aligned.w().iter().zip(truth.w()) {
        assert!((a - b).abs() < 0.3, "{a} vs {b}");
    }
}

#[test]
fn recognition_marginals_track_exact_posterior() {
    // Generative parameters fixed at the truth: only the networks learn.
    let truth = validation_params();
    let (_, y) = simulate(&truth, 1000, 31).unwrap();
    let cfg = TrainConfig {
        iterations: 6000,
        learning_rate: 3e-3,
        train_gamma: false,
        log_every: 1000,
        seed: 2,
        ..TrainConfig::default()
    };
    let init = TrainInit {
        params: Some(truth.clone()),
        net: None,
    };
    let out = train(&cfg, &y, init).unwrap();
    assert_eq!(out.params, truth);
    let approx = infer_svi(&truth, &out.net, &y).unwrap();
    let exact = exact_marginals(&truth, &y).unwrap();
    let h = cfg.dt / 2;
    let m = truth.num_chains();
    let mut err = 0.0;
    let mut n = 0;
    for t in h..y.len() - h {
        for k in 0..m {
            err += (approx.theta(t, k) - exact[t * m + k]).abs();
            n += 1;
        }
    }
    let mae = err / n as f64;
    assert!(mae <= 0.1, "mean |θ - exact| = {mae}");
}
