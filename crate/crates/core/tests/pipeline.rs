use image::{Rgb, RgbImage};

use sane_core::cli::bench_rows;
use sane_core::config::RunConfig;
use sane_core::denoiser::{CountingBackend, MockBackend};
use sane_core::guidance::{average_aggregate, cfg_combine, specific_guidance_term, GuidanceWeights};
use sane_core::latent::Latent;
use sane_core::pipeline::{
    estimate_cost, per_step_combination, replay_manifest, run_edit, EditConfig, EditManifest, EditStrategy,
    NoiseEstimates,
};
use sane_core::specifier::{AmbiguousInstruction, SpecificInstructionSet};

fn lat(c: usize, h: usize, w: usize, v: Vec<f32>) -> Latent {
    Latent::from_shape_vec(c, h, w, v).unwrap()
}

#[test]
fn sane_and_average_differ_when_deltas_are_disjoint() {
    // Instruction 0 changes the left column only, instruction 1 the right.
    let zero = lat(1, 1, 2, vec![0.0, 0.0]);
    let est = NoiseEstimates {
        uncond: zero.clone(),
        image: zero.clone(),
        full: zero.clone(),
        specifics: vec![lat(1, 1, 2, vec![2.0, 0.0]), lat(1, 1, 2, vec![0.0, 4.0])],
    };
    let w = GuidanceWeights::new(1.5, 7.0, 1.0).unwrap();
    let (sane, mask) = per_step_combination(EditStrategy::Sane, &est, &w).unwrap();
    let (avg, none) = per_step_combination(EditStrategy::SaneAvg, &est, &w).unwrap();
    assert_eq!(mask.unwrap().indices().iter().copied().collect::<Vec<_>>(), vec![0, 1]);
    assert!(none.is_none());
    assert_eq!(sane.to_vec(), vec![2.0, 4.0]);
    assert_eq!(avg.to_vec(), vec![1.0, 2.0]);

    let base = cfg_combine(&est.uncond, &est.image, &est.full, &w).unwrap();
    let term = specific_guidance_term(&average_aggregate(&est.specifics).unwrap(), &est.image, 1.0).unwrap();
    assert_eq!(
        avg.to_vec(),
        (base.as_array() + term.as_array()).iter().copied().collect::<Vec<_>>()
    );
}

#[test]
fn no_c_variant_drops_text_guidance_only() {
    let est = NoiseEstimates {
        uncond: lat(1, 1, 1, vec![0.0]),
        image: lat(1, 1, 1, vec![1.0]),
        full: lat(1, 1, 1, vec![3.0]),
        specifics: vec![lat(1, 1, 1, vec![2.0])],
    };
    let w = GuidanceWeights::new(1.5, 7.0, 2.0).unwrap();
    let (full, _) = per_step_combination(EditStrategy::Sane, &est, &w).unwrap();
    let (no_c, _) = per_step_combination(EditStrategy::SaneNoC, &est, &w).unwrap();
    // 0 + 1.5 * 1 + 7 * 2 + 2 * 1 and the same without the 7 * 2 term.
    assert_eq!(full.to_vec(), vec![17.5]);
    assert_eq!(no_c.to_vec(), vec![3.5]);
}

fn cat() -> RgbImage {
    RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 7) as u8, (y * 7) as u8, 90]))
}

fn set() -> SpecificInstructionSet {
    SpecificInstructionSet::manual(vec![
        "add a hat to the cat".into(),
        "give the cat sunglasses".into(),
        "put a bow tie on the cat".into(),
    ])
    .unwrap()
}

#[test]
fn every_strategy_costs_what_the_model_says() {
    let backend = CountingBackend::new(MockBackend::new(8).unwrap());
    let c = AmbiguousInstruction::new("make the cat look funny").unwrap();
    for strategy in EditStrategy::ALL {
        for n in 1..=3 {
            let cfg = EditConfig {
                steps: 5,
                image_size: (32, 32),
                n_specific: n,
                ..EditConfig::default()
            };
            backend.reset();
            let out = run_edit(&cat(), &c, Some(&set()), &cfg, strategy, &backend).unwrap();
            assert_eq!(backend.calls(), estimate_cost(strategy, n, 5), "{strategy} N={n}");
            assert_eq!(out.manifest.total_calls, backend.calls());
        }
    }
}

#[test]
fn manifest_survives_disk_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let c = AmbiguousInstruction::new("make the cat look funny").unwrap();
    let cfg = EditConfig {
        steps: 6,
        seed: 77,
        image_size: (32, 32),
        dump_masks: true,
        ..EditConfig::default()
    };
    let backend = MockBackend::new(8).unwrap();
    let out = run_edit(&cat(), &c, Some(&set()), &cfg, EditStrategy::Sane, &backend).unwrap();
    assert!(out
        .manifest
        .steps
        .iter()
        .all(|s| s.mask.as_ref().is_some_and(|m| m.dim() == (4, 4))));
    let path = dir.path().join("manifest.json");
    out.manifest.write_atomic(&path).unwrap();
    let loaded = EditManifest::load(&path).unwrap();
    assert_eq!(loaded, out.manifest);
    let report = replay_manifest(&loaded, &cat()).unwrap();
    assert!(report.matches(), "{report:?}");
}

#[test]
fn bench_wall_clock_grows_with_n() {
    let mut cfg = RunConfig::default();
    cfg.edit.width = 64;
    cfg.edit.height = 64;
    cfg.sampler.steps = 10;
    let rows = bench_rows(&cfg, 0, 3, 5).unwrap();
    assert!(rows.iter().all(|r| r.calls == r.expected_calls));
    let t: Vec<f64> = rows.iter().map(|r| r.wall_ms_min).collect();
    // Calls go 3, 4, 5, 6 per step; N=3 makes twice the calls of N=0.
    assert!(t[3] > t[0], "{t:?}");
    for k in 1..t.len() {
        assert!(
            t[k] > 0.8 * t[k - 1],
            "wall clock fell sharply from N={} to N={k}: {t:?}",
            k - 1
        );
    }
}
