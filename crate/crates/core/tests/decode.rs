mod common;

use common::recovery_error;
use kpgroup::decode::{
    base_refine, decode_full, gaussian_mask, local_peaks, rescore, rescore_refine, sweep_sigma, DecodeParams,
    Detection, FeatureMap, HeadTensors, KeypointSource, LabeledScene, Plane, Refine,
};
use kpgroup::schema::Grouping;
use kpgroup::synth::{
    figure4_case, random_grouping, random_scene, random_schema, render, RandomSceneParams, SceneSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params(refine: Refine) -> DecodeParams {
    DecodeParams {
        refine,
        ..DecodeParams::default()
    }
}

#[test]
fn identity_grouping_roundtrip_in_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..60 {
        let schema = random_schema(&mut rng, 3, 5);
        let g = Grouping::identity(&schema);
        let spec = random_scene(&mut rng, &schema, &g, &RandomSceneParams::default()).unwrap();
        let r = render(&spec, &schema, &g).unwrap();
        let base = decode_full(&r.heads, &schema, &g, &params(Refine::Base)).unwrap();
        let resc = decode_full(&r.heads, &schema, &g, &params(Refine::Rescore)).unwrap();
        for dets in [&base, &resc] {
            let (b, k) = recovery_error(&r.truth, dets).unwrap_or_else(|| panic!("scene {i}"));
            assert!(b <= 0.5 && k <= 0.5, "scene {i}: box {b} kp {k}");
        }
        // where the closest peak is the true one both refinements agree
        for (x, y) in base.iter().zip(&resc) {
            let px: Vec<_> = x.keypoints.iter().map(|k| (k.x, k.y)).collect();
            let py: Vec<_> = y.keypoints.iter().map(|k| (k.x, k.y)).collect();
            assert_eq!(px, py);
        }
    }
}

#[test]
fn grouped_roundtrip_recovers_original_keypoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..60 {
        let schema = random_schema(&mut rng, 3, 5);
        let g = random_grouping(&mut rng, &schema);
        let spec = random_scene(&mut rng, &schema, &g, &RandomSceneParams::default()).unwrap();
        let r = render(&spec, &schema, &g).unwrap();
        let dets = decode_full(&r.heads, &schema, &g, &params(Refine::Rescore)).unwrap();
        let (_, k) = recovery_error(&r.truth, &dets).unwrap_or_else(|| panic!("scene {i}"));
        assert!(k <= 0.5, "scene {i} grouping {}: kp {k}", g.notation());
    }
}

#[test]
fn object_order_does_not_change_the_decode() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let schema = random_schema(&mut rng, 3, 4);
        let g = random_grouping(&mut rng, &schema);
        let spec = random_scene(&mut rng, &schema, &g, &RandomSceneParams::default()).unwrap();
        let mut reversed = spec.clone();
        reversed.objects.reverse();
        let a = decode_full(
            &render(&spec, &schema, &g).unwrap().heads,
            &schema,
            &g,
            &DecodeParams::default(),
        )
        .unwrap();
        let b = decode_full(
            &render(&reversed, &schema, &g).unwrap().heads,
            &schema,
            &g,
            &DecodeParams::default(),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}

fn figure4_detection(case: &kpgroup::synth::Figure4Case, spec: &SceneSpec) -> (HeadTensors, Detection) {
    let r = render(spec, &case.schema, &case.grouping).unwrap();
    let dets = kpgroup::decode::decode_detections(&r.heads, &case.schema, 10, 0.1).unwrap();
    assert_eq!(dets.len(), 1);
    (r.heads, dets[0].clone())
}

#[test]
fn closest_peak_fails_where_rescoring_succeeds() {
    let case = figure4_case();
    let (heads, det) = figure4_detection(&case, &case.spec);
    let coarse = kpgroup::decode::coarse_keypoints(&det, &heads, &case.grouping, &case.schema);
    assert_eq!(coarse[0], case.coarse);
    let plane = heads.kp_heatmap.plane(0);
    let base = base_refine(plane, &heads.kp_offset, coarse[0], &det, 0.1);
    assert_eq!([base.x, base.y], case.distractor);
    let resc = rescore_refine(plane, &heads.kp_offset, coarse[0], case.sigma).unwrap();
    assert_eq!([resc.x, resc.y], case.true_keypoint);
    // hand-evaluated products
    assert!((resc.score - 0.9 * (-0.5f64).exp()).abs() < 1e-12);
    let rescored = rescore(plane, coarse[0], case.sigma).unwrap();
    assert!((rescored.get(17, 20) - 0.15 * (-0.125f64).exp()).abs() < 1e-12);
}

#[test]
fn break_even_amplitude_flips_rescoring() {
    let case = figure4_case();
    let a_star = case.break_even();
    for (factor, expected) in [(0.99, case.true_keypoint), (1.01, case.distractor)] {
        let spec = case.with_distractor_amplitude(a_star * factor);
        let (heads, det) = figure4_detection(&case, &spec);
        let plane = heads.kp_heatmap.plane(0);
        let resc = rescore_refine(plane, &heads.kp_offset, case.coarse, case.sigma).unwrap();
        assert_eq!([resc.x, resc.y], expected, "factor {factor}");
        let base = base_refine(plane, &heads.kp_offset, case.coarse, &det, 0.1);
        assert_eq!([base.x, base.y], case.distractor);
    }
}

fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    (0..h * w).map(|_| rng.gen_range(0..=16) as f64 / 16.0).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rescored_map_is_bounded_by_heatmap_and_mask_support(
        h in 1usize..20,
        w in 1usize..20,
        cx in -3.0f64..23.0,
        cy in -3.0f64..23.0,
        sigma in 0.05f64..6.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_plane(&mut rng, h, w);
        let plane = Plane::new(h, w, &data);
        let r = rescore(plane, [cx, cy], sigma).unwrap();
        prop_assert_eq!(r.check_invariants(plane), Ok(()));
        let mask = gaussian_mask([cx, cy], sigma, h, w).unwrap();
        prop_assert_eq!(mask.get(mask.nearest[0], mask.nearest[1]), 1.0);
    }

    #[test]
    fn tiny_sigma_returns_the_nearest_pixel(
        h in 2usize..16,
        w in 2usize..16,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = random_plane(&mut rng, h, w);
        let coarse = [fx * (w - 1) as f64, fy * (h - 1) as f64];
        let nearest = [coarse[0].round() as usize, coarse[1].round() as usize];
        data[nearest[1] * w + nearest[0]] = data[nearest[1] * w + nearest[0]].max(1.0 / 16.0);
        let offsets = FeatureMap::zeros(2, h, w);
        let kp = rescore_refine(Plane::new(h, w, &data), &offsets, coarse, 1e-3).unwrap();
        prop_assert_eq!([kp.x, kp.y], [nearest[0] as f64, nearest[1] as f64]);
    }

    #[test]
    fn huge_sigma_returns_the_global_maximum(
        h in 2usize..16,
        w in 2usize..16,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
        scale in 1.0f64..10.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = random_plane(&mut rng, h, w);
        for v in &mut data {
            *v = v.min(9.0 / 16.0);
        }
        let peak = rng.gen_range(0..h * w);
        data[peak] = 1.0;
        let diag = ((h * h + w * w) as f64).sqrt();
        let offsets = FeatureMap::zeros(2, h, w);
        let coarse = [fx * (w - 1) as f64, fy * (h - 1) as f64];
        let kp = rescore_refine(Plane::new(h, w, &data), &offsets, coarse, scale * diag).unwrap();
        prop_assert_eq!([kp.x, kp.y], [(peak % w) as f64, (peak / w) as f64]);
    }

    #[test]
    fn peaks_dominate_their_neighbourhood(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_plane(&mut rng, h, w);
        let plane = Plane::new(h, w, &data);
        let peaks = local_peaks(plane, 0.1);
        for p in &peaks {
            for y in p.y.saturating_sub(1)..=(p.y + 1).min(h - 1) {
                for x in p.x.saturating_sub(1)..=(p.x + 1).min(w - 1) {
                    prop_assert!(plane.get(x, y) <= p.score);
                }
            }
        }
        for pair in peaks.windows(2) {
            prop_assert!(pair[0].score >= pair[1].score);
        }
        if let Some(best) = data.iter().copied().fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v)))) {
            prop_assert_eq!(peaks.first().map(|p| p.score), (best >= 0.1).then_some(best));
        }
    }
}

#[test]
fn rescore_with_no_signal_keeps_coarse() {
    let data = vec![0.0; 36];
    let offsets = FeatureMap::zeros(2, 6, 6);
    let kp = rescore_refine(Plane::new(6, 6, &data), &offsets, [2.2, 3.7], 1.0).unwrap();
    assert_eq!(
        (kp.x, kp.y, kp.score, kp.source),
        (2.2, 3.7, 0.0, KeypointSource::Coarse)
    );
}

#[test]
fn sigma_sweep_prefers_the_smallest_best_sigma() {
    let case = figure4_case();
    let r = render(&case.spec, &case.schema, &case.grouping).unwrap();
    let scenes = vec![LabeledScene {
        heads: r.heads,
        truth: r.truth,
    }];
    let p = DecodeParams::default();
    let sweep = sweep_sigma(&scenes, &case.schema, &case.grouping, &p, &[0.5, 1.0, 2.0, 4.0], 0.05).unwrap();
    let acc: Vec<f64> = sweep.per_sigma.iter().map(|&(_, a)| a).collect();
    assert_eq!(acc, vec![0.0, 1.0, 1.0, 1.0]);
    assert_eq!(sweep.best_sigma, 1.0);
    assert!(acc.iter().all(|&a| a <= sweep.best_accuracy));
    let single = sweep_sigma(&scenes, &case.schema, &case.grouping, &p, &[0.5], 0.05).unwrap();
    assert_eq!(single.best_sigma, 0.5);
}
