mod common;

use common::uniform_matrix;
use kpgroup::dissim::{
    anti_offsets_distance, apply_restrictions, conv_weight_distance, offsets_distance, DissimError,
    DissimilarityMatrix, Provenance,
};
use kpgroup::ingest::Tensor;
use kpgroup::schema::{ClassSpec, Head, KeypointSchema};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn means_strategy() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0).prop_map(|(x, y)| [x, y]), 2..12)
}

fn schema_for(n: usize, split: usize) -> KeypointSchema {
    let split = split.clamp(1, n);
    let mut classes = vec![ClassSpec::new(1, "a", split)];
    if n > split {
        classes.push(ClassSpec::new(2, "b", n - split));
    }
    KeypointSchema::new(classes).unwrap()
}

fn assert_well_formed(m: &DissimilarityMatrix) {
    for i in 0..m.n() {
        assert_eq!(m.get(i, i), 0.0);
        for j in 0..m.n() {
            assert_eq!(m.get(i, j).to_bits(), m.get(j, i).to_bits());
        }
    }
}

proptest! {
    #[test]
    fn offsets_matrices_are_symmetric_with_zero_diagonal(means in means_strategy()) {
        let d = offsets_distance(&means).unwrap();
        let anti = anti_offsets_distance(&means).unwrap();
        assert_well_formed(&d);
        assert_well_formed(&anti);
        prop_assert_eq!(anti.provenance(), Provenance::AntiOffsets);
        for i in 0..means.len() {
            for j in 0..means.len() {
                prop_assert!(d.get(i, j) >= 0.0);
                prop_assert_eq!(anti.get(i, j), -d.get(i, j));
            }
        }
    }

    #[test]
    fn permuting_keypoints_permutes_the_matrix(
        (means, perm) in means_strategy().prop_flat_map(|m| {
            let n = m.len();
            (Just(m), Just((0..n).collect::<Vec<usize>>()).prop_shuffle())
        })
    ) {
        let d = offsets_distance(&means).unwrap();
        let reordered: Vec<[f64; 2]> = perm.iter().map(|&p| means[p]).collect();
        let e = offsets_distance(&reordered).unwrap();
        let p = d.permuted(&perm);
        prop_assert_eq!(e.values(), p.values());
    }

    #[test]
    fn restrictions_are_idempotent_and_dominate(n in 2usize..12, split in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = uniform_matrix(&mut rng, n);
        let schema = schema_for(n, split);
        let once = apply_restrictions(&d, &schema).unwrap();
        let twice = apply_restrictions(&once, &schema).unwrap();
        prop_assert_eq!(&once, &twice);
        assert_well_formed(&once);
        let max = once.max_finite();
        for i in 0..n {
            for j in 0..n {
                if i != j && schema.same_class(i, j) {
                    prop_assert!(once.is_restricted(i, j));
                    prop_assert!(once.get(i, j) > max);
                } else {
                    prop_assert!(!once.is_restricted(i, j));
                    prop_assert_eq!(once.get(i, j).to_bits(), d.get(i, j).to_bits());
                }
            }
        }
    }

    #[test]
    fn conv_distance_is_euclidean_over_concatenated_rows(
        n in 2usize..7,
        f in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = schema_for(n, n);
        let reg: Vec<f64> = (0..2 * n * f).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let heat: Vec<f64> = reg[..n * f].to_vec();
        let dr = conv_weight_distance(&Tensor::from_f64(vec![2 * n, f], reg.clone()).unwrap(), None, Head::Reg, &schema).unwrap();
        let dh = conv_weight_distance(&Tensor::from_f64(vec![n, f], heat.clone()).unwrap(), None, Head::Heat, &schema).unwrap();
        assert_well_formed(&dr);
        assert_well_formed(&dh);
        for i in 0..n {
            for j in 0..n {
                let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                let want_h = sq(&heat[i * f..(i + 1) * f], &heat[j * f..(j + 1) * f]).sqrt();
                let want_r = (sq(&reg[2 * i * f..(2 * i + 2) * f], &reg[2 * j * f..(2 * j + 2) * f])).sqrt();
                prop_assert!((dh.get(i, j) - want_h).abs() <= 1e-12);
                prop_assert!((dr.get(i, j) - want_r).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn hand_computed_offsets_matrix() {
    let d = offsets_distance(&[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
    assert_eq!(
        d.values(),
        &[0.0, 1.0, 1.0, 1.0, 0.0, 2f64.sqrt(), 1.0, 2f64.sqrt(), 0.0]
    );
    let anti = anti_offsets_distance(&[[0.0, 0.0], [3.0, 4.0]]).unwrap();
    assert_eq!(anti.get(0, 1), -5.0);
}

#[test]
fn sentinel_value_by_hand() {
    // two same-class keypoints at 0.1, largest entry 2
    let schema = KeypointSchema::new(vec![ClassSpec::new(1, "a", 2), ClassSpec::new(2, "b", 1)]).unwrap();
    let d = DissimilarityMatrix::from_fn(3, Provenance::External, |i, j| match (i, j) {
        (0, 1) => 0.1,
        (0, 2) => 2.0,
        _ => 1.5,
    });
    let r = apply_restrictions(&d, &schema).unwrap();
    assert_eq!(r.get(0, 1), 3e6);
    assert_eq!(r.get(1, 0), 3e6);
    assert_eq!(r.get(0, 2), 2.0);
}

#[test]
fn conv_examples() {
    let schema = schema_for(2, 2);
    let heat = Tensor::from_f64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(
        conv_weight_distance(&heat, None, Head::Heat, &schema)
            .unwrap()
            .get(0, 1),
        2f64.sqrt()
    );
    let reg = Tensor::from_f64(vec![4, 2], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    assert_eq!(
        conv_weight_distance(&reg, None, Head::Reg, &schema).unwrap().get(0, 1),
        2f64.sqrt()
    );
    assert!(matches!(
        conv_weight_distance(&heat, None, Head::Reg, &schema),
        Err(DissimError::RowCount { .. })
    ));
    // spatial kernels flatten into the feature
    let k = Tensor::from_f64(vec![2, 1, 2, 2], vec![0.0, 0.0, 0.0, 3.0, 0.0, 4.0, 0.0, 0.0]).unwrap();
    assert_eq!(
        conv_weight_distance(&k, None, Head::Heat, &schema).unwrap().get(0, 1),
        5.0
    );
}
