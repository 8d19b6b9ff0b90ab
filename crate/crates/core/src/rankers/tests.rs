use std::collections::BTreeSet;

use super::train::Example;
use super::*;
use crate::corpus::Record;
use crate::mathcore::{finite_diff_check, DEFAULT_FD_STEP};
use proptest::prelude::*;

fn toy_log() -> InteractionLog {
    // user 0 likes 0,1; user 1 likes 1,2; user 2 likes 0,1,2; item 3 never liked
    let r = |u, items: Vec<u32>, sel: Vec<bool>| Record::new(u, items, sel);
    InteractionLog::from_records(
        3,
        5,
        vec![
            r(0, vec![0, 1, 3], vec![true, true, false]),
            r(1, vec![1, 2, 4], vec![true, true, false]),
            r(2, vec![0, 1, 2], vec![true, true, true]),
        ],
    )
    .unwrap()
}

fn random_model(kind: ModelKind, seed: u64) -> RankingModel {
    let mut m = RankingModel::zeros(kind, 4, 7, 4).unwrap();
    let mut s = RandomStream::new(seed);
    for x in m.params_mut() {
        *x = 0.5 * s.standard_normal();
    }
    m
}

fn random_examples(s: &mut RandomStream, pairwise: bool) -> Vec<Example> {
    (0..6)
        .map(|_| {
            let user = s.index(4) as u32;
            let pair = s.sample_distinct(7, 2);
            if pairwise {
                Example::Pair(Triplet {
                    user,
                    pos: pair[0] as u32,
                    neg: pair[1] as u32,
                })
            } else {
                Example::Point(Labeled {
                    user,
                    item: pair[0] as u32,
                    label: s.bernoulli(0.5),
                })
            }
        })
        .collect()
}

#[test]
fn zero_bpr_scores_are_zero() {
    let m = RankingModel::zeros(ModelKind::BprMf, 3, 4, 2).unwrap();
    for u in 0..3 {
        for i in 0..4 {
            assert_eq!(m.score(u, i), 0.0);
        }
    }
}

#[test]
fn item_pop_scores_are_counts() {
    let records = (0..7)
        .map(|u| Record::new(u, vec![2, 0], vec![true, u == 0]))
        .collect();
    let log = InteractionLog::from_records(8, 3, records).unwrap();
    let m = RankingModel::item_pop(&log);
    for u in 0..8 {
        assert_eq!(m.score(u, 2), 7.0);
        assert_eq!(m.score(u, 0), 1.0);
    }
    let a = recommend_topn(&m, 0, Candidates::Items(&[0, 1, 2]), 3).unwrap();
    let b = recommend_topn(&m, 5, Candidates::Items(&[0, 1, 2]), 3).unwrap();
    assert_eq!(a, vec![2, 0, 1]);
    assert_eq!(a, b);
}

#[test]
fn item_knn_identity_prefers_the_positive() {
    let mut sim = Matrix::zeros(4, 4);
    for i in 0..4 {
        sim.row_mut(i)[i] = 1.0;
    }
    let pos = vec![BTreeSet::from([2u32])];
    let m = RankingModel::item_knn_from_similarity(&sim, 20, &pos).unwrap();
    let ranked = recommend_topn(&m, 0, Candidates::Items(&[0, 1, 2, 3]), 4).unwrap();
    assert_eq!(ranked[0], 2);
}

#[test]
fn item_knn_cosine_matches_hand_count() {
    let log = toy_log();
    let m = RankingModel::item_knn(&log, 20);
    // items 0 and 1: co-liked by users 0 and 2, |0| = 2, |1| = 3
    let expected_01 = 2.0 / (2.0f64 * 3.0).sqrt();
    // user 1 likes 1 and 2; score of item 0 sums sim(0,1) + sim(0,2)
    let expected_02 = 1.0 / (2.0f64 * 2.0).sqrt();
    assert!((m.score(1, 0) - (expected_01 + expected_02)).abs() < 1e-12);
    assert_eq!(m.score(0, 3), 0.0);
}

#[test]
fn pairwise_loss_examples() {
    let m = RankingModel::zeros(ModelKind::BprMf, 1, 2, 1).unwrap();
    let t = [Triplet {
        user: 0,
        pos: 0,
        neg: 1,
    }; 3];
    assert!((loss_pairwise(&m, &t) - 3.0 * 2f64.ln()).abs() < 1e-12);
    let l = [Labeled {
        user: 0,
        item: 0,
        label: true,
    }];
    assert!((loss_pointwise(&m, &l) - 2f64.ln()).abs() < 1e-12);

    let mut m = RankingModel::zeros(ModelKind::BprMf, 1, 2, 1).unwrap();
    m.params_mut().copy_from_slice(&[1.0, 10.0, 0.0]);
    assert!(loss_pairwise(&m, &t[..1]) < 1e-4);
}

fn away_from_kinks(m: &RankingModel, e: &Example) -> bool {
    let (u, items) = match e {
        Example::Pair(t) => (t.user, vec![t.pos, t.neg]),
        Example::Point(l) => (l.user, vec![l.item]),
    };
    items.iter().all(|&i| {
        m.relu_margin(m.params(), u as usize, i as usize)
            .map_or(true, |g| g > 1e-3)
    })
}

#[test]
fn relu_margin_reports_the_nearest_kink() {
    assert_eq!(
        random_model(ModelKind::BprMf, 1).relu_margin(&[0.0; 44], 0, 0),
        None
    );
    let m = random_model(ModelKind::Mlp, 2);
    let g = m.relu_margin(m.params(), 1, 3).unwrap();
    assert!(g > 0.0 && g.is_finite());
    let z = RankingModel::zeros(ModelKind::NeuMf, 2, 2, 4).unwrap();
    assert_eq!(z.relu_margin(z.params(), 0, 0), Some(0.0));
}

#[test]
fn ranker_gradients_match_finite_differences() {
    let kinds = [
        ModelKind::BprMf,
        ModelKind::Gmf,
        ModelKind::Mlp,
        ModelKind::NeuMf,
    ];
    let mut s = RandomStream::new(3);
    for kind in kinds {
        for pairwise in [true, false] {
            for rep in 0..10 {
                let m = random_model(kind, 100 + rep);
                let mut batch = random_examples(&mut s, pairwise);
                batch.retain(|e| away_from_kinks(&m, e));
                let mut grad = vec![0.0; m.params().len()];
                m.batch_objective(m.params(), &batch, 0.01, Some(&mut grad));
                let err = finite_diff_check(
                    |p| m.batch_objective(p, &batch, 0.01, None),
                    m.params(),
                    &grad,
                    DEFAULT_FD_STEP,
                )
                .unwrap();
                assert!(err < 1e-4, "{kind} pairwise={pairwise} rep {rep}: {err}");
            }
        }
    }
}

#[test]
fn one_triplet_margin_grows() {
    let mut m =
        RankingModel::initialized(ModelKind::BprMf, 1, 2, 1, &mut RandomStream::new(4)).unwrap();
    let t = [Triplet {
        user: 0,
        pos: 0,
        neg: 1,
    }];
    let hyper = RankerHyper {
        dim: 1,
        learning_rate: 0.01,
        epochs: 1,
        batch_size: 1,
        l2: 0.0,
        ..RankerHyper::default()
    };
    let mut margin = m.score(0, 0) - m.score(0, 1);
    for step in 0..100 {
        m = train_pairwise(
            m,
            &[TrainSource::Triplets(&t)],
            &hyper,
            &mut RandomStream::new(step),
        )
        .unwrap();
        let next = m.score(0, 0) - m.score(0, 1);
        assert!(next > margin, "step {step}: {next} <= {margin}");
        margin = next;
    }
}

#[test]
fn gmf_fits_a_single_positive() {
    let m = RankingModel::initialized(ModelKind::Gmf, 1, 2, 4, &mut RandomStream::new(5)).unwrap();
    let l = [Labeled {
        user: 0,
        item: 1,
        label: true,
    }];
    let hyper = RankerHyper {
        dim: 4,
        learning_rate: 0.05,
        epochs: 200,
        batch_size: 1,
        l2: 0.0,
        ..RankerHyper::default()
    };
    let m = train_pointwise(
        m,
        &[TrainSource::Labeled(&l)],
        &hyper,
        &mut RandomStream::new(6),
    )
    .unwrap();
    assert!(sigmoid_of(m.score(0, 1)) > 0.9);
}

fn sigmoid_of(x: f64) -> f64 {
    crate::mathcore::sigmoid(x)
}

#[test]
fn all_positive_batch_lowers_pointwise_loss() {
    let mut m =
        RankingModel::initialized(ModelKind::Mlp, 2, 3, 4, &mut RandomStream::new(7)).unwrap();
    let l: Vec<Labeled> = (0..2)
        .flat_map(|u| {
            (0..3).map(move |i| Labeled {
                user: u,
                item: i,
                label: true,
            })
        })
        .collect();
    let hyper = RankerHyper {
        dim: 4,
        learning_rate: 0.01,
        epochs: 1,
        batch_size: 6,
        l2: 0.0,
        ..RankerHyper::default()
    };
    let mut loss = loss_pointwise(&m, &l);
    for step in 0..30 {
        m = train_pointwise(
            m,
            &[TrainSource::Labeled(&l)],
            &hyper,
            &mut RandomStream::new(step),
        )
        .unwrap();
        let next = loss_pointwise(&m, &l);
        assert!(next < loss);
        loss = next;
    }
}

#[test]
fn empty_sources_leave_model_unchanged() {
    let m = random_model(ModelKind::NeuMf, 8);
    let out = train_pairwise(
        m.clone(),
        &[],
        &RankerHyper::default(),
        &mut RandomStream::new(1),
    )
    .unwrap();
    assert_eq!(out, m);
    let out = train_pairwise(
        m.clone(),
        &[TrainSource::Triplets(&[])],
        &RankerHyper::default(),
        &mut RandomStream::new(1),
    )
    .unwrap();
    assert_eq!(out, m);
}

#[test]
fn memory_models_refuse_gradient_training() {
    let m = RankingModel::item_pop(&toy_log());
    assert!(train_pairwise(m, &[], &RankerHyper::default(), &mut RandomStream::new(0)).is_err());
}

#[test]
fn labeled_samples_cannot_train_pairwise() {
    let m = random_model(ModelKind::BprMf, 1);
    let l = [Labeled {
        user: 0,
        item: 0,
        label: true,
    }];
    let h = RankerHyper {
        epochs: 1,
        ..RankerHyper::default()
    };
    assert!(train_pairwise(
        m,
        &[TrainSource::Labeled(&l)],
        &h,
        &mut RandomStream::new(0)
    )
    .is_err());
}

#[test]
fn neumf_reduces_to_gmf() {
    let gmf = random_model(ModelKind::Gmf, 11);
    let mut neu = random_model(ModelKind::NeuMf, 12);
    neu.copy_gmf_embeddings(&gmf).unwrap();
    neu.zero_mlp_branch();
    let h: Vec<f64> = gmf.params()[gmf.params().len() - 4..].to_vec();
    let fusion = neu.output_weights_mut();
    fusion[..4].copy_from_slice(&h);
    for u in 0..4 {
        for i in 0..7 {
            assert!((neu.score(u, i) - gmf.score(u, i)).abs() < 1e-12);
        }
    }
}

#[test]
fn recommend_topn_rules() {
    let mut m = RankingModel::zeros(ModelKind::Gmf, 1, 5, 1).unwrap();
    // scores strictly increasing in item id
    for i in 0..5 {
        m.params_mut()[1 + i] = i as f64;
    }
    m.params_mut()[0] = 1.0;
    m.output_weights_mut()[0] = 1.0;
    let all: Vec<u32> = (0..5).collect();
    assert_eq!(
        recommend_topn(&m, 0, Candidates::Items(&all), 5).unwrap(),
        vec![4, 3, 2, 1, 0]
    );
    assert!(recommend_topn(&m, 0, Candidates::Items(&all), 6).is_err());
    let exclude = BTreeSet::from([4u32, 1]);
    assert_eq!(
        recommend_topn(&m, 0, Candidates::All { exclude: &exclude }, 2).unwrap(),
        vec![3, 2]
    );
    // ties go to the lower id
    let z = RankingModel::zeros(ModelKind::BprMf, 1, 4, 1).unwrap();
    assert_eq!(
        recommend_topn(&z, 0, Candidates::Items(&[3, 1, 2]), 2).unwrap(),
        vec![1, 2]
    );
}

#[test]
fn training_is_reproducible_per_kind() {
    let log = toy_log();
    let h = RankerHyper {
        dim: 4,
        epochs: 3,
        batch_size: 2,
        ..RankerHyper::default()
    };
    for kind in ModelKind::ALL {
        let a = train_model(kind, &log, &h, &mut RandomStream::new(9)).unwrap();
        let b = train_model(kind, &log, &h, &mut RandomStream::new(9)).unwrap();
        assert_eq!(a, b, "{kind}");
    }
}

#[test]
fn checkpoints_round_trip_every_kind() {
    let log = toy_log();
    let h = RankerHyper {
        dim: 4,
        epochs: 1,
        ..RankerHyper::default()
    };
    for kind in ModelKind::ALL {
        let m = train_model(kind, &log, &h, &mut RandomStream::new(2)).unwrap();
        let mut buf = Vec::new();
        m.to_matrix_file().write_to(&mut buf).unwrap();
        let back = RankingModel::from_matrix_file(&MatrixFile::read_from(buf.as_slice()).unwrap())
            .unwrap();
        assert_eq!(back, m, "{kind}");
    }
}

#[test]
fn negative_sampling_avoids_positives() {
    let data = ObservedData::from_log(&toy_log());
    let mut s = RandomStream::new(3);
    for _ in 0..200 {
        let j = data.sample_negative(2, &mut s).unwrap();
        assert!(j >= 3);
    }
}

proptest! {
    #[test]
    fn topn_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        // P_u = [1, 1] and Q_i = [x_i, c] score x_i + c
        let mut s = RandomStream::new(seed);
        let xs = s.standard_normal_vec(9);
        let build = |c: f64| {
            let mut m = RankingModel::zeros(ModelKind::BprMf, 1, 9, 2).unwrap();
            let p = m.params_mut();
            p[0] = 1.0;
            p[1] = 1.0;
            for (i, x) in xs.iter().enumerate() {
                p[2 + 2 * i] = *x;
                p[3 + 2 * i] = c;
            }
            m
        };
        let all: Vec<u32> = (0..9).collect();
        let base = recommend_topn(&build(0.0), 0, Candidates::Items(&all), 5).unwrap();
        let shifted = recommend_topn(&build(shift), 0, Candidates::Items(&all), 5).unwrap();
        prop_assert_eq!(base, shifted);
    }

    #[test]
    fn pairwise_loss_is_positive(margin in -30.0f64..30.0) {
        let mut m = RankingModel::zeros(ModelKind::BprMf, 1, 2, 1).unwrap();
        m.params_mut().copy_from_slice(&[1.0, margin, 0.0]);
        let t = Triplet { user: 0, pos: 0, neg: 1 };
        prop_assert!(loss_pairwise(&m, &[t]) > 0.0);
    }
}
