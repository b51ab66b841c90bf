use lleb::baselines::{
    ensemble_posterior_samples, laplace_from_features, laplace_sample, mcd_posterior_samples,
    train_ensemble,
};
use lleb::data::make_two_moons;
use lleb::metrics::{epistemic_variance, predictive, PosteriorSamples, SampleGroup};
use lleb::nets::{train_classifier, Architecture, ClassifierParams, TrainConfig};
use lleb::rng;
use lleb::Tensor;

mod common;
use common::laplace::{ggn_vs_hessian_error, laplace_covariance_error, linear};
use common::per_input;

#[test]
fn ggn_equals_finite_difference_hessian() {
    let err = ggn_vs_hessian_error();
    assert!(err < 1e-3, "{err:.3e}");
}

#[test]
fn laplace_sample_covariance_matches_inverse_precision() {
    let err = laplace_covariance_error(100_000);
    assert!(err < 0.05, "{err:.3e}");
}

#[test]
fn laplace_zero_noise_is_the_map_and_sampling_is_reproducible() {
    let p = ClassifierParams::init(&linear(3, 2), &mut rng::seeded(0)).unwrap();
    let post = laplace_from_features(&p, &rng::normal_vec(&mut rng::seeded(1), 30), 1.0).unwrap();
    assert_eq!(post.head_for_noise(&[0.0; 8]), p.head_flat());
    let a = laplace_sample(&post, 5, &mut rng::seeded(2))
        .unwrap()
        .full_vectors();
    let b = laplace_sample(&post, 5, &mut rng::seeded(2))
        .unwrap()
        .full_vectors();
    assert_eq!(a, b);
    assert!((post.precision.clone() - post.precision.transpose()).amax() < 1e-10);
}

fn hp(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-2,
        batch_size: 32,
        ..TrainConfig::default()
    }
}

#[test]
fn single_member_ensemble_is_the_single_model() {
    let data = make_two_moons(64, 0.1, 0).unwrap();
    let arch = Architecture::two_moons_mlp(8, 0.0);
    let (ens, _) = train_ensemble(&arch, &data, &hp(5), 1, 7).unwrap();
    let (single, _) = train_classifier(&arch, &data, &hp(5), 7).unwrap();
    assert_eq!(ens.members, vec![single.clone()]);
    let x = data.batch(&[0, 1, 2]);
    assert_eq!(
        ensemble_posterior_samples(&ens)
            .unwrap()
            .prob_rows(&x)
            .unwrap(),
        PosteriorSamples::point_mass(&single).prob_rows(&x).unwrap()
    );
}

#[test]
fn ensemble_members_differ_and_keep_order() {
    let data = make_two_moons(64, 0.1, 0).unwrap();
    let arch = Architecture::two_moons_mlp(8, 0.0);
    let (ens, _) = train_ensemble(&arch, &data, &hp(5), 5, 10).unwrap();
    assert_eq!(ens.seeds, vec![10, 11, 12, 13, 14]);
    assert!(ens.members.windows(2).any(|w| w[0] != w[1]));
    let s = ensemble_posterior_samples(&ens).unwrap();
    assert_eq!(s.len(), 5);
    let v = s.full_vectors();
    for (m, row) in ens.members.iter().zip(&v) {
        assert_eq!(&m.flatten(), row);
    }
}

#[test]
fn identical_members_have_no_epistemic_variance() {
    let p =
        ClassifierParams::init(&Architecture::two_moons_mlp(8, 0.0), &mut rng::seeded(0)).unwrap();
    let s = PosteriorSamples::concat(vec![PosteriorSamples::point_mass(&p); 3]).unwrap();
    let rows = s
        .prob_rows(&Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 0.5]).unwrap())
        .unwrap();
    assert!(per_input(&rows)
        .iter()
        .all(|r| epistemic_variance(r) == 0.0));
    assert_eq!(
        predictive(&[vec![0.6, 0.4], vec![0.8, 0.2]]).unwrap(),
        vec![0.7, 0.30000000000000004]
    );
}

#[test]
fn dropout_passes() {
    let x = Tensor::matrix(3, 2, vec![0.1, 0.2, -1.0, 0.5, 2.0, 2.0]).unwrap();
    let p0 =
        ClassifierParams::init(&Architecture::two_moons_mlp(8, 0.0), &mut rng::seeded(0)).unwrap();
    // Rate 0 keeps a dropout layer that never fires.
    let rows = mcd_posterior_samples(&p0, 10, 1)
        .unwrap()
        .prob_rows(&x)
        .unwrap();
    assert!(rows.iter().all(|r| r == &rows[0]));

    let p = ClassifierParams::init(&Architecture::mnist(), &mut rng::seeded(0)).unwrap();
    let img = Tensor::new(
        vec![1, 28, 28, 1],
        rng::normal_vec(&mut rng::seeded(1), 784),
    )
    .unwrap();
    let a = mcd_posterior_samples(&p, 10, 2).unwrap();
    let b = mcd_posterior_samples(&p, 10, 2).unwrap();
    let (ra, rb) = (a.prob_rows(&img).unwrap(), b.prob_rows(&img).unwrap());
    assert_eq!(ra, rb);
    assert!(epistemic_variance(&per_input(&ra)[0]) > 0.0);
    assert!(matches!(
        &a.groups[0],
        SampleGroup::Dropout { passes: 10, .. }
    ));
}
