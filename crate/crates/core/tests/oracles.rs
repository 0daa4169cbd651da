mod common;

#[test]
fn network_matches_plain_cnn() {
    let err = common::network_oracle_error(100);
    assert!(err <= 1e-12, "max relative error {err}");
}

#[test]
fn maap_layer_matches_brute_force() {
    assert_eq!(common::maap_layer_oracle_mismatches(1000), 0);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let (n, worst) = common::gradient_check();
    assert!(n >= 200, "only {n} components compared");
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn plain_cnn_agrees_with_trainer_logits_inside_linear_range() {
    // Small weights keep every dense output inside (0, 1), where the clamp is
    // inactive and the float trainer's logits match the plain oracle.
    use maap_core::network;
    use maap_core::trainer;
    let config = network::default_config();
    let mut weights = common::random_weights(&config, 0.05, 41);
    weights.layers[2].bias.iter_mut().for_each(|b| *b = 0.5);
    let data = common::random_dataset(10, 28, 28, 42);
    let mut checked = 0;
    for i in 0..data.len() {
        let want = common::plain_forward(&config, &weights, data.image(i), 1.0);
        let got = trainer::logits(&config, &weights, data.image(i)).unwrap();
        if want.iter().all(|v| *v > 0.0 && *v < 1.0) {
            checked += 1;
            for (g, w) in got.iter().zip(&want) {
                assert!(common::relative_error(*g, *w) < 1e-12);
            }
        }
    }
    assert!(checked > 0);
}
