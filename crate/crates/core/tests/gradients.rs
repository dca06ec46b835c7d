mod common;


#[test]
fn conv_matches_finite_differences() {
    common::conv_gradients().unwrap();
}

#[test]
fn batch_norm_matches_finite_differences() {
    common::batchnorm_gradients().unwrap();
}

#[test]
fn max_pool_matches_finite_differences() {
    common::maxpool_gradients().unwrap();
}

#[test]
fn capsule_layer_matches_finite_differences_for_one_to_three_iterations() {
    common::routing_gradients().unwrap();
}

#[test]
fn losses_match_finite_differences() {
    common::loss_gradients().unwrap();
}

#[test]
fn networks_match_finite_differences() {
    println!("{}", common::network_gradients().unwrap());
}
