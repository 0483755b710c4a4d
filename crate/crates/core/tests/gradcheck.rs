//! Finite-difference gradient checks.

mod common;

use common::grad;

#[test]
fn matmul_all_transposes() {
    grad::matmul_all_transposes();
}

#[test]
fn batch_matmul_plain_and_transposed() {
    grad::batch_matmul_plain_and_transposed();
}

#[test]
fn elementwise_binary() {
    grad::elementwise_binary();
}

#[test]
fn bias_and_scale() {
    grad::bias_and_scale();
}

#[test]
fn pointwise_nonlinearities() {
    grad::pointwise_nonlinearities();
}

#[test]
fn softmax_with_and_without_mask() {
    grad::softmax_with_and_without_mask();
}

#[test]
fn layer_norm_all_inputs() {
    grad::layer_norm_all_inputs();
}

#[test]
fn gather_rows() {
    grad::gather_rows();
}

#[test]
fn shape_plumbing() {
    grad::shape_plumbing();
}

#[test]
fn reductions() {
    grad::reductions();
}

#[test]
fn diagonal_cross_entropy() {
    grad::diagonal_cross_entropy();
}

#[test]
fn kl_student_side() {
    grad::kl_student_side();
}

#[test]
fn squared_distances() {
    grad::squared_distances();
}

#[test]
fn cross_refine_parameters() {
    grad::cross_refine_parameters();
}

#[test]
fn aggregator_parameters() {
    grad::aggregator_parameters();
}

#[test]
fn encoder_parameters_every_kind() {
    grad::encoder_parameters_every_kind();
}

#[test]
fn full_joint_objective() {
    grad::full_joint_objective();
}
