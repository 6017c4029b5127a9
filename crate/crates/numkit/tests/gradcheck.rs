//! Analytic gradients from the tape against central finite differences.

#[path = "common/gradcheck_cases.rs"]
#[allow(dead_code)]
mod cases;

fn check(f: fn(&mut Vec<(String, f64)>)) {
    let mut out = Vec::new();
    f(&mut out);
    assert!(!out.is_empty());
    for (name, worst) in out {
        println!("{name}: worst relative error {worst:.3e}");
        assert!(
            worst < cases::TOL,
            "{name}: relative error {worst} exceeds {}",
            cases::TOL
        );
    }
}

#[test]
fn matmul_sum_of_entries_gradient() {
    check(cases::matmul_sum_of_entries_gradient);
}

#[test]
fn linear_gradient() {
    check(cases::linear_gradient);
}

#[test]
fn elementwise_binary_gradients() {
    check(cases::elementwise_binary_gradients);
}

#[test]
fn gelu_gradient_at_seventeen_points() {
    check(cases::gelu_gradient_at_seventeen_points);
}

#[test]
fn layernorm_gradient() {
    check(cases::layernorm_gradient);
}

#[test]
fn softmax_gradient() {
    check(cases::softmax_gradient);
}

#[test]
fn attention_gradient() {
    check(cases::attention_gradient);
}

#[test]
fn row_and_group_broadcast_gradients() {
    check(cases::row_and_group_broadcast_gradients);
}

#[test]
fn scale_and_mse_gradients() {
    check(cases::scale_and_mse_gradients);
}

#[test]
fn composite_chain_gradient() {
    check(cases::composite_chain_gradient);
}
