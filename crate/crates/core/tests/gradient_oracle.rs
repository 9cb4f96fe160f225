#[path = "common/gradient.rs"]
mod gradient;

#[test]
fn analytic_gradients_match_central_differences() {
    let worst = gradient::check_instances(100, 1e-4).unwrap();
    println!("max relative error {worst:.3e}");
}
