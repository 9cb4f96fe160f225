#[path = "common/lru_model.rs"]
mod lru_model;

#[test]
fn random_sequences_match_model() {
    lru_model::check_sequences(50, 100_000).unwrap();
}

#[test]
fn no_reallocation_after_warm_up() {
    lru_model::check_no_growth(1_000_000).unwrap();
}
